//! Command-line front end. Each subcommand loads an optional TOML run
//! configuration, applies flag overrides, writes a resolved-configuration
//! snapshot into the output directory, and maps errors to exit codes:
//! 0 success, 1 runtime failure, 2 configuration or contract violation.

pub mod data;
pub mod plot;

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};

use crate::denoise::{obnlm_denoise, ObnlmParams};
use crate::error::{MassegError, Result};
use crate::inference::{segment_2d, segment_with_rescaling, stubs::ConstantStub, PatchSegmenter,
    ScaleSchedule};
use crate::metrics::{
    compactness, cumulative_diameter_histogram, dice, equivalent_diameter, records_csv,
    dsc_vs_property, EvalRecord, ScatterProperty,
};
use crate::models::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use crate::training::{cross_validate, train, TrainConfig};
use crate::volumes::{
    write_manifest, write_volume, CaseEntry, Manifest, PhantomSpec,
    generate_phantom, Volume, read_volume_u8,
};

/// Environment variable consulted for the worker-thread count when `--serial`
/// is not passed and the configuration does not pin `threads`.
pub const THREADS_ENV: &str = "MASSEG_THREADS";

#[derive(Parser)]
#[command(name = "masseg", version, about = "Volumetric breast-mass segmentation toolkit")]
struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Base RNG seed, overriding the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory, created if missing.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Run cases serially even if a thread count is configured.
    #[arg(long, global = true)]
    serial: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic phantom cases and a dataset manifest.
    Phantom,
    /// Speckle-denoise every image listed in the manifest.
    Denoise,
    /// Train one model on every case of the manifest.
    Train,
    /// Case-level k-fold cross-validation.
    Crossval,
    /// Segment annotated lesions with the recursive down-sampling loop.
    Segment {
        /// Use a constant-background stub instead of a trained model.
        #[arg(long)]
        stub: bool,
    },
    /// Evaluate predicted masks against ground truth and render plots.
    Report,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Phantom => "phantom",
            Command::Denoise => "denoise",
            Command::Train => "train",
            Command::Crossval => "crossval",
            Command::Segment { .. } => "segment",
            Command::Report => "report",
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PhantomCmdConfig {
    pub count: usize,
    pub spec: PhantomSpec,
}

impl Default for PhantomCmdConfig {
    fn default() -> Self {
        PhantomCmdConfig { count: 10, spec: PhantomSpec::default() }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SegmentCmdConfig {
    /// Checkpoint produced by `train` or `crossval`; ignored in stub mode.
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated strictly decreasing down-sampling factors.
    pub schedule: String,
    /// Patch extents (z, y, x) in voxels.
    pub patch_extents: Vec<usize>,
    /// Slice indices for 2-D models; empty means the annotated centre slice.
    pub slices: Vec<usize>,
}

impl Default for SegmentCmdConfig {
    fn default() -> Self {
        SegmentCmdConfig {
            checkpoint: None,
            schedule: "0.75,0.5".into(),
            patch_extents: vec![16, 32, 32],
            slices: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct ReportCmdConfig {
    /// Directory holding predicted masks from `segment`.
    pub predictions: Option<PathBuf>,
    /// Apply the digitization bias correction to compactness values.
    pub bias_corrected: bool,
}

impl Default for ReportCmdConfig {
    fn default() -> Self {
        ReportCmdConfig { predictions: None, bias_corrected: true }
    }
}

/// The full run configuration. Every field has a default, so a config file
/// only needs the sections it changes.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    /// Worker threads for per-case work; 0 consults `MASSEG_THREADS`, falling
    /// back to 1. Outputs are identical for any thread count.
    pub threads: usize,
    /// Dataset manifest consumed by denoise, train, crossval, segment, report.
    pub manifest: Option<PathBuf>,
    pub phantom: PhantomCmdConfig,
    pub denoise: ObnlmParams,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub segment: SegmentCmdConfig,
    pub report: ReportCmdConfig,
}

impl RunConfig {
    pub fn from_file(path: &Path) -> Result<RunConfig> {
        let text = fs::read_to_string(path).map_err(|e| {
            MassegError::Config(format!("cannot read config {}: {e}", path.display()))
        })?;
        toml::from_str(&text)
            .map_err(|e| MassegError::Config(format!("config {}: {e}", path.display())))
    }
}

fn exit_code(err: &MassegError) -> i32 {
    match err {
        MassegError::Config(_) | MassegError::ShapeMismatch(_) | MassegError::State(_) => 2,
        _ => 1,
    }
}

/// Parses the process arguments, runs the selected subcommand, and returns
/// the process exit code.
pub fn run_cli() -> i32 {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            exit_code(&err)
        }
    }
}

fn resolve_threads(config: &RunConfig, serial: bool) -> Result<usize> {
    if serial {
        return Ok(1);
    }
    if config.threads > 0 {
        return Ok(config.threads);
    }
    match std::env::var(THREADS_ENV) {
        Ok(v) => v.trim().parse::<usize>().ok().filter(|&n| n > 0).ok_or_else(|| {
            MassegError::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))
        }),
        Err(_) => Ok(1),
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut config = match &cli.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    let out = cli
        .out
        .ok_or_else(|| MassegError::Config("--out <dir> is required".into()))?;
    fs::create_dir_all(&out)
        .map_err(|e| MassegError::Io { path: out.display().to_string(), detail: e.to_string() })?;
    let threads = resolve_threads(&config, cli.serial)?;
    write_snapshot(&config, cli.command.name(), threads, &out)?;
    match cli.command {
        Command::Phantom => cmd_phantom(&config, threads, &out),
        Command::Denoise => cmd_denoise(&config, threads, &out),
        Command::Train => cmd_train(&config, &out),
        Command::Crossval => cmd_crossval(&config, &out),
        Command::Segment { stub } => cmd_segment(&config, stub, &out),
        Command::Report => cmd_report(&config, &out),
    }
}

/// Records the fully resolved configuration, command, seed and thread count
/// so a run can be reproduced from its output directory alone.
fn write_snapshot(config: &RunConfig, command: &str, threads: usize, out: &Path) -> Result<()> {
    #[derive(Serialize)]
    struct Snapshot<'a> {
        command: &'a str,
        threads: usize,
        config: &'a RunConfig,
    }
    let snap = Snapshot { command, threads, config };
    let text = toml::to_string_pretty(&snap)
        .map_err(|e| MassegError::Config(format!("config snapshot serialization failed: {e}")))?;
    write_text(&out.join(format!("{command}-config.toml")), &text)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text)
        .map_err(|e| MassegError::Io { path: path.display().to_string(), detail: e.to_string() })
}

fn manifest_path(config: &RunConfig) -> Result<PathBuf> {
    let path = config
        .manifest
        .clone()
        .ok_or_else(|| MassegError::Config("no manifest configured; set `manifest`".into()))?;
    if !path.is_file() {
        return Err(MassegError::Config(format!("manifest {} not found", path.display())));
    }
    Ok(path)
}

/// Runs `f(0..n)` on `threads` workers and returns the results in index
/// order. Work items must not depend on each other.
fn run_tasks<T, F>(n: usize, threads: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync,
{
    if threads <= 1 || n <= 1 {
        return (0..n).map(&f).collect();
    }
    let workers = threads.min(n);
    let mut slots: Vec<Result<Option<T>>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                let f = &f;
                scope.spawn(move || {
                    let mut out = Vec::new();
                    let mut i = w;
                    while i < n {
                        out.push((i, f(i)));
                        i += workers;
                    }
                    out
                })
            })
            .collect();
        let mut slots: Vec<Result<Option<T>>> = (0..n).map(|_| Ok(None)).collect();
        for h in handles {
            for (i, r) in h.join().expect("worker panicked") {
                slots[i] = r.map(Some);
            }
        }
        slots
    });
    let mut out = Vec::with_capacity(n);
    for slot in slots.drain(..) {
        out.push(slot?.expect("every index was scheduled"));
    }
    Ok(out)
}

fn case_id(index: usize) -> String {
    format!("case-{index:03}")
}

fn cmd_phantom(config: &RunConfig, threads: usize, out: &Path) -> Result<()> {
    config.phantom.spec.validate()?;
    let count = config.phantom.count;
    let cases = run_tasks(count, threads, |i| {
        let id = case_id(i);
        let seed = config.seed.wrapping_add(i as u64);
        let (image, mask, lesions) = generate_phantom(&config.phantom.spec, &id, seed)?;
        let image_name = format!("{id}.vraw");
        let mask_name = format!("{id}_mask.vraw");
        write_volume(&image, &out.join(&image_name))?;
        write_volume(&mask, &out.join(&mask_name))?;
        Ok(CaseEntry { id, image: image_name, mask: mask_name, lesions })
    })?;
    let manifest = Manifest { cases };
    write_manifest(&manifest, &out.join("manifest.toml"))?;
    println!("phantom: wrote {count} cases to {}", out.display());
    Ok(())
}

fn cmd_denoise(config: &RunConfig, threads: usize, out: &Path) -> Result<()> {
    config.denoise.validate()?;
    let manifest = manifest_path(config)?;
    let (manifest, cases) = data::read_manifest_cases(&manifest)?;
    let n = cases.len();
    run_tasks(n, threads, |i| {
        let case = &cases[i];
        let denoised = obnlm_denoise(&case.image, &config.denoise)?;
        write_volume(&denoised, &out.join(&case.entry.image))?;
        write_volume(&case.mask, &out.join(&case.entry.mask))?;
        Ok(())
    })?;
    write_manifest(&manifest, &out.join("manifest.toml"))?;
    println!("denoise: wrote {n} cases to {}", out.display());
    Ok(())
}

fn cmd_train(config: &RunConfig, out: &Path) -> Result<()> {
    config.model.validate()?;
    config.train.validate()?;
    let manifest = manifest_path(config)?;
    let dataset =
        data::dataset_from_manifest(&manifest, &config.model, &config.train.patch_extents)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    let mut model = Model::<f32>::build(&config.model, config.seed)?;
    let outcome = train(&mut model, &dataset, None, &train_cfg)?;
    save_checkpoint(&outcome.best_model, &out.join("model.ckpt"))?;
    write_text(&out.join("history.csv"), &outcome.history_csv())?;
    let summary = format!(
        "best_epoch = {}\nbest_dsc = {}\nsamples = {}\n",
        outcome.best_epoch,
        outcome.best_val_dsc,
        dataset.len()
    );
    write_text(&out.join("summary.toml"), &summary)?;
    println!("train: best DSC {:.4} at epoch {}", outcome.best_val_dsc, outcome.best_epoch);
    Ok(())
}

fn cmd_crossval(config: &RunConfig, out: &Path) -> Result<()> {
    config.model.validate()?;
    config.train.validate()?;
    let manifest = manifest_path(config)?;
    let dataset =
        data::dataset_from_manifest(&manifest, &config.model, &config.train.patch_extents)?;
    let mut train_cfg = config.train.clone();
    train_cfg.seed = config.seed;
    let report = cross_validate(&dataset, &train_cfg, &config.model)?;
    // mean_dsc comes first so it stays a top-level TOML key ahead of the
    // [[fold]] tables.
    let mut summary = format!("mean_dsc = {}\n\n", report.mean_dsc);
    for fold in &report.folds {
        save_checkpoint(&fold.model, &out.join(format!("fold-{}.ckpt", fold.fold)))?;
        let mut csv = String::from("epoch,train_loss,val_dsc\n");
        for r in &fold.history {
            csv.push_str(&format!("{},{},{}\n", r.epoch, r.train_loss, r.val_dsc));
        }
        write_text(&out.join(format!("fold-{}-history.csv", fold.fold)), &csv)?;
        summary.push_str(&format!(
            "[[fold]]\nindex = {}\nval_dsc = {}\nval_cases = {:?}\n\n",
            fold.fold, fold.val_dsc, fold.val_cases
        ));
    }
    write_text(&out.join("summary.toml"), &summary)?;
    println!("crossval: mean held-out DSC {:.4} over {} folds", report.mean_dsc,
        report.folds.len());
    Ok(())
}

fn cmd_segment(config: &RunConfig, stub: bool, out: &Path) -> Result<()> {
    let manifest = manifest_path(config)?;
    let (_, cases) = data::read_manifest_cases(&manifest)?;
    let schedule = ScaleSchedule::from_str(&config.segment.schedule)?;
    let e = &config.segment.patch_extents;
    if e.len() != 3 {
        return Err(MassegError::Config(format!(
            "segment.patch_extents must have 3 entries, got {}",
            e.len()
        )));
    }
    let patch_extents = [e[0], e[1], e[2]];

    let mut seg: Box<dyn PatchSegmenter> = if stub {
        Box::new(ConstantStub { dims: 3, value: 0.0, calls: 0 })
    } else {
        let path = config.segment.checkpoint.clone().ok_or_else(|| {
            MassegError::Config("segment needs a checkpoint (or --stub)".into())
        })?;
        let model = load_checkpoint(&path)?;
        if model.config != config.model {
            return Err(MassegError::Config(format!(
                "checkpoint architecture {:?} does not match configured model {:?}",
                model.config, config.model
            )));
        }
        Box::new(model)
    };

    let mut lesion_total = 0usize;
    let mut warning_total = 0usize;
    for case in &cases {
        for (j, lesion) in case.entry.lesions.iter().enumerate() {
            let center = [
                lesion.center[0] as i64,
                lesion.center[1] as i64,
                lesion.center[2] as i64,
            ];
            let result = if seg.dims() == 2 {
                let slices = if config.segment.slices.is_empty() {
                    vec![lesion.center[0]]
                } else {
                    config.segment.slices.clone()
                };
                segment_2d(
                    seg.as_mut(),
                    &case.image,
                    &slices,
                    [center[1], center[2]],
                    [patch_extents[1], patch_extents[2]],
                )?
            } else {
                segment_with_rescaling(seg.as_mut(), &case.image, center, patch_extents,
                    &schedule)?
            };
            let stem = format!("{}_lesion{}", case.entry.id, j);
            write_volume(&result.mask, &out.join(format!("{stem}_mask.vraw")))?;
            let mut trace = String::from("scale,boundary_positive,accepted\n");
            for t in &result.trace {
                trace.push_str(&format!("{},{},{}\n", t.scale, t.boundary_positive, t.accepted));
            }
            write_text(&out.join(format!("{stem}_trace.csv")), &trace)?;
            for w in &result.warnings {
                eprintln!("warning: {}: {w}", stem);
            }
            lesion_total += 1;
            warning_total += result.warnings.len();
        }
    }
    let summary = format!(
        "cases = {}\nlesions = {}\nwarnings = {}\n",
        cases.len(),
        lesion_total,
        warning_total
    );
    write_text(&out.join("summary.toml"), &summary)?;
    println!("segment: {} lesions, {} schedule warnings", lesion_total, warning_total);
    Ok(())
}

/// Unions every predicted mask stored for a case: either `{id}_mask.vraw` or
/// the per-lesion `{id}_lesion<j>_mask.vraw` files from `segment`.
fn load_prediction(dir: &Path, id: &str, like: &Volume<u8>) -> Result<Volume<u8>> {
    let single = dir.join(format!("{id}_mask.vraw"));
    let mut parts: Vec<Volume<u8>> = Vec::new();
    if single.is_file() {
        parts.push(read_volume_u8(&single)?);
    } else {
        for j in 0.. {
            let path = dir.join(format!("{id}_lesion{j}_mask.vraw"));
            if !path.is_file() {
                break;
            }
            parts.push(read_volume_u8(&path)?);
        }
    }
    if parts.is_empty() {
        return Err(MassegError::Io {
            path: dir.display().to_string(),
            detail: format!("no predicted mask for case {id}"),
        });
    }
    let mut merged = Volume::new(like.extents, like.spacing, 0u8)?;
    merged.origin = like.origin;
    for p in &parts {
        if p.extents != like.extents {
            return Err(MassegError::ShapeMismatch(format!(
                "case {id}: prediction extents {:?} but ground truth {:?}",
                p.extents, like.extents
            )));
        }
        for (m, &v) in merged.data.iter_mut().zip(p.data.iter()) {
            *m |= (v != 0) as u8;
        }
    }
    Ok(merged)
}

fn cmd_report(config: &RunConfig, out: &Path) -> Result<()> {
    let manifest = manifest_path(config)?;
    let pred_dir = config.report.predictions.clone().ok_or_else(|| {
        MassegError::Config("report needs `report.predictions` pointing at segment output".into())
    })?;
    let (manifest, cases) = data::read_manifest_cases(&manifest)?;
    let corrected = config.report.bias_corrected;

    let mut records: Vec<EvalRecord> = Vec::new();
    let mut errors: Vec<(String, String)> = Vec::new();
    for case in &cases {
        let id = &case.entry.id;
        let outcome = (|| -> Result<EvalRecord> {
            let pred = load_prediction(&pred_dir, id, &case.mask)?;
            let dsc = dice(&case.mask, &pred)?;
            let predicted_compactness =
                compactness(&pred, corrected).unwrap_or(f64::NAN);
            Ok(EvalRecord {
                case_id: id.clone(),
                dsc,
                gt_compactness: compactness(&case.mask, corrected)?,
                predicted_compactness,
                gt_diameter_mm: equivalent_diameter(&case.mask)?,
                gt_volume_mm3: {
                    let d = equivalent_diameter(&case.mask)?;
                    std::f64::consts::PI / 6.0 * d * d * d
                },
            })
        })();
        match outcome {
            Ok(record) => records.push(record),
            Err(err) => errors.push((id.clone(), err.to_string())),
        }
    }
    if records.is_empty() {
        let mut csv = String::from("case_id,error\n");
        for (id, e) in &errors {
            csv.push_str(&format!("{id},{}\n", e.replace(',', ";")));
        }
        write_text(&out.join("errors.csv"), &csv)?;
        // A run where every case fails is a runtime failure (exit 1), not a
        // configuration error.
        return Err(MassegError::Io {
            path: pred_dir.display().to_string(),
            detail: format!("all {} cases failed; see errors.csv", errors.len()),
        });
    }

    write_text(&out.join("records.csv"), &records_csv(&records))?;
    let mut err_csv = String::from("case_id,error\n");
    for (id, e) in &errors {
        err_csv.push_str(&format!("{id},{}\n", e.replace(',', ";")));
    }
    write_text(&out.join("errors.csv"), &err_csv)?;

    let mean_dsc = records.iter().map(|r| r.dsc).sum::<f64>() / records.len() as f64;
    let summary = format!(
        "mean_dsc = {}\ncases_evaluated = {}\ncases_failed = {}\n",
        mean_dsc,
        records.len(),
        errors.len()
    );
    write_text(&out.join("summary.toml"), &summary)?;

    let annotations: Vec<_> =
        manifest.cases.iter().flat_map(|c| c.lesions.iter().cloned()).collect();
    if !annotations.is_empty() {
        let cdf = cumulative_diameter_histogram(&annotations)?;
        let mut csv = String::from("diameter_mm,cumulative_fraction\n");
        for (d, f) in &cdf {
            csv.push_str(&format!("{d},{f}\n"));
        }
        write_text(&out.join("diameter_cdf.csv"), &csv)?;
        write_text(
            &out.join("diameter_cdf.svg"),
            &plot::cdf_svg("Lesion diameter CDF", "equivalent diameter (mm)", &cdf),
        )?;
    }

    for (property, x_label, stem) in [
        (ScatterProperty::Compactness, "ground-truth compactness", "dsc_vs_compactness"),
        (ScatterProperty::Size, "ground-truth volume (mm^3)", "dsc_vs_size"),
    ] {
        let rows = dsc_vs_property(&records, property);
        let mut csv = String::from("case_id,x,dsc\n");
        for r in &rows {
            csv.push_str(&format!("{},{},{}\n", r.case_id, r.x, r.dsc));
        }
        write_text(&out.join(format!("{stem}.csv")), &csv)?;
        let points: Vec<(f64, f64)> = rows.iter().map(|r| (r.x, r.dsc)).collect();
        write_text(
            &out.join(format!("{stem}.svg")),
            &plot::scatter_svg(stem, x_label, "DSC", &points),
        )?;
    }

    let comp_points: Vec<(f64, f64)> = records
        .iter()
        .filter(|r| r.predicted_compactness.is_finite())
        .map(|r| (r.gt_compactness, r.predicted_compactness))
        .collect();
    let mut csv = String::from("case_id,gt_compactness,predicted_compactness\n");
    for r in &records {
        csv.push_str(&format!(
            "{},{},{}\n",
            r.case_id, r.gt_compactness, r.predicted_compactness
        ));
    }
    write_text(&out.join("gt_vs_pred_compactness.csv"), &csv)?;
    write_text(
        &out.join("gt_vs_pred_compactness.svg"),
        &plot::scatter_svg(
            "Compactness: ground truth vs prediction",
            "ground-truth compactness",
            "predicted compactness",
            &comp_points,
        ),
    )?;

    println!(
        "report: mean DSC {:.4} over {} cases ({} failed)",
        mean_dsc,
        records.len(),
        errors.len()
    );
    Ok(())
}
