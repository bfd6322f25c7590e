//! Finite-difference gradient checks for every differentiable kernel.
//!
//! All checks run in f64 with central differences (step 1e-4) and compare
//! analytic adjoints coordinate by coordinate at 1e-5 relative tolerance,
//! over at least 100 sampled coordinates per operation.

use masseg::ops::*;
use masseg::tensor::Tensor;
use rand::prelude::*;

const STEP: f64 = 1e-4;
const REL_TOL: f64 = 1e-5;

fn rand_tensor(rng: &mut StdRng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen::<f64>() * 2.0 - 1.0).collect()).unwrap()
}

fn rel_err(a: f64, b: f64) -> f64 {
    let denom = a.abs().max(b.abs()).max(1e-8);
    (a - b).abs() / denom
}

/// Checks d(sum(r . f(x)))/dx_i for sampled coordinates `i` of one input
/// vector, where `f` is re-evaluated from scratch for each perturbation.
fn check_coords<F>(
    rng: &mut StdRng,
    values: &mut Vec<f64>,
    analytic: &[f64],
    samples: usize,
    mut eval: F,
    ctx: &str,
) where
    F: FnMut(&[f64]) -> f64,
{
    assert_eq!(values.len(), analytic.len(), "{ctx}: gradient length");
    let n = values.len();
    let idx: Vec<usize> = if n <= samples {
        (0..n).collect()
    } else {
        (0..samples).map(|_| rng.gen_range(0..n)).collect()
    };
    for i in idx {
        let orig = values[i];
        values[i] = orig + STEP;
        let up = eval(values);
        values[i] = orig - STEP;
        let down = eval(values);
        values[i] = orig;
        let fd = (up - down) / (2.0 * STEP);
        let an = analytic[i];
        assert!(
            rel_err(fd, an) < REL_TOL,
            "{ctx}: coord {i}, fd {fd} vs analytic {an}"
        );
    }
}

#[test]
fn convolve_same_padding_gradients() {
    let mut rng = StdRng::seed_from_u64(101);
    let input = rand_tensor(&mut rng, &[2, 3, 4, 4, 4]);
    let kernel = rand_tensor(&mut rng, &[4, 3, 3, 3, 3]);
    let bias: Vec<f64> = (0..4).map(|_| rng.gen::<f64>()).collect();
    let w = ConvWeights::new(kernel.clone(), bias.clone(), 1, Padding::Same).unwrap();
    let out = convolve(&input, &w).unwrap();
    let cochain = rand_tensor(&mut rng, out.shape());
    let (gi, gk, gb) = convolve_backward(&input, &w, &cochain).unwrap();

    let eval_input = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        convolve(&x, &w).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 120, eval_input, "conv same d/dinput");

    let eval_kernel = |v: &[f64]| {
        let k = Tensor::from_vec(kernel.shape(), v.to_vec()).unwrap();
        let w2 = ConvWeights::new(k, bias.clone(), 1, Padding::Same).unwrap();
        convolve(&input, &w2).unwrap().dot(&cochain)
    };
    let mut vals = kernel.data().to_vec();
    check_coords(&mut rng, &mut vals, gk.data(), 120, eval_kernel, "conv same d/dkernel");

    let eval_bias = |v: &[f64]| {
        let w2 = ConvWeights::new(kernel.clone(), v.to_vec(), 1, Padding::Same).unwrap();
        convolve(&input, &w2).unwrap().dot(&cochain)
    };
    let mut vals = bias.clone();
    check_coords(&mut rng, &mut vals, &gb, 120, eval_bias, "conv same d/dbias");
}

#[test]
fn convolve_strided_valid_gradients() {
    let mut rng = StdRng::seed_from_u64(102);
    let input = rand_tensor(&mut rng, &[1, 2, 6, 6, 6]);
    let kernel = rand_tensor(&mut rng, &[3, 2, 2, 2, 2]);
    let bias: Vec<f64> = (0..3).map(|_| rng.gen::<f64>()).collect();
    let w = ConvWeights::new(kernel.clone(), bias.clone(), 2, Padding::Valid).unwrap();
    let out = convolve(&input, &w).unwrap();
    assert_eq!(out.spatial(), (3, 3, 3));
    let cochain = rand_tensor(&mut rng, out.shape());
    let (gi, gk, _) = convolve_backward(&input, &w, &cochain).unwrap();

    let eval_input = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        convolve(&x, &w).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 120, eval_input, "conv strided d/dinput");

    let eval_kernel = |v: &[f64]| {
        let k = Tensor::from_vec(kernel.shape(), v.to_vec()).unwrap();
        let w2 = ConvWeights::new(k, bias.clone(), 2, Padding::Valid).unwrap();
        convolve(&input, &w2).unwrap().dot(&cochain)
    };
    let mut vals = kernel.data().to_vec();
    check_coords(&mut rng, &mut vals, gk.data(), 120, eval_kernel, "conv strided d/dkernel");
}

#[test]
fn convolve_2d_gradients() {
    let mut rng = StdRng::seed_from_u64(103);
    let input = rand_tensor(&mut rng, &[2, 2, 6, 6]);
    let kernel = rand_tensor(&mut rng, &[3, 2, 3, 3]);
    let bias = vec![0.1, -0.2, 0.3];
    let w = ConvWeights::new(kernel.clone(), bias.clone(), 1, Padding::Same).unwrap();
    let out = convolve(&input, &w).unwrap();
    let cochain = rand_tensor(&mut rng, out.shape());
    let (gi, gk, _) = convolve_backward(&input, &w, &cochain).unwrap();

    let eval_input = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        convolve(&x, &w).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 120, eval_input, "conv2d d/dinput");

    let eval_kernel = |v: &[f64]| {
        let k = Tensor::from_vec(kernel.shape(), v.to_vec()).unwrap();
        let w2 = ConvWeights::new(k, bias.clone(), 1, Padding::Same).unwrap();
        convolve(&input, &w2).unwrap().dot(&cochain)
    };
    let mut vals = kernel.data().to_vec();
    check_coords(&mut rng, &mut vals, gk.data(), 120, eval_kernel, "conv2d d/dkernel");
}

#[test]
fn transposed_convolve_gradients() {
    let mut rng = StdRng::seed_from_u64(104);
    let input = rand_tensor(&mut rng, &[1, 3, 3, 3, 3]);
    let kernel = rand_tensor(&mut rng, &[2, 3, 2, 2, 2]);
    let bias = vec![0.5, -0.5];
    let w = ConvWeights::new(kernel.clone(), bias.clone(), 2, Padding::Valid).unwrap();
    let out = transposed_convolve(&input, &w).unwrap();
    assert_eq!(out.spatial(), (6, 6, 6));
    let cochain = rand_tensor(&mut rng, out.shape());
    let (gi, gk, gb) = transposed_convolve_backward(&input, &w, &cochain).unwrap();

    let eval_input = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        transposed_convolve(&x, &w).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 120, eval_input, "tconv d/dinput");

    let eval_kernel = |v: &[f64]| {
        let k = Tensor::from_vec(kernel.shape(), v.to_vec()).unwrap();
        let w2 = ConvWeights::new(k, bias.clone(), 2, Padding::Valid).unwrap();
        transposed_convolve(&input, &w2).unwrap().dot(&cochain)
    };
    let mut vals = kernel.data().to_vec();
    check_coords(&mut rng, &mut vals, gk.data(), 120, eval_kernel, "tconv d/dkernel");

    let eval_bias = |v: &[f64]| {
        let w2 = ConvWeights::new(kernel.clone(), v.to_vec(), 2, Padding::Valid).unwrap();
        transposed_convolve(&input, &w2).unwrap().dot(&cochain)
    };
    let mut vals = bias.clone();
    check_coords(&mut rng, &mut vals, &gb, 120, eval_bias, "tconv d/dbias");
}

/// Transposed convolution is the adjoint of the matching strided valid
/// convolution: <tconv(x), y> = <x, conv(y)> (bias held at zero).
#[test]
fn transposed_convolve_is_conv_adjoint() {
    let mut rng = StdRng::seed_from_u64(105);
    let x = rand_tensor(&mut rng, &[1, 2, 3, 3, 3]);
    let kernel = rand_tensor(&mut rng, &[4, 2, 2, 2, 2]);
    let up = ConvWeights::new(kernel.clone(), vec![0.0; 4], 2, Padding::Valid).unwrap();
    let y = rand_tensor(&mut rng, &[1, 4, 6, 6, 6]);

    let lhs = transposed_convolve(&x, &up).unwrap().dot(&y);
    // the matching forward map has kernel axes (in, out) swapped
    let mut swapped = Tensor::<f64>::zeros(&[2, 4, 2, 2, 2]);
    for oc in 0..4 {
        for ic in 0..2 {
            for k in 0..8 {
                swapped.data_mut()[(ic * 4 + oc) * 8 + k] = kernel.data()[(oc * 2 + ic) * 8 + k];
            }
        }
    }
    let down = ConvWeights::new(swapped, vec![0.0; 2], 2, Padding::Valid).unwrap();
    let rhs = x.dot(&convolve(&y, &down).unwrap());
    assert!(rel_err(lhs, rhs) < 1e-10, "{lhs} vs {rhs}");
}

#[test]
fn max_pool_gradients() {
    let mut rng = StdRng::seed_from_u64(106);
    let input = rand_tensor(&mut rng, &[2, 2, 4, 4, 4]);
    let (out, argmax) = max_pool(&input).unwrap();
    let cochain = rand_tensor(&mut rng, out.shape());
    let gi = max_pool_backward(input.shape(), &argmax, &cochain).unwrap();

    let eval = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        max_pool(&x).unwrap().0.dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 150, eval, "max_pool d/dinput");
}

#[test]
fn batch_norm_gradients() {
    let mut rng = StdRng::seed_from_u64(107);
    let input = rand_tensor(&mut rng, &[2, 3, 3, 3, 3]);
    let gamma: Vec<f64> = (0..3).map(|_| 0.5 + rng.gen::<f64>()).collect();
    let beta: Vec<f64> = (0..3).map(|_| rng.gen::<f64>() - 0.5).collect();
    let fresh_state = |g: &[f64], b: &[f64]| {
        let mut s = BatchNormState::<f64>::new(3);
        s.gamma = g.to_vec();
        s.beta = b.to_vec();
        s
    };
    let mut state = fresh_state(&gamma, &beta);
    let (out, cache) = batch_norm_train(&input, &mut state).unwrap();
    let cochain = rand_tensor(&mut rng, out.shape());
    let (gi, gg, gb) = batch_norm_backward(&state, &cache, &cochain).unwrap();

    let eval_input = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        let mut s = fresh_state(&gamma, &beta);
        batch_norm_train(&x, &mut s).unwrap().0.dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 150, eval_input, "bn d/dinput");

    let eval_gamma = |v: &[f64]| {
        let mut s = fresh_state(v, &beta);
        batch_norm_train(&input, &mut s).unwrap().0.dot(&cochain)
    };
    let mut vals = gamma.clone();
    check_coords(&mut rng, &mut vals, &gg, 100, eval_gamma, "bn d/dgamma");

    let eval_beta = |v: &[f64]| {
        let mut s = fresh_state(&gamma, v);
        batch_norm_train(&input, &mut s).unwrap().0.dot(&cochain)
    };
    let mut vals = beta.clone();
    check_coords(&mut rng, &mut vals, &gb, 100, eval_beta, "bn d/dbeta");
}

#[test]
fn relu_gradients_away_from_zero() {
    let mut rng = StdRng::seed_from_u64(108);
    // keep every coordinate at least 10*STEP from the kink
    let data: Vec<f64> = (0..100)
        .map(|_| {
            let v = rng.gen::<f64>() * 2.0 - 1.0;
            if v.abs() < 10.0 * STEP {
                v + 0.01 * v.signum()
            } else {
                v
            }
        })
        .collect();
    let input = Tensor::from_vec(&[2, 2, 5, 5], data).unwrap();
    let cochain = rand_tensor(&mut rng, input.shape());
    let gi = relu_backward(&input, &cochain).unwrap();

    let eval = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        relu(&x).dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 150, eval, "relu d/dinput");
}

#[test]
fn softmax_gradients() {
    let mut rng = StdRng::seed_from_u64(109);
    let input = rand_tensor(&mut rng, &[2, 3, 2, 3, 3]);
    let probs = softmax_over_channels(&input).unwrap();
    let cochain = rand_tensor(&mut rng, input.shape());
    let gi = softmax_backward(&probs, &cochain).unwrap();

    let eval = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        softmax_over_channels(&x).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 150, eval, "softmax d/dinput");
}

#[test]
fn resize_and_crop_gradients() {
    let mut rng = StdRng::seed_from_u64(110);
    let input = rand_tensor(&mut rng, &[1, 2, 3, 4, 4]);
    let out = trilinear_resize(&input, (6, 8, 8)).unwrap();
    let cochain = rand_tensor(&mut rng, out.shape());
    let gi = trilinear_resize_backward(input.shape(), &cochain).unwrap();

    let eval = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        trilinear_resize(&x, (6, 8, 8)).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 100, eval, "resize d/dinput");

    let input = rand_tensor(&mut rng, &[1, 2, 4, 6, 6]);
    let out = center_crop(&input, (2, 4, 4)).unwrap();
    let cochain = rand_tensor(&mut rng, out.shape());
    let gi = center_crop_backward(input.shape(), &cochain).unwrap();
    let eval = |v: &[f64]| {
        let x = Tensor::from_vec(input.shape(), v.to_vec()).unwrap();
        center_crop(&x, (2, 4, 4)).unwrap().dot(&cochain)
    };
    let mut vals = input.data().to_vec();
    check_coords(&mut rng, &mut vals, gi.data(), 100, eval, "crop d/dinput");
}

// ---------------------------------------------------------------------------
// Whole-model checks: analytic backward vs finite differences of a scalar
// loss, in f64, for all three architectures at toy size.
// ---------------------------------------------------------------------------

use masseg::models::{Mode, Model, ModelConfig};
use std::collections::BTreeMap;

// `extent` must keep the bottom level above one spatial element, otherwise
// batch norm there degenerates to `beta` and the loss sits exactly on the
// relu kink where finite differences are meaningless.
fn whole_model_check_extent(config: &ModelConfig, seed: u64, extent: usize) {
    let mut rng = StdRng::seed_from_u64(seed);
    let model = Model::<f64>::build(config, seed).unwrap();
    let n_inputs = model.path_count();
    let shape: Vec<usize> = if config.dims == 2 {
        vec![1, config.in_channels, extent, extent]
    } else {
        vec![1, config.in_channels, extent, extent, extent]
    };
    let inputs: Vec<Tensor<f64>> = (0..n_inputs).map(|_| rand_tensor(&mut rng, &shape)).collect();

    let mut m = model.clone();
    let logits = m.forward(&inputs, Mode::Train).unwrap();
    let cochain = rand_tensor(&mut rng, logits.shape());
    let grads = m.backward(&cochain).unwrap();

    let eval = |m0: &Model<f64>, name: &str, idx: usize, delta: f64| -> f64 {
        let mut m = m0.clone();
        m.visit_params_mut(&mut |n, _, data| {
            if n == name {
                data[idx] += delta;
            }
        });
        m.forward(&inputs, Mode::Train).unwrap().dot(&cochain)
    };

    let mut sizes: BTreeMap<String, usize> = BTreeMap::new();
    model.visit_params(&mut |name, _, data| {
        sizes.insert(name.to_string(), data.len());
    });
    let mut checked = 0;
    let names: Vec<String> = sizes.keys().cloned().collect();
    while checked < 120 {
        let name = &names[rng.gen_range(0..names.len())];
        let idx = rng.gen_range(0..sizes[name]);
        let up = eval(&model, name, idx, STEP);
        let down = eval(&model, name, idx, -STEP);
        let fd = (up - down) / (2.0 * STEP);
        let an = grads.params[name][idx];
        let denom = fd.abs().max(an.abs()).max(1e-6);
        assert!(
            (fd - an).abs() / denom < 1e-4,
            "{name}[{idx}]: fd {fd} vs analytic {an}"
        );
        checked += 1;
    }
}

fn whole_model_check(config: &ModelConfig, seed: u64) {
    whole_model_check_extent(config, seed, 4);
}

#[test]
fn whole_model_single_path_3d() {
    whole_model_check(&ModelConfig { dims: 3, depth: 1, base_channels: 2, in_channels: 1, num_labels: 2, dual_path: false, second_path_scale: 0.5 }, 2024);
}

#[test]
fn whole_model_single_path_2d() {
    whole_model_check(&ModelConfig { dims: 2, depth: 1, base_channels: 2, in_channels: 1, num_labels: 2, dual_path: false, second_path_scale: 0.5 }, 2025);
}

#[test]
fn whole_model_dual_path_3d() {
    whole_model_check(&ModelConfig { dims: 3, depth: 1, base_channels: 2, in_channels: 1, num_labels: 2, dual_path: true, second_path_scale: 0.5 }, 2026);
}

#[test]
fn whole_model_single_path_3d_depth2() {
    // Depth 2 exercises the multi-level decoder cache ordering, which a
    // depth-1 net cannot distinguish from any other order.
    whole_model_check_extent(&ModelConfig { dims: 3, depth: 2, base_channels: 2, in_channels: 1, num_labels: 2, dual_path: false, second_path_scale: 0.5 }, 2027, 8);
}
