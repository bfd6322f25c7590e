//! Minimal standalone SVG plots: scatter charts and empirical-CDF step
//! charts with the data points embedded as drawn elements.

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;

struct Frame {
    x_min: f64,
    x_max: f64,
    y_min: f64,
    y_max: f64,
}

impl Frame {
    fn from_points(points: &[(f64, f64)], y_min: Option<f64>, y_max: Option<f64>) -> Frame {
        let mut xs: Vec<f64> = points.iter().map(|p| p.0).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut ys: Vec<f64> = points.iter().map(|p| p.1).collect();
        ys.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let pad = |lo: f64, hi: f64| {
            let span = (hi - lo).max(1e-9);
            (lo - 0.05 * span, hi + 0.05 * span)
        };
        let (x_min, x_max) = pad(xs[0], *xs.last().unwrap());
        let (y_lo, y_hi) = pad(ys[0], *ys.last().unwrap());
        Frame {
            x_min,
            x_max,
            y_min: y_min.unwrap_or(y_lo),
            y_max: y_max.unwrap_or(y_hi),
        }
    }

    fn sx(&self, x: f64) -> f64 {
        MARGIN + (x - self.x_min) / (self.x_max - self.x_min) * (WIDTH - 2.0 * MARGIN)
    }

    fn sy(&self, y: f64) -> f64 {
        HEIGHT - MARGIN - (y - self.y_min) / (self.y_max - self.y_min) * (HEIGHT - 2.0 * MARGIN)
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{WIDTH}\" height=\"{HEIGHT}\" \
         viewBox=\"0 0 {WIDTH} {HEIGHT}\">\n\
         <rect width=\"{WIDTH}\" height=\"{HEIGHT}\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"28\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"16\">{}</text>\n",
        WIDTH / 2.0,
        escape(title)
    )
}

fn axes(frame: &Frame, x_label: &str, y_label: &str) -> String {
    let x0 = MARGIN;
    let x1 = WIDTH - MARGIN;
    let y0 = HEIGHT - MARGIN;
    let y1 = MARGIN;
    let mut out = format!(
        "<line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x1}\" y2=\"{y0}\" stroke=\"black\"/>\n\
         <line x1=\"{x0}\" y1=\"{y0}\" x2=\"{x0}\" y2=\"{y1}\" stroke=\"black\"/>\n\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\">{}</text>\n\
         <text x=\"18\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
         font-size=\"13\" transform=\"rotate(-90 18 {})\">{}</text>\n",
        (x0 + x1) / 2.0,
        HEIGHT - 18.0,
        escape(x_label),
        (y0 + y1) / 2.0,
        (y0 + y1) / 2.0,
        escape(y_label)
    );
    for i in 0..=4 {
        let fx = frame.x_min + (frame.x_max - frame.x_min) * i as f64 / 4.0;
        let fy = frame.y_min + (frame.y_max - frame.y_min) * i as f64 / 4.0;
        out.push_str(&format!(
            "<text x=\"{:.1}\" y=\"{}\" text-anchor=\"middle\" font-family=\"sans-serif\" \
             font-size=\"11\">{:.3}</text>\n\
             <text x=\"{}\" y=\"{:.1}\" text-anchor=\"end\" font-family=\"sans-serif\" \
             font-size=\"11\">{:.3}</text>\n",
            frame.sx(fx),
            HEIGHT - MARGIN + 18.0,
            fx,
            MARGIN - 6.0,
            frame.sy(fy) + 4.0,
            fy
        ));
    }
    out
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Scatter plot of (x, y) points. Each point is drawn as a circle carrying
/// its data values in `data-x`/`data-y` attributes.
pub fn scatter_svg(title: &str, x_label: &str, y_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = header(title);
    if points.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let frame = Frame::from_points(points, None, None);
    out.push_str(&axes(&frame, x_label, y_label));
    for &(x, y) in points {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"steelblue\" fill-opacity=\"0.7\" \
             data-x=\"{x}\" data-y=\"{y}\"/>\n",
            frame.sx(x),
            frame.sy(y)
        ));
    }
    out.push_str("</svg>\n");
    out
}

/// Step plot of an empirical CDF given (value, cumulative fraction) points in
/// ascending order.
pub fn cdf_svg(title: &str, x_label: &str, points: &[(f64, f64)]) -> String {
    let mut out = header(title);
    if points.is_empty() {
        out.push_str("</svg>\n");
        return out;
    }
    let frame = Frame::from_points(points, Some(0.0), Some(1.0));
    out.push_str(&axes(&frame, x_label, "cumulative fraction"));
    let mut d = format!("M {:.2} {:.2}", frame.sx(points[0].0), frame.sy(0.0));
    let mut prev_y = 0.0;
    for &(x, y) in points {
        d.push_str(&format!(
            " L {:.2} {:.2} L {:.2} {:.2}",
            frame.sx(x),
            frame.sy(prev_y),
            frame.sx(x),
            frame.sy(y)
        ));
        prev_y = y;
    }
    out.push_str(&format!(
        "<path d=\"{d}\" fill=\"none\" stroke=\"firebrick\" stroke-width=\"1.5\"/>\n"
    ));
    for &(x, y) in points {
        out.push_str(&format!(
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"firebrick\" \
             data-x=\"{x}\" data-y=\"{y}\"/>\n",
            frame.sx(x),
            frame.sy(y)
        ));
    }
    out.push_str("</svg>\n");
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_embeds_every_point() {
        let points = vec![(1.0, 0.5), (2.0, 0.8), (3.0, 0.2)];
        let svg = scatter_svg("t", "x", "y", &points);
        assert!(svg.starts_with("<svg"));
        assert!(svg.ends_with("</svg>\n"));
        assert_eq!(svg.matches("<circle").count(), 3);
        assert!(svg.contains("data-x=\"2\""));
    }

    #[test]
    fn cdf_is_well_formed() {
        let svg = cdf_svg("cdf", "mm", &[(5.0, 0.5), (10.0, 1.0)]);
        assert!(svg.contains("<path"));
        assert_eq!(svg.matches("<circle").count(), 2);
    }

    #[test]
    fn empty_input_yields_valid_svg() {
        let svg = scatter_svg("t", "x", "y", &[]);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
    }
}
