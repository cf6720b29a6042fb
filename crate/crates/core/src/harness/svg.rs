//! Hand-rolled SVG 1.1 rate-distortion plot: one polyline per model tag,
//! rate on x, distortion on y. CSVs are the testable artifact; the figure is
//! for eyeballs.

use super::rd::RdPoint;

const W: f64 = 640.0;
const H: f64 = 480.0;
const MARGIN: f64 = 60.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

pub fn rd_plot_svg(points: &[RdPoint]) -> String {
    let live: Vec<&RdPoint> = points.iter().filter(|p| !p.diverged).collect();
    let (mut x0, mut x1, mut y0, mut y1) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in &live {
        x0 = x0.min(p.rate);
        x1 = x1.max(p.rate);
        y0 = y0.min(p.distortion);
        y1 = y1.max(p.distortion);
    }
    if live.is_empty() {
        (x0, x1, y0, y1) = (0.0, 1.0, 0.0, 1.0);
    }
    if x1 - x0 < 1e-12 {
        x1 = x0 + 1.0;
    }
    if y1 - y0 < 1e-12 {
        y1 = y0 + 1.0;
    }
    let sx = |v: f64| MARGIN + (v - x0) / (x1 - x0) * (W - 2.0 * MARGIN);
    let sy = |v: f64| H - MARGIN - (v - y0) / (y1 - y0) * (H - 2.0 * MARGIN);

    let mut tags: Vec<String> = Vec::new();
    for p in &live {
        if !tags.contains(&p.model_tag) {
            tags.push(p.model_tag.clone());
        }
    }

    let mut s = String::new();
    s.push_str(&format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" version=\"1.1\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">\n"
    ));
    s.push_str(&format!(
        "  <rect x=\"0\" y=\"0\" width=\"{W}\" height=\"{H}\" fill=\"white\"/>\n"
    ));
    // axes
    s.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{b}\" x2=\"{r}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN,
        r = W - MARGIN
    ));
    s.push_str(&format!(
        "  <line x1=\"{m}\" y1=\"{m}\" x2=\"{m}\" y2=\"{b}\" stroke=\"black\"/>\n",
        m = MARGIN,
        b = H - MARGIN
    ));
    // ticks and labels
    for i in 0..=4 {
        let f = i as f64 / 4.0;
        let xv = x0 + f * (x1 - x0);
        let yv = y0 + f * (y1 - y0);
        s.push_str(&format!(
            "  <line x1=\"{x}\" y1=\"{b}\" x2=\"{x}\" y2=\"{b2}\" stroke=\"black\"/>\n  <text x=\"{x}\" y=\"{ty}\" font-size=\"11\" text-anchor=\"middle\">{xv:.3}</text>\n",
            x = sx(xv),
            b = H - MARGIN,
            b2 = H - MARGIN + 5.0,
            ty = H - MARGIN + 18.0
        ));
        s.push_str(&format!(
            "  <line x1=\"{m}\" y1=\"{y}\" x2=\"{m2}\" y2=\"{y}\" stroke=\"black\"/>\n  <text x=\"{tx}\" y=\"{y}\" font-size=\"11\" text-anchor=\"end\">{yv:.3}</text>\n",
            m = MARGIN,
            m2 = MARGIN - 5.0,
            y = sy(yv),
            tx = MARGIN - 8.0
        ));
    }
    s.push_str(&format!(
        "  <text x=\"{cx}\" y=\"{ty}\" font-size=\"13\" text-anchor=\"middle\">rate (nats)</text>\n",
        cx = W / 2.0,
        ty = H - 15.0
    ));
    s.push_str(&format!(
        "  <text x=\"15\" y=\"{cy}\" font-size=\"13\" text-anchor=\"middle\" transform=\"rotate(-90 15 {cy})\">distortion (MSE)</text>\n",
        cy = H / 2.0
    ));

    for (ti, tag) in tags.iter().enumerate() {
        let mut pts: Vec<&&RdPoint> = live.iter().filter(|p| &p.model_tag == tag).collect();
        pts.sort_by(|a, b| a.gamma.partial_cmp(&b.gamma).expect("finite gammas"));
        let color = COLORS[ti % COLORS.len()];
        let path: Vec<String> =
            pts.iter().map(|p| format!("{:.2},{:.2}", sx(p.rate), sy(p.distortion))).collect();
        s.push_str(&format!(
            "  <polyline fill=\"none\" stroke=\"{color}\" stroke-width=\"2\" points=\"{}\"/>\n",
            path.join(" ")
        ));
        for p in &pts {
            s.push_str(&format!(
                "  <circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"3\" fill=\"{color}\"/>\n",
                sx(p.rate),
                sy(p.distortion)
            ));
        }
        s.push_str(&format!(
            "  <text x=\"{tx}\" y=\"{ty}\" font-size=\"12\" fill=\"{color}\">{tag}</text>\n",
            tx = W - MARGIN - 60.0,
            ty = MARGIN + 16.0 * ti as f64
        ));
    }
    s.push_str("</svg>\n");
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_model_tag_and_axis_labels() {
        let mk = |tag: &str, gamma: f64, rate: f64, dist: f64| RdPoint {
            model_tag: tag.into(),
            gamma,
            seed: 0,
            rate,
            distortion: dist,
            diverged: false,
        };
        let pts = vec![
            mk("dae", 0.1, 1.5, 0.3),
            mk("dae", 1.0, 0.2, 1.8),
            mk("vae", 0.1, 2.0, 0.1),
            mk("vae", 1.0, 0.6, 0.5),
        ];
        let svg = rd_plot_svg(&pts);
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(svg.contains("rate (nats)"));
        assert!(svg.contains("distortion (MSE)"));
        assert!(svg.contains("version=\"1.1\""));
    }
}
