//! Dependency-free SVG emission for the two standard run plots: the loss
//! curve and the halting-depth histogram.

const W: f64 = 640.0;
const H: f64 = 400.0;
const PAD: f64 = 40.0;

fn frame(title: &str, body: &str) -> String {
    format!(
        concat!(
            r##"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" "##,
            r##"viewBox="0 0 {w} {h}">"##,
            r##"<rect width="{w}" height="{h}" fill="white"/>"##,
            r##"<text x="{tx}" y="20" text-anchor="middle" font-family="monospace" font-size="14">{title}</text>"##,
            r##"<rect x="{pad}" y="{pad}" width="{iw}" height="{ih}" fill="none" stroke="#999"/>"##,
            "{body}</svg>\n"
        ),
        w = W,
        h = H,
        tx = W / 2.0,
        title = title,
        pad = PAD,
        iw = W - 2.0 * PAD,
        ih = H - 2.0 * PAD,
        body = body,
    )
}

/// Polyline of `values` over their index, auto-scaled.
pub fn line_chart(title: &str, values: &[f64]) -> String {
    if values.is_empty() {
        return frame(title, "");
    }
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = (hi - lo).max(1e-12);
    let n = values.len().max(2) as f64;
    let points: Vec<String> = values
        .iter()
        .enumerate()
        .map(|(i, v)| {
            let x = PAD + (W - 2.0 * PAD) * i as f64 / (n - 1.0);
            let y = H - PAD - (H - 2.0 * PAD) * (v - lo) / span;
            format!("{x:.1},{y:.1}")
        })
        .collect();
    let body = format!(
        r##"<polyline points="{}" fill="none" stroke="#1f77b4" stroke-width="1.5"/><text x="{}" y="{}" font-family="monospace" font-size="10">min {:.4}</text><text x="{}" y="{}" font-family="monospace" font-size="10">max {:.4}</text>"##,
        points.join(" "),
        PAD,
        H - PAD + 14.0,
        lo,
        PAD,
        PAD - 6.0,
        hi,
    );
    frame(title, &body)
}

/// Bar chart of per-bucket counts, one bar per entry of `counts`.
pub fn histogram(title: &str, labels: &[String], counts: &[f64]) -> String {
    assert_eq!(labels.len(), counts.len());
    if counts.is_empty() {
        return frame(title, "");
    }
    let hi = counts.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let slot = (W - 2.0 * PAD) / counts.len() as f64;
    let mut body = String::new();
    for (i, (&c, label)) in counts.iter().zip(labels).enumerate() {
        let bh = (H - 2.0 * PAD) * c / hi;
        let x = PAD + slot * i as f64 + slot * 0.1;
        let y = H - PAD - bh;
        body.push_str(&format!(
            r##"<rect x="{x:.1}" y="{y:.1}" width="{bw:.1}" height="{bh:.1}" fill="#ff7f0e"/><text x="{cx:.1}" y="{ly:.1}" text-anchor="middle" font-family="monospace" font-size="10">{label}</text>"##,
            bw = slot * 0.8,
            cx = x + slot * 0.4,
            ly = H - PAD + 14.0,
        ));
    }
    frame(title, &body)
}
