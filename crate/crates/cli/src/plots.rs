//! SVG charts and PNG panels written by `eval --plots`.

use std::collections::BTreeMap;
use std::fmt::Write;

use image::{Rgb, RgbImage};

use iceg::data::{quantize, Sample};

const W: f64 = 640.0;
const H: f64 = 400.0;
const MARGIN: f64 = 56.0;
const COLOURS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf"];

type Series = (String, Vec<(f64, f64)>);

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" font-family=\"sans-serif\" font-size=\"12\">\n\
         <rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n\
         <text x=\"{}\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">{title}</text>\n",
        W / 2.0
    )
}

/// Vertical bars for scores in `[0, 1]`.
pub fn bar_chart(title: &str, bars: &[(&str, f64)]) -> String {
    let mut s = header(title);
    let (x0, y0, plot_h) = (MARGIN, H - MARGIN, H - 2.0 * MARGIN);
    let slot = (W - 2.0 * MARGIN) / bars.len().max(1) as f64;
    for tick in 0..=4 {
        let v = tick as f64 / 4.0;
        let y = y0 - v * plot_h;
        let _ = writeln!(
            s,
            "<line x1=\"{x0}\" y1=\"{y}\" x2=\"{}\" y2=\"{y}\" stroke=\"#ddd\"/><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{v:.2}</text>",
            W - MARGIN,
            x0 - 6.0,
            y + 4.0
        );
    }
    for (i, (label, v)) in bars.iter().enumerate() {
        let bh = v.clamp(0.0, 1.0) * plot_h;
        let x = x0 + i as f64 * slot + slot * 0.2;
        let _ = writeln!(
            s,
            "<rect x=\"{x}\" y=\"{}\" width=\"{}\" height=\"{bh}\" fill=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{label}</text>\
             <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{v:.3}</text>",
            y0 - bh,
            slot * 0.6,
            COLOURS[i % COLOURS.len()],
            x + slot * 0.3,
            y0 + 16.0,
            x + slot * 0.3,
            y0 - bh - 4.0
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Extracts one curve per phase from a JSONL training log: the detector
/// objective for detector updates and the generator objective otherwise.
pub fn loss_series(jsonl: &str) -> Result<Vec<Series>, String> {
    let mut by_name: BTreeMap<String, Vec<(f64, f64)>> = BTreeMap::new();
    for (n, line) in jsonl.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
        let v: serde_json::Value = serde_json::from_str(line).map_err(|e| format!("line {}: {e}", n + 1))?;
        let phase = v["phase"].as_str().ok_or_else(|| format!("line {}: missing phase", n + 1))?;
        let key = if phase == "generator" { "gen_total" } else { "total" };
        let (Some(step), Some(loss)) = (v["step"].as_f64(), v[key].as_f64()) else {
            return Err(format!("line {}: missing step or {key}", n + 1));
        };
        by_name.entry(format!("{phase} {key}")).or_default().push((step, loss));
    }
    if by_name.is_empty() {
        return Err("log is empty".into());
    }
    Ok(by_name.into_iter().collect())
}

pub fn line_chart(title: &str, x_label: &str, series: &[Series]) -> String {
    let mut s = header(title);
    let pts = series.iter().flat_map(|(_, p)| p.iter());
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(x, y) in pts.filter(|(_, y)| y.is_finite()) {
        xmin = xmin.min(x);
        xmax = xmax.max(x);
        ymin = ymin.min(y);
        ymax = ymax.max(y);
    }
    if xmin > xmax {
        s.push_str("</svg>\n");
        return s;
    }
    if xmax - xmin < 1e-12 {
        xmax = xmin + 1.0;
    }
    if ymax - ymin < 1e-12 {
        ymax = ymin + 1.0;
    }
    let (pw, ph) = (W - 2.0 * MARGIN, H - 2.0 * MARGIN);
    let sx = |x: f64| MARGIN + (x - xmin) / (xmax - xmin) * pw;
    let sy = |y: f64| H - MARGIN - (y - ymin) / (ymax - ymin) * ph;
    let _ = writeln!(
        s,
        "<rect x=\"{MARGIN}\" y=\"{MARGIN}\" width=\"{pw}\" height=\"{ph}\" fill=\"none\" stroke=\"#888\"/>\
         <text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{x_label}</text>",
        W / 2.0,
        H - 16.0
    );
    for tick in 0..=4 {
        let f = tick as f64 / 4.0;
        let (xv, yv) = (xmin + f * (xmax - xmin), ymin + f * (ymax - ymin));
        let _ = writeln!(
            s,
            "<text x=\"{}\" y=\"{}\" text-anchor=\"middle\">{xv:.0}</text><text x=\"{}\" y=\"{}\" text-anchor=\"end\">{yv:.3}</text>",
            sx(xv),
            H - MARGIN + 16.0,
            MARGIN - 6.0,
            sy(yv) + 4.0
        );
    }
    for (i, (name, p)) in series.iter().enumerate() {
        let colour = COLOURS[i % COLOURS.len()];
        let path: Vec<String> = p
            .iter()
            .filter(|(_, y)| y.is_finite())
            .map(|&(x, y)| format!("{:.1},{:.1}", sx(x), sy(y)))
            .collect();
        let _ = writeln!(
            s,
            "<polyline fill=\"none\" stroke=\"{colour}\" stroke-width=\"1.5\" points=\"{}\"/>\
             <text x=\"{}\" y=\"{}\" fill=\"{colour}\">{name}</text>",
            path.join(" "),
            MARGIN + 8.0,
            MARGIN + 16.0 + 14.0 * i as f64
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Image, ground truth and prediction side by side.
pub fn panel(sample: &Sample, pred: &[f64]) -> RgbImage {
    let (h, w) = (sample.height, sample.width);
    let plane = h * w;
    RgbImage::from_fn((3 * w) as u32, h as u32, |x, y| {
        let (col, x) = (x as usize / w, x as usize % w);
        let i = y as usize * w + x;
        match col {
            0 => Rgb([0, 1, 2].map(|c| quantize(sample.image[c * plane + i]))),
            1 => Rgb([quantize(sample.mask[i]); 3]),
            _ => Rgb([quantize(pred[i] as f32); 3]),
        }
    })
}
