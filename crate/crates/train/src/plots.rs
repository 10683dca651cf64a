//! Learning-curve figures with seed bands and the tidy long-format table.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use serde::Serialize;

use crate::error::{Result, TrainError};
use crate::metrics::{mean_stderr, read_metrics, write_csv, MetricsRow};

/// One metrics file. Files sharing a `label` are seeds of the same curve.
#[derive(Debug, Clone, PartialEq)]
pub struct PlotInput {
    pub label: String,
    pub seed: u64,
    pub path: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TidyRow {
    pub run_id: String,
    pub seed: u64,
    pub cost: f64,
    pub env_steps: u64,
    pub metric: String,
    pub value: f64,
}

/// Mean and standard error across seeds at one evaluation point.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BandRow {
    pub label: String,
    pub metric: String,
    pub env_steps: u64,
    pub mean: f64,
    pub stderr: f64,
    pub seeds: usize,
}

pub const PLOTTED: [&str; 5] = [
    "mean_task_reward",
    "mean_cost_adjusted_return",
    "mean_episodic_acquisitions",
    "discharge_rate",
    "mortality_rate",
];

fn metric(row: &MetricsRow, name: &str) -> f64 {
    match name {
        "mean_task_reward" => row.mean_task_reward,
        "mean_cost_adjusted_return" => row.mean_cost_adjusted_return,
        "mean_episodic_acquisitions" => row.mean_episodic_acquisitions,
        "discharge_rate" => row.discharge_rate,
        "mortality_rate" => row.mortality_rate,
        _ => f64::NAN,
    }
}

#[derive(Debug, Clone)]
pub struct PlotOutput {
    pub tidy: PathBuf,
    pub bands: PathBuf,
    pub figures: Vec<PathBuf>,
}

/// Bands per label and metric; undefined values (`NaN`) are skipped.
pub fn bands(runs: &[(PlotInput, Vec<MetricsRow>)]) -> Vec<BandRow> {
    let mut labels: Vec<&str> = Vec::new();
    for (inp, _) in runs {
        if !labels.contains(&inp.label.as_str()) {
            labels.push(&inp.label);
        }
    }
    let mut out = Vec::new();
    for label in labels {
        for name in PLOTTED {
            let mut at: BTreeMap<u64, Vec<f64>> = BTreeMap::new();
            for (_, rows) in runs.iter().filter(|(i, _)| i.label == label) {
                for r in rows {
                    let v = metric(r, name);
                    if v.is_finite() {
                        at.entry(r.env_steps).or_default().push(v);
                    }
                }
            }
            for (step, vals) in at {
                let (mean, stderr) = mean_stderr(&vals);
                out.push(BandRow {
                    label: label.to_string(),
                    metric: name.to_string(),
                    env_steps: step,
                    mean,
                    stderr,
                    seeds: vals.len(),
                });
            }
        }
    }
    out
}

const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

fn lighten(c: [u8; 3]) -> Rgb<u8> {
    Rgb(c.map(|v| ((v as u16 + 2 * 255) / 3) as u8))
}

fn line(img: &mut RgbImage, (x0, y0): (i64, i64), (x1, y1): (i64, i64), c: Rgb<u8>) {
    let (dx, dy) = ((x1 - x0).abs(), -(y1 - y0).abs());
    let (sx, sy) = (if x0 < x1 { 1 } else { -1 }, if y0 < y1 { 1 } else { -1 });
    let (mut x, mut y, mut err) = (x0, y0, dx + dy);
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, c);
        }
        if x == x1 && y == y1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Renders every label's band for one metric; `None` when no value is defined.
fn render(rows: &[&BandRow], labels: &[String]) -> Option<RgbImage> {
    if rows.is_empty() {
        return None;
    }
    let (w, h, m) = (640u32, 400u32, 40i64);
    let xmax = rows.iter().map(|r| r.env_steps).max().unwrap_or(0).max(1) as f64;
    let lo = rows.iter().map(|r| r.mean - r.stderr).fold(f64::INFINITY, f64::min);
    let hi = rows.iter().map(|r| r.mean + r.stderr).fold(f64::NEG_INFINITY, f64::max);
    let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
    let px = |x: f64| m + ((x / xmax) * (w as i64 - 2 * m) as f64).round() as i64;
    let py = |y: f64| h as i64 - m - (((y - lo) / (hi - lo)) * (h as i64 - 2 * m) as f64).round() as i64;
    let mut img = RgbImage::from_pixel(w, h, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (m, h as i64 - m), (w as i64 - m, h as i64 - m), axis);
    line(&mut img, (m, m), (m, h as i64 - m), axis);
    for (li, label) in labels.iter().enumerate() {
        let color = PALETTE[li % PALETTE.len()];
        let pts: Vec<&&BandRow> = rows.iter().filter(|r| &r.label == label).collect();
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            let (xa, xb) = (px(a.env_steps as f64), px(b.env_steps as f64));
            for x in xa..=xb {
                let t = if xb == xa { 0.0 } else { (x - xa) as f64 / (xb - xa) as f64 };
                let mean = a.mean + t * (b.mean - a.mean);
                let se = a.stderr + t * (b.stderr - a.stderr);
                line(&mut img, (x, py(mean + se)), (x, py(mean - se)), lighten(color));
            }
        }
        for pair in pts.windows(2) {
            let (a, b) = (pair[0], pair[1]);
            line(
                &mut img,
                (px(a.env_steps as f64), py(a.mean)),
                (px(b.env_steps as f64), py(b.mean)),
                Rgb(color),
            );
        }
        if let [only] = pts.as_slice() {
            let (x, y) = (px(only.env_steps as f64), py(only.mean));
            line(&mut img, (x - 2, y), (x + 2, y), Rgb(color));
        }
    }
    Some(img)
}

/// Reads `inputs`, writes `tidy.csv`, `bands.csv` and one PNG per metric
/// with a defined value into `out_dir`.
pub fn emit_plots(inputs: &[PlotInput], out_dir: &Path) -> Result<PlotOutput> {
    if inputs.is_empty() {
        return Err(TrainError::Config("no metrics files to plot".into()));
    }
    let mut runs = Vec::with_capacity(inputs.len());
    for inp in inputs {
        runs.push((inp.clone(), read_metrics(&inp.path)?));
    }
    let mut tidy = Vec::new();
    for (inp, rows) in &runs {
        let run_id = format!("{}/seed-{}", inp.label, inp.seed);
        for r in rows {
            for name in PLOTTED {
                tidy.push(TidyRow {
                    run_id: run_id.clone(),
                    seed: inp.seed,
                    cost: r.unit_cost,
                    env_steps: r.env_steps,
                    metric: name.to_string(),
                    value: metric(r, name),
                });
            }
        }
    }
    std::fs::create_dir_all(out_dir).map_err(crate::error::io_err(out_dir))?;
    let tidy_path = out_dir.join("tidy.csv");
    write_csv(&tidy_path, &tidy)?;
    let band_rows = bands(&runs);
    let bands_path = out_dir.join("bands.csv");
    write_csv(&bands_path, &band_rows)?;
    let mut labels: Vec<String> = Vec::new();
    for (inp, _) in &runs {
        if !labels.contains(&inp.label) {
            labels.push(inp.label.clone());
        }
    }
    let mut figures = Vec::new();
    for name in PLOTTED {
        let rows: Vec<&BandRow> = band_rows.iter().filter(|b| b.metric == name).collect();
        if let Some(img) = render(&rows, &labels) {
            let path = out_dir.join(format!("{name}.png"));
            img.save(&path).map_err(|e| TrainError::Image {
                path: path.clone(),
                reason: e.to_string(),
            })?;
            figures.push(path);
        }
    }
    Ok(PlotOutput {
        tidy: tidy_path,
        bands: bands_path,
        figures,
    })
}
