//! Evaluation, adaptation timing, 2-D decision-boundary plots and reports.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::meta::{predict_query, Algorithm, Model};
use crate::tasks::Episode;
use crate::tensor::{Scalar, Tensor};

/// Critical value of the two-sided 95% normal interval.
pub const Z95: f64 = 1.96;

/// Header of the CSV report format.
pub const CSV_HEADER: [&str; 7] = ["variant", "episodes", "accuracy_mean", "accuracy_ci95", "time_mean_s", "time_std_s", "seed"];

/// Accuracy and timing of one variant.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub variant: String,
    pub episodes: usize,
    /// Per-episode query accuracies in `[0, 1]`.
    pub accuracies: Vec<f64>,
    pub accuracy_mean: f64,
    /// Radius of the 95% normal-approximation interval, `1.96·s/√n` with
    /// `s` the sample standard deviation.
    pub accuracy_ci95: f64,
    /// Wall-clock seconds of each timing repeat.
    pub times_s: Vec<f64>,
    pub time_mean_s: f64,
    pub time_std_s: f64,
    pub seed: u64,
    pub config_hash: String,
    pub version: String,
    pub interval: String,
}

impl Report {
    pub fn new(variant: impl Into<String>, seed: u64) -> Self {
        Self {
            variant: variant.into(),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            interval: "95% normal approximation, 1.96·s/√n".to_string(),
            ..Default::default()
        }
    }

    pub fn with_accuracies(mut self, accuracies: Vec<f64>) -> Self {
        let (mean, sd) = mean_std(&accuracies);
        self.episodes = accuracies.len();
        self.accuracy_mean = mean;
        self.accuracy_ci95 = if accuracies.is_empty() { 0.0 } else { Z95 * sd / (accuracies.len() as f64).sqrt() };
        self.accuracies = accuracies;
        self
    }

    pub fn with_times(mut self, times: Vec<f64>) -> Self {
        let (mean, sd) = mean_std(&times);
        self.time_mean_s = mean;
        self.time_std_s = sd;
        self.times_s = times;
        self
    }
}

/// Mean and sample (n − 1) standard deviation; zero spread below two values.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    if v.len() < 2 {
        return (mean, 0.0);
    }
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Adapts to each episode's support set and scores its query set.
pub fn evaluate<T: Scalar>(
    variant: &str,
    algorithm: &Algorithm,
    model: &Model<T>,
    mut episodes: impl FnMut(u64) -> Result<Episode<T>>,
    n_episodes: usize,
    lambda: f64,
    seed: u64,
) -> Result<Report> {
    if n_episodes < 2 {
        return Err(Error::config("evaluation needs at least two episodes"));
    }
    let mut acc = Vec::with_capacity(n_episodes);
    for i in 0..n_episodes {
        let ep = episodes(i as u64)?;
        acc.push(algorithm.episode_accuracy(model, &ep, lambda)?);
    }
    Ok(Report::new(variant, seed).with_accuracies(acc))
}

/// A named algorithm/model pair to time.
pub struct Variant<'a, T: Scalar> {
    pub name: String,
    pub algorithm: Algorithm,
    pub model: &'a Model<T>,
    pub lambda: f64,
}

/// Times full adaptation plus query prediction over pre-generated
/// `episodes`, `repeats` times per variant. Variants are interleaved
/// within each repeat so slow drift affects all of them alike.
pub fn time_adaptation<T: Scalar>(variants: &[Variant<'_, T>], episodes: &[Episode<T>], repeats: usize, seed: u64) -> Result<Vec<Report>> {
    if let Some(first) = variants.first() {
        if variants.iter().any(|v| v.model.encoder_cfg != first.model.encoder_cfg || v.model.n_way() != first.model.n_way()) {
            return Err(Error::config("timed variants must share one encoder and head configuration"));
        }
    }
    if episodes.is_empty() || repeats == 0 {
        return Err(Error::config("timing needs at least one episode and one repeat"));
    }
    let mut times = vec![Vec::with_capacity(repeats); variants.len()];
    let mut accs = vec![Vec::new(); variants.len()];
    for r in 0..repeats {
        for (vi, v) in variants.iter().enumerate() {
            let start = Instant::now();
            let mut batch_acc = Vec::with_capacity(episodes.len());
            for ep in episodes {
                batch_acc.push(v.algorithm.episode_accuracy(v.model, ep, v.lambda)?);
            }
            times[vi].push(start.elapsed().as_secs_f64());
            if r == 0 {
                accs[vi] = batch_acc;
            }
        }
    }
    Ok(variants
        .iter()
        .zip(times.into_iter().zip(accs))
        .map(|(v, (t, a))| Report::new(v.name.clone(), seed).with_accuracies(a).with_times(t))
        .collect())
}

/// Predicted class at every point of a `resolution × resolution` grid
/// over `[−extent, extent]²`, row-major from the top-left corner.
pub fn decision_grid<T: Scalar>(
    algorithm: &Algorithm,
    model: &Model<T>,
    episode: &Episode<T>,
    lambda: f64,
    resolution: usize,
    extent: f64,
) -> Result<Vec<usize>> {
    if model.encoder_cfg.input_shape != [2] {
        return Err(Error::config("decision boundaries need a model with 2-D inputs"));
    }
    let adapted = algorithm.adapt(model, episode, lambda)?;
    let coords = grid_coords(resolution, extent);
    let pts: Vec<T> = coords.iter().flat_map(|&(x, y)| [T::of_f64(x), T::of_f64(y)]).collect();
    let probs = predict_query(&model.encoder_cfg, &adapted, &Tensor::from_vec(&[coords.len(), 2], pts)?)?;
    Ok(probs.argmax_rows())
}

fn grid_coords(resolution: usize, extent: f64) -> Vec<(f64, f64)> {
    let step = 2.0 * extent / resolution as f64;
    let mut v = Vec::with_capacity(resolution * resolution);
    for row in 0..resolution {
        let y = extent - (row as f64 + 0.5) * step;
        for col in 0..resolution {
            v.push((-extent + (col as f64 + 0.5) * step, y));
        }
    }
    v
}

const FILL: [&str; 4] = ["#cfe0f5", "#f7d9c4", "#d4efd0", "#eadcf3"];
const INK: [&str; 4] = ["#1f5fa8", "#c2571a", "#2b8a3e", "#7b3fa0"];
const PANEL: f64 = 320.0;
const MARGIN: f64 = 30.0;

/// Writes one panel per episode: decision regions from a dense grid,
/// support points as large dots, query points as small dots.
pub fn plot_decision_boundary_2d<T: Scalar>(
    algorithm: &Algorithm,
    model: &Model<T>,
    episodes: &[Episode<T>],
    lambda: f64,
    resolution: usize,
    extent: f64,
    path: &Path,
) -> Result<()> {
    let svg = render_svg(algorithm, model, episodes, lambda, resolution, extent)?;
    fs::write(path, svg).map_err(|e| Error::io(path, e))
}

pub fn render_svg<T: Scalar>(
    algorithm: &Algorithm,
    model: &Model<T>,
    episodes: &[Episode<T>],
    lambda: f64,
    resolution: usize,
    extent: f64,
) -> Result<String> {
    if resolution == 0 || !(extent > 0.0) {
        return Err(Error::config("plot needs a positive grid resolution and extent"));
    }
    let width = episodes.len() as f64 * (PANEL + MARGIN) + MARGIN;
    let height = PANEL + 2.0 * MARGIN;
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" viewBox="0 0 {width} {height}">"#);
    let _ = writeln!(s, r#"<rect width="{width}" height="{height}" fill="white"/>"#);
    let cell = PANEL / resolution as f64;
    let to_px = |v: f64| (v + extent) / (2.0 * extent) * PANEL;

    for (k, ep) in episodes.iter().enumerate() {
        let ox = MARGIN + k as f64 * (PANEL + MARGIN);
        let oy = MARGIN;
        let grid = decision_grid(algorithm, model, ep, lambda, resolution, extent)?;
        let _ = writeln!(s, r#"<g transform="translate({ox},{oy})">"#);
        let _ = writeln!(s, r#"<text x="0" y="-8" font-family="sans-serif" font-size="13">task {k}</text>"#);
        // Run-length rows keep the file small.
        for row in 0..resolution {
            let line = &grid[row * resolution..(row + 1) * resolution];
            let mut start = 0;
            while start < resolution {
                let class = line[start];
                let mut end = start + 1;
                while end < resolution && line[end] == class {
                    end += 1;
                }
                let _ = writeln!(
                    s,
                    r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                    start as f64 * cell,
                    row as f64 * cell,
                    (end - start) as f64 * cell,
                    cell,
                    FILL[class % FILL.len()]
                );
                start = end;
            }
        }
        let mut dots = |x: &Tensor<T>, y: &[usize], r: f64, stroke: bool| {
            for (i, &label) in y.iter().enumerate() {
                let px = to_px(x.data()[2 * i].as_f64());
                let py = PANEL - to_px(x.data()[2 * i + 1].as_f64());
                if !(0.0..=PANEL).contains(&px) || !(0.0..=PANEL).contains(&py) {
                    continue;
                }
                let outline = if stroke { r#" stroke="black" stroke-width="1""# } else { "" };
                let _ = writeln!(s, r#"<circle cx="{px:.2}" cy="{py:.2}" r="{r}" fill="{}"{outline}/>"#, INK[label % INK.len()]);
            }
        };
        dots(&ep.query_x, &ep.query_y, 2.0, false);
        dots(&ep.support_x, &ep.support_y, 4.5, true);
        let _ = writeln!(s, r#"<rect width="{PANEL}" height="{PANEL}" fill="none" stroke="black"/>"#);
        let _ = writeln!(s, "</g>");
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl ReportFormat {
    /// Guesses the format from a file extension; JSON unless it ends in `.csv`.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("csv") => Self::Csv,
            _ => Self::Json,
        }
    }
}

pub fn write_report(reports: &[Report], path: &Path, format: ReportFormat) -> Result<()> {
    match format {
        ReportFormat::Json => {
            let text = serde_json::to_string_pretty(reports).map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })?;
            fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
        }
        ReportFormat::Csv => {
            let csv_err = |e: csv::Error| Error::Format { path: path.into(), msg: e.to_string() };
            let mut w = csv::Writer::from_path(path).map_err(csv_err)?;
            w.write_record(CSV_HEADER).map_err(csv_err)?;
            for r in reports {
                w.write_record([
                    r.variant.clone(),
                    r.episodes.to_string(),
                    r.accuracy_mean.to_string(),
                    r.accuracy_ci95.to_string(),
                    r.time_mean_s.to_string(),
                    r.time_std_s.to_string(),
                    r.seed.to_string(),
                ])
                .map_err(csv_err)?;
            }
            w.flush().map_err(|e| Error::io(path, e))
        }
    }
}

pub fn read_report_json(path: &Path) -> Result<Vec<Report>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format { path: path.into(), msg: e.to_string() })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_accuracy_has_zero_radius() {
        let r = Report::new("x", 0).with_accuracies(vec![1.0; 10]);
        assert_eq!(r.accuracy_mean, 1.0);
        assert_eq!(r.accuracy_ci95, 0.0);
    }

    #[test]
    fn radius_formula() {
        let acc = vec![0.2, 0.4, 0.6, 0.8];
        let r = Report::new("x", 0).with_accuracies(acc.clone());
        let sd = (acc.iter().map(|a| (a - 0.5f64).powi(2)).sum::<f64>() / 3.0).sqrt();
        assert!((r.accuracy_mean - 0.5).abs() < 1e-12);
        assert!((r.accuracy_ci95 - 1.96 * sd / 2.0).abs() < 1e-12);
    }

    #[test]
    fn grid_covers_the_square() {
        let g = grid_coords(200, 6.0);
        assert_eq!(g.len(), 40_000);
        assert!(g.iter().all(|&(x, y)| x.abs() < 6.0 && y.abs() < 6.0));
        assert!((g[0].0 + 5.97).abs() < 1e-12 && (g[0].1 - 5.97).abs() < 1e-12);
    }
}
