//! Channel-sorted feature-encoder panels next to spectrograms, for visual
//! comparison of clean and degraded speech.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};

use crate::audio_io::TimeSignal;
use crate::plot::Canvas;
use crate::representations::{stft, Layer, SSSRRepresentation, SsrBackend, StftParams};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SortedRepresentation {
    pub values: Array2<f64>,
    /// `values` column `j` is original channel `permutation[j]`.
    pub permutation: Vec<usize>,
}

fn sq_dist(a: ArrayView2<f64>, i: usize, j: usize) -> f64 {
    a.column(i).iter().zip(a.column(j)).map(|(x, y)| (x - y).powi(2)).sum()
}

/// Greedy nearest-neighbour chain over channels (columns): start at the
/// largest-norm channel, then repeatedly append the unvisited channel closest
/// in Euclidean distance to the last one. Ties go to the lower index.
pub fn channel_order(values: ArrayView2<f64>) -> Vec<usize> {
    let f = values.ncols();
    if f == 0 {
        return Vec::new();
    }
    let norms: Vec<f64> = values.axis_iter(Axis(1)).map(|c| c.iter().map(|v| v * v).sum()).collect();
    let mut current = (0..f).fold(0, |best, j| if norms[j] > norms[best] { j } else { best });
    let mut visited = vec![false; f];
    let mut order = Vec::with_capacity(f);
    visited[current] = true;
    order.push(current);
    for _ in 1..f {
        let mut best: Option<(usize, f64)> = None;
        for j in (0..f).filter(|&j| !visited[j]) {
            let d = sq_dist(values, current, j);
            if best.is_none_or(|(_, bd)| d < bd) {
                best = Some((j, d));
            }
        }
        let (next, _) = best.expect("unvisited channel remains");
        visited[next] = true;
        order.push(next);
        current = next;
    }
    order
}

pub fn apply_permutation(values: ArrayView2<f64>, permutation: &[usize]) -> Array2<f64> {
    values.select(Axis(1), permutation)
}

pub fn sort_channels(rep: &SSSRRepresentation) -> SortedRepresentation {
    let permutation = channel_order(rep.values.view());
    SortedRepresentation { values: apply_permutation(rep.values.view(), &permutation), permutation }
}

/// Per-panel z-score followed by an elementwise logistic sigmoid. A constant
/// panel maps to 0.5 everywhere.
pub fn standardize_sigmoid(values: ArrayView2<f64>) -> Array2<f64> {
    let n = values.len().max(1) as f64;
    let mean = values.sum() / n;
    let std = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
    values.mapv(|v| {
        let z = if std > 0.0 { (v - mean) / std } else { 0.0 };
        1.0 / (1.0 + (-z).exp())
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Panel {
    pub name: String,
    /// Frames × channels, in [0, 1].
    pub values: Array2<f64>,
    pub permutation: Option<Vec<usize>>,
}

/// Clean and noisy log-magnitude spectrograms, then clean and noisy
/// feature-encoder outputs per backend. Both FE panels of a backend use the
/// channel order derived from the clean representation.
pub fn build_panels(s: &TimeSignal, x: &TimeSignal, backends: &[&SsrBackend], params: &StftParams) -> Result<Vec<Panel>> {
    if s.len() != x.len() {
        return Err(Error::ShapeMismatch(vec![s.len()], vec![x.len()]));
    }
    let mut panels = Vec::with_capacity(2 + 2 * backends.len());
    for (name, sig) in [("S_SG", s), ("X_SG", x)] {
        let log_mag = stft(sig, params)?.magnitude.mapv(|m| (m + 1e-8).log10());
        panels.push(Panel { name: name.into(), values: standardize_sigmoid(log_mag.view()), permutation: None });
    }
    for backend in backends {
        let clean = backend.extract(s, Layer::Fe)?;
        let noisy = backend.extract(x, Layer::Fe)?;
        let sorted = sort_channels(&clean);
        let noisy_sorted = apply_permutation(noisy.values.view(), &sorted.permutation);
        let model = backend.model_id();
        panels.push(Panel {
            name: format!("S_FE_{model}"),
            values: standardize_sigmoid(sorted.values.view()),
            permutation: Some(sorted.permutation.clone()),
        });
        panels.push(Panel {
            name: format!("X_FE_{model}"),
            values: standardize_sigmoid(noisy_sorted.view()),
            permutation: Some(sorted.permutation),
        });
    }
    Ok(panels)
}

const PANEL_WIDTH: u32 = 640;
const PANEL_HEIGHT: u32 = 160;
const GAP: u32 = 8;

/// Renders the panels stacked vertically into a PNG. Returns the panel count.
pub fn render_panels(s: &TimeSignal, x: &TimeSignal, backends: &[&SsrBackend], params: &StftParams, path: impl AsRef<Path>) -> Result<usize> {
    let panels = build_panels(s, x, backends, params)?;
    write_panels_png(&panels, path)?;
    Ok(panels.len())
}

pub fn write_panels_png(panels: &[Panel], path: impl AsRef<Path>) -> Result<()> {
    let n = panels.len() as u32;
    let height = GAP + n * (PANEL_HEIGHT + GAP);
    let mut canvas = Canvas::new(PANEL_WIDTH + 2 * GAP, height);
    for (i, p) in panels.iter().enumerate() {
        let y0 = GAP + i as u32 * (PANEL_HEIGHT + GAP);
        canvas.heatmap(p.values.view(), GAP, y0, PANEL_WIDTH, PANEL_HEIGHT);
    }
    canvas.save(path)
}

/// One row per panel with a permutation: `panel,position,channel`.
pub fn write_permutation_csv(panels: &[Panel], path: impl AsRef<Path>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["panel", "position", "channel"])?;
    for p in panels {
        for (pos, ch) in p.permutation.iter().flatten().enumerate() {
            w.write_record([p.name.clone(), pos.to_string(), ch.to_string()])?;
        }
    }
    w.flush()?;
    Ok(())
}
