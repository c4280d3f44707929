//! (α, β) grid sweeps and the finite-difference Hessian classifier.

use std::fmt;
use std::io::Write;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::ingest::DataSplit;
use crate::trainer::{train, TrainConfig};

/// One grid cell of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Cell {
    /// Outside the domain `0 <= alpha <= beta`.
    Absent,
    /// Training failed for at least one seed.
    Failed(String),
    Score(f64),
}

impl Cell {
    pub fn score(&self) -> Option<f64> {
        match self {
            Cell::Score(s) => Some(*s),
            _ => None,
        }
    }
}

/// Mean validation score at every `(alpha, beta)` grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceSurface {
    pub alphas: Vec<f64>,
    pub betas: Vec<f64>,
    /// `cells[a][b]` belongs to `(alphas[a], betas[b])`.
    pub cells: Vec<Vec<Cell>>,
    pub seeds: Vec<u64>,
}

fn in_domain(alpha: f64, beta: f64) -> bool {
    alpha >= 0.0 && alpha <= beta && beta.is_finite()
}

/// Trains one model per valid grid point and seed on the shared split and
/// records the mean best-epoch validation score. Points with `alpha > beta`
/// are left absent; a failing run marks its cell failed and the sweep goes on.
/// Cells run concurrently on the current rayon pool.
pub fn sweep(
    split: &DataSplit,
    base: &TrainConfig,
    alphas: &[f64],
    betas: &[f64],
    seeds: &[u64],
) -> Result<PerformanceSurface> {
    if alphas.is_empty() || betas.is_empty() || seeds.is_empty() {
        return Err(contract("sweep needs at least one alpha, one beta and one seed"));
    }
    if alphas.iter().chain(betas).any(|v| !v.is_finite()) {
        return Err(contract("grid values must be finite"));
    }
    let points: Vec<(usize, usize)> = (0..alphas.len())
        .flat_map(|a| (0..betas.len()).map(move |b| (a, b)))
        .collect();
    let flat: Vec<Cell> = points
        .par_iter()
        .map(|&(a, b)| {
            let (alpha, beta) = (alphas[a], betas[b]);
            if !in_domain(alpha, beta) {
                return Cell::Absent;
            }
            let mut total = 0.0;
            for &seed in seeds {
                let cfg = TrainConfig {
                    alpha,
                    beta,
                    seed,
                    ..base.clone()
                };
                match train(split, &cfg) {
                    Ok(out) => total += out.best_score,
                    Err(e) => {
                        log::warn!("sweep cell alpha={alpha} beta={beta} seed={seed} failed: {e}");
                        return Cell::Failed(e.to_string());
                    }
                }
            }
            Cell::Score(total / seeds.len() as f64)
        })
        .collect();
    let cells = flat.chunks(betas.len()).map(|r| r.to_vec()).collect();
    Ok(PerformanceSurface {
        alphas: alphas.to_vec(),
        betas: betas.to_vec(),
        cells,
        seeds: seeds.to_vec(),
    })
}

/// The nine points of a 3×3 stencil, row-major over `alpha - h, alpha,
/// alpha + h` then `beta - h, beta, beta + h`.
pub fn stencil_axes(anchor: (f64, f64), h: (f64, f64)) -> ([f64; 3], [f64; 3]) {
    let (a, b) = anchor;
    ([a - h.0, a, a + h.0], [b - h.1, b, b + h.1])
}

impl PerformanceSurface {
    pub fn get(&self, a: usize, b: usize) -> &Cell {
        &self.cells[a][b]
    }

    /// Grid position of the best-scoring cell, if any cell scored.
    pub fn argmax(&self) -> Option<(usize, usize)> {
        let mut best: Option<((usize, usize), f64)> = None;
        for (a, row) in self.cells.iter().enumerate() {
            for (b, c) in row.iter().enumerate() {
                if let Some(s) = c.score() {
                    if best.is_none_or(|(_, v)| s > v) {
                        best = Some(((a, b), s));
                    }
                }
            }
        }
        best.map(|(p, _)| p)
    }

    /// The 3×3 block of scores centred on `(a, b)`, if all nine are present.
    pub fn neighborhood(&self, a: usize, b: usize) -> Option<[[f64; 3]; 3]> {
        if a == 0 || b == 0 || a + 1 >= self.alphas.len() || b + 1 >= self.betas.len() {
            return None;
        }
        let mut out = [[0.0; 3]; 3];
        for (i, row) in out.iter_mut().enumerate() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = self.cells[a + i - 1][b + j - 1].score()?;
            }
        }
        Some(out)
    }

    /// Verdicts at every interior point whose neighbours are evenly spaced
    /// and all scored.
    pub fn verdicts(&self) -> Vec<HessianVerdict> {
        let mut out = Vec::new();
        for a in 1..self.alphas.len().saturating_sub(1) {
            for b in 1..self.betas.len().saturating_sub(1) {
                let Some(block) = self.neighborhood(a, b) else { continue };
                let hx = self.alphas[a + 1] - self.alphas[a];
                let hy = self.betas[b + 1] - self.betas[b];
                let even = |lo: f64, mid: f64, step: f64| ((mid - lo) - step).abs() <= 1e-9 * step.abs().max(1.0);
                if !even(self.alphas[a - 1], self.alphas[a], hx) || !even(self.betas[b - 1], self.betas[b], hy) {
                    continue;
                }
                if let Ok(v) = hessian_concavity((self.alphas[a], self.betas[b]), &block, hx, hy) {
                    out.push(v);
                }
            }
        }
        out
    }

    /// CSV matrix: a header of beta values, then one row per alpha. Absent
    /// and failed cells are empty fields.
    pub fn write_csv<W: Write>(&self, mut out: W) -> Result<()> {
        write!(out, "alpha\\beta")?;
        for b in &self.betas {
            write!(out, ",{b}")?;
        }
        writeln!(out)?;
        for (a, row) in self.alphas.iter().zip(&self.cells) {
            write!(out, "{a}")?;
            for c in row {
                match c.score() {
                    Some(s) => write!(out, ",{s}")?,
                    None => write!(out, ",")?,
                }
            }
            writeln!(out)?;
        }
        Ok(())
    }

    /// Standalone SVG 1.1 heatmap, alpha down the rows and beta across.
    /// Empty cells are left blank. Output depends only on the surface.
    pub fn write_svg<W: Write>(&self, mut out: W, title: &str) -> Result<()> {
        const CELL: f64 = 48.0;
        const LEFT: f64 = 70.0;
        const TOP: f64 = 50.0;
        let (rows, cols) = (self.alphas.len() as f64, self.betas.len() as f64);
        let width = LEFT + cols * CELL + 90.0;
        let height = TOP + rows * CELL + 50.0;
        let scores: Vec<f64> = self.cells.iter().flatten().filter_map(Cell::score).collect();
        let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);

        writeln!(out, r#"<?xml version="1.0" encoding="UTF-8"?>"#)?;
        writeln!(
            out,
            r#"<svg xmlns="http://www.w3.org/2000/svg" version="1.1" width="{width:.0}" height="{height:.0}" font-family="sans-serif" font-size="11">"#
        )?;
        writeln!(out, r#"<text x="{LEFT:.0}" y="20" font-size="13">{}</text>"#, escape(title))?;
        for (b, beta) in self.betas.iter().enumerate() {
            let x = LEFT + (b as f64 + 0.5) * CELL;
            writeln!(out, r#"<text x="{x:.1}" y="{:.1}" text-anchor="middle">{beta}</text>"#, TOP - 6.0)?;
        }
        for (a, alpha) in self.alphas.iter().enumerate() {
            let y = TOP + (a as f64 + 0.5) * CELL + 4.0;
            writeln!(out, r#"<text x="{:.1}" y="{y:.1}" text-anchor="end">{alpha}</text>"#, LEFT - 6.0)?;
            for (b, c) in self.cells[a].iter().enumerate() {
                let x = LEFT + b as f64 * CELL;
                let y = TOP + a as f64 * CELL;
                match c.score() {
                    Some(s) => {
                        let t = if hi > lo { (s - lo) / (hi - lo) } else { 0.5 };
                        writeln!(
                            out,
                            r#"<rect x="{x:.1}" y="{y:.1}" width="{CELL:.0}" height="{CELL:.0}" fill="{}"><title>alpha={} beta={} score={s:.6}</title></rect>"#,
                            ramp(t),
                            self.alphas[a],
                            self.betas[b]
                        )?;
                    }
                    None => writeln!(
                        out,
                        r##"<rect x="{x:.1}" y="{y:.1}" width="{CELL:.0}" height="{CELL:.0}" fill="none" stroke="#dddddd"/>"##
                    )?,
                }
            }
        }
        let axis_y = TOP + rows * CELL + 20.0;
        writeln!(out, r#"<text x="{:.1}" y="{axis_y:.1}" text-anchor="middle">beta</text>"#, LEFT + cols * CELL / 2.0)?;
        writeln!(
            out,
            r#"<text x="14" y="{:.1}" text-anchor="middle" transform="rotate(-90 14 {:.1})">alpha</text>"#,
            TOP + rows * CELL / 2.0,
            TOP + rows * CELL / 2.0
        )?;
        if !scores.is_empty() {
            let lx = LEFT + cols * CELL + 20.0;
            for step in 0..10 {
                let t = 1.0 - step as f64 / 9.0;
                writeln!(
                    out,
                    r#"<rect x="{lx:.1}" y="{:.1}" width="16" height="{:.1}" fill="{}"/>"#,
                    TOP + step as f64 * rows * CELL / 10.0,
                    rows * CELL / 10.0,
                    ramp(t)
                )?;
            }
            writeln!(out, r#"<text x="{:.1}" y="{:.1}">{hi:.4}</text>"#, lx + 20.0, TOP + 10.0)?;
            writeln!(out, r#"<text x="{:.1}" y="{:.1}">{lo:.4}</text>"#, lx + 20.0, TOP + rows * CELL)?;
        }
        writeln!(out, "</svg>")?;
        Ok(())
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Linear ramp from dark blue (0) to yellow (1).
fn ramp(t: f64) -> String {
    let t = t.clamp(0.0, 1.0);
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!("#{:02x}{:02x}{:02x}", lerp(38.0, 250.0), lerp(50.0, 225.0), lerp(140.0, 40.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Curvature {
    Concave,
    Convex,
    Saddle,
    Indeterminate,
}

impl fmt::Display for Curvature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Curvature::Concave => "concave",
            Curvature::Convex => "convex",
            Curvature::Saddle => "saddle",
            Curvature::Indeterminate => "indeterminate",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HessianVerdict {
    pub center: (f64, f64),
    pub h11: f64,
    pub h22: f64,
    pub h12: f64,
    pub det: f64,
    pub class: Curvature,
}

/// Sign rules on the Hessian entries.
pub fn classify(h11: f64, det: f64) -> Curvature {
    if det < 0.0 {
        Curvature::Saddle
    } else if det > 0.0 && h11 < 0.0 {
        Curvature::Concave
    } else if det > 0.0 && h11 > 0.0 {
        Curvature::Convex
    } else {
        Curvature::Indeterminate
    }
}

/// Central-difference Hessian of a 3×3 block of scores.
///
/// `f[i][j]` is the value at `(x + (i-1) h_x, y + (j-1) h_y)`; `x` runs down
/// the rows (alpha) and `y` across the columns (beta).
pub fn hessian_concavity(center: (f64, f64), f: &[[f64; 3]; 3], hx: f64, hy: f64) -> Result<HessianVerdict> {
    if f.iter().flatten().any(|v| !v.is_finite()) {
        return Err(contract("stencil values must be finite"));
    }
    if !(hx > 0.0 && hy > 0.0 && hx.is_finite() && hy.is_finite()) {
        return Err(contract("stencil steps must be positive"));
    }
    let c = f[1][1];
    let h11 = (f[2][1] - 2.0 * c + f[0][1]) / (hx * hx);
    let h22 = (f[1][2] - 2.0 * c + f[1][0]) / (hy * hy);
    let h12 = (f[2][2] - f[0][2] - f[2][0] + f[0][0]) / (4.0 * hx * hy);
    let det = h11 * h22 - h12 * h12;
    Ok(HessianVerdict {
        center,
        h11,
        h22,
        h12,
        det,
        class: classify(h11, det),
    })
}

/// `alpha,beta,H11,H22,H12,detH,class` rows.
pub fn write_verdicts_csv<W: Write>(mut out: W, verdicts: &[HessianVerdict]) -> Result<()> {
    writeln!(out, "alpha,beta,H11,H22,H12,detH,class")?;
    for v in verdicts {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            v.center.0, v.center.1, v.h11, v.h22, v.h12, v.det, v.class
        )?;
    }
    Ok(())
}
