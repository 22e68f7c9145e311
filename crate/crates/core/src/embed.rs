//! Exact t-SNE of diseases in topic space (one row per disease, one column
//! per topic) and CSV/SVG export of the 2-D layout.

use std::fmt::Write as _;
use std::path::Path;

use ndarray::{Array2, Axis};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::rng::substream;
use crate::topic::write_rows;

pub const PERPLEXITY_TOL: f64 = 1e-5;
pub const MAX_BISECTIONS: usize = 50;
const KL_EVERY: usize = 50;

#[derive(Debug, Clone, PartialEq)]
pub struct EmbedConfig {
    pub perplexity: f64,
    pub iterations: usize,
    /// `None` picks `max(n / exaggeration / 4, 50)`.
    pub learning_rate: Option<f64>,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub seed: u64,
}

impl Default for EmbedConfig {
    fn default() -> Self {
        Self {
            perplexity: 20.0,
            iterations: 5000,
            learning_rate: None,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            seed: 1,
        }
    }
}

impl EmbedConfig {
    pub fn validate(&self, n_points: usize) -> Result<()> {
        if n_points < 4 {
            return Err(Error::Parameter(format!(
                "t-SNE needs at least 4 points, got {n_points}"
            )));
        }
        if !(self.perplexity > 1.0) || self.perplexity >= (n_points as f64 - 1.0) / 3.0 {
            return Err(Error::Parameter(format!(
                "perplexity {} must lie in (1, {:.2}) for {n_points} points",
                self.perplexity,
                (n_points as f64 - 1.0) / 3.0
            )));
        }
        if self.iterations < 250 {
            return Err(Error::Parameter(
                "t-SNE needs at least 250 iterations".into(),
            ));
        }
        if self.learning_rate.is_some_and(|r| !(r > 0.0)) {
            return Err(Error::Parameter("learning rate must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Embedding2D {
    pub coords: Array2<f64>,
    pub kl: f64,
    /// `(iteration, KL)` every 50 iterations, against the unexaggerated P.
    pub kl_trace: Vec<(usize, f64)>,
}

impl Embedding2D {
    pub fn kl_at(&self, iteration: usize) -> Option<f64> {
        self.kl_trace
            .iter()
            .find(|(i, _)| *i == iteration)
            .map(|(_, k)| *k)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Calibration {
    pub sigma: f64,
    pub probs: Vec<f64>,
    /// `2^H` of `probs`.
    pub perplexity: f64,
}

fn conditional(sq: &[f64], beta: f64) -> (Vec<f64>, f64) {
    let min = sq.iter().copied().fold(f64::INFINITY, f64::min);
    let w: Vec<f64> = sq.iter().map(|d| (-(d - min) * beta).exp()).collect();
    let total: f64 = w.iter().sum();
    let p: Vec<f64> = w.iter().map(|x| x / total).collect();
    let h: f64 = -p
        .iter()
        .filter(|&&x| x > 0.0)
        .map(|x| x * x.log2())
        .sum::<f64>();
    (p, h.exp2())
}

/// Bandwidth for one point from its distances to the others, found by
/// bisection on log precision so that `2^H(p)` meets the target.
pub fn perplexity_calibration(distances: &[f64], target: f64) -> Result<Calibration> {
    if distances.is_empty() || distances.iter().any(|d| !(d.is_finite() && *d >= 0.0)) {
        return Err(Error::Data(
            "calibration needs finite non-negative distances".into(),
        ));
    }
    let sq: Vec<f64> = distances.iter().map(|d| d * d).collect();
    let positive: Vec<f64> = sq.iter().copied().filter(|&d| d > 0.0).collect();
    if positive.is_empty() {
        log::warn!("all distances are zero; using uniform affinities");
        let n = sq.len() as f64;
        return Ok(Calibration {
            sigma: f64::INFINITY,
            probs: vec![1.0 / n; sq.len()],
            perplexity: n,
        });
    }
    let scale = positive.iter().sum::<f64>() / positive.len() as f64;
    let (mut lo, mut hi) = (-40.0f64, 40.0f64);
    let mut best = None;
    for _ in 0..MAX_BISECTIONS {
        let u = (lo + hi) / 2.0;
        let beta = u.exp() / scale;
        let (p, perp) = conditional(&sq, beta);
        let done = (perp - target).abs() < PERPLEXITY_TOL;
        best = Some((beta, p, perp));
        if done {
            break;
        }
        // larger precision, lower entropy
        if perp > target {
            lo = u;
        } else {
            hi = u;
        }
    }
    let (beta, probs, perplexity) = best.expect("at least one bisection step");
    if (perplexity - target).abs() >= PERPLEXITY_TOL {
        log::warn!("perplexity calibration reached {perplexity:.6} for target {target}");
    }
    Ok(Calibration {
        sigma: (1.0 / (2.0 * beta)).sqrt(),
        probs,
        perplexity,
    })
}

fn sq_distances(x: &Array2<f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x
                .row(i)
                .iter()
                .zip(x.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Copy of `rows` with exact duplicates of earlier rows nudged by
/// Gaussian(0, 1e-10) noise.
fn jitter_duplicates(rows: &Array2<f64>, seed: u64) -> Array2<f64> {
    let mut x = rows.clone();
    let mut rng = substream(seed, &[1]);
    let noise = Normal::new(0.0, 1e-10).expect("valid normal");
    let mut jittered = 0;
    for i in 1..x.nrows() {
        if (0..i).any(|j| rows.row(j) == rows.row(i)) {
            for v in x.row_mut(i).iter_mut() {
                *v += noise.sample(&mut rng);
            }
            jittered += 1;
        }
    }
    if jittered > 0 {
        log::info!("jittered {jittered} duplicate rows before t-SNE");
    }
    x
}

/// Symmetrised joint affinities `(p_{j|i} + p_{i|j}) / 2n`.
pub fn joint_probabilities(rows: &Array2<f64>, perplexity: f64) -> Result<Array2<f64>> {
    let n = rows.nrows();
    let d = sq_distances(rows);
    let cond: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let dist: Vec<f64> = (0..n)
                .filter(|&j| j != i)
                .map(|j| d[[i, j]].sqrt())
                .collect();
            perplexity_calibration(&dist, perplexity).map(|c| c.probs)
        })
        .collect::<Result<_>>()?;
    let mut p = Array2::zeros((n, n));
    for i in 0..n {
        let mut k = 0;
        for j in 0..n {
            if j != i {
                p[[i, j]] += cond[i][k] / (2.0 * n as f64);
                p[[j, i]] += cond[i][k] / (2.0 * n as f64);
                k += 1;
            }
        }
    }
    Ok(p)
}

/// Unnormalised Student-t kernel (row-major, zero diagonal) and its sum.
fn student_kernel(y: &Array2<f64>) -> (Vec<f64>, f64) {
    let n = y.nrows();
    let pts: Vec<[f64; 2]> = y.rows().into_iter().map(|r| [r[0], r[1]]).collect();
    let mut num = vec![0.0; n * n];
    let mut total = 0.0;
    for i in 0..n {
        for j in i + 1..n {
            let dx = pts[i][0] - pts[j][0];
            let dy = pts[i][1] - pts[j][1];
            let v = 1.0 / (1.0 + dx * dx + dy * dy);
            num[i * n + j] = v;
            num[j * n + i] = v;
            total += 2.0 * v;
        }
    }
    (num, total)
}

/// KL(P || Q) for the Student-t affinities of layout `y`.
pub fn kl_divergence(p: &Array2<f64>, y: &Array2<f64>) -> f64 {
    let n = y.nrows();
    let (num, total) = student_kernel(y);
    let p = p.as_standard_layout();
    let p = p.as_slice().expect("contiguous");
    let mut kl = 0.0;
    for (k, &pij) in p.iter().enumerate() {
        if pij > 0.0 && k / n != k % n {
            kl += pij * (pij * total / num[k]).ln();
        }
    }
    kl.max(0.0)
}

/// Gradient of `KL(scale * P || Q)` with respect to `y`.
pub fn kl_gradient(p: &Array2<f64>, y: &Array2<f64>, scale: f64) -> Array2<f64> {
    let n = y.nrows();
    let (num, total) = student_kernel(y);
    let p = p.as_standard_layout();
    let p = p.as_slice().expect("contiguous");
    let mut grad = Array2::zeros((n, 2));
    for i in 0..n {
        let (yi0, yi1) = (y[[i, 0]], y[[i, 1]]);
        let (mut gx, mut gy) = (0.0, 0.0);
        let row = &num[i * n..(i + 1) * n];
        let prow = &p[i * n..(i + 1) * n];
        for j in 0..n {
            let w = (scale * prow[j] - row[j] / total) * row[j];
            gx += w * (yi0 - y[[j, 0]]);
            gy += w * (yi1 - y[[j, 1]]);
        }
        grad[[i, 0]] = 4.0 * gx;
        grad[[i, 1]] = 4.0 * gy;
    }
    grad
}

/// Exact t-SNE with momentum, per-coordinate gains and early exaggeration.
pub fn tsne(rows: &Array2<f64>, config: &EmbedConfig) -> Result<Embedding2D> {
    let n = rows.nrows();
    config.validate(n)?;
    if rows.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("t-SNE input has non-finite entries".into()));
    }
    let x = jitter_duplicates(rows, config.seed);
    let p = joint_probabilities(&x, config.perplexity)?;

    let mut rng = substream(config.seed, &[0]);
    let init = Normal::new(0.0, 1e-4).expect("valid normal");
    let mut y = Array2::from_shape_fn((n, 2), |_| init.sample(&mut rng));
    let learning_rate = config.learning_rate.unwrap_or((n as f64 / config.exaggeration / 4.0).max(50.0));
    let mut update = Array2::<f64>::zeros((n, 2));
    let mut gains = Array2::<f64>::ones((n, 2));
    let mut trace = Vec::new();

    for it in 0..config.iterations {
        let scale = if it < config.exaggeration_iters {
            config.exaggeration
        } else {
            1.0
        };
        let momentum = if it < config.momentum_switch {
            config.initial_momentum
        } else {
            config.final_momentum
        };
        let grad = kl_gradient(&p, &y, scale);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Numerical(format!(
                "t-SNE gradient is not finite at iteration {it}"
            )));
        }
        for ((g, u), gain) in grad.iter().zip(update.iter_mut()).zip(gains.iter_mut()) {
            *gain = if (*g > 0.0) != (*u > 0.0) {
                *gain + 0.2
            } else {
                *gain * 0.8
            };
            *gain = gain.max(0.01);
            *u = momentum * *u - learning_rate * *gain * g;
        }
        y += &update;
        let mean = y.mean_axis(Axis(0)).expect("non-empty");
        y -= &mean;
        if (it + 1) % KL_EVERY == 0 {
            trace.push((it + 1, kl_divergence(&p, &y)));
        }
    }
    let kl = kl_divergence(&p, &y);
    Ok(Embedding2D {
        coords: y,
        kl,
        kl_trace: trace,
    })
}

/// Writes `code,x,y` to `csv_path` and a labelled scatter plot to
/// `svg_path`.
pub fn export_embedding(
    embedding: &Embedding2D,
    labels: &[String],
    csv_path: &Path,
    svg_path: &Path,
) -> Result<()> {
    let y = &embedding.coords;
    if labels.len() != y.nrows() {
        return Err(Error::Dimension(format!(
            "{} labels for {} points",
            labels.len(),
            y.nrows()
        )));
    }
    write_rows(csv_path, ["code", "x", "y"], |w| {
        for (l, r) in labels.iter().zip(y.rows()) {
            w.write_record([l.clone(), r[0].to_string(), r[1].to_string()])?;
        }
        Ok(())
    })?;

    let (w, h, pad) = (800.0, 800.0, 40.0);
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for r in y.rows() {
        x0 = x0.min(r[0]);
        x1 = x1.max(r[0]);
        y0 = y0.min(r[1]);
        y1 = y1.max(r[1]);
    }
    let span = (x1 - x0).max(y1 - y0).max(1e-12);
    let px = |v: f64| pad + (w - 2.0 * pad) * (v - x0) / span;
    let py = |v: f64| h - pad - (h - 2.0 * pad) * (v - y0) / span;
    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="9">"#
    );
    let _ = writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    for (l, r) in labels.iter().zip(y.rows()) {
        let (cx, cy) = (px(r[0]), py(r[1]));
        let _ = writeln!(
            svg,
            r##"<circle cx="{cx:.2}" cy="{cy:.2}" r="3" fill="#1f77b4"/><text x="{:.2}" y="{:.2}">{}</text>"##,
            cx + 4.0,
            cy - 3.0,
            crate::stats::svg_escape(l)
        );
    }
    svg.push_str("</svg>\n");
    std::fs::write(svg_path, svg).map_err(|e| Error::io(svg_path, e))
}
