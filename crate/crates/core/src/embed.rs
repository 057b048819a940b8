//! Penultimate-feature export, exact t-SNE and silhouette scoring.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::model::ExpandableModel;
use crate::par::*;
use crate::{Error, RandomStream, Result};

/// Row-major `n × d` matrix of per-trial features.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub data: Vec<f64>,
    pub n: usize,
    pub d: usize,
    pub labels: Vec<u32>,
    pub sessions: Vec<u32>,
    pub widths: [usize; 3],
}

impl FeatureMatrix {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }
}

/// Eval-mode flattened activations entering the classifier, one row per
/// trial.
pub fn extract_features(model: &ExpandableModel, data: &TrialDataset) -> Result<FeatureMatrix> {
    let spec = model.spec();
    if data.n_channels() != spec.n_eeg_channels || data.n_times() != spec.n_timepoints {
        return Err(Error::dim(format!(
            "model expects {}×{} trials, dataset has {}×{}",
            spec.n_eeg_channels,
            spec.n_timepoints,
            data.n_channels(),
            data.n_times()
        )));
    }
    let mut scratch = model.clone();
    let mut rng = RandomStream::new(0, 0);
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    let mut d = 0;
    for chunk in idx.chunks(64) {
        let (_, cache) =
            scratch.forward(&data.batch(chunk), crate::layers::Mode::Eval, &mut rng)?;
        d = cache.features.dim(1);
        rows.extend_from_slice(cache.features.data());
    }
    Ok(FeatureMatrix {
        data: rows,
        n: data.len(),
        d,
        labels: data.labels.clone(),
        sessions: data.session_ids.clone(),
        widths: model.widths(),
    })
}

/// Projection onto the top `k` principal components, found one at a time
/// by power iteration on the centred data with deflation. Returns the
/// input unchanged when `d ≤ k`.
pub fn pca_reduce(x: &FeatureMatrix, k: usize, rng: &mut RandomStream) -> FeatureMatrix {
    if x.d <= k {
        return x.clone();
    }
    let (n, d) = (x.n, x.d);
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut centred: Vec<f64> = (0..n * d).map(|j| x.data[j] - mean[j % d]).collect();
    let k = k.min(n);
    let mut out = vec![0.0; n * k];
    for c in 0..k {
        let mut v: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
        normalize(&mut v);
        let mut lambda = 0.0;
        for _ in 0..500 {
            // w = Xᵀ (X v)
            let xv: Vec<f64> = (0..n)
                .map(|i| dot(&centred[i * d..(i + 1) * d], &v))
                .collect();
            let mut w = vec![0.0; d];
            for i in 0..n {
                for (wj, xj) in w.iter_mut().zip(&centred[i * d..(i + 1) * d]) {
                    *wj += xv[i] * xj;
                }
            }
            let norm = normalize(&mut w);
            let delta: f64 = w.iter().zip(&v).map(|(a, b)| (a - b).abs()).sum();
            v = w;
            let converged = (norm - lambda).abs() <= 1e-12 * norm.max(1e-300) || delta < 1e-12;
            lambda = norm;
            if converged {
                break;
            }
        }
        for i in 0..n {
            let row = &mut centred[i * d..(i + 1) * d];
            let s = dot(row, &v);
            out[i * k + c] = s;
            row.iter_mut().zip(&v).for_each(|(r, vj)| *r -= s * vj);
        }
    }
    FeatureMatrix {
        data: out,
        n,
        d: k,
        labels: x.labels.clone(),
        sessions: x.sessions.clone(),
        widths: x.widths,
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn normalize(v: &mut [f64]) -> f64 {
    let n = dot(v, v).sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
    n
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub exaggeration: f64,
    pub exaggeration_iters: usize,
    pub momentum_initial: f64,
    pub momentum_final: f64,
    pub momentum_switch: usize,
    /// Features wider than this are PCA-reduced first.
    pub pca_dims: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 30.0,
            iterations: 1000,
            learning_rate: 200.0,
            exaggeration: 12.0,
            exaggeration_iters: 250,
            momentum_initial: 0.5,
            momentum_final: 0.8,
            momentum_switch: 250,
            pca_dims: 50,
            seed: 0,
        }
    }
}

pub const PERPLEXITY_TOL: f64 = 1e-5;
pub const MAX_BISECTIONS: usize = 50;

/// Conditional neighbour distribution of one point from its squared
/// distances to all others (`self_index` is excluded). Returns the row and
/// its entropy in nats.
pub fn conditional_row(d2: &[f64], self_index: usize, perplexity: f64) -> (Vec<f64>, f64) {
    let target = perplexity.ln();
    let dmin = d2
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != self_index)
        .map(|(_, &v)| v)
        .fold(f64::INFINITY, f64::min);
    let eval = |beta: f64| {
        let mut p: Vec<f64> = d2
            .iter()
            .enumerate()
            .map(|(j, &v)| {
                if j == self_index {
                    0.0
                } else {
                    (-beta * (v - dmin)).exp()
                }
            })
            .collect();
        let sum: f64 = p.iter().sum();
        let mut h = 0.0;
        for (j, pj) in p.iter_mut().enumerate() {
            *pj /= sum;
            if j != self_index && *pj > 0.0 {
                h -= *pj * pj.ln();
            }
        }
        (p, h)
    };
    let (mut lo, mut hi) = (0.0, f64::INFINITY);
    let mut beta = 1.0;
    let (mut p, mut h) = eval(beta);
    for _ in 0..MAX_BISECTIONS {
        let diff = h - target;
        if diff.abs() < PERPLEXITY_TOL {
            break;
        }
        if diff > 0.0 {
            lo = beta;
            beta = if hi.is_finite() {
                (beta + hi) / 2.0
            } else {
                beta * 2.0
            };
        } else {
            hi = beta;
            beta = (beta + lo) / 2.0;
        }
        (p, h) = eval(beta);
    }
    (p, h)
}

pub fn squared_distances(x: &[f64], n: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * n];
    out.par_chunks_mut(n).enumerate().for_each(|(i, row)| {
        let xi = &x[i * d..(i + 1) * d];
        for (j, r) in row.iter_mut().enumerate() {
            *r = xi
                .iter()
                .zip(&x[j * d..(j + 1) * d])
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
        }
    });
    out
}

/// Symmetrised joint affinities `P = (P_{j|i} + P_{i|j}) / 2n`, row-major
/// `n × n`, plus the per-row entropies of the conditionals.
pub fn joint_p(x: &[f64], n: usize, d: usize, perplexity: f64) -> (Vec<f64>, Vec<f64>) {
    let d2 = squared_distances(x, n, d);
    let rows: Vec<(Vec<f64>, f64)> = (0..n)
        .into_par_iter()
        .map(|i| conditional_row(&d2[i * n..(i + 1) * n], i, perplexity))
        .collect();
    let mut p = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            p[i * n + j] = (rows[i].0[j] + rows[j].0[i]) / (2.0 * n as f64);
        }
    }
    (p, rows.into_iter().map(|r| r.1).collect())
}

/// Student-t joint similarities of a 2-D embedding (row-major `n × n`).
pub fn q_matrix(y: &[f64], n: usize) -> Vec<f64> {
    let mut num = squared_distances(y, n, 2);
    for (k, v) in num.iter_mut().enumerate() {
        *v = if k / n == k % n {
            0.0
        } else {
            1.0 / (1.0 + *v)
        };
    }
    let z: f64 = num.iter().sum();
    num.iter_mut().for_each(|v| *v /= z);
    num
}

/// `KL(P ‖ Q)` over the off-diagonal entries with `p > 0`.
pub fn kl_divergence(p: &[f64], y: &[f64], n: usize) -> f64 {
    let q = q_matrix(y, n);
    p.iter()
        .zip(&q)
        .filter(|(&pv, _)| pv > 0.0)
        .map(|(&pv, &qv)| pv * (pv / qv.max(f64::MIN_POSITIVE)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(1 + ‖y_i − y_j‖²)⁻¹ (y_i − y_j)`.
pub fn kl_gradient(p: &[f64], y: &[f64], n: usize) -> Vec<f64> {
    let d2 = squared_distances(y, n, 2);
    let mut z = 0.0;
    for (k, v) in d2.iter().enumerate() {
        if k / n != k % n {
            z += 1.0 / (1.0 + v);
        }
    }
    let mut grad = vec![0.0; 2 * n];
    grad.par_chunks_mut(2).enumerate().for_each(|(i, g)| {
        for j in 0..n {
            if j == i {
                continue;
            }
            let w = 1.0 / (1.0 + d2[i * n + j]);
            let coef = 4.0 * (p[i * n + j] - w / z) * w;
            g[0] += coef * (y[2 * i] - y[2 * j]);
            g[1] += coef * (y[2 * i + 1] - y[2 * j + 1]);
        }
    });
    grad
}

#[derive(Debug, Clone, PartialEq)]
pub struct TsneResult {
    /// Row-major `n × 2`.
    pub coords: Vec<f64>,
    pub perplexity: f64,
    /// KL divergence right after early exaggeration ends.
    pub kl_after_exaggeration: f64,
    pub final_kl: f64,
    /// Entropy (nats) of each conditional row.
    pub row_entropy: Vec<f64>,
}

/// Jitter exact duplicate rows so that every pair has a positive
/// distance.
fn jitter_duplicates(x: &mut [f64], n: usize, d: usize, rng: &mut RandomStream) {
    let d2 = squared_distances(x, n, d);
    let dup = (0..n).any(|i| (i + 1..n).any(|j| d2[i * n + j] == 0.0));
    if dup {
        log::warn!("t-SNE input has duplicate points; adding 1e-10 jitter");
        x.iter_mut().for_each(|v| *v += 1e-10 * rng.normal());
    }
}

pub fn tsne(features: &FeatureMatrix, cfg: &TsneConfig) -> Result<TsneResult> {
    let n = features.n;
    if n < 5 {
        return Err(Error::Input(format!(
            "t-SNE needs at least 5 points, got {n}"
        )));
    }
    if !(cfg.perplexity >= 2.0) {
        return Err(Error::Input(format!(
            "perplexity {} must be ≥ 2",
            cfg.perplexity
        )));
    }
    if features.data.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite value in t-SNE input".into()));
    }
    let mut rng = RandomStream::new(cfg.seed, 0);
    let reduced = pca_reduce(features, cfg.pca_dims, &mut rng);
    let mut x = reduced.data;
    let d = reduced.d;
    jitter_duplicates(&mut x, n, d, &mut rng);
    let perplexity = cfg.perplexity.min((n - 1) as f64 / 3.0);
    let (p, row_entropy) = joint_p(&x, n, d, perplexity);

    let mut y: Vec<f64> = (0..2 * n).map(|_| 1e-4 * rng.normal()).collect();
    let mut update = vec![0.0; 2 * n];
    let mut gains = vec![1.0f64; 2 * n];
    let exaggerated: Vec<f64> = p.iter().map(|v| v * cfg.exaggeration).collect();
    let mut kl_after_exaggeration = kl_divergence(&p, &y, n);
    for it in 0..cfg.iterations {
        if it == cfg.exaggeration_iters {
            kl_after_exaggeration = kl_divergence(&p, &y, n);
        }
        let pp = if it < cfg.exaggeration_iters {
            &exaggerated
        } else {
            &p
        };
        let momentum = if it < cfg.momentum_switch {
            cfg.momentum_initial
        } else {
            cfg.momentum_final
        };
        let grad = kl_gradient(pp, &y, n);
        for k in 0..2 * n {
            gains[k] = if (grad[k] > 0.0) != (update[k] > 0.0) {
                gains[k] + 0.2
            } else {
                (gains[k] * 0.8).max(0.01)
            };
            update[k] = momentum * update[k] - cfg.learning_rate * gains[k] * grad[k];
            y[k] += update[k];
        }
        for c in 0..2 {
            let m = (0..n).map(|i| y[2 * i + c]).sum::<f64>() / n as f64;
            (0..n).for_each(|i| y[2 * i + c] -= m);
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("t-SNE diverged".into()));
    }
    let final_kl = kl_divergence(&p, &y, n);
    Ok(TsneResult {
        coords: y,
        perplexity,
        kl_after_exaggeration,
        final_kl,
        row_entropy,
    })
}

/// Mean silhouette coefficient of `points` (row-major, `dim` columns)
/// under `labels`, with Euclidean distance. Points alone in their cluster
/// score 0.
pub fn cluster_quality(points: &[f64], dim: usize, labels: &[u32]) -> Result<f64> {
    let n = labels.len();
    if dim == 0 || points.len() != n * dim {
        return Err(Error::dim(format!(
            "{} coordinates for {n} points of dimension {dim}",
            points.len()
        )));
    }
    let classes: BTreeSet<u32> = labels.iter().copied().collect();
    if classes.len() < 2 {
        return Err(Error::Input(
            "silhouette needs at least two clusters".into(),
        ));
    }
    let classes: Vec<u32> = classes.into_iter().collect();
    let slot = |l: u32| classes.binary_search(&l).unwrap();
    let mut sizes = vec![0usize; classes.len()];
    for &l in labels {
        sizes[slot(l)] += 1;
    }
    let scores: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let own = slot(labels[i]);
            if sizes[own] == 1 {
                return 0.0;
            }
            let mut sums = vec![0.0; classes.len()];
            let xi = &points[i * dim..(i + 1) * dim];
            for j in 0..n {
                if j == i {
                    continue;
                }
                let dist = xi
                    .iter()
                    .zip(&points[j * dim..(j + 1) * dim])
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                sums[slot(labels[j])] += dist;
            }
            let a = sums[own] / (sizes[own] - 1) as f64;
            let b = (0..classes.len())
                .filter(|&c| c != own)
                .map(|c| sums[c] / sizes[c] as f64)
                .fold(f64::INFINITY, f64::min);
            let m = a.max(b);
            if m == 0.0 {
                0.0
            } else {
                (b - a) / m
            }
        })
        .collect();
    Ok(scores.iter().sum::<f64>() / n as f64)
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Scatter plot of 2-D coordinates coloured by label.
pub fn scatter_svg(coords: &[f64], labels: &[u32], title: &str) -> String {
    let (w, h, pad) = (480.0, 480.0, 30.0);
    let n = labels.len();
    let (mut x0, mut x1, mut y0, mut y1) = (
        f64::INFINITY,
        f64::NEG_INFINITY,
        f64::INFINITY,
        f64::NEG_INFINITY,
    );
    for i in 0..n {
        x0 = x0.min(coords[2 * i]);
        x1 = x1.max(coords[2 * i]);
        y0 = y0.min(coords[2 * i + 1]);
        y1 = y1.max(coords[2 * i + 1]);
    }
    let sx = (w - 2.0 * pad) / (x1 - x0).max(1e-12);
    let sy = (h - 2.0 * pad) / (y1 - y0).max(1e-12);
    let mut s = String::new();
    let _ = writeln!(
        s,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{w}\" height=\"{h}\" viewBox=\"0 0 {w} {h}\">"
    );
    let _ = writeln!(s, "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>");
    let _ = writeln!(
        s,
        "<text x=\"{pad}\" y=\"20\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        title.replace('&', "&amp;").replace('<', "&lt;")
    );
    for i in 0..n {
        let cx = pad + (coords[2 * i] - x0) * sx;
        let cy = h - pad - (coords[2 * i + 1] - y0) * sy;
        let _ = writeln!(
            s,
            "<circle cx=\"{cx:.2}\" cy=\"{cy:.2}\" r=\"3\" fill=\"{}\" fill-opacity=\"0.8\"/>",
            PALETTE[labels[i] as usize % PALETTE.len()]
        );
    }
    s.push_str("</svg>\n");
    s
}
