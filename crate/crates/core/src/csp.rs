//! Common spatial patterns with a shrinkage LDA classifier.
//!
//! Trials are band-passed with a zero-phase FIR filter, reduced to
//! trace-normalised spatial covariances, and projected onto the extreme
//! generalized eigenvectors of each class against the rest. Log-variance
//! features of the projections feed a shared-covariance LDA.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::data::TrialDataset;
use crate::par::*;
use crate::pipeline::{replay_order, PseudoOnlineTrace};
use crate::{Error, Result};

/// Length of the band-pass filter.
pub const FIR_TAPS: usize = 101;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CspConfig {
    pub band: [f64; 2],
    /// Filters per class-vs-rest problem (half from each end of the
    /// spectrum).
    pub n_filters: usize,
    pub shrinkage: f64,
}

impl Default for CspConfig {
    fn default() -> Self {
        CspConfig {
            band: [8.0, 30.0],
            n_filters: 6,
            shrinkage: 0.1,
        }
    }
}

/// Windowed-sinc band-pass taps: the difference of two ideal low-pass
/// kernels at `lo` and `hi`, Hamming-windowed, centred on tap `n/2`.
pub fn bandpass_taps(lo: f64, hi: f64, sample_rate: f64, n: usize) -> Result<Vec<f64>> {
    let nyquist = sample_rate / 2.0;
    if !(lo > 0.0 && lo < hi && hi < nyquist) || n.is_multiple_of(2) {
        return Err(Error::Input(format!(
            "band [{lo}, {hi}] Hz with {n} taps is not a valid band-pass below {nyquist} Hz"
        )));
    }
    let (f1, f2) = (lo / sample_rate, hi / sample_rate);
    let mid = (n / 2) as f64;
    let sinc = |x: f64| {
        if x == 0.0 {
            1.0
        } else {
            (PI * x).sin() / (PI * x)
        }
    };
    Ok((0..n)
        .map(|i| {
            let m = i as f64 - mid;
            let ideal = 2.0 * f2 * sinc(2.0 * f2 * m) - 2.0 * f1 * sinc(2.0 * f1 * m);
            let window = 0.54 - 0.46 * (2.0 * PI * i as f64 / (n - 1) as f64).cos();
            ideal * window
        })
        .collect())
}

/// Centred convolution with zero padding; output length equals input.
fn filter_same(x: &[f64], h: &[f64]) -> Vec<f64> {
    let half = h.len() / 2;
    (0..x.len())
        .map(|i| {
            let mut acc = 0.0;
            for (j, &hj) in h.iter().enumerate() {
                // y[i] = Σ h[j] x[i + half − j]
                let k = i as isize + half as isize - j as isize;
                if k >= 0 && (k as usize) < x.len() {
                    acc += hj * x[k as usize];
                }
            }
            acc
        })
        .collect()
}

/// Forward-backward (zero-phase) filtering.
pub fn filtfilt(x: &[f64], h: &[f64]) -> Vec<f64> {
    let mut y = filter_same(x, h);
    y.reverse();
    let mut z = filter_same(&y, h);
    z.reverse();
    z
}

fn trial_matrix(d: &TrialDataset, i: usize, taps: &[f64]) -> DMatrix<f64> {
    let (c, t) = (d.n_channels(), d.n_times());
    let raw = d.trial(i);
    let mut m = DMatrix::zeros(c, t);
    for ch in 0..c {
        let y = filtfilt(&raw[ch * t..(ch + 1) * t], taps);
        for (j, v) in y.into_iter().enumerate() {
            m[(ch, j)] = v;
        }
    }
    m
}

/// `X Xᵀ / tr(X Xᵀ)`.
fn normalized_cov(x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let cov = x * x.transpose();
    let tr = cov.trace();
    if !(tr > 0.0) {
        return Err(Error::Input(
            "trial has zero variance after filtering".into(),
        ));
    }
    Ok(cov / tr)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CspComponent {
    /// `C × m`, columns ordered by decreasing eigenvalue.
    pub filters: DMatrix<f64>,
    pub eigenvalues: Vec<f64>,
}

/// Solve `Σ₁ w = λ (Σ₁ + Σ₂) w` and keep the `m/2` largest and `m/2`
/// smallest eigenpairs. Columns satisfy `Wᵀ (Σ₁ + Σ₂) W = I`.
pub fn csp_pair(s1: &DMatrix<f64>, s2: &DMatrix<f64>, m: usize) -> Result<CspComponent> {
    let c = s1.nrows();
    if s1.shape() != (c, c) || s2.shape() != (c, c) {
        return Err(Error::dim(format!(
            "class covariances {:?} and {:?} must be square and equal",
            s1.shape(),
            s2.shape()
        )));
    }
    if m == 0 || m > c {
        return Err(Error::Input(format!(
            "{m} filters requested for {c} channels"
        )));
    }
    let mut composite = s1 + s2;
    let tr = composite.trace();
    let eig = SymmetricEigen::new(composite.clone());
    let min = eig.eigenvalues.min();
    let eig = if min <= 1e-12 * tr.abs().max(f64::MIN_POSITIVE) {
        log::warn!(
            "composite covariance is singular (min eigenvalue {min:e}); adding 1e-8·trace·I"
        );
        for i in 0..c {
            composite[(i, i)] += 1e-8 * tr;
        }
        SymmetricEigen::new(composite)
    } else {
        eig
    };
    // P = Λ^{-1/2} Uᵀ whitens the composite covariance
    let inv_sqrt = eig.eigenvalues.map(|l| l.sqrt().recip());
    let p = DMatrix::from_diagonal(&inv_sqrt) * eig.eigenvectors.transpose();
    let mut s = &p * s1 * p.transpose();
    s = (&s + s.transpose()) * 0.5;
    let inner = SymmetricEigen::new(s);
    let mut order: Vec<usize> = (0..c).collect();
    order.sort_by(|&a, &b| inner.eigenvalues[b].total_cmp(&inner.eigenvalues[a]));
    let top = m.div_ceil(2);
    let keep: Vec<usize> = order[..top]
        .iter()
        .chain(&order[c - (m - top)..])
        .copied()
        .collect();
    let all = p.transpose() * &inner.eigenvectors;
    let mut filters = DMatrix::zeros(c, m);
    for (j, &k) in keep.iter().enumerate() {
        filters.set_column(j, &all.column(k));
    }
    Ok(CspComponent {
        filters,
        eigenvalues: keep.iter().map(|&k| inner.eigenvalues[k]).collect(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CspModel {
    pub band: [f64; 2],
    pub sample_rate: f64,
    pub taps: Vec<f64>,
    /// One component for two classes, else one per class (class vs rest).
    pub components: Vec<CspComponent>,
}

impl CspModel {
    pub fn n_features(&self) -> usize {
        self.components.iter().map(|c| c.filters.ncols()).sum()
    }
}

/// Fit CSP filters on every trial of `data`.
pub fn csp_fit(data: &TrialDataset, band: [f64; 2], m: usize) -> Result<CspModel> {
    data.check_all_classes_present()?;
    let taps = bandpass_taps(band[0], band[1], data.sample_rate as f64, FIR_TAPS)?;
    let c = data.n_channels();
    let covs: Vec<DMatrix<f64>> = (0..data.len())
        .into_par_iter()
        .map(|i| normalized_cov(&trial_matrix(data, i, &taps)))
        .collect::<Result<_>>()?;
    let k = data.n_classes;
    let mut class_cov = vec![DMatrix::<f64>::zeros(c, c); k];
    let counts = data.class_counts();
    for (cov, &l) in covs.iter().zip(&data.labels) {
        class_cov[l as usize] += cov;
    }
    for (s, &n) in class_cov.iter_mut().zip(&counts) {
        *s /= n as f64;
    }
    let components = if k == 2 {
        vec![csp_pair(&class_cov[0], &class_cov[1], m)?]
    } else {
        (0..k)
            .map(|a| {
                let mut rest = DMatrix::zeros(c, c);
                for (_, s) in class_cov.iter().enumerate().filter(|(b, _)| *b != a) {
                    rest += s;
                }
                rest /= (k - 1) as f64;
                csp_pair(&class_cov[a], &rest, m)
            })
            .collect::<Result<_>>()?
    };
    Ok(CspModel {
        band,
        sample_rate: data.sample_rate as f64,
        taps,
        components,
    })
}

/// Log of each projection's variance over the component's total.
pub fn features_from_filtered(model: &CspModel, x: &DMatrix<f64>) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(model.n_features());
    for comp in &model.components {
        let z = comp.filters.transpose() * x;
        let vars: Vec<f64> = z
            .row_iter()
            .map(|r| {
                let mean = r.mean();
                r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / r.len() as f64
            })
            .collect();
        let total: f64 = vars.iter().sum();
        if !(total > 0.0) || vars.iter().any(|&v| v <= 0.0) {
            return Err(Error::Input(
                "zero-variance projection in CSP features".into(),
            ));
        }
        out.extend(vars.iter().map(|v| (v / total).ln()));
    }
    Ok(out)
}

/// Band-pass trial `i` of `data` and compute its features.
pub fn csp_features(model: &CspModel, data: &TrialDataset, i: usize) -> Result<Vec<f64>> {
    features_from_filtered(model, &trial_matrix(data, i, &model.taps))
}

pub fn csp_feature_matrix(model: &CspModel, data: &TrialDataset) -> Result<Vec<Vec<f64>>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| csp_features(model, data, i))
        .collect()
}

/// Gaussian classifier with one shrunk covariance shared by all classes.
#[derive(Debug, Clone, PartialEq)]
pub struct LdaModel {
    /// `K × d` discriminant weights `Σ⁻¹ μ_k`.
    pub weights: DMatrix<f64>,
    /// `−½ μ_kᵀ Σ⁻¹ μ_k + ln π_k`.
    pub bias: Vec<f64>,
    pub shrinkage: f64,
}

pub fn lda_fit(
    features: &[Vec<f64>],
    labels: &[u32],
    n_classes: usize,
    shrinkage: f64,
) -> Result<LdaModel> {
    if features.len() != labels.len() || features.is_empty() {
        return Err(Error::Input(format!(
            "{} feature rows for {} labels",
            features.len(),
            labels.len()
        )));
    }
    if !(0.0..=1.0).contains(&shrinkage) {
        return Err(Error::Input(format!("shrinkage {shrinkage} not in [0, 1]")));
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|f| f.len() != d) {
        return Err(Error::dim(
            "feature rows must share a non-zero length".to_string(),
        ));
    }
    let mut counts = vec![0usize; n_classes];
    let mut means = vec![DVector::<f64>::zeros(d); n_classes];
    for (f, &l) in features.iter().zip(labels) {
        let l = l as usize;
        if l >= n_classes {
            return Err(Error::Input(format!("label {l} out of range")));
        }
        counts[l] += 1;
        means[l] += DVector::from_column_slice(f);
    }
    let present = counts.iter().filter(|&&n| n > 0).count();
    if present < 2 {
        return Err(Error::Input(
            "LDA needs at least two classes in the training data".into(),
        ));
    }
    if let Some(k) = counts.iter().position(|&n| n == 1) {
        return Err(Error::Input(format!(
            "class {k} has a single training sample"
        )));
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        if n > 0 {
            *m /= n as f64;
        }
    }
    let mut cov = DMatrix::<f64>::zeros(d, d);
    for (f, &l) in features.iter().zip(labels) {
        let r = DVector::from_column_slice(f) - &means[l as usize];
        cov += &r * r.transpose();
    }
    cov /= (features.len() - present).max(1) as f64;
    let mu = cov.trace() / d as f64;
    let mut shrunk = cov * (1.0 - shrinkage);
    for i in 0..d {
        shrunk[(i, i)] += shrinkage * mu;
    }
    let chol = shrunk.cholesky().ok_or_else(|| {
        Error::Numerical("LDA covariance is not positive definite; raise the shrinkage".into())
    })?;
    let n = features.len() as f64;
    let mut weights = DMatrix::zeros(n_classes, d);
    let mut bias = vec![f64::NEG_INFINITY; n_classes];
    for k in 0..n_classes {
        if counts[k] == 0 {
            continue;
        }
        let w = chol.solve(&means[k]);
        bias[k] = -0.5 * means[k].dot(&w) + (counts[k] as f64 / n).ln();
        weights.set_row(k, &w.transpose());
    }
    Ok(LdaModel {
        weights,
        bias,
        shrinkage,
    })
}

pub fn lda_scores(model: &LdaModel, feature: &[f64]) -> Vec<f64> {
    let x = DVector::from_column_slice(feature);
    (model.weights.clone() * x)
        .iter()
        .zip(&model.bias)
        .map(|(s, b)| s + b)
        .collect()
}

/// Highest discriminant, ties to the lower class index.
pub fn lda_predict(model: &LdaModel, feature: &[f64]) -> u32 {
    crate::train::argmax(&lda_scores(model, feature))
}

#[derive(Debug, Clone, PartialEq)]
pub struct CspLda {
    pub csp: CspModel,
    pub lda: LdaModel,
}

impl CspLda {
    pub fn fit(train: &TrialDataset, cfg: &CspConfig) -> Result<Self> {
        let csp = csp_fit(train, cfg.band, cfg.n_filters)?;
        let feats = csp_feature_matrix(&csp, train)?;
        let lda = lda_fit(&feats, &train.labels, train.n_classes, cfg.shrinkage)?;
        Ok(CspLda { csp, lda })
    }

    pub fn predict(&self, data: &TrialDataset) -> Result<Vec<u32>> {
        Ok(csp_feature_matrix(&self.csp, data)?
            .iter()
            .map(|f| lda_predict(&self.lda, f))
            .collect())
    }

    /// Replay `test` in recording order (the model never adapts).
    pub fn pseudo_online(&self, test: &TrialDataset) -> Result<PseudoOnlineTrace> {
        let preds = self.predict(test)?;
        let order = replay_order(test);
        let idx: Vec<u32> = order.iter().map(|&i| test.recording_order[i]).collect();
        let p: Vec<u32> = order.iter().map(|&i| preds[i]).collect();
        let y: Vec<u32> = order.iter().map(|&i| test.labels[i]).collect();
        Ok(PseudoOnlineTrace::from_predictions(&idx, &p, &y))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn taps_are_symmetric_and_pass_the_band() {
        let h = bandpass_taps(8.0, 30.0, 250.0, FIR_TAPS).unwrap();
        for i in 0..FIR_TAPS {
            assert!((h[i] - h[FIR_TAPS - 1 - i]).abs() < 1e-15);
        }
        let gain = |f: f64| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in h.iter().enumerate() {
                let ph = 2.0 * PI * f / 250.0 * n as f64;
                re += v * ph.cos();
                im -= v * ph.sin();
            }
            (re * re + im * im).sqrt()
        };
        assert!((gain(19.0) - 1.0).abs() < 0.01);
        assert!(gain(2.0) < 0.01);
        assert!(gain(60.0) < 0.01);
    }

    #[test]
    fn identical_covariances_give_one_half() {
        let i = DMatrix::<f64>::identity(3, 3);
        let comp = csp_pair(&i, &i, 2).unwrap();
        for l in comp.eigenvalues {
            assert!((l - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn lda_rejects_one_class() {
        let f = vec![vec![1.0], vec![2.0]];
        assert!(lda_fit(&f, &[0, 0], 2, 0.1).is_err());
    }

    #[test]
    fn lda_full_shrinkage_is_nearest_mean() {
        let f = vec![
            vec![1.0, 0.0],
            vec![1.2, 0.1],
            vec![-1.0, 0.0],
            vec![-0.8, -0.1],
        ];
        let m = lda_fit(&f, &[0, 0, 1, 1], 2, 1.0).unwrap();
        assert_eq!(lda_predict(&m, &[0.3, 5.0]), 0);
        assert_eq!(lda_predict(&m, &[-0.3, -5.0]), 1);
    }
}
