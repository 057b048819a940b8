//! Parametric EEG-like trial generator.
//!
//! Each trial is 1/f background plus white noise on every channel, with a
//! band-limited source projected onto the active channels of the trial's
//! class. Sessions after the first drift: channel pairs `(i, i + C/2)` are
//! rotated, class bands move, and signal amplitude is rescaled.

use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::TrialDataset;
use crate::par::*;
use crate::rng::stream_key;
use crate::{Error, RandomStream, Result, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassSignature {
    /// Pass band `[lo, hi]` in Hz of the class source.
    pub band: [f64; 2],
    pub channels: Vec<usize>,
    /// Source power relative to the per-channel noise power, in dB.
    /// `-inf` removes the source.
    pub snr_db: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DriftSpec {
    /// Rotation (radians) applied per session step to each channel pair.
    pub rotation: f64,
    /// Shift (Hz) of every class band per session step.
    pub band_shift: f64,
    /// Signal amplitude factor per session step.
    pub amplitude_scale: f64,
}

impl Default for DriftSpec {
    fn default() -> Self {
        DriftSpec {
            rotation: 0.2,
            band_shift: 0.5,
            amplitude_scale: 0.9,
        }
    }
}

impl DriftSpec {
    pub fn none() -> Self {
        DriftSpec {
            rotation: 0.0,
            band_shift: 0.0,
            amplitude_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseSpec {
    /// Standard deviation of the 1/f component.
    pub pink_std: f64,
    pub white_std: f64,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        NoiseSpec {
            pink_std: 1.0,
            white_std: 0.5,
        }
    }
}

impl NoiseSpec {
    pub fn power(&self) -> f64 {
        self.pink_std * self.pink_std + self.white_std * self.white_std
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenSpec {
    pub seed: u64,
    pub n_subjects: usize,
    pub trials_per_class_per_subject: usize,
    pub n_channels: usize,
    pub n_times: usize,
    pub n_classes: usize,
    pub sample_rate: u32,
    /// One entry per class. Empty means [`GenSpec::default_classes`].
    pub classes: Vec<ClassSignature>,
    pub class_names: Vec<String>,
    pub drift: DriftSpec,
    pub noise: NoiseSpec,
    /// Relative spread of per-subject channel gains.
    pub subject_gain_spread: f64,
    /// SNR used by the default class signatures.
    pub snr_db: f64,
}

impl Default for GenSpec {
    fn default() -> Self {
        GenSpec {
            seed: 0,
            n_subjects: 5,
            trials_per_class_per_subject: 50,
            n_channels: 58,
            n_times: 1000,
            n_classes: 3,
            sample_rate: 250,
            classes: Vec::new(),
            class_names: vec!["cylindrical".into(), "spherical".into(), "lumbrical".into()],
            drift: DriftSpec::default(),
            noise: NoiseSpec::default(),
            subject_gain_spread: 0.2,
            snr_db: 5.0,
        }
    }
}

impl GenSpec {
    /// Classes tile 8–30 Hz with equal-width bands; class `k` drives a
    /// contiguous block of channels in the first half of the montage.
    pub fn default_classes(&self) -> Vec<ClassSignature> {
        let k = self.n_classes.max(1);
        let block = (self.n_channels / 2 / k).max(1);
        let width = 22.0 / k as f64;
        (0..k)
            .map(|c| {
                let start = (c * block) % self.n_channels;
                ClassSignature {
                    band: [8.0 + width * c as f64, 8.0 + width * (c + 1) as f64],
                    channels: (start..(start + block).min(self.n_channels)).collect(),
                    snr_db: self.snr_db,
                }
            })
            .collect()
    }

    pub fn resolved_classes(&self) -> Vec<ClassSignature> {
        if self.classes.is_empty() {
            self.default_classes()
        } else {
            self.classes.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let spec_err = |m: String| Err(Error::Spec(m));
        if self.n_subjects == 0 || self.trials_per_class_per_subject == 0 {
            return spec_err("need at least one subject and one trial per class".into());
        }
        if self.n_channels == 0 || self.n_times < 2 {
            return spec_err(format!(
                "trial shape {}×{} is too small",
                self.n_channels, self.n_times
            ));
        }
        if self.n_classes < 2 {
            return spec_err(format!("need ≥ 2 classes, got {}", self.n_classes));
        }
        if self.sample_rate == 0 {
            return spec_err("sample rate must be positive".into());
        }
        let classes = self.resolved_classes();
        if classes.len() != self.n_classes {
            return spec_err(format!(
                "{} class signatures for {} classes",
                classes.len(),
                self.n_classes
            ));
        }
        let nyquist = self.sample_rate as f64 / 2.0;
        for (k, c) in classes.iter().enumerate() {
            let [lo, hi] = c.band;
            if !(lo > 0.0 && lo < hi && hi < nyquist) {
                return spec_err(format!(
                    "class {k} band [{lo}, {hi}] Hz must satisfy 0 < lo < hi < {nyquist}"
                ));
            }
            if c.snr_db.is_nan() || c.snr_db == f64::INFINITY {
                return spec_err(format!("class {k} SNR {} dB is not usable", c.snr_db));
            }
            if c.channels.is_empty() || c.channels.iter().any(|&ch| ch >= self.n_channels) {
                return spec_err(format!(
                    "class {k} active channels {:?} must be non-empty and < {}",
                    c.channels, self.n_channels
                ));
            }
        }
        let d = &self.drift;
        if !d.rotation.is_finite() || !d.band_shift.is_finite() || !(d.amplitude_scale >= 0.0) {
            return spec_err("drift parameters must be finite, amplitude scale ≥ 0".into());
        }
        if !(self.noise.pink_std >= 0.0 && self.noise.white_std >= 0.0) || self.noise.power() == 0.0
        {
            return spec_err("noise standard deviations must be ≥ 0 and not both zero".into());
        }
        if !(self.subject_gain_spread >= 0.0) {
            return spec_err("subject gain spread must be ≥ 0".into());
        }
        Ok(())
    }

    /// Bands of every class in `session` (1-based), after drift; checked
    /// against the Nyquist limit.
    pub fn session_bands(&self, session: u32) -> Result<Vec<[f64; 2]>> {
        let step = session.saturating_sub(1) as f64;
        let nyquist = self.sample_rate as f64 / 2.0;
        self.resolved_classes()
            .iter()
            .enumerate()
            .map(|(k, c)| {
                let band = [
                    c.band[0] + step * self.drift.band_shift,
                    c.band[1] + step * self.drift.band_shift,
                ];
                if band[0] <= 0.0 || band[1] >= nyquist {
                    return Err(Error::Spec(format!(
                        "class {k} band drifts to [{}, {}] Hz in session {session}",
                        band[0], band[1]
                    )));
                }
                Ok(band)
            })
            .collect()
    }
}

/// Spectral shaping shared by all trials of one generation run.
struct Shaper {
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    n: usize,
    sample_rate: f64,
}

impl Shaper {
    fn new(n: usize, sample_rate: f64) -> Self {
        let mut planner = FftPlanner::new();
        Shaper {
            fwd: planner.plan_fft_forward(n),
            inv: planner.plan_fft_inverse(n),
            n,
            sample_rate,
        }
    }

    fn freq(&self, bin: usize) -> f64 {
        let b = bin.min(self.n - bin);
        b as f64 * self.sample_rate / self.n as f64
    }

    /// White noise filtered by `gain(f)`, rescaled to unit sample variance
    /// (zero stays zero).
    fn shaped(&self, rng: &mut RandomStream, gain: impl Fn(f64) -> f64) -> Vec<f64> {
        let mut buf: Vec<Complex<f64>> = (0..self.n)
            .map(|_| Complex::new(rng.normal(), 0.0))
            .collect();
        self.fwd.process(&mut buf);
        for (bin, v) in buf.iter_mut().enumerate() {
            *v *= gain(self.freq(bin));
        }
        self.inv.process(&mut buf);
        let mut out: Vec<f64> = buf.iter().map(|c| c.re).collect();
        let mean = out.iter().sum::<f64>() / self.n as f64;
        let var = out.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / self.n as f64;
        if var > 0.0 {
            let s = var.sqrt().recip();
            out.iter_mut().for_each(|v| *v = (*v - mean) * s);
        }
        out
    }

    fn pink(&self, rng: &mut RandomStream) -> Vec<f64> {
        self.shaped(rng, |f| if f > 0.0 { f.sqrt().recip() } else { 0.0 })
    }

    fn band(&self, rng: &mut RandomStream, [lo, hi]: [f64; 2]) -> Vec<f64> {
        self.shaped(rng, |f| if f >= lo && f <= hi { 1.0 } else { 0.0 })
    }
}

/// Spatial weights of a class source over its active channels.
fn source_pattern(n: usize) -> Vec<f64> {
    (0..n).map(|j| 1.0 / (1.0 + 0.5 * j as f64)).collect()
}

/// Rotate channel pairs `(i, i + C/2)` by `angle` in place.
fn rotate_pairs(trial: &mut [f64], c: usize, t: usize, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (s, co) = angle.sin_cos();
    let half = c / 2;
    for i in 0..half {
        let (a, b) = trial.split_at_mut((i + half) * t);
        let x = &mut a[i * t..(i + 1) * t];
        let y = &mut b[..t];
        for (xv, yv) in x.iter_mut().zip(y.iter_mut()) {
            let (u, v) = (*xv, *yv);
            *xv = co * u - s * v;
            *yv = s * u + co * v;
        }
    }
}

const SUBJECT_TAG: u64 = 0x5eb;
const ORDER_TAG: u64 = 0x0d3;

/// Generate one session (1-based) of every subject.
///
/// Trials are stored subject by subject in recording order, which is a
/// seeded interleaving of the classes. The output is a pure function of
/// `(spec, session)`; values are rounded to `f32` as on disk.
pub fn generate(spec: &GenSpec, session: u32) -> Result<TrialDataset> {
    spec.validate()?;
    if session == 0 {
        return Err(Error::Spec("sessions are numbered from 1".into()));
    }
    let bands = spec.session_bands(session)?;
    let classes = spec.resolved_classes();
    let (c, t, k) = (spec.n_channels, spec.n_times, spec.n_classes);
    let step = (session - 1) as f64;
    let angle = step * spec.drift.rotation;
    let amp_drift = spec.drift.amplitude_scale.powf(step);
    let noise_power = spec.noise.power();

    let root = RandomStream::new(spec.seed, 0);
    // (subject, class) of every trial in storage order
    let mut plan = Vec::with_capacity(spec.n_subjects * k * spec.trials_per_class_per_subject);
    let mut gains = Vec::with_capacity(spec.n_subjects);
    for subj in 0..spec.n_subjects as u64 {
        let mut g = root.derive(stream_key([SUBJECT_TAG, subj, 0, 0]));
        gains.push(
            (0..c)
                .map(|_| (1.0 + spec.subject_gain_spread * g.normal()).max(0.0))
                .collect::<Vec<f64>>(),
        );
        let mut labels: Vec<u32> = (0..k as u32)
            .flat_map(|l| std::iter::repeat_n(l, spec.trials_per_class_per_subject))
            .collect();
        root.derive(stream_key([ORDER_TAG, subj, session as u64, 0]))
            .shuffle(&mut labels);
        plan.extend(labels.into_iter().map(|l| (subj as u32, l)));
    }

    let shaper = Shaper::new(t, spec.sample_rate as f64);
    let trials: Vec<Vec<f64>> = (0..plan.len())
        .into_par_iter()
        .map(|i| {
            let (subj, label) = plan[i];
            let mut rng = root.derive(stream_key([session as u64, subj as u64, i as u64, 1]));
            let mut x = vec![0.0; c * t];
            for ch in 0..c {
                let pink = shaper.pink(&mut rng);
                let row = &mut x[ch * t..(ch + 1) * t];
                for (v, p) in row.iter_mut().zip(&pink) {
                    *v = spec.noise.pink_std * p + spec.noise.white_std * rng.normal();
                }
            }
            let sig = &classes[label as usize];
            let amp = amp_drift * (noise_power * 10f64.powf(sig.snr_db / 10.0)).sqrt();
            if amp > 0.0 {
                let source = shaper.band(&mut rng, bands[label as usize]);
                for (&ch, w) in sig.channels.iter().zip(source_pattern(sig.channels.len())) {
                    let a = amp * w * gains[subj as usize][ch];
                    for (v, s) in x[ch * t..(ch + 1) * t].iter_mut().zip(&source) {
                        *v += a * s;
                    }
                }
            }
            rotate_pairs(&mut x, c, t, angle);
            x.iter_mut().for_each(|v| *v = *v as f32 as f64);
            x
        })
        .collect();

    let n = plan.len();
    let data: Vec<f64> = trials.into_iter().flatten().collect();
    TrialDataset::new(
        Tensor::new(vec![n, c, t], data)?,
        plan.iter().map(|&(_, l)| l).collect(),
        k,
        spec.sample_rate,
        plan.iter().map(|&(s, _)| s).collect(),
        vec![session; n],
        (0..n as u32).collect(),
    )
}

/// Mean periodogram power of `x` between `lo` and `hi` Hz (inclusive).
pub fn band_power(x: &[f64], sample_rate: f64, [lo, hi]: [f64; 2]) -> f64 {
    let n = x.len();
    let mut power = 0.0;
    let mut bins = 0;
    for bin in 1..=n / 2 {
        let f = bin as f64 * sample_rate / n as f64;
        if f < lo || f > hi {
            continue;
        }
        let (mut re, mut im) = (0.0, 0.0);
        for (j, v) in x.iter().enumerate() {
            let ph = -2.0 * PI * (bin * j) as f64 / n as f64;
            re += v * ph.cos();
            im += v * ph.sin();
        }
        power += (re * re + im * im) / n as f64;
        bins += 1;
    }
    if bins == 0 {
        0.0
    } else {
        power / bins as f64
    }
}
