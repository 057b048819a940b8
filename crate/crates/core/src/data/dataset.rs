use crate::{Error, RandomStream, Result, Tensor};

/// Labelled trials `x ∈ R^{C×T}` with per-trial provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialDataset {
    /// `[N, C, T]`, trial-major then channel-major.
    pub trials: Tensor,
    pub labels: Vec<u32>,
    pub n_classes: usize,
    pub sample_rate: u32,
    pub subject_ids: Vec<u32>,
    pub session_ids: Vec<u32>,
    pub recording_order: Vec<u32>,
}

impl TrialDataset {
    pub fn new(
        trials: Tensor,
        labels: Vec<u32>,
        n_classes: usize,
        sample_rate: u32,
        subject_ids: Vec<u32>,
        session_ids: Vec<u32>,
        recording_order: Vec<u32>,
    ) -> Result<Self> {
        let d = TrialDataset {
            trials,
            labels,
            n_classes,
            sample_rate,
            subject_ids,
            session_ids,
            recording_order,
        };
        d.validate()?;
        Ok(d)
    }

    pub fn validate(&self) -> Result<()> {
        if self.trials.ndim() != 3 {
            return Err(Error::dim(format!(
                "trials must be N×C×T, got {:?}",
                self.trials.shape()
            )));
        }
        let n = self.len();
        for (name, len) in [
            ("labels", self.labels.len()),
            ("subject ids", self.subject_ids.len()),
            ("session ids", self.session_ids.len()),
            ("recording order", self.recording_order.len()),
        ] {
            if len != n {
                return Err(Error::Input(format!("{len} {name} for {n} trials")));
            }
        }
        if self.n_classes < 2 {
            return Err(Error::Input(format!(
                "need ≥ 2 classes, got {}",
                self.n_classes
            )));
        }
        if let Some(&l) = self.labels.iter().find(|&&l| l as usize >= self.n_classes) {
            return Err(Error::Input(format!(
                "label {l} out of range for {} classes",
                self.n_classes
            )));
        }
        if self.sample_rate == 0 {
            return Err(Error::Input("sample rate must be positive".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.trials.dim(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_channels(&self) -> usize {
        self.trials.dim(1)
    }

    pub fn n_times(&self) -> usize {
        self.trials.dim(2)
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let sz = self.n_channels() * self.n_times();
        &self.trials.data()[i * sz..(i + 1) * sz]
    }

    /// Stack the given trials into a `[len, C, T]` batch.
    pub fn batch(&self, indices: &[usize]) -> Tensor {
        let sz = self.n_channels() * self.n_times();
        let mut data = Vec::with_capacity(indices.len() * sz);
        for &i in indices {
            data.extend_from_slice(self.trial(i));
        }
        Tensor::new(vec![indices.len(), self.n_channels(), self.n_times()], data)
            .expect("batch of at least one trial")
    }

    /// A new dataset holding the given trials, in the given order.
    pub fn subset(&self, indices: &[usize]) -> Result<TrialDataset> {
        if indices.is_empty() {
            return Err(Error::Input("empty subset".into()));
        }
        let pick = |v: &[u32]| indices.iter().map(|&i| v[i]).collect::<Vec<_>>();
        TrialDataset::new(
            self.batch(indices),
            pick(&self.labels),
            self.n_classes,
            self.sample_rate,
            pick(&self.subject_ids),
            pick(&self.session_ids),
            pick(&self.recording_order),
        )
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.n_classes];
        for &l in &self.labels {
            counts[l as usize] += 1;
        }
        counts
    }

    /// Accuracy of always predicting the most frequent class.
    pub fn majority_fraction(&self) -> f64 {
        *self.class_counts().iter().max().unwrap() as f64 / self.len() as f64
    }

    pub fn check_all_classes_present(&self) -> Result<()> {
        match self.class_counts().iter().position(|&c| c == 0) {
            None => Ok(()),
            Some(k) => Err(Error::Input(format!("class {k} has no training trials"))),
        }
    }

    /// Indices sorted by recording order (stable for ties).
    pub fn recording_sequence(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by_key(|&i| (self.recording_order[i], self.subject_ids[i]));
        idx
    }

    /// Trials of the listed subjects, in the original order.
    pub fn filter_subjects(&self, keep: impl Fn(u32) -> bool) -> Result<TrialDataset> {
        let idx: Vec<usize> = (0..self.len())
            .filter(|&i| keep(self.subject_ids[i]))
            .collect();
        self.subset(&idx)
    }

    /// Seeded split stratified by class: `valid_fraction` of each class
    /// (rounded, at least one when the class has ≥ 2 trials) goes to the
    /// second set.
    pub fn stratified_split(
        &self,
        valid_fraction: f64,
        rng: &mut RandomStream,
    ) -> Result<(TrialDataset, TrialDataset)> {
        if !(0.0..1.0).contains(&valid_fraction) || valid_fraction == 0.0 {
            return Err(Error::Input(format!(
                "validation fraction {valid_fraction} not in (0, 1)"
            )));
        }
        let mut train = Vec::new();
        let mut valid = Vec::new();
        for k in 0..self.n_classes as u32 {
            let mut idx: Vec<usize> = (0..self.len()).filter(|&i| self.labels[i] == k).collect();
            rng.shuffle(&mut idx);
            let mut n_valid = (idx.len() as f64 * valid_fraction).round() as usize;
            if idx.len() >= 2 {
                n_valid = n_valid.clamp(1, idx.len() - 1);
            } else {
                n_valid = 0;
            }
            valid.extend_from_slice(&idx[..n_valid]);
            train.extend_from_slice(&idx[n_valid..]);
        }
        train.sort_unstable();
        valid.sort_unstable();
        Ok((self.subset(&train)?, self.subset(&valid)?))
    }
}
