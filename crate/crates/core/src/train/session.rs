//! One session of training.
//!
//! A sparse stage minimises the L1-regularised objective with fixed widths.
//! A continual stage minimises the group-sparse objective, watches the
//! epoch-mean training cross-entropy, and widens the expandable layers when
//! it stays above the threshold. The best-validation weights are kept and
//! pruned of added groups whose norm fell below `prune_epsilon`.

use serde::{Deserialize, Serialize};

use super::loss::{
    add_penalty_grad, cross_entropy, cross_entropy_logit_grad, one_hot, penalty, Objective,
};
use super::{optimizer_step, should_expand, LossConfig, OptimState, TriggerConfig};
use crate::data::TrialDataset;
use crate::layers::Mode;
use crate::model::{Checkpoint, ExpandInit, ExpandableModel, GroupStatus};
use crate::{Error, RandomStream, Result, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Sparse,
    Continual,
}

/// Storage precision of parameters between optimizer steps.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Precision {
    F32,
    F64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExpansionConfig {
    /// Channels added per event, as a fraction of the current width
    /// (rounded up).
    pub fraction: f64,
    /// Which convolutions (1-based) widen on a trigger.
    pub layers: Vec<usize>,
    pub init: ExpandInit,
}

impl Default for ExpansionConfig {
    fn default() -> Self {
        ExpansionConfig {
            fraction: 0.25,
            layers: vec![1, 2, 3],
            init: ExpandInit::SmallRandom,
        }
    }
}

impl ExpansionConfig {
    pub fn added_channels(&self, width: usize) -> usize {
        (self.fraction * width as f64).ceil() as usize
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub sparse_epochs: usize,
    pub continual_epochs: usize,
    pub loss: LossConfig,
    pub trigger: TriggerConfig,
    pub expansion: ExpansionConfig,
    pub prune_epsilon: f64,
    pub valid_fraction: f64,
    /// Only update weights of added groups during the continual stage.
    pub freeze_old: bool,
    pub precision: Precision,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            sparse_epochs: 100,
            continual_epochs: 100,
            loss: LossConfig::default(),
            trigger: TriggerConfig::default(),
            expansion: ExpansionConfig::default(),
            prune_epsilon: 1e-2,
            valid_fraction: 0.2,
            freeze_old: false,
            precision: Precision::F32,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.loss.validate()?;
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::Input(format!(
                "learning rate {} must be positive",
                self.lr
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Input("batch size must be ≥ 1".into()));
        }
        if self.trigger.patience == 0 {
            return Err(Error::Input("trigger patience must be ≥ 1".into()));
        }
        if let Some(t) = self.trigger.tau {
            if t.is_nan() {
                return Err(Error::Input("tau is NaN".into()));
            }
        }
        if self.expansion.layers.iter().any(|l| !(1..=3).contains(l)) {
            return Err(Error::Input(format!(
                "expansion layers {:?} must be within 1..=3",
                self.expansion.layers
            )));
        }
        if !(self.expansion.fraction >= 0.0) {
            return Err(Error::Input("expansion fraction must be ≥ 0".into()));
        }
        if !(self.prune_epsilon >= 0.0) {
            return Err(Error::Input("prune epsilon must be ≥ 0".into()));
        }
        Ok(())
    }

    fn epochs(&self, stage: Stage) -> usize {
        match stage {
            Stage::Sparse => self.sparse_epochs,
            Stage::Continual => self.continual_epochs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpansionEvent {
    /// Epoch (1-based, counted within the session) after which the network
    /// was widened.
    pub epoch: usize,
    pub widths_before: [usize; 3],
    pub widths_after: [usize; 3],
    /// Eval-mode full-batch training cross-entropy just before widening.
    pub loss_before: f64,
    /// The same quantity just after widening, before any optimizer step.
    pub loss_after: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionReport {
    pub session: u32,
    pub stages: Vec<Stage>,
    /// Epoch-mean training cross-entropy.
    pub loss_curve: Vec<f64>,
    /// Epoch-mean training objective (cross-entropy plus penalty).
    pub objective_curve: Vec<f64>,
    pub val_acc_curve: Vec<f64>,
    pub expansion_events: Vec<ExpansionEvent>,
    pub pruned_groups: Vec<u32>,
    pub widths_initial: [usize; 3],
    pub widths_final: [usize; 3],
    /// Epoch of the kept weights; 0 means the weights the stage started from.
    pub best_epoch: usize,
    pub best_val_acc: f64,
    /// Number of leading epochs that belong to the sparse stage.
    pub sparse_epochs: usize,
    pub tau: f64,
    pub test_accuracy: Option<f64>,
    pub config_echo: TrainConfig,
    pub seed: u64,
}

impl SessionReport {
    /// Append a later stage of the same session.
    pub fn append(&mut self, later: SessionReport) {
        let offset = self.loss_curve.len();
        self.stages.extend(later.stages);
        self.loss_curve.extend(later.loss_curve);
        self.objective_curve.extend(later.objective_curve);
        self.val_acc_curve.extend(later.val_acc_curve);
        self.expansion_events
            .extend(later.expansion_events.into_iter().map(|mut e| {
                e.epoch += offset;
                e
            }));
        self.pruned_groups.extend(later.pruned_groups);
        self.widths_final = later.widths_final;
        self.best_epoch = if later.best_epoch == 0 {
            self.best_epoch
        } else {
            later.best_epoch + offset
        };
        self.best_val_acc = later.best_val_acc;
        self.tau = later.tau;
    }

    pub fn expansion_count(&self) -> usize {
        self.expansion_events.len()
    }
}

const EVAL_CHUNK: usize = 64;

/// Eval-mode argmax predictions (ties to the lower class index).
pub fn evaluate(model: &ExpandableModel, data: &TrialDataset) -> Result<Vec<u32>> {
    let mut preds = Vec::with_capacity(data.len());
    let idx: Vec<usize> = (0..data.len()).collect();
    for chunk in idx.chunks(EVAL_CHUNK) {
        let probs = model.predict_proba(&data.batch(chunk))?;
        let k = probs.dim(1);
        preds.extend(probs.data().chunks(k).map(argmax));
    }
    Ok(preds)
}

pub fn argmax(row: &[f64]) -> u32 {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best as u32
}

pub fn accuracy(model: &ExpandableModel, data: &TrialDataset) -> Result<f64> {
    let preds = evaluate(model, data)?;
    let correct = preds
        .iter()
        .zip(&data.labels)
        .filter(|(p, l)| p == l)
        .count();
    Ok(correct as f64 / data.len() as f64)
}

fn full_batch_cross_entropy(model: &ExpandableModel, data: &TrialDataset) -> Result<f64> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut total = 0.0;
    for chunk in idx.chunks(EVAL_CHUNK) {
        let probs = model.predict_proba(&data.batch(chunk))?;
        let labels: Vec<u32> = chunk.iter().map(|&i| data.labels[i]).collect();
        total += cross_entropy(&probs, &one_hot(&labels, data.n_classes))? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Zero every gradient entry that does not belong to an added group.
fn freeze_initial(model: &ExpandableModel, grads: &mut [Tensor]) {
    let mut mask: Vec<Tensor> = grads.iter().map(|g| Tensor::zeros(g.shape())).collect();
    for (l, groups) in model.ledger().layers.iter().enumerate() {
        for g in groups.iter().filter(|g| g.status == GroupStatus::Added) {
            let slices = model.group_slices(l, &g.channels);
            for (p, axis, range) in slices.iter().cloned() {
                mask[p].for_each_along_mut(axis, range, |v| *v = 1.0);
            }
            // bias and batch-norm affine entries of the new channels
            let weight = slices[0].0;
            for m in &mut mask[weight + 1..weight + 4] {
                m.for_each_along_mut(0, g.channels.clone(), |v| *v = 1.0);
            }
        }
    }
    for (g, m) in grads.iter_mut().zip(&mask) {
        for (gv, mv) in g.data_mut().iter_mut().zip(m.data()) {
            *gv *= mv;
        }
    }
}

fn ensure_finite(value: f64, what: &str, curve: &[f64]) -> Result<()> {
    if !value.is_finite() {
        return Err(Error::Numerical(format!(
            "{what} diverged ({value}); epoch-mean loss so far: {curve:?}"
        )));
    }
    Ok(())
}

/// Train `model` for one stage of a session.
///
/// Returns the best-validation checkpoint (ties keep the earlier epoch;
/// epoch 0 is the starting weights) after pruning, and the stage report.
#[allow(clippy::too_many_arguments)]
pub fn train_session(
    mut model: ExpandableModel,
    optim: Option<OptimState>,
    train: &TrialDataset,
    valid: &TrialDataset,
    stage: Stage,
    cfg: &TrainConfig,
    session: u32,
    rng: &mut RandomStream,
) -> Result<(Checkpoint, SessionReport)> {
    cfg.validate()?;
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Input(
            "training and validation sets must be non-empty".into(),
        ));
    }
    let spec = model.spec().clone();
    for d in [train, valid] {
        if d.n_channels() != spec.n_eeg_channels
            || d.n_times() != spec.n_timepoints
            || d.n_classes != spec.n_classes
        {
            return Err(Error::dim(format!(
                "dataset is {}×{} with {} classes, model expects {}×{} with {}",
                d.n_channels(),
                d.n_times(),
                d.n_classes,
                spec.n_eeg_channels,
                spec.n_timepoints,
                spec.n_classes
            )));
        }
    }
    model.ledger_mut().begin_session(session);
    let mut optim = match optim {
        Some(o) if o.matches(&model.params()) => {
            let mut o = o;
            o.lr = cfg.lr;
            o
        }
        _ => OptimState::for_model(&model, cfg.lr),
    };
    let objective = match stage {
        Stage::Sparse => Objective::sparse(&cfg.loss),
        Stage::Continual => Objective::group_sparse(&cfg.loss),
    };
    let tau = cfg.trigger.resolved_tau(spec.n_classes);
    let widths_initial = model.widths();

    let mut report = SessionReport {
        session,
        stages: vec![stage],
        loss_curve: Vec::new(),
        objective_curve: Vec::new(),
        val_acc_curve: Vec::new(),
        expansion_events: Vec::new(),
        pruned_groups: Vec::new(),
        widths_initial,
        widths_final: widths_initial,
        best_epoch: 0,
        best_val_acc: 0.0,
        sparse_epochs: if stage == Stage::Sparse {
            cfg.sparse_epochs
        } else {
            0
        },
        tau,
        test_accuracy: None,
        config_echo: {
            let mut c = cfg.clone();
            c.trigger.tau = Some(tau);
            c
        },
        seed: rng.seed(),
    };

    // Running statistics exist only after a train-mode pass; a fresh model
    // is scored at epoch 0 as chance.
    let has_stats = model.batchnorms().iter().all(|bn| bn.running.is_some());
    let mut best_acc = if has_stats {
        accuracy(&model, valid)?
    } else {
        f64::NEG_INFINITY
    };
    let mut best = Checkpoint::new(model.clone(), Some(optim.clone()));

    let mut since_expansion: Vec<f64> = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.epochs(stage) {
        rng.shuffle(&mut order);
        let mut ce_sum = 0.0;
        let mut obj_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = train.batch(chunk);
            let labels: Vec<u32> = chunk.iter().map(|&i| train.labels[i]).collect();
            let y = one_hot(&labels, train.n_classes);
            let (probs, cache) = model.forward(&x, Mode::Train, rng)?;
            let ce = cross_entropy(&probs, &y)?;
            ensure_finite(ce, "training loss", &report.loss_curve)?;
            ce_sum += ce * chunk.len() as f64;
            obj_sum += (ce + penalty(&model, &objective)) * chunk.len() as f64;

            let d_logits = cross_entropy_logit_grad(&probs, &y)?;
            let mut grads = model.backward(&cache, &d_logits)?;
            add_penalty_grad(&model, &objective, &mut grads);
            if cfg.freeze_old && stage == Stage::Continual {
                freeze_initial(&model, &mut grads);
            }
            optimizer_step(&mut model, &grads, &mut optim)?;
            if cfg.precision == Precision::F32 {
                model.quantize_f32();
            }
        }
        let n = train.len() as f64;
        let epoch_loss = ce_sum / n;
        ensure_finite(epoch_loss, "epoch loss", &report.loss_curve)?;
        report.loss_curve.push(epoch_loss);
        report.objective_curve.push(obj_sum / n);

        let acc = accuracy(&model, valid)?;
        report.val_acc_curve.push(acc);
        if acc > best_acc {
            best_acc = acc;
            best = Checkpoint::new(model.clone(), Some(optim.clone()));
            report.best_epoch = epoch;
        }
        log::debug!(
            "session {session} {stage:?} epoch {epoch}: loss {epoch_loss:.4} val acc {acc:.3} widths {:?}",
            model.widths()
        );

        if stage == Stage::Continual {
            since_expansion.push(epoch_loss);
            let done = report.expansion_events.len();
            if should_expand(
                &since_expansion,
                tau,
                cfg.trigger.patience,
                cfg.trigger.max_expansions,
                done,
            ) {
                let widths_before = model.widths();
                let loss_before = full_batch_cross_entropy(&model, train)?;
                let mut expanded = false;
                for &l in &cfg.expansion.layers {
                    let o = cfg.expansion.added_channels(model.widths()[l - 1]);
                    let edits = model.expand(l, o, cfg.expansion.init, rng)?;
                    expanded |= !edits.is_empty();
                    optim.apply_edits(&edits)?;
                }
                since_expansion.clear();
                if expanded {
                    let loss_after = full_batch_cross_entropy(&model, train)?;
                    log::info!(
                        "session {session}: widened {widths_before:?} -> {:?} after epoch {epoch}",
                        model.widths()
                    );
                    report.expansion_events.push(super::ExpansionEvent {
                        epoch,
                        widths_before,
                        widths_after: model.widths(),
                        loss_before,
                        loss_after,
                    });
                }
            }
        }
    }

    let (pruned, edits) = best.model.prune_groups(cfg.prune_epsilon)?;
    if let Some(o) = &mut best.optim {
        o.apply_edits(&edits)?;
    }
    report.pruned_groups = pruned;
    report.widths_final = best.model.widths();
    report.best_val_acc = if best_acc.is_finite() { best_acc } else { 0.0 };
    Ok((best, report))
}
