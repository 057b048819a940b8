//! Multi-session orchestration and pseudo-online evaluation.
//!
//! Session 1 builds a fresh network and runs the sparse stage followed by
//! the continual stage. Every later session starts from the previous
//! session's best checkpoint (widths included) and runs the continual stage
//! only. After training, the session's test trials are replayed in
//! recording order, each predicted before its label is revealed.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{read_dataset, TrialDataset};
use crate::layers::Mode;
use crate::model::{Checkpoint, ExpandableModel, NetSpec};
use crate::rng::stream_key;
use crate::train::{
    cross_entropy_logit_grad, one_hot, optimizer_step, train_session, OptimState, SessionReport,
    Stage, TrainConfig,
};
use crate::{Error, RandomStream, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalMode {
    /// Weights never change during the replay.
    #[default]
    Frozen,
    /// One optimizer step on each trial once its label is revealed.
    Adaptive,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceEntry {
    pub trial_index: u32,
    pub pred: u32,
    #[serde(rename = "true")]
    pub true_label: u32,
    pub cum_acc: f64,
}

/// Per-trial outcome of a pseudo-online replay, in replay order.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct PseudoOnlineTrace {
    pub entries: Vec<TraceEntry>,
}

impl PseudoOnlineTrace {
    /// Build from predictions already in replay order.
    pub fn from_predictions(trial_index: &[u32], pred: &[u32], truth: &[u32]) -> Self {
        let mut correct = 0usize;
        let entries = trial_index
            .iter()
            .zip(pred)
            .zip(truth)
            .enumerate()
            .map(|(i, ((&t, &p), &y))| {
                correct += usize::from(p == y);
                TraceEntry {
                    trial_index: t,
                    pred: p,
                    true_label: y,
                    cum_acc: correct as f64 / (i + 1) as f64,
                }
            })
            .collect();
        PseudoOnlineTrace { entries }
    }

    /// Final cumulative accuracy (0 for an empty trace).
    pub fn accuracy(&self) -> f64 {
        self.entries.last().map_or(0.0, |e| e.cum_acc)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("trial_index,pred,true,cum_acc\n");
        for e in &self.entries {
            let _ = writeln!(
                s,
                "{},{},{},{}",
                e.trial_index, e.pred, e.true_label, e.cum_acc
            );
        }
        s
    }
}

/// Indices of `data` sorted by recording order (ties by position).
pub fn replay_order(data: &TrialDataset) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..data.len()).collect();
    idx.sort_by_key(|&i| (data.recording_order[i], i));
    idx
}

/// Replay `test` in recording order. In adaptive mode `model` is updated
/// in place: after each prediction, one Adam step on the cross-entropy of
/// that trial, computed in eval mode (running statistics and dropout off).
pub fn pseudo_online_eval(
    model: &mut ExpandableModel,
    test: &TrialDataset,
    mode: EvalMode,
    optim: &mut OptimState,
) -> Result<PseudoOnlineTrace> {
    let order = replay_order(test);
    let mut rng = RandomStream::new(0, 0);
    let mut preds = Vec::with_capacity(order.len());
    match mode {
        EvalMode::Frozen => {
            for chunk in order.chunks(64) {
                let probs = model.predict_proba(&test.batch(chunk))?;
                let k = probs.dim(1);
                preds.extend(probs.data().chunks(k).map(crate::train::argmax));
            }
        }
        EvalMode::Adaptive => {
            for &i in &order {
                let (probs, cache) = model.forward(&test.batch(&[i]), Mode::Eval, &mut rng)?;
                preds.push(crate::train::argmax(probs.data()));
                let y = one_hot(&[test.labels[i]], test.n_classes);
                let d = cross_entropy_logit_grad(&probs, &y)?;
                let grads = model.backward(&cache, &d)?;
                optimizer_step(model, &grads, optim)?;
                model.quantize_f32();
            }
        }
    }
    let index: Vec<u32> = order.iter().map(|&i| test.recording_order[i]).collect();
    let truth: Vec<u32> = order.iter().map(|&i| test.labels[i]).collect();
    Ok(PseudoOnlineTrace::from_predictions(&index, &preds, &truth))
}

/// One session's data already in memory.
#[derive(Debug, Clone)]
pub struct SessionData {
    pub train: TrialDataset,
    pub test: TrialDataset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionEntry {
    pub train: PathBuf,
    /// Separate test file. When absent, `test_subjects` are held out of
    /// `train` instead.
    #[serde(default)]
    pub test: Option<PathBuf>,
    #[serde(default)]
    pub test_subjects: Vec<u32>,
    /// Partial training config merged over the plan's config.
    #[serde(default)]
    pub overrides: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionPlan {
    pub sessions: Vec<SessionEntry>,
    #[serde(default)]
    pub seed: u64,
    /// Channel, sample and class counts are taken from the data.
    #[serde(default)]
    pub net: NetSpec,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub eval_mode: EvalMode,
}

#[derive(Debug, Clone)]
pub struct SessionOutcome {
    pub report: SessionReport,
    pub trace: PseudoOnlineTrace,
    /// Best checkpoint of the session, as carried into the next one.
    pub checkpoint: Checkpoint,
}

/// Recursively merge `patch` into `base` (objects merge, anything else
/// replaces).
pub fn merge_json(base: &mut serde_json::Value, patch: &serde_json::Value) {
    use serde_json::Value;
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k.clone()).or_insert(Value::Null), v);
            }
        }
        (_, Value::Null) => {}
        (b, p) => *b = p.clone(),
    }
}

pub fn apply_overrides(cfg: &TrainConfig, overrides: &serde_json::Value) -> Result<TrainConfig> {
    if overrides.is_null() {
        return Ok(cfg.clone());
    }
    let mut v = serde_json::to_value(cfg)?;
    merge_json(&mut v, overrides);
    Ok(serde_json::from_value(v)?)
}

/// Copy the data shape (channels, samples, classes) into `net`.
pub fn fit_net_to_data(net: &NetSpec, data: &TrialDataset) -> NetSpec {
    NetSpec {
        n_eeg_channels: data.n_channels(),
        n_timepoints: data.n_times(),
        n_classes: data.n_classes,
        ..net.clone()
    }
}

fn check_shared_shape(sessions: &[SessionData]) -> Result<()> {
    let first = &sessions[0].train;
    for (s, d) in sessions.iter().enumerate() {
        for set in [&d.train, &d.test] {
            if set.n_channels() != first.n_channels()
                || set.n_times() != first.n_times()
                || set.n_classes != first.n_classes
            {
                return Err(Error::Input(format!(
                    "session {} data is {}×{} with {} classes, session 1 is {}×{} with {}",
                    s + 1,
                    set.n_channels(),
                    set.n_times(),
                    set.n_classes,
                    first.n_channels(),
                    first.n_times(),
                    first.n_classes
                )));
            }
        }
    }
    Ok(())
}

const INIT_TAG: u64 = 1;
const SPLIT_TAG: u64 = 2;
const TRAIN_TAG: u64 = 3;

/// Run sessions in order. `configs[s]` is the training config of session
/// `s`; session 1 may instead start from `start` (skipping the sparse
/// stage).
pub fn run_sessions(
    net: &NetSpec,
    configs: &[TrainConfig],
    sessions: &[SessionData],
    seed: u64,
    eval_mode: EvalMode,
    start: Option<Checkpoint>,
) -> Result<Vec<SessionOutcome>> {
    if sessions.is_empty() || configs.len() != sessions.len() {
        return Err(Error::Input(format!(
            "{} sessions with {} configs",
            sessions.len(),
            configs.len()
        )));
    }
    check_shared_shape(sessions)?;
    let net = fit_net_to_data(net, &sessions[0].train);
    let root = RandomStream::new(seed, 0);
    let mut carried = start;
    let mut out = Vec::with_capacity(sessions.len());
    for (s, (data, cfg)) in sessions.iter().zip(configs).enumerate() {
        let session = s as u32 + 1;
        cfg.validate()?;
        data.train.check_all_classes_present()?;
        let mut split_rng = root.derive(stream_key([SPLIT_TAG, session as u64, 0, 0]));
        let (train, valid) = data
            .train
            .stratified_split(cfg.valid_fraction, &mut split_rng)?;
        let mut rng = root.derive(stream_key([TRAIN_TAG, session as u64, 0, 0]));
        let (best, mut report) = match carried.take() {
            None => {
                let mut init = root.derive(stream_key([INIT_TAG, 0, 0, 0]));
                let model = ExpandableModel::build(net.clone(), &mut init)?;
                let (sparse, mut report) = train_session(
                    model,
                    None,
                    &train,
                    &valid,
                    Stage::Sparse,
                    cfg,
                    session,
                    &mut rng,
                )?;
                let (best, later) = train_session(
                    sparse.model,
                    sparse.optim,
                    &train,
                    &valid,
                    Stage::Continual,
                    cfg,
                    session,
                    &mut rng,
                )?;
                report.append(later);
                (best, report)
            }
            Some(prev) => {
                let spec = prev.model.spec();
                if spec.n_eeg_channels != net.n_eeg_channels
                    || spec.n_timepoints != net.n_timepoints
                    || spec.n_classes != net.n_classes
                {
                    return Err(Error::Spec(format!(
                        "checkpoint expects {}×{} trials with {} classes, session {session} data is {}×{} with {}",
                        spec.n_eeg_channels,
                        spec.n_timepoints,
                        spec.n_classes,
                        net.n_eeg_channels,
                        net.n_timepoints,
                        net.n_classes
                    )));
                }
                train_session(
                    prev.model,
                    prev.optim,
                    &train,
                    &valid,
                    Stage::Continual,
                    cfg,
                    session,
                    &mut rng,
                )?
            }
        };
        let mut eval_model = best.model.clone();
        let mut eval_optim = best
            .optim
            .clone()
            .unwrap_or_else(|| OptimState::for_model(&eval_model, cfg.lr));
        let trace = pseudo_online_eval(&mut eval_model, &data.test, eval_mode, &mut eval_optim)?;
        report.test_accuracy = Some(trace.accuracy());
        report.seed = seed;
        log::info!(
            "session {session}: widths {:?}, {} expansion(s), test accuracy {:.3}",
            report.widths_final,
            report.expansion_count(),
            trace.accuracy()
        );
        carried = Some(best.clone());
        out.push(SessionOutcome {
            report,
            trace,
            checkpoint: best,
        });
    }
    Ok(out)
}

/// Load the session data a plan refers to, relative to `base`.
pub fn load_plan_data(plan: &SessionPlan, base: &Path) -> Result<Vec<SessionData>> {
    if plan.sessions.is_empty() {
        return Err(Error::Input("plan has no sessions".into()));
    }
    plan.sessions
        .iter()
        .map(|e| {
            let all = read_dataset(base.join(&e.train))?;
            match &e.test {
                Some(p) => Ok(SessionData {
                    train: all,
                    test: read_dataset(base.join(p))?,
                }),
                None => split_subjects(&all, &e.test_subjects),
            }
        })
        .collect()
}

/// Hold `test_subjects` out of `data`.
pub fn split_subjects(data: &TrialDataset, test_subjects: &[u32]) -> Result<SessionData> {
    if test_subjects.is_empty() {
        return Err(Error::Input(
            "a session without a test file needs held-out test subjects".into(),
        ));
    }
    let train = data.filter_subjects(|s| !test_subjects.contains(&s))?;
    let test = data.filter_subjects(|s| test_subjects.contains(&s))?;
    Ok(SessionData { train, test })
}

pub fn plan_configs(plan: &SessionPlan) -> Result<Vec<TrainConfig>> {
    plan.sessions
        .iter()
        .map(|e| apply_overrides(&plan.train, &e.overrides))
        .collect()
}

/// Load and run a plan whose relative paths resolve against `base`.
pub fn run_plan(plan: &SessionPlan, base: &Path) -> Result<Vec<SessionOutcome>> {
    let data = load_plan_data(plan, base)?;
    let configs = plan_configs(plan)?;
    run_sessions(&plan.net, &configs, &data, plan.seed, plan.eval_mode, None)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cumulative_accuracy_arithmetic() {
        let t = PseudoOnlineTrace::from_predictions(&[0, 1, 2, 3], &[1, 0, 2, 1], &[1, 1, 2, 1]);
        let cum: Vec<f64> = t.entries.iter().map(|e| e.cum_acc).collect();
        assert_eq!(cum, vec![1.0, 0.5, 2.0 / 3.0, 0.75]);
        assert_eq!(t.accuracy(), 0.75);
        assert!(t
            .to_csv()
            .starts_with("trial_index,pred,true,cum_acc\n0,1,1,1\n"));
    }

    #[test]
    fn overrides_merge() {
        let cfg = TrainConfig::default();
        let v = serde_json::json!({"lr": 0.01, "trigger": {"patience": 2}});
        let c = apply_overrides(&cfg, &v).unwrap();
        assert_eq!(c.lr, 0.01);
        assert_eq!(c.trigger.patience, 2);
        assert_eq!(c.trigger.max_expansions, cfg.trigger.max_expansions);
        assert_eq!(
            apply_overrides(&cfg, &serde_json::Value::Null).unwrap(),
            cfg
        );
    }
}
