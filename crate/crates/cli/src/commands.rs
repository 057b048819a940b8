use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use expnet::csp::CspLda;
use expnet::data::{dataset_to_bytes, generate, read_dataset, DriftSpec, TrialDataset};
use expnet::embed::{cluster_quality, extract_features, pca_reduce, scatter_svg, tsne};
use expnet::model::Checkpoint;
use expnet::pipeline::{
    apply_overrides, pseudo_online_eval, run_sessions, split_subjects, SessionData, SessionOutcome,
};
use expnet::report::{comparison_table, MethodRow};
use expnet::train::{OptimState, TrainConfig};
use expnet::RandomStream;
use serde::Serialize;

use crate::config::{
    load_config, set, CspRunConfig, EmbedConfig, EvalConfig, GenConfig, SessionsConfig,
    TrainRunConfig,
};
use crate::output::RunDir;
use crate::{CspArgs, EmbedArgs, EvalArgs, GenArgs, SessionsArgs, TrainArgs, UsageError};

fn require(path: &Path, flag: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(UsageError(format!("missing {flag} (flag or config file)")).into());
    }
    Ok(())
}

/// `session<N>.eegx` inside a directory, or the path itself.
fn session_file(data: &Path, session: u32) -> PathBuf {
    if data.is_dir() {
        data.join(format!("session{session}.eegx"))
    } else {
        data.to_path_buf()
    }
}

fn load(path: &Path) -> Result<TrialDataset> {
    read_dataset(path).with_context(|| format!("loading dataset {}", path.display()))
}

/// The given subjects, or the highest subject id present.
fn held_out(data: &TrialDataset, subjects: &[u32]) -> Vec<u32> {
    if subjects.is_empty() {
        vec![*data
            .subject_ids
            .iter()
            .max()
            .expect("datasets are non-empty")]
    } else {
        subjects.to_vec()
    }
}

fn select_subjects(data: TrialDataset, subjects: &[u32]) -> Result<TrialDataset> {
    if subjects.is_empty() {
        Ok(data)
    } else {
        Ok(data.filter_subjects(|s| subjects.contains(&s))?)
    }
}

pub fn gen_data(a: GenArgs) -> Result<()> {
    let mut cfg: GenConfig = load_config(a.common.config.as_deref())?;
    let g = &mut cfg.gen;
    set(&mut g.seed, a.seed);
    set(&mut cfg.sessions, a.sessions);
    set(&mut g.n_subjects, a.subjects);
    set(&mut g.trials_per_class_per_subject, a.trials_per_class);
    set(&mut g.n_channels, a.channels);
    set(&mut g.n_times, a.times);
    set(&mut g.sample_rate, a.sample_rate);
    set(&mut g.snr_db, a.snr_db);
    set(&mut g.drift.rotation, a.rotation);
    set(&mut g.drift.band_shift, a.band_shift);
    set(&mut g.drift.amplitude_scale, a.amplitude_scale);
    if let Some(k) = a.classes {
        g.n_classes = k;
        if g.class_names.len() != k {
            g.class_names.clear();
        }
    }
    if a.no_drift {
        g.drift = DriftSpec::none();
    }
    if cfg.sessions == 0 {
        return Err(UsageError("--sessions must be ≥ 1".into()).into());
    }
    let mut out = RunDir::create(&a.common.out_dir("gen-data"))?;
    for s in 1..=cfg.sessions {
        let d = generate(&cfg.gen, s)?;
        out.write(&format!("session{s}.eegx"), dataset_to_bytes(&d))?;
        log::info!(
            "session {s}: {} trials of {}×{}",
            d.len(),
            d.n_channels(),
            d.n_times()
        );
    }
    out.write_json("config.json", &cfg)?;
    out.finish("gen-data")
}

fn write_outcomes(out: &mut RunDir, prefix: &str, outcomes: &[SessionOutcome]) -> Result<()> {
    for o in outcomes {
        let dir = format!("{prefix}session{}", o.report.session);
        out.write_json(&format!("{dir}/report.json"), &o.report)?;
        out.write(&format!("{dir}/trace.csv"), o.trace.to_csv())?;
        out.write(&format!("{dir}/best.ckpt"), o.checkpoint.to_bytes())?;
    }
    Ok(())
}

pub fn train(a: TrainArgs) -> Result<()> {
    let mut cfg: TrainRunConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.data, a.data);
    if a.test_data.is_some() {
        cfg.test_data = a.test_data;
    }
    set(&mut cfg.session, a.session);
    set(&mut cfg.test_subjects, a.test_subjects);
    set(&mut cfg.seed, a.seed);
    a.net.apply(&mut cfg.net);
    a.train.apply(&mut cfg.train, &mut cfg.eval_mode);
    require(&cfg.data, "--data")?;

    let all = load(&session_file(&cfg.data, cfg.session.max(1)))?;
    let data = match &cfg.test_data {
        Some(p) => SessionData {
            train: all,
            test: load(p)?,
        },
        None => {
            cfg.test_subjects = held_out(&all, &cfg.test_subjects);
            split_subjects(&all, &cfg.test_subjects)?
        }
    };
    let mut outcomes = run_sessions(
        &cfg.net,
        std::slice::from_ref(&cfg.train),
        std::slice::from_ref(&data),
        cfg.seed,
        cfg.eval_mode,
        None,
    )?;
    let mut out = RunDir::create(&a.common.out_dir("train"))?;
    let o = &mut outcomes[0];
    o.report.session = cfg.session;
    out.write_json("report.json", &o.report)?;
    out.write("trace.csv", o.trace.to_csv())?;
    out.write("best.ckpt", o.checkpoint.to_bytes())?;
    out.write_json("config.json", &cfg)?;
    out.finish("train")
}

fn load_sessions(
    data: &Path,
    sessions: u32,
    test_subjects: &mut Vec<u32>,
) -> Result<Vec<SessionData>> {
    if sessions == 0 {
        return Err(UsageError("--sessions must be ≥ 1".into()).into());
    }
    let mut out = Vec::new();
    for s in 1..=sessions {
        let all = load(&session_file(data, s))?;
        if test_subjects.is_empty() {
            *test_subjects = held_out(&all, &[]);
        }
        out.push(split_subjects(&all, test_subjects)?);
    }
    Ok(out)
}

#[derive(Serialize)]
struct CspSessionReport {
    session: u32,
    test_accuracy: f64,
    n_train: usize,
    n_test: usize,
    n_features: usize,
}

fn run_csp(
    out: &mut RunDir,
    prefix: &str,
    data: &[SessionData],
    cfg: &expnet::csp::CspConfig,
) -> Result<MethodRow> {
    let mut accs = Vec::new();
    for (s, d) in data.iter().enumerate() {
        let model = CspLda::fit(&d.train, cfg)?;
        let trace = model.pseudo_online(&d.test)?;
        let dir = format!("{prefix}session{}", s + 1);
        out.write(&format!("{dir}/trace.csv"), trace.to_csv())?;
        out.write_json(
            &format!("{dir}/report.json"),
            &CspSessionReport {
                session: s as u32 + 1,
                test_accuracy: trace.accuracy(),
                n_train: d.train.len(),
                n_test: d.test.len(),
                n_features: model.csp.n_features(),
            },
        )?;
        log::info!(
            "csp+lda session {}: test accuracy {:.3}",
            s + 1,
            trace.accuracy()
        );
        accs.push(trace.accuracy());
    }
    Ok(MethodRow::new("csp+lda", accs))
}

pub fn sessions(a: SessionsArgs) -> Result<()> {
    let mut cfg: SessionsConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.data, a.data);
    set(&mut cfg.sessions, a.sessions);
    set(&mut cfg.test_subjects, a.test_subjects);
    set(&mut cfg.seed, a.seed);
    cfg.with_control |= a.with_control;
    cfg.with_csp |= a.with_csp;
    a.net.apply(&mut cfg.net);
    a.train.apply(&mut cfg.train, &mut cfg.eval_mode);
    require(&cfg.data, "--data")?;
    if cfg.overrides.len() > cfg.sessions as usize {
        return Err(UsageError(format!(
            "{} per-session overrides for {} sessions",
            cfg.overrides.len(),
            cfg.sessions
        ))
        .into());
    }

    let data = load_sessions(&cfg.data, cfg.sessions, &mut cfg.test_subjects)?;
    let configs: Vec<TrainConfig> = (0..cfg.sessions as usize)
        .map(|s| {
            apply_overrides(
                &cfg.train,
                cfg.overrides.get(s).unwrap_or(&serde_json::Value::Null),
            )
        })
        .collect::<expnet::Result<_>>()?;

    let mut out = RunDir::create(&a.common.out_dir("sessions"))?;
    let mut rows = Vec::new();
    let expandable = run_sessions(&cfg.net, &configs, &data, cfg.seed, cfg.eval_mode, None)?;
    write_outcomes(&mut out, "", &expandable)?;
    let reports: Vec<_> = expandable.iter().map(|o| o.report.clone()).collect();
    rows.push(MethodRow::from_reports("expandable", &reports)?);

    if cfg.with_control {
        let frozen: Vec<TrainConfig> = configs
            .iter()
            .map(|c| {
                let mut c = c.clone();
                c.trigger.max_expansions = 0;
                c
            })
            .collect();
        let control = run_sessions(&cfg.net, &frozen, &data, cfg.seed, cfg.eval_mode, None)?;
        write_outcomes(&mut out, "control/", &control)?;
        let reports: Vec<_> = control.iter().map(|o| o.report.clone()).collect();
        rows.push(MethodRow::from_reports("control", &reports)?);
    }
    if cfg.with_csp {
        rows.push(run_csp(&mut out, "csp/", &data, &cfg.csp)?);
    }
    out.write("comparison.csv", comparison_table(&rows)?)?;
    out.write_json("config.json", &cfg)?;
    for r in &rows {
        log::info!(
            "{}: sessions {:?}, average {:.3}",
            r.method,
            r.sessions,
            r.average()
        );
    }
    out.finish("sessions")
}

#[derive(Serialize)]
struct EvalReport {
    accuracy: f64,
    n_trials: usize,
    eval_mode: expnet::pipeline::EvalMode,
    widths: [usize; 3],
}

pub fn eval(a: EvalArgs) -> Result<()> {
    let mut cfg: EvalConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.checkpoint, a.checkpoint);
    set(&mut cfg.data, a.data);
    set(&mut cfg.subjects, a.subjects);
    if let Some(m) = a.eval_mode {
        cfg.eval_mode = m.into();
    }
    if a.lr.is_some() {
        cfg.lr = a.lr;
    }
    require(&cfg.checkpoint, "--checkpoint")?;
    require(&cfg.data, "--data")?;
    let ckpt = Checkpoint::load(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let data = select_subjects(load(&cfg.data)?, &cfg.subjects)?;
    let mut model = ckpt.model;
    let mut optim = ckpt
        .optim
        .unwrap_or_else(|| OptimState::for_model(&model, TrainConfig::default().lr));
    if let Some(lr) = cfg.lr {
        optim.lr = lr;
    }
    let trace = pseudo_online_eval(&mut model, &data, cfg.eval_mode, &mut optim)?;
    let mut out = RunDir::create(&a.common.out_dir("eval"))?;
    out.write("trace.csv", trace.to_csv())?;
    out.write_json(
        "report.json",
        &EvalReport {
            accuracy: trace.accuracy(),
            n_trials: trace.entries.len(),
            eval_mode: cfg.eval_mode,
            widths: model.widths(),
        },
    )?;
    out.write_json("config.json", &cfg)?;
    log::info!(
        "accuracy {:.3} over {} trials",
        trace.accuracy(),
        trace.entries.len()
    );
    out.finish("eval")
}

pub fn baseline_csp(a: CspArgs) -> Result<()> {
    let mut cfg: CspRunConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.data, a.data);
    set(&mut cfg.sessions, a.sessions);
    set(&mut cfg.test_subjects, a.test_subjects);
    if let Some(b) = a.band {
        cfg.csp.band = [b[0], b[1]];
    }
    set(&mut cfg.csp.n_filters, a.filters);
    set(&mut cfg.csp.shrinkage, a.shrinkage);
    require(&cfg.data, "--data")?;
    let data = load_sessions(&cfg.data, cfg.sessions, &mut cfg.test_subjects)?;
    let mut out = RunDir::create(&a.common.out_dir("baseline-csp"))?;
    let row = run_csp(&mut out, "", &data, &cfg.csp)?;
    out.write("comparison.csv", comparison_table(&[row])?)?;
    out.write_json("config.json", &cfg)?;
    out.finish("baseline-csp")
}

#[derive(Serialize)]
struct EmbedReport {
    /// Silhouette of the 2-D embedding.
    silhouette: f64,
    /// Silhouette of the (PCA-reduced) features themselves.
    feature_silhouette: f64,
    n_points: usize,
    feature_dim: usize,
    widths: [usize; 3],
    perplexity: f64,
    kl_after_exaggeration: f64,
    final_kl: f64,
}

pub fn embed(a: EmbedArgs) -> Result<()> {
    let mut cfg: EmbedConfig = load_config(a.common.config.as_deref())?;
    set(&mut cfg.checkpoint, a.checkpoint);
    set(&mut cfg.data, a.data);
    set(&mut cfg.subjects, a.subjects);
    set(&mut cfg.tsne.perplexity, a.perplexity);
    set(&mut cfg.tsne.iterations, a.iterations);
    set(&mut cfg.tsne.seed, a.seed);
    require(&cfg.checkpoint, "--checkpoint")?;
    require(&cfg.data, "--data")?;
    let ckpt = Checkpoint::load(&cfg.checkpoint)
        .with_context(|| format!("loading checkpoint {}", cfg.checkpoint.display()))?;
    let data = select_subjects(load(&cfg.data)?, &cfg.subjects)?;
    let features = extract_features(&ckpt.model, &data)?;
    let result = tsne(&features, &cfg.tsne)?;
    let reduced = pca_reduce(
        &features,
        cfg.tsne.pca_dims,
        &mut RandomStream::new(cfg.tsne.seed, 0),
    );
    let report = EmbedReport {
        silhouette: cluster_quality(&result.coords, 2, &features.labels)?,
        feature_silhouette: cluster_quality(&reduced.data, reduced.d, &features.labels)?,
        n_points: features.n,
        feature_dim: features.d,
        widths: features.widths,
        perplexity: result.perplexity,
        kl_after_exaggeration: result.kl_after_exaggeration,
        final_kl: result.final_kl,
    };
    let mut csv = String::from("x,y,label,session\n");
    for i in 0..features.n {
        csv.push_str(&format!(
            "{},{},{},{}\n",
            result.coords[2 * i],
            result.coords[2 * i + 1],
            features.labels[i],
            features.sessions[i]
        ));
    }
    let mut out = RunDir::create(&a.common.out_dir("embed"))?;
    out.write("coords.csv", csv)?;
    let title = format!("t-SNE of features, widths {:?}", features.widths);
    out.write(
        "embedding.svg",
        scatter_svg(&result.coords, &features.labels, &title),
    )?;
    out.write_json("silhouette.json", &report)?;
    out.write_json("config.json", &cfg)?;
    log::info!(
        "silhouette {:.4} (features {:.4})",
        report.silhouette,
        report.feature_silhouette
    );
    out.finish("embed")
}
