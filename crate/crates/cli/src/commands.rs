use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use srlstm::checkpoint::Checkpoint;
use srlstm::data::{synth, PedestrianWindow};
use srlstm::eval::{
    ablation_matrix, fad, fingerprint, mad, train_experiment, write_report_csv, EvalReport, Experiment, SceneMetrics,
};
use srlstm::gradcheck::{check_model, fixture_window, GradCheckOptions, GradCheckReport, TOLERANCE};
use srlstm::introspect::{introspect, write_csv};
use srlstm::model::SrLstm;
use srlstm::train::{rollout_batch, EpochLog, RolloutResult, EVAL_CHUNK};

use crate::cache::{prepare_scene, Prepared};
use crate::config::Resolved;
use crate::error::CliError;

pub const CHECKPOINT_NAME: &str = "model.ckpt";
pub const LOG_NAME: &str = "train_log.csv";
pub const REPORT_NAME: &str = "report.csv";
pub const TRACES_NAME: &str = "traces.csv";
const LABEL_KEY: &str = "label";

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    Ok(BufWriter::new(File::create(path).map_err(|e| CliError::io(path, e))?))
}

fn variant_label(id: u32) -> String {
    if id == 0 {
        "V-LSTM".into()
    } else {
        id.to_string()
    }
}

pub fn prepare(cfg: &Resolved) -> Result<Vec<Prepared>, CliError> {
    prepare_scenes(cfg, &cfg.scenes.iter().map(String::as_str).collect::<Vec<_>>())
}

fn prepare_scenes(cfg: &Resolved, scenes: &[&str]) -> Result<Vec<Prepared>, CliError> {
    let root = cfg.data_root()?;
    scenes
        .iter()
        .map(|s| {
            let p = prepare_scene(root, &cfg.cache_dir, s, &cfg.preproc)?;
            eprintln!(
                "{}: {} windows ({}, {})",
                p.scene,
                p.windows.len(),
                if p.hit { "cache hit" } else { "prepared" },
                &p.hash[..16]
            );
            Ok(p)
        })
        .collect()
}

pub struct TrainOutcome {
    pub model: SrLstm,
    pub checkpoint: PathBuf,
    pub log: PathBuf,
}

pub fn train(cfg: &Resolved) -> Result<TrainOutcome, CliError> {
    cfg.write_to(&cfg.out_dir)?;
    let prepared = prepare_scenes(cfg, &cfg.train_scenes())?;
    let per_scene: Vec<&[PedestrianWindow]> = prepared.iter().map(|p| p.windows.as_slice()).collect();
    let exp = Experiment {
        label: variant_label(cfg.variant),
        model: cfg.model.clone(),
        preproc: cfg.preproc,
        train: cfg.train.clone(),
        staged: cfg.staged,
    };
    let log_path = cfg.out_dir.join(LOG_NAME);
    let mut log = create(&log_path)?;
    writeln!(log, "iterations,{}", EpochLog::CSV_HEADER).map_err(|e| CliError::io(&log_path, e))?;
    let mut write_err = None;
    let model = train_experiment(&exp, &per_scene, &mut |entry, best, model| {
        let l = model.iterations();
        if let Err(e) = writeln!(log, "{l},{}", entry.csv_row()).and_then(|_| log.flush()) {
            write_err.get_or_insert(e);
        }
        eprintln!(
            "L={l} epoch {}: loss {:.5} val MAD {} FAD {}{}",
            entry.epoch,
            entry.train_loss,
            entry.val_mad.map_or("-".into(), |v| format!("{v:.4}")),
            entry.val_fad.map_or("-".into(), |v| format!("{v:.4}")),
            if best { " *" } else { "" }
        );
    })?;
    if let Some(e) = write_err {
        return Err(CliError::io(&log_path, e));
    }
    let mut ck = model.to_checkpoint(None);
    ck.metadata.insert(LABEL_KEY.into(), exp.label);
    let path = cfg.out_dir.join(CHECKPOINT_NAME);
    ck.save(&path).map_err(CliError::from)?;
    eprintln!("checkpoint written to {}", path.display());
    Ok(TrainOutcome {
        model,
        checkpoint: path,
        log: log_path,
    })
}

/// The checkpoint's network, or the configured one when the configuration
/// describes a network (which then has to match the stored tensors).
pub fn load_model(cfg: &Resolved) -> Result<(SrLstm, String), CliError> {
    let path = cfg
        .checkpoint
        .as_deref()
        .ok_or_else(|| CliError::Config("no checkpoint given (--checkpoint)".into()))?;
    if !path.is_file() {
        return Err(CliError::Missing(path.to_path_buf()));
    }
    let ck = Checkpoint::load(path)?;
    let label = ck.metadata.get(LABEL_KEY).cloned().unwrap_or_else(|| "checkpoint".into());
    let model = if cfg.model_given {
        SrLstm::from_params(cfg.model.clone(), ck.params)?
    } else {
        SrLstm::from_checkpoint(&ck)?
    };
    Ok((model, label))
}

/// Resolved config with preprocessing matched to the model's input frame.
fn matched(cfg: &Resolved, model: &SrLstm) -> Resolved {
    let mut cfg = cfg.clone();
    cfg.preproc.normalization = model.config.normalization;
    cfg
}

#[derive(Debug, Serialize)]
pub struct TraceRow {
    pub scene: String,
    pub window: usize,
    pub frame: i64,
    pub ped: i64,
    pub x_gt: f64,
    pub y_gt: f64,
    pub x_pred: f64,
    pub y_pred: f64,
}

/// Rolls every window out; with `oracle` the predictions are replaced by
/// the ground truth.
fn predict_scene(
    model: &SrLstm,
    scene: &str,
    windows: &[PedestrianWindow],
    obs_len: usize,
    oracle: bool,
) -> Result<Vec<RolloutResult>, CliError> {
    let mut out = Vec::with_capacity(windows.len());
    for chunk in windows.chunks(EVAL_CHUNK) {
        let refs: Vec<&PedestrianWindow> = chunk.iter().collect();
        out.extend(rollout_batch(model, &refs, obs_len)?);
    }
    if oracle {
        for r in &mut out {
            r.predictions = r.ground_truth.clone();
        }
    }
    eprintln!("{scene}: {} windows rolled out", windows.len());
    Ok(out)
}

fn trace_rows(scene: &str, windows: &[PedestrianWindow], results: &[RolloutResult]) -> Vec<TraceRow> {
    let mut rows = Vec::new();
    for (w, (win, r)) in windows.iter().zip(results).enumerate() {
        for (p, id) in r.ped_ids.iter().enumerate() {
            for (k, (gt, pred)) in r.ground_truth[p].iter().zip(&r.predictions[p]).enumerate() {
                rows.push(TraceRow {
                    scene: scene.to_string(),
                    window: w,
                    frame: win.start_frame + (r.first_step + k) as i64 * win.frame_step,
                    ped: *id,
                    x_gt: gt[0],
                    y_gt: gt[1],
                    x_pred: pred[0],
                    y_pred: pred[1],
                });
            }
        }
    }
    rows
}

fn metrics(scene: &str, windows: usize, results: &[RolloutResult]) -> Result<SceneMetrics, CliError> {
    let preds: Vec<Vec<[f64; 2]>> = results.iter().flat_map(|r| r.predictions.clone()).collect();
    let truth: Vec<Vec<[f64; 2]>> = results.iter().flat_map(|r| r.ground_truth.clone()).collect();
    Ok(SceneMetrics {
        scene: scene.to_string(),
        mad: mad(&preds, &truth)?,
        fad: fad(&preds, &truth)?,
        windows,
    })
}

fn limit(windows: &[PedestrianWindow], n: Option<usize>) -> &[PedestrianWindow] {
    &windows[..n.unwrap_or(usize::MAX).min(windows.len())]
}

pub fn eval(cfg: &Resolved, oracle: bool) -> Result<EvalReport, CliError> {
    let (model, label) = load_model(cfg)?;
    let cfg = matched(cfg, &model);
    cfg.write_to(&cfg.out_dir)?;
    let prepared = prepare_scenes(&cfg, &cfg.eval_scenes())?;
    let traces_path = cfg.out_dir.join(TRACES_NAME);
    let mut traces = csv::Writer::from_writer(create(&traces_path)?);
    let mut report = EvalReport {
        variant: label,
        fingerprint: fingerprint(&model.config, &cfg.preproc),
        scenes: Vec::new(),
    };
    for p in &prepared {
        let results = predict_scene(&model, &p.scene, &p.windows, cfg.train.obs_len, oracle)?;
        for row in trace_rows(&p.scene, &p.windows, &results) {
            traces.serialize(row).map_err(|e| CliError::Other(e.to_string()))?;
        }
        report.scenes.push(metrics(&p.scene, p.windows.len(), &results)?);
    }
    traces.flush().map_err(|e| CliError::io(&traces_path, e))?;
    let report_path = cfg.out_dir.join(REPORT_NAME);
    write_report_csv(std::slice::from_ref(&report), create(&report_path)?).map_err(|e| CliError::io(&report_path, e))?;
    write_report_csv(std::slice::from_ref(&report), std::io::stdout()).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(report)
}

pub fn predict(cfg: &Resolved, limit_windows: Option<usize>) -> Result<PathBuf, CliError> {
    let (model, _) = load_model(cfg)?;
    let cfg = matched(cfg, &model);
    cfg.write_to(&cfg.out_dir)?;
    let prepared = prepare_scenes(&cfg, &cfg.eval_scenes())?;
    let path = cfg.out_dir.join("predictions.csv");
    let mut out = csv::Writer::from_writer(create(&path)?);
    for p in &prepared {
        let windows = limit(&p.windows, limit_windows);
        let results = predict_scene(&model, &p.scene, windows, cfg.train.obs_len, false)?;
        for row in trace_rows(&p.scene, windows, &results) {
            out.serialize(row).map_err(|e| CliError::Other(e.to_string()))?;
        }
    }
    out.flush().map_err(|e| CliError::io(&path, e))?;
    Ok(path)
}

pub const GRADCHECK_PEDESTRIANS: usize = 5;
pub const GRADCHECK_STEPS: usize = 6;

/// Checks the configured network and, unless it already is one, the plain
/// LSTM. Fails with the worst parameter.
pub fn gradcheck(cfg: &Resolved, inject_bug: Option<&str>) -> Result<Vec<(usize, GradCheckReport)>, CliError> {
    cfg.write_to(&cfg.out_dir)?;
    let window = fixture_window(GRADCHECK_PEDESTRIANS, GRADCHECK_STEPS, cfg.train.seed);
    let opts = GradCheckOptions {
        seed: cfg.train.seed,
        ..GradCheckOptions::default()
    };
    let mut depths = vec![cfg.model.refinement.iterations];
    if depths[0] != 0 {
        depths.push(0);
    }
    let mut reports = Vec::new();
    for l in depths {
        let mut config = cfg.model.clone();
        config.refinement.iterations = l;
        let model = SrLstm::new(config, cfg.train.seed)?;
        let bug = inject_bug.filter(|name| model.params.contains(name));
        let r = check_model(&model, &window, &opts, bug)?;
        println!(
            "L={l}: max relative error {:.3e} at {}[{}] over {} entries: {}",
            r.max_rel_error,
            r.worst_param,
            r.worst_index,
            r.checked,
            if r.passes(TOLERANCE) { "pass" } else { "FAIL" }
        );
        reports.push((l, r));
    }
    if let Some((_, r)) = reports.iter().find(|(_, r)| !r.passes(TOLERANCE)) {
        return Err(CliError::GradCheck {
            param: r.worst_param.clone(),
            error: r.max_rel_error,
        });
    }
    Ok(reports)
}

pub fn introspect_cmd(cfg: &Resolved, limit_windows: Option<usize>) -> Result<Vec<PathBuf>, CliError> {
    let (model, _) = load_model(cfg)?;
    let cfg = matched(cfg, &model);
    cfg.write_to(&cfg.out_dir)?;
    let prepared = prepare_scenes(&cfg, &cfg.eval_scenes())?;
    let mut written = Vec::new();
    for p in &prepared {
        let windows = limit(&p.windows, limit_windows);
        let report = introspect(&model, windows, cfg.top_k)?;
        let dir = cfg.out_dir.join("introspect").join(&p.scene);
        let mut emit = |name: &str, f: &dyn Fn(BufWriter<File>) -> Result<(), csv::Error>| -> Result<(), CliError> {
            let path = dir.join(name);
            f(create(&path)?).map_err(|e| CliError::Other(format!("{}: {e}", path.display())))?;
            written.push(path);
            Ok(())
        };
        emit("neurons.csv", &|w| write_csv(&report.neurons, w))?;
        emit("gates.csv", &|w| write_csv(&report.gates, w))?;
        emit("attention.csv", &|w| write_csv(&report.attention, w))?;
        eprintln!(
            "{}: {} neuron hits, {} gate hits, {} attention weights",
            p.scene,
            report.neurons.len(),
            report.gates.len(),
            report.attention.len()
        );
    }
    Ok(written)
}

/// Leave-one-out over the evaluation scenes for each variant.
pub fn ablation(cfg: &Resolved, variants: &[u32]) -> Result<Vec<EvalReport>, CliError> {
    cfg.write_to(&cfg.out_dir)?;
    let prepared = prepare(cfg)?;
    let scenes: BTreeMap<String, Vec<PedestrianWindow>> =
        prepared.into_iter().map(|p| (p.scene, p.windows)).collect();
    let reports = ablation_matrix(variants, cfg.preproc, &cfg.train, &scenes, &cfg.eval_scenes(), cfg.jobs)?;
    let path = cfg.out_dir.join(REPORT_NAME);
    write_report_csv(&reports, create(&path)?).map_err(|e| CliError::io(&path, e))?;
    write_report_csv(&reports, std::io::stdout()).map_err(|e| CliError::Other(e.to_string()))?;
    Ok(reports)
}

pub fn synth_data(dir: &Path) -> Result<(), CliError> {
    synth::write_synthetic_dataset(dir).map_err(|e| CliError::io(dir, e))?;
    eprintln!("synthetic scenes written to {}", dir.display());
    Ok(())
}
