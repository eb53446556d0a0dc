//! Displacement metrics, configuration presets, leave-one-out runs and the
//! ablation report.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{
    frame_stride, locate_scene, normalize, parse_dataset, resample, slide_windows, NormalizationMode,
    PedestrianWindow,
};
use crate::error::{EvalError, ExperimentError};
use crate::model::{ModelConfig, SrLstm};
use crate::refine::{RefinementConfig, StateSource};
use crate::train::{fit, rollout_metrics, split_validation, staged_train, EpochLog, TrainConfig};

fn check_aligned(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<(), EvalError> {
    if pred.len() != gt.len() {
        return Err(EvalError::Length(pred.len(), gt.len()));
    }
    if pred.is_empty() {
        return Err(EvalError::NoTargets);
    }
    for (p, g) in pred.iter().zip(gt) {
        if p.len() != g.len() {
            return Err(EvalError::Length(p.len(), g.len()));
        }
        if p.is_empty() {
            return Err(EvalError::NoTargets);
        }
    }
    Ok(())
}

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Mean Euclidean distance over every (pedestrian, predicted step).
pub fn mad(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<f64, EvalError> {
    check_aligned(pred, gt)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, g) in pred.iter().zip(gt) {
        for (&a, &b) in p.iter().zip(g) {
            sum += dist(a, b);
            n += 1;
        }
    }
    Ok(sum / n as f64)
}

/// Mean Euclidean distance at the last predicted step.
pub fn fad(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> Result<f64, EvalError> {
    check_aligned(pred, gt)?;
    let sum: f64 = pred
        .iter()
        .zip(gt)
        .map(|(p, g)| dist(*p.last().unwrap(), *g.last().unwrap()))
        .sum();
    Ok(sum / pred.len() as f64)
}

/// One row of the ablation table. Id 0 is the plain LSTM.
pub fn variant_config(id: u32) -> Result<RefinementConfig, EvalError> {
    let (mg, pa, ns, l, source) = match id {
        0 => return Ok(RefinementConfig::vanilla()),
        1 => (false, false, 2.0, 1, StateSource::Current),
        2 => (false, false, 10.0, 1, StateSource::Current),
        3 => (true, false, 10.0, 1, StateSource::Current),
        4 => (false, true, 10.0, 1, StateSource::Current),
        5 => (true, true, 10.0, 1, StateSource::Current),
        6 => (true, true, 2.0, 1, StateSource::Current),
        7 => (true, true, 10.0, 2, StateSource::Current),
        8 => (true, true, 10.0, 3, StateSource::Current),
        9 => (true, true, 10.0, 1, StateSource::Previous),
        other => return Err(EvalError::UnknownVariant(other)),
    };
    Ok(RefinementConfig {
        iterations: l,
        neighborhood_size: ns,
        use_motion_gate: mg,
        use_attention: pa,
        state_source: source,
        ..RefinementConfig::default()
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Preprocessing {
    pub normalization: NormalizationMode,
    /// Resample the ETH-univ recording every 6 frames instead of 10.
    pub eth_univ_correction: bool,
    pub random_rotation: bool,
}

impl Default for Preprocessing {
    fn default() -> Self {
        preproc_config(4).unwrap()
    }
}

/// Rows of the preprocessing table.
pub fn preproc_config(id: u32) -> Result<Preprocessing, EvalError> {
    let (normalization, euf, rr) = match id {
        1 => (NormalizationMode::Rela, false, false),
        2 => (NormalizationMode::Nabs, false, false),
        3 => (NormalizationMode::Nabs, true, false),
        4 => (NormalizationMode::Nabs, true, true),
        other => return Err(EvalError::UnknownPreproc(other)),
    };
    Ok(Preprocessing {
        normalization,
        eth_univ_correction: euf,
        random_rotation: rr,
    })
}

/// Parses, resamples, windows and normalizes one scene.
pub fn load_scene_windows(
    root: &Path,
    scene: &str,
    preproc: &Preprocessing,
) -> Result<Vec<PedestrianWindow>, ExperimentError> {
    let path = locate_scene(root, scene).ok_or_else(|| EvalError::MissingDataset(scene.to_string()))?;
    let mut parsed = parse_dataset(&path)?;
    parsed.name = scene.to_string();
    let coarse = resample(&parsed, frame_stride(scene, preproc.eth_univ_correction))?;
    Ok(slide_windows(&coarse)
        .iter()
        .map(|w| normalize(w, preproc.normalization))
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneMetrics {
    pub scene: String,
    pub mad: f64,
    pub fad: f64,
    pub windows: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub variant: String,
    /// MG, PA, NS, L, C/P and preprocessing, for labelling outputs.
    pub fingerprint: String,
    pub scenes: Vec<SceneMetrics>,
}

impl EvalReport {
    /// Unweighted mean of the per-scene values.
    pub fn average(&self) -> Option<(f64, f64)> {
        if self.scenes.is_empty() {
            return None;
        }
        let n = self.scenes.len() as f64;
        Some((
            self.scenes.iter().map(|s| s.mad).sum::<f64>() / n,
            self.scenes.iter().map(|s| s.fad).sum::<f64>() / n,
        ))
    }
}

pub const REPORT_HEADER: &str = "variant_id,scene,MAD,FAD";

/// One line per (variant, scene) plus an `AVG` line per variant.
pub fn write_report_csv<W: Write>(reports: &[EvalReport], mut w: W) -> std::io::Result<()> {
    writeln!(w, "{REPORT_HEADER}")?;
    for r in reports {
        for s in &r.scenes {
            writeln!(w, "{},{},{:.6},{:.6}", r.variant, s.scene, s.mad, s.fad)?;
        }
        if let Some((m, f)) = r.average() {
            writeln!(w, "{},AVG,{:.6},{:.6}", r.variant, m, f)?;
        }
    }
    Ok(())
}

pub fn fingerprint(model: &ModelConfig, preproc: &Preprocessing) -> String {
    let r = &model.refinement;
    format!(
        "MG={} PA={} NS={} L={} {} {:?}{}{}",
        u8::from(r.use_motion_gate),
        u8::from(r.use_attention),
        r.neighborhood_size,
        r.iterations,
        match r.state_source {
            StateSource::Current => "C",
            StateSource::Previous => "P",
        },
        preproc.normalization,
        if preproc.eth_univ_correction { "+EUf" } else { "" },
        if preproc.random_rotation { "+RR" } else { "" },
    )
}

/// Everything needed to train and evaluate one configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct Experiment {
    pub label: String,
    pub model: ModelConfig,
    pub preproc: Preprocessing,
    pub train: TrainConfig,
    /// Train refinement layers beyond the first one at a time, each on top
    /// of the frozen previous model.
    pub staged: bool,
}

impl Experiment {
    pub fn from_variant(id: u32, preproc: Preprocessing, train: TrainConfig) -> Result<Self, EvalError> {
        let refinement = variant_config(id)?;
        Ok(Self {
            label: if id == 0 { "V-LSTM".into() } else { id.to_string() },
            model: ModelConfig {
                refinement,
                normalization: preproc.normalization,
            },
            train: TrainConfig {
                random_rotation: preproc.random_rotation,
                ..train
            },
            preproc,
            staged: true,
        })
    }
}

/// Trains a model for `exp` on the given scenes' windows.
pub fn train_experiment(
    exp: &Experiment,
    train_scenes: &[&[PedestrianWindow]],
    on_epoch: &mut dyn FnMut(&EpochLog, bool, &SrLstm),
) -> Result<SrLstm, ExperimentError> {
    let (train, val) = split_validation(train_scenes, exp.train.validation_fraction);
    let target_l = exp.model.refinement.iterations;
    let first_l = if exp.staged { target_l.min(1) } else { target_l };
    let mut config = exp.model.clone();
    config.refinement.iterations = first_l;
    let mut model = SrLstm::new(config, exp.train.seed)?;
    fit(&mut model, &train, &val, &exp.train, on_epoch)?;
    while model.iterations() < target_l {
        staged_train(&mut model, &train, &val, &exp.train, on_epoch)?;
    }
    Ok(model)
}

pub fn evaluate_scene(model: &SrLstm, scene: &str, windows: &[PedestrianWindow], obs_len: usize) -> Result<SceneMetrics, ExperimentError> {
    let (mad, fad) = rollout_metrics(model, windows, obs_len)?.ok_or(EvalError::NoTargets)?;
    Ok(SceneMetrics {
        scene: scene.to_string(),
        mad,
        fad,
        windows: windows.len(),
    })
}

/// For each scene in `test_scenes`, trains on every other scene of
/// `scenes` and evaluates on the held-out one. Folds run on up to `jobs`
/// threads; the report does not depend on `jobs`.
pub fn leave_one_out(
    exp: &Experiment,
    scenes: &BTreeMap<String, Vec<PedestrianWindow>>,
    test_scenes: &[&str],
    jobs: usize,
) -> Result<EvalReport, ExperimentError> {
    for s in test_scenes {
        if !scenes.contains_key(*s) {
            return Err(EvalError::MissingDataset(s.to_string()).into());
        }
    }
    let fold = |test: &str| -> Result<SceneMetrics, ExperimentError> {
        let train: Vec<&[PedestrianWindow]> = scenes
            .iter()
            .filter(|(name, _)| name.as_str() != test)
            .map(|(_, w)| w.as_slice())
            .collect();
        let model = train_experiment(exp, &train, &mut |_, _, _| {})?;
        evaluate_scene(&model, test, &scenes[test], exp.train.obs_len)
    };
    let mut results: Vec<Option<Result<SceneMetrics, ExperimentError>>> =
        test_scenes.iter().map(|_| None).collect();
    let jobs = jobs.max(1);
    for chunk_start in (0..test_scenes.len()).step_by(jobs) {
        let end = (chunk_start + jobs).min(test_scenes.len());
        std::thread::scope(|s| {
            let handles: Vec<_> = (chunk_start..end)
                .map(|k| {
                    let fold = &fold;
                    let name = test_scenes[k];
                    s.spawn(move || fold(name))
                })
                .collect();
            for (k, h) in (chunk_start..end).zip(handles) {
                results[k] = Some(h.join().expect("fold panicked"));
            }
        });
    }
    let scenes = results
        .into_iter()
        .map(|r| r.expect("every fold ran"))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(EvalReport {
        variant: exp.label.clone(),
        fingerprint: fingerprint(&exp.model, &exp.preproc),
        scenes,
    })
}

/// Runs `leave_one_out` for each variant id (0 is the plain LSTM).
pub fn ablation_matrix(
    variant_ids: &[u32],
    preproc: Preprocessing,
    train: &TrainConfig,
    scenes: &BTreeMap<String, Vec<PedestrianWindow>>,
    test_scenes: &[&str],
    jobs: usize,
) -> Result<Vec<EvalReport>, ExperimentError> {
    variant_ids
        .iter()
        .map(|&id| {
            let exp = Experiment::from_variant(id, preproc, train.clone())?;
            leave_one_out(&exp, scenes, test_scenes, jobs)
        })
        .collect()
}
