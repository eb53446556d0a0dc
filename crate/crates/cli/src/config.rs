//! Run configuration: a flat TOML file, overridden by command-line flags,
//! resolved into concrete settings and echoed next to every run's outputs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use srlstm::data::{NormalizationMode, SCENES};
use srlstm::eval::{preproc_config, variant_config, Preprocessing};
use srlstm::lstm::EmbedActivation;
use srlstm::model::ModelConfig;
use srlstm::refine::{NeighborhoodShape, StateSource};
use srlstm::train::{StepDecay, TrainConfig};

use crate::error::CliError;

pub const DATA_ROOT_ENV: &str = "SRLSTM_DATA_ROOT";
pub const RESOLVED_NAME: &str = "config.toml";

/// Every key is optional; anything unset keeps its default. Presets
/// (`variant`, `preproc`) are applied first and the individual keys override
/// them.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data_root: Option<PathBuf>,
    pub cache_dir: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub scenes: Option<Vec<String>>,
    pub test_scene: Option<String>,

    pub variant: Option<u32>,
    pub preproc: Option<u32>,

    pub iterations: Option<usize>,
    pub neighborhood_size: Option<f64>,
    pub shape: Option<NeighborhoodShape>,
    pub motion_gate: Option<bool>,
    pub attention: Option<bool>,
    pub state_source: Option<StateSource>,
    pub embed_activation: Option<EmbedActivation>,

    pub normalization: Option<NormalizationMode>,
    pub eth_univ_correction: Option<bool>,
    pub random_rotation: Option<bool>,

    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub obs_len: Option<usize>,
    pub pred_len: Option<usize>,
    pub loss_start: Option<usize>,
    pub grad_clip: Option<f64>,
    pub seed: Option<u64>,
    pub limit_batches: Option<usize>,
    pub lr_decay_every: Option<usize>,
    pub lr_decay_gamma: Option<f64>,
    pub validation_fraction: Option<f64>,
    pub staged: Option<bool>,

    pub jobs: Option<usize>,
    pub top_k: Option<usize>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|_| CliError::Missing(path.to_path_buf()))?;
        toml::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))
    }

    /// Keys set in `other` win.
    pub fn merge(self, other: RunConfig) -> RunConfig {
        macro_rules! pick {
            ($($f:ident),*) => { RunConfig { $($f: other.$f.or(self.$f)),* } };
        }
        pick!(
            data_root, cache_dir, out_dir, checkpoint, scenes, test_scene, variant, preproc, iterations,
            neighborhood_size, shape, motion_gate, attention, state_source, embed_activation, normalization,
            eth_univ_correction, random_rotation, epochs, learning_rate, batch_size, obs_len, pred_len,
            loss_start, grad_clip, seed, limit_batches, lr_decay_every, lr_decay_gamma, validation_fraction,
            staged, jobs, top_k
        )
    }

    /// True when any key describing the network was given.
    fn sets_model(&self) -> bool {
        self.variant.is_some()
            || self.iterations.is_some()
            || self.neighborhood_size.is_some()
            || self.shape.is_some()
            || self.motion_gate.is_some()
            || self.attention.is_some()
            || self.state_source.is_some()
            || self.embed_activation.is_some()
            || self.normalization.is_some()
            || self.preproc.is_some()
    }

    pub fn resolve(&self) -> Result<Resolved, CliError> {
        let variant = self.variant.unwrap_or(7);
        let mut r = variant_config(variant).map_err(|e| CliError::Config(e.to_string()))?;
        let mut pre: Preprocessing =
            preproc_config(self.preproc.unwrap_or(4)).map_err(|e| CliError::Config(e.to_string()))?;
        if let Some(v) = self.iterations {
            r.iterations = v;
        }
        if let Some(v) = self.neighborhood_size {
            r.neighborhood_size = v;
        }
        if let Some(v) = self.shape {
            r.shape = v;
        }
        if let Some(v) = self.motion_gate {
            r.use_motion_gate = v;
        }
        if let Some(v) = self.attention {
            r.use_attention = v;
        }
        if let Some(v) = self.state_source {
            r.state_source = v;
        }
        if let Some(v) = self.embed_activation {
            r.embed_activation = v;
        }
        if let Some(v) = self.normalization {
            pre.normalization = v;
        }
        if let Some(v) = self.eth_univ_correction {
            pre.eth_univ_correction = v;
        }
        if let Some(v) = self.random_rotation {
            pre.random_rotation = v;
        }
        if !(r.neighborhood_size > 0.0) {
            return Err(CliError::Config("neighborhood_size must be positive".into()));
        }

        let d = TrainConfig::default();
        let lr_decay = match (self.lr_decay_every, self.lr_decay_gamma) {
            (Some(every), Some(gamma)) => Some(StepDecay { every, gamma }),
            (None, None) => None,
            _ => {
                return Err(CliError::Config(
                    "lr_decay_every and lr_decay_gamma must be given together".into(),
                ))
            }
        };
        let train = TrainConfig {
            epochs: self.epochs.unwrap_or(d.epochs),
            learning_rate: self.learning_rate.unwrap_or(d.learning_rate),
            batch_size: self.batch_size.unwrap_or(d.batch_size),
            obs_len: self.obs_len.unwrap_or(d.obs_len),
            pred_len: self.pred_len.unwrap_or(d.pred_len),
            loss_start: self.loss_start.unwrap_or(d.loss_start),
            grad_clip: self.grad_clip.unwrap_or(d.grad_clip),
            seed: self.seed.unwrap_or(d.seed),
            random_rotation: pre.random_rotation,
            limit_batches: self.limit_batches,
            lr_decay,
            validation_fraction: self.validation_fraction.unwrap_or(d.validation_fraction),
        };
        if train.batch_size == 0 {
            return Err(CliError::Config("batch_size must be positive".into()));
        }
        if train.obs_len == 0 || train.obs_len + train.pred_len != srlstm::data::WINDOW_LEN {
            return Err(CliError::Config(format!(
                "obs_len + pred_len must equal the window length {}",
                srlstm::data::WINDOW_LEN
            )));
        }

        let scenes = self
            .scenes
            .clone()
            .unwrap_or_else(|| SCENES.iter().map(|s| s.name.to_string()).collect());
        if let Some(t) = &self.test_scene {
            if !scenes.contains(t) {
                return Err(CliError::Config(format!("test_scene `{t}` is not in scenes")));
            }
        }
        let out_dir = self.out_dir.clone().unwrap_or_else(|| PathBuf::from("runs"));
        Ok(Resolved {
            data_root: self
                .data_root
                .clone()
                .or_else(|| std::env::var_os(DATA_ROOT_ENV).map(PathBuf::from)),
            cache_dir: self.cache_dir.clone().unwrap_or_else(|| out_dir.join("cache")),
            checkpoint: self.checkpoint.clone(),
            scenes,
            test_scene: self.test_scene.clone(),
            variant,
            model: ModelConfig {
                refinement: r,
                normalization: pre.normalization,
            },
            model_given: self.sets_model(),
            preproc: pre,
            train,
            staged: self.staged.unwrap_or(true),
            jobs: self.jobs.unwrap_or(1).max(1),
            top_k: self.top_k.unwrap_or(srlstm::introspect::DEFAULT_TOP_K),
            out_dir,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Resolved {
    pub data_root: Option<PathBuf>,
    pub cache_dir: PathBuf,
    pub out_dir: PathBuf,
    pub checkpoint: Option<PathBuf>,
    pub scenes: Vec<String>,
    pub test_scene: Option<String>,
    pub variant: u32,
    pub model: ModelConfig,
    /// Whether the network was described explicitly, as opposed to taken
    /// from a checkpoint.
    pub model_given: bool,
    pub preproc: Preprocessing,
    pub train: TrainConfig,
    pub staged: bool,
    pub jobs: usize,
    pub top_k: usize,
}

impl Resolved {
    pub fn data_root(&self) -> Result<&Path, CliError> {
        self.data_root.as_deref().ok_or_else(|| {
            CliError::Config(format!("no dataset root: set data_root, --data-root or {DATA_ROOT_ENV}"))
        })
    }

    /// Scenes a model is trained on: all of them except the held-out one.
    pub fn train_scenes(&self) -> Vec<&str> {
        self.scenes
            .iter()
            .filter(|s| Some(*s) != self.test_scene.as_ref())
            .map(String::as_str)
            .collect()
    }

    /// Scenes evaluated: the held-out one if given, else every scene.
    pub fn eval_scenes(&self) -> Vec<&str> {
        match &self.test_scene {
            Some(t) => vec![t.as_str()],
            None => self.scenes.iter().map(String::as_str).collect(),
        }
    }

    /// Fully explicit form; loading it back resolves to the same run.
    pub fn to_run_config(&self) -> RunConfig {
        let r = &self.model.refinement;
        RunConfig {
            data_root: self.data_root.clone(),
            cache_dir: Some(self.cache_dir.clone()),
            out_dir: Some(self.out_dir.clone()),
            checkpoint: self.checkpoint.clone(),
            scenes: Some(self.scenes.clone()),
            test_scene: self.test_scene.clone(),
            variant: Some(self.variant),
            preproc: None,
            iterations: Some(r.iterations),
            neighborhood_size: Some(r.neighborhood_size),
            shape: Some(r.shape),
            motion_gate: Some(r.use_motion_gate),
            attention: Some(r.use_attention),
            state_source: Some(r.state_source),
            embed_activation: Some(r.embed_activation),
            normalization: Some(self.preproc.normalization),
            eth_univ_correction: Some(self.preproc.eth_univ_correction),
            random_rotation: Some(self.preproc.random_rotation),
            epochs: Some(self.train.epochs),
            learning_rate: Some(self.train.learning_rate),
            batch_size: Some(self.train.batch_size),
            obs_len: Some(self.train.obs_len),
            pred_len: Some(self.train.pred_len),
            loss_start: Some(self.train.loss_start),
            grad_clip: Some(self.train.grad_clip),
            seed: Some(self.train.seed),
            limit_batches: self.train.limit_batches,
            lr_decay_every: self.train.lr_decay.map(|d| d.every),
            lr_decay_gamma: self.train.lr_decay.map(|d| d.gamma),
            validation_fraction: Some(self.train.validation_fraction),
            staged: Some(self.staged),
            jobs: Some(self.jobs),
            top_k: Some(self.top_k),
        }
    }

    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, CliError> {
        std::fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
        let path = dir.join(RESOLVED_NAME);
        let text = toml::to_string(&self.to_run_config()).map_err(|e| CliError::Config(e.to_string()))?;
        std::fs::write(&path, text).map_err(|e| CliError::io(&path, e))?;
        Ok(path)
    }
}
