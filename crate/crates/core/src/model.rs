//! The full predictor: the shared LSTM encoder, state refinement at every
//! time step and the position decoder, unrolled over a batch of windows.
//!
//! Rows of every per-step tensor are the pedestrians of all windows in the
//! batch, window after window. Neighbourhoods never cross windows.

use std::collections::BTreeMap;
use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{NormalizationMode, PedestrianWindow};
use crate::error::{CheckpointError, NumericError};
use crate::graph::{Graph, Var};
use crate::lstm::{self, EmbedActivation, LstmVars, HIDDEN_DIM, INPUT_DIM};
use crate::optim::AdamState;
use crate::params::ParamStore;
use crate::refine::{
    build_neighborhood, refine, register_layer, MessageRecord, NeighborGraph, NeighborhoodShape,
    RefineContext, RefinementConfig, SrVars, StateSource,
};
use crate::tensor::Tensor2;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub refinement: RefinementConfig,
    pub normalization: NormalizationMode,
}

impl ModelConfig {
    fn to_metadata(&self) -> BTreeMap<String, String> {
        let r = &self.refinement;
        let mut m = BTreeMap::new();
        m.insert("iterations".into(), r.iterations.to_string());
        m.insert("neighborhood_size".into(), format!("{:?}", r.neighborhood_size));
        m.insert("shape".into(), format!("{:?}", r.shape).to_lowercase());
        m.insert("motion_gate".into(), r.use_motion_gate.to_string());
        m.insert("attention".into(), r.use_attention.to_string());
        m.insert("state_source".into(), format!("{:?}", r.state_source).to_lowercase());
        m.insert("embed_activation".into(), format!("{:?}", r.embed_activation).to_lowercase());
        m.insert("normalization".into(), format!("{:?}", self.normalization).to_lowercase());
        m
    }

    fn from_metadata(m: &BTreeMap<String, String>) -> Result<Self, CheckpointError> {
        fn get<'a>(m: &'a BTreeMap<String, String>, key: &str) -> Result<&'a str, CheckpointError> {
            m.get(key)
                .map(String::as_str)
                .ok_or_else(|| CheckpointError::Corrupt(format!("missing metadata `{key}`")))
        }
        fn bad(key: &str, v: &str) -> CheckpointError {
            CheckpointError::Corrupt(format!("bad metadata `{key}` = `{v}`"))
        }
        let parse_bool = |key: &str| -> Result<bool, CheckpointError> {
            let v = get(m, key)?;
            v.parse().map_err(|_| bad(key, v))
        };
        let iterations = get(m, "iterations")?;
        let ns = get(m, "neighborhood_size")?;
        let refinement = RefinementConfig {
            iterations: iterations.parse().map_err(|_| bad("iterations", iterations))?,
            neighborhood_size: ns.parse().map_err(|_| bad("neighborhood_size", ns))?,
            shape: match get(m, "shape")? {
                "square" => NeighborhoodShape::Square,
                "disk" => NeighborhoodShape::Disk,
                v => return Err(bad("shape", v)),
            },
            use_motion_gate: parse_bool("motion_gate")?,
            use_attention: parse_bool("attention")?,
            state_source: match get(m, "state_source")? {
                "current" => StateSource::Current,
                "previous" => StateSource::Previous,
                v => return Err(bad("state_source", v)),
            },
            embed_activation: match get(m, "embed_activation")? {
                "relu" => EmbedActivation::Relu,
                "linear" => EmbedActivation::Linear,
                v => return Err(bad("embed_activation", v)),
            },
        };
        let normalization = match get(m, "normalization")? {
            "nabs" => NormalizationMode::Nabs,
            "rela" => NormalizationMode::Rela,
            v => return Err(bad("normalization", v)),
        };
        Ok(Self {
            refinement,
            normalization,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SrLstm {
    pub config: ModelConfig,
    pub params: ParamStore,
}

impl SrLstm {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, NumericError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        lstm::register_params(&mut params, &mut rng)?;
        for l in 0..config.refinement.iterations {
            register_layer(&mut params, l, &config.refinement, &mut rng)?;
        }
        Ok(Self { config, params })
    }

    /// Wraps an existing store after checking that it holds exactly the
    /// tensors `config` needs, with the right shapes. Extra refinement layers
    /// beyond `config.refinement.iterations` are allowed and ignored.
    pub fn from_params(config: ModelConfig, params: ParamStore) -> Result<Self, CheckpointError> {
        let reference = Self::new(config.clone(), 0)?;
        for (name, entry) in reference.params.iter() {
            let found = params
                .get(name)
                .map_err(|_| CheckpointError::Mismatch(format!("missing parameter `{name}`")))?;
            if found.value.shape() != entry.value.shape() {
                return Err(CheckpointError::Mismatch(format!(
                    "`{name}` is {:?}, expected {:?}",
                    found.value.shape(),
                    entry.value.shape()
                )));
            }
        }
        Ok(Self { config, params })
    }

    pub fn iterations(&self) -> usize {
        self.config.refinement.iterations
    }

    /// Freezes every existing parameter and appends one freshly initialised
    /// refinement layer, the only trainable part afterwards.
    pub fn add_refinement_layer(&mut self, seed: u64) -> Result<(), NumericError> {
        let l = self.iterations();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (0x5e11 + l as u64));
        self.params.freeze_all();
        register_layer(&mut self.params, l, &self.config.refinement, &mut rng)?;
        self.config.refinement.iterations += 1;
        Ok(())
    }

    pub fn to_checkpoint(&self, adam: Option<AdamState>) -> Checkpoint {
        Checkpoint {
            metadata: self.config.to_metadata(),
            params: self.params.clone(),
            adam,
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, CheckpointError> {
        let config = ModelConfig::from_metadata(&ck.metadata)?;
        Self::from_params(config, ck.params.clone())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Teaching {
    /// Ground truth is the input at every step.
    SingleStep,
    /// Ground truth for the first `obs_len` steps, then the model's own
    /// predictions. Pedestrians that are not targets leave the scene once the
    /// observation ends.
    MultiStep { obs_len: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct UnrollOptions {
    pub teaching: Teaching,
    /// First 1-based window step whose prediction enters the loss.
    pub loss_start: usize,
    /// Keep per-step hidden states and refinement messages.
    pub record: bool,
}

impl Default for UnrollOptions {
    fn default() -> Self {
        Self {
            teaching: Teaching::SingleStep,
            loss_start: 2,
            record: false,
        }
    }
}

/// Hidden states and messages of one time step of one unroll.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub t: usize,
    pub active: Vec<bool>,
    /// Final (refined) hidden states, one row per batch row.
    pub hidden: Tensor2,
    /// Indices in `messages` refer to batch rows.
    pub messages: Vec<MessageRecord>,
}

pub struct Unrolled {
    pub graph: Graph,
    /// Mean squared error over all (target, step) pairs in the loss range,
    /// in the model frame. `None` when the range holds no pair.
    pub loss: Option<Var>,
    pub loss_pairs: usize,
    /// Per-step mean squared error, indexed by the predicted step.
    pub step_losses: Vec<Option<f64>>,
    /// `[t][row]`: prediction for step `t` (made at step `t − 1`); row 0 of
    /// every step is unused for `t = 0`.
    pub predicted_model: Vec<Vec<[f64; 2]>>,
    pub predicted_scene: Vec<Vec<[f64; 2]>>,
    /// Window `w` owns rows `row_offsets[w]..row_offsets[w + 1]`.
    pub row_offsets: Vec<usize>,
    pub trace: Vec<StepTrace>,
}

impl Unrolled {
    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.graph.value(l).data()[0])
    }
}

/// Runs the model over every step of a batch of equally long windows.
pub fn unroll(
    store: &ParamStore,
    config: &ModelConfig,
    windows: &[&PedestrianWindow],
    opts: &UnrollOptions,
) -> Result<Unrolled, NumericError> {
    let rc = &config.refinement;
    let steps = windows.first().map_or(0, |w| w.len());
    assert!(windows.iter().all(|w| w.len() == steps), "windows differ in length");
    let mut g = Graph::new();
    let lv = LstmVars::bind(&mut g, store)?;
    let layers = (0..rc.iterations)
        .map(|l| SrVars::bind(&mut g, store, l, rc))
        .collect::<Result<Vec<_>, _>>()?;

    let mut row_offsets = vec![0];
    let mut owner = Vec::new();
    for (w, win) in windows.iter().enumerate() {
        owner.extend((0..win.num_pedestrians()).map(|p| (w, p)));
        row_offsets.push(owner.len());
    }
    let rows = owner.len();
    let obs_len = match opts.teaching {
        Teaching::SingleStep => steps,
        Teaching::MultiStep { obs_len } => obs_len,
    };
    let is_target: Vec<bool> = owner.iter().map(|&(w, p)| windows[w].targets[p]).collect();

    let zeros = g.constant(Tensor2::zeros(rows, HIDDEN_DIM));
    let (mut h, mut c) = (zeros, zeros);
    let mut predicted_model = vec![vec![[0.0; 2]; rows]; steps];
    let mut predicted_scene = vec![vec![[0.0; 2]; rows]; steps];
    let mut step_losses = vec![None; steps];
    let mut loss_terms = Vec::new();
    let mut loss_pairs = 0;
    let mut trace = Vec::new();

    for t in 0..steps.saturating_sub(1) {
        let fed = t >= obs_len;
        let mut active = vec![false; rows];
        let mut input = vec![0.0; rows * INPUT_DIM];
        let mut positions = vec![[0.0; 2]; rows];
        for (r, &(w, p)) in owner.iter().enumerate() {
            let win = windows[w];
            if fed {
                if is_target[r] {
                    active[r] = true;
                    input[2 * r..2 * r + 2].copy_from_slice(&predicted_model[t][r]);
                    positions[r] = predicted_scene[t][r];
                }
            } else if win.present[t][p] {
                active[r] = true;
                input[2 * r..2 * r + 2].copy_from_slice(&win.model_xy[t][p]);
                positions[r] = win.scene_xy[t][p];
            }
        }

        let x = g.constant(Tensor2::from_raw(rows, INPUT_DIM, input));
        let e = lstm::embed(&mut g, &lv, x, rc.embed_activation);
        let sv = lstm::step(&mut g, &lv, e, h, c);

        let parts: Vec<NeighborGraph> = (0..windows.len())
            .map(|w| {
                let span = row_offsets[w]..row_offsets[w + 1];
                build_neighborhood(
                    &positions[span.clone()],
                    &active[span],
                    rc.neighborhood_size,
                    rc.shape,
                )
            })
            .collect();
        let graph = NeighborGraph::block_diagonal(&parts);
        let ctx = RefineContext {
            config: rc,
            positions: &positions,
            graph: &graph,
            out_gate: sv.o,
            previous_hidden: Some(h),
        };
        let mut messages = Vec::new();
        let (c_new, h_new) = refine(
            &mut g,
            &layers,
            &ctx,
            sv.h,
            sv.c,
            opts.record.then_some(&mut messages),
        );
        if active.iter().all(|&a| a) {
            h = h_new;
            c = c_new;
        } else {
            let mask: Rc<[bool]> = active.clone().into();
            h = g.select_rows(h_new, h, mask.clone());
            c = g.select_rows(c_new, c, mask);
        }
        if opts.record {
            trace.push(StepTrace {
                t,
                active: active.clone(),
                hidden: g.value(h).clone(),
                messages,
            });
        }

        let y = lstm::project(&mut g, &lv, h);
        let yv = g.value(y);
        for (r, &(w, p)) in owner.iter().enumerate() {
            if !active[r] {
                continue;
            }
            let pred = [yv.get(r, 0), yv.get(r, 1)];
            predicted_model[t + 1][r] = pred;
            predicted_scene[t + 1][r] = windows[w].to_scene(p, pred, positions[r]);
        }

        let s = t + 1;
        let mut target = vec![0.0; rows * INPUT_DIM];
        let mut weights = vec![0.0; rows];
        let mut n = 0;
        for (r, &(w, p)) in owner.iter().enumerate() {
            if is_target[r] {
                target[2 * r..2 * r + 2].copy_from_slice(&windows[w].model_xy[s][p]);
                weights[r] = 1.0;
                n += 1;
            }
        }
        if n == 0 {
            continue;
        }
        let term = g.weighted_sq_error(y, Tensor2::from_raw(rows, INPUT_DIM, target), weights);
        step_losses[s] = Some(g.value(term).data()[0] / n as f64);
        if s + 1 >= opts.loss_start {
            loss_terms.push(term);
            loss_pairs += n;
        }
    }

    let loss = (loss_pairs > 0).then(|| {
        let total = g.sum(&loss_terms);
        g.scale(total, 1.0 / loss_pairs as f64)
    });
    Ok(Unrolled {
        graph: g,
        loss,
        loss_pairs,
        step_losses,
        predicted_model,
        predicted_scene,
        row_offsets,
        trace,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, slide_windows, parse_str, WINDOW_LEN};

    pub(crate) fn toy_window(peds: usize, mode: NormalizationMode) -> PedestrianWindow {
        let mut text = String::new();
        for f in 0..WINDOW_LEN as i64 {
            for p in 0..peds as i64 {
                let x = 0.3 * f as f64 + p as f64 * 0.9 + 0.05 * ((f * (p + 1)) as f64).sin();
                let y = 0.1 * p as f64 * f as f64 - 0.4 * p as f64;
                text += &format!("{} {} {x} {y}\n", f * 10, p + 1);
            }
        }
        let scene = parse_str("toy", "mem", &text).unwrap();
        normalize(&slide_windows(&scene)[0], mode)
    }

    #[test]
    fn checkpoint_round_trip_restores_config() {
        let config = ModelConfig {
            refinement: RefinementConfig {
                iterations: 1,
                use_attention: false,
                state_source: StateSource::Previous,
                ..RefinementConfig::default()
            },
            normalization: NormalizationMode::Rela,
        };
        let model = SrLstm::new(config, 3).unwrap();
        let back = SrLstm::from_checkpoint(&model.to_checkpoint(None)).unwrap();
        assert_eq!(back, model);
    }

    #[test]
    fn mismatched_config_is_rejected() {
        let model = SrLstm::new(ModelConfig::default(), 3).unwrap();
        let mut wanted = ModelConfig::default();
        wanted.refinement.iterations = 3;
        assert!(matches!(
            SrLstm::from_params(wanted, model.params.clone()),
            Err(CheckpointError::Mismatch(_))
        ));
        let mut fewer = ModelConfig::default();
        fewer.refinement.iterations = 1;
        assert!(SrLstm::from_params(fewer, model.params).is_ok());
    }

    #[test]
    fn staged_layer_freezes_the_base() {
        let mut config = ModelConfig::default();
        config.refinement.iterations = 1;
        let mut model = SrLstm::new(config, 1).unwrap();
        model.add_refinement_layer(1).unwrap();
        assert_eq!(model.iterations(), 2);
        for (name, entry) in model.params.iter() {
            assert_eq!(entry.trainable, name.starts_with("sr1."), "{name}");
        }
    }

    #[test]
    fn zero_decoder_predicts_origin() {
        let w = toy_window(3, NormalizationMode::Nabs);
        let mut model = SrLstm::new(ModelConfig::default(), 5).unwrap();
        model.params.value_mut(lstm::W_P).unwrap().fill(0.0);
        let out = unroll(&model.params, &model.config, &[&w], &UnrollOptions::default()).unwrap();
        assert_eq!(out.predicted_model[1][0], [0.0, 0.0]);
        // loss = mean squared model-frame norm over steps 2..20
        let mut sum = 0.0;
        for t in 1..WINDOW_LEN {
            for p in 0..3 {
                let v = w.model_xy[t][p];
                sum += v[0] * v[0] + v[1] * v[1];
            }
        }
        let expect = sum / (3.0 * (WINDOW_LEN - 1) as f64);
        assert!((out.loss_value().unwrap() - expect).abs() < 1e-12);
        assert_eq!(out.loss_pairs, 3 * (WINDOW_LEN - 1));
    }

    #[test]
    fn ground_truth_rollout_reproduces_single_step() {
        let w = toy_window(3, NormalizationMode::Nabs);
        let model = SrLstm::new(ModelConfig::default(), 5).unwrap();
        let single = unroll(&model.params, &model.config, &[&w], &UnrollOptions::default()).unwrap();
        let debug = UnrollOptions {
            teaching: Teaching::MultiStep { obs_len: WINDOW_LEN },
            ..UnrollOptions::default()
        };
        let multi = unroll(&model.params, &model.config, &[&w], &debug).unwrap();
        assert_eq!(single.loss_value(), multi.loss_value());
        assert_eq!(single.step_losses, multi.step_losses);
    }
}
