//! Teacher-forced training, autoregressive rollout and staged training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{make_batches, random_rotate, MiniBatch, PedestrianWindow, OBS_LEN, PRED_LEN};
use crate::error::{NumericError, TrainError};
use crate::eval::{fad, mad};
use crate::model::{unroll, SrLstm, Teaching, UnrollOptions};
use crate::optim::{adam_step, AdamState, DEFAULT_LEARNING_RATE};
use crate::params::ParamStore;

/// Multiply the learning rate by `gamma` every `every` epochs.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepDecay {
    pub every: usize,
    pub gamma: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub obs_len: usize,
    pub pred_len: usize,
    /// First 1-based window step whose teacher-forced prediction is scored.
    pub loss_start: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub random_rotation: bool,
    /// Stop each epoch after this many batches.
    pub limit_batches: Option<usize>,
    pub lr_decay: Option<StepDecay>,
    /// Trailing share of each training scene's windows held out.
    pub validation_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            learning_rate: DEFAULT_LEARNING_RATE,
            batch_size: 8,
            obs_len: OBS_LEN,
            pred_len: PRED_LEN,
            loss_start: 2,
            grad_clip: 1.0,
            seed: 0,
            random_rotation: true,
            limit_batches: None,
            lr_decay: None,
            validation_fraction: 0.15,
        }
    }
}

impl TrainConfig {
    fn learning_rate_at(&self, epoch: usize) -> f64 {
        match self.lr_decay {
            Some(d) if d.every > 0 => self.learning_rate * d.gamma.powi((epoch / d.every) as i32),
            _ => self.learning_rate,
        }
    }
}

/// Mean squared Euclidean error over the masked-in points.
pub fn l2_loss(predictions: &[[f64; 2]], ground_truth: &[[f64; 2]], mask: &[bool]) -> Result<f64, TrainError> {
    assert_eq!(predictions.len(), ground_truth.len());
    assert_eq!(predictions.len(), mask.len());
    let mut sum = 0.0;
    let mut n = 0usize;
    for ((p, g), &m) in predictions.iter().zip(ground_truth).zip(mask) {
        if m {
            sum += (p[0] - g[0]).powi(2) + (p[1] - g[1]).powi(2);
            n += 1;
        }
    }
    if n == 0 {
        return Err(TrainError::EmptyLossMask);
    }
    Ok(sum / n as f64)
}

/// Teacher-forced loss of a batch; gradients are added to the store.
pub fn loss_and_grads(
    model: &mut SrLstm,
    windows: &[&PedestrianWindow],
    loss_start: usize,
) -> Result<Option<f64>, NumericError> {
    let opts = UnrollOptions {
        loss_start,
        ..UnrollOptions::default()
    };
    let out = unroll(&model.params, &model.config, windows, &opts)?;
    let Some(loss) = out.loss else {
        return Ok(None);
    };
    let value = out.graph.value(loss).data()[0];
    if value.is_finite() {
        let grads = out.graph.backward(loss, 1.0);
        out.graph.accumulate_param_grads(&grads, &mut model.params)?;
    }
    Ok(Some(value))
}

/// Teacher-forced loss without gradients, for gradient checking.
pub fn batch_loss(store: &ParamStore, model: &SrLstm, windows: &[&PedestrianWindow]) -> Result<f64, NumericError> {
    let out = unroll(store, &model.config, windows, &UnrollOptions::default())?;
    Ok(out.loss_value().unwrap_or(0.0))
}

/// One pass over `batches`. Returns the mean batch loss.
pub fn train_epoch(
    model: &mut SrLstm,
    adam: &mut AdamState,
    batches: &[MiniBatch],
    config: &TrainConfig,
    epoch: usize,
) -> Result<f64, TrainError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    let limit = config.limit_batches.unwrap_or(usize::MAX);
    let mut total = 0.0;
    let mut counted = 0;
    for (b, batch) in batches.iter().take(limit).enumerate() {
        let rotated;
        let batch = if config.random_rotation {
            let mut copy = batch.clone();
            random_rotate(&mut copy, rng.gen_range(0.0..std::f64::consts::TAU));
            rotated = copy;
            &rotated
        } else {
            batch
        };
        let refs: Vec<&PedestrianWindow> = batch.windows.iter().collect();
        model.params.zero_grads();
        let Some(loss) = loss_and_grads(model, &refs, config.loss_start)? else {
            continue;
        };
        if !loss.is_finite() {
            return Err(TrainError::NonFiniteLoss { epoch, batch: b });
        }
        model.params.clip_grad_norm(config.grad_clip);
        adam_step(&mut model.params, adam)?;
        total += loss;
        counted += 1;
    }
    Ok(if counted == 0 { 0.0 } else { total / counted as f64 })
}

/// Multi-step predictions for the targets of one window.
#[derive(Clone, Debug, PartialEq)]
pub struct RolloutResult {
    pub ped_ids: Vec<i64>,
    /// Window step of the first prediction (the observation length).
    pub first_step: usize,
    /// Scene-frame predictions, one list of `len − obs_len` points per target.
    pub predictions: Vec<Vec<[f64; 2]>>,
    pub ground_truth: Vec<Vec<[f64; 2]>>,
    /// Model-frame mean squared error per predicted step.
    pub step_losses: Vec<f64>,
}

/// Rolls a batch of windows out together; one result per window.
pub fn rollout_batch(
    model: &SrLstm,
    windows: &[&PedestrianWindow],
    obs_len: usize,
) -> Result<Vec<RolloutResult>, NumericError> {
    let opts = UnrollOptions {
        teaching: Teaching::MultiStep { obs_len },
        loss_start: obs_len + 1,
        record: false,
    };
    let out = unroll(&model.params, &model.config, windows, &opts)?;
    let mut results = Vec::with_capacity(windows.len());
    for (w, win) in windows.iter().enumerate() {
        let base = out.row_offsets[w];
        let mut res = RolloutResult {
            ped_ids: Vec::new(),
            first_step: obs_len,
            predictions: Vec::new(),
            ground_truth: Vec::new(),
            step_losses: (obs_len..win.len())
                .map(|t| out.step_losses[t].unwrap_or(0.0))
                .collect(),
        };
        for p in (0..win.num_pedestrians()).filter(|&p| win.targets[p]) {
            res.ped_ids.push(win.ped_ids[p]);
            res.predictions
                .push((obs_len..win.len()).map(|t| out.predicted_scene[t][base + p]).collect());
            res.ground_truth
                .push((obs_len..win.len()).map(|t| win.scene_xy[t][p]).collect());
        }
        results.push(res);
    }
    Ok(results)
}

pub fn rollout(model: &SrLstm, window: &PedestrianWindow, obs_len: usize) -> Result<RolloutResult, NumericError> {
    Ok(rollout_batch(model, &[window], obs_len)?.remove(0))
}

/// Windows rolled out per forward pass during evaluation.
pub const EVAL_CHUNK: usize = 16;

/// Pools predictions over `windows` and returns `(MAD, FAD)`, or `None`
/// when there is no target.
pub fn rollout_metrics(
    model: &SrLstm,
    windows: &[PedestrianWindow],
    obs_len: usize,
) -> Result<Option<(f64, f64)>, NumericError> {
    let mut preds = Vec::new();
    let mut truth = Vec::new();
    for chunk in windows.chunks(EVAL_CHUNK) {
        let refs: Vec<&PedestrianWindow> = chunk.iter().collect();
        for r in rollout_batch(model, &refs, obs_len)? {
            preds.extend(r.predictions);
            truth.extend(r.ground_truth);
        }
    }
    if preds.is_empty() {
        return Ok(None);
    }
    let m = mad(&preds, &truth).expect("aligned by construction");
    let f = fad(&preds, &truth).expect("aligned by construction");
    Ok(Some((m, f)))
}

/// Splits every scene's windows chronologically; the trailing
/// `fraction` of each scene becomes validation data.
pub fn split_validation(
    per_scene: &[&[PedestrianWindow]],
    fraction: f64,
) -> (Vec<PedestrianWindow>, Vec<PedestrianWindow>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    for windows in per_scene {
        let held = ((windows.len() as f64) * fraction).round() as usize;
        let cut = windows.len() - held.min(windows.len());
        train.extend_from_slice(&windows[..cut]);
        val.extend_from_slice(&windows[cut..]);
    }
    (train, val)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mad: Option<f64>,
    pub val_fad: Option<f64>,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,train_loss,val_MAD,val_FAD";

    pub fn csv_row(&self) -> String {
        let opt = |v: Option<f64>| v.map_or(String::new(), |v| v.to_string());
        format!("{},{},{},{}", self.epoch, self.train_loss, opt(self.val_mad), opt(self.val_fad))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FitReport {
    pub log: Vec<EpochLog>,
    /// Epoch whose parameters were kept.
    pub best_epoch: usize,
    pub best_val_mad: Option<f64>,
    pub adam: AdamState,
}

/// Trains for `config.epochs` epochs and keeps the parameters with the
/// lowest validation MAD (the last epoch when there is no validation data).
/// `on_epoch` sees every epoch; its flag is set when the epoch is the new best.
pub fn fit(
    model: &mut SrLstm,
    train: &[PedestrianWindow],
    val: &[PedestrianWindow],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, bool, &SrLstm),
) -> Result<FitReport, TrainError> {
    if train.is_empty() {
        return Err(TrainError::NoTrainingData);
    }
    let mut adam = AdamState::new(config.learning_rate);
    let mut best: Option<(f64, usize, ParamStore)> = None;
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        adam.learning_rate = config.learning_rate_at(epoch);
        let batches = make_batches(train, config.batch_size, config.seed.wrapping_add(epoch as u64));
        let train_loss = train_epoch(model, &mut adam, &batches, config, epoch)?;
        let metrics = rollout_metrics(model, val, config.obs_len)?;
        let entry = EpochLog {
            epoch: epoch + 1,
            train_loss,
            val_mad: metrics.map(|m| m.0),
            val_fad: metrics.map(|m| m.1),
        };
        let is_best = match (metrics, &best) {
            (Some((m, _)), Some((b, _, _))) => m < *b,
            (Some(_), None) => true,
            (None, _) => false,
        };
        if is_best {
            best = Some((entry.val_mad.unwrap(), epoch + 1, model.params.clone()));
        }
        on_epoch(&entry, is_best, model);
        log.push(entry);
    }
    let (best_val_mad, best_epoch) = match best {
        Some((m, e, params)) => {
            model.params = params;
            (Some(m), e)
        }
        None => (None, config.epochs),
    };
    Ok(FitReport {
        log,
        best_epoch,
        best_val_mad,
        adam,
    })
}

/// Adds one refinement layer on top of a trained model and trains only that
/// layer.
pub fn staged_train(
    model: &mut SrLstm,
    train: &[PedestrianWindow],
    val: &[PedestrianWindow],
    config: &TrainConfig,
    on_epoch: &mut dyn FnMut(&EpochLog, bool, &SrLstm),
) -> Result<FitReport, TrainError> {
    model.add_refinement_layer(config.seed)?;
    fit(model, train, val, config, on_epoch)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{normalize, parse_str, slide_windows, NormalizationMode};
    use crate::model::ModelConfig;
    use crate::refine::RefinementConfig;

    fn line_windows(n_frames: i64) -> Vec<PedestrianWindow> {
        let mut text = String::new();
        for f in 0..n_frames {
            text += &format!("{} 1 {} 1.0\n", f * 10, 0.4 * f as f64);
            text += &format!("{} 2 1.0 {}\n", f * 10, 5.0 - 0.3 * f as f64);
        }
        let scene = parse_str("lines", "mem", &text).unwrap();
        slide_windows(&scene)
            .iter()
            .map(|w| normalize(w, NormalizationMode::Nabs))
            .collect()
    }

    #[test]
    fn l2_loss_cases() {
        assert_eq!(l2_loss(&[[1.0, 2.0]], &[[1.0, 2.0]], &[true]).unwrap(), 0.0);
        assert_eq!(l2_loss(&[[3.0, 4.0]], &[[0.0, 0.0]], &[true]).unwrap(), 25.0);
        assert!(matches!(
            l2_loss(&[[3.0, 4.0]], &[[0.0, 0.0]], &[false]),
            Err(TrainError::EmptyLossMask)
        ));
    }

    #[test]
    fn validation_split_takes_scene_tails() {
        let w = line_windows(40);
        assert_eq!(w.len(), 21);
        let (train, val) = split_validation(&[&w, &w[..10]], 0.15);
        assert_eq!(val.len(), 3 + 2);
        assert_eq!(train.len() + val.len(), 31);
        assert_eq!(val[0].start_frame, w[18].start_frame);
    }

    #[test]
    fn rollout_shapes_and_lstm_degeneracy() {
        let w = line_windows(20);
        let config = ModelConfig {
            refinement: RefinementConfig::vanilla(),
            ..ModelConfig::default()
        };
        let model = SrLstm::new(config, 2).unwrap();
        let r = rollout(&model, &w[0], OBS_LEN).unwrap();
        assert_eq!(r.predictions.len(), 2);
        assert!(r.predictions.iter().all(|p| p.len() == PRED_LEN));
        assert_eq!(r.step_losses.len(), PRED_LEN);
    }

    #[test]
    fn loss_decreases_on_a_tiny_problem() {
        let w = line_windows(24);
        let config = ModelConfig {
            refinement: RefinementConfig {
                iterations: 1,
                ..RefinementConfig::default()
            },
            ..ModelConfig::default()
        };
        let mut model = SrLstm::new(config, 4).unwrap();
        let tc = TrainConfig {
            epochs: 15,
            learning_rate: 0.01,
            random_rotation: false,
            ..TrainConfig::default()
        };
        let report = fit(&mut model, &w, &w[..1], &tc, &mut |_, _, _| {}).unwrap();
        let first = report.log[0].train_loss;
        let last = report.log.last().unwrap().train_loss;
        assert!(last < 0.5 * first, "{first} -> {last}");
        assert!(report.best_val_mad.is_some());
    }
}
