//! Central-difference verification of analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::data::{Normalization, PedestrianWindow};
use crate::error::NumericError;
use crate::model::SrLstm;
use crate::params::ParamStore;
use crate::train::{batch_loss, loss_and_grads};

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    pub eps: f64,
    /// Entries checked per parameter tensor; tensors with fewer entries are
    /// checked exhaustively.
    pub samples_per_param: usize,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            samples_per_param: 12,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error < tolerance
    }
}

/// Compares the gradients stored in `store` against central differences of
/// `loss` over a sampled subset of trainable entries.
///
/// The relative error of one entry is
/// `|analytic − fd| / max(|analytic|, |fd|, 1e-8)`; the report carries the
/// worst entry.
pub fn finite_diff_check<F>(mut loss: F, store: &ParamStore, opts: &GradCheckOptions) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    assert!(opts.eps > 0.0, "eps must be positive");
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut probe = store.clone();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        worst_index: 0,
        analytic: 0.0,
        numeric: 0.0,
        checked: 0,
    };
    let names: Vec<String> = store
        .iter()
        .filter(|(_, e)| e.trainable)
        .map(|(n, _)| n.to_string())
        .collect();
    for name in names {
        let n = store.value(&name).map(|v| v.len()).unwrap_or(0);
        let indices: Vec<usize> = if n <= opts.samples_per_param {
            (0..n).collect()
        } else {
            let mut idx = sample(&mut rng, n, opts.samples_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        for k in indices {
            let original = store.value(&name).expect("listed").data()[k];
            probe.value_mut(&name).expect("listed").data_mut()[k] = original + opts.eps;
            let up = loss(&probe);
            probe.value_mut(&name).expect("listed").data_mut()[k] = original - opts.eps;
            let down = loss(&probe);
            probe.value_mut(&name).expect("listed").data_mut()[k] = original;

            let numeric = (up - down) / (2.0 * opts.eps);
            let analytic = store.grad(&name).expect("listed").data()[k];
            let denom = analytic.abs().max(numeric.abs()).max(1e-8);
            let rel = (analytic - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || !rel.is_finite() {
                report.max_rel_error = if rel.is_finite() { rel } else { f64::INFINITY };
                report.worst_param = name.clone();
                report.worst_index = k;
                report.analytic = analytic;
                report.numeric = numeric;
            }
        }
    }
    report
}

/// Relative-error threshold for a passing check.
pub const TOLERANCE: f64 = 1e-4;

/// A short window of `peds` pedestrians walking through a few metres of
/// space, all within one neighbourhood. The last pedestrian enters one step
/// late, so the masking paths are covered too. Coordinates are used as is.
pub fn fixture_window(peds: usize, steps: usize, seed: u64) -> PedestrianWindow {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let starts: Vec<[f64; 2]> = (0..peds)
        .map(|_| [rng.gen_range(-1.5..1.5), rng.gen_range(-1.5..1.5)])
        .collect();
    let velocities: Vec<[f64; 2]> = (0..peds)
        .map(|_| [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)])
        .collect();
    let late = peds.saturating_sub(1);
    let present: Vec<Vec<bool>> = (0..steps)
        .map(|t| (0..peds).map(|p| !(p == late && peds > 1 && t == 0)).collect())
        .collect();
    let scene_xy: Vec<Vec<[f64; 2]>> = (0..steps)
        .map(|t| {
            (0..peds)
                .map(|p| {
                    if present[t][p] {
                        let wobble = rng.gen_range(-0.05..0.05);
                        [
                            starts[p][0] + velocities[p][0] * t as f64 + wobble,
                            starts[p][1] + velocities[p][1] * t as f64 - wobble,
                        ]
                    } else {
                        [0.0; 2]
                    }
                })
                .collect()
        })
        .collect();
    PedestrianWindow {
        scene: "gradcheck".into(),
        start_frame: 0,
        frame_step: 10,
        ped_ids: (1..=peds as i64).collect(),
        targets: (0..peds).map(|p| (0..steps).all(|t| present[t][p])).collect(),
        model_xy: scene_xy.clone(),
        scene_xy,
        present,
        normalization: Normalization::Identity,
    }
}

/// Checks the gradients of the teacher-forced loss of `model` on `window`.
/// `inject_bug` names a parameter whose analytic gradient is corrupted
/// before the comparison, to exercise the failure path.
pub fn check_model(
    model: &SrLstm,
    window: &PedestrianWindow,
    opts: &GradCheckOptions,
    inject_bug: Option<&str>,
) -> Result<GradCheckReport, NumericError> {
    let mut model = model.clone();
    model.params.zero_grads();
    loss_and_grads(&mut model, &[window], 2)?;
    if let Some(name) = inject_bug {
        let entry = model.params.get_mut(name)?;
        entry.grad.data_mut().iter_mut().for_each(|g| *g = 1.1 * *g + 1e-3);
    }
    let frozen = model.clone();
    let mut failure = None;
    let report = finite_diff_check(
        |store| match batch_loss(store, &frozen, &[window]) {
            Ok(v) => v,
            Err(e) => {
                failure.get_or_insert(e);
                f64::NAN
            }
        },
        &model.params,
        opts,
    );
    match failure {
        Some(e) => Err(e),
        None => Ok(report),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor2;

    fn quadratic_store() -> ParamStore {
        let mut store = ParamStore::new();
        store
            .insert("p", Tensor2::from_vec(1, 4, vec![0.3, -1.2, 2.0, 0.7]).unwrap())
            .unwrap();
        store
            .insert("q", Tensor2::from_vec(2, 1, vec![-0.4, 5.0]).unwrap())
            .unwrap();
        store
    }

    fn half_norm_sq(store: &ParamStore) -> f64 {
        store.iter().map(|(_, e)| 0.5 * e.value.frobenius_sq()).sum()
    }

    fn set_exact_grads(store: &mut ParamStore, factor: f64) {
        for (_, e) in store.iter_mut() {
            e.grad = e.value.scale(factor);
        }
    }

    #[test]
    fn quadratic_is_exact() {
        let mut store = quadratic_store();
        set_exact_grads(&mut store, 1.0);
        let report = finite_diff_check(half_norm_sq, &store, &GradCheckOptions::default());
        assert_eq!(report.checked, 6);
        assert!(report.max_rel_error < 1e-8, "{report:?}");
    }

    #[test]
    fn doubled_gradient_is_detected() {
        let mut store = quadratic_store();
        set_exact_grads(&mut store, 2.0);
        let report = finite_diff_check(half_norm_sq, &store, &GradCheckOptions::default());
        assert!((report.max_rel_error - 0.5).abs() < 1e-6, "{report:?}");
        assert!(!report.passes(1e-4));
    }

    #[test]
    fn frozen_parameters_are_skipped() {
        let mut store = quadratic_store();
        set_exact_grads(&mut store, 1.0);
        store.get_mut("q").unwrap().grad.fill(99.0);
        store.set_trainable("q", false).unwrap();
        let report = finite_diff_check(half_norm_sq, &store, &GradCheckOptions::default());
        assert_eq!(report.checked, 4);
        assert!(report.passes(1e-8));
    }
}
