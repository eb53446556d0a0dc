#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srlstm::data::{Normalization, PedestrianWindow};
use srlstm::lstm::{self, EmbedActivation, LstmState, EMBED_DIM, HIDDEN_DIM};
use srlstm::model::{ModelConfig, SrLstm};
use srlstm::refine::{param_name, register_layer, NeighborhoodShape, RefinementConfig, StateSource};
use srlstm::ParamStore;

/// A refinement store whose biases are non-zero too.
pub fn refinement_store(config: &RefinementConfig, layers: usize, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    for l in 0..layers {
        register_layer(&mut store, l, config, &mut rng).unwrap();
        for field in ["b_r", "b_m"] {
            if let Ok(b) = store.value_mut(&param_name(l, field)) {
                b.data_mut().iter_mut().for_each(|v| *v = rng.gen_range(-0.5..0.5));
            }
        }
    }
    store
}

pub struct Instance {
    pub states: Vec<LstmState>,
    pub previous: Vec<Vec<f64>>,
    pub positions: Vec<[f64; 2]>,
    pub present: Vec<bool>,
}

/// `n` pedestrians in a 16 m box (some fall outside each other's
/// neighbourhood) with one of them absent when `n > 3`.
pub fn random_instance(n: usize, rng: &mut ChaCha8Rng) -> Instance {
    let vec = |rng: &mut ChaCha8Rng, scale: f64| (0..HIDDEN_DIM).map(|_| rng.gen_range(-scale..scale)).collect::<Vec<_>>();
    let states = (0..n)
        .map(|_| LstmState {
            h: vec(rng, 0.9),
            c: vec(rng, 2.0),
        })
        .collect();
    let previous = (0..n).map(|_| vec(rng, 0.9)).collect();
    let positions = (0..n)
        .map(|_| [rng.gen_range(-8.0..8.0), rng.gen_range(-8.0..8.0)])
        .collect();
    let absent = if n > 3 { Some(rng.gen_range(0..n)) } else { None };
    let present = (0..n).map(|i| Some(i) != absent).collect();
    Instance {
        states,
        previous,
        positions,
        present,
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn at(store: &ParamStore, layer: usize, field: &str, r: usize, c: usize) -> f64 {
    store.value(&param_name(layer, field)).unwrap().get(r, c)
}

fn neighbours(config: &RefinementConfig, positions: &[[f64; 2]], present: &[bool], i: usize) -> Vec<usize> {
    (0..positions.len())
        .filter(|&j| j != i && present[i] && present[j])
        .filter(|&j| {
            let dx = positions[i][0] - positions[j][0];
            let dy = positions[i][1] - positions[j][1];
            match config.shape {
                NeighborhoodShape::Square => dx.abs().max(dy.abs()) <= config.neighborhood_size,
                NeighborhoodShape::Disk => (dx * dx + dy * dy).sqrt() <= config.neighborhood_size,
            }
        })
        .collect()
}

/// One refinement iteration written out with scalar loops, straight from
/// the update rule. Returns the refined cell states.
pub fn scalar_refine_step(
    store: &ParamStore,
    config: &RefinementConfig,
    layer: usize,
    inst: &Instance,
) -> Vec<Vec<f64>> {
    let n = inst.states.len();
    let source: Vec<&[f64]> = match config.state_source {
        StateSource::Current => inst.states.iter().map(|s| s.h.as_slice()).collect(),
        StateSource::Previous => inst.previous.iter().map(Vec::as_slice).collect(),
    };
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut c = inst.states[i].c.clone();
        let nb = neighbours(config, &inst.positions, &inst.present, i);
        if nb.is_empty() {
            out.push(c);
            continue;
        }
        let mut gates = Vec::new();
        let mut scores = Vec::new();
        for &j in &nb {
            let d = [
                inst.positions[i][0] - inst.positions[j][0],
                inst.positions[i][1] - inst.positions[j][1],
            ];
            let mut feature = Vec::with_capacity(EMBED_DIM + 2 * HIDDEN_DIM);
            if !config.use_motion_gate && !config.use_attention {
                gates.push(vec![1.0; HIDDEN_DIM]);
                continue;
            }
            for k in 0..EMBED_DIM {
                let mut v = at(store, layer, "b_r", 0, k);
                for (m, dm) in d.iter().enumerate() {
                    v += dm * at(store, layer, "W_r", m, k);
                }
                feature.push(match config.embed_activation {
                    EmbedActivation::Relu => v.max(0.0),
                    EmbedActivation::Linear => v,
                });
            }
            feature.extend_from_slice(source[j]);
            feature.extend_from_slice(&inst.states[i].h);

            let gate: Vec<f64> = if config.use_motion_gate {
                (0..HIDDEN_DIM)
                    .map(|k| {
                        let mut v = at(store, layer, "b_m", 0, k);
                        for (m, f) in feature.iter().enumerate() {
                            v += f * at(store, layer, "W_m", m, k);
                        }
                        sigmoid(v)
                    })
                    .collect()
            } else {
                vec![1.0; HIDDEN_DIM]
            };
            gates.push(gate);
            if config.use_attention {
                let mut u = 0.0;
                for (m, f) in feature.iter().enumerate() {
                    u += f * at(store, layer, "w_a", m, 0);
                }
                scores.push(u);
            }
        }
        let alphas: Vec<f64> = if config.use_attention {
            let top = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = scores.iter().map(|u| (u - top).exp()).collect();
            let z: f64 = e.iter().sum();
            e.iter().map(|v| v / z).collect()
        } else {
            vec![1.0 / nb.len() as f64; nb.len()]
        };
        let mut agg = vec![0.0; HIDDEN_DIM];
        for (q, &j) in nb.iter().enumerate() {
            for k in 0..HIDDEN_DIM {
                agg[k] += alphas[q] * gates[q][k] * source[j][k];
            }
        }
        for (k, ck) in c.iter_mut().enumerate() {
            for (m, a) in agg.iter().enumerate() {
                *ck += a * at(store, layer, "W_mp", m, k);
            }
        }
        out.push(c);
    }
    out
}

/// Each pedestrian run through its own LSTM, one step at a time, teacher
/// forced. Returns `[t][p]` predictions for step `t` (made at `t − 1`).
pub fn independent_lstm(store: &ParamStore, act: EmbedActivation, w: &PedestrianWindow) -> Vec<Vec<Option<[f64; 2]>>> {
    let peds = w.num_pedestrians();
    let mut out = vec![vec![None; peds]; w.len()];
    for p in 0..peds {
        let mut state = LstmState::zeros();
        for t in 0..w.len() - 1 {
            if !w.present[t][p] {
                continue;
            }
            let [x, y] = w.model_xy[t][p];
            let e = lstm::embed_position(store, x, y, act).unwrap();
            state = lstm::lstm_step(store, &e, &state).unwrap().0;
            let (px, py) = lstm::project_output(store, &state.h).unwrap();
            out[t + 1][p] = Some([px, py]);
        }
    }
    out
}

/// Pedestrian `p` of the result is pedestrian `perm[p]` of `w`.
pub fn permute_window(w: &PedestrianWindow, perm: &[usize]) -> PedestrianWindow {
    let pick = |row: &Vec<[f64; 2]>| perm.iter().map(|&q| row[q]).collect::<Vec<_>>();
    PedestrianWindow {
        scene: w.scene.clone(),
        start_frame: w.start_frame,
        frame_step: w.frame_step,
        ped_ids: perm.iter().map(|&q| w.ped_ids[q]).collect(),
        present: w.present.iter().map(|row| perm.iter().map(|&q| row[q]).collect()).collect(),
        targets: perm.iter().map(|&q| w.targets[q]).collect(),
        scene_xy: w.scene_xy.iter().map(pick).collect(),
        model_xy: w.model_xy.iter().map(pick).collect(),
        normalization: match &w.normalization {
            Normalization::Nabs { origins } => Normalization::Nabs {
                origins: perm.iter().map(|&q| origins[q]).collect(),
            },
            other => other.clone(),
        },
    }
}

pub fn model_with(refinement: RefinementConfig, seed: u64) -> SrLstm {
    SrLstm::new(
        ModelConfig {
            refinement,
            ..ModelConfig::default()
        },
        seed,
    )
    .unwrap()
}

/// Flat-loop displacement metrics over `[ped][step]` arrays.
pub fn flat_metrics(pred: &[Vec<[f64; 2]>], gt: &[Vec<[f64; 2]>]) -> (f64, f64) {
    let (mut total, mut n, mut last, mut peds) = (0.0, 0.0, 0.0, 0.0);
    for p in 0..pred.len() {
        let steps = pred[p].len();
        for t in 0..steps {
            let dx = pred[p][t][0] - gt[p][t][0];
            let dy = pred[p][t][1] - gt[p][t][1];
            let d = (dx * dx + dy * dy).sqrt();
            total += d;
            n += 1.0;
            if t + 1 == steps {
                last += d;
                peds += 1.0;
            }
        }
    }
    (total / n, last / peds)
}

/// Runs the full refinement of one step through the graph and returns every
/// message record.
pub fn refine_records(
    store: &ParamStore,
    config: &RefinementConfig,
    inst: &Instance,
) -> Vec<srlstm::refine::MessageRecord> {
    use srlstm::graph::Graph;
    use srlstm::refine::{build_neighborhood, refine, RefineContext, SrVars};
    use srlstm::Tensor2;

    let rows = |v: Vec<Vec<f64>>| Tensor2::from_rows(&v).unwrap();
    let mut g = Graph::new();
    let layers: Vec<SrVars> = (0..config.iterations)
        .map(|l| SrVars::bind(&mut g, store, l, config).unwrap())
        .collect();
    let h = g.constant(rows(inst.states.iter().map(|s| s.h.clone()).collect()));
    let c = g.constant(rows(inst.states.iter().map(|s| s.c.clone()).collect()));
    let prev = g.constant(rows(inst.previous.clone()));
    let out_gate = g.constant(Tensor2::filled(inst.states.len(), HIDDEN_DIM, 0.7));
    let graph = build_neighborhood(&inst.positions, &inst.present, config.neighborhood_size, config.shape);
    let ctx = RefineContext {
        config,
        positions: &inst.positions,
        graph: &graph,
        out_gate,
        previous_hidden: Some(prev),
    };
    let mut records = Vec::new();
    refine(&mut g, &layers, &ctx, h, c, Some(&mut records));
    records
}
