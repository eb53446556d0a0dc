//! Per-pedestrian encoder: position embedding, the LSTM recursion and the
//! linear position decoder. One parameter set is shared by every pedestrian.
//!
//! Weights are stored input-major (`in × out`) so a batch of row vectors is
//! transformed as `x · W`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

pub const INPUT_DIM: usize = 2;
pub const EMBED_DIM: usize = 32;
pub const HIDDEN_DIM: usize = 64;

pub const W_E: &str = "lstm.W_e";
pub const B_E: &str = "lstm.b_e";
pub const W_P: &str = "lstm.W_p";

/// Gate order used for naming: update, forget, output, cell.
pub const GATES: [&str; 4] = ["u", "f", "o", "c"];

pub fn input_weight(gate: &str) -> String {
    format!("lstm.W_{gate}")
}

pub fn recurrent_weight(gate: &str) -> String {
    format!("lstm.U_{gate}")
}

pub fn gate_bias(gate: &str) -> String {
    format!("lstm.b_{gate}")
}

/// Nonlinearity of the single-layer embedding MLPs.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EmbedActivation {
    #[default]
    Relu,
    Linear,
}

/// Registers all encoder/decoder parameters. Matrices are uniform in
/// ±1/√fan_in, the forget-gate bias starts at 1 and every other bias at 0.
pub fn register_params<R: Rng>(store: &mut ParamStore, rng: &mut R) -> Result<(), NumericError> {
    store.insert_uniform(W_E, INPUT_DIM, EMBED_DIM, rng)?;
    store.insert(B_E, Tensor2::zeros(1, EMBED_DIM))?;
    for gate in GATES {
        store.insert_uniform(&input_weight(gate), EMBED_DIM, HIDDEN_DIM, rng)?;
        store.insert_uniform(&recurrent_weight(gate), HIDDEN_DIM, HIDDEN_DIM, rng)?;
        let bias = if gate == "f" { 1.0 } else { 0.0 };
        store.insert(&gate_bias(gate), Tensor2::filled(1, HIDDEN_DIM, bias))?;
    }
    store.insert_uniform(W_P, HIDDEN_DIM, INPUT_DIM, rng)?;
    Ok(())
}

/// Graph handles for the encoder parameters.
#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w_e: Var,
    pub b_e: Var,
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
    pub w_p: Var,
}

impl LstmVars {
    pub fn bind(g: &mut Graph, store: &ParamStore) -> Result<Self, NumericError> {
        let mut w = [None; 4];
        let mut u = [None; 4];
        let mut b = [None; 4];
        for (k, gate) in GATES.iter().enumerate() {
            w[k] = Some(g.param(store, &input_weight(gate))?);
            u[k] = Some(g.param(store, &recurrent_weight(gate))?);
            b[k] = Some(g.param(store, &gate_bias(gate))?);
        }
        Ok(Self {
            w_e: g.param(store, W_E)?,
            b_e: g.param(store, B_E)?,
            w: w.map(Option::unwrap),
            u: u.map(Option::unwrap),
            b: b.map(Option::unwrap),
            w_p: g.param(store, W_P)?,
        })
    }
}

pub(crate) fn activate(g: &mut Graph, x: Var, act: EmbedActivation) -> Var {
    match act {
        EmbedActivation::Relu => g.relu(x),
        EmbedActivation::Linear => x,
    }
}

/// `act(xy · W_e + b_e)` for a P×2 batch of positions.
pub fn embed(g: &mut Graph, vars: &LstmVars, xy: Var, act: EmbedActivation) -> Var {
    let pre = g.affine(xy, vars.w_e, vars.b_e);
    activate(g, pre, act)
}

#[derive(Clone, Copy, Debug)]
pub struct StepVars {
    pub h: Var,
    pub c: Var,
    /// Output gate, reused when the refined cell state is squashed again.
    pub o: Var,
}

/// One LSTM step for a batch of pedestrians (rows).
pub fn step(g: &mut Graph, vars: &LstmVars, e: Var, h_prev: Var, c_prev: Var) -> StepVars {
    let mut pre = [e; 4];
    for k in 0..4 {
        let we = g.matmul(e, vars.w[k]);
        let uh = g.matmul(h_prev, vars.u[k]);
        let s = g.add(we, uh);
        pre[k] = g.add_bias(s, vars.b[k]);
    }
    let gu = g.sigmoid(pre[0]);
    let gf = g.sigmoid(pre[1]);
    let go = g.sigmoid(pre[2]);
    let gc = g.tanh(pre[3]);
    let keep = g.hadamard(gf, c_prev);
    let write = g.hadamard(gu, gc);
    let c = g.add(keep, write);
    let h = squash(g, go, c);
    StepVars { h, c, o: go }
}

/// `o ⊙ tanh(c)`; shared by the LSTM step and the refinement loop so that an
/// unchanged cell state reproduces the same hidden state bit for bit.
pub fn squash(g: &mut Graph, o: Var, c: Var) -> Var {
    let t = g.tanh(c);
    g.hadamard(o, t)
}

/// `h · W_p`, no bias.
pub fn project(g: &mut Graph, vars: &LstmVars, h: Var) -> Var {
    g.matmul(h, vars.w_p)
}

/// Hidden and cell vectors of one pedestrian.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmState {
    pub h: Vec<f64>,
    pub c: Vec<f64>,
}

impl LstmState {
    pub fn zeros() -> Self {
        Self {
            h: vec![0.0; HIDDEN_DIM],
            c: vec![0.0; HIDDEN_DIM],
        }
    }
}

/// Single-pedestrian embedding.
pub fn embed_position(
    store: &ParamStore,
    x: f64,
    y: f64,
    act: EmbedActivation,
) -> Result<Vec<f64>, NumericError> {
    let mut g = Graph::new();
    let vars = LstmVars::bind(&mut g, store)?;
    let xy = g.constant(Tensor2::from_vec(1, 2, vec![x, y])?);
    let e = embed(&mut g, &vars, xy, act);
    Ok(g.value(e).data().to_vec())
}

/// Single-pedestrian LSTM step. Returns the new state and the output gate.
pub fn lstm_step(
    store: &ParamStore,
    e: &[f64],
    prev: &LstmState,
) -> Result<(LstmState, Vec<f64>), NumericError> {
    let mut g = Graph::new();
    let vars = LstmVars::bind(&mut g, store)?;
    let e = g.constant(Tensor2::row_vector(e)?);
    let h = g.constant(Tensor2::row_vector(&prev.h)?);
    let c = g.constant(Tensor2::row_vector(&prev.c)?);
    let out = step(&mut g, &vars, e, h, c);
    Ok((
        LstmState {
            h: g.value(out.h).data().to_vec(),
            c: g.value(out.c).data().to_vec(),
        },
        g.value(out.o).data().to_vec(),
    ))
}

pub fn project_output(store: &ParamStore, h: &[f64]) -> Result<(f64, f64), NumericError> {
    let mut g = Graph::new();
    let vars = LstmVars::bind(&mut g, store)?;
    let h = g.constant(Tensor2::row_vector(h)?);
    let p = project(&mut g, &vars, h);
    let v = g.value(p);
    Ok((v.get(0, 0), v.get(0, 1)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::{finite_diff_check, GradCheckOptions};
    use crate::tensor::sigmoid;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_store(seed: u64) -> ParamStore {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        register_params(&mut store, &mut rng).unwrap();
        // non-trivial biases so every term of the recursion is exercised
        for name in [B_E.to_string(), gate_bias("u"), gate_bias("f"), gate_bias("o"), gate_bias("c")] {
            for v in store.value_mut(&name).unwrap().data_mut() {
                *v = rng.gen_range(-0.5..0.5);
            }
        }
        store
    }

    fn zero_store() -> ParamStore {
        let mut store = random_store(0);
        for (_, e) in store.iter_mut() {
            e.value.fill(0.0);
        }
        store
    }

    fn random_vec(n: usize, scale: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
    }

    #[test]
    fn shapes_match_layout() {
        let store = random_store(1);
        assert_eq!(store.value(W_E).unwrap().shape(), (2, 32));
        assert_eq!(store.value(&input_weight("o")).unwrap().shape(), (32, 64));
        assert_eq!(store.value(&recurrent_weight("c")).unwrap().shape(), (64, 64));
        assert_eq!(store.value(&gate_bias("u")).unwrap().shape(), (1, 64));
        assert_eq!(store.value(W_P).unwrap().shape(), (64, 2));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut fresh = ParamStore::new();
        register_params(&mut fresh, &mut rng).unwrap();
        assert!(fresh.value(&gate_bias("f")).unwrap().data().iter().all(|&v| v == 1.0));
        assert!(fresh.value(&gate_bias("o")).unwrap().data().iter().all(|&v| v == 0.0));
        let bound = 1.0 / 32f64.sqrt();
        assert!(fresh
            .value(&input_weight("u"))
            .unwrap()
            .data()
            .iter()
            .all(|v| v.abs() <= bound));
    }

    #[test]
    fn embedding_of_origin_with_zero_bias_is_zero() {
        let mut store = random_store(3);
        store.value_mut(B_E).unwrap().fill(0.0);
        let e = embed_position(&store, 0.0, 0.0, EmbedActivation::Relu).unwrap();
        assert_eq!(e.len(), 32);
        assert!(e.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn embedding_matches_direct_formula() {
        let store = random_store(4);
        let (x, y) = (0.37, -1.21);
        for act in [EmbedActivation::Relu, EmbedActivation::Linear] {
            let e = embed_position(&store, x, y, act).unwrap();
            let w = store.value(W_E).unwrap();
            let b = store.value(B_E).unwrap();
            for k in 0..EMBED_DIM {
                let pre = x * w.get(0, k) + y * w.get(1, k) + b.get(0, k);
                let oracle = match act {
                    EmbedActivation::Relu => pre.max(0.0),
                    EmbedActivation::Linear => pre,
                };
                assert!((e[k] - oracle).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_parameters_force_half_gates() {
        let store = zero_store();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let c0 = random_vec(HIDDEN_DIM, 2.0, &mut rng);
        let prev = LstmState {
            h: random_vec(HIDDEN_DIM, 0.9, &mut rng),
            c: c0.clone(),
        };
        let e = random_vec(EMBED_DIM, 1.0, &mut rng);
        let (next, o) = lstm_step(&store, &e, &prev).unwrap();
        assert!(o.iter().all(|&v| v == 0.5));
        for k in 0..HIDDEN_DIM {
            assert_eq!(next.c[k], 0.5 * c0[k]);
            assert_eq!(next.h[k], 0.5 * (0.5 * c0[k]).tanh());
        }
        let (from_zero, _) = lstm_step(&store, &vec![0.0; EMBED_DIM], &LstmState::zeros()).unwrap();
        assert!(from_zero.c.iter().chain(&from_zero.h).all(|&v| v == 0.0));
    }

    #[test]
    fn step_matches_scalar_transcription() {
        let store = random_store(6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let prev = LstmState {
            h: random_vec(HIDDEN_DIM, 0.9, &mut rng),
            c: random_vec(HIDDEN_DIM, 2.0, &mut rng),
        };
        let e = random_vec(EMBED_DIM, 1.0, &mut rng);
        let (next, o) = lstm_step(&store, &e, &prev).unwrap();

        let pre = |gate: &str, k: usize| {
            let w = store.value(&input_weight(gate)).unwrap();
            let u = store.value(&recurrent_weight(gate)).unwrap();
            let b = store.value(&gate_bias(gate)).unwrap();
            let mut s = b.get(0, k);
            for (m, &em) in e.iter().enumerate() {
                s += w.get(m, k) * em;
            }
            for (m, &hm) in prev.h.iter().enumerate() {
                s += u.get(m, k) * hm;
            }
            s
        };
        for k in 0..HIDDEN_DIM {
            let gu = sigmoid(pre("u", k));
            let gf = sigmoid(pre("f", k));
            let go = sigmoid(pre("o", k));
            let gc = pre("c", k).tanh();
            let c = gf * prev.c[k] + gu * gc;
            let h = go * c.tanh();
            assert!((next.c[k] - c).abs() < 1e-12);
            assert!((next.h[k] - h).abs() < 1e-12);
            assert!((o[k] - go).abs() < 1e-12);
            assert!(next.h[k].abs() < 1.0);
        }
    }

    #[test]
    fn projection_cases() {
        let mut store = random_store(8);
        assert_eq!(project_output(&store, &vec![0.0; HIDDEN_DIM]).unwrap(), (0.0, 0.0));
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let h = random_vec(HIDDEN_DIM, 1.0, &mut rng);
        let (x, y) = project_output(&store, &h).unwrap();
        let w = store.value(W_P).unwrap();
        let oracle = Tensor2::row_vector(&h).unwrap().matmul(w).unwrap();
        assert!((x - oracle.get(0, 0)).abs() < 1e-12 && (y - oracle.get(0, 1)).abs() < 1e-12);

        let wp = store.value_mut(W_P).unwrap();
        wp.fill(0.0);
        wp.set(0, 0, 1.0);
        wp.set(1, 1, 1.0);
        assert_eq!(project_output(&store, &h).unwrap(), (h[0], h[1]));
    }

    #[test]
    fn shared_parameters_give_identical_rows() {
        let store = random_store(10);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let e = random_vec(EMBED_DIM, 1.0, &mut rng);
        let h = random_vec(HIDDEN_DIM, 0.9, &mut rng);
        let c = random_vec(HIDDEN_DIM, 1.5, &mut rng);
        let mut g = Graph::new();
        let vars = LstmVars::bind(&mut g, &store).unwrap();
        let ev = g.constant(Tensor2::from_rows(&[e.clone(), e]).unwrap());
        let hv = g.constant(Tensor2::from_rows(&[h.clone(), h]).unwrap());
        let cv = g.constant(Tensor2::from_rows(&[c.clone(), c]).unwrap());
        let out = step(&mut g, &vars, ev, hv, cv);
        let hs = g.value(out.h);
        assert_eq!(hs.row(0), hs.row(1));
        let cs = g.value(out.c);
        assert_eq!(cs.row(0), cs.row(1));
    }

    #[test]
    fn step_gradients_pass_finite_differences() {
        let mut store = random_store(12);
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        store
            .insert("h0", Tensor2::from_vec(3, HIDDEN_DIM, random_vec(3 * HIDDEN_DIM, 0.9, &mut rng)).unwrap())
            .unwrap();
        store
            .insert("c0", Tensor2::from_vec(3, HIDDEN_DIM, random_vec(3 * HIDDEN_DIM, 1.5, &mut rng)).unwrap())
            .unwrap();
        let xy = Tensor2::from_vec(3, 2, random_vec(6, 2.0, &mut rng)).unwrap();
        let target = Tensor2::from_vec(3, 2, random_vec(6, 1.0, &mut rng)).unwrap();
        let build = |store: &ParamStore| {
            let mut g = Graph::new();
            let vars = LstmVars::bind(&mut g, store).unwrap();
            let x = g.constant(xy.clone());
            let e = embed(&mut g, &vars, x, EmbedActivation::Relu);
            let h0 = g.param(store, "h0").unwrap();
            let c0 = g.param(store, "c0").unwrap();
            let s1 = step(&mut g, &vars, e, h0, c0);
            let s2 = step(&mut g, &vars, e, s1.h, s1.c);
            let p = project(&mut g, &vars, s2.h);
            let l = g.weighted_sq_error(p, target.clone(), vec![1.0; 3]);
            (g, l)
        };
        let (g, l) = build(&store);
        let grads = g.backward(l, 1.0);
        g.accumulate_param_grads(&grads, &mut store).unwrap();
        let report = finite_diff_check(
            |s| {
                let (g, l) = build(s);
                g.value(l).get(0, 0)
            },
            &store,
            &GradCheckOptions {
                samples_per_param: 16,
                ..Default::default()
            },
        );
        assert!(report.passes(1e-4), "{report:?}");
    }
}
