//! State refinement: message passing between the LSTM cell states of all
//! pedestrians present at one time step.
//!
//! Each iteration `l` updates every cell state with messages from its
//! neighbours,
//!
//! ```text
//! ĉ_i ← ĉ_i + W_mp · Σ_j α_ij · (g_ij ⊙ ĥ_j)
//! g_ij = σ([r_ij; ĥ_j; ĥ_i] · W_m + b_m)          motion gate
//! α_ij = softmax_j([r_ij; ĥ_j; ĥ_i] · w_a)         attention over N(i)
//! r_ij = act([x_i − x_j, y_i − y_j] · W_r + b_r)   relative embedding
//! ```
//!
//! then squashes the refined cell through the LSTM output gate again. With
//! the gate disabled `g_ij = 1`; with attention disabled `α_ij = 1/|N(i)|`.
//! A pedestrian without neighbours keeps its cell state bit for bit.
//!
//! All pedestrians read iteration-`l` states and write iteration-`l+1`
//! states (Jacobi update). Neighbour sums run in a canonical order keyed by
//! neighbour position and state, never by index, so relabelling the crowd
//! permutes the output exactly.

use std::cmp::Ordering;
use std::rc::Rc;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::NumericError;
use crate::graph::{Graph, Var};
use crate::lstm::{self, EmbedActivation, LstmState, EMBED_DIM, HIDDEN_DIM, INPUT_DIM};
use crate::params::ParamStore;
use crate::tensor::Tensor2;

/// Width of the gate/attention input `[r; ĥ_j; ĥ_i]`.
pub const PAIR_DIM: usize = EMBED_DIM + 2 * HIDDEN_DIM;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NeighborhoodShape {
    /// Axis-aligned square of side `2·NS`.
    #[default]
    Square,
    /// Euclidean disk of radius `NS`.
    Disk,
}

/// Which hidden states neighbours contribute.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StateSource {
    /// Iteration-`l` states of the current time step.
    #[default]
    Current,
    /// Final hidden states of the previous time step, for every iteration.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RefinementConfig {
    pub iterations: usize,
    pub neighborhood_size: f64,
    pub shape: NeighborhoodShape,
    pub use_motion_gate: bool,
    pub use_attention: bool,
    pub state_source: StateSource,
    pub embed_activation: EmbedActivation,
}

impl Default for RefinementConfig {
    fn default() -> Self {
        Self {
            iterations: 2,
            neighborhood_size: 10.0,
            shape: NeighborhoodShape::Square,
            use_motion_gate: true,
            use_attention: true,
            state_source: StateSource::Current,
            embed_activation: EmbedActivation::Relu,
        }
    }
}

impl RefinementConfig {
    pub fn vanilla() -> Self {
        Self {
            iterations: 0,
            ..Self::default()
        }
    }

    fn uses_pair_features(&self) -> bool {
        self.use_motion_gate || self.use_attention
    }
}

pub fn param_name(layer: usize, field: &str) -> String {
    format!("sr{layer}.{field}")
}

/// Registers the parameters of refinement layer `layer`. Only the tensors
/// the configuration actually uses are created.
pub fn register_layer<R: Rng>(
    store: &mut ParamStore,
    layer: usize,
    config: &RefinementConfig,
    rng: &mut R,
) -> Result<(), NumericError> {
    store.insert_uniform(&param_name(layer, "W_mp"), HIDDEN_DIM, HIDDEN_DIM, rng)?;
    if config.uses_pair_features() {
        store.insert_uniform(&param_name(layer, "W_r"), INPUT_DIM, EMBED_DIM, rng)?;
        store.insert(&param_name(layer, "b_r"), Tensor2::zeros(1, EMBED_DIM))?;
    }
    if config.use_attention {
        store.insert_uniform(&param_name(layer, "w_a"), PAIR_DIM, 1, rng)?;
    }
    if config.use_motion_gate {
        store.insert_uniform(&param_name(layer, "W_m"), PAIR_DIM, HIDDEN_DIM, rng)?;
        store.insert(&param_name(layer, "b_m"), Tensor2::zeros(1, HIDDEN_DIM))?;
    }
    Ok(())
}

/// Graph handles for one refinement layer.
#[derive(Clone, Copy, Debug)]
pub struct SrVars {
    pub w_mp: Var,
    pub w_r: Option<Var>,
    pub b_r: Option<Var>,
    pub w_a: Option<Var>,
    pub w_m: Option<Var>,
    pub b_m: Option<Var>,
}

impl SrVars {
    pub fn bind(
        g: &mut Graph,
        store: &ParamStore,
        layer: usize,
        config: &RefinementConfig,
    ) -> Result<Self, NumericError> {
        let mut opt = |on: bool, field: &str| -> Result<Option<Var>, NumericError> {
            if on {
                g.param(store, &param_name(layer, field)).map(Some)
            } else {
                Ok(None)
            }
        };
        let pair = config.uses_pair_features();
        let w_r = opt(pair, "W_r")?;
        let b_r = opt(pair, "b_r")?;
        let w_a = opt(config.use_attention, "w_a")?;
        let w_m = opt(config.use_motion_gate, "W_m")?;
        let b_m = opt(config.use_motion_gate, "b_m")?;
        Ok(Self {
            w_mp: g.param(store, &param_name(layer, "W_mp"))?,
            w_r,
            b_r,
            w_a,
            w_m,
            b_m,
        })
    }
}

/// Per-pedestrian neighbour lists for one time step.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NeighborGraph {
    neighbors: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    pub fn pair_count(&self) -> usize {
        self.neighbors.iter().map(Vec::len).sum()
    }

    /// Disjoint union: indices of each part are shifted past the previous
    /// parts, so windows batched together never see each other.
    pub fn block_diagonal(parts: &[NeighborGraph]) -> Self {
        let mut neighbors = Vec::with_capacity(parts.iter().map(NeighborGraph::len).sum());
        for part in parts {
            let base = neighbors.len();
            neighbors.extend(
                part.neighbors
                    .iter()
                    .map(|nb| nb.iter().map(|&j| j + base).collect::<Vec<_>>()),
            );
        }
        Self { neighbors }
    }
}

/// `j ∈ N(i)` iff both are present, `j ≠ i`, and `j` lies inside the
/// neighbourhood region of `i`. Lists are ordered by neighbour position.
pub fn build_neighborhood(
    positions: &[[f64; 2]],
    present: &[bool],
    size: f64,
    shape: NeighborhoodShape,
) -> NeighborGraph {
    assert_eq!(positions.len(), present.len());
    let n = positions.len();
    let mut neighbors = vec![Vec::new(); n];
    for i in 0..n {
        if !present[i] {
            continue;
        }
        let [xi, yi] = positions[i];
        for j in 0..n {
            if j == i || !present[j] {
                continue;
            }
            let (dx, dy) = (xi - positions[j][0], yi - positions[j][1]);
            let inside = match shape {
                NeighborhoodShape::Square => dx.abs() <= size && dy.abs() <= size,
                NeighborhoodShape::Disk => dx * dx + dy * dy <= size * size,
            };
            if inside {
                neighbors[i].push(j);
            }
        }
        neighbors[i].sort_by(|&a, &b| cmp_position(&positions[a], &positions[b]).then(a.cmp(&b)));
    }
    NeighborGraph { neighbors }
}

fn cmp_position(a: &[f64; 2], b: &[f64; 2]) -> Ordering {
    a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1]))
}

fn cmp_rows(a: &[f64], b: &[f64]) -> Ordering {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(Ordering::Equal)
}

/// One (i, j, l) message as seen by introspection.
#[derive(Clone, Debug, PartialEq)]
pub struct MessageRecord {
    pub layer: usize,
    pub i: usize,
    pub j: usize,
    /// Attention logit, when attention is enabled.
    pub score: Option<f64>,
    pub alpha: f64,
    /// Motion gate vector, when the gate is enabled.
    pub gate: Option<Vec<f64>>,
    /// `(x_i − x_j, y_i − y_j)`
    pub offset: [f64; 2],
}

/// Everything a refinement pass needs besides the states themselves.
pub struct RefineContext<'a> {
    pub config: &'a RefinementConfig,
    /// Scene-frame positions, one row per pedestrian.
    pub positions: &'a [[f64; 2]],
    pub graph: &'a NeighborGraph,
    /// Output gate from the LSTM step.
    pub out_gate: Var,
    /// Final hidden states of the previous time step; required for
    /// [`StateSource::Previous`].
    pub previous_hidden: Option<Var>,
}

struct PairLayout {
    is: Rc<[usize]>,
    js: Rc<[usize]>,
    offsets: Rc<[usize]>,
    has_neighbors: Rc<[bool]>,
}

fn pair_layout(ctx: &RefineContext<'_>, source: &Tensor2) -> PairLayout {
    let n = ctx.graph.len();
    let mut is = Vec::with_capacity(ctx.graph.pair_count());
    let mut js = Vec::with_capacity(ctx.graph.pair_count());
    let mut offsets = Vec::with_capacity(n + 1);
    let mut has = Vec::with_capacity(n);
    offsets.push(0);
    for i in 0..n {
        let mut nb = ctx.graph.neighbors(i).to_vec();
        nb.sort_by(|&a, &b| {
            cmp_position(&ctx.positions[a], &ctx.positions[b])
                .then_with(|| cmp_rows(source.row(a), source.row(b)))
        });
        has.push(!nb.is_empty());
        for j in nb {
            is.push(i);
            js.push(j);
        }
        offsets.push(is.len());
    }
    PairLayout {
        is: is.into(),
        js: js.into(),
        offsets: offsets.into(),
        has_neighbors: has.into(),
    }
}

/// One refinement iteration. Returns the refined cell states; pedestrians
/// without neighbours (and absent rows) keep their input rows.
pub fn refine_step(
    g: &mut Graph,
    vars: &SrVars,
    ctx: &RefineContext<'_>,
    layer: usize,
    h: Var,
    c: Var,
    mut records: Option<&mut Vec<MessageRecord>>,
) -> Var {
    let cfg = ctx.config;
    let source = match cfg.state_source {
        StateSource::Current => h,
        StateSource::Previous => ctx
            .previous_hidden
            .expect("previous-state refinement needs the previous hidden states"),
    };
    let layout = pair_layout(ctx, g.value(source));
    let k = layout.is.len();
    if k == 0 {
        return c;
    }

    let h_j = g.gather(source, layout.js.clone());
    // A product [r; ĥ_j; ĥ_i]·W is evaluated blockwise: the ĥ_j and ĥ_i
    // blocks depend on a single pedestrian, so they are computed once per
    // row and gathered per pair.
    let r = if cfg.uses_pair_features() {
        let mut d = Vec::with_capacity(2 * k);
        for (&i, &j) in layout.is.iter().zip(layout.js.iter()) {
            d.push(ctx.positions[i][0] - ctx.positions[j][0]);
            d.push(ctx.positions[i][1] - ctx.positions[j][1]);
        }
        let d = g.constant(Tensor2::from_raw(k, 2, d));
        let pre = g.affine(d, vars.w_r.expect("W_r"), vars.b_r.expect("b_r"));
        Some(lstm::activate(g, pre, cfg.embed_activation))
    } else {
        None
    };
    let pair_product = |g: &mut Graph, w: Var| -> Var {
        let w_r = g.row_slice(w, 0, EMBED_DIM);
        let w_j = g.row_slice(w, EMBED_DIM, EMBED_DIM + HIDDEN_DIM);
        let w_i = g.row_slice(w, EMBED_DIM + HIDDEN_DIM, PAIR_DIM);
        let from_r = g.matmul(r.expect("pair features"), w_r);
        let per_j = g.matmul(source, w_j);
        let from_j = g.gather(per_j, layout.js.clone());
        let per_i = g.matmul(h, w_i);
        let from_i = g.gather(per_i, layout.is.clone());
        g.sum(&[from_r, from_j, from_i])
    };

    let (gated, gate) = if cfg.use_motion_gate {
        let lin = pair_product(g, vars.w_m.expect("W_m"));
        let pre = g.add_bias(lin, vars.b_m.expect("b_m"));
        let gm = g.sigmoid(pre);
        (g.hadamard(gm, h_j), Some(gm))
    } else {
        (h_j, None)
    };

    let (alpha, score) = if cfg.use_attention {
        let u = pair_product(g, vars.w_a.expect("w_a"));
        (g.segment_softmax(u, layout.offsets.clone()), Some(u))
    } else {
        let mut w = Vec::with_capacity(k);
        for s in 0..layout.offsets.len() - 1 {
            let count = layout.offsets[s + 1] - layout.offsets[s];
            w.extend(std::iter::repeat(1.0 / count as f64).take(count));
        }
        (g.constant(Tensor2::from_raw(k, 1, w)), None)
    };

    let weighted = g.scale_rows(gated, alpha);
    let summed = g.segment_sum(weighted, layout.offsets.clone());
    let message = g.matmul(summed, vars.w_mp);
    let updated = g.add(c, message);
    let refined = g.select_rows(updated, c, layout.has_neighbors.clone());

    if let Some(out) = records.as_deref_mut() {
        for p in 0..k {
            let (i, j) = (layout.is[p], layout.js[p]);
            out.push(MessageRecord {
                layer,
                i,
                j,
                score: score.map(|u| g.value(u).data()[p]),
                alpha: g.value(alpha).data()[p],
                gate: gate.map(|gm| g.value(gm).row(p).to_vec()),
                offset: [
                    ctx.positions[i][0] - ctx.positions[j][0],
                    ctx.positions[i][1] - ctx.positions[j][1],
                ],
            });
        }
    }
    refined
}

/// Runs `config.iterations` refinement iterations on top of one LSTM step.
/// Returns the final `(ĉ, ĥ)`.
pub fn refine(
    g: &mut Graph,
    layers: &[SrVars],
    ctx: &RefineContext<'_>,
    h: Var,
    c: Var,
    mut records: Option<&mut Vec<MessageRecord>>,
) -> (Var, Var) {
    assert!(layers.len() >= ctx.config.iterations, "missing refinement layers");
    let (mut c, mut h) = (c, h);
    for (l, vars) in layers.iter().take(ctx.config.iterations).enumerate() {
        let next = refine_step(g, vars, ctx, l, h, c, records.as_deref_mut());
        if next != c {
            c = next;
            h = lstm::squash(g, ctx.out_gate, c);
        }
    }
    (c, h)
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor2, NumericError> {
    Tensor2::from_rows(rows)
}

/// `r_ij` for a single pair, from scene-frame positions.
pub fn embed_relative(
    store: &ParamStore,
    layer: usize,
    act: EmbedActivation,
    pos_i: [f64; 2],
    pos_j: [f64; 2],
) -> Result<Vec<f64>, NumericError> {
    let mut g = Graph::new();
    let w = g.param(store, &param_name(layer, "W_r"))?;
    let b = g.param(store, &param_name(layer, "b_r"))?;
    let d = g.constant(Tensor2::from_vec(
        1,
        2,
        vec![pos_i[0] - pos_j[0], pos_i[1] - pos_j[1]],
    )?);
    let pre = g.affine(d, w, b);
    let r = lstm::activate(&mut g, pre, act);
    Ok(g.value(r).data().to_vec())
}

/// `σ([r; h_j; h_i] · W_m + b_m)` for a single pair.
pub fn motion_gate(
    store: &ParamStore,
    layer: usize,
    r: &[f64],
    h_j: &[f64],
    h_i: &[f64],
) -> Result<Vec<f64>, NumericError> {
    let mut g = Graph::new();
    let w = g.param(store, &param_name(layer, "W_m"))?;
    let b = g.param(store, &param_name(layer, "b_m"))?;
    let x = g.constant(Tensor2::row_vector(&[r, h_j, h_i].concat())?);
    let pre = g.affine(x, w, b);
    let gm = g.sigmoid(pre);
    Ok(g.value(gm).data().to_vec())
}

/// Attention of pedestrian `i` over its neighbours, given the pair
/// embeddings `r_ij` and neighbour states `h_j` in neighbour order.
pub fn attention_weights(
    store: &ParamStore,
    layer: usize,
    r: &[Vec<f64>],
    h_j: &[Vec<f64>],
    h_i: &[f64],
) -> Result<Vec<f64>, NumericError> {
    if r.is_empty() {
        return Err(NumericError::EmptySupport);
    }
    let rows: Vec<Vec<f64>> = r
        .iter()
        .zip(h_j)
        .map(|(r, h)| [r.as_slice(), h, h_i].concat())
        .collect();
    let mut g = Graph::new();
    let w = g.param(store, &param_name(layer, "w_a"))?;
    let x = g.constant(matrix(&rows)?);
    let u = g.matmul(x, w);
    let alpha = g.segment_softmax(u, Rc::from(vec![0, rows.len()]));
    Ok(g.value(alpha).data().to_vec())
}

/// Plain-vector entry point for one refinement iteration. `states` holds the
/// iteration-`layer` states of every pedestrian; returns refined cell states.
pub fn refine_step_states(
    store: &ParamStore,
    config: &RefinementConfig,
    layer: usize,
    states: &[LstmState],
    previous_hidden: Option<&[Vec<f64>]>,
    positions: &[[f64; 2]],
    present: &[bool],
) -> Result<Vec<Vec<f64>>, NumericError> {
    let mut g = Graph::new();
    let vars = SrVars::bind(&mut g, store, layer, config)?;
    let h = g.constant(matrix(&states.iter().map(|s| s.h.clone()).collect::<Vec<_>>())?);
    let c = g.constant(matrix(&states.iter().map(|s| s.c.clone()).collect::<Vec<_>>())?);
    let prev = previous_hidden.map(|p| matrix(p).map(|t| g.constant(t))).transpose()?;
    let graph = build_neighborhood(positions, present, config.neighborhood_size, config.shape);
    let ctx = RefineContext {
        config,
        positions,
        graph: &graph,
        out_gate: h,
        previous_hidden: prev,
    };
    let out = refine_step(&mut g, &vars, &ctx, layer, h, c, None);
    let v = g.value(out);
    Ok((0..v.rows()).map(|r| v.row(r).to_vec()).collect())
}

/// Plain-vector entry point for the full refinement of one time step.
/// `out_gates` are the LSTM output gates of the same step.
pub fn refine_states(
    store: &ParamStore,
    config: &RefinementConfig,
    states: &[LstmState],
    out_gates: &[Vec<f64>],
    previous_hidden: Option<&[Vec<f64>]>,
    positions: &[[f64; 2]],
    present: &[bool],
) -> Result<Vec<LstmState>, NumericError> {
    let mut g = Graph::new();
    let layers = (0..config.iterations)
        .map(|l| SrVars::bind(&mut g, store, l, config))
        .collect::<Result<Vec<_>, _>>()?;
    let h = g.constant(matrix(&states.iter().map(|s| s.h.clone()).collect::<Vec<_>>())?);
    let c = g.constant(matrix(&states.iter().map(|s| s.c.clone()).collect::<Vec<_>>())?);
    let o = g.constant(matrix(out_gates)?);
    let prev = previous_hidden.map(|p| matrix(p).map(|t| g.constant(t))).transpose()?;
    let graph = build_neighborhood(positions, present, config.neighborhood_size, config.shape);
    let ctx = RefineContext {
        config,
        positions,
        graph: &graph,
        out_gate: o,
        previous_hidden: prev,
    };
    let (c, h) = refine(&mut g, &layers, &ctx, h, c, None);
    let (cv, hv) = (g.value(c), g.value(h));
    Ok((0..cv.rows())
        .map(|r| LstmState {
            h: hv.row(r).to_vec(),
            c: cv.row(r).to_vec(),
        })
        .collect())
}
