//! What the refinement module attends to: strongest hidden-neuron responses,
//! strongest motion-gate elements per pedestrian pair, and every attention
//! weight, collected over teacher-forced passes.

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::Serialize;

use crate::data::PedestrianWindow;
use crate::error::NumericError;
use crate::model::{unroll, SrLstm, StepTrace, UnrollOptions};
use crate::train::EVAL_CHUNK;

pub const DEFAULT_TOP_K: usize = 20;

/// Steps of trajectory shown before a hit.
pub const SEGMENT_LEN: usize = 8;

struct Entry<K> {
    value: f64,
    seq: u64,
    key: K,
}

// "Greater" means worse, so the max-heap keeps the weakest kept hit on top.
// Among equal values the earlier one is better.
impl<K> Ord for Entry<K> {
    fn cmp(&self, other: &Self) -> Ordering {
        other.value.total_cmp(&self.value).then(self.seq.cmp(&other.seq))
    }
}

impl<K> PartialOrd for Entry<K> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<K> PartialEq for Entry<K> {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl<K> Eq for Entry<K> {}

/// Streaming top-k by value; ties keep the earliest offered item.
pub struct TopK<K> {
    k: usize,
    seq: u64,
    heap: BinaryHeap<Entry<K>>,
}

impl<K> TopK<K> {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            seq: 0,
            heap: BinaryHeap::with_capacity(k + 1),
        }
    }

    pub fn offer(&mut self, value: f64, key: impl FnOnce() -> K) {
        let seq = self.seq;
        self.seq += 1;
        if self.k == 0 {
            return;
        }
        if self.heap.len() == self.k {
            let worst = self.heap.peek().expect("non-empty");
            if value.total_cmp(&worst.value) != Ordering::Greater {
                return;
            }
            self.heap.pop();
        }
        self.heap.push(Entry { value, seq, key: key() });
    }

    /// Best first.
    pub fn into_sorted(self) -> Vec<(f64, K)> {
        let mut v = self.heap.into_vec();
        v.sort();
        v.into_iter().map(|e| (e.value, e.key)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct NeuronHit {
    pub neuron: usize,
    pub rank: usize,
    pub activation: f64,
    pub window: usize,
    pub scene: String,
    pub start_frame: i64,
    pub ped_id: i64,
    pub step: usize,
    /// `x:y` points separated by `;`, up to and including `step`.
    pub segment: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GateHit {
    pub element: usize,
    pub rank: usize,
    pub gate: f64,
    pub window: usize,
    pub step: usize,
    pub layer: usize,
    pub ped_i: i64,
    pub ped_j: i64,
    pub dx: f64,
    pub dy: f64,
    pub segment_i: String,
    pub segment_j: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AttentionRow {
    pub window: usize,
    pub step: usize,
    pub layer: usize,
    pub ped_i: i64,
    pub ped_j: i64,
    pub score: Option<f64>,
    pub alpha: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Introspection {
    pub neurons: Vec<NeuronHit>,
    pub gates: Vec<GateHit>,
    pub attention: Vec<AttentionRow>,
}

fn segment(w: &PedestrianWindow, p: usize, step: usize) -> String {
    let lo = step.saturating_sub(SEGMENT_LEN - 1);
    (lo..=step)
        .filter(|&t| w.present[t][p])
        .map(|t| format!("{:.3}:{:.3}", w.scene_xy[t][p][0], w.scene_xy[t][p][1]))
        .collect::<Vec<_>>()
        .join(";")
}

/// Everything recorded for one window: `(window index, per-step traces)`,
/// with batch rows already translated to pedestrian indices of the window.
pub struct WindowTrace {
    pub window: usize,
    pub steps: Vec<StepTrace>,
}

/// Teacher-forced passes over `windows` with recording switched on.
pub fn trace_windows(model: &SrLstm, windows: &[PedestrianWindow]) -> Result<Vec<WindowTrace>, NumericError> {
    let opts = UnrollOptions {
        record: true,
        ..UnrollOptions::default()
    };
    let mut out = Vec::with_capacity(windows.len());
    for (c, chunk) in windows.chunks(EVAL_CHUNK).enumerate() {
        let refs: Vec<&PedestrianWindow> = chunk.iter().collect();
        let run = unroll(&model.params, &model.config, &refs, &opts)?;
        for (w, win) in chunk.iter().enumerate() {
            let (lo, hi) = (run.row_offsets[w], run.row_offsets[w + 1]);
            let steps = run
                .trace
                .iter()
                .map(|st| {
                    let mut hidden = crate::tensor::Tensor2::zeros(hi - lo, st.hidden.cols());
                    for r in lo..hi {
                        hidden.row_mut(r - lo).copy_from_slice(st.hidden.row(r));
                    }
                    StepTrace {
                        t: st.t,
                        active: st.active[lo..hi].to_vec(),
                        hidden,
                        messages: st
                            .messages
                            .iter()
                            .filter(|m| (lo..hi).contains(&m.i))
                            .map(|m| {
                                let mut m = m.clone();
                                m.i -= lo;
                                m.j -= lo;
                                m
                            })
                            .collect(),
                    }
                })
                .collect();
            debug_assert_eq!(win.num_pedestrians(), hi - lo);
            out.push(WindowTrace {
                window: c * EVAL_CHUNK + w,
                steps,
            });
        }
    }
    Ok(out)
}

/// Ranks hidden neurons and gate elements over the traces and lists all
/// attention weights.
pub fn summarize(windows: &[PedestrianWindow], traces: &[WindowTrace], k: usize) -> Introspection {
    let hidden_dim = traces
        .iter()
        .flat_map(|t| t.steps.first())
        .map(|s| s.hidden.cols())
        .next()
        .unwrap_or(0);
    let gate_dim = traces
        .iter()
        .flat_map(|t| t.steps.iter())
        .flat_map(|s| s.messages.first())
        .find_map(|m| m.gate.as_ref().map(Vec::len))
        .unwrap_or(0);
    let mut neurons: Vec<TopK<(usize, usize, usize)>> = (0..hidden_dim).map(|_| TopK::new(k)).collect();
    let mut gates: Vec<TopK<(usize, usize, usize)>> = (0..gate_dim).map(|_| TopK::new(k)).collect();
    let mut attention = Vec::new();

    for tr in traces {
        let win = &windows[tr.window];
        for (s, st) in tr.steps.iter().enumerate() {
            for p in (0..st.active.len()).filter(|&p| st.active[p]) {
                for (n, &v) in st.hidden.row(p).iter().enumerate() {
                    neurons[n].offer(v, || (tr.window, p, st.t));
                }
            }
            for (m, msg) in st.messages.iter().enumerate() {
                if let Some(gate) = &msg.gate {
                    for (e, &v) in gate.iter().enumerate() {
                        gates[e].offer(v, || (tr.window, s, m));
                    }
                }
                attention.push(AttentionRow {
                    window: tr.window,
                    step: st.t,
                    layer: msg.layer,
                    ped_i: win.ped_ids[msg.i],
                    ped_j: win.ped_ids[msg.j],
                    score: msg.score,
                    alpha: msg.alpha,
                });
            }
        }
    }

    let mut report = Introspection {
        attention,
        ..Introspection::default()
    };
    for (n, top) in neurons.into_iter().enumerate() {
        for (rank, (v, (w, p, t))) in top.into_sorted().into_iter().enumerate() {
            let win = &windows[w];
            report.neurons.push(NeuronHit {
                neuron: n,
                rank: rank + 1,
                activation: v,
                window: w,
                scene: win.scene.clone(),
                start_frame: win.start_frame,
                ped_id: win.ped_ids[p],
                step: t,
                segment: segment(win, p, t),
            });
        }
    }
    let trace_of = |w: usize| traces.iter().find(|t| t.window == w).expect("trace exists");
    for (e, top) in gates.into_iter().enumerate() {
        for (rank, (v, (w, s, m))) in top.into_sorted().into_iter().enumerate() {
            let win = &windows[w];
            let st = &trace_of(w).steps[s];
            let msg = &st.messages[m];
            report.gates.push(GateHit {
                element: e,
                rank: rank + 1,
                gate: v,
                window: w,
                step: st.t,
                layer: msg.layer,
                ped_i: win.ped_ids[msg.i],
                ped_j: win.ped_ids[msg.j],
                dx: msg.offset[0],
                dy: msg.offset[1],
                segment_i: segment(win, msg.i, st.t),
                segment_j: segment(win, msg.j, st.t),
            });
        }
    }
    report
}

pub fn introspect(model: &SrLstm, windows: &[PedestrianWindow], k: usize) -> Result<Introspection, NumericError> {
    let traces = trace_windows(model, windows)?;
    Ok(summarize(windows, &traces, k))
}

pub fn write_csv<T: Serialize, W: std::io::Write>(rows: &[T], w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    for r in rows {
        out.serialize(r)?;
    }
    out.flush()?;
    Ok(())
}
