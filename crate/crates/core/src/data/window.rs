use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Scene;

pub const WINDOW_LEN: usize = 20;
pub const OBS_LEN: usize = 8;
pub const PRED_LEN: usize = 12;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationMode {
    /// Shift each pedestrian so the last observed position is the origin.
    #[default]
    Nabs,
    /// Per-step displacements.
    Rela,
}

/// How `model_xy` relates to `scene_xy`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Normalization {
    Identity,
    /// `model = scene − origin[p]`
    Nabs { origins: Vec<[f64; 2]> },
    /// `model[t] = scene[t] − scene[t − 1]`, zero at the first present step.
    Rela,
}

/// A 20-step slice of a scene with every pedestrian seen in it.
///
/// Per-step arrays are indexed `[t][p]`. Absent entries hold `[0, 0]`.
/// Each pedestrian's presence is a single contiguous run; targets are the
/// pedestrians present at all steps.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PedestrianWindow {
    pub scene: String,
    pub start_frame: i64,
    pub frame_step: i64,
    pub ped_ids: Vec<i64>,
    pub present: Vec<Vec<bool>>,
    pub targets: Vec<bool>,
    pub scene_xy: Vec<Vec<[f64; 2]>>,
    pub model_xy: Vec<Vec<[f64; 2]>>,
    pub normalization: Normalization,
}

impl PedestrianWindow {
    pub fn len(&self) -> usize {
        self.present.len()
    }

    pub fn is_empty(&self) -> bool {
        self.present.is_empty()
    }

    pub fn num_pedestrians(&self) -> usize {
        self.ped_ids.len()
    }

    pub fn num_targets(&self) -> usize {
        self.targets.iter().filter(|&&t| t).count()
    }

    pub fn first_present(&self, p: usize) -> Option<usize> {
        (0..self.len()).find(|&t| self.present[t][p])
    }

    /// Reverses the normalization for one model-frame point. `prev_scene` is
    /// the scene position one step earlier and is only used by `Rela`.
    pub fn to_scene(&self, p: usize, model: [f64; 2], prev_scene: [f64; 2]) -> [f64; 2] {
        match &self.normalization {
            Normalization::Identity => model,
            Normalization::Nabs { origins } => [model[0] + origins[p][0], model[1] + origins[p][1]],
            Normalization::Rela => [prev_scene[0] + model[0], prev_scene[1] + model[1]],
        }
    }
}

/// Cuts `WINDOW_LEN`-step windows with stride 1 over the scene's time grid.
/// Windows without a fully observed pedestrian are dropped. A pedestrian
/// who leaves and re-enters within one window keeps only the first run.
pub fn slide_windows(scene: &Scene) -> Vec<PedestrianWindow> {
    let step = scene.frame_step.max(1);
    let Some((base, _)) = scene.frame_span() else {
        return Vec::new();
    };
    // ped_id -> (time index -> position)
    let mut tracks: BTreeMap<i64, BTreeMap<usize, [f64; 2]>> = BTreeMap::new();
    for p in &scene.points {
        let offset = p.frame_id - base;
        if offset % step != 0 {
            continue;
        }
        tracks
            .entry(p.ped_id)
            .or_default()
            .insert((offset / step) as usize, [p.x, p.y]);
    }
    let horizon = tracks
        .values()
        .filter_map(|t| t.keys().next_back())
        .max()
        .map_or(0, |&k| k + 1);
    if horizon < WINDOW_LEN {
        return Vec::new();
    }
    let spans: Vec<(i64, usize, usize)> = tracks
        .iter()
        .map(|(&id, t)| (id, *t.keys().next().unwrap(), *t.keys().next_back().unwrap()))
        .collect();

    let mut windows = Vec::new();
    for start in 0..=horizon - WINDOW_LEN {
        let end = start + WINDOW_LEN;
        let mut ped_ids = Vec::new();
        let mut present = vec![Vec::new(); WINDOW_LEN];
        let mut scene_xy = vec![Vec::new(); WINDOW_LEN];
        let mut targets = Vec::new();
        for &(id, first, last) in &spans {
            if last < start || first >= end {
                continue;
            }
            let track = &tracks[&id];
            let mut run = [false; WINDOW_LEN];
            let mut xy = [[0.0; 2]; WINDOW_LEN];
            let mut started = false;
            for t in 0..WINDOW_LEN {
                match track.get(&(start + t)) {
                    Some(&pos) => {
                        run[t] = true;
                        xy[t] = pos;
                        started = true;
                    }
                    None if started => break,
                    None => {}
                }
            }
            if !started {
                continue;
            }
            ped_ids.push(id);
            targets.push(run.iter().all(|&r| r));
            for t in 0..WINDOW_LEN {
                present[t].push(run[t]);
                scene_xy[t].push(xy[t]);
            }
        }
        if !targets.iter().any(|&t| t) {
            continue;
        }
        windows.push(PedestrianWindow {
            scene: scene.name.clone(),
            start_frame: base + start as i64 * step,
            frame_step: step,
            ped_ids,
            present,
            targets,
            model_xy: scene_xy.clone(),
            scene_xy,
            normalization: Normalization::Identity,
        });
    }
    windows
}

/// Fills `model_xy` from the scene-frame coordinates. `scene_xy` is never
/// modified.
pub fn normalize(window: &PedestrianWindow, mode: NormalizationMode) -> PedestrianWindow {
    let mut out = window.clone();
    let (steps, peds) = (window.len(), window.num_pedestrians());
    match mode {
        NormalizationMode::Nabs => {
            let anchor = OBS_LEN - 1;
            let origins: Vec<[f64; 2]> = (0..peds)
                .map(|p| {
                    if window.present[anchor][p] {
                        window.scene_xy[anchor][p]
                    } else {
                        window
                            .first_present(p)
                            .map_or([0.0; 2], |t| window.scene_xy[t][p])
                    }
                })
                .collect();
            for t in 0..steps {
                for p in 0..peds {
                    out.model_xy[t][p] = if window.present[t][p] {
                        let s = window.scene_xy[t][p];
                        [s[0] - origins[p][0], s[1] - origins[p][1]]
                    } else {
                        [0.0; 2]
                    };
                }
            }
            out.normalization = Normalization::Nabs { origins };
        }
        NormalizationMode::Rela => {
            for t in 0..steps {
                for p in 0..peds {
                    out.model_xy[t][p] = if window.present[t][p] && t > 0 && window.present[t - 1][p] {
                        let (a, b) = (window.scene_xy[t][p], window.scene_xy[t - 1][p]);
                        [a[0] - b[0], a[1] - b[1]]
                    } else {
                        [0.0; 2]
                    };
                }
            }
            out.normalization = Normalization::Rela;
        }
    }
    out
}

fn rotate_point(p: [f64; 2], cos: f64, sin: f64) -> [f64; 2] {
    [cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]]
}

/// Rotates scene-frame and model-frame coordinates (and Nabs origins) about
/// the scene origin.
pub fn rotate_window(window: &mut PedestrianWindow, angle: f64) {
    if angle == 0.0 {
        return;
    }
    let (sin, cos) = angle.sin_cos();
    for t in 0..window.len() {
        for p in 0..window.num_pedestrians() {
            if window.present[t][p] {
                window.scene_xy[t][p] = rotate_point(window.scene_xy[t][p], cos, sin);
                window.model_xy[t][p] = rotate_point(window.model_xy[t][p], cos, sin);
            }
        }
    }
    if let Normalization::Nabs { origins } = &mut window.normalization {
        for o in origins.iter_mut() {
            *o = rotate_point(*o, cos, sin);
        }
    }
}

/// Windows processed together in one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct MiniBatch {
    pub windows: Vec<PedestrianWindow>,
    /// Rotation already applied to every window, radians.
    pub angle: f64,
}

pub fn random_rotate(batch: &mut MiniBatch, angle: f64) {
    for w in &mut batch.windows {
        rotate_window(w, angle);
    }
    batch.angle += angle;
}

/// Shuffles with a seeded generator and chunks into batches; the last batch
/// may be short.
pub fn make_batches(windows: &[PedestrianWindow], batch_size: usize, seed: u64) -> Vec<MiniBatch> {
    assert!(batch_size > 0);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order
        .chunks(batch_size)
        .map(|chunk| MiniBatch {
            windows: chunk.iter().map(|&i| windows[i].clone()).collect(),
            angle: 0.0,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{parse_str, TrackPoint};
    use proptest::prelude::*;

    fn scene_from(tracks: &[(i64, std::ops::Range<i64>)]) -> Scene {
        let mut points = Vec::new();
        for (id, frames) in tracks {
            for f in frames.clone() {
                points.push(TrackPoint {
                    frame_id: f * 10,
                    ped_id: *id,
                    x: f as f64 + *id as f64,
                    y: 0.5 * f as f64,
                });
            }
        }
        points.sort_by_key(|p| (p.ped_id, p.frame_id));
        Scene {
            name: "toy".into(),
            frame_step: 10,
            points,
        }
    }

    #[test]
    fn window_count_for_single_track() {
        let scene = scene_from(&[(1, 0..25)]);
        let w = slide_windows(&scene);
        assert_eq!(w.len(), 6);
        assert!(w.iter().all(|w| w.targets == vec![true]));
        assert_eq!(w[3].start_frame, 30);
    }

    #[test]
    fn partial_pedestrian_is_neighbor_only() {
        let scene = scene_from(&[(1, 0..40), (2, 5..31)]);
        let w = &slide_windows(&scene)[0];
        assert_eq!(w.ped_ids, vec![1, 2]);
        assert_eq!(w.targets, vec![true, false]);
        for t in 0..WINDOW_LEN {
            assert_eq!(w.present[t][1], t >= 5);
        }
    }

    #[test]
    fn re_entry_keeps_first_run() {
        let mut scene = scene_from(&[(1, 0..20), (2, 2..6)]);
        let mut extra = scene_from(&[(2, 10..14)]).points;
        scene.points.append(&mut extra);
        scene.points.sort_by_key(|p| (p.ped_id, p.frame_id));
        let w = &slide_windows(&scene)[0];
        let run: Vec<bool> = (0..WINDOW_LEN).map(|t| w.present[t][1]).collect();
        assert_eq!(run.iter().filter(|&&r| r).count(), 4);
        assert!(run[2..6].iter().all(|&r| r));
    }

    #[test]
    fn nabs_origin_is_last_observed_step() {
        let scene = scene_from(&[(1, 0..20), (2, 9..20)]);
        let w = normalize(&slide_windows(&scene)[0], NormalizationMode::Nabs);
        assert_eq!(w.model_xy[OBS_LEN - 1][0], [0.0, 0.0]);
        // absent at the anchor: shifted by its first position
        assert_eq!(w.model_xy[9][1], [0.0, 0.0]);
        let raw = slide_windows(&scene)[0].clone();
        assert_eq!(w.scene_xy, raw.scene_xy);
    }

    #[test]
    fn rela_constant_velocity() {
        let text: String = (0..20).map(|f| format!("{} 1 {}.0 2.0\n", f * 10, f)).collect();
        let scene = parse_str("s", "mem", &text).unwrap();
        let w = normalize(&slide_windows(&scene)[0], NormalizationMode::Rela);
        assert_eq!(w.model_xy[0][0], [0.0, 0.0]);
        for t in 1..WINDOW_LEN {
            assert_eq!(w.model_xy[t][0], [1.0, 0.0]);
        }
        assert_eq!(w.to_scene(0, [1.0, 0.0], [4.0, 2.0]), [5.0, 2.0]);
    }

    #[test]
    fn rotation_examples() {
        let scene = scene_from(&[(1, 0..20)]);
        let base = normalize(&slide_windows(&scene)[0], NormalizationMode::Nabs);
        let mut same = base.clone();
        rotate_window(&mut same, 0.0);
        assert_eq!(same, base);
        let text = "0 1 1.0 0.0\n".to_string()
            + &(1..20).map(|f| format!("{} 1 1.0 0.0\n", f * 10)).collect::<String>();
        let mut w = slide_windows(&parse_str("s", "m", &text).unwrap())[0].clone();
        rotate_window(&mut w, std::f64::consts::PI);
        assert!((w.scene_xy[0][0][0] + 1.0).abs() < 1e-15);
        assert!(w.scene_xy[0][0][1].abs() < 1e-15);
    }

    #[test]
    fn batches_keep_partial_tail_and_seed() {
        let scene = scene_from(&[(1, 0..36)]);
        let windows = slide_windows(&scene);
        assert_eq!(windows.len(), 17);
        let sizes: Vec<usize> = make_batches(&windows, 8, 1).iter().map(|b| b.windows.len()).collect();
        assert_eq!(sizes, vec![8, 8, 1]);
        let a = make_batches(&windows, 8, 42);
        let b = make_batches(&windows, 8, 42);
        assert_eq!(a, b);
    }

    #[test]
    fn different_seeds_permute_differently() {
        let scene = scene_from(&[(1, 0..140)]);
        let windows = slide_windows(&scene);
        assert!(windows.len() >= 100);
        let order = |seed| -> Vec<i64> {
            make_batches(&windows, 8, seed)
                .iter()
                .flat_map(|b| b.windows.iter().map(|w| w.start_frame))
                .collect()
        };
        assert_ne!(order(1), order(2));
        let mut sorted = order(1);
        sorted.sort_unstable();
        assert_eq!(sorted, windows.iter().map(|w| w.start_frame).collect::<Vec<_>>());
    }

    proptest! {
        #[test]
        fn rotation_preserves_pairwise_distances(angle in 0.0f64..std::f64::consts::TAU, shift in -20.0f64..20.0) {
            let mut scene = scene_from(&[(1, 0..20), (2, 0..20), (3, 3..20)]);
            for p in &mut scene.points { p.x += shift; }
            let base = normalize(&slide_windows(&scene)[0], NormalizationMode::Nabs);
            let mut rot = base.clone();
            rotate_window(&mut rot, angle);
            for t in 0..WINDOW_LEN {
                for a in 0..3 {
                    for b in 0..3 {
                        if !(base.present[t][a] && base.present[t][b]) { continue; }
                        let d = |w: &PedestrianWindow| {
                            let (p, q) = (w.scene_xy[t][a], w.scene_xy[t][b]);
                            ((p[0] - q[0]).powi(2) + (p[1] - q[1]).powi(2)).sqrt()
                        };
                        prop_assert!((d(&base) - d(&rot)).abs() < 1e-9);
                    }
                }
            }
            // model frame stays consistent with the rotated scene frame
            for t in 0..WINDOW_LEN {
                for p in 0..3 {
                    if !rot.present[t][p] { continue; }
                    let back = rot.to_scene(p, rot.model_xy[t][p], [0.0; 2]);
                    prop_assert!((back[0] - rot.scene_xy[t][p][0]).abs() < 1e-9);
                    prop_assert!((back[1] - rot.scene_xy[t][p][1]).abs() < 1e-9);
                }
            }
        }
    }
}
