//! Deterministic crowd simulator producing files in the benchmark format.
//!
//! Groups enter at the borders of a rectangle and walk to the opposite side.
//! Leaders wander around the goal direction, followers keep a lateral slot
//! next to their leader, and everyone is pushed away from members of other
//! groups by an exponential force. Positions carry ~1 cm annotation noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::{write_scene, Scene, TrackPoint, SCENES};

#[derive(Clone, Debug, PartialEq)]
pub struct SynthParams {
    pub seed: u64,
    /// Simulated wall-clock time, seconds.
    pub duration: f64,
    /// Seconds per frame id. The public files use 0.04; the accelerated
    /// recording is emulated with 0.4 / 6.
    pub frame_seconds: f64,
    /// Frames between written rows.
    pub write_every: i64,
    pub width: f64,
    pub height: f64,
    /// Group arrivals per second.
    pub arrival_rate: f64,
    pub preferred_speed: f64,
    /// Diffusion of the leaders' heading wander, rad/√s.
    pub wander: f64,
    pub noise_sd: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        Self {
            seed: 0,
            duration: 120.0,
            frame_seconds: 0.04,
            write_every: 2,
            width: 16.0,
            height: 12.0,
            arrival_rate: 0.45,
            preferred_speed: 1.25,
            wander: 0.08,
            noise_sd: 0.01,
        }
    }
}

/// Parameters of the stand-in for a named benchmark scene.
pub fn scene_params(name: &str) -> SynthParams {
    let base = SynthParams::default();
    match name {
        "eth_univ" => SynthParams {
            seed: 11,
            frame_seconds: 0.4 / 6.0,
            arrival_rate: 0.5,
            ..base
        },
        "eth_hotel" => SynthParams {
            seed: 23,
            arrival_rate: 0.25,
            width: 12.0,
            preferred_speed: 1.1,
            ..base
        },
        "zara01" => SynthParams {
            seed: 37,
            arrival_rate: 0.35,
            ..base
        },
        "zara02" => SynthParams {
            seed: 41,
            arrival_rate: 0.45,
            ..base
        },
        "ucy_univ" => SynthParams {
            seed: 53,
            arrival_rate: 0.8,
            preferred_speed: 1.0,
            ..base
        },
        other => SynthParams {
            seed: other.bytes().fold(7u64, |h, b| h.wrapping_mul(31).wrapping_add(b as u64)),
            ..base
        },
    }
}

struct Walker {
    id: i64,
    pos: [f64; 2],
    vel: [f64; 2],
    speed: f64,
    group: usize,
    /// `None` for leaders; otherwise the leader's index and the lateral slot.
    follow: Option<(usize, f64)>,
    goal: [f64; 2],
    wander: f64,
    alive: bool,
}

fn norm(v: [f64; 2]) -> f64 {
    v[0].hypot(v[1])
}

fn unit(v: [f64; 2]) -> [f64; 2] {
    let n = norm(v).max(1e-9);
    [v[0] / n, v[1] / n]
}

/// Random point on the border and a goal on the opposite side.
fn entry_and_goal(rng: &mut ChaCha8Rng, w: f64, h: f64) -> ([f64; 2], [f64; 2]) {
    let side = rng.gen_range(0..4);
    let (u, v) = (rng.gen::<f64>(), rng.gen::<f64>());
    let m = 1.0;
    match side {
        0 => ([-m, u * h], [w + 2.0 * m, v * h]),
        1 => ([w + m, u * h], [-2.0 * m, v * h]),
        2 => ([u * w, -m], [v * w, h + 2.0 * m]),
        _ => ([u * w, h + m], [v * w, -2.0 * m]),
    }
}

pub fn simulate(name: &str, params: &SynthParams) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let noise = Normal::new(0.0, params.noise_sd.max(0.0)).unwrap();
    let wander_kick = Normal::new(0.0, 1.0).unwrap();
    let dt = params.frame_seconds * params.write_every as f64;
    let steps = (params.duration / dt).ceil() as i64;
    let (w, h) = (params.width, params.height);

    // Walkers are never removed so follower indices stay valid.
    let mut walkers: Vec<Walker> = Vec::new();
    let mut next_id = 1;
    let mut next_group = 0;
    let mut points = Vec::new();

    for step in 0..steps {
        // arrivals
        if rng.gen::<f64>() < params.arrival_rate * dt {
            let size = match rng.gen::<f64>() {
                u if u < 0.45 => 1,
                u if u < 0.85 => 2,
                _ => 3,
            };
            let (start, goal) = entry_and_goal(&mut rng, w, h);
            let heading = unit([goal[0] - start[0], goal[1] - start[1]]);
            let lateral = [-heading[1], heading[0]];
            let speed = params.preferred_speed * (1.0f64 + 0.15 * wander_kick.sample(&mut rng)).clamp(0.6, 1.5);
            let leader = walkers.len();
            for k in 0..size {
                let slot = [0.0, 0.7, -0.7][k];
                let pos = [
                    start[0] + lateral[0] * slot - heading[0] * 0.3 * k as f64,
                    start[1] + lateral[1] * slot - heading[1] * 0.3 * k as f64,
                ];
                walkers.push(Walker {
                    id: next_id,
                    pos,
                    vel: [heading[0] * speed, heading[1] * speed],
                    speed,
                    group: next_group,
                    follow: (k > 0).then_some((leader, slot)),
                    goal,
                    wander: 0.0,
                    alive: true,
                });
                next_id += 1;
            }
            next_group += 1;
        }

        let snapshot: Vec<([f64; 2], [f64; 2], usize, bool)> =
            walkers.iter().map(|a| (a.pos, a.vel, a.group, a.alive)).collect();
        for i in 0..walkers.len() {
            if !walkers[i].alive {
                continue;
            }
            let a = &walkers[i];
            let desired = match a.follow {
                Some((leader, slot)) if snapshot[leader].3 => {
                    let (lp, lv, _, _) = snapshot[leader];
                    let head = unit(lv);
                    let target = [lp[0] - head[1] * slot, lp[1] + head[0] * slot];
                    [
                        lv[0] + 0.8 * (target[0] - a.pos[0]),
                        lv[1] + 0.8 * (target[1] - a.pos[1]),
                    ]
                }
                _ => {
                    let dir = unit([a.goal[0] - a.pos[0], a.goal[1] - a.pos[1]]);
                    let (s, c) = a.wander.sin_cos();
                    [a.speed * (c * dir[0] - s * dir[1]), a.speed * (s * dir[0] + c * dir[1])]
                }
            };
            let mut force = [(desired[0] - a.vel[0]) / 0.5, (desired[1] - a.vel[1]) / 0.5];
            for (j, &(p, _, group, alive)) in snapshot.iter().enumerate() {
                if j == i || !alive || group == a.group {
                    continue;
                }
                let d = [a.pos[0] - p[0], a.pos[1] - p[1]];
                let dist = norm(d);
                if dist > 4.0 {
                    continue;
                }
                let n = unit(d);
                let mag = 2.5 * ((0.6 - dist) / 0.35).exp();
                force[0] += mag * n[0];
                force[1] += mag * n[1];
            }
            let a = &mut walkers[i];
            a.vel[0] += force[0] * dt;
            a.vel[1] += force[1] * dt;
            let cap = 1.6 * a.speed;
            let sp = norm(a.vel);
            if sp > cap {
                a.vel = [a.vel[0] * cap / sp, a.vel[1] * cap / sp];
            }
            // Ornstein-Uhlenbeck wander angle, decorrelates in ~5 s
            a.wander += -0.2 * a.wander * dt + params.wander * dt.sqrt() * wander_kick.sample(&mut rng);
        }
        for a in walkers.iter_mut().filter(|a| a.alive) {
            a.pos[0] += a.vel[0] * dt;
            a.pos[1] += a.vel[1] * dt;
            let margin = 1.5;
            if a.pos[0] < -margin || a.pos[0] > w + margin || a.pos[1] < -margin || a.pos[1] > h + margin {
                a.alive = false;
                continue;
            }
            points.push(TrackPoint {
                frame_id: step * params.write_every,
                ped_id: a.id,
                x: ((a.pos[0] + noise.sample(&mut rng)) * 1e4).round() / 1e4,
                y: ((a.pos[1] + noise.sample(&mut rng)) * 1e4).round() / 1e4,
            });
        }
    }
    points.sort_by_key(|p| (p.ped_id, p.frame_id));
    Scene {
        name: name.to_string(),
        frame_step: params.write_every,
        points,
    }
}

pub fn synthetic_scene(name: &str) -> Scene {
    simulate(name, &scene_params(name))
}

/// Writes stand-ins for the five benchmark scenes into `dir`, one
/// `<name>.txt` per scene.
pub fn write_synthetic_dataset(dir: &Path) -> std::io::Result<()> {
    std::fs::create_dir_all(dir)?;
    for spec in SCENES {
        let scene = synthetic_scene(spec.name);
        let mut file = std::io::BufWriter::new(std::fs::File::create(dir.join(format!("{}.txt", spec.name)))?);
        write_scene(&scene, &mut file)?;
    }
    Ok(())
}
