//! Trajectory files, resampling to the 0.4 s grid, windowing and
//! augmentation.

mod scenes;
pub mod synth;
mod window;

use std::collections::HashMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::DataError;

pub use scenes::{frame_stride, locate_scene, SceneSpec, SCENES};
pub use window::{
    make_batches, normalize, random_rotate, rotate_window, slide_windows, MiniBatch,
    Normalization, NormalizationMode, PedestrianWindow, OBS_LEN, PRED_LEN, WINDOW_LEN,
};

/// One annotated position.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrackPoint {
    pub frame_id: i64,
    pub ped_id: i64,
    pub x: f64,
    pub y: f64,
}

/// All observations of one recording, sorted by `(ped_id, frame_id)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    /// Frame-id distance between consecutive time steps.
    pub frame_step: i64,
    pub points: Vec<TrackPoint>,
}

impl Scene {
    pub fn pedestrian_count(&self) -> usize {
        let mut ids: Vec<i64> = self.points.iter().map(|p| p.ped_id).collect();
        ids.dedup();
        ids.len()
    }

    /// `(first, last)` frame id, if any.
    pub fn frame_span(&self) -> Option<(i64, i64)> {
        let lo = self.points.iter().map(|p| p.frame_id).min()?;
        let hi = self.points.iter().map(|p| p.frame_id).max()?;
        Some((lo, hi))
    }
}

pub fn parse_dataset(path: &Path) -> Result<Scene, DataError> {
    let text = std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_str(&name, &path.display().to_string(), &text)
}

fn parse_int(field: &str) -> Option<i64> {
    if let Ok(v) = field.parse::<i64>() {
        return Some(v);
    }
    let f: f64 = field.parse().ok()?;
    (f.fract() == 0.0 && f.abs() < 9.0e15).then_some(f as i64)
}

/// Parses whitespace-separated `frame_id ped_id x y` rows. Blank lines and
/// lines starting with `#` are ignored; integer columns may be written as
/// floats (`780.0`).
pub fn parse_str(name: &str, origin: &str, text: &str) -> Result<Scene, DataError> {
    let mut points = Vec::new();
    let mut last_frame: HashMap<i64, i64> = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let err = |msg: String| DataError::Parse {
            path: origin.to_string(),
            line: lineno + 1,
            msg,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(err(format!("expected 4 columns, found {}", fields.len())));
        }
        let frame_id = parse_int(fields[0]).ok_or_else(|| err(format!("bad frame id `{}`", fields[0])))?;
        let ped_id = parse_int(fields[1]).ok_or_else(|| err(format!("bad pedestrian id `{}`", fields[1])))?;
        let coord = |s: &str| -> Result<f64, DataError> {
            s.parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| err(format!("bad coordinate `{s}`")))
        };
        let (x, y) = (coord(fields[2])?, coord(fields[3])?);
        if let Some(&prev) = last_frame.get(&ped_id) {
            if frame_id == prev {
                return Err(DataError::Duplicate { frame_id, ped_id });
            }
            if frame_id < prev {
                return Err(DataError::NonMonotone { frame_id, ped_id });
            }
        }
        last_frame.insert(ped_id, frame_id);
        points.push(TrackPoint {
            frame_id,
            ped_id,
            x,
            y,
        });
    }
    points.sort_by_key(|p| (p.ped_id, p.frame_id));
    let frame_step = infer_frame_step(&points);
    Ok(Scene {
        name: name.to_string(),
        frame_step,
        points,
    })
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a.abs()
    } else {
        gcd(b, a % b)
    }
}

fn infer_frame_step(points: &[TrackPoint]) -> i64 {
    let step = points
        .windows(2)
        .filter(|w| w[0].ped_id == w[1].ped_id)
        .fold(0, |acc, w| gcd(acc, w[1].frame_id - w[0].frame_id));
    step.max(1)
}

/// Writes the scene in the input format, frame-major like the public files.
/// Reals use the shortest representation that parses back exactly.
pub fn write_scene<W: Write>(scene: &Scene, w: &mut W) -> std::io::Result<()> {
    let mut rows = scene.points.clone();
    rows.sort_by_key(|p| (p.frame_id, p.ped_id));
    for p in rows {
        writeln!(w, "{}\t{}\t{}\t{}", p.frame_id, p.ped_id, p.x, p.y)?;
    }
    Ok(())
}

/// Keeps every `stride`-th frame counted from the first frame of the scene.
pub fn resample(scene: &Scene, stride: i64) -> Result<Scene, DataError> {
    if stride <= 0 {
        return Err(DataError::BadStride(stride));
    }
    let base = scene.frame_span().map_or(0, |(lo, _)| lo);
    Ok(Scene {
        name: scene.name.clone(),
        frame_step: stride,
        points: scene
            .points
            .iter()
            .filter(|p| (p.frame_id - base).rem_euclid(stride) == 0)
            .copied()
            .collect(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn empty_and_single_row() {
        let s = parse_str("s", "mem", "").unwrap();
        assert!(s.points.is_empty());
        let s = parse_str("s", "mem", "0 1 2.0 3.0\n").unwrap();
        assert_eq!(
            s.points,
            vec![TrackPoint {
                frame_id: 0,
                ped_id: 1,
                x: 2.0,
                y: 3.0
            }]
        );
    }

    #[test]
    fn accepts_float_ids_and_tabs() {
        let s = parse_str("s", "mem", "780.0\t1.0\t8.46\t3.59\n790.0\t1.0\t9.0\t3.6\n").unwrap();
        assert_eq!(s.points[1].frame_id, 790);
        assert_eq!(s.frame_step, 10);
    }

    #[test]
    fn malformed_rows_report_line() {
        let err = parse_str("s", "f.txt", "0 1 2 3\n\n10 1 x 3\n").unwrap_err();
        match err {
            DataError::Parse { line, .. } => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
        assert!(matches!(
            parse_str("s", "f", "0 1 2\n"),
            Err(DataError::Parse { line: 1, .. })
        ));
        assert!(matches!(
            parse_str("s", "f", "0 1 nan 2\n"),
            Err(DataError::Parse { .. })
        ));
    }

    #[test]
    fn duplicates_and_order_violations() {
        assert!(matches!(
            parse_str("s", "f", "0 1 0 0\n0 1 1 1\n"),
            Err(DataError::Duplicate { frame_id: 0, ped_id: 1 })
        ));
        assert!(matches!(
            parse_str("s", "f", "10 1 0 0\n0 1 1 1\n"),
            Err(DataError::NonMonotone { frame_id: 0, ped_id: 1 })
        ));
    }

    #[test]
    fn sorted_by_pedestrian_then_frame() {
        let s = parse_str("s", "f", "0 2 0 0\n0 1 0 0\n10 2 1 1\n10 1 1 1\n").unwrap();
        let keys: Vec<_> = s.points.iter().map(|p| (p.ped_id, p.frame_id)).collect();
        assert_eq!(keys, vec![(1, 0), (1, 10), (2, 0), (2, 10)]);
        assert_eq!(s.pedestrian_count(), 2);
        assert_eq!(s.frame_span(), Some((0, 10)));
    }

    #[test]
    fn resample_keeps_aligned_frames() {
        let s = parse_str("s", "f", "0 1 0 0\n10 1 1 0\n20 1 2 0\n").unwrap();
        let r = resample(&s, 10).unwrap();
        assert_eq!(r.points.len(), 3);
        assert_eq!(r.frame_step, 10);
        let text: String = (0..=60).map(|f| format!("{f} 1 {f}.0 0\n")).collect();
        let dense = parse_str("s", "f", &text).unwrap();
        assert_eq!(resample(&dense, 6).unwrap().points.len(), 11);
        assert_eq!(resample(&dense, 10).unwrap().points.len(), 7);
        assert!(matches!(resample(&dense, 0), Err(DataError::BadStride(0))));
    }

    proptest! {
        #[test]
        fn write_then_parse_round_trips(
            rows in proptest::collection::vec((0i64..50, 0i64..6, -100.0f64..100.0, -100.0f64..100.0), 0..60)
        ) {
            let mut seen = std::collections::HashSet::new();
            let mut points: Vec<TrackPoint> = rows
                .into_iter()
                .filter(|(f, p, _, _)| seen.insert((*f, *p)))
                .map(|(f, p, x, y)| TrackPoint { frame_id: f * 10, ped_id: p, x, y })
                .collect();
            points.sort_by_key(|p| (p.ped_id, p.frame_id));
            let scene = Scene { name: "s".into(), frame_step: 10, points };
            let mut buf = Vec::new();
            write_scene(&scene, &mut buf).unwrap();
            let back = parse_str("s", "mem", std::str::from_utf8(&buf).unwrap()).unwrap();
            prop_assert_eq!(back.points, scene.points);
        }
    }
}
