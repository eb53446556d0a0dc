//! Prepared-window cache keyed by a hash of the raw file and every setting
//! that changes the windows.

use std::fs;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use sha2::{Digest, Sha256};

use srlstm::data::{frame_stride, locate_scene, PedestrianWindow, SCENES};
use srlstm::eval::{load_scene_windows, Preprocessing};

use crate::error::CliError;

const FORMAT: &str = "srlstm-windows-v1";

#[derive(Clone, Debug, PartialEq)]
pub struct Prepared {
    pub scene: String,
    pub windows: Vec<PedestrianWindow>,
    pub hash: String,
    pub path: PathBuf,
    pub hit: bool,
}

/// Path reported when no file exists for `scene`.
fn expected_path(root: &Path, scene: &str) -> PathBuf {
    match SCENES.iter().find(|s| s.name == scene) {
        Some(spec) => root.join(spec.files[0]),
        None => root.join(format!("{scene}.txt")),
    }
}

pub fn cache_key(raw: &[u8], scene: &str, preproc: &Preprocessing) -> String {
    let mut h = Sha256::new();
    h.update(FORMAT.as_bytes());
    h.update([0]);
    h.update(scene.as_bytes());
    h.update([0]);
    h.update(format!("{:?}", preproc.normalization).as_bytes());
    h.update(frame_stride(scene, preproc.eth_univ_correction).to_le_bytes());
    h.update(raw);
    format!("{:x}", h.finalize())
}

/// Windows of `scene`, read from the cache when the key matches.
pub fn prepare_scene(root: &Path, cache_dir: &Path, scene: &str, preproc: &Preprocessing) -> Result<Prepared, CliError> {
    let source = locate_scene(root, scene).ok_or_else(|| CliError::Missing(expected_path(root, scene)))?;
    let raw = fs::read(&source).map_err(|e| CliError::io(&source, e))?;
    let hash = cache_key(&raw, scene, preproc);
    let path = cache_dir.join(format!("{scene}-{}.json", &hash[..16]));
    if let Ok(file) = fs::File::open(&path) {
        if let Ok(windows) = serde_json::from_reader::<_, Vec<PedestrianWindow>>(BufReader::new(file)) {
            return Ok(Prepared {
                scene: scene.to_string(),
                windows,
                hash,
                path,
                hit: true,
            });
        }
    }
    let windows = load_scene_windows(root, scene, preproc)?;
    fs::create_dir_all(cache_dir).map_err(|e| CliError::io(cache_dir, e))?;
    let tmp = path.with_extension(format!("json.{}.tmp", std::process::id()));
    {
        let mut w = BufWriter::new(fs::File::create(&tmp).map_err(|e| CliError::io(&tmp, e))?);
        serde_json::to_writer(&mut w, &windows).map_err(|e| CliError::Other(e.to_string()))?;
        w.flush().map_err(|e| CliError::io(&tmp, e))?;
    }
    fs::rename(&tmp, &path).map_err(|e| CliError::io(&path, e))?;
    Ok(Prepared {
        scene: scene.to_string(),
        windows,
        hash,
        path,
        hit: false,
    })
}
