use std::path::{Path, PathBuf};

/// One of the five benchmark recordings.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SceneSpec {
    pub name: &'static str,
    pub label: &'static str,
    /// File names tried, in order, under the dataset root.
    pub files: &'static [&'static str],
}

pub const SCENES: [SceneSpec; 5] = [
    SceneSpec {
        name: "eth_univ",
        label: "ETH-univ",
        files: &["eth_univ.txt", "biwi_eth.txt", "eth.txt"],
    },
    SceneSpec {
        name: "eth_hotel",
        label: "ETH-hotel",
        files: &["eth_hotel.txt", "biwi_hotel.txt", "hotel.txt"],
    },
    SceneSpec {
        name: "zara01",
        label: "UCY-zara01",
        files: &["zara01.txt", "crowds_zara01.txt"],
    },
    SceneSpec {
        name: "zara02",
        label: "UCY-zara02",
        files: &["zara02.txt", "crowds_zara02.txt"],
    },
    SceneSpec {
        name: "ucy_univ",
        label: "UCY-univ",
        files: &["ucy_univ.txt", "students003.txt", "univ.txt"],
    },
];

/// Frames per 0.4 s step. ETH-univ is an accelerated recording; with the
/// frame-rate correction enabled it is resampled every 6 frames.
pub fn frame_stride(scene: &str, eth_univ_correction: bool) -> i64 {
    if scene == "eth_univ" && eth_univ_correction {
        6
    } else {
        10
    }
}

/// First existing file for `scene` under `root`. Unknown scene names are
/// looked up as `<root>/<scene>.txt`.
pub fn locate_scene(root: &Path, scene: &str) -> Option<PathBuf> {
    let candidates: Vec<String> = match SCENES.iter().find(|s| s.name == scene) {
        Some(spec) => spec.files.iter().map(|f| f.to_string()).collect(),
        None => vec![format!("{scene}.txt")],
    };
    candidates
        .into_iter()
        .map(|f| root.join(f))
        .find(|p| p.is_file())
}
