mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srlstm::data::{normalize, resample, slide_windows, synth, NormalizationMode, PedestrianWindow};
use srlstm::eval::variant_config;
use srlstm::model::{unroll, UnrollOptions};
use srlstm::train::rollout;

use common::{model_with, permute_window};

fn pool() -> Vec<PedestrianWindow> {
    ["zara01", "eth_univ", "ucy_univ"]
        .iter()
        .flat_map(|s| {
            let scene = resample(&synth::synthetic_scene(s), 10).unwrap();
            slide_windows(&scene)
                .into_iter()
                .step_by(29)
                .map(|w| normalize(&w, NormalizationMode::Nabs))
                .collect::<Vec<_>>()
        })
        .filter(|w| w.num_pedestrians() > 2)
        .collect()
}

#[test]
fn relabelling_permutes_predictions_exactly() {
    let windows = pool();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for k in 0..20 {
        let w = &windows[rng.gen_range(0..windows.len())];
        let variant = [5, 7, 9, 4][k % 4];
        let model = model_with(variant_config(variant).unwrap(), k as u64);
        let mut perm: Vec<usize> = (0..w.num_pedestrians()).collect();
        perm.shuffle(&mut rng);
        let pw = permute_window(w, &perm);

        let a = unroll(&model.params, &model.config, &[w], &UnrollOptions::default()).unwrap();
        let b = unroll(&model.params, &model.config, &[&pw], &UnrollOptions::default()).unwrap();
        for t in 1..w.len() {
            for (p, &q) in perm.iter().enumerate() {
                if w.present[t - 1][q] {
                    assert_eq!(b.predicted_model[t][p], a.predicted_model[t][q]);
                }
            }
        }

        let ra = rollout(&model, w, 8).unwrap();
        let rb = rollout(&model, &pw, 8).unwrap();
        for (p, id) in rb.ped_ids.iter().enumerate() {
            let q = ra.ped_ids.iter().position(|x| x == id).unwrap();
            assert_eq!(rb.predictions[p], ra.predictions[q]);
        }
    }
}
