mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use srlstm::eval::{fad, mad};

#[test]
fn constant_offset() {
    let gt: Vec<Vec<[f64; 2]>> = (0..3).map(|p| (0..12).map(|t| [t as f64, p as f64]).collect()).collect();
    let pred: Vec<Vec<[f64; 2]>> = gt
        .iter()
        .map(|tr| tr.iter().map(|&[x, y]| [x + 0.3, y + 0.4]).collect())
        .collect();
    assert!((mad(&pred, &gt).unwrap() - 0.5).abs() < 1e-15);
    assert!((fad(&pred, &gt).unwrap() - 0.5).abs() < 1e-15);
}

#[test]
fn random_cases_match_flat_loops() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..200 {
        let peds = rng.gen_range(1..20);
        let steps = rng.gen_range(1..13);
        let mut draw = || -> Vec<Vec<[f64; 2]>> {
            (0..peds)
                .map(|_| (0..steps).map(|_| [rng.gen_range(-20.0..20.0), rng.gen_range(-20.0..20.0)]).collect())
                .collect()
        };
        let (pred, gt) = (draw(), draw());
        let (m, f) = common::flat_metrics(&pred, &gt);
        assert!((mad(&pred, &gt).unwrap() - m).abs() <= 1e-12);
        assert!((fad(&pred, &gt).unwrap() - f).abs() <= 1e-12);
    }
}
