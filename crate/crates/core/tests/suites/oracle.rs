//! Exact checks of the engine on hard (one-hot) surfaces against pixel-wise
//! brute force, and ordering guarantees on random soft inputs.

use std::time::{Duration, Instant};

use layerseg::topo::{
    binarize, cumulative_maps, decompose_layers, enforce_map_ordering, expected_positions,
    rectify_surfaces, run_engine, Grid3, SurfaceCurveSet, SurfaceProbabilityMap,
};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const MAX_SURFACES: usize = 5;
pub const MAX_ROWS: usize = 32;
pub const MAX_COLS: usize = 16;
/// Layer entries at or above this count as non-negative.
pub const LAYER_FLOOR: f64 = -1e-6;

#[derive(Clone, Debug)]
pub struct OracleReport {
    pub instances: usize,
    /// Instances with at least one pixel, layer or position differing.
    pub mismatched_instances: usize,
    pub elapsed: Duration,
}

#[derive(Clone, Debug)]
pub struct OrderingReport {
    pub inputs: usize,
    pub ordering_violations: usize,
    pub negative_layer_entries: usize,
    pub min_layer_entry: f64,
}

/// Layer of pixel `(r, i)` from integer surface rows: the `s` with
/// `y^s ≤ r < y^{s+1}`, if any.
fn brute_force_layer(rows: &[Vec<usize>], r: usize, i: usize) -> Option<usize> {
    let s_n = rows.len();
    (0..s_n).find(|&s| rows[s][i] <= r && (s + 1 == s_n || r < rows[s + 1][i]))
}

fn instance_matches<F: Float>(rows: &[Vec<usize>], h: usize) -> bool {
    let (s_n, w) = (rows.len(), rows[0].len());
    let one_hot = Grid3::from_fn(s_n, h, w, |s, r, i| {
        if rows[s][i] == r {
            F::one()
        } else {
            F::zero()
        }
    });
    let p = SurfaceProbabilityMap::try_new(one_hot).expect("one-hot columns");
    let y = rectify_surfaces(&expected_positions(&p));
    let layers = decompose_layers(&enforce_map_ordering(&cumulative_maps(&p))).expect("ordered");
    let hard = binarize(layers.data());
    let positions_ok =
        (0..s_n).all(|s| (0..w).all(|i| y.get(s, i) == F::from(rows[s][i]).unwrap()));
    let pixels_ok = (0..s_n).all(|s| {
        (0..h).all(|r| {
            (0..w).all(|i| {
                let want = brute_force_layer(rows, r, i) == Some(s);
                let got = hard[(s * h + r) * w + i];
                got == if want { F::one() } else { F::zero() }
            })
        })
    });
    positions_ok && pixels_ok
}

/// Random ordered integer surfaces, pushed through the engine in `f64` and
/// `f32`, compared exactly with brute-force classification.
pub fn hard_surface_oracle(seed: u64, instances: usize) -> OracleReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let start = Instant::now();
    let mut mismatched = 0;
    for _ in 0..instances {
        let s_n = rng.gen_range(1..=MAX_SURFACES);
        let h = rng.gen_range(2..=MAX_ROWS);
        let w = rng.gen_range(1..=MAX_COLS);
        let mut rows = vec![vec![0; w]; s_n];
        for i in 0..w {
            let mut col: Vec<usize> = (0..s_n).map(|_| rng.gen_range(0..h)).collect();
            col.sort_unstable();
            for (s, v) in col.into_iter().enumerate() {
                rows[s][i] = v;
            }
        }
        if !(instance_matches::<f64>(&rows, h) && instance_matches::<f32>(&rows, h)) {
            mismatched += 1;
        }
    }
    OracleReport {
        instances,
        mismatched_instances: mismatched,
        elapsed: start.elapsed(),
    }
}

/// Random `f32` logits through the full engine plus random unordered curves
/// through rectification.
pub fn ordering_guarantees(seed: u64, inputs: usize) -> OrderingReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = OrderingReport {
        inputs,
        ordering_violations: 0,
        negative_layer_entries: 0,
        min_layer_entry: f64::INFINITY,
    };
    for k in 0..inputs {
        let s_n = rng.gen_range(1..=6);
        let h = rng.gen_range(2..=48);
        let w = rng.gen_range(1..=24);
        // alternate gentle and very sharp logits
        let scale: f32 = if k % 2 == 0 { 4.0 } else { 40.0 };
        let data = (0..s_n * h * w)
            .map(|_| rng.gen_range(-scale..scale))
            .collect();
        let out = run_engine(&Grid3::new(s_n, h, w, data).unwrap()).expect("engine");
        report.ordering_violations += out.positions.ordering_violations();
        for &v in out.layer_maps.data() {
            let v = v as f64;
            report.min_layer_entry = report.min_layer_entry.min(v);
            if v < LAYER_FLOOR {
                report.negative_layer_entries += 1;
            }
        }
        let curves: Vec<f32> = (0..s_n * w).map(|_| rng.gen_range(-10.0..74.0)).collect();
        let y = SurfaceCurveSet::new(s_n, w, curves).unwrap();
        report.ordering_violations += rectify_surfaces(&y).ordering_violations();
    }
    report
}
