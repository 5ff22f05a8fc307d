//! Central finite-difference checks, in `f64`, of every differentiable
//! engine operation and loss. Each check evaluates `f(x) = ⟨v, op(x)⟩` for a
//! random cotangent `v` and compares the analytic vector-Jacobian product
//! against central differences. Points closer than [`KINK_MARGIN`] to a
//! non-differentiable point are rejected and resampled.

use layerseg::gradcheck::check_gradient;
use layerseg::losses::{
    kl_supervised, loss_continuity, loss_reconstruction_masked, loss_slope, loss_std, loss_topo,
    loss_vae_kl, mse_supervised, retina_mask, term_coefficients, total_loss, LossTerms,
    LossWeights, PriorConstants,
};
use layerseg::topo::{
    columnwise_softmax, columnwise_softmax_backward, cumulative_maps, cumulative_maps_backward,
    decompose_layers, decompose_layers_backward, enforce_map_ordering,
    enforce_map_ordering_backward, expected_positions, expected_positions_backward,
    rectify_surfaces, rectify_surfaces_backward, CumulativeMaps, Grid3, SurfaceCurveSet,
    SurfaceProbabilityMap,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
pub const MAX_REL_ERROR: f64 = 1e-3;
pub const MIN_POINTS: usize = 20;
/// Smallest admissible distance of a kink argument from zero.
pub const KINK_MARGIN: f64 = 1e-3;
const MAX_ATTEMPTS_PER_POINT: usize = 200;

/// Outcome of one operation's check.
#[derive(Clone, Debug)]
pub struct OpReport {
    pub name: &'static str,
    pub points: usize,
    pub rejected: usize,
    pub max_rel_error: f64,
}

impl OpReport {
    pub fn passed(&self) -> bool {
        self.points >= MIN_POINTS && self.max_rel_error < MAX_REL_ERROR
    }
}

type ScalarFn = Box<dyn Fn(&[f64]) -> f64>;

/// A sampled point: input, analytic gradient and the scalar function.
struct Case {
    x: Vec<f64>,
    analytic: Vec<f64>,
    f: ScalarFn,
}

fn run_op(
    name: &'static str,
    points: usize,
    rng: &mut ChaCha8Rng,
    mut sample: impl FnMut(&mut ChaCha8Rng) -> Option<Case>,
) -> OpReport {
    let mut report = OpReport {
        name,
        points: 0,
        rejected: 0,
        max_rel_error: 0.0,
    };
    for _ in 0..points * MAX_ATTEMPTS_PER_POINT {
        if report.points == points {
            break;
        }
        let Some(case) = sample(rng) else {
            report.rejected += 1;
            continue;
        };
        let r = check_gradient(&case.x, &case.analytic, STEP, &case.f);
        report.max_rel_error = report.max_rel_error.max(r.max_rel_error);
        report.points += 1;
    }
    report
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(lo..hi)).collect()
}

fn grid_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize) {
    (
        rng.gen_range(1..=4),
        rng.gen_range(3..=10),
        rng.gen_range(2..=6),
    )
}

fn grid(dims: (usize, usize, usize), x: &[f64]) -> Grid3<f64> {
    Grid3::new(dims.0, dims.1, dims.2, x.to_vec()).unwrap()
}

fn softmax(dims: (usize, usize, usize), x: &[f64]) -> SurfaceProbabilityMap<f64> {
    columnwise_softmax(&grid(dims, x)).unwrap()
}

fn curves(s: usize, w: usize, x: &[f64]) -> SurfaceCurveSet<f64> {
    SurfaceCurveSet::new(s, w, x.to_vec()).unwrap()
}

/// Every `M^{s−1} + min(C^s, 1) − 1` keeps its distance from zero.
fn enforce_is_smooth(c: &Grid3<f64>, m: &Grid3<f64>) -> bool {
    let (s_n, h, w) = c.dims();
    (1..s_n).all(|s| {
        (0..h).all(|r| {
            (0..w).all(|i| {
                let gated = m.get(s - 1, r, i) + c.get(s, r, i).min(1.0) - 1.0;
                gated.abs() > KINK_MARGIN
            })
        })
    })
}

/// Every `y^s − y^{s−1}_rect` keeps its distance from zero.
fn rectify_is_smooth(y: &SurfaceCurveSet<f64>, rect: &SurfaceCurveSet<f64>) -> bool {
    (1..y.surfaces())
        .all(|s| (0..y.cols()).all(|i| (y.get(s, i) - rect.get(s - 1, i)).abs() > KINK_MARGIN))
}

fn span_is_smooth(y: &SurfaceCurveSet<f64>, bounds: &[f64], span: usize) -> bool {
    (0..y.surfaces()).all(|s| {
        (0..y.cols() - span).all(|i| {
            let d = y.get(s, i) - y.get(s, i + span);
            d.abs() > KINK_MARGIN && (d.abs() / span as f64 - bounds[s]).abs() > KINK_MARGIN
        })
    })
}

fn column_std(p: &Grid3<f64>, s: usize, i: usize) -> f64 {
    let h = p.dims().1;
    let mean: f64 = (0..h).map(|r| r as f64 * p.get(s, r, i)).sum();
    (0..h)
        .map(|r| (r as f64 - mean).powi(2) * p.get(s, r, i))
        .sum::<f64>()
        .sqrt()
}

fn terms_from(x: &[f64]) -> LossTerms {
    LossTerms {
        kl: x[0],
        mse: x[1],
        to: x[2],
        lc: x[3],
        ls: x[4],
        std: x[5],
        z_kl: x[6],
        rec: x[7],
    }
}

fn terms_array(t: &LossTerms) -> Vec<f64> {
    vec![t.kl, t.mse, t.to, t.lc, t.ls, t.std, t.z_kl, t.rec]
}

fn random_consts(rng: &mut ChaCha8Rng, s: usize, delta: usize) -> PriorConstants {
    PriorConstants {
        c: uniform_vec(rng, s, 0.0, 4.0),
        o: uniform_vec(rng, s, 0.0, 3.0),
        delta,
        t: rng.gen_range(0.3..3.0),
        sigma: rng.gen_range(0.5..2.0),
    }
}

/// Runs every check with `points` accepted points each.
pub fn run(seed: u64, points: usize) -> Vec<OpReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rng = &mut rng;
    let mut out = Vec::new();

    out.push(run_op("columnwise_softmax", points, rng, |rng| {
        let dims = grid_dims(rng);
        let n = dims.0 * dims.1 * dims.2;
        let x = uniform_vec(rng, n, -3.0, 3.0);
        let v = uniform_vec(rng, n, -1.0, 1.0);
        let analytic = columnwise_softmax_backward(&softmax(dims, &x), &grid(dims, &v)).into_data();
        let f = Box::new(move |x: &[f64]| dot(&v, softmax(dims, x).grid().data()));
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("expected_positions", points, rng, |rng| {
        let dims = grid_dims(rng);
        let n = dims.0 * dims.1 * dims.2;
        let x = uniform_vec(rng, n, -3.0, 3.0);
        let v = uniform_vec(rng, dims.0 * dims.2, -1.0, 1.0);
        let p = softmax(dims, &x);
        let gy = curves(dims.0, dims.2, &v);
        let analytic =
            columnwise_softmax_backward(&p, &expected_positions_backward(dims.1, &gy)).into_data();
        let f =
            Box::new(move |x: &[f64]| dot(&v, expected_positions(&softmax(dims, x)).positions()));
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("rectify_surfaces", points, rng, |rng| {
        let (s, w) = (rng.gen_range(1..=6), rng.gen_range(1..=8));
        let x = uniform_vec(rng, s * w, 0.0, 20.0);
        let v = uniform_vec(rng, s * w, -1.0, 1.0);
        let y = curves(s, w, &x);
        let rect = rectify_surfaces(&y);
        if !rectify_is_smooth(&y, &rect) {
            return None;
        }
        let analytic = rectify_surfaces_backward(&y, &rect, &curves(s, w, &v))
            .positions()
            .to_vec();
        let f = Box::new(move |x: &[f64]| dot(&v, rectify_surfaces(&curves(s, w, x)).positions()));
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("cumulative_maps", points, rng, |rng| {
        let dims = grid_dims(rng);
        let n = dims.0 * dims.1 * dims.2;
        let x = uniform_vec(rng, n, -3.0, 3.0);
        let v = uniform_vec(rng, n, -1.0, 1.0);
        let p = softmax(dims, &x);
        let analytic =
            columnwise_softmax_backward(&p, &cumulative_maps_backward(&grid(dims, &v))).into_data();
        let f =
            Box::new(move |x: &[f64]| dot(&v, cumulative_maps(&softmax(dims, x)).grid().data()));
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("enforce_map_ordering", points, rng, |rng| {
        let dims = grid_dims(rng);
        let n = dims.0 * dims.1 * dims.2;
        // free inputs below one keep the clamp inactive
        let x = uniform_vec(rng, n, 0.0, 0.99);
        let v = uniform_vec(rng, n, -1.0, 1.0);
        let c = CumulativeMaps::new(grid(dims, &x));
        let m = enforce_map_ordering(&c);
        if !enforce_is_smooth(c.grid(), m.grid()) {
            return None;
        }
        let analytic = enforce_map_ordering_backward(&c, &m, &grid(dims, &v)).into_data();
        let f = Box::new(move |x: &[f64]| {
            dot(
                &v,
                enforce_map_ordering(&CumulativeMaps::new(grid(dims, x)))
                    .grid()
                    .data(),
            )
        });
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("decompose_layers", points, rng, |rng| {
        let dims = grid_dims(rng);
        let (s_n, h, w) = dims;
        // non-increasing in s with gaps far above the step
        let mut x = vec![0.0; s_n * h * w];
        for r in 0..h {
            for i in 0..w {
                let mut level = rng.gen_range(0.5..1.0);
                for s in 0..s_n {
                    x[(s * h + r) * w + i] = level;
                    level -= rng.gen_range(0.01..0.1);
                }
            }
        }
        let v = uniform_vec(rng, x.len(), -1.0, 1.0);
        let analytic = decompose_layers_backward(&grid(dims, &v)).into_data();
        let f = Box::new(move |x: &[f64]| {
            dot(
                &v,
                decompose_layers(&CumulativeMaps::new(grid(dims, x)))
                    .unwrap()
                    .data(),
            )
        });
        Some(Case { x, analytic, f })
    }));

    out.push(run_op(
        "engine (logits to surfaces and layer maps)",
        points,
        rng,
        |rng| {
            let dims = grid_dims(rng);
            let (s_n, h, w) = dims;
            let n = s_n * h * w;
            let x = uniform_vec(rng, n, -3.0, 3.0);
            let vy = uniform_vec(rng, s_n * w, -1.0, 1.0);
            let vl = uniform_vec(rng, n, -1.0, 1.0);
            let p = softmax(dims, &x);
            let raw = expected_positions(&p);
            let rect = rectify_surfaces(&raw);
            let c = cumulative_maps(&p);
            let m = enforce_map_ordering(&c);
            if !rectify_is_smooth(&raw, &rect) || !enforce_is_smooth(c.grid(), m.grid()) {
                return None;
            }
            let g_raw = rectify_surfaces_backward(&raw, &rect, &curves(s_n, w, &vy));
            let mut g_p = expected_positions_backward(h, &g_raw);
            let g_m = decompose_layers_backward(&grid(dims, &vl));
            let g_c = enforce_map_ordering_backward(&c, &m, &g_m);
            for (a, b) in g_p
                .data_mut()
                .iter_mut()
                .zip(cumulative_maps_backward(&g_c).data())
            {
                *a += b;
            }
            let analytic = columnwise_softmax_backward(&p, &g_p).into_data();
            let f = Box::new(move |x: &[f64]| {
                let p = softmax(dims, x);
                let y = rectify_surfaces(&expected_positions(&p));
                let l = decompose_layers(&enforce_map_ordering(&cumulative_maps(&p))).unwrap();
                dot(&vy, y.positions()) + dot(&vl, l.data())
            });
            Some(Case { x, analytic, f })
        },
    ));

    out.push(run_op("kl_supervised", points, rng, |rng| {
        let dims = grid_dims(rng);
        let (s_n, h, w) = dims;
        let x = uniform_vec(rng, s_n * h * w, -3.0, 3.0);
        let mu = curves(s_n, w, &uniform_vec(rng, s_n * w, 0.0, (h - 1) as f64));
        let sigma = rng.gen_range(0.5..2.0);
        let p = softmax(dims, &x);
        let loss = kl_supervised(&p, &mu, sigma).unwrap();
        let analytic = columnwise_softmax_backward(&p, &loss.grad).into_data();
        let f =
            Box::new(move |x: &[f64]| kl_supervised(&softmax(dims, x), &mu, sigma).unwrap().value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("mse_supervised", points, rng, |rng| {
        let (s, w) = (rng.gen_range(1..=6), rng.gen_range(1..=8));
        let x = uniform_vec(rng, s * w, 0.0, 30.0);
        let mu = curves(s, w, &uniform_vec(rng, s * w, 0.0, 30.0));
        let analytic = mse_supervised(&curves(s, w, &x), &mu)
            .unwrap()
            .grad
            .positions()
            .to_vec();
        let f = Box::new(move |x: &[f64]| mse_supervised(&curves(s, w, x), &mu).unwrap().value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("loss_topo", points, rng, |rng| {
        let (s, w) = (rng.gen_range(2..=6), rng.gen_range(1..=8));
        let x = uniform_vec(rng, s * w, 0.0, 20.0);
        let y = curves(s, w, &x);
        let smooth =
            (1..s).all(|k| (0..w).all(|i| (y.get(k - 1, i) - y.get(k, i)).abs() > KINK_MARGIN));
        if !smooth {
            return None;
        }
        let analytic = loss_topo(&y).grad.positions().to_vec();
        let f = Box::new(move |x: &[f64]| loss_topo(&curves(s, w, x)).value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("loss_continuity", points, rng, |rng| {
        let (s, w) = (rng.gen_range(1..=5), rng.gen_range(2..=8));
        let consts = random_consts(rng, s, 1);
        let x = uniform_vec(rng, s * w, 0.0, 12.0);
        let y = curves(s, w, &x);
        if !span_is_smooth(&y, &consts.c, 1) {
            return None;
        }
        let analytic = loss_continuity(&y, &consts)
            .unwrap()
            .grad
            .positions()
            .to_vec();
        let f =
            Box::new(move |x: &[f64]| loss_continuity(&curves(s, w, x), &consts).unwrap().value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("loss_slope", points, rng, |rng| {
        let delta = rng.gen_range(1..=3);
        let (s, w) = (rng.gen_range(1..=5), rng.gen_range(delta + 1..=delta + 8));
        let consts = random_consts(rng, s, delta);
        let x = uniform_vec(rng, s * w, 0.0, 12.0);
        let y = curves(s, w, &x);
        if !span_is_smooth(&y, &consts.o, delta) {
            return None;
        }
        let analytic = loss_slope(&y, &consts).unwrap().grad.positions().to_vec();
        let f = Box::new(move |x: &[f64]| loss_slope(&curves(s, w, x), &consts).unwrap().value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("loss_std", points, rng, |rng| {
        let dims = grid_dims(rng);
        let (s_n, h, w) = dims;
        let x = uniform_vec(rng, s_n * h * w, -3.0, 3.0);
        let consts = random_consts(rng, s_n, 1);
        let p = softmax(dims, &x);
        let smooth = (0..s_n)
            .all(|s| (0..w).all(|i| (column_std(p.grid(), s, i) - consts.t).abs() > KINK_MARGIN));
        if !smooth {
            return None;
        }
        let analytic = columnwise_softmax_backward(&p, &loss_std(&p, &consts).grad).into_data();
        let f = Box::new(move |x: &[f64]| loss_std(&softmax(dims, x), &consts).value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("loss_vae_kl", points, rng, |rng| {
        let (batch, dim) = (rng.gen_range(1..=3), rng.gen_range(1..=5));
        let n = batch * dim;
        let x = uniform_vec(rng, 2 * n, -2.0, 2.0);
        let loss = loss_vae_kl(&x[..n], &x[n..], batch).unwrap();
        let analytic = [loss.grad.mean, loss.grad.logvar].concat();
        let f = Box::new(move |x: &[f64]| loss_vae_kl(&x[..n], &x[n..], batch).unwrap().value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("loss_reconstruction_masked", points, rng, |rng| {
        let (s, h, w) = (
            rng.gen_range(1..=4),
            rng.gen_range(4..=12),
            rng.gen_range(2..=6),
        );
        let mut rows = uniform_vec(rng, s * w, 0.0, (h - 1) as f64);
        for i in 0..w {
            let mut col: Vec<f64> = (0..s).map(|k| rows[k * w + i]).collect();
            col.sort_by(f64::total_cmp);
            for (k, v) in col.into_iter().enumerate() {
                rows[k * w + i] = v;
            }
        }
        let y = curves(s, w, &rows);
        let mask = retina_mask(&y, h);
        let image = uniform_vec(rng, h * w, 0.0, 1.0);
        let x = uniform_vec(rng, h * w, 0.0, 1.0);
        let smooth = mask.iter().any(|&m| m)
            && mask
                .iter()
                .zip(image.iter().zip(&x))
                .all(|(&m, (a, b))| !m || (a - b).abs() > KINK_MARGIN);
        if !smooth {
            return None;
        }
        let analytic = loss_reconstruction_masked(&image, &x, &y, h).unwrap().grad;
        let f =
            Box::new(move |x: &[f64]| loss_reconstruction_masked(&image, x, &y, h).unwrap().value);
        Some(Case { x, analytic, f })
    }));

    out.push(run_op("total_loss", points, rng, |rng| {
        let raw = uniform_vec(rng, 8, 0.0, 2.0);
        let weights = LossWeights {
            surface_kl: raw[0],
            surface_mse: raw[1],
            ordering: raw[2],
            continuity: raw[3],
            slope: raw[4],
            spread: raw[5],
            style_kl: raw[6],
            reconstruction: raw[7],
        };
        let x = uniform_vec(rng, 8, 0.0, 5.0);
        let analytic = terms_array(&term_coefficients(&weights));
        let f = Box::new(move |x: &[f64]| total_loss(&terms_from(x), &weights).unwrap().total);
        Some(Case { x, analytic, f })
    }));

    out
}
