//! Every loss evaluated at an input where it vanishes analytically.

use layerseg::losses::{
    gaussian_target, kl_supervised, loss_continuity, loss_reconstruction_masked, loss_slope,
    loss_std, loss_topo, loss_vae_kl, mse_supervised, total_loss, LossTerms, LossWeights,
    PriorConstants,
};
use layerseg::topo::{Grid3, SurfaceCurveSet, SurfaceProbabilityMap};

pub const ZERO_TOL: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct ZeroCase {
    pub name: &'static str,
    pub input: &'static str,
    pub value: f64,
}

impl ZeroCase {
    pub fn passed(&self) -> bool {
        self.value.abs() <= ZERO_TOL
    }
}

fn ordered_curves() -> SurfaceCurveSet<f64> {
    SurfaceCurveSet::from_rows(&[
        vec![3.0, 4.5, 5.0, 4.0, 3.5, 3.0],
        vec![7.0, 8.0, 8.5, 9.0, 8.0, 7.5],
        vec![12.0, 12.5, 13.0, 14.0, 13.0, 12.0],
    ])
    .unwrap()
}

fn flat_curves() -> SurfaceCurveSet<f64> {
    SurfaceCurveSet::from_rows(&[vec![2.0; 6], vec![6.0; 6], vec![11.0; 6]]).unwrap()
}

fn consts() -> PriorConstants {
    PriorConstants {
        c: vec![0.0; 3],
        o: vec![0.0; 3],
        delta: 2,
        t: 0.5,
        sigma: 1.0,
    }
}

pub fn run() -> Vec<ZeroCase> {
    let rows = 16;
    let y = ordered_curves();
    let target = gaussian_target(&y, rows, 1.0).unwrap();
    let (s_n, w) = (y.surfaces(), y.cols());
    let one_hot = Grid3::from_fn(
        s_n,
        rows,
        w,
        |s, r, i| {
            if r == 4 * s + i % 3 {
                1.0
            } else {
                0.0
            }
        },
    );
    let image: Vec<f64> = (0..rows * w).map(|k| (k % 7) as f64 / 7.0).collect();

    vec![
        ZeroCase {
            name: "kl_supervised",
            input: "P equal to the Gaussian target",
            value: kl_supervised(&SurfaceProbabilityMap::try_new(target).unwrap(), &y, 1.0)
                .unwrap()
                .value,
        },
        ZeroCase {
            name: "mse_supervised",
            input: "prediction equal to reference",
            value: mse_supervised(&y, &y).unwrap().value,
        },
        ZeroCase {
            name: "loss_topo",
            input: "ordered surfaces",
            value: loss_topo(&y).value,
        },
        ZeroCase {
            name: "loss_continuity",
            input: "flat surfaces, zero bound",
            value: loss_continuity(&flat_curves(), &consts()).unwrap().value,
        },
        ZeroCase {
            name: "loss_slope",
            input: "flat surfaces, zero bound",
            value: loss_slope(&flat_curves(), &consts()).unwrap().value,
        },
        ZeroCase {
            name: "loss_std",
            input: "one-hot columns",
            value: loss_std(&SurfaceProbabilityMap::try_new(one_hot).unwrap(), &consts()).value,
        },
        ZeroCase {
            name: "loss_vae_kl",
            input: "zero mean, zero log-variance",
            value: loss_vae_kl(&[0.0; 8], &[0.0; 8], 2).unwrap().value,
        },
        ZeroCase {
            name: "loss_reconstruction_masked",
            input: "reconstruction equal to image",
            value: loss_reconstruction_masked(&image, &image, &y, rows)
                .unwrap()
                .value,
        },
        ZeroCase {
            name: "total_loss",
            input: "all terms zero",
            value: total_loss(&LossTerms::default(), &LossWeights::default())
                .unwrap()
                .total,
        },
    ]
}
