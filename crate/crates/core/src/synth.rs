//! Synthetic layered B-scans with exact ground-truth surfaces.
//!
//! Surfaces are a base depth plus up to three bounded sinusoids and an
//! optional drusen-like Gaussian bump. Images are piecewise constant between
//! surfaces, with a dark band above the first surface and alternating bright
//! and dark layers below it, blended over one pixel at each boundary,
//! corrupted by multiplicative speckle and standardized.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp1;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::topo::SurfaceCurveSet;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub surfaces: usize,
    pub height: usize,
    pub width: usize,
    /// Minimum layer thickness in pixels.
    pub min_gap: f64,
    /// Bound on each sinusoid's amplitude (pixels); also scales bumps and
    /// thickness jitter.
    pub max_amplitude: f64,
    /// Sinusoid periods are drawn from `[min_period, max_period]` columns.
    pub min_period: f64,
    pub max_period: f64,
    pub bump_probability: f64,
    /// Range of per-layer mean intensities before standardization.
    pub intensity_range: [f64; 2],
    /// Scale of the mean-one multiplicative noise.
    pub speckle_strength: f64,
    pub labeled_fraction: f64,
    /// Size of the training split.
    pub samples: usize,
    /// Fully labeled validation and test splits.
    pub val_samples: usize,
    pub test_samples: usize,
    /// B-scans per synthetic volume; volumes share their base geometry.
    pub per_volume: usize,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            surfaces: 4,
            height: 64,
            width: 128,
            min_gap: 3.0,
            max_amplitude: 4.0,
            min_period: 48.0,
            max_period: 320.0,
            bump_probability: 0.3,
            intensity_range: [0.1, 1.0],
            speckle_strength: 0.2,
            labeled_fraction: 0.15,
            samples: 200,
            val_samples: 20,
            test_samples: 40,
            per_volume: 10,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.surfaces == 0 || self.height < 4 || self.width < 2 {
            return Err(Error::Config(format!(
                "synthetic images need S ≥ 1, H ≥ 4, W ≥ 2; got S={}, H={}, W={}",
                self.surfaces, self.height, self.width
            )));
        }
        if self.surfaces as f64 * self.min_gap >= self.height as f64 - 3.0 {
            return Err(Error::Config(format!(
                "{} surfaces with minimum gap {} do not fit in {} rows",
                self.surfaces, self.min_gap, self.height
            )));
        }
        if !(0.0..=1.0).contains(&self.labeled_fraction) {
            return Err(Error::Config(format!(
                "labeled_fraction {} outside [0, 1]",
                self.labeled_fraction
            )));
        }
        if !(self.min_gap >= 0.0 && self.max_amplitude >= 0.0 && self.speckle_strength >= 0.0) {
            return Err(Error::Config(
                "min_gap, max_amplitude, speckle_strength must be non-negative".into(),
            ));
        }
        if !(self.min_period > 0.0 && self.max_period >= self.min_period) {
            return Err(Error::Config(
                "periods must satisfy 0 < min_period ≤ max_period".into(),
            ));
        }
        let [lo, hi] = self.intensity_range;
        if !(lo >= 0.0 && hi > lo) {
            return Err(Error::Config(format!(
                "intensity range [{lo}, {hi}] is empty"
            )));
        }
        if self.per_volume == 0 {
            return Err(Error::Config("per_volume must be positive".into()));
        }
        Ok(())
    }
}

/// Geometry shared by all B-scans of a synthetic volume.
#[derive(Clone, Debug)]
pub struct VolumeGeometry {
    top: f64,
    thickness: Vec<f64>,
    periods: [f64; 3],
}

impl VolumeGeometry {
    pub fn draw(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Self {
        let h = cfg.height as f64;
        let s_n = cfg.surfaces as f64;
        let amp = cfg.max_amplitude;
        // keep room for undulations below the bottom surface
        let span = (0.55 * h).min(h - 3.0 - 0.2 * h);
        let base_gap = (span / s_n).max(cfg.min_gap);
        let thickness = (0..cfg.surfaces.saturating_sub(1))
            .map(|_| (base_gap + amp * rng.gen_range(-0.5..0.5)).max(cfg.min_gap))
            .collect();
        let top = 0.2 * h + amp * rng.gen_range(-0.5..0.5);
        let mut periods = [0.0; 3];
        for p in &mut periods {
            *p = rng.gen_range(cfg.min_period..=cfg.max_period);
        }
        Self {
            top,
            thickness,
            periods,
        }
    }
}

/// Draws one set of ordered surfaces.
pub fn generate_surfaces(cfg: &SynthConfig, rng: &mut ChaCha8Rng) -> Result<SurfaceCurveSet<f64>> {
    cfg.validate()?;
    let geom = VolumeGeometry::draw(cfg, rng);
    Ok(surfaces_for(cfg, &geom, rng))
}

pub(crate) fn surfaces_for(
    cfg: &SynthConfig,
    geom: &VolumeGeometry,
    rng: &mut ChaCha8Rng,
) -> SurfaceCurveSet<f64> {
    use std::f64::consts::TAU;
    let (s_n, w) = (cfg.surfaces, cfg.width);
    let amp = cfg.max_amplitude;
    let mut base = Vec::with_capacity(s_n);
    let mut depth = geom.top;
    for s in 0..s_n {
        base.push(depth);
        if s + 1 < s_n {
            depth += geom.thickness[s];
        }
    }
    // two shared sinusoids bend the whole stack, one per surface adds detail
    let shared: Vec<(f64, f64, f64)> = (0..2)
        .map(|k| {
            (
                amp * rng.gen_range(0.0..=1.0),
                geom.periods[k],
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let own: Vec<(f64, f64, f64)> = (0..s_n)
        .map(|_| {
            (
                0.5 * amp * rng.gen_range(0.0..=1.0),
                geom.periods[2],
                rng.gen_range(0.0..TAU),
            )
        })
        .collect();
    let bump = (rng.gen::<f64>() < cfg.bump_probability && amp > 0.0).then(|| {
        let centre = rng.gen_range(0.0..w as f64);
        let width = rng.gen_range(4.0..12.0);
        let height = 1.5 * amp * rng.gen_range(0.3..=1.0);
        (centre, width, height)
    });

    let mut y = vec![0.0f64; s_n * w];
    for s in 0..s_n {
        for i in 0..w {
            let x = i as f64;
            let mut v = base[s];
            for &(a, period, phase) in shared.iter().chain(std::iter::once(&own[s])) {
                v += a * (TAU * x / period + phase).sin();
            }
            if let Some((c, bw, bh)) = bump {
                // drusen lift the inner layers; the bottom surface stays put
                if s + 1 < s_n || s_n == 1 {
                    let weight = if s + 2 == s_n { 1.0 } else { 0.6 };
                    v -= weight * bh * (-((x - c) * (x - c)) / (2.0 * bw * bw)).exp();
                }
            }
            y[s * w + i] = v;
        }
    }
    enforce_gaps(&mut y, s_n, w, cfg.min_gap, cfg.height);
    SurfaceCurveSet::new(s_n, w, y).expect("surface shape")
}

/// Clamps each surface into `[1, H−2]` leaving room for the ones below and
/// pushes it at least `gap` below its predecessor.
fn enforce_gaps(y: &mut [f64], s_n: usize, w: usize, gap: f64, height: usize) {
    let floor = height as f64 - 2.0;
    for i in 0..w {
        for s in 0..s_n {
            let hi = floor - (s_n - 1 - s) as f64 * gap;
            let lo = if s == 0 {
                1.0
            } else {
                y[(s - 1) * w + i] + gap
            };
            let v = y[s * w + i].max(lo).min(hi);
            y[s * w + i] = v;
        }
    }
}

/// Renders one standardized B-scan for the given surfaces.
pub fn render_bscan(
    surfaces: &SurfaceCurveSet<f64>,
    cfg: &SynthConfig,
    rng: &mut ChaCha8Rng,
) -> Vec<f32> {
    let (s_n, w, h) = (surfaces.surfaces(), surfaces.cols(), cfg.height);
    let [lo, hi] = cfg.intensity_range;
    let regions = s_n + 1;
    // dark vitreous above the first surface, then alternating bright and
    // dark layers so that every boundary has contrast
    let span = hi - lo;
    let levels: Vec<f64> = (0..regions)
        .map(|k| match k {
            0 => lo + span * rng.gen_range(0.0..0.1),
            k if k % 2 == 1 => lo + span * rng.gen_range(0.6..1.0),
            _ => lo + span * rng.gen_range(0.15..0.4),
        })
        .collect();

    let mut img = vec![0.0f64; h * w];
    for r in 0..h {
        for i in 0..w {
            let mut v = levels[0];
            for s in 0..s_n {
                let frac = (r as f64 - surfaces.get(s, i) + 0.5).clamp(0.0, 1.0);
                v += (levels[s + 1] - levels[s]) * frac;
            }
            if cfg.speckle_strength > 0.0 {
                let e: f64 = rng.sample(Exp1);
                v *= 1.0 + cfg.speckle_strength * (e - 1.0);
            }
            img[r * w + i] = v;
        }
    }
    standardize(&img)
}

/// Zero mean, unit variance (population statistics), computed in `f64`.
pub fn standardize(img: &[f64]) -> Vec<f32> {
    let n = img.len() as f64;
    let mean = img.iter().sum::<f64>() / n;
    let var = img.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    let sd = if var > 0.0 { var.sqrt() } else { 1.0 };
    img.iter().map(|v| ((v - mean) / sd) as f32).collect()
}

/// Which split a generated dataset belongs to; selects independent streams.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    fn salt(self) -> u64 {
        match self {
            Split::Train => 0x7472_6169_6e00_0001,
            Split::Val => 0x7661_6c00_0000_0002,
            Split::Test => 0x7465_7374_0000_0003,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

fn stream_rng(seed: u64, split: Split, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ split.salt());
    rng.set_stream(stream);
    rng
}

/// Generates `count` samples for `split`; a fraction `labeled_fraction` (rounded
/// to the nearest count) keeps its surfaces.
pub fn generate_split(
    cfg: &SynthConfig,
    split: Split,
    count: usize,
    labeled_fraction: f64,
) -> Result<Dataset> {
    cfg.validate()?;
    if !(0.0..=1.0).contains(&labeled_fraction) {
        return Err(Error::Config(format!(
            "labeled fraction {labeled_fraction} outside [0, 1]"
        )));
    }
    let volumes = count.div_ceil(cfg.per_volume);
    let geoms: Vec<VolumeGeometry> = (0..volumes)
        .map(|v| VolumeGeometry::draw(cfg, &mut stream_rng(cfg.seed, split, (1 << 32) | v as u64)))
        .collect();

    let n_labeled = ((labeled_fraction * count as f64).round() as usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.shuffle(&mut stream_rng(cfg.seed, split, 2 << 32));
    let mut labeled = vec![false; count];
    for &k in &order[..n_labeled] {
        labeled[k] = true;
    }

    let samples = (0..count)
        .map(|k| {
            let mut rng = stream_rng(cfg.seed, split, k as u64);
            let group = k / cfg.per_volume;
            let surfaces = surfaces_for(cfg, &geoms[group], &mut rng);
            let image = render_bscan(&surfaces, cfg, &mut rng);
            Sample {
                id: format!("{}-{k:04}", split.name()),
                group,
                image,
                surfaces: labeled[k].then(|| surfaces.cast()),
            }
        })
        .collect();
    Ok(Dataset {
        height: cfg.height,
        width: cfg.width,
        surfaces: cfg.surfaces,
        samples,
    })
}

/// Train (partially labeled), validation and test splits.
pub fn generate_corpus(cfg: &SynthConfig) -> Result<[Dataset; 3]> {
    Ok([
        generate_split(cfg, Split::Train, cfg.samples, cfg.labeled_fraction)?,
        generate_split(cfg, Split::Val, cfg.val_samples, 1.0)?,
        generate_split(cfg, Split::Test, cfg.test_samples, 1.0)?,
    ])
}
