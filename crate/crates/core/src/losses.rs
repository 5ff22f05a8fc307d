//! Supervised, self-supervised (anatomical prior), style and reconstruction
//! losses, and their weighted composition.
//!
//! Each loss returns its value together with the gradient with respect to
//! its differentiable input. Like the engine, everything is generic over the
//! float type.

use std::path::Path;

use num_traits::Float;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::topo::{round_half_up, Grid3, SurfaceCurveSet, SurfaceProbabilityMap};

/// Floor applied to target and predicted probabilities inside logarithms.
pub const PROB_FLOOR: f64 = 1e-8;

/// A loss value and its gradient.
#[derive(Clone, Debug)]
pub struct Loss<F, G> {
    pub value: F,
    pub grad: G,
}

#[inline]
fn cast<F: Float>(v: f64) -> F {
    F::from(v).unwrap()
}

fn same_curve_shape<F: Float>(a: &SurfaceCurveSet<F>, b: &SurfaceCurveSet<F>) -> Result<()> {
    if (a.surfaces(), a.cols()) != (b.surfaces(), b.cols()) {
        return Err(Error::Shape(format!(
            "surface sets {}x{} vs {}x{}",
            a.surfaces(),
            a.cols(),
            b.surfaces(),
            b.cols()
        )));
    }
    Ok(())
}

/// Target map `T(r|i,s)`: a Gaussian of width `sigma` centred on the
/// reference position, sampled at integer rows, renormalized per column and
/// floored at [`PROB_FLOOR`].
pub fn gaussian_target<F: Float>(
    mu: &SurfaceCurveSet<F>,
    rows: usize,
    sigma: F,
) -> Result<Grid3<F>> {
    if sigma.is_nan() || sigma <= F::zero() {
        return Err(Error::InvalidArgument(format!(
            "target sigma must be positive, got {}",
            sigma.to_f64().unwrap()
        )));
    }
    let (s_n, w) = (mu.surfaces(), mu.cols());
    let two_var = cast::<F>(2.0) * sigma * sigma;
    let floor = cast::<F>(PROB_FLOOR);
    let mut t = Grid3::zeros(s_n, rows, w);
    for s in 0..s_n {
        for i in 0..w {
            let m = mu.get(s, i);
            let mut sum = F::zero();
            for r in 0..rows {
                let d = F::from(r).unwrap() - m;
                let v = (-(d * d) / two_var).exp();
                t.set(s, r, i, v);
                sum = sum + v;
            }
            for r in 0..rows {
                let v = if sum > F::zero() {
                    t.get(s, r, i) / sum
                } else {
                    F::zero()
                };
                t.set(s, r, i, v.max(floor));
            }
        }
    }
    Ok(t)
}

/// Mean per-column KL divergence `KL(P ‖ T)` against the Gaussian target.
pub fn kl_supervised<F: Float>(
    p: &SurfaceProbabilityMap<F>,
    mu: &SurfaceCurveSet<F>,
    sigma: F,
) -> Result<Loss<F, Grid3<F>>> {
    let pg = p.grid();
    let (s_n, h, w) = pg.dims();
    if (mu.surfaces(), mu.cols()) != (s_n, w) {
        return Err(Error::Shape(format!(
            "reference is {}x{}, probability map is {s_n}x{h}x{w}",
            mu.surfaces(),
            mu.cols()
        )));
    }
    let t = gaussian_target(mu, h, sigma)?;
    let norm = F::one() / F::from(s_n * w).unwrap();
    let floor = cast::<F>(PROB_FLOOR);
    let mut grad = Grid3::zeros(s_n, h, w);
    let mut value = F::zero();
    for s in 0..s_n {
        for r in 0..h {
            for i in 0..w {
                let pv = pg.get(s, r, i);
                let tv = t.get(s, r, i);
                let log_ratio = pv.max(floor).ln() - tv.ln();
                value = value + pv * norm * log_ratio;
                let d = if pv > floor {
                    log_ratio + F::one()
                } else {
                    log_ratio
                };
                grad.set(s, r, i, d * norm);
            }
        }
    }
    Ok(Loss { value, grad })
}

/// `(1/(S·W)) Σ (y − μ)²`.
pub fn mse_supervised<F: Float>(
    y: &SurfaceCurveSet<F>,
    mu: &SurfaceCurveSet<F>,
) -> Result<Loss<F, SurfaceCurveSet<F>>> {
    same_curve_shape(y, mu)?;
    let n = F::from(y.positions().len().max(1)).unwrap();
    let mut grad = y.clone();
    let mut value = F::zero();
    for (k, (&a, &b)) in y.positions().iter().zip(mu.positions()).enumerate() {
        let d = a - b;
        value = value + d * d;
        grad.positions_mut()[k] = cast::<F>(2.0) * d / n;
    }
    Ok(Loss {
        value: value / n,
        grad,
    })
}

/// Ordering prior: `(1/W) Σ_s Σ_i |y^{s−1}_i − y^s_i|_+`.
pub fn loss_topo<F: Float>(y: &SurfaceCurveSet<F>) -> Loss<F, SurfaceCurveSet<F>> {
    let (s_n, w) = (y.surfaces(), y.cols());
    let norm = F::one() / F::from(w.max(1)).unwrap();
    let mut grad = SurfaceCurveSet::new(s_n, w, vec![F::zero(); s_n * w]).expect("shape");
    let mut value = F::zero();
    for s in 1..s_n {
        for i in 0..w {
            let v = y.get(s - 1, i) - y.get(s, i);
            if v > F::zero() {
                value = value + v * norm;
                grad.set(s - 1, i, grad.get(s - 1, i) + norm);
                grad.set(s, i, grad.get(s, i) - norm);
            }
        }
    }
    Loss { value, grad }
}

/// Shared body of the continuity and slope priors: penalizes
/// `|y^s_i − y^s_{i+span}| / span` above a per-surface bound.
fn span_penalty<F: Float>(
    y: &SurfaceCurveSet<F>,
    bounds: &[F],
    span: usize,
) -> Loss<F, SurfaceCurveSet<F>> {
    let (s_n, w) = (y.surfaces(), y.cols());
    let norm = F::one() / F::from(w).unwrap();
    let spanf = F::from(span).unwrap();
    let mut grad = SurfaceCurveSet::new(s_n, w, vec![F::zero(); s_n * w]).expect("shape");
    let mut value = F::zero();
    for s in 0..s_n {
        for i in 0..w - span {
            let d = y.get(s, i) - y.get(s, i + span);
            let excess = d.abs() / spanf - bounds[s];
            if excess > F::zero() {
                value = value + excess * norm;
                let g = d.signum() * norm / spanf;
                grad.set(s, i, grad.get(s, i) + g);
                grad.set(s, i + span, grad.get(s, i + span) - g);
            }
        }
    }
    Loss { value, grad }
}

fn check_bounds<F: Float>(y: &SurfaceCurveSet<F>, bounds: &[f64], what: &str) -> Result<Vec<F>> {
    if bounds.len() != y.surfaces() {
        return Err(Error::Shape(format!(
            "{what}: {} per-surface constants for {} surfaces",
            bounds.len(),
            y.surfaces()
        )));
    }
    Ok(bounds.iter().map(|&b| cast(b)).collect())
}

/// Continuity prior: `(1/W) Σ_s Σ_i ||y^s_i − y^s_{i+1}| − c_s|_+`.
pub fn loss_continuity<F: Float>(
    y: &SurfaceCurveSet<F>,
    consts: &PriorConstants,
) -> Result<Loss<F, SurfaceCurveSet<F>>> {
    if y.cols() < 2 {
        return Err(Error::InvalidArgument(format!(
            "continuity prior needs at least 2 columns, got {}",
            y.cols()
        )));
    }
    let c = check_bounds(y, &consts.c, "continuity")?;
    Ok(span_penalty(y, &c, 1))
}

/// Slope prior: `(1/W) Σ_s Σ_i ||y^s_i − y^s_{i+δ}|/δ − o_s|_+`.
pub fn loss_slope<F: Float>(
    y: &SurfaceCurveSet<F>,
    consts: &PriorConstants,
) -> Result<Loss<F, SurfaceCurveSet<F>>> {
    if consts.delta == 0 || y.cols() <= consts.delta {
        return Err(Error::InvalidArgument(format!(
            "slope prior needs width > delta, got width {} and delta {}",
            y.cols(),
            consts.delta
        )));
    }
    let o = check_bounds(y, &consts.o, "slope")?;
    Ok(span_penalty(y, &o, consts.delta))
}

/// Spread prior: mean over `(s, i)` of `|σ̂^s_i − t|_+`, where `σ̂` is the
/// standard deviation of the column PMF about its expected position.
pub fn loss_std<F: Float>(
    p: &SurfaceProbabilityMap<F>,
    consts: &PriorConstants,
) -> Loss<F, Grid3<F>> {
    let pg = p.grid();
    let (s_n, h, w) = pg.dims();
    let t = cast::<F>(consts.t);
    let norm = F::one() / F::from((s_n * w).max(1)).unwrap();
    let two = cast::<F>(2.0);
    let mut grad = Grid3::zeros(s_n, h, w);
    let mut value = F::zero();
    for s in 0..s_n {
        for i in 0..w {
            let (mut mass, mut mean) = (F::zero(), F::zero());
            for r in 0..h {
                let pv = pg.get(s, r, i);
                mass = mass + pv;
                mean = mean + F::from(r).unwrap() * pv;
            }
            let var = (0..h).fold(F::zero(), |acc, r| {
                let d = F::from(r).unwrap() - mean;
                acc + d * d * pg.get(s, r, i)
            });
            let sd = var.max(F::zero()).sqrt();
            if sd - t > F::zero() {
                value = value + (sd - t) * norm;
                // d var / d P_r = (r − ȳ)² − 2r·(ȳ − ȳ·ΣP)
                let cross = mean - mean * mass;
                for r in 0..h {
                    let rf = F::from(r).unwrap();
                    let dvar = (rf - mean) * (rf - mean) - two * rf * cross;
                    grad.set(s, r, i, dvar / (two * sd) * norm);
                }
            }
        }
    }
    Loss { value, grad }
}

/// Gradients of [`loss_vae_kl`] with respect to mean and log-variance.
#[derive(Clone, Debug)]
pub struct VaeKlGrad<F> {
    pub mean: Vec<F>,
    pub logvar: Vec<F>,
}

/// `½ Σ_d (m² + e^{lv} − 1 − lv)`, averaged over `batch` rows.
pub fn loss_vae_kl<F: Float>(
    mean: &[F],
    logvar: &[F],
    batch: usize,
) -> Result<Loss<F, VaeKlGrad<F>>> {
    if mean.len() != logvar.len() || batch == 0 || !mean.len().is_multiple_of(batch) {
        return Err(Error::Shape(format!(
            "style statistics: {} means, {} log-variances, batch {batch}",
            mean.len(),
            logvar.len()
        )));
    }
    let half = cast::<F>(0.5);
    let inv_b = F::one() / F::from(batch).unwrap();
    let mut value = F::zero();
    let mut gm = Vec::with_capacity(mean.len());
    let mut glv = Vec::with_capacity(mean.len());
    for (&m, &lv) in mean.iter().zip(logvar) {
        value = value + half * (m * m + lv.exp() - F::one() - lv);
        gm.push(m * inv_b);
        glv.push(half * (lv.exp() - F::one()) * inv_b);
    }
    Ok(Loss {
        value: value * inv_b,
        grad: VaeKlGrad {
            mean: gm,
            logvar: glv,
        },
    })
}

/// Pixels `(r, i)` with `round(y^1_i) ≤ r ≤ round(y^S_i)`, row-major `rows × cols`.
pub fn retina_mask<F: Float>(y: &SurfaceCurveSet<F>, rows: usize) -> Vec<bool> {
    let (s_n, w) = (y.surfaces(), y.cols());
    let mut mask = vec![false; rows * w];
    if s_n == 0 {
        return mask;
    }
    for i in 0..w {
        let top = round_half_up(y.get(0, i)).to_f64().unwrap();
        let bottom = round_half_up(y.get(s_n - 1, i)).to_f64().unwrap();
        for r in 0..rows {
            let rf = r as f64;
            if rf >= top && rf <= bottom {
                mask[r * w + i] = true;
            }
        }
    }
    mask
}

/// Mean absolute error between `image` and `recon` inside [`retina_mask`].
/// The mask is a constant; the gradient is with respect to `recon` only.
pub fn loss_reconstruction_masked<F: Float>(
    image: &[F],
    recon: &[F],
    y: &SurfaceCurveSet<F>,
    rows: usize,
) -> Result<Loss<F, Vec<F>>> {
    let w = y.cols();
    if image.len() != rows * w || recon.len() != rows * w {
        return Err(Error::Shape(format!(
            "images of {} and {} pixels for a {rows}x{w} mask",
            image.len(),
            recon.len()
        )));
    }
    let mask = retina_mask(y, rows);
    let count = mask.iter().filter(|&&m| m).count();
    let mut grad = vec![F::zero(); recon.len()];
    if count == 0 {
        return Ok(Loss {
            value: F::zero(),
            grad,
        });
    }
    let inv = F::one() / F::from(count).unwrap();
    let mut value = F::zero();
    for k in 0..recon.len() {
        if mask[k] {
            let d = recon[k] - image[k];
            value = value + d.abs();
            grad[k] = if d > F::zero() {
                inv
            } else if d < F::zero() {
                -inv
            } else {
                F::zero()
            };
        }
    }
    Ok(Loss {
        value: value * inv,
        grad,
    })
}

/// Per-surface bounds for the anatomical priors plus their hyperparameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorConstants {
    /// Largest admissible jump between adjacent columns, per surface (pixels).
    pub c: Vec<f64>,
    /// Largest admissible slope over `delta` columns, per surface (pixels/column).
    pub o: Vec<f64>,
    /// Column span of the slope prior.
    pub delta: usize,
    /// Largest admissible PMF standard deviation (pixels).
    pub t: f64,
    /// Width of the supervised Gaussian target (pixels).
    pub sigma: f64,
}

impl PriorConstants {
    pub fn validate(&self) -> Result<()> {
        if self.c.len() != self.o.len() {
            return Err(Error::Config(format!(
                "prior constants: {} continuity bounds but {} slope bounds",
                self.c.len(),
                self.o.len()
            )));
        }
        if let Some(v) = self
            .c
            .iter()
            .chain(&self.o)
            .find(|v| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::Config(format!(
                "prior bound {v} must be finite and non-negative"
            )));
        }
        if self.delta == 0 {
            return Err(Error::Config("prior delta must be at least 1".into()));
        }
        if !(self.t > 0.0 && self.t.is_finite()) || !(self.sigma > 0.0 && self.sigma.is_finite()) {
            return Err(Error::Config(format!(
                "prior t ({}) and sigma ({}) must be positive",
                self.t, self.sigma
            )));
        }
        Ok(())
    }

    pub fn surfaces(&self) -> usize {
        self.c.len()
    }

    pub fn to_toml_string(&self) -> String {
        toml::to_string(self).expect("prior constants serialize")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        let consts: Self =
            toml::from_str(text).map_err(|e| Error::Config(format!("prior constants: {e}")))?;
        consts.validate()?;
        Ok(consts)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_toml_string())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&std::fs::read_to_string(path)?)
    }
}

/// Derives `c_s` (max adjacent-column jump) and `o_s` (max slope over
/// `delta` columns) from reference annotations.
pub fn derive_constants<F: Float>(
    annotations: &[&SurfaceCurveSet<F>],
    delta: usize,
    t: f64,
    sigma: f64,
) -> Result<PriorConstants> {
    let first = annotations.first().ok_or_else(|| {
        Error::InvalidArgument("cannot derive prior constants from zero annotations".into())
    })?;
    let (s_n, w) = (first.surfaces(), first.cols());
    if delta == 0 || w <= delta {
        return Err(Error::InvalidArgument(format!(
            "annotation width {w} must exceed delta {delta} (delta ≥ 1)"
        )));
    }
    let mut c = vec![0.0f64; s_n];
    let mut o = vec![0.0f64; s_n];
    for a in annotations {
        same_curve_shape(first, a)?;
        for s in 0..s_n {
            let row = a.surface(s);
            for i in 0..w - 1 {
                let jump = (row[i] - row[i + 1]).abs().to_f64().unwrap();
                c[s] = c[s].max(jump);
            }
            for i in 0..w - delta {
                let slope = (row[i] - row[i + delta]).abs().to_f64().unwrap() / delta as f64;
                o[s] = o[s].max(slope);
            }
        }
    }
    let consts = PriorConstants {
        c,
        o,
        delta,
        t,
        sigma,
    };
    consts.validate()?;
    Ok(consts)
}

/// Per-term weights of the composite objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    /// Supervised KL.
    pub surface_kl: f64,
    /// Supervised MSE.
    pub surface_mse: f64,
    /// Ordering prior.
    pub ordering: f64,
    /// Continuity prior.
    pub continuity: f64,
    /// Slope prior.
    pub slope: f64,
    /// Spread prior.
    pub spread: f64,
    /// Style KL.
    pub style_kl: f64,
    /// Masked reconstruction.
    pub reconstruction: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::published()
    }
}

impl LossWeights {
    /// Supervised terms 50, ordering, continuity, slope and reconstruction 1,
    /// spread and style KL 0.1.
    pub fn published() -> Self {
        Self {
            surface_kl: 50.0,
            surface_mse: 50.0,
            ordering: 1.0,
            continuity: 1.0,
            slope: 1.0,
            spread: 0.1,
            style_kl: 0.1,
            reconstruction: 1.0,
        }
    }

    pub fn uniform(v: f64) -> Self {
        Self {
            surface_kl: v,
            surface_mse: v,
            ordering: v,
            continuity: v,
            slope: v,
            spread: v,
            style_kl: v,
            reconstruction: v,
        }
    }

    pub fn as_array(&self) -> [f64; 8] {
        [
            self.surface_kl,
            self.surface_mse,
            self.ordering,
            self.continuity,
            self.slope,
            self.spread,
            self.style_kl,
            self.reconstruction,
        ]
    }

    /// Zeroes the four anatomical prior weights.
    pub fn without_priors(mut self) -> Self {
        self.ordering = 0.0;
        self.continuity = 0.0;
        self.slope = 0.0;
        self.spread = 0.0;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let all = self.as_array();
        if let Some(v) = all.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Config(format!(
                "loss weight {v} must be finite and non-negative"
            )));
        }
        if all.iter().all(|&v| v == 0.0) {
            log::warn!("all loss weights are zero; nothing would be optimized");
            return Err(Error::Config("all loss weights are zero".into()));
        }
        Ok(())
    }
}

/// Unweighted loss terms of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub kl: f64,
    pub mse: f64,
    pub to: f64,
    pub lc: f64,
    pub ls: f64,
    pub std: f64,
    pub z_kl: f64,
    pub rec: f64,
}

/// All loss terms of one step plus the weighted total.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub kl: f64,
    pub mse: f64,
    pub to: f64,
    pub lc: f64,
    pub ls: f64,
    pub std: f64,
    pub z_kl: f64,
    pub rec: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub const FIELDS: [&'static str; 9] =
        ["kl", "mse", "to", "lc", "ls", "std", "z_kl", "rec", "total"];

    pub fn values(&self) -> [f64; 9] {
        [
            self.kl, self.mse, self.to, self.lc, self.ls, self.std, self.z_kl, self.rec, self.total,
        ]
    }

    pub fn terms(&self) -> LossTerms {
        LossTerms {
            kl: self.kl,
            mse: self.mse,
            to: self.to,
            lc: self.lc,
            ls: self.ls,
            std: self.std,
            z_kl: self.z_kl,
            rec: self.rec,
        }
    }

    /// First non-finite field, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        Self::FIELDS
            .iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| *n)
    }
}

/// Per-term coefficients of the total: the style KL and reconstruction
/// weights as given, half the weight for every other term.
pub fn term_coefficients(w: &LossWeights) -> LossTerms {
    LossTerms {
        kl: 0.5 * w.surface_kl,
        mse: 0.5 * w.surface_mse,
        to: 0.5 * w.ordering,
        lc: 0.5 * w.continuity,
        ls: 0.5 * w.slope,
        std: 0.5 * w.spread,
        z_kl: w.style_kl,
        rec: w.reconstruction,
    }
}

/// `L = w_zkl·zKL + w_rec·rec + ½(L_sup + L_self)` with
/// `L_sup = w_kl·KL + w_mse·MSE` and `L_self = w_to·to + w_lc·lc + w_ls·ls + w_std·std`.
pub fn total_loss(terms: &LossTerms, w: &LossWeights) -> Result<LossBreakdown> {
    w.validate()?;
    let sup = w.surface_kl * terms.kl + w.surface_mse * terms.mse;
    let unsup =
        w.ordering * terms.to + w.continuity * terms.lc + w.slope * terms.ls + w.spread * terms.std;
    let total = w.style_kl * terms.z_kl + w.reconstruction * terms.rec + 0.5 * (sup + unsup);
    Ok(LossBreakdown {
        kl: terms.kl,
        mse: terms.mse,
        to: terms.to,
        lc: terms.lc,
        ls: terms.ls,
        std: terms.std,
        z_kl: terms.z_kl,
        rec: terms.rec,
        total,
    })
}
