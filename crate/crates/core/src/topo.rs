//! Differentiable topological engine.
//!
//! Turns per-surface logits into column-wise position distributions, expected
//! surface positions, ordered surfaces, cumulative maps with enforced
//! ordering, and finally mutually exclusive layer maps.
//!
//! Every stage is a pure function over a [`Grid3`] (surface × row × column,
//! row 0 at the top of the image) or a [`SurfaceCurveSet`], together with a
//! `*_backward` vector-Jacobian product. The routines are generic over the
//! float type so they run in `f32` inside the training tape and in `f64` for
//! finite-difference checks.

use num_traits::Float;

use crate::error::{Error, Result};

/// Tolerance on column sums of a probability map.
pub const COLUMN_SUM_TOL: f64 = 1e-5;

/// Dense `depth × rows × cols` grid, row-major with columns fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct Grid3<F> {
    depth: usize,
    rows: usize,
    cols: usize,
    data: Vec<F>,
}

impl<F: Float> Grid3<F> {
    pub fn new(depth: usize, rows: usize, cols: usize, data: Vec<F>) -> Result<Self> {
        if data.len() != depth * rows * cols {
            return Err(Error::Shape(format!(
                "grid {depth}x{rows}x{cols} needs {} values, got {}",
                depth * rows * cols,
                data.len()
            )));
        }
        Ok(Self {
            depth,
            rows,
            cols,
            data,
        })
    }

    pub fn zeros(depth: usize, rows: usize, cols: usize) -> Self {
        Self {
            depth,
            rows,
            cols,
            data: vec![F::zero(); depth * rows * cols],
        }
    }

    pub fn from_fn(
        depth: usize,
        rows: usize,
        cols: usize,
        mut f: impl FnMut(usize, usize, usize) -> F,
    ) -> Self {
        let mut data = Vec::with_capacity(depth * rows * cols);
        for s in 0..depth {
            for r in 0..rows {
                for i in 0..cols {
                    data.push(f(s, r, i));
                }
            }
        }
        Self {
            depth,
            rows,
            cols,
            data,
        }
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        (self.depth, self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, s: usize, r: usize, i: usize) -> F {
        self.data[(s * self.rows + r) * self.cols + i]
    }

    #[inline]
    pub fn set(&mut self, s: usize, r: usize, i: usize, v: F) {
        self.data[(s * self.rows + r) * self.cols + i] = v;
    }

    pub fn data(&self) -> &[F] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [F] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<F> {
        self.data
    }
}

/// `P(r | i, s)`: one probability mass function over rows per surface and column.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceProbabilityMap<F>(Grid3<F>);

impl<F: Float> SurfaceProbabilityMap<F> {
    /// Validates entries in `[0, 1]` and unit column sums.
    pub fn try_new(grid: Grid3<F>) -> Result<Self> {
        let (s_n, h, w) = grid.dims();
        let tol = F::from(COLUMN_SUM_TOL).unwrap();
        for (k, &v) in grid.data().iter().enumerate() {
            if !v.is_finite() {
                return Err(Error::NonFinite {
                    what: "probability map",
                    index: k,
                });
            }
            if v < F::zero() || v > F::one() + tol {
                return Err(Error::InvalidArgument(format!(
                    "probability entry {} outside [0, 1] at flat index {k}",
                    v.to_f64().unwrap()
                )));
            }
        }
        for s in 0..s_n {
            for i in 0..w {
                let sum = (0..h).fold(F::zero(), |acc, r| acc + grid.get(s, r, i));
                if (sum - F::one()).abs() > tol {
                    return Err(Error::InvalidArgument(format!(
                        "column {i} of surface {s} sums to {}",
                        sum.to_f64().unwrap()
                    )));
                }
            }
        }
        Ok(Self(grid))
    }

    pub(crate) fn new_unchecked(grid: Grid3<F>) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid3<F> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<F> {
        self.0
    }
}

/// `C^s`: column-wise top-down cumulative sums of a probability map, or the
/// ordering-enforced maps derived from them.
#[derive(Clone, Debug, PartialEq)]
pub struct CumulativeMaps<F>(Grid3<F>);

impl<F: Float> CumulativeMaps<F> {
    pub fn new(grid: Grid3<F>) -> Self {
        Self(grid)
    }

    pub fn grid(&self) -> &Grid3<F> {
        &self.0
    }

    pub fn into_grid(self) -> Grid3<F> {
        self.0
    }
}

/// `y^s_i`: fractional row position of each surface at each column.
#[derive(Clone, Debug, PartialEq)]
pub struct SurfaceCurveSet<F> {
    surfaces: usize,
    cols: usize,
    positions: Vec<F>,
}

impl<F: Float> SurfaceCurveSet<F> {
    pub fn new(surfaces: usize, cols: usize, positions: Vec<F>) -> Result<Self> {
        if positions.len() != surfaces * cols {
            return Err(Error::Shape(format!(
                "curve set {surfaces}x{cols} needs {} positions, got {}",
                surfaces * cols,
                positions.len()
            )));
        }
        Ok(Self {
            surfaces,
            cols,
            positions,
        })
    }

    pub fn from_rows(rows: &[Vec<F>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(Error::Shape("ragged surface rows".into()));
        }
        Self::new(rows.len(), cols, rows.concat())
    }

    pub fn surfaces(&self) -> usize {
        self.surfaces
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, s: usize, i: usize) -> F {
        self.positions[s * self.cols + i]
    }

    #[inline]
    pub fn set(&mut self, s: usize, i: usize, v: F) {
        self.positions[s * self.cols + i] = v;
    }

    pub fn surface(&self, s: usize) -> &[F] {
        &self.positions[s * self.cols..(s + 1) * self.cols]
    }

    pub fn positions(&self) -> &[F] {
        &self.positions
    }

    pub fn positions_mut(&mut self) -> &mut [F] {
        &mut self.positions
    }

    /// Number of `(s, i)` with `y^s_i < y^{s-1}_i`.
    pub fn ordering_violations(&self) -> usize {
        (1..self.surfaces)
            .flat_map(|s| (0..self.cols).map(move |i| (s, i)))
            .filter(|&(s, i)| self.get(s, i) < self.get(s - 1, i))
            .count()
    }

    /// Reverses the column order (horizontal flip).
    pub fn flipped(&self) -> Self {
        let mut out = self.clone();
        for s in 0..self.surfaces {
            out.positions[s * self.cols..(s + 1) * self.cols].reverse();
        }
        out
    }

    pub fn cast<G: Float>(&self) -> SurfaceCurveSet<G> {
        SurfaceCurveSet {
            surfaces: self.surfaces,
            cols: self.cols,
            positions: self
                .positions
                .iter()
                .map(|v| G::from(*v).unwrap())
                .collect(),
        }
    }
}

/// Mutually exclusive layer maps plus an optional texture channel.
#[derive(Clone, Debug, PartialEq)]
pub struct AnatomyFactors<F> {
    pub layer_maps: Grid3<F>,
    pub texture: Option<Vec<F>>,
}

impl<F: Float> AnatomyFactors<F> {
    /// Factor channels in order: layers first, texture last.
    pub fn channels(&self) -> usize {
        self.layer_maps.dims().0 + usize::from(self.texture.is_some())
    }

    /// Largest `Σ_s layer_maps[s]` over all pixels.
    pub fn max_coverage(&self) -> F {
        let (s_n, h, w) = self.layer_maps.dims();
        let mut best = F::zero();
        for r in 0..h {
            for i in 0..w {
                let sum = (0..s_n).fold(F::zero(), |acc, s| acc + self.layer_maps.get(s, r, i));
                best = best.max(sum);
            }
        }
        best
    }
}

#[inline]
fn ramp<F: Float>(v: F) -> F {
    v.max(F::zero())
}

/// Softmax over rows, independently for every (surface, column).
pub fn columnwise_softmax<F: Float>(logits: &Grid3<F>) -> Result<SurfaceProbabilityMap<F>> {
    if let Some(index) = logits.data().iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite {
            what: "logits",
            index,
        });
    }
    let (s_n, h, w) = logits.dims();
    let mut out = Grid3::zeros(s_n, h, w);
    for s in 0..s_n {
        for i in 0..w {
            let max = (0..h).fold(F::neg_infinity(), |m, r| m.max(logits.get(s, r, i)));
            let mut sum = F::zero();
            for r in 0..h {
                let e = (logits.get(s, r, i) - max).exp();
                out.set(s, r, i, e);
                sum = sum + e;
            }
            for r in 0..h {
                out.set(s, r, i, out.get(s, r, i) / sum);
            }
        }
    }
    Ok(SurfaceProbabilityMap(out))
}

/// `∂L/∂logits = P ⊙ (g − Σ_r P·g)` per column.
pub fn columnwise_softmax_backward<F: Float>(
    p: &SurfaceProbabilityMap<F>,
    grad: &Grid3<F>,
) -> Grid3<F> {
    let p = p.grid();
    let (s_n, h, w) = p.dims();
    let mut out = Grid3::zeros(s_n, h, w);
    for s in 0..s_n {
        for i in 0..w {
            let dot = (0..h).fold(F::zero(), |acc, r| acc + p.get(s, r, i) * grad.get(s, r, i));
            for r in 0..h {
                out.set(s, r, i, p.get(s, r, i) * (grad.get(s, r, i) - dot));
            }
        }
    }
    out
}

/// `y^s_i = Σ_r r·P(r|i,s)`.
pub fn expected_positions<F: Float>(p: &SurfaceProbabilityMap<F>) -> SurfaceCurveSet<F> {
    let p = p.grid();
    let (s_n, h, w) = p.dims();
    let mut y = vec![F::zero(); s_n * w];
    for s in 0..s_n {
        for r in 0..h {
            let rf = F::from(r).unwrap();
            for i in 0..w {
                y[s * w + i] = y[s * w + i] + rf * p.get(s, r, i);
            }
        }
    }
    SurfaceCurveSet {
        surfaces: s_n,
        cols: w,
        positions: y,
    }
}

pub fn expected_positions_backward<F: Float>(rows: usize, grad: &SurfaceCurveSet<F>) -> Grid3<F> {
    Grid3::from_fn(grad.surfaces, rows, grad.cols, |s, r, i| {
        F::from(r).unwrap() * grad.get(s, i)
    })
}

/// Iterative ordering update `y^s ← y^{s−1} + |y^s − y^{s−1}|_+`, where
/// `y^{s−1}` is the already-updated predecessor.
pub fn rectify_surfaces<F: Float>(y: &SurfaceCurveSet<F>) -> SurfaceCurveSet<F> {
    let mut out = y.clone();
    for s in 1..y.surfaces {
        for i in 0..y.cols {
            let prev = out.get(s - 1, i);
            out.set(s, i, prev + ramp(y.get(s, i) - prev));
        }
    }
    out
}

/// Backward of [`rectify_surfaces`]. The ramp's derivative at 0 is taken as 0.
pub fn rectify_surfaces_backward<F: Float>(
    y: &SurfaceCurveSet<F>,
    rectified: &SurfaceCurveSet<F>,
    grad: &SurfaceCurveSet<F>,
) -> SurfaceCurveSet<F> {
    let mut carry = grad.clone();
    let mut out = SurfaceCurveSet {
        surfaces: y.surfaces,
        cols: y.cols,
        positions: vec![F::zero(); y.positions.len()],
    };
    for s in (1..y.surfaces).rev() {
        for i in 0..y.cols {
            let g = carry.get(s, i);
            if y.get(s, i) - rectified.get(s - 1, i) > F::zero() {
                out.set(s, i, g);
            } else {
                carry.set(s - 1, i, carry.get(s - 1, i) + g);
            }
        }
    }
    if y.surfaces > 0 {
        for i in 0..y.cols {
            out.set(0, i, carry.get(0, i));
        }
    }
    out
}

/// `C^s[r][i] = Σ_{r' ≤ r} P(r'|i,s)`, clamped at one against rounding overshoot.
pub fn cumulative_maps<F: Float>(p: &SurfaceProbabilityMap<F>) -> CumulativeMaps<F> {
    let p = p.grid();
    let (s_n, h, w) = p.dims();
    let mut out = Grid3::zeros(s_n, h, w);
    for s in 0..s_n {
        for i in 0..w {
            let mut acc = F::zero();
            for r in 0..h {
                acc = acc + p.get(s, r, i);
                out.set(s, r, i, acc.min(F::one()));
            }
        }
    }
    CumulativeMaps(out)
}

/// Adjoint of a prefix sum: suffix sums of the upstream gradient. The
/// clamp at one only removes rounding overshoot and is passed through.
pub fn cumulative_maps_backward<F: Float>(grad: &Grid3<F>) -> Grid3<F> {
    let (s_n, h, w) = grad.dims();
    let mut out = Grid3::zeros(s_n, h, w);
    for s in 0..s_n {
        for i in 0..w {
            let mut acc = F::zero();
            for r in (0..h).rev() {
                acc = acc + grad.get(s, r, i);
                out.set(s, r, i, acc);
            }
        }
    }
    out
}

/// `M^{s−1} + min(C^s, 1) − 1`, never above `M^{s−1}` in floating point.
#[inline]
fn gated<F: Float>(c: F, prev: F) -> F {
    prev - (F::one() - c.min(F::one()))
}

/// `M^1 = C^1`, `M^s = |min(C^s, 1) + M^{s−1} − 1|_+`, which is elementwise
/// non-increasing in `s`. Prefix sums can overshoot one by rounding; the
/// clamp keeps that from breaking monotonicity. Evaluated as
/// `M^{s−1} − (1 − min(C^s, 1))` so that rounding never lifts `M^s` above
/// `M^{s−1}`.
pub fn enforce_map_ordering<F: Float>(c: &CumulativeMaps<F>) -> CumulativeMaps<F> {
    let c = c.grid();
    let (s_n, h, w) = c.dims();
    let mut m = c.clone();
    for s in 1..s_n {
        for r in 0..h {
            for i in 0..w {
                let v = ramp(gated(c.get(s, r, i), m.get(s - 1, r, i)));
                m.set(s, r, i, v);
            }
        }
    }
    CumulativeMaps(m)
}

pub fn enforce_map_ordering_backward<F: Float>(
    c: &CumulativeMaps<F>,
    enforced: &CumulativeMaps<F>,
    grad: &Grid3<F>,
) -> Grid3<F> {
    let (c, m) = (c.grid(), enforced.grid());
    let (s_n, h, w) = c.dims();
    let mut carry = grad.clone();
    let mut out = Grid3::zeros(s_n, h, w);
    for s in (1..s_n).rev() {
        for r in 0..h {
            for i in 0..w {
                let cv = c.get(s, r, i);
                if gated(cv, m.get(s - 1, r, i)) > F::zero() {
                    let g = carry.get(s, r, i);
                    if cv <= F::one() {
                        out.set(s, r, i, g);
                    }
                    carry.set(s - 1, r, i, carry.get(s - 1, r, i) + g);
                }
            }
        }
    }
    if s_n > 0 {
        for r in 0..h {
            for i in 0..w {
                out.set(0, r, i, carry.get(0, r, i));
            }
        }
    }
    out
}

/// Tolerance for the monotonicity precondition of [`decompose_layers`].
pub const MONOTONE_TOL: f64 = 1e-6;

/// `L^s = M^s − M^{s+1}` for `s < S`, `L^S = M^S`.
pub fn decompose_layers<F: Float>(m: &CumulativeMaps<F>) -> Result<Grid3<F>> {
    let m = m.grid();
    let (s_n, h, w) = m.dims();
    let tol = F::from(MONOTONE_TOL).unwrap();
    let mut out = m.clone();
    for s in 0..s_n.saturating_sub(1) {
        for r in 0..h {
            for i in 0..w {
                let diff = m.get(s, r, i) - m.get(s + 1, r, i);
                if diff < -tol {
                    return Err(Error::NotMonotone {
                        surface: s + 1,
                        row: r,
                        col: i,
                        excess: -diff.to_f64().unwrap(),
                    });
                }
                out.set(s, r, i, diff);
            }
        }
    }
    Ok(out)
}

/// `∂/∂M^s = g^s − g^{s−1}` (with `g^{−1} = 0`).
pub fn decompose_layers_backward<F: Float>(grad: &Grid3<F>) -> Grid3<F> {
    let (s_n, h, w) = grad.dims();
    let mut out = grad.clone();
    for s in 1..s_n {
        for r in 0..h {
            for i in 0..w {
                out.set(s, r, i, grad.get(s, r, i) - grad.get(s - 1, r, i));
            }
        }
    }
    out
}

/// Round to nearest, ties up.
#[inline]
pub fn round_half_up<F: Float>(v: F) -> F {
    let f = v.floor();
    if v - f >= F::from(0.5).unwrap() {
        f + F::one()
    } else {
        f
    }
}

/// Forward of the straight-through binarization; the backward is identity.
pub fn binarize<F: Float>(values: &[F]) -> Vec<F> {
    values.iter().map(|&v| round_half_up(v)).collect()
}

pub fn binarize_factors<F: Float>(factors: &AnatomyFactors<F>) -> AnatomyFactors<F> {
    let (s_n, h, w) = factors.layer_maps.dims();
    AnatomyFactors {
        layer_maps: Grid3 {
            depth: s_n,
            rows: h,
            cols: w,
            data: binarize(factors.layer_maps.data()),
        },
        texture: factors.texture.as_deref().map(binarize),
    }
}

/// All intermediate results of one pass through the engine.
#[derive(Clone, Debug)]
pub struct EngineOutput<F> {
    pub probabilities: SurfaceProbabilityMap<F>,
    pub raw_positions: SurfaceCurveSet<F>,
    pub positions: SurfaceCurveSet<F>,
    pub cumulative: CumulativeMaps<F>,
    pub ordered: CumulativeMaps<F>,
    pub layer_maps: Grid3<F>,
}

/// Logits → probabilities → ordered surfaces and soft layer maps.
pub fn run_engine<F: Float>(logits: &Grid3<F>) -> Result<EngineOutput<F>> {
    let probabilities = columnwise_softmax(logits)?;
    let raw_positions = expected_positions(&probabilities);
    let positions = rectify_surfaces(&raw_positions);
    let cumulative = cumulative_maps(&probabilities);
    let ordered = enforce_map_ordering(&cumulative);
    let layer_maps = decompose_layers(&ordered)?;
    Ok(EngineOutput {
        probabilities,
        raw_positions,
        positions,
        cumulative,
        ordered,
        layer_maps,
    })
}
