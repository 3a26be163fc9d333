//! Discrete representation of functional covariates and coefficients.
//!
//! Every backend reduces `∫x(t)β(t)dt` to `X·W·c` and `∫β''(t)²dt` to
//! `cᵀ·W₂·c`, where `X` holds the curves sampled on the time grid and `c`
//! is the finite coefficient vector for `β`.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FlarsError, Result};

pub const MAX_QUADRATURE_POINTS: usize = 64;

/// Strictly increasing sampling grid with at least three points.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct TimeGrid {
    points: Vec<f64>,
}

impl TimeGrid {
    pub fn new(points: Vec<f64>) -> Result<Self> {
        if points.len() < 3 {
            return Err(invalid(format!(
                "time grid needs at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|t| !t.is_finite()) {
            return Err(invalid("time grid contains non-finite values"));
        }
        if let Some(i) = points.windows(2).position(|w| w[1] <= w[0]) {
            return Err(invalid(format!(
                "time grid is not strictly increasing at position {}",
                i + 1
            )));
        }
        Ok(TimeGrid { points })
    }

    /// `q` evenly spaced points covering `[start, end]`.
    pub fn linspace(start: f64, end: f64, q: usize) -> Result<Self> {
        if q < 2 {
            return Err(invalid("linspace needs at least 2 points"));
        }
        let step = (end - start) / (q - 1) as f64;
        let mut pts: Vec<f64> = (0..q).map(|i| start + step * i as f64).collect();
        pts[q - 1] = end;
        TimeGrid::new(pts)
    }

    pub fn points(&self) -> &[f64] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn start(&self) -> f64 {
        self.points[0]
    }

    pub fn end(&self) -> f64 {
        self.points[self.points.len() - 1]
    }

    /// Index of the grid point closest to `t`; ties go to the lower index.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (i, &p) in self.points.iter().enumerate() {
            let d = (p - t).abs();
            if d < best_d {
                best = i;
                best_d = d;
            }
        }
        best
    }
}

impl TryFrom<Vec<f64>> for TimeGrid {
    type Error = FlarsError;
    fn try_from(v: Vec<f64>) -> Result<Self> {
        TimeGrid::new(v)
    }
}

impl From<TimeGrid> for Vec<f64> {
    fn from(g: TimeGrid) -> Self {
        g.points
    }
}

/// `n` curves observed on a common grid, one row per sample.
#[derive(Clone, Debug, PartialEq)]
pub struct FunctionalSample {
    values: DMatrix<f64>,
    grid: TimeGrid,
}

impl FunctionalSample {
    pub fn new(values: DMatrix<f64>, grid: TimeGrid) -> Result<Self> {
        if values.ncols() != grid.len() {
            return Err(invalid(format!(
                "curve matrix has {} columns but the grid has {} points",
                values.ncols(),
                grid.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            let (r, c) = (pos % values.nrows(), pos / values.nrows());
            return Err(invalid(format!("non-finite curve value at row {r}, column {c}")));
        }
        Ok(FunctionalSample { values, grid })
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_samples(&self) -> usize {
        self.values.nrows()
    }

    /// Keeps only the listed rows, in order.
    pub fn select_rows(&self, rows: &[usize]) -> FunctionalSample {
        FunctionalSample {
            values: self.values.select_rows(rows),
            grid: self.grid.clone(),
        }
    }
}

/// Three-point second-difference operator on a (possibly uneven) grid.
#[derive(Clone, Debug)]
pub struct DiffMatrix {
    pub l: DMatrix<f64>,
    pub grid: TimeGrid,
}

/// Second-derivative stencil for an arbitrary strictly increasing grid.
///
/// Row `j` evaluates `f''(t_{j+1})` from `f(t_j), f(t_{j+1}), f(t_{j+2})`;
/// it is exact for quadratics and annihilates constants and lines.
pub fn uneven_diff_matrix(grid: &TimeGrid) -> DiffMatrix {
    let t = grid.points();
    let q = t.len();
    let mut l = DMatrix::zeros(q - 2, q);
    for j in 1..q - 1 {
        let h_lo = t[j] - t[j - 1];
        let h_hi = t[j + 1] - t[j];
        let span = t[j + 1] - t[j - 1];
        l[(j - 1, j - 1)] = 2.0 / (h_lo * span);
        l[(j - 1, j)] = -2.0 / (h_lo * h_hi);
        l[(j - 1, j + 1)] = 2.0 / (h_hi * span);
    }
    DiffMatrix {
        l,
        grid: grid.clone(),
    }
}

fn legendre_with_derivative(n: usize, x: f64) -> (f64, f64) {
    let mut p_prev = 1.0;
    let mut p = x;
    if n == 0 {
        return (1.0, 0.0);
    }
    for k in 1..n {
        let kf = k as f64;
        let next = ((2.0 * kf + 1.0) * x * p - kf * p_prev) / (kf + 1.0);
        p_prev = p;
        p = next;
    }
    let dp = n as f64 * (x * p - p_prev) / (x * x - 1.0);
    (p, dp)
}

/// Gauss–Legendre nodes (ascending) and weights on `[-1, 1]`.
pub fn gauss_legendre_rule(points: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    if points == 0 || points > MAX_QUADRATURE_POINTS {
        return Err(invalid(format!(
            "quadrature order must be in 1..={MAX_QUADRATURE_POINTS}, got {points}"
        )));
    }
    let n = points;
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n / 2 {
        // Tricomi's initial guess for the i-th largest root
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        for _ in 0..100 {
            let (p, dp) = legendre_with_derivative(n, x);
            let dx = p / dp;
            x -= dx;
            if dx.abs() <= 1e-16 {
                break;
            }
        }
        let (_, dp) = legendre_with_derivative(n, x);
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[n - 1 - i] = x;
        nodes[i] = -x;
        weights[n - 1 - i] = w;
        weights[i] = w;
    }
    if n % 2 == 1 {
        let (_, dp) = legendre_with_derivative(n, 0.0);
        nodes[n / 2] = 0.0;
        weights[n / 2] = 2.0 / (dp * dp);
    }
    Ok((nodes, weights))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RepresentationKind {
    /// Representative data points: the coefficient lives on the full grid.
    Rdp,
    /// Gauss–Legendre quadrature on the grid points nearest to the abscissae.
    Gq,
    /// Cubic B-spline basis with equally spaced knots.
    Bf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepresentationConfig {
    pub kind: RepresentationKind,
    pub quad_points: usize,
    pub n_basis: usize,
}

impl Default for RepresentationConfig {
    fn default() -> Self {
        RepresentationConfig {
            kind: RepresentationKind::Gq,
            quad_points: 18,
            n_basis: 18,
        }
    }
}

impl RepresentationConfig {
    pub fn rdp() -> Self {
        RepresentationConfig {
            kind: RepresentationKind::Rdp,
            ..Default::default()
        }
    }

    pub fn gq(quad_points: usize) -> Self {
        RepresentationConfig {
            kind: RepresentationKind::Gq,
            quad_points,
            ..Default::default()
        }
    }

    pub fn bf(n_basis: usize) -> Self {
        RepresentationConfig {
            kind: RepresentationKind::Bf,
            n_basis,
            ..Default::default()
        }
    }
}

#[derive(Serialize, Deserialize)]
struct RepresentationSpec {
    config: RepresentationConfig,
    grid: TimeGrid,
}

/// Weight matrices turning integrals over the grid into linear algebra.
///
/// `w` is `q × dim`, `w2` and `mass` are `dim × dim`. `mass` discretizes
/// `∫β(t)²dt` and backs the ridge part of the penalty.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(try_from = "RepresentationSpec", into = "RepresentationSpec")]
pub struct Representation {
    config: RepresentationConfig,
    grid: TimeGrid,
    w: DMatrix<f64>,
    w2: DMatrix<f64>,
    mass: DMatrix<f64>,
    support: Vec<f64>,
    basis: Option<DMatrix<f64>>,
}

impl TryFrom<RepresentationSpec> for Representation {
    type Error = FlarsError;
    fn try_from(raw: RepresentationSpec) -> Result<Self> {
        Representation::build(&raw.config, &raw.grid)
    }
}

impl From<Representation> for RepresentationSpec {
    fn from(rep: Representation) -> Self {
        RepresentationSpec {
            config: rep.config,
            grid: rep.grid,
        }
    }
}

impl PartialEq for Representation {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config && self.grid == other.grid
    }
}

impl Representation {
    pub fn build(config: &RepresentationConfig, grid: &TimeGrid) -> Result<Self> {
        match config.kind {
            RepresentationKind::Rdp => Ok(Self::build_rdp(config, grid)),
            RepresentationKind::Gq => Self::build_gq(config, grid),
            RepresentationKind::Bf => Self::build_bf(config, grid),
        }
    }

    fn build_rdp(config: &RepresentationConfig, grid: &TimeGrid) -> Self {
        let q = grid.len();
        let inv_q = 1.0 / q as f64;
        let w = DMatrix::from_diagonal_element(q, q, inv_q);
        let l = uneven_diff_matrix(grid).l;
        let w2 = l.transpose() * &l * inv_q;
        Representation {
            config: config.clone(),
            grid: grid.clone(),
            mass: w.clone(),
            w,
            w2: symmetrize(w2),
            support: grid.points().to_vec(),
            basis: None,
        }
    }

    fn build_gq(config: &RepresentationConfig, grid: &TimeGrid) -> Result<Self> {
        let q = grid.len();
        let k = config.quad_points;
        if k > q {
            return Err(invalid(format!(
                "{k} quadrature points requested on a grid of {q} points"
            )));
        }
        let (nodes, weights) = gauss_legendre_rule(k)?;
        let (a, b) = (grid.start(), grid.end());
        let half = 0.5 * (b - a);
        let mut index = Vec::with_capacity(k);
        for &x in &nodes {
            let t = a + half * (x + 1.0);
            let i = grid.nearest_index(t);
            if index.last().is_some_and(|&last| last >= i) {
                return Err(invalid(format!(
                    "grid of {q} points is too coarse to separate {k} quadrature abscissae"
                )));
            }
            index.push(i);
        }
        let scaled: Vec<f64> = weights.iter().map(|w| w * half).collect();
        let mut w = DMatrix::zeros(q, k);
        for (col, (&row, &wt)) in index.iter().zip(&scaled).enumerate() {
            w[(row, col)] = wt;
        }
        let support: Vec<f64> = index.iter().map(|&i| grid.points()[i]).collect();
        let w2 = if k >= 3 {
            let l = uneven_diff_matrix(&TimeGrid::new(support.clone())?).l;
            let inner = DMatrix::from_diagonal(&DVector::from_row_slice(&scaled[1..k - 1]));
            symmetrize(l.transpose() * inner * l)
        } else {
            DMatrix::zeros(k, k)
        };
        Ok(Representation {
            config: config.clone(),
            grid: grid.clone(),
            w,
            w2,
            mass: DMatrix::from_diagonal(&DVector::from_vec(scaled)),
            support,
            basis: None,
        })
    }

    fn build_bf(config: &RepresentationConfig, grid: &TimeGrid) -> Result<Self> {
        let q = grid.len();
        let nb = config.n_basis;
        if nb < 4 {
            return Err(invalid("cubic B-spline basis needs at least 4 functions"));
        }
        if nb > q {
            return Err(invalid(format!(
                "{nb} basis functions requested on a grid of {q} points"
            )));
        }
        let knots = clamped_knots(grid.start(), grid.end(), nb);
        let mut phi = DMatrix::zeros(q, nb);
        let mut phi2 = DMatrix::zeros(q, nb);
        for (i, &t) in grid.points().iter().enumerate() {
            let v = bspline_derivative(&knots, 4, t, 0);
            let d2 = bspline_derivative(&knots, 4, t, 2);
            for j in 0..nb {
                phi[(i, j)] = v[j];
                phi2[(i, j)] = d2[j];
            }
        }
        let inv_q = 1.0 / q as f64;
        let w = &phi * inv_q;
        let w2 = symmetrize(phi2.transpose() * &phi2 * inv_q);
        let mass = symmetrize(phi.transpose() * &phi * inv_q);
        let step = (grid.end() - grid.start()) / (nb - 3) as f64;
        let support = (0..nb)
            .map(|j| grid.start() + step * (j as f64 - 1.0).clamp(0.0, (nb - 3) as f64))
            .collect();
        Ok(Representation {
            config: config.clone(),
            grid: grid.clone(),
            w,
            w2,
            mass,
            support,
            basis: Some(phi),
        })
    }

    pub fn config(&self) -> &RepresentationConfig {
        &self.config
    }

    pub fn kind(&self) -> RepresentationKind {
        self.config.kind
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Length of the coefficient vector.
    pub fn dim(&self) -> usize {
        self.w.ncols()
    }

    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    pub fn w2(&self) -> &DMatrix<f64> {
        &self.w2
    }

    pub fn mass(&self) -> &DMatrix<f64> {
        &self.mass
    }

    /// Time points associated with each coefficient (for RDP and GQ these
    /// are where the coefficient is evaluated).
    pub fn support(&self) -> &[f64] {
        &self.support
    }

    /// The projection weights spread over the full grid: `1/q` for RDP and
    /// the rescaled quadrature weights at the abscissa points (zero
    /// elsewhere) for GQ. `None` for the basis backend.
    pub fn grid_weights(&self) -> Option<Vec<f64>> {
        match self.kind() {
            RepresentationKind::Rdp => Some(self.w.diagonal().iter().copied().collect()),
            RepresentationKind::Gq => {
                let mut out = vec![0.0; self.grid.len()];
                for c in self.w.column_iter() {
                    for (row, v) in c.iter().enumerate() {
                        if *v != 0.0 {
                            out[row] = *v;
                        }
                    }
                }
                Some(out)
            }
            RepresentationKind::Bf => None,
        }
    }

    /// Coefficient vector representing the function `f`.
    ///
    /// RDP and GQ sample `f` at the support points; BF fits the basis to `f`
    /// on the grid by least squares.
    pub fn coefficients_of(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        match &self.basis {
            None => DVector::from_iterator(self.dim(), self.support.iter().map(|&t| f(t))),
            Some(phi) => {
                let target = DVector::from_iterator(self.grid.len(), self.grid.points().iter().map(|&t| f(t)));
                let gram = phi.transpose() * phi;
                let rhs = phi.transpose() * target;
                gram.cholesky()
                    .map(|c| c.solve(&rhs))
                    .unwrap_or_else(|| DVector::zeros(self.dim()))
            }
        }
    }

    /// Evaluates the coefficient function: `(t, β(t))` pairs on the support
    /// for RDP/GQ and on the full grid for BF.
    pub fn coefficient_curve(&self, coef: &DVector<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_dim(coef.len())?;
        Ok(match &self.basis {
            None => (self.support.clone(), coef.iter().copied().collect()),
            Some(phi) => (self.grid.points().to_vec(), (phi * coef).iter().copied().collect()),
        })
    }

    fn check_dim(&self, len: usize) -> Result<()> {
        if len != self.dim() {
            return Err(invalid(format!(
                "coefficient vector has length {len}, representation expects {}",
                self.dim()
            )));
        }
        Ok(())
    }

    /// `X·W`, the `n × dim` design block of a functional sample.
    pub fn design(&self, x: &FunctionalSample) -> Result<DMatrix<f64>> {
        if x.grid().len() != self.grid.len() {
            return Err(invalid(format!(
                "sample grid has {} points, representation grid has {}",
                x.grid().len(),
                self.grid.len()
            )));
        }
        Ok(x.values() * &self.w)
    }
}

fn symmetrize(m: DMatrix<f64>) -> DMatrix<f64> {
    (&m + m.transpose()) * 0.5
}

/// `∫x(t)β(t)dt ≈ X·W·c` for every sample.
pub fn project(x: &FunctionalSample, rep: &Representation, coef: &DVector<f64>) -> Result<DVector<f64>> {
    rep.check_dim(coef.len())?;
    if x.grid().len() != rep.grid().len() {
        return Err(invalid("sample and representation grids differ in length"));
    }
    Ok(x.values() * (rep.w() * coef))
}

/// `∫β''(t)²dt ≈ cᵀ·W₂·c`.
pub fn roughness(rep: &Representation, coef: &DVector<f64>) -> Result<f64> {
    rep.check_dim(coef.len())?;
    Ok(coef.dot(&(rep.w2() * coef)).max(0.0))
}

/// Clamped cubic knot vector with `n_basis - 4` equally spaced interior knots.
fn clamped_knots(a: f64, b: f64, n_basis: usize) -> Vec<f64> {
    let n_breaks = n_basis - 2;
    let step = (b - a) / (n_breaks - 1) as f64;
    let mut knots = vec![a; 3];
    for i in 0..n_breaks {
        knots.push(if i == n_breaks - 1 { b } else { a + step * i as f64 });
    }
    knots.extend([b; 3]);
    knots
}

/// All B-spline basis values of the given order at `x` (Cox–de Boor).
fn bspline_values(knots: &[f64], order: usize, x: f64) -> Vec<f64> {
    let m = knots.len() - 1;
    let last = knots[m];
    let mut b: Vec<f64> = (0..m)
        .map(|j| {
            let (lo, hi) = (knots[j], knots[j + 1]);
            let inside = (lo <= x && x < hi) || (x == last && hi == last && lo < hi);
            if inside {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    for k in 2..=order {
        let len = knots.len() - k;
        let mut next = vec![0.0; len];
        for (j, slot) in next.iter_mut().enumerate() {
            let d1 = knots[j + k - 1] - knots[j];
            let d2 = knots[j + k] - knots[j + 1];
            let left = if d1 > 0.0 { (x - knots[j]) / d1 * b[j] } else { 0.0 };
            let right = if d2 > 0.0 { (knots[j + k] - x) / d2 * b[j + 1] } else { 0.0 };
            *slot = left + right;
        }
        b = next;
    }
    b
}

/// `deriv`-th derivative of every basis function of the given order at `x`.
fn bspline_derivative(knots: &[f64], order: usize, x: f64, deriv: usize) -> Vec<f64> {
    if deriv == 0 {
        return bspline_values(knots, order, x);
    }
    let lower = bspline_derivative(knots, order - 1, x, deriv - 1);
    let len = knots.len() - order;
    let k = (order - 1) as f64;
    (0..len)
        .map(|j| {
            let d1 = knots[j + order - 1] - knots[j];
            let d2 = knots[j + order] - knots[j + 1];
            let a = if d1 > 0.0 { lower[j] / d1 } else { 0.0 };
            let b = if d2 > 0.0 { lower[j + 1] / d2 } else { 0.0 };
            k * (a - b)
        })
        .collect()
}
