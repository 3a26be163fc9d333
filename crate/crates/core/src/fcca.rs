//! Penalized canonical correlation between a scalar response and a group of
//! scalar and functional variables.

use std::cell::OnceCell;
use std::collections::HashSet;

use nalgebra::{DMatrix, DVector};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FlarsError, Result};
use crate::funcrep::{FunctionalSample, Representation};
use crate::linalg::{block_diag, center_columns, hstack, sd, trace_of_product, SpdFactor};

/// Condition number above which the automatic ridge weight kicks in.
pub const ILL_CONDITIONED: f64 = 1e10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PenaltyConfig {
    pub lambda1: f64,
    pub lambda2: f64,
}

impl PenaltyConfig {
    pub fn new(lambda1: f64, lambda2: f64) -> Result<Self> {
        for (name, v) in [("lambda1", lambda1), ("lambda2", lambda2)] {
            if !v.is_finite() || v < 0.0 {
                return Err(invalid(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        Ok(PenaltyConfig { lambda1, lambda2 })
    }

    pub fn none() -> Self {
        PenaltyConfig {
            lambda1: 0.0,
            lambda2: 0.0,
        }
    }
}

impl Default for PenaltyConfig {
    fn default() -> Self {
        Self::none()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BlockKind {
    Scalar,
    Functional,
}

/// One member of a group after projection: the `n × d` design block `M`
/// (`z` itself, or `X·W`), its Gram matrix and, for functional blocks, the
/// roughness and mass matrices of the representation.
#[derive(Clone, Debug)]
pub struct DesignBlock {
    kind: BlockKind,
    m: DMatrix<f64>,
    gram: DMatrix<f64>,
    w2: Option<DMatrix<f64>>,
    mass: Option<DMatrix<f64>>,
}

impl DesignBlock {
    pub fn scalar(z: &DVector<f64>) -> Self {
        let m = DMatrix::from_column_slice(z.len(), 1, z.as_slice());
        Self::from_parts(BlockKind::Scalar, m, None, None)
    }

    pub fn functional(x: &FunctionalSample, rep: &Representation) -> Result<Self> {
        Ok(Self::from_design(rep.design(x)?, rep))
    }

    /// Functional block from an already projected `n × dim` design.
    pub fn from_design(m: DMatrix<f64>, rep: &Representation) -> Self {
        Self::from_parts(
            BlockKind::Functional,
            m,
            Some(rep.w2().clone()),
            Some(rep.mass().clone()),
        )
    }

    fn from_parts(
        kind: BlockKind,
        m: DMatrix<f64>,
        w2: Option<DMatrix<f64>>,
        mass: Option<DMatrix<f64>>,
    ) -> Self {
        let gram = m.tr_mul(&m);
        DesignBlock {
            kind,
            m,
            gram,
            w2,
            mass,
        }
    }

    pub fn kind(&self) -> BlockKind {
        self.kind
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    pub fn roughness_matrix(&self) -> Option<&DMatrix<f64>> {
        self.w2.as_ref()
    }

    pub fn dim(&self) -> usize {
        self.m.ncols()
    }

    pub fn n(&self) -> usize {
        self.m.nrows()
    }

    pub fn centered(&self) -> Self {
        let mut m = self.m.clone();
        center_columns(&mut m);
        Self::from_parts(self.kind, m, self.w2.clone(), self.mass.clone())
    }

    /// Diagonal penalty block: `λ₁W₂ + λ₂·mass` for functional members and
    /// a plain ridge `λ₂` for scalar members.
    pub fn penalty(&self, lambda1: f64, lambda2: f64) -> DMatrix<f64> {
        match (&self.w2, &self.mass) {
            (Some(w2), Some(mass)) => w2 * lambda1 + mass * lambda2,
            _ => DMatrix::from_diagonal_element(self.dim(), self.dim(), lambda2),
        }
    }

    /// Ridge metric used to express λ₂ relative to the data scale.
    fn ridge_metric(&self) -> DMatrix<f64> {
        self.penalty(0.0, 1.0)
    }
}

/// Penalized cross-product of a list of blocks. `lambda1[i]` is the
/// roughness weight of block `i` (ignored for scalar blocks).
pub fn crossprod_blocks(blocks: &[&DesignBlock], lambda1: &[f64], lambda2: f64) -> DMatrix<f64> {
    add_penalty(stacked_gram(blocks), blocks, lambda1, lambda2)
}

fn stacked_design(blocks: &[&DesignBlock]) -> DMatrix<f64> {
    if blocks.len() == 1 {
        return blocks[0].m.clone();
    }
    let ms: Vec<&DMatrix<f64>> = blocks.iter().map(|b| &b.m).collect();
    hstack(&ms)
}

fn stacked_gram(blocks: &[&DesignBlock]) -> DMatrix<f64> {
    if blocks.len() == 1 {
        return blocks[0].gram.clone();
    }
    let m = stacked_design(blocks);
    m.tr_mul(&m)
}

fn add_penalty(gram: DMatrix<f64>, blocks: &[&DesignBlock], lambda1: &[f64], lambda2: f64) -> DMatrix<f64> {
    let pens: Vec<DMatrix<f64>> = blocks
        .iter()
        .zip(lambda1)
        .map(|(b, &l1)| b.penalty(l1, lambda2))
        .collect();
    let p = gram + block_diag(&pens);
    (&p + p.transpose()) * 0.5
}

/// A factorized penalized least-squares system `P = MᵀM + Pen`.
#[derive(Clone, Debug)]
pub struct PenalizedSystem {
    m: DMatrix<f64>,
    gram: DMatrix<f64>,
    p: DMatrix<f64>,
    dims: Vec<usize>,
    factor: SpdFactor,
    core: OnceCell<DMatrix<f64>>,
}

impl PenalizedSystem {
    pub fn new(blocks: &[&DesignBlock], lambda1: &[f64], lambda2: f64) -> Result<Self> {
        if blocks.is_empty() {
            return Err(invalid("empty variable group"));
        }
        if lambda1.len() != blocks.len() {
            return Err(invalid("one roughness weight per block is required"));
        }
        let gram = stacked_gram(blocks);
        let p = add_penalty(gram.clone(), blocks, lambda1, lambda2);
        let factor = SpdFactor::new(&p).map_err(|e| match e {
            FlarsError::SingularMatrix(msg) if lambda2 == 0.0 => FlarsError::SingularMatrix(format!(
                "{msg}; the group is collinear, use a positive lambda2"
            )),
            other => other,
        })?;
        Ok(PenalizedSystem {
            m: stacked_design(blocks),
            gram,
            p,
            dims: blocks.iter().map(|b| b.dim()).collect(),
            factor,
            core: OnceCell::new(),
        })
    }

    pub fn crossprod(&self) -> &DMatrix<f64> {
        &self.p
    }

    pub fn design(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn block_dims(&self) -> &[usize] {
        &self.dims
    }

    /// `P⁻¹Mᵀv`.
    pub fn coefficients(&self, v: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(&self.m.tr_mul(v))
    }

    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        self.factor.solve_vec(b)
    }

    /// `H·v = M P⁻¹ Mᵀ v`.
    pub fn smooth(&self, v: &DVector<f64>) -> DVector<f64> {
        &self.m * self.coefficients(v)
    }

    /// `(Mᵀa)ᵀ P⁻¹ (Mᵀb)`, i.e. `aᵀHb`.
    pub fn bilinear(&self, a: &DVector<f64>, b: &DVector<f64>) -> f64 {
        let mb = self.m.tr_mul(b);
        self.m.tr_mul(a).dot(&self.factor.solve_vec(&mb))
    }

    /// `P⁻¹ MᵀM`; its trace is the trace of the smoother.
    pub fn hat_core(&self) -> &DMatrix<f64> {
        self.core.get_or_init(|| self.factor.solve_mat(&self.gram))
    }

    pub fn hat_trace(&self) -> f64 {
        self.hat_core().trace()
    }

    /// Frobenius norm of the smoother, `sqrt(tr((P⁻¹MᵀM)²))`.
    pub fn hat_frobenius(&self) -> f64 {
        let c = self.hat_core();
        trace_of_product(c, c).max(0.0).sqrt()
    }

    pub fn hat_matrix(&self) -> DMatrix<f64> {
        let pm = self.factor.solve_mat(&self.m.transpose());
        &self.m * pm
    }

    /// Splits a stacked coefficient vector into per-block pieces.
    pub fn split(&self, coef: &DVector<f64>) -> Vec<DVector<f64>> {
        let mut out = Vec::with_capacity(self.dims.len());
        let mut off = 0;
        for &d in &self.dims {
            out.push(coef.rows(off, d).into_owned());
            off += d;
        }
        out
    }
}

#[derive(Clone, Debug)]
pub struct CcaResult {
    pub rho: f64,
    pub coef_blocks: Vec<DVector<f64>>,
    pub alpha_scale: f64,
    pub pxx: DMatrix<f64>,
}

/// Canonical correlation of a response with already centered blocks.
pub fn cca_blocks(
    y: &DVector<f64>,
    blocks: &[&DesignBlock],
    lambda1: &[f64],
    lambda2: f64,
) -> Result<CcaResult> {
    let n = y.len();
    if blocks.iter().any(|b| b.n() != n) {
        return Err(invalid("response and group differ in sample count"));
    }
    let yc = y.add_scalar(-y.mean());
    let vy = yc.norm_squared();
    if !(vy > 0.0) {
        return Err(FlarsError::DegenerateResponse(
            "response has zero variance".into(),
        ));
    }
    let sys = PenalizedSystem::new(blocks, lambda1, lambda2)?;
    let v = sys.design().tr_mul(&yc);
    let pv = sys.solve(&v);
    let rho2 = (v.dot(&pv) / vy).clamp(0.0, 1.0);
    let rho = rho2.sqrt();
    let coef = if rho > 0.0 {
        &pv / (rho * vy.sqrt())
    } else {
        pv
    };
    Ok(CcaResult {
        rho,
        coef_blocks: sys.split(&coef),
        alpha_scale: 1.0 / sd(yc.as_slice()),
        pxx: sys.p,
    })
}

#[derive(Clone, Debug)]
pub enum MemberData {
    Scalar(DVector<f64>),
    Functional(FunctionalSample),
}

#[derive(Clone, Debug)]
pub struct GroupMember {
    pub id: String,
    pub data: MemberData,
}

impl GroupMember {
    pub fn scalar(id: impl Into<String>, z: DVector<f64>) -> Self {
        GroupMember {
            id: id.into(),
            data: MemberData::Scalar(z),
        }
    }

    pub fn functional(id: impl Into<String>, x: FunctionalSample) -> Self {
        GroupMember {
            id: id.into(),
            data: MemberData::Functional(x),
        }
    }
}

/// Ordered set of scalar and functional variables sharing one representation.
#[derive(Clone, Debug)]
pub struct VariableGroup {
    members: Vec<GroupMember>,
    rep: Representation,
    n: usize,
}

impl VariableGroup {
    pub fn new(members: Vec<GroupMember>, rep: Representation) -> Result<Self> {
        let first = members.first().ok_or_else(|| invalid("empty variable group"))?;
        let n = member_len(first);
        let mut seen = HashSet::new();
        for m in &members {
            if !seen.insert(m.id.as_str()) {
                return Err(invalid(format!("duplicate member id `{}`", m.id)));
            }
            if member_len(m) != n {
                return Err(invalid(format!(
                    "member `{}` has {} samples, expected {n}",
                    m.id,
                    member_len(m)
                )));
            }
            if let MemberData::Functional(x) = &m.data {
                if x.grid().len() != rep.grid().len() {
                    return Err(invalid(format!(
                        "member `{}` is sampled on {} points, representation uses {}",
                        m.id,
                        x.grid().len(),
                        rep.grid().len()
                    )));
                }
            }
        }
        Ok(VariableGroup { members, rep, n })
    }

    pub fn members(&self) -> &[GroupMember] {
        &self.members
    }

    pub fn rep(&self) -> &Representation {
        &self.rep
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> Result<Vec<DesignBlock>> {
        self.members
            .iter()
            .map(|m| match &m.data {
                MemberData::Scalar(z) => Ok(DesignBlock::scalar(z)),
                MemberData::Functional(x) => DesignBlock::functional(x, &self.rep),
            })
            .collect()
    }

    fn centered_blocks(&self) -> Result<Vec<DesignBlock>> {
        Ok(self.blocks()?.iter().map(DesignBlock::centered).collect())
    }
}

fn member_len(m: &GroupMember) -> usize {
    match &m.data {
        MemberData::Scalar(z) => z.len(),
        MemberData::Functional(x) => x.n_samples(),
    }
}

fn refs(blocks: &[DesignBlock]) -> Vec<&DesignBlock> {
    blocks.iter().collect()
}

/// Block cross-product of the group on its data as given (no centering).
pub fn penalized_crossprod(group: &VariableGroup, pen: PenaltyConfig) -> Result<DMatrix<f64>> {
    let blocks = group.blocks()?;
    let l1 = vec![pen.lambda1; blocks.len()];
    Ok(PenalizedSystem::new(&refs(&blocks), &l1, pen.lambda2)?.p)
}

/// Penalized canonical correlation of `y` with the group; both sides are
/// centered internally.
pub fn cca_scalar_group(
    y: &DVector<f64>,
    group: &VariableGroup,
    pen: PenaltyConfig,
) -> Result<CcaResult> {
    let blocks = group.centered_blocks()?;
    let l1 = vec![pen.lambda1; blocks.len()];
    cca_blocks(y, &refs(&blocks), &l1, pen.lambda2)
}

/// `n·RSS / (n − tr H)²` of the penalized projection of `y`, or `None` when
/// the smoother is saturated or the system cannot be solved.
pub fn gcv_score(y: &DVector<f64>, blocks: &[&DesignBlock], lambda1: &[f64], lambda2: f64) -> Option<f64> {
    let sys = PenalizedSystem::new(blocks, lambda1, lambda2).ok()?;
    gcv_of(y, &sys)
}

fn gcv_of(y: &DVector<f64>, sys: &PenalizedSystem) -> Option<f64> {
    let n = y.len() as f64;
    let resid = y - sys.smooth(y);
    let df = n - sys.hat_trace();
    if !(df > 1e-8 * n) {
        return None;
    }
    let score = n * resid.norm_squared() / (df * df);
    score.is_finite().then_some(score)
}

/// Grid value minimizing GCV of a shared roughness weight, with the fitted
/// system at that value; ties go to the larger λ₁. `y` and blocks must
/// already be centered.
pub fn select_lambda1_system(
    y: &DVector<f64>,
    blocks: &[&DesignBlock],
    grid: &[f64],
    lambda2: f64,
) -> Result<(f64, PenalizedSystem)> {
    check_grid(grid, "lambda1")?;
    let mut order: Vec<f64> = grid.to_vec();
    order.sort_by(|a, b| a.total_cmp(b));
    let mut best: Option<(f64, f64, PenalizedSystem)> = None;
    for &l1 in &order {
        let l1s = vec![l1; blocks.len()];
        let Ok(sys) = PenalizedSystem::new(blocks, &l1s, lambda2) else {
            continue;
        };
        let Some(score) = gcv_of(y, &sys) else {
            continue;
        };
        match &best {
            Some((_, s, _)) if score > s * (1.0 + 1e-10) => {}
            _ => best = Some((l1, score, sys)),
        }
    }
    best.map(|(l1, _, sys)| (l1, sys)).ok_or_else(|| {
        FlarsError::IllPosed("every lambda1 on the grid saturates the smoother".into())
    })
}

pub fn select_lambda1_blocks(
    y: &DVector<f64>,
    blocks: &[&DesignBlock],
    grid: &[f64],
    lambda2: f64,
) -> Result<f64> {
    select_lambda1_system(y, blocks, grid, lambda2).map(|(l1, _)| l1)
}

pub fn select_lambda1_gcv(
    y: &DVector<f64>,
    group: &VariableGroup,
    grid: &[f64],
    lambda2: f64,
) -> Result<f64> {
    let blocks = group.centered_blocks()?;
    let yc = y.add_scalar(-y.mean());
    select_lambda1_blocks(&yc, &refs(&blocks), grid, lambda2)
}

fn check_grid(grid: &[f64], name: &str) -> Result<()> {
    if grid.is_empty() {
        return Err(invalid(format!("{name} grid is empty")));
    }
    if grid.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(invalid(format!("{name} grid values must be finite and >= 0")));
    }
    Ok(())
}

/// Ten log-spaced roughness weights over `[1e-8, 1e2]`, scaled by the ratio
/// of the Gram and roughness matrix norms so the grid follows the data units.
pub fn default_lambda1_grid(blocks: &[&DesignBlock]) -> Vec<f64> {
    let mut g = 0.0;
    let mut w = 0.0;
    for b in blocks {
        if let Some(w2) = &b.w2 {
            g += b.gram.norm_squared();
            w += w2.norm_squared();
        }
    }
    let scale = if w > 0.0 && g > 0.0 { (g / w).sqrt() } else { 1.0 };
    log_grid(1e-8, 1e2, 10).into_iter().map(|v| v * scale).collect()
}

/// `k` log-spaced points from `lo` to `hi` inclusive.
pub fn log_grid(lo: f64, hi: f64, k: usize) -> Vec<f64> {
    if k == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.log10(), hi.log10());
    (0..k)
        .map(|i| 10f64.powf(a + (b - a) * i as f64 / (k - 1) as f64))
        .collect()
}

/// Ratio of the data Gram trace to the ridge metric trace, used to express
/// relative ridge weights in data units.
pub fn lambda2_scale(blocks: &[&DesignBlock]) -> f64 {
    let g: f64 = blocks.iter().map(|b| b.gram.trace()).sum();
    let r: f64 = blocks.iter().map(|b| b.ridge_metric().trace()).sum();
    if g > 0.0 && r > 0.0 {
        g / r
    } else {
        1.0
    }
}

/// Deterministic fold labels `0..folds` for `n` samples.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut labels: Vec<usize> = (0..n).map(|i| i % folds).collect();
    labels.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    labels
}

/// Mean held-out squared error of the penalized least-squares fit for each
/// fold split; `None` when some training fold cannot be solved.
pub fn cv_error(
    y: &DVector<f64>,
    blocks: &[&DesignBlock],
    lambda1: &[f64],
    lambda2: f64,
    labels: &[usize],
    folds: usize,
) -> Option<f64> {
    let n = y.len();
    let mut total = 0.0;
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| labels[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| labels[i] == f).collect();
        if test.is_empty() {
            continue;
        }
        let tr_blocks: Vec<DesignBlock> = blocks
            .iter()
            .map(|b| DesignBlock::from_parts(b.kind, b.m.select_rows(&train), b.w2.clone(), b.mass.clone()))
            .collect();
        let mut means = Vec::new();
        let centered: Vec<DesignBlock> = tr_blocks
            .iter()
            .map(|b| {
                let mut m = b.m.clone();
                means.push(center_columns(&mut m));
                DesignBlock::from_parts(b.kind, m, b.w2.clone(), b.mass.clone())
            })
            .collect();
        let y_tr = DVector::from_iterator(train.len(), train.iter().map(|&i| y[i]));
        let y_mean = y_tr.mean();
        let sys = PenalizedSystem::new(&refs(&centered), lambda1, lambda2).ok()?;
        let coef = sys.coefficients(&y_tr.add_scalar(-y_mean));
        let parts = sys.split(&coef);
        for &i in &test {
            let mut pred = y_mean;
            for ((b, mu), c) in blocks.iter().zip(&means).zip(&parts) {
                for j in 0..b.dim() {
                    pred += (b.m[(i, j)] - mu[j]) * c[j];
                }
            }
            total += (y[i] - pred).powi(2);
        }
    }
    let err = total / n as f64;
    err.is_finite().then_some(err)
}

/// Ridge weight minimizing k-fold held-out error; ties go to the smaller λ₂.
pub fn select_lambda2_blocks(
    y: &DVector<f64>,
    blocks: &[&DesignBlock],
    grid: &[f64],
    folds: usize,
    lambda1: &[f64],
    seed: u64,
) -> Result<f64> {
    check_grid(grid, "lambda2")?;
    if folds < 2 {
        return Err(invalid("at least 2 folds are required"));
    }
    if y.len() < folds {
        return Err(invalid(format!(
            "{} samples cannot be split into {folds} folds",
            y.len()
        )));
    }
    let labels = fold_assignment(y.len(), folds, seed);
    let mut order: Vec<f64> = grid.to_vec();
    order.sort_by(|a, b| a.total_cmp(b));
    let mut best: Option<(f64, f64)> = None;
    for &l2 in &order {
        let Some(err) = cv_error(y, blocks, lambda1, l2, &labels, folds) else {
            continue;
        };
        if best.is_none_or(|(_, e)| err < e * (1.0 - 1e-12)) {
            best = Some((l2, err));
        }
    }
    best.map(|(l2, _)| l2).ok_or_else(|| {
        FlarsError::SingularMatrix(
            "no lambda2 on the grid gives a solvable system; include larger values".into(),
        )
    })
}

pub fn select_lambda2_cv(
    y: &DVector<f64>,
    group: &VariableGroup,
    grid: &[f64],
    folds: usize,
    lambda1: f64,
    seed: u64,
) -> Result<f64> {
    let blocks = group.blocks()?;
    let l1 = vec![lambda1; blocks.len()];
    select_lambda2_blocks(y, &refs(&blocks), grid, folds, &l1, seed)
}

/// Condition number of the unpenalized cross-product (infinite when singular).
pub fn condition_number(blocks: &[&DesignBlock], lambda1: &[f64]) -> f64 {
    let p = crossprod_blocks(blocks, lambda1, 0.0);
    let eig = p.symmetric_eigenvalues();
    let hi = eig.iter().fold(0.0f64, |a, &v| a.max(v.abs()));
    let lo = eig.iter().fold(f64::INFINITY, |a, &v| a.min(v));
    if lo <= 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Ridge weight used when none is configured: zero for well-conditioned
/// blocks, otherwise chosen by 5-fold CV over relative weights
/// `1e-6 … 1e-1` of the data scale.
pub fn auto_lambda2(
    y: &DVector<f64>,
    blocks: &[&DesignBlock],
    lambda1: &[f64],
    seed: u64,
) -> Result<f64> {
    if condition_number(blocks, lambda1) <= ILL_CONDITIONED {
        return Ok(0.0);
    }
    let scale = lambda2_scale(blocks);
    let grid: Vec<f64> = log_grid(1e-6, 1e-1, 6).into_iter().map(|v| v * scale).collect();
    let folds = 5.min(y.len());
    select_lambda2_blocks(y, blocks, &grid, folds, lambda1, seed)
}
