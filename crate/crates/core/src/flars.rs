//! Functional least angle regression.
//!
//! Each iteration projects the current residual onto the active group
//! (penalized canonical correlation), walks along the standardized fitted
//! values `u` and stops when an inactive candidate reaches the same
//! normalized squared correlation with the residual.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::rc::Rc;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{invalid, FlarsError, Result};
use crate::fcca::{
    auto_lambda2, default_lambda1_grid, lambda2_scale, log_grid, select_lambda1_system,
    select_lambda2_blocks, BlockKind, DesignBlock, PenalizedSystem, PenaltyConfig,
    ILL_CONDITIONED,
};
use crate::funcrep::{FunctionalSample, Representation};
use crate::linalg::{correlation, mean, sd, variance};

/// Relative size below which the residual is treated as fully explained.
const EXHAUSTED: f64 = 1e-12;

/// Candidate variables: functional curves sharing one representation and
/// scalar covariates, all with the same number of samples.
#[derive(Clone, Debug)]
pub struct CandidateSet {
    pub functional: Vec<(String, FunctionalSample)>,
    pub scalar: Vec<(String, DVector<f64>)>,
    pub rep: Representation,
}

impl CandidateSet {
    pub fn new(
        functional: Vec<(String, FunctionalSample)>,
        scalar: Vec<(String, DVector<f64>)>,
        rep: Representation,
    ) -> Result<Self> {
        let set = CandidateSet {
            functional,
            scalar,
            rep,
        };
        set.validate()?;
        Ok(set)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = HashSet::new();
        let n = self.n();
        for id in self.ids() {
            if !seen.insert(id) {
                return Err(invalid(format!("duplicate candidate id `{id}`")));
            }
        }
        for (id, x) in &self.functional {
            if x.n_samples() != n {
                return Err(invalid(format!("candidate `{id}` has {} samples, expected {n}", x.n_samples())));
            }
            if x.grid().len() != self.rep.grid().len() {
                return Err(invalid(format!(
                    "candidate `{id}` is sampled on {} points, representation uses {}",
                    x.grid().len(),
                    self.rep.grid().len()
                )));
            }
        }
        for (id, z) in &self.scalar {
            if z.len() != n {
                return Err(invalid(format!("candidate `{id}` has {} samples, expected {n}", z.len())));
            }
            if z.iter().any(|v| !v.is_finite()) {
                return Err(invalid(format!("candidate `{id}` has non-finite values")));
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.functional
            .first()
            .map(|(_, x)| x.n_samples())
            .or_else(|| self.scalar.first().map(|(_, z)| z.len()))
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.functional.len() + self.scalar.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Candidate ids, functional first, in input order.
    pub fn ids(&self) -> Vec<&str> {
        self.functional
            .iter()
            .map(|(id, _)| id.as_str())
            .chain(self.scalar.iter().map(|(id, _)| id.as_str()))
            .collect()
    }

    /// The listed candidates only, keeping the original order.
    pub fn subset(&self, ids: &[String]) -> Result<CandidateSet> {
        let wanted: HashSet<&str> = ids.iter().map(String::as_str).collect();
        let known: HashSet<&str> = self.ids().into_iter().collect();
        if let Some(missing) = ids.iter().find(|id| !known.contains(id.as_str())) {
            return Err(invalid(format!("unknown candidate `{missing}`")));
        }
        Ok(CandidateSet {
            functional: self
                .functional
                .iter()
                .filter(|(id, _)| wanted.contains(id.as_str()))
                .cloned()
                .collect(),
            scalar: self
                .scalar
                .iter()
                .filter(|(id, _)| wanted.contains(id.as_str()))
                .cloned()
                .collect(),
            rep: self.rep.clone(),
        })
    }

    pub fn select_rows(&self, rows: &[usize]) -> CandidateSet {
        CandidateSet {
            functional: self
                .functional
                .iter()
                .map(|(id, x)| (id.clone(), x.select_rows(rows)))
                .collect(),
            scalar: self
                .scalar
                .iter()
                .map(|(id, z)| (id.clone(), DVector::from_iterator(rows.len(), rows.iter().map(|&i| z[i]))))
                .collect(),
            rep: self.rep.clone(),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NormalizationRule {
    /// Frobenius norm of the projection matrix.
    #[default]
    Norm,
    Trace,
    Identity,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum StopRule {
    /// Stop before the first iteration whose CD falls below `frac` of the
    /// largest CD on the path.
    Cd { frac: f64 },
    /// Minimum Mallows' Cp along the path.
    CpMin,
    /// Use the whole computed path.
    MaxIter,
}

impl Default for StopRule {
    fn default() -> Self {
        StopRule::Cd { frac: 0.10 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum StopReason {
    #[serde(rename = "CD_drop")]
    CdDrop,
    #[serde(rename = "Cp_min")]
    CpMin,
    MaxIter,
    #[serde(rename = "ModificationI_terminal")]
    ModificationITerminal,
}

/// A tuning parameter that is either fixed or chosen from the data.
#[derive(Clone, Copy, Debug, PartialEq, Default)]
pub enum Tuning {
    #[default]
    Auto,
    Fixed(f64),
}

impl Serialize for Tuning {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Tuning::Auto => s.serialize_str("auto"),
            Tuning::Fixed(v) => s.serialize_f64(*v),
        }
    }
}

impl<'de> Deserialize<'de> for Tuning {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(v) if v.is_finite() && v >= 0.0 => Ok(Tuning::Fixed(v)),
            Raw::Num(v) => Err(serde::de::Error::custom(format!("penalty must be finite and >= 0, got {v}"))),
            Raw::Text(t) if t == "auto" => Ok(Tuning::Auto),
            Raw::Text(t) => Err(serde::de::Error::custom(format!("expected a number or \"auto\", got \"{t}\""))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FlarsOptions {
    pub lambda1: Tuning,
    pub lambda1_grid: Option<Vec<f64>>,
    pub lambda2: Tuning,
    pub lambda2_grid: Option<Vec<f64>>,
    pub norm: NormalizationRule,
    /// Variance threshold for dropping variables; `None` disables dropping.
    pub kappa: Option<f64>,
    pub stop: StopRule,
    /// Defaults to the number of candidates plus one.
    pub max_iter: Option<usize>,
    /// Seed for the fold assignment of the ridge-weight search.
    pub seed: u64,
}

impl Default for FlarsOptions {
    fn default() -> Self {
        FlarsOptions {
            lambda1: Tuning::Auto,
            lambda1_grid: None,
            lambda2: Tuning::Auto,
            lambda2_grid: None,
            norm: NormalizationRule::Norm,
            kappa: None,
            stop: StopRule::default(),
            max_iter: None,
            seed: 0,
        }
    }
}

impl FlarsOptions {
    /// No roughness or ridge penalty.
    pub fn unpenalized() -> Self {
        FlarsOptions {
            lambda1: Tuning::Fixed(0.0),
            lambda2: Tuning::Fixed(0.0),
            ..Default::default()
        }
    }

    fn validate(&self) -> Result<()> {
        if let Some(k) = self.kappa {
            if !(k > 0.0 && k < 1.0) {
                return Err(invalid(format!("kappa must lie in (0, 1), got {k}")));
            }
        }
        if let StopRule::Cd { frac } = self.stop {
            if !(frac > 0.0 && frac < 1.0) {
                return Err(invalid(format!("CD threshold fraction must lie in (0, 1), got {frac}")));
            }
        }
        for t in [self.lambda1, self.lambda2] {
            if let Tuning::Fixed(v) = t {
                PenaltyConfig::new(v, 0.0)?;
            }
        }
        if self.max_iter == Some(0) {
            return Err(invalid("max_iter must be at least 1"));
        }
        Ok(())
    }
}

/// Smallest positive root of `aα² − 2bα + c = 0`; a leading coefficient
/// within `1e-12` of zero (relative to `scale`) falls back to the linear
/// equation.
pub fn smallest_positive_root(a: f64, b: f64, c: f64, scale: f64) -> Option<f64> {
    if a.abs() <= 1e-12 * scale.max(f64::MIN_POSITIVE) {
        if b == 0.0 {
            return None;
        }
        let x = c / (2.0 * b);
        return (x > 0.0 && x.is_finite()).then_some(x);
    }
    let mut disc = b * b - a * c;
    // a double root can come out slightly negative after rounding
    if disc < 0.0 && disc > -1e-10 * b * b {
        disc = 0.0;
    }
    if disc < 0.0 || !disc.is_finite() {
        return None;
    }
    let sq = disc.sqrt();
    // numerically stable pair of roots
    let qv = b + b.signum() * sq;
    let mut roots = Vec::with_capacity(2);
    if qv != 0.0 {
        roots.push(qv / a);
        roots.push(c / qv);
    } else {
        roots.push(0.0);
    }
    roots
        .into_iter()
        .filter(|x| *x > 0.0 && x.is_finite())
        .min_by(|x, y| x.total_cmp(y))
}

/// Coefficients `(a, b, c)` of the step equation for a candidate whose
/// projection satisfies `vᵀS w = proj(v, w)`.
fn step_quadratic(
    r: &DVector<f64>,
    u: &DVector<f64>,
    s_rr: f64,
    s_ru: f64,
    s_uu: f64,
    n_f: f64,
) -> (f64, f64, f64) {
    let uu = u.norm_squared();
    let ru = r.dot(u);
    let a = s_uu / n_f - uu;
    let b = s_ru / n_f - ru;
    let c = s_rr / n_f - ru * ru / uu;
    (a, b, c)
}

fn normalizer(norm: NormalizationRule, sys: &PenalizedSystem) -> f64 {
    match norm {
        NormalizationRule::Norm => sys.hat_frobenius(),
        NormalizationRule::Trace => sys.hat_trace(),
        NormalizationRule::Identity => 1.0,
    }
}

fn functional_step(r: &DVector<f64>, u: &DVector<f64>, sys: &PenalizedSystem, norm: NormalizationRule) -> Option<f64> {
    let n_f = normalizer(norm, sys);
    if !(n_f > 0.0) {
        return None;
    }
    let mr = sys.design().tr_mul(r);
    let mu = sys.design().tr_mul(u);
    let pr = sys.solve(&mr);
    let pu = sys.solve(&mu);
    let (a, b, c) = step_quadratic(r, u, mr.dot(&pr), mu.dot(&pr), mu.dot(&pu), n_f);
    smallest_positive_root(a, b, c, u.norm_squared())
}

fn scalar_step(r: &DVector<f64>, u: &DVector<f64>, z: &DVector<f64>) -> Option<f64> {
    let zz = z.norm_squared();
    if !(zz > 0.0) {
        return None;
    }
    let (zr, zu) = (z.dot(r), z.dot(u));
    // rank-one projection: Frobenius norm and trace are both 1
    let (a, b, c) = step_quadratic(r, u, zr * zr / zz, zr * zu / zz, zu * zu / zz, 1.0);
    smallest_positive_root(a, b, c, u.norm_squared())
}

/// Step distance at which the functional candidate `x` ties with the
/// direction `u`, or `None` when the step equation has no positive root.
pub fn step_distance_functional(
    r: &DVector<f64>,
    u: &DVector<f64>,
    x: &FunctionalSample,
    rep: &Representation,
    pen: PenaltyConfig,
    norm: NormalizationRule,
) -> Result<Option<f64>> {
    let block = DesignBlock::functional(x, rep)?.centered();
    let sys = PenalizedSystem::new(&[&block], &[pen.lambda1], pen.lambda2)?;
    Ok(functional_step(r, u, &sys, norm))
}

/// Scalar counterpart of [`step_distance_functional`]. The projection onto
/// a single column has unit norm and trace, so every rule normalizes by 1.
pub fn step_distance_scalar(
    r: &DVector<f64>,
    u: &DVector<f64>,
    z: &DVector<f64>,
    _norm: NormalizationRule,
) -> Option<f64> {
    let zc = z.add_scalar(-z.mean());
    scalar_step(r, u, &zc)
}

/// Stop index (1-based) for a CD trace: the iteration before the first
/// one whose CD falls below `frac` times the largest CD. Missing entries
/// are ignored; without a drop the last index is returned.
pub fn stopping_cd(cd: &[Option<f64>], frac: f64) -> usize {
    let max = cd.iter().flatten().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    if !max.is_finite() {
        return cd.len();
    }
    let threshold = frac * max;
    cd.iter()
        .position(|v| v.is_some_and(|v| v < threshold))
        .unwrap_or(cd.len())
}

/// `RSS/σ² − n + 2·df`.
pub fn mallows_cp(rss: f64, df: f64, n: usize, sigma2: f64) -> Result<f64> {
    if !(sigma2 > 0.0) || !sigma2.is_finite() {
        return Err(invalid(format!("sigma2 must be positive, got {sigma2}")));
    }
    Ok(rss / sigma2 - n as f64 + 2.0 * df)
}

/// `tr(I − Π)` for the running product `Π = ∏(I − H*_k)`.
pub fn hat_trace_df(hat_product: &DMatrix<f64>) -> f64 {
    hat_product.nrows() as f64 - hat_product.trace()
}

/// One path iteration as reported in the trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    /// Variable that joined the direction at this iteration.
    pub selected_id: String,
    pub alpha: f64,
    pub rho_star: Option<f64>,
    pub cd: Option<f64>,
    pub df_star: f64,
    pub cp: Option<f64>,
    pub rss: f64,
    #[serde(skip)]
    pub modification_one: bool,
    #[serde(skip)]
    pub dropped: Vec<String>,
}

pub fn write_trace_csv<W: Write>(records: &[IterationRecord], w: W) -> Result<()> {
    let mut wr = csv::Writer::from_writer(w);
    for r in records {
        wr.serialize(r)?;
    }
    if records.is_empty() {
        wr.write_record(["iteration", "selected_id", "alpha", "rho_star", "cd", "df_star", "cp", "rss"])?;
    }
    wr.flush()?;
    Ok(())
}

pub fn read_trace_csv<R: Read>(r: R) -> Result<Vec<IterationRecord>> {
    let mut rd = csv::Reader::from_reader(r);
    let mut out = Vec::new();
    for row in rd.deserialize() {
        out.push(row?);
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StoppingDiagnostics {
    pub df_star: f64,
    pub cp: Option<f64>,
    pub cd_trace: Vec<Option<f64>>,
    pub stop_index: usize,
    pub stop_rule: StopReason,
    pub sigma2: Option<f64>,
}

#[derive(Clone, Debug)]
enum Center {
    Functional(DVector<f64>),
    Scalar(f64),
}

/// A candidate after centering and scaling, with its projected design.
#[derive(Clone, Debug)]
struct Prepared {
    id: String,
    block: DesignBlock,
    center: Center,
    scale: f64,
    /// Zero variance: never selectable.
    flat: bool,
}

impl Prepared {
    fn is_functional(&self) -> bool {
        self.block.kind() == BlockKind::Functional
    }
}

fn prepare(cands: &CandidateSet) -> Vec<Prepared> {
    let mut out = Vec::with_capacity(cands.len());
    for (id, x) in &cands.functional {
        let mut xc = x.values().clone();
        let means = crate::linalg::center_columns(&mut xc);
        let (n, q) = xc.shape();
        let pooled = if n > 1 {
            (xc.norm_squared() / ((n - 1) * q) as f64).sqrt()
        } else {
            0.0
        };
        let flat = !(pooled > 0.0);
        let scale = if flat { 1.0 } else { pooled };
        let m = (xc / scale) * cands.rep.w();
        let flat = flat || m.norm() == 0.0;
        out.push(Prepared {
            id: id.clone(),
            block: DesignBlock::from_design(m, &cands.rep),
            center: Center::Functional(DVector::from_vec(means)),
            scale,
            flat,
        });
    }
    for (id, z) in &cands.scalar {
        let mu = z.mean();
        let s = sd(z.as_slice());
        let flat = !(s > 0.0);
        let scale = if flat { 1.0 } else { s };
        out.push(Prepared {
            id: id.clone(),
            block: DesignBlock::scalar(&(z.add_scalar(-mu) / scale)),
            center: Center::Scalar(mu),
            scale,
            flat,
        });
    }
    out
}

/// A fitted single-candidate system at its chosen roughness weight.
#[derive(Clone, Debug)]
struct CandidateFit {
    lambda1: f64,
    sys: Rc<PenalizedSystem>,
}

/// Running state of the path.
#[derive(Clone, Debug)]
pub struct SelectionState {
    pub iteration: usize,
    pub residual: DVector<f64>,
    pub directions: Vec<DVector<f64>>,
    pub distances: Vec<f64>,
    pub corr_history: Vec<Option<f64>>,
    pub cd_history: Vec<Option<f64>>,
    pub hat_product: DMatrix<f64>,
    pub records: Vec<IterationRecord>,
    pub terminal: bool,
    ids: Vec<String>,
    active: Vec<usize>,
    inactive: Vec<usize>,
    dropped: Vec<usize>,
    pending: Option<usize>,
    coef: Vec<DVector<f64>>,
    var_max: Vec<f64>,
    increments: Vec<Vec<(usize, DVector<f64>)>>,
    drops: Vec<Vec<usize>>,
}

impl SelectionState {
    fn names(&self, idx: &[usize]) -> Vec<String> {
        idx.iter().map(|&i| self.ids[i].clone()).collect()
    }

    pub fn active(&self) -> Vec<String> {
        self.names(&self.active)
    }

    pub fn inactive(&self) -> Vec<String> {
        self.names(&self.inactive)
    }

    pub fn dropped(&self) -> Vec<String> {
        self.names(&self.dropped)
    }

    /// Accumulated coefficients in standardized units for every variable
    /// that has entered, in entry order.
    pub fn coef_accum(&self) -> Vec<(String, DVector<f64>)> {
        let mut order: Vec<usize> = self.active.clone();
        order.extend(&self.dropped);
        order
            .into_iter()
            .filter(|&i| self.coef[i].iter().any(|v| *v != 0.0) || self.active.contains(&i))
            .map(|i| (self.ids[i].clone(), self.coef[i].clone()))
            .collect()
    }

    pub fn degrees_of_freedom(&self) -> f64 {
        hat_trace_df(&self.hat_product)
    }
}

/// Scalar-on-function regression coefficients in the units of the raw
/// inputs: `ŷ = intercept + Σ xⱼ·W·coefⱼ + Σ zₘ·γₘ`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FittedModel {
    pub intercept: f64,
    pub functional: Vec<FunctionalTerm>,
    pub scalar: Vec<ScalarTerm>,
    pub representation: Representation,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionalTerm {
    pub id: String,
    pub coef: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalarTerm {
    pub id: String,
    pub gamma: f64,
}

impl FittedModel {
    pub fn selected_ids(&self) -> Vec<String> {
        self.functional
            .iter()
            .map(|t| t.id.clone())
            .chain(self.scalar.iter().map(|t| t.id.clone()))
            .collect()
    }

    pub fn predict(&self, cands: &CandidateSet) -> Result<DVector<f64>> {
        let n = cands.n();
        let mut out = DVector::from_element(n, self.intercept);
        for t in &self.functional {
            let (_, x) = cands
                .functional
                .iter()
                .find(|(id, _)| *id == t.id)
                .ok_or_else(|| invalid(format!("functional variable `{}` missing from prediction data", t.id)))?;
            let c = DVector::from_column_slice(&t.coef);
            out += crate::funcrep::project(x, &self.representation, &c)?;
        }
        for t in &self.scalar {
            let (_, z) = cands
                .scalar
                .iter()
                .find(|(id, _)| *id == t.id)
                .ok_or_else(|| invalid(format!("scalar variable `{}` missing from prediction data", t.id)))?;
            out.axpy(t.gamma, z, 1.0);
        }
        Ok(out)
    }

    /// `(t, β(t))` for a selected functional variable.
    pub fn beta_curve(&self, id: &str) -> Option<(Vec<f64>, Vec<f64>)> {
        let t = self.functional.iter().find(|t| t.id == id)?;
        self.representation
            .coefficient_curve(&DVector::from_column_slice(&t.coef))
            .ok()
    }
}

/// The path engine over a prepared candidate set.
pub struct Flars {
    prepared: Vec<Prepared>,
    opts: FlarsOptions,
    rep: Representation,
    lambda2: f64,
    y_mean: f64,
    yc: DVector<f64>,
    var_y: f64,
    fixed_fits: Option<Vec<Option<CandidateFit>>>,
}

impl Flars {
    pub fn new(y: &DVector<f64>, cands: &CandidateSet, opts: &FlarsOptions) -> Result<Self> {
        opts.validate()?;
        if cands.is_empty() {
            return Err(invalid("no candidate variables"));
        }
        cands.validate()?;
        if y.len() != cands.n() {
            return Err(invalid(format!(
                "response has {} samples, candidates have {}",
                y.len(),
                cands.n()
            )));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(invalid("response has non-finite values"));
        }
        let y_mean = mean(y.as_slice());
        let yc = y.add_scalar(-y_mean);
        let var_y = variance(yc.as_slice());
        if !(var_y > 0.0) {
            return Err(FlarsError::DegenerateResponse("response has zero variance".into()));
        }
        let prepared = prepare(cands);
        let mut engine = Flars {
            prepared,
            opts: opts.clone(),
            rep: cands.rep.clone(),
            lambda2: 0.0,
            y_mean,
            yc,
            var_y,
            fixed_fits: None,
        };
        engine.lambda2 = engine.resolve_lambda2()?;
        if let Tuning::Fixed(l1) = opts.lambda1 {
            let fits = engine
                .prepared
                .iter()
                .map(|p| {
                    if p.flat || !p.is_functional() {
                        return Ok(None);
                    }
                    let sys = PenalizedSystem::new(&[&p.block], &[l1], engine.lambda2)?;
                    Ok(Some(CandidateFit {
                        lambda1: l1,
                        sys: Rc::new(sys),
                    }))
                })
                .collect::<Result<Vec<_>>>()?;
            engine.fixed_fits = Some(fits);
        }
        Ok(engine)
    }

    pub fn lambda2(&self) -> f64 {
        self.lambda2
    }

    pub fn n(&self) -> usize {
        self.yc.len()
    }

    fn lambda1_grid(&self, block: &DesignBlock) -> Vec<f64> {
        match &self.opts.lambda1_grid {
            Some(g) => g.clone(),
            None => default_lambda1_grid(&[block]),
        }
    }

    /// Ridge weight for the whole run: fixed, or resolved once from the
    /// worst-conditioned functional candidate.
    fn resolve_lambda2(&self) -> Result<f64> {
        if let Tuning::Fixed(v) = self.opts.lambda2 {
            return Ok(v);
        }
        let mut worst: Option<(f64, usize, f64)> = None;
        for (i, p) in self.prepared.iter().enumerate() {
            if p.flat || !p.is_functional() {
                continue;
            }
            let l1 = match self.opts.lambda1 {
                Tuning::Fixed(v) => v,
                Tuning::Auto => {
                    let g = self.lambda1_grid(&p.block);
                    let (lo, hi) = g.iter().fold((f64::INFINITY, 0.0f64), |(a, b), &v| (a.min(v), b.max(v)));
                    if lo > 0.0 {
                        (lo * hi).sqrt()
                    } else {
                        0.5 * hi
                    }
                }
            };
            let cond = crate::fcca::condition_number(&[&p.block], &[l1]);
            if worst.is_none_or(|(c, _, _)| cond > c) {
                worst = Some((cond, i, l1));
            }
        }
        let Some((cond, i, l1)) = worst else {
            return Ok(0.0);
        };
        if cond <= ILL_CONDITIONED {
            return Ok(0.0);
        }
        let block = &self.prepared[i].block;
        match &self.opts.lambda2_grid {
            Some(grid) => {
                let folds = 5.min(self.n());
                select_lambda2_blocks(&self.yc, &[block], grid, folds, &[l1], self.opts.seed)
            }
            None => auto_lambda2(&self.yc, &[block], &[l1], self.opts.seed),
        }
    }

    /// Single-candidate systems for every functional variable that can
    /// still take part, at roughness weights chosen against `r`.
    fn candidate_fits(&self, r: &DVector<f64>, which: &[usize]) -> Result<Vec<Option<CandidateFit>>> {
        if let Some(f) = &self.fixed_fits {
            return Ok(f.clone());
        }
        let mut out = vec![None; self.prepared.len()];
        for &i in which {
            let p = &self.prepared[i];
            if p.flat || !p.is_functional() {
                continue;
            }
            let grid = self.lambda1_grid(&p.block);
            let (l1, sys) = select_lambda1_system(r, &[&p.block], &grid, self.lambda2)?;
            out[i] = Some(CandidateFit {
                lambda1: l1,
                sys: Rc::new(sys),
            });
        }
        Ok(out)
    }

    /// Canonical correlation of one candidate with `r`.
    fn candidate_rho(&self, i: usize, r: &DVector<f64>, fits: &[Option<CandidateFit>]) -> f64 {
        let p = &self.prepared[i];
        if p.flat {
            return 0.0;
        }
        let rr = r.norm_squared();
        if !(rr > 0.0) {
            return 0.0;
        }
        match &fits[i] {
            Some(f) => (f.sys.bilinear(r, r) / rr).clamp(0.0, 1.0).sqrt(),
            None => correlation(p.block.design().as_slice(), r.as_slice()).abs(),
        }
    }

    fn most_correlated(&self, r: &DVector<f64>, pool: &[usize]) -> Result<Option<usize>> {
        let fits = self.candidate_fits(r, pool)?;
        let mut best: Option<(usize, f64)> = None;
        for &i in pool {
            let rho = self.candidate_rho(i, r, &fits);
            if rho > 1e-12 && best.is_none_or(|(_, b)| rho > b) {
                best = Some((i, rho));
            }
        }
        Ok(best.map(|(i, _)| i))
    }

    /// Picks the first variable: largest canonical correlation with `y`.
    pub fn first_selection(&self) -> Result<SelectionState> {
        let pool: Vec<usize> = (0..self.prepared.len()).filter(|&i| !self.prepared[i].flat).collect();
        let first = self.most_correlated(&self.yc, &pool)?.ok_or(FlarsError::NoSignal)?;
        let n = self.n();
        Ok(SelectionState {
            iteration: 0,
            residual: self.yc.clone(),
            directions: Vec::new(),
            distances: Vec::new(),
            corr_history: Vec::new(),
            cd_history: Vec::new(),
            hat_product: DMatrix::identity(n, n),
            records: Vec::new(),
            terminal: false,
            ids: self.prepared.iter().map(|p| p.id.clone()).collect(),
            active: vec![first],
            inactive: pool.into_iter().filter(|&i| i != first).collect(),
            dropped: Vec::new(),
            pending: Some(first),
            coef: self.prepared.iter().map(|p| DVector::zeros(p.block.dim())).collect(),
            var_max: vec![0.0; self.prepared.len()],
            increments: Vec::new(),
            drops: Vec::new(),
        })
    }

    fn group_system(&self, active: &[usize], fits: &[Option<CandidateFit>]) -> Result<PenalizedSystem> {
        let blocks: Vec<&DesignBlock> = active.iter().map(|&i| &self.prepared[i].block).collect();
        let l1: Vec<f64> = active
            .iter()
            .map(|&i| fits[i].as_ref().map(|f| f.lambda1).unwrap_or(0.0))
            .collect();
        PenalizedSystem::new(&blocks, &l1, self.lambda2)
    }

    /// Direction of the active group against the current residual: the
    /// standardized penalized fitted values `u`, the raw fitted values'
    /// SD, and the stacked coefficients `P⁻¹Mᵀr`.
    fn direction_parts(
        &self,
        state: &SelectionState,
        fits: &[Option<CandidateFit>],
    ) -> Result<Option<(PenalizedSystem, DVector<f64>, f64, DVector<f64>)>> {
        let sys = self.group_system(&state.active, fits)?;
        let s = sys.coefficients(&state.residual);
        let p = sys.design() * &s;
        let sd_p = sd(p.as_slice());
        if !(sd_p > EXHAUSTED * sd(self.yc.as_slice())) {
            return Ok(None);
        }
        let mut u = &p / sd_p;
        let mut s = s;
        let mut sd_p = sd_p;
        if u.dot(&state.residual) < 0.0 {
            u = -u;
            s = -s;
            sd_p = -sd_p;
        }
        Ok(Some((sys, u, sd_p, s)))
    }

    /// Direction `u` and the per-active-variable coefficient vectors of the
    /// group projection of the residual.
    pub fn direction(&self, state: &SelectionState) -> Result<Option<(DVector<f64>, Vec<(String, DVector<f64>)>)>> {
        let fits = self.candidate_fits(&state.residual, &state.active)?;
        Ok(self.direction_parts(state, &fits)?.map(|(sys, u, _, s)| {
            let parts = sys.split(&s);
            let named = state
                .active
                .iter()
                .zip(parts)
                .map(|(&i, c)| (state.ids[i].clone(), c))
                .collect();
            (u, named)
        }))
    }

    fn step_distance(&self, i: usize, r: &DVector<f64>, u: &DVector<f64>, fits: &[Option<CandidateFit>]) -> Option<f64> {
        let p = &self.prepared[i];
        match &fits[i] {
            Some(f) => functional_step(r, u, &f.sys, self.opts.norm),
            None => scalar_step(r, u, &DVector::from_column_slice(p.block.design().as_slice())),
        }
    }

    /// One path iteration. Returns `false` once the path is finished.
    pub fn iterate(&self, state: &mut SelectionState) -> Result<bool> {
        if state.terminal {
            return Ok(false);
        }
        let Some(entering) = state.pending.take() else {
            state.terminal = true;
            return Ok(false);
        };
        let mut pool = state.active.clone();
        pool.extend(&state.inactive);
        let fits = self.candidate_fits(&state.residual, &pool)?;
        let Some((sys, u, sd_p, s)) = self.direction_parts(state, &fits)? else {
            state.terminal = true;
            return Ok(false);
        };
        let r = state.residual.clone();
        let alpha_ols = u.dot(&r) / u.norm_squared();
        let mut best: Option<(usize, f64)> = None;
        for &j in &state.inactive {
            if let Some(a) = self.step_distance(j, &r, &u, &fits) {
                if a <= alpha_ols * (1.0 + 1e-12) && best.is_none_or(|(_, b)| a < b) {
                    best = Some((j, a));
                }
            }
        }
        let (alpha, mut next, modification_one) = match best {
            Some((j, a)) => (a, Some(j), false),
            None => (alpha_ols, None, true),
        };
        self.apply_step(state, entering, &sys, &u, sd_p, &s, alpha, modification_one);
        if modification_one {
            next = self.modification_one(state)?;
        }
        match next {
            Some(j) => {
                state.inactive.retain(|&i| i != j);
                state.active.push(j);
                state.pending = Some(j);
            }
            None => state.terminal = true,
        }
        Ok(!state.terminal)
    }

    #[allow(clippy::too_many_arguments)]
    fn apply_step(
        &self,
        state: &mut SelectionState,
        entering: usize,
        sys: &PenalizedSystem,
        u: &DVector<f64>,
        sd_p: f64,
        s: &DVector<f64>,
        alpha: f64,
        modification_one: bool,
    ) {
        let k = state.iteration + 1;
        let factor = alpha / sd_p;
        let mut incs = Vec::with_capacity(state.active.len());
        for (&i, part) in state.active.iter().zip(sys.split(s)) {
            let inc = part * factor;
            state.coef[i] += &inc;
            incs.push((i, inc));
        }
        state.increments.push(incs);
        state.residual.axpy(-alpha, u, 1.0);
        // Π ← (I − (α/sd)·H)Π with H = M P⁻¹ Mᵀ
        let mt_pi = sys.design().tr_mul(&state.hat_product);
        let update = sys.design() * crate::linalg::SpdFactor::new(sys.crossprod())
            .map(|f| f.solve_mat(&mt_pi))
            .unwrap_or_else(|_| DMatrix::zeros(mt_pi.nrows(), mt_pi.ncols()));
        state.hat_product -= update * factor;
        let rho = (k > 1).then(|| correlation(u.as_slice(), state.residual.as_slice()).abs());
        let cd = rho.map(|c| c * alpha);
        state.iteration = k;
        state.directions.push(u.clone());
        state.distances.push(alpha);
        state.corr_history.push(rho);
        state.cd_history.push(cd);
        let dropped = match self.opts.kappa {
            Some(kappa) => self.modification_two(state, kappa),
            None => Vec::new(),
        };
        state.drops.push(dropped.clone());
        state.records.push(IterationRecord {
            iteration: k,
            selected_id: state.ids[entering].clone(),
            alpha,
            rho_star: rho,
            cd,
            df_star: state.degrees_of_freedom(),
            cp: None,
            rss: state.residual.norm_squared(),
            modification_one,
            dropped: dropped.iter().map(|&i| state.ids[i].clone()).collect(),
        });
    }

    /// After a full least-squares step: continue with the inactive
    /// candidate most correlated with the new residual, if any.
    fn modification_one(&self, state: &SelectionState) -> Result<Option<usize>> {
        if state.inactive.is_empty() {
            return Ok(None);
        }
        let scale = self.yc.norm();
        if state.residual.norm() <= EXHAUSTED * scale {
            return Ok(None);
        }
        self.most_correlated(&state.residual, &state.inactive)
    }

    /// Drops active variables whose projection variance has fallen below
    /// both their own past maximum and `kappa·Var(y)`. The dropped
    /// contribution is returned to the residual and the variable cannot
    /// re-enter.
    fn modification_two(&self, state: &mut SelectionState, kappa: f64) -> Vec<usize> {
        let mut dropped = Vec::new();
        for &i in &state.active.clone() {
            let fitted = self.prepared[i].block.design() * &state.coef[i];
            let v = variance(fitted.as_slice());
            let past = state.var_max[i];
            if v < past && v < kappa * self.var_y {
                state.residual += fitted;
                state.coef[i].fill(0.0);
                state.active.retain(|&a| a != i);
                state.dropped.push(i);
                dropped.push(i);
            } else {
                state.var_max[i] = past.max(v);
            }
        }
        dropped
    }

    /// Fills in the Cp column and picks the stop index.
    pub fn diagnostics(&self, state: &mut SelectionState) -> StoppingDiagnostics {
        let n = self.n();
        let sigma2 = state.records.last().and_then(|last| {
            let dof = n as f64 - last.df_star;
            let s2 = last.rss / dof;
            (dof > 0.0 && s2 > 0.0 && s2.is_finite()).then_some(s2)
        });
        for rec in &mut state.records {
            rec.cp = sigma2.and_then(|s2| mallows_cp(rec.rss, rec.df_star, n, s2).ok());
        }
        let len = state.records.len();
        let ended_by_ols = state.records.last().is_some_and(|r| r.modification_one) && state.terminal;
        let (stop_index, stop_rule) = match self.opts.stop {
            StopRule::Cd { frac } => {
                let k = stopping_cd(&state.cd_history, frac);
                if k < len {
                    (k, StopReason::CdDrop)
                } else if ended_by_ols {
                    (k, StopReason::ModificationITerminal)
                } else {
                    (k, StopReason::MaxIter)
                }
            }
            StopRule::CpMin => {
                let best = state
                    .records
                    .iter()
                    .filter_map(|r| r.cp.map(|c| (r.iteration, c)))
                    .min_by(|a, b| a.1.total_cmp(&b.1));
                match best {
                    Some((k, _)) => (k, StopReason::CpMin),
                    None => (len, StopReason::MaxIter),
                }
            }
            StopRule::MaxIter => (
                len,
                if ended_by_ols {
                    StopReason::ModificationITerminal
                } else {
                    StopReason::MaxIter
                },
            ),
        };
        let at = stop_index.checked_sub(1).map(|i| &state.records[i]);
        StoppingDiagnostics {
            df_star: at.map(|r| r.df_star).unwrap_or(0.0),
            cp: at.and_then(|r| r.cp),
            cd_trace: state.cd_history.clone(),
            stop_index,
            stop_rule,
            sigma2,
        }
    }

    /// Model made of the first `k` iterations, in raw data units.
    pub fn model_at(&self, state: &SelectionState, k: usize) -> FittedModel {
        let k = k.min(state.increments.len());
        let mut coef: Vec<Option<DVector<f64>>> = vec![None; self.prepared.len()];
        for (incs, drops) in state.increments[..k].iter().zip(&state.drops[..k]) {
            for (i, inc) in incs {
                match &mut coef[*i] {
                    Some(c) => *c += inc,
                    slot => *slot = Some(inc.clone()),
                }
            }
            for &i in drops {
                coef[i] = None;
            }
        }
        let mut intercept = self.y_mean;
        let mut functional = Vec::new();
        let mut scalar = Vec::new();
        for (p, c) in self.prepared.iter().zip(coef) {
            let Some(c) = c else { continue };
            let raw = c / p.scale;
            match &p.center {
                Center::Functional(means) => {
                    intercept -= means.dot(&(self.rep.w() * &raw));
                    functional.push(FunctionalTerm {
                        id: p.id.clone(),
                        coef: raw.iter().copied().collect(),
                    });
                }
                Center::Scalar(mu) => {
                    intercept -= mu * raw[0];
                    scalar.push(ScalarTerm {
                        id: p.id.clone(),
                        gamma: raw[0],
                    });
                }
            }
        }
        FittedModel {
            intercept,
            functional,
            scalar,
            representation: self.rep.clone(),
        }
    }

    fn max_iter(&self) -> usize {
        let usable = self.prepared.iter().filter(|p| !p.flat).count();
        let cap = usable + 1;
        self.opts.max_iter.map(|m| m.min(cap)).unwrap_or(cap)
    }

    pub fn run(&self) -> Result<(SelectionState, StoppingDiagnostics, FittedModel)> {
        let mut state = self.first_selection()?;
        let max_iter = self.max_iter();
        while state.iteration < max_iter && self.iterate(&mut state)? {}
        let diag = self.diagnostics(&mut state);
        let model = self.model_at(&state, diag.stop_index);
        Ok((state, diag, model))
    }
}

/// Runs the full path and returns the state, the stopping diagnostics and
/// the model at the stop index.
pub fn run_flars(
    y: &DVector<f64>,
    cands: &CandidateSet,
    opts: &FlarsOptions,
) -> Result<(SelectionState, StoppingDiagnostics, FittedModel)> {
    Flars::new(y, cands, opts)?.run()
}

/// Relative ridge grid `{1e-6, …, 1e-1}` in the units of a candidate set,
/// handy for configuring explicit λ₂ searches.
pub fn relative_lambda2_grid(cands: &CandidateSet) -> Vec<f64> {
    let prepared = prepare(cands);
    let blocks: Vec<&DesignBlock> = prepared.iter().filter(|p| !p.flat).map(|p| &p.block).collect();
    let scale = if blocks.is_empty() { 1.0 } else { lambda2_scale(&blocks) };
    log_grid(1e-6, 1e-1, 6).into_iter().map(|v| v * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::funcrep::{RepresentationConfig, TimeGrid};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn normal_vec(r: &mut ChaCha8Rng, n: usize) -> DVector<f64> {
        DVector::from_iterator(n, (0..n).map(|_| r.sample::<f64, _>(StandardNormal)))
    }

    fn rep() -> Representation {
        Representation::build(&RepresentationConfig::gq(8), &TimeGrid::linspace(0.0, 1.0, 30).unwrap()).unwrap()
    }

    fn scalars(zs: &[DVector<f64>]) -> CandidateSet {
        CandidateSet::new(
            vec![],
            zs.iter().enumerate().map(|(i, z)| (format!("z{}", i + 1), z.clone())).collect(),
            rep(),
        )
        .unwrap()
    }

    fn standardized(z: &DVector<f64>) -> DVector<f64> {
        let c = z.add_scalar(-z.mean());
        let s = sd(c.as_slice());
        c / s
    }

    #[test]
    fn cd_stop_examples() {
        let cd: Vec<Option<f64>> = [0.5, 0.4, 0.45, 0.3, 0.35, 0.32, 0.01, 0.005].iter().map(|v| Some(*v)).collect();
        assert_eq!(stopping_cd(&cd, 0.10), 6);
        let mono: Vec<Option<f64>> = (1..=5).map(|v| Some(v as f64)).collect();
        assert_eq!(stopping_cd(&mono, 0.10), 5);
        let mut acute = vec![None];
        acute.extend([4.1, 3.2, 5.3, 2.9, 3.6, 2.4, 1.9, 2.2].iter().map(|v| Some(v * 1e-3)));
        acute.extend([0.4e-3, 0.69e-3].iter().map(|v| Some(*v)));
        assert_eq!(stopping_cd(&acute, 0.10), 9);
    }

    #[test]
    fn cp_formula() {
        assert_abs_diff_eq!(mallows_cp(0.0, 4.0, 30, 0.5).unwrap(), -30.0 + 8.0);
        assert_abs_diff_eq!(mallows_cp(12.0, 0.0, 30, 0.5).unwrap(), 24.0 - 30.0);
        assert!(mallows_cp(1.0, 1.0, 10, 0.0).is_err());
    }

    #[test]
    fn quadratic_roots() {
        // (α − 1)(α − 3) = α² − 4α + 3
        assert_abs_diff_eq!(smallest_positive_root(1.0, 2.0, 3.0, 1.0).unwrap(), 1.0, epsilon = 1e-14);
        assert!(smallest_positive_root(1.0, 0.0, 1.0, 1.0).is_none());
        assert_abs_diff_eq!(smallest_positive_root(0.0, 1.0, 4.0, 1.0).unwrap(), 2.0);
        assert!(smallest_positive_root(0.0, 1.0, -4.0, 1.0).is_none());
        // (α + 1)(α − 2) = α² − α − 2
        assert_abs_diff_eq!(smallest_positive_root(1.0, 0.5, -2.0, 1.0).unwrap(), 2.0, epsilon = 1e-14);
    }

    #[test]
    fn first_selection_picks_the_copy_of_y() {
        let mut r = ChaCha8Rng::seed_from_u64(1);
        let y = normal_vec(&mut r, 40);
        let other = normal_vec(&mut r, 40);
        let cands = scalars(&[other.clone(), y.clone()]);
        let f = Flars::new(&y, &cands, &FlarsOptions::unpenalized()).unwrap();
        let st = f.first_selection().unwrap();
        assert_eq!(st.active(), vec!["z2"]);
        let near = &y + 1e-3 * normal_vec(&mut r, 40);
        let cands = scalars(&[other, near]);
        let st = Flars::new(&y, &cands, &FlarsOptions::unpenalized()).unwrap().first_selection().unwrap();
        assert_eq!(st.active(), vec!["z2"]);
    }

    #[test]
    fn no_signal_is_reported() {
        let z = DVector::from_vec(vec![1.0, -1.0, 1.0, -1.0]);
        let y = DVector::from_vec(vec![1.0, 1.0, -1.0, -1.0]);
        let err = run_flars(&y, &scalars(&[z]), &FlarsOptions::unpenalized()).unwrap_err();
        assert!(matches!(err, FlarsError::NoSignal));
    }

    #[test]
    fn empty_candidates_rejected() {
        let cands = CandidateSet::new(vec![], vec![], rep()).unwrap();
        let y = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        assert!(matches!(run_flars(&y, &cands, &FlarsOptions::default()), Err(FlarsError::InvalidArgument(_))));
    }

    #[test]
    fn single_scalar_direction_is_standardized_z() {
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let z = normal_vec(&mut r, 30);
        let y = -2.0 * &z + normal_vec(&mut r, 30);
        let f = Flars::new(&y, &scalars(std::slice::from_ref(&z)), &FlarsOptions::unpenalized()).unwrap();
        let st = f.first_selection().unwrap();
        let (u, _) = f.direction(&st).unwrap().unwrap();
        let zs = standardized(&z);
        assert!((&u + &zs).abs().max() < 1e-12);
        assert!(u.dot(&st.residual) > 0.0);
    }

    #[test]
    fn two_variable_direction_matches_penalized_least_squares() {
        let mut r = ChaCha8Rng::seed_from_u64(3);
        let n = 40;
        let z1 = normal_vec(&mut r, n);
        let z2 = normal_vec(&mut r, n);
        let y = &z1 + 0.8 * &z2 + 0.5 * normal_vec(&mut r, n);
        let l2 = 0.3;
        let opts = FlarsOptions {
            lambda1: Tuning::Fixed(0.0),
            lambda2: Tuning::Fixed(l2),
            ..Default::default()
        };
        let f = Flars::new(&y, &scalars(&[z1.clone(), z2.clone()]), &opts).unwrap();
        let mut st = f.first_selection().unwrap();
        f.iterate(&mut st).unwrap();
        assert_eq!(st.active().len(), 2);
        let (u, _) = f.direction(&st).unwrap().unwrap();
        // ridge normal equations on standardized columns, solved by hand
        let (a, b) = (standardized(&z1), standardized(&z2));
        let rr = &st.residual;
        let (s11, s12, s22) = (a.dot(&a) + l2, a.dot(&b), b.dot(&b) + l2);
        let (t1, t2) = (a.dot(rr), b.dot(rr));
        let det = s11 * s22 - s12 * s12;
        let g1 = (s22 * t1 - s12 * t2) / det;
        let g2 = (s11 * t2 - s12 * t1) / det;
        let fit = &a * g1 + &b * g2;
        let expected = &fit / sd(fit.as_slice());
        assert!((&u - &expected).abs().max() < 1e-10);
        assert_abs_diff_eq!(sd(u.as_slice()), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(u.mean(), 0.0, epsilon = 1e-12);
    }

    /// Normalized squared correlation of `v` with a candidate system.
    fn lhs_functional(v: &DVector<f64>, sys: &PenalizedSystem, norm: NormalizationRule) -> f64 {
        sys.bilinear(v, v) / normalizer(norm, sys)
    }

    fn rhs_direction(v: &DVector<f64>, u: &DVector<f64>) -> f64 {
        v.dot(u).powi(2) / u.norm_squared()
    }

    #[test]
    fn step_distance_equalizes_correlations() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let n = 50;
        let rep = rep();
        let q = rep.grid().len();
        let x = DMatrix::from_fn(n, q, |_, _| r.sample::<f64, _>(StandardNormal));
        let x = FunctionalSample::new(x, rep.grid().clone()).unwrap();
        let resid = normal_vec(&mut r, n);
        let u0 = 0.6 * &resid + normal_vec(&mut r, n);
        let u = standardized(&u0);
        let pen = PenaltyConfig::new(0.01, 0.001).unwrap();
        for norm in [NormalizationRule::Norm, NormalizationRule::Trace, NormalizationRule::Identity] {
            let a = step_distance_functional(&resid, &u, &x, &rep, pen, norm).unwrap();
            let Some(a) = a else { continue };
            let block = DesignBlock::functional(&x, &rep).unwrap().centered();
            let sys = PenalizedSystem::new(&[&block], &[pen.lambda1], pen.lambda2).unwrap();
            let moved = &resid - a * &u;
            assert_abs_diff_eq!(lhs_functional(&moved, &sys, norm), rhs_direction(&moved, &u), epsilon = 1e-6);
        }
    }

    #[test]
    fn step_distance_for_generating_variable_is_at_most_ols() {
        let mut r = ChaCha8Rng::seed_from_u64(5);
        let n = 40;
        let rep = rep();
        let q = rep.grid().len();
        let x = DMatrix::from_fn(n, q, |_, _| r.sample::<f64, _>(StandardNormal));
        let x = FunctionalSample::new(x, rep.grid().clone()).unwrap();
        let block = DesignBlock::functional(&x, &rep).unwrap().centered();
        let sys = PenalizedSystem::new(&[&block], &[0.0], 0.0).unwrap();
        let resid = normal_vec(&mut r, n);
        let resid = resid.add_scalar(-resid.mean());
        let u = standardized(&sys.smooth(&resid));
        let ols = u.dot(&resid) / u.norm_squared();
        // with the Frobenius normalization the step equation has a double
        // root at the least-squares distance
        let a = step_distance_functional(&resid, &u, &x, &rep, PenaltyConfig::none(), NormalizationRule::Norm)
            .unwrap()
            .unwrap();
        assert!(a <= ols * (1.0 + 1e-8));
        assert_abs_diff_eq!(a, ols, epsilon = 1e-6 * ols);
        let moved = &resid - a * &u;
        assert_abs_diff_eq!(
            lhs_functional(&moved, &sys, NormalizationRule::Norm),
            rhs_direction(&moved, &u),
            epsilon = 1e-6
        );
    }

    #[test]
    fn scalar_step_substitution() {
        let mut r = ChaCha8Rng::seed_from_u64(6);
        let n = 60;
        let resid = normal_vec(&mut r, n);
        let resid = resid.add_scalar(-resid.mean());
        let u = standardized(&(0.7 * &resid + normal_vec(&mut r, n)));
        let z = normal_vec(&mut r, n);
        let a = step_distance_scalar(&resid, &u, &z, NormalizationRule::Identity).unwrap();
        let zc = z.add_scalar(-z.mean());
        let moved = &resid - a * &u;
        assert_abs_diff_eq!(rhs_direction(&moved, &zc), rhs_direction(&moved, &u), epsilon = 1e-8);
    }

    #[test]
    fn scalar_equal_to_direction_has_no_step() {
        let mut r = ChaCha8Rng::seed_from_u64(7);
        let resid = normal_vec(&mut r, 30);
        let resid = resid.add_scalar(-resid.mean());
        let u = standardized(&(&resid + normal_vec(&mut r, 30)));
        assert!(step_distance_scalar(&resid, &u, &u, NormalizationRule::Norm).is_none());
    }

    /// A heavily shrunk functional candidate normalized by its (tiny) trace
    /// looks more correlated than the direction, so its only positive root
    /// lies beyond the least-squares point and the step falls back to it.
    #[test]
    fn unreachable_candidate_triggers_full_step() {
        let mut r = ChaCha8Rng::seed_from_u64(8);
        let n = 40;
        let rep = rep();
        let q = rep.grid().len();
        let z = normal_vec(&mut r, n);
        let x = DMatrix::from_fn(n, q, |_, _| r.sample::<f64, _>(StandardNormal));
        let x = FunctionalSample::new(x, rep.grid().clone()).unwrap();
        let y = 0.5 * &z + 3.0 * crate::funcrep::project(&x, &rep, &DVector::from_element(rep.dim(), 1.0)).unwrap()
            + 0.1 * normal_vec(&mut r, n);
        let cands = CandidateSet::new(vec![("x".into(), x)], vec![("z".into(), z)], rep).unwrap();
        let opts = FlarsOptions {
            lambda1: Tuning::Fixed(0.0),
            lambda2: Tuning::Fixed(1e4),
            norm: NormalizationRule::Trace,
            stop: StopRule::MaxIter,
            ..Default::default()
        };
        let (st, diag, _) = run_flars(&y, &cands, &opts).unwrap();
        assert_eq!(st.records[0].selected_id, "z");
        assert!(st.records[0].modification_one);
        assert!(st.records.iter().all(|r| r.df_star.is_finite()));
        assert!(diag.df_star.is_finite());
        assert!(diag.cp.is_none_or(f64::is_finite));
    }

    /// First LARS step from definition: the γ at which an inactive
    /// standardized covariate's |correlation| with the residual equals the
    /// active one's.
    #[test]
    fn first_step_matches_equiangular_distance() {
        let mut r = ChaCha8Rng::seed_from_u64(9);
        let n = 50;
        let z1 = normal_vec(&mut r, n);
        let z2 = normal_vec(&mut r, n);
        let y = 1.0 * &z1 + 0.5 * &z2 + 0.1 * normal_vec(&mut r, n);
        let opts = FlarsOptions {
            norm: NormalizationRule::Identity,
            ..FlarsOptions::unpenalized()
        };
        let (st, _, _) = run_flars(&y, &scalars(&[z1.clone(), z2.clone()]), &opts).unwrap();
        let (a, b) = (standardized(&z1), standardized(&z2));
        let yc = y.add_scalar(-y.mean());
        let (c1, c2) = (a.dot(&yc), b.dot(&yc));
        let (a1, a2) = (a.dot(&a), b.dot(&a));
        let gamma = [(c1 - c2) / (a1 - a2), (c1 + c2) / (a1 + a2)]
            .into_iter()
            .filter(|g| *g > 0.0)
            .fold(f64::INFINITY, f64::min);
        // fLARS moves along u = a / sd(a) = a, so distances agree
        assert_abs_diff_eq!(st.distances[0], gamma, epsilon = 1e-8);
    }

    #[test]
    fn exact_two_variable_model_is_recovered() {
        let mut r = ChaCha8Rng::seed_from_u64(10);
        let n = 50;
        let zs: Vec<DVector<f64>> = (0..5).map(|_| normal_vec(&mut r, n)).collect();
        let y = 2.0 * &zs[1] - 1.5 * &zs[3];
        let opts = FlarsOptions::unpenalized();
        let (st, diag, model) = run_flars(&y, &scalars(&zs), &opts).unwrap();
        let first_two: HashSet<&str> = st.records[..2].iter().map(|r| r.selected_id.as_str()).collect();
        assert_eq!(first_two, HashSet::from(["z2", "z4"]));
        assert!(st.records[1].rss < 1e-12 * y.norm_squared(), "{}", st.records[1].rss);
        assert_eq!(diag.stop_index, 2);
        let pred = model.predict(&scalars(&zs)).unwrap();
        assert!((&pred - &y).abs().max() < 1e-6);
    }

    #[test]
    fn residual_norm_decreases() {
        let mut r = ChaCha8Rng::seed_from_u64(11);
        let n = 60;
        let zs: Vec<DVector<f64>> = (0..6).map(|_| normal_vec(&mut r, n)).collect();
        let y = &zs[0] + 0.5 * &zs[2] - 0.7 * &zs[4] + 0.3 * normal_vec(&mut r, n);
        let opts = FlarsOptions {
            stop: StopRule::MaxIter,
            ..FlarsOptions::unpenalized()
        };
        let (st, _, _) = run_flars(&y, &scalars(&zs), &opts).unwrap();
        let mut last = y.add_scalar(-y.mean()).norm_squared();
        for rec in &st.records {
            assert!(rec.rss < last);
            last = rec.rss;
        }
        for (k, cd) in st.cd_history.iter().enumerate() {
            match (cd, st.corr_history[k]) {
                (Some(c), Some(rho)) => assert_eq!(*c, rho * st.distances[k]),
                (None, None) => assert_eq!(k, 0),
                _ => panic!("cd/rho mismatch at {k}"),
            }
        }
        for rec in &st.records {
            assert!(rec.df_star >= -1e-9 && rec.df_star <= n as f64 + 1e-9);
        }
    }

    #[test]
    fn exhausted_path_ends_at_least_squares() {
        let mut r = ChaCha8Rng::seed_from_u64(12);
        let n = 40;
        let zs: Vec<DVector<f64>> = (0..3).map(|_| normal_vec(&mut r, n)).collect();
        let y = &zs[0] - &zs[1] + 0.5 * &zs[2] + normal_vec(&mut r, n);
        let opts = FlarsOptions {
            stop: StopRule::MaxIter,
            ..FlarsOptions::unpenalized()
        };
        let (st, diag, _) = run_flars(&y, &scalars(&zs), &opts).unwrap();
        assert!(st.records.last().unwrap().modification_one);
        assert_eq!(diag.stop_rule, StopReason::ModificationITerminal);
        // least squares residual from the normal equations
        let x = DMatrix::from_fn(n, 3, |i, j| zs[j][i] - zs[j].mean());
        let yc = y.add_scalar(-y.mean());
        let beta = (x.transpose() * &x).cholesky().unwrap().solve(&(x.transpose() * &yc));
        let resid = &yc - &x * beta;
        assert!((&st.residual - &resid).abs().max() < 1e-8);
        assert!(diag.df_star.is_finite());
    }

    #[test]
    fn single_variable_ols_step_has_one_df() {
        let mut r = ChaCha8Rng::seed_from_u64(13);
        let z = normal_vec(&mut r, 25);
        let y = 0.5 * &z + normal_vec(&mut r, 25);
        let (st, diag, model) = run_flars(&y, &scalars(std::slice::from_ref(&z)), &FlarsOptions::unpenalized()).unwrap();
        assert_eq!(st.records.len(), 1);
        assert_abs_diff_eq!(st.records[0].df_star, 1.0, epsilon = 1e-8);
        let slope = {
            let zc = z.add_scalar(-z.mean());
            zc.dot(&y) / zc.norm_squared()
        };
        assert_abs_diff_eq!(model.scalar[0].gamma, slope, epsilon = 1e-10);
        assert!(diag.stop_index == 1);
    }

    #[test]
    fn orthogonal_projections_accumulate_df() {
        let n = 12;
        let mut hat = DMatrix::<f64>::identity(n, n);
        assert_eq!(hat_trace_df(&hat), 0.0);
        for k in 0..4 {
            let mut e = DVector::zeros(n);
            e[k] = 1.0;
            let h = &e * e.transpose();
            hat = (DMatrix::identity(n, n) - h) * hat;
        }
        assert_abs_diff_eq!(hat_trace_df(&hat), 4.0, epsilon = 1e-12);
    }

    #[test]
    fn modification_two_drops_faded_variables_only() {
        let f_y = DVector::from_vec((0..20).map(|i| (i as f64).sin()).collect());
        let zs: Vec<DVector<f64>> = (0..2)
            .map(|k| DVector::from_vec((0..20).map(|i| ((i * (k + 2)) as f64).cos()).collect()))
            .collect();
        let opts = FlarsOptions {
            kappa: Some(0.05),
            ..FlarsOptions::unpenalized()
        };
        let f = Flars::new(&f_y, &scalars(&zs), &opts).unwrap();
        let mut st = f.first_selection().unwrap();
        let i = st.active[0];
        // newly entered: no past variance, never dropped
        assert!(f.modification_two(&mut st, 0.05).is_empty());
        st.coef[i] = DVector::from_element(1, 1.0);
        assert!(f.modification_two(&mut st, 0.05).is_empty());
        let var_y = variance(f.yc.as_slice());
        let target = (0.01 * var_y).sqrt();
        st.coef[i] = DVector::from_element(1, target);
        let dropped = f.modification_two(&mut st, 0.05);
        assert_eq!(dropped, vec![i]);
        assert!(st.active.is_empty());
        assert_eq!(st.dropped(), vec![st.ids[i].clone()]);
    }

    #[test]
    fn modification_never_drops_new_entrants() {
        let mut r = ChaCha8Rng::seed_from_u64(14);
        let n = 60;
        let zs: Vec<DVector<f64>> = (0..10).map(|_| normal_vec(&mut r, n)).collect();
        let y = &zs[0] + 0.5 * &zs[1] + 0.8 * normal_vec(&mut r, n);
        let opts = FlarsOptions {
            kappa: Some(0.05),
            stop: StopRule::MaxIter,
            ..FlarsOptions::unpenalized()
        };
        let (st, _, _) = run_flars(&y, &scalars(&zs), &opts).unwrap();
        for rec in &st.records {
            assert!(!rec.dropped.contains(&rec.selected_id), "iteration {}", rec.iteration);
        }
    }

    #[test]
    fn trace_csv_round_trip() {
        let mut r = ChaCha8Rng::seed_from_u64(15);
        let n = 40;
        let zs: Vec<DVector<f64>> = (0..4).map(|_| normal_vec(&mut r, n)).collect();
        let y = &zs[0] + 0.3 * normal_vec(&mut r, n);
        let (st, diag, _) = run_flars(&y, &scalars(&zs), &FlarsOptions::unpenalized()).unwrap();
        let mut buf = Vec::new();
        write_trace_csv(&st.records, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("iteration,selected_id,alpha,rho_star,cd,df_star,cp,rss"));
        let back = read_trace_csv(&buf[..]).unwrap();
        assert_eq!(back.len(), st.records.len());
        let cds: Vec<Option<f64>> = back.iter().map(|r| r.cd).collect();
        assert_eq!(stopping_cd(&cds, 0.10), diag.stop_index);
        assert_eq!(back[0].alpha, st.records[0].alpha);
    }

    #[test]
    fn functional_candidates_are_selected_and_predicted() {
        let mut r = ChaCha8Rng::seed_from_u64(16);
        let n = 80;
        let rep = rep();
        let q = rep.grid().len();
        let curves = |r: &mut ChaCha8Rng| {
            let x = DMatrix::from_fn(n, q, |_, j| {
                let _ = j;
                0.0
            });
            let mut x = x;
            for i in 0..n {
                let (a, b): (f64, f64) = (r.sample(StandardNormal), r.sample(StandardNormal));
                for (j, &t) in rep.grid().points().iter().enumerate() {
                    x[(i, j)] = a * (std::f64::consts::PI * t).sin() + b * t;
                }
            }
            FunctionalSample::new(x, rep.grid().clone()).unwrap()
        };
        let x1 = curves(&mut r);
        let x2 = curves(&mut r);
        let z = normal_vec(&mut r, n);
        let beta = rep.coefficients_of(|t| 2.0 * t);
        let y = crate::funcrep::project(&x1, &rep, &beta).unwrap() + 0.5 * &z + 0.02 * normal_vec(&mut r, n);
        let cands = CandidateSet::new(
            vec![("x1".into(), x1), ("x2".into(), x2)],
            vec![("z".into(), z)],
            rep,
        )
        .unwrap();
        let (_, _, model) = run_flars(&y, &cands, &FlarsOptions::default()).unwrap();
        let ids = model.selected_ids();
        assert!(ids.contains(&"x1".to_string()) && ids.contains(&"z".to_string()), "{ids:?}");
        let pred = model.predict(&cands).unwrap();
        let rmse = ((&pred - &y).norm_squared() / n as f64).sqrt();
        assert!(rmse < 0.2, "rmse {rmse}");
        assert!(model.beta_curve("x1").is_some());
        let json = serde_json::to_string(&model).unwrap();
        let back: FittedModel = serde_json::from_str(&json).unwrap();
        assert_eq!(back.predict(&cands).unwrap(), pred);
    }

    #[test]
    fn tuning_serde() {
        let t: Tuning = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(t, Tuning::Auto);
        let t: Tuning = serde_json::from_str("0.5").unwrap();
        assert_eq!(t, Tuning::Fixed(0.5));
        assert!(serde_json::from_str::<Tuning>("-1.0").is_err());
        assert!(serde_json::from_str::<Tuning>("\"manual\"").is_err());
    }
}
