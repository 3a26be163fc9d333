//! Gaussian-process random effects on top of a fixed-effects fit.

use std::cell::RefCell;
use std::f64::consts::PI;

use argmin::core::{
    CostFunction, Error as ArgminError, Executor, Gradient, State, TerminationReason, TerminationStatus,
};
use argmin::solver::linesearch::MoreThuenteLineSearch;
use argmin::solver::quasinewton::LBFGS;
use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, FlarsError, Result};
use crate::flars::{run_flars, CandidateSet, FittedModel, FlarsOptions, StopRule};

/// Squared-exponential kernel `v₁·exp(−½ Σ w_h (φ_h − φ′_h)²)` plus `σ²` on
/// the diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Kernel {
    pub v1: f64,
    pub w: Vec<f64>,
    pub sigma: f64,
}

impl Kernel {
    pub fn new(v1: f64, w: Vec<f64>, sigma: f64) -> Result<Self> {
        let k = Kernel { v1, w, sigma };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v > 0.0;
        if !ok(self.v1) || !ok(self.sigma) || !self.w.iter().all(|&w| ok(w)) {
            return Err(invalid("kernel parameters must be finite and strictly positive"));
        }
        if self.w.is_empty() {
            return Err(invalid("kernel needs at least one weight"));
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.w.len()
    }

    /// `(ln v₁, ln w₁, …, ln w_H, ln σ)`.
    pub fn log_params(&self) -> Vec<f64> {
        std::iter::once(self.v1.ln())
            .chain(self.w.iter().map(|w| w.ln()))
            .chain(std::iter::once(self.sigma.ln()))
            .collect()
    }

    pub fn from_log_params(theta: &[f64]) -> Result<Self> {
        if theta.len() < 3 {
            return Err(invalid("log-parameter vector needs at least 3 entries"));
        }
        let h = theta.len() - 2;
        Kernel::new(
            theta[0].exp(),
            theta[1..=h].iter().map(|t| t.exp()).collect(),
            theta[h + 1].exp(),
        )
    }

    fn eval(&self, a: &[f64], b: &[f64]) -> f64 {
        let d2: f64 = self.w.iter().zip(a.iter().zip(b)).map(|(w, (x, y))| w * (x - y) * (x - y)).sum();
        self.v1 * (-0.5 * d2).exp()
    }
}

fn row(m: &DMatrix<f64>, i: usize) -> Vec<f64> {
    m.row(i).iter().copied().collect()
}

/// Kernel matrix between the rows of `a` and `b`. With `include_noise`,
/// `σ²` is added where row `i` of `a` and row `i` of `b` are the same point.
pub fn kernel_matrix(a: &DMatrix<f64>, b: &DMatrix<f64>, kernel: &Kernel, include_noise: bool) -> Result<DMatrix<f64>> {
    if a.ncols() != kernel.dim() || b.ncols() != kernel.dim() {
        return Err(invalid(format!(
            "covariates have {} and {} columns but the kernel has {} weights",
            a.ncols(),
            b.ncols(),
            kernel.dim()
        )));
    }
    let ra: Vec<Vec<f64>> = (0..a.nrows()).map(|i| row(a, i)).collect();
    let rb: Vec<Vec<f64>> = (0..b.nrows()).map(|i| row(b, i)).collect();
    let mut k = DMatrix::from_fn(a.nrows(), b.nrows(), |i, j| kernel.eval(&ra[i], &rb[j]));
    if include_noise {
        let s2 = kernel.sigma * kernel.sigma;
        for i in 0..a.nrows().min(b.nrows()) {
            if ra[i] == rb[i] {
                k[(i, i)] += s2;
            }
        }
    }
    Ok(k)
}

/// Cholesky factor of `k`, adding `1e-8·v₁` to the diagonal on failure and
/// escalating tenfold up to `1e-4·v₁`.
fn factor_jittered(k: &DMatrix<f64>, v1: f64) -> Result<Cholesky<f64, Dyn>> {
    if let Some(c) = Cholesky::new(k.clone()) {
        return Ok(c);
    }
    let mut jitter = 1e-8 * v1;
    while jitter <= 1e-4 * v1 * (1.0 + 1e-12) {
        let mut kj = k.clone();
        for i in 0..kj.nrows() {
            kj[(i, i)] += jitter;
        }
        if let Some(c) = Cholesky::new(kj) {
            return Ok(c);
        }
        jitter *= 10.0;
    }
    Err(FlarsError::Numerical(
        "covariance matrix is not positive definite even after jitter".into(),
    ))
}

/// Rows of the data grouped by subject, in order of first appearance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubjectIndex {
    ids: Vec<String>,
    rows: Vec<Vec<usize>>,
    n_rows: usize,
}

impl SubjectIndex {
    pub fn from_labels<S: AsRef<str>>(labels: &[S]) -> Self {
        let mut ids: Vec<String> = Vec::new();
        let mut rows: Vec<Vec<usize>> = Vec::new();
        let mut lookup = std::collections::HashMap::new();
        for (i, l) in labels.iter().enumerate() {
            let l = l.as_ref();
            let k = *lookup.entry(l.to_string()).or_insert_with(|| {
                ids.push(l.to_string());
                rows.push(Vec::new());
                ids.len() - 1
            });
            rows[k].push(i);
        }
        SubjectIndex {
            ids,
            rows,
            n_rows: labels.len(),
        }
    }

    /// Every row belongs to one subject.
    pub fn single(n: usize) -> Self {
        SubjectIndex {
            ids: vec!["1".into()],
            rows: vec![(0..n).collect()],
            n_rows: n,
        }
    }

    pub fn ids(&self) -> &[String] {
        &self.ids
    }

    pub fn rows(&self) -> &[Vec<usize>] {
        &self.rows
    }

    pub fn n_rows(&self) -> usize {
        self.n_rows
    }

    pub fn position(&self, id: &str) -> Option<usize> {
        self.ids.iter().position(|s| s == id)
    }
}

fn take_rows(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

fn take(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

/// Log marginal likelihood of `resid` under independent per-subject GPs,
/// and its gradient with respect to the log-parameters.
pub fn log_marginal_likelihood(
    phi: &DMatrix<f64>,
    resid: &DVector<f64>,
    subjects: &SubjectIndex,
    kernel: &Kernel,
) -> Result<(f64, Vec<f64>)> {
    if phi.nrows() != resid.len() || subjects.n_rows() != resid.len() {
        return Err(invalid("covariates, residuals and subject labels differ in length"));
    }
    let h = kernel.dim();
    let s2 = kernel.sigma * kernel.sigma;
    let mut value = 0.0;
    let mut grad = vec![0.0; h + 2];
    for idx in subjects.rows() {
        let p = take_rows(phi, idx);
        let r = take(resid, idx);
        let c = kernel_matrix(&p, &p, kernel, false)?;
        let mut k = c.clone();
        for i in 0..k.nrows() {
            k[(i, i)] += s2;
        }
        let chol = factor_jittered(&k, kernel.v1)?;
        let alpha = chol.solve(&r);
        let logdet: f64 = chol.l_dirty().diagonal().iter().take(idx.len()).map(|d| d.ln()).sum();
        value += -0.5 * r.dot(&alpha) - logdet - 0.5 * idx.len() as f64 * (2.0 * PI).ln();
        let a = &alpha * alpha.transpose() - chol.inverse();
        grad[0] += 0.5 * a.component_mul(&c).sum();
        for hh in 0..h {
            let mut acc = 0.0;
            for i in 0..idx.len() {
                for j in 0..idx.len() {
                    let d = p[(i, hh)] - p[(j, hh)];
                    acc += a[(i, j)] * c[(i, j)] * (-0.5 * kernel.w[hh] * d * d);
                }
            }
            grad[1 + hh] += 0.5 * acc;
        }
        grad[h + 1] += s2 * a.trace();
    }
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FlarsError::Numerical("non-finite marginal likelihood".into()));
    }
    Ok((value, grad))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GpFitOptions {
    pub n_starts: usize,
    /// Half-width, in log units, of the spread of the starting points.
    pub spread: f64,
    pub max_iters: u64,
    pub seed: u64,
}

impl Default for GpFitOptions {
    fn default() -> Self {
        GpFitOptions {
            n_starts: 5,
            spread: 2.0,
            max_iters: 200,
            seed: 0,
        }
    }
}

struct NegLml<'a> {
    phi: &'a DMatrix<f64>,
    resid: &'a DVector<f64>,
    subjects: &'a SubjectIndex,
    /// `1/n`, keeping the first quasi-Newton step of moderate length.
    scale: f64,
    last: RefCell<Option<(Vec<f64>, f64, Vec<f64>)>>,
}

const LOG_BOUND: f64 = 30.0;

impl<'a> NegLml<'a> {
    fn new(phi: &'a DMatrix<f64>, resid: &'a DVector<f64>, subjects: &'a SubjectIndex) -> Self {
        NegLml {
            phi,
            resid,
            subjects,
            scale: 1.0 / resid.len().max(1) as f64,
            last: RefCell::new(None),
        }
    }

    /// Value and gradient share one factorization, so the last evaluation
    /// is cached for the paired cost/gradient calls of the solver.
    fn eval(&self, theta: &[f64]) -> std::result::Result<(f64, Vec<f64>), ArgminError> {
        if let Some((t, v, g)) = self.last.borrow().as_ref() {
            if t.as_slice() == theta {
                return Ok((*v, g.clone()));
            }
        }
        let out = self.eval_uncached(theta)?;
        *self.last.borrow_mut() = Some((theta.to_vec(), out.0, out.1.clone()));
        Ok(out)
    }

    fn eval_uncached(&self, theta: &[f64]) -> std::result::Result<(f64, Vec<f64>), ArgminError> {
        if theta.iter().any(|t| !t.is_finite() || t.abs() > LOG_BOUND) {
            return Err(ArgminError::msg("log-parameters out of range"));
        }
        let k = Kernel::from_log_params(theta).map_err(|e| ArgminError::msg(e.to_string()))?;
        let (v, g) = log_marginal_likelihood(self.phi, self.resid, self.subjects, &k)
            .map_err(|e| ArgminError::msg(e.to_string()))?;
        Ok((-v * self.scale, g.into_iter().map(|x| -x * self.scale).collect()))
    }
}

impl CostFunction for NegLml<'_> {
    type Param = Vec<f64>;
    type Output = f64;

    fn cost(&self, theta: &Vec<f64>) -> std::result::Result<f64, ArgminError> {
        Ok(self.eval(theta)?.0)
    }
}

impl Gradient for NegLml<'_> {
    type Param = Vec<f64>;
    type Gradient = Vec<f64>;

    fn gradient(&self, theta: &Vec<f64>) -> std::result::Result<Vec<f64>, ArgminError> {
        Ok(self.eval(theta)?.1)
    }
}

fn moment_start(phi: &DMatrix<f64>, resid: &DVector<f64>) -> Vec<f64> {
    let n = resid.len() as f64;
    let var = (resid.norm_squared() / n).max(1e-12);
    let mut theta = vec![(0.5 * var).ln()];
    for col in phi.column_iter() {
        let m = col.mean();
        let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n;
        theta.push(if v > 0.0 { (1.0 / v).ln() } else { 0.0 });
    }
    theta.push((0.5 * var).sqrt().ln());
    theta
}

/// One quasi-Newton run. The flag is false when the line search hit an
/// invalid region before convergence; the best point so far is returned.
fn optimize_from(problem: NegLml<'_>, start: Vec<f64>, max_iters: u64) -> Option<(Vec<f64>, f64, bool)> {
    problem.eval(&start).ok()?;
    let solver = LBFGS::new(MoreThuenteLineSearch::new(), 7)
        .with_tolerance_grad(1e-9)
        .ok()?
        .with_tolerance_cost(1e-13)
        .ok()?;
    let res = Executor::new(problem, solver)
        .configure(|s| s.param(start).max_iters(max_iters))
        .run()
        .ok()?;
    let state = res.state();
    let finished = !matches!(
        state.get_termination_status(),
        TerminationStatus::Terminated(TerminationReason::SolverExit(_))
    );
    let best = state.get_best_param()?.clone();
    let cost = state.get_best_cost();
    cost.is_finite().then_some((best, cost, finished))
}

/// Empirical-Bayes estimate of the kernel: maximizes the marginal
/// likelihood over log-parameters from several starting points.
pub fn fit_hyperparameters(
    phi: &DMatrix<f64>,
    resid: &DVector<f64>,
    subjects: &SubjectIndex,
    opts: &GpFitOptions,
) -> Result<Kernel> {
    if resid.len() < 5 {
        return Err(invalid("at least 5 observations are needed to fit the kernel"));
    }
    if phi.nrows() != resid.len() || subjects.n_rows() != resid.len() {
        return Err(invalid("covariates, residuals and subject labels differ in length"));
    }
    if phi.ncols() == 0 {
        return Err(invalid("random-effects covariates need at least one column"));
    }
    multi_start(phi, resid, subjects, opts, moment_start(phi, resid), opts.n_starts.max(1))
}

/// Local re-optimization from a previous estimate (single start, with the
/// same perturbed restarts on failure).
pub fn refine_hyperparameters(
    phi: &DMatrix<f64>,
    resid: &DVector<f64>,
    subjects: &SubjectIndex,
    start: &Kernel,
    opts: &GpFitOptions,
) -> Result<Kernel> {
    if phi.nrows() != resid.len() || subjects.n_rows() != resid.len() || phi.ncols() != start.dim() {
        return Err(invalid("covariates, residuals, subject labels and kernel disagree in size"));
    }
    multi_start(phi, resid, subjects, opts, start.log_params(), 1)
}

fn multi_start(
    phi: &DMatrix<f64>,
    resid: &DVector<f64>,
    subjects: &SubjectIndex,
    opts: &GpFitOptions,
    base: Vec<f64>,
    n_starts: usize,
) -> Result<Kernel> {
    let results: Vec<Option<(Vec<f64>, f64)>> = (0..n_starts)
        .into_par_iter()
        .map(|s| {
            let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
            rng.set_stream(s as u64);
            let perturb = |rng: &mut ChaCha8Rng| -> Vec<f64> {
                base.iter().map(|b| b + rng.random_range(-opts.spread..=opts.spread)).collect()
            };
            let mut start = if s == 0 { base.clone() } else { perturb(&mut rng) };
            let mut best: Option<(Vec<f64>, f64)> = None;
            for _ in 0..=5 {
                let problem = NegLml::new(phi, resid, subjects);
                match optimize_from(problem, start.clone(), opts.max_iters) {
                    Some((p, c, true)) => return Some((p, c)),
                    Some((p, c, false)) => {
                        start = p.clone();
                        best = Some((p, c));
                    }
                    None => start = perturb(&mut rng),
                }
            }
            best
        })
        .collect();
    let best = results
        .into_iter()
        .flatten()
        .min_by(|a, b| a.1.total_cmp(&b.1))
        .ok_or_else(|| FlarsError::OptimizationFailed("every start produced a non-finite likelihood".into()))?;
    Kernel::from_log_params(&best.0)
}

/// A fitted random-effects layer: kernel, z-scored covariates and the
/// residuals it was trained on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GpModel {
    pub kernel: Kernel,
    pub phi_center: Vec<f64>,
    pub phi_scale: Vec<f64>,
    pub train_phi: DMatrix<f64>,
    pub train_resid: DVector<f64>,
    pub subjects: SubjectIndex,
}

/// How the random effect of an unseen subject is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NewSubjectRule {
    /// Fixed effects only.
    #[default]
    Fixed,
    /// Average of the as-if predictions of every training subject.
    Uniform,
    /// As-if predictions weighted by inverse distance to the subject's
    /// nearest visit in standardized covariate space.
    InverseDistance,
}

impl GpModel {
    /// Standardizes `phi` and wraps it with a given kernel (on the
    /// standardized scale).
    pub fn new(phi: &DMatrix<f64>, resid: &DVector<f64>, subjects: SubjectIndex, kernel: Kernel) -> Result<Self> {
        kernel.validate()?;
        if phi.nrows() != resid.len() || subjects.n_rows() != resid.len() {
            return Err(invalid("covariates, residuals and subject labels differ in length"));
        }
        if phi.ncols() != kernel.dim() {
            return Err(invalid("kernel dimension differs from the number of covariates"));
        }
        let n = phi.nrows() as f64;
        let mut center = Vec::with_capacity(phi.ncols());
        let mut scale = Vec::with_capacity(phi.ncols());
        for col in phi.column_iter() {
            let m = col.mean();
            let sd = (col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0)).sqrt();
            center.push(m);
            scale.push(if sd > 0.0 && sd.is_finite() { sd } else { 1.0 });
        }
        let train_phi = DMatrix::from_fn(phi.nrows(), phi.ncols(), |i, j| (phi[(i, j)] - center[j]) / scale[j]);
        Ok(GpModel {
            kernel,
            phi_center: center,
            phi_scale: scale,
            train_phi,
            train_resid: resid.clone(),
            subjects,
        })
    }

    /// Standardizes `phi` and estimates the kernel by maximum marginal
    /// likelihood.
    pub fn fit(phi: &DMatrix<f64>, resid: &DVector<f64>, subjects: SubjectIndex, opts: &GpFitOptions) -> Result<Self> {
        let placeholder = Kernel::new(1.0, vec![1.0; phi.ncols().max(1)], 1.0)?;
        let mut model = GpModel::new(phi, resid, subjects, placeholder)?;
        model.kernel = fit_hyperparameters(&model.train_phi, resid, &model.subjects, opts)?;
        Ok(model)
    }

    pub fn standardize(&self, phi: &[f64]) -> Result<Vec<f64>> {
        if phi.len() != self.phi_center.len() {
            return Err(invalid(format!(
                "expected {} random-effects covariates, got {}",
                self.phi_center.len(),
                phi.len()
            )));
        }
        Ok(phi
            .iter()
            .zip(self.phi_center.iter().zip(&self.phi_scale))
            .map(|(x, (m, s))| (x - m) / s)
            .collect())
    }

    pub fn log_marginal_likelihood(&self) -> Result<f64> {
        Ok(log_marginal_likelihood(&self.train_phi, &self.train_resid, &self.subjects, &self.kernel)?.0)
    }

    fn block(&self, s: usize) -> Result<(DMatrix<f64>, DMatrix<f64>, Cholesky<f64, Dyn>, DVector<f64>)> {
        let idx = &self.subjects.rows()[s];
        let p = take_rows(&self.train_phi, idx);
        let c = kernel_matrix(&p, &p, &self.kernel, false)?;
        let mut k = c.clone();
        let s2 = self.kernel.sigma * self.kernel.sigma;
        for i in 0..k.nrows() {
            k[(i, i)] += s2;
        }
        let chol = factor_jittered(&k, self.kernel.v1)?;
        Ok((p, c, chol, take(&self.train_resid, idx)))
    }

    /// Fitted random effects `ĝ = c(c+σ²I)⁻¹r` and the diagonal of
    /// `σ²(c+σ²I)⁻¹c`, per subject block, in row order.
    pub fn fit_g(&self) -> Result<(DVector<f64>, DVector<f64>)> {
        let n = self.train_resid.len();
        let mut g = DVector::zeros(n);
        let mut var = DVector::zeros(n);
        let s2 = self.kernel.sigma * self.kernel.sigma;
        for (s, idx) in self.subjects.rows().iter().enumerate() {
            let (_, c, chol, r) = self.block(s)?;
            let gb = &c * chol.solve(&r);
            let vb = chol.solve(&c) * s2;
            for (k, &i) in idx.iter().enumerate() {
                g[i] = gb[k];
                var[i] = vb[(k, k)].max(0.0);
            }
        }
        Ok((g, var))
    }

    /// `σ²·αᵀcα` summed over subjects, with `α = (c+σ²I)⁻¹r`.
    fn roughness(&self) -> Result<f64> {
        let mut total = 0.0;
        let s2 = self.kernel.sigma * self.kernel.sigma;
        for s in 0..self.subjects.ids().len() {
            let (_, c, chol, r) = self.block(s)?;
            let a = chol.solve(&r);
            total += s2 * a.dot(&(&c * &a));
        }
        Ok(total)
    }

    fn predict_block(&self, s: usize, phi_std: &[f64]) -> Result<(f64, f64)> {
        let (p, _, chol, r) = self.block(s)?;
        let star = DMatrix::from_row_slice(1, phi_std.len(), phi_std);
        let cs = kernel_matrix(&p, &star, &self.kernel, false)?.column(0).into_owned();
        let mean = cs.dot(&chol.solve(&r));
        let reduction = cs.dot(&chol.solve(&cs));
        let s2 = self.kernel.sigma * self.kernel.sigma;
        Ok((mean, (self.kernel.v1 - reduction).max(0.0) + s2))
    }

    /// Predictive mean (`fixed_pred` plus the GP part) and variance at a
    /// new visit of a training subject.
    pub fn predict_within_subject(&self, subject: &str, fixed_pred: f64, phi_star: &[f64]) -> Result<(f64, f64)> {
        let s = self
            .subjects
            .position(subject)
            .ok_or_else(|| FlarsError::UnknownSubject(subject.to_string()))?;
        let z = self.standardize(phi_star)?;
        let (m, v) = self.predict_block(s, &z)?;
        Ok((fixed_pred + m, v))
    }

    /// Random-effect mean and variance at `phi_star` as if it were a new
    /// visit of each training subject, in subject order.
    pub fn as_if_predictions(&self, phi_star: &[f64]) -> Result<Vec<(f64, f64)>> {
        let z = self.standardize(phi_star)?;
        (0..self.subjects.ids().len()).map(|s| self.predict_block(s, &z)).collect()
    }

    /// Weights over training subjects for an unseen subject at `phi_star`.
    pub fn new_subject_weights(&self, phi_star: &[f64], rule: NewSubjectRule) -> Result<Vec<f64>> {
        let m = self.subjects.ids().len();
        match rule {
            NewSubjectRule::Fixed => Ok(Vec::new()),
            NewSubjectRule::Uniform => Ok(vec![1.0 / m as f64; m]),
            NewSubjectRule::InverseDistance => {
                let z = self.standardize(phi_star)?;
                let d: Vec<f64> = self
                    .subjects
                    .rows()
                    .iter()
                    .map(|idx| {
                        idx.iter()
                            .map(|&i| {
                                z.iter()
                                    .enumerate()
                                    .map(|(h, v)| (v - self.train_phi[(i, h)]).powi(2))
                                    .sum::<f64>()
                                    .sqrt()
                            })
                            .fold(f64::INFINITY, f64::min)
                    })
                    .collect();
                if d.contains(&0.0) {
                    let zeros = d.iter().filter(|&&x| x == 0.0).count() as f64;
                    return Ok(d.iter().map(|&x| if x == 0.0 { 1.0 / zeros } else { 0.0 }).collect());
                }
                let inv: Vec<f64> = d.iter().map(|x| 1.0 / x).collect();
                let total: f64 = inv.iter().sum();
                Ok(inv.into_iter().map(|x| x / total).collect())
            }
        }
    }

    /// Prediction for an unseen subject: the fixed part plus the weighted
    /// as-if random effects. The variance is that of the weighted mixture;
    /// under [`NewSubjectRule::Fixed`] it is the prior `v₁ + σ²`.
    pub fn predict_unseen(&self, fixed_pred: f64, phi_star: &[f64], rule: NewSubjectRule) -> Result<(f64, f64)> {
        let w = self.new_subject_weights(phi_star, rule)?;
        if w.is_empty() {
            self.standardize(phi_star)?;
            let s2 = self.kernel.sigma * self.kernel.sigma;
            return Ok((fixed_pred, self.kernel.v1 + s2));
        }
        let preds = self.as_if_predictions(phi_star)?;
        let means: Vec<f64> = preds.iter().map(|p| p.0).collect();
        let mean = predict_new_subject(fixed_pred, &means, Some(&w))?;
        let m = mean - fixed_pred;
        let second: f64 = preds.iter().zip(&w).map(|((pm, pv), w)| w * (pv + pm * pm)).sum();
        Ok((mean, (second - m * m).max(0.0)))
    }
}

/// `fixed_pred + Σ wᵢ ŷᵢ` over per-subject as-if predictions. Weights
/// default to uniform; an empty list gives `fixed_pred`.
pub fn predict_new_subject(fixed_pred: f64, preds: &[f64], weights: Option<&[f64]>) -> Result<f64> {
    if preds.is_empty() {
        return Ok(fixed_pred);
    }
    let uniform = vec![1.0 / preds.len() as f64; preds.len()];
    let w = weights.unwrap_or(&uniform);
    if w.len() != preds.len() {
        return Err(invalid("one weight per subject is required"));
    }
    if w.iter().any(|&x| !(x >= 0.0) || !x.is_finite()) || (w.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(invalid("weights must be nonnegative and sum to 1"));
    }
    Ok(fixed_pred + w.iter().zip(preds).map(|(w, p)| w * p).sum::<f64>())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackfitOptions {
    pub flars: FlarsOptions,
    pub gp: GpFitOptions,
    pub tol: f64,
    pub max_sweeps: usize,
    /// Keeps the kernel fixed instead of re-estimating it each sweep.
    pub fixed_kernel: Option<Kernel>,
}

impl Default for BackfitOptions {
    fn default() -> Self {
        BackfitOptions {
            flars: FlarsOptions::default(),
            gp: GpFitOptions::default(),
            tol: 1e-6,
            max_sweeps: 50,
            fixed_kernel: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedFit {
    pub fixed: FittedModel,
    pub gp: GpModel,
    pub n_backfit_iters: usize,
    pub converged: bool,
    /// `‖y − f̂ − ĝ‖² + σ²·αᵀcα` after each sweep.
    pub objective: Vec<f64>,
    /// Training RSS after each sweep.
    pub rss: Vec<f64>,
}

/// Fixed-effects fit on an already selected candidate set: the fLARS path
/// is run to its end so every candidate enters.
pub fn refit_fixed(y: &DVector<f64>, cands: &CandidateSet, opts: &FlarsOptions) -> Result<FittedModel> {
    let opts = FlarsOptions {
        stop: StopRule::MaxIter,
        kappa: None,
        max_iter: None,
        ..opts.clone()
    };
    Ok(run_flars(y, cands, &opts)?.2)
}

fn gp_step(
    r: &DVector<f64>,
    phi: &DMatrix<f64>,
    subjects: &SubjectIndex,
    opts: &BackfitOptions,
    previous: Option<&Kernel>,
) -> Result<GpModel> {
    match (&opts.fixed_kernel, previous) {
        (Some(k), _) => GpModel::new(phi, r, subjects.clone(), k.clone()),
        (None, None) => GpModel::fit(phi, r, subjects.clone(), &opts.gp),
        (None, Some(prev)) => {
            let mut m = GpModel::new(phi, r, subjects.clone(), prev.clone())?;
            m.kernel = refine_hyperparameters(&m.train_phi, r, &m.subjects, prev, &opts.gp)?;
            Ok(m)
        }
    }
}

/// Alternates the fixed-effects fit on `y − ĝ` and the random-effects fit on
/// `y − f̂`, starting from the fixed-only fit, until the fitted values
/// settle. The kernel is estimated from several starts in the first sweep
/// and refined from the previous estimate afterwards. Divergence is
/// reported through `converged = false`.
pub fn backfit(
    y: &DVector<f64>,
    cands: &CandidateSet,
    phi: &DMatrix<f64>,
    subjects: &SubjectIndex,
    opts: &BackfitOptions,
) -> Result<MixedFit> {
    if y.len() != cands.n() || phi.nrows() != y.len() || subjects.n_rows() != y.len() {
        return Err(invalid("response, candidates, covariates and subjects differ in length"));
    }
    let mut fixed = refit_fixed(y, cands, &opts.flars)?;
    let mut f_hat = fixed.predict(cands)?;
    let mut total_prev: Option<DVector<f64>> = None;
    let mut objective = Vec::new();
    let mut rss = Vec::new();
    let mut converged = false;
    let mut increases = 0;
    let mut sweeps = 0;
    let mut kernel = None;
    while sweeps < opts.max_sweeps {
        sweeps += 1;
        let gp = gp_step(&(y - &f_hat), phi, subjects, opts, kernel.as_ref())?;
        let (g_hat, _) = gp.fit_g()?;
        fixed = refit_fixed(&(y - &g_hat), cands, &opts.flars)?;
        f_hat = fixed.predict(cands)?;
        let total = &f_hat + &g_hat;
        let res = y - &total;
        rss.push(res.norm_squared());
        let obj = res.norm_squared() + gp.roughness()?;
        if objective.last().is_some_and(|&prev| obj > prev * (1.0 + 1e-12)) {
            increases += 1;
        } else {
            increases = 0;
        }
        objective.push(obj);
        kernel = Some(gp.kernel.clone());
        if let Some(prev) = &total_prev {
            let change = (&total - prev).norm() / prev.norm().max(f64::MIN_POSITIVE);
            if change < opts.tol {
                converged = true;
                break;
            }
        }
        if increases >= 3 {
            break;
        }
        total_prev = Some(total);
    }
    let r = y - &f_hat;
    let gp = match kernel {
        Some(k) => GpModel::new(phi, &r, subjects.clone(), k)?,
        None => gp_step(&r, phi, subjects, opts, None)?,
    };
    Ok(MixedFit {
        fixed,
        gp,
        n_backfit_iters: sweeps,
        converged,
        objective,
        rss,
    })
}
