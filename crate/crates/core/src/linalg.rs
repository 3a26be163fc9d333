//! Small dense linear-algebra helpers shared by the estimators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, LU};

use crate::error::{FlarsError, Result};

/// Reciprocal condition estimate below which a factorization is treated as singular.
const RCOND_SINGULAR: f64 = 1e-14;

/// Factorization of a symmetric positive (semi-)definite system.
///
/// Cholesky is tried first; an LU factorization with partial pivoting is
/// used when the matrix is not numerically positive definite.
#[derive(Clone, Debug)]
pub enum SpdFactor {
    Cholesky(Cholesky<f64, Dyn>),
    Lu(LU<f64, Dyn, Dyn>),
}

impl SpdFactor {
    pub fn new(a: &DMatrix<f64>) -> Result<Self> {
        let n = a.nrows();
        if n == 0 {
            return Err(FlarsError::InvalidArgument("empty system".into()));
        }
        if let Some(chol) = Cholesky::new(a.clone()) {
            let l = chol.l_dirty();
            let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
            for i in 0..n {
                let d = l[(i, i)].abs();
                lo = lo.min(d);
                hi = hi.max(d);
            }
            let rcond = if hi > 0.0 { (lo / hi).powi(2) } else { 0.0 };
            if rcond.is_finite() && rcond > RCOND_SINGULAR {
                return Ok(SpdFactor::Cholesky(chol));
            }
        }
        let lu = LU::new(a.clone());
        let u = lu.u();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            let d = u[(i, i)].abs();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        if !(hi > 0.0) || !(lo / hi > RCOND_SINGULAR) {
            return Err(FlarsError::SingularMatrix(format!(
                "{n}x{n} system is numerically singular"
            )));
        }
        Ok(SpdFactor::Lu(lu))
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        match self {
            SpdFactor::Cholesky(c) => c.solve(b),
            // invertibility was checked at construction
            SpdFactor::Lu(lu) => lu.solve(b).unwrap_or_else(|| DVector::zeros(b.len())),
        }
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        match self {
            SpdFactor::Cholesky(c) => c.solve(b),
            SpdFactor::Lu(lu) => lu
                .solve(b)
                .unwrap_or_else(|| DMatrix::zeros(b.nrows(), b.ncols())),
        }
    }

    pub fn is_cholesky(&self) -> bool {
        matches!(self, SpdFactor::Cholesky(_))
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Sample standard deviation (n - 1 denominator).
pub fn sd(v: &[f64]) -> f64 {
    let n = v.len();
    if n < 2 {
        return 0.0;
    }
    let m = mean(v);
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
}

pub fn variance(v: &[f64]) -> f64 {
    sd(v).powi(2)
}

/// Pearson correlation; zero when either side is constant.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let ma = mean(a);
    let mb = mean(b);
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return 0.0;
    }
    sab / (saa.sqrt() * sbb.sqrt())
}

pub fn center_columns(m: &mut DMatrix<f64>) -> Vec<f64> {
    let n = m.nrows() as f64;
    let mut means = Vec::with_capacity(m.ncols());
    for mut col in m.column_iter_mut() {
        let mu = col.sum() / n;
        col.add_scalar_mut(-mu);
        means.push(mu);
    }
    means
}

pub fn trace(m: &DMatrix<f64>) -> f64 {
    m.diagonal().sum()
}

/// tr(A B) for square matrices of equal size without forming the product.
pub fn trace_of_product(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let n = a.nrows();
    let mut s = 0.0;
    for i in 0..n {
        for k in 0..n {
            s += a[(i, k)] * b[(k, i)];
        }
    }
    s
}

/// Places square blocks on the diagonal of a new matrix.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let d: usize = blocks.iter().map(|b| b.nrows()).sum();
    let mut out = DMatrix::zeros(d, d);
    let mut off = 0;
    for b in blocks {
        let k = b.nrows();
        out.view_mut((off, off), (k, k)).copy_from(b);
        off += k;
    }
    out
}

pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let d: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(n, d);
    let mut off = 0;
    for b in blocks {
        out.view_mut((0, off), (n, b.ncols())).copy_from(*b);
        off += b.ncols();
    }
    out
}
