use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Eigenvalues below this fraction of the largest are treated as zero.
const RANK_TOL: f64 = 1e-13;

/// Thin SVD `Xc = U diag(sqrt(d)) V^T` of a column-centred design, obtained
/// from the eigendecomposition of whichever Gram matrix is smaller. Every
/// ridge quantity (coefficients, hat diagonal, leverage) is a cheap
/// function of this basis for any penalty.
#[derive(Debug, Clone)]
pub(crate) struct RidgeBasis {
    pub n: usize,
    pub p: usize,
    pub col_means: DVector<f64>,
    /// n x r
    pub u: DMatrix<f64>,
    /// p x r
    pub v: DMatrix<f64>,
    /// squared singular values, length r
    pub d: DVector<f64>,
}

impl RidgeBasis {
    /// Centres the columns of `x` and decomposes.
    pub fn new(x: &DMatrix<f64>) -> Result<Self> {
        let (n, p) = x.shape();
        if n < 2 {
            return Err(Error::validation("design", "at least two rows are required"));
        }
        if p == 0 {
            return Err(Error::validation("design", "at least one column is required"));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("design", "non-finite entry"));
        }
        let col_means = DVector::from_iterator(p, x.column_iter().map(|c| c.mean()));
        let mut xc = x.clone();
        for (j, mut col) in xc.column_iter_mut().enumerate() {
            col.add_scalar_mut(-col_means[j]);
        }
        Ok(Self::from_centered(xc, col_means))
    }

    pub fn from_centered(xc: DMatrix<f64>, col_means: DVector<f64>) -> Self {
        let (n, p) = xc.shape();
        if p <= n {
            let gram = xc.transpose() * &xc;
            let eig = SymmetricEigen::new(gram);
            let keep = kept(&eig.eigenvalues);
            let d = DVector::from_iterator(keep.len(), keep.iter().map(|&k| eig.eigenvalues[k]));
            let v = eig.eigenvectors.select_columns(&keep);
            let mut u = &xc * &v;
            for (k, mut col) in u.column_iter_mut().enumerate() {
                col /= d[k].sqrt();
            }
            RidgeBasis { n, p, col_means, u, v, d }
        } else {
            let gram = &xc * xc.transpose();
            let eig = SymmetricEigen::new(gram);
            let keep = kept(&eig.eigenvalues);
            let d = DVector::from_iterator(keep.len(), keep.iter().map(|&k| eig.eigenvalues[k]));
            let u = eig.eigenvectors.select_columns(&keep);
            let mut v = xc.transpose() * &u;
            for (k, mut col) in v.column_iter_mut().enumerate() {
                col /= d[k].sqrt();
            }
            RidgeBasis { n, p, col_means, u, v, d }
        }
    }

    pub fn rank(&self) -> usize {
        self.d.len()
    }

    /// Projections `U^T yc` for a centred response.
    pub fn project(&self, yc: &DVector<f64>) -> DVector<f64> {
        self.u.transpose() * yc
    }

    /// Ridge coefficients from precomputed projections.
    pub fn coefficients(&self, proj: &DVector<f64>, lambda: f64) -> DVector<f64> {
        let gamma = DVector::from_iterator(
            self.rank(),
            (0..self.rank()).map(|k| proj[k] * self.d[k].sqrt() / (self.d[k] + lambda)),
        );
        &self.v * gamma
    }

    /// Shrinkage factors d / (d + lambda).
    pub fn shrinkage(&self, lambda: f64) -> DVector<f64> {
        self.d.map(|d| d / (d + lambda))
    }

    /// Effective degrees of freedom including the unpenalised intercept.
    pub fn edf(&self, lambda: f64) -> f64 {
        1.0 + self.shrinkage(lambda).sum()
    }

    /// Diagonal of the full hat matrix (intercept included).
    pub fn hat_diag(&self, lambda: f64) -> DVector<f64> {
        let f = self.shrinkage(lambda);
        let inv_n = 1.0 / self.n as f64;
        DVector::from_iterator(
            self.n,
            (0..self.n).map(|i| {
                inv_n
                    + (0..self.rank())
                        .map(|k| self.u[(i, k)] * self.u[(i, k)] * f[k])
                        .sum::<f64>()
            }),
        )
    }
}

fn kept(eigenvalues: &DVector<f64>) -> Vec<usize> {
    let max = eigenvalues.iter().cloned().fold(0.0, f64::max);
    if max <= 0.0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..eigenvalues.len())
        .filter(|&k| eigenvalues[k] > RANK_TOL * max)
        .collect();
    idx.sort_by(|&a, &b| eigenvalues[b].total_cmp(&eigenvalues[a]));
    idx
}
