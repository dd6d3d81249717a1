//! Small numerical helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Neumaier (improved Kahan) compensated sum.
#[derive(Debug, Clone, Copy, Default)]
pub struct CompensatedSum {
    sum: f64,
    comp: f64,
}

impl CompensatedSum {
    pub fn new() -> Self {
        Self::default()
    }

    #[inline]
    pub fn add(&mut self, x: f64) {
        let t = self.sum + x;
        if self.sum.abs() >= x.abs() {
            self.comp += (self.sum - t) + x;
        } else {
            self.comp += (x - t) + self.sum;
        }
        self.sum = t;
    }

    pub fn value(&self) -> f64 {
        self.sum + self.comp
    }
}

impl FromIterator<f64> for CompensatedSum {
    fn from_iter<I: IntoIterator<Item = f64>>(iter: I) -> Self {
        let mut s = Self::new();
        iter.into_iter().for_each(|x| s.add(x));
        s
    }
}

pub fn compensated_sum(values: impl IntoIterator<Item = f64>) -> f64 {
    values.into_iter().collect::<CompensatedSum>().value()
}

/// Median of a non-empty slice (average of the two middle values for even length).
/// Returns NaN for an empty slice.
pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Normal-consistency constant for the median absolute deviation.
pub const MAD_CONSTANT: f64 = 1.4826;

/// Scaled median absolute deviation about the median.
pub fn mad(values: &[f64]) -> f64 {
    let m = median(values);
    let dev: Vec<f64> = values.iter().map(|v| (v - m).abs()).collect();
    MAD_CONSTANT * median(&dev)
}

/// Central finite-difference Jacobian of a gradient map, symmetrised.
///
/// Step for coordinate k is `max(1e-5, 1e-5·|x_k|)`.
pub fn fd_hessian<E>(x: &[f64], mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>, E>) -> Result<DMatrix<f64>, E> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    for k in 0..n {
        let step = (1e-5 * x[k].abs()).max(1e-5);
        xp[k] = x[k] + step;
        let gp = grad(&xp)?;
        xp[k] = x[k] - step;
        let gm = grad(&xp)?;
        xp[k] = x[k];
        for i in 0..n {
            h[(i, k)] = (gp[i] - gm[i]) / (2.0 * step);
        }
    }
    Ok(symmetrize(&h))
}

/// As [`fd_hessian`], switching to forward differences for coordinates whose backward
/// step would cross their lower bound.
pub fn fd_hessian_bounded<E>(
    x: &[f64],
    lower: &[Option<f64>],
    mut grad: impl FnMut(&[f64]) -> Result<Vec<f64>, E>,
) -> Result<DMatrix<f64>, E> {
    let n = x.len();
    let mut h = DMatrix::zeros(n, n);
    let mut xp = x.to_vec();
    let mut g0 = None;
    for k in 0..n {
        let step = (1e-5 * x[k].abs()).max(1e-5);
        xp[k] = x[k] + step;
        let gp = grad(&xp)?;
        let crosses = matches!(lower[k], Some(l) if x[k] - step < l);
        let (gm, width) = if crosses {
            if g0.is_none() {
                xp[k] = x[k];
                g0 = Some(grad(&xp)?);
            }
            (g0.clone().unwrap(), step)
        } else {
            xp[k] = x[k] - step;
            (grad(&xp)?, 2.0 * step)
        };
        xp[k] = x[k];
        for i in 0..n {
            h[(i, k)] = (gp[i] - gm[i]) / width;
        }
    }
    Ok(symmetrize(&h))
}

pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Inverse of a symmetric positive-definite matrix via Cholesky, `None` if not PD.
pub fn spd_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let inv = m.clone().cholesky()?.inverse();
    inv.iter().all(|v| v.is_finite()).then(|| symmetrize(&inv))
}

/// Symmetric square root factor `L` with `L Lᵀ = m` for a PSD matrix; small negative
/// eigenvalues from rounding are clipped to zero.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = symmetrize(m).symmetric_eigen();
    let sqrt_vals = DVector::from_iterator(eig.eigenvalues.len(), eig.eigenvalues.iter().map(|&l| l.max(0.0).sqrt()));
    &eig.eigenvectors * DMatrix::from_diagonal(&sqrt_vals)
}

pub fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}
