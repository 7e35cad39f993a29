//! Thin SVD with a deterministic ordering and sign convention.

use nalgebra::{DMatrix, DVector, SVD};

use crate::error::{Error, Result};

/// Economy-size SVD `m = u * diag(singular_values) * v^T`.
///
/// Singular values are sorted in descending order. Each column of `u` has its
/// largest-magnitude entry positive (first index wins on ties), and the
/// matching column of `v` is flipped with it.
#[derive(Debug, Clone)]
pub struct ThinSvd {
    pub u: DMatrix<f64>,
    pub singular_values: DVector<f64>,
    pub v: DMatrix<f64>,
}

impl ThinSvd {
    pub fn rank_tol(&self, rel: f64) -> usize {
        let smax = self.singular_values.get(0).copied().unwrap_or(0.0);
        if smax <= 0.0 {
            return 0;
        }
        self.singular_values
            .iter()
            .take_while(|&&s| s > rel * smax)
            .count()
    }

    /// Sum of the leading `r` rank-one terms.
    pub fn reconstruct(&self, r: usize) -> DMatrix<f64> {
        let r = r.min(self.singular_values.len());
        let mut out = DMatrix::zeros(self.u.nrows(), self.v.nrows());
        for k in 0..r {
            let s = self.singular_values[k];
            if s == 0.0 {
                continue;
            }
            out.ger(s, &self.u.column(k), &self.v.column(k), 1.0);
        }
        out
    }
}

pub fn thin_svd(m: &DMatrix<f64>) -> Result<ThinSvd> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry in SVD input".into()));
    }
    let svd = SVD::try_new(m.clone(), true, true, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let (Some(u), Some(v_t)) = (svd.u, svd.v_t) else {
        return Err(Error::Numerical("SVD factors missing".into()));
    };
    let s = svd.singular_values;
    let k = s.len();

    let mut order: Vec<usize> = (0..k).collect();
    order.sort_by(|&a, &b| s[b].total_cmp(&s[a]));

    let mut u_out = DMatrix::zeros(u.nrows(), k);
    let mut v_out = DMatrix::zeros(v_t.ncols(), k);
    let mut s_out = DVector::zeros(k);
    for (dst, &src) in order.iter().enumerate() {
        let mut ucol = u.column(src).clone_owned();
        let mut vcol = v_t.row(src).transpose();
        let mut best = 0usize;
        for i in 1..ucol.len() {
            if ucol[i].abs() > ucol[best].abs() {
                best = i;
            }
        }
        if ucol[best] < 0.0 {
            ucol.neg_mut();
            vcol.neg_mut();
        }
        u_out.set_column(dst, &ucol);
        v_out.set_column(dst, &vcol);
        s_out[dst] = s[src].max(0.0);
    }
    Ok(ThinSvd {
        u: u_out,
        singular_values: s_out,
        v: v_out,
    })
}

pub fn singular_values(m: &DMatrix<f64>) -> Result<DVector<f64>> {
    if m.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numerical("non-finite entry in SVD input".into()));
    }
    let svd = SVD::try_new(m.clone(), false, false, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numerical("SVD did not converge".into()))?;
    let mut s: Vec<f64> = svd.singular_values.iter().map(|x| x.max(0.0)).collect();
    s.sort_by(|a, b| b.total_cmp(a));
    Ok(DVector::from_vec(s))
}

pub fn nuclear_norm(m: &DMatrix<f64>) -> Result<f64> {
    Ok(singular_values(m)?.sum())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sorted_and_signed() {
        let m = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, -3.0, 0.0, 0.0]);
        let svd = thin_svd(&m).unwrap();
        assert_eq!(svd.singular_values.as_slice(), &[3.0, 1.0]);
        assert!(svd.u[(1, 0)] > 0.0);
        assert!((svd.reconstruct(2) - &m).norm() < 1e-14);
    }

    #[test]
    fn wide_matrix_reconstructs() {
        let m = DMatrix::from_fn(4, 9, |i, j| ((i * 7 + j * 3) % 5) as f64 - 2.0);
        let svd = thin_svd(&m).unwrap();
        assert_eq!(svd.u.shape(), (4, 4));
        assert_eq!(svd.v.shape(), (9, 4));
        assert!((svd.reconstruct(4) - &m).norm() < 1e-12);
    }

    #[test]
    fn rejects_nan() {
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = f64::NAN;
        assert!(matches!(thin_svd(&m), Err(Error::Numerical(_))));
    }
}
