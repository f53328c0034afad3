//! Small dense linear-algebra helpers shared by the modules.

use nalgebra::{DMatrix, DVector};

/// Largest singular value.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.max()
}

/// Smallest singular value.
pub fn min_singular(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    m.clone().svd(false, false).singular_values.min()
}

/// Block-diagonal matrix with the given square or rectangular blocks.
pub fn block_diag(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(*b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

/// Flip `v` so that its first entry with magnitude above `tol` is positive.
pub fn fix_sign(v: &mut DVector<f64>, tol: f64) {
    if let Some(x) = v.iter().find(|x| x.abs() > tol) {
        if *x < 0.0 {
            v.neg_mut();
        }
    }
}

/// Modified Gram–Schmidt on `vectors` for the inner product given by `gram`
/// (the identity when `None`). Vectors whose residual falls below `tol` are dropped.
pub fn gram_schmidt(
    vectors: &[DVector<f64>],
    gram: Option<&DMatrix<f64>>,
    tol: f64,
) -> Vec<DVector<f64>> {
    let ip = |a: &DVector<f64>, b: &DVector<f64>| match gram {
        Some(g) => (a.transpose() * g * b)[(0, 0)],
        None => a.dot(b),
    };
    let mut out: Vec<DVector<f64>> = Vec::new();
    for v in vectors {
        let mut w = v.clone();
        for e in &out {
            let c = ip(e, &w);
            w -= e * c;
        }
        let n = ip(&w, &w).max(0.0).sqrt();
        if n > tol {
            w /= n;
            fix_sign(&mut w, 1e-12);
            out.push(w);
        }
    }
    out
}

/// Matrix whose columns are `cols`.
pub fn from_columns(cols: &[DVector<f64>], nrows: usize) -> DMatrix<f64> {
    if cols.is_empty() {
        return DMatrix::zeros(nrows, 0);
    }
    DMatrix::from_columns(cols)
}

/// Torus difference `a - b` reduced to the fundamental cube `[-1/2, 1/2)^d`.
pub fn torus_diff(a: &[f64], b: &[f64]) -> DVector<f64> {
    DVector::from_iterator(
        a.len(),
        a.iter().zip(b).map(|(x, y)| {
            let d = x - y;
            d - d.round()
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gram_schmidt_orthonormal_for_weighted_product() {
        let g = DMatrix::from_row_slice(2, 2, &[4.0, 1.0, 1.0, 2.0]);
        let vs = vec![DVector::from_vec(vec![1.0, 0.0]), DVector::from_vec(vec![0.0, 1.0])];
        let out = gram_schmidt(&vs, Some(&g), 1e-12);
        let b = from_columns(&out, 2);
        let id = b.transpose() * &g * &b;
        assert!((id - DMatrix::identity(2, 2)).norm() < 1e-12);
    }

    #[test]
    fn torus_diff_wraps() {
        let d = torus_diff(&[0.95, 0.1], &[0.05, 0.9]);
        assert!((d[0] + 0.1).abs() < 1e-12 && (d[1] - 0.2).abs() < 1e-12);
    }

    #[test]
    fn spectral_norm_of_diagonal() {
        let m = DMatrix::from_diagonal(&DVector::from_vec(vec![3.0, -5.0, 1.0]));
        assert!((spectral_norm(&m) - 5.0).abs() < 1e-12);
        assert!((min_singular(&m) - 1.0).abs() < 1e-12);
    }
}
