//! Small dense complex linear algebra used across the crate: spectral norms,
//! SVD-based null spaces, canonical bases and subspace membership.

use nalgebra::{DMatrix, DVector};
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;
/// Coordinate vector of an algebra or bimodule element.
pub type Elem = DVector<C64>;
pub type CMat = DMatrix<C64>;

/// Relative rank threshold for null-space decisions.
pub const RANK_THRESHOLD: f64 = 1e-8;
/// Singular values (relative) in this band make a rank decision ambiguous.
pub const RANK_AMBIGUOUS_LOW: f64 = 1e-10;
pub const RANK_AMBIGUOUS_HIGH: f64 = 1e-6;

pub fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

pub fn zeros(n: usize) -> Elem {
    Elem::zeros(n)
}

/// Euclidean norm of a coordinate vector.
pub fn l2(v: &Elem) -> f64 {
    v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()
}

/// Entrywise max-modulus of a matrix.
pub fn max_abs(m: &CMat) -> f64 {
    m.iter().fold(0.0_f64, |acc, z| acc.max(z.norm()))
}

/// Singular values sorted in descending order.
pub fn singular_values(m: &CMat) -> Vec<f64> {
    if m.nrows() == 0 || m.ncols() == 0 {
        return Vec::new();
    }
    let mut s: Vec<f64> = m.clone().singular_values().iter().copied().collect();
    s.sort_by(|a, b| b.total_cmp(a));
    s
}

/// Largest singular value (the ℓ²→ℓ² operator norm).
pub fn spectral_norm(m: &CMat) -> f64 {
    singular_values(m).first().copied().unwrap_or(0.0)
}

/// Result of an SVD null-space computation.
#[derive(Debug, Clone)]
pub struct NullSpace {
    /// Orthonormal basis of the null space, one column per vector.
    pub basis: CMat,
    /// Full singular spectrum of the system, descending, including the
    /// implicit zeros contributed by padding when the system is wide.
    pub spectrum: Vec<f64>,
}

/// Null space of `m` with rank threshold `RANK_THRESHOLD` relative to the
/// largest singular value. Fails with `RankUncertain` if any singular value
/// falls in the ambiguous band.
pub fn null_space(m: &CMat) -> Result<NullSpace> {
    let n = m.ncols();
    if n == 0 {
        return Ok(NullSpace { basis: CMat::zeros(0, 0), spectrum: Vec::new() });
    }
    // Thin SVD only yields min(rows, cols) right vectors; pad wide systems.
    let padded = if m.nrows() < n {
        let mut p = CMat::zeros(n, n);
        p.view_mut((0, 0), (m.nrows(), n)).copy_from(m);
        p
    } else {
        m.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let spectrum: Vec<f64> = order.iter().map(|&i| svd.singular_values[i]).collect();
    let smax = spectrum.first().copied().unwrap_or(0.0);

    if smax == 0.0 {
        return Ok(NullSpace { basis: CMat::identity(n, n), spectrum });
    }
    if spectrum.iter().any(|&s| {
        let r = s / smax;
        (RANK_AMBIGUOUS_LOW..=RANK_AMBIGUOUS_HIGH).contains(&r)
    }) {
        return Err(Error::RankUncertain { spectrum });
    }
    let null_rows: Vec<usize> = order
        .iter()
        .copied()
        .filter(|&i| svd.singular_values[i] / smax < RANK_THRESHOLD)
        .collect();
    let mut basis = CMat::zeros(n, null_rows.len());
    for (col, &row) in null_rows.iter().enumerate() {
        for k in 0..n {
            basis[(k, col)] = v_t[(row, k)].conj();
        }
    }
    Ok(NullSpace { basis, spectrum })
}

/// Canonical orthonormal basis of the column span of `cols`: reduced row
/// echelon form with max-modulus partial pivoting in column order, then
/// modified Gram-Schmidt. Independent of which spanning set was passed in.
pub fn canonical_basis(cols: &CMat) -> CMat {
    let k = cols.ncols();
    let n = cols.nrows();
    if k == 0 {
        return CMat::zeros(n, 0);
    }
    let mut r = cols.transpose(); // k x n, rows span the space
    let mut pivot_row = 0;
    for col in 0..n {
        if pivot_row == k {
            break;
        }
        let (best, best_abs) = (pivot_row..k)
            .map(|i| (i, r[(i, col)].norm()))
            .fold((pivot_row, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
        if best_abs < 1e-10 {
            continue;
        }
        r.swap_rows(pivot_row, best);
        let p = r[(pivot_row, col)];
        for j in 0..n {
            r[(pivot_row, j)] /= p;
        }
        for i in 0..k {
            if i != pivot_row {
                let factor = r[(i, col)];
                if factor != C64::new(0.0, 0.0) {
                    for j in 0..n {
                        let v = r[(pivot_row, j)];
                        r[(i, j)] -= factor * v;
                    }
                }
            }
        }
        pivot_row += 1;
    }
    let rank = pivot_row;
    let mut out: Vec<Elem> = Vec::with_capacity(rank);
    for i in 0..rank {
        let mut v: Elem = r.row(i).transpose();
        for q in &out {
            let proj = q.dotc(&v);
            v -= q * proj;
        }
        let nv = l2(&v);
        out.push(v / C64::new(nv, 0.0));
    }
    CMat::from_columns(&out)
}

/// Distance from `v` to the column span of `basis` (any spanning set).
pub fn span_residual(basis: &CMat, v: &Elem) -> f64 {
    if basis.ncols() == 0 {
        return l2(v);
    }
    let q = orthonormalize(basis);
    let mut r = v.clone();
    for j in 0..q.ncols() {
        let col = q.column(j).into_owned();
        let proj = col.dotc(&r);
        r -= col * proj;
    }
    l2(&r)
}

/// Orthonormal basis of the column span via SVD (drops dependent columns).
pub fn orthonormalize(m: &CMat) -> CMat {
    if m.ncols() == 0 {
        return m.clone();
    }
    let svd = m.clone().svd(true, false);
    let u = svd.u.expect("u requested");
    let smax = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let keep: Vec<_> = (0..svd.singular_values.len())
        .filter(|&i| smax > 0.0 && svd.singular_values[i] / smax > RANK_THRESHOLD)
        .map(|i| u.column(i).into_owned())
        .collect();
    if keep.is_empty() {
        return CMat::zeros(m.nrows(), 0);
    }
    CMat::from_columns(&keep)
}

/// Numerical rank with the crate-wide relative threshold.
pub fn rank(m: &CMat) -> usize {
    let s = singular_values(m);
    let smax = s.first().copied().unwrap_or(0.0);
    if smax == 0.0 {
        return 0;
    }
    s.iter().filter(|&&x| x / smax > RANK_THRESHOLD).count()
}

/// Flatten a matrix column-major into a coordinate vector.
pub fn vec_of(m: &CMat) -> Elem {
    Elem::from_iterator(m.len(), m.iter().copied())
}

/// Inverse of [`vec_of`].
pub fn mat_of(v: &[C64], rows: usize, cols: usize) -> CMat {
    CMat::from_column_slice(rows, cols, v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn null_space_of_rank_one() {
        let m = CMat::from_row_slice(1, 3, &[c(1.0, 0.0), c(1.0, 0.0), c(0.0, 0.0)]);
        let ns = null_space(&m).unwrap();
        assert_eq!(ns.basis.ncols(), 2);
        for j in 0..2 {
            assert!(l2(&(&m * ns.basis.column(j))) < 1e-14);
        }
    }

    #[test]
    fn ambiguous_rank_is_reported() {
        let m = CMat::from_diagonal(&DVector::from_vec(vec![c(1.0, 0.0), c(1e-8, 0.0)]));
        match null_space(&m) {
            Err(Error::RankUncertain { spectrum }) => assert_eq!(spectrum.len(), 2),
            other => panic!("expected RankUncertain, got {other:?}"),
        }
    }

    #[test]
    fn canonical_basis_ignores_spanning_set() {
        let a = CMat::from_columns(&[
            Elem::from_vec(vec![c(1.0, 0.0), c(0.0, 1.0), c(0.0, 0.0)]),
            Elem::from_vec(vec![c(0.0, 0.0), c(1.0, 0.0), c(2.0, 0.0)]),
        ]);
        let mix = CMat::from_columns(&[
            a.column(0) * c(0.0, 2.0) + a.column(1),
            a.column(1) * c(-3.0, 1.0),
        ]);
        let b1 = canonical_basis(&a);
        let b2 = canonical_basis(&mix);
        assert!(max_abs(&(b1 - b2)) < 1e-12);
    }

    #[test]
    fn span_residual_detects_outsiders() {
        let b = CMat::from_columns(&[Elem::from_vec(vec![c(1.0, 0.0), c(0.0, 0.0)])]);
        assert!(span_residual(&b, &Elem::from_vec(vec![c(3.0, 1.0), c(0.0, 0.0)])) < 1e-15);
        assert!((span_residual(&b, &Elem::from_vec(vec![c(0.0, 0.0), c(0.0, 2.0)])) - 2.0).abs() < 1e-15);
    }

    #[test]
    fn spectral_norm_of_nilpotent_unit() {
        let mut m = CMat::zeros(2, 2);
        m[(0, 1)] = c(1.0, 0.0);
        assert!((spectral_norm(&m) - 1.0).abs() < 1e-15);
    }
}
