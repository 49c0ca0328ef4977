//! Small dense solvers for (penalized, weighted) least squares.
//!
//! Columns that are numerically aliased with earlier columns are dropped and get a
//! zero coefficient, mirroring how classical GLM software treats rank deficiency.

use nalgebra::{DMatrix, DVector};

/// Relative pivot tolerance on the squared residual norm of a column.
const ALIAS_TOL: f64 = 1e-10;

/// Solves `(A + diag(penalty)) b = rhs` for symmetric positive semi-definite `A`
/// by a Cholesky factorisation in column order, dropping columns whose pivot is
/// negligible relative to their diagonal.
pub(crate) fn solve_psd_dropping(a: &DMatrix<f64>, penalty: &[f64], rhs: &DVector<f64>) -> DVector<f64> {
    let q = a.nrows();
    let mut l = DMatrix::<f64>::zeros(q, q);
    let mut kept = vec![false; q];
    for j in 0..q {
        let ajj = a[(j, j)] + penalty[j];
        if !(ajj > 0.0) {
            continue;
        }
        let mut d = ajj;
        for k in 0..j {
            if kept[k] {
                d -= l[(j, k)] * l[(j, k)];
            }
        }
        if d <= ALIAS_TOL * ajj {
            continue;
        }
        let ljj = d.sqrt();
        l[(j, j)] = ljj;
        kept[j] = true;
        for i in (j + 1)..q {
            let mut s = a[(i, j)];
            for k in 0..j {
                if kept[k] {
                    s -= l[(i, k)] * l[(j, k)];
                }
            }
            l[(i, j)] = s / ljj;
        }
    }
    // forward: L z = rhs
    let mut z = DVector::zeros(q);
    for i in 0..q {
        if !kept[i] {
            continue;
        }
        let mut s = rhs[i];
        for k in 0..i {
            if kept[k] {
                s -= l[(i, k)] * z[k];
            }
        }
        z[i] = s / l[(i, i)];
    }
    // backward: L' b = z
    let mut b = DVector::zeros(q);
    for i in (0..q).rev() {
        if !kept[i] {
            continue;
        }
        let mut s = z[i];
        for k in (i + 1)..q {
            if kept[k] {
                s -= l[(k, i)] * b[k];
            }
        }
        b[i] = s / l[(i, i)];
    }
    b
}

/// Indices of a maximal set of linearly independent columns, chosen greedily in
/// column order by modified Gram-Schmidt. Used when there are more columns than rows.
pub(crate) fn independent_columns(z: &DMatrix<f64>) -> Vec<usize> {
    let n = z.nrows();
    let mut basis: Vec<DVector<f64>> = Vec::new();
    let mut keep = Vec::new();
    for j in 0..z.ncols() {
        if basis.len() >= n {
            break;
        }
        let mut v: DVector<f64> = z.column(j).into_owned();
        let norm0 = v.norm_squared();
        if norm0 == 0.0 {
            continue;
        }
        for u in &basis {
            let c = u.dot(&v);
            v.axpy(-c, u, 1.0);
        }
        let r = v.norm_squared();
        if r > ALIAS_TOL * norm0 {
            v /= r.sqrt();
            basis.push(v);
            keep.push(j);
        }
    }
    keep
}

/// `z' z`. The explicit transpose routes through the blocked matrix product,
/// which is several times faster than `tr_mul` for tall matrices.
pub(crate) fn gram(z: &DMatrix<f64>) -> DMatrix<f64> {
    z.transpose() * z
}

/// `Z' diag(w) Z` and `Z' diag(w) t`.
pub(crate) fn weighted_normal_equations(
    z: &DMatrix<f64>,
    w: Option<&[f64]>,
    t: &[f64],
) -> (DMatrix<f64>, DVector<f64>) {
    match w {
        None => {
            let tv = DVector::from_column_slice(t);
            (gram(z), z.tr_mul(&tv))
        }
        Some(w) => {
            let root_w = DVector::from_iterator(w.len(), w.iter().map(|v| v.sqrt()));
            let mut zw = z.clone();
            for mut col in zw.column_iter_mut() {
                col.component_mul_assign(&root_w);
            }
            let tw = DVector::from_iterator(t.len(), t.iter().zip(w).map(|(ti, wi)| ti * wi.sqrt()));
            (gram(&zw), zw.tr_mul(&tw))
        }
    }
}
