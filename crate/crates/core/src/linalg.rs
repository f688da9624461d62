use nalgebra::{DMatrix, DVector};

/// Solves `a x = b` for symmetric positive semidefinite `a`, adding a ridge
/// `lambda I` (starting at `1e-12` times the diagonal scale) when the Cholesky
/// factorization fails. Returns the ridge that was used.
pub(crate) fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<(DVector<f64>, f64)> {
    if let Some(ch) = a.clone().cholesky() {
        let x = ch.solve(b);
        if x.iter().all(|v| v.is_finite()) {
            return Some((x, 0.0));
        }
    }
    let scale = a
        .diagonal()
        .iter()
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1.0);
    let mut ridge = 1e-12 * scale;
    for _ in 0..12 {
        let mut reg = a.clone();
        for i in 0..reg.nrows() {
            reg[(i, i)] += ridge;
        }
        if let Some(ch) = reg.cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some((x, ridge));
            }
        }
        ridge *= 100.0;
    }
    None
}

/// 2-norm condition number of a symmetric matrix from its eigenvalues.
pub(crate) fn symmetric_condition(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let max = eig.eigenvalues.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let min = eig
        .eigenvalues
        .iter()
        .fold(f64::INFINITY, |m, v| m.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

pub(crate) fn inf_norm(v: &[f64]) -> f64 {
    v.iter().fold(0.0f64, |m, x| m.max(x.abs()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_spd_and_regularizes_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 1.0, 1.0, 2.0]);
        let (x, ridge) = solve_psd(&a, &DVector::from_vec(vec![3.0, 3.0])).unwrap();
        assert_eq!(ridge, 0.0);
        assert!((x[0] - 1.0).abs() < 1e-14 && (x[1] - 1.0).abs() < 1e-14);

        let s = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let (x, ridge) = solve_psd(&s, &DVector::from_vec(vec![1.0, 1.0])).unwrap();
        assert!(ridge > 0.0);
        assert!(x.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn condition_numbers() {
        let a = DMatrix::from_row_slice(2, 2, &[4.0, 0.0, 0.0, 1.0]);
        assert!((symmetric_condition(&a) - 4.0).abs() < 1e-12);
        assert_eq!(symmetric_condition(&DMatrix::zeros(2, 2)), f64::INFINITY);
    }
}
