//! Small dense solves shared by the estimators and the identification oracle.

use nalgebra::{DMatrix, DVector};

/// Solves fail when `sigma_min < SINGULAR_RTOL * sigma_max`.
pub const SINGULAR_RTOL: f64 = 1e-10;
/// Solves succeed but flag `condition_warning` below this ratio.
pub const WARN_RTOL: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SingularValues {
    pub smallest: f64,
    pub largest: f64,
}

impl SingularValues {
    pub fn ratio(&self) -> f64 {
        if self.largest > 0.0 {
            self.smallest / self.largest
        } else {
            0.0
        }
    }
}

#[derive(Debug, Clone)]
pub struct CheckedSolution {
    pub x: DVector<f64>,
    pub singular_values: SingularValues,
    pub condition_warning: bool,
}

pub fn matrix_from_rows(rows: &[Vec<f64>]) -> DMatrix<f64> {
    let nrows = rows.len();
    let ncols = rows.first().map_or(0, Vec::len);
    DMatrix::from_fn(nrows, ncols, |i, j| rows[i][j])
}

pub fn matrix_to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect()).collect()
}

pub fn singular_values(m: &DMatrix<f64>) -> SingularValues {
    let sv = m.singular_values();
    let largest = sv.iter().copied().fold(0.0, f64::max);
    let smallest = sv.iter().copied().fold(f64::INFINITY, f64::min);
    SingularValues { smallest, largest }
}

/// Solves the square system `m x = b`, refusing numerically singular `m`.
///
/// Returns `Err` carrying the singular values when the relative gap falls
/// below [`SINGULAR_RTOL`].
pub fn solve_square(m: &DMatrix<f64>, b: &DVector<f64>) -> Result<CheckedSolution, SingularValues> {
    assert!(m.is_square() && m.nrows() == b.len());
    let svd = m.clone().svd(true, true);
    let largest = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let smallest = svd.singular_values.iter().copied().fold(f64::INFINITY, f64::min);
    let singular_values = SingularValues { smallest, largest };
    if !(largest > 0.0) || !(smallest >= SINGULAR_RTOL * largest) {
        return Err(singular_values);
    }
    // LU is more accurate than the SVD back-substitution for well-posed systems.
    let x = match m.clone().lu().solve(b) {
        Some(x) => x,
        None => svd.solve(b, 0.0).map_err(|_| singular_values)?,
    };
    Ok(CheckedSolution { x, singular_values, condition_warning: smallest < WARN_RTOL * largest })
}

/// Minimum-norm least-squares solution of `a x = b` via the pseudo-inverse.
///
/// Singular values below `rtol * sigma_max` are treated as zero.
pub fn min_norm_lstsq(a: &DMatrix<f64>, b: &DVector<f64>, rtol: f64) -> DVector<f64> {
    let svd = a.clone().svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let largest = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let cutoff = rtol * largest;
    let utb = u.transpose() * b;
    let mut scaled = DVector::zeros(svd.singular_values.len());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff && s > 0.0 {
            scaled[i] = utb[i] / s;
        }
    }
    v_t.transpose() * scaled
}

/// Numerical rank: count of singular values above `rtol * sigma_max`.
pub fn rank(a: &DMatrix<f64>, rtol: f64) -> usize {
    let sv = a.singular_values();
    let largest = sv.iter().copied().fold(0.0, f64::max);
    if largest == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rtol * largest).count()
}

/// Orthonormal basis (as columns) of the null space of `a`.
pub fn null_space(a: &DMatrix<f64>, rtol: f64) -> DMatrix<f64> {
    let ncols = a.ncols();
    // Pad to at least square so the thin SVD exposes every right singular vector.
    let padded = if a.nrows() < ncols {
        let mut p = DMatrix::zeros(ncols, ncols);
        p.view_mut((0, 0), (a.nrows(), ncols)).copy_from(a);
        p
    } else {
        a.clone()
    };
    let svd = padded.svd(false, true);
    let v_t = svd.v_t.expect("v_t requested");
    let largest = svd.singular_values.iter().copied().fold(0.0, f64::max);
    let null_rows: Vec<usize> = svd.singular_values.iter().enumerate().filter(|(_, &s)| s <= rtol * largest).map(|(i, _)| i).collect();
    DMatrix::from_fn(ncols, null_rows.len(), |i, j| v_t[(null_rows[j], i)])
}

/// Neumaier-compensated sum.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            carry += (sum - t) + v;
        } else {
            carry += (v - t) + sum;
        }
        sum = t;
    }
    sum + carry
}
