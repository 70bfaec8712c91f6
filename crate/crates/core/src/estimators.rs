//! Closed-form surrogate-bridge estimators over cell-fold aggregates.
//!
//! * [`jive_lfold`]: L-fold jackknife IV; instruments each fold's means with
//!   the leave-fold-out means of the same cell.
//! * [`jive_2fold_with_ci`]: the two-fold, scalar-surrogate special case with
//!   a normal-approximation confidence interval.
//! * [`tsls`]: two-stage least squares, i.e. regression of cell means of `Y`
//!   on cell means of `S` through the origin.
//! * [`ols_surrogate_index`]: unit-level regression of `Y` on `S`.
//!
//! Every linear estimator also reports a sandwich covariance for `beta_hat`
//! that the simulation harness uses to build intervals for new cells.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{AggregateGrid, CellFoldAggregate, DataError, Dataset};
use crate::linalg::{self, SingularValues};
use crate::normal::two_sided_multiplier;

/// `jive_2fold_with_ci` refuses `H_K / sqrt(K)` below this.
pub const WEAK_ID_TOL: f64 = 1e-8;

#[derive(Debug, Error)]
pub enum EstimatorError {
    #[error(
        "{matrix} is singular: smallest singular value {smallest:e} vs largest {largest:e} (relative tolerance {tol:e})",
        tol = linalg::SINGULAR_RTOL
    )]
    Singular { matrix: &'static str, smallest: f64, largest: f64 },
    #[error("weak identification: H_K = {h_k:e} over {num_cells} cells (H_K/sqrt(K) must exceed {WEAK_ID_TOL:e}); the interval would be invalid")]
    WeakIdentification { h_k: f64, num_cells: usize },
    #[error(transparent)]
    Data(#[from] DataError),
    #[error("{0}")]
    Invalid(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum EstimatorTag {
    #[serde(rename = "JIVE_LFOLD")]
    JiveLFold,
    #[serde(rename = "JIVE_2FOLD")]
    Jive2Fold,
    #[serde(rename = "TSLS")]
    Tsls,
    #[serde(rename = "OLS")]
    Ols,
}

impl EstimatorTag {
    pub fn as_str(self) -> &'static str {
        match self {
            EstimatorTag::JiveLFold => "JIVE_LFOLD",
            EstimatorTag::Jive2Fold => "JIVE_2FOLD",
            EstimatorTag::Tsls => "TSLS",
            EstimatorTag::Ols => "OLS",
        }
    }
}

impl fmt::Display for EstimatorTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EstimatorTag {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_uppercase().replace('-', "_").as_str() {
            "JIVE_LFOLD" | "JIVE" => Ok(EstimatorTag::JiveLFold),
            "JIVE_2FOLD" | "JIVE2" => Ok(EstimatorTag::Jive2Fold),
            "TSLS" | "2SLS" => Ok(EstimatorTag::Tsls),
            "OLS" => Ok(EstimatorTag::Ols),
            _ => Err(format!("unknown estimator `{s}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateReport {
    pub beta_hat: Vec<f64>,
    pub estimator_tag: EstimatorTag,
    /// The Gram matrix the estimator inverts. For `JIVE_2FOLD` this is the
    /// 1x1 matrix `[H_K]` with `H_K = sum_a S_{a,1} S_{a,2}`.
    pub h_k_matrix: Vec<Vec<f64>>,
    pub ci_lower: Option<f64>,
    pub ci_upper: Option<f64>,
    pub ci_multiplier: Option<f64>,
    pub alpha: Option<f64>,
    pub sigma_eta_hat: Option<f64>,
    pub sigma_eps_hat: Option<f64>,
    pub condition_warning: bool,
    /// Sandwich covariance of `beta_hat`.
    pub covariance: Vec<Vec<f64>>,
    pub num_cells: usize,
}

impl EstimateReport {
    fn point(tag: EstimatorTag, beta: &DVector<f64>, gram: &DMatrix<f64>, cov: &DMatrix<f64>, warn: bool, num_cells: usize) -> Self {
        EstimateReport {
            beta_hat: beta.iter().copied().collect(),
            estimator_tag: tag,
            h_k_matrix: linalg::matrix_to_rows(gram),
            ci_lower: None,
            ci_upper: None,
            ci_multiplier: None,
            alpha: None,
            sigma_eta_hat: None,
            sigma_eps_hat: None,
            condition_warning: warn,
            covariance: linalg::matrix_to_rows(cov),
            num_cells,
        }
    }

    pub fn beta(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.beta_hat)
    }

    pub fn covariance_matrix(&self) -> DMatrix<f64> {
        linalg::matrix_from_rows(&self.covariance)
    }
}

struct Solved {
    beta: DVector<f64>,
    gram_inv: DMatrix<f64>,
    warning: bool,
}

fn solve(gram: &DMatrix<f64>, rhs: &DVector<f64>, matrix: &'static str) -> Result<Solved, EstimatorError> {
    let singular = |sv: SingularValues| EstimatorError::Singular { matrix, smallest: sv.smallest, largest: sv.largest };
    let sol = linalg::solve_square(gram, rhs).map_err(singular)?;
    let gram_inv = gram.clone().try_inverse().ok_or_else(|| singular(sol.singular_values))?;
    Ok(Solved { beta: sol.x, gram_inv, warning: sol.condition_warning })
}

fn sandwich(gram_inv: &DMatrix<f64>, meat: &DMatrix<f64>) -> DMatrix<f64> {
    let cov = gram_inv * meat * gram_inv.transpose();
    // symmetrize away rounding
    (&cov + cov.transpose()) * 0.5
}

fn dot(a: &[f64], b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Cross-fold Gram matrix `sum_{a,v} S_{a,-v}^T S_{a,v}` and right-hand side
/// `sum_{a,v} S_{a,-v}^T Y_{a,v}`.
pub fn jive_normal_equations(grid: &AggregateGrid) -> (DMatrix<f64>, DVector<f64>) {
    let d = grid.dim();
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for a in 0..grid.num_cells() {
        for v in 0..grid.num_folds() {
            let loo = grid.s_mean_excluding(a, v);
            let s = grid.s_mean(a, v);
            let y = grid.y_mean(a, v);
            for i in 0..d {
                rhs[i] += loo[i] * y;
                for j in 0..d {
                    gram[(i, j)] += loo[i] * s[j];
                }
            }
        }
    }
    (gram, rhs)
}

/// L-fold JIVE from cell-fold aggregates.
pub fn jive_lfold(aggregates: &[CellFoldAggregate]) -> Result<EstimateReport, EstimatorError> {
    let grid = AggregateGrid::new(aggregates)?;
    if grid.num_cells() < grid.dim() {
        return Err(EstimatorError::Invalid(format!("JIVE needs at least d = {} cells, got {}", grid.dim(), grid.num_cells())));
    }
    let (gram, rhs) = jive_normal_equations(&grid);
    let Solved { beta, gram_inv, warning } = solve(&gram, &rhs, "JIVE cross-fold Gram matrix")?;

    // Cells are independent; folds inside a cell share leave-out means, so the
    // score is clustered by cell.
    let d = grid.dim();
    let mut meat = DMatrix::zeros(d, d);
    for a in 0..grid.num_cells() {
        let mut score = DVector::<f64>::zeros(d);
        for v in 0..grid.num_folds() {
            let resid = grid.y_mean(a, v) - dot(grid.s_mean(a, v), &beta);
            let loo = grid.s_mean_excluding(a, v);
            for i in 0..d {
                score[i] += loo[i] * resid;
            }
        }
        meat += &score * score.transpose();
    }
    let cov = sandwich(&gram_inv, &meat);
    Ok(EstimateReport::point(EstimatorTag::JiveLFold, &beta, &gram, &cov, warning, grid.num_cells()))
}

/// Two-fold JIVE for a scalar surrogate with a normal-approximation interval
/// `beta_hat +- q_{1-alpha/2} * sqrt(K) / H_K * sigma_eta * sigma_eps`.
///
/// The point estimate is symmetric in the two folds and equals
/// [`jive_lfold`] on the same aggregates.
pub fn jive_2fold_with_ci(aggregates: &[CellFoldAggregate], alpha: f64) -> Result<EstimateReport, EstimatorError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(EstimatorError::Invalid(format!("alpha must lie in (0, 1), got {alpha}")));
    }
    let grid = AggregateGrid::new(aggregates)?;
    if grid.num_folds() != 2 || grid.dim() != 1 {
        return Err(EstimatorError::Invalid(format!(
            "two-fold JIVE needs exactly 2 folds and a scalar surrogate, got L = {} and d = {}",
            grid.num_folds(),
            grid.dim()
        )));
    }
    let k = grid.num_cells();
    let s = |a: usize, v: usize| grid.s_mean(a, v)[0];
    let y = |a: usize, v: usize| grid.y_mean(a, v);

    let h_k: f64 = (0..k).map(|a| s(a, 0) * s(a, 1)).sum();
    let scaled = h_k / (k as f64).sqrt();
    if !(h_k > 0.0) || scaled < WEAK_ID_TOL {
        return Err(EstimatorError::WeakIdentification { h_k, num_cells: k });
    }
    let cross: f64 = (0..k).map(|a| s(a, 0) * y(a, 1) + s(a, 1) * y(a, 0)).sum();
    let beta = cross / (2.0 * h_k);

    let var_eta = (0..k).map(|a| (s(a, 0) - s(a, 1)).powi(2) / 2.0).sum::<f64>() / k as f64;
    let var_eps = (0..k)
        .map(|a| {
            let r0 = y(a, 0) - beta * s(a, 0);
            let r1 = y(a, 1) - beta * s(a, 1);
            (r0 - r1).powi(2) / 2.0
        })
        .sum::<f64>()
        / k as f64;
    let sigma_eta = var_eta.sqrt();
    let sigma_eps = var_eps.sqrt();
    let se = sigma_eta * sigma_eps / scaled;
    let q = two_sided_multiplier(alpha);

    Ok(EstimateReport {
        beta_hat: vec![beta],
        estimator_tag: EstimatorTag::Jive2Fold,
        h_k_matrix: vec![vec![h_k]],
        ci_lower: Some(beta - q * se),
        ci_upper: Some(beta + q * se),
        ci_multiplier: Some(q),
        alpha: Some(alpha),
        sigma_eta_hat: Some(sigma_eta),
        sigma_eps_hat: Some(sigma_eps),
        condition_warning: false,
        covariance: vec![vec![se * se]],
        num_cells: k,
    })
}

/// 2SLS as the regression of cell means of `Y` on cell means of `S`, no
/// intercept. Folds are pooled with count weights.
pub fn tsls(aggregates: &[CellFoldAggregate]) -> Result<EstimateReport, EstimatorError> {
    let grid = AggregateGrid::new(aggregates)?;
    let means: Vec<(Vec<f64>, f64)> = (0..grid.num_cells()).map(|a| grid.cell_means(a)).collect();
    tsls_from_cell_means(&means)
}

/// 2SLS from whole-cell means `(S_a, Y_a)`.
pub fn tsls_from_cell_means(cells: &[(Vec<f64>, f64)]) -> Result<EstimateReport, EstimatorError> {
    let d = cells.first().map(|(s, _)| s.len()).ok_or_else(|| EstimatorError::Invalid("no cells".into()))?;
    if cells.iter().any(|(s, _)| s.len() != d) {
        return Err(EstimatorError::Invalid("cell means disagree on dimension".into()));
    }
    if cells.len() < d {
        return Err(EstimatorError::Invalid(format!("TSLS needs at least d = {d} cells, got {}", cells.len())));
    }
    let (beta, gram, gram_inv, warning) = least_squares(cells.iter().map(|(s, y)| (s.as_slice(), *y)), d, "TSLS cell-mean Gram matrix")?;
    let cov = hc0(cells.iter().map(|(s, y)| (s.as_slice(), *y)), &beta, &gram_inv);
    Ok(EstimateReport::point(EstimatorTag::Tsls, &beta, &gram, &cov, warning, cells.len()))
}

/// Unit-level least squares of `Y` on `S` without intercept: the linear
/// surrogate index.
pub fn ols_surrogate_index(dataset: &Dataset) -> Result<EstimateReport, EstimatorError> {
    let d = dataset.surrogate_dim();
    if dataset.len() < d {
        return Err(EstimatorError::Invalid(format!("OLS needs at least d = {d} units, got {}", dataset.len())));
    }
    let rows = || dataset.records().iter().map(|r| (r.surrogate.as_slice(), r.outcome));
    let (beta, gram, gram_inv, warning) = least_squares(rows(), d, "OLS Gram matrix")?;
    let cov = hc0(rows(), &beta, &gram_inv);
    Ok(EstimateReport::point(EstimatorTag::Ols, &beta, &gram, &cov, warning, dataset.num_cells()))
}

type LeastSquares = (DVector<f64>, DMatrix<f64>, DMatrix<f64>, bool);

fn least_squares<'a, I>(rows: I, d: usize, matrix: &'static str) -> Result<LeastSquares, EstimatorError>
where
    I: Iterator<Item = (&'a [f64], f64)>,
{
    let mut gram = DMatrix::zeros(d, d);
    let mut rhs = DVector::zeros(d);
    for (s, y) in rows {
        for i in 0..d {
            rhs[i] += s[i] * y;
            for j in i..d {
                gram[(i, j)] += s[i] * s[j];
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            gram[(i, j)] = gram[(j, i)];
        }
    }
    let Solved { beta, gram_inv, warning } = solve(&gram, &rhs, matrix)?;
    Ok((beta, gram, gram_inv, warning))
}

/// Heteroskedasticity-robust (HC0) covariance for a through-origin regression.
fn hc0<'a, I>(rows: I, beta: &DVector<f64>, gram_inv: &DMatrix<f64>) -> DMatrix<f64>
where
    I: Iterator<Item = (&'a [f64], f64)>,
{
    let d = beta.len();
    let mut meat = DMatrix::zeros(d, d);
    for (s, y) in rows {
        let r2 = (y - dot(s, beta)).powi(2);
        for i in 0..d {
            for j in i..d {
                meat[(i, j)] += s[i] * s[j] * r2;
            }
        }
    }
    for i in 0..d {
        for j in 0..i {
            meat[(i, j)] = meat[(j, i)];
        }
    }
    sandwich(gram_inv, &meat)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::UnitRecord;
    use proptest::prelude::*;

    fn agg(cell_id: usize, fold_id: usize, s: Vec<f64>, y: f64) -> CellFoldAggregate {
        CellFoldAggregate { cell_id, fold_id, count: 10, mean_surrogate: s, mean_outcome: y }
    }

    #[test]
    fn noise_free_scalar_recovers_beta() {
        let pi = [1.0, 2.0];
        let aggs: Vec<_> = (0..2).flat_map(|a| (1..=2).map(move |v| agg(a + 1, v, vec![pi[a]], 3.0 * pi[a]))).collect();
        assert!((jive_lfold(&aggs).unwrap().beta_hat[0] - 3.0).abs() < 1e-12);
        assert!((tsls(&aggs).unwrap().beta_hat[0] - 3.0).abs() < 1e-12);
        let r = jive_2fold_with_ci(&aggs, 0.05).unwrap();
        assert!((r.beta_hat[0] - 3.0).abs() < 1e-12);
        // zero-noise fold differences: the interval collapses
        assert_eq!(r.sigma_eta_hat, Some(0.0));
        assert_eq!(r.sigma_eps_hat, Some(0.0));
        assert_eq!(r.ci_lower, r.ci_upper);
    }

    #[test]
    fn y_equal_to_s_gives_unit_slope() {
        let aggs = vec![agg(1, 1, vec![1.0], 1.0), agg(1, 2, vec![2.0], 2.0), agg(2, 1, vec![3.0], 3.0), agg(2, 2, vec![4.0], 4.0)];
        assert!((jive_lfold(&aggs).unwrap().beta_hat[0] - 1.0).abs() < 1e-14);
    }

    #[test]
    fn ci_multiplier_is_normal_quantile() {
        let aggs = vec![
            agg(1, 1, vec![1.0], 1.3),
            agg(1, 2, vec![1.2], 0.9),
            agg(2, 1, vec![2.1], 2.0),
            agg(2, 2, vec![1.8], 2.4),
            agg(3, 1, vec![0.7], 1.1),
            agg(3, 2, vec![0.9], 0.6),
        ];
        let r = jive_2fold_with_ci(&aggs, 0.05).unwrap();
        assert!((r.ci_multiplier.unwrap() - 1.959964).abs() < 1e-6);
        let (lo, hi) = (r.ci_lower.unwrap(), r.ci_upper.unwrap());
        assert!(lo <= r.beta_hat[0] && r.beta_hat[0] <= hi);
        assert!(((lo + hi) / 2.0 - r.beta_hat[0]).abs() < 1e-14);
        let l = jive_lfold(&aggs).unwrap();
        assert!((l.beta_hat[0] - r.beta_hat[0]).abs() < 1e-14);
    }

    #[test]
    fn weak_identification_is_refused() {
        let aggs = vec![agg(1, 1, vec![1.0], 1.0), agg(1, 2, vec![-1.0], 2.0), agg(2, 1, vec![0.5], 3.0), agg(2, 2, vec![-0.5], 4.0)];
        assert!(matches!(jive_2fold_with_ci(&aggs, 0.05), Err(EstimatorError::WeakIdentification { num_cells: 2, .. })));
    }

    #[test]
    fn two_fold_rejects_wrong_shape() {
        let aggs = vec![agg(1, 1, vec![1.0, 0.0], 1.0), agg(1, 2, vec![2.0, 1.0], 2.0)];
        assert!(matches!(jive_2fold_with_ci(&aggs, 0.05), Err(EstimatorError::Invalid(_))));
        let aggs = vec![agg(1, 1, vec![1.0], 1.0), agg(1, 2, vec![2.0], 2.0)];
        assert!(matches!(jive_2fold_with_ci(&aggs, 1.5), Err(EstimatorError::Invalid(_))));
    }

    #[test]
    fn singular_gram_names_smallest_singular_value() {
        // both cells proportional to (1, 1): rank one
        let aggs = vec![
            agg(1, 1, vec![1.0, 1.0], 1.0),
            agg(1, 2, vec![1.0, 1.0], 2.0),
            agg(2, 1, vec![2.0, 2.0], 3.0),
            agg(2, 2, vec![2.0, 2.0], 4.0),
        ];
        let err = jive_lfold(&aggs).unwrap_err();
        assert!(matches!(err, EstimatorError::Singular { .. }));
        assert!(err.to_string().contains("smallest singular value"));
        assert!(matches!(tsls(&aggs), Err(EstimatorError::Singular { .. })));
    }

    #[test]
    fn tsls_single_cell_through_origin() {
        let r = tsls_from_cell_means(&[(vec![2.0], 6.0)]).unwrap();
        assert!((r.beta_hat[0] - 3.0).abs() < 1e-15);
        assert_eq!(r.estimator_tag, EstimatorTag::Tsls);
    }

    #[test]
    fn ols_exact_fits() {
        let records = vec![
            UnitRecord { cell_id: 1, fold_id: None, surrogate: vec![1.0], outcome: 2.0 },
            UnitRecord { cell_id: 1, fold_id: None, surrogate: vec![2.0], outcome: 4.0 },
        ];
        let ds = Dataset::new(records, 1, 1).unwrap();
        let r = ols_surrogate_index(&ds).unwrap();
        assert!((r.beta_hat[0] - 2.0).abs() < 1e-15);
        assert_eq!(r.estimator_tag, EstimatorTag::Ols);

        let beta = [0.5, -1.5, 2.0];
        let records = (0..12)
            .map(|i| {
                let s: Vec<f64> = (0..3).map(|j| ((i * 7 + j * 5) % 11) as f64 - 4.0).collect();
                let y = s.iter().zip(&beta).map(|(a, b)| a * b).sum();
                UnitRecord { cell_id: i / 4 + 1, fold_id: None, surrogate: s, outcome: y }
            })
            .collect();
        let ds = Dataset::new(records, 3, 3).unwrap();
        let r = ols_surrogate_index(&ds).unwrap();
        for (b, t) in r.beta_hat.iter().zip(&beta) {
            assert!((b - t).abs() < 1e-12);
        }
    }

    #[test]
    fn tag_round_trips_through_json() {
        let json = serde_json::to_string(&EstimatorTag::JiveLFold).unwrap();
        assert_eq!(json, "\"JIVE_LFOLD\"");
        assert_eq!("jive2".parse::<EstimatorTag>().unwrap(), EstimatorTag::Jive2Fold);
    }

    fn arb_grid() -> impl Strategy<Value = Vec<CellFoldAggregate>> {
        (3usize..12, 2usize..5, 1usize..3).prop_flat_map(|(k, l, d)| {
            proptest::collection::vec((proptest::collection::vec(-3.0..3.0f64, d), -3.0..3.0f64, 1usize..6), k * l).prop_map(move |cells| {
                cells
                    .into_iter()
                    .enumerate()
                    .map(|(i, (mut s, y, count))| {
                        // a shared cell effect keeps the Gram matrix well conditioned
                        for (j, x) in s.iter_mut().enumerate() {
                            *x += if (i / l + j) % 2 == 0 { 2.0 } else { -1.5 } * (1.0 + (i / l) as f64 * 0.1);
                        }
                        CellFoldAggregate { cell_id: i / l + 1, fold_id: i % l + 1, count, mean_surrogate: s, mean_outcome: y }
                    })
                    .collect()
            })
        })
    }

    proptest! {
        #[test]
        fn scale_equivariance(aggs in arb_grid(), c in prop_oneof![-4.0..-0.25f64, 0.25..4.0f64]) {
            let Ok(base) = jive_lfold(&aggs) else { return Ok(()) };
            prop_assume!(!base.condition_warning);
            let scale_y: Vec<_> = aggs.iter().cloned().map(|mut a| { a.mean_outcome *= c; a }).collect();
            let scale_s: Vec<_> = aggs.iter().cloned().map(|mut a| { a.mean_surrogate.iter_mut().for_each(|s| *s *= c); a }).collect();
            let by_y = jive_lfold(&scale_y).unwrap();
            let by_s = jive_lfold(&scale_s).unwrap();
            let t = tsls(&aggs).unwrap();
            let t_y = tsls(&scale_y).unwrap();
            for j in 0..base.beta_hat.len() {
                let b = base.beta_hat[j];
                prop_assert!((by_y.beta_hat[j] - c * b).abs() <= 1e-8 * (1.0 + b.abs()));
                prop_assert!((by_s.beta_hat[j] - b / c).abs() <= 1e-8 * (1.0 + b.abs()));
                prop_assert!((t_y.beta_hat[j] - c * t.beta_hat[j]).abs() <= 1e-8 * (1.0 + t.beta_hat[j].abs()));
            }
        }

        #[test]
        fn fold_relabelling_within_a_cell_is_harmless(aggs in arb_grid(), cell_pick in 0usize..100, shift in 1usize..4) {
            let Ok(base) = jive_lfold(&aggs) else { return Ok(()) };
            prop_assume!(!base.condition_warning);
            let l = aggs.iter().map(|a| a.fold_id).max().unwrap();
            let k = aggs.len() / l;
            let target = cell_pick % k + 1;
            let relabelled: Vec<_> = aggs
                .iter()
                .cloned()
                .map(|mut a| {
                    if a.cell_id == target {
                        a.fold_id = (a.fold_id - 1 + shift) % l + 1;
                    }
                    a
                })
                .collect();
            let other = jive_lfold(&relabelled).unwrap();
            for (x, y) in base.beta_hat.iter().zip(&other.beta_hat) {
                prop_assert!((x - y).abs() <= 1e-9 * (1.0 + x.abs()));
            }
        }
            #[test]
        fn two_fold_matches_lfold_and_interval_formula(
            cells in proptest::collection::vec((0.5..3.0f64, -0.5..0.5f64, -0.5..0.5f64, -3.0..3.0f64, -3.0..3.0f64), 3..20),
        ) {
            let aggs: Vec<_> = cells
                .iter()
                .enumerate()
                .flat_map(|(a, &(pi, e0, e1, y0, y1))| {
                    [
                        CellFoldAggregate { cell_id: a + 1, fold_id: 1, count: 4, mean_surrogate: vec![pi + e0], mean_outcome: y0 },
                        CellFoldAggregate { cell_id: a + 1, fold_id: 2, count: 4, mean_surrogate: vec![pi + e1], mean_outcome: y1 },
                    ]
                })
                .collect();
            let two = jive_2fold_with_ci(&aggs, 0.1).unwrap();
            let l = jive_lfold(&aggs).unwrap();
            let b = two.beta_hat[0];
            prop_assert!((b - l.beta_hat[0]).abs() <= 1e-10 * (1.0 + b.abs()));
            // both fold orderings of the one-sided estimator average to the symmetric one
            let s: Vec<(f64, f64)> = cells.iter().map(|&(pi, e0, e1, _, _)| (pi + e0, pi + e1)).collect();
            let h: f64 = s.iter().map(|(a, b)| a * b).sum();
            let fwd: f64 = s.iter().zip(&cells).map(|((s0, _), c)| s0 * c.4).sum::<f64>() / h;
            let bwd: f64 = s.iter().zip(&cells).map(|((_, s1), c)| s1 * c.3).sum::<f64>() / h;
            prop_assert!(((fwd + bwd) / 2.0 - b).abs() <= 1e-10 * (1.0 + b.abs()));
            let k = cells.len() as f64;
            let half = 1.6448536269514722 * k.sqrt() / h * two.sigma_eta_hat.unwrap() * two.sigma_eps_hat.unwrap();
            prop_assert!((two.ci_upper.unwrap() - b - half).abs() <= 1e-10 * (1.0 + half));
            prop_assert!((b - two.ci_lower.unwrap() - half).abs() <= 1e-10 * (1.0 + half));
        }
    }
}
