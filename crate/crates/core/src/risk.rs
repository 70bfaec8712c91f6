//! Cross-fold risk for candidate bridge functions.
//!
//! For fold `v` of cell `a`, `[P^v h](a)` is the mean of `h(S)` over the
//! fold and `[P^-v h](a)` the mean over the rest of the cell. The empirical
//! risk is
//!
//! ```text
//! R(h) = 1/L sum_v 1/K sum_a ( -[P^v y](a) [P^-v h](a) + 1/2 [P^v h](a) [P^-v h](a) )
//! ```
//!
//! Products only ever pair disjoint sets of units, so noise shared by `S` and
//! `Y` inside a unit never enters the expectation of the risk.

use std::fmt;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{DataError, Dataset};
use crate::identification::FiniteDgp;
use crate::linalg;

#[derive(Debug, Error)]
pub enum RiskError {
    #[error("bridge function has no value at surrogate point {0:?}")]
    OffSupport(Vec<f64>),
    #[error("bridge expects surrogate dimension {expected}, got {found}")]
    Dimension { expected: usize, found: usize },
    #[error("candidate list is empty")]
    NoCandidates,
    #[error("cross-fold quadratic form is singular: smallest singular value {smallest:e} vs largest {largest:e}")]
    Singular { smallest: f64, largest: f64 },
    #[error(transparent)]
    Data(#[from] DataError),
}

/// A finite lookup table over declared surrogate support points.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TabularBridge {
    support: Vec<Vec<f64>>,
    values: Vec<f64>,
}

impl TabularBridge {
    pub fn new(support: Vec<Vec<f64>>, values: Vec<f64>) -> Result<Self, String> {
        if support.len() != values.len() {
            return Err(format!("{} support points but {} values", support.len(), values.len()));
        }
        let dim = support.first().map_or(0, Vec::len);
        if support.iter().any(|p| p.len() != dim) {
            return Err("support points disagree on dimension".into());
        }
        for (i, p) in support.iter().enumerate() {
            if support[..i].iter().any(|q| q == p) {
                return Err(format!("support point {p:?} listed twice"));
            }
        }
        Ok(TabularBridge { support, values })
    }

    pub fn support(&self) -> &[Vec<f64>] {
        &self.support
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.support.first().map_or(0, Vec::len)
    }

    pub fn index_of(&self, s: &[f64]) -> Option<usize> {
        self.support.iter().position(|p| p.as_slice() == s)
    }

    pub fn with_values(&self, values: Vec<f64>) -> Self {
        assert_eq!(values.len(), self.values.len());
        TabularBridge { support: self.support.clone(), values }
    }
}

/// Candidate bridge `h: R^d -> R`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum BridgeFunction {
    /// `h(S) = S beta`
    Linear { coefficients: Vec<f64> },
    /// Lookup table; evaluating outside the support is an error.
    Tabular(TabularBridge),
}

impl BridgeFunction {
    pub fn linear(coefficients: Vec<f64>) -> Self {
        BridgeFunction::Linear { coefficients }
    }

    pub fn dim(&self) -> usize {
        match self {
            BridgeFunction::Linear { coefficients } => coefficients.len(),
            BridgeFunction::Tabular(t) => t.dim(),
        }
    }

    pub fn evaluate(&self, s: &[f64]) -> Result<f64, RiskError> {
        if s.len() != self.dim() {
            return Err(RiskError::Dimension { expected: self.dim(), found: s.len() });
        }
        match self {
            BridgeFunction::Linear { coefficients } => Ok(s.iter().zip(coefficients).map(|(x, b)| x * b).sum()),
            BridgeFunction::Tabular(t) => t.index_of(s).map(|i| t.values[i]).ok_or_else(|| RiskError::OffSupport(s.to_vec())),
        }
    }
}

impl fmt::Display for BridgeFunction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            BridgeFunction::Linear { coefficients } => write!(f, "linear{coefficients:?}"),
            BridgeFunction::Tabular(t) => write!(f, "tabular{:?}", t.values),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmpiricalRiskValue {
    pub value: f64,
    /// `-[P^v y][P^-v h]` averaged over cells and folds
    pub cross_term: f64,
    /// `1/2 [P^v h][P^-v h]` averaged over cells and folds
    pub quadratic_term: f64,
}

impl EmpiricalRiskValue {
    fn new(cross_term: f64, quadratic_term: f64) -> Self {
        EmpiricalRiskValue { value: cross_term + quadratic_term, cross_term, quadratic_term }
    }
}

/// Empirical cross-fold risk of `h` on a fold-assigned dataset.
///
/// Leave-fold-out means divide by the realised number of units outside the
/// fold, which is `n (L-1) / L` for balanced folds.
pub fn empirical_risk(h: &BridgeFunction, dataset: &Dataset) -> Result<EmpiricalRiskValue, RiskError> {
    let num_folds = dataset.num_folds().ok_or(DataError::FoldsUnassigned)?;
    let h_values = dataset.records().iter().map(|r| h.evaluate(&r.surrogate)).collect::<Result<Vec<f64>, _>>()?;
    Ok(risk_from_values(dataset, num_folds, &h_values))
}

fn risk_from_values(dataset: &Dataset, num_folds: usize, h_values: &[f64]) -> EmpiricalRiskValue {
    let cells = dataset.num_cells();
    let slots = cells * num_folds;
    let mut counts = vec![0usize; slots];
    let mut h_sums = vec![0.0; slots];
    let mut y_sums = vec![0.0; slots];
    for (r, &hv) in dataset.records().iter().zip(h_values) {
        let slot = (r.cell_id - 1) * num_folds + r.fold_id.expect("validated") - 1;
        counts[slot] += 1;
        h_sums[slot] += hv;
        y_sums[slot] += r.outcome;
    }
    let mut cross = 0.0;
    let mut quad = 0.0;
    for a in 0..cells {
        let row = a * num_folds..(a + 1) * num_folds;
        let cell_count: usize = counts[row.clone()].iter().sum();
        let cell_h: f64 = h_sums[row.clone()].iter().sum();
        for slot in row {
            let in_fold = counts[slot] as f64;
            let h_in = h_sums[slot] / in_fold;
            let h_out = (cell_h - h_sums[slot]) / (cell_count - counts[slot]) as f64;
            let y_in = y_sums[slot] / in_fold;
            cross -= y_in * h_out;
            quad += 0.5 * h_in * h_out;
        }
    }
    let norm = slots as f64;
    EmpiricalRiskValue::new(cross / norm, quad / norm)
}

/// Exact minimiser of the empirical risk over linear bridges `h(S) = S beta`.
///
/// The risk is a quadratic `l' beta + beta' M beta`. `l` and the symmetric
/// `M` are read off the risk evaluator itself by polarisation over the
/// coordinate directions, then `2 M beta = -l` is solved.
pub fn minimize_risk_linear(dataset: &Dataset) -> Result<(Vec<f64>, EmpiricalRiskValue), RiskError> {
    let d = dataset.surrogate_dim();
    let unit = |idx: &[usize]| {
        let mut c = vec![0.0; d];
        for &i in idx {
            c[i] = 1.0;
        }
        BridgeFunction::linear(c)
    };
    let mut linear = DVector::zeros(d);
    let mut quad = DMatrix::zeros(d, d);
    for j in 0..d {
        let r = empirical_risk(&unit(&[j]), dataset)?;
        linear[j] = r.cross_term;
        quad[(j, j)] = r.quadratic_term;
    }
    for j in 0..d {
        for k in j + 1..d {
            let both = empirical_risk(&unit(&[j, k]), dataset)?.quadratic_term;
            let off = 0.5 * (both - quad[(j, j)] - quad[(k, k)]);
            quad[(j, k)] = off;
            quad[(k, j)] = off;
        }
    }
    let sol =
        linalg::solve_square(&(quad * 2.0), &(-linear)).map_err(|sv| RiskError::Singular { smallest: sv.smallest, largest: sv.largest })?;
    let beta: Vec<f64> = sol.x.iter().copied().collect();
    let risk = empirical_risk(&BridgeFunction::linear(beta.clone()), dataset)?;
    Ok((beta, risk))
}

/// Index of the candidate with the smallest empirical risk; ties go to the
/// lowest index.
pub fn minimize_risk_finite_class(dataset: &Dataset, candidates: &[BridgeFunction]) -> Result<(usize, EmpiricalRiskValue), RiskError> {
    if candidates.is_empty() {
        return Err(RiskError::NoCandidates);
    }
    let num_folds = dataset.num_folds().ok_or(DataError::FoldsUnassigned)?;
    let eval = |h: &BridgeFunction| empirical_risk(h, dataset);
    let risks: Vec<Result<EmpiricalRiskValue, RiskError>> = if candidates.iter().all(|h| matches!(h, BridgeFunction::Tabular(_))) {
        tabular_risks(dataset, num_folds, candidates)
    } else {
        map_candidates(candidates, eval)
    };
    let mut best: Option<(usize, EmpiricalRiskValue)> = None;
    for (i, r) in risks.into_iter().enumerate() {
        let r = r?;
        if best.is_none_or(|(_, b)| r.value < b.value) {
            best = Some((i, r));
        }
    }
    Ok(best.expect("non-empty"))
}

/// Tabular candidates sharing one support: locate each unit's support point
/// once, then every candidate is a gather.
fn tabular_risks(dataset: &Dataset, num_folds: usize, candidates: &[BridgeFunction]) -> Vec<Result<EmpiricalRiskValue, RiskError>> {
    let support_of = |h: &BridgeFunction| match h {
        BridgeFunction::Tabular(t) => t.support.clone(),
        BridgeFunction::Linear { .. } => unreachable!(),
    };
    let shared = support_of(&candidates[0]);
    if candidates.iter().any(|h| support_of(h) != shared) {
        return map_candidates(candidates, |h| empirical_risk(h, dataset));
    }
    let first = match &candidates[0] {
        BridgeFunction::Tabular(t) => t,
        BridgeFunction::Linear { .. } => unreachable!(),
    };
    let positions: Option<Vec<usize>> = dataset.records().iter().map(|r| first.index_of(&r.surrogate)).collect();
    let Some(positions) = positions else {
        // some unit is off the support; the slow path reports which one
        return map_candidates(candidates, |h| empirical_risk(h, dataset));
    };
    map_candidates(candidates, |h| {
        let BridgeFunction::Tabular(t) = h else { unreachable!() };
        let values: Vec<f64> = positions.iter().map(|&p| t.values[p]).collect();
        Ok(risk_from_values(dataset, num_folds, &values))
    })
}

#[cfg(feature = "parallel")]
fn map_candidates<F>(candidates: &[BridgeFunction], f: F) -> Vec<Result<EmpiricalRiskValue, RiskError>>
where
    F: Fn(&BridgeFunction) -> Result<EmpiricalRiskValue, RiskError> + Sync + Send,
{
    use rayon::prelude::*;
    candidates.par_iter().map(f).collect()
}

#[cfg(not(feature = "parallel"))]
fn map_candidates<F>(candidates: &[BridgeFunction], f: F) -> Vec<Result<EmpiricalRiskValue, RiskError>>
where
    F: Fn(&BridgeFunction) -> Result<EmpiricalRiskValue, RiskError>,
{
    candidates.iter().map(f).collect()
}

/// Population cross-fold risk on a finite-support DGP:
/// `-E[E[Y|A] E[h(S)|A]] + 1/2 E[E[h(S)|A]^2]` over training treatments.
///
/// Folds are exchangeable at population level, so both fold-conditional
/// means reduce to `E[.|A]`.
pub fn population_risk(h: &BridgeFunction, dgp: &FiniteDgp) -> Result<f64, RiskError> {
    let mut terms = Vec::with_capacity(2 * dgp.training.len());
    for (&a, &p) in dgp.training.iter().zip(&dgp.treatment_probs) {
        let ey = dgp.mean_outcome(a);
        let eh = dgp.mean_bridge(a, h)?;
        terms.push(-p * ey * eh);
        terms.push(0.5 * p * eh * eh);
    }
    Ok(linalg::compensated_sum(terms))
}

/// Minimiser of the population risk over all tabular functions on the
/// surrogate support (minimum-norm when not unique).
pub fn minimize_population_risk_tabular(dgp: &FiniteDgp) -> TabularBridge {
    let basis = DMatrix::identity(dgp.support_points().len(), dgp.support_points().len());
    let coef = population_minimizer(dgp, &basis);
    TabularBridge::new(dgp.support_points(), coef.iter().copied().collect()).expect("distinct support")
}

/// Minimiser of the population risk over linear bridges `h(s) = s beta`.
pub fn minimize_population_risk_linear(dgp: &FiniteDgp) -> Vec<f64> {
    let pts = dgp.support_points();
    let design = DMatrix::from_fn(pts.len(), pts[0].len(), |i, j| pts[i][j]);
    population_minimizer(dgp, &design).iter().copied().collect()
}

/// Minimises over `h = basis * c`: solves `B' M' W M B c = B' M' W E[Y|A]`.
fn population_minimizer(dgp: &FiniteDgp, basis: &DMatrix<f64>) -> DVector<f64> {
    let m = dgp.moment_matrix();
    let w = DMatrix::from_diagonal(&DVector::from_column_slice(&dgp.treatment_probs));
    let ey = DVector::from_iterator(dgp.training.len(), dgp.training.iter().map(|&a| dgp.mean_outcome(a)));
    let mb = &m * basis;
    let normal = mb.transpose() * &w * &mb;
    let rhs = mb.transpose() * &w * ey;
    linalg::min_norm_lstsq(&normal, &rhs, 1e-12)
}

/// Every table assigning one of `levels` to each support point, in
/// lexicographic order (last support point varies fastest).
pub fn tabular_grid(support: &[Vec<f64>], levels: &[f64]) -> Vec<BridgeFunction> {
    let n = support.len();
    let total = levels.len().pow(n as u32);
    (0..total)
        .map(|mut code| {
            let mut values = vec![0.0; n];
            for slot in values.iter_mut().rev() {
                *slot = levels[code % levels.len()];
                code /= levels.len();
            }
            BridgeFunction::Tabular(TabularBridge { support: support.to_vec(), values })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{assign_folds, UnitRecord};
    use proptest::prelude::*;

    fn tiny() -> Dataset {
        // K = 2, n = 4, L = 2, d = 1
        let s = [0.5, 1.5, -1.0, 2.0, 3.0, 0.25, 1.0, -0.5];
        let y = [1.0, 2.0, 0.0, 4.0, 2.5, -1.0, 0.5, 3.0];
        let records = (0..8).map(|i| UnitRecord { cell_id: i / 4 + 1, fold_id: None, surrogate: vec![s[i]], outcome: y[i] }).collect();
        assign_folds(Dataset::new(records, 2, 1).unwrap(), 2, 3).unwrap()
    }

    /// Enumerates every (cell, fold, unit in fold, unit outside fold) term.
    fn brute_force(h: &dyn Fn(&[f64]) -> f64, ds: &Dataset) -> (f64, f64) {
        let l = ds.num_folds().unwrap();
        let k = ds.num_cells();
        let mut cross = 0.0;
        let mut quad = 0.0;
        for a in 1..=k {
            for v in 1..=l {
                let inside: Vec<&UnitRecord> = ds.records().iter().filter(|r| r.cell_id == a && r.fold_id == Some(v)).collect();
                let outside: Vec<&UnitRecord> = ds.records().iter().filter(|r| r.cell_id == a && r.fold_id != Some(v)).collect();
                let w = 1.0 / (inside.len() * outside.len()) as f64;
                for i in &inside {
                    for j in &outside {
                        cross += -i.outcome * h(&j.surrogate) * w;
                        quad += 0.5 * h(&i.surrogate) * h(&j.surrogate) * w;
                    }
                }
            }
        }
        let norm = (k * l) as f64;
        (cross / norm, quad / norm)
    }

    #[test]
    fn zero_bridge_has_zero_risk() {
        let r = empirical_risk(&BridgeFunction::linear(vec![0.0]), &tiny()).unwrap();
        assert_eq!(r.value, 0.0);
    }

    #[test]
    fn constant_bridge_factors_out() {
        let ds = tiny();
        let c = 1.7;
        let support: Vec<Vec<f64>> = ds.records().iter().map(|r| r.surrogate.clone()).collect();
        let h = BridgeFunction::Tabular(TabularBridge::new(support, vec![c; 8]).unwrap());
        let aggs = crate::data::aggregate(&ds).unwrap();
        let mean_y = aggs.iter().map(|a| a.mean_outcome).sum::<f64>() / aggs.len() as f64;
        let r = empirical_risk(&h, &ds).unwrap();
        assert!((r.value - (-c * mean_y + c * c / 2.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        let ds = tiny();
        let r = empirical_risk(&BridgeFunction::linear(vec![1.0]), &ds).unwrap();
        let (cross, quad) = brute_force(&|s| s[0], &ds);
        assert!((r.cross_term - cross).abs() < 1e-12);
        assert!((r.quadratic_term - quad).abs() < 1e-12);
        assert!((r.value - (r.cross_term + r.quadratic_term)).abs() <= 1e-12 * r.value.abs().max(1.0));

        let nonlinear = |s: &[f64]| (s[0] * 1.3).sin() + s[0] * s[0];
        let support: Vec<Vec<f64>> = ds.records().iter().map(|r| r.surrogate.clone()).collect();
        let values = support.iter().map(|s| nonlinear(s)).collect();
        let h = BridgeFunction::Tabular(TabularBridge::new(support, values).unwrap());
        let r = empirical_risk(&h, &ds).unwrap();
        let (cross, quad) = brute_force(&nonlinear, &ds);
        assert!((r.cross_term - cross).abs() < 1e-12);
        assert!((r.quadratic_term - quad).abs() < 1e-12);
    }

    #[test]
    fn risk_is_quadratic_in_scale() {
        let ds = tiny();
        let base = empirical_risk(&BridgeFunction::linear(vec![0.8]), &ds).unwrap();
        for alpha in [-2.0, 0.5, 3.0] {
            let r = empirical_risk(&BridgeFunction::linear(vec![0.8 * alpha]), &ds).unwrap();
            let expect = alpha * base.cross_term + alpha * alpha * base.quadratic_term;
            assert!((r.value - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn off_support_is_an_error() {
        let ds = tiny();
        let h = BridgeFunction::Tabular(TabularBridge::new(vec![vec![0.5]], vec![1.0]).unwrap());
        assert!(matches!(empirical_risk(&h, &ds), Err(RiskError::OffSupport(_))));
        assert!(matches!(minimize_risk_finite_class(&ds, &[h.clone(), h]), Err(RiskError::OffSupport(_))));
    }

    #[test]
    fn linear_minimizer_is_locally_minimal_and_matches_jive() {
        let ds = tiny();
        let (beta, at_min) = minimize_risk_linear(&ds).unwrap();
        for delta in [-0.01, 0.01] {
            let r = empirical_risk(&BridgeFunction::linear(vec![beta[0] + delta]), &ds).unwrap();
            assert!(at_min.value <= r.value);
        }
        let jive = crate::estimators::jive_lfold(&crate::data::aggregate(&ds).unwrap()).unwrap();
        assert!((jive.beta_hat[0] - beta[0]).abs() < 1e-10);
    }

    #[test]
    fn finite_class_selection() {
        let ds = tiny();
        assert_eq!(minimize_risk_finite_class(&ds, &[BridgeFunction::linear(vec![0.3])]).unwrap().0, 0);
        // duplicated best candidate: lowest index wins
        let (beta, _) = minimize_risk_linear(&ds).unwrap();
        let cands = vec![BridgeFunction::linear(vec![beta[0] + 1.0]), BridgeFunction::linear(beta.clone()), BridgeFunction::linear(beta)];
        assert_eq!(minimize_risk_finite_class(&ds, &cands).unwrap().0, 1);
        assert!(matches!(minimize_risk_finite_class(&ds, &[]), Err(RiskError::NoCandidates)));
    }

    #[test]
    fn grid_enumerates_all_tables() {
        let support = vec![vec![0.0], vec![1.0]];
        let grid = tabular_grid(&support, &[-1.0, 0.0, 1.0]);
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[1], BridgeFunction::Tabular(TabularBridge::new(support, vec![-1.0, 0.0]).unwrap()));
    }

    #[test]
    fn tabular_bridge_rejects_duplicates() {
        assert!(TabularBridge::new(vec![vec![1.0], vec![1.0]], vec![0.0, 0.0]).is_err());
        assert!(TabularBridge::new(vec![vec![1.0]], vec![0.0, 0.0]).is_err());
    }
    fn arb_dataset() -> impl Strategy<Value = Dataset> {
        (2usize..8, prop_oneof![Just(2usize), Just(3)], 1usize..3, 1usize..3, any::<u64>()).prop_flat_map(|(k, l, m, d, seed)| {
            let n = l * m;
            proptest::collection::vec((proptest::collection::vec(-2.0..2.0f64, d), -2.0..2.0f64), k * n).prop_map(move |units| {
                let records = units
                    .into_iter()
                    .enumerate()
                    .map(|(i, (mut s, y))| {
                        let a = i / n;
                        for (j, x) in s.iter_mut().enumerate() {
                            *x += if (a + j) % 2 == 0 { 3.0 } else { -2.0 } * (1.0 + 0.2 * a as f64);
                        }
                        UnitRecord { cell_id: a + 1, fold_id: None, surrogate: s, outcome: y }
                    })
                    .collect();
                assign_folds(Dataset::new(records, k, d).unwrap(), l, seed).unwrap()
            })
        })
    }

    proptest! {
        #[test]
        fn risk_scales_quadratically(ds in arb_dataset(), alpha in -3.0..3.0f64, coef in proptest::collection::vec(-2.0..2.0f64, 2)) {
            let h = BridgeFunction::linear(coef[..ds.surrogate_dim()].to_vec());
            let base = empirical_risk(&h, &ds).unwrap();
            let scaled_coef: Vec<f64> = coef[..ds.surrogate_dim()].iter().map(|c| alpha * c).collect();
            let scaled = empirical_risk(&BridgeFunction::linear(scaled_coef), &ds).unwrap();
            let expected = alpha * base.cross_term + alpha * alpha * base.quadratic_term;
            prop_assert!((scaled.value - expected).abs() <= 1e-10 * (1.0 + expected.abs()));
        }

        #[test]
        fn linear_minimiser_matches_dense_oracle_and_jive(ds in arb_dataset()) {
            // Oracle: read the quadratic off the brute-force enumeration and solve it directly.
            let d = ds.surrogate_dim();
            let e = |j: usize| move |s: &[f64]| s[j];
            let mut l = DVector::zeros(d);
            let mut m = DMatrix::zeros(d, d);
            for j in 0..d {
                for k in 0..d {
                    let (cross, _) = brute_force(&e(j), &ds);
                    l[j] = cross;
                    let (_, q) = brute_force(&|s: &[f64]| s[j] + s[k], &ds);
                    let (_, qj) = brute_force(&e(j), &ds);
                    let (_, qk) = brute_force(&e(k), &ds);
                    m[(j, k)] = if j == k { qj } else { (q - qj - qk) / 2.0 };
                }
            }
            let Some(oracle) = (m * 2.0).lu().solve(&(-l)) else { return Ok(()) };
            let Ok((beta, _)) = minimize_risk_linear(&ds) else { return Ok(()) };
            let jive = crate::estimators::jive_lfold(&crate::data::aggregate(&ds).unwrap()).unwrap();
            for j in 0..d {
                let scale = 1.0 + oracle[j].abs();
                prop_assert!((beta[j] - oracle[j]).abs() <= 1e-8 * scale, "{beta:?} vs {oracle}");
                prop_assert!((beta[j] - jive.beta_hat[j]).abs() <= 1e-10 * scale);
            }
        }
    }
}
