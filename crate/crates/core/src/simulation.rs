//! Linear structural simulation and the Monte Carlo sweep harness.
//!
//! Cell `a` has first stage `pi_a`. Unit `i` in cell `a` draws
//!
//! ```text
//! S_i = pi_a + gamma U_i + eta_i
//! Y_i = S_i beta + delta U_i + eps_i
//! ```
//!
//! with `U ~ u_scale N(0,1)`, `eta ~ eta_scale N(0, I_d)` and
//! `eps ~ eps_scale N(0,1)`. Estimators are scored on a novel cell whose
//! first stage is `novel_first_stage`; the target is `E[Y(a')] = a'Pi beta`.
//!
//! Randomness comes from ChaCha8. Replication `r` of grid point `K` reads
//! stream `(K << 32) | r` of the generator keyed by the sweep seed, so results
//! do not depend on how replications are scheduled across threads.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{aggregate, assign_folds, format_float, DataError, Dataset, UnitRecord};
use crate::estimators::{jive_lfold, ols_surrogate_index, tsls, EstimateReport, EstimatorError, EstimatorTag};
use crate::normal::two_sided_multiplier;

/// A sweep aborts when more than this share of replications fail for any
/// `(K, estimator)` pair.
pub const MAX_FAILURE_RATE: f64 = 0.01;

pub const DEFAULT_K_GRID: [usize; 7] = [45, 90, 180, 360, 720, 1440, 2000];

#[derive(Debug, Error)]
pub enum SimulationError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Estimator(#[from] EstimatorError),
    #[error("{failures} of {reps} replications failed for {estimator} at K = {num_cells} (first failure: {first_error})")]
    TooManyFailures {
        num_cells: usize,
        estimator: EstimatorTag,
        failures: usize,
        reps: usize,
        first_error: String,
        partial: Box<SweepResult>,
    },
}

/// How the first-stage rows `pi_a` are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FirstStage {
    /// `pi_a ~ row_scale N(0, I_d)`, fresh per replication.
    Gaussian { row_scale: f64 },
    /// `pi_a = (-1)^a scale (1, ..., 1)`: every coordinate has second moment
    /// exactly `scale^2` when `K` is even.
    Alternating { scale: f64 },
    /// Explicit `K x d` rows.
    Fixed { rows: Vec<Vec<f64>> },
}

impl Default for FirstStage {
    fn default() -> Self {
        FirstStage::Gaussian { row_scale: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LinearDgpConfig {
    pub num_cells: usize,
    pub units_per_cell: usize,
    pub surrogate_dim: usize,
    pub num_folds: usize,
    pub eps_scale: f64,
    pub eta_scale: f64,
    pub u_scale: f64,
    pub delta: f64,
    pub first_stage: FirstStage,
    /// `None`: draw `N(0, I_d) / sqrt(d)` per replication.
    pub beta: Option<Vec<f64>>,
    /// `None`: draw `N(0, I_d) / sqrt(d)` per replication.
    pub gamma: Option<Vec<f64>>,
    /// `a'Pi` for the novel cell; `None` means all ones.
    pub novel_first_stage: Option<Vec<f64>>,
    /// Units in the novel cell; `None` means `units_per_cell`.
    pub novel_units: Option<usize>,
    pub seed: u64,
}

impl Default for LinearDgpConfig {
    fn default() -> Self {
        LinearDgpConfig {
            num_cells: 45,
            units_per_cell: 100,
            surrogate_dim: 5,
            num_folds: 5,
            eps_scale: 3.0,
            eta_scale: 1.0,
            u_scale: 3.0,
            delta: 1.0,
            first_stage: FirstStage::default(),
            beta: None,
            gamma: None,
            novel_first_stage: None,
            novel_units: None,
            seed: 0,
        }
    }
}

impl LinearDgpConfig {
    /// Scalar errors-in-variables design: `S = pi + U`, `Y = pi beta + eps`.
    ///
    /// `U` enters `S` with loading 1 and `Y` with `delta = -beta`, so it acts
    /// as pure measurement error on the surrogate. 2SLS converges to
    /// `beta s^2 / (s^2 + u_scale^2 / n)` with `s = pi_scale`.
    pub fn errors_in_variables(num_cells: usize, beta: f64, pi_scale: f64) -> Self {
        LinearDgpConfig {
            num_cells,
            surrogate_dim: 1,
            eta_scale: 0.0,
            u_scale: 1.0,
            delta: -beta,
            first_stage: FirstStage::Alternating { scale: pi_scale },
            beta: Some(vec![beta]),
            gamma: Some(vec![1.0]),
            ..LinearDgpConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), SimulationError> {
        let bad = |msg: String| Err(SimulationError::Config(msg));
        let d = self.surrogate_dim;
        if self.num_cells == 0 || d == 0 {
            return bad("num_cells and surrogate_dim must be positive".into());
        }
        if self.num_folds < 2 {
            return bad(format!("num_folds must be at least 2, got {}", self.num_folds));
        }
        if self.units_per_cell < self.num_folds {
            return bad(format!("units_per_cell ({}) must be at least num_folds ({})", self.units_per_cell, self.num_folds));
        }
        for (name, v) in [("eps_scale", self.eps_scale), ("eta_scale", self.eta_scale), ("u_scale", self.u_scale)] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be finite and non-negative, got {v}"));
            }
        }
        if !self.delta.is_finite() {
            return bad("delta must be finite".into());
        }
        match &self.first_stage {
            FirstStage::Gaussian { row_scale: s } | FirstStage::Alternating { scale: s } => {
                if !(*s >= 0.0 && s.is_finite()) {
                    return bad(format!("first-stage scale must be finite and non-negative, got {s}"));
                }
            }
            FirstStage::Fixed { rows } => {
                if rows.len() != self.num_cells {
                    return bad(format!("{} fixed first-stage rows for {} cells", rows.len(), self.num_cells));
                }
                if rows.iter().any(|r| r.len() != d || r.iter().any(|x| !x.is_finite())) {
                    return bad(format!("fixed first-stage rows must be finite with length {d}"));
                }
            }
        }
        for (name, v) in [("beta", &self.beta), ("gamma", &self.gamma), ("novel_first_stage", &self.novel_first_stage)] {
            if let Some(v) = v {
                if v.len() != d {
                    return bad(format!("{name} has length {}, expected {d}", v.len()));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return bad(format!("{name} must be finite"));
                }
            }
        }
        if self.novel_units == Some(0) {
            return bad("novel_units must be positive".into());
        }
        Ok(())
    }

    pub fn novel_first_stage_or_default(&self) -> Vec<f64> {
        self.novel_first_stage.clone().unwrap_or_else(|| vec![1.0; self.surrogate_dim])
    }

    pub fn novel_units_or_default(&self) -> usize {
        self.novel_units.unwrap_or(self.units_per_cell)
    }

    fn with_cells(&self, num_cells: usize) -> Self {
        LinearDgpConfig { num_cells, ..self.clone() }
    }
}

/// Structural parameters realised for one draw.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub beta: Vec<f64>,
    pub gamma: Vec<f64>,
    /// `K x d`
    pub pi: Vec<Vec<f64>>,
    /// `a'Pi beta`
    pub novel_target: f64,
}

fn normal_vec<R: Rng>(rng: &mut R, d: usize, scale: f64) -> Vec<f64> {
    (0..d).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Draw order: `beta`, `gamma`, the rows of `Pi`, then units cell by cell as
/// `(U, eta_1..eta_d, eps)`. Draws for parameters that the config pins are
/// skipped.
fn draw_truth<R: Rng>(config: &LinearDgpConfig, rng: &mut R) -> GroundTruth {
    let d = config.surrogate_dim;
    let default_scale = 1.0 / (d as f64).sqrt();
    let beta = config.beta.clone().unwrap_or_else(|| normal_vec(rng, d, default_scale));
    let gamma = config.gamma.clone().unwrap_or_else(|| normal_vec(rng, d, default_scale));
    let pi = match &config.first_stage {
        FirstStage::Gaussian { row_scale } => (0..config.num_cells).map(|_| normal_vec(rng, d, *row_scale)).collect(),
        FirstStage::Alternating { scale } => (0..config.num_cells).map(|a| vec![if a % 2 == 0 { *scale } else { -*scale }; d]).collect(),
        FirstStage::Fixed { rows } => rows.clone(),
    };
    let novel_target = dot(&config.novel_first_stage_or_default(), &beta);
    GroundTruth { beta, gamma, pi, novel_target }
}

fn draw_unit<R: Rng>(config: &LinearDgpConfig, truth: &GroundTruth, first_stage: &[f64], rng: &mut R) -> (Vec<f64>, f64) {
    let u = config.u_scale * rng.sample::<f64, _>(StandardNormal);
    let s: Vec<f64> =
        first_stage.iter().zip(&truth.gamma).map(|(p, g)| p + g * u + config.eta_scale * rng.sample::<f64, _>(StandardNormal)).collect();
    let eps = config.eps_scale * rng.sample::<f64, _>(StandardNormal);
    let y = dot(&s, &truth.beta) + config.delta * u + eps;
    (s, y)
}

fn simulate_with_rng<R: Rng>(config: &LinearDgpConfig, rng: &mut R) -> Result<(Dataset, GroundTruth), SimulationError> {
    let truth = draw_truth(config, rng);
    let mut records = Vec::with_capacity(config.num_cells * config.units_per_cell);
    for (a, row) in truth.pi.iter().enumerate() {
        for _ in 0..config.units_per_cell {
            let (surrogate, outcome) = draw_unit(config, &truth, row, rng);
            records.push(UnitRecord { cell_id: a + 1, fold_id: None, surrogate, outcome });
        }
    }
    let fold_seed: u64 = rng.random();
    let dataset = Dataset::new(records, config.num_cells, config.surrogate_dim)?;
    let dataset = assign_folds(dataset, config.num_folds, fold_seed)?;
    Ok((dataset, truth))
}

/// One fold-assigned dataset plus the parameters that generated it.
/// Identical configs (including `seed`) give identical output.
pub fn simulate_dataset(config: &LinearDgpConfig) -> Result<(Dataset, GroundTruth), SimulationError> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    simulate_with_rng(config, &mut rng)
}

/// Summary statistics of a simulated novel cell.
#[derive(Debug, Clone, PartialEq)]
pub struct NovelCell {
    /// `mean(S(a'))`
    pub mean: Vec<f64>,
    /// Sample covariance of `S(a')` divided by the number of units.
    pub mean_covariance: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NovelOutcome {
    pub estimate: f64,
    pub squared_error: f64,
    pub ci_lower: f64,
    pub ci_upper: f64,
    pub covered: bool,
}

pub fn draw_novel_cell<R: Rng>(config: &LinearDgpConfig, truth: &GroundTruth, rng: &mut R) -> NovelCell {
    let d = config.surrogate_dim;
    let n = config.novel_units_or_default();
    let first_stage = config.novel_first_stage_or_default();
    let draws: Vec<Vec<f64>> = (0..n).map(|_| draw_unit(config, truth, &first_stage, rng).0).collect();
    let mean: Vec<f64> = (0..d).map(|j| draws.iter().map(|s| s[j]).sum::<f64>() / n as f64).collect();
    let denom = if n > 1 { (n - 1) as f64 * n as f64 } else { f64::INFINITY };
    let mean_covariance =
        (0..d).map(|i| (0..d).map(|j| draws.iter().map(|s| (s[i] - mean[i]) * (s[j] - mean[j])).sum::<f64>() / denom).collect()).collect();
    NovelCell { mean, mean_covariance }
}

impl NovelCell {
    /// Plug-in estimate `mean(S(a')) beta_hat` with interval
    /// `+- q sqrt(m' V_beta m + beta_hat' V_m beta_hat)`.
    pub fn evaluate(
        &self,
        beta_hat: &[f64],
        beta_covariance: &DMatrix<f64>,
        target: f64,
        alpha: f64,
    ) -> Result<NovelOutcome, SimulationError> {
        let d = self.mean.len();
        if beta_hat.len() != d || beta_covariance.nrows() != d || beta_covariance.ncols() != d {
            return Err(SimulationError::Config(format!("estimate has dimension {} but the novel cell has dimension {d}", beta_hat.len())));
        }
        let m = DVector::from_column_slice(&self.mean);
        let b = DVector::from_column_slice(beta_hat);
        let v_m = DMatrix::from_fn(d, d, |i, j| self.mean_covariance[i][j]);
        let variance = (m.transpose() * beta_covariance * &m)[(0, 0)] + (b.transpose() * v_m * &b)[(0, 0)];
        let half_width = two_sided_multiplier(alpha) * variance.max(0.0).sqrt();
        let estimate = m.dot(&b);
        let ci_lower = estimate - half_width;
        let ci_upper = estimate + half_width;
        Ok(NovelOutcome {
            estimate,
            squared_error: (target - estimate).powi(2),
            ci_lower,
            ci_upper,
            covered: ci_lower <= target && target <= ci_upper,
        })
    }
}

/// Draws a fresh novel cell for `truth` and scores `report` on it.
pub fn evaluate_novel_cell(
    report: &EstimateReport,
    truth: &GroundTruth,
    config: &LinearDgpConfig,
    alpha: f64,
    seed: u64,
) -> Result<NovelOutcome, SimulationError> {
    if truth.beta.len() != config.surrogate_dim {
        return Err(SimulationError::Config("ground truth does not match the config dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cell = draw_novel_cell(config, truth, &mut rng);
    cell.evaluate(&report.beta_hat, &report.covariance_matrix(), truth.novel_target, alpha)
}

pub fn run_estimator(tag: EstimatorTag, dataset: &Dataset) -> Result<EstimateReport, SimulationError> {
    Ok(match tag {
        EstimatorTag::JiveLFold => jive_lfold(&aggregate(dataset)?)?,
        EstimatorTag::Tsls => tsls(&aggregate(dataset)?)?,
        EstimatorTag::Ols => ols_surrogate_index(dataset)?,
        EstimatorTag::Jive2Fold => return Err(SimulationError::Config("the sweep supports JIVE_LFOLD, TSLS and OLS".into())),
    })
}

/// Generator for replication `rep` at grid point `num_cells`.
pub fn replication_rng(seed: u64, num_cells: usize, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(((num_cells as u64) << 32) | rep as u64);
    rng
}

/// Outcome of one replication for each requested estimator, in order.
pub type ReplicationOutcome = Vec<Result<NovelOutcome, String>>;

/// One replication: fresh structural draw, dataset, every estimator, and a
/// single novel cell shared by the estimators.
pub fn run_replication(
    config: &LinearDgpConfig,
    estimators: &[EstimatorTag],
    alpha: f64,
    rng: &mut ChaCha8Rng,
) -> Result<ReplicationOutcome, SimulationError> {
    let (dataset, truth) = simulate_with_rng(config, rng)?;
    let novel = draw_novel_cell(config, &truth, rng);
    Ok(estimators
        .iter()
        .map(|&tag| {
            let report = run_estimator(tag, &dataset).map_err(|e| e.to_string())?;
            novel.evaluate(&report.beta_hat, &report.covariance_matrix(), truth.novel_target, alpha).map_err(|e| e.to_string())
        })
        .collect())
}

/// Runs `f(rep)` for `rep in 0..reps` on `parallelism` threads and returns
/// results in replication order.
pub fn map_replications<T, F>(reps: usize, parallelism: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    {
        if parallelism > 1 {
            use rayon::prelude::*;
            if let Ok(pool) = rayon::ThreadPoolBuilder::new().num_threads(parallelism).build() {
                return pool.install(|| (0..reps).into_par_iter().map(&f).collect());
            }
        }
    }
    let _ = parallelism;
    (0..reps).map(f).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    #[serde(rename = "K")]
    pub num_cells: usize,
    pub estimator: EstimatorTag,
    pub mse: f64,
    pub mse_se: f64,
    pub coverage: f64,
    pub coverage_se: f64,
    pub n_reps: usize,
    pub n_failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
}

impl SweepResult {
    pub fn row(&self, num_cells: usize, estimator: EstimatorTag) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.num_cells == num_cells && r.estimator == estimator)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("K,estimator,mse,mse_se,coverage,coverage_se,n_reps,n_failures\n");
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.num_cells,
                r.estimator.as_str(),
                format_float(r.mse),
                format_float(r.mse_se),
                format_float(r.coverage),
                format_float(r.coverage_se),
                r.n_reps,
                r.n_failures
            );
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepSettings {
    pub k_grid: Vec<usize>,
    pub estimators: Vec<EstimatorTag>,
    pub replications: usize,
    pub alpha: f64,
    pub parallelism: usize,
    pub seed: u64,
}

impl Default for SweepSettings {
    fn default() -> Self {
        SweepSettings {
            k_grid: DEFAULT_K_GRID.to_vec(),
            estimators: vec![EstimatorTag::JiveLFold, EstimatorTag::Tsls, EstimatorTag::Ols],
            replications: 200,
            alpha: 0.05,
            parallelism: 1,
            seed: 0,
        }
    }
}

fn summarize(num_cells: usize, estimator: EstimatorTag, outcomes: &[&NovelOutcome], reps: usize) -> SweepRow {
    let n = outcomes.len();
    let nf = n as f64;
    let (mse, mse_se, coverage, coverage_se) = if n == 0 {
        (f64::NAN, f64::NAN, f64::NAN, f64::NAN)
    } else {
        let mse = outcomes.iter().map(|o| o.squared_error).sum::<f64>() / nf;
        let var = if n > 1 { outcomes.iter().map(|o| (o.squared_error - mse).powi(2)).sum::<f64>() / (nf - 1.0) } else { 0.0 };
        let coverage = outcomes.iter().filter(|o| o.covered).count() as f64 / nf;
        (mse, (var / nf).sqrt(), coverage, (coverage * (1.0 - coverage) / nf).sqrt())
    };
    SweepRow { num_cells, estimator, mse, mse_se, coverage, coverage_se, n_reps: reps, n_failures: reps - n }
}

/// MSE and novel-cell coverage for each `(K, estimator)`.
///
/// `base.num_cells` and `base.seed` are ignored in favour of the grid and
/// `settings.seed`. Estimator failures are counted per row; more than
/// [`MAX_FAILURE_RATE`] of failures in any row is an error that carries the
/// partial table.
pub fn run_sweep(base: &LinearDgpConfig, settings: &SweepSettings) -> Result<SweepResult, SimulationError> {
    if settings.k_grid.is_empty() {
        return Err(SimulationError::Config("K grid is empty".into()));
    }
    if settings.estimators.is_empty() {
        return Err(SimulationError::Config("no estimators requested".into()));
    }
    if settings.estimators.contains(&EstimatorTag::Jive2Fold) {
        return Err(SimulationError::Config("the sweep supports JIVE_LFOLD, TSLS and OLS".into()));
    }
    if settings.replications == 0 {
        return Err(SimulationError::Config("replications must be positive".into()));
    }
    if !(settings.alpha > 0.0 && settings.alpha < 1.0) {
        return Err(SimulationError::Config(format!("alpha must lie in (0, 1), got {}", settings.alpha)));
    }
    if settings.k_grid.iter().any(|&k| k == 0 || k > u32::MAX as usize) {
        return Err(SimulationError::Config("K grid entries must be in 1..=2^32-1".into()));
    }
    let mut rows = Vec::new();
    let mut first_problem: Option<(usize, EstimatorTag, usize, String)> = None;
    for &k in &settings.k_grid {
        let config = base.with_cells(k);
        config.validate()?;
        let outcomes = map_replications(settings.replications, settings.parallelism, |rep| {
            let mut rng = replication_rng(settings.seed, k, rep);
            run_replication(&config, &settings.estimators, settings.alpha, &mut rng)
        });
        let outcomes: Vec<ReplicationOutcome> = outcomes.into_iter().collect::<Result<_, _>>()?;
        for (e, &tag) in settings.estimators.iter().enumerate() {
            let ok: Vec<&NovelOutcome> = outcomes.iter().filter_map(|o| o[e].as_ref().ok()).collect();
            let row = summarize(k, tag, &ok, settings.replications);
            if row.n_failures as f64 > MAX_FAILURE_RATE * settings.replications as f64 && first_problem.is_none() {
                let err = outcomes.iter().find_map(|o| o[e].as_ref().err()).cloned().unwrap_or_default();
                first_problem = Some((k, tag, row.n_failures, err));
            }
            rows.push(row);
        }
    }
    let result = SweepResult { rows };
    match first_problem {
        None => Ok(result),
        Some((num_cells, estimator, failures, first_error)) => Err(SimulationError::TooManyFailures {
            num_cells,
            estimator,
            failures,
            reps: settings.replications,
            first_error,
            partial: Box::new(result),
        }),
    }
}

/// Large-`K` limit of 2SLS for the linear design when `Pi' Pi / K` converges
/// to `pi_second_moment`:
///
/// ```text
/// beta + (P + Sigma_e / n)^-1 gamma delta u_scale^2 / n
/// Sigma_e = u_scale^2 gamma gamma' + eta_scale^2 I
/// ```
pub fn tsls_probability_limit(config: &LinearDgpConfig, beta: &[f64], gamma: &[f64], pi_second_moment: &DMatrix<f64>) -> Option<Vec<f64>> {
    limit_with_noise_weight(config, beta, gamma, pi_second_moment, 1.0 / config.units_per_cell as f64)
}

/// Limit of unit-level OLS as the number of units grows:
/// `beta + (P + Sigma_e)^-1 gamma delta u_scale^2`.
pub fn ols_probability_limit(config: &LinearDgpConfig, beta: &[f64], gamma: &[f64], pi_second_moment: &DMatrix<f64>) -> Option<Vec<f64>> {
    limit_with_noise_weight(config, beta, gamma, pi_second_moment, 1.0)
}

fn limit_with_noise_weight(config: &LinearDgpConfig, beta: &[f64], gamma: &[f64], p: &DMatrix<f64>, w: f64) -> Option<Vec<f64>> {
    let d = beta.len();
    let u2 = config.u_scale * config.u_scale;
    let g = DVector::from_column_slice(gamma);
    let sigma_e = &g * g.transpose() * u2 + DMatrix::identity(d, d) * config.eta_scale.powi(2);
    let m = p + sigma_e * w;
    let shift = m.lu().solve(&(g * (config.delta * u2 * w)))?;
    Some(beta.iter().zip(shift.iter()).map(|(b, s)| b + s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn noise_free(num_cells: usize) -> LinearDgpConfig {
        LinearDgpConfig { num_cells, eps_scale: 0.0, eta_scale: 0.0, u_scale: 0.0, ..LinearDgpConfig::default() }
    }

    #[test]
    fn noise_free_units_sit_on_the_structural_line() {
        let config = LinearDgpConfig { seed: 3, ..noise_free(12) };
        let (ds, truth) = simulate_dataset(&config).unwrap();
        assert_eq!(ds.len(), 1200);
        assert_eq!(ds.num_folds(), Some(5));
        for r in ds.records() {
            assert_eq!(r.surrogate, truth.pi[r.cell_id - 1]);
            assert_eq!(r.outcome, dot(&r.surrogate, &truth.beta));
        }
    }

    #[test]
    fn same_seed_same_dataset() {
        let config = LinearDgpConfig { seed: 11, ..LinearDgpConfig::default() };
        let (a, ta) = simulate_dataset(&config).unwrap();
        let (b, tb) = simulate_dataset(&config).unwrap();
        assert_eq!(a, b);
        assert_eq!(ta, tb);
        let (c, _) = simulate_dataset(&LinearDgpConfig { seed: 12, ..config }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn eta_covariance_is_identity() {
        // Pi = 0 and gamma = 0 leave S = eta.
        let config = LinearDgpConfig {
            num_cells: 2000,
            first_stage: FirstStage::Gaussian { row_scale: 0.0 },
            gamma: Some(vec![0.0; 5]),
            seed: 5,
            ..LinearDgpConfig::default()
        };
        let (ds, _) = simulate_dataset(&config).unwrap();
        let n = ds.len() as f64;
        assert_eq!(ds.len(), 200_000);
        for i in 0..5 {
            for j in 0..5 {
                let c = ds.records().iter().map(|r| r.surrogate[i] * r.surrogate[j]).sum::<f64>() / n;
                let expected = if i == j { 1.0 } else { 0.0 };
                assert!((c - expected).abs() < 0.05, "cov[{i}][{j}] = {c}");
            }
        }
    }

    #[test]
    fn novel_target_for_unit_beta() {
        let d = 5;
        let beta = vec![1.0 / (d as f64).sqrt(); d];
        let config = LinearDgpConfig { beta: Some(beta), ..noise_free(4) };
        let (_, truth) = simulate_dataset(&config).unwrap();
        assert!((truth.novel_target - 2.23606797749979).abs() < 1e-12);
    }

    #[test]
    fn exact_estimate_has_zero_error() {
        let config = noise_free(10);
        let (_, truth) = simulate_dataset(&config).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let cell = draw_novel_cell(&config, &truth, &mut rng);
        let out = cell.evaluate(&truth.beta, &DMatrix::zeros(5, 5), truth.novel_target, 0.05).unwrap();
        assert!(out.squared_error < 1e-28);
        assert!(cell.evaluate(&[1.0], &DMatrix::zeros(1, 1), 0.0, 0.05).is_err());
    }

    #[test]
    fn known_variance_interval_has_nominal_coverage() {
        // beta_hat = beta exactly, so only the novel-cell mean varies.
        let config = LinearDgpConfig { seed: 2, ..LinearDgpConfig::default() };
        let (_, truth) = simulate_dataset(&config).unwrap();
        let zero = DMatrix::zeros(5, 5);
        let reps = 4000;
        let covered = (0..reps)
            .filter(|&r| {
                let mut rng = replication_rng(9, 1, r);
                let cell = draw_novel_cell(&config, &truth, &mut rng);
                cell.evaluate(&truth.beta, &zero, truth.novel_target, 0.05).unwrap().covered
            })
            .count();
        let rate = covered as f64 / reps as f64;
        let se = (0.95 * 0.05 / reps as f64).sqrt();
        assert!((rate - 0.95).abs() < 4.0 * se, "coverage {rate}");
    }

    #[test]
    fn noise_free_sweep_has_zero_mse() {
        let settings = SweepSettings { k_grid: vec![10, 30], replications: 4, ..SweepSettings::default() };
        let result = run_sweep(&noise_free(0), &settings).unwrap();
        assert_eq!(result.rows.len(), 6);
        for row in &result.rows {
            assert!(row.mse < 1e-20, "{row:?}");
            assert_eq!(row.n_failures, 0);
        }
    }

    #[test]
    fn sweep_is_independent_of_parallelism() {
        let base = LinearDgpConfig { units_per_cell: 20, ..LinearDgpConfig::default() };
        let s1 = SweepSettings { k_grid: vec![12, 20], replications: 16, seed: 4, ..SweepSettings::default() };
        let s4 = SweepSettings { parallelism: 4, ..s1.clone() };
        let a = run_sweep(&base, &s1).unwrap().to_csv();
        let b = run_sweep(&base, &s4).unwrap().to_csv();
        assert_eq!(a, b);
        assert_eq!(a.lines().count(), 7);
    }

    #[test]
    fn failures_are_counted_and_abort_the_sweep() {
        // d = 5 with K = 3 cells cannot identify JIVE or TSLS.
        let settings = SweepSettings { k_grid: vec![3], replications: 3, ..SweepSettings::default() };
        match run_sweep(&LinearDgpConfig::default(), &settings) {
            Err(SimulationError::TooManyFailures { partial, failures, .. }) => {
                assert_eq!(failures, 3);
                let ols = partial.row(3, EstimatorTag::Ols).unwrap();
                assert_eq!(ols.n_failures, 0);
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn config_validation() {
        let bad = [
            LinearDgpConfig { num_folds: 1, ..LinearDgpConfig::default() },
            LinearDgpConfig { eps_scale: -1.0, ..LinearDgpConfig::default() },
            LinearDgpConfig { beta: Some(vec![1.0]), ..LinearDgpConfig::default() },
            LinearDgpConfig { units_per_cell: 3, ..LinearDgpConfig::default() },
            LinearDgpConfig { first_stage: FirstStage::Fixed { rows: vec![vec![0.0; 5]] }, ..LinearDgpConfig::default() },
        ];
        for c in bad {
            assert!(matches!(simulate_dataset(&c), Err(SimulationError::Config(_))), "{c:?}");
        }
        let json = serde_json::to_string(&LinearDgpConfig::default()).unwrap();
        let back: LinearDgpConfig = serde_json::from_str(&json).unwrap();
        assert_eq!(back, LinearDgpConfig::default());
        let partial: LinearDgpConfig = serde_json::from_str(r#"{"num_cells": 7}"#).unwrap();
        assert_eq!(partial.num_cells, 7);
        assert_eq!(partial.units_per_cell, 100);
    }

    #[test]
    fn errors_in_variables_limit_halves_beta() {
        let config = LinearDgpConfig::errors_in_variables(2000, 1.0, 0.1);
        let p = DMatrix::from_element(1, 1, 0.01);
        let lim = tsls_probability_limit(&config, &[1.0], &[1.0], &p).unwrap();
        assert!((lim[0] - 0.5).abs() < 1e-12);
        let ols = ols_probability_limit(&config, &[1.0], &[1.0], &p).unwrap();
        assert!((ols[0] - 0.01 / 1.01).abs() < 1e-12);
    }

    #[test]
    fn scalar_limit_matches_closed_form() {
        let config = LinearDgpConfig { surrogate_dim: 1, eta_scale: 1.0, u_scale: 3.0, delta: 1.0, ..LinearDgpConfig::default() };
        let (beta, gamma, s2, n) = (0.7, 0.4, 0.02, 100.0);
        let lim = tsls_probability_limit(&config, &[beta], &[gamma], &DMatrix::from_element(1, 1, s2)).unwrap();
        let expected = beta + gamma * 9.0 / (n * s2 + gamma * gamma * 9.0 + 1.0);
        assert!((lim[0] - expected).abs() < 1e-14);
    }
}
