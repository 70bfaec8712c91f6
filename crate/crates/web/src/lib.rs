//! WebAssembly bindings for the browser demo in `www/`.
//!
//! Each export takes plain numbers and returns a JSON string; errors become
//! JavaScript exceptions carrying the message.

use nalgebra::DMatrix;
use serde::Serialize;
use surrogate_bridge::estimators::EstimatorTag;
use surrogate_bridge::identification::{build_counterexample_dgp, verify_instances, FiniteDgpSpec, HeldOutCheck, VerificationReport};
use surrogate_bridge::simulation::{run_estimator, run_sweep, simulate_dataset, tsls_probability_limit, LinearDgpConfig, SweepSettings};
use wasm_bindgen::prelude::*;

fn parse_grid(k_grid: &str) -> Result<Vec<usize>, String> {
    k_grid
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| s.trim().parse::<usize>().map_err(|_| format!("bad K value `{s}`")))
        .collect()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// MSE and coverage of JIVE, 2SLS and OLS across `k_grid` (comma-separated)
/// on the linear design with `dim` surrogates.
pub fn mse_curve_json(k_grid: &str, replications: usize, units_per_cell: usize, dim: usize, seed: u64) -> Result<String, String> {
    let base = LinearDgpConfig { surrogate_dim: dim, units_per_cell, ..LinearDgpConfig::default() };
    let settings = SweepSettings { k_grid: parse_grid(k_grid)?, replications, seed, ..SweepSettings::default() };
    let result = run_sweep(&base, &settings).map_err(|e| e.to_string())?;
    serde_json::to_string(&result).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Attenuation {
    /// large-K limit of 2SLS
    limit: f64,
    tsls: Vec<f64>,
    jive: Vec<f64>,
    ols: Vec<f64>,
    tsls_mean: f64,
    jive_mean: f64,
    ols_mean: f64,
}

/// Scalar errors-in-variables design `S = pi + U`, `Y = pi + eps` with
/// `|pi| = pi_scale`: estimates of `beta = 1` from each method.
pub fn attenuation_json(num_cells: usize, units_per_cell: usize, pi_scale: f64, replications: usize, seed: u64) -> Result<String, String> {
    if replications == 0 {
        return Err("replications must be positive".into());
    }
    if !(pi_scale.is_finite() && pi_scale > 0.0) {
        return Err(format!("pi_scale must be positive, got {pi_scale}"));
    }
    let config = LinearDgpConfig { units_per_cell, ..LinearDgpConfig::errors_in_variables(num_cells, 1.0, pi_scale) };
    config.validate().map_err(|e| e.to_string())?;
    let p = DMatrix::from_element(1, 1, pi_scale * pi_scale);
    let limit = tsls_probability_limit(&config, &[1.0], &[1.0], &p).ok_or("2SLS limit is undefined")?[0];
    let (mut tsls, mut jive, mut ols) = (Vec::new(), Vec::new(), Vec::new());
    for r in 0..replications as u64 {
        let c = LinearDgpConfig { seed: seed.wrapping_mul(1_000_003).wrapping_add(r), ..config.clone() };
        let (ds, _) = simulate_dataset(&c).map_err(|e| e.to_string())?;
        let est = |tag| run_estimator(tag, &ds).map(|r| r.beta_hat[0]).map_err(|e| e.to_string());
        tsls.push(est(EstimatorTag::Tsls)?);
        jive.push(est(EstimatorTag::JiveLFold)?);
        ols.push(est(EstimatorTag::Ols)?);
    }
    let out = Attenuation { limit, tsls_mean: mean(&tsls), jive_mean: mean(&jive), ols_mean: mean(&ols), tsls, jive, ols };
    serde_json::to_string(&out).map_err(|e| e.to_string())
}

#[derive(Serialize)]
struct Identification {
    #[serde(flatten)]
    report: VerificationReport,
    counterexample: Option<HeldOutCheck>,
}

/// Random finite instances: solves the bridge on training treatments and
/// reports the held-out gap, plus one instance that breaks strata
/// homogeneity.
pub fn identification_json(
    num_s1: usize,
    num_s2: usize,
    num_u2: usize,
    strata_effect: f64,
    instances: usize,
    seed: u64,
) -> Result<String, String> {
    let spec = FiniteDgpSpec {
        num_s1,
        num_s2,
        num_u2,
        // one more training arm than the completeness matrix has columns
        num_training: num_s1 * num_u2 + 1,
        strata_effect,
        ..FiniteDgpSpec::default()
    };
    let report = verify_instances(&spec, instances, seed, 1e-10).map_err(|e| e.to_string())?;
    let counterexample = build_counterexample_dgp(&spec, seed, 1e-2).ok().map(|(_, c)| c);
    serde_json::to_string(&Identification { report, counterexample }).map_err(|e| e.to_string())
}

#[wasm_bindgen]
pub fn mse_curve(k_grid: &str, replications: usize, units_per_cell: usize, dim: usize, seed: u32) -> Result<String, JsError> {
    mse_curve_json(k_grid, replications, units_per_cell, dim, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn attenuation(num_cells: usize, units_per_cell: usize, pi_scale: f64, replications: usize, seed: u32) -> Result<String, JsError> {
    attenuation_json(num_cells, units_per_cell, pi_scale, replications, seed as u64).map_err(|e| JsError::new(&e))
}

#[wasm_bindgen]
pub fn identification(
    num_s1: usize,
    num_s2: usize,
    num_u2: usize,
    strata_effect: f64,
    instances: usize,
    seed: u32,
) -> Result<String, JsError> {
    identification_json(num_s1, num_s2, num_u2, strata_effect, instances, seed as u64).map_err(|e| JsError::new(&e))
}
