//! Exact identification checks on finite-support data-generating processes.
//!
//! The causal structure is
//!
//! ```text
//! A -> S1 <- U1 -> Y,   A -> U2 -> S2 -> Y,   U2 -> Y,   S1 -> Y
//! ```
//!
//! with `(U1, S1(a))` independent of `(U2(a), S2(u2))` and `S2(u2)`
//! independent of everything else. A bridge `h(s1, s2)` solving
//! `E[Y - h(S) | A] = 0` over the training treatments must reproduce
//! `E[Y(a')]` for held-out treatments when effects are homogeneous across
//! `U1` strata and `(S1, U2)` is complete for `A`. Everything here is exact
//! summation over the tables; nothing is sampled except in
//! [`sample_dataset`].

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::data::{assign_folds, DataError, Dataset, UnitRecord};
use crate::linalg::{self, compensated_sum};
use crate::risk::{BridgeFunction, RiskError, TabularBridge};

/// Probability rows must sum to one within this.
pub const PROB_TOL: f64 = 1e-12;
/// Bridge residuals `max_a |E[Y - h(S) | A = a]|` must fall below this.
pub const BRIDGE_TOL: f64 = 1e-10;
/// Relative singular-value cutoff for ranks and pseudo-inverses.
pub const RANK_RTOL: f64 = 1e-10;

#[derive(Debug, Error)]
pub enum IdentificationError {
    #[error("invalid DGP parameters: {0}")]
    Spec(String),
    #[error("probability table `{table}` row {row} sums to {sum} instead of 1")]
    Probability { table: &'static str, row: usize, sum: f64 },
    #[error("strata homogeneity violated: |E[phi(S1(a), s2, U1, u2)]| reaches {max_violation:e}")]
    Homogeneity { max_violation: f64 },
    #[error("completeness fails: P[S1, U2 | A] has rank {rank}, needs full column rank {required}")]
    Completeness { rank: usize, required: usize },
    #[error("no bridge solves the moment restriction: residual {residual:e} exceeds {BRIDGE_TOL:e}")]
    NoBridge { residual: f64 },
    #[error("treatment {0} is used for training and cannot be held out")]
    NotHeldOut(usize),
    #[error("could not construct a counterexample with gap above {threshold} in {attempts} attempts")]
    NoCounterexample { threshold: f64, attempts: usize },
    #[error(transparent)]
    Risk(#[from] RiskError),
    #[error(transparent)]
    Data(#[from] DataError),
}

/// Finite potential-outcome tables.
///
/// Index conventions: `s1_table[a][u1][s1] = P[S1(a) = s1 | U1 = u1]`,
/// `u2_table[a][u2] = P[U2(a) = u2]`, `s2_table[u2][s2] = P[S2(u2) = s2]`,
/// `y_table[s1][s2][u2][u1] = E[Y(s1, s2, u2) | U1 = u1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FiniteDgp {
    pub treatment_labels: Vec<String>,
    /// Treatments seen historically, indices into `treatment_labels`.
    pub training: Vec<usize>,
    pub held_out: Vec<usize>,
    /// Design distribution over `training`, aligned with it.
    pub treatment_probs: Vec<f64>,
    pub u1_labels: Vec<String>,
    pub u1_probs: Vec<f64>,
    pub u2_labels: Vec<String>,
    /// Observed surrogate values; these are the support labels of `S1`, `S2`.
    pub s1_values: Vec<f64>,
    pub s2_values: Vec<f64>,
    pub s1_table: Vec<Vec<Vec<f64>>>,
    pub u2_table: Vec<Vec<f64>>,
    pub s2_table: Vec<Vec<f64>>,
    pub y_table: Vec<Vec<Vec<Vec<f64>>>>,
    /// Standard deviation of the Gaussian noise added to `Y` when sampling.
    pub y_noise_sd: f64,
}

/// Parameters for random DGP construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FiniteDgpSpec {
    pub num_training: usize,
    pub num_held_out: usize,
    pub num_s1: usize,
    pub num_s2: usize,
    pub num_u1: usize,
    pub num_u2: usize,
    /// Scale of the mean-zero `U1` effect on `Y`; zero removes strata
    /// heterogeneity altogether.
    pub strata_effect: f64,
    pub y_noise_sd: f64,
}

impl Default for FiniteDgpSpec {
    fn default() -> Self {
        FiniteDgpSpec { num_training: 4, num_held_out: 1, num_s1: 2, num_s2: 2, num_u1: 2, num_u2: 2, strata_effect: 0.5, y_noise_sd: 0.0 }
    }
}

impl FiniteDgpSpec {
    fn check(&self) -> Result<(), IdentificationError> {
        let sizes = [
            ("training treatments", self.num_training),
            ("S1", self.num_s1),
            ("S2", self.num_s2),
            ("U1", self.num_u1),
            ("U2", self.num_u2),
        ];
        for (name, n) in sizes {
            if n < 2 {
                return Err(IdentificationError::Spec(format!("support of {name} needs at least 2 atoms, got {n}")));
            }
        }
        if self.num_held_out == 0 {
            return Err(IdentificationError::Spec("need at least one held-out treatment".into()));
        }
        if self.num_s2 < self.num_u2 {
            return Err(IdentificationError::Spec(format!(
                "S2 ({}) must have at least as many atoms as U2 ({}) for a bridge to exist",
                self.num_s2, self.num_u2
            )));
        }
        if !(self.strata_effect >= 0.0) || !(self.y_noise_sd >= 0.0) {
            return Err(IdentificationError::Spec("scales must be nonnegative".into()));
        }
        Ok(())
    }
}

/// Bridge on the `(s1, s2)` support with its moment residual.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BridgeSolution {
    pub h: TabularBridge,
    /// `max_a |E[Y - h(S) | A = a]|` over training treatments.
    pub residual_norm: f64,
}

impl BridgeSolution {
    pub fn bridge(&self) -> BridgeFunction {
        BridgeFunction::Tabular(self.h.clone())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeldOutCheck {
    /// `E[Y(a')]`
    pub lhs: f64,
    /// `E[h(S(a'))]`
    pub rhs: f64,
    pub gap: f64,
}

fn random_simplex<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    // bounded away from zero so every atom is reachable
    let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.2..1.0)).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|x| x / total).collect()
}

fn labels(prefix: &str, n: usize) -> Vec<String> {
    (0..n).map(|i| format!("{prefix}{i}")).collect()
}

/// Draws the tables shared by valid instances and counterexamples. The
/// outcome table is filled by the caller.
fn random_skeleton(spec: &FiniteDgpSpec, rng: &mut ChaCha8Rng) -> FiniteDgp {
    let num_a = spec.num_training + spec.num_held_out;
    let s1_table = (0..num_a).map(|_| (0..spec.num_u1).map(|_| random_simplex(rng, spec.num_s1)).collect()).collect();
    let u2_table = (0..num_a).map(|_| random_simplex(rng, spec.num_u2)).collect();
    let s2_table = (0..spec.num_u2).map(|_| random_simplex(rng, spec.num_s2)).collect();
    FiniteDgp {
        treatment_labels: labels("a", num_a),
        training: (0..spec.num_training).collect(),
        held_out: (spec.num_training..num_a).collect(),
        treatment_probs: random_simplex(rng, spec.num_training),
        u1_labels: labels("u1_", spec.num_u1),
        u1_probs: random_simplex(rng, spec.num_u1),
        u2_labels: labels("u2_", spec.num_u2),
        s1_values: (0..spec.num_s1).map(|i| i as f64).collect(),
        s2_values: (0..spec.num_s2).map(|i| i as f64).collect(),
        s1_table,
        u2_table,
        s2_table,
        y_table: vec![vec![vec![vec![0.0; spec.num_u1]; spec.num_u2]; spec.num_s2]; spec.num_s1],
        y_noise_sd: spec.y_noise_sd,
    }
}

/// Random valid instance. The outcome table is additive,
/// `E[Y(s1, s2, u2) | U1 = u1] = f(s1, s2, u2) + g(u1, s2, u2)` with `g`
/// mean zero under `P[U1]`, which makes strata homogeneity hold exactly.
pub fn build_finite_dgp(spec: &FiniteDgpSpec, seed: u64) -> Result<FiniteDgp, IdentificationError> {
    spec.check()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dgp = random_skeleton(spec, &mut rng);
    let p_u1 = dgp.u1_probs.clone();
    for s2 in 0..spec.num_s2 {
        for u2 in 0..spec.num_u2 {
            let raw: Vec<f64> = (0..spec.num_u1).map(|_| rng.random_range(-1.0..1.0)).collect();
            let mean: f64 = raw.iter().zip(&p_u1).map(|(g, p)| g * p).sum();
            for s1 in 0..spec.num_s1 {
                let f = rng.random_range(-0.5..0.5);
                for (u1, r) in raw.iter().enumerate() {
                    dgp.y_table[s1][s2][u2][u1] = f + spec.strata_effect * 0.5 * (r - mean);
                }
            }
        }
    }
    dgp.validate()?;
    Ok(dgp)
}

/// An instance that keeps every assumption except strata homogeneity: the
/// `U1` effect on `Y` interacts with `S1`. Seeds `seed, seed + 1, ..` are
/// tried until the held-out gap exceeds `threshold`.
pub fn build_counterexample_dgp(spec: &FiniteDgpSpec, seed: u64, threshold: f64) -> Result<(FiniteDgp, HeldOutCheck), IdentificationError> {
    spec.check()?;
    let mut spec = spec.clone();
    // square completeness matrix: any E[Y | A] is reachable, so a bridge exists
    spec.num_training = spec.num_s1 * spec.num_u2;
    const ATTEMPTS: usize = 1000;
    for attempt in 0..ATTEMPTS as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(attempt));
        let mut dgp = random_skeleton(&spec, &mut rng);
        for s1 in 0..spec.num_s1 {
            let g: Vec<f64> = (0..spec.num_u1).map(|_| rng.random_range(-1.0..1.0)).collect();
            for s2 in 0..spec.num_s2 {
                for u2 in 0..spec.num_u2 {
                    let f = rng.random_range(-0.5..0.5);
                    for (u1, gu) in g.iter().enumerate() {
                        dgp.y_table[s1][s2][u2][u1] = f + gu;
                    }
                }
            }
        }
        dgp.check_probabilities()?;
        if dgp.completeness_rank() < dgp.completeness_columns() {
            continue;
        }
        let Ok(sol) = solve_bridge(&dgp) else { continue };
        let check = verify_theorem1(&dgp, &sol, dgp.held_out[0])?;
        if check.gap > threshold {
            return Ok((dgp, check));
        }
    }
    Err(IdentificationError::NoCounterexample { threshold, attempts: ATTEMPTS })
}

impl FiniteDgp {
    pub fn num_treatments(&self) -> usize {
        self.treatment_labels.len()
    }

    pub fn num_s1(&self) -> usize {
        self.s1_values.len()
    }

    pub fn num_s2(&self) -> usize {
        self.s2_values.len()
    }

    pub fn num_u1(&self) -> usize {
        self.u1_probs.len()
    }

    pub fn num_u2(&self) -> usize {
        self.u2_labels.len()
    }

    /// Checks probabilities, strata homogeneity, and completeness.
    pub fn validate(&self) -> Result<(), IdentificationError> {
        self.check_probabilities()?;
        let violation = self.homogeneity_violation();
        if violation > PROB_TOL {
            return Err(IdentificationError::Homogeneity { max_violation: violation });
        }
        let rank = self.completeness_rank();
        let required = self.completeness_columns();
        if rank < required {
            return Err(IdentificationError::Completeness { rank, required });
        }
        Ok(())
    }

    pub fn check_probabilities(&self) -> Result<(), IdentificationError> {
        let check = |table: &'static str, row: usize, probs: &[f64]| {
            let sum = compensated_sum(probs.iter().copied());
            if (sum - 1.0).abs() > PROB_TOL || probs.iter().any(|&p| !(p >= 0.0)) {
                Err(IdentificationError::Probability { table, row, sum })
            } else {
                Ok(())
            }
        };
        let na = self.num_treatments();
        if self.s1_table.len() != na || self.u2_table.len() != na {
            return Err(IdentificationError::Spec("treatment tables have the wrong number of rows".into()));
        }
        if self.treatment_probs.len() != self.training.len() {
            return Err(IdentificationError::Spec("treatment_probs must align with training".into()));
        }
        if self.training.iter().chain(&self.held_out).any(|&a| a >= na) {
            return Err(IdentificationError::Spec("treatment index out of range".into()));
        }
        check("treatment_probs", 0, &self.treatment_probs)?;
        check("u1_probs", 0, &self.u1_probs)?;
        for (a, rows) in self.s1_table.iter().enumerate() {
            if rows.len() != self.num_u1() {
                return Err(IdentificationError::Spec(format!("s1_table[{a}] needs {} rows", self.num_u1())));
            }
            for (u1, row) in rows.iter().enumerate() {
                if row.len() != self.num_s1() {
                    return Err(IdentificationError::Spec(format!("s1_table[{a}][{u1}] has the wrong width")));
                }
                check("s1_table", a * self.num_u1() + u1, row)?;
            }
        }
        for (a, row) in self.u2_table.iter().enumerate() {
            if row.len() != self.num_u2() {
                return Err(IdentificationError::Spec(format!("u2_table[{a}] has the wrong width")));
            }
            check("u2_table", a, row)?;
        }
        if self.s2_table.len() != self.num_u2() {
            return Err(IdentificationError::Spec("s2_table needs one row per U2 atom".into()));
        }
        for (u2, row) in self.s2_table.iter().enumerate() {
            if row.len() != self.num_s2() {
                return Err(IdentificationError::Spec(format!("s2_table[{u2}] has the wrong width")));
            }
            check("s2_table", u2, row)?;
        }
        let y_shape_ok = self.y_table.len() == self.num_s1()
            && self.y_table.iter().all(|a| {
                a.len() == self.num_s2() && a.iter().all(|b| b.len() == self.num_u2() && b.iter().all(|c| c.len() == self.num_u1()))
            });
        if !y_shape_ok {
            return Err(IdentificationError::Spec("y_table must be indexed [s1][s2][u2][u1]".into()));
        }
        Ok(())
    }

    /// `phi(s1, s2, u1, u2) = E[Y(s1, s2, u2) | U1 = u1] - E[Y(s1, s2, u2)]`.
    pub fn phi(&self, s1: usize, s2: usize, u1: usize, u2: usize) -> f64 {
        let cell = &self.y_table[s1][s2][u2];
        let marginal = compensated_sum(cell.iter().zip(&self.u1_probs).map(|(y, p)| y * p));
        cell[u1] - marginal
    }

    /// `max_{a, s2, u2} |sum_{s1, u1} phi(s1, s2, u1, u2) P[S1(a) = s1, U1 = u1]|`
    /// over every treatment, training or held out.
    pub fn homogeneity_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for a in 0..self.num_treatments() {
            for s2 in 0..self.num_s2() {
                for u2 in 0..self.num_u2() {
                    let terms = (0..self.num_s1()).flat_map(|s1| (0..self.num_u1()).map(move |u1| (s1, u1)));
                    let total =
                        compensated_sum(terms.map(|(s1, u1)| self.phi(s1, s2, u1, u2) * self.s1_table[a][u1][s1] * self.u1_probs[u1]));
                    worst = worst.max(total.abs());
                }
            }
        }
        worst
    }

    /// `P[S1(a) = s1]`, marginalising `U1`.
    pub fn s1_marginal(&self, a: usize) -> Vec<f64> {
        (0..self.num_s1()).map(|s1| compensated_sum((0..self.num_u1()).map(|u1| self.u1_probs[u1] * self.s1_table[a][u1][s1]))).collect()
    }

    /// `P[S1 = s1, U2 = u2 | A = a]` flattened as `s1 * |U2| + u2`.
    pub fn s1_u2_joint(&self, a: usize) -> Vec<f64> {
        let s1 = self.s1_marginal(a);
        s1.iter().flat_map(|p1| self.u2_table[a].iter().map(move |p2| p1 * p2)).collect()
    }

    pub fn completeness_columns(&self) -> usize {
        self.num_s1() * self.num_u2()
    }

    /// Rows: training treatments. Columns: `(s1, u2)` atoms.
    pub fn completeness_matrix(&self) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = self.training.iter().map(|&a| self.s1_u2_joint(a)).collect();
        DMatrix::from_fn(rows.len(), self.completeness_columns(), |i, j| rows[i][j])
    }

    pub fn completeness_rank(&self) -> usize {
        linalg::rank(&self.completeness_matrix(), RANK_RTOL)
    }

    /// `(s1, s2)` surrogate support points in `s1`-major order.
    pub fn support_points(&self) -> Vec<Vec<f64>> {
        self.s1_values.iter().flat_map(|&s1| self.s2_values.iter().map(move |&s2| vec![s1, s2])).collect()
    }

    /// `P[S1 = s1, S2 = s2 | A = a]` in [`Self::support_points`] order.
    pub fn surrogate_probs(&self, a: usize) -> Vec<f64> {
        let s1 = self.s1_marginal(a);
        let mut out = Vec::with_capacity(self.num_s1() * self.num_s2());
        for p1 in &s1 {
            for s2 in 0..self.num_s2() {
                out.push(p1 * compensated_sum((0..self.num_u2()).map(|u2| self.u2_table[a][u2] * self.s2_table[u2][s2])));
            }
        }
        out
    }

    /// Rows: training treatments. Columns: support points.
    pub fn moment_matrix(&self) -> DMatrix<f64> {
        let rows: Vec<Vec<f64>> = self.training.iter().map(|&a| self.surrogate_probs(a)).collect();
        DMatrix::from_fn(rows.len(), self.num_s1() * self.num_s2(), |i, j| rows[i][j])
    }

    /// `E[Y(a)]`, equal to `E[Y | A = a]` under randomisation.
    pub fn mean_outcome(&self, a: usize) -> f64 {
        let mut terms = Vec::with_capacity(self.num_s1() * self.num_s2() * self.num_u1() * self.num_u2());
        for u1 in 0..self.num_u1() {
            for s1 in 0..self.num_s1() {
                let p_s1 = self.u1_probs[u1] * self.s1_table[a][u1][s1];
                for u2 in 0..self.num_u2() {
                    let p_u2 = p_s1 * self.u2_table[a][u2];
                    for s2 in 0..self.num_s2() {
                        terms.push(p_u2 * self.s2_table[u2][s2] * self.y_table[s1][s2][u2][u1]);
                    }
                }
            }
        }
        compensated_sum(terms)
    }

    /// `E[h(S(a))]` with `S(a) = (S1(a), S2(U2(a)))`.
    pub fn mean_bridge(&self, a: usize, h: &BridgeFunction) -> Result<f64, RiskError> {
        let mut terms = Vec::new();
        for s1 in 0..self.num_s1() {
            let p_s1 = compensated_sum((0..self.num_u1()).map(|u1| self.u1_probs[u1] * self.s1_table[a][u1][s1]));
            for u2 in 0..self.num_u2() {
                for s2 in 0..self.num_s2() {
                    let p = p_s1 * self.u2_table[a][u2] * self.s2_table[u2][s2];
                    terms.push(p * h.evaluate(&[self.s1_values[s1], self.s2_values[s2]])?);
                }
            }
        }
        Ok(compensated_sum(terms))
    }

    /// `E[h(S1, S2) | S1 = s1, U2 = u2]` flattened as `s1 * |U2| + u2`.
    pub fn bridge_given_s1_u2(&self, h: &BridgeFunction) -> Result<Vec<f64>, RiskError> {
        let mut out = Vec::with_capacity(self.completeness_columns());
        for s1 in 0..self.num_s1() {
            for u2 in 0..self.num_u2() {
                let terms = (0..self.num_s2())
                    .map(|s2| Ok(self.s2_table[u2][s2] * h.evaluate(&[self.s1_values[s1], self.s2_values[s2]])?))
                    .collect::<Result<Vec<f64>, RiskError>>()?;
                out.push(compensated_sum(terms));
            }
        }
        Ok(out)
    }

    /// Largest `|P[S2 | U2, S1, A = a] - P[S2 | U2, S1]|` over training
    /// treatments, both sides computed from the joint law of `(A, U2, S1, S2)`.
    pub fn s2_conditional_independence_gap(&self) -> f64 {
        let (ns1, ns2, nu2) = (self.num_s1(), self.num_s2(), self.num_u2());
        let idx = |u2: usize, s1: usize, s2: usize| (u2 * ns1 + s1) * ns2 + s2;
        let joints: Vec<Vec<f64>> = self
            .training
            .iter()
            .zip(&self.treatment_probs)
            .map(|(&a, &pa)| {
                let s1m = self.s1_marginal(a);
                let mut j = vec![0.0; nu2 * ns1 * ns2];
                for u2 in 0..nu2 {
                    for s1 in 0..ns1 {
                        for s2 in 0..ns2 {
                            j[idx(u2, s1, s2)] = pa * s1m[s1] * self.u2_table[a][u2] * self.s2_table[u2][s2];
                        }
                    }
                }
                j
            })
            .collect();
        let mut worst: f64 = 0.0;
        for u2 in 0..nu2 {
            for s1 in 0..ns1 {
                let pooled_den: f64 = joints.iter().flat_map(|j| (0..ns2).map(move |s2| j[idx(u2, s1, s2)])).sum();
                for s2 in 0..ns2 {
                    let pooled = joints.iter().map(|j| j[idx(u2, s1, s2)]).sum::<f64>() / pooled_den;
                    for j in &joints {
                        let den: f64 = (0..ns2).map(|t| j[idx(u2, s1, t)]).sum();
                        if den > 0.0 {
                            worst = worst.max((j[idx(u2, s1, s2)] / den - pooled).abs());
                        }
                    }
                }
            }
        }
        worst
    }
}

/// Solves `sum_s P[S = s | A = a] h(s) = E[Y | A = a]` over training
/// treatments; minimum-norm when underdetermined.
pub fn solve_bridge(dgp: &FiniteDgp) -> Result<BridgeSolution, IdentificationError> {
    let m = dgp.moment_matrix();
    let ey = DVector::from_iterator(dgp.training.len(), dgp.training.iter().map(|&a| dgp.mean_outcome(a)));
    let h = linalg::min_norm_lstsq(&m, &ey, RANK_RTOL);
    let h = TabularBridge::new(dgp.support_points(), h.iter().copied().collect()).expect("distinct support");
    let residual_norm = moment_residual(dgp, &BridgeFunction::Tabular(h.clone()))?;
    if !(residual_norm < BRIDGE_TOL) {
        return Err(IdentificationError::NoBridge { residual: residual_norm });
    }
    Ok(BridgeSolution { h, residual_norm })
}

/// `max_a |E[Y - h(S) | A = a]|` over training treatments.
pub fn moment_residual(dgp: &FiniteDgp, h: &BridgeFunction) -> Result<f64, RiskError> {
    let mut worst: f64 = 0.0;
    for &a in &dgp.training {
        worst = worst.max((dgp.mean_outcome(a) - dgp.mean_bridge(a, h)?).abs());
    }
    Ok(worst)
}

/// Compares `E[Y(a')]` with `E[h(S(a'))]` for a held-out treatment.
pub fn verify_theorem1(dgp: &FiniteDgp, solution: &BridgeSolution, holdout: usize) -> Result<HeldOutCheck, IdentificationError> {
    if dgp.training.contains(&holdout) {
        return Err(IdentificationError::NotHeldOut(holdout));
    }
    if holdout >= dgp.num_treatments() {
        return Err(IdentificationError::Spec(format!("treatment {holdout} does not exist")));
    }
    let lhs = dgp.mean_outcome(holdout);
    let rhs = dgp.mean_bridge(holdout, &solution.bridge())?;
    Ok(HeldOutCheck { lhs, rhs, gap: (lhs - rhs).abs() })
}

/// Draws `num_cells` experiment cells of `units_per_cell` units. Each cell
/// runs one training treatment drawn from the design distribution; the
/// surrogate is `(s1_value, s2_value)`.
pub fn sample_dataset(
    dgp: &FiniteDgp,
    num_cells: usize,
    units_per_cell: usize,
    num_folds: usize,
    seed: u64,
) -> Result<Dataset, IdentificationError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let weights = |w: &[f64]| WeightedIndex::new(w).map_err(|e| IdentificationError::Spec(e.to_string()));
    let treatment = weights(&dgp.treatment_probs)?;
    let u1 = weights(&dgp.u1_probs)?;
    let s1: Vec<Vec<WeightedIndex<f64>>> =
        dgp.s1_table.iter().map(|rows| rows.iter().map(|r| weights(r)).collect()).collect::<Result<_, _>>()?;
    let u2: Vec<WeightedIndex<f64>> = dgp.u2_table.iter().map(|r| weights(r)).collect::<Result<_, _>>()?;
    let s2: Vec<WeightedIndex<f64>> = dgp.s2_table.iter().map(|r| weights(r)).collect::<Result<_, _>>()?;

    let mut records = Vec::with_capacity(num_cells * units_per_cell);
    for cell in 1..=num_cells {
        let a = dgp.training[treatment.sample(&mut rng)];
        for _ in 0..units_per_cell {
            let u1_draw = u1.sample(&mut rng);
            let s1_draw = s1[a][u1_draw].sample(&mut rng);
            let u2_draw = u2[a].sample(&mut rng);
            let s2_draw = s2[u2_draw].sample(&mut rng);
            let noise: f64 = rng.sample(StandardNormal);
            let y = dgp.y_table[s1_draw][s2_draw][u2_draw][u1_draw] + dgp.y_noise_sd * noise;
            records.push(UnitRecord {
                cell_id: cell,
                fold_id: None,
                surrogate: vec![dgp.s1_values[s1_draw], dgp.s2_values[s2_draw]],
                outcome: y,
            });
        }
    }
    let fold_seed = rng.random();
    let dataset = Dataset::new(records, num_cells, 2)?;
    Ok(assign_folds(dataset, num_folds, fold_seed)?)
}

/// Outcome of the identification check on one random instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceCheck {
    pub seed: u64,
    pub residual_norm: f64,
    /// Largest gap over the held-out treatments.
    pub gap: f64,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerificationReport {
    pub spec: FiniteDgpSpec,
    pub tolerance: f64,
    pub instances: Vec<InstanceCheck>,
    pub max_gap: f64,
    pub all_pass: bool,
}

/// Builds `count` instances with seeds `seed, seed + 1, ..`, solves each
/// bridge and compares `E[Y(a')]` with `E[h(S(a'))]` on every held-out
/// treatment.
pub fn verify_instances(spec: &FiniteDgpSpec, count: usize, seed: u64, tolerance: f64) -> Result<VerificationReport, IdentificationError> {
    let mut instances = Vec::with_capacity(count);
    for i in 0..count as u64 {
        let instance_seed = seed.wrapping_add(i);
        let dgp = build_finite_dgp(spec, instance_seed)?;
        let sol = solve_bridge(&dgp)?;
        let mut gap = 0.0f64;
        for &a in &dgp.held_out {
            gap = gap.max(verify_theorem1(&dgp, &sol, a)?.gap);
        }
        instances.push(InstanceCheck { seed: instance_seed, residual_norm: sol.residual_norm, gap, pass: gap < tolerance });
    }
    let max_gap = instances.iter().map(|c| c.gap).fold(0.0, f64::max);
    let all_pass = instances.iter().all(|c| c.pass);
    Ok(VerificationReport { spec: spec.clone(), tolerance, instances, max_gap, all_pass })
}
