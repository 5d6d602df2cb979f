//! Monte Carlo estimators for the transition semigroup, the enstrophy-
//! weighted Feynman-Kac semigroup, and their first and second directional
//! derivatives through stochastic-integral weights.
//!
//! The plain semigroup averages `f(Y(t,x))` over uncontrolled paths; the
//! weighted one damps each sample by `exp(-2 gamma \int ||Y||_{1/2}^2)`.
//! Derivatives never differentiate `f`: the gradient sample is
//!
//! ```text
//!     exp(-2 gamma Y_ens) f(Y(t)) [ I/t - 4 gamma J ],
//!     I = \int <A^{eps/2} eta, dW>,   J = \int (1 - s/t) <A^{1/2} eta, A^{1/2} Y> ds,
//! ```
//!
//! with `eta` the tangent flow along the probed direction on the same path.

use rayon::prelude::*;

use crate::sde::{simulate_path, SdeError, SimulationPlan, TrajectoryBundle};
use crate::spectral::SpectralField;

#[derive(Debug, thiserror::Error)]
pub enum FkError {
    #[error("derivative estimators need a positive target time")]
    ZeroTime,
    #[error("all {0} sample paths failed")]
    AllPathsFailed(usize),
    #[error("{failed} of {total} paths aborted, above the 0.1% budget; first failure: {first}")]
    TooManyFailures {
        failed: usize,
        total: usize,
        first: String,
    },
}

/// Scalar observable of the terminal state, with the directional derivative
/// needed by the second-order estimator.
pub trait ScalarFunctional: Sync {
    fn value(&self, x: &SpectralField) -> f64;
    /// `<D_x f(x), h>`.
    fn gradient_dot(&self, x: &SpectralField, h: &SpectralField) -> f64;
}

/// `f(x) = ||x||^2`, the terminal cost of the control problem.
pub struct SquaredNorm;

impl ScalarFunctional for SquaredNorm {
    fn value(&self, x: &SpectralField) -> f64 {
        x.norm_sq()
    }

    fn gradient_dot(&self, x: &SpectralField, h: &SpectralField) -> f64 {
        2.0 * x.dot(h)
    }
}

/// A constant observable; its semigroup derivative vanishes in expectation.
pub struct Constant(pub f64);

impl ScalarFunctional for Constant {
    fn value(&self, _x: &SpectralField) -> f64 {
        self.0
    }

    fn gradient_dot(&self, _x: &SpectralField, _h: &SpectralField) -> f64 {
        0.0
    }
}

/// Monte Carlo estimate with its standard error and the number of paths
/// that completed.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct McEstimate {
    pub value: f64,
    pub stderr: f64,
    pub n_effective: usize,
}

/// Deterministic pairwise sum; the reduction order is fixed by the sample
/// order, not by worker scheduling.
pub fn pairwise_sum(xs: &[f64]) -> f64 {
    match xs.len() {
        0 => 0.0,
        1 => xs[0],
        2 => xs[0] + xs[1],
        n => {
            let mid = n / 2;
            pairwise_sum(&xs[..mid]) + pairwise_sum(&xs[mid..])
        }
    }
}

/// Sample mean and standard error of the mean.
pub fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    let n = xs.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = pairwise_sum(xs) / n as f64;
    if n == 1 {
        return (mean, 0.0);
    }
    let sq: Vec<f64> = xs.iter().map(|x| (x - mean) * (x - mean)).collect();
    let var = pairwise_sum(&sq) / (n - 1) as f64;
    (mean, (var / n as f64).sqrt())
}

fn estimate_from(samples: Vec<f64>) -> McEstimate {
    let (value, stderr) = mean_stderr(&samples);
    McEstimate {
        value,
        stderr,
        n_effective: samples.len(),
    }
}

/// Collect per-path samples under the abort budget: the estimate fails when
/// every path fails or more than 0.1% of them do. Silently dropping aborted
/// paths would bias the averages.
pub(crate) fn reduce_paths(results: Vec<Result<f64, SdeError>>) -> Result<McEstimate, FkError> {
    let total = results.len();
    let mut samples = Vec::with_capacity(total);
    let mut first_failure = None;
    let mut failed = 0usize;
    for r in results {
        match r {
            Ok(v) => samples.push(v),
            Err(e) => {
                failed += 1;
                if first_failure.is_none() {
                    first_failure = Some(e.to_string());
                }
            }
        }
    }
    if samples.is_empty() {
        return Err(FkError::AllPathsFailed(total));
    }
    if failed as f64 > 0.001 * total as f64 {
        return Err(FkError::TooManyFailures {
            failed,
            total,
            first: first_failure.unwrap_or_default(),
        });
    }
    Ok(estimate_from(samples))
}

/// One semigroup evaluation request: observable, target time, base point,
/// exponential weight and sample count.
pub struct SemigroupQuery<'a, F: ScalarFunctional> {
    pub f: &'a F,
    pub t: f64,
    pub x: &'a SpectralField,
    pub gamma: f64,
    pub n: usize,
}

/// Estimator front end bound to one model, jump component and step size.
/// All sampling is derived from `(master, path id)` substreams, so the
/// results do not depend on the worker count.
pub struct Semigroup<'a> {
    pub model: &'a crate::sde::GalerkinModel,
    pub jumps: &'a crate::noise::JumpModel,
    pub dt: f64,
    pub master: u64,
    /// Multiplier on the Gaussian forcing (1 = configured noise).
    pub noise_scale: f64,
    /// Integrate only the linear dynamics when false.
    pub include_nonlinearity: bool,
}

impl<'a> Semigroup<'a> {
    pub fn new(
        model: &'a crate::sde::GalerkinModel,
        jumps: &'a crate::noise::JumpModel,
        dt: f64,
        master: u64,
    ) -> Self {
        Semigroup {
            model,
            jumps,
            dt,
            master,
            noise_scale: 1.0,
            include_nonlinearity: true,
        }
    }

    fn plan(&self, t: f64, directions: Vec<SpectralField>, want_second: bool) -> SimulationPlan<'a> {
        let integrator = crate::sde::IntegratorConfig {
            dt: self.dt,
            horizon: t,
            scheme: crate::sde::Scheme::ExponentialEuler,
        };
        let mut plan = SimulationPlan::new(self.model, self.jumps, integrator, self.master);
        plan.tangents = directions;
        plan.want_second = want_second;
        plan.noise_scale = self.noise_scale;
        plan.include_nonlinearity = self.include_nonlinearity;
        plan
    }

    fn map_paths<G>(&self, plan: &SimulationPlan<'_>, x: &SpectralField, n: usize, g: G) -> Vec<Result<f64, SdeError>>
    where
        G: Fn(TrajectoryBundle) -> f64 + Sync,
    {
        (0..n as u64)
            .into_par_iter()
            .map(|path| simulate_path(plan, x, path, None).map(&g))
            .collect()
    }

    /// Transition semigroup `E[f(Y(t,x))]`.
    pub fn estimate_s<F: ScalarFunctional>(
        &self,
        q: &SemigroupQuery<'_, F>,
    ) -> Result<McEstimate, FkError> {
        assert!(q.gamma == 0.0, "plain semigroup takes gamma = 0");
        self.weighted(q)
    }

    /// Feynman-Kac semigroup `E[ exp(-2 gamma Y_ens(t)) f(Y(t,x)) ]`.
    /// At `t = 0` this is `f(x)` exactly.
    pub fn estimate_t<F: ScalarFunctional>(
        &self,
        q: &SemigroupQuery<'_, F>,
    ) -> Result<McEstimate, FkError> {
        self.weighted(q)
    }

    fn weighted<F: ScalarFunctional>(&self, q: &SemigroupQuery<'_, F>) -> Result<McEstimate, FkError> {
        assert!(q.n >= 1);
        if q.t == 0.0 {
            return Ok(McEstimate {
                value: q.f.value(q.x),
                stderr: 0.0,
                n_effective: q.n,
            });
        }
        let plan = self.plan(q.t, Vec::new(), false);
        let gamma = q.gamma;
        let results = self.map_paths(&plan, q.x, q.n, |b| {
            (-2.0 * gamma * b.enstrophy).exp() * q.f.value(&b.terminal)
        });
        reduce_paths(results)
    }

    /// First directional derivative of the weighted semigroup along `h`.
    pub fn bel_gradient<F: ScalarFunctional>(
        &self,
        q: &SemigroupQuery<'_, F>,
        h: &SpectralField,
    ) -> Result<McEstimate, FkError> {
        if q.t <= 0.0 {
            return Err(FkError::ZeroTime);
        }
        let plan = self.plan(q.t, vec![h.clone()], false);
        let gamma = q.gamma;
        let t = q.t;
        let results = self.map_paths(&plan, q.x, q.n, |b| {
            let track = &b.tangents[0];
            let weight = track.i_bel / t - 4.0 * gamma * track.j_bel;
            (-2.0 * gamma * b.enstrophy).exp() * q.f.value(&b.terminal) * weight
        });
        reduce_paths(results)
    }

    /// Several directions on common paths; the estimates are exactly linear
    /// in the direction because the tangent flow is.
    pub fn bel_gradient_multi<F: ScalarFunctional>(
        &self,
        q: &SemigroupQuery<'_, F>,
        hs: &[SpectralField],
    ) -> Result<Vec<McEstimate>, FkError> {
        if q.t <= 0.0 {
            return Err(FkError::ZeroTime);
        }
        let plan = self.plan(q.t, hs.to_vec(), false);
        let gamma = q.gamma;
        let t = q.t;
        let per_path: Vec<Result<Vec<f64>, SdeError>> = (0..q.n as u64)
            .into_par_iter()
            .map(|path| {
                simulate_path(&plan, q.x, path, None).map(|b| {
                    let w0 = (-2.0 * gamma * b.enstrophy).exp() * q.f.value(&b.terminal);
                    b.tangents
                        .iter()
                        .map(|track| w0 * (track.i_bel / t - 4.0 * gamma * track.j_bel))
                        .collect()
                })
            })
            .collect();
        let total = per_path.len();
        let mut rows = Vec::with_capacity(total);
        let mut failed = 0usize;
        let mut first_failure = None;
        for r in per_path {
            match r {
                Ok(row) => rows.push(row),
                Err(e) => {
                    failed += 1;
                    if first_failure.is_none() {
                        first_failure = Some(e.to_string());
                    }
                }
            }
        }
        if rows.is_empty() {
            return Err(FkError::AllPathsFailed(total));
        }
        if failed as f64 > 0.001 * total as f64 {
            return Err(FkError::TooManyFailures {
                failed,
                total,
                first: first_failure.unwrap_or_default(),
            });
        }
        Ok((0..hs.len())
            .map(|i| estimate_from(rows.iter().map(|row| row[i]).collect()))
            .collect())
    }

    /// Second directional derivative along `h`, combining the second-tangent
    /// stochastic weight with the cross term of the first-order weight.
    pub fn bel_hessian<F: ScalarFunctional>(
        &self,
        q: &SemigroupQuery<'_, F>,
        h: &SpectralField,
    ) -> Result<McEstimate, FkError> {
        if q.t <= 0.0 {
            return Err(FkError::ZeroTime);
        }
        let plan = self.plan(q.t, vec![h.clone()], true);
        let gamma = q.gamma;
        let t = q.t;
        let results = self.map_paths(&plan, q.x, q.n, |b| {
            let track = &b.tangents[0];
            let sec = b.second.as_ref().expect("second tangent requested");
            let damp = (-2.0 * gamma * b.enstrophy).exp();
            let fv = q.f.value(&b.terminal);
            let first_weight = track.i_bel / t - 4.0 * gamma * track.j_bel;
            let second_weight = sec.i_bel / t - 4.0 * gamma * (sec.j_bel + sec.j_eta);
            let cross = q.f.gradient_dot(&b.terminal, &track.terminal)
                - 4.0 * gamma * track.k_plain * fv;
            damp * (fv * second_weight + cross * first_weight)
        });
        reduce_paths(results)
    }
}
