//! Forcing terms of the state equation: colored cylindrical Wiener
//! increments `A^{-eps/2} dW` and a finite-activity compensated Poisson
//! component, plus the moment diagnostics that certify the configuration.
//!
//! The jump coefficient is separable, `G(t,z) = s(z) * g`, with `g` a fixed
//! spectral gain field and `s` a bounded scalar shape of the mark. Bounded
//! marks make every exponential moment of the jump coefficient finite, so
//! the configuration checks reduce to explicit envelopes.

use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::rng::{role, substream};
use crate::spectral::{Basis, SpectralField};

#[derive(Debug, Error)]
pub enum NoiseError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("event window is reversed: [{0}, {1}]")]
    ReversedWindow(f64, f64),
}

/// Coloring of the cylindrical Wiener process: per-mode standard deviation
/// `lambda_k^{-eps/2} sqrt(dt)`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct GaussianNoise {
    pub eps: f64,
}

impl GaussianNoise {
    /// One colored increment drawn mode-by-mode from `rng`.
    pub fn sample_increment(
        &self,
        basis: &Basis,
        dt: f64,
        rng: &mut impl Rng,
    ) -> Result<SpectralField, NoiseError> {
        if dt <= 0.0 {
            return Err(NoiseError::NonPositiveStep(dt));
        }
        let sqrt_dt = dt.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let coeffs = basis
            .eigenvalues()
            .map(|lambda| lambda.powf(-0.5 * self.eps) * sqrt_dt * normal.sample(rng))
            .collect();
        Ok(basis.field_from(coeffs))
    }
}

/// Increment of the driving noise over one step: the cylindrical increment
/// `dW` (per-mode Brownian) and its colored image `A^{-eps/2} dW` that
/// actually forces the state.
#[derive(Debug, Clone)]
pub struct WienerIncrement {
    pub cylindrical: SpectralField,
    pub colored: SpectralField,
}

/// Per-mode Wiener substreams for one path. Streams are keyed by the mode's
/// wavenumber identity, so enlarging the basis leaves the draws of shared
/// modes untouched (common random numbers across truncation levels).
pub struct WienerSampler {
    rngs: Vec<rand_chacha::ChaCha12Rng>,
    color: Vec<f64>,
}

impl WienerSampler {
    pub fn new(basis: &Basis, eps: f64, master: u64, path: u64) -> Self {
        let rngs = basis
            .modes()
            .iter()
            .map(|mode| substream(master, path, role::WIENER, mode.stream_key()))
            .collect();
        let color = basis
            .eigenvalues()
            .map(|lambda| lambda.powf(-0.5 * eps))
            .collect();
        WienerSampler { rngs, color }
    }

    pub fn draw(&mut self, basis: &Basis, dt: f64) -> WienerIncrement {
        debug_assert!(dt > 0.0);
        let sqrt_dt = dt.sqrt();
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut cylindrical = Vec::with_capacity(self.rngs.len());
        let mut colored = Vec::with_capacity(self.rngs.len());
        for (rng, &color) in self.rngs.iter_mut().zip(&self.color) {
            let z = normal.sample(rng) * sqrt_dt;
            cylindrical.push(z);
            colored.push(color * z);
        }
        WienerIncrement {
            cylindrical: basis.field_from(cylindrical),
            colored: basis.field_from(colored),
        }
    }
}

/// Scalar shape of the jump marks. Both variants are bounded, which is what
/// keeps the exponential moment condition finite for every weight.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum MarkDistribution {
    Constant { value: f64 },
    ClippedGaussian { mean: f64, std: f64, clip: f64 },
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * core::f64::consts::PI).sqrt()
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + statrs::function::erf::erf(x / core::f64::consts::SQRT_2))
}

impl MarkDistribution {
    pub fn sample(&self, rng: &mut impl Rng) -> f64 {
        match *self {
            MarkDistribution::Constant { value } => value,
            MarkDistribution::ClippedGaussian { mean, std, clip } => {
                let normal = Normal::new(mean, std).expect("valid normal");
                normal.sample(rng).clamp(-clip, clip)
            }
        }
    }

    /// Closed-form mean of the shape.
    pub fn mean(&self) -> f64 {
        match *self {
            MarkDistribution::Constant { value } => value,
            MarkDistribution::ClippedGaussian { mean, std, clip } => {
                let (lo, hi) = (-clip, clip);
                let a = (lo - mean) / std;
                let b = (hi - mean) / std;
                lo * std_normal_cdf(a)
                    + hi * (1.0 - std_normal_cdf(b))
                    + mean * (std_normal_cdf(b) - std_normal_cdf(a))
                    + std * (std_normal_pdf(a) - std_normal_pdf(b))
            }
        }
    }

    /// Closed-form second moment of the shape.
    pub fn second_moment(&self) -> f64 {
        match *self {
            MarkDistribution::Constant { value } => value * value,
            MarkDistribution::ClippedGaussian { mean, std, clip } => {
                let (lo, hi) = (-clip, clip);
                let a = (lo - mean) / std;
                let b = (hi - mean) / std;
                let mass = std_normal_cdf(b) - std_normal_cdf(a);
                let interior = (mean * mean + std * std) * mass
                    + std * ((lo + mean) * std_normal_pdf(a) - (hi + mean) * std_normal_pdf(b));
                lo * lo * std_normal_cdf(a) + hi * hi * (1.0 - std_normal_cdf(b)) + interior
            }
        }
    }

    /// Hard bound on `|s(z)|`.
    pub fn sup_abs(&self) -> f64 {
        match *self {
            MarkDistribution::Constant { value } => value.abs(),
            MarkDistribution::ClippedGaussian { clip, .. } => clip,
        }
    }
}

/// Finite-activity jump component: Poisson arrivals at `rate`, i.i.d. marks,
/// separable coefficient `G(z) = s(z) * gain`.
#[derive(Debug, Clone)]
pub struct JumpModel {
    pub rate: f64,
    pub mark: MarkDistribution,
    pub gain: SpectralField,
    /// Exponential-moment exponent used by the configuration check.
    pub theta: f64,
}

/// One jump of the driving Levy process inside a sampling window.
#[derive(Debug, Clone)]
pub struct JumpEvent {
    pub time: f64,
    pub mark: f64,
    pub field: SpectralField,
}

impl JumpModel {
    /// Gain field `g_k = gain * lambda_k^{-decay}`.
    pub fn power_gain(basis: &Basis, gain: f64, decay: f64) -> SpectralField {
        let coeffs = basis
            .eigenvalues()
            .map(|lambda| gain * lambda.powf(-decay))
            .collect();
        basis.field_from(coeffs)
    }

    pub fn coefficient(&self, mark: f64) -> SpectralField {
        self.gain.scale(mark)
    }

    /// Hard bound `sup_z ||G(z)||`, finite by construction.
    pub fn coefficient_bound(&self) -> f64 {
        self.mark.sup_abs() * self.gain.norm()
    }

    /// Mark-averaged coefficient `rate * E[s] * gain`, the drift subtracted
    /// each step so the jump integral is compensated.
    pub fn compensator_drift(&self) -> SpectralField {
        self.gain.scale(self.rate * self.mark.mean())
    }

    /// Mean jump energy input per unit time, `rate * E[s^2] * ||gain||^2`.
    pub fn energy_rate(&self) -> f64 {
        self.rate * self.mark.second_moment() * self.gain.norm_sq()
    }

    /// Sample the jump events of the window `(t0, t1)`, sorted by time.
    pub fn sample_events(
        &self,
        t0: f64,
        t1: f64,
        times_rng: &mut impl Rng,
        marks_rng: &mut impl Rng,
    ) -> Result<Vec<JumpEvent>, NoiseError> {
        if t1 < t0 {
            return Err(NoiseError::ReversedWindow(t0, t1));
        }
        let horizon = t1 - t0;
        if self.rate <= 0.0 || horizon == 0.0 {
            return Ok(Vec::new());
        }
        let count = Poisson::new(self.rate * horizon)
            .expect("positive poisson mean")
            .sample(times_rng) as usize;
        let mut times = Vec::with_capacity(count);
        for _ in 0..count {
            // open-interval uniform: event times stay strictly inside
            let u = loop {
                let u = times_rng.random::<f64>();
                if u > 0.0 && u < 1.0 {
                    break u;
                }
            };
            times.push(t0 + u * horizon);
        }
        times.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
        Ok(times
            .into_iter()
            .map(|time| {
                let mark = self.mark.sample(marks_rng);
                JumpEvent {
                    time,
                    mark,
                    field: self.coefficient(mark),
                }
            })
            .collect())
    }

    /// Monte Carlo value of the exponential moment integral
    /// `horizon * rate * E[(1 + ||A^{alpha1} G||)^p exp(2 theta ||G||^2)]`.
    #[allow(clippy::too_many_arguments)]
    pub fn exponential_moment(
        &self,
        basis: &Basis,
        theta: f64,
        p: f64,
        alpha1: f64,
        horizon: f64,
        n_marks: usize,
        master: u64,
    ) -> f64 {
        assert!(p >= 2.0, "moment order must be at least 2");
        assert!((0.0..=0.5).contains(&alpha1), "alpha1 must lie in [0, 1/2]");
        if self.rate <= 0.0 {
            return 0.0;
        }
        let gain_alpha = basis.fractional_norm(&self.gain, alpha1);
        let gain_l2 = self.gain.norm();
        let mut rng = substream(master, 0, role::MARK_MC, 0);
        let mut acc = 0.0;
        for _ in 0..n_marks {
            let s = self.mark.sample(&mut rng).abs();
            acc += (1.0 + s * gain_alpha).powf(p) * (2.0 * theta * (s * gain_l2).powi(2)).exp();
        }
        horizon * self.rate * acc / n_marks as f64
    }

    /// Analytic envelope for [`Self::exponential_moment`] from the hard
    /// coefficient bound.
    pub fn exponential_moment_envelope(
        &self,
        basis: &Basis,
        theta: f64,
        p: f64,
        alpha1: f64,
        horizon: f64,
    ) -> f64 {
        let g_max = self.coefficient_bound();
        let lift = basis.max_eigenvalue().powf(alpha1);
        horizon * self.rate * (1.0 + lift * g_max).powf(p) * (2.0 * theta * g_max * g_max).exp()
    }
}

/// Result of the isometry diagnostic: the Monte Carlo second moment of the
/// compensated jump integral against its closed-form value.
#[derive(Debug, Clone, Copy)]
pub struct IsometryDiagnostic {
    pub mc_lhs: f64,
    pub analytic_rhs: f64,
    pub stderr: f64,
}

/// Estimate `E || \int_0^T \int G dpi_tilde ||^2` over `n_paths` independent
/// windows and compare with `T * rate * E[s^2] * ||gain||^2`.
pub fn ito_isometry_diagnostic(
    model: &JumpModel,
    horizon: f64,
    n_paths: usize,
    master: u64,
) -> IsometryDiagnostic {
    assert!(n_paths >= 100, "isometry diagnostic needs at least 100 paths");
    if model.rate <= 0.0 {
        return IsometryDiagnostic {
            mc_lhs: 0.0,
            analytic_rhs: 0.0,
            stderr: 0.0,
        };
    }
    let compensator = model.compensator_drift().scale(horizon);
    let samples: Vec<f64> = (0..n_paths as u64)
        .into_par_iter()
        .map(|path| {
            let mut times = substream(master, path, role::JUMP_TIMES, 0);
            let mut marks = substream(master, path, role::JUMP_MARKS, 0);
            let events = model
                .sample_events(0.0, horizon, &mut times, &mut marks)
                .expect("forward window");
            let mut m = compensator.scale(-1.0);
            for e in events {
                m.axpy(1.0, &e.field);
            }
            m.norm_sq()
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n_paths as f64;
    let var = samples.iter().map(|s| (s - mean).powi(2)).sum::<f64>() / (n_paths - 1) as f64;
    IsometryDiagnostic {
        mc_lhs: mean,
        analytic_rhs: horizon * model.energy_rate(),
        stderr: (var / n_paths as f64).sqrt(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn test_basis() -> Basis {
        Basis::new(8).unwrap()
    }

    fn test_model(basis: &Basis, rate: f64, mark: MarkDistribution) -> JumpModel {
        JumpModel {
            rate,
            mark,
            gain: JumpModel::power_gain(basis, 0.3, 1.0),
            theta: 0.25,
        }
    }

    #[test]
    fn wiener_rejects_nonpositive_step() {
        let basis = test_basis();
        let noise = GaussianNoise { eps: 1.5 };
        let mut rng = substream(1, 0, role::WIENER, 0);
        assert!(noise.sample_increment(&basis, 0.0, &mut rng).is_err());
        assert!(noise.sample_increment(&basis, -0.1, &mut rng).is_err());
    }

    #[test]
    fn wiener_increment_is_deterministic() {
        let basis = test_basis();
        let noise = GaussianNoise { eps: 1.5 };
        let a = noise
            .sample_increment(&basis, 1e-3, &mut substream(9, 2, role::WIENER, 0))
            .unwrap();
        let b = noise
            .sample_increment(&basis, 1e-3, &mut substream(9, 2, role::WIENER, 0))
            .unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn wiener_moments_match_coloring() {
        let basis = test_basis();
        let eps = 1.5;
        let noise = GaussianNoise { eps };
        let dt = 0.01;
        let n = 100_000;
        let mut rng = substream(4, 0, role::WIENER, 0);
        let mut sums = vec![0.0; basis.len()];
        let mut sq = vec![0.0; basis.len()];
        for _ in 0..n {
            let inc = noise.sample_increment(&basis, dt, &mut rng).unwrap();
            for (j, c) in inc.coeffs().iter().enumerate() {
                sums[j] += c;
                sq[j] += c * c;
            }
        }
        for (j, lambda) in basis.eigenvalues().enumerate() {
            let target_var = lambda.powf(-eps) * dt;
            let mean = sums[j] / n as f64;
            let var = sq[j] / n as f64 - mean * mean;
            // mean ~ N(0, var/n): four standard errors
            assert!(
                mean.abs() < 4.0 * (target_var / n as f64).sqrt(),
                "mode {j} mean {mean}"
            );
            // variance estimator std ~ var * sqrt(2/n): five standard errors
            assert!(
                (var - target_var).abs() < 5.0 * target_var * (2.0 / n as f64).sqrt(),
                "mode {j} var {var} vs {target_var}"
            );
        }
    }

    #[test]
    fn per_mode_streams_are_stable_across_truncation() {
        let small = Basis::new(4).unwrap();
        let large = Basis::new(16).unwrap();
        let mut a = WienerSampler::new(&small, 1.5, 11, 7);
        let mut b = WienerSampler::new(&large, 1.5, 11, 7);
        let ia = a.draw(&small, 1e-3);
        let ib = b.draw(&large, 1e-3);
        for j in 0..small.len() {
            assert_eq!(ia.cylindrical.coeffs()[j], ib.cylindrical.coeffs()[j]);
        }
    }

    #[test]
    fn zero_rate_yields_no_events() {
        let basis = test_basis();
        let model = test_model(&basis, 0.0, MarkDistribution::Constant { value: 1.0 });
        for seed in 0..32 {
            let events = model
                .sample_events(
                    0.0,
                    1.0,
                    &mut substream(seed, 0, role::JUMP_TIMES, 0),
                    &mut substream(seed, 0, role::JUMP_MARKS, 0),
                )
                .unwrap();
            assert!(events.is_empty());
        }
    }

    #[test]
    fn reversed_window_rejected() {
        let basis = test_basis();
        let model = test_model(&basis, 1.0, MarkDistribution::Constant { value: 1.0 });
        let mut t = substream(0, 0, role::JUMP_TIMES, 0);
        let mut m = substream(0, 0, role::JUMP_MARKS, 0);
        assert!(model.sample_events(1.0, 0.0, &mut t, &mut m).is_err());
    }

    #[test]
    fn events_sorted_and_inside_window() {
        let basis = test_basis();
        let model = test_model(&basis, 20.0, MarkDistribution::Constant { value: 1.0 });
        let mut t = substream(3, 1, role::JUMP_TIMES, 0);
        let mut m = substream(3, 1, role::JUMP_MARKS, 0);
        let events = model.sample_events(0.25, 0.75, &mut t, &mut m).unwrap();
        assert!(!events.is_empty());
        for pair in events.windows(2) {
            assert!(pair[0].time <= pair[1].time);
        }
        for e in &events {
            assert!(e.time > 0.25 && e.time < 0.75);
        }
    }

    #[test]
    fn poisson_count_law() {
        let basis = test_basis();
        let rate = 5.0;
        let model = test_model(&basis, rate, MarkDistribution::Constant { value: 1.0 });
        let n = 10_000;
        let mut total = 0usize;
        for path in 0..n as u64 {
            let mut t = substream(13, path, role::JUMP_TIMES, 0);
            let mut m = substream(13, path, role::JUMP_MARKS, 0);
            total += model.sample_events(0.0, 1.0, &mut t, &mut m).unwrap().len();
        }
        let mean = total as f64 / n as f64;
        let tol = 4.0 * (rate / n as f64).sqrt();
        assert!((mean - rate).abs() < tol, "count mean {mean}");
    }

    #[test]
    fn compensator_zero_cases() {
        let basis = test_basis();
        let zero_rate = test_model(&basis, 0.0, MarkDistribution::Constant { value: 1.0 });
        assert_eq!(zero_rate.compensator_drift().norm(), 0.0);
        // symmetric clipped marks have zero mean shape
        let symmetric = test_model(
            &basis,
            2.0,
            MarkDistribution::ClippedGaussian {
                mean: 0.0,
                std: 1.0,
                clip: 1.5,
            },
        );
        assert!(symmetric.compensator_drift().norm() < 1e-14);
    }

    #[test]
    fn clipped_gaussian_moments_match_monte_carlo() {
        let mark = MarkDistribution::ClippedGaussian {
            mean: 0.4,
            std: 1.3,
            clip: 1.1,
        };
        let n = 2_000_000;
        let mut rng = substream(21, 0, role::MARK_MC, 0);
        let mut s1 = 0.0;
        let mut s2 = 0.0;
        for _ in 0..n {
            let s = mark.sample(&mut rng);
            assert!(s.abs() <= mark.sup_abs());
            s1 += s;
            s2 += s * s;
        }
        let mc_mean = s1 / n as f64;
        let mc_second = s2 / n as f64;
        assert_relative_eq!(mark.mean(), mc_mean, epsilon = 4e-3);
        assert_relative_eq!(mark.second_moment(), mc_second, epsilon = 4e-3);
    }

    #[test]
    fn compensator_matches_mark_average() {
        let basis = test_basis();
        let model = test_model(
            &basis,
            3.0,
            MarkDistribution::ClippedGaussian {
                mean: 0.5,
                std: 0.8,
                clip: 1.2,
            },
        );
        let n = 1_000_000;
        let mut rng = substream(22, 0, role::MARK_MC, 0);
        let mut mean_field = basis.zero_field();
        let mut sq = 0.0;
        for _ in 0..n {
            let s = model.mark.sample(&mut rng);
            mean_field.axpy(model.rate / n as f64, &model.coefficient(s));
            sq += s * s;
        }
        let drift = model.compensator_drift();
        // componentwise within four standard errors of the mark MC
        let mark_std = (sq / n as f64 - (drift.coeffs()[0] / (model.rate * model.gain.coeffs()[0])).powi(2)).sqrt();
        for (a, (b, g)) in mean_field
            .coeffs()
            .iter()
            .zip(drift.coeffs().iter().zip(model.gain.coeffs()))
        {
            let se = model.rate * g.abs() * mark_std / (n as f64).sqrt();
            assert!((a - b).abs() <= 4.0 * se + 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn exponential_moment_zero_rate_and_envelope() {
        let basis = test_basis();
        let zero = test_model(&basis, 0.0, MarkDistribution::Constant { value: 1.0 });
        assert_eq!(zero.exponential_moment(&basis, 0.3, 2.0, 0.25, 1.0, 1000, 1), 0.0);

        let model = test_model(
            &basis,
            1.5,
            MarkDistribution::ClippedGaussian {
                mean: 0.0,
                std: 1.0,
                clip: 2.0,
            },
        );
        let value = model.exponential_moment(&basis, 0.3, 2.0, 0.25, 1.0, 20_000, 1);
        let envelope = model.exponential_moment_envelope(&basis, 0.3, 2.0, 0.25, 1.0);
        assert!(value > 0.0);
        assert!(value <= envelope, "{value} > envelope {envelope}");
    }

    #[test]
    fn exponential_moment_increases_with_weight() {
        let basis = test_basis();
        let model = test_model(
            &basis,
            1.0,
            MarkDistribution::ClippedGaussian {
                mean: 0.0,
                std: 1.0,
                clip: 2.0,
            },
        );
        let small = model.exponential_moment(&basis, 0.2, 2.0, 0.25, 1.0, 20_000, 5);
        let large = model.exponential_moment(&basis, 0.4, 2.0, 0.25, 1.0, 20_000, 5);
        assert!(large > small);
    }

    #[test]
    fn isometry_zero_rate() {
        let basis = test_basis();
        let model = test_model(&basis, 0.0, MarkDistribution::Constant { value: 1.0 });
        let diag = ito_isometry_diagnostic(&model, 1.0, 200, 3);
        assert_eq!(diag.mc_lhs, 0.0);
        assert_eq!(diag.analytic_rhs, 0.0);
        assert_eq!(diag.stderr, 0.0);
    }

    #[test]
    fn isometry_holds_for_generic_model() {
        let basis = test_basis();
        let model = test_model(
            &basis,
            2.0,
            MarkDistribution::ClippedGaussian {
                mean: 0.2,
                std: 1.0,
                clip: 1.8,
            },
        );
        let diag = ito_isometry_diagnostic(&model, 1.0, 10_000, 7);
        assert!(
            (diag.mc_lhs - diag.analytic_rhs).abs() <= 3.0 * diag.stderr,
            "lhs {} rhs {} stderr {}",
            diag.mc_lhs,
            diag.analytic_rhs,
            diag.stderr
        );
    }

    #[test]
    fn isometry_closed_form_for_deterministic_marks() {
        let basis = test_basis();
        let model = test_model(&basis, 3.0, MarkDistribution::Constant { value: 0.7 });
        let diag = ito_isometry_diagnostic(&model, 2.0, 5_000, 9);
        let expected = 3.0 * 2.0 * 0.49 * model.gain.norm_sq();
        assert_relative_eq!(diag.analytic_rhs, expected, epsilon = 1e-12);
        assert!((diag.mc_lhs - expected).abs() <= 3.0 * diag.stderr);
    }

    #[test]
    fn compensated_window_mean_is_zero() {
        let basis = test_basis();
        let model = test_model(
            &basis,
            4.0,
            MarkDistribution::ClippedGaussian {
                mean: 0.3,
                std: 1.0,
                clip: 1.5,
            },
        );
        let horizon = 0.5;
        let n = 20_000u64;
        let compensator = model.compensator_drift().scale(horizon);
        let mut mean = basis.zero_field();
        let mut sq = vec![0.0; basis.len()];
        for path in 0..n {
            let mut t = substream(31, path, role::JUMP_TIMES, 0);
            let mut m = substream(31, path, role::JUMP_MARKS, 0);
            let mut window = compensator.scale(-1.0);
            for e in model.sample_events(0.0, horizon, &mut t, &mut m).unwrap() {
                window.axpy(1.0, &e.field);
            }
            for (j, c) in window.coeffs().iter().enumerate() {
                sq[j] += c * c;
            }
            mean.axpy(1.0 / n as f64, &window);
        }
        for (j, c) in mean.coeffs().iter().enumerate() {
            let var = sq[j] / n as f64;
            let se = (var / n as f64).sqrt();
            assert!(c.abs() <= 4.0 * se + 1e-12, "mode {j}: mean {c}, se {se}");
        }
    }
}
