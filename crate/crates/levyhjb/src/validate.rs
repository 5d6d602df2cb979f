//! The invariant battery: every oracle and structural identity the toolkit
//! relies on, packaged as named checks that produce [`CheckRecord`]s. The
//! `fast` level runs reduced sample counts and skips the expensive
//! derivative and control checks; `full` runs everything.
//!
//! Unless a check pins its own scale (the tensor checks run at the
//! truncation levels where the identities are hardest), parameters come
//! from the supplied experiment configuration.

use rand::Rng;
use rayon::prelude::*;

use crate::config::ExperimentConfig;
use crate::fk::{mean_stderr, Semigroup, SemigroupQuery, SquaredNorm};
use crate::hjb::{
    self, dpp_consistency, evaluate_cost, hamiltonian, hamiltonian_bruteforce, hamiltonian_field,
    verify_identity, FeedbackLaw, HjbSolver,
};
use crate::noise::{ito_isometry_diagnostic, GaussianNoise, JumpModel, MarkDistribution};
use crate::report::{timed, CheckRecord, CheckStatus, RunReport};
use crate::rng::{role, substream};
use crate::sde::{
    simulate_ou, simulate_path, GalerkinModel, IntegratorConfig, RandomAdmissible, RecordMode,
    Scheme, SimulationPlan, ZeroControl,
};
use crate::spectral::{
    nonlinear_by_quadrature, trilinear_bound_ratio, Basis, SpectralField, TrilinearTensor,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

fn pass_if(name: &str, measured: f64, tolerance: f64, detail: String) -> CheckRecord {
    CheckRecord {
        name: name.to_string(),
        status: if measured <= tolerance {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured,
        tolerance: Some(tolerance),
        stderr: None,
        runtime_s: 0.0,
        detail,
    }
}

fn random_field(basis: &Basis, rng: &mut impl rand::Rng, scale: f64) -> SpectralField {
    let coeffs = (0..basis.len())
        .map(|_| rng.random_range(-scale..scale))
        .collect();
    basis.field_from(coeffs)
}

/// Exact antisymmetry of the stored convective tensor in its last two slots.
pub fn check_tensor_antisymmetry(tensor: &TrilinearTensor) -> CheckRecord {
    let mut map = std::collections::HashMap::new();
    for e in tensor.entries() {
        map.insert((e.a, e.b, e.c), e.value);
    }
    let mut worst = 0.0f64;
    for e in tensor.entries() {
        let mirror = map.get(&(e.a, e.c, e.b)).copied().unwrap_or(0.0);
        worst = worst.max((e.value + mirror).abs());
    }
    pass_if(
        "tensor_antisymmetry",
        worst,
        0.0,
        format!(
            "{} stored entries at m = {}; raw analytic defect {:.2e}",
            tensor.entries().len(),
            tensor.truncation(),
            tensor.raw_antisymmetry_defect()
        ),
    )
}

/// No diagonal (`b == c`) coefficients may survive construction.
pub fn check_tensor_diagonal(tensor: &TrilinearTensor) -> CheckRecord {
    let worst = tensor
        .entries()
        .iter()
        .filter(|e| e.b == e.c)
        .map(|e| e.value.abs())
        .fold(0.0f64, f64::max);
    pass_if("tensor_diagonal_zero", worst, 0.0, String::new())
}

/// `|<B_m(u), u>| <= 1e-10 max(1, ||u||^3 lambda_m)` over random fields.
pub fn check_energy_neutrality(levels: &[usize], n_fields: usize, seed: u64) -> CheckRecord {
    let mut worst_ratio = 0.0f64;
    for &m in levels {
        let basis = Basis::new(m).expect("basis");
        let tensor = TrilinearTensor::build(&basis);
        let mut rng = substream(seed, m as u64, role::INITIAL, 0);
        for _ in 0..n_fields {
            let u = random_field(&basis, &mut rng, 1.0);
            let bu = tensor.nonlinear(&u).expect("same basis");
            let bound = 1e-10 * 1.0f64.max(u.norm().powi(3) * basis.max_eigenvalue());
            worst_ratio = worst_ratio.max(bu.dot(&u).abs() / bound);
        }
    }
    pass_if(
        "nonlinearity_energy_neutrality",
        worst_ratio,
        1.0,
        format!("levels {levels:?}, {n_fields} fields each; ratio to 1e-10 bound"),
    )
}

/// Spectral nonlinearity against the grid-quadrature projection.
pub fn check_pseudospectral_oracle(m: usize, n_fields: usize, grid: usize, seed: u64) -> CheckRecord {
    let basis = Basis::new(m).expect("basis");
    let tensor = TrilinearTensor::build(&basis);
    let mut rng = substream(seed, 0, role::INITIAL, 1);
    let mut worst = 0.0f64;
    for _ in 0..n_fields {
        let u = random_field(&basis, &mut rng, 1.0);
        let spectral = tensor.nonlinear(&u).expect("same basis");
        let quad = nonlinear_by_quadrature(&basis, &u, grid);
        let rel = spectral.sub(&quad).norm() / spectral.norm().max(1e-12);
        worst = worst.max(rel);
    }
    pass_if(
        "pseudo_spectral_oracle",
        worst,
        1e-8,
        format!("m = {m}, {n_fields} fields, {grid}x{grid} grid"),
    )
}

/// Parseval, the fractional group law, and the interpolation inequality on
/// random fields.
pub fn check_norm_calculus(seed: u64) -> CheckRecord {
    let basis = Basis::new(12).expect("basis");
    let mut rng = substream(seed, 0, role::INITIAL, 2);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let u = random_field(&basis, &mut rng, 3.0);
        let direct: f64 = u.coeffs().iter().map(|c| c * c).sum();
        worst = worst.max((basis.fractional_norm_sq(&u, 0.0) - direct).abs());
        let a = rng.random_range(-1.0..1.0);
        let b = rng.random_range(-1.0..1.0);
        let two = basis.fractional_apply(&basis.fractional_apply(&u, a), b);
        let one = basis.fractional_apply(&u, a + b);
        worst = worst.max(two.sub(&one).norm() / (1.0 + one.norm()));
        let s1 = rng.random_range(-0.5..0.4);
        let s2 = s1 + rng.random_range(0.05..0.6);
        let theta = rng.random_range(0.0..1.0);
        let s = theta * s1 + (1.0 - theta) * s2;
        let lhs = basis.fractional_norm(&u, s);
        let rhs = basis.fractional_norm(&u, s1).powf(theta) * basis.fractional_norm(&u, s2).powf(1.0 - theta);
        worst = worst.max((lhs - rhs * (1.0 + 1e-12)).max(0.0));
    }
    pass_if(
        "norm_calculus",
        worst,
        1e-10,
        "Parseval, fractional group law, interpolation inequality".into(),
    )
}

/// Trilinear continuity ratio stays bounded over random triples; records the
/// empirical constant.
pub fn check_trilinear_ratio(seed: u64, n_triples: usize) -> CheckRecord {
    let basis = Basis::new(16).expect("basis");
    let tensor = TrilinearTensor::build(&basis);
    let mut rng = substream(seed, 0, role::INITIAL, 3);
    let mut max_ratio = 0.0f64;
    for _ in 0..n_triples {
        let u = random_field(&basis, &mut rng, 1.0);
        let v = random_field(&basis, &mut rng, 1.0);
        let w = random_field(&basis, &mut rng, 1.0);
        let r = trilinear_bound_ratio(&basis, &tensor, &u, &v, &w, 0.25).expect("same basis");
        max_ratio = max_ratio.max(r);
    }
    pass_if(
        "trilinear_continuity_ratio",
        max_ratio,
        1.0,
        format!("{n_triples} random triples at m = 16, r = 1/4; empirical constant"),
    )
}

/// Fractional trace: partial sums Cauchy for a convergent exponent, and the
/// divergence flag raised below the threshold.
pub fn check_trace_behaviour() -> CheckRecord {
    let sums: Vec<f64> = [64usize, 128, 256]
        .iter()
        .map(|&m| Basis::new(m).expect("basis").trace_fractional(2.0).value)
        .collect();
    let d1 = sums[1] - sums[0];
    let d2 = sums[2] - sums[1];
    let cauchy_ok = d1 > 0.0 && d2 > 0.0 && d2 < d1 && d2 < 5e-2;
    let flag_ok = !Basis::new(8).expect("basis").trace_fractional(0.5).converges
        && Basis::new(8).expect("basis").trace_fractional(1.5).converges;
    CheckRecord {
        name: "trace_fractional".into(),
        status: if cauchy_ok && flag_ok {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured: d2,
        tolerance: Some(5e-2),
        stderr: None,
        runtime_s: 0.0,
        detail: format!("partial sums {sums:?}; divergence flag at eps = 0.5"),
    }
}

/// Per-mode mean and variance of the colored Wiener increments.
pub fn check_wiener_moments(eps: f64, n: usize, seed: u64) -> CheckRecord {
    let basis = Basis::new(8).expect("basis");
    let noise = GaussianNoise { eps };
    let dt = 0.01;
    let mut rng = substream(seed, 0, role::WIENER, 9);
    let mut sums = vec![0.0; basis.len()];
    let mut sq = vec![0.0; basis.len()];
    for _ in 0..n {
        let inc = noise.sample_increment(&basis, dt, &mut rng).expect("dt > 0");
        for (j, c) in inc.coeffs().iter().enumerate() {
            sums[j] += c;
            sq[j] += c * c;
        }
    }
    let mut worst = 0.0f64;
    for (j, lambda) in basis.eigenvalues().enumerate() {
        let target = lambda.powf(-eps) * dt;
        let mean = sums[j] / n as f64;
        let var = sq[j] / n as f64 - mean * mean;
        let mean_score = mean.abs() / (4.0 * (target / n as f64).sqrt());
        let var_score = (var - target).abs() / (5.0 * target * (2.0 / n as f64).sqrt());
        worst = worst.max(mean_score).max(var_score);
    }
    pass_if(
        "wiener_moments",
        worst,
        1.0,
        format!("{n} draws, 8 modes; score vs 4/5 standard-error bands"),
    )
}

/// Empirical mean of the compensated jump window vanishes mode-wise.
pub fn check_jump_compensation(model: &JumpModel, n: u64, seed: u64) -> CheckRecord {
    if model.rate == 0.0 {
        return pass_if("jump_compensation", 0.0, 1.0, "no jumps configured".into());
    }
    let m = model.gain.len();
    let horizon = 0.5;
    let compensator = model.compensator_drift().scale(horizon);
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|path| {
            let mut t = substream(seed, path, role::JUMP_TIMES, 0);
            let mut mk = substream(seed, path, role::JUMP_MARKS, 0);
            let mut window = compensator.scale(-1.0);
            for e in model.sample_events(0.0, horizon, &mut t, &mut mk).expect("window") {
                window.axpy(1.0, &e.field);
            }
            window.coeffs().to_vec()
        })
        .collect();
    let mut worst = 0.0f64;
    for j in 0..m {
        let col: Vec<f64> = rows.iter().map(|r| r[j]).collect();
        let (mean, se) = mean_stderr(&col);
        if se > 0.0 {
            worst = worst.max(mean.abs() / (4.0 * se));
        }
    }
    pass_if(
        "jump_compensation",
        worst,
        1.0,
        format!("{n} windows; per-mode mean vs 4 standard errors"),
    )
}

/// Second moment of the compensated jump integral against its closed form.
pub fn check_ito_isometry(model: &JumpModel, n: usize, seed: u64) -> CheckRecord {
    let diag = ito_isometry_diagnostic(model, 1.0, n, seed);
    let gap = (diag.mc_lhs - diag.analytic_rhs).abs();
    CheckRecord {
        name: "ito_isometry".into(),
        status: if gap <= 3.0 * diag.stderr || (diag.stderr == 0.0 && gap == 0.0) {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured: gap,
        tolerance: Some(3.0 * diag.stderr),
        stderr: Some(diag.stderr),
        runtime_s: 0.0,
        detail: format!(
            "MC {:.6} vs analytic {:.6} at n = {n}",
            diag.mc_lhs, diag.analytic_rhs
        ),
    }
}

/// Exponential jump moment: finite, below its hard envelope, monotone in
/// the weight.
pub fn check_exponential_moment(model: &JumpModel, basis: &Basis, seed: u64) -> CheckRecord {
    let value = model.exponential_moment(basis, model.theta, 2.0, 0.25, 1.0, 20_000, seed);
    let envelope = model.exponential_moment_envelope(basis, model.theta, 2.0, 0.25, 1.0);
    let doubled = model.exponential_moment(basis, 2.0 * model.theta, 2.0, 0.25, 1.0, 20_000, seed);
    let monotone = model.rate == 0.0 || doubled > value;
    CheckRecord {
        name: "jump_exponential_moment".into(),
        status: if value <= envelope && monotone {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured: value,
        tolerance: Some(envelope),
        stderr: None,
        runtime_s: 0.0,
        detail: format!("doubled-weight value {doubled:.6}; envelope from the mark bound"),
    }
}

/// Long-run variance of the exactly discretized reference process.
pub fn check_ou_stationary_variance(eps: f64, n_paths: u64, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(4, eps).expect("model");
    let cfg = IntegratorConfig {
        dt: 1e-2,
        horizon: 6.0,
        scheme: Scheme::ExponentialEuler,
    };
    let rows: Vec<Vec<f64>> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            simulate_ou(&model, &cfg, &RecordMode::Terminal, seed, path)
                .expect("ou")
                .terminal
                .coeffs()
                .to_vec()
        })
        .collect();
    let mut worst = 0.0f64;
    for (j, lambda) in model.basis.eigenvalues().enumerate() {
        let target = lambda.powf(-eps - 1.0) / 2.0;
        let var = rows.iter().map(|r| r[j] * r[j]).sum::<f64>() / n_paths as f64;
        let band = 5.0 * target * (2.0 / n_paths as f64).sqrt();
        worst = worst.max((var - target).abs() / band);
    }
    pass_if(
        "ou_stationary_variance",
        worst,
        1.0,
        format!("{n_paths} paths, horizon 6; per-mode variance vs 5 standard errors"),
    )
}

/// Reported supremum moment of the reference process in the fractional norm.
pub fn info_ou_sup_moment(eps: f64, alpha: f64, n_paths: u64, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(16, eps).expect("model");
    let cfg = IntegratorConfig {
        dt: 1e-2,
        horizon: 1.0,
        scheme: Scheme::ExponentialEuler,
    };
    let sups: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            let b = simulate_ou(&model, &cfg, &RecordMode::Full, seed, path).expect("ou");
            b.states
                .iter()
                .map(|s| model.basis.fractional_norm_sq(s, alpha))
                .fold(0.0f64, f64::max)
        })
        .collect();
    let (mean, se) = mean_stderr(&sups);
    CheckRecord {
        name: "ou_sup_moment".into(),
        status: if mean.is_finite() {
            CheckStatus::Info
        } else {
            CheckStatus::Fail
        },
        measured: mean,
        tolerance: None,
        stderr: Some(se),
        runtime_s: 0.0,
        detail: format!("E sup ||N||_alpha^2 at alpha = {alpha}, eps = {eps} (finiteness diagnostic)"),
    }
}

/// No-noise, no-control paths decay inside the spectral envelope.
pub fn check_deterministic_decay(n_states: usize, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(8, 2.0).expect("model");
    let quiet = JumpModel {
        rate: 0.0,
        mark: MarkDistribution::Constant { value: 0.0 },
        gain: model.basis.zero_field(),
        theta: 0.25,
    };
    let cfg = IntegratorConfig {
        dt: 1e-3,
        horizon: 1.0,
        scheme: Scheme::ExponentialEuler,
    };
    let mut plan = SimulationPlan::new(&model, &quiet, cfg, seed);
    plan.noise_scale = 0.0;
    plan.record = RecordMode::Full;
    let mut rng = substream(seed, 0, role::INITIAL, 4);
    let mut worst = 0.0f64;
    for path in 0..n_states as u64 {
        let x = random_field(&model.basis, &mut rng, 0.5);
        let bundle = simulate_path(&plan, &x, path, None).expect("deterministic path");
        let x_norm = x.norm();
        for (t, state) in bundle.times.iter().zip(&bundle.states) {
            let bound = x_norm * (-t).exp() * (1.0 + 5.0 * cfg.dt);
            if bound > 0.0 {
                worst = worst.max(state.norm() / bound);
            }
        }
    }
    pass_if(
        "deterministic_decay",
        worst,
        1.0,
        format!("{n_states} random states, m = 8, ratio to ||x|| e^(-t) (1 + 5 dt)"),
    )
}

/// Discrete energy balance: the Ito correction of `||Y||^2 + 2 \int ||Y||_{1/2}^2`
/// matches the injected power `Tr(A^-eps) + rate E[s^2] ||g||^2` per unit time.
pub fn check_energy_balance(
    model: &GalerkinModel,
    jumps: &JumpModel,
    dt: f64,
    t: f64,
    n: usize,
    seed: u64,
) -> CheckRecord {
    let basis = &model.basis;
    let x = {
        let mut coeffs = vec![0.0; basis.len()];
        for (j, c) in coeffs.iter_mut().enumerate().take(4.min(basis.len())) {
            *c = [0.6, -0.4, 0.5, 0.3][j];
        }
        basis.field_from(coeffs)
    };
    let cfg = IntegratorConfig {
        dt,
        horizon: t,
        scheme: Scheme::ExponentialEuler,
    };
    let plan = SimulationPlan::new(model, jumps, cfg, seed);
    let samples: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|path| {
            let b = simulate_path(&plan, &x, path, None).expect("path");
            b.terminal.norm_sq() + 2.0 * b.enstrophy - x.norm_sq()
        })
        .collect();
    let (mean, se) = mean_stderr(&samples);
    let injected = (basis.trace_fractional(model.eps).value + jumps.energy_rate()) * t;
    CheckRecord {
        name: "energy_balance".into(),
        status: if (mean - injected).abs() <= 3.0 * se {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured: (mean - injected).abs(),
        tolerance: Some(3.0 * se),
        stderr: Some(se),
        runtime_s: 0.0,
        detail: format!("MC {mean:.5} vs injected {injected:.5} at n = {n}, t = {t}"),
    }
}

/// Tangent flow against the frozen-noise central difference.
pub fn check_tangent_fd(n_pairs: usize, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(8, 2.0).expect("model");
    let jumps = JumpModel {
        rate: 1.0,
        mark: MarkDistribution::ClippedGaussian {
            mean: 0.0,
            std: 1.0,
            clip: 2.0,
        },
        gain: JumpModel::power_gain(&model.basis, 0.2, 1.0),
        theta: 0.25,
    };
    let cfg = IntegratorConfig {
        dt: 1e-3,
        horizon: 0.25,
        scheme: Scheme::ExponentialEuler,
    };
    let mut rng = substream(seed, 0, role::INITIAL, 5);
    let mut worst = 0.0f64;
    for path in 0..n_pairs as u64 {
        let x = random_field(&model.basis, &mut rng, 0.5);
        let h = random_field(&model.basis, &mut rng, 1.0);
        let mut plan = SimulationPlan::new(&model, &jumps, cfg, seed);
        plan.tangents = vec![h.clone()];
        let eta = simulate_path(&plan, &x, path, None).expect("path").tangents[0]
            .terminal
            .clone();
        let delta = 1e-4;
        let base = SimulationPlan::new(&model, &jumps, cfg, seed);
        let plus = simulate_path(&base, &x.add(&h.scale(delta)), path, None).expect("path");
        let minus = simulate_path(&base, &x.sub(&h.scale(delta)), path, None).expect("path");
        let fd = plus.terminal.sub(&minus.terminal).scale(1.0 / (2.0 * delta));
        worst = worst.max(eta.sub(&fd).norm() / eta.norm().max(1e-12));
    }
    pass_if(
        "tangent_fd",
        worst,
        1e-3,
        format!("{n_pairs} random (x, H) at m = 8, delta = 1e-4, frozen noise"),
    )
}

/// Second tangent against the frozen-noise second difference.
pub fn check_second_tangent_fd(n_pairs: usize, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(6, 2.0).expect("model");
    let jumps = JumpModel {
        rate: 1.0,
        mark: MarkDistribution::ClippedGaussian {
            mean: 0.0,
            std: 1.0,
            clip: 2.0,
        },
        gain: JumpModel::power_gain(&model.basis, 0.2, 1.0),
        theta: 0.25,
    };
    let cfg = IntegratorConfig {
        dt: 1e-3,
        horizon: 0.25,
        scheme: Scheme::ExponentialEuler,
    };
    let mut rng = substream(seed, 0, role::INITIAL, 6);
    let mut worst = 0.0f64;
    for path in 0..n_pairs as u64 {
        let x = random_field(&model.basis, &mut rng, 0.5);
        let h = random_field(&model.basis, &mut rng, 1.0);
        let mut plan = SimulationPlan::new(&model, &jumps, cfg, seed);
        plan.tangents = vec![h.clone()];
        plan.want_second = true;
        let zeta = simulate_path(&plan, &x, path, None)
            .expect("path")
            .second
            .unwrap()
            .terminal;
        let delta = 1e-3;
        let base = SimulationPlan::new(&model, &jumps, cfg, seed);
        let center = simulate_path(&base, &x, path, None).expect("path");
        let plus = simulate_path(&base, &x.add(&h.scale(delta)), path, None).expect("path");
        let minus = simulate_path(&base, &x.sub(&h.scale(delta)), path, None).expect("path");
        let mut fd = plus.terminal.clone();
        fd.axpy(-2.0, &center.terminal);
        fd.axpy(1.0, &minus.terminal);
        let fd = fd.scale(1.0 / (delta * delta));
        worst = worst.max(zeta.sub(&fd).norm() / zeta.norm().max(1e-12));
    }
    pass_if(
        "second_tangent_fd",
        worst,
        1e-2,
        format!("{n_pairs} random (x, H) at m = 6, delta = 1e-3, frozen noise"),
    )
}

/// Pathwise domination `exp(-4 Y_ens) ||eta||^2 <= ||H||^2` up to step slack.
pub fn check_tangent_domination(n_paths: u64, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(8, 1.5).expect("model");
    let jumps = JumpModel {
        rate: 2.0,
        mark: MarkDistribution::ClippedGaussian {
            mean: 0.0,
            std: 1.0,
            clip: 2.0,
        },
        gain: JumpModel::power_gain(&model.basis, 0.2, 1.0),
        theta: 0.25,
    };
    let cfg = IntegratorConfig {
        dt: 1e-3,
        horizon: 0.5,
        scheme: Scheme::ExponentialEuler,
    };
    let mut rng = substream(seed, 0, role::INITIAL, 7);
    let x = random_field(&model.basis, &mut rng, 0.7);
    let h = random_field(&model.basis, &mut rng, 1.0);
    let mut plan = SimulationPlan::new(&model, &jumps, cfg, seed);
    plan.tangents = vec![h.clone()];
    let bound = h.norm_sq() * (1.0 + 10.0 * cfg.dt);
    let peaks: Vec<f64> = (0..n_paths)
        .into_par_iter()
        .map(|path| {
            simulate_path(&plan, &x, path, None).expect("path").tangents[0].domination_peak
        })
        .collect();
    let worst = peaks.into_iter().fold(0.0f64, f64::max);
    pass_if(
        "tangent_domination",
        worst,
        bound,
        format!("{n_paths} paths; peak of exp(-4 Y_ens) ||eta||^2 vs ||H||^2 (1 + 10 dt)"),
    )
}

/// Closed-form Hamiltonian against the sampled minimum, the feedback
/// attainment, and seam continuity at the ball boundary.
pub fn check_hamiltonian_oracle(n_samples: usize, seed: u64) -> CheckRecord {
    let basis = Basis::new(4).expect("basis");
    let radius = 0.5;
    let mut rng = substream(seed, 0, role::CONTROL, 1);
    let mut worst = 0.0f64;
    for scale in [0.0, 0.3, 0.8, 1.0, 2.5, 6.0] {
        let p = basis.field_from(vec![0.21 * scale, -0.4 * scale, 0.11 * scale, 0.3 * scale]);
        let exact = hamiltonian_field(&p, radius);
        let brute = hamiltonian_bruteforce(&p, radius, n_samples, &mut rng);
        worst = worst.max((brute - exact).abs());
        let u = hjb::feedback(&p, radius);
        worst = worst.max((u.dot(&p) + 0.5 * u.norm_sq() - exact).abs());
        worst = worst.max((u.norm() - radius).max(0.0));
    }
    // seam continuity: both branches at ||p|| = R
    let seam = (hamiltonian(radius, radius) - (-radius * radius + 0.5 * radius * radius)).abs();
    worst = worst.max(seam);
    pass_if(
        "hamiltonian_oracle",
        worst,
        1e-12,
        format!("{n_samples} sampled controls per gradient; includes analytic candidates"),
    )
}

/// Gradient estimator against the common-random-number central difference.
pub fn check_bel_gradient(n: usize, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(4, 1.5).expect("model");
    let jumps = JumpModel {
        rate: 0.5,
        mark: MarkDistribution::ClippedGaussian {
            mean: 0.0,
            std: 1.0,
            clip: 2.0,
        },
        gain: JumpModel::power_gain(&model.basis, 0.2, 1.0),
        theta: 0.25,
    };
    let sg = Semigroup::new(&model, &jumps, 1e-3, seed);
    let x = model.basis.field_from(vec![0.5, -0.3, 0.2, 0.4]);
    let h = model.basis.field_from(vec![0.8, 0.4, -0.3, 0.1]);
    let t = 0.5;
    let gamma = 0.2;
    let q = SemigroupQuery {
        f: &SquaredNorm,
        t,
        x: &x,
        gamma,
        n,
    };
    let grad = sg.bel_gradient(&q, &h).expect("estimate");
    let delta = 1e-3;
    let xp = x.add(&h.scale(delta));
    let xm = x.sub(&h.scale(delta));
    let fp = sg
        .estimate_t(&SemigroupQuery { f: &SquaredNorm, t, x: &xp, gamma, n })
        .expect("estimate");
    let fm = sg
        .estimate_t(&SemigroupQuery { f: &SquaredNorm, t, x: &xm, gamma, n })
        .expect("estimate");
    let fd = (fp.value - fm.value) / (2.0 * delta);
    let gap = (grad.value - fd).abs();
    let tol = (0.05 * fd.abs()).max(3.0 * (grad.stderr + fp.stderr.max(fm.stderr)));
    CheckRecord {
        name: "bel_gradient_fd".into(),
        status: if gap <= tol { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: gap,
        tolerance: Some(tol),
        stderr: Some(grad.stderr),
        runtime_s: 0.0,
        detail: format!("estimator {:.5} vs CRN central difference {fd:.5} at n = {n}", grad.value),
    }
}

/// Hessian estimator against the common-random-number second difference.
pub fn check_bel_hessian(n: usize, seed: u64) -> CheckRecord {
    let model = GalerkinModel::new(3, 1.5).expect("model");
    let jumps = JumpModel {
        rate: 0.5,
        mark: MarkDistribution::ClippedGaussian {
            mean: 0.0,
            std: 1.0,
            clip: 2.0,
        },
        gain: JumpModel::power_gain(&model.basis, 0.2, 1.0),
        theta: 0.25,
    };
    let sg = Semigroup::new(&model, &jumps, 1e-3, seed);
    let x = model.basis.field_from(vec![0.5, -0.2, 0.3]);
    let h = model.basis.field_from(vec![0.7, 0.3, -0.4]);
    let t = 0.5;
    let gamma = 0.2;
    let q = SemigroupQuery {
        f: &SquaredNorm,
        t,
        x: &x,
        gamma,
        n,
    };
    let hess = sg.bel_hessian(&q, &h).expect("estimate");
    let delta = 5e-3;
    let center = sg.estimate_t(&q).expect("estimate");
    let xp = x.add(&h.scale(delta));
    let xm = x.sub(&h.scale(delta));
    let fp = sg
        .estimate_t(&SemigroupQuery { f: &SquaredNorm, t, x: &xp, gamma, n })
        .expect("estimate");
    let fm = sg
        .estimate_t(&SemigroupQuery { f: &SquaredNorm, t, x: &xm, gamma, n })
        .expect("estimate");
    let fd = (fp.value - 2.0 * center.value + fm.value) / (delta * delta);
    let gap = (hess.value - fd).abs();
    let tol = (0.10 * fd.abs()).max(3.0 * hess.stderr);
    CheckRecord {
        name: "bel_hessian_fd".into(),
        status: if gap <= tol { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: gap,
        tolerance: Some(tol),
        stderr: Some(hess.stderr),
        runtime_s: 0.0,
        detail: format!("estimator {:.5} vs CRN second difference {fd:.5} at n = {n}", hess.value),
    }
}

/// Uniformity in the truncation level of the energy functional
/// `E[sup ||Y||^2 + \int ||Y||_{1/2}^2]` under a strongly colored noise
/// configuration: the high modes receive almost no input, so enlarging the
/// basis must not grow the estimate beyond ten percent.
pub fn check_truncation_uniformity(n_paths: usize, seed: u64) -> CheckRecord {
    let eps = 3.0;
    let estimate_for = |m: usize| -> (f64, f64) {
        let model = GalerkinModel::new(m, eps).expect("model");
        let jumps = JumpModel {
            rate: 0.2,
            mark: MarkDistribution::ClippedGaussian {
                mean: 0.0,
                std: 1.0,
                clip: 2.0,
            },
            gain: JumpModel::power_gain(&model.basis, 0.1, 1.0),
            theta: 0.25,
        };
        let cfg = IntegratorConfig {
            dt: 1e-3,
            horizon: 0.5,
            scheme: Scheme::ExponentialEuler,
        };
        let mut plan = SimulationPlan::new(&model, &jumps, cfg, seed);
        plan.record = RecordMode::Full;
        // the probe state lives in the first shell so its projection is the
        // same at every truncation level
        let mut coeffs = vec![0.0; m];
        coeffs[0] = 1.2;
        coeffs[1] = -0.8;
        coeffs[2] = 1.0;
        coeffs[3] = 0.6;
        let x = model.basis.field_from(coeffs);
        let samples: Vec<f64> = (0..n_paths as u64)
            .into_par_iter()
            .map(|path| {
                let b = simulate_path(&plan, &x, path, None).expect("path");
                let sup = b.states.iter().map(SpectralField::norm_sq).fold(0.0f64, f64::max);
                sup + b.enstrophy
            })
            .collect();
        mean_stderr(&samples)
    };
    let levels = [4usize, 8, 16];
    let values: Vec<(f64, f64)> = levels.iter().map(|&m| estimate_for(m)).collect();
    let base = values[0].0;
    let worst_growth = values
        .iter()
        .map(|(v, _)| (v - base) / base)
        .fold(f64::NEG_INFINITY, f64::max);
    CheckRecord {
        name: "truncation_uniformity".into(),
        status: if worst_growth <= 0.10 {
            CheckStatus::Pass
        } else {
            CheckStatus::Fail
        },
        measured: worst_growth,
        tolerance: Some(0.10),
        stderr: Some(values.iter().map(|(_, s)| *s).fold(0.0, f64::max)),
        detail: format!(
            "E[sup ||Y||^2 + int ||Y||_1/2^2] at m = 4/8/16: {:?} (eps = {eps}, n = {n_paths})",
            values.iter().map(|(v, _)| *v).collect::<Vec<_>>()
        ),
        runtime_s: 0.0,
    }
}

/// Context shared by the control-layer checks: a solved value function on
/// the configured model.
pub struct ControlContext<'a> {
    pub model: &'a GalerkinModel,
    pub jumps: JumpModel,
    pub solver: HjbSolver<'a>,
    pub vf: crate::hjb::ValueFunction,
    pub report: crate::hjb::IterationReport,
}

pub fn solve_control_context<'a>(
    cfg: &ExperimentConfig,
    model: &'a GalerkinModel,
    jumps: &'a JumpModel,
    master: u64,
) -> Result<ControlContext<'a>, crate::hjb::HjbError> {
    let solver = HjbSolver {
        model,
        jumps,
        dt: cfg.integrator.dt,
        horizon: cfg.integrator.horizon,
        params: cfg.hjb.clone(),
        master,
    };
    let (vf, report) = solver.solve()?;
    Ok(ControlContext {
        model,
        jumps: jumps.clone(),
        solver,
        vf,
        report,
    })
}

/// The zero-control value function against a fresh direct Monte Carlo of the
/// uncontrolled cost at sampled cloud points.
pub fn check_zero_control_consistency(
    cfg: &ExperimentConfig,
    n_points: usize,
    n_oracle: usize,
    seed: u64,
) -> CheckRecord {
    let model = cfg.build_model().expect("model");
    let jumps = cfg.jump_model(&model.basis);
    let solver = HjbSolver {
        model: &model,
        jumps: &jumps,
        dt: cfg.integrator.dt,
        horizon: cfg.integrator.horizon,
        params: cfg.hjb.clone(),
        master: seed,
    };
    let cloud = solver.sample_cloud();
    let table = solver.build_path_table(&cloud).expect("table");
    let vf = solver.zero_control_value(&cloud, &table).expect("fit");
    let integrator = cfg.integrator();
    let mut worst = 0.0f64;
    let mut detail = String::new();
    for (p, x) in cloud.iter().take(n_points).enumerate() {
        let oracle = evaluate_cost(
            &model,
            &jumps,
            integrator,
            &ZeroControl,
            cfg.hjb.radius,
            cfg.hjb.alpha_tilde1,
            x,
            n_oracle,
            seed ^ 0x0f2a_c1e5_u64,
        )
        .expect("oracle");
        // training-side noise from the frozen table at this point
        let targets: Vec<f64> = table.terminal_cost_samples(p);
        let (_, se_train) = mean_stderr(&targets);
        let combined = (oracle.stderr.powi(2) + se_train.powi(2)).sqrt();
        let gap = (vf.value(cfg.integrator.horizon, x) - oracle.value).abs();
        let score = gap / (3.0 * combined);
        if score > worst {
            worst = score;
            detail = format!(
                "worst point {p}: value {:.5} vs oracle {:.5} +- {:.5}",
                vf.value(cfg.integrator.horizon, x),
                oracle.value,
                oracle.stderr
            );
        }
    }
    pass_if("zero_control_consistency", worst, 1.0, detail)
}

/// Cost identity for zero, random-admissible and feedback policies.
pub fn check_cost_identity(ctx: &ControlContext<'_>, cfg: &ExperimentConfig, n: usize, seed: u64) -> CheckRecord {
    let integrator = cfg.integrator();
    let x = probe_state(&ctx.model.basis);
    let k_op = cfg.hjb.control_operator();
    let mut worst = 0.0f64;
    let mut details = Vec::new();
    let feedback_law = FeedbackLaw {
        vf: &ctx.vf,
        basis: &ctx.model.basis,
        k_op,
        radius: cfg.hjb.radius,
        horizon: cfg.integrator.horizon,
    };
    let random_law = RandomAdmissible {
        radius: cfg.hjb.radius,
        hold: 0.05,
        master: seed ^ 0xbad,
    };
    let policies: [(&str, &dyn crate::sde::ControlLaw); 3] = [
        ("zero", &ZeroControl),
        ("random", &random_law),
        ("feedback", &feedback_law),
    ];
    let value = ctx.vf.value(cfg.integrator.horizon, &x);
    for (name, law) in policies {
        let report = verify_identity(
            ctx.model,
            &ctx.jumps,
            integrator,
            law,
            &ctx.vf,
            cfg.hjb.radius,
            k_op,
            &x,
            n,
            seed,
        )
        .expect("identity");
        let tol = (3.0 * report.stderr).max(0.05 * report.lhs.abs());
        worst = worst.max(report.residual.abs() / tol);
        // the value is an infimum: no admissible policy may beat it
        let dominance = (value - report.lhs) / (3.0 * report.stderr).max(1e-12);
        worst = worst.max(dominance);
        details.push(format!(
            "{name}: lhs {:.5} rhs {:.5} residual {:.5} (tol {:.5})",
            report.lhs, report.rhs, report.residual, tol
        ));
    }
    details.push(format!("value at probe {value:.5}, dominated by every policy cost"));
    pass_if("cost_identity", worst, 1.0, details.join("; "))
}

/// Feedback beats the zero policy at 95% confidence on common noise.
pub fn check_control_benefit(ctx: &ControlContext<'_>, cfg: &ExperimentConfig, n: usize, seed: u64) -> CheckRecord {
    let integrator = cfg.integrator();
    let x = probe_state(&ctx.model.basis);
    let k_op = cfg.hjb.control_operator();
    let feedback_law = FeedbackLaw {
        vf: &ctx.vf,
        basis: &ctx.model.basis,
        k_op,
        radius: cfg.hjb.radius,
        horizon: cfg.integrator.horizon,
    };
    let cost_of = |law: &dyn crate::sde::ControlLaw, path: u64| -> f64 {
        let mut plan = SimulationPlan::new(ctx.model, &ctx.jumps, integrator, seed);
        plan.control = law;
        plan.clip_radius = cfg.hjb.radius;
        plan.k_exponent = cfg.hjb.alpha_tilde1;
        let b = simulate_path(&plan, &x, path, None).expect("path");
        b.running_cost + b.terminal.norm_sq()
    };
    let diffs: Vec<f64> = (0..n as u64)
        .into_par_iter()
        .map(|path| cost_of(&ZeroControl, path) - cost_of(&feedback_law, path))
        .collect();
    let (mean, se) = mean_stderr(&diffs);
    let lower = mean - 1.645 * se;
    CheckRecord {
        name: "control_benefit".into(),
        status: if lower > 0.0 { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: lower,
        tolerance: Some(0.0),
        stderr: Some(se),
        runtime_s: 0.0,
        detail: format!(
            "common-seed saving {mean:.5} +- {se:.5} over {n} paths (95% lower bound must exceed 0)"
        ),
    }
}

/// Bellman consistency of the solved value function at (0, T/2), plus the
/// suboptimality direction of a deliberately random policy.
pub fn check_dpp(ctx: &ControlContext<'_>, cfg: &ExperimentConfig, n: usize, seed: u64) -> CheckRecord {
    let x = probe_state(&ctx.model.basis);
    let k_op = cfg.hjb.control_operator();
    let horizon = cfg.integrator.horizon;
    let feedback_law = FeedbackLaw {
        vf: &ctx.vf,
        basis: &ctx.model.basis,
        k_op,
        radius: cfg.hjb.radius,
        horizon,
    };
    let report = dpp_consistency(
        ctx.model,
        &ctx.jumps,
        cfg.integrator.dt,
        &feedback_law,
        &ctx.vf,
        cfg.hjb.radius,
        cfg.hjb.alpha_tilde1,
        &x,
        0.0,
        horizon / 2.0,
        horizon,
        n,
        seed,
    )
    .expect("dpp");
    let tol = (3.0 * report.stderr).max(0.05 * report.value.abs());
    let random_law = RandomAdmissible {
        radius: cfg.hjb.radius,
        hold: 0.05,
        master: seed ^ 0xbad,
    };
    let bad = dpp_consistency(
        ctx.model,
        &ctx.jumps,
        cfg.integrator.dt,
        &random_law,
        &ctx.vf,
        cfg.hjb.radius,
        cfg.hjb.alpha_tilde1,
        &x,
        0.0,
        horizon / 2.0,
        horizon,
        n,
        seed ^ 1,
    )
    .expect("dpp");
    let ok = report.residual.abs() <= tol && bad.residual > report.residual;
    CheckRecord {
        name: "dpp_consistency".into(),
        status: if ok { CheckStatus::Pass } else { CheckStatus::Fail },
        measured: report.residual.abs(),
        tolerance: Some(tol),
        stderr: Some(report.stderr),
        runtime_s: 0.0,
        detail: format!(
            "feedback residual {:.5}; random-policy residual {:.5} (must exceed it)",
            report.residual, bad.residual
        ),
    }
}

/// Weighted mild-form residual of the transformed value, reported as a
/// diagnostic.
pub fn info_weighted_mild(ctx: &ControlContext<'_>, cfg: &ExperimentConfig, seed: u64) -> CheckRecord {
    let x = probe_state(&ctx.model.basis);
    let (direct, mild, se) = hjb::transformed::weighted_mild_residual(
        ctx.model,
        &ctx.jumps,
        cfg.integrator.dt,
        &ctx.vf,
        cfg.hjb.gamma,
        cfg.hjb.control_operator(),
        cfg.hjb.radius,
        &x,
        cfg.integrator.horizon,
        10,
        200,
        100,
        seed,
    )
    .expect("residual");
    CheckRecord {
        name: "weighted_mild_residual".into(),
        status: CheckStatus::Info,
        measured: (direct - mild).abs(),
        tolerance: None,
        stderr: Some(se),
        runtime_s: 0.0,
        detail: format!("w(T,x) {direct:.5} vs weighted mild form {mild:.5}"),
    }
}

fn probe_state(basis: &Basis) -> SpectralField {
    let mut coeffs = vec![0.0; basis.len()];
    let pattern = [0.5, -0.35, 0.4, 0.25];
    for (j, c) in coeffs.iter_mut().enumerate().take(4.min(basis.len())) {
        *c = pattern[j];
    }
    basis.field_from(coeffs)
}

/// Run the battery at the requested level.
pub fn run_battery(cfg: &ExperimentConfig, level: Level) -> RunReport {
    let master = cfg.seeds.master;
    let mut report = RunReport::new(
        &cfg.fingerprint(),
        master,
        match level {
            Level::Fast => "fast",
            Level::Full => "full",
        },
    );
    let full = level == Level::Full;
    let model16 = GalerkinModel::new(16, cfg.noise.epsilon).expect("model");
    let tensor16 = &model16.tensor;
    let model_cfg = cfg.build_model().expect("model");
    let jumps_cfg = cfg.jump_model(&model_cfg.basis);

    report.checks.push(timed(|| check_tensor_antisymmetry(tensor16)));
    report.checks.push(timed(|| check_tensor_diagonal(tensor16)));
    report.checks.push(timed(|| {
        check_energy_neutrality(&[4, 8, 16], if full { 1000 } else { 200 }, master)
    }));
    report.checks.push(timed(|| {
        check_pseudospectral_oracle(8, if full { 100 } else { 10 }, 64, master)
    }));
    report.checks.push(timed(|| check_norm_calculus(master)));
    report.checks.push(timed(|| {
        check_trilinear_ratio(master, if full { 10_000 } else { 1000 })
    }));
    report.checks.push(timed(check_trace_behaviour));
    report.checks.push(timed(|| {
        check_wiener_moments(cfg.noise.epsilon, if full { 100_000 } else { 20_000 }, master)
    }));
    report.checks.push(timed(|| {
        check_jump_compensation(&jumps_cfg, if full { 20_000 } else { 4000 }, master)
    }));
    report.checks.push(timed(|| {
        check_ito_isometry(&jumps_cfg, if full { 10_000 } else { 2000 }, master)
    }));
    report.checks.push(timed(|| {
        check_exponential_moment(&jumps_cfg, &model_cfg.basis, master)
    }));
    report.checks.push(timed(|| {
        check_ou_stationary_variance(cfg.noise.epsilon, if full { 4000 } else { 1000 }, master)
    }));
    report.checks.push(timed(|| {
        check_deterministic_decay(if full { 50 } else { 10 }, master)
    }));
    report.checks.push(timed(|| {
        check_energy_balance(
            &model_cfg,
            &jumps_cfg,
            cfg.integrator.dt,
            0.5,
            if full { 10_000 } else { 2000 },
            master,
        )
    }));
    report.checks.push(timed(|| {
        check_tangent_fd(if full { 20 } else { 5 }, master)
    }));
    report.checks.push(timed(|| {
        check_second_tangent_fd(if full { 20 } else { 3 }, master)
    }));
    report.checks.push(timed(|| {
        check_tangent_domination(if full { 100 } else { 10 }, master)
    }));
    report.checks.push(timed(|| {
        check_hamiltonian_oracle(if full { 100_000 } else { 20_000 }, master)
    }));

    if full {
        report.checks.push(timed(|| check_bel_gradient(100_000, master)));
        report.checks.push(timed(|| check_bel_hessian(100_000, master)));
        report.checks.push(timed(|| check_truncation_uniformity(2000, master)));
        report.checks.push(timed(|| {
            check_zero_control_consistency(cfg, 20, 2000, master)
        }));
        report.checks.push(timed(|| info_ou_sup_moment(2.0, 0.3, 400, master)));
        match solve_control_context(cfg, &model_cfg, &jumps_cfg, master) {
            Ok(ctx) => {
                report.checks.push(timed(|| check_cost_identity(&ctx, cfg, 10_000, master)));
                report.checks.push(timed(|| check_control_benefit(&ctx, cfg, 10_000, master)));
                report.checks.push(timed(|| check_dpp(&ctx, cfg, 10_000, master)));
                report.checks.push(timed(|| info_weighted_mild(&ctx, cfg, master)));
            }
            Err(e) => report.checks.push(CheckRecord {
                name: "value_function_solve".into(),
                status: CheckStatus::Fail,
                measured: f64::NAN,
                tolerance: None,
                stderr: None,
                runtime_s: 0.0,
                detail: e.to_string(),
            }),
        }
    }
    report
}
