//! Time stepping for the Galerkin state equation and its tangent flows.
//!
//! The stiff Stokes part is integrated exactly mode-wise (integrating-factor
//! Euler); the convective term, control force and compensator drift are
//! explicit; jump events are applied atomically at their exact times by
//! splitting the containing step. Along each path the integrator accumulates
//! the enstrophy integral, the running control cost, and the stochastic
//! integrals that feed the semigroup-derivative estimators.
//!
//! One step of the state reads
//!
//! ```text
//!     y' = exp(-lambda dt) o [ y + dt (-B(y) + K u - comp) + dW_colored ],
//! ```
//!
//! the first tangent solves the linearized equation along the same path with
//! no noise terms, and the second tangent adds the source `-2 B(eta, eta)`.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::noise::{JumpModel, WienerSampler};
use crate::rng::{role, substream};
use crate::spectral::{Basis, SpectralError, SpectralField, TrilinearTensor};

#[derive(Debug, Error)]
pub enum SdeError {
    #[error("time step must be positive, got {0}")]
    NonPositiveStep(f64),
    #[error("horizon {horizon} is not an integer multiple of dt {dt}")]
    GridMisaligned { horizon: f64, dt: f64 },
    #[error("state became non-finite on path {path} at t = {time}")]
    NonFinite { path: u64, time: f64 },
    #[error("path {path} blew up at t = {time}: |state| = {norm:.3e}")]
    Blowup { path: u64, time: f64, norm: f64 },
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Noise(#[from] crate::noise::NoiseError),
}

/// Damping applied to each eigenmode over one (sub)step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// Integrating-factor Euler: `exp(-lambda h)`, exact for the Stokes part.
    ExponentialEuler,
    /// Semi-implicit Euler: `1 / (1 + lambda h)`.
    SemiImplicitEuler,
}

impl Scheme {
    #[inline]
    fn damping(self, lambda: f64, h: f64) -> f64 {
        match self {
            Scheme::ExponentialEuler => (-lambda * h).exp(),
            Scheme::SemiImplicitEuler => 1.0 / (1.0 + lambda * h),
        }
    }
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct IntegratorConfig {
    pub dt: f64,
    pub horizon: f64,
    pub scheme: Scheme,
}

impl IntegratorConfig {
    pub fn new(dt: f64, horizon: f64) -> Result<Self, SdeError> {
        let cfg = IntegratorConfig {
            dt,
            horizon,
            scheme: Scheme::ExponentialEuler,
        };
        cfg.n_steps()?;
        Ok(cfg)
    }

    /// Number of grid steps; fails unless the horizon sits on the grid.
    pub fn n_steps(&self) -> Result<usize, SdeError> {
        if self.dt <= 0.0 {
            return Err(SdeError::NonPositiveStep(self.dt));
        }
        let steps = self.horizon / self.dt;
        let rounded = steps.round();
        if rounded < 1.0 || (steps - rounded).abs() > 1e-9 * rounded.max(1.0) {
            return Err(SdeError::GridMisaligned {
                horizon: self.horizon,
                dt: self.dt,
            });
        }
        Ok(rounded as usize)
    }
}

/// Spectral truncation of the state equation: basis, exact convective
/// tensor and the coloring exponent of the Gaussian forcing.
#[derive(Debug, Clone)]
pub struct GalerkinModel {
    pub basis: Basis,
    pub tensor: TrilinearTensor,
    pub eps: f64,
}

impl GalerkinModel {
    pub fn new(m: usize, eps: f64) -> Result<Self, SpectralError> {
        let basis = Basis::new(m)?;
        let tensor = TrilinearTensor::build(&basis);
        Ok(GalerkinModel { basis, tensor, eps })
    }

    /// One explicit step of the state: `external` collects the control force
    /// and compensator drift, `noise` the colored Wiener increment (zero
    /// field for deterministic stepping).
    pub fn step_state(
        &self,
        y: &SpectralField,
        external: &SpectralField,
        noise: &SpectralField,
        dt: f64,
        scheme: Scheme,
    ) -> Result<SpectralField, SdeError> {
        if dt <= 0.0 {
            return Err(SdeError::NonPositiveStep(dt));
        }
        let convect = self.tensor.nonlinear(y)?;
        let mut next = y.clone();
        next.axpy(-dt, &convect);
        next.axpy(dt, external);
        next.axpy(1.0, noise);
        for (j, lambda) in self.basis.eigenvalues().enumerate() {
            next.coeffs_mut()[j] *= scheme.damping(lambda, dt);
        }
        if !next.is_finite() {
            return Err(SdeError::NonFinite { path: 0, time: dt });
        }
        Ok(next)
    }

    /// One step of the first tangent flow along the frozen state `y`.
    /// The equation is linear in `eta` and carries no noise terms.
    pub fn step_tangent(
        &self,
        eta: &SpectralField,
        y: &SpectralField,
        dt: f64,
        scheme: Scheme,
    ) -> Result<SpectralField, SdeError> {
        if dt <= 0.0 {
            return Err(SdeError::NonPositiveStep(dt));
        }
        let mut drift = self.tensor.bilinear(eta, y)?;
        drift.axpy(1.0, &self.tensor.bilinear(y, eta)?);
        let mut next = eta.clone();
        next.axpy(-dt, &drift);
        for (j, lambda) in self.basis.eigenvalues().enumerate() {
            next.coeffs_mut()[j] *= scheme.damping(lambda, dt);
        }
        if !next.is_finite() {
            return Err(SdeError::NonFinite { path: 0, time: dt });
        }
        Ok(next)
    }

    /// One step of the second tangent flow, sourced by `-2 B(eta, eta)`.
    pub fn step_second_tangent(
        &self,
        zeta: &SpectralField,
        eta: &SpectralField,
        y: &SpectralField,
        dt: f64,
        scheme: Scheme,
    ) -> Result<SpectralField, SdeError> {
        if dt <= 0.0 {
            return Err(SdeError::NonPositiveStep(dt));
        }
        let mut drift = self.tensor.bilinear(zeta, y)?;
        drift.axpy(1.0, &self.tensor.bilinear(y, zeta)?);
        drift.axpy(2.0, &self.tensor.bilinear(eta, eta)?);
        let mut next = zeta.clone();
        next.axpy(-dt, &drift);
        for (j, lambda) in self.basis.eigenvalues().enumerate() {
            next.coeffs_mut()[j] *= scheme.damping(lambda, dt);
        }
        if !next.is_finite() {
            return Err(SdeError::NonFinite { path: 0, time: dt });
        }
        Ok(next)
    }
}

/// A control law evaluated along the path. Implementations may depend on the
/// path id (for randomized open-loop policies); the integrator clips every
/// returned value to the admissible radius.
pub trait ControlLaw: Sync {
    fn value(&self, path: u64, t: f64, state: &SpectralField) -> SpectralField;
}

/// The zero control.
pub struct ZeroControl;

impl ControlLaw for ZeroControl {
    fn value(&self, _path: u64, _t: f64, state: &SpectralField) -> SpectralField {
        state.scale(0.0)
    }
}

/// Admissible open-loop policy: a fresh direction of full magnitude `radius`
/// is drawn for every hold window from the path's control substream.
pub struct RandomAdmissible {
    pub radius: f64,
    pub hold: f64,
    pub master: u64,
}

impl ControlLaw for RandomAdmissible {
    fn value(&self, path: u64, t: f64, state: &SpectralField) -> SpectralField {
        let bucket = (t / self.hold).floor() as u64;
        let mut rng = substream(self.master, path, role::CONTROL, bucket);
        let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");
        let coeffs: Vec<f64> = (0..state.len())
            .map(|_| rand_distr::Distribution::sample(&normal, &mut rng))
            .collect();
        let mut u = SpectralField::from_raw(coeffs);
        let norm = u.norm();
        if norm > 0.0 {
            u = u.scale(self.radius / norm);
        }
        u
    }
}

/// Which grid nodes to keep in the returned bundle.
#[derive(Debug, Clone)]
pub enum RecordMode {
    /// Only the terminal state.
    Terminal,
    /// States at the given times (each must lie on the step grid).
    AtTimes(Vec<f64>),
    /// Every grid node.
    Full,
}

/// Everything observed along one simulated path.
#[derive(Debug, Clone)]
pub struct TrajectoryBundle {
    /// Recorded node times.
    pub times: Vec<f64>,
    /// State at the recorded nodes (post-jump values).
    pub states: Vec<SpectralField>,
    /// Enstrophy integral at the recorded nodes.
    pub enstrophy_at: Vec<f64>,
    pub terminal: SpectralField,
    /// `\int_0^T ||Y||_{1/2}^2 ds` by the node trapezoid rule.
    pub enstrophy: f64,
    /// `\int_0^T (||Y||_{1/2}^2 + 1/2 ||U||^2) ds`.
    pub running_cost: f64,
    pub jump_count: usize,
    pub tangents: Vec<TangentTrack>,
    pub second: Option<SecondTrack>,
}

/// Pathwise functionals of one tangent direction.
#[derive(Debug, Clone)]
pub struct TangentTrack {
    pub terminal: SpectralField,
    /// `\int_0^t <A^{eps/2} eta, dW>` (left-point rule).
    pub i_bel: f64,
    /// `\int_0^t (1 - s/t*) <A^{1/2} eta, A^{1/2} Y> ds`.
    pub j_bel: f64,
    /// `\int_0^t <A^{1/2} eta, A^{1/2} Y> ds` (unweighted).
    pub k_plain: f64,
    /// Largest observed `exp(-4 Y_enstrophy) ||eta||^2` over the grid.
    pub domination_peak: f64,
}

/// Pathwise functionals of the second tangent flow.
#[derive(Debug, Clone)]
pub struct SecondTrack {
    pub terminal: SpectralField,
    pub i_bel: f64,
    pub j_bel: f64,
    /// `\int_0^t (1 - s/t*) ||A^{1/2} eta||^2 ds` for the same direction.
    pub j_eta: f64,
}

/// Full description of one simulation job. The same plan is reused across
/// paths; all per-path state lives inside [`simulate_path`].
pub struct SimulationPlan<'a> {
    pub model: &'a GalerkinModel,
    pub jumps: &'a JumpModel,
    pub integrator: IntegratorConfig,
    pub control: &'a dyn ControlLaw,
    /// Admissible radius; every control value is clipped to this norm.
    pub clip_radius: f64,
    /// Smoothing exponent of the control operator `K = A^{-k_exponent}`.
    pub k_exponent: f64,
    /// Initial values of the first tangent flows.
    pub tangents: Vec<SpectralField>,
    /// Track the second tangent along `tangents[0]`.
    pub want_second: bool,
    /// Target time of the semigroup-derivative weights; defaults to the
    /// horizon. The weights depend on the endpoint, so one simulation serves
    /// a single target time.
    pub bel_target: Option<f64>,
    pub record: RecordMode,
    /// Multiplier on the Gaussian forcing; zero gives deterministic paths.
    pub noise_scale: f64,
    /// Disable to integrate the linear (Stokes + noise) dynamics only.
    pub include_nonlinearity: bool,
    pub master: u64,
}

impl<'a> SimulationPlan<'a> {
    pub fn new(
        model: &'a GalerkinModel,
        jumps: &'a JumpModel,
        integrator: IntegratorConfig,
        master: u64,
    ) -> Self {
        SimulationPlan {
            model,
            jumps,
            integrator,
            control: &ZeroControl,
            clip_radius: f64::INFINITY,
            k_exponent: 0.0,
            tangents: Vec::new(),
            want_second: false,
            bel_target: None,
            record: RecordMode::Terminal,
            noise_scale: 1.0,
            include_nonlinearity: true,
            master,
        }
    }
}

fn clip_to_ball(u: SpectralField, radius: f64) -> SpectralField {
    let norm = u.norm();
    if norm > radius {
        u.scale(radius / norm)
    } else {
        u
    }
}

struct Recorder {
    nodes: Vec<usize>,
    cursor: usize,
    times: Vec<f64>,
    states: Vec<SpectralField>,
    enstrophy_at: Vec<f64>,
}

impl Recorder {
    fn new(mode: &RecordMode, dt: f64, n_steps: usize) -> Recorder {
        let nodes = match mode {
            RecordMode::Terminal => vec![n_steps],
            RecordMode::Full => (0..=n_steps).collect(),
            RecordMode::AtTimes(times) => times
                .iter()
                .map(|&t| {
                    let node = (t / dt).round();
                    assert!(
                        (t - node * dt).abs() <= 1e-9 * (1.0 + t.abs()),
                        "recording time {t} is off the step grid"
                    );
                    node as usize
                })
                .collect(),
        };
        Recorder {
            nodes,
            cursor: 0,
            times: Vec::new(),
            states: Vec::new(),
            enstrophy_at: Vec::new(),
        }
    }

    fn observe(&mut self, node: usize, t: f64, state: &SpectralField, enstrophy: f64) {
        while self.cursor < self.nodes.len() && self.nodes[self.cursor] == node {
            self.times.push(t);
            self.states.push(state.clone());
            self.enstrophy_at.push(enstrophy);
            self.cursor += 1;
        }
    }
}

/// Simulate one path of the (controlled) state equation together with the
/// requested tangent flows and accumulators. Pure function of
/// `(plan, x0, path)`; paths may run concurrently.
///
/// `observer`, when given, is called at every grid node with
/// `(t, state, control)` after jumps at that node have been applied.
/// Node observer: `(t, state, control)` at every grid node.
pub type NodeObserver<'o> = &'o mut dyn FnMut(f64, &SpectralField, &SpectralField);

pub fn simulate_path(
    plan: &SimulationPlan<'_>,
    x0: &SpectralField,
    path: u64,
    mut observer: Option<NodeObserver<'_>>,
) -> Result<TrajectoryBundle, SdeError> {
    let basis = &plan.model.basis;
    let m = basis.len();
    assert_eq!(x0.len(), m, "initial state is not on the model basis");
    let n_steps = plan.integrator.n_steps()?;
    let dt = plan.integrator.dt;
    let scheme = plan.integrator.scheme;
    let horizon = plan.integrator.horizon;
    let bel_target = plan.bel_target.unwrap_or(horizon);
    assert!(bel_target > 0.0, "derivative weights need a positive target time");
    let blowup_threshold = 1e6 * (1.0 + x0.norm());

    let mut wiener = WienerSampler::new(basis, plan.model.eps, plan.master, path);
    let mut times_rng = substream(plan.master, path, role::JUMP_TIMES, 0);
    let mut marks_rng = substream(plan.master, path, role::JUMP_MARKS, 0);
    let events = plan
        .jumps
        .sample_events(0.0, horizon, &mut times_rng, &mut marks_rng)?;
    let compensator = plan.jumps.compensator_drift();

    let damp_dt: Vec<f64> = basis
        .eigenvalues()
        .map(|lambda| scheme.damping(lambda, dt))
        .collect();
    let eps_half: Vec<f64> = basis
        .eigenvalues()
        .map(|lambda| lambda.powf(0.5 * plan.model.eps))
        .collect();

    let mut y = x0.clone();
    let mut etas = plan.tangents.clone();
    let mut zeta = plan.want_second.then(|| basis.zero_field());
    if plan.want_second {
        assert!(
            !etas.is_empty(),
            "second tangent tracking needs a first tangent direction"
        );
    }

    let mut enstrophy = 0.0;
    let mut running_cost = 0.0;
    let mut tracks: Vec<TangentTrack> = etas
        .iter()
        .map(|h| TangentTrack {
            terminal: h.clone(),
            i_bel: 0.0,
            j_bel: 0.0,
            k_plain: 0.0,
            domination_peak: h.norm_sq(),
        })
        .collect();
    let mut second = zeta.as_ref().map(|z| SecondTrack {
        terminal: z.clone(),
        i_bel: 0.0,
        j_bel: 0.0,
        j_eta: 0.0,
    });

    let mut recorder = Recorder::new(&plan.record, dt, n_steps);
    let mut event_idx = 0usize;
    let mut jump_count = 0usize;

    // Trapezoid memory of the node integrands.
    let mut prev_half_sq = basis.fractional_norm_sq(&y, 0.5);
    let mut prev_cost = 0.0;
    let mut prev_j: Vec<f64> = Vec::new();
    let mut prev_k: Vec<f64> = Vec::new();
    let mut prev_j2 = 0.0;
    let mut prev_jeta = 0.0;

    let weight_at = |s: f64| (1.0 - s / bel_target).max(0.0);

    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let u = clip_to_ball(plan.control.value(path, t, &y), plan.clip_radius);

        // node integrands
        let half_sq = basis.fractional_norm_sq(&y, 0.5);
        let cost_integrand = half_sq + 0.5 * u.norm_sq();
        let w = weight_at(t);
        let half_y = basis.fractional_apply(&y, 0.5);
        let j_now: Vec<f64> = etas
            .iter()
            .map(|eta| basis.fractional_apply(eta, 0.5).dot(&half_y))
            .collect();
        let j2_now = zeta
            .as_ref()
            .map(|z| basis.fractional_apply(z, 0.5).dot(&half_y))
            .unwrap_or(0.0);
        let jeta_now = if second.is_some() {
            basis.fractional_norm_sq(&etas[0], 0.5)
        } else {
            0.0
        };

        if step == 0 {
            prev_cost = cost_integrand;
            prev_j = j_now.iter().map(|v| v * w).collect();
            prev_k = j_now.clone();
            prev_j2 = j2_now * w;
            prev_jeta = jeta_now * w;
        } else {
            enstrophy += 0.5 * dt * (prev_half_sq + half_sq);
            running_cost += 0.5 * dt * (prev_cost + cost_integrand);
            for (i, track) in tracks.iter_mut().enumerate() {
                track.j_bel += 0.5 * dt * (prev_j[i] + j_now[i] * w);
                track.k_plain += 0.5 * dt * (prev_k[i] + j_now[i]);
            }
            if let Some(sec) = second.as_mut() {
                sec.j_bel += 0.5 * dt * (prev_j2 + j2_now * w);
                sec.j_eta += 0.5 * dt * (prev_jeta + jeta_now * w);
            }
            prev_cost = cost_integrand;
            prev_j = j_now.iter().map(|v| v * w).collect();
            prev_k = j_now;
            prev_j2 = j2_now * w;
            prev_jeta = jeta_now * w;
        }
        prev_half_sq = half_sq;

        for (track, eta) in tracks.iter_mut().zip(&etas) {
            track.domination_peak = track
                .domination_peak
                .max((-4.0 * enstrophy).exp() * eta.norm_sq());
        }

        recorder.observe(step, t, &y, enstrophy);
        if let Some(obs) = observer.as_deref_mut() {
            obs(t, &y, &u);
        }
        if step == n_steps {
            break;
        }

        // external drift for this step: control force minus compensator
        let mut external = basis.fractional_apply(&u, -plan.k_exponent);
        external.axpy(-1.0, &compensator);

        // advance to the next node, splitting at jump events
        let step_end = t + dt;
        let mut seg_start = t;
        loop {
            let next_event = events.get(event_idx).filter(|e| e.time <= step_end);
            let seg_end = next_event.map(|e| e.time).unwrap_or(step_end);
            let h = seg_end - seg_start;
            if h > 0.0 {
                let full_step = (h - dt).abs() < 1e-12 * dt;
                // tangent steps use the state at the segment start
                let y_before = y.clone();
                let convect = if plan.include_nonlinearity {
                    plan.model.tensor.nonlinear(&y_before)?
                } else {
                    basis.zero_field()
                };
                let inc = wiener.draw(basis, h);
                let mut next = y;
                next.axpy(-h, &convect);
                next.axpy(h, &external);
                if plan.noise_scale != 0.0 {
                    next.axpy(plan.noise_scale, &inc.colored);
                }
                damp_in_place(&mut next, basis, scheme, h, full_step, &damp_dt);

                // second tangent first: its source needs the pre-update eta
                if let (Some(z), Some(sec)) = (zeta.as_mut(), second.as_mut()) {
                    if plan.noise_scale != 0.0 {
                        let mut incr = 0.0;
                        for ((zc, lam_eps), dw) in z
                            .coeffs()
                            .iter()
                            .zip(&eps_half)
                            .zip(inc.cylindrical.coeffs())
                        {
                            incr += zc * lam_eps * dw;
                        }
                        sec.i_bel += incr / plan.noise_scale;
                    }
                    let mut z_next = z.clone();
                    if plan.include_nonlinearity {
                        let mut drift = plan.model.tensor.bilinear(z, &y_before)?;
                        drift.axpy(1.0, &plan.model.tensor.bilinear(&y_before, z)?);
                        drift.axpy(2.0, &plan.model.tensor.bilinear(&etas[0], &etas[0])?);
                        z_next.axpy(-h, &drift);
                    }
                    damp_in_place(&mut z_next, basis, scheme, h, full_step, &damp_dt);
                    *z = z_next;
                }
                for (track, eta) in tracks.iter_mut().zip(etas.iter_mut()) {
                    // left-point stochastic integral against the cylindrical noise
                    if plan.noise_scale != 0.0 {
                        let mut incr = 0.0;
                        for ((e, lam_eps), dw) in eta
                            .coeffs()
                            .iter()
                            .zip(&eps_half)
                            .zip(inc.cylindrical.coeffs())
                        {
                            incr += e * lam_eps * dw;
                        }
                        track.i_bel += incr / plan.noise_scale;
                    }
                    let mut eta_next = eta.clone();
                    if plan.include_nonlinearity {
                        let mut drift = plan.model.tensor.bilinear(eta, &y_before)?;
                        drift.axpy(1.0, &plan.model.tensor.bilinear(&y_before, eta)?);
                        eta_next.axpy(-h, &drift);
                    }
                    damp_in_place(&mut eta_next, basis, scheme, h, full_step, &damp_dt);
                    *eta = eta_next;
                }
                y = next;
            }
            if let Some(event) = next_event {
                y.axpy(1.0, &event.field);
                jump_count += 1;
                event_idx += 1;
                seg_start = seg_end;
                continue;
            }
            break;
        }

        if !y.is_finite() {
            return Err(SdeError::NonFinite {
                path,
                time: step_end,
            });
        }
        let norm = y.norm();
        if norm > blowup_threshold {
            return Err(SdeError::Blowup {
                path,
                time: step_end,
                norm,
            });
        }
    }

    for (track, eta) in tracks.iter_mut().zip(&etas) {
        track.terminal = eta.clone();
    }
    if let (Some(sec), Some(z)) = (second.as_mut(), zeta.as_ref()) {
        sec.terminal = z.clone();
    }

    Ok(TrajectoryBundle {
        times: recorder.times,
        states: recorder.states,
        enstrophy_at: recorder.enstrophy_at,
        terminal: y,
        enstrophy,
        running_cost,
        jump_count,
        tangents: tracks,
        second,
    })
}

fn damp_in_place(
    field: &mut SpectralField,
    basis: &Basis,
    scheme: Scheme,
    h: f64,
    full_step: bool,
    damp_dt: &[f64],
) {
    if full_step {
        for (c, d) in field.coeffs_mut().iter_mut().zip(damp_dt) {
            *c *= d;
        }
    } else {
        for (j, lambda) in basis.eigenvalues().enumerate() {
            field.coeffs_mut()[j] *= scheme.damping(lambda, h);
        }
    }
}

/// Exact mode-wise discretization of the Ornstein-Uhlenbeck reference
/// process `dN = -A N dt + A^{-eps/2} dW`, started at zero: per step,
/// mean factor `exp(-lambda dt)` and noise variance
/// `lambda^{-eps} (1 - exp(-2 lambda dt)) / (2 lambda)`.
pub fn simulate_ou(
    model: &GalerkinModel,
    cfg: &IntegratorConfig,
    record: &RecordMode,
    master: u64,
    path: u64,
) -> Result<TrajectoryBundle, SdeError> {
    let basis = &model.basis;
    let n_steps = cfg.n_steps()?;
    let dt = cfg.dt;
    let mean_factor: Vec<f64> = basis.eigenvalues().map(|l| (-l * dt).exp()).collect();
    let noise_std: Vec<f64> = basis
        .eigenvalues()
        .map(|l| (l.powf(-model.eps) * (1.0 - (-2.0 * l * dt).exp()) / (2.0 * l)).sqrt())
        .collect();
    let mut rngs: Vec<_> = basis
        .modes()
        .iter()
        .map(|mode| substream(master, path, role::WIENER, mode.stream_key()))
        .collect();
    let normal = rand_distr::Normal::new(0.0, 1.0).expect("unit normal");

    let mut n = basis.zero_field();
    let mut recorder = Recorder::new(record, dt, n_steps);
    let mut enstrophy = 0.0;
    let mut prev_half = 0.0;
    for step in 0..=n_steps {
        let t = step as f64 * dt;
        let half = basis.fractional_norm_sq(&n, 0.5);
        if step > 0 {
            enstrophy += 0.5 * dt * (prev_half + half);
        }
        prev_half = half;
        recorder.observe(step, t, &n, enstrophy);
        if step == n_steps {
            break;
        }
        for j in 0..basis.len() {
            let z: f64 = rand_distr::Distribution::sample(&normal, &mut rngs[j]);
            n.coeffs_mut()[j] = mean_factor[j] * n.coeffs()[j] + noise_std[j] * z;
        }
    }
    Ok(TrajectoryBundle {
        times: recorder.times,
        states: recorder.states,
        enstrophy_at: recorder.enstrophy_at,
        terminal: n,
        enstrophy,
        running_cost: enstrophy,
        jump_count: 0,
        tangents: Vec::new(),
        second: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::MarkDistribution;
    use approx::assert_relative_eq;

    fn model(m: usize, eps: f64) -> GalerkinModel {
        GalerkinModel::new(m, eps).unwrap()
    }

    fn no_jumps(basis: &Basis) -> JumpModel {
        JumpModel {
            rate: 0.0,
            mark: MarkDistribution::Constant { value: 0.0 },
            gain: basis.zero_field(),
            theta: 0.25,
        }
    }

    fn jumps(basis: &Basis, rate: f64) -> JumpModel {
        JumpModel {
            rate,
            mark: MarkDistribution::ClippedGaussian {
                mean: 0.0,
                std: 1.0,
                clip: 2.0,
            },
            gain: JumpModel::power_gain(basis, 0.3, 1.0),
            theta: 0.25,
        }
    }

    #[test]
    fn config_rejects_bad_grids() {
        assert!(IntegratorConfig::new(0.0, 1.0).is_err());
        assert!(IntegratorConfig::new(-1e-3, 1.0).is_err());
        assert!(IntegratorConfig::new(3e-3, 1.0).is_err());
        assert_eq!(IntegratorConfig::new(1e-3, 0.5).unwrap().n_steps().unwrap(), 500);
    }

    #[test]
    fn tangent_heat_decay_is_exact_when_state_is_zero() {
        let model = model(8, 2.0);
        let jm = no_jumps(&model.basis);
        let cfg = IntegratorConfig::new(1e-2, 0.3).unwrap();
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 5);
        plan.noise_scale = 0.0;
        let h = model.basis.field_from(vec![1.0, -2.0, 0.5, 0.0, 1.5, 0.0, 0.0, 0.25]);
        plan.tangents = vec![h.clone()];
        let bundle = simulate_path(&plan, &model.basis.zero_field(), 0, None).unwrap();
        for (j, lambda) in model.basis.eigenvalues().enumerate() {
            // \eta(t) = e^{-At} H per mode, exactly reproduced by the scheme
            let expected = (-lambda * 1e-2).exp().powi(30) * h.coeffs()[j];
            assert_relative_eq!(bundle.tangents[0].terminal.coeffs()[j], expected, epsilon = 1e-13);
        }
    }

    #[test]
    fn step_tangent_is_linear() {
        let model = model(8, 2.0);
        let y = model.basis.field_from(vec![0.5, -0.2, 0.7, 0.1, -0.6, 0.3, 0.0, 0.2]);
        let h = model.basis.field_from(vec![1.0, 0.5, -1.0, 0.25, 0.0, -0.5, 2.0, 0.125]);
        let one = model.step_tangent(&h, &y, 1e-3, Scheme::ExponentialEuler).unwrap();
        let four = model
            .step_tangent(&h.scale(4.0), &y, 1e-3, Scheme::ExponentialEuler)
            .unwrap();
        for (a, b) in four.coeffs().iter().zip(one.coeffs()) {
            assert_eq!(*a, 4.0 * b, "scaling by a power of two is exact");
        }
    }

    #[test]
    fn second_tangent_stays_zero_without_source() {
        let model = model(8, 2.0);
        let y = model.basis.field_from(vec![0.5, -0.2, 0.7, 0.1, -0.6, 0.3, 0.0, 0.2]);
        let zero = model.basis.zero_field();
        let out = model
            .step_second_tangent(&zero, &zero, &y, 1e-3, Scheme::ExponentialEuler)
            .unwrap();
        assert_eq!(out.norm(), 0.0);
    }

    #[test]
    fn second_tangent_scales_quadratically() {
        let model = model(8, 2.0);
        let jm = no_jumps(&model.basis);
        let cfg = IntegratorConfig::new(1e-3, 0.1).unwrap();
        let x = model.basis.field_from(vec![0.6, -0.4, 0.3, 0.2, 0.5, -0.1, 0.0, 0.3]);
        let h = model.basis.unit_mode(1);
        let run = |scale: f64| {
            let mut plan = SimulationPlan::new(&model, &jm, cfg, 7);
            plan.tangents = vec![h.scale(scale)];
            plan.want_second = true;
            simulate_path(&plan, &x, 3, None)
                .unwrap()
                .second
                .unwrap()
                .terminal
        };
        let one = run(1.0);
        let two = run(2.0);
        for (a, b) in two.coeffs().iter().zip(one.coeffs()) {
            assert!((a - 4.0 * b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
    }

    #[test]
    fn tangent_matches_frozen_noise_central_difference() {
        let model = model(8, 2.0);
        let jm = jumps(&model.basis, 2.0);
        let cfg = IntegratorConfig::new(1e-3, 0.25).unwrap();
        let x = model.basis.field_from(vec![0.5, -0.3, 0.4, 0.2, -0.2, 0.3, 0.1, -0.4]);
        let h = model.basis.field_from(vec![0.3, 1.0, -0.5, 0.0, 0.7, 0.0, -0.2, 0.1]);
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 11);
        plan.tangents = vec![h.clone()];
        let eta = simulate_path(&plan, &x, 5, None).unwrap().tangents[0]
            .terminal
            .clone();

        let delta = 1e-4;
        let base = SimulationPlan::new(&model, &jm, cfg, 11);
        let plus = simulate_path(&base, &x.add(&h.scale(delta)), 5, None).unwrap();
        let minus = simulate_path(&base, &x.sub(&h.scale(delta)), 5, None).unwrap();
        let fd = plus.terminal.sub(&minus.terminal).scale(1.0 / (2.0 * delta));
        let rel = eta.sub(&fd).norm() / eta.norm().max(1e-12);
        assert!(rel <= 1e-3, "tangent vs central difference: rel {rel}");
    }

    #[test]
    fn second_tangent_matches_frozen_noise_second_difference() {
        let model = model(6, 2.0);
        let jm = jumps(&model.basis, 1.0);
        let cfg = IntegratorConfig::new(1e-3, 0.25).unwrap();
        let x = model.basis.field_from(vec![0.5, -0.3, 0.4, 0.2, -0.2, 0.3]);
        let h = model.basis.field_from(vec![0.5, 1.0, -0.5, 0.0, 0.7, 0.2]);
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 13);
        plan.tangents = vec![h.clone()];
        plan.want_second = true;
        let zeta = simulate_path(&plan, &x, 2, None)
            .unwrap()
            .second
            .unwrap()
            .terminal;

        let delta = 1e-3;
        let base = SimulationPlan::new(&model, &jm, cfg, 13);
        let center = simulate_path(&base, &x, 2, None).unwrap();
        let plus = simulate_path(&base, &x.add(&h.scale(delta)), 2, None).unwrap();
        let minus = simulate_path(&base, &x.sub(&h.scale(delta)), 2, None).unwrap();
        let mut fd = plus.terminal.clone();
        fd.axpy(-2.0, &center.terminal);
        fd.axpy(1.0, &minus.terminal);
        let fd = fd.scale(1.0 / (delta * delta));
        let rel = zeta.sub(&fd).norm() / zeta.norm().max(1e-12);
        assert!(rel <= 1e-2, "second tangent vs second difference: rel {rel}");
    }

    #[test]
    fn one_step_matches_fine_reference_integrator() {
        // deterministic dynamics: y' = -Ay - B(y); compare one 1e-3 step of
        // the scheme against classical RK4 at dt/100.
        let model = model(8, 2.0);
        let x = model.basis.field_from(vec![1.0, -0.5, 0.8, 0.3, -0.7, 0.4, 0.2, -0.1]);
        let dt = 1e-3;
        let coarse = model
            .step_state(&x, &model.basis.zero_field(), &model.basis.zero_field(), dt, Scheme::ExponentialEuler)
            .unwrap();

        let rhs = |y: &SpectralField| -> SpectralField {
            let mut out = model.tensor.nonlinear(y).unwrap().scale(-1.0);
            for (j, lambda) in model.basis.eigenvalues().enumerate() {
                out.coeffs_mut()[j] -= lambda * y.coeffs()[j];
            }
            out
        };
        let mut y = x.clone();
        let h = dt / 100.0;
        for _ in 0..100 {
            let k1 = rhs(&y);
            let mut y2 = y.clone();
            y2.axpy(0.5 * h, &k1);
            let k2 = rhs(&y2);
            let mut y3 = y.clone();
            y3.axpy(0.5 * h, &k2);
            let k3 = rhs(&y3);
            let mut y4 = y.clone();
            y4.axpy(h, &k3);
            let k4 = rhs(&y4);
            y.axpy(h / 6.0, &k1);
            y.axpy(h / 3.0, &k2);
            y.axpy(h / 3.0, &k3);
            y.axpy(h / 6.0, &k4);
        }
        let err = coarse.sub(&y).norm();
        assert!(err < 5e-6, "one-step error vs RK4 reference: {err}");
    }

    #[test]
    fn semi_implicit_damping_matches_resolvent_factor() {
        let model = model(8, 2.0);
        let x = model.basis.field_from(vec![1.0, -0.5, 0.8, 0.3, -0.7, 0.4, 0.2, -0.1]);
        let dt = 0.05;
        let stepped = model
            .step_state(
                &x,
                &model.basis.zero_field(),
                &model.basis.zero_field(),
                dt,
                Scheme::SemiImplicitEuler,
            )
            .unwrap();
        let convect = model.tensor.nonlinear(&x).unwrap();
        for (j, lambda) in model.basis.eigenvalues().enumerate() {
            let expected = (x.coeffs()[j] - dt * convect.coeffs()[j]) / (1.0 + lambda * dt);
            assert_relative_eq!(stepped.coeffs()[j], expected, epsilon = 1e-14);
        }
        // unconditional linear stability: large steps still contract
        let mut y = x.clone();
        for _ in 0..20 {
            y = model
                .step_state(&y, &model.basis.zero_field(), &model.basis.zero_field(), 1.0, Scheme::SemiImplicitEuler)
                .unwrap();
        }
        assert!(y.norm() < x.norm());
    }

    #[test]
    fn refinement_error_decreases_on_a_fixed_noise_realization() {
        // strong self-consistency: one Brownian realization sampled at the
        // finest resolution, coarser runs consume block sums of the same
        // increments, and the terminal error against the finest run must
        // shrink monotonically as dt halves.
        let model = model(8, 2.0);
        let x = model.basis.field_from(vec![0.6, -0.4, 0.5, 0.2, -0.3, 0.4, 0.1, -0.2]);
        let horizon = 0.25;
        let n_fine = 800usize;
        let h = horizon / n_fine as f64;
        let color: Vec<f64> = model.basis.eigenvalues().map(|l| l.powf(-model.eps / 2.0)).collect();
        let mut rng = crate::rng::substream(61, 0, crate::rng::role::WIENER, 0);
        let normal = rand_distr::Normal::new(0.0, 1.0).unwrap();
        let fine: Vec<Vec<f64>> = (0..n_fine)
            .map(|_| {
                (0..8)
                    .map(|_| rand_distr::Distribution::sample(&normal, &mut rng) * h.sqrt())
                    .collect()
            })
            .collect();
        let run_at = |block: usize| -> SpectralField {
            let dt = h * block as f64;
            let mut y = x.clone();
            for step in 0..n_fine / block {
                let mut colored = vec![0.0; 8];
                for sub in 0..block {
                    for (j, c) in fine[step * block + sub].iter().enumerate() {
                        colored[j] += color[j] * c;
                    }
                }
                y = model
                    .step_state(
                        &y,
                        &model.basis.zero_field(),
                        &model.basis.field_from(colored),
                        dt,
                        Scheme::ExponentialEuler,
                    )
                    .unwrap();
            }
            y
        };
        let reference = run_at(1);
        let errors: Vec<f64> = [32usize, 16, 8, 4]
            .iter()
            .map(|&b| run_at(b).sub(&reference).norm())
            .collect();
        for w in errors.windows(2) {
            assert!(
                w[1] < w[0],
                "refinement errors not monotone: {errors:?}"
            );
        }
    }

    #[test]
    fn deterministic_paths_decay_at_the_spectral_rate() {
        let model = model(8, 2.0);
        let jm = no_jumps(&model.basis);
        let cfg = IntegratorConfig::new(1e-3, 1.0).unwrap();
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 3);
        plan.noise_scale = 0.0;
        plan.record = RecordMode::Full;
        let mut rng = crate::rng::substream(3, 0, crate::rng::role::INITIAL, 0);
        for path in 0..5u64 {
            let coeffs: Vec<f64> = (0..8).map(|_| rand::Rng::random_range(&mut rng, -0.5..0.5)).collect();
            let x = model.basis.field_from(coeffs);
            let bundle = simulate_path(&plan, &x, path, None).unwrap();
            let x_norm = x.norm();
            for (t, state) in bundle.times.iter().zip(&bundle.states) {
                let bound = x_norm * (-t).exp() * (1.0 + 5.0 * cfg.dt);
                assert!(
                    state.norm() <= bound + 1e-14,
                    "t={t}: {} > {bound}",
                    state.norm()
                );
            }
        }
    }

    #[test]
    fn enstrophy_accumulator_is_node_trapezoid_and_monotone() {
        let model = model(4, 1.5);
        let jm = jumps(&model.basis, 3.0);
        let cfg = IntegratorConfig::new(1e-2, 0.5).unwrap();
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 17);
        plan.record = RecordMode::Full;
        let x = model.basis.field_from(vec![0.7, -0.2, 0.4, 0.1]);
        let bundle = simulate_path(&plan, &x, 1, None).unwrap();
        let mut acc = 0.0;
        let mut prev = model.basis.fractional_norm_sq(&bundle.states[0], 0.5);
        let mut prev_acc = 0.0;
        for (i, state) in bundle.states.iter().enumerate().skip(1) {
            let cur = model.basis.fractional_norm_sq(state, 0.5);
            acc += 0.5 * cfg.dt * (prev + cur);
            prev = cur;
            assert!(bundle.enstrophy_at[i] >= prev_acc);
            assert_relative_eq!(bundle.enstrophy_at[i], acc, max_relative = 1e-12);
            prev_acc = bundle.enstrophy_at[i];
        }
        assert_relative_eq!(bundle.enstrophy, acc, max_relative = 1e-12);
    }

    #[test]
    fn jump_events_enter_the_path() {
        let model = model(4, 1.5);
        let with = jumps(&model.basis, 10.0);
        let without = no_jumps(&model.basis);
        let cfg = IntegratorConfig::new(1e-2, 0.5).unwrap();
        let x = model.basis.unit_mode(0);
        let plan_jump = SimulationPlan::new(&model, &with, cfg, 23);
        let plan_none = SimulationPlan::new(&model, &without, cfg, 23);
        let a = simulate_path(&plan_jump, &x, 4, None).unwrap();
        let b = simulate_path(&plan_none, &x, 4, None).unwrap();
        assert!(a.jump_count > 0);
        assert_eq!(b.jump_count, 0);
        assert!(a.terminal.sub(&b.terminal).norm() > 0.0);
    }

    #[test]
    fn nonfinite_initial_state_is_reported() {
        let model = model(4, 1.5);
        let jm = no_jumps(&model.basis);
        let cfg = IntegratorConfig::new(1e-2, 0.1).unwrap();
        let plan = SimulationPlan::new(&model, &jm, cfg, 29);
        let x = model.basis.field_from(vec![f64::NAN, 0.0, 0.0, 0.0]);
        assert!(matches!(
            simulate_path(&plan, &x, 0, None),
            Err(SdeError::NonFinite { .. })
        ));
    }

    #[test]
    fn control_values_are_clipped_to_the_admissible_ball() {
        struct Huge;
        impl ControlLaw for Huge {
            fn value(&self, _p: u64, _t: f64, state: &SpectralField) -> SpectralField {
                state.scale(0.0).add(&SpectralField::from_raw(vec![50.0, 0.0, 0.0, 0.0]))
            }
        }
        let model = model(4, 1.5);
        let jm = no_jumps(&model.basis);
        let cfg = IntegratorConfig::new(1e-2, 0.2).unwrap();
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 31);
        plan.control = &Huge;
        plan.clip_radius = 0.5;
        let x = model.basis.unit_mode(0);
        let mut max_norm = 0.0f64;
        let mut observer = |_t: f64, _s: &SpectralField, u: &SpectralField| {
            max_norm = max_norm.max(u.norm());
        };
        simulate_path(&plan, &x, 0, Some(&mut observer)).unwrap();
        assert!(max_norm <= 0.5 + 1e-12);
        assert!(max_norm > 0.49, "clip should land on the boundary");
    }

    #[test]
    fn random_admissible_control_is_deterministic_per_path() {
        let law = RandomAdmissible {
            radius: 0.4,
            hold: 0.05,
            master: 99,
        };
        let state = SpectralField::from_raw(vec![0.0; 4]);
        let a = law.value(3, 0.12, &state);
        let b = law.value(3, 0.12, &state);
        assert_eq!(a, b);
        assert_relative_eq!(a.norm(), 0.4, epsilon = 1e-12);
        let c = law.value(4, 0.12, &state);
        assert!(a.sub(&c).norm() > 0.0);
    }

    #[test]
    fn paths_are_reproducible() {
        let model = model(4, 1.5);
        let jm = jumps(&model.basis, 2.0);
        let cfg = IntegratorConfig::new(1e-3, 0.3).unwrap();
        let plan = SimulationPlan::new(&model, &jm, cfg, 41);
        let x = model.basis.field_from(vec![0.4, 0.3, -0.2, 0.6]);
        let a = simulate_path(&plan, &x, 9, None).unwrap();
        let b = simulate_path(&plan, &x, 9, None).unwrap();
        assert_eq!(a.terminal, b.terminal);
        assert_eq!(a.enstrophy, b.enstrophy);
        assert_eq!(a.jump_count, b.jump_count);
    }

    #[test]
    fn tangent_domination_bound_holds_pathwise() {
        let model = model(8, 1.5);
        let jm = jumps(&model.basis, 2.0);
        let cfg = IntegratorConfig::new(1e-3, 0.5).unwrap();
        let mut plan = SimulationPlan::new(&model, &jm, cfg, 43);
        let h = model.basis.field_from(vec![0.5, -0.5, 1.0, 0.0, 0.3, 0.2, -0.7, 0.4]);
        plan.tangents = vec![h.clone()];
        let x = model.basis.field_from(vec![0.8, -0.4, 0.6, 0.2, -0.5, 0.3, 0.1, -0.2]);
        for path in 0..20u64 {
            let bundle = simulate_path(&plan, &x, path, None).unwrap();
            let bound = h.norm_sq() * (1.0 + 10.0 * cfg.dt);
            assert!(
                bundle.tangents[0].domination_peak <= bound,
                "path {path}: peak {} > {bound}",
                bundle.tangents[0].domination_peak
            );
        }
    }

    #[test]
    fn ou_starts_at_zero_and_matches_stationary_variance() {
        let model = model(4, 1.5);
        let cfg = IntegratorConfig::new(1e-2, 6.0).unwrap();
        let first = simulate_ou(&model, &cfg, &RecordMode::Full, 51, 0).unwrap();
        assert_eq!(first.states[0].norm(), 0.0);

        let n_paths = 4000u64;
        let mut sq = [0.0; 4];
        for path in 0..n_paths {
            let b = simulate_ou(&model, &cfg, &RecordMode::Terminal, 51, path).unwrap();
            for (j, c) in b.terminal.coeffs().iter().enumerate() {
                sq[j] += c * c;
            }
        }
        for (j, lambda) in model.basis.eigenvalues().enumerate() {
            let target = lambda.powf(-model.eps - 1.0) / 2.0;
            let var = sq[j] / n_paths as f64;
            let tol = 5.0 * target * (2.0 / n_paths as f64).sqrt();
            assert!(
                (var - target).abs() <= tol,
                "mode {j}: stationary var {var} vs {target}"
            );
        }
    }

    #[test]
    fn ou_sup_alpha_moment_is_finite() {
        // qualitative diagnostic: E sup_t ||N||_alpha^2 stays bounded when
        // the coloring dominates the fractional lift.
        let model = model(16, 2.0);
        let cfg = IntegratorConfig::new(1e-2, 1.0).unwrap();
        let alpha = 0.3;
        let mut acc = 0.0;
        let n_paths = 200u64;
        for path in 0..n_paths {
            let b = simulate_ou(&model, &cfg, &RecordMode::Full, 53, path).unwrap();
            let sup = b
                .states
                .iter()
                .map(|s| model.basis.fractional_norm_sq(s, alpha))
                .fold(0.0f64, f64::max);
            acc += sup;
        }
        let mean = acc / n_paths as f64;
        assert!(mean.is_finite() && mean > 0.0 && mean < 100.0);
    }
}
