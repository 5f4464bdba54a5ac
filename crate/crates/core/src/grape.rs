//! Cost evaluation, the exact split-step gradient, regularizers,
//! bound-constrained quasi-Newton optimization with step-size homotopy,
//! seeding, and chain-rule gradients for parametrized controls.

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fock::{DenseState, DenseStPropagator};
use crate::mps::Mps;
use crate::ops::{self, C64};
use crate::tebd::{self, GateSet};

/// Uniform time grid of control values with box bounds.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ControlGrid {
    dt: f64,
    values: Vec<f64>,
    bounds: (f64, f64),
    pub clamp_endpoints: bool,
}

impl ControlGrid {
    pub fn new(
        dt: f64,
        values: Vec<f64>,
        bounds: (f64, f64),
        clamp_endpoints: bool,
    ) -> Result<Self> {
        if dt <= 0.0 || !dt.is_finite() {
            return Err(Error::InvalidArgument(format!("dt = {dt} must be positive")));
        }
        if values.len() < 2 {
            return Err(Error::InvalidArgument(
                "a control grid needs at least two points".into(),
            ));
        }
        if bounds.0 >= bounds.1 {
            return Err(Error::InvalidArgument(format!(
                "bounds ({}, {}) must be ordered",
                bounds.0, bounds.1
            )));
        }
        let slack = 1e-9 * (bounds.1 - bounds.0);
        for &u in &values {
            if !u.is_finite() || u < bounds.0 - slack || u > bounds.1 + slack {
                return Err(Error::ControlOutOfBounds {
                    value: u,
                    min: bounds.0,
                    max: bounds.1,
                });
            }
        }
        Ok(Self {
            dt,
            values,
            bounds,
            clamp_endpoints,
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bounds(&self) -> (f64, f64) {
        self.bounds
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// Total duration T = (n_t - 1) dt.
    pub fn duration(&self) -> f64 {
        (self.len() - 1) as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|j| j as f64 * self.dt).collect()
    }

    /// Replace the values with a clipped copy of `raw`, keeping clamped
    /// endpoints untouched.
    pub fn set_values_projected(&mut self, raw: &[f64]) {
        let n = self.values.len();
        for i in 0..n {
            if self.clamp_endpoints && (i == 0 || i == n - 1) {
                continue;
            }
            self.values[i] = raw[i].clamp(self.bounds.0, self.bounds.1);
        }
    }

    /// Shift one element without bounds checking; used by finite-difference
    /// probing only.
    pub(crate) fn nudge_unchecked(&mut self, index: usize, delta: f64) {
        self.values[index] += delta;
    }
}

/// Halve the time step, inserting each new point with the value of the old
/// point immediately prior: [a, b, c] -> [a, a, b, b, c].
pub fn refine_control(controls: &ControlGrid) -> ControlGrid {
    let old = controls.values();
    let mut values = Vec::with_capacity(2 * old.len() - 1);
    for (i, &u) in old.iter().enumerate() {
        values.push(u);
        if i + 1 < old.len() {
            values.push(u);
        }
    }
    ControlGrid {
        dt: controls.dt / 2.0,
        values,
        bounds: controls.bounds,
        clamp_endpoints: controls.clamp_endpoints,
    }
}

/// One split propagation step and its adjoint over some state representation,
/// plus the inner products the gradient needs.
pub trait StEngine {
    type State: Clone;

    fn dt(&self) -> f64;
    fn step(&self, state: &mut Self::State, u_n: f64, u_np1: f64) -> Result<()>;
    fn step_adjoint(&self, state: &mut Self::State, u_n: f64, u_np1: f64) -> Result<()>;
    /// <bra|ket>.
    fn overlap(&self, bra: &Self::State, ket: &Self::State) -> Result<C64>;
    /// <bra| (1/2) sum_i n_i(n_i - 1) |ket>, the control-derivative element.
    fn control_derivative_element(&self, bra: &Self::State, ket: &Self::State) -> Result<C64>;
    /// Accumulated truncation weight carried by the state (0 for exact paths).
    fn truncation(&self, _state: &Self::State) -> f64 {
        0.0
    }
}

/// MPS realization of the split step.
pub struct MpsEngine {
    pub gates: GateSet,
    interaction_op: DMatrix<f64>,
}

impl MpsEngine {
    pub fn new(local_dim: usize, dt: f64) -> Self {
        Self {
            gates: GateSet::real_time(local_dim, dt),
            interaction_op: DMatrix::from_diagonal(&nalgebra::DVector::from_vec(
                ops::interaction_diagonal(local_dim),
            )),
        }
    }
}

impl StEngine for MpsEngine {
    type State = Mps;

    fn dt(&self) -> f64 {
        self.gates.dt
    }

    fn step(&self, state: &mut Mps, u_n: f64, u_np1: f64) -> Result<()> {
        tebd::step(state, u_n, u_np1, &self.gates)
    }

    fn step_adjoint(&self, state: &mut Mps, u_n: f64, u_np1: f64) -> Result<()> {
        tebd::step_adjoint(state, u_n, u_np1, &self.gates)
    }

    fn overlap(&self, bra: &Mps, ket: &Mps) -> Result<C64> {
        Mps::overlap(bra, ket)
    }

    fn control_derivative_element(&self, bra: &Mps, ket: &Mps) -> Result<C64> {
        let vals = Mps::cross_elements_all_sites(bra, ket, &self.interaction_op)?;
        Ok(0.5 * vals.iter().sum::<C64>())
    }

    fn truncation(&self, state: &Mps) -> f64 {
        state.log_truncation
    }
}

/// Dense exact-diagonalization realization of the split step.
pub struct DenseEngine {
    pub propagator: DenseStPropagator,
    interaction: Vec<f64>,
}

impl DenseEngine {
    pub fn new(propagator: DenseStPropagator) -> Self {
        let interaction = propagator
            .basis()
            .states
            .iter()
            .map(|occ| {
                occ.iter()
                    .map(|&n| (n as f64) * (n as f64 - 1.0))
                    .sum::<f64>()
            })
            .collect();
        Self {
            propagator,
            interaction,
        }
    }
}

impl StEngine for DenseEngine {
    type State = DenseState;

    fn dt(&self) -> f64 {
        self.propagator.dt
    }

    fn step(&self, state: &mut DenseState, u_n: f64, u_np1: f64) -> Result<()> {
        *state = self.propagator.step(state, u_n, u_np1);
        Ok(())
    }

    fn step_adjoint(&self, state: &mut DenseState, u_n: f64, u_np1: f64) -> Result<()> {
        *state = self.propagator.step_adjoint(state, u_n, u_np1);
        Ok(())
    }

    fn overlap(&self, bra: &DenseState, ket: &DenseState) -> Result<C64> {
        Ok(bra.inner(ket))
    }

    fn control_derivative_element(&self, bra: &DenseState, ket: &DenseState) -> Result<C64> {
        let mut acc = C64::new(0.0, 0.0);
        for k in 0..self.interaction.len() {
            acc += bra.amplitudes[k].conj() * ket.amplitudes[k] * (0.5 * self.interaction[k]);
        }
        Ok(acc)
    }
}

/// Cost specification shared across engines of matching state type.
#[derive(Clone)]
pub struct CostConfig<S> {
    pub alpha: f64,
    pub gamma: f64,
    pub initial_state: S,
    pub target_state: S,
    /// Include the fidelity term (disable to test regularizers in isolation).
    pub fidelity_enabled: bool,
    /// Store a forward checkpoint every k steps and recompute in between;
    /// `None` stores every state.
    pub checkpoint_every: Option<usize>,
    pub truncation_alarm_threshold: f64,
}

impl<S> CostConfig<S> {
    pub fn new(initial_state: S, target_state: S, alpha: f64, gamma: f64) -> Self {
        Self {
            alpha,
            gamma,
            initial_state,
            target_state,
            fidelity_enabled: true,
            checkpoint_every: None,
            truncation_alarm_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradientResult {
    pub total_cost: f64,
    pub fidelity: f64,
    pub gradient: Vec<f64>,
    pub overlap: C64,
    pub truncation_alarm: bool,
}

/// J_alpha = (alpha/2) sum u_n^2 dt, J_gamma = (gamma/2) sum (u_{n+1}-u_n)^2 / dt,
/// with their analytic gradients.
pub fn regularizer_costs(
    controls: &ControlGrid,
    alpha: f64,
    gamma: f64,
) -> (f64, f64, Vec<f64>) {
    let u = controls.values();
    let dt = controls.dt();
    let n = u.len();
    let j_alpha = 0.5 * alpha * dt * u.iter().map(|x| x * x).sum::<f64>();
    let j_gamma = 0.5 * gamma / dt
        * u.windows(2)
            .map(|w| (w[1] - w[0]) * (w[1] - w[0]))
            .sum::<f64>();
    let mut grad = vec![0.0; n];
    for i in 0..n {
        grad[i] += alpha * u[i] * dt;
        if i + 1 < n {
            grad[i] -= gamma * (u[i + 1] - u[i]) / dt;
        }
        if i > 0 {
            grad[i] += gamma * (u[i] - u[i - 1]) / dt;
        }
    }
    (j_alpha, j_gamma, grad)
}

/// Total cost J = (1 - F)/2 + J_alpha + J_gamma and its exact gradient via
/// one forward and one backward pass.
pub fn cost_and_gradient<E: StEngine>(
    engine: &E,
    config: &CostConfig<E::State>,
    controls: &ControlGrid,
) -> Result<GradientResult> {
    let u = controls.values();
    let n_t = u.len();
    let dt = controls.dt();
    let (j_alpha, j_gamma, mut gradient) = regularizer_costs(controls, config.alpha, config.gamma);
    let mut fidelity = 1.0;
    let mut overlap = C64::new(1.0, 0.0);
    let mut truncation_alarm = false;

    if config.fidelity_enabled {
        // forward pass, keeping states (or checkpoints) for the backward pass
        let keep_every = config.checkpoint_every.unwrap_or(1).max(1);
        let mut stored: Vec<(usize, E::State)> = Vec::new();
        let mut psi = config.initial_state.clone();
        stored.push((0, psi.clone()));
        for n in 0..n_t - 1 {
            engine.step(&mut psi, u[n], u[n + 1])?;
            if (n + 1) % keep_every == 0 || n + 1 == n_t - 1 {
                stored.push((n + 1, psi.clone()));
            }
        }
        overlap = engine.overlap(&config.target_state, &psi)?;
        if !overlap.re.is_finite() || !overlap.im.is_finite() {
            return Err(Error::NonFiniteCost { index: None });
        }
        fidelity = overlap.norm_sqr();
        truncation_alarm = engine.truncation(&psi) > config.truncation_alarm_threshold;

        // psi_n (1-based paper index) is the state after n-1 steps
        let psi_at = |steps_done: usize| -> Result<E::State> {
            let (at, state) = stored
                .iter()
                .rev()
                .find(|(k, _)| *k <= steps_done)
                .expect("step 0 is always stored");
            let mut s = state.clone();
            for m in *at..steps_done {
                engine.step(&mut s, u[m], u[m + 1])?;
            }
            Ok(s)
        };

        let mut chi = config.target_state.clone();
        for n in (0..n_t).rev() {
            let psi_n = psi_at(n)?;
            let elem = engine.control_derivative_element(&chi, &psi_n)?;
            let weight = if n == 0 || n == n_t - 1 { 0.5 } else { 1.0 };
            gradient[n] += (C64::new(0.0, 1.0) * overlap.conj() * elem).re * dt * weight;
            if n > 0 {
                engine.step_adjoint(&mut chi, u[n - 1], u[n])?;
            }
        }
    }

    if controls.clamp_endpoints {
        gradient[0] = 0.0;
        gradient[n_t - 1] = 0.0;
    }
    let total_cost = 0.5 * (1.0 - fidelity) + j_alpha + j_gamma;
    if !total_cost.is_finite() || gradient.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteCost { index: None });
    }
    Ok(GradientResult {
        total_cost,
        fidelity,
        gradient,
        overlap,
        truncation_alarm,
    })
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct HomotopyStage {
    pub dt: f64,
    pub max_iterations: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum StageStatus {
    Converged,
    IterationLimit,
    LineSearchFailure,
}

#[derive(Debug, Clone, Serialize)]
pub struct IterationRecord {
    pub stage: usize,
    pub iteration: usize,
    pub cost: f64,
    pub fidelity: f64,
    pub gradient_norm: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct OptimizationRecord {
    pub iterations: Vec<IterationRecord>,
    pub stage_statuses: Vec<StageStatus>,
    pub final_cost: f64,
    pub final_fidelity: f64,
    #[serde(skip)]
    pub final_controls: ControlGrid,
    pub final_truncation_alarm: bool,
}

#[derive(Debug, Clone, Copy)]
pub struct OptimizeOptions {
    /// Projected-gradient infinity-norm convergence threshold.
    pub gradient_tolerance: f64,
    /// L-BFGS memory length.
    pub memory: usize,
}

impl Default for OptimizeOptions {
    fn default() -> Self {
        Self {
            gradient_tolerance: 1e-8,
            memory: 10,
        }
    }
}

/// Projected limited-memory quasi-Newton minimization over the homotopy
/// stages, refining the control grid between stages.
pub fn optimize<E, F>(
    make_engine: F,
    config: &CostConfig<E::State>,
    seed: ControlGrid,
    stages: &[HomotopyStage],
    options: &OptimizeOptions,
) -> Result<OptimizationRecord>
where
    E: StEngine,
    F: Fn(f64) -> Result<E>,
{
    if stages.is_empty() {
        return Err(Error::InvalidArgument("empty homotopy schedule".into()));
    }
    if stages.windows(2).any(|w| w[1].dt > w[0].dt + 1e-12) {
        return Err(Error::InvalidArgument(
            "homotopy stages must have nonincreasing dt".into(),
        ));
    }
    let mut controls = seed;
    let mut iterations = Vec::new();
    let mut stage_statuses = Vec::new();
    let mut last = None;
    for (stage_index, stage) in stages.iter().enumerate() {
        // bring the grid onto the stage resolution by repeated halving
        while controls.dt() > stage.dt * (1.0 + 1e-9) {
            let refined = refine_control(&controls);
            if refined.dt() < stage.dt * (1.0 - 1e-9) {
                return Err(Error::InvalidArgument(format!(
                    "stage dt {} is not reachable from {} by halving",
                    stage.dt,
                    controls.dt() * 2.0
                )));
            }
            controls = refined;
        }
        let engine = make_engine(controls.dt())?;
        let (status, result) = minimize_stage(
            &engine,
            config,
            &mut controls,
            stage.max_iterations,
            options,
            stage_index,
            &mut iterations,
        )?;
        stage_statuses.push(status);
        last = Some(result);
    }
    let last = last.expect("at least one stage ran");
    Ok(OptimizationRecord {
        iterations,
        stage_statuses,
        final_cost: last.total_cost,
        final_fidelity: last.fidelity,
        final_controls: controls,
        final_truncation_alarm: last.truncation_alarm,
    })
}

fn project(controls: &ControlGrid, raw: &[f64]) -> Vec<f64> {
    let (lo, hi) = controls.bounds();
    let n = raw.len();
    raw.iter()
        .enumerate()
        .map(|(i, &x)| {
            if controls.clamp_endpoints && (i == 0 || i == n - 1) {
                controls.values()[i]
            } else {
                x.clamp(lo, hi)
            }
        })
        .collect()
}

fn projected_gradient_norm(controls: &ControlGrid, gradient: &[f64]) -> f64 {
    let u = controls.values();
    let stepped: Vec<f64> = u.iter().zip(gradient).map(|(x, g)| x - g).collect();
    let projected = project(controls, &stepped);
    u.iter()
        .zip(&projected)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

#[allow(clippy::too_many_arguments)]
fn minimize_stage<E: StEngine>(
    engine: &E,
    config: &CostConfig<E::State>,
    controls: &mut ControlGrid,
    max_iterations: usize,
    options: &OptimizeOptions,
    stage_index: usize,
    log: &mut Vec<IterationRecord>,
) -> Result<(StageStatus, GradientResult)> {
    let mut result = cost_and_gradient(engine, config, controls)?;
    let mut s_list: Vec<Vec<f64>> = Vec::new();
    let mut y_list: Vec<Vec<f64>> = Vec::new();
    let record = |log: &mut Vec<IterationRecord>, it: usize, r: &GradientResult, c: &ControlGrid| {
        log.push(IterationRecord {
            stage: stage_index,
            iteration: it,
            cost: r.total_cost,
            fidelity: r.fidelity,
            gradient_norm: projected_gradient_norm(c, &r.gradient),
        });
    };
    record(log, 0, &result, controls);
    for it in 1..=max_iterations {
        if projected_gradient_norm(controls, &result.gradient) < options.gradient_tolerance {
            return Ok((StageStatus::Converged, result));
        }
        let direction = lbfgs_direction(&result.gradient, &s_list, &y_list);
        // backtracking line search on the projected iterate
        let u0 = controls.values().to_vec();
        let mut t = 1.0;
        let mut accepted = None;
        while t > 1e-12 {
            let trial_raw: Vec<f64> = u0
                .iter()
                .zip(&direction)
                .map(|(x, d)| x + t * d)
                .collect();
            let trial_values = project(controls, &trial_raw);
            let displacement: f64 = trial_values
                .iter()
                .zip(&u0)
                .zip(&result.gradient)
                .map(|((x, x0), g)| (x - x0) * g)
                .sum();
            if displacement >= 0.0 {
                // projection removed all descent at this scale; shrink
                t *= 0.5;
                continue;
            }
            let mut trial = controls.clone();
            trial.set_values_projected(&trial_values);
            let trial_result = cost_and_gradient(engine, config, &trial)?;
            if trial_result.total_cost <= result.total_cost + 1e-4 * displacement {
                accepted = Some((trial, trial_result, displacement));
                break;
            }
            t *= 0.5;
        }
        match accepted {
            None => return Ok((StageStatus::LineSearchFailure, result)),
            Some((trial, trial_result, _)) => {
                let s: Vec<f64> = trial
                    .values()
                    .iter()
                    .zip(&u0)
                    .map(|(a, b)| a - b)
                    .collect();
                let y: Vec<f64> = trial_result
                    .gradient
                    .iter()
                    .zip(&result.gradient)
                    .map(|(a, b)| a - b)
                    .collect();
                let sy: f64 = s.iter().zip(&y).map(|(a, b)| a * b).sum();
                let ss: f64 = s.iter().map(|a| a * a).sum();
                let yy: f64 = y.iter().map(|a| a * a).sum();
                if sy > 1e-10 * (ss * yy).sqrt() {
                    s_list.push(s);
                    y_list.push(y);
                    if s_list.len() > options.memory {
                        s_list.remove(0);
                        y_list.remove(0);
                    }
                }
                *controls = trial;
                result = trial_result;
                record(log, it, &result, controls);
            }
        }
    }
    Ok((StageStatus::IterationLimit, result))
}

/// Two-loop recursion; returns a descent direction (negated).
fn lbfgs_direction(gradient: &[f64], s_list: &[Vec<f64>], y_list: &[Vec<f64>]) -> Vec<f64> {
    let m = s_list.len();
    let mut q = gradient.to_vec();
    let mut alphas = vec![0.0; m];
    let mut rhos = vec![0.0; m];
    for i in (0..m).rev() {
        let sy: f64 = s_list[i].iter().zip(&y_list[i]).map(|(a, b)| a * b).sum();
        rhos[i] = 1.0 / sy;
        let alpha = rhos[i] * s_list[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        alphas[i] = alpha;
        for (qk, yk) in q.iter_mut().zip(&y_list[i]) {
            *qk -= alpha * yk;
        }
    }
    let gamma = if m > 0 {
        let sy: f64 = s_list[m - 1]
            .iter()
            .zip(&y_list[m - 1])
            .map(|(a, b)| a * b)
            .sum();
        let yy: f64 = y_list[m - 1].iter().map(|a| a * a).sum();
        sy / yy
    } else {
        1.0
    };
    for qk in q.iter_mut() {
        *qk *= gamma;
    }
    for i in 0..m {
        let beta = rhos[i] * y_list[i].iter().zip(&q).map(|(a, b)| a * b).sum::<f64>();
        for (qk, sk) in q.iter_mut().zip(&s_list[i]) {
            *qk += (alphas[i] - beta) * sk;
        }
    }
    q.iter().map(|x| -x).collect()
}

/// Reference ramp shape between the boundary controls.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ReferenceShape {
    /// Geometric interpolation: slow in u early (near the critical point),
    /// fast late.
    Geometric,
    Linear,
}

/// Seed generator: reference ramp plus random Fourier components.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedSpec {
    pub u_start: f64,
    pub u_end: f64,
    pub reference: ReferenceShape,
    pub n_fourier: usize,
    pub amplitude_scale: f64,
    /// Angular frequencies drawn uniformly from this range, in units of the
    /// fundamental 2 pi / T.
    pub frequency_range: (f64, f64),
    pub rng_seed: u64,
}

impl SeedSpec {
    pub fn reference_at(&self, t: f64, duration: f64) -> f64 {
        let s = if duration > 0.0 { t / duration } else { 0.0 };
        match self.reference {
            ReferenceShape::Geometric => self.u_start * (self.u_end / self.u_start).powf(s),
            ReferenceShape::Linear => self.u_start + (self.u_end - self.u_start) * s,
        }
    }
}

/// Sample the reference ramp on the grid, overlay random Fourier components,
/// clip to bounds, and clamp endpoints when requested.
pub fn generate_seed(
    spec: &SeedSpec,
    n_t: usize,
    dt: f64,
    bounds: (f64, f64),
    clamp_endpoints: bool,
) -> Result<ControlGrid> {
    let duration = (n_t - 1) as f64 * dt;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.rng_seed);
    let fundamental = 2.0 * std::f64::consts::PI / duration.max(f64::MIN_POSITIVE);
    let components: Vec<(f64, f64, f64)> = (0..spec.n_fourier)
        .map(|_| {
            let amplitude = spec.amplitude_scale * (2.0 * rng.gen::<f64>() - 1.0);
            let frequency = fundamental
                * (spec.frequency_range.0
                    + (spec.frequency_range.1 - spec.frequency_range.0) * rng.gen::<f64>());
            let phase = 2.0 * std::f64::consts::PI * rng.gen::<f64>();
            (amplitude, frequency, phase)
        })
        .collect();
    let mut values: Vec<f64> = (0..n_t)
        .map(|j| {
            let t = j as f64 * dt;
            let mut u = spec.reference_at(t, duration);
            for &(a, w, p) in &components {
                u += a * (w * t + p).sin();
            }
            u.clamp(bounds.0, bounds.1)
        })
        .collect();
    if clamp_endpoints {
        values[0] = spec.u_start.clamp(bounds.0, bounds.1);
        values[n_t - 1] = spec.u_end.clamp(bounds.0, bounds.1);
    }
    ControlGrid::new(dt, values, bounds, clamp_endpoints)
}

/// Control parametrized on a small function basis with analytic derivatives.
pub trait CrabBasis {
    fn n_params(&self) -> usize;
    /// u(t; theta) including the reference.
    fn control_at(&self, theta: &[f64], t: f64) -> f64;
    /// d u(t; theta) / d theta_i.
    fn derivative_at(&self, theta: &[f64], t: f64, i: usize) -> f64;
}

/// Reference ramp plus theta_i sin(omega_i t) terms.
pub struct FourierCrab {
    pub spec: SeedSpec,
    pub duration: f64,
    pub frequencies: Vec<f64>,
}

impl CrabBasis for FourierCrab {
    fn n_params(&self) -> usize {
        self.frequencies.len()
    }

    fn control_at(&self, theta: &[f64], t: f64) -> f64 {
        let mut u = self.spec.reference_at(t, self.duration);
        for (th, w) in theta.iter().zip(&self.frequencies) {
            u += th * (w * t).sin();
        }
        u
    }

    fn derivative_at(&self, _theta: &[f64], t: f64, i: usize) -> f64 {
        (self.frequencies[i] * t).sin()
    }
}

/// Chain-rule gradient in the basis parameters:
/// dJ/d theta_i = sum_n dJ/du_n * du_n/d theta_i.
pub fn crab_gradient<E: StEngine, B: CrabBasis>(
    basis: &B,
    theta: &[f64],
    engine: &E,
    config: &CostConfig<E::State>,
    n_t: usize,
    dt: f64,
    bounds: (f64, f64),
) -> Result<(f64, Vec<f64>)> {
    let values: Vec<f64> = (0..n_t)
        .map(|j| basis.control_at(theta, j as f64 * dt))
        .collect();
    let controls = ControlGrid::new(dt, values, bounds, false)?;
    let result = cost_and_gradient(engine, config, &controls)?;
    let mut grad_theta = vec![0.0; basis.n_params()];
    for (i, g) in grad_theta.iter_mut().enumerate() {
        for (n, gu) in result.gradient.iter().enumerate() {
            *g += gu * basis.derivative_at(theta, n as f64 * dt, i);
        }
    }
    Ok((result.total_cost, grad_theta))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{self, DriftMode, FockBasis};
    use approx::assert_relative_eq;
    use std::sync::Arc;

    const BOUNDS: (f64, f64) = (1.32, 40.18);

    fn dense_engine(basis: &Arc<FockBasis>, dt: f64) -> DenseEngine {
        DenseEngine::new(DenseStPropagator::new(basis.clone(), dt, DriftMode::EvenOdd).unwrap())
    }

    fn sample_controls(n_t: usize, dt: f64, seed: u64) -> ControlGrid {
        let spec = SeedSpec {
            u_start: 2.0,
            u_end: 35.0,
            reference: ReferenceShape::Geometric,
            n_fourier: 4,
            amplitude_scale: 3.0,
            frequency_range: (0.5, 3.0),
            rng_seed: seed,
        };
        generate_seed(&spec, n_t, dt, BOUNDS, false).unwrap()
    }

    #[test]
    fn refine_follows_the_prior_point_rule() {
        let c = ControlGrid::new(0.1, vec![2.0, 3.0, 4.0], BOUNDS, false).unwrap();
        let r = refine_control(&c);
        assert_eq!(r.values(), &[2.0, 2.0, 3.0, 3.0, 4.0]);
        assert_relative_eq!(r.dt(), 0.05);
        assert_relative_eq!(r.duration(), c.duration());
        let constant = ControlGrid::new(0.1, vec![5.0; 4], BOUNDS, false).unwrap();
        assert!(refine_control(&constant).values().iter().all(|&u| u == 5.0));
    }

    #[test]
    fn regularizers_have_exact_gradients() {
        let c = sample_controls(9, 0.1, 5);
        let (ja, jg, grad) = regularizer_costs(&c, 2e-3, 3e-3);
        assert!(ja > 0.0 && jg > 0.0);
        let fd = fock::finite_difference_gradient(
            |probe| {
                let (a, g, _) = regularizer_costs(probe, 2e-3, 3e-3);
                Ok(a + g)
            },
            &c,
            1e-5,
        )
        .unwrap();
        for (a, b) in grad.iter().zip(&fd) {
            assert_relative_eq!(a, b, epsilon = 1e-9, max_relative = 1e-8);
        }
        // constant control has no derivative cost; zero control has no cost
        let flat = ControlGrid::new(0.1, vec![7.0; 5], BOUNDS, false).unwrap();
        let (_, jg, _) = regularizer_costs(&flat, 1.0, 1.0);
        assert_eq!(jg, 0.0);
    }

    #[test]
    fn fidelity_gradient_matches_finite_differences() {
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let dt = 0.1;
        let engine = dense_engine(&basis, dt);
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let (_, mott) = fock::ground_state(&basis, 35.0).unwrap();
        let config = CostConfig::new(sf, mott, 1e-7, 1e-8);
        let controls = sample_controls(11, dt, 9);
        let exact = cost_and_gradient(&engine, &config, &controls).unwrap();
        let fd = fock::finite_difference_gradient(
            |probe| Ok(cost_and_gradient(&engine, &config, probe)?.total_cost),
            &controls,
            1e-5,
        )
        .unwrap();
        let scale = fd.iter().map(|g| g.abs()).fold(0.0, f64::max);
        for (a, b) in exact.gradient.iter().zip(&fd) {
            assert!((a - b).abs() / scale < 1e-6, "exact {a} vs fd {b}");
        }
        // cost decomposition audit
        let (ja, jg, _) = regularizer_costs(&controls, config.alpha, config.gamma);
        assert_relative_eq!(
            exact.total_cost,
            0.5 * (1.0 - exact.fidelity) + ja + jg,
            epsilon = 1e-12
        );
    }

    #[test]
    fn checkpointed_gradient_is_identical() {
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let engine = dense_engine(&basis, 0.1);
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let (_, mott) = fock::ground_state(&basis, 35.0).unwrap();
        let mut config = CostConfig::new(sf, mott, 0.0, 0.0);
        let controls = sample_controls(13, 0.1, 23);
        let full = cost_and_gradient(&engine, &config, &controls).unwrap();
        config.checkpoint_every = Some(4);
        let chk = cost_and_gradient(&engine, &config, &controls).unwrap();
        assert_relative_eq!(full.total_cost, chk.total_cost, epsilon = 1e-14);
        for (a, b) in full.gradient.iter().zip(&chk.gradient) {
            assert_relative_eq!(a, b, epsilon = 1e-13);
        }
    }

    #[test]
    fn identity_transfer_has_unit_fidelity_gradient_structure() {
        // initial = target = an eigenstate at constant u: the split evolution
        // only dephases it by O(dt^2) per step, so J_F stays near zero
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let engine = dense_engine(&basis, 0.01);
        let (_, gs) = fock::ground_state(&basis, 10.0).unwrap();
        let config = CostConfig::new(gs.clone(), gs, 0.0, 0.0);
        let controls = ControlGrid::new(0.01, vec![10.0; 11], BOUNDS, false).unwrap();
        let r = cost_and_gradient(&engine, &config, &controls).unwrap();
        assert!(r.fidelity > 1.0 - 1e-6);
        assert!(r.total_cost < 1e-6);
    }

    #[test]
    fn regularizer_only_gradient_is_analytic_and_endpoints_clamp() {
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let engine = dense_engine(&basis, 0.1);
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let (_, mott) = fock::ground_state(&basis, 35.0).unwrap();
        let mut config = CostConfig::new(sf, mott, 1e-3, 0.0);
        config.fidelity_enabled = false;
        let controls = ControlGrid::new(0.1, vec![3.0, 7.0, 11.0], BOUNDS, false).unwrap();
        let r = cost_and_gradient(&engine, &config, &controls).unwrap();
        for (g, u) in r.gradient.iter().zip(controls.values()) {
            assert_relative_eq!(g, &(1e-3 * u * 0.1), epsilon = 1e-15);
        }
        let clamped = ControlGrid::new(0.1, vec![3.0, 7.0, 11.0], BOUNDS, true).unwrap();
        let r = cost_and_gradient(&engine, &config, &clamped).unwrap();
        assert_eq!(r.gradient[0], 0.0);
        assert_eq!(r.gradient[2], 0.0);
    }

    #[test]
    fn phase_invariance_of_cost_and_gradient() {
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let engine = dense_engine(&basis, 0.1);
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let (_, mott) = fock::ground_state(&basis, 35.0).unwrap();
        let controls = sample_controls(7, 0.1, 31);
        let r1 = cost_and_gradient(&engine, &CostConfig::new(sf.clone(), mott.clone(), 0.0, 0.0), &controls)
            .unwrap();
        let mut rotated = mott.clone();
        rotated.amplitudes *= C64::new(0.0, 1.234).exp();
        let r2 =
            cost_and_gradient(&engine, &CostConfig::new(sf, rotated, 0.0, 0.0), &controls).unwrap();
        assert_relative_eq!(r1.fidelity, r2.fidelity, epsilon = 1e-12);
        assert_relative_eq!(r1.total_cost, r2.total_cost, epsilon = 1e-12);
        for (a, b) in r1.gradient.iter().zip(&r2.gradient) {
            assert_relative_eq!(a, b, epsilon = 1e-12);
        }
        assert!((r1.overlap.norm() - r2.overlap.norm()).abs() < 1e-12);
    }

    #[test]
    fn optimizer_descends_and_respects_bounds() {
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let (_, mott) = fock::ground_state(&basis, 35.0).unwrap();
        let config = CostConfig::new(sf, mott, 1e-8, 1e-9);
        let seed = sample_controls(11, 0.1, 77);
        let stages = [
            HomotopyStage {
                dt: 0.1,
                max_iterations: 15,
            },
            HomotopyStage {
                dt: 0.05,
                max_iterations: 10,
            },
        ];
        let record = optimize(
            |dt| {
                Ok(DenseEngine::new(DenseStPropagator::new(
                    basis.clone(),
                    dt,
                    DriftMode::EvenOdd,
                )?))
            },
            &config,
            seed.clone(),
            &stages,
            &OptimizeOptions::default(),
        )
        .unwrap();
        // monotone descent within each stage
        for w in record.iterations.windows(2) {
            if w[0].stage == w[1].stage {
                assert!(w[1].cost <= w[0].cost + 1e-14);
            }
        }
        let first = &record.iterations[0];
        assert!(record.final_cost <= first.cost);
        for &u in record.final_controls.values() {
            assert!((BOUNDS.0..=BOUNDS.1).contains(&u));
        }
        assert_eq!(record.final_controls.len(), 21);
        assert_relative_eq!(record.final_controls.dt(), 0.05);
    }

    #[test]
    fn optimizer_stops_immediately_at_an_interior_optimum() {
        // fidelity disabled, alpha only: with bounds shifted to contain 0 the
        // flat-zero control is the unique optimum
        let basis = Arc::new(FockBasis::new(2, 2).unwrap());
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let mut config = CostConfig::new(sf.clone(), sf, 1e-2, 0.0);
        config.fidelity_enabled = false;
        let controls = ControlGrid::new(0.1, vec![0.0; 5], (-1.0, 1.0), false).unwrap();
        let stages = [HomotopyStage {
            dt: 0.1,
            max_iterations: 10,
        }];
        let record = optimize(
            |dt| {
                Ok(DenseEngine::new(DenseStPropagator::new(
                    basis.clone(),
                    dt,
                    DriftMode::EvenOdd,
                )?))
            },
            &config,
            controls,
            &stages,
            &OptimizeOptions::default(),
        )
        .unwrap();
        assert_eq!(record.stage_statuses[0], StageStatus::Converged);
        assert!(record.iterations.len() <= 2);
        assert!(record.iterations.last().unwrap().gradient_norm < 1e-8);
    }

    #[test]
    fn seeds_are_deterministic_and_bounded() {
        let spec = SeedSpec {
            u_start: 1.9458,
            u_end: 35.75,
            reference: ReferenceShape::Geometric,
            n_fourier: 6,
            amplitude_scale: 5.0,
            frequency_range: (0.5, 4.0),
            rng_seed: 42,
        };
        let a = generate_seed(&spec, 31, 0.1, BOUNDS, true).unwrap();
        let b = generate_seed(&spec, 31, 0.1, BOUNDS, true).unwrap();
        assert_eq!(a.values(), b.values());
        assert_relative_eq!(a.values()[0], spec.u_start);
        assert_relative_eq!(a.values()[30], spec.u_end);
        for seed in 0..200 {
            let mut s = spec.clone();
            s.rng_seed = seed;
            let g = generate_seed(&s, 31, 0.1, BOUNDS, true).unwrap();
            assert!(g
                .values()
                .iter()
                .all(|&u| (BOUNDS.0..=BOUNDS.1).contains(&u)));
        }
        // zero Fourier amplitudes reproduce the reference exactly
        let mut quiet = spec.clone();
        quiet.n_fourier = 0;
        let g = generate_seed(&quiet, 11, 0.1, BOUNDS, false).unwrap();
        for (j, &u) in g.values().iter().enumerate() {
            assert_relative_eq!(u, spec.reference_at(j as f64 * 0.1, 1.0), epsilon = 1e-12);
        }
    }

    #[test]
    fn crab_gradient_follows_the_chain_rule() {
        let basis = Arc::new(FockBasis::new(3, 3).unwrap());
        let dt = 0.1;
        let engine = dense_engine(&basis, dt);
        let (_, sf) = fock::ground_state(&basis, 2.0).unwrap();
        let (_, mott) = fock::ground_state(&basis, 35.0).unwrap();
        let config = CostConfig::new(sf, mott, 1e-8, 0.0);
        let n_t = 11;
        let duration = (n_t - 1) as f64 * dt;
        let crab = FourierCrab {
            spec: SeedSpec {
                u_start: 2.0,
                u_end: 35.0,
                reference: ReferenceShape::Geometric,
                n_fourier: 0,
                amplitude_scale: 0.0,
                frequency_range: (0.0, 0.0),
                rng_seed: 0,
            },
            duration,
            frequencies: vec![
                std::f64::consts::PI / duration,
                2.0 * std::f64::consts::PI / duration,
            ],
        };
        let theta = vec![0.8, -0.5];
        let (cost, grad) =
            crab_gradient(&crab, &theta, &engine, &config, n_t, dt, BOUNDS).unwrap();
        // theta = 0 reproduces the reference-ramp cost
        let reference_controls = ControlGrid::new(
            dt,
            (0..n_t)
                .map(|j| crab.control_at(&[0.0, 0.0], j as f64 * dt))
                .collect(),
            BOUNDS,
            false,
        )
        .unwrap();
        let ref_cost = cost_and_gradient(&engine, &config, &reference_controls)
            .unwrap()
            .total_cost;
        let (cost0, _) =
            crab_gradient(&crab, &[0.0, 0.0], &engine, &config, n_t, dt, BOUNDS).unwrap();
        assert_relative_eq!(cost0, ref_cost, epsilon = 1e-14);
        // finite differences in theta
        let h = 1e-5;
        for i in 0..2 {
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[i] += h;
            tm[i] -= h;
            let (cp, _) = crab_gradient(&crab, &tp, &engine, &config, n_t, dt, BOUNDS).unwrap();
            let (cm, _) = crab_gradient(&crab, &tm, &engine, &config, n_t, dt, BOUNDS).unwrap();
            let fd = (cp - cm) / (2.0 * h);
            assert!(
                (grad[i] - fd).abs() / fd.abs().max(1e-8) < 1e-6,
                "theta_{i}: exact {} vs fd {fd}",
                grad[i]
            );
        }
        assert!(cost.is_finite());
    }
}
