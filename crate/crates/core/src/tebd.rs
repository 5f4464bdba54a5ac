//! Split-step time evolution for the Bose-Hubbard chain on an MPS: forward
//! sweep over odd bonds, backward sweep over even bonds, one-site interaction
//! gates grouped into the sweeps, plus the adjoint propagation and an
//! imaginary-time ground-state search over the same gate machinery.
//!
//! One full step realizes U_half(u_{n+1}) * E_even * E_odd * U_half(u_n),
//! where U_half(u) = exp(-i (u/2) sum_i n_i(n_i-1) dt / 2) and E_even/E_odd
//! are the products of bond hop gates exp(-i h_hop dt).

use nalgebra::DMatrix;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::mps::{Caps, Direction, Mps};
use crate::observables;
use crate::ops::{self, C64};

/// Precomputed gates for one time-step size. The hop gate is control
/// independent; the one-site interaction gates depend on u and are generated
/// per call (they are diagonal and cheap).
#[derive(Debug, Clone)]
pub struct GateSet {
    pub dt: f64,
    local_dim: usize,
    /// -i dt for real time, -tau for imaginary time.
    z: C64,
    pub hop_gate: DMatrix<C64>,
    hop_gate_adjoint: DMatrix<C64>,
}

impl GateSet {
    pub fn real_time(local_dim: usize, dt: f64) -> Self {
        Self::with_exponent(local_dim, dt, C64::new(0.0, -dt))
    }

    pub fn imaginary_time(local_dim: usize, tau: f64) -> Self {
        Self::with_exponent(local_dim, tau, C64::new(-tau, 0.0))
    }

    fn with_exponent(local_dim: usize, dt: f64, z: C64) -> Self {
        let h = ops::hop_hamiltonian(local_dim);
        let hop_gate = ops::symmetric_exponential(&h, z);
        let hop_gate_adjoint = hop_gate.adjoint();
        Self {
            dt,
            local_dim,
            z,
            hop_gate,
            hop_gate_adjoint,
        }
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    /// Per-occupation weights of the half control gate,
    /// exp(z u n(n-1) / 4) for n = 0..d-1.
    pub fn one_site_weights(&self, u: f64) -> Vec<C64> {
        ops::interaction_diagonal(self.local_dim)
            .iter()
            .map(|&nn| (self.z * (u * nn / 4.0)).exp())
            .collect()
    }

    fn one_site_weights_conj(&self, u: f64) -> Vec<C64> {
        self.one_site_weights(u).iter().map(|w| w.conj()).collect()
    }
}

/// Largest even 0-based bond (odd in 1-based labeling), if any.
fn last_forward_bond(n_sites: usize) -> usize {
    if (n_sites - 2) % 2 == 0 {
        n_sites - 2
    } else {
        n_sites - 3
    }
}

/// Largest odd 0-based bond (even in 1-based labeling), if any.
fn last_backward_bond(n_sites: usize) -> Option<usize> {
    let top = n_sites - 2;
    if top == 0 {
        return None;
    }
    Some(if top % 2 == 1 { top } else { top - 1 })
}

fn require_gauge_at_origin(mps: &Mps) -> Result<()> {
    if mps.gauge_position() != 0 {
        return Err(Error::GaugeMismatch {
            gauge: mps.gauge_position(),
            bond: 0,
        });
    }
    Ok(())
}

/// One full split step with controls (u_n, u_{n+1}). Requires the gauge on
/// site 0 and returns it there.
pub fn step(mps: &mut Mps, u_n: f64, u_np1: f64, gates: &GateSet) -> Result<()> {
    require_gauge_at_origin(mps)?;
    let n = mps.n_sites();
    let w_n = gates.one_site_weights(u_n);
    let w_np1 = gates.one_site_weights(u_np1);
    // forward sweep: one-site u_n pair, then the hop gate, per odd bond
    let mut b = 0;
    while b + 1 < n {
        mps.move_gauge_to(b);
        mps.apply_one_site_diagonal(b, &w_n)?;
        mps.apply_one_site_diagonal(b + 1, &w_n)?;
        mps.apply_two_site_gate(b, &gates.hop_gate, Direction::Right)?;
        b += 2;
    }
    // the last site is missed by the even bonds (even n) or by the odd bonds
    // (odd n); complete the matching half control gate
    let w_last = if n % 2 == 0 { &w_np1 } else { &w_n };
    mps.apply_one_site_diagonal(n - 1, w_last)?;
    // backward sweep: hop gate, then one-site u_{n+1} pair, per even bond
    if let Some(top) = last_backward_bond(n) {
        let mut b = top as isize;
        while b >= 1 {
            let bond = b as usize;
            mps.move_gauge_to(bond + 1);
            mps.apply_two_site_gate(bond, &gates.hop_gate, Direction::Left)?;
            mps.apply_one_site_diagonal(bond, &w_np1)?;
            mps.apply_one_site_diagonal(bond + 1, &w_np1)?;
            b -= 2;
        }
    }
    mps.move_gauge_to(0);
    mps.apply_one_site_diagonal(0, &w_np1)?;
    Ok(())
}

/// The conjugate transpose of `step` with the same controls: every gate
/// conjugated and the order of application fully reversed.
pub fn step_adjoint(mps: &mut Mps, u_n: f64, u_np1: f64, gates: &GateSet) -> Result<()> {
    require_gauge_at_origin(mps)?;
    let n = mps.n_sites();
    let w_n = gates.one_site_weights_conj(u_n);
    let w_np1 = gates.one_site_weights_conj(u_np1);
    mps.apply_one_site_diagonal(0, &w_np1)?;
    // reverse of the backward sweep: even bonds ascending
    let mut b = 1;
    while b + 1 < n {
        mps.move_gauge_to(b);
        mps.apply_one_site_diagonal(b + 1, &w_np1)?;
        mps.apply_one_site_diagonal(b, &w_np1)?;
        mps.apply_two_site_gate(b, &gates.hop_gate_adjoint, Direction::Right)?;
        b += 2;
    }
    let w_last = if n % 2 == 0 { &w_np1 } else { &w_n };
    mps.apply_one_site_diagonal(n - 1, w_last)?;
    // reverse of the forward sweep: odd bonds descending
    let mut b = last_forward_bond(n) as isize;
    while b >= 0 {
        let bond = b as usize;
        mps.move_gauge_to(bond + 1);
        mps.apply_two_site_gate(bond, &gates.hop_gate_adjoint, Direction::Left)?;
        mps.apply_one_site_diagonal(bond + 1, &w_n)?;
        mps.apply_one_site_diagonal(bond, &w_n)?;
        b -= 2;
    }
    mps.move_gauge_to(0);
    Ok(())
}

/// What to record along a trajectory.
#[derive(Debug, Clone, Default)]
pub struct RecordSpec {
    /// Record every k steps (0 disables recording entirely).
    pub every: usize,
    pub occupations: bool,
    /// Fidelity against this fixed target at recorded steps.
    pub target: Option<Mps>,
    /// Density of defects and rescaled variance (references captured from the
    /// initial state).
    pub merit: bool,
    /// Accumulated-truncation alarm threshold.
    pub alarm_threshold: f64,
}

impl RecordSpec {
    pub fn silent() -> Self {
        Self {
            every: 0,
            occupations: false,
            target: None,
            merit: false,
            alarm_threshold: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: usize,
    pub time: f64,
    pub u: f64,
    pub norm: f64,
    pub truncation: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub occupations: Option<Vec<f64>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fidelity: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub eta: Option<f64>,
}

#[derive(Debug, Clone, Default)]
pub struct Trajectory {
    pub records: Vec<StepRecord>,
    pub truncation_alarm: bool,
    pub final_truncation: f64,
}

impl Trajectory {
    pub fn to_jsonl(&self) -> Result<String> {
        let mut out = String::new();
        for r in &self.records {
            out.push_str(&serde_json::to_string(r)?);
            out.push('\n');
        }
        Ok(out)
    }
}

/// Evolve through the whole control grid (n_t - 1 steps), optionally
/// recording observables.
pub fn propagate(
    mps: &mut Mps,
    controls: &crate::grape::ControlGrid,
    gates: &GateSet,
    record: &RecordSpec,
) -> Result<Trajectory> {
    let u = controls.values();
    if u.len() < 2 {
        return Err(Error::InvalidArgument(
            "propagation needs at least two grid points".into(),
        ));
    }
    let mut trajectory = Trajectory::default();
    let reference_variances = if record.merit {
        Some(observables::site_variances(mps)?)
    } else {
        None
    };
    for n in 0..u.len() - 1 {
        step(mps, u[n], u[n + 1], gates)?;
        if record.every > 0 && (n + 1) % record.every == 0 {
            let occ = if record.occupations || record.merit {
                Some(observables::site_occupations(mps)?)
            } else {
                None
            };
            let fidelity = match &record.target {
                Some(t) => Some(observables::fidelity_mps(t, mps)?),
                None => None,
            };
            let (rho, eta) = if record.merit {
                let occ_ref = occ.as_ref().unwrap();
                let rho = occ_ref.iter().map(|o| (o - 1.0).abs()).sum::<f64>()
                    / occ_ref.len() as f64;
                let eta = observables::rescaled_variance_mps(
                    mps,
                    reference_variances.as_ref().unwrap(),
                )?;
                (Some(rho), Some(eta))
            } else {
                (None, None)
            };
            trajectory.records.push(StepRecord {
                step: n + 1,
                time: (n + 1) as f64 * gates.dt,
                u: u[n + 1],
                norm: mps.norm(),
                truncation: mps.log_truncation,
                occupations: if record.occupations { occ } else { None },
                fidelity,
                rho,
                eta,
            });
        }
    }
    trajectory.final_truncation = mps.log_truncation;
    trajectory.truncation_alarm = mps.log_truncation > record.alarm_threshold;
    Ok(trajectory)
}

/// <psi|H(u)|psi> for the open Bose-Hubbard chain.
pub fn bose_hubbard_energy(mps: &mut Mps, u: f64) -> Result<f64> {
    let d = mps.local_dim();
    let hop = ops::hop_hamiltonian(d);
    let mut energy = 0.0;
    for bond in 0..mps.n_sites() - 1 {
        energy += mps.two_site_expectation(bond, &hop)?.re;
    }
    let inter = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(ops::interaction_diagonal(
        d,
    )));
    let vals = Mps::cross_elements_all_sites(mps, mps, &inter)?;
    energy += 0.5 * u * vals.iter().map(|v| v.re).sum::<f64>();
    Ok(energy)
}

/// Imaginary-time ground-state search seeded from a Fock product state,
/// sweeping the same split step with a shrinking step size.
pub fn ground_state_imaginary(
    seed_occupations: &[u8],
    local_dim: usize,
    u: f64,
    tau_schedule: &[f64],
    caps: Caps,
    max_sweeps_per_stage: usize,
) -> Result<Mps> {
    if tau_schedule.is_empty() {
        return Err(Error::InvalidArgument("empty tau schedule".into()));
    }
    let mut mps = Mps::product_state(seed_occupations, local_dim, caps)?;
    let mut trace = Vec::new();
    let mut energy = bose_hubbard_energy(&mut mps, u)?;
    trace.push(energy);
    for (stage, &tau) in tau_schedule.iter().enumerate() {
        let gates = GateSet::imaginary_time(local_dim, tau);
        let tol = if stage + 1 == tau_schedule.len() {
            1e-9
        } else {
            1e-8
        };
        let mut converged = false;
        for _ in 0..max_sweeps_per_stage {
            mps.move_gauge_to(0);
            step(&mut mps, u, u, &gates)?;
            mps.recanonicalize();
            mps.normalize();
            let next = bose_hubbard_energy(&mut mps, u)?;
            trace.push(next);
            let change = (next - energy).abs() / (energy.abs() + 1.0);
            energy = next;
            if change < tol {
                converged = true;
                break;
            }
        }
        if !converged {
            return Err(Error::ImaginaryTimeNotConverged {
                sweeps: max_sweeps_per_stage,
                trace,
            });
        }
    }
    mps.move_gauge_to(0);
    mps.log_truncation = 0.0;
    Ok(mps)
}

/// Default shrinking step-size schedule for the ground-state search.
pub fn default_tau_schedule() -> Vec<f64> {
    vec![0.1, 0.05, 0.02, 0.01, 0.005]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fock::{self, DenseState, DriftMode, FockBasis};
    use approx::assert_relative_eq;
    use nalgebra::DVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::sync::Arc;

    fn random_mps(basis: &Arc<FockBasis>, seed: u64) -> (DenseState, Mps) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut amplitudes = DVector::<C64>::from_fn(basis.len(), |_, _| {
            C64::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5)
        });
        amplitudes /= C64::new(amplitudes.norm(), 0.0);
        let s = DenseState {
            basis: basis.clone(),
            amplitudes,
        };
        let mut m = Mps::from_dense(&s, Caps::unlimited()).unwrap();
        m.move_gauge_to(0);
        (s, m)
    }

    #[test]
    fn hop_gate_is_unitary_and_zero_step_is_identity() {
        let gates = GateSet::real_time(5, 0.07);
        let id = gates.hop_gate.adjoint() * &gates.hop_gate;
        assert!(ops::max_abs(&(id - DMatrix::<C64>::identity(25, 25))) < 1e-12);
        assert!(gates
            .one_site_weights(0.0)
            .iter()
            .all(|w| (w - C64::new(1.0, 0.0)).norm() < 1e-15));
        let zero = GateSet::real_time(5, 0.0);
        let basis = Arc::new(FockBasis::new(4, 4).unwrap());
        let (s, mut m) = random_mps(&basis, 1);
        step(&mut m, 5.0, 9.0, &zero).unwrap();
        let back = m.to_dense(&basis).unwrap();
        assert!(ops::max_abs(&(back.amplitudes - &s.amplitudes)) < 1e-13);
    }

    #[test]
    fn step_matches_dense_even_odd_oracle() {
        for n in [4usize, 5] {
            let basis = Arc::new(FockBasis::new(n, n).unwrap());
            let (s, mut m) = random_mps(&basis, 17 + n as u64);
            let dt = 0.05;
            let gates = GateSet::real_time(basis.local_dim(), dt);
            step(&mut m, 3.0, 8.0, &gates).unwrap();
            let prop =
                fock::DenseStPropagator::new(basis.clone(), dt, DriftMode::EvenOdd).unwrap();
            let expect = prop.step(&s, 3.0, 8.0);
            let got = m.to_dense(&basis).unwrap();
            assert!(
                ops::max_abs(&(got.amplitudes - expect.amplitudes)) < 1e-10,
                "n = {n}"
            );
        }
    }

    #[test]
    fn adjoint_matches_dense_and_inverts_step() {
        for n in [4usize, 5] {
            let basis = Arc::new(FockBasis::new(n, n).unwrap());
            let (s, mut m) = random_mps(&basis, 29 + n as u64);
            let dt = 0.05;
            let gates = GateSet::real_time(basis.local_dim(), dt);
            step_adjoint(&mut m, 3.0, 8.0, &gates).unwrap();
            let prop =
                fock::DenseStPropagator::new(basis.clone(), dt, DriftMode::EvenOdd).unwrap();
            let expect = prop.step_adjoint(&s, 3.0, 8.0);
            let got = m.to_dense(&basis).unwrap();
            assert!(
                ops::max_abs(&(got.amplitudes - expect.amplitudes)) < 1e-10,
                "n = {n}"
            );
            // round trip
            step(&mut m, 3.0, 8.0, &gates).unwrap();
            let back = m.to_dense(&basis).unwrap();
            assert!(ops::max_abs(&(back.amplitudes - s.amplitudes)) < 1e-9);
        }
    }

    #[test]
    fn norm_is_preserved_per_step() {
        let basis = Arc::new(FockBasis::new(5, 5).unwrap());
        let (_, mut m) = random_mps(&basis, 43);
        let gates = GateSet::real_time(basis.local_dim(), 0.1);
        for k in 0..20 {
            step(&mut m, 2.0 + k as f64, 2.5 + k as f64, &gates).unwrap();
            assert!((m.norm() - 1.0).abs() < 1e-11);
        }
    }

    #[test]
    fn deep_lattice_step_is_a_pure_phase_imprint() {
        let d = 5;
        let u = 40.0;
        let dt = 0.01;
        let mut m = Mps::product_state(&[1, 1, 1, 1], d, Caps::default()).unwrap();
        let gates = GateSet::real_time(d, dt);
        step(&mut m, u, u, &gates).unwrap();
        // unit filling: n(n-1) = 0 everywhere, so the predicted phase is 1
        let reference = Mps::product_state(&[1, 1, 1, 1], d, Caps::default()).unwrap();
        let ov = Mps::overlap(&reference, &m).unwrap();
        assert!((ov - C64::new(1.0, 0.0)).norm() < (4.0 * dt * dt) * 10.0);
        // occupation 2 per site picks up exp(-i u dt) per site per step
        let mut m2 = Mps::product_state(&[2, 2, 0, 0], d, Caps::default()).unwrap();
        step(&mut m2, u, u, &gates).unwrap();
        let r2 = Mps::product_state(&[2, 2, 0, 0], d, Caps::default()).unwrap();
        let ov2 = Mps::overlap(&r2, &m2).unwrap();
        let predicted = C64::new(0.0, -u * dt * 2.0).exp();
        assert!((ov2 - predicted).norm() < 0.05);
    }

    #[test]
    fn propagate_runs_and_records() {
        let basis = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, mut m) = random_mps(&basis, 57);
        let controls = crate::grape::ControlGrid::new(
            0.05,
            vec![2.0, 5.0, 10.0, 20.0, 30.0],
            (1.32, 40.18),
            false,
        )
        .unwrap();
        let gates = GateSet::real_time(basis.local_dim(), 0.05);
        let spec = RecordSpec {
            every: 1,
            occupations: true,
            target: Some(Mps::product_state(&[1, 1, 1, 1], basis.local_dim(), Caps::default()).unwrap()),
            merit: true,
            alarm_threshold: 1e-6,
        };
        let t = propagate(&mut m, &controls, &gates, &spec).unwrap();
        assert_eq!(t.records.len(), 4);
        assert!(!t.truncation_alarm);
        for r in &t.records {
            assert!((r.norm - 1.0).abs() < 1e-10);
            let occ: f64 = r.occupations.as_ref().unwrap().iter().sum();
            assert_relative_eq!(occ, 4.0, epsilon = 1e-8);
            assert!(r.fidelity.unwrap() >= 0.0 && r.fidelity.unwrap() <= 1.0);
        }
        let jsonl = t.to_jsonl().unwrap();
        assert_eq!(jsonl.lines().count(), 4);
    }

    #[test]
    fn energy_matches_dense_oracle() {
        let basis = Arc::new(FockBasis::new(4, 4).unwrap());
        let (s, mut m) = random_mps(&basis, 63);
        let u = 6.5;
        let h = fock::build_hamiltonian(&basis, u).unwrap();
        let expect = s.amplitudes.dotc(&h.matvec(&s.amplitudes)).re;
        let got = bose_hubbard_energy(&mut m, u).unwrap();
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn imaginary_time_reaches_the_dense_ground_state() {
        let basis = Arc::new(FockBasis::new(4, 4).unwrap());
        for u in [3.0, 35.0] {
            let m = ground_state_imaginary(
                &[1, 1, 1, 1],
                basis.local_dim(),
                u,
                &default_tau_schedule(),
                Caps::default(),
                500,
            )
            .unwrap();
            let (e_exact, gs) = fock::ground_state(&basis, u).unwrap();
            let dense = m.to_dense(&basis).unwrap();
            let f = dense.fidelity(&gs);
            assert!(f > 0.9999, "u = {u}: overlap {f}");
            let mut m = m;
            let e = bose_hubbard_energy(&mut m, u).unwrap();
            assert_relative_eq!(e, e_exact, max_relative = 1e-4);
        }
    }

    #[test]
    fn imaginary_time_fixed_point_converges_immediately() {
        // at enormous u the Mott product state is the ground state to
        // negligible error; the search should terminate in a couple of sweeps
        let m = ground_state_imaginary(&[1, 1, 1, 1], 5, 1e6, &[0.05], Caps::default(), 5)
            .unwrap();
        let reference = Mps::product_state(&[1, 1, 1, 1], 5, Caps::default()).unwrap();
        assert!(Mps::overlap(&reference, &m).unwrap().norm() > 0.999_999);
    }
}
