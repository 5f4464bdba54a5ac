//! Exact-diagonalization oracle over the occupation-number basis: Hamiltonian
//! construction, ground states, exact and Trotterized dense propagation, and
//! brute-force finite-difference gradients.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::grape::ControlGrid;
use crate::ops::{self, C64};

/// Number of admissible occupation vectors: `n_particles` bosons on
/// `n_sites` sites with at most `max_occupation` per site.
pub fn basis_dimension(n_sites: usize, n_particles: usize, max_occupation: usize) -> Result<u64> {
    if n_sites < 1 || n_particles < 1 || max_occupation < 1 {
        return Err(Error::InvalidArgument(
            "basis_dimension needs all counts >= 1".into(),
        ));
    }
    // table[p] = number of ways to place p particles on the sites seen so far
    let overflow = || Error::CountOverflow {
        context: format!("basis_dimension({n_sites}, {n_particles}, {max_occupation})"),
    };
    let mut table = vec![0u64; n_particles + 1];
    table[0] = 1;
    for _ in 0..n_sites {
        let mut next = vec![0u64; n_particles + 1];
        for p in 0..=n_particles {
            for occ in 0..=max_occupation.min(p) {
                next[p] = next[p].checked_add(table[p - occ]).ok_or_else(overflow)?;
            }
        }
        table = next;
    }
    Ok(table[n_particles])
}

#[derive(Debug, Clone)]
pub struct FockBasis {
    pub n_sites: usize,
    pub n_particles: usize,
    /// Largest occupation allowed per site, n_max = d - 1.
    pub max_occupation: usize,
    /// Occupation vectors in descending lexicographic order.
    pub states: Vec<Vec<u8>>,
    index: HashMap<Vec<u8>, usize>,
}

impl FockBasis {
    /// Default local truncation d = 5, i.e. n_max = min(N_p, 4).
    pub fn new(n_sites: usize, n_particles: usize) -> Result<Self> {
        Self::with_max_occupation(n_sites, n_particles, n_particles.min(4))
    }

    pub fn with_max_occupation(
        n_sites: usize,
        n_particles: usize,
        max_occupation: usize,
    ) -> Result<Self> {
        let dim = basis_dimension(n_sites, n_particles, max_occupation)?;
        if dim == 0 {
            return Err(Error::InvalidArgument(format!(
                "no states: {n_particles} particles on {n_sites} sites with n_max = {max_occupation}"
            )));
        }
        if dim > 5_000_000 {
            return Err(Error::DenseTooLarge {
                dim: dim as u128,
                guard: 5_000_000,
            });
        }
        let mut states = Vec::with_capacity(dim as usize);
        let mut current = vec![0u8; n_sites];
        enumerate(&mut states, &mut current, 0, n_particles, max_occupation);
        let index = states
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Ok(Self {
            n_sites,
            n_particles,
            max_occupation,
            states,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.states.len()
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn local_dim(&self) -> usize {
        self.max_occupation + 1
    }

    pub fn position(&self, occupations: &[u8]) -> Option<usize> {
        self.index.get(occupations).copied()
    }

    /// Ordinal of the unit-filling state |1,1,...,1>, when admissible.
    pub fn unit_filling_index(&self) -> Option<usize> {
        self.position(&vec![1u8; self.n_sites])
    }
}

fn enumerate(
    states: &mut Vec<Vec<u8>>,
    current: &mut Vec<u8>,
    site: usize,
    remaining: usize,
    n_max: usize,
) {
    if site == current.len() {
        if remaining == 0 {
            states.push(current.clone());
        }
        return;
    }
    // descending first occupation gives descending lexicographic order overall
    for occ in (0..=n_max.min(remaining)).rev() {
        current[site] = occ as u8;
        enumerate(states, current, site + 1, remaining - occ, n_max);
    }
    current[site] = 0;
}

/// Sparse number-conserving Hamiltonian: real symmetric, split into the
/// interaction diagonal (scaled by u/2 on use) and drift hop entries.
#[derive(Debug, Clone)]
pub struct Hamiltonian {
    pub dim: usize,
    /// sum_i n_i (n_i - 1) per basis state; control part is (u/2) times this.
    pub interaction: Vec<f64>,
    /// Strictly-lower-triangle hop entries (row, col, value); the matrix also
    /// has the mirrored (col, row, value).
    pub hops: Vec<(usize, usize, f64)>,
}

/// Full open-chain Bose-Hubbard Hamiltonian at dimensionless control u.
pub fn build_hamiltonian(basis: &FockBasis, u: f64) -> Result<ScaledHamiltonian> {
    if !u.is_finite() {
        return Err(Error::InvalidArgument(format!("control u = {u} not finite")));
    }
    Ok(ScaledHamiltonian {
        inner: hop_terms(basis, None),
        u,
    })
}

/// Hop and interaction terms; `bond` restricts the drift to a single bond
/// (i, i+1), 0-based, used by the dense even/odd Trotter oracle.
fn hop_terms(basis: &FockBasis, bond: Option<usize>) -> Hamiltonian {
    let dim = basis.len();
    let mut interaction = vec![0.0; dim];
    let mut hops = Vec::new();
    for (row, state) in basis.states.iter().enumerate() {
        interaction[row] = state
            .iter()
            .map(|&n| (n as f64) * (n as f64 - 1.0))
            .sum::<f64>();
        let bonds: Vec<usize> = match bond {
            Some(b) => vec![b],
            None => (0..basis.n_sites - 1).collect(),
        };
        for i in bonds {
            // a_dag_{i+1} a_i |state>
            let (ni, nj) = (state[i] as usize, state[i + 1] as usize);
            if ni >= 1 && nj < basis.max_occupation {
                let mut hopped = state.clone();
                hopped[i] -= 1;
                hopped[i + 1] += 1;
                let col = basis.position(&hopped).expect("hop stays in basis");
                let amp = -((ni * (nj + 1)) as f64).sqrt();
                // store one triangle; symmetry restores the conjugate term
                let (r, c) = if row > col { (row, col) } else { (col, row) };
                hops.push((r, c, amp));
            }
        }
    }
    Hamiltonian {
        dim,
        interaction,
        hops,
    }
}

/// A Hamiltonian together with the control value scaling its diagonal.
#[derive(Debug, Clone)]
pub struct ScaledHamiltonian {
    inner: Hamiltonian,
    pub u: f64,
}

impl ScaledHamiltonian {
    pub fn dim(&self) -> usize {
        self.inner.dim
    }

    pub fn matvec(&self, x: &DVector<C64>) -> DVector<C64> {
        let mut y = DVector::<C64>::zeros(self.dim());
        for i in 0..self.dim() {
            y[i] = x[i] * (0.5 * self.u * self.inner.interaction[i]);
        }
        for &(r, c, v) in &self.inner.hops {
            y[r] += x[c] * v;
            y[c] += x[r] * v;
        }
        y
    }

    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut h = DMatrix::<f64>::zeros(self.dim(), self.dim());
        for i in 0..self.dim() {
            h[(i, i)] = 0.5 * self.u * self.inner.interaction[i];
        }
        for &(r, c, v) in &self.inner.hops {
            h[(r, c)] += v;
            h[(c, r)] += v;
        }
        h
    }

    /// Gershgorin bound on the spectral radius.
    fn norm_bound(&self) -> f64 {
        let mut radius = vec![0.0f64; self.dim()];
        for &(r, c, v) in &self.inner.hops {
            radius[r] += v.abs();
            radius[c] += v.abs();
        }
        (0..self.dim())
            .map(|i| (0.5 * self.u * self.inner.interaction[i]).abs() + radius[i])
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone)]
pub struct DenseState {
    pub basis: Arc<FockBasis>,
    pub amplitudes: DVector<C64>,
}

impl DenseState {
    pub fn from_occupations(basis: Arc<FockBasis>, occupations: &[u8]) -> Result<Self> {
        let idx = basis.position(occupations).ok_or_else(|| {
            Error::InvalidArgument(format!("occupations {occupations:?} not in basis"))
        })?;
        let mut amplitudes = DVector::<C64>::zeros(basis.len());
        amplitudes[idx] = C64::new(1.0, 0.0);
        Ok(Self { basis, amplitudes })
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    pub fn inner(&self, other: &Self) -> C64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    pub fn fidelity(&self, other: &Self) -> f64 {
        self.inner(other).norm_sqr()
    }

    /// <n_i> site occupation expectations.
    pub fn occupations(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.n_sites];
        for (k, state) in self.basis.states.iter().enumerate() {
            let w = self.amplitudes[k].norm_sqr();
            for (i, &n) in state.iter().enumerate() {
                out[i] += w * n as f64;
            }
        }
        out
    }

    /// <n_i^2> site expectations.
    pub fn occupation_squares(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.basis.n_sites];
        for (k, state) in self.basis.states.iter().enumerate() {
            let w = self.amplitudes[k].norm_sqr();
            for (i, &n) in state.iter().enumerate() {
                out[i] += w * (n as f64) * (n as f64);
            }
        }
        out
    }

    /// Plain-text export: index, occupation vector, real, imaginary.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# index occupations re im\n");
        for (k, state) in self.basis.states.iter().enumerate() {
            let occ: Vec<String> = state.iter().map(|n| n.to_string()).collect();
            let a = self.amplitudes[k];
            let _ = writeln!(out, "{k} {} {:.15e} {:.15e}", occ.join(","), a.re, a.im);
        }
        out
    }
}

const DENSE_EIG_LIMIT: usize = 4000;

/// Lowest eigenpair at control u; global phase fixed so the largest-magnitude
/// amplitude is real positive.
pub fn ground_state(basis: &Arc<FockBasis>, u: f64) -> Result<(f64, DenseState)> {
    let h = build_hamiltonian(basis, u)?;
    let (energy, mut vector) = if h.dim() <= DENSE_EIG_LIMIT {
        let eig = ops::symmetric_eigen(&h.to_dense());
        let k = (0..h.dim())
            .min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
            .unwrap();
        let v = eig.eigenvectors.column(k).map(|x| C64::new(x, 0.0));
        (eig.eigenvalues[k], v)
    } else {
        lanczos_ground_state(&h)?
    };
    let k_max = (0..vector.len())
        .max_by(|&a, &b| vector[a].norm_sqr().total_cmp(&vector[b].norm_sqr()))
        .unwrap();
    let phase = vector[k_max].conj() / vector[k_max].norm();
    vector *= phase;
    vector /= C64::new(vector.norm(), 0.0);
    Ok((
        energy,
        DenseState {
            basis: basis.clone(),
            amplitudes: vector,
        },
    ))
}

fn lanczos_ground_state(h: &ScaledHamiltonian) -> Result<(f64, DVector<C64>)> {
    let dim = h.dim();
    let m = 200.min(dim);
    let mut basis_vecs: Vec<DVector<C64>> = Vec::with_capacity(m);
    let mut alphas = Vec::new();
    let mut betas = Vec::new();
    // deterministic pseudo-random start avoids symmetry-orthogonal seeds
    let mut v0 = DVector::<C64>::from_fn(dim, |i, _| {
        C64::new(((i as f64 + 1.0) * 0.7391).sin(), ((i as f64 + 1.0) * 1.133).cos())
    });
    v0 /= C64::new(v0.norm(), 0.0);
    basis_vecs.push(v0);
    for j in 0..m {
        let mut w = h.matvec(&basis_vecs[j]);
        let alpha = basis_vecs[j].dotc(&w).re;
        alphas.push(alpha);
        w -= &basis_vecs[j] * C64::new(alpha, 0.0);
        if j > 0 {
            w -= &basis_vecs[j - 1] * C64::new(betas[j - 1], 0.0);
        }
        // full reorthogonalization for numerical stability
        for q in &basis_vecs {
            let c = q.dotc(&w);
            w -= q * c;
        }
        let beta = w.norm();
        if beta < 1e-12 || j == m - 1 {
            break;
        }
        betas.push(beta);
        basis_vecs.push(w / C64::new(beta, 0.0));
    }
    let k = basis_vecs.len();
    let mut t = DMatrix::<f64>::zeros(k, k);
    for j in 0..k {
        t[(j, j)] = alphas[j];
        if j + 1 < k {
            t[(j, j + 1)] = betas[j];
            t[(j + 1, j)] = betas[j];
        }
    }
    let eig = ops::symmetric_eigen(&t);
    let lowest = (0..k)
        .min_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]))
        .unwrap();
    let mut v = DVector::<C64>::zeros(dim);
    for j in 0..k {
        v += &basis_vecs[j] * C64::new(eig.eigenvectors[(j, lowest)], 0.0);
    }
    Ok((eig.eigenvalues[lowest], v))
}

/// exp(-i H(u) t) |state>, exact at constant u.
pub fn evolve_exact(state: &DenseState, u: f64, duration: f64) -> Result<DenseState> {
    if duration < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "duration {duration} must be nonnegative"
        )));
    }
    if duration == 0.0 {
        return Ok(state.clone());
    }
    let h = build_hamiltonian(&state.basis, u)?;
    let amplitudes = if h.dim() <= DENSE_EIG_LIMIT {
        let eig = ops::symmetric_eigen(&h.to_dense());
        let vecs = eig.eigenvectors.map(|x| C64::new(x, 0.0));
        let mut coeffs = vecs.adjoint() * &state.amplitudes;
        for k in 0..coeffs.len() {
            coeffs[k] *= C64::new(0.0, -eig.eigenvalues[k] * duration).exp();
        }
        vecs * coeffs
    } else {
        krylov_evolve(&h, &state.amplitudes, duration)
    };
    Ok(DenseState {
        basis: state.basis.clone(),
        amplitudes,
    })
}

/// Krylov-subspace exp(-i H t) v with norm-based substepping.
fn krylov_evolve(h: &ScaledHamiltonian, v: &DVector<C64>, duration: f64) -> DVector<C64> {
    let n_sub = (duration * h.norm_bound() / 5.0).ceil().max(1.0) as usize;
    let dt = duration / n_sub as f64;
    let m = 30.min(h.dim());
    let mut x = v.clone();
    for _ in 0..n_sub {
        let x_norm = x.norm();
        let mut q: Vec<DVector<C64>> = vec![&x / C64::new(x_norm, 0.0)];
        let mut alphas = Vec::new();
        let mut betas = Vec::new();
        for j in 0..m {
            let mut w = h.matvec(&q[j]);
            let alpha = q[j].dotc(&w).re;
            alphas.push(alpha);
            for b in &q {
                let c = b.dotc(&w);
                w -= b * c;
            }
            let beta = w.norm();
            if beta < 1e-13 || j == m - 1 {
                break;
            }
            betas.push(beta);
            q.push(w / C64::new(beta, 0.0));
        }
        let k = q.len();
        let mut t = DMatrix::<f64>::zeros(k, k);
        for j in 0..k {
            t[(j, j)] = alphas[j];
            if j + 1 < k {
                t[(j, j + 1)] = betas[j];
                t[(j + 1, j)] = betas[j];
            }
        }
        let expt = ops::symmetric_exponential(&t, C64::new(0.0, -dt));
        let mut next = DVector::<C64>::zeros(h.dim());
        for j in 0..k {
            next += &q[j] * (expt[(j, 0)] * x_norm);
        }
        x = next;
    }
    x
}

/// How the drift factor of the split step is exponentiated.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftMode {
    /// exp(-i H_drift dt) exactly; isolates the control-drift splitting error.
    Exact,
    /// E_even * E_odd bond-gate product, matching the MPS sweep bit-for-bit.
    EvenOdd,
}

/// Dense realization of the split propagator
/// U_half(u_next) * U_drift * U_half(u), reusable across steps at fixed dt.
pub struct DenseStPropagator {
    basis: Arc<FockBasis>,
    pub dt: f64,
    pub mode: DriftMode,
    /// Complex dense drift unitary (Exact) or E_even * E_odd (EvenOdd).
    drift_unitary: DMatrix<C64>,
    /// Diagonal interaction weights sum_i n_i(n_i - 1) per basis state.
    interaction: Vec<f64>,
}

impl DenseStPropagator {
    pub fn new(basis: Arc<FockBasis>, dt: f64, mode: DriftMode) -> Result<Self> {
        let drift = build_hamiltonian(&basis, 0.0)?;
        let interaction = drift.inner.interaction.clone();
        let drift_unitary = match mode {
            DriftMode::Exact => complex_unitary(&drift.to_dense(), dt)?,
            DriftMode::EvenOdd => {
                let dim = basis.len();
                let mut even = DMatrix::<C64>::identity(dim, dim);
                let mut odd = DMatrix::<C64>::identity(dim, dim);
                for bond in 0..basis.n_sites - 1 {
                    let hb = ScaledHamiltonian {
                        inner: hop_terms(&basis, Some(bond)),
                        u: 0.0,
                    };
                    let ub = complex_unitary(&hb.to_dense(), dt)?;
                    // bond index is 0-based here; "odd bonds" in 1-based
                    // labeling are the even 0-based ones
                    if bond % 2 == 0 {
                        odd = ub * odd;
                    } else {
                        even = ub * even;
                    }
                }
                even * odd
            }
        };
        Ok(Self {
            basis,
            dt,
            mode,
            drift_unitary,
            interaction,
        })
    }

    fn apply_half_control(&self, x: &mut DVector<C64>, u: f64, conjugate: bool) {
        let sign = if conjugate { 1.0 } else { -1.0 };
        for k in 0..x.len() {
            x[k] *= C64::new(0.0, sign * u * self.interaction[k] * self.dt / 4.0).exp();
        }
    }

    /// One split step with controls (u_n, u_{n+1}).
    pub fn step(&self, state: &DenseState, u_n: f64, u_np1: f64) -> DenseState {
        let mut x = state.amplitudes.clone();
        self.apply_half_control(&mut x, u_n, false);
        x = &self.drift_unitary * x;
        self.apply_half_control(&mut x, u_np1, false);
        DenseState {
            basis: state.basis.clone(),
            amplitudes: x,
        }
    }

    /// Adjoint step: the conjugate transpose of `step` with the same controls.
    pub fn step_adjoint(&self, state: &DenseState, u_n: f64, u_np1: f64) -> DenseState {
        let mut x = state.amplitudes.clone();
        self.apply_half_control(&mut x, u_np1, true);
        x = self.drift_unitary.adjoint() * x;
        self.apply_half_control(&mut x, u_n, true);
        DenseState {
            basis: state.basis.clone(),
            amplitudes: x,
        }
    }

    /// Full trajectory over a control grid: n_t - 1 steps.
    pub fn propagate(&self, state: &DenseState, controls: &ControlGrid) -> DenseState {
        let u = controls.values();
        let mut s = state.clone();
        for n in 0..u.len() - 1 {
            s = self.step(&s, u[n], u[n + 1]);
        }
        s
    }

    pub fn basis(&self) -> &Arc<FockBasis> {
        &self.basis
    }
}

fn complex_unitary(h: &DMatrix<f64>, dt: f64) -> Result<DMatrix<C64>> {
    Ok(ops::symmetric_exponential(h, C64::new(0.0, -dt)))
}

/// Central finite differences of a scalar cost over every control element.
pub fn finite_difference_gradient<F>(
    cost: F,
    controls: &ControlGrid,
    step: f64,
) -> Result<Vec<f64>>
where
    F: Fn(&ControlGrid) -> Result<f64>,
{
    if !(1e-7..=1e-3).contains(&step) {
        return Err(Error::InvalidArgument(format!(
            "finite-difference step {step} outside [1e-7, 1e-3]"
        )));
    }
    let mut grad = Vec::with_capacity(controls.len());
    for n in 0..controls.len() {
        let mut plus = controls.clone();
        let mut minus = controls.clone();
        plus.nudge_unchecked(n, step);
        minus.nudge_unchecked(n, -step);
        let jp = cost(&plus)?;
        let jm = cost(&minus)?;
        if !jp.is_finite() || !jm.is_finite() {
            return Err(Error::NonFiniteCost { index: Some(n) });
        }
        grad.push((jp - jm) / (2.0 * step));
    }
    Ok(grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn dimension_matches_small_enumerations() {
        assert_eq!(basis_dimension(2, 2, 2).unwrap(), 3);
        assert_eq!(basis_dimension(3, 3, 2).unwrap(), 7);
        // unconstrained case reduces to C(N_s + N_p - 1, N_p)
        assert_eq!(basis_dimension(4, 4, 4).unwrap(), 35);
    }

    #[test]
    fn dimension_matches_production_scale_binomial() {
        assert_eq!(basis_dimension(20, 20, 20).unwrap(), 68_923_264_410);
    }

    #[test]
    fn dimension_overflow_is_reported() {
        assert!(matches!(
            basis_dimension(500, 500, 500),
            Err(Error::CountOverflow { .. })
        ));
    }

    #[test]
    fn basis_is_descending_lexicographic_and_consistent() {
        let b = FockBasis::with_max_occupation(3, 3, 2).unwrap();
        assert_eq!(b.len(), 7);
        assert_eq!(b.states[0], vec![2, 1, 0]);
        assert!(b.states.windows(2).all(|w| w[0] > w[1]));
        for (i, s) in b.states.iter().enumerate() {
            assert_eq!(b.position(s), Some(i));
            assert_eq!(s.iter().map(|&n| n as usize).sum::<usize>(), 3);
            assert!(s.iter().all(|&n| n <= 2));
        }
    }

    #[test]
    fn two_site_hamiltonian_matches_hand_algebra() {
        // order (2,0), (1,1), (0,2): [[u, -sqrt2, 0], [-sqrt2, 0, -sqrt2], [0, -sqrt2, u]]
        let b = Arc::new(FockBasis::with_max_occupation(2, 2, 2).unwrap());
        let u = 1.7;
        let h = build_hamiltonian(&b, u).unwrap().to_dense();
        let r2 = (2.0f64).sqrt();
        let expect =
            DMatrix::from_row_slice(3, 3, &[u, -r2, 0.0, -r2, 0.0, -r2, 0.0, -r2, u]);
        assert!((h - expect).amax() < 1e-14);
    }

    #[test]
    fn hamiltonian_is_hermitian_and_hopping_only_at_zero_u() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let h = build_hamiltonian(&b, 0.0).unwrap().to_dense();
        assert!((h.clone() - h.transpose()).amax() == 0.0);
        for i in 0..h.nrows() {
            assert_eq!(h[(i, i)], 0.0);
        }
    }

    #[test]
    fn matvec_agrees_with_dense() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let h = build_hamiltonian(&b, 3.3).unwrap();
        let x = DVector::<C64>::from_fn(b.len(), |i, _| {
            C64::new((i as f64).sin(), (i as f64 * 0.3).cos())
        });
        let dense = h.to_dense().map(|v| C64::new(v, 0.0)) * &x;
        assert!((h.matvec(&x) - dense).norm() < 1e-12);
    }

    #[test]
    fn two_particle_ground_state_is_analytic() {
        let b = Arc::new(FockBasis::with_max_occupation(2, 2, 2).unwrap());
        let (e, gs) = ground_state(&b, 0.0).unwrap();
        assert_relative_eq!(e, -2.0, epsilon = 1e-12);
        let expect = [0.5, 1.0 / (2.0f64).sqrt(), 0.5];
        for (a, &x) in gs.amplitudes.iter().zip(&expect) {
            assert!((a - C64::new(x, 0.0)).norm() < 1e-10);
        }
    }

    #[test]
    fn deep_lattice_ground_state_is_mott_like() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, gs) = ground_state(&b, 40.0).unwrap();
        let mott = DenseState::from_occupations(b.clone(), &[1, 1, 1, 1]).unwrap();
        assert!(gs.fidelity(&mott) > 0.99);
    }

    #[test]
    fn ground_energy_is_nondecreasing_in_u() {
        let b = Arc::new(FockBasis::new(3, 3).unwrap());
        let mut prev = f64::NEG_INFINITY;
        for u in [0.0, 5.0, 10.0, 20.0, 40.0] {
            let (e, _) = ground_state(&b, u).unwrap();
            assert!(e >= prev);
            prev = e;
        }
    }

    #[test]
    fn lanczos_matches_dense_ground_state() {
        let b = Arc::new(FockBasis::new(5, 5).unwrap());
        let h = build_hamiltonian(&b, 3.0).unwrap();
        let (e_dense, _) = ground_state(&b, 3.0).unwrap();
        let (e_lanczos, v) = lanczos_ground_state(&h).unwrap();
        assert_relative_eq!(e_dense, e_lanczos, epsilon = 1e-9);
        assert_relative_eq!(v.norm(), 1.0, epsilon = 1e-9);
    }

    #[test]
    fn exact_evolution_preserves_norm_and_composes() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, gs) = ground_state(&b, 2.0).unwrap();
        let zero = evolve_exact(&gs, 7.0, 0.0).unwrap();
        assert!((zero.amplitudes.clone() - &gs.amplitudes).norm() < 1e-15);
        let whole = evolve_exact(&gs, 7.0, 1.0).unwrap();
        let halves =
            evolve_exact(&evolve_exact(&gs, 7.0, 0.5).unwrap(), 7.0, 0.5).unwrap();
        assert!((whole.amplitudes.clone() - &halves.amplitudes).norm() < 1e-10);
        assert_relative_eq!(whole.norm(), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn krylov_matches_eigendecomposition() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, gs) = ground_state(&b, 1.0).unwrap();
        let h = build_hamiltonian(&b, 6.0).unwrap();
        let kr = krylov_evolve(&h, &gs.amplitudes, 2.0);
        let exact = evolve_exact(&gs, 6.0, 2.0).unwrap();
        assert!((kr - exact.amplitudes).norm() < 1e-8);
    }

    #[test]
    fn split_step_converges_to_exact_at_small_dt() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, start) = ground_state(&b, 2.0).unwrap();
        let u = 9.0;
        let duration = 1.0;
        let exact = evolve_exact(&start, u, duration).unwrap();
        let mut errors = Vec::new();
        for &dt in &[0.1, 0.05, 0.025] {
            let prop = DenseStPropagator::new(b.clone(), dt, DriftMode::Exact).unwrap();
            let steps = (duration / dt).round() as usize;
            let mut s = start.clone();
            for _ in 0..steps {
                s = prop.step(&s, u, u);
            }
            assert_relative_eq!(s.norm(), 1.0, epsilon = 1e-12);
            errors.push((1.0 - s.fidelity(&exact)).max(1e-300));
        }
        // halving dt should cut the infidelity by roughly 4 (second order)
        assert!(errors[0] / errors[1] > 2.5);
        assert!(errors[1] / errors[2] > 2.5);
    }

    #[test]
    fn adjoint_step_inverts_step() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, s0) = ground_state(&b, 5.0).unwrap();
        for mode in [DriftMode::Exact, DriftMode::EvenOdd] {
            let prop = DenseStPropagator::new(b.clone(), 0.05, mode).unwrap();
            let fwd = prop.step(&s0, 3.0, 8.0);
            let back = prop.step_adjoint(&fwd, 3.0, 8.0);
            assert!((back.amplitudes - &s0.amplitudes).norm() < 1e-12);
        }
    }

    #[test]
    fn even_odd_mode_matches_exact_mode_at_small_dt() {
        let b = Arc::new(FockBasis::new(4, 4).unwrap());
        let (_, s0) = ground_state(&b, 2.0).unwrap();
        let exact = DenseStPropagator::new(b.clone(), 0.005, DriftMode::Exact).unwrap();
        let split = DenseStPropagator::new(b.clone(), 0.005, DriftMode::EvenOdd).unwrap();
        let a = exact.step(&s0, 4.0, 4.0);
        let c = split.step(&s0, 4.0, 4.0);
        assert!(1.0 - a.fidelity(&c) < 1e-7);
    }

    #[test]
    fn finite_differences_recover_a_quadratic() {
        let grid = ControlGrid::new(0.1, vec![2.0, 3.0, 4.0], (1.32, 40.18), false).unwrap();
        let g = finite_difference_gradient(
            |c| Ok(c.values().iter().map(|u| 0.5 * u * u).sum()),
            &grid,
            1e-5,
        )
        .unwrap();
        for (gi, ui) in g.iter().zip(grid.values()) {
            assert_relative_eq!(gi, ui, epsilon = 1e-8);
        }
    }

    #[test]
    fn state_text_export_roundtrips_occupations() {
        let b = Arc::new(FockBasis::new(3, 3).unwrap());
        let s = DenseState::from_occupations(b, &[1, 1, 1]).unwrap();
        let text = s.to_text();
        assert!(text.starts_with("# index occupations re im\n"));
        assert!(text.contains("1,1,1 1.000000000000000e0 0.000000000000000e0"));
    }
}
