//! Matrix-product-state representation with canonical gauges, SVD truncation,
//! overlaps, expectation values, and cross-state local matrix elements.
//!
//! A site tensor is stored as `d` matrices of shape (left bond x right bond),
//! one per physical index. Sites left of the gauge position are
//! left-normalized, sites right of it are right-normalized.

use std::fmt::Write as _;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::fock::{DenseState, FockBasis};
use crate::ops::C64;

/// Truncation caps: maximal bond dimension D and relative singular-value
/// threshold s_max.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Caps {
    pub max_bond: usize,
    pub sv_threshold: f64,
}

impl Caps {
    pub fn new(max_bond: usize, sv_threshold: f64) -> Self {
        Self {
            max_bond,
            sv_threshold,
        }
    }

    /// Effectively exact decomposition (no rank cap, roundoff-level cutoff).
    pub fn unlimited() -> Self {
        Self {
            max_bond: usize::MAX,
            sv_threshold: 0.0,
        }
    }
}

impl Default for Caps {
    /// D = 200, s_max = 1e-12.
    fn default() -> Self {
        Self {
            max_bond: 200,
            sv_threshold: 1e-12,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Direction {
    Left,
    Right,
}

#[derive(Debug, Clone)]
pub struct Mps {
    /// tensors[site][physical index] of shape (chi_left x chi_right).
    tensors: Vec<Vec<DMatrix<C64>>>,
    local_dim: usize,
    gauge_position: usize,
    pub caps: Caps,
    /// Accumulated relative discarded weight over all truncations.
    pub log_truncation: f64,
}

const DENSE_GUARD: u128 = 1_000_000;

impl Mps {
    /// Fock product state as a bond-dimension-1 MPS.
    pub fn product_state(occupations: &[u8], local_dim: usize, caps: Caps) -> Result<Self> {
        let mut tensors = Vec::with_capacity(occupations.len());
        for &occ in occupations {
            if occ as usize >= local_dim {
                return Err(Error::OccupationTooLarge {
                    occupation: occ as usize,
                    local_dim,
                });
            }
            let site: Vec<DMatrix<C64>> = (0..local_dim)
                .map(|j| {
                    let v = if j == occ as usize { 1.0 } else { 0.0 };
                    DMatrix::from_element(1, 1, C64::new(v, 0.0))
                })
                .collect();
            tensors.push(site);
        }
        if tensors.is_empty() {
            return Err(Error::InvalidArgument("empty occupation vector".into()));
        }
        Ok(Self {
            tensors,
            local_dim,
            gauge_position: 0,
            caps,
            log_truncation: 0.0,
        })
    }

    /// Exact decomposition of a dense state by repeated SVD, truncated per
    /// `caps`. The gauge ends on the last site.
    pub fn from_dense(state: &DenseState, caps: Caps) -> Result<Self> {
        let n = state.basis.n_sites;
        let d = state.basis.local_dim();
        let full: u128 = (d as u128).pow(n as u32);
        if full > DENSE_GUARD {
            return Err(Error::DenseTooLarge {
                dim: full,
                guard: DENSE_GUARD,
            });
        }
        let mut flat = vec![C64::new(0.0, 0.0); full as usize];
        for (k, occ) in state.basis.states.iter().enumerate() {
            let mut f = 0usize;
            for &j in occ {
                f = f * d + j as usize;
            }
            flat[f] = state.amplitudes[k];
        }
        let mut mps = Self {
            tensors: Vec::with_capacity(n),
            local_dim: d,
            gauge_position: n - 1,
            caps,
            log_truncation: 0.0,
        };
        // current block: (chi x rest), columns indexed by the remaining sites
        let mut chi = 1usize;
        let mut rest = full as usize;
        let mut block = DMatrix::<C64>::from_fn(1, rest, |_, c| flat[c]);
        for _site in 0..n - 1 {
            rest /= d;
            // regroup columns (j * rest + c) into rows (j * chi + a)
            let mut m = DMatrix::<C64>::zeros(chi * d, rest);
            for a in 0..chi {
                for j in 0..d {
                    for c in 0..rest {
                        m[(j * chi + a, c)] = block[(a, j * rest + c)];
                    }
                }
            }
            let (u, s, vt, discarded) = truncated_svd(m, caps)?;
            mps.log_truncation += discarded;
            let k = s.len();
            let site: Vec<DMatrix<C64>> = (0..d)
                .map(|j| u.rows(j * chi, chi).columns(0, k).into_owned())
                .collect();
            mps.tensors.push(site);
            let mut sv = vt;
            for r in 0..k {
                let w = C64::new(s[r], 0.0);
                for c in 0..rest {
                    sv[(r, c)] *= w;
                }
            }
            chi = k;
            block = sv;
        }
        // last site: block is (chi x d)
        let site: Vec<DMatrix<C64>> = (0..d)
            .map(|j| DMatrix::from_fn(chi, 1, |r, _| block[(r, j)]))
            .collect();
        mps.tensors.push(site);
        Ok(mps)
    }

    /// Contract onto the occupation-number basis amplitudes.
    pub fn to_dense(&self, basis: &Arc<FockBasis>) -> Result<DenseState> {
        if basis.n_sites != self.n_sites() || basis.local_dim() != self.local_dim {
            return Err(Error::ShapeMismatch(format!(
                "MPS ({} sites, d = {}) vs basis ({} sites, d = {})",
                self.n_sites(),
                self.local_dim,
                basis.n_sites,
                basis.local_dim()
            )));
        }
        let mut amplitudes = DVector::<C64>::zeros(basis.len());
        for (k, occ) in basis.states.iter().enumerate() {
            let mut row = self.tensors[0][occ[0] as usize].clone();
            for (site, &j) in occ.iter().enumerate().skip(1) {
                row = row * &self.tensors[site][j as usize];
            }
            amplitudes[k] = row[(0, 0)];
        }
        Ok(DenseState {
            basis: basis.clone(),
            amplitudes,
        })
    }

    pub fn n_sites(&self) -> usize {
        self.tensors.len()
    }

    pub fn local_dim(&self) -> usize {
        self.local_dim
    }

    pub fn gauge_position(&self) -> usize {
        self.gauge_position
    }

    /// Internal bond dimensions, length n_sites - 1.
    pub fn bond_dimensions(&self) -> Vec<usize> {
        (0..self.n_sites() - 1)
            .map(|i| self.tensors[i][0].ncols())
            .collect()
    }

    pub fn site(&self, site: usize) -> &Vec<DMatrix<C64>> {
        &self.tensors[site]
    }

    pub fn norm(&self) -> f64 {
        let g = self.gauge_position;
        self.tensors[g]
            .iter()
            .map(|m| m.norm_squared())
            .sum::<f64>()
            .sqrt()
    }

    pub fn normalize(&mut self) {
        let n = self.norm();
        let g = self.gauge_position;
        for m in &mut self.tensors[g] {
            *m /= C64::new(n, 0.0);
        }
    }

    pub fn scale(&mut self, factor: C64) {
        let g = self.gauge_position;
        for m in &mut self.tensors[g] {
            *m *= factor;
        }
    }

    /// Move the gauge one site to the right via QR.
    fn gauge_step_right(&mut self) {
        let g = self.gauge_position;
        let chi_l = self.tensors[g][0].nrows();
        let chi_r = self.tensors[g][0].ncols();
        let d = self.local_dim;
        let mut stacked = DMatrix::<C64>::zeros(chi_l * d, chi_r);
        for j in 0..d {
            stacked.rows_mut(j * chi_l, chi_l).copy_from(&self.tensors[g][j]);
        }
        let (q, r) = deterministic_qr(stacked);
        let k = q.ncols();
        for j in 0..d {
            self.tensors[g][j] = q.rows(j * chi_l, chi_l).columns(0, k).into_owned();
        }
        for j in 0..d {
            self.tensors[g + 1][j] = &r * &self.tensors[g + 1][j];
        }
        self.gauge_position = g + 1;
    }

    /// Move the gauge one site to the left via LQ (QR of the adjoint).
    fn gauge_step_left(&mut self) {
        let g = self.gauge_position;
        let chi_l = self.tensors[g][0].nrows();
        let chi_r = self.tensors[g][0].ncols();
        let d = self.local_dim;
        let mut stacked = DMatrix::<C64>::zeros(chi_r * d, chi_l);
        for j in 0..d {
            stacked
                .rows_mut(j * chi_r, chi_r)
                .copy_from(&self.tensors[g][j].adjoint());
        }
        let (q, r) = deterministic_qr(stacked);
        let k = q.ncols();
        for j in 0..d {
            self.tensors[g][j] = q.rows(j * chi_r, chi_r).columns(0, k).adjoint();
        }
        let l = r.adjoint();
        for j in 0..d {
            self.tensors[g - 1][j] = &self.tensors[g - 1][j] * &l;
        }
        self.gauge_position = g - 1;
    }

    pub fn move_gauge_to(&mut self, site: usize) {
        while self.gauge_position < site {
            self.gauge_step_right();
        }
        while self.gauge_position > site {
            self.gauge_step_left();
        }
    }

    /// Re-establish canonical form with the gauge on site 0.
    pub fn recanonicalize(&mut self) {
        self.move_gauge_to(self.n_sites() - 1);
        self.move_gauge_to(0);
    }

    /// Largest deviation from isometry among tensors away from the gauge.
    pub fn canonical_residual(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for site in 0..self.n_sites() {
            if site < self.gauge_position {
                // left-normalized: sum_j A[j]^H A[j] = I
                let k = self.tensors[site][0].ncols();
                let mut acc = DMatrix::<C64>::zeros(k, k);
                for a in &self.tensors[site] {
                    acc += a.adjoint() * a;
                }
                worst = worst.max((acc - DMatrix::<C64>::identity(k, k)).norm());
            } else if site > self.gauge_position {
                // right-normalized: sum_j A[j] A[j]^H = I
                let k = self.tensors[site][0].nrows();
                let mut acc = DMatrix::<C64>::zeros(k, k);
                for a in &self.tensors[site] {
                    acc += a * a.adjoint();
                }
                worst = worst.max((acc - DMatrix::<C64>::identity(k, k)).norm());
            }
        }
        worst
    }

    /// <bra|ket> via transfer-matrix contraction.
    pub fn overlap(bra: &Mps, ket: &Mps) -> Result<C64> {
        if bra.n_sites() != ket.n_sites() || bra.local_dim != ket.local_dim {
            return Err(Error::ShapeMismatch(format!(
                "overlap of {}-site d={} with {}-site d={}",
                bra.n_sites(),
                bra.local_dim,
                ket.n_sites(),
                ket.local_dim
            )));
        }
        let mut env = DMatrix::<C64>::from_element(1, 1, C64::new(1.0, 0.0));
        for site in 0..bra.n_sites() {
            env = transfer(&env, &bra.tensors[site], &ket.tensors[site]);
        }
        Ok(env[(0, 0)])
    }

    /// <psi|op_site|psi> with the gauge moved onto `site`.
    pub fn local_expectation(&mut self, site: usize, op: &DMatrix<f64>) -> Result<C64> {
        let d = self.local_dim;
        if op.nrows() != d || op.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "operator {}x{} vs local dimension {d}",
                op.nrows(),
                op.ncols()
            )));
        }
        self.move_gauge_to(site);
        let mut val = C64::new(0.0, 0.0);
        for jp in 0..d {
            for j in 0..d {
                if op[(jp, j)] != 0.0 {
                    val += op[(jp, j)]
                        * (self.tensors[site][jp].adjoint() * &self.tensors[site][j]).trace();
                }
            }
        }
        Ok(val)
    }

    /// <bra|op_site|ket> for two different states.
    pub fn cross_matrix_element(
        bra: &Mps,
        ket: &Mps,
        site: usize,
        op: &DMatrix<f64>,
    ) -> Result<C64> {
        Ok(Self::cross_elements_all_sites(bra, ket, op)?[site])
    }

    /// <bra|op_i|ket> for every site i in one pass, with cached left and
    /// right environments.
    pub fn cross_elements_all_sites(
        bra: &Mps,
        ket: &Mps,
        op: &DMatrix<f64>,
    ) -> Result<Vec<C64>> {
        let n = bra.n_sites();
        let d = bra.local_dim;
        if n != ket.n_sites() || d != ket.local_dim {
            return Err(Error::ShapeMismatch(
                "cross element between mismatched chains".into(),
            ));
        }
        if op.nrows() != d || op.ncols() != d {
            return Err(Error::ShapeMismatch(format!(
                "operator {}x{} vs local dimension {d}",
                op.nrows(),
                op.ncols()
            )));
        }
        // right environments R[i] covering sites i..n
        let mut right = vec![DMatrix::<C64>::from_element(1, 1, C64::new(1.0, 0.0)); n + 1];
        for site in (0..n).rev() {
            let mut acc: Option<DMatrix<C64>> = None;
            for j in 0..d {
                let term =
                    bra.tensors[site][j].conjugate() * &right[site + 1] * ket.tensors[site][j].transpose();
                acc = Some(match acc {
                    Some(a) => a + term,
                    None => term,
                });
            }
            right[site] = acc.unwrap();
        }
        let mut out = Vec::with_capacity(n);
        let mut left = DMatrix::<C64>::from_element(1, 1, C64::new(1.0, 0.0));
        for site in 0..n {
            let mut val = C64::new(0.0, 0.0);
            for jp in 0..d {
                for j in 0..d {
                    if op[(jp, j)] != 0.0 {
                        let m = bra.tensors[site][jp].adjoint() * &left * &ket.tensors[site][j];
                        val += op[(jp, j)] * m.zip_fold(&right[site + 1], C64::new(0.0, 0.0), |acc, a, b| acc + a * b);
                    }
                }
            }
            out.push(val);
            left = transfer(&left, &bra.tensors[site], &ket.tensors[site]);
        }
        Ok(out)
    }

    /// <psi|op_(bond, bond+1)|psi> with the gauge at the bond; `op` acts on
    /// the combined index j_left * d + j_right.
    pub fn two_site_expectation(&mut self, bond: usize, op: &DMatrix<f64>) -> Result<C64> {
        let d = self.local_dim;
        if op.nrows() != d * d || op.ncols() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "two-site operator {}x{} vs d^2 = {}",
                op.nrows(),
                op.ncols(),
                d * d
            )));
        }
        self.move_gauge_to(bond);
        let theta: Vec<DMatrix<C64>> = (0..d * d)
            .map(|jj| &self.tensors[bond][jj / d] * &self.tensors[bond + 1][jj % d])
            .collect();
        let mut val = C64::new(0.0, 0.0);
        for jp in 0..d * d {
            for j in 0..d * d {
                if op[(jp, j)] != 0.0 {
                    val += op[(jp, j)]
                        * theta[jp].zip_fold(&theta[j], C64::new(0.0, 0.0), |acc, a, b| {
                            acc + a.conj() * b
                        });
                }
            }
        }
        Ok(val)
    }

    /// Apply a two-site gate on (bond, bond+1), split by SVD with the
    /// configured caps, and leave the gauge on the side given by `direction`
    /// (Right -> site bond+1, Left -> site bond).
    pub fn apply_two_site_gate(
        &mut self,
        bond: usize,
        gate: &DMatrix<C64>,
        direction: Direction,
    ) -> Result<()> {
        let d = self.local_dim;
        if gate.nrows() != d * d || gate.ncols() != d * d {
            return Err(Error::ShapeMismatch(format!(
                "gate {}x{} vs d^2 = {}",
                gate.nrows(),
                gate.ncols(),
                d * d
            )));
        }
        if self.gauge_position != bond && self.gauge_position != bond + 1 {
            return Err(Error::GaugeMismatch {
                gauge: self.gauge_position,
                bond,
            });
        }
        let chi_l = self.tensors[bond][0].nrows();
        let chi_r = self.tensors[bond + 1][0].ncols();
        let theta: Vec<DMatrix<C64>> = (0..d * d)
            .map(|jj| &self.tensors[bond][jj / d] * &self.tensors[bond + 1][jj % d])
            .collect();
        // gated[j'] = sum_j gate[j', j] theta[j]
        let mut big = DMatrix::<C64>::zeros(chi_l * d, chi_r * d);
        for jjp in 0..d * d {
            let mut acc = DMatrix::<C64>::zeros(chi_l, chi_r);
            for jj in 0..d * d {
                let g = gate[(jjp, jj)];
                if g != C64::new(0.0, 0.0) {
                    acc += &theta[jj] * g;
                }
            }
            let (j1, j2) = (jjp / d, jjp % d);
            for a in 0..chi_l {
                for b in 0..chi_r {
                    big[(j1 * chi_l + a, j2 * chi_r + b)] = acc[(a, b)];
                }
            }
        }
        let (u, s, vt, discarded) = truncated_svd(big, self.caps)?;
        self.log_truncation += discarded;
        let k = s.len();
        match direction {
            Direction::Right => {
                for j in 0..d {
                    self.tensors[bond][j] = u.rows(j * chi_l, chi_l).columns(0, k).into_owned();
                }
                for j in 0..d {
                    let mut block = DMatrix::<C64>::zeros(k, chi_r);
                    for r in 0..k {
                        for b in 0..chi_r {
                            block[(r, b)] = vt[(r, j * chi_r + b)] * s[r];
                        }
                    }
                    self.tensors[bond + 1][j] = block;
                }
                self.gauge_position = bond + 1;
            }
            Direction::Left => {
                for j in 0..d {
                    let mut block = u.rows(j * chi_l, chi_l).columns(0, k).into_owned();
                    for r in 0..k {
                        for a in 0..chi_l {
                            block[(a, r)] *= s[r];
                        }
                    }
                    self.tensors[bond][j] = block;
                }
                for j in 0..d {
                    let mut block = DMatrix::<C64>::zeros(k, chi_r);
                    for r in 0..k {
                        for b in 0..chi_r {
                            block[(r, b)] = vt[(r, j * chi_r + b)];
                        }
                    }
                    self.tensors[bond + 1][j] = block;
                }
                self.gauge_position = bond;
            }
        }
        Ok(())
    }

    /// Multiply per-occupation phases (or weights) along the physical index of
    /// one site. No truncation, no gauge change.
    pub fn apply_one_site_diagonal(&mut self, site: usize, weights: &[C64]) -> Result<()> {
        if weights.len() != self.local_dim {
            return Err(Error::ShapeMismatch(format!(
                "{} weights vs local dimension {}",
                weights.len(),
                self.local_dim
            )));
        }
        for (j, &w) in weights.iter().enumerate() {
            self.tensors[site][j] *= w;
        }
        Ok(())
    }

    /// Portable text snapshot.
    pub fn save_snapshot(&self, path: &std::path::Path) -> Result<()> {
        let mut out = String::from("BHC-MPS v1\n");
        let _ = writeln!(
            out,
            "{} {} {} {} {:e} {:e}",
            self.n_sites(),
            self.local_dim,
            self.gauge_position,
            self.caps.max_bond,
            self.caps.sv_threshold,
            self.log_truncation
        );
        for site in &self.tensors {
            for m in site {
                let _ = writeln!(out, "{} {}", m.nrows(), m.ncols());
                for r in 0..m.nrows() {
                    let mut line = String::new();
                    for c in 0..m.ncols() {
                        let _ = write!(line, "{:.17e} {:.17e} ", m[(r, c)].re, m[(r, c)].im);
                    }
                    out.push_str(line.trim_end());
                    out.push('\n');
                }
            }
        }
        let tmp = path.with_extension("tmp");
        std::fs::write(&tmp, out)?;
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load_snapshot(path: &std::path::Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let mut lines = text.lines();
        let version = lines
            .next()
            .ok_or_else(|| Error::SnapshotFormat("empty file".into()))?;
        if version != "BHC-MPS v1" {
            return Err(Error::SnapshotFormat(format!(
                "unsupported version tag `{version}`"
            )));
        }
        let header: Vec<&str> = lines
            .next()
            .ok_or_else(|| Error::SnapshotFormat("missing header".into()))?
            .split_whitespace()
            .collect();
        if header.len() != 6 {
            return Err(Error::SnapshotFormat("malformed header".into()));
        }
        let parse_usize = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::SnapshotFormat(format!("bad integer `{s}`: {e}")))
        };
        let parse_f64 = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::SnapshotFormat(format!("bad float `{s}`: {e}")))
        };
        let n_sites = parse_usize(header[0])?;
        let local_dim = parse_usize(header[1])?;
        let gauge_position = parse_usize(header[2])?;
        let max_bond = parse_usize(header[3])?;
        let sv_threshold = parse_f64(header[4])?;
        let log_truncation = parse_f64(header[5])?;
        let mut tensors = Vec::with_capacity(n_sites);
        for _ in 0..n_sites {
            let mut site = Vec::with_capacity(local_dim);
            for _ in 0..local_dim {
                let shape: Vec<usize> = lines
                    .next()
                    .ok_or_else(|| Error::SnapshotFormat("truncated tensor list".into()))?
                    .split_whitespace()
                    .map(parse_usize)
                    .collect::<Result<_>>()?;
                if shape.len() != 2 {
                    return Err(Error::SnapshotFormat("malformed shape line".into()));
                }
                let mut m = DMatrix::<C64>::zeros(shape[0], shape[1]);
                for r in 0..shape[0] {
                    let row: Vec<f64> = lines
                        .next()
                        .ok_or_else(|| Error::SnapshotFormat("truncated tensor rows".into()))?
                        .split_whitespace()
                        .map(parse_f64)
                        .collect::<Result<_>>()?;
                    if row.len() != 2 * shape[1] {
                        return Err(Error::SnapshotFormat("malformed tensor row".into()));
                    }
                    for c in 0..shape[1] {
                        m[(r, c)] = C64::new(row[2 * c], row[2 * c + 1]);
                    }
                }
                site.push(m);
            }
            tensors.push(site);
        }
        Ok(Self {
            tensors,
            local_dim,
            gauge_position,
            caps: Caps::new(max_bond, sv_threshold),
            log_truncation,
        })
    }
}

/// E' = sum_j A_bra[j]^H E A_ket[j].
fn transfer(env: &DMatrix<C64>, bra: &[DMatrix<C64>], ket: &[DMatrix<C64>]) -> DMatrix<C64> {
    let mut out = DMatrix::<C64>::zeros(bra[0].ncols(), ket[0].ncols());
    for j in 0..bra.len() {
        out += bra[j].adjoint() * env * &ket[j];
    }
    out
}

/// Thin QR with the diagonal of R made real positive (deterministic output).
fn deterministic_qr(m: DMatrix<C64>) -> (DMatrix<C64>, DMatrix<C64>) {
    let qr = m.qr();
    let mut q = qr.q();
    let mut r = qr.r();
    let k = r.nrows().min(r.ncols());
    for i in 0..k {
        let p = r[(i, i)];
        if p.norm() > 0.0 {
            let phase = p.conj() / p.norm();
            for c in 0..r.ncols() {
                r[(i, c)] *= phase;
            }
            let inv = phase.conj();
            for row in 0..q.nrows() {
                q[(row, i)] *= inv;
            }
        }
    }
    (q, r)
}

/// Thin SVD with caps applied: returns (U, kept singular values, V^H,
/// relative discarded weight). Kept singular values are rescaled so the total
/// Frobenius norm is preserved. The sign convention makes the first nonzero
/// entry of each left singular vector real positive.
fn truncated_svd(
    m: DMatrix<C64>,
    caps: Caps,
) -> Result<(DMatrix<C64>, Vec<f64>, DMatrix<C64>, f64)> {
    // nalgebra's iterative SVD is fast but on rare structured inputs returns
    // a silently inaccurate factorization; verify it and fall back to the
    // unconditionally accurate Jacobi routine when the residual is too large
    let svd = m.clone().svd(true, true);
    let (u, s, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => {
            let s: Vec<f64> = svd.singular_values.iter().copied().collect();
            let mut rec = DMatrix::<C64>::zeros(u.nrows(), vt.ncols());
            for k in 0..s.len() {
                rec += u.column(k) * vt.row(k) * C64::new(s[k], 0.0);
            }
            let err = crate::ops::max_abs(&(rec - &m));
            if err <= 1e-13 * s[0].max(1.0) {
                (u, s, vt)
            } else {
                let jac = crate::ops::complex_svd(&m);
                (jac.u, jac.singular_values, jac.v_h)
            }
        }
        _ => {
            let jac = crate::ops::complex_svd(&m);
            (jac.u, jac.singular_values, jac.v_h)
        }
    };
    let s0 = s[0];
    let total: f64 = s.iter().map(|x| x * x).sum();
    if total == 0.0 {
        return Err(Error::EigensolverFailure {
            context: "SVD of a zero block".into(),
        });
    }
    let mut keep = 0usize;
    for &x in s.iter() {
        // always drop exact-roundoff ranks, then apply the configured cutoff
        if keep >= caps.max_bond || x < s0 * caps.sv_threshold.max(1e-15) {
            break;
        }
        keep += 1;
    }
    let keep = keep.max(1);
    let kept: f64 = s.iter().take(keep).map(|x| x * x).sum();
    let rescale = (total / kept).sqrt();
    let svals: Vec<f64> = s.iter().take(keep).map(|x| x * rescale).collect();
    let mut u = u.columns(0, keep).into_owned();
    let mut vt_k = vt.rows(0, keep).into_owned();
    for k in 0..keep {
        let col = u.column(k);
        if let Some(first) = (0..col.len()).find(|&i| col[i].norm() > 1e-14) {
            let p = u[(first, k)];
            let phase = p.conj() / p.norm();
            for r in 0..u.nrows() {
                u[(r, k)] *= phase;
            }
            let inv = phase.conj();
            for c in 0..vt_k.ncols() {
                vt_k[(k, c)] *= inv;
            }
        }
    }
    Ok((u, svals, vt_k, 1.0 - kept / total))
}
