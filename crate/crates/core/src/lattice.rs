//! Constitutive relations between optical-lattice depths and Hubbard energies.
//!
//! All lengths are expressed in units of the lattice spacing `a` and all
//! energies in units of the recoil energy `E_R = hbar^2 pi^2 / (2 m a^2)`, so
//! the single-particle Hamiltonian along one axis reads
//! `H/E_R = -(1/pi^2) d^2/dxi^2 + v sin^2(pi xi)`.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::{LazyLock, Mutex};

use nalgebra::DMatrix;
use num_complex::Complex64;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grape::ControlGrid;
use crate::interp::MonotoneCubic;

pub const HBAR: f64 = 1.054_571_817e-34; // J s
pub const PLANCK: f64 = 6.626_070_15e-34; // J s
pub const ATOMIC_MASS: f64 = 1.660_539_066_60e-27; // kg
pub const BOHR_RADIUS: f64 = 5.291_772_109_03e-11; // m

/// Modeling validity window for the longitudinal depth, in units of E_R.
pub const VX_MIN: f64 = 2.0;
pub const VX_MAX: f64 = 13.5;

const DEFAULT_PLANE_WAVES: usize = 21;
const DEFAULT_N_K: usize = 64;
const SITES_WIDE: usize = 8;
const POINTS_PER_SITE: usize = 512;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeParams {
    /// Laser wavelength lambda_l in meters.
    pub laser_wavelength: f64,
    /// Lattice spacing a = lambda_l / 2 in meters.
    pub lattice_spacing: f64,
    /// Atom mass in kilograms.
    pub atom_mass: f64,
    /// s-wave scattering length in meters.
    pub scattering_length: f64,
    /// Frozen transverse depths (v_y, v_z) in units of E_R.
    pub transverse_depths: (f64, f64),
    /// Recoil energy in joules, hbar^2 pi^2 / (2 m a^2).
    pub recoil_energy: f64,
    /// Two-body collision coupling g_3D = 4 pi hbar^2 a_s / m, in J m^3.
    pub coupling_3d: f64,
}

impl LatticeParams {
    pub fn new(
        laser_wavelength: f64,
        atom_mass: f64,
        scattering_length: f64,
        transverse_depths: (f64, f64),
    ) -> Result<Self> {
        if laser_wavelength <= 0.0 || atom_mass <= 0.0 || scattering_length <= 0.0 {
            return Err(Error::InvalidArgument(
                "wavelength, mass and scattering length must be positive".into(),
            ));
        }
        let lattice_spacing = laser_wavelength / 2.0;
        let recoil_energy =
            HBAR * HBAR * std::f64::consts::PI.powi(2) / (2.0 * atom_mass * lattice_spacing.powi(2));
        let coupling_3d = 4.0 * std::f64::consts::PI * HBAR * HBAR * scattering_length / atom_mass;
        Ok(Self {
            laser_wavelength,
            lattice_spacing,
            atom_mass,
            scattering_length,
            transverse_depths,
            recoil_energy,
            coupling_3d,
        })
    }

    /// Rb-87 in a 1064 nm lattice with v_y = v_z = 20 E_R.
    pub fn rubidium_87() -> Self {
        Self::new(
            1064e-9,
            87.0 * ATOMIC_MASS,
            101.0 * BOHR_RADIUS,
            (20.0, 20.0),
        )
        .expect("valid built-in parameters")
    }

    /// Recoil frequency E_R / h in hertz.
    pub fn recoil_frequency(&self) -> f64 {
        self.recoil_energy / PLANCK
    }

    fn content_hash(&self, n_samples: usize) -> String {
        let mut hasher = Sha256::new();
        for v in [
            self.laser_wavelength,
            self.atom_mass,
            self.scattering_length,
            self.transverse_depths.0,
            self.transverse_depths.1,
        ] {
            hasher.update(v.to_le_bytes());
        }
        hasher.update((n_samples as u64).to_le_bytes());
        let digest = hasher.finalize();
        digest.iter().take(12).fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }
}

#[derive(Debug, Clone)]
pub struct BandSolution {
    /// Depth v in units of E_R.
    pub depth: f64,
    /// Quasimomenta in units of k_l, spanning the first Brillouin zone.
    pub quasimomenta: Vec<f64>,
    /// Spacing of the quasimomentum grid in units of k_l.
    pub dk: f64,
    /// band_energies[k][n] in units of E_R, nondecreasing in n.
    pub band_energies: Vec<Vec<f64>>,
    /// bloch_coefficients[k] has the Fourier coefficients of u_k^n in column n,
    /// with plane waves exp(i (q + 2 l) pi xi), l = -(P-1)/2 ..= (P-1)/2.
    pub bloch_coefficients: Vec<DMatrix<f64>>,
}

impl BandSolution {
    pub fn n_plane_waves(&self) -> usize {
        self.bloch_coefficients[0].nrows()
    }
}

#[derive(Debug, Clone)]
pub struct WannierFunction {
    /// Depth in units of E_R.
    pub depth: f64,
    /// Real-space sample points in units of a, centered on the requested site.
    pub grid: Vec<f64>,
    /// Real samples of w(x), unit L2 norm on the grid.
    pub values: Vec<f64>,
}

impl WannierFunction {
    pub fn grid_step(&self) -> f64 {
        self.grid[1] - self.grid[0]
    }
}

/// Lowest-band Bloch solution of the central equation.
pub fn solve_bands(
    params: &LatticeParams,
    depth: f64,
    n_plane_waves: usize,
    n_k: usize,
) -> Result<BandSolution> {
    let _ = params;
    if depth < 0.0 {
        return Err(Error::InvalidArgument(format!(
            "depth {depth} E_R must be nonnegative"
        )));
    }
    if n_plane_waves % 2 == 0 || n_plane_waves < 7 {
        return Err(Error::InvalidArgument(format!(
            "n_plane_waves = {n_plane_waves} must be odd and >= 7"
        )));
    }
    if n_k < 2 {
        return Err(Error::InvalidArgument(format!("n_k = {n_k} must be >= 2")));
    }
    let half = (n_plane_waves / 2) as i64;
    // midpoint grid, symmetric under q -> -q, excludes the zone edges
    let quasimomenta: Vec<f64> = (0..n_k)
        .map(|j| (2 * j as i64 + 1 - n_k as i64) as f64 / n_k as f64)
        .collect();
    let dk = 2.0 / n_k as f64;

    let mut band_energies = Vec::with_capacity(n_k);
    let mut bloch_coefficients = Vec::with_capacity(n_k);
    for &q in &quasimomenta {
        let mut h = DMatrix::<f64>::zeros(n_plane_waves, n_plane_waves);
        for (row, l) in (-half..=half).enumerate() {
            h[(row, row)] = (q + 2.0 * l as f64).powi(2) + depth / 2.0;
            if row + 1 < n_plane_waves {
                h[(row, row + 1)] = -depth / 4.0;
                h[(row + 1, row)] = -depth / 4.0;
            }
        }
        let eig = crate::ops::symmetric_eigen(&h);
        band_energies.push(eig.eigenvalues.iter().cloned().collect());
        bloch_coefficients.push(eig.eigenvectors);
    }
    Ok(BandSolution {
        depth,
        quasimomenta,
        dk,
        band_energies,
        bloch_coefficients,
    })
}

/// Lowest-band Bloch function phi_q(xi) on a grid, phase-fixed so that
/// phi_q(center) is real positive.
fn bloch_on_grid(
    band: &BandSolution,
    k_index: usize,
    grid: &[f64],
    center: f64,
) -> Result<Vec<Complex64>> {
    let q = band.quasimomenta[k_index];
    let coeffs = &band.bloch_coefficients[k_index];
    let half = (band.n_plane_waves() / 2) as i64;
    let eval = |xi: f64| -> Complex64 {
        let mut s = Complex64::new(0.0, 0.0);
        for (row, l) in (-half..=half).enumerate() {
            let phase = std::f64::consts::PI * (q + 2.0 * l as f64) * xi;
            s += coeffs[(row, 0)] * Complex64::new(phase.cos(), phase.sin());
        }
        s
    };
    let at_center = eval(center);
    let mag = at_center.norm();
    if mag < 1e-14 {
        return Err(Error::WannierNotReal {
            depth: band.depth,
            residual: f64::INFINITY,
        });
    }
    let fix = at_center.conj() / mag;
    Ok(grid.iter().map(|&xi| eval(xi) * fix).collect())
}

fn trapezoid(values: &[f64], dx: f64) -> f64 {
    let inner: f64 = values[1..values.len() - 1].iter().sum();
    dx * (inner + 0.5 * (values[0] + values[values.len() - 1]))
}

/// Wannier function plus the band-energy-weighted sum H w on the same grid;
/// everything the J_x and U integrals need.
fn wannier_with_energy(band: &BandSolution, site_index: i64) -> Result<(WannierFunction, Vec<f64>)> {
    let center = site_index as f64;
    let n_pts = SITES_WIDE * POINTS_PER_SITE + 1;
    let halfwidth = SITES_WIDE as f64 / 2.0;
    let grid: Vec<f64> = (0..n_pts)
        .map(|i| center - halfwidth + i as f64 * (SITES_WIDE as f64 / (n_pts - 1) as f64))
        .collect();
    let dx = grid[1] - grid[0];

    let mut w = vec![Complex64::new(0.0, 0.0); n_pts];
    let mut hw = vec![Complex64::new(0.0, 0.0); n_pts];
    for k_index in 0..band.quasimomenta.len() {
        let phi = bloch_on_grid(band, k_index, &grid, center)?;
        let e0 = band.band_energies[k_index][0];
        for (i, p) in phi.iter().enumerate() {
            w[i] += p;
            hw[i] += e0 * p;
        }
    }
    let peak = w.iter().map(|c| c.norm()).fold(0.0, f64::max);
    let residual = w.iter().map(|c| c.im.abs()).fold(0.0, f64::max) / peak;
    if residual > 1e-6 {
        return Err(Error::WannierNotReal {
            depth: band.depth,
            residual,
        });
    }
    let mut values: Vec<f64> = w.iter().map(|c| c.re).collect();
    let mut hw_real: Vec<f64> = hw.iter().map(|c| c.re).collect();
    let sq: Vec<f64> = values.iter().map(|v| v * v).collect();
    let norm = trapezoid(&sq, dx).sqrt();
    for v in values.iter_mut() {
        *v /= norm;
    }
    for v in hw_real.iter_mut() {
        *v /= norm;
    }
    Ok((
        WannierFunction {
            depth: band.depth,
            grid,
            values,
        },
        hw_real,
    ))
}

/// Maximally localized lowest-band Wannier function centered on `site_index`.
pub fn build_wannier(band: &BandSolution, site_index: i64) -> Result<WannierFunction> {
    let (w, _) = wannier_with_energy(band, site_index)?;
    Ok(w)
}

/// Dimensionless quartic integral of the normalized lowest-band Wannier
/// function at the given depth. Memoized: the transverse factors of U are
/// computed once per depth and reused.
fn quartic_integral(depth: f64) -> Result<f64> {
    static CACHE: LazyLock<Mutex<HashMap<u64, f64>>> = LazyLock::new(|| Mutex::new(HashMap::new()));
    if let Some(&v) = CACHE.lock().unwrap().get(&depth.to_bits()) {
        return Ok(v);
    }
    let params = LatticeParams::rubidium_87(); // only units enter; any params work
    let band = solve_bands(&params, depth, DEFAULT_PLANE_WAVES, DEFAULT_N_K)?;
    let (w, _) = wannier_with_energy(&band, 0)?;
    let quartic: Vec<f64> = w.values.iter().map(|v| v.powi(4)).collect();
    let integral = trapezoid(&quartic, w.grid_step());
    CACHE.lock().unwrap().insert(depth.to_bits(), integral);
    Ok(integral)
}

fn check_vx_range(v_x: f64) -> Result<()> {
    if !(VX_MIN..=VX_MAX).contains(&v_x) {
        return Err(Error::DepthOutOfRange {
            depth: v_x,
            min: VX_MIN,
            max: VX_MAX,
        });
    }
    Ok(())
}

/// Nearest-neighbor tunneling energy J_x(v_x) in units of E_R.
pub fn tunneling_energy(params: &LatticeParams, v_x: f64) -> Result<f64> {
    check_vx_range(v_x)?;
    let band = solve_bands(params, v_x, DEFAULT_PLANE_WAVES, DEFAULT_N_K)?;
    let (w, hw) = wannier_with_energy(&band, 0)?;
    // J = -int w(xi) (H w)(xi - 1) dxi; one site is POINTS_PER_SITE samples
    let s = POINTS_PER_SITE;
    let product: Vec<f64> = w.values[s..]
        .iter()
        .zip(&hw[..hw.len() - s])
        .map(|(a, b)| a * b)
        .collect();
    Ok(-trapezoid(&product, w.grid_step()))
}

/// On-site interaction energy U(v_x, v_y, v_z) in units of E_R.
pub fn onsite_energy(params: &LatticeParams, v_x: f64) -> Result<f64> {
    check_vx_range(v_x)?;
    let ix = quartic_integral(v_x)?;
    let iy = quartic_integral(params.transverse_depths.0)?;
    let iz = quartic_integral(params.transverse_depths.1)?;
    // g_3D / (a^3 E_R) = (8 / pi) (a_s / a)
    let prefactor =
        8.0 / std::f64::consts::PI * params.scattering_length / params.lattice_spacing;
    Ok(prefactor * ix * iy * iz)
}

#[derive(Debug, Clone)]
pub struct ConstitutiveTable {
    pub vx_grid: Vec<f64>,
    pub jx_values: Vec<f64>,
    pub u_values: Vec<f64>,
    pub ratio: Vec<f64>,
    /// (u_min, u_max) at v_x = 2 E_R and 13.5 E_R.
    pub bounds: (f64, f64),
    pub recoil_energy: f64,
    ratio_of_vx: MonotoneCubic,
    vx_of_ratio: MonotoneCubic,
    jx_of_ratio: MonotoneCubic,
}

impl ConstitutiveTable {
    fn from_samples(
        vx_grid: Vec<f64>,
        jx_values: Vec<f64>,
        u_values: Vec<f64>,
        recoil_energy: f64,
    ) -> Result<Self> {
        let ratio: Vec<f64> = u_values
            .iter()
            .zip(&jx_values)
            .map(|(u, j)| u / j)
            .collect();
        for i in 1..vx_grid.len() {
            if ratio[i] <= ratio[i - 1] || jx_values[i] >= jx_values[i - 1] || u_values[i] <= u_values[i - 1]
            {
                return Err(Error::NonMonotoneRatio { depth: vx_grid[i] });
            }
        }
        let bounds = (ratio[0], *ratio.last().unwrap());
        let ratio_of_vx = MonotoneCubic::new(vx_grid.clone(), ratio.clone())?;
        let vx_of_ratio = MonotoneCubic::new(ratio.clone(), vx_grid.clone())?;
        let jx_of_ratio = MonotoneCubic::new(ratio.clone(), jx_values.clone())?;
        Ok(Self {
            vx_grid,
            jx_values,
            u_values,
            ratio,
            bounds,
            recoil_energy,
            ratio_of_vx,
            vx_of_ratio,
            jx_of_ratio,
        })
    }

    /// u = U/J_x at longitudinal depth v_x (E_R).
    pub fn ratio_at(&self, v_x: f64) -> Result<f64> {
        check_vx_range(v_x)?;
        Ok(self.ratio_of_vx.eval(v_x))
    }

    /// Inverse map u -> v_x (E_R).
    pub fn invert(&self, u: f64) -> Result<f64> {
        self.check_control(u)?;
        Ok(self.vx_of_ratio.eval(u))
    }

    /// J_x in units of E_R as a function of the control u = U/J_x.
    pub fn jx_of_control(&self, u: f64) -> Result<f64> {
        self.check_control(u)?;
        Ok(self.jx_of_ratio.eval(u))
    }

    pub fn check_control(&self, u: f64) -> Result<()> {
        let (lo, hi) = self.bounds;
        let slack = 1e-9 * (hi - lo);
        if u < lo - slack || u > hi + slack {
            return Err(Error::ControlOutOfBounds {
                value: u,
                min: lo,
                max: hi,
            });
        }
        Ok(())
    }

    /// Serialize as the plain-text cache format.
    pub fn to_text(&self) -> String {
        let mut out = String::from("# vx_ER, Jx_ER, U_ER\n");
        for i in 0..self.vx_grid.len() {
            let _ = writeln!(
                out,
                "{:.12e} {:.12e} {:.12e}",
                self.vx_grid[i], self.jx_values[i], self.u_values[i]
            );
        }
        out
    }

    pub fn from_text(text: &str, recoil_energy: f64) -> Result<Self> {
        let mut vx = Vec::new();
        let mut jx = Vec::new();
        let mut u = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<f64> = line
                .split_whitespace()
                .map(|f| f.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| Error::Config(format!("bad table row `{line}`: {e}")))?;
            if fields.len() != 3 {
                return Err(Error::Config(format!("bad table row `{line}`")));
            }
            vx.push(fields[0]);
            jx.push(fields[1]);
            u.push(fields[2]);
        }
        Self::from_samples(vx, jx, u, recoil_energy)
    }
}

/// Sample the constitutive relations over [2, 13.5] E_R.
pub fn build_table(params: &LatticeParams, n_samples: usize) -> Result<ConstitutiveTable> {
    if n_samples < 50 {
        return Err(Error::InvalidArgument(format!(
            "n_samples = {n_samples} must be >= 50"
        )));
    }
    let vx_grid: Vec<f64> = (0..n_samples)
        .map(|i| VX_MIN + (VX_MAX - VX_MIN) * i as f64 / (n_samples - 1) as f64)
        .collect();
    let mut jx_values = Vec::with_capacity(n_samples);
    let mut u_values = Vec::with_capacity(n_samples);
    for &vx in &vx_grid {
        jx_values.push(tunneling_energy(params, vx)?);
        u_values.push(onsite_energy(params, vx)?);
    }
    ConstitutiveTable::from_samples(vx_grid, jx_values, u_values, params.recoil_energy)
}

/// Cached variant keyed by a content hash of the parameters. Recomputes only
/// on miss; the write is atomic (write to temp, then rename).
pub fn build_table_cached(
    params: &LatticeParams,
    n_samples: usize,
    cache_dir: &Path,
) -> Result<ConstitutiveTable> {
    let path = cache_path(params, n_samples, cache_dir);
    if let Ok(text) = std::fs::read_to_string(&path) {
        if let Ok(table) = ConstitutiveTable::from_text(&text, params.recoil_energy) {
            return Ok(table);
        }
    }
    let table = build_table(params, n_samples)?;
    std::fs::create_dir_all(cache_dir)?;
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, table.to_text())?;
    std::fs::rename(&tmp, &path)?;
    Ok(table)
}

pub fn cache_path(params: &LatticeParams, n_samples: usize, cache_dir: &Path) -> PathBuf {
    cache_dir.join(format!(
        "constitutive-{}.txt",
        params.content_hash(n_samples)
    ))
}

/// Total SI transfer duration T_SI = hbar * dt * sum_n 1 / J_x(u_n).
pub fn si_duration(table: &ConstitutiveTable, controls: &ControlGrid) -> Result<f64> {
    let mut inv_sum = 0.0;
    for &u in controls.values() {
        let jx = table.jx_of_control(u)? * table.recoil_energy;
        inv_sum += 1.0 / jx;
    }
    Ok(HBAR * controls.dt() * inv_sum)
}
