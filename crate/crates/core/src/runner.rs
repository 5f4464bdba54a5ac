//! Batch orchestration: multistart optimization over durations and seeds,
//! crash-safe persistence, and emission of analysis-ready figure data.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::grape::{
    self, ControlGrid, CostConfig, HomotopyStage, MpsEngine, OptimizeOptions, ReferenceShape,
    SeedSpec,
};
use crate::lattice::{self, ConstitutiveTable, LatticeParams};
use crate::mps::{Caps, Mps};
use crate::observables::MeritSeries;
use crate::tebd::{self, GateSet};

pub const JOB_SCHEMA: &str = "bhc-job-result v1";
pub const SUMMARY_SCHEMA: &str = "bhc-batch-summary v1";
pub const FIGURE_SCHEMA: &str = "bhc-figure v1";

/// Full run description. Every physical quantity carries its unit in the
/// field name: lattice depths in E_R, dt and T in simulation units (hbar/J).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub lattice: LatticeConfig,
    pub system: SystemConfig,
    pub states: StateConfig,
    pub caps: CapsConfig,
    /// Transfer durations T in simulation units.
    pub durations_sim: Vec<f64>,
    pub homotopy: Vec<HomotopyStage>,
    pub alpha: f64,
    pub gamma: f64,
    pub seeds: SeedConfig,
    pub output_dir: PathBuf,
    pub parallelism: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LatticeConfig {
    pub laser_wavelength_nm: f64,
    pub atom_mass_amu: f64,
    pub scattering_length_a0: f64,
    pub vy_er: f64,
    pub vz_er: f64,
    pub table_samples: usize,
}

impl Default for LatticeConfig {
    fn default() -> Self {
        Self {
            laser_wavelength_nm: 1064.0,
            atom_mass_amu: 87.0,
            scattering_length_a0: 101.0,
            vy_er: 20.0,
            vz_er: 20.0,
            table_samples: 60,
        }
    }
}

impl LatticeConfig {
    pub fn params(&self) -> Result<LatticeParams> {
        LatticeParams::new(
            self.laser_wavelength_nm * 1e-9,
            self.atom_mass_amu * lattice::ATOMIC_MASS,
            self.scattering_length_a0 * lattice::BOHR_RADIUS,
            (self.vy_er, self.vz_er),
        )
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SystemConfig {
    pub n_sites: usize,
    pub n_particles: usize,
    pub local_dim: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct StateConfig {
    /// |SF> is the ground state at this longitudinal depth (E_R).
    pub sf_depth_er: f64,
    /// |Mott> is the ground state at this longitudinal depth (E_R).
    pub mott_depth_er: f64,
}

impl Default for StateConfig {
    fn default() -> Self {
        Self {
            sf_depth_er: 3.0,
            mott_depth_er: 13.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CapsConfig {
    pub max_bond: usize,
    pub sv_threshold: f64,
}

impl Default for CapsConfig {
    fn default() -> Self {
        Self {
            max_bond: 200,
            sv_threshold: 1e-12,
        }
    }
}

impl CapsConfig {
    pub fn caps(&self) -> Caps {
        Caps::new(self.max_bond, self.sv_threshold)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SeedConfig {
    pub count: usize,
    pub master_seed: u64,
    pub n_fourier: usize,
    pub amplitude_scale: f64,
    pub frequency_range: (f64, f64),
    pub reference: ReferenceShape,
    pub clamp_endpoints: bool,
}

impl Default for SeedConfig {
    fn default() -> Self {
        Self {
            count: 20,
            master_seed: 1,
            n_fourier: 4,
            amplitude_scale: 2.0,
            frequency_range: (0.5, 4.0),
            reference: ReferenceShape::Geometric,
            clamp_endpoints: true,
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.system.n_sites < 2 {
            problems.push("system.n_sites must be >= 2".to_string());
        }
        if self.system.local_dim < 2 {
            problems.push("system.local_dim must be >= 2".to_string());
        }
        for depth in [self.states.sf_depth_er, self.states.mott_depth_er] {
            if !(lattice::VX_MIN..=lattice::VX_MAX).contains(&depth) {
                problems.push(format!(
                    "state depth {depth} E_R outside [{}, {}] E_R",
                    lattice::VX_MIN,
                    lattice::VX_MAX
                ));
            }
        }
        if self.durations_sim.iter().any(|&t| t <= 0.0) {
            problems.push("every duration must be positive".to_string());
        }
        if self.durations_sim.is_empty() {
            problems.push("at least one duration is required".to_string());
        }
        if self.homotopy.is_empty() {
            problems.push("at least one homotopy stage is required".to_string());
        }
        if self
            .homotopy
            .windows(2)
            .any(|w| w[1].dt > w[0].dt + 1e-12)
        {
            problems.push("homotopy stage dt values must be nonincreasing".to_string());
        }
        if self.parallelism == 0 {
            problems.push("parallelism must be >= 1".to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// Splittable per-job seed: adding durations or seeds never perturbs the
/// rng stream of existing jobs.
pub fn derive_job_seed(master: u64, t_index: usize, seed_index: usize) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    hasher.update((t_index as u64).to_le_bytes());
    hasher.update((seed_index as u64).to_le_bytes());
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is long enough"))
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct JobOutcome {
    pub schema: String,
    pub t_index: usize,
    pub duration_sim: f64,
    pub seed_index: usize,
    pub rng_seed: u64,
    /// "ok" or the error description of an isolated failure.
    pub status: String,
    pub final_fidelity: f64,
    pub final_cost: f64,
    pub t_si_seconds: f64,
    pub controls_dt: f64,
    pub controls: Vec<f64>,
    pub record_path: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SummaryRow {
    pub duration_sim: f64,
    pub best_fidelity: f64,
    pub best_seed_index: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BatchResult {
    pub schema: String,
    pub jobs: Vec<JobOutcome>,
    pub summary: Vec<SummaryRow>,
}

/// Everything shared read-only across jobs.
struct BatchContext {
    table: ConstitutiveTable,
    bounds: (f64, f64),
    u_sf: f64,
    u_mott: f64,
    initial: Mps,
    target: Mps,
}

fn prepare_context(config: &RunConfig) -> Result<BatchContext> {
    let params = config.lattice.params()?;
    let cache_dir = config.output_dir.join("cache");
    let table = lattice::build_table_cached(&params, config.lattice.table_samples, &cache_dir)?;
    let u_sf = table.ratio_at(config.states.sf_depth_er)?;
    let u_mott = table.ratio_at(config.states.mott_depth_er)?;
    let seed_occ = vec![1u8; config.system.n_sites];
    let caps = config.caps.caps();
    let initial = tebd::ground_state_imaginary(
        &seed_occ,
        config.system.local_dim,
        u_sf,
        &tebd::default_tau_schedule(),
        caps,
        500,
    )?;
    let target = tebd::ground_state_imaginary(
        &seed_occ,
        config.system.local_dim,
        u_mott,
        &tebd::default_tau_schedule(),
        caps,
        500,
    )?;
    Ok(BatchContext {
        bounds: table.bounds,
        table,
        u_sf,
        u_mott,
        initial,
        target,
    })
}

fn atomic_write(path: &Path, contents: &str) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)?;
    Ok(())
}

fn run_job(
    config: &RunConfig,
    ctx: &BatchContext,
    t_index: usize,
    seed_index: usize,
) -> JobOutcome {
    let duration = config.durations_sim[t_index];
    let rng_seed = derive_job_seed(config.seeds.master_seed, t_index, seed_index);
    let record_path = config
        .output_dir
        .join(format!("job_t{t_index}_s{seed_index}.jsonl"));
    let mut outcome = JobOutcome {
        schema: JOB_SCHEMA.to_string(),
        t_index,
        duration_sim: duration,
        seed_index,
        rng_seed,
        status: "ok".to_string(),
        final_fidelity: 0.0,
        final_cost: f64::INFINITY,
        t_si_seconds: 0.0,
        controls_dt: 0.0,
        controls: Vec::new(),
        record_path: record_path.to_string_lossy().into_owned(),
    };
    let mut attempt = || -> Result<()> {
        let dt0 = config.homotopy[0].dt;
        let n_t = ((duration / dt0).round() as usize).max(1) + 1;
        let spec = SeedSpec {
            u_start: ctx.u_sf,
            u_end: ctx.u_mott,
            reference: config.seeds.reference,
            n_fourier: config.seeds.n_fourier,
            amplitude_scale: config.seeds.amplitude_scale,
            frequency_range: config.seeds.frequency_range,
            rng_seed,
        };
        let seed = grape::generate_seed(&spec, n_t, dt0, ctx.bounds, config.seeds.clamp_endpoints)?;
        let cost_config = CostConfig::new(
            ctx.initial.clone(),
            ctx.target.clone(),
            config.alpha,
            config.gamma,
        );
        let local_dim = config.system.local_dim;
        let record = grape::optimize(
            |dt| Ok(MpsEngine::new(local_dim, dt)),
            &cost_config,
            seed,
            &config.homotopy,
            &OptimizeOptions::default(),
        )?;
        let mut lines = String::new();
        let header = serde_json::json!({
            "schema": "bhc-job v1",
            "t_index": t_index,
            "seed_index": seed_index,
            "rng_seed": rng_seed,
            "stage_statuses": record.stage_statuses,
        });
        lines.push_str(&serde_json::to_string(&header)?);
        lines.push('\n');
        for it in &record.iterations {
            lines.push_str(&serde_json::to_string(it)?);
            lines.push('\n');
        }
        atomic_write(&record_path, &lines)?;
        outcome.final_fidelity = record.final_fidelity;
        outcome.final_cost = record.final_cost;
        outcome.t_si_seconds = lattice::si_duration(&ctx.table, &record.final_controls)?;
        outcome.controls_dt = record.final_controls.dt();
        outcome.controls = record.final_controls.values().to_vec();
        Ok(())
    };
    if let Err(e) = attempt() {
        outcome.status = e.to_string();
    }
    outcome
}

fn summarize(config: &RunConfig, jobs: &[JobOutcome]) -> Vec<SummaryRow> {
    config
        .durations_sim
        .iter()
        .enumerate()
        .map(|(t_index, &duration)| {
            let best = jobs
                .iter()
                .filter(|j| j.t_index == t_index && j.status == "ok")
                .max_by(|a, b| a.final_fidelity.total_cmp(&b.final_fidelity));
            SummaryRow {
                duration_sim: duration,
                best_fidelity: best.map_or(f64::NAN, |j| j.final_fidelity),
                best_seed_index: best.map_or(usize::MAX, |j| j.seed_index),
            }
        })
        .collect()
}

/// Execute every (duration, seed) job with bounded parallelism, persisting
/// each record as it completes. Per-job failures are recorded, not fatal.
pub fn run_batch(config: &RunConfig) -> Result<BatchResult> {
    config.validate()?;
    std::fs::create_dir_all(&config.output_dir)?;
    // config echo: enough to re-run bit-identically
    atomic_write(
        &config.output_dir.join("config.json"),
        &serde_json::to_string_pretty(config)?,
    )?;
    let ctx = Arc::new(prepare_context(config)?);
    let jobs_spec: Vec<(usize, usize)> = (0..config.durations_sim.len())
        .flat_map(|t| (0..config.seeds.count).map(move |s| (t, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(config.parallelism)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    let mut jobs: Vec<JobOutcome> = pool.install(|| {
        jobs_spec
            .par_iter()
            .map(|&(t, s)| {
                let outcome = run_job(config, &ctx, t, s);
                // persist the per-job result immediately (crash safety)
                let path = config.output_dir.join(format!("job_t{t}_s{s}.result.json"));
                if let Ok(text) = serde_json::to_string_pretty(&outcome) {
                    let _ = atomic_write(&path, &text);
                }
                outcome
            })
            .collect()
    });
    jobs.sort_by_key(|j| (j.t_index, j.seed_index));
    let summary = summarize(config, &jobs);
    let batch = BatchResult {
        schema: SUMMARY_SCHEMA.to_string(),
        jobs,
        summary,
    };
    atomic_write(
        &config.output_dir.join("summary.json"),
        &serde_json::to_string_pretty(&batch)?,
    )?;
    Ok(batch)
}

/// Rebuild the batch summary purely from persisted per-job result files.
pub fn reconstruct_batch(config: &RunConfig) -> Result<BatchResult> {
    let mut jobs = Vec::new();
    for entry in std::fs::read_dir(&config.output_dir)? {
        let path = entry?.path();
        let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("");
        if name.starts_with("job_") && name.ends_with(".result.json") {
            let text = std::fs::read_to_string(&path)?;
            let outcome: JobOutcome = serde_json::from_str(&text)?;
            if outcome.schema != JOB_SCHEMA {
                return Err(Error::Config(format!(
                    "unexpected schema `{}` in {}",
                    outcome.schema,
                    path.display()
                )));
            }
            jobs.push(outcome);
        }
    }
    jobs.sort_by_key(|j| (j.t_index, j.seed_index));
    let summary = summarize(config, &jobs);
    Ok(BatchResult {
        schema: SUMMARY_SCHEMA.to_string(),
        jobs,
        summary,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FigureKind {
    FVsT,
    Controls,
    Occupations,
    Merit,
}

impl std::str::FromStr for FigureKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f_vs_t" => Ok(Self::FVsT),
            "controls" => Ok(Self::Controls),
            "occupations" => Ok(Self::Occupations),
            "merit" => Ok(Self::Merit),
            other => Err(Error::UnknownFigureKind(other.to_string())),
        }
    }
}

fn best_jobs(batch: &BatchResult) -> Vec<&JobOutcome> {
    batch
        .summary
        .iter()
        .enumerate()
        .filter_map(|(t_index, row)| {
            batch
                .jobs
                .iter()
                .find(|j| j.t_index == t_index && j.seed_index == row.best_seed_index)
        })
        .collect()
}

/// Serialize analysis-ready data for one figure family into `output_dir`.
pub fn emit_figure_data(
    config: &RunConfig,
    batch: &BatchResult,
    kind: FigureKind,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(&config.output_dir)?;
    let mut written = Vec::new();
    match kind {
        FigureKind::FVsT => {
            let mut out = format!("# schema: {FIGURE_SCHEMA}\nT_sim,T_si_s,seed_index,final_F\n");
            for j in batch.jobs.iter().filter(|j| j.status == "ok") {
                let _ = writeln!(
                    out,
                    "{:.12e},{:.12e},{},{:.12e}",
                    j.duration_sim, j.t_si_seconds, j.seed_index, j.final_fidelity
                );
            }
            let path = config.output_dir.join("figure_f_vs_t.csv");
            atomic_write(&path, &out)?;
            written.push(path);
        }
        FigureKind::Controls => {
            let params = config.lattice.params()?;
            let table = lattice::build_table_cached(
                &params,
                config.lattice.table_samples,
                &config.output_dir.join("cache"),
            )?;
            for j in best_jobs(batch) {
                let mut out = format!("# schema: {FIGURE_SCHEMA}\nt_sim,u,vx_er\n");
                for (n, &u) in j.controls.iter().enumerate() {
                    let _ = writeln!(
                        out,
                        "{:.12e},{:.12e},{:.12e}",
                        n as f64 * j.controls_dt,
                        u,
                        table.invert(u)?
                    );
                }
                let path = config
                    .output_dir
                    .join(format!("figure_controls_t{}.csv", j.t_index));
                atomic_write(&path, &out)?;
                written.push(path);
            }
        }
        FigureKind::Occupations | FigureKind::Merit => {
            let ctx = prepare_context(config)?;
            for j in best_jobs(batch) {
                let controls = ControlGrid::new(
                    j.controls_dt,
                    j.controls.clone(),
                    ctx.bounds,
                    config.seeds.clamp_endpoints,
                )?;
                let gates = GateSet::real_time(config.system.local_dim, j.controls_dt);
                let (mut series, reference) =
                    MeritSeries::start(&ctx.initial, &ctx.target)?;
                let mut state = ctx.initial.clone();
                let u = controls.values();
                for n in 0..u.len() - 1 {
                    tebd::step(&mut state, u[n], u[n + 1], &gates)?;
                    series.push(
                        (n + 1) as f64 * j.controls_dt,
                        &state,
                        &ctx.target,
                        &reference,
                    )?;
                }
                let (name, body) = match kind {
                    FigureKind::Occupations => (
                        format!("figure_occupations_t{}.csv", j.t_index),
                        series.occupations_csv(),
                    ),
                    _ => (format!("figure_merit_t{}.csv", j.t_index), series.to_csv()),
                };
                let path = config.output_dir.join(name);
                atomic_write(&path, &format!("# schema: {FIGURE_SCHEMA}\n{body}"))?;
                written.push(path);
            }
        }
    }
    Ok(written)
}
