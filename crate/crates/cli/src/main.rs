//! Command-line front end: constitutive tables, oracle ground states,
//! propagation, optimization, batch orchestration, and figure-data emission.
//!
//! Exit codes: 0 success, 1 runtime failure, 2 validation failure,
//! 3 partial batch failure.

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::Arc;

use clap::{Parser, Subcommand};

use bhc_core::error::Error;
use bhc_core::fock::{self, FockBasis};
use bhc_core::grape::{self, CostConfig, MpsEngine, OptimizeOptions, SeedSpec};
use bhc_core::lattice;
use bhc_core::observables::MeritSeries;
use bhc_core::runner::{self, FigureKind, RunConfig};
use bhc_core::tebd::{self, GateSet};

const EXIT_RUNTIME: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_PARTIAL: u8 = 3;

#[derive(Parser)]
#[command(
    name = "bhc",
    about = "Optimal control of the 1D Bose-Hubbard superfluid-to-Mott transfer"
)]
struct Cli {
    /// Run configuration file (TOML or JSON).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the configured output directory.
    #[arg(long, global = true)]
    output_dir: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Emit the v_x -> (J_x, U) constitutive table.
    LatticeTable {
        /// Number of depth samples over the supported range.
        #[arg(long, default_value_t = 60)]
        samples: usize,
        /// Write to this file instead of stdout.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Emit the exact-diagonalization superfluid and Mott oracle states.
    GroundStates,
    /// Propagate the seed reference ramp and emit the merit time series.
    Propagate {
        /// Transfer duration in simulation units.
        #[arg(long)]
        duration: f64,
        /// Time step in simulation units.
        #[arg(long, default_value_t = 0.025)]
        dt: f64,
    },
    /// Optimize a single (duration, seed) job.
    Optimize {
        /// Transfer duration in simulation units.
        #[arg(long)]
        duration: f64,
        /// Seed index fed into the splittable rng scheme.
        #[arg(long, default_value_t = 0)]
        seed_index: usize,
    },
    /// Run the full multistart batch from the configuration.
    Batch,
    /// Serialize figure data from a completed batch.
    Emit {
        /// One of: f_vs_t, controls, occupations, merit.
        #[arg(long)]
        kind: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig, Error> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Config("--config is required for this subcommand".into()))?;
    let text = std::fs::read_to_string(path)?;
    let mut config: RunConfig = if path.extension().and_then(|e| e.to_str()) == Some("json") {
        serde_json::from_str(&text)?
    } else {
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?
    };
    if let Some(dir) = &cli.output_dir {
        config.output_dir = dir.clone();
    }
    config.validate()?;
    Ok(config)
}

fn is_validation_error(e: &Error) -> bool {
    matches!(
        e,
        Error::Config(_)
            | Error::InvalidArgument(_)
            | Error::UnknownFigureKind(_)
            | Error::DepthOutOfRange { .. }
            | Error::ControlOutOfBounds { .. }
    )
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            if is_validation_error(&e) {
                ExitCode::from(EXIT_VALIDATION)
            } else {
                ExitCode::from(EXIT_RUNTIME)
            }
        }
    }
}

fn run(cli: &Cli) -> Result<ExitCode, Error> {
    match &cli.command {
        Command::LatticeTable { samples, output } => {
            let params = match &cli.config {
                Some(_) => load_config(cli)?.lattice.params()?,
                None => lattice::LatticeParams::rubidium_87(),
            };
            let table = lattice::build_table(&params, *samples)?;
            match output {
                Some(path) => std::fs::write(path, table.to_text())?,
                None => print!("{}", table.to_text()),
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::GroundStates => {
            let config = load_config(cli)?;
            let params = config.lattice.params()?;
            let table = lattice::build_table(&params, config.lattice.table_samples)?;
            let basis = Arc::new(FockBasis::with_max_occupation(
                config.system.n_sites,
                config.system.n_particles,
                config.system.local_dim - 1,
            )?);
            std::fs::create_dir_all(&config.output_dir)?;
            for (name, depth) in [
                ("superfluid", config.states.sf_depth_er),
                ("mott", config.states.mott_depth_er),
            ] {
                let u = table.ratio_at(depth)?;
                let (energy, state) = fock::ground_state(&basis, u)?;
                let path = config.output_dir.join(format!("{name}_state.txt"));
                let body = format!(
                    "# schema: bhc-state v1\n# depth_er {depth}\n# u {u:.12e}\n# energy {energy:.12e}\n{}",
                    state.to_text()
                );
                std::fs::write(&path, body)?;
                println!("{name}: u = {u:.6}, energy = {energy:.8} -> {}", path.display());
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Propagate { duration, dt } => {
            let config = load_config(cli)?;
            let params = config.lattice.params()?;
            let table = lattice::build_table(&params, config.lattice.table_samples)?;
            let u_sf = table.ratio_at(config.states.sf_depth_er)?;
            let u_mott = table.ratio_at(config.states.mott_depth_er)?;
            let n_t = ((duration / dt).round() as usize).max(1) + 1;
            let spec = SeedSpec {
                u_start: u_sf,
                u_end: u_mott,
                reference: config.seeds.reference,
                n_fourier: 0,
                amplitude_scale: 0.0,
                frequency_range: (0.0, 0.0),
                rng_seed: 0,
            };
            let controls = grape::generate_seed(&spec, n_t, *dt, table.bounds, true)?;
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
            let gates = GateSet::real_time(config.system.local_dim, *dt);
            let (mut series, reference) = MeritSeries::start(&initial, &target)?;
            let mut state = initial;
            let u = controls.values().to_vec();
            for n in 0..u.len() - 1 {
                tebd::step(&mut state, u[n], u[n + 1], &gates)?;
                series.push((n + 1) as f64 * dt, &state, &target, &reference)?;
            }
            std::fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("propagate_merit.csv");
            std::fs::write(&path, series.to_csv())?;
            println!(
                "final F = {:.6}, rho = {:.6}, eta = {:.6} -> {}",
                series.fidelity.last().unwrap(),
                series.rho.last().unwrap(),
                series.eta.last().unwrap(),
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Optimize {
            duration,
            seed_index,
        } => {
            let mut config = load_config(cli)?;
            config.durations_sim = vec![*duration];
            config.seeds.count = *seed_index + 1;
            let params = config.lattice.params()?;
            let table = lattice::build_table(&params, config.lattice.table_samples)?;
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
            let dt0 = config.homotopy[0].dt;
            let n_t = ((duration / dt0).round() as usize).max(1) + 1;
            let spec = SeedSpec {
                u_start: u_sf,
                u_end: u_mott,
                reference: config.seeds.reference,
                n_fourier: config.seeds.n_fourier,
                amplitude_scale: config.seeds.amplitude_scale,
                frequency_range: config.seeds.frequency_range,
                rng_seed: runner::derive_job_seed(config.seeds.master_seed, 0, *seed_index),
            };
            let seed = grape::generate_seed(
                &spec,
                n_t,
                dt0,
                table.bounds,
                config.seeds.clamp_endpoints,
            )?;
            let cost_config = CostConfig::new(initial, target, config.alpha, config.gamma);
            let local_dim = config.system.local_dim;
            let record = grape::optimize(
                |dt| Ok(MpsEngine::new(local_dim, dt)),
                &cost_config,
                seed,
                &config.homotopy,
                &OptimizeOptions::default(),
            )?;
            let t_si = lattice::si_duration(&table, &record.final_controls)?;
            std::fs::create_dir_all(&config.output_dir)?;
            let path = config.output_dir.join("optimize_controls.csv");
            let mut csv = String::from("t_sim,u,vx_er\n");
            for (n, &u) in record.final_controls.values().iter().enumerate() {
                use std::fmt::Write as _;
                let _ = writeln!(
                    csv,
                    "{:.12e},{:.12e},{:.12e}",
                    n as f64 * record.final_controls.dt(),
                    u,
                    table.invert(u)?
                );
            }
            std::fs::write(&path, csv)?;
            println!(
                "final F = {:.8}, J = {:.3e}, T_SI = {:.3} ms -> {}",
                record.final_fidelity,
                record.final_cost,
                t_si * 1e3,
                path.display()
            );
            Ok(ExitCode::SUCCESS)
        }
        Command::Batch => {
            let config = load_config(cli)?;
            let batch = runner::run_batch(&config)?;
            let failed = batch.jobs.iter().filter(|j| j.status != "ok").count();
            for row in &batch.summary {
                println!(
                    "T = {:.2}: best F = {:.8} (seed {})",
                    row.duration_sim, row.best_fidelity, row.best_seed_index
                );
            }
            if failed > 0 {
                eprintln!("{failed} of {} jobs failed", batch.jobs.len());
                return Ok(ExitCode::from(EXIT_PARTIAL));
            }
            Ok(ExitCode::SUCCESS)
        }
        Command::Emit { kind } => {
            let config = load_config(cli)?;
            let kind = FigureKind::from_str(kind)?;
            let batch = runner::reconstruct_batch(&config)?;
            let files = runner::emit_figure_data(&config, &batch, kind)?;
            for f in files {
                println!("{}", f.display());
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}
