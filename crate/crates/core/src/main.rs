use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use opfse::devices::load_fleet;
use opfse::network::load_feeder;
use opfse::runner::{analyze, load_inputs, run_simulation, write_outputs, RunnerError, SimulationConfig};
use opfse::scenario::{load_base_loads, load_timeseries, synth_profiles, write_timeseries, SynthParams};

#[derive(Parser)]
#[command(name = "opfse", version, about = "Joint OPF and state estimation simulator for radial feeders")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// Simulation config file.
    #[arg(long)]
    config: PathBuf,
    /// Override a config entry, e.g. `--set controller.eps_u=1e-3`.
    #[arg(long = "set", value_name = "SECTION.KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Run a closed-loop simulation and write trajectory.csv and summary.txt.
    Run {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Output directory (overrides output.dir).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Certify the theory on the frozen instance at analysis.time_index.
    Analyze {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Write the report here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate synthetic load and PV availability profiles.
    Synth {
        #[arg(long)]
        feeder: PathBuf,
        #[arg(long)]
        fleet: PathBuf,
        /// Base loads CSV (`node,p_pu,q_pu`).
        #[arg(long)]
        base_loads: PathBuf,
        #[arg(long)]
        duration_s: usize,
        #[arg(long, default_value_t = 1)]
        seed: u64,
        #[arg(long, default_value_t = SynthParams::default().start_hour)]
        start_hour: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a feeder, optionally with a fleet and time series, or a whole config.
    Validate {
        #[arg(long, conflicts_with_all = ["feeder", "fleet", "timeseries"])]
        config: Option<PathBuf>,
        #[arg(long, required_unless_present = "config")]
        feeder: Option<PathBuf>,
        #[arg(long)]
        fleet: Option<PathBuf>,
        #[arg(long, requires = "fleet")]
        timeseries: Option<PathBuf>,
    },
}

fn fail(e: RunnerError) -> ExitCode {
    eprintln!("error: {e}");
    if e.is_validation() {
        ExitCode::from(1)
    } else {
        ExitCode::from(2)
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(e),
    }
}

fn execute(cmd: Command) -> Result<(), RunnerError> {
    match cmd {
        Command::Run { cfg, out } => {
            let config = SimulationConfig::load(&cfg.config, &cfg.overrides)?;
            let dir = out.or_else(|| config.out_dir.clone()).unwrap_or_else(|| PathBuf::from("."));
            let result = run_simulation(&config)?;
            let n = result.final_state.n();
            write_outputs(&dir, &result, n)?;
            for (k, v) in &result.summary {
                if !k.starts_with("node_") {
                    println!("{k}={v}");
                }
            }
            Ok(())
        }
        Command::Analyze { cfg, out } => {
            let config = SimulationConfig::load(&cfg.config, &cfg.overrides)?;
            let report = analyze(&config)?.join("\n") + "\n";
            match out {
                Some(p) => std::fs::write(&p, report)
                    .map_err(|source| RunnerError::Output { path: p.display().to_string(), source }),
                None => {
                    print!("{report}");
                    Ok(())
                }
            }
        }
        Command::Synth { feeder, fleet, base_loads, duration_s, seed, start_hour, out } => {
            let f = load_feeder(&feeder)?;
            let units = load_fleet(&fleet)?;
            let base = load_base_loads(&base_loads, f.n())?;
            let params = SynthParams { start_hour, ..SynthParams::default() };
            let ts = synth_profiles(&base, &units, duration_s, seed, &params);
            write_timeseries(&out, &ts)?;
            Ok(())
        }
        Command::Validate { config, feeder, fleet, timeseries } => {
            if let Some(c) = config {
                let cfg = SimulationConfig::load(&c, &[])?;
                let inputs = load_inputs(&cfg)?;
                println!("ok: {} nodes, {} DERs, {} steps", inputs.feeder.n(), inputs.fleet.len(), inputs.series.len());
                return Ok(());
            }
            let f = load_feeder(feeder.expect("required by clap"))?;
            let mut msg = format!("ok: {} nodes", f.n());
            if let Some(fl) = fleet {
                let units = load_fleet(&fl)?;
                for u in &units {
                    if u.node == 0 || u.node > f.n() {
                        return Err(opfse::devices::DeviceError::NodeOutOfRange { node: u.node, n: f.n() }.into());
                    }
                }
                msg += &format!(", {} DERs", units.len());
                if let Some(ts) = timeseries {
                    let nodes: Vec<usize> = units.iter().map(|u| u.node).collect();
                    let series = load_timeseries(&ts, f.n(), &nodes)?;
                    msg += &format!(", {} steps", series.len());
                }
            }
            println!("{msg}");
            Ok(())
        }
    }
}
