//! `stableflow`: train, verify, evaluate and roll out stable policies.
//! Machine-readable JSON goes to stdout, progress and tables to stderr.
//! Exit codes are listed in [`exit`].

mod commands;
mod exit;
mod obs;

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use stableflow::rollout::Integrator;
use stableflow::trainer::NetSpec;
use stableflow_service::ServiceConfig;

use crate::obs::ObsArg;

#[derive(Parser)]
#[command(name = "stableflow", version, about = "Stable dynamical-system policies from demonstrations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Comma-separated coordinates.
#[derive(Clone, Debug)]
struct Coords(Vec<f64>);

fn coords(s: &str) -> Result<Coords, String> {
    floats(s).map(Coords)
}

fn floats(s: &str) -> Result<Vec<f64>, String> {
    s.split(',')
        .map(|v| v.trim().parse::<f64>().map_err(|_| format!("bad number `{v}`")))
        .collect()
}

fn pair(s: &str) -> Result<[f64; 2], String> {
    match floats(s)?[..] {
        [a, b] => Ok([a, b]),
        _ => Err(format!("expected two comma-separated numbers, got `{s}`")),
    }
}

fn resolution(s: &str) -> Result<[usize; 2], String> {
    let v: Vec<usize> = s
        .split(',')
        .map(|p| p.trim().parse().map_err(|_| format!("bad resolution `{s}`")))
        .collect::<Result<_, _>>()?;
    match v[..] {
        [n] => Ok([n, n]),
        [nx, ny] => Ok([nx, ny]),
        _ => Err(format!("bad resolution `{s}`")),
    }
}

/// `t:dx,dy,...`
fn perturbation(s: &str) -> Result<(f64, Vec<f64>), String> {
    let (t, d) = s.split_once(':').ok_or_else(|| format!("expected t:dx,dy, got `{s}`"))?;
    Ok((t.parse().map_err(|_| format!("bad time `{t}`"))?, floats(d)?))
}

#[derive(Subcommand)]
enum Command {
    /// Fit a policy to a trajectory dataset and write a checkpoint.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// TrainConfig JSON; flags override its fields.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        systems: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        /// `mlp[:w,..]` or `conv[:w,..]`.
        #[arg(long, value_parser = |s: &str| s.parse::<NetSpec>().map_err(|e| e.to_string()))]
        net: Option<NetSpec>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        init_skew: Option<f64>,
        /// Moving-average window applied to the demos before training.
        #[arg(long)]
        smooth: Option<usize>,
    },
    /// Integrate the closed loop from an initial state.
    Rollout {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long, allow_hyphen_values = true, value_parser = coords)]
        x0: Coords,
        /// `static:<payload>` or `switch:<t>:<payload>`; payloads are `none`,
        /// `onehot:k`, `vector:a,b,..` or `image:<png>`.
        #[arg(long)]
        obs: Vec<ObsArg>,
        /// Displacement `t:dx,dy,..` applied at time t; repeatable.
        #[arg(long, allow_hyphen_values = true, value_parser = perturbation)]
        perturb: Vec<(f64, Vec<f64>)>,
        /// Defaults to the training demos' step.
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long, default_value_t = 10.0)]
        horizon: f64,
        #[arg(long, default_value = "rk4", value_parser = |s: &str| s.parse::<Integrator>().map_err(|e| e.to_string()))]
        method: Integrator,
        /// Maximum commanded speed.
        #[arg(long)]
        clamp: Option<f64>,
        /// Record as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Record as JSON, including events.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Print the stability certificate; exit 5 when it fails.
    Verify {
        #[arg(long)]
        ckpt: PathBuf,
    },
    /// Reproduction error and convergence on a dataset.
    Eval {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Sample the velocity field of a planar policy on a grid.
    Field {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        obs: Option<ObsArg>,
        #[arg(long, allow_hyphen_values = true, value_parser = pair)]
        lo: [f64; 2],
        #[arg(long, allow_hyphen_values = true, value_parser = pair)]
        hi: [f64; 2],
        #[arg(long, default_value = "20", value_parser = resolution)]
        res: [usize; 2],
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the HTTP service.
    Serve {
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: SocketAddr,
        #[arg(long, default_value = "stableflow-data")]
        data_dir: PathBuf,
        #[arg(long, default_value_t = stableflow_service::DEFAULT_MAX_JOBS)]
        max_jobs: usize,
        /// Allowed browser origin; any when omitted.
        #[arg(long)]
        cors_origin: Option<String>,
    },
    /// Write a synthetic demonstration dataset.
    Fixture {
        /// `line`, `sine`, `curve`, `onehot` or `images`.
        #[arg(long)]
        task: String,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        dt: Option<f64>,
        #[arg(long)]
        rate: Option<f64>,
        /// Sign image side for `images`.
        #[arg(long, default_value_t = 32)]
        size: usize,
    },
    /// Write a synthetic sign image as PNG.
    Sign {
        /// `line`, `sine` or `curve`.
        #[arg(long)]
        shape: String,
        #[arg(long, default_value_t = 32)]
        size: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cmd: Command) -> Result<u8, exit::CliError> {
    match cmd {
        Command::Train { data, out, config, systems, epochs, lr, seed, net, batch, init_skew, smooth } => {
            commands::train(commands::TrainArgs {
                data,
                out,
                config,
                systems,
                epochs,
                lr,
                seed,
                net,
                batch,
                init_skew,
                smooth,
            })
        }
        Command::Rollout { ckpt, x0, obs, perturb, dt, horizon, method, clamp, out, json } => {
            commands::rollout(commands::RolloutArgs { ckpt, x0: x0.0, obs, perturb, dt, horizon, method, clamp, out, json })
        }
        Command::Verify { ckpt } => commands::verify(&ckpt),
        Command::Eval { ckpt, data } => commands::eval(&ckpt, &data),
        Command::Field { ckpt, obs, lo, hi, res, out } => {
            commands::field(commands::FieldArgs { ckpt, obs, lo, hi, res, out })
        }
        Command::Serve { bind, data_dir, max_jobs, cors_origin } => {
            let config = ServiceConfig {
                max_concurrent_jobs: max_jobs,
                cors_origin,
                ..ServiceConfig::new(data_dir)
            };
            commands::serve(bind, config)
        }
        Command::Fixture { task, out, samples, dt, rate, size } => {
            commands::fixture(commands::FixtureArgs { task, out, samples, dt, rate, size })
        }
        Command::Sign { shape, size, out } => commands::sign(&shape, size, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("STABLEFLOW_LOG", "warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code)
        }
    }
}
