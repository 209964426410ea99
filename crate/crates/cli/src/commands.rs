use std::io::Write;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};

use serde_json::{json, Value};
use stableflow::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint};
use stableflow::dataset::{save_trajectories, Dataset};
use stableflow::eval::multitask_eval;
use stableflow::fixtures::{multitask_images, multitask_onehot, sign_image, single_task, DemoSpec, Shape, MULTITASK_RATE};
use stableflow::rollout::{
    convergence_stats, integrate, vector_field_grid, Integrator, ObservationProvider, PerturbationEvent,
    RolloutOptions, ScheduledObservation,
};
use stableflow::trainer::{train_with, NetSpec, TrainConfig};
use stableflow::{verify_certificate, Execution, StateVector};

use crate::exit::{CliError, NOT_CERTIFIED, OK};
use crate::obs::{default_observation, resolve, save_png, ObsArg};

pub struct TrainArgs {
    pub data: PathBuf,
    pub out: PathBuf,
    pub config: Option<PathBuf>,
    pub systems: Option<usize>,
    pub epochs: Option<usize>,
    pub lr: Option<f64>,
    pub seed: Option<u64>,
    pub net: Option<NetSpec>,
    pub batch: Option<usize>,
    pub init_skew: Option<f64>,
    pub smooth: Option<usize>,
}

fn write_file(path: &Path, contents: &str) -> Result<(), CliError> {
    std::fs::write(path, contents).map_err(|e| CliError::io(&format!("writing {}", path.display()), e))
}

fn print_json(v: &Value) {
    // A closed pipe downstream is not an error worth reporting.
    let _ = writeln!(std::io::stdout().lock(), "{}", serde_json::to_string_pretty(v).expect("plain data"));
}

fn with_path<T>(path: &Path, r: stableflow::Result<T>) -> Result<T, CliError> {
    r.map_err(|e| {
        let mut err = CliError::from(e);
        err.message = format!("{}: {}", path.display(), err.message);
        err
    })
}

fn open_checkpoint(path: &Path) -> Result<Checkpoint, CliError> {
    with_path(path, load_checkpoint(path))
}

fn open_dataset(path: &Path) -> Result<Dataset, CliError> {
    with_path(path, Dataset::load(path))
}

pub fn train(a: TrainArgs) -> Result<u8, CliError> {
    let mut config = match &a.config {
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| CliError::io(&format!("reading {}", path.display()), e))?;
            serde_json::from_str::<TrainConfig>(&text)
                .map_err(|e| CliError::invalid(format!("{}: {e}", path.display())))?
        }
        None => TrainConfig::default(),
    };
    if let Some(v) = a.systems {
        config.n_systems = v;
    }
    if let Some(v) = a.epochs {
        config.epochs = v;
    }
    if let Some(v) = a.lr {
        config.learning_rate = v;
    }
    if let Some(v) = a.seed {
        config.seed = v;
    }
    if let Some(v) = a.batch {
        config.batch_size = v;
    }
    if let Some(v) = a.init_skew {
        config.init_skew = v;
    }
    if a.net.is_some() {
        config.net = a.net;
    }
    config.validate()?;

    let mut dataset = open_dataset(&a.data)?;
    if let Some(w) = a.smooth {
        let trajs = dataset.trajectories().iter().map(|t| t.smoothed(w)).collect::<Result<Vec<_>, _>>()?;
        dataset = Dataset::new(trajs)?;
    }
    let epochs = config.epochs;
    let ckpt = train_with(&dataset, &config, Execution::default(), |r| {
        eprintln!("epoch {:>5}/{epochs}  loss {:.6e}", r.epoch + 1, r.loss);
    })?;
    with_path(&a.out, save_checkpoint(&ckpt, &a.out))?;
    let cert = verify_certificate(&ckpt.policy)?;
    print_json(&json!({
        "checkpoint": a.out,
        "final_loss": ckpt.meta.final_loss,
        "epochs": ckpt.meta.epochs,
        "n_systems": ckpt.policy.n_systems(),
        "parameters": ckpt.policy.num_parameters(),
        "attractor": ckpt.policy.attractor(),
        "dataset_fingerprint": ckpt.meta.dataset_fingerprint,
        "certificate": cert,
    }));
    Ok(OK)
}

pub struct RolloutArgs {
    pub ckpt: PathBuf,
    pub x0: Vec<f64>,
    pub obs: Vec<ObsArg>,
    pub perturb: Vec<(f64, Vec<f64>)>,
    pub dt: Option<f64>,
    pub horizon: f64,
    pub method: Integrator,
    pub clamp: Option<f64>,
    pub out: Option<PathBuf>,
    pub json: Option<PathBuf>,
}

pub fn rollout(a: RolloutArgs) -> Result<u8, CliError> {
    let ckpt = open_checkpoint(&a.ckpt)?;
    let policy = &ckpt.policy;
    let mut initial = None;
    let mut switches = Vec::new();
    for arg in &a.obs {
        match arg {
            ObsArg::Static(p) if initial.is_none() => initial = Some(resolve(p, policy)?),
            ObsArg::Static(_) => return Err(CliError::invalid("at most one static observation")),
            ObsArg::Switch(t, p) => switches.push(ScheduledObservation { time: *t, observation: resolve(p, policy)? }),
        }
    }
    switches.sort_by(|x, y| x.time.total_cmp(&y.time));
    let initial = initial.unwrap_or_else(|| default_observation(policy));
    let x0 = StateVector::new(a.x0, initial)?;
    let provider = ObservationProvider::scheduled(switches)?;
    let perturbations = a
        .perturb
        .into_iter()
        .map(|(t, d)| PerturbationEvent::new(t, d))
        .collect::<Result<Vec<_>, _>>()?;
    let options = RolloutOptions {
        dt: a.dt.unwrap_or(ckpt.meta.demo_dt),
        horizon: a.horizon,
        method: a.method,
        clamp: a.clamp,
        stop_on_convergence: false,
    };
    let record = integrate(policy, &x0, &provider, &perturbations, &options)?;
    let stats = convergence_stats(&record)?;
    if let Some(path) = &a.out {
        write_file(path, &record.to_csv())?;
    }
    if let Some(path) = &a.json {
        write_file(path, &record.to_json())?;
    }
    print_json(&json!({
        "converged": stats.converged,
        "convergence_time": stats.convergence_time,
        "lyapunov_violations": stats.lyapunov_violations,
        "final_error": stats.final_error,
        "final_state": record.final_state(),
        "steps": record.len(),
        "events": record.events,
    }));
    Ok(OK)
}

pub fn verify(ckpt: &Path) -> Result<u8, CliError> {
    let ckpt = open_checkpoint(ckpt)?;
    let cert = verify_certificate(&ckpt.policy)?;
    print_json(&serde_json::to_value(&cert).expect("plain data"));
    if cert.verdict {
        Ok(OK)
    } else {
        eprintln!("certificate failed: some system has a non-positive definite symmetric part");
        Ok(NOT_CERTIFIED)
    }
}

pub fn eval(ckpt: &Path, data: &Path) -> Result<u8, CliError> {
    let ckpt = open_checkpoint(ckpt)?;
    let dataset = open_dataset(data)?;
    let report = multitask_eval(&ckpt.policy, &dataset, Execution::default())?;
    eprint!("{}", report.table());
    print_json(&json!({
        "max_normalized_rmse": report.max_normalized_rmse(),
        "tasks": report.tasks,
        "weight_separation": report.weight_separation,
    }));
    Ok(OK)
}

pub struct FieldArgs {
    pub ckpt: PathBuf,
    pub obs: Option<ObsArg>,
    pub lo: [f64; 2],
    pub hi: [f64; 2],
    pub res: [usize; 2],
    pub out: PathBuf,
}

pub fn field(a: FieldArgs) -> Result<u8, CliError> {
    let ckpt = open_checkpoint(&a.ckpt)?;
    let obs = match &a.obs {
        Some(ObsArg::Static(p)) => resolve(p, &ckpt.policy)?,
        Some(ObsArg::Switch(..)) => return Err(CliError::invalid("field takes a static observation")),
        None => default_observation(&ckpt.policy),
    };
    let grid = vector_field_grid(
        &ckpt.policy,
        &obs,
        [(a.lo[0], a.hi[0]), (a.lo[1], a.hi[1])],
        a.res,
        Execution::default(),
    )?;
    write_file(&a.out, &grid.to_csv())?;
    print_json(&json!({"out": a.out, "resolution": grid.resolution, "samples": grid.samples.len()}));
    Ok(OK)
}

pub fn serve(bind: SocketAddr, config: stableflow_service::ServiceConfig) -> Result<u8, CliError> {
    let rt = tokio::runtime::Runtime::new().map_err(|e| CliError::io("starting runtime", e))?;
    rt.block_on(stableflow_service::serve(&config, bind))
        .map_err(|e| CliError::io("serving", e))?;
    Ok(OK)
}

pub struct FixtureArgs {
    pub task: String,
    pub out: PathBuf,
    pub samples: Option<usize>,
    pub dt: Option<f64>,
    pub rate: Option<f64>,
    pub size: usize,
}

pub fn fixture(a: FixtureArgs) -> Result<u8, CliError> {
    let multi = matches!(a.task.as_str(), "onehot" | "images");
    let defaults = DemoSpec::default();
    let spec = DemoSpec {
        samples: a.samples.unwrap_or(defaults.samples),
        dt: a.dt.unwrap_or(defaults.dt),
        rate: a.rate.unwrap_or(if multi { MULTITASK_RATE } else { defaults.rate }),
        ..defaults
    };
    let dataset = match a.task.as_str() {
        "onehot" => multitask_onehot(&spec)?,
        "images" => multitask_images(&spec, a.size)?,
        shape => single_task(shape.parse::<Shape>()?, &spec)?,
    };
    with_path(&a.out, save_trajectories(&a.out, dataset.trajectories()))?;
    print_json(&json!({
        "out": a.out,
        "trajectories": dataset.trajectories().len(),
        "samples": dataset.samples().len(),
        "attractor": dataset.attractor(),
    }));
    Ok(OK)
}

pub fn sign(shape: &str, size: usize, out: &Path) -> Result<u8, CliError> {
    let img = sign_image(shape.parse()?, size)?;
    save_png(&img, out)?;
    print_json(&json!({"out": out, "size": size}));
    Ok(OK)
}
