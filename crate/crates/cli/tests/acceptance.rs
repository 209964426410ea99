//! End-to-end acceptance run. Prints one `criterion N: PASS|FAIL` line per
//! criterion and exits nonzero if any fails.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::DMatrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::Value;
use stableflow::autodiff::{grad_check, NodeId, Tape, Tensor};
use stableflow::checkpoint::{encode_hex, load_checkpoint, save_checkpoint, Checkpoint};
use stableflow::dataset::{save_trajectories, Dataset, Sample};
use stableflow::eval::{evaluate, multitask_eval};
use stableflow::fixtures::{
    isotropic_policy, multitask_images, multitask_onehot, random_policy, sign_image, single_task, DemoSpec,
    RandomPolicySpec, Shape, MULTITASK_RATE,
};
use stableflow::policy::DEFAULT_DIAG_FLOOR;
use stableflow::rollout::{
    convergence_stats, integrate, ObservationProvider, PerturbationEvent, RolloutOptions, ScheduledObservation,
};
use stableflow::trainer::{imitation_loss, init_params, loss_and_gradient, train, train_with, TrainConfig};
use stableflow::weightnet::{WeightNetConfig, WeightNetParams};
use stableflow::{
    lyapunov_rate, reconstruct_a, verify_certificate, ElementaryDs, Execution, Matrix, Observation, PolicyParams,
    StateVector,
};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($msg:tt)+) => {
        if !$cond {
            return Err(format!($($msg)+));
        }
    };
}

struct Ctx {
    dir: tempfile::TempDir,
    sine: Option<Checkpoint>,
    images: Option<(Checkpoint, Dataset)>,
}

fn training_config() -> TrainConfig {
    TrainConfig { epochs: 1000, learning_rate: 3e-3, ..TrainConfig::default() }
}

fn elapsed_within(start: Instant, limit: Duration, what: &str) -> Result<f64, String> {
    let secs = start.elapsed().as_secs_f64();
    ensure!(start.elapsed() < limit, "{what} took {secs:.1}s, limit {}s", limit.as_secs());
    Ok(secs)
}

fn random_raw_policy(rng: &mut ChaCha8Rng, d: usize, n: usize) -> PolicyParams {
    let systems = (0..n)
        .map(|_| {
            let mut raw = Matrix::zeros(d, d);
            let mut c = Matrix::zeros(d, d);
            for i in 0..d {
                for j in 0..d {
                    c.as_mut_slice()[i * d + j] = rng.random_range(-2.0..2.0);
                    if j < i {
                        raw.as_mut_slice()[i * d + j] = rng.random_range(-1.0..1.0);
                    } else if j == i {
                        raw.as_mut_slice()[i * d + j] = rng.random_range(-3.0..3.0);
                    }
                }
            }
            ElementaryDs::new(raw, c).unwrap()
        })
        .collect();
    let net = WeightNetParams::init(WeightNetConfig::vector(d, 0, vec![], n), rng).unwrap();
    PolicyParams::new(systems, net, vec![0.0; d], DEFAULT_DIAG_FLOOR).unwrap()
}

fn oracle_min_eig(a: &Matrix) -> f64 {
    let d = a.rows();
    let m = DMatrix::from_row_slice(d, d, a.as_slice());
    let sym = (&m + m.transpose()) * 0.5;
    sym.symmetric_eigen().eigenvalues.min()
}

fn criterion_1(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = f64::INFINITY;
    let mut max_gap: f64 = 0.0;
    for k in 0..1000 {
        let d = [1, 2, 3, 6][k % 4];
        let n = rng.random_range(1..=8);
        let p = random_raw_policy(&mut rng, d, n);
        let cert = verify_certificate(&p).map_err(|e| e.to_string())?;
        ensure!(cert.verdict, "draw {k} (d={d}, N={n}) not certified: {:?}", cert.per_system_min_eig);
        for (sys, &ev) in p.systems().iter().zip(&cert.per_system_min_eig) {
            ensure!(ev > 0.0, "draw {k}: eigenvalue {ev}");
            let oracle = oracle_min_eig(&reconstruct_a(sys, p.diag_floor()).unwrap());
            max_gap = max_gap.max((ev - oracle).abs());
            worst = worst.min(ev);
        }
    }
    ensure!(max_gap < 1e-9, "eigen-solver disagrees with oracle by {max_gap:e}");
    let secs = elapsed_within(start, Duration::from_secs(10), "certificate sweep")?;
    Ok(format!("1000 draws certified, min eig {worst:.3e}, oracle gap {max_gap:.1e}, {secs:.1}s"))
}

fn criterion_2(_: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut checked = 0;
    let mut policies = Vec::new();
    for k in 0..100 {
        let d = [1, 2, 3, 6][k % 4];
        let p = random_policy(&RandomPolicySpec::new(d, rng.random_range(1..=8)), &mut rng).unwrap();
        for _ in 0..100 {
            let x: Vec<f64> = (0..d).map(|_| rng.random_range(-3.0..3.0)).collect();
            let e: f64 = x.iter().zip(p.attractor()).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
            let rate = lyapunov_rate(&p, &StateVector::controllable_only(x.clone()).unwrap()).unwrap();
            if e > 1e-9 {
                ensure!(rate < 0.0, "policy {k}: dV/dt = {rate:e} at {x:?}");
                checked += 1;
            }
        }
        policies.push(p);
    }
    let opts = RolloutOptions::new(1e-3, 5.0);
    let mut violations = 0;
    for (k, p) in policies.iter().enumerate() {
        let x0: Vec<f64> = (0..p.d_c()).map(|_| rng.random_range(-2.0..2.0)).collect();
        let x0 = StateVector::controllable_only(x0).unwrap();
        let rec = integrate(p, &x0, &ObservationProvider::Static(Observation::empty()), &[], &opts)
            .map_err(|e| format!("rollout {k}: {e}"))?;
        violations += convergence_stats(&rec).unwrap().lyapunov_violations;
    }
    ensure!(violations == 0, "{violations} V increases over 100 rollouts");
    let secs = elapsed_within(start, Duration::from_secs(60), "Lyapunov suite")?;
    Ok(format!("{checked} rate draws negative, 100 RK4 rollouts without V increase, {secs:.1}s"))
}

fn contract(tape: &mut Tape, y: NodeId) -> NodeId {
    let shape = tape.value(y).shape().to_vec();
    let n: usize = shape.iter().product();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let r = tape.constant(Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap());
    let p = tape.mul(y, r);
    tape.sum(p)
}

type Probe = Box<dyn Fn(&mut Tape, NodeId) -> stableflow::Result<NodeId> + Send + Sync>;

fn primitive_probes() -> Vec<(&'static str, usize, Probe)> {
    vec![
        ("add", 12, Box::new(|t, x| {
            let (a, b) = (t.slice(x, 0, vec![2, 3]), t.slice(x, 6, vec![2, 3]));
            let y = t.add(a, b);
            let y = t.mul(y, y);
            Ok(contract(t, y))
        })),
        ("sub", 12, Box::new(|t, x| {
            let (a, b) = (t.slice(x, 0, vec![2, 3]), t.slice(x, 6, vec![2, 3]));
            let y = t.sub(a, b);
            let y = t.mul(y, a);
            Ok(contract(t, y))
        })),
        ("scale+offset", 6, Box::new(|t, x| {
            let y = t.scale(x, -2.5);
            let y = t.offset(y, 0.75);
            let y = t.mul(y, x);
            Ok(contract(t, y))
        })),
        ("tanh", 6, Box::new(|t, x| {
            let y = t.tanh(x);
            Ok(contract(t, y))
        })),
        ("relu", 6, Box::new(|t, x| {
            // shifted away from the kink
            let s = t.mul(x, x);
            let s = t.offset(s, 0.1);
            let y = t.relu(s);
            Ok(contract(t, y))
        })),
        ("softplus", 6, Box::new(|t, x| {
            let y = t.softplus(x);
            Ok(contract(t, y))
        })),
        ("exp", 6, Box::new(|t, x| {
            let y = t.exp(x);
            Ok(contract(t, y))
        })),
        ("matmul+transpose", 20, Box::new(|t, x| {
            let a = t.slice(x, 0, vec![4, 5]);
            let at = t.transpose(a);
            let y = t.matmul(at, a);
            Ok(contract(t, y))
        })),
        ("add_bias", 16, Box::new(|t, x| {
            let (a, b) = (t.slice(x, 0, vec![3, 4]), t.slice(x, 12, vec![4]));
            let y = t.add_bias(a, b);
            let y = t.tanh(y);
            Ok(contract(t, y))
        })),
        ("softmax_rows", 20, Box::new(|t, x| {
            let a = t.reshape(x, vec![4, 5]);
            let a = t.scale(a, 3.0);
            let y = t.softmax_rows(a);
            Ok(contract(t, y))
        })),
        ("concat_cols", 16, Box::new(|t, x| {
            let (a, b) = (t.slice(x, 0, vec![2, 3]), t.slice(x, 6, vec![2, 5]));
            let c = t.concat_cols(&[a, b, a]);
            let y = t.tanh(c);
            Ok(contract(t, y))
        })),
        ("gather_rows", 20, Box::new(|t, x| {
            let a = t.reshape(x, vec![5, 4]);
            let g = t.gather_rows(a, &[3, 0, 3, 4]);
            let y = t.mul(g, g);
            Ok(contract(t, y))
        })),
        ("conv2d", 2 * 2 * 49 + 3 * 2 * 9 + 3, Box::new(|t, x| {
            let input = t.slice(x, 0, vec![2, 2, 7, 7]);
            let kernel = t.slice(x, 196, vec![3, 2, 3, 3]);
            let bias = t.slice(x, 196 + 54, vec![3]);
            let y = t.conv2d(input, kernel, bias);
            let y = t.tanh(y);
            Ok(contract(t, y))
        })),
    ]
}

fn trainable_coords(p: &PolicyParams) -> Vec<usize> {
    // Upper-triangle slots of each raw L block are structurally zero.
    let d = p.d_c();
    (0..p.num_parameters())
        .filter(|&i| {
            let sys = i / (2 * d * d);
            let off = i - sys * 2 * d * d;
            !(sys < p.n_systems() && off < d * d && off % d > off / d)
        })
        .collect()
}

fn criterion_3(_: &mut Ctx) -> Outcome {
    let h = 1e-5;
    let mut worst: f64 = 0.0;
    for (k, (name, n, f)) in primitive_probes().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(30 + k as u64);
        let point: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let err = grad_check(f, &point, h).map_err(|e| format!("{name}: {e}"))?;
        ensure!(err < 1e-4, "{name}: relative error {err:e}");
        worst = worst.max(err);
    }
    // Ties inside a pooling window make the max non-differentiable.
    let mut rng = ChaCha8Rng::seed_from_u64(40);
    let mut q: Vec<f64> = (0..2 * 3 * 36).map(|i| i as f64 * 0.01).collect();
    for i in (1..q.len()).rev() {
        q.swap(i, rng.random_range(0..=i));
    }
    let err = grad_check(
        |t, x| {
            let a = t.reshape(x, vec![2, 3, 6, 6]);
            let y = t.max_pool2d(a, 2);
            let y = t.mul(y, y);
            Ok(contract(t, y))
        },
        &q,
        h,
    )
    .map_err(|e| e.to_string())?;
    ensure!(err < 1e-4, "max_pool2d: relative error {err:e}");
    worst = worst.max(err);

    // Full loss on a five-sample one-hot dataset.
    let samples: Vec<Sample> = (0..5)
        .map(|i| {
            let s = i as f64 * 0.2;
            Sample {
                state: StateVector::new(vec![s, 0.3 * (3.0 * s).sin()], Observation::one_hot(3, i % 3).unwrap()).unwrap(),
                target: vec![1.0 - s, 0.9 * (3.0 * s).cos()],
            }
        })
        .collect();
    let traj = stableflow::dataset::Trajectory::new(0.1, samples.iter().map(|s| s.state.clone()).collect()).unwrap();
    let ds = Dataset::new(vec![traj]).unwrap();
    let cfg = TrainConfig { n_systems: 3, ..TrainConfig::default() };
    let init = init_params(&ds, &cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
    let coords = trainable_coords(&init);
    let mut flat = init.flatten();
    for &i in &coords {
        flat[i] += 0.5 * rng.random_range(-1.0..1.0);
    }
    let params = init.unflatten(&flat).unwrap();
    let refs: Vec<&Sample> = samples.iter().collect();
    let (_, grad) = loss_and_gradient(&params, &refs, Execution::Sequential).unwrap();
    let mut loss_err: f64 = 0.0;
    for &i in &coords {
        let mut p = flat.clone();
        p[i] = flat[i] + h;
        let fp = imitation_loss(&params.unflatten(&p).unwrap(), &samples).unwrap();
        p[i] = flat[i] - h;
        let fm = imitation_loss(&params.unflatten(&p).unwrap(), &samples).unwrap();
        let fd = (fp - fm) / (2.0 * h);
        loss_err = loss_err.max((grad[i] - fd).abs() / fd.abs().max(1.0));
    }
    ensure!(loss_err < 1e-4, "imitation loss: relative error {loss_err:e}");
    Ok(format!(
        "15 primitives max rel err {worst:.1e}; loss over {} params {loss_err:.1e}",
        coords.len()
    ))
}

fn criterion_4(_: &mut Ctx) -> Outcome {
    let p = isotropic_policy(1, 1.0, vec![0.0]).unwrap();
    let x0 = StateVector::controllable_only(vec![1.0]).unwrap();
    let rec = integrate(&p, &x0, &ObservationProvider::Static(Observation::empty()), &[], &RolloutOptions::new(1e-3, 1.0))
        .map_err(|e| e.to_string())?;
    let x1 = rec.states[1000][0];
    let err = (x1 - (-1.0f64).exp()).abs();
    ensure!((rec.times[1000] - 1.0).abs() < 1e-12, "sample 1000 is at t={}", rec.times[1000]);
    ensure!(err < 1e-9, "|x(1) - e^-1| = {err:e}");
    Ok(format!("|x(1) - e^-1| = {err:.1e}"))
}

fn criterion_5(ctx: &mut Ctx) -> Outcome {
    let mut lines = Vec::new();
    for (shape, limit) in [(Shape::Line, 0.05), (Shape::Sine, 0.10)] {
        let start = Instant::now();
        let ds = single_task(shape, &DemoSpec::default()).unwrap();
        let ckpt = train(&ds, &training_config()).map_err(|e| e.to_string())?;
        let report = evaluate(&ckpt.policy, ds.trajectories(), Execution::default()).unwrap();
        let t = &report.trajectories[0];
        let budget = 1.5 * ds.trajectories()[0].duration();
        ensure!(t.normalized_rmse < limit, "{shape:?}: normalized RMSE {:.4} >= {limit}", t.normalized_rmse);
        let tc = t.convergence.convergence_time.ok_or(format!("{shape:?}: rollout did not converge"))?;
        ensure!(tc <= budget, "{shape:?}: converged at {tc:.2}s, budget {budget:.3}s");
        let secs = elapsed_within(start, Duration::from_secs(120), &format!("{shape:?} training"))?;
        lines.push(format!("{shape:?} nRMSE {:.4} t_conv {tc:.2}s/{budget:.3}s ({secs:.0}s)", t.normalized_rmse));
        if shape == Shape::Sine {
            ctx.sine = Some(ckpt);
        }
    }
    Ok(lines.join("; "))
}

fn check_multitask(name: &str, ckpt: &Checkpoint, ds: &Dataset, limit: f64) -> Result<String, String> {
    let report = multitask_eval(&ckpt.policy, ds, Execution::default()).map_err(|e| e.to_string())?;
    ensure!(report.tasks.len() == 3, "{name}: {} tasks", report.tasks.len());
    let mut worst: f64 = 0.0;
    for task in &report.tasks {
        let r = &task.report.trajectories[0];
        ensure!(r.normalized_rmse < limit, "{name} task {}: normalized RMSE {:.4} >= {limit}", task.task, r.normalized_rmse);
        ensure!(r.convergence.converged, "{name} task {}: rollout did not converge", task.task);
        worst = worst.max(r.normalized_rmse);
    }
    for (a, row) in report.weight_separation.iter().enumerate() {
        let best = row.iter().enumerate().filter(|(b, _)| *b != a).map(|(_, v)| *v).fold(0.0, f64::max);
        ensure!(best > 0.05, "{name} task {a}: weight separation {best:.3} <= 0.05");
    }
    Ok(format!("{name} max nRMSE {worst:.4}"))
}

fn criterion_6(ctx: &mut Ctx) -> Outcome {
    let start = Instant::now();
    let spec = DemoSpec { rate: MULTITASK_RATE, ..DemoSpec::default() };
    let onehot = multitask_onehot(&spec).unwrap();
    let ckpt = train(&onehot, &training_config()).map_err(|e| e.to_string())?;
    let a = check_multitask("one-hot", &ckpt, &onehot, 0.10)?;
    let images = multitask_images(&spec, 32).unwrap();
    let ckpt = train(&images, &training_config()).map_err(|e| e.to_string())?;
    let b = check_multitask("32x32 images", &ckpt, &images, 0.15)?;
    ctx.images = Some((ckpt, images));
    let secs = elapsed_within(start, Duration::from_secs(600), "multi-task training")?;
    Ok(format!("{a}; {b}; {secs:.0}s"))
}

fn criterion_7(ctx: &mut Ctx) -> Outcome {
    let (ckpt, ds) = ctx.images.as_ref().ok_or("needs the image policy from criterion 6")?;
    let line = Observation::Image(sign_image(Shape::Line, 32).unwrap());
    let sine = Observation::Image(sign_image(Shape::Sine, 32).unwrap());
    let x0 = StateVector::new(ds.trajectories()[Shape::Line.index()].initial().controllable.clone(), line.clone()).unwrap();
    let opts = RolloutOptions::new(ds.trajectories()[0].dt(), 10.0);
    let run = |provider: ObservationProvider| integrate(&ckpt.policy, &x0, &provider, &[], &opts).map_err(|e| e.to_string());
    let pure = run(ObservationProvider::Static(line))?;
    let switched = run(ObservationProvider::scheduled(vec![ScheduledObservation { time: 1.0, observation: sine }]).unwrap())?;
    let deviation = pure
        .states
        .iter()
        .zip(&switched.states)
        .map(|(a, b)| a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt())
        .fold(0.0, f64::max);
    let before_switch = pure.states[..100].iter().zip(&switched.states[..100]).all(|(a, b)| a == b);
    ensure!(before_switch, "paths differ before the switch");
    ensure!(deviation > 0.05, "switch moved the path by only {deviation:.4}");
    let stats = convergence_stats(&switched).unwrap();
    ensure!(stats.converged, "switched rollout did not converge (error {:.2e})", stats.final_error);
    Ok(format!("max deviation {deviation:.3}, converged at {:.2}s", stats.convergence_time.unwrap()))
}

fn criterion_8(ctx: &mut Ctx) -> Outcome {
    let ckpt = ctx.sine.as_ref().ok_or("needs the sine policy from criterion 5")?;
    let demo = single_task(Shape::Sine, &DemoSpec::default()).unwrap();
    let traj = &demo.trajectories()[0];
    let mag = 0.25 * traj.bbox_diagonal();
    let events = vec![
        PerturbationEvent::new(0.0, vec![0.6 * mag, -0.8 * mag]).unwrap(),
        PerturbationEvent::new(5.0, vec![-0.8 * mag, 0.6 * mag]).unwrap(),
    ];
    let rec = integrate(
        &ckpt.policy,
        traj.initial(),
        &ObservationProvider::Static(Observation::empty()),
        &events,
        &RolloutOptions::new(traj.dt(), 15.0),
    )
    .map_err(|e| e.to_string())?;
    ensure!(rec.events.len() == 2, "{} events applied", rec.events.len());
    let stats = convergence_stats(&rec).unwrap();
    ensure!(stats.lyapunov_violations == 0, "{} V increases between events", stats.lyapunov_violations);
    ensure!(stats.converged, "did not converge (error {:.2e})", stats.final_error);
    let jump = rec.events[1].step;
    ensure!(rec.lyapunov[jump] > rec.lyapunov[jump - 1], "second perturbation left no V jump");
    Ok(format!("|delta| {mag:.3}, 2 events, V monotone between them, converged at {:.2}s", stats.convergence_time.unwrap()))
}

fn bits(p: &PolicyParams) -> Vec<u64> {
    p.flatten().iter().map(|v| v.to_bits()).collect()
}

struct Cli<'a> {
    dir: &'a Path,
}

impl Cli<'_> {
    fn path(&self, name: &str) -> PathBuf {
        self.dir.join(name)
    }

    fn run(&self, args: &[&str]) -> (i32, String, String) {
        let out = Command::new(env!("CARGO_BIN_EXE_stableflow"))
            .args(args)
            .current_dir(self.dir)
            .output()
            .expect("binary runs");
        (
            out.status.code().unwrap_or(-1),
            String::from_utf8_lossy(&out.stdout).into_owned(),
            String::from_utf8_lossy(&out.stderr).into_owned(),
        )
    }
}

fn criterion_9(ctx: &mut Ctx) -> Outcome {
    // Bit-reproducible training, in either execution mode.
    let ds = multitask_onehot(&DemoSpec { samples: 60, ..DemoSpec::default() }).unwrap();
    let cfg = TrainConfig { epochs: 20, n_systems: 3, seed: 11, ..TrainConfig::default() };
    let a = train_with(&ds, &cfg, Execution::Sequential, |_| {}).map_err(|e| e.to_string())?;
    let b = train_with(&ds, &cfg, Execution::Sequential, |_| {}).unwrap();
    let c = train_with(&ds, &cfg, Execution::Parallel, |_| {}).unwrap();
    ensure!(bits(&a.policy) == bits(&b.policy), "repeat training differs");
    ensure!(bits(&a.policy) == bits(&c.policy), "parallel training differs from sequential");
    let hist = |k: &Checkpoint| k.meta.loss_history.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    ensure!(hist(&a) == hist(&c), "loss histories differ");

    // Checkpoint file round trip.
    let path = ctx.dir.path().join("det.json");
    save_checkpoint(&a, &path).unwrap();
    let back = load_checkpoint(&path).map_err(|e| e.to_string())?;
    ensure!(back == a && bits(&back.policy) == bits(&a.policy), "checkpoint round trip changed values");
    ensure!(back.to_json() == a.to_json(), "re-serialized checkpoint differs");

    // Exit-code matrix.
    let cli = Cli { dir: ctx.dir.path() };
    let line = single_task(Shape::Line, &DemoSpec::default()).unwrap();
    save_trajectories(cli.path("line.json"), line.trajectories()).unwrap();
    let huge: Vec<_> = (0..10)
        .map(|i| StateVector::controllable_only(vec![i as f64 * 1e170; 2]).unwrap())
        .collect();
    save_trajectories(cli.path("huge.json"), &[stableflow::dataset::Trajectory::new(0.01, huge).unwrap()]).unwrap();
    let nonfinite = r#"{"version":1,"dt":0.01,"d_c":2,"obs_kind":"vector",
        "trajectories":[{"states":[{"xc":[0,0]},{"xc":[1,1e999]},{"xc":[2,2]}]}]}"#;
    std::fs::write(cli.path("nonfinite.json"), nonfinite).unwrap();
    std::fs::write(cli.path("garbage.json"), "not a checkpoint").unwrap();

    let (code, out, err) = cli.run(&["train", "--data", "line.json", "--out", "good.json", "--epochs", "300", "--lr", "3e-3"]);
    ensure!(code == 0, "train: exit {code}: {err}");
    ensure!(cli.path("good.json").exists(), "train wrote no checkpoint");
    let summary: Value = serde_json::from_str(&out).map_err(|e| format!("train stdout is not JSON: {e}"))?;
    ensure!(summary["certificate"]["verdict"] == true, "train summary: {summary}");
    ensure!(err.contains("epoch"), "train printed no per-epoch loss");

    // Injects explicit system matrices through the checkpoint's bypass field.
    let good: Value = serde_json::from_str(&std::fs::read_to_string(cli.path("good.json")).unwrap()).unwrap();
    let tampered = |name: &str, a: Matrix, all: bool| {
        let mut doc = good.clone();
        for (i, sys) in doc["policy"]["systems"].as_array_mut().unwrap().iter_mut().enumerate() {
            if all || i == 0 {
                sys["bypass_a"] = Value::from(encode_hex(a.as_slice()));
            }
        }
        std::fs::write(cli.path(name), doc.to_string()).unwrap();
    };
    tampered("indefinite.json", Matrix::identity(2).scale(-1.0), false);
    tampered("exploding.json", Matrix::identity(2).scale(-500.0), true);

    let matrix: Vec<(Vec<&str>, i32, &str)> = vec![
        (vec!["train", "--out", "x.json"], 2, "Usage"),
        (vec!["train", "--data", "nonfinite.json", "--out", "x.json"], 2, ""),
        (vec!["train", "--data", "line.json", "--out", "x.json", "--systems", "0"], 2, "n_systems"),
        (vec!["train", "--data", "line.json", "--out", "x.json", "--net", "conv"], 2, ""),
        (vec!["train", "--data", "huge.json", "--out", "x.json", "--epochs", "3"], 3, "diverged"),
        (vec!["train", "--data", "missing.json", "--out", "x.json"], 1, "missing.json"),
        (vec!["verify", "--ckpt", "good.json"], 0, ""),
        (vec!["verify", "--ckpt", "indefinite.json"], 5, ""),
        (vec!["verify", "--ckpt", "garbage.json"], 2, ""),
        (vec!["verify", "--ckpt", "missing.json"], 1, ""),
        (vec!["rollout", "--ckpt", "good.json", "--x0", "0,0"], 0, ""),
        (vec!["rollout", "--ckpt", "good.json", "--x0", "0,0", "--perturb", "0:1,0", "--perturb", "5:0,1", "--horizon", "20", "--out", "r.csv"], 0, ""),
        (vec!["rollout", "--ckpt", "good.json", "--x0", "0,0", "--method", "euler", "--dt", "0.5"], 0, ""),
        (vec!["rollout", "--ckpt", "exploding.json", "--x0", "0.5,0.5"], 4, "diverged"),
        (vec!["rollout", "--ckpt", "good.json", "--x0", "0"], 2, ""),
        (vec!["rollout", "--ckpt", "good.json", "--x0", "0,0", "--obs", "static:onehot:0"], 2, ""),
        (vec!["rollout", "--ckpt", "good.json", "--x0", "0,0", "--method", "leapfrog"], 2, ""),
        (vec!["eval", "--ckpt", "good.json", "--data", "line.json"], 0, "norm_rmse"),
        (vec!["field", "--ckpt", "good.json", "--lo", "-1,-1", "--hi", "2,2", "--res", "8", "--out", "f.csv"], 0, ""),
        (vec!["field", "--ckpt", "good.json", "--lo", "-1,-1", "--hi", "2,2", "--res", "1", "--out", "f.csv"], 2, ""),
        (vec!["field", "--ckpt", "good.json", "--lo", "2,2", "--hi", "-1,-1", "--out", "f.csv"], 2, ""),
        (vec!["fixture", "--task", "spiral", "--out", "x.json"], 2, ""),
        (vec![], 2, "Usage"),
    ];
    for (args, want, needle) in &matrix {
        let (code, _, err) = cli.run(args);
        ensure!(code == *want, "`stableflow {}` exited {code}, expected {want}: {err}", args.join(" "));
        ensure!(err.contains(needle), "`stableflow {}` stderr lacks `{needle}`: {err}", args.join(" "));
    }

    let (_, out, _) = cli.run(&["rollout", "--ckpt", "good.json", "--x0", "0,0", "--perturb", "0:1,0", "--perturb", "5:0,1", "--horizon", "20"]);
    let v: Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    ensure!(v["converged"] == true && v["events"].as_array().map(Vec::len) == Some(2), "perturbed CLI rollout: {v}");
    ensure!(v["lyapunov_violations"] == 0, "perturbed CLI rollout: {v}");
    let (_, out, _) = cli.run(&["eval", "--ckpt", "good.json", "--data", "line.json"]);
    let v: Value = serde_json::from_str(&out).map_err(|e| e.to_string())?;
    let nrmse = v["max_normalized_rmse"].as_f64().unwrap_or(f64::NAN);
    ensure!(nrmse < 0.05, "CLI eval normalized RMSE {nrmse}");
    let (_, out, _) = cli.run(&["train", "--data", "line.json", "--out", "good2.json", "--epochs", "300", "--lr", "3e-3"]);
    ensure!(!out.is_empty(), "second training run failed");
    let same = std::fs::read(cli.path("good.json")).unwrap() == std::fs::read(cli.path("good2.json")).unwrap();
    ensure!(same, "CLI training is not byte-reproducible");
    Ok(format!("bit-identical training and checkpoints; {} CLI cases", matrix.len() + 3))
}

fn main() {
    let mut ctx = Ctx { dir: tempfile::tempdir().unwrap(), sine: None, images: None };
    let criteria: [(u32, fn(&mut Ctx) -> Outcome); 9] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
        (9, criterion_9),
    ];
    let mut failed = 0;
    for (n, f) in criteria {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(|| f(&mut ctx)))
            .unwrap_or_else(|p| Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into())));
        let secs = start.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {n}: PASS  {detail}  [{secs:.1}s]"),
            Err(why) => {
                failed += 1;
                println!("criterion {n}: FAIL  {why}  [{secs:.1}s]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} of 9 criteria failed");
        std::process::exit(1);
    }
    println!("all 9 criteria passed");
}
