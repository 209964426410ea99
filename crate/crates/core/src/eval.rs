//! How well a policy reproduces its demonstrations, per trajectory and per
//! task, plus convergence and certificate summaries.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::dataset::{compute_attractor, Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::exec::{self, Execution};
use crate::policy::{verify_certificate, CompiledPolicy, PolicyParams};
use crate::rollout::{
    convergence_stats, integrate_compiled, ConvergenceStats, ObservationProvider, RolloutOptions,
    ScheduledObservation,
};
use crate::state::Observation;

/// Convergence rollouts run for this many demo durations at most.
pub const CONVERGENCE_HORIZON_FACTOR: f64 = 20.0;

/// Tolerance on per-task attractor agreement.
pub const ATTRACTOR_TOLERANCE: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReproductionError {
    pub rmse: f64,
    /// `rmse` divided by the demo's bounding-box diagonal.
    pub normalized_rmse: f64,
}

/// The demo's observations as a switch schedule: a new entry each time the
/// payload changes.
fn schedule(traj: &Trajectory) -> Result<ObservationProvider> {
    let mut switches: Vec<ScheduledObservation> = Vec::new();
    let mut current: &Observation = &traj.initial().observation;
    for (k, s) in traj.states().iter().enumerate().skip(1) {
        if !s.observation.bits_eq(current) {
            switches.push(ScheduledObservation {
                time: k as f64 * traj.dt(),
                observation: s.observation.clone(),
            });
            current = &s.observation;
        }
    }
    ObservationProvider::scheduled(switches)
}

fn check_dims(policy: &CompiledPolicy, traj: &Trajectory) -> Result<()> {
    if traj.d_c() != policy.d_c() {
        return Err(Error::Validation(format!(
            "trajectory has d_c = {}, policy has d_c = {}",
            traj.d_c(),
            policy.d_c()
        )));
    }
    policy
        .embed(&traj.initial().observation)
        .map_err(|e| Error::Validation(format!("trajectory observations do not fit the policy: {e}")))?;
    Ok(())
}

/// Rolls out from the demo's first state over its duration at its `dt`
/// (RK4) and compares positions at matching time indices.
pub fn reproduction_error(params: &PolicyParams, traj: &Trajectory) -> Result<ReproductionError> {
    reproduction_error_compiled(&CompiledPolicy::new(params)?, traj)
}

fn reproduction_error_compiled(policy: &CompiledPolicy, traj: &Trajectory) -> Result<ReproductionError> {
    check_dims(policy, traj)?;
    let opts = RolloutOptions::new(traj.dt(), traj.duration());
    let rec = integrate_compiled(policy, traj.initial(), &schedule(traj)?, &[], &opts)?;
    let m = traj.len().min(rec.len());
    let sq: f64 = traj.states()[..m]
        .iter()
        .zip(&rec.states)
        .map(|(s, x)| {
            s.controllable
                .iter()
                .zip(x)
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
        })
        .sum();
    let rmse = (sq / m as f64).sqrt();
    let diag = traj.bbox_diagonal();
    let normalized_rmse = if diag > 0.0 {
        rmse / diag
    } else if rmse == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(ReproductionError { rmse, normalized_rmse })
}

/// Convergence of a long rollout from the demo's first state, holding the
/// demo's final observation after its schedule ends.
pub fn demo_convergence(policy: &CompiledPolicy, traj: &Trajectory) -> Result<ConvergenceStats> {
    let mut opts = RolloutOptions::new(traj.dt(), CONVERGENCE_HORIZON_FACTOR * traj.duration());
    opts.stop_on_convergence = true;
    let rec = integrate_compiled(policy, traj.initial(), &schedule(traj)?, &[], &opts)?;
    convergence_stats(&rec)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryReport {
    pub index: usize,
    pub rmse: f64,
    pub normalized_rmse: f64,
    pub convergence: ConvergenceStats,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CertificateSummary {
    pub verdict: bool,
    pub min_eigenvalue: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub trajectories: Vec<TrajectoryReport>,
    pub certificate: CertificateSummary,
}

impl EvalReport {
    pub fn max_normalized_rmse(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| t.normalized_rmse)
            .fold(0.0, f64::max)
    }

    pub fn all_converged(&self) -> bool {
        self.trajectories.iter().all(|t| t.convergence.converged)
    }
}

/// Reports for `trajs`, evaluated in parallel.
pub fn evaluate(params: &PolicyParams, trajs: &[Trajectory], exec: Execution) -> Result<EvalReport> {
    let policy = CompiledPolicy::new(params)?;
    let cert = verify_certificate(params)?;
    let indexed: Vec<(usize, &Trajectory)> = trajs.iter().enumerate().collect();
    let trajectories = exec::map(exec, &indexed, |&(index, t)| {
        let err = reproduction_error_compiled(&policy, t)?;
        Ok(TrajectoryReport {
            index,
            rmse: err.rmse,
            normalized_rmse: err.normalized_rmse,
            convergence: demo_convergence(&policy, t)?,
        })
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(EvalReport {
        trajectories,
        certificate: CertificateSummary {
            verdict: cert.verdict,
            min_eigenvalue: cert.min_eigenvalue(),
        },
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskReport {
    pub task: usize,
    /// Indices into the dataset's trajectories.
    pub members: Vec<usize>,
    pub report: EvalReport,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiTaskReport {
    pub tasks: Vec<TaskReport>,
    /// `[a][b]`: largest `‖w(x, o_a) − w(x, o_b)‖∞` along task `a`'s first
    /// demo, i.e. how much swapping in task `b`'s observation moves the
    /// mixture weights.
    pub weight_separation: Vec<Vec<f64>>,
}

impl MultiTaskReport {
    pub fn max_normalized_rmse(&self) -> f64 {
        self.tasks
            .iter()
            .map(|t| t.report.max_normalized_rmse())
            .fold(0.0, f64::max)
    }

    /// Fixed-width text table, one row per trajectory.
    pub fn table(&self) -> String {
        let mut out = String::from("task  traj        rmse    norm_rmse  converged  t_conv\n");
        for task in &self.tasks {
            for t in &task.report.trajectories {
                let tc = t
                    .convergence
                    .convergence_time
                    .map_or("-".to_string(), |v| format!("{v:.3}"));
                writeln!(
                    out,
                    "{:>4}  {:>4}  {:>10.6}  {:>11.6}  {:>9}  {:>6}",
                    task.task,
                    members_index(task, t.index),
                    t.rmse,
                    t.normalized_rmse,
                    t.convergence.converged,
                    tc
                )
                .unwrap();
            }
        }
        if let Some(first) = self.tasks.first() {
            writeln!(
                out,
                "certificate: verdict={} min_eig={:.6e}",
                first.report.certificate.verdict, first.report.certificate.min_eigenvalue
            )
            .unwrap();
        }
        out
    }
}

fn members_index(task: &TaskReport, local: usize) -> usize {
    task.members.get(local).copied().unwrap_or(local)
}

/// Groups demos by their initial observation payload and evaluates each
/// group. Every task must end at the same attractor.
pub fn multitask_eval(params: &PolicyParams, dataset: &Dataset, exec: Execution) -> Result<MultiTaskReport> {
    let trajs = dataset.trajectories();
    let mut groups: Vec<(Observation, Vec<usize>)> = Vec::new();
    for (i, t) in trajs.iter().enumerate() {
        let obs = &t.initial().observation;
        match groups.iter_mut().find(|(o, _)| o.bits_eq(obs)) {
            Some((_, members)) => members.push(i),
            None => groups.push((obs.clone(), vec![i])),
        }
    }

    let attractors = groups
        .iter()
        .map(|(_, m)| compute_attractor(&m.iter().map(|&i| trajs[i].clone()).collect::<Vec<_>>()))
        .collect::<Result<Vec<_>>>()?;
    for (k, a) in attractors.iter().enumerate().skip(1) {
        let gap = a
            .iter()
            .zip(&attractors[0])
            .map(|(x, y)| (x - y).abs())
            .fold(0.0, f64::max);
        if gap > ATTRACTOR_TOLERANCE {
            return Err(Error::Fixture(format!(
                "task {k} ends {gap:.3e} away from task 0; all tasks must share the attractor"
            )));
        }
    }

    let mut tasks = Vec::with_capacity(groups.len());
    for (task, (_, members)) in groups.iter().enumerate() {
        let subset: Vec<Trajectory> = members.iter().map(|&i| trajs[i].clone()).collect();
        tasks.push(TaskReport {
            task,
            members: members.clone(),
            report: evaluate(params, &subset, exec)?,
        });
    }

    let net = params.weight_net();
    let features = groups
        .iter()
        .map(|(o, _)| net.embed(o))
        .collect::<Result<Vec<_>>>()?;
    let weight_separation = groups
        .iter()
        .map(|(_, members)| {
            let path = trajs[members[0]].states();
            features
                .iter()
                .map(|fb| {
                    let fa = net.embed(&path[0].observation).expect("embedded above");
                    path.iter()
                        .map(|s| {
                            let wa = net.weights_from_features(&s.controllable, &fa);
                            let wb = net.weights_from_features(&s.controllable, fb);
                            wa.iter().zip(&wb).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
                        })
                        .fold(0.0, f64::max)
                })
                .collect()
        })
        .collect();

    Ok(MultiTaskReport {
        tasks,
        weight_separation,
    })
}
