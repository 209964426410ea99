//! Live rollouts. Each one is owned by a ticker task that starts when the
//! first stream subscriber attaches; commands reach it through a queue and
//! take effect at the start of the next tick.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::Serialize;
use stableflow::rollout::Simulator;
use stableflow::Observation;
use tokio::sync::{broadcast, mpsc};

pub const DEFAULT_TICK_HZ: f64 = 60.0;
pub const MAX_TICK_HZ: f64 = 1000.0;
/// Simulated seconds after which a rollout that has not converged closes.
pub const DEFAULT_MAX_TIME: f64 = 120.0;

#[derive(Debug)]
pub enum Command {
    Perturb(Vec<f64>),
    Observe { spec: String, observation: Observation },
}

#[derive(Clone, Debug, PartialEq, Serialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum LiveEvent {
    State {
        step: usize,
        t: f64,
        xc: Vec<f64>,
        v: Vec<f64>,
        #[serde(rename = "V")]
        lyapunov: f64,
    },
    Perturbation { step: usize, t: f64, delta: Vec<f64> },
    Observation { step: usize, t: f64, spec: String },
    Converged { step: usize, t: f64, convergence_time: f64 },
    Horizon { step: usize, t: f64 },
    Error { step: usize, t: f64, message: String },
}

impl LiveEvent {
    pub fn name(&self) -> &'static str {
        match self {
            LiveEvent::State { .. } => "state",
            LiveEvent::Perturbation { .. } => "perturbation",
            LiveEvent::Observation { .. } => "observation",
            LiveEvent::Converged { .. } => "converged",
            LiveEvent::Horizon { .. } => "horizon",
            LiveEvent::Error { .. } => "error",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, LiveEvent::Converged { .. } | LiveEvent::Horizon { .. } | LiveEvent::Error { .. })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LiveStatus {
    pub id: String,
    pub model_id: String,
    pub started: bool,
    pub closed: bool,
    pub step: usize,
    pub t: f64,
    pub tick_hz: f64,
    pub dt: f64,
}

struct Pending {
    sim: Simulator<'static>,
    commands: mpsc::UnboundedReceiver<Command>,
}

pub struct LiveRollout {
    status: Mutex<LiveStatus>,
    pending: Mutex<Option<Pending>>,
    commands: mpsc::UnboundedSender<Command>,
    events: broadcast::Sender<LiveEvent>,
    max_time: f64,
    d_c: usize,
}

impl LiveRollout {
    pub fn status(&self) -> LiveStatus {
        self.status.lock().expect("status poisoned").clone()
    }

    pub fn is_closed(&self) -> bool {
        self.status().closed
    }

    pub fn d_c(&self) -> usize {
        self.d_c
    }

    /// Queues a command; false when the rollout has closed.
    pub fn send(&self, cmd: Command) -> bool {
        !self.is_closed() && self.commands.send(cmd).is_ok()
    }

    /// Subscribes to events, starting the ticker on the first call.
    /// `None` once the rollout has closed.
    pub fn subscribe(self: &Arc<Self>) -> Option<broadcast::Receiver<LiveEvent>> {
        if self.is_closed() {
            return None;
        }
        let rx = self.events.subscribe();
        if let Some(pending) = self.pending.lock().expect("pending poisoned").take() {
            self.status.lock().expect("status poisoned").started = true;
            tokio::spawn(tick(Arc::clone(self), pending));
        }
        Some(rx)
    }
}

async fn tick(live: Arc<LiveRollout>, mut p: Pending) {
    let hz = live.status().tick_hz;
    let mut interval = tokio::time::interval(Duration::from_secs_f64(1.0 / hz));
    interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        interval.tick().await;
        let mut out = Vec::new();
        while let Ok(cmd) = p.commands.try_recv() {
            let (step, t) = (p.sim.step_index(), p.sim.time());
            match cmd {
                Command::Perturb(delta) => match p.sim.perturb(&delta) {
                    Ok(()) => out.push(LiveEvent::Perturbation { step, t, delta }),
                    Err(e) => log::warn!("dropping perturbation: {e}"),
                },
                Command::Observe { spec, observation } => match p.sim.set_observation(observation) {
                    Ok(()) => out.push(LiveEvent::Observation { step, t, spec }),
                    Err(e) => log::warn!("dropping observation switch: {e}"),
                },
            }
        }
        let s = p.sim.sample();
        let (step, t) = (p.sim.step_index(), s.t);
        out.push(LiveEvent::State { step, t, xc: s.xc, v: s.v, lyapunov: s.lyapunov });
        let terminal = if p.sim.observe_convergence() {
            Some(LiveEvent::Converged {
                step,
                t,
                convergence_time: p.sim.window_start().unwrap_or(t),
            })
        } else if t >= live.max_time {
            Some(LiveEvent::Horizon { step, t })
        } else if let Err(e) = p.sim.advance() {
            Some(LiveEvent::Error { step, t, message: e.to_string() })
        } else {
            None
        };
        let done = terminal.is_some();
        out.extend(terminal);
        {
            let mut st = live.status.lock().expect("status poisoned");
            st.step = p.sim.step_index();
            st.t = p.sim.time();
            st.closed = done;
        }
        for ev in out {
            // No receivers is fine; the stream may have been dropped.
            let _ = live.events.send(ev);
        }
        if done {
            return;
        }
    }
}

#[derive(Clone, Default)]
pub struct LiveRegistry {
    rollouts: Arc<Mutex<HashMap<String, Arc<LiveRollout>>>>,
}

impl LiveRegistry {
    pub fn create(&self, id: String, model_id: String, sim: Simulator<'static>, tick_hz: f64, max_time: f64) -> Arc<LiveRollout> {
        let (tx, rx) = mpsc::unbounded_channel();
        let (events, _) = broadcast::channel(4096);
        let d_c = sim.controllable().len();
        let live = Arc::new(LiveRollout {
            status: Mutex::new(LiveStatus {
                id: id.clone(),
                model_id,
                started: false,
                closed: false,
                step: 0,
                t: 0.0,
                tick_hz,
                dt: sim.dt(),
            }),
            pending: Mutex::new(Some(Pending { sim, commands: rx })),
            commands: tx,
            events,
            max_time,
            d_c,
        });
        self.rollouts
            .lock()
            .expect("rollout registry poisoned")
            .insert(id, Arc::clone(&live));
        live
    }

    pub fn get(&self, id: &str) -> Option<Arc<LiveRollout>> {
        self.rollouts.lock().expect("rollout registry poisoned").get(id).cloned()
    }
}
