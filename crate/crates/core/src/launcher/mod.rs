//! The pilot launcher.
//!
//! One coordinator thread owns every task record the launcher holds. It
//! leases work from the store, hands staging and hook work to a small pool
//! of transition workers, places runnable tasks on idle nodes and starts
//! them, and collects exits from one reaper thread per process. Workers and
//! reapers report back over a channel; only the coordinator writes to the
//! store, and it batches state changes into one transaction per cycle.

mod exit;
mod plan;
mod process;
mod stage;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::os::unix::process::ExitStatusExt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread;
use std::time::{Duration, Instant};

use chrono::{DateTime, Utc};
use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, info, warn};
use thiserror::Error;
use uuid::Uuid;

use crate::dag::{self, DagError};
use crate::model::{advance_in_place, AppDefinition, Task, TaskState};
use crate::platform::{render_launch_command, JobMode, LaunchTemplate, NodeSet, PlatformError, SchedulerAdapter};
use crate::project::Project;
use crate::store::{StateChange, Store, StoreError, TaskFilter};

pub use exit::{handle_exit, read_tail, resolve_policy, ExitKind, Resolution};
pub use plan::{loads, plan_assignments, Assignment, NodeLoad, Plan, Runnable, AGING_CYCLES};
pub use process::{JOB_ERR, JOB_OUT};
pub use stage::{context_env, run_stage, work_dir_for, StageContext, StageJob, StageKind, StageOutcome};

const TICK: Duration = Duration::from_millis(20);
const ACQUIRE_INTERVAL: Duration = Duration::from_millis(100);
const SWEEP_EVERY: u32 = 5;

#[derive(Debug, Error)]
pub enum LauncherError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Dag(#[from] DagError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone)]
pub struct LauncherConfig {
    pub mode: JobMode,
    pub batch_tag: Option<Uuid>,
    pub wf_filter: Option<String>,
    /// Period for flushing updates, renewing leases and housekeeping.
    pub cycle: Duration,
    pub lease_seconds: f64,
    pub workers: usize,
    /// Time between SIGTERM and SIGKILL when stopping a process.
    pub kill_grace: Duration,
    pub owner: String,
    /// Launch template used in mpi mode.
    pub launch_template: String,
    /// Upper bound on co-resident serial tasks per node.
    pub serial_slots: u32,
    /// Extra tasks leased beyond free slots; defaults to the node count.
    pub prefetch: Option<usize>,
    /// Prepended to `PATH` for hooks and applications.
    pub path_prefix: Option<PathBuf>,
}

impl LauncherConfig {
    pub fn new(mode: JobMode) -> Self {
        let short = Uuid::new_v4().simple().to_string();
        LauncherConfig {
            mode,
            batch_tag: None,
            wf_filter: None,
            cycle: Duration::from_secs(1),
            lease_seconds: crate::store::DEFAULT_LEASE_SECONDS,
            workers: 4,
            kill_grace: Duration::from_secs(10),
            owner: format!("launcher-{}-{}", std::process::id(), &short[..8]),
            launch_template: "mpirun".into(),
            serial_slots: 64,
            prefetch: None,
            path_prefix: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    /// Nothing left that this launcher could run.
    Drained,
    Signal,
    Walltime,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchSummary {
    pub dispatched: usize,
    pub finished: usize,
    pub failed: usize,
    pub killed: usize,
    pub reason: StopReason,
}

/// Reads the allocation from the adapter's environment convention.
pub fn detect_resources(
    env: &BTreeMap<String, String>,
    adapter: &dyn SchedulerAdapter,
) -> Result<NodeSet, PlatformError> {
    adapter.detect_environment(env)
}

const ACQUIRABLE: [TaskState; 10] = [
    TaskState::Ready,
    TaskState::RestartReady,
    TaskState::StagedIn,
    TaskState::Preprocessed,
    TaskState::Running,
    TaskState::RunDone,
    TaskState::RunError,
    TaskState::RunTimeout,
    TaskState::Postprocessed,
    TaskState::StagedOut,
];

#[derive(Debug)]
pub struct Launcher {
    store: Arc<Store>,
    project: Project,
    nodes: NodeSet,
    config: LauncherConfig,
}

impl Launcher {
    pub fn new(store: Arc<Store>, project: Project, nodes: NodeSet, config: LauncherConfig) -> Self {
        let nodes = nodes.with_slots(config.mode, config.serial_slots);
        Launcher {
            store,
            project,
            nodes,
            config,
        }
    }

    pub fn nodes(&self) -> &NodeSet {
        &self.nodes
    }

    /// Runs until the work runs out, the allocation ends or `stop` is set.
    pub fn run(&self, stop: &AtomicBool) -> Result<LaunchSummary, LauncherError> {
        let template = match self.config.mode {
            JobMode::Mpi => Some(LaunchTemplate::lookup(
                Some(&self.project.templates_dir()),
                &self.config.launch_template,
            )?),
            JobMode::Serial => None,
        };
        info!(
            "launcher {} starting: {} nodes, mode {}",
            self.config.owner,
            self.nodes.len(),
            self.config.mode.as_str()
        );
        let mut c = Coordinator::new(self, template);
        let outcome = c.run(stop);
        c.close();
        let summary = outcome?;
        info!("launcher {} stopped: {:?}", self.config.owner, summary);
        Ok(summary)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Busy {
    Idle,
    Worker,
    Running,
}

#[derive(Debug)]
struct Held {
    task: Task,
    app: AppDefinition,
    busy: Busy,
    waited: u32,
    /// The stored record moved on without us; drop results when they come.
    abandoned: bool,
    exit_code: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum StopCause {
    Timeout,
    User,
    LeaseLost,
}

#[derive(Debug)]
struct Proc {
    pid: u32,
    nodes: Vec<String>,
    npc: u32,
    stopping: Option<(StopCause, Instant)>,
    hard_killed: bool,
}

#[derive(Debug)]
enum Event {
    Stage {
        id: Uuid,
        kind: StageKind,
        outcome: StageOutcome,
    },
    Exited {
        id: Uuid,
        status: std::io::Result<std::process::ExitStatus>,
    },
}

#[derive(Debug)]
enum Op {
    Change { expected: TaskState, change: StateChange },
    WorkDir { id: Uuid, dir: PathBuf },
    DispatchStart { id: Uuid, nodes: Vec<String>, at: DateTime<Utc> },
    DispatchEnd { id: Uuid, at: DateTime<Utc>, outcome: String },
    Release { id: Uuid },
}

struct Coordinator<'a> {
    l: &'a Launcher,
    template: Option<LaunchTemplate>,
    owner: String,
    held: HashMap<Uuid, Held>,
    procs: HashMap<Uuid, Proc>,
    pending: Vec<Op>,
    skipped: BTreeSet<Uuid>,
    apps: HashMap<String, AppDefinition>,
    jobs: Option<Sender<StageJob>>,
    events_tx: Sender<Event>,
    events: Receiver<Event>,
    in_worker: usize,
    deadline: Option<Instant>,
    npc_hint: u32,
    summary: LaunchSummary,
    shutdown: Option<Instant>,
}

impl<'a> Coordinator<'a> {
    fn new(l: &'a Launcher, template: Option<LaunchTemplate>) -> Self {
        let (events_tx, events) = unbounded();
        let (jobs_tx, jobs_rx) = unbounded::<StageJob>();
        let ctx = Arc::new(StageContext {
            project_root: l.project.root().to_path_buf(),
            data_dir: l.project.data_dir(),
            store: l.store.clone(),
            path_prefix: l.config.path_prefix.clone(),
        });
        for _ in 0..l.config.workers.max(1) {
            let (rx, tx, ctx) = (jobs_rx.clone(), events_tx.clone(), ctx.clone());
            thread::spawn(move || {
                for job in rx {
                    let outcome = run_stage(&ctx, &job);
                    let _ = tx.send(Event::Stage {
                        id: job.task.id,
                        kind: job.kind,
                        outcome,
                    });
                }
            });
        }
        Coordinator {
            l,
            template,
            owner: l.config.owner.clone(),
            held: HashMap::new(),
            procs: HashMap::new(),
            pending: Vec::new(),
            skipped: BTreeSet::new(),
            apps: HashMap::new(),
            jobs: Some(jobs_tx),
            events_tx,
            events,
            in_worker: 0,
            deadline: l
                .nodes
                .remaining_walltime
                .map(|s| Instant::now() + Duration::from_secs_f64(s.max(0.0))),
            npc_hint: 1,
            summary: LaunchSummary {
                dispatched: 0,
                finished: 0,
                failed: 0,
                killed: 0,
                reason: StopReason::Drained,
            },
            shutdown: None,
        }
    }

    fn store(&self) -> &Store {
        &self.l.store
    }

    fn run(&mut self, stop: &AtomicBool) -> Result<LaunchSummary, LauncherError> {
        let cycle = self.l.config.cycle;
        let mut next_cycle = Instant::now();
        let mut next_acquire = Instant::now();
        let mut cycles: u32 = 0;
        loop {
            match self.events.recv_timeout(TICK) {
                Ok(ev) => {
                    self.on_event(ev)?;
                    while let Ok(ev) = self.events.try_recv() {
                        self.on_event(ev)?;
                    }
                }
                Err(RecvTimeoutError::Timeout) => {}
                Err(RecvTimeoutError::Disconnected) => unreachable!("coordinator holds a sender"),
            }

            if self.shutdown.is_none() {
                if stop.load(Ordering::SeqCst) {
                    self.begin_shutdown(StopReason::Signal);
                } else if self.remaining().is_some_and(|r| r < 2.0 * cycle.as_secs_f64()) {
                    self.begin_shutdown(StopReason::Walltime);
                }
            }

            if let Some(since) = self.shutdown {
                self.escalate_kills();
                self.drive()?;
                let workers_done = self.in_worker == 0 || since.elapsed() > self.l.config.kill_grace * 2;
                if self.procs.is_empty() && workers_done {
                    return Ok(self.summary.clone());
                }
                if Instant::now() >= next_cycle {
                    self.flush()?;
                    next_cycle = Instant::now() + cycle;
                }
                continue;
            }

            if Instant::now() >= next_acquire {
                self.acquire()?;
                next_acquire = Instant::now() + ACQUIRE_INTERVAL;
            }
            self.drive()?;
            self.dispatch()?;
            self.escalate_kills();

            if Instant::now() >= next_cycle {
                next_cycle = Instant::now() + cycle;
                cycles += 1;
                self.flush()?;
                self.store().renew_or_release(&self.owner, true)?;
                self.check_held()?;
                if cycles % SWEEP_EVERY == 1 {
                    dag::sweep(self.store())?;
                }
                for h in self.held.values_mut() {
                    if h.busy == Busy::Idle && h.task.state == TaskState::Preprocessed {
                        h.waited += 1;
                    }
                }
                if self.drained()? {
                    return Ok(self.summary.clone());
                }
            }
        }
    }

    fn close(&mut self) {
        self.jobs = None;
        for (_, p) in self.procs.drain() {
            process::signal_group(p.pid, libc::SIGKILL);
        }
        if let Err(e) = self.flush() {
            warn!("final flush failed: {e}");
        }
        if let Err(e) = self.store().renew_or_release(&self.owner, false) {
            warn!("releasing leases failed: {e}");
        }
    }

    fn remaining(&self) -> Option<f64> {
        self.deadline
            .map(|d| d.saturating_duration_since(Instant::now()).as_secs_f64())
    }

    fn begin_shutdown(&mut self, reason: StopReason) {
        info!("launcher {} shutting down: {reason:?}", self.owner);
        self.summary.reason = reason;
        self.shutdown = Some(Instant::now());
        let ids: Vec<Uuid> = self.procs.keys().copied().collect();
        for id in ids {
            self.stop_proc(id, StopCause::Timeout);
        }
    }

    fn stop_proc(&mut self, id: Uuid, cause: StopCause) {
        if let Some(p) = self.procs.get_mut(&id) {
            if p.stopping.is_none() {
                p.stopping = Some((cause, Instant::now()));
                process::signal_group(p.pid, libc::SIGTERM);
            }
        }
    }

    fn escalate_kills(&mut self) {
        let grace = self.l.config.kill_grace;
        for p in self.procs.values_mut() {
            if let Some((_, at)) = p.stopping {
                if !p.hard_killed && at.elapsed() >= grace {
                    process::signal_group(p.pid, libc::SIGKILL);
                    p.hard_killed = true;
                }
            }
        }
    }

    fn base_filter(&self) -> TaskFilter {
        let mut f = TaskFilter::all();
        if let Some(tag) = self.l.config.batch_tag {
            f = f.batch_tag(tag);
        }
        if let Some(wf) = &self.l.config.wf_filter {
            f = f.workflow(wf.clone());
        }
        f = match self.l.config.mode {
            JobMode::Serial => f.num_nodes(1, Some(1)).ranks_per_node(1, Some(1)),
            JobMode::Mpi => f.num_nodes(1, Some(self.l.nodes.len() as u32)),
        };
        f.exclude_ids = self.skipped.iter().copied().collect();
        f
    }

    /// True once nothing is in flight here and the store holds no
    /// unfinished task this launcher could ever pick up.
    fn drained(&mut self) -> Result<bool, LauncherError> {
        if !self.held.is_empty() || !self.procs.is_empty() || self.in_worker > 0 || !self.pending.is_empty() {
            return Ok(false);
        }
        let open: Vec<TaskState> = TaskState::ALL.iter().copied().filter(|s| !s.is_terminal()).collect();
        Ok(self.store().count(&self.base_filter().states(open))? == 0)
    }

    fn free_slots(&self) -> usize {
        let nodes = self.node_loads();
        match self.l.config.mode {
            JobMode::Mpi => nodes.iter().filter(|n| n.idle()).count(),
            JobMode::Serial => nodes
                .iter()
                .map(|n| {
                    let limit = n
                        .residents
                        .iter()
                        .copied()
                        .fold(n.capacity.min(self.npc_hint.max(1)), u32::min);
                    limit.saturating_sub(n.residents.len() as u32) as usize
                })
                .sum(),
        }
    }

    fn acquire(&mut self) -> Result<(), LauncherError> {
        let prerun = self
            .held
            .values()
            .filter(|h| {
                matches!(
                    h.task.state,
                    TaskState::Ready | TaskState::RestartReady | TaskState::StagedIn | TaskState::Preprocessed
                )
            })
            .count();
        let prefetch = self.l.config.prefetch.unwrap_or(self.l.nodes.len());
        let want = (self.free_slots() + prefetch).saturating_sub(prerun);
        if want == 0 {
            return Ok(());
        }
        let filter = self.base_filter().states(ACQUIRABLE);
        let tasks = self
            .store()
            .acquire(&filter, want, &self.owner, self.l.config.lease_seconds)?;
        for task in tasks {
            let app = match self.apps.get(&task.application) {
                Some(a) => a.clone(),
                None => match self.store().app(&task.application)? {
                    Some(a) => {
                        self.apps.insert(a.name.clone(), a.clone());
                        a
                    }
                    None => {
                        warn!("task {} names unknown application {}", task.id, task.application);
                        self.skipped.insert(task.id);
                        self.store().release_tasks(&self.owner, &[task.id])?;
                        continue;
                    }
                },
            };
            debug!("acquired {} in {}", task.id, task.state);
            if self.l.config.mode == JobMode::Serial {
                self.npc_hint = self.npc_hint.max(task.node_packing_count);
            }
            self.held.insert(
                task.id,
                Held {
                    task,
                    app,
                    busy: Busy::Idle,
                    waited: 0,
                    abandoned: false,
                    exit_code: None,
                },
            );
        }
        Ok(())
    }

    /// Moves a held task forward locally and queues the store update.
    fn advance(&mut self, id: Uuid, to: TaskState, message: impl Into<String>) -> bool {
        let now = self.store().now();
        let Some(h) = self.held.get_mut(&id) else {
            return false;
        };
        let message = message.into();
        let from = h.task.state;
        let at = now.max(h.task.last_timestamp());
        if let Err(e) = advance_in_place(&mut h.task, to, message.clone(), at) {
            warn!("{e}");
            return false;
        }
        self.pending.push(Op::Change {
            expected: from,
            change: StateChange::new(id, to, message, at),
        });
        match to {
            TaskState::JobFinished => self.summary.finished += 1,
            TaskState::Failed => self.summary.failed += 1,
            _ => {}
        }
        if to.is_terminal() {
            self.held.remove(&id);
        }
        true
    }

    fn send(&mut self, id: Uuid, kind: StageKind) -> Result<(), LauncherError> {
        let needs_store = matches!(kind, StageKind::Preprocess | StageKind::Postprocess);
        if needs_store && !self.pending.is_empty() {
            // hooks may read or change the store; show them our progress
            self.flush()?;
        }
        let Some(h) = self.held.get_mut(&id) else {
            return Ok(());
        };
        h.busy = Busy::Worker;
        let job = StageJob {
            kind,
            task: h.task.clone(),
            app: h.app.clone(),
            exit_code: h.exit_code,
        };
        self.in_worker += 1;
        if let Some(jobs) = &self.jobs {
            let _ = jobs.send(job);
        }
        Ok(())
    }

    /// Advances every idle held task as far as it can go without waiting.
    fn drive(&mut self) -> Result<(), LauncherError> {
        let ids: Vec<Uuid> = self
            .held
            .iter()
            .filter(|(_, h)| h.busy == Busy::Idle && !h.abandoned)
            .map(|(id, _)| *id)
            .collect();
        let stopping = self.shutdown.is_some();
        for id in ids {
            loop {
                let Some(h) = self.held.get(&id) else { break };
                if h.busy != Busy::Idle {
                    break;
                }
                let (state, has_pre, has_post, has_out) = (
                    h.task.state,
                    h.app.preprocess.is_some(),
                    h.app.postprocess.is_some(),
                    h.task.stage_out.is_some(),
                );
                match state {
                    TaskState::Ready | TaskState::RestartReady if !stopping => {
                        self.send(id, StageKind::StageIn)?;
                    }
                    TaskState::StagedIn if !has_pre => {
                        self.advance(id, TaskState::Preprocessed, "");
                    }
                    TaskState::StagedIn if !stopping => self.send(id, StageKind::Preprocess)?,
                    TaskState::Running => {
                        // adopted from a launcher that went away
                        self.advance(id, TaskState::RunTimeout, "launcher lost; lease expired");
                        continue;
                    }
                    TaskState::RunDone if !has_post => {
                        self.advance(id, TaskState::Postprocessed, "");
                        continue;
                    }
                    TaskState::RunDone if !stopping => self.send(id, StageKind::Postprocess)?,
                    TaskState::RunError | TaskState::RunTimeout => match resolve_policy(&h.task, &h.app) {
                        Resolution::Advance(to, msg) => {
                            self.advance(id, to, msg);
                            continue;
                        }
                        Resolution::Handler if !stopping => self.send(id, StageKind::Postprocess)?,
                        Resolution::Handler => {}
                    },
                    TaskState::Postprocessed if !has_out => {
                        self.advance(id, TaskState::StagedOut, "");
                        continue;
                    }
                    TaskState::Postprocessed if !stopping => self.send(id, StageKind::StageOut)?,
                    TaskState::StagedOut => {
                        self.advance(id, TaskState::JobFinished, "");
                    }
                    _ => {}
                }
                break;
            }
        }
        Ok(())
    }

    fn node_loads(&self) -> Vec<NodeLoad> {
        let mut nodes = loads(&self.l.nodes);
        for p in self.procs.values() {
            for n in nodes.iter_mut().filter(|n| p.nodes.contains(&n.id)) {
                n.residents.push(p.npc);
            }
        }
        nodes
    }

    fn dispatch(&mut self) -> Result<(), LauncherError> {
        let plan = {
            let runnable: Vec<Runnable<'_>> = self
                .held
                .values()
                .filter(|h| h.busy == Busy::Idle && !h.abandoned && h.task.state == TaskState::Preprocessed)
                .map(|h| Runnable {
                    task: &h.task,
                    waited_cycles: h.waited,
                })
                .collect();
            if runnable.is_empty() {
                return Ok(());
            }
            plan_assignments(&runnable, &self.node_loads(), self.l.config.mode, self.remaining())
        };
        for id in plan.too_long {
            info!("task {id} does not fit the remaining walltime; leaving it for another allocation");
            self.held.remove(&id);
            self.skipped.insert(id);
            self.pending.push(Op::Release { id });
        }
        for a in plan.assignments {
            self.start(a)?;
        }
        Ok(())
    }

    fn start(&mut self, a: Assignment) -> Result<(), LauncherError> {
        let id = a.task;
        let Some(h) = self.held.get(&id) else {
            return Ok(());
        };
        let (task, app) = (h.task.clone(), h.app.clone());
        let dir = task
            .work_dir
            .clone()
            .unwrap_or_else(|| work_dir_for(&self.l.project.data_dir(), &task));
        let root = self.l.project.root().to_path_buf();
        let command = render_launch_command(&task, &app.executable, self.template.as_ref(), self.l.config.mode, &a.nodes);

        self.advance(id, TaskState::Running, format!("on {}", a.nodes.join(",")));
        let now = self.store().now();
        self.pending.push(Op::DispatchStart {
            id,
            nodes: a.nodes.clone(),
            at: now,
        });
        self.summary.dispatched += 1;

        let spawned = command.map_err(|e| e.to_string()).and_then(|cmd| {
            std::fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
            let (program, args) = cmd.argv.split_first().ok_or("empty command")?;
            let mut env: Vec<(String, String)> = task.environment.clone().into_iter().collect();
            env.extend(context_env(&task, TaskState::Running, &root, None));
            if let Some(path) = stage::path_with_prefix(self.l.config.path_prefix.as_deref()) {
                env.push(("PATH".into(), path));
            }
            process::spawn(&stage::resolve_program(&root, program), args, &dir, env)
                .map_err(|e| format!("cannot start {program}: {e}"))
        });
        match spawned {
            Ok(mut child) => {
                let pid = child.id();
                let tx = self.events_tx.clone();
                thread::spawn(move || {
                    let status = child.wait();
                    let _ = tx.send(Event::Exited { id, status });
                });
                self.procs.insert(
                    id,
                    Proc {
                        pid,
                        nodes: a.nodes,
                        npc: task.node_packing_count.max(1),
                        stopping: None,
                        hard_killed: false,
                    },
                );
                if let Some(h) = self.held.get_mut(&id) {
                    h.busy = Busy::Running;
                    h.waited = 0;
                }
            }
            Err(msg) => {
                warn!("task {id}: {msg}");
                self.advance(id, TaskState::RunError, format!("spawn failed: {msg}"));
                let at = self.store().now();
                self.pending.push(Op::DispatchEnd {
                    id,
                    at,
                    outcome: "spawn-failed".into(),
                });
            }
        }
        Ok(())
    }

    fn on_event(&mut self, ev: Event) -> Result<(), LauncherError> {
        match ev {
            Event::Stage { id, kind, outcome } => {
                self.in_worker = self.in_worker.saturating_sub(1);
                self.on_stage(id, kind, outcome)
            }
            Event::Exited { id, status } => {
                self.on_exit(id, status);
                Ok(())
            }
        }
    }

    fn on_stage(&mut self, id: Uuid, kind: StageKind, outcome: StageOutcome) -> Result<(), LauncherError> {
        let Some(h) = self.held.get_mut(&id) else {
            return Ok(());
        };
        h.busy = Busy::Idle;
        if h.abandoned {
            self.held.remove(&id);
            return Ok(());
        }
        let state = h.task.state;
        match (kind, outcome) {
            (_, StageOutcome::Failed(msg)) => {
                if matches!(state, TaskState::RunError | TaskState::RunTimeout) {
                    self.advance(id, TaskState::Failed, format!("error handler failed: {msg}"));
                } else {
                    self.advance(id, TaskState::Failed, msg);
                }
            }
            (StageKind::StageIn, StageOutcome::StagedIn(dir)) => {
                h.task.work_dir = Some(dir.clone());
                self.pending.push(Op::WorkDir { id, dir });
                self.advance(id, TaskState::StagedIn, "");
            }
            (StageKind::Preprocess, _) => {
                self.advance(id, TaskState::Preprocessed, "");
            }
            (StageKind::Postprocess, _) if state == TaskState::RunDone => {
                self.advance(id, TaskState::Postprocessed, "");
            }
            (StageKind::Postprocess, _) => self.after_handler(id)?,
            (StageKind::StageOut, _) => {
                self.advance(id, TaskState::StagedOut, "");
                self.advance(id, TaskState::JobFinished, "");
            }
            (StageKind::StageIn, StageOutcome::Done) => {
                self.advance(id, TaskState::StagedIn, "");
            }
        }
        Ok(())
    }

    /// The error handler hook has run; whatever it did to the stored record
    /// decides what happens next.
    fn after_handler(&mut self, id: Uuid) -> Result<(), LauncherError> {
        self.flush()?;
        let stored = self.store().read(|tx| tx.find(id))?;
        let Some(h) = self.held.get_mut(&id) else {
            return Ok(());
        };
        match stored {
            Some(t) if t.state == h.task.state => {
                self.advance(id, TaskState::Failed, "error handler left the task unresolved");
            }
            Some(t) if t.lock_owner() == Some(self.owner.as_str()) && !t.state.is_terminal() => {
                h.task = t;
            }
            _ => {
                self.held.remove(&id);
                self.pending.push(Op::Release { id });
            }
        }
        Ok(())
    }

    fn on_exit(&mut self, id: Uuid, status: std::io::Result<std::process::ExitStatus>) {
        let Some(p) = self.procs.remove(&id) else {
            return;
        };
        let now = self.store().now();
        let cause = p.stopping.map(|(c, _)| c);
        let abandoned = self.held.get(&id).map_or(true, |h| h.abandoned);
        if abandoned || matches!(cause, Some(StopCause::LeaseLost) | Some(StopCause::User)) {
            let outcome = if cause == Some(StopCause::User) {
                self.summary.killed += 1;
                "killed"
            } else {
                "abandoned"
            };
            self.held.remove(&id);
            self.pending.push(Op::DispatchEnd {
                id,
                at: now,
                outcome: outcome.into(),
            });
            self.pending.push(Op::Release { id });
            return;
        }
        let kind = match (cause, &status) {
            (Some(StopCause::Timeout), _) => ExitKind::Timeout,
            (_, Ok(st)) => match (st.code(), st.signal()) {
                (Some(c), _) => ExitKind::Code(c),
                (None, Some(s)) => ExitKind::Signalled(s),
                (None, None) => ExitKind::Code(-1),
            },
            (_, Err(_)) => ExitKind::Code(-1),
        };
        let dir = self.held.get(&id).and_then(|h| h.task.work_dir.clone());
        let tail = match (kind, dir) {
            (ExitKind::Code(0), _) | (_, None) => String::new(),
            (_, Some(d)) => read_tail(&d.join(process::JOB_ERR)),
        };
        let (to, msg) = handle_exit(kind, &tail);
        if let Some(h) = self.held.get_mut(&id) {
            h.busy = Busy::Idle;
            h.exit_code = match kind {
                ExitKind::Code(c) => Some(c),
                ExitKind::Signalled(s) => Some(128 + s),
                _ => None,
            };
        }
        self.pending.push(Op::DispatchEnd {
            id,
            at: now,
            outcome: to.as_str().into(),
        });
        self.advance(id, to, msg);
    }

    /// Commits queued updates in one transaction. Changes the stored record
    /// no longer accepts mark the task as diverged.
    fn flush(&mut self) -> Result<(), LauncherError> {
        if self.pending.is_empty() {
            return Ok(());
        }
        let ops = std::mem::take(&mut self.pending);
        let owner = self.owner.clone();
        let diverged = self.store().transaction(|tx| -> Result<BTreeSet<Uuid>, LauncherError> {
            let mut diverged = BTreeSet::new();
            for op in &ops {
                match op {
                    Op::Change { expected, change } => {
                        if diverged.contains(&change.id) {
                            continue;
                        }
                        match tx.apply_if(Some(&owner), *expected, change)? {
                            Some(t) if t.state.is_terminal() => {
                                dag::on_parent_terminal_in(tx, t.id)?;
                                tx.release(&owner, &[t.id])?;
                            }
                            Some(_) => {}
                            None => {
                                diverged.insert(change.id);
                            }
                        }
                    }
                    Op::WorkDir { id, dir } => {
                        if !diverged.contains(id) && tx.find(*id)?.is_some() {
                            tx.set_work_dir(*id, dir)?;
                        }
                    }
                    Op::DispatchStart { id, nodes, at } => {
                        tx.log_dispatch(*id, &owner, nodes, *at)?;
                    }
                    Op::DispatchEnd { id, at, outcome } => {
                        tx.end_dispatch(*id, &owner, *at, outcome)?;
                    }
                    Op::Release { id } => {
                        tx.release(&owner, &[*id])?;
                    }
                }
            }
            Ok(diverged)
        })?;
        if !diverged.is_empty() {
            self.reconcile(&diverged)?;
        }
        Ok(())
    }

    /// Looks for held tasks killed by a user, removed, or leased away.
    fn check_held(&mut self) -> Result<(), LauncherError> {
        let ids: BTreeSet<Uuid> = self.held.keys().copied().collect();
        if ids.is_empty() {
            return Ok(());
        }
        self.reconcile(&ids)
    }

    fn reconcile(&mut self, ids: &BTreeSet<Uuid>) -> Result<(), LauncherError> {
        let stored: HashMap<Uuid, Task> = self
            .store()
            .query(&TaskFilter::all().ids(ids.iter().copied()))?
            .into_iter()
            .map(|t| (t.id, t))
            .collect();
        for id in ids {
            let Some(h) = self.held.get_mut(id) else { continue };
            let cause = match stored.get(id) {
                Some(t) if t.state == TaskState::UserKilled => StopCause::User,
                Some(t) if t.lock_owner() == Some(self.owner.as_str()) && !t.state.is_terminal() => {
                    if t.state != h.task.state && h.busy == Busy::Idle {
                        // changed underneath us, e.g. by a hook through the CLI
                        h.task = t.clone();
                    }
                    continue;
                }
                _ => StopCause::LeaseLost,
            };
            info!("task {id} moved on without this launcher ({cause:?})");
            h.abandoned = true;
            match h.busy {
                Busy::Running => self.stop_proc(*id, cause),
                Busy::Worker => {}
                Busy::Idle => {
                    self.held.remove(id);
                    self.pending.push(Op::Release { id: *id });
                }
            }
        }
        Ok(())
    }
}

/// Owner string for a launcher started by this process.
pub fn default_owner() -> String {
    LauncherConfig::new(JobMode::Serial).owner
}

/// Work directory of a task inside `project`.
pub fn task_dir(project: &Project, task: &Task) -> PathBuf {
    task.work_dir.clone().unwrap_or_else(|| work_dir_for(&project.data_dir(), task))
}

