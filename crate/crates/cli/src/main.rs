mod ls;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use log::info;
use uuid::Uuid;

use pilotgrid::analytics;
use pilotgrid::dag::{self, DagError};
use pilotgrid::launcher::{Launcher, LauncherConfig};
use pilotgrid::model::{AppDefinition, ErrorPolicy, ModelError, StageOut, Task, TaskState};
use pilotgrid::platform::{self, virtual_node_ids, BatchTemplate, JobMode, NodeSet, PlatformError};
use pilotgrid::project::{Project, ProjectError};
use pilotgrid::service::{QueuePolicy, Service, ServiceConfig, ServiceError};
use pilotgrid::store::{StateChange, Store, StoreError, TaskFilter};

#[derive(Parser)]
#[command(name = "pilotgrid", version, about = "Pilot-job workflow manager")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Create a new project directory
    Init { path: PathBuf },
    /// Print shell lines that make a project active
    Activate { path: PathBuf },
    /// Register an application
    App(AppArgs),
    /// Add a task and print its id
    Job(JobArgs),
    /// List tasks
    Ls(LsArgs),
    /// Add a dependency edge
    Dep { parent: String, child: String },
    /// Kill a task
    Kill {
        id: String,
        /// Also kill every descendant
        #[arg(long)]
        recursive: bool,
    },
    /// Delete tasks
    Rm(RmArgs),
    /// Move a task to a new state (for hooks)
    Mark {
        id: String,
        #[arg(long)]
        state: TaskState,
        #[arg(long, default_value = "")]
        message: String,
    },
    /// Run a launcher inside an allocation
    Launcher(LauncherArgs),
    /// Pack waiting tasks into batch jobs and submit them
    Service(ServiceArgs),
    /// Write state-count and utilization series
    Profile(ProfileArgs),
}

#[derive(Args)]
struct AppArgs {
    #[arg(long)]
    name: String,
    #[arg(long = "exec")]
    executable: String,
    #[arg(long)]
    preprocess: Option<String>,
    #[arg(long)]
    postprocess: Option<String>,
    /// fail, retry, retry:N or handler
    #[arg(long, default_value = "fail")]
    error_policy: ErrorPolicy,
    /// Send RUN_TIMEOUT through the error policy instead of restarting
    #[arg(long)]
    no_restart_on_timeout: bool,
}

#[derive(Args)]
struct JobArgs {
    #[arg(long)]
    name: String,
    #[arg(long, default_value = "default")]
    workflow: String,
    #[arg(long)]
    application: String,
    #[arg(long, default_value = "", allow_hyphen_values = true)]
    args: String,
    /// KEY=VALUE; repeatable
    #[arg(long = "env", value_parser = parse_env)]
    env: Vec<(String, String)>,
    #[arg(long, default_value_t = 1)]
    num_nodes: u32,
    #[arg(long, default_value_t = 1)]
    ranks_per_node: u32,
    #[arg(long, default_value_t = 1)]
    node_packing_count: u32,
    #[arg(long, default_value_t = 0.0)]
    wall_time_minutes: f64,
    #[arg(long, default_value = "")]
    input_files: String,
    /// Repeatable
    #[arg(long)]
    stage_in: Vec<PathBuf>,
    #[arg(long)]
    stage_out_patterns: Option<String>,
    #[arg(long)]
    stage_out_dest: Option<PathBuf>,
    /// Parent task id or unique prefix; repeatable
    #[arg(long)]
    parent: Vec<String>,
}

#[derive(Args)]
struct LsArgs {
    #[arg(long)]
    state: Vec<TaskState>,
    /// Substring of the task name
    #[arg(long)]
    name: Option<String>,
    #[arg(long)]
    wf: Option<String>,
    #[arg(long)]
    app: Option<String>,
    #[arg(long)]
    history: bool,
}

#[derive(Args)]
struct RmArgs {
    /// Task ids or unique prefixes
    ids: Vec<String>,
    #[arg(long)]
    wf: Option<String>,
    #[arg(long)]
    state: Vec<TaskState>,
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args)]
struct LauncherArgs {
    #[arg(long, default_value = "serial")]
    job_mode: JobMode,
    #[arg(long)]
    wf_filter: Option<String>,
    #[arg(long)]
    batch_tag: Option<Uuid>,
    /// Minutes before the launcher stops
    #[arg(long)]
    time_limit: Option<f64>,
    /// Run on this many local virtual nodes instead of detecting an allocation
    #[arg(long)]
    nodes: Option<u32>,
    #[arg(long, default_value_t = 120.0)]
    lease_seconds: f64,
    #[arg(long, default_value_t = 1.0)]
    cycle_seconds: f64,
    #[arg(long, default_value = "auto")]
    platform: String,
    #[arg(long, default_value = "mpirun")]
    launch_template: String,
    #[arg(long, default_value_t = 4)]
    workers: usize,
    #[arg(long, default_value_t = 10.0)]
    kill_grace: f64,
}

#[derive(Args)]
struct ServiceArgs {
    /// Print the packing plan without submitting
    #[arg(long)]
    dry_run: bool,
    #[arg(long)]
    once: bool,
    #[arg(long, default_value = "auto")]
    scheduler: String,
    #[arg(long, default_value_t = 10.0)]
    period: f64,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long)]
    wf: Option<String>,
    /// Directory for the CSV files
    #[arg(long, default_value = ".")]
    out: PathBuf,
    #[arg(long)]
    utilization: bool,
    /// Worker slots for utilization
    #[arg(long)]
    workers: Option<u32>,
}

fn parse_env(s: &str) -> Result<(String, String), String> {
    match s.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((k.to_string(), v.to_string())),
        _ => Err(format!("expected KEY=VALUE, got {s:?}")),
    }
}

/// A mistake by the caller rather than a fault in the system.
#[derive(Debug)]
struct UserError(String);

impl std::fmt::Display for UserError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UserError {}

fn user(msg: impl Into<String>) -> anyhow::Error {
    UserError(msg.into()).into()
}

fn store_user(e: &StoreError) -> bool {
    matches!(
        e,
        StoreError::DuplicateId(_)
            | StoreError::UnknownApplication(_)
            | StoreError::DuplicateApp(_)
            | StoreError::UnknownId(_)
            | StoreError::AmbiguousPrefix { .. }
            | StoreError::Model(_)
    )
}

fn is_user_error(e: &anyhow::Error) -> bool {
    e.chain().any(|c| {
        if c.is::<UserError>() || c.is::<ModelError>() {
            return true;
        }
        if let Some(e) = c.downcast_ref::<StoreError>() {
            return store_user(e);
        }
        if let Some(e) = c.downcast_ref::<ProjectError>() {
            return match e {
                ProjectError::Store(s) => store_user(s),
                ProjectError::Io(_) => false,
                _ => true,
            };
        }
        if let Some(e) = c.downcast_ref::<DagError>() {
            return match e {
                DagError::Store(s) => store_user(s),
                DagError::CycleDetected { .. }
                | DagError::ChildAlreadyStarted { .. }
                | DagError::AlreadyTerminal { .. }
                | DagError::BadPattern { .. }
                | DagError::Model(_) => true,
                _ => false,
            };
        }
        if let Some(e) = c.downcast_ref::<ServiceError>() {
            return matches!(e, ServiceError::AlreadyRunning);
        }
        if let Some(e) = c.downcast_ref::<PlatformError>() {
            return matches!(
                e,
                PlatformError::UnknownPlatform(_) | PlatformError::UnknownTemplate(_) | PlatformError::MissingEnvironment(_)
            );
        }
        false
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.command {
        Command::Launcher(_) | Command::Service(_) => "info",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if is_user_error(&e) {
                ExitCode::from(1)
            } else {
                ExitCode::from(2)
            }
        }
    }
}

fn project() -> anyhow::Result<Project> {
    Ok(Project::from_env(&platform::process_env())?)
}

fn open() -> anyhow::Result<(Project, Store)> {
    let p = project()?;
    let store = p.open_store()?;
    Ok((p, store))
}

fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Init { path } => {
            let p = Project::init(&path)?;
            println!("created project at {}", p.root().display());
            Ok(())
        }
        Command::Activate { path } => {
            print!("{}", Project::open(&path)?.activate_lines());
            Ok(())
        }
        Command::App(a) => add_app(a),
        Command::Job(j) => add_job(j),
        Command::Ls(a) => list(a),
        Command::Dep { parent, child } => {
            let (_, store) = open()?;
            let (p, c) = (store.resolve_prefix(&parent)?, store.resolve_prefix(&child)?);
            dag::add_dependency(&store, p, c)?;
            println!("{p} -> {c}");
            Ok(())
        }
        Command::Kill { id, recursive } => {
            let (_, store) = open()?;
            let id = store.resolve_prefix(&id)?;
            for killed in dag::kill(&store, id, recursive)? {
                println!("{killed}");
            }
            Ok(())
        }
        Command::Rm(a) => remove(a),
        Command::Mark { id, state, message } => mark(&id, state, message),
        Command::Launcher(a) => launcher(a),
        Command::Service(a) => service(a),
        Command::Profile(a) => profile(a),
    }
}

fn add_app(a: AppArgs) -> anyhow::Result<()> {
    let (_, store) = open()?;
    let app = AppDefinition {
        name: a.name,
        executable: a.executable,
        preprocess: a.preprocess,
        postprocess: a.postprocess,
        error_policy: a.error_policy,
        restart_on_timeout: !a.no_restart_on_timeout,
    };
    store.add_app(&app)?;
    println!("{}", app.name);
    Ok(())
}

fn add_job(j: JobArgs) -> anyhow::Result<()> {
    let (_, store) = open()?;
    let mut t = Task::new(j.name, j.workflow, j.application);
    t.args = j.args;
    t.environment = j.env.into_iter().collect();
    t.num_nodes = j.num_nodes;
    t.ranks_per_node = j.ranks_per_node;
    t.node_packing_count = j.node_packing_count;
    t.wall_time_minutes = j.wall_time_minutes;
    t.input_files = j.input_files;
    t.stage_in_sources = j.stage_in;
    t.stage_out = match (j.stage_out_patterns, j.stage_out_dest) {
        (Some(patterns), Some(destination)) => Some(StageOut { patterns, destination }),
        (None, None) => None,
        _ => return Err(user("--stage-out-patterns and --stage-out-dest go together")),
    };
    t.validate()?;
    if store.app(&t.application)?.is_none() {
        return Err(StoreError::UnknownApplication(t.application).into());
    }
    let parents = j
        .parent
        .iter()
        .map(|p| store.resolve_prefix(p))
        .collect::<Result<Vec<_>, _>>()?;
    // children spawned at runtime stay with their parents' allocation
    let tags: Vec<Option<Uuid>> = parents
        .iter()
        .map(|p| store.get(*p).map(|t| t.batch_tag))
        .collect::<Result<_, _>>()?;
    if let Some(first) = tags.first() {
        if tags.iter().all(|t| t == first) {
            t.batch_tag = *first;
        }
    }
    let id = dag::spawn(&store, t, &parents)?;
    println!("{id}");
    Ok(())
}

fn list(a: LsArgs) -> anyhow::Result<()> {
    let (_, store) = open()?;
    let mut f = TaskFilter::all();
    if !a.state.is_empty() {
        f = f.states(a.state);
    }
    if let Some(n) = a.name {
        f = f.name_contains(n);
    }
    if let Some(w) = a.wf {
        f = f.workflow(w);
    }
    if let Some(app) = a.app {
        f = f.application(app);
    }
    print!("{}", ls::render(&store.query(&f)?, a.history));
    Ok(())
}

fn remove(a: RmArgs) -> anyhow::Result<()> {
    let (_, store) = open()?;
    if a.ids.is_empty() && a.wf.is_none() && a.state.is_empty() && a.name.is_none() {
        return Err(user("rm needs task ids or a filter"));
    }
    let mut f = TaskFilter::all();
    if !a.ids.is_empty() {
        let ids = a
            .ids
            .iter()
            .map(|p| store.resolve_prefix(p))
            .collect::<Result<Vec<_>, _>>()?;
        f = f.ids(ids);
    }
    if let Some(w) = a.wf {
        f = f.workflow(w);
    }
    if !a.state.is_empty() {
        f = f.states(a.state);
    }
    if let Some(n) = a.name {
        f = f.name_contains(n);
    }
    for id in store.remove(&f)? {
        println!("{id}");
    }
    Ok(())
}

fn mark(id: &str, state: TaskState, message: String) -> anyhow::Result<()> {
    let (_, store) = open()?;
    let id = store.resolve_prefix(id)?;
    store.transaction(|tx| -> Result<(), DagError> {
        let at = tx.now().max(tx.task(id)?.last_timestamp());
        let t = tx.apply(&StateChange::new(id, state, message, at))?;
        if t.state.is_terminal() {
            dag::on_parent_terminal_in(tx, id)?;
        }
        Ok(())
    })?;
    println!("{id} {state}");
    Ok(())
}

/// Makes this binary's directory visible to hooks and batch scripts, which
/// call back into the CLI.
fn prepend_exe_dir_to_path() -> Option<PathBuf> {
    let dir = std::env::current_exe().ok()?.parent()?.to_path_buf();
    let mut paths = vec![dir.clone()];
    if let Some(old) = std::env::var_os("PATH") {
        paths.extend(std::env::split_paths(&old).filter(|p| p != &dir));
    }
    let joined = std::env::join_paths(paths).ok()?;
    std::env::set_var("PATH", joined);
    Some(dir)
}

fn stop_flag() -> anyhow::Result<Arc<AtomicBool>> {
    let stop = Arc::new(AtomicBool::new(false));
    for sig in [signal_hook::consts::SIGTERM, signal_hook::consts::SIGINT] {
        signal_hook::flag::register(sig, stop.clone())?;
    }
    Ok(stop)
}

fn launcher(a: LauncherArgs) -> anyhow::Result<()> {
    if !(a.lease_seconds > 0.0 && a.cycle_seconds > 0.0 && a.kill_grace >= 0.0) {
        return Err(user("--lease-seconds and --cycle-seconds must be positive"));
    }
    if a.lease_seconds < 2.0 * a.cycle_seconds {
        return Err(user("--lease-seconds must be at least twice --cycle-seconds"));
    }
    prepend_exe_dir_to_path();
    let (project, store) = open()?;
    let env = platform::process_env();
    let limit_secs = a.time_limit.map(|m| m * 60.0);
    let nodes = match a.nodes {
        Some(0) => return Err(user("--nodes must be positive")),
        Some(n) => NodeSet::from_ids(virtual_node_ids(n), limit_secs),
        None => {
            let adapter = platform::adapter_for(&a.platform, &env)?;
            let mut set = pilotgrid::launcher::detect_resources(&env, adapter.as_ref())?;
            if let Some(l) = limit_secs {
                set.remaining_walltime = Some(set.remaining_walltime.map_or(l, |r| r.min(l)));
            }
            set
        }
    };
    let mut config = LauncherConfig::new(a.job_mode);
    config.batch_tag = a.batch_tag;
    config.wf_filter = a.wf_filter;
    config.lease_seconds = a.lease_seconds;
    config.cycle = Duration::from_secs_f64(a.cycle_seconds);
    config.workers = a.workers.max(1);
    config.kill_grace = Duration::from_secs_f64(a.kill_grace);
    config.launch_template = a.launch_template;
    let stop = stop_flag()?;
    let l = Launcher::new(Arc::new(store), project, nodes, config);
    let s = l.run(&stop)?;
    println!(
        "dispatched {} finished {} failed {} killed {} ({:?})",
        s.dispatched, s.finished, s.failed, s.killed, s.reason
    );
    Ok(())
}

fn service(a: ServiceArgs) -> anyhow::Result<()> {
    if !(a.period > 0.0) {
        return Err(user("--period must be positive"));
    }
    prepend_exe_dir_to_path();
    let (project, store) = open()?;
    let env = platform::process_env();
    let adapter = platform::adapter_for(&a.scheduler, &env)?;
    let policy = QueuePolicy::load(&project.policy_path())?;
    let template = BatchTemplate::load(&project.batch_template_path())?;
    let svc = Service::new(Arc::new(store), adapter, policy, template, project.scripts_dir())?;
    if a.dry_run {
        dag::sweep(svc.store())?;
        let plan = svc.plan()?;
        for w in &plan.warnings {
            println!("warning: {w}");
        }
        for spec in &plan.specs {
            println!(
                "{} {} nodes {} min {} tasks",
                spec.queue_name,
                spec.num_nodes,
                spec.walltime_minutes,
                spec.task_ids.len()
            );
        }
        println!("{} tasks left waiting", plan.leftover.len());
        return Ok(());
    }
    let config = ServiceConfig {
        period: Duration::from_secs_f64(a.period),
        ..ServiceConfig::default()
    };
    info!("service using {} scheduler", a.scheduler);
    let stop = stop_flag()?;
    svc.run(&config, a.once, &stop)?;
    Ok(())
}

fn profile(a: ProfileArgs) -> anyhow::Result<()> {
    let (_, store) = open()?;
    let mut f = TaskFilter::all();
    if let Some(w) = &a.wf {
        f = f.workflow(w.clone());
    }
    let tasks = store.query(&f)?;
    let series = analytics::process_tasks(&tasks)?;
    std::fs::create_dir_all(&a.out).with_context(|| format!("creating {}", a.out.display()))?;
    let counts = a.out.join("state_counts.csv");
    write_csv(&counts, |w| series.write_csv(w))?;
    println!("wrote {}", counts.display());
    if a.utilization {
        let workers = a.workers.ok_or_else(|| user("--utilization needs --workers"))?;
        let u = analytics::utilization(&series, workers)?;
        let path = a.out.join("utilization.csv");
        write_csv(&path, |w| u.write_csv(w))?;
        println!("wrote {}", path.display());
        println!("mean utilization {:.4}", u.mean);
    }
    let done = tasks.iter().filter(|t| t.state == TaskState::JobFinished).count();
    println!("{} tasks, {} finished", tasks.len(), done);
    Ok(())
}

fn write_csv(
    path: &Path,
    body: impl FnOnce(&mut std::fs::File) -> Result<(), analytics::AnalyticsError>,
) -> anyhow::Result<()> {
    let mut f = std::fs::File::create(path).with_context(|| format!("creating {}", path.display()))?;
    body(&mut f)?;
    Ok(())
}

