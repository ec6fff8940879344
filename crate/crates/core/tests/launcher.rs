use std::sync::atomic::AtomicBool;
use std::sync::Arc;
use std::time::Duration;

use pilotgrid::dag;
use pilotgrid::launcher::{Launcher, LauncherConfig, StopReason};
use pilotgrid::model::{AppDefinition, ErrorPolicy, Task, TaskState};
use pilotgrid::platform::{virtual_node_ids, JobMode, NodeSet};
use pilotgrid::project::Project;
use pilotgrid::store::{Store, TaskFilter};
use tempfile::TempDir;
use uuid::Uuid;

struct Fixture {
    _dir: TempDir,
    project: Project,
    store: Arc<Store>,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let project = Project::init(dir.path().join("proj")).unwrap();
    let store = Arc::new(project.open_store().unwrap());
    store.add_app(&AppDefinition::new("sh", "/bin/sh")).unwrap();
    Fixture {
        _dir: dir,
        project,
        store,
    }
}

fn config(mode: JobMode) -> LauncherConfig {
    let mut c = LauncherConfig::new(mode);
    c.cycle = Duration::from_millis(200);
    c.lease_seconds = 30.0;
    c.kill_grace = Duration::from_secs(2);
    c
}

fn sh(name: &str, script: &str) -> Task {
    let mut t = Task::new(name, "wf", "sh");
    t.args = format!("-c {}", shell_words::quote(script));
    t
}

fn run(fx: &Fixture, nodes: u32, cfg: LauncherConfig) -> pilotgrid::launcher::LaunchSummary {
    let nodes = NodeSet::from_ids(virtual_node_ids(nodes), None);
    let launcher = Launcher::new(fx.store.clone(), fx.project.clone(), nodes, cfg);
    launcher.run(&AtomicBool::new(false)).unwrap()
}

fn state(fx: &Fixture, id: Uuid) -> Task {
    fx.store.get(id).unwrap()
}

#[test]
fn empty_store_drains_at_once() {
    let fx = fixture();
    let start = std::time::Instant::now();
    let s = run(&fx, 2, config(JobMode::Serial));
    assert_eq!(s.reason, StopReason::Drained);
    assert_eq!(s.dispatched, 0);
    assert!(start.elapsed() < Duration::from_secs(5));
}

#[test]
fn diamond_runs_in_order_and_passes_files() {
    let fx = fixture();
    let a = dag::add_tasks(&fx.store, vec![sh("A", "echo a > a.dat")]).unwrap()[0];
    let mut mids = Vec::new();
    for n in ["B", "C", "D"] {
        let mut t = sh(n, &format!("cat a.dat > {n}.out; echo {n} >> {n}.out"));
        t.input_files = "*.dat".into();
        mids.push(dag::spawn(&fx.store, t, &[a]).unwrap());
    }
    let mut e = sh("E", "cat *.out > all.txt");
    e.input_files = "*.out".into();
    let e = dag::spawn(&fx.store, e, &mids).unwrap();
    assert_eq!(state(&fx, e).state, TaskState::AwaitingParents);

    let s = run(&fx, 2, config(JobMode::Serial));
    assert_eq!(s.reason, StopReason::Drained);
    let tasks = fx.store.query(&TaskFilter::all()).unwrap();
    assert!(tasks.iter().all(|t| t.state == TaskState::JobFinished), "{tasks:#?}");
    assert_eq!(s.finished, 5);

    let e = state(&fx, e);
    let e_start = e.state_history.iter().find(|ev| ev.state == TaskState::Running).unwrap().timestamp;
    for m in &mids {
        let t = state(&fx, *m);
        let done = t.state_history.iter().find(|ev| ev.state == TaskState::RunDone).unwrap().timestamp;
        assert!(done < e_start);
    }
    let dir = e.work_dir.unwrap();
    let all = std::fs::read_to_string(dir.join("all.txt")).unwrap();
    assert_eq!(all, "a\nB\na\nC\na\nD\n");
}

#[test]
fn exit_code_and_stderr_reach_history() {
    let fx = fixture();
    let id = dag::add_tasks(&fx.store, vec![sh("bad", "echo broken >&2; exit 7")]).unwrap()[0];
    let s = run(&fx, 1, config(JobMode::Serial));
    assert_eq!(s.failed, 1);
    let t = state(&fx, id);
    assert_eq!(t.state, TaskState::Failed);
    let err = t.state_history.iter().find(|e| e.state == TaskState::RunError).unwrap();
    assert_eq!(err.message, "exit code 7; stderr tail: broken");
}

#[test]
fn retry_policy_reruns_transient_failures() {
    let fx = fixture();
    let mut app = AppDefinition::new("flaky", "/bin/sh");
    app.error_policy = ErrorPolicy::Retry { max_attempts: 2 };
    fx.store.add_app(&app).unwrap();
    let mut t = sh("f", "if [ -e seen ]; then exit 0; fi; touch seen; exit 1");
    t.application = "flaky".into();
    let id = dag::add_tasks(&fx.store, vec![t]).unwrap()[0];
    run(&fx, 1, config(JobMode::Serial));
    let t = state(&fx, id);
    assert_eq!(t.state, TaskState::JobFinished);
    assert_eq!(t.attempts(), 2);
}

#[test]
fn packed_tasks_share_a_node() {
    let fx = fixture();
    let tasks: Vec<Task> = (0..4)
        .map(|i| {
            let mut t = sh(&format!("p{i}"), "sleep 0.5");
            t.node_packing_count = 2;
            t
        })
        .collect();
    dag::add_tasks(&fx.store, tasks).unwrap();
    let start = std::time::Instant::now();
    let s = run(&fx, 2, config(JobMode::Serial));
    assert_eq!(s.finished, 4);
    let log = fx.store.dispatch_log().unwrap();
    assert_eq!(log.len(), 4);
    // all four start before any ends
    let first_end = log.iter().filter_map(|r| r.ended).min().unwrap();
    assert!(log.iter().all(|r| r.started < first_end));
    assert!(start.elapsed() < Duration::from_secs(10));
}

#[test]
fn stop_flag_times_out_running_work() {
    let fx = fixture();
    let id = dag::add_tasks(&fx.store, vec![sh("long", "sleep 30")]).unwrap()[0];
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    std::thread::spawn(move || {
        std::thread::sleep(Duration::from_millis(1500));
        flag.store(true, std::sync::atomic::Ordering::SeqCst);
    });
    let nodes = NodeSet::from_ids(virtual_node_ids(1), None);
    let launcher = Launcher::new(fx.store.clone(), fx.project.clone(), nodes, config(JobMode::Serial));
    let s = launcher.run(&stop).unwrap();
    assert_eq!(s.reason, StopReason::Signal);
    let t = state(&fx, id);
    assert_eq!(t.state, TaskState::RestartReady);
    assert!(t.state_history.iter().any(|e| e.state == TaskState::RunTimeout));
    assert!(t.lease.is_none());
}

#[test]
fn user_kill_stops_the_process() {
    let fx = fixture();
    let id = dag::add_tasks(&fx.store, vec![sh("long", "sleep 30")]).unwrap()[0];
    let store = fx.store.clone();
    std::thread::spawn(move || {
        for _ in 0..100 {
            std::thread::sleep(Duration::from_millis(100));
            if store.get(id).unwrap().state == TaskState::Running {
                dag::kill(&store, id, true).unwrap();
                return;
            }
        }
    });
    let start = std::time::Instant::now();
    let s = run(&fx, 1, config(JobMode::Serial));
    assert_eq!(s.killed, 1);
    assert_eq!(state(&fx, id).state, TaskState::UserKilled);
    assert!(start.elapsed() < Duration::from_secs(10));
}
