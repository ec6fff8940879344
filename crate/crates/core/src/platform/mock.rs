//! In-process batch scheduler for desk-scale runs and tests.
//!
//! Jobs start strictly first-in first-out when enough pool nodes are free.
//! A started job runs its script as a real child process with
//! `PILOTGRID_NODEFILE` and `PILOTGRID_TIME_LIMIT_MIN` set, and is terminated
//! when its walltime runs out.

use std::collections::{BTreeMap, VecDeque};
use std::fs::{self, File};
use std::os::unix::process::CommandExt;
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, Utc};

use super::{
    read_nodefile, time_limit_secs, NodeSet, PlatformError, Result, SchedStatus, SchedulerAdapter,
    ENV_NODEFILE, ENV_TIME_LIMIT_MIN,
};
use crate::clock::Clock;
use crate::service::BatchJobSpec;

const TICK: StdDuration = StdDuration::from_millis(50);
const KILL_GRACE_SECS: i64 = 5;

/// Snapshot of one mock job.
#[derive(Debug, Clone, PartialEq)]
pub struct MockJobInfo {
    pub id: String,
    pub num_nodes: u32,
    pub status: SchedStatus,
    pub nodes: Vec<String>,
    pub submitted: DateTime<Utc>,
    pub started: Option<DateTime<Utc>>,
    pub ended: Option<DateTime<Utc>>,
    pub exit_code: Option<i32>,
    pub timed_out: bool,
}

#[derive(Debug)]
struct MockJob {
    info: MockJobInfo,
    walltime_minutes: f64,
    script: PathBuf,
    child: Option<Child>,
    term_sent: Option<DateTime<Utc>>,
}

#[derive(Debug)]
struct State {
    next_id: u64,
    queue: VecDeque<String>,
    jobs: BTreeMap<String, MockJob>,
    free: Vec<String>,
    paused: bool,
    reject: bool,
    extra_env: BTreeMap<String, String>,
}

#[derive(Debug)]
struct Shared {
    state: Mutex<State>,
    clock: Arc<dyn Clock>,
    pool: u32,
    dir: PathBuf,
    stop: AtomicBool,
}

#[derive(Debug)]
pub struct MockScheduler {
    shared: Arc<Shared>,
    ticker: Option<JoinHandle<()>>,
}

fn node_name(i: u32) -> String {
    format!("mock{i:05}")
}

impl MockScheduler {
    /// A scheduler over `node_pool` nodes that writes job files under a
    /// fresh directory in the system temp dir.
    pub fn new(clock: Arc<dyn Clock>, node_pool: u32) -> MockScheduler {
        let dir = std::env::temp_dir().join(format!(
            "pilotgrid-mock-{}-{}",
            std::process::id(),
            uuid::Uuid::new_v4().simple()
        ));
        Self::with_dir(clock, node_pool, dir)
    }

    pub fn with_dir(clock: Arc<dyn Clock>, node_pool: u32, dir: PathBuf) -> MockScheduler {
        assert!(node_pool > 0, "node pool must be positive");
        let shared = Arc::new(Shared {
            state: Mutex::new(State {
                next_id: 1,
                queue: VecDeque::new(),
                jobs: BTreeMap::new(),
                free: (0..node_pool).map(node_name).collect(),
                paused: false,
                reject: false,
                extra_env: BTreeMap::new(),
            }),
            clock,
            pool: node_pool,
            dir,
            stop: AtomicBool::new(false),
        });
        let worker = shared.clone();
        let ticker = thread::Builder::new()
            .name("mock-scheduler".into())
            .spawn(move || {
                while !worker.stop.load(Ordering::Relaxed) {
                    worker.tick();
                    thread::sleep(TICK);
                }
            })
            .expect("spawn mock scheduler thread");
        MockScheduler {
            shared,
            ticker: Some(ticker),
        }
    }

    pub fn pool(&self) -> u32 {
        self.shared.pool
    }

    pub fn dir(&self) -> &Path {
        &self.shared.dir
    }

    /// Extra environment passed to every job script.
    pub fn set_env(&self, key: impl Into<String>, value: impl Into<String>) {
        self.shared.lock().extra_env.insert(key.into(), value.into());
    }

    /// While paused, queued jobs do not start.
    pub fn set_paused(&self, paused: bool) {
        self.shared.lock().paused = paused;
    }

    /// Makes every submit fail, to exercise rollback paths.
    pub fn set_reject_submissions(&self, reject: bool) {
        self.shared.lock().reject = reject;
    }

    pub fn jobs(&self) -> Vec<MockJobInfo> {
        self.shared.lock().jobs.values().map(|j| j.info.clone()).collect()
    }

    pub fn job(&self, id: &str) -> Option<MockJobInfo> {
        self.shared.lock().jobs.get(id).map(|j| j.info.clone())
    }

    /// Runs one scheduling pass immediately.
    pub fn tick(&self) {
        self.shared.tick();
    }
}

impl Drop for MockScheduler {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(t) = self.ticker.take() {
            let _ = t.join();
        }
        let mut st = self.shared.lock();
        for job in st.jobs.values_mut() {
            if let Some(child) = job.child.as_mut() {
                signal_group(child.id(), libc::SIGKILL);
                let _ = child.wait();
            }
        }
    }
}

fn signal_group(pid: u32, sig: libc::c_int) {
    // SAFETY: plain syscall; a stale pgid only yields ESRCH.
    unsafe {
        libc::kill(-(pid as libc::pid_t), sig);
    }
}

impl Shared {
    fn lock(&self) -> std::sync::MutexGuard<'_, State> {
        self.state.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn tick(&self) {
        let now = self.clock.now();
        let mut st = self.lock();
        let st = &mut *st;
        for job in st.jobs.values_mut() {
            let Some(child) = job.child.as_mut() else { continue };
            match child.try_wait() {
                Ok(Some(status)) => {
                    job.info.exit_code = status.code();
                    job.info.status = SchedStatus::Finished;
                    job.info.ended = Some(now);
                    job.child = None;
                    st.free.append(&mut job.info.nodes.clone());
                }
                Ok(None) => {
                    let started = job.info.started.unwrap_or(now);
                    let limit = started + Duration::milliseconds((job.walltime_minutes * 60_000.0) as i64);
                    if now >= limit {
                        match job.term_sent {
                            None => {
                                job.info.timed_out = true;
                                job.term_sent = Some(now);
                                signal_group(child.id(), libc::SIGTERM);
                            }
                            Some(t) if now - t >= Duration::seconds(KILL_GRACE_SECS) => {
                                signal_group(child.id(), libc::SIGKILL);
                            }
                            Some(_) => {}
                        }
                    }
                }
                Err(_) => {}
            }
        }
        st.free.sort();
        if st.paused {
            return;
        }
        while let Some(id) = st.queue.front().cloned() {
            let need = st.jobs[&id].info.num_nodes as usize;
            if need > st.free.len() {
                break;
            }
            st.queue.pop_front();
            let nodes: Vec<String> = st.free.drain(..need).collect();
            let env = st.extra_env.clone();
            let job = st.jobs.get_mut(&id).expect("queued job exists");
            job.info.nodes = nodes;
            job.info.started = Some(now);
            job.info.status = SchedStatus::Running;
            match self.start(&id, job, &env) {
                Ok(child) => job.child = Some(child),
                Err(e) => {
                    log::warn!("mock job {id} failed to start: {e}");
                    job.info.status = SchedStatus::Finished;
                    job.info.ended = Some(now);
                    job.info.exit_code = Some(127);
                    st.free.append(&mut job.info.nodes.clone());
                    st.free.sort();
                }
            }
        }
    }

    fn start(&self, id: &str, job: &MockJob, env: &BTreeMap<String, String>) -> std::io::Result<Child> {
        fs::create_dir_all(&self.dir)?;
        let nodefile = self.dir.join(format!("{id}.nodes"));
        fs::write(&nodefile, job.info.nodes.join("\n") + "\n")?;
        let out = File::create(self.dir.join(format!("{id}.out")))?;
        let err = File::create(self.dir.join(format!("{id}.err")))?;
        let mut cmd = Command::new("/bin/sh");
        cmd.arg(&job.script)
            .envs(env)
            .env(ENV_NODEFILE, &nodefile)
            .env(ENV_TIME_LIMIT_MIN, format!("{}", job.walltime_minutes))
            .env("PILOTGRID_MOCK_JOB_ID", id)
            .stdin(Stdio::null())
            .stdout(out)
            .stderr(err)
            .process_group(0);
        cmd.spawn()
    }
}

impl SchedulerAdapter for MockScheduler {
    fn name(&self) -> &str {
        "mock"
    }

    fn submit(&self, script: &Path, spec: &BatchJobSpec) -> Result<String> {
        let now = self.shared.clock.now();
        let mut st = self.shared.lock();
        if st.reject {
            return Err(PlatformError::SubmitFailure("mock scheduler is rejecting submissions".into()));
        }
        if spec.num_nodes == 0 || spec.num_nodes > self.shared.pool {
            return Err(PlatformError::SubmitFailure(format!(
                "{} nodes requested, pool has {}",
                spec.num_nodes, self.shared.pool
            )));
        }
        if !script.is_file() {
            return Err(PlatformError::SubmitFailure(format!("no script at {}", script.display())));
        }
        let id = format!("{}", st.next_id);
        st.next_id += 1;
        st.jobs.insert(
            id.clone(),
            MockJob {
                info: MockJobInfo {
                    id: id.clone(),
                    num_nodes: spec.num_nodes,
                    status: SchedStatus::Queued,
                    nodes: Vec::new(),
                    submitted: now,
                    started: None,
                    ended: None,
                    exit_code: None,
                    timed_out: false,
                },
                walltime_minutes: spec.walltime_minutes,
                script: script.to_path_buf(),
                child: None,
                term_sent: None,
            },
        );
        st.queue.push_back(id.clone());
        Ok(id)
    }

    fn status(&self, scheduler_id: &str) -> Result<SchedStatus> {
        self.shared
            .lock()
            .jobs
            .get(scheduler_id)
            .map(|j| j.info.status)
            .ok_or_else(|| PlatformError::UnknownJob(scheduler_id.to_string()))
    }

    fn delete(&self, scheduler_id: &str) -> Result<()> {
        let now = self.shared.clock.now();
        let mut st = self.shared.lock();
        let st = &mut *st;
        let job = st
            .jobs
            .get_mut(scheduler_id)
            .ok_or_else(|| PlatformError::UnknownJob(scheduler_id.to_string()))?;
        match job.info.status {
            SchedStatus::Queued => {
                st.queue.retain(|q| q != scheduler_id);
                job.info.status = SchedStatus::Vanished;
                job.info.ended = Some(now);
            }
            SchedStatus::Running => {
                if let Some(mut child) = job.child.take() {
                    signal_group(child.id(), libc::SIGKILL);
                    let _ = child.wait();
                }
                job.info.status = SchedStatus::Vanished;
                job.info.ended = Some(now);
                st.free.append(&mut job.info.nodes.clone());
                st.free.sort();
            }
            SchedStatus::Finished | SchedStatus::Vanished => {}
        }
        Ok(())
    }

    fn detect_environment(&self, env: &BTreeMap<String, String>) -> Result<NodeSet> {
        let path = env
            .get(ENV_NODEFILE)
            .ok_or_else(|| PlatformError::MissingEnvironment(format!("{ENV_NODEFILE} is not set")))?;
        let nodes = read_nodefile(Path::new(path))?;
        if nodes.is_empty() {
            return Err(PlatformError::MissingEnvironment(format!("{path} lists no nodes")));
        }
        Ok(NodeSet::from_ids(nodes, time_limit_secs(env)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::SystemClock;
    use crate::platform::JobMode;
    use std::time::Instant;

    fn spec(nodes: u32, minutes: f64) -> BatchJobSpec {
        BatchJobSpec::new("default", nodes, minutes, JobMode::Serial, Vec::new())
    }

    fn script(dir: &Path, name: &str, body: &str) -> PathBuf {
        let p = dir.join(name);
        fs::write(&p, body).unwrap();
        p
    }

    fn wait_for(mock: &MockScheduler, id: &str, want: SchedStatus, secs: u64) {
        let deadline = Instant::now() + StdDuration::from_secs(secs);
        while mock.status(id).unwrap() != want {
            assert!(Instant::now() < deadline, "job {id} never reached {want:?}");
            thread::sleep(StdDuration::from_millis(20));
        }
    }

    #[test]
    fn fifo_start_respects_pool() {
        let tmp = tempfile::tempdir().unwrap();
        let mock = MockScheduler::with_dir(Arc::new(SystemClock), 4, tmp.path().join("mock"));
        let s = script(tmp.path(), "a.sh", "sleep 0.4\n");
        let a = mock.submit(&s, &spec(3, 1.0)).unwrap();
        let b = mock.submit(&s, &spec(3, 1.0)).unwrap();
        wait_for(&mock, &a, SchedStatus::Running, 5);
        assert_eq!(mock.status(&b).unwrap(), SchedStatus::Queued);
        wait_for(&mock, &a, SchedStatus::Finished, 5);
        wait_for(&mock, &b, SchedStatus::Running, 5);
        let ja = mock.job(&a).unwrap();
        let jb = mock.job(&b).unwrap();
        assert!(jb.started.unwrap() >= ja.ended.unwrap());
        wait_for(&mock, &b, SchedStatus::Finished, 5);
        assert_eq!(mock.job(&b).unwrap().exit_code, Some(0));
    }

    #[test]
    fn delete_queued_job_vanishes() {
        let tmp = tempfile::tempdir().unwrap();
        let mock = MockScheduler::with_dir(Arc::new(SystemClock), 2, tmp.path().join("mock"));
        mock.set_paused(true);
        let s = script(tmp.path(), "a.sh", "true\n");
        let id = mock.submit(&s, &spec(1, 1.0)).unwrap();
        mock.delete(&id).unwrap();
        assert_eq!(mock.status(&id).unwrap(), SchedStatus::Vanished);
        mock.set_paused(false);
        mock.tick();
        assert_eq!(mock.status(&id).unwrap(), SchedStatus::Vanished);
    }

    #[test]
    fn full_pool_job_runs_immediately_with_nodefile() {
        let tmp = tempfile::tempdir().unwrap();
        let mock = MockScheduler::with_dir(Arc::new(SystemClock), 128, tmp.path().join("mock"));
        let out = tmp.path().join("env.txt");
        let s = script(
            tmp.path(),
            "a.sh",
            &format!("wc -l < \"$PILOTGRID_NODEFILE\" > {0}\necho $PILOTGRID_TIME_LIMIT_MIN >> {0}\n", out.display()),
        );
        let id = mock.submit(&s, &spec(128, 2.0)).unwrap();
        mock.tick();
        assert_ne!(mock.status(&id).unwrap(), SchedStatus::Queued);
        wait_for(&mock, &id, SchedStatus::Finished, 5);
        let text = fs::read_to_string(out).unwrap();
        let lines: Vec<&str> = text.lines().map(str::trim).collect();
        assert_eq!(lines, ["128", "2"]);
    }

    #[test]
    fn walltime_is_enforced() {
        let tmp = tempfile::tempdir().unwrap();
        let mock = MockScheduler::with_dir(Arc::new(SystemClock), 1, tmp.path().join("mock"));
        let s = script(tmp.path(), "a.sh", "exec sleep 30\n");
        let id = mock.submit(&s, &spec(1, 0.005)).unwrap();
        wait_for(&mock, &id, SchedStatus::Finished, 10);
        assert!(mock.job(&id).unwrap().timed_out);
    }

    #[test]
    fn oversized_and_rejected_submissions() {
        let tmp = tempfile::tempdir().unwrap();
        let mock = MockScheduler::with_dir(Arc::new(SystemClock), 2, tmp.path().join("mock"));
        let s = script(tmp.path(), "a.sh", "true\n");
        assert!(matches!(mock.submit(&s, &spec(3, 1.0)), Err(PlatformError::SubmitFailure(_))));
        mock.set_reject_submissions(true);
        assert!(matches!(mock.submit(&s, &spec(1, 1.0)), Err(PlatformError::SubmitFailure(_))));
        assert!(matches!(mock.status("99"), Err(PlatformError::UnknownJob(_))));
    }
}
