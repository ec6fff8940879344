//! Boundary to batch schedulers and MPI launchers.
//!
//! An adapter submits batch scripts, reports their status, deletes them and
//! reads the job environment a launcher finds itself in. `local` and `mock`
//! are fully functional; `cobalt`, `slurm` and `pbs` shell out to the site's
//! client binaries.

mod hostlist;
mod local;
mod mock;
mod shell;
pub mod template;

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use hostlist::expand_hostlist;
pub use local::{virtual_node_ids, LocalPlatform};
pub use mock::{MockJobInfo, MockScheduler};
pub use shell::{ShellKind, ShellScheduler};
pub use template::{render_launch_command, BatchTemplate, LaunchCommand, LaunchTemplate, DEFAULT_BATCH_TEMPLATE};

use crate::service::BatchJobSpec;

pub const ENV_LOCAL_NODES: &str = "PILOTGRID_LOCAL_NODES";
pub const ENV_TIME_LIMIT_MIN: &str = "PILOTGRID_TIME_LIMIT_MIN";
pub const ENV_NODEFILE: &str = "PILOTGRID_NODEFILE";

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error("missing job environment: {0}")]
    MissingEnvironment(String),
    #[error("unknown launch template {0:?}")]
    UnknownTemplate(String),
    #[error("unbound placeholder {{{0}}}")]
    UnboundPlaceholder(String),
    #[error("submit failed: {0}")]
    SubmitFailure(String),
    #[error("unknown scheduler job {0:?}")]
    UnknownJob(String),
    #[error("bad node list {0:?}")]
    BadNodeList(String),
    #[error("unknown platform {0:?}")]
    UnknownPlatform(String),
    #[error("scheduler client failed: {0}")]
    Client(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = PlatformError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobMode {
    /// Single-node, single-rank tasks forked directly, several per node.
    Serial,
    /// One launch command per task, each on dedicated nodes.
    #[serde(alias = "per_task_launch")]
    Mpi,
}

impl JobMode {
    pub fn as_str(self) -> &'static str {
        match self {
            JobMode::Serial => "serial",
            JobMode::Mpi => "mpi",
        }
    }
}

impl fmt::Display for JobMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for JobMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "serial" => Ok(JobMode::Serial),
            "mpi" | "per_task_launch" | "per-task-launch" => Ok(JobMode::Mpi),
            other => Err(format!("unknown job mode {other:?} (expected serial or mpi)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub capacity_slots: u32,
}

/// The compute nodes of one allocation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSet {
    pub nodes: Vec<NodeSpec>,
    /// Seconds left in the allocation; `None` when unbounded.
    pub remaining_walltime: Option<f64>,
}

impl NodeSet {
    pub fn from_ids(ids: impl IntoIterator<Item = String>, remaining_walltime: Option<f64>) -> Self {
        NodeSet {
            nodes: ids
                .into_iter()
                .map(|id| NodeSpec { id, capacity_slots: 1 })
                .collect(),
            remaining_walltime,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sets every node's slot count for the given mode.
    pub fn with_slots(mut self, mode: JobMode, serial_slots: u32) -> Self {
        let slots = match mode {
            JobMode::Serial => serial_slots.max(1),
            JobMode::Mpi => 1,
        };
        for n in &mut self.nodes {
            n.capacity_slots = slots;
        }
        self
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchedStatus {
    Queued,
    Running,
    Finished,
    Vanished,
}

impl SchedStatus {
    fn rank(self) -> u8 {
        match self {
            SchedStatus::Queued => 0,
            SchedStatus::Running => 1,
            SchedStatus::Finished | SchedStatus::Vanished => 2,
        }
    }

    pub fn is_final(self) -> bool {
        self.rank() == 2
    }
}

pub trait SchedulerAdapter: Send + Sync + fmt::Debug {
    fn name(&self) -> &str;
    /// Submits `script` for `spec`; returns the scheduler's job id.
    fn submit(&self, script: &Path, spec: &BatchJobSpec) -> Result<String>;
    fn status(&self, scheduler_id: &str) -> Result<SchedStatus>;
    fn delete(&self, scheduler_id: &str) -> Result<()>;
    /// Reads the allocation a launcher is running inside.
    fn detect_environment(&self, env: &BTreeMap<String, String>) -> Result<NodeSet>;
}

/// Keeps reported statuses monotone: once a job is seen running it is never
/// reported queued again, and final states stick.
#[derive(Debug, Default)]
pub(crate) struct StatusLatch {
    seen: Mutex<BTreeMap<String, SchedStatus>>,
}

impl StatusLatch {
    pub(crate) fn observe(&self, id: &str, raw: SchedStatus) -> SchedStatus {
        let mut seen = self.seen.lock().unwrap_or_else(|p| p.into_inner());
        let next = match seen.get(id) {
            Some(prev) if prev.is_final() => *prev,
            Some(prev) if raw.rank() < prev.rank() => *prev,
            _ => raw,
        };
        seen.insert(id.to_string(), next);
        next
    }

    pub(crate) fn last(&self, id: &str) -> Option<SchedStatus> {
        self.seen
            .lock()
            .unwrap_or_else(|p| p.into_inner())
            .get(id)
            .copied()
    }
}

pub(crate) fn time_limit_secs(env: &BTreeMap<String, String>) -> Result<Option<f64>> {
    match env.get(ENV_TIME_LIMIT_MIN) {
        None => Ok(None),
        Some(v) => v
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|m| m.is_finite() && *m > 0.0)
            .map(|m| Some(m * 60.0))
            .ok_or_else(|| {
                PlatformError::MissingEnvironment(format!("{ENV_TIME_LIMIT_MIN}={v:?} is not a positive number"))
            }),
    }
}

/// Reads one node id per non-empty line, dropping duplicates (PBS repeats a
/// host once per core).
pub(crate) fn read_nodefile(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| {
        PlatformError::MissingEnvironment(format!("cannot read node file {}: {e}", path.display()))
    })?;
    let mut seen = std::collections::HashSet::new();
    Ok(text
        .lines()
        .map(str::trim)
        .filter(|l| !l.is_empty())
        .filter(|l| seen.insert(l.to_string()))
        .map(str::to_string)
        .collect())
}

/// Builds an adapter by name. `auto` picks one from the environment.
pub fn adapter_for(name: &str, env: &BTreeMap<String, String>) -> Result<Arc<dyn SchedulerAdapter>> {
    let name = if name == "auto" { detect_platform(env) } else { name };
    Ok(match name {
        "local" => Arc::new(LocalPlatform::from_env(env)?),
        "mock" => Arc::new(MockScheduler::new(crate::clock::system(), mock_pool(env))),
        "cobalt" => Arc::new(ShellScheduler::new(ShellKind::Cobalt)),
        "slurm" => Arc::new(ShellScheduler::new(ShellKind::Slurm)),
        "pbs" => Arc::new(ShellScheduler::new(ShellKind::Pbs)),
        other => return Err(PlatformError::UnknownPlatform(other.to_string())),
    })
}

fn mock_pool(env: &BTreeMap<String, String>) -> u32 {
    env.get("PILOTGRID_MOCK_NODES")
        .and_then(|v| v.parse().ok())
        .filter(|n| *n > 0)
        .unwrap_or(128)
}

/// Guesses which adapter's environment convention is present.
pub fn detect_platform(env: &BTreeMap<String, String>) -> &'static str {
    if env.contains_key(ENV_NODEFILE) {
        "mock"
    } else if env.contains_key("COBALT_PARTNAME") || env.contains_key("COBALT_JOBID") {
        "cobalt"
    } else if env.contains_key("SLURM_JOB_NODELIST") {
        "slurm"
    } else if env.contains_key("PBS_NODEFILE") {
        "pbs"
    } else {
        "local"
    }
}

pub fn process_env() -> BTreeMap<String, String> {
    std::env::vars().collect()
}

/// Where batch scripts for a project are written before submission.
pub fn script_path(dir: &Path, spec: &BatchJobSpec) -> PathBuf {
    dir.join(format!("batch-{}.sh", &spec.id.simple().to_string()[..8]))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn job_mode_parsing() {
        assert_eq!("serial".parse::<JobMode>().unwrap(), JobMode::Serial);
        assert_eq!("MPI".parse::<JobMode>().unwrap(), JobMode::Mpi);
        assert_eq!("per_task_launch".parse::<JobMode>().unwrap(), JobMode::Mpi);
        assert!("nope".parse::<JobMode>().is_err());
    }

    #[test]
    fn latch_is_monotone() {
        let latch = StatusLatch::default();
        assert_eq!(latch.observe("1", SchedStatus::Running), SchedStatus::Running);
        assert_eq!(latch.observe("1", SchedStatus::Queued), SchedStatus::Running);
        assert_eq!(latch.observe("1", SchedStatus::Finished), SchedStatus::Finished);
        assert_eq!(latch.observe("1", SchedStatus::Running), SchedStatus::Finished);
    }

    #[test]
    fn platform_detection() {
        let mut env = BTreeMap::new();
        assert_eq!(detect_platform(&env), "local");
        env.insert("SLURM_JOB_NODELIST".into(), "n[1-2]".into());
        assert_eq!(detect_platform(&env), "slurm");
        env.insert(ENV_NODEFILE.into(), "/tmp/x".into());
        assert_eq!(detect_platform(&env), "mock");
        assert!(matches!(
            adapter_for("nope", &env),
            Err(PlatformError::UnknownPlatform(_))
        ));
    }

    #[test]
    fn nodefile_dedup() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("nodes");
        std::fs::write(&p, "a\na\n\nb\n").unwrap();
        assert_eq!(read_nodefile(&p).unwrap(), ["a", "b"]);
        assert!(matches!(
            read_nodefile(&dir.path().join("missing")),
            Err(PlatformError::MissingEnvironment(_))
        ));
    }
}
