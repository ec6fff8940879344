//! Adapters that drive a site's scheduler through its command-line clients.
//!
//! These are thin and only as good as the parsing below; they are exercised
//! against fake client scripts, not real sites.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Command;

use chrono::Utc;

use super::{
    expand_hostlist, read_nodefile, time_limit_secs, NodeSet, PlatformError, Result, SchedStatus,
    SchedulerAdapter, StatusLatch,
};
use crate::service::BatchJobSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ShellKind {
    Cobalt,
    Slurm,
    Pbs,
}

#[derive(Debug)]
pub struct ShellScheduler {
    kind: ShellKind,
    bin_dir: Option<PathBuf>,
    latch: StatusLatch,
}

impl ShellScheduler {
    pub fn new(kind: ShellKind) -> ShellScheduler {
        ShellScheduler {
            kind,
            bin_dir: None,
            latch: StatusLatch::default(),
        }
    }

    /// Uses client binaries from `dir` instead of `PATH`.
    pub fn with_bin_dir(kind: ShellKind, dir: impl Into<PathBuf>) -> ShellScheduler {
        ShellScheduler {
            bin_dir: Some(dir.into()),
            ..Self::new(kind)
        }
    }

    fn run(&self, program: &str, args: &[String]) -> Result<(bool, String)> {
        let exe = match &self.bin_dir {
            Some(dir) => dir.join(program),
            None => PathBuf::from(program),
        };
        let out = Command::new(&exe)
            .args(args)
            .output()
            .map_err(|e| PlatformError::Client(format!("{}: {e}", exe.display())))?;
        let mut text = String::from_utf8_lossy(&out.stdout).into_owned();
        if !out.status.success() {
            text.push_str(&String::from_utf8_lossy(&out.stderr));
        }
        Ok((out.status.success(), text))
    }

    fn gone(&self, id: &str) -> SchedStatus {
        match self.latch.last(id) {
            Some(SchedStatus::Running) | Some(SchedStatus::Finished) => SchedStatus::Finished,
            _ => SchedStatus::Vanished,
        }
    }
}

fn minutes_ceil(m: f64) -> u64 {
    m.ceil().max(1.0) as u64
}

fn hhmmss(m: f64) -> String {
    let secs = (m * 60.0).ceil() as u64;
    format!("{:02}:{:02}:{:02}", secs / 3600, secs / 60 % 60, secs % 60)
}

fn last_line(text: &str) -> Option<&str> {
    text.lines().map(str::trim).filter(|l| !l.is_empty()).last()
}

/// Reads `key = value` or `key: value` from a status dump.
fn field<'a>(text: &'a str, key: &str) -> Option<&'a str> {
    text.lines().find_map(|l| {
        let l = l.trim();
        let rest = l.strip_prefix(key)?.trim_start();
        let rest = rest.strip_prefix('=').or_else(|| rest.strip_prefix(':'))?;
        Some(rest.trim())
    })
}

fn remaining_from_epoch(env: &BTreeMap<String, String>, key: &str) -> Option<f64> {
    let end: i64 = env.get(key)?.trim().parse().ok()?;
    Some(((end - Utc::now().timestamp()) as f64).max(0.0))
}

impl SchedulerAdapter for ShellScheduler {
    fn name(&self) -> &str {
        match self.kind {
            ShellKind::Cobalt => "cobalt",
            ShellKind::Slurm => "slurm",
            ShellKind::Pbs => "pbs",
        }
    }

    fn submit(&self, script: &Path, spec: &BatchJobSpec) -> Result<String> {
        let script = script.display().to_string();
        let n = spec.num_nodes.to_string();
        let q = spec.queue_name.clone();
        let (program, args) = match self.kind {
            ShellKind::Cobalt => (
                "qsub",
                vec![
                    "-n".into(),
                    n,
                    "-t".into(),
                    minutes_ceil(spec.walltime_minutes).to_string(),
                    "-q".into(),
                    q,
                    "--mode".into(),
                    "script".into(),
                    script,
                ],
            ),
            ShellKind::Slurm => (
                "sbatch",
                vec![
                    "--parsable".into(),
                    "-N".into(),
                    n,
                    "-t".into(),
                    minutes_ceil(spec.walltime_minutes).to_string(),
                    "-p".into(),
                    q,
                    script,
                ],
            ),
            ShellKind::Pbs => (
                "qsub",
                vec![
                    "-l".into(),
                    format!("select={n}"),
                    "-l".into(),
                    format!("walltime={}", hhmmss(spec.walltime_minutes)),
                    "-q".into(),
                    q,
                    script,
                ],
            ),
        };
        let (ok, out) = self.run(program, &args)?;
        if !ok {
            return Err(PlatformError::SubmitFailure(out.trim().to_string()));
        }
        let line = last_line(&out).ok_or_else(|| PlatformError::SubmitFailure("empty reply".into()))?;
        let id = match self.kind {
            ShellKind::Slurm => line.split(';').next().unwrap_or(line),
            _ => line,
        };
        self.latch.observe(id, SchedStatus::Queued);
        Ok(id.to_string())
    }

    fn status(&self, scheduler_id: &str) -> Result<SchedStatus> {
        let raw = match self.kind {
            ShellKind::Cobalt => {
                let (ok, out) = self.run("qstat", &["-f".into(), scheduler_id.into()])?;
                match field(&out, "State").filter(|_| ok) {
                    None => self.gone(scheduler_id),
                    Some(s) if s.starts_with("running") || s.starts_with("starting") || s.starts_with("exiting") => {
                        SchedStatus::Running
                    }
                    Some(_) => SchedStatus::Queued,
                }
            }
            ShellKind::Slurm => {
                let (ok, out) = self.run(
                    "squeue",
                    &["-h".into(), "-j".into(), scheduler_id.into(), "-o".into(), "%T".into()],
                )?;
                match last_line(&out).filter(|_| ok) {
                    None => self.gone(scheduler_id),
                    Some("RUNNING") | Some("COMPLETING") => SchedStatus::Running,
                    Some("COMPLETED") => SchedStatus::Finished,
                    Some("CANCELLED") | Some("FAILED") | Some("TIMEOUT") | Some("NODE_FAIL") => {
                        self.gone(scheduler_id)
                    }
                    Some(_) => SchedStatus::Queued,
                }
            }
            ShellKind::Pbs => {
                let (ok, out) = self.run("qstat", &["-f".into(), scheduler_id.into()])?;
                match field(&out, "job_state").filter(|_| ok) {
                    None => self.gone(scheduler_id),
                    Some("R") | Some("E") => SchedStatus::Running,
                    Some("F") => SchedStatus::Finished,
                    Some(_) => SchedStatus::Queued,
                }
            }
        };
        Ok(self.latch.observe(scheduler_id, raw))
    }

    fn delete(&self, scheduler_id: &str) -> Result<()> {
        let program = match self.kind {
            ShellKind::Cobalt | ShellKind::Pbs => "qdel",
            ShellKind::Slurm => "scancel",
        };
        let (ok, out) = self.run(program, &[scheduler_id.into()])?;
        if !ok {
            return Err(PlatformError::Client(out.trim().to_string()));
        }
        self.latch.observe(scheduler_id, SchedStatus::Vanished);
        Ok(())
    }

    fn detect_environment(&self, env: &BTreeMap<String, String>) -> Result<NodeSet> {
        let missing = |k: &str| PlatformError::MissingEnvironment(format!("{k} is not set"));
        let (nodes, remaining) = match self.kind {
            ShellKind::Cobalt => {
                let part = env.get("COBALT_PARTNAME").ok_or_else(|| missing("COBALT_PARTNAME"))?;
                (expand_hostlist(part)?, remaining_from_epoch(env, "COBALT_ENDTIME"))
            }
            ShellKind::Slurm => {
                let list = env.get("SLURM_JOB_NODELIST").ok_or_else(|| missing("SLURM_JOB_NODELIST"))?;
                (expand_hostlist(list)?, remaining_from_epoch(env, "SLURM_JOB_END_TIME"))
            }
            ShellKind::Pbs => {
                let file = env.get("PBS_NODEFILE").ok_or_else(|| missing("PBS_NODEFILE"))?;
                let secs = env.get("PBS_WALLTIME").and_then(|v| v.trim().parse::<f64>().ok());
                (read_nodefile(Path::new(file))?, secs)
            }
        };
        if nodes.is_empty() {
            return Err(PlatformError::MissingEnvironment("allocation lists no nodes".into()));
        }
        let remaining = time_limit_secs(env)?.or(remaining);
        Ok(NodeSet::from_ids(nodes, remaining))
    }
}
