use std::collections::BTreeMap;
use std::path::Path;

use super::{
    time_limit_secs, MockScheduler, NodeSet, PlatformError, Result, SchedStatus, SchedulerAdapter,
    ENV_LOCAL_NODES,
};
use crate::service::BatchJobSpec;

/// The workstation as a cluster: N virtual nodes on this host. Batch jobs
/// submitted here run immediately as host processes when nodes are free.
#[derive(Debug)]
pub struct LocalPlatform {
    nodes: u32,
    runner: MockScheduler,
}

impl LocalPlatform {
    pub fn new(virtual_nodes: u32) -> LocalPlatform {
        let nodes = virtual_nodes.max(1);
        LocalPlatform {
            nodes,
            runner: MockScheduler::new(crate::clock::system(), nodes),
        }
    }

    /// Sizes the platform from `PILOTGRID_LOCAL_NODES`, defaulting to the
    /// number of host CPUs.
    pub fn from_env(env: &BTreeMap<String, String>) -> Result<LocalPlatform> {
        let nodes = match env.get(ENV_LOCAL_NODES) {
            Some(v) => parse_nodes(v)?,
            None => std::thread::available_parallelism().map_or(1, |n| n.get() as u32),
        };
        Ok(Self::new(nodes))
    }

    pub fn virtual_nodes(&self) -> u32 {
        self.nodes
    }

    /// Extra environment for submitted batch scripts.
    pub fn set_env(&self, key: impl Into<String>, value: impl Into<String>) {
        self.runner.set_env(key, value);
    }
}

fn parse_nodes(v: &str) -> Result<u32> {
    v.trim()
        .parse::<u32>()
        .ok()
        .filter(|n| *n > 0)
        .ok_or_else(|| PlatformError::MissingEnvironment(format!("{ENV_LOCAL_NODES}={v:?} is not a positive integer")))
}

/// Virtual node ids for a local allocation of `n` nodes.
pub fn virtual_node_ids(n: u32) -> Vec<String> {
    (0..n).map(|i| format!("vnode{i}")).collect()
}

impl SchedulerAdapter for LocalPlatform {
    fn name(&self) -> &str {
        "local"
    }

    fn submit(&self, script: &Path, spec: &BatchJobSpec) -> Result<String> {
        self.runner.submit(script, spec)
    }

    fn status(&self, scheduler_id: &str) -> Result<SchedStatus> {
        self.runner.status(scheduler_id)
    }

    fn delete(&self, scheduler_id: &str) -> Result<()> {
        self.runner.delete(scheduler_id)
    }

    fn detect_environment(&self, env: &BTreeMap<String, String>) -> Result<NodeSet> {
        let raw = env
            .get(ENV_LOCAL_NODES)
            .ok_or_else(|| PlatformError::MissingEnvironment(format!("{ENV_LOCAL_NODES} is not set")))?;
        let n = parse_nodes(raw)?;
        Ok(NodeSet::from_ids(virtual_node_ids(n), time_limit_secs(env)?))
    }
}
