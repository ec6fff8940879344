//! The background service: packs eligible tasks into batch jobs, submits
//! them and reconciles the store with what the scheduler reports.
//!
//! Each cycle is idempotent, so the service can be killed and restarted at
//! any point. Only one service runs per store; a lock record enforces this.

mod pack;
mod policy;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use pack::{pack, task_minutes, PackResult, SAFETY_FACTOR};
pub use policy::{QueuePolicy, QueueRule, RangeRule};

use crate::dag;
use crate::model::{Task, TaskState};
use crate::platform::{BatchTemplate, JobMode, PlatformError, SchedStatus, SchedulerAdapter};
use crate::store::{Store, StoreError, TaskFilter, Txn};

pub const SERVICE_LOCK: &str = "service";
pub const DEFAULT_PERIOD: Duration = Duration::from_secs(10);

#[derive(Debug, Error)]
pub enum ServiceError {
    #[error("invalid queue policy: {0}")]
    InvalidPolicy(String),
    #[error("another service holds the lock for this project")]
    AlreadyRunning,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Platform(#[from] PlatformError),
    #[error(transparent)]
    Dag(#[from] dag::DagError),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = ServiceError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BatchStatus {
    PendingSubmit,
    Queued,
    Running,
    Finished,
    Vanished,
}

impl BatchStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            BatchStatus::PendingSubmit => "pending-submit",
            BatchStatus::Queued => "queued",
            BatchStatus::Running => "running",
            BatchStatus::Finished => "finished",
            BatchStatus::Vanished => "vanished",
        }
    }

    pub fn is_live(self) -> bool {
        matches!(self, BatchStatus::PendingSubmit | BatchStatus::Queued | BatchStatus::Running)
    }
}

impl fmt::Display for BatchStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// One elastic allocation request and the tasks packed into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchJobSpec {
    /// Also the batch tag carried by its tasks.
    pub id: Uuid,
    pub queue_name: String,
    pub num_nodes: u32,
    pub walltime_minutes: f64,
    pub job_mode: JobMode,
    pub task_ids: Vec<Uuid>,
    pub scheduler_id: Option<String>,
    pub status: BatchStatus,
}

impl BatchJobSpec {
    pub fn new(
        queue_name: impl Into<String>,
        num_nodes: u32,
        walltime_minutes: f64,
        job_mode: JobMode,
        task_ids: Vec<Uuid>,
    ) -> Self {
        BatchJobSpec {
            id: Uuid::new_v4(),
            queue_name: queue_name.into(),
            num_nodes,
            walltime_minutes,
            job_mode,
            task_ids,
            scheduler_id: None,
            status: BatchStatus::PendingSubmit,
        }
    }
}

const ELIGIBLE_STATES: [TaskState; 2] = [TaskState::Ready, TaskState::RestartReady];

fn eligible_filter() -> TaskFilter {
    TaskFilter::all()
        .states(ELIGIBLE_STATES)
        .unleased()
        .untagged()
}

/// Tasks that are ready, not held by a launcher and not already packed.
pub fn eligible(store: &Store) -> Result<Vec<Task>> {
    Ok(store.query(&eligible_filter())?)
}

/// Per-queue count of jobs that are pending submission or queued.
pub fn queued_counts(store: &Store) -> Result<BTreeMap<String, u32>> {
    let mut counts = BTreeMap::new();
    for spec in store.batch_jobs(Some(&[BatchStatus::PendingSubmit, BatchStatus::Queued]))? {
        *counts.entry(spec.queue_name).or_insert(0) += 1;
    }
    Ok(counts)
}

/// What reconcile did about one batch job.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Correction {
    Started { job: Uuid },
    Finished { job: Uuid, untagged: Vec<Uuid> },
    Vanished { job: Uuid, untagged: Vec<Uuid> },
}

#[derive(Debug, Default)]
pub struct CycleReport {
    pub corrections: Vec<Correction>,
    pub submitted: Vec<BatchJobSpec>,
    pub failed: Vec<(BatchJobSpec, String)>,
    pub leftover: Vec<Uuid>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone)]
pub struct ServiceConfig {
    pub period: Duration,
    /// Identity used for the service lock.
    pub owner: String,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        ServiceConfig {
            period: DEFAULT_PERIOD,
            owner: format!("service-{}-{}", std::process::id(), &Uuid::new_v4().simple().to_string()[..8]),
        }
    }
}

pub struct Service {
    store: Arc<Store>,
    adapter: Arc<dyn SchedulerAdapter>,
    policy: QueuePolicy,
    template: BatchTemplate,
    script_dir: PathBuf,
}

/// Clears the tag from tasks that have not reached a terminal state and are
/// not held by a live launcher. States are left alone.
fn untag_orphans(tx: &mut Txn<'_>, job: Uuid) -> Result<Vec<Uuid>> {
    let now = tx.now();
    let tasks = tx.query(&TaskFilter::all().batch_tag(job))?;
    let ids: Vec<Uuid> = tasks
        .iter()
        .filter(|t| !t.state.is_terminal() && !t.has_live_lease(now))
        .map(|t| t.id)
        .collect();
    tx.set_batch_tag(&ids, None)?;
    Ok(ids)
}

impl Service {
    pub fn new(
        store: Arc<Store>,
        adapter: Arc<dyn SchedulerAdapter>,
        policy: QueuePolicy,
        template: BatchTemplate,
        script_dir: PathBuf,
    ) -> Result<Service> {
        policy.validate()?;
        Ok(Service {
            store,
            adapter,
            policy,
            template,
            script_dir,
        })
    }

    pub fn store(&self) -> &Store {
        &self.store
    }

    pub fn policy(&self) -> &QueuePolicy {
        &self.policy
    }

    /// Packs without touching the store or the scheduler.
    pub fn plan(&self) -> Result<PackResult> {
        let tasks = eligible(&self.store)?;
        Ok(pack(&tasks, &self.policy, &queued_counts(&self.store)?))
    }

    /// Polls the scheduler for every live batch job and repairs drift.
    pub fn reconcile(&self) -> Result<Vec<Correction>> {
        let mut out = Vec::new();
        for spec in self.store.batch_jobs(Some(&[
            BatchStatus::PendingSubmit,
            BatchStatus::Queued,
            BatchStatus::Running,
        ]))? {
            let observed = match &spec.scheduler_id {
                // Left over from a cycle that died between tagging and
                // submitting; nothing will ever run it.
                None => SchedStatus::Vanished,
                Some(sid) => match self.adapter.status(sid) {
                    Ok(s) => s,
                    Err(PlatformError::UnknownJob(_)) => SchedStatus::Vanished,
                    Err(e) => {
                        log::warn!("status of batch job {} failed: {e}", spec.id);
                        continue;
                    }
                },
            };
            let next = match observed {
                SchedStatus::Queued => continue,
                SchedStatus::Running if spec.status == BatchStatus::Running => continue,
                SchedStatus::Running => BatchStatus::Running,
                SchedStatus::Finished => BatchStatus::Finished,
                SchedStatus::Vanished => BatchStatus::Vanished,
            };
            let correction = self.store.transaction(|tx| -> Result<Correction> {
                let mut updated = spec.clone();
                updated.status = next;
                tx.put_batch_job(&updated)?;
                Ok(match next {
                    BatchStatus::Running => Correction::Started { job: spec.id },
                    BatchStatus::Finished => Correction::Finished {
                        job: spec.id,
                        untagged: untag_orphans(tx, spec.id)?,
                    },
                    _ => Correction::Vanished {
                        job: spec.id,
                        untagged: untag_orphans(tx, spec.id)?,
                    },
                })
            })?;
            log::info!("reconcile: {correction:?}");
            out.push(correction);
        }
        Ok(out)
    }

    /// Packs eligible tasks and submits what the queue policy allows.
    pub fn submit_cycle(&self) -> Result<CycleReport> {
        let plan = self.plan()?;
        for w in &plan.warnings {
            log::warn!("{w}");
        }
        let mut report = CycleReport {
            leftover: plan.leftover,
            warnings: plan.warnings,
            ..CycleReport::default()
        };
        for mut spec in plan.specs {
            spec.id = Uuid::new_v4();
            spec.status = BatchStatus::PendingSubmit;
            // Tag only tasks that are still eligible at commit time.
            let tagged = self.store.transaction(|tx| -> Result<Vec<Uuid>> {
                let still = tx.ids(&eligible_filter().ids(spec.task_ids.iter().copied()))?;
                if still.is_empty() {
                    return Ok(still);
                }
                let keep: std::collections::HashSet<Uuid> = still.iter().copied().collect();
                spec.task_ids.retain(|id| keep.contains(id));
                tx.set_batch_tag(&spec.task_ids, Some(spec.id))?;
                tx.put_batch_job(&spec)?;
                Ok(still)
            })?;
            if tagged.is_empty() {
                continue;
            }
            let submitted = self
                .template
                .write(&spec, &self.script_dir)
                .and_then(|script| self.adapter.submit(&script, &spec));
            match submitted {
                Ok(sid) => {
                    spec.scheduler_id = Some(sid);
                    spec.status = BatchStatus::Queued;
                    self.store.transaction(|tx| tx.put_batch_job(&spec))?;
                    log::info!(
                        "submitted batch job {} ({} nodes, {} min, {} tasks) as {}",
                        spec.id,
                        spec.num_nodes,
                        spec.walltime_minutes,
                        spec.task_ids.len(),
                        spec.scheduler_id.as_deref().unwrap_or("?")
                    );
                    report.submitted.push(spec);
                }
                Err(e) => {
                    log::warn!("submit of batch job {} failed: {e}", spec.id);
                    self.store.transaction(|tx| -> Result<()> {
                        untag_orphans(tx, spec.id)?;
                        tx.delete_batch_job(spec.id)?;
                        Ok(())
                    })?;
                    report.failed.push((spec, e.to_string()));
                }
            }
        }
        Ok(report)
    }

    /// One full cycle: settle readiness, reconcile, then pack and submit.
    pub fn cycle(&self) -> Result<CycleReport> {
        dag::sweep(&self.store)?;
        let corrections = self.reconcile()?;
        let mut report = self.submit_cycle()?;
        report.corrections = corrections;
        Ok(report)
    }

    /// Runs cycles until `shutdown` is set. With `once`, runs one cycle.
    pub fn run(&self, config: &ServiceConfig, once: bool, shutdown: &AtomicBool) -> Result<()> {
        let ttl = (config.period.as_secs_f64() * 3.0).max(30.0);
        if !self.store.try_lock(SERVICE_LOCK, &config.owner, ttl)? {
            return Err(ServiceError::AlreadyRunning);
        }
        let outcome = (|| {
            loop {
                let started = Instant::now();
                if !self.store.try_lock(SERVICE_LOCK, &config.owner, ttl)? {
                    return Err(ServiceError::AlreadyRunning);
                }
                let report = self.cycle()?;
                log::info!(
                    "service cycle: {} corrections, {} submitted, {} failed, {} waiting",
                    report.corrections.len(),
                    report.submitted.len(),
                    report.failed.len(),
                    report.leftover.len()
                );
                if once {
                    return Ok(());
                }
                while started.elapsed() < config.period {
                    if shutdown.load(Ordering::Relaxed) {
                        return Ok(());
                    }
                    std::thread::sleep(Duration::from_millis(100));
                }
                if shutdown.load(Ordering::Relaxed) {
                    return Ok(());
                }
            }
        })();
        let _ = self.store.unlock(SERVICE_LOCK, &config.owner);
        outcome
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, ManualClock};
    use crate::model::AppDefinition;
    use crate::platform::MockScheduler;
    use crate::store::StateChange;
    use chrono::Utc;

    struct Fx {
        store: Arc<Store>,
        mock: Arc<MockScheduler>,
        clock: ManualClock,
        dir: tempfile::TempDir,
    }

    fn fixture(pool: u32) -> Fx {
        let clock = ManualClock::new(Utc::now());
        let store = Arc::new(Store::in_memory(Arc::new(clock.clone())).unwrap());
        store.add_app(&AppDefinition::new("app", "true")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let mock = Arc::new(MockScheduler::with_dir(Arc::new(clock.clone()), pool, dir.path().join("mock")));
        mock.set_paused(true);
        Fx { store, mock, clock, dir }
    }

    fn service(fx: &Fx, policy: QueuePolicy) -> Service {
        let template = BatchTemplate {
            text: "#!/bin/sh\n# {batch_tag} {job_mode} {queue} {num_nodes} {walltime_minutes}\ntrue\n".into(),
        };
        Service::new(fx.store.clone(), fx.mock.clone(), policy, template, fx.dir.path().join("scripts")).unwrap()
    }

    fn add(fx: &Fx, n: usize) -> Vec<Uuid> {
        let tasks = (0..n)
            .map(|i| {
                fx.clock.advance(chrono::Duration::milliseconds(1));
                Task::new_at(format!("t{i}"), "wf", "app", fx.clock.now())
            })
            .collect();
        dag::add_tasks(&fx.store, tasks).unwrap()
    }

    fn small_policy(max_queued: u32) -> QueuePolicy {
        QueuePolicy::single(max_queued, vec![RangeRule::new(1, 2, 0.5, 1.0)])
    }

    #[test]
    fn eligibility_predicate() {
        let fx = fixture(4);
        let ids = add(&fx, 5);
        let now = fx.clock.now();
        fx.store.transaction(|tx| tx.set_batch_tag(&ids[3..4], Some(Uuid::new_v4()))).unwrap();
        fx.store
            .update_batch(&[
                StateChange::new(ids[4], TaskState::StagedIn, "", now),
                StateChange::new(ids[4], TaskState::Preprocessed, "", now),
                StateChange::new(ids[4], TaskState::Running, "", now),
            ])
            .unwrap();
        let got: Vec<Uuid> = eligible(&fx.store).unwrap().iter().map(|t| t.id).collect();
        assert_eq!(got, ids[..3]);
        fx.store
            .update_batch(&[
                StateChange::new(ids[4], TaskState::RunError, "", now),
                StateChange::new(ids[4], TaskState::RestartReady, "", now),
            ])
            .unwrap();
        assert_eq!(eligible(&fx.store).unwrap().len(), 4);
        fx.store.acquire(&TaskFilter::all(), 1, "L", 60.0).unwrap();
        assert_eq!(eligible(&fx.store).unwrap().len(), 3);
    }

    #[test]
    fn submit_tags_tasks_and_respects_headroom() {
        let fx = fixture(4);
        let ids = add(&fx, 6);
        // unknown lengths count as 30 min, so 2 nodes x 60 min hold four
        let svc = service(&fx, small_policy(1));
        let report = svc.submit_cycle().unwrap();
        assert_eq!(report.submitted.len(), 1);
        let spec = &report.submitted[0];
        assert_eq!(spec.status, BatchStatus::Queued);
        assert_eq!(spec.task_ids, ids[..4]);
        assert_eq!(spec.walltime_minutes, 60.0);
        let tagged = fx.store.query(&TaskFilter::all().batch_tag(spec.id)).unwrap();
        assert_eq!(tagged.len(), 4);
        assert!(svc.submit_cycle().unwrap().submitted.is_empty());
        assert_eq!(queued_counts(&fx.store).unwrap()["default"], 1);
    }

    #[test]
    fn rejected_submit_rolls_back_tags() {
        let fx = fixture(4);
        add(&fx, 2);
        fx.mock.set_reject_submissions(true);
        let svc = service(&fx, small_policy(2));
        let report = svc.submit_cycle().unwrap();
        assert!(report.submitted.is_empty());
        assert_eq!(report.failed.len(), 1);
        assert_eq!(eligible(&fx.store).unwrap().len(), 2);
        assert!(fx.store.batch_jobs(None).unwrap().is_empty());
    }

    #[test]
    fn deleted_queued_job_is_repacked() {
        let fx = fixture(4);
        add(&fx, 2);
        let svc = service(&fx, small_policy(1));
        let first = svc.cycle().unwrap().submitted.remove(0);
        assert!(svc.reconcile().unwrap().is_empty());
        fx.mock.delete(first.scheduler_id.as_deref().unwrap()).unwrap();
        let report = svc.cycle().unwrap();
        assert_eq!(
            report.corrections,
            vec![Correction::Vanished {
                job: first.id,
                untagged: first.task_ids.clone()
            }]
        );
        assert_eq!(report.submitted.len(), 1);
        assert_eq!(report.submitted[0].task_ids, first.task_ids);
        let stored = fx.store.batch_jobs(None).unwrap();
        let old = stored.iter().find(|j| j.id == first.id).unwrap();
        assert_eq!(old.status, BatchStatus::Vanished);
    }

    #[test]
    fn finished_job_releases_unfinished_tasks() {
        let fx = fixture(4);
        let ids = add(&fx, 2);
        let svc = service(&fx, small_policy(1));
        let spec = svc.cycle().unwrap().submitted.remove(0);
        fx.mock.set_paused(false);
        let sid = spec.scheduler_id.clone().unwrap();
        for _ in 0..200 {
            fx.mock.tick();
            if fx.mock.status(&sid).unwrap() == SchedStatus::Finished {
                break;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        let corrections = svc.reconcile().unwrap();
        assert_eq!(
            corrections,
            vec![Correction::Finished {
                job: spec.id,
                untagged: ids.clone()
            }]
        );
        assert_eq!(eligible(&fx.store).unwrap().len(), 2);
    }

    #[test]
    fn single_service_lock() {
        let fx = fixture(1);
        let svc = service(&fx, small_policy(1));
        assert!(fx.store.try_lock(SERVICE_LOCK, "someone-else", 60.0).unwrap());
        let stop = AtomicBool::new(false);
        assert!(matches!(
            svc.run(&ServiceConfig::default(), true, &stop),
            Err(ServiceError::AlreadyRunning)
        ));
    }
}
