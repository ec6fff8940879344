//! Greedy packing of eligible tasks into batch jobs.
//!
//! Tasks are split into groups that can share an allocation: parallel tasks
//! (one per node, `mpi` mode) and serial tasks keyed by their packing count.
//! For each group, candidate `(queue, range)` pairs are tried largest range
//! first. A candidate is simulated with first-fit-descending list scheduling
//! over `range.hi` nodes up to the range's walltime ceiling; tasks that do
//! not fit are left for the next job. Durations are the estimate times
//! [`SAFETY_FACTOR`], or the range's minimum walltime when unknown.

use std::collections::{BTreeMap, BTreeSet};

use uuid::Uuid;

use super::{BatchJobSpec, QueuePolicy, RangeRule};
use crate::model::Task;
use crate::platform::JobMode;

pub const SAFETY_FACTOR: f64 = 1.25;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct PackResult {
    pub specs: Vec<BatchJobSpec>,
    /// Tasks not placed in any spec, in sort order.
    pub leftover: Vec<Uuid>,
    pub warnings: Vec<String>,
}

/// Simulated run time of `task` under `range`, in minutes.
pub fn task_minutes(task: &Task, range: &RangeRule) -> f64 {
    if task.wall_time_minutes > 0.0 {
        task.wall_time_minutes * SAFETY_FACTOR
    } else {
        range.min_minutes()
    }
}

/// Allocation units a task occupies: whole nodes in mpi mode, one slot in
/// serial mode.
fn units_needed(task: &Task, mode: JobMode) -> usize {
    match mode {
        JobMode::Mpi => task.num_nodes as usize,
        JobMode::Serial => 1,
    }
}

#[derive(Debug)]
struct Sim {
    placed: Vec<Uuid>,
    makespan: f64,
    nodes_used: u32,
}

/// First-fit list scheduling on `nodes * slots` units. Units are kept
/// ordered by (free time, index); a task takes the `need` earliest units and
/// starts when the last of them frees up.
fn simulate(tasks: &[&Task], range: &RangeRule, mode: JobMode, slots: u32) -> Sim {
    let slots = slots.max(1) as usize;
    let total = range.hi() as usize * slots;
    let horizon = range.max_minutes();
    let mut free: BTreeSet<(u64, usize)> = (0..total).map(|i| (0f64.to_bits(), i)).collect();
    let mut sim = Sim {
        placed: Vec::new(),
        makespan: 0.0,
        nodes_used: 0,
    };
    for task in tasks {
        let need = units_needed(task, mode);
        if need == 0 || need > total {
            continue;
        }
        let duration = task_minutes(task, range);
        let chosen: Vec<(u64, usize)> = free.iter().take(need).copied().collect();
        let start = chosen
            .iter()
            .map(|(bits, _)| f64::from_bits(*bits))
            .fold(0.0, f64::max);
        let end = start + duration;
        if end > horizon + 1e-9 {
            continue;
        }
        for unit in &chosen {
            free.remove(unit);
            free.insert((end.to_bits(), unit.1));
            sim.nodes_used = sim.nodes_used.max((unit.1 / slots) as u32 + 1);
        }
        sim.makespan = sim.makespan.max(end);
        sim.placed.push(task.id);
    }
    sim
}

/// Canonical packing order: most nodes first, then oldest, then id.
fn sort_tasks(tasks: &mut [&Task]) {
    tasks.sort_by(|a, b| {
        b.num_nodes
            .cmp(&a.num_nodes)
            .then(a.created_at().cmp(&b.created_at()))
            .then(a.id.cmp(&b.id))
    });
}

/// Packs `tasks` into batch job specs. `queued_now` holds, per queue, the
/// jobs already pending submission or queued. Spec ids are left nil; the
/// submitter assigns them.
pub fn pack(tasks: &[Task], policy: &QueuePolicy, queued_now: &BTreeMap<String, u32>) -> PackResult {
    let mut result = PackResult::default();
    let mut headroom: Vec<u32> = policy
        .queues
        .iter()
        .map(|q| q.max_queued.saturating_sub(queued_now.get(&q.queue_name).copied().unwrap_or(0)))
        .collect();

    // (queue index, range index), largest range first, then policy order.
    let mut candidates: Vec<(usize, usize)> = policy
        .queues
        .iter()
        .enumerate()
        .flat_map(|(qi, q)| (0..q.ranges.len()).map(move |ri| (qi, ri)))
        .collect();
    candidates.sort_by(|&(qa, ra), &(qb, rb)| {
        let (a, b) = (&policy.queues[qa].ranges[ra], &policy.queues[qb].ranges[rb]);
        b.hi().cmp(&a.hi()).then(qa.cmp(&qb)).then(ra.cmp(&rb))
    });

    let max_nodes = policy.max_nodes();
    let mut ordered: Vec<&Task> = tasks.iter().collect();
    sort_tasks(&mut ordered);
    let mut groups: BTreeMap<(u8, u32), Vec<&Task>> = BTreeMap::new();
    for task in ordered {
        let fits_somewhere = policy.queues.iter().flat_map(|q| &q.ranges).any(|r| {
            task.num_nodes <= r.hi() && task_minutes(task, r) <= r.max_minutes() + 1e-9
        });
        if task.num_nodes > max_nodes {
            result.warnings.push(format!(
                "task {} needs {} nodes; no queue range allows more than {max_nodes}",
                task.id, task.num_nodes
            ));
            result.leftover.push(task.id);
        } else if !fits_somewhere {
            result.warnings.push(format!(
                "task {} estimated at {} minutes does not fit any queue walltime",
                task.id, task.wall_time_minutes
            ));
            result.leftover.push(task.id);
        } else if task.is_parallel() {
            groups.entry((0, 1)).or_default().push(task);
        } else {
            groups.entry((1, task.node_packing_count)).or_default().push(task);
        }
    }

    for ((kind, slots), mut group) in groups {
        let mode = if kind == 0 { JobMode::Mpi } else { JobMode::Serial };
        while !group.is_empty() {
            let mut chosen: Option<(usize, usize, Sim)> = None;
            let mut fallback: Option<(usize, usize, Sim)> = None;
            for &(qi, ri) in &candidates {
                if headroom[qi] == 0 {
                    continue;
                }
                let range = &policy.queues[qi].ranges[ri];
                let sim = simulate(&group, range, mode, slots);
                if sim.placed.is_empty() {
                    continue;
                }
                if sim.nodes_used >= range.lo() {
                    chosen = Some((qi, ri, sim));
                    break;
                }
                let better = match &fallback {
                    None => true,
                    Some((fq, fr, _)) => range.lo() < policy.queues[*fq].ranges[*fr].lo(),
                };
                if better {
                    fallback = Some((qi, ri, sim));
                }
            }
            let Some((qi, ri, sim)) = chosen.or(fallback) else {
                break;
            };
            let queue = &policy.queues[qi];
            let range = &queue.ranges[ri];
            let walltime = sim.makespan.clamp(range.min_minutes(), range.max_minutes());
            let placed: BTreeSet<Uuid> = sim.placed.iter().copied().collect();
            let mut spec = BatchJobSpec::new(
                queue.queue_name.clone(),
                sim.nodes_used.max(range.lo()),
                walltime,
                mode,
                sim.placed,
            );
            spec.id = Uuid::nil();
            result.specs.push(spec);
            headroom[qi] -= 1;
            group.retain(|t| !placed.contains(&t.id));
        }
        result.leftover.extend(group.iter().map(|t| t.id));
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::Task;

    fn task(nodes: u32, minutes: f64) -> Task {
        let mut t = Task::new("t", "wf", "app");
        t.num_nodes = nodes;
        t.wall_time_minutes = minutes;
        t
    }

    #[test]
    fn single_large_task_clamps_to_range_minimum() {
        let policy = QueuePolicy::single(4, vec![RangeRule::new(128, 255, 0.5, 3.0)]);
        let r = pack(&[task(130, 0.0)], &policy, &BTreeMap::new());
        assert_eq!(r.specs.len(), 1);
        assert_eq!(r.specs[0].num_nodes, 130);
        assert_eq!(r.specs[0].walltime_minutes, 30.0);
        assert_eq!(r.specs[0].job_mode, JobMode::Mpi);
        assert!(r.leftover.is_empty());
    }

    #[test]
    fn empty_input() {
        let policy = QueuePolicy::single(4, vec![RangeRule::new(1, 8, 0.5, 1.0)]);
        assert_eq!(pack(&[], &policy, &BTreeMap::new()), PackResult::default());
    }

    #[test]
    fn hundred_four_node_tasks_with_headroom_two() {
        let policy = QueuePolicy::single(2, vec![RangeRule::new(8, 64, 0.5, 1.0)]);
        let tasks: Vec<Task> = (0..100).map(|_| task(4, 10.0)).collect();
        let r = pack(&tasks, &policy, &BTreeMap::new());
        assert_eq!(r.specs.len(), 2);
        let covered: usize = r.specs.iter().map(|s| s.task_ids.len()).sum();
        assert_eq!(covered + r.leftover.len(), 100);
        assert_eq!(r.specs[0].task_ids.len(), 64);
        assert_eq!(r.specs[0].num_nodes, 64);
        assert_eq!(r.specs[0].walltime_minutes, 50.0);
        // node-minutes bound
        let total: f64 = 100.0 * 4.0 * 12.5;
        let per_job = 64.0 * 60.0;
        assert!(r.specs.len() as f64 <= (total / per_job).ceil() + 1.0);
    }

    #[test]
    fn headroom_respected() {
        let policy = QueuePolicy::single(3, vec![RangeRule::new(1, 4, 0.5, 1.0)]);
        let tasks: Vec<Task> = (0..40).map(|_| task(4, 30.0)).collect();
        let mut queued = BTreeMap::new();
        queued.insert("default".to_string(), 2);
        let r = pack(&tasks, &policy, &queued);
        assert_eq!(r.specs.len(), 1);
        assert_eq!(r.leftover.len(), 39);
        queued.insert("default".to_string(), 3);
        assert!(pack(&tasks, &policy, &queued).specs.is_empty());
    }

    #[test]
    fn oversized_task_is_left_with_warning() {
        let policy = QueuePolicy::single(3, vec![RangeRule::new(1, 8, 0.5, 1.0)]);
        let big = task(9, 0.0);
        let long = task(1, 600.0);
        let r = pack(&[big.clone(), long.clone(), task(1, 0.0)], &policy, &BTreeMap::new());
        assert_eq!(r.specs.len(), 1);
        assert_eq!(r.leftover, vec![big.id, long.id]);
        assert_eq!(r.warnings.len(), 2);
    }

    #[test]
    fn serial_tasks_share_nodes_by_packing_count() {
        let policy = QueuePolicy::single(3, vec![RangeRule::new(1, 4, 0.5, 1.0)]);
        let tasks: Vec<Task> = (0..8)
            .map(|_| {
                let mut t = task(1, 20.0);
                t.node_packing_count = 2;
                t
            })
            .collect();
        let r = pack(&tasks, &policy, &BTreeMap::new());
        assert_eq!(r.specs.len(), 1);
        let s = &r.specs[0];
        assert_eq!(s.job_mode, JobMode::Serial);
        assert_eq!(s.num_nodes, 4);
        assert_eq!(s.walltime_minutes, 30.0);
        assert_eq!(s.task_ids.len(), 8);
    }

    #[test]
    fn prefers_range_the_workload_fills() {
        let policy = QueuePolicy::new(vec![
            super::super::QueueRule {
                queue_name: "big".into(),
                max_queued: 2,
                ranges: vec![RangeRule::new(128, 255, 0.5, 3.0)],
            },
            super::super::QueueRule {
                queue_name: "small".into(),
                max_queued: 2,
                ranges: vec![RangeRule::new(1, 16, 0.5, 1.0)],
            },
        ]);
        let r = pack(&[task(4, 0.0), task(2, 0.0)], &policy, &BTreeMap::new());
        assert_eq!(r.specs.len(), 1);
        assert_eq!(r.specs[0].queue_name, "small");
        assert_eq!(r.specs[0].num_nodes, 6);
    }
}
