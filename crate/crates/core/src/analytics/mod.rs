//! Run profiles derived from stored state histories.
//!
//! Everything is computed from the merged event log, so the results are
//! exact step functions rather than binned counts.

mod sim;
mod workload;

use std::collections::BTreeMap;
use std::io::Write;

use chrono::{DateTime, SecondsFormat, Utc};
use thiserror::Error;

use crate::model::{StateEvent, TaskState};

pub use sim::{restart_time, simulate_recovery, RecoveryCycle, RecoveryRun};
pub use workload::{generate_workload, Workload, WorkloadSpec};

#[derive(Debug, Error)]
pub enum AnalyticsError {
    #[error("history {index} is not in timestamp order at event {event}")]
    CorruptHistory { index: usize, event: usize },
    #[error("workers must be positive")]
    NoWorkers,
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Point = (DateTime<Utc>, u64);

/// Per-state task counts as step functions. A point `(t, n)` means the count
/// is `n` from `t` until the next point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StateSeries {
    pub series: BTreeMap<TaskState, Vec<Point>>,
}

impl Default for StateSeries {
    fn default() -> Self {
        StateSeries {
            series: TaskState::ALL.iter().map(|s| (*s, Vec::new())).collect(),
        }
    }
}

impl StateSeries {
    pub fn points(&self, state: TaskState) -> &[Point] {
        self.series.get(&state).map_or(&[], Vec::as_slice)
    }

    pub fn count_at(&self, state: TaskState, t: DateTime<Utc>) -> u64 {
        let pts = self.points(state);
        match pts.partition_point(|(ts, _)| *ts <= t) {
            0 => 0,
            i => pts[i - 1].1,
        }
    }

    /// Every timestamp at which some count changes, ascending.
    pub fn timestamps(&self) -> Vec<DateTime<Utc>> {
        let mut ts: Vec<_> = self.series.values().flatten().map(|(t, _)| *t).collect();
        ts.sort();
        ts.dedup();
        ts
    }

    pub fn is_empty(&self) -> bool {
        self.series.values().all(Vec::is_empty)
    }

    /// Writes `timestamp,state,count` rows ordered by time, then state.
    pub fn write_csv(&self, out: impl Write) -> Result<(), AnalyticsError> {
        let mut rows: Vec<(DateTime<Utc>, TaskState, u64)> = self
            .series
            .iter()
            .flat_map(|(s, pts)| pts.iter().map(move |(t, n)| (*t, *s, *n)))
            .collect();
        rows.sort();
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "state", "count"])?;
        for (t, s, n) in rows {
            w.write_record([stamp(t), s.as_str().to_string(), n.to_string()])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn stamp(t: DateTime<Utc>) -> String {
    t.to_rfc3339_opts(SecondsFormat::Micros, true)
}

/// Replays every history into per-state counts. Each event moves its task
/// out of its previous state (if any) and into the event's state.
pub fn process_job_times<'a, I>(histories: I) -> Result<StateSeries, AnalyticsError>
where
    I: IntoIterator<Item = &'a [StateEvent]>,
{
    // (timestamp, from, to)
    let mut moves: Vec<(DateTime<Utc>, Option<TaskState>, TaskState)> = Vec::new();
    for (index, history) in histories.into_iter().enumerate() {
        let mut prev: Option<&StateEvent> = None;
        for (event, e) in history.iter().enumerate() {
            if prev.is_some_and(|p| e.timestamp < p.timestamp) {
                return Err(AnalyticsError::CorruptHistory { index, event });
            }
            moves.push((e.timestamp, prev.map(|p| p.state), e.state));
            prev = Some(e);
        }
    }
    moves.sort_by_key(|m| m.0);

    let mut out = StateSeries::default();
    let mut counts: BTreeMap<TaskState, i64> = BTreeMap::new();
    let mut i = 0;
    while i < moves.len() {
        let t = moves[i].0;
        let before = counts.clone();
        while i < moves.len() && moves[i].0 == t {
            let (_, from, to) = moves[i];
            if let Some(from) = from {
                *counts.entry(from).or_default() -= 1;
            }
            *counts.entry(to).or_default() += 1;
            i += 1;
        }
        for (state, n) in &counts {
            if before.get(state).copied().unwrap_or(0) != *n {
                debug_assert!(*n >= 0);
                out.series.entry(*state).or_default().push((t, (*n).max(0) as u64));
            }
        }
    }
    Ok(out)
}

/// Convenience over full task records.
pub fn process_tasks(tasks: &[crate::model::Task]) -> Result<StateSeries, AnalyticsError> {
    process_job_times(tasks.iter().map(|t| t.state_history.as_slice()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Utilization {
    pub points: Vec<(DateTime<Utc>, f64)>,
    /// Time-weighted mean over the span from the first to the last change in
    /// the RUNNING count.
    pub mean: f64,
}

impl Utilization {
    pub fn value_at(&self, t: DateTime<Utc>) -> f64 {
        match self.points.partition_point(|(ts, _)| *ts <= t) {
            0 => 0.0,
            i => self.points[i - 1].1,
        }
    }

    /// Time-weighted mean over `[start, end]`.
    pub fn mean_over(&self, start: DateTime<Utc>, end: DateTime<Utc>) -> f64 {
        let span = seconds(end - start);
        if span <= 0.0 {
            return self.value_at(start);
        }
        let mut area = 0.0;
        let mut cursor = start;
        let mut value = self.value_at(start);
        for (t, v) in &self.points {
            if *t <= start {
                continue;
            }
            if *t >= end {
                break;
            }
            area += value * seconds(*t - cursor);
            cursor = *t;
            value = *v;
        }
        area += value * seconds(end - cursor);
        area / span
    }

    pub fn write_csv(&self, out: impl Write) -> Result<(), AnalyticsError> {
        let mut w = csv::Writer::from_writer(out);
        w.write_record(["timestamp", "utilization"])?;
        for (t, v) in &self.points {
            w.write_record([stamp(*t), format!("{v:.6}")])?;
        }
        w.flush()?;
        Ok(())
    }
}

fn seconds(d: chrono::Duration) -> f64 {
    d.num_microseconds().unwrap_or(i64::MAX) as f64 / 1e6
}

/// RUNNING count divided by `workers`, clipped to `[0, 1]`.
pub fn utilization(series: &StateSeries, workers: u32) -> Result<Utilization, AnalyticsError> {
    if workers == 0 {
        return Err(AnalyticsError::NoWorkers);
    }
    let running = series.points(TaskState::Running);
    let points: Vec<_> = running
        .iter()
        .map(|(t, n)| (*t, (*n as f64 / f64::from(workers)).clamp(0.0, 1.0)))
        .collect();
    let mut u = Utilization { points, mean: 0.0 };
    if let (Some(first), Some(last)) = (running.first(), running.last()) {
        u.mean = u.mean_over(first.0, last.0);
    }
    Ok(u)
}

/// Returns `(tasks per node-hour, tasks per second)`.
pub fn throughput(completed: u64, span_minutes: f64, nodes: u32) -> (f64, f64) {
    if completed == 0 || span_minutes <= 0.0 || nodes == 0 {
        return (0.0, 0.0);
    }
    let c = completed as f64;
    (c / (f64::from(nodes) * span_minutes / 60.0), c / (span_minutes * 60.0))
}

/// Weak-scaling efficiency of each size relative to the smallest one.
pub fn weak_scaling(throughputs: &BTreeMap<u32, f64>) -> BTreeMap<u32, f64> {
    let Some((&base_n, &base_t)) = throughputs.iter().next() else {
        return BTreeMap::new();
    };
    throughputs
        .iter()
        .map(|(&n, &t)| {
            let eff = if base_t > 0.0 {
                (t / base_t) / (f64::from(n) / f64::from(base_n))
            } else {
                0.0
            };
            (n, eff)
        })
        .collect()
}
