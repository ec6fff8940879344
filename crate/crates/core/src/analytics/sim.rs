//! Discrete-event model of how a pool of workers refills after tasks finish
//! when new work is generated by a client that watches the store.
//!
//! A finished task becomes visible at the end of the launcher's update
//! window; the client polls for finished tasks, submits one replacement for
//! each, and the launcher picks replacements up at its next refresh. Events
//! at the same instant are processed in that order.

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use chrono::{DateTime, Duration, TimeZone, Utc};

use crate::model::{StateEvent, TaskState};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RecoveryCycle {
    /// Launcher update batching window, seconds.
    pub batch_window: f64,
    /// Client poll period, seconds.
    pub poll_interval: f64,
    /// Launcher job-cache refresh period, seconds.
    pub refresh_interval: f64,
}

impl Default for RecoveryCycle {
    fn default() -> Self {
        RecoveryCycle {
            batch_window: 1.0,
            poll_interval: 2.0,
            refresh_interval: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryRun {
    pub start: DateTime<Utc>,
    pub histories: Vec<Vec<StateEvent>>,
}

impl RecoveryRun {
    pub fn at(&self, secs: f64) -> DateTime<Utc> {
        self.start + Duration::microseconds(us(secs))
    }
}

fn us(secs: f64) -> i64 {
    (secs * 1e6).round() as i64
}

fn ceil_to(t: i64, period: i64) -> i64 {
    if period <= 0 {
        return t;
    }
    t.div_euclid(period) * period + if t.rem_euclid(period) == 0 { 0 } else { period }
}

/// Closed form for when a worker whose task ends at `finish` starts its
/// replacement.
pub fn restart_time(cycle: &RecoveryCycle, finish: f64) -> f64 {
    let flush = ceil_to(us(finish), us(cycle.batch_window));
    let poll = ceil_to(flush, us(cycle.poll_interval));
    ceil_to(poll, us(cycle.refresh_interval)) as f64 / 1e6
}

/// Runs `workers` workers from time zero until `horizon` seconds. Task `i`
/// takes `runtime(i)` seconds.
pub fn simulate_recovery(
    cycle: &RecoveryCycle,
    workers: u32,
    horizon: f64,
    mut runtime: impl FnMut(usize) -> f64,
) -> RecoveryRun {
    let start = Utc.timestamp_opt(0, 0).unwrap();
    let mut run = RecoveryRun {
        start,
        histories: Vec::new(),
    };
    let at = |t: i64| start + Duration::microseconds(t);
    let event = |t: i64, state: TaskState| StateEvent {
        timestamp: at(t),
        state,
        message: String::new(),
    };
    let (window, poll, refresh) = (
        us(cycle.batch_window).max(1),
        us(cycle.poll_interval).max(1),
        us(cycle.refresh_interval).max(1),
    );
    let horizon = us(horizon);

    let mut running: BinaryHeap<Reverse<(i64, usize)>> = BinaryHeap::new();
    let mut idle = workers as usize;
    let mut unflushed: Vec<usize> = Vec::new();
    let mut flushed: Vec<usize> = Vec::new();
    let mut waiting: Vec<usize> = Vec::new();

    let create = |run: &mut RecoveryRun, t: i64| -> usize {
        run.histories.push(vec![event(t, TaskState::Created), event(t, TaskState::Ready)]);
        run.histories.len() - 1
    };
    for _ in 0..workers {
        let id = create(&mut run, 0);
        waiting.push(id);
    }

    let (mut next_flush, mut next_poll, mut next_refresh) = (0i64, 0i64, 0i64);
    loop {
        let next_end = running.peek().map_or(i64::MAX, |Reverse((t, _))| *t);
        let t = next_end.min(next_flush).min(next_poll).min(next_refresh);
        if t > horizon {
            break;
        }
        while let Some(Reverse((end, id))) = running.peek().copied() {
            if end != t {
                break;
            }
            running.pop();
            run.histories[id].push(event(t, TaskState::RunDone));
            unflushed.push(id);
            idle += 1;
        }
        if t == next_flush {
            for id in unflushed.drain(..) {
                run.histories[id].push(event(t, TaskState::JobFinished));
                flushed.push(id);
            }
            next_flush += window;
        }
        if t == next_poll {
            for _ in flushed.drain(..) {
                let id = create(&mut run, t);
                waiting.push(id);
            }
            next_poll += poll;
        }
        if t == next_refresh {
            while idle > 0 && !waiting.is_empty() {
                let id = waiting.remove(0);
                run.histories[id].push(event(t, TaskState::Running));
                let end = t + us(runtime(id)).max(1);
                running.push(Reverse((end, id)));
                idle -= 1;
            }
            next_refresh += refresh;
        }
    }
    run
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analytics::{process_job_times, utilization};
    use rand::{Rng, SeedableRng};

    #[test]
    fn closed_form_examples() {
        let c = RecoveryCycle::default();
        assert_eq!(restart_time(&c, 10.5), 12.0);
        assert_eq!(restart_time(&c, 10.0), 10.0);
        assert_eq!(restart_time(&c, 11.2), 12.0);
        assert_eq!(restart_time(&c, 12.2), 14.0);
        assert_eq!(restart_time(&c, 0.3), 2.0);
    }

    #[test]
    fn synchronized_finishes_make_a_sawtooth() {
        let c = RecoveryCycle::default();
        let run = simulate_recovery(&c, 8, 40.0, |_| 10.5);
        let series = process_job_times(run.histories.iter().map(Vec::as_slice)).unwrap();
        let u = utilization(&series, 8).unwrap();
        // every dip runs from a finish to the closed-form restart
        let mut finish = 10.5;
        let mut start = 0.0;
        while finish < 40.0 {
            let restart = restart_time(&c, finish);
            assert_eq!(u.value_at(run.at(finish - 0.1)), 1.0, "busy before {finish}");
            assert_eq!(u.value_at(run.at(finish)), 0.0, "idle at {finish}");
            assert_eq!(u.value_at(run.at(restart)), 1.0, "restarted at {restart}");
            start = restart;
            finish = restart + 10.5;
        }
        assert!(start > 0.0);
        // one period: busy 10.5 s out of 12 s
        let mean = u.mean_over(run.at(0.0), run.at(12.0));
        assert!((mean - 10.5 / 12.0).abs() < 1e-9);
    }

    #[test]
    fn staggered_finishes_give_shallow_dips() {
        let c = RecoveryCycle::default();
        let mut rng = rand::rngs::StdRng::seed_from_u64(7);
        let peaked = simulate_recovery(&c, 64, 600.0, |_| 30.5);
        let spread = simulate_recovery(&c, 64, 600.0, |_| rng.gen_range(20.0..40.0));
        let profile = |r: &RecoveryRun| {
            let s = process_job_times(r.histories.iter().map(Vec::as_slice)).unwrap();
            let u = utilization(&s, 64).unwrap();
            let floor = u
                .points
                .iter()
                .filter(|(t, _)| *t >= r.at(60.0))
                .map(|(_, v)| *v)
                .fold(1.0, f64::min);
            (u.mean_over(r.at(0.0), r.at(600.0)), floor)
        };
        let (p_mean, p_floor) = profile(&peaked);
        let (s_mean, s_floor) = profile(&spread);
        assert_eq!(p_floor, 0.0);
        assert!(s_floor > 0.5, "spread floor {s_floor}");
        // a replacement waits at most one window plus one poll period
        for mean in [p_mean, s_mean] {
            assert!(mean >= 20.0 / 23.0, "mean {mean}");
        }
    }

    #[test]
    fn every_finished_task_is_replaced() {
        let c = RecoveryCycle::default();
        // horizon on a poll boundary, so every flushed task has been polled
        let run = simulate_recovery(&c, 3, 20.0, |i| 1.0 + i as f64 * 0.25);
        let finished = run
            .histories
            .iter()
            .filter(|h| h.last().unwrap().state == TaskState::JobFinished)
            .count();
        let replacements = run.histories.iter().filter(|h| h[0].timestamp > run.start).count();
        assert!(finished > 0);
        assert_eq!(replacements, finished);
    }
}
