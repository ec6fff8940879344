use std::collections::BTreeSet;

use rand::rngs::StdRng;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use uuid::Uuid;

use crate::model::Task;

/// Shape of a synthetic ensemble of sleep-like tasks. Each task gets the
/// arguments `<seconds> <exit code>`; the application decides what to do
/// with them.
#[derive(Debug, Clone, PartialEq)]
pub struct WorkloadSpec {
    pub count: usize,
    pub workflow: String,
    pub application: String,
    /// Uniform runtime range in seconds.
    pub runtime_secs: (f64, f64),
    /// Fraction of tasks told to exit nonzero, rounded to the nearest task.
    pub fail_fraction: f64,
    pub node_packing_count: u32,
    pub seed: u64,
}

impl WorkloadSpec {
    pub fn new(count: usize, application: impl Into<String>) -> Self {
        WorkloadSpec {
            count,
            workflow: "synthetic".into(),
            application: application.into(),
            runtime_secs: (1.0, 3.0),
            fail_fraction: 0.0,
            node_packing_count: 1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Workload {
    pub tasks: Vec<Task>,
    /// Tasks told to exit nonzero.
    pub injected: BTreeSet<Uuid>,
}

pub fn generate_workload(spec: &WorkloadSpec) -> Workload {
    let mut rng = StdRng::seed_from_u64(spec.seed);
    let n_fail = ((spec.count as f64) * spec.fail_fraction.clamp(0.0, 1.0)).round() as usize;
    let mut order: Vec<usize> = (0..spec.count).collect();
    order.shuffle(&mut rng);
    let failing: BTreeSet<usize> = order.into_iter().take(n_fail).collect();

    let (lo, hi) = spec.runtime_secs;
    let mut injected = BTreeSet::new();
    let tasks = (0..spec.count)
        .map(|i| {
            let secs = if hi > lo { rng.gen_range(lo..hi) } else { lo };
            let code = u8::from(failing.contains(&i));
            let mut t = Task::new(format!("task{i}"), &spec.workflow, &spec.application);
            t.args = format!("{secs:.3} {code}");
            t.node_packing_count = spec.node_packing_count.max(1);
            if code != 0 {
                injected.insert(t.id);
            }
            t
        })
        .collect();
    Workload { tasks, injected }
}
