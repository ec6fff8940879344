use uuid::Uuid;

use crate::model::Task;
use crate::platform::{JobMode, NodeSet};

/// Cycles after which a deferred task blocks smaller ones from jumping
/// ahead of it.
pub const AGING_CYCLES: u32 = 5;

/// Occupancy of one node as the planner sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NodeLoad {
    pub id: String,
    pub capacity: u32,
    /// Packing count of each task currently on the node.
    pub residents: Vec<u32>,
}

impl NodeLoad {
    pub fn idle(&self) -> bool {
        self.residents.is_empty()
    }

    /// Whether one more serial task with packing count `npc` fits: every
    /// resident, the newcomer and the node itself bound the co-resident count.
    pub fn admits(&self, npc: u32) -> bool {
        let limit = self.residents.iter().copied().fold(self.capacity.min(npc), u32::min);
        (self.residents.len() as u32) < limit
    }
}

pub fn loads(nodes: &NodeSet) -> Vec<NodeLoad> {
    nodes
        .nodes
        .iter()
        .map(|n| NodeLoad {
            id: n.id.clone(),
            capacity: n.capacity_slots.max(1),
            residents: Vec::new(),
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub task: Uuid,
    pub nodes: Vec<String>,
    pub slots_per_node: u32,
}

#[derive(Debug, Clone, Copy)]
pub struct Runnable<'a> {
    pub task: &'a Task,
    /// Planning cycles this task has already been passed over.
    pub waited_cycles: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Plan {
    pub assignments: Vec<Assignment>,
    /// Tasks whose estimate exceeds the remaining walltime.
    pub too_long: Vec<Uuid>,
}

/// First-fit descending placement of `runnable` onto `nodes`. Larger tasks
/// go first, older first among equals. `remaining_secs` is the time left in
/// the allocation, if bounded.
pub fn plan_assignments(
    runnable: &[Runnable<'_>],
    nodes: &[NodeLoad],
    mode: JobMode,
    remaining_secs: Option<f64>,
) -> Plan {
    let mut order: Vec<&Runnable<'_>> = runnable.iter().collect();
    order.sort_by(|a, b| {
        b.task
            .num_nodes
            .cmp(&a.task.num_nodes)
            .then(a.task.created_at().cmp(&b.task.created_at()))
            .then(a.task.id.cmp(&b.task.id))
    });
    let mut nodes = nodes.to_vec();
    let mut plan = Plan::default();
    for r in order {
        let task = r.task;
        if let Some(left) = remaining_secs {
            if task.wall_time_minutes > 0.0 && task.wall_time_minutes * 60.0 > left {
                plan.too_long.push(task.id);
                continue;
            }
        }
        let placed = match mode {
            JobMode::Mpi => {
                let need = task.num_nodes as usize;
                let free: Vec<usize> = (0..nodes.len()).filter(|&i| nodes[i].idle()).take(need).collect();
                if need > 0 && free.len() == need {
                    for &i in &free {
                        nodes[i].residents.push(1);
                    }
                    Some(Assignment {
                        task: task.id,
                        nodes: free.iter().map(|&i| nodes[i].id.clone()).collect(),
                        slots_per_node: task.ranks_per_node,
                    })
                } else {
                    None
                }
            }
            JobMode::Serial => {
                let npc = task.node_packing_count.max(1);
                nodes.iter_mut().find(|n| n.admits(npc)).map(|n| {
                    n.residents.push(npc);
                    Assignment {
                        task: task.id,
                        nodes: vec![n.id.clone()],
                        slots_per_node: 1,
                    }
                })
            }
        };
        match placed {
            Some(a) => plan.assignments.push(a),
            None if r.waited_cycles >= AGING_CYCLES => break,
            None => {}
        }
    }
    plan
}
