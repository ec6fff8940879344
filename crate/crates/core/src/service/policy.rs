use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::ServiceError;

/// One node-count range and the walltimes it may request, in hours.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RangeRule {
    /// Inclusive `[lo, hi]`.
    pub nodes: [u32; 2],
    #[serde(alias = "walltime")]
    pub walltime_hours: [f64; 2],
}

impl RangeRule {
    pub fn new(lo: u32, hi: u32, min_hours: f64, max_hours: f64) -> Self {
        RangeRule {
            nodes: [lo, hi],
            walltime_hours: [min_hours, max_hours],
        }
    }

    pub fn lo(&self) -> u32 {
        self.nodes[0]
    }

    pub fn hi(&self) -> u32 {
        self.nodes[1]
    }

    pub fn min_minutes(&self) -> f64 {
        self.walltime_hours[0] * 60.0
    }

    pub fn max_minutes(&self) -> f64 {
        self.walltime_hours[1] * 60.0
    }

    pub fn admits(&self, nodes: u32, walltime_minutes: f64) -> bool {
        const EPS: f64 = 1e-9;
        (self.lo()..=self.hi()).contains(&nodes)
            && walltime_minutes >= self.min_minutes() - EPS
            && walltime_minutes <= self.max_minutes() + EPS
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueRule {
    #[serde(alias = "queue")]
    pub queue_name: String,
    pub max_queued: u32,
    pub ranges: Vec<RangeRule>,
}

/// Site submission rules. Serialized as a JSON array of queue rules.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct QueuePolicy {
    pub queues: Vec<QueueRule>,
}

impl QueuePolicy {
    pub fn new(queues: Vec<QueueRule>) -> Self {
        QueuePolicy { queues }
    }

    /// One queue named `default` with the given ranges.
    pub fn single(max_queued: u32, ranges: Vec<RangeRule>) -> Self {
        QueuePolicy::new(vec![QueueRule {
            queue_name: "default".into(),
            max_queued,
            ranges,
        }])
    }

    pub fn validate(&self) -> Result<(), ServiceError> {
        let bad = |m: String| Err(ServiceError::InvalidPolicy(m));
        let mut names = std::collections::HashSet::new();
        for q in &self.queues {
            if q.queue_name.trim().is_empty() {
                return bad("queue name is empty".into());
            }
            if !names.insert(q.queue_name.as_str()) {
                return bad(format!("queue {} appears twice", q.queue_name));
            }
            if q.max_queued == 0 {
                return bad(format!("queue {}: max_queued must be positive", q.queue_name));
            }
            let mut ranges: Vec<&RangeRule> = q.ranges.iter().collect();
            ranges.sort_by_key(|r| r.lo());
            for r in &ranges {
                let [min, max] = r.walltime_hours;
                if r.lo() == 0 || r.lo() > r.hi() {
                    return bad(format!("queue {}: bad node range {:?}", q.queue_name, r.nodes));
                }
                if !(min.is_finite() && max.is_finite() && 0.0 < min && min <= max) {
                    return bad(format!("queue {}: bad walltime range {:?}", q.queue_name, r.walltime_hours));
                }
            }
            for w in ranges.windows(2) {
                if w[1].lo() <= w[0].hi() {
                    return bad(format!(
                        "queue {}: node ranges {:?} and {:?} overlap",
                        q.queue_name, w[0].nodes, w[1].nodes
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn queue(&self, name: &str) -> Option<&QueueRule> {
        self.queues.iter().find(|q| q.queue_name == name)
    }

    /// Whether `(nodes, walltime)` lies inside some range of `queue`.
    pub fn admits(&self, queue: &str, nodes: u32, walltime_minutes: f64) -> bool {
        self.queue(queue)
            .is_some_and(|q| q.ranges.iter().any(|r| r.admits(nodes, walltime_minutes)))
    }

    pub fn max_nodes(&self) -> u32 {
        self.queues
            .iter()
            .flat_map(|q| q.ranges.iter().map(RangeRule::hi))
            .max()
            .unwrap_or(0)
    }

    pub fn load(path: &Path) -> Result<Self, ServiceError> {
        let text = fs::read_to_string(path)?;
        let policy: QueuePolicy = serde_json::from_str(&text)?;
        policy.validate()?;
        Ok(policy)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("policy serializes")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_array_form() {
        let text = r#"[{"queue": "default", "max_queued": 2,
                       "ranges": [{"nodes": [128, 255], "walltime": [0.5, 3]}]}]"#;
        let p: QueuePolicy = serde_json::from_str(text).unwrap();
        p.validate().unwrap();
        assert!(p.admits("default", 130, 30.0));
        assert!(!p.admits("default", 130, 29.0));
        assert!(!p.admits("default", 256, 60.0));
        assert!(!p.admits("other", 130, 60.0));
        let round: QueuePolicy = serde_json::from_str(&p.to_json()).unwrap();
        assert_eq!(round, p);
    }

    #[test]
    fn rejects_bad_policies() {
        let overlap = QueuePolicy::single(1, vec![RangeRule::new(1, 10, 0.5, 1.0), RangeRule::new(10, 20, 0.5, 1.0)]);
        assert!(overlap.validate().is_err());
        let inverted = QueuePolicy::single(1, vec![RangeRule::new(1, 10, 2.0, 1.0)]);
        assert!(inverted.validate().is_err());
        let zero = QueuePolicy::single(1, vec![RangeRule::new(1, 10, 0.0, 1.0)]);
        assert!(zero.validate().is_err());
        let no_headroom = QueuePolicy::single(0, vec![RangeRule::new(1, 10, 0.5, 1.0)]);
        assert!(no_headroom.validate().is_err());
    }
}
