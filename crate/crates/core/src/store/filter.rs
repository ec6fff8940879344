use chrono::{DateTime, Utc};
use rusqlite::types::Value;
use uuid::Uuid;

use crate::model::TaskState;

/// Match on a nullable column.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Nullable<T> {
    IsNull,
    Equals(T),
}

/// Conjunction of optional clauses; the default filter matches every task.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskFilter {
    pub states: Option<Vec<TaskState>>,
    pub name_contains: Option<String>,
    pub workflow: Option<String>,
    pub application: Option<String>,
    /// Inclusive lower bound and optional inclusive upper bound.
    pub num_nodes: Option<(u32, Option<u32>)>,
    pub ranks_per_node: Option<(u32, Option<u32>)>,
    pub batch_tag: Option<Nullable<Uuid>>,
    /// `IsNull` matches tasks without a live lease; `Equals` matches a live
    /// lease held by that owner.
    pub lock_owner: Option<Nullable<String>>,
    pub ids: Option<Vec<Uuid>>,
    pub exclude_ids: Vec<Uuid>,
}

impl TaskFilter {
    pub fn all() -> Self {
        Self::default()
    }

    pub fn state(mut self, state: TaskState) -> Self {
        self.states = Some(vec![state]);
        self
    }

    pub fn states(mut self, states: impl IntoIterator<Item = TaskState>) -> Self {
        self.states = Some(states.into_iter().collect());
        self
    }

    pub fn name_contains(mut self, needle: impl Into<String>) -> Self {
        self.name_contains = Some(needle.into());
        self
    }

    pub fn workflow(mut self, wf: impl Into<String>) -> Self {
        self.workflow = Some(wf.into());
        self
    }

    pub fn application(mut self, app: impl Into<String>) -> Self {
        self.application = Some(app.into());
        self
    }

    pub fn num_nodes(mut self, lo: u32, hi: Option<u32>) -> Self {
        self.num_nodes = Some((lo, hi));
        self
    }

    pub fn ranks_per_node(mut self, lo: u32, hi: Option<u32>) -> Self {
        self.ranks_per_node = Some((lo, hi));
        self
    }

    pub fn batch_tag(mut self, tag: Uuid) -> Self {
        self.batch_tag = Some(Nullable::Equals(tag));
        self
    }

    pub fn untagged(mut self) -> Self {
        self.batch_tag = Some(Nullable::IsNull);
        self
    }

    pub fn unleased(mut self) -> Self {
        self.lock_owner = Some(Nullable::IsNull);
        self
    }

    pub fn leased_by(mut self, owner: impl Into<String>) -> Self {
        self.lock_owner = Some(Nullable::Equals(owner.into()));
        self
    }

    pub fn ids(mut self, ids: impl IntoIterator<Item = Uuid>) -> Self {
        self.ids = Some(ids.into_iter().collect());
        self
    }

    /// Renders the filter as a SQL boolean expression over the `tasks` table.
    pub(crate) fn to_sql(&self, now: DateTime<Utc>) -> (String, Vec<Value>) {
        let mut clauses: Vec<String> = Vec::new();
        let mut params: Vec<Value> = Vec::new();

        if let Some(states) = &self.states {
            if states.is_empty() {
                clauses.push("0".into());
            } else {
                let marks = vec!["?"; states.len()].join(",");
                clauses.push(format!("state IN ({marks})"));
                params.extend(states.iter().map(|s| Value::Text(s.as_str().into())));
            }
        }
        if let Some(needle) = &self.name_contains {
            clauses.push("instr(name, ?) > 0".into());
            params.push(Value::Text(needle.clone()));
        }
        if let Some(wf) = &self.workflow {
            clauses.push("workflow = ?".into());
            params.push(Value::Text(wf.clone()));
        }
        if let Some(app) = &self.application {
            clauses.push("application = ?".into());
            params.push(Value::Text(app.clone()));
        }
        for (column, range) in [
            ("num_nodes", self.num_nodes),
            ("ranks_per_node", self.ranks_per_node),
        ] {
            if let Some((lo, hi)) = range {
                clauses.push(format!("{column} >= ?"));
                params.push(Value::Integer(i64::from(lo)));
                if let Some(hi) = hi {
                    clauses.push(format!("{column} <= ?"));
                    params.push(Value::Integer(i64::from(hi)));
                }
            }
        }
        match &self.batch_tag {
            Some(Nullable::IsNull) => clauses.push("batch_tag IS NULL".into()),
            Some(Nullable::Equals(tag)) => {
                clauses.push("batch_tag = ?".into());
                params.push(Value::Text(tag.to_string()));
            }
            None => {}
        }
        let now_us = now.timestamp_micros();
        match &self.lock_owner {
            Some(Nullable::IsNull) => {
                clauses.push("(lock_owner IS NULL OR lease_expires_us <= ?)".into());
                params.push(Value::Integer(now_us));
            }
            Some(Nullable::Equals(owner)) => {
                clauses.push("(lock_owner = ? AND lease_expires_us > ?)".into());
                params.push(Value::Text(owner.clone()));
                params.push(Value::Integer(now_us));
            }
            None => {}
        }
        if let Some(ids) = &self.ids {
            if ids.is_empty() {
                clauses.push("0".into());
            } else {
                let marks = vec!["?"; ids.len()].join(",");
                clauses.push(format!("id IN ({marks})"));
                params.extend(ids.iter().map(|id| Value::Text(id.to_string())));
            }
        }

        if !self.exclude_ids.is_empty() {
            let marks = vec!["?"; self.exclude_ids.len()].join(",");
            clauses.push(format!("id NOT IN ({marks})"));
            params.extend(self.exclude_ids.iter().map(|id| Value::Text(id.to_string())));
        }

        if clauses.is_empty() {
            ("1".into(), params)
        } else {
            (clauses.join(" AND "), params)
        }
    }
}
