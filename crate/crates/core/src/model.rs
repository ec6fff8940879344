//! Task records, the application registry entry and the task state machine.
//!
//! Everything here is pure data plus transition logic. Persistence lives in
//! [`crate::store`]; this module never touches the filesystem.
//!
//! The transition graph:
//!
//! ```text
//! CREATED          -> AWAITING_PARENTS | READY
//! AWAITING_PARENTS -> READY | FAILED
//! READY            -> STAGED_IN | AWAITING_PARENTS | FAILED
//! STAGED_IN        -> PREPROCESSED | FAILED
//! PREPROCESSED     -> RUNNING
//! RUNNING          -> RUN_DONE | RUN_ERROR | RUN_TIMEOUT
//! RUN_DONE         -> POSTPROCESSED | FAILED
//! POSTPROCESSED    -> STAGED_OUT | FAILED
//! STAGED_OUT       -> JOB_FINISHED
//! RUN_ERROR        -> RESTART_READY | FAILED
//! RUN_TIMEOUT      -> RESTART_READY | FAILED
//! RESTART_READY    -> STAGED_IN | FAILED
//! FAILED           -> RESTART_READY
//! any non-terminal -> USER_KILLED
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use chrono::{DateTime, SubsecRound, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

/// Upper bound on the stderr tail kept in a provenance message.
pub const MAX_TAIL_BYTES: usize = 2048;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ModelError {
    #[error("illegal transition {from} -> {to} for task {id}")]
    IllegalTransition {
        id: Uuid,
        from: TaskState,
        to: TaskState,
    },
    #[error("timestamp regression for task {id}: {at} precedes {last}")]
    TimestampRegression {
        id: Uuid,
        at: DateTime<Utc>,
        last: DateTime<Utc>,
    },
    #[error("task {0} is not in CREATED state")]
    NotNew(Uuid),
    #[error("invalid field: {0}")]
    InvalidField(String),
    #[error("unknown task state {0:?}")]
    UnknownState(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum TaskState {
    Created,
    AwaitingParents,
    Ready,
    StagedIn,
    Preprocessed,
    Running,
    RunDone,
    RunError,
    RunTimeout,
    Postprocessed,
    StagedOut,
    JobFinished,
    RestartReady,
    Failed,
    UserKilled,
}

impl TaskState {
    pub const ALL: [TaskState; 15] = [
        TaskState::Created,
        TaskState::AwaitingParents,
        TaskState::Ready,
        TaskState::StagedIn,
        TaskState::Preprocessed,
        TaskState::Running,
        TaskState::RunDone,
        TaskState::RunError,
        TaskState::RunTimeout,
        TaskState::Postprocessed,
        TaskState::StagedOut,
        TaskState::JobFinished,
        TaskState::RestartReady,
        TaskState::Failed,
        TaskState::UserKilled,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            TaskState::Created => "CREATED",
            TaskState::AwaitingParents => "AWAITING_PARENTS",
            TaskState::Ready => "READY",
            TaskState::StagedIn => "STAGED_IN",
            TaskState::Preprocessed => "PREPROCESSED",
            TaskState::Running => "RUNNING",
            TaskState::RunDone => "RUN_DONE",
            TaskState::RunError => "RUN_ERROR",
            TaskState::RunTimeout => "RUN_TIMEOUT",
            TaskState::Postprocessed => "POSTPROCESSED",
            TaskState::StagedOut => "STAGED_OUT",
            TaskState::JobFinished => "JOB_FINISHED",
            TaskState::RestartReady => "RESTART_READY",
            TaskState::Failed => "FAILED",
            TaskState::UserKilled => "USER_KILLED",
        }
    }

    pub fn is_terminal(self) -> bool {
        matches!(
            self,
            TaskState::JobFinished | TaskState::Failed | TaskState::UserKilled
        )
    }

    /// Terminal states that poison dependents.
    pub fn is_unsuccessful_end(self) -> bool {
        matches!(self, TaskState::Failed | TaskState::UserKilled)
    }

    /// States a task can be in before its application has been launched.
    pub fn is_unstarted(self) -> bool {
        matches!(
            self,
            TaskState::Created
                | TaskState::AwaitingParents
                | TaskState::Ready
                | TaskState::StagedIn
                | TaskState::Preprocessed
                | TaskState::RestartReady
        )
    }

    /// Direct successors in the transition graph.
    pub fn successors(self) -> &'static [TaskState] {
        use TaskState::*;
        match self {
            Created => &[AwaitingParents, Ready, UserKilled],
            AwaitingParents => &[Ready, Failed, UserKilled],
            Ready => &[StagedIn, AwaitingParents, Failed, UserKilled],
            StagedIn => &[Preprocessed, Failed, UserKilled],
            Preprocessed => &[Running, UserKilled],
            Running => &[RunDone, RunError, RunTimeout, UserKilled],
            RunDone => &[Postprocessed, Failed, UserKilled],
            RunError => &[RestartReady, Failed, UserKilled],
            RunTimeout => &[RestartReady, Failed, UserKilled],
            Postprocessed => &[StagedOut, Failed, UserKilled],
            StagedOut => &[JobFinished, UserKilled],
            RestartReady => &[StagedIn, Failed, UserKilled],
            Failed => &[RestartReady],
            JobFinished | UserKilled => &[],
        }
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TaskState {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let upper = s.trim().to_ascii_uppercase();
        TaskState::ALL
            .iter()
            .copied()
            .find(|state| state.as_str() == upper)
            .ok_or_else(|| ModelError::UnknownState(s.to_string()))
    }
}

/// True iff `from -> to` is an edge of the transition graph.
pub fn validate_transition(from: TaskState, to: TaskState) -> bool {
    from.successors().contains(&to)
}

/// Current time truncated to the microsecond resolution kept in histories.
pub fn now_micros() -> DateTime<Utc> {
    Utc::now().trunc_subsecs(6)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateEvent {
    pub timestamp: DateTime<Utc>,
    pub state: TaskState,
    #[serde(default)]
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ErrorPolicy {
    /// RUN_ERROR goes straight to FAILED.
    Fail,
    /// RUN_ERROR goes to RESTART_READY while fewer than `max_attempts` runs
    /// have been made.
    Retry { max_attempts: u32 },
    /// The postprocess hook runs with the error context and decides the next
    /// state through the CLI.
    Handler,
}

impl Default for ErrorPolicy {
    fn default() -> Self {
        ErrorPolicy::Fail
    }
}

impl FromStr for ErrorPolicy {
    type Err = ModelError;

    /// Accepts `fail`, `handler`, `retry` (two attempts) and `retry:N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim().to_ascii_lowercase();
        match s.as_str() {
            "fail" => Ok(ErrorPolicy::Fail),
            "handler" => Ok(ErrorPolicy::Handler),
            "retry" => Ok(ErrorPolicy::Retry { max_attempts: 2 }),
            other => {
                let n = other
                    .strip_prefix("retry:")
                    .or_else(|| other.strip_prefix("retry("))
                    .map(|rest| rest.trim_end_matches(')'))
                    .and_then(|n| n.parse::<u32>().ok())
                    .filter(|n| *n > 0)
                    .ok_or_else(|| ModelError::InvalidField(format!("error policy {s:?}")))?;
                Ok(ErrorPolicy::Retry { max_attempts: n })
            }
        }
    }
}

impl fmt::Display for ErrorPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ErrorPolicy::Fail => f.write_str("fail"),
            ErrorPolicy::Handler => f.write_str("handler"),
            ErrorPolicy::Retry { max_attempts } => write!(f, "retry:{max_attempts}"),
        }
    }
}

fn default_true() -> bool {
    true
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct AppDefinition {
    pub name: String,
    pub executable: String,
    #[serde(default)]
    pub preprocess: Option<String>,
    #[serde(default)]
    pub postprocess: Option<String>,
    #[serde(default)]
    pub error_policy: ErrorPolicy,
    /// Whether RUN_TIMEOUT goes straight to RESTART_READY. When false, a
    /// timeout is treated like a run error under `error_policy`.
    #[serde(default = "default_true")]
    pub restart_on_timeout: bool,
}

impl AppDefinition {
    pub fn new(name: impl Into<String>, executable: impl Into<String>) -> Self {
        AppDefinition {
            name: name.into(),
            executable: executable.into(),
            preprocess: None,
            postprocess: None,
            error_policy: ErrorPolicy::Fail,
            restart_on_timeout: true,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.trim().is_empty() {
            return Err(ModelError::InvalidField("application name is empty".into()));
        }
        if self.executable.trim().is_empty() {
            return Err(ModelError::InvalidField(format!(
                "application {} has an empty executable",
                self.name
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageOut {
    /// Space-delimited glob patterns matched against work_dir basenames.
    pub patterns: String,
    pub destination: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Lease {
    pub owner: String,
    pub expires: DateTime<Utc>,
    pub renewable: bool,
}

impl Lease {
    pub fn is_live(&self, now: DateTime<Utc>) -> bool {
        self.expires > now
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Task {
    pub id: Uuid,
    pub name: String,
    pub workflow: String,
    pub application: String,
    #[serde(default)]
    pub args: String,
    #[serde(default)]
    pub environment: BTreeMap<String, String>,
    pub num_nodes: u32,
    pub ranks_per_node: u32,
    pub node_packing_count: u32,
    /// Estimated runtime; 0 means unknown.
    #[serde(default)]
    pub wall_time_minutes: f64,
    /// Space-delimited glob patterns pulled from parent work dirs.
    #[serde(default)]
    pub input_files: String,
    #[serde(default)]
    pub stage_in_sources: Vec<PathBuf>,
    #[serde(default)]
    pub stage_out: Option<StageOut>,
    pub state: TaskState,
    pub state_history: Vec<StateEvent>,
    #[serde(default)]
    pub lease: Option<Lease>,
    #[serde(default)]
    pub batch_tag: Option<Uuid>,
    #[serde(default)]
    pub work_dir: Option<PathBuf>,
}

impl Task {
    /// A fresh CREATED task with defaults: one node, one rank, no packing.
    pub fn new(
        name: impl Into<String>,
        workflow: impl Into<String>,
        application: impl Into<String>,
    ) -> Self {
        Self::new_at(name, workflow, application, now_micros())
    }

    pub fn new_at(
        name: impl Into<String>,
        workflow: impl Into<String>,
        application: impl Into<String>,
        at: DateTime<Utc>,
    ) -> Self {
        Task {
            id: Uuid::new_v4(),
            name: name.into(),
            workflow: workflow.into(),
            application: application.into(),
            args: String::new(),
            environment: BTreeMap::new(),
            num_nodes: 1,
            ranks_per_node: 1,
            node_packing_count: 1,
            wall_time_minutes: 0.0,
            input_files: String::new(),
            stage_in_sources: Vec::new(),
            stage_out: None,
            state: TaskState::Created,
            state_history: vec![StateEvent {
                timestamp: at,
                state: TaskState::Created,
                message: String::new(),
            }],
            lease: None,
            batch_tag: None,
            work_dir: None,
        }
    }

    pub fn created_at(&self) -> DateTime<Utc> {
        self.state_history
            .first()
            .map(|e| e.timestamp)
            .unwrap_or(DateTime::<Utc>::MIN_UTC)
    }

    pub fn last_timestamp(&self) -> DateTime<Utc> {
        self.state_history
            .last()
            .map(|e| e.timestamp)
            .unwrap_or(DateTime::<Utc>::MIN_UTC)
    }

    pub fn lock_owner(&self) -> Option<&str> {
        self.lease.as_ref().map(|l| l.owner.as_str())
    }

    pub fn has_live_lease(&self, now: DateTime<Utc>) -> bool {
        self.lease.as_ref().is_some_and(|l| l.is_live(now))
    }

    /// Uses MPI: more than one node or more than one rank.
    pub fn is_parallel(&self) -> bool {
        self.num_nodes > 1 || self.ranks_per_node > 1
    }

    /// Number of times the application has been started.
    pub fn attempts(&self) -> u32 {
        self.state_history
            .iter()
            .filter(|e| e.state == TaskState::Running)
            .count() as u32
    }

    /// Total ranks requested across nodes.
    pub fn nprocs(&self) -> u64 {
        u64::from(self.num_nodes) * u64::from(self.ranks_per_node)
    }

    /// Short directory-safe id prefix used for work directories.
    pub fn short_id(&self) -> String {
        self.id.simple().to_string()[..8].to_string()
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.name.trim().is_empty() {
            return Err(ModelError::InvalidField("name must not be empty".into()));
        }
        if self.application.trim().is_empty() {
            return Err(ModelError::InvalidField("application must not be empty".into()));
        }
        if self.num_nodes == 0 || self.ranks_per_node == 0 || self.node_packing_count == 0 {
            return Err(ModelError::InvalidField(
                "num_nodes, ranks_per_node and node_packing_count must be positive".into(),
            ));
        }
        if self.node_packing_count > 1 && self.is_parallel() {
            return Err(ModelError::InvalidField(format!(
                "node_packing_count={} requires num_nodes=1 and ranks_per_node=1",
                self.node_packing_count
            )));
        }
        if !self.wall_time_minutes.is_finite() || self.wall_time_minutes < 0.0 {
            return Err(ModelError::InvalidField(
                "wall_time_minutes must be a non-negative number".into(),
            ));
        }
        match self.state_history.last() {
            Some(last) if last.state == self.state => {}
            _ => {
                return Err(ModelError::InvalidField(
                    "state does not match the last history event".into(),
                ))
            }
        }
        if self.state_history[0].state != TaskState::Created {
            return Err(ModelError::InvalidField(
                "history must begin with CREATED".into(),
            ));
        }
        Ok(())
    }
}

/// Returns a copy of `task` moved to `to` with one more history event.
pub fn advance(
    task: &Task,
    to: TaskState,
    message: impl Into<String>,
    at: DateTime<Utc>,
) -> Result<Task, ModelError> {
    let mut next = task.clone();
    advance_in_place(&mut next, to, message, at)?;
    Ok(next)
}

/// In-place variant of [`advance`] used by the store and launcher, which own
/// their records.
pub fn advance_in_place(
    task: &mut Task,
    to: TaskState,
    message: impl Into<String>,
    at: DateTime<Utc>,
) -> Result<(), ModelError> {
    if !validate_transition(task.state, to) {
        return Err(ModelError::IllegalTransition {
            id: task.id,
            from: task.state,
            to,
        });
    }
    let last = task.last_timestamp();
    if at < last {
        return Err(ModelError::TimestampRegression {
            id: task.id,
            at,
            last,
        });
    }
    task.state = to;
    task.state_history.push(StateEvent {
        timestamp: at,
        state: to,
        message: message.into(),
    });
    Ok(())
}

/// Decides where a freshly created task goes.
pub fn classify_new(task: &Task, unfinished_parent_count: usize) -> Result<TaskState, ModelError> {
    if task.state != TaskState::Created {
        return Err(ModelError::NotNew(task.id));
    }
    Ok(if unfinished_parent_count == 0 {
        TaskState::Ready
    } else {
        TaskState::AwaitingParents
    })
}

/// Keeps the last [`MAX_TAIL_BYTES`] of `text`, cut on a char boundary.
pub fn tail_text(text: &str) -> &str {
    if text.len() <= MAX_TAIL_BYTES {
        return text;
    }
    let mut start = text.len() - MAX_TAIL_BYTES;
    while !text.is_char_boundary(start) {
        start += 1;
    }
    &text[start..]
}

#[cfg(test)]
mod tests {
    use super::*;
    use chrono::Duration;
    use proptest::prelude::*;
    use TaskState::*;

    fn running_task() -> Task {
        let t0 = now_micros();
        let mut t = Task::new_at("sim", "wf", "app", t0);
        for s in [Ready, StagedIn, Preprocessed, Running] {
            advance_in_place(&mut t, s, "", t0).unwrap();
        }
        t
    }

    #[test]
    fn listed_edges() {
        assert!(validate_transition(Running, RunError));
        assert!(validate_transition(RunError, Failed));
        assert!(!validate_transition(JobFinished, Running));
        assert!(validate_transition(Failed, RestartReady));
        assert!(!validate_transition(Created, JobFinished));
    }

    #[test]
    fn terminal_states_have_no_exits_except_manual_restart() {
        for s in TaskState::ALL {
            if s.is_terminal() {
                let exits: Vec<_> = s.successors().to_vec();
                if s == Failed {
                    assert_eq!(exits, vec![RestartReady]);
                } else {
                    assert!(exits.is_empty(), "{s} has exits");
                }
            } else {
                assert!(!s.successors().is_empty(), "{s} has no exits");
                assert!(validate_transition(s, UserKilled), "{s} cannot be killed");
            }
        }
    }

    #[test]
    fn advance_records_error_tail() {
        let t = running_task();
        let before = t.state_history.len();
        let next = advance(&t, RunError, "exit 1; tail: segfault", now_micros()).unwrap();
        assert_eq!(next.state, RunError);
        assert_eq!(next.state_history.len(), before + 1);
        assert_eq!(next.state_history.last().unwrap().message, "exit 1; tail: segfault");
        // input untouched
        assert_eq!(t.state, Running);
        assert_eq!(t.state_history.len(), before);
    }

    #[test]
    fn advance_rejects_missing_edge() {
        let t = Task::new("a", "wf", "app");
        let err = advance(&t, JobFinished, "", now_micros()).unwrap_err();
        assert!(matches!(
            err,
            ModelError::IllegalTransition { from: Created, to: JobFinished, .. }
        ));
    }

    #[test]
    fn advance_rejects_time_travel() {
        let t = Task::new("a", "wf", "app");
        let earlier = t.created_at() - Duration::seconds(1);
        let err = advance(&t, Ready, "", earlier).unwrap_err();
        assert!(matches!(err, ModelError::TimestampRegression { .. }));
    }

    #[test]
    fn classify() {
        let t = Task::new("a", "wf", "app");
        assert_eq!(classify_new(&t, 0).unwrap(), Ready);
        assert_eq!(classify_new(&t, 3).unwrap(), AwaitingParents);
        let r = running_task();
        assert_eq!(classify_new(&r, 0), Err(ModelError::NotNew(r.id)));
    }

    #[test]
    fn packing_requires_serial_shape() {
        let mut t = Task::new("a", "wf", "app");
        t.num_nodes = 4;
        t.node_packing_count = 2;
        assert!(matches!(t.validate(), Err(ModelError::InvalidField(_))));
        t.num_nodes = 1;
        assert!(t.validate().is_ok());
        t.ranks_per_node = 2;
        assert!(t.validate().is_err());
    }

    #[test]
    fn state_names_round_trip() {
        for s in TaskState::ALL {
            assert_eq!(s.as_str().parse::<TaskState>().unwrap(), s);
            let json = serde_json::to_string(&s).unwrap();
            assert_eq!(json, format!("\"{}\"", s.as_str()));
        }
        assert!("BOGUS".parse::<TaskState>().is_err());
    }

    #[test]
    fn error_policy_parsing() {
        assert_eq!("fail".parse::<ErrorPolicy>().unwrap(), ErrorPolicy::Fail);
        assert_eq!(
            "retry:3".parse::<ErrorPolicy>().unwrap(),
            ErrorPolicy::Retry { max_attempts: 3 }
        );
        assert_eq!(
            "retry(2)".parse::<ErrorPolicy>().unwrap(),
            ErrorPolicy::Retry { max_attempts: 2 }
        );
        assert!("retry:0".parse::<ErrorPolicy>().is_err());
        assert_eq!("handler".parse::<ErrorPolicy>().unwrap(), ErrorPolicy::Handler);
    }

    #[test]
    fn tail_is_bounded_and_char_safe() {
        let long = "é".repeat(3000);
        let tail = tail_text(&long);
        assert!(tail.len() <= MAX_TAIL_BYTES);
        assert!(tail.chars().all(|c| c == 'é'));
        assert_eq!(tail_text("short"), "short");
    }

    fn arb_state() -> impl Strategy<Value = TaskState> {
        proptest::sample::select(TaskState::ALL.to_vec())
    }

    proptest! {
        #[test]
        fn random_walk_histories_replay_cleanly(choices in proptest::collection::vec(0usize..8, 1..60)) {
            let t0 = now_micros();
            let mut t = Task::new_at("w", "wf", "app", t0);
            for (i, c) in choices.iter().enumerate() {
                let succ = t.state.successors();
                if succ.is_empty() { break; }
                let to = succ[c % succ.len()];
                advance_in_place(&mut t, to, "", t0 + Duration::milliseconds(i as i64)).unwrap();
            }
            for pair in t.state_history.windows(2) {
                prop_assert!(validate_transition(pair[0].state, pair[1].state));
                prop_assert!(pair[0].timestamp <= pair[1].timestamp);
            }
            prop_assert_eq!(t.state, t.state_history.last().unwrap().state);
        }

        #[test]
        fn terminal_absorption(from in arb_state(), to in arb_state()) {
            if from.is_terminal() && validate_transition(from, to) {
                prop_assert_eq!((from, to), (Failed, RestartReady));
            }
        }
    }
}
