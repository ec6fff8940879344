//! Parent/child dependencies between tasks.
//!
//! Edges live in the store; this module holds no state of its own. Every
//! function that changes more than one row runs inside a single store
//! transaction, so hooks, the CLI and launchers may call it concurrently.

use std::collections::{BTreeMap, BTreeSet, HashSet, VecDeque};
use std::fs;
use std::path::{Path, PathBuf};

use chrono::{DateTime, Utc};
use glob::{MatchOptions, Pattern};
use thiserror::Error;
use uuid::Uuid;

use crate::model::{self, ModelError, Task, TaskState};
use crate::store::{Store, StoreError, Txn};

#[derive(Debug, Error)]
pub enum DagError {
    #[error("edge {parent} -> {child} would create a cycle")]
    CycleDetected { parent: Uuid, child: Uuid },
    #[error("task {id} has already started ({state})")]
    ChildAlreadyStarted { id: Uuid, state: TaskState },
    #[error("task {id} is already terminal ({state})")]
    AlreadyTerminal { id: Uuid, state: TaskState },
    #[error("input {name:?} is provided by both {first} and {second}")]
    BasenameCollision {
        name: String,
        first: PathBuf,
        second: PathBuf,
    },
    #[error("bad input pattern {pattern:?}: {reason}")]
    BadPattern { pattern: String, reason: String },
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = DagError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DependencyEdge {
    pub parent: Uuid,
    pub child: Uuid,
}

/// One file to place into a child's work directory.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct InputLink {
    pub source: PathBuf,
    pub name: String,
}

/// States in which a task's parents can still change where it goes.
fn is_pending(state: TaskState) -> bool {
    matches!(
        state,
        TaskState::Created | TaskState::AwaitingParents | TaskState::Ready
    )
}

fn stamp(task: &Task, now: DateTime<Utc>) -> DateTime<Utc> {
    now.max(task.last_timestamp())
}

/// Where an unstarted task belongs given its parents' states.
fn target_state(parents: &[Task]) -> TaskState {
    if parents.iter().any(|p| p.state.is_unsuccessful_end()) {
        TaskState::Failed
    } else if parents.iter().all(|p| p.state == TaskState::JobFinished) {
        TaskState::Ready
    } else {
        TaskState::AwaitingParents
    }
}

/// Moves an unstarted task to where its parents say it belongs. Returns the
/// new state when something changed.
fn settle(tx: &mut Txn<'_>, id: Uuid) -> Result<Option<TaskState>> {
    let mut task = tx.task(id)?;
    if !is_pending(task.state) {
        return Ok(None);
    }
    let parent_ids = tx.parents(id)?;
    let mut parents = Vec::with_capacity(parent_ids.len());
    for pid in parent_ids {
        parents.push(tx.task(pid)?);
    }
    let target = target_state(&parents);
    if target == task.state {
        return Ok(None);
    }
    let at = stamp(&task, tx.now());
    let message = parents
        .iter()
        .find(|p| p.state.is_unsuccessful_end())
        .map(|p| format!("parent {} ended {}", p.short_id(), p.state))
        .unwrap_or_default();
    let path = if task.state == TaskState::Created && target == TaskState::Failed {
        vec![TaskState::AwaitingParents, TaskState::Failed]
    } else {
        vec![target]
    };
    for step in path {
        let msg = if step == target { message.clone() } else { String::new() };
        model::advance_in_place(&mut task, step, msg, at)?;
    }
    tx.put_task(&task)?;
    Ok(Some(target))
}

/// Adds `parent -> child` and reclassifies the child.
pub fn add_dependency(store: &Store, parent: Uuid, child: Uuid) -> Result<DependencyEdge> {
    store.transaction(|tx| add_dependency_in(tx, parent, child))
}

pub fn add_dependency_in(tx: &mut Txn<'_>, parent: Uuid, child: Uuid) -> Result<DependencyEdge> {
    tx.task(parent)?;
    let child_task = tx.task(child)?;
    if parent == child {
        return Err(DagError::CycleDetected { parent, child });
    }
    if !is_pending(child_task.state) {
        return Err(DagError::ChildAlreadyStarted {
            id: child,
            state: child_task.state,
        });
    }
    if reaches(tx, child, parent)? {
        return Err(DagError::CycleDetected { parent, child });
    }
    tx.insert_edge(parent, child)?;
    if let Some(TaskState::Failed) = settle(tx, child)? {
        propagate(tx, child)?;
    }
    Ok(DependencyEdge { parent, child })
}

/// Depth-first search along child edges from `from`.
fn reaches(tx: &mut Txn<'_>, from: Uuid, target: Uuid) -> Result<bool> {
    let mut seen = HashSet::new();
    let mut stack = vec![from];
    while let Some(id) = stack.pop() {
        if id == target {
            return Ok(true);
        }
        if seen.insert(id) {
            stack.extend(tx.children(id)?);
        }
    }
    Ok(false)
}

/// All tasks reachable from `root` along child edges, excluding `root`, in
/// breadth-first order.
pub fn descendants(tx: &mut Txn<'_>, root: Uuid) -> Result<Vec<Uuid>> {
    let mut seen = HashSet::from([root]);
    let mut order = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(id) = queue.pop_front() {
        for c in tx.children(id)? {
            if seen.insert(c) {
                order.push(c);
                queue.push_back(c);
            }
        }
    }
    Ok(order)
}

/// Re-evaluates the children of a task that just reached a terminal state.
pub fn on_parent_terminal(store: &Store, parent: Uuid) -> Result<Vec<(Uuid, TaskState)>> {
    store.transaction(|tx| on_parent_terminal_in(tx, parent))
}

pub fn on_parent_terminal_in(tx: &mut Txn<'_>, parent: Uuid) -> Result<Vec<(Uuid, TaskState)>> {
    let p = tx.task(parent)?;
    if !p.state.is_terminal() {
        return Ok(Vec::new());
    }
    propagate(tx, parent)
}

fn propagate(tx: &mut Txn<'_>, root: Uuid) -> Result<Vec<(Uuid, TaskState)>> {
    let mut changes = Vec::new();
    let mut queue = VecDeque::from([root]);
    while let Some(id) = queue.pop_front() {
        for child in tx.children(id)? {
            if let Some(state) = settle(tx, child)? {
                changes.push((child, state));
                if state == TaskState::Failed {
                    queue.push_back(child);
                }
            }
        }
    }
    Ok(changes)
}

/// Settles every CREATED task and every AWAITING_PARENTS task whose parents
/// have all finished or one has failed.
pub fn sweep(store: &Store) -> Result<Vec<(Uuid, TaskState)>> {
    store.transaction(sweep_in)
}

pub fn sweep_in(tx: &mut Txn<'_>) -> Result<Vec<(Uuid, TaskState)>> {
    use crate::store::TaskFilter;
    let ids = tx.ids(&TaskFilter::all().states([TaskState::Created, TaskState::AwaitingParents]))?;
    let mut changes = Vec::new();
    for id in ids {
        if let Some(state) = settle(tx, id)? {
            changes.push((id, state));
            if state == TaskState::Failed {
                changes.extend(propagate(tx, id)?);
            }
        }
    }
    Ok(changes)
}

/// Inserts tasks and classifies each one (they have no parents yet).
pub fn add_tasks(store: &Store, tasks: Vec<Task>) -> Result<Vec<Uuid>> {
    store.transaction(|tx| {
        let mut ids = Vec::with_capacity(tasks.len());
        for t in &tasks {
            ids.push(tx.insert_task(t)?);
        }
        for &id in &ids {
            settle(tx, id)?;
        }
        Ok(ids)
    })
}

/// Inserts one task at runtime, optionally under parents, in one commit.
pub fn spawn(store: &Store, task: Task, parents: &[Uuid]) -> Result<Uuid> {
    store.transaction(|tx| {
        let id = tx.insert_task(&task)?;
        for &p in parents {
            tx.task(p)?;
            tx.insert_edge(p, id)?;
        }
        settle(tx, id)?;
        Ok(id)
    })
}

/// Marks `target` USER_KILLED and, when `recursive`, every non-terminal
/// descendant. Without `recursive`, children fail through the normal
/// propagation rule. Returns the ids marked USER_KILLED.
pub fn kill(store: &Store, target: Uuid, recursive: bool) -> Result<Vec<Uuid>> {
    store.transaction(|tx| kill_in(tx, target, recursive))
}

pub fn kill_in(tx: &mut Txn<'_>, target: Uuid, recursive: bool) -> Result<Vec<Uuid>> {
    let task = tx.task(target)?;
    if task.state.is_terminal() {
        return Err(DagError::AlreadyTerminal {
            id: target,
            state: task.state,
        });
    }
    let mut marked = Vec::new();
    let mut victims = vec![target];
    if recursive {
        victims.extend(descendants(tx, target)?);
    }
    for id in victims {
        let mut t = tx.task(id)?;
        if t.state.is_terminal() {
            continue;
        }
        let at = stamp(&t, tx.now());
        let message = if id == target {
            "killed by user".to_string()
        } else {
            format!("ancestor {} killed", &target.to_string()[..8])
        };
        model::advance_in_place(&mut t, TaskState::UserKilled, message, at)?;
        tx.put_task(&t)?;
        marked.push(id);
    }
    if !recursive {
        propagate(tx, target)?;
    }
    Ok(marked)
}

/// Files the launcher writes into every work directory. They never flow
/// into children.
pub const RESERVED_FILES: [&str; 4] = ["job.out", "job.err", "preprocess.log", "postprocess.log"];

/// Lists the files that flow into `child` from its parents' work
/// directories. Patterns match basenames only; output is sorted by name.
pub fn resolve_inputs(child: &Task, parents: &[Task]) -> Result<Vec<InputLink>> {
    let patterns = child
        .input_files
        .split_whitespace()
        .map(|p| {
            Pattern::new(p).map_err(|e| DagError::BadPattern {
                pattern: p.to_string(),
                reason: e.msg.to_string(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    if patterns.is_empty() {
        return Ok(Vec::new());
    }
    let opts = MatchOptions {
        case_sensitive: true,
        require_literal_separator: true,
        require_literal_leading_dot: true,
    };
    let mut found: BTreeMap<String, PathBuf> = BTreeMap::new();
    for parent in parents {
        let Some(dir) = parent.work_dir.as_deref() else {
            continue;
        };
        let Ok(entries) = fs::read_dir(dir) else {
            continue;
        };
        for entry in entries {
            let entry = entry?;
            let Some(name) = entry.file_name().to_str().map(str::to_string) else {
                continue;
            };
            if !entry.path().is_file() || RESERVED_FILES.contains(&name.as_str()) {
                continue;
            }
            if !patterns.iter().any(|p| p.matches_with(&name, opts)) {
                continue;
            }
            let path = entry.path();
            match found.get(&name) {
                Some(prev) if prev != &path => {
                    let (first, second) = if prev < &path {
                        (prev.clone(), path)
                    } else {
                        (path, prev.clone())
                    };
                    return Err(DagError::BasenameCollision {
                        name,
                        first,
                        second,
                    });
                }
                _ => {
                    found.insert(name, path);
                }
            }
        }
    }
    Ok(found
        .into_iter()
        .map(|(name, source)| InputLink { source, name })
        .collect())
}

/// Places each input into `dest`, preferring a symlink and falling back to a
/// copy.
pub fn materialize_inputs(links: &[InputLink], dest: &Path) -> Result<()> {
    for link in links {
        let target = dest.join(&link.name);
        if target.symlink_metadata().is_ok() {
            fs::remove_file(&target)?;
        }
        let source = fs::canonicalize(&link.source).unwrap_or_else(|_| link.source.clone());
        #[cfg(unix)]
        let linked = std::os::unix::fs::symlink(&source, &target).is_ok();
        #[cfg(not(unix))]
        let linked = false;
        if !linked {
            fs::copy(&source, &target)?;
        }
    }
    Ok(())
}

/// Ids of all parents of `id` that have not finished.
pub fn unfinished_parents(tx: &mut Txn<'_>, id: Uuid) -> Result<BTreeSet<Uuid>> {
    let mut out = BTreeSet::new();
    for p in tx.parents(id)? {
        if tx.task(p)?.state != TaskState::JobFinished {
            out.insert(p);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, ManualClock};
    use crate::model::AppDefinition;
    use crate::store::{StateChange, TaskFilter};
    use chrono::Duration;
    use std::sync::Arc;
    use TaskState::*;

    struct Fixture {
        store: Store,
        clock: ManualClock,
    }

    impl Fixture {
        fn new() -> Self {
            let clock = ManualClock::new(Utc::now());
            let store = Store::in_memory(Arc::new(clock.clone())).unwrap();
            store.add_app(&AppDefinition::new("app", "true")).unwrap();
            Fixture { store, clock }
        }

        fn add(&self, name: &str) -> Uuid {
            self.clock.advance(Duration::milliseconds(1));
            add_tasks(&self.store, vec![Task::new_at(name, "wf", "app", self.clock.now())]).unwrap()[0]
        }

        fn state(&self, id: Uuid) -> TaskState {
            self.store.get(id).unwrap().state
        }

        fn drive(&self, id: Uuid, path: &[TaskState]) {
            for &s in path {
                self.clock.advance(Duration::milliseconds(1));
                self.store
                    .update_batch(&[StateChange::new(id, s, "", self.clock.now())])
                    .unwrap();
            }
            on_parent_terminal(&self.store, id).unwrap();
        }

        fn finish(&self, id: Uuid) {
            self.drive(id, &[StagedIn, Preprocessed, Running, RunDone, Postprocessed, StagedOut, JobFinished]);
        }

        fn fail(&self, id: Uuid) {
            self.drive(id, &[StagedIn, Preprocessed, Running, RunError, Failed]);
        }

        fn diamond(&self) -> [Uuid; 5] {
            let ids = ["A", "B", "C", "D", "E"].map(|n| self.add(n));
            for mid in &ids[1..4] {
                add_dependency(&self.store, ids[0], *mid).unwrap();
                add_dependency(&self.store, *mid, ids[4]).unwrap();
            }
            ids
        }
    }

    #[test]
    fn diamond_edges_and_states() {
        let f = Fixture::new();
        let [a, b, c, d, e] = f.diamond();
        assert_eq!(f.store.edges().unwrap().len(), 6);
        assert_eq!(f.state(a), Ready);
        for id in [b, c, d, e] {
            assert_eq!(f.state(id), AwaitingParents);
        }
        assert!(matches!(
            add_dependency(&f.store, e, a),
            Err(DagError::CycleDetected { .. })
        ));
        assert!(matches!(
            add_dependency(&f.store, a, a),
            Err(DagError::CycleDetected { .. })
        ));
        assert!(matches!(
            add_dependency(&f.store, a, Uuid::new_v4()),
            Err(DagError::Store(StoreError::UnknownId(_)))
        ));
    }

    #[test]
    fn readiness_follows_parents() {
        let f = Fixture::new();
        let [a, b, c, d, e] = f.diamond();
        f.finish(a);
        for id in [b, c, d] {
            assert_eq!(f.state(id), Ready);
        }
        f.finish(b);
        f.finish(c);
        assert_eq!(f.state(e), AwaitingParents);
        f.drive(d, &[StagedIn, Preprocessed, Running, RunDone, Postprocessed, StagedOut, JobFinished]);
        assert_eq!(f.state(e), Ready);
        // a finished leaf has nothing to propagate to
        f.finish(e);
        assert!(on_parent_terminal(&f.store, e).unwrap().is_empty());
    }

    #[test]
    fn failure_propagates_transitively() {
        let f = Fixture::new();
        let [a, b, c, d, e] = f.diamond();
        f.fail(a);
        for id in [b, c, d, e] {
            assert_eq!(f.state(id), Failed, "{id}");
        }
    }

    #[test]
    fn child_already_started() {
        let f = Fixture::new();
        let a = f.add("a");
        let b = f.add("b");
        f.drive(b, &[StagedIn]);
        assert!(matches!(
            add_dependency(&f.store, a, b),
            Err(DagError::ChildAlreadyStarted { state: StagedIn, .. })
        ));
    }

    #[test]
    fn dependency_on_finished_or_failed_parent() {
        let f = Fixture::new();
        let done = f.add("done");
        f.finish(done);
        let bad = f.add("bad");
        f.fail(bad);
        let x = f.add("x");
        add_dependency(&f.store, done, x).unwrap();
        assert_eq!(f.state(x), Ready);
        add_dependency(&f.store, bad, x).unwrap();
        assert_eq!(f.state(x), Failed);
    }

    #[test]
    fn kill_recursive_marks_descendants() {
        let f = Fixture::new();
        let [a, b, _c, _d, e] = f.diamond();
        let mut marked = kill(&f.store, b, true).unwrap();
        marked.sort();
        let mut expect = vec![b, e];
        expect.sort();
        assert_eq!(marked, expect);
        assert_eq!(f.state(a), Ready);
        assert_eq!(kill(&f.store, a, true).unwrap().len(), 3);
        assert!(matches!(
            kill(&f.store, e, false),
            Err(DagError::AlreadyTerminal { state: UserKilled, .. })
        ));
    }

    #[test]
    fn kill_leaf_and_non_recursive() {
        let f = Fixture::new();
        let [a, b, c, d, e] = f.diamond();
        assert_eq!(kill(&f.store, e, true).unwrap(), vec![e]);
        let marked = kill(&f.store, a, false).unwrap();
        assert_eq!(marked, vec![a]);
        for id in [b, c, d] {
            assert_eq!(f.state(id), Failed);
        }
        let done = f.add("done");
        f.finish(done);
        assert!(matches!(
            kill(&f.store, done, true),
            Err(DagError::AlreadyTerminal { .. })
        ));
    }

    #[test]
    fn spawn_with_and_without_parent() {
        let f = Fixture::new();
        let mut t = Task::new_at("running", "wf", "app", f.clock.now());
        t.name = "parent".into();
        let p = add_tasks(&f.store, vec![t]).unwrap()[0];
        f.drive(p, &[StagedIn, Preprocessed, Running]);
        let child = spawn(&f.store, Task::new("child", "wf", "app"), &[p]).unwrap();
        assert_eq!(f.state(child), AwaitingParents);
        let free = spawn(&f.store, Task::new("free", "wf", "app"), &[]).unwrap();
        assert_eq!(f.state(free), Ready);
        assert!(matches!(
            spawn(&f.store, Task::new("x", "wf", "nope"), &[]),
            Err(DagError::Store(StoreError::UnknownApplication(_)))
        ));
    }

    #[test]
    fn sweep_classifies_raw_inserts() {
        let f = Fixture::new();
        let ids = f
            .store
            .insert(vec![Task::new("a", "wf", "app"), Task::new("b", "wf", "app")])
            .unwrap();
        assert_eq!(f.store.count(&TaskFilter::all().state(Created)).unwrap(), 2);
        f.store.transaction(|tx| tx.insert_edge(ids[0], ids[1])).unwrap();
        let changes = sweep(&f.store).unwrap();
        assert_eq!(changes, vec![(ids[0], Ready), (ids[1], AwaitingParents)]);
    }

    fn with_files(dir: &Path, names: &[&str]) -> Task {
        fs::create_dir_all(dir).unwrap();
        for n in names {
            fs::write(dir.join(n), n).unwrap();
        }
        let mut t = Task::new("p", "wf", "app");
        t.work_dir = Some(dir.to_path_buf());
        t
    }

    #[test]
    fn resolve_inputs_collects_matching_files() {
        let tmp = tempfile::tempdir().unwrap();
        let b = with_files(&tmp.path().join("B"), &["B.out", "log.txt", "job.out"]);
        let c = with_files(&tmp.path().join("C"), &["C.out", "job.out", "job.err"]);
        let d = with_files(&tmp.path().join("D"), &["D.out", ".hidden.out"]);
        let mut e = Task::new("E", "wf", "app");
        e.input_files = "*.out".into();
        let got = resolve_inputs(&e, &[b.clone(), c.clone(), d.clone()]).unwrap();
        let names: Vec<&str> = got.iter().map(|l| l.name.as_str()).collect();
        assert_eq!(names, ["B.out", "C.out", "D.out"]);
        assert_eq!(resolve_inputs(&e, &[d, b, c]).unwrap(), got);

        let dest = tmp.path().join("E");
        fs::create_dir_all(&dest).unwrap();
        materialize_inputs(&got, &dest).unwrap();
        assert_eq!(fs::read_to_string(dest.join("C.out")).unwrap(), "C.out");

        e.input_files = "   ".into();
        assert!(resolve_inputs(&e, &[]).unwrap().is_empty());
    }

    #[test]
    fn resolve_inputs_single_name_and_collision() {
        let tmp = tempfile::tempdir().unwrap();
        let a = with_files(&tmp.path().join("A"), &["B.inp", "C.inp", "D.inp"]);
        let mut b = Task::new("B", "wf", "app");
        b.input_files = "B.inp".into();
        let got = resolve_inputs(&b, &[a.clone()]).unwrap();
        assert_eq!(got.len(), 1);
        assert_eq!(got[0].name, "B.inp");

        let other = with_files(&tmp.path().join("A2"), &["B.inp"]);
        assert!(matches!(
            resolve_inputs(&b, &[a, other]),
            Err(DagError::BasenameCollision { name, .. }) if name == "B.inp"
        ));
    }
}
