//! Persistent task store.
//!
//! One SQLite database per project (`<project>/store/tasks.db`) in WAL mode.
//! Every mutation runs inside an `IMMEDIATE` transaction so writers are
//! serialized across processes while readers proceed against the last
//! committed snapshot. Leases replace row locks: a lease names an owner and
//! an expiry, and an expired lease is as good as none.
//!
//! Canonical query order is creation time ascending, ties broken by the
//! hyphenated UUID string.

mod filter;

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::Duration as StdDuration;

use chrono::{DateTime, Duration, TimeZone, Utc};
use rusqlite::types::Value;
use rusqlite::{params, params_from_iter, Connection, OptionalExtension, TransactionBehavior};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uuid::Uuid;

pub use filter::{Nullable, TaskFilter};

use crate::clock::{self, Clock};
use crate::model::{self, AppDefinition, Lease, ModelError, Task, TaskState};
use crate::service::{BatchJobSpec, BatchStatus};

pub const DEFAULT_LEASE_SECONDS: f64 = 120.0;
pub const DB_FILE: &str = "tasks.db";
const BUSY_TIMEOUT: StdDuration = StdDuration::from_secs(60);

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("task id {0} already exists")]
    DuplicateId(Uuid),
    #[error("unknown application {0:?}")]
    UnknownApplication(String),
    #[error("application {0:?} is already registered")]
    DuplicateApp(String),
    #[error("unknown task id {0}")]
    UnknownId(String),
    #[error("id prefix {prefix:?} matches {matches} tasks")]
    AmbiguousPrefix { prefix: String, matches: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("owner must be a non-empty string")]
    EmptyOwner,
    #[error("corrupt record: {0}")]
    Corrupt(String),
    #[error("database error: {0}")]
    Sqlite(#[from] rusqlite::Error),
    #[error("serialization error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = StoreError> = std::result::Result<T, E>;

/// One requested state change.
#[derive(Debug, Clone, PartialEq)]
pub struct StateChange {
    pub id: Uuid,
    pub to: TaskState,
    pub message: String,
    pub at: DateTime<Utc>,
}

impl StateChange {
    pub fn new(id: Uuid, to: TaskState, message: impl Into<String>, at: DateTime<Utc>) -> Self {
        StateChange {
            id,
            to,
            message: message.into(),
            at,
        }
    }
}

/// One application launch as recorded by a launcher.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DispatchRecord {
    pub seq: i64,
    pub task_id: Uuid,
    pub owner: String,
    pub nodes: Vec<String>,
    pub started: DateTime<Utc>,
    pub ended: Option<DateTime<Utc>>,
    pub outcome: Option<String>,
}

pub(crate) fn to_us(t: DateTime<Utc>) -> i64 {
    t.timestamp_micros()
}

pub(crate) fn from_us(us: i64) -> DateTime<Utc> {
    Utc.timestamp_micros(us).single().unwrap_or(DateTime::<Utc>::MIN_UTC)
}

pub(crate) fn secs(s: f64) -> Duration {
    Duration::microseconds((s * 1e6).round() as i64)
}

#[derive(Debug)]
pub struct Store {
    conn: Mutex<Connection>,
    clock: Arc<dyn Clock>,
    dir: Option<PathBuf>,
}

const SCHEMA: &str = "
CREATE TABLE IF NOT EXISTS apps (
    name TEXT PRIMARY KEY,
    body TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS tasks (
    id TEXT PRIMARY KEY,
    created_us INTEGER NOT NULL,
    name TEXT NOT NULL,
    workflow TEXT NOT NULL,
    application TEXT NOT NULL,
    num_nodes INTEGER NOT NULL,
    ranks_per_node INTEGER NOT NULL,
    state TEXT NOT NULL,
    batch_tag TEXT,
    lock_owner TEXT,
    lease_expires_us INTEGER,
    lease_secs REAL,
    lease_renewable INTEGER,
    body TEXT NOT NULL
);
CREATE INDEX IF NOT EXISTS tasks_order ON tasks(created_us, id);
CREATE INDEX IF NOT EXISTS tasks_state ON tasks(state);
CREATE INDEX IF NOT EXISTS tasks_tag ON tasks(batch_tag);
CREATE TABLE IF NOT EXISTS edges (
    parent TEXT NOT NULL,
    child TEXT NOT NULL,
    PRIMARY KEY (parent, child)
);
CREATE INDEX IF NOT EXISTS edges_child ON edges(child);
CREATE TABLE IF NOT EXISTS batch_jobs (
    id TEXT PRIMARY KEY,
    queue TEXT NOT NULL,
    status TEXT NOT NULL,
    created_us INTEGER NOT NULL,
    body TEXT NOT NULL
);
CREATE TABLE IF NOT EXISTS dispatches (
    seq INTEGER PRIMARY KEY AUTOINCREMENT,
    task_id TEXT NOT NULL,
    owner TEXT NOT NULL,
    nodes TEXT NOT NULL,
    started_us INTEGER NOT NULL,
    ended_us INTEGER,
    outcome TEXT
);
CREATE TABLE IF NOT EXISTS locks (
    name TEXT PRIMARY KEY,
    owner TEXT NOT NULL,
    expires_us INTEGER NOT NULL
);
";

impl Store {
    /// Opens (creating if needed) the store under `dir`.
    pub fn open(dir: impl AsRef<Path>) -> Result<Store> {
        Self::open_with_clock(dir, clock::system())
    }

    pub fn open_with_clock(dir: impl AsRef<Path>, clock: Arc<dyn Clock>) -> Result<Store> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let conn = Connection::open(dir.join(DB_FILE))?;
        conn.busy_timeout(BUSY_TIMEOUT)?;
        conn.pragma_update(None, "journal_mode", "WAL")?;
        conn.pragma_update(None, "synchronous", "NORMAL")?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store {
            conn: Mutex::new(conn),
            clock,
            dir: Some(dir.to_path_buf()),
        })
    }

    /// A private in-memory store, mostly for tests.
    pub fn in_memory(clock: Arc<dyn Clock>) -> Result<Store> {
        let conn = Connection::open_in_memory()?;
        conn.execute_batch(SCHEMA)?;
        Ok(Store {
            conn: Mutex::new(conn),
            clock,
            dir: None,
        })
    }

    pub fn dir(&self) -> Option<&Path> {
        self.dir.as_deref()
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        self.clock.clone()
    }

    pub fn now(&self) -> DateTime<Utc> {
        self.clock.now()
    }

    /// Runs `f` inside one write transaction; commits on `Ok`, rolls back on
    /// `Err`.
    pub fn transaction<T, E>(&self, f: impl FnOnce(&mut Txn<'_>) -> Result<T, E>) -> Result<T, E>
    where
        E: From<StoreError>,
    {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn
            .transaction_with_behavior(TransactionBehavior::Immediate)
            .map_err(StoreError::from)?;
        let mut txn = Txn {
            tx,
            now: self.clock.now(),
        };
        let out = f(&mut txn)?;
        txn.tx.commit().map_err(StoreError::from)?;
        Ok(out)
    }

    /// Read-only access against one consistent snapshot.
    pub fn read<T>(&self, f: impl FnOnce(&mut Txn<'_>) -> Result<T>) -> Result<T> {
        let mut conn = self.conn.lock().unwrap_or_else(|p| p.into_inner());
        let tx = conn.transaction_with_behavior(TransactionBehavior::Deferred)?;
        let mut txn = Txn {
            tx,
            now: self.clock.now(),
        };
        let out = f(&mut txn)?;
        txn.tx.finish()?;
        Ok(out)
    }

    pub fn add_app(&self, app: &AppDefinition) -> Result<()> {
        app.validate()?;
        self.transaction(|tx| tx.add_app(app))
    }

    pub fn app(&self, name: &str) -> Result<Option<AppDefinition>> {
        self.read(|tx| tx.app(name))
    }

    pub fn apps(&self) -> Result<Vec<AppDefinition>> {
        self.read(|tx| tx.apps())
    }

    /// Stores CREATED tasks in one atomic group; ids come back in input order.
    pub fn insert(&self, tasks: Vec<Task>) -> Result<Vec<Uuid>> {
        if tasks.is_empty() {
            return Ok(Vec::new());
        }
        self.transaction(|tx| tasks.iter().map(|t| tx.insert_task(t)).collect())
    }

    pub fn get(&self, id: Uuid) -> Result<Task> {
        self.read(|tx| tx.task(id))
    }

    pub fn query(&self, filter: &TaskFilter) -> Result<Vec<Task>> {
        self.read(|tx| tx.query(filter))
    }

    pub fn count(&self, filter: &TaskFilter) -> Result<usize> {
        self.read(|tx| tx.count(filter))
    }

    /// Applies all changes atomically; any illegal edge rolls back the batch.
    pub fn update_batch(&self, changes: &[StateChange]) -> Result<usize> {
        if changes.is_empty() {
            return Ok(0);
        }
        self.transaction(|tx| {
            for change in changes {
                tx.apply(change)?;
            }
            Ok(changes.len())
        })
    }

    /// Atomically leases up to `limit` matching tasks that nobody else holds.
    pub fn acquire(
        &self,
        filter: &TaskFilter,
        limit: usize,
        owner: &str,
        lease_seconds: f64,
    ) -> Result<Vec<Task>> {
        if owner.trim().is_empty() {
            return Err(StoreError::EmptyOwner);
        }
        if limit == 0 {
            return Ok(Vec::new());
        }
        self.transaction(|tx| tx.acquire(filter, limit, owner, lease_seconds))
    }

    /// Extends (renew) or clears (release) every lease held by `owner`.
    pub fn renew_or_release(&self, owner: &str, renew: bool) -> Result<usize> {
        self.transaction(|tx| {
            if renew {
                tx.renew(owner)
            } else {
                tx.release_all(owner)
            }
        })
    }

    /// Clears leases that have expired, whoever held them.
    pub fn clear_expired_leases(&self) -> Result<usize> {
        self.transaction(|tx| tx.clear_expired())
    }

    pub fn release_tasks(&self, owner: &str, ids: &[Uuid]) -> Result<usize> {
        self.transaction(|tx| tx.release(owner, ids))
    }

    /// Resolves a full UUID or any unique prefix of its hyphenated form.
    pub fn resolve_prefix(&self, prefix: &str) -> Result<Uuid> {
        self.read(|tx| tx.resolve_prefix(prefix))
    }

    /// Deletes matching tasks and their edges; returns removed ids.
    pub fn remove(&self, filter: &TaskFilter) -> Result<Vec<Uuid>> {
        self.transaction(|tx| tx.remove(filter))
    }

    pub fn parents(&self, id: Uuid) -> Result<Vec<Uuid>> {
        self.read(|tx| tx.parents(id))
    }

    pub fn children(&self, id: Uuid) -> Result<Vec<Uuid>> {
        self.read(|tx| tx.children(id))
    }

    pub fn edges(&self) -> Result<Vec<(Uuid, Uuid)>> {
        self.read(|tx| tx.edges())
    }

    pub fn batch_jobs(&self, statuses: Option<&[BatchStatus]>) -> Result<Vec<BatchJobSpec>> {
        self.read(|tx| tx.batch_jobs(statuses))
    }

    pub fn dispatch_log(&self) -> Result<Vec<DispatchRecord>> {
        self.read(|tx| tx.dispatch_log())
    }

    /// Takes or refreshes a named advisory lock record.
    pub fn try_lock(&self, name: &str, owner: &str, ttl_seconds: f64) -> Result<bool> {
        self.transaction(|tx| tx.try_lock(name, owner, ttl_seconds))
    }

    pub fn unlock(&self, name: &str, owner: &str) -> Result<()> {
        self.transaction(|tx| {
            tx.tx.execute(
                "DELETE FROM locks WHERE name = ?1 AND owner = ?2",
                params![name, owner],
            )?;
            Ok(())
        })
    }
}

/// A transaction handle; all multi-step mutations go through one of these.
pub struct Txn<'a> {
    tx: rusqlite::Transaction<'a>,
    now: DateTime<Utc>,
}

fn parse_uuid(s: &str) -> Result<Uuid> {
    Uuid::parse_str(s).map_err(|e| StoreError::Corrupt(format!("bad uuid {s:?}: {e}")))
}

const TASK_COLUMNS: &str =
    "body, lock_owner, lease_expires_us, lease_secs, lease_renewable, batch_tag, state";

fn row_to_task(row: &rusqlite::Row<'_>) -> rusqlite::Result<(String, Option<String>, Option<i64>, Option<f64>, Option<i64>)> {
    Ok((
        row.get(0)?,
        row.get(1)?,
        row.get(2)?,
        row.get(3)?,
        row.get(4)?,
    ))
}

fn decode_task(
    (body, owner, expires, _secs, renewable): (String, Option<String>, Option<i64>, Option<f64>, Option<i64>),
) -> Result<Task> {
    let mut task: Task = serde_json::from_str(&body)?;
    task.lease = match (owner, expires) {
        (Some(owner), Some(expires)) => Some(Lease {
            owner,
            expires: from_us(expires),
            renewable: renewable.unwrap_or(1) != 0,
        }),
        _ => None,
    };
    Ok(task)
}

impl Txn<'_> {
    /// The instant this transaction treats as "now".
    pub fn now(&self) -> DateTime<Utc> {
        self.now
    }

    pub fn add_app(&mut self, app: &AppDefinition) -> Result<()> {
        let exists: Option<String> = self
            .tx
            .query_row("SELECT name FROM apps WHERE name = ?1", [&app.name], |r| r.get(0))
            .optional()?;
        if exists.is_some() {
            return Err(StoreError::DuplicateApp(app.name.clone()));
        }
        self.tx.execute(
            "INSERT INTO apps (name, body) VALUES (?1, ?2)",
            params![app.name, serde_json::to_string(app)?],
        )?;
        Ok(())
    }

    pub fn app(&mut self, name: &str) -> Result<Option<AppDefinition>> {
        let body: Option<String> = self
            .tx
            .query_row("SELECT body FROM apps WHERE name = ?1", [name], |r| r.get(0))
            .optional()?;
        body.map(|b| serde_json::from_str(&b).map_err(StoreError::from))
            .transpose()
    }

    pub fn apps(&mut self) -> Result<Vec<AppDefinition>> {
        let mut stmt = self.tx.prepare("SELECT body FROM apps ORDER BY name")?;
        let bodies: Vec<String> = stmt
            .query_map([], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        bodies
            .iter()
            .map(|b| serde_json::from_str(b).map_err(StoreError::from))
            .collect()
    }

    pub fn insert_task(&mut self, task: &Task) -> Result<Uuid> {
        task.validate()?;
        if task.state != TaskState::Created || task.state_history.len() != 1 {
            return Err(ModelError::InvalidField(format!(
                "task {} must be inserted as CREATED with a single history event",
                task.id
            ))
            .into());
        }
        if self.app(&task.application)?.is_none() {
            return Err(StoreError::UnknownApplication(task.application.clone()));
        }
        if self.find(task.id)?.is_some() {
            return Err(StoreError::DuplicateId(task.id));
        }
        self.write_task(task, true)?;
        Ok(task.id)
    }

    fn write_task(&mut self, task: &Task, fresh: bool) -> Result<()> {
        let mut body_task = task.clone();
        body_task.lease = None;
        let body = serde_json::to_string(&body_task)?;
        let (owner, expires, renewable) = match &task.lease {
            Some(l) => (Some(l.owner.clone()), Some(to_us(l.expires)), Some(l.renewable as i64)),
            None => (None, None, None),
        };
        let tag = task.batch_tag.map(|t| t.to_string());
        if fresh {
            self.tx.execute(
                "INSERT INTO tasks (id, created_us, name, workflow, application, num_nodes,
                    ranks_per_node, state, batch_tag, lock_owner, lease_expires_us, lease_secs,
                    lease_renewable, body)
                 VALUES (?1, ?2, ?3, ?4, ?5, ?6, ?7, ?8, ?9, ?10, ?11, NULL, ?12, ?13)",
                params![
                    task.id.to_string(),
                    to_us(task.created_at()),
                    task.name,
                    task.workflow,
                    task.application,
                    task.num_nodes,
                    task.ranks_per_node,
                    task.state.as_str(),
                    tag,
                    owner,
                    expires,
                    renewable,
                    body
                ],
            )?;
        } else {
            // Lease columns are owned by acquire/renew/release.
            self.tx.execute(
                "UPDATE tasks SET name = ?2, workflow = ?3, application = ?4, num_nodes = ?5,
                    ranks_per_node = ?6, state = ?7, batch_tag = ?8, body = ?9
                 WHERE id = ?1",
                params![
                    task.id.to_string(),
                    task.name,
                    task.workflow,
                    task.application,
                    task.num_nodes,
                    task.ranks_per_node,
                    task.state.as_str(),
                    tag,
                    body
                ],
            )?;
        }
        Ok(())
    }

    /// Persists every non-lease field of an existing task.
    pub fn put_task(&mut self, task: &Task) -> Result<()> {
        if self.find(task.id)?.is_none() {
            return Err(StoreError::UnknownId(task.id.to_string()));
        }
        self.write_task(task, false)
    }

    pub fn find(&mut self, id: Uuid) -> Result<Option<Task>> {
        let row = self
            .tx
            .query_row(
                &format!("SELECT {TASK_COLUMNS} FROM tasks WHERE id = ?1"),
                [id.to_string()],
                row_to_task,
            )
            .optional()?;
        row.map(decode_task).transpose()
    }

    pub fn task(&mut self, id: Uuid) -> Result<Task> {
        self.find(id)?
            .ok_or_else(|| StoreError::UnknownId(id.to_string()))
    }

    pub fn query(&mut self, filter: &TaskFilter) -> Result<Vec<Task>> {
        self.query_limit(filter, None)
    }

    fn query_limit(&mut self, filter: &TaskFilter, limit: Option<usize>) -> Result<Vec<Task>> {
        let (clause, mut args) = filter.to_sql(self.now);
        let mut sql = format!(
            "SELECT {TASK_COLUMNS} FROM tasks WHERE {clause} ORDER BY created_us, id"
        );
        if let Some(limit) = limit {
            sql.push_str(" LIMIT ?");
            args.push(Value::Integer(limit as i64));
        }
        let mut stmt = self.tx.prepare(&sql)?;
        let rows: Vec<_> = stmt
            .query_map(params_from_iter(args), row_to_task)?
            .collect::<rusqlite::Result<_>>()?;
        rows.into_iter().map(decode_task).collect()
    }

    pub fn count(&mut self, filter: &TaskFilter) -> Result<usize> {
        let (clause, args) = filter.to_sql(self.now);
        let n: i64 = self.tx.query_row(
            &format!("SELECT COUNT(*) FROM tasks WHERE {clause}"),
            params_from_iter(args),
            |r| r.get(0),
        )?;
        Ok(n as usize)
    }

    pub fn ids(&mut self, filter: &TaskFilter) -> Result<Vec<Uuid>> {
        let (clause, args) = filter.to_sql(self.now);
        let mut stmt = self
            .tx
            .prepare(&format!("SELECT id FROM tasks WHERE {clause} ORDER BY created_us, id"))?;
        let ids: Vec<String> = stmt
            .query_map(params_from_iter(args), |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        ids.iter().map(|s| parse_uuid(s)).collect()
    }

    /// Strictly applies one change against the stored state.
    pub fn apply(&mut self, change: &StateChange) -> Result<Task> {
        let mut task = self.task(change.id)?;
        model::advance_in_place(&mut task, change.to, change.message.clone(), change.at)?;
        self.write_task(&task, false)?;
        Ok(task)
    }

    /// Applies `change` only if the task is still in `expected` and, when
    /// `owner` is given, still leased to that owner. Returns `None` when the
    /// stored record has moved on.
    pub fn apply_if(
        &mut self,
        owner: Option<&str>,
        expected: TaskState,
        change: &StateChange,
    ) -> Result<Option<Task>> {
        let Some(mut task) = self.find(change.id)? else {
            return Ok(None);
        };
        if task.state != expected {
            return Ok(None);
        }
        if let Some(owner) = owner {
            if task.lock_owner() != Some(owner) {
                return Ok(None);
            }
        }
        match model::advance_in_place(&mut task, change.to, change.message.clone(), change.at) {
            Ok(()) => {
                self.write_task(&task, false)?;
                Ok(Some(task))
            }
            Err(ModelError::TimestampRegression { .. }) | Err(ModelError::IllegalTransition { .. }) => {
                Ok(None)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn set_batch_tag(&mut self, ids: &[Uuid], tag: Option<Uuid>) -> Result<usize> {
        let mut n = 0;
        for &id in ids {
            if let Some(mut task) = self.find(id)? {
                task.batch_tag = tag;
                self.write_task(&task, false)?;
                n += 1;
            }
        }
        Ok(n)
    }

    pub fn set_work_dir(&mut self, id: Uuid, dir: &Path) -> Result<()> {
        let mut task = self.task(id)?;
        task.work_dir = Some(dir.to_path_buf());
        self.write_task(&task, false)
    }

    pub fn acquire(
        &mut self,
        filter: &TaskFilter,
        limit: usize,
        owner: &str,
        lease_seconds: f64,
    ) -> Result<Vec<Task>> {
        let mut filter = filter.clone();
        filter.lock_owner = Some(Nullable::IsNull);
        let mut tasks = self.query_limit(&filter, Some(limit))?;
        let expires = self.now + secs(lease_seconds);
        for task in &mut tasks {
            self.tx.execute(
                "UPDATE tasks SET lock_owner = ?2, lease_expires_us = ?3, lease_secs = ?4,
                    lease_renewable = 1 WHERE id = ?1",
                params![task.id.to_string(), owner, to_us(expires), lease_seconds],
            )?;
            task.lease = Some(Lease {
                owner: owner.to_string(),
                expires,
                renewable: true,
            });
        }
        Ok(tasks)
    }

    pub fn renew(&mut self, owner: &str) -> Result<usize> {
        let now = to_us(self.now);
        let n = self.tx.execute(
            "UPDATE tasks SET lease_expires_us = ?2 + CAST(lease_secs * 1000000 AS INTEGER)
             WHERE lock_owner = ?1 AND lease_expires_us > ?2 AND lease_renewable = 1",
            params![owner, now],
        )?;
        Ok(n)
    }

    pub fn release_all(&mut self, owner: &str) -> Result<usize> {
        let n = self.tx.execute(
            "UPDATE tasks SET lock_owner = NULL, lease_expires_us = NULL, lease_secs = NULL,
                lease_renewable = NULL WHERE lock_owner = ?1",
            params![owner],
        )?;
        Ok(n)
    }

    pub fn release(&mut self, owner: &str, ids: &[Uuid]) -> Result<usize> {
        let mut n = 0;
        for id in ids {
            n += self.tx.execute(
                "UPDATE tasks SET lock_owner = NULL, lease_expires_us = NULL, lease_secs = NULL,
                    lease_renewable = NULL WHERE lock_owner = ?1 AND id = ?2",
                params![owner, id.to_string()],
            )?;
        }
        Ok(n)
    }

    pub fn clear_expired(&mut self) -> Result<usize> {
        let n = self.tx.execute(
            "UPDATE tasks SET lock_owner = NULL, lease_expires_us = NULL, lease_secs = NULL,
                lease_renewable = NULL WHERE lock_owner IS NOT NULL AND lease_expires_us <= ?1",
            params![to_us(self.now)],
        )?;
        Ok(n)
    }

    pub fn resolve_prefix(&mut self, prefix: &str) -> Result<Uuid> {
        let prefix = prefix.trim().to_ascii_lowercase();
        if let Ok(id) = Uuid::parse_str(&prefix) {
            return match self.find(id)? {
                Some(_) => Ok(id),
                None => Err(StoreError::UnknownId(prefix)),
            };
        }
        if prefix.is_empty() || !prefix.chars().all(|c| c.is_ascii_hexdigit() || c == '-') {
            return Err(StoreError::UnknownId(prefix));
        }
        let mut stmt = self
            .tx
            .prepare("SELECT id FROM tasks WHERE substr(id, 1, ?1) = ?2 LIMIT 3")?;
        let hits: Vec<String> = stmt
            .query_map(params![prefix.len() as i64, prefix], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        match hits.len() {
            0 => Err(StoreError::UnknownId(prefix)),
            1 => parse_uuid(&hits[0]),
            _ => {
                let matches: i64 = self.tx.query_row(
                    "SELECT COUNT(*) FROM tasks WHERE substr(id, 1, ?1) = ?2",
                    params![prefix.len() as i64, prefix],
                    |r| r.get(0),
                )?;
                Err(StoreError::AmbiguousPrefix {
                    prefix,
                    matches: matches as usize,
                })
            }
        }
    }

    pub fn remove(&mut self, filter: &TaskFilter) -> Result<Vec<Uuid>> {
        let ids = self.ids(filter)?;
        for id in &ids {
            let s = id.to_string();
            self.tx.execute("DELETE FROM tasks WHERE id = ?1", [&s])?;
            self.tx
                .execute("DELETE FROM edges WHERE parent = ?1 OR child = ?1", [&s])?;
        }
        Ok(ids)
    }

    pub fn parents(&mut self, id: Uuid) -> Result<Vec<Uuid>> {
        self.edge_ends("SELECT parent FROM edges WHERE child = ?1 ORDER BY parent", id)
    }

    pub fn children(&mut self, id: Uuid) -> Result<Vec<Uuid>> {
        self.edge_ends("SELECT child FROM edges WHERE parent = ?1 ORDER BY child", id)
    }

    fn edge_ends(&mut self, sql: &str, id: Uuid) -> Result<Vec<Uuid>> {
        let mut stmt = self.tx.prepare_cached(sql)?;
        let ids: Vec<String> = stmt
            .query_map([id.to_string()], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        ids.iter().map(|s| parse_uuid(s)).collect()
    }

    pub fn has_edge(&mut self, parent: Uuid, child: Uuid) -> Result<bool> {
        let hit: Option<i64> = self
            .tx
            .query_row(
                "SELECT 1 FROM edges WHERE parent = ?1 AND child = ?2",
                params![parent.to_string(), child.to_string()],
                |r| r.get(0),
            )
            .optional()?;
        Ok(hit.is_some())
    }

    pub fn insert_edge(&mut self, parent: Uuid, child: Uuid) -> Result<()> {
        self.tx.execute(
            "INSERT OR IGNORE INTO edges (parent, child) VALUES (?1, ?2)",
            params![parent.to_string(), child.to_string()],
        )?;
        Ok(())
    }

    pub fn edges(&mut self) -> Result<Vec<(Uuid, Uuid)>> {
        let mut stmt = self
            .tx
            .prepare("SELECT parent, child FROM edges ORDER BY parent, child")?;
        let pairs: Vec<(String, String)> = stmt
            .query_map([], |r| Ok((r.get(0)?, r.get(1)?)))?
            .collect::<rusqlite::Result<_>>()?;
        pairs
            .iter()
            .map(|(p, c)| Ok((parse_uuid(p)?, parse_uuid(c)?)))
            .collect()
    }

    pub fn put_batch_job(&mut self, spec: &BatchJobSpec) -> Result<()> {
        self.tx.execute(
            "INSERT INTO batch_jobs (id, queue, status, created_us, body) VALUES (?1, ?2, ?3, ?4, ?5)
             ON CONFLICT(id) DO UPDATE SET queue = ?2, status = ?3, body = ?5",
            params![
                spec.id.to_string(),
                spec.queue_name,
                spec.status.as_str(),
                to_us(self.now),
                serde_json::to_string(spec)?
            ],
        )?;
        Ok(())
    }

    pub fn delete_batch_job(&mut self, id: Uuid) -> Result<()> {
        self.tx
            .execute("DELETE FROM batch_jobs WHERE id = ?1", [id.to_string()])?;
        Ok(())
    }

    pub fn batch_jobs(&mut self, statuses: Option<&[BatchStatus]>) -> Result<Vec<BatchJobSpec>> {
        let mut stmt = self
            .tx
            .prepare("SELECT body FROM batch_jobs ORDER BY created_us, id")?;
        let bodies: Vec<String> = stmt
            .query_map([], |r| r.get(0))?
            .collect::<rusqlite::Result<_>>()?;
        let mut out = Vec::new();
        for body in bodies {
            let spec: BatchJobSpec = serde_json::from_str(&body)?;
            if statuses.map_or(true, |s| s.contains(&spec.status)) {
                out.push(spec);
            }
        }
        Ok(out)
    }

    pub fn log_dispatch(&mut self, task_id: Uuid, owner: &str, nodes: &[String], started: DateTime<Utc>) -> Result<i64> {
        self.tx.execute(
            "INSERT INTO dispatches (task_id, owner, nodes, started_us) VALUES (?1, ?2, ?3, ?4)",
            params![
                task_id.to_string(),
                owner,
                serde_json::to_string(nodes)?,
                to_us(started)
            ],
        )?;
        Ok(self.tx.last_insert_rowid())
    }

    /// Closes the newest open dispatch of `task_id` by `owner`.
    pub fn end_dispatch(&mut self, task_id: Uuid, owner: &str, ended: DateTime<Utc>, outcome: &str) -> Result<()> {
        self.tx.execute(
            "UPDATE dispatches SET ended_us = ?3, outcome = ?4 WHERE seq = (
                SELECT MAX(seq) FROM dispatches WHERE task_id = ?1 AND owner = ?2 AND ended_us IS NULL)",
            params![task_id.to_string(), owner, to_us(ended), outcome],
        )?;
        Ok(())
    }

    pub fn dispatch_log(&mut self) -> Result<Vec<DispatchRecord>> {
        let mut stmt = self.tx.prepare(
            "SELECT seq, task_id, owner, nodes, started_us, ended_us, outcome FROM dispatches ORDER BY seq",
        )?;
        let rows: Vec<(i64, String, String, String, i64, Option<i64>, Option<String>)> = stmt
            .query_map([], |r| {
                Ok((r.get(0)?, r.get(1)?, r.get(2)?, r.get(3)?, r.get(4)?, r.get(5)?, r.get(6)?))
            })?
            .collect::<rusqlite::Result<_>>()?;
        rows.into_iter()
            .map(|(seq, id, owner, nodes, started, ended, outcome)| {
                Ok(DispatchRecord {
                    seq,
                    task_id: parse_uuid(&id)?,
                    owner,
                    nodes: serde_json::from_str(&nodes)?,
                    started: from_us(started),
                    ended: ended.map(from_us),
                    outcome,
                })
            })
            .collect()
    }

    pub fn try_lock(&mut self, name: &str, owner: &str, ttl_seconds: f64) -> Result<bool> {
        let now = to_us(self.now);
        let current: Option<(String, i64)> = self
            .tx
            .query_row(
                "SELECT owner, expires_us FROM locks WHERE name = ?1",
                [name],
                |r| Ok((r.get(0)?, r.get(1)?)),
            )
            .optional()?;
        if let Some((holder, expires)) = current {
            if holder != owner && expires > now {
                return Ok(false);
            }
        }
        self.tx.execute(
            "INSERT INTO locks (name, owner, expires_us) VALUES (?1, ?2, ?3)
             ON CONFLICT(name) DO UPDATE SET owner = ?2, expires_us = ?3",
            params![name, owner, now + secs(ttl_seconds).num_microseconds().unwrap_or(i64::MAX)],
        )?;
        Ok(true)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock::{Clock, ManualClock};
    use crate::model::TaskState::*;

    fn setup() -> (Store, ManualClock) {
        let clock = ManualClock::new(Utc::now());
        let store = Store::in_memory(Arc::new(clock.clone())).unwrap();
        store.add_app(&AppDefinition::new("run-sim", "bin/sim.x")).unwrap();
        (store, clock)
    }

    fn task(name: &str, clock: &ManualClock) -> Task {
        clock.advance(Duration::microseconds(1));
        Task::new_at(name, "wf", "run-sim", clock.now())
    }

    #[test]
    fn insert_listing_loop() {
        let (store, clock) = setup();
        let tasks: Vec<Task> = (1..=100)
            .map(|i| {
                let mut t = task(&format!("task{i}"), &clock);
                t.workflow = "mini".into();
                t.num_nodes = 4;
                t.ranks_per_node = 16;
                t
            })
            .collect();
        let expected: Vec<Uuid> = tasks.iter().map(|t| t.id).collect();
        let ids = store.insert(tasks).unwrap();
        assert_eq!(ids, expected);
        assert_eq!(store.count(&TaskFilter::all()).unwrap(), 100);
        assert!(store.insert(vec![]).unwrap().is_empty());
    }

    #[test]
    fn insert_rejects_unknown_app_and_duplicates() {
        let (store, clock) = setup();
        let mut bad = task("x", &clock);
        bad.application = "nope".into();
        assert!(matches!(
            store.insert(vec![bad]),
            Err(StoreError::UnknownApplication(a)) if a == "nope"
        ));
        let t = task("y", &clock);
        store.insert(vec![t.clone()]).unwrap();
        assert!(matches!(store.insert(vec![t.clone()]), Err(StoreError::DuplicateId(id)) if id == t.id));
        // atomic group: a good task alongside a duplicate is not stored
        let fresh = task("z", &clock);
        assert!(store.insert(vec![fresh.clone(), t]).is_err());
        assert!(matches!(store.get(fresh.id), Err(StoreError::UnknownId(_))));
    }

    #[test]
    fn duplicate_app_rejected() {
        let (store, _) = setup();
        assert!(matches!(
            store.add_app(&AppDefinition::new("run-sim", "x")),
            Err(StoreError::DuplicateApp(_))
        ));
    }

    #[test]
    fn update_batch_is_all_or_nothing() {
        let (store, clock) = setup();
        let ts: Vec<Task> = (0..3).map(|i| task(&format!("t{i}"), &clock)).collect();
        let ids = store.insert(ts).unwrap();
        let at = clock.now();
        let mut changes: Vec<StateChange> = ids
            .iter()
            .map(|id| StateChange::new(*id, Ready, "", at))
            .collect();
        changes[2].to = JobFinished;
        let before = store.query(&TaskFilter::all()).unwrap();
        match store.update_batch(&changes) {
            Err(StoreError::Model(ModelError::IllegalTransition { id, .. })) => assert_eq!(id, ids[2]),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(store.query(&TaskFilter::all()).unwrap(), before);
        changes[2].to = Ready;
        assert_eq!(store.update_batch(&changes).unwrap(), 3);
        assert_eq!(store.count(&TaskFilter::all().state(Ready)).unwrap(), 3);
        assert_eq!(store.update_batch(&[]).unwrap(), 0);
        let unknown = StateChange::new(Uuid::new_v4(), Ready, "", at);
        assert!(matches!(store.update_batch(&[unknown]), Err(StoreError::UnknownId(_))));
    }

    #[test]
    fn lease_lifecycle() {
        let (store, clock) = setup();
        let ids = store
            .insert((0..5).map(|i| task(&format!("t{i}"), &clock)).collect())
            .unwrap();
        let got = store.acquire(&TaskFilter::all(), 10, "L1", 10.0).unwrap();
        assert_eq!(got.len(), 5);
        assert!(store.acquire(&TaskFilter::all(), 10, "L2", 10.0).unwrap().is_empty());
        assert_eq!(
            store.count(&TaskFilter::all().leased_by("L1")).unwrap(),
            5
        );
        clock.advance(Duration::seconds(5));
        assert_eq!(store.renew_or_release("L1", true).unwrap(), 5);
        clock.advance(Duration::seconds(8));
        // renewed at t=5 for 10 s, still live at t=13
        assert!(store.acquire(&TaskFilter::all(), 10, "L2", 10.0).unwrap().is_empty());
        clock.advance(Duration::seconds(3));
        // crashed owner: expired leases are up for grabs
        let stolen = store.acquire(&TaskFilter::all().ids([ids[0]]), 1, "L2", 10.0).unwrap();
        assert_eq!(stolen.len(), 1);
        assert_eq!(stolen[0].lock_owner(), Some("L2"));
        assert_eq!(store.renew_or_release("L1", false).unwrap(), 4);
        assert_eq!(store.renew_or_release("nobody", false).unwrap(), 0);
        assert!(matches!(
            store.acquire(&TaskFilter::all(), 1, " ", 1.0),
            Err(StoreError::EmptyOwner)
        ));
    }

    #[test]
    fn prefix_resolution() {
        let (store, clock) = setup();
        let a = task("a", &clock);
        let id = a.id;
        store.insert(vec![a]).unwrap();
        assert_eq!(store.resolve_prefix(&id.to_string()[..8]).unwrap(), id);
        assert!(matches!(
            store.resolve_prefix("zz"),
            Err(StoreError::UnknownId(_))
        ));
        // force an ambiguity with two ids sharing a first character
        let mut b = task("b", &clock);
        let mut s = id.to_string();
        s.replace_range(1..2, if &s[1..2] == "0" { "1" } else { "0" });
        b.id = Uuid::parse_str(&s).unwrap();
        store.insert(vec![b]).unwrap();
        assert!(matches!(
            store.resolve_prefix(&id.to_string()[..1]),
            Err(StoreError::AmbiguousPrefix { matches: 2, .. })
        ));
    }

    #[test]
    fn ordering_is_creation_then_uuid() {
        let (store, clock) = setup();
        let at = clock.now();
        let mut tasks: Vec<Task> = (0..5).map(|i| Task::new_at(format!("t{i}"), "wf", "run-sim", at)).collect();
        tasks.push(Task::new_at("early", "wf", "run-sim", at - Duration::seconds(1)));
        store.insert(tasks.clone()).unwrap();
        let got = store.query(&TaskFilter::all()).unwrap();
        assert_eq!(got[0].name, "early");
        let same: Vec<String> = got[1..].iter().map(|t| t.id.to_string()).collect();
        let mut sorted = same.clone();
        sorted.sort();
        assert_eq!(same, sorted);
    }

    #[test]
    fn locks_are_exclusive_until_expiry() {
        let (store, clock) = setup();
        assert!(store.try_lock("service", "a", 10.0).unwrap());
        assert!(!store.try_lock("service", "b", 10.0).unwrap());
        assert!(store.try_lock("service", "a", 10.0).unwrap());
        clock.advance(Duration::seconds(11));
        assert!(store.try_lock("service", "b", 10.0).unwrap());
    }
}
