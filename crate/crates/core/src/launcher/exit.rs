use std::fs::File;
use std::io::{Read, Seek, SeekFrom};
use std::path::Path;

use crate::model::{tail_text, AppDefinition, ErrorPolicy, Task, TaskState, MAX_TAIL_BYTES};

/// How an application process ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExitKind {
    Code(i32),
    Signalled(i32),
    /// Stopped by the launcher because the allocation is ending.
    Timeout,
    /// Stopped by the launcher after a user kill.
    Killed,
}

/// The state a RUNNING task moves to and the message recorded with it.
pub fn handle_exit(exit: ExitKind, stderr_tail: &str) -> (TaskState, String) {
    let with_tail = |head: String| {
        let tail = stderr_tail.trim_end();
        if tail.is_empty() {
            head
        } else {
            format!("{head}; stderr tail: {tail}")
        }
    };
    match exit {
        ExitKind::Code(0) => (TaskState::RunDone, String::new()),
        ExitKind::Code(n) => (TaskState::RunError, with_tail(format!("exit code {n}"))),
        ExitKind::Signalled(s) => (TaskState::RunError, with_tail(format!("terminated by signal {s}"))),
        ExitKind::Timeout => (TaskState::RunTimeout, "stopped at end of allocation".into()),
        ExitKind::Killed => (TaskState::UserKilled, "killed by user".into()),
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Resolution {
    Advance(TaskState, String),
    /// Run the postprocess hook and let it decide.
    Handler,
}

/// Applies the application's error policy to a task in RUN_ERROR or
/// RUN_TIMEOUT.
pub fn resolve_policy(task: &Task, app: &AppDefinition) -> Resolution {
    if task.state == TaskState::RunTimeout && app.restart_on_timeout {
        return Resolution::Advance(TaskState::RestartReady, "restart after timeout".into());
    }
    match &app.error_policy {
        ErrorPolicy::Fail => Resolution::Advance(TaskState::Failed, "error policy fail".into()),
        ErrorPolicy::Retry { max_attempts } => {
            let n = task.attempts();
            if n < *max_attempts {
                Resolution::Advance(TaskState::RestartReady, format!("retry after attempt {n} of {max_attempts}"))
            } else {
                Resolution::Advance(TaskState::Failed, format!("gave up after {n} attempts"))
            }
        }
        ErrorPolicy::Handler if app.postprocess.is_some() => Resolution::Handler,
        ErrorPolicy::Handler => Resolution::Advance(TaskState::Failed, "error handler has no postprocess hook".into()),
    }
}

/// Last [`MAX_TAIL_BYTES`] of a file, lossily decoded; empty if unreadable.
pub fn read_tail(path: &Path) -> String {
    let Ok(mut f) = File::open(path) else {
        return String::new();
    };
    let len = f.metadata().map(|m| m.len()).unwrap_or(0);
    let start = len.saturating_sub(MAX_TAIL_BYTES as u64);
    if f.seek(SeekFrom::Start(start)).is_err() {
        return String::new();
    }
    let mut buf = Vec::new();
    if f.read_to_end(&mut buf).is_err() {
        return String::new();
    }
    tail_text(&String::from_utf8_lossy(&buf)).to_string()
}
