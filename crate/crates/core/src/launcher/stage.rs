//! The work done by transition workers: staging files in and out and
//! running application hooks. Workers never write to the store; they report
//! an outcome and the coordinator commits it.

use std::fs::{self, File};
use std::io;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::Arc;

use crate::dag;
use crate::model::{AppDefinition, Task, TaskState};
use crate::project::ENV_DB_PATH;
use crate::store::Store;

use super::exit::read_tail;

#[derive(Debug)]
pub struct StageContext {
    pub project_root: PathBuf,
    pub data_dir: PathBuf,
    pub store: Arc<Store>,
    /// Prepended to `PATH` for hooks and applications.
    pub path_prefix: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StageKind {
    StageIn,
    Preprocess,
    Postprocess,
    StageOut,
}

impl StageKind {
    fn label(self) -> &'static str {
        match self {
            StageKind::StageIn => "stage-in",
            StageKind::Preprocess => "preprocess",
            StageKind::Postprocess => "postprocess",
            StageKind::StageOut => "stage-out",
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageJob {
    pub kind: StageKind,
    pub task: Task,
    pub app: AppDefinition,
    /// Exit code passed to the postprocess hook.
    pub exit_code: Option<i32>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StageOutcome {
    /// Work directory prepared.
    StagedIn(PathBuf),
    Done,
    Failed(String),
}

fn sanitize(s: &str) -> String {
    let out: String = s
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-') { c } else { '_' })
        .collect();
    match out.trim_matches('.') {
        "" => "_".into(),
        _ => out,
    }
}

/// `<data>/<workflow>/<name>_<id8>`, unique per task.
pub fn work_dir_for(data_dir: &Path, task: &Task) -> PathBuf {
    let wf = if task.workflow.is_empty() { "default" } else { &task.workflow };
    data_dir
        .join(sanitize(wf))
        .join(format!("{}_{}", sanitize(&task.name), task.short_id()))
}

/// The task-aware environment handed to hooks and applications.
pub fn context_env(task: &Task, state: TaskState, db_path: &Path, exit_code: Option<i32>) -> Vec<(String, String)> {
    let mut env = vec![
        ("PILOTGRID_JOB_ID".to_string(), task.id.to_string()),
        ("PILOTGRID_JOB_STATE".to_string(), state.as_str().to_string()),
        ("PILOTGRID_JOB_NAME".to_string(), task.name.clone()),
        ("PILOTGRID_WORKFLOW".to_string(), task.workflow.clone()),
        (ENV_DB_PATH.to_string(), db_path.display().to_string()),
    ];
    if let Some(code) = exit_code {
        env.push(("PILOTGRID_EXIT_CODE".to_string(), code.to_string()));
    }
    env
}

/// Relative program paths containing a slash are taken from the project root.
pub fn resolve_program(root: &Path, program: &str) -> PathBuf {
    let p = Path::new(program);
    if p.is_relative() && program.contains('/') {
        root.join(p)
    } else {
        p.to_path_buf()
    }
}

pub fn path_with_prefix(prefix: Option<&Path>) -> Option<String> {
    let prefix = prefix?;
    let current = std::env::var("PATH").unwrap_or_default();
    Some(if current.is_empty() {
        prefix.display().to_string()
    } else {
        format!("{}:{current}", prefix.display())
    })
}

pub fn run_stage(ctx: &StageContext, job: &StageJob) -> StageOutcome {
    let result = match job.kind {
        StageKind::StageIn => stage_in(ctx, &job.task).map(StageOutcome::StagedIn),
        StageKind::Preprocess => run_hook(ctx, job, job.app.preprocess.as_deref()).map(|_| StageOutcome::Done),
        StageKind::Postprocess => run_hook(ctx, job, job.app.postprocess.as_deref()).map(|_| StageOutcome::Done),
        StageKind::StageOut => stage_out(ctx, &job.task).map(|_| StageOutcome::Done),
    };
    result.unwrap_or_else(|e| StageOutcome::Failed(format!("{}: {e}", job.kind.label())))
}

fn work_dir(ctx: &StageContext, task: &Task) -> PathBuf {
    task.work_dir.clone().unwrap_or_else(|| work_dir_for(&ctx.data_dir, task))
}

fn stage_in(ctx: &StageContext, task: &Task) -> Result<PathBuf, String> {
    let dir = work_dir(ctx, task);
    fs::create_dir_all(&dir).map_err(|e| format!("cannot create {}: {e}", dir.display()))?;
    for src in &task.stage_in_sources {
        let from = if src.is_relative() { ctx.project_root.join(src) } else { src.clone() };
        let name = from
            .file_name()
            .ok_or_else(|| format!("stage-in source {} has no file name", src.display()))?;
        copy_tree(&from, &dir.join(name)).map_err(|e| format!("{}: {e}", src.display()))?;
    }
    if !task.input_files.trim().is_empty() {
        let parents = ctx
            .store
            .read(|tx| {
                let ids = tx.parents(task.id)?;
                ids.into_iter().map(|id| tx.task(id)).collect::<Result<Vec<_>, _>>()
            })
            .map_err(|e| e.to_string())?;
        let links = dag::resolve_inputs(task, &parents).map_err(|e| e.to_string())?;
        dag::materialize_inputs(&links, &dir).map_err(|e| e.to_string())?;
    }
    Ok(dir)
}

fn copy_tree(from: &Path, to: &Path) -> io::Result<()> {
    if from.is_dir() {
        fs::create_dir_all(to)?;
        for entry in fs::read_dir(from)? {
            let entry = entry?;
            copy_tree(&entry.path(), &to.join(entry.file_name()))?;
        }
        Ok(())
    } else {
        fs::copy(from, to).map(|_| ())
    }
}

fn run_hook(ctx: &StageContext, job: &StageJob, hook: Option<&str>) -> Result<(), String> {
    let Some(hook) = hook else {
        return Ok(());
    };
    let argv = shell_words::split(hook).map_err(|e| format!("cannot parse hook {hook:?}: {e}"))?;
    let Some((program, args)) = argv.split_first() else {
        return Ok(());
    };
    let dir = work_dir(ctx, &job.task);
    fs::create_dir_all(&dir).map_err(|e| e.to_string())?;
    let log_path = dir.join(format!("{}.log", job.kind.label()));
    let log = File::create(&log_path).map_err(|e| e.to_string())?;
    let log2 = log.try_clone().map_err(|e| e.to_string())?;
    let mut cmd = Command::new(resolve_program(&ctx.project_root, program));
    cmd.args(args)
        .current_dir(&dir)
        .stdin(Stdio::null())
        .stdout(log)
        .stderr(log2)
        .envs(&job.task.environment)
        .envs(context_env(&job.task, job.task.state, &ctx.project_root, job.exit_code));
    if let Some(path) = path_with_prefix(ctx.path_prefix.as_deref()) {
        cmd.env("PATH", path);
    }
    let status = cmd.status().map_err(|e| format!("cannot run {program}: {e}"))?;
    if status.success() {
        return Ok(());
    }
    let head = match status.code() {
        Some(c) => format!("hook exit code {c}"),
        None => "hook terminated by signal".to_string(),
    };
    let tail = read_tail(&log_path);
    let tail = tail.trim_end();
    Err(if tail.is_empty() { head } else { format!("{head}; output tail: {tail}") })
}

fn stage_out(ctx: &StageContext, task: &Task) -> Result<(), String> {
    let Some(out) = &task.stage_out else {
        return Ok(());
    };
    let dir = work_dir(ctx, task);
    let dest = if out.destination.is_relative() {
        ctx.project_root.join(&out.destination)
    } else {
        out.destination.clone()
    };
    fs::create_dir_all(&dest).map_err(|e| format!("cannot create {}: {e}", dest.display()))?;
    for pattern in out.patterns.split_whitespace() {
        let full = dir.join(pattern);
        let matches = glob::glob(&full.to_string_lossy()).map_err(|e| format!("bad pattern {pattern:?}: {e}"))?;
        for path in matches.flatten() {
            if let (true, Some(name)) = (path.is_file(), path.file_name()) {
                fs::copy(&path, dest.join(name)).map_err(|e| format!("{}: {e}", path.display()))?;
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::clock;
    use crate::model::StageOut;

    fn ctx(root: &Path) -> StageContext {
        StageContext {
            project_root: root.to_path_buf(),
            data_dir: root.join("data"),
            store: Arc::new(Store::in_memory(clock::system()).unwrap()),
            path_prefix: None,
        }
    }

    fn job(kind: StageKind, task: Task, app: AppDefinition) -> StageJob {
        StageJob {
            kind,
            task,
            app,
            exit_code: None,
        }
    }

    #[test]
    fn stage_in_copies_sources() {
        let tmp = tempfile::tempdir().unwrap();
        fs::create_dir_all(tmp.path().join("inbox")).unwrap();
        fs::write(tmp.path().join("inbox/7.inp"), "input").unwrap();
        let c = ctx(tmp.path());
        let mut t = Task::new("sim 7", "mini", "app");
        t.stage_in_sources = vec![PathBuf::from("inbox/7.inp")];
        let out = run_stage(&c, &job(StageKind::StageIn, t.clone(), AppDefinition::new("app", "true")));
        let StageOutcome::StagedIn(dir) = out else {
            panic!("{out:?}")
        };
        assert_eq!(dir, tmp.path().join("data/mini").join(format!("sim_7_{}", t.short_id())));
        assert_eq!(fs::read_to_string(dir.join("7.inp")).unwrap(), "input");

        t.stage_in_sources = vec![PathBuf::from("inbox/missing.inp")];
        let out = run_stage(&c, &job(StageKind::StageIn, t, AppDefinition::new("app", "true")));
        assert!(matches!(out, StageOutcome::Failed(m) if m.starts_with("stage-in:")));
    }

    #[test]
    fn hooks_see_context_and_report_failure() {
        let tmp = tempfile::tempdir().unwrap();
        let c = ctx(tmp.path());
        let mut t = Task::new("t", "wf", "app");
        t.work_dir = Some(tmp.path().join("w"));
        let mut app = AppDefinition::new("app", "true");
        assert_eq!(run_stage(&c, &job(StageKind::Preprocess, t.clone(), app.clone())), StageOutcome::Done);

        app.postprocess = Some("sh -c 'echo $PILOTGRID_JOB_ID $PILOTGRID_EXIT_CODE > seen'".into());
        let mut j = job(StageKind::Postprocess, t.clone(), app.clone());
        j.exit_code = Some(3);
        assert_eq!(run_stage(&c, &j), StageOutcome::Done);
        let seen = fs::read_to_string(tmp.path().join("w/seen")).unwrap();
        assert_eq!(seen.trim(), format!("{} 3", t.id));

        app.preprocess = Some("sh -c 'echo boom >&2; exit 4'".into());
        let out = run_stage(&c, &job(StageKind::Preprocess, t, app));
        assert_eq!(
            out,
            StageOutcome::Failed("preprocess: hook exit code 4; output tail: boom".into())
        );
    }

    #[test]
    fn stage_out_copies_matches() {
        let tmp = tempfile::tempdir().unwrap();
        let c = ctx(tmp.path());
        let mut t = Task::new("t", "wf", "app");
        let w = tmp.path().join("w");
        fs::create_dir_all(&w).unwrap();
        fs::write(w.join("a.out"), "a").unwrap();
        fs::write(w.join("b.log"), "b").unwrap();
        t.work_dir = Some(w);
        t.stage_out = Some(StageOut {
            patterns: "*.out".into(),
            destination: PathBuf::from("results"),
        });
        assert_eq!(
            run_stage(&c, &job(StageKind::StageOut, t, AppDefinition::new("app", "true"))),
            StageOutcome::Done
        );
        assert!(tmp.path().join("results/a.out").is_file());
        assert!(!tmp.path().join("results/b.log").exists());
    }
}
