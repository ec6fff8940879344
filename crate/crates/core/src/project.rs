//! On-disk project layout.
//!
//! ```text
//! <root>/store/tasks.db      task store
//! <root>/data/<wf>/...       task working directories
//! <root>/log/                launcher and service logs
//! <root>/scripts/            rendered batch scripts
//! <root>/templates/*.tmpl    launch command templates
//! <root>/job-template.sh     batch script template
//! <root>/policy.json         queue policy
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use thiserror::Error;

use crate::platform::{LaunchTemplate, DEFAULT_BATCH_TEMPLATE};
use crate::service::{QueuePolicy, QueueRule, RangeRule};
use crate::store::{Store, StoreError};

pub const ENV_DB_PATH: &str = "PILOTGRID_DB_PATH";

#[derive(Debug, Error)]
pub enum ProjectError {
    #[error("{} already exists and is not empty", .0.display())]
    AlreadyExists(PathBuf),
    #[error("{} is not a pilotgrid project", .0.display())]
    NotAProject(PathBuf),
    #[error("no active project; set {ENV_DB_PATH}")]
    NoActiveProject,
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Project {
    root: PathBuf,
}

/// The policy written by `init`; sites are expected to edit it.
pub fn default_policy() -> QueuePolicy {
    QueuePolicy::new(vec![QueueRule {
        queue_name: "default".into(),
        max_queued: 4,
        ranges: vec![RangeRule::new(1, 8, 0.5, 1.0), RangeRule::new(9, 128, 0.5, 3.0)],
    }])
}

impl Project {
    /// Creates a project at `path`, which must be absent or an empty
    /// directory.
    pub fn init(path: impl AsRef<Path>) -> Result<Project, ProjectError> {
        let path = path.as_ref();
        if path.exists() && (!path.is_dir() || fs::read_dir(path)?.next().is_some()) {
            return Err(ProjectError::AlreadyExists(path.to_path_buf()));
        }
        fs::create_dir_all(path)?;
        let project = Project {
            root: path.canonicalize()?,
        };
        for dir in [
            project.store_dir(),
            project.data_dir(),
            project.log_dir(),
            project.scripts_dir(),
            project.templates_dir(),
        ] {
            fs::create_dir_all(dir)?;
        }
        Store::open(project.store_dir())?;
        fs::write(project.policy_path(), default_policy().to_json() + "\n")?;
        fs::write(project.batch_template_path(), DEFAULT_BATCH_TEMPLATE)?;
        for (name, text) in LaunchTemplate::builtin_sources() {
            fs::write(project.templates_dir().join(format!("{name}.tmpl")), text)?;
        }
        Ok(project)
    }

    pub fn open(path: impl AsRef<Path>) -> Result<Project, ProjectError> {
        let path = path.as_ref();
        let root = path
            .canonicalize()
            .map_err(|_| ProjectError::NotAProject(path.to_path_buf()))?;
        if !root.join("store").join(crate::store::DB_FILE).is_file() {
            return Err(ProjectError::NotAProject(path.to_path_buf()));
        }
        Ok(Project { root })
    }

    /// Opens the project named by `PILOTGRID_DB_PATH`.
    pub fn from_env(env: &BTreeMap<String, String>) -> Result<Project, ProjectError> {
        match env.get(ENV_DB_PATH) {
            Some(p) if !p.trim().is_empty() => Project::open(p),
            _ => Err(ProjectError::NoActiveProject),
        }
    }

    pub fn open_store(&self) -> Result<Store, ProjectError> {
        Ok(Store::open(self.store_dir())?)
    }

    /// Shell lines that make this the active project.
    pub fn activate_lines(&self) -> String {
        let root = self.root.display().to_string();
        format!("export {ENV_DB_PATH}={}\n", shell_words::quote(&root))
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn store_dir(&self) -> PathBuf {
        self.root.join("store")
    }

    pub fn data_dir(&self) -> PathBuf {
        self.root.join("data")
    }

    pub fn log_dir(&self) -> PathBuf {
        self.root.join("log")
    }

    pub fn scripts_dir(&self) -> PathBuf {
        self.root.join("scripts")
    }

    pub fn templates_dir(&self) -> PathBuf {
        self.root.join("templates")
    }

    pub fn batch_template_path(&self) -> PathBuf {
        self.root.join("job-template.sh")
    }

    pub fn policy_path(&self) -> PathBuf {
        self.root.join("policy.json")
    }

    /// Resolves a path given relative to the project root.
    pub fn resolve(&self, p: impl AsRef<Path>) -> PathBuf {
        self.root.join(p)
    }
}
