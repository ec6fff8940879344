//! Launch-command and batch-script templates.
//!
//! Placeholders are `{name}` with a lower-case identifier. `{{` and `}}`
//! produce literal braces and `${...}` is passed through untouched so shell
//! variable syntax needs no escaping.

use std::fs;
use std::path::{Path, PathBuf};

use super::{JobMode, PlatformError, Result};
use crate::model::Task;
use crate::service::BatchJobSpec;

/// Substitutes placeholders using `lookup`; unknown names are an error.
pub fn substitute(pattern: &str, lookup: impl Fn(&str) -> Option<String>) -> Result<String> {
    let chars: Vec<char> = pattern.chars().collect();
    let mut out = String::with_capacity(pattern.len());
    let mut i = 0;
    while i < chars.len() {
        let c = chars[i];
        match c {
            '{' if chars.get(i + 1) == Some(&'{') => {
                out.push('{');
                i += 2;
            }
            '}' if chars.get(i + 1) == Some(&'}') => {
                out.push('}');
                i += 2;
            }
            '$' if chars.get(i + 1) == Some(&'{') => {
                let end = chars[i..].iter().position(|&c| c == '}').map(|p| i + p);
                let end = end.unwrap_or(chars.len() - 1);
                out.extend(&chars[i..=end]);
                i = end + 1;
            }
            '{' => {
                let close = chars[i + 1..].iter().position(|&c| c == '}').map(|p| i + 1 + p);
                let ident: Option<String> = close.map(|close| chars[i + 1..close].iter().collect());
                match ident {
                    Some(name) if is_ident(&name) => {
                        let value = lookup(&name).ok_or_else(|| PlatformError::UnboundPlaceholder(name.clone()))?;
                        out.push_str(&value);
                        i = close.unwrap() + 1;
                    }
                    _ => {
                        out.push('{');
                        i += 1;
                    }
                }
            }
            _ => {
                out.push(c);
                i += 1;
            }
        }
    }
    Ok(out)
}

fn is_ident(s: &str) -> bool {
    let mut bytes = s.bytes();
    matches!(bytes.next(), Some(b'a'..=b'z' | b'_'))
        && bytes.all(|b| matches!(b, b'a'..=b'z' | b'0'..=b'9' | b'_'))
}

/// How a parallel application is started on its nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchTemplate {
    pub name: String,
    pub pattern: String,
    /// Rendered once per environment variable with `{key}` and `{value}`.
    pub env_flag: Option<String>,
}

const BUILTINS: &[(&str, &str)] = &[
    (
        "aprun",
        "# Cray ALPS\n# env-flag: -e {key}={value}\naprun -n {nprocs} -N {ranks_per_node} -d 1 -j 1 {env_flags} {exe} {args}\n",
    ),
    (
        "mpirun",
        "# MPICH / OpenMPI style\nmpirun -n {nprocs} -npernode {ranks_per_node} {env_flags} {exe} {args}\n",
    ),
    (
        "srun",
        "# Slurm\nsrun -N {num_nodes} -n {nprocs} --ntasks-per-node={ranks_per_node} {env_flags} {exe} {args}\n",
    ),
    ("local", "# run on the launcher host without an MPI wrapper\n{exe} {args}\n"),
];

impl LaunchTemplate {
    /// Parses template file text. `# env-flag: ...` sets the per-variable
    /// flag; other `#` lines are comments; remaining lines are joined.
    pub fn parse(name: &str, text: &str) -> LaunchTemplate {
        let mut env_flag = None;
        let mut body = Vec::new();
        for line in text.lines() {
            let line = line.trim();
            if let Some(rest) = line.strip_prefix('#') {
                if let Some(flag) = rest.trim().strip_prefix("env-flag:") {
                    env_flag = Some(flag.trim().to_string());
                }
            } else if !line.is_empty() {
                body.push(line);
            }
        }
        LaunchTemplate {
            name: name.to_string(),
            pattern: body.join(" "),
            env_flag,
        }
    }

    pub fn builtin(name: &str) -> Option<LaunchTemplate> {
        BUILTINS
            .iter()
            .find(|(n, _)| *n == name)
            .map(|(n, text)| LaunchTemplate::parse(n, text))
    }

    pub fn builtin_sources() -> &'static [(&'static str, &'static str)] {
        BUILTINS
    }

    /// Looks in `dir/<name>.tmpl` first, then the built-ins.
    pub fn lookup(dir: Option<&Path>, name: &str) -> Result<LaunchTemplate> {
        if let Some(dir) = dir {
            let path = dir.join(format!("{name}.tmpl"));
            if path.is_file() {
                return Ok(LaunchTemplate::parse(name, &fs::read_to_string(path)?));
            }
        }
        Self::builtin(name).ok_or_else(|| PlatformError::UnknownTemplate(name.to_string()))
    }
}

/// A rendered command: the shell-safe line and its argument vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LaunchCommand {
    pub line: String,
    pub argv: Vec<String>,
}

fn split(what: &str, s: &str) -> Result<Vec<String>> {
    shell_words::split(s).map_err(|e| PlatformError::Client(format!("cannot parse {what} {s:?}: {e}")))
}

fn quote_all(words: &[String]) -> String {
    shell_words::join(words)
}

/// Renders the command for one task. `exe` is the application's executable
/// string (program plus fixed leading arguments). Serial mode ignores the
/// template and yields `exe args`.
pub fn render_launch_command(
    task: &Task,
    exe: &str,
    template: Option<&LaunchTemplate>,
    mode: JobMode,
    hosts: &[String],
) -> Result<LaunchCommand> {
    let exe_words = split("executable", exe)?;
    if exe_words.is_empty() {
        return Err(PlatformError::Client("empty executable".into()));
    }
    let arg_words = split("arguments", &task.args)?;
    let line = match (mode, template) {
        (JobMode::Serial, _) => {
            let mut words = exe_words;
            words.extend(arg_words);
            quote_all(&words)
        }
        (JobMode::Mpi, None) => return Err(PlatformError::UnknownTemplate(String::new())),
        (JobMode::Mpi, Some(t)) => {
            let env_flags = match &t.env_flag {
                Some(flag) => task
                    .environment
                    .iter()
                    .map(|(k, v)| {
                        substitute(flag, |name| match name {
                            "key" => Some(shell_words::quote(k).into_owned()),
                            "value" => Some(shell_words::quote(v).into_owned()),
                            _ => None,
                        })
                    })
                    .collect::<Result<Vec<_>>>()?
                    .join(" "),
                None => String::new(),
            };
            let rendered = substitute(&t.pattern, |name| match name {
                "nprocs" => Some(task.nprocs().to_string()),
                "ranks_per_node" => Some(task.ranks_per_node.to_string()),
                "num_nodes" => Some(task.num_nodes.to_string()),
                "env_flags" => Some(env_flags.clone()),
                "exe" => Some(quote_all(&exe_words)),
                "args" => Some(quote_all(&arg_words)),
                "hosts" => Some(shell_words::quote(&hosts.join(",")).into_owned()),
                _ => None,
            })?;
            rendered.split_whitespace().collect::<Vec<_>>().join(" ")
        }
    };
    let argv = split("rendered command", &line)?;
    Ok(LaunchCommand { line, argv })
}

pub const DEFAULT_BATCH_TEMPLATE: &str = "#!/bin/sh
# queue={queue} nodes={num_nodes} walltime={walltime_minutes}min
exec pilotgrid launcher --job-mode={job_mode} --batch-tag {batch_tag}
";

/// The batch script that starts a launcher inside an allocation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchTemplate {
    pub text: String,
}

impl Default for BatchTemplate {
    fn default() -> Self {
        BatchTemplate {
            text: DEFAULT_BATCH_TEMPLATE.to_string(),
        }
    }
}

impl BatchTemplate {
    pub fn load(path: &Path) -> Result<BatchTemplate> {
        Ok(BatchTemplate {
            text: fs::read_to_string(path)?,
        })
    }

    pub fn render(&self, spec: &BatchJobSpec) -> Result<String> {
        substitute(&self.text, |name| match name {
            "num_nodes" => Some(spec.num_nodes.to_string()),
            "walltime_minutes" => Some(format_minutes(spec.walltime_minutes)),
            "queue" => Some(spec.queue_name.clone()),
            "batch_tag" => Some(spec.id.to_string()),
            "job_mode" => Some(spec.job_mode.to_string()),
            _ => None,
        })
    }

    /// Renders and writes an executable script into `dir`.
    pub fn write(&self, spec: &BatchJobSpec, dir: &Path) -> Result<PathBuf> {
        let text = self.render(spec)?;
        fs::create_dir_all(dir)?;
        let path = super::script_path(dir, spec);
        fs::write(&path, text)?;
        #[cfg(unix)]
        {
            use std::os::unix::fs::PermissionsExt;
            fs::set_permissions(&path, fs::Permissions::from_mode(0o755))?;
        }
        Ok(path)
    }
}

/// Whole minutes print without a fraction.
pub fn format_minutes(m: f64) -> String {
    if (m - m.round()).abs() < 1e-9 {
        format!("{}", m.round() as i64)
    } else {
        format!("{m:.2}")
    }
}
