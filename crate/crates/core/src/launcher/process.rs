use std::fs::File;
use std::io;
use std::os::unix::process::CommandExt;
use std::path::Path;
use std::process::{Child, Command, Stdio};

pub const JOB_OUT: &str = "job.out";
pub const JOB_ERR: &str = "job.err";

/// Starts an application in its own process group with stdout and stderr
/// captured to `job.out` and `job.err` in `work_dir`.
pub fn spawn(
    program: &Path,
    args: &[String],
    work_dir: &Path,
    env: impl IntoIterator<Item = (String, String)>,
) -> io::Result<Child> {
    let out = File::create(work_dir.join(JOB_OUT))?;
    let err = File::create(work_dir.join(JOB_ERR))?;
    let mut cmd = Command::new(program);
    cmd.args(args)
        .current_dir(work_dir)
        .envs(env)
        .stdin(Stdio::null())
        .stdout(out)
        .stderr(err)
        .process_group(0);
    #[cfg(target_os = "linux")]
    unsafe {
        // don't outlive a launcher that is killed outright
        cmd.pre_exec(|| {
            libc::prctl(libc::PR_SET_PDEATHSIG, libc::SIGKILL);
            Ok(())
        });
    }
    cmd.spawn()
}

/// Sends `sig` to the process group led by `pid`.
pub fn signal_group(pid: u32, sig: i32) {
    unsafe {
        libc::kill(-(pid as i32), sig);
    }
}
