//! Running one oracle command with a deadline.

use std::io::Read;
use std::path::Path;
use std::process::{Child, Command, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RunStatus {
    Exited(i32),
    /// Killed by a signal other than our own timeout.
    Signaled,
    TimedOut,
}

#[derive(Debug)]
pub(crate) struct CommandRun {
    pub status: RunStatus,
    pub output: Vec<u8>,
}

/// Splits `template` shell-style, substitutes `{name}` placeholders in each
/// word, and runs it in `cwd`. No shell is involved unless the template
/// invokes one.
pub(crate) fn run_template(template: &str, vars: &[(&str, &str)], cwd: &Path, timeout: Duration) -> Result<CommandRun> {
    let words = shlex::split(template)
        .filter(|w| !w.is_empty())
        .ok_or_else(|| Error::Config(format!("cannot parse command template '{template}'")))?;
    let argv: Vec<String> = words
        .iter()
        .map(|w| {
            vars.iter()
                .fold(w.clone(), |acc, (k, v)| acc.replace(&format!("{{{k}}}"), v))
        })
        .collect();

    let mut cmd = Command::new(&argv[0]);
    cmd.args(&argv[1..])
        .current_dir(cwd)
        .stdin(Stdio::null())
        .stdout(Stdio::piped())
        .stderr(Stdio::piped());
    #[cfg(unix)]
    {
        use std::os::unix::process::CommandExt;
        cmd.process_group(0);
    }
    let mut child = cmd.spawn().map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::CommandNotFound(argv[0].clone()),
        _ => Error::Sandbox(format!("spawning '{}': {e}", argv[0])),
    })?;

    let out_reader = drain(child.stdout.take());
    let err_reader = drain(child.stderr.take());
    let status = wait_with_deadline(&mut child, timeout)?;
    let mut output = out_reader.join().unwrap_or_default();
    output.extend(err_reader.join().unwrap_or_default());
    Ok(CommandRun { status, output })
}

fn drain<R: Read + Send + 'static>(pipe: Option<R>) -> thread::JoinHandle<Vec<u8>> {
    thread::spawn(move || {
        let mut buf = Vec::new();
        if let Some(mut p) = pipe {
            let _ = p.read_to_end(&mut buf);
        }
        buf
    })
}

fn wait_with_deadline(child: &mut Child, timeout: Duration) -> Result<RunStatus> {
    let deadline = Instant::now() + timeout;
    loop {
        if let Some(status) = child.try_wait()? {
            return Ok(match status.code() {
                Some(code) => RunStatus::Exited(code),
                None => RunStatus::Signaled,
            });
        }
        if Instant::now() >= deadline {
            kill_tree(child);
            let _ = child.wait();
            return Ok(RunStatus::TimedOut);
        }
        thread::sleep(Duration::from_millis(5));
    }
}

// The child leads its own process group; take down grandchildren too so
// they cannot hold the output pipes open.
fn kill_tree(child: &mut Child) {
    #[cfg(unix)]
    // SAFETY: kill(2) on a process group id we created; no memory involved.
    unsafe {
        libc::kill(-(child.id() as libc::pid_t), libc::SIGKILL);
    }
    let _ = child.kill();
}
