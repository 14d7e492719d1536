use std::fmt;
use std::io::Write;
use std::path::Path;

use tempfile::NamedTempFile;

/// Exit status 2: bad flags, configs or input files. Exit status 3: a
/// valid request failed while running.
#[derive(Debug)]
pub enum Failure {
    Input(String),
    Runtime(String),
}

impl Failure {
    pub fn exit_code(&self) -> i32 {
        match self {
            Failure::Input(_) => 2,
            Failure::Runtime(_) => 3,
        }
    }

    pub fn input(msg: impl fmt::Display) -> Self {
        Failure::Input(msg.to_string())
    }
}

impl fmt::Display for Failure {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Failure::Input(m) | Failure::Runtime(m) => f.write_str(m),
        }
    }
}

impl From<autoprobe::Error> for Failure {
    fn from(e: autoprobe::Error) -> Self {
        if e.is_runtime() {
            Failure::Runtime(e.to_string())
        } else {
            Failure::Input(e.to_string())
        }
    }
}

pub type CliResult<T> = std::result::Result<T, Failure>;

/// Writes `bytes` next to `path` and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> CliResult<()> {
    write_atomic_with(path, |f| {
        f.write_all(bytes).map_err(|e| Failure::Runtime(e.to_string()))
    })
}

pub fn write_atomic_with(
    path: &Path,
    fill: impl FnOnce(&mut std::io::BufWriter<&mut NamedTempFile>) -> CliResult<()>,
) -> CliResult<()> {
    let runtime = |what: &str, e: &dyn fmt::Display| Failure::Runtime(format!("{what} {}: {e}", path.display()));
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = NamedTempFile::new_in(dir).map_err(|e| runtime("cannot create a temp file for", &e))?;
    {
        let mut w = std::io::BufWriter::new(&mut tmp);
        fill(&mut w)?;
        w.flush().map_err(|e| runtime("cannot write", &e))?;
    }
    tmp.as_file().sync_all().map_err(|e| runtime("cannot sync", &e))?;
    tmp.persist(path).map_err(|e| runtime("cannot rename into", &e.error))?;
    Ok(())
}

/// Sends a report to `out` (atomically, printing the path) or to stdout.
pub fn emit(out: Option<&Path>, bytes: &[u8]) -> CliResult<()> {
    match out {
        Some(path) => {
            write_atomic(path, bytes)?;
            println!("{}", path.display());
        }
        None => {
            let mut stdout = std::io::stdout().lock();
            stdout
                .write_all(bytes)
                .and_then(|_| stdout.flush())
                .map_err(|e| Failure::Runtime(format!("stdout: {e}")))?;
        }
    }
    Ok(())
}

pub fn to_json<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| Failure::Runtime(e.to_string()))?;
    bytes.push(b'\n');
    Ok(bytes)
}
