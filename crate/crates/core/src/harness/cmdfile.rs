//! Command files: one process per line,
//! `out=<vfs-path> err=<vfs-path> <program> <arg>*`.
//!
//! Tokens are separated by single spaces and there is no quoting. `#`
//! starts a comment that runs to the end of the line; blank lines are
//! ignored.

use std::fmt;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CommandEntry {
    pub stdout: String,
    pub stderr: String,
    pub program: String,
    /// Arguments after the program; the guest sees the program as argv[0].
    pub args: Vec<String>,
}

impl CommandEntry {
    pub fn argv(&self) -> Vec<String> {
        std::iter::once(self.program.clone())
            .chain(self.args.iter().cloned())
            .collect()
    }
}

impl fmt::Display for CommandEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "out={} err={} {}", self.stdout, self.stderr, self.program)?;
        for a in &self.args {
            write!(f, " {a}")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub message: String,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommandFile {
    pub entries: Vec<CommandEntry>,
}

impl CommandFile {
    pub fn parse(text: &str) -> Result<CommandFile, ParseError> {
        let mut entries = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let err = |message: String| ParseError { line: i + 1, message };
            let line = raw.split('#').next().unwrap_or("").trim_end_matches('\r');
            if line.trim().is_empty() {
                continue;
            }
            let line = line.trim_end_matches(' ');
            let tokens: Vec<&str> = line.split(' ').collect();
            if tokens.iter().any(|t| t.is_empty()) {
                return Err(err("tokens must be separated by single spaces".into()));
            }
            let [out, errp, program, args @ ..] = tokens.as_slice() else {
                return Err(err("expected out=<path> err=<path> <program> [arg...]".into()));
            };
            let stdout = out
                .strip_prefix("out=")
                .ok_or_else(|| err(format!("expected out=<path>, found {out:?}")))?;
            let stderr = errp
                .strip_prefix("err=")
                .ok_or_else(|| err(format!("expected err=<path>, found {errp:?}")))?;
            for p in [stdout, stderr, *program] {
                if !p.starts_with('/') {
                    return Err(err(format!("{p:?} is not an absolute path")));
                }
            }
            entries.push(CommandEntry {
                stdout: stdout.to_string(),
                stderr: stderr.to_string(),
                program: program.to_string(),
                args: args.iter().map(|s| s.to_string()).collect(),
            });
        }
        Ok(CommandFile { entries })
    }
}

impl fmt::Display for CommandFile {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for e in &self.entries {
            writeln!(f, "{e}")?;
        }
        Ok(())
    }
}
