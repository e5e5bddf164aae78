//! Output validation with `cmp` semantics: byte-exact comparison that
//! reports the first differing offset.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{self, BufReader, Read};
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum FileOutcome {
    Pass,
    /// First differing 0-based byte offset. When one file is a proper
    /// prefix of the other this is the shorter file's length, where `cmp`
    /// reports end-of-file.
    Differ {
        offset: u64,
    },
    Missing,
    /// The file exists but could not be read.
    Unreadable(String),
}

impl FileOutcome {
    pub fn passed(&self) -> bool {
        *self == FileOutcome::Pass
    }
}

/// Per-file outcomes keyed by path relative to the expected root.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub files: BTreeMap<String, FileOutcome>,
}

impl ValidationReport {
    pub fn passed(&self) -> bool {
        self.files.values().all(FileOutcome::passed)
    }

    pub fn failures(&self) -> impl Iterator<Item = (&str, &FileOutcome)> {
        self.files
            .iter()
            .filter(|(_, o)| !o.passed())
            .map(|(p, o)| (p.as_str(), o))
    }
}

pub fn compare_bytes(expected: &[u8], actual: &[u8]) -> FileOutcome {
    match expected.iter().zip(actual).position(|(a, b)| a != b) {
        Some(i) => FileOutcome::Differ { offset: i as u64 },
        None if expected.len() == actual.len() => FileOutcome::Pass,
        None => FileOutcome::Differ {
            offset: expected.len().min(actual.len()) as u64,
        },
    }
}

fn fill(r: &mut impl Read, buf: &mut [u8]) -> io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

/// Streams two readers and compares them.
pub fn compare_readers(mut expected: impl Read, mut actual: impl Read) -> io::Result<FileOutcome> {
    let mut a = vec![0u8; 64 * 1024];
    let mut b = vec![0u8; 64 * 1024];
    let mut base = 0u64;
    loop {
        let na = fill(&mut expected, &mut a)?;
        let nb = fill(&mut actual, &mut b)?;
        match compare_bytes(&a[..na], &b[..nb]) {
            FileOutcome::Pass if na == 0 => return Ok(FileOutcome::Pass),
            FileOutcome::Pass => base += na as u64,
            FileOutcome::Differ { offset } => {
                return Ok(FileOutcome::Differ {
                    offset: base + offset,
                })
            }
            other => return Ok(other),
        }
    }
}

fn compare_files(expected: &Path, actual: &Path) -> FileOutcome {
    if !actual.is_file() {
        return FileOutcome::Missing;
    }
    let open = |p: &Path| File::open(p).map(BufReader::new);
    match (open(expected), open(actual)) {
        (Ok(e), Ok(a)) => compare_readers(e, a).unwrap_or_else(|e| FileOutcome::Unreadable(e.to_string())),
        (Err(e), _) | (_, Err(e)) => FileOutcome::Unreadable(e.to_string()),
    }
}

fn walk(root: &Path, rel: &str, out: &mut Vec<String>) -> io::Result<()> {
    let mut entries: Vec<_> = std::fs::read_dir(root.join(rel))?.collect::<Result<_, _>>()?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e.file_name().to_string_lossy().into_owned();
        let child = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        if e.file_type()?.is_dir() {
            walk(root, &child, out)?;
        } else {
            out.push(child);
        }
    }
    Ok(())
}

/// Compares every file under `expected` with the same relative path under
/// `actual`. Extra files in `actual` are ignored. The whole tree passes iff
/// every file passes.
pub fn validate_outputs(expected: &Path, actual: &Path) -> ValidationReport {
    let mut report = ValidationReport::default();
    let mut files = Vec::new();
    if let Err(e) = walk(expected, "", &mut files) {
        report.files.insert(
            ".".into(),
            FileOutcome::Unreadable(format!("{}: {e}", expected.display())),
        );
        return report;
    }
    for rel in files {
        let outcome = compare_files(&expected.join(&rel), &actual.join(&rel));
        report.files.insert(rel, outcome);
    }
    report
}
