//! POSIX ustar archives of result directories.
//!
//! Entries are written in sorted order with zeroed timestamps and owners so
//! the same tree always yields the same bytes. Nothing outside plain ustar
//! is emitted: paths that do not fit the name/prefix fields and files too
//! large for the 11-digit octal size field are rejected.

use std::fs::File;
use std::io::{self, Write};
use std::path::Path;

use tar::{EntryType, Header};

/// Largest size the ustar size field can hold (8 GiB - 1).
pub const USTAR_MAX_SIZE: u64 = 0o77777777777;

#[derive(Debug, thiserror::Error)]
#[error("archiving {path}: {source}")]
pub struct ArchiveError {
    pub path: String,
    #[source]
    pub source: io::Error,
}

fn fail(path: &str, msg: impl Into<String>) -> ArchiveError {
    ArchiveError {
        path: path.to_string(),
        source: io::Error::new(io::ErrorKind::InvalidInput, msg.into()),
    }
}

fn header(rel: &str, kind: EntryType, size: u64, mode: u32) -> Result<Header, ArchiveError> {
    let mut h = Header::new_ustar();
    h.set_path(rel).map_err(|e| fail(rel, e.to_string()))?;
    h.set_entry_type(kind);
    h.set_size(size);
    h.set_mode(mode);
    h.set_mtime(0);
    h.set_uid(0);
    h.set_gid(0);
    h.set_cksum();
    Ok(h)
}

fn walk<W: Write>(b: &mut tar::Builder<W>, root: &Path, rel: &str) -> Result<(), ArchiveError> {
    let io_err = |source| ArchiveError {
        path: rel.to_string(),
        source,
    };
    let mut entries: Vec<_> = std::fs::read_dir(root.join(rel))
        .and_then(|d| d.collect::<Result<Vec<_>, _>>())
        .map_err(io_err)?;
    entries.sort_by_key(|e| e.file_name());
    for e in entries {
        let name = e
            .file_name()
            .into_string()
            .map_err(|n| fail(rel, format!("non-UTF-8 name {n:?}")))?;
        let child = if rel.is_empty() {
            name
        } else {
            format!("{rel}/{name}")
        };
        let err = |source| ArchiveError {
            path: child.clone(),
            source,
        };
        let meta = e.metadata().map_err(err)?;
        if meta.is_dir() {
            let h = header(&format!("{child}/"), EntryType::Directory, 0, 0o755)?;
            b.append(&h, io::empty()).map_err(err)?;
            walk(b, root, &child)?;
        } else if meta.is_file() {
            if meta.len() > USTAR_MAX_SIZE {
                return Err(fail(
                    &child,
                    format!("{} bytes exceeds the ustar size limit", meta.len()),
                ));
            }
            let h = header(&child, EntryType::Regular, meta.len(), 0o644)?;
            let f = File::open(e.path()).map_err(err)?;
            b.append(&h, f).map_err(err)?;
        } else {
            return Err(fail(&child, "only regular files and directories can be archived"));
        }
    }
    Ok(())
}

/// Writes an archive of everything under `dir` (not `dir` itself) to `out`.
pub fn write_archive<W: Write>(dir: &Path, out: W) -> Result<W, ArchiveError> {
    if !dir.is_dir() {
        return Err(fail(&dir.display().to_string(), "not a directory"));
    }
    let mut b = tar::Builder::new(out);
    walk(&mut b, dir, "")?;
    b.into_inner().map_err(|source| ArchiveError {
        path: dir.display().to_string(),
        source,
    })
}

pub fn archive_results(dir: &Path) -> Result<Vec<u8>, ArchiveError> {
    write_archive(dir, Vec::new())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_dir_is_two_zero_blocks() {
        let d = tempfile::tempdir().unwrap();
        let bytes = archive_results(d.path()).unwrap();
        assert_eq!(bytes, vec![0u8; 1024]);
        assert_eq!(tar::Archive::new(&bytes[..]).entries().unwrap().count(), 0);
    }

    #[test]
    fn deterministic_ustar_headers() {
        let d = tempfile::tempdir().unwrap();
        std::fs::write(d.path().join("a"), b"hi").unwrap();
        let one = archive_results(d.path()).unwrap();
        assert_eq!(&one[257..263], b"ustar\0");
        assert_eq!(one, archive_results(d.path()).unwrap());
    }

    #[test]
    fn overlong_path_is_rejected() {
        let d = tempfile::tempdir().unwrap();
        let name = "n".repeat(120);
        std::fs::write(d.path().join(&name), b"").unwrap();
        assert!(archive_results(d.path()).is_err());
    }
}
