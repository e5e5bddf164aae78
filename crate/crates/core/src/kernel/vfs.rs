//! In-memory filesystem.
//!
//! Files keep an explicit backing buffer whose length is the node's
//! capacity. Writes past the capacity grow it to the smallest multiple of
//! [`GROWTH_QUANTUM`] that covers the write, in a single reallocation, so a
//! run of small appends costs one copy per 4 KiB rather than one per call.

use std::collections::BTreeMap;
use std::fs;
use std::io;
use std::path::Path;

use thiserror::Error;

use crate::abi::{NodeKind, StatRecord};

pub const GROWTH_QUANTUM: usize = 4096;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum FsError {
    #[error("invalid path {0:?}")]
    InvalidPath(String),
    #[error("no such file or directory: {0}")]
    NotFound(String),
    #[error("not a directory: {0}")]
    NotADirectory(String),
    #[error("is a directory: {0}")]
    IsADirectory(String),
    #[error("bad filesystem image: {0}")]
    BadImage(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for FsError {
    fn from(e: io::Error) -> Self {
        FsError::Io(e.to_string())
    }
}

/// Checks that `path` is absolute, `/`-separated, and has no empty, `.` or
/// `..` components. The root is `/`.
pub fn check_path(path: &str) -> Result<(), FsError> {
    let bad = || FsError::InvalidPath(path.to_string());
    let rest = path.strip_prefix('/').ok_or_else(bad)?;
    if rest.is_empty() {
        return Ok(());
    }
    if rest
        .split('/')
        .any(|c| c.is_empty() || c == "." || c == ".." || c.contains('\0'))
    {
        return Err(bad());
    }
    Ok(())
}

fn parent_of(path: &str) -> Option<&str> {
    if path == "/" {
        return None;
    }
    match path.rfind('/') {
        Some(0) => Some("/"),
        Some(i) => Some(&path[..i]),
        None => None,
    }
}

/// Joins a directory and a relative `/`-separated name.
pub fn join(dir: &str, name: &str) -> String {
    if dir == "/" {
        format!("/{name}")
    } else {
        format!("{dir}/{name}")
    }
}

#[derive(Debug, Clone)]
pub struct FsNode {
    kind: NodeKind,
    buf: Box<[u8]>,
    size: usize,
    reallocations: u64,
}

impl FsNode {
    pub fn directory() -> Self {
        FsNode {
            kind: NodeKind::Directory,
            buf: Box::default(),
            size: 0,
            reallocations: 0,
        }
    }

    pub fn file() -> Self {
        FsNode {
            kind: NodeKind::File,
            ..FsNode::directory()
        }
    }

    /// A file holding exactly `data`, with no spare capacity.
    pub fn file_with(data: &[u8]) -> Self {
        FsNode {
            kind: NodeKind::File,
            buf: data.into(),
            size: data.len(),
            reallocations: 0,
        }
    }

    pub fn kind(&self) -> NodeKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn capacity(&self) -> usize {
        self.buf.len()
    }

    /// Number of times the backing buffer has been replaced by a larger one.
    pub fn reallocations(&self) -> u64 {
        self.reallocations
    }

    pub fn content(&self) -> &[u8] {
        &self.buf[..self.size]
    }

    pub fn stat(&self) -> StatRecord {
        StatRecord {
            kind: self.kind,
            size: self.size as u64,
        }
    }

    fn reserve(&mut self, needed: usize) {
        if needed <= self.buf.len() {
            return;
        }
        let capacity = needed.div_ceil(GROWTH_QUANTUM) * GROWTH_QUANTUM;
        let mut grown = vec![0u8; capacity].into_boxed_slice();
        grown[..self.size].copy_from_slice(&self.buf[..self.size]);
        self.buf = grown;
        self.reallocations += 1;
    }

    pub fn append(&mut self, data: &[u8]) {
        self.write_at(self.size, data);
    }

    /// Writes `data` at `pos`, zero-filling any gap past the current end.
    pub fn write_at(&mut self, pos: usize, data: &[u8]) {
        let end = pos + data.len();
        self.reserve(end);
        if pos > self.size {
            self.buf[self.size..pos].fill(0);
        }
        self.buf[pos..end].copy_from_slice(data);
        self.size = self.size.max(end);
    }

    /// Up to `max` bytes starting at `pos`; empty at or past the end.
    pub fn read_at(&self, pos: usize, max: usize) -> &[u8] {
        let start = pos.min(self.size);
        let end = start.saturating_add(max).min(self.size);
        &self.buf[start..end]
    }

    /// Drops the content but keeps the backing buffer.
    pub fn truncate(&mut self) {
        self.size = 0;
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ImageEntry {
    Directory,
    File(Vec<u8>),
}

/// A directory tree to mirror into a freshly booted filesystem. Parent
/// directories are implied.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FsImage {
    entries: BTreeMap<String, ImageEntry>,
}

impl FsImage {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn from_entries(entries: impl IntoIterator<Item = (String, ImageEntry)>) -> Result<Self, FsError> {
        let mut image = FsImage::new();
        for (path, entry) in entries {
            image.insert(path, entry)?;
        }
        Ok(image)
    }

    pub fn insert(&mut self, path: String, entry: ImageEntry) -> Result<(), FsError> {
        check_path(&path).map_err(|_| FsError::BadImage(format!("invalid path {path:?}")))?;
        if path == "/" {
            return Err(FsError::BadImage("the root cannot be an entry".into()));
        }
        if self.entries.contains_key(&path) {
            return Err(FsError::BadImage(format!("duplicate path {path}")));
        }
        self.entries.insert(path, entry);
        Ok(())
    }

    pub fn add_file(&mut self, path: &str, data: impl Into<Vec<u8>>) -> Result<(), FsError> {
        self.insert(path.to_string(), ImageEntry::File(data.into()))
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &ImageEntry)> {
        self.entries.iter().map(|(p, e)| (p.as_str(), e))
    }

    pub fn get(&self, path: &str) -> Option<&ImageEntry> {
        self.entries.get(path)
    }

    /// Mirrors a host directory. Only regular files and directories are
    /// accepted, and names must be UTF-8.
    pub fn from_host_dir(dir: &Path) -> Result<Self, FsError> {
        let mut image = FsImage::new();
        if !dir.is_dir() {
            return Err(FsError::BadImage(format!("{} is not a directory", dir.display())));
        }
        image.walk(dir, "/")?;
        Ok(image)
    }

    fn walk(&mut self, host: &Path, vdir: &str) -> Result<(), FsError> {
        let mut children: Vec<_> = fs::read_dir(host)?.collect::<Result<_, _>>()?;
        children.sort_by_key(|e| e.file_name());
        for child in children {
            let name = child
                .file_name()
                .into_string()
                .map_err(|n| FsError::BadImage(format!("non-UTF-8 file name {}", n.to_string_lossy())))?;
            let vpath = join(vdir, &name);
            let ty = child.file_type()?;
            if ty.is_dir() {
                self.insert(vpath.clone(), ImageEntry::Directory)?;
                self.walk(&child.path(), &vpath)?;
            } else if ty.is_file() {
                self.insert(vpath, ImageEntry::File(fs::read(child.path())?))?;
            } else {
                return Err(FsError::BadImage(format!(
                    "{} is neither a file nor a directory",
                    child.path().display()
                )));
            }
        }
        Ok(())
    }
}

pub type NodeId = usize;

#[derive(Debug, Clone)]
pub struct Vfs {
    paths: BTreeMap<String, NodeId>,
    nodes: Vec<FsNode>,
}

impl Default for Vfs {
    fn default() -> Self {
        Vfs::new()
    }
}

impl Vfs {
    /// An empty filesystem holding only the root directory.
    pub fn new() -> Self {
        Vfs {
            paths: BTreeMap::from([("/".to_string(), 0)]),
            nodes: vec![FsNode::directory()],
        }
    }

    pub fn from_image(image: &FsImage) -> Result<Self, FsError> {
        let mut vfs = Vfs::new();
        for (path, entry) in image.entries() {
            match entry {
                ImageEntry::Directory => vfs.mkdir_all(path)?,
                ImageEntry::File(data) => {
                    if let Some(parent) = parent_of(path) {
                        vfs.mkdir_all(parent)?;
                    }
                    if vfs.paths.contains_key(path) {
                        return Err(FsError::BadImage(format!("{path} is both file and directory")));
                    }
                    vfs.insert(path, FsNode::file_with(data));
                }
            }
        }
        Ok(vfs)
    }

    fn insert(&mut self, path: &str, node: FsNode) -> NodeId {
        let id = self.nodes.len();
        self.nodes.push(node);
        self.paths.insert(path.to_string(), id);
        id
    }

    pub fn lookup(&self, path: &str) -> Option<NodeId> {
        self.paths.get(path).copied()
    }

    pub fn node(&self, id: NodeId) -> &FsNode {
        &self.nodes[id]
    }

    pub fn node_mut(&mut self, id: NodeId) -> &mut FsNode {
        &mut self.nodes[id]
    }

    pub fn exists(&self, path: &str) -> bool {
        self.paths.contains_key(path)
    }

    pub fn stat(&self, path: &str) -> Result<StatRecord, FsError> {
        check_path(path)?;
        self.lookup(path)
            .map(|id| self.node(id).stat())
            .ok_or_else(|| FsError::NotFound(path.to_string()))
    }

    /// Creates an empty file; the parent directory must exist. An existing
    /// file is returned unchanged.
    pub fn create_file(&mut self, path: &str) -> Result<NodeId, FsError> {
        check_path(path)?;
        if let Some(id) = self.lookup(path) {
            return match self.node(id).kind() {
                NodeKind::File => Ok(id),
                NodeKind::Directory => Err(FsError::IsADirectory(path.to_string())),
            };
        }
        let parent = parent_of(path).ok_or_else(|| FsError::IsADirectory(path.to_string()))?;
        match self.lookup(parent).map(|id| self.node(id).kind()) {
            Some(NodeKind::Directory) => Ok(self.insert(path, FsNode::file())),
            Some(NodeKind::File) => Err(FsError::NotADirectory(parent.to_string())),
            None => Err(FsError::NotFound(parent.to_string())),
        }
    }

    pub fn mkdir_all(&mut self, path: &str) -> Result<(), FsError> {
        check_path(path)?;
        if let Some(id) = self.lookup(path) {
            return match self.node(id).kind() {
                NodeKind::Directory => Ok(()),
                NodeKind::File => Err(FsError::NotADirectory(path.to_string())),
            };
        }
        if let Some(parent) = parent_of(path) {
            self.mkdir_all(parent)?;
        }
        self.insert(path, FsNode::directory());
        Ok(())
    }

    /// Creates or replaces a file with `data`, creating parent directories.
    pub fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), FsError> {
        check_path(path)?;
        if let Some(parent) = parent_of(path) {
            self.mkdir_all(parent)?;
        }
        let id = self.create_file(path)?;
        let node = self.node_mut(id);
        node.truncate();
        node.append(data);
        Ok(())
    }

    pub fn read_file(&self, path: &str) -> Result<&[u8], FsError> {
        check_path(path)?;
        let id = self
            .lookup(path)
            .ok_or_else(|| FsError::NotFound(path.to_string()))?;
        match self.node(id).kind() {
            NodeKind::File => Ok(self.node(id).content()),
            NodeKind::Directory => Err(FsError::IsADirectory(path.to_string())),
        }
    }

    fn under<'a>(&'a self, dir: &'a str) -> impl Iterator<Item = (&'a str, NodeId)> + 'a {
        let prefix = if dir == "/" {
            "/".to_string()
        } else {
            format!("{dir}/")
        };
        self.paths
            .range(prefix.clone()..)
            .take_while(move |(p, _)| p.starts_with(&prefix))
            .filter(move |(p, _)| p.as_str() != dir)
            .map(|(p, id)| (p.as_str(), *id))
    }

    /// Files below `dir`, with paths relative to it, in path order.
    pub fn files_under(&self, dir: &str) -> Vec<(String, &[u8])> {
        let skip = if dir == "/" { 1 } else { dir.len() + 1 };
        self.under(dir)
            .filter(|(_, id)| self.node(*id).kind() == NodeKind::File)
            .map(|(p, id)| (p[skip..].to_string(), self.node(id).content()))
            .collect()
    }

    /// Removes everything below `dir`, keeping `dir` itself.
    pub fn clear_dir(&mut self, dir: &str) {
        let doomed: Vec<String> = self.under(dir).map(|(p, _)| p.to_string()).collect();
        for p in doomed {
            self.paths.remove(&p);
        }
    }

    /// Writes the tree below `dir` into the host directory `dest`.
    pub fn export(&self, dir: &str, dest: &Path) -> Result<(), FsError> {
        fs::create_dir_all(dest)?;
        let skip = if dir == "/" { 1 } else { dir.len() + 1 };
        for (path, id) in self.under(dir) {
            let target = dest.join(&path[skip..]);
            match self.node(id).kind() {
                NodeKind::Directory => fs::create_dir_all(&target)?,
                NodeKind::File => {
                    if let Some(parent) = target.parent() {
                        fs::create_dir_all(parent)?;
                    }
                    fs::write(&target, self.node(id).content())?;
                }
            }
        }
        Ok(())
    }
}
