//! Guest-visible ABI constants shared by the shim and the kernel.
//!
//! Guests import a single function, `kernel.syscall(no: i32, a0..a5: i64) -> i64`.
//! Buffers are passed as (offset, length) pairs into guest linear memory.
//! Negative return values are `-errno`.

/// Import module name guests must use.
pub const ABI_NAMESPACE: &str = "kernel";
/// The single function imported from [`ABI_NAMESPACE`].
pub const SYSCALL_IMPORT: &str = "syscall";
pub const ENTRY_EXPORT: &str = "_start";
pub const MEMORY_EXPORT: &str = "memory";

pub mod sys {
    /// `read(fd, buf, len) -> n`
    pub const READ: u32 = 0;
    /// `write(fd, buf, len) -> n`
    pub const WRITE: u32 = 1;
    /// `open(path, path_len, flags) -> fd`
    pub const OPEN: u32 = 2;
    /// `close(fd) -> 0`
    pub const CLOSE: u32 = 3;
    /// `stat(path, path_len, out) -> 0`; writes a 16-byte [`super::StatRecord`].
    pub const STAT: u32 = 4;
    /// `lseek(fd, offset, whence) -> position`
    pub const LSEEK: u32 = 8;
    /// `writev(fd, iov, iovcnt) -> n`; iov entries are (ptr: u32, len: u32).
    pub const WRITEV: u32 = 20;
    /// `pipe(out) -> 0`; writes (read fd: i32, write fd: i32).
    pub const PIPE: u32 = 22;
    /// `spawn(path, path_len, argv, argv_len, stdio) -> pid`; argv is a
    /// NUL-separated blob, stdio is packed by [`super::pack_stdio`].
    pub const SPAWN: u32 = 59;
    /// `exit(code)`, never returns.
    pub const EXIT: u32 = 60;
    /// `waitpid(pid) -> exit code`
    pub const WAITPID: u32 = 61;
    /// `args_sizes_get(out) -> 0`; writes (argc: u32, blob_len: u32).
    pub const ARGS_SIZES_GET: u32 = 200;
    /// `args_get(buf, len) -> blob_len`; writes the NUL-terminated arguments.
    pub const ARGS_GET: u32 = 201;

    pub fn name(no: u32) -> &'static str {
        match no {
            READ => "read",
            WRITE => "write",
            OPEN => "open",
            CLOSE => "close",
            STAT => "stat",
            LSEEK => "lseek",
            WRITEV => "writev",
            PIPE => "pipe",
            SPAWN => "spawn",
            EXIT => "exit",
            WAITPID => "waitpid",
            ARGS_SIZES_GET => "args_sizes_get",
            ARGS_GET => "args_get",
            _ => "unknown",
        }
    }
}

pub mod errno {
    pub const ENOENT: u32 = 2;
    pub const EBADF: u32 = 8;
    /// Only used between shim and kernel for continuation chunks that would
    /// block; never surfaced to guests.
    pub const EAGAIN: u32 = 11;
    pub const EFAULT: u32 = 14;
    pub const EINVAL: u32 = 22;
    pub const EPIPE: u32 = 32;
    pub const ENOSYS: u32 = 38;
}

pub mod flags {
    pub const O_RDONLY: i64 = 0;
    pub const O_WRONLY: i64 = 1;
    pub const O_RDWR: i64 = 2;
    pub const O_ACCMODE: i64 = 3;
    pub const O_CREAT: i64 = 0x40;
    pub const O_TRUNC: i64 = 0x200;
    pub const O_APPEND: i64 = 0x400;
    pub const KNOWN: i64 = O_ACCMODE | O_CREAT | O_TRUNC | O_APPEND;

    pub const SEEK_SET: i64 = 0;
    pub const SEEK_CUR: i64 = 1;
    pub const SEEK_END: i64 = 2;

    /// Kernel-side read flag set by the shim on continuation chunks: return
    /// `EAGAIN` instead of parking.
    pub const READ_NONBLOCK: i64 = 1;
}

/// Marker in a packed stdio slot meaning "same descriptor number as the parent".
pub const STDIO_INHERIT: u16 = 0xffff;

/// Packs child stdin/stdout/stderr descriptors into one argument.
pub fn pack_stdio(stdin: Option<u16>, stdout: Option<u16>, stderr: Option<u16>) -> i64 {
    let slot = |fd: Option<u16>| fd.unwrap_or(STDIO_INHERIT) as i64;
    slot(stdin) | (slot(stdout) << 16) | (slot(stderr) << 32)
}

/// Inverse of [`pack_stdio`]; `None` means inherit.
pub fn unpack_stdio(packed: i64) -> [Option<u16>; 3] {
    let slot = |shift: u32| {
        let v = ((packed >> shift) & 0xffff) as u16;
        (v != STDIO_INHERIT).then_some(v)
    };
    [slot(0), slot(16), slot(32)]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum NodeKind {
    File = 1,
    Directory = 2,
}

/// Result of `stat`: kind (u32), 4 bytes padding, size (u64).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StatRecord {
    pub kind: NodeKind,
    pub size: u64,
}

impl StatRecord {
    pub const SIZE: usize = 16;

    pub fn to_bytes(&self) -> [u8; Self::SIZE] {
        let mut out = [0u8; Self::SIZE];
        out[0..4].copy_from_slice(&(self.kind as u32).to_le_bytes());
        out[8..16].copy_from_slice(&self.size.to_le_bytes());
        out
    }

    pub fn from_bytes(b: &[u8]) -> Option<Self> {
        let kind = match u32::from_le_bytes(b.get(0..4)?.try_into().ok()?) {
            1 => NodeKind::File,
            2 => NodeKind::Directory,
            _ => return None,
        };
        let size = u64::from_le_bytes(b.get(8..16)?.try_into().ok()?);
        Some(StatRecord { kind, size })
    }
}

/// Splits a NUL-separated argument blob.
pub fn split_argv(blob: &[u8]) -> Vec<String> {
    blob.split(|&b| b == 0)
        .filter(|s| !s.is_empty())
        .map(|s| String::from_utf8_lossy(s).into_owned())
        .collect()
}

/// Joins arguments into a blob with a NUL after each one.
pub fn join_argv(argv: &[String]) -> Vec<u8> {
    let mut out = Vec::new();
    for a in argv {
        out.extend_from_slice(a.as_bytes());
        out.push(0);
    }
    out
}
