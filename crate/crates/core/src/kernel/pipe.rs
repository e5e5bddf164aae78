use std::collections::VecDeque;

/// Bytes a pipe buffers before writers have to wait.
pub const PIPE_CAPACITY: usize = 64 * 1024;

#[derive(Debug)]
pub struct Pipe {
    buf: VecDeque<u8>,
    capacity: usize,
    pub(crate) readers: u32,
    pub(crate) writers: u32,
}

impl Default for Pipe {
    fn default() -> Self {
        Pipe::with_capacity(PIPE_CAPACITY)
    }
}

impl Pipe {
    pub fn with_capacity(capacity: usize) -> Self {
        Pipe {
            buf: VecDeque::with_capacity(capacity),
            capacity,
            readers: 1,
            writers: 1,
        }
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn space(&self) -> usize {
        self.capacity - self.buf.len()
    }

    pub fn readers(&self) -> u32 {
        self.readers
    }

    pub fn writers(&self) -> u32 {
        self.writers
    }

    /// True when a read would return end-of-file.
    pub fn at_eof(&self) -> bool {
        self.buf.is_empty() && self.writers == 0
    }

    /// Accepts as much of `data` as fits; returns the count taken.
    pub fn write(&mut self, data: &[u8]) -> usize {
        let n = data.len().min(self.space());
        self.buf.extend(&data[..n]);
        n
    }

    /// Removes up to `max` bytes, oldest first, into `out`.
    pub fn read_into(&mut self, out: &mut [u8]) -> usize {
        let n = out.len().min(self.buf.len());
        for (dst, src) in out.iter_mut().zip(self.buf.drain(..n)) {
            *dst = src;
        }
        n
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_and_bounds() {
        let mut p = Pipe::with_capacity(4);
        assert_eq!(p.write(b"xyz"), 3);
        assert_eq!(p.write(b"abc"), 1);
        let mut out = [0u8; 8];
        assert_eq!(p.read_into(&mut out[..2]), 2);
        assert_eq!(&out[..2], b"xy");
        assert_eq!(p.read_into(&mut out), 2);
        assert_eq!(&out[..2], b"za");
        assert!(!p.at_eof());
        p.writers = 0;
        assert!(p.at_eof());
    }
}
