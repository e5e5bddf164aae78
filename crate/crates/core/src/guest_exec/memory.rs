use thiserror::Error;

pub const WASM_PAGE_SIZE: usize = 65_536;

#[derive(Debug, Error, Clone, Copy, PartialEq, Eq)]
#[error("guest access at {offset}+{len} exceeds linear memory of {size} bytes")]
pub struct OutOfBounds {
    pub offset: u64,
    pub len: u64,
    pub size: u64,
}

/// A guest's linear memory. Host access is all-or-nothing: an access that
/// does not fit entirely fails without touching any byte.
#[derive(Debug, Clone)]
pub struct GuestMemory {
    bytes: Vec<u8>,
}

impl GuestMemory {
    pub fn new(pages: usize) -> Self {
        GuestMemory {
            bytes: vec![0; pages * WASM_PAGE_SIZE],
        }
    }

    pub fn size(&self) -> usize {
        self.bytes.len()
    }

    pub fn pages(&self) -> usize {
        self.bytes.len() / WASM_PAGE_SIZE
    }

    fn range(&self, offset: u64, len: u64) -> Result<std::ops::Range<usize>, OutOfBounds> {
        let oob = OutOfBounds {
            offset,
            len,
            size: self.bytes.len() as u64,
        };
        let end = offset.checked_add(len).ok_or(oob)?;
        if end > self.bytes.len() as u64 {
            return Err(oob);
        }
        Ok(offset as usize..end as usize)
    }

    pub fn check(&self, offset: u64, len: u64) -> Result<(), OutOfBounds> {
        self.range(offset, len).map(|_| ())
    }

    pub fn read(&self, offset: u64, len: u64) -> Result<&[u8], OutOfBounds> {
        let r = self.range(offset, len)?;
        Ok(&self.bytes[r])
    }

    pub fn write(&mut self, offset: u64, data: &[u8]) -> Result<(), OutOfBounds> {
        let r = self.range(offset, data.len() as u64)?;
        self.bytes[r].copy_from_slice(data);
        Ok(())
    }

    pub fn slice_mut(&mut self, offset: u64, len: u64) -> Result<&mut [u8], OutOfBounds> {
        let r = self.range(offset, len)?;
        Ok(&mut self.bytes[r])
    }

    pub fn read_u32(&self, offset: u64) -> Result<u32, OutOfBounds> {
        let b = self.read(offset, 4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")))
    }

    pub(crate) fn bytes(&self) -> &[u8] {
        &self.bytes
    }

    pub(crate) fn bytes_mut(&mut self) -> &mut [u8] {
        &mut self.bytes
    }
}
