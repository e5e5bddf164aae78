//! Open-object table.
//!
//! Descriptors hold an [`ObjectRef`], an index plus the generation of the
//! slot at the time the object was created. When the last reference is
//! released the slot's generation is bumped, so a stale reference can never
//! reach whatever object reuses the slot.

use super::vfs::NodeId;

pub type PipeId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ObjectRef {
    index: u32,
    generation: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Object {
    File {
        node: NodeId,
        pos: u64,
        readable: bool,
        writable: bool,
        append: bool,
    },
    PipeRead(PipeId),
    PipeWrite(PipeId),
    /// Reads see end-of-file, writes are discarded.
    Null,
}

#[derive(Debug)]
struct Slot {
    generation: u32,
    refs: u32,
    object: Option<Object>,
}

#[derive(Debug, Default)]
pub struct ObjectTable {
    slots: Vec<Slot>,
    free: Vec<u32>,
}

impl ObjectTable {
    pub fn insert(&mut self, object: Object) -> ObjectRef {
        let index = match self.free.pop() {
            Some(i) => i,
            None => {
                self.slots.push(Slot {
                    generation: 0,
                    refs: 0,
                    object: None,
                });
                (self.slots.len() - 1) as u32
            }
        };
        let slot = &mut self.slots[index as usize];
        slot.refs = 1;
        slot.object = Some(object);
        ObjectRef {
            index,
            generation: slot.generation,
        }
    }

    fn slot(&self, r: ObjectRef) -> Option<&Slot> {
        self.slots
            .get(r.index as usize)
            .filter(|s| s.generation == r.generation && s.object.is_some())
    }

    pub fn get(&self, r: ObjectRef) -> Option<&Object> {
        self.slot(r).and_then(|s| s.object.as_ref())
    }

    pub fn get_mut(&mut self, r: ObjectRef) -> Option<&mut Object> {
        self.slots
            .get_mut(r.index as usize)
            .filter(|s| s.generation == r.generation)
            .and_then(|s| s.object.as_mut())
    }

    /// Adds a reference (a descriptor copied into another process).
    pub fn retain(&mut self, r: ObjectRef) -> bool {
        match self.slots.get_mut(r.index as usize) {
            Some(s) if s.generation == r.generation && s.object.is_some() => {
                s.refs += 1;
                true
            }
            _ => false,
        }
    }

    /// Drops a reference. Returns the object when this was the last one.
    pub fn release(&mut self, r: ObjectRef) -> Option<Object> {
        let slot = self
            .slots
            .get_mut(r.index as usize)
            .filter(|s| s.generation == r.generation && s.object.is_some())?;
        slot.refs -= 1;
        if slot.refs > 0 {
            return None;
        }
        slot.generation = slot.generation.wrapping_add(1);
        self.free.push(r.index);
        slot.object.take()
    }

    pub fn live(&self) -> usize {
        self.slots.iter().filter(|s| s.object.is_some()).count()
    }
}
