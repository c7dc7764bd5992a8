use std::collections::HashMap;

use crate::comm::Communicator;
use crate::request::Request;

/// Opaque legacy handle. One type names both communicators and requests;
/// the registry knows which is which.
#[repr(transparent)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LegacyHandle(pub u32);

impl LegacyHandle {
    pub const NULL: LegacyHandle = LegacyHandle(0);

    pub fn is_null(self) -> bool {
        self == Self::NULL
    }
}

/// The world communicator's handle, valid from init to finalize.
pub const LEGACY_COMM_WORLD: LegacyHandle = LegacyHandle(1);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HandleKind {
    Comm,
    Request,
}

pub(crate) enum Entry {
    Comm(Communicator),
    Request(Request<'static>),
}

impl Entry {
    fn kind(&self) -> HandleKind {
        match self {
            Entry::Comm(_) => HandleKind::Comm,
            Entry::Request(_) => HandleKind::Request,
        }
    }
}

/// Per-rank handle table. Slots are never reused.
pub(crate) struct Registry {
    next: u32,
    slots: HashMap<u32, Entry>,
}

impl Default for Registry {
    fn default() -> Self {
        Registry {
            next: LEGACY_COMM_WORLD.0 + 1,
            slots: HashMap::new(),
        }
    }
}

impl Registry {
    pub(crate) fn register_world(&mut self, world: Communicator) {
        self.slots.insert(LEGACY_COMM_WORLD.0, Entry::Comm(world));
    }

    pub(crate) fn insert(&mut self, entry: Entry) -> LegacyHandle {
        let slot = self.next;
        self.next = self.next.checked_add(1).expect("legacy handle space exhausted");
        self.slots.insert(slot, entry);
        LegacyHandle(slot)
    }

    pub(crate) fn kind(&self, h: LegacyHandle) -> Option<HandleKind> {
        self.slots.get(&h.0).map(Entry::kind)
    }

    pub(crate) fn comm(&self, h: LegacyHandle) -> Option<Communicator> {
        match self.slots.get(&h.0) {
            Some(Entry::Comm(c)) => Some(c.share()),
            _ => None,
        }
    }

    pub(crate) fn find_comm(&self, comm: &Communicator) -> Option<LegacyHandle> {
        self.slots.iter().find_map(|(&slot, e)| match e {
            Entry::Comm(c) if c.same_as(comm) => Some(LegacyHandle(slot)),
            _ => None,
        })
    }

    pub(crate) fn remove(&mut self, h: LegacyHandle) -> Option<Entry> {
        self.slots.remove(&h.0)
    }

    pub(crate) fn len(&self) -> usize {
        self.slots.len()
    }
}
