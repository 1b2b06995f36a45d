use std::collections::BTreeMap;

use super::{FaultInfo, Flags, Register, NUM_REGISTERS};

/// Sparse byte-addressable memory. Absent addresses read as 0; writes are
/// stored as-is (a stored 0 is kept, not pruned).
///
/// Equality is extensional: a stored 0 compares equal to an absent key, so
/// two memories are equal iff every address reads the same byte.
#[derive(Debug, Clone, Default)]
pub struct Memory {
    bytes: BTreeMap<u32, u8>,
}

impl Memory {
    pub fn new() -> Memory {
        Memory::default()
    }

    pub fn read8(&self, addr: u32) -> u8 {
        self.bytes.get(&addr).copied().unwrap_or(0)
    }

    pub fn write8(&mut self, addr: u32, byte: u8) {
        self.bytes.insert(addr, byte);
    }

    /// Stores a byte slice starting at `base`; addresses wrap mod 2^32.
    pub fn store(&mut self, base: u32, data: &[u8]) {
        for (k, b) in data.iter().enumerate() {
            self.write8(base.wrapping_add(k as u32), *b);
        }
    }

    pub fn read32_le(&self, addr: u32) -> u32 {
        let mut v = 0u32;
        for k in 0..4 {
            v |= (self.read8(addr.wrapping_add(k)) as u32) << (8 * k);
        }
        v
    }

    pub fn write32_le(&mut self, addr: u32, val: u32) {
        self.store(addr, &val.to_le_bytes());
    }

    pub fn write64_le(&mut self, addr: u32, val: u64) {
        self.store(addr, &val.to_le_bytes());
    }

    pub fn read64_le(&self, addr: u32) -> u64 {
        let mut v = 0u64;
        for k in 0..8 {
            v |= (self.read8(addr.wrapping_add(k)) as u64) << (8 * k);
        }
        v
    }

    /// Iterates stored entries (including explicit zeros) in address order.
    pub fn entries(&self) -> impl Iterator<Item = (u32, u8)> + '_ {
        self.bytes.iter().map(|(a, b)| (*a, *b))
    }

    /// Addresses where `self` reads differently from `baseline`, with the
    /// value read from `self` (explicit zeros included). This is the write
    /// set of whatever ran between the two snapshots, by value.
    pub fn delta_from(&self, baseline: &Memory) -> BTreeMap<u32, u8> {
        let mut delta = BTreeMap::new();
        for (&addr, &b) in &self.bytes {
            if baseline.read8(addr) != b {
                delta.insert(addr, b);
            }
        }
        for (&addr, &b) in &baseline.bytes {
            if b != self.read8(addr) {
                delta.insert(addr, self.read8(addr));
            }
        }
        delta
    }

    /// First address (in address order) where the two memories disagree.
    pub fn first_difference(&self, other: &Memory) -> Option<(u32, u8, u8)> {
        let mut keys: Vec<u32> = self.bytes.keys().copied().collect();
        keys.extend(other.bytes.keys().copied());
        keys.sort_unstable();
        keys.dedup();
        for addr in keys {
            let (a, b) = (self.read8(addr), other.read8(addr));
            if a != b {
                return Some((addr, a, b));
            }
        }
        None
    }
}

impl PartialEq for Memory {
    fn eq(&self, other: &Memory) -> bool {
        self.first_difference(other).is_none()
    }
}

impl Eq for Memory {}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Status {
    Running,
    Halted,
    Faulted(FaultInfo),
}

/// Complete processor + memory snapshot. Plain value: copy freely, no
/// interior mutability.
#[derive(Debug, Clone, PartialEq)]
pub struct MachineState {
    pub eip: u32,
    pub gpr: [u32; NUM_REGISTERS],
    pub flags: Flags,
    pub cr3: u32,
    /// Paging applies only while this is set; supervisor-mode accesses are
    /// physical.
    pub guest_mode: bool,
    /// Mode-switch scratch (ESP/EIP preservation slots). No instruction in
    /// the modeled set touches these; they are plumbed for harness use.
    pub shadow: [u32; 4],
    pub memory: Memory,
    pub status: Status,
}

impl MachineState {
    pub fn new() -> MachineState {
        MachineState {
            eip: 0,
            gpr: [0; NUM_REGISTERS],
            flags: Flags::default(),
            cr3: 0,
            guest_mode: false,
            shadow: [0; 4],
            memory: Memory::new(),
            status: Status::Running,
        }
    }

    pub fn reg(&self, r: Register) -> u32 {
        self.gpr[r as usize]
    }

    pub fn set_reg(&mut self, r: Register, val: u32) {
        self.gpr[r as usize] = val;
    }
}

impl Default for MachineState {
    fn default() -> MachineState {
        MachineState::new()
    }
}

/// A named byte region for initial-state construction. `data` may be
/// shorter than `len`; the tail is reserved (reads as zero) but still
/// participates in overlap checking.
#[derive(Debug, Clone)]
pub struct Region {
    pub name: String,
    pub base: u32,
    pub len: u32,
    pub data: Vec<u8>,
}

impl Region {
    pub fn reserved(name: &str, base: u32, len: u32) -> Region {
        Region { name: name.to_string(), base, len, data: Vec::new() }
    }

    pub fn with_data(name: &str, base: u32, data: Vec<u8>) -> Region {
        Region { name: name.to_string(), base, len: data.len() as u32, data }
    }
}

#[derive(Debug, Clone, Default)]
pub struct MemoryLayout {
    pub regions: Vec<Region>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum LayoutError {
    #[error("region {name} does not fit in the 32-bit address space")]
    OutOfRange { name: String },
    #[error("region {name} holds more data than its declared length")]
    DataExceedsLen { name: String },
    #[error("regions {a} and {b} overlap")]
    Overlap { a: String, b: String },
}

/// Builds a Running state with all registers zero and memory populated
/// from the layout. Regions must be disjoint and within 32 bits.
pub fn make_initial_state(layout: &MemoryLayout) -> Result<MachineState, LayoutError> {
    for r in &layout.regions {
        if r.base as u64 + r.len as u64 > 1 << 32 {
            return Err(LayoutError::OutOfRange { name: r.name.clone() });
        }
        if r.data.len() as u64 > r.len as u64 {
            return Err(LayoutError::DataExceedsLen { name: r.name.clone() });
        }
    }
    for (i, a) in layout.regions.iter().enumerate() {
        for b in &layout.regions[i + 1..] {
            let (a0, a1) = (a.base as u64, a.base as u64 + a.len as u64);
            let (b0, b1) = (b.base as u64, b.base as u64 + b.len as u64);
            if a0 < b1 && b0 < a1 && a.len > 0 && b.len > 0 {
                return Err(LayoutError::Overlap { a: a.name.clone(), b: b.name.clone() });
            }
        }
    }
    let mut s = MachineState::new();
    for r in &layout.regions {
        s.memory.store(r.base, &r.data);
    }
    Ok(s)
}
