//! PAE-style two-level address translation with 2MiB pages.
//!
//! A 32-bit virtual address splits into a 4-entry PDPT index (bits 31:30),
//! a 512-entry PDT index (bits 29:21) and a 21-bit page offset. Table
//! walks read physical memory: the nested tables map guest-physical to
//! system-physical, so the walk must not recurse through itself.

use crate::isa::MachineState;

pub const PAGE_PRESENT: u64 = 1 << 0;
/// 2MiB page size; every PDT entry maps one page of this size.
pub const PAGE_SIZE_2M: u32 = 1 << 21;
/// PDPT entries hold a 4KiB-aligned PDT base in bits 31:12.
pub const PDPT_BASE_MASK: u64 = 0xFFFF_F000;
/// PDT entries map a 2MiB-aligned page via bits 31:21.
pub const PDT_PAGE_MASK: u64 = 0xFFE0_0000;

/// One 64-bit paging entry. Only the present bit is honored; the other
/// flag bits are stored and ignored.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PagingEntry(pub u64);

impl PagingEntry {
    pub fn present(self) -> bool {
        self.0 & PAGE_PRESENT != 0
    }

    /// PDT base address for a PDPT entry (bits 31:12).
    pub fn pdpt_base(self) -> u32 {
        (self.0 & PDPT_BASE_MASK) as u32
    }

    /// Mapped 2MiB page base for a PDT entry (bits 31:21).
    pub fn pdt_page_base(self) -> u32 {
        (self.0 & PDT_PAGE_MASK) as u32
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PageFaultInfo {
    /// The virtual address whose translation failed.
    pub addr: u32,
    /// 1 = PDPT entry not present, 2 = PDT entry not present.
    pub level: u8,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslationOutcome {
    Physical(u32),
    PageFault(PageFaultInfo),
}

impl TranslationOutcome {
    pub fn physical(self) -> Option<u32> {
        match self {
            TranslationOutcome::Physical(pa) => Some(pa),
            TranslationOutcome::PageFault(_) => None,
        }
    }
}

/// Splits a virtual address into (PDPT index, PDT index, page offset).
/// Recomposition `(i << 30) | (j << 21) | off` is the identity.
pub fn split_virtual(addr: u32) -> (u32, u32, u32) {
    (addr >> 30, (addr >> 21) & 0x1FF, addr & 0x1F_FFFF)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("64-bit entry read at {addr:#010x} would wrap the address space")]
pub struct EntryReadWrap {
    pub addr: u32,
}

/// Little-endian 64-bit read of 8 physical bytes. No translation applied.
pub fn read_entry64(s: &MachineState, addr: u32) -> Result<u64, EntryReadWrap> {
    if addr > u32::MAX - 7 {
        return Err(EntryReadWrap { addr });
    }
    Ok(s.memory.read64_le(addr))
}

/// Translates one virtual address. Supervisor mode is the identity map;
/// guest mode walks CR3 → PDPT entry → PDT entry → 2MiB page.
pub fn va_to_pa(addr: u32, s: &MachineState) -> TranslationOutcome {
    if !s.guest_mode {
        return TranslationOutcome::Physical(addr);
    }
    let (i, j, off) = split_virtual(addr);
    // masked bases keep both entry reads at most 0xFFFFFFF8, so the
    // 8-byte reads cannot wrap
    let pdpte_addr = (s.cr3 & PDPT_BASE_MASK as u32) + 8 * i;
    let pdpte = PagingEntry(read_entry64(s, pdpte_addr).expect("masked PDPT walk cannot wrap"));
    if !pdpte.present() {
        return TranslationOutcome::PageFault(PageFaultInfo { addr, level: 1 });
    }
    let pdte_addr = pdpte.pdpt_base() + 8 * j;
    let pdte = PagingEntry(read_entry64(s, pdte_addr).expect("masked PDT walk cannot wrap"));
    if !pdte.present() {
        return TranslationOutcome::PageFault(PageFaultInfo { addr, level: 2 });
    }
    TranslationOutcome::Physical(pdte.pdt_page_base() | off)
}

/// Translates a `len`-byte access starting at `base` (virtual addresses
/// wrap mod 2^32) one byte at a time; the first faulting byte aborts the
/// whole access.
pub fn translate_mem_access(
    s: &MachineState,
    base: u32,
    len: u32,
) -> Result<Vec<u32>, PageFaultInfo> {
    let mut out = Vec::with_capacity(len as usize);
    for k in 0..len {
        match va_to_pa(base.wrapping_add(k), s) {
            TranslationOutcome::Physical(pa) => out.push(pa),
            TranslationOutcome::PageFault(pf) => return Err(pf),
        }
    }
    Ok(out)
}
