//! Reference predictions of what each setup routine writes.
//!
//! Each oracle returns the exact byte-level delta the routine is meant
//! to leave in the table regions, computed directly from the parameter
//! set rather than by running anything. Differential tests compare
//! simulator runs against these; the verifier composes them into full
//! expected end states.

use std::collections::BTreeMap;

use crate::isa::Memory;
use crate::minvisor::params::NptParams;

pub type MemoryDelta = BTreeMap<u32, u8>;

/// Per-entry flag bits: present | rw | user | accessed | dirty | 2MiB.
pub const PDT_ENTRY_FLAGS: u64 = 1 | 2 | 4 | 32 | 64 | 128;

pub fn put_u64_le(d: &mut MemoryDelta, addr: u32, v: u64) {
    for (k, b) in v.to_le_bytes().into_iter().enumerate() {
        d.insert(addr + k as u32, b);
    }
}

pub fn apply_delta(mem: &mut Memory, d: &MemoryDelta) {
    for (&a, &b) in d {
        mem.write8(a, b);
    }
}

/// The four pointer-table entries: pdt_bases[i] | present, high word 0.
pub fn oracle_init_pdpt(p: &NptParams) -> MemoryDelta {
    let mut d = MemoryDelta::new();
    for (i, &b) in p.pdt_bases.iter().enumerate() {
        put_u64_le(&mut d, p.pdpt_base + 8 * i as u32, b as u64 | 1);
    }
    d
}

/// All 2048 directory entries: entry (t, j) maps the 2MiB page number
/// t*512 + j onto itself with the standard flags.
pub fn oracle_init_pdts(p: &NptParams) -> MemoryDelta {
    let mut d = MemoryDelta::new();
    for (t, &b) in p.pdt_bases.iter().enumerate() {
        for j in 0..512u32 {
            let page = (t as u64 * 512 + j as u64) << 21;
            put_u64_le(&mut d, b + 8 * j, page | PDT_ENTRY_FLAGS);
        }
    }
    d
}

/// Zeroed directory entries covering the protected range. The entry's
/// table is recovered from the pointer-table snapshot the routine would
/// actually read, which is why this oracle takes a memory view instead
/// of trusting the parameter block.
pub fn oracle_sec_not_present(p: &NptParams, view: &Memory) -> MemoryDelta {
    let mut d = MemoryDelta::new();
    let j = p.visor_start >> 30;
    let entry = view.read64_le(p.pdpt_base + 8 * j);
    let pdt = (entry & 0xffff_ffff_ffff_f000) as u32;
    let start = (p.visor_start & 0x3fe0_0000) >> 21;
    let end = (p.visor_start.wrapping_add(p.visor_size) & 0x3fe0_0000) >> 21;
    for i in start..end {
        put_u64_le(&mut d, pdt + 8 * i, 0);
    }
    d
}

/// The composition, in call order, with later writes winning.
pub fn oracle_create_nested_pt(p: &NptParams) -> MemoryDelta {
    let d1 = oracle_init_pdpt(p);
    let d2 = oracle_init_pdts(p);
    let mut view = Memory::new();
    apply_delta(&mut view, &d1);
    let d3 = oracle_sec_not_present(p, &view);
    let mut out = d1;
    out.extend(d2);
    out.extend(d3);
    out
}
