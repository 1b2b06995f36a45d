//! Cutpoint specifications for the four setup routines.
//!
//! Each builder pins the routine's loop-head assertions and a closed
//! form for its complete exit state: oracle-predicted table writes,
//! the dead frame bytes left below the entry ESP, final register and
//! flag values, and the sentinel EIP. The closed forms come from the
//! calling convention and the routines' frame layouts, never from
//! running the code under test.

use std::collections::BTreeSet;

use crate::isa::{
    alu_exec, decode_with, AluOp, Flags, Instruction, MachineState, Memory, Register, Status,
};
use crate::minvisor::{
    apply_delta, oracle_create_nested_pt, oracle_init_pdpt, oracle_init_pdts,
    oracle_sec_not_present, setup_call, CallSetup, HarnessError, NptParams, SetupFn,
    PDT_ENTRY_FLAGS,
};
use super::CutpointSpec;

fn ck(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn m32(s: &MachineState, a: u32) -> u32 {
    s.memory.read32_le(a)
}

fn m64(s: &MachineState, a: u32) -> u64 {
    s.memory.read64_le(a)
}

fn w32(m: &mut Memory, a: u32, v: u32) {
    m.write32_le(a, v);
}

fn pdt_entry(t: u32, j: u32) -> u64 {
    ((t as u64 * 512 + j as u64) << 21) | PDT_ENTRY_FLAGS
}

/// Shared context captured by the spec closures.
#[derive(Clone)]
struct Ctx {
    p: NptParams,
    entry: u32,
    sentinel: u32,
    /// ESP at entry, pointing at the sentinel return address.
    e: u32,
    /// Image bytes including the sentinel halt.
    code: Vec<u8>,
    /// First-to-last argument values as laid out at [e+4], [e+8], ...
    args: Vec<u32>,
}

impl Ctx {
    fn new(p: &NptParams, setup: &CallSetup, args: Vec<u32>) -> Ctx {
        Ctx {
            p: *p,
            entry: setup.image.base,
            sentinel: setup.sentinel,
            e: setup.entry_esp,
            code: setup.image.bytes.clone(),
            args,
        }
    }

    fn code_intact(&self, s: &MachineState) -> Result<(), String> {
        for (k, &b) in self.code.iter().enumerate() {
            let a = self.entry + k as u32;
            ck(s.memory.read8(a) == b, || {
                format!("code byte at {a:#010x} changed")
            })?;
        }
        Ok(())
    }

    fn args_in_place(&self, s: &MachineState) -> Result<(), String> {
        ck(m32(s, self.e) == self.sentinel, || {
            "return slot no longer holds the sentinel".into()
        })?;
        for (k, &v) in self.args.iter().enumerate() {
            let a = self.e + 4 * (k as u32 + 1);
            ck(m32(s, a) == v, || {
                format!("argument slot [{a:#010x}] changed")
            })?;
        }
        Ok(())
    }

    fn array_in_place(&self, s: &MachineState) -> Result<(), String> {
        for (t, &b) in self.p.pdt_bases.iter().enumerate() {
            ck(m32(s, self.p.pdt_array_base + 4 * t as u32) == b, || {
                format!("pdt pointer array entry {t} changed")
            })?;
        }
        Ok(())
    }

    /// Facts that hold at the entry state itself.
    fn entry_facts(&self, s: &MachineState) -> Result<(), String> {
        ck(s.status == Status::Running, || "not running".into())?;
        ck(!s.guest_mode, || "unexpectedly in guest mode".into())?;
        ck(s.eip == self.entry, || "not at the entry point".into())?;
        ck(s.reg(Register::Esp) == self.e, || "ESP not at the call frame".into())?;
        self.args_in_place(s)?;
        self.array_in_place(s)?;
        self.code_intact(s)
    }

    /// Untouched state the routines must preserve at every cutpoint.
    fn inert_state(&self, s0: &MachineState, s: &MachineState) -> Result<(), String> {
        ck(s.status == Status::Running, || "not running".into())?;
        ck(!s.guest_mode, || "unexpectedly in guest mode".into())?;
        ck(s.reg(Register::Edi) == s0.reg(Register::Edi), || "EDI changed".into())?;
        ck(s.cr3 == s0.cr3, || "CR3 changed".into())?;
        ck(s.shadow == s0.shadow, || "shadow registers changed".into())?;
        Ok(())
    }
}

/// Dead bytes left behind by init_pdpt, addressed from its entry ESP
/// `e` (the slot holding its return address). `caller_ebp`, `esi`,
/// `ebx` are the register values at its entry.
fn frame_init_pdpt_writes(m: &mut Memory, e: u32, caller_ebp: u32, esi: u32, ebx: u32) {
    let s = |k: u32| e.wrapping_sub(k);
    w32(m, s(4), caller_ebp);
    w32(m, s(8), esi);
    w32(m, s(12), ebx);
    w32(m, s(16), 4); // i
    w32(m, s(24), 0); // page_present hi
    w32(m, s(28), 1); // page_present lo
}

fn frame_init_pdts_writes(m: &mut Memory, e: u32, caller_ebp: u32, esi: u32, ebx: u32, p: &NptParams) {
    let s = |k: u32| e.wrapping_sub(k);
    w32(m, s(4), caller_ebp);
    w32(m, s(8), esi);
    w32(m, s(12), ebx);
    w32(m, s(16), 0); // page size hi
    w32(m, s(20), 0x20_0000); // page size lo
    w32(m, s(24), 0); // flags hi
    w32(m, s(28), 231); // flags lo
    w32(m, s(32), 512); // j
    w32(m, s(36), 4); // i
    w32(m, s(40), p.pdt_bases[3]); // pdt
    w32(m, s(48), 1); // addr hi: 4GiB accumulated
    w32(m, s(52), 0); // addr lo
}

fn frame_sec_writes(m: &mut Memory, e: u32, caller_ebp: u32, esi: u32, ebx: u32, pdpte: u64, p: &NptParams) {
    let s = |k: u32| e.wrapping_sub(k);
    let pdt = (pdpte & 0xffff_ffff_ffff_f000) as u32;
    let start = (p.visor_start & 0x3fe0_0000) >> 21;
    let end = (p.visor_start.wrapping_add(p.visor_size) & 0x3fe0_0000) >> 21;
    w32(m, s(4), caller_ebp);
    w32(m, s(8), esi);
    w32(m, s(12), ebx);
    w32(m, s(20), p.visor_start >> 30); // j
    w32(m, s(24), start.max(end)); // i after the loop
    w32(m, s(28), end);
    w32(m, s(32), start);
    w32(m, s(36), pdt);
    w32(m, s(40), pdt); // low word of the masked entry
    w32(m, s(48), (pdpte >> 32) as u32); // masked entry hi
    w32(m, s(52), pdt); // masked entry lo
    w32(m, s(56), (pdpte >> 32) as u32); // raw entry hi
    w32(m, s(60), pdpte as u32); // raw entry lo
    w32(m, s(64), 0xffff_ffff); // mask hi
    w32(m, s(68), 0xffff_f000); // mask lo
}

fn finish(
    m: &mut MachineState,
    sentinel: u32,
    esp: u32,
    flags: Flags,
    regs: &[(Register, u32)],
) {
    for &(r, v) in regs {
        m.set_reg(r, v);
    }
    m.set_reg(Register::Esp, esp);
    m.flags = flags;
    m.eip = sentinel;
    m.status = Status::Running;
}

fn epilogue_flags(restore: u32, esp_before: u32) -> Flags {
    alu_exec(AluOp::Add, restore, esp_before, Flags::default()).1
}

pub fn spec_for(f: SetupFn, p: &NptParams) -> Result<(CutpointSpec, CallSetup), HarnessError> {
    let setup = setup_call(f, p)?;
    let spec = spec_from_setup(f, p, &setup);
    Ok((spec, setup))
}

/// Builds the spec against an already-prepared call, so a caller can
/// study a deliberately altered image without the precondition going
/// vacuous on it.
pub fn spec_from_setup(f: SetupFn, p: &NptParams, setup: &CallSetup) -> CutpointSpec {
    match f {
        SetupFn::InitPdpt => spec_init_pdpt(p, setup),
        SetupFn::InitPdts => spec_init_pdts(p, setup),
        SetupFn::SecNotPresent => spec_sec_not_present(p, setup),
        SetupFn::CreateNestedPt => spec_create_nested_pt(p, setup),
    }
}

fn base_spec(name: &str, cx: &Ctx) -> CutpointSpec {
    let in_main = {
        let (entry, sentinel) = (cx.entry, cx.sentinel);
        Box::new(move |s: &MachineState| s.eip >= entry && s.eip < sentinel)
    };
    let exit = {
        let sentinel = cx.sentinel;
        Box::new(move |s: &MachineState| s.eip == sentinel && s.status == Status::Running)
    };
    let precondition = {
        let cx = cx.clone();
        Box::new(move |s: &MachineState| cx.entry_facts(s).is_ok())
    };
    CutpointSpec {
        name: name.to_string(),
        cutpoint_eips: BTreeSet::new(),
        precondition,
        in_main,
        exit,
        assertion: Box::new(|_, _| Err("assertion not installed".into())),
        modify: Box::new(|s| s.clone()),
        sample: Box::new(|_, _| true),
        allowed_write: Box::new(|_, _| false),
        segment_bound: 64,
        total_bound: 10_000,
    }
}

fn stack_window(p: &NptParams, a: u32, low: u32) -> bool {
    a >= low && a < p.stack_top
}

fn spec_init_pdpt(p: &NptParams, setup: &CallSetup) -> CutpointSpec {
    let cx = Ctx::new(p, setup, vec![p.pdpt_base, p.pdt_array_base]);
    let l2 = setup.image.symbol("L2").expect("L2 label");
    let ebp1 = cx.e.wrapping_sub(4);
    let mut spec = base_spec("init_pdpt", &cx);
    spec.cutpoint_eips = BTreeSet::from([l2]);
    spec.segment_bound = 64;
    spec.total_bound = 2_000;

    spec.assertion = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState, s: &MachineState| {
            if s.eip == cx.entry {
                return cx.entry_facts(s);
            }
            if s.eip != l2 {
                return Err(format!("assertion reached unexpected eip {:#010x}", s.eip));
            }
            cx.inert_state(s0, s)?;
            ck(s.reg(Register::Ebp) == ebp1, || "EBP off frame".into())?;
            ck(s.reg(Register::Esp) == ebp1.wrapping_sub(24), || "ESP off frame".into())?;
            ck(m32(s, cx.e.wrapping_sub(4)) == s0.reg(Register::Ebp), || "saved EBP clobbered".into())?;
            ck(m32(s, cx.e.wrapping_sub(8)) == s0.reg(Register::Esi), || "saved ESI clobbered".into())?;
            ck(m32(s, cx.e.wrapping_sub(12)) == s0.reg(Register::Ebx), || "saved EBX clobbered".into())?;
            cx.args_in_place(s)?;
            cx.array_in_place(s)?;
            cx.code_intact(s)?;
            ck(m32(s, ebp1.wrapping_sub(24)) == 1, || "present constant lo".into())?;
            ck(m32(s, ebp1.wrapping_sub(20)) == 0, || "present constant hi".into())?;
            let i = m32(s, ebp1.wrapping_sub(12));
            ck(i <= 4, || format!("loop counter i = {i} out of range"))?;
            for t in 0..4u32 {
                let a = cx.p.pdpt_base + 8 * t;
                let have = m64(s, a);
                if t < i {
                    let want = cx.p.pdt_bases[t as usize] as u64 | 1;
                    ck(have == want, || {
                        format!("pdpt entry {t}: {have:#x}, expected {want:#x}")
                    })?;
                } else {
                    ck(have == m64(s0, a), || {
                        format!("pdpt entry {t} written early")
                    })?;
                }
            }
            Ok(())
        })
    };

    spec.modify = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState| {
            let mut m = s0.clone();
            apply_delta(&mut m.memory, &oracle_init_pdpt(&cx.p));
            let e = s0.reg(Register::Esp);
            frame_init_pdpt_writes(
                &mut m.memory,
                e,
                s0.reg(Register::Ebp),
                s0.reg(Register::Esi),
                s0.reg(Register::Ebx),
            );
            finish(
                &mut m,
                cx.sentinel,
                e.wrapping_add(4),
                epilogue_flags(16, e.wrapping_sub(28)),
                &[
                    (Register::Eax, cx.p.pdt_bases[3] | 1),
                    (Register::Ecx, 1),
                    (Register::Edx, 0),
                    (Register::Imme1, 3),
                    (Register::Valu1, 16),
                ],
            );
            m
        })
    };

    spec.allowed_write = {
        let p = *p;
        Box::new(move |a: u32, low: u32| {
            (a >= p.pdpt_base && a < p.pdpt_base + 32) || stack_window(&p, a, low)
        })
    };
    spec
}

fn spec_init_pdts(p: &NptParams, setup: &CallSetup) -> CutpointSpec {
    let cx = Ctx::new(p, setup, vec![p.pdt_array_base]);
    let l7 = setup.image.symbol("L7").expect("L7 label");
    let l9 = setup.image.symbol("L9").expect("L9 label");
    let ebp1 = cx.e.wrapping_sub(4);
    let mut spec = base_spec("init_pdts", &cx);
    spec.cutpoint_eips = BTreeSet::from([l7, l9]);
    spec.segment_bound = 64;
    spec.total_bound = 200_000;

    let tables_complete = {
        let p = *p;
        move |s: &MachineState, upto: u32| -> Result<(), String> {
            for t in 0..upto.min(4) {
                for j in 0..512u32 {
                    let a = p.pdt_bases[t as usize] + 8 * j;
                    let have = m64(s, a);
                    let want = pdt_entry(t, j);
                    ck(have == want, || {
                        format!("table {t} entry {j}: {have:#x}, expected {want:#x}")
                    })?;
                }
            }
            Ok(())
        }
    };

    // Spot checks that the run has not written ahead of its counters:
    // the given entries must still equal the entry state's bytes.
    let untouched = {
        let p = *p;
        move |s0: &MachineState, s: &MachineState, t: u32, entries: &[u32]| -> Result<(), String> {
            for &j in entries {
                if j >= 512 {
                    continue;
                }
                let a = p.pdt_bases[t as usize] + 8 * j;
                ck(m64(s, a) == m64(s0, a), || {
                    format!("table {t} entry {j} written ahead of the loop")
                })?;
            }
            Ok(())
        }
    };

    let frame_common = {
        let cx = cx.clone();
        move |s0: &MachineState, s: &MachineState| -> Result<(), String> {
            cx.inert_state(s0, s)?;
            ck(s.reg(Register::Ebp) == ebp1, || "EBP off frame".into())?;
            ck(s.reg(Register::Esp) == ebp1.wrapping_sub(56), || "ESP off frame".into())?;
            ck(m32(s, cx.e.wrapping_sub(4)) == s0.reg(Register::Ebp), || "saved EBP clobbered".into())?;
            ck(m32(s, cx.e.wrapping_sub(8)) == s0.reg(Register::Esi), || "saved ESI clobbered".into())?;
            ck(m32(s, cx.e.wrapping_sub(12)) == s0.reg(Register::Ebx), || "saved EBX clobbered".into())?;
            cx.args_in_place(s)?;
            cx.array_in_place(s)?;
            cx.code_intact(s)?;
            ck(m32(s, ebp1.wrapping_sub(24)) == 231, || "flags constant lo".into())?;
            ck(m32(s, ebp1.wrapping_sub(20)) == 0, || "flags constant hi".into())?;
            ck(m32(s, ebp1.wrapping_sub(16)) == 0x20_0000, || "page size lo".into())?;
            ck(m32(s, ebp1.wrapping_sub(12)) == 0, || "page size hi".into())?;
            Ok(())
        }
    };

    spec.assertion = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState, s: &MachineState| {
            if s.eip == cx.entry {
                return cx.entry_facts(s);
            }
            if s.eip == l7 {
                frame_common(s0, s)?;
                let i = m32(s, ebp1.wrapping_sub(32));
                ck(i <= 4, || format!("outer counter i = {i} out of range"))?;
                let addr = m64(s, ebp1.wrapping_sub(48));
                ck(addr == (i as u64) << 30, || {
                    format!("addr accumulator {addr:#x}, expected {:#x}", (i as u64) << 30)
                })?;
                tables_complete(s, i)?;
                for t in i..4 {
                    untouched(s0, s, t, &[0, 255, 511])?;
                }
                return Ok(());
            }
            if s.eip == l9 {
                frame_common(s0, s)?;
                let i = m32(s, ebp1.wrapping_sub(32));
                let j = m32(s, ebp1.wrapping_sub(28));
                ck(i <= 3, || format!("outer counter i = {i} out of range"))?;
                ck(j <= 512, || format!("inner counter j = {j} out of range"))?;
                ck(m32(s, ebp1.wrapping_sub(36)) == cx.p.pdt_bases[i as usize], || {
                    "pdt slot does not hold the current table".into()
                })?;
                let addr = m64(s, ebp1.wrapping_sub(48));
                let want = (i as u64 * 512 + j as u64) << 21;
                ck(addr == want, || {
                    format!("addr accumulator {addr:#x}, expected {want:#x}")
                })?;
                tables_complete(s, i)?;
                for jj in 0..j {
                    let a = cx.p.pdt_bases[i as usize] + 8 * jj;
                    let have = m64(s, a);
                    let want = pdt_entry(i, jj);
                    ck(have == want, || {
                        format!("table {i} entry {jj}: {have:#x}, expected {want:#x}")
                    })?;
                }
                untouched(s0, s, i, &[j, j + 1, j.max(511)])?;
                for t in i + 1..4 {
                    untouched(s0, s, t, &[0, 511])?;
                }
                return Ok(());
            }
            Err(format!("assertion reached unexpected eip {:#010x}", s.eip))
        })
    };

    // The inner loop head is hit 2052 times; checking its full prefix
    // invariant each time is quadratic, so visits are sampled: the
    // loop edges always, plus every 37th visit.
    spec.sample = Box::new(move |idx: u64, s: &MachineState| {
        if s.eip != l9 {
            return true;
        }
        let j = m32(s, ebp1.wrapping_sub(28));
        j <= 1 || j >= 511 || idx % 37 == 0
    });

    spec.modify = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState| {
            let mut m = s0.clone();
            apply_delta(&mut m.memory, &oracle_init_pdts(&cx.p));
            let e = s0.reg(Register::Esp);
            frame_init_pdts_writes(
                &mut m.memory,
                e,
                s0.reg(Register::Ebp),
                s0.reg(Register::Esi),
                s0.reg(Register::Ebx),
                &cx.p,
            );
            finish(
                &mut m,
                cx.sentinel,
                e.wrapping_add(4),
                epilogue_flags(48, e.wrapping_sub(60)),
                &[
                    (Register::Eax, 0x20_0000),
                    (Register::Ecx, 231),
                    (Register::Edx, 0),
                    (Register::Imme1, 3),
                    (Register::Valu1, 48),
                ],
            );
            m
        })
    };

    spec.allowed_write = {
        let p = *p;
        Box::new(move |a: u32, low: u32| {
            p.pdt_bases.iter().any(|&b| a >= b && a - b < 4096) || stack_window(&p, a, low)
        })
    };
    spec
}

fn spec_sec_not_present(p: &NptParams, setup: &CallSetup) -> CutpointSpec {
    let cx = Ctx::new(p, setup, vec![p.pdpt_base, p.visor_start, p.visor_size]);
    let l5 = setup.image.symbol("L5").expect("L5 label");
    let ebp1 = cx.e.wrapping_sub(4);
    let start = (p.visor_start & 0x3fe0_0000) >> 21;
    let end = (p.visor_start.wrapping_add(p.visor_size) & 0x3fe0_0000) >> 21;
    // The table under the zeroing loop, resolved the way the routine
    // will: through the pointer entry in the entry state.
    let pdpte0 = setup
        .state
        .memory
        .read64_le(p.pdpt_base + 8 * (p.visor_start >> 30));
    let pdt0 = (pdpte0 & 0xffff_ffff_ffff_f000) as u32;

    let mut spec = base_spec("sec_not_present", &cx);
    spec.cutpoint_eips = BTreeSet::from([l5]);
    spec.segment_bound = 128;
    spec.total_bound = 20_000;

    spec.assertion = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState, s: &MachineState| {
            if s.eip == cx.entry {
                return cx.entry_facts(s);
            }
            if s.eip != l5 {
                return Err(format!("assertion reached unexpected eip {:#010x}", s.eip));
            }
            cx.inert_state(s0, s)?;
            ck(s.reg(Register::Ebp) == ebp1, || "EBP off frame".into())?;
            ck(s.reg(Register::Esp) == ebp1.wrapping_sub(72), || "ESP off frame".into())?;
            ck(m32(s, cx.e.wrapping_sub(4)) == s0.reg(Register::Ebp), || "saved EBP clobbered".into())?;
            ck(m32(s, cx.e.wrapping_sub(8)) == s0.reg(Register::Esi), || "saved ESI clobbered".into())?;
            ck(m32(s, cx.e.wrapping_sub(12)) == s0.reg(Register::Ebx), || "saved EBX clobbered".into())?;
            cx.args_in_place(s)?;
            cx.code_intact(s)?;
            let jj = cx.p.visor_start >> 30;
            let pdpte = m64(s0, cx.p.pdpt_base + 8 * jj);
            let pdt = (pdpte & 0xffff_ffff_ffff_f000) as u32;
            ck(m32(s, ebp1.wrapping_sub(64)) == 0xffff_f000, || "mask lo".into())?;
            ck(m32(s, ebp1.wrapping_sub(60)) == 0xffff_ffff, || "mask hi".into())?;
            ck(m64(s, ebp1.wrapping_sub(56)) == pdpte, || "stashed pointer entry".into())?;
            ck(m64(s, ebp1.wrapping_sub(48)) == (pdpte & 0xffff_ffff_ffff_f000), || {
                "masked pointer entry".into()
            })?;
            ck(m32(s, ebp1.wrapping_sub(36)) == pdt, || "masked low word".into())?;
            ck(m32(s, ebp1.wrapping_sub(32)) == pdt, || "pdt slot".into())?;
            ck(m32(s, ebp1.wrapping_sub(28)) == start, || "start slot".into())?;
            ck(m32(s, ebp1.wrapping_sub(24)) == end, || "end slot".into())?;
            ck(m32(s, ebp1.wrapping_sub(16)) == jj, || "gib index slot".into())?;
            let i = m32(s, ebp1.wrapping_sub(20));
            ck(i >= start && i <= start.max(end), || {
                format!("loop counter i = {i} outside [{start}, {}]", start.max(end))
            })?;
            for k in start..i {
                let a = pdt.wrapping_add(8 * k);
                ck(m64(s, a) == 0, || format!("entry {k} not yet cleared"))?;
            }
            for k in i..end {
                let a = pdt.wrapping_add(8 * k);
                ck(m64(s, a) == m64(s0, a), || {
                    format!("entry {k} cleared ahead of the loop")
                })?;
            }
            Ok(())
        })
    };

    spec.sample = Box::new(move |idx: u64, s: &MachineState| {
        if s.eip != l5 {
            return true;
        }
        let i = m32(s, ebp1.wrapping_sub(20));
        i.saturating_sub(start) <= 1 || end.saturating_sub(i) <= 1 || idx % 17 == 0
    });

    spec.modify = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState| {
            let mut m = s0.clone();
            apply_delta(&mut m.memory, &oracle_sec_not_present(&cx.p, &s0.memory));
            let e = s0.reg(Register::Esp);
            let pdpte = m64(s0, cx.p.pdpt_base + 8 * (cx.p.visor_start >> 30));
            frame_sec_writes(
                &mut m.memory,
                e,
                s0.reg(Register::Ebp),
                s0.reg(Register::Esi),
                s0.reg(Register::Ebx),
                pdpte,
                &cx.p,
            );
            finish(
                &mut m,
                cx.sentinel,
                e.wrapping_add(4),
                epilogue_flags(64, e.wrapping_sub(76)),
                &[
                    (Register::Eax, end),
                    (Register::Ecx, 0xffff_f000),
                    (Register::Edx, (pdpte >> 32) as u32),
                    (Register::Imme1, if end > start { 1 } else { 21 }),
                    (Register::Valu1, 64),
                ],
            );
            m
        })
    };

    spec.allowed_write = {
        let p = *p;
        Box::new(move |a: u32, low: u32| {
            let lo = pdt0.wrapping_add(8 * start);
            let hi = pdt0.wrapping_add(8 * end);
            (a >= lo && a < hi) || stack_window(&p, a, low)
        })
    };
    spec
}

fn spec_create_nested_pt(p: &NptParams, setup: &CallSetup) -> CutpointSpec {
    let cx = Ctx::new(
        p,
        setup,
        vec![p.pdpt_base, p.pdt_array_base, p.visor_start, p.visor_size],
    );
    let labels = ["L2", "L5", "L7", "L9"]
        .iter()
        .map(|n| setup.image.symbol(n).expect("loop label"))
        .collect::<BTreeSet<u32>>();

    // Return addresses the three calls push, in call order.
    let mut call_rets = Vec::new();
    let mut addr = setup.image.base;
    while addr < setup.sentinel {
        let off = (addr - setup.image.base) as usize;
        let instr = decode_with::<(), _>(|k| {
            setup.image.bytes.get(off + k as usize).copied().ok_or(())
        })
        .expect("assembled image decodes");
        if matches!(instr, Instruction::Call(_)) {
            call_rets.push(addr + 5);
        }
        addr += instr.encoded_len();
    }
    assert_eq!(call_rets.len(), 3, "expected exactly three calls");
    let (ret1, ret2, ret3) = (call_rets[0], call_rets[1], call_rets[2]);

    let mut spec = base_spec("create_nested_pt", &cx);
    spec.cutpoint_eips = labels;
    spec.segment_bound = 256;
    spec.total_bound = 300_000;

    // The helper-loop cutpoints only cut the cycles; the composite
    // claim lives entirely in the exit condition.
    spec.assertion = {
        let cx = cx.clone();
        let cuts = spec.cutpoint_eips.clone();
        Box::new(move |_s0: &MachineState, s: &MachineState| {
            if s.eip == cx.entry {
                return cx.entry_facts(s);
            }
            ck(cuts.contains(&s.eip), || {
                format!("assertion reached unexpected eip {:#010x}", s.eip)
            })
        })
    };

    spec.modify = {
        let cx = cx.clone();
        Box::new(move |s0: &MachineState| {
            let p = &cx.p;
            let mut m = s0.clone();
            apply_delta(&mut m.memory, &oracle_create_nested_pt(p));
            let e = s0.reg(Register::Esp);
            let ebp1 = e.wrapping_sub(4);
            let (esi, ebx) = (s0.reg(Register::Esi), s0.reg(Register::Ebx));
            let mem = &mut m.memory;
            // Prologue, then the three calls in order; later frames
            // overwrite earlier ones where they overlap.
            w32(mem, e.wrapping_sub(4), s0.reg(Register::Ebp));
            w32(mem, e.wrapping_sub(8), p.pdt_array_base);
            w32(mem, e.wrapping_sub(12), p.pdpt_base);
            w32(mem, e.wrapping_sub(16), ret1);
            frame_init_pdpt_writes(mem, e.wrapping_sub(16), ebp1, esi, ebx);
            w32(mem, e.wrapping_sub(8), p.pdt_array_base);
            w32(mem, e.wrapping_sub(12), ret2);
            frame_init_pdts_writes(mem, e.wrapping_sub(12), ebp1, esi, ebx, p);
            w32(mem, e.wrapping_sub(8), p.visor_size);
            w32(mem, e.wrapping_sub(12), p.visor_start);
            w32(mem, e.wrapping_sub(16), p.pdpt_base);
            w32(mem, e.wrapping_sub(20), ret3);
            // By the third call the pointer table is built, so the
            // entry the unmapping pass reads is freshly written.
            let jj = p.visor_start >> 30;
            let pdpte = p.pdt_bases[jj as usize] as u64 | 1;
            frame_sec_writes(mem, e.wrapping_sub(20), ebp1, esi, ebx, pdpte, p);
            finish(
                &mut m,
                cx.sentinel,
                e.wrapping_add(4),
                epilogue_flags(12, e.wrapping_sub(16)),
                &[
                    (Register::Eax, p.pdpt_base),
                    (Register::Ecx, 0xffff_f000),
                    (Register::Edx, 0),
                    (Register::Imme1, 12),
                    (Register::Valu1, 64),
                ],
            );
            m
        })
    };

    spec.allowed_write = {
        let p = *p;
        Box::new(move |a: u32, low: u32| {
            (a >= p.pdpt_base && a < p.pdpt_base + 32)
                || p.pdt_bases.iter().any(|&b| a >= b && a - b < 4096)
                || stack_window(&p, a, low)
        })
    };
    spec
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verifier::{
        check_entry_vc, check_exit_vc, check_frame_vc, check_preservation_vc, cycles_cut,
        run_to_next_cutpoint, verify, SegmentEnd, Verdict,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> NptParams {
        NptParams {
            pdpt_base: 0x0002_0000,
            pdt_bases: [0x0002_1000, 0x0002_2000, 0x0002_3000, 0x0002_4000],
            pdt_array_base: 0x0002_5000,
            visor_start: 0x4020_0000,
            visor_size: 0x0040_0000,
            stack_top: 0x0008_0000,
            code_base: 0x0000_7000,
        }
    }

    #[test]
    fn all_loop_cycles_are_cut() {
        let p = sample();
        for f in SetupFn::ALL {
            let (spec, setup) = spec_for(f, &p).unwrap();
            cycles_cut(&setup.image, &spec.cutpoint_eips).unwrap();
            // Dropping the cutpoints must expose the loops.
            if !spec.cutpoint_eips.is_empty() {
                assert!(
                    cycles_cut(&setup.image, &BTreeSet::new()).is_err(),
                    "{}: expected uncut cycles without cutpoints",
                    f.name()
                );
            }
        }
    }

    #[test]
    fn entry_reaches_first_cutpoint_in_21_steps() {
        let p = sample();
        let (spec, setup) = spec_for(SetupFn::InitPdts, &p).unwrap();
        let mut s = setup.state.clone();
        let (end, n) = run_to_next_cutpoint(&spec, &mut s);
        assert_eq!(end, SegmentEnd::AtCutpoint);
        assert_eq!(n, 21);
        assert_eq!(s.eip, setup.image.symbol("L7").unwrap());
        // And the assertion accepts the state it reached.
        (spec.assertion)(&setup.state, &s).unwrap();
    }

    #[test]
    fn closed_form_exit_states_match_execution() {
        let p = sample();
        for f in SetupFn::ALL {
            let (spec, setup) = spec_for(f, &p).unwrap();
            let r = check_exit_vc(&spec, &setup.state);
            assert_eq!(r.verdict, Verdict::Pass, "{}: {}", f.name(), r.detail);
        }
    }

    #[test]
    fn all_vcs_pass_on_sample_params() {
        let p = sample();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for f in SetupFn::ALL {
            let (spec, setup) = spec_for(f, &p).unwrap();
            let s0 = &setup.state;
            for r in [
                check_entry_vc(&spec, s0),
                check_preservation_vc(&spec, s0),
                check_exit_vc(&spec, s0),
                check_frame_vc(&spec, s0, 2_000, &mut rng),
            ] {
                assert_eq!(r.verdict, Verdict::Pass, "{} {}: {}", f.name(), r.kind, r.detail);
            }
        }
    }

    #[test]
    fn verify_runs_deterministically() {
        let run = || {
            verify(
                2,
                0xBEEF,
                |rng| crate::minvisor::gen_params(rng),
                |p| {
                    let (spec, setup) = spec_for(SetupFn::InitPdpt, p).unwrap();
                    (spec, setup.state)
                },
            )
        };
        let a = run();
        let b = run();
        assert_eq!(a.len(), b.len());
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.verdict, y.verdict);
            assert_eq!(x.seed, y.seed);
            assert_eq!(x.steps, y.steps);
            assert!(x.verdict.is_pass(), "{} {}", x.kind, x.detail);
        }
    }

    #[test]
    fn corrupted_code_is_refuted() {
        let p = sample();
        let mut setup = setup_call(SetupFn::InitPdts, &p).unwrap();
        // Flip the immediate of `irmovl 231` (the entry flags) in both
        // the image and the loaded copy, keeping them consistent, then
        // build the spec against the altered setup so the precondition
        // still holds and the defect must be caught by the checks.
        let pat: [u8; 6] = [0x30, 0xF8, 0xE7, 0x00, 0x00, 0x00];
        let off = setup
            .image
            .bytes
            .windows(6)
            .position(|w| w == pat)
            .expect("flag constant in image");
        setup.image.bytes[off + 2] = 0x66;
        setup
            .state
            .memory
            .write8(setup.image.base + off as u32 + 2, 0x66);
        let spec = spec_from_setup(SetupFn::InitPdts, &p, &setup);
        assert!((spec.precondition)(&setup.state), "mutant must stay in scope");
        let pres = check_preservation_vc(&spec, &setup.state);
        let exit = check_exit_vc(&spec, &setup.state);
        assert!(
            pres.verdict == Verdict::Fail || exit.verdict == Verdict::Fail,
            "corruption went unnoticed: {} / {}",
            pres.detail,
            exit.detail
        );
    }

    #[test]
    fn corrupted_prediction_is_refuted() {
        let p = sample();
        let (mut spec, setup) = spec_for(SetupFn::SecNotPresent, &p).unwrap();
        let inner = std::mem::replace(&mut spec.modify, Box::new(|s| s.clone()));
        spec.modify = Box::new(move |s0| {
            let mut m = inner(s0);
            let v = m.reg(Register::Eax);
            m.set_reg(Register::Eax, v.wrapping_add(1));
            m
        });
        let r = check_exit_vc(&spec, &setup.state);
        assert_eq!(r.verdict, Verdict::Fail);
        assert!(r.detail.contains("eax"), "detail: {}", r.detail);
    }
}
