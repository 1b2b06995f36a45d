//! Call harness: assemble a setup routine, lay out its arguments and a
//! sentinel return address, and run it to completion.
//!
//! The sentinel is one halt byte appended past the assembled image; the
//! routine's final `ret` lands on it, so a clean run ends Halted with
//! EIP at the sentinel. Runs happen in supervisor mode with translation
//! off, matching how the real setup code executes before any guest is
//! launched.

use std::collections::BTreeMap;

use crate::asm::{assemble, parse_program, AsmError, ParseError, ProgramImage};
use crate::isa::{step_mut, MachineState, Register, Status};
use crate::minvisor::oracle::{apply_delta, oracle_init_pdpt, oracle_init_pdts};
use crate::minvisor::params::{validate, NptParams, ParamError, CODE_RESERVE};

pub const INIT_PDPT_SRC: &str = include_str!("../../../../programs/init_pdpt.y86");
pub const INIT_PDTS_SRC: &str = include_str!("../../../../programs/init_pdts.y86");
pub const SEC_NOT_PRESENT_SRC: &str = include_str!("../../../../programs/sec_not_present.y86");
pub const CREATE_NESTED_PT_SRC: &str = include_str!("../../../../programs/create_nested_pt.y86");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SetupFn {
    InitPdpt,
    InitPdts,
    SecNotPresent,
    CreateNestedPt,
}

impl SetupFn {
    pub const ALL: [SetupFn; 4] = [
        SetupFn::InitPdpt,
        SetupFn::InitPdts,
        SetupFn::SecNotPresent,
        SetupFn::CreateNestedPt,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SetupFn::InitPdpt => "init_pdpt",
            SetupFn::InitPdts => "init_pdts",
            SetupFn::SecNotPresent => "sec_not_present",
            SetupFn::CreateNestedPt => "create_nested_pt",
        }
    }

    pub fn source(self) -> &'static str {
        match self {
            SetupFn::InitPdpt => INIT_PDPT_SRC,
            SetupFn::InitPdts => INIT_PDTS_SRC,
            SetupFn::SecNotPresent => SEC_NOT_PRESENT_SRC,
            SetupFn::CreateNestedPt => CREATE_NESTED_PT_SRC,
        }
    }

    pub fn from_name(name: &str) -> Option<SetupFn> {
        SetupFn::ALL.into_iter().find(|f| f.name() == name)
    }
}

#[derive(Debug, thiserror::Error)]
pub enum HarnessError {
    #[error("invalid parameters: {0}")]
    Params(#[from] ParamError),
    #[error("program source does not parse: {0}")]
    Parse(#[from] ParseError),
    #[error("program does not assemble: {0}")]
    Asm(#[from] AsmError),
    #[error("program needs {need} bytes but only {reserve} are reserved for code")]
    CodeTooBig { need: usize, reserve: u32 },
    #[error("image defines no `{0}` symbol at its base")]
    MissingEntry(&'static str),
    #[error("image base {image:#010x} does not match the configured code base {params:#010x}")]
    BaseMismatch { image: u32, params: u32 },
}

#[derive(Debug, Clone)]
pub struct CallSetup {
    pub state: MachineState,
    /// The assembled image including the appended sentinel halt byte.
    pub image: ProgramImage,
    /// Address of the sentinel halt; also the return address on the
    /// stack at entry.
    pub sentinel: u32,
    pub entry_esp: u32,
}

pub fn assemble_function(f: SetupFn, base: u32) -> Result<ProgramImage, HarnessError> {
    let items = parse_program(f.source())?;
    Ok(assemble(&items, base)?)
}

/// Build the entry state for `f` from an already-assembled image. The
/// image must sit at the configured code base and carry the routine's
/// entry symbol at its base; a sentinel halt byte is appended here.
pub fn setup_call_from_image(
    mut image: ProgramImage,
    f: SetupFn,
    p: &NptParams,
) -> Result<CallSetup, HarnessError> {
    validate(p)?;
    if image.base != p.code_base {
        return Err(HarnessError::BaseMismatch {
            image: image.base,
            params: p.code_base,
        });
    }
    if image.symbol(f.name()) != Some(image.base) {
        return Err(HarnessError::MissingEntry(f.name()));
    }
    let sentinel = image.end();
    image.bytes.push(0x00);
    if image.bytes.len() > CODE_RESERVE as usize {
        return Err(HarnessError::CodeTooBig {
            need: image.bytes.len(),
            reserve: CODE_RESERVE,
        });
    }

    let mut state = MachineState::new();
    state.memory.store(image.base, &image.bytes);
    for (t, &b) in p.pdt_bases.iter().enumerate() {
        state.memory.write32_le(p.pdt_array_base + 4 * t as u32, b);
    }
    if f == SetupFn::SecNotPresent {
        // Standalone runs start from the state the routine sees in the
        // full sequence: pointer table and directories already built.
        apply_delta(&mut state.memory, &oracle_init_pdpt(p));
        apply_delta(&mut state.memory, &oracle_init_pdts(p));
    }

    // Arguments in declaration order; pushed right to left, so the
    // first argument sits closest to the return address.
    let args: &[u32] = match f {
        SetupFn::InitPdpt => &[p.pdpt_base, p.pdt_array_base],
        SetupFn::InitPdts => &[p.pdt_array_base],
        SetupFn::SecNotPresent => &[p.pdpt_base, p.visor_start, p.visor_size],
        SetupFn::CreateNestedPt => {
            &[p.pdpt_base, p.pdt_array_base, p.visor_start, p.visor_size]
        }
    };
    let st = p.stack_top;
    for (k, &a) in args.iter().enumerate() {
        state.memory.write32_le(st - 4 * (args.len() - k) as u32, a);
    }
    let entry_esp = st - 4 * (args.len() as u32 + 1);
    state.memory.write32_le(entry_esp, sentinel);
    state.set_reg(Register::Esp, entry_esp);
    state.eip = image.base;

    Ok(CallSetup {
        state,
        image,
        sentinel,
        entry_esp,
    })
}

pub fn setup_call(f: SetupFn, p: &NptParams) -> Result<CallSetup, HarnessError> {
    let image = assemble_function(f, p.code_base)?;
    setup_call_from_image(image, f, p)
}

pub struct RunOutcome {
    pub state: MachineState,
    pub steps: u64,
    /// Lowest ESP observed; the frame check treats [low water,
    /// stack_top) as legitimately scribbled-on.
    pub esp_low_water: u32,
    pub delta: BTreeMap<u32, u8>,
}

/// Step until the machine stops or `max_steps` run out. A clean call
/// ends Halted with EIP on the sentinel.
pub fn run_call(setup: &CallSetup, max_steps: u64) -> RunOutcome {
    let mut s = setup.state.clone();
    let mut steps = 0u64;
    let mut low = s.reg(Register::Esp);
    while s.status == Status::Running && steps < max_steps {
        step_mut(&mut s);
        steps += 1;
        low = low.min(s.reg(Register::Esp));
    }
    let delta = s.memory.delta_from(&setup.state.memory);
    RunOutcome {
        state: s,
        steps,
        esp_low_water: low,
        delta,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::minvisor::oracle::{oracle_create_nested_pt, oracle_sec_not_present, MemoryDelta};
    use crate::minvisor::params::STACK_RESERVE;

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

    fn table_regions(p: &NptParams) -> Vec<(u32, u32)> {
        let mut v = vec![(p.pdpt_base, 4096)];
        v.extend(p.pdt_bases.iter().map(|&b| (b, 4096)));
        v
    }

    /// Byte-exact comparison of the final table contents against the
    /// baseline with the oracle delta applied.
    fn check_tables(setup: &CallSetup, out: &RunOutcome, oracle: &MemoryDelta, p: &NptParams) {
        let mut expected = setup.state.memory.clone();
        apply_delta(&mut expected, oracle);
        for (base, len) in table_regions(p) {
            for off in 0..len {
                let a = base + off;
                assert_eq!(
                    out.state.memory.read8(a),
                    expected.read8(a),
                    "table byte at {a:#010x}"
                );
            }
        }
    }

    #[test]
    fn all_sources_assemble_and_fit() {
        for f in SetupFn::ALL {
            let img = assemble_function(f, 0x7000).unwrap();
            assert_eq!(img.symbol(f.name()), Some(0x7000));
            assert!(img.len() + 1 <= CODE_RESERVE as usize, "{}", f.name());
        }
    }

    #[test]
    fn setup_lays_out_the_call_frame() {
        let p = sample();
        let s = setup_call(SetupFn::InitPdts, &p).unwrap();
        let st = p.stack_top;
        assert_eq!(s.entry_esp, st - 8);
        assert_eq!(s.state.reg(Register::Esp), st - 8);
        assert_eq!(s.state.memory.read32_le(st - 4), p.pdt_array_base);
        assert_eq!(s.state.memory.read32_le(st - 8), s.sentinel);
        assert_eq!(s.state.memory.read8(s.sentinel), 0x00);
        assert_eq!(s.state.eip, p.code_base);
        assert!(!s.state.guest_mode);

        let s = setup_call(SetupFn::CreateNestedPt, &p).unwrap();
        assert_eq!(s.entry_esp, st - 20);
        assert_eq!(s.state.memory.read32_le(st - 4), p.visor_size);
        assert_eq!(s.state.memory.read32_le(st - 8), p.visor_start);
        assert_eq!(s.state.memory.read32_le(st - 12), p.pdt_array_base);
        assert_eq!(s.state.memory.read32_le(st - 16), p.pdpt_base);
        assert_eq!(s.state.memory.read32_le(st - 20), s.sentinel);
        // The pdt pointer array is materialized for the routines that
        // read it.
        for t in 0..4u32 {
            assert_eq!(
                s.state.memory.read32_le(p.pdt_array_base + 4 * t),
                p.pdt_bases[t as usize]
            );
        }
    }

    #[test]
    fn base_mismatch_is_rejected() {
        let p = sample();
        let image = assemble_function(SetupFn::InitPdts, 0x9000).unwrap();
        let e = setup_call_from_image(image, SetupFn::InitPdts, &p).unwrap_err();
        assert!(matches!(e, HarnessError::BaseMismatch { .. }));
    }

    #[test]
    fn init_pdpt_runs_clean_and_matches_oracle() {
        let p = sample();
        let setup = setup_call(SetupFn::InitPdpt, &p).unwrap();
        let out = run_call(&setup, 10_000);
        assert_eq!(out.state.status, Status::Halted);
        assert_eq!(out.state.eip, setup.sentinel);
        assert_eq!(out.state.reg(Register::Eax), p.pdt_bases[3] | 1);
        check_tables(&setup, &out, &oracle_init_pdpt(&p), &p);
        assert!(out.esp_low_water >= p.stack_top - STACK_RESERVE);
    }

    #[test]
    fn init_pdts_runs_clean_and_matches_oracle() {
        let p = sample();
        let setup = setup_call(SetupFn::InitPdts, &p).unwrap();
        let out = run_call(&setup, 200_000);
        assert_eq!(out.state.status, Status::Halted);
        assert_eq!(out.state.eip, setup.sentinel);
        check_tables(&setup, &out, &oracle_init_pdts(&p), &p);
        assert!(out.steps < 200_000);
        assert!(out.esp_low_water >= p.stack_top - STACK_RESERVE);
    }

    #[test]
    fn sec_not_present_runs_clean_and_matches_oracle() {
        let p = sample();
        let setup = setup_call(SetupFn::SecNotPresent, &p).unwrap();
        // The standalone baseline is pre-seeded with built tables.
        assert_eq!(
            setup.state.memory.read64_le(p.pdt_bases[1]),
            (512u64 << 21) | 0xe7
        );
        let oracle = oracle_sec_not_present(&p, &setup.state.memory);
        let out = run_call(&setup, 50_000);
        assert_eq!(out.state.status, Status::Halted);
        assert_eq!(out.state.eip, setup.sentinel);
        check_tables(&setup, &out, &oracle, &p);
        // The delta is real: the covered entries held live mappings.
        assert!(out.delta.contains_key(&(p.pdt_bases[1] + 8)));
    }

    #[test]
    fn create_nested_pt_runs_clean_and_matches_oracle() {
        let p = sample();
        let setup = setup_call(SetupFn::CreateNestedPt, &p).unwrap();
        let out = run_call(&setup, 300_000);
        assert_eq!(out.state.status, Status::Halted);
        assert_eq!(out.state.eip, setup.sentinel);
        assert_eq!(out.state.reg(Register::Eax), p.pdpt_base);
        check_tables(&setup, &out, &oracle_create_nested_pt(&p), &p);
        assert!(out.esp_low_water >= p.stack_top - STACK_RESERVE);
    }

    #[test]
    fn writes_stay_inside_tables_and_stack_window() {
        let p = sample();
        for f in SetupFn::ALL {
            let setup = setup_call(f, &p).unwrap();
            let out = run_call(&setup, 300_000);
            assert_eq!(out.state.status, Status::Halted, "{}", f.name());
            let in_tables = |a: u32| {
                table_regions(&p)
                    .iter()
                    .any(|&(b, l)| a >= b && a - b < l)
            };
            let in_stack = |a: u32| a >= out.esp_low_water && a < p.stack_top;
            for &a in out.delta.keys() {
                assert!(in_tables(a) || in_stack(a), "{}: stray write at {a:#010x}", f.name());
            }
        }
    }
}
