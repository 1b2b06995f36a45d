//! Concrete cutpoint checking for the setup routines.
//!
//! A `CutpointSpec` carries an assertion network over a routine's
//! control points plus a closed-form description of its exit state.
//! The checker runs real executions and tests the verification
//! conditions on the states it actually reaches: assertions hold on
//! entry, survive every cutpoint-to-cutpoint segment, and the exit
//! state equals the predicted one exactly, with all writes confined to
//! the declared frame. Failures are genuine counterexamples; passes
//! are evidence over the sampled trials, not a proof.

pub mod specs;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::asm::ProgramImage;
use crate::isa::{decode_with, step_mut, Cond, Instruction, MachineState, Register, Status};
use crate::minvisor::NptParams;

pub struct CutpointSpec {
    pub name: String,
    /// Instruction addresses treated as cutpoints; entry and exit are
    /// handled separately.
    pub cutpoint_eips: BTreeSet<u32>,
    pub precondition: Box<dyn Fn(&MachineState) -> bool>,
    /// True while EIP is inside the routine's code proper.
    pub in_main: Box<dyn Fn(&MachineState) -> bool>,
    /// The clean-return point: sentinel reached, still running.
    pub exit: Box<dyn Fn(&MachineState) -> bool>,
    /// Assertion network, dispatching on the reached state's EIP.
    /// Receives the entry state and the current state.
    pub assertion: Box<dyn Fn(&MachineState, &MachineState) -> Result<(), String>>,
    /// Closed-form expected exit state as a function of the entry
    /// state. Built from the oracles and frame layouts, never by
    /// running the code.
    pub modify: Box<dyn Fn(&MachineState) -> MachineState>,
    /// Which cutpoint visits the preservation walk checks; receives
    /// the per-address visit index. Dense loops may sample.
    pub sample: Box<dyn Fn(u64, &MachineState) -> bool>,
    /// Addresses the routine may legitimately change: its write
    /// domain plus the live stack window down to the given low-water
    /// ESP.
    pub allowed_write: Box<dyn Fn(u32, u32) -> bool>,
    pub segment_bound: u64,
    pub total_bound: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VcKind {
    Entry,
    Preservation,
    Exit,
    Frame,
}

impl fmt::Display for VcKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            VcKind::Entry => "entry",
            VcKind::Preservation => "preservation",
            VcKind::Exit => "exit",
            VcKind::Frame => "frame",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    Pass,
    /// The precondition did not hold, so nothing was checked.
    VacuousPass,
    Fail,
    /// A bound ran out before the walk finished; no verdict either way.
    Inconclusive,
}

impl Verdict {
    pub fn is_pass(self) -> bool {
        matches!(self, Verdict::Pass | Verdict::VacuousPass)
    }
}

impl fmt::Display for Verdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Verdict::Pass => "pass",
            Verdict::VacuousPass => "vacuous-pass",
            Verdict::Fail => "FAIL",
            Verdict::Inconclusive => "INCONCLUSIVE",
        })
    }
}

#[derive(Debug, Clone)]
pub struct VcReport {
    pub kind: VcKind,
    pub verdict: Verdict,
    pub detail: String,
    pub steps: u64,
    pub at_eip: Option<u32>,
    pub trial: usize,
    pub seed: u64,
}

impl fmt::Display for VcReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "trial {:>3} seed {:#018x} {:>12} {:>12} steps {:>7}",
            self.trial, self.seed, self.kind, self.verdict, self.steps
        )?;
        if let Some(eip) = self.at_eip {
            write!(f, " at {eip:#010x}")?;
        }
        if !self.detail.is_empty() {
            write!(f, "  {}", self.detail)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SegmentEnd {
    AtExit,
    AtCutpoint,
    Fault,
    BoundExhausted,
}

/// Advance `s` to the next cutpoint, the exit, a fault, or the segment
/// bound, whichever comes first. Returns the number of steps taken. A
/// state already at the exit does not move.
pub fn run_to_next_cutpoint(spec: &CutpointSpec, s: &mut MachineState) -> (SegmentEnd, u64) {
    if (spec.exit)(s) {
        return (SegmentEnd::AtExit, 0);
    }
    let mut n = 0u64;
    loop {
        step_mut(s);
        n += 1;
        if s.status != Status::Running {
            return (SegmentEnd::Fault, n);
        }
        if (spec.exit)(s) {
            return (SegmentEnd::AtExit, n);
        }
        if spec.cutpoint_eips.contains(&s.eip) {
            return (SegmentEnd::AtCutpoint, n);
        }
        if n >= spec.segment_bound {
            return (SegmentEnd::BoundExhausted, n);
        }
    }
}

fn report(kind: VcKind, verdict: Verdict, detail: String, steps: u64, at_eip: Option<u32>) -> VcReport {
    VcReport {
        kind,
        verdict,
        detail,
        steps,
        at_eip,
        trial: 0,
        seed: 0,
    }
}

/// Entry condition: if the precondition holds, the assertion network
/// must accept the entry state itself.
pub fn check_entry_vc(spec: &CutpointSpec, s0: &MachineState) -> VcReport {
    if !(spec.precondition)(s0) {
        return report(
            VcKind::Entry,
            Verdict::VacuousPass,
            "precondition does not hold".into(),
            0,
            None,
        );
    }
    match (spec.assertion)(s0, s0) {
        Ok(()) => report(VcKind::Entry, Verdict::Pass, String::new(), 0, Some(s0.eip)),
        Err(e) => report(VcKind::Entry, Verdict::Fail, e, 0, Some(s0.eip)),
    }
}

/// Walk the whole trajectory, checking the assertion at sampled
/// cutpoint visits. Faults and bound exhaustion surface here too.
pub fn check_preservation_vc(spec: &CutpointSpec, s0: &MachineState) -> VcReport {
    if !(spec.precondition)(s0) {
        return report(
            VcKind::Preservation,
            Verdict::VacuousPass,
            "precondition does not hold".into(),
            0,
            None,
        );
    }
    let mut s = s0.clone();
    let mut total = 0u64;
    let mut visits: BTreeMap<u32, u64> = BTreeMap::new();
    let mut checked = 0u64;
    let mut seen = 0u64;
    loop {
        let (end, n) = run_to_next_cutpoint(spec, &mut s);
        total += n;
        match end {
            SegmentEnd::AtExit => {
                return report(
                    VcKind::Preservation,
                    Verdict::Pass,
                    format!("checked {checked} of {seen} cutpoint visits"),
                    total,
                    None,
                );
            }
            SegmentEnd::AtCutpoint => {
                let idx = visits.entry(s.eip).or_insert(0);
                let this = *idx;
                *idx += 1;
                seen += 1;
                if (spec.sample)(this, &s) {
                    checked += 1;
                    if let Err(e) = (spec.assertion)(s0, &s) {
                        return report(VcKind::Preservation, Verdict::Fail, e, total, Some(s.eip));
                    }
                }
            }
            SegmentEnd::Fault => {
                return report(
                    VcKind::Preservation,
                    Verdict::Fail,
                    format!("execution stopped abnormally: {:?}", s.status),
                    total,
                    Some(s.eip),
                );
            }
            SegmentEnd::BoundExhausted => {
                return report(
                    VcKind::Preservation,
                    Verdict::Inconclusive,
                    "segment bound exhausted between cutpoints".into(),
                    total,
                    Some(s.eip),
                );
            }
        }
        if total >= spec.total_bound {
            return report(
                VcKind::Preservation,
                Verdict::Inconclusive,
                "total step bound exhausted".into(),
                total,
                Some(s.eip),
            );
        }
    }
}

/// Name the first component where two states differ.
pub fn diff_states(expected: &MachineState, actual: &MachineState) -> Option<String> {
    if expected.status != actual.status {
        return Some(format!(
            "status: expected {:?}, got {:?}",
            expected.status, actual.status
        ));
    }
    if expected.eip != actual.eip {
        return Some(format!(
            "eip: expected {:#010x}, got {:#010x}",
            expected.eip, actual.eip
        ));
    }
    for r in crate::isa::ALL_REGISTERS {
        if expected.reg(r) != actual.reg(r) {
            return Some(format!(
                "{}: expected {:#010x}, got {:#010x}",
                r.name(),
                expected.reg(r),
                actual.reg(r)
            ));
        }
    }
    if expected.flags != actual.flags {
        return Some(format!(
            "flags: expected {:?}, got {:?}",
            expected.flags, actual.flags
        ));
    }
    if expected.cr3 != actual.cr3 {
        return Some(format!(
            "cr3: expected {:#010x}, got {:#010x}",
            expected.cr3, actual.cr3
        ));
    }
    if expected.guest_mode != actual.guest_mode {
        return Some(format!(
            "guest_mode: expected {}, got {}",
            expected.guest_mode, actual.guest_mode
        ));
    }
    if expected.shadow != actual.shadow {
        return Some(format!(
            "shadow: expected {:?}, got {:?}",
            expected.shadow, actual.shadow
        ));
    }
    if let Some((addr, want, got)) = expected.memory.first_difference(&actual.memory) {
        return Some(format!(
            "memory[{addr:#010x}]: expected {want:#04x}, got {got:#04x}"
        ));
    }
    None
}

fn walk_to_exit(spec: &CutpointSpec, s0: &MachineState) -> (MachineState, SegmentEnd, u64, u32) {
    let mut s = s0.clone();
    let mut total = 0u64;
    let mut low = s.reg(Register::Esp);
    loop {
        let (end, n) = run_to_next_cutpoint_tracking(spec, &mut s, &mut low);
        total += n;
        match end {
            SegmentEnd::AtCutpoint => {
                if total >= spec.total_bound {
                    return (s, SegmentEnd::BoundExhausted, total, low);
                }
            }
            other => return (s, other, total, low),
        }
    }
}

/// Same loop as `run_to_next_cutpoint` with ESP low-water tracking;
/// the public entry point keeps the simpler signature.
fn run_to_next_cutpoint_tracking(
    spec: &CutpointSpec,
    s: &mut MachineState,
    low: &mut u32,
) -> (SegmentEnd, u64) {
    if (spec.exit)(s) {
        return (SegmentEnd::AtExit, 0);
    }
    let mut n = 0u64;
    loop {
        step_mut(s);
        n += 1;
        *low = (*low).min(s.reg(Register::Esp));
        if s.status != Status::Running {
            return (SegmentEnd::Fault, n);
        }
        if (spec.exit)(s) {
            return (SegmentEnd::AtExit, n);
        }
        if spec.cutpoint_eips.contains(&s.eip) {
            return (SegmentEnd::AtCutpoint, n);
        }
        if n >= spec.segment_bound {
            return (SegmentEnd::BoundExhausted, n);
        }
    }
}

/// Exit condition: the reached exit state must equal `modify(s0)` in
/// every component, and must lie outside the routine's code.
pub fn check_exit_vc(spec: &CutpointSpec, s0: &MachineState) -> VcReport {
    if !(spec.precondition)(s0) {
        return report(
            VcKind::Exit,
            Verdict::VacuousPass,
            "precondition does not hold".into(),
            0,
            None,
        );
    }
    let (s, end, total, _) = walk_to_exit(spec, s0);
    match end {
        SegmentEnd::AtExit => {}
        SegmentEnd::Fault => {
            return report(
                VcKind::Exit,
                Verdict::Fail,
                format!("execution stopped abnormally: {:?}", s.status),
                total,
                Some(s.eip),
            );
        }
        _ => {
            return report(
                VcKind::Exit,
                Verdict::Inconclusive,
                "step bound exhausted before exit".into(),
                total,
                Some(s.eip),
            );
        }
    }
    if (spec.in_main)(&s) {
        return report(
            VcKind::Exit,
            Verdict::Fail,
            "exit state still inside the routine".into(),
            total,
            Some(s.eip),
        );
    }
    let expected = (spec.modify)(s0);
    match diff_states(&expected, &s) {
        None => report(VcKind::Exit, Verdict::Pass, String::new(), total, Some(s.eip)),
        Some(d) => report(VcKind::Exit, Verdict::Fail, d, total, Some(s.eip)),
    }
}

/// Frame condition: nothing outside the allowed write set changed.
/// Checked two ways on the same exit state: an exact sweep over every
/// address either memory stores, and `probes` random reads outside the
/// allowed set. Both routes always run.
pub fn check_frame_vc(
    spec: &CutpointSpec,
    s0: &MachineState,
    probes: u32,
    rng: &mut ChaCha8Rng,
) -> VcReport {
    if !(spec.precondition)(s0) {
        return report(
            VcKind::Frame,
            Verdict::VacuousPass,
            "precondition does not hold".into(),
            0,
            None,
        );
    }
    let (s, end, total, low) = walk_to_exit(spec, s0);
    if end != SegmentEnd::AtExit {
        return report(
            VcKind::Frame,
            Verdict::Inconclusive,
            format!("walk ended early: {end:?}"),
            total,
            Some(s.eip),
        );
    }
    let allowed = |a: u32| (spec.allowed_write)(a, low);

    let keys: BTreeSet<u32> = s0
        .memory
        .entries()
        .map(|(a, _)| a)
        .chain(s.memory.entries().map(|(a, _)| a))
        .collect();
    for a in keys {
        if !allowed(a) && s.memory.read8(a) != s0.memory.read8(a) {
            return report(
                VcKind::Frame,
                Verdict::Fail,
                format!(
                    "stored byte outside the frame changed: [{a:#010x}] {:#04x} -> {:#04x}",
                    s0.memory.read8(a),
                    s.memory.read8(a)
                ),
                total,
                None,
            );
        }
    }

    let mut done = 0u32;
    while done < probes {
        let a: u32 = rng.gen();
        if allowed(a) {
            continue;
        }
        done += 1;
        if s.memory.read8(a) != s0.memory.read8(a) {
            return report(
                VcKind::Frame,
                Verdict::Fail,
                format!(
                    "probed byte outside the frame changed: [{a:#010x}] {:#04x} -> {:#04x}",
                    s0.memory.read8(a),
                    s.memory.read8(a)
                ),
                total,
                None,
            );
        }
    }
    report(
        VcKind::Frame,
        Verdict::Pass,
        format!("exact sweep plus {probes} probes"),
        total,
        None,
    )
}

/// Every cycle in the image's control flow must pass through a
/// cutpoint, so that cutpoint-to-cutpoint segments are finite. Call
/// edges fall through to the return point; the callees' own internal
/// edges are in the graph, so their loops need cutpoints too. This
/// would miss recursion through call/ret pairs, which these routines
/// do not use.
pub fn cycles_cut(image: &ProgramImage, cutpoints: &BTreeSet<u32>) -> Result<(), String> {
    let base = image.base;
    let end = base + image.bytes.len() as u32;
    let mut succ: BTreeMap<u32, Vec<u32>> = BTreeMap::new();
    let mut addr = base;
    while addr < end {
        let off = (addr - base) as usize;
        let instr = decode_with::<(), _>(|k| image.bytes.get(off + k as usize).copied().ok_or(()))
            .map_err(|_| format!("undecodable instruction at {addr:#010x}"))?;
        let next = addr + instr.encoded_len();
        let edges = match instr {
            Instruction::Halt | Instruction::Ret => vec![],
            Instruction::Jcc(Cond::Always, target) => vec![target],
            Instruction::Jcc(_, target) => vec![target, next],
            Instruction::Call(_) => vec![next],
            _ => vec![next],
        };
        succ.insert(
            addr,
            edges
                .into_iter()
                .filter(|t| *t >= base && *t < end && !cutpoints.contains(t))
                .collect(),
        );
        addr = next;
    }
    // DFS over the graph with cutpoint nodes removed; any remaining
    // cycle is an uncut loop.
    let mut color: BTreeMap<u32, u8> = BTreeMap::new();
    for &start in succ.keys() {
        if cutpoints.contains(&start) || color.get(&start) == Some(&2) {
            continue;
        }
        let mut stack = vec![(start, 0usize)];
        color.insert(start, 1);
        while let Some(&mut (node, ref mut i)) = stack.last_mut() {
            let next = succ.get(&node).and_then(|v| v.get(*i).copied());
            *i += 1;
            match next {
                Some(t) => match color.get(&t) {
                    Some(1) => return Err(format!("uncut cycle through {t:#010x}")),
                    Some(_) => {}
                    None => {
                        color.insert(t, 1);
                        stack.push((t, 0));
                    }
                },
                None => {
                    color.insert(node, 2);
                    stack.pop();
                }
            }
        }
    }
    Ok(())
}

/// Run all four condition checks over freshly generated parameter
/// sets. Fully deterministic: the master seed derives one sub-seed per
/// trial, which drives both parameter generation and frame probing.
pub fn verify<G, B>(trials: usize, master_seed: u64, mut gen: G, mut build: B) -> Vec<VcReport>
where
    G: FnMut(&mut ChaCha8Rng) -> NptParams,
    B: FnMut(&NptParams) -> (CutpointSpec, MachineState),
{
    let mut master = ChaCha8Rng::seed_from_u64(master_seed);
    let mut out = Vec::new();
    for trial in 0..trials {
        let sub = master.next_u64();
        let mut rng = ChaCha8Rng::seed_from_u64(sub);
        let p = gen(&mut rng);
        let (spec, s0) = build(&p);
        let mut push = |mut r: VcReport| {
            r.trial = trial;
            r.seed = sub;
            out.push(r);
        };
        push(check_entry_vc(&spec, &s0));
        push(check_preservation_vc(&spec, &s0));
        push(check_exit_vc(&spec, &s0));
        push(check_frame_vc(&spec, &s0, 10_000, &mut rng));
    }
    out
}
