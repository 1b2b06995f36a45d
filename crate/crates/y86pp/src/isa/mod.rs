//! Y86++ machine model: registers, flags, sparse memory, instruction
//! decode/execute.

mod alu;
mod exec;
mod state;

pub use alu::{alu_exec, AluOp};
pub(crate) use exec::{decode_with, RawDecodeError};
pub use exec::{decode, run, run_mut, step, step_mut, Cond, DecodeError, Instruction};
pub use state::{
    make_initial_state, LayoutError, MachineState, Memory, MemoryLayout, Region, Status,
};

/// Register file indices. IMME1 and VALU1 are the scratch registers used
/// when lowering x86 immediate-operand forms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Register {
    Eax,
    Ecx,
    Edx,
    Ebx,
    Esp,
    Ebp,
    Esi,
    Edi,
    Imme1,
    Valu1,
}

pub const NUM_REGISTERS: usize = 10;

pub const ALL_REGISTERS: [Register; NUM_REGISTERS] = [
    Register::Eax,
    Register::Ecx,
    Register::Edx,
    Register::Ebx,
    Register::Esp,
    Register::Ebp,
    Register::Esi,
    Register::Edi,
    Register::Imme1,
    Register::Valu1,
];

impl Register {
    pub fn nibble(self) -> u8 {
        self as u8
    }

    pub fn from_nibble(n: u8) -> Option<Register> {
        ALL_REGISTERS.get(n as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            Register::Eax => "eax",
            Register::Ecx => "ecx",
            Register::Edx => "edx",
            Register::Ebx => "ebx",
            Register::Esp => "esp",
            Register::Ebp => "ebp",
            Register::Esi => "esi",
            Register::Edi => "edi",
            Register::Imme1 => "imme1",
            Register::Valu1 => "valu1",
        }
    }

    pub fn from_name(name: &str) -> Option<Register> {
        ALL_REGISTERS.iter().copied().find(|r| r.name() == name)
    }
}

/// Condition-code register. CF participates in adcl/jb/jbe, which is what
/// lets two-word arithmetic work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Flags {
    pub zf: bool,
    pub sf: bool,
    pub of: bool,
    pub cf: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FaultKind {
    /// A not-present paging entry was hit; level 1 = PDPT, level 2 = PDT.
    PageFault { level: u8 },
    /// Unassigned opcode byte or invalid register nibble at fetch.
    DecodeError,
    /// Reserved for harnesses that want to treat halt as an error.
    HaltInstr,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FaultInfo {
    pub kind: FaultKind,
    /// Faulting virtual address; populated for page faults only.
    pub addr: Option<u32>,
    /// eip of the instruction that faulted (the step leaves eip there).
    pub eip: u32,
}
