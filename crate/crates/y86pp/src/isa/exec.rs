use super::alu::{alu_exec, AluOp};
use super::state::{MachineState, Status};
use super::{FaultInfo, FaultKind, Flags, Register};
use crate::paging::{translate_mem_access, va_to_pa, PageFaultInfo, TranslationOutcome};

/// Jump conditions in encoding order (ifun 0..8).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Cond {
    Always,
    Le,
    L,
    E,
    Ne,
    Ge,
    G,
    B,
    Be,
}

pub const ALL_CONDS: [Cond; 9] = [
    Cond::Always,
    Cond::Le,
    Cond::L,
    Cond::E,
    Cond::Ne,
    Cond::Ge,
    Cond::G,
    Cond::B,
    Cond::Be,
];

impl Cond {
    pub fn ifun(self) -> u8 {
        self as u8
    }

    pub fn from_ifun(f: u8) -> Option<Cond> {
        ALL_CONDS.get(f as usize).copied()
    }

    pub fn mnemonic(self) -> &'static str {
        match self {
            Cond::Always => "jmp",
            Cond::Le => "jle",
            Cond::L => "jl",
            Cond::E => "je",
            Cond::Ne => "jne",
            Cond::Ge => "jge",
            Cond::G => "jg",
            Cond::B => "jb",
            Cond::Be => "jbe",
        }
    }

    pub fn taken(self, f: Flags) -> bool {
        match self {
            Cond::Always => true,
            Cond::Le => (f.sf != f.of) || f.zf,
            Cond::L => f.sf != f.of,
            Cond::E => f.zf,
            Cond::Ne => !f.zf,
            Cond::Ge => f.sf == f.of,
            Cond::G => (f.sf == f.of) && !f.zf,
            Cond::B => f.cf,
            Cond::Be => f.cf || f.zf,
        }
    }
}

const ALU_OPS: [AluOp; 9] = [
    AluOp::Add,
    AluOp::Sub,
    AluOp::And,
    AluOp::Xor,
    AluOp::Or,
    AluOp::Adc,
    AluOp::Cmp,
    AluOp::Sal,
    AluOp::Shr,
];

pub(crate) fn alu_ifun(op: AluOp) -> u8 {
    ALU_OPS.iter().position(|&o| o == op).unwrap() as u8
}

fn alu_from_ifun(f: u8) -> Option<AluOp> {
    ALU_OPS.get(f as usize).copied()
}

/// Decoded instruction. Immediates, displacements and jump/call targets
/// are 32-bit little-endian in the binary; targets are absolute addresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Instruction {
    Halt,
    Nop,
    Rrmovl { src: Register, dst: Register },
    Irmovl { imm: u32, dst: Register },
    Rmmovl { src: Register, disp: u32, base: Register },
    Mrmovl { disp: u32, base: Register, dst: Register },
    Op(AluOp, Register, Register),
    Jcc(Cond, u32),
    Call(u32),
    Ret,
    Pushl(Register),
    Popl(Register),
}

impl Instruction {
    pub fn encoded_len(&self) -> u32 {
        match self {
            Instruction::Halt | Instruction::Nop | Instruction::Ret => 1,
            Instruction::Rrmovl { .. }
            | Instruction::Op(..)
            | Instruction::Pushl(..)
            | Instruction::Popl(..) => 2,
            Instruction::Jcc(..) | Instruction::Call(..) => 5,
            Instruction::Irmovl { .. }
            | Instruction::Rmmovl { .. }
            | Instruction::Mrmovl { .. } => 6,
        }
    }

    pub fn mnemonic(&self) -> &'static str {
        match self {
            Instruction::Halt => "halt",
            Instruction::Nop => "nop",
            Instruction::Rrmovl { .. } => "rrmovl",
            Instruction::Irmovl { .. } => "irmovl",
            Instruction::Rmmovl { .. } => "rmmovl",
            Instruction::Mrmovl { .. } => "mrmovl",
            Instruction::Op(op, ..) => op.mnemonic(),
            Instruction::Jcc(c, _) => c.mnemonic(),
            Instruction::Call(_) => "call",
            Instruction::Ret => "ret",
            Instruction::Pushl(_) => "pushl",
            Instruction::Popl(_) => "popl",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        match *self {
            Instruction::Halt => vec![0x00],
            Instruction::Nop => vec![0x10],
            Instruction::Rrmovl { src, dst } => vec![0x20, src.nibble() << 4 | dst.nibble()],
            Instruction::Irmovl { imm, dst } => {
                let mut v = vec![0x30, 0xF0 | dst.nibble()];
                v.extend(imm.to_le_bytes());
                v
            }
            Instruction::Rmmovl { src, disp, base } => {
                let mut v = vec![0x40, src.nibble() << 4 | base.nibble()];
                v.extend(disp.to_le_bytes());
                v
            }
            Instruction::Mrmovl { disp, base, dst } => {
                let mut v = vec![0x50, dst.nibble() << 4 | base.nibble()];
                v.extend(disp.to_le_bytes());
                v
            }
            Instruction::Op(op, ra, rb) => {
                vec![0x60 | alu_ifun(op), ra.nibble() << 4 | rb.nibble()]
            }
            Instruction::Jcc(c, target) => {
                let mut v = vec![0x70 | c.ifun()];
                v.extend(target.to_le_bytes());
                v
            }
            Instruction::Call(target) => {
                let mut v = vec![0x80];
                v.extend(target.to_le_bytes());
                v
            }
            Instruction::Ret => vec![0x90],
            Instruction::Pushl(r) => vec![0xA0, r.nibble() << 4 | 0x0F],
            Instruction::Popl(r) => vec![0xB0, r.nibble() << 4 | 0x0F],
        }
    }
}

/// Decode failure over an arbitrary byte source (offset-addressed from the
/// instruction's first byte).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum RawDecodeError<E> {
    Read(E),
    BadOpcode(u8),
    BadRegister(u8),
}

pub(crate) fn decode_with<E, F>(mut read: F) -> Result<Instruction, RawDecodeError<E>>
where
    F: FnMut(u32) -> Result<u8, E>,
{
    let b0 = read(0).map_err(RawDecodeError::Read)?;

    let mut reg_byte = |off: u32| read(off).map_err(RawDecodeError::Read);
    let hi = |b: u8| Register::from_nibble(b >> 4).ok_or(RawDecodeError::BadRegister(b));
    let lo = |b: u8| Register::from_nibble(b & 0xF).ok_or(RawDecodeError::BadRegister(b));

    let inst = match b0 {
        0x00 => Instruction::Halt,
        0x10 => Instruction::Nop,
        0x20 => {
            let b = reg_byte(1)?;
            Instruction::Rrmovl { src: hi(b)?, dst: lo(b)? }
        }
        0x30 => {
            let b = reg_byte(1)?;
            if b >> 4 != 0xF {
                return Err(RawDecodeError::BadRegister(b));
            }
            let dst = lo(b)?;
            let imm = read_u32(2, &mut reg_byte)?;
            Instruction::Irmovl { imm, dst }
        }
        0x40 => {
            let b = reg_byte(1)?;
            let (src, base) = (hi(b)?, lo(b)?);
            let disp = read_u32(2, &mut reg_byte)?;
            Instruction::Rmmovl { src, disp, base }
        }
        0x50 => {
            let b = reg_byte(1)?;
            let (dst, base) = (hi(b)?, lo(b)?);
            let disp = read_u32(2, &mut reg_byte)?;
            Instruction::Mrmovl { disp, base, dst }
        }
        0x60..=0x68 => {
            let op = alu_from_ifun(b0 & 0xF).unwrap();
            let b = reg_byte(1)?;
            Instruction::Op(op, hi(b)?, lo(b)?)
        }
        0x70..=0x78 => {
            let c = Cond::from_ifun(b0 & 0xF).unwrap();
            Instruction::Jcc(c, read_u32(1, &mut reg_byte)?)
        }
        0x80 => Instruction::Call(read_u32(1, &mut reg_byte)?),
        0x90 => Instruction::Ret,
        0xA0 => {
            let b = reg_byte(1)?;
            if b & 0xF != 0xF {
                return Err(RawDecodeError::BadRegister(b));
            }
            Instruction::Pushl(hi(b)?)
        }
        0xB0 => {
            let b = reg_byte(1)?;
            if b & 0xF != 0xF {
                return Err(RawDecodeError::BadRegister(b));
            }
            Instruction::Popl(hi(b)?)
        }
        other => return Err(RawDecodeError::BadOpcode(other)),
    };
    Ok(inst)
}

fn read_u32<E, F>(start: u32, read: &mut F) -> Result<u32, RawDecodeError<E>>
where
    F: FnMut(u32) -> Result<u8, RawDecodeError<E>>,
{
    let mut v = 0u32;
    for k in 0..4 {
        v |= (read(start + k)? as u32) << (8 * k);
    }
    Ok(v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DecodeError {
    /// Page fault while fetching instruction bytes.
    Fault(PageFaultInfo),
    BadOpcode(u8),
    BadRegister(u8),
}

/// Decodes the instruction at eip without mutating the state. Fetch goes
/// through address translation, exactly as `step` would fetch it.
pub fn decode(s: &MachineState) -> Result<Instruction, DecodeError> {
    let eip = s.eip;
    decode_with(|off| fetch_byte(s, eip.wrapping_add(off))).map_err(|e| match e {
        RawDecodeError::Read(pf) => DecodeError::Fault(pf),
        RawDecodeError::BadOpcode(b) => DecodeError::BadOpcode(b),
        RawDecodeError::BadRegister(b) => DecodeError::BadRegister(b),
    })
}

fn fetch_byte(s: &MachineState, va: u32) -> Result<u8, PageFaultInfo> {
    match va_to_pa(va, s) {
        TranslationOutcome::Physical(pa) => Ok(s.memory.read8(pa)),
        TranslationOutcome::PageFault(pf) => Err(pf),
    }
}

fn read32_virt(s: &MachineState, va: u32) -> Result<u32, PageFaultInfo> {
    let pas = translate_mem_access(s, va, 4)?;
    let mut v = 0u32;
    for (k, pa) in pas.iter().enumerate() {
        v |= (s.memory.read8(*pa) as u32) << (8 * k);
    }
    Ok(v)
}

fn write32_virt(s: &mut MachineState, va: u32, val: u32) -> Result<(), PageFaultInfo> {
    // translate the whole access before touching memory: a faulting step
    // must leave no partial writes behind
    let pas = translate_mem_access(&*s, va, 4)?;
    for (pa, b) in pas.iter().zip(val.to_le_bytes()) {
        s.memory.write8(*pa, b);
    }
    Ok(())
}

/// Executes one instruction in place. Not-Running states are fixed points.
/// A decode failure or page fault freezes the machine with eip, registers
/// and memory exactly as they were before the step.
pub fn step_mut(s: &mut MachineState) {
    if s.status != Status::Running {
        return;
    }
    let eip0 = s.eip;
    let inst = match decode(s) {
        Ok(i) => i,
        Err(e) => {
            let info = match e {
                DecodeError::Fault(pf) => FaultInfo {
                    kind: FaultKind::PageFault { level: pf.level },
                    addr: Some(pf.addr),
                    eip: eip0,
                },
                DecodeError::BadOpcode(_) | DecodeError::BadRegister(_) => {
                    FaultInfo { kind: FaultKind::DecodeError, addr: None, eip: eip0 }
                }
            };
            s.status = Status::Faulted(info);
            return;
        }
    };
    let next = eip0.wrapping_add(inst.encoded_len());
    if let Err(pf) = exec_instr(s, inst, next) {
        s.status = Status::Faulted(FaultInfo {
            kind: FaultKind::PageFault { level: pf.level },
            addr: Some(pf.addr),
            eip: eip0,
        });
    }
}

fn exec_instr(s: &mut MachineState, inst: Instruction, next: u32) -> Result<(), PageFaultInfo> {
    match inst {
        Instruction::Halt => s.status = Status::Halted, // eip stays on the halt
        Instruction::Nop => s.eip = next,
        Instruction::Rrmovl { src, dst } => {
            let v = s.reg(src);
            s.set_reg(dst, v);
            s.eip = next;
        }
        Instruction::Irmovl { imm, dst } => {
            s.set_reg(dst, imm);
            s.eip = next;
        }
        Instruction::Rmmovl { src, disp, base } => {
            let va = s.reg(base).wrapping_add(disp);
            let v = s.reg(src);
            write32_virt(s, va, v)?;
            s.eip = next;
        }
        Instruction::Mrmovl { disp, base, dst } => {
            let va = s.reg(base).wrapping_add(disp);
            let v = read32_virt(s, va)?;
            s.set_reg(dst, v);
            s.eip = next;
        }
        Instruction::Op(op, ra, rb) => {
            let (r, fl) = alu_exec(op, s.reg(ra), s.reg(rb), s.flags);
            s.flags = fl;
            if op != AluOp::Cmp {
                s.set_reg(rb, r);
            }
            s.eip = next;
        }
        Instruction::Jcc(c, target) => {
            s.eip = if c.taken(s.flags) { target } else { next };
        }
        Instruction::Call(target) => {
            let new_esp = s.reg(Register::Esp).wrapping_sub(4);
            write32_virt(s, new_esp, next)?;
            s.set_reg(Register::Esp, new_esp);
            s.eip = target;
        }
        Instruction::Ret => {
            let esp = s.reg(Register::Esp);
            let target = read32_virt(s, esp)?;
            s.set_reg(Register::Esp, esp.wrapping_add(4));
            s.eip = target;
        }
        Instruction::Pushl(r) => {
            let v = s.reg(r); // pushl %esp pushes the pre-decrement value
            let new_esp = s.reg(Register::Esp).wrapping_sub(4);
            write32_virt(s, new_esp, v)?;
            s.set_reg(Register::Esp, new_esp);
            s.eip = next;
        }
        Instruction::Popl(r) => {
            let esp = s.reg(Register::Esp);
            let v = read32_virt(s, esp)?;
            s.set_reg(Register::Esp, esp.wrapping_add(4));
            s.set_reg(r, v); // popl %esp: the popped value wins
            s.eip = next;
        }
    }
    Ok(())
}

pub fn step(s: &MachineState) -> MachineState {
    let mut t = s.clone();
    step_mut(&mut t);
    t
}

/// Steps until the machine stops running or `max_steps` is hit; returns
/// the number of steps taken. Hitting the bound while Running is visible
/// in the returned state's status, not an error.
pub fn run_mut(s: &mut MachineState, max_steps: u64) -> u64 {
    let mut n = 0;
    while n < max_steps && s.status == Status::Running {
        step_mut(s);
        n += 1;
    }
    n
}

pub fn run(s: &MachineState, max_steps: u64) -> (MachineState, u64) {
    let mut t = s.clone();
    let n = run_mut(&mut t, max_steps);
    (t, n)
}
