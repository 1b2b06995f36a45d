use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use super::image::ProgramImage;
use crate::isa::{decode_with, Instruction, RawDecodeError, Register};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
pub enum DisasmError {
    #[error("undecodable byte {byte:#04x} at image offset {offset}")]
    Undecodable { offset: u32, byte: u8 },
    #[error("instruction at image offset {offset} runs past the end of the image")]
    Truncated { offset: u32 },
}

struct Truncated;

/// Emits the parenthesized source form of an image. Labels are synthetic
/// and positional: `L0` names the image base (and the program form),
/// `L1`, `L2`, ... name jump/call targets inside the image in address
/// order. Targets outside the image stay numeric, so reassembling at the
/// same base reproduces the bytes exactly.
pub fn disassemble(img: &ProgramImage) -> Result<String, DisasmError> {
    let mut decoded: Vec<(u32, Instruction)> = Vec::new();
    let mut off = 0u32;
    while (off as usize) < img.bytes.len() {
        let inst = decode_with(|k| {
            img.bytes.get((off + k) as usize).copied().ok_or(Truncated)
        })
        .map_err(|e| match e {
            RawDecodeError::Read(Truncated) => DisasmError::Truncated { offset: off },
            RawDecodeError::BadOpcode(b) | RawDecodeError::BadRegister(b) => {
                DisasmError::Undecodable { offset: off, byte: b }
            }
        })?;
        decoded.push((img.base.wrapping_add(off), inst));
        off += inst.encoded_len();
    }

    let boundaries: BTreeSet<u32> = decoded.iter().map(|(a, _)| *a).collect();
    let mut label_addrs: BTreeSet<u32> = BTreeSet::new();
    for (_, inst) in &decoded {
        let target = match inst {
            Instruction::Jcc(_, t) | Instruction::Call(t) => *t,
            _ => continue,
        };
        if boundaries.contains(&target) {
            label_addrs.insert(target);
        }
    }
    let mut labels: BTreeMap<u32, String> = BTreeMap::new();
    labels.insert(img.base, "L0".to_string());
    let mut n = 1;
    for addr in label_addrs {
        labels.entry(addr).or_insert_with(|| {
            let name = format!("L{n}");
            n += 1;
            name
        });
    }

    let reg = |r: Register| format!(":{}", r.name());
    let target = |t: u32| match labels.get(&t) {
        Some(name) => format!(":{name}"),
        None => format!("{t}"),
    };
    let mut out = String::new();
    let _ = writeln!(out, "(:L0");
    for (addr, inst) in &decoded {
        if *addr != img.base {
            if let Some(name) = labels.get(addr) {
                let _ = writeln!(out, ":{name}");
            }
        }
        let text = match *inst {
            Instruction::Halt => "(halt)".to_string(),
            Instruction::Nop => "(nop)".to_string(),
            Instruction::Ret => "(ret)".to_string(),
            Instruction::Rrmovl { src, dst } => format!("(rrmovl {} {})", reg(src), reg(dst)),
            Instruction::Irmovl { imm, dst } => format!("(irmovl {imm} {})", reg(dst)),
            Instruction::Rmmovl { src, disp, base } => {
                format!("(rmmovl {} {} ({}))", reg(src), disp as i32, reg(base))
            }
            Instruction::Mrmovl { disp, base, dst } => {
                format!("(mrmovl {} ({}) {})", disp as i32, reg(base), reg(dst))
            }
            Instruction::Op(op, ra, rb) => {
                format!("({} {} {})", op.mnemonic(), reg(ra), reg(rb))
            }
            Instruction::Jcc(c, t) => format!("({} {})", c.mnemonic(), target(t)),
            Instruction::Call(t) => format!("(call {})", target(t)),
            Instruction::Pushl(r) => format!("(pushl {})", reg(r)),
            Instruction::Popl(r) => format!("(popl {})", reg(r)),
        };
        let _ = writeln!(out, "  {text}");
    }
    out.push_str(")\n");
    Ok(out)
}
