use std::collections::BTreeMap;

use super::image::ProgramImage;
use super::parse::{AsmItem, AsmItemKind, SourceInstr, Target};
use crate::isa::Instruction;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum AsmError {
    #[error("line {line}: undefined label `:{name}`")]
    UndefinedLabel { name: String, line: usize },
    #[error("line {line}: duplicate label `:{name}`")]
    DuplicateLabel { name: String, line: usize },
    #[error("image starting at {base:#010x} runs past the end of the 32-bit address space")]
    ImageOverflow { base: u32 },
}

/// Two-pass assembly: pass 1 lays out addresses by summing encoded
/// lengths from `base`, pass 2 encodes with resolved absolute targets.
pub fn assemble(items: &[AsmItem], base: u32) -> Result<ProgramImage, AsmError> {
    let mut symbols: BTreeMap<String, u32> = BTreeMap::new();
    let mut addr = base as u64;
    for item in items {
        match &item.kind {
            AsmItemKind::Label(name) => {
                if symbols.insert(name.clone(), addr as u32).is_some() {
                    return Err(AsmError::DuplicateLabel { name: name.clone(), line: item.line });
                }
            }
            AsmItemKind::Instr(instr) => {
                addr += instr.encoded_len() as u64;
                if addr > 1 << 32 {
                    return Err(AsmError::ImageOverflow { base });
                }
            }
        }
    }

    let resolve = |t: &Target, line: usize| -> Result<u32, AsmError> {
        match t {
            Target::Abs(v) => Ok(*v),
            Target::Label(name) => symbols
                .get(name)
                .copied()
                .ok_or(AsmError::UndefinedLabel { name: name.clone(), line }),
        }
    };

    let mut bytes = Vec::new();
    for item in items {
        let instr = match &item.kind {
            AsmItemKind::Label(_) => continue,
            AsmItemKind::Instr(i) => i,
        };
        let encoded = match instr {
            SourceInstr::Halt => Instruction::Halt,
            SourceInstr::Nop => Instruction::Nop,
            SourceInstr::Ret => Instruction::Ret,
            SourceInstr::Rrmovl(src, dst) => Instruction::Rrmovl { src: *src, dst: *dst },
            SourceInstr::Irmovl(imm, dst) => Instruction::Irmovl { imm: *imm, dst: *dst },
            SourceInstr::Rmmovl(src, disp, b) => {
                Instruction::Rmmovl { src: *src, disp: *disp, base: *b }
            }
            SourceInstr::Mrmovl(disp, b, dst) => {
                Instruction::Mrmovl { disp: *disp, base: *b, dst: *dst }
            }
            SourceInstr::Op(op, ra, rb) => Instruction::Op(*op, *ra, *rb),
            SourceInstr::Jcc(c, t) => Instruction::Jcc(*c, resolve(t, item.line)?),
            SourceInstr::Call(t) => Instruction::Call(resolve(t, item.line)?),
            SourceInstr::Pushl(r) => Instruction::Pushl(*r),
            SourceInstr::Popl(r) => Instruction::Popl(*r),
        };
        bytes.extend(encoded.encode());
    }
    Ok(ProgramImage { base, bytes, symbols })
}
