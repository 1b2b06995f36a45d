//! Two-pass assembler and disassembler for the parenthesized Y86++
//! assembly dialect, plus the on-disk image format.

mod disasm;
mod encode;
mod image;
mod parse;

pub use disasm::{disassemble, DisasmError};
pub use encode::{assemble, AsmError};
pub use image::{
    load_image, parse_image_text, write_image_text, ImageError, LoadError, LoadRegistry,
    ProgramImage,
};
pub use parse::{parse_program, AsmItem, AsmItemKind, ParseError, SourceInstr, Target};
