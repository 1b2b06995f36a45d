use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::isa::MachineState;

/// Assembled binary with its load address and symbol table.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProgramImage {
    pub base: u32,
    pub bytes: Vec<u8>,
    /// label name → absolute address, each within [base, base + len]
    pub symbols: BTreeMap<String, u32>,
}

impl ProgramImage {
    pub fn len(&self) -> usize {
        self.bytes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.bytes.is_empty()
    }

    /// First address past the image.
    pub fn end(&self) -> u32 {
        self.base.wrapping_add(self.bytes.len() as u32)
    }

    pub fn symbol(&self, name: &str) -> Option<u32> {
        self.symbols.get(name).copied()
    }
}

/// Serializes an image to the text format:
/// a `Y86PP1 <base-hex> <length>` header, hex byte pairs (16 per line),
/// then one `SYM <name> <addr-hex>` line per symbol.
pub fn write_image_text(img: &ProgramImage) -> String {
    let mut out = format!("Y86PP1 {:x} {}\n", img.base, img.bytes.len());
    for chunk in img.bytes.chunks(16) {
        for b in chunk {
            let _ = write!(out, "{b:02x}");
        }
        out.push('\n');
    }
    for (name, addr) in &img.symbols {
        let _ = writeln!(out, "SYM {name} {addr:x}");
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ImageError {
    pub line: usize,
    pub message: String,
}

fn ierr<T>(line: usize, message: impl Into<String>) -> Result<T, ImageError> {
    Err(ImageError { line, message: message.into() })
}

fn parse_hex_u32(s: &str, line: usize, what: &str) -> Result<u32, ImageError> {
    let digits = s.strip_prefix("0x").or_else(|| s.strip_prefix("0X")).unwrap_or(s);
    u32::from_str_radix(digits, 16)
        .map_err(|_| ImageError { line, message: format!("malformed {what} `{s}`") })
}

/// Parses the text image format. Whitespace-tolerant: hex bytes may be
/// split across lines arbitrarily.
pub fn parse_image_text(text: &str) -> Result<ProgramImage, ImageError> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
    let (hline, header) = lines
        .by_ref()
        .find(|(_, l)| !l.is_empty())
        .ok_or(ImageError { line: 1, message: "empty image file".into() })?;
    let fields: Vec<&str> = header.split_whitespace().collect();
    if fields.len() != 3 || fields[0] != "Y86PP1" {
        return ierr(hline, "expected header `Y86PP1 <base-hex> <length>`");
    }
    let base = parse_hex_u32(fields[1], hline, "base address")?;
    let length: usize = fields[2]
        .parse()
        .map_err(|_| ImageError { line: hline, message: format!("malformed length `{}`", fields[2]) })?;
    if base as u64 + length as u64 > 1 << 32 {
        return ierr(hline, "image runs past the end of the 32-bit address space");
    }

    let mut bytes = Vec::with_capacity(length);
    let mut symbols = BTreeMap::new();
    let mut in_symbols = false;
    for (lineno, line) in lines {
        if line.is_empty() {
            continue;
        }
        if line.starts_with("SYM") {
            in_symbols = true;
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return ierr(lineno, "expected `SYM <name> <addr-hex>`");
            }
            let addr = parse_hex_u32(fields[2], lineno, "symbol address")?;
            if (addr as u64) < base as u64 || addr as u64 > base as u64 + length as u64 {
                return ierr(lineno, format!("symbol `{}` lies outside the image", fields[1]));
            }
            if symbols.insert(fields[1].to_string(), addr).is_some() {
                return ierr(lineno, format!("duplicate symbol `{}`", fields[1]));
            }
        } else {
            if in_symbols {
                return ierr(lineno, "byte data after the symbol section");
            }
            let hex: String = line.split_whitespace().collect();
            if hex.len() % 2 != 0 {
                return ierr(lineno, "odd number of hex digits");
            }
            for pair in hex.as_bytes().chunks(2) {
                let s = std::str::from_utf8(pair).unwrap();
                let b = u8::from_str_radix(s, 16)
                    .map_err(|_| ImageError { line: lineno, message: format!("bad hex byte `{s}`") })?;
                bytes.push(b);
            }
        }
    }
    if bytes.len() != length {
        return ierr(
            hline,
            format!("header declares {length} bytes but {} are present", bytes.len()),
        );
    }
    Ok(ProgramImage { base, bytes, symbols })
}

/// Record of loaded regions so separate images cannot silently overlap.
#[derive(Debug, Clone, Default)]
pub struct LoadRegistry {
    regions: Vec<(u32, u32)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("image [{base:#010x}, +{len}) overlaps already-loaded region [{other_base:#010x}, +{other_len})")]
pub struct LoadError {
    pub base: u32,
    pub len: u32,
    pub other_base: u32,
    pub other_len: u32,
}

/// Copies image bytes into memory at the image base. The registry is the
/// caller's; it accumulates every successful load.
pub fn load_image(
    s: &mut MachineState,
    img: &ProgramImage,
    registry: &mut LoadRegistry,
) -> Result<(), LoadError> {
    let (b0, b1) = (img.base as u64, img.base as u64 + img.bytes.len() as u64);
    for &(ob, ol) in &registry.regions {
        let (o0, o1) = (ob as u64, ob as u64 + ol as u64);
        if b0 < o1 && o0 < b1 {
            return Err(LoadError {
                base: img.base,
                len: img.bytes.len() as u32,
                other_base: ob,
                other_len: ol,
            });
        }
    }
    registry.regions.push((img.base, img.bytes.len() as u32));
    s.memory.store(img.base, &img.bytes);
    Ok(())
}
