//! Placement parameters for the table-setup routines.
//!
//! A parameter set fixes where the code image, the call stack, the page
//! tables, and the protected range live in physical memory. `validate`
//! enforces the layout rules the harness and the verifier both lean on;
//! everything downstream may assume a validated set.

use std::collections::HashSet;

use rand::Rng;

/// Bytes reserved below `stack_top` for the call frame and spill slots.
pub const STACK_RESERVE: u32 = 256;

/// Bytes reserved at `code_base` for the assembled image plus its
/// trailing halt byte.
pub const CODE_RESERVE: u32 = 4096;

const PAGE: u32 = 4096;
const TWO_MB: u32 = 1 << 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NptParams {
    pub pdpt_base: u32,
    pub pdt_bases: [u32; 4],
    pub pdt_array_base: u32,
    pub visor_start: u32,
    pub visor_size: u32,
    pub stack_top: u32,
    pub code_base: u32,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ParamError {
    #[error("{what} {addr:#010x} is not aligned to {align} bytes")]
    Misaligned {
        what: &'static str,
        addr: u32,
        align: u32,
    },
    #[error("visor size {0:#x} must be a non-zero multiple of 2MiB")]
    BadVisorSize(u32),
    #[error("visor range {start:#010x}+{size:#x} must end strictly inside its GiB slot")]
    VisorCrossesGib { start: u32, size: u32 },
    #[error("stack top {0:#010x} leaves no room for the reserved window")]
    StackTooLow(u32),
    #[error("{what} region at {base:#010x} runs past the 4GiB boundary")]
    OutOfRange { what: &'static str, base: u32 },
    #[error("{a} region at {a_base:#010x} overlaps {b} region at {b_base:#010x}")]
    Overlap {
        a: &'static str,
        a_base: u32,
        b: &'static str,
        b_base: u32,
    },
}

/// The disjoint scratch regions a parameter set claims, as
/// (name, base, length). The visor range is absent on purpose: it names
/// virtual addresses and may coincide with any of these.
pub fn regions(p: &NptParams) -> [(&'static str, u32, u32); 8] {
    [
        ("code", p.code_base, CODE_RESERVE),
        ("stack", p.stack_top.wrapping_sub(STACK_RESERVE), STACK_RESERVE),
        ("pdpt", p.pdpt_base, PAGE),
        ("pdt0", p.pdt_bases[0], PAGE),
        ("pdt1", p.pdt_bases[1], PAGE),
        ("pdt2", p.pdt_bases[2], PAGE),
        ("pdt3", p.pdt_bases[3], PAGE),
        ("pdt_array", p.pdt_array_base, 16),
    ]
}

pub fn validate(p: &NptParams) -> Result<(), ParamError> {
    let aligned = |what, addr: u32, align: u32| {
        if addr % align != 0 {
            Err(ParamError::Misaligned { what, addr, align })
        } else {
            Ok(())
        }
    };
    aligned("pdpt base", p.pdpt_base, PAGE)?;
    aligned("pdt0 base", p.pdt_bases[0], PAGE)?;
    aligned("pdt1 base", p.pdt_bases[1], PAGE)?;
    aligned("pdt2 base", p.pdt_bases[2], PAGE)?;
    aligned("pdt3 base", p.pdt_bases[3], PAGE)?;
    aligned("pdt array base", p.pdt_array_base, 4)?;
    aligned("stack top", p.stack_top, 4)?;
    aligned("visor start", p.visor_start, TWO_MB)?;

    if p.visor_size == 0 || p.visor_size % TWO_MB != 0 {
        return Err(ParamError::BadVisorSize(p.visor_size));
    }
    // The protected range must end strictly inside the GiB slot it
    // starts in. A range that touches the next GiB boundary would make
    // the end index wrap to zero in the unmapping loop and silently
    // protect nothing, so such placements are rejected outright.
    let start = p.visor_start as u64;
    let end = start + p.visor_size as u64;
    if start >> 30 != end >> 30 {
        return Err(ParamError::VisorCrossesGib {
            start: p.visor_start,
            size: p.visor_size,
        });
    }

    if p.stack_top < STACK_RESERVE {
        return Err(ParamError::StackTooLow(p.stack_top));
    }

    let rs = regions(p);
    for (what, base, len) in rs {
        if base as u64 + len as u64 > 1 << 32 {
            return Err(ParamError::OutOfRange { what, base });
        }
    }
    for i in 0..rs.len() {
        for j in i + 1..rs.len() {
            let (a, ab, al) = rs[i];
            let (b, bb, bl) = rs[j];
            let disjoint = ab as u64 + al as u64 <= bb as u64 || bb as u64 + bl as u64 <= ab as u64;
            if !disjoint {
                return Err(ParamError::Overlap {
                    a,
                    a_base: ab,
                    b,
                    b_base: bb,
                });
            }
        }
    }
    Ok(())
}

/// Draw a valid parameter set: eight distinct 4KiB pages for the
/// scratch regions and a 2MiB-aligned protected range that stays
/// strictly inside one GiB slot.
pub fn gen_params<R: Rng>(rng: &mut R) -> NptParams {
    let mut pages = HashSet::new();
    let mut next_page = || loop {
        let idx: u32 = rng.gen_range(0..1 << 20);
        if pages.insert(idx) {
            return idx << 12;
        }
    };
    let code_base = next_page();
    let stack_top = next_page() + PAGE;
    let pdpt_base = next_page();
    let pdt_bases = [next_page(), next_page(), next_page(), next_page()];
    let pdt_array_base = next_page();

    let gib: u32 = rng.gen_range(0..4);
    let slot: u32 = rng.gen_range(0..511);
    let count: u32 = rng.gen_range(1..=511 - slot);
    let p = NptParams {
        pdpt_base,
        pdt_bases,
        pdt_array_base,
        visor_start: (gib << 30) | (slot << 21),
        visor_size: count << 21,
        stack_top,
        code_base,
    };
    debug_assert_eq!(validate(&p), Ok(()));
    p
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}: {message}")]
pub struct ParamsFileError {
    pub line: usize,
    pub message: String,
}

const KEYS: [&str; 9] = [
    "pdpt_base",
    "pdt0_base",
    "pdt1_base",
    "pdt2_base",
    "pdt3_base",
    "pdt_array_base",
    "visor_start",
    "visor_size",
    "stack_top",
];

/// Parse a `key = value` parameter file. Values are decimal or 0x hex;
/// `#` starts a comment. All of `pdpt_base`, `pdt0_base`..`pdt3_base`,
/// `pdt_array_base`, `visor_start`, `visor_size`, `stack_top`, and
/// `code_base` must appear exactly once.
pub fn parse_params_file(text: &str) -> Result<NptParams, ParamsFileError> {
    let err = |line, message: String| ParamsFileError { line, message };
    let mut seen: Vec<(String, u32)> = Vec::new();
    for (idx, raw) in text.lines().enumerate() {
        let line = idx + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| err(line, format!("expected key = value, got {body:?}")))?;
        let key = key.trim();
        let value = value.trim();
        if !KEYS.contains(&key) && key != "code_base" {
            return Err(err(line, format!("unknown key {key:?}")));
        }
        if seen.iter().any(|(k, _)| k == key) {
            return Err(err(line, format!("duplicate key {key:?}")));
        }
        let parsed = if let Some(hex) = value.strip_prefix("0x").or_else(|| value.strip_prefix("0X")) {
            u64::from_str_radix(hex, 16)
        } else {
            value.parse::<u64>()
        }
        .map_err(|_| err(line, format!("bad numeric value {value:?}")))?;
        if parsed > u32::MAX as u64 {
            return Err(err(line, format!("value {value} does not fit in 32 bits")));
        }
        seen.push((key.to_string(), parsed as u32));
    }
    let lookup = |key: &str| {
        seen.iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| err(text.lines().count().max(1), format!("missing key {key:?}")))
    };
    Ok(NptParams {
        pdpt_base: lookup("pdpt_base")?,
        pdt_bases: [
            lookup("pdt0_base")?,
            lookup("pdt1_base")?,
            lookup("pdt2_base")?,
            lookup("pdt3_base")?,
        ],
        pdt_array_base: lookup("pdt_array_base")?,
        visor_start: lookup("visor_start")?,
        visor_size: lookup("visor_size")?,
        stack_top: lookup("stack_top")?,
        code_base: lookup("code_base")?,
    })
}

/// Render a parameter set in the format `parse_params_file` accepts.
pub fn params_to_text(p: &NptParams) -> String {
    format!(
        "pdpt_base = {:#x}\n\
         pdt0_base = {:#x}\n\
         pdt1_base = {:#x}\n\
         pdt2_base = {:#x}\n\
         pdt3_base = {:#x}\n\
         pdt_array_base = {:#x}\n\
         visor_start = {:#x}\n\
         visor_size = {:#x}\n\
         stack_top = {:#x}\n\
         code_base = {:#x}\n",
        p.pdpt_base,
        p.pdt_bases[0],
        p.pdt_bases[1],
        p.pdt_bases[2],
        p.pdt_bases[3],
        p.pdt_array_base,
        p.visor_start,
        p.visor_size,
        p.stack_top,
        p.code_base,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
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
    fn sample_is_valid() {
        assert_eq!(validate(&sample()), Ok(()));
    }

    #[test]
    fn rejects_misalignment() {
        let mut p = sample();
        p.pdpt_base += 8;
        assert!(matches!(validate(&p), Err(ParamError::Misaligned { .. })));
        let mut p = sample();
        p.visor_start += 4096;
        assert!(matches!(validate(&p), Err(ParamError::Misaligned { .. })));
    }

    #[test]
    fn rejects_bad_visor_extent() {
        let mut p = sample();
        p.visor_size = 0;
        assert_eq!(validate(&p), Err(ParamError::BadVisorSize(0)));
        let mut p = sample();
        p.visor_size = 0x10_0000;
        assert!(matches!(validate(&p), Err(ParamError::BadVisorSize(_))));
    }

    #[test]
    fn rejects_gib_crossing_and_boundary_touch() {
        // Crossing into the next GiB.
        let mut p = sample();
        p.visor_start = 0x7fe0_0000;
        p.visor_size = 0x40_0000;
        assert!(matches!(validate(&p), Err(ParamError::VisorCrossesGib { .. })));
        // Ending exactly on the next GiB boundary: the end index would
        // wrap to zero, so this placement is rejected too.
        let mut p = sample();
        p.visor_start = 0x7fe0_0000;
        p.visor_size = 0x20_0000;
        assert!(matches!(validate(&p), Err(ParamError::VisorCrossesGib { .. })));
        // Same shape one entry earlier is fine.
        let mut p = sample();
        p.visor_start = 0x7fc0_0000;
        p.visor_size = 0x20_0000;
        assert_eq!(validate(&p), Ok(()));
        // Wrapping past 4GiB is a special case of the same rule.
        let mut p = sample();
        p.visor_start = 0xffe0_0000;
        p.visor_size = 0x20_0000;
        assert!(matches!(validate(&p), Err(ParamError::VisorCrossesGib { .. })));
    }

    #[test]
    fn rejects_overlap() {
        let mut p = sample();
        p.pdt_bases[2] = p.pdpt_base;
        assert!(matches!(validate(&p), Err(ParamError::Overlap { .. })));
        let mut p = sample();
        p.code_base = p.stack_top - 64;
        assert!(matches!(validate(&p), Err(ParamError::Overlap { .. })));
    }

    #[test]
    fn visor_may_overlap_scratch_regions() {
        let mut p = sample();
        // Puts the protected range over the GiB slot holding every
        // scratch region; only virtual addresses are named, so this is
        // allowed.
        p.visor_start = 0;
        p.visor_size = 0x20_0000;
        assert_eq!(validate(&p), Ok(()));
    }

    #[test]
    fn generated_params_always_validate() {
        let mut rng = ChaCha8Rng::seed_from_u64(0x1117);
        for _ in 0..200 {
            let p = gen_params(&mut rng);
            assert_eq!(validate(&p), Ok(()));
            assert!(p.visor_size >= 1 << 21);
        }
    }

    #[test]
    fn params_file_round_trip() {
        let p = sample();
        let text = params_to_text(&p);
        assert_eq!(parse_params_file(&text), Ok(p));
    }

    #[test]
    fn params_file_reports_line_numbers() {
        let bad = "pdpt_base = 0x1000\nwhat is this\n";
        let e = parse_params_file(bad).unwrap_err();
        assert_eq!(e.line, 2);

        let dup = "pdpt_base = 0x1000\npdpt_base = 0x2000\n";
        let e = parse_params_file(dup).unwrap_err();
        assert_eq!(e.line, 2);

        let e = parse_params_file("visor_size = bananas\n").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.to_string().contains("bananas"));

        let e = parse_params_file("pdpt_base = 0x1000\n").unwrap_err();
        assert!(e.message.contains("missing key"));
    }

    #[test]
    fn params_file_accepts_comments_and_decimal() {
        let text = "\
# layout
pdpt_base = 0x20000   # the pointer table
pdt0_base = 135168
pdt1_base = 0x22000
pdt2_base = 0x23000
pdt3_base = 0x24000
pdt_array_base = 0x25000
visor_start = 0x40200000
visor_size = 4194304
stack_top = 0x80000
code_base = 0x7000
";
        let p = parse_params_file(text).unwrap();
        assert_eq!(p.pdt_bases[0], 0x21000);
        assert_eq!(p.visor_size, 0x40_0000);
        assert_eq!(validate(&p), Ok(()));
    }
}
