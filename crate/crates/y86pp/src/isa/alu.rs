use super::Flags;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AluOp {
    Add,
    Sub,
    And,
    Xor,
    Or,
    Adc,
    Cmp,
    Sal,
    Shr,
}

impl AluOp {
    pub fn mnemonic(self) -> &'static str {
        match self {
            AluOp::Add => "addl",
            AluOp::Sub => "subl",
            AluOp::And => "andl",
            AluOp::Xor => "xorl",
            AluOp::Or => "orl",
            AluOp::Adc => "adcl",
            AluOp::Cmp => "cmpl",
            AluOp::Sal => "sall",
            AluOp::Shr => "shrl",
        }
    }
}

/// Computes `b op a` (destination is the second operand) and the resulting
/// flags. Takes the full incoming flag record because a shift by zero
/// leaves every flag unchanged; non-shift ops ignore everything but CF.
///
/// cmpl returns the subtraction result; the caller discards the write-back.
pub fn alu_exec(op: AluOp, a: u32, b: u32, flags_in: Flags) -> (u32, Flags) {
    let arith = |result: u32, cf: bool, signed_wide: i64| -> (u32, Flags) {
        let of = signed_wide != (result as i32) as i64;
        (
            result,
            Flags { zf: result == 0, sf: (result as i32) < 0, of, cf },
        )
    };
    match op {
        AluOp::Add => {
            let wide = b as u64 + a as u64;
            arith(wide as u32, wide > u32::MAX as u64, (b as i32) as i64 + (a as i32) as i64)
        }
        AluOp::Adc => {
            let c = flags_in.cf as u64;
            let wide = b as u64 + a as u64 + c;
            arith(
                wide as u32,
                wide > u32::MAX as u64,
                (b as i32) as i64 + (a as i32) as i64 + c as i64,
            )
        }
        AluOp::Sub | AluOp::Cmp => {
            let result = b.wrapping_sub(a);
            arith(result, b < a, (b as i32) as i64 - (a as i32) as i64)
        }
        AluOp::And => logical(b & a),
        AluOp::Xor => logical(b ^ a),
        AluOp::Or => logical(b | a),
        AluOp::Sal => {
            let k = a % 32;
            if k == 0 {
                return (b, flags_in);
            }
            let result = b << k;
            let cf = (b >> (32 - k)) & 1 == 1;
            (result, Flags { zf: result == 0, sf: (result as i32) < 0, of: false, cf })
        }
        AluOp::Shr => {
            let k = a % 32;
            if k == 0 {
                return (b, flags_in);
            }
            let result = b >> k;
            let cf = (b >> (k - 1)) & 1 == 1;
            (result, Flags { zf: result == 0, sf: (result as i32) < 0, of: false, cf })
        }
    }
}

fn logical(result: u32) -> (u32, Flags) {
    (
        result,
        Flags { zf: result == 0, sf: (result as i32) < 0, of: false, cf: false },
    )
}
