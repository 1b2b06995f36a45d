use std::collections::HashSet;

use crate::isa::{AluOp, Cond, Register};

/// Jump/call destination as written: a label reference or an absolute
/// address.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Target {
    Label(String),
    Abs(u32),
}

/// Instruction as parsed from source. Mirrors `isa::Instruction` except
/// that control-flow targets may still be symbolic.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SourceInstr {
    Halt,
    Nop,
    Rrmovl(Register, Register),
    Irmovl(u32, Register),
    /// src, displacement, base: `(rmmovl :eax -24 (:ebp))`
    Rmmovl(Register, u32, Register),
    /// displacement, base, dst: `(mrmovl -24 (:ebp) :eax)`
    Mrmovl(u32, Register, Register),
    Op(AluOp, Register, Register),
    Jcc(Cond, Target),
    Call(Target),
    Ret,
    Pushl(Register),
    Popl(Register),
}

impl SourceInstr {
    pub fn encoded_len(&self) -> u32 {
        match self {
            SourceInstr::Halt | SourceInstr::Nop | SourceInstr::Ret => 1,
            SourceInstr::Rrmovl(..)
            | SourceInstr::Op(..)
            | SourceInstr::Pushl(..)
            | SourceInstr::Popl(..) => 2,
            SourceInstr::Jcc(..) | SourceInstr::Call(..) => 5,
            SourceInstr::Irmovl(..) | SourceInstr::Rmmovl(..) | SourceInstr::Mrmovl(..) => 6,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum AsmItemKind {
    Label(String),
    Instr(SourceInstr),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AsmItem {
    pub line: usize,
    pub col: usize,
    pub kind: AsmItemKind,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("line {line}, column {col}: {message}")]
pub struct ParseError {
    pub line: usize,
    pub col: usize,
    pub message: String,
}

fn err<T>(line: usize, col: usize, message: impl Into<String>) -> Result<T, ParseError> {
    Err(ParseError { line, col, message: message.into() })
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Tok {
    LParen,
    RParen,
    Atom(String),
}

#[derive(Debug, Clone)]
struct Token {
    tok: Tok,
    line: usize,
    col: usize,
}

fn tokenize(text: &str) -> Vec<Token> {
    let mut toks = Vec::new();
    let mut chars = text.chars().peekable();
    let (mut line, mut col) = (1usize, 1usize);
    while let Some(&c) = chars.peek() {
        match c {
            '\n' => {
                chars.next();
                line += 1;
                col = 1;
            }
            c if c.is_whitespace() => {
                chars.next();
                col += 1;
            }
            ';' => {
                while let Some(&c) = chars.peek() {
                    if c == '\n' {
                        break;
                    }
                    chars.next();
                    col += 1;
                }
            }
            '(' => {
                toks.push(Token { tok: Tok::LParen, line, col });
                chars.next();
                col += 1;
            }
            ')' => {
                toks.push(Token { tok: Tok::RParen, line, col });
                chars.next();
                col += 1;
            }
            _ => {
                let c0 = col;
                let mut atom = String::new();
                while let Some(&c) = chars.peek() {
                    if c.is_whitespace() || c == '(' || c == ')' || c == ';' {
                        break;
                    }
                    atom.push(c);
                    chars.next();
                    col += 1;
                }
                toks.push(Token { tok: Tok::Atom(atom), line, col: c0 });
            }
        }
    }
    toks
}

/// Numeric literal: optional sign, decimal digits, or `0x` hexadecimal
/// (an extension over the source dialect). Value taken mod 2^32.
fn parse_int(s: &str) -> Option<u32> {
    let (neg, rest) = match s.strip_prefix('-') {
        Some(r) => (true, r),
        None => (false, s),
    };
    if rest.is_empty() {
        return None;
    }
    let mag: i128 = if let Some(hex) = rest.strip_prefix("0x").or_else(|| rest.strip_prefix("0X"))
    {
        i128::from_str_radix(hex, 16).ok()?
    } else {
        if !rest.bytes().all(|b| b.is_ascii_digit()) {
            return None;
        }
        rest.parse().ok()?
    };
    let v = if neg { -mag } else { mag };
    Some(v.rem_euclid(1 << 32) as u32)
}

struct Parser {
    toks: Vec<Token>,
    pos: usize,
    end_line: usize,
}

impl Parser {
    fn peek(&self) -> Option<&Token> {
        self.toks.get(self.pos)
    }

    fn next(&mut self) -> Option<Token> {
        let t = self.toks.get(self.pos).cloned();
        if t.is_some() {
            self.pos += 1;
        }
        t
    }

    fn expect(&mut self, what: &str) -> Result<Token, ParseError> {
        match self.next() {
            Some(t) => Ok(t),
            None => err(self.end_line, 1, format!("unexpected end of input, expected {what}")),
        }
    }

    fn expect_lparen(&mut self, what: &str) -> Result<Token, ParseError> {
        let t = self.expect(what)?;
        match t.tok {
            Tok::LParen => Ok(t),
            _ => err(t.line, t.col, format!("expected {what}")),
        }
    }

    fn expect_rparen(&mut self, context: &str) -> Result<(), ParseError> {
        let t = self.expect("`)`")?;
        match t.tok {
            Tok::RParen => Ok(()),
            Tok::Atom(a) => err(t.line, t.col, format!("expected `)` {context}, found `{a}`")),
            Tok::LParen => err(t.line, t.col, format!("expected `)` {context}")),
        }
    }

    fn expect_atom(&mut self, what: &str) -> Result<(String, usize, usize), ParseError> {
        let t = self.expect(what)?;
        match t.tok {
            Tok::Atom(a) => Ok((a, t.line, t.col)),
            Tok::LParen => err(t.line, t.col, format!("expected {what}, found `(`")),
            Tok::RParen => err(t.line, t.col, format!("expected {what}, found `)`")),
        }
    }

    fn expect_reg(&mut self) -> Result<Register, ParseError> {
        let (a, line, col) = self.expect_atom("a register operand")?;
        let name = a
            .strip_prefix(':')
            .ok_or(ParseError { line, col, message: format!("expected register operand, found `{a}`") })?;
        Register::from_name(name)
            .ok_or(ParseError { line, col, message: format!("unknown register `:{name}`") })
    }

    fn expect_int(&mut self, what: &str) -> Result<u32, ParseError> {
        let (a, line, col) = self.expect_atom(what)?;
        parse_int(&a).ok_or(ParseError { line, col, message: format!("expected {what}, found `{a}`") })
    }

    fn expect_target(&mut self) -> Result<Target, ParseError> {
        let (a, line, col) = self.expect_atom("a jump target")?;
        if let Some(name) = a.strip_prefix(':') {
            if name.is_empty() {
                return err(line, col, "empty label name");
            }
            return Ok(Target::Label(name.to_string()));
        }
        match parse_int(&a) {
            Some(v) => Ok(Target::Abs(v)),
            None => err(line, col, format!("expected label or address, found `{a}`")),
        }
    }

    /// `disp (:reg)` — the displacement is mandatory, 0 written out.
    fn expect_memref(&mut self) -> Result<(u32, Register), ParseError> {
        let disp = self.expect_int("a displacement")?;
        self.expect_lparen("`(` of a memory operand")?;
        let base = self.expect_reg()?;
        self.expect_rparen("after the base register")?;
        Ok((disp, base))
    }

    fn parse_instr(&mut self) -> Result<SourceInstr, ParseError> {
        let (mnemonic, line, col) = self.expect_atom("a mnemonic")?;
        let instr = match mnemonic.as_str() {
            "halt" => SourceInstr::Halt,
            "nop" => SourceInstr::Nop,
            "ret" => SourceInstr::Ret,
            "rrmovl" => SourceInstr::Rrmovl(self.expect_reg()?, self.expect_reg()?),
            "irmovl" => {
                SourceInstr::Irmovl(self.expect_int("an immediate")?, self.expect_reg()?)
            }
            "rmmovl" => {
                let src = self.expect_reg()?;
                let (disp, base) = self.expect_memref()?;
                SourceInstr::Rmmovl(src, disp, base)
            }
            "mrmovl" => {
                let (disp, base) = self.expect_memref()?;
                SourceInstr::Mrmovl(disp, base, self.expect_reg()?)
            }
            "addl" => self.alu(AluOp::Add)?,
            "subl" => self.alu(AluOp::Sub)?,
            "andl" => self.alu(AluOp::And)?,
            "xorl" => self.alu(AluOp::Xor)?,
            "orl" => self.alu(AluOp::Or)?,
            "adcl" => self.alu(AluOp::Adc)?,
            "cmpl" => self.alu(AluOp::Cmp)?,
            "sall" => self.alu(AluOp::Sal)?,
            "shrl" => self.alu(AluOp::Shr)?,
            "jmp" => SourceInstr::Jcc(Cond::Always, self.expect_target()?),
            "jle" => SourceInstr::Jcc(Cond::Le, self.expect_target()?),
            "jl" => SourceInstr::Jcc(Cond::L, self.expect_target()?),
            "je" => SourceInstr::Jcc(Cond::E, self.expect_target()?),
            "jne" => SourceInstr::Jcc(Cond::Ne, self.expect_target()?),
            "jge" => SourceInstr::Jcc(Cond::Ge, self.expect_target()?),
            "jg" => SourceInstr::Jcc(Cond::G, self.expect_target()?),
            "jb" => SourceInstr::Jcc(Cond::B, self.expect_target()?),
            "jbe" => SourceInstr::Jcc(Cond::Be, self.expect_target()?),
            "call" => SourceInstr::Call(self.expect_target()?),
            "pushl" => SourceInstr::Pushl(self.expect_reg()?),
            "popl" => SourceInstr::Popl(self.expect_reg()?),
            other => return err(line, col, format!("unknown mnemonic `{other}`")),
        };
        self.expect_rparen(&format!("after the operands of `{mnemonic}`"))?;
        Ok(instr)
    }

    fn alu(&mut self, op: AluOp) -> Result<SourceInstr, ParseError> {
        Ok(SourceInstr::Op(op, self.expect_reg()?, self.expect_reg()?))
    }
}

/// Parses a source file: one or more top-level forms `(:name item*)`,
/// flattened into a single item sequence (each form name becomes a label).
/// Label names must be unique across the whole file.
pub fn parse_program(text: &str) -> Result<Vec<AsmItem>, ParseError> {
    let toks = tokenize(text);
    let end_line = text.lines().count().max(1);
    let mut p = Parser { toks, pos: 0, end_line };
    let mut items = Vec::new();
    let mut seen: HashSet<String> = HashSet::new();

    let mut define_label =
        |name: &str, line: usize, col: usize, items: &mut Vec<AsmItem>| -> Result<(), ParseError> {
            if Register::from_name(name).is_some() {
                return err(line, col, format!("register name `:{name}` cannot be a label"));
            }
            if !seen.insert(name.to_string()) {
                return err(line, col, format!("duplicate label `:{name}`"));
            }
            items.push(AsmItem { line, col, kind: AsmItemKind::Label(name.to_string()) });
            Ok(())
        };

    while p.peek().is_some() {
        p.expect_lparen("`(` opening a program form")?;
        let (head, line, col) = p.expect_atom("a program name label")?;
        let name = match head.strip_prefix(':') {
            Some(n) if !n.is_empty() => n,
            _ => return err(line, col, format!("expected `:name` after `(`, found `{head}`")),
        };
        define_label(name, line, col, &mut items)?;

        loop {
            let t = p.expect("an item or `)`")?;
            match t.tok {
                Tok::RParen => break,
                Tok::Atom(a) => match a.strip_prefix(':') {
                    Some(n) if !n.is_empty() => define_label(n, t.line, t.col, &mut items)?,
                    _ => return err(t.line, t.col, format!("expected a label or `(`, found `{a}`")),
                },
                Tok::LParen => {
                    let (il, ic) = (t.line, t.col);
                    let instr = p.parse_instr()?;
                    items.push(AsmItem { line: il, col: ic, kind: AsmItemKind::Instr(instr) });
                }
            }
        }
    }
    if items.is_empty() {
        return err(1, 1, "empty input: expected at least one program form");
    }
    Ok(items)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_form() {
        let items = parse_program("(:f (ret))").unwrap();
        assert_eq!(items.len(), 2);
        assert_eq!(items[0].kind, AsmItemKind::Label("f".into()));
        assert_eq!(items[1].kind, AsmItemKind::Instr(SourceInstr::Ret));
    }

    #[test]
    fn memory_operands_both_directions() {
        let items =
            parse_program("(:f (mrmovl -28 (:ebp) :valu1) (rmmovl :imme1 -24 (:ebp)))").unwrap();
        assert_eq!(
            items[1].kind,
            AsmItemKind::Instr(SourceInstr::Mrmovl(
                (-28i32) as u32,
                Register::Ebp,
                Register::Valu1
            ))
        );
        assert_eq!(
            items[2].kind,
            AsmItemKind::Instr(SourceInstr::Rmmovl(
                Register::Imme1,
                (-24i32) as u32,
                Register::Ebp
            ))
        );
    }

    #[test]
    fn immediate_only_for_irmovl() {
        let e = parse_program("(:f (addl 5 :eax))").unwrap_err();
        assert_eq!(e.line, 1);
        assert!(e.message.contains("expected register operand"), "{e}");
    }

    #[test]
    fn labels_and_jumps() {
        let items = parse_program("(:f :L1 (jmp :L1) (jne 31744))").unwrap();
        assert_eq!(items[1].kind, AsmItemKind::Label("L1".into()));
        assert_eq!(
            items[2].kind,
            AsmItemKind::Instr(SourceInstr::Jcc(Cond::Always, Target::Label("L1".into())))
        );
        assert_eq!(
            items[3].kind,
            AsmItemKind::Instr(SourceInstr::Jcc(Cond::Ne, Target::Abs(31744)))
        );
    }

    #[test]
    fn comments_and_whitespace_ignored() {
        let src = "; leading comment\n(:f ; after name\n  (nop) ; trailing\n)\n";
        let items = parse_program(src).unwrap();
        assert_eq!(items.len(), 2);
    }

    #[test]
    fn multiple_forms_share_label_space() {
        let items = parse_program("(:a (call :b)) (:b (ret))").unwrap();
        assert_eq!(items.len(), 4);
        let e = parse_program("(:a (ret)) (:a (ret))").unwrap_err();
        assert!(e.message.contains("duplicate label"), "{e}");
    }

    #[test]
    fn duplicate_label_position_reported() {
        let e = parse_program("(:f\n:L1\n:L1\n(ret))").unwrap_err();
        assert_eq!((e.line, e.col), (3, 1));
    }

    #[test]
    fn unknown_mnemonic_has_position() {
        let e = parse_program("(:f\n  (movl :eax :ebx))").unwrap_err();
        assert_eq!(e.line, 2);
        assert_eq!(e.col, 4);
        assert!(e.message.contains("unknown mnemonic `movl`"));
    }

    #[test]
    fn arity_errors() {
        let e = parse_program("(:f (addl :eax :ebx :ecx))").unwrap_err();
        assert!(e.message.contains("expected `)`"), "{e}");
        let e = parse_program("(:f (rrmovl :eax))").unwrap_err();
        assert!(e.message.contains("expected a register operand"), "{e}");
    }

    #[test]
    fn displacement_is_mandatory() {
        let e = parse_program("(:f (mrmovl (:eax) :eax))").unwrap_err();
        assert!(e.message.contains("expected a displacement"), "{e}");
    }

    #[test]
    fn numeric_literals() {
        assert_eq!(parse_int("231"), Some(231));
        assert_eq!(parse_int("-24"), Some(0xFFFF_FFE8));
        assert_eq!(parse_int("4294963200"), Some(0xFFFF_F000));
        assert_eq!(parse_int("4294967296"), Some(0)); // mod 2^32
        assert_eq!(parse_int("0x7C00"), Some(0x7C00));
        assert_eq!(parse_int("-0x10"), Some(0xFFFF_FFF0));
        assert_eq!(parse_int(""), None);
        assert_eq!(parse_int("12ab"), None);
        assert_eq!(parse_int("--5"), None);
    }

    #[test]
    fn truncated_input_reports_end() {
        let e = parse_program("(:f (pushl :ebp)").unwrap_err();
        assert!(e.message.contains("unexpected end of input"), "{e}");
    }

    #[test]
    fn register_name_rejected_as_label() {
        let e = parse_program("(:eax (ret))").unwrap_err();
        assert!(e.message.contains("cannot be a label"), "{e}");
    }
}
