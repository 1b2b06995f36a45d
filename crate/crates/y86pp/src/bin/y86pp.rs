//! Command line front end: assemble, disassemble, run the table-setup
//! routines under the simulator, query the address translator, and
//! drive the execution-checking harness.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use sha2::{Digest, Sha256};

use y86pp::asm::{
    assemble, disassemble, parse_image_text, parse_program, write_image_text, ProgramImage,
};
use y86pp::isa::{decode, AluOp, Cond, Instruction, MachineState, Register, Status};
use y86pp::minvisor::{
    apply_delta, gen_params, oracle_create_nested_pt, parse_params_file, run_call,
    setup_call_from_image, NptParams, SetupFn, PDT_ENTRY_FLAGS,
};
use y86pp::paging::{va_to_pa, TranslationOutcome};
use y86pp::verifier::{specs::spec_for, verify, Verdict};

#[derive(Parser)]
#[command(name = "y86pp", version, about = "Y86++ simulator and nested-page-table toolkit")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Assemble a source file into a loadable image.
    Assemble {
        input: PathBuf,
        /// Load address of the image.
        #[arg(long, default_value = "0x1000", value_parser = parse_u32_arg)]
        base: u32,
        /// Output file; stdout when omitted.
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Disassemble an image back into source form.
    Disasm {
        input: PathBuf,
        #[arg(short, long)]
        output: Option<PathBuf>,
    },
    /// Load a setup routine image and run it to completion.
    Run {
        /// Image file holding one of the four setup routines at its
        /// entry symbol.
        image: PathBuf,
        #[command(flatten)]
        params: ParamsArg,
        #[arg(long, default_value_t = 1_000_000)]
        max_steps: u64,
        /// Print each instruction before it executes.
        #[arg(long)]
        trace: bool,
    },
    /// Translate virtual addresses through tables built by the
    /// reference model.
    Translate {
        #[command(flatten)]
        params: ParamsArg,
        /// Addresses to translate (decimal or 0x hex).
        #[arg(required = true, value_parser = parse_u32_arg)]
        addr: Vec<u32>,
        /// Leave supervisor mode on, making translation the identity.
        #[arg(long)]
        paging_off: bool,
    },
    /// Check one routine (or all four) against its specification over
    /// randomized table placements.
    Verify {
        /// init_pdpt, init_pdts, sec_not_present, create_nested_pt, or all.
        function: String,
        #[arg(long, default_value_t = 20)]
        trials: usize,
        #[arg(long, default_value_t = 0x59_86_70_70)]
        seed: u64,
        /// Check a single fixed placement instead of random ones.
        #[arg(long)]
        params: Option<PathBuf>,
        /// Also append the per-check lines to this file.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Print the page tables the reference model builds for a placement.
    DumpTables {
        #[command(flatten)]
        params: ParamsArg,
    },
}

#[derive(Args)]
struct ParamsArg {
    /// Table placement file (key = value lines).
    #[arg(long)]
    params: PathBuf,
}

enum CliError {
    /// The tool ran but the input was rejected or the run failed.
    Domain(String),
    /// Bad invocation: unreadable files, malformed configuration.
    Usage(String),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Domain(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.cmd {
        Cmd::Assemble { input, base, output } => cmd_assemble(&input, base, output.as_deref()),
        Cmd::Disasm { input, output } => cmd_disasm(&input, output.as_deref()),
        Cmd::Run { image, params, max_steps, trace } => {
            cmd_run(&image, &params.params, max_steps, trace)
        }
        Cmd::Translate { params, addr, paging_off } => {
            cmd_translate(&params.params, &addr, paging_off)
        }
        Cmd::Verify { function, trials, seed, params, report } => {
            cmd_verify(&function, trials, seed, params.as_deref(), report.as_deref())
        }
        Cmd::DumpTables { params } => cmd_dump_tables(&params.params),
    }
}

fn parse_u32_arg(s: &str) -> Result<u32, String> {
    let t = s.trim();
    let v = if let Some(h) = t.strip_prefix("0x").or_else(|| t.strip_prefix("0X")) {
        u64::from_str_radix(h, 16)
    } else {
        t.parse::<u64>()
    }
    .map_err(|e| format!("`{t}`: {e}"))?;
    u32::try_from(v).map_err(|_| format!("`{t}` does not fit in 32 bits"))
}

fn read_file(path: &std::path::Path) -> Result<String, CliError> {
    fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read {}: {e}", path.display())))
}

fn write_output(path: Option<&std::path::Path>, text: &str) -> Result<(), CliError> {
    match path {
        Some(p) => fs::write(p, text)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", p.display()))),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn load_params(path: &std::path::Path) -> Result<NptParams, CliError> {
    let text = read_file(path)?;
    parse_params_file(&text).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))
}

fn load_image(path: &std::path::Path) -> Result<ProgramImage, CliError> {
    let text = read_file(path)?;
    parse_image_text(&text).map_err(|e| CliError::Domain(format!("{}: {e}", path.display())))
}

fn cmd_assemble(
    input: &std::path::Path,
    base: u32,
    output: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let src = read_file(input)?;
    let items = parse_program(&src)
        .map_err(|e| CliError::Domain(format!("{}: {e}", input.display())))?;
    let img = assemble(&items, base)
        .map_err(|e| CliError::Domain(format!("{}: {e}", input.display())))?;
    write_output(output, &write_image_text(&img))
}

fn cmd_disasm(input: &std::path::Path, output: Option<&std::path::Path>) -> Result<(), CliError> {
    let img = load_image(input)?;
    let src = disassemble(&img).map_err(|e| CliError::Domain(e.to_string()))?;
    write_output(output, &src)
}

fn cmd_run(
    image_path: &std::path::Path,
    params_path: &std::path::Path,
    max_steps: u64,
    trace: bool,
) -> Result<(), CliError> {
    let img = load_image(image_path)?;
    let p = load_params(params_path)?;
    let f = SetupFn::ALL
        .into_iter()
        .find(|f| img.symbol(f.name()) == Some(img.base))
        .ok_or_else(|| {
            CliError::Domain(
                "image does not start at a known setup routine \
                 (expected one of init_pdpt, init_pdts, sec_not_present, create_nested_pt)"
                    .into(),
            )
        })?;
    let setup = setup_call_from_image(img, f, &p).map_err(|e| CliError::Domain(e.to_string()))?;

    let out = if trace {
        run_traced(&setup.state, max_steps)
    } else {
        run_call(&setup, max_steps)
    };

    println!("routine:        {}", f.name());
    println!("steps:          {}", out.steps);
    println!("esp low water:  {:#010x}", out.esp_low_water);
    match &out.state.status {
        Status::Halted => println!("status:         halted at sentinel"),
        Status::Running => println!("status:         still running (step budget exhausted)"),
        Status::Faulted(fi) => println!("status:         faulted: {fi:?}"),
    }
    println!("bytes changed:  {}", out.delta.len());
    println!("delta digest:   {}", delta_digest(&out.delta));

    match out.state.status {
        Status::Halted => Ok(()),
        Status::Running => Err(CliError::Domain(format!(
            "routine did not finish within {max_steps} steps"
        ))),
        Status::Faulted(fi) => Err(CliError::Domain(format!("routine faulted: {fi:?}"))),
    }
}

fn run_traced(s0: &MachineState, max_steps: u64) -> y86pp::minvisor::RunOutcome {
    let mut s = s0.clone();
    let mut steps = 0;
    let mut low = s.reg(Register::Esp);
    while s.status == Status::Running && steps < max_steps {
        match decode(&s) {
            Ok(i) => println!("{:#010x}: {}", s.eip, render_instr(&i)),
            Err(e) => println!("{:#010x}: <decode error: {e:?}>", s.eip),
        }
        y86pp::isa::step_mut(&mut s);
        steps += 1;
        low = low.min(s.reg(Register::Esp));
    }
    let delta = s.memory.delta_from(&s0.memory);
    y86pp::minvisor::RunOutcome { state: s, steps, esp_low_water: low, delta }
}

fn render_instr(i: &Instruction) -> String {
    let alu = |op: &AluOp| match op {
        AluOp::Add => "addl",
        AluOp::Sub => "subl",
        AluOp::And => "andl",
        AluOp::Xor => "xorl",
        AluOp::Or => "orl",
        AluOp::Adc => "adcl",
        AluOp::Cmp => "cmpl",
        AluOp::Sal => "sall",
        AluOp::Shr => "shrl",
    };
    let cond = |c: &Cond| match c {
        Cond::Always => "jmp",
        Cond::Le => "jle",
        Cond::L => "jl",
        Cond::E => "je",
        Cond::Ne => "jne",
        Cond::Ge => "jge",
        Cond::G => "jg",
        Cond::B => "jb",
        Cond::Be => "jbe",
    };
    match i {
        Instruction::Halt => "halt".into(),
        Instruction::Nop => "nop".into(),
        Instruction::Rrmovl { src, dst } => format!("rrmovl %{} %{}", src.name(), dst.name()),
        Instruction::Irmovl { imm, dst } => format!("irmovl {:#x} %{}", imm, dst.name()),
        Instruction::Rmmovl { src, disp, base } => {
            format!("rmmovl %{} {:#x}(%{})", src.name(), disp, base.name())
        }
        Instruction::Mrmovl { disp, base, dst } => {
            format!("mrmovl {:#x}(%{}) %{}", disp, base.name(), dst.name())
        }
        Instruction::Op(op, a, b) => format!("{} %{} %{}", alu(op), a.name(), b.name()),
        Instruction::Jcc(c, t) => format!("{} {:#x}", cond(c), t),
        Instruction::Call(t) => format!("call {t:#x}"),
        Instruction::Ret => "ret".into(),
        Instruction::Pushl(r) => format!("pushl %{}", r.name()),
        Instruction::Popl(r) => format!("popl %{}", r.name()),
    }
}

fn delta_digest(delta: &BTreeMap<u32, u8>) -> String {
    let mut h = Sha256::new();
    for (&a, &v) in delta {
        h.update(a.to_le_bytes());
        h.update([v]);
    }
    let out = h.finalize();
    out.iter().map(|b| format!("{b:02x}")).collect()
}

fn cmd_translate(
    params_path: &std::path::Path,
    addrs: &[u32],
    paging_off: bool,
) -> Result<(), CliError> {
    let p = load_params(params_path)?;
    let mut s = MachineState::default();
    apply_delta(&mut s.memory, &oracle_create_nested_pt(&p));
    s.cr3 = p.pdpt_base;
    s.guest_mode = !paging_off;
    for &a in addrs {
        match va_to_pa(a, &s) {
            TranslationOutcome::Physical(pa) => println!("{a:#010x} -> {pa:#010x}"),
            TranslationOutcome::PageFault(info) => {
                println!("{a:#010x} -> page fault (level {})", info.level)
            }
        }
    }
    Ok(())
}

fn cmd_verify(
    function: &str,
    trials: usize,
    seed: u64,
    params_path: Option<&std::path::Path>,
    report_path: Option<&std::path::Path>,
) -> Result<(), CliError> {
    let fns: Vec<SetupFn> = if function == "all" {
        SetupFn::ALL.to_vec()
    } else {
        vec![SetupFn::from_name(function).ok_or_else(|| {
            CliError::Usage(format!(
                "unknown function `{function}` \
                 (expected init_pdpt, init_pdts, sec_not_present, create_nested_pt, or all)"
            ))
        })?]
    };
    let fixed = match params_path {
        Some(p) => Some(load_params(p)?),
        None => None,
    };

    let mut lines = Vec::new();
    let mut all_pass = true;
    let mut checked = 0usize;
    let started = Instant::now();
    for f in fns {
        lines.push(format!("== {} ({trials} trials, seed {seed:#x}) ==", f.name()));
        let reports = verify(
            trials,
            seed,
            |rng| fixed.unwrap_or_else(|| gen_params(rng)),
            |p| {
                let (spec, setup) = spec_for(f, p).expect("generated placement is valid");
                (spec, setup.state)
            },
        );
        for r in &reports {
            checked += 1;
            if !r.verdict.is_pass() {
                all_pass = false;
            }
            lines.push(r.to_string());
        }
        let n_pass = reports.iter().filter(|r| r.verdict == Verdict::Pass).count();
        lines.push(format!(
            "   {} of {} checks pass",
            n_pass,
            reports.len()
        ));
    }
    lines.push(format!(
        "{} checks in {:.2}s: {}",
        checked,
        started.elapsed().as_secs_f64(),
        if all_pass { "all pass" } else { "FAILURES PRESENT" }
    ));

    let text = lines.join("\n") + "\n";
    print!("{text}");
    if let Some(rp) = report_path {
        fs::write(rp, &text)
            .map_err(|e| CliError::Usage(format!("cannot write {}: {e}", rp.display())))?;
    }
    if all_pass {
        Ok(())
    } else {
        Err(CliError::Domain("verification found failures".into()))
    }
}

fn cmd_dump_tables(params_path: &std::path::Path) -> Result<(), CliError> {
    let p = load_params(params_path)?;
    let mut s = MachineState::default();
    apply_delta(&mut s.memory, &oracle_create_nested_pt(&p));

    println!("pointer table @ {:#010x}:", p.pdpt_base);
    for t in 0..4u32 {
        let e = s.memory.read64_le(p.pdpt_base + 8 * t);
        println!("  [{t}] {e:#018x}");
    }
    for t in 0..4u32 {
        let base = p.pdt_bases[t as usize];
        let mut mapped = 0u32;
        let mut cleared = Vec::new();
        let mut other = Vec::new();
        for j in 0..512u32 {
            let e = s.memory.read64_le(base + 8 * j);
            let identity = ((t as u64 * 512 + j as u64) << 21) | PDT_ENTRY_FLAGS;
            if e == identity {
                mapped += 1;
            } else if e == 0 {
                cleared.push(j);
            } else {
                other.push(j);
            }
        }
        print!("table {t} @ {base:#010x}: {mapped} mapped");
        if !cleared.is_empty() {
            print!(
                ", not present [{}..{}]",
                cleared.first().unwrap(),
                cleared.last().unwrap()
            );
        }
        if !other.is_empty() {
            print!(", {} unexpected", other.len());
        }
        println!();
    }
    Ok(())
}
