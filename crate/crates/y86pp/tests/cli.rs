//! End-to-end runs of the command line binary: real process spawns,
//! real files, exit codes checked against the documented contract
//! (0 success, 1 domain failure, 2 bad invocation).

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_y86pp"))
}

fn programs_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("..")
        .join("..")
        .join("programs")
}

const PARAMS: &str = "\
# sample placement
pdpt_base      = 0x20000
pdt0_base      = 0x21000
pdt1_base      = 0x22000
pdt2_base      = 0x23000
pdt3_base      = 0x24000
pdt_array_base = 0x25000
visor_start    = 0x40200000
visor_size     = 0x400000
stack_top      = 0x80000
code_base      = 0x7000
";

fn write_params(dir: &Path) -> PathBuf {
    let p = dir.join("sample.params");
    std::fs::write(&p, PARAMS).unwrap();
    p
}

fn stdout_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr_of(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn assemble_disasm_reassemble_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let img1 = dir.path().join("a.img");
    let src2 = dir.path().join("b.y86");
    let img2 = dir.path().join("b.img");

    let out = bin()
        .args(["assemble"])
        .arg(programs_dir().join("init_pdts.y86"))
        .args(["--base", "0x7000", "-o"])
        .arg(&img1)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = bin().arg("disasm").arg(&img1).arg("-o").arg(&src2).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = bin()
        .args(["assemble"])
        .arg(&src2)
        .args(["--base", "0x7000", "-o"])
        .arg(&img2)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let t1 = std::fs::read_to_string(&img1).unwrap();
    let t2 = std::fs::read_to_string(&img2).unwrap();
    let strip = |t: &str| {
        t.lines()
            .filter(|l| !l.starts_with("SYM "))
            .collect::<Vec<_>>()
            .join("\n")
    };
    assert_eq!(strip(&t1), strip(&t2), "byte content must survive the round trip");
}

#[test]
fn run_reports_a_clean_halt() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let img = dir.path().join("f.img");
    let out = bin()
        .arg("assemble")
        .arg(programs_dir().join("create_nested_pt.y86"))
        .args(["--base", "0x7000", "-o"])
        .arg(&img)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));

    let out = bin().arg("run").arg(&img).arg("--params").arg(&params).output().unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("routine:        create_nested_pt"), "{text}");
    assert!(text.contains("halted at sentinel"), "{text}");
    assert!(text.contains("delta digest:"), "{text}");
}

#[test]
fn run_rejects_an_image_loaded_at_the_wrong_base() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let img = dir.path().join("f.img");
    bin()
        .arg("assemble")
        .arg(programs_dir().join("init_pdpt.y86"))
        .args(["--base", "0x9000", "-o"])
        .arg(&img)
        .output()
        .unwrap();
    let out = bin().arg("run").arg(&img).arg("--params").arg(&params).output().unwrap();
    assert_eq!(out.status.code(), Some(1), "{}", stderr_of(&out));
}

#[test]
fn run_is_deterministic_across_invocations() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let img = dir.path().join("f.img");
    bin()
        .arg("assemble")
        .arg(programs_dir().join("init_pdts.y86"))
        .args(["--base", "0x7000", "-o"])
        .arg(&img)
        .output()
        .unwrap();
    let one = stdout_of(&bin().arg("run").arg(&img).arg("--params").arg(&params).output().unwrap());
    let two = stdout_of(&bin().arg("run").arg(&img).arg("--params").arg(&params).output().unwrap());
    assert_eq!(one, two);
}

#[test]
fn trace_prints_the_prologue() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let img = dir.path().join("f.img");
    bin()
        .arg("assemble")
        .arg(programs_dir().join("init_pdpt.y86"))
        .args(["--base", "0x7000", "-o"])
        .arg(&img)
        .output()
        .unwrap();
    let out = bin()
        .arg("run")
        .arg(&img)
        .arg("--params")
        .arg(&params)
        .arg("--trace")
        .output()
        .unwrap();
    let text = stdout_of(&out);
    assert!(text.starts_with("0x00007000: pushl %ebp"), "{text}");
    assert!(text.contains("rrmovl %esp %ebp"), "{text}");
}

#[test]
fn translate_walks_the_reference_tables() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let out = bin()
        .args(["translate", "--params"])
        .arg(&params)
        .args(["0x100", "0x40200000", "0x405fffff", "0x40600000"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("0x00000100 -> 0x00000100"), "{text}");
    assert!(text.contains("0x40200000 -> page fault (level 2)"), "{text}");
    assert!(text.contains("0x405fffff -> page fault (level 2)"), "{text}");
    assert!(text.contains("0x40600000 -> 0x40600000"), "{text}");
}

#[test]
fn verify_passes_and_writes_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let report = dir.path().join("report.txt");
    let out = bin()
        .args(["verify", "init_pdpt", "--trials", "2", "--seed", "5", "--report"])
        .arg(&report)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    let text = stdout_of(&out);
    assert!(text.contains("all pass"), "{text}");
    assert_eq!(std::fs::read_to_string(&report).unwrap(), text);
}

#[test]
fn verify_accepts_a_fixed_placement() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let out = bin()
        .args(["verify", "sec_not_present", "--trials", "1", "--params"])
        .arg(&params)
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr_of(&out));
    assert!(stdout_of(&out).contains("all pass"));
}

#[test]
fn usage_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    // Unknown routine name.
    let out = bin().args(["verify", "frobnicate"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("unknown function"));

    // Unreadable params file.
    let out = bin()
        .args(["translate", "--params", "/nonexistent/x.params", "0x0"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));

    // Malformed params file: the message carries a line number.
    let bad = dir.path().join("bad.params");
    std::fs::write(&bad, "pdpt_base = 0x1000\nwat\n").unwrap();
    let out = bin().args(["translate", "--params"]).arg(&bad).args(["0x0"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr_of(&out).contains("line 2"), "{}", stderr_of(&out));
}

#[test]
fn malformed_assembly_exits_with_one_and_a_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let src = dir.path().join("bad.y86");
    std::fs::write(&src, "(:f\n  (movq :eax :ebx))\n").unwrap();
    let out = bin().arg("assemble").arg(&src).output().unwrap();
    assert_eq!(out.status.code(), Some(1));
    let err = stderr_of(&out);
    assert!(err.contains("line 2"), "{err}");
    assert!(err.contains("movq"), "{err}");
}

#[test]
fn dump_tables_shows_the_unmapped_window() {
    let dir = tempfile::tempdir().unwrap();
    let params = write_params(dir.path());
    let out = bin().args(["dump-tables", "--params"]).arg(&params).output().unwrap();
    assert!(out.status.success());
    let text = stdout_of(&out);
    assert!(text.contains("[1] 0x0000000000022001"), "{text}");
    assert!(text.contains("table 1 @ 0x00022000: 510 mapped, not present [1..2]"), "{text}");
}
