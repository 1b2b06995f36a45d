//! Drives the C ABI exactly as a foreign caller would: through the
//! exported functions and raw pointers, never through the core crate's
//! Rust API (except to assemble test programs).

use std::ffi::CStr;
use std::ptr;

use y86pp_ffi::*;

fn last_error() -> String {
    unsafe { CStr::from_ptr(y86pp_last_error()) }
        .to_string_lossy()
        .into_owned()
}

/// irmovl 7 eax; irmovl 35 ecx; addl ecx eax; halt
const PROGRAM: [u8; 13] = [
    0x30, 0xF0, 0x07, 0x00, 0x00, 0x00, //
    0x30, 0xF1, 0x23, 0x00, 0x00, 0x00, //
    0x00,
];

#[test]
fn load_run_and_inspect() {
    let m = y86pp_machine_new();
    assert!(!m.is_null());

    let mut prog = PROGRAM.to_vec();
    // Patch in the addl between the moves and the halt.
    prog.splice(12..12, [0x60, 0x10]);
    assert_eq!(
        y86pp_machine_load_program(m, prog.as_ptr(), prog.len(), 0x400),
        Y86Status::Ok
    );

    let mut steps = 0u64;
    assert_eq!(y86pp_machine_run(m, 100, &mut steps), Y86Status::Halted);
    assert_eq!(steps, 4);

    let mut eax = 0u32;
    assert_eq!(y86pp_machine_get_reg(m, 0, &mut eax), Y86Status::Ok);
    assert_eq!(eax, 42);

    let mut eip = 0u32;
    assert_eq!(y86pp_machine_get_eip(m, &mut eip), Y86Status::Ok);
    assert_eq!(eip, 0x400 + 14, "halt leaves eip at the halt instruction");

    assert_eq!(y86pp_machine_status(m), Y86Status::Halted);
    y86pp_machine_free(m);
}

#[test]
fn out_of_gas_is_reported() {
    let m = y86pp_machine_new();
    // A one-instruction loop: jmp to itself.
    let base = 0x2000u32;
    let mut prog = vec![0x70];
    prog.extend(base.to_le_bytes());
    assert_eq!(
        y86pp_machine_load_program(m, prog.as_ptr(), prog.len(), base),
        Y86Status::Ok
    );
    let mut steps = 0u64;
    assert_eq!(y86pp_machine_run(m, 25, &mut steps), Y86Status::OutOfGas);
    assert_eq!(steps, 25);
    assert!(last_error().contains("25"), "{}", last_error());
    y86pp_machine_free(m);
}

#[test]
fn memory_round_trips_and_defaults_to_zero() {
    let m = y86pp_machine_new();
    let data = [1u8, 2, 3, 4, 5];
    assert_eq!(y86pp_machine_write_mem(m, 0xFFFF_0000, data.as_ptr(), 5), Y86Status::Ok);
    let mut back = [0u8; 8];
    assert_eq!(
        y86pp_machine_read_mem(m, 0xFFFF_0000, back.as_mut_ptr(), 8),
        Y86Status::Ok
    );
    assert_eq!(back, [1, 2, 3, 4, 5, 0, 0, 0]);

    // Reads and writes must not run off the end of the address space.
    assert_eq!(
        y86pp_machine_read_mem(m, 0xFFFF_FFFF, back.as_mut_ptr(), 2),
        Y86Status::BadArgument
    );
    y86pp_machine_free(m);
}

#[test]
fn translation_uses_the_paging_state() {
    let m = y86pp_machine_new();
    // Supervisor mode: identity.
    let mut pa = 0u32;
    assert_eq!(y86pp_machine_va_to_pa(m, 0x1234_5678, &mut pa), Y86Status::Ok);
    assert_eq!(pa, 0x1234_5678);

    // Guest mode with empty tables: nothing is present.
    assert_eq!(y86pp_machine_set_cr3(m, 0x9000), Y86Status::Ok);
    assert_eq!(y86pp_machine_set_guest_mode(m, true), Y86Status::Ok);
    assert_eq!(y86pp_machine_va_to_pa(m, 0x1234_5678, &mut pa), Y86Status::PageFault);
    assert!(last_error().contains("level 1"), "{}", last_error());

    // Plant a pointer entry and a directory entry mapping the address
    // onto frame 0x7, then retranslate.
    let (gib, slot, off) = (0x1234_5678u32 >> 30, (0x1234_5678u32 >> 21) & 0x1ff, 0x1234_5678u32 & 0x1f_ffff);
    let pdpte = (0xA000u64 | 1).to_le_bytes();
    assert_eq!(
        y86pp_machine_write_mem(m, 0x9000 + 8 * gib, pdpte.as_ptr(), 8),
        Y86Status::Ok
    );
    let pdte = ((7u64 << 21) | 1).to_le_bytes();
    assert_eq!(
        y86pp_machine_write_mem(m, 0xA000 + 8 * slot, pdte.as_ptr(), 8),
        Y86Status::Ok
    );
    assert_eq!(y86pp_machine_va_to_pa(m, 0x1234_5678, &mut pa), Y86Status::Ok);
    assert_eq!(pa, (7 << 21) | off);
    y86pp_machine_free(m);
}

#[test]
fn null_and_bad_arguments_are_rejected() {
    assert_eq!(y86pp_machine_status(ptr::null()), Y86Status::NullPointer);
    assert_eq!(y86pp_machine_step(ptr::null_mut()), Y86Status::NullPointer);
    assert!(last_error().contains("null"));
    y86pp_machine_free(ptr::null_mut()); // must not crash

    let m = y86pp_machine_new();
    let mut v = 0u32;
    assert_eq!(y86pp_machine_get_reg(m, 10, &mut v), Y86Status::BadArgument);
    assert!(last_error().contains("10"), "{}", last_error());
    assert_eq!(y86pp_machine_get_reg(m, 4, ptr::null_mut()), Y86Status::NullPointer);
    assert_eq!(y86pp_machine_load_program(m, ptr::null(), 4, 0), Y86Status::NullPointer);
    y86pp_machine_free(m);
}

#[test]
fn reset_clears_execution_state() {
    let m = y86pp_machine_new();
    let prog = [0x00u8]; // halt
    y86pp_machine_load_program(m, prog.as_ptr(), 1, 0x100);
    assert_eq!(y86pp_machine_run(m, 10, ptr::null_mut()), Y86Status::Halted);
    assert_eq!(y86pp_machine_reset(m), Y86Status::Ok);
    assert_eq!(y86pp_machine_status(m), Y86Status::Ok);
    let mut eip = 1u32;
    y86pp_machine_get_eip(m, &mut eip);
    assert_eq!(eip, 0);
    let mut b = 9u8;
    y86pp_machine_read_mem(m, 0x100, &mut b, 1);
    assert_eq!(b, 0, "reset drops loaded code");
    y86pp_machine_free(m);
}
