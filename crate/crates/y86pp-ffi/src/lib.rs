//! C ABI over the simulator: an opaque machine handle, integer status
//! codes, and a per-thread error message. The generated header lands
//! in include/y86pp.h.
//!
//! Pointer contract: every function tolerates null handles and null
//! out-pointers by returning `NullPointer` instead of crashing. The
//! string returned by `y86pp_last_error` lives until the next failing
//! call on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CString};

use y86pp::isa::{step_mut, MachineState, Register, Status, ALL_REGISTERS};
use y86pp::paging::{va_to_pa, TranslationOutcome};

/// A complete simulated machine: registers, flags, translation state,
/// and sparse memory.
pub struct Y86Machine {
    state: MachineState,
}

/// Result of an API call. Non-negative values describe machine or
/// translation outcomes; negative values are caller errors.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Y86Status {
    Ok = 0,
    /// The machine executed a halt instruction.
    Halted = 1,
    /// The machine faulted; details via y86pp_last_error.
    Faulted = 2,
    /// A run call used up its step budget with the machine still running.
    OutOfGas = 3,
    /// Translation hit a not-present entry; details via y86pp_last_error.
    PageFault = 4,
    NullPointer = -1,
    BadArgument = -2,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let c = CString::new(msg.into()).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn fail(status: Y86Status, msg: impl Into<String>) -> Y86Status {
    set_error(msg);
    status
}

/// Message for the most recent failing call on this thread; empty
/// string when nothing failed yet.
#[no_mangle]
pub extern "C" fn y86pp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

#[no_mangle]
pub extern "C" fn y86pp_machine_new() -> *mut Y86Machine {
    Box::into_raw(Box::new(Y86Machine { state: MachineState::new() }))
}

#[no_mangle]
pub extern "C" fn y86pp_machine_free(m: *mut Y86Machine) {
    if !m.is_null() {
        drop(unsafe { Box::from_raw(m) });
    }
}

/// Returns the machine to power-on state: zero registers, empty
/// memory, eip 0, supervisor mode.
#[no_mangle]
pub extern "C" fn y86pp_machine_reset(m: *mut Y86Machine) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    m.state = MachineState::new();
    Y86Status::Ok
}

/// Copies `len` code bytes to `base` and points eip there. The machine
/// is set running; registers and the rest of memory are untouched.
#[no_mangle]
pub extern "C" fn y86pp_machine_load_program(
    m: *mut Y86Machine,
    bytes: *const u8,
    len: usize,
    base: u32,
) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    if bytes.is_null() && len > 0 {
        return fail(Y86Status::NullPointer, "null program bytes");
    }
    if base as u64 + len as u64 > 1 << 32 {
        return fail(
            Y86Status::BadArgument,
            "program runs past the end of the address space",
        );
    }
    let src = if len == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(bytes, len) } };
    for (k, &b) in src.iter().enumerate() {
        m.state.memory.write8(base + k as u32, b);
    }
    m.state.eip = base;
    m.state.status = Status::Running;
    Y86Status::Ok
}

fn reg_of(index: u32) -> Option<Register> {
    ALL_REGISTERS.get(index as usize).copied()
}

/// Register indices: 0 eax, 1 ecx, 2 edx, 3 ebx, 4 esp, 5 ebp, 6 esi,
/// 7 edi, 8 imme1, 9 valu1.
#[no_mangle]
pub extern "C" fn y86pp_machine_get_reg(
    m: *const Y86Machine,
    reg: u32,
    out: *mut u32,
) -> Y86Status {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    let Some(out) = (unsafe { out.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null out-pointer");
    };
    let Some(r) = reg_of(reg) else {
        return fail(Y86Status::BadArgument, format!("no register has index {reg}"));
    };
    *out = m.state.reg(r);
    Y86Status::Ok
}

#[no_mangle]
pub extern "C" fn y86pp_machine_set_reg(m: *mut Y86Machine, reg: u32, value: u32) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    let Some(r) = reg_of(reg) else {
        return fail(Y86Status::BadArgument, format!("no register has index {reg}"));
    };
    m.state.set_reg(r, value);
    Y86Status::Ok
}

#[no_mangle]
pub extern "C" fn y86pp_machine_get_eip(m: *const Y86Machine, out: *mut u32) -> Y86Status {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    let Some(out) = (unsafe { out.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null out-pointer");
    };
    *out = m.state.eip;
    Y86Status::Ok
}

#[no_mangle]
pub extern "C" fn y86pp_machine_set_eip(m: *mut Y86Machine, eip: u32) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    m.state.eip = eip;
    Y86Status::Ok
}

#[no_mangle]
pub extern "C" fn y86pp_machine_set_cr3(m: *mut Y86Machine, cr3: u32) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    m.state.cr3 = cr3;
    Y86Status::Ok
}

/// Guest mode routes every memory access through the nested page
/// tables; supervisor mode (the default) is untranslated.
#[no_mangle]
pub extern "C" fn y86pp_machine_set_guest_mode(m: *mut Y86Machine, enabled: bool) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    m.state.guest_mode = enabled;
    Y86Status::Ok
}

/// Reads physical memory bytes; unwritten locations read as zero.
#[no_mangle]
pub extern "C" fn y86pp_machine_read_mem(
    m: *const Y86Machine,
    addr: u32,
    buf: *mut u8,
    len: usize,
) -> Y86Status {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    if buf.is_null() && len > 0 {
        return fail(Y86Status::NullPointer, "null buffer");
    }
    if addr as u64 + len as u64 > 1 << 32 {
        return fail(Y86Status::BadArgument, "read runs past the end of the address space");
    }
    let dst = if len == 0 { &mut [][..] } else { unsafe { std::slice::from_raw_parts_mut(buf, len) } };
    for (k, b) in dst.iter_mut().enumerate() {
        *b = m.state.memory.read8(addr + k as u32);
    }
    Y86Status::Ok
}

#[no_mangle]
pub extern "C" fn y86pp_machine_write_mem(
    m: *mut Y86Machine,
    addr: u32,
    buf: *const u8,
    len: usize,
) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    if buf.is_null() && len > 0 {
        return fail(Y86Status::NullPointer, "null buffer");
    }
    if addr as u64 + len as u64 > 1 << 32 {
        return fail(Y86Status::BadArgument, "write runs past the end of the address space");
    }
    let src = if len == 0 { &[][..] } else { unsafe { std::slice::from_raw_parts(buf, len) } };
    for (k, &b) in src.iter().enumerate() {
        m.state.memory.write8(addr + k as u32, b);
    }
    Y86Status::Ok
}

fn status_of(s: &MachineState) -> Y86Status {
    match &s.status {
        Status::Running => Y86Status::Ok,
        Status::Halted => Y86Status::Halted,
        Status::Faulted(info) => {
            set_error(format!("machine fault: {info:?}"));
            Y86Status::Faulted
        }
    }
}

/// Current execution state without running anything: Ok while the
/// machine can still step.
#[no_mangle]
pub extern "C" fn y86pp_machine_status(m: *const Y86Machine) -> Y86Status {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    status_of(&m.state)
}

/// Executes one instruction. Stepping a halted or faulted machine is a
/// no-op that reports the standing state.
#[no_mangle]
pub extern "C" fn y86pp_machine_step(m: *mut Y86Machine) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    step_mut(&mut m.state);
    status_of(&m.state)
}

/// Runs until halt, fault, or `max_steps` instructions. The number of
/// instructions executed is written to `steps_out` when non-null.
#[no_mangle]
pub extern "C" fn y86pp_machine_run(
    m: *mut Y86Machine,
    max_steps: u64,
    steps_out: *mut u64,
) -> Y86Status {
    let Some(m) = (unsafe { m.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    let mut n = 0u64;
    while m.state.status == Status::Running && n < max_steps {
        step_mut(&mut m.state);
        n += 1;
    }
    if let Some(out) = unsafe { steps_out.as_mut() } {
        *out = n;
    }
    match status_of(&m.state) {
        Y86Status::Ok => fail(
            Y86Status::OutOfGas,
            format!("still running after {max_steps} steps"),
        ),
        other => other,
    }
}

/// Translates a virtual address through the machine's current paging
/// state. In supervisor mode this is the identity.
#[no_mangle]
pub extern "C" fn y86pp_machine_va_to_pa(
    m: *const Y86Machine,
    va: u32,
    pa_out: *mut u32,
) -> Y86Status {
    let Some(m) = (unsafe { m.as_ref() }) else {
        return fail(Y86Status::NullPointer, "null machine handle");
    };
    let Some(pa_out) = (unsafe { pa_out.as_mut() }) else {
        return fail(Y86Status::NullPointer, "null out-pointer");
    };
    match va_to_pa(va, &m.state) {
        TranslationOutcome::Physical(pa) => {
            *pa_out = pa;
            Y86Status::Ok
        }
        TranslationOutcome::PageFault(info) => fail(
            Y86Status::PageFault,
            format!("page fault at {:#010x}, level {}", info.addr, info.level),
        ),
    }
}
