#ifndef Y86PP_H
#define Y86PP_H

/* Generated from the Rust sources by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of an API call. Non-negative values describe machine or
// translation outcomes; negative values are caller errors.
typedef enum Y86Status {
  Y86_STATUS_OK = 0,
  // The machine executed a halt instruction.
  Y86_STATUS_HALTED = 1,
  // The machine faulted; details via y86pp_last_error.
  Y86_STATUS_FAULTED = 2,
  // A run call used up its step budget with the machine still running.
  Y86_STATUS_OUT_OF_GAS = 3,
  // Translation hit a not-present entry; details via y86pp_last_error.
  Y86_STATUS_PAGE_FAULT = 4,
  Y86_STATUS_NULL_POINTER = -1,
  Y86_STATUS_BAD_ARGUMENT = -2,
} Y86Status;

// A complete simulated machine: registers, flags, translation state,
// and sparse memory.
typedef struct Y86Machine Y86Machine;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message for the most recent failing call on this thread; empty
// string when nothing failed yet.
const char *y86pp_last_error(void);

struct Y86Machine *y86pp_machine_new(void);

void y86pp_machine_free(struct Y86Machine *m);

// Returns the machine to power-on state: zero registers, empty
// memory, eip 0, supervisor mode.
enum Y86Status y86pp_machine_reset(struct Y86Machine *m);

// Copies `len` code bytes to `base` and points eip there. The machine
// is set running; registers and the rest of memory are untouched.
enum Y86Status y86pp_machine_load_program(struct Y86Machine *m,
                                          const uint8_t *bytes,
                                          size_t len,
                                          uint32_t base);

// Register indices: 0 eax, 1 ecx, 2 edx, 3 ebx, 4 esp, 5 ebp, 6 esi,
// 7 edi, 8 imme1, 9 valu1.
enum Y86Status y86pp_machine_get_reg(const struct Y86Machine *m, uint32_t reg, uint32_t *out);

enum Y86Status y86pp_machine_set_reg(struct Y86Machine *m, uint32_t reg, uint32_t value);

enum Y86Status y86pp_machine_get_eip(const struct Y86Machine *m, uint32_t *out);

enum Y86Status y86pp_machine_set_eip(struct Y86Machine *m, uint32_t eip);

enum Y86Status y86pp_machine_set_cr3(struct Y86Machine *m, uint32_t cr3);

// Guest mode routes every memory access through the nested page
// tables; supervisor mode (the default) is untranslated.
enum Y86Status y86pp_machine_set_guest_mode(struct Y86Machine *m, bool enabled);

// Reads physical memory bytes; unwritten locations read as zero.
enum Y86Status y86pp_machine_read_mem(const struct Y86Machine *m,
                                      uint32_t addr,
                                      uint8_t *buf,
                                      size_t len);

enum Y86Status y86pp_machine_write_mem(struct Y86Machine *m,
                                       uint32_t addr,
                                       const uint8_t *buf,
                                       size_t len);

// Current execution state without running anything: Ok while the
// machine can still step.
enum Y86Status y86pp_machine_status(const struct Y86Machine *m);

// Executes one instruction. Stepping a halted or faulted machine is a
// no-op that reports the standing state.
enum Y86Status y86pp_machine_step(struct Y86Machine *m);

// Runs until halt, fault, or `max_steps` instructions. The number of
// instructions executed is written to `steps_out` when non-null.
enum Y86Status y86pp_machine_run(struct Y86Machine *m, uint64_t max_steps, uint64_t *steps_out);

// Translates a virtual address through the machine's current paging
// state. In supervisor mode this is the identity.
enum Y86Status y86pp_machine_va_to_pa(const struct Y86Machine *m, uint32_t va, uint32_t *pa_out);

#ifdef __cplusplus
} // extern "C"
#endif // __cplusplus

#endif /* Y86PP_H */
