//! The four table-setup routines, their placement parameters, write
//! oracles, and the call harness that runs them under the simulator.

pub mod harness;
pub mod oracle;
pub mod params;

pub use harness::{
    assemble_function, run_call, setup_call, setup_call_from_image, CallSetup, HarnessError,
    RunOutcome, SetupFn, CREATE_NESTED_PT_SRC, INIT_PDPT_SRC, INIT_PDTS_SRC, SEC_NOT_PRESENT_SRC,
};
pub use oracle::{
    apply_delta, oracle_create_nested_pt, oracle_init_pdpt, oracle_init_pdts,
    oracle_sec_not_present, put_u64_le, MemoryDelta, PDT_ENTRY_FLAGS,
};
pub use params::{
    gen_params, params_to_text, parse_params_file, regions, validate, NptParams, ParamError,
    ParamsFileError, CODE_RESERVE, STACK_RESERVE,
};
