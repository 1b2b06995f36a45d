pub mod asm;
pub mod isa;
pub mod minvisor;
pub mod paging;
pub mod verifier;
