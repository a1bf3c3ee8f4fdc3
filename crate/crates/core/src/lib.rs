pub mod blocked;
pub mod engine;
pub mod fix8;
pub mod fpe;
pub mod hpe;
pub mod isa;
pub mod nn;
pub mod pe;
pub mod traffic;
