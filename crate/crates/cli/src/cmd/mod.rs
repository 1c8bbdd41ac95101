pub mod bench;
pub mod demo;
pub mod flops;
pub mod gate_export;
pub mod gradcheck;
