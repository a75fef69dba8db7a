//! Compiler optimization level recognition for ARM ELF object files.
//!
//! Code bytes are cut into 1024-instruction blocks and classified by a small convolutional network
//! into `-O0`, `-O1`, `-O2/-O3` or `-Os`. Pooled convolution activations map back to instruction
//! addresses, which the [`explain`] module scans for known ARM code patterns.

pub mod cli;
pub mod corpus;
pub mod elf;
pub mod eval;
pub mod explain;
pub mod model;
pub mod nn;
pub mod patterns;
pub mod train;
