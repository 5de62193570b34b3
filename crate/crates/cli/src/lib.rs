//! Library surface of the command-line pipeline: image I/O, model
//! persistence, and the command implementations. The binary in `main.rs` is
//! a thin argument-parsing layer over this.

pub mod commands;
pub mod imageio;
pub mod modelfile;
