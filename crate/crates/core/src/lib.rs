//! Compiler core for constrained neural-network chips.
//!
//! A trained graph is rewritten into weighted-sum operations, re-encoded and
//! tiled into fixed-scale "dot core-ops" with codebook weights and B-bit I/O,
//! fine-tuned part by part against the original graph, simulated bit-faithfully
//! and placed on a 2D mesh of physical cores.
//!
//! This crate is `no_std` (with `alloc`); file formats, datasets and the CLI
//! live in the `nnchip` companion crate.
#![no_std]

extern crate alloc;

pub mod autodiff;
pub mod codec;
pub mod exec;
pub mod graph;
pub mod hardware;
pub mod mapping;
pub mod math;
pub mod models;
pub mod optim;
pub mod reform;
pub mod tensor;
pub mod train;
pub mod tuning;

pub use codec::{Codebook, CodecFamily, CodecKind};
pub use graph::{CompGraph, OpKind, Stage, Vertex};
pub use hardware::HardwareSpec;
pub use tensor::Tensor;
