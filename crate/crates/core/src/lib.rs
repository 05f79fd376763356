//! Precision-adaptive variational Bayes Gaussian splatting.
//!
//! The crate is organised bottom-up:
//!
//! * [`numerics`]: emulated floating-point formats and byte accounting.
//! * [`graph`]: shape-static tensor graphs and precision configurations.
//! * [`interp`]: execution under a configuration with memory and cost profiling.
//! * [`mpsearch`]: the three-pass mixed-precision search and precision maps.
//! * [`vbgs`]: the conjugate Gaussian-mixture model and replay-free trainer.
//! * [`scene`]: synthetic scenes, frame streams and PSNR evaluation.

pub mod error;
pub mod graph;
pub mod interp;
pub mod mpsearch;
pub mod numerics;
pub mod scene;
pub mod tensor;
pub mod vbgs;

pub use error::{Error, Result};
pub use graph::{uniform_config, Graph, GraphBuilder, NodeId, PrecisionConfig};
pub use interp::{execute, CostModel, ExecMode, ExecutionProfile, Inputs};
pub use mpsearch::{search, PrecisionMap, SearchOptions, SearchReport};
pub use numerics::{bytes_of, round_to_format, PrecisionFormat};
pub use tensor::Tensor;
