#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod capsule;
pub mod checkpoint;
pub mod cli;
pub mod config;
pub mod data;
pub mod decoder;
pub mod error;
pub mod gradcheck;
pub mod kernels;
pub mod mask;
pub mod metrics;
pub mod model;
pub mod saliency;
pub mod synth;
pub mod taxonomy;
pub mod tensor;
pub mod training;
pub mod wsss;
