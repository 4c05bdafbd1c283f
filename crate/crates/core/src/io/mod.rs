//! On-disk formats: binary stack files, CSV tables and run configuration.

pub mod config;
pub mod tables;
pub mod tensor_file;

pub use config::{Detector, RunConfig, Sweep};
pub use tables::{
    read_localizations, read_patches, read_pr_curve, read_truth, write_localizations, write_pr_curve, write_trace,
    write_truth, PatchSpec,
};
pub use tensor_file::{read_kernel, read_tensor, write_kernel, write_tensor};
