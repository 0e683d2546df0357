//! Quality metrics, compute accounting and the dataset benchmark runner.

pub mod benchmark;
pub mod flops;
pub mod metrics;

pub use benchmark::{run_benchmark, BenchmarkOptions, BenchmarkReport, ResultRow};
pub use flops::FlopsModel;
pub use metrics::{psnr, ssim};
