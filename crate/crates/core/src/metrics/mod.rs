//! Image-quality metrics and the analytic cost model.

mod cost;
mod quality;

pub use cost::{bench_variants, count_block_costs, count_costs, Component, CostReport, CostRow, MemoryMode};
pub use quality::{format_psnr, psnr, ssim, SsimParams};
