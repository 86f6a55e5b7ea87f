#![allow(dead_code)]

pub mod dft_oracle;
pub mod eval_oracle;
pub mod overfit;
