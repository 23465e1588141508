pub mod autodiff;
pub mod backbone;
pub mod cfr;
pub mod codec;
pub mod data;
pub mod diag;
pub mod error;
pub mod flow;
pub mod losses;
pub mod lora;
pub mod metrics;
pub mod tensor;
pub mod trainer;
