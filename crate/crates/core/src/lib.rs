pub mod bank;
pub mod block;
pub mod cross_attn;
pub mod error;
pub mod io;
pub mod llm;
pub mod mask;
pub mod metrics;
pub mod pipeline;
pub mod plan;
pub mod self_attn;
pub mod tensor;
pub mod text;

pub use error::{Error, Result};
