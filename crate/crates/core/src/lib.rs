pub mod augmentation;
pub mod checkpoint;
pub mod data;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod moe;
pub mod objectives;
pub mod par;
pub mod params;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use par::Exec;
