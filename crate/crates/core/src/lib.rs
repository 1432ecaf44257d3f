pub mod autograd;
pub mod checkpoint;
pub mod dataset;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod imaging;
pub mod lm;
pub mod lora;
pub mod model;
pub mod nn;
pub mod params;
pub mod prompt;
pub mod quality;
pub mod text;
pub mod training;
pub mod vision;

pub use autograd::{Matrix, Tape, Var};
pub use error::{Error, Result};
pub use params::{ParamGroup, ParamStore, Session};
