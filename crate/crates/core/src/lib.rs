pub mod camera;
pub mod convnet;
pub mod encoding;
pub mod error;
pub mod flow;
pub mod io;
pub mod pooling;
pub mod tensor;
pub mod trajectory;

pub use error::{Error, Result};
