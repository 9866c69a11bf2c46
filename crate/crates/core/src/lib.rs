pub mod autograd;
pub mod crc;
pub mod data;
pub mod error;
pub mod extract;
pub mod gfi;
pub mod model;
pub mod model_file;
pub mod optim;
pub mod pipeline;
pub mod sih;
pub mod steganalysis;
pub mod surgery;
pub mod tensor;
pub mod train;

pub use error::{Error, FormatError, Result};
pub use model::{ConvSpec, LayerSpec, ModelGraph, Task};
pub use tensor::Tensor;
