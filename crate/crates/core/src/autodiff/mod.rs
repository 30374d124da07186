//! Define-by-run reverse-mode automatic differentiation over dense `f64`
//! tensors, plus the AdamW optimizer and a checkpoint archive format.

mod archive;
mod optim;
mod tape;
mod tensor;

pub use archive::{read_archive, write_archive, Archive};
pub use optim::{AdamW, AdamWConfig};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
