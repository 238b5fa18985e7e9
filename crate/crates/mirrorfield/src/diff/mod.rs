mod scalar;
mod tape;
mod tensor;

pub use scalar::Scalar;
pub use tape::{sigmoid_stable, softplus_stable, Grads, Tape, Var};
pub use tensor::{dot, gemm_nn, gemm_nt, gemm_tn, transpose, Tensor};
