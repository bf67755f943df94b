//! Dense tensors, a reverse-mode tape, parameter storage and Adam.

mod array;
mod gemm;
pub mod gradcheck;
mod graph;
mod optim;
mod params;

pub use array::Tensor;
pub use gradcheck::{grad_check, grad_check_params, GradCheckConfig, GradCheckReport};
pub use graph::{Graph, Mode, Var};
pub(crate) use graph::is_permutation;
pub use optim::{Adam, AdamConfig};
pub use params::{embedding_normal, kaiming_uniform, ParamId, ParamStore, Session};
