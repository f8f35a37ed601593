//! Dense tensors with hand-written backward passes, MLP layers and optimizers.

mod gradcheck;
mod mlp;
mod ops;
mod optim;
mod params;
mod tensor;

pub use gradcheck::{grad_check, GradCheckEntry, GradCheckOptions, GradCheckReport};
pub use mlp::{layer_names, mlp_backward, mlp_forward, mlp_init, Activation, MlpCache, MlpSpec};
pub use ops::{
    linear_backward, linear_forward, max_pool_rows, max_pool_rows_backward, relu_backward,
    relu_forward, segment_max_pool, segment_max_pool_backward, LinearGrads,
};
#[allow(unused_imports)]
pub(crate) use ops::{gemm_acc, gemm_tn_acc, transpose};
pub use optim::{adam_step, sgd_step, AdamConfig, AdamState, Optimizer, OptimizerSpec};
pub use params::{Namespace, ParamStore, Parameter};
#[allow(unused_imports)]
pub(crate) use params::hex_digest;
pub use tensor::{Real, Tensor};
