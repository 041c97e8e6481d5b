//! Deterministic `f64` numeric core: dense matrices, the layer primitives
//! the talker needs with hand-written backward passes, AdamW, and
//! finite-difference gradient checking.

mod gradcheck;
mod loss;
mod matrix;
mod ops;
mod optim;
mod rng;

pub use gradcheck::{grad_check, GradCheckConfig, GradCheckEntry, GradCheckReport};
pub use loss::{kl_rows, masked_cross_entropy, KlDirection, LossGrad};
pub use matrix::{matmul, Matrix};
pub(crate) use matrix::{mm, mm_nt, mm_tn, mm_tn_acc};
pub use ops::{
    gelu, gelu_grad, layer_norm_bwd, layer_norm_fwd, log_softmax_into, log_sum_exp, map,
    map_grad, masked_attention, masked_attention_bwd, masked_attention_fwd, relu, relu_grad,
    softmax_into, softmax_rows, AttentionCache, BoolMask, LayerNormCache,
};
pub use optim::{adamw_step, adamw_update, AdamW, AdamWConfig, Param};
pub use rng::RngState;
