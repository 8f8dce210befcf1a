//! Reverse-mode automatic differentiation, the pose network and its losses.

pub mod autodiff;
pub mod graph;
pub mod loss;
pub mod net;
pub mod scalar;

pub use autodiff::{
    grad, grad_and_hvp, hvp, meta_grad, probe, value, vector_group, MetaGrad, MetaMode, Objective, ParamSpace,
};
pub use graph::{ConvSpec, Grads, Graph, Tensor, Var};
pub use loss::{
    autobalance_value, autobalance_with_grads, cls_loss_value, loss_autobalance, loss_cls, loss_pose,
    pose_loss_value, BalancedLoss, DEFAULT_BETA,
};
pub use net::{
    layout, param_count, EncoderVariant, HeadId, HeadSet, InputNorm, LossBalance, ModelParams, NetConfig,
    PairInput, ParamGroup, DEFAULT_RESOLUTION,
};
pub use scalar::{Dual, Scalar};
