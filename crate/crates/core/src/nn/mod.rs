//! Differentiable operators with hand-written backward passes.
//!
//! Activations use a batch-last layout: a tensor of shape
//! `[C, D, H, W, N]` stores the `N` samples of each voxel contiguously, so
//! the inner loops of every kernel run over the batch. A single sample is
//! simply `N = 1`.

mod attention;
mod conv;
mod gradcheck;
mod loss;
mod tensor;

pub use attention::{
    channel_attention, channel_attention_backward, spatial_attention, spatial_attention_backward,
    ChannelAttentionCache, SpatialAttentionCache, SPATIAL_GATE_SHAPE,
};
pub use conv::{conv1d, conv1d_backward, conv3d, conv3d_backward, conv_same, conv_same_backward, ConvSpec};
pub use gradcheck::{grad_check, Evaluation, GradCheckReport};
pub(crate) use gradcheck::{fold_bits, fold_index, BRANCH_SEED};
pub use loss::{linear, linear_backward, softmax_cross_entropy};
pub use tensor::{ParamId, ParamStore, Tensor};

/// Elementwise `max(0, x)`.
pub fn relu(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Backward of [`relu`] given its output; the subgradient at 0 is 0.
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert_eq!(y.shape(), dy.shape());
    let data = y
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&y, &g)| if y > 0.0 { g } else { 0.0 })
        .collect();
    Tensor::from_parts(y.shape().to_vec(), data)
}

/// Elementwise sum of two same-shape tensors. Its backward is the identity
/// on both inputs.
pub fn residual_fuse(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    if a.shape() != b.shape() {
        return Err(crate::Error::shape("residual_fuse", a.shape(), b.shape()));
    }
    let data = a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect();
    Ok(Tensor::from_parts(a.shape().to_vec(), data))
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
