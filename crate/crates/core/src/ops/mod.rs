mod channels;
mod conv;
mod elementwise;
mod pool;
mod reduce;
mod resize;
mod tokens;

pub use conv::ConvParams;

use crate::error::Result;
use crate::graph::{GradBuf, Slot, Step};
use crate::scalar::Scalar;

/// Backward dispatch for one recorded step. Called in reverse recording
/// order; every slot is written by exactly one step, so the output grad
/// can be taken by value here and is never needed again.
pub(crate) fn step_backward<T: Scalar>(
    step: &Step,
    slots: &[Slot<T>],
    buf: &mut GradBuf<T>,
) -> Result<()> {
    match step {
        Step::Conv2d {
            x,
            w,
            b,
            out,
            stride,
            padding,
            groups,
        } => conv::backward(slots, buf, *x, *w, *b, *out, *stride, *padding, *groups),
        Step::Gap2d { x, out } => pool::backward_gap(slots, buf, *x, *out),
        Step::NarrowChannels { x, out, c0 } => channels::backward_narrow(slots, buf, *x, *out, *c0),
        Step::ConcatChannels { xs, out } => channels::backward_concat(slots, buf, xs, *out),
        Step::Sigmoid { x, out } => elementwise::backward_sigmoid(slots, buf, *x, *out),
        Step::Gelu { x, out } => elementwise::backward_gelu(slots, buf, *x, *out),
        Step::Add { a, b, out } => elementwise::backward_add(slots, buf, *a, *b, *out),
        Step::Sub { a, b, out } => elementwise::backward_sub(slots, buf, *a, *b, *out),
        Step::Mul { a, b, out } => elementwise::backward_mul(slots, buf, *a, *b, *out),
        Step::Div { a, b, out } => elementwise::backward_div(slots, buf, *a, *b, *out),
        Step::Affine { x, out, scale, .. } => {
            elementwise::backward_affine(slots, buf, *x, *out, *scale)
        }
        Step::ConvexBlend { gate, a, b, out } => {
            elementwise::backward_convex_blend(slots, buf, *gate, *a, *b, *out)
        }
        Step::BilinearResize { x, out } => resize::backward(slots, buf, *x, *out),
        Step::Linear { x, w, b, out } => tokens::backward_linear(slots, buf, *x, *w, *b, *out),
        Step::MatmulNN { a, b, out } => tokens::backward_matmul_nn(slots, buf, *a, *b, *out),
        Step::MatmulNT { a, b, out } => tokens::backward_matmul_nt(slots, buf, *a, *b, *out),
        Step::SoftmaxLast { x, out } => tokens::backward_softmax(slots, buf, *x, *out),
        Step::LayerNorm {
            x,
            gamma,
            beta,
            out,
            eps,
        } => tokens::backward_layer_norm(slots, buf, *x, *gamma, *beta, *out, *eps),
        Step::ToTokens { x, out } => tokens::backward_to_tokens(slots, buf, *x, *out),
        Step::FromTokens { x, out } => tokens::backward_from_tokens(slots, buf, *x, *out),
        Step::SplitHeads { x, out } => tokens::backward_split_heads(slots, buf, *x, *out),
        Step::MergeHeads { x, out } => tokens::backward_merge_heads(slots, buf, *x, *out),
        Step::SumAll { x, out } => reduce::backward_sum_all(slots, buf, *x, *out),
        Step::BceWithLogits {
            logits,
            target,
            out,
        } => elementwise::backward_bce_with_logits(slots, buf, *logits, *target, *out),
    }
}
