pub(crate) mod broadcast;
pub(crate) mod elementwise;
pub(crate) mod matmul;
pub(crate) mod nn;
pub(crate) mod reduce;
pub(crate) mod shape;

use crate::tape::{GradSink, Op};
use crate::tensor::Tensor;

/// Dispatches the backward rule of `op`, whose output was `out` and whose
/// output gradient is `g`.
pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    match op {
        Op::Leaf | Op::Param(_) => {}
        Op::MatMul { a, b, pairs, m, k, n } => matmul::backward(*a, *b, pairs, *m, *k, *n, g, sink),
        Op::Binary {
            kind,
            a,
            b,
            map_a,
            map_b,
        } => elementwise::binary_backward(*kind, *a, *b, map_a, map_b, g, sink),
        Op::Scale { a, factor } => {
            if let Some(ga) = sink.get(*a) {
                for (d, s) in ga.iter_mut().zip(g) {
                    *d += factor * s;
                }
            }
        }
        Op::AddScalar { a } | Op::Reshape { a } => shape::reshape_backward(*a, g, sink),
        Op::Unary { kind, a } => elementwise::unary_backward(*kind, *a, out, g, sink),
        Op::Softmax { a } => nn::softmax_backward(*a, out, g, sink),
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => nn::layer_norm_backward(*x, *gamma, *beta, xhat, rstd, g, sink),
        Op::Gather { a, index } => shape::gather_backward(*a, index, g, sink),
        Op::Concat { inputs } => shape::concat_backward(inputs, out, g, sink),
        Op::SumAxis { a, outer, len, inner } => reduce::sum_axis_backward(*a, *outer, *len, *inner, g, sink),
        Op::SumAll { a } => {
            if let Some(ga) = sink.get(*a) {
                ga.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::BceWithLogits { logits, target } => nn::bce_backward(*logits, target, g, sink),
    }
}
