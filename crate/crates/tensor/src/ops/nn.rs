use crate::error::{Result, TensorError};
use crate::ops::elementwise::sigmoid;
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::Tensor;

impl Tape {
    /// Softmax over the last dimension, with max subtraction.
    pub fn softmax_lastdim(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let d = *x
            .shape()
            .last()
            .ok_or_else(|| TensorError::invalid("softmax_lastdim", "rank-0 input"))?;
        let mut out = x.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let inv = 1.0 / sum;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let value = Tensor::new(x.shape(), out)?;
        Ok(self.push(value, Op::Softmax { a }, &[a]))
    }

    /// Normalizes each last-dim slice to zero mean and unit variance, then
    /// applies `gamma * x̂ + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::invalid("layer_norm", "eps must be positive"));
        }
        let xs = self.shape(x);
        let d = *xs
            .last()
            .ok_or_else(|| TensorError::invalid("layer_norm", "rank-0 input"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(TensorError::mismatch("layer_norm", xs, self.shape(p)));
            }
        }
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let rows = xv.len() / d;
        let mut out = vec![0.0; xv.len()];
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = gv[j] * h + bv[j];
            }
        }
        let value = Tensor::new(xs, out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        ))
    }

    /// Mean binary cross-entropy on logits, in the stable form
    /// `max(x, 0) − x·y + ln(1 + e^(−|x|))`.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        let lx = self.value(logits);
        if lx.numel() != target.numel() {
            return Err(TensorError::mismatch("bce_with_logits", lx.shape(), target.shape()));
        }
        if target.data().iter().any(|&t| t != 0.0 && t != 1.0) {
            return Err(TensorError::invalid("bce_with_logits", "target values must be 0 or 1"));
        }
        let n = lx.numel() as f64;
        let loss = lx
            .data()
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.data().to_vec(),
            },
            &[logits],
        ))
    }
}

pub(crate) fn softmax_backward(a: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let Some(ga) = sink.get(a) else { return };
    let d = *out.shape().last().expect("checked in forward");
    let y = out.data();
    for r in 0..y.len() / d {
        let ys = &y[r * d..(r + 1) * d];
        let gs = &g[r * d..(r + 1) * d];
        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
        for j in 0..d {
            ga[r * d + j] += ys[j] * (gs[j] - dot);
        }
    }
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn layer_norm_backward(
    x: Var,
    gamma: Var,
    beta: Var,
    xhat: &[f64],
    rstd: &[f64],
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let gv = sink.value(gamma).data();
    let d = gv.len();
    let rows = rstd.len();
    if let Some(gx) = sink.get(x) {
        let mut dxhat = vec![0.0; d];
        for r in 0..rows {
            let gs = &g[r * d..(r + 1) * d];
            let hs = &xhat[r * d..(r + 1) * d];
            let mut mean_d = 0.0;
            let mut mean_dh = 0.0;
            for j in 0..d {
                dxhat[j] = gs[j] * gv[j];
                mean_d += dxhat[j];
                mean_dh += dxhat[j] * hs[j];
            }
            mean_d /= d as f64;
            mean_dh /= d as f64;
            for j in 0..d {
                gx[r * d + j] += rstd[r] * (dxhat[j] - mean_d - hs[j] * mean_dh);
            }
        }
    }
    if let Some(gg) = sink.get(gamma) {
        for r in 0..rows {
            for j in 0..d {
                gg[j] += g[r * d + j] * xhat[r * d + j];
            }
        }
    }
    if let Some(gb) = sink.get(beta) {
        for r in 0..rows {
            for j in 0..d {
                gb[j] += g[r * d + j];
            }
        }
    }
}

pub(crate) fn bce_backward(logits: Var, target: &[f64], g: &[f64], sink: &mut GradSink<'_>) {
    let x = sink.value(logits).data();
    let Some(gx) = sink.get(logits) else { return };
    let scale = g[0] / x.len() as f64;
    for i in 0..x.len() {
        gx[i] += scale * (sigmoid(x[i]) - target[i]);
    }
}
