use crate::error::{Result, TensorError};
use crate::tape::{GradSink, Op, Tape, Var};
use crate::tensor::{numel, Tensor};

/// Index value that makes [`Tape::gather`] emit a zero.
pub const ZERO_INDEX: usize = usize::MAX;

/// Row-major strides of `shape`.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tape {
    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let x = self.value(a);
        if numel(shape) != x.numel() {
            return Err(TensorError::mismatch("reshape", x.shape(), shape));
        }
        let value = Tensor::new(shape, x.data().to_vec())?;
        Ok(self.push(value, Op::Reshape { a }, &[a]))
    }

    /// `out[i] = a[index[i]]`, or zero where `index[i] == ZERO_INDEX`.
    ///
    /// Every layout operation (permutes, window partitions, shifts, padding,
    /// crops, pixel rearrangements) reduces to a gather; its backward rule is
    /// the matching scatter-add.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var> {
        let x = self.value(a).data();
        if index.len() != numel(shape) {
            return Err(TensorError::invalid(
                "gather",
                format!("{} indices for output shape {shape:?}", index.len()),
            ));
        }
        if let Some(&bad) = index.iter().find(|&&i| i != ZERO_INDEX && i >= x.len()) {
            return Err(TensorError::invalid(
                "gather",
                format!("index {bad} out of bounds for {} elements", x.len()),
            ));
        }
        let data = index
            .iter()
            .map(|&i| if i == ZERO_INDEX { 0.0 } else { x[i] })
            .collect();
        let value = Tensor::new(shape, data)?;
        Ok(self.push(value, Op::Gather { a, index }, &[a]))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&ax| ax >= shape.len() || std::mem::replace(&mut seen[ax], true))
        {
            return Err(TensorError::invalid(
                "permute",
                format!("{axes:?} is not a permutation for shape {shape:?}"),
            ));
        }
        let in_strides = strides(&shape);
        let out_shape: Vec<usize> = axes.iter().map(|&ax| shape[ax]).collect();
        let perm_strides: Vec<usize> = axes.iter().map(|&ax| in_strides[ax]).collect();
        let n = numel(&shape);
        let mut index = Vec::with_capacity(n);
        let mut counter = vec![0usize; shape.len()];
        let mut pos = 0usize;
        for _ in 0..n {
            index.push(pos);
            for d in (0..out_shape.len()).rev() {
                counter[d] += 1;
                pos += perm_strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                pos -= perm_strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        self.gather(a, index, &out_shape)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(TensorError::invalid(
                "narrow",
                format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            ));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            for l in start..start + len {
                let base = (o * shape[axis] + l) * inner;
                index.extend(base..base + inner);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(a, index, &out_shape)
    }

    /// Concatenates along the last dimension; all other dimensions must agree.
    pub fn concat_lastdim(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = *inputs
            .first()
            .ok_or_else(|| TensorError::invalid("concat_lastdim", "no inputs"))?;
        let lead = self.shape(first).to_vec();
        if lead.is_empty() {
            return Err(TensorError::invalid("concat_lastdim", "rank-0 input"));
        }
        let lead = &lead[..lead.len() - 1];
        let mut widths = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != lead.len() + 1 || &s[..lead.len()] != lead {
                return Err(TensorError::mismatch("concat_lastdim", self.shape(first), s));
            }
            widths.push(s[lead.len()]);
        }
        let rows: usize = lead.iter().product();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&v, &w) in inputs.iter().zip(&widths) {
                out.extend_from_slice(&self.value(v).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead.to_vec();
        shape.push(total);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                inputs: inputs.to_vec(),
            },
            inputs,
        ))
    }
}

pub(crate) fn gather_backward(a: Var, index: &[usize], g: &[f64], sink: &mut GradSink<'_>) {
    let Some(ga) = sink.get(a) else { return };
    for (&i, &gi) in index.iter().zip(g) {
        if i != ZERO_INDEX {
            ga[i] += gi;
        }
    }
}

pub(crate) fn reshape_backward(a: Var, g: &[f64], sink: &mut GradSink<'_>) {
    if let Some(ga) = sink.get(a) {
        for (d, s) in ga.iter_mut().zip(g) {
            *d += s;
        }
    }
}

pub(crate) fn concat_backward(inputs: &[Var], out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let total = *out.shape().last().expect("checked in forward");
    let rows = out.numel() / total;
    let mut offset = 0;
    for &v in inputs {
        let w = *sink.value(v).shape().last().expect("checked in forward");
        if let Some(gv) = sink.get(v) {
            for r in 0..rows {
                let src = &g[r * total + offset..r * total + offset + w];
                for (d, s) in gv[r * w..(r + 1) * w].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        offset += w;
    }
}
