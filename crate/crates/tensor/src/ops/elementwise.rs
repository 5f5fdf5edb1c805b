use crate::error::{Result, TensorError};
use crate::ops::broadcast::{broadcast_shape, index_map, IndexMap};
use crate::tape::{BinaryKind, GradSink, Op, Tape, UnaryKind, Var};
use crate::tensor::Tensor;

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation:
/// `gelu(x) = 0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Logistic function evaluated without overflow for large `|x|`.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let sa = self.shape(a);
        let sb = self.shape(b);
        let shape = broadcast_shape(sa, sb).ok_or_else(|| TensorError::mismatch(name, sa, sb))?;
        let map_a = index_map(&shape, sa);
        let map_b = index_map(&shape, sb);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match (&map_a, &map_b, kind) {
            (IndexMap::Identity, IndexMap::Identity, BinaryKind::Add) => {
                va.iter().zip(vb).map(|(x, y)| x + y).collect()
            }
            (IndexMap::Identity, IndexMap::Identity, BinaryKind::Mul) => {
                va.iter().zip(vb).map(|(x, y)| x * y).collect()
            }
            _ => (0..n)
                .map(|i| {
                    let (x, y) = (va[map_a.get(i)], vb[map_b.get(i)]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    }
                })
                .collect(),
        };
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Binary {
                kind,
                a,
                b,
                map_a,
                map_b,
            },
            &[a, b],
        ))
    }

    /// Elementwise `a + b` with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Elementwise (Hadamard) product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * factor).collect();
        let value = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.push(value, Op::Scale { a, factor }, &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let value = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.push(value, Op::AddScalar { a }, &[a])
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Var {
        let f = match kind {
            UnaryKind::Gelu => gelu,
            UnaryKind::Sigmoid => sigmoid,
            UnaryKind::Relu => |x: f64| x.max(0.0),
        };
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a), data).expect("shape preserved");
        self.push(value, Op::Unary { kind, a }, &[a])
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Gelu, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(UnaryKind::Relu, a)
    }
}

pub(crate) fn binary_backward(
    kind: BinaryKind,
    a: Var,
    b: Var,
    map_a: &IndexMap,
    map_b: &IndexMap,
    g: &[f64],
    sink: &mut GradSink<'_>,
) {
    let va = sink.value(a).data();
    let vb = sink.value(b).data();
    if let Some(ga) = sink.get(a) {
        for (i, &gi) in g.iter().enumerate() {
            let d = match kind {
                BinaryKind::Add | BinaryKind::Sub => gi,
                BinaryKind::Mul => gi * vb[map_b.get(i)],
            };
            ga[map_a.get(i)] += d;
        }
    }
    if let Some(gb) = sink.get(b) {
        for (i, &gi) in g.iter().enumerate() {
            let d = match kind {
                BinaryKind::Add => gi,
                BinaryKind::Sub => -gi,
                BinaryKind::Mul => gi * va[map_a.get(i)],
            };
            gb[map_b.get(i)] += d;
        }
    }
}

pub(crate) fn unary_backward(kind: UnaryKind, a: Var, out: &Tensor, g: &[f64], sink: &mut GradSink<'_>) {
    let x = sink.value(a).data();
    let y = out.data();
    let Some(ga) = sink.get(a) else { return };
    for i in 0..g.len() {
        let d = match kind {
            UnaryKind::Gelu => gelu_grad(x[i]),
            UnaryKind::Sigmoid => y[i] * (1.0 - y[i]),
            UnaryKind::Relu => {
                if x[i] > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        };
        ga[i] += g[i] * d;
    }
}
