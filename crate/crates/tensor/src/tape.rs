//! Define-by-run reverse-mode autodiff.
//!
//! Every operation appends a node holding its output value and whatever the
//! backward rule needs. Node inputs always precede the node itself, so
//! walking the node list backwards is a valid reverse topological order.

use std::collections::HashMap;

use crate::error::{Result, TensorError};
use crate::ops::broadcast::IndexMap;
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

/// Deliberately wrong backward rules, used to prove that gradient checks
/// actually catch broken derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Gelu,
    Softmax,
    MatMul,
    LayerNorm,
}

impl BackwardFault {
    const SCALE: f64 = 1.05;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum UnaryKind {
    Gelu,
    Sigmoid,
    Relu,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        pairs: Vec<(usize, usize)>,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        map_a: IndexMap,
        map_b: IndexMap,
    },
    Scale {
        a: Var,
        factor: f64,
    },
    AddScalar {
        a: Var,
    },
    Unary {
        kind: UnaryKind,
        a: Var,
    },
    Softmax {
        a: Var,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gather {
        a: Var,
        index: Vec<usize>,
    },
    Reshape {
        a: Var,
    },
    Concat {
        inputs: Vec<Var>,
    },
    SumAxis {
        a: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll {
        a: Var,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
pub(crate) struct Node {
    pub(crate) value: Tensor,
    pub(crate) op: Op,
    pub(crate) requires_grad: bool,
}

/// Recording of one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    pub(crate) nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    fault: Option<BackwardFault>,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Default)]
pub struct Grads {
    leaves: HashMap<Var, Tensor>,
    params: Vec<(ParamId, Tensor)>,
}

impl Grads {
    /// Gradient of a leaf created with [`Tape::leaf`]; `None` if the loss
    /// does not depend on it.
    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, t)| (*id, t))
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, t)| t)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_fault(fault: BackwardFault) -> Self {
        Tape {
            fault: Some(fault),
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub(crate) fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        debug_assert!(inputs.iter().all(|v| v.0 < self.nodes.len()));
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, &[])
    }

    /// Records a value whose gradient is reported by [`Grads::leaf`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Brings a stored parameter onto the tape. Repeated calls with the same
    /// id return the same variable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.value(id).clone(),
            op: Op::Param(id),
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Runs the reverse sweep from a scalar `loss` and consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Grads> {
        let loss_shape = self.nodes[loss.0].value.shape().to_vec();
        if self.nodes[loss.0].value.numel() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape));
        }
        let mut out = Grads::default();
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(out);
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(mut g) = grads[i].take() else {
                continue;
            };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    out.leaves.insert(Var(i), t);
                }
                Op::Param(id) => {
                    let t = Tensor::new(node.value.shape(), g)?;
                    out.params.push((*id, t));
                }
                op => {
                    if let Some(fault) = self.fault {
                        if fault.matches(op) {
                            g.iter_mut().for_each(|x| *x *= BackwardFault::SCALE);
                        }
                    }
                    let mut sink = GradSink {
                        nodes: &self.nodes,
                        grads: &mut grads,
                    };
                    crate::ops::backward(op, &node.value, &g, &mut sink);
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }
}

impl BackwardFault {
    fn matches(self, op: &Op) -> bool {
        matches!(
            (self, op),
            (
                BackwardFault::Gelu,
                Op::Unary {
                    kind: UnaryKind::Gelu,
                    ..
                }
            ) | (BackwardFault::Softmax, Op::Softmax { .. })
                | (BackwardFault::MatMul, Op::MatMul { .. })
                | (BackwardFault::LayerNorm, Op::LayerNorm { .. })
        )
    }
}

/// Lazily allocated gradient buffers for the inputs of the node being
/// differentiated.
pub(crate) struct GradSink<'a> {
    nodes: &'a [Node],
    grads: &'a mut [Option<Vec<f64>>],
}

impl<'a> GradSink<'a> {
    /// Mutable gradient buffer of `v`, or `None` if `v` needs no gradient.
    pub(crate) fn get(&mut self, v: Var) -> Option<&mut [f64]> {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return None;
        }
        let n = node.value.numel();
        Some(self.grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub(crate) fn value(&self, v: Var) -> &'a Tensor {
        &self.nodes[v.0].value
    }
}
