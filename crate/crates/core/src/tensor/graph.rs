//! The tape: a topologically ordered record of ops. Built during the forward
//! pass; `backward` walks it once in reverse, accumulating gradients into
//! `requires_grad` leaves only.

use super::ops::{self, im2col_out_len, Op};
use super::{Tensor, TensorBase};
use crate::error::{Error, Result};
use std::collections::HashMap;

/// Handle to a node on a `Graph`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Val(pub(crate) usize);

struct Node {
    op: Op,
    parents: Vec<Val>,
    value: Tensor,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Val {
        self.nodes.push(Node {
            op: Op::Leaf,
            parents: vec![],
            value,
            requires_grad,
        });
        Val(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Val {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Val) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Val) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. `v`; `None` for nodes that
    /// do not require grad or were unreachable from the loss.
    pub fn grad(&self, v: Val) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, op: Op, parents: Vec<Val>) -> Val {
        let pvals: Vec<&Tensor> = parents.iter().map(|p| &self.nodes[p.0].value).collect();
        let value = ops::eval::<f32>(&op, &pvals);
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            op,
            parents,
            value,
            requires_grad,
        });
        Val(self.nodes.len() - 1)
    }

    // ---- op builders -------------------------------------------------

    pub fn add(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa == sb {
            Ok(self.push(Op::Add, vec![a, b]))
        } else if sa.len() > sb.len() && sa.ends_with(&sb) {
            Ok(self.push(Op::AddB, vec![a, b]))
        } else {
            Err(Error::Shape {
                op: "add",
                lhs: sa,
                rhs: sb,
            })
        }
    }

    pub fn sub(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "sub",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::Sub, vec![a, b]))
    }

    pub fn mul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa != sb {
            return Err(Error::Shape {
                op: "mul",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::Mul, vec![a, b]))
    }

    pub fn scale(&mut self, a: Val, c: f32) -> Val {
        self.push(Op::Scale(c), vec![a])
    }

    pub fn matmul(&mut self, a: Val, b: Val) -> Result<Val> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let ok = match (sa.len(), sb.len()) {
            (2, 2) => sa[1] == sb[0],
            (3, 3) => sa[0] == sb[0] && sa[2] == sb[1],
            (3, 2) => sa[2] == sb[0],
            _ => false,
        };
        if !ok {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        Ok(self.push(Op::MatMul, vec![a, b]))
    }

    pub fn transpose(&mut self, a: Val, d0: usize, d1: usize) -> Result<Val> {
        let sa = self.shape(a).to_vec();
        if d0 >= sa.len() || d1 >= sa.len() {
            return Err(Error::Shape {
                op: "transpose",
                lhs: sa,
                rhs: vec![d0, d1],
            });
        }
        Ok(self.push(Op::Transpose(d0, d1), vec![a]))
    }

    pub fn reshape(&mut self, a: Val, shape: Vec<usize>) -> Result<Val> {
        let sa = self.shape(a).to_vec();
        if sa.iter().product::<usize>() != shape.iter().product::<usize>() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: sa,
                rhs: shape,
            });
        }
        Ok(self.push(Op::Reshape(shape), vec![a]))
    }

    /// Concatenate 2-D tensors along axis 0.
    pub fn concat0(&mut self, xs: &[Val]) -> Result<Val> {
        if xs.is_empty() {
            return Err(Error::Config("concat0 of zero tensors".into()));
        }
        let cols = self.shape(xs[0]).get(1).copied();
        for &x in xs {
            let s = self.shape(x).to_vec();
            if s.len() != 2 || Some(s[1]) != cols {
                return Err(Error::Shape {
                    op: "concat0",
                    lhs: self.shape(xs[0]).to_vec(),
                    rhs: s,
                });
            }
        }
        Ok(self.push(Op::Concat0, xs.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Val, start: usize, len: usize) -> Result<Val> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || start + len > sa[0] {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: sa,
                rhs: vec![start, len],
            });
        }
        Ok(self.push(Op::SliceRows { start, len }, vec![a]))
    }

    pub fn gather_rows(&mut self, a: Val, idx: Vec<usize>) -> Result<Val> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || idx.iter().any(|&i| i >= sa[0]) {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: sa,
                rhs: idx,
            });
        }
        Ok(self.push(Op::GatherRows(idx), vec![a]))
    }

    pub fn gelu(&mut self, a: Val) -> Val {
        self.push(Op::Gelu, vec![a])
    }

    pub fn softmax_last(&mut self, a: Val) -> Val {
        self.push(Op::SoftmaxLast, vec![a])
    }

    pub fn layer_norm(&mut self, x: Val, gamma: Val, beta: Val, eps: f32) -> Result<Val> {
        let sx = self.shape(x).to_vec();
        let c = *sx.last().unwrap_or(&0);
        if c == 0 || self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape {
                op: "layer_norm",
                lhs: sx,
                rhs: self.shape(gamma).to_vec(),
            });
        }
        Ok(self.push(Op::LayerNorm { eps }, vec![x, gamma, beta]))
    }

    pub fn sum_all(&mut self, a: Val) -> Val {
        self.push(Op::SumAll, vec![a])
    }

    pub fn mean_all(&mut self, a: Val) -> Val {
        let n = self.value(a).numel();
        let s = self.sum_all(a);
        self.scale(s, 1.0 / n as f32)
    }

    pub fn abs(&mut self, a: Val) -> Val {
        self.push(Op::Abs, vec![a])
    }

    pub fn huber(&mut self, a: Val, delta: f32) -> Val {
        self.push(Op::Huber { delta }, vec![a])
    }

    /// Column-wise max over rows marked valid; input (P, F) -> (F,).
    pub fn masked_max0(&mut self, a: Val, valid: Vec<bool>) -> Result<Val> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || valid.len() != sa[0] {
            return Err(Error::Shape {
                op: "masked_max0",
                lhs: sa,
                rhs: vec![valid.len()],
            });
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::Data("masked_max0 with zero valid rows".into()));
        }
        Ok(self.push(Op::MaskedMax0(valid), vec![a]))
    }

    /// Scalar cross-entropy of a 1-D logit vector against a class index.
    pub fn cross_entropy_logits(&mut self, logits: Val, target: usize) -> Result<Val> {
        let s = self.shape(logits).to_vec();
        if s.len() != 1 || target >= s[0] {
            return Err(Error::Shape {
                op: "cross_entropy_logits",
                lhs: s,
                rhs: vec![target],
            });
        }
        Ok(self.push(Op::CrossEntropyLogits { target }, vec![logits]))
    }

    /// Unfold (S, Cin) into (S_out, kernel*Cin) patches for 1-D convolution.
    pub fn im2col1d(&mut self, a: Val, kernel: usize, stride: usize, pad: usize) -> Result<Val> {
        let sa = self.shape(a).to_vec();
        if sa.len() != 2 || sa[0] + 2 * pad < kernel || stride == 0 {
            return Err(Error::Shape {
                op: "im2col1d",
                lhs: sa,
                rhs: vec![kernel, stride, pad],
            });
        }
        debug_assert!(im2col_out_len(sa[0], kernel, stride, pad) > 0);
        Ok(self.push(
            Op::Im2Col1d {
                kernel,
                stride,
                pad,
            },
            vec![a],
        ))
    }

    // ---- reverse pass -------------------------------------------------

    /// Reverse-mode pass from a scalar loss. Visits each node exactly once
    /// in reverse topological order (the tape order).
    pub fn backward(&mut self, loss: Val) -> Result<()> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.nodes[loss.0].value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::scalar(1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            let Some(g) = grads[i].clone() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let node = &self.nodes[i];
            let pvals: Vec<&Tensor> = node.parents.iter().map(|p| &self.nodes[p.0].value).collect();
            let pgrads = ops::backward(&node.op, &g, &node.value, &pvals);
            let parents = node.parents.clone();
            for (p, pg) in parents.iter().zip(pgrads) {
                if !self.nodes[p.0].requires_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(pg.data()) {
                            *a += *b;
                        }
                    }
                    slot => *slot = Some(pg),
                }
            }
            // interior gradients are not retained
            if !matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    // ---- f64 replay ----------------------------------------------------

    /// Re-evaluate the tape in f64, substituting `overrides` for leaf values.
    /// Used by the finite-difference oracle; never used in training.
    pub fn eval_f64(
        &self,
        out: Val,
        overrides: &HashMap<usize, TensorBase<f64>>,
    ) -> TensorBase<f64> {
        let mut vals: Vec<Option<TensorBase<f64>>> = (0..=out.0).map(|_| None).collect();
        for i in 0..=out.0 {
            let node = &self.nodes[i];
            let v = if matches!(node.op, Op::Leaf) {
                overrides
                    .get(&i)
                    .cloned()
                    .unwrap_or_else(|| node.value.cast::<f64>())
            } else {
                let pvals: Vec<&TensorBase<f64>> = node
                    .parents
                    .iter()
                    .map(|p| vals[p.0].as_ref().expect("tape is topologically ordered"))
                    .collect();
                ops::eval::<f64>(&node.op, &pvals)
            };
            vals[i] = Some(v);
        }
        vals[out.0].take().unwrap()
    }
}
