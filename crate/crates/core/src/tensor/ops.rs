//! Tape op set: forward evaluation (generic over element type) and f32
//! backward rules. Forward eval is shared by the f32 training path and the
//! f64 replay used by the finite-difference oracle.

use super::{Elem, Tensor, TensorBase};

pub(crate) const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
pub(crate) const GELU_A: f64 = 0.044715;

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    /// Elementwise add, identical shapes.
    Add,
    /// Add with rhs broadcast: rhs shape is a suffix of lhs shape.
    AddB,
    Sub,
    Mul,
    Scale(f32),
    MatMul,
    Transpose(usize, usize),
    Reshape(Vec<usize>),
    Concat0,
    SliceRows { start: usize, len: usize },
    GatherRows(Vec<usize>),
    Gelu,
    SoftmaxLast,
    LayerNorm { eps: f32 },
    SumAll,
    Abs,
    Huber { delta: f32 },
    MaskedMax0(Vec<bool>),
    CrossEntropyLogits { target: usize },
    Im2Col1d { kernel: usize, stride: usize, pad: usize },
}

pub(crate) fn im2col_out_len(s: usize, kernel: usize, stride: usize, pad: usize) -> usize {
    (s + 2 * pad - kernel) / stride + 1
}

fn gelu_f64(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad_f64(x: f64) -> f64 {
    let inner = GELU_C * (x + GELU_A * x * x * x);
    let t = inner.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

fn huber_f64(x: f64, delta: f64) -> f64 {
    let a = x.abs();
    if a <= delta {
        0.5 * x * x
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// (batch, p, q, r) dims for a validated matmul; batch == 0 marks plain 2-D.
fn matmul_dims(a: &[usize], b: &[usize]) -> (usize, usize, usize, usize, bool) {
    match (a.len(), b.len()) {
        (2, 2) => (1, a[0], a[1], b[1], false),
        (3, 3) => (a[0], a[1], a[2], b[2], true),
        (3, 2) => (a[0], a[1], a[2], b[1], true),
        _ => unreachable!("matmul shapes validated at build time"),
    }
}

pub(crate) fn eval<E: Elem>(op: &Op, inputs: &[&TensorBase<E>]) -> TensorBase<E> {
    match op {
        Op::Leaf => unreachable!("leaves are not re-evaluated"),
        Op::Add => {
            let (a, b) = (inputs[0], inputs[1]);
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x + y)
                .collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::AddB => {
            let (a, b) = (inputs[0], inputs[1]);
            let bn = b.numel();
            let data = a
                .data()
                .iter()
                .enumerate()
                .map(|(i, &x)| x + b.data()[i % bn])
                .collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::Sub => {
            let (a, b) = (inputs[0], inputs[1]);
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x - y)
                .collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::Mul => {
            let (a, b) = (inputs[0], inputs[1]);
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| x * y)
                .collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::Scale(c) => {
            let c = E::from_f32(*c);
            let a = inputs[0];
            let data = a.data().iter().map(|&x| x * c).collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::MatMul => {
            let (a, b) = (inputs[0], inputs[1]);
            let (batch, p, q, r, batched) = matmul_dims(a.shape(), b.shape());
            let b_batched = b.shape().len() == 3;
            let mut out = vec![E::zero(); batch * p * r];
            for bi in 0..batch {
                let ao = bi * p * q;
                let bo = if b_batched { bi * q * r } else { 0 };
                for i in 0..p {
                    for j in 0..r {
                        let mut acc = 0.0f64;
                        for k in 0..q {
                            acc += a.data()[ao + i * q + k].to_f64()
                                * b.data()[bo + k * r + j].to_f64();
                        }
                        out[bi * p * r + i * r + j] = E::from_f64(acc);
                    }
                }
            }
            let shape = if batched {
                vec![batch, p, r]
            } else {
                vec![p, r]
            };
            TensorBase::new(shape, out).unwrap()
        }
        Op::Transpose(d0, d1) => {
            let a = inputs[0];
            let mut shape = a.shape().to_vec();
            shape.swap(*d0, *d1);
            let in_strides = strides(a.shape());
            let mut data = vec![E::zero(); a.numel()];
            let out_strides = strides(&shape);
            for (lin, slot) in data.iter_mut().enumerate() {
                // decompose output index, swap axes, read input
                let mut rem = lin;
                let mut in_off = 0usize;
                for (d, &st) in out_strides.iter().enumerate() {
                    let idx = rem / st;
                    rem %= st;
                    let in_d = if d == *d0 {
                        *d1
                    } else if d == *d1 {
                        *d0
                    } else {
                        d
                    };
                    in_off += idx * in_strides[in_d];
                }
                *slot = a.data()[in_off];
            }
            TensorBase::new(shape, data).unwrap()
        }
        Op::Reshape(shape) => {
            let a = inputs[0];
            TensorBase::new(shape.clone(), a.data().to_vec()).unwrap()
        }
        Op::Concat0 => {
            let cols = inputs[0].shape()[1];
            let rows: usize = inputs.iter().map(|t| t.shape()[0]).sum();
            let mut data = Vec::with_capacity(rows * cols);
            for t in inputs {
                data.extend_from_slice(t.data());
            }
            TensorBase::new(vec![rows, cols], data).unwrap()
        }
        Op::SliceRows { start, len } => {
            let a = inputs[0];
            let cols = a.shape()[1];
            let data = a.data()[start * cols..(start + len) * cols].to_vec();
            TensorBase::new(vec![*len, cols], data).unwrap()
        }
        Op::GatherRows(idx) => {
            let a = inputs[0];
            let cols = a.shape()[1];
            let mut data = Vec::with_capacity(idx.len() * cols);
            for &i in idx {
                data.extend_from_slice(&a.data()[i * cols..(i + 1) * cols]);
            }
            TensorBase::new(vec![idx.len(), cols], data).unwrap()
        }
        Op::Gelu => {
            let a = inputs[0];
            let data = a
                .data()
                .iter()
                .map(|&x| E::from_f64(gelu_f64(x.to_f64())))
                .collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::SoftmaxLast => {
            let a = inputs[0];
            let n = *a.shape().last().unwrap();
            let rows = a.numel() / n;
            let mut data = vec![E::zero(); a.numel()];
            for r in 0..rows {
                let row = &a.data()[r * n..(r + 1) * n];
                let m = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
                let exps: Vec<f64> = row.iter().map(|&x| (x.to_f64() - m).exp()).collect();
                let sum: f64 = exps.iter().sum();
                for (j, e) in exps.iter().enumerate() {
                    data[r * n + j] = E::from_f64(e / sum);
                }
            }
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::LayerNorm { eps } => {
            let (x, gamma, beta) = (inputs[0], inputs[1], inputs[2]);
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let eps = *eps as f64;
            let mut data = vec![E::zero(); x.numel()];
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let mean: f64 = row.iter().map(|&v| v.to_f64()).sum::<f64>() / c as f64;
                let var: f64 = row
                    .iter()
                    .map(|&v| {
                        let d = v.to_f64() - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                for j in 0..c {
                    let xh = (row[j].to_f64() - mean) * inv;
                    data[r * c + j] = E::from_f64(
                        xh * gamma.data()[j].to_f64() + beta.data()[j].to_f64(),
                    );
                }
            }
            TensorBase::new(x.shape().to_vec(), data).unwrap()
        }
        Op::SumAll => {
            let a = inputs[0];
            let s: f64 = a.data().iter().map(|&x| x.to_f64()).sum();
            TensorBase::scalar(E::from_f64(s))
        }
        Op::Abs => {
            let a = inputs[0];
            let data = a.data().iter().map(|&x| x.abs()).collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::Huber { delta } => {
            let a = inputs[0];
            let d = *delta as f64;
            let data = a
                .data()
                .iter()
                .map(|&x| E::from_f64(huber_f64(x.to_f64(), d)))
                .collect();
            TensorBase::new(a.shape().to_vec(), data).unwrap()
        }
        Op::MaskedMax0(valid) => {
            let a = inputs[0];
            let f = a.shape()[1];
            let mut data = vec![E::neg_infinity(); f];
            for (i, &v) in valid.iter().enumerate() {
                if !v {
                    continue;
                }
                for j in 0..f {
                    let x = a.data()[i * f + j];
                    if x > data[j] {
                        data[j] = x;
                    }
                }
            }
            TensorBase::new(vec![f], data).unwrap()
        }
        Op::CrossEntropyLogits { target } => {
            let a = inputs[0];
            let m = a
                .data()
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x.to_f64()));
            let lse: f64 = m + a
                .data()
                .iter()
                .map(|&x| (x.to_f64() - m).exp())
                .sum::<f64>()
                .ln();
            TensorBase::scalar(E::from_f64(lse - a.data()[*target].to_f64()))
        }
        Op::Im2Col1d {
            kernel,
            stride,
            pad,
        } => {
            let a = inputs[0];
            let (s, cin) = (a.shape()[0], a.shape()[1]);
            let out_len = im2col_out_len(s, *kernel, *stride, *pad);
            let mut data = vec![E::zero(); out_len * kernel * cin];
            for t in 0..out_len {
                for j in 0..*kernel {
                    let src = (t * stride + j) as isize - *pad as isize;
                    if src < 0 || src as usize >= s {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..cin {
                        data[t * kernel * cin + j * cin + c] = a.data()[src * cin + c];
                    }
                }
            }
            TensorBase::new(vec![out_len, kernel * cin], data).unwrap()
        }
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Gradients w.r.t. each parent, in parent order.
pub(crate) fn backward(op: &Op, gout: &Tensor, out: &Tensor, parents: &[&Tensor]) -> Vec<Tensor> {
    match op {
        Op::Leaf => vec![],
        Op::Add => vec![gout.clone(), gout.clone()],
        Op::AddB => {
            let b = parents[1];
            let bn = b.numel();
            let mut gb = vec![0.0f64; bn];
            for (i, &g) in gout.data().iter().enumerate() {
                gb[i % bn] += g as f64;
            }
            vec![
                gout.clone(),
                Tensor::new(b.shape().to_vec(), gb.iter().map(|&x| x as f32).collect()).unwrap(),
            ]
        }
        Op::Sub => {
            let gb = gout.data().iter().map(|&g| -g).collect();
            vec![
                gout.clone(),
                Tensor::new(parents[1].shape().to_vec(), gb).unwrap(),
            ]
        }
        Op::Mul => {
            let (a, b) = (parents[0], parents[1]);
            let ga = gout
                .data()
                .iter()
                .zip(b.data())
                .map(|(&g, &y)| g * y)
                .collect();
            let gb = gout
                .data()
                .iter()
                .zip(a.data())
                .map(|(&g, &x)| g * x)
                .collect();
            vec![
                Tensor::new(a.shape().to_vec(), ga).unwrap(),
                Tensor::new(b.shape().to_vec(), gb).unwrap(),
            ]
        }
        Op::Scale(c) => {
            let ga = gout.data().iter().map(|&g| g * c).collect();
            vec![Tensor::new(parents[0].shape().to_vec(), ga).unwrap()]
        }
        Op::MatMul => {
            let (a, b) = (parents[0], parents[1]);
            let (batch, p, q, r, _) = matmul_dims(a.shape(), b.shape());
            let b_batched = b.shape().len() == 3;
            let mut ga = vec![0.0f64; a.numel()];
            let mut gb = vec![0.0f64; b.numel()];
            for bi in 0..batch {
                let ao = bi * p * q;
                let bo = if b_batched { bi * q * r } else { 0 };
                let go = bi * p * r;
                // dA = G · B^T
                for i in 0..p {
                    for k in 0..q {
                        let mut acc = 0.0f64;
                        for j in 0..r {
                            acc += gout.data()[go + i * r + j] as f64
                                * b.data()[bo + k * r + j] as f64;
                        }
                        ga[ao + i * q + k] += acc;
                    }
                }
                // dB = A^T · G
                for k in 0..q {
                    for j in 0..r {
                        let mut acc = 0.0f64;
                        for i in 0..p {
                            acc += a.data()[ao + i * q + k] as f64
                                * gout.data()[go + i * r + j] as f64;
                        }
                        gb[bo + k * r + j] += acc;
                    }
                }
            }
            vec![
                Tensor::new(a.shape().to_vec(), ga.iter().map(|&x| x as f32).collect()).unwrap(),
                Tensor::new(b.shape().to_vec(), gb.iter().map(|&x| x as f32).collect()).unwrap(),
            ]
        }
        Op::Transpose(d0, d1) => {
            vec![eval::<f32>(&Op::Transpose(*d0, *d1), &[gout])]
        }
        Op::Reshape(_) => {
            vec![Tensor::new(parents[0].shape().to_vec(), gout.data().to_vec()).unwrap()]
        }
        Op::Concat0 => {
            let cols = parents[0].shape()[1];
            let mut grads = Vec::with_capacity(parents.len());
            let mut off = 0usize;
            for p in parents {
                let rows = p.shape()[0];
                let g = gout.data()[off * cols..(off + rows) * cols].to_vec();
                grads.push(Tensor::new(vec![rows, cols], g).unwrap());
                off += rows;
            }
            grads
        }
        Op::SliceRows { start, len } => {
            let a = parents[0];
            let cols = a.shape()[1];
            let mut g = Tensor::zeros(a.shape());
            g.data_mut()[start * cols..(start + len) * cols].copy_from_slice(gout.data());
            vec![g]
        }
        Op::GatherRows(idx) => {
            let a = parents[0];
            let cols = a.shape()[1];
            let mut g = Tensor::zeros(a.shape());
            for (row, &i) in idx.iter().enumerate() {
                for c in 0..cols {
                    g.data_mut()[i * cols + c] += gout.data()[row * cols + c];
                }
            }
            vec![g]
        }
        Op::Gelu => {
            let a = parents[0];
            let g = a
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&x, &g)| (gelu_grad_f64(x as f64) * g as f64) as f32)
                .collect();
            vec![Tensor::new(a.shape().to_vec(), g).unwrap()]
        }
        Op::SoftmaxLast => {
            let y = out;
            let n = *y.shape().last().unwrap();
            let rows = y.numel() / n;
            let mut g = vec![0.0f32; y.numel()];
            for r in 0..rows {
                let yo = &y.data()[r * n..(r + 1) * n];
                let go = &gout.data()[r * n..(r + 1) * n];
                let dot: f64 = yo
                    .iter()
                    .zip(go)
                    .map(|(&y, &g)| y as f64 * g as f64)
                    .sum();
                for j in 0..n {
                    g[r * n + j] = (yo[j] as f64 * (go[j] as f64 - dot)) as f32;
                }
            }
            vec![Tensor::new(y.shape().to_vec(), g).unwrap()]
        }
        Op::LayerNorm { eps } => {
            let (x, gamma) = (parents[0], parents[1]);
            let c = *x.shape().last().unwrap();
            let rows = x.numel() / c;
            let eps = *eps as f64;
            let mut gx = vec![0.0f32; x.numel()];
            let mut gg = vec![0.0f64; c];
            let mut gb = vec![0.0f64; c];
            for r in 0..rows {
                let row = &x.data()[r * c..(r + 1) * c];
                let go = &gout.data()[r * c..(r + 1) * c];
                let mean: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / c as f64;
                let var: f64 = row
                    .iter()
                    .map(|&v| {
                        let d = v as f64 - mean;
                        d * d
                    })
                    .sum::<f64>()
                    / c as f64;
                let inv = 1.0 / (var + eps).sqrt();
                let xhat: Vec<f64> = row.iter().map(|&v| (v as f64 - mean) * inv).collect();
                let dxhat: Vec<f64> = go
                    .iter()
                    .enumerate()
                    .map(|(j, &g)| g as f64 * gamma.data()[j] as f64)
                    .collect();
                let m1: f64 = dxhat.iter().sum::<f64>() / c as f64;
                let m2: f64 = dxhat
                    .iter()
                    .zip(&xhat)
                    .map(|(&d, &h)| d * h)
                    .sum::<f64>()
                    / c as f64;
                for j in 0..c {
                    gx[r * c + j] = (inv * (dxhat[j] - m1 - xhat[j] * m2)) as f32;
                    gg[j] += go[j] as f64 * xhat[j];
                    gb[j] += go[j] as f64;
                }
            }
            vec![
                Tensor::new(x.shape().to_vec(), gx).unwrap(),
                Tensor::new(vec![c], gg.iter().map(|&v| v as f32).collect()).unwrap(),
                Tensor::new(vec![c], gb.iter().map(|&v| v as f32).collect()).unwrap(),
            ]
        }
        Op::SumAll => {
            let g = gout.item();
            vec![Tensor::full(parents[0].shape(), g)]
        }
        Op::Abs => {
            let a = parents[0];
            let g = a
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&x, &g)| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                })
                .collect();
            vec![Tensor::new(a.shape().to_vec(), g).unwrap()]
        }
        Op::Huber { delta } => {
            let a = parents[0];
            let d = *delta;
            let g = a
                .data()
                .iter()
                .zip(gout.data())
                .map(|(&x, &g)| x.clamp(-d, d) * g)
                .collect();
            vec![Tensor::new(a.shape().to_vec(), g).unwrap()]
        }
        Op::MaskedMax0(valid) => {
            let a = parents[0];
            let f = a.shape()[1];
            let mut g = Tensor::zeros(a.shape());
            for j in 0..f {
                let mut best: Option<(usize, f32)> = None;
                for (i, &v) in valid.iter().enumerate() {
                    if !v {
                        continue;
                    }
                    let x = a.data()[i * f + j];
                    if best.map_or(true, |(_, bx)| x > bx) {
                        best = Some((i, x));
                    }
                }
                if let Some((i, _)) = best {
                    g.data_mut()[i * f + j] += gout.data()[j];
                }
            }
            vec![g]
        }
        Op::CrossEntropyLogits { target } => {
            let a = parents[0];
            let g = gout.item() as f64;
            let m = a
                .data()
                .iter()
                .fold(f64::NEG_INFINITY, |m, &x| m.max(x as f64));
            let exps: Vec<f64> = a.data().iter().map(|&x| (x as f64 - m).exp()).collect();
            let sum: f64 = exps.iter().sum();
            let grad = exps
                .iter()
                .enumerate()
                .map(|(i, &e)| {
                    let p = e / sum;
                    ((p - if i == *target { 1.0 } else { 0.0 }) * g) as f32
                })
                .collect();
            vec![Tensor::new(a.shape().to_vec(), grad).unwrap()]
        }
        Op::Im2Col1d {
            kernel,
            stride,
            pad,
        } => {
            let a = parents[0];
            let (s, cin) = (a.shape()[0], a.shape()[1]);
            let out_len = im2col_out_len(s, *kernel, *stride, *pad);
            let mut g = Tensor::zeros(a.shape());
            for t in 0..out_len {
                for j in 0..*kernel {
                    let src = (t * stride + j) as isize - *pad as isize;
                    if src < 0 || src as usize >= s {
                        continue;
                    }
                    let src = src as usize;
                    for c in 0..cin {
                        g.data_mut()[src * cin + c] += gout.data()[t * kernel * cin + j * cin + c];
                    }
                }
            }
            vec![g]
        }
    }
}
