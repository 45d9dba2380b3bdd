//! Reverse-mode differentiation over a fixed vocabulary of tensor operations.
//!
//! A [`Graph`] records every operation as it is evaluated; [`Graph::backward`]
//! then walks the record in reverse. Tensors are flat `f64` buffers with a
//! row-major shape. Only the layers and losses used by the pipeline are
//! supported; this is not a general-purpose autodiff library.

use nalgebra::DMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    Neg,
    Exp,
    Ln,
    Sqrt,
    Square,
    Sigmoid,
    Relu,
    LeakyRelu(f64),
    Softplus,
    Tanh,
    Lgamma,
    Digamma,
    Clamp(f64, f64),
    AddConst(f64),
    MulConst(f64),
}

#[derive(Debug, Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Slice {
        src: usize,
        offset: usize,
    },
    Gather {
        src: usize,
        idx: Vec<usize>,
    },
    Concat(Vec<usize>),
    Unary(usize, Unary),
    Binary(usize, usize, Binary),
    Sum(usize),
    Dot(usize, usize),
    Norm(usize),
    LogSumExp(usize),
    Affine {
        x: usize,
        w: usize,
        b: usize,
        n: usize,
        inp: usize,
        out: usize,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: usize,
        geom: ConvGeom,
    },
    MaxPool2 {
        x: usize,
        argmax: Vec<usize>,
    },
    MeanLast {
        x: usize,
        len: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: [usize; 3],
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    FrozenNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        dims: [usize; 3],
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    LogDet {
        a: usize,
        inv: Vec<f64>,
    },
    InvQuad {
        a: usize,
        x: usize,
        solved: Vec<f64>,
    },
    Outer(usize, usize),
    Gram(usize),
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    n: usize,
    cin: usize,
    len: usize,
    cout: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lout: usize,
}

struct Node {
    value: Vec<f64>,
    shape: Vec<usize>,
    op: Op,
    needs_grad: bool,
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

/// Per-channel statistics observed by a training-mode batch-norm node.
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to every recorded node.
pub struct Gradients {
    grads: Vec<Vec<f64>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` did not influence the output.
    pub fn of(&self, v: Var, len: usize) -> Vec<f64> {
        let g = &self.grads[v.0];
        if g.is_empty() {
            vec![0.0; len]
        } else {
            g.clone()
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

pub fn softplus_inv(y: f64) -> f64 {
    if y > 30.0 {
        y
    } else {
        y.exp_m1().ln()
    }
}

fn shape_len(shape: &[usize]) -> usize {
    shape.iter().product()
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

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), shape_len(&shape));
        self.nodes.push(Node {
            value,
            shape,
            op,
            needs_grad,
            batch_stats: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A trainable leaf.
    pub fn param(&mut self, values: &[f64], shape: &[usize]) -> Var {
        self.push(values.to_vec(), shape.to_vec(), Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, values: &[f64], shape: &[usize]) -> Var {
        self.push(values.to_vec(), shape.to_vec(), Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, v: f64) -> Var {
        self.constant(&[v], &[1])
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].value.len()
    }

    pub fn batch_stats(&self, v: Var) -> Option<BatchStats> {
        self.nodes[v.0]
            .batch_stats
            .as_ref()
            .map(|(m, s)| BatchStats {
                mean: m.clone(),
                var: s.clone(),
            })
    }

    /// Contiguous sub-tensor starting at flat `offset`, reshaped to `shape`.
    pub fn slice(&mut self, src: Var, offset: usize, shape: &[usize]) -> Var {
        let len = shape_len(shape);
        let value = self.nodes[src.0].value[offset..offset + len].to_vec();
        let ng = self.ng(src);
        self.push(value, shape.to_vec(), Op::Slice { src: src.0, offset }, ng)
    }

    pub fn reshape(&mut self, src: Var, shape: &[usize]) -> Var {
        assert_eq!(shape_len(shape), self.numel(src), "reshape size mismatch");
        self.slice(src, 0, shape)
    }

    /// Row `i` of a `[n, m]` tensor (any trailing shape flattened).
    pub fn row(&mut self, src: Var, i: usize) -> Var {
        let n = self.shape(src)[0];
        let m = self.numel(src) / n;
        self.slice(src, i * m, &[m])
    }

    pub fn element(&mut self, src: Var, i: usize) -> Var {
        self.slice(src, i, &[1])
    }

    /// Picks flat indices of `src`; `usize::MAX` yields a structural zero.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, shape: &[usize]) -> Var {
        assert_eq!(idx.len(), shape_len(shape));
        let sv = &self.nodes[src.0].value;
        let value = idx
            .iter()
            .map(|&i| if i == usize::MAX { 0.0 } else { sv[i] })
            .collect();
        let ng = self.ng(src);
        self.push(value, shape.to_vec(), Op::Gather { src: src.0, idx }, ng)
    }

    /// Flat concatenation.
    pub fn concat(&mut self, parts: &[Var], shape: &[usize]) -> Var {
        let mut value = Vec::new();
        for p in parts {
            value.extend_from_slice(&self.nodes[p.0].value);
        }
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(
            value,
            shape.to_vec(),
            Op::Concat(parts.iter().map(|p| p.0).collect()),
            ng,
        )
    }

    /// Stacks equal-length vectors into `[k, len]`.
    pub fn stack(&mut self, parts: &[Var]) -> Var {
        let len = self.numel(parts[0]);
        assert!(
            parts.iter().all(|p| self.numel(*p) == len),
            "stack length mismatch"
        );
        self.concat(parts, &[parts.len(), len])
    }

    fn unary(&mut self, src: Var, kind: Unary) -> Var {
        let x = &self.nodes[src.0].value;
        let f: Box<dyn Fn(f64) -> f64> = match kind {
            Unary::Neg => Box::new(|v: f64| -v),
            Unary::Exp => Box::new(f64::exp),
            Unary::Ln => Box::new(f64::ln),
            Unary::Sqrt => Box::new(f64::sqrt),
            Unary::Square => Box::new(|v: f64| v * v),
            Unary::Sigmoid => Box::new(sigmoid),
            Unary::Relu => Box::new(|v: f64| v.max(0.0)),
            Unary::LeakyRelu(s) => Box::new(move |v: f64| if v > 0.0 { v } else { s * v }),
            Unary::Softplus => Box::new(softplus),
            Unary::Tanh => Box::new(f64::tanh),
            Unary::Lgamma => Box::new(crate::special::ln_gamma),
            Unary::Digamma => Box::new(crate::special::digamma),
            Unary::Clamp(lo, hi) => Box::new(move |v: f64| v.clamp(lo, hi)),
            Unary::AddConst(c) => Box::new(move |v: f64| v + c),
            Unary::MulConst(c) => Box::new(move |v: f64| v * c),
        };
        let value: Vec<f64> = x.iter().map(|&v| f(v)).collect();
        let shape = self.nodes[src.0].shape.clone();
        let ng = self.ng(src);
        self.push(value, shape, Op::Unary(src.0, kind), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Neg)
    }
    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Exp)
    }
    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Ln)
    }
    pub fn sqrt(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sqrt)
    }
    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Square)
    }
    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Sigmoid)
    }
    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Relu)
    }
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        self.unary(x, Unary::LeakyRelu(slope))
    }
    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Softplus)
    }
    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Tanh)
    }
    pub fn lgamma(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Lgamma)
    }
    pub fn digamma(&mut self, x: Var) -> Var {
        self.unary(x, Unary::Digamma)
    }
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, Unary::Clamp(lo, hi))
    }
    pub fn add_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::AddConst(c))
    }
    pub fn mul_const(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, Unary::MulConst(c))
    }

    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Var {
        let (la, lb) = (self.numel(a), self.numel(b));
        assert!(
            la == lb || la == 1 || lb == 1,
            "binary op length mismatch: {la} vs {lb}"
        );
        let n = la.max(lb);
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let value = (0..n)
            .map(|i| {
                let x = av[if la == 1 { 0 } else { i }];
                let y = bv[if lb == 1 { 0 } else { i }];
                match kind {
                    Binary::Add => x + y,
                    Binary::Sub => x - y,
                    Binary::Mul => x * y,
                    Binary::Div => x / y,
                }
            })
            .collect();
        let shape = if la >= lb {
            self.nodes[a.0].shape.clone()
        } else {
            self.nodes[b.0].shape.clone()
        };
        let ng = self.ng(a) || self.ng(b);
        self.push(value, shape, Op::Binary(a.0, b.0, kind), ng)
    }

    /// Elementwise; a length-1 operand broadcasts.
    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Add)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Sub)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Mul)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Binary::Div)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.iter().sum();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::Sum(x.0), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.numel(x) as f64;
        let s = self.sum(x);
        self.mul_const(s, 1.0 / n)
    }

    /// Sum of scalar vars.
    pub fn sum_all(&mut self, xs: &[Var]) -> Var {
        let mut parts = Vec::with_capacity(xs.len());
        parts.extend_from_slice(xs);
        let len: usize = parts.iter().map(|p| self.numel(*p)).sum();
        let c = self.concat(&parts, &[len]);
        self.sum(c)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.numel(a), self.numel(b), "dot length mismatch");
        let s = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(x, y)| x * y)
            .sum();
        let ng = self.ng(a) || self.ng(b);
        self.push(vec![s], vec![1], Op::Dot(a.0, b.0), ng)
    }

    /// Euclidean norm; the gradient at the origin is taken as zero.
    pub fn norm(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0]
            .value
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::Norm(x.0), ng)
    }

    pub fn logsumexp(&mut self, x: Var) -> Var {
        let v = &self.nodes[x.0].value;
        let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let s = m + v.iter().map(|&a| (a - m).exp()).sum::<f64>().ln();
        let ng = self.ng(x);
        self.push(vec![s], vec![1], Op::LogSumExp(x.0), ng)
    }

    /// Log-probabilities of a softmax over all elements of `x`.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let lse = self.logsumexp(x);
        self.sub(x, lse)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let l = self.log_softmax(x);
        self.exp(l)
    }

    /// `y[n, out] = x[n, inp] · wᵀ + b`, with `w` stored `[out, inp]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Var {
        let wshape = self.shape(w).to_vec();
        let (out, inp) = (wshape[0], wshape[1]);
        let total = self.numel(x);
        assert_eq!(total % inp, 0, "affine input size mismatch");
        let n = total / inp;
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; n * out];
        for s in 0..n {
            let xs = &xv[s * inp..(s + 1) * inp];
            for o in 0..out {
                let wr = &wv[o * inp..(o + 1) * inp];
                value[s * out + o] = bv[o] + wr.iter().zip(xs).map(|(a, c)| a * c).sum::<f64>();
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            value,
            vec![n, out],
            Op::Affine {
                x: x.0,
                w: w.0,
                b: b.0,
                n,
                inp,
                out,
            },
            ng,
        )
    }

    /// 1-D convolution: `x[n, cin, len]`, `w[cout, cin, k]`, `b[cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let (n, cin, len) = (xs[0], xs[1], xs[2]);
        let (cout, k) = (ws[0], ws[2]);
        assert_eq!(ws[1], cin, "conv channel mismatch");
        assert!(len + 2 * pad >= k, "conv input shorter than kernel");
        let lout = (len + 2 * pad - k) / stride + 1;
        let geom = ConvGeom {
            n,
            cin,
            len,
            cout,
            k,
            stride,
            pad,
            lout,
        };
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = vec![0.0; n * cout * lout];
        for s in 0..n {
            for o in 0..cout {
                let out_row = &mut value[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                out_row.iter_mut().for_each(|v| *v = bv[o]);
                for c in 0..cin {
                    let xr = &xv[(s * cin + c) * len..(s * cin + c + 1) * len];
                    let wr = &wv[(o * cin + c) * k..(o * cin + c + 1) * k];
                    for (t, ov) in out_row.iter_mut().enumerate() {
                        let start = (t * stride) as isize - pad as isize;
                        let mut acc = 0.0;
                        for (j, &wj) in wr.iter().enumerate() {
                            let p = start + j as isize;
                            if p >= 0 && (p as usize) < len {
                                acc += wj * xr[p as usize];
                            }
                        }
                        *ov += acc;
                    }
                }
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        self.push(
            value,
            vec![n, cout, lout],
            Op::Conv1d {
                x: x.0,
                w: w.0,
                b: b.0,
                geom,
            },
            ng,
        )
    }

    /// Max-pool with window 2, stride 2 over the last axis.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        let rows = self.numel(x) / len;
        let lo = len / 2;
        let xv = &self.nodes[x.0].value;
        let mut value = Vec::with_capacity(rows * lo);
        let mut argmax = Vec::with_capacity(rows * lo);
        for r in 0..rows {
            for t in 0..lo {
                let i = r * len + 2 * t;
                let j = if xv[i + 1] > xv[i] { i + 1 } else { i };
                value.push(xv[j]);
                argmax.push(j);
            }
        }
        let mut oshape = shape.clone();
        *oshape.last_mut().unwrap() = lo;
        let ng = self.ng(x);
        self.push(value, oshape, Op::MaxPool2 { x: x.0, argmax }, ng)
    }

    /// Mean over the last axis (global average pooling).
    pub fn mean_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let len = *shape.last().unwrap();
        let value = self.nodes[x.0]
            .value
            .chunks(len)
            .map(|c| c.iter().sum::<f64>() / len as f64)
            .collect();
        let oshape = shape[..shape.len() - 1].to_vec();
        let ng = self.ng(x);
        self.push(value, oshape, Op::MeanLast { x: x.0, len }, ng)
    }

    fn norm_dims(&self, x: Var) -> [usize; 3] {
        let s = self.shape(x);
        match s.len() {
            2 => [s[0], s[1], 1],
            3 => [s[0], s[1], s[2]],
            _ => panic!("batch norm expects [n, c] or [n, c, l]"),
        }
    }

    /// Batch normalization with batch statistics (training mode).
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let [n, c, l] = self.norm_dims(x);
        let xv = &self.nodes[x.0].value;
        let m = (n * l) as f64;
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        for s in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    mean[ch] += xv[(s * c + ch) * l + t];
                }
            }
        }
        mean.iter_mut().for_each(|v| *v /= m);
        for s in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    let d = xv[(s * c + ch) * l + t] - mean[ch];
                    var[ch] += d * d;
                }
            }
        }
        var.iter_mut().for_each(|v| *v /= m);
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, &mean, &inv_std, [n, c, l]);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let v = self.push(
            value,
            shape,
            Op::BatchNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                dims: [n, c, l],
                xhat,
                inv_std,
            },
            ng,
        );
        self.nodes[v.0].batch_stats = Some((mean, var));
        v
    }

    /// Batch normalization with fixed running statistics (inference mode).
    pub fn frozen_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Var {
        let dims = self.norm_dims(x);
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let (value, xhat) = self.normalize(x, gamma, beta, running_mean, &inv_std, dims);
        let shape = self.shape(x).to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        self.push(
            value,
            shape,
            Op::FrozenNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                dims,
                xhat,
                inv_std,
            },
            ng,
        )
    }

    fn normalize(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: &[f64],
        [n, c, l]: [usize; 3],
    ) -> (Vec<f64>, Vec<f64>) {
        let xv = &self.nodes[x.0].value;
        let gv = &self.nodes[gamma.0].value;
        let bv = &self.nodes[beta.0].value;
        let mut xhat = vec![0.0; xv.len()];
        let mut value = vec![0.0; xv.len()];
        for s in 0..n {
            for ch in 0..c {
                for t in 0..l {
                    let i = (s * c + ch) * l + t;
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    value[i] = gv[ch] * xhat[i] + bv[ch];
                }
            }
        }
        (value, xhat)
    }

    fn square_dim(&self, a: Var) -> usize {
        let s = self.shape(a);
        assert!(s.len() == 2 && s[0] == s[1], "expected a square matrix");
        s[0]
    }

    /// ln|A| for symmetric positive-definite `A`; NaN when Cholesky fails.
    pub fn logdet_spd(&mut self, a: Var) -> Var {
        let d = self.square_dim(a);
        let m = DMatrix::from_row_slice(d, d, &self.nodes[a.0].value);
        let (value, inv) = match m.cholesky() {
            Some(ch) => {
                let ld = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
                let inv = ch.inverse();
                (ld, inv.transpose().as_slice().to_vec())
            }
            None => (f64::NAN, vec![f64::NAN; d * d]),
        };
        let ng = self.ng(a);
        self.push(vec![value], vec![1], Op::LogDet { a: a.0, inv }, ng)
    }

    /// xᵀA⁻¹x for symmetric positive-definite `A`.
    pub fn inv_quad(&mut self, a: Var, x: Var) -> Var {
        let d = self.square_dim(a);
        assert_eq!(self.numel(x), d);
        let m = DMatrix::from_row_slice(d, d, &self.nodes[a.0].value);
        let xv = nalgebra::DVector::from_column_slice(&self.nodes[x.0].value);
        let (value, solved) = match m.cholesky() {
            Some(ch) => {
                let s = ch.solve(&xv);
                (xv.dot(&s), s.as_slice().to_vec())
            }
            None => (f64::NAN, vec![f64::NAN; d]),
        };
        let ng = self.ng(a) || self.ng(x);
        self.push(
            vec![value],
            vec![1],
            Op::InvQuad {
                a: a.0,
                x: x.0,
                solved,
            },
            ng,
        )
    }

    /// `a bᵀ` as a `[len a, len b]` matrix.
    pub fn outer(&mut self, a: Var, b: Var) -> Var {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let mut value = Vec::with_capacity(av.len() * bv.len());
        for x in av {
            for y in bv {
                value.push(x * y);
            }
        }
        let shape = vec![av.len(), bv.len()];
        let ng = self.ng(a) || self.ng(b);
        self.push(value, shape, Op::Outer(a.0, b.0), ng)
    }

    /// `L Lᵀ` for square `L`.
    pub fn gram(&mut self, l: Var) -> Var {
        let d = self.square_dim(l);
        let lv = &self.nodes[l.0].value;
        let mut value = vec![0.0; d * d];
        for i in 0..d {
            for j in 0..d {
                value[i * d + j] = (0..d).map(|k| lv[i * d + k] * lv[j * d + k]).sum();
            }
        }
        let ng = self.ng(l);
        self.push(value, vec![d, d], Op::Gram(l.0), ng)
    }

    /// Gradients of the scalar `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.numel(out), 1, "backward needs a scalar output");
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[out.0] = vec![1.0];
        for id in (0..=out.0).rev() {
            if grads[id].is_empty() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = std::mem::take(&mut grads[id]);
            self.propagate(id, &g, &mut grads);
            grads[id] = g;
        }
        Gradients { grads }
    }

    fn acc<'a>(&self, grads: &'a mut [Vec<f64>], id: usize) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[id].needs_grad {
            return None;
        }
        if grads[id].is_empty() {
            grads[id] = vec![0.0; self.nodes[id].value.len()];
        }
        Some(&mut grads[id])
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) {
        let node = &self.nodes[id];
        match &node.op {
            Op::Leaf => {}
            Op::Slice { src, offset } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for (i, v) in g.iter().enumerate() {
                        gs[offset + i] += v;
                    }
                }
            }
            Op::Gather { src, idx } => {
                if let Some(gs) = self.acc(grads, *src) {
                    for (&i, v) in idx.iter().zip(g) {
                        if i != usize::MAX {
                            gs[i] += v;
                        }
                    }
                }
            }
            Op::Concat(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.nodes[p].value.len();
                    if let Some(gp) = self.acc(grads, p) {
                        for i in 0..len {
                            gp[i] += g[off + i];
                        }
                    }
                    off += len;
                }
            }
            Op::Unary(src, kind) => {
                let x = &self.nodes[*src].value;
                let y = &node.value;
                let kind = *kind;
                if let Some(gs) = self.acc(grads, *src) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Unary::Neg => -1.0,
                            Unary::Exp => y[i],
                            Unary::Ln => 1.0 / x[i],
                            Unary::Sqrt => 0.5 / y[i],
                            Unary::Square => 2.0 * x[i],
                            Unary::Sigmoid => y[i] * (1.0 - y[i]),
                            Unary::Relu => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::LeakyRelu(s) => {
                                if x[i] > 0.0 {
                                    1.0
                                } else {
                                    s
                                }
                            }
                            Unary::Softplus => sigmoid(x[i]),
                            Unary::Tanh => 1.0 - y[i] * y[i],
                            Unary::Lgamma => crate::special::digamma(x[i]),
                            Unary::Digamma => crate::special::trigamma(x[i]),
                            Unary::Clamp(lo, hi) => {
                                if x[i] >= lo && x[i] <= hi {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::AddConst(_) => 1.0,
                            Unary::MulConst(c) => c,
                        };
                        gs[i] += g[i] * d;
                    }
                }
            }
            Op::Binary(a, b, kind) => {
                let av = &self.nodes[*a].value;
                let bv = &self.nodes[*b].value;
                let (la, lb) = (av.len(), bv.len());
                let ia = |i: usize| if la == 1 { 0 } else { i };
                let ib = |i: usize| if lb == 1 { 0 } else { i };
                let kind = *kind;
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Binary::Add | Binary::Sub => 1.0,
                            Binary::Mul => bv[ib(i)],
                            Binary::Div => 1.0 / bv[ib(i)],
                        };
                        ga[ia(i)] += g[i] * d;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for i in 0..g.len() {
                        let d = match kind {
                            Binary::Add => 1.0,
                            Binary::Sub => -1.0,
                            Binary::Mul => av[ia(i)],
                            Binary::Div => -av[ia(i)] / (bv[ib(i)] * bv[ib(i)]),
                        };
                        gb[ib(i)] += g[i] * d;
                    }
                }
            }
            Op::Sum(src) => {
                if let Some(gs) = self.acc(grads, *src) {
                    gs.iter_mut().for_each(|v| *v += g[0]);
                }
            }
            Op::Dot(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                if let Some(ga) = self.acc(grads, *a) {
                    for (x, y) in ga.iter_mut().zip(&bv) {
                        *x += g[0] * y;
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for (x, y) in gb.iter_mut().zip(&av) {
                        *x += g[0] * y;
                    }
                }
            }
            Op::Norm(src) => {
                let n = node.value[0];
                let x = &self.nodes[*src].value;
                if n > 0.0 {
                    if let Some(gs) = self.acc(grads, *src) {
                        for (v, xi) in gs.iter_mut().zip(x) {
                            *v += g[0] * xi / n;
                        }
                    }
                }
            }
            Op::LogSumExp(src) => {
                let lse = node.value[0];
                let x = &self.nodes[*src].value;
                if let Some(gs) = self.acc(grads, *src) {
                    for (v, xi) in gs.iter_mut().zip(x) {
                        *v += g[0] * (xi - lse).exp();
                    }
                }
            }
            Op::Affine {
                x,
                w,
                b,
                n,
                inp,
                out,
            } => {
                let (n, inp, out) = (*n, *inp, *out);
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..n {
                        for o in 0..out {
                            let go = g[s * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let wr = &wv[o * inp..(o + 1) * inp];
                            for i in 0..inp {
                                gx[s * inp + i] += go * wr[i];
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for s in 0..n {
                        let xs = &xv[s * inp..(s + 1) * inp];
                        for o in 0..out {
                            let go = g[s * out + o];
                            if go == 0.0 {
                                continue;
                            }
                            let gr = &mut gw[o * inp..(o + 1) * inp];
                            for i in 0..inp {
                                gr[i] += go * xs[i];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for s in 0..n {
                        for o in 0..out {
                            gb[o] += g[s * out + o];
                        }
                    }
                }
            }
            Op::Conv1d { x, w, b, geom } => {
                let ConvGeom {
                    n,
                    cin,
                    len,
                    cout,
                    k,
                    stride,
                    pad,
                    lout,
                } = *geom;
                let xv = &self.nodes[*x].value;
                let wv = &self.nodes[*w].value;
                let tap = |t: usize, j: usize| -> Option<usize> {
                    let p = (t * stride + j) as isize - pad as isize;
                    if p >= 0 && (p as usize) < len {
                        Some(p as usize)
                    } else {
                        None
                    }
                };
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..n {
                        for o in 0..cout {
                            let gr = &g[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                            for c in 0..cin {
                                let wr = &wv[(o * cin + c) * k..(o * cin + c + 1) * k];
                                let base = (s * cin + c) * len;
                                for (t, &gt) in gr.iter().enumerate() {
                                    for (j, &wj) in wr.iter().enumerate() {
                                        if let Some(p) = tap(t, j) {
                                            gx[base + p] += gt * wj;
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if let Some(gw) = self.acc(grads, *w) {
                    for s in 0..n {
                        for o in 0..cout {
                            let gr = &g[(s * cout + o) * lout..(s * cout + o + 1) * lout];
                            for c in 0..cin {
                                let xr = &xv[(s * cin + c) * len..(s * cin + c + 1) * len];
                                let wbase = (o * cin + c) * k;
                                for j in 0..k {
                                    let mut acc = 0.0;
                                    for (t, &gt) in gr.iter().enumerate() {
                                        if let Some(p) = tap(t, j) {
                                            acc += gt * xr[p];
                                        }
                                    }
                                    gw[wbase + j] += acc;
                                }
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for s in 0..n {
                        for o in 0..cout {
                            gb[o] += g[(s * cout + o) * lout..(s * cout + o + 1) * lout]
                                .iter()
                                .sum::<f64>();
                        }
                    }
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if let Some(gx) = self.acc(grads, *x) {
                    for (&j, v) in argmax.iter().zip(g) {
                        gx[j] += v;
                    }
                }
            }
            Op::MeanLast { x, len } => {
                let len = *len;
                if let Some(gx) = self.acc(grads, *x) {
                    for (r, v) in g.iter().enumerate() {
                        for t in 0..len {
                            gx[r * len + t] += v / len as f64;
                        }
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
            } => {
                let [n, c, l] = *dims;
                let gv = &self.nodes[*gamma].value;
                let m = (n * l) as f64;
                let idx = |s: usize, ch: usize, t: usize| (s * c + ch) * l + t;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for s in 0..n {
                    for ch in 0..c {
                        for t in 0..l {
                            let i = idx(s, ch, t);
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..n {
                        for ch in 0..c {
                            let scale = gv[ch] * inv_std[ch] / m;
                            for t in 0..l {
                                let i = idx(s, ch, t);
                                gx[i] += scale * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for ch in 0..c {
                        gg[ch] += sum_gx[ch];
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for ch in 0..c {
                        gb[ch] += sum_g[ch];
                    }
                }
            }
            Op::FrozenNorm {
                x,
                gamma,
                beta,
                dims,
                xhat,
                inv_std,
            } => {
                let [n, c, l] = *dims;
                let gv = &self.nodes[*gamma].value;
                let idx = |s: usize, ch: usize, t: usize| (s * c + ch) * l + t;
                if let Some(gx) = self.acc(grads, *x) {
                    for s in 0..n {
                        for ch in 0..c {
                            for t in 0..l {
                                let i = idx(s, ch, t);
                                gx[i] += g[i] * gv[ch] * inv_std[ch];
                            }
                        }
                    }
                }
                if let Some(gg) = self.acc(grads, *gamma) {
                    for s in 0..n {
                        for ch in 0..c {
                            for t in 0..l {
                                let i = idx(s, ch, t);
                                gg[ch] += g[i] * xhat[i];
                            }
                        }
                    }
                }
                if let Some(gb) = self.acc(grads, *beta) {
                    for s in 0..n {
                        for ch in 0..c {
                            for t in 0..l {
                                gb[ch] += g[idx(s, ch, t)];
                            }
                        }
                    }
                }
            }
            Op::LogDet { a, inv } => {
                if let Some(ga) = self.acc(grads, *a) {
                    for (v, iv) in ga.iter_mut().zip(inv) {
                        *v += g[0] * iv;
                    }
                }
            }
            Op::InvQuad { a, x, solved } => {
                let d = solved.len();
                if let Some(gx) = self.acc(grads, *x) {
                    for i in 0..d {
                        gx[i] += g[0] * 2.0 * solved[i];
                    }
                }
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..d {
                        for j in 0..d {
                            ga[i * d + j] -= g[0] * solved[i] * solved[j];
                        }
                    }
                }
            }
            Op::Outer(a, b) => {
                let av = self.nodes[*a].value.clone();
                let bv = self.nodes[*b].value.clone();
                let (na, nb) = (av.len(), bv.len());
                if let Some(ga) = self.acc(grads, *a) {
                    for i in 0..na {
                        ga[i] += (0..nb).map(|j| g[i * nb + j] * bv[j]).sum::<f64>();
                    }
                }
                if let Some(gb) = self.acc(grads, *b) {
                    for j in 0..nb {
                        gb[j] += (0..na).map(|i| g[i * nb + j] * av[i]).sum::<f64>();
                    }
                }
            }
            Op::Gram(l) => {
                let lv = self.nodes[*l].value.clone();
                let d = (lv.len() as f64).sqrt() as usize;
                if let Some(gl) = self.acc(grads, *l) {
                    for i in 0..d {
                        for k in 0..d {
                            let mut acc = 0.0;
                            for j in 0..d {
                                acc += (g[i * d + j] + g[j * d + i]) * lv[j * d + k];
                            }
                            gl[i * d + k] += acc;
                        }
                    }
                }
            }
        }
    }
}
