use super::kernels::{self, ConvGeom};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics observed by a training-mode batch-norm node.
#[derive(Clone, Debug)]
pub struct BatchStats<S> {
    pub mean: Vec<S>,
    /// Unbiased per-channel variance, as used for running estimates.
    pub var: Vec<S>,
}

enum Op<S> {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    MulConst(Var, Vec<S>),
    AddBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    StopGradient,
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Conv2d {
        input: Var,
        kernel: Var,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
    },
    GlobalAvgPool(Var),
    GlobalMaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    L2NormalizeRows {
        x: Var,
        denom: Vec<S>,
        guarded: Vec<bool>,
    },
    LogSumExpRows {
        x: Var,
        probs: Vec<S>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
    requires_grad: bool,
}

/// Tape of tensor operations supporting reverse-mode differentiation.
///
/// Nodes are appended in creation order, which is a valid topological order,
/// so the reverse pass is a single backwards sweep over the tape.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last `backward` target with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    // ---------------------------------------------------------------- ops

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul",
                format!("cannot multiply {:?} by {:?}", [m, k], [k2, n]),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul_nt")?;
        let (n, k2) = self.value(b).dims2("matmul_nt")?;
        if k != k2 {
            return Err(Error::dim(
                "matmul_nt",
                format!("cannot multiply {:?} by transpose of {:?}", [m, k], [n, k2]),
            ));
        }
        let mut out = vec![S::zero(); m * n];
        kernels::gemm_nt(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new([m, n], out)?, Op::MatMulNT(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let out = kernels::transpose(r, c, self.value(a).data());
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([c, r], out)?, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.same_shape(tb, op)?;
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_with(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, factor: S) -> Var {
        let out = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Elementwise product with a constant of the same shape.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<S>) -> Result<Var> {
        let ta = self.value(a);
        ta.same_shape(c, "mul_const")?;
        let data = ta.data().iter().zip(c.data()).map(|(&x, &y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c.data().to_vec()), rg))
    }

    /// `x[N×K] + b[K]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (n, k) = self.value(x).dims2("add_bias")?;
        if self.value(b).shape() != [k] {
            return Err(Error::dim(
                "add_bias",
                format!("bias {:?} does not match {:?}", self.value(b).shape(), [n, k]),
            ));
        }
        let bias = self.value(b).data().to_vec();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(k) {
            for (v, &bv) in row.iter_mut().zip(&bias) {
                *v = *v + bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::new([n, k], out)?, Op::AddBias(x, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x < S::zero() { S::zero() } else { x });
        let rg = self.rg(a);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Forward identity; the reverse pass sends nothing back through it.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let out = self.value(a).clone();
        self.push(out, Op::StopGradient, false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::scalar(t.sum() / S::of(t.len() as f64));
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Row sums of a 2-D tensor: `[N×K] → [N]`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let (n, k) = self.value(a).dims2("sum_rows")?;
        let data = self.value(a).data().chunks(k).map(|r| r.iter().copied().sum()).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new([n], data)?, Op::SumRows(a), rg))
    }

    /// Stack tensors along the leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(parts[0]).shape().to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.shape()[1..] != first[1..] {
                return Err(Error::dim(
                    "concat_rows",
                    format!("trailing dims {:?} and {:?} differ", &first[1..], &t.shape()[1..]),
                ));
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = first;
        shape[0] = rows;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(shape, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// `out[i] = x[index[i]]` along the leading axis.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rows = t.shape()[0];
        let width = t.len() / rows.max(1);
        let mut data = Vec::with_capacity(index.len() * width);
        for &i in index {
            if i >= rows {
                return Err(Error::dim("gather_rows", format!("row {i} out of {rows}")));
            }
            data.extend_from_slice(&t.data()[i * width..(i + 1) * width]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = index.len();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(shape, data)?, Op::GatherRows(x, index.to_vec()), rg))
    }

    /// Cross-correlation of `input[N×C×H×W]` with `kernel[F×C×k×k]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, stride: usize, padding: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(input).dims4("conv2d")?;
        let (f, kc, kh, kw) = self.value(kernel).dims4("conv2d")?;
        if kc != c || kh != kw {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {:?} incompatible with input {:?}",
                    self.value(kernel).shape(),
                    self.value(input).shape()
                ),
            ));
        }
        if stride == 0 || kh > h + 2 * padding || kw > w + 2 * padding {
            return Err(Error::dim(
                "conv2d",
                format!(
                    "kernel {:?} larger than padded input {:?} (padding {padding}, stride {stride})",
                    self.value(kernel).shape(),
                    self.value(input).shape()
                ),
            ));
        }
        let geom = ConvGeom {
            channels: c,
            height: h,
            width: w,
            kernel: kh,
            stride,
            padding,
            out_h: (h + 2 * padding - kh) / stride + 1,
            out_w: (w + 2 * padding - kw) / stride + 1,
        };
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        // one patch matrix for the whole batch: column s·H'W' + p is position p of sample s
        let ld = n * cols_n;
        let mut cols = vec![S::zero(); rows * ld];
        for s in 0..n {
            kernels::im2col(&geom, &x[s * c * h * w..(s + 1) * c * h * w], &mut cols, ld, s * cols_n);
        }
        let mut wide = vec![S::zero(); f * ld];
        kernels::gemm(f, rows, ld, k, &cols, &mut wide);
        let out = unbatch(&wide, n, f, cols_n);
        let rg = self.rg(input) || self.rg(kernel);
        let t = Tensor::new([n, f, geom.out_h, geom.out_w], out)?;
        Ok(self.push(t, Op::Conv2d { input, kernel, geom }, rg))
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let shape = self.value(x).shape();
        if shape.len() < 2 {
            return Err(Error::dim("batch_norm", format!("input {shape:?} lacks a channel axis")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        for v in [gamma, beta] {
            if self.value(v).shape() != [c] {
                return Err(Error::dim(
                    "batch_norm",
                    format!("affine parameter {:?} vs {c} channels", self.value(v).shape()),
                ));
            }
        }
        Ok((n, c, inner))
    }

    /// Training-mode batch normalisation over every axis except 1.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: S) -> Result<(Var, BatchStats<S>)> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        let count = n * inner;
        if count < 2 {
            return Err(Error::Precondition {
                op: "batch_norm",
                detail: "training mode needs at least two values per channel".into(),
            });
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut mean = vec![S::zero(); c];
        let mut var = vec![S::zero(); c];
        for ch in 0..c {
            let mut acc = S::zero();
            for s in 0..n {
                let off = (s * c + ch) * inner;
                acc = acc + xv[off..off + inner].iter().copied().sum::<S>();
            }
            mean[ch] = acc / S::of(count as f64);
            let mut sq = S::zero();
            for s in 0..n {
                let off = (s * c + ch) * inner;
                for &v in &xv[off..off + inner] {
                    let d = v - mean[ch];
                    sq = sq + d * d;
                }
            }
            var[ch] = sq / S::of(count as f64);
        }
        let inv_std: Vec<S> = var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (xv[i] - mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let unbiased = S::of(count as f64 / (count - 1) as f64);
        let stats = BatchStats {
            mean,
            var: var.iter().map(|&v| v * unbiased).collect(),
        };
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let var_out = self.push(
            Tensor::new(shape, out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var_out, stats))
    }

    /// Inference-mode batch normalisation with fixed running statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[S],
        running_var: &[S],
        eps: S,
    ) -> Result<Var> {
        let (n, c, inner) = self.bn_check(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batch_norm_eval", "running statistics length mismatch"));
        }
        let xv = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let inv_std: Vec<S> = running_var.iter().map(|&v| S::one() / (v + eps).sqrt()).collect();
        let mut xhat = vec![S::zero(); xv.len()];
        let mut out = vec![S::zero(); xv.len()];
        for s in 0..n {
            for ch in 0..c {
                let off = (s * c + ch) * inner;
                for i in off..off + inner {
                    xhat[i] = (xv[i] - running_mean[ch]) * inv_std[ch];
                    out[i] = g[ch] * xhat[i] + b[ch];
                }
            }
        }
        let shape = self.value(x).shape().to_vec();
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Spatial mean: `[N×C×H×W] → [N×C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_avg_pool")?;
        let area = S::of((h * w) as f64);
        let data = self
            .value(x)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().copied().sum::<S>() / area)
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, c], data)?, Op::GlobalAvgPool(x), rg))
    }

    /// Spatial max: `[N×C×H×W] → [N×C]`. Ties route gradient to the first maximum.
    pub fn global_max_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4("global_max_pool")?;
        let mut data = Vec::with_capacity(n * c);
        let mut argmax = Vec::with_capacity(n * c);
        for (p, plane) in self.value(x).data().chunks(h * w).enumerate() {
            let mut best = 0;
            for (i, &v) in plane.iter().enumerate() {
                if v > plane[best] {
                    best = i;
                }
            }
            data.push(plane[best]);
            argmax.push(p * h * w + best);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, c], data)?, Op::GlobalMaxPool { x, argmax }, rg))
    }

    /// Divide each row by its Euclidean norm.
    ///
    /// With `eps = Some(e)` the divisor is `max(‖row‖, e)`; with `None` a
    /// zero-norm row is an error.
    pub fn l2_normalize_rows(&mut self, x: Var, eps: Option<S>) -> Result<Var> {
        let (n, d) = self.value(x).dims2("l2_normalize_rows")?;
        let mut denom = Vec::with_capacity(n);
        let mut guarded = Vec::with_capacity(n);
        let mut out = Vec::with_capacity(n * d);
        for (i, row) in self.value(x).data().chunks(d).enumerate() {
            let norm = row.iter().map(|&v| v * v).sum::<S>().sqrt();
            let (dn, g) = match eps {
                Some(e) if norm <= e => (e, true),
                None if !(norm > S::zero()) => {
                    return Err(Error::NumericDegenerate {
                        op: "l2_normalize_rows",
                        detail: format!("row {i} has zero norm"),
                    })
                }
                _ => (norm, false),
            };
            denom.push(dn);
            guarded.push(g);
            out.extend(row.iter().map(|&v| v / dn));
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n, d], out)?, Op::L2NormalizeRows { x, denom, guarded }, rg))
    }

    /// Row-wise `log Σ_j exp(x_ij)` over the entries selected by `mask`
    /// (all entries when `mask` is `None`), stabilised by max subtraction.
    pub fn log_sum_exp_rows(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (n, k) = self.value(x).dims2("log_sum_exp_rows")?;
        if let Some(m) = mask {
            if m.len() != n * k {
                return Err(Error::dim("log_sum_exp_rows", "mask size differs from input"));
            }
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut probs = vec![S::zero(); n * k];
        for i in 0..n {
            let sel = |j: usize| mask.is_none_or(|m| m[i * k + j]);
            let row = &xv[i * k..(i + 1) * k];
            let mx = (0..k)
                .filter(|&j| sel(j))
                .map(|j| row[j])
                .fold(S::neg_infinity(), S::max);
            if mx == S::neg_infinity() {
                return Err(Error::Precondition {
                    op: "log_sum_exp_rows",
                    detail: format!("row {i} selects no entries"),
                });
            }
            let mut total = S::zero();
            for j in (0..k).filter(|&j| sel(j)) {
                let e = (row[j] - mx).exp();
                probs[i * k + j] = e;
                total = total + e;
            }
            for j in 0..k {
                probs[i * k + j] = probs[i * k + j] / total;
            }
            out.push(mx + total.ln());
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new([n], out)?, Op::LogSumExpRows { x, probs }, rg))
    }

    /// `log Σ exp(x)` over a 1-D tensor, returned as a scalar.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        let row = self.reshape(x, [1, n])?;
        let lse = self.log_sum_exp_rows(row, None)?;
        self.reshape(lse, Vec::<usize>::new())
    }

    /// Mean sigmoid binary cross-entropy, in the stable form
    /// `max(x,0) − x·y + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor<S>) -> Result<Var> {
        let t = self.value(logits);
        t.same_shape(targets, "bce_with_logits")?;
        if let Some(bad) = targets.data().iter().find(|&&y| y != S::zero() && y != S::one()) {
            return Err(Error::Precondition {
                op: "bce_with_logits",
                detail: format!("target {bad} is not 0 or 1"),
            });
        }
        let total: S = t
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(S::zero()) - x * y + (-x.abs()).exp().ln_1p())
            .sum();
        let out = Tensor::scalar(total / S::of(t.len() as f64));
        let rg = self.rg(logits);
        Ok(self.push(
            out,
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            rg,
        ))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a single-element `loss`.
    ///
    /// Afterwards every leaf created with `requires_grad` holds a gradient
    /// (zeros when no path reaches it).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let seed = self.value(loss);
        if seed.len() != 1 {
            return Err(Error::dim(
                "backward",
                format!("loss must hold one element, got shape {:?}", seed.shape()),
            ));
        }
        let seed = Tensor::ones(seed.shape().to_vec());
        self.backward_with(loss, seed)
    }

    /// Reverse pass seeded with an explicit upstream gradient for `out`.
    pub fn backward_with(&mut self, out: Var, seed: Tensor<S>) -> Result<()> {
        self.value(out).same_shape(&seed, "backward")?;
        let mut grads: Vec<Option<Tensor<S>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(seed);
        for i in (0..=out.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if node.requires_grad && matches!(node.op, Op::Leaf) && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<S>>], v: Var, contrib: Tensor<S>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, &c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                    *a = *a + c;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn like(&self, v: Var, data: Vec<S>) -> Tensor<S> {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient shape")
    }

    fn propagate(&self, i: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf | Op::StopGradient => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul").unwrap();
                let n = self.value(*b).shape()[1];
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    kernels::gemm_nt(m, n, k, gd, self.value(*b).data(), &mut da);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); k * n];
                    kernels::gemm_tn(k, m, n, self.value(*a).data(), gd, &mut db);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = self.value(*a).dims2("matmul_nt").unwrap();
                let n = self.value(*b).shape()[0];
                if self.rg(*a) {
                    let mut da = vec![S::zero(); m * k];
                    kernels::gemm(m, n, k, gd, self.value(*b).data(), &mut da);
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let mut db = vec![S::zero(); n * k];
                    kernels::gemm_tn(n, m, k, gd, self.value(*a).data(), &mut db);
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = self.value(*a).dims2("transpose").unwrap();
                let da = kernels::transpose(c, r, gd);
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
                self.accumulate(grads, *b, self.like(*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.like(*a, gd.to_vec()));
                self.accumulate(grads, *b, self.like(*b, gd.iter().map(|&x| -x).collect()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if self.rg(*a) {
                    let da = gd.iter().zip(vb).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, self.like(*a, da));
                }
                if self.rg(*b) {
                    let db = gd.iter().zip(va).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Scale(a, f) => {
                let da = gd.iter().map(|&x| x * *f).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::MulConst(a, c) => {
                let da = gd.iter().zip(c).map(|(&x, &y)| x * y).collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::AddBias(x, b) => {
                self.accumulate(grads, *x, self.like(*x, gd.to_vec()));
                if self.rg(*b) {
                    let k = self.value(*b).len();
                    let mut db = vec![S::zero(); k];
                    for row in gd.chunks(k) {
                        for (acc, &v) in db.iter_mut().zip(row) {
                            *acc = *acc + v;
                        }
                    }
                    self.accumulate(grads, *b, self.like(*b, db));
                }
            }
            Op::Relu(a) => {
                let va = self.value(*a).data();
                let da = gd
                    .iter()
                    .zip(va)
                    .map(|(&x, &v)| if v > S::zero() { x } else { S::zero() })
                    .collect();
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Reshape(a) => self.accumulate(grads, *a, self.like(*a, gd.to_vec())),
            Op::Sum(a) => {
                let da = vec![gd[0]; self.value(*a).len()];
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                let da = vec![gd[0] / S::of(n as f64); n];
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::SumRows(a) => {
                let (n, k) = self.value(*a).dims2("sum_rows").unwrap();
                let mut da = Vec::with_capacity(n * k);
                for &v in gd {
                    da.extend(std::iter::repeat_n(v, k));
                }
                self.accumulate(grads, *a, self.like(*a, da));
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.accumulate(grads, p, self.like(p, gd[off..off + len].to_vec()));
                    off += len;
                }
            }
            Op::GatherRows(x, index) => {
                let t = self.value(*x);
                let width = t.len() / t.shape()[0].max(1);
                let mut dx = vec![S::zero(); t.len()];
                for (r, &src) in index.iter().enumerate() {
                    for c in 0..width {
                        dx[src * width + c] = dx[src * width + c] + gd[r * width + c];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::Conv2d { input, kernel, geom } => self.conv_backward(*input, *kernel, geom, gd, grads),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = self.bn_check(*x, *gamma, *beta).unwrap();
                let count = S::of((n * inner) as f64);
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for idx in off..off + inner {
                            dbeta[ch] = dbeta[ch] + gd[idx];
                            dgamma[ch] = dgamma[ch] + gd[idx] * xhat[idx];
                        }
                    }
                }
                if self.rg(*x) {
                    let mut dx = vec![S::zero(); gd.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let off = (s * c + ch) * inner;
                            let scale = gv[ch] * inv_std[ch] / count;
                            for idx in off..off + inner {
                                dx[idx] = scale * (count * gd[idx] - dbeta[ch] - xhat[idx] * dgamma[ch]);
                            }
                        }
                    }
                    self.accumulate(grads, *x, self.like(*x, dx));
                }
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c, inner) = self.bn_check(*x, *gamma, *beta).unwrap();
                let gv = self.value(*gamma).data();
                let mut dgamma = vec![S::zero(); c];
                let mut dbeta = vec![S::zero(); c];
                let mut dx = vec![S::zero(); gd.len()];
                for s in 0..n {
                    for ch in 0..c {
                        let off = (s * c + ch) * inner;
                        for idx in off..off + inner {
                            dbeta[ch] = dbeta[ch] + gd[idx];
                            dgamma[ch] = dgamma[ch] + gd[idx] * xhat[idx];
                            dx[idx] = gd[idx] * gv[ch] * inv_std[ch];
                        }
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
                self.accumulate(grads, *gamma, self.like(*gamma, dgamma));
                self.accumulate(grads, *beta, self.like(*beta, dbeta));
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = self.value(*x).dims4("global_avg_pool").unwrap();
                let area = S::of((h * w) as f64);
                let mut dx = Vec::with_capacity(self.value(*x).len());
                for &v in gd {
                    dx.extend(std::iter::repeat(v / area).take(h * w));
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::GlobalMaxPool { x, argmax } => {
                let mut dx = vec![S::zero(); self.value(*x).len()];
                for (&src, &v) in argmax.iter().zip(gd) {
                    dx[src] = dx[src] + v;
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::L2NormalizeRows { x, denom, guarded } => {
                let y = self.value(Var(i)).data();
                let d = y.len() / denom.len().max(1);
                let mut dx = vec![S::zero(); y.len()];
                for r in 0..denom.len() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &gd[r * d..(r + 1) * d];
                    let dot: S = if guarded[r] {
                        S::zero()
                    } else {
                        yr.iter().zip(gr).map(|(&a, &b)| a * b).sum()
                    };
                    for c in 0..d {
                        dx[r * d + c] = (gr[c] - yr[c] * dot) / denom[r];
                    }
                }
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::LogSumExpRows { x, probs } => {
                let k = probs.len() / gd.len().max(1);
                let dx = probs
                    .iter()
                    .enumerate()
                    .map(|(idx, &p)| gd[idx / k] * p)
                    .collect();
                self.accumulate(grads, *x, self.like(*x, dx));
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = self.value(*logits).data();
                let n = S::of(xv.len() as f64);
                let dx = xv
                    .iter()
                    .zip(targets)
                    .map(|(&x, &y)| gd[0] * (sigmoid(x) - y) / n)
                    .collect();
                self.accumulate(grads, *logits, self.like(*logits, dx));
            }
        }
    }

    fn conv_backward(
        &self,
        input: Var,
        kernel: Var,
        geom: &ConvGeom,
        gd: &[S],
        grads: &mut [Option<Tensor<S>>],
    ) {
        let (n, c, h, w) = self.value(input).dims4("conv2d").unwrap();
        let f = self.value(kernel).shape()[0];
        let (rows, cols_n) = (geom.col_rows(), geom.col_cols());
        let x = self.value(input).data();
        let k = self.value(kernel).data();
        let need_dx = self.rg(input);
        let need_dk = self.rg(kernel);
        let ld = n * cols_n;
        let dy = rebatch(gd, n, f, cols_n);
        let mut dk = vec![S::zero(); k.len()];
        let mut dx = if need_dx { vec![S::zero(); x.len()] } else { Vec::new() };
        if need_dk {
            let mut cols = vec![S::zero(); rows * ld];
            for s in 0..n {
                kernels::im2col(geom, &x[s * c * h * w..(s + 1) * c * h * w], &mut cols, ld, s * cols_n);
            }
            kernels::gemm_nt(f, ld, rows, &dy, &cols, &mut dk);
        }
        if need_dx {
            let mut dcols = vec![S::zero(); rows * ld];
            kernels::gemm_tn(rows, f, ld, k, &dy, &mut dcols);
            for s in 0..n {
                kernels::col2im(geom, &dcols, ld, s * cols_n, &mut dx[s * c * h * w..(s + 1) * c * h * w]);
            }
        }
        if need_dk {
            self.accumulate(grads, kernel, self.like(kernel, dk));
        }
        if need_dx {
            self.accumulate(grads, input, self.like(input, dx));
        }
    }
}

/// `[F × N·P]` (filter-major) to `[N × F × P]` (sample-major).
fn unbatch<S: Scalar>(wide: &[S], n: usize, f: usize, p: usize) -> Vec<S> {
    let mut out = Vec::with_capacity(wide.len());
    for s in 0..n {
        for fi in 0..f {
            let off = fi * n * p + s * p;
            out.extend_from_slice(&wide[off..off + p]);
        }
    }
    out
}

/// Inverse of [`unbatch`].
fn rebatch<S: Scalar>(x: &[S], n: usize, f: usize, p: usize) -> Vec<S> {
    let mut wide = vec![S::zero(); x.len()];
    for s in 0..n {
        for fi in 0..f {
            let off = fi * n * p + s * p;
            wide[off..off + p].copy_from_slice(&x[(s * f + fi) * p..(s * f + fi + 1) * p]);
        }
    }
    wide
}

pub(crate) fn sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}
