use super::{shape_err, Tensor, TensorError};

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Exp,
    Neg,
    Abs,
    /// `elu(u) + 1`, strictly positive.
    Elu1,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul {
        a: usize,
        b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: usize,
        b: usize,
        bcast: Broadcast,
    },
    ScalarMul {
        a: usize,
        c: f64,
    },
    Unary {
        kind: UnaryKind,
        a: usize,
    },
    ClampMin {
        a: usize,
        floor: f64,
    },
    Reduce {
        a: usize,
        kind: ReduceKind,
        outer: usize,
        extent: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    Transpose {
        a: usize,
        rows: usize,
        cols: usize,
    },
    Reshape {
        a: usize,
    },
    Concat {
        parts: Vec<usize>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Slice {
        a: usize,
        outer: usize,
        src_chunk: usize,
        offset: usize,
        len: usize,
    },
    ExpandRows {
        a: usize,
        n: usize,
    },
    ExpandCols {
        a: usize,
        n: usize,
    },
    SoftmaxRows {
        a: usize,
        rows: usize,
        cols: usize,
    },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        rows: usize,
        cols: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv1d {
        x: usize,
        w: usize,
        b: Option<usize>,
        len: usize,
        k: usize,
        d_in: usize,
        d_out: usize,
    },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records one forward pass. Nodes are appended in evaluation order, so the
/// sequence is always topologically sorted.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients of a scalar loss with respect to every node of a consumed tape.
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when the node does not influence the loss or was not tracked.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `var`, or zeros of the matching length when untracked.
    pub fn get_or_zeros(&self, var: Var, len: usize) -> Vec<f64> {
        self.get(var).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }

    /// Adds the gradient of `var` into `tensor`'s grad slot.
    pub fn accumulate_into(&self, var: Var, tensor: &mut Tensor) -> Result<(), TensorError> {
        match self.get(var) {
            Some(g) => tensor.accumulate_grad(g),
            None => Ok(()),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += av * bv;
            }
        }
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_consumed(&self) -> bool {
        self.consumed
    }

    fn node(&self, v: Var) -> Result<&Node, TensorError> {
        self.nodes.get(v.0).ok_or(TensorError::UnknownVar(v.0))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Copies a node's value out as a gradient-free tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.value.clone()).expect("tape nodes hold valid shapes")
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, needs_grad: bool) -> Result<Var, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, vars: &[Var]) -> Result<bool, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let mut any = false;
        for &v in vars {
            any |= self.node(v)?.needs_grad;
        }
        Ok(any)
    }

    /// Registers a leaf that participates in differentiation iff the tensor
    /// has `requires_grad` set.
    pub fn param(&mut self, t: &Tensor) -> Result<Var, TensorError> {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Registers a leaf that is always treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Result<Var, TensorError> {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, false)
    }

    pub fn scalar(&mut self, value: f64) -> Result<Var, TensorError> {
        self.constant(Tensor::scalar(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let ng = self.check(&[a, b])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(shape_err("matmul", format!("{:?} x {:?}", na.shape, nb.shape)));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(&na.value, &nb.value, &mut out, m, k, n);
        self.push(
            vec![m, n],
            out,
            Op::MatMul {
                a: a.0,
                b: b.0,
                m,
                k,
                n,
            },
            ng,
        )
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var, TensorError> {
        let ng = self.check(&[a, b])?;
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let bcast = if na.shape == nb.shape {
            Broadcast::Same
        } else if nb.value.len() == 1 {
            Broadcast::RightScalar
        } else if na.value.len() == 1 {
            Broadcast::LeftScalar
        } else {
            let op = match kind {
                BinaryKind::Add => "add",
                BinaryKind::Sub => "sub",
                BinaryKind::Mul => "mul",
                BinaryKind::Div => "div",
            };
            return Err(shape_err(op, format!("{:?} vs {:?}", na.shape, nb.shape)));
        };
        let shape = if bcast == Broadcast::LeftScalar {
            nb.shape.clone()
        } else {
            na.shape.clone()
        };
        let len = numel(&shape);
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f64> = (0..len)
            .map(|i| {
                let x = if bcast == Broadcast::LeftScalar {
                    na.value[0]
                } else {
                    na.value[i]
                };
                let y = if bcast == Broadcast::RightScalar {
                    nb.value[0]
                } else {
                    nb.value[i]
                };
                f(x, y)
            })
            .collect();
        self.push(
            shape,
            out,
            Op::Binary {
                kind,
                a: a.0,
                b: b.0,
                bcast,
            },
            ng,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scalar_mul(&mut self, a: Var, c: f64) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let out = na.value.iter().map(|v| v * c).collect();
        self.push(na.shape.clone(), out, Op::ScalarMul { a: a.0, c }, ng)
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let out = na
            .value
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Neg => -v,
                UnaryKind::Abs => v.abs(),
                UnaryKind::Elu1 => {
                    if v > 0.0 {
                        v + 1.0
                    } else {
                        v.exp()
                    }
                }
            })
            .collect();
        self.push(na.shape.clone(), out, Op::Unary { kind, a: a.0 }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Neg, a)
    }

    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Abs, a)
    }

    /// `elu(u) + 1`: `u + 1` for positive `u`, `exp(u)` otherwise.
    pub fn elu_plus_one(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(UnaryKind::Elu1, a)
    }

    pub fn clamp_min(&mut self, a: Var, floor: f64) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let out = na.value.iter().map(|&v| v.max(floor)).collect();
        self.push(na.shape.clone(), out, Op::ClampMin { a: a.0, floor }, ng)
    }

    /// Reduces along `axis`, or over every element when `axis` is `None`.
    pub fn reduce(&mut self, a: Var, axis: Option<usize>, kind: ReduceKind) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let (outer, extent, inner, shape) = match axis {
            None => (1, na.value.len(), 1, Vec::new()),
            Some(ax) => {
                if ax >= na.shape.len() {
                    return Err(TensorError::InvalidAxis {
                        axis: ax,
                        rank: na.shape.len(),
                    });
                }
                let mut shape = na.shape.clone();
                shape.remove(ax);
                (numel(&na.shape[..ax]), na.shape[ax], numel(&na.shape[ax + 1..]), shape)
            }
        };
        let mut out = vec![0.0; outer * inner];
        let mut argmax = Vec::new();
        if kind == ReduceKind::Max {
            argmax = vec![0; outer * inner];
        }
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| na.value[(o * extent + j) * inner + i];
                let slot = o * inner + i;
                out[slot] = match kind {
                    ReduceKind::Sum => (0..extent).map(at).sum(),
                    ReduceKind::Mean => (0..extent).map(at).sum::<f64>() / extent as f64,
                    ReduceKind::Max => {
                        let mut best = 0;
                        for j in 1..extent {
                            if at(j) > at(best) {
                                best = j;
                            }
                        }
                        argmax[slot] = best;
                        at(best)
                    }
                };
            }
        }
        let op = Op::Reduce {
            a: a.0,
            kind,
            outer,
            extent,
            inner,
            argmax,
        };
        self.push(shape, out, op, ng)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(a, None, ReduceKind::Sum)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        self.reduce(a, None, ReduceKind::Mean)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        if na.shape.len() != 2 {
            return Err(shape_err("transpose2d", format!("rank {} input", na.shape.len())));
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = na.value[r * cols + c];
            }
        }
        self.push(vec![cols, rows], out, Op::Transpose { a: a.0, rows, cols }, ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        if shape.contains(&0) || numel(shape) != na.value.len() {
            return Err(shape_err("reshape", format!("{:?} -> {:?}", na.shape, shape)));
        }
        let out = na.value.clone();
        self.push(shape.to_vec(), out, Op::Reshape { a: a.0 }, ng)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let ng = self.check(parts)?;
        let first = parts
            .first()
            .map(|p| &self.nodes[p.0])
            .ok_or_else(|| shape_err("concat", "no operands"))?;
        let rank = first.shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            let agrees = s.len() == rank
                && s.iter()
                    .zip(&first.shape)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !agrees {
                return Err(shape_err(
                    "concat",
                    format!("{:?} vs {:?} on axis {axis}", s, first.shape),
                ));
            }
            total += s[axis];
        }
        let outer = numel(&first.shape[..axis]);
        let inner = numel(&first.shape[axis + 1..]);
        let chunks: Vec<usize> = parts.iter().map(|p| self.nodes[p.0].shape[axis] * inner).collect();
        let mut shape = first.shape.clone();
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (p, &c) in parts.iter().zip(&chunks) {
                out.extend_from_slice(&self.nodes[p.0].value[o * c..(o + 1) * c]);
            }
        }
        let op = Op::Concat {
            parts: parts.iter().map(|p| p.0).collect(),
            outer,
            chunks,
        };
        self.push(shape, out, op, ng)
    }

    /// Keeps indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let rank = na.shape.len();
        if axis >= rank {
            return Err(TensorError::InvalidAxis { axis, rank });
        }
        if start >= end || end > na.shape[axis] {
            return Err(shape_err(
                "slice",
                format!("range {start}..{end} on axis {axis} of {:?}", na.shape),
            ));
        }
        let outer = numel(&na.shape[..axis]);
        let inner = numel(&na.shape[axis + 1..]);
        let src_chunk = na.shape[axis] * inner;
        let (offset, len) = (start * inner, (end - start) * inner);
        let mut out = Vec::with_capacity(outer * len);
        for o in 0..outer {
            let base = o * src_chunk + offset;
            out.extend_from_slice(&na.value[base..base + len]);
        }
        let mut shape = na.shape.clone();
        shape[axis] = end - start;
        let op = Op::Slice {
            a: a.0,
            outer,
            src_chunk,
            offset,
            len,
        };
        self.push(shape, out, op, ng)
    }

    /// Repeats a `[d]` or `[1, d]` row `n` times into `[n, d]`.
    pub fn expand_rows(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let d = match na.shape.as_slice() {
            [d] | [1, d] => *d,
            s => return Err(shape_err("expand_rows", format!("expected [d] or [1, d], got {s:?}"))),
        };
        if n == 0 {
            return Err(shape_err("expand_rows", "zero rows"));
        }
        let mut out = Vec::with_capacity(n * d);
        for _ in 0..n {
            out.extend_from_slice(&na.value);
        }
        self.push(vec![n, d], out, Op::ExpandRows { a: a.0, n }, ng)
    }

    /// Repeats a `[l]` or `[l, 1]` column `n` times into `[l, n]`.
    pub fn expand_cols(&mut self, a: Var, n: usize) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        let l = match na.shape.as_slice() {
            [l] | [l, 1] => *l,
            s => return Err(shape_err("expand_cols", format!("expected [l] or [l, 1], got {s:?}"))),
        };
        if n == 0 {
            return Err(shape_err("expand_cols", "zero columns"));
        }
        let out = na.value.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        self.push(vec![l, n], out, Op::ExpandCols { a: a.0, n }, ng)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let ng = self.check(&[a])?;
        let na = &self.nodes[a.0];
        if na.shape.len() != 2 {
            return Err(shape_err("softmax_rows", format!("rank {} input", na.shape.len())));
        }
        if let Some(bad) = na.value.iter().find(|v| !v.is_finite()) {
            return Err(TensorError::Numeric {
                op: "softmax_rows",
                detail: format!("non-finite input {bad}"),
            });
        }
        let (rows, cols) = (na.shape[0], na.shape[1]);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &na.value[r * cols..(r + 1) * cols];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[r * cols..(r + 1) * cols];
            let mut z = 0.0;
            for (o, &v) in dst.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            dst.iter_mut().for_each(|o| *o /= z);
        }
        self.push(vec![rows, cols], out, Op::SoftmaxRows { a: a.0, rows, cols }, ng)
    }

    /// Per-row normalization to zero mean and unit (biased) variance, then
    /// `gain * xhat + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var, TensorError> {
        let ng = self.check(&[x, gain, bias])?;
        let (nx, ngain, nbias) = (&self.nodes[x.0], &self.nodes[gain.0], &self.nodes[bias.0]);
        if nx.shape.len() != 2 {
            return Err(shape_err("layer_norm", format!("rank {} input", nx.shape.len())));
        }
        let (rows, cols) = (nx.shape[0], nx.shape[1]);
        if ngain.shape != [cols] || nbias.shape != [cols] {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?} / bias {:?} for width {cols}", ngain.shape, nbias.shape),
            ));
        }
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument(format!(
                "layer norm eps must be positive, got {eps}"
            )));
        }
        let mut xhat = vec![0.0; rows * cols];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let row = &nx.value[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * ngain.value[c] + nbias.value[c];
            }
        }
        let op = Op::LayerNorm {
            x: x.0,
            gain: gain.0,
            bias: bias.0,
            rows,
            cols,
            xhat,
            rstd,
        };
        self.push(vec![rows, cols], out, op, ng)
    }

    /// Same-padded cross-correlation along the sequence axis.
    ///
    /// `x` is `[len, d_in]`, `w` is `[k, d_in, d_out]` with odd `k`, the
    /// optional bias is `[d_out]`. Output position `p` sees inputs
    /// `p - (k-1)/2 ..= p + (k-1)/2`, zero outside the sequence.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let mut deps = vec![x, w];
        deps.extend(b);
        let ng = self.check(&deps)?;
        let (nx, nw) = (&self.nodes[x.0], &self.nodes[w.0]);
        let (len, d_in) = match nx.shape.as_slice() {
            [l, d] => (*l, *d),
            s => return Err(shape_err("conv1d", format!("input must be [len, d_in], got {s:?}"))),
        };
        let (k, d_out) = match nw.shape.as_slice() {
            [k, di, d_out] if *di == d_in => (*k, *d_out),
            s => return Err(shape_err("conv1d", format!("kernel {s:?} for input width {d_in}"))),
        };
        if k % 2 == 0 {
            return Err(TensorError::InvalidArgument(format!(
                "conv1d kernel size must be odd, got {k}"
            )));
        }
        let mut out = vec![0.0; len * d_out];
        if let Some(b) = b {
            let nb = &self.nodes[b.0];
            if nb.shape != [d_out] {
                return Err(shape_err("conv1d", format!("bias {:?} for {d_out} outputs", nb.shape)));
            }
            for p in 0..len {
                out[p * d_out..(p + 1) * d_out].copy_from_slice(&nb.value);
            }
        }
        let half = (k - 1) / 2;
        for p in 0..len {
            let out_row = &mut out[p * d_out..(p + 1) * d_out];
            for t in 0..k {
                let Some(q) = (p + t).checked_sub(half).filter(|&q| q < len) else {
                    continue;
                };
                let x_row = &nx.value[q * d_in..(q + 1) * d_in];
                let w_tap = &nw.value[t * d_in * d_out..(t + 1) * d_in * d_out];
                for (i, &xv) in x_row.iter().enumerate() {
                    if xv != 0.0 {
                        axpy(xv, &w_tap[i * d_out..(i + 1) * d_out], out_row);
                    }
                }
            }
        }
        let op = Op::Conv1d {
            x: x.0,
            w: w.0,
            b: b.map(|v| v.0),
            len,
            k,
            d_in,
            d_out,
        };
        self.push(vec![len, d_out], out, op, ng)
    }

    /// Sign/argmax pattern at every nondifferentiable point the forward pass
    /// went through. Two evaluations with equal signatures lie on the same
    /// smooth piece of the function.
    pub(crate) fn kink_signature(&self) -> Vec<u64> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Unary {
                    kind: UnaryKind::Relu,
                    a,
                } => {
                    sig.extend(self.nodes[*a].value.iter().map(|&v| u64::from(v > 0.0)));
                }
                Op::Unary {
                    kind: UnaryKind::Abs,
                    a,
                } => {
                    sig.extend(self.nodes[*a].value.iter().map(|&v| {
                        if v > 0.0 {
                            2
                        } else if v < 0.0 {
                            0
                        } else {
                            1
                        }
                    }));
                }
                Op::ClampMin { a, floor } => {
                    sig.extend(self.nodes[*a].value.iter().map(|&v| u64::from(v > *floor)));
                }
                Op::Reduce {
                    kind: ReduceKind::Max,
                    argmax,
                    ..
                } => sig.extend(argmax.iter().map(|&i| i as u64)),
                _ => {}
            }
        }
        sig
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape: a second call
    /// returns [`TensorError::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let root = self.node(loss)?;
        if root.value.len() != 1 {
            return Err(TensorError::NotScalar(root.shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.backprop_node(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.needs_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let mut acc = |target: usize, f: &mut dyn FnMut(&mut [f64])| {
            if nodes[target].needs_grad {
                let slot = grads[target].get_or_insert_with(|| vec![0.0; nodes[target].value.len()]);
                f(slot);
            }
        };
        let node = &nodes[i];
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                acc(a, &mut |ga| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(g_row, &bv[p * n..(p + 1) * n]);
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for r in 0..m {
                        let g_row = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x != 0.0 {
                                axpy(x, g_row, &mut gb[p * n..(p + 1) * n]);
                            }
                        }
                    }
                });
            }
            &Op::Binary { kind, a, b, bcast } => {
                let (av, bv) = (&nodes[a].value, &nodes[b].value);
                let x = |j: usize| if bcast == Broadcast::LeftScalar { av[0] } else { av[j] };
                let y = |j: usize| if bcast == Broadcast::RightScalar { bv[0] } else { bv[j] };
                let da = |j: usize| match kind {
                    BinaryKind::Add | BinaryKind::Sub => 1.0,
                    BinaryKind::Mul => y(j),
                    BinaryKind::Div => 1.0 / y(j),
                };
                let db = |j: usize| match kind {
                    BinaryKind::Add => 1.0,
                    BinaryKind::Sub => -1.0,
                    BinaryKind::Mul => x(j),
                    BinaryKind::Div => -x(j) / (y(j) * y(j)),
                };
                acc(a, &mut |ga| {
                    for (j, gv) in g.iter().enumerate() {
                        let slot = if bcast == Broadcast::LeftScalar { 0 } else { j };
                        ga[slot] += gv * da(j);
                    }
                });
                acc(b, &mut |gb| {
                    for (j, gv) in g.iter().enumerate() {
                        let slot = if bcast == Broadcast::RightScalar { 0 } else { j };
                        gb[slot] += gv * db(j);
                    }
                });
            }
            &Op::ScalarMul { a, c } => acc(a, &mut |ga| axpy(c, g, ga)),
            &Op::Unary { kind, a } => {
                let av = &nodes[a].value;
                let out = &node.value;
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        let d = match kind {
                            UnaryKind::Relu => {
                                if av[j] > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Exp => out[j],
                            UnaryKind::Neg => -1.0,
                            UnaryKind::Abs => {
                                if av[j] > 0.0 {
                                    1.0
                                } else if av[j] < 0.0 {
                                    -1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Elu1 => {
                                if av[j] > 0.0 {
                                    1.0
                                } else {
                                    out[j]
                                }
                            }
                        };
                        ga[j] += g[j] * d;
                    }
                });
            }
            &Op::ClampMin { a, floor } => {
                let av = &nodes[a].value;
                acc(a, &mut |ga| {
                    for j in 0..g.len() {
                        if av[j] > floor {
                            ga[j] += g[j];
                        }
                    }
                });
            }
            Op::Reduce {
                a,
                kind,
                outer,
                extent,
                inner,
                argmax,
            } => {
                let (outer, extent, inner) = (*outer, *extent, *inner);
                acc(*a, &mut |ga| {
                    for o in 0..outer {
                        for ii in 0..inner {
                            let slot = o * inner + ii;
                            let gv = g[slot];
                            match kind {
                                ReduceKind::Sum | ReduceKind::Mean => {
                                    let scale = if *kind == ReduceKind::Mean {
                                        1.0 / extent as f64
                                    } else {
                                        1.0
                                    };
                                    for j in 0..extent {
                                        ga[(o * extent + j) * inner + ii] += gv * scale;
                                    }
                                }
                                ReduceKind::Max => ga[(o * extent + argmax[slot]) * inner + ii] += gv,
                            }
                        }
                    }
                });
            }
            &Op::Transpose { a, rows, cols } => acc(a, &mut |ga| {
                for r in 0..rows {
                    for c in 0..cols {
                        ga[r * cols + c] += g[c * rows + r];
                    }
                }
            }),
            &Op::Reshape { a } => acc(a, &mut |ga| axpy(1.0, g, ga)),
            Op::Concat { parts, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut start = 0;
                for (&p, &c) in parts.iter().zip(chunks) {
                    acc(p, &mut |gp| {
                        for o in 0..*outer {
                            let src = &g[o * total + start..o * total + start + c];
                            axpy(1.0, src, &mut gp[o * c..(o + 1) * c]);
                        }
                    });
                    start += c;
                }
            }
            &Op::Slice {
                a,
                outer,
                src_chunk,
                offset,
                len,
            } => acc(a, &mut |ga| {
                for o in 0..outer {
                    let base = o * src_chunk + offset;
                    axpy(1.0, &g[o * len..(o + 1) * len], &mut ga[base..base + len]);
                }
            }),
            &Op::ExpandRows { a, n } => acc(a, &mut |ga| {
                let d = ga.len();
                for r in 0..n {
                    axpy(1.0, &g[r * d..(r + 1) * d], ga);
                }
            }),
            &Op::ExpandCols { a, n } => acc(a, &mut |ga| {
                for (r, slot) in ga.iter_mut().enumerate() {
                    *slot += g[r * n..(r + 1) * n].iter().sum::<f64>();
                }
            }),
            &Op::SoftmaxRows { a, rows, cols } => {
                let y = &node.value;
                acc(a, &mut |ga| {
                    for r in 0..rows {
                        let (yr, gr) = (&y[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                        let s = dot(yr, gr);
                        for c in 0..cols {
                            ga[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                rows,
                cols,
                xhat,
                rstd,
            } => {
                let (rows, cols) = (*rows, *cols);
                let gain_v = &nodes[*gain].value;
                acc(*gain, &mut |gg| {
                    for r in 0..rows {
                        for c in 0..cols {
                            gg[c] += g[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                });
                acc(*bias, &mut |gb| {
                    for r in 0..rows {
                        axpy(1.0, &g[r * cols..(r + 1) * cols], gb);
                    }
                });
                acc(*x, &mut |gx| {
                    let mut dxhat = vec![0.0; cols];
                    for r in 0..rows {
                        let h = &xhat[r * cols..(r + 1) * cols];
                        for c in 0..cols {
                            dxhat[c] = g[r * cols + c] * gain_v[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dh = dot(&dxhat, h) / cols as f64;
                        for c in 0..cols {
                            gx[r * cols + c] += rstd[r] * (dxhat[c] - mean_d - h[c] * mean_dh);
                        }
                    }
                });
            }
            &Op::Conv1d {
                x,
                w,
                b,
                len,
                k,
                d_in,
                d_out,
            } => {
                let (xv, wv) = (&nodes[x].value, &nodes[w].value);
                let half = (k - 1) / 2;
                let taps = |p: usize| {
                    (0..k).filter_map(move |t| (p + t).checked_sub(half).filter(|&q| q < len).map(|q| (t, q)))
                };
                acc(x, &mut |gx| {
                    for p in 0..len {
                        let g_row = &g[p * d_out..(p + 1) * d_out];
                        for (t, q) in taps(p) {
                            let w_tap = &wv[t * d_in * d_out..(t + 1) * d_in * d_out];
                            for i in 0..d_in {
                                gx[q * d_in + i] += dot(g_row, &w_tap[i * d_out..(i + 1) * d_out]);
                            }
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for p in 0..len {
                        let g_row = &g[p * d_out..(p + 1) * d_out];
                        for (t, q) in taps(p) {
                            for i in 0..d_in {
                                let xq = xv[q * d_in + i];
                                if xq != 0.0 {
                                    let base = (t * d_in + i) * d_out;
                                    axpy(xq, g_row, &mut gw[base..base + d_out]);
                                }
                            }
                        }
                    }
                });
                if let Some(b) = b {
                    acc(b, &mut |gb| {
                        for p in 0..len {
                            axpy(1.0, &g[p * d_out..(p + 1) * d_out], gb);
                        }
                    });
                }
            }
        }
    }
}
