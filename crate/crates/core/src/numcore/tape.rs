use super::kernels::{self, gemm_acc, transpose};
use super::{NumError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Transpose {
        a: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        a: Var,
        factor: T,
    },
    Relu {
        a: Var,
    },
    Abs {
        a: Var,
    },
    Softmax {
        a: Var,
    },
    L2Normalize {
        a: Var,
        denoms: Vec<T>,
    },
    LayerNormalize {
        a: Var,
        inv_std: Vec<T>,
    },
    GatherRows {
        table: Var,
        ids: Vec<usize>,
    },
    ConcatRows {
        a: Var,
        b: Var,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Reshape {
        a: Var,
    },
    MeanAxis1 {
        a: Var,
        outer: usize,
        mid: usize,
        inner: usize,
    },
    SumLast {
        a: Var,
    },
    SumAll {
        a: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    /// Gradients for a unit upstream gradient, computed during forward.
    LinearCrossEntropy {
        h: Var,
        w: Var,
        bias: Var,
        dh: Vec<T>,
        dw: Vec<T>,
        dbias: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records primitive operations in execution order and replays them in
/// reverse to accumulate gradients.
///
/// A tape is single-use: `backward` may be called once.
#[derive(Debug)]
pub struct Tape<T = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    consumed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_size(shape: &[usize]) -> usize {
    shape.iter().skip(1).product()
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Registers an input. Gradients are tracked iff `requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs = tensor.requires_grad;
        self.push(tensor, Op::Leaf, needs)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if `v`
    /// participated in it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Sign pattern of every ReLU and |·| input on the tape. Two forward
    /// passes with equal signatures lie on the same smooth piece.
    pub fn kink_signature(&self) -> Vec<bool> {
        let mut sig = Vec::new();
        for node in &self.nodes {
            if let Op::Relu { a } | Op::Abs { a } = node.op {
                sig.extend(self.nodes[a.0].value.values().iter().map(|&v| v > T::zero()));
            }
        }
        sig
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumError::Shape(format!("matmul {sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::gemm(self.value(a).values(), self.value(b).values(), m, k, n);
        let t = Tensor::new(vec![m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::MatMul { a, b, m, k, n }, ng))
    }

    /// Batched product of `[batch, m, k]` with `[batch, k, n]`, or with
    /// `[batch, n, k]` transposed when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(NumError::Shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (bk, n) = if transpose_b { (sb[2], sb[1]) } else { (sb[1], sb[2]) };
        if bk != k {
            return Err(NumError::Shape(format!("batch_matmul {sa:?} x {sb:?}")));
        }
        let av = self.value(a).values();
        let bv = self.value(b).values();
        let mut out = vec![T::zero(); batch * m * n];
        for i in 0..batch {
            let ab = &av[i * m * k..(i + 1) * m * k];
            let bb = &bv[i * k * n..(i + 1) * k * n];
            let cb = &mut out[i * m * n..(i + 1) * m * n];
            if transpose_b {
                let bt = transpose(bb, n, k);
                gemm_acc(ab, &bt, cb, m, k, n);
            } else {
                gemm_acc(ab, bb, cb, m, k, n);
            }
        }
        let t = Tensor::new(vec![batch, m, n], out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(
            t,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            },
            ng,
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumError> {
        let s = self.value(a).shape();
        if s.len() != 2 {
            return Err(NumError::Shape(format!("transpose of {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let out = transpose(self.value(a).values(), rows, cols);
        let t = Tensor::new(vec![cols, rows], out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Transpose { a, rows, cols }, ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::Shape(format!(
                "add {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x + y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Add { a, b }, ng))
    }

    /// Adds a length-`c` vector to every row of a `[.., c]` tensor.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if tb.shape().len() != 1 || ta.shape().is_empty() || ta.cols() != tb.len() {
            return Err(NumError::Shape(format!(
                "add_row {:?} + {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let c = tb.len();
        let mut out = ta.values().to_vec();
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                for (v, &b) in row.iter_mut().zip(tb.values()) {
                    *v = *v + b;
                }
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(a) || self.needs(bias);
        Ok(self.push(t, Op::AddRow { a, bias }, ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::Shape(format!(
                "mul {:?} * {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let out = ta.values().iter().zip(tb.values()).map(|(&x, &y)| x * y).collect();
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::Mul { a, b }, ng))
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Var {
        let ta = self.value(a);
        let out = ta.values().iter().map(|&x| x * factor).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Scale { a, factor }, ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta
            .values()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Relu { a }, ng)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let out = ta.values().iter().map(|&x| x.abs()).collect();
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::Abs { a }, ng)
    }

    /// Softmax over the last axis. With `keep`, entries flagged false are
    /// excluded (probability exactly 0); fully excluded rows output zeros.
    pub fn softmax(&mut self, a: Var, keep: Option<&[bool]>) -> Result<Var, NumError> {
        let ta = self.value(a);
        if let Some(k) = keep {
            if k.len() != ta.len() {
                return Err(NumError::Shape("softmax mask length".into()));
            }
        }
        let c = ta.cols();
        let mut out = ta.values().to_vec();
        if c > 0 {
            for (r, row) in out.chunks_exact_mut(c).enumerate() {
                kernels::softmax_in_place(row, keep.map(|k| &k[r * c..(r + 1) * c]));
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Softmax { a }, ng))
    }

    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.values().to_vec();
        let mut denoms = Vec::with_capacity(ta.rows());
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                denoms.push(kernels::l2_normalize_in_place(row));
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::L2Normalize { a, denoms }, ng)
    }

    pub fn layer_normalize_rows(&mut self, a: Var) -> Var {
        let ta = self.value(a);
        let c = ta.cols();
        let mut out = ta.values().to_vec();
        let mut inv_std = Vec::with_capacity(ta.rows());
        if c > 0 {
            for row in out.chunks_exact_mut(c) {
                inv_std.push(kernels::layer_normalize_in_place(row));
            }
        }
        let t = Tensor::new(ta.shape().to_vec(), out).expect("same shape");
        let ng = self.needs(a);
        self.push(t, Op::LayerNormalize { a, inv_std }, ng)
    }

    /// Row lookup along the first axis; backward scatters additively.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var, NumError> {
        let tt = self.value(table);
        let shape = tt.shape();
        if shape.is_empty() {
            return Err(NumError::Shape("gather_rows on a scalar".into()));
        }
        let n = shape[0];
        let rs = row_size(shape);
        let mut out = Vec::with_capacity(ids.len() * rs);
        for &id in ids {
            if id >= n {
                return Err(NumError::Index { index: id, bound: n });
            }
            out.extend_from_slice(&tt.values()[id * rs..(id + 1) * rs]);
        }
        let mut oshape = shape.to_vec();
        oshape[0] = ids.len();
        let t = Tensor::new(oshape, out)?;
        let ng = self.needs(table);
        Ok(self.push(
            t,
            Op::GatherRows {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().is_empty() || ta.shape()[1..] != tb.shape()[1..] {
            return Err(NumError::Shape(format!(
                "concat_rows {:?} ; {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let mut shape = ta.shape().to_vec();
        shape[0] += tb.shape()[0];
        let mut out = ta.values().to_vec();
        out.extend_from_slice(tb.values());
        let t = Tensor::new(shape, out)?;
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(t, Op::ConcatRows { a, b }, ng))
    }

    /// Rows `start..end` along the first axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, NumError> {
        let ta = self.value(a);
        let shape = ta.shape();
        if shape.is_empty() || start > end || end > shape[0] {
            return Err(NumError::Index {
                index: end,
                bound: shape.first().copied().unwrap_or(0),
            });
        }
        let rs = row_size(shape);
        let mut oshape = shape.to_vec();
        oshape[0] = end - start;
        let out = ta.values()[start * rs..end * rs].to_vec();
        let t = Tensor::new(oshape, out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::SliceRows { a, start }, ng))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumError> {
        let t = self.value(a).clone().with_grad(false).reshaped(shape)?;
        let t = Tensor::new(t.shape().to_vec(), t.into_values())?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::Reshape { a }, ng))
    }

    /// Mean over the middle axis of a `[outer, mid, inner]` tensor.
    pub fn mean_axis1(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.len() != 3 || s[1] == 0 {
            return Err(NumError::Shape(format!("mean_axis1 of {s:?}")));
        }
        let (outer, mid, inner) = (s[0], s[1], s[2]);
        let scale = T::one() / T::lit(mid as f64);
        let v = ta.values();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for j in 0..mid {
                let src = &v[(o * mid + j) * inner..(o * mid + j + 1) * inner];
                for (d, &x) in dst.iter_mut().zip(src) {
                    *d = *d + x;
                }
            }
            for d in dst.iter_mut() {
                *d = *d * scale;
            }
        }
        let t = Tensor::new(vec![outer, inner], out)?;
        let ng = self.needs(a);
        Ok(self.push(
            t,
            Op::MeanAxis1 {
                a,
                outer,
                mid,
                inner,
            },
            ng,
        ))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, a: Var) -> Result<Var, NumError> {
        let ta = self.value(a);
        let s = ta.shape();
        if s.is_empty() {
            return Err(NumError::Shape("sum_last of a scalar".into()));
        }
        let c = ta.cols();
        let out: Vec<T> = if c == 0 {
            vec![T::zero(); s[..s.len() - 1].iter().product()]
        } else {
            ta.values().chunks_exact(c).map(|r| r.iter().copied().sum()).collect()
        };
        let t = Tensor::new(s[..s.len() - 1].to_vec(), out)?;
        let ng = self.needs(a);
        Ok(self.push(t, Op::SumLast { a }, ng))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: T = self.value(a).values().iter().copied().sum();
        let ng = self.needs(a);
        self.push(Tensor::scalar(s), Op::SumAll { a }, ng)
    }

    /// Mean negative log-likelihood over rows whose target is `Some`.
    /// Rows with `None` contribute no loss and no gradient; if every row is
    /// ignored the loss is 0.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var, NumError> {
        let tl = self.value(logits);
        let s = tl.shape();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(NumError::Shape(format!(
                "cross_entropy logits {:?} with {} targets",
                s,
                targets.len()
            )));
        }
        let n = s[1];
        let mut probs = tl.values().to_vec();
        let mut total = 0.0f64;
        let mut count = 0usize;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(NumError::Index { index: t, bound: n });
            }
            let row = &mut probs[r * n..(r + 1) * n];
            let picked = row[t];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum = sum + *v;
            }
            total += (sum.ln() + max - picked).as_f64();
            let inv = T::one() / sum;
            row.iter_mut().for_each(|v| *v = *v * inv);
            count += 1;
        }
        let loss = if count == 0 {
            0.0
        } else {
            total / count as f64
        };
        let ng = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            ng,
        ))
    }

    /// Mean cross-entropy of `h·wᵀ + bias` against `targets`, where `h` is
    /// `[k, d]`, `w` is `[c, d]` and `bias` is `[c]`. Equivalent to
    /// `cross_entropy(add_row(matmul(h, transpose(w)), bias))` but processes
    /// rows in blocks so the `[k, c]` logits are never materialized.
    pub fn linear_cross_entropy(&mut self, h: Var, w: Var, bias: Var, targets: &[usize]) -> Result<Var, NumError> {
        const BLOCK: usize = 64;
        let (th, tw, tb) = (self.value(h), self.value(w), self.value(bias));
        let (sh, sw) = (th.shape(), tw.shape());
        if sh.len() != 2 || sw.len() != 2 || sh[1] != sw[1] || tb.shape() != [sw[0]] || sh[0] != targets.len() {
            return Err(NumError::Shape(format!(
                "linear_cross_entropy h {sh:?} w {sw:?} bias {:?} with {} targets",
                tb.shape(),
                targets.len()
            )));
        }
        let (k, d, c) = (sh[0], sh[1], sw[0]);
        if let Some(&t) = targets.iter().find(|&&t| t >= c) {
            return Err(NumError::Index { index: t, bound: c });
        }
        let needs = self.needs(h) || self.needs(w) || self.needs(bias);
        let hv = th.values();
        let wv = tw.values();
        let bv = tb.values();
        let wt = transpose(wv, c, d);
        let mut dh = if needs { vec![T::zero(); k * d] } else { Vec::new() };
        let mut dwt = if needs { vec![T::zero(); d * c] } else { Vec::new() };
        let mut dbias = if needs { vec![T::zero(); c] } else { Vec::new() };
        let scale = if k == 0 { T::zero() } else { T::one() / T::lit(k as f64) };
        let mut total = 0.0f64;
        let mut z = vec![T::zero(); BLOCK.min(k.max(1)) * c];
        for r0 in (0..k).step_by(BLOCK) {
            let rows = BLOCK.min(k - r0);
            let zb = &mut z[..rows * c];
            for row in zb.chunks_exact_mut(c) {
                row.copy_from_slice(bv);
            }
            let hb = &hv[r0 * d..(r0 + rows) * d];
            gemm_acc(hb, &wt, zb, rows, d, c);
            for (r, row) in zb.chunks_exact_mut(c).enumerate() {
                let t = targets[r0 + r];
                let picked = row[t];
                let max = row.iter().copied().fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for v in row.iter_mut() {
                    *v = (*v - max).exp();
                    sum = sum + *v;
                }
                total += (sum.ln() + max - picked).as_f64();
                if needs {
                    // d loss / d logits = (softmax − onehot) / k
                    let f = scale / sum;
                    row.iter_mut().for_each(|v| *v = *v * f);
                    row[t] = row[t] - scale;
                }
            }
            if needs {
                gemm_acc(zb, wv, &mut dh[r0 * d..(r0 + rows) * d], rows, c, d);
                let hbt = transpose(hb, rows, d);
                gemm_acc(&hbt, zb, &mut dwt, d, rows, c);
                for row in zb.chunks_exact(c) {
                    for (x, &v) in dbias.iter_mut().zip(row) {
                        *x = *x + v;
                    }
                }
            }
        }
        let loss = if k == 0 { 0.0 } else { total / k as f64 };
        let dw = if needs { transpose(&dwt, d, c) } else { Vec::new() };
        Ok(self.push(
            Tensor::scalar(T::lit(loss)),
            Op::LinearCrossEntropy {
                h,
                w,
                bias,
                dh,
                dw,
                dbias,
            },
            needs,
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<(), NumError> {
        if self.consumed {
            return Err(NumError::BackwardTwice);
        }
        if !self.value(loss).shape().is_empty() && self.value(loss).len() != 1 {
            return Err(NumError::NotScalar(self.value(loss).shape().to_vec()));
        }
        self.consumed = true;
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let gout = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &gout, &mut grads);
        }
        for (node, g) in self.nodes.iter_mut().zip(grads.iter()) {
            if matches!(node.op, Op::Leaf) && node.value.requires_grad {
                node.value.grad = g.clone();
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let val = |v: Var| nodes[v.0].value.values();
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:block) => {{
                let v: Var = $v;
                if nodes[v.0].needs_grad {
                    let len = nodes[v.0].value.len();
                    let $buf: &mut Vec<T> = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
                    $body
                }
            }};
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                acc!(*a, |ga| {
                    let bt = transpose(val(*b), k, n);
                    gemm_acc(g, &bt, ga, m, n, k);
                });
                acc!(*b, |gb| {
                    let at = transpose(val(*a), m, k);
                    gemm_acc(&at, g, gb, k, m, n);
                });
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                for bi in 0..*batch {
                    let gc = &g[bi * m * n..(bi + 1) * m * n];
                    let ab = &val(*a)[bi * m * k..(bi + 1) * m * k];
                    let bb = &val(*b)[bi * k * n..(bi + 1) * k * n];
                    acc!(*a, |ga| {
                        let dst = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *transpose_b {
                            // C = A Bᵀ with B [n×k]: dA = dC·B
                            gemm_acc(gc, bb, dst, m, n, k);
                        } else {
                            let bt = transpose(bb, k, n);
                            gemm_acc(gc, &bt, dst, m, n, k);
                        }
                    });
                    acc!(*b, |gb| {
                        let dst = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *transpose_b {
                            // dB = dCᵀ·A, [n×k]
                            let gct = transpose(gc, m, n);
                            gemm_acc(&gct, ab, dst, n, m, k);
                        } else {
                            let at = transpose(ab, m, k);
                            gemm_acc(&at, gc, dst, k, m, n);
                        }
                    });
                }
            }
            Op::Transpose { a, rows, cols } => {
                acc!(*a, |ga| {
                    let gt = transpose(g, *cols, *rows);
                    for (d, s) in ga.iter_mut().zip(gt) {
                        *d = *d + s;
                    }
                });
            }
            Op::Add { a, b } => {
                for v in [*a, *b] {
                    acc!(v, |gv| {
                        for (d, &s) in gv.iter_mut().zip(g) {
                            *d = *d + s;
                        }
                    });
                }
            }
            Op::AddRow { a, bias } => {
                acc!(*a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
                acc!(*bias, |gb| {
                    let c = gb.len();
                    if c > 0 {
                        for row in g.chunks_exact(c) {
                            for (d, &s) in gb.iter_mut().zip(row) {
                                *d = *d + s;
                            }
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                acc!(*a, |ga| {
                    for ((d, &s), &o) in ga.iter_mut().zip(g).zip(val(*b)) {
                        *d = *d + s * o;
                    }
                });
                acc!(*b, |gb| {
                    for ((d, &s), &o) in gb.iter_mut().zip(g).zip(val(*a)) {
                        *d = *d + s * o;
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc!(*a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s * *factor;
                    }
                });
            }
            Op::Relu { a } => {
                acc!(*a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if x > T::zero() {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::Abs { a } => {
                acc!(*a, |ga| {
                    for ((d, &s), &x) in ga.iter_mut().zip(g).zip(val(*a)) {
                        if x > T::zero() {
                            *d = *d + s;
                        } else if x < T::zero() {
                            *d = *d - s;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = nodes[i].value.values();
                let c = nodes[i].value.cols();
                acc!(*a, |ga| {
                    if c > 0 {
                        for ((dr, gr), yr) in ga
                            .chunks_exact_mut(c)
                            .zip(g.chunks_exact(c))
                            .zip(y.chunks_exact(c))
                        {
                            let inner: T = gr.iter().zip(yr).map(|(&s, &p)| s * p).sum();
                            for ((d, &s), &p) in dr.iter_mut().zip(gr).zip(yr) {
                                *d = *d + p * (s - inner);
                            }
                        }
                    }
                });
            }
            Op::L2Normalize { a, denoms } => {
                let y = nodes[i].value.values();
                let x = val(*a);
                let c = nodes[i].value.cols();
                let eps = T::lit(kernels::NORM_EPS);
                acc!(*a, |ga| {
                    for (r, denom) in denoms.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let xr = &x[r * c..(r + 1) * c];
                        let dr = &mut ga[r * c..(r + 1) * c];
                        let norm = xr.iter().map(|&v| v * v).sum::<T>().sqrt();
                        if norm > eps {
                            let inner = kernels::dot(gr, yr);
                            for ((d, &s), &p) in dr.iter_mut().zip(gr).zip(yr) {
                                *d = *d + (s - p * inner) / *denom;
                            }
                        } else {
                            for (d, &s) in dr.iter_mut().zip(gr) {
                                *d = *d + s / *denom;
                            }
                        }
                    }
                });
            }
            Op::LayerNormalize { a, inv_std } => {
                let y = nodes[i].value.values();
                let c = nodes[i].value.cols();
                let cn = T::lit(c as f64);
                acc!(*a, |ga| {
                    for (r, &s) in inv_std.iter().enumerate() {
                        let gr = &g[r * c..(r + 1) * c];
                        let yr = &y[r * c..(r + 1) * c];
                        let mean_g = gr.iter().copied().sum::<T>() / cn;
                        let mean_gy = kernels::dot(gr, yr) / cn;
                        for ((d, &gv), &yv) in ga[r * c..(r + 1) * c].iter_mut().zip(gr).zip(yr) {
                            *d = *d + s * (gv - mean_g - yv * mean_gy);
                        }
                    }
                });
            }
            Op::GatherRows { table, ids } => {
                let rs = row_size(nodes[table.0].value.shape());
                acc!(*table, |gt| {
                    for (r, &id) in ids.iter().enumerate() {
                        let src = &g[r * rs..(r + 1) * rs];
                        for (d, &s) in gt[id * rs..(id + 1) * rs].iter_mut().zip(src) {
                            *d = *d + s;
                        }
                    }
                });
            }
            Op::ConcatRows { a, b } => {
                let split = nodes[a.0].value.len();
                acc!(*a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(&g[..split]) {
                        *d = *d + s;
                    }
                });
                acc!(*b, |gb| {
                    for (d, &s) in gb.iter_mut().zip(&g[split..]) {
                        *d = *d + s;
                    }
                });
            }
            Op::SliceRows { a, start } => {
                let rs = row_size(nodes[a.0].value.shape());
                acc!(*a, |ga| {
                    let off = start * rs;
                    for (d, &s) in ga[off..off + g.len()].iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
            }
            Op::Reshape { a } => {
                acc!(*a, |ga| {
                    for (d, &s) in ga.iter_mut().zip(g) {
                        *d = *d + s;
                    }
                });
            }
            Op::MeanAxis1 {
                a,
                outer,
                mid,
                inner,
            } => {
                let scale = T::one() / T::lit(*mid as f64);
                acc!(*a, |ga| {
                    for o in 0..*outer {
                        let src = &g[o * inner..(o + 1) * inner];
                        for j in 0..*mid {
                            let off = (o * mid + j) * inner;
                            for (d, &s) in ga[off..off + inner].iter_mut().zip(src) {
                                *d = *d + s * scale;
                            }
                        }
                    }
                });
            }
            Op::SumLast { a } => {
                let c = nodes[a.0].value.cols();
                acc!(*a, |ga| {
                    if c > 0 {
                        for (row, &s) in ga.chunks_exact_mut(c).zip(g) {
                            for d in row.iter_mut() {
                                *d = *d + s;
                            }
                        }
                    }
                });
            }
            Op::SumAll { a } => {
                acc!(*a, |ga| {
                    for d in ga.iter_mut() {
                        *d = *d + g[0];
                    }
                });
            }
            Op::LinearCrossEntropy {
                h,
                w,
                bias,
                dh,
                dw,
                dbias,
            } => {
                for (v, unit) in [(*h, dh), (*w, dw), (*bias, dbias)] {
                    acc!(v, |buf| {
                        for (x, &u) in buf.iter_mut().zip(unit.iter()) {
                            *x = *x + g[0] * u;
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if *count == 0 {
                    return;
                }
                let n = nodes[logits.0].value.cols();
                let w = g[0] / T::lit(*count as f64);
                acc!(*logits, |gl| {
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let pr = &probs[r * n..(r + 1) * n];
                        let dr = &mut gl[r * n..(r + 1) * n];
                        for (d, &p) in dr.iter_mut().zip(pr) {
                            *d = *d + w * p;
                        }
                        dr[t] = dr[t] - w;
                    }
                });
            }
        }
    }
}
