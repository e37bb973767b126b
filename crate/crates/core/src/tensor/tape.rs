use std::collections::HashMap;

use super::kernels::{matmul, matmul_a_bt, matmul_at_b};
use super::params::{BnId, BnUpdate, ParamId, ParamStore};
use super::{Real, Result, Tensor, TensorError, BN_EPS, NORM_EPS};
use crate::exec::Exec;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceKind {
    Max,
    Mean,
    Sum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    SoftmaxCrossEntropy,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ElementwiseKind {
    Add,
    Mul,
    Relu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Scale(Var, T),
    Reduce {
        input: Var,
        kind: ReduceKind,
        outer: usize,
        len: usize,
        inner: usize,
        argmax: Vec<usize>,
    },
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        training: bool,
    },
    Gather {
        input: Var,
        index: Vec<usize>,
    },
    SliceRows {
        input: Var,
        start: usize,
    },
    Reshape(Var),
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    NormalizeRows {
        input: Var,
        norms: Vec<T>,
    },
    SoftmaxXent {
        input: Var,
        probs: Vec<T>,
        targets: Vec<usize>,
    },
    Cosine {
        input: Var,
        target: Vec<T>,
        norms: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Eager recording of one forward pass.
///
/// Parameters are borrowed read-only from the store; each parameter maps to
/// a single node per tape, so repeated use (weight sharing) accumulates into
/// one gradient.
pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<T>>,
    store: &'a ParamStore<T>,
    param_nodes: HashMap<ParamId, Var>,
    bn_updates: Vec<BnUpdate<T>>,
    exec: Exec,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Parameter gradients that reached the loss, in parameter-id order.
    pub fn param_grads(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params
            .iter()
            .filter_map(|&(id, v)| self.grads[v.0].as_deref().map(|g| (id, g)))
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params
            .iter()
            .find(|(p, _)| *p == id)
            .and_then(|&(_, v)| self.wrt(v))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a.len() != b.len() {
        return None;
    }
    a.iter()
        .zip(b)
        .map(|(&x, &y)| match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        })
        .collect()
}

/// Maps a flat index of the broadcast output to a flat index of one operand.
enum Bcast {
    Same,
    /// Operand repeats along leading axes: `i % n`.
    Leading(usize),
    /// Operand repeats along trailing axes: `i / n`.
    Trailing(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        let rank = out.len();
        // inp = [1, .., 1, out[j..]]
        if let Some(j) = (0..=rank).find(|&j| inp[..j].iter().all(|&d| d == 1) && inp[j..] == out[j..]) {
            return Bcast::Leading(out[j..].iter().product());
        }
        // inp = [out[..j], 1, .., 1]
        if let Some(j) = (0..=rank).rev().find(|&j| inp[j..].iter().all(|&d| d == 1) && inp[..j] == out[..j]) {
            return Bcast::Trailing(out[j..].iter().product());
        }
        let n: usize = out.iter().product();
        let mut strides = vec![0; rank];
        let mut s = 1;
        for d in (0..rank).rev() {
            strides[d] = if inp[d] == 1 { 0 } else { s };
            s *= inp[d];
        }
        let mut idx = vec![0; rank];
        let mut cur = 0;
        let mut offsets = Vec::with_capacity(n);
        for _ in 0..n {
            offsets.push(cur);
            for d in (0..rank).rev() {
                idx[d] += 1;
                cur += strides[d];
                if idx[d] < out[d] {
                    break;
                }
                cur -= strides[d] * out[d];
                idx[d] = 0;
            }
        }
        Bcast::General(offsets)
    }

    #[inline]
    fn at(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Leading(n) => i % n,
            Bcast::Trailing(n) => i / n,
            Bcast::General(o) => o[i],
        }
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new(store: &'a ParamStore<T>) -> Self {
        Self::with_exec(store, Exec::default())
    }

    pub fn with_exec(store: &'a ParamStore<T>, exec: Exec) -> Self {
        Self {
            nodes: Vec::new(),
            store,
            param_nodes: HashMap::new(),
            bn_updates: Vec::new(),
            exec,
        }
    }

    pub fn store(&self) -> &ParamStore<T> {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node invariant")
    }

    /// Batch statistics recorded by training-mode batch norms so far.
    pub fn bn_updates(&self) -> &[BnUpdate<T>] {
        &self.bn_updates
    }

    pub fn take_bn_updates(&mut self) -> Vec<BnUpdate<T>> {
        std::mem::take(&mut self.bn_updates)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, t.into_data(), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let p = self.store.get(id);
        let v = self.push(p.value.shape().to_vec(), p.value.data().to_vec(), Op::Param, true);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = matmul(self.exec, self.value(a), self.value(b), m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn elementwise(&mut self, kind: ElementwiseKind, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || TensorError::Invalid {
            op: "elementwise",
            msg: format!("{kind:?} needs two operands"),
        };
        match kind {
            ElementwiseKind::Add => self.add(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Mul => self.mul(a, b.ok_or_else(need_b)?),
            ElementwiseKind::Relu => Ok(self.relu(a)),
        }
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| shape_err(op, &sa, &sb))?;
        let (va, vb) = (self.value(a), self.value(b));
        let n: usize = out.iter().product();
        let f = &f;
        let vals = match (Bcast::new(&out, &sa), Bcast::new(&out, &sb)) {
            (Bcast::Same, Bcast::Same) => va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect(),
            (Bcast::Same, Bcast::Leading(c)) => va
                .chunks(c)
                .flat_map(|row| row.iter().zip(vb).map(|(&x, &y)| f(x, y)))
                .collect(),
            (Bcast::Same, Bcast::Trailing(c)) => va
                .chunks(c)
                .zip(vb)
                .flat_map(|(row, &y)| row.iter().map(move |&x| f(x, y)))
                .collect(),
            (oa, ob) => (0..n).map(|i| f(va[oa.at(i)], vb[ob.at(i)])).collect(),
        };
        Ok((out, vals))
    }

    /// Elementwise sum with broadcasting over singleton axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, vals) = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, vals, Op::Add(a, b), rg))
    }

    /// Elementwise product with broadcasting over singleton axes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (shape, vals) = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, vals, Op::Mul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let vals = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, vals, Op::Relu(a), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let vals = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(a);
        self.push(shape, vals, Op::Scale(a, c), rg)
    }

    /// Reduces along `axis`, dropping it. Max keeps the first maximum.
    pub fn reduce(&mut self, kind: ReduceKind, a: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Axis {
                op: "reduce",
                axis,
                rank: shape.len(),
            });
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let x = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = Vec::new();
        match kind {
            ReduceKind::Max => {
                argmax = vec![0; outer * inner];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut best = x[base];
                        let mut arg = 0;
                        for l in 1..len {
                            let v = x[base + l * inner];
                            if v > best {
                                best = v;
                                arg = l;
                            }
                        }
                        out[o * inner + i] = best;
                        argmax[o * inner + i] = arg;
                    }
                }
            }
            ReduceKind::Sum | ReduceKind::Mean => {
                for o in 0..outer {
                    for l in 0..len {
                        let row = &x[(o * len + l) * inner..(o * len + l + 1) * inner];
                        for (acc, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = T::one() / T::lit(len as f64);
                    out.iter_mut().for_each(|v| *v = *v * inv);
                }
            }
        }
        let mut out_shape: Vec<usize> = shape[..axis].iter().chain(&shape[axis + 1..]).copied().collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let rg = self.rg(a);
        Ok(self.push(
            out_shape,
            out,
            Op::Reduce {
                input: a,
                kind,
                outer,
                len,
                inner,
                argmax,
            },
            rg,
        ))
    }

    /// Batch normalisation over the rows of a `rows × channels` matrix.
    ///
    /// Training mode normalises with batch statistics and records them for
    /// [`ParamStore::apply_bn_updates`]; inference uses the running state.
    pub fn batchnorm(&mut self, a: Var, bn: BnId, training: bool) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let st = self.store.bn(bn);
        let channels = st.channels();
        if shape.len() != 2 || shape[1] != channels {
            return Err(shape_err("batchnorm", &shape, &[channels]));
        }
        let rows = shape[0];
        if training && rows < 2 {
            return Err(TensorError::BatchTooSmall(rows));
        }
        let (scale_id, shift_id) = (st.scale, st.shift);
        let eps = T::lit(BN_EPS);
        let x = self.value(a);
        let (mean, var) = if training {
            let inv_n = T::one() / T::lit(rows as f64);
            let mut mean = vec![T::zero(); channels];
            for r in 0..rows {
                for c in 0..channels {
                    mean[c] += x[r * channels + c];
                }
            }
            mean.iter_mut().for_each(|m| *m = *m * inv_n);
            let mut var = vec![T::zero(); channels];
            for r in 0..rows {
                for c in 0..channels {
                    let d = x[r * channels + c] - mean[c];
                    var[c] += d * d;
                }
            }
            let unbiased: Vec<T> = var.iter().map(|&v| v / T::lit((rows - 1) as f64)).collect();
            var.iter_mut().for_each(|v| *v = *v * inv_n);
            self.bn_updates.push(BnUpdate {
                bn,
                mean: mean.clone(),
                var: unbiased,
            });
            (mean, var)
        } else {
            (st.running_mean.clone(), st.running_var.clone())
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let x = self.value(a);
        let mut xhat = vec![T::zero(); x.len()];
        for r in 0..rows {
            for c in 0..channels {
                xhat[r * channels + c] = (x[r * channels + c] - mean[c]) * inv_std[c];
            }
        }
        let scale = self.param(scale_id);
        let shift = self.param(shift_id);
        let (g, b) = (self.value(scale), self.value(shift));
        let mut out = xhat.clone();
        for r in 0..rows {
            for c in 0..channels {
                out[r * channels + c] = out[r * channels + c] * g[c] + b[c];
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::BatchNorm {
                input: a,
                scale,
                shift,
                xhat,
                inv_std,
                training,
            },
            true,
        ))
    }

    /// Picks rows of a rank-2 tensor; rows may repeat.
    pub fn gather_rows(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("gather_rows", &shape, &[index.len()]));
        }
        let (rows, cols) = (shape[0], shape[1]);
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(TensorError::Index {
                op: "gather_rows",
                index: bad,
                len: rows,
            });
        }
        if index.is_empty() {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                msg: "empty index".into(),
            });
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(&x[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            vec![index.len(), cols],
            out,
            Op::Gather {
                input: a,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Rows `start..end` of a rank-2 tensor.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 || start >= end || end > shape[0] {
            return Err(shape_err("slice_rows", &shape, &[start, end]));
        }
        let cols = shape[1];
        let out = self.value(a)[start * cols..end * cols].to_vec();
        let rg = self.rg(a);
        Ok(self.push(vec![end - start, cols], out, Op::SliceRows { input: a, start }, rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return Err(shape_err("reshape", self.shape(a), shape));
        }
        let vals = self.value(a).to_vec();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), vals, Op::Reshape(a), rg))
    }

    /// Concatenates rank-2 tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.shape(*first)[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(shape_err("concat_cols", self.shape(*first), s));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| TensorError::Invalid {
            op: "stack",
            msg: "no inputs".into(),
        })?;
        let shape = self.shape(*first).to_vec();
        let mut out = Vec::with_capacity(parts.len() * self.value(*first).len());
        for &p in parts {
            if self.shape(p) != shape.as_slice() {
                return Err(shape_err("stack", &shape, self.shape(p)));
            }
            out.extend_from_slice(self.value(p));
        }
        let mut new_shape = vec![parts.len()];
        new_shape.extend_from_slice(&shape);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(new_shape, out, Op::Stack(parts.to_vec()), rg))
    }

    /// Scales every row of a rank-2 tensor to unit Euclidean norm
    /// (norm floored at 1e-12).
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        if shape.len() != 2 {
            return Err(shape_err("normalize_rows", &shape, &[]));
        }
        let cols = shape[1];
        let x = self.value(a);
        let eps = T::lit(NORM_EPS);
        let norms: Vec<T> = x
            .chunks(cols)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps))
            .collect();
        let out = x
            .chunks(cols)
            .zip(&norms)
            .flat_map(|(r, &n)| r.iter().map(move |&v| v / n))
            .collect();
        let rg = self.rg(a);
        Ok(self.push(shape, out, Op::NormalizeRows { input: a, norms }, rg))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 || shape[0] != targets.len() {
            return Err(shape_err("softmax_cross_entropy", &shape, &[targets.len()]));
        }
        let k = shape[1];
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(TensorError::Index {
                op: "softmax_cross_entropy",
                index: bad,
                len: k,
            });
        }
        let x = self.value(logits);
        let mut probs = vec![T::zero(); x.len()];
        let mut loss = T::zero();
        for (r, &t) in targets.iter().enumerate() {
            let row = &x[r * k..(r + 1) * k];
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - mx).exp()).sum();
            for c in 0..k {
                probs[r * k + c] = (row[c] - mx).exp() / z;
            }
            loss += z.ln() - (row[t] - mx);
        }
        loss = loss / T::lit(targets.len() as f64);
        let rg = self.rg(logits);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::SoftmaxXent {
                input: logits,
                probs,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `1 - <pred/|pred|, target>`.
    pub fn cosine_loss(&mut self, pred: Var, target: &Tensor<T>) -> Result<Var> {
        let shape = self.shape(pred).to_vec();
        if shape.len() != 2 || shape != target.shape() {
            return Err(shape_err("cosine_loss", &shape, target.shape()));
        }
        let cols = shape[1];
        let eps = T::lit(NORM_EPS);
        let x = self.value(pred);
        let mut norms = Vec::with_capacity(shape[0]);
        let mut loss = T::zero();
        for (p, t) in x.chunks(cols).zip(target.data().chunks(cols)) {
            let n = p.iter().map(|&v| v * v).sum::<T>().sqrt().max(eps);
            let dot: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
            loss += T::one() - dot / n;
            norms.push(n);
        }
        loss = loss / T::lit(shape[0] as f64);
        let rg = self.rg(pred);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Cosine {
                input: pred,
                target: target.data().to_vec(),
                norms,
            },
            rg,
        ))
    }

    /// Dispatches to the named loss. For cross-entropy the target holds class
    /// indices, one per row.
    pub fn loss(&mut self, kind: LossKind, pred: Var, target: &Tensor<T>) -> Result<Var> {
        match kind {
            LossKind::SoftmaxCrossEntropy => {
                let targets: Vec<usize> = target
                    .data()
                    .iter()
                    .map(|t| t.to_usize().unwrap_or(usize::MAX))
                    .collect();
                self.softmax_cross_entropy(pred, &targets)
            }
            LossKind::Cosine => self.cosine_loss(pred, target),
        }
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(TensorError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                grads[id] = Some(g);
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[id] = Some(g);
        }

        let mut params: Vec<(ParamId, Var)> = self.param_nodes.iter().map(|(&p, &v)| (p, v)).collect();
        params.sort_by_key(|(p, _)| *p);
        Ok(Gradients { grads, params })
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.nodes[a.0].requires_grad {
                    let ga = matmul_a_bt(self.exec, g, &self.nodes[b.0].value, m, k, n);
                    acc(*a, &mut |s| s.iter_mut().zip(&ga).for_each(|(x, &y)| *x += y));
                }
                if self.nodes[b.0].requires_grad {
                    let gb = matmul_at_b(self.exec, &self.nodes[a.0].value, g, m, k, n);
                    acc(*b, &mut |s| s.iter_mut().zip(&gb).for_each(|(x, &y)| *x += y));
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if !self.nodes[v.0].requires_grad {
                        continue;
                    }
                    let o = Bcast::new(&node.shape, &self.nodes[v.0].shape);
                    acc(v, &mut |s| match &o {
                        Bcast::Same => s.iter_mut().zip(g).for_each(|(x, &y)| *x += y),
                        Bcast::Leading(c) => {
                            for row in g.chunks(*c) {
                                s.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                            }
                        }
                        _ => {
                            for (i, &gi) in g.iter().enumerate() {
                                s[o.at(i)] += gi;
                            }
                        }
                    });
                }
            }
            Op::Mul(a, b) => {
                let oa = Bcast::new(&node.shape, &self.nodes[a.0].shape);
                let ob = Bcast::new(&node.shape, &self.nodes[b.0].shape);
                let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                for (target, ot, other, oo) in [(*a, &oa, vb, &ob), (*b, &ob, va, &oa)] {
                    if !self.nodes[target.0].requires_grad {
                        continue;
                    }
                    acc(target, &mut |s| match (ot, oo) {
                        (Bcast::Same, Bcast::Same) => {
                            for ((x, &gi), &y) in s.iter_mut().zip(g).zip(other) {
                                *x += gi * y;
                            }
                        }
                        (Bcast::Same, Bcast::Trailing(c)) => {
                            for ((xs, gs), &y) in s.chunks_mut(*c).zip(g.chunks(*c)).zip(other) {
                                xs.iter_mut().zip(gs).for_each(|(x, &gi)| *x += gi * y);
                            }
                        }
                        (Bcast::Trailing(c), Bcast::Same) => {
                            for ((x, gs), os) in s.iter_mut().zip(g.chunks(*c)).zip(other.chunks(*c)) {
                                *x += gs.iter().zip(os).fold(T::zero(), |acc, (&gi, &y)| acc + gi * y);
                            }
                        }
                        _ => {
                            for (i, &gi) in g.iter().enumerate() {
                                s[ot.at(i)] += gi * other[oo.at(i)];
                            }
                        }
                    });
                }
            }
            Op::Relu(a) => {
                let x = &self.nodes[a.0].value;
                acc(*a, &mut |s| {
                    for ((si, &xi), &gi) in s.iter_mut().zip(x).zip(g) {
                        if xi > T::zero() {
                            *si += gi;
                        }
                    }
                });
            }
            Op::Scale(a, c) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c));
            }
            Op::Reduce {
                input,
                kind,
                outer,
                len,
                inner,
                argmax,
            } => {
                let (outer, len, inner) = (*outer, *len, *inner);
                acc(*input, &mut |s| match kind {
                    ReduceKind::Max => {
                        for o in 0..outer {
                            for i in 0..inner {
                                let l = argmax[o * inner + i];
                                s[(o * len + l) * inner + i] += g[o * inner + i];
                            }
                        }
                    }
                    ReduceKind::Sum | ReduceKind::Mean => {
                        let w = if *kind == ReduceKind::Mean {
                            T::one() / T::lit(len as f64)
                        } else {
                            T::one()
                        };
                        for o in 0..outer {
                            for l in 0..len {
                                for i in 0..inner {
                                    s[(o * len + l) * inner + i] += g[o * inner + i] * w;
                                }
                            }
                        }
                    }
                });
            }
            Op::BatchNorm {
                input,
                scale,
                shift,
                xhat,
                inv_std,
                training,
            } => {
                let c = inv_std.len();
                let rows = g.len() / c;
                let gamma = &self.nodes[scale.0].value;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for r in 0..rows {
                    for j in 0..c {
                        dgamma[j] += g[r * c + j] * xhat[r * c + j];
                        dbeta[j] += g[r * c + j];
                    }
                }
                acc(*scale, &mut |s| s.iter_mut().zip(&dgamma).for_each(|(x, &y)| *x += y));
                acc(*shift, &mut |s| s.iter_mut().zip(&dbeta).for_each(|(x, &y)| *x += y));
                acc(*input, &mut |s| {
                    if *training {
                        // dx = inv_std / n * (n * dxhat - Σdxhat - xhat * Σ(dxhat * xhat)),
                        // with dxhat = g * gamma.
                        let n = T::lit(rows as f64);
                        let k1: Vec<T> = (0..c).map(|j| inv_std[j] * gamma[j]).collect();
                        let mean_g: Vec<T> = (0..c).map(|j| dbeta[j] / n).collect();
                        let mean_gx: Vec<T> = (0..c).map(|j| dgamma[j] / n).collect();
                        for ((sr, gr), xr) in s.chunks_mut(c).zip(g.chunks(c)).zip(xhat.chunks(c)) {
                            for j in 0..c {
                                sr[j] += k1[j] * (gr[j] - mean_g[j] - xr[j] * mean_gx[j]);
                            }
                        }
                    } else {
                        for r in 0..rows {
                            for j in 0..c {
                                s[r * c + j] += g[r * c + j] * gamma[j] * inv_std[j];
                            }
                        }
                    }
                });
            }
            Op::Gather { input, index } => {
                let cols = node.shape[1];
                acc(*input, &mut |s| {
                    for (r, &i) in index.iter().enumerate() {
                        for c in 0..cols {
                            s[i * cols + c] += g[r * cols + c];
                        }
                    }
                });
            }
            Op::SliceRows { input, start } => {
                let cols = node.shape[1];
                acc(*input, &mut |s| {
                    s[start * cols..start * cols + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y)
                });
            }
            Op::Reshape(a) => {
                acc(*a, &mut |s| s.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::ConcatCols(parts) => {
                let rows = node.shape[0];
                let total = node.shape[1];
                let mut col0 = 0;
                for &p in parts {
                    let c = self.nodes[p.0].shape[1];
                    acc(p, &mut |s| {
                        for r in 0..rows {
                            for j in 0..c {
                                s[r * c + j] += g[r * total + col0 + j];
                            }
                        }
                    });
                    col0 += c;
                }
            }
            Op::Stack(parts) => {
                let n = self.nodes[parts[0].0].value.len();
                for (k, &p) in parts.iter().enumerate() {
                    acc(p, &mut |s| {
                        s.iter_mut()
                            .zip(&g[k * n..(k + 1) * n])
                            .for_each(|(x, &y)| *x += y)
                    });
                }
            }
            Op::NormalizeRows { input, norms } => {
                let cols = node.shape[1];
                let eps = T::lit(NORM_EPS);
                let x = &self.nodes[input.0].value;
                acc(*input, &mut |s| {
                    for (r, &n) in norms.iter().enumerate() {
                        let xr = &x[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        if n <= eps {
                            for j in 0..cols {
                                s[r * cols + j] += gr[j] / n;
                            }
                            continue;
                        }
                        let dot: T = xr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            s[r * cols + j] += gr[j] / n - xr[j] * dot / (n * n * n);
                        }
                    }
                });
            }
            Op::SoftmaxXent { input, probs, targets } => {
                let k = probs.len() / targets.len();
                let w = g[0] / T::lit(targets.len() as f64);
                acc(*input, &mut |s| {
                    for (r, &t) in targets.iter().enumerate() {
                        for c in 0..k {
                            let y = if c == t { T::one() } else { T::zero() };
                            s[r * k + c] += w * (probs[r * k + c] - y);
                        }
                    }
                });
            }
            Op::Cosine { input, target, norms } => {
                let cols = target.len() / norms.len();
                let w = g[0] / T::lit(norms.len() as f64);
                let eps = T::lit(NORM_EPS);
                let x = &self.nodes[input.0].value;
                acc(*input, &mut |s| {
                    for (r, &n) in norms.iter().enumerate() {
                        let p = &x[r * cols..(r + 1) * cols];
                        let t = &target[r * cols..(r + 1) * cols];
                        if n <= eps {
                            for j in 0..cols {
                                s[r * cols + j] -= w * t[j] / n;
                            }
                            continue;
                        }
                        let dot: T = p.iter().zip(t).map(|(&a, &b)| a * b).sum();
                        for j in 0..cols {
                            s[r * cols + j] -= w * (t[j] / n - dot * p[j] / (n * n * n));
                        }
                    }
                });
            }
        }
    }
}
