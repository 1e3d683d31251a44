use std::f64::consts::PI;

use super::kernels::{matmul_nn, matmul_nt, matmul_tn};
use super::{axis_extents, inverse_axes, permute_data, Tensor};
use crate::error::{Error, Result};
use crate::par;

const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Variable-length index lists packed into one buffer.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RaggedIndex {
    offsets: Vec<usize>,
    indices: Vec<usize>,
}

impl RaggedIndex {
    pub fn new() -> Self {
        Self {
            offsets: vec![0],
            indices: Vec::new(),
        }
    }

    pub fn from_lists(lists: &[Vec<usize>]) -> Self {
        let mut r = Self::new();
        for l in lists {
            r.push(l);
        }
        r
    }

    pub fn push(&mut self, list: &[usize]) {
        self.indices.extend_from_slice(list);
        self.offsets.push(self.indices.len());
    }

    pub fn len(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, i: usize) -> &[usize] {
        &self.indices[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn total(&self) -> usize {
        self.indices.len()
    }

    fn range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }
}

struct AttentionRecord {
    q: Var,
    k: Var,
    v: Var,
    pos: Option<Var>,
    sets: RaggedIndex,
    scale: f64,
    /// softmax attention weights, one per set entry
    probs: Vec<f64>,
    /// softmax(-distance) value scales, one per set entry (empty without `pos`)
    soft: Vec<f64>,
    dists: Vec<f64>,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow {
        x: Var,
        row: Var,
    },
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        m: usize,
        k: usize,
        n: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    Mean {
        x: Var,
        axis: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    PairwiseDistance {
        a: Var,
        b: Var,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    IndexedAttention(Box<AttentionRecord>),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation as it runs; [`Tape::backward`] replays it in
/// reverse. Nodes are appended in execution order, so the node list is
/// already topologically sorted.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    /// A trainable input.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, true)
    }

    /// An input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push_leaf(value, false)
    }

    fn push_leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b), &[a, b])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|e| e * c).collect())?;
        self.push("scale", out, Op::Scale(x, c), &[x])
    }

    /// Adds a vector of length `shape[-1]` to every trailing row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.shape(row) != [n] {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let r = self.value(row).data().to_vec();
        let vx = self.value(x);
        let data = vx
            .data()
            .chunks(n)
            .flat_map(|c| c.iter().zip(&r).map(|(a, b)| a + b))
            .collect();
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("add_row", out, Op::AddRow { x, row }, &[x, row])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = matmul_nn(self.value(a).data(), self.value(b).data(), m, k, n);
        let out = Tensor::new([m, n], data)?;
        self.push("matmul", out, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// `x W + b` over the last axis of `x`; `w` is `in x out`, `b` is `out`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let k = *sx.last().unwrap_or(&1);
        if sw.len() != 2 || sw[0] != k {
            return Err(Error::Dimension {
                op: "linear",
                lhs: sx,
                rhs: sw,
            });
        }
        let n = sw[1];
        if let Some(b) = b {
            if self.shape(b) != [n] {
                return Err(Error::Dimension {
                    op: "linear bias",
                    lhs: sw,
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let m = self.value(x).len() / k;
        let mut data = matmul_nn(self.value(x).data(), self.value(w).data(), m, k, n);
        if let Some(b) = b {
            let bias = self.value(b).data();
            for row in data.chunks_mut(n) {
                for (o, bv) in row.iter_mut().zip(bias) {
                    *o += bv;
                }
            }
        }
        let mut shape = sx;
        *shape.last_mut().expect("rank >= 1") = n;
        let out = Tensor::new(shape, data)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        self.push("linear", out, Op::Linear { x, w, b, m, k, n }, &inputs)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = axis_extents(vx.shape(), axis)?;
        let src = vx.data();
        let mut data = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| o * len * inner + j * inner + i;
                let max = (0..len).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut total = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - max).exp();
                    data[at(j)] = e;
                    total += e;
                }
                for j in 0..len {
                    data[at(j)] /= total;
                }
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push("softmax", out, Op::Softmax { x, axis }, &[x])
    }

    /// Mean over one axis; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let vx = self.value(x);
        let (outer, len, inner) = axis_extents(vx.shape(), axis)?;
        let src = vx.data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += src[o * len * inner + j * inner + i];
                }
            }
        }
        data.iter_mut().for_each(|d| *d /= len as f64);
        let mut shape = vx.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, data)?;
        self.push("mean", out, Op::Mean { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len() as f64;
        self.push("mean_all", Tensor::scalar(s), Op::MeanAll(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| Error::Shape {
            shape: vec![],
            reason: "concat of nothing".into(),
        })?;
        let base = self.shape(*first).to_vec();
        axis_extents(&base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: base,
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let mut data = Vec::with_capacity(outer * total * base[axis + 1..].iter().product::<usize>());
        for o in 0..outer {
            for &v in inputs {
                let chunk = self.value(v).len() / outer;
                data.extend_from_slice(&self.value(v).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        self.push(
            "concat",
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            inputs,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = self.value(x).permute(axes)?;
        self.push(
            "permute",
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
        )
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        if self.shape(x).len() != 2 {
            return Err(Error::Shape {
                shape: self.shape(x).to_vec(),
                reason: "transpose needs a matrix".into(),
            });
        }
        self.permute(x, &[1, 0])
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        for p in [gamma, beta] {
            if self.shape(p) != [n] {
                return Err(Error::Dimension {
                    op: "layer_norm",
                    lhs: self.shape(x).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let vx = self.value(x);
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let rows = vx.len() / n;
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(vx.len());
        for row in vx.data().chunks(n) {
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n as f64;
            let r = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(r);
            for (j, e) in row.iter().enumerate() {
                let h = (e - mean) * r;
                xhat.push(h);
                data.push(h * g[j] + b[j]);
            }
        }
        let out = Tensor::new(vx.shape().to_vec(), data)?;
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let out = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&e| gelu(e)).collect())?;
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    /// Euclidean distance between every row of `a` (m x d) and of `b` (n x d).
    pub fn pairwise_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::Dimension {
                op: "pairwise_distance",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, n, d) = (sa[0], sb[0], sa[1]);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                data.push(euclid(&va[i * d..(i + 1) * d], &vb[j * d..(j + 1) * d]));
            }
        }
        let out = Tensor::new([m, n], data)?;
        self.push("pairwise_distance", out, Op::PairwiseDistance { a, b }, &[a, b])
    }

    /// Copies rows (entries along axis 0) of `x` in `indices` order.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let vx = self.value(x);
        let rows = vx.shape()[0];
        let w = vx.len() / rows;
        let mut data = Vec::with_capacity(indices.len() * w);
        for &i in indices {
            if i >= rows {
                return Err(Error::IndexOutOfRange { index: i, len: rows });
            }
            data.extend_from_slice(&vx.data()[i * w..(i + 1) * w]);
        }
        let mut shape = vx.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, data)?;
        self.push(
            "gather",
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        )
    }

    /// Sparse single-head attention: row `i` of the output is
    /// `softmax(q_i K_S^T / sqrt(D)) V_S` where `S = sets[i]` selects key/value
    /// rows. With `pos` (one row per token, `q` and `k` share the token
    /// indexing), each selected value row is additionally scaled by
    /// `softmax(-|pos_i - pos_j|)` over the set.
    pub fn indexed_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        sets: RaggedIndex,
        pos: Option<Var>,
    ) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 2 || sk.len() != 2 || sk != sv || sq[1] != sk[1] {
            return Err(Error::Dimension {
                op: "indexed_attention",
                lhs: sq.to_vec(),
                rhs: sk.to_vec(),
            });
        }
        let (nq, nk, d) = (sq[0], sk[0], sq[1]);
        if sets.len() != nq {
            return Err(Error::Dimension {
                op: "indexed_attention sets",
                lhs: vec![nq],
                rhs: vec![sets.len()],
            });
        }
        for i in 0..nq {
            if sets.get(i).is_empty() {
                return Err(Error::Shape {
                    shape: vec![0],
                    reason: format!("query {i} has an empty key set"),
                });
            }
            if let Some(&bad) = sets.get(i).iter().find(|&&j| j >= nk) {
                return Err(Error::IndexOutOfRange { index: bad, len: nk });
            }
        }
        if let Some(p) = pos {
            let sp = self.shape(p);
            if sp.len() != 2 || sp[0] != nk || nq != nk {
                return Err(Error::Dimension {
                    op: "indexed_attention pos",
                    lhs: vec![nq, nk],
                    rhs: sp.to_vec(),
                });
            }
        }
        let scale = 1.0 / (d as f64).sqrt();
        let qd = self.value(q).data();
        let kd = self.value(k).data();
        let vd = self.value(v).data();
        let posd = pos.map(|p| (self.value(p).data(), self.shape(p)[1]));

        let per_query = par::map_range(nq, |i| {
            let set = sets.get(i);
            let qi = &qd[i * d..(i + 1) * d];
            let scores: Vec<f64> = set
                .iter()
                .map(|&j| scale * dot(qi, &kd[j * d..(j + 1) * d]))
                .collect();
            let probs = softmax_vec(&scores);
            let (soft, dists) = match posd {
                Some((pd, w)) => {
                    let pi = &pd[i * w..(i + 1) * w];
                    let dists: Vec<f64> =
                        set.iter().map(|&j| euclid(pi, &pd[j * w..(j + 1) * w])).collect();
                    let neg: Vec<f64> = dists.iter().map(|x| -x).collect();
                    (softmax_vec(&neg), dists)
                }
                None => (Vec::new(), Vec::new()),
            };
            let mut out = vec![0.0; d];
            for (s, &j) in set.iter().enumerate() {
                let w = if soft.is_empty() { probs[s] } else { probs[s] * soft[s] };
                for (o, x) in out.iter_mut().zip(&vd[j * d..(j + 1) * d]) {
                    *o += w * x;
                }
            }
            (out, probs, soft, dists)
        });

        let mut data = Vec::with_capacity(nq * d);
        let mut probs = Vec::with_capacity(sets.total());
        let mut soft = Vec::new();
        let mut dists = Vec::new();
        for (o, p, s, ds) in per_query {
            data.extend(o);
            probs.extend(p);
            soft.extend(s);
            dists.extend(ds);
        }
        let out = Tensor::new([nq, d], data)?;
        let mut inputs = vec![q, k, v];
        inputs.extend(pos);
        self.push(
            "indexed_attention",
            out,
            Op::IndexedAttention(Box::new(AttentionRecord {
                q,
                k,
                v,
                pos,
                sets,
                scale,
                probs,
                soft,
                dists,
            })),
            &inputs,
        )
    }

    /// Reverse pass from a scalar `loss`. Every trainable leaf gets a
    /// gradient; leaves the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ls = self.shape(loss);
        if ls.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[i].is_none() {
                grads[i] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }

    fn backprop(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, delta: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            delta(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                acc(*b, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x += c * y)),
            Op::AddRow { x, row } => {
                acc(*x, &|s| add_into(s, g));
                acc(*row, &|s| {
                    let n = s.len();
                    for c in g.chunks(n) {
                        add_into(s, c);
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| add_into(s, &matmul_nt(g, vb, *m, *n, *k)));
                acc(*b, &|s| add_into(s, &matmul_tn(va, g, *m, *k, *n)));
            }
            Op::Linear { x, w, b, m, k, n } => {
                let (vx, vw) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &|s| add_into(s, &matmul_nt(g, vw, *m, *n, *k)));
                acc(*w, &|s| add_into(s, &matmul_tn(vx, g, *m, *k, *n)));
                if let Some(b) = b {
                    acc(*b, &|s| {
                        for c in g.chunks(*n) {
                            add_into(s, c);
                        }
                    });
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = axis_extents(node.value.shape(), *axis).expect("valid");
                acc(*x, &|s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| o * len * inner + j * inner + i;
                            let dotp: f64 = (0..len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..len {
                                s[at(j)] += y[at(j)] * (g[at(j)] - dotp);
                            }
                        }
                    }
                });
            }
            Op::Mean { x, axis } => {
                let (outer, len, inner) =
                    axis_extents(self.value(*x).shape(), *axis).expect("valid");
                acc(*x, &|s| {
                    for o in 0..outer {
                        for j in 0..len {
                            for i in 0..inner {
                                s[o * len * inner + j * inner + i] += g[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::SumAll(x) => acc(*x, &|s| s.iter_mut().for_each(|e| *e += g[0])),
            Op::MeanAll(x) => acc(*x, &|s| {
                let n = s.len() as f64;
                s.iter_mut().for_each(|e| *e += g[0] / n);
            }),
            Op::Concat { inputs, axis } => {
                let outer: usize = node.value.shape()[..*axis].iter().product();
                let out_chunk = node.value.len() / outer;
                let mut start = 0;
                for &v in inputs {
                    let chunk = self.value(v).len() / outer;
                    acc(v, &|s| {
                        for o in 0..outer {
                            let src = &g[o * out_chunk + start..o * out_chunk + start + chunk];
                            add_into(&mut s[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    start += chunk;
                }
            }
            Op::Reshape(x) => acc(*x, &|s| add_into(s, g)),
            Op::Permute { x, axes } => {
                let (back, _) =
                    permute_data(g, node.value.shape(), &inverse_axes(axes)).expect("valid");
                acc(*x, &|s| add_into(s, &back));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gam = self.value(*gamma).data();
                let n = gam.len();
                acc(*x, &|s| {
                    for (r, ((srow, grow), hrow)) in s
                        .chunks_mut(n)
                        .zip(g.chunks(n))
                        .zip(xhat.chunks(n))
                        .enumerate()
                    {
                        let dh: Vec<f64> = grow.iter().zip(gam).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / n as f64;
                        let mean_dh_h =
                            dh.iter().zip(hrow).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            srow[j] += rstd[r] * (dh[j] - mean_dh - hrow[j] * mean_dh_h);
                        }
                    }
                });
                acc(*gamma, &|s| {
                    for (grow, hrow) in g.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                });
                acc(*beta, &|s| {
                    for grow in g.chunks(n) {
                        add_into(s, grow);
                    }
                });
            }
            Op::Gelu(x) => {
                let vx = self.value(*x).data();
                acc(*x, &|s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * gelu_grad(vx[i]);
                    }
                });
            }
            Op::PairwiseDistance { a, b } => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let d = self.shape(*a)[1];
                let (m, n) = (self.shape(*a)[0], self.shape(*b)[0]);
                let dist = node.value.data();
                acc(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let r = dist[i * n + j];
                            if r == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                s[i * d + c] += g[i * n + j] * (va[i * d + c] - vb[j * d + c]) / r;
                            }
                        }
                    }
                });
                acc(*b, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            let r = dist[i * n + j];
                            if r == 0.0 {
                                continue;
                            }
                            for c in 0..d {
                                s[j * d + c] -= g[i * n + j] * (va[i * d + c] - vb[j * d + c]) / r;
                            }
                        }
                    }
                });
            }
            Op::Gather { x, indices } => {
                let w = g.len() / indices.len().max(1);
                acc(*x, &|s| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut s[i * w..(i + 1) * w], &g[r * w..(r + 1) * w]);
                    }
                });
            }
            Op::IndexedAttention(rec) => self.backprop_attention(rec, g, grads),
        }
    }

    fn backprop_attention(&self, rec: &AttentionRecord, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let qd = self.value(rec.q).data();
        let kd = self.value(rec.k).data();
        let vd = self.value(rec.v).data();
        let d = self.shape(rec.q)[1];
        let nq = rec.sets.len();
        let soft = !rec.soft.is_empty();
        let posd = rec.pos.map(|p| (self.value(p).data(), self.shape(p)[1]));

        struct Local {
            dq: Vec<f64>,
            dk: Vec<f64>,
            dv: Vec<f64>,
            ddist: Vec<f64>,
        }
        let locals = par::map_range(nq, |i| {
            let set = rec.sets.get(i);
            let range = rec.sets.range(i);
            let probs = &rec.probs[range.clone()];
            let gi = &g[i * d..(i + 1) * d];
            let qi = &qd[i * d..(i + 1) * d];
            let m = set.len();
            let mut dv = vec![0.0; m * d];
            let mut dprob = vec![0.0; m];
            let mut dsoft = vec![0.0; m];
            for (s, &j) in set.iter().enumerate() {
                let vj = &vd[j * d..(j + 1) * d];
                let gv = dot(gi, vj);
                let sc = if soft { rec.soft[range.start + s] } else { 1.0 };
                dprob[s] = sc * gv;
                dsoft[s] = probs[s] * gv;
                let w = probs[s] * sc;
                for (o, x) in dv[s * d..(s + 1) * d].iter_mut().zip(gi) {
                    *o = w * x;
                }
            }
            let mixed: f64 = probs.iter().zip(&dprob).map(|(a, b)| a * b).sum();
            let mut dq = vec![0.0; d];
            let mut dk = vec![0.0; m * d];
            for (s, &j) in set.iter().enumerate() {
                let dscore = probs[s] * (dprob[s] - mixed) * rec.scale;
                let kj = &kd[j * d..(j + 1) * d];
                for c in 0..d {
                    dq[c] += dscore * kj[c];
                    dk[s * d + c] = dscore * qi[c];
                }
            }
            let ddist = if soft {
                let sv = &rec.soft[range];
                let mixed_s: f64 = sv.iter().zip(&dsoft).map(|(a, b)| a * b).sum();
                sv.iter()
                    .zip(&dsoft)
                    .map(|(s, ds)| -s * (ds - mixed_s))
                    .collect()
            } else {
                Vec::new()
            };
            Local { dq, dk, dv, ddist }
        });

        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let take = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Vec<f64> {
            grads[v.0]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[v.0].value.len()])
        };
        if needs(rec.q) {
            let mut s = take(rec.q, grads);
            for (i, l) in locals.iter().enumerate() {
                add_into(&mut s[i * d..(i + 1) * d], &l.dq);
            }
            grads[rec.q.0] = Some(s);
        }
        for (var, pick) in [(rec.k, 0usize), (rec.v, 1usize)] {
            if !needs(var) {
                continue;
            }
            let mut s = take(var, grads);
            for (i, l) in locals.iter().enumerate() {
                let src = if pick == 0 { &l.dk } else { &l.dv };
                for (slot, &j) in rec.sets.get(i).iter().enumerate() {
                    add_into(&mut s[j * d..(j + 1) * d], &src[slot * d..(slot + 1) * d]);
                }
            }
            grads[var.0] = Some(s);
        }
        if let (Some(p), Some((pd, w))) = (rec.pos, posd) {
            if needs(p) {
                let mut s = take(p, grads);
                for (i, l) in locals.iter().enumerate() {
                    let range = rec.sets.range(i);
                    for (slot, &j) in rec.sets.get(i).iter().enumerate() {
                        let r = rec.dists[range.start + slot];
                        if r == 0.0 {
                            continue;
                        }
                        for c in 0..w {
                            let diff = (pd[i * w + c] - pd[j * w + c]) / r * l.ddist[slot];
                            s[i * w + c] += diff;
                            s[j * w + c] -= diff;
                        }
                    }
                }
                grads[p.0] = Some(s);
            }
        }
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a tensor shaped like `v`; zeros when nothing flowed there.
    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.shape(v).to_vec();
        match self.get(v) {
            Some(g) => Tensor::new(shape, g.to_vec()).expect("grad shape"),
            None => Tensor::zeros(shape),
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

pub(crate) fn softmax_vec(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / PI).sqrt();
    let t = (k * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_C * x * x)
}
