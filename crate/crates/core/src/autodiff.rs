//! Reverse-mode automatic differentiation over a dynamically built tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Operations append nodes
//! and return [`Var`] handles; [`Graph::backward`] walks the tape in reverse
//! and returns a [`GradTable`] keyed by [`ParamId`]. Nodes created with
//! [`Graph::constant`] or [`Graph::detach`] never receive gradients, which is
//! how frozen inputs (pretrained representations, masks) are isolated.
//!
//! A graph is confined to one thread. Independent graphs may run on separate
//! threads; they share nothing but read-only parameter stores.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{
    broadcast_shapes, broadcast_strides, for_each_broadcast, reduce_to_shape, strides, Scalar,
    Tensor, NEG_SENTINEL,
};

const LAYER_NORM_EPS: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub trainable: bool,
}

/// Named, ordered collection of model parameters.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            value,
            trainable: true,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    trainable: p.trainable,
                })
                .collect(),
        }
    }
}

/// Gradients of a scalar loss, keyed by parameter.
pub type GradTable<T> = BTreeMap<ParamId, Tensor<T>>;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// User-defined differentiable operation. The forward value is computed by
/// the caller; `backward` maps the output gradient to one gradient per input.
pub trait CustomOp<T>: Send {
    fn name(&self) -> &'static str;
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>)
        -> Vec<Tensor<T>>;
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    SumAll(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<T>,
        smoothing: T,
        probs: Vec<T>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp<T>>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    bound: BTreeMap<ParamId, Var>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            bound: BTreeMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name));
        }
        Ok(self.push(value, op, requires_grad))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Leaf bound to a stored parameter. Receives a gradient iff trainable.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, store.is_trainable(id));
        self.nodes[v.0].param = Some(id);
        v
    }

    /// Makes later `param(_, id)` calls return `v` instead of the stored
    /// value. Lets gradient checks differentiate through a single parameter.
    pub fn bind(&mut self, id: ParamId, v: Var) -> Result<()> {
        if v.0 >= self.nodes.len() {
            return Err(Error::Contract("bind needs a variable of this graph".into()));
        }
        self.bound.insert(id, v);
        Ok(())
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Stop-gradient barrier: copies the value into a fresh constant leaf.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let va = self.value(a).data();
        let vb = self.value(b).data();
        if sa == sb {
            let data = va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect();
            return Tensor::new(&sa, data);
        }
        let out_shape = broadcast_shapes(&sa, &sb).ok_or_else(|| Error::dim(name, &sa, &sb))?;
        let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
        let n: usize = out_shape.iter().product();
        let mut data = vec![T::zero(); n];
        for_each_broadcast(&out_shape, &ta, &tb, |o, ia, ib| data[o] = f(va[ia], vb[ib]));
        Tensor::new(&out_shape, data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("add", out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("sub", out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push_checked("mul", out, Op::Mul(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|x| x * c);
        let rg = self.rg(&[a]);
        self.push_checked("scale", out, Op::Scale(a, c), rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        let rg = self.rg(&[a]);
        self.push_checked("relu", out, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(&[a]);
        self.push_checked("sigmoid", out, Op::Sigmoid(a), rg)
    }

    /// Batched matrix product `[.., p, q] x [.., q, r] -> [.., p, r]` with
    /// broadcast batch dimensions.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = matmul_forward(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        self.push_checked("matmul", out, Op::MatMul(a, b), rg)
    }

    /// Softmax over the last axis after adding an optional constant mask
    /// (broadcastable to `x`, entries 0 or the negative sentinel).
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor<T>>) -> Result<Var> {
        let out = softmax_forward(self.value(x), mask)?;
        let rg = self.rg(&[x]);
        self.push_checked("softmax", out, Op::Softmax(x), rg)
    }

    /// Layer normalization over the last axis with learned gain and offset.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let d = *xs.last().unwrap();
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::dim("layer_norm", &xs, self.shape(gain)));
        }
        let xv = self.value(x).data();
        let g = self.value(gain).data();
        let bv = self.value(bias).data();
        let rows = xv.len() / d;
        let eps = T::lit(LAYER_NORM_EPS);
        let dn = T::lit(d as f64);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g[j] + bv[j];
            }
        }
        let out = Tensor::new(&xs, out)?;
        let rg = self.rg(&[x, gain, bias]);
        self.push_checked(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Reorders axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let out = permute_tensor(self.value(x), axes)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Permute(x, axes.to_vec()), rg))
    }

    /// `len` entries of axis `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::Contract(format!(
                "slice axis {axis} [{start}, {}) out of range for shape {xs:?}",
                start + len
            )));
        }
        let outer: usize = xs[..axis].iter().product();
        let inner: usize = xs[axis + 1..].iter().product();
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * xs[axis] * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = xs.clone();
        shape[axis] = len;
        let out = Tensor::new(&shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Slice { x, axis, start }, rg))
    }

    /// Row lookup `table[ids]` for a `[rows, d]` table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let ts = self.shape(table).to_vec();
        if ts.len() != 2 {
            return Err(Error::Contract(format!("gather table must be 2-D, got {ts:?}")));
        }
        let (rows, d) = (ts[0], ts[1]);
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            if i >= rows {
                return Err(Error::UnknownToken { id: i, size: rows });
            }
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let out = Tensor::new(&[ids.len(), d], data)?;
        let rg = self.rg(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        let rg = self.rg(&[x]);
        self.push_checked("sum_all", Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let n = T::lit(self.value(x).len() as f64);
        let s = self.sum_all(x)?;
        self.scale(s, T::one() / n)
    }

    /// `sum_i weights[i] * CE(logits[i], targets[i])` with label smoothing
    /// `smoothing` (mass spread uniformly over the vocabulary).
    pub fn cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        weights: &[T],
        smoothing: T,
    ) -> Result<Var> {
        let ls = self.shape(logits).to_vec();
        let v = *ls.last().unwrap();
        let rows = self.value(logits).len() / v;
        if targets.len() != rows || weights.len() != rows {
            return Err(Error::dim("cross_entropy", &ls, &[targets.len(), weights.len()]));
        }
        let lv = self.value(logits).data();
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        let vn = T::lit(v as f64);
        for r in 0..rows {
            let t = targets[r];
            if t >= v {
                return Err(Error::UnknownToken { id: t, size: v });
            }
            let row = &lv[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - m).exp()).sum();
            let lz = z.ln() + m;
            let mut sum_logp = T::zero();
            for j in 0..v {
                probs[r * v + j] = (row[j] - lz).exp();
                sum_logp += row[j] - lz;
            }
            let nll = lz - row[t];
            let loss = (T::one() - smoothing) * nll - smoothing / vn * sum_logp;
            total += weights[r] * loss;
        }
        let rg = self.rg(&[logits]);
        self.push_checked(
            "cross_entropy",
            Tensor::scalar(total),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                smoothing,
                probs,
            },
            rg,
        )
    }

    /// Registers a caller-computed `output` produced from `inputs` by `op`.
    pub fn custom(&mut self, inputs: &[Var], output: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Result<Var> {
        let rg = self.rg(inputs);
        let name = op.name();
        self.push_checked(
            name,
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<GradTable<T>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        let mut table = GradTable::new();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                if let Some(pid) = node.param {
                    match table.get_mut(&pid) {
                        Some(acc) => add_into(acc, &g),
                        None => {
                            table.insert(pid, g);
                        }
                    }
                }
                continue;
            }
            for (input, gi) in self.node_backward(node, &g) {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                match &mut grads[input.0] {
                    Some(acc) => add_into(acc, &gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(table)
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Vec<(Var, Tensor<T>)> {
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![
                (*a, reduce_to_shape(g, val(*a).shape())),
                (*b, reduce_to_shape(g, val(*b).shape())),
            ],
            Op::Sub(a, b) => {
                let gb = reduce_to_shape(g, val(*b).shape()).map(|x| -x);
                vec![(*a, reduce_to_shape(g, val(*a).shape())), (*b, gb)]
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    out.push((*a, mul_grad(g, tb, ta.shape())));
                }
                if self.nodes[b.0].requires_grad {
                    out.push((*b, mul_grad(g, ta, tb.shape())));
                }
                out
            }
            Op::Scale(a, c) => vec![(*a, g.map(|x| x * *c))],
            Op::MatMul(a, b) => {
                let (ga, gb) = matmul_backward(val(*a), val(*b), g);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Relu(a) => {
                let x = val(*a).data();
                let data = g
                    .data()
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| if xi > T::zero() { gi } else { T::zero() })
                    .collect();
                vec![(*a, Tensor::new(g.shape(), data).unwrap())]
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                let data = g
                    .data()
                    .iter()
                    .zip(y)
                    .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                    .collect();
                vec![(*a, Tensor::new(g.shape(), data).unwrap())]
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = *g.shape().last().unwrap();
                let gd = g.data();
                let mut out = vec![T::zero(); y.len()];
                for r in 0..y.len() / d {
                    let s = r * d..(r + 1) * d;
                    let dot: T = gd[s.clone()].iter().zip(&y[s.clone()]).map(|(&p, &q)| p * q).sum();
                    for j in s {
                        out[j] = y[j] * (gd[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(g.shape(), out).unwrap())]
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = *g.shape().last().unwrap();
                let gv = val(*gain).data();
                let gd = g.data();
                let dn = T::lit(d as f64);
                let mut dx = vec![T::zero(); gd.len()];
                let mut dgain = vec![T::zero(); d];
                let mut dbias = vec![T::zero(); d];
                let mut dxhat = vec![T::zero(); d];
                for r in 0..gd.len() / d {
                    let mut mean_dxhat = T::zero();
                    let mut mean_dxhat_xhat = T::zero();
                    for j in 0..d {
                        let k = r * d + j;
                        dgain[j] += gd[k] * xhat[k];
                        dbias[j] += gd[k];
                        dxhat[j] = gd[k] * gv[j];
                        mean_dxhat += dxhat[j];
                        mean_dxhat_xhat += dxhat[j] * xhat[k];
                    }
                    mean_dxhat /= dn;
                    mean_dxhat_xhat /= dn;
                    for j in 0..d {
                        let k = r * d + j;
                        dx[k] = inv_std[r] * (dxhat[j] - mean_dxhat - xhat[k] * mean_dxhat_xhat);
                    }
                }
                vec![
                    (*x, Tensor::new(g.shape(), dx).unwrap()),
                    (*gain, Tensor::new(&[d], dgain).unwrap()),
                    (*bias, Tensor::new(&[d], dbias).unwrap()),
                ]
            }
            Op::Reshape(a) => vec![(*a, g.clone().reshape(val(*a).shape()).unwrap())],
            Op::Permute(a, axes) => {
                let mut inv = vec![0; axes.len()];
                for (i, &ax) in axes.iter().enumerate() {
                    inv[ax] = i;
                }
                vec![(*a, permute_tensor(g, &inv).unwrap())]
            }
            Op::Slice { x, axis, start } => {
                let xs = val(*x).shape();
                let len = g.shape()[*axis];
                let outer: usize = xs[..*axis].iter().product();
                let inner: usize = xs[*axis + 1..].iter().product();
                let mut out = Tensor::zeros(xs);
                let od = out.data_mut();
                let gd = g.data();
                for o in 0..outer {
                    let base = o * xs[*axis] * inner + start * inner;
                    od[base..base + len * inner]
                        .copy_from_slice(&gd[o * len * inner..(o + 1) * len * inner]);
                }
                vec![(*x, out)]
            }
            Op::Gather { table, ids } => {
                let ts = val(*table).shape();
                let d = ts[1];
                let mut out = Tensor::zeros(ts);
                let od = out.data_mut();
                let gd = g.data();
                for (r, &i) in ids.iter().enumerate() {
                    for j in 0..d {
                        od[i * d + j] += gd[r * d + j];
                    }
                }
                vec![(*table, out)]
            }
            Op::SumAll(a) => {
                let s = g.item();
                vec![(*a, Tensor::full(val(*a).shape(), s))]
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                smoothing,
                probs,
            } => {
                let ls = val(*logits).shape();
                let v = *ls.last().unwrap();
                let go = g.item();
                let uniform = *smoothing / T::lit(v as f64);
                let mut out = vec![T::zero(); probs.len()];
                for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                    if w == T::zero() {
                        continue;
                    }
                    for j in 0..v {
                        let mut q = uniform;
                        if j == t {
                            q += T::one() - *smoothing;
                        }
                        out[r * v + j] = go * w * (probs[r * v + j] - q);
                    }
                }
                vec![(*logits, Tensor::new(ls, out).unwrap())]
            }
            Op::Custom { inputs, op } => {
                let ins: Vec<&Tensor<T>> = inputs.iter().map(|&v| val(v)).collect();
                let gs = op.backward(&ins, &node.value, g);
                inputs.iter().copied().zip(gs).collect()
            }
        }
    }
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Scalar>(acc: &mut Tensor<T>, g: &Tensor<T>) {
    debug_assert_eq!(acc.shape(), g.shape());
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += b;
    }
}

/// Gradient of `a * b` w.r.t. the operand of shape `to`, given the other operand.
fn mul_grad<T: Scalar>(g: &Tensor<T>, other: &Tensor<T>, to: &[usize]) -> Tensor<T> {
    let gs = g.shape();
    let so = broadcast_strides(other.shape(), gs);
    let sg = strides(gs);
    let od = other.data();
    let gd = g.data();
    let mut full = vec![T::zero(); gd.len()];
    for_each_broadcast(gs, &sg, &so, |f, ig, io| full[f] = gd[ig] * od[io]);
    reduce_to_shape(&Tensor::new(gs, full).unwrap(), to)
}

pub(crate) fn permute_tensor<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Result<Tensor<T>> {
    let xs = x.shape();
    let nd = xs.len();
    let mut seen = vec![false; nd];
    if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
        return Err(Error::Contract(format!("invalid permutation {axes:?} for shape {xs:?}")));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
    let in_strides = strides(xs);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let zero = vec![0; nd];
    let src = x.data();
    let mut data = vec![T::zero(); src.len()];
    for_each_broadcast(&out_shape, &src_strides, &zero, |o, i, _| data[o] = src[i]);
    Tensor::new(&out_shape, data)
}

struct MatMulPlan {
    batch: Vec<usize>,
    a_off: Vec<usize>,
    b_off: Vec<usize>,
    p: usize,
    q: usize,
    r: usize,
}

fn matmul_plan(a: &[usize], b: &[usize]) -> Result<MatMulPlan> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(Error::dim("matmul", a, b));
    }
    let (ba, bb) = (&a[..a.len() - 2], &b[..b.len() - 2]);
    let batch = broadcast_shapes(ba, bb).ok_or_else(|| Error::dim("matmul", a, b))?;
    let (sa, sb) = (broadcast_strides(ba, &batch), broadcast_strides(bb, &batch));
    let mut a_off = Vec::new();
    let mut b_off = Vec::new();
    if batch.is_empty() {
        a_off.push(0);
        b_off.push(0);
    } else {
        for_each_broadcast(&batch, &sa, &sb, |_, ia, ib| {
            a_off.push(ia * p * q);
            b_off.push(ib * q * r);
        });
    }
    Ok(MatMulPlan {
        batch,
        a_off,
        b_off,
        p,
        q,
        r,
    })
}

fn matmul_forward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let plan = matmul_plan(a.shape(), b.shape())?;
    let MatMulPlan { p, q, r, .. } = plan;
    let mut shape = plan.batch.clone();
    shape.extend([p, r]);
    let mut out = Tensor::zeros(&shape);
    let (ad, bd) = (a.data(), b.data());
    let od = out.data_mut();
    // Stacked rows times a shared matrix: one large product.
    if b.ndim() == 2 && a.ndim() > 2 {
        let rows = ad.len() / q;
        unsafe {
            T::gemm(rows, q, r, T::one(), ad.as_ptr(), q as isize, 1, bd.as_ptr(), r as isize, 1,
                T::zero(), od.as_mut_ptr(), r as isize, 1);
        }
        return Ok(out);
    }
    for (i, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
        unsafe {
            T::gemm(p, q, r, T::one(), ad[ao..].as_ptr(), q as isize, 1, bd[bo..].as_ptr(),
                r as isize, 1, T::zero(), od[i * p * r..].as_mut_ptr(), r as isize, 1);
        }
    }
    Ok(out)
}

fn matmul_backward<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, g: &Tensor<T>) -> (Tensor<T>, Tensor<T>) {
    let plan = matmul_plan(a.shape(), b.shape()).expect("validated in forward");
    let MatMulPlan { p, q, r, .. } = plan;
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(b.shape());
    let (ad, bd, gd) = (a.data(), b.data(), g.data());
    if b.ndim() == 2 && a.ndim() > 2 {
        let rows = ad.len() / q;
        unsafe {
            // dA = dC B^T
            T::gemm(rows, r, q, T::one(), gd.as_ptr(), r as isize, 1, bd.as_ptr(), 1, r as isize,
                T::zero(), ga.data_mut().as_mut_ptr(), q as isize, 1);
            // dB = A^T dC
            T::gemm(q, rows, r, T::one(), ad.as_ptr(), 1, q as isize, gd.as_ptr(), r as isize, 1,
                T::zero(), gb.data_mut().as_mut_ptr(), r as isize, 1);
        }
        return (ga, gb);
    }
    let gad = ga.data_mut().as_mut_ptr();
    let gbd = gb.data_mut().as_mut_ptr();
    for (i, (&ao, &bo)) in plan.a_off.iter().zip(&plan.b_off).enumerate() {
        let go = i * p * r;
        unsafe {
            T::gemm(p, r, q, T::one(), gd[go..].as_ptr(), r as isize, 1, bd[bo..].as_ptr(), 1,
                r as isize, T::one(), gad.add(ao), q as isize, 1);
            T::gemm(q, p, r, T::one(), ad[ao..].as_ptr(), 1, q as isize, gd[go..].as_ptr(),
                r as isize, 1, T::one(), gbd.add(bo), r as isize, 1);
        }
    }
    (ga, gb)
}

fn softmax_forward<T: Scalar>(x: &Tensor<T>, mask: Option<&Tensor<T>>) -> Result<Tensor<T>> {
    let xs = x.shape();
    let d = *xs.last().unwrap();
    let mut z = x.data().to_vec();
    let mut masked = vec![false; z.len()];
    if let Some(m) = mask {
        if broadcast_shapes(xs, m.shape()).as_deref() != Some(xs) {
            return Err(Error::dim("softmax mask", xs, m.shape()));
        }
        let sm = broadcast_strides(m.shape(), xs);
        let sx = strides(xs);
        let md = m.data();
        let half = T::lit(NEG_SENTINEL / 2.0);
        for_each_broadcast(xs, &sx, &sm, |f, _, im| {
            z[f] += md[im];
            masked[f] = md[im] < half;
        });
    }
    for r in 0..z.len() / d {
        let s = r * d..(r + 1) * d;
        if mask.is_some() && masked[s.clone()].iter().all(|&m| m) {
            return Err(Error::DegenerateDistribution { row: r });
        }
        let row = &mut z[s];
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut sum = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            sum += *v;
        }
        for v in row.iter_mut() {
            *v /= sum;
        }
    }
    Tensor::new(xs, z)
}

/// Maximum relative error between the analytic gradient of `f` at `x` and
/// central finite differences with step `eps`:
/// `max_i |a_i - c_i| / (|a_i| + |c_i| + 1e-12)`.
pub fn finite_diff_check<T: Scalar>(
    f: impl Fn(&mut Graph<T>, Var) -> Result<Var>,
    x: &Tensor<T>,
    eps: f64,
) -> Result<f64> {
    if !(eps > 0.0 && eps <= 1e-2) {
        return Err(Error::Contract(format!("eps {eps} outside (0, 1e-2]")));
    }
    let eval = |point: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.constant(point.clone());
        let out = f(&mut g, v)?;
        if g.value(out).len() != 1 {
            return Err(Error::Contract("finite_diff_check needs a scalar function".into()));
        }
        Ok(g.value(out).item().as_f64())
    };
    let first = eval(x)?;
    let second = eval(x)?;
    if first.to_bits() != second.to_bits() {
        return Err(Error::OracleInvalid(format!(
            "two evaluations differ: {first} vs {second}"
        )));
    }

    let mut store = ParamStore::new();
    let id = store.add("x", x.clone());
    let mut g = Graph::new();
    let xv = g.param(&store, id);
    let out = f(&mut g, xv)?;
    let grads = g.backward(out)?;
    let analytic = grads.get(&id).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));

    let mut worst = 0.0f64;
    let step = T::lit(eps);
    for i in 0..x.len() {
        let mut plus = x.clone();
        plus.data_mut()[i] += step;
        let mut minus = x.clone();
        minus.data_mut()[i] -= step;
        let h = (plus.data()[i] - minus.data()[i]).as_f64();
        let central = (eval(&plus)? - eval(&minus)?) / h;
        let a = analytic.data()[i].as_f64();
        let rel = (a - central).abs() / (a.abs() + central.abs() + 1e-12);
        worst = worst.max(rel);
    }
    Ok(worst)
}
