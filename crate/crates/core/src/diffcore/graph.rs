//! Define-by-run tape. Every op appends a node whose parents already exist, so
//! insertion order is a topological order and the reverse pass is a single
//! backwards sweep.

use std::collections::{BTreeMap, HashMap};

use super::params::{ParamId, ParamKind, ParamStore};
use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Clamp applied to probabilities before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;
pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.99;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BnMode {
    Train,
    Eval,
}

/// Running statistics of a batch-norm layer, stored as buffers. `count`
/// holds the number of updates so far; the first update copies the batch
/// statistics, later ones blend with [`BN_MOMENTUM`].
#[derive(Clone, Copy, Debug)]
pub struct BnRunning {
    pub mean: ParamId,
    pub var: ParamId,
    pub count: ParamId,
}

#[derive(Debug)]
enum Op {
    Constant,
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    PRelu(Var, Var),
    Sigmoid(Var),
    Softmax(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    StopGradient,
    StraightThrough(Var),
    Gather {
        table: Var,
        index: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    RoutedAffine {
        z: Var,
        weights: Vec<Var>,
        biases: Vec<Var>,
        route: Vec<usize>,
    },
    Mix {
        parts: Vec<Var>,
        alpha: Vec<f64>,
    },
    Sum(Var),
    Mse(Var, Var),
    Bce {
        p: Var,
        target: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Option<Tensor>,
    needs_grad: bool,
}

/// Gradients produced by one reverse pass.
///
/// Only parameters reachable from the loss through differentiable edges
/// appear in `params`.
#[derive(Debug, Default)]
pub struct Gradients {
    pub params: BTreeMap<ParamId, Tensor>,
    pub leaves: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }
}

pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
    buffer_updates: Vec<(ParamId, Tensor)>,
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn dims(t: &Tensor) -> String {
    format!("{:?}", t.shape())
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Inputs of every batch-norm node, in node order.
    pub fn batch_norm_inputs(&self) -> Vec<&Tensor> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::BatchNorm { x, .. } => Some(self.value(x)),
                _ => None,
            })
            .collect()
    }

    /// Which side of zero every PReLU input element lies on, in node order.
    ///
    /// Two evaluations with different patterns straddle a point where the
    /// recorded function is not differentiable.
    pub fn kink_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter_map(|n| match n.op {
                Op::PRelu(x, _) => Some(self.value(x).data().iter().map(|&v| v < 0.0)),
                _ => None,
            })
            .flatten()
            .collect()
    }

    fn push(&mut self, op: Op, value: Tensor, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value: Some(value),
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => self.store.value(id),
            _ => node.value.as_ref().expect("node value"),
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// A value that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Constant, t, false)
    }

    /// A differentiable input owned by the graph; its gradient is reported in
    /// [`Gradients::leaves`].
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// References a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let needs = self.store.kind(id) == ParamKind::Trainable;
        self.nodes.push(Node {
            op: Op::Param(id),
            value: None,
            needs_grad: needs,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        v
    }

    pub fn param_by_name(&mut self, name: &str) -> Result<Var> {
        let id = self
            .store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        Ok(self.param(id))
    }

    /// Running-stat updates recorded by train-mode batch norms, in op order.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor)> {
        std::mem::take(&mut self.buffer_updates)
    }

    fn require_matrix(&self, op: &'static str, name: &str, v: Var) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::shape(op, format!("{name} must be a matrix, got {}", dims(t))));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.require_matrix("matmul", "lhs", a)?;
        let (k2, n) = self.require_matrix("matmul", "rhs", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("lhs is {}, rhs is {}", dims(self.value(a)), dims(self.value(b))),
            ));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a).data(), self.value(b).data(), &mut out);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Op::MatMul(a, b), Tensor::matrix(m, n, out)?, needs))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (rows, cols) = self.require_matrix("add_bias", "x", x)?;
        let bt = self.value(b);
        if bt.len() != cols {
            return Err(Error::shape(
                "add_bias",
                format!("x is {}, b is {}", dims(self.value(x)), dims(bt)),
            ));
        }
        let mut out = self.value(x).clone();
        for i in 0..rows {
            for (o, bv) in out.row_mut(i).iter_mut().zip(bt.data()) {
                *o += bv;
            }
        }
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(Op::AddBias(x, b), out.with_requires_grad(false), needs))
    }

    /// `x·W + b` with `b` broadcast over the batch.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (_, in_x) = self.require_matrix("dense_forward", "x", x)?;
        let (in_w, out_w) = self.require_matrix("dense_forward", "W", w)?;
        if in_x != in_w || self.value(b).len() != out_w {
            return Err(Error::shape(
                "dense_forward",
                format!(
                    "x is {}, W is {}, b is {}",
                    dims(self.value(x)),
                    dims(self.value(w)),
                    dims(self.value(b))
                ),
            ));
        }
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    fn elementwise(
        &mut self,
        op_name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(op_name, format!("lhs is {}, rhs is {}", dims(ta), dims(tb))));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(op, out, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        let needs = self.needs(x);
        self.push(Op::Scale(x, c), out, needs)
    }

    /// Per-channel PReLU; `slope` holds one learnable value per column.
    pub fn prelu(&mut self, x: Var, slope: Var) -> Result<Var> {
        let (_, cols) = self.require_matrix("prelu", "x", x)?;
        let a = self.value(slope);
        if a.len() != cols {
            return Err(Error::shape(
                "prelu",
                format!("x is {}, slope is {}", dims(self.value(x)), dims(a)),
            ));
        }
        let mut out = self.value(x).clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            if *v < 0.0 {
                *v *= a.data()[i % cols];
            }
        }
        let needs = self.needs(x) || self.needs(slope);
        Ok(self.push(Op::PRelu(x, slope), out, needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v = sigmoid(*v));
        let needs = self.needs(x);
        self.push(Op::Sigmoid(x), out, needs)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let rows = out.rows();
        for i in 0..rows {
            softmax_in_place(out.row_mut(i));
        }
        let needs = self.needs(x);
        self.push(Op::Softmax(x), out, needs)
    }

    /// Batch normalization over the batch axis.
    ///
    /// Train mode normalizes with the batch mean and population variance and,
    /// when `running` is given, records updated running statistics (see
    /// [`Graph::take_buffer_updates`]). Eval mode normalizes with the running
    /// statistics, which are then required.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<BnRunning>,
        mode: BnMode,
    ) -> Result<Var> {
        let (rows, cols) = self.require_matrix("batch_norm", "x", x)?;
        if self.value(gamma).len() != cols || self.value(beta).len() != cols {
            return Err(Error::shape(
                "batch_norm",
                format!(
                    "x is {}, gamma is {}, beta is {}",
                    dims(self.value(x)),
                    dims(self.value(gamma)),
                    dims(self.value(beta))
                ),
            ));
        }
        let xt = self.value(x);
        let (mean, var) = match mode {
            BnMode::Train => {
                if rows < 2 {
                    return Err(Error::Contract(
                        "batch_norm in train mode needs a batch of at least 2".into(),
                    ));
                }
                let mut mean = vec![0.0; cols];
                for i in 0..rows {
                    for (m, v) in mean.iter_mut().zip(xt.row(i)) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= rows as f64);
                let mut var = vec![0.0; cols];
                for i in 0..rows {
                    for ((s, v), m) in var.iter_mut().zip(xt.row(i)).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= rows as f64);
                (mean, var)
            }
            BnMode::Eval => {
                let r = running.ok_or_else(|| {
                    Error::Config("batch_norm in eval mode needs running statistics".into())
                })?;
                (
                    self.store.value(r.mean).data().to_vec(),
                    self.store.value(r.var).data().to_vec(),
                )
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![0.0; rows * cols];
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            for j in 0..cols {
                let h = (xt.data()[i * cols + j] - mean[j]) * inv_std[j];
                xhat[i * cols + j] = h;
                out[i * cols + j] = g[j] * h + b[j];
            }
        }
        if let (BnMode::Train, Some(r)) = (mode, running) {
            let count = self.store.value(r.count).item();
            let momentum = if count == 0.0 { 0.0 } else { BN_MOMENTUM };
            let blend = |old: &Tensor, new: &[f64]| {
                let data = old
                    .data()
                    .iter()
                    .zip(new)
                    .map(|(o, n)| momentum * o + (1.0 - momentum) * n)
                    .collect();
                Tensor::vector(data)
            };
            let new_mean = blend(self.store.value(r.mean), &mean);
            let new_var = blend(self.store.value(r.var), &var);
            self.buffer_updates.push((r.mean, new_mean));
            self.buffer_updates.push((r.var, new_var));
            self.buffer_updates.push((r.count, Tensor::scalar(count + 1.0)));
        }
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train: mode == BnMode::Train,
            },
            out,
            needs,
        ))
    }

    /// Identity forward; contributes nothing on the reverse pass.
    pub fn stop_gradient(&mut self, x: Var) -> Var {
        let out = self.value(x).clone();
        self.push(Op::StopGradient, out, false)
    }

    /// Forward value of `frozen` exactly, gradient routed to `live` unchanged:
    /// `live + sg(frozen − live)` without the rounding of the explicit sum.
    pub fn straight_through(&mut self, live: Var, frozen: Var) -> Result<Var> {
        let (tl, tf) = (self.value(live), self.value(frozen));
        if !tl.same_shape(tf) {
            return Err(Error::shape(
                "straight_through",
                format!("live is {}, frozen is {}", dims(tl), dims(tf)),
            ));
        }
        let out = tf.clone();
        let needs = self.needs(live);
        Ok(self.push(Op::StraightThrough(live), out, needs))
    }

    /// Row lookup `table[index[i]]`.
    pub fn gather(&mut self, table: Var, index: &[usize]) -> Result<Var> {
        let (n_rows, cols) = self.require_matrix("gather", "table", table)?;
        if index.is_empty() {
            return Err(Error::shape("gather", "empty index"));
        }
        if let Some(bad) = index.iter().find(|&&i| i >= n_rows) {
            return Err(Error::Contract(format!(
                "gather index {bad} out of range for table with {n_rows} rows"
            )));
        }
        let t = self.value(table);
        let mut out = Vec::with_capacity(index.len() * cols);
        for &i in index {
            out.extend_from_slice(t.row(i));
        }
        let out = Tensor::matrix(index.len(), cols, out)?;
        let needs = self.needs(table);
        Ok(self.push(
            Op::Gather {
                table,
                index: index.to_vec(),
            },
            out,
            needs,
        ))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let (rows, _) = self.require_matrix("concat", "part", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.require_matrix("concat", "part", p)?;
            if r != rows {
                return Err(Error::shape(
                    "concat",
                    format!("row counts differ: {rows} vs {r}"),
                ));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let t = self.value(p);
            for i in 0..rows {
                out[i * total + offset..i * total + offset + w].copy_from_slice(t.row(i));
            }
            offset += w;
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(rows, total, out)?;
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out, needs))
    }

    /// Per-row routed affine map: row `i` uses `weights[route[i]]` and, when
    /// biases are given, `biases[route[i]]`.
    pub fn routed_affine(
        &mut self,
        z: Var,
        weights: &[Var],
        biases: &[Var],
        route: &[usize],
    ) -> Result<Var> {
        let (rows, in_w) = self.require_matrix("routed_affine", "Z", z)?;
        if route.len() != rows {
            return Err(Error::shape(
                "routed_affine",
                format!("{rows} rows but {} route entries", route.len()),
            ));
        }
        if weights.is_empty() || (!biases.is_empty() && biases.len() != weights.len()) {
            return Err(Error::shape(
                "routed_affine",
                format!("{} weights, {} biases", weights.len(), biases.len()),
            ));
        }
        if let Some(bad) = route.iter().find(|&&k| k >= weights.len()) {
            return Err(Error::Contract(format!(
                "domain index {bad} out of range for {} specific networks",
                weights.len()
            )));
        }
        let (wi, out_w) = self.require_matrix("routed_affine", "W", weights[0])?;
        for &w in weights {
            if self.value(w).shape() != [wi, out_w] {
                return Err(Error::shape("routed_affine", "specific weights differ in shape"));
            }
        }
        if wi != in_w {
            return Err(Error::shape(
                "routed_affine",
                format!("Z is {}, W is {}", dims(self.value(z)), dims(self.value(weights[0]))),
            ));
        }
        for &b in biases {
            if self.value(b).len() != out_w {
                return Err(Error::shape("routed_affine", "specific bias width mismatch"));
            }
        }
        let zt = self.value(z);
        let mut out = vec![0.0; rows * out_w];
        for (k, members) in group_rows(route, weights.len()).into_iter().enumerate() {
            if members.is_empty() {
                continue;
            }
            let sub = gather_rows(zt.data(), in_w, &members);
            let mut prod = vec![0.0; members.len() * out_w];
            gemm(members.len(), in_w, out_w, &sub, self.value(weights[k]).data(), &mut prod);
            let bias = biases.get(k).map(|&b| self.value(b).data());
            for (r, &i) in members.iter().enumerate() {
                let dst = &mut out[i * out_w..(i + 1) * out_w];
                dst.copy_from_slice(&prod[r * out_w..(r + 1) * out_w]);
                if let Some(bias) = bias {
                    for (o, b) in dst.iter_mut().zip(bias) {
                        *o += b;
                    }
                }
            }
        }
        let needs = self.needs(z)
            || weights.iter().any(|&w| self.needs(w))
            || biases.iter().any(|&b| self.needs(b));
        let out = Tensor::matrix(rows, out_w, out)?;
        Ok(self.push(
            Op::RoutedAffine {
                z,
                weights: weights.to_vec(),
                biases: biases.to_vec(),
                route: route.to_vec(),
            },
            out,
            needs,
        ))
    }

    /// `Σ_j alpha[i, j] · parts[j][i, :]` with constant mixing weights.
    pub fn mix(&mut self, parts: &[Var], alpha: &Tensor) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::shape("mix", "nothing to mix"))?;
        let (rows, cols) = self.require_matrix("mix", "part", first)?;
        if alpha.shape() != [rows, parts.len()] {
            return Err(Error::shape(
                "mix",
                format!("alpha is {}, expected [{rows}, {}]", dims(alpha), parts.len()),
            ));
        }
        let mut out = vec![0.0; rows * cols];
        for (j, &p) in parts.iter().enumerate() {
            let t = self.value(p);
            if t.shape() != [rows, cols] {
                return Err(Error::shape("mix", "parts differ in shape"));
            }
            for i in 0..rows {
                let a = alpha.data()[i * parts.len() + j];
                for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(t.row(i)) {
                    *o += a * v;
                }
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        let out = Tensor::matrix(rows, cols, out)?;
        Ok(self.push(
            Op::Mix {
                parts: parts.to_vec(),
                alpha: alpha.data().to_vec(),
            },
            out,
            needs,
        ))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let needs = self.needs(x);
        self.push(Op::Sum(x), Tensor::scalar(total), needs)
    }

    /// Batch mean of the per-row squared L2 distance.
    pub fn mse(&mut self, u: Var, v: Var) -> Result<Var> {
        let (tu, tv) = (self.value(u), self.value(v));
        if !tu.same_shape(tv) {
            return Err(Error::shape("loss_mse", format!("u is {}, v is {}", dims(tu), dims(tv))));
        }
        let rows = tu.rows() as f64;
        let total: f64 = tu
            .data()
            .iter()
            .zip(tv.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum();
        let needs = self.needs(u) || self.needs(v);
        Ok(self.push(Op::Mse(u, v), Tensor::scalar(total / rows), needs))
    }

    /// Mean binary cross-entropy with `p` clamped to `[1e-7, 1 − 1e-7]`.
    pub fn bce(&mut self, p: Var, target: &[f64]) -> Result<Var> {
        let tp = self.value(p);
        if tp.len() != target.len() {
            return Err(Error::shape(
                "loss_ce",
                format!("p is {}, y has {} entries", dims(tp), target.len()),
            ));
        }
        let loss = binary_cross_entropy(tp.data(), target);
        let needs = self.needs(p);
        Ok(self.push(
            Op::Bce {
                p,
                target: target.to_vec(),
            },
            Tensor::scalar(loss),
            needs,
        ))
    }

    /// Reverse pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut out = Gradients::default();
        if !self.needs(loss) {
            return Ok(out);
        }
        grads[loss.0] = Some(Tensor::new(self.value(loss).shape().to_vec(), vec![1.0])?);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Constant | Op::StopGradient => {}
                Op::Leaf => {
                    out.leaves.insert(Var(idx), g);
                }
                Op::Param(id) => {
                    out.params.insert(*id, g);
                }
                Op::MatMul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm_nt(m, n, k, g.data(), tb.data(), &mut da, 0.0);
                        accumulate(&mut grads, *a, Tensor::matrix(m, k, da)?);
                    }
                    if self.needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm_tn(k, m, n, ta.data(), g.data(), &mut db, 0.0);
                        accumulate(&mut grads, *b, Tensor::matrix(k, n, db)?);
                    }
                }
                Op::AddBias(x, b) => {
                    if self.needs(*b) {
                        let tb = self.value(*b);
                        let mut db = vec![0.0; tb.len()];
                        for i in 0..g.rows() {
                            for (d, v) in db.iter_mut().zip(g.row(i)) {
                                *d += v;
                            }
                        }
                        accumulate(&mut grads, *b, Tensor::new(tb.shape().to_vec(), db)?);
                    }
                    if self.needs(*x) {
                        accumulate(&mut grads, *x, g);
                    }
                }
                Op::Add(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        accumulate(&mut grads, *b, g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.needs(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.needs(*b) {
                        let mut neg = g;
                        neg.data_mut().iter_mut().for_each(|v| *v = -*v);
                        accumulate(&mut grads, *b, neg);
                    }
                }
                Op::Mul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    if self.needs(*a) {
                        let mut d = g.clone();
                        d.data_mut().iter_mut().zip(tb.data()).for_each(|(d, v)| *d *= v);
                        accumulate(&mut grads, *a, d);
                    }
                    if self.needs(*b) {
                        let mut d = g;
                        d.data_mut().iter_mut().zip(ta.data()).for_each(|(d, v)| *d *= v);
                        accumulate(&mut grads, *b, d);
                    }
                }
                Op::Scale(x, c) => {
                    let mut d = g;
                    d.data_mut().iter_mut().for_each(|v| *v *= c);
                    accumulate(&mut grads, *x, d);
                }
                Op::PRelu(x, a) => {
                    let (tx, ta) = (self.value(*x), self.value(*a));
                    let cols = tx.cols();
                    if self.needs(*a) {
                        let mut da = vec![0.0; cols];
                        for (i, (&xv, &gv)) in tx.data().iter().zip(g.data()).enumerate() {
                            if xv < 0.0 {
                                da[i % cols] += gv * xv;
                            }
                        }
                        accumulate(&mut grads, *a, Tensor::new(ta.shape().to_vec(), da)?);
                    }
                    if self.needs(*x) {
                        let mut dx = g;
                        for (i, (d, &xv)) in dx.data_mut().iter_mut().zip(tx.data()).enumerate() {
                            if xv < 0.0 {
                                *d *= ta.data()[i % cols];
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Sigmoid(x) => {
                    let y = node.value.as_ref().expect("value");
                    let mut dx = g;
                    dx.data_mut()
                        .iter_mut()
                        .zip(y.data())
                        .for_each(|(d, s)| *d *= s * (1.0 - s));
                    accumulate(&mut grads, *x, dx);
                }
                Op::Softmax(x) => {
                    let y = node.value.as_ref().expect("value");
                    let mut dx = g;
                    for i in 0..y.rows() {
                        let yr = y.row(i);
                        let gr = dx.row_mut(i);
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for (d, s) in gr.iter_mut().zip(yr) {
                            *d = s * (*d - dot);
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                    train,
                } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let gam = self.value(*gamma).data();
                    let mut sum_g = vec![0.0; cols];
                    let mut sum_gx = vec![0.0; cols];
                    for i in 0..rows {
                        for j in 0..cols {
                            let gv = g.data()[i * cols + j];
                            sum_g[j] += gv;
                            sum_gx[j] += gv * xhat[i * cols + j];
                        }
                    }
                    if self.needs(*gamma) {
                        let shape = self.value(*gamma).shape().to_vec();
                        accumulate(&mut grads, *gamma, Tensor::new(shape, sum_gx.clone())?);
                    }
                    if self.needs(*beta) {
                        let shape = self.value(*beta).shape().to_vec();
                        accumulate(&mut grads, *beta, Tensor::new(shape, sum_g.clone())?);
                    }
                    if self.needs(*x) {
                        let mut dx = vec![0.0; rows * cols];
                        let n = rows as f64;
                        for i in 0..rows {
                            for j in 0..cols {
                                let at = i * cols + j;
                                let gv = g.data()[at];
                                dx[at] = if *train {
                                    gam[j] * inv_std[j] / n
                                        * (n * gv - sum_g[j] - xhat[at] * sum_gx[j])
                                } else {
                                    gam[j] * inv_std[j] * gv
                                };
                            }
                        }
                        accumulate(&mut grads, *x, Tensor::matrix(rows, cols, dx)?);
                    }
                }
                Op::StraightThrough(live) => {
                    accumulate(&mut grads, *live, g);
                }
                Op::Gather { table, index } => {
                    let tt = self.value(*table);
                    let cols = tt.cols();
                    let mut dt = tt.zeros_like();
                    for (r, &i) in index.iter().enumerate() {
                        for (d, v) in dt.row_mut(i).iter_mut().zip(&g.data()[r * cols..(r + 1) * cols]) {
                            *d += v;
                        }
                    }
                    accumulate(&mut grads, *table, dt);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = (g.rows(), g.cols());
                    let mut offset = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.needs(p) {
                            let mut d = Vec::with_capacity(rows * w);
                            for i in 0..rows {
                                d.extend_from_slice(&g.data()[i * total + offset..i * total + offset + w]);
                            }
                            accumulate(&mut grads, p, Tensor::matrix(rows, w, d)?);
                        }
                        offset += w;
                    }
                }
                Op::RoutedAffine {
                    z,
                    weights,
                    biases,
                    route,
                } => {
                    let tz = self.value(*z);
                    let (rows, in_w) = (tz.rows(), tz.cols());
                    let out_w = g.cols();
                    let mut dz = vec![0.0; rows * in_w];
                    for (k, members) in group_rows(route, weights.len()).into_iter().enumerate() {
                        if members.is_empty() {
                            continue;
                        }
                        let gsub = gather_rows(g.data(), out_w, &members);
                        let w = weights[k];
                        if self.needs(w) {
                            let zsub = gather_rows(tz.data(), in_w, &members);
                            let mut dw = vec![0.0; in_w * out_w];
                            gemm_tn(in_w, members.len(), out_w, &zsub, &gsub, &mut dw, 0.0);
                            accumulate(&mut grads, w, Tensor::matrix(in_w, out_w, dw)?);
                        }
                        if let Some(&b) = biases.get(k) {
                            if self.needs(b) {
                                let mut db = vec![0.0; out_w];
                                for r in 0..members.len() {
                                    for (d, v) in db.iter_mut().zip(&gsub[r * out_w..(r + 1) * out_w]) {
                                        *d += v;
                                    }
                                }
                                let shape = self.value(b).shape().to_vec();
                                accumulate(&mut grads, b, Tensor::new(shape, db)?);
                            }
                        }
                        if self.needs(*z) {
                            let mut dsub = vec![0.0; members.len() * in_w];
                            gemm_nt(members.len(), out_w, in_w, &gsub, self.value(w).data(), &mut dsub, 0.0);
                            for (r, &i) in members.iter().enumerate() {
                                dz[i * in_w..(i + 1) * in_w].copy_from_slice(&dsub[r * in_w..(r + 1) * in_w]);
                            }
                        }
                    }
                    if self.needs(*z) {
                        accumulate(&mut grads, *z, Tensor::matrix(rows, in_w, dz)?);
                    }
                }
                Op::Mix { parts, alpha } => {
                    let (rows, cols) = (g.rows(), g.cols());
                    let n = parts.len();
                    for (j, &p) in parts.iter().enumerate() {
                        if !self.needs(p) {
                            continue;
                        }
                        let mut d = g.clone();
                        for i in 0..rows {
                            let a = alpha[i * n + j];
                            d.data_mut()[i * cols..(i + 1) * cols].iter_mut().for_each(|v| *v *= a);
                        }
                        accumulate(&mut grads, p, d);
                    }
                }
                Op::Sum(x) => {
                    let shape = self.value(*x).shape();
                    accumulate(&mut grads, *x, Tensor::full(shape, g.item()));
                }
                Op::Mse(u, v) => {
                    let (tu, tv) = (self.value(*u), self.value(*v));
                    let c = 2.0 * g.item() / tu.rows() as f64;
                    let diff: Vec<f64> = tu.data().iter().zip(tv.data()).map(|(a, b)| c * (a - b)).collect();
                    let shape = tu.shape().to_vec();
                    if self.needs(*v) {
                        let neg = diff.iter().map(|d| -d).collect();
                        accumulate(&mut grads, *v, Tensor::new(shape.clone(), neg)?);
                    }
                    if self.needs(*u) {
                        accumulate(&mut grads, *u, Tensor::new(shape, diff)?);
                    }
                }
                Op::Bce { p, target } => {
                    let tp = self.value(*p);
                    let n = tp.len() as f64;
                    let d = tp
                        .data()
                        .iter()
                        .zip(target)
                        .map(|(&pv, &y)| {
                            if !(PROB_CLAMP..=1.0 - PROB_CLAMP).contains(&pv) {
                                0.0
                            } else {
                                g.item() / n * ((1.0 - y) / (1.0 - pv) - y / pv)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, Tensor::new(tp.shape().to_vec(), d)?);
                }
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Mean binary cross-entropy with clamped probabilities. Shared by the
/// training loss and the LogLoss metric.
pub fn binary_cross_entropy(p: &[f64], y: &[f64]) -> f64 {
    let total: f64 = p
        .iter()
        .zip(y)
        .map(|(&pv, &yv)| {
            let pc = pv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(yv * pc.ln() + (1.0 - yv) * (1.0 - pc).ln())
        })
        .sum();
    total / p.len() as f64
}

fn group_rows(route: &[usize], n: usize) -> Vec<Vec<usize>> {
    let mut groups = vec![Vec::new(); n];
    for (i, &k) in route.iter().enumerate() {
        groups[k].push(i);
    }
    groups
}

fn gather_rows(data: &[f64], cols: usize, rows: &[usize]) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols);
    for &i in rows {
        out.extend_from_slice(&data[i * cols..(i + 1) * cols]);
    }
    out
}
