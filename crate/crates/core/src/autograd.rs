//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! Parameters enter the graph through [`Graph::param`], which hands out one
//! leaf per parameter so that weights shared across recursive stages
//! accumulate their gradient contributions in a single slot.

use crate::kernels::{self, BatchNormSaved, ConvGeom};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{Shape, Tensor};
use std::cell::RefCell;
use std::collections::{HashMap, HashSet};
use std::rc::Rc;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    ConvTranspose {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<u32>,
    },
    Relu(Var),
    Sigmoid(Var),
    Concat(Vec<Var>),
    Resize(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        saved: BatchNormSaved,
        batch_stats: bool,
    },
    Weighted(Vec<(Var, f64)>),
    Bce {
        p: Var,
        target: Rc<Tensor>,
        eps: f64,
    },
    SoftmaxCe {
        logits: Var,
        target: Rc<Tensor>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Conv { x, w, b, .. } | Op::ConvTranspose { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            Op::MaxPool { x, .. } | Op::Relu(x) | Op::Sigmoid(x) | Op::Resize(x) => vec![*x],
            Op::Concat(parts) => parts.clone(),
            Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Weighted(terms) => terms.iter().map(|(v, _)| *v).collect(),
            Op::Bce { p, .. } => vec![*p],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
        }
    }

    /// The weight operand of a parameterized layer op.
    fn weight(&self) -> Option<Var> {
        match self {
            Op::Conv { w, .. } | Op::ConvTranspose { w, .. } => Some(*w),
            Op::BatchNorm { gamma, .. } => Some(*gamma),
            _ => None,
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics observed by a training-mode batch norm, to be folded
/// into its running averages after the step.
#[derive(Clone, Debug)]
pub struct BnObservation {
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub count: usize,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    training: bool,
    nodes: RefCell<Vec<Node>>,
    param_vars: RefCell<HashMap<ParamId, Var>>,
    bn_observations: RefCell<Vec<BnObservation>>,
}

/// Gradients indexed by parameter.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.index()).and_then(Option::as_ref)
    }

    pub fn norm(&self, id: ParamId) -> f64 {
        self.get(id).map_or(0.0, Tensor::norm)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|g| (ParamId(i), g)))
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore, training: bool) -> Self {
        Self {
            params,
            training,
            nodes: RefCell::new(Vec::new()),
            param_vars: RefCell::new(HashMap::new()),
            bn_observations: RefCell::new(Vec::new()),
        }
    }

    pub fn training(&self) -> bool {
        self.training
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let needs_grad = {
            let nodes = self.nodes.borrow();
            op.parents().iter().any(|p| nodes[p.0].needs_grad)
        };
        self.push_node(Node {
            value: Rc::new(value),
            op,
            needs_grad,
            param: None,
        })
    }

    fn push_node(&self, node: Node) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(node);
        Var(nodes.len() - 1)
    }

    /// A constant input; never receives gradient.
    pub fn input(&self, value: Tensor) -> Var {
        self.push_node(Node {
            value: Rc::new(value),
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        })
    }

    /// The leaf for a stored parameter. Repeated calls return the same node.
    pub fn param(&self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.borrow().get(&id) {
            return v;
        }
        let v = self.push_node(Node {
            value: self.params.shared(id),
            op: Op::Leaf,
            needs_grad: self.params.role(id).trainable(),
            param: Some(id),
        });
        self.param_vars.borrow_mut().insert(id, v);
        v
    }

    /// Same value as `v`, cut off from the gradient.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        self.push_node(Node {
            value,
            op: Op::Leaf,
            needs_grad: false,
            param: None,
        })
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes.borrow()[v.0].value.shape()
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let y = kernels::conv2d(&xv, &wv, bv.as_deref().map(Tensor::data), geom);
        self.push(y, Op::Conv { x, w, b, geom })
    }

    /// Transposed convolution; `output_pad` extends the bottom/right edge.
    pub fn conv_transpose2d(&self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom, output_pad: usize) -> Var {
        let xv = self.value(x);
        let wv = self.value(w);
        let bv = b.map(|b| self.value(b));
        let y = kernels::conv_transpose2d(&xv, &wv, bv.as_deref().map(Tensor::data), geom, output_pad);
        self.push(y, Op::ConvTranspose { x, w, b, geom })
    }

    pub fn max_pool2(&self, x: Var) -> Var {
        let (y, arg) = kernels::max_pool2(&self.value(x));
        self.push(y, Op::MaxPool { x, arg })
    }

    pub fn relu(&self, x: Var) -> Var {
        let y = self.value(x).map(|v| v.max(0.0));
        self.push(y, Op::Relu(x))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let y = self.value(x).map(sigmoid);
        self.push(y, Op::Sigmoid(x))
    }

    /// Channel-wise concatenation.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape();
        let channels: usize = values.iter().map(|v| v.shape().c).sum();
        for v in &values {
            let s = v.shape();
            assert_eq!(
                (s.n, s.h, s.w),
                (first.n, first.h, first.w),
                "concat of mismatched maps"
            );
        }
        let mut out = Tensor::zeros(Shape::new(first.n, channels, first.h, first.w));
        let mut offset = 0;
        for n in 0..first.n {
            for v in &values {
                let item = v.item(n);
                out.data_mut()[offset..offset + item.len()].copy_from_slice(item);
                offset += item.len();
            }
        }
        self.push(out, Op::Concat(parts.to_vec()))
    }

    pub fn resize(&self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        if xv.shape().spatial() == (h, w) {
            return x;
        }
        let y = kernels::resize_bilinear(&xv, h, w);
        self.push(y, Op::Resize(x))
    }

    /// Batch normalization. In training mode batch statistics are used and
    /// recorded for the running averages; otherwise the running averages are
    /// applied as constants.
    pub fn batch_norm(&self, x: Var, gamma: ParamId, beta: ParamId, running: (ParamId, ParamId), eps: f64) -> Var {
        let xv = self.value(x);
        let gv = self.params.get(gamma);
        let bv = self.params.get(beta);
        let stats = (!self.training).then(|| {
            (
                self.params.get(running.0).data(),
                self.params.get(running.1).data(),
            )
        });
        let (y, saved) = kernels::batch_norm(&xv, gv.data(), bv.data(), stats, eps);
        if self.training {
            let s = xv.shape();
            self.bn_observations.borrow_mut().push(BnObservation {
                running_mean: running.0,
                running_var: running.1,
                mean: saved.mean.clone(),
                var: saved.var.clone(),
                count: s.n * s.plane(),
            });
        }
        let gamma = self.param(gamma);
        let beta = self.param(beta);
        self.push(
            y,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
                batch_stats: self.training,
            },
        )
    }

    /// `sum_k weight_k * term_k` over same-shaped terms.
    pub fn weighted_sum(&self, terms: &[(Var, f64)]) -> Var {
        let mut acc = Tensor::zeros(self.shape(terms[0].0));
        for &(v, k) in terms {
            let val = self.value(v);
            assert_eq!(val.shape(), acc.shape(), "weighted_sum of mismatched shapes");
            for (a, b) in acc.data_mut().iter_mut().zip(val.data()) {
                *a += k * b;
            }
        }
        self.push(acc, Op::Weighted(terms.to_vec()))
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        self.weighted_sum(&[(a, 1.0), (b, 1.0)])
    }

    /// Mean binary cross-entropy of scores in `[0, 1]` against a 0/1 target,
    /// with scores clamped to `[eps, 1 - eps]`.
    pub fn bce(&self, p: Var, target: Rc<Tensor>, eps: f64) -> Var {
        let pv = self.value(p);
        let n = pv.len() as f64;
        let loss = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&s, &t)| {
                let s = s.clamp(eps, 1.0 - eps);
                -(t * s.ln() + (1.0 - t) * (1.0 - s).ln())
            })
            .sum::<f64>()
            / n;
        self.push(Tensor::scalar(loss), Op::Bce { p, target, eps })
    }

    /// Mean softmax cross-entropy of 2-channel logits (channel 1 = foreground)
    /// against a single-channel 0/1 target.
    pub fn softmax_ce(&self, logits: Var, target: Rc<Tensor>) -> Var {
        let lv = self.value(logits);
        let s = lv.shape();
        let plane = s.plane();
        let mut total = 0.0;
        for n in 0..s.n {
            let bg = lv.plane(n, 0);
            let fg = lv.plane(n, 1);
            let t = &target.data()[n * plane..(n + 1) * plane];
            for i in 0..plane {
                let (own, other) = if t[i] > 0.5 { (fg[i], bg[i]) } else { (bg[i], fg[i]) };
                total += log1p_exp(other - own);
            }
        }
        let loss = total / (s.n * plane) as f64;
        self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, target })
    }

    pub fn take_bn_observations(&self) -> Vec<BnObservation> {
        std::mem::take(&mut self.bn_observations.borrow_mut())
    }

    /// The parameter leaf behind `v`, if it is one.
    pub fn param_of(&self, v: Var) -> Option<ParamId> {
        self.nodes.borrow()[v.0].param
    }

    /// Walks upstream from `v` through parameter-free operations and returns
    /// the weight parameters of the first parameterized layers reached. This
    /// is the layer a loss attached at `v` reads directly.
    pub fn nearest_layers(&self, v: Var) -> Vec<ParamId> {
        let nodes = self.nodes.borrow();
        let mut found = Vec::new();
        let mut seen = HashSet::new();
        let mut stack = vec![v];
        while let Some(cur) = stack.pop() {
            if !seen.insert(cur) {
                continue;
            }
            let node = &nodes[cur.0];
            if let Some(w) = node.op.weight() {
                if let Some(id) = nodes[w.0].param {
                    if !found.contains(&id) {
                        found.push(id);
                    }
                }
                continue;
            }
            stack.extend(node.op.parents());
        }
        found.sort();
        found
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), 1.0));
        let mut out = Gradients {
            grads: vec![None; self.params.len()],
        };

        fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
            match &mut grads[v.0] {
                Some(acc) => acc.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let wants = |v: &Var| nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    if let Some(id) = node.param {
                        out.grads[id.index()] = Some(dy);
                    }
                }
                Op::Conv { x, w, b, geom } => {
                    let (dx, dw, db) = kernels::conv2d_backward(&nodes[x.0].value, &nodes[w.0].value, &dy, *geom, wants(x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if wants(w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(wants) {
                        let shape = nodes[b.0].value.shape();
                        accumulate(&mut grads, b, Tensor::from_vec(shape, db).expect("bias shape"));
                    }
                }
                Op::ConvTranspose { x, w, b, geom } => {
                    let (dx, dw, db) =
                        kernels::conv_transpose2d_backward(&nodes[x.0].value, &nodes[w.0].value, &dy, *geom, wants(x));
                    if let Some(dx) = dx {
                        accumulate(&mut grads, *x, dx);
                    }
                    if wants(w) {
                        accumulate(&mut grads, *w, dw);
                    }
                    if let Some(b) = b.filter(wants) {
                        let shape = nodes[b.0].value.shape();
                        accumulate(&mut grads, b, Tensor::from_vec(shape, db).expect("bias shape"));
                    }
                }
                Op::MaxPool { x, arg } => {
                    if wants(x) {
                        let dx = kernels::max_pool2_backward(nodes[x.0].value.shape(), node.value.shape(), arg, &dy);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        if y <= 0.0 {
                            *g = 0.0;
                        }
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Sigmoid(x) => {
                    let mut dx = dy;
                    for (g, &y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                        *g *= y * (1.0 - y);
                    }
                    accumulate(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let s = node.value.shape();
                    let mut offset = 0;
                    let mut pieces: Vec<Vec<f64>> = parts
                        .iter()
                        .map(|p| Vec::with_capacity(nodes[p.0].value.len()))
                        .collect();
                    for _ in 0..s.n {
                        for (k, p) in parts.iter().enumerate() {
                            let len = nodes[p.0].value.shape().c * s.plane();
                            pieces[k].extend_from_slice(&dy.data()[offset..offset + len]);
                            offset += len;
                        }
                    }
                    for (p, piece) in parts.iter().zip(pieces) {
                        if wants(p) {
                            let t = Tensor::from_vec(nodes[p.0].value.shape(), piece).expect("concat split");
                            accumulate(&mut grads, *p, t);
                        }
                    }
                }
                Op::Resize(x) => {
                    let dx = kernels::resize_bilinear_backward(nodes[x.0].value.shape(), &dy);
                    accumulate(&mut grads, *x, dx);
                }
                Op::BatchNorm {
                    x,
                    gamma,
                    beta,
                    saved,
                    batch_stats,
                } => {
                    let gv = &nodes[gamma.0].value;
                    let (dx, dgamma, dbeta) = kernels::batch_norm_backward(&dy, gv.data(), saved, *batch_stats);
                    if wants(x) {
                        accumulate(&mut grads, *x, dx);
                    }
                    if wants(gamma) {
                        accumulate(&mut grads, *gamma, Tensor::from_vec(gv.shape(), dgamma).expect("gamma shape"));
                    }
                    if wants(beta) {
                        let shape = nodes[beta.0].value.shape();
                        accumulate(&mut grads, *beta, Tensor::from_vec(shape, dbeta).expect("beta shape"));
                    }
                }
                Op::Weighted(terms) => {
                    for &(v, k) in terms {
                        if wants(&v) {
                            let mut g = dy.clone();
                            g.scale_assign(k);
                            accumulate(&mut grads, v, g);
                        }
                    }
                }
                Op::Bce { p, target, eps } => {
                    let pv = &nodes[p.0].value;
                    let scale = dy.data()[0] / pv.len() as f64;
                    let data = pv
                        .data()
                        .iter()
                        .zip(target.data())
                        .map(|(&s, &t)| {
                            if s <= *eps || s >= 1.0 - eps {
                                0.0
                            } else {
                                scale * ((1.0 - t) / (1.0 - s) - t / s)
                            }
                        })
                        .collect();
                    accumulate(&mut grads, *p, Tensor::from_vec(pv.shape(), data).expect("bce grad"));
                }
                Op::SoftmaxCe { logits, target } => {
                    let lv = &nodes[logits.0].value;
                    let s = lv.shape();
                    let plane = s.plane();
                    let scale = dy.data()[0] / (s.n * plane) as f64;
                    let mut dl = Tensor::zeros(s);
                    for n in 0..s.n {
                        for i in 0..plane {
                            let bg = lv.data()[(n * 2) * plane + i];
                            let fg = lv.data()[(n * 2 + 1) * plane + i];
                            let p_fg = sigmoid(fg - bg);
                            let t = target.data()[n * plane + i];
                            dl.data_mut()[(n * 2 + 1) * plane + i] = scale * (p_fg - t);
                            dl.data_mut()[(n * 2) * plane + i] = scale * (t - p_fg);
                        }
                    }
                    accumulate(&mut grads, *logits, dl);
                }
            }
        }
        out
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^v)` without overflow.
fn log1p_exp(v: f64) -> f64 {
    if v > 0.0 {
        v + (-v).exp().ln_1p()
    } else {
        v.exp().ln_1p()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamRole;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` around every entry of parameter `id`.
    fn numeric_grad(store: &mut ParamStore, id: ParamId, f: &dyn Fn(&ParamStore) -> f64) -> Tensor {
        let h = 1e-6;
        let mut g = Tensor::zeros(store.get(id).shape());
        for i in 0..g.len() {
            let orig = store.get(id).data()[i];
            store.get_mut(id).data_mut()[i] = orig + h;
            let up = f(store);
            store.get_mut(id).data_mut()[i] = orig - h;
            let down = f(store);
            store.get_mut(id).data_mut()[i] = orig;
            g.data_mut()[i] = (up - down) / (2.0 * h);
        }
        g
    }

    fn assert_close(a: &Tensor, b: &Tensor) {
        for (x, y) in a.data().iter().zip(b.data()) {
            let denom = x.abs().max(y.abs()).max(1e-6);
            assert!((x - y).abs() / denom < 1e-5, "analytic {x} vs numeric {y}");
        }
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new();
        let w1 = store.register("a.conv.weight", Tensor::randn(Shape::new(3, 2, 3, 3), 0.5, &mut rng), ParamRole::Weight);
        let b1 = store.register("a.conv.bias", Tensor::randn(Shape::new(1, 3, 1, 1), 0.1, &mut rng), ParamRole::Bias);
        let gm = store.register("a.bn.gamma", Tensor::uniform(Shape::new(1, 3, 1, 1), 0.5, 1.5, &mut rng), ParamRole::Gamma);
        let bt = store.register("a.bn.beta", Tensor::randn(Shape::new(1, 3, 1, 1), 0.1, &mut rng), ParamRole::Beta);
        let rm = store.register("a.bn.running_mean", Tensor::zeros(Shape::new(1, 3, 1, 1)), ParamRole::RunningMean);
        let rv = store.register("a.bn.running_var", Tensor::full(Shape::new(1, 3, 1, 1), 1.0), ParamRole::RunningVar);
        let w2 = store.register("a.deconv.weight", Tensor::randn(Shape::new(6, 2, 3, 3), 0.5, &mut rng), ParamRole::Weight);
        let b2 = store.register("a.deconv.bias", Tensor::randn(Shape::new(1, 2, 1, 1), 0.1, &mut rng), ParamRole::Bias);
        let x = Tensor::randn(Shape::new(2, 2, 6, 6), 1.0, &mut rng);
        let target = Rc::new(Tensor::from_vec(
            Shape::new(2, 1, 6, 6),
            (0..72).map(|i| f64::from((i * 7 % 5 == 0) as u8)).collect(),
        )
        .unwrap());

        let forward = |store: &ParamStore| -> (f64, Option<Gradients>) {
            let g = Graph::new(store, true);
            let xi = g.input(x.clone());
            let c = g.conv2d(xi, g.param(w1), Some(g.param(b1)), ConvGeom::same(3, 2));
            let n = g.batch_norm(c, gm, bt, (rm, rv), 1e-5);
            let r = g.relu(n);
            let cat = g.concat(&[r, g.sigmoid(c)]);
            let d = g.conv_transpose2d(cat, g.param(w2), Some(g.param(b2)), ConvGeom::same(3, 2), 1);
            let pooled = g.max_pool2(d);
            let up = g.resize(pooled, 6, 6);
            let logits = g.weighted_sum(&[(up, 0.7)]);
            let ce = g.softmax_ce(logits, Rc::clone(&target));
            let fg = g.sigmoid(g.resize(pooled, 6, 6));
            let score = g.concat(&[fg]);
            let s1 = g.weighted_sum(&[(score, 1.0)]);
            // keep only the first channel for the binary head
            let one = g.conv2d(s1, g.input(Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![1.0, 0.0]).unwrap()), None, ConvGeom::same(1, 1));
            let bce = g.bce(one, Rc::clone(&target), 1e-7);
            let total = g.weighted_sum(&[(ce, 1.0), (bce, 0.5)]);
            let value = g.value(total).data()[0];
            (value, Some(g.backward(total)))
        };

        let (_, grads) = forward(&store);
        let grads = grads.unwrap();
        for id in [w1, b1, gm, bt, w2, b2] {
            let numeric = numeric_grad(&mut store, id, &|s| forward(s).0);
            assert_close(grads.get(id).unwrap(), &numeric);
        }
        assert!(grads.get(rm).is_none());
    }

    #[test]
    fn shared_parameter_accumulates() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), ParamRole::Weight);
        let g = Graph::new(&store, true);
        let x = g.input(Tensor::full(Shape::new(1, 1, 1, 1), 3.0));
        let once = g.conv2d(x, g.param(w), None, ConvGeom::same(1, 1));
        let twice = g.conv2d(once, g.param(w), None, ConvGeom::same(1, 1));
        let grads = g.backward(twice);
        // d(w^2 x)/dw = 2 w x
        assert_eq!(grads.get(w).unwrap().data()[0], 12.0);
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut store = ParamStore::new();
        let w = store.register("w", Tensor::full(Shape::new(1, 1, 1, 1), 2.0), ParamRole::Weight);
        let g = Graph::new(&store, true);
        let x = g.input(Tensor::full(Shape::new(1, 1, 1, 1), 3.0));
        let y = g.conv2d(x, g.param(w), None, ConvGeom::same(1, 1));
        let z = g.detach(y);
        let out = g.add(z, g.input(Tensor::scalar(1.0)));
        assert!(g.backward(out).get(w).is_none());
    }

    #[test]
    fn loss_values() {
        let store = ParamStore::new();
        let g = Graph::new(&store, false);
        let p = g.input(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![0.9, 0.1, 0.8, 0.3]).unwrap());
        let t = Rc::new(Tensor::from_vec(Shape::new(1, 1, 2, 2), vec![1.0, 0.0, 1.0, 0.0]).unwrap());
        let l = g.bce(p, t, 1e-7);
        let expected = -(0.9f64.ln() + 0.9f64.ln() + 0.8f64.ln() + 0.7f64.ln()) / 4.0;
        assert!((g.value(l).data()[0] - expected).abs() < 1e-15);
        assert!((expected - 0.197_634_881_642_148_7).abs() < 1e-12);
    }
}
