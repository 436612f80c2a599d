//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is a write-once tape: every operation appends a node holding
//! the forward value and a closure that maps the node's output gradient to
//! gradient contributions for its parents. One graph is built per forward
//! pass and dropped afterwards; model parameters live in a
//! [`crate::params::ParamStore`] and are bound into a graph as leaves.
//!
//! Backward walks the tape in reverse. [`Graph::backward_seeded`] accepts
//! extra (node, gradient) seeds so that a loss computed on a *different*
//! graph (the cross-example contrastive term) can inject its gradients into
//! this one.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;
use rand::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

type BackFn = Box<dyn Fn(&Tensor) -> Vec<(NodeId, Tensor)> + Send + Sync>;

struct Node {
    value: Tensor,
    backward: Option<BackFn>,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, NodeId)>,
}

/// Per-node gradients produced by a backward pass.
pub struct Gradients {
    by_node: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.by_node[id.0].as_ref()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, backward: Option<BackFn>) -> NodeId {
        self.nodes.push(Node { value, backward });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf whose gradient is tracked (inputs under test, injected values).
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, None)
    }

    /// Leaf bound to a parameter; gradients are recoverable per [`ParamId`].
    /// Binding the same parameter twice returns the earlier node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        if let Some(&(_, node)) = self.bindings.iter().find(|(pid, _)| *pid == id) {
            return node;
        }
        let node = self.push(store.value(id).clone(), None);
        self.bindings.push((id, node));
        node
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).add(self.value(b));
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a, g.clone()), (b, g.clone())]
            })),
        )
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let value = self.value(a).sub(self.value(b));
        self.push(
            value,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.scale(-1.0))])),
        )
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.mul(&bv);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a, g.mul(&bv)), (b, g.mul(&av))]
            })),
        )
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let value = self.value(a).scale(c);
        self.push(value, Some(Box::new(move |g| vec![(a, g.scale(c))])))
    }

    /// Adds a 1 x d bias row to every row of an n x d matrix.
    pub fn add_bias(&mut self, m: NodeId, bias: NodeId) -> NodeId {
        let mv = self.value(m);
        let bv = self.value(bias);
        assert_eq!(bv.rows(), 1, "bias must be a row vector");
        assert_eq!(mv.cols(), bv.cols(), "bias width mismatch");
        let mut value = mv.clone();
        for r in 0..value.rows() {
            for (o, b) in value.row_slice_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut db = Tensor::zeros(1, g.cols());
                for r in 0..g.rows() {
                    for (o, x) in db.data_mut().iter_mut().zip(g.row_slice(r)) {
                        *o += x;
                    }
                }
                vec![(m, g.clone()), (bias, db)]
            })),
        )
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let value = av.matmul(&bv);
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![
                    (a, g.matmul(&bv.transpose())),
                    (b, av.transpose().matmul(g)),
                ]
            })),
        )
    }

    pub fn transpose(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).transpose();
        self.push(value, Some(Box::new(move |g| vec![(a, g.transpose())])))
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut value = Tensor::zeros(rows, total);
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                value.row_slice_mut(r)[off..off + w].copy_from_slice(pv.row_slice(r));
            }
            off += w;
        }
        let parts: Vec<NodeId> = parts.to_vec();
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(parts.len());
                let mut off = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    let mut slice = Tensor::zeros(g.rows(), w);
                    for r in 0..g.rows() {
                        slice
                            .row_slice_mut(r)
                            .copy_from_slice(&g.row_slice(r)[off..off + w]);
                    }
                    out.push((p, slice));
                    off += w;
                }
                out
            })),
        )
    }

    /// Softmax applied independently to each row.
    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let av = self.value(a);
        let mut value = av.clone();
        for r in 0..value.rows() {
            let row = value.row_slice_mut(r);
            let max = row.iter().fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let mut sum = 0.0;
            for x in row.iter_mut() {
                *x = (*x - max).exp();
                sum += *x;
            }
            for x in row.iter_mut() {
                *x /= sum;
            }
        }
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |g| {
                // dx = y * (g - sum(g * y)) per row
                let mut dx = Tensor::zeros(g.rows(), g.cols());
                for r in 0..g.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let s: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for ((d, &y), &gv) in dx.row_slice_mut(r).iter_mut().zip(y).zip(gr) {
                        *d = y * (gv - s);
                    }
                }
                vec![(a, dx)]
            })),
        )
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::tanh);
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(out.data()) {
                    *d *= 1.0 - y * y;
                }
                vec![(a, dx)]
            })),
        )
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let value = self.value(a).map(f64::exp);
        let out = value.clone();
        self.push(
            value,
            Some(Box::new(move |g| vec![(a, g.mul(&out))])),
        )
    }

    /// ln(max(x, eps)) elementwise; gradient is zero in the clamped region.
    pub fn ln_clamped(&mut self, a: NodeId, eps: f64) -> NodeId {
        let av = self.value(a).clone();
        let value = av.map(|x| x.max(eps).ln());
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                for (d, &x) in dx.data_mut().iter_mut().zip(av.data()) {
                    *d = if x > eps { *d / x } else { 0.0 };
                }
                vec![(a, dx)]
            })),
        )
    }

    /// Sum of all entries, as a 1 x 1 node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let (rows, cols) = self.value(a).shape();
        let value = Tensor::scalar(self.value(a).sum());
        self.push(
            value,
            Some(Box::new(move |g| {
                vec![(a, Tensor::filled(rows, cols, g.item()))]
            })),
        )
    }

    /// Single entry by flat index, as a 1 x 1 node.
    pub fn pick(&mut self, a: NodeId, idx: usize) -> NodeId {
        let (rows, cols) = self.value(a).shape();
        let value = Tensor::scalar(self.value(a).data()[idx]);
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(rows, cols);
                dx.data_mut()[idx] = g.item();
                vec![(a, dx)]
            })),
        )
    }

    /// Rows of `a` selected by index, stacked in order. Duplicate indices
    /// accumulate in the backward scatter (embedding lookups rely on this).
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> NodeId {
        let av = self.value(a);
        let (rows, cols) = av.shape();
        let mut value = Tensor::zeros(indices.len(), cols);
        for (r, &i) in indices.iter().enumerate() {
            assert!(i < rows, "gather_rows index out of range");
            value.row_slice_mut(r).copy_from_slice(av.row_slice(i));
        }
        let indices = indices.to_vec();
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(rows, cols);
                for (r, &i) in indices.iter().enumerate() {
                    for (d, &x) in dx.row_slice_mut(i).iter_mut().zip(g.row_slice(r)) {
                        *d += x;
                    }
                }
                vec![(a, dx)]
            })),
        )
    }

    /// Layer normalization over each row with learned gain and bias (1 x d).
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId, eps: f64) -> NodeId {
        let xv = self.value(x).clone();
        let gv = self.value(gain).clone();
        let bv = self.value(bias).clone();
        let (rows, cols) = xv.shape();
        let mut normed = Tensor::zeros(rows, cols);
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row_slice(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std[r] = istd;
            for (o, &xi) in normed.row_slice_mut(r).iter_mut().zip(row) {
                *o = (xi - mean) * istd;
            }
        }
        let mut value = Tensor::zeros(rows, cols);
        for r in 0..rows {
            for ((o, &n), (&g, &b)) in value
                .row_slice_mut(r)
                .iter_mut()
                .zip(normed.row_slice(r))
                .zip(gv.data().iter().zip(bv.data()))
            {
                *o = n * g + b;
            }
        }
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(rows, cols);
                let mut dgain = Tensor::zeros(1, cols);
                let mut dbias = Tensor::zeros(1, cols);
                for r in 0..rows {
                    let n = normed.row_slice(r);
                    let gr = g.row_slice(r);
                    for c in 0..cols {
                        dgain.data_mut()[c] += gr[c] * n[c];
                        dbias.data_mut()[c] += gr[c];
                    }
                    // dxhat = g * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                    let dxhat: Vec<f64> =
                        (0..cols).map(|c| gr[c] * gv.data()[c]).collect();
                    let m1 = dxhat.iter().sum::<f64>() / cols as f64;
                    let m2 = dxhat
                        .iter()
                        .zip(n)
                        .map(|(dh, nh)| dh * nh)
                        .sum::<f64>()
                        / cols as f64;
                    for c in 0..cols {
                        dx.row_slice_mut(r)[c] = inv_std[r] * (dxhat[c] - m1 - n[c] * m2);
                    }
                }
                vec![(x, dx), (gain, dgain), (bias, dbias)]
            })),
        )
    }

    /// Inverted dropout in training mode; identity when `p == 0`.
    pub fn dropout(&mut self, a: NodeId, p: f64, rng: &mut impl Rng) -> NodeId {
        if p <= 0.0 {
            return a;
        }
        let (rows, cols) = self.value(a).shape();
        let keep = 1.0 - p;
        let mask = Tensor::from_vec(
            rows,
            cols,
            (0..rows * cols)
                .map(|_| {
                    if rng.random::<f64>() < p {
                        0.0
                    } else {
                        1.0 / keep
                    }
                })
                .collect(),
        );
        let mask_node = self.leaf(mask);
        self.mul(a, mask_node)
    }

    /// Cosine similarity of two equal-shape vectors, as a 1 x 1 node.
    /// Caller must guarantee both norms are nonzero.
    pub fn cosine(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = self.value(a).clone();
        let bv = self.value(b).clone();
        let na = av.norm();
        let nb = bv.norm();
        debug_assert!(na > 0.0 && nb > 0.0, "cosine of zero-norm vector");
        let cos = av.dot(&bv) / (na * nb);
        self.push(
            Tensor::scalar(cos),
            Some(Box::new(move |g| {
                let gv = g.item();
                let mut da = bv.scale(1.0 / (na * nb));
                da.scaled_add_assign(&av, -cos / (na * na));
                let mut db = av.scale(1.0 / (na * nb));
                db.scaled_add_assign(&bv, -cos / (nb * nb));
                vec![(a, da.scale(gv)), (b, db.scale(gv))]
            })),
        )
    }

    /// Sum of rows s..=e of an n x d matrix, as a 1 x d node.
    pub fn span_sum(&mut self, m: NodeId, s: usize, e: usize) -> NodeId {
        let mv = self.value(m);
        let (rows, cols) = mv.shape();
        assert!(s <= e && e < rows, "span_sum out of range");
        let mut value = Tensor::zeros(1, cols);
        for r in s..=e {
            for (o, &x) in value.data_mut().iter_mut().zip(mv.row_slice(r)) {
                *o += x;
            }
        }
        self.push(
            value,
            Some(Box::new(move |g| {
                let mut dx = Tensor::zeros(rows, cols);
                for r in s..=e {
                    dx.row_slice_mut(r).copy_from_slice(g.data());
                }
                vec![(m, dx)]
            })),
        )
    }

    /// Expectation of span sums under independent start/end position
    /// distributions, restricted to spans with `j - i <= reach`:
    ///
    ///   out = sum_i sum_{j=i}^{min(i+reach, n-1)} ps[i] * pe[j] * sum_{k=i}^{j} M[k]
    ///
    /// Forward runs in O(n * reach) row operations via prefix sums; backward
    /// in O(n * reach + n * d). `ps` and `pe` are 1 x n rows, `m` is n x d.
    pub fn expected_span(&mut self, m: NodeId, ps: NodeId, pe: NodeId, reach: usize) -> NodeId {
        let mv = self.value(m).clone();
        let psv = self.value(ps).clone();
        let pev = self.value(pe).clone();
        let (n, d) = mv.shape();
        assert_eq!(psv.shape(), (1, n), "start distribution shape");
        assert_eq!(pev.shape(), (1, n), "end distribution shape");

        // prefix[j] = sum of rows 0..=j-1; prefix has n+1 rows
        let mut prefix = Tensor::zeros(n + 1, d);
        for r in 0..n {
            let (done, rest) = prefix.data_mut().split_at_mut((r + 1) * d);
            let prev = &done[r * d..(r + 1) * d];
            for ((o, &p), &x) in rest[..d].iter_mut().zip(prev).zip(mv.row_slice(r)) {
                *o = p + x;
            }
        }

        let mut value = Tensor::zeros(1, d);
        for i in 0..n {
            let a = psv.data()[i];
            if a == 0.0 {
                continue;
            }
            let j_max = (i + reach).min(n - 1);
            for j in i..=j_max {
                let w = a * pev.data()[j];
                if w == 0.0 {
                    continue;
                }
                let hi = prefix.row_slice(j + 1);
                let lo = prefix.row_slice(i);
                for ((o, &h), &l) in value.data_mut().iter_mut().zip(hi).zip(lo) {
                    *o += w * (h - l);
                }
            }
        }

        self.push(
            value,
            Some(Box::new(move |g| {
                debug_assert_eq!(g.shape(), (1, d));
                // u[j] = g . prefix[j]
                let u: Vec<f64> = (0..=n)
                    .map(|j| {
                        g.data()
                            .iter()
                            .zip(prefix.row_slice(j))
                            .map(|(a, b)| a * b)
                            .sum()
                    })
                    .collect();

                let mut dps = Tensor::zeros(1, n);
                let mut dpe = Tensor::zeros(1, n);
                // weight[k] = total probability mass of admissible spans covering k
                let mut cover_diff = vec![0.0; n + 1];
                for i in 0..n {
                    let a = psv.data()[i];
                    let j_max = (i + reach).min(n - 1);
                    let mut ds = 0.0;
                    for j in i..=j_max {
                        let b = pev.data()[j];
                        let span_u = u[j + 1] - u[i];
                        ds += b * span_u;
                        dpe.data_mut()[j] += a * span_u;
                        let w = a * b;
                        if w != 0.0 {
                            cover_diff[i] += w;
                            cover_diff[j + 1] -= w;
                        }
                    }
                    dps.data_mut()[i] = ds;
                }
                let mut dm = Tensor::zeros(n, d);
                let mut cover = 0.0;
                for k in 0..n {
                    cover += cover_diff[k];
                    if cover != 0.0 {
                        for (o, &gv) in dm.row_slice_mut(k).iter_mut().zip(g.data()) {
                            *o = cover * gv;
                        }
                    }
                }
                vec![(m, dm), (ps, dps), (pe, dpe)]
            })),
        )
    }

    /// Backward pass seeded with gradient 1 at `root`.
    pub fn backward(&self, root: NodeId) -> Gradients {
        let seed = Tensor::filled(
            self.value(root).rows(),
            self.value(root).cols(),
            1.0,
        );
        self.backward_seeded(vec![(root, seed)])
    }

    /// Backward pass with explicit output-gradient seeds. Multiple seeds
    /// accumulate, which lets externally computed gradients (for example a
    /// contrastive loss built on another graph) flow into this tape.
    pub fn backward_seeded(&self, seeds: Vec<(NodeId, Tensor)>) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            accumulate(&mut grads, id, g);
        }
        for i in (0..self.nodes.len()).rev() {
            let Some(back) = self.nodes[i].backward.as_ref() else {
                continue;
            };
            let Some(g) = grads[i].clone() else { continue };
            for (parent, contrib) in back(&g) {
                accumulate(&mut grads, parent, contrib);
            }
        }
        Gradients { by_node: grads }
    }

    /// Maps node gradients back to bound parameters.
    pub fn param_gradients(&self, grads: &Gradients) -> Vec<(ParamId, Tensor)> {
        self.bindings
            .iter()
            .filter_map(|&(pid, node)| grads.get(node).map(|g| (pid, g.clone())))
            .collect()
    }
}

fn accumulate(grads: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut grads[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}
