//! Reverse-mode autodiff on a tape of batched tensor ops. The op set is
//! closed and sized to this pipeline: shared-weight linear layers over row
//! batches, pointwise nonlinearities, grouped reductions over source views,
//! weighted gathers from feature maps, and the volume-rendering weight
//! transform. No broadcasting rules; shapes must line up exactly and
//! mismatches fault immediately at graph-build time.
//!
//! Forward values are computed eagerly as nodes are pushed. Gradients live in
//! a parallel buffer so backward can walk the node list in reverse while
//! reading values immutably. Graphs are built per ray batch and dropped;
//! parameters live outside the tape in a ParamStore.

mod check;
mod params;

pub use check::{grad_check, GradCheckReport};
pub use params::{init_linear, init_linear_zero, AdamConfig, ParamEntry, ParamStore};

use crate::tensorio::{Scalar, Tensor};

pub type NodeId = usize;

enum Op<S: Scalar> {
    Leaf,
    Linear,
    Relu,
    Sigmoid,
    Softplus,
    Add,
    Sub,
    Mul,
    Scale(S),
    ConcatLast,
    TileRows {
        group: usize,
    },
    MaskedSoftmaxRows {
        valid: Vec<bool>,
    },
    MaxOverGroups {
        group: usize,
        /// flat source row per output element, -1 when the whole group was
        /// masked out (output pinned to zero)
        argmax: Vec<i64>,
    },
    WeightedSumGroups {
        group: usize,
    },
    /// Weighted multi-tap gather from an [Rows, C] map. Rows with all-zero
    /// weights read as exact zeros.
    GatherMulti {
        taps: Vec<[(u32, S); 4]>,
    },
    /// sigma [rays, k] -> compositing weights [rays, k] with fixed step sizes.
    RayWeights {
        deltas: Vec<S>,
    },
    SliceCols {
        from: usize,
    },
    Reshape,
    /// mean over rows of the squared L2 difference along the last axis
    MseRows,
}

struct Node<S: Scalar> {
    value: Tensor<S>,
    op: Op<S>,
    parents: Vec<NodeId>,
    needs_grad: bool,
}

pub struct Tape<S: Scalar = f32> {
    nodes: Vec<Node<S>>,
    grads: Vec<Option<Tensor<S>>>,
    params: Vec<(String, NodeId)>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<S> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: NodeId) -> Option<&Tensor<S>> {
        self.grads[id].as_ref()
    }

    pub fn param_ids(&self) -> &[(String, NodeId)] {
        &self.params
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: Vec<NodeId>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            parents,
            needs_grad,
        });
        self.grads.push(None);
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, vec![], false)
    }

    /// Leaf that accumulates a gradient but is not named in any store. Used
    /// for intermediate products whose backward continues on another tape.
    pub fn leaf_with_grad(&mut self, value: Tensor<S>) -> NodeId {
        self.push(value, Op::Leaf, vec![], true)
    }

    /// Leaf bound to a named store entry; backward results can be folded
    /// back with `accumulate_grads_into`.
    pub fn param(&mut self, store: &ParamStore<S>, name: &str) -> NodeId {
        let value = store.value(name).clone();
        let id = self.push(value, Op::Leaf, vec![], true);
        self.params.push((name.to_string(), id));
        id
    }

    fn child_needs_grad(&self, parents: &[NodeId]) -> bool {
        parents.iter().any(|&p| self.nodes[p].needs_grad)
    }

    /// x [R, I] @ w [I, O] + b [O] broadcast over rows.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (xt, wt, bt) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xt.rank(), 2, "linear input must be [rows, in]");
        assert_eq!(wt.rank(), 2, "linear weight must be [in, out]");
        let (r, i) = (xt.dim(0), xt.dim(1));
        let (wi, o) = (wt.dim(0), wt.dim(1));
        assert_eq!(i, wi, "linear: input width {i} vs weight {wi}");
        assert_eq!(bt.dims(), &[o], "linear: bias must be [out]");
        let mut out = vec![S::ZERO; r * o];
        S::gemm(r, i, o, xt.data(), false, wt.data(), false, S::ZERO, &mut out);
        let bd = bt.data();
        for row in out.chunks_exact_mut(o) {
            for (y, &bb) in row.iter_mut().zip(bd) {
                *y += bb;
            }
        }
        let needs = self.child_needs_grad(&[x, w, b]);
        self.push(Tensor::from_vec(&[r, o], out), Op::Linear, vec![x, w, b], needs)
    }

    fn unary(&mut self, x: NodeId, op: Op<S>, f: impl Fn(S) -> S) -> NodeId {
        let value = self.value(x).map(f);
        let needs = self.child_needs_grad(&[x]);
        self.push(value, op, vec![x], needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Relu, |v| v.maxs(S::ZERO))
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Sigmoid, sigmoid_stable)
    }

    pub fn softplus(&mut self, x: NodeId) -> NodeId {
        self.unary(x, Op::Softplus, softplus_stable)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let cs = S::from_f64(c);
        self.unary(x, Op::Scale(cs), |v| v * cs)
    }

    fn binary(&mut self, a: NodeId, b: NodeId, op: Op<S>, f: impl Fn(S, S) -> S) -> NodeId {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.dims(), bt.dims(), "elementwise op on mismatched shapes");
        let data = at
            .data()
            .iter()
            .zip(bt.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let dims = at.dims().to_vec();
        let needs = self.child_needs_grad(&[a, b]);
        self.push(Tensor::from_vec(&dims, data), op, vec![a, b], needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Add, |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Sub, |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary(a, b, Op::Mul, |x, y| x * y)
    }

    /// Concatenate rank-2 inputs along the last axis.
    pub fn concat_last(&mut self, xs: &[NodeId]) -> NodeId {
        assert!(!xs.is_empty());
        let r = self.value(xs[0]).dim(0);
        let mut widths = Vec::with_capacity(xs.len());
        for &x in xs {
            let t = self.value(x);
            assert_eq!(t.rank(), 2, "concat_last expects [rows, c] inputs");
            assert_eq!(t.dim(0), r, "concat_last row mismatch");
            widths.push(t.dim(1));
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![S::ZERO; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let src = self.value(x).data();
            for row in 0..r {
                out[row * total + off..row * total + off + w]
                    .copy_from_slice(&src[row * w..(row + 1) * w]);
            }
            off += w;
        }
        let needs = self.child_needs_grad(xs);
        self.push(
            Tensor::from_vec(&[r, total], out),
            Op::ConcatLast,
            xs.to_vec(),
            needs,
        )
    }

    /// Repeat each row `group` times: [P, C] -> [P * group, C].
    pub fn tile_rows(&mut self, x: NodeId, group: usize) -> NodeId {
        assert!(group >= 1);
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        let (p, c) = (t.dim(0), t.dim(1));
        let src = t.data();
        let mut out = vec![S::ZERO; p * group * c];
        for row in 0..p {
            let s = &src[row * c..(row + 1) * c];
            for g in 0..group {
                out[(row * group + g) * c..(row * group + g + 1) * c].copy_from_slice(s);
            }
        }
        let needs = self.child_needs_grad(&[x]);
        self.push(
            Tensor::from_vec(&[p * group, c], out),
            Op::TileRows { group },
            vec![x],
            needs,
        )
    }

    /// Row-wise softmax over valid entries; invalid entries come out as
    /// exact zeros. Faults if any row has no valid entry.
    pub fn masked_softmax_rows(&mut self, logits: NodeId, valid: Vec<bool>) -> NodeId {
        let t = self.value(logits);
        assert_eq!(t.rank(), 2);
        let (p, n) = (t.dim(0), t.dim(1));
        assert_eq!(valid.len(), p * n, "mask length mismatch");
        let src = t.data();
        let mut out = vec![S::ZERO; p * n];
        for row in 0..p {
            let vrow = &valid[row * n..(row + 1) * n];
            assert!(vrow.iter().any(|&v| v), "no valid views in softmax row {row}");
            let mut mx = S::from_f64(f64::NEG_INFINITY);
            for i in 0..n {
                if vrow[i] {
                    mx = mx.maxs(src[row * n + i]);
                }
            }
            let mut denom = S::ZERO;
            for i in 0..n {
                if vrow[i] {
                    let e = (src[row * n + i] - mx).exp();
                    out[row * n + i] = e;
                    denom += e;
                }
            }
            for i in 0..n {
                if vrow[i] {
                    out[row * n + i] = out[row * n + i] / denom;
                }
            }
        }
        let needs = self.child_needs_grad(&[logits]);
        self.push(
            Tensor::from_vec(&[p, n], out),
            Op::MaskedSoftmaxRows { valid },
            vec![logits],
            needs,
        )
    }

    /// Masked elementwise max over each group of `group` consecutive rows:
    /// [P * group, C] -> [P, C]. Fully masked groups produce zeros. Gradient
    /// routes to the argmax row only, first index on ties.
    pub fn max_over_groups(&mut self, x: NodeId, group: usize, valid: &[bool]) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        let (rows, c) = (t.dim(0), t.dim(1));
        assert_eq!(rows % group, 0, "rows not divisible by group");
        let p = rows / group;
        assert_eq!(valid.len(), rows, "mask length mismatch");
        let src = t.data();
        let mut out = vec![S::ZERO; p * c];
        let mut argmax = vec![-1i64; p * c];
        for g in 0..p {
            for j in 0..c {
                let mut best: Option<(S, usize)> = None;
                for i in 0..group {
                    let row = g * group + i;
                    if !valid[row] {
                        continue;
                    }
                    let v = src[row * c + j];
                    match best {
                        Some((bv, _)) if v <= bv => {}
                        _ => best = Some((v, row)),
                    }
                }
                if let Some((v, row)) = best {
                    out[g * c + j] = v;
                    argmax[g * c + j] = row as i64;
                }
            }
        }
        let needs = self.child_needs_grad(&[x]);
        self.push(
            Tensor::from_vec(&[p, c], out),
            Op::MaxOverGroups { group, argmax },
            vec![x],
            needs,
        )
    }

    /// y[p] = sum_i w[p, i] * xs[p * n + i] for w [P, N], xs [P * N, C].
    pub fn weighted_sum_groups(&mut self, w: NodeId, xs: NodeId) -> NodeId {
        let (wt, xt) = (self.value(w), self.value(xs));
        assert_eq!(wt.rank(), 2);
        assert_eq!(xt.rank(), 2);
        let (p, n) = (wt.dim(0), wt.dim(1));
        let c = xt.dim(1);
        assert_eq!(xt.dim(0), p * n, "weighted_sum_groups shape mismatch");
        let (wd, xd) = (wt.data(), xt.data());
        let mut out = vec![S::ZERO; p * c];
        for g in 0..p {
            let orow = &mut out[g * c..(g + 1) * c];
            for i in 0..n {
                let wgt = wd[g * n + i];
                if wgt == S::ZERO {
                    continue;
                }
                let xrow = &xd[(g * n + i) * c..(g * n + i + 1) * c];
                for (o, &xv) in orow.iter_mut().zip(xrow) {
                    *o += wgt * xv;
                }
            }
        }
        let needs = self.child_needs_grad(&[w, xs]);
        self.push(
            Tensor::from_vec(&[p, c], out),
            Op::WeightedSumGroups { group: n },
            vec![w, xs],
            needs,
        )
    }

    /// Weighted 4-tap gather: out[r] = sum_k taps[r][k].1 * map[taps[r][k].0].
    pub fn gather_multi(&mut self, map: NodeId, taps: Vec<[(u32, S); 4]>) -> NodeId {
        let mt = self.value(map);
        assert_eq!(mt.rank(), 2, "gather source must be [rows, c]");
        let (rows, c) = (mt.dim(0), mt.dim(1));
        let md = mt.data();
        let mut out = vec![S::ZERO; taps.len() * c];
        for (r, tap) in taps.iter().enumerate() {
            let orow = &mut out[r * c..(r + 1) * c];
            for &(idx, w) in tap {
                if w == S::ZERO {
                    continue;
                }
                let idx = idx as usize;
                assert!(idx < rows, "tap row {idx} out of range {rows}");
                let mrow = &md[idx * c..(idx + 1) * c];
                for (o, &m) in orow.iter_mut().zip(mrow) {
                    *o += w * m;
                }
            }
        }
        let needs = self.child_needs_grad(&[map]);
        let n = taps.len();
        self.push(
            Tensor::from_vec(&[n, c], out),
            Op::GatherMulti { taps },
            vec![map],
            needs,
        )
    }

    /// Volume-rendering weights from densities. sigma and deltas are
    /// [rays, k] flattened; w_j = T_j * (1 - exp(-sigma_j * delta_j)) with
    /// T_j the product of survival up to j within the ray.
    pub fn ray_weights(&mut self, sigma: NodeId, deltas: Vec<S>) -> NodeId {
        let st = self.value(sigma);
        assert_eq!(st.rank(), 2, "sigma must be [rays, k]");
        let (rays, k) = (st.dim(0), st.dim(1));
        assert_eq!(deltas.len(), rays * k, "one delta per sample");
        let sd = st.data();
        let mut out = vec![S::ZERO; rays * k];
        for r in 0..rays {
            let mut trans = S::ONE;
            for j in 0..k {
                let idx = r * k + j;
                let e = (-sd[idx] * deltas[idx]).exp();
                out[idx] = trans * (S::ONE - e);
                trans *= e;
            }
        }
        let needs = self.child_needs_grad(&[sigma]);
        self.push(
            Tensor::from_vec(&[rays, k], out),
            Op::RayWeights { deltas },
            vec![sigma],
            needs,
        )
    }

    pub fn slice_cols(&mut self, x: NodeId, from: usize, to: usize) -> NodeId {
        let t = self.value(x);
        assert_eq!(t.rank(), 2);
        let (r, c) = (t.dim(0), t.dim(1));
        assert!(from < to && to <= c, "bad column slice {from}..{to} of {c}");
        let w = to - from;
        let src = t.data();
        let mut out = vec![S::ZERO; r * w];
        for row in 0..r {
            out[row * w..(row + 1) * w].copy_from_slice(&src[row * c + from..row * c + to]);
        }
        let needs = self.child_needs_grad(&[x]);
        self.push(
            Tensor::from_vec(&[r, w], out),
            Op::SliceCols { from },
            vec![x],
            needs,
        )
    }

    pub fn reshape(&mut self, x: NodeId, dims: &[usize]) -> NodeId {
        let value = self.value(x).reshaped(dims);
        let needs = self.child_needs_grad(&[x]);
        self.push(value, Op::Reshape, vec![x], needs)
    }

    /// Mean over rows of the squared L2 difference: (1/R) * sum (a - b)^2.
    pub fn mse_rows(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (at, bt) = (self.value(a), self.value(b));
        assert_eq!(at.dims(), bt.dims(), "mse on mismatched shapes");
        let r = at.dim(0);
        let mut acc = S::ZERO;
        for (&x, &y) in at.data().iter().zip(bt.data()) {
            let d = x - y;
            acc += d * d;
        }
        let value = Tensor::scalar(acc / S::from_f64(r as f64));
        let needs = self.child_needs_grad(&[a, b]);
        self.push(value, Op::MseRows, vec![a, b], needs)
    }

    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(
            self.nodes[loss].value.len(),
            1,
            "backward needs a scalar loss"
        );
        self.backward_from(loss, Tensor::scalar(S::ONE));
    }

    /// Backward with an injected output gradient; lets a second tape continue
    /// the chain rule from intermediates produced here.
    pub fn backward_from(&mut self, id: NodeId, seed: Tensor<S>) {
        assert_eq!(seed.dims(), self.nodes[id].value.dims());
        accumulate(&mut self.grads[id], &seed, self.nodes[id].value.dims());
        for i in (0..=id).rev() {
            if !self.nodes[i].needs_grad || self.grads[i].is_none() {
                continue;
            }
            self.backprop_node(i);
        }
    }

    /// Adds each bound parameter's gradient into the store.
    pub fn accumulate_grads_into(&self, store: &mut ParamStore<S>) {
        for (name, id) in &self.params {
            if let Some(g) = &self.grads[*id] {
                store.add_grad(name, g);
            }
        }
    }

    fn backprop_node(&mut self, i: NodeId) {
        let gout = self.grads[i].take().unwrap();
        let g = gout.data();
        // split-field borrows: self.nodes is read-only here, self.grads is
        // written; the borrow checker allows both because they are distinct
        // fields accessed directly
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        let node = &nodes[i];
        let parents = &node.parents;
        macro_rules! parent_grad {
            ($p:expr) => {{
                ensure(&mut grads[parents[$p]], nodes[parents[$p]].value.dims())
            }};
        }
        macro_rules! parent_needs {
            ($p:expr) => {
                nodes[parents[$p]].needs_grad
            };
        }
        match &node.op {
            Op::Leaf => {
                grads[i] = Some(gout);
                return;
            }
            Op::Linear => {
                let x = &nodes[parents[0]].value;
                let w = &nodes[parents[1]].value;
                let (r, icols) = (x.dim(0), x.dim(1));
                let o = w.dim(1);
                if parent_needs!(0) {
                    let dx = parent_grad!(0);
                    S::gemm(r, o, icols, g, false, w.data(), true, S::ONE, dx.data_mut());
                }
                if parent_needs!(1) {
                    let dw = parent_grad!(1);
                    S::gemm(icols, r, o, x.data(), true, g, false, S::ONE, dw.data_mut());
                }
                if parent_needs!(2) {
                    let db = parent_grad!(2);
                    let dbd = db.data_mut();
                    for row in g.chunks_exact(o) {
                        for (d, &gg) in dbd.iter_mut().zip(row) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Relu => {
                if parent_needs!(0) {
                    let y = node.value.data();
                    let dx = parent_grad!(0);
                    for ((d, &gg), &yy) in dx.data_mut().iter_mut().zip(g).zip(y) {
                        if yy > S::ZERO {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Sigmoid => {
                if parent_needs!(0) {
                    let y = node.value.data();
                    let dx = parent_grad!(0);
                    for ((d, &gg), &yy) in dx.data_mut().iter_mut().zip(g).zip(y) {
                        *d += gg * yy * (S::ONE - yy);
                    }
                }
            }
            Op::Softplus => {
                if parent_needs!(0) {
                    let x = nodes[parents[0]].value.data();
                    let dx = parent_grad!(0);
                    for ((d, &gg), &xx) in dx.data_mut().iter_mut().zip(g).zip(x) {
                        *d += gg * sigmoid_stable(xx);
                    }
                }
            }
            Op::Add => {
                for p in 0..2 {
                    if parent_needs!(p) {
                        let dp = parent_grad!(p);
                        for (d, &gg) in dp.data_mut().iter_mut().zip(g) {
                            *d += gg;
                        }
                    }
                }
            }
            Op::Sub => {
                if parent_needs!(0) {
                    let dp = parent_grad!(0);
                    for (d, &gg) in dp.data_mut().iter_mut().zip(g) {
                        *d += gg;
                    }
                }
                if parent_needs!(1) {
                    let dp = parent_grad!(1);
                    for (d, &gg) in dp.data_mut().iter_mut().zip(g) {
                        *d += -gg;
                    }
                }
            }
            Op::Mul => {
                for p in 0..2 {
                    if parent_needs!(p) {
                        let other = nodes[parents[1 - p]].value.data();
                        let dp = parent_grad!(p);
                        for ((d, &gg), &ov) in dp.data_mut().iter_mut().zip(g).zip(other) {
                            *d += gg * ov;
                        }
                    }
                }
            }
            Op::Scale(c) => {
                let c = *c;
                if parent_needs!(0) {
                    let dp = parent_grad!(0);
                    for (d, &gg) in dp.data_mut().iter_mut().zip(g) {
                        *d += gg * c;
                    }
                }
            }
            Op::ConcatLast => {
                let total = node.value.dim(1);
                let r = node.value.dim(0);
                let mut off = 0;
                for p in 0..parents.len() {
                    let w = self.nodes[parents[p]].value.dim(1);
                    if parent_needs!(p) {
                        let start = off;
                        let dp = parent_grad!(p);
                        let dpd = dp.data_mut();
                        for row in 0..r {
                            for j in 0..w {
                                dpd[row * w + j] += g[row * total + start + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::TileRows { group } => {
                if parent_needs!(0) {
                    let group = *group;
                    let c = node.value.dim(1);
                    let p = node.value.dim(0) / group;
                    let dp = parent_grad!(0);
                    let dpd = dp.data_mut();
                    for row in 0..p {
                        for gi in 0..group {
                            let src = &g[(row * group + gi) * c..(row * group + gi + 1) * c];
                            for (d, &gg) in dpd[row * c..(row + 1) * c].iter_mut().zip(src) {
                                *d += gg;
                            }
                        }
                    }
                }
            }
            Op::MaskedSoftmaxRows { valid } => {
                if parent_needs!(0) {
                    let y = node.value.data();
                    let (p, n) = (node.value.dim(0), node.value.dim(1));
                    let dp = parent_grad!(0);
                    let dpd = dp.data_mut();
                    for row in 0..p {
                        let mut dot = S::ZERO;
                        for i in 0..n {
                            if valid[row * n + i] {
                                dot += g[row * n + i] * y[row * n + i];
                            }
                        }
                        for i in 0..n {
                            if valid[row * n + i] {
                                dpd[row * n + i] += y[row * n + i] * (g[row * n + i] - dot);
                            }
                        }
                    }
                }
            }
            Op::MaxOverGroups { group, argmax } => {
                debug_assert_eq!(
                    nodes[parents[0]].value.dim(0),
                    node.value.dim(0) * group
                );
                if parent_needs!(0) {
                    let c = node.value.dim(1);
                    let dp = parent_grad!(0);
                    let dpd = dp.data_mut();
                    for (out_idx, &src_row) in argmax.iter().enumerate() {
                        if src_row >= 0 {
                            let j = out_idx % c;
                            dpd[src_row as usize * c + j] += g[out_idx];
                        }
                    }
                }
            }
            Op::WeightedSumGroups { group } => {
                let n = *group;
                let c = node.value.dim(1);
                let p = node.value.dim(0);
                if parent_needs!(0) {
                    let xs = nodes[parents[1]].value.data();
                    let dw = parent_grad!(0);
                    let dwd = dw.data_mut();
                    for gi in 0..p {
                        for i in 0..n {
                            let xrow = &xs[(gi * n + i) * c..(gi * n + i + 1) * c];
                            let grow = &g[gi * c..(gi + 1) * c];
                            let mut acc = S::ZERO;
                            for (&gg, &xx) in grow.iter().zip(xrow) {
                                acc += gg * xx;
                            }
                            dwd[gi * n + i] += acc;
                        }
                    }
                }
                if parent_needs!(1) {
                    let w = nodes[parents[0]].value.data();
                    let dx = parent_grad!(1);
                    let dxd = dx.data_mut();
                    for gi in 0..p {
                        let grow = &g[gi * c..(gi + 1) * c];
                        for i in 0..n {
                            let wgt = w[gi * n + i];
                            if wgt == S::ZERO {
                                continue;
                            }
                            let drow = &mut dxd[(gi * n + i) * c..(gi * n + i + 1) * c];
                            for (d, &gg) in drow.iter_mut().zip(grow) {
                                *d += wgt * gg;
                            }
                        }
                    }
                }
            }
            Op::GatherMulti { taps } => {
                if parent_needs!(0) {
                    let c = node.value.dim(1);
                    let dm = parent_grad!(0);
                    let dmd = dm.data_mut();
                    for (r, tap) in taps.iter().enumerate() {
                        let grow = &g[r * c..(r + 1) * c];
                        for &(idx, w) in tap {
                            if w == S::ZERO {
                                continue;
                            }
                            let drow = &mut dmd[idx as usize * c..(idx as usize + 1) * c];
                            for (d, &gg) in drow.iter_mut().zip(grow) {
                                *d += w * gg;
                            }
                        }
                    }
                }
            }
            Op::RayWeights { deltas } => {
                if parent_needs!(0) {
                    let w = node.value.data();
                    let sigma = nodes[parents[0]].value.data();
                    let (rays, k) = (node.value.dim(0), node.value.dim(1));
                    let dp = parent_grad!(0);
                    let dpd = dp.data_mut();
                    let mut suffixes = vec![S::ZERO; k];
                    for r in 0..rays {
                        let base = r * k;
                        // suffix[j] = sum_{m > j} g_m w_m
                        let mut suffix = S::ZERO;
                        for j in (0..k).rev() {
                            suffixes[j] = suffix;
                            suffix += g[base + j] * w[base + j];
                        }
                        let mut trans = S::ONE;
                        for j in 0..k {
                            let e = (-sigma[base + j] * deltas[base + j]).exp();
                            dpd[base + j] +=
                                deltas[base + j] * (g[base + j] * trans * e - suffixes[j]);
                            trans *= e;
                        }
                    }
                }
            }
            Op::SliceCols { from } => {
                if parent_needs!(0) {
                    let from = *from;
                    let w = node.value.dim(1);
                    let r = node.value.dim(0);
                    let c = nodes[parents[0]].value.dim(1);
                    let dp = parent_grad!(0);
                    let dpd = dp.data_mut();
                    for row in 0..r {
                        for j in 0..w {
                            dpd[row * c + from + j] += g[row * w + j];
                        }
                    }
                }
            }
            Op::Reshape => {
                if parent_needs!(0) {
                    let dp = parent_grad!(0);
                    for (d, &gg) in dp.data_mut().iter_mut().zip(g) {
                        *d += gg;
                    }
                }
            }
            Op::MseRows => {
                let a = nodes[parents[0]].value.data();
                let b = nodes[parents[1]].value.data();
                let r = nodes[parents[0]].value.dim(0);
                let scale = S::from_f64(2.0 / r as f64) * g[0];
                if parent_needs!(0) {
                    let da = parent_grad!(0);
                    for ((d, &x), &y) in da.data_mut().iter_mut().zip(a).zip(b) {
                        *d += scale * (x - y);
                    }
                }
                if parent_needs!(1) {
                    let db = parent_grad!(1);
                    for ((d, &x), &y) in db.data_mut().iter_mut().zip(a).zip(b) {
                        *d += -scale * (x - y);
                    }
                }
            }
        }
    }
}

fn ensure<'a, S: Scalar>(slot: &'a mut Option<Tensor<S>>, dims: &[usize]) -> &'a mut Tensor<S> {
    if slot.is_none() {
        *slot = Some(Tensor::zeros(dims));
    }
    slot.as_mut().unwrap()
}

fn accumulate<S: Scalar>(slot: &mut Option<Tensor<S>>, add: &Tensor<S>, dims: &[usize]) {
    let t = ensure(slot, dims);
    for (d, &a) in t.data_mut().iter_mut().zip(add.data()) {
        *d += a;
    }
}

fn sigmoid_stable<S: Scalar>(x: S) -> S {
    if x >= S::ZERO {
        S::ONE / (S::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::ONE + e)
    }
}

fn softplus_stable<S: Scalar>(x: S) -> S {
    x.maxs(S::ZERO) + (-x.abs()).exp().ln_1p()
}
