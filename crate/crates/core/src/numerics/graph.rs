//! Define-by-run reverse-mode tape over row-major f64 matrices.
//!
//! Values are computed eagerly as nodes are created; `backward` replays
//! the tape in reverse. Every tensor is a `rows x cols` matrix (scalars
//! are 1x1, batched vectors are `batch x dim`). The first primitive to
//! produce a non-finite value poisons the graph and is reported when the
//! loss is read out.

use std::collections::BTreeMap;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::HgcpError;
use crate::numerics::store::ParamStore;
use crate::Result;

/// Handle to a node on the tape.
pub type NodeId = usize;

/// Gradients keyed by parameter group name.
#[derive(Debug, Clone, Default)]
pub struct Grads(pub BTreeMap<String, Vec<f64>>);

impl Grads {
    pub fn get(&self, name: &str) -> Option<&[f64]> {
        self.0.get(name).map(|v| v.as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Sum of squared entries over all groups.
    pub fn sq_norm(&self) -> f64 {
        self.0
            .values()
            .map(|g| g.iter().map(|x| x * x).sum::<f64>())
            .sum()
    }

    /// Scale every gradient in place.
    pub fn scale(&mut self, s: f64) {
        for g in self.0.values_mut() {
            for x in g.iter_mut() {
                *x *= s;
            }
        }
    }

    /// Merge another gradient set, summing overlapping groups.
    pub fn merge(&mut self, other: Grads) {
        for (name, g) in other.0 {
            match self.0.entry(name) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    for (a, b) in e.get_mut().iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Affine { x: NodeId, w: NodeId, b: NodeId },
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// Broadcast-multiply each row of `a` by the row-scalar `s` (rows x 1).
    MulColVec { a: NodeId, s: NodeId },
    /// y = mul * a + add, elementwise with scalar constants. The additive
    /// constant only shapes the forward value, so the op records `mul` alone.
    AffineScalar { a: NodeId, mul: f64 },
    Tanh(NodeId),
    Elu(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Log(NodeId),
    Sqrt(NodeId),
    Square(NodeId),
    Max(NodeId, NodeId),
    Softmax { a: NodeId, classes: usize },
    LogSoftmax { a: NodeId, classes: usize },
    SumAll(NodeId),
    MeanAll(NodeId),
    SumCols(NodeId),
    Concat(Vec<NodeId>),
    SliceCols { a: NodeId, start: usize, len: usize },
    /// Forward: sampled (or argmax) one-hot per class block. Backward:
    /// identity pass-through to the logits (straight-through estimator;
    /// intentionally biased).
    OneHotSt { logits: NodeId },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Affine { .. } => "affine",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::MulColVec { .. } => "mul_col_vec",
            Op::AffineScalar { .. } => "affine_scalar",
            Op::Tanh(..) => "tanh",
            Op::Elu(..) => "elu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Max(..) => "max",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax { .. } => "log_softmax",
            Op::SumAll(..) => "sum",
            Op::MeanAll(..) => "mean",
            Op::SumCols(..) => "sum_cols",
            Op::Concat(..) => "concat",
            Op::SliceCols { .. } => "slice_cols",
            Op::OneHotSt { .. } => "one_hot_st",
        }
    }
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// The tape. Create one per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
    /// (group name, node, trainable) for every parameter pulled in.
    params: Vec<(String, NodeId, bool)>,
    poisoned: Option<&'static str>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::with_capacity(256),
            params: Vec::new(),
            poisoned: None,
        }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> NodeId {
        debug_assert_eq!(value.len(), rows * cols);
        if self.poisoned.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.poisoned = Some(op.name());
        }
        self.nodes.push(Node {
            rows,
            cols,
            value,
            op,
            needs_grad,
        });
        self.nodes.len() - 1
    }

    pub fn rows(&self, id: NodeId) -> usize {
        self.nodes[id].rows
    }

    pub fn cols(&self, id: NodeId) -> usize {
        self.nodes[id].cols
    }

    pub fn value(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].value
    }

    /// Read a 1x1 node, reporting divergence if the graph is poisoned.
    pub fn scalar(&self, id: NodeId) -> Result<f64> {
        if let Some(primitive) = self.poisoned {
            return Err(HgcpError::NumericalDivergence { primitive });
        }
        let n = &self.nodes[id];
        if n.rows * n.cols != 1 {
            return Err(HgcpError::Shape(format!(
                "scalar read on {}x{} node",
                n.rows, n.cols
            )));
        }
        Ok(n.value[0])
    }

    pub fn is_poisoned(&self) -> Option<&'static str> {
        self.poisoned
    }

    // ---- leaves ---------------------------------------------------------

    /// Constant matrix leaf.
    pub fn constant(&mut self, rows: usize, cols: usize, value: Vec<f64>) -> NodeId {
        self.push(rows, cols, value, Op::Leaf, false)
    }

    /// Constant scalar leaf.
    pub fn scalar_const(&mut self, v: f64) -> NodeId {
        self.constant(1, 1, vec![v])
    }

    /// Pull a parameter group in as a leaf (1 x len). Gradients are
    /// accumulated for it iff the group is trainable.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> NodeId {
        let group = store
            .group(name)
            .unwrap_or_else(|| panic!("unknown parameter group `{name}`"));
        let trainable = group.trainable;
        let id = self.push(1, group.values.len(), group.values.clone(), Op::Leaf, trainable);
        self.params.push((name.to_string(), id, trainable));
        id
    }

    /// Pull a parameter group in with an explicit matrix shape.
    pub fn param_matrix(&mut self, store: &ParamStore, name: &str, rows: usize, cols: usize) -> NodeId {
        let group = store
            .group(name)
            .unwrap_or_else(|| panic!("unknown parameter group `{name}`"));
        assert_eq!(
            group.values.len(),
            rows * cols,
            "group `{name}` has {} values, wanted {rows}x{cols}",
            group.values.len()
        );
        let trainable = group.trainable;
        let id = self.push(rows, cols, group.values.clone(), Op::Leaf, trainable);
        self.params.push((name.to_string(), id, trainable));
        id
    }

    /// Copy of a node's value as a fresh constant (stop-gradient).
    pub fn detach(&mut self, a: NodeId) -> NodeId {
        let n = &self.nodes[a];
        let (rows, cols, value) = (n.rows, n.cols, n.value.clone());
        self.constant(rows, cols, value)
    }

    // ---- primitives -----------------------------------------------------

    /// y = x wᵀ + b with x: n x i, w: o x i, b: 1 x o.
    pub fn affine(&mut self, x: NodeId, w: NodeId, b: NodeId) -> NodeId {
        let (n, i) = (self.nodes[x].rows, self.nodes[x].cols);
        let (o, wi) = (self.nodes[w].rows, self.nodes[w].cols);
        assert_eq!(i, wi, "affine: x cols {i} != w cols {wi}");
        assert_eq!(self.nodes[b].rows * self.nodes[b].cols, o, "affine: bias len");
        let mut y = vec![0.0; n * o];
        {
            let xv = &self.nodes[x].value;
            let wv = &self.nodes[w].value;
            let bv = &self.nodes[b].value;
            for r in 0..n {
                let xr = &xv[r * i..(r + 1) * i];
                let yr = &mut y[r * o..(r + 1) * o];
                yr.copy_from_slice(bv);
                for (c, yc) in yr.iter_mut().enumerate() {
                    let wr = &wv[c * i..(c + 1) * i];
                    let mut acc = 0.0;
                    for (xk, wk) in xr.iter().zip(wr.iter()) {
                        acc += xk * wk;
                    }
                    *yc += acc;
                }
            }
        }
        let ng = self.nodes[x].needs_grad || self.nodes[w].needs_grad || self.nodes[b].needs_grad;
        self.push(n, o, y, Op::Affine { x, w, b }, ng)
    }

    fn binary_same_shape(&mut self, a: NodeId, b: NodeId, op: Op, f: impl Fn(f64, f64) -> f64) -> NodeId {
        let (ra, ca) = (self.nodes[a].rows, self.nodes[a].cols);
        let (rb, cb) = (self.nodes[b].rows, self.nodes[b].cols);
        assert_eq!((ra, ca), (rb, cb), "{}: shape mismatch", op.name());
        let value: Vec<f64> = self.nodes[a]
            .value
            .iter()
            .zip(self.nodes[b].value.iter())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let ng = self.nodes[a].needs_grad || self.nodes[b].needs_grad;
        self.push(ra, ca, value, op, ng)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn max(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.binary_same_shape(a, b, Op::Max(a, b), f64::max)
    }

    /// Multiply each row of `a` by the matching entry of `s` (rows x 1).
    pub fn mul_col_vec(&mut self, a: NodeId, s: NodeId) -> NodeId {
        let (ra, ca) = (self.nodes[a].rows, self.nodes[a].cols);
        assert_eq!(self.nodes[s].rows, ra, "mul_col_vec: row count");
        assert_eq!(self.nodes[s].cols, 1, "mul_col_vec: s must be rows x 1");
        let mut value = vec![0.0; ra * ca];
        for r in 0..ra {
            let sv = self.nodes[s].value[r];
            for c in 0..ca {
                value[r * ca + c] = self.nodes[a].value[r * ca + c] * sv;
            }
        }
        let ng = self.nodes[a].needs_grad || self.nodes[s].needs_grad;
        self.push(ra, ca, value, Op::MulColVec { a, s }, ng)
    }

    /// y = mul * a + add (scalar constants).
    pub fn affine_scalar(&mut self, a: NodeId, mul: f64, add: f64) -> NodeId {
        let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| mul * x + add).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(r, c, value, Op::AffineScalar { a, mul }, ng)
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        self.affine_scalar(a, s, 0.0)
    }

    fn unary(&mut self, a: NodeId, op: Op, f: impl Fn(f64) -> f64) -> NodeId {
        let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
        let value: Vec<f64> = self.nodes[a].value.iter().map(|x| f(*x)).collect();
        let ng = self.nodes[a].needs_grad;
        self.push(r, c, value, op, ng)
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Tanh(a), libm::tanh)
    }

    pub fn elu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Elu(a), |x| if x > 0.0 { x } else { libm::exp(x) - 1.0 })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sigmoid(a), |x| 1.0 / (1.0 + libm::exp(-x)))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Exp(a), libm::exp)
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Log(a), libm::log)
    }

    pub fn sqrt(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Sqrt(a), f64::sqrt)
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Row-wise softmax over consecutive blocks of `classes` columns.
    pub fn softmax(&mut self, a: NodeId, classes: usize) -> NodeId {
        let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
        assert!(classes >= 1 && c % classes == 0, "softmax: cols {c} not divisible by {classes}");
        let mut value = vec![0.0; r * c];
        for chunk in 0..(r * c / classes) {
            let src = &self.nodes[a].value[chunk * classes..(chunk + 1) * classes];
            let dst = &mut value[chunk * classes..(chunk + 1) * classes];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = libm::exp(s - m);
                z += *d;
            }
            for d in dst.iter_mut() {
                *d /= z;
            }
        }
        let ng = self.nodes[a].needs_grad;
        self.push(r, c, value, Op::Softmax { a, classes }, ng)
    }

    /// Block-wise log-softmax: numerically stable even when the plain
    /// softmax would underflow to exact zeros.
    pub fn log_softmax(&mut self, a: NodeId, classes: usize) -> NodeId {
        let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
        assert!(classes >= 1 && c % classes == 0, "log_softmax: cols {c} not divisible by {classes}");
        let mut value = vec![0.0; r * c];
        for chunk in 0..(r * c / classes) {
            let src = &self.nodes[a].value[chunk * classes..(chunk + 1) * classes];
            let dst = &mut value[chunk * classes..(chunk + 1) * classes];
            let m = src.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = src.iter().map(|s| libm::exp(s - m)).sum();
            let logz = m + libm::log(z);
            for (d, s) in dst.iter_mut().zip(src.iter()) {
                *d = s - logz;
            }
        }
        let ng = self.nodes[a].needs_grad;
        self.push(r, c, value, Op::LogSoftmax { a, classes }, ng)
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v: f64 = self.nodes[a].value.iter().sum();
        let ng = self.nodes[a].needs_grad;
        self.push(1, 1, vec![v], Op::SumAll(a), ng)
    }

    pub fn mean_all(&mut self, a: NodeId) -> NodeId {
        let n = self.nodes[a].value.len();
        let v: f64 = self.nodes[a].value.iter().sum::<f64>() / n as f64;
        let ng = self.nodes[a].needs_grad;
        self.push(1, 1, vec![v], Op::MeanAll(a), ng)
    }

    /// Row-wise sum: n x c -> n x 1.
    pub fn sum_cols(&mut self, a: NodeId) -> NodeId {
        let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
        let mut value = vec![0.0; r];
        for row in 0..r {
            value[row] = self.nodes[a].value[row * c..(row + 1) * c].iter().sum();
        }
        let ng = self.nodes[a].needs_grad;
        self.push(r, 1, value, Op::SumCols(a), ng)
    }

    /// Column-wise concatenation; all parts share a row count.
    pub fn concat(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty(), "concat: no parts");
        let rows = self.nodes[parts[0]].rows;
        let cols: usize = parts.iter().map(|&p| self.nodes[p].cols).sum();
        let mut value = vec![0.0; rows * cols];
        let mut off = 0;
        for &p in parts {
            let n = &self.nodes[p];
            assert_eq!(n.rows, rows, "concat: row mismatch");
            for r in 0..rows {
                value[r * cols + off..r * cols + off + n.cols]
                    .copy_from_slice(&n.value[r * n.cols..(r + 1) * n.cols]);
            }
            off += n.cols;
        }
        let ng = parts.iter().any(|&p| self.nodes[p].needs_grad);
        self.push(rows, cols, value, Op::Concat(parts.to_vec()), ng)
    }

    /// Columns [start, start+len) of `a`.
    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let (r, c) = (self.nodes[a].rows, self.nodes[a].cols);
        assert!(start + len <= c, "slice_cols: {start}+{len} > {c}");
        let mut value = vec![0.0; r * len];
        for row in 0..r {
            value[row * len..(row + 1) * len]
                .copy_from_slice(&self.nodes[a].value[row * c + start..row * c + start + len]);
        }
        let ng = self.nodes[a].needs_grad;
        self.push(r, len, value, Op::SliceCols { a, start, len }, ng)
    }

    /// Straight-through one-hot sample over blocks of `classes` logits.
    /// Greedy mode takes the argmax; otherwise categories are drawn from
    /// the block softmax using `rng`. Backward is the identity.
    pub fn one_hot_st(&mut self, logits: NodeId, classes: usize, greedy: bool, rng: &mut ChaCha8Rng) -> NodeId {
        let (r, c) = (self.nodes[logits].rows, self.nodes[logits].cols);
        assert!(classes >= 1 && c % classes == 0, "one_hot_st: cols {c} not divisible by {classes}");
        let mut value = vec![0.0; r * c];
        for chunk in 0..(r * c / classes) {
            let src = &self.nodes[logits].value[chunk * classes..(chunk + 1) * classes];
            let pick = if greedy {
                argmax(src)
            } else {
                sample_softmax(src, rng)
            };
            value[chunk * classes + pick] = 1.0;
        }
        let ng = self.nodes[logits].needs_grad;
        self.push(r, c, value, Op::OneHotSt { logits }, ng)
    }

    // ---- backward -------------------------------------------------------

    /// Reverse accumulation from a scalar loss node. Returns gradients for
    /// every trainable parameter group pulled into this graph; groups the
    /// loss does not reach get exact zeros.
    pub fn backward(&mut self, loss: NodeId) -> Result<Grads> {
        if let Some(primitive) = self.poisoned {
            return Err(HgcpError::NumericalDivergence { primitive });
        }
        let ln = &self.nodes[loss];
        if ln.rows * ln.cols != 1 {
            return Err(HgcpError::Shape(format!(
                "backward from {}x{} node; loss must be scalar",
                ln.rows, ln.cols
            )));
        }

        let mut grads: Vec<Option<Vec<f64>>> = self.nodes.iter().map(|_| None).collect();
        grads[loss] = Some(vec![1.0]);

        for id in (0..=loss).rev() {
            if !self.nodes[id].needs_grad {
                continue;
            }
            let Some(gy) = grads[id].take() else { continue };
            // Re-insert so parameter gradients remain readable afterwards.
            let op = self.nodes[id].op.clone();
            self.vjp(id, &gy, &op, &mut grads);
            grads[id] = Some(gy);
        }

        let mut out = Grads::default();
        for (name, id, trainable) in &self.params {
            if !trainable {
                continue;
            }
            let g = grads[*id]
                .take()
                .unwrap_or_else(|| vec![0.0; self.nodes[*id].value.len()]);
            match out.0.entry(name.clone()) {
                std::collections::btree_map::Entry::Vacant(e) => {
                    e.insert(g);
                }
                std::collections::btree_map::Entry::Occupied(mut e) => {
                    // Same group pulled in twice: accumulate.
                    for (a, b) in e.get_mut().iter_mut().zip(g.iter()) {
                        *a += b;
                    }
                }
            }
        }
        if !out.0.values().all(|g| g.iter().all(|v| v.is_finite())) {
            return Err(HgcpError::NumericalDivergence { primitive: "backward" });
        }
        Ok(out)
    }

    fn accum(&self, grads: &mut [Option<Vec<f64>>], target: NodeId, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].needs_grad {
            return;
        }
        let slot = &mut grads[target];
        if slot.is_none() {
            *slot = Some(vec![0.0; self.nodes[target].value.len()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn vjp(&self, id: NodeId, gy: &[f64], op: &Op, grads: &mut Vec<Option<Vec<f64>>>) {
        match *op {
            Op::Leaf => {}
            Op::Affine { x, w, b } => {
                let n = self.nodes[x].rows;
                let i = self.nodes[x].cols;
                let o = self.nodes[w].rows;
                let xv = &self.nodes[x].value;
                let wv = &self.nodes[w].value;
                self.accum(grads, x, |gx| {
                    for r in 0..n {
                        let gyr = &gy[r * o..(r + 1) * o];
                        let gxr = &mut gx[r * i..(r + 1) * i];
                        for (c, gyc) in gyr.iter().enumerate() {
                            if *gyc == 0.0 {
                                continue;
                            }
                            let wr = &wv[c * i..(c + 1) * i];
                            for (gxk, wk) in gxr.iter_mut().zip(wr.iter()) {
                                *gxk += gyc * wk;
                            }
                        }
                    }
                });
                self.accum(grads, w, |gw| {
                    for r in 0..n {
                        let gyr = &gy[r * o..(r + 1) * o];
                        let xr = &xv[r * i..(r + 1) * i];
                        for (c, gyc) in gyr.iter().enumerate() {
                            if *gyc == 0.0 {
                                continue;
                            }
                            let gwr = &mut gw[c * i..(c + 1) * i];
                            for (gwk, xk) in gwr.iter_mut().zip(xr.iter()) {
                                *gwk += gyc * xk;
                            }
                        }
                    }
                });
                self.accum(grads, b, |gb| {
                    for r in 0..n {
                        for (gbc, gyc) in gb.iter_mut().zip(gy[r * o..(r + 1) * o].iter()) {
                            *gbc += gyc;
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.accum(grads, a, |g| add_assign(g, gy));
                self.accum(grads, b, |g| add_assign(g, gy));
            }
            Op::Sub(a, b) => {
                self.accum(grads, a, |g| add_assign(g, gy));
                self.accum(grads, b, |g| sub_assign(g, gy));
            }
            Op::Mul(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), bk) in g.iter_mut().zip(gy.iter()).zip(bv.iter()) {
                        *gk += yk * bk;
                    }
                });
                self.accum(grads, b, |g| {
                    for ((gk, yk), ak) in g.iter_mut().zip(gy.iter()).zip(av.iter()) {
                        *gk += yk * ak;
                    }
                });
            }
            Op::Div(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), bk) in g.iter_mut().zip(gy.iter()).zip(bv.iter()) {
                        *gk += yk / bk;
                    }
                });
                self.accum(grads, b, |g| {
                    for (i, gk) in g.iter_mut().enumerate() {
                        *gk -= gy[i] * av[i] / (bv[i] * bv[i]);
                    }
                });
            }
            Op::MulColVec { a, s } => {
                let cols = self.nodes[a].cols;
                let av = &self.nodes[a].value;
                let sv = &self.nodes[s].value;
                self.accum(grads, a, |g| {
                    for (r, srow) in sv.iter().enumerate() {
                        for c in 0..cols {
                            g[r * cols + c] += gy[r * cols + c] * srow;
                        }
                    }
                });
                self.accum(grads, s, |g| {
                    for (r, gr) in g.iter_mut().enumerate() {
                        let mut acc = 0.0;
                        for c in 0..cols {
                            acc += gy[r * cols + c] * av[r * cols + c];
                        }
                        *gr += acc;
                    }
                });
            }
            Op::AffineScalar { a, mul } => {
                self.accum(grads, a, |g| {
                    for (gk, yk) in g.iter_mut().zip(gy.iter()) {
                        *gk += mul * yk;
                    }
                });
            }
            Op::Tanh(a) => {
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), t) in g.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                        *gk += yk * (1.0 - t * t);
                    }
                });
            }
            Op::Elu(a) => {
                let xv = &self.nodes[a].value;
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for i in 0..g.len() {
                        let d = if xv[i] > 0.0 { 1.0 } else { yv[i] + 1.0 };
                        g[i] += gy[i] * d;
                    }
                });
            }
            Op::Sigmoid(a) => {
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), s) in g.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                        *gk += yk * s * (1.0 - s);
                    }
                });
            }
            Op::Exp(a) => {
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), e) in g.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                        *gk += yk * e;
                    }
                });
            }
            Op::Log(a) => {
                let xv = &self.nodes[a].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), x) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                        *gk += yk / x;
                    }
                });
            }
            Op::Sqrt(a) => {
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), s) in g.iter_mut().zip(gy.iter()).zip(yv.iter()) {
                        *gk += yk * 0.5 / s;
                    }
                });
            }
            Op::Square(a) => {
                let xv = &self.nodes[a].value;
                self.accum(grads, a, |g| {
                    for ((gk, yk), x) in g.iter_mut().zip(gy.iter()).zip(xv.iter()) {
                        *gk += yk * 2.0 * x;
                    }
                });
            }
            Op::Max(a, b) => {
                let av = &self.nodes[a].value;
                let bv = &self.nodes[b].value;
                self.accum(grads, a, |g| {
                    for i in 0..g.len() {
                        if av[i] >= bv[i] {
                            g[i] += gy[i];
                        }
                    }
                });
                self.accum(grads, b, |g| {
                    for i in 0..g.len() {
                        if bv[i] > av[i] {
                            g[i] += gy[i];
                        }
                    }
                });
            }
            Op::Softmax { a, classes } => {
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for chunk in 0..(yv.len() / classes) {
                        let y = &yv[chunk * classes..(chunk + 1) * classes];
                        let dy = &gy[chunk * classes..(chunk + 1) * classes];
                        let dot: f64 = y.iter().zip(dy.iter()).map(|(yi, di)| yi * di).sum();
                        let gc = &mut g[chunk * classes..(chunk + 1) * classes];
                        for i in 0..classes {
                            gc[i] += y[i] * (dy[i] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax { a, classes } => {
                let yv = &self.nodes[id].value;
                self.accum(grads, a, |g| {
                    for chunk in 0..(yv.len() / classes) {
                        let y = &yv[chunk * classes..(chunk + 1) * classes];
                        let dy = &gy[chunk * classes..(chunk + 1) * classes];
                        let total: f64 = dy.iter().sum();
                        let gc = &mut g[chunk * classes..(chunk + 1) * classes];
                        for i in 0..classes {
                            gc[i] += dy[i] - libm::exp(y[i]) * total;
                        }
                    }
                });
            }
            Op::SumAll(a) => {
                let s = gy[0];
                self.accum(grads, a, |g| {
                    for gk in g.iter_mut() {
                        *gk += s;
                    }
                });
            }
            Op::MeanAll(a) => {
                let n = self.nodes[a].value.len() as f64;
                let s = gy[0] / n;
                self.accum(grads, a, |g| {
                    for gk in g.iter_mut() {
                        *gk += s;
                    }
                });
            }
            Op::SumCols(a) => {
                let cols = self.nodes[a].cols;
                self.accum(grads, a, |g| {
                    for (r, s) in gy.iter().enumerate() {
                        for c in 0..cols {
                            g[r * cols + c] += s;
                        }
                    }
                });
            }
            Op::Concat(ref parts) => {
                let rows = self.nodes[id].rows;
                let cols = self.nodes[id].cols;
                let mut off = 0;
                for &p in parts {
                    let pc = self.nodes[p].cols;
                    self.accum(grads, p, |g| {
                        for r in 0..rows {
                            for c in 0..pc {
                                g[r * pc + c] += gy[r * cols + off + c];
                            }
                        }
                    });
                    off += pc;
                }
            }
            Op::SliceCols { a, start, len } => {
                let cols = self.nodes[a].cols;
                let rows = self.nodes[id].rows;
                self.accum(grads, a, |g| {
                    for r in 0..rows {
                        for c in 0..len {
                            g[r * cols + start + c] += gy[r * len + c];
                        }
                    }
                });
            }
            Op::OneHotSt { logits } => {
                // Straight-through: identity backward.
                self.accum(grads, logits, |g| add_assign(g, gy));
            }
        }
    }
}

fn add_assign(g: &mut [f64], gy: &[f64]) {
    for (a, b) in g.iter_mut().zip(gy.iter()) {
        *a += b;
    }
}

fn sub_assign(g: &mut [f64], gy: &[f64]) {
    for (a, b) in g.iter_mut().zip(gy.iter()) {
        *a -= b;
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

fn sample_softmax(logits: &[f64], rng: &mut ChaCha8Rng) -> usize {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| libm::exp(l - m)).collect();
    let z: f64 = exps.iter().sum();
    let u: f64 = rng.gen::<f64>() * z;
    let mut acc = 0.0;
    for (i, e) in exps.iter().enumerate() {
        acc += e;
        if u < acc {
            return i;
        }
    }
    exps.len() - 1
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::store::ParamStore;
    use rand::SeedableRng;

    fn store_with(name: &str, values: Vec<f64>) -> ParamStore {
        let mut s = ParamStore::new();
        s.register(name, values, true).unwrap();
        s
    }

    #[test]
    fn single_multiply_chain_rule() {
        // y = w * x with w = 2, x = 3 -> dy/dw = 3
        let store = store_with("w", vec![2.0]);
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let x = g.scalar_const(3.0);
        let y = g.mul(w, x);
        assert_eq!(g.scalar(y).unwrap(), 6.0);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[3.0]);
    }

    #[test]
    fn quadratic_at_minimum_has_zero_loss_and_grad() {
        let t = [0.5, -1.5, 2.0];
        let store = store_with("w", t.to_vec());
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let tgt = g.constant(1, 3, t.to_vec());
        let d = g.sub(w, tgt);
        let sq = g.square(d);
        let loss = g.sum_all(sq);
        assert_eq!(g.scalar(loss).unwrap(), 0.0);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("w").unwrap(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn untouched_trainable_group_gets_exact_zero() {
        let mut store = ParamStore::new();
        store.register("used", vec![1.0], true).unwrap();
        store.register("unused", vec![5.0, 6.0], true).unwrap();
        let mut g = Graph::new();
        let u = g.param(&store, "used");
        let _nu = g.param(&store, "unused");
        let loss = g.sum_all(u);
        let grads = g.backward(loss).unwrap();
        assert_eq!(grads.get("used").unwrap(), &[1.0]);
        assert_eq!(grads.get("unused").unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn non_trainable_group_gets_no_entry() {
        let mut store = ParamStore::new();
        store.register("frozen", vec![2.0], false).unwrap();
        let mut g = Graph::new();
        let f = g.param(&store, "frozen");
        let loss = g.sum_all(f);
        let grads = g.backward(loss).unwrap();
        assert!(grads.get("frozen").is_none());
    }

    #[test]
    fn poisoned_graph_reports_offending_primitive() {
        let store = store_with("w", vec![-1.0]);
        let mut g = Graph::new();
        let w = g.param(&store, "w");
        let l = g.log(w); // log of a negative number
        let loss = g.sum_all(l);
        match g.scalar(loss) {
            Err(HgcpError::NumericalDivergence { primitive }) => assert_eq!(primitive, "log"),
            other => panic!("expected divergence, got {other:?}"),
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let store = store_with("w", vec![0.3, -2.0, 1.1, 4.0, 0.0, -1.0, 2.0, 2.0]);
        let mut g = Graph::new();
        let w = g.param_matrix(&store, "w", 2, 4);
        let p = g.softmax(w, 4);
        for row in 0..2 {
            let s: f64 = g.value(p)[row * 4..(row + 1) * 4].iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn one_hot_st_rows_are_one_hot_and_backward_is_identity() {
        let store = store_with("w", vec![0.1, 0.9, -0.3, 0.0, 0.2, 0.5, 0.4, -2.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut g = Graph::new();
        let w = g.param_matrix(&store, "w", 2, 4);
        let oh = g.one_hot_st(w, 4, false, &mut rng);
        for row in 0..2 {
            let r = &g.value(oh)[row * 4..(row + 1) * 4];
            assert_eq!(r.iter().filter(|v| **v == 1.0).count(), 1);
            assert_eq!(r.iter().filter(|v| **v == 0.0).count(), 3);
        }
        let s = g.sum_all(oh);
        let grads = g.backward(s).unwrap();
        // Identity backward: every logit receives d(sum)/d(onehot) = 1.
        assert_eq!(grads.get("w").unwrap(), &[1.0; 8]);
    }

    #[test]
    fn greedy_one_hot_is_deterministic() {
        let store = store_with("w", vec![0.1, 0.9, -0.3, 0.0]);
        let mut a = None;
        for seed in 0..3u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut g = Graph::new();
            let w = g.param_matrix(&store, "w", 1, 4);
            let oh = g.one_hot_st(w, 4, true, &mut rng);
            let v = g.value(oh).to_vec();
            assert_eq!(v, vec![0.0, 1.0, 0.0, 0.0]);
            if let Some(prev) = &a {
                assert_eq!(prev, &v);
            }
            a = Some(v);
        }
    }
}
