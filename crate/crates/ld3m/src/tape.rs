//! Reverse-mode differentiation on a dynamic tape, with segment checkpointing.
//!
//! The tape records one node per operation during the forward pass and walks
//! the records in reverse to accumulate exact adjoints. A segment wraps a
//! deferred computation: when replayable, its interior activations live on a
//! scratch tape that is dropped right after the forward pass, and the segment
//! is re-run exactly once during backward from its recorded inputs and RNG
//! substate. Boundary values (segment inputs and outputs) stay on the owning
//! tape, so peak retained activations scale with the number of boundaries
//! rather than with the full graph depth.
//!
//! Only MLP-compatible primitives are provided: affine maps, elementwise
//! functions, reductions, row softmaxes, and column concatenation.

use crate::array::{matmul, transpose, DiffArray};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use std::cell::Cell;
use std::rc::Rc;
use std::sync::atomic::{AtomicU64, Ordering};

static TAPE_IDS: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    id: usize,
    tape: u64,
}

/// Counters shared between a tape and the scratch tapes of its segments.
///
/// Tracks live and peak interior activation storage in scalar elements.
/// "Interior" activations are values produced by non-leaf operations; leaves
/// (parameters, constants, inputs) are excluded since both the checkpointed
/// and the uncheckpointed execution retain them.
#[derive(Debug, Default)]
pub struct ActivationStats {
    live: Cell<usize>,
    peak: Cell<usize>,
}

impl ActivationStats {
    pub fn live(&self) -> usize {
        self.live.get()
    }

    pub fn peak(&self) -> usize {
        self.peak.get()
    }

    fn incr(&self, n: usize) {
        let l = self.live.get() + n;
        self.live.set(l);
        if l > self.peak.get() {
            self.peak.set(l);
        }
    }

    fn decr(&self, n: usize) {
        self.live.set(self.live.get().saturating_sub(n));
    }
}

type SegmentFn = dyn Fn(&mut Tape, &[Var], &mut RngStream) -> Result<Vec<Var>>;

struct Segment {
    inputs: Vec<usize>,
    outputs: Vec<usize>,
    min_out: usize,
    run: Rc<SegmentFn>,
    rng_snapshot: RngStream,
    replayed: Cell<bool>,
}

#[derive(Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, f64),
    Offset(usize),
    Relu(usize),
    /// 1 where the input is positive, else 0; derivative defined as zero.
    ReluMask,
    Tanh(usize),
    Sqrt(usize),
    MatMul(usize, usize),
    Transpose(usize),
    /// x @ w^T + b with w of shape [m, n] and b of shape [m].
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    SumAll(usize),
    /// Sum over axis 0: [B, m] -> [m].
    SumRows(usize),
    Softmax(usize),
    LogSoftmax(usize),
    ConcatCols(usize, usize),
    PermuteCols(usize, Rc<Vec<usize>>),
    SegmentOut {
        seg: usize,
    },
    /// Identity forward with a deliberately wrong adjoint; negative control
    /// for the finite-difference harness.
    #[cfg(test)]
    BadGrad(usize),
}

struct Node {
    value: DiffArray,
    grad: Option<DiffArray>,
    requires_grad: bool,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    segments: Vec<Segment>,
    stats: Rc<ActivationStats>,
    interior_count: usize,
}

impl Drop for Tape {
    fn drop(&mut self) {
        self.stats.decr(self.interior_count);
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::with_stats(Rc::new(ActivationStats::default()))
    }

    pub fn with_stats(stats: Rc<ActivationStats>) -> Self {
        Tape {
            id: TAPE_IDS.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            segments: Vec::new(),
            stats,
            interior_count: 0,
        }
    }

    pub fn stats(&self) -> &Rc<ActivationStats> {
        &self.stats
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var, op: &'static str) -> usize {
        assert_eq!(
            v.tape, self.id,
            "{op}: variable belongs to a different tape"
        );
        v.id
    }

    fn push(&mut self, value: DiffArray, requires_grad: bool, op: Op) -> Var {
        debug_assert!(
            value.all_finite(),
            "non-finite value produced by a tape operation"
        );
        if !matches!(op, Op::Leaf) {
            self.interior_count += value.len();
            self.stats.incr(value.len());
        }
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var { id, tape: self.id }
    }

    pub fn leaf(&mut self, value: DiffArray, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: DiffArray) -> Var {
        self.push(value, false, Op::Leaf)
    }

    /// Constant copy of an existing value; gradients do not flow past it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &DiffArray {
        let id = self.check(v, "value");
        &self.nodes[id].value
    }

    pub fn grad(&self, v: Var) -> Option<&DiffArray> {
        let id = self.check(v, "grad");
        self.nodes[id].grad.as_ref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        let id = self.check(v, "requires_grad");
        self.nodes[id].requires_grad
    }

    fn req2(&self, a: usize, b: usize) -> bool {
        self.nodes[a].requires_grad || self.nodes[b].requires_grad
    }

    fn shape_err(&self, op: &'static str, a: usize, b: usize) -> Error {
        Error::Shape {
            op,
            lhs: self.nodes[a].value.shape().to_vec(),
            rhs: self.nodes[b].value.shape().to_vec(),
        }
    }

    fn binary_same_shape(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize) -> Op,
    ) -> Result<Var> {
        let (ia, ib) = (self.check(a, name), self.check(b, name));
        if !self.nodes[ia].value.same_shape(&self.nodes[ib].value) {
            return Err(self.shape_err(name, ia, ib));
        }
        let data: Vec<f64> = self.nodes[ia]
            .value
            .data()
            .iter()
            .zip(self.nodes[ib].value.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = DiffArray::new(self.nodes[ia].value.shape().to_vec(), data)?;
        Ok(self.push(value, self.req2(ia, ib), op(ia, ib)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape(a, b, "div", |x, y| x / y, Op::Div)
    }

    fn unary(
        &mut self,
        a: Var,
        name: &'static str,
        f: impl Fn(f64) -> f64,
        op: impl Fn(usize) -> Op,
    ) -> Var {
        let ia = self.check(a, name);
        let value = self.nodes[ia].value.map(f);
        let req = self.nodes[ia].requires_grad;
        self.push(value, req, op(ia))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.unary(a, "neg", |x| -x, Op::Neg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "scale", |x| x * c, |i| Op::Scale(i, c))
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, "offset", |x| x + c, Op::Offset)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, "relu", |x| x.max(0.0), Op::Relu)
    }

    /// Indicator of positivity; treated as locally constant by backward.
    pub fn relu_mask(&mut self, a: Var) -> Var {
        self.unary(
            a,
            "relu_mask",
            |x| if x > 0.0 { 1.0 } else { 0.0 },
            |_| Op::ReluMask,
        )
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, "tanh", f64::tanh, Op::Tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, "sqrt", f64::sqrt, Op::Sqrt)
    }

    #[cfg(test)]
    pub fn bad_grad(&mut self, a: Var) -> Var {
        self.unary(a, "bad_grad", |x| x, Op::BadGrad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "matmul"), self.check(b, "matmul"));
        let value = matmul(&self.nodes[ia].value, &self.nodes[ib].value)?;
        Ok(self.push(value, self.req2(ia, ib), Op::MatMul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "transpose");
        if self.nodes[ia].value.shape().len() != 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.nodes[ia].value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let value = transpose(&self.nodes[ia].value);
        let req = self.nodes[ia].requires_grad;
        Ok(self.push(value, req, Op::Transpose(ia)))
    }

    /// Affine map `x @ w^T + b`; `x` may be `[B, n]` or `[n]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let ix = self.check(x, "linear");
        let iw = self.check(w, "linear");
        let ib = self.check(b, "linear");
        let xv = &self.nodes[ix].value;
        let wv = &self.nodes[iw].value;
        let bv = &self.nodes[ib].value;
        let one_dim = xv.shape().len() == 1;
        let (batch, n) = (xv.rows(), xv.cols());
        let (m, wn) = (wv.rows(), wv.cols());
        if wv.shape().len() != 2 || wn != n || bv.shape() != [m] {
            return Err(Error::Shape {
                op: "linear",
                lhs: xv.shape().to_vec(),
                rhs: wv.shape().to_vec(),
            });
        }
        let mut out = vec![0.0; batch * m];
        for i in 0..batch {
            let xr = xv.row(i);
            for j in 0..m {
                let wr = wv.row(j);
                let mut acc = bv.data()[j];
                for (xi, wi) in xr.iter().zip(wr) {
                    acc += xi * wi;
                }
                out[i * m + j] = acc;
            }
        }
        let shape = if one_dim { vec![m] } else { vec![batch, m] };
        let value = DiffArray::new(shape, out)?;
        let req = self.nodes[ix].requires_grad
            || self.nodes[iw].requires_grad
            || self.nodes[ib].requires_grad;
        Ok(self.push(
            value,
            req,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
            },
        ))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let ia = self.check(a, "sum_all");
        let s: f64 = self.nodes[ia].value.data().iter().sum();
        let req = self.nodes[ia].requires_grad;
        self.push(DiffArray::scalar(s), req, Op::SumAll(ia))
    }

    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a, "sum_rows");
        let v = &self.nodes[ia].value;
        if v.shape().len() != 2 {
            return Err(Error::Shape {
                op: "sum_rows",
                lhs: v.shape().to_vec(),
                rhs: vec![],
            });
        }
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; cols];
        for i in 0..rows {
            for (o, x) in out.iter_mut().zip(v.row(i)) {
                *o += x;
            }
        }
        let req = self.nodes[ia].requires_grad;
        Ok(self.push(DiffArray::vector(out), req, Op::SumRows(ia)))
    }

    fn rowwise_softmax(v: &DiffArray, log: bool) -> DiffArray {
        let (rows, cols) = (v.rows(), v.cols());
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = v.row(i);
            let mx = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for &x in r {
                z += (x - mx).exp();
            }
            let lz = z.ln();
            for (j, &x) in r.iter().enumerate() {
                out[i * cols + j] = if log {
                    x - mx - lz
                } else {
                    (x - mx - lz).exp()
                };
            }
        }
        DiffArray::new(v.shape().to_vec(), out).expect("softmax shape")
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let ia = self.check(a, "softmax");
        let value = Self::rowwise_softmax(&self.nodes[ia].value, false);
        let req = self.nodes[ia].requires_grad;
        self.push(value, req, Op::Softmax(ia))
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let ia = self.check(a, "log_softmax");
        let value = Self::rowwise_softmax(&self.nodes[ia].value, true);
        let req = self.nodes[ia].requires_grad;
        self.push(value, req, Op::LogSoftmax(ia))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a, "concat_cols"), self.check(b, "concat_cols"));
        let (av, bv) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let two_d = av.shape().len() == 2;
        if av.shape().len() != bv.shape().len() || (two_d && av.rows() != bv.rows()) {
            return Err(self.shape_err("concat_cols", ia, ib));
        }
        let rows = av.rows();
        let (ca, cb) = (av.cols(), bv.cols());
        let mut out = Vec::with_capacity(rows * (ca + cb));
        for i in 0..rows {
            out.extend_from_slice(av.row(i));
            out.extend_from_slice(bv.row(i));
        }
        let shape = if two_d {
            vec![rows, ca + cb]
        } else {
            vec![ca + cb]
        };
        let value = DiffArray::new(shape, out)?;
        Ok(self.push(value, self.req2(ia, ib), Op::ConcatCols(ia, ib)))
    }

    pub fn permute_cols(&mut self, a: Var, perm: Rc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a, "permute_cols");
        let v = &self.nodes[ia].value;
        let (rows, cols) = (v.rows(), v.cols());
        if perm.len() != cols {
            return Err(Error::Shape {
                op: "permute_cols",
                lhs: v.shape().to_vec(),
                rhs: vec![perm.len()],
            });
        }
        let mut out = vec![0.0; rows * cols];
        for i in 0..rows {
            let r = v.row(i);
            for (j, &p) in perm.iter().enumerate() {
                out[i * cols + j] = r[p];
            }
        }
        let value = DiffArray::new(v.shape().to_vec(), out)?;
        let req = self.nodes[ia].requires_grad;
        Ok(self.push(value, req, Op::PermuteCols(ia, perm)))
    }

    // ----- composite losses -----

    /// Mean squared error over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        let d = self.sub(a, b)?;
        let sq = self.mul(d, d)?;
        let s = self.sum_all(sq);
        let n = self.value(a).len() as f64;
        Ok(self.scale(s, 1.0 / n))
    }

    /// Mean cross-entropy of row logits against integer labels.
    pub fn cross_entropy_logits(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let v = self.value(logits);
        let (rows, cols) = (v.rows(), v.cols());
        if labels.len() != rows {
            return Err(Error::Contract(format!(
                "cross_entropy: {} labels for {} rows",
                labels.len(),
                rows
            )));
        }
        for &y in labels {
            if y >= cols {
                return Err(Error::Contract(format!(
                    "cross_entropy: label {y} out of range for {cols} classes"
                )));
            }
        }
        let shape = v.shape().to_vec();
        let mut hot = DiffArray::zeros(&shape);
        for (i, &y) in labels.iter().enumerate() {
            hot.data_mut()[i * cols + y] = 1.0;
        }
        let hot = self.constant(hot);
        let ls = self.log_softmax(logits);
        let picked = self.mul(ls, hot)?;
        let s = self.sum_all(picked);
        Ok(self.scale(s, -1.0 / rows as f64))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let p = self.mul(a, b)?;
        Ok(self.sum_all(p))
    }

    pub fn sum_sq(&mut self, a: Var) -> Result<Var> {
        let p = self.mul(a, a)?;
        Ok(self.sum_all(p))
    }

    /// `1 - cos(a, b)`; errors when either operand has zero norm.
    pub fn cosine_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.value(a).l2_norm() == 0.0 || self.value(b).l2_norm() == 0.0 {
            return Err(Error::Degenerate(
                "cosine distance of a zero-norm operand".into(),
            ));
        }
        let d = self.dot(a, b)?;
        let na2 = self.sum_sq(a)?;
        let nb2 = self.sum_sq(b)?;
        let na = self.sqrt(na2);
        let nb = self.sqrt(nb2);
        let denom = self.mul(na, nb)?;
        let cos = self.div(d, denom)?;
        let neg = self.neg(cos);
        Ok(self.offset(neg, 1.0))
    }

    // ----- segments -----

    /// Run `run` as a graph segment over `inputs`.
    ///
    /// With `replayable = true`, the segment executes on a scratch tape whose
    /// interior activations are discarded after the forward pass; the segment
    /// is re-executed once during backward from the recorded inputs and the
    /// snapshotted RNG substate. With `replayable = false`, `run` simply
    /// executes inline on this tape.
    pub fn run_segment<F>(
        &mut self,
        inputs: &[Var],
        rng: &mut RngStream,
        replayable: bool,
        run: F,
    ) -> Result<Vec<Var>>
    where
        F: Fn(&mut Tape, &[Var], &mut RngStream) -> Result<Vec<Var>> + 'static,
    {
        if !replayable {
            return run(self, inputs, rng);
        }
        self.checkpoint(inputs, rng, run)
    }

    /// Checkpointed segment: discard interior activations, replay on backward.
    pub fn checkpoint<F>(&mut self, inputs: &[Var], rng: &mut RngStream, run: F) -> Result<Vec<Var>>
    where
        F: Fn(&mut Tape, &[Var], &mut RngStream) -> Result<Vec<Var>> + 'static,
    {
        let input_ids: Vec<usize> = inputs.iter().map(|&v| self.check(v, "checkpoint")).collect();
        let any_req = input_ids.iter().any(|&i| self.nodes[i].requires_grad);
        let rng_snapshot = rng.clone();

        let (out_values, run_rc): (Vec<DiffArray>, Rc<SegmentFn>) = {
            let mut scratch = Tape::with_stats(self.stats.clone());
            let leaves: Vec<Var> = input_ids
                .iter()
                .map(|&i| scratch.leaf(self.nodes[i].value.clone(), self.nodes[i].requires_grad))
                .collect();
            let outs = run(&mut scratch, &leaves, rng)?;
            let values = outs
                .iter()
                .map(|&o| scratch.value(o).clone())
                .collect::<Vec<_>>();
            (values, Rc::new(run))
        };

        let seg_index = self.segments.len();
        let out_vars: Vec<Var> = out_values
            .into_iter()
            .map(|v| self.push(v, any_req, Op::SegmentOut { seg: seg_index }))
            .collect();
        self.segments.push(Segment {
            inputs: input_ids,
            outputs: out_vars.iter().map(|v| v.id).collect(),
            min_out: out_vars.iter().map(|v| v.id).min().unwrap_or(usize::MAX),
            run: run_rc,
            rng_snapshot,
            replayed: Cell::new(false),
        });
        Ok(out_vars)
    }

    fn replay_segment(&mut self, seg: usize) -> Result<()> {
        let run = Rc::clone(&self.segments[seg].run);
        let mut rng = self.segments[seg].rng_snapshot.clone();
        let input_ids = self.segments[seg].inputs.clone();
        let output_ids = self.segments[seg].outputs.clone();
        self.segments[seg].replayed.set(true);

        let mut scratch = Tape::with_stats(self.stats.clone());
        let leaves: Vec<Var> = input_ids
            .iter()
            .map(|&i| scratch.leaf(self.nodes[i].value.clone(), self.nodes[i].requires_grad))
            .collect();
        let outs = run(&mut scratch, &leaves, &mut rng)?;
        if outs.len() != output_ids.len() {
            return Err(Error::Contract(
                "segment replay returned a different number of outputs".into(),
            ));
        }

        let mut seeds = Vec::new();
        for (&out_var, &outer_id) in outs.iter().zip(&output_ids) {
            let replayed = scratch.value(out_var);
            let recorded = &self.nodes[outer_id].value;
            let diff = replayed.max_abs_diff(recorded).unwrap_or(f64::INFINITY);
            if diff > 1e-12 {
                return Err(Error::Replay { max_diff: diff });
            }
            if let Some(g) = self.nodes[outer_id].grad.clone() {
                seeds.push((out_var, g));
            }
        }
        scratch.backward_seeded(seeds)?;
        for (&leaf, &outer_id) in leaves.iter().zip(&input_ids) {
            if !self.nodes[outer_id].requires_grad {
                continue;
            }
            if let Some(g) = scratch.grad(leaf) {
                let g = g.clone();
                Self::accumulate(&mut self.nodes[outer_id].grad, g);
            }
        }
        Ok(())
    }

    // ----- backward -----

    fn accumulate(slot: &mut Option<DiffArray>, delta: DiffArray) {
        match slot {
            None => *slot = Some(delta),
            Some(g) => {
                debug_assert!(g.same_shape(&delta), "gradient shape drift");
                for (gi, di) in g.data_mut().iter_mut().zip(delta.data()) {
                    *gi += di;
                }
            }
        }
    }

    fn deposit(&mut self, parent: usize, delta: DiffArray) {
        if !self.nodes[parent].requires_grad {
            return;
        }
        Self::accumulate(&mut self.nodes[parent].grad, delta);
    }

    /// Backward pass from a scalar root, seeding `d(root)/d(root) = 1`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let ir = self.check(root, "backward");
        if self.nodes[ir].value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.nodes[ir].value.shape()
            )));
        }
        if !self.nodes[ir].requires_grad {
            return Err(Error::Contract(
                "backward root is not reachable from any requires_grad node".into(),
            ));
        }
        self.backward_seeded(vec![(root, DiffArray::scalar(1.0))])
    }

    /// Backward pass from externally supplied adjoint seeds.
    pub fn backward_seeded(&mut self, seeds: Vec<(Var, DiffArray)>) -> Result<()> {
        let mut max_id = 0usize;
        let mut any = false;
        for (v, g) in seeds {
            let id = self.check(v, "backward_seeded");
            if !self.nodes[id].value.same_shape(&g) {
                return Err(Error::Shape {
                    op: "backward_seeded",
                    lhs: self.nodes[id].value.shape().to_vec(),
                    rhs: g.shape().to_vec(),
                });
            }
            Self::accumulate(&mut self.nodes[id].grad, g);
            max_id = max_id.max(id);
            any = true;
        }
        if !any {
            return Ok(());
        }

        for id in (0..=max_id).rev() {
            // A replayable segment fires once, when the sweep reaches its
            // lowest output: all output adjoints are final at that point.
            if let Op::SegmentOut { seg } = self.nodes[id].op {
                if self.segments[seg].min_out == id
                    && !self.segments[seg].replayed.get()
                    && self.segments[seg]
                        .outputs
                        .iter()
                        .any(|&o| self.nodes[o].grad.is_some())
                {
                    self.replay_segment(seg)?;
                }
                continue;
            }
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.propagate(id);
        }
        Ok(())
    }

    fn propagate(&mut self, id: usize) {
        let g = self.nodes[id].grad.clone().expect("grad present");
        let op = self.nodes[id].op.clone();
        match op {
            Op::Leaf | Op::SegmentOut { .. } => {}
            Op::Add(a, b) => {
                self.deposit(a, g.clone());
                self.deposit(b, g);
            }
            Op::Sub(a, b) => {
                self.deposit(a, g.clone());
                let neg = g.map(|x| -x);
                self.deposit(b, neg);
            }
            Op::Mul(a, b) => {
                let da = Self::ew(&g, &self.nodes[b].value, |gi, bv| gi * bv);
                let db = Self::ew(&g, &self.nodes[a].value, |gi, av| gi * av);
                self.deposit(a, da);
                self.deposit(b, db);
            }
            Op::Div(a, b) => {
                let bv = &self.nodes[b].value;
                let da = Self::ew(&g, bv, |gi, b| gi / b);
                let yv = &self.nodes[id].value;
                let mut db = Self::ew(&g, yv, |gi, y| -gi * y);
                let db2 = Self::ew(&db, bv, |x, b| x / b);
                db = db2;
                self.deposit(a, da);
                self.deposit(b, db);
            }
            Op::Neg(a) => {
                let d = g.map(|x| -x);
                self.deposit(a, d);
            }
            Op::Scale(a, c) => {
                let d = g.map(|x| x * c);
                self.deposit(a, d);
            }
            Op::Offset(a) => {
                self.deposit(a, g);
            }
            Op::Relu(a) => {
                let d = Self::ew(&g, &self.nodes[a].value, |gi, x| {
                    if x > 0.0 {
                        gi
                    } else {
                        0.0
                    }
                });
                self.deposit(a, d);
            }
            Op::ReluMask => {}
            Op::Tanh(a) => {
                let d = Self::ew(&g, &self.nodes[id].value, |gi, y| gi * (1.0 - y * y));
                self.deposit(a, d);
            }
            Op::Sqrt(a) => {
                let d = Self::ew(&g, &self.nodes[id].value, |gi, y| gi / (2.0 * y));
                self.deposit(a, d);
            }
            Op::MatMul(a, b) => {
                let bt = transpose(&self.nodes[b].value);
                let da = matmul(&g, &bt).expect("matmul backward");
                let at = transpose(&self.nodes[a].value);
                let db = matmul(&at, &g).expect("matmul backward");
                self.deposit(a, da);
                self.deposit(b, db);
            }
            Op::Transpose(a) => {
                self.deposit(a, transpose(&g));
            }
            Op::Linear { x, w, b } => {
                let (xg, wg, bg) = self.linear_backward(x, w, &g);
                self.deposit(x, xg);
                self.deposit(w, wg);
                self.deposit(b, bg);
            }
            Op::SumAll(a) => {
                let gv = g.item();
                let d = DiffArray::full(self.nodes[a].value.shape(), gv);
                self.deposit(a, d);
            }
            Op::SumRows(a) => {
                let v = &self.nodes[a].value;
                let (rows, cols) = (v.rows(), v.cols());
                let mut d = DiffArray::zeros(v.shape());
                for i in 0..rows {
                    d.data_mut()[i * cols..(i + 1) * cols].copy_from_slice(g.data());
                }
                self.deposit(a, d);
            }
            Op::Softmax(a) => {
                // ds = s * (g - <g, s>) rowwise
                let s = &self.nodes[id].value;
                let (rows, cols) = (s.rows(), s.cols());
                let mut d = DiffArray::zeros(s.shape());
                for i in 0..rows {
                    let sr = s.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let dotgs: f64 = sr.iter().zip(gr).map(|(si, gi)| si * gi).sum();
                    for j in 0..cols {
                        d.data_mut()[i * cols + j] = sr[j] * (gr[j] - dotgs);
                    }
                }
                self.deposit(a, d);
            }
            Op::LogSoftmax(a) => {
                // dz = g - softmax(z) * sum(g) rowwise; softmax = exp(stored).
                let l = &self.nodes[id].value;
                let (rows, cols) = (l.rows(), l.cols());
                let mut d = DiffArray::zeros(l.shape());
                for i in 0..rows {
                    let lr = l.row(i);
                    let gr = &g.data()[i * cols..(i + 1) * cols];
                    let gsum: f64 = gr.iter().sum();
                    for j in 0..cols {
                        d.data_mut()[i * cols + j] = gr[j] - lr[j].exp() * gsum;
                    }
                }
                self.deposit(a, d);
            }
            Op::ConcatCols(a, b) => {
                let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
                let rows = av.rows();
                let (ca, cb) = (av.cols(), bv.cols());
                let mut da = DiffArray::zeros(av.shape());
                let mut db = DiffArray::zeros(bv.shape());
                for i in 0..rows {
                    let gr = &g.data()[i * (ca + cb)..(i + 1) * (ca + cb)];
                    da.data_mut()[i * ca..(i + 1) * ca].copy_from_slice(&gr[..ca]);
                    db.data_mut()[i * cb..(i + 1) * cb].copy_from_slice(&gr[ca..]);
                }
                self.deposit(a, da);
                self.deposit(b, db);
            }
            Op::PermuteCols(a, perm) => {
                let v = &self.nodes[a].value;
                let (rows, cols) = (v.rows(), v.cols());
                let mut d = DiffArray::zeros(v.shape());
                for i in 0..rows {
                    for (j, &p) in perm.iter().enumerate() {
                        d.data_mut()[i * cols + p] += g.data()[i * cols + j];
                    }
                }
                self.deposit(a, d);
            }
            #[cfg(test)]
            Op::BadGrad(a) => {
                let d = g.map(|x| 2.0 * x + 1.0);
                self.deposit(a, d);
            }
        }
    }

    fn ew(g: &DiffArray, other: &DiffArray, f: impl Fn(f64, f64) -> f64) -> DiffArray {
        let data: Vec<f64> = g
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| f(a, b))
            .collect();
        DiffArray::new(g.shape().to_vec(), data).expect("ew shape")
    }

    fn linear_backward(
        &self,
        x: usize,
        w: usize,
        g: &DiffArray,
    ) -> (DiffArray, DiffArray, DiffArray) {
        let xv = &self.nodes[x].value;
        let wv = &self.nodes[w].value;
        let (batch, n) = (xv.rows(), xv.cols());
        let (m, _) = (wv.rows(), wv.cols());
        // dx = g @ w
        let mut dx = vec![0.0; batch * n];
        for i in 0..batch {
            let gr = &g.data()[i * m..(i + 1) * m];
            let dxr = &mut dx[i * n..(i + 1) * n];
            for (j, &gj) in gr.iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                for (d, &wji) in dxr.iter_mut().zip(wv.row(j)) {
                    *d += gj * wji;
                }
            }
        }
        // dw = g^T @ x
        let mut dw = vec![0.0; m * n];
        for i in 0..batch {
            let gr = &g.data()[i * m..(i + 1) * m];
            let xr = xv.row(i);
            for (j, &gj) in gr.iter().enumerate() {
                if gj == 0.0 {
                    continue;
                }
                let dwr = &mut dw[j * n..(j + 1) * n];
                for (d, &xi) in dwr.iter_mut().zip(xr) {
                    *d += gj * xi;
                }
            }
        }
        // db = column sums of g
        let mut db = vec![0.0; m];
        for i in 0..batch {
            for (d, &gj) in db.iter_mut().zip(&g.data()[i * m..(i + 1) * m]) {
                *d += gj;
            }
        }
        (
            DiffArray::new(xv.shape().to_vec(), dx).expect("dx shape"),
            DiffArray::new(wv.shape().to_vec(), dw).expect("dw shape"),
            DiffArray::vector(db),
        )
    }
}
