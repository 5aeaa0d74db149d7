//! Eager reverse-mode differentiation over dense `f64` matrices.
//!
//! Every operation computes its value immediately and records how to push
//! gradients back to its inputs. Sequences are handled as one matrix per time
//! step (`B × n`) or as a stacked matrix whose row `b * T + t` holds step `t`
//! of example `b`.
//!
//! Parameters are borrowed, never copied: a [`Tape`] is built over a slice of
//! parameter tensors and param leaves read straight from it. Whether gradients
//! reach those parameters is decided once, when the tape is created.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Const,
    Input,
    Param(usize),
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Mat),
    Scale(Var, f64),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<Option<usize>>),
    Blend(Var, Var, Vec<f64>),
    MaskedSoftmax(Var),
    LogSoftmax(Var),
    MulCol(Var, Var),
    StackTime(Vec<Var>),
    TimeSlice(Var, usize, usize),
    RepeatAdd(Var, Var, usize),
    Reshape(Var),
    Attend(Var, Var),
    KlRows(Var, Mat, Vec<f64>),
    Nll(Var, Vec<(usize, usize, f64)>),
}

struct Node {
    value: Option<Mat>,
    op: Op,
    tracked: bool,
}

pub struct Tape<'p> {
    params: &'p [Mat],
    track_params: bool,
    param_vars: Vec<Option<Var>>,
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    nodes: Vec<Option<Mat>>,
    params: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the root with respect to a tracked leaf.
    pub fn wrt(&self, var: Var) -> Option<&Mat> {
        self.nodes.get(var.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, `None` for parameters the root does not touch.
    pub fn params(&self) -> &[Option<Mat>] {
        &self.params
    }

    pub fn into_params(self) -> Vec<Option<Mat>> {
        self.params
    }
}

fn logsumexp_row(row: ndarray::ArrayView1<f64>) -> f64 {
    let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
    if !max.is_finite() {
        return max;
    }
    max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p [Mat], track_params: bool) -> Self {
        Self {
            params,
            track_params,
            param_vars: vec![None; params.len()],
            nodes: Vec::with_capacity(1024),
        }
    }

    /// A tape without parameters, for purely functional graphs.
    pub fn detached() -> Tape<'static> {
        Tape::new(&[], false)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Mat {
        let node = &self.nodes[var.0];
        match (&node.value, &node.op) {
            (Some(v), _) => v,
            (None, Op::Param(i)) => &self.params[*i],
            _ => unreachable!("node without value"),
        }
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, var: Var) -> f64 {
        let v = self.value(var);
        debug_assert_eq!(v.dim(), (1, 1));
        v[[0, 0]]
    }

    fn is_tracked(&self, var: Var) -> bool {
        self.nodes[var.0].tracked
    }

    fn push(&mut self, value: Mat, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node {
            value: Some(value),
            op,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Const, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&mut self, value: Mat) -> Var {
        self.push(value, Op::Input, true)
    }

    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        self.nodes.push(Node {
            value: None,
            op: Op::Param(index),
            tracked: self.track_params,
        });
        let var = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(var);
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        let t = self.is_tracked(a) || self.is_tracked(b);
        self.push(v, Op::MatMul(a, b), t)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.is_tracked(a) || self.is_tracked(b);
        self.push(v, Op::Add(a, b), t)
    }

    /// `a (m × n) + b (1 × n)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        let t = self.is_tracked(a) || self.is_tracked(b);
        self.push(v, Op::AddRow(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        let t = self.is_tracked(a) || self.is_tracked(b);
        self.push(v, Op::Mul(a, b), t)
    }

    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        let v = self.value(a) * &c;
        let t = self.is_tracked(a);
        self.push(v, Op::MulConst(a, c), t)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        let t = self.is_tracked(a);
        self.push(v, Op::Scale(a, k), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        let t = self.is_tracked(a);
        self.push(v, Op::Sigmoid(a), t)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        let t = self.is_tracked(a);
        self.push(v, Op::Tanh(a), t)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts differ in concat");
        let t = parts.iter().any(|&p| self.is_tracked(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), t)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let v = self.value(a).slice(s![.., start..end]).to_owned();
        let t = self.is_tracked(a);
        self.push(v, Op::SliceCols(a, start), t)
    }

    /// Row lookup into `table`; `None` yields a zero row.
    pub fn gather(&mut self, table: Var, rows: Vec<Option<usize>>) -> Var {
        let tv = self.value(table);
        let mut v = Mat::zeros((rows.len(), tv.ncols()));
        for (r, idx) in rows.iter().enumerate() {
            if let Some(i) = idx {
                v.row_mut(r).assign(&tv.row(*i));
            }
        }
        let t = self.is_tracked(table);
        self.push(v, Op::Gather(table, rows), t)
    }

    /// Row-wise select: rows with mask 1 come from `new`, mask 0 from `old`.
    pub fn blend(&mut self, new: Var, old: Var, mask: Vec<f64>) -> Var {
        let (a, b) = (self.value(new), self.value(old));
        let mut v = b.clone();
        for (r, &m) in mask.iter().enumerate() {
            if m == 1.0 {
                v.row_mut(r).assign(&a.row(r));
            } else if m != 0.0 {
                let mixed = &a.row(r) * m + &b.row(r) * (1.0 - m);
                v.row_mut(r).assign(&mixed);
            }
        }
        let t = self.is_tracked(new) || self.is_tracked(old);
        self.push(v, Op::Blend(new, old, mask), t)
    }

    /// Row softmax restricted to entries where `mask` is nonzero.
    pub fn masked_softmax(&mut self, a: Var, mask: &Mat) -> Var {
        let x = self.value(a);
        let mut v = Mat::zeros(x.dim());
        for ((xr, mr), mut vr) in x.outer_iter().zip(mask.outer_iter()).zip(v.outer_iter_mut()) {
            let max = xr
                .iter()
                .zip(mr.iter())
                .filter(|(_, &m)| m != 0.0)
                .fold(f64::NEG_INFINITY, |acc, (&x, _)| acc.max(x));
            let mut sum = 0.0;
            for ((o, &x), &m) in vr.iter_mut().zip(xr.iter()).zip(mr.iter()) {
                if m != 0.0 {
                    *o = (x - max).exp();
                    sum += *o;
                }
            }
            if sum > 0.0 {
                vr.mapv_inplace(|o| o / sum);
            }
        }
        let t = self.is_tracked(a);
        self.push(v, Op::MaskedSoftmax(a), t)
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut v = x.clone();
        for mut row in v.outer_iter_mut() {
            let lse = logsumexp_row(row.view());
            row.mapv_inplace(|x| x - lse);
        }
        let t = self.is_tracked(a);
        self.push(v, Op::LogSoftmax(a), t)
    }

    /// `a (m × n)` scaled row-wise by the column `c (m × 1)`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Var {
        let v = self.value(a) * self.value(c);
        let t = self.is_tracked(a) || self.is_tracked(c);
        self.push(v, Op::MulCol(a, c), t)
    }

    /// Stack `T` step matrices (`B × n`) into `(B·T) × n` with row `b*T + t`.
    pub fn stack_time(&mut self, steps: &[Var]) -> Var {
        let n_steps = steps.len();
        let first = self.value(steps[0]);
        let (batch, cols) = first.dim();
        let mut v = Mat::zeros((batch * n_steps, cols));
        for (t, &step) in steps.iter().enumerate() {
            let sv = self.value(step);
            for b in 0..batch {
                v.row_mut(b * n_steps + t).assign(&sv.row(b));
            }
        }
        let tr = steps.iter().any(|&p| self.is_tracked(p));
        self.push(v, Op::StackTime(steps.to_vec()), tr)
    }

    /// Extract step `t` (`B × n`) from a stacked `(B·T) × n` matrix.
    pub fn time_slice(&mut self, stacked: Var, t: usize, n_steps: usize) -> Var {
        let sv = self.value(stacked);
        let batch = sv.nrows() / n_steps;
        let mut v = Mat::zeros((batch, sv.ncols()));
        for b in 0..batch {
            v.row_mut(b).assign(&sv.row(b * n_steps + t));
        }
        let tr = self.is_tracked(stacked);
        self.push(v, Op::TimeSlice(stacked, t, n_steps), tr)
    }

    /// `out[b*T + j] = a[b*T + j] + q[b]`.
    pub fn repeat_add(&mut self, a: Var, q: Var, n_steps: usize) -> Var {
        let mut v = self.value(a).clone();
        let qv = self.value(q);
        for (r, mut row) in v.outer_iter_mut().enumerate() {
            row += &qv.row(r / n_steps);
        }
        let t = self.is_tracked(a) || self.is_tracked(q);
        self.push(v, Op::RepeatAdd(a, q, n_steps), t)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let x = self.value(a);
        let flat: Vec<f64> = x.iter().copied().collect();
        let v = Mat::from_shape_vec((rows, cols), flat).expect("reshape size mismatch");
        let t = self.is_tracked(a);
        self.push(v, Op::Reshape(a), t)
    }

    /// `out[b] = Σ_j weights[b, j] · values[b*T + j]` for weights `B × T`.
    pub fn attend(&mut self, weights: Var, values: Var) -> Var {
        let w = self.value(weights);
        let h = self.value(values);
        let (batch, n_steps) = w.dim();
        let mut v = Mat::zeros((batch, h.ncols()));
        for b in 0..batch {
            let mut out = v.row_mut(b);
            for j in 0..n_steps {
                let a = w[[b, j]];
                if a != 0.0 {
                    out.scaled_add(a, &h.row(b * n_steps + j));
                }
            }
        }
        let t = self.is_tracked(weights) || self.is_tracked(values);
        self.push(v, Op::Attend(weights, values), t)
    }

    /// `Σ_r w_r · KL(exp(target_r) ‖ exp(logq_r))` where both arguments are
    /// row-wise log-probabilities. Terms with zero target mass contribute 0.
    pub fn kl_rows(&mut self, logq: Var, target_logp: Mat, row_weights: Vec<f64>) -> Var {
        let q = self.value(logq);
        let mut total = 0.0;
        for ((qr, pr), &w) in q.outer_iter().zip(target_logp.outer_iter()).zip(&row_weights) {
            if w == 0.0 {
                continue;
            }
            let mut kl = 0.0;
            for (&lq, &lp) in qr.iter().zip(pr.iter()) {
                let p = lp.exp();
                if p > 0.0 {
                    kl += p * (lp - lq);
                }
            }
            total += w * kl;
        }
        let t = self.is_tracked(logq);
        self.push(Mat::from_elem((1, 1), total), Op::KlRows(logq, target_logp, row_weights), t)
    }

    /// `-Σ w · logp[row, col]` over the given entries.
    pub fn nll(&mut self, logp: Var, entries: Vec<(usize, usize, f64)>) -> Var {
        let lp = self.value(logp);
        let total: f64 = entries.iter().map(|&(r, c, w)| -w * lp[[r, c]]).sum();
        let t = self.is_tracked(logp);
        self.push(Mat::from_elem((1, 1), total), Op::Nll(logp, entries), t)
    }

    /// Reverse pass from a `1 × 1` root.
    pub fn backward(&self, root: Var) -> Gradients {
        let n = root.0 + 1;
        let mut grads: Vec<Option<Mat>> = (0..n).map(|_| None).collect();
        let mut params: Vec<Option<Mat>> = vec![None; self.params.len()];
        if !self.is_tracked(root) {
            return Gradients { nodes: grads, params };
        }
        grads[root.0] = Some(Mat::ones((1, 1)));

        for i in (0..n).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let g = match &node.op {
                Op::Input | Op::Const => continue,
                Op::Param(idx) => {
                    if let Some(g) = grads[i].take() {
                        accumulate(&mut params[*idx], g);
                    }
                    continue;
                }
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.propagate(i, &g, &mut grads);
        }
        Gradients {
            nodes: grads,
            params,
        }
    }

    fn send(&self, grads: &mut [Option<Mat>], var: Var, delta: Mat) {
        if self.is_tracked(var) {
            accumulate(&mut grads[var.0], delta);
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let out = self.nodes[i].value.as_ref().expect("interior node value");
        match &self.nodes[i].op {
            Op::Const | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                if self.is_tracked(*a) {
                    self.send(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.is_tracked(*b) {
                    self.send(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::AddRow(a, b) => {
                self.send(grads, *a, g.clone());
                if self.is_tracked(*b) {
                    self.send(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::Mul(a, b) => {
                if self.is_tracked(*a) {
                    self.send(grads, *a, g * self.value(*b));
                }
                if self.is_tracked(*b) {
                    self.send(grads, *b, g * self.value(*a));
                }
            }
            Op::MulConst(a, c) => self.send(grads, *a, g * c),
            Op::Scale(a, k) => self.send(grads, *a, g * *k),
            Op::Sigmoid(a) => {
                let d = Zip::from(g).and(out).map_collect(|&g, &y| g * y * (1.0 - y));
                self.send(grads, *a, d);
            }
            Op::Tanh(a) => {
                let d = Zip::from(g).and(out).map_collect(|&g, &y| g * (1.0 - y * y));
                self.send(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).ncols();
                    if self.is_tracked(p) {
                        self.send(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::SliceCols(a, start) => {
                if self.is_tracked(*a) {
                    let mut d = Mat::zeros(self.value(*a).dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                    self.send(grads, *a, d);
                }
            }
            Op::Gather(table, rows) => {
                if self.is_tracked(*table) {
                    let mut d = Mat::zeros(self.value(*table).dim());
                    for (r, idx) in rows.iter().enumerate() {
                        if let Some(k) = idx {
                            let mut dst = d.row_mut(*k);
                            dst += &g.row(r);
                        }
                    }
                    self.send(grads, *table, d);
                }
            }
            Op::Blend(new, old, mask) => {
                if self.is_tracked(*new) {
                    let mut d = g.clone();
                    for (mut row, &m) in d.outer_iter_mut().zip(mask) {
                        row.mapv_inplace(|x| x * m);
                    }
                    self.send(grads, *new, d);
                }
                if self.is_tracked(*old) {
                    let mut d = g.clone();
                    for (mut row, &m) in d.outer_iter_mut().zip(mask) {
                        row.mapv_inplace(|x| x * (1.0 - m));
                    }
                    self.send(grads, *old, d);
                }
            }
            Op::MaskedSoftmax(a) => {
                let mut d = Mat::zeros(g.dim());
                for ((gr, yr), mut dr) in g.outer_iter().zip(out.outer_iter()).zip(d.outer_iter_mut()) {
                    let dot: f64 = gr.iter().zip(yr.iter()).map(|(g, y)| g * y).sum();
                    for ((o, &g), &y) in dr.iter_mut().zip(gr.iter()).zip(yr.iter()) {
                        *o = y * (g - dot);
                    }
                }
                self.send(grads, *a, d);
            }
            Op::LogSoftmax(a) => {
                let mut d = g.clone();
                for ((mut dr, gr), yr) in d.outer_iter_mut().zip(g.outer_iter()).zip(out.outer_iter()) {
                    let gsum = gr.sum();
                    for (o, &y) in dr.iter_mut().zip(yr.iter()) {
                        *o -= y.exp() * gsum;
                    }
                }
                self.send(grads, *a, d);
            }
            Op::MulCol(a, c) => {
                if self.is_tracked(*a) {
                    self.send(grads, *a, g * self.value(*c));
                }
                if self.is_tracked(*c) {
                    let d = (g * self.value(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.send(grads, *c, d);
                }
            }
            Op::StackTime(steps) => {
                let n_steps = steps.len();
                let batch = g.nrows() / n_steps;
                for (t, &step) in steps.iter().enumerate() {
                    if !self.is_tracked(step) {
                        continue;
                    }
                    let mut d = Mat::zeros((batch, g.ncols()));
                    for b in 0..batch {
                        d.row_mut(b).assign(&g.row(b * n_steps + t));
                    }
                    self.send(grads, step, d);
                }
            }
            Op::TimeSlice(stacked, t, n_steps) => {
                let mut d = Mat::zeros(self.value(*stacked).dim());
                for b in 0..g.nrows() {
                    d.row_mut(b * n_steps + t).assign(&g.row(b));
                }
                self.send(grads, *stacked, d);
            }
            Op::RepeatAdd(a, q, n_steps) => {
                self.send(grads, *a, g.clone());
                if self.is_tracked(*q) {
                    let mut d = Mat::zeros(self.value(*q).dim());
                    for (r, row) in g.outer_iter().enumerate() {
                        let mut dst = d.row_mut(r / n_steps);
                        dst += &row;
                    }
                    self.send(grads, *q, d);
                }
            }
            Op::Reshape(a) => {
                let dim = self.value(*a).dim();
                let flat: Vec<f64> = g.iter().copied().collect();
                self.send(grads, *a, Mat::from_shape_vec(dim, flat).expect("reshape grad"));
            }
            Op::Attend(weights, values) => {
                let w = self.value(*weights);
                let h = self.value(*values);
                let (batch, n_steps) = w.dim();
                if self.is_tracked(*weights) {
                    let mut d = Mat::zeros((batch, n_steps));
                    for b in 0..batch {
                        for j in 0..n_steps {
                            d[[b, j]] = g.row(b).dot(&h.row(b * n_steps + j));
                        }
                    }
                    self.send(grads, *weights, d);
                }
                if self.is_tracked(*values) {
                    let mut d = Mat::zeros(h.dim());
                    for b in 0..batch {
                        for j in 0..n_steps {
                            let a = w[[b, j]];
                            if a != 0.0 {
                                d.row_mut(b * n_steps + j).scaled_add(a, &g.row(b));
                            }
                        }
                    }
                    self.send(grads, *values, d);
                }
            }
            Op::KlRows(logq, target, weights) => {
                let scale = g[[0, 0]];
                let mut d = Mat::zeros(target.dim());
                for ((mut dr, pr), &w) in d.outer_iter_mut().zip(target.outer_iter()).zip(weights) {
                    if w == 0.0 {
                        continue;
                    }
                    for (o, &lp) in dr.iter_mut().zip(pr.iter()) {
                        *o = -scale * w * lp.exp();
                    }
                }
                self.send(grads, *logq, d);
            }
            Op::Nll(logp, entries) => {
                let scale = g[[0, 0]];
                let mut d = Mat::zeros(self.value(*logp).dim());
                for &(r, c, w) in entries {
                    d[[r, c]] -= scale * w;
                }
                self.send(grads, *logp, d);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Mat>, delta: Mat) {
    match slot {
        Some(acc) => *acc += &delta,
        None => *slot = Some(delta),
    }
}
