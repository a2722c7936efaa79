//! Minimal reverse-mode differentiation over row-major matrices.
//!
//! Every value on the tape is a 2-D `f64` matrix whose rows are items
//! (points, nodes or edges) and whose columns are features. Operations record
//! their inputs; [`Tape::backward`] walks the records in reverse and
//! accumulates gradients for every parameter leaf reachable from the loss.

use std::collections::HashMap;

use ndarray::{s, Array2, Axis};

/// Index of a learnable tensor in a parameter store.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    /// `x · wᵀ + b`
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Relu(Var),
    Concat(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        rows: Vec<usize>,
    },
    /// Row index of `x` chosen per output element, `None` for empty groups.
    GroupMax {
        x: Var,
        argmax: Vec<Option<usize>>,
    },
    SoftmaxChunks {
        x: Var,
        chunk: usize,
    },
    Mul(Var, Var),
    Add(Var, Var),
    Scale(Var, f64),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Array2<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("non-finite value produced by {op}")]
pub struct NonFinite {
    pub op: &'static str,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<ParamId, Var>,
    non_finite: Option<&'static str>,
}

/// Row-wise softmax over contiguous column chunks of width `chunk`, with
/// the chunk maximum subtracted before exponentiation.
pub fn softmax_chunks(x: &Array2<f64>, chunk: usize) -> Array2<f64> {
    assert!(
        chunk > 0 && x.ncols().is_multiple_of(chunk),
        "chunk width must divide the columns"
    );
    let mut out = x.as_standard_layout().into_owned();
    for mut row in out.rows_mut() {
        let slice = row.as_slice_mut().expect("standard layout");
        for part in slice.chunks_mut(chunk) {
            softmax_in_place(part);
        }
    }
    out
}

pub fn softmax_in_place(v: &mut [f64]) {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in v.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in v.iter_mut() {
        *x /= sum;
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, name: &'static str) -> Var {
        if self.non_finite.is_none() && !value.iter().all(|v| v.is_finite()) {
            self.non_finite = Some(name);
        }
        let value = if value.is_standard_layout() {
            value
        } else {
            value.as_standard_layout().into_owned()
        };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Fails if any recorded operation produced NaN or infinity.
    pub fn check(&self) -> Result<(), NonFinite> {
        match self.non_finite {
            Some(op) => Err(NonFinite { op }),
            None => Ok(()),
        }
    }

    /// Constant input.
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, "input")
    }

    /// Learnable tensor; repeated calls with the same id share one leaf.
    pub fn param(&mut self, id: ParamId, value: &Array2<f64>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Param, "parameter");
        self.params.insert(id, v);
        v
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        assert_eq!(xv.ncols(), wv.ncols(), "linear: input width mismatch");
        assert_eq!(bv.shape(), &[1, wv.nrows()], "linear: bias shape mismatch");
        let mut y = xv.dot(&wv.t());
        y += bv;
        self.push(y, Op::Linear { x, w, b }, "linear")
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let y = self.value(x).mapv(|v| v.max(0.0));
        self.push(y, Op::Relu(x), "relu")
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let y = ndarray::concatenate(Axis(1), &views).expect("concat: row count mismatch");
        self.push(y, Op::Concat(parts.to_vec()), "concat")
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let y = self.value(x).slice(s![.., start..end]).to_owned();
        self.push(y, Op::SliceCols { x, start }, "slice")
    }

    pub fn gather(&mut self, x: Var, rows: &[usize]) -> Var {
        let y = self.value(x).select(Axis(0), rows);
        self.push(y, Op::Gather { x, rows: rows.to_vec() }, "gather")
    }

    /// Per group, the element-wise maximum over the rows assigned to it.
    /// Empty groups produce zeros. Ties resolve to the earliest row.
    pub fn group_max(&mut self, x: Var, groups: &[usize], n_groups: usize) -> Var {
        let xv = self.value(x);
        assert_eq!(xv.nrows(), groups.len(), "group_max: one group per row");
        let cols = xv.ncols();
        let mut y = Array2::<f64>::zeros((n_groups, cols));
        let mut argmax: Vec<Option<usize>> = vec![None; n_groups * cols];
        for (r, &g) in groups.iter().enumerate() {
            let row = xv.row(r);
            for c in 0..cols {
                let slot = &mut argmax[g * cols + c];
                if slot.is_none() || row[c] > y[[g, c]] {
                    *slot = Some(r);
                    y[[g, c]] = row[c];
                }
            }
        }
        self.push(y, Op::GroupMax { x, argmax }, "group_max")
    }

    pub fn softmax_chunks(&mut self, x: Var, chunk: usize) -> Var {
        let y = softmax_chunks(self.value(x), chunk);
        self.push(y, Op::SoftmaxChunks { x, chunk }, "softmax")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) * self.value(b);
        self.push(y, Op::Mul(a, b), "mul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let y = self.value(a) + self.value(b);
        self.push(y, Op::Add(a, b), "add")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let y = self.value(x) * factor;
        self.push(y, Op::Scale(x, factor), "scale")
    }

    /// Mean softmax cross-entropy over the rows that carry a label, as a
    /// 1×1 value. With no labelled rows the loss is zero.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.nrows(), labels.len(), "cross_entropy: one label per row");
        let probs = softmax_chunks(lv, lv.ncols().max(1));
        let mut total = 0.0;
        let mut count = 0;
        for (r, label) in labels.iter().enumerate() {
            if let Some(c) = *label {
                assert!(c < lv.ncols(), "cross_entropy: label out of range");
                let row = lv.row(r);
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                total += lse - row[c];
                count += 1;
            }
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
            count,
        };
        self.push(Array2::from_elem((1, 1), loss), op, "cross_entropy")
    }

    /// Gradients of the 1×1 value `loss` with respect to every parameter
    /// leaf. Parameters that do not influence the loss get zero gradients.
    pub fn backward(&self, loss: Var) -> HashMap<ParamId, Array2<f64>> {
        assert_eq!(self.value(loss).shape(), &[1, 1], "backward needs a scalar");
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Param => {
                    grads[i] = Some(dy);
                }
                Op::Linear { x, w, b } => {
                    let dx = dy.dot(self.value(*w));
                    let dw = dy.t().dot(self.value(*x));
                    let db = dy.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *x, dx);
                    acc(&mut grads, *w, dw);
                    acc(&mut grads, *b, db);
                }
                Op::Relu(x) => {
                    let mut dx = dy;
                    dx.zip_mut_with(self.value(*x), |d, &v| {
                        if v <= 0.0 {
                            *d = 0.0;
                        }
                    });
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        acc(&mut grads, p, dy.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::SliceCols { x, start } => {
                    let xv = self.value(*x);
                    let mut dx = Array2::zeros(xv.raw_dim());
                    dx.slice_mut(s![.., *start..*start + dy.ncols()]).assign(&dy);
                    acc(&mut grads, *x, dx);
                }
                Op::Gather { x, rows } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    for (r, &src) in rows.iter().enumerate() {
                        let mut target = dx.row_mut(src);
                        target += &dy.row(r);
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::GroupMax { x, argmax } => {
                    let mut dx = Array2::zeros(self.value(*x).raw_dim());
                    let cols = dy.ncols();
                    for (k, src) in argmax.iter().enumerate() {
                        if let Some(r) = src {
                            dx[[*r, k % cols]] += dy[[k / cols, k % cols]];
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SoftmaxChunks { x, chunk } => {
                    let y = &self.nodes[i].value;
                    let mut dx = Array2::zeros(y.raw_dim());
                    for r in 0..y.nrows() {
                        for c0 in (0..y.ncols()).step_by(*chunk) {
                            let dot: f64 = (c0..c0 + chunk).map(|c| dy[[r, c]] * y[[r, c]]).sum();
                            for c in c0..c0 + chunk {
                                dx[[r, c]] = y[[r, c]] * (dy[[r, c]] - dot);
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Mul(a, b) => {
                    let da = &dy * self.value(*b);
                    let db = &dy * self.value(*a);
                    acc(&mut grads, *a, da);
                    acc(&mut grads, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *a, dy.clone());
                    acc(&mut grads, *b, dy);
                }
                Op::Scale(x, f) => {
                    acc(&mut grads, *x, dy * *f);
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    count,
                } => {
                    let mut dx = Array2::zeros(probs.raw_dim());
                    if *count > 0 {
                        let g = dy[[0, 0]] / *count as f64;
                        for (r, label) in labels.iter().enumerate() {
                            if let Some(c) = *label {
                                let mut row = dx.row_mut(r);
                                row.assign(&probs.row(r));
                                row[c] -= 1.0;
                                row *= g;
                            }
                        }
                    }
                    acc(&mut grads, *logits, dx);
                }
            }
        }

        self.params
            .iter()
            .map(|(&id, &v)| {
                let g = grads[..]
                    .get(v.0)
                    .and_then(|g| g.clone())
                    .unwrap_or_else(|| Array2::zeros(self.value(v).raw_dim()));
                (id, g)
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    /// Central differences of `f` with respect to every entry of `x`.
    fn numeric_grad(x: &Array2<f64>, f: impl Fn(&Array2<f64>) -> f64) -> Array2<f64> {
        let h = 1e-6;
        let mut g = Array2::zeros(x.raw_dim());
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut plus = x.clone();
            plus[[r, c]] += h;
            let mut minus = x.clone();
            minus[[r, c]] -= h;
            g[[r, c]] = (f(&plus) - f(&minus)) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(a: &Array2<f64>, b: &Array2<f64>) {
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6 * (1.0 + x.abs()), "{a} vs {b}");
        }
    }

    fn pipeline(tape: &mut Tape, w: &Array2<f64>, x: &Array2<f64>) -> Var {
        let xv = tape.leaf(x.clone());
        let wv = tape.param(ParamId(0), w);
        let bv = tape.leaf(array![[0.1, -0.2, 0.3, 0.0]]);
        let h = tape.linear(xv, wv, bv);
        let h = tape.relu(h);
        let sm = tape.softmax_chunks(h, 2);
        let prod = tape.mul(sm, h);
        let cat = tape.concat(&[prod, h]);
        let sl = tape.slice_cols(cat, 1, 6);
        let gathered = tape.gather(sl, &[2, 0, 1, 2]);
        let pooled = tape.group_max(gathered, &[0, 1, 0, 2], 4);
        let logits = tape.scale(pooled, 1.5);
        let logits = tape.add(logits, logits);
        tape.cross_entropy(logits, &[Some(1), None, Some(4), Some(0)])
    }

    #[test]
    fn backward_matches_central_differences() {
        let w = array![[0.5, -0.3], [0.2, 0.8], [-0.7, 0.4], [0.9, 0.1]];
        let x = array![[1.0, 2.0], [-0.5, 0.3], [0.7, -1.2]];
        let mut tape = Tape::new();
        let loss = pipeline(&mut tape, &w, &x);
        let grads = tape.backward(loss);
        let numeric = numeric_grad(&w, |w| {
            let mut t = Tape::new();
            let l = pipeline(&mut t, w, &x);
            t.value(l)[[0, 0]]
        });
        assert_grad_close(&grads[&ParamId(0)], &numeric);
    }

    #[test]
    fn unreachable_parameter_has_zero_gradient() {
        let mut tape = Tape::new();
        let p = tape.param(ParamId(1), &array![[1.0, 2.0]]);
        let unused = tape.param(ParamId(2), &array![[3.0]]);
        let loss = tape.cross_entropy(p, &[Some(0)]);
        let grads = tape.backward(loss);
        assert_eq!(grads[&ParamId(2)], Array2::<f64>::zeros((1, 1)));
        assert!(grads[&ParamId(1)][[0, 0]] < 0.0);
        let _ = unused;
    }

    #[test]
    fn group_max_empty_group_is_zero_and_ties_pick_first_row() {
        let mut tape = Tape::new();
        let x = tape.param(ParamId(0), &array![[1.0, 5.0], [1.0, 2.0]]);
        let y = tape.group_max(x, &[0, 0], 2);
        assert_eq!(tape.value(y), &array![[1.0, 5.0], [0.0, 0.0]]);
        let loss = tape.cross_entropy(y, &[Some(0), None]);
        let g = &tape.backward(loss)[&ParamId(0)];
        assert_eq!(g[[1, 0]], 0.0);
        assert!(g[[0, 0]] != 0.0);
    }

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::zeros((3, 20)));
        let l = tape.cross_entropy(x, &[Some(0), Some(7), Some(19)]);
        assert!((tape.value(l)[[0, 0]] - 20f64.ln()).abs() < 1e-12);
        let x = tape.leaf(Array2::zeros((0, 4)));
        let l = tape.cross_entropy(x, &[]);
        assert_eq!(tape.value(l)[[0, 0]], 0.0);
    }

    #[test]
    fn non_finite_values_are_reported() {
        let mut tape = Tape::new();
        let a = tape.leaf(array![[f64::MAX]]);
        tape.scale(a, 10.0);
        assert_eq!(tape.check(), Err(NonFinite { op: "scale" }));
    }

    #[test]
    fn saturated_softmax_is_stable() {
        let y = softmax_chunks(&array![[1000.0, 0.0, -1000.0, 5.0]], 4);
        assert!(y.iter().all(|v| v.is_finite()));
        assert!((y[[0, 0]] - 1.0).abs() < 1e-12);
    }
}
