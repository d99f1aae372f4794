//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a `1 × 1` node walks the record in reverse and
//! accumulates adjoints down to the leaves, whose gradients are read back
//! with [`Grads::get`]. Everything is single-threaded and deterministic.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Handle to a node recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Distance {
    SquaredEuclidean,
    Cosine,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    SubRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Square(Var),
    Log(Var),
    Exp(Var),
    Floor(Var, f64),
    Clamp(Var, f64, f64),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    SumAll(Var),
    MeanRows(Var),
    Pick(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    RowOuter(Var, Var),
    PairwiseSqDist(Var, Var),
    NormalizeRows(Var),
    Reverse(Var, f64),
}

struct Node {
    value: Mat,
    op: Op,
}

/// Recorded computation graph.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    exact: bool,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Grads {
    adjoints: Vec<Option<Mat>>,
}

impl Grads {
    /// Gradient of the root with respect to `v`, or `None` if `v` does not
    /// influence the root.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.adjoints.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A tape on which [`detach`](Self::detach) and
    /// [`reverse_grad`](Self::reverse_grad) are plain identities, so
    /// `backward` yields the true derivative of the recorded values. Used
    /// to check surrogate objectives against finite differences.
    pub fn exact() -> Self {
        Self {
            nodes: Vec::new(),
            exact: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        debug_assert_eq!(m.dim(), (1, 1));
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// Differentiable input (parameters, data we want gradients for).
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Same as a leaf; named separately so call sites read as stop-gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of `v`'s value with the gradient path cut.
    pub fn detach(&mut self, v: Var) -> Var {
        if self.exact {
            return v;
        }
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).t().as_standard_layout().into_owned();
        self.push(value, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        self.push(value, Op::Mul(a, b))
    }

    /// `a + row` with `row` (`1 × c`) broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) + self.value(row);
        self.push(value, Op::AddRow(a, row))
    }

    pub fn sub_row(&mut self, a: Var, row: Var) -> Var {
        let value = self.value(a) - self.value(row);
        self.push(value, Op::SubRow(a, row))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) * k;
        self.push(value, Op::Scale(a, k))
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Var {
        let value = self.value(a) + k;
        self.push(value, Op::AddScalar(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0));
        self.push(value, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(sigmoid);
        self.push(value, Op::Sigmoid(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        self.push(value, Op::Square(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::ln);
        self.push(value, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(f64::exp);
        self.push(value, Op::Exp(a))
    }

    /// Elementwise `max(a, floor)`; no gradient flows where the floor binds.
    pub fn floor(&mut self, a: Var, floor: f64) -> Var {
        let value = self.value(a).mapv(|x| x.max(floor));
        self.push(value, Op::Floor(a, floor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp(a, lo, hi))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Var {
        let value = log_softmax_rows(self.value(a));
        self.push(value, Op::LogSoftmaxRows(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Mat::from_elem((1, 1), self.value(a).sum());
        self.push(value, Op::SumAll(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// Column means, `b × c → 1 × c`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let value = m
            .mean_axis(Axis(0))
            .expect("mean_rows on empty matrix")
            .insert_axis(Axis(0));
        self.push(value, Op::MeanRows(a))
    }

    /// `out[i] = a[i, cols[i]]`, shape `b × 1`.
    pub fn pick(&mut self, a: Var, cols: Vec<usize>) -> Var {
        let m = self.value(a);
        assert_eq!(m.nrows(), cols.len(), "pick: one column per row");
        let value = Mat::from_shape_fn((cols.len(), 1), |(i, _)| m[[i, cols[i]]]);
        self.push(value, Op::Pick(a, cols))
    }

    pub fn select_rows(&mut self, a: Var, rows: Vec<usize>) -> Var {
        let value = self.value(a).select(Axis(0), &rows);
        self.push(value, Op::SelectRows(a, rows))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(0), &views).expect("concat_rows: column mismatch");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    /// Row-wise flattened outer product: `out[i, a·C + c] = f[i, a] · p[i, c]`.
    pub fn row_outer(&mut self, f: Var, p: Var) -> Var {
        let value = row_outer(self.value(f), self.value(p));
        self.push(value, Op::RowOuter(f, p))
    }

    /// Squared Euclidean distance between every row of `z` and every row of `e`.
    pub fn pairwise_sq_dist(&mut self, z: Var, e: Var) -> Var {
        let value = pairwise_sq_dist(self.value(z), self.value(e));
        self.push(value, Op::PairwiseSqDist(z, e))
    }

    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let value = normalize_rows(self.value(a));
        self.push(value, Op::NormalizeRows(a))
    }

    /// Cosine distance `1 − cos(z_i, e_k)` for every row pair.
    pub fn pairwise_cos_dist(&mut self, z: Var, e: Var) -> Var {
        let zn = self.normalize_rows(z);
        let en = self.normalize_rows(e);
        let et = self.transpose(en);
        let sim = self.matmul(zn, et);
        let neg = self.scale(sim, -1.0);
        self.add_scalar(neg, 1.0)
    }

    pub fn pairwise_dist(&mut self, z: Var, e: Var, kind: Distance) -> Var {
        match kind {
            Distance::SquaredEuclidean => self.pairwise_sq_dist(z, e),
            Distance::Cosine => self.pairwise_cos_dist(z, e),
        }
    }

    /// Gradient reversal: identity forward, upstream gradient times `−lambda`
    /// backward.
    pub fn reverse_grad(&mut self, a: Var, lambda: f64) -> Var {
        if self.exact {
            return a;
        }
        let value = self.value(a).clone();
        self.push(value, Op::Reverse(a, lambda))
    }

    /// Reverse sweep from a scalar root. Adjoints are retained for leaves
    /// only; intermediate adjoints are dropped once propagated.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(self.shape(root), (1, 1), "backward root must be 1 × 1");
        let mut adj: Vec<Option<Mat>> = vec![None; root.0 + 1];
        adj[root.0] = Some(Mat::from_elem((1, 1), 1.0));
        for idx in (0..=root.0).rev() {
            if matches!(self.nodes[idx].op, Op::Leaf) {
                continue;
            }
            if let Some(g) = adj[idx].take() {
                self.propagate(idx, g, &mut adj);
            }
        }
        Grads { adjoints: adj }
    }

    fn propagate(&self, idx: usize, g: Mat, adj: &mut [Option<Mat>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let ga = g.dot(&self.value(*b).t());
                let gb = self.value(*a).t().dot(&g);
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::Transpose(a) => accumulate(adj, *a, g.t().as_standard_layout().into_owned()),
            Op::Add(a, b) => {
                accumulate(adj, *b, g.clone());
                accumulate(adj, *a, g);
            }
            Op::Sub(a, b) => {
                accumulate(adj, *b, -&g);
                accumulate(adj, *a, g);
            }
            Op::Mul(a, b) => {
                let ga = &g * self.value(*b);
                let gb = &g * self.value(*a);
                accumulate(adj, *a, ga);
                accumulate(adj, *b, gb);
            }
            Op::AddRow(a, row) => {
                let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(adj, *row, gr);
                accumulate(adj, *a, g);
            }
            Op::SubRow(a, row) => {
                let gr = -g.sum_axis(Axis(0)).insert_axis(Axis(0));
                accumulate(adj, *row, gr);
                accumulate(adj, *a, g);
            }
            Op::Scale(a, k) => accumulate(adj, *a, g * *k),
            Op::AddScalar(a) => accumulate(adj, *a, g),
            Op::Relu(a) => {
                let x = self.value(*a);
                let mut ga = g;
                ga.zip_mut_with(x, |gi, &xi| {
                    if xi <= 0.0 {
                        *gi = 0.0
                    }
                });
                accumulate(adj, *a, ga);
            }
            Op::Sigmoid(a) => {
                let mut ga = g;
                ga.zip_mut_with(&node.value, |gi, &y| *gi *= y * (1.0 - y));
                accumulate(adj, *a, ga);
            }
            Op::Square(a) => {
                let mut ga = g;
                ga.zip_mut_with(self.value(*a), |gi, &x| *gi *= 2.0 * x);
                accumulate(adj, *a, ga);
            }
            Op::Log(a) => {
                let mut ga = g;
                ga.zip_mut_with(self.value(*a), |gi, &x| *gi /= x);
                accumulate(adj, *a, ga);
            }
            Op::Exp(a) => {
                let ga = g * &node.value;
                accumulate(adj, *a, ga);
            }
            Op::Floor(a, floor) => {
                let mut ga = g;
                ga.zip_mut_with(self.value(*a), |gi, &x| {
                    if x < *floor {
                        *gi = 0.0
                    }
                });
                accumulate(adj, *a, ga);
            }
            Op::Clamp(a, lo, hi) => {
                let mut ga = g;
                ga.zip_mut_with(self.value(*a), |gi, &x| {
                    if x < *lo || x > *hi {
                        *gi = 0.0
                    }
                });
                accumulate(adj, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let mut ga = &g * y;
                for (mut row, (grow, yrow)) in ga
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(y.rows()))
                {
                    let dot: f64 = grow.iter().zip(yrow.iter()).map(|(a, b)| a * b).sum();
                    row.zip_mut_with(&yrow, |r, &yi| *r -= yi * dot);
                }
                accumulate(adj, *a, ga);
            }
            Op::LogSoftmaxRows(a) => {
                let probs = node.value.mapv(f64::exp);
                let mut ga = g.clone();
                for (mut row, (grow, prow)) in ga
                    .rows_mut()
                    .into_iter()
                    .zip(g.rows().into_iter().zip(probs.rows()))
                {
                    let total: f64 = grow.sum();
                    row.zip_mut_with(&prow, |r, &p| *r -= p * total);
                }
                accumulate(adj, *a, ga);
            }
            Op::SumAll(a) => {
                let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                accumulate(adj, *a, ga);
            }
            Op::MeanRows(a) => {
                let (n, c) = self.shape(*a);
                let ga = Mat::from_shape_fn((n, c), |(_, j)| g[[0, j]] / n as f64);
                accumulate(adj, *a, ga);
            }
            Op::Pick(a, cols) => {
                let mut ga = Mat::zeros(self.shape(*a));
                for (i, &c) in cols.iter().enumerate() {
                    ga[[i, c]] += g[[i, 0]];
                }
                accumulate(adj, *a, ga);
            }
            Op::SelectRows(a, rows) => {
                let mut ga = Mat::zeros(self.shape(*a));
                for (i, &r) in rows.iter().enumerate() {
                    let mut dst = ga.row_mut(r);
                    dst += &g.row(i);
                }
                accumulate(adj, *a, ga);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p).0;
                    let ga = g.slice(s![offset..offset + n, ..]).to_owned();
                    accumulate(adj, p, ga);
                    offset += n;
                }
            }
            Op::RowOuter(f, p) => {
                let fv = self.value(*f);
                let pv = self.value(*p);
                let (b, df) = fv.dim();
                let c = pv.ncols();
                let mut gf = Mat::zeros((b, df));
                let mut gp = Mat::zeros((b, c));
                for i in 0..b {
                    for a in 0..df {
                        for k in 0..c {
                            let gi = g[[i, a * c + k]];
                            gf[[i, a]] += gi * pv[[i, k]];
                            gp[[i, k]] += gi * fv[[i, a]];
                        }
                    }
                }
                accumulate(adj, *f, gf);
                accumulate(adj, *p, gp);
            }
            Op::PairwiseSqDist(z, e) => {
                let zv = self.value(*z);
                let ev = self.value(*e);
                let mut gz = Mat::zeros(zv.dim());
                let mut ge = Mat::zeros(ev.dim());
                for i in 0..zv.nrows() {
                    for k in 0..ev.nrows() {
                        let w = 2.0 * g[[i, k]];
                        if w == 0.0 {
                            continue;
                        }
                        for j in 0..zv.ncols() {
                            let diff = w * (zv[[i, j]] - ev[[k, j]]);
                            gz[[i, j]] += diff;
                            ge[[k, j]] -= diff;
                        }
                    }
                }
                accumulate(adj, *z, gz);
                accumulate(adj, *e, ge);
            }
            Op::NormalizeRows(a) => {
                let x = self.value(*a);
                let y = &node.value;
                let mut ga = Mat::zeros(x.dim());
                for i in 0..x.nrows() {
                    let norm = x.row(i).dot(&x.row(i)).sqrt().max(NORM_EPS);
                    let dot = g.row(i).dot(&y.row(i));
                    for j in 0..x.ncols() {
                        ga[[i, j]] = (g[[i, j]] - y[[i, j]] * dot) / norm;
                    }
                }
                accumulate(adj, *a, ga);
            }
            Op::Reverse(a, lambda) => accumulate(adj, *a, g * -*lambda),
        }
    }
}

fn accumulate(adj: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut adj[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
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

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| (x - max).exp());
        let total = row.sum();
        row.mapv_inplace(|x| x / total);
    }
    out
}

pub fn log_softmax_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&x| (x - max).exp()).sum::<f64>().ln();
        row.mapv_inplace(|x| x - lse);
    }
    out
}

pub fn row_outer(f: &Mat, p: &Mat) -> Mat {
    assert_eq!(f.nrows(), p.nrows(), "row_outer: row count mismatch");
    let (b, df) = f.dim();
    let c = p.ncols();
    Mat::from_shape_fn((b, df * c), |(i, idx)| f[[i, idx / c]] * p[[i, idx % c]])
}

pub fn pairwise_sq_dist(z: &Mat, e: &Mat) -> Mat {
    assert_eq!(z.ncols(), e.ncols(), "pairwise distance: dim mismatch");
    Mat::from_shape_fn((z.nrows(), e.nrows()), |(i, k)| {
        z.row(i)
            .iter()
            .zip(e.row(k).iter())
            .map(|(a, b)| (a - b) * (a - b))
            .sum()
    })
}

pub fn normalize_rows(m: &Mat) -> Mat {
    let mut out = m.clone();
    for mut row in out.rows_mut() {
        let norm = row.dot(&row).sqrt().max(NORM_EPS);
        row.mapv_inplace(|x| x / norm);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize), seed: u64) -> Mat {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::from_shape_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of `build` with respect to each input.
    fn fd_check(inputs: &[Mat], build: impl Fn(&mut Tape, &[Var]) -> Var) {
        let eval = |vals: &[Mat]| {
            let mut tape = Tape::new();
            let vars: Vec<Var> = vals.iter().map(|m| tape.leaf(m.clone())).collect();
            let out = build(&mut tape, &vars);
            (tape, vars, out)
        };
        let (tape, vars, out) = eval(inputs);
        let grads = tape.backward(out);
        let eps = 1e-6;
        for (t, input) in inputs.iter().enumerate() {
            let analytic = grads.get_or_zeros(vars[t], input.dim());
            for idx in 0..input.len() {
                let mut plus = inputs.to_vec();
                plus[t].as_slice_mut().unwrap()[idx] += eps;
                let mut minus = inputs.to_vec();
                minus[t].as_slice_mut().unwrap()[idx] -= eps;
                let (tp, _, op) = eval(&plus);
                let (tm, _, om) = eval(&minus);
                let fd = (tp.scalar(op) - tm.scalar(om)) / (2.0 * eps);
                let an = analytic.iter().nth(idx).copied().unwrap();
                assert!(
                    (an - fd).abs() <= 1e-6 * (1.0 + fd.abs()),
                    "input {t} elem {idx}: analytic {an} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let a = random((3, 4), 1);
        let b = random((4, 2), 2);
        let row = random((1, 2), 3);
        fd_check(&[a, b, row], |t, v| {
            let m = t.matmul(v[0], v[1]);
            let m = t.add_row(m, v[2]);
            let s = t.sigmoid(m);
            let q = t.square(s);
            let e = t.exp(q);
            let r = t.sub_row(e, v[2]);
            let tr = t.transpose(r);
            let sc = t.scale(tr, 0.7);
            let sh = t.add_scalar(sc, 2.0);
            let l = t.log(sh);
            t.sum(l)
        });
    }

    #[test]
    fn softmax_family() {
        let a = random((3, 5), 4);
        let w = random((3, 5), 5);
        fd_check(&[a, w], |t, v| {
            let p = t.softmax_rows(v[0]);
            let lp = t.log_softmax_rows(v[0]);
            let m = t.mul(p, v[1]);
            let n = t.mul(lp, p);
            let s = t.add(m, n);
            let picked = t.pick(s, vec![0, 4, 2]);
            t.mean(picked)
        });
    }

    #[test]
    fn row_reshaping_ops() {
        let a = random((4, 3), 6);
        let b = random((2, 3), 7);
        fd_check(&[a, b], |t, v| {
            let sel = t.select_rows(v[0], vec![3, 1, 1]);
            let cat = t.concat_rows(&[sel, v[1]]);
            let mean = t.mean_rows(cat);
            let centered = t.sub_row(cat, mean);
            let sq = t.square(centered);
            let var = t.mean_rows(sq);
            let fl = t.floor(var, 1e-6);
            let lg = t.log(fl);
            t.sum(lg)
        });
    }

    #[test]
    fn outer_and_distances() {
        let f = random((3, 4), 8);
        let p = random((3, 2), 9);
        let e = random((5, 4), 10);
        fd_check(&[f, p, e], |t, v| {
            let h = t.row_outer(v[0], v[1]);
            let hs = t.sum(h);
            let d = t.pairwise_sq_dist(v[0], v[2]);
            let c = t.pairwise_cos_dist(v[0], v[2]);
            let dc = t.mul(d, c);
            let s = t.sum(dc);
            t.add(s, hs)
        });
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut tape = Tape::new();
        let x = tape.leaf(ndarray::array![[-2.0, 0.5, 3.0]]);
        let c = tape.clamp(x, 0.0, 1.0);
        let s = tape.sum(c);
        let g = tape.backward(s);
        assert_eq!(g.get(x).unwrap(), &ndarray::array![[0.0, 1.0, 0.0]]);
    }

    #[test]
    fn reversal_is_identity_forward_and_negated_backward() {
        let x0 = random((2, 3), 11);
        for lambda in [1.0, 0.5] {
            let mut plain = Tape::new();
            let xp = plain.leaf(x0.clone());
            let qp = plain.square(xp);
            let lp = plain.sum(qp);
            let gp = plain.backward(lp);

            let mut rev = Tape::new();
            let xr = rev.leaf(x0.clone());
            let r = rev.reverse_grad(xr, lambda);
            assert_eq!(rev.value(r), &x0);
            let qr = rev.square(r);
            let lr = rev.sum(qr);
            let gr = rev.backward(lr);
            let expected = gp.get(xp).unwrap() * -lambda;
            assert_eq!(gr.get(xr).unwrap(), &expected);
        }
    }

    #[test]
    fn detach_cuts_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(ndarray::array![[2.0]]);
        let d = tape.detach(x);
        let y = tape.mul(x, d);
        let g = tape.backward(y);
        assert_eq!(g.get(x).unwrap()[[0, 0]], 2.0);
        assert!(g.get(d).is_some());
    }

    #[test]
    fn softmax_is_stable_for_extreme_logits() {
        for scale in [1e-30, 1.0, 1e30] {
            let m = ndarray::array![[0.0, -scale, scale], [scale, scale, -scale]];
            let p = softmax_rows(&m);
            for row in p.rows() {
                assert!((row.sum() - 1.0).abs() < 1e-9);
                assert!(row.iter().all(|v| v.is_finite()));
            }
        }
    }
}
