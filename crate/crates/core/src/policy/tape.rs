//! Reverse-mode differentiation over dense row-major matrices.
//!
//! Operations append nodes to a [`Tape`]; [`Tape::backward`] walks the
//! nodes in reverse and accumulates parameter gradients. Parameters are
//! borrowed from [`PolicyParams`], never copied.

use ndarray::{s, Array1, Array2, Axis};

use super::params::{Gradients, ParamId, PolicyParams};
use crate::error::{Error, Result};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

enum Op {
    Const,
    Param(ParamId),
    MatMul(NodeId, NodeId),
    /// `a · bᵀ`
    MatMulT(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// Adds a `1 × m` row to every row.
    AddRow(NodeId, NodeId),
    Scale(NodeId, f64),
    Gelu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Array2<f64>, inv_std: Array1<f64> },
    CausalSoftmax(NodeId),
    /// Each output row is a weighted sum of table rows.
    WeightedRows { table: NodeId, rows: Vec<Vec<(usize, f64)>> },
    ConcatCols(NodeId, NodeId),
    VStack(NodeId, NodeId),
    /// `base` with row `positions[k]` replaced by row `k` of `src`.
    ScatterRows { base: NodeId, src: NodeId, positions: Vec<usize> },
    SelectRows { x: NodeId, rows: Vec<usize> },
    /// Mean negative log-likelihood of `targets` under row-wise softmax.
    CrossEntropy { logits: NodeId, targets: Vec<usize>, probs: Array2<f64> },
    WeightedSum(Vec<(NodeId, f64)>),
    HalfSquaredNorm(NodeId),
}

struct Node {
    value: Option<Array2<f64>>,
    op: Op,
}

pub struct Tape<'p> {
    params: &'p PolicyParams,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<NodeId>>,
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

/// Row-wise layer norm; returns `(y, xhat, inv_std)`.
pub fn layer_norm(x: &Array2<f64>, gain: &Array2<f64>, bias: &Array2<f64>) -> (Array2<f64>, Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.clone();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, inv) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *inv = 1.0 / (var + LN_EPS).sqrt();
        let s = *inv;
        row.mapv_inplace(|v| v * s);
    }
    let y = &xhat * gain + bias;
    (y, xhat, inv_std)
}

/// Row softmax with entries above the diagonal masked out.
pub fn causal_softmax(x: &Array2<f64>) -> Array2<f64> {
    causal_softmax_offset(x, 0)
}

/// Row `r` may attend to columns `0..=r + offset`.
pub fn causal_softmax_offset(x: &Array2<f64>, offset: usize) -> Array2<f64> {
    let mut y = Array2::zeros(x.raw_dim());
    for (r, (src, mut dst)) in x.rows().into_iter().zip(y.rows_mut()).enumerate() {
        let visible = (r + offset + 1).min(x.ncols());
        let m = src.slice(s![..visible]).fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let mut total = 0.0;
        for c in 0..visible {
            let e = (src[c] - m).exp();
            dst[c] = e;
            total += e;
        }
        dst.slice_mut(s![..visible]).mapv_inplace(|v| v / total);
    }
    y
}

pub fn softmax_rows(x: &Array2<f64>) -> Array2<f64> {
    let mut y = x.clone();
    for mut row in y.rows_mut() {
        let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - m).exp());
        let total = row.sum();
        row.mapv_inplace(|v| v / total);
    }
    y
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p PolicyParams) -> Tape<'p> {
        Tape { params, nodes: Vec::new(), param_nodes: vec![None; params.tensors.len()] }
    }

    pub fn params(&self) -> &'p PolicyParams {
        self.params
    }

    pub fn value(&self, id: NodeId) -> &Array2<f64> {
        match &self.nodes[id].op {
            Op::Param(p) => &self.params.tensors[*p],
            _ => self.nodes[id].value.as_ref().expect("non-parameter nodes own their value"),
        }
    }

    /// Scalar value of a `1 × 1` node.
    pub fn scalar(&self, id: NodeId) -> f64 {
        self.value(id)[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> NodeId {
        self.nodes.push(Node { value: Some(value), op });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Array2<f64>) -> NodeId {
        self.push(value, Op::Const)
    }

    pub fn param(&mut self, id: ParamId) -> NodeId {
        if let Some(n) = self.param_nodes[id] {
            return n;
        }
        self.nodes.push(Node { value: None, op: Op::Param(id) });
        let n = self.nodes.len() - 1;
        self.param_nodes[id] = Some(n);
        n
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_t(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, row: NodeId) -> NodeId {
        let v = self.value(a) + self.value(row);
        self.push(v, Op::AddRow(a, row))
    }

    pub fn scale(&mut self, a: NodeId, s: f64) -> NodeId {
        let v = self.value(a) * s;
        self.push(v, Op::Scale(a, s))
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).mapv(gelu);
        self.push(v, Op::Gelu(a))
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let (y, xhat, inv_std) = layer_norm(self.value(x), self.value(gain), self.value(bias));
        self.push(y, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn causal_softmax(&mut self, a: NodeId) -> NodeId {
        let v = causal_softmax(self.value(a));
        self.push(v, Op::CausalSoftmax(a))
    }

    pub fn weighted_rows(&mut self, table: NodeId, rows: Vec<Vec<(usize, f64)>>) -> NodeId {
        let t = self.value(table);
        let mut v = Array2::zeros((rows.len(), t.ncols()));
        for (mut out, terms) in v.rows_mut().into_iter().zip(&rows) {
            for &(r, w) in terms {
                out.scaled_add(w, &t.row(r));
            }
        }
        self.push(v, Op::WeightedRows { table, rows })
    }

    pub fn gather_rows(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        self.weighted_rows(table, ids.iter().map(|&i| vec![(i, 1.0)]).collect())
    }

    pub fn concat_cols(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(Axis(1), &[self.value(a).view(), self.value(b).view()]).expect("row counts agree");
        self.push(v, Op::ConcatCols(a, b))
    }

    pub fn vstack(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = ndarray::concatenate(Axis(0), &[self.value(a).view(), self.value(b).view()]).expect("column counts agree");
        self.push(v, Op::VStack(a, b))
    }

    pub fn scatter_rows(&mut self, base: NodeId, src: NodeId, positions: Vec<usize>) -> NodeId {
        let mut v = self.value(base).clone();
        let s = self.value(src);
        for (k, &p) in positions.iter().enumerate() {
            v.row_mut(p).assign(&s.row(k));
        }
        self.push(v, Op::ScatterRows { base, src, positions })
    }

    pub fn select_rows(&mut self, x: NodeId, rows: Vec<usize>) -> NodeId {
        let v = self.value(x).select(Axis(0), &rows);
        self.push(v, Op::SelectRows { x, rows })
    }

    pub fn cross_entropy(&mut self, logits: NodeId, targets: Vec<usize>) -> NodeId {
        let probs = softmax_rows(self.value(logits));
        let n = targets.len().max(1) as f64;
        // Log-sum-exp form keeps tiny probabilities exact.
        let l = self.value(logits);
        let loss = targets
            .iter()
            .enumerate()
            .map(|(r, &t)| {
                let row = l.row(r);
                let m = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
                m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() - row[t]
            })
            .sum::<f64>()
            / n;
        self.push(Array2::from_elem((1, 1), loss), Op::CrossEntropy { logits, targets, probs })
    }

    pub fn weighted_sum(&mut self, terms: Vec<(NodeId, f64)>) -> NodeId {
        let v: f64 = terms.iter().map(|&(n, w)| w * self.scalar(n)).sum();
        self.push(Array2::from_elem((1, 1), v), Op::WeightedSum(terms))
    }

    pub fn half_squared_norm(&mut self, a: NodeId) -> NodeId {
        let v = 0.5 * self.value(a).iter().map(|x| x * x).sum::<f64>();
        self.push(Array2::from_elem((1, 1), v), Op::HalfSquaredNorm(a))
    }

    /// Gradients of the scalar `loss` with respect to every parameter.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let l = self.value(loss);
        if l.dim() != (1, 1) {
            return Err(Error::InvalidInput("loss must be a 1x1 node".into()));
        }
        if !l[[0, 0]].is_finite() {
            return Err(Error::NumericalFailure(format!("loss is {}", l[[0, 0]])));
        }
        let mut out = Gradients::zeros_like(self.params);
        let mut grads: Vec<Option<Array2<f64>>> = (0..=loss).map(|_| None).collect();
        grads[loss] = Some(Array2::ones((1, 1)));

        fn acc(grads: &mut [Option<Array2<f64>>], id: NodeId, g: Array2<f64>) {
            match &mut grads[id] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss).rev() {
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Const => {}
                Op::Param(p) => out.tensors[*p] += &g,
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    acc(&mut grads, *a, ga);
                    acc(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::AddRow(a, row) => {
                    let gr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, gr);
                    acc(&mut grads, *a, g);
                }
                Op::Scale(a, s) => acc(&mut grads, *a, g * *s),
                Op::Gelu(a) => {
                    let ga = &g * &self.value(*a).mapv(gelu_grad);
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    let d = xhat.ncols() as f64;
                    let ggain = (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0));
                    let gbias = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    let dxhat = &g * self.value(*gain);
                    let mut gx = Array2::zeros(g.raw_dim());
                    for r in 0..g.nrows() {
                        let dh = dxhat.row(r);
                        let xh = xhat.row(r);
                        let mean_dh = dh.sum() / d;
                        let mean_dh_xh = dh.dot(&xh) / d;
                        let inv = inv_std[r];
                        for c in 0..g.ncols() {
                            gx[[r, c]] = inv * (dh[c] - mean_dh - xh[c] * mean_dh_xh);
                        }
                    }
                    acc(&mut grads, *gain, ggain);
                    acc(&mut grads, *bias, gbias);
                    acc(&mut grads, *x, gx);
                }
                Op::CausalSoftmax(a) => {
                    let y = self.value(i);
                    let mut ga = &g * y;
                    for (mut row, yr) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = row.sum();
                        row.scaled_add(-dot, &yr);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::WeightedRows { table, rows } => {
                    let mut gt = Array2::zeros(self.value(*table).raw_dim());
                    for (gr, terms) in g.rows().into_iter().zip(rows) {
                        for &(r, w) in terms {
                            gt.row_mut(r).scaled_add(w, &gr);
                        }
                    }
                    acc(&mut grads, *table, gt);
                }
                Op::ConcatCols(a, b) => {
                    let split = self.value(*a).ncols();
                    acc(&mut grads, *a, g.slice(s![.., ..split]).to_owned());
                    acc(&mut grads, *b, g.slice(s![.., split..]).to_owned());
                }
                Op::VStack(a, b) => {
                    let split = self.value(*a).nrows();
                    acc(&mut grads, *a, g.slice(s![..split, ..]).to_owned());
                    acc(&mut grads, *b, g.slice(s![split.., ..]).to_owned());
                }
                Op::ScatterRows { base, src, positions } => {
                    let gsrc = g.select(Axis(0), positions);
                    let mut gbase = g;
                    for &p in positions {
                        gbase.row_mut(p).fill(0.0);
                    }
                    acc(&mut grads, *src, gsrc);
                    acc(&mut grads, *base, gbase);
                }
                Op::SelectRows { x, rows } => {
                    let mut gx = Array2::zeros(self.value(*x).raw_dim());
                    for (k, &r) in rows.iter().enumerate() {
                        gx.row_mut(r).scaled_add(1.0, &g.row(k));
                    }
                    acc(&mut grads, *x, gx);
                }
                Op::CrossEntropy { logits, targets, probs } => {
                    let scale = g[[0, 0]] / targets.len().max(1) as f64;
                    let mut gl = probs.clone();
                    for (r, &t) in targets.iter().enumerate() {
                        gl[[r, t]] -= 1.0;
                    }
                    gl *= scale;
                    acc(&mut grads, *logits, gl);
                }
                Op::WeightedSum(terms) => {
                    for &(n, w) in terms {
                        acc(&mut grads, n, &g * w);
                    }
                }
                Op::HalfSquaredNorm(a) => {
                    let ga = self.value(*a) * g[[0, 0]];
                    acc(&mut grads, *a, ga);
                }
            }
        }
        if !out.is_finite() {
            return Err(Error::NumericalFailure("non-finite gradient".into()));
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::params::{PolicyConfig, FEAT_PROJ, TOK_EMB};
    use crate::rng::rng_from;

    fn params() -> PolicyParams {
        let cfg = PolicyConfig { d_model: 6, d_ff: 8, n_layers: 1, max_len: 16 };
        PolicyParams::init(cfg, 12, &mut rng_from(3)).unwrap()
    }

    #[test]
    fn constant_loss_has_zero_gradient() {
        let p = params();
        let mut tape = Tape::new(&p);
        let _ = tape.param(TOK_EMB);
        let c = tape.constant(Array2::from_elem((1, 1), 3.5));
        let g = tape.backward(c).unwrap();
        assert!(g.tensors.iter().all(|t| t.iter().all(|&x| x == 0.0)));
    }

    #[test]
    fn quadratic_probe_gradient_is_the_weight() {
        let p = params();
        let mut tape = Tape::new(&p);
        let w = tape.param(FEAT_PROJ);
        let loss = tape.half_squared_norm(w);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.tensors[FEAT_PROJ], p.tensors[FEAT_PROJ]);
        assert_eq!(g.norm(), p.tensors[FEAT_PROJ].iter().map(|x| x * x).sum::<f64>().sqrt());
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let p = params();
        let tape_loss = {
            let mut tape = Tape::new(&p);
            let c = tape.constant(Array2::from_elem((1, 1), f64::NAN));
            tape.backward(c)
        };
        assert!(matches!(tape_loss, Err(Error::NumericalFailure(_))));
    }

    #[test]
    fn causal_softmax_rows_sum_to_one_and_mask() {
        let x = Array2::from_shape_fn((4, 4), |(r, c)| (r * 3 + c) as f64 * 0.3);
        let y = causal_softmax(&x);
        for r in 0..4 {
            assert!((y.row(r).sum() - 1.0).abs() < 1e-12);
            for c in r + 1..4 {
                assert_eq!(y[[r, c]], 0.0);
            }
        }
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5] {
            let fd = (gelu(x + 1e-6) - gelu(x - 1e-6)) / 2e-6;
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
