//! Reverse-mode autodiff over a flat tape of matrix nodes.
//!
//! A `Graph` records one forward pass; `backward` replays the tape in reverse
//! and accumulates exact analytic gradients for every parameter node that was
//! touched. There is no implicit broadcasting and no graph reuse: the model
//! code builds a fresh graph per instance, which keeps the engine small and
//! the evaluation order (and therefore the floating-point result) fixed.

#![allow(clippy::needless_range_loop)] // index loops keep the kernels explicit

use crate::error::{Error, Result};
use crate::linalg::{mat_mul, mat_mul_nt, mat_mul_tn, Mat};
use crate::params::{GradStore, ParamStore};
use std::collections::HashMap;

/// Probabilities below this are clamped inside log losses so degenerate
/// outputs cannot produce non-finite losses.
pub const LOG_EPS: f64 = 1e-12;

const LN_EPS: f64 = 1e-12;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_COEF: f64 = 0.044_715;

/// Elementwise GELU, tanh approximation.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_COEF * x * x * x)).tanh())
}

/// d/dx of `gelu_scalar`.
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_COEF * x * x)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

enum Op {
    Input,
    Param(usize),
    GatherRows {
        src: NodeId,
        ids: Vec<usize>,
    },
    Add {
        a: NodeId,
        b: NodeId,
    },
    AddRowBroadcast {
        a: NodeId,
        bias: NodeId,
    },
    Scale {
        a: NodeId,
        c: f64,
    },
    MatMul {
        a: NodeId,
        b: NodeId,
    },
    /// a * b^T
    MatMulNT {
        a: NodeId,
        b: NodeId,
    },
    SliceCols {
        a: NodeId,
        start: usize,
    },
    ConcatCols {
        parts: Vec<NodeId>,
    },
    SelectRow {
        a: NodeId,
        row: usize,
    },
    /// Row softmax; `false` mask columns are skipped entirely (probability 0,
    /// value never read), so masked content cannot leak into the result. The
    /// backward rule only needs the cached output, where masked entries are 0.
    SoftmaxRows {
        a: NodeId,
    },
    LayerNormRows {
        a: NodeId,
        gamma: NodeId,
        beta: NodeId,
        xhat: Mat,
        inv_std: Vec<f64>,
    },
    Gelu {
        a: NodeId,
    },
    Sigmoid {
        a: NodeId,
    },
    Dropout {
        a: NodeId,
        mask: Vec<f64>,
    },
    /// -ln(max(probs[row, col], LOG_EPS))
    PickNegLog {
        probs: NodeId,
        row: usize,
        col: usize,
    },
    /// -(1/rows) * sum_i ln(max(probs[i, labels[i]], LOG_EPS))
    RowNegLogMean {
        probs: NodeId,
        labels: Vec<u8>,
    },
    /// -(y ln p + (1-y) ln(1-p)), p a 1x1 node
    Bce {
        p: NodeId,
        y: f64,
    },
    SumScalars {
        parts: Vec<NodeId>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

pub struct Graph<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, NodeId>,
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Graph {
            params,
            nodes: Vec::with_capacity(128),
            param_nodes: HashMap::new(),
        }
    }

    fn push(&mut self, value: Mat, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Mat {
        &self.nodes[id.0].value
    }

    pub fn input(&mut self, m: Mat) -> NodeId {
        self.push(m, Op::Input)
    }

    /// Parameter node, instantiated once per graph so gradients accumulate.
    pub fn param(&mut self, name: &str) -> NodeId {
        let idx = self
            .params
            .idx(name)
            .unwrap_or_else(|| panic!("unknown parameter {name}"));
        if let Some(&id) = self.param_nodes.get(&idx) {
            return id;
        }
        let value = self.params.by_idx(idx).value.clone();
        let id = self.push(value, Op::Param(idx));
        self.param_nodes.insert(idx, id);
        id
    }

    pub fn gather_rows(&mut self, src: NodeId, ids: &[usize]) -> NodeId {
        let table = self.value(src);
        let cols = table.cols;
        let mut out = Mat::zeros(ids.len(), cols);
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < table.rows, "gather id {id} out of range {}", table.rows);
            out.row_mut(i).copy_from_slice(table.row(id));
        }
        self.push(
            out,
            Op::GatherRows {
                src,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add { a, b })
    }

    pub fn add_row_broadcast(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let bias_m = self.value(bias);
        assert_eq!(bias_m.rows, 1);
        assert_eq!(bias_m.cols, self.value(a).cols);
        let bias_row = bias_m.data.clone();
        let mut out = self.value(a).clone();
        for r in 0..out.rows {
            let row = out.row_mut(r);
            for (v, b) in row.iter_mut().zip(&bias_row) {
                *v += b;
            }
        }
        self.push(out, Op::AddRowBroadcast { a, bias })
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let mut out = self.value(a).clone();
        out.scale_assign(c);
        self.push(out, Op::Scale { a, c })
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = mat_mul(self.value(a), self.value(b));
        self.push(out, Op::MatMul { a, b })
    }

    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = mat_mul_nt(self.value(a), self.value(b));
        self.push(out, Op::MatMulNT { a, b })
    }

    /// x * W^T + bias, the linear layer used everywhere.
    pub fn affine(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> NodeId {
        let prod = self.matmul_nt(x, w);
        self.add_row_broadcast(prod, bias)
    }

    pub fn slice_cols(&mut self, a: NodeId, start: usize, len: usize) -> NodeId {
        let src = self.value(a);
        assert!(start + len <= src.cols);
        let mut out = Mat::zeros(src.rows, len);
        for r in 0..src.rows {
            out.row_mut(r)
                .copy_from_slice(&src.row(r)[start..start + len]);
        }
        self.push(out, Op::SliceCols { a, start })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows;
        let total: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, total);
        let mut off = 0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!(m.rows, rows);
            for r in 0..rows {
                out.row_mut(r)[off..off + m.cols].copy_from_slice(m.row(r));
            }
            off += m.cols;
        }
        self.push(
            out,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn select_row(&mut self, a: NodeId, row: usize) -> NodeId {
        let src = self.value(a);
        assert!(row < src.rows);
        let out = Mat::row_vector(src.row(row).to_vec());
        self.push(out, Op::SelectRow { a, row })
    }

    pub fn softmax_rows(&mut self, a: NodeId, col_mask: Option<&[bool]>) -> NodeId {
        let src = self.value(a);
        if let Some(mask) = col_mask {
            assert_eq!(mask.len(), src.cols);
            assert!(mask.iter().any(|&m| m), "softmax with all columns masked");
        }
        let mut out = Mat::zeros(src.rows, src.cols);
        for r in 0..src.rows {
            let row = src.row(r);
            let orow = out.row_mut(r);
            let mut max = f64::NEG_INFINITY;
            for (c, &v) in row.iter().enumerate() {
                if col_mask.is_none_or(|m| m[c]) && v > max {
                    max = v;
                }
            }
            let mut sum = 0.0;
            for (c, &v) in row.iter().enumerate() {
                if col_mask.is_none_or(|m| m[c]) {
                    let e = (v - max).exp();
                    orow[c] = e;
                    sum += e;
                }
            }
            for v in orow.iter_mut() {
                *v /= sum;
            }
        }
        self.push(out, Op::SoftmaxRows { a })
    }

    pub fn layer_norm_rows(&mut self, a: NodeId, gamma: NodeId, beta: NodeId) -> NodeId {
        let src = self.value(a);
        let n = src.cols;
        let gamma_row = self.value(gamma).data.clone();
        let beta_row = self.value(beta).data.clone();
        assert_eq!(gamma_row.len(), n);
        assert_eq!(beta_row.len(), n);
        let mut out = Mat::zeros(src.rows, n);
        let mut xhat = Mat::zeros(src.rows, n);
        let mut inv_std = vec![0.0; src.rows];
        for r in 0..src.rows {
            let row = src.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            inv_std[r] = inv;
            let xr = xhat.row_mut(r);
            let or = out.row_mut(r);
            for c in 0..n {
                let xh = (row[c] - mean) * inv;
                xr[c] = xh;
                or[c] = gamma_row[c] * xh + beta_row[c];
            }
        }
        self.push(
            out,
            Op::LayerNormRows {
                a,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        )
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = gelu_scalar(*v);
        }
        self.push(out, Op::Gelu { a })
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let mut out = self.value(a).clone();
        for v in &mut out.data {
            *v = 1.0 / (1.0 + (-*v).exp());
        }
        self.push(out, Op::Sigmoid { a })
    }

    /// Inverted dropout with a precomputed mask of factors (0 or 1/keep).
    pub fn dropout(&mut self, a: NodeId, mask: Vec<f64>) -> NodeId {
        let src = self.value(a);
        assert_eq!(mask.len(), src.data.len());
        let mut out = src.clone();
        for (v, f) in out.data.iter_mut().zip(&mask) {
            *v *= f;
        }
        self.push(out, Op::Dropout { a, mask })
    }

    pub fn pick_neg_log(&mut self, probs: NodeId, row: usize, col: usize) -> NodeId {
        let p = self.value(probs).at(row, col);
        let out = Mat::from_vec(1, 1, vec![-(p.max(LOG_EPS)).ln()]);
        self.push(out, Op::PickNegLog { probs, row, col })
    }

    pub fn row_neg_log_mean(&mut self, probs: NodeId, labels: &[u8]) -> NodeId {
        let m = self.value(probs);
        assert_eq!(labels.len(), m.rows);
        let t = m.rows as f64;
        let mut acc = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            acc -= m.at(i, l as usize).max(LOG_EPS).ln();
        }
        let out = Mat::from_vec(1, 1, vec![acc / t]);
        self.push(
            out,
            Op::RowNegLogMean {
                probs,
                labels: labels.to_vec(),
            },
        )
    }

    pub fn bce(&mut self, p: NodeId, y: f64) -> NodeId {
        let pv = self.value(p).at(0, 0);
        let loss = -(y * pv.max(LOG_EPS).ln() + (1.0 - y) * (1.0 - pv).max(LOG_EPS).ln());
        let out = Mat::from_vec(1, 1, vec![loss]);
        self.push(out, Op::Bce { p, y })
    }

    pub fn sum_scalars(&mut self, parts: &[NodeId]) -> NodeId {
        let mut acc = 0.0;
        for &p in parts {
            let m = self.value(p);
            assert_eq!((m.rows, m.cols), (1, 1));
            acc += m.at(0, 0);
        }
        let out = Mat::from_vec(1, 1, vec![acc]);
        self.push(
            out,
            Op::SumScalars {
                parts: parts.to_vec(),
            },
        )
    }

    pub fn scalar(&self, id: NodeId) -> f64 {
        let m = self.value(id);
        assert_eq!((m.rows, m.cols), (1, 1), "node is not a scalar");
        m.at(0, 0)
    }

    /// Backpropagate from a scalar loss node. Returns gradients aligned with
    /// the parameter store; parameters the loss never touched get zeros.
    pub fn backward(&self, loss: NodeId) -> Result<GradStore> {
        if loss.0 >= self.nodes.len() {
            return Err(Error::Usage(
                "backward on a node that is not part of this graph".into(),
            ));
        }
        let lm = &self.nodes[loss.0].value;
        if (lm.rows, lm.cols) != (1, 1) {
            return Err(Error::Usage("backward requires a scalar loss node".into()));
        }
        if !lm.at(0, 0).is_finite() {
            return Err(Error::Numeric("loss is not finite".into()));
        }

        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]));

        for id in (0..=loss.0).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            // Re-stash so param collection below still sees it.
            let node = &self.nodes[id];
            match &node.op {
                Op::Input | Op::Param(_) => {}
                Op::GatherRows { src, ids } => {
                    let acc = ensure(&mut grads, src.0, self.shape(*src));
                    for (i, &rid) in ids.iter().enumerate() {
                        let grow = g.row(i).to_vec();
                        let arow = acc.row_mut(rid);
                        for (a, b) in arow.iter_mut().zip(&grow) {
                            *a += b;
                        }
                    }
                }
                Op::Add { a, b } => {
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&g);
                    ensure(&mut grads, b.0, self.shape(*b)).add_assign(&g);
                }
                Op::AddRowBroadcast { a, bias } => {
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&g);
                    let bacc = ensure(&mut grads, bias.0, self.shape(*bias));
                    for r in 0..g.rows {
                        let grow = g.row(r);
                        for (b, v) in bacc.row_mut(0).iter_mut().zip(grow) {
                            *b += v;
                        }
                    }
                }
                Op::Scale { a, c } => {
                    let mut ga = g.clone();
                    ga.scale_assign(*c);
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&ga);
                }
                Op::MatMul { a, b } => {
                    let da = mat_mul_nt(&g, &self.nodes[b.0].value);
                    let db = mat_mul_tn(&self.nodes[a.0].value, &g);
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                    ensure(&mut grads, b.0, self.shape(*b)).add_assign(&db);
                }
                Op::MatMulNT { a, b } => {
                    let da = mat_mul(&g, &self.nodes[b.0].value);
                    let db = mat_mul_tn(&g, &self.nodes[a.0].value);
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                    ensure(&mut grads, b.0, self.shape(*b)).add_assign(&db);
                }
                Op::SliceCols { a, start } => {
                    let acc = ensure(&mut grads, a.0, self.shape(*a));
                    for r in 0..g.rows {
                        let arow = acc.row_mut(r);
                        for (c, v) in g.row(r).iter().enumerate() {
                            arow[start + c] += v;
                        }
                    }
                }
                Op::ConcatCols { parts } => {
                    let mut off = 0;
                    for &p in parts {
                        let (rows, cols) = self.shape(p);
                        let acc = ensure(&mut grads, p.0, (rows, cols));
                        for r in 0..rows {
                            let arow = acc.row_mut(r);
                            for c in 0..cols {
                                arow[c] += g.at(r, off + c);
                            }
                        }
                        off += cols;
                    }
                }
                Op::SelectRow { a, row } => {
                    let acc = ensure(&mut grads, a.0, self.shape(*a));
                    let arow = acc.row_mut(*row);
                    for (v, gv) in arow.iter_mut().zip(&g.data) {
                        *v += gv;
                    }
                }
                Op::SoftmaxRows { a } => {
                    let p = &node.value;
                    let mut da = Mat::zeros(p.rows, p.cols);
                    for r in 0..p.rows {
                        let prow = p.row(r);
                        let grow = g.row(r);
                        let dot: f64 = prow.iter().zip(grow).map(|(x, y)| x * y).sum();
                        let drow = da.row_mut(r);
                        for c in 0..p.cols {
                            drow[c] = prow[c] * (grow[c] - dot);
                        }
                    }
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                }
                Op::LayerNormRows {
                    a,
                    gamma,
                    beta,
                    xhat,
                    inv_std,
                } => {
                    let n = xhat.cols;
                    let gamma_row = self.nodes[gamma.0].value.data.clone();
                    let mut da = Mat::zeros(xhat.rows, n);
                    let mut dgamma = Mat::zeros(1, n);
                    let mut dbeta = Mat::zeros(1, n);
                    for r in 0..xhat.rows {
                        let xr = xhat.row(r);
                        let grow = g.row(r);
                        for c in 0..n {
                            dgamma.data[c] += grow[c] * xr[c];
                            dbeta.data[c] += grow[c];
                        }
                        // h = g * gamma; dx = inv_std * (h - mean(h) - xhat * mean(h*xhat))
                        let mut mean_h = 0.0;
                        let mut mean_hx = 0.0;
                        for c in 0..n {
                            let h = grow[c] * gamma_row[c];
                            mean_h += h;
                            mean_hx += h * xr[c];
                        }
                        mean_h /= n as f64;
                        mean_hx /= n as f64;
                        let drow = da.row_mut(r);
                        for c in 0..n {
                            let h = grow[c] * gamma_row[c];
                            drow[c] = inv_std[r] * (h - mean_h - xr[c] * mean_hx);
                        }
                    }
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                    ensure(&mut grads, gamma.0, self.shape(*gamma)).add_assign(&dgamma);
                    ensure(&mut grads, beta.0, self.shape(*beta)).add_assign(&dbeta);
                }
                Op::Gelu { a } => {
                    let x = &self.nodes[a.0].value;
                    let mut da = g.clone();
                    for (d, xv) in da.data.iter_mut().zip(&x.data) {
                        *d *= gelu_grad_scalar(*xv);
                    }
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                }
                Op::Sigmoid { a } => {
                    let s = &node.value;
                    let mut da = g.clone();
                    for (d, sv) in da.data.iter_mut().zip(&s.data) {
                        *d *= sv * (1.0 - sv);
                    }
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                }
                Op::Dropout { a, mask } => {
                    let mut da = g.clone();
                    for (d, f) in da.data.iter_mut().zip(mask) {
                        *d *= f;
                    }
                    ensure(&mut grads, a.0, self.shape(*a)).add_assign(&da);
                }
                Op::PickNegLog { probs, row, col } => {
                    let p = self.nodes[probs.0].value.at(*row, *col);
                    if p > LOG_EPS {
                        let acc = ensure(&mut grads, probs.0, self.shape(*probs));
                        *acc.at_mut(*row, *col) += g.at(0, 0) * (-1.0 / p);
                    }
                }
                Op::RowNegLogMean { probs, labels } => {
                    let t = labels.len() as f64;
                    let pv = &self.nodes[probs.0].value;
                    let shape = (pv.rows, pv.cols);
                    let picked: Vec<f64> = labels
                        .iter()
                        .enumerate()
                        .map(|(i, &l)| pv.at(i, l as usize))
                        .collect();
                    let acc = ensure(&mut grads, probs.0, shape);
                    for (i, &l) in labels.iter().enumerate() {
                        let p = picked[i];
                        if p > LOG_EPS {
                            *acc.at_mut(i, l as usize) += g.at(0, 0) * (-1.0 / (t * p));
                        }
                    }
                }
                Op::Bce { p, y } => {
                    let pv = self.nodes[p.0].value.at(0, 0);
                    let mut d = 0.0;
                    if pv > LOG_EPS {
                        d += -y / pv;
                    }
                    if 1.0 - pv > LOG_EPS {
                        d += (1.0 - y) / (1.0 - pv);
                    }
                    let acc = ensure(&mut grads, p.0, (1, 1));
                    *acc.at_mut(0, 0) += g.at(0, 0) * d;
                }
                Op::SumScalars { parts } => {
                    for &p in parts {
                        let acc = ensure(&mut grads, p.0, (1, 1));
                        *acc.at_mut(0, 0) += g.at(0, 0);
                    }
                }
            }
            grads[id] = Some(g);
        }

        let mut store = self.params.zeros_like();
        for (id, node) in self.nodes.iter().enumerate() {
            if let Op::Param(pidx) = node.op {
                if let Some(g) = grads[id].take() {
                    store.grads[pidx] = g;
                }
            }
        }
        Ok(store)
    }

    fn shape(&self, id: NodeId) -> (usize, usize) {
        let m = &self.nodes[id.0].value;
        (m.rows, m.cols)
    }
}

fn ensure(grads: &mut [Option<Mat>], idx: usize, shape: (usize, usize)) -> &mut Mat {
    grads[idx].get_or_insert_with(|| Mat::zeros(shape.0, shape.1))
}
