//! Reverse-mode autodiff over [`Mat`] values.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value, and `backward` walks the tape in reverse accumulating gradients.
//! Node indices are already in topological order because an op can only
//! reference earlier nodes. All arithmetic is `f64` so analytic gradients can
//! be verified against central finite differences to tight tolerances.

use std::collections::BTreeMap;

use crate::mat::Mat;

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    /// Broadcast-add a `1×n` row to every row of an `m×n` matrix.
    AddRow(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    /// Elementwise product with a constant matrix (dropout masks, row masks).
    MulConst(usize, Mat),
    Scale(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Relu(usize),
    Sigmoid(usize),
    Abs(usize),
    /// Row softmax. `allow` marks admitted entries with 1.0; everything else
    /// gets exactly zero weight, which is the additive `-inf` pre-softmax
    /// masking. A fully masked row yields all zeros.
    SoftmaxRows {
        x: usize,
        allow: Option<Mat>,
    },
    LogSoftmaxRows(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
    },
    Hstack(Vec<usize>),
    Vstack(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    SumAll(usize),
    /// Weighted sum of selected entries: `Σ w · x[r,c]`, producing a scalar.
    /// This is the primitive behind every cross-entropy style loss.
    PickWeighted {
        x: usize,
        picks: Vec<(usize, usize, f64)>,
    },
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Mat>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, m: Mat) -> Var {
        self.push(m, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root w.r.t. `v`. Zero if unreached.
    pub fn grad(&self, v: Var) -> Mat {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => {
                let val = &self.nodes[v.0].value;
                Mat::zeros(val.rows(), val.cols())
            }
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.add(&self.nodes[b.0].value);
        self.push(v, Op::Add(a.0, b.0))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let rm = &self.nodes[row.0].value;
        assert_eq!(rm.rows(), 1);
        assert_eq!(rm.cols(), xm.cols());
        let mut out = xm.clone();
        for r in 0..out.rows() {
            for c in 0..out.cols() {
                out.add_at(r, c, rm.get(0, c));
            }
        }
        self.push(out, Op::AddRow(x.0, row.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.sub(&self.nodes[b.0].value);
        self.push(v, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.zip_map(&self.nodes[b.0].value, |x, y| x * y);
        self.push(v, Op::Mul(a.0, b.0))
    }

    pub fn mul_const(&mut self, x: Var, mask: Mat) -> Var {
        let v = self.nodes[x.0].value.zip_map(&mask, |a, m| a * m);
        self.push(v, Op::MulConst(x.0, mask))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.nodes[x.0].value.scale(s);
        self.push(v, Op::Scale(x.0, s))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.nodes[a.0].value.matmul(&self.nodes[b.0].value);
        self.push(v, Op::MatMul(a.0, b.0))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.transpose();
        self.push(v, Op::Transpose(x.0))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| a.max(0.0));
        self.push(v, Op::Relu(x.0))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(|a| 1.0 / (1.0 + (-a).exp()));
        self.push(v, Op::Sigmoid(x.0))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.nodes[x.0].value.map(f64::abs);
        self.push(v, Op::Abs(x.0))
    }

    /// `x·w + b` with `b` broadcast across rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn softmax_rows(&mut self, x: Var, allow: Option<Mat>) -> Var {
        let xm = &self.nodes[x.0].value;
        if let Some(a) = &allow {
            assert_eq!(a.shape(), xm.shape(), "softmax mask shape mismatch");
        }
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let admitted = |c: usize| allow.as_ref().map_or(true, |a| a.get(r, c) != 0.0);
            let mut max = f64::NEG_INFINITY;
            for c in 0..xm.cols() {
                if admitted(c) {
                    max = max.max(xm.get(r, c));
                }
            }
            if max == f64::NEG_INFINITY {
                continue; // fully masked row stays zero
            }
            let mut denom = 0.0;
            for c in 0..xm.cols() {
                if admitted(c) {
                    denom += (xm.get(r, c) - max).exp();
                }
            }
            for c in 0..xm.cols() {
                if admitted(c) {
                    out.set(r, c, (xm.get(r, c) - max).exp() / denom);
                }
            }
        }
        self.push(out, Op::SoftmaxRows { x: x.0, allow })
    }

    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            for c in 0..xm.cols() {
                out.set(r, c, xm.get(r, c) - lse);
            }
        }
        self.push(out, Op::LogSoftmaxRows(x.0))
    }

    /// Per-row layer normalization with learnable `gamma`/`beta` (`1×n`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xm = &self.nodes[x.0].value;
        let gm = &self.nodes[gamma.0].value;
        let bm = &self.nodes[beta.0].value;
        assert_eq!(gm.rows(), 1);
        assert_eq!(gm.cols(), xm.cols());
        assert_eq!(bm.shape(), gm.shape());
        let n = xm.cols() as f64;
        let mut out = Mat::zeros(xm.rows(), xm.cols());
        for r in 0..xm.rows() {
            let row = xm.row(r);
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for c in 0..xm.cols() {
                let xhat = (xm.get(r, c) - mean) * inv;
                out.set(r, c, xhat * gm.get(0, c) + bm.get(0, c));
            }
        }
        self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
            },
        )
    }

    pub fn hstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = Mat::hstack(&mats);
        self.push(out, Op::Hstack(parts.iter().map(|v| v.0).collect()))
    }

    pub fn vstack(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|v| &self.nodes[v.0].value).collect();
        let out = Mat::vstack(&mats);
        self.push(out, Op::Vstack(parts.iter().map(|v| v.0).collect()))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Var {
        let v = self.nodes[x.0].value.slice_rows(start, end);
        self.push(v, Op::SliceRows { x: x.0, start })
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xm = &self.nodes[x.0].value;
        assert!(start <= end && end <= xm.cols());
        let mut out = Mat::zeros(xm.rows(), end - start);
        for r in 0..xm.rows() {
            for c in start..end {
                out.set(r, c - start, xm.get(r, c));
            }
        }
        self.push(out, Op::SliceCols { x: x.0, start })
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let v = self.nodes[x.0].value.gather_rows(idx);
        self.push(
            v,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
        )
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Mat::scalar(self.nodes[x.0].value.sum());
        self.push(v, Op::SumAll(x.0))
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.nodes[x.0].value.len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// `Σ weight · x[r,c]` over the picks, as a scalar node.
    pub fn pick_weighted(&mut self, x: Var, picks: Vec<(usize, usize, f64)>) -> Var {
        let xm = &self.nodes[x.0].value;
        let mut acc = 0.0;
        for &(r, c, w) in &picks {
            acc += w * xm.get(r, c);
        }
        self.push(Mat::scalar(acc), Op::PickWeighted { x: x.0, picks })
    }

    /// Sum a list of scalar nodes.
    pub fn add_n(&mut self, terms: &[Var]) -> Var {
        assert!(!terms.is_empty());
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = self.add(acc, t);
        }
        acc
    }

    /// Backpropagate from a scalar root.
    pub fn backward(&mut self, root: Var) {
        assert_eq!(
            self.nodes[root.0].value.shape(),
            (1, 1),
            "backward root must be scalar"
        );
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[root.0] = Some(Mat::scalar(1.0));

        for i in (0..self.nodes.len()).rev() {
            let g = match &self.grads[i] {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g);
                }
                Op::AddRow(x, row) => {
                    let mut rg = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            rg.add_at(0, c, g.get(r, c));
                        }
                    }
                    self.accumulate(x, g);
                    self.accumulate(row, rg);
                }
                Op::Sub(a, b) => {
                    self.accumulate(a, g.clone());
                    self.accumulate(b, g.scale(-1.0));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip_map(&self.nodes[b].value, |gi, bi| gi * bi);
                    let gb = g.zip_map(&self.nodes[a].value, |gi, ai| gi * ai);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::MulConst(x, mask) => {
                    let gx = g.zip_map(&mask, |gi, mi| gi * mi);
                    self.accumulate(x, gx);
                }
                Op::Scale(x, s) => {
                    self.accumulate(x, g.scale(s));
                }
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.nodes[b].value.transpose());
                    let gb = self.nodes[a].value.transpose().matmul(&g);
                    self.accumulate(a, ga);
                    self.accumulate(b, gb);
                }
                Op::Transpose(x) => {
                    self.accumulate(x, g.transpose());
                }
                Op::Relu(x) => {
                    let gx = g.zip_map(&self.nodes[x].value, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    self.accumulate(x, gx);
                }
                Op::Sigmoid(x) => {
                    let gx = g.zip_map(&self.nodes[i].value, |gi, yi| gi * yi * (1.0 - yi));
                    self.accumulate(x, gx);
                }
                Op::Abs(x) => {
                    // Subgradient at 0 is taken as 0.
                    let gx = g.zip_map(&self.nodes[x].value, |gi, xi| {
                        if xi > 0.0 {
                            gi
                        } else if xi < 0.0 {
                            -gi
                        } else {
                            0.0
                        }
                    });
                    self.accumulate(x, gx);
                }
                Op::SoftmaxRows { x, allow: _ } => {
                    let y = &self.nodes[i].value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let dot: f64 = (0..y.cols()).map(|c| g.get(r, c) * y.get(r, c)).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, y.get(r, c) * (g.get(r, c) - dot));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::LogSoftmaxRows(x) => {
                    let y = &self.nodes[i].value;
                    let mut gx = Mat::zeros(y.rows(), y.cols());
                    for r in 0..y.rows() {
                        let gsum: f64 = (0..y.cols()).map(|c| g.get(r, c)).sum();
                        for c in 0..y.cols() {
                            gx.set(r, c, g.get(r, c) - y.get(r, c).exp() * gsum);
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::LayerNorm { x, gamma, beta } => {
                    let xm = self.nodes[x].value.clone();
                    let gm = self.nodes[gamma].value.clone();
                    let n = xm.cols() as f64;
                    let mut gx = Mat::zeros(xm.rows(), xm.cols());
                    let mut gg = Mat::zeros(1, xm.cols());
                    let mut gb = Mat::zeros(1, xm.cols());
                    for r in 0..xm.rows() {
                        let row = xm.row(r);
                        let mean = row.iter().sum::<f64>() / n;
                        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                        let dxhat: Vec<f64> =
                            (0..xm.cols()).map(|c| g.get(r, c) * gm.get(0, c)).collect();
                        let m1 = dxhat.iter().sum::<f64>() / n;
                        let m2 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / n;
                        for c in 0..xm.cols() {
                            gx.set(r, c, inv * (dxhat[c] - m1 - xhat[c] * m2));
                            gg.add_at(0, c, g.get(r, c) * xhat[c]);
                            gb.add_at(0, c, g.get(r, c));
                        }
                    }
                    self.accumulate(x, gx);
                    self.accumulate(gamma, gg);
                    self.accumulate(beta, gb);
                }
                Op::Hstack(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.nodes[p].value.cols();
                        let mut gp = Mat::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            for c in 0..w {
                                gp.set(r, c, g.get(r, c0 + c));
                            }
                        }
                        c0 += w;
                        self.accumulate(p, gp);
                    }
                }
                Op::Vstack(parts) => {
                    let mut r0 = 0;
                    for p in parts {
                        let h = self.nodes[p].value.rows();
                        let gp = g.slice_rows(r0, r0 + h);
                        r0 += h;
                        self.accumulate(p, gp);
                    }
                }
                Op::SliceRows { x, start } => {
                    let xv = &self.nodes[x].value;
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(start + r, c, g.get(r, c));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::SliceCols { x, start } => {
                    let xv = &self.nodes[x].value;
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        for c in 0..g.cols() {
                            gx.set(r, start + c, g.get(r, c));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::GatherRows { x, idx } => {
                    let xv = &self.nodes[x].value;
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (r, &src) in idx.iter().enumerate() {
                        for c in 0..g.cols() {
                            gx.add_at(src, c, g.get(r, c));
                        }
                    }
                    self.accumulate(x, gx);
                }
                Op::SumAll(x) => {
                    let xv = &self.nodes[x].value;
                    let s = g.get(0, 0);
                    let gx = Mat::from_fn(xv.rows(), xv.cols(), |_, _| s);
                    self.accumulate(x, gx);
                }
                Op::PickWeighted { x, picks } => {
                    let xv = &self.nodes[x].value;
                    let s = g.get(0, 0);
                    let mut gx = Mat::zeros(xv.rows(), xv.cols());
                    for (r, c, w) in picks {
                        gx.add_at(r, c, w * s);
                    }
                    self.accumulate(x, gx);
                }
            }
        }
    }

    fn accumulate(&mut self, node: usize, g: Mat) {
        match &mut self.grads[node] {
            Some(acc) => acc.add_assign(&g),
            slot => *slot = Some(g),
        }
    }
}

/// Named parameter tensors. `BTreeMap` keeps iteration order stable so
/// optimizer updates and checkpoints are deterministic.
pub type ParamMap = BTreeMap<String, Mat>;

/// Parameters bound into a graph as leaves.
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.vars.keys()
    }
}

pub fn bind(g: &mut Graph, params: &ParamMap) -> Bound {
    let mut vars = BTreeMap::new();
    for (name, mat) in params {
        vars.insert(name.clone(), g.leaf(mat.clone()));
    }
    Bound { vars }
}

/// Collect gradients for every bound parameter after `backward`.
pub fn param_grads(g: &Graph, bound: &Bound) -> BTreeMap<String, Mat> {
    bound
        .vars
        .iter()
        .map(|(name, &var)| (name.clone(), g.grad(var)))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central-difference check of `loss_fn` against one analytic backward.
    fn check(params: ParamMap, loss_fn: impl Fn(&mut Graph, &Bound) -> Var) -> f64 {
        let mut g = Graph::new();
        let bound = bind(&mut g, &params);
        let loss = loss_fn(&mut g, &bound);
        g.backward(loss);
        let analytic = param_grads(&g, &bound);

        let h = 1e-6;
        let mut max_rel = 0.0f64;
        for (name, mat) in &params {
            for i in 0..mat.len() {
                let eval = |delta: f64| {
                    let mut p = params.clone();
                    p.get_mut(name).unwrap().as_mut_slice()[i] += delta;
                    let mut g = Graph::new();
                    let b = bind(&mut g, &p);
                    let l = loss_fn(&mut g, &b);
                    g.value(l).get(0, 0)
                };
                let num = (eval(h) - eval(-h)) / (2.0 * h);
                let ana = analytic[name].as_slice()[i];
                let rel = (num - ana).abs() / (num.abs() + ana.abs()).max(1e-8);
                max_rel = max_rel.max(rel);
            }
        }
        max_rel
    }

    fn randn_params(shapes: &[(&str, usize, usize)], seed: u64) -> ParamMap {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        shapes
            .iter()
            .map(|&(n, r, c)| (n.to_string(), Mat::randn(r, c, 0.7, &mut rng)))
            .collect()
    }

    #[test]
    fn grad_linear_relu_chain() {
        let params = randn_params(&[("w", 3, 4), ("b", 1, 4), ("x", 2, 3)], 1);
        let rel = check(params, |g, b| {
            let y = g.linear(b.get("x"), b.get("w"), b.get("b"));
            let y = g.relu(y);
            g.mean_all(y)
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn grad_softmax_pick() {
        let params = randn_params(&[("x", 3, 5)], 2);
        let rel = check(params, |g, b| {
            let lp = g.log_softmax_rows(b.get("x"));
            g.pick_weighted(lp, vec![(0, 1, -1.0), (1, 4, -1.0), (2, 0, -1.0)])
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn grad_masked_softmax_matmul() {
        let params = randn_params(&[("q", 2, 4), ("k", 3, 4), ("v", 3, 4)], 3);
        let allow = Mat::from_vec(2, 3, vec![1.0, 1.0, 0.0, 1.0, 1.0, 1.0]);
        let rel = check(params, move |g, b| {
            let kt = g.transpose(b.get("k"));
            let scores = g.matmul(b.get("q"), kt);
            let scores = g.scale(scores, 0.5);
            let a = g.softmax_rows(scores, Some(allow.clone()));
            let out = g.matmul(a, b.get("v"));
            g.mean_all(out)
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn grad_layer_norm() {
        let params = randn_params(&[("x", 3, 6), ("gamma", 1, 6), ("beta", 1, 6)], 4);
        let rel = check(params, |g, b| {
            let y = g.layer_norm(b.get("x"), b.get("gamma"), b.get("beta"));
            let y = g.sigmoid(y);
            g.mean_all(y)
        });
        assert!(rel < 1e-5, "rel err {rel}");
    }

    #[test]
    fn grad_stack_slice_gather() {
        let params = randn_params(&[("a", 2, 3), ("b", 2, 3), ("t", 4, 3)], 5);
        let rel = check(params, |g, b| {
            let h = g.hstack(&[b.get("a"), b.get("b")]);
            let v = g.vstack(&[h, h]);
            let s = g.slice_cols(v, 1, 4);
            let e = g.gather_rows(b.get("t"), &[0, 2, 2, 3]);
            let sc = g.slice_rows(s, 0, 4);
            let m = g.mul(sc, e);
            let m = g.abs(m);
            g.sum_all(m)
        });
        assert!(rel < 1e-6, "rel err {rel}");
    }

    #[test]
    fn masked_softmax_rows_are_stochastic_or_zero() {
        let mut g = Graph::new();
        let x = g.leaf(Mat::from_vec(2, 3, vec![0.3, -2.0, 1.4, 0.0, 0.0, 0.0]));
        let allow = Mat::from_vec(2, 3, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        let y = g.softmax_rows(x, Some(allow));
        let ym = g.value(y);
        assert!((ym.row(0).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(ym.get(0, 1), 0.0);
        assert_eq!(ym.row(1), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn fully_masked_entries_exactly_zero_weight() {
        // A masked key's value must contribute exactly 0.0 to the output, so
        // perturbing it leaves the output bitwise unchanged.
        let q = Mat::from_vec(1, 2, vec![0.7, -0.3]);
        let k = Mat::from_vec(3, 2, vec![0.1, 0.2, 0.5, -0.4, 0.9, 0.9]);
        let allow = Mat::from_vec(1, 3, vec![1.0, 0.0, 1.0]);
        let run = |v2: f64| -> Vec<u64> {
            let mut g = Graph::new();
            let qv = g.leaf(q.clone());
            let kv = g.leaf(k.clone());
            let vv = g.leaf(Mat::from_vec(3, 2, vec![1.0, 2.0, v2, v2, 5.0, 6.0]));
            let kt = g.transpose(kv);
            let s = g.matmul(qv, kt);
            let a = g.softmax_rows(s, Some(allow.clone()));
            let o = g.matmul(a, vv);
            g.value(o).as_slice().iter().map(|f| f.to_bits()).collect()
        };
        assert_eq!(run(3.0), run(-713.25));
    }
}
