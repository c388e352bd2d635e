//! Minimal reverse-mode differentiation over [`Mat`] values.
//!
//! Each forward pass records its operations on a fresh [`Graph`]; `backward`
//! walks the tape in reverse and accumulates gradients for every node.

use std::rc::Rc;

use crate::attention::{masked_softmax, AttentionMask};
use crate::rope::RotaryTables;
use crate::tensor::Mat;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Silu(Var),
    RmsNorm(Var),
    Rotate(Var, Rc<RotaryTables>),
    MaskedSoftmax(Var),
    Transpose(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Mse(Var, Rc<Mat>),
}

struct Node {
    value: Mat,
    op: Op,
}

const RMS_EPS: f64 = 1e-6;

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b)).expect("matmul shape");
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b)).expect("add shape");
        self.push(value, Op::Add(a, b))
    }

    /// Add a 1 x c row vector to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "bias must be a row vector");
        let mut value = self.value(a).clone();
        assert_eq!(value.cols(), b.cols(), "bias width");
        for r in 0..value.rows() {
            for (o, &x) in value.row_mut(r).iter_mut().zip(b.row(0)) {
                *o += x;
            }
        }
        self.push(value, Op::AddBias(a, bias))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x / (1.0 + (-x).exp()));
        self.push(value, Op::Silu(a))
    }

    /// Parameter-free RMS normalisation of each row.
    pub fn rms_norm(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let mut value = x.clone();
        for r in 0..x.rows() {
            let row = x.row(r);
            let inv = 1.0 / (row.iter().map(|v| v * v).sum::<f64>() / row.len() as f64 + RMS_EPS).sqrt();
            for o in value.row_mut(r) {
                *o *= inv;
            }
        }
        self.push(value, Op::RmsNorm(a))
    }

    pub fn rotate(&mut self, a: Var, tables: Rc<RotaryTables>) -> Var {
        let value = tables.rotate(self.value(a), false).expect("rotary shape");
        self.push(value, Op::Rotate(a, tables))
    }

    pub fn masked_softmax(&mut self, a: Var, mask: &AttentionMask) -> Var {
        let value = masked_softmax(self.value(a), mask).expect("softmax shape");
        self.push(value, Op::MaskedSoftmax(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_rows(start, end);
        self.push(value, Op::SliceRows(a, start))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let value = self.value(a).slice_cols(start, end);
        self.push(value, Op::SliceCols(a, start))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::concat_rows(&mats).expect("concat_rows shape");
        self.push(value, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let mats: Vec<&Mat> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Mat::concat_cols(&mats).expect("concat_cols shape");
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    /// Mean squared error against a constant target, as a 1x1 node.
    pub fn mse(&mut self, a: Var, target: Rc<Mat>) -> Var {
        let x = self.value(a);
        assert_eq!(x.shape(), target.shape(), "mse shape");
        let n = x.data().len().max(1) as f64;
        let s: f64 = x.data().iter().zip(target.data()).map(|(p, t)| (p - t).powi(2)).sum();
        self.push(Mat::from_vec(1, 1, vec![s / n]).unwrap(), Op::Mse(a, target))
    }

    /// Gradients of the scalar node `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "loss must be scalar");
        let mut grads: Vec<Option<Mat>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Mat::from_vec(1, 1, vec![1.0]).unwrap());

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.matmul(&self.value(*b).transpose()).unwrap();
                    let gb = self.value(*a).transpose().matmul(&g).unwrap();
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *b, g.clone());
                }
                Op::AddBias(a, bias) => {
                    let mut gb = Mat::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (o, &x) in gb.row_mut(0).iter_mut().zip(g.row(r)) {
                            *o += x;
                        }
                    }
                    accumulate(&mut grads, *a, g.clone());
                    accumulate(&mut grads, *bias, gb);
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.scale(*s)),
                Op::Silu(a) => {
                    let ga = self
                        .value(*a)
                        .zip_map(&g, |x, gy| {
                            let sig = 1.0 / (1.0 + (-x).exp());
                            gy * sig * (1.0 + x * (1.0 - sig))
                        })
                        .unwrap();
                    accumulate(&mut grads, *a, ga);
                }
                Op::RmsNorm(a) => {
                    let x = self.value(*a);
                    let y = &node.value;
                    let mut ga = Mat::zeros(x.rows(), x.cols());
                    let n = x.cols() as f64;
                    for r in 0..x.rows() {
                        let xr = x.row(r);
                        let inv = 1.0 / (xr.iter().map(|v| v * v).sum::<f64>() / n + RMS_EPS).sqrt();
                        let gy_dot_y: f64 = g.row(r).iter().zip(y.row(r)).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = inv * (g.get(r, c) - y.get(r, c) * gy_dot_y / n);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Rotate(a, tables) => accumulate(&mut grads, *a, tables.rotate(&g, true).unwrap()),
                Op::MaskedSoftmax(a) => {
                    let p = &node.value;
                    let mut ga = Mat::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let dot: f64 = g.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                        for (c, o) in ga.row_mut(r).iter_mut().enumerate() {
                            *o = p.get(r, c) * (g.get(r, c) - dot);
                        }
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Transpose(a) => accumulate(&mut grads, *a, g.transpose()),
                Op::SliceRows(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(start + r).copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::SliceCols(a, start) => {
                    let src = self.value(*a);
                    let mut ga = Mat::zeros(src.rows(), src.cols());
                    for r in 0..g.rows() {
                        ga.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatRows(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let rows = self.value(*p).rows();
                        accumulate(&mut grads, *p, g.slice_rows(at, at + rows));
                        at += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut at = 0;
                    for p in parts {
                        let cols = self.value(*p).cols();
                        accumulate(&mut grads, *p, g.slice_cols(at, at + cols));
                        at += cols;
                    }
                }
                Op::Mse(a, target) => {
                    let x = self.value(*a);
                    let k = 2.0 * g.get(0, 0) / x.data().len().max(1) as f64;
                    let ga = x.zip_map(target, |p, t| k * (p - t)).unwrap();
                    accumulate(&mut grads, *a, ga);
                }
            }
            grads[i] = Some(g);
        }
        Gradients { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when `v` does not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences on one leaf of a graph-building closure.
    fn check<F>(inputs: Vec<Mat>, build: F)
    where
        F: Fn(&mut Graph, &[Var]) -> Var,
    {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().cloned().map(|m| g.leaf(m)).collect();
        let loss = build(&mut g, &vars);
        let grads = g.backward(loss);
        let eval = |ins: &[Mat]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().cloned().map(|m| g.leaf(m)).collect();
            let l = build(&mut g, &vars);
            g.value(l).get(0, 0)
        };
        let h = 1e-5;
        for (i, input) in inputs.iter().enumerate() {
            let analytic = grads
                .get(vars[i])
                .cloned()
                .unwrap_or_else(|| Mat::zeros(input.rows(), input.cols()));
            for k in 0..input.data().len() {
                let mut plus = inputs.clone();
                plus[i].data_mut()[k] += h;
                let mut minus = inputs.clone();
                minus[i].data_mut()[k] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[k];
                assert!(
                    (a - numeric).abs() <= 1e-6 * (1.0 + a.abs().max(numeric.abs())),
                    "input {i} entry {k}: analytic {a} numeric {numeric}"
                );
            }
        }
    }

    fn rand_mat(rows: usize, cols: usize, seed: u64) -> Mat {
        Mat::randn(rows, cols, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_bias_silu() {
        let target = Rc::new(rand_mat(3, 2, 9));
        check(
            vec![rand_mat(3, 4, 1), rand_mat(4, 2, 2), rand_mat(1, 2, 3)],
            move |g, v| {
                let m = g.matmul(v[0], v[1]);
                let b = g.add_bias(m, v[2]);
                let s = g.silu(b);
                g.mse(s, target.clone())
            },
        );
    }

    #[test]
    fn rms_norm_and_slices() {
        let target = Rc::new(rand_mat(2, 5, 4));
        check(vec![rand_mat(3, 5, 5), rand_mat(2, 5, 6)], move |g, v| {
            let n = g.rms_norm(v[0]);
            let top = g.slice_rows(n, 1, 3);
            let left = g.slice_cols(top, 0, 2);
            let right = g.slice_cols(v[1], 2, 5);
            let joined = g.concat_cols(&[left, right]);
            let t = g.transpose(joined);
            let back = g.transpose(t);
            let both = g.add(back, v[1]);
            let s = g.scale(both, 0.7);
            g.mse(s, target.clone())
        });
    }

    #[test]
    fn masked_softmax_and_rotation() {
        use crate::rope::{Coord, RopeConfig};
        let mask = Rc::new(AttentionMask::new(2, 3, vec![true, false, true, false, true, true]).unwrap());
        let cfg = RopeConfig::new(6, 100.0, (2, 2, 2)).unwrap();
        let tables = Rc::new(RotaryTables::new(&[Coord::new(1, 2, 3), Coord::new(-1, 0, 4)], &cfg));
        let target = Rc::new(rand_mat(2, 6, 7));
        check(
            vec![rand_mat(2, 3, 8), rand_mat(3, 6, 10), rand_mat(2, 6, 11)],
            move |g, v| {
                let p = g.masked_softmax(v[0], &mask);
                let mixed = g.matmul(p, v[1]);
                let r = g.rotate(v[2], tables.clone());
                let rows = g.concat_rows(&[mixed, r]);
                let top = g.slice_rows(rows, 1, 3);
                g.mse(top, target.clone())
            },
        );
    }
}
