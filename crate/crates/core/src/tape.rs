//! Reverse-mode gradient tape over the fixed operation set the networks need.
//!
//! Every operation appends one node holding its output value and whatever it must
//! remember for the backward sweep. [`Tape::backward`] walks the nodes in exact reverse
//! order of recording and accumulates gradients additively into each input.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{self, ConvGeom, PoolKind, Scalar, SparsePattern, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Mask {
        src: Var,
        mask: Vec<bool>,
    },
    Matmul {
        x: Var,
        w: Var,
    },
    SparseMatmul {
        x: Var,
        w: Var,
        pattern: Arc<SparsePattern>,
    },
    AddBias {
        x: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        w: Var,
        geom: ConvGeom,
    },
    Relu {
        x: Var,
    },
    Pool {
        x: Var,
        kind: PoolKind,
        k: usize,
        argmax: Vec<usize>,
    },
    GlobalPool {
        x: Var,
        mean: bool,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Sum {
        x: Var,
    },
    ChannelScale {
        x: Var,
        scale: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
        train: bool,
    },
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by one backward sweep, indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Records a trainable value.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Records a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// `m ⊙ w`; the gradient reaching `w` is zero wherever the mask is off.
    pub fn mask(&mut self, w: Var, mask: &[bool]) -> Result<Var> {
        let src = &self.nodes[w.0].value;
        let data = tensor::apply_mask(src.data(), mask)?;
        let value = Tensor::new(src.shape().to_vec(), data)?;
        let rg = self.rg(&[w]);
        Ok(self.push(
            value,
            Op::Mask {
                src: w,
                mask: mask.to_vec(),
            },
            rg,
        ))
    }

    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (b, i, o) = tensor::matmul_dims(xv.shape(), wv.shape())?;
        let out = tensor::matmul_fwd(xv.data(), wv.data(), b, i, o);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![b, o], out)?, Op::Matmul { x, w }, rg))
    }

    pub fn matmul_masked(&mut self, x: Var, w: Var, mask: &[bool]) -> Result<Var> {
        let eff = self.mask(w, mask)?;
        self.matmul(x, eff)
    }

    /// `x · (m ⊙ w)` for a mask given as a row pattern. Cheaper than [`Tape::matmul_masked`]
    /// at low density, but the weight gradient exists only at stored positions.
    pub fn matmul_sparse(&mut self, x: Var, w: Var, pattern: Arc<SparsePattern>) -> Result<Var> {
        let (xv, wv) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (b, i, o) = tensor::matmul_dims(xv.shape(), wv.shape())?;
        if (pattern.rows, pattern.cols) != (i, o) {
            return Err(Error::Shape(format!(
                "pattern {}x{} for weight {i}x{o}",
                pattern.rows, pattern.cols
            )));
        }
        let out = tensor::sparse_fwd(xv.data(), wv.data(), &pattern, b);
        let rg = self.rg(&[x, w]);
        Ok(self.push(Tensor::new(vec![b, o], out)?, Op::SparseMatmul { x, w, pattern }, rg))
    }

    /// Adds `b: [C]` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (&self.nodes[x.0].value, &self.nodes[b.0].value);
        let c = *xv.shape().last().unwrap_or(&0);
        if bv.numel() != c {
            return Err(Error::Shape(format!(
                "bias of length {} for {:?}",
                bv.numel(),
                xv.shape()
            )));
        }
        let bd = bv.data();
        let data = xv
            .data()
            .chunks(c.max(1))
            .flat_map(|row| row.iter().zip(bd).map(|(&a, &b)| a + b))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x, b]);
        Ok(self.push(value, Op::AddBias { x, b }, rg))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = tensor::conv_geom_of(self.nodes[w.0].value.shape(), stride, pad)?;
        let value = tensor::conv2d_fwd(&self.nodes[x.0].value, self.nodes[w.0].value.data(), &geom)?;
        let rg = self.rg(&[x, w]);
        Ok(self.push(value, Op::Conv2d { x, w, geom }, rg))
    }

    pub fn conv2d_masked(
        &mut self,
        x: Var,
        w: Var,
        mask: &[bool],
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let eff = self.mask(w, mask)?;
        self.conv2d(x, eff, stride, pad)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| v.max(T::zero()));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu { x }, rg)
    }

    pub fn pool(&mut self, x: Var, kind: PoolKind, k: usize) -> Result<Var> {
        let (value, argmax) = tensor::pool_fwd(&self.nodes[x.0].value, kind, k)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Pool { x, kind, k, argmax }, rg))
    }

    /// Reduces `[B, H, W, C]` to `[B, C]` by mean (or sum when `mean` is false).
    pub fn global_pool(&mut self, x: Var, mean: bool) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let [b, h, w, c] = *xv.shape() else {
            return Err(Error::Shape(format!(
                "global pool expects a 4-d tensor, got {:?}",
                xv.shape()
            )));
        };
        let mut out = vec![T::zero(); b * c];
        for bi in 0..b {
            for p in 0..h * w {
                let base = (bi * h * w + p) * c;
                for ci in 0..c {
                    out[bi * c + ci] = out[bi * c + ci] + xv.data()[base + ci];
                }
            }
        }
        if mean {
            let inv = T::one() / T::of((h * w) as f64);
            out.iter_mut().for_each(|v| *v = *v * inv);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(vec![b, c], out)?, Op::GlobalPool { x, mean }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape { x }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add { a, b }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip(a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul { a, b }, rg))
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if av.shape() != bv.shape() {
            return Err(Error::Shape(format!(
                "elementwise op on {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().fold(T::zero(), |a, &v| a + v);
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum { x }, rg)
    }

    /// Multiplies the last axis by a constant per-channel factor.
    pub fn channel_scale(&mut self, x: Var, scale: Vec<T>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = scale.len();
        if xv.shape().last() != Some(&c) {
            return Err(Error::Shape(format!(
                "{c} channel scales for {:?}",
                xv.shape()
            )));
        }
        let data = xv
            .data()
            .chunks(c)
            .flat_map(|row| row.iter().zip(&scale).map(|(&v, &s)| v * s))
            .collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::ChannelScale { x, scale }, rg))
    }

    /// Per-channel normalization over every axis but the last. With `running` set the
    /// supplied statistics are used and treated as constants; otherwise batch statistics
    /// are used and can be read back with [`Tape::batch_stats`].
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let c = *xv.shape().last().unwrap_or(&0);
        let (g, bt) = (self.nodes[gamma.0].value.data(), self.nodes[beta.0].value.data());
        if c == 0 || g.len() != c || bt.len() != c {
            return Err(Error::Shape(format!(
                "batch norm with {} / {} parameters on {:?}",
                g.len(),
                bt.len(),
                xv.shape()
            )));
        }
        let n = xv.numel() / c;
        let xd = xv.data();
        let (mean, var) = match running {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                let mut mean = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m = *m + v;
                    }
                }
                let inv_n = T::one() / T::of(n as f64);
                mean.iter_mut().for_each(|m| *m = *m * inv_n);
                let mut var = vec![T::zero(); c];
                for row in xd.chunks(c) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s = *s + (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s = *s * inv_n);
                (mean, var)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = Vec::with_capacity(xd.len());
        let mut out = Vec::with_capacity(xd.len());
        for row in xd.chunks(c) {
            for ci in 0..c {
                let h = (row[ci] - mean[ci]) * inv_std[ci];
                xhat.push(h);
                out.push(g[ci] * h + bt[ci]);
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                batch_mean: mean,
                batch_var: var,
                train: running.is_none(),
            },
            rg,
        ))
    }

    /// Mean and (biased) variance used by a batch-norm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes.get(v.0)?.op {
            Op::BatchNorm {
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Mean softmax cross-entropy of `logits: [B, K]` against integer labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = &self.nodes[logits.0].value;
        let [b, k] = *lv.shape() else {
            return Err(Error::Shape(format!("logits must be 2-d, got {:?}", lv.shape())));
        };
        if labels.len() != b || labels.iter().any(|&l| l >= k) {
            return Err(Error::Shape(format!(
                "{} labels (classes < {k}) for a batch of {b}",
                labels.len()
            )));
        }
        let mut probs = Vec::with_capacity(b * k);
        let mut loss = T::zero();
        for (row, &label) in lv.data().chunks(k).zip(labels) {
            let max = row.iter().fold(T::neg_infinity(), |a, &v| a.max(v));
            let z: T = row.iter().map(|&v| (v - max).exp()).fold(T::zero(), |a, v| a + v);
            let lz = z.ln();
            loss = loss - (row[label] - max - lz);
            probs.extend(row.iter().map(|&v| (v - max).exp() / z));
        }
        let value = Tensor::scalar(loss / T::of(b as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Propagates d(loss)/d(loss) = 1 backwards through every recorded node.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let Some(node) = self.nodes.get(loss.0) else {
            return Err(Error::Usage(
                "backward on a value that was never recorded; run the forward pass first".into(),
            ));
        };
        if node.value.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                node.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            self.backward_node(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }

        let grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| g.map(|g| Tensor::new(n.value.shape().to_vec(), g)).transpose())
            .collect::<Result<Vec<_>>>()?;
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, contribution: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.iter_mut().zip(contribution).for_each(|(a, c)| *a = *a + c),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Mask { src, mask } => {
                let masked = g
                    .iter()
                    .zip(mask)
                    .map(|(&v, &m)| if m { v } else { T::zero() })
                    .collect();
                self.accumulate(grads, *src, masked);
            }
            Op::Matmul { x, w } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let (b, i, o) = tensor::matmul_dims(xv.shape(), wv.shape())?;
                if self.wants(*x) {
                    let dx = tensor::matmul_grad_x(g, wv.data(), b, i, o);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = tensor::matmul_grad_w(xv.data(), g, b, i, o);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::SparseMatmul { x, w, pattern } => {
                let (xv, wv) = (self.value(*x), self.value(*w));
                let b = xv.shape()[0];
                if self.wants(*x) {
                    let dx = tensor::sparse_grad_x(g, wv.data(), pattern, b);
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*w) {
                    let dw = tensor::sparse_grad_w(xv.data(), g, pattern, b);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::AddBias { x, b } => {
                self.accumulate(grads, *x, g.to_vec());
                if self.wants(*b) {
                    let c = self.value(*b).numel();
                    let mut db = vec![T::zero(); c];
                    for row in g.chunks(c) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d = *d + v);
                    }
                    self.accumulate(grads, *b, db);
                }
            }
            Op::Conv2d { x, w, geom } => {
                let (dx, dw) =
                    tensor::conv2d_bwd(self.value(*x), self.value(*w).data(), g, geom, self.wants(*x))?;
                if let Some(dx) = dx {
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *w, dw);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Pool { x, kind, k, argmax } => {
                let dx = tensor::pool_bwd(self.value(*x).shape(), *kind, *k, argmax, g)?;
                self.accumulate(grads, *x, dx);
            }
            Op::GlobalPool { x, mean } => {
                let shape = self.value(*x).shape();
                let (b, hw, c) = (shape[0], shape[1] * shape[2], shape[3]);
                let scale = if *mean {
                    T::one() / T::of(hw as f64)
                } else {
                    T::one()
                };
                let mut dx = Vec::with_capacity(b * hw * c);
                for bi in 0..b {
                    for _ in 0..hw {
                        dx.extend(g[bi * c..(bi + 1) * c].iter().map(|&v| v * scale));
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape { x } => self.accumulate(grads, *x, g.to_vec()),
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let da = g.iter().zip(bv).map(|(&gv, &y)| gv * y).collect();
                let db = g.iter().zip(av).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::ChannelScale { x, scale } => {
                let c = scale.len();
                let dx = g
                    .chunks(c)
                    .flat_map(|row| row.iter().zip(scale).map(|(&v, &s)| v * s))
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let gm = self.value(*gamma).data();
                let c = gm.len();
                let n = g.len() / c;
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                    for ci in 0..c {
                        dgamma[ci] = dgamma[ci] + grow[ci] * hrow[ci];
                        dbeta[ci] = dbeta[ci] + grow[ci];
                    }
                }
                if self.wants(*x) {
                    let nf = T::of(n as f64);
                    let mut dx = Vec::with_capacity(g.len());
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for ci in 0..c {
                            let k = gm[ci] * inv_std[ci];
                            dx.push(if *train {
                                k / nf * (nf * grow[ci] - dbeta[ci] - hrow[ci] * dgamma[ci])
                            } else {
                                k * grow[ci]
                            });
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let k = probs.len() / labels.len();
                let scale = g[0] / T::of(labels.len() as f64);
                let mut dl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &l) in labels.iter().enumerate() {
                    dl[r * k + l] = dl[r * k + l] - scale;
                }
                self.accumulate(grads, *logits, dl);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: Vec<usize>, v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn square_has_derivative_two_w() {
        let mut tape = Tape::new();
        let w = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(w, w).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[6.0]);
    }

    #[test]
    fn backward_without_forward_is_usage_error() {
        let tape = Tape::<f64>::new();
        assert!(matches!(tape.backward(Var(0)), Err(Error::Usage(_))));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut tape = Tape::new();
        let w = tape.param(t(vec![2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(w), Err(Error::Usage(_))));
    }

    #[test]
    fn masked_positions_get_exactly_zero_gradient() {
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![2, 2], &[1.0, 2.0, -3.0, 0.5]));
        let w = tape.param(t(vec![2, 3], &[0.1, 0.2, 0.3, 0.4, 0.5, 0.6]));
        let mask = [true, false, true, false, true, false];
        let y = tape.matmul_masked(x, w, &mask).unwrap();
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        let gw = g.get(w).unwrap().data();
        for (v, m) in gw.iter().zip(mask) {
            if !m {
                assert_eq!(*v, 0.0);
            } else {
                assert!(*v != 0.0);
            }
        }
    }

    #[test]
    fn sparse_matmul_agrees_with_masked_dense() {
        let x0: Vec<f64> = (0..3 * 5).map(|i| ((i * 7 % 5) as f64 - 2.0) / 3.0).collect();
        let w0: Vec<f64> = (0..5 * 4).map(|i| ((i * 11 % 13) as f64 - 6.0) / 7.0).collect();
        let mask: Vec<bool> = (0..20).map(|i| i % 3 != 1).collect();
        let run = |sparse: bool| {
            let mut tape = Tape::new();
            let x = tape.param(t(vec![3, 5], &x0));
            let w = tape.param(t(vec![5, 4], &w0));
            let y = if sparse {
                let p = Arc::new(SparsePattern::from_mask(&mask, 5, 4));
                tape.matmul_sparse(x, w, p).unwrap()
            } else {
                tape.matmul_masked(x, w, &mask).unwrap()
            };
            let y2 = tape.mul(y, y).unwrap();
            let s = tape.sum(y2);
            let g = tape.backward(s).unwrap();
            (
                tape.value(y).data().to_vec(),
                g.get(x).unwrap().data().to_vec(),
                g.get(w).unwrap().data().to_vec(),
            )
        };
        let (a, b) = (run(true), run(false));
        for (u, v) in [(a.0, b.0), (a.1, b.1), (a.2, b.2)] {
            for (p, q) in u.iter().zip(&v) {
                assert!((p - q).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn gradients_accumulate_across_uses() {
        // y = sum(x*w + x*w) => dy/dw = 2x
        let mut tape = Tape::new();
        let x = tape.constant(t(vec![3], &[1.0, 2.0, 3.0]));
        let w = tape.param(t(vec![3], &[0.5, 0.5, 0.5]));
        let a = tape.mul(x, w).unwrap();
        let b = tape.mul(x, w).unwrap();
        let c = tape.add(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(w).unwrap().data(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn softmax_cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let z = tape.param(t(vec![1, 4], &[0.0; 4]));
        let l = tape.softmax_cross_entropy(z, &[2]).unwrap();
        assert!((tape.value(l).item().unwrap() - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(z).unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    fn finite_diff_check(build: impl Fn(&mut Tape<f64>, Var) -> Var, w0: Tensor<f64>) {
        let mut tape = Tape::new();
        let w = tape.param(w0.clone());
        let out = build(&mut tape, w);
        let g = tape.backward(out).unwrap();
        let ga = g.get(w).unwrap().data().to_vec();
        let h = 1e-5;
        for i in 0..w0.numel() {
            let eval = |d: f64| {
                let mut wt = w0.clone();
                wt.data_mut()[i] += d;
                let mut tp = Tape::new();
                let wv = tp.param(wt);
                let o = build(&mut tp, wv);
                tp.value(o).item().unwrap()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            assert!(
                (fd - ga[i]).abs() / (1.0 + fd.abs()) < 1e-6,
                "param {i}: fd {fd} vs tape {}",
                ga[i]
            );
        }
    }

    #[test]
    fn conv_pool_bn_chain_matches_finite_differences() {
        let x0: Vec<f64> = (0..2 * 4 * 4 * 2).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
        let w0: Vec<f64> = (0..3 * 3 * 2 * 3).map(|i| ((i * 13 % 7) as f64 - 3.0) / 4.0).collect();
        let build = |tape: &mut Tape<f64>, w: Var| {
            let x = tape.constant(t(vec![2, 4, 4, 2], &x0));
            let y = tape.conv2d(x, w, 1, 1).unwrap();
            let gamma = tape.constant(t(vec![3], &[1.5, 0.5, -1.0]));
            let beta = tape.constant(t(vec![3], &[0.1, 0.2, 0.3]));
            let y = tape.batch_norm(y, gamma, beta, None, 1e-5).unwrap();
            let y = tape.pool(y, PoolKind::Avg, 2).unwrap();
            let y = tape.global_pool(y, true).unwrap();
            let y2 = tape.mul(y, y).unwrap();
            tape.sum(y2)
        };
        finite_diff_check(build, t(vec![3, 3, 2, 3], &w0));
    }

    #[test]
    fn strided_conv_and_max_pool_match_finite_differences() {
        let x0: Vec<f64> = (0..6 * 6 * 2).map(|i| ((i * 29 % 17) as f64 - 8.0) / 7.0).collect();
        let w0: Vec<f64> = (0..3 * 3 * 2 * 2).map(|i| ((i * 11 % 9) as f64 - 4.0) / 5.0).collect();
        let build = |tape: &mut Tape<f64>, w: Var| {
            let x = tape.constant(t(vec![1, 6, 6, 2], &x0));
            let y = tape.conv2d(x, w, 2, 1).unwrap();
            let y = tape.pool(y, PoolKind::Max, 3).unwrap();
            let y = tape.reshape(y, vec![1, 2]).unwrap();
            tape.softmax_cross_entropy(y, &[1]).unwrap()
        };
        finite_diff_check(build, t(vec![3, 3, 2, 2], &w0));
    }
}
