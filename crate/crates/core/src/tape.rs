//! Reverse-mode automatic differentiation over an append-only record.
//!
//! Every operation appends a node holding its forward value and whatever
//! the backward pass needs. Inputs always precede their consumers, so
//! [`Tape::backward`] walks the record in exact reverse append order and
//! accumulates fan-in contributions in a fixed order. Gradients are only
//! propagated into nodes that (transitively) depend on a grad-enabled leaf.

use std::sync::atomic::{AtomicU64, Ordering};

use crate::error::{Error, Result};
use crate::kernels::{
    self, conv::ConvGeometry, norm::BnSaved, pool::PoolGeometry, BnMode, ConvParams,
};
use crate::tensor::{Scalar, Tensor};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

impl Var {
    pub fn index(&self) -> usize {
        self.index
    }
}

enum Op<T> {
    Leaf,
    Add(usize, usize),
    Mul(usize, usize),
    Relu(usize),
    Linear {
        x: usize,
        w: usize,
        b: usize,
    },
    Conv2d {
        x: usize,
        w: usize,
        b: Option<usize>,
        geom: ConvGeometry,
    },
    AvgPool {
        x: usize,
        geom: PoolGeometry,
    },
    GlobalAvgPool(usize),
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        saved: BnSaved<T>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Tensor<T>,
    },
    Sum(usize),
    WeightedSum {
        x: usize,
        weights: Tensor<T>,
    },
}

impl<T> Op<T> {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Relu(_) => "relu",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::AvgPool { .. } => "avgpool2d",
            Op::GlobalAvgPool(_) => "global_avg_pool",
            Op::BatchNorm { .. } => "batchnorm2d",
            Op::SoftmaxCrossEntropy { .. } => "softmax_cross_entropy",
            Op::Sum(_) => "sum",
            Op::WeightedSum { .. } => "weighted_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Computation record for one forward/backward pass.
pub struct Tape<T: Scalar = f32> {
    id: u64,
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Operation tags in append order.
    pub fn op_tags(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.tag()).collect()
    }

    /// Sign pattern of every relu input on the tape, in record order. Two
    /// evaluations with equal patterns lie in the same smooth piece.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let mut pattern = Vec::new();
        for node in &self.nodes {
            if let Op::Relu(i) = node.op {
                pattern.extend(self.nodes[i].value.data().iter().map(|&v| v > T::zero()));
            }
        }
        pattern
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.index >= self.nodes.len() {
            return Err(Error::StaleRecord);
        }
        Ok(v.index)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[usize]) -> Var {
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        }
    }

    /// Grad-enabled leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor<T>> {
        Ok(&self.nodes[self.idx(v)?].value)
    }

    pub fn requires_grad(&self, v: Var) -> Result<bool> {
        Ok(self.nodes[self.idx(v)?].requires_grad)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x + y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Add(ia, ib), &[ia, ib]))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.idx(a)?, self.idx(b)?);
        let (va, vb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| x * y)
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(ia, ib), &[ia, ib]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let ia = self.idx(a)?;
        let va = &self.nodes[ia].value;
        let data = va
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        let out = Tensor::new(va.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu(ia), &[ia]))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (ix, iw, ib) = (self.idx(x)?, self.idx(w)?, self.idx(b)?);
        let out = kernels::linear_forward(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            &self.nodes[ib].value,
        )?;
        Ok(self.push(
            out,
            Op::Linear {
                x: ix,
                w: iw,
                b: ib,
            },
            &[ix, iw, ib],
        ))
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, params: ConvParams) -> Result<Var> {
        let (ix, iw) = (self.idx(x)?, self.idx(w)?);
        let ib = b.map(|b| self.idx(b)).transpose()?;
        let (out, geom) = kernels::conv2d_forward(
            &self.nodes[ix].value,
            &self.nodes[iw].value,
            ib.map(|i| &self.nodes[i].value),
            params,
        )?;
        let mut inputs = vec![ix, iw];
        inputs.extend(ib);
        Ok(self.push(
            out,
            Op::Conv2d {
                x: ix,
                w: iw,
                b: ib,
                geom,
            },
            &inputs,
        ))
    }

    pub fn avgpool2d(&mut self, x: Var, kernel: usize, stride: usize) -> Result<Var> {
        let ix = self.idx(x)?;
        let (out, geom) = kernels::avgpool2d_forward(&self.nodes[ix].value, kernel, stride)?;
        Ok(self.push(out, Op::AvgPool { x: ix, geom }, &[ix]))
    }

    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let out = kernels::global_avg_pool_forward(&self.nodes[ix].value)?;
        Ok(self.push(out, Op::GlobalAvgPool(ix), &[ix]))
    }

    pub fn batchnorm2d(&mut self, x: Var, gamma: Var, beta: Var, mode: BnMode<'_>) -> Result<Var> {
        let (ix, ig, ib) = (self.idx(x)?, self.idx(gamma)?, self.idx(beta)?);
        let (out, saved) = kernels::batchnorm2d_forward(
            &self.nodes[ix].value,
            self.nodes[ig].value.data(),
            self.nodes[ib].value.data(),
            mode,
        )?;
        Ok(self.push(
            out,
            Op::BatchNorm {
                x: ix,
                gamma: ig,
                beta: ib,
                saved,
            },
            &[ix, ig, ib],
        ))
    }

    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let il = self.idx(logits)?;
        let (loss, probs) = kernels::softmax_cross_entropy_forward(&self.nodes[il].value, labels)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits: il,
                labels: labels.to_vec(),
                probs,
            },
            &[il],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let ix = self.idx(x)?;
        let total = self.nodes[ix]
            .value
            .data()
            .iter()
            .fold(T::zero(), |a, &v| a + v);
        Ok(self.push(Tensor::scalar(total), Op::Sum(ix), &[ix]))
    }

    /// `Σ xᵢ·wᵢ` against a constant weight tensor of the same shape.
    pub fn weighted_sum(&mut self, x: Var, weights: Tensor<T>) -> Result<Var> {
        let ix = self.idx(x)?;
        let vx = &self.nodes[ix].value;
        if vx.shape() != weights.shape() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{:?} vs {:?}", vx.shape(), weights.shape()),
            ));
        }
        let total = vx
            .data()
            .iter()
            .zip(weights.data())
            .fold(T::zero(), |a, (&v, &w)| a + v * w);
        Ok(self.push(
            Tensor::scalar(total),
            Op::WeightedSum { x: ix, weights },
            &[ix],
        ))
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let il = self.idx(loss)?;
        let lv = &self.nodes[il].value;
        if lv.numel() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[il] = Some(Tensor::full(lv.shape(), T::one()));

        for i in (0..=il).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            // Intermediate gradients are released once propagated.
            let Some(g) = grads[i].take() else { continue };
            self.propagate(&node.op, &g, &mut grads);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].requires_grad
    }

    fn propagate(&self, op: &Op<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |i: usize, contrib: Tensor<T>| match &mut grads[i] {
            Some(existing) => existing.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, g.clone());
                }
                if self.needs(*b) {
                    acc(*b, g.clone());
                }
            }
            Op::Mul(a, b) => {
                let product = |other: usize| {
                    let o = &self.nodes[other].value;
                    let data = o
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&ov, &gv)| ov * gv)
                        .collect();
                    Tensor::new(o.shape().to_vec(), data).expect("mul grad")
                };
                if self.needs(*a) {
                    acc(*a, product(*b));
                }
                if self.needs(*b) {
                    acc(*b, product(*a));
                }
            }
            Op::Relu(a) => {
                if self.needs(*a) {
                    let x = &self.nodes[*a].value;
                    let data = x
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&xv, &gv)| if xv > T::zero() { gv } else { T::zero() })
                        .collect();
                    acc(
                        *a,
                        Tensor::new(x.shape().to_vec(), data).expect("relu grad"),
                    );
                }
            }
            Op::Linear { x, w, b } => {
                let r = kernels::linear_backward(
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    [self.needs(*x), self.needs(*w), self.needs(*b)],
                );
                for (i, t) in [(*x, r.dx), (*w, r.dw), (*b, r.db)] {
                    if let Some(t) = t {
                        acc(i, t);
                    }
                }
            }
            Op::Conv2d { x, w, b, geom } => {
                let r = kernels::conv2d_backward(
                    geom,
                    &self.nodes[*x].value,
                    &self.nodes[*w].value,
                    g,
                    self.needs(*x),
                    self.needs(*w),
                    b.is_some_and(|b| self.needs(b)),
                );
                if let Some(t) = r.dx {
                    acc(*x, t);
                }
                if let Some(t) = r.dw {
                    acc(*w, t);
                }
                if let (Some(b), Some(t)) = (b, r.db) {
                    acc(*b, t);
                }
            }
            Op::AvgPool { x, geom } => {
                if self.needs(*x) {
                    acc(*x, kernels::avgpool2d_backward(geom, g));
                }
            }
            Op::GlobalAvgPool(x) => {
                if self.needs(*x) {
                    acc(
                        *x,
                        kernels::global_avg_pool_backward(self.nodes[*x].value.shape(), g),
                    );
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                saved,
            } => {
                let r = kernels::batchnorm2d_backward(saved, self.nodes[*gamma].value.data(), g);
                if self.needs(*x) {
                    acc(*x, r.dx);
                }
                if self.needs(*gamma) {
                    acc(*gamma, r.dgamma);
                }
                if self.needs(*beta) {
                    acc(*beta, r.dbeta);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if self.needs(*logits) {
                    acc(
                        *logits,
                        kernels::softmax_cross_entropy_backward(probs, labels, g.data()[0]),
                    );
                }
            }
            Op::Sum(x) => {
                if self.needs(*x) {
                    acc(*x, Tensor::full(self.nodes[*x].value.shape(), g.data()[0]));
                }
            }
            Op::WeightedSum { x, weights } => {
                if self.needs(*x) {
                    let s = g.data()[0];
                    let data = weights.data().iter().map(|&w| w * s).collect();
                    acc(
                        *x,
                        Tensor::new(weights.shape().to_vec(), data).expect("weighted grad"),
                    );
                }
            }
        }
    }
}

/// Leaf gradients of one backward sweep, keyed by recorded variable.
pub struct Gradients<T: Scalar = f32> {
    tape: u64,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of the loss with respect to leaf `v`; `None` when `v` does
    /// not influence the loss or is not grad-enabled.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index)?.as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.index)?.take()
    }
}
