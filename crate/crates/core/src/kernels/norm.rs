//! Per-channel batch normalization over `N×H×W`.
//!
//! Batch statistics use the biased variance, accumulated in `f64` in a
//! fixed order. Running statistics are kept in `f32` regardless of the
//! element type being normalized.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

pub const BN_EPS: f32 = 1e-5;
pub const BN_MOMENTUM: f32 = 0.1;

/// Non-trainable state of one batch-norm layer. The affine `gamma`/`beta`
/// are ordinary trainable parameters and live in the parameter store.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f32>,
    pub running_var: Vec<f32>,
    pub momentum: f32,
    pub eps: f32,
}

impl BatchNormState {
    pub fn new(channels: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: BN_MOMENTUM,
            eps: BN_EPS,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    /// `running = (1 − m)·running + m·batch`.
    fn update(&mut self, mean: &[f64], var: &[f64]) {
        let m = self.momentum as f64;
        for (r, &b) in self.running_mean.iter_mut().zip(mean) {
            *r = ((1.0 - m) * *r as f64 + m * b) as f32;
        }
        for (r, &b) in self.running_var.iter_mut().zip(var) {
            *r = ((1.0 - m) * *r as f64 + m * b).max(0.0) as f32;
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Mode plus access to the layer state: train mode updates the running
/// statistics, eval mode only reads them.
pub enum BnMode<'a> {
    Train(&'a mut BatchNormState),
    Eval(&'a BatchNormState),
}

impl BnMode<'_> {
    fn state(&self) -> &BatchNormState {
        match self {
            BnMode::Train(s) => s,
            BnMode::Eval(s) => s,
        }
    }
}

/// Values the backward pass needs.
#[derive(Clone, Debug)]
pub struct BnSaved<T> {
    pub xhat: Tensor<T>,
    pub inv_std: Vec<T>,
    pub mode: Mode,
}

fn check(
    x: &Tensor<impl Scalar>,
    gamma: &[impl Scalar],
    beta: &[impl Scalar],
    state: &BatchNormState,
) -> Result<(usize, usize, usize)> {
    let (n, c, h, w) = x.dims4("batchnorm2d")?;
    if gamma.len() != c || beta.len() != c || state.channels() != c {
        return Err(Error::shape(
            "batchnorm2d",
            format!(
                "input has {c} channels; gamma {}, beta {}, state {}",
                gamma.len(),
                beta.len(),
                state.channels()
            ),
        ));
    }
    Ok((n, c, h * w))
}

/// Sum in `f64` over eight interleaved lanes, combined pairwise. The
/// order depends only on the slice length, so results are reproducible.
fn lane_sum<T: Scalar>(xs: &[T], f: impl Fn(usize, T) -> f64) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail = chunks.remainder();
    for (ci, chunk) in chunks.enumerate() {
        for (l, &v) in chunk.iter().enumerate() {
            acc[l] += f(ci * 8 + l, v);
        }
    }
    let base = xs.len() - tail.len();
    for (l, &v) in tail.iter().enumerate() {
        acc[l] += f(base + l, v);
    }
    ((acc[0] + acc[4]) + (acc[2] + acc[6])) + ((acc[1] + acc[5]) + (acc[3] + acc[7]))
}

pub fn batchnorm2d_forward<T: Scalar>(
    x: &Tensor<T>,
    gamma: &[T],
    beta: &[T],
    mode: BnMode<'_>,
) -> Result<(Tensor<T>, BnSaved<T>)> {
    let (n, c, hw) = check(x, gamma, beta, mode.state())?;
    let xd = x.data();
    let eps = mode.state().eps as f64;
    let plane = |img: usize, ch: usize| &xd[(img * c + ch) * hw..(img * c + ch + 1) * hw];
    let (mean, var, mode): (Vec<f64>, Vec<f64>, Mode) = match mode {
        BnMode::Train(state) => {
            let count = (n * hw) as f64;
            let mut mean = vec![0.0f64; c];
            for img in 0..n {
                for (ch, m) in mean.iter_mut().enumerate() {
                    *m += lane_sum(plane(img, ch), |_, v| v.as_f64());
                }
            }
            mean.iter_mut().for_each(|m| *m /= count);
            let mut var = vec![0.0f64; c];
            for img in 0..n {
                for (ch, s) in var.iter_mut().enumerate() {
                    let mu = mean[ch];
                    *s += lane_sum(plane(img, ch), |_, v| {
                        let d = v.as_f64() - mu;
                        d * d
                    });
                }
            }
            var.iter_mut().for_each(|s| *s /= count);
            state.update(&mean, &var);
            (mean, var, Mode::Train)
        }
        BnMode::Eval(state) => (
            state.running_mean.iter().map(|&v| v as f64).collect(),
            state.running_var.iter().map(|&v| v as f64).collect(),
            Mode::Eval,
        ),
    };
    let inv_std: Vec<T> = var
        .iter()
        .map(|&v| T::from_f64_lossy(1.0 / (v + eps).sqrt()))
        .collect();
    let mean_t: Vec<T> = mean.iter().map(|&m| T::from_f64_lossy(m)).collect();

    let mut xhat = vec![T::zero(); xd.len()];
    let mut y = vec![T::zero(); xd.len()];
    let planes = xd
        .chunks_exact(hw)
        .zip(xhat.chunks_exact_mut(hw))
        .zip(y.chunks_exact_mut(hw));
    for (p, ((src, xh), out)) in planes.enumerate() {
        let ch = p % c;
        let (mu, is, g, b) = (mean_t[ch], inv_std[ch], gamma[ch], beta[ch]);
        for ((&v, h), o) in src.iter().zip(xh.iter_mut()).zip(out.iter_mut()) {
            let nv = (v - mu) * is;
            *h = nv;
            *o = g * nv + b;
        }
    }
    let shape = x.shape().to_vec();
    Ok((
        Tensor::new(shape.clone(), y)?,
        BnSaved {
            xhat: Tensor::new(shape, xhat)?,
            inv_std,
            mode,
        },
    ))
}

pub struct BnGrads<T> {
    pub dx: Tensor<T>,
    pub dgamma: Tensor<T>,
    pub dbeta: Tensor<T>,
}

pub fn batchnorm2d_backward<T: Scalar>(
    saved: &BnSaved<T>,
    gamma: &[T],
    dy: &Tensor<T>,
) -> BnGrads<T> {
    let shape = dy.shape();
    let (c, hw) = (shape[1], shape[2] * shape[3]);
    let dyd = dy.data();
    let xh = saved.xhat.data();

    let mut sum_dy = vec![0.0f64; c];
    let mut sum_dy_xhat = vec![0.0f64; c];
    for (p, (g, h)) in dyd.chunks_exact(hw).zip(xh.chunks_exact(hw)).enumerate() {
        let ch = p % c;
        sum_dy[ch] += lane_sum(g, |_, v| v.as_f64());
        sum_dy_xhat[ch] += lane_sum(g, |i, v| v.as_f64() * h[i].as_f64());
    }
    let sum_dy: Vec<T> = sum_dy.into_iter().map(T::from_f64_lossy).collect();
    let sum_dy_xhat: Vec<T> = sum_dy_xhat.into_iter().map(T::from_f64_lossy).collect();

    let mut dx = vec![T::zero(); dyd.len()];
    let planes = dyd
        .chunks_exact(hw)
        .zip(xh.chunks_exact(hw))
        .zip(dx.chunks_exact_mut(hw));
    match saved.mode {
        Mode::Train => {
            // dx = γ·σ⁻¹/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
            let m = T::from_usize(dyd.len() / c).unwrap();
            for (p, ((g, h), out)) in planes.enumerate() {
                let ch = p % c;
                let scale = gamma[ch] * saved.inv_std[ch] / m;
                let (sd, sdx) = (sum_dy[ch], sum_dy_xhat[ch]);
                for ((&gi, &hi), o) in g.iter().zip(h).zip(out.iter_mut()) {
                    *o = scale * (m * gi - sd - hi * sdx);
                }
            }
        }
        Mode::Eval => {
            for (p, ((g, _), out)) in planes.enumerate() {
                let scale = gamma[p % c] * saved.inv_std[p % c];
                for (&gi, o) in g.iter().zip(out.iter_mut()) {
                    *o = scale * gi;
                }
            }
        }
    }
    BnGrads {
        dx: Tensor::new(shape.to_vec(), dx).expect("bn dx shape"),
        dgamma: Tensor::new(vec![c], sum_dy_xhat).expect("bn dgamma shape"),
        dbeta: Tensor::new(vec![c], sum_dy).expect("bn dbeta shape"),
    }
}
