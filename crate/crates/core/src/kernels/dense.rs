use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

/// `x·w + b` for `x: [N, D]`, `w: [D, K]`, `b: [K]`.
pub fn linear_forward<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("linear")?;
    let (d2, k) = w.dims2("linear")?;
    if d != d2 || b.shape() != [k] {
        return Err(Error::shape(
            "linear",
            format!("x {:?}, w {:?}, b {:?}", x.shape(), w.shape(), b.shape()),
        ));
    }
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        out.extend_from_slice(b.data());
    }
    T::gemm(
        n,
        d,
        k,
        T::one(),
        x.data(),
        d,
        1,
        w.data(),
        k,
        1,
        T::one(),
        &mut out,
        k,
        1,
    );
    Tensor::new(vec![n, k], out)
}

pub struct LinearGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    dy: &Tensor<T>,
    need: [bool; 3],
) -> LinearGrads<T> {
    let (n, d) = (x.shape()[0], x.shape()[1]);
    let k = w.shape()[1];
    let dx = need[0].then(|| {
        let mut dx = vec![T::zero(); n * d];
        T::gemm(
            n,
            k,
            d,
            T::one(),
            dy.data(),
            k,
            1,
            w.data(),
            1,
            k,
            T::zero(),
            &mut dx,
            d,
            1,
        );
        Tensor::new(vec![n, d], dx).expect("linear dx shape")
    });
    let dw = need[1].then(|| {
        let mut dw = vec![T::zero(); d * k];
        T::gemm(
            d,
            n,
            k,
            T::one(),
            x.data(),
            1,
            d,
            dy.data(),
            k,
            1,
            T::zero(),
            &mut dw,
            k,
            1,
        );
        Tensor::new(vec![d, k], dw).expect("linear dw shape")
    });
    let db = need[2].then(|| {
        let mut db = vec![T::zero(); k];
        for row in dy.data().chunks_exact(k) {
            for (acc, &g) in db.iter_mut().zip(row) {
                *acc = *acc + g;
            }
        }
        Tensor::new(vec![k], db).expect("linear db shape")
    });
    LinearGrads { dx, dw, db }
}

/// Row-wise softmax of `[N, K]` logits with max subtraction.
pub fn softmax<T: Scalar>(logits: &Tensor<T>) -> Result<Tensor<T>> {
    let (_, k) = logits.dims2("softmax")?;
    let mut out = Vec::with_capacity(logits.numel());
    for row in logits.data().chunks_exact(k) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total = total + e;
            out.push(e);
        }
        for p in &mut out[start..] {
            *p = *p / total;
        }
    }
    Tensor::new(logits.shape().to_vec(), out)
}

/// Mean cross-entropy of `[N, K]` logits against class indices. Returns the
/// loss and the softmax probabilities needed by the backward pass.
pub fn softmax_cross_entropy_forward<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
) -> Result<(T, Tensor<T>)> {
    let (n, k) = logits.dims2("softmax_cross_entropy")?;
    if labels.len() != n {
        return Err(Error::shape(
            "softmax_cross_entropy",
            format!("{n} rows but {} labels", labels.len()),
        ));
    }
    if let Some(&label) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::LabelOutOfRange { label, classes: k });
    }
    let mut total = 0.0f64;
    for (row, &label) in logits.data().chunks_exact(k).zip(labels) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.iter().fold(T::zero(), |s, &v| s + (v - max).exp()).ln() + max;
        total += (lse - row[label]).as_f64();
    }
    let probs = softmax(logits)?;
    Ok((T::from_f64_lossy(total / n as f64), probs))
}

/// `(softmax − onehot) / N`, scaled by the upstream scalar gradient.
pub fn softmax_cross_entropy_backward<T: Scalar>(
    probs: &Tensor<T>,
    labels: &[usize],
    upstream: T,
) -> Tensor<T> {
    let (n, k) = (probs.shape()[0], probs.shape()[1]);
    let scale = upstream / T::from_usize(n).unwrap();
    let mut grad = probs.data().to_vec();
    for (row, &label) in grad.chunks_exact_mut(k).zip(labels) {
        row[label] = row[label] - T::one();
        for g in row.iter_mut() {
            *g = *g * scale;
        }
    }
    Tensor::new(vec![n, k], grad).expect("cross-entropy gradient shape")
}
