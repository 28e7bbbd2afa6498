use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug)]
pub struct PoolGeometry {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub hout: usize,
    pub wout: usize,
}

impl PoolGeometry {
    pub fn new(shape: &[usize], kernel: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = shape else {
            return Err(Error::shape(
                "avgpool2d",
                format!("input must be NCHW, got {shape:?}"),
            ));
        };
        if kernel == 0 || stride == 0 {
            return Err(Error::InvalidArgument(
                "avgpool2d kernel and stride must be positive".into(),
            ));
        }
        if h < kernel || w < kernel {
            return Err(Error::shape(
                "avgpool2d",
                format!("window {kernel} larger than input {h}x{w}"),
            ));
        }
        Ok(PoolGeometry {
            n,
            c,
            h,
            w,
            kernel,
            stride,
            hout: (h - kernel) / stride + 1,
            wout: (w - kernel) / stride + 1,
        })
    }
}

pub fn avgpool2d_forward<T: Scalar>(
    x: &Tensor<T>,
    kernel: usize,
    stride: usize,
) -> Result<(Tensor<T>, PoolGeometry)> {
    let g = PoolGeometry::new(x.shape(), kernel, stride)?;
    let scale = T::one() / T::from_usize(kernel * kernel).unwrap();
    let mut out = Vec::with_capacity(g.n * g.c * g.hout * g.wout);
    for plane in x.data().chunks_exact(g.h * g.w) {
        for oy in 0..g.hout {
            for ox in 0..g.wout {
                let mut acc = T::zero();
                for ky in 0..kernel {
                    let row = (oy * stride + ky) * g.w + ox * stride;
                    for &v in &plane[row..row + kernel] {
                        acc = acc + v;
                    }
                }
                out.push(acc * scale);
            }
        }
    }
    Ok((Tensor::new(vec![g.n, g.c, g.hout, g.wout], out)?, g))
}

pub fn avgpool2d_backward<T: Scalar>(g: &PoolGeometry, dy: &Tensor<T>) -> Tensor<T> {
    let scale = T::one() / T::from_usize(g.kernel * g.kernel).unwrap();
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for (plane, dplane) in dx
        .chunks_exact_mut(g.h * g.w)
        .zip(dy.data().chunks_exact(g.hout * g.wout))
    {
        for oy in 0..g.hout {
            for ox in 0..g.wout {
                let share = dplane[oy * g.wout + ox] * scale;
                for ky in 0..g.kernel {
                    let row = (oy * g.stride + ky) * g.w + ox * g.stride;
                    for v in &mut plane[row..row + g.kernel] {
                        *v = *v + share;
                    }
                }
            }
        }
    }
    Tensor::new(vec![g.n, g.c, g.h, g.w], dx).expect("pool gradient shape")
}

pub fn global_avg_pool_forward<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, c, h, w) = x.dims4("global_avg_pool")?;
    let denom = T::from_usize(h * w).unwrap();
    let out = x
        .data()
        .chunks_exact(h * w)
        .map(|plane| plane.iter().fold(T::zero(), |a, &v| a + v) / denom)
        .collect();
    Tensor::new(vec![n, c], out)
}

pub fn global_avg_pool_backward<T: Scalar>(x_shape: &[usize], dy: &Tensor<T>) -> Tensor<T> {
    let hw = x_shape[2] * x_shape[3];
    let denom = T::from_usize(hw).unwrap();
    let mut dx = Vec::with_capacity(dy.numel() * hw);
    for &g in dy.data() {
        let share = g / denom;
        dx.extend(std::iter::repeat_n(share, hw));
    }
    Tensor::new(x_shape.to_vec(), dx).expect("global pool gradient shape")
}
