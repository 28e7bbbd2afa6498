//! Grouped 2-D cross-correlation via per-image im2col + GEMM.
//!
//! Each image and group is lowered to a `[cin_g·kh·kw, hout·wout]` column
//! matrix and multiplied by the group's `[cout_g, cin_g·kh·kw]` filter
//! slice. Images are processed in order, so weight-gradient accumulation is
//! deterministic. 1×1 stride-1 unpadded convolutions skip the lowering.

use crate::error::{Error, Result};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvParams {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvParams {
    pub fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvParams {
            stride,
            padding,
            groups,
        }
    }
}

impl Default for ConvParams {
    fn default() -> Self {
        ConvParams::new(1, 0, 1)
    }
}

#[derive(Clone, Copy, Debug)]
pub struct ConvGeometry {
    pub n: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub hout: usize,
    pub wout: usize,
    pub params: ConvParams,
}

impl ConvGeometry {
    pub fn new(x_shape: &[usize], w_shape: &[usize], params: ConvParams) -> Result<Self> {
        let &[n, cin, h, w] = x_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("input must be NCHW, got {x_shape:?}"),
            ));
        };
        let &[cout, cin_g, kh, kw] = w_shape else {
            return Err(Error::shape(
                "conv2d",
                format!("weight must be [Cout, Cin/g, kh, kw], got {w_shape:?}"),
            ));
        };
        let ConvParams {
            stride,
            padding,
            groups,
        } = params;
        if stride == 0 || groups == 0 {
            return Err(Error::InvalidArgument(
                "conv2d stride and groups must be positive".into(),
            ));
        }
        if cin % groups != 0 || cout % groups != 0 {
            return Err(Error::shape(
                "conv2d",
                format!("channels {cin}->{cout} not divisible by {groups} groups"),
            ));
        }
        if cin / groups != cin_g {
            return Err(Error::shape(
                "conv2d",
                format!(
                    "weight expects {cin_g} input channels per group, input has {}",
                    cin / groups
                ),
            ));
        }
        let ph = h + 2 * padding;
        let pw = w + 2 * padding;
        if ph < kh || pw < kw {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kh}x{kw} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(ConvGeometry {
            n,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            hout: (ph - kh) / stride + 1,
            wout: (pw - kw) / stride + 1,
            params,
        })
    }

    fn cin_g(&self) -> usize {
        self.cin / self.params.groups
    }

    fn cout_g(&self) -> usize {
        self.cout / self.params.groups
    }

    /// Rows of the column matrix.
    fn k(&self) -> usize {
        self.cin_g() * self.kh * self.kw
    }

    fn spatial_out(&self) -> usize {
        self.hout * self.wout
    }

    fn is_pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.params.stride == 1 && self.params.padding == 0
    }

    pub fn output_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.hout, self.wout]
    }
}

/// Output columns `[lo, hi)` whose input column `ox·stride − pad + kj`
/// falls inside `[0, w)`.
fn valid_range(
    out: usize,
    stride: usize,
    pad: usize,
    k_off: usize,
    extent: usize,
) -> (usize, usize) {
    // ox·s + k_off ≥ pad  and  ox·s + k_off − pad < extent
    let lo = if k_off >= pad {
        0
    } else {
        (pad - k_off).div_ceil(stride)
    };
    let hi = if extent + pad > k_off {
        ((extent + pad - k_off - 1) / stride + 1).min(out)
    } else {
        0
    };
    (lo.min(hi), hi)
}

/// Lowers the channel slice `x_img` (`[cin_g, h, w]`) into `cols`.
fn im2col<T: Scalar>(g: &ConvGeometry, x_img: &[T], cols: &mut [T]) {
    let (stride, pad) = (g.params.stride, g.params.padding);
    let hw_out = g.spatial_out();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &x_img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.hout, stride, pad, ki, g.h);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.wout, stride, pad, kj, g.w);
                let dst = &mut cols[row * hw_out..(row + 1) * hw_out];
                for oy in 0..g.hout {
                    let out_row = &mut dst[oy * g.wout..(oy + 1) * g.wout];
                    if oy < oy_lo || oy >= oy_hi || ox_lo >= ox_hi {
                        out_row.fill(T::zero());
                        continue;
                    }
                    let iy = oy * stride + ki - pad;
                    let in_row = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..ox_lo].fill(T::zero());
                    out_row[ox_hi..].fill(T::zero());
                    let ix0 = ox_lo * stride + kj - pad;
                    if stride == 1 {
                        out_row[ox_lo..ox_hi].copy_from_slice(&in_row[ix0..ix0 + (ox_hi - ox_lo)]);
                    } else {
                        for (o, ix) in out_row[ox_lo..ox_hi]
                            .iter_mut()
                            .zip((ix0..).step_by(stride))
                        {
                            *o = in_row[ix];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}

/// Scatter-adds `cols` back onto the channel slice `dx_img`.
fn col2im_add<T: Scalar>(g: &ConvGeometry, cols: &[T], dx_img: &mut [T]) {
    let (stride, pad) = (g.params.stride, g.params.padding);
    let hw_out = g.spatial_out();
    let mut row = 0;
    for c in 0..g.cin_g() {
        let plane = &mut dx_img[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ki in 0..g.kh {
            let (oy_lo, oy_hi) = valid_range(g.hout, stride, pad, ki, g.h);
            for kj in 0..g.kw {
                let (ox_lo, ox_hi) = valid_range(g.wout, stride, pad, kj, g.w);
                let src = &cols[row * hw_out..(row + 1) * hw_out];
                row += 1;
                if ox_lo >= ox_hi {
                    continue;
                }
                for oy in oy_lo..oy_hi {
                    let iy = oy * stride + ki - pad;
                    let in_row = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s_row = &src[oy * g.wout + ox_lo..oy * g.wout + ox_hi];
                    let ix0 = ox_lo * stride + kj - pad;
                    if stride == 1 {
                        for (d, &v) in in_row[ix0..ix0 + s_row.len()].iter_mut().zip(s_row) {
                            *d = *d + v;
                        }
                    } else {
                        for (&v, ix) in s_row.iter().zip((ix0..).step_by(stride)) {
                            in_row[ix] = in_row[ix] + v;
                        }
                    }
                }
            }
        }
    }
}

/// Transposed lowering from a channel-last image: row `p` of `rows`
/// (`[hout·wout, kh·kw·cin_g]`, kernel-position-major) holds the receptive
/// field of output pixel `p`. `x_hwc` is `[h·w, cin_g]`.
fn im2row_hwc<T: Scalar>(g: &ConvGeometry, x_hwc: &[T], rows: &mut [T]) {
    let (stride, pad) = (g.params.stride as isize, g.params.padding as isize);
    let (h, w) = (g.h as isize, g.w as isize);
    let c = g.cin_g();
    let k = g.k();
    let mut p = 0;
    for oy in 0..g.hout as isize {
        for ox in 0..g.wout as isize {
            let dst = &mut rows[p * k..(p + 1) * k];
            let mut idx = 0;
            for ki in 0..g.kh as isize {
                let iy = oy * stride - pad + ki;
                for kj in 0..g.kw as isize {
                    let ix = ox * stride - pad + kj;
                    let run = &mut dst[idx..idx + c];
                    if iy >= 0 && iy < h && ix >= 0 && ix < w {
                        let src = ((iy * w + ix) as usize) * c;
                        run.copy_from_slice(&x_hwc[src..src + c]);
                    } else {
                        run.fill(T::zero());
                    }
                    idx += c;
                }
            }
            p += 1;
        }
    }
}

/// Writes the `rows×cols` row-major `src` transposed into `dst`.
fn transpose_into<T: Scalar>(src: &[T], rows: usize, cols: usize, dst: &mut [T]) {
    for r in 0..rows {
        for (c, &v) in src[r * cols..(r + 1) * cols].iter().enumerate() {
            dst[c * rows + r] = v;
        }
    }
}

pub fn conv2d_forward<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    params: ConvParams,
) -> Result<(Tensor<T>, ConvGeometry)> {
    let g = ConvGeometry::new(x.shape(), weight.shape(), params)?;
    if let Some(b) = bias {
        if b.shape() != [g.cout] {
            return Err(Error::shape(
                "conv2d",
                format!("bias shape {:?} for {} filters", b.shape(), g.cout),
            ));
        }
    }
    let (cin_g, cout_g, k, hw_out) = (g.cin_g(), g.cout_g(), g.k(), g.spatial_out());
    let hw_in = g.h * g.w;
    let mut out = vec![T::zero(); g.n * g.cout * hw_out];
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * hw_out }];
    let wd = weight.data();
    for img in 0..g.n {
        let x_img = &x.data()[img * g.cin * hw_in..(img + 1) * g.cin * hw_in];
        for grp in 0..params.groups {
            let x_grp = &x_img[grp * cin_g * hw_in..(grp + 1) * cin_g * hw_in];
            let b_mat: &[T] = if g.is_pointwise() {
                x_grp
            } else {
                im2col(&g, x_grp, &mut cols);
                &cols
            };
            let w_grp = &wd[grp * cout_g * k..(grp + 1) * cout_g * k];
            let o_start = (img * g.cout + grp * cout_g) * hw_out;
            let o_grp = &mut out[o_start..o_start + cout_g * hw_out];
            T::gemm(
                cout_g,
                k,
                hw_out,
                T::one(),
                w_grp,
                k,
                1,
                b_mat,
                hw_out,
                1,
                T::zero(),
                o_grp,
                hw_out,
                1,
            );
        }
        if let Some(b) = bias {
            for (co, &bv) in b.data().iter().enumerate() {
                let start = (img * g.cout + co) * hw_out;
                for v in &mut out[start..start + hw_out] {
                    *v = *v + bv;
                }
            }
        }
    }
    Ok((Tensor::new(g.output_shape().to_vec(), out)?, g))
}

pub struct ConvGrads<T> {
    pub dx: Option<Tensor<T>>,
    pub dw: Option<Tensor<T>>,
    pub db: Option<Tensor<T>>,
}

/// Gradients of a convolution given its upstream gradient `dy`.
pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    x: &Tensor<T>,
    weight: &Tensor<T>,
    dy: &Tensor<T>,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<T> {
    let (cin_g, cout_g, k, hw_out) = (g.cin_g(), g.cout_g(), g.k(), g.spatial_out());
    let hw_in = g.h * g.w;
    let groups = g.params.groups;
    let mut dx = need_dx.then(|| vec![T::zero(); x.numel()]);
    let mut dw = need_dw.then(|| vec![T::zero(); weight.numel()]);
    let mut cols = vec![T::zero(); if g.is_pointwise() { 0 } else { k * hw_out }];
    let mut cols_t = vec![T::zero(); if need_dw { k * hw_out } else { 0 }];
    let mut x_hwc = vec![T::zero(); if need_dw { cin_g * hw_in } else { 0 }];
    let wd = weight.data();
    let dyd = dy.data();

    if need_dx || need_dw {
        for img in 0..g.n {
            let x_img = &x.data()[img * g.cin * hw_in..(img + 1) * g.cin * hw_in];
            for grp in 0..groups {
                let dy_start = (img * g.cout + grp * cout_g) * hw_out;
                let dy_grp = &dyd[dy_start..dy_start + cout_g * hw_out];
                if let Some(dw) = dw.as_mut() {
                    let x_grp = &x_img[grp * cin_g * hw_in..(grp + 1) * cin_g * hw_in];
                    if g.is_pointwise() {
                        transpose_into(x_grp, k, hw_out, &mut cols_t);
                    } else {
                        transpose_into(x_grp, cin_g, hw_in, &mut x_hwc);
                        im2row_hwc(g, &x_hwc, &mut cols_t);
                    }
                    // dW_g += dY_g · colsᵀ
                    T::gemm(
                        cout_g,
                        hw_out,
                        k,
                        T::one(),
                        dy_grp,
                        hw_out,
                        1,
                        &cols_t,
                        k,
                        1,
                        T::one(),
                        &mut dw[grp * cout_g * k..(grp + 1) * cout_g * k],
                        k,
                        1,
                    );
                }
                if let Some(dx) = dx.as_mut() {
                    let w_grp = &wd[grp * cout_g * k..(grp + 1) * cout_g * k];
                    let dx_start = (img * g.cin + grp * cin_g) * hw_in;
                    let dx_grp = &mut dx[dx_start..dx_start + cin_g * hw_in];
                    // dcols = W_gᵀ · dY_g
                    if g.is_pointwise() {
                        T::gemm(
                            k,
                            cout_g,
                            hw_out,
                            T::one(),
                            w_grp,
                            1,
                            k,
                            dy_grp,
                            hw_out,
                            1,
                            T::zero(),
                            dx_grp,
                            hw_out,
                            1,
                        );
                    } else {
                        T::gemm(
                            k,
                            cout_g,
                            hw_out,
                            T::one(),
                            w_grp,
                            1,
                            k,
                            dy_grp,
                            hw_out,
                            1,
                            T::zero(),
                            &mut cols,
                            hw_out,
                            1,
                        );
                        col2im_add(g, &cols, dx_grp);
                    }
                }
            }
        }
    }

    // Non-pointwise weight gradients were accumulated kernel-position-major.
    if let Some(dw) = dw.as_mut().filter(|_| !g.is_pointwise()) {
        let taps = g.kh * g.kw;
        let mut row = vec![T::zero(); k];
        for filt in dw.chunks_exact_mut(k) {
            for tap in 0..taps {
                for c in 0..cin_g {
                    row[c * taps + tap] = filt[tap * cin_g + c];
                }
            }
            filt.copy_from_slice(&row);
        }
    }

    let db = need_db.then(|| {
        let mut db = vec![T::zero(); g.cout];
        for img in 0..g.n {
            for (co, acc) in db.iter_mut().enumerate() {
                let start = (img * g.cout + co) * hw_out;
                for &v in &dyd[start..start + hw_out] {
                    *acc = *acc + v;
                }
            }
        }
        Tensor::new(vec![g.cout], db).expect("bias gradient shape")
    });

    ConvGrads {
        dx: dx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("dx shape")),
        dw: dw.map(|d| Tensor::new(weight.shape().to_vec(), d).expect("dw shape")),
        db,
    }
}
