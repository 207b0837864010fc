//! Direct 2D convolution, forward and backward.
//!
//! Loops are arranged so the inner dimension is a contiguous run over output
//! (or input) columns, which the compiler vectorizes. No im2col buffer. The
//! batch dimension is processed in parallel; every output element has a fixed
//! summation order, so results are bit-identical for any thread count.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::layers::{Param, ParamRole};
use crate::tensor::{Element, Tensor};

#[derive(Clone, Debug)]
pub struct Conv2d<E> {
    pub weight: Param<E>, // O x I x kh x kw
    pub bias: Param<E>,   // O
    pub stride: usize,
    pub padding: usize,
}

/// Backward needs the forward input.
#[derive(Clone, Debug)]
pub struct ConvCache<E> {
    input: Tensor<E>,
}

impl<E: Element> Conv2d<E> {
    pub fn new(in_ch: usize, out_ch: usize, kernel: usize, stride: usize, padding: usize) -> Result<Self> {
        if !(stride == 1 || stride == 2) {
            return Err(Error::Config(format!("conv stride must be 1 or 2, got {stride}")));
        }
        if in_ch == 0 || out_ch == 0 || kernel == 0 {
            return Err(Error::Config("conv channels and kernel must be positive".into()));
        }
        Ok(Conv2d {
            weight: Param::zeros(&[out_ch, in_ch, kernel, kernel], ParamRole::ConvWeight),
            bias: Param::zeros(&[out_ch], ParamRole::Bias),
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.value.shape()[0]
    }

    pub fn in_channels(&self) -> usize {
        self.weight.value.shape()[1]
    }

    pub fn kernel(&self) -> usize {
        self.weight.value.shape()[2]
    }

    pub fn describe(&self) -> String {
        format!(
            "conv2d({}->{} k{} s{} p{})",
            self.in_channels(),
            self.out_channels(),
            self.kernel(),
            self.stride,
            self.padding
        )
    }

    /// `floor((in + 2*pad - kernel)/stride) + 1`, rejecting degenerate sizes.
    pub fn output_extent(&self, input: usize) -> Result<usize> {
        let padded = input + 2 * self.padding;
        if padded < self.kernel() {
            return Err(Error::Config(format!(
                "{}: input extent {input} smaller than kernel",
                self.describe()
            )));
        }
        Ok((padded - self.kernel()) / self.stride + 1)
    }

    fn check_input(&self, x: &Tensor<E>) -> Result<(usize, usize, usize, usize)> {
        let s = x.shape();
        if s.len() != 4 || s[1] != self.in_channels() {
            return Err(Error::shape(
                self.describe(),
                format!("N x {} x H x W", self.in_channels()),
                s,
            ));
        }
        x.check_finite(&self.describe())?;
        Ok((s[0], s[1], s[2], s[3]))
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<(Tensor<E>, ConvCache<E>)> {
        let (n, in_ch, h, w) = self.check_input(x)?;
        let oh = self.output_extent(h)?;
        let ow = self.output_extent(w)?;
        let out_ch = self.out_channels();
        let k = self.kernel();
        let (stride, pad) = (self.stride, self.padding);
        let weight = self.weight.value.data();
        let bias = self.bias.value.data();

        let mut y = Tensor::zeros(&[n, out_ch, oh, ow]);
        let sample_in = in_ch * h * w;
        let sample_out = out_ch * oh * ow;
        let x_data = x.data();

        y.data_mut()
            .par_chunks_mut(sample_out)
            .zip(x_data.par_chunks(sample_in))
            .for_each(|(y_n, x_n)| {
                for o in 0..out_ch {
                    let y_o = &mut y_n[o * oh * ow..(o + 1) * oh * ow];
                    y_o.iter_mut().for_each(|v| *v = bias[o]);
                    for i in 0..in_ch {
                        let x_i = &x_n[i * h * w..(i + 1) * h * w];
                        let w_oi = &weight[(o * in_ch + i) * k * k..(o * in_ch + i + 1) * k * k];
                        for ky in 0..k {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let x_row = &x_i[iy as usize * w..(iy as usize + 1) * w];
                                let y_row = &mut y_o[oy * ow..(oy + 1) * ow];
                                for kx in 0..k {
                                    let wv = w_oi[ky * k + kx];
                                    accumulate_row(y_row, x_row, wv, stride, kx as isize - pad as isize, w);
                                }
                            }
                        }
                    }
                }
            });

        Ok((y, ConvCache { input: x.clone() }))
    }

    /// Gradients w.r.t. input, weight, and bias. Weight/bias gradients are
    /// accumulated into the param buffers; the input gradient is returned.
    pub fn backward(&mut self, cache: &ConvCache<E>, grad_out: &Tensor<E>) -> Result<Tensor<E>> {
        let x = &cache.input;
        let (n, in_ch, h, w) = {
            let s = x.shape();
            (s[0], s[1], s[2], s[3])
        };
        let oh = self.output_extent(h)?;
        let ow = self.output_extent(w)?;
        let out_ch = self.out_channels();
        let k = self.kernel();
        let expected = [n, out_ch, oh, ow];
        if grad_out.shape() != expected {
            return Err(Error::shape(
                format!("{} backward", self.describe()),
                format!("{expected:?}"),
                grad_out.shape(),
            ));
        }
        let (stride, pad) = (self.stride, self.padding);
        let sample_in = in_ch * h * w;
        let sample_out = out_ch * oh * ow;
        let x_data = x.data();
        let g_data = grad_out.data();

        // d/d bias
        for o in 0..out_ch {
            let mut acc = E::zero();
            for nn in 0..n {
                let g_o = &g_data[nn * sample_out + o * oh * ow..nn * sample_out + (o + 1) * oh * ow];
                for v in g_o {
                    acc += *v;
                }
            }
            self.bias.grad.data_mut()[o] += acc;
        }

        // d/d weight, parallel over output channels (each entry's
        // accumulation order over n, oy is fixed).
        let kk = k * k;
        self.weight
            .grad
            .data_mut()
            .par_chunks_mut(in_ch * kk)
            .enumerate()
            .for_each(|(o, gw_o)| {
                for i in 0..in_ch {
                    for ky in 0..k {
                        for kx in 0..k {
                            let mut acc = E::zero();
                            for nn in 0..n {
                                let x_i = &x_data[nn * sample_in + i * h * w..nn * sample_in + (i + 1) * h * w];
                                let g_o = &g_data
                                    [nn * sample_out + o * oh * ow..nn * sample_out + (o + 1) * oh * ow];
                                for oy in 0..oh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    let x_row = &x_i[iy as usize * w..(iy as usize + 1) * w];
                                    let g_row = &g_o[oy * ow..(oy + 1) * ow];
                                    acc += dot_row(g_row, x_row, stride, kx as isize - pad as isize, w);
                                }
                            }
                            gw_o[i * kk + ky * k + kx] += acc;
                        }
                    }
                }
            });

        // d/d input, parallel over samples.
        let weight = self.weight.value.data();
        let mut gx = Tensor::zeros(&[n, in_ch, h, w]);
        gx.data_mut()
            .par_chunks_mut(sample_in)
            .zip(g_data.par_chunks(sample_out))
            .for_each(|(gx_n, g_n)| {
                for o in 0..out_ch {
                    let g_o = &g_n[o * oh * ow..(o + 1) * oh * ow];
                    for i in 0..in_ch {
                        let gx_i = &mut gx_n[i * h * w..(i + 1) * h * w];
                        let w_oi = &weight[(o * in_ch + i) * kk..(o * in_ch + i + 1) * kk];
                        for ky in 0..k {
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                let gx_row = &mut gx_i[iy as usize * w..(iy as usize + 1) * w];
                                let g_row = &g_o[oy * ow..(oy + 1) * ow];
                                for kx in 0..k {
                                    let wv = w_oi[ky * k + kx];
                                    scatter_row(gx_row, g_row, wv, stride, kx as isize - pad as isize, w);
                                }
                            }
                        }
                    }
                }
            });

        Ok(gx)
    }
}

/// `y[ox] += wv * x[ox*stride + off]` over the valid `ox` range.
#[inline]
fn accumulate_row<E: Element>(y_row: &mut [E], x_row: &[E], wv: E, stride: usize, off: isize, w: usize) {
    if wv == E::zero() {
        return;
    }
    let ow = y_row.len();
    let (lo, hi) = valid_range(ow, stride, off, w);
    if stride == 1 {
        let base = (lo as isize + off) as usize;
        for (yv, xv) in y_row[lo..hi].iter_mut().zip(&x_row[base..base + (hi - lo)]) {
            *yv += wv * *xv;
        }
    } else {
        for ox in lo..hi {
            let ix = (ox * stride) as isize + off;
            y_row[ox] += wv * x_row[ix as usize];
        }
    }
}

/// `sum over ox of g[ox] * x[ox*stride + off]`.
#[inline]
fn dot_row<E: Element>(g_row: &[E], x_row: &[E], stride: usize, off: isize, w: usize) -> E {
    let ow = g_row.len();
    let (lo, hi) = valid_range(ow, stride, off, w);
    let mut acc = E::zero();
    if stride == 1 {
        let base = (lo as isize + off) as usize;
        for (gv, xv) in g_row[lo..hi].iter().zip(&x_row[base..base + (hi - lo)]) {
            acc += *gv * *xv;
        }
    } else {
        for ox in lo..hi {
            let ix = (ox * stride) as isize + off;
            acc += g_row[ox] * x_row[ix as usize];
        }
    }
    acc
}

/// `gx[ox*stride + off] += wv * g[ox]`.
#[inline]
fn scatter_row<E: Element>(gx_row: &mut [E], g_row: &[E], wv: E, stride: usize, off: isize, w: usize) {
    if wv == E::zero() {
        return;
    }
    let ow = g_row.len();
    let (lo, hi) = valid_range(ow, stride, off, w);
    if stride == 1 {
        let base = (lo as isize + off) as usize;
        for (xv, gv) in gx_row[base..base + (hi - lo)].iter_mut().zip(&g_row[lo..hi]) {
            *xv += wv * *gv;
        }
    } else {
        for ox in lo..hi {
            let ix = (ox * stride) as isize + off;
            gx_row[ix as usize] += wv * g_row[ox];
        }
    }
}

/// Output-column range `[lo, hi)` for which `ox*stride + off` lands in `[0, w)`.
#[inline]
fn valid_range(ow: usize, stride: usize, off: isize, w: usize) -> (usize, usize) {
    // ox*stride + off >= 0  =>  ox >= ceil(-off / stride)
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    // ox*stride + off < w  =>  ox <= floor((w - 1 - off) / stride)
    let hi_inc = w as isize - 1 - off;
    if hi_inc < 0 {
        return (0, 0);
    }
    let hi = (hi_inc as usize / stride + 1).min(ow);
    (lo.min(hi), hi)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identity_kernel_passes_input_through() {
        let mut conv = Conv2d::<f32>::new(1, 1, 1, 1, 0).unwrap();
        conv.weight.value.data_mut()[0] = 1.0;
        let x = Tensor::from_vec(&[1, 1, 2, 3], vec![1.0, -2.0, 3.0, 4.0, 0.5, -0.5]).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn output_extent_matches_formula() {
        for (input, k, s, p) in [(32, 3, 1, 1), (32, 3, 2, 1), (7, 3, 2, 1), (16, 1, 2, 0), (5, 3, 1, 0)] {
            let conv = Conv2d::<f32>::new(1, 1, k, s, p).unwrap();
            let got = conv.output_extent(input).unwrap();
            assert_eq!(got, (input + 2 * p - k) / s + 1);
        }
    }

    #[test]
    fn known_3x3_convolution() {
        // 3x3 input, 3x3 all-ones kernel, pad 1: center output is the sum of
        // all inputs; corner output is the sum of a 2x2 patch.
        let mut conv = Conv2d::<f64>::new(1, 1, 3, 1, 1).unwrap();
        conv.weight.value.fill(1.0);
        let x = Tensor::from_vec(&[1, 1, 3, 3], (1..=9).map(f64::from).collect()).unwrap();
        let (y, _) = conv.forward(&x).unwrap();
        assert_eq!(y.data()[y.at4(0, 0, 1, 1)], 45.0);
        assert_eq!(y.data()[y.at4(0, 0, 0, 0)], 1.0 + 2.0 + 4.0 + 5.0);
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let conv = Conv2d::<f32>::new(2, 1, 3, 1, 1).unwrap();
        let x = Tensor::zeros(&[1, 3, 8, 8]);
        let err = conv.forward(&x).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("conv2d(2->1"), "diagnostic names the layer: {msg}");
        assert!(msg.contains("[1, 3, 8, 8]"), "diagnostic names the shape: {msg}");
    }

    #[test]
    fn rejects_non_finite_input() {
        let conv = Conv2d::<f32>::new(1, 1, 3, 1, 1).unwrap();
        let mut x = Tensor::zeros(&[1, 1, 4, 4]);
        x.data_mut()[5] = f32::INFINITY;
        assert!(matches!(conv.forward(&x), Err(Error::NonFinite { .. })));
    }
}
