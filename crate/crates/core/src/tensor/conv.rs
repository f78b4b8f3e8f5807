//! 2-D cross-correlation on `[C, H, W]` tensors and its adjoints.
//!
//! `conv2d`, `conv_input_grad` and `conv_weight_grad` are the three bilinear
//! maps of one contraction; each one's backward is expressed through the
//! other two, so the family is closed under differentiation.

use super::ops::backward_fn;
use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Geometry {
    c_in: usize,
    c_out: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

/// Output extent of a convolution, or an error when it is not integral.
pub fn conv_out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Shape("conv2d: stride must be positive".into()));
    }
    let span = input + 2 * pad;
    if span < k {
        return Err(Error::Shape(format!("conv2d: kernel {k} larger than padded input {span}")));
    }
    if (span - k) % stride != 0 {
        return Err(Error::Shape(format!(
            "conv2d: output extent ({input} + 2*{pad} - {k})/{stride} + 1 is not integral"
        )));
    }
    Ok((span - k) / stride + 1)
}

/// Output positions `o` with `o*stride + off - pad` inside `[0, len)`.
fn valid(off: usize, stride: usize, pad: usize, len: usize, out: usize) -> std::ops::Range<usize> {
    let lo = if pad > off { (pad - off).div_ceil(stride) } else { 0 };
    let hi = if len + pad > off { ((len + pad - off - 1) / stride + 1).min(out) } else { 0 };
    lo..hi.max(lo)
}

impl Geometry {
    fn forward(&self, x: &[f64], kern: &[f64]) -> Vec<f64> {
        let g = *self;
        let mut y = vec![0.0; g.c_out * g.oh * g.ow];
        for co in 0..g.c_out {
            let yc = &mut y[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.c_in {
                let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let rows = valid(ky, g.stride, g.pad, g.h, g.oh);
                    for kx in 0..g.k {
                        let wv = kern[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = valid(kx, g.stride, g.pad, g.w, g.ow);
                        if cols.is_empty() {
                            continue;
                        }
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let yrow = &mut yc[oy * g.ow + cols.start..oy * g.ow + cols.end];
                            let xrow = &xc[iy * g.w + cols.start * g.stride + kx - g.pad..(iy + 1) * g.w];
                            if g.stride == 1 {
                                for (y, x) in yrow.iter_mut().zip(xrow) {
                                    *y += wv * x;
                                }
                            } else {
                                for (y, x) in yrow.iter_mut().zip(xrow.iter().step_by(g.stride)) {
                                    *y += wv * x;
                                }
                            }
                        }
                    }
                }
            }
        }
        y
    }

    /// Adjoint of `forward` in the input argument.
    fn input_grad(&self, gy: &[f64], kern: &[f64]) -> Vec<f64> {
        let g = *self;
        let mut gx = vec![0.0; g.c_in * g.h * g.w];
        for co in 0..g.c_out {
            let gc = &gy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.c_in {
                let xc = &mut gx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let rows = valid(ky, g.stride, g.pad, g.h, g.oh);
                    for kx in 0..g.k {
                        let wv = kern[((co * g.c_in + ci) * g.k + ky) * g.k + kx];
                        if wv == 0.0 {
                            continue;
                        }
                        let cols = valid(kx, g.stride, g.pad, g.w, g.ow);
                        if cols.is_empty() {
                            continue;
                        }
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gc[oy * g.ow + cols.start..oy * g.ow + cols.end];
                            let xrow = &mut xc[iy * g.w + cols.start * g.stride + kx - g.pad..(iy + 1) * g.w];
                            if g.stride == 1 {
                                for (x, gv) in xrow.iter_mut().zip(grow) {
                                    *x += wv * gv;
                                }
                            } else {
                                for (x, gv) in xrow.iter_mut().step_by(g.stride).zip(grow) {
                                    *x += wv * gv;
                                }
                            }
                        }
                    }
                }
            }
        }
        gx
    }

    /// Adjoint of `forward` in the kernel argument.
    fn weight_grad(&self, x: &[f64], gy: &[f64]) -> Vec<f64> {
        let g = *self;
        let mut gw = vec![0.0; g.c_out * g.c_in * g.k * g.k];
        for co in 0..g.c_out {
            let gc = &gy[co * g.oh * g.ow..(co + 1) * g.oh * g.ow];
            for ci in 0..g.c_in {
                let xc = &x[ci * g.h * g.w..(ci + 1) * g.h * g.w];
                for ky in 0..g.k {
                    let rows = valid(ky, g.stride, g.pad, g.h, g.oh);
                    for kx in 0..g.k {
                        let cols = valid(kx, g.stride, g.pad, g.w, g.ow);
                        if cols.is_empty() {
                            continue;
                        }
                        let mut acc = 0.0;
                        for oy in rows.clone() {
                            let iy = oy * g.stride + ky - g.pad;
                            let grow = &gc[oy * g.ow + cols.start..oy * g.ow + cols.end];
                            let xrow = &xc[iy * g.w + cols.start * g.stride + kx - g.pad..(iy + 1) * g.w];
                            if g.stride == 1 {
                                acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            } else {
                                acc += grow.iter().zip(xrow.iter().step_by(g.stride)).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                        gw[((co * g.c_in + ci) * g.k + ky) * g.k + kx] = acc;
                    }
                }
            }
        }
        gw
    }
}

fn chw(t: &Tensor, op: &str) -> Result<(usize, usize, usize)> {
    match *t.shape() {
        [c, h, w] => Ok((c, h, w)),
        _ => Err(Error::Shape(format!("{op}: expected [C, H, W], got {:?}", t.shape()))),
    }
}

fn input_grad_op(gy: &Tensor, kernel: &Tensor, geo: Geometry) -> Tensor {
    let data = geo.input_grad(&gy.data(), &kernel.data());
    Tensor::from_op(
        data,
        vec![geo.c_in, geo.h, geo.w],
        &[gy, kernel],
        backward_fn("conv_input_grad", move |inp, up, needs| {
            Ok(vec![
                needs[0].then(|| conv_op(up, &inp[1], geo)),
                needs[1].then(|| weight_grad_op(up, &inp[0], geo)),
            ])
        }),
    )
}

fn weight_grad_op(x: &Tensor, gy: &Tensor, geo: Geometry) -> Tensor {
    let data = geo.weight_grad(&x.data(), &gy.data());
    Tensor::from_op(
        data,
        vec![geo.c_out, geo.c_in, geo.k, geo.k],
        &[x, gy],
        backward_fn("conv_weight_grad", move |inp, up, needs| {
            Ok(vec![
                needs[0].then(|| input_grad_op(&inp[1], up, geo)),
                needs[1].then(|| conv_op(&inp[0], up, geo)),
            ])
        }),
    )
}

fn conv_op(x: &Tensor, kernel: &Tensor, geo: Geometry) -> Tensor {
    let data = geo.forward(&x.data(), &kernel.data());
    Tensor::from_op(
        data,
        vec![geo.c_out, geo.oh, geo.ow],
        &[x, kernel],
        backward_fn("conv2d", move |inp, up, needs| {
            Ok(vec![
                needs[0].then(|| input_grad_op(up, &inp[1], geo)),
                needs[1].then(|| weight_grad_op(&inp[0], up, geo)),
            ])
        }),
    )
}

impl Tensor {
    /// Cross-correlation of a `[C_in, H, W]` input with a
    /// `[C_out, C_in, k, k]` kernel (odd `k`), zero padding `pad`.
    pub fn conv2d(&self, kernel: &Tensor, stride: usize, pad: usize) -> Result<Tensor> {
        let (c_in, h, w) = chw(self, "conv2d")?;
        let (c_out, kc, k) = match *kernel.shape() {
            [co, ci, k1, k2] if k1 == k2 => (co, ci, k1),
            _ => {
                return Err(Error::Shape(format!(
                    "conv2d: kernel must be [C_out, C_in, k, k], got {:?}",
                    kernel.shape()
                )))
            }
        };
        if kc != c_in {
            return Err(Error::Shape(format!(
                "conv2d: input has {c_in} channels, kernel expects {kc}"
            )));
        }
        if k % 2 == 0 {
            return Err(Error::Shape(format!("conv2d: kernel size {k} must be odd")));
        }
        if h < k || w < k {
            return Err(Error::Shape(format!("conv2d: input {h}x{w} smaller than kernel {k}")));
        }
        let oh = conv_out_extent(h, k, stride, pad)?;
        let ow = conv_out_extent(w, k, stride, pad)?;
        let geo = Geometry { c_in, c_out, h, w, k, stride, pad, oh, ow };
        Ok(conv_op(self, kernel, geo))
    }

    /// Broadcasts a `[C]` vector over an `[C, H, W]` grid.
    pub fn channel_broadcast(&self, h: usize, w: usize) -> Result<Tensor> {
        let c = match *self.shape() {
            [c] => c,
            _ => return Err(Error::Shape(format!("channel_broadcast of {:?}", self.shape()))),
        };
        let src = self.data();
        let data: Vec<f64> = src.iter().flat_map(|&v| std::iter::repeat(v).take(h * w)).collect();
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c, h, w],
            &[self],
            backward_fn("channel_broadcast", |_, g, _| Ok(vec![Some(g.channel_sum()?)])),
        ))
    }

    /// Sums each channel of a `[C, H, W]` tensor.
    pub fn channel_sum(&self) -> Result<Tensor> {
        let (c, h, w) = chw(self, "channel_sum")?;
        let src = self.data();
        let data: Vec<f64> = src.chunks(h * w).map(|ch| ch.iter().sum()).collect();
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c],
            &[self],
            backward_fn("channel_sum", move |_, g, _| Ok(vec![Some(g.channel_broadcast(h, w)?)])),
        ))
    }

    /// Adds a per-channel bias to a `[C, H, W]` tensor.
    pub fn add_channel_bias(&self, bias: &Tensor) -> Result<Tensor> {
        let (_, h, w) = chw(self, "add_channel_bias")?;
        self.add(&bias.channel_broadcast(h, w)?)
    }

    /// 2x2 average pooling of a `[C, H, W]` tensor with even `H`, `W`.
    pub fn downsample2x(&self) -> Result<Tensor> {
        let (c, h, w) = chw(self, "downsample2x")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!("downsample2x: extents {h}x{w} must be even")));
        }
        let (oh, ow) = (h / 2, w / 2);
        let src = self.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    let base = ch * h * w;
                    let s = src[base + 2 * y * w + 2 * x]
                        + src[base + 2 * y * w + 2 * x + 1]
                        + src[base + (2 * y + 1) * w + 2 * x]
                        + src[base + (2 * y + 1) * w + 2 * x + 1];
                    data[(ch * oh + y) * ow + x] = 0.25 * s;
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c, oh, ow],
            &[self],
            backward_fn("downsample2x", |_, g, _| Ok(vec![Some(g.spread2x()?)])),
        ))
    }

    /// Alias of [`Tensor::downsample2x`].
    pub fn pool_avg(&self) -> Result<Tensor> {
        self.downsample2x()
    }

    /// Adjoint of `downsample2x`: every cell of a 2x2 block receives a
    /// quarter of the source value.
    fn spread2x(&self) -> Result<Tensor> {
        let (c, h, w) = chw(self, "spread2x")?;
        let (oh, ow) = (2 * h, 2 * w);
        let src = self.data();
        let mut data = vec![0.0; c * oh * ow];
        for ch in 0..c {
            for y in 0..oh {
                for x in 0..ow {
                    data[(ch * oh + y) * ow + x] = 0.25 * src[(ch * h + y / 2) * w + x / 2];
                }
            }
        }
        drop(src);
        Ok(Tensor::from_op(
            data,
            vec![c, oh, ow],
            &[self],
            backward_fn("spread2x", |_, g, _| Ok(vec![Some(g.downsample2x()?)])),
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{check_gradients, GradCheck};
    use crate::tensor::grad;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn ones_kernel_sums_window() {
        let x = Tensor::ones(&[1, 3, 3]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        let y = x.conv2d(&k, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.to_vec(), vec![9.0]);
    }

    #[test]
    fn identity_kernel_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::new(rand_vec(&mut rng, 25), &[1, 5, 5]).unwrap();
        let mut kd = vec![0.0; 9];
        kd[4] = 1.0;
        let k = Tensor::new(kd, &[1, 1, 3, 3]).unwrap();
        assert_eq!(x.conv2d(&k, 1, 1).unwrap().to_vec(), x.to_vec());
    }

    #[test]
    fn non_integral_extent_is_rejected() {
        let x = Tensor::ones(&[1, 6, 6]);
        let k = Tensor::ones(&[1, 1, 3, 3]);
        assert!(x.conv2d(&k, 2, 0).is_err());
        assert!(x.conv2d(&k, 2, 1).is_err());
        assert!(Tensor::ones(&[1, 7, 7]).conv2d(&k, 2, 0).is_ok());
        assert!(x.conv2d(&Tensor::ones(&[1, 1, 2, 2]), 1, 0).is_err());
    }

    #[test]
    fn conv_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_vec(&mut rng, 2 * 8 * 8);
        let k = rand_vec(&mut rng, 3 * 2 * 3 * 3);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1)] {
            let oh = conv_out_extent(8, 3, stride, pad).unwrap_or(0);
            if oh == 0 {
                continue;
            }
            let w = rand_vec(&mut rng, 3 * oh * oh);
            let report = check_gradients(&[x.clone(), k.clone()], &[&[2, 8, 8], &[3, 2, 3, 3]], |t| {
                let y = t[0].conv2d(&t[1], stride, pad)?;
                Ok(y.mul(&Tensor::new(w.clone(), y.shape())?)?.sum())
            })
            .unwrap();
            assert!(report.max_rel_error < 1e-5, "stride {stride} pad {pad}: {report:?}");
        }
    }

    #[test]
    fn conv_double_backward_matches_finite_differences() {
        // d/dk of ||d/dx sum(w * conv(x, k))||^2, the R1 pattern.
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let x = rand_vec(&mut rng, 7 * 7);
        let k = rand_vec(&mut rng, 2 * 9);
        let w = rand_vec(&mut rng, 2 * 4 * 4);
        let report = GradCheck::default()
            .run(&[k], &[&[2, 1, 3, 3]], |t| {
                let xin = Tensor::param(x.clone(), &[1, 7, 7])?;
                let y = xin.conv2d(&t[0], 2, 1)?.leaky_relu(0.2);
                let s = y.mul(&Tensor::new(w.clone(), y.shape())?)?.sum();
                let gx = grad(&s, &[&xin], true)?.remove(0);
                Ok(gx.square().sum())
            })
            .unwrap();
        assert!(report.max_rel_error < 1e-5, "{report:?}");
    }

    #[test]
    fn avg_pool_values_and_gradient() {
        let x = Tensor::param(vec![1.0, 2.0, 3.0, 4.0], &[1, 2, 2]).unwrap();
        let y = x.downsample2x().unwrap();
        assert_eq!(y.to_vec(), vec![2.5]);
        y.sum().scale(8.0).backward(false).unwrap();
        assert_eq!(x.grad().unwrap().to_vec(), vec![2.0; 4]);
        assert!(Tensor::ones(&[1, 3, 2]).downsample2x().is_err());
        let c = Tensor::full(&[2, 4, 4], 0.7).downsample2x().unwrap();
        assert!(c.to_vec().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn bias_broadcast_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let b = rand_vec(&mut rng, 3);
        let w = rand_vec(&mut rng, 3 * 4 * 2);
        let report = check_gradients(&[b], &[&[3]], |t| {
            let y = Tensor::zeros(&[3, 4, 2]).add_channel_bias(&t[0])?;
            Ok(y.mul(&Tensor::new(w.clone(), &[3, 4, 2])?)?.square().sum())
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "{report:?}");
    }
}
