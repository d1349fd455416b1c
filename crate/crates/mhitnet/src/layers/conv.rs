//! 2-D convolution with stride, zero padding, and dilation (atrous) support.
//!
//! Forward and backward both run through im2col + the shared matmul kernels;
//! the column buffer is rebuilt in backward instead of being saved, which
//! keeps tape memory proportional to the activations alone.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{Ctx, Init, ParamId, Shape, Value, VarStore};
use crate::tensor::{matmul, matmul_nt, matmul_tn_acc};

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_c: usize,
    out_c: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dil: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn cols(&self) -> usize {
        self.oh * self.ow
    }
    fn rows(&self) -> usize {
        self.in_c * self.k * self.k
    }
}

/// A convolution layer; kernels are square with odd side (1x1 and 3x3 here).
#[derive(Clone, Debug)]
pub struct Conv2d {
    pub weight: ParamId,
    pub bias: ParamId,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub dilation: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut VarStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        dilation: usize,
    ) -> Result<Self> {
        if kernel % 2 == 0 {
            return Err(Error::Config(format!(
                "conv kernel side must be odd, got {kernel}"
            )));
        }
        if dilation < 1 {
            return Err(Error::Config(format!(
                "conv dilation must be >= 1, got {dilation}"
            )));
        }
        if stride < 1 {
            return Err(Error::Config(format!(
                "conv stride must be >= 1, got {stride}"
            )));
        }
        let fan_in = in_channels * kernel * kernel;
        let weight = store.add(
            format!("{name}.weight"),
            Shape::new(out_channels, in_channels, kernel, kernel),
            true,
            Init::HeNormal { fan_in },
        )?;
        let bias = store.add(
            format!("{name}.bias"),
            Shape::new(1, out_channels, 1, 1),
            true,
            Init::Zeros,
        )?;
        Ok(Conv2d {
            weight,
            bias,
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            dilation,
        })
    }

    /// Zero both the kernel and the bias (used to disable a branch).
    pub fn zero(&self, store: &mut VarStore) {
        let mut w = store.value(self.weight).clone();
        w.data_mut().fill(0.0);
        store.set_value(self.weight, w);
        let mut b = store.value(self.bias).clone();
        b.data_mut().fill(0.0);
        store.set_value(self.bias, b);
    }

    pub fn forward(&self, cx: &mut Ctx, x: Value) -> Result<Value> {
        let sx = cx.tape.shape(x);
        if sx.channels != self.in_channels {
            return Err(Error::dim(
                "conv2d (input channels vs layer)",
                sx,
                format!("layer expects {} input channels", self.in_channels),
            ));
        }
        let extent = (self.kernel - 1) * self.dilation + 1;
        if extent > sx.height + 2 * self.padding || extent > sx.width + 2 * self.padding {
            return Err(Error::Geometry(format!(
                "conv2d kernel extent {extent} exceeds padded input {}x{} (padding {})",
                sx.height, sx.width, self.padding
            )));
        }
        let geom = ConvGeom {
            batch: sx.batch,
            in_c: self.in_channels,
            out_c: self.out_channels,
            k: self.kernel,
            stride: self.stride,
            pad: self.padding,
            dil: self.dilation,
            h: sx.height,
            w: sx.width,
            oh: (sx.height + 2 * self.padding - self.dilation * (self.kernel - 1) - 1)
                / self.stride
                + 1,
            ow: (sx.width + 2 * self.padding - self.dilation * (self.kernel - 1) - 1) / self.stride
                + 1,
        };

        let w = cx.bind(self.weight);
        let b = cx.bind(self.bias);
        let x_data = cx.tape.data_arc(x);
        let w_data = cx.tape.data_arc(w);
        let b_data = cx.tape.data_arc(b);

        let out_shape = Shape::new(geom.batch, geom.out_c, geom.oh, geom.ow);
        let mut out = vec![0.0f32; out_shape.numel()];
        let mut col = vec![0.0f32; geom.rows() * geom.cols()];
        let plane = geom.h * geom.w;
        let out_plane = geom.cols();
        for bi in 0..geom.batch {
            let xs = &x_data[bi * geom.in_c * plane..(bi + 1) * geom.in_c * plane];
            im2col(xs, geom, &mut col);
            let ys = &mut out[bi * geom.out_c * out_plane..(bi + 1) * geom.out_c * out_plane];
            matmul(&w_data, &col, geom.out_c, geom.rows(), geom.cols(), ys);
            for oc in 0..geom.out_c {
                let bias_v = b_data[oc];
                for v in &mut ys[oc * out_plane..(oc + 1) * out_plane] {
                    *v += bias_v;
                }
            }
        }

        let back = if cx.tape.wants_grad(&[x, w, b]) {
            let xd = Arc::clone(&x_data);
            let wd = Arc::clone(&w_data);
            Some(Box::new(move |g: &[f32], store: &mut crate::tensor::GradStore| {
                let rows = geom.rows();
                let cols = geom.cols();
                let mut col = vec![0.0f32; rows * cols];
                store.add_to(w, |dw| {
                    for bi in 0..geom.batch {
                        let xs = &xd[bi * geom.in_c * plane..(bi + 1) * geom.in_c * plane];
                        im2col(xs, geom, &mut col);
                        let gs = &g[bi * geom.out_c * cols..(bi + 1) * geom.out_c * cols];
                        // dW += dY * col^T
                        matmul_nt_acc_into(gs, &col, geom.out_c, cols, rows, dw);
                    }
                });
                store.add_to(b, |db| {
                    for bi in 0..geom.batch {
                        let gs = &g[bi * geom.out_c * cols..(bi + 1) * geom.out_c * cols];
                        for oc in 0..geom.out_c {
                            let mut s = 0.0f64;
                            for &v in &gs[oc * cols..(oc + 1) * cols] {
                                s += v as f64;
                            }
                            db[oc] += s as f32;
                        }
                    }
                });
                store.add_to(x, |dx| {
                    let mut dcol = vec![0.0f32; rows * cols];
                    for bi in 0..geom.batch {
                        let gs = &g[bi * geom.out_c * cols..(bi + 1) * geom.out_c * cols];
                        // dcol = W^T * dY
                        dcol.fill(0.0);
                        matmul_tn_acc(&wd, gs, geom.out_c, rows, cols, &mut dcol);
                        let dxs = &mut dx[bi * geom.in_c * plane..(bi + 1) * geom.in_c * plane];
                        col2im_acc(&dcol, geom, dxs);
                    }
                });
            }) as Box<dyn Fn(&[f32], &mut crate::tensor::GradStore)>)
        } else {
            None
        };
        Ok(cx.tape.push(out_shape, out, &[x, w, b], back))
    }
}

/// dst[m,n] += a[m,K] * b[n,K]^T with K = `k`.
fn matmul_nt_acc_into(a: &[f32], b: &[f32], m: usize, k: usize, n: usize, dst: &mut [f32]) {
    let mut tmp = vec![0.0f32; m * n];
    matmul_nt(a, b, m, k, n, &mut tmp);
    for (o, &v) in dst.iter_mut().zip(&tmp) {
        *o += v;
    }
}

fn im2col(x: &[f32], geom: ConvGeom, col: &mut [f32]) {
    let cols = geom.cols();
    col.fill(0.0);
    for ic in 0..geom.in_c {
        let plane = &x[ic * geom.h * geom.w..(ic + 1) * geom.h * geom.w];
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = (ic * geom.k + ky) * geom.k + kx;
                let dst = &mut col[row * cols..(row + 1) * cols];
                for oy in 0..geom.oh {
                    let in_y = (oy * geom.stride + ky * geom.dil) as isize - geom.pad as isize;
                    if in_y < 0 || in_y >= geom.h as isize {
                        continue;
                    }
                    let src_row = &plane[in_y as usize * geom.w..(in_y as usize + 1) * geom.w];
                    let dst_row = &mut dst[oy * geom.ow..(oy + 1) * geom.ow];
                    if geom.stride == 1 {
                        // in_x = ox - pad + kx*dil; copy the in-bounds run
                        let shift = kx as isize * geom.dil as isize - geom.pad as isize;
                        let ox_lo = (-shift).max(0) as usize;
                        let ox_hi = ((geom.w as isize - shift).min(geom.ow as isize)).max(0) as usize;
                        if ox_lo < ox_hi {
                            let src_lo = (ox_lo as isize + shift) as usize;
                            dst_row[ox_lo..ox_hi]
                                .copy_from_slice(&src_row[src_lo..src_lo + (ox_hi - ox_lo)]);
                        }
                    } else {
                        for (ox, d) in dst_row.iter_mut().enumerate() {
                            let in_x =
                                (ox * geom.stride + kx * geom.dil) as isize - geom.pad as isize;
                            if in_x >= 0 && in_x < geom.w as isize {
                                *d = src_row[in_x as usize];
                            }
                        }
                    }
                }
            }
        }
    }
}

fn col2im_acc(col: &[f32], geom: ConvGeom, dx: &mut [f32]) {
    let cols = geom.cols();
    for ic in 0..geom.in_c {
        let plane = &mut dx[ic * geom.h * geom.w..(ic + 1) * geom.h * geom.w];
        for ky in 0..geom.k {
            for kx in 0..geom.k {
                let row = (ic * geom.k + ky) * geom.k + kx;
                let src = &col[row * cols..(row + 1) * cols];
                for oy in 0..geom.oh {
                    let in_y = (oy * geom.stride + ky * geom.dil) as isize - geom.pad as isize;
                    if in_y < 0 || in_y >= geom.h as isize {
                        continue;
                    }
                    let dst_row =
                        &mut plane[in_y as usize * geom.w..(in_y as usize + 1) * geom.w];
                    let src_row = &src[oy * geom.ow..(oy + 1) * geom.ow];
                    for (ox, &v) in src_row.iter().enumerate() {
                        let in_x = (ox * geom.stride + kx * geom.dil) as isize - geom.pad as isize;
                        if in_x >= 0 && in_x < geom.w as isize {
                            dst_row[in_x as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn set_param(store: &mut VarStore, id: ParamId, data: Vec<f32>) {
        let shape = store.value(id).shape();
        store.set_value(id, Tensor::new(shape, data).unwrap());
    }

    /// Plain sliding-window convolution, written independently of im2col.
    #[allow(clippy::too_many_arguments)]
    fn conv_oracle(
        x: &Tensor,
        w: &Tensor,
        b: &[f32],
        stride: usize,
        pad: usize,
        dil: usize,
    ) -> Tensor {
        let sx = x.shape();
        let sw = w.shape();
        let k = sw.height;
        let oh = (sx.height + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        let ow = (sx.width + 2 * pad - dil * (k - 1) - 1) / stride + 1;
        Tensor::from_fn(Shape::new(sx.batch, sw.batch, oh, ow), |bi, oc, oy, ox| {
            let mut acc = b[oc];
            for ic in 0..sx.channels {
                for ky in 0..k {
                    for kx in 0..k {
                        let in_y = (oy * stride + ky * dil) as isize - pad as isize;
                        let in_x = (ox * stride + kx * dil) as isize - pad as isize;
                        if in_y >= 0
                            && in_y < sx.height as isize
                            && in_x >= 0
                            && in_x < sx.width as isize
                        {
                            acc += x.at(bi, ic, in_y as usize, in_x as usize)
                                * w.at(oc, ic, ky, kx);
                        }
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn delta_kernel_is_identity() {
        let mut store = VarStore::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 1, 1, 1).unwrap();
        set_param(&mut store, conv.weight, vec![0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0]);
        let x = Tensor::from_fn(Shape::new(1, 1, 4, 5), |_, _, y, xx| (y * 5 + xx) as f32 * 0.3);
        let mut cx = Ctx::eval(&mut store);
        let vx = cx.input(&x);
        let y = conv.forward(&mut cx, vx).unwrap();
        assert!(cx.tape.tensor(y).bit_eq(&x));
    }

    #[test]
    fn zero_kernel_gives_zero_output() {
        let mut store = VarStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, 1).unwrap();
        let x = Tensor::full(Shape::new(1, 2, 4, 4), 1.5);
        let mut cx = Ctx::eval(&mut store);
        let vx = cx.input(&x);
        let y = conv.forward(&mut cx, vx).unwrap();
        assert!(cx.tape.data(y).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn all_ones_case_center_nine_corner_four() {
        let mut store = VarStore::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 1, 1, 1).unwrap();
        set_param(&mut store, conv.weight, vec![1.0; 9]);
        let x = Tensor::full(Shape::new(1, 1, 5, 5), 1.0);
        let mut cx = Ctx::eval(&mut store);
        let vx = cx.input(&x);
        let y = conv.forward(&mut cx, vx).unwrap();
        let out = cx.tape.tensor(y);
        assert_eq!(out.at(0, 0, 2, 2), 9.0);
        assert_eq!(out.at(0, 0, 0, 0), 4.0);
        assert_eq!(out.at(0, 0, 0, 2), 6.0);
    }

    #[test]
    fn matches_sliding_window_oracle_with_stride_and_dilation() {
        for (stride, pad, dil, k) in [(1, 1, 1, 3), (2, 1, 1, 3), (1, 2, 2, 3), (1, 0, 1, 1), (1, 4, 4, 3)] {
            let mut store = VarStore::new();
            let conv = Conv2d::new(&mut store, "c", 3, 2, k, stride, pad, dil).unwrap();
            store.init_parameters(11);
            let x = Tensor::from_fn(Shape::new(2, 3, 9, 9), |b, c, y, xx| {
                ((b * 31 + c * 17 + y * 7 + xx) as f32 * 0.11).sin()
            });
            let w = store.value(conv.weight).clone();
            let bias = store.value(conv.bias).data().to_vec();
            let mut cx = Ctx::eval(&mut store);
            let vx = cx.input(&x);
            let y = conv.forward(&mut cx, vx).unwrap();
            let got = cx.tape.tensor(y);
            let want = conv_oracle(&x, &w, &bias, stride, pad, dil);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-5, "stride {stride} pad {pad} dil {dil}");
        }
    }

    #[test]
    fn dilated_impulse_touches_only_dilation_offsets() {
        for dil in [1usize, 2, 3, 4, 5, 6, 7, 12, 18] {
            let n = 2 * dil + 9;
            let mid = n / 2;
            let mut store = VarStore::new();
            let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 1, dil, dil).unwrap();
            set_param(&mut store, conv.weight, vec![1.0; 9]);
            let x = Tensor::from_fn(Shape::new(1, 1, n, n), |_, _, y, xx| {
                if y == mid && xx == mid {
                    1.0
                } else {
                    0.0
                }
            });
            let mut cx = Ctx::eval(&mut store);
            let vx = cx.input(&x);
            let y = conv.forward(&mut cx, vx).unwrap();
            let out = cx.tape.tensor(y);
            assert_eq!(out.shape(), x.shape());
            for yy in 0..n {
                for xx in 0..n {
                    let dy = yy as isize - mid as isize;
                    let dx = xx as isize - mid as isize;
                    let on_support = [-(dil as isize), 0, dil as isize].contains(&dy)
                        && [-(dil as isize), 0, dil as isize].contains(&dx);
                    let v = out.at(0, 0, yy, xx);
                    if on_support {
                        assert_eq!(v, 1.0, "dil {dil} at ({yy},{xx})");
                    } else {
                        assert_eq!(v, 0.0, "dil {dil} at ({yy},{xx})");
                    }
                }
            }
        }
    }

    #[test]
    fn channel_mismatch_is_dimension_error() {
        let mut store = VarStore::new();
        let conv = Conv2d::new(&mut store, "c", 4, 2, 3, 1, 1, 1).unwrap();
        let x = Tensor::zeros(Shape::new(1, 3, 4, 4));
        let mut cx = Ctx::eval(&mut store);
        let vx = cx.input(&x);
        assert!(matches!(
            conv.forward(&mut cx, vx),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn oversized_kernel_is_geometry_error() {
        let mut store = VarStore::new();
        let conv = Conv2d::new(&mut store, "c", 1, 1, 3, 1, 0, 4).unwrap();
        let x = Tensor::zeros(Shape::new(1, 1, 8, 8)); // extent 9 > 8
        let mut cx = Ctx::eval(&mut store);
        let vx = cx.input(&x);
        assert!(matches!(
            conv.forward(&mut cx, vx),
            Err(Error::Geometry(_))
        ));
    }

    #[test]
    fn gradients_match_finite_differences() {
        use crate::tensor::{finite_diff_grad_tensor, max_rel_error};
        let mut store = VarStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, 2).unwrap();
        store.init_parameters(3);
        let x = Tensor::from_fn(Shape::new(2, 2, 5, 5), |b, c, y, xx| {
            (((b + 1) * (c + 2) * (y + 3) * (xx + 5)) as f32 * 0.017).sin()
        });
        let probe = Tensor::from_fn(Shape::new(2, 3, 5, 5), |b, c, y, xx| {
            (((b * 5 + c * 3 + y * 2 + xx) as f32) * 0.37).cos()
        });

        // analytic
        let mut cx = Ctx::eval_with_grad(&mut store);
        let vx = cx.input_with_grad(&x);
        let y = conv.forward(&mut cx, vx).unwrap();
        let vp = cx.input(&probe);
        let weighted = cx.tape.mul(y, vp).unwrap();
        let loss = cx.tape.sum(weighted);
        let grads = cx.tape.backward(loss).unwrap();
        let dx = grads.get(vx).unwrap().to_vec();
        let dw = cx.grad_of(&grads, conv.weight);
        let db = cx.grad_of(&grads, conv.bias);

        // numeric: input
        let loss_for = |store: &mut VarStore, x: &Tensor| -> f64 {
            let mut cx = Ctx::eval(store);
            let vx = cx.input(x);
            let y = conv.forward(&mut cx, vx).unwrap();
            cx.tape
                .data(y)
                .iter()
                .zip(probe.data())
                .map(|(&a, &b)| a as f64 * b as f64)
                .sum()
        };
        let fd_x = finite_diff_grad_tensor(|t| loss_for(&mut store, t), &x, 1e-3);
        assert!(max_rel_error(&dx, &fd_x) < 1e-3);

        // numeric: weight
        let w0 = store.value(conv.weight).clone();
        let fd_w = finite_diff_grad_tensor(
            |t| {
                store.set_value(conv.weight, t.clone());
                loss_for(&mut store, &x)
            },
            &w0,
            1e-3,
        );
        store.set_value(conv.weight, w0);
        assert!(max_rel_error(dw.data(), &fd_w) < 1e-3);

        // numeric: bias
        let b0 = store.value(conv.bias).clone();
        let fd_b = finite_diff_grad_tensor(
            |t| {
                store.set_value(conv.bias, t.clone());
                loss_for(&mut store, &x)
            },
            &b0,
            1e-3,
        );
        store.set_value(conv.bias, b0);
        assert!(max_rel_error(db.data(), &fd_b) < 1e-3);
    }
}
