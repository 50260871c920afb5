//! 2-D convolution via im2col + GEMM, with explicit forward/backward.
//!
//! The im2col matrix for one image has `in_c·k·k` rows and `oh·ow` columns;
//! rows are laid out to match the flattened `(out_c, in_c, k, k)` weight, so
//! the forward pass is a single `W × cols` GEMM per image with no transposed
//! copies of activations.

use super::{he_uniform, sgemm, sgemm_at, sgemm_bt, Param, Tensor};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub bias: Param,
    pub in_c: usize,
    pub out_c: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    pub fn new(
        name: &str,
        in_c: usize,
        out_c: usize,
        k: usize,
        stride: usize,
        pad: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let fan_in = in_c * k * k;
        Conv2d {
            weight: Param::new(format!("{name}.w"), he_uniform(fan_in, out_c * fan_in, rng)),
            bias: Param::new(format!("{name}.b"), vec![0.0; out_c]),
            in_c,
            out_c,
            k,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.k) / self.stride + 1,
            (w + 2 * self.pad - self.k) / self.stride + 1,
        )
    }

    fn kdim(&self) -> usize {
        self.in_c * self.k * self.k
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.c, self.in_c, "conv {} input channels", self.weight.name);
        let (oh, ow) = self.out_hw(x.h, x.w);
        let mut out = Tensor::zeros(x.b, self.out_c, oh, ow);
        let kdim = self.kdim();
        let ohw = oh * ow;
        let out_stride = self.out_c * ohw;
        super::par_images(x.b, &mut out.data, out_stride, |bi, dst| {
            let mut cols = vec![0.0f32; kdim * ohw];
            im2col(
                x.image(bi),
                x.c,
                x.h,
                x.w,
                self.k,
                self.stride,
                self.pad,
                oh,
                ow,
                &mut cols,
            );
            for (co, row) in dst.chunks_mut(ohw).enumerate() {
                row.fill(self.bias.data[co]);
            }
            sgemm(self.out_c, ohw, kdim, dst, &self.weight.data, &cols, true);
        });
        out
    }

    /// Backward accumulating parameter gradients; returns grad w.r.t. input.
    /// Parameter gradients are reduced over two fixed batch halves then
    /// summed in a fixed order, keeping results thread-schedule independent.
    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        let dx = self.backward_into(x, dy, true);
        dx.expect("backward_into with want_dx=true returns dx")
    }

    /// Backward that only computes parameter gradients (first layer of a net).
    pub fn backward_params_only(&mut self, x: &Tensor, dy: &Tensor) {
        self.backward_into(x, dy, false);
    }

    fn backward_into(&mut self, x: &Tensor, dy: &Tensor, want_dx: bool) -> Option<Tensor> {
        let (oh, ow) = self.out_hw(x.h, x.w);
        assert_eq!((dy.c, dy.h, dy.w), (self.out_c, oh, ow));
        let kdim = self.kdim();
        let ohw = oh * ow;
        let mut dx = if want_dx {
            Some(Tensor::zeros(x.b, x.c, x.h, x.w))
        } else {
            None
        };

        let mid = x.b / 2;
        let wlen = self.weight.data.len();
        let mut dw_lo = vec![0.0f32; wlen];
        let mut dw_hi = vec![0.0f32; wlen];
        let mut db_lo = vec![0.0f32; self.out_c];
        let mut db_hi = vec![0.0f32; self.out_c];

        let x_stride = x.image_len();
        let mut empty_lo: [f32; 0] = [];
        let mut empty_hi: [f32; 0] = [];
        let (dx_lo, dx_hi) = match dx.as_mut() {
            Some(t) => t.data.split_at_mut(mid * x_stride),
            None => (&mut empty_lo[..], &mut empty_hi[..]),
        };

        let run_half = |range: std::ops::Range<usize>,
                        dw: &mut [f32],
                        db: &mut [f32],
                        dx_half: &mut [f32]| {
            let mut cols = vec![0.0f32; kdim * ohw];
            let mut dcols = vec![0.0f32; kdim * ohw];
            let base = range.start;
            for bi in range {
                im2col(
                    x.image(bi),
                    x.c,
                    x.h,
                    x.w,
                    self.k,
                    self.stride,
                    self.pad,
                    oh,
                    ow,
                    &mut cols,
                );
                let dyb = dy.image(bi);
                // dW += dy_b · colsᵀ
                sgemm_bt(self.out_c, kdim, ohw, dw, dyb, &cols, true);
                for co in 0..self.out_c {
                    db[co] += dyb[co * ohw..(co + 1) * ohw].iter().sum::<f32>();
                }
                if !dx_half.is_empty() {
                    // dcols = Wᵀ · dy_b, then scatter back to image space
                    sgemm_at(kdim, ohw, self.out_c, &mut dcols, &self.weight.data, dyb, false);
                    let dst = &mut dx_half[(bi - base) * x_stride..(bi - base + 1) * x_stride];
                    col2im(
                        &dcols,
                        x.c,
                        x.h,
                        x.w,
                        self.k,
                        self.stride,
                        self.pad,
                        oh,
                        ow,
                        dst,
                    );
                }
            }
        };

        rayon::join(
            || run_half(0..mid, &mut dw_lo, &mut db_lo, dx_lo),
            || run_half(mid..x.b, &mut dw_hi, &mut db_hi, dx_hi),
        );

        for i in 0..wlen {
            self.weight.grad[i] += dw_lo[i] + dw_hi[i];
        }
        for i in 0..self.out_c {
            self.bias.grad[i] += db_lo[i] + db_hi[i];
        }
        dx
    }

    /// Input gradient only, without touching parameter gradients. Usable
    /// through a shared reference, e.g. for attack gradients on a frozen
    /// classifier.
    pub fn backward_input(&self, dy: &Tensor, in_h: usize, in_w: usize) -> Tensor {
        let (oh, ow) = self.out_hw(in_h, in_w);
        assert_eq!((dy.c, dy.h, dy.w), (self.out_c, oh, ow));
        let kdim = self.kdim();
        let ohw = oh * ow;
        let mut dx = Tensor::zeros(dy.b, self.in_c, in_h, in_w);
        let x_stride = dx.image_len();
        let in_c = self.in_c;
        let (k, stride, pad) = (self.k, self.stride, self.pad);
        super::par_images(dy.b, &mut dx.data, x_stride, |bi, dst| {
            let mut dcols = vec![0.0f32; kdim * ohw];
            sgemm_at(
                kdim,
                ohw,
                self.out_c,
                &mut dcols,
                &self.weight.data,
                dy.image(bi),
                false,
            );
            col2im(&dcols, in_c, in_h, in_w, k, stride, pad, oh, ow, dst);
        });
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Valid output-column range `[x_lo, x_hi)` such that
/// `0 <= x*stride + dk - pad < limit` for all x in range.
#[inline]
fn valid_range(limit: usize, k_off: usize, pad: usize, stride: usize, out_len: usize) -> (usize, usize) {
    let off = k_off as i64 - pad as i64;
    let lo = if off >= 0 {
        0
    } else {
        ((-off) as usize).div_ceil(stride)
    };
    let hi_excl = limit as i64 - off; // x*stride < hi_excl
    let hi = if hi_excl <= 0 {
        0
    } else {
        (hi_excl as usize).div_ceil(stride)
    };
    (lo.min(out_len), hi.min(out_len))
}

/// Fill `cols[(c·k·k) × (oh·ow)]` from one `(c,h,w)` image with zero padding.
#[allow(clippy::too_many_arguments)]
pub fn im2col(
    x: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    cols: &mut [f32],
) {
    debug_assert_eq!(cols.len(), c * k * k * oh * ow);
    for ci in 0..c {
        let plane = &x[ci * h * w..(ci + 1) * h * w];
        for di in 0..k {
            let (y_lo, y_hi) = valid_range(h, di, pad, stride, oh);
            for dj in 0..k {
                let row_idx = (ci * k + di) * k + dj;
                let row = &mut cols[row_idx * oh * ow..(row_idx + 1) * oh * ow];
                let (x_lo, x_hi) = valid_range(w, dj, pad, stride, ow);
                if y_lo > 0 {
                    row[..y_lo * ow].fill(0.0);
                }
                if y_hi < oh {
                    row[y_hi * ow..].fill(0.0);
                }
                for y in y_lo..y_hi {
                    let sy = y * stride + di - pad;
                    let src = &plane[sy * w..(sy + 1) * w];
                    let dst = &mut row[y * ow..(y + 1) * ow];
                    dst[..x_lo].fill(0.0);
                    dst[x_hi..].fill(0.0);
                    if stride == 1 {
                        let s0 = x_lo + dj - pad;
                        dst[x_lo..x_hi].copy_from_slice(&src[s0..s0 + (x_hi - x_lo)]);
                    } else {
                        for xo in x_lo..x_hi {
                            dst[xo] = src[xo * stride + dj - pad];
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add the columns gradient back into image space (reverse of
/// `im2col`); `dx` must be zeroed by the caller.
#[allow(clippy::too_many_arguments)]
pub fn col2im(
    dcols: &[f32],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dx: &mut [f32],
) {
    for ci in 0..c {
        let plane = &mut dx[ci * h * w..(ci + 1) * h * w];
        for di in 0..k {
            let (y_lo, y_hi) = valid_range(h, di, pad, stride, oh);
            for dj in 0..k {
                let row_idx = (ci * k + di) * k + dj;
                let row = &dcols[row_idx * oh * ow..(row_idx + 1) * oh * ow];
                let (x_lo, x_hi) = valid_range(w, dj, pad, stride, ow);
                for y in y_lo..y_hi {
                    let sy = y * stride + di - pad;
                    let dst = &mut plane[sy * w..(sy + 1) * w];
                    let src = &row[y * ow..(y + 1) * ow];
                    for xo in x_lo..x_hi {
                        dst[xo * stride + dj - pad] += src[xo];
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seed_rng;
    use rand::Rng;

    /// Direct convolution reference, nested loops over every tap.
    fn conv_naive(x: &Tensor, conv: &Conv2d) -> Tensor {
        let (oh, ow) = conv.out_hw(x.h, x.w);
        let mut out = Tensor::zeros(x.b, conv.out_c, oh, ow);
        for b in 0..x.b {
            for co in 0..conv.out_c {
                for y in 0..oh {
                    for xo in 0..ow {
                        let mut acc = conv.bias.data[co];
                        for ci in 0..x.c {
                            for di in 0..conv.k {
                                for dj in 0..conv.k {
                                    let sy = (y * conv.stride + di) as i64 - conv.pad as i64;
                                    let sx = (xo * conv.stride + dj) as i64 - conv.pad as i64;
                                    if sy >= 0 && sy < x.h as i64 && sx >= 0 && sx < x.w as i64 {
                                        let xi = x.image(b)
                                            [(ci * x.h + sy as usize) * x.w + sx as usize];
                                        let wi = conv.weight.data
                                            [((co * x.c + ci) * conv.k + di) * conv.k + dj];
                                        acc += xi * wi;
                                    }
                                }
                            }
                        }
                        out.image_mut(b)[(co * oh + y) * ow + xo] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn forward_matches_naive() {
        for (stride, h, w) in [(1usize, 6usize, 5usize), (2, 8, 8), (2, 7, 9)] {
            let mut rng = seed_rng(3, "conv-test");
            let mut conv = Conv2d::new("t", 3, 4, 3, stride, 1, &mut rng);
            for b in conv.bias.data.iter_mut() {
                *b = rng.gen_range(-0.5..0.5);
            }
            let x = Tensor::from_vec(
                (0..3 * 3 * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect(),
                3,
                3,
                h,
                w,
            );
            let got = conv.forward(&x);
            let want = conv_naive(&x, &conv);
            assert!(got.same_shape(&want));
            for (a, b) in got.data.iter().zip(&want.data) {
                assert!((a - b).abs() < 1e-4, "{a} vs {b}");
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        let mut rng = seed_rng(11, "conv-grad");
        let mut conv = Conv2d::new("t", 2, 3, 3, 1, 1, &mut rng);
        let x = Tensor::from_vec(
            (0..2 * 2 * 5 * 4).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            2,
            2,
            5,
            4,
        );
        // loss = sum(out * r) for a fixed random r, so dLoss/dout = r
        let r: Vec<f32> = {
            let out = conv.forward(&x);
            (0..out.len()).map(|_| rng.gen_range(-1.0..1.0)).collect()
        };
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x)
                .data
                .iter()
                .zip(&r)
                .map(|(o, ri)| (*o as f64) * (*ri as f64))
                .sum()
        };
        let out = conv.forward(&x);
        let dy = Tensor::from_vec(r.clone(), out.b, out.c, out.h, out.w);
        let dx = conv.backward(&x, &dy);

        let h = 1e-3f32;
        // input gradient
        for idx in [0usize, 7, 23, dx.len() - 1] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            assert!(
                (dx.data[idx] as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0),
                "dx[{idx}]: analytic {} vs fd {fd}",
                dx.data[idx]
            );
        }
        // weight gradient
        for idx in [0usize, 5, conv.weight.data.len() - 1] {
            let mut cp = conv.clone();
            cp.weight.data[idx] += h;
            let mut cm = conv.clone();
            cm.weight.data[idx] -= h;
            let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h as f64);
            assert!(
                (conv.weight.grad[idx] as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0),
                "dw[{idx}]: analytic {} vs fd {fd}",
                conv.weight.grad[idx]
            );
        }
        // bias gradient
        let mut cp = conv.clone();
        cp.bias.data[1] += h;
        let mut cm = conv.clone();
        cm.bias.data[1] -= h;
        let fd = (loss(&cp, &x) - loss(&cm, &x)) / (2.0 * h as f64);
        assert!((conv.bias.grad[1] as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0));

        // backward_input agrees with the full backward's dx
        let dx2 = conv.backward_input(&dy, x.h, x.w);
        for (a, b) in dx.data.iter().zip(&dx2.data) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn stride2_backward_shapes_and_fd() {
        let mut rng = seed_rng(13, "conv-grad-s2");
        let mut conv = Conv2d::new("t", 2, 2, 3, 2, 1, &mut rng);
        let x = Tensor::from_vec(
            (0..2 * 6 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            1,
            2,
            6,
            6,
        );
        let out = conv.forward(&x);
        assert_eq!((out.h, out.w), (3, 3));
        let dy = Tensor::from_vec(vec![1.0; out.len()], out.b, out.c, out.h, out.w);
        let dx = conv.backward(&x, &dy);
        let h = 1e-3f32;
        let loss = |conv: &Conv2d, x: &Tensor| -> f64 {
            conv.forward(x).data.iter().map(|v| *v as f64).sum()
        };
        for idx in [0usize, 17, 35] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&conv, &xp) - loss(&conv, &xm)) / (2.0 * h as f64);
            assert!((dx.data[idx] as f64 - fd).abs() < 2e-2 * fd.abs().max(1.0));
        }
    }
}
