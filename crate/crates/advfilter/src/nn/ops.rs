//! Pointwise and structural ops with explicit backward passes.

use super::{he_uniform, sgemm, sgemm_at, sgemm_bt, Param, Tensor};
use rand_chacha::ChaCha8Rng;

pub fn relu_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Backward through ReLU using the saved output (`y > 0 ⇔ x > 0`).
pub fn relu_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    debug_assert!(y.same_shape(dy));
    let mut dx = dy.clone();
    for (d, o) in dx.data.iter_mut().zip(&y.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
    dx
}

pub fn relu_backward_inplace(y: &Tensor, dy: &mut Tensor) {
    for (d, o) in dy.data.iter_mut().zip(&y.data) {
        if *o <= 0.0 {
            *d = 0.0;
        }
    }
}

pub fn sigmoid_forward(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data.iter_mut() {
        *v = 1.0 / (1.0 + (-*v).exp());
    }
    y
}

pub fn sigmoid_backward(y: &Tensor, dy: &Tensor) -> Tensor {
    let mut dx = dy.clone();
    for (d, s) in dx.data.iter_mut().zip(&y.data) {
        *d *= s * (1.0 - s);
    }
    dx
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample2x_forward(x: &Tensor) -> Tensor {
    let (h2, w2) = (x.h * 2, x.w * 2);
    let mut y = Tensor::zeros(x.b, x.c, h2, w2);
    for b in 0..x.b {
        let src = x.image(b);
        let dst = y.image_mut(b);
        for c in 0..x.c {
            for yy in 0..h2 {
                let srow = &src[(c * x.h + yy / 2) * x.w..(c * x.h + yy / 2 + 1) * x.w];
                let drow = &mut dst[(c * h2 + yy) * w2..(c * h2 + yy + 1) * w2];
                for xx in 0..w2 {
                    drow[xx] = srow[xx / 2];
                }
            }
        }
    }
    y
}

/// Backward of nearest 2x upsampling: sum each 2x2 block.
pub fn upsample2x_backward(dy: &Tensor) -> Tensor {
    let (h, w) = (dy.h / 2, dy.w / 2);
    let mut dx = Tensor::zeros(dy.b, dy.c, h, w);
    for b in 0..dy.b {
        let src = dy.image(b);
        let dst = dx.image_mut(b);
        for c in 0..dy.c {
            for yy in 0..dy.h {
                let srow = &src[(c * dy.h + yy) * dy.w..(c * dy.h + yy + 1) * dy.w];
                let drow = &mut dst[(c * h + yy / 2) * w..(c * h + yy / 2 + 1) * w];
                for xx in 0..dy.w {
                    drow[xx / 2] += srow[xx];
                }
            }
        }
    }
    dx
}

/// Concatenate along the channel dimension.
pub fn concat_channels(a: &Tensor, b: &Tensor) -> Tensor {
    assert!(a.b == b.b && a.h == b.h && a.w == b.w, "concat spatial mismatch");
    let mut y = Tensor::zeros(a.b, a.c + b.c, a.h, a.w);
    let (sa, sb) = (a.image_len(), b.image_len());
    for bi in 0..a.b {
        let dst = y.image_mut(bi);
        dst[..sa].copy_from_slice(a.image(bi));
        dst[sa..sa + sb].copy_from_slice(b.image(bi));
    }
    y
}

/// Split a channel-concat gradient back into the two operands' gradients.
pub fn split_channels(d: &Tensor, ca: usize, cb: usize) -> (Tensor, Tensor) {
    assert_eq!(d.c, ca + cb);
    let mut da = Tensor::zeros(d.b, ca, d.h, d.w);
    let mut db = Tensor::zeros(d.b, cb, d.h, d.w);
    let hw = d.h * d.w;
    for bi in 0..d.b {
        let src = d.image(bi);
        da.image_mut(bi).copy_from_slice(&src[..ca * hw]);
        db.image_mut(bi).copy_from_slice(&src[ca * hw..(ca + cb) * hw]);
    }
    (da, db)
}

/// Global average pool to (B, C, 1, 1).
pub fn gap_forward(x: &Tensor) -> Tensor {
    let mut y = Tensor::zeros(x.b, x.c, 1, 1);
    let hw = (x.h * x.w) as f32;
    for b in 0..x.b {
        let src = x.image(b);
        let dst = y.image_mut(b);
        for c in 0..x.c {
            dst[c] = src[c * x.h * x.w..(c + 1) * x.h * x.w].iter().sum::<f32>() / hw;
        }
    }
    y
}

pub fn gap_backward(dy: &Tensor, h: usize, w: usize) -> Tensor {
    let mut dx = Tensor::zeros(dy.b, dy.c, h, w);
    let inv = 1.0 / (h * w) as f32;
    for b in 0..dy.b {
        let src = dy.image(b);
        let dst = dx.image_mut(b);
        for c in 0..dy.c {
            let g = src[c] * inv;
            dst[c * h * w..(c + 1) * h * w].fill(g);
        }
    }
    dx
}

/// Fully connected layer on (B, C, 1, 1) tensors.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param, // (out, in) row-major
    pub bias: Param,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(name: &str, in_dim: usize, out_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        Linear {
            weight: Param::new(format!("{name}.w"), he_uniform(in_dim, out_dim * in_dim, rng)),
            bias: Param::new(format!("{name}.b"), vec![0.0; out_dim]),
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        assert_eq!(x.image_len(), self.in_dim);
        let mut y = Tensor::zeros(x.b, self.out_dim, 1, 1);
        for b in 0..x.b {
            y.image_mut(b).copy_from_slice(&self.bias.data);
        }
        // y (B, out) += x (B, in) · Wᵀ
        sgemm_bt(
            x.b,
            self.out_dim,
            self.in_dim,
            &mut y.data,
            &x.data,
            &self.weight.data,
            true,
        );
        y
    }

    pub fn backward(&mut self, x: &Tensor, dy: &Tensor) -> Tensor {
        // dW += dyᵀ (out, B) · x (B, in)
        sgemm_at(
            self.out_dim,
            self.in_dim,
            x.b,
            &mut self.weight.grad,
            &dy.data,
            &x.data,
            true,
        );
        for b in 0..x.b {
            for (g, d) in self.bias.grad.iter_mut().zip(dy.image(b)) {
                *g += *d;
            }
        }
        self.backward_input(dy)
    }

    pub fn backward_input(&self, dy: &Tensor) -> Tensor {
        let mut dx = Tensor::zeros(dy.b, self.in_dim, 1, 1);
        // dx (B, in) = dy (B, out) · W (out, in)
        sgemm(
            dy.b,
            self.in_dim,
            self.out_dim,
            &mut dx.data,
            &dy.data,
            &self.weight.data,
            false,
        );
        dx
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![&mut self.weight, &mut self.bias]
    }

    pub fn params(&self) -> Vec<&Param> {
        vec![&self.weight, &self.bias]
    }
}

/// Elementwise add of tensors with matching shapes.
pub fn add_forward(a: &Tensor, b: &Tensor) -> Tensor {
    debug_assert!(a.same_shape(b));
    let mut y = a.clone();
    for (v, w) in y.data.iter_mut().zip(&b.data) {
        *v += *w;
    }
    y
}

/// Clamp to [0,1]; the mask marks where the pre-clamp value was inside the
/// closed interval so the backward pass can pass gradients straight through.
pub fn clamp01_forward(x: &Tensor) -> (Tensor, Vec<u8>) {
    let mut y = x.clone();
    let mut mask = vec![0u8; x.len()];
    for (i, v) in y.data.iter_mut().enumerate() {
        if *v >= 0.0 && *v <= 1.0 {
            mask[i] = 1;
        } else {
            *v = v.clamp(0.0, 1.0);
        }
    }
    (y, mask)
}

pub fn clamp01_backward(dy: &Tensor, mask: &[u8]) -> Tensor {
    let mut dx = dy.clone();
    for (d, m) in dx.data.iter_mut().zip(mask) {
        if *m == 0 {
            *d = 0.0;
        }
    }
    dx
}

/// Stable softmax cross-entropy over (B, classes, 1, 1) logits.
/// Returns (mean loss, per-example probabilities).
pub fn softmax_ce(logits: &Tensor, labels: &[usize]) -> (f32, Tensor) {
    assert_eq!(logits.b, labels.len());
    let n = logits.image_len();
    let mut probs = logits.clone();
    let mut loss = 0.0f64;
    for b in 0..logits.b {
        let row = probs.image_mut(b);
        let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
        let mut den = 0.0f32;
        for v in row.iter_mut() {
            *v = (*v - mx).exp();
            den += *v;
        }
        for v in row.iter_mut() {
            *v /= den;
        }
        debug_assert!(labels[b] < n);
        loss -= (row[labels[b]].max(1e-12) as f64).ln();
    }
    ((loss / logits.b as f64) as f32, probs)
}

/// Gradient of mean softmax cross-entropy w.r.t. logits.
pub fn softmax_ce_backward(probs: &Tensor, labels: &[usize]) -> Tensor {
    let mut d = probs.clone();
    let inv_b = 1.0 / probs.b as f32;
    for b in 0..probs.b {
        let row = d.image_mut(b);
        row[labels[b]] -= 1.0;
        for v in row.iter_mut() {
            *v *= inv_b;
        }
    }
    d
}

/// Mean absolute difference over all elements, plus its gradient w.r.t. `a`.
pub fn l1_loss_grad(a: &Tensor, target: &Tensor) -> (f32, Tensor) {
    debug_assert!(a.same_shape(target));
    let inv = 1.0 / a.len() as f32;
    let mut grad = Tensor::zeros(a.b, a.c, a.h, a.w);
    let mut loss = 0.0f64;
    for i in 0..a.data.len() {
        let d = a.data[i] - target.data[i];
        loss += d.abs() as f64;
        grad.data[i] = if d > 0.0 {
            inv
        } else if d < 0.0 {
            -inv
        } else {
            0.0
        };
    }
    ((loss * inv as f64) as f32, grad)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seed_rng;
    use rand::Rng;

    #[test]
    fn upsample_roundtrip_gradient() {
        let mut rng = seed_rng(5, "ups");
        let x = Tensor::from_vec((0..2 * 3 * 4).map(|_| rng.gen_range(-1.0..1.0f32)).collect(), 1, 2, 3, 4);
        let y = upsample2x_forward(&x);
        assert_eq!((y.h, y.w), (6, 8));
        assert_eq!(y.data[0], x.data[0]);
        let dy = Tensor::from_vec(vec![1.0; y.len()], y.b, y.c, y.h, y.w);
        let dx = upsample2x_backward(&dy);
        assert!(dx.data.iter().all(|v| (*v - 4.0).abs() < 1e-6));
    }

    #[test]
    fn concat_split_inverse() {
        let a = Tensor::from_vec((0..6).map(|v| v as f32).collect(), 1, 2, 1, 3);
        let b = Tensor::from_vec((10..13).map(|v| v as f32).collect(), 1, 1, 1, 3);
        let y = concat_channels(&a, &b);
        assert_eq!(y.c, 3);
        let (da, db) = split_channels(&y, 2, 1);
        assert_eq!(da.data, a.data);
        assert_eq!(db.data, b.data);
    }

    #[test]
    fn softmax_ce_gradient_finite_difference() {
        let mut rng = seed_rng(9, "ce");
        let logits = Tensor::from_vec((0..8).map(|_| rng.gen_range(-2.0..2.0f32)).collect(), 2, 4, 1, 1);
        let labels = vec![1usize, 3];
        let (_, probs) = softmax_ce(&logits, &labels);
        let grad = softmax_ce_backward(&probs, &labels);
        let h = 1e-3f32;
        for idx in 0..8 {
            let mut lp = logits.clone();
            lp.data[idx] += h;
            let mut lm = logits.clone();
            lm.data[idx] -= h;
            let fp = softmax_ce(&lp, &labels).0 as f64;
            let fm = softmax_ce(&lm, &labels).0 as f64;
            let fd = (fp - fm) / (2.0 * h as f64);
            assert!((grad.data[idx] as f64 - fd).abs() < 1e-3);
        }
    }

    #[test]
    fn linear_gradcheck() {
        let mut rng = seed_rng(21, "lin");
        let mut lin = Linear::new("fc", 5, 3, &mut rng);
        let x = Tensor::from_vec((0..10).map(|_| rng.gen_range(-1.0..1.0f32)).collect(), 2, 5, 1, 1);
        let y = lin.forward(&x);
        let dy = Tensor::from_vec(vec![1.0; y.len()], 2, 3, 1, 1);
        let dx = lin.backward(&x, &dy);
        let h = 1e-3f32;
        let loss = |l: &Linear, x: &Tensor| -> f64 { l.forward(x).data.iter().map(|v| *v as f64).sum() };
        for idx in [0usize, 4, 9] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fd = (loss(&lin, &xp) - loss(&lin, &xm)) / (2.0 * h as f64);
            assert!((dx.data[idx] as f64 - fd).abs() < 1e-2);
        }
        for idx in [0usize, 7, 14] {
            let mut lp = lin.clone();
            lp.weight.data[idx] += h;
            let mut lm = lin.clone();
            lm.weight.data[idx] -= h;
            let fd = (loss(&lp, &x) - loss(&lm, &x)) / (2.0 * h as f64);
            assert!((lin.weight.grad[idx] as f64 - fd).abs() < 1e-2);
        }
    }

    #[test]
    fn l1_loss_matches_reference() {
        let a = Tensor::from_vec(vec![0.0, 0.5, 1.0, 0.25], 1, 1, 2, 2);
        let b = Tensor::from_vec(vec![0.5, 0.5, 0.0, 0.75], 1, 1, 2, 2);
        let (loss, grad) = l1_loss_grad(&a, &b);
        assert!((loss - (0.5 + 0.0 + 1.0 + 0.5) / 4.0).abs() < 1e-6);
        assert_eq!(grad.data[0], -0.25);
        assert_eq!(grad.data[1], 0.0);
        assert_eq!(grad.data[2], 0.25);
    }
}
