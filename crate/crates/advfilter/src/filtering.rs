//! Denoising operators: additive application, per-pixel dynamic filtering
//! with softmax-normalized kernels and an analytic gradient, uncertainty-map
//! reduction, and weighted fusion.
//!
//! Kernel layout: a `KernelField` stores H×W×3K² logits, channel index
//! `c*K² + (di*K + dj)` with the tap offset `(di - K/2, dj - K/2)`. Borders
//! use reflect padding that excludes the edge pixel (reflect-101). The
//! uncertainty map reads the raw logits, before softmax normalization, so
//! kernel magnitude information survives the shift-invariance of softmax.

use crate::error::{Error, Result};
use crate::imaging::ImageTensor;
use crate::nn::conv::Conv2d;
use crate::nn::ops::{relu_backward_inplace, relu_forward};
use crate::nn::{seed_rng, Param, Tensor};
use ndarray::{Array2, Array3};

/// Per-pixel filtering kernels: H×W×(3·K²) pre-normalization logits.
#[derive(Debug, Clone)]
pub struct KernelField {
    pub logits: Array3<f64>,
    pub k: usize,
}

impl KernelField {
    pub fn new(logits: Array3<f64>, k: usize) -> Result<Self> {
        let (_, _, ch) = logits.dim();
        if k % 2 == 0 || k == 0 {
            return Err(Error::Config(format!("kernel size {k} must be odd")));
        }
        if ch != 3 * k * k {
            return Err(Error::ShapeMismatch {
                expected: format!("H x W x {}", 3 * k * k),
                got: format!("channels = {ch}"),
            });
        }
        if logits.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite kernel logits".into()));
        }
        Ok(KernelField { logits, k })
    }

    pub fn height(&self) -> usize {
        self.logits.dim().0
    }

    pub fn width(&self) -> usize {
        self.logits.dim().1
    }

    /// Softmax-normalized kernel for one (pixel, channel): K² weights
    /// summing to 1.
    pub fn normalized_kernel(&self, y: usize, x: usize, c: usize) -> Vec<f64> {
        let kk = self.k * self.k;
        let base = c * kk;
        let mut vals: Vec<f64> = (0..kk).map(|q| self.logits[(y, x, base + q)]).collect();
        let mx = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut den = 0.0;
        for v in vals.iter_mut() {
            *v = (*v - mx).exp();
            den += *v;
        }
        for v in vals.iter_mut() {
            *v /= den;
        }
        vals
    }

    /// Build a kernel field from a network's batched f32 logit tensor.
    pub fn from_batch(t: &Tensor, bi: usize, k: usize) -> Result<Self> {
        let (h, w) = (t.h, t.w);
        if t.c != 3 * k * k {
            return Err(Error::ShapeMismatch {
                expected: format!("{} channels", 3 * k * k),
                got: format!("{}", t.c),
            });
        }
        let src = t.image(bi);
        let mut logits = Array3::zeros((h, w, 3 * k * k));
        for c in 0..t.c {
            for y in 0..h {
                for x in 0..w {
                    logits[(y, x, c)] = src[(c * h + y) * w + x] as f64;
                }
            }
        }
        KernelField::new(logits, k)
    }
}

/// H×W map of per-pixel maxima over the kernel logits.
#[derive(Debug, Clone)]
pub struct UncertaintyMap {
    pub values: Array2<f64>,
}

impl UncertaintyMap {
    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// H×W fusion weights, strictly inside (0,1).
#[derive(Debug, Clone)]
pub struct WeightMap {
    pub values: Array2<f64>,
}

impl WeightMap {
    /// Sigmoid of a pre-activation map; pre-activations are clamped to ±30
    /// so the weights stay strictly inside the open interval.
    pub fn from_preactivation(pre: &Array2<f64>) -> Self {
        WeightMap {
            values: pre.mapv(|v| 1.0 / (1.0 + (-v.clamp(-30.0, 30.0)).exp())),
        }
    }

    pub fn constant(h: usize, w: usize, v: f64) -> Result<Self> {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Config(format!("weight {v} outside (0,1)")));
        }
        Ok(WeightMap {
            values: Array2::from_elem((h, w), v),
        })
    }

    pub fn mean(&self) -> f64 {
        self.values.iter().sum::<f64>() / self.values.len() as f64
    }
}

/// Reflect-101 coordinate fold into `[0, n)`.
#[inline]
pub fn reflect(t: i64, n: usize) -> usize {
    let n = n as i64;
    debug_assert!(n >= 2);
    let r = if t < 0 {
        -t
    } else if t >= n {
        2 * n - 2 - t
    } else {
        t
    };
    debug_assert!(r >= 0 && r < n, "reflect out of range: {t} for n={n}");
    r as usize
}

/// `clamp(image + residual, 0, 1)` — the additive denoiser application.
pub fn apply_additive(image: &ImageTensor, residual: &Array3<f32>) -> Result<ImageTensor> {
    if image.data.dim() != residual.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", image.data.dim()),
            got: format!("{:?}", residual.dim()),
        });
    }
    let mut out = image.clone();
    ndarray::Zip::from(&mut out.data)
        .and(residual)
        .for_each(|o, r| *o = (*o + *r).clamp(0.0, 1.0));
    Ok(out)
}

/// Filter every pixel of `image` with its softmax-normalized exclusive
/// kernel. Outputs are convex combinations of in-range inputs, so they stay
/// in [0,1] without clamping.
pub fn apply_pixelwise_filter(image: &ImageTensor, kernels: &KernelField) -> Result<ImageTensor> {
    let (h, w, _) = image.data.dim();
    if (kernels.height(), kernels.width()) != (h, w) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}x{w} kernel field"),
            got: format!("{}x{}", kernels.height(), kernels.width()),
        });
    }
    let k = kernels.k;
    let half = (k / 2) as i64;
    let mut out = ImageTensor::zeros(h, w);
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let kern = kernels.normalized_kernel(y, x, c);
                let mut acc = 0.0f64;
                for di in 0..k {
                    for dj in 0..k {
                        let sy = reflect(y as i64 + di as i64 - half, h);
                        let sx = reflect(x as i64 + dj as i64 - half, w);
                        acc += kern[di * k + dj] * image.data[(sy, sx, c)] as f64;
                    }
                }
                out.data[(y, x, c)] = acc as f32;
            }
        }
    }
    Ok(out)
}

/// Analytic vector-Jacobian products of the pixel-wise filter.
///
/// Given upstream gradients w.r.t. the filter output, returns gradients
/// w.r.t. the input image and w.r.t. the raw kernel logits (through the
/// softmax normalization). All arithmetic is f64.
pub fn filter_gradient(
    image: &ImageTensor,
    kernels: &KernelField,
    upstream: &Array3<f64>,
) -> Result<(Array3<f64>, Array3<f64>)> {
    let (h, w, _) = image.data.dim();
    if (kernels.height(), kernels.width()) != (h, w) || upstream.dim() != (h, w, 3) {
        return Err(Error::ShapeMismatch {
            expected: format!("{h}x{w} field and {h}x{w}x3 upstream"),
            got: format!(
                "{}x{} field, {:?} upstream",
                kernels.height(),
                kernels.width(),
                upstream.dim()
            ),
        });
    }
    let k = kernels.k;
    let kk = k * k;
    let half = (k / 2) as i64;
    let mut d_image = Array3::<f64>::zeros((h, w, 3));
    let mut d_logits = Array3::<f64>::zeros((h, w, 3 * kk));
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                let u = upstream[(y, x, c)];
                let kern = kernels.normalized_kernel(y, x, c);
                // forward value needed for the softmax jacobian
                let mut taps = vec![0.0f64; kk];
                let mut out = 0.0f64;
                for di in 0..k {
                    for dj in 0..k {
                        let sy = reflect(y as i64 + di as i64 - half, h);
                        let sx = reflect(x as i64 + dj as i64 - half, w);
                        let v = image.data[(sy, sx, c)] as f64;
                        taps[di * k + dj] = v;
                        out += kern[di * k + dj] * v;
                    }
                }
                for di in 0..k {
                    for dj in 0..k {
                        let q = di * k + dj;
                        let s = kern[q];
                        d_logits[(y, x, c * kk + q)] = u * s * (taps[q] - out);
                        let sy = reflect(y as i64 + di as i64 - half, h);
                        let sx = reflect(x as i64 + dj as i64 - half, w);
                        d_image[(sy, sx, c)] += u * s;
                    }
                }
            }
        }
    }
    Ok((d_image, d_logits))
}

/// Per-pixel maximum over all 3K² kernel logits — a max-pool with full
/// window extent over the kernel vector.
pub fn uncertainty_map(kernels: &KernelField) -> UncertaintyMap {
    let (h, w, ch) = kernels.logits.dim();
    let mut values = Array2::from_elem((h, w), f64::NEG_INFINITY);
    for y in 0..h {
        for x in 0..w {
            let mut mx = f64::NEG_INFINITY;
            for c in 0..ch {
                mx = mx.max(kernels.logits[(y, x, c)]);
            }
            values[(y, x)] = mx;
        }
    }
    UncertaintyMap { values }
}

/// `w ⊙ i_sl + (1−w) ⊙ i_m`, the weight broadcast over the 3 channels.
pub fn fuse(i_sl: &ImageTensor, i_m: &ImageTensor, w: &WeightMap) -> Result<ImageTensor> {
    if !i_sl.same_shape(i_m) || w.values.dim() != (i_sl.height(), i_sl.width()) {
        return Err(Error::ShapeMismatch {
            expected: format!("{}x{} images and map", i_sl.height(), i_sl.width()),
            got: format!(
                "{}x{} vs {:?}",
                i_m.height(),
                i_m.width(),
                w.values.dim()
            ),
        });
    }
    let (h, wd, _) = i_sl.data.dim();
    let mut out = ImageTensor::zeros(h, wd);
    for y in 0..h {
        for x in 0..wd {
            let wv = w.values[(y, x)];
            for c in 0..3 {
                let a = i_sl.data[(y, x, c)] as f64;
                let b = i_m.data[(y, x, c)] as f64;
                out.data[(y, x, c)] = (wv * a + (1.0 - wv) * b) as f32;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Batched f32 forms used inside training loops. Cross-checked against the
// reference operators above in the test suite.
// ---------------------------------------------------------------------------

/// Batched pixel-wise filter forward. `logits` is (B, 3K², H, W); returns
/// the filtered batch and the softmax weights saved for backward.
pub fn filter_forward_batch(images: &Tensor, logits: &Tensor, k: usize) -> (Tensor, Tensor) {
    assert_eq!(images.c, 3);
    assert_eq!(logits.c, 3 * k * k);
    assert!(images.b == logits.b && images.h == logits.h && images.w == logits.w);
    let (h, w) = (images.h, images.w);
    let kk = k * k;
    let half = (k / 2) as i64;
    // pass 1: softmax-normalize logits in place, per (pixel, channel)
    let mut probs = logits.clone();
    let probs_stride = probs.image_len();
    crate::nn::par_images(probs.b, &mut probs.data, probs_stride, |_bi, pr| {
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let base = c * kk;
                    let mut mx = f32::NEG_INFINITY;
                    for q in 0..kk {
                        mx = mx.max(pr[((base + q) * h + y) * w + x]);
                    }
                    let mut den = 0.0f32;
                    for q in 0..kk {
                        let idx = ((base + q) * h + y) * w + x;
                        let e = (pr[idx] - mx).exp();
                        pr[idx] = e;
                        den += e;
                    }
                    for q in 0..kk {
                        pr[((base + q) * h + y) * w + x] /= den;
                    }
                }
            }
        }
    });
    // pass 2: weighted neighborhood sums
    let mut out = Tensor::zeros(images.b, 3, h, w);
    let out_stride = out.image_len();
    crate::nn::par_images(images.b, &mut out.data, out_stride, |bi, dst| {
        let img = images.image(bi);
        let pr = probs.image(bi);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let base = c * kk;
                    let mut acc = 0.0f32;
                    for q in 0..kk {
                        let (di, dj) = ((q / k) as i64, (q % k) as i64);
                        let sy = reflect(y as i64 + di - half, h);
                        let sx = reflect(x as i64 + dj - half, w);
                        acc += pr[((base + q) * h + y) * w + x] * img[(c * h + sy) * w + sx];
                    }
                    dst[(c * h + y) * w + x] = acc;
                }
            }
        }
    });
    (out, probs)
}

/// Backward of the batched filter w.r.t. the logits only (the image is
/// training data, not a parameter path).
pub fn filter_backward_logits_batch(
    images: &Tensor,
    probs: &Tensor,
    out: &Tensor,
    upstream: &Tensor,
    k: usize,
) -> Tensor {
    let (h, w) = (images.h, images.w);
    let kk = k * k;
    let half = (k / 2) as i64;
    let mut dlogits = Tensor::zeros(probs.b, probs.c, h, w);
    let stride = dlogits.image_len();
    crate::nn::par_images(probs.b, &mut dlogits.data, stride, |bi, dst| {
        let img = images.image(bi);
        let pr = probs.image(bi);
        let ob = out.image(bi);
        let up = upstream.image(bi);
        for y in 0..h {
            for x in 0..w {
                for c in 0..3 {
                    let u = up[(c * h + y) * w + x];
                    if u == 0.0 {
                        continue;
                    }
                    let o = ob[(c * h + y) * w + x];
                    let base = c * kk;
                    for q in 0..kk {
                        let idx = ((base + q) * h + y) * w + x;
                        let (di, dj) = ((q / k) as i64, (q % k) as i64);
                        let sy = reflect(y as i64 + di - half, h);
                        let sx = reflect(x as i64 + dj - half, w);
                        let v = img[(c * h + sy) * w + sx];
                        dst[idx] = u * pr[idx] * (v - o);
                    }
                }
            }
        }
    });
    dlogits
}

// ---------------------------------------------------------------------------
// Uncertainty-aware fusion network C(·)
// ---------------------------------------------------------------------------

/// Six 3×3 convolutions (ReLU between, channel plan 2→16→…→16→1) followed by
/// a sigmoid; maps a pair of uncertainty maps to a fusion weight map.
#[derive(Debug, Clone)]
pub struct FusionNet {
    pub convs: Vec<Conv2d>,
}

pub const FUSION_HIDDEN: usize = 16;
pub const FUSION_LAYERS: usize = 6;

impl FusionNet {
    pub fn new(seed: u64) -> Self {
        let mut rng = seed_rng(seed, "fusion-init");
        let mut convs = Vec::with_capacity(FUSION_LAYERS);
        let mut in_c = 2;
        for i in 0..FUSION_LAYERS {
            let out_c = if i + 1 == FUSION_LAYERS { 1 } else { FUSION_HIDDEN };
            convs.push(Conv2d::new(
                &format!("fusion.c{i}"),
                in_c,
                out_c,
                3,
                1,
                1,
                &mut rng,
            ));
            in_c = out_c;
        }
        FusionNet { convs }
    }

    /// Batched forward on a (B, 2, H, W) stack of uncertainty maps; returns
    /// the sigmoid weight map (B, 1, H, W) and the pre-activation stack for
    /// backward.
    pub fn forward_batch(&self, maps: &Tensor) -> (Tensor, Vec<Tensor>) {
        assert_eq!(maps.c, 2, "fusion net expects 2 stacked maps");
        let mut acts = Vec::with_capacity(FUSION_LAYERS + 1);
        acts.push(maps.clone());
        let mut cur = maps.clone();
        for (i, conv) in self.convs.iter().enumerate() {
            cur = conv.forward(&cur);
            if i + 1 < FUSION_LAYERS {
                cur = relu_forward(&cur);
            }
            acts.push(cur.clone());
        }
        let wmap = crate::nn::ops::sigmoid_forward(&cur);
        (wmap, acts)
    }

    /// Backward from gradient w.r.t. the sigmoid output; accumulates
    /// parameter gradients. The input maps are produced by a frozen
    /// backbone, so no input gradient is returned.
    pub fn backward_batch(&mut self, acts: &[Tensor], wmap: &Tensor, d_wmap: &Tensor) {
        let mut grad = crate::nn::ops::sigmoid_backward(wmap, d_wmap);
        for i in (0..FUSION_LAYERS).rev() {
            if i + 1 < FUSION_LAYERS {
                relu_backward_inplace(&acts[i + 1], &mut grad);
            }
            if i == 0 {
                self.convs[0].backward_params_only(&acts[0], &grad);
            } else {
                grad = self.convs[i].backward(&acts[i], &grad);
            }
        }
    }

    pub fn params(&self) -> Vec<&Param> {
        self.convs.iter().flat_map(|c| c.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.convs.iter_mut().flat_map(|c| c.params_mut()).collect()
    }
}

/// The spec-level op: run C(·) on two uncertainty maps.
pub fn fusion_net_forward(
    net: &FusionNet,
    u_sl: &UncertaintyMap,
    u_m: &UncertaintyMap,
) -> Result<WeightMap> {
    if u_sl.values.dim() != u_m.values.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", u_sl.values.dim()),
            got: format!("{:?}", u_m.values.dim()),
        });
    }
    let (h, w) = u_sl.values.dim();
    let mut stack = Tensor::zeros(1, 2, h, w);
    for y in 0..h {
        for x in 0..w {
            stack.data[y * w + x] = u_sl.values[(y, x)] as f32;
            stack.data[h * w + y * w + x] = u_m.values[(y, x)] as f32;
        }
    }
    let mut pre = stack;
    for (i, conv) in net.convs.iter().enumerate() {
        pre = conv.forward(&pre);
        if i + 1 < FUSION_LAYERS {
            pre = relu_forward(&pre);
        }
    }
    let mut pre_map = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            pre_map[(y, x)] = pre.data[y * w + x] as f64;
        }
    }
    Ok(WeightMap::from_preactivation(&pre_map))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::seed_rng;
    use rand::Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> ImageTensor {
        let mut rng = seed_rng(seed, "filt-img");
        ImageTensor::new(Array3::from_shape_fn((h, w, 3), |_| rng.gen_range(0.0..1.0))).unwrap()
    }

    fn random_field(h: usize, w: usize, k: usize, seed: u64, lo: f64, hi: f64) -> KernelField {
        let mut rng = seed_rng(seed, "filt-kern");
        KernelField::new(
            Array3::from_shape_fn((h, w, 3 * k * k), |_| rng.gen_range(lo..hi)),
            k,
        )
        .unwrap()
    }

    #[test]
    fn additive_identity_and_inverse() {
        let img = random_image(8, 8, 1);
        let zero = Array3::<f32>::zeros((8, 8, 3));
        assert_eq!(apply_additive(&img, &zero).unwrap(), img);

        // perturb within clamp range, then cancel exactly
        let mut rng = seed_rng(2, "delta");
        let mut mid = img.clone();
        mid.data.mapv_inplace(|v| 0.25 + v * 0.5);
        let delta = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(-0.2..0.2f32));
        let noisy = apply_additive(&mid, &delta).unwrap();
        let restored = apply_additive(&noisy, &delta.mapv(|v| -v)).unwrap();
        for (a, b) in restored.data.iter().zip(mid.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn near_identity_kernel_preserves_image() {
        let img = random_image(8, 8, 3);
        let k = 3;
        let mut logits = Array3::from_elem((8, 8, 3 * k * k), -20.0f64);
        let center = (k / 2) * k + k / 2;
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    logits[(y, x, c * k * k + center)] = 20.0;
                }
            }
        }
        let field = KernelField::new(logits, k).unwrap();
        let out = apply_pixelwise_filter(&img, &field).unwrap();
        for (a, b) in out.data.iter().zip(img.data.iter()) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn uniform_logits_match_box_blur() {
        let img = random_image(8, 8, 4);
        let k = 3;
        let field = KernelField::new(Array3::from_elem((8, 8, 3 * k * k), 0.7f64), k).unwrap();
        let out = apply_pixelwise_filter(&img, &field).unwrap();
        // scalar box-blur oracle with reflect-101 borders
        for y in 0..8usize {
            for x in 0..8usize {
                for c in 0..3 {
                    let mut acc = 0.0f64;
                    for di in -1i64..=1 {
                        for dj in -1i64..=1 {
                            let sy = reflect(y as i64 + di, 8);
                            let sx = reflect(x as i64 + dj, 8);
                            acc += img.data[(sy, sx, c)] as f64;
                        }
                    }
                    let want = acc / 9.0;
                    assert!((out.data[(y, x, c)] as f64 - want).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn filter_gradient_zero_upstream() {
        let img = random_image(8, 8, 5);
        let field = random_field(8, 8, 3, 6, -1.0, 1.0);
        let upstream = Array3::<f64>::zeros((8, 8, 3));
        let (di, dl) = filter_gradient(&img, &field, &upstream).unwrap();
        assert!(di.iter().all(|v| *v == 0.0));
        assert!(dl.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn identity_kernel_gradient_limit() {
        let img = random_image(8, 8, 7);
        let k = 3;
        let mut logits = Array3::from_elem((8, 8, 3 * k * k), -20.0f64);
        let center = (k / 2) * k + k / 2;
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    logits[(y, x, c * k * k + center)] = 20.0;
                }
            }
        }
        let field = KernelField::new(logits, k).unwrap();
        let mut rng = seed_rng(8, "up");
        let upstream = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(-1.0..1.0));
        let (di, _) = filter_gradient(&img, &field, &upstream).unwrap();
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    assert!(
                        (di[(y, x, c)] - upstream[(y, x, c)]).abs() < 1e-4,
                        "identity limit violated at ({y},{x},{c})"
                    );
                }
            }
        }
    }

    #[test]
    fn uncertainty_map_constant_and_spike() {
        let k = 3;
        let field = KernelField::new(Array3::from_elem((6, 6, 3 * k * k), 1.25f64), k).unwrap();
        let u = uncertainty_map(&field);
        assert!(u.values.iter().all(|v| (*v - 1.25).abs() < 1e-12));

        let mut logits = Array3::from_elem((6, 6, 3 * k * k), 0.5f64);
        logits[(2, 3, 11)] = 9.0;
        let field = KernelField::new(logits, k).unwrap();
        let u = uncertainty_map(&field);
        for y in 0..6 {
            for x in 0..6 {
                let want = if (y, x) == (2, 3) { 9.0 } else { 0.5 };
                assert_eq!(u.values[(y, x)], want);
            }
        }
    }

    #[test]
    fn fuse_endpoints_and_average() {
        let a = random_image(8, 8, 9);
        let b = random_image(8, 8, 10);
        let w_hi = WeightMap::constant(8, 8, 1.0 - 1e-9).unwrap();
        let out = fuse(&a, &b, &w_hi).unwrap();
        for (x, y) in out.data.iter().zip(a.data.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        let w_lo = WeightMap::constant(8, 8, 1e-9).unwrap();
        let out = fuse(&a, &b, &w_lo).unwrap();
        for (x, y) in out.data.iter().zip(b.data.iter()) {
            assert!((x - y).abs() < 1e-8);
        }
        let w_mid = WeightMap::constant(8, 8, 0.5).unwrap();
        let out = fuse(&a, &b, &w_mid).unwrap();
        for ((x, y), z) in out.data.iter().zip(a.data.iter()).zip(b.data.iter()) {
            let want = 0.5 * (*y as f64) + 0.5 * (*z as f64);
            assert!((*x as f64 - want).abs() < 1e-7);
        }
    }

    #[test]
    fn fuse_equal_inputs_idempotent() {
        let a = random_image(8, 8, 11);
        for wv in [0.1, 0.5, 0.9] {
            let w = WeightMap::constant(8, 8, wv).unwrap();
            let out = fuse(&a, &a, &w).unwrap();
            for (x, y) in out.data.iter().zip(a.data.iter()) {
                assert!((x - y).abs() < 1e-7);
            }
        }
    }

    #[test]
    fn fusion_net_output_in_open_interval() {
        let net = FusionNet::new(42);
        let mut rng = seed_rng(12, "umap");
        let u_sl = UncertaintyMap {
            values: Array2::from_shape_fn((16, 16), |_| rng.gen_range(-2.0..2.0)),
        };
        let u_m = UncertaintyMap {
            values: Array2::from_shape_fn((16, 16), |_| rng.gen_range(-2.0..2.0)),
        };
        let w = fusion_net_forward(&net, &u_sl, &u_m).unwrap();
        assert_eq!(w.values.dim(), (16, 16));
        assert!(w.values.iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn batched_filter_matches_reference() {
        let img = random_image(8, 8, 13);
        let field = random_field(8, 8, 3, 14, -2.0, 2.0);
        let reference = apply_pixelwise_filter(&img, &field).unwrap();

        let images = ImageTensor::batch(&[&img]);
        let mut logits = Tensor::zeros(1, 27, 8, 8);
        for c in 0..27 {
            for y in 0..8 {
                for x in 0..8 {
                    logits.data[(c * 8 + y) * 8 + x] = field.logits[(y, x, c)] as f32;
                }
            }
        }
        let (out, probs) = filter_forward_batch(&images, &logits, 3);
        let got = ImageTensor::from_batch(&out, 0);
        for (a, b) in got.data.iter().zip(reference.data.iter()) {
            assert!((a - b).abs() < 1e-5, "{a} vs {b}");
        }
        // normalized kernels sum to one
        for y in 0..8 {
            for x in 0..8 {
                for c in 0..3 {
                    let s: f32 = (0..9)
                        .map(|q| probs.data[((c * 9 + q) * 8 + y) * 8 + x])
                        .sum();
                    assert!((s - 1.0).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn batched_filter_logit_gradient_matches_analytic() {
        let img = random_image(8, 8, 15);
        let field = random_field(8, 8, 3, 16, -1.5, 1.5);
        let mut rng = seed_rng(17, "up2");
        let upstream64 = Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(-1.0..1.0f64));
        let (_, dl64) = filter_gradient(&img, &field, &upstream64).unwrap();

        let images = ImageTensor::batch(&[&img]);
        let mut logits = Tensor::zeros(1, 27, 8, 8);
        for c in 0..27 {
            for y in 0..8 {
                for x in 0..8 {
                    logits.data[(c * 8 + y) * 8 + x] = field.logits[(y, x, c)] as f32;
                }
            }
        }
        let (out, probs) = filter_forward_batch(&images, &logits, 3);
        let mut upstream = Tensor::zeros(1, 3, 8, 8);
        for c in 0..3 {
            for y in 0..8 {
                for x in 0..8 {
                    upstream.data[(c * 8 + y) * 8 + x] = upstream64[(y, x, c)] as f32;
                }
            }
        }
        let dl = filter_backward_logits_batch(&images, &probs, &out, &upstream, 3);
        for c in 0..27 {
            for y in 0..8 {
                for x in 0..8 {
                    let got = dl.data[(c * 8 + y) * 8 + x] as f64;
                    let want = dl64[(y, x, c)];
                    assert!((got - want).abs() < 1e-4, "({y},{x},{c}): {got} vs {want}");
                }
            }
        }
    }
}
