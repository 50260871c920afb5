//! Minimal CPU neural-network engine: batched NCHW tensors, im2col
//! convolutions backed by GEMM, explicit backpropagation, and Adam.
//!
//! Parallel work is split over fixed batch halves (`rayon::join`) and all
//! cross-image reductions are summed in a fixed order, so results are
//! bit-identical regardless of thread scheduling.

pub mod conv;
pub mod ops;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_chacha::rand_core::SeedableRng;
use sha2::{Digest, Sha256};

/// Batched activation tensor in NCHW layout, contiguous `f32`.
#[derive(Debug, Clone)]
pub struct Tensor {
    pub data: Vec<f32>,
    pub b: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Tensor {
    pub fn zeros(b: usize, c: usize, h: usize, w: usize) -> Self {
        Tensor {
            data: vec![0.0; b * c * h * w],
            b,
            c,
            h,
            w,
        }
    }

    pub fn from_vec(data: Vec<f32>, b: usize, c: usize, h: usize, w: usize) -> Self {
        assert_eq!(data.len(), b * c * h * w, "tensor data length mismatch");
        Tensor { data, b, c, h, w }
    }

    /// Elements per batch image.
    #[inline]
    pub fn image_len(&self) -> usize {
        self.c * self.h * self.w
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.data.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn image(&self, b: usize) -> &[f32] {
        let s = self.image_len();
        &self.data[b * s..(b + 1) * s]
    }

    #[inline]
    pub fn image_mut(&mut self, b: usize) -> &mut [f32] {
        let s = self.image_len();
        &mut self.data[b * s..(b + 1) * s]
    }

    pub fn same_shape(&self, other: &Tensor) -> bool {
        self.b == other.b && self.c == other.c && self.h == other.h && self.w == other.w
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}x{}", self.b, self.c, self.h, self.w)
    }

    pub fn has_nan(&self) -> bool {
        self.data.iter().any(|v| !v.is_finite())
    }
}

/// Trainable parameter with its gradient and Adam state.
#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub data: Vec<f32>,
    pub grad: Vec<f32>,
    pub m: Vec<f32>,
    pub v: Vec<f32>,
    /// Per-parameter Adam step count; parameter groups on gated routes
    /// update at different frequencies, so bias correction is per-param.
    pub steps: u64,
}

impl Param {
    pub fn new(name: impl Into<String>, data: Vec<f32>) -> Self {
        let n = data.len();
        Param {
            name: name.into(),
            data,
            grad: vec![0.0; n],
            m: vec![0.0; n],
            v: vec![0.0; n],
            steps: 0,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Adam hyperparameters.
#[derive(Debug, Clone, Copy)]
pub struct AdamConfig {
    pub lr: f32,
    pub beta1: f32,
    pub beta2: f32,
    pub eps: f32,
    /// Global-norm gradient clip applied over the routed parameter set.
    pub clip_norm: Option<f32>,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: Some(5.0),
        }
    }
}

/// One Adam update over the given parameter set. Gradient clipping uses the
/// global norm across the whole set so gated groups see a consistent scale.
pub fn adam_step(params: &mut [&mut Param], cfg: &AdamConfig) {
    let mut scale = 1.0f32;
    if let Some(clip) = cfg.clip_norm {
        let sq: f64 = params
            .iter()
            .map(|p| p.grad.iter().map(|g| (*g as f64) * (*g as f64)).sum::<f64>())
            .sum();
        let norm = sq.sqrt() as f32;
        if norm > clip {
            scale = clip / norm;
        }
    }
    for p in params.iter_mut() {
        p.steps += 1;
        let t = p.steps.min(i32::MAX as u64) as i32;
        let bc1 = 1.0 - (cfg.beta1 as f64).powi(t);
        let bc2 = 1.0 - (cfg.beta2 as f64).powi(t);
        let lr_t = cfg.lr * ((bc2.sqrt() / bc1) as f32);
        for i in 0..p.data.len() {
            let g = p.grad[i] * scale;
            p.m[i] = cfg.beta1 * p.m[i] + (1.0 - cfg.beta1) * g;
            p.v[i] = cfg.beta2 * p.v[i] + (1.0 - cfg.beta2) * g * g;
            p.data[i] -= lr_t * p.m[i] / (p.v[i].sqrt() + cfg.eps);
        }
    }
}

/// Derive an independent ChaCha stream from a base seed and a label, so
/// parallel work items get stable per-item randomness.
pub fn seed_rng(seed: u64, stream: &str) -> ChaCha8Rng {
    let mut hasher = Sha256::new();
    hasher.update(seed.to_le_bytes());
    hasher.update(stream.as_bytes());
    let digest = hasher.finalize();
    let mut key = [0u8; 32];
    key.copy_from_slice(&digest[..32]);
    ChaCha8Rng::from_seed(key)
}

/// He-uniform initialization: U(-sqrt(6/fan_in), +sqrt(6/fan_in)).
pub fn he_uniform(fan_in: usize, n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let bound = (6.0 / fan_in as f32).sqrt();
    (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
}

/// SHA-256 over parameter bytes in visit order, as lowercase hex.
pub fn fingerprint_params<'a>(params: impl Iterator<Item = &'a Param>) -> String {
    let mut hasher = Sha256::new();
    for p in params {
        hasher.update(p.name.as_bytes());
        for v in &p.data {
            hasher.update(v.to_le_bytes());
        }
    }
    hex_string(&hasher.finalize())
}

pub fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

/// `c[m×n] = a[m×k] × b[k×n]` (all row-major), optionally accumulating.
pub fn sgemm(
    m: usize,
    n: usize,
    k: usize,
    c: &mut [f32],
    a: &[f32],
    b: &[f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= k * n);
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            1,
            n as isize,
            if accumulate { 1.0f32 } else { 0.0f32 },
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// `c[m×n] (+)= a[m×k] × bᵀ` where `b` is stored row-major `[n×k]`.
pub fn sgemm_bt(
    m: usize,
    n: usize,
    k: usize,
    c: &mut [f32],
    a: &[f32],
    b: &[f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n && a.len() >= m * k && b.len() >= n * k);
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            1,
            k as isize,
            b.as_ptr(),
            k as isize,
            1,
            if accumulate { 1.0f32 } else { 0.0f32 },
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// `c[m×n] (+)= aᵀ × b` where `a` is stored row-major `[k×m]`.
pub fn sgemm_at(
    m: usize,
    n: usize,
    k: usize,
    c: &mut [f32],
    a: &[f32],
    b: &[f32],
    accumulate: bool,
) {
    debug_assert!(c.len() >= m * n && a.len() >= k * m && b.len() >= k * n);
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            c.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            m as isize,
            1,
            b.as_ptr(),
            1,
            n as isize,
            if accumulate { 1.0f32 } else { 0.0f32 },
            1.0f32,
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

/// Process image indices `0..b` in two fixed halves on the rayon pool.
/// `out` is split at the half boundary; each closure call owns one image's
/// output slice. No cross-image reductions, so scheduling cannot change
/// results.
pub fn par_images<F>(b: usize, out: &mut [f32], image_stride: usize, f: F)
where
    F: Fn(usize, &mut [f32]) + Sync,
{
    assert_eq!(out.len(), b * image_stride);
    let mid = b / 2;
    let (lo, hi) = out.split_at_mut(mid * image_stride);
    rayon::join(
        || {
            for (i, chunk) in lo.chunks_mut(image_stride).enumerate() {
                f(i, chunk);
            }
        },
        || {
            for (i, chunk) in hi.chunks_mut(image_stride).enumerate() {
                f(mid + i, chunk);
            }
        },
    );
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sgemm_matches_naive() {
        let (m, n, k) = (3, 4, 5);
        let mut rng = seed_rng(1, "gemm");
        let a: Vec<f32> = (0..m * k).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let b: Vec<f32> = (0..k * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut c = vec![0.0; m * n];
        sgemm(m, n, k, &mut c, &a, &b, false);
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0f32;
                for l in 0..k {
                    acc += a[i * k + l] * b[l * n + j];
                }
                assert!((c[i * n + j] - acc).abs() < 1e-4);
            }
        }
        // transposed variants agree with the plain one
        let mut bt = vec![0.0; n * k];
        for l in 0..k {
            for j in 0..n {
                bt[j * k + l] = b[l * n + j];
            }
        }
        let mut c2 = vec![0.0; m * n];
        sgemm_bt(m, n, k, &mut c2, &a, &bt, false);
        for (x, y) in c.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-5);
        }
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for l in 0..k {
                at[l * m + i] = a[i * k + l];
            }
        }
        let mut c3 = vec![0.0; m * n];
        sgemm_at(m, n, k, &mut c3, &at, &b, false);
        for (x, y) in c.iter().zip(&c3) {
            assert!((x - y).abs() < 1e-5);
        }
    }

    #[test]
    fn adam_descends_quadratic() {
        let mut p = Param::new("x", vec![3.0, -2.0]);
        let cfg = AdamConfig {
            lr: 0.1,
            clip_norm: None,
            ..Default::default()
        };
        for _ in 0..200 {
            for i in 0..2 {
                p.grad[i] = 2.0 * p.data[i];
            }
            adam_step(&mut [&mut p], &cfg);
        }
        assert!(p.data.iter().all(|v| v.abs() < 0.05));
    }

    #[test]
    fn seed_rng_streams_are_independent_and_stable() {
        let mut a1 = seed_rng(7, "a");
        let mut a2 = seed_rng(7, "a");
        let mut b = seed_rng(7, "b");
        let x1: f32 = a1.gen();
        let x2: f32 = a2.gen();
        let y: f32 = b.gen();
        assert_eq!(x1, x2);
        assert_ne!(x1, y);
    }

    #[test]
    fn par_images_is_deterministic() {
        let b = 7;
        let stride = 13;
        let mut out1 = vec![0.0f32; b * stride];
        let mut out2 = vec![0.0f32; b * stride];
        let f = |i: usize, chunk: &mut [f32]| {
            for (j, v) in chunk.iter_mut().enumerate() {
                *v = (i * 31 + j) as f32;
            }
        };
        par_images(b, &mut out1, stride, f);
        par_images(b, &mut out2, stride, f);
        assert_eq!(out1, out2);
        assert_eq!(out1[6 * stride], (6 * 31) as f32);
    }
}
