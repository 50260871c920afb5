//! The desk-scale threat model: a small residual classifier, its clean
//! training loop, and the `ThreatModel` surface used by attacks, losses and
//! evaluation.

use crate::error::{Error, Result};
use crate::imaging::LabeledImage;
use crate::nn::conv::Conv2d;
use crate::nn::ops::{
    gap_backward, gap_forward, relu_backward, relu_forward, softmax_ce, softmax_ce_backward,
    Linear,
};
use crate::nn::{adam_step, fingerprint_params, seed_rng, AdamConfig, Param, Tensor};
use crate::ImageTensor;
use rand::seq::SliceRandom;

/// Differentiable classifier surface shared by the attack, training and
/// evaluation modules. Implementations are immutable through this trait, so
/// a model can be shared read-only across worker threads.
pub trait ThreatModel: Send + Sync {
    fn num_classes(&self) -> usize;

    /// Class logits, shape (B, num_classes, 1, 1).
    fn logits(&self, images: &Tensor) -> Tensor;

    /// Mean cross-entropy against `labels` plus its gradient w.r.t. the
    /// input images.
    fn ce_input_grad(&self, images: &Tensor, labels: &[usize]) -> (f32, Tensor);

    /// Mean cross-entropy without the input gradient.
    fn ce_loss(&self, images: &Tensor, labels: &[usize]) -> f32 {
        softmax_ce(&self.logits(images), labels).0
    }

    /// Cross-entropy against a soft target distribution, with input gradient.
    fn soft_ce_input_grad(&self, images: &Tensor, target_probs: &Tensor) -> (f32, Tensor);

    /// Names of layers exposed for feature probes.
    fn probe_layers(&self) -> Vec<String>;

    /// Feature tensor at a named intermediate layer.
    fn probe(&self, images: &Tensor, layer: &str) -> Result<Tensor>;

    /// Mean absolute difference between probe features of `images` and the
    /// fixed `target_feats`, with gradient w.r.t. `images`.
    fn probe_l1_input_grad(
        &self,
        images: &Tensor,
        target_feats: &Tensor,
        layer: &str,
    ) -> Result<(f32, Tensor)>;

    /// Content hash of the weights.
    fn fingerprint(&self) -> String;

    fn predict(&self, images: &Tensor) -> Vec<usize> {
        let logits = self.logits(images);
        (0..logits.b)
            .map(|b| {
                let row = logits.image(b);
                row.iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).expect("finite logits"))
                    .map(|(i, _)| i)
                    .unwrap_or(0)
            })
            .collect()
    }

    fn accuracy(&self, images: &Tensor, labels: &[usize]) -> f64 {
        let preds = self.predict(images);
        let hits = preds.iter().zip(labels).filter(|(p, l)| p == l).count();
        hits as f64 / labels.len().max(1) as f64
    }
}

/// Residual block: `relu(conv2(relu(conv1(x))) + proj(x))`, with a strided
/// 1×1 projection when the shape changes.
#[derive(Debug, Clone)]
struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    proj: Option<Conv2d>,
}

struct BlockActs {
    x: Tensor,
    h1: Tensor,
    y: Tensor,
}

impl ResBlock {
    fn new(name: &str, in_c: usize, out_c: usize, stride: usize, rng: &mut rand_chacha::ChaCha8Rng) -> Self {
        let proj = if in_c != out_c || stride != 1 {
            Some(Conv2d::new(&format!("{name}.proj"), in_c, out_c, 1, stride, 0, rng))
        } else {
            None
        };
        ResBlock {
            conv1: Conv2d::new(&format!("{name}.c1"), in_c, out_c, 3, stride, 1, rng),
            conv2: Conv2d::new(&format!("{name}.c2"), out_c, out_c, 3, 1, 1, rng),
            proj,
        }
    }

    fn forward(&self, x: &Tensor) -> (Tensor, BlockActs) {
        let h1 = relu_forward(&self.conv1.forward(x));
        let mut sum = self.conv2.forward(&h1);
        match &self.proj {
            Some(p) => {
                let px = p.forward(x);
                for (s, v) in sum.data.iter_mut().zip(&px.data) {
                    *s += *v;
                }
            }
            None => {
                for (s, v) in sum.data.iter_mut().zip(&x.data) {
                    *s += *v;
                }
            }
        }
        let y = relu_forward(&sum);
        (
            y.clone(),
            BlockActs {
                x: x.clone(),
                h1,
                y,
            },
        )
    }

    fn backward(&mut self, acts: &BlockActs, dy: &Tensor) -> Tensor {
        let dsum = relu_backward(&acts.y, dy);
        let dh1_pre = self.conv2.backward(&acts.h1, &dsum);
        let dh1 = relu_backward(&acts.h1, &dh1_pre);
        let mut dx = self.conv1.backward(&acts.x, &dh1);
        match &mut self.proj {
            Some(p) => {
                let dpx = p.backward(&acts.x, &dsum);
                for (a, b) in dx.data.iter_mut().zip(&dpx.data) {
                    *a += *b;
                }
            }
            None => {
                for (a, b) in dx.data.iter_mut().zip(&dsum.data) {
                    *a += *b;
                }
            }
        }
        dx
    }

    fn backward_input(&self, acts: &BlockActs, dy: &Tensor) -> Tensor {
        let dsum = relu_backward(&acts.y, dy);
        let dh1_pre = self.conv2.backward_input(&dsum, acts.h1.h, acts.h1.w);
        let dh1 = relu_backward(&acts.h1, &dh1_pre);
        let mut dx = self.conv1.backward_input(&dh1, acts.x.h, acts.x.w);
        match &self.proj {
            Some(p) => {
                let dpx = p.backward_input(&dsum, acts.x.h, acts.x.w);
                for (a, b) in dx.data.iter_mut().zip(&dpx.data) {
                    *a += *b;
                }
            }
            None => {
                for (a, b) in dx.data.iter_mut().zip(&dsum.data) {
                    *a += *b;
                }
            }
        }
        dx
    }

    fn params(&self) -> Vec<&Param> {
        let mut v: Vec<&Param> = self.conv1.params();
        v.extend(self.conv2.params());
        if let Some(p) = &self.proj {
            v.extend(p.params());
        }
        v
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v: Vec<&mut Param> = self.conv1.params_mut();
        v.extend(self.conv2.params_mut());
        if let Some(p) = &mut self.proj {
            v.extend(p.params_mut());
        }
        v
    }
}

/// Names of the probe-able layers, outermost last.
pub const PROBE_LAYERS: [&str; 4] = ["stem", "stage1", "stage2", "stage3"];

/// Default probe layer for the semantic loss: the deepest feature map.
pub const DEFAULT_PROBE_LAYER: &str = "stage3";

/// Small residual classifier for 32×32 RGB inputs: stem + 3 residual
/// stages (stride 1, 2, 2) + global average pooling + linear head.
#[derive(Debug, Clone)]
pub struct SmallResNet {
    stem: Conv2d,
    blocks: Vec<ResBlock>,
    fc: Linear,
    pub num_classes: usize,
    pub base_channels: usize,
}

pub struct NetActs {
    x: Tensor,
    stem_out: Tensor,
    block_acts: Vec<BlockActs>,
    pooled: Tensor,
}

impl SmallResNet {
    pub fn new(num_classes: usize, base_channels: usize, seed: u64) -> Self {
        let mut rng = seed_rng(seed, "classifier-init");
        let c = base_channels;
        let stem = Conv2d::new("stem", 3, c, 3, 1, 1, &mut rng);
        let blocks = vec![
            ResBlock::new("stage1", c, c, 1, &mut rng),
            ResBlock::new("stage2", c, 2 * c, 2, &mut rng),
            ResBlock::new("stage3", 2 * c, 4 * c, 2, &mut rng),
        ];
        let fc = Linear::new("fc", 4 * c, num_classes, &mut rng);
        SmallResNet {
            stem,
            blocks,
            fc,
            num_classes,
            base_channels,
        }
    }

    pub fn forward_full(&self, x: &Tensor) -> (Tensor, NetActs) {
        let stem_out = relu_forward(&self.stem.forward(x));
        let mut cur = stem_out.clone();
        let mut block_acts = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let (y, acts) = b.forward(&cur);
            block_acts.push(acts);
            cur = y;
        }
        let pooled = gap_forward(&cur);
        let logits = self.fc.forward(&pooled);
        (
            logits,
            NetActs {
                x: x.clone(),
                stem_out,
                block_acts,
                pooled,
            },
        )
    }

    /// Backward to the input without touching parameter gradients.
    pub fn backward_input(&self, acts: &NetActs, dlogits: &Tensor) -> Tensor {
        let dpooled = self.fc.backward_input(dlogits);
        let last = acts.block_acts.last().expect("at least one block");
        let mut grad = gap_backward(&dpooled, last.y.h, last.y.w);
        for (b, a) in self.blocks.iter().zip(&acts.block_acts).rev() {
            grad = b.backward_input(a, &grad);
        }
        let grad = relu_backward(&acts.stem_out, &grad);
        self.stem.backward_input(&grad, acts.x.h, acts.x.w)
    }

    /// Backward accumulating parameter gradients (classifier training).
    pub fn backward_params(&mut self, acts: &NetActs, dlogits: &Tensor) {
        let dpooled = self.fc.backward(&acts.pooled, dlogits);
        let last = acts.block_acts.last().expect("at least one block");
        let mut grad = gap_backward(&dpooled, last.y.h, last.y.w);
        let n = self.blocks.len();
        for i in (0..n).rev() {
            grad = self.blocks[i].backward(&acts.block_acts[i], &grad);
        }
        let grad = relu_backward(&acts.stem_out, &grad);
        self.stem.backward_params_only(&acts.x, &grad);
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut v = self.stem.params();
        for b in &self.blocks {
            v.extend(b.params());
        }
        v.extend(self.fc.params());
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut v = self.stem.params_mut();
        for b in &mut self.blocks {
            v.extend(b.params_mut());
        }
        v.extend(self.fc.params_mut());
        v
    }

    fn layer_output(&self, images: &Tensor, layer: &str) -> Result<(Tensor, NetActs, usize)> {
        let (_, acts) = self.forward_full(images);
        let idx = PROBE_LAYERS
            .iter()
            .position(|l| *l == layer)
            .ok_or_else(|| Error::UnknownLayer(layer.to_string()))?;
        let out = if idx == 0 {
            acts.stem_out.clone()
        } else {
            acts.block_acts[idx - 1].y.clone()
        };
        Ok((out, acts, idx))
    }
}

impl ThreatModel for SmallResNet {
    fn num_classes(&self) -> usize {
        self.num_classes
    }

    fn logits(&self, images: &Tensor) -> Tensor {
        self.forward_full(images).0
    }

    fn ce_input_grad(&self, images: &Tensor, labels: &[usize]) -> (f32, Tensor) {
        let (logits, acts) = self.forward_full(images);
        let (loss, probs) = softmax_ce(&logits, labels);
        let dlogits = softmax_ce_backward(&probs, labels);
        (loss, self.backward_input(&acts, &dlogits))
    }

    fn soft_ce_input_grad(&self, images: &Tensor, target_probs: &Tensor) -> (f32, Tensor) {
        let (logits, acts) = self.forward_full(images);
        // stable log-softmax
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
            for (p, t) in row.iter().zip(target_probs.image(b)) {
                loss -= (*t as f64) * (p.max(1e-12) as f64).ln();
            }
        }
        let inv_b = 1.0 / logits.b as f32;
        let mut dlogits = probs;
        for b in 0..dlogits.b {
            let row = dlogits.image_mut(b);
            for (v, t) in row.iter_mut().zip(target_probs.image(b)) {
                *v = (*v - *t) * inv_b;
            }
        }
        (
            (loss / logits.b as f64) as f32,
            self.backward_input(&acts, &dlogits),
        )
    }

    fn probe_layers(&self) -> Vec<String> {
        PROBE_LAYERS.iter().map(|s| s.to_string()).collect()
    }

    fn probe(&self, images: &Tensor, layer: &str) -> Result<Tensor> {
        Ok(self.layer_output(images, layer)?.0)
    }

    fn probe_l1_input_grad(
        &self,
        images: &Tensor,
        target_feats: &Tensor,
        layer: &str,
    ) -> Result<(f32, Tensor)> {
        let (feats, acts, idx) = self.layer_output(images, layer)?;
        if !feats.same_shape(target_feats) {
            return Err(Error::ShapeMismatch {
                expected: target_feats.shape_string(),
                got: feats.shape_string(),
            });
        }
        let (loss, dfeats) = crate::nn::ops::l1_loss_grad(&feats, target_feats);
        // backpropagate from the probe layer down to the input
        let mut grad = dfeats;
        for i in (0..idx).rev() {
            grad = self.blocks[i].backward_input(&acts.block_acts[i], &grad);
        }
        let grad = relu_backward(&acts.stem_out, &grad);
        Ok((loss, self.stem.backward_input(&grad, acts.x.h, acts.x.w)))
    }

    fn fingerprint(&self) -> String {
        fingerprint_params(self.params().into_iter())
    }
}

/// Configuration of the clean classifier training run.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ClassifierTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f32,
    pub seed: u64,
}

impl Default for ClassifierTrainConfig {
    fn default() -> Self {
        ClassifierTrainConfig {
            epochs: 20,
            batch_size: 64,
            lr: 1e-3,
            seed: 0,
        }
    }
}

/// Train a classifier on clean labelled images with Adam + cross-entropy.
/// Returns the per-epoch mean losses.
pub fn train_classifier(
    model: &mut SmallResNet,
    data: &[LabeledImage],
    cfg: &ClassifierTrainConfig,
) -> Result<Vec<f32>> {
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    let adam = AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(5.0),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed_rng(cfg.seed, &format!("clf-epoch-{epoch}"));
        order.shuffle(&mut rng);
        let mut total = 0.0f64;
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let images: Vec<&ImageTensor> = chunk.iter().map(|&i| &data[i].image).collect();
            let labels: Vec<usize> = chunk.iter().map(|&i| data[i].label).collect();
            let batch = ImageTensor::batch(&images);
            let (logits, acts) = model.forward_full(&batch);
            let (loss, probs) = softmax_ce(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "classifier loss diverged at epoch {epoch}"
                )));
            }
            let dlogits = softmax_ce_backward(&probs, &labels);
            for p in model.params_mut() {
                p.zero_grad();
            }
            model.backward_params(&acts, &dlogits);
            adam_step(&mut model.params_mut(), &adam);
            total += loss as f64;
            batches += 1;
        }
        epoch_losses.push((total / batches.max(1) as f64) as f32);
    }
    Ok(epoch_losses)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array3;
    use rand::Rng;

    fn tiny_dataset(n: usize, seed: u64) -> Vec<LabeledImage> {
        // two linearly separable classes: bright-ish vs dark-ish textures
        let mut rng = seed_rng(seed, "tinyds");
        (0..n)
            .map(|i| {
                let label = i % 2;
                let base = if label == 0 { 0.3 } else { 0.7 };
                let image = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| {
                    (base + rng.gen_range(-0.2..0.2f32)).clamp(0.0, 1.0)
                }))
                .unwrap();
                LabeledImage { image, label }
            })
            .collect()
    }

    #[test]
    fn training_reduces_loss_and_fits_easy_data() {
        let data = tiny_dataset(64, 1);
        let mut model = SmallResNet::new(2, 8, 42);
        let cfg = ClassifierTrainConfig {
            epochs: 6,
            batch_size: 16,
            lr: 2e-3,
            seed: 5,
        };
        let losses = train_classifier(&mut model, &data, &cfg).unwrap();
        assert!(losses.last().unwrap() < losses.first().unwrap());
        let images: Vec<&ImageTensor> = data.iter().map(|d| &d.image).collect();
        let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
        let batch = ImageTensor::batch(&images);
        assert!(model.accuracy(&batch, &labels) > 0.9);
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let model = SmallResNet::new(3, 4, 7);
        let mut rng = seed_rng(9, "fd");
        let x = Tensor::from_vec(
            (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
            1,
            3,
            16,
            16,
        );
        let labels = [1usize];
        let (_, grad) = model.ce_input_grad(&x, &labels);
        let h = 1e-2f32;
        for idx in [0usize, 100, 300, 700] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fp = model.ce_loss(&xp, &labels) as f64;
            let fm = model.ce_loss(&xm, &labels) as f64;
            let fd = (fp - fm) / (2.0 * h as f64);
            // f32 forward + ReLU kinks: finite differences are crude here
            assert!(
                (grad.data[idx] as f64 - fd).abs() < (0.1 * fd.abs()).max(3e-3),
                "idx {idx}: analytic {} vs fd {fd}",
                grad.data[idx]
            );
        }
    }

    #[test]
    fn probe_layers_exist_and_unknown_layer_errors() {
        let model = SmallResNet::new(3, 4, 8);
        let x = Tensor::zeros(1, 3, 16, 16);
        for layer in PROBE_LAYERS {
            let f = model.probe(&x, layer).unwrap();
            assert!(f.len() > 0);
        }
        assert!(matches!(
            model.probe(&x, "nosuch"),
            Err(Error::UnknownLayer(_))
        ));
    }

    #[test]
    fn probe_l1_gradient_matches_finite_differences() {
        let model = SmallResNet::new(3, 4, 11);
        let mut rng = seed_rng(12, "fd2");
        let x = Tensor::from_vec(
            (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
            1,
            3,
            16,
            16,
        );
        let target = {
            let y = Tensor::from_vec(
                (0..3 * 16 * 16).map(|_| rng.gen_range(0.0..1.0f32)).collect(),
                1,
                3,
                16,
                16,
            );
            model.probe(&y, "stage2").unwrap()
        };
        let (_, grad) = model.probe_l1_input_grad(&x, &target, "stage2").unwrap();
        let h = 1e-2f32;
        for idx in [3usize, 50, 420] {
            let mut xp = x.clone();
            xp.data[idx] += h;
            let mut xm = x.clone();
            xm.data[idx] -= h;
            let fp = model
                .probe_l1_input_grad(&xp, &target, "stage2")
                .unwrap()
                .0 as f64;
            let fm = model
                .probe_l1_input_grad(&xm, &target, "stage2")
                .unwrap()
                .0 as f64;
            let fd = (fp - fm) / (2.0 * h as f64);
            assert!(
                (grad.data[idx] as f64 - fd).abs() < (0.1 * fd.abs()).max(3e-3),
                "idx {idx}: analytic {} vs fd {fd}",
                grad.data[idx]
            );
        }
    }

    #[test]
    fn fingerprint_tracks_weights() {
        let a = SmallResNet::new(2, 4, 1);
        let b = SmallResNet::new(2, 4, 1);
        let mut c = SmallResNet::new(2, 4, 1);
        assert_eq!(a.fingerprint(), b.fingerprint());
        c.params_mut()[0].data[0] += 1.0;
        assert_ne!(a.fingerprint(), c.fingerprint());
    }
}
