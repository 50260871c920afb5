//! Untargeted L∞ PGD attack generation and adversarial-dataset construction
//! against a pluggable differentiable classifier.

pub mod shard;

pub use crate::classifier::ThreatModel;

use crate::error::{Error, Result};
use crate::imaging::{ImageTensor, LabeledImage};
use crate::nn::{seed_rng, Tensor};
use rand::Rng;

/// The attack-strength grid: {1e-m, 3e-m, 5e-m | m ∈ [1,2,3,4]}.
pub const DEFAULT_EPS_GRID: [f64; 12] = [
    1e-4, 3e-4, 5e-4, 1e-3, 3e-3, 5e-3, 1e-2, 3e-2, 5e-2, 1e-1, 3e-1, 5e-1,
];

/// Canonical short label for a strength value ("0", "3e-4", ...).
pub fn eps_label(eps: f64) -> String {
    if eps == 0.0 {
        "0".to_string()
    } else {
        format!("{eps:e}")
    }
}

/// L∞ is the only supported norm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum NormTag {
    LInf,
}

/// PGD attack parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct AttackSpec {
    /// Attack iterations n.
    pub iterations: usize,
    /// Maximum per-pixel perturbation ε, unit range.
    pub epsilon: f64,
    /// Step size α.
    pub step_size: f64,
    pub norm: NormTag,
}

impl AttackSpec {
    /// Standard schedule α = 2.5·ε/n, capped at ε for very small n.
    pub fn new(iterations: usize, epsilon: f64) -> Result<Self> {
        let step_size = if iterations > 0 {
            (2.5 * epsilon / iterations as f64).min(epsilon)
        } else {
            0.0
        };
        let spec = AttackSpec {
            iterations,
            epsilon,
            step_size,
            norm: NormTag::LInf,
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn with_step_size(mut self, step_size: f64) -> Result<Self> {
        self.step_size = step_size;
        self.validate()?;
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(Error::Config(format!("epsilon {} outside [0,1]", self.epsilon)));
        }
        if self.iterations == 0 {
            return Err(Error::Config("iterations must be >= 1".into()));
        }
        if self.epsilon > 0.0 && !(self.step_size > 0.0 && self.step_size <= self.epsilon) {
            return Err(Error::Config(format!(
                "step size {} outside (0, {}]",
                self.step_size, self.epsilon
            )));
        }
        Ok(())
    }
}

/// Tolerance on the recorded L∞ bound (f32 arithmetic slack).
pub const LINF_SLACK: f32 = 1e-6;

/// A clean image together with its attacked counterpart.
#[derive(Debug, Clone)]
pub struct AdversarialPair {
    pub clean: LabeledImage,
    pub adversarial: ImageTensor,
    pub spec: AttackSpec,
}

impl AdversarialPair {
    /// Check the pair invariants: ‖δ‖∞ ≤ ε + slack and values in [0,1].
    pub fn validate(&self) -> Result<()> {
        let linf = self.clean.image.linf_distance(&self.adversarial);
        if linf > self.spec.epsilon as f32 + LINF_SLACK {
            return Err(Error::Numerical(format!(
                "L-inf {} exceeds epsilon {}",
                linf, self.spec.epsilon
            )));
        }
        if self
            .adversarial
            .data
            .iter()
            .any(|v| !(0.0..=1.0).contains(v))
        {
            return Err(Error::Numerical("adversarial values outside [0,1]".into()));
        }
        Ok(())
    }
}

#[inline]
fn sign(v: f32) -> f32 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// PGD on one image. Random uniform start in the ε-ball under `seed`; each
/// step ascends the cross-entropy, projects back into the ε-ball and
/// re-clamps the image to [0,1].
pub fn pgd_attack(
    model: &dyn ThreatModel,
    input: &LabeledImage,
    spec: &AttackSpec,
    seed: u64,
) -> Result<AdversarialPair> {
    let mut out = pgd_attack_batch(model, &[input], spec, &[seed])?;
    Ok(out.pop().expect("one pair per input"))
}

/// Batched PGD with one independent RNG stream per image, so the same
/// (image, seed) pair produces the same draw regardless of batch grouping.
pub fn pgd_attack_batch(
    model: &dyn ThreatModel,
    inputs: &[&LabeledImage],
    spec: &AttackSpec,
    seeds: &[u64],
) -> Result<Vec<AdversarialPair>> {
    spec.validate()?;
    assert_eq!(inputs.len(), seeds.len());
    if inputs.is_empty() {
        return Ok(Vec::new());
    }
    if spec.epsilon == 0.0 {
        // zero-radius ball: the clean image, exactly
        return Ok(inputs
            .iter()
            .map(|li| AdversarialPair {
                clean: (*li).clone(),
                adversarial: li.image.clone(),
                spec: *spec,
            })
            .collect());
    }
    let eps = spec.epsilon as f32;
    let alpha = spec.step_size as f32;
    let images: Vec<&ImageTensor> = inputs.iter().map(|li| &li.image).collect();
    let labels: Vec<usize> = inputs.iter().map(|li| li.label).collect();
    let x0 = ImageTensor::batch(&images);
    let n_img = x0.image_len();

    let mut delta = Tensor::zeros(x0.b, x0.c, x0.h, x0.w);
    for bi in 0..x0.b {
        let mut rng = seed_rng(seeds[bi], "pgd");
        let d = delta.image_mut(bi);
        for v in d.iter_mut() {
            *v = rng.gen_range(-eps..=eps);
        }
    }
    project(&mut delta, &x0, eps);

    let mut x = x0.clone();
    for _step in 0..spec.iterations {
        for i in 0..x.data.len() {
            x.data[i] = x0.data[i] + delta.data[i];
        }
        let (_, grad) = model.ce_input_grad(&x, &labels);
        if grad.has_nan() {
            return Err(Error::Numerical(
                "NaN gradient during PGD; classifier output is not finite".into(),
            ));
        }
        for i in 0..delta.data.len() {
            delta.data[i] += alpha * sign(grad.data[i]);
        }
        project(&mut delta, &x0, eps);
    }

    Ok((0..x0.b)
        .map(|bi| {
            let mut adv = inputs[bi].image.clone();
            let d = &delta.data[bi * n_img..(bi + 1) * n_img];
            let x0i = &x0.data[bi * n_img..(bi + 1) * n_img];
            let (h, w) = (adv.height(), adv.width());
            for c in 0..3 {
                for y in 0..h {
                    for xx in 0..w {
                        let idx = (c * h + y) * w + xx;
                        adv.data[(y, xx, c)] = x0i[idx] + d[idx];
                    }
                }
            }
            AdversarialPair {
                clean: inputs[bi].clone(),
                adversarial: adv,
                spec: *spec,
            }
        })
        .collect())
}

/// Project δ into the ε-ball and keep `x0 + δ` inside [0,1].
fn project(delta: &mut Tensor, x0: &Tensor, eps: f32) {
    for i in 0..delta.data.len() {
        let mut d = delta.data[i].clamp(-eps, eps);
        let v = (x0.data[i] + d).clamp(0.0, 1.0);
        d = v - x0.data[i];
        delta.data[i] = d;
    }
}

/// Attack batch size used when sweeping a dataset.
pub const ATTACK_BATCH: usize = 64;

/// Build the |images| × |strengths| adversarial dataset, grouped by
/// strength. Per-pair seeds derive from (seed, strength, image index).
pub fn build_attack_dataset(
    model: &dyn ThreatModel,
    images: &[LabeledImage],
    strengths: &[f64],
    iterations: usize,
    seed: u64,
) -> Result<Vec<AdversarialPair>> {
    if strengths.is_empty() {
        return Err(Error::Config("empty strength grid".into()));
    }
    if images.is_empty() {
        return Err(Error::Dataset("empty image set".into()));
    }
    let mut out = Vec::with_capacity(images.len() * strengths.len());
    for &eps in strengths {
        let spec = AttackSpec::new(iterations, eps)?;
        for (chunk_idx, chunk) in images.chunks(ATTACK_BATCH).enumerate() {
            let refs: Vec<&LabeledImage> = chunk.iter().collect();
            let seeds: Vec<u64> = (0..chunk.len())
                .map(|i| {
                    let global = chunk_idx * ATTACK_BATCH + i;
                    pair_seed(seed, eps, global)
                })
                .collect();
            out.extend(pgd_attack_batch(model, &refs, &spec, &seeds)?);
        }
    }
    Ok(out)
}

/// Stable per-pair seed derivation shared by the in-memory builder and the
/// shard writer.
pub fn pair_seed(seed: u64, eps: f64, image_index: usize) -> u64 {
    use rand_chacha::rand_core::RngCore;
    seed_rng(seed, &format!("pair-{}-{image_index}", eps_label(eps))).next_u64()
}

/// Fraction of pairs whose adversarial image is misclassified w.r.t. the
/// ground-truth label.
pub fn attack_success_rate(model: &dyn ThreatModel, pairs: &[AdversarialPair]) -> Result<f64> {
    if pairs.is_empty() {
        return Err(Error::Dataset("no pairs to evaluate".into()));
    }
    let mut wrong = 0usize;
    for chunk in pairs.chunks(ATTACK_BATCH) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|p| &p.adversarial).collect();
        let batch = ImageTensor::batch(&images);
        let preds = model.predict(&batch);
        wrong += preds
            .iter()
            .zip(chunk)
            .filter(|(p, pair)| **p != pair.clean.label)
            .count();
    }
    Ok(wrong as f64 / pairs.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::SmallResNet;
    use ndarray::Array3;

    fn tiny_model_and_data() -> (SmallResNet, Vec<LabeledImage>) {
        let mut rng = seed_rng(3, "atk-data");
        let data: Vec<LabeledImage> = (0..32)
            .map(|i| {
                let label = i % 2;
                let base = if label == 0 { 0.35 } else { 0.65 };
                let image = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| {
                    use rand::Rng;
                    (base + rng.gen_range(-0.15..0.15f32)).clamp(0.0, 1.0)
                }))
                .unwrap();
                LabeledImage { image, label }
            })
            .collect();
        let mut model = SmallResNet::new(2, 4, 5);
        let cfg = crate::classifier::ClassifierTrainConfig {
            epochs: 12,
            batch_size: 8,
            lr: 2e-3,
            seed: 1,
        };
        crate::classifier::train_classifier(&mut model, &data, &cfg).unwrap();
        (model, data)
    }

    #[test]
    fn zero_epsilon_returns_clean_exactly() {
        let (model, data) = tiny_model_and_data();
        let spec = AttackSpec::new(5, 0.0).unwrap();
        let pair = pgd_attack(&model, &data[0], &spec, 9).unwrap();
        assert_eq!(pair.adversarial, data[0].image);
    }

    #[test]
    fn projection_invariants_hold() {
        let (model, data) = tiny_model_and_data();
        for eps in [1e-3, 5e-2, 0.3] {
            let spec = AttackSpec::new(8, eps).unwrap();
            let pair = pgd_attack(&model, &data[1], &spec, 4).unwrap();
            pair.validate().unwrap();
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let (model, data) = tiny_model_and_data();
        let spec = AttackSpec::new(6, 0.05).unwrap();
        let a = pgd_attack(&model, &data[2], &spec, 7).unwrap();
        let b = pgd_attack(&model, &data[2], &spec, 7).unwrap();
        assert_eq!(a.adversarial, b.adversarial);
        let c = pgd_attack(&model, &data[2], &spec, 8).unwrap();
        assert_ne!(a.adversarial, c.adversarial);
    }

    #[test]
    fn dataset_builder_counts_and_bounds() {
        let (model, data) = tiny_model_and_data();
        let strengths = [0.0, 0.01];
        let pairs = build_attack_dataset(&model, &data[..4], &strengths, 3, 2).unwrap();
        assert_eq!(pairs.len(), 8);
        for p in &pairs {
            p.validate().unwrap();
        }
        // eps=0 block is the clean images
        for (p, d) in pairs[..4].iter().zip(&data[..4]) {
            assert_eq!(p.adversarial, d.image);
        }
        assert!(build_attack_dataset(&model, &[], &strengths, 3, 2).is_err());
        assert!(build_attack_dataset(&model, &data[..2], &[], 3, 2).is_err());
    }

    #[test]
    fn success_rate_endpoints() {
        let (model, data) = tiny_model_and_data();
        // all-clean pairs on a perfect classifier: success rate is 0
        {
            let images: Vec<&ImageTensor> = data.iter().map(|d| &d.image).collect();
            let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
            assert_eq!(model.accuracy(&ImageTensor::batch(&images), &labels), 1.0);
        }
        let spec = AttackSpec::new(3, 0.0).unwrap();
        let clean_pairs: Vec<AdversarialPair> = data
            .iter()
            .map(|d| AdversarialPair {
                clean: d.clone(),
                adversarial: d.image.clone(),
                spec,
            })
            .collect();
        let rate = attack_success_rate(&model, &clean_pairs).unwrap();
        assert_eq!(rate, 0.0);

        // strong attack flips essentially everything on this toy model
        let pairs = build_attack_dataset(&model, &data, &[0.3], 10, 3).unwrap();
        let rate = attack_success_rate(&model, &pairs).unwrap();
        assert!(rate >= 0.9, "strong-attack success rate {rate}");
    }

    #[test]
    fn attack_increases_loss() {
        let (model, data) = tiny_model_and_data();
        let images: Vec<&ImageTensor> = data.iter().map(|d| &d.image).collect();
        let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
        let clean_loss = model.ce_loss(&ImageTensor::batch(&images), &labels);
        let pairs = build_attack_dataset(&model, &data, &[0.05], 8, 11).unwrap();
        let adv_images: Vec<&ImageTensor> = pairs.iter().map(|p| &p.adversarial).collect();
        let adv_loss = model.ce_loss(&ImageTensor::batch(&adv_images), &labels);
        assert!(adv_loss >= clean_loss);
    }

    #[test]
    fn spec_validation() {
        assert!(AttackSpec::new(0, 0.1).is_err());
        assert!(AttackSpec::new(10, 1.5).is_err());
        assert!(AttackSpec::new(10, 0.1)
            .unwrap()
            .with_step_size(0.2)
            .is_err());
        let s = AttackSpec::new(40, 0.08).unwrap();
        assert!((s.step_size - 2.5 * 0.08 / 40.0).abs() < 1e-12);
    }
}
