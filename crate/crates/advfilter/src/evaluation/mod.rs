//! The denoise-then-classify pipeline: accuracy sweeps over attack
//! strengths and iteration counts, image-quality sweeps, adversarial
//! training of the classifier, and the denoising + adversarial-training
//! combination study.

pub mod report;

use crate::attack::{eps_label, pgd_attack_batch, AdversarialPair, AttackSpec, ThreatModel};
use crate::backbone::{MultiHeadDenoiser, UNetDenoiser, YNetDenoiser};
use crate::classifier::{ClassifierTrainConfig, SmallResNet};
use crate::error::{Error, Result};
use crate::filtering::FusionNet;
use crate::imaging::{metrics, ImageTensor, LabeledImage};
use crate::nn::{adam_step, seed_rng, AdamConfig, Tensor};
use crate::training::{fuse_batch, stack_uncertainty_maps};
use rand::seq::SliceRandom;
use std::collections::BTreeMap;
use std::sync::Arc;

/// What sweeps an evaluation covers.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepSpec {
    /// Strength grid; 0 means clean images.
    pub epsilon_grid: Vec<f64>,
    /// Attack iteration counts; the default sweep uses n=40 only.
    pub iteration_grid: Vec<usize>,
    /// Fixed strength of the varying-iterations block.
    pub iteration_sweep_epsilon: f64,
    pub images_per_cell: usize,
}

impl Default for SweepSpec {
    fn default() -> Self {
        let mut grid = vec![0.0];
        grid.extend_from_slice(&crate::attack::DEFAULT_EPS_GRID);
        SweepSpec {
            epsilon_grid: grid,
            iteration_grid: vec![40],
            iteration_sweep_epsilon: 0.3,
            images_per_cell: 500,
        }
    }
}

/// The denoiser slot of a pipeline.
#[derive(Clone)]
pub enum PipelineDenoiser {
    /// Raw classifier, no pre-processing.
    None,
    /// Additive or filtering single-branch model.
    Unet(Arc<UNetDenoiser>),
    /// One head of the four-head model (1-based index).
    MultiHead(Arc<MultiHeadDenoiser>, usize),
    /// The sl branch of a Y-Net alone.
    YBranchSl(Arc<YNetDenoiser>),
    /// The m branch of a Y-Net alone.
    YBranchM(Arc<YNetDenoiser>),
    /// Full predictive perturbation-aware filtering: Y-Net branches fused
    /// by the uncertainty-aware fusion network.
    AdvFilter(Arc<YNetDenoiser>, Arc<FusionNet>),
}

impl PipelineDenoiser {
    pub fn denoise_batch(&self, images: &Tensor) -> Result<Tensor> {
        Ok(match self {
            PipelineDenoiser::None => images.clone(),
            PipelineDenoiser::Unet(m) => m.denoise_batch(images),
            PipelineDenoiser::MultiHead(m, head) => m.denoise_batch(images, *head)?,
            PipelineDenoiser::YBranchSl(m) => m.denoise_branches_batch(images).0,
            PipelineDenoiser::YBranchM(m) => m.denoise_branches_batch(images).1,
            PipelineDenoiser::AdvFilter(ynet, fusion) => {
                let k = ynet.head_cfg.filter_size;
                let (logits_sl, logits_m) = ynet.forward(images);
                let i_sl = crate::filtering::filter_forward_batch(images, &logits_sl, k).0;
                let i_m = crate::filtering::filter_forward_batch(images, &logits_m, k).0;
                let maps = stack_uncertainty_maps(&logits_sl, &logits_m);
                let (wmap, _) = fusion.forward_batch(&maps);
                fuse_batch(&i_sl, &i_m, &wmap)
            }
        })
    }

    pub fn fingerprint(&self) -> Option<String> {
        use crate::nn::fingerprint_params;
        match self {
            PipelineDenoiser::None => None,
            PipelineDenoiser::Unet(m) => Some(fingerprint_params(m.params().into_iter())),
            PipelineDenoiser::MultiHead(m, _) => Some(fingerprint_params(m.params().into_iter())),
            PipelineDenoiser::YBranchSl(m) | PipelineDenoiser::YBranchM(m) => {
                Some(fingerprint_params(m.params().into_iter()))
            }
            PipelineDenoiser::AdvFilter(y, f) => {
                let mut ps = y.params();
                ps.extend(f.params());
                Some(fingerprint_params(ps.into_iter()))
            }
        }
    }
}

/// A named denoise-then-classify pipeline.
#[derive(Clone)]
pub struct PipelineSpec {
    pub name: String,
    pub denoiser: PipelineDenoiser,
    pub classifier: Arc<SmallResNet>,
}

/// Pre-generated attacked test images, shared by every pipeline so all
/// evaluations see identical inputs. Keyed by (strength label, iterations).
pub struct TestCells {
    pub cells: BTreeMap<(String, usize), Vec<AdversarialPair>>,
    pub default_iterations: usize,
}

impl TestCells {
    pub fn new(default_iterations: usize) -> Self {
        TestCells {
            cells: BTreeMap::new(),
            default_iterations,
        }
    }

    pub fn insert(&mut self, eps: f64, iterations: usize, pairs: Vec<AdversarialPair>) {
        self.cells.insert((eps_label(eps), iterations), pairs);
    }

    pub fn get(&self, eps: f64, iterations: usize) -> Result<&Vec<AdversarialPair>> {
        self.cells
            .get(&(eps_label(eps), iterations))
            .ok_or_else(|| {
                Error::MissingArtifact(format!(
                    "test cell eps={} n={iterations}",
                    eps_label(eps)
                ))
            })
    }

    /// Build cells by attacking `images` against `model` (the undefended,
    /// clean-trained classifier) for every (ε, n) the sweep needs.
    pub fn generate(
        model: &dyn ThreatModel,
        images: &[LabeledImage],
        sweep: &SweepSpec,
        seed: u64,
    ) -> Result<Self> {
        let n_default = sweep.iteration_grid.first().copied().unwrap_or(40);
        let mut cells = TestCells::new(n_default);
        for &eps in &sweep.epsilon_grid {
            let pairs = attack_cell(model, images, eps, n_default, seed)?;
            cells.insert(eps, n_default, pairs);
        }
        for &n in sweep.iteration_grid.iter().skip(1) {
            let eps = sweep.iteration_sweep_epsilon;
            let pairs = attack_cell(model, images, eps, n, seed)?;
            cells.insert(eps, n, pairs);
        }
        Ok(cells)
    }
}

fn attack_cell(
    model: &dyn ThreatModel,
    images: &[LabeledImage],
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<AdversarialPair>> {
    let spec = AttackSpec::new(n, eps)?;
    let mut out = Vec::with_capacity(images.len());
    for (ci, chunk) in images.chunks(crate::attack::ATTACK_BATCH).enumerate() {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| {
                let global = ci * crate::attack::ATTACK_BATCH + i;
                crate::attack::pair_seed(seed.wrapping_add(n as u64), eps, global)
            })
            .collect();
        out.extend(pgd_attack_batch(model, &refs, &spec, &seeds)?);
    }
    Ok(out)
}

/// One accuracy cell: exact rational count.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CellAccuracy {
    pub eps: f64,
    pub iterations: usize,
    pub correct: usize,
    pub total: usize,
}

impl CellAccuracy {
    pub fn fraction(&self) -> f64 {
        self.correct as f64 / self.total.max(1) as f64
    }
}

/// Mean image quality of a cell, denoised-vs-clean and attacked-vs-clean.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct CellQuality {
    pub eps: f64,
    pub psnr_denoised: f64,
    pub ssim_denoised: f64,
    pub psnr_attacked: f64,
    pub ssim_attacked: f64,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct SweepResult {
    pub pipeline: String,
    pub classifier_fingerprint: String,
    pub denoiser_fingerprint: Option<String>,
    pub seed: u64,
    pub accuracy: Vec<CellAccuracy>,
    pub quality: Vec<CellQuality>,
}

impl SweepResult {
    pub fn accuracy_at(&self, eps: f64, iterations: usize) -> Option<f64> {
        self.accuracy
            .iter()
            .find(|c| eps_label(c.eps) == eps_label(eps) && c.iterations == iterations)
            .map(|c| c.fraction())
    }
}

const EVAL_BATCH: usize = 64;

/// Evaluate one pipeline over the sweep: per-cell top-1 accuracy of
/// classifier(denoiser(attacked)) against ground truth, plus the quality
/// table (denoised vs clean).
pub fn evaluate_pipeline(
    pipe: &PipelineSpec,
    sweep: &SweepSpec,
    cells: &TestCells,
    seed: u64,
) -> Result<SweepResult> {
    evaluate_pipeline_opts(pipe, sweep, cells, seed, true)
}

/// `evaluate_pipeline` with the quality table optional: skipping SSIM/PSNR
/// halves the cost of rows that only need accuracy (combination grids).
pub fn evaluate_pipeline_opts(
    pipe: &PipelineSpec,
    sweep: &SweepSpec,
    cells: &TestCells,
    seed: u64,
    with_quality: bool,
) -> Result<SweepResult> {
    use crate::classifier::ThreatModel as _;
    let mut accuracy = Vec::new();
    let mut quality = Vec::new();
    let n0 = cells.default_iterations;
    let mut jobs: Vec<(f64, usize)> = sweep.epsilon_grid.iter().map(|&e| (e, n0)).collect();
    for &n in sweep.iteration_grid.iter().skip(1) {
        jobs.push((sweep.iteration_sweep_epsilon, n));
    }
    for (eps, n) in jobs {
        let pairs = cells.get(eps, n)?;
        let use_n = pairs.len().min(sweep.images_per_cell);
        let mut correct = 0usize;
        let mut psnr_d = 0.0f64;
        let mut ssim_d = 0.0f64;
        let mut psnr_a = 0.0f64;
        let mut ssim_a = 0.0f64;
        for chunk in pairs[..use_n].chunks(EVAL_BATCH) {
            let adv: Vec<&ImageTensor> = chunk.iter().map(|p| &p.adversarial).collect();
            let labels: Vec<usize> = chunk.iter().map(|p| p.clean.label).collect();
            let batch = ImageTensor::batch(&adv);
            let denoised = pipe.denoiser.denoise_batch(&batch)?;
            let preds = pipe.classifier.predict(&denoised);
            correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
            if with_quality {
                for (bi, pair) in chunk.iter().enumerate() {
                    let den = ImageTensor::from_batch(&denoised, bi);
                    psnr_d += metrics::psnr(&den, &pair.clean.image)?;
                    ssim_d += metrics::ssim(&den, &pair.clean.image)?;
                    psnr_a += metrics::psnr(&pair.adversarial, &pair.clean.image)?;
                    ssim_a += metrics::ssim(&pair.adversarial, &pair.clean.image)?;
                }
            }
        }
        accuracy.push(CellAccuracy {
            eps,
            iterations: n,
            correct,
            total: use_n,
        });
        if with_quality {
            quality.push(CellQuality {
                eps,
                psnr_denoised: psnr_d / use_n as f64,
                ssim_denoised: ssim_d / use_n as f64,
                psnr_attacked: psnr_a / use_n as f64,
                ssim_attacked: ssim_a / use_n as f64,
            });
        }
    }
    Ok(SweepResult {
        pipeline: pipe.name.clone(),
        classifier_fingerprint: pipe.classifier.fingerprint(),
        denoiser_fingerprint: pipe.denoiser.fingerprint(),
        seed,
        accuracy,
        quality,
    })
}

/// PGD adversarial training: the attack is regenerated per batch against
/// the current weights, then the step minimizes loss on those examples.
pub fn build_adversarially_trained_classifier(
    data: &[LabeledImage],
    attack: &AttackSpec,
    cfg: &ClassifierTrainConfig,
    num_classes: usize,
    base_channels: usize,
    init_seed: u64,
) -> Result<SmallResNet> {
    if data.is_empty() {
        return Err(Error::Dataset("empty training set".into()));
    }
    attack.validate()?;
    let mut model = SmallResNet::new(num_classes, base_channels, init_seed);
    let adam = AdamConfig {
        lr: cfg.lr,
        clip_norm: Some(5.0),
        ..Default::default()
    };
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        let mut rng = seed_rng(cfg.seed, &format!("advtrain-epoch-{epoch}"));
        order.shuffle(&mut rng);
        for (ci, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&LabeledImage> = chunk.iter().map(|&i| &data[i]).collect();
            let seeds: Vec<u64> = chunk
                .iter()
                .enumerate()
                .map(|(i, _)| {
                    crate::attack::pair_seed(
                        cfg.seed ^ 0xadf1,
                        attack.epsilon,
                        epoch * data.len() + ci * cfg.batch_size + i,
                    )
                })
                .collect();
            let pairs = pgd_attack_batch(&model, &refs, attack, &seeds)?;
            let adv: Vec<&ImageTensor> = pairs.iter().map(|p| &p.adversarial).collect();
            let labels: Vec<usize> = pairs.iter().map(|p| p.clean.label).collect();
            let batch = ImageTensor::batch(&adv);
            let (logits, acts) = model.forward_full(&batch);
            let (loss, probs) = crate::nn::ops::softmax_ce(&logits, &labels);
            if !loss.is_finite() {
                return Err(Error::Numerical(format!(
                    "adversarial training diverged at epoch {epoch}"
                )));
            }
            let dlogits = crate::nn::ops::softmax_ce_backward(&probs, &labels);
            for p in model.params_mut() {
                p.zero_grad();
            }
            model.backward_params(&acts, &dlogits);
            adam_step(&mut model.params_mut(), &adam);
        }
    }
    Ok(model)
}

/// Run the full {pipelines} × {classifiers} grid over one shared cell set.
pub fn combination_study(
    denoisers: &[(String, PipelineDenoiser)],
    classifiers: &[(String, Arc<SmallResNet>)],
    sweep: &SweepSpec,
    cells: &TestCells,
    seed: u64,
) -> Result<Vec<SweepResult>> {
    let mut out = Vec::new();
    for (cname, clf) in classifiers {
        for (dname, den) in denoisers {
            let name = match (dname.as_str(), cname.as_str()) {
                ("none", c) => c.to_string(),
                (d, c) => format!("{d}+{c}"),
            };
            let pipe = PipelineSpec {
                name,
                denoiser: den.clone(),
                classifier: clf.clone(),
            };
            out.push(evaluate_pipeline_opts(&pipe, sweep, cells, seed, false)?);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::{BackboneConfig, HeadConfig};
    use ndarray::Array3;
    use rand::Rng;

    fn fixture() -> (Arc<SmallResNet>, Vec<LabeledImage>) {
        let mut rng = seed_rng(41, "eval-fixture");
        let data: Vec<LabeledImage> = (0..24)
            .map(|i| {
                let label = i % 2;
                let base = if label == 0 { 0.35 } else { 0.65 };
                let image = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| {
                    (base + rng.gen_range(-0.15..0.15f32)).clamp(0.0, 1.0)
                }))
                .unwrap();
                LabeledImage { image, label }
            })
            .collect();
        let mut model = SmallResNet::new(2, 4, 6);
        crate::classifier::train_classifier(
            &mut model,
            &data,
            &ClassifierTrainConfig {
                epochs: 8,
                batch_size: 8,
                lr: 2e-3,
                seed: 2,
            },
        )
        .unwrap();
        (Arc::new(model), data)
    }

    fn small_sweep() -> SweepSpec {
        SweepSpec {
            epsilon_grid: vec![0.0, 0.05],
            iteration_grid: vec![4],
            iteration_sweep_epsilon: 0.05,
            images_per_cell: 24,
        }
    }

    #[test]
    fn identity_pipeline_matches_clean_accuracy() {
        let (clf, data) = fixture();
        let sweep = small_sweep();
        let cells = TestCells::generate(clf.as_ref(), &data, &sweep, 3).unwrap();
        let pipe = PipelineSpec {
            name: "none".into(),
            denoiser: PipelineDenoiser::None,
            classifier: clf.clone(),
        };
        let res = evaluate_pipeline(&pipe, &sweep, &cells, 3).unwrap();
        use crate::classifier::ThreatModel;
        let images: Vec<&ImageTensor> = data.iter().map(|d| &d.image).collect();
        let labels: Vec<usize> = data.iter().map(|d| d.label).collect();
        let clean_acc = clf.accuracy(&ImageTensor::batch(&images), &labels);
        assert_eq!(res.accuracy_at(0.0, 4).unwrap(), clean_acc);
        // accuracy drops under attack on this toy model
        assert!(res.accuracy_at(0.05, 4).unwrap() < clean_acc);
    }

    #[test]
    fn cells_are_shared_and_deterministic() {
        let (clf, data) = fixture();
        let sweep = small_sweep();
        let a = TestCells::generate(clf.as_ref(), &data, &sweep, 3).unwrap();
        let b = TestCells::generate(clf.as_ref(), &data, &sweep, 3).unwrap();
        let ka = a.get(0.05, 4).unwrap();
        let kb = b.get(0.05, 4).unwrap();
        for (x, y) in ka.iter().zip(kb) {
            assert_eq!(x.adversarial, y.adversarial);
        }
    }

    #[test]
    fn denoiser_pipeline_runs_and_reports_quality() {
        let (clf, data) = fixture();
        let sweep = small_sweep();
        let cells = TestCells::generate(clf.as_ref(), &data, &sweep, 3).unwrap();
        let cfg = BackboneConfig {
            base_channels: 4,
            bottleneck_channels: 8,
        };
        let den = UNetDenoiser::new(HeadConfig::filtering(3).unwrap(), cfg, 11);
        let pipe = PipelineSpec {
            name: "filt".into(),
            denoiser: PipelineDenoiser::Unet(Arc::new(den)),
            classifier: clf.clone(),
        };
        let res = evaluate_pipeline(&pipe, &sweep, &cells, 3).unwrap();
        assert_eq!(res.accuracy.len(), 2);
        assert_eq!(res.quality.len(), 2);
        for q in &res.quality {
            assert!(q.psnr_denoised > 0.0 && q.psnr_denoised <= 100.0);
            assert!(q.ssim_denoised <= 1.0);
        }
        assert!(res.denoiser_fingerprint.is_some());
    }

    #[test]
    fn adversarial_training_beats_clean_model_under_attack() {
        let (clf, data) = fixture();
        let attack = AttackSpec::new(4, 0.08).unwrap();
        let adv_clf = build_adversarially_trained_classifier(
            &data,
            &attack,
            &ClassifierTrainConfig {
                epochs: 8,
                batch_size: 8,
                lr: 2e-3,
                seed: 5,
            },
            2,
            4,
            77,
        )
        .unwrap();
        // transfer attacks from the clean model
        let pairs =
            crate::attack::build_attack_dataset(clf.as_ref(), &data, &[0.08], 4, 9).unwrap();
        let adv_images: Vec<&ImageTensor> = pairs.iter().map(|p| &p.adversarial).collect();
        let labels: Vec<usize> = pairs.iter().map(|p| p.clean.label).collect();
        let batch = ImageTensor::batch(&adv_images);
        use crate::classifier::ThreatModel;
        let robust_clean_model = clf.accuracy(&batch, &labels);
        let robust_adv_model = adv_clf.accuracy(&batch, &labels);
        assert!(
            robust_adv_model > robust_clean_model,
            "adv {robust_adv_model} vs clean {robust_clean_model}"
        );
    }

    #[test]
    fn combination_grid_produces_all_rows() {
        let (clf, data) = fixture();
        let sweep = small_sweep();
        let cells = TestCells::generate(clf.as_ref(), &data, &sweep, 3).unwrap();
        let denoisers = vec![("none".to_string(), PipelineDenoiser::None)];
        let classifiers = vec![
            ("clean".to_string(), clf.clone()),
            ("adv".to_string(), clf.clone()),
        ];
        let grid = combination_study(&denoisers, &classifiers, &sweep, &cells, 3).unwrap();
        assert_eq!(grid.len(), 2);
        assert_eq!(grid[0].pipeline, "clean");
        assert_eq!(grid[1].pipeline, "adv");
    }
}
