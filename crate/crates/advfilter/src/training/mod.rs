//! Loss functions and the training protocols: single-denoiser training
//! (additive/filtering under the image or semantic loss), multi-head
//! domain-routed training, and the two-stage perturbation-aware protocol
//! (multi-domain Y-Net training, then frozen-backbone fusion training).
//!
//! Batches are stratified by attack strength: every step draws one strength
//! for the whole batch, which makes domain routing a per-batch decision and
//! keeps gradient isolation between gated parameter groups exact.

use crate::attack::{eps_label, AdversarialPair, ThreatModel};
use crate::backbone::{HeadKind, MultiHeadDenoiser, UNetDenoiser, YNetDenoiser, MULTIHEAD_COUNT};
use crate::error::{Error, Result};
use crate::filtering::{filter_backward_logits_batch, filter_forward_batch, FusionNet};
use crate::imaging::ImageTensor;
use crate::nn::ops::{clamp01_backward, clamp01_forward, l1_loss_grad};
use crate::nn::{adam_step, seed_rng, AdamConfig, Param, Tensor};
use rand::seq::SliceRandom;
use rand::Rng;
use std::collections::BTreeMap;
use std::time::Instant;

/// Which objective trains the denoiser.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    ImageL1,
    SemanticL1,
    FusionCe,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Probe layer for the semantic loss.
    pub probe_layer: Option<String>,
}

impl LossSpec {
    pub fn image() -> Self {
        LossSpec {
            kind: LossKind::ImageL1,
            probe_layer: None,
        }
    }

    pub fn semantic(layer: &str) -> Self {
        LossSpec {
            kind: LossKind::SemanticL1,
            probe_layer: Some(layer.to_string()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheduler {
    None,
    Cosine,
}

/// A parameter group and the attack strengths whose batches update it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EpsilonDomain {
    pub group: String,
    pub epsilons: Vec<f64>,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainConfig {
    pub lr: f32,
    pub batch_size: usize,
    pub epochs: usize,
    /// Optional cap on optimizer steps per epoch (compute budget knob);
    /// defaults to one pass over the pair set.
    pub steps_per_epoch: Option<usize>,
    pub seed: u64,
    pub scheduler: Scheduler,
    /// Mix clean (ε=0) pairs into training with probability 1/(strengths+1).
    pub include_clean: bool,
    pub grad_clip: f32,
    /// Resume offset in optimizer steps (set by the driver when resuming).
    #[serde(default)]
    pub start_step: usize,
    /// Stop after this many steps in this call (epoch-sliced resumable
    /// training); None runs to the end.
    #[serde(default)]
    pub run_steps: Option<usize>,
    /// Domain routing table; protocols fill in their defaults when empty.
    #[serde(default)]
    pub epsilon_domains: Vec<EpsilonDomain>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 30,
            steps_per_epoch: None,
            seed: 0,
            scheduler: Scheduler::None,
            include_clean: true,
            grad_clip: 5.0,
            start_step: 0,
            run_steps: None,
            epsilon_domains: Vec::new(),
        }
    }
}

/// One metrics-log row: step, parameter group, loss, learning rate.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MetricsRow {
    pub step: usize,
    pub group: String,
    pub loss: f32,
    pub lr: f32,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct TrainReport {
    /// Mean loss per epoch per parameter group.
    pub per_epoch_losses: Vec<BTreeMap<String, f32>>,
    pub final_fingerprint: String,
    pub wall_seconds: f64,
    pub metrics: Vec<MetricsRow>,
    /// How many optimizer steps each parameter group received.
    pub update_counts: BTreeMap<String, u64>,
    pub total_steps: usize,
}

impl TrainReport {
    pub fn metrics_csv(&self) -> String {
        let mut out = String::from("step,group,loss,lr\n");
        for r in &self.metrics {
            out.push_str(&format!("{},{},{},{}\n", r.step, r.group, r.loss, r.lr));
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Pair sets and batch sampling
// ---------------------------------------------------------------------------

/// In-memory training pairs bucketed by attack strength.
pub struct PairSet {
    pub by_eps: Vec<(f64, Vec<AdversarialPair>)>,
}

impl PairSet {
    pub fn from_pairs(pairs: Vec<AdversarialPair>) -> Self {
        let mut map: BTreeMap<String, (f64, Vec<AdversarialPair>)> = BTreeMap::new();
        for p in pairs {
            let eps = p.spec.epsilon;
            map.entry(eps_label(eps))
                .or_insert_with(|| (eps, Vec::new()))
                .1
                .push(p);
        }
        let mut by_eps: Vec<(f64, Vec<AdversarialPair>)> = map.into_values().collect();
        by_eps.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite eps"));
        PairSet { by_eps }
    }

    pub fn from_dir(dir: &crate::attack::shard::AttackDatasetDir) -> Result<Self> {
        let mut all = Vec::new();
        for label in dir.eps_labels() {
            all.extend(dir.load_eps(&label)?);
        }
        Ok(PairSet::from_pairs(all))
    }

    pub fn epsilons(&self) -> Vec<f64> {
        self.by_eps.iter().map(|(e, _)| *e).collect()
    }

    pub fn total_pairs(&self) -> usize {
        self.by_eps.iter().map(|(_, v)| v.len()).sum()
    }

    /// Keep only the given strengths (superior-strength training).
    pub fn filter_eps(&self, keep: &[f64]) -> PairSet {
        let by_eps = self
            .by_eps
            .iter()
            .filter(|(e, _)| keep.iter().any(|k| (k - e).abs() < f64::EPSILON))
            .map(|(e, v)| (*e, v.clone()))
            .collect();
        PairSet { by_eps }
    }

    fn bucket(&self, eps: f64) -> Option<&Vec<AdversarialPair>> {
        self.by_eps
            .iter()
            .find(|(e, _)| (*e - eps).abs() < f64::EPSILON)
            .map(|(_, v)| v)
    }

    /// Draw a batch for one strength. `eps == 0` serves clean pairs built
    /// from the clean sides of the first bucket.
    fn sample_batch(
        &self,
        eps: f64,
        batch: usize,
        rng: &mut rand_chacha::ChaCha8Rng,
    ) -> (Tensor, Tensor, Vec<usize>) {
        if eps == 0.0 {
            let pool = &self.by_eps[0].1;
            let idx: Vec<usize> = (0..pool.len()).collect();
            let chosen: Vec<usize> =
                idx.choose_multiple(rng, batch.min(pool.len())).copied().collect();
            let clean: Vec<&ImageTensor> = chosen.iter().map(|&i| &pool[i].clean.image).collect();
            let labels: Vec<usize> = chosen.iter().map(|&i| pool[i].clean.label).collect();
            let t = ImageTensor::batch(&clean);
            return (t.clone(), t, labels);
        }
        let pool = self.bucket(eps).expect("strength present in pair set");
        let idx: Vec<usize> = (0..pool.len()).collect();
        let chosen: Vec<usize> =
            idx.choose_multiple(rng, batch.min(pool.len())).copied().collect();
        let adv: Vec<&ImageTensor> = chosen.iter().map(|&i| &pool[i].adversarial).collect();
        let clean: Vec<&ImageTensor> = chosen.iter().map(|&i| &pool[i].clean.image).collect();
        let labels: Vec<usize> = chosen.iter().map(|&i| pool[i].clean.label).collect();
        (
            ImageTensor::batch(&adv),
            ImageTensor::batch(&clean),
            labels,
        )
    }
}

/// The strength drawn for a step: one of the attack strengths, or clean.
fn draw_eps(strengths: &[f64], include_clean: bool, rng: &mut rand_chacha::ChaCha8Rng) -> f64 {
    if include_clean {
        let k = rng.gen_range(0..=strengths.len());
        if k == strengths.len() {
            0.0
        } else {
            strengths[k]
        }
    } else {
        strengths[rng.gen_range(0..strengths.len())]
    }
}

fn lr_at(cfg: &TrainConfig, step: usize, total: usize) -> f32 {
    match cfg.scheduler {
        Scheduler::None => cfg.lr,
        Scheduler::Cosine => {
            let t = step as f32 / total.max(1) as f32;
            cfg.lr * 0.5 * (1.0 + (std::f32::consts::PI * t).cos())
        }
    }
}

// ---------------------------------------------------------------------------
// Loss operators
// ---------------------------------------------------------------------------

/// Image-level loss: mean absolute difference over all elements.
pub fn loss_image(clean: &ImageTensor, denoised: &ImageTensor) -> Result<f64> {
    if !clean.same_shape(denoised) {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", clean.data.dim()),
            got: format!("{:?}", denoised.data.dim()),
        });
    }
    let sum: f64 = clean
        .data
        .iter()
        .zip(denoised.data.iter())
        .map(|(a, b)| ((*a as f64) - (*b as f64)).abs())
        .sum();
    Ok(sum / clean.data.len() as f64)
}

/// Semantic-level loss: mean absolute difference between the classifier's
/// probe features on the two images.
pub fn loss_semantic(
    model: &dyn ThreatModel,
    clean: &ImageTensor,
    denoised: &ImageTensor,
    layer: &str,
) -> Result<f64> {
    let fa = model.probe(&ImageTensor::batch(&[clean]), layer)?;
    let fb = model.probe(&ImageTensor::batch(&[denoised]), layer)?;
    let sum: f64 = fa
        .data
        .iter()
        .zip(&fb.data)
        .map(|(a, b)| ((*a as f64) - (*b as f64)).abs())
        .sum();
    Ok(sum / fa.len() as f64)
}

// ---------------------------------------------------------------------------
// Shared training-loop scaffolding
// ---------------------------------------------------------------------------

struct LoopState {
    cfg: TrainConfig,
    total_steps: usize,
    steps_per_epoch: usize,
    metrics: Vec<MetricsRow>,
    update_counts: BTreeMap<String, u64>,
    epoch_losses: Vec<BTreeMap<String, (f64, u64)>>,
    started: Instant,
}

impl LoopState {
    fn new(cfg: &TrainConfig, pair_count: usize) -> Self {
        let steps_per_epoch = cfg
            .steps_per_epoch
            .unwrap_or_else(|| pair_count.div_ceil(cfg.batch_size).max(1));
        LoopState {
            cfg: cfg.clone(),
            total_steps: steps_per_epoch * cfg.epochs,
            steps_per_epoch,
            metrics: Vec::new(),
            update_counts: BTreeMap::new(),
            epoch_losses: vec![BTreeMap::new(); cfg.epochs],
            started: Instant::now(),
        }
    }

    fn end_step(&self) -> usize {
        match self.cfg.run_steps {
            Some(r) => (self.cfg.start_step + r).min(self.total_steps),
            None => self.total_steps,
        }
    }

    fn record(&mut self, step: usize, group: &str, loss: f32, lr: f32) {
        self.metrics.push(MetricsRow {
            step,
            group: group.to_string(),
            loss,
            lr,
        });
        *self.update_counts.entry(group.to_string()).or_insert(0) += 1;
        let epoch = (step / self.steps_per_epoch).min(self.cfg.epochs.saturating_sub(1));
        let e = self.epoch_losses[epoch]
            .entry(group.to_string())
            .or_insert((0.0, 0));
        e.0 += loss as f64;
        e.1 += 1;
    }

    fn finish(self, fingerprint: String) -> TrainReport {
        TrainReport {
            per_epoch_losses: self
                .epoch_losses
                .into_iter()
                .map(|m| {
                    m.into_iter()
                        .map(|(g, (sum, n))| (g, (sum / n.max(1) as f64) as f32))
                        .collect()
                })
                .collect(),
            final_fingerprint: fingerprint,
            wall_seconds: self.started.elapsed().as_secs_f64(),
            metrics: self.metrics,
            update_counts: self.update_counts,
            total_steps: self.total_steps,
        }
    }
}

fn adam_cfg(cfg: &TrainConfig, lr: f32) -> AdamConfig {
    AdamConfig {
        lr,
        clip_norm: Some(cfg.grad_clip),
        ..Default::default()
    }
}

fn check_finite(loss: f32, what: &str) -> Result<()> {
    if !loss.is_finite() {
        return Err(Error::Numerical(format!(
            "{what} loss diverged (NaN/inf); aborting with last-good checkpoint"
        )));
    }
    Ok(())
}

fn snapshot(params: &[&Param]) -> Vec<Vec<f32>> {
    params.iter().map(|p| p.data.clone()).collect()
}

fn restore(params: &mut [&mut Param], snap: &[Vec<f32>]) {
    for (p, s) in params.iter_mut().zip(snap) {
        p.data.copy_from_slice(s);
    }
}

/// Loss + gradient of a denoiser forward for one batch, shared by the
/// single-branch trainers.
fn denoiser_loss_grad(
    model: &UNetDenoiser,
    adv: &Tensor,
    clean: &Tensor,
    loss: &LossSpec,
    threat: Option<&dyn ThreatModel>,
) -> Result<(f32, crate::backbone::UActs, Tensor)> {
    let (head_out, acts) = model.forward_full(adv);
    match model.head_cfg.kind {
        HeadKind::Additive => {
            let mut pre = adv.clone();
            for (v, r) in pre.data.iter_mut().zip(&head_out.data) {
                *v += *r;
            }
            let (out, mask) = clamp01_forward(&pre);
            let (l, d_out) = objective_grad(&out, clean, loss, threat)?;
            let d_r = clamp01_backward(&d_out, &mask);
            Ok((l, acts, d_r))
        }
        HeadKind::Filtering => {
            let k = model.head_cfg.filter_size;
            let (out, probs) = filter_forward_batch(adv, &head_out, k);
            let (l, d_out) = objective_grad(&out, clean, loss, threat)?;
            let d_logits = filter_backward_logits_batch(adv, &probs, &out, &d_out, k);
            Ok((l, acts, d_logits))
        }
    }
}

/// Objective on the denoised output: image-level L1 or semantic L1 through
/// the threat model's probe layer.
fn objective_grad(
    out: &Tensor,
    clean: &Tensor,
    loss: &LossSpec,
    threat: Option<&dyn ThreatModel>,
) -> Result<(f32, Tensor)> {
    match loss.kind {
        LossKind::ImageL1 => Ok(l1_loss_grad(out, clean)),
        LossKind::SemanticL1 => {
            let threat = threat.ok_or_else(|| {
                Error::Config("semantic loss requires a threat model probe".into())
            })?;
            let layer = loss
                .probe_layer
                .as_deref()
                .unwrap_or(crate::classifier::DEFAULT_PROBE_LAYER);
            let target = threat.probe(clean, layer)?;
            threat.probe_l1_input_grad(out, &target, layer)
        }
        LossKind::FusionCe => Err(Error::Config(
            "fusion cross-entropy only applies to stage-2 fusion training".into(),
        )),
    }
}

// ---------------------------------------------------------------------------
// Protocols
// ---------------------------------------------------------------------------

/// Train a single-branch denoiser (additive or filtering head) on attacked
/// pairs under the image-level or semantic-level loss.
pub fn train_denoiser(
    model: &mut UNetDenoiser,
    pairs: &PairSet,
    loss: &LossSpec,
    threat: Option<&dyn ThreatModel>,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pairs.by_eps.is_empty() {
        return Err(Error::Dataset("empty pair set".into()));
    }
    let strengths = pairs.epsilons();
    let mut state = LoopState::new(cfg, pairs.total_pairs());
    let mut snap = snapshot(&model.params());
    let end_step = state.end_step();
    for step in cfg.start_step..end_step {
        let mut rng = seed_rng(cfg.seed, &format!("denoiser-step-{step}"));
        let eps = draw_eps(&strengths, cfg.include_clean, &mut rng);
        let (adv, clean, _) = pairs.sample_batch(eps, cfg.batch_size, &mut rng);
        let (l, acts, d_head) = denoiser_loss_grad(model, &adv, &clean, loss, threat)?;
        if let Err(e) = check_finite(l, "denoiser") {
            restore(&mut model.params_mut(), &snap);
            return Err(e);
        }
        for p in model.params_mut() {
            p.zero_grad();
        }
        model.backward(&acts, &d_head);
        let lr = lr_at(cfg, step, state.total_steps);
        adam_step(&mut model.params_mut(), &adam_cfg(cfg, lr));
        state.record(step, "all", l, lr);
        if (step + 1) % state.steps_per_epoch == 0 {
            snap = snapshot(&model.params());
        }
    }
    let fp = crate::nn::fingerprint_params(model.params().into_iter());
    Ok(state.finish(fp))
}

/// Head domains for the four-head model: head i handles
/// ε ∈ {1e^(i−5), 3e^(i−5), 5e^(i−5)}.
pub fn multihead_domain(head_index: usize) -> [f64; 3] {
    let m = 5 - head_index as i32;
    let base = 10f64.powi(-m);
    [base, 3.0 * base, 5.0 * base]
}

fn default_multihead_domains() -> Vec<EpsilonDomain> {
    (1..=MULTIHEAD_COUNT)
        .map(|i| EpsilonDomain {
            group: format!("head_{i}"),
            epsilons: multihead_domain(i).to_vec(),
        })
        .collect()
}

fn domain_contains(d: &EpsilonDomain, eps: f64) -> bool {
    d.epsilons.iter().any(|e| (e - eps).abs() < f64::EPSILON)
}

/// Multi-head training: the shared body is updated by every batch, each
/// head only by batches whose strength lies in its domain. Image-level loss.
pub fn train_multihead(
    model: &mut MultiHeadDenoiser,
    pairs: &PairSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    let domains = if cfg.epsilon_domains.is_empty() {
        default_multihead_domains()
    } else {
        cfg.epsilon_domains.clone()
    };
    // every dataset strength must belong to at least one head domain
    for eps in pairs.epsilons() {
        if !domains.iter().any(|d| domain_contains(d, eps)) {
            return Err(Error::Config(format!(
                "strength {} outside all head domains",
                eps_label(eps)
            )));
        }
    }
    let strengths = pairs.epsilons();
    let mut state = LoopState::new(cfg, pairs.total_pairs());
    let mut snap = snapshot(&model.params());
    let end_step = state.end_step();
    for step in cfg.start_step..end_step {
        let mut rng = seed_rng(cfg.seed, &format!("multihead-step-{step}"));
        // clean pairs are excluded: they belong to no head domain
        let eps = draw_eps(&strengths, false, &mut rng);
        let head = domains
            .iter()
            .position(|d| domain_contains(d, eps))
            .expect("validated above")
            + 1;
        let (adv, clean, _) = pairs.sample_batch(eps, cfg.batch_size, &mut rng);
        let k = model.head_cfg.filter_size;
        let (logits, acts) = model.forward_full(&adv, head)?;
        let (out, probs) = filter_forward_batch(&adv, &logits, k);
        let (l, d_out) = l1_loss_grad(&out, &clean);
        if let Err(e) = check_finite(l, "multihead") {
            restore(&mut model.params_mut(), &snap);
            return Err(e);
        }
        let d_logits = filter_backward_logits_batch(&adv, &probs, &out, &d_out, k);
        for p in model.params_mut() {
            p.zero_grad();
        }
        model.backward(&acts, head, &d_logits);
        let lr = lr_at(cfg, step, state.total_steps);
        // routed update: shared body plus the selected head
        let head_prefix = format!("head{head}.");
        let mut routed: Vec<&mut Param> = model
            .params_mut()
            .into_iter()
            .filter(|p| !p.name.starts_with("head") || p.name.starts_with(&head_prefix))
            .collect();
        adam_step(&mut routed, &adam_cfg(cfg, lr));
        state.record(step, "body", l, lr);
        state.record(step, &format!("head_{head}"), l, lr);
        if (step + 1) % state.steps_per_epoch == 0 {
            snap = snapshot(&model.params());
        }
    }
    let fp = crate::nn::fingerprint_params(model.params().into_iter());
    Ok(state.finish(fp))
}

/// The median-strength domain of the Y-Net's m branch.
pub fn m_branch_domain() -> [f64; 3] {
    [1e-1, 3e-1, 5e-1]
}

/// Stage 1 of the perturbation-aware protocol: image-level training of the
/// Y-Net. The encoder and the sl branch see every batch (all strengths,
/// plus clean when configured); the m branch only batches whose strength
/// lies in the superior domain.
pub fn train_advfilter_stage1(
    model: &mut YNetDenoiser,
    pairs: &PairSet,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if pairs.by_eps.is_empty() {
        return Err(Error::Dataset("empty pair set".into()));
    }
    let m_domain = if let Some(d) = cfg.epsilon_domains.iter().find(|d| d.group == "decoder_m") {
        d.epsilons.clone()
    } else {
        m_branch_domain().to_vec()
    };
    // both domains must be present in the dataset
    if !pairs
        .epsilons()
        .iter()
        .any(|e| m_domain.iter().any(|m| (m - e).abs() < f64::EPSILON))
    {
        return Err(Error::Config(
            "no superior-strength pairs available for the m branch".into(),
        ));
    }
    let strengths = pairs.epsilons();
    let k = model.head_cfg.filter_size;
    let mut state = LoopState::new(cfg, pairs.total_pairs());
    let mut snap = snapshot(&model.params());
    let end_step = state.end_step();
    for step in cfg.start_step..end_step {
        let mut rng = seed_rng(cfg.seed, &format!("ynet-step-{step}"));
        let eps = draw_eps(&strengths, cfg.include_clean, &mut rng);
        let want_m = m_domain.iter().any(|m| (m - eps).abs() < f64::EPSILON);
        let (adv, clean, _) = pairs.sample_batch(eps, cfg.batch_size, &mut rng);
        let (logits_sl, logits_m, acts) = model.forward_full(&adv, want_m);

        let (out_sl, probs_sl) = filter_forward_batch(&adv, &logits_sl, k);
        let (l_sl, d_out_sl) = l1_loss_grad(&out_sl, &clean);
        if let Err(e) = check_finite(l_sl, "y-net sl") {
            restore(&mut model.params_mut(), &snap);
            return Err(e);
        }
        let d_sl = filter_backward_logits_batch(&adv, &probs_sl, &out_sl, &d_out_sl, k);

        let mut l_m_val = None;
        let d_m = if want_m {
            let logits_m = logits_m.expect("m branch requested");
            let (out_m, probs_m) = filter_forward_batch(&adv, &logits_m, k);
            let (l_m, d_out_m) = l1_loss_grad(&out_m, &clean);
            if let Err(e) = check_finite(l_m, "y-net m") {
                restore(&mut model.params_mut(), &snap);
                return Err(e);
            }
            l_m_val = Some(l_m);
            Some(filter_backward_logits_batch(
                &adv, &probs_m, &out_m, &d_out_m, k,
            ))
        } else {
            None
        };

        for p in model.params_mut() {
            p.zero_grad();
        }
        model.backward(&acts, Some(&d_sl), d_m.as_ref());
        let lr = lr_at(cfg, step, state.total_steps);
        // every group with gradients this step: encoder + sl (+ m)
        let mut routed: Vec<&mut Param> = model
            .params_mut()
            .into_iter()
            .filter(|p| {
                p.name.starts_with("enc.")
                    || p.name.starts_with("dec_sl.")
                    || p.name.starts_with("head_sl.")
                    || (want_m && (p.name.starts_with("dec_m.") || p.name.starts_with("head_m.")))
            })
            .collect();
        adam_step(&mut routed, &adam_cfg(cfg, lr));
        state.record(step, "encoder", l_sl, lr);
        state.record(step, "decoder_sl", l_sl, lr);
        if let Some(l_m) = l_m_val {
            state.record(step, "decoder_m", l_m, lr);
        }
        if (step + 1) % state.steps_per_epoch == 0 {
            snap = snapshot(&model.params());
        }
    }
    let fp = crate::nn::fingerprint_params(model.params().into_iter());
    Ok(state.finish(fp))
}

/// How stage 2 turns the clean image into a teacher signal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TeacherMode {
    /// Cross-entropy against argmax of the classifier on the clean image.
    HardLabel,
    /// Cross-entropy against the classifier's full distribution on the
    /// clean image.
    SoftDistribution,
}

/// Stage 2: freeze the Y-Net bit-exactly and train only the fusion network
/// C(·) with a classification cross-entropy on the fused output.
pub fn train_advfilter_stage2(
    ynet: &YNetDenoiser,
    fusion: &mut FusionNet,
    pairs: &PairSet,
    threat: &dyn ThreatModel,
    cfg: &TrainConfig,
    teacher: TeacherMode,
) -> Result<TrainReport> {
    let y_fingerprint_before = crate::nn::fingerprint_params(ynet.params().into_iter());
    let strengths = pairs.epsilons();
    let k = ynet.head_cfg.filter_size;
    let mut state = LoopState::new(cfg, pairs.total_pairs());
    let mut snap = snapshot(&fusion.params());
    let end_step = state.end_step();
    for step in cfg.start_step..end_step {
        let mut rng = seed_rng(cfg.seed, &format!("fusion-step-{step}"));
        let eps = draw_eps(&strengths, cfg.include_clean, &mut rng);
        let (adv, clean, _) = pairs.sample_batch(eps, cfg.batch_size, &mut rng);

        // frozen Y-Net forward; branch outputs and maps are constants here
        let (logits_sl, logits_m) = ynet.forward(&adv);
        let i_sl = filter_forward_batch(&adv, &logits_sl, k).0;
        let i_m = filter_forward_batch(&adv, &logits_m, k).0;
        let maps = stack_uncertainty_maps(&logits_sl, &logits_m);
        let (wmap, facts) = fusion.forward_batch(&maps);
        let fused = fuse_batch(&i_sl, &i_m, &wmap);

        let (l, d_fused) = match teacher {
            TeacherMode::HardLabel => {
                let teacher_labels = threat.predict(&clean);
                threat.ce_input_grad(&fused, &teacher_labels)
            }
            TeacherMode::SoftDistribution => {
                let logits = threat.logits(&clean);
                let probs = softmax_rows(&logits);
                threat.soft_ce_input_grad(&fused, &probs)
            }
        };
        if let Err(e) = check_finite(l, "fusion") {
            restore(&mut fusion.params_mut(), &snap);
            return Err(e);
        }

        // dL/dw = sum over channels of d_fused * (i_sl - i_m)
        let mut d_w = Tensor::zeros(wmap.b, 1, wmap.h, wmap.w);
        let hw = wmap.h * wmap.w;
        for b in 0..wmap.b {
            let df = d_fused.image(b);
            let a = i_sl.image(b);
            let mm = i_m.image(b);
            let dw = d_w.image_mut(b);
            for c in 0..3 {
                for p in 0..hw {
                    dw[p] += df[c * hw + p] * (a[c * hw + p] - mm[c * hw + p]);
                }
            }
        }
        for p in fusion.params_mut() {
            p.zero_grad();
        }
        fusion.backward_batch(&facts, &wmap, &d_w);
        let lr = lr_at(cfg, step, state.total_steps);
        adam_step(&mut fusion.params_mut(), &adam_cfg(cfg, lr));
        state.record(step, "fusion", l, lr);
        if (step + 1) % state.steps_per_epoch == 0 {
            snap = snapshot(&fusion.params());
        }
    }
    let y_fingerprint_after = crate::nn::fingerprint_params(ynet.params().into_iter());
    if y_fingerprint_before != y_fingerprint_after {
        return Err(Error::Numerical(
            "Y-Net parameters drifted during fusion training".into(),
        ));
    }
    let fp = crate::nn::fingerprint_params(fusion.params().into_iter());
    Ok(state.finish(fp))
}

/// Per-pixel max over each branch's kernel logits, stacked as 2 channels.
pub fn stack_uncertainty_maps(logits_sl: &Tensor, logits_m: &Tensor) -> Tensor {
    debug_assert!(logits_sl.same_shape(logits_m));
    let (b, c, h, w) = (logits_sl.b, logits_sl.c, logits_sl.h, logits_sl.w);
    let hw = h * w;
    let mut maps = Tensor::zeros(b, 2, h, w);
    for bi in 0..b {
        let sl = logits_sl.image(bi);
        let m = logits_m.image(bi);
        let dst = maps.image_mut(bi);
        for p in 0..hw {
            let mut mx = f32::NEG_INFINITY;
            let mut my = f32::NEG_INFINITY;
            for ch in 0..c {
                mx = mx.max(sl[ch * hw + p]);
                my = my.max(m[ch * hw + p]);
            }
            dst[p] = mx;
            dst[hw + p] = my;
        }
    }
    maps
}

/// Batched fusion: `w ⊙ i_sl + (1−w) ⊙ i_m` with the 1-channel weight map
/// broadcast over RGB.
pub fn fuse_batch(i_sl: &Tensor, i_m: &Tensor, wmap: &Tensor) -> Tensor {
    debug_assert!(i_sl.same_shape(i_m));
    debug_assert_eq!(wmap.c, 1);
    let mut out = i_sl.clone();
    let hw = i_sl.h * i_sl.w;
    for b in 0..i_sl.b {
        let w = wmap.image(b);
        let m = i_m.image(b);
        let dst = out.image_mut(b);
        for c in 0..3 {
            for p in 0..hw {
                let wv = w[p];
                dst[c * hw + p] = wv * dst[c * hw + p] + (1.0 - wv) * m[c * hw + p];
            }
        }
    }
    out
}

/// Merge epoch-sliced partial reports into one. Metrics concatenate,
/// update counts sum, per-epoch losses take whichever slice covered the
/// epoch, wall time adds up.
pub fn merge_reports(reports: Vec<TrainReport>) -> Option<TrainReport> {
    let mut iter = reports.into_iter();
    let mut acc = iter.next()?;
    for r in iter {
        acc.metrics.extend(r.metrics);
        for (g, n) in r.update_counts {
            *acc.update_counts.entry(g).or_insert(0) += n;
        }
        for (dst, src) in acc.per_epoch_losses.iter_mut().zip(r.per_epoch_losses) {
            if dst.is_empty() {
                *dst = src;
            }
        }
        acc.wall_seconds += r.wall_seconds;
        acc.final_fingerprint = r.final_fingerprint;
        acc.total_steps = r.total_steps;
    }
    Some(acc)
}

fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut probs = logits.clone();
    for b in 0..probs.b {
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
    }
    probs
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::attack::build_attack_dataset;
    use crate::backbone::{BackboneConfig, HeadConfig};
    use crate::classifier::{ClassifierTrainConfig, SmallResNet};
    use crate::imaging::LabeledImage;
    use ndarray::Array3;

    fn small_cfg() -> BackboneConfig {
        BackboneConfig {
            base_channels: 4,
            bottleneck_channels: 8,
        }
    }

    fn fixture() -> (SmallResNet, PairSet) {
        let mut rng = seed_rng(31, "train-fixture");
        let data: Vec<LabeledImage> = (0..24)
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
        let mut model = SmallResNet::new(2, 4, 6);
        crate::classifier::train_classifier(
            &mut model,
            &data,
            &ClassifierTrainConfig {
                epochs: 6,
                batch_size: 8,
                lr: 2e-3,
                seed: 2,
            },
        )
        .unwrap();
        let pairs = build_attack_dataset(&model, &data, &[1e-3, 3e-1], 4, 7).unwrap();
        (model, PairSet::from_pairs(pairs))
    }

    fn tiny_train_cfg(steps: usize) -> TrainConfig {
        TrainConfig {
            lr: 1e-3,
            batch_size: 6,
            epochs: 1,
            steps_per_epoch: Some(steps),
            seed: 3,
            include_clean: false,
            ..Default::default()
        }
    }

    #[test]
    fn loss_image_examples_and_oracle() {
        let x = ImageTensor::constant(8, 8, 0.4);
        assert_eq!(loss_image(&x, &x).unwrap(), 0.0);
        let zero = ImageTensor::constant(8, 8, 0.0);
        let one = ImageTensor::constant(8, 8, 1.0);
        assert!((loss_image(&zero, &one).unwrap() - 1.0).abs() < 1e-12);

        let mut rng = seed_rng(4, "l1");
        use rand::Rng;
        let a = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0)))
            .unwrap();
        let b = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0)))
            .unwrap();
        let got = loss_image(&a, &b).unwrap();
        let mut want = 0.0f64;
        for (x, y) in a.data.iter().zip(b.data.iter()) {
            want += ((*x as f64) - (*y as f64)).abs();
        }
        want /= a.data.len() as f64;
        assert!((got - want).abs() < 1e-9);
    }

    #[test]
    fn loss_semantic_zero_on_identical_and_nonnegative() {
        let (model, pairs) = fixture();
        let img = &pairs.by_eps[0].1[0].clean.image;
        let adv = &pairs.by_eps[0].1[0].adversarial;
        assert_eq!(loss_semantic(&model, img, img, "stage3").unwrap(), 0.0);
        assert!(loss_semantic(&model, img, adv, "stage3").unwrap() >= 0.0);
        assert!(loss_semantic(&model, img, adv, "bogus").is_err());
    }

    #[test]
    fn train_denoiser_descends_on_its_objective() {
        // validation L1 on a fixed heavy-noise bucket improves over the
        // untrained model (per-step losses mix strengths, so compare on a
        // fixed validation batch instead)
        let (_, pairs) = fixture();
        let heavy = pairs.filter_eps(&[3e-1]);
        let val_l1 = |model: &UNetDenoiser| -> f32 {
            let bucket = &heavy.by_eps[0].1;
            let adv: Vec<&ImageTensor> = bucket.iter().map(|p| &p.adversarial).collect();
            let clean: Vec<&ImageTensor> = bucket.iter().map(|p| &p.clean.image).collect();
            let out = model.denoise_batch(&ImageTensor::batch(&adv));
            l1_loss_grad(&out, &ImageTensor::batch(&clean)).0
        };
        let mut model = UNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 17);
        let before = val_l1(&model);
        let report = train_denoiser(
            &mut model,
            &heavy,
            &LossSpec::image(),
            None,
            &tiny_train_cfg(30),
        )
        .unwrap();
        let after = val_l1(&model);
        assert!(after < before, "no improvement: {before} -> {after}");
        assert_eq!(report.update_counts["all"], 30);
    }

    #[test]
    fn train_denoiser_semantic_requires_threat() {
        let (model, pairs) = fixture();
        let mut den = UNetDenoiser::new(HeadConfig::additive(), small_cfg(), 18);
        assert!(train_denoiser(
            &mut den,
            &pairs,
            &LossSpec::semantic("stage3"),
            None,
            &tiny_train_cfg(2),
        )
        .is_err());
        // and works with one
        train_denoiser(
            &mut den,
            &pairs,
            &LossSpec::semantic("stage3"),
            Some(&model),
            &tiny_train_cfg(2),
        )
        .unwrap();
    }

    #[test]
    fn training_is_reproducible() {
        let (_, pairs) = fixture();
        let mk = || UNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 19);
        let mut a = mk();
        let mut b = mk();
        let ra =
            train_denoiser(&mut a, &pairs, &LossSpec::image(), None, &tiny_train_cfg(10)).unwrap();
        let rb =
            train_denoiser(&mut b, &pairs, &LossSpec::image(), None, &tiny_train_cfg(10)).unwrap();
        assert_eq!(ra.final_fingerprint, rb.final_fingerprint);
        for (x, y) in ra.metrics.iter().zip(&rb.metrics) {
            assert_eq!(x.loss, y.loss);
        }
    }

    #[test]
    fn multihead_gradient_isolation_and_counters() {
        let (_, pairs) = fixture();
        // dataset strengths 1e-3 (head_2) and 3e-1 (head_4)
        let mut model = MultiHeadDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 21);
        let before: Vec<(String, Vec<f32>)> = model
            .params()
            .iter()
            .filter(|p| p.name.starts_with("head"))
            .map(|p| (p.name.clone(), p.data.clone()))
            .collect();
        let cfg = tiny_train_cfg(12);
        let report = train_multihead(&mut model, &pairs, &cfg).unwrap();
        // body updated every step; heads 2 and 4 split the steps; 1 and 3 never
        assert_eq!(report.update_counts["body"], 12);
        let h2 = report.update_counts.get("head_2").copied().unwrap_or(0);
        let h4 = report.update_counts.get("head_4").copied().unwrap_or(0);
        assert_eq!(h2 + h4, 12);
        assert!(h2 > 0 && h4 > 0);
        assert!(!report.update_counts.contains_key("head_1"));
        assert!(!report.update_counts.contains_key("head_3"));
        // untouched heads are bit-identical
        for p in model.params() {
            if p.name.starts_with("head1.") || p.name.starts_with("head3.") {
                let (_, orig) = before.iter().find(|(n, _)| *n == p.name).unwrap();
                assert_eq!(&p.data, orig, "{} changed", p.name);
            }
        }
    }

    #[test]
    fn multihead_rejects_unrouted_strengths() {
        let (model, _) = fixture();
        let mut rng = seed_rng(5, "mh");
        use rand::Rng;
        let img = ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| rng.gen_range(0.0..1.0)))
            .unwrap();
        let li = LabeledImage {
            image: img,
            label: 0,
        };
        let pairs = build_attack_dataset(&model, &[li], &[0.0], 2, 1).unwrap();
        let mut mh = MultiHeadDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 22);
        assert!(train_multihead(&mut mh, &PairSet::from_pairs(pairs), &tiny_train_cfg(1)).is_err());
    }

    #[test]
    fn ynet_stage1_routing() {
        let (_, pairs) = fixture();
        let mut model = YNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 23);
        let report = train_advfilter_stage1(&mut model, &pairs, &tiny_train_cfg(16)).unwrap();
        assert_eq!(report.update_counts["encoder"], 16);
        assert_eq!(report.update_counts["decoder_sl"], 16);
        let m = report.update_counts.get("decoder_m").copied().unwrap_or(0);
        assert!(m > 0 && m < 16, "m branch updates: {m}");
    }

    #[test]
    fn ynet_stage1_gradient_isolation_small_eps() {
        // a batch at a small strength must leave the m branch bit-identical
        let (model, _) = fixture();
        let mut rng = seed_rng(6, "y1");
        use rand::Rng;
        let data: Vec<LabeledImage> = (0..6)
            .map(|i| LabeledImage {
                image: ImageTensor::new(Array3::from_shape_fn((16, 16, 3), |_| {
                    rng.gen_range(0.0..1.0)
                }))
                .unwrap(),
                label: i % 2,
            })
            .collect();
        let small = build_attack_dataset(&model, &data, &[1e-3, 3e-1], 2, 9).unwrap();
        let mut ynet = YNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 24);
        let m_before: Vec<Vec<f32>> = ynet
            .params()
            .iter()
            .filter(|p| p.name.starts_with("dec_m.") || p.name.starts_with("head_m."))
            .map(|p| p.data.clone())
            .collect();
        let pairs = PairSet::from_pairs(small);
        let mut cfg = tiny_train_cfg(1);
        // pick a seed whose first draw is the small strength
        let strengths = pairs.epsilons();
        for seed in 0..50u64 {
            let mut r = seed_rng(seed, "ynet-step-0");
            if draw_eps(&strengths, false, &mut r) == 1e-3 {
                cfg.seed = seed;
                break;
            }
        }
        train_advfilter_stage1(&mut ynet, &pairs, &cfg).unwrap();
        let m_after: Vec<Vec<f32>> = ynet
            .params()
            .iter()
            .filter(|p| p.name.starts_with("dec_m.") || p.name.starts_with("head_m."))
            .map(|p| p.data.clone())
            .collect();
        assert_eq!(m_before, m_after, "m branch changed on a small-eps batch");
    }

    #[test]
    fn stage2_freezes_ynet_and_trains_fusion() {
        let (threat, pairs) = fixture();
        let mut ynet = YNetDenoiser::new(HeadConfig::filtering(3).unwrap(), small_cfg(), 25);
        train_advfilter_stage1(&mut ynet, &pairs, &tiny_train_cfg(6)).unwrap();
        let y_fp = crate::nn::fingerprint_params(ynet.params().into_iter());
        let mut fusion = FusionNet::new(26);
        let f_fp_before = crate::nn::fingerprint_params(fusion.params().into_iter());
        let report = train_advfilter_stage2(
            &ynet,
            &mut fusion,
            &pairs,
            &threat,
            &tiny_train_cfg(6),
            TeacherMode::HardLabel,
        )
        .unwrap();
        assert_eq!(
            crate::nn::fingerprint_params(ynet.params().into_iter()),
            y_fp,
            "Y-Net must be bit-identical after stage 2"
        );
        assert_ne!(
            crate::nn::fingerprint_params(fusion.params().into_iter()),
            f_fp_before,
            "fusion net must train"
        );
        assert_eq!(report.update_counts["fusion"], 6);
        // soft-teacher variant also runs
        let mut fusion2 = FusionNet::new(27);
        train_advfilter_stage2(
            &ynet,
            &mut fusion2,
            &pairs,
            &threat,
            &tiny_train_cfg(2),
            TeacherMode::SoftDistribution,
        )
        .unwrap();
    }

    #[test]
    fn fuse_batch_matches_reference_fuse() {
        let mut rng = seed_rng(7, "fb");
        use rand::Rng;
        let a = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0)))
            .unwrap();
        let b = ImageTensor::new(Array3::from_shape_fn((8, 8, 3), |_| rng.gen_range(0.0..1.0)))
            .unwrap();
        let w = crate::filtering::WeightMap::constant(8, 8, 0.3).unwrap();
        let want = crate::filtering::fuse(&a, &b, &w).unwrap();
        let mut wt = Tensor::zeros(1, 1, 8, 8);
        wt.data.fill(0.3);
        let got = fuse_batch(&ImageTensor::batch(&[&a]), &ImageTensor::batch(&[&b]), &wt);
        let got = ImageTensor::from_batch(&got, 0);
        for (x, y) in got.data.iter().zip(want.data.iter()) {
            assert!((x - y).abs() < 1e-6);
        }
    }
}
