//! Stage drivers: each command resolves its upstream artifacts through the
//! content-addressed store, builds what is missing, and returns handles.

use super::config::{DenoiserSection, ExperimentConfig};
use super::store::{file_sha256, ArtifactStore};
use crate::attack::shard::{write_manifest, write_shard, AttackDatasetDir, AttackManifest};
use crate::attack::{eps_label, pgd_attack_batch, AttackSpec, ThreatModel};
use crate::backbone::checkpoint::{
    load_classifier, load_denoiser, load_fusion, read_checkpoint, save_classifier, save_denoiser,
    save_fusion,
};
use crate::backbone::{ArchTag, DenoiserModel, MULTIHEAD_COUNT};
use crate::classifier::{train_classifier, ClassifierTrainConfig, SmallResNet};
use crate::error::{Error, Result};
use crate::evaluation::report::{
    render_kernel_figures, render_report, render_uncertainty_figures,
};
use crate::evaluation::{
    evaluate_pipeline_opts, PipelineDenoiser, PipelineSpec, SweepResult, SweepSpec, TestCells,
};
use crate::filtering::FusionNet;
use crate::imaging::dataset::{read_packed, DatasetSource};
use crate::imaging::synth::{generate_packed, SynthSpec};
use crate::imaging::{load_dataset, ImageTensor, LabeledImage};
use crate::training::{
    train_advfilter_stage1, train_advfilter_stage2, train_denoiser, train_multihead, PairSet,
    TeacherMode, TrainConfig, TrainReport,
};
use std::path::{Path, PathBuf};
use std::sync::Arc;

pub struct Driver<'a> {
    pub cfg: &'a ExperimentConfig,
    pub store: ArtifactStore,
    pub quiet: bool,
}

fn now() -> std::time::Instant {
    std::time::Instant::now()
}

impl<'a> Driver<'a> {
    pub fn new(cfg: &'a ExperimentConfig) -> Self {
        Driver {
            store: ArtifactStore::new(&cfg.output.dir),
            cfg,
            quiet: false,
        }
    }

    fn log(&self, msg: &str) {
        if !self.quiet {
            eprintln!("[advfilter] {msg}");
        }
    }

    // -----------------------------------------------------------------
    // Dataset
    // -----------------------------------------------------------------

    /// Materialize the train/test splits as packed files in the store.
    pub fn dataset(&self) -> Result<DatasetArtifact> {
        let ds = &self.cfg.dataset;
        let inputs = serde_json::to_value(ds)?;
        let (dir, key, built) = self.store.ensure("datasets", &inputs, |dir| {
            let train_path = dir.join("train.bin");
            let test_path = dir.join("test.bin");
            if ds.source == "auto-synth" || (ds.fallback_synth && !Path::new(&ds.source).exists())
            {
                if ds.source != "auto-synth" {
                    self.log(&format!(
                        "dataset source {} not found; generating the synthetic stand-in",
                        ds.source
                    ));
                }
                let spec = SynthSpec {
                    num_classes: ds.num_classes,
                    size: ds.image_size,
                    style: ds.synth_style.clone(),
                    ..Default::default()
                };
                generate_packed(&spec, &train_path, ds.train_size, ds.seed, "train")?;
                generate_packed(&spec, &test_path, ds.test_size, ds.seed, "test")?;
            } else {
                // disjoint balanced splits from a user dataset
                let source = DatasetSource::infer(Path::new(&ds.source))?;
                let total = ds.train_size + ds.test_size;
                let all = load_dataset(&source, total, ds.seed)?;
                let (train, test) = split_balanced(all, ds.train_size, ds.test_size);
                write_labeled(&train_path, &train, ds.num_classes)?;
                write_labeled(&test_path, &test, ds.num_classes)?;
            }
            Ok(serde_json::json!({
                "train": {"file": "train.bin", "sha256": file_sha256(&train_path)?},
                "test": {"file": "test.bin", "sha256": file_sha256(&test_path)?},
            }))
        })?;
        if built {
            self.log(&format!("dataset ready at {}", dir.display()));
        }
        Ok(DatasetArtifact { dir, key })
    }

    // -----------------------------------------------------------------
    // Threat models
    // -----------------------------------------------------------------

    pub fn threat(&self) -> Result<ThreatArtifact> {
        let data = self.dataset()?;
        if let Some(path) = &self.cfg.threat.checkpoint {
            let (model, _) = load_classifier(path)?;
            let fp = model.fingerprint();
            return Ok(ThreatArtifact {
                model: Arc::new(model),
                fingerprint: fp,
                key: "external".into(),
            });
        }
        let inputs = serde_json::json!({
            "threat": self.cfg.threat,
            "dataset": data.key,
            "num_classes": self.cfg.dataset.num_classes,
        });
        let t0 = now();
        let (dir, key, built) = self.store.ensure("classifiers", &inputs, |dir| {
            let train = data.load_train()?;
            let mut model = SmallResNet::new(
                self.cfg.dataset.num_classes,
                self.cfg.threat.base_channels,
                self.cfg.threat.seed,
            );
            let cfg = ClassifierTrainConfig {
                epochs: self.cfg.threat.epochs,
                batch_size: self.cfg.threat.batch_size,
                lr: self.cfg.threat.lr,
                seed: self.cfg.threat.seed,
            };
            let losses = train_classifier(&mut model, &train, &cfg)?;
            let test = data.load_test()?;
            let acc = accuracy_on(&model, &test);
            self.log(&format!(
                "classifier trained: clean train loss {:.4}, test accuracy {:.3}",
                losses.last().copied().unwrap_or(f32::NAN),
                acc
            ));
            let fp = save_classifier(
                &dir.join("model.ckpt"),
                &model,
                serde_json::json!({
                    "dataset": data.key,
                    "config": cfg,
                    "test_accuracy": acc,
                    "epoch_losses": losses,
                }),
            )?;
            Ok(serde_json::json!({"checkpoint": "model.ckpt", "fingerprint": fp, "test_accuracy": acc}))
        })?;
        let (model, _) = load_classifier(&dir.join("model.ckpt"))?;
        let fp = model.fingerprint();
        if built {
            let dt = t0.elapsed().as_secs_f64();
            self.log(&format!("threat model {key} built in {dt:.1}s"));
        }
        Ok(ThreatArtifact {
            model: Arc::new(model),
            fingerprint: fp,
            key,
        })
    }

    pub fn adv_threat(&self) -> Result<ThreatArtifact> {
        let section = self.cfg.adv_threat.as_ref().ok_or_else(|| {
            Error::Config("config has no [adv_threat] section".into())
        })?;
        let data = self.dataset()?;
        let inputs = serde_json::json!({
            "adv_threat": section,
            "dataset": data.key,
            "num_classes": self.cfg.dataset.num_classes,
            "base_channels": self.cfg.threat.base_channels,
        });
        let (dir, key, built) = self.store.ensure("classifiers-adv", &inputs, |dir| {
            let train = data.load_train()?;
            let attack = AttackSpec::new(section.iterations, section.epsilon)?;
            let cfg = ClassifierTrainConfig {
                epochs: section.epochs,
                batch_size: section.batch_size,
                lr: section.lr,
                seed: section.seed,
            };
            let model = crate::evaluation::build_adversarially_trained_classifier(
                &train,
                &attack,
                &cfg,
                self.cfg.dataset.num_classes,
                self.cfg.threat.base_channels,
                section.seed,
            )?;
            let test = data.load_test()?;
            let acc = accuracy_on(&model, &test);
            self.log(&format!("adversarially trained classifier: clean test accuracy {acc:.3}"));
            let fp = save_classifier(
                &dir.join("model.ckpt"),
                &model,
                serde_json::json!({
                    "dataset": data.key,
                    "attack": attack,
                    "config": cfg,
                    "clean_test_accuracy": acc,
                }),
            )?;
            Ok(serde_json::json!({"checkpoint": "model.ckpt", "fingerprint": fp}))
        })?;
        let (model, _) = load_classifier(&dir.join("model.ckpt"))?;
        let fp = model.fingerprint();
        if built {
            self.log(&format!("adversarial threat model {key} built"));
        }
        Ok(ThreatArtifact {
            model: Arc::new(model),
            fingerprint: fp,
            key,
        })
    }

    // -----------------------------------------------------------------
    // Attack datasets
    // -----------------------------------------------------------------

    /// Training pairs: the full strength grid attacked at the configured
    /// iteration count, sharded per strength.
    pub fn attack_train(&self) -> Result<AttackArtifact> {
        let data = self.dataset()?;
        let threat = self.threat()?;
        let grid = self.cfg.attack.grid();
        let inputs = serde_json::json!({
            "attack": self.cfg.attack,
            "grid": grid.iter().map(|e| eps_label(*e)).collect::<Vec<_>>(),
            "threat_fingerprint": threat.fingerprint,
            "dataset": data.key,
            "split": "train",
        });
        let t0 = now();
        let (dir, key, built) = self.store.ensure("attacks-train", &inputs, |dir| {
            let images = data.load_train()?;
            let mut entries = Vec::new();
            for &eps in &grid {
                let pairs = attack_split(
                    threat.model.as_ref(),
                    &images,
                    eps,
                    self.cfg.attack.iterations,
                    self.cfg.attack.seed,
                )?;
                let file = dir.join(format!("eps_{}.bin", eps_label(eps)));
                entries.push(write_shard(&file, &pairs)?);
                self.log(&format!(
                    "attack-gen train eps={} done ({} pairs)",
                    eps_label(eps),
                    pairs.len()
                ));
            }
            let manifest = AttackManifest {
                threat_fingerprint: threat.fingerprint.clone(),
                iterations: self.cfg.attack.iterations,
                seed: self.cfg.attack.seed,
                height: self.cfg.dataset.image_size,
                width: self.cfg.dataset.image_size,
                images_per_strength: images.len(),
                shards: entries.clone(),
            };
            write_manifest(dir, &manifest)?;
            Ok(serde_json::json!({
                "shards": entries.len(),
                "pairs": entries.iter().map(|e| e.count).sum::<usize>(),
            }))
        })?;
        if built {
            self.log(&format!(
                "training attack dataset {key} built in {:.1}s",
                t0.elapsed().as_secs_f64()
            ));
        }
        Ok(AttackArtifact { dir, key })
    }

    /// Test cells: clean + the evaluation grid at the default n, plus the
    /// fixed-strength varying-n block.
    pub fn attack_test(&self) -> Result<AttackArtifact> {
        let data = self.dataset()?;
        let threat = self.threat()?;
        let sweep = self.cfg.sweep_spec();
        let inputs = serde_json::json!({
            "attack": self.cfg.attack,
            "sweep": sweep,
            "threat_fingerprint": threat.fingerprint,
            "dataset": data.key,
            "split": "test",
        });
        let t0 = now();
        let (dir, key, built) = self.store.ensure("attacks-test", &inputs, |dir| {
            let images = data.load_test()?;
            let n0 = sweep.iteration_grid.first().copied().unwrap_or(40);
            let mut entries = Vec::new();
            let mut jobs: Vec<(f64, usize)> =
                sweep.epsilon_grid.iter().map(|&e| (e, n0)).collect();
            for &n in sweep.iteration_grid.iter().skip(1) {
                jobs.push((sweep.iteration_sweep_epsilon, n));
            }
            for (eps, n) in jobs {
                let pairs = attack_split(
                    threat.model.as_ref(),
                    &images,
                    eps,
                    n,
                    self.cfg.evaluation.seed.wrapping_add(n as u64),
                )?;
                let file = dir.join(format!("eps_{}_n{}.bin", eps_label(eps), n));
                entries.push(write_shard(&file, &pairs)?);
                self.log(&format!("attack-gen test eps={} n={n} done", eps_label(eps)));
            }
            let manifest = AttackManifest {
                threat_fingerprint: threat.fingerprint.clone(),
                iterations: n0,
                seed: self.cfg.evaluation.seed,
                height: self.cfg.dataset.image_size,
                width: self.cfg.dataset.image_size,
                images_per_strength: images.len(),
                shards: entries.clone(),
            };
            write_manifest(dir, &manifest)?;
            Ok(serde_json::json!({"shards": entries.len()}))
        })?;
        if built {
            self.log(&format!(
                "test attack dataset {key} built in {:.1}s",
                t0.elapsed().as_secs_f64()
            ));
        }
        Ok(AttackArtifact { dir, key })
    }

    pub fn load_test_cells(&self) -> Result<TestCells> {
        let artifact = self.attack_test()?;
        let dsdir = AttackDatasetDir::open(&artifact.dir)?;
        let mut cells = TestCells::new(dsdir.manifest.iterations);
        for entry in &dsdir.manifest.shards {
            let pairs = dsdir.load_cell(&entry.eps_label, entry.iterations)?;
            cells.insert(entry.eps, entry.iterations, pairs);
        }
        Ok(cells)
    }

    // -----------------------------------------------------------------
    // Denoiser training
    // -----------------------------------------------------------------

    pub fn denoiser(&self, name: &str) -> Result<DenoiserArtifact> {
        let section = self.cfg.denoisers.get(name).ok_or_else(|| {
            Error::Config(format!("no [denoisers.{name}] section in the config"))
        })?;
        let attack = self.attack_train()?;
        let needs_threat = section.loss == crate::training::LossKind::SemanticL1
            || section.arch == ArchTag::YDual;
        let threat = if needs_threat { Some(self.threat()?) } else { None };
        let inputs = serde_json::json!({
            "denoiser": section,
            "name": name,
            "attacks": attack.key,
            "threat_fingerprint": threat.as_ref().map(|t| &t.fingerprint),
        });
        let t0 = now();
        let (dir, key, built) = self.store.ensure("denoisers", &inputs, |dir| {
            self.build_denoiser(name, section, &attack, threat.as_ref(), dir)
        })?;
        if built {
            self.log(&format!(
                "denoiser {name} ({key}) trained in {:.1}s",
                t0.elapsed().as_secs_f64()
            ));
        }
        DenoiserArtifact::open(name, section, dir, key)
    }

    fn build_denoiser(
        &self,
        name: &str,
        section: &DenoiserSection,
        attack: &AttackArtifact,
        threat: Option<&ThreatArtifact>,
        dir: &Path,
    ) -> Result<serde_json::Value> {
        let dsdir = AttackDatasetDir::open(&attack.dir)?;
        let mut pairs = PairSet::from_dir(&dsdir)?;
        if !section.train_eps.is_empty() {
            pairs = pairs.filter_eps(&section.train_eps);
        }
        self.log(&format!(
            "training denoiser {name} ({}) on {} pairs across {} strengths",
            section.arch,
            pairs.total_pairs(),
            pairs.by_eps.len()
        ));
        let provenance_base = serde_json::json!({
            "name": name,
            "section": section,
            "attacks": attack.key,
            "attack_manifest_threat": dsdir.manifest.threat_fingerprint,
            "decoder_init": "independent",
        });
        match section.arch {
            ArchTag::UAdd | ArchTag::UFilt | ArchTag::UMultihead => {
                let mut model =
                    DenoiserModel::new(section.arch, section.k, section.backbone(), section.seed)?;
                let report = train_denoiser_resumable(
                    &mut model,
                    &pairs,
                    section,
                    threat.map(|t| t.model.as_ref() as &dyn ThreatModel),
                    dir,
                    None,
                )?
                .expect("completed run yields a report");
                std::fs::write(dir.join("metrics.csv"), report.metrics_csv())?;
                let fp = save_denoiser(
                    &dir.join("model.ckpt"),
                    &model,
                    provenance(&provenance_base, &report),
                    false,
                )?;
                let _ = std::fs::remove_file(dir.join(PROGRESS_FILE));
                Ok(serde_json::json!({"fingerprint": fp, "report": report_summary(&report)}))
            }
            ArchTag::YDual => {
                let threat = threat.ok_or_else(|| {
                    Error::Config("perturbation-aware protocol needs the threat model".into())
                })?;
                let mut model =
                    DenoiserModel::new(section.arch, section.k, section.backbone(), section.seed)?;
                let report1 = train_denoiser_resumable(&mut model, &pairs, section, None, dir, None)?
                    .expect("completed run yields a report");
                std::fs::write(dir.join("metrics_stage1.csv"), report1.metrics_csv())?;
                let stage1_prov = provenance(&provenance_base, &report1);
                let y_fp = save_denoiser(&dir.join("ynet.ckpt"), &model, stage1_prov, false)?;
                let _ = std::fs::remove_file(dir.join(PROGRESS_FILE));

                let ynet = match &model {
                    DenoiserModel::YDual(m) => m,
                    _ => unreachable!(),
                };
                let mut fusion = FusionNet::new(section.seed.wrapping_add(1));
                let fcfg = TrainConfig {
                    lr: section.fusion_lr.unwrap_or(1e-3),
                    epochs: section.fusion_epochs.unwrap_or(section.epochs),
                    ..section.train_config()
                };
                let teacher = if section.soft_teacher {
                    TeacherMode::SoftDistribution
                } else {
                    TeacherMode::HardLabel
                };
                let report2 = train_advfilter_stage2(
                    ynet,
                    &mut fusion,
                    &pairs,
                    threat.model.as_ref(),
                    &fcfg,
                    teacher,
                )?;
                std::fs::write(dir.join("metrics_stage2.csv"), report2.metrics_csv())?;
                let f_fp = save_fusion(
                    &dir.join("fusion.ckpt"),
                    &fusion,
                    serde_json::json!({
                        "stage1_checkpoint": "ynet.ckpt",
                        "stage1_fingerprint": y_fp,
                        "teacher": teacher,
                        "report": report_summary(&report2),
                        "ynet_frozen": true,
                    }),
                    false,
                )?;
                Ok(serde_json::json!({
                    "ynet_fingerprint": y_fp,
                    "fusion_fingerprint": f_fp,
                    "stage1": report_summary(&report1),
                    "stage2": report_summary(&report2),
                }))
            }
        }
    }

    // -----------------------------------------------------------------
    // Evaluation
    // -----------------------------------------------------------------

    /// Build a pipeline from a name: `none`, a denoiser name, a branch
    /// (`advfilter:sl`, `advfilter:m`, `multihead:head2`), or any of those
    /// with `+adv` appended for the adversarially trained classifier.
    pub fn pipeline(&self, name: &str) -> Result<PipelineSpec> {
        let (den_name, use_adv) = match name.strip_suffix("+adv") {
            Some(base) => (base, true),
            None => (name, false),
        };
        let classifier = if use_adv || den_name == "adv" {
            self.adv_threat()?.model
        } else {
            self.threat()?.model
        };
        let denoiser = match den_name {
            "none" | "adv" => PipelineDenoiser::None,
            other => {
                let (base, branch) = match other.split_once(':') {
                    Some((b, br)) => (b, Some(br)),
                    None => (other, None),
                };
                let artifact = self.denoiser(base)?;
                artifact.pipeline_denoiser(branch)?
            }
        };
        Ok(PipelineSpec {
            name: name.to_string(),
            denoiser,
            classifier,
        })
    }

    /// Default evaluation rows: undefended baseline plus every configured
    /// denoiser (multi-head expands to its four heads; the perturbation-
    /// aware model adds its two branches).
    pub fn default_pipelines(&self) -> Vec<String> {
        let mut names = vec!["none".to_string()];
        for (name, sec) in &self.cfg.denoisers {
            match sec.arch {
                ArchTag::UMultihead => {
                    for h in 1..=MULTIHEAD_COUNT {
                        names.push(format!("{name}:head{h}"));
                    }
                }
                ArchTag::YDual => {
                    names.push(format!("{name}:sl"));
                    names.push(format!("{name}:m"));
                    names.push(name.clone());
                }
                _ => names.push(name.clone()),
            }
        }
        names
    }

    /// Evaluate pipelines over the shared test cells and render the report
    /// bundle. Quality tables are computed for single-model rows on the
    /// clean classifier.
    pub fn evaluate(&self, pipeline_names: &[String], with_iterations: bool) -> Result<EvalOutcome> {
        let cells = self.load_test_cells()?;
        let mut sweep = self.cfg.sweep_spec();
        if !with_iterations {
            sweep.iteration_grid.truncate(1);
        }
        let mut results = Vec::new();
        for name in pipeline_names {
            let pipe = self.pipeline(name)?;
            let with_quality = !name.ends_with("+adv") && name != "adv" && name != "none";
            let t0 = now();
            let res = evaluate_pipeline_opts(&pipe, &sweep, &cells, self.cfg.evaluation.seed, with_quality)?;
            self.log(&format!(
                "evaluated {name} in {:.1}s",
                t0.elapsed().as_secs_f64()
            ));
            results.push(res);
        }
        Ok(EvalOutcome {
            sweep,
            results,
            cells,
        })
    }

    /// Render the report bundle (tables, plots, figures) for results.
    pub fn render(&self, outcome: &EvalOutcome, subdir: &str) -> Result<PathBuf> {
        let report_dir = self.store.root.join("report").join(subdir);
        render_report(&report_dir, &outcome.results, &outcome.sweep)?;
        // figure strips come from the image-loss filtering model if built
        if let Some((name, _)) = self
            .cfg
            .denoisers
            .iter()
            .find(|(_, s)| s.arch == ArchTag::UFilt)
        {
            let artifact = self.denoiser(name)?;
            if let PipelineDenoiser::Unet(filt) = artifact.pipeline_denoiser(None)? {
                render_uncertainty_figures(
                    &report_dir,
                    filt.as_ref(),
                    &outcome.cells,
                    &outcome.sweep,
                    64,
                )?;
                render_kernel_figures(&report_dir, filt.as_ref(), &outcome.cells, &outcome.sweep)?;
            }
        }
        self.log(&format!("report bundle at {}", report_dir.display()));
        Ok(report_dir)
    }
}

fn provenance(base: &serde_json::Value, report: &TrainReport) -> serde_json::Value {
    serde_json::json!({
        "base": base,
        "report": report_summary(report),
    })
}

fn report_summary(report: &TrainReport) -> serde_json::Value {
    serde_json::json!({
        "final_fingerprint": report.final_fingerprint,
        "wall_seconds": report.wall_seconds,
        "total_steps": report.total_steps,
        "update_counts": report.update_counts,
        "per_epoch_losses": report.per_epoch_losses,
    })
}

fn accuracy_on(model: &SmallResNet, data: &[LabeledImage]) -> f64 {
    let mut correct = 0usize;
    for chunk in data.chunks(64) {
        let images: Vec<&ImageTensor> = chunk.iter().map(|d| &d.image).collect();
        let labels: Vec<usize> = chunk.iter().map(|d| d.label).collect();
        let batch = ImageTensor::batch(&images);
        let preds = model.predict(&batch);
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    correct as f64 / data.len().max(1) as f64
}

fn attack_split(
    model: &dyn ThreatModel,
    images: &[LabeledImage],
    eps: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<crate::attack::AdversarialPair>> {
    let spec = AttackSpec::new(n, eps)?;
    let mut out = Vec::with_capacity(images.len());
    for (ci, chunk) in images.chunks(crate::attack::ATTACK_BATCH).enumerate() {
        let refs: Vec<&LabeledImage> = chunk.iter().collect();
        let seeds: Vec<u64> = (0..chunk.len())
            .map(|i| {
                crate::attack::pair_seed(
                    seed.wrapping_add(n as u64),
                    eps,
                    ci * crate::attack::ATTACK_BATCH + i,
                )
            })
            .collect();
        out.extend(pgd_attack_batch(model, &refs, &spec, &seeds)?);
    }
    Ok(out)
}

fn split_balanced(
    all: Vec<LabeledImage>,
    train_size: usize,
    test_size: usize,
) -> (Vec<LabeledImage>, Vec<LabeledImage>) {
    // group by class, then split each class proportionally
    let mut by_class: std::collections::BTreeMap<usize, Vec<LabeledImage>> = Default::default();
    for li in all {
        by_class.entry(li.label).or_default().push(li);
    }
    let k = by_class.len().max(1);
    let per_train = train_size / k;
    let mut train = Vec::with_capacity(train_size);
    let mut test = Vec::with_capacity(test_size);
    for (_, mut images) in by_class {
        let t = per_train.min(images.len());
        test.extend(images.split_off(t));
        train.extend(images);
    }
    test.truncate(test_size);
    (train, test)
}

fn write_labeled(path: &Path, data: &[LabeledImage], num_classes: usize) -> Result<()> {
    let (h, w) = (data[0].image.height(), data[0].image.width());
    let records: Vec<(Vec<u8>, u8)> = data
        .iter()
        .map(|li| (li.image.to_u8(), li.label as u8))
        .collect();
    let classes: Vec<String> = (0..num_classes).map(|c| format!("class_{c:02}")).collect();
    crate::imaging::dataset::write_packed(path, h, w, &records, &classes)
}

// ---------------------------------------------------------------------------
// Artifact handles
// ---------------------------------------------------------------------------

pub struct DatasetArtifact {
    pub dir: PathBuf,
    pub key: String,
}

impl DatasetArtifact {
    pub fn load_train(&self) -> Result<Vec<LabeledImage>> {
        load_all(&self.dir.join("train.bin"))
    }

    pub fn load_test(&self) -> Result<Vec<LabeledImage>> {
        load_all(&self.dir.join("test.bin"))
    }
}

fn load_all(path: &Path) -> Result<Vec<LabeledImage>> {
    let ds = read_packed(path)?;
    ds.records
        .iter()
        .map(|(bytes, label)| {
            Ok(LabeledImage {
                image: ImageTensor::from_u8(bytes, ds.h, ds.w)?,
                label: *label as usize,
            })
        })
        .collect()
}

pub struct ThreatArtifact {
    pub model: Arc<SmallResNet>,
    pub fingerprint: String,
    pub key: String,
}

pub struct AttackArtifact {
    pub dir: PathBuf,
    pub key: String,
}

pub struct DenoiserArtifact {
    pub name: String,
    pub arch: ArchTag,
    pub dir: PathBuf,
    pub key: String,
}

impl DenoiserArtifact {
    fn open(name: &str, section: &DenoiserSection, dir: PathBuf, key: String) -> Result<Self> {
        Ok(DenoiserArtifact {
            name: name.to_string(),
            arch: section.arch,
            dir,
            key,
        })
    }

    /// Load the artifact as a pipeline denoiser; `branch` selects a
    /// Y-branch (`sl`/`m`) or a multi-head head (`head1`..`head4`).
    pub fn pipeline_denoiser(&self, branch: Option<&str>) -> Result<PipelineDenoiser> {
        match self.arch {
            ArchTag::UAdd | ArchTag::UFilt => {
                let (model, _) = load_denoiser(&self.dir.join("model.ckpt"))?;
                match model {
                    DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => {
                        Ok(PipelineDenoiser::Unet(Arc::new(m)))
                    }
                    _ => unreachable!(),
                }
            }
            ArchTag::UMultihead => {
                let (model, _) = load_denoiser(&self.dir.join("model.ckpt"))?;
                let m = match model {
                    DenoiserModel::UMultihead(m) => m,
                    _ => unreachable!(),
                };
                let head = match branch {
                    Some(b) if b.starts_with("head") => b[4..]
                        .parse::<usize>()
                        .map_err(|_| Error::Config(format!("bad head selector {b}")))?,
                    None => 4,
                    Some(other) => {
                        return Err(Error::Config(format!("bad branch {other} for multi-head")))
                    }
                };
                if head == 0 || head > MULTIHEAD_COUNT {
                    return Err(Error::Config(format!("head index {head} out of range")));
                }
                Ok(PipelineDenoiser::MultiHead(Arc::new(m), head))
            }
            ArchTag::YDual => {
                let (model, _) = load_denoiser(&self.dir.join("ynet.ckpt"))?;
                let ynet = Arc::new(match model {
                    DenoiserModel::YDual(m) => m,
                    _ => unreachable!(),
                });
                match branch {
                    Some("sl") => Ok(PipelineDenoiser::YBranchSl(ynet)),
                    Some("m") => Ok(PipelineDenoiser::YBranchM(ynet)),
                    None => {
                        let (fusion, _) = load_fusion(&self.dir.join("fusion.ckpt"))?;
                        Ok(PipelineDenoiser::AdvFilter(ynet, Arc::new(fusion)))
                    }
                    Some(other) => Err(Error::Config(format!(
                        "bad branch {other} for the dual-decoder model"
                    ))),
                }
            }
        }
    }

    /// Fingerprint of the primary checkpoint.
    pub fn fingerprint(&self) -> Result<String> {
        let path = if self.arch == ArchTag::YDual {
            self.dir.join("ynet.ckpt")
        } else {
            self.dir.join("model.ckpt")
        };
        Ok(read_checkpoint(&path)?.header.fingerprint)
    }
}

pub struct EvalOutcome {
    pub sweep: SweepSpec,
    pub results: Vec<SweepResult>,
    pub cells: TestCells,
}

// ---------------------------------------------------------------------------
// Resumable training
// ---------------------------------------------------------------------------

pub const PROGRESS_FILE: &str = "progress.ckpt";

fn save_progress(dir: &Path, model: &DenoiserModel, next_epoch: usize) -> Result<()> {
    save_denoiser(
        &dir.join(PROGRESS_FILE),
        model,
        serde_json::json!({"next_epoch": next_epoch}),
        true,
    )?;
    Ok(())
}

fn load_progress(dir: &Path, model: &mut DenoiserModel) -> Result<Option<usize>> {
    let path = dir.join(PROGRESS_FILE);
    if !path.is_file() {
        return Ok(None);
    }
    let loaded = read_checkpoint(&path)?;
    let next = loaded.header.provenance["next_epoch"]
        .as_u64()
        .ok_or_else(|| Error::Checkpoint("progress file missing next_epoch".into()))? as usize;
    loaded.apply(&mut model.params_mut())?;
    Ok(Some(next))
}

/// Epoch-sliced training with a progress checkpoint after every epoch, so
/// an interrupted run resumes at the last epoch boundary with identical
/// batch sampling (step-derived RNG) and optimizer state.
///
/// `stop_after_epochs` limits how many epochs this call performs (used to
/// exercise interruption); `None` runs to completion and returns the merged
/// report.
pub fn train_denoiser_resumable(
    model: &mut DenoiserModel,
    pairs: &PairSet,
    section: &DenoiserSection,
    threat: Option<&dyn ThreatModel>,
    dir: &Path,
    stop_after_epochs: Option<usize>,
) -> Result<Option<crate::training::TrainReport>> {
    let tcfg = section.train_config();
    let spe = tcfg
        .steps_per_epoch
        .unwrap_or_else(|| pairs.total_pairs().div_ceil(tcfg.batch_size).max(1));
    let start_epoch = load_progress(dir, model)?.unwrap_or(0);
    let end_epoch = match stop_after_epochs {
        Some(k) => (start_epoch + k).min(section.epochs),
        None => section.epochs,
    };
    let mut reports = Vec::new();
    for epoch in start_epoch..end_epoch {
        let mut cfg = tcfg.clone();
        cfg.steps_per_epoch = Some(spe);
        cfg.start_step = epoch * spe;
        cfg.run_steps = Some(spe);
        let report = match model {
            DenoiserModel::UAdd(m) | DenoiserModel::UFilt(m) => {
                train_denoiser(m, pairs, &section.loss_spec(), threat, &cfg)?
            }
            DenoiserModel::UMultihead(m) => {
                cfg.include_clean = false;
                train_multihead(m, pairs, &cfg)?
            }
            DenoiserModel::YDual(m) => train_advfilter_stage1(m, pairs, &cfg)?,
        };
        reports.push(report);
        save_progress(dir, model, epoch + 1)?;
    }
    if end_epoch < section.epochs {
        return Ok(None); // interrupted on purpose; progress file remains
    }
    Ok(crate::training::merge_reports(reports).or_else(|| {
        // resumed after the final epoch already completed
        Some(crate::training::TrainReport {
            per_epoch_losses: Vec::new(),
            final_fingerprint: model.fingerprint(),
            wall_seconds: 0.0,
            metrics: Vec::new(),
            update_counts: Default::default(),
            total_steps: spe * section.epochs,
        })
    }))
}
