//! Stage execution with config-hash resumability and a manifest of every
//! artifact produced.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::classifiers::{build_model, load_checkpoint, save_checkpoint, ClassifierModel, RegimeTag};
use crate::data::{self, LabeledDataset, NormalizationSpec, ShadowDataset, Split};
use crate::error::{Error, Result};
use crate::inversion::{self, gan, DreamConfig, PgdInversionConfig};
use crate::metrics::{
    activation_statistics, adversarial_radius, EvaluationRecord, FeatureIndex, ModelAggregate,
    PrivacyReport,
};
use crate::training;

use super::config::{
    AttackKind, AttackSpec, DatasetKind, ExperimentSpec, ModelRecipe, Preset, resolve_preset,
};

/// How far down the stage graph to execute.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum StageDepth {
    Train,
    Attack,
    Evaluate,
    Report,
}

#[derive(Debug, Clone, Copy)]
pub struct RunOptions {
    /// Skip stages whose outputs exist under a matching config hash.
    pub resume: bool,
    pub depth: StageDepth,
}

impl Default for RunOptions {
    fn default() -> Self {
        RunOptions {
            resume: true,
            depth: StageDepth::Report,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Ok,
    Skipped,
    Failed,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub stage: String,
    pub config_hash: String,
    pub outputs: Vec<PathBuf>,
    pub status: StageStatus,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
pub struct Manifest {
    pub version: u32,
    pub spec_hash: String,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn find(&self, stage: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.stage == stage)
    }

    fn upsert(&mut self, entry: ManifestEntry) {
        if let Some(e) = self.entries.iter_mut().find(|e| e.stage == entry.stage) {
            *e = entry;
        } else {
            self.entries.push(entry);
        }
    }

    pub fn load(path: &Path) -> Result<Manifest> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        atomic_write(path, &serde_json::to_vec_pretty(self)?)
    }
}

/// Write via a temporary sibling and rename, so readers never observe a
/// half-written artifact.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let tmp = path.with_extension("tmp~");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn short_hash(value: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(value).expect("hashable config");
    let mut h = Sha256::new();
    h.update(&bytes);
    hex::encode(&h.finalize()[..8])
}

/// A model id possibly referring to an early checkpoint (`<id>-e<epoch>`).
fn parse_model_ref<'a>(spec: &'a ExperimentSpec, id: &str) -> Option<(&'a ModelRecipe, Option<u32>)> {
    if let Some(m) = spec.models.iter().find(|m| m.id == id) {
        return Some((m, None));
    }
    let (base, suffix) = id.rsplit_once("-e")?;
    let epoch: u32 = suffix.parse().ok()?;
    let m = spec.models.iter().find(|m| m.id == base)?;
    let early = m
        .early_checkpoint
        .or_else(|| resolve_preset(&m.preset).and_then(|p| p.early_checkpoint))?;
    (early == epoch).then_some((m, Some(epoch)))
}

pub struct ExperimentContext {
    pub spec: ExperimentSpec,
    pub out_dir: PathBuf,
    pub manifest: Manifest,
    manifest_path: PathBuf,
    resume: bool,
    train_cache: Option<LabeledDataset>,
    val_cache: Option<LabeledDataset>,
}

impl ExperimentContext {
    pub fn new(spec: ExperimentSpec, opts: &RunOptions) -> Result<Self> {
        let out_dir = spec.output_dir.clone();
        std::fs::create_dir_all(&out_dir).map_err(|e| Error::io(&out_dir, e))?;
        let manifest_path = out_dir.join("manifest.json");
        let spec_hash = short_hash(&spec);
        let manifest = if opts.resume && manifest_path.exists() {
            let m = Manifest::load(&manifest_path)?;
            if m.spec_hash == spec_hash {
                m
            } else {
                Manifest {
                    version: 1,
                    spec_hash,
                    entries: Vec::new(),
                }
            }
        } else {
            Manifest {
                version: 1,
                spec_hash,
                entries: Vec::new(),
            }
        };
        Ok(ExperimentContext {
            spec,
            out_dir,
            manifest,
            manifest_path,
            resume: opts.resume,
            train_cache: None,
            val_cache: None,
        })
    }

    fn stage_done(&self, stage: &str, hash: &str) -> bool {
        self.resume
            && self.manifest.find(stage).is_some_and(|e| {
                e.status == StageStatus::Ok
                    && e.config_hash == hash
                    && e.outputs.iter().all(|p| p.exists())
            })
    }

    pub(crate) fn record_entry(&mut self, stage: &str, hash: &str, outputs: Vec<PathBuf>, status: StageStatus) -> Result<()> {
        self.manifest.upsert(ManifestEntry {
            stage: stage.to_string(),
            config_hash: hash.to_string(),
            outputs,
            status,
        });
        self.manifest.save(&self.manifest_path)
    }

    // ---- data stage ----------------------------------------------------

    pub fn data_dir(&self) -> PathBuf {
        if let Some(p) = &self.spec.dataset.path {
            return p.clone();
        }
        if let Ok(root) = std::env::var("INVBENCH_DATA_DIR") {
            return PathBuf::from(root).join(self.spec.dataset.kind.to_string());
        }
        self.out_dir.join("data").join(self.spec.dataset.kind.to_string())
    }

    pub fn stage_data(&mut self) -> Result<String> {
        let ds = &self.spec.dataset;
        let stage = "data".to_string();
        let hash = short_hash(&(ds, self.spec.seed));
        let dir = self.data_dir();
        if self.stage_done(&stage, &hash) {
            return Ok(hash);
        }
        match ds.kind {
            DatasetKind::Synthetic => {
                let marker = dir.join(".invbench-synth.json");
                let want = serde_json::json!({
                    "train": ds.synth_train,
                    "val": ds.synth_val,
                    "seed": self.spec.seed,
                });
                let fresh = marker
                    .exists()
                    .and_then_ok(|| std::fs::read_to_string(&marker).ok())
                    .map(|t| serde_json::from_str::<serde_json::Value>(&t).ok() == Some(want.clone()))
                    .unwrap_or(false);
                if !fresh {
                    data::synth::materialize(&dir, ds.synth_train, ds.synth_val, self.spec.seed)?;
                    atomic_write(&marker, want.to_string().as_bytes())?;
                }
                self.record_entry(&stage, &hash, vec![marker], StageStatus::Ok)?;
            }
            DatasetKind::Cifar10 => {
                // presence probe; the loader gives precise errors later
                let probe = dir.join("test_batch.bin");
                if !probe.exists() {
                    return Err(Error::Ingestion {
                        path: probe,
                        reason: "dataset archive not found (set dataset.path or INVBENCH_DATA_DIR)"
                            .into(),
                    });
                }
                self.record_entry(&stage, &hash, vec![probe], StageStatus::Ok)?;
            }
        }
        Ok(hash)
    }

    pub fn load_split(&mut self, split: Split) -> Result<LabeledDataset> {
        if let (Split::Train, Some(ds)) = (split, &self.train_cache) {
            return Ok(ds.clone());
        }
        if let (Split::Validation, Some(ds)) = (split, &self.val_cache) {
            return Ok(ds.clone());
        }
        let opts = data::LoadOptions {
            subset_size: match split {
                Split::Train => self.spec.dataset.subset,
                // keep validation proportional when subsetting
                Split::Validation => self.spec.dataset.subset.map(|s| (s / 4).max(64)),
            },
            downscale: self.spec.dataset.downscale,
            seed: self.spec.seed,
        };
        let ds = data::load_dataset(&self.data_dir(), split, &opts)?;
        match split {
            Split::Train => self.train_cache = Some(ds.clone()),
            Split::Validation => self.val_cache = Some(ds.clone()),
        }
        Ok(ds)
    }

    // ---- training stages -------------------------------------------------

    pub fn model_path(&self, id: &str) -> PathBuf {
        self.out_dir.join("models").join(format!("{id}.ckpt"))
    }

    fn resolved_preset(&self, recipe: &ModelRecipe) -> Result<Preset> {
        let mut preset = resolve_preset(&recipe.preset)
            .ok_or_else(|| Error::config(format!("unknown preset {}", recipe.preset)))?;
        if let Some(epochs) = recipe.epochs {
            // compress or extend the last schedule segment to fit
            let mut remaining = epochs;
            let mut sched = Vec::new();
            for seg in &preset.train.schedule {
                if remaining == 0 {
                    break;
                }
                let take = seg.epochs.min(remaining);
                sched.push(crate::training::ScheduleSeg { epochs: take, lr: seg.lr });
                remaining -= take;
            }
            if remaining > 0 {
                if let Some(last) = sched.last_mut() {
                    last.epochs += remaining;
                } else {
                    sched.push(crate::training::ScheduleSeg { epochs: remaining, lr: 0.01 });
                }
            }
            preset.train.schedule = sched;
            preset.train.epochs = epochs;
        }
        preset.train.seed = recipe.seed.unwrap_or(self.spec.seed);
        if recipe.early_checkpoint.is_some() {
            preset.early_checkpoint = recipe.early_checkpoint;
        }
        Ok(preset)
    }

    pub fn stage_train(&mut self, recipe: &ModelRecipe, data_hash: &str) -> Result<String> {
        let stage = format!("train:{}", recipe.id);
        let preset = self.resolved_preset(recipe)?;
        let hash = short_hash(&(data_hash, &preset, &recipe.id));
        let ckpt = self.model_path(&recipe.id);
        let metrics_path = self.out_dir.join("models").join(format!("{}.metrics.jsonl", recipe.id));
        let summary_path = self.out_dir.join("models").join(format!("{}.summary.json", recipe.id));
        let early_path = preset
            .early_checkpoint
            .map(|e| self.model_path(&format!("{}-e{e}", recipe.id)));

        let mut outputs = vec![ckpt.clone(), metrics_path.clone(), summary_path.clone()];
        if let Some(p) = &early_path {
            outputs.push(p.clone());
        }
        if self.stage_done(&stage, &hash) {
            return Ok(hash);
        }
        log::info!("training {} with preset {}", recipe.id, preset.name);

        let result = (|| -> Result<()> {
            let train = self.load_split(Split::Train)?;
            let val = self.load_split(Split::Validation)?;
            let (_, h, _) = train
                .image_shape()
                .ok_or_else(|| Error::Empty("training dataset".into()))?;
            let arch = preset.arch.instantiate(h);
            let mut model = build_model(&arch, NormalizationSpec::symmetric(3), preset.train.seed)?;

            let early_epoch = preset.early_checkpoint;
            let early_path2 = early_path.clone();
            let mut hook = |epoch: u32, m: &mut ClassifierModel| -> Result<()> {
                if Some(epoch) == early_epoch {
                    if let Some(p) = &early_path2 {
                        if let Some(parent) = p.parent() {
                            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
                        }
                        save_checkpoint(m, p)?;
                    }
                }
                Ok(())
            };

            let metrics = match &preset.adv {
                Some(adv) => {
                    model.regime = RegimeTag::Atm;
                    training::train_adversarial(&mut model, &train, Some(&val), &preset.train, adv, &mut hook)?
                }
                None => {
                    model.regime = RegimeTag::Ttm;
                    training::train_standard(&mut model, &train, Some(&val), &preset.train, &mut hook)?
                }
            };

            if let Some(parent) = ckpt.parent() {
                std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
            }
            save_checkpoint(&mut model, &ckpt)?;

            let mut jsonl = String::new();
            for m in &metrics {
                jsonl.push_str(&serde_json::to_string(m)?);
                jsonl.push('\n');
            }
            atomic_write(&metrics_path, jsonl.as_bytes())?;

            let last = metrics.last();
            let summary = serde_json::json!({
                "model_id": recipe.id,
                "preset": preset.name,
                "regime": model.regime.to_string(),
                "epochs": model.epochs_trained,
                "train_acc": last.map(|m| m.train_acc),
                "val_acc": last.and_then(|m| m.val_acc),
                "seed": preset.train.seed,
            });
            atomic_write(&summary_path, serde_json::to_string_pretty(&summary)?.as_bytes())?;
            Ok(())
        })();

        match result {
            Ok(()) => {
                self.record_entry(&stage, &hash, outputs, StageStatus::Ok)?;
                Ok(hash)
            }
            Err(e) => {
                self.record_entry(&stage, &hash, outputs, StageStatus::Failed)?;
                Err(Error::Stage {
                    stage,
                    reason: e.to_string(),
                })
            }
        }
    }

    pub fn load_model(&self, model_ref: &str) -> Result<ClassifierModel> {
        load_checkpoint(&self.model_path(model_ref))
    }

    // ---- attack stages ---------------------------------------------------

    pub fn recon_dir(&self) -> PathBuf {
        self.out_dir.join("recon")
    }

    pub fn stage_attack(
        &mut self,
        attack: &AttackSpec,
        model_ref: &str,
        train_hash: &str,
    ) -> Result<String> {
        let stage = format!("attack:{}:{model_ref}", attack.id);
        let hash = short_hash(&(train_hash, attack, model_ref));
        if self.stage_done(&stage, &hash) {
            return Ok(hash);
        }
        log::info!("attack {} on {model_ref}", attack.id);
        let classes: Vec<u8> = if attack.classes.is_empty() {
            (0..10).collect()
        } else {
            attack.classes.clone()
        };
        let seed = attack.seed.unwrap_or(self.spec.seed);

        let result = self.run_attack(attack, model_ref, &classes, seed);
        match result {
            Ok(outputs) => {
                self.record_entry(&stage, &hash, outputs, StageStatus::Ok)?;
                Ok(hash)
            }
            Err(e) => {
                self.record_entry(&stage, &hash, Vec::new(), StageStatus::Failed)?;
                Err(Error::Stage {
                    stage,
                    reason: e.to_string(),
                })
            }
        }
    }

    fn run_attack(
        &mut self,
        attack: &AttackSpec,
        model_ref: &str,
        classes: &[u8],
        seed: u64,
    ) -> Result<Vec<PathBuf>> {
        use rayon::prelude::*;
        let model = self.load_model(model_ref)?;
        let dir = self.recon_dir();
        match attack.kind {
            AttackKind::Pgd => {
                let results: Vec<Result<Vec<PathBuf>>> = classes
                    .par_iter()
                    .map(|&class| {
                        let mut m = model.clone();
                        let mut cfg = PgdInversionConfig::new(
                            class,
                            attack.max_iterations.unwrap_or(1000),
                        );
                        cfg.seed = seed;
                        if let Some(init) = &attack.init {
                            cfg.init = init.clone();
                        }
                        cfg.lr = attack.lr;
                        let mut r = inversion::invert_class(&mut m, model_ref, &cfg)?;
                        r.attack_id = attack.id.clone();
                        let (png, sidecar) = r.persist(&dir)?;
                        Ok(vec![png, sidecar])
                    })
                    .collect();
                flatten_outputs(results)
            }
            AttackKind::Deepdream => {
                let results: Vec<Result<Vec<PathBuf>>> = classes
                    .par_iter()
                    .map(|&class| {
                        let mut m = model.clone();
                        let mut cfg = DreamConfig::new(class);
                        cfg.seed = seed;
                        if let Some(v) = attack.octaves {
                            cfg.octaves = v;
                        }
                        if let Some(v) = attack.octave_scale {
                            cfg.octave_scale = v;
                        }
                        if let Some(v) = attack.steps_per_octave {
                            cfg.steps_per_octave = v;
                        }
                        if let Some(v) = attack.outer_iterations {
                            cfg.outer_iterations = v;
                        }
                        if let Some(v) = attack.lr {
                            cfg.lr = v;
                        }
                        cfg.lambda_tv = attack.lambda_tv;
                        if let Some(init) = &attack.init {
                            cfg.init = init.clone();
                        }
                        let mut r = inversion::invert_class_multiscale(&mut m, model_ref, &cfg)?;
                        r.attack_id = attack.id.clone();
                        let (png, sidecar) = r.persist(&dir)?;
                        Ok(vec![png, sidecar])
                    })
                    .collect();
                flatten_outputs(results)
            }
            AttackKind::Gan => {
                let mut target = model;
                let val = self.load_split(Split::Validation)?;
                let shadow = ShadowDataset::from_validation(val)?;
                let (_, h, _) = shadow
                    .dataset()
                    .image_shape()
                    .ok_or_else(|| Error::Empty("shadow dataset".into()))?;
                let mut cfg = gan::GanInversionConfig::desk(h, seed);
                if let Some(v) = attack.epochs {
                    cfg.epochs = v;
                }
                if let Some(v) = attack.lambda_c {
                    cfg.lambda_c = v;
                }
                if let Some(v) = attack.batch_size {
                    cfg.batch_size = v;
                }
                cfg.sample_every = Some(1);
                cfg.sample_dir = Some(self.out_dir.join("gan").join(format!("{}-{model_ref}", attack.id)));

                let (mut generator, curves) =
                    gan::train_inversion_gan(Some(&mut target), &shadow, &cfg)?;

                let gan_dir = self.out_dir.join("gan");
                std::fs::create_dir_all(&gan_dir).map_err(|e| Error::io(&gan_dir, e))?;
                let gen_path = gan_dir.join(format!("{}-{model_ref}.gen.ckpt", attack.id));
                gan::save_generator(&mut generator, seed, cfg.epochs, &gen_path)?;
                let curve_path = gan_dir.join(format!("{}-{model_ref}.losses.jsonl", attack.id));
                let mut jsonl = String::new();
                for c in &curves {
                    jsonl.push_str(&serde_json::to_string(c)?);
                    jsonl.push('\n');
                }
                atomic_write(&curve_path, jsonl.as_bytes())?;

                let mut outputs = vec![gen_path, curve_path];
                if let Some(d) = &cfg.sample_dir {
                    for e in 1..=cfg.epochs {
                        let p = d.join(format!("gan_samples_epoch{e:03}.png"));
                        if p.exists() {
                            outputs.push(p);
                        }
                    }
                }
                let n = attack.samples_per_class.unwrap_or(1);
                std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                for &class in classes {
                    let samples = gan::generate_samples(&mut generator, class, n, seed ^ class as u64);
                    for (si, img) in samples.iter().enumerate() {
                        let name = data::result_filename(
                            model_ref,
                            &attack.id,
                            class,
                            seed.wrapping_add(si as u64),
                        );
                        let png = dir.join(&name);
                        data::save_image(img, &png)?;
                        let sidecar = png.with_extension("json");
                        let meta = serde_json::json!({
                            "attack_id": attack.id,
                            "model_id": model_ref,
                            "target_class": class,
                            "seed": seed.wrapping_add(si as u64),
                            "kind": "gan_sample",
                            "lambda_c": cfg.lambda_c,
                        });
                        atomic_write(&sidecar, serde_json::to_string_pretty(&meta)?.as_bytes())?;
                        outputs.push(png);
                        outputs.push(sidecar);
                    }
                }
                Ok(outputs)
            }
        }
    }

    // ---- metrics stage ---------------------------------------------------

    pub fn stage_metrics(&mut self, upstream: &[String]) -> Result<String> {
        let stage = "metrics".to_string();
        let hash = short_hash(&(upstream, &self.spec.metrics));
        let report_path = self.out_dir.join("report").join("privacy_report.json");
        if self.stage_done(&stage, &hash) {
            return Ok(hash);
        }
        if !self.spec.metrics.enabled {
            self.record_entry(&stage, &hash, vec![], StageStatus::Ok)?;
            return Ok(hash);
        }
        log::info!("computing privacy metrics");
        let result = self.run_metrics(&report_path);
        match result {
            Ok(()) => {
                self.record_entry(&stage, &hash, vec![report_path], StageStatus::Ok)?;
                Ok(hash)
            }
            Err(e) => {
                self.record_entry(&stage, &hash, vec![], StageStatus::Failed)?;
                Err(Error::Stage {
                    stage,
                    reason: e.to_string(),
                })
            }
        }
    }

    fn run_metrics(&mut self, report_path: &Path) -> Result<()> {
        let train = self.load_split(Split::Train)?;
        let val = self.load_split(Split::Validation)?;

        // gather reconstruction images by model
        let recon_dir = self.recon_dir();
        let mut by_model: BTreeMap<String, Vec<(String, u8, u64, PathBuf)>> = BTreeMap::new();
        if recon_dir.exists() {
            let entries = std::fs::read_dir(&recon_dir).map_err(|e| Error::io(&recon_dir, e))?;
            for entry in entries {
                let entry = entry.map_err(|e| Error::io(&recon_dir, e))?;
                let name = entry.file_name().to_string_lossy().into_owned();
                if let Some((model_id, attack_id, class, seed)) = data::decode_result_filename(&name)
                {
                    by_model
                        .entry(model_id)
                        .or_default()
                        .push((attack_id, class, seed, entry.path()));
                }
            }
        }

        let mut records: Vec<EvaluationRecord> = Vec::new();
        let mut aggregates: Vec<ModelAggregate> = Vec::new();

        // all model refs that need radius numbers: attacked ones plus any
        // declared model (the trade-off needs every point)
        let mut model_refs: Vec<String> = by_model.keys().cloned().collect();
        for m in &self.spec.models {
            if !model_refs.contains(&m.id) {
                model_refs.push(m.id.clone());
            }
            let early = m
                .early_checkpoint
                .or_else(|| resolve_preset(&m.preset).and_then(|p| p.early_checkpoint));
            if let Some(e) = early {
                let id = format!("{}-e{e}", m.id);
                if self.model_path(&id).exists() && !model_refs.contains(&id) {
                    model_refs.push(id);
                }
            }
        }
        model_refs.sort();

        for model_ref in &model_refs {
            if !self.model_path(model_ref).exists() {
                continue;
            }
            let mut model = self.load_model(model_ref)?;
            let index = FeatureIndex::build(&model, &train)?;

            let mut attack_ids: Vec<String> = Vec::new();
            if let Some(items) = by_model.get(model_ref) {
                for (attack_id, class, seed, png) in items {
                    let recon = data::load_image(png)?;
                    let q = model.penultimate_features(&recon);
                    let (idx, sim) = index.nearest(&q);
                    let sim = sim as f32;
                    let l2 = crate::metrics::privacy_loss_l2(&recon, &train.images[idx])?;
                    let stats = activation_statistics(&mut model, &recon, &train, *class)?;
                    records.push(EvaluationRecord {
                        model_id: model_ref.clone(),
                        attack_id: attack_id.clone(),
                        class_id: *class,
                        seed: *seed,
                        nearest_train_index: idx,
                        cosine_similarity: sim,
                        privacy_loss_l2: l2,
                        recon_activation: stats.recon_activation,
                        train_avg_activation: stats.train_avg_activation,
                    });
                    if !attack_ids.contains(attack_id) {
                        attack_ids.push(attack_id.clone());
                    }
                }
            }

            let n_probe = self.spec.metrics.radius_images.min(val.len());
            let radius = if n_probe > 0 {
                let report = adversarial_radius(
                    &model,
                    &val.images[..n_probe],
                    &val.labels[..n_probe],
                    &self.spec.metrics.radius,
                )?;
                let radius_path = self
                    .out_dir
                    .join("report")
                    .join(format!("radius-{model_ref}.json"));
                atomic_write(&radius_path, &serde_json::to_vec_pretty(&report)?)?;
                Some(report.mean_radius_l2)
            } else {
                None
            };

            for attack_id in attack_ids {
                let attack_cfg_hash = self
                    .spec
                    .attacks
                    .iter()
                    .find(|a| a.id == attack_id)
                    .map(|a| short_hash(&attack_fingerprint(a)))
                    .unwrap_or_default();
                aggregates.push(PrivacyReport::aggregate(
                    &records,
                    model_ref,
                    &attack_id,
                    &attack_cfg_hash,
                    radius,
                ));
            }
            if by_model.get(model_ref).is_none() {
                // keep the radius visible even for un-attacked models
                aggregates.push(ModelAggregate {
                    model_id: model_ref.clone(),
                    attack_id: String::new(),
                    attack_config_hash: String::new(),
                    avg_max_similarity: f32::NAN,
                    avg_privacy_loss_l2: f32::NAN,
                    adversarial_radius: radius,
                    records: 0,
                });
            }
        }

        let report = PrivacyReport {
            records,
            aggregates,
        };
        atomic_write(report_path, &serde_json::to_vec_pretty(&report)?)?;
        Ok(())
    }

    // ---- orchestration ---------------------------------------------------

    pub fn run(&mut self, opts: &RunOptions) -> Result<()> {
        let data_hash = self.stage_data()?;

        let mut train_hashes: BTreeMap<String, String> = BTreeMap::new();
        let models = self.spec.models.clone();
        for recipe in &models {
            let h = self.stage_train(recipe, &data_hash)?;
            train_hashes.insert(recipe.id.clone(), h);
        }
        if opts.depth == StageDepth::Train {
            return Ok(());
        }

        let attacks = self.spec.attacks.clone();
        let mut upstream: Vec<String> = train_hashes.values().cloned().collect();
        for attack in &attacks {
            let targets: Vec<String> = {
                let t = self.spec.attack_targets(attack);
                t.into_iter().map(String::from).collect()
            };
            for model_ref in targets {
                if parse_model_ref(&self.spec, &model_ref).is_none() {
                    return Err(Error::config(format!(
                        "attack {} references unknown model {model_ref}",
                        attack.id
                    )));
                }
                let base_hash = train_hashes
                    .get(model_ref.split("-e").next().unwrap_or(&model_ref))
                    .cloned()
                    .unwrap_or_default();
                let h = self.stage_attack(attack, &model_ref, &base_hash)?;
                upstream.push(h);
            }
        }
        if opts.depth == StageDepth::Attack {
            return Ok(());
        }

        let mh = self.stage_metrics(&upstream)?;
        if opts.depth == StageDepth::Evaluate {
            return Ok(());
        }

        super::report::stage_report(self, &mh)?;
        Ok(())
    }
}

/// The attack parameters that must match for cross-model comparisons
/// (everything except which models it runs on).
fn attack_fingerprint(a: &AttackSpec) -> AttackSpec {
    let mut f = a.clone();
    f.models = Vec::new();
    f
}

fn flatten_outputs(results: Vec<Result<Vec<PathBuf>>>) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// Run a full experiment from a spec.
pub fn run_experiment(spec: ExperimentSpec, opts: RunOptions) -> Result<Manifest> {
    let mut ctx = ExperimentContext::new(spec, &opts)?;
    ctx.run(&opts)?;
    Ok(ctx.manifest.clone())
}

// small helper: Option-like chaining on bool
trait AndThenOk {
    fn and_then_ok<T>(self, f: impl FnOnce() -> Option<T>) -> Option<T>;
}

impl AndThenOk for bool {
    fn and_then_ok<T>(self, f: impl FnOnce() -> Option<T>) -> Option<T> {
        if self {
            f()
        } else {
            None
        }
    }
}
