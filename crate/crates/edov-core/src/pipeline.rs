//! End-to-end pipeline: mark, train teacher, build bank, curate, generate
//! pool/chain, distill, verify, report — driven by one TOML config with
//! content-hash stage caching so reruns skip completed work.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::curation::{
    assign_from_bank, build_feature_bank, class_prototypes, compute_digests, curate_transfer_set,
    DescriptionSet, FeatureBank,
};
use crate::data::{self, DatasetFormat, LabeledDataset};
use crate::distill::{
    build_perturbation_pool, distill_selective, search_corruption_chain, CorruptionChain, GaConfig,
    PerturbationPool, PoolGenConfig, SktConfig, DEFAULT_REGISTRY,
};
use crate::dov::{
    self, DovMethod, FingerprintOutcome, MarkedDataset, TriggerPattern, VerificationMaterials,
};
use crate::embed::{EmbeddingProvider, FileProvider, ProjectionProvider};
use crate::error::{Error, Result};
use crate::model::{
    checkpoint::{load_checkpoint, save_checkpoint},
    train_classifier, Classifier, TrainConfig,
};
use crate::stats::VerificationReport;
use crate::synth;

// ---------------------------------------------------------------------------
// Configuration sections. Defaults are the desk-rig calibration; files only
// override what they need.
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    /// "synthetic", "packed", or "folder"
    pub source: String,
    pub train_path: Option<PathBuf>,
    pub test_path: Option<PathBuf>,
    pub synthetic_train: usize,
    pub synthetic_test: usize,
    pub seed: u64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        DatasetSection {
            source: "synthetic".into(),
            train_path: None,
            test_path: None,
            synthetic_train: 10_000,
            synthetic_test: 2_000,
            seed: 11,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct GallerySection {
    pub source: String,
    pub path: Option<PathBuf>,
    pub synthetic_size: usize,
    pub seed: u64,
}

impl Default for GallerySection {
    fn default() -> Self {
        GallerySection {
            source: "synthetic".into(),
            path: None,
            synthetic_size: 20_000,
            seed: 22,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DescriptionsSection {
    /// "builtin" (synthetic classes) or "file"
    pub source: String,
    pub path: Option<PathBuf>,
}

impl Default for DescriptionsSection {
    fn default() -> Self {
        DescriptionsSection {
            source: "builtin".into(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct EmbeddingSection {
    /// "projection" or "file"
    pub provider: String,
    pub dim: usize,
    pub seed: u64,
    pub path: Option<PathBuf>,
}

impl Default for EmbeddingSection {
    fn default() -> Self {
        EmbeddingSection {
            provider: "projection".into(),
            dim: 64,
            seed: 33,
            path: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DovSection {
    pub method: String,
    pub rate: f64,
    pub target_class: usize,
    pub trigger_size: usize,
    pub hue_shift: f32,
    pub blend_ratio: f32,
    pub probe_size: usize,
    pub seed: u64,
}

impl Default for DovSection {
    fn default() -> Self {
        DovSection {
            method: "badnets".into(),
            rate: 0.10,
            target_class: 0,
            trigger_size: 3,
            hue_shift: 90.0,
            blend_ratio: 0.9,
            probe_size: 100,
            seed: 44,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct DistillSection {
    pub tau: f32,
    pub op_probs: (f64, f64, f64),
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f32,
    pub seed: u64,
    pub student_init_seed: u64,
    pub quota_multiplier: f64,
}

impl Default for DistillSection {
    fn default() -> Self {
        DistillSection {
            tau: 1.0,
            op_probs: (0.5, 0.25, 0.25),
            epochs: 8,
            batch_size: 128,
            learning_rate: 0.05,
            seed: 55,
            student_init_seed: 56,
            quota_multiplier: 1.0,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct PoolSection {
    pub members: usize,
    pub iterations: usize,
    pub learning_rate: f32,
    pub scale: f32,
    pub reg: f32,
    pub batch_size: usize,
    pub batches_per_iter: usize,
    pub seed: u64,
}

impl Default for PoolSection {
    fn default() -> Self {
        PoolSection {
            members: 8,
            iterations: 2,
            learning_rate: 1.0,
            scale: 2.0,
            reg: 1e-3,
            batch_size: 128,
            batches_per_iter: 12,
            seed: 66,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ChainSection {
    pub population: usize,
    pub epochs: usize,
    pub chain_len: usize,
    pub mutation_rate: f64,
    pub tournament: usize,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for ChainSection {
    fn default() -> Self {
        ChainSection {
            population: 20,
            epochs: 10,
            chain_len: 3,
            mutation_rate: 0.25,
            tournament: 3,
            batch_size: 256,
            seed: 77,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub n_decoys: usize,
    /// Test-set subsample for the hypothesis-test probes.
    pub eval_samples: usize,
    pub seed: u64,
    /// Also profile train/test loss along the teacher-student parameter
    /// path (adds eleven interpolated evaluations).
    pub loss_barrier: bool,
    /// Sample caps for the barrier profile.
    pub barrier_train_samples: usize,
    pub barrier_test_samples: usize,
}

impl Default for VerifySection {
    fn default() -> Self {
        VerifySection {
            n_decoys: 16,
            eval_samples: 500,
            seed: 88,
            loss_barrier: false,
            barrier_train_samples: 1500,
            barrier_test_samples: 800,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dataset: DatasetSection,
    pub gallery: GallerySection,
    pub descriptions: DescriptionsSection,
    pub embedding: EmbeddingSection,
    pub dov: DovSection,
    pub train: TrainConfig,
    pub distill: DistillSection,
    pub pool: PoolSection,
    pub chain: ChainSection,
    pub verify: VerifySection,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("bad config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn validate(&self) -> Result<()> {
        DovMethod::parse(&self.dov.method)?;
        match self.dataset.source.as_str() {
            "synthetic" => {}
            "packed" | "folder" => {
                for p in [&self.dataset.train_path, &self.dataset.test_path] {
                    match p {
                        Some(p) if p.exists() => {}
                        Some(p) => return Err(Error::Config(format!("missing {}", p.display()))),
                        None => {
                            return Err(Error::Config(
                                "packed/folder dataset needs train_path and test_path".into(),
                            ))
                        }
                    }
                }
            }
            other => return Err(Error::Config(format!("unknown dataset source {other:?}"))),
        }
        match self.gallery.source.as_str() {
            "synthetic" => {}
            "packed" => match &self.gallery.path {
                Some(p) if p.exists() => {}
                Some(p) => return Err(Error::Config(format!("missing {}", p.display()))),
                None => return Err(Error::Config("packed gallery needs a path".into())),
            },
            other => return Err(Error::Config(format!("unknown gallery source {other:?}"))),
        }
        match self.descriptions.source.as_str() {
            "builtin" => {}
            "file" => match &self.descriptions.path {
                Some(p) if p.exists() => {}
                _ => return Err(Error::Config("description file missing".into())),
            },
            other => {
                return Err(Error::Config(format!(
                    "unknown descriptions source {other:?}"
                )))
            }
        }
        match self.embedding.provider.as_str() {
            "projection" => {}
            "file" => match &self.embedding.path {
                Some(p) if p.exists() => {}
                _ => return Err(Error::Config("embedding file missing".into())),
            },
            other => return Err(Error::Config(format!("unknown provider {other:?}"))),
        }
        if !(self.dov.rate > 0.0 && self.dov.rate <= 1.0) {
            return Err(Error::Config("dov rate must lie in (0,1]".into()));
        }
        Ok(())
    }

    /// Shift every stage seed by a fixed offset (CLI --seed override).
    pub fn override_seed(&mut self, seed: u64) {
        self.dataset.seed = seed;
        self.gallery.seed = seed.wrapping_add(1);
        self.embedding.seed = seed.wrapping_add(2);
        self.dov.seed = seed.wrapping_add(3);
        self.train.seed = seed.wrapping_add(4);
        self.distill.seed = seed.wrapping_add(5);
        self.distill.student_init_seed = seed.wrapping_add(6);
        self.pool.seed = seed.wrapping_add(7);
        self.chain.seed = seed.wrapping_add(8);
        self.verify.seed = seed.wrapping_add(9);
    }
}

// ---------------------------------------------------------------------------
// Manifest
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct StageRecord {
    pub name: String,
    pub cache_key: String,
    pub artifacts: Vec<PathBuf>,
    pub cached: bool,
    pub seconds: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default, PartialEq)]
pub struct RunManifest {
    pub run_id: String,
    pub config_digest: String,
    pub stages: Vec<StageRecord>,
    pub warnings: Vec<String>,
    pub teacher_accuracy: Option<f64>,
    pub student_accuracy: Option<f64>,
    pub teacher_report: Option<VerificationReport>,
    pub student_report: Option<VerificationReport>,
    pub teacher_loss_ratio: Option<f64>,
    pub student_loss_ratio: Option<f64>,
    pub loss_barrier: Option<crate::stats::LossBarrierProfile>,
    pub finished: bool,
}

impl RunManifest {
    pub fn save(&self, out: &Path) -> Result<()> {
        atomic_write(&out.join("manifest.json"), &serde_json::to_vec_pretty(self)?)
    }

    pub fn load(out: &Path) -> Result<Self> {
        let path = out.join("manifest.json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

fn section_digest<T: Serialize>(parts: &[&T]) -> String {
    let mut h = Sha256::new();
    for p in parts {
        h.update(serde_json::to_vec(p).expect("config serializes"));
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

/// Write-temp-then-rename so partially written artifacts never count.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Pipeline stages
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Data,
    Mark,
    Teacher,
    Bank,
    Curate,
    Pool,
    Chain,
    Distill,
    Verify,
}

impl Stage {
    pub fn parse(s: &str) -> Result<Stage> {
        Ok(match s {
            "data" => Stage::Data,
            "mark" => Stage::Mark,
            "teacher" => Stage::Teacher,
            "bank" => Stage::Bank,
            "curate" => Stage::Curate,
            "pool" => Stage::Pool,
            "chain" => Stage::Chain,
            "distill" => Stage::Distill,
            "verify" => Stage::Verify,
            other => return Err(Error::Config(format!("unknown stage {other:?}"))),
        })
    }
}

struct StageRunner<'a> {
    out: &'a Path,
    force: bool,
    manifest: RunManifest,
}

impl<'a> StageRunner<'a> {
    fn run<T>(
        &mut self,
        name: &str,
        key: &str,
        artifacts: &[PathBuf],
        reload: impl FnOnce() -> Result<T>,
        rebuild: impl FnOnce() -> Result<T>,
    ) -> Result<T> {
        let key_path = self.out.join(format!("stage_{name}.key"));
        let start = Instant::now();
        let fresh = !self.force
            && std::fs::read_to_string(&key_path)
                .map(|k| k == key)
                .unwrap_or(false)
            && artifacts.iter().all(|a| a.exists());
        let (value, cached) = if fresh {
            match reload() {
                Ok(v) => (v, true),
                // Unreadable artifacts fall back to a rebuild.
                Err(_) => (rebuild().map_err(|e| e.in_stage(name))?, false),
            }
        } else {
            let v = rebuild().map_err(|e| e.in_stage(name))?;
            (v, false)
        };
        if !cached {
            atomic_write(&key_path, key.as_bytes())?;
        }
        self.manifest.stages.push(StageRecord {
            name: name.to_string(),
            cache_key: key.to_string(),
            artifacts: artifacts.to_vec(),
            cached,
            seconds: start.elapsed().as_secs_f64(),
        });
        Ok(value)
    }
}

fn build_provider(cfg: &ExperimentConfig, shape: (usize, usize, usize)) -> Result<Box<dyn EmbeddingProvider>> {
    match cfg.embedding.provider.as_str() {
        "projection" => Ok(Box::new(ProjectionProvider::new(
            shape,
            cfg.embedding.dim,
            cfg.embedding.seed,
        ))),
        "file" => Ok(Box::new(FileProvider::load(
            cfg.embedding.path.as_ref().unwrap(),
        )?)),
        other => Err(Error::Config(format!("unknown provider {other:?}"))),
    }
}

pub struct PipelineOutput {
    pub manifest: RunManifest,
}

/// Execute the pipeline up to `stop` (inclusive; None = all stages).
/// Completed stages with matching cache keys reload instead of recomputing.
pub fn run_pipeline(
    cfg: &ExperimentConfig,
    out: &Path,
    force: bool,
    stop: Option<Stage>,
) -> Result<RunManifest> {
    cfg.validate()?;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let config_digest = section_digest(&[cfg]);
    let mut runner = StageRunner {
        out,
        force,
        manifest: RunManifest {
            run_id: config_digest.chars().take(16).collect(),
            config_digest: config_digest.clone(),
            ..RunManifest::default()
        },
    };
    let result = drive(cfg, out, &mut runner, stop);
    let mut manifest = runner.manifest;
    match result {
        Ok(done) => {
            manifest.finished = done;
            manifest.save(out)?;
            Ok(manifest)
        }
        Err(e) => {
            // Persist the partial manifest before surfacing the failure.
            let _ = manifest.save(out);
            Err(e)
        }
    }
}

struct DataArtifacts {
    train: LabeledDataset,
    test: LabeledDataset,
    gallery: LabeledDataset,
    descriptions: DescriptionSet,
}

fn drive(
    cfg: &ExperimentConfig,
    out: &Path,
    runner: &mut StageRunner,
    stop: Option<Stage>,
) -> Result<bool> {
    let stop_at = |s: Stage| stop.map(|limit| s > limit).unwrap_or(false);

    // --- data ------------------------------------------------------------
    let data_key = section_digest(&[&serde_json::json!({
        "dataset": cfg.dataset,
        "gallery": cfg.gallery,
        "descriptions": cfg.descriptions,
    })]);
    let train_path = out.join("train.bin");
    let test_path = out.join("test.bin");
    let gallery_path = out.join("gallery.bin");
    let desc_path = out.join("descriptions.json");
    let data = runner.run(
        "data",
        &data_key,
        &[
            train_path.clone(),
            test_path.clone(),
            gallery_path.clone(),
            desc_path.clone(),
        ],
        || {
            Ok(DataArtifacts {
                train: data::load_dataset(&train_path, DatasetFormat::PackedBinary)?,
                test: data::load_dataset(&test_path, DatasetFormat::PackedBinary)?,
                gallery: data::load_dataset(&gallery_path, DatasetFormat::PackedBinary)?,
                descriptions: DescriptionSet::load(&desc_path)?,
            })
        },
        || {
            let (train, test) = match cfg.dataset.source.as_str() {
                "synthetic" => {
                    let train =
                        synth::make_dataset(cfg.dataset.synthetic_train, cfg.dataset.seed, 0);
                    let test = synth::make_dataset(
                        cfg.dataset.synthetic_test,
                        cfg.dataset.seed.wrapping_add(1),
                        cfg.dataset.synthetic_train as u64,
                    );
                    (train, test)
                }
                "packed" => (
                    data::load_dataset(
                        cfg.dataset.train_path.as_ref().unwrap(),
                        DatasetFormat::PackedBinary,
                    )?,
                    data::load_dataset(
                        cfg.dataset.test_path.as_ref().unwrap(),
                        DatasetFormat::PackedBinary,
                    )?,
                ),
                "folder" => (
                    data::load_dataset(
                        cfg.dataset.train_path.as_ref().unwrap(),
                        DatasetFormat::FolderPerClass,
                    )?,
                    data::load_dataset(
                        cfg.dataset.test_path.as_ref().unwrap(),
                        DatasetFormat::FolderPerClass,
                    )?,
                ),
                _ => unreachable!("validated"),
            };
            let gallery = match cfg.gallery.source.as_str() {
                "synthetic" => synth::make_gallery(cfg.gallery.synthetic_size, cfg.gallery.seed),
                "packed" => data::load_dataset(
                    cfg.gallery.path.as_ref().unwrap(),
                    DatasetFormat::PackedBinary,
                )?,
                _ => unreachable!("validated"),
            };
            let descriptions = match cfg.descriptions.source.as_str() {
                "builtin" => DescriptionSet(synth::default_descriptions()),
                "file" => DescriptionSet::load(cfg.descriptions.path.as_ref().unwrap())?,
                _ => unreachable!("validated"),
            };
            data::save_packed(&train, &train_path)?;
            data::save_packed(&test, &test_path)?;
            data::save_packed(&gallery, &gallery_path)?;
            descriptions.save(&desc_path)?;
            Ok(DataArtifacts {
                train,
                test,
                gallery,
                descriptions,
            })
        },
    )?;
    if stop_at(Stage::Mark) {
        return Ok(false);
    }

    // --- mark ------------------------------------------------------------
    let method = DovMethod::parse(&cfg.dov.method)?;
    let mark_key = section_digest(&[&serde_json::json!({
        "data": data_key, "dov": cfg.dov,
    })]);
    let marked_path = out.join("marked.bin");
    let materials_path = out.join("materials.json");
    let marked = runner.run(
        "mark",
        &mark_key,
        &[marked_path.clone(), materials_path.clone()],
        || {
            let dataset = data::load_dataset(&marked_path, DatasetFormat::PackedBinary)?;
            let materials = VerificationMaterials::from_json(
                &std::fs::read_to_string(&materials_path)
                    .map_err(|e| Error::io(&materials_path, e))?,
            )?;
            Ok(MarkedDataset { dataset, materials })
        },
        || {
            let marked = mark_dataset(cfg, method, &data.train, &data.test, &data.gallery)?;
            data::save_packed(&marked.dataset, &marked_path)?;
            atomic_write(&materials_path, marked.materials.to_json()?.as_bytes())?;
            Ok(marked)
        },
    )?;
    if stop_at(Stage::Teacher) {
        return Ok(false);
    }

    // --- teacher ---------------------------------------------------------
    let teacher_key = section_digest(&[&serde_json::json!({
        "mark": mark_key, "train": cfg.train,
    })]);
    let teacher_path = out.join("teacher.ckpt");
    let teacher = runner.run(
        "teacher",
        &teacher_key,
        std::slice::from_ref(&teacher_path),
        || Ok(load_checkpoint(&teacher_path)?.0),
        || {
            let t = train_classifier(&marked.dataset, &cfg.train, cfg.train.seed)?;
            save_checkpoint(&t, &serde_json::to_string(&cfg.train)?, &teacher_path)?;
            Ok(t)
        },
    )?;
    if stop_at(Stage::Bank) {
        return Ok(false);
    }

    // --- bank (keyed only on gallery + embedding config) ------------------
    let provider = build_provider(cfg, data.gallery.shape())?;
    let bank_key = section_digest(&[&serde_json::json!({
        "gallery": cfg.gallery, "embedding": cfg.embedding,
    })]);
    let bank_path = out.join("bank.bin");
    let bank = runner.run(
        "bank",
        &bank_key,
        std::slice::from_ref(&bank_path),
        || FeatureBank::load(&bank_path),
        || build_feature_bank(provider.as_ref(), &data.gallery, &bank_path),
    )?;
    if stop_at(Stage::Curate) {
        return Ok(false);
    }

    // --- curate ------------------------------------------------------------
    let curate_key = section_digest(&[&serde_json::json!({
        "bank": bank_key, "teacher": teacher_key, "quota_multiplier": cfg.distill.quota_multiplier,
    })]);
    let transfer_path = out.join("transfer.bin");
    let shortfall_path = out.join("curation.json");
    let transfer = runner.run(
        "curate",
        &curate_key,
        &[transfer_path.clone(), shortfall_path.clone()],
        || data::load_dataset(&transfer_path, DatasetFormat::PackedBinary),
        || {
            let prototypes = class_prototypes(
                provider.as_ref(),
                &data.descriptions,
                &marked.dataset.class_names,
            )?;
            let bins = assign_from_bank(&bank, &prototypes);
            let digest = compute_digests(provider.as_ref(), &marked)?;
            let quotas: Vec<usize> = marked
                .dataset
                .per_class_indices()
                .iter()
                .map(|b| ((b.len() as f64) * cfg.distill.quota_multiplier).round() as usize)
                .collect();
            let ts = curate_transfer_set(
                &bins,
                &digest,
                &teacher,
                &data.gallery,
                &bank,
                &quotas,
            )?;
            let materialized = ts.materialize(&data.gallery, &marked.dataset.class_names)?;
            data::save_packed(&materialized, &transfer_path)?;
            atomic_write(
                &shortfall_path,
                &serde_json::to_vec_pretty(&serde_json::json!({
                    "total": ts.total(),
                    "shortfalls": ts.shortfalls(),
                }))?,
            )?;
            Ok(materialized)
        },
    )?;
    // Surface shortfall warnings on every run, cached or not.
    if let Ok(bytes) = std::fs::read(&shortfall_path) {
        if let Ok(v) = serde_json::from_slice::<serde_json::Value>(&bytes) {
            if let Some(shortfalls) = v.get("shortfalls").and_then(|s| s.as_array()) {
                for s in shortfalls {
                    runner
                        .manifest
                        .warnings
                        .push(format!("curation shortfall {s}"));
                }
            }
        }
    }
    if stop_at(Stage::Pool) {
        return Ok(false);
    }

    // --- pool --------------------------------------------------------------
    let pool_key = section_digest(&[&serde_json::json!({
        "teacher": teacher_key, "pool": cfg.pool,
    })]);
    let pool_path = out.join("pool.bin");
    let pool = runner.run(
        "pool",
        &pool_key,
        std::slice::from_ref(&pool_path),
        || PerturbationPool::load(&pool_path),
        || {
            let gen_cfg = PoolGenConfig {
                iterations: cfg.pool.iterations,
                learning_rate: cfg.pool.learning_rate,
                scale: cfg.pool.scale,
                reg: cfg.pool.reg,
                batch_size: cfg.pool.batch_size,
                batches_per_iter: Some(cfg.pool.batches_per_iter),
                ..PoolGenConfig::default()
            };
            let p = build_perturbation_pool(&teacher, &marked, cfg.pool.members, &gen_cfg, cfg.pool.seed)?;
            p.save(&pool_path)?;
            Ok(p)
        },
    )?;
    if stop_at(Stage::Chain) {
        return Ok(false);
    }

    // --- chain -------------------------------------------------------------
    let chain_key = section_digest(&[&serde_json::json!({
        "teacher": teacher_key, "chain": cfg.chain,
    })]);
    let chain_path = out.join("chain.json");
    let chain = runner.run(
        "chain",
        &chain_key,
        std::slice::from_ref(&chain_path),
        || CorruptionChain::load(&chain_path),
        || {
            let ga = GaConfig {
                population: cfg.chain.population,
                epochs: cfg.chain.epochs,
                chain_len: cfg.chain.chain_len,
                mutation_rate: cfg.chain.mutation_rate,
                tournament: cfg.chain.tournament,
                batch_size: cfg.chain.batch_size,
            };
            let c = search_corruption_chain(&teacher, &marked, &DEFAULT_REGISTRY, &ga, cfg.chain.seed)?;
            c.save(&chain_path)?;
            Ok(c)
        },
    )?;
    if stop_at(Stage::Distill) {
        return Ok(false);
    }

    // --- distill -----------------------------------------------------------
    let distill_key = section_digest(&[&serde_json::json!({
        "curate": curate_key, "pool": pool_key, "chain": chain_key, "distill": cfg.distill,
    })]);
    let student_path = out.join("student.ckpt");
    let student = runner.run(
        "distill",
        &distill_key,
        std::slice::from_ref(&student_path),
        || Ok(load_checkpoint(&student_path)?.0),
        || {
            let (c, _, _) = transfer.shape();
            let student_init = Classifier::init(
                &teacher.architecture_id,
                teacher.k,
                c,
                cfg.distill.student_init_seed,
            )?;
            let skt = SktConfig {
                tau: cfg.distill.tau,
                op_probs: cfg.distill.op_probs,
                epochs: cfg.distill.epochs,
                batch_size: cfg.distill.batch_size,
                learning_rate: cfg.distill.learning_rate,
                seed: cfg.distill.seed,
            };
            let s = distill_selective(&teacher, &student_init, &transfer, &pool, &chain, &skt)?;
            save_checkpoint(&s, &serde_json::to_string(&skt)?, &student_path)?;
            Ok(s)
        },
    )?;
    if stop_at(Stage::Verify) {
        return Ok(false);
    }

    // --- verify ------------------------------------------------------------
    let verify_key = section_digest(&[&serde_json::json!({
        "teacher": teacher_key, "distill": distill_key, "verify": cfg.verify,
    })]);
    let teacher_report_path = out.join("teacher_report.json");
    let student_report_path = out.join("student_report.json");
    let barrier_path = out.join("barrier.json");
    let mut artifacts = vec![teacher_report_path.clone(), student_report_path.clone()];
    if cfg.verify.loss_barrier {
        artifacts.push(barrier_path.clone());
    }
    let reports = runner.run(
        "verify",
        &verify_key,
        &artifacts,
        || {
            let t: VerifyRecord = serde_json::from_slice(
                &std::fs::read(&teacher_report_path)
                    .map_err(|e| Error::io(&teacher_report_path, e))?,
            )?;
            let s: VerifyRecord = serde_json::from_slice(
                &std::fs::read(&student_report_path)
                    .map_err(|e| Error::io(&student_report_path, e))?,
            )?;
            let barrier = if cfg.verify.loss_barrier {
                Some(serde_json::from_slice(
                    &std::fs::read(&barrier_path).map_err(|e| Error::io(&barrier_path, e))?,
                )?)
            } else {
                None
            };
            Ok((t, s, barrier))
        },
        || {
            let t = verify_model(cfg, method, &teacher, &marked, &data, &config_key_for(cfg))?;
            let s = verify_model(cfg, method, &student, &marked, &data, &config_key_for(cfg))?;
            atomic_write(&teacher_report_path, &serde_json::to_vec_pretty(&t)?)?;
            atomic_write(&student_report_path, &serde_json::to_vec_pretty(&s)?)?;
            let barrier = if cfg.verify.loss_barrier {
                let grid: Vec<f64> = (0..=10).map(|i| i as f64 / 10.0).collect();
                let train_sub = subsample(
                    &marked.dataset,
                    cfg.verify.barrier_train_samples,
                    cfg.verify.seed,
                );
                let test_sub =
                    subsample(&data.test, cfg.verify.barrier_test_samples, cfg.verify.seed);
                let profile =
                    crate::stats::loss_barrier(&teacher, &student, &train_sub, &test_sub, &grid)?;
                atomic_write(&barrier_path, &serde_json::to_vec_pretty(&profile)?)?;
                Some(profile)
            } else {
                None
            };
            Ok((t, s, barrier))
        },
    )?;

    let (teacher_rec, student_rec, barrier) = reports;
    runner.manifest.teacher_accuracy = Some(teacher_rec.accuracy);
    runner.manifest.student_accuracy = Some(student_rec.accuracy);
    runner.manifest.teacher_loss_ratio = teacher_rec.loss_ratio;
    runner.manifest.student_loss_ratio = student_rec.loss_ratio;
    runner.manifest.teacher_report = Some(teacher_rec.report);
    runner.manifest.student_report = Some(student_rec.report);
    runner.manifest.loss_barrier = barrier;
    Ok(true)
}

fn config_key_for(cfg: &ExperimentConfig) -> String {
    section_digest(&[cfg]).chars().take(16).collect()
}

fn mark_dataset(
    cfg: &ExperimentConfig,
    method: DovMethod,
    train: &LabeledDataset,
    test: &LabeledDataset,
    gallery: &LabeledDataset,
) -> Result<MarkedDataset> {
    let d = &cfg.dov;
    match method {
        DovMethod::Badnets => {
            let (c, h, w) = train.shape();
            let trig = TriggerPattern::checkerboard(
                c,
                d.trigger_size,
                (h - d.trigger_size, w - d.trigger_size),
            );
            dov::embed_badnets(train, &trig, d.target_class, d.rate, d.seed)
        }
        DovMethod::Ubw => {
            let (c, h, w) = train.shape();
            let trig = TriggerPattern::checkerboard(
                c,
                d.trigger_size,
                (h - d.trigger_size, w - d.trigger_size),
            );
            dov::embed_ubw(train, &trig, d.rate, d.seed)
        }
        DovMethod::Anw => dov::embed_anw(train, d.hue_shift, d.rate, d.seed),
        DovMethod::Isotope => {
            let _ = gallery;
            // A dedicated high-frequency key; decoys come from the gallery.
            let key = synth::make_key_image(d.seed);
            dov::embed_isotope(train, &key, d.blend_ratio, d.rate, d.seed)
        }
        DovMethod::Fingerprint => {
            let materials = dov::fingerprint_materials(train, test, d.probe_size, d.seed)?;
            Ok(MarkedDataset {
                dataset: train.clone(),
                materials,
            })
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifyRecord {
    pub accuracy: f64,
    pub report: VerificationReport,
    pub loss_ratio: Option<f64>,
}

fn verify_model(
    cfg: &ExperimentConfig,
    method: DovMethod,
    model: &Classifier,
    marked: &MarkedDataset,
    data: &DataArtifacts,
    run_id: &str,
) -> Result<VerifyRecord> {
    let accuracy = model.accuracy(&data.test);
    let eval = subsample(&data.test, cfg.verify.eval_samples, cfg.verify.seed);
    let (mut report, loss_ratio) = match method {
        DovMethod::Badnets | DovMethod::Ubw => {
            (dov::verify_backdoor(model, &data.test, &marked.materials)?, None)
        }
        DovMethod::Anw | DovMethod::Isotope => (
            dov::verify_nonpoisoning(
                model,
                &eval,
                &marked.materials,
                &data.gallery,
                cfg.verify.n_decoys,
                cfg.verify.seed,
            )?,
            None,
        ),
        DovMethod::Fingerprint => {
            let train_probe = probe_subset(&marked.dataset, &marked.materials.train_probe_ids)?;
            let heldout_probe = probe_subset(&data.test, &marked.materials.heldout_probe_ids)?;
            let FingerprintOutcome { report, loss_ratio } =
                dov::verify_fingerprint(model, &train_probe, &heldout_probe)?;
            (report, Some(loss_ratio))
        }
    };
    report.run_id = run_id.to_string();
    report.config_digest = run_id.to_string();
    report.seeds = vec![cfg.verify.seed];
    Ok(VerifyRecord {
        accuracy,
        report,
        loss_ratio,
    })
}

fn subsample(ds: &LabeledDataset, n: usize, seed: u64) -> LabeledDataset {
    if n >= ds.len() {
        return ds.clone();
    }
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let mut picks = rand::seq::index::sample(&mut rng, ds.len(), n).into_vec();
    picks.sort_unstable();
    ds.subset(&picks)
}

fn probe_subset(ds: &LabeledDataset, ids: &BTreeSet<u64>) -> Result<LabeledDataset> {
    let positions: Vec<usize> = ds
        .ids
        .iter()
        .enumerate()
        .filter(|(_, id)| ids.contains(id))
        .map(|(i, _)| i)
        .collect();
    if positions.len() != ids.len() {
        return Err(Error::Precondition("probe ids missing from dataset".into()));
    }
    Ok(ds.subset(&positions))
}

// ---------------------------------------------------------------------------
// Reporting
// ---------------------------------------------------------------------------

/// Render the manifest as a table row plus machine JSON.
pub fn report(manifest: &RunManifest) -> Result<(String, serde_json::Value)> {
    let (t, s) = match (&manifest.teacher_report, &manifest.student_report) {
        (Some(t), Some(s)) => (t, s),
        _ => {
            return Err(Error::Precondition(
                "manifest incomplete: verification reports missing".into(),
            ))
        }
    };
    let metric_name = match t.metric_kind {
        crate::stats::MetricKind::Vsr => "VSR",
        crate::stats::MetricKind::PValue => "p-value",
    };
    let fmt_metric = |v: f64| -> String {
        match t.metric_kind {
            crate::stats::MetricKind::Vsr => format!("{:.2}%", v * 100.0),
            crate::stats::MetricKind::PValue => format!("{v:.3e}"),
        }
    };
    let mut human = String::new();
    human.push_str(&format!(
        "method={} run={}\n",
        t.method, manifest.run_id
    ));
    human.push_str(&format!(
        "{:<10} {:>9} {:>12} {:>9}\n",
        "", "ACC", metric_name, "detected"
    ));
    human.push_str(&format!(
        "{:<10} {:>8.2}% {:>12} {:>9}\n",
        "vanilla",
        manifest.teacher_accuracy.unwrap_or(f64::NAN) * 100.0,
        fmt_metric(t.value),
        t.detected
    ));
    human.push_str(&format!(
        "{:<10} {:>8.2}% {:>12} {:>9}\n",
        "evasion",
        manifest.student_accuracy.unwrap_or(f64::NAN) * 100.0,
        fmt_metric(s.value),
        s.detected
    ));
    for w in &manifest.warnings {
        human.push_str(&format!("warning: {w}\n"));
    }
    if let Some(b) = &manifest.loss_barrier {
        let peak = b.interior_train_peak();
        human.push_str(&format!(
            "loss barrier: interior train peak {peak:.3} over endpoints ({:.3}, {:.3})\n",
            b.train_losses.first().copied().unwrap_or(f64::NAN),
            b.train_losses.last().copied().unwrap_or(f64::NAN),
        ));
    }
    let json = serde_json::to_value(manifest)?;
    Ok((human, json))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_roundtrip_and_validation() {
        let cfg = ExperimentConfig::default();
        let text = toml::to_string(&cfg).unwrap();
        let back = ExperimentConfig::from_toml(&text).unwrap();
        assert_eq!(back, cfg);
        let bad = ExperimentConfig::from_toml("[dov]\nmethod = \"nope\"\n");
        assert!(bad.is_err());
    }

    #[test]
    fn unknown_method_fails_before_any_work() {
        let mut cfg = ExperimentConfig::default();
        cfg.dov.method = "mystery".into();
        let dir = tempfile::tempdir().unwrap();
        let err = run_pipeline(&cfg, dir.path(), false, None).unwrap_err();
        assert!(matches!(err, Error::Config(_)));
        // No stage artifacts were produced.
        assert!(!dir.path().join("train.bin").exists());
    }

    #[test]
    fn report_requires_complete_manifest() {
        let manifest = RunManifest::default();
        assert!(report(&manifest).is_err());
    }

    #[test]
    fn report_json_roundtrips() {
        let mut manifest = RunManifest {
            run_id: "abc".into(),
            ..Default::default()
        };
        manifest.teacher_accuracy = Some(0.9);
        manifest.student_accuracy = Some(0.85);
        manifest.teacher_report = Some(VerificationReport::new(
            "badnets",
            crate::stats::MetricKind::Vsr,
            0.97,
            1800,
        ));
        manifest.student_report = Some(VerificationReport::new(
            "badnets",
            crate::stats::MetricKind::Vsr,
            0.04,
            1800,
        ));
        let (human, json) = report(&manifest).unwrap();
        assert!(human.contains("VSR"));
        let back: RunManifest = serde_json::from_value(json).unwrap();
        assert_eq!(back, manifest);
    }
}
