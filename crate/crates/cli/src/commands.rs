//! The experiment commands, usable as library calls and from the `caw` binary.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use caw_core::grid::BitGrid;
use caw_core::mask::{normalize_map, PrototypeMatrix};
use caw_core::metrics::{
    accuracy_f1, auc_of, concept_detection, concept_importance, latent_scores, ImportanceConfig,
    ImportanceEstimate, ImportanceReport,
};
use caw_core::nn::{
    init_main_net, pretrain_concept_net, resume, softmax_rows, warm_start, ConceptDataset,
    LabeledImages, LogRow, TinyNet, TrainedModel,
};
use caw_core::pnm::encode_pgm;
use caw_core::synth::images_to_tensor;
use caw_core::tensor::FeatureTensor;
use caw_core::Scalar;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, Progress};
use crate::config::ExperimentConfig;
use crate::dataset::{manifest_hash, read_image, read_mask, write_file, Dataset, SplitName};
use crate::error::CliError;

/// Scalar type used by the command-line pipeline.
pub type Real = f32;

pub const CONCEPT_CKPT: &str = "concept_net.ckpt";
pub const MODEL_CKPT: &str = "caw_model.ckpt";
pub const TRAIN_LOG: &str = "train_log.csv";
pub const METRICS_JSON: &str = "metrics.json";
pub const IMPORTANCE_JSON: &str = "importance.json";
pub const SWEEP_CSV: &str = "sweep.csv";
pub const EXPLAIN_JSON: &str = "explain.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenSummary {
    pub num_samples: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub manifest_sha256: String,
}

/// Writes a synthetic dataset for `cfg` into `out`.
pub fn gen_data(cfg: &ExperimentConfig, out: &Path) -> Result<GenSummary, CliError> {
    cfg.validate()?;
    let ds = Dataset::synthesize(&cfg.synth_spec(), cfg.data.num_samples, cfg.data.fractions)?;
    ds.write(out)?;
    Ok(GenSummary {
        num_samples: ds.samples.len(),
        train: ds.indices(SplitName::Train).len(),
        val: ds.indices(SplitName::Val).len(),
        test: ds.indices(SplitName::Test).len(),
        manifest_sha256: manifest_hash(out)?,
    })
}

/// Image tensor for the given sample indices.
pub fn image_tensor<T: Scalar>(ds: &Dataset, idx: &[usize]) -> FeatureTensor<T> {
    let images: Vec<_> = idx.iter().map(|&i| &ds.samples[i].image).collect();
    images_to_tensor(&images)
}

pub fn disease_set<T: Scalar>(ds: &Dataset, idx: &[usize]) -> LabeledImages<T> {
    LabeledImages {
        images: image_tensor(ds, idx),
        labels: idx.iter().map(|&i| ds.samples[i].disease).collect(),
    }
}

/// Concept dataset drawn from the training split: for each concept in turn, the
/// first `per_concept` training images containing it that are not yet chosen.
pub fn concept_indices(ds: &Dataset, per_concept: usize) -> Vec<usize> {
    let train = ds.indices(SplitName::Train);
    let mut chosen: Vec<usize> = Vec::new();
    for k in 0..ds.num_concepts() {
        let mut taken = 0;
        for &i in &train {
            if taken == per_concept {
                break;
            }
            if ds.samples[i].concepts[k] && !chosen.contains(&i) {
                chosen.push(i);
                taken += 1;
            }
        }
    }
    chosen
}

/// External feature-grid masks read from a directory laid out like the dataset.
pub fn lesion_masks(
    ds: &Dataset,
    idx: &[usize],
    dir: &Path,
) -> Result<Vec<Vec<BitGrid>>, CliError> {
    let size = ds.manifest.spec.image_size;
    let factor = 4;
    idx.iter()
        .map(|&i| {
            let entry = &ds.manifest.samples[i];
            entry
                .masks
                .iter()
                .map(|m| match m {
                    Some(p) => {
                        let mask = read_mask(&dir.join(p))?;
                        if mask.height != size || mask.width != size {
                            return Err(CliError::Data(format!(
                                "{p}: expected a {size}×{size} mask"
                            )));
                        }
                        Ok(mask.downsample_any(factor))
                    }
                    None => Ok(BitGrid::empty(size / factor, size / factor)),
                })
                .collect()
        })
        .collect()
}

pub fn concept_set<T: Scalar>(
    ds: &Dataset,
    per_concept: usize,
    lesion: Option<&Path>,
) -> Result<ConceptDataset<T>, CliError> {
    let idx = concept_indices(ds, per_concept);
    let mut set = ConceptDataset::new(
        image_tensor(ds, &idx),
        idx.iter()
            .map(|&i| ds.samples[i].concepts.clone())
            .collect(),
    )?;
    if let Some(dir) = lesion {
        set.external_masks = Some(lesion_masks(ds, &idx, dir)?);
    }
    Ok(set)
}

fn check_dataset(cfg: &ExperimentConfig, ds: &Dataset) -> Result<(), CliError> {
    let spec = &ds.manifest.spec;
    if spec.num_concepts != cfg.data.num_concepts || spec.image_size != cfg.data.image_size {
        return Err(CliError::Data(format!(
            "dataset has {} concepts at {}px but the config expects {} at {}px",
            spec.num_concepts, spec.image_size, cfg.data.num_concepts, cfg.data.image_size
        )));
    }
    Ok(())
}

/// Pretrains the concept classifier on the concept dataset of `ds`.
pub fn fit_concept_net<T: Scalar>(
    cfg: &ExperimentConfig,
    concepts: &ConceptDataset<T>,
) -> Result<(TinyNet<T>, PrototypeMatrix<T>), CliError> {
    Ok(pretrain_concept_net(
        concepts,
        &cfg.net_config(),
        &cfg.concept_train_config(),
    )?)
}

/// Trains (or continues) the main network in memory.
pub fn fit_model<T: Scalar>(
    cfg: &ExperimentConfig,
    ds: &Dataset,
    concepts: &ConceptDataset<T>,
    concept_net: &TinyNet<T>,
    start: Option<TrainedModel<T>>,
) -> Result<TrainedModel<T>, CliError> {
    let train_cfg = cfg.train_config();
    let model = match start {
        Some(m) => m,
        None => {
            let mut net = init_main_net(&cfg.net_config(), &train_cfg)?;
            if cfg.train.warm_start {
                warm_start(&mut net, concept_net)?;
            }
            TrainedModel::fresh(net)
        }
    };
    let prototypes = PrototypeMatrix::from_head(&concept_net.head)?;
    let disease = disease_set(ds, &ds.indices(SplitName::Train));
    Ok(resume(
        model,
        &disease,
        concepts,
        concept_net,
        &prototypes,
        &train_cfg,
    )?)
}

pub fn log_header() -> &'static str {
    "step,ce_loss,align_objective,ortho_residual\n"
}

pub fn log_rows(rows: &[LogRow]) -> String {
    let mut s = String::new();
    for r in rows {
        let obj = r.align_objective.map(|o| o.to_string()).unwrap_or_default();
        writeln!(s, "{},{},{},{}", r.step, r.ce_loss, obj, r.ortho_residual).expect("string write");
    }
    s
}

#[derive(Debug, Clone, Default)]
pub struct TrainOptions {
    /// Continue from this model checkpoint (the concept net is reloaded from the same directory).
    pub resume: Option<PathBuf>,
    /// Directory of external masks for the `lesion` mask mode.
    pub lesion: Option<PathBuf>,
}

#[derive(Debug, Clone)]
pub struct TrainSummary {
    pub concept_checkpoint: PathBuf,
    pub model_checkpoint: PathBuf,
    pub log: PathBuf,
    pub epochs_done: usize,
    pub steps_done: usize,
    pub final_loss: Option<f64>,
}

/// Pretrains the concept net (unless resuming), trains the model and writes checkpoints and the log.
pub fn train(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    opts: &TrainOptions,
) -> Result<TrainSummary, CliError> {
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    check_dataset(cfg, &ds)?;
    if cfg.train.mask_mode == caw_core::mask::MaskMode::Lesion && opts.lesion.is_none() {
        return Err(CliError::Usage(
            "mask mode lesion needs --lesion-masks <dir>".into(),
        ));
    }
    let concepts =
        concept_set::<Real>(&ds, cfg.concept.samples_per_concept, opts.lesion.as_deref())?;
    let concept_path = out.join(CONCEPT_CKPT);
    let model_path = out.join(MODEL_CKPT);
    let log_path = out.join(TRAIN_LOG);

    let (concept_net, start) = match &opts.resume {
        Some(ckpt_path) => {
            let ckpt = Checkpoint::load(ckpt_path)?;
            ckpt.check_architecture(cfg)?;
            let dir = ckpt_path.parent().unwrap_or(Path::new("."));
            let cnet = Checkpoint::load(&dir.join(CONCEPT_CKPT))?.to_net::<Real>()?;
            let p = ckpt.progress();
            let model = TrainedModel {
                net: ckpt.to_net()?,
                state: p.state,
                log: Vec::new(),
                mask_fallbacks: p.mask_fallbacks,
                last_objective: p.last_objective,
            };
            (cnet, Some(model))
        }
        None => (fit_concept_net(cfg, &concepts)?.0, None),
    };
    let resuming = start.is_some();
    let model = fit_model(cfg, &ds, &concepts, &concept_net, start)?;

    fs::create_dir_all(out).map_err(|e| CliError::io(out, e))?;
    Checkpoint::from_net(
        CheckpointKind::ConceptNet,
        &concept_net,
        cfg,
        &Progress::default(),
    )
    .save(&concept_path)?;
    let progress = Progress {
        state: model.state,
        last_objective: model.last_objective,
        mask_fallbacks: model.mask_fallbacks,
    };
    Checkpoint::from_net(CheckpointKind::Model, &model.net, cfg, &progress).save(&model_path)?;
    let mut log = if resuming && log_path.exists() {
        fs::read_to_string(&log_path).map_err(|e| CliError::io(&log_path, e))?
    } else {
        log_header().to_string()
    };
    log.push_str(&log_rows(&model.log));
    write_file(&log_path, log.as_bytes())?;
    Ok(TrainSummary {
        concept_checkpoint: concept_path,
        model_checkpoint: model_path,
        log: log_path,
        epochs_done: model.state.epochs_done,
        steps_done: model.state.steps_done,
        final_loss: model.log.last().map(|r| r.ce_loss),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptMetrics {
    pub id: usize,
    /// `null` when the test split lacks positives or negatives for the concept.
    pub auc: Option<f64>,
    pub ci: f64,
    pub ci_std_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_concept: Vec<ConceptMetrics>,
    pub mean_auc: f64,
    pub acc: f64,
    pub f1: f64,
    pub disease_auc: f64,
    pub seed: u64,
    pub config_hash: String,
}

/// Disease and concept metrics of `net` on the given split.
pub fn evaluate<T: Scalar>(
    cfg: &ExperimentConfig,
    net: &TinyNet<T>,
    ds: &Dataset,
    which: SplitName,
) -> Result<MetricsReport, CliError> {
    let idx = ds.indices(which);
    if idx.len() < 2 {
        return Err(CliError::Data(format!(
            "split {} has fewer than 2 images",
            which.dir()
        )));
    }
    let set = disease_set::<T>(ds, &idx);
    let concepts: Vec<Vec<bool>> = idx
        .iter()
        .map(|&i| ds.samples[i].concepts.clone())
        .collect();
    let k = ds.num_concepts();

    let mut margins = Vec::with_capacity(idx.len());
    for chunk in (0..idx.len()).collect::<Vec<_>>().chunks(256) {
        let logits = net.infer(&set.images.select(chunk))?.logits;
        let probs = softmax_rows(&logits);
        for r in 0..chunk.len() {
            margins.push(probs[(r, 1)].as_f64() - probs[(r, 0)].as_f64());
        }
    }
    let preds: Vec<usize> = margins.iter().map(|&m| usize::from(m > 0.0)).collect();
    let cls = accuracy_f1(&preds, &set.labels)?;
    let positives: Vec<bool> = set.labels.iter().map(|&y| y == 1).collect();
    let disease_auc = auc_of(&margins, &positives).unwrap_or(f64::NAN);

    let detection = concept_detection(net, &set.images, &concepts, k, cfg.eval.pool)?;
    let ic = ImportanceConfig {
        batch_size: cfg.eval.importance_batch,
        repeats: cfg.eval.importance_repeats,
        seed: cfg.seed,
    };
    let per_concept = (0..k)
        .map(|c| {
            let ci = concept_importance(net, &set.images, &set.labels, c, &ic)?;
            Ok(ConceptMetrics {
                id: c,
                auc: detection.per_concept[c],
                ci: ci.mean,
                ci_std_err: ci.std_err,
            })
        })
        .collect::<Result<Vec<_>, CliError>>()?;
    Ok(MetricsReport {
        per_concept,
        mean_auc: detection.mean,
        acc: cls.accuracy,
        f1: cls.macro_f1,
        disease_auc,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    })
}

pub fn to_json_line<S: Serialize>(value: &S) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("report serializes");
    s.push('\n');
    s
}

/// Evaluates a model checkpoint on the test split and writes `metrics.json`.
pub fn eval(
    cfg: &ExperimentConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<MetricsReport, CliError> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_architecture(cfg)?;
    let net = ckpt.to_net::<Real>()?;
    let ds = Dataset::load(data)?;
    check_dataset(cfg, &ds)?;
    let report = evaluate(cfg, &net, &ds, SplitName::Test)?;
    write_file(&out.join(METRICS_JSON), to_json_line(&report).as_bytes())?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub gamma: f64,
    pub disease_auc: f64,
    pub concept_auc: f64,
}

/// Retrains and aligns once per `γ` (sharing one concept net) and tabulates test-split AUCs.
pub fn sweep_threshold(
    cfg: &ExperimentConfig,
    data: &Path,
    out: &Path,
    gammas: &[f64],
) -> Result<Vec<SweepRow>, CliError> {
    if gammas.is_empty() {
        return Err(CliError::Usage(
            "sweep-threshold needs at least one gamma".into(),
        ));
    }
    cfg.validate()?;
    let ds = Dataset::load(data)?;
    check_dataset(cfg, &ds)?;
    let concepts = concept_set::<Real>(&ds, cfg.concept.samples_per_concept, None)?;
    let (concept_net, _) = fit_concept_net(cfg, &concepts)?;
    let mut rows = Vec::with_capacity(gammas.len());
    for &gamma in gammas {
        let mut c = cfg.clone();
        c.train.gamma = gamma;
        c.validate()?;
        let model = fit_model(&c, &ds, &concepts, &concept_net, None)?;
        let report = evaluate(&c, &model.net, &ds, SplitName::Test)?;
        rows.push(SweepRow {
            gamma,
            disease_auc: report.disease_auc,
            concept_auc: report.mean_auc,
        });
    }
    let mut csv = String::from("gamma,disease_auc,concept_auc\n");
    for r in &rows {
        writeln!(csv, "{},{},{}", r.gamma, r.disease_auc, r.concept_auc).expect("string write");
    }
    write_file(&out.join(SWEEP_CSV), csv.as_bytes())?;
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceOutput {
    pub per_concept: Vec<ImportanceEstimate>,
    pub rank: Vec<usize>,
    pub seed: u64,
    pub config_hash: String,
}

pub fn importance_of<T: Scalar>(
    cfg: &ExperimentConfig,
    net: &TinyNet<T>,
    ds: &Dataset,
    which: SplitName,
) -> Result<ImportanceReport, CliError> {
    let set = disease_set::<T>(ds, &ds.indices(which));
    let ic = ImportanceConfig {
        batch_size: cfg.eval.importance_batch,
        repeats: cfg.eval.importance_repeats,
        seed: cfg.seed,
    };
    Ok(caw_core::metrics::importance_report(
        net,
        &set.images,
        &set.labels,
        ds.num_concepts(),
        &ic,
    )?)
}

/// Permutation concept importance on the test split, written to `importance.json`.
pub fn importance(
    cfg: &ExperimentConfig,
    data: &Path,
    checkpoint: &Path,
    out: &Path,
) -> Result<ImportanceOutput, CliError> {
    cfg.validate()?;
    let ckpt = Checkpoint::load(checkpoint)?;
    ckpt.check_architecture(cfg)?;
    let net = ckpt.to_net::<Real>()?;
    let ds = Dataset::load(data)?;
    check_dataset(cfg, &ds)?;
    let report = importance_of(cfg, &net, &ds, SplitName::Test)?;
    let output = ImportanceOutput {
        per_concept: report.per_concept,
        rank: report.rank,
        seed: cfg.seed,
        config_hash: cfg.hash(),
    };
    write_file(&out.join(IMPORTANCE_JSON), to_json_line(&output).as_bytes())?;
    Ok(output)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExplainOutput {
    pub image: String,
    /// Spatial maximum of each concept channel of `Z′` (eval mode).
    pub scores: Vec<f64>,
    /// PGM activation maps, one per concept, relative to the output directory.
    pub maps: Vec<String>,
    pub config_hash: String,
}

/// Concept scores and normalized concept-channel maps for one image.
pub fn explain(checkpoint: &Path, image: &Path, out: &Path) -> Result<ExplainOutput, CliError> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let net = ckpt.to_net::<Real>()?;
    let img = read_image(image)?;
    let size = ckpt.config.data.image_size;
    if img.width != size || img.height != size {
        return Err(CliError::Data(format!(
            "{}: expected a {size}×{size} image",
            image.display()
        )));
    }
    let x = images_to_tensor::<Real>(&[&img]);
    let k = ckpt.num_concepts;
    let scores = latent_scores(&net, &x, caw_core::metrics::EvalPool::Max)?
        .remove(0)
        .into_iter()
        .take(k)
        .collect();
    let latent = net.infer(&x)?.latent;
    let stem = image
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("image");
    let mut maps = Vec::with_capacity(k);
    for c in 0..k {
        let z = latent.image(0);
        let grid = caw_core::grid::Grid::from_vec(z.height, z.width, z.channel(c).to_vec());
        let name = format!("{stem}_concept{c}.pgm");
        write_file(
            &out.join(&name),
            encode_pgm(&normalize_map(&grid).grid).as_bytes(),
        )?;
        maps.push(name);
    }
    let output = ExplainOutput {
        image: image.display().to_string(),
        scores,
        maps,
        config_hash: ckpt.config_hash.clone(),
    };
    write_file(&out.join(EXPLAIN_JSON), to_json_line(&output).as_bytes())?;
    Ok(output)
}
