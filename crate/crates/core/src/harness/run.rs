//! Training and evaluation orchestration behind the CLI.
//!
//! One model is trained per category (parts differ across categories, so
//! heads do too). All randomness flows from the configured root seed via
//! named streams; `PSF_THREADS` caps the worker pool.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Once;
use std::time::Instant;

use rayon::prelude::*;

use crate::data::{
    augment, load_dataset, normalize_unit_ball, AugmentConfig, DatasetSplit, PointCloud,
};
use crate::error::{Error, Result};
use crate::harness::config::Config;
use crate::harness::metrics::{argmax_labels, confusion_counts, shape_miou, EmptyUnion};
use crate::harness::report::{CategoryReport, EvalReport, MetricRecord};
use crate::pdnet::{
    build_ensemble, ensemble_predict, train_pdnet_with, PdNetConfig,
    PdNetParams, PdTrainOpts,
};
use crate::pointconv::{PointCnnConfig, PointCnnNet};
use crate::rng::StreamRng;
use crate::sparse::{devoxelize_labels, voxelize, SegnetConfig, SparseSegnet};
use crate::tensor::{
    adam_step, load_raw, save_params, softmax_rows, AdamConfig, Binder, Param, Tape, Tensor,
};

/// Build the global worker pool once, honoring `PSF_THREADS`.
pub fn init_thread_pool() {
    static ONCE: Once = Once::new();
    ONCE.call_once(|| {
        if let Ok(v) = std::env::var("PSF_THREADS") {
            if let Ok(n) = v.parse::<usize>() {
                if n > 0 {
                    let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
                }
            }
        }
    });
}

/// Which segmentation model a command runs.
#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum ModelKind {
    PdNet,
    Sparse,
    PointCnn,
}

impl ModelKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "pdnet" => Ok(Self::PdNet),
            "sparse" => Ok(Self::Sparse),
            "pointcnn" => Ok(Self::PointCnn),
            other => Err(Error::Config(format!(
                "unknown model '{other}' (expected pdnet, sparse, or pointcnn)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PdNet => "pdnet",
            Self::Sparse => "sparse",
            Self::PointCnn => "pointcnn",
        }
    }
}

/// Training hyper-parameters resolved from a [`Config`].
#[derive(Clone, Debug)]
pub struct TrainSettings {
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub target_miou: Option<f64>,
    pub val_fraction: f64,
    pub augment: AugmentConfig,
}

pub fn train_settings(cfg: &Config) -> Result<TrainSettings> {
    let target = cfg.get_f64("train.target_miou", 0.97)?;
    Ok(TrainSettings {
        epochs: cfg.get_usize("train.epochs", 30)?,
        batch: cfg.get_usize("train.batch", 8)?.max(1),
        lr: cfg.get_f64("train.lr", 2e-3)?,
        seed: cfg.get_u64("train.seed", 0)?,
        target_miou: if target > 0.0 { Some(target) } else { None },
        val_fraction: cfg.get_f64("train.val_fraction", 0.1)?,
        augment: AugmentConfig {
            noise_sigma: cfg.get_f64("data.noise", 0.002)?,
            scale_range: (
                cfg.get_f64("data.scale_min", 0.9)?,
                cfg.get_f64("data.scale_max", 1.1)?,
            ),
            translate_range: cfg.get_f64("data.translate", 0.02)?,
        },
    })
}

/// One trained model; the variant mirrors [`ModelKind`].
pub enum Model {
    Pd(PdNetParams),
    Sparse(SparseSegnet),
    PointCnn(PointCnnNet),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Pd(_) => ModelKind::PdNet,
            Model::Sparse(_) => ModelKind::Sparse,
            Model::PointCnn(_) => ModelKind::PointCnn,
        }
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Param)) {
        match self {
            Model::Pd(p) => p.visit(f),
            Model::Sparse(p) => p.visit(f),
            Model::PointCnn(p) => p.visit(f),
        }
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Param)) {
        match self {
            Model::Pd(p) => p.visit_mut(f),
            Model::Sparse(p) => p.visit_mut(f),
            Model::PointCnn(p) => p.visit_mut(f),
        }
    }

    /// Per-point posteriors for a normalized cloud.
    pub fn predict(&self, pc: &PointCloud, rng: &StreamRng) -> Result<Tensor> {
        match self {
            Model::Pd(params) => {
                let trees = build_ensemble(pc, params, rng)?;
                ensemble_predict(pc, &trees, params)
            }
            Model::Sparse(net) => {
                let vox = voxelize(pc, net.config.resolution, false)?;
                let mut tape = Tape::new();
                let mut binder = Binder::eval();
                let logits = net.forward(&mut tape, &mut binder, &vox)?;
                let probs = softmax_rows(tape.value(logits));
                devoxelize_labels(&probs, &vox.grid.sites, pc)
            }
            Model::PointCnn(net) => {
                let mut tape = Tape::new();
                let mut binder = Binder::eval();
                let logits = net.forward(&mut tape, &mut binder, &pc.points)?;
                Ok(softmax_rows(tape.value(logits)))
            }
        }
    }
}

pub fn pdnet_config_from(
    cfg: &Config,
    part_count: usize,
    derived_cloud: usize,
) -> Result<PdNetConfig> {
    let cloud = cfg.get_usize("pdnet.cloud_size", 0)?;
    let cloud_size = if cloud == 0 { derived_cloud } else { cloud };
    let mut c = PdNetConfig::desk(part_count, cloud_size);
    if let Some(w) = cfg.get_usize_list("pdnet.widths")? {
        c.level_widths = w;
    }
    c.bottleneck = cfg.get_usize("pdnet.bottleneck", c.bottleneck)?;
    if let Some(h) = cfg.get_usize_list("pdnet.head")? {
        c.head_widths = h;
    }
    c.lift_width = cfg.get_usize("pdnet.lift", c.lift_width)?;
    c.ensemble_size = cfg.get_usize("pdnet.trees", c.ensemble_size)?;
    c.subset_size = cfg.get_usize("pdnet.subset", c.subset_size)?;
    c.validate()?;
    Ok(c)
}

pub fn segnet_config_from(cfg: &Config, part_count: usize) -> Result<SegnetConfig> {
    let mut c = SegnetConfig::desk(part_count);
    c.resolution = cfg.get_usize("sparse.resolution", c.resolution)?;
    c.channels = cfg.get_usize("sparse.channels", c.channels)?;
    c.blocks = cfg.get_usize("sparse.blocks", c.blocks)?;
    Ok(c)
}

pub fn pointcnn_config_from(cfg: &Config, part_count: usize) -> Result<PointCnnConfig> {
    let mut c = PointCnnConfig::desk(part_count);
    c.k = cfg.get_usize("pointcnn.k", c.k)?;
    if let Some(p) = cfg.get_usize_list("pointcnn.points")? {
        c.enc_points = p;
    }
    if let Some(ch) = cfg.get_usize_list("pointcnn.channels")? {
        c.enc_channels = ch;
    }
    c.s_hidden = cfg.get_usize("pointcnn.s_hidden", c.s_hidden)?;
    c.validate()?;
    Ok(c)
}

fn build_model(
    kind: ModelKind,
    cfg: &Config,
    part_count: usize,
    derived_cloud: usize,
    rng: &mut StreamRng,
) -> Result<Model> {
    Ok(match kind {
        ModelKind::PdNet => Model::Pd(PdNetParams::new(
            rng,
            pdnet_config_from(cfg, part_count, derived_cloud)?,
        )?),
        ModelKind::Sparse => Model::Sparse(SparseSegnet::new(
            rng,
            segnet_config_from(cfg, part_count)?,
        )?),
        ModelKind::PointCnn => Model::PointCnn(PointCnnNet::new(
            rng,
            pointcnn_config_from(cfg, part_count)?,
        )?),
    })
}

fn save_model(model: &Model, path: &Path) -> Result<()> {
    let mut snapshot: Vec<Param> = Vec::new();
    model.visit(&mut |p| snapshot.push(p.clone()));
    save_params(path, snapshot.iter())
}

/// Load a checkpoint into a freshly built model, matching by name.
pub fn load_model(model: &mut Model, path: &Path) -> Result<()> {
    let entries = load_raw(path)?;
    let map: HashMap<String, Tensor> = entries.into_iter().collect();
    let mut err: Option<Error> = None;
    model.visit_mut(&mut |p| {
        if err.is_some() {
            return;
        }
        match map.get(&p.name) {
            Some(t) if t.shape() == p.value.shape() => p.value = t.clone(),
            Some(t) => {
                err = Some(Error::Checkpoint(format!(
                    "parameter '{}': checkpoint shape {:?} vs model shape {:?}",
                    p.name,
                    t.shape(),
                    p.value.shape()
                )))
            }
            None => {
                err = Some(Error::Checkpoint(format!(
                    "parameter '{}' missing from {}",
                    p.name,
                    path.display()
                )))
            }
        }
    });
    err.map_or(Ok(()), Err)
}

/// Deterministic train/validation split of one category.
fn split_category(
    split: &DatasetSplit,
    val_fraction: f64,
    seed: u64,
) -> (DatasetSplit, DatasetSplit) {
    let n = split.shapes.len();
    let val_count = ((n as f64 * val_fraction) as usize).min(n.saturating_sub(1));
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = StreamRng::new(seed, &format!("split/{}", split.name));
    rng.shuffle(&mut order);
    let val_idx: Vec<usize> = order[..val_count].to_vec();
    let is_val: Vec<bool> = {
        let mut v = vec![false; n];
        for &i in &val_idx {
            v[i] = true;
        }
        v
    };
    let train_shapes: Vec<PointCloud> = split
        .shapes
        .iter()
        .zip(&is_val)
        .filter(|(_, &v)| !v)
        .map(|(s, _)| s.clone())
        .collect();
    let val_shapes: Vec<PointCloud> = split
        .shapes
        .iter()
        .zip(&is_val)
        .filter(|(_, &v)| v)
        .map(|(s, _)| s.clone())
        .collect();
    (
        DatasetSplit {
            shapes: train_shapes,
            part_count: split.part_count,
            name: split.name.clone(),
        },
        DatasetSplit {
            shapes: val_shapes,
            part_count: split.part_count,
            name: split.name.clone(),
        },
    )
}

/// mIoU of predicting each category's globally most frequent label.
pub fn majority_baseline(split: &DatasetSplit, empty_union: EmptyUnion) -> Result<f64> {
    let mut counts = vec![0usize; split.part_count];
    for shape in &split.shapes {
        for &l in shape.labels.as_ref().into_iter().flatten() {
            counts[l] += 1;
        }
    }
    let majority = counts
        .iter()
        .enumerate()
        .max_by_key(|&(i, &c)| (c, std::cmp::Reverse(i)))
        .map(|(i, _)| i)
        .unwrap_or(0);
    let mut total = 0.0;
    for shape in &split.shapes {
        let labels = shape
            .labels
            .as_ref()
            .ok_or_else(|| Error::Data("baseline needs labels".into()))?;
        let pred = vec![majority; labels.len()];
        total += shape_miou(&pred, labels, split.part_count, empty_union)?;
    }
    Ok(total / split.shapes.len().max(1) as f64)
}

/// Validation-set mIoU of the current model.
fn val_miou(model: &Model, val: &DatasetSplit, seed: u64, empty_union: EmptyUnion) -> Result<f64> {
    if val.shapes.is_empty() {
        return Ok(f64::NAN);
    }
    let rng = StreamRng::new(seed, "val");
    let scores: Vec<Result<f64>> = val
        .shapes
        .par_iter()
        .enumerate()
        .map(|(i, shape)| {
            let pc = normalize_unit_ball(shape);
            let posterior = model.predict(&pc, &rng.fork(&format!("shape/{i}")))?;
            let pred = argmax_labels(&posterior);
            shape_miou(
                &pred,
                shape.labels.as_ref().expect("labelled"),
                val.part_count,
                empty_union,
            )
        })
        .collect();
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / val.shapes.len() as f64)
}

/// Outcome of training one category.
#[derive(Clone, Debug)]
pub struct CategoryOutcome {
    pub category: String,
    pub epochs_run: usize,
    pub final_loss: f64,
    pub final_train_miou: f64,
    pub best_val_miou: Option<f64>,
    pub checkpoint: PathBuf,
    pub checkpoint_best: PathBuf,
}

/// Outcome of a whole training run.
#[derive(Clone, Debug)]
pub struct TrainSummary {
    pub model: String,
    pub config_digest: String,
    pub per_category: Vec<CategoryOutcome>,
}

/// Train `kind` on every category under `data_dir`, writing per-category
/// checkpoints and metric logs under `out_dir`.
pub fn run_training(
    kind: ModelKind,
    data_dir: &Path,
    cfg: &Config,
    out_dir: &Path,
) -> Result<TrainSummary> {
    init_thread_pool();
    let settings = train_settings(cfg)?;
    if settings.epochs > 0 && settings.lr.is_nan() {
        return Err(Error::Config("train.lr is NaN".into()));
    }
    let dataset = load_dataset(data_dir)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;

    let mut summary = TrainSummary {
        model: kind.name().to_string(),
        config_digest: cfg.digest(),
        per_category: Vec::new(),
    };
    for category in &dataset.categories {
        let outcome = train_category(kind, category, cfg, &settings, out_dir)?;
        summary.per_category.push(outcome);
    }
    Ok(summary)
}

fn train_category(
    kind: ModelKind,
    category: &DatasetSplit,
    cfg: &Config,
    settings: &TrainSettings,
    out_dir: &Path,
) -> Result<CategoryOutcome> {
    let dir = out_dir.join(&category.name);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let (train, val) = split_category(category, settings.val_fraction, settings.seed);
    if train.shapes.is_empty() {
        return Err(Error::Data(format!(
            "category '{}' has no training shapes",
            category.name
        )));
    }
    let derived_cloud = train.shapes[0].len().next_power_of_two();
    let empty_union = EmptyUnion::parse(&cfg.get_str("eval.empty_union", "one"))?;

    let start = Instant::now();
    let mut records: Vec<MetricRecord> = Vec::new();
    let mut best: Option<(f64, PathBuf)> = None;
    let best_path = dir.join("checkpoint_best.bin");
    let final_path = dir.join("checkpoint.bin");

    let (model, epochs_run, final_loss, final_miou) = match kind {
        ModelKind::PdNet => {
            let config = pdnet_config_from(cfg, category.part_count, derived_cloud)?;
            // cap the validation ensemble so per-epoch tracking stays cheap
            let mut val_params_cfg = config.clone();
            val_params_cfg.ensemble_size = config.ensemble_size.min(4);
            let opts = PdTrainOpts {
                lr: settings.lr,
                batch: settings.batch,
                epochs: settings.epochs,
                seed: settings.seed,
                augment: settings.augment,
                target_train_miou: settings.target_miou,
            };
            let mut err: Option<Error> = None;
            let category_name = category.name.clone();
            let (params, stats) = train_pdnet_with(&train, &config, &opts, &mut |params, s| {
                if err.is_some() {
                    return;
                }
                let mut tracked = params.clone();
                tracked.config = val_params_cfg.clone();
                let vm = match val_miou(
                    &Model::Pd(tracked),
                    &val,
                    settings.seed,
                    empty_union,
                ) {
                    Ok(v) => v,
                    Err(e) => {
                        err = Some(e);
                        return;
                    }
                };
                records.push(MetricRecord {
                    category: category_name.clone(),
                    epoch: s.epoch,
                    step: ((s.epoch + 1) * train.shapes.len()) as u64,
                    loss: s.loss,
                    train_miou: s.train_miou,
                    val_miou: if vm.is_nan() { None } else { Some(vm) },
                    wall_ms: start.elapsed().as_millis() as u64,
                });
                let score = if vm.is_nan() { s.train_miou } else { vm };
                if best.as_ref().is_none_or(|(b, _)| score > *b) {
                    if save_model(&Model::Pd(params.clone()), &best_path).is_ok() {
                        best = Some((score, best_path.clone()));
                    }
                }
            })?;
            if let Some(e) = err {
                return Err(e);
            }
            let last = stats.last().copied();
            (
                Model::Pd(params),
                stats.len(),
                last.map_or(f64::NAN, |s| s.loss),
                last.map_or(f64::NAN, |s| s.train_miou),
            )
        }
        ModelKind::Sparse | ModelKind::PointCnn => {
            let mut init_rng = StreamRng::new(settings.seed, kind.name()).fork("init");
            let mut model = build_model(kind, cfg, category.part_count, derived_cloud, &mut init_rng)?;
            let (epochs_run, final_loss, final_miou) = train_generic(
                &mut model,
                &train,
                &val,
                settings,
                empty_union,
                &category.name,
                start,
                &mut records,
                &mut best,
                &best_path,
            )?;
            (model, epochs_run, final_loss, final_miou)
        }
    };

    save_model(&model, &final_path)?;
    if best.is_none() {
        save_model(&model, &best_path)?;
    }
    let mut log = String::new();
    for r in &records {
        log.push_str(&serde_json::to_string(r).expect("record to json"));
        log.push('\n');
    }
    let metrics_path = dir.join("metrics.jsonl");
    std::fs::write(&metrics_path, log).map_err(|e| Error::io(&metrics_path, e))?;

    Ok(CategoryOutcome {
        category: category.name.clone(),
        epochs_run,
        final_loss,
        final_train_miou: final_miou,
        best_val_miou: best.as_ref().map(|(s, _)| *s),
        checkpoint: final_path,
        checkpoint_best: best_path,
    })
}

struct PassResult {
    loss: f64,
    miou: f64,
    grads: Vec<Option<Vec<f64>>>,
}

/// One training shape through a sparse or pointconv model.
fn model_pass(model: &Model, pc: &PointCloud, empty_union: EmptyUnion) -> Result<PassResult> {
    let labels = pc.labels.as_ref().expect("labelled");
    let mut tape = Tape::new();
    let mut binder = Binder::train();
    let (loss, point_probs) = match model {
        Model::Sparse(net) => {
            let vox = voxelize(pc, net.config.resolution, true)?;
            let site_labels = vox.site_labels.clone().expect("labelled voxelization");
            let logits = net.forward(&mut tape, &mut binder, &vox)?;
            let (loss_ref, site_probs) = tape.softmax_cross_entropy(logits, &site_labels)?;
            tape.backward(loss_ref)?;
            let probs = devoxelize_labels(&site_probs, &vox.grid.sites, pc)?;
            (tape.value(loss_ref).data()[0], probs)
        }
        Model::PointCnn(net) => {
            let logits = net.forward(&mut tape, &mut binder, &pc.points)?;
            let (loss_ref, probs) = tape.softmax_cross_entropy(logits, labels)?;
            tape.backward(loss_ref)?;
            (tape.value(loss_ref).data()[0], probs)
        }
        Model::Pd(_) => unreachable!("tree network trains through its own loop"),
    };
    let mut grads = Vec::new();
    model.visit(&mut |p| grads.push(binder.grad_of(&tape, p).map(|g| g.to_vec())));
    let pred = argmax_labels(&point_probs);
    let parts = point_probs.cols();
    let miou = shape_miou(&pred, labels, parts, empty_union)?;
    Ok(PassResult { loss, miou, grads })
}

#[allow(clippy::too_many_arguments)]
fn train_generic(
    model: &mut Model,
    train: &DatasetSplit,
    val: &DatasetSplit,
    settings: &TrainSettings,
    empty_union: EmptyUnion,
    category: &str,
    start: Instant,
    records: &mut Vec<MetricRecord>,
    best: &mut Option<(f64, PathBuf)>,
    best_path: &Path,
) -> Result<(usize, f64, f64)> {
    let root = StreamRng::new(settings.seed, model.kind().name());
    let adam = AdamConfig::with_lr(settings.lr);
    let n = train.shapes.len();
    let mut epochs_run = 0;
    let mut last = (f64::NAN, f64::NAN);
    for epoch in 0..settings.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut order_rng = root.fork(&format!("order/{epoch}"));
        order_rng.shuffle(&mut order);
        let mut epoch_loss = 0.0;
        let mut epoch_miou = 0.0;
        for batch in order.chunks(settings.batch) {
            let results: Vec<Result<PassResult>> = batch
                .par_iter()
                .map(|&si| {
                    let mut aug_rng = root.fork(&format!("aug/{epoch}/{si}"));
                    let jittered = augment(&train.shapes[si], &mut aug_rng, &settings.augment)?;
                    let pc = normalize_unit_ball(&jittered);
                    model_pass(model, &pc, empty_union)
                })
                .collect();
            let scale = 1.0 / batch.len() as f64;
            let mut acc: Vec<Option<Vec<f64>>> = Vec::new();
            for r in results {
                let pass = r?;
                epoch_loss += pass.loss;
                epoch_miou += pass.miou;
                if acc.is_empty() {
                    acc = pass.grads;
                } else {
                    for (a, g) in acc.iter_mut().zip(pass.grads) {
                        match (a.as_mut(), g) {
                            (Some(a), Some(g)) => {
                                for (x, y) in a.iter_mut().zip(&g) {
                                    *x += y;
                                }
                            }
                            (None, Some(g)) => *a = Some(g),
                            _ => {}
                        }
                    }
                }
            }
            let mut it = acc.into_iter();
            model.visit_mut(&mut |p| {
                if let Some(Some(mut g)) = it.next() {
                    for v in &mut g {
                        *v *= scale;
                    }
                    p.accumulate_grad(&g);
                } else {
                    p.zero_grad();
                }
            });
            let mut err: Option<Error> = None;
            model.visit_mut(&mut |p| {
                if err.is_none() {
                    if let Err(e) = adam_step([p], &adam) {
                        err = Some(e);
                    }
                }
            });
            if let Some(e) = err {
                return Err(e);
            }
            model.visit_mut(&mut |p| p.clear_grad());
        }
        epochs_run = epoch + 1;
        let loss = epoch_loss / n as f64;
        let train_miou = epoch_miou / n as f64;
        last = (loss, train_miou);
        let vm = val_miou(model, val, settings.seed, empty_union)?;
        records.push(MetricRecord {
            category: category.to_string(),
            epoch,
            step: (epochs_run * n) as u64,
            loss,
            train_miou,
            val_miou: if vm.is_nan() { None } else { Some(vm) },
            wall_ms: start.elapsed().as_millis() as u64,
        });
        let score = if vm.is_nan() { train_miou } else { vm };
        if best.as_ref().is_none_or(|(b, _)| score > *b) {
            save_model(model, best_path)?;
            *best = Some((score, best_path.to_path_buf()));
        }
        if let Some(target) = settings.target_miou {
            if train_miou >= target {
                break;
            }
        }
    }
    Ok((epochs_run, last.0, last.1))
}

/// Resolve the per-category checkpoint path: a directory means
/// `dir/<category>/checkpoint.bin`; a file is accepted only for
/// single-category datasets.
fn resolve_checkpoint(base: &Path, category: &str, category_count: usize) -> Result<PathBuf> {
    if base.is_dir() {
        let nested = base.join(category).join("checkpoint.bin");
        if nested.exists() {
            return Ok(nested);
        }
        let flat = base.join("checkpoint.bin");
        if flat.exists() && category_count == 1 {
            return Ok(flat);
        }
        return Err(Error::Checkpoint(format!(
            "no checkpoint for category '{category}' under {}",
            base.display()
        )));
    }
    if category_count > 1 {
        return Err(Error::Checkpoint(format!(
            "dataset has {category_count} categories; pass the run directory instead of {}",
            base.display()
        )));
    }
    Ok(base.to_path_buf())
}

/// Evaluate a checkpoint on a dataset. Deterministic given `eval.seed`.
pub fn evaluate_model(
    kind: ModelKind,
    checkpoint: &Path,
    data_dir: &Path,
    cfg: &Config,
) -> Result<EvalReport> {
    init_thread_pool();
    let seed = cfg.get_u64("eval.seed", cfg.get_u64("train.seed", 0)?)?;
    let empty_union = EmptyUnion::parse(&cfg.get_str("eval.empty_union", "one"))?;
    let dataset = load_dataset(data_dir)?;
    let start = Instant::now();

    let mut per_category = Vec::new();
    let mut total = 0.0;
    let mut total_shapes = 0usize;
    for category in &dataset.categories {
        let ck = resolve_checkpoint(checkpoint, &category.name, dataset.categories.len())?;
        if category.shapes.is_empty() {
            continue;
        }
        let derived_cloud = category.shapes[0].len().next_power_of_two();
        let mut init_rng = StreamRng::new(0, "eval-init");
        let mut model = build_model(kind, cfg, category.part_count, derived_cloud, &mut init_rng)?;
        load_model(&mut model, &ck)?;

        let rng = StreamRng::new(seed, "eval");
        let results: Vec<Result<(f64, Vec<Vec<u64>>)>> = category
            .shapes
            .par_iter()
            .enumerate()
            .map(|(i, shape)| {
                let labels = shape
                    .labels
                    .as_ref()
                    .ok_or_else(|| Error::Data("evaluation needs labelled shapes".into()))?;
                let pc = normalize_unit_ball(shape);
                let posterior =
                    model.predict(&pc, &rng.fork(&format!("shape/{}/{i}", category.name)))?;
                let pred = argmax_labels(&posterior);
                let miou = shape_miou(&pred, labels, category.part_count, empty_union)?;
                Ok((miou, confusion_counts(&pred, labels, category.part_count)))
            })
            .collect();

        let mut per_shape = Vec::with_capacity(category.shapes.len());
        let mut confusion = vec![vec![0u64; category.part_count]; category.part_count];
        for r in results {
            let (miou, c) = r?;
            per_shape.push(miou);
            for (row_acc, row) in confusion.iter_mut().zip(&c) {
                for (a, v) in row_acc.iter_mut().zip(row) {
                    *a += v;
                }
            }
        }
        let mean = per_shape.iter().sum::<f64>() / per_shape.len() as f64;
        total += per_shape.iter().sum::<f64>();
        total_shapes += per_shape.len();
        per_category.push(CategoryReport {
            category: category.name.clone(),
            shape_count: per_shape.len(),
            mean_miou: mean,
            majority_baseline_miou: majority_baseline(category, empty_union)?,
            per_shape_miou: per_shape,
            confusion,
        });
    }

    Ok(EvalReport {
        model: kind.name().to_string(),
        seed,
        config_digest: cfg.digest(),
        overall_miou: total / total_shapes.max(1) as f64,
        per_category,
        wall_ms: start.elapsed().as_millis() as u64,
    })
}
