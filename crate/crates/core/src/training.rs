//! Mixed-minibatch training, evaluation, prediction files and the
//! attribute-to-segmentation transfer protocol.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::backbone::BackboneConfig;
use crate::checkpoint::{self, CheckpointMeta};
use crate::data::{BatchMode, BatchStream, Dataset, MixedBatch, ATTR_NAMES, LABEL_NAMES};
use crate::error::{Error, Result};
use crate::graph::Var;
use crate::layers::{attr_loss_la, seg_loss_ls, LossWeights};
use crate::mechanisms::SemMaskStack;
use crate::metrics::{accumulate_confusion, attribute_section, segmentation_section, EvalReport};
use crate::model::{argmax_labels, channel_softmax, MaskSource, Model, ModelConfig, ModelOutput, Variant};
use crate::params::{Cx, ParamStore};
use crate::rng;
use crate::tensor::Tensor;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub enum InitMode {
    #[default]
    Scratch,
    /// Trunk weights copied from a checkpoint.
    FromCheckpoint(String),
}

impl FromStr for InitMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "scratch" {
            return Ok(InitMode::Scratch);
        }
        match s.strip_prefix("from_checkpoint:") {
            Some(p) if !p.is_empty() => Ok(InitMode::FromCheckpoint(p.to_string())),
            _ => Err(Error::config(format!("init_mode must be `scratch` or `from_checkpoint:<path>`, got `{s}`"))),
        }
    }
}

impl fmt::Display for InitMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InitMode::Scratch => f.write_str("scratch"),
            InitMode::FromCheckpoint(p) => write!(f, "from_checkpoint:{p}"),
        }
    }
}

impl Serialize for InitMode {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for InitMode {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        String::deserialize(d)?.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LrDecay {
    pub at_step: usize,
    pub factor: f64,
}

fn default_tasks() -> BatchMode {
    BatchMode::Mixed
}

fn default_sa_kernel() -> usize {
    3
}

fn default_eval_batch() -> usize {
    50
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub seed: u64,
    pub n_s: usize,
    pub n_a: usize,
    /// Overrides `epochs` when set.
    #[serde(default)]
    pub steps: Option<usize>,
    #[serde(default = "default_tasks")]
    pub tasks: BatchMode,
    /// Trailing samples of the dataset kept out of training and evaluated at the end.
    #[serde(default)]
    pub holdout_n: usize,
    /// Caps the label-map pool to its first entries.
    #[serde(default)]
    pub max_seg_samples: Option<usize>,
    #[serde(default)]
    pub max_attr_samples: Option<usize>,
    #[serde(default)]
    pub loss_weights: LossWeights,
    #[serde(default)]
    pub mask_source: Option<MaskSource>,
    #[serde(default)]
    pub init_mode: InitMode,
    #[serde(default)]
    pub backbone: BackboneConfig,
    #[serde(default = "default_sa_kernel")]
    pub sa_kernel: usize,
    #[serde(default)]
    pub lr_decay: Option<LrDecay>,
    /// Steps between checkpoints; one epoch when absent.
    #[serde(default)]
    pub checkpoint_every: Option<usize>,
    #[serde(default = "default_eval_batch")]
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn new(variant: Variant, seed: u64) -> Self {
        TrainConfig {
            variant,
            epochs: 1,
            batch_size: 32,
            lr: 0.05,
            momentum: 0.9,
            seed,
            n_s: crate::data::N_S,
            n_a: crate::data::N_A,
            steps: None,
            tasks: BatchMode::Mixed,
            holdout_n: 0,
            max_seg_samples: None,
            max_attr_samples: None,
            loss_weights: LossWeights::default(),
            mask_source: None,
            init_mode: InitMode::Scratch,
            backbone: BackboneConfig::default(),
            sa_kernel: 3,
            lr_decay: None,
            checkpoint_every: None,
            eval_batch: 50,
        }
    }

    /// Parses JSON; a missing or malformed key is a configuration error.
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: TrainConfig = serde_json::from_str(text).map_err(|e| Error::config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || (self.tasks == BatchMode::Mixed && self.batch_size % 2 != 0) {
            return Err(Error::config(format!("batch_size {} must be positive and even for mixed batches", self.batch_size)));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("lr must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("momentum must lie in [0, 1)"));
        }
        if self.steps.is_none() && self.epochs == 0 {
            return Err(Error::config("epochs must be positive"));
        }
        if self.eval_batch == 0 {
            return Err(Error::config("eval_batch must be positive"));
        }
        if self.variant.needs_masks() && self.mask_source.is_none() {
            return Err(Error::config(format!("variant {} requires a mask_source", self.variant)));
        }
        if !self.variant.needs_masks() && self.mask_source.is_some() {
            return Err(Error::config(format!("variant {} does not take a mask_source", self.variant)));
        }
        if let Some(d) = self.lr_decay {
            if !(d.factor > 0.0) {
                return Err(Error::config("lr_decay.factor must be positive"));
            }
        }
        self.loss_weights.validate(self.n_a)
    }

    pub fn model_config(&self, height: usize, width: usize) -> ModelConfig {
        ModelConfig {
            variant: self.variant,
            n_s: self.n_s,
            n_a: self.n_a,
            height,
            width,
            backbone: self.backbone.clone(),
            sa_kernel: self.sa_kernel,
        }
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        match self.lr_decay {
            Some(d) if step >= d.at_step => self.lr * d.factor,
            _ => self.lr,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub l_s: Option<f64>,
    pub l_a: Option<f64>,
    pub total: f64,
    pub grad_norm: f64,
}

/// Source of region masks for the mask-consuming variants.
pub enum MaskProvider {
    None,
    GroundTruth,
    Pretrained { model: Model, store: ParamStore },
}

impl MaskProvider {
    pub fn from_source(source: Option<&MaskSource>, n_s: usize) -> Result<Self> {
        match source {
            None => Ok(MaskProvider::None),
            Some(MaskSource::GroundTruthOnehot) => Ok(MaskProvider::GroundTruth),
            Some(MaskSource::PretrainedSoftmax(path)) => {
                let (meta, store) = checkpoint::load(Path::new(path))?;
                if meta.model.n_s != n_s {
                    return Err(Error::shape(format!("segmenter predicts {} labels, expected {n_s}", meta.model.n_s)));
                }
                if meta.model.variant.needs_masks() {
                    return Err(Error::config("the mask segmenter cannot itself depend on masks"));
                }
                Ok(MaskProvider::Pretrained { model: Model::new(meta.model)?, store })
            }
        }
    }

    /// `[B, N_S, H, W]` masks at image resolution for the given samples.
    pub fn masks(&mut self, ds: &Dataset, ids: &[usize], images: &Tensor) -> Result<Option<Tensor>> {
        match self {
            MaskProvider::None => Ok(None),
            MaskProvider::GroundTruth => {
                let hw = ds.height() * ds.width();
                let mut labels = Vec::with_capacity(ids.len() * hw);
                for &i in ids {
                    let l = ds.mask_labels(i).ok_or_else(|| {
                        Error::config(format!(
                            "ground-truth masks need a label map for sample {i}; generate the dataset with oracle masks"
                        ))
                    })?;
                    labels.extend_from_slice(l);
                }
                let m = SemMaskStack::one_hot(&labels, ids.len(), ds.height(), ds.width(), ds.n_s())?;
                Ok(Some(m.into_tensor()))
            }
            MaskProvider::Pretrained { model, store } => {
                let mut cx = Cx::frozen(store);
                let x = cx.g.constant(images.clone());
                let out = model.forward(&mut cx, x, None)?;
                Ok(Some(channel_softmax(cx.g.value(out.seg_logits))))
            }
        }
    }
}

pub struct Losses {
    pub out: ModelOutput,
    pub l_s: Option<Var>,
    pub l_a: Option<Var>,
    pub total: Var,
}

/// Forward on the whole batch; l_S reads only the seg rows of the
/// segmentation logits, l_A only the attribute rows of the attribute logits.
pub fn batch_losses(
    cx: &mut Cx,
    model: &Model,
    batch: &MixedBatch,
    masks: Option<&Tensor>,
    weights: &LossWeights,
) -> Result<Losses> {
    let x = cx.g.constant(batch.images.clone());
    let out = model.forward(cx, x, masks)?;
    let l_s = if batch.seg_rows.is_empty() {
        None
    } else {
        let rows = cx.g.index_select(out.seg_logits, &batch.seg_rows)?;
        Some(seg_loss_ls(&mut cx.g, rows, &batch.seg_labels)?)
    };
    let l_a = if batch.attr_rows.is_empty() {
        None
    } else {
        let rows = cx.g.index_select(out.attr_logits, &batch.attr_rows)?;
        Some(attr_loss_la(&mut cx.g, rows, &batch.attr_targets, &batch.attr_present, weights)?)
    };
    let total = match (l_s, l_a) {
        (Some(s), Some(a)) => {
            let s = cx.g.mul_scalar(s, weights.seg_weight);
            let a = cx.g.mul_scalar(a, weights.attr_weight);
            cx.g.add(s, a)?
        }
        (Some(s), None) => cx.g.mul_scalar(s, weights.seg_weight),
        (None, Some(a)) => cx.g.mul_scalar(a, weights.attr_weight),
        (None, None) => return Err(Error::DegenerateBatch("batch has no annotated rows".into())),
    };
    Ok(Losses { out, l_s, l_a, total })
}

/// `v ← μ·v + g; θ ← θ − lr·v` for every trainable parameter; missing
/// gradients count as zero.
pub fn sgd_update(
    store: &mut ParamStore,
    grads: &BTreeMap<String, Tensor>,
    lr: f64,
    momentum: f64,
    velocity: &mut BTreeMap<String, Vec<f64>>,
) {
    for (name, p) in store.iter_mut() {
        if !p.trainable {
            continue;
        }
        let v = velocity.entry(name.clone()).or_insert_with(|| vec![0.0; p.value.numel()]);
        let g = grads.get(name).map(|t| t.data());
        for (i, (theta, vi)) in p.value.data_mut().iter_mut().zip(v.iter_mut()).enumerate() {
            *vi = momentum * *vi + g.map_or(0.0, |g| g[i]);
            *theta -= lr * *vi;
        }
    }
}

/// One forward/backward pass and momentum update.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    model: &Model,
    store: &mut ParamStore,
    velocity: &mut BTreeMap<String, Vec<f64>>,
    batch: &MixedBatch,
    masks: Option<&Tensor>,
    cfg: &TrainConfig,
    step: usize,
    last_checkpoint: &str,
) -> Result<StepRecord> {
    let (record, grads) = {
        let mut cx = Cx::new(store, true);
        let losses = batch_losses(&mut cx, model, batch, masks, &cfg.loss_weights)?;
        let total = cx.g.value(losses.total).item();
        let diverged = || Error::Divergence { step, last_checkpoint: last_checkpoint.to_string() };
        if !total.is_finite() {
            return Err(diverged());
        }
        cx.g.backward(losses.total)?;
        let grads = cx.param_grads();
        let norm2: f64 = grads.values().flat_map(|t| t.data()).map(|g| g * g).sum();
        if !norm2.is_finite() {
            return Err(diverged());
        }
        let record = StepRecord {
            step,
            l_s: losses.l_s.map(|v| cx.g.value(v).item()),
            l_a: losses.l_a.map(|v| cx.g.value(v).item()),
            total,
            grad_norm: norm2.sqrt(),
        };
        (record, grads)
    };
    sgd_update(store, &grads, cfg.lr_at(step), cfg.momentum, velocity);
    Ok(record)
}

/// Everything a finished run produced.
pub struct TrainRun {
    pub model: Model,
    pub store: ParamStore,
    pub records: Vec<StepRecord>,
    pub meta: CheckpointMeta,
    /// Evaluation on the held-out tail, when one was configured.
    pub report: Option<EvalReport>,
    pub checkpoints: Vec<PathBuf>,
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Model,
    pub store: ParamStore,
    velocity: BTreeMap<String, Vec<f64>>,
    train: Dataset,
    holdout: Option<Dataset>,
    stream: BatchStream,
    masks: MaskProvider,
    step: usize,
}

fn check_dataset(cfg: &TrainConfig, ds: &Dataset) -> Result<()> {
    if cfg.n_s != ds.n_s() || cfg.n_a != ds.n_a() {
        return Err(Error::shape(format!(
            "config expects n_s = {}, n_a = {} but the dataset has n_s = {}, n_a = {}",
            cfg.n_s,
            cfg.n_a,
            ds.n_s(),
            ds.n_a()
        )));
    }
    Ok(())
}

impl Trainer {
    pub fn new(cfg: &TrainConfig, data: &Dataset) -> Result<Self> {
        cfg.validate()?;
        check_dataset(cfg, data)?;
        let (train, holdout) = if cfg.holdout_n > 0 {
            let (a, b) = data.split_tail(cfg.holdout_n)?;
            (a, Some(b))
        } else {
            (data.clone(), None)
        };
        let mut seg = train.seg_indices();
        let mut attr = train.attr_indices();
        if let Some(k) = cfg.max_seg_samples {
            seg.truncate(k);
        }
        if let Some(k) = cfg.max_attr_samples {
            attr.truncate(k);
        }
        let stream = BatchStream::new(seg, attr, cfg.batch_size, cfg.tasks, cfg.seed)?;
        let model = Model::new(cfg.model_config(data.height(), data.width()))?;
        let mut store = model.init(rng::substream(cfg.seed, "init"));
        if let InitMode::FromCheckpoint(path) = &cfg.init_mode {
            let (_, src) = checkpoint::load(Path::new(path))?;
            checkpoint::copy_trunk(&src, &mut store)?;
        }
        let masks = MaskProvider::from_source(cfg.mask_source.as_ref(), cfg.n_s)?;
        Ok(Trainer {
            cfg: cfg.clone(),
            model,
            store,
            velocity: BTreeMap::new(),
            train,
            holdout,
            stream,
            masks,
            step: 0,
        })
    }

    /// Replaces the trunk with the one in `src` before training starts.
    pub fn load_trunk(&mut self, src: &ParamStore) -> Result<usize> {
        checkpoint::copy_trunk(src, &mut self.store)
    }

    pub fn total_steps(&self) -> usize {
        self.cfg.steps.unwrap_or(self.cfg.epochs * self.stream.steps_per_epoch())
    }

    pub fn meta(&self) -> CheckpointMeta {
        CheckpointMeta {
            model: self.model.config.clone(),
            step: self.step,
            trained_seg: self.cfg.tasks.trains_seg() && self.cfg.loss_weights.seg_weight > 0.0,
            trained_attrs: self.cfg.tasks.trains_attrs() && self.cfg.loss_weights.attr_weight > 0.0,
            label_names: LABEL_NAMES.iter().map(|s| s.to_string()).collect(),
            attr_names: ATTR_NAMES.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn step_once(&mut self, last_checkpoint: &str) -> Result<StepRecord> {
        let batch = self.stream.next_batch(&self.train)?;
        let masks = self.masks.masks(&self.train, &batch.sample_ids, &batch.images)?;
        let rec = train_step(
            &self.model,
            &mut self.store,
            &mut self.velocity,
            &batch,
            masks.as_ref(),
            &self.cfg,
            self.step,
            last_checkpoint,
        )?;
        self.step += 1;
        Ok(rec)
    }

    /// Runs to completion. With `out`, writes `train_log.jsonl`, periodic
    /// checkpoints, `final.ckpt` and, given a held-out tail, `report.json`.
    pub fn run(mut self, out: Option<&Path>) -> Result<TrainRun> {
        let total = self.total_steps();
        let every = self.cfg.checkpoint_every.unwrap_or(self.stream.steps_per_epoch()).max(1);
        let mut log = match out {
            Some(dir) => {
                fs::create_dir_all(dir)?;
                Some(fs::File::create(dir.join("train_log.jsonl"))?)
            }
            None => None,
        };
        let mut records = Vec::with_capacity(total);
        let mut checkpoints = Vec::new();
        let mut last = String::from("none");
        while self.step < total {
            let rec = self.step_once(&last)?;
            if let Some(f) = &mut log {
                writeln!(f, "{}", serde_json::to_string(&rec)?)?;
            }
            records.push(rec);
            if let Some(dir) = out {
                if self.step % every == 0 && self.step < total {
                    let path = dir.join(format!("checkpoint-{:06}.ckpt", self.step));
                    checkpoint::save(&path, &self.meta(), &self.store)?;
                    last = path.display().to_string();
                    checkpoints.push(path);
                }
            }
        }
        let meta = self.meta();
        if let Some(dir) = out {
            let path = dir.join("final.ckpt");
            checkpoint::save(&path, &meta, &self.store)?;
            checkpoints.push(path);
        }
        let report = match &self.holdout {
            Some(h) => {
                let (report, _) = evaluate(&self.model, &mut self.store, h, &mut self.masks, &meta, self.cfg.eval_batch)?;
                if let Some(dir) = out {
                    fs::write(dir.join("report.json"), report.to_json())?;
                }
                Some(report)
            }
            None => None,
        };
        Ok(TrainRun { model: self.model, store: self.store, records, meta, report, checkpoints })
    }
}

pub fn train(cfg: &TrainConfig, data: &Dataset, out: Option<&Path>) -> Result<TrainRun> {
    Trainer::new(cfg, data)?.run(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: usize,
    pub scores: Vec<f64>,
}

/// Frozen evaluation: attribute measures over attribute-annotated samples and
/// segmentation measures over label-map samples, each only for tasks the
/// weights were trained on. Also returns attribute predictions (logits).
pub fn evaluate(
    model: &Model,
    store: &mut ParamStore,
    ds: &Dataset,
    masks: &mut MaskProvider,
    meta: &CheckpointMeta,
    batch: usize,
) -> Result<(EvalReport, Vec<Prediction>)> {
    if model.config.n_s != ds.n_s() || model.config.n_a != ds.n_a() {
        return Err(Error::shape(format!(
            "model has n_s = {}, n_a = {}; dataset has {} and {}",
            model.config.n_s,
            model.config.n_a,
            ds.n_s(),
            ds.n_a()
        )));
    }
    if model.config.height != ds.height() || model.config.width != ds.width() {
        return Err(Error::shape(format!(
            "model expects {}x{} images, dataset has {}x{}",
            model.config.height,
            model.config.width,
            ds.height(),
            ds.width()
        )));
    }
    let n_a = ds.n_a();
    let mut report = EvalReport { variant: model.variant().to_string(), attributes: None, segmentation: None };
    let mut predictions = Vec::new();
    let forward = |store: &mut ParamStore, masks: &mut MaskProvider, ids: &[usize]| -> Result<(Tensor, Tensor)> {
        let images = ds.stack_images(ids);
        let m = masks.masks(ds, ids, &images)?;
        let mut cx = Cx::frozen(store);
        let x = cx.g.constant(images);
        let out = model.forward(&mut cx, x, m.as_ref())?;
        Ok((cx.g.value(out.seg_logits).clone(), cx.g.value(out.attr_logits).clone()))
    };
    if meta.trained_attrs {
        let ids = ds.attr_indices();
        let (mut scores, mut labels, mut present) = (Vec::new(), Vec::new(), Vec::new());
        for chunk in ids.chunks(batch) {
            let (_, attr) = forward(store, masks, chunk)?;
            for (r, &i) in chunk.iter().enumerate() {
                let s = attr.data()[r * n_a..(r + 1) * n_a].to_vec();
                scores.extend_from_slice(&s);
                labels.extend(ds.attr_targets(i).iter().map(|&y| y > 0.5));
                present.extend_from_slice(ds.attr_present(i));
                predictions.push(Prediction { sample_id: i, scores: s });
            }
        }
        if !ids.is_empty() {
            let names: Vec<String> = meta.attr_names.clone();
            report.attributes = Some(attribute_section(&names, &scores, &labels, &present)?);
        }
    }
    if meta.trained_seg {
        let ids = ds.seg_indices();
        let mut conf = vec![vec![0u64; ds.n_s()]; ds.n_s()];
        for chunk in ids.chunks(batch) {
            let (seg, _) = forward(store, masks, chunk)?;
            let pred = argmax_labels(&seg);
            let mut gt = Vec::with_capacity(pred.len());
            for &i in chunk {
                gt.extend_from_slice(ds.seg_labels(i).expect("seg index"));
            }
            accumulate_confusion(&mut conf, &pred, &gt)?;
        }
        if !ids.is_empty() {
            report.segmentation = Some(segmentation_section(&meta.label_names, &conf, ids.len()));
        }
    }
    Ok((report, predictions))
}

/// Attribute-only report for stored predictions.
pub fn evaluate_predictions(preds: &[Prediction], ds: &Dataset, variant: &str) -> Result<EvalReport> {
    let n_a = ds.n_a();
    let (mut scores, mut labels, mut present) = (Vec::new(), Vec::new(), Vec::new());
    for p in preds {
        if p.sample_id >= ds.len() || p.scores.len() != n_a {
            return Err(Error::Alignment(format!(
                "prediction for sample {} with {} scores does not fit the dataset",
                p.sample_id,
                p.scores.len()
            )));
        }
        scores.extend_from_slice(&p.scores);
        labels.extend(ds.attr_targets(p.sample_id).iter().map(|&y| y > 0.5));
        present.extend_from_slice(ds.attr_present(p.sample_id));
    }
    let names: Vec<String> = ATTR_NAMES.iter().map(|s| s.to_string()).collect();
    Ok(EvalReport {
        variant: variant.to_string(),
        attributes: Some(attribute_section(&names, &scores, &labels, &present)?),
        segmentation: None,
    })
}

pub fn write_predictions(path: &Path, preds: &[Prediction]) -> Result<()> {
    let mut text = String::new();
    for p in preds {
        text.push_str(&serde_json::to_string(p)?);
        text.push('\n');
    }
    fs::write(path, text)?;
    Ok(())
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let f = fs::File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Alignment(format!("{}: {e}", path.display())))?);
    }
    Ok(out)
}

/// Elementwise mean of two aligned prediction lists.
pub fn ensemble_average(a: &[Prediction], b: &[Prediction]) -> Result<Vec<Prediction>> {
    if a.len() != b.len() {
        return Err(Error::Alignment(format!("{} vs {} predictions", a.len(), b.len())));
    }
    a.iter()
        .zip(b)
        .map(|(pa, pb)| {
            if pa.sample_id != pb.sample_id || pa.scores.len() != pb.scores.len() {
                return Err(Error::Alignment(format!(
                    "sample {} ({} scores) vs sample {} ({} scores)",
                    pa.sample_id,
                    pa.scores.len(),
                    pb.sample_id,
                    pb.scores.len()
                )));
            }
            let scores = pa.scores.iter().zip(&pb.scores).map(|(x, y)| 0.5 * (x + y)).collect();
            Ok(Prediction { sample_id: pa.sample_id, scores })
        })
        .collect()
}

/// Budget of the transfer comparison.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferConfig {
    /// Label-map samples available to every arm.
    pub seg_samples: usize,
    /// Optimizer steps per arm; the pretraining arm spends half on attributes.
    pub steps: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferArm {
    pub name: String,
    pub seg_steps: usize,
    pub pretrain_steps: usize,
    pub mean_iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferReport {
    pub seed: u64,
    pub arms: Vec<TransferArm>,
}

/// Segmentation from scratch, segmentation from an attribute-pretrained
/// trunk, and joint SA training, all with the same label-map pool and the
/// same number of optimizer steps. Scored on `test`.
pub fn pretrain_then_transfer(
    base: &TrainConfig,
    train_data: &Dataset,
    test: &Dataset,
    t: &TransferConfig,
    out: Option<&Path>,
) -> Result<TransferReport> {
    let sub = |name: &str| out.map(|d| d.join(name));
    let iou = |run: &mut TrainRun| -> Result<f64> {
        let mut masks = MaskProvider::None;
        let meta = CheckpointMeta { trained_attrs: false, ..run.meta.clone() };
        let (report, _) = evaluate(&run.model, &mut run.store, test, &mut masks, &meta, base.eval_batch)?;
        report.mean_iou().ok_or(Error::UndefinedMetric("test set has no label maps"))
    };
    let seg_cfg = |variant: Variant, tasks: BatchMode, steps: usize| TrainConfig {
        variant,
        tasks,
        steps: Some(steps),
        max_seg_samples: Some(t.seg_samples),
        mask_source: None,
        init_mode: InitMode::Scratch,
        ..base.clone()
    };
    let pre_steps = t.steps / 2;
    let fine_steps = t.steps - pre_steps;

    let mut scratch =
        train(&seg_cfg(Variant::BaselineGap, BatchMode::SegOnly, t.steps), train_data, sub("scratch").as_deref())?;

    let pre_cfg = seg_cfg(Variant::BaselineGap, BatchMode::AttrOnly, pre_steps);
    let pre = train(&pre_cfg, train_data, sub("attr_pretrain").as_deref())?;
    let mut tr = Trainer::new(&seg_cfg(Variant::BaselineGap, BatchMode::SegOnly, fine_steps), train_data)?;
    tr.load_trunk(&pre.store)?;
    let mut transfer = tr.run(sub("init_from_attr").as_deref())?;

    // doubled mixed batches keep the label-map rows per step equal across arms
    let joint_cfg = TrainConfig { batch_size: 2 * base.batch_size, ..seg_cfg(Variant::Sa, BatchMode::Mixed, t.steps) };
    let mut joint = train(&joint_cfg, train_data, sub("joint_sa").as_deref())?;

    let report = TransferReport {
        seed: base.seed,
        arms: vec![
            TransferArm { name: "scratch".into(), seg_steps: t.steps, pretrain_steps: 0, mean_iou: iou(&mut scratch)? },
            TransferArm {
                name: "init_from_attr".into(),
                seg_steps: fine_steps,
                pretrain_steps: pre_steps,
                mean_iou: iou(&mut transfer)?,
            },
            TransferArm { name: "joint_sa".into(), seg_steps: t.steps, pretrain_steps: 0, mean_iou: iou(&mut joint)? },
        ],
    };
    if let Some(dir) = out {
        fs::write(dir.join("transfer_report.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{generate, GenOptions, SynthSpec};

    #[test]
    fn sgd_momentum_recurrence() {
        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![0.0]), true);
        let grads: BTreeMap<String, Tensor> = [("w".to_string(), Tensor::from_vec(vec![1.0]))].into();
        let mut vel = BTreeMap::new();
        sgd_update(&mut store, &grads, 1.0, 0.9, &mut vel);
        sgd_update(&mut store, &grads, 1.0, 0.9, &mut vel);
        assert!((store.get("w").unwrap().item() + 2.9).abs() < 1e-15);

        // zero gradient: only the residual velocity moves the weight
        sgd_update(&mut store, &BTreeMap::new(), 1.0, 0.9, &mut vel);
        assert!((store.get("w").unwrap().item() + 2.9 + 0.9 * 1.9).abs() < 1e-12);

        let mut store = ParamStore::new();
        store.insert("w", Tensor::from_vec(vec![1.0]), true);
        let mut vel = BTreeMap::new();
        sgd_update(&mut store, &grads, 0.5, 0.0, &mut vel);
        assert_eq!(store.get("w").unwrap().item(), 0.5);
    }

    #[test]
    fn config_requires_keys_and_mask_rules() {
        let err = TrainConfig::from_json(r#"{"variant":"sa","epochs":1,"batch_size":8,"momentum":0.9,"seed":1,"n_s":5,"n_a":8}"#)
            .unwrap_err();
        assert!(matches!(&err, Error::Config(m) if m.contains("lr")), "{err}");
        let ssp = r#"{"variant":"ssp","epochs":1,"batch_size":8,"lr":0.1,"momentum":0.9,"seed":1,"n_s":5,"n_a":8}"#;
        assert!(matches!(TrainConfig::from_json(ssp), Err(Error::Config(_))));
        let sa = r#"{"variant":"sa","epochs":1,"batch_size":8,"lr":0.1,"momentum":0.9,"seed":1,"n_s":5,"n_a":8,
                     "mask_source":"ground_truth_onehot"}"#;
        assert!(matches!(TrainConfig::from_json(sa), Err(Error::Config(_))));
    }

    #[test]
    fn ensemble_examples() {
        let a = vec![Prediction { sample_id: 3, scores: vec![0.2] }];
        let b = vec![Prediction { sample_id: 3, scores: vec![0.8] }];
        assert_eq!(ensemble_average(&a, &b).unwrap()[0].scores, vec![0.5]);
        assert_eq!(ensemble_average(&a, &a).unwrap(), a);
        let c = vec![Prediction { sample_id: 4, scores: vec![0.8] }];
        assert!(matches!(ensemble_average(&a, &c), Err(Error::Alignment(_))));
    }

    #[test]
    fn short_run_is_finite_and_routes_losses() {
        let ds = generate(&SynthSpec { seed: 1, ..SynthSpec::default() }, &GenOptions::new(24, 0.5)).unwrap();
        let cfg = TrainConfig { steps: Some(3), batch_size: 8, ..TrainConfig::new(Variant::Sa, 2) };
        let run = train(&cfg, &ds, None).unwrap();
        assert_eq!(run.records.len(), 3);
        for r in &run.records {
            assert!(r.total.is_finite() && r.l_s.is_some() && r.l_a.is_some());
        }
        let cfg = TrainConfig { tasks: BatchMode::SegOnly, ..cfg };
        let run = train(&cfg, &ds, None).unwrap();
        for r in &run.records {
            assert!(r.l_a.is_none());
            assert_eq!(r.total, r.l_s.unwrap());
        }
    }
}
