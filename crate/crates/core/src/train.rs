//! Training harness: Adam optimization with the stepped learning-rate
//! schedule, per-step loss logging, checkpointing, Recall@K evaluation, and
//! the ablation runner.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{BackboneConfig, BackboneKind, CONV_DOWNSAMPLE};
use crate::data::{
    batch_hash, sample_batches, BatchSpec, Dataset, Manifest, Split, Tokenizer, NUM_PARTS,
};
use crate::embedding::EmbeddingRecord;
use crate::error::{Error, Result};
use crate::graph::{softmax_slice, Tape};
use crate::loss::{commonality, total_loss, BatchVars, LossBreakdown, LossConfig};
use crate::model::{forward_image, forward_text, Model, ModelConfig, ParamGroup};
use crate::retrieval::{recall_at_k_with, GalleryIndex, Query, SimilarityBreakdown};
use crate::tensor::{seeded_rng, Tensor};

/// Flat training configuration; every field is addressable from config files
/// and `PERSEARCH_*` environment overrides.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub identities_per_batch: usize,
    pub samples_per_identity: usize,
    pub base_lr: f64,
    pub lr_decay_factor: f64,
    pub lr_decay_epochs: Vec<usize>,
    pub image_backbone_lr_scale: f64,
    pub freeze_text_backbone: bool,
    pub feature_dim: usize,
    pub n_heads: usize,
    pub num_coarse: usize,
    pub num_fine: usize,
    pub margin: f64,
    pub seed: u64,
    pub image_h: usize,
    pub image_w: usize,
    pub max_words: usize,
    pub flip_augment: bool,
    /// Validate every this many epochs (and always on the last epoch).
    pub eval_every: usize,
    pub use_coarse: bool,
    pub use_fine: bool,
    pub use_cmr: bool,
    pub cmr_on_coarse: bool,
    pub separate_decoders: bool,
    pub single_shared_classifier: bool,
    pub text_position_encoding: bool,
    pub encoder_pre_norm: bool,
    pub foreground_peak_normalize: bool,
    pub commonality_stop_gradient: bool,
    pub exclude_same_identity: bool,
    pub allow_empty_caption: bool,
    pub truncate_captions: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig::desk()
    }
}

impl TrainConfig {
    /// Desk-scale preset: tiny trainable backbones, 64x32 canvases, short
    /// schedule. The optimization recipe (Adam, stepped decay, batch 32,
    /// margin, D = P = 4) matches the full-scale preset.
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 32,
            identities_per_batch: 32,
            samples_per_identity: 1,
            base_lr: 1e-3,
            lr_decay_factor: 0.1,
            // stepped decay like the full-scale schedule, placed for the
            // longer desk run (tiny backbones train from scratch)
            lr_decay_epochs: vec![110, 135],
            image_backbone_lr_scale: 1.0,
            freeze_text_backbone: false,
            feature_dim: 64,
            n_heads: 4,
            num_coarse: 4,
            num_fine: 4,
            margin: 0.2,
            seed: 7,
            image_h: 64,
            image_w: 32,
            max_words: 24,
            flip_augment: true,
            eval_every: 5,
            use_coarse: true,
            use_fine: true,
            use_cmr: true,
            cmr_on_coarse: false,
            separate_decoders: false,
            single_shared_classifier: false,
            text_position_encoding: true,
            encoder_pre_norm: false,
            foreground_peak_normalize: false,
            commonality_stop_gradient: true,
            exclude_same_identity: true,
            allow_empty_caption: false,
            truncate_captions: true,
        }
    }

    /// Full-scale preset: 60 epochs, batch 32, lr 5e-4 decayed 0.1x at
    /// epochs {20, 40, 50, 55}, frozen text backbone, image backbone at a
    /// 0.1 learning-rate scale, 384x128 inputs.
    pub fn paper() -> Self {
        TrainConfig {
            epochs: 60,
            base_lr: 5e-4,
            lr_decay_epochs: vec![20, 40, 50, 55],
            image_backbone_lr_scale: 0.1,
            freeze_text_backbone: true,
            image_h: 384,
            image_w: 128,
            max_words: 64,
            eval_every: 1,
            ..TrainConfig::desk()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "desk" => Ok(TrainConfig::desk()),
            "paper" => Ok(TrainConfig::paper()),
            other => Err(Error::Config(format!(
                "unknown preset `{other}` (expected desk or paper)"
            ))),
        }
    }

    /// Set one field by name from a string value, coercing to the field's
    /// JSON type. Unknown keys error.
    pub fn set_field(&mut self, key: &str, value: &str) -> Result<()> {
        let mut obj = match serde_json::to_value(&*self)? {
            serde_json::Value::Object(o) => o,
            _ => unreachable!("config serializes to an object"),
        };
        let current = obj
            .get(key)
            .ok_or_else(|| Error::Config(format!("unknown config field `{key}`")))?;
        let parsed = coerce_to_type(current, value, key)?;
        obj.insert(key.to_string(), parsed);
        *self = serde_json::from_value(serde_json::Value::Object(obj))?;
        Ok(())
    }

    /// Apply `PREFIX_FIELD=value` environment overrides; returns the applied
    /// field names.
    pub fn apply_env_overrides(&mut self, prefix: &str) -> Result<Vec<String>> {
        let mut applied = Vec::new();
        let vars: BTreeMap<String, String> = std::env::vars().collect();
        for (k, v) in vars {
            if let Some(field) = k.strip_prefix(prefix) {
                let field = field.to_lowercase();
                self.set_field(&field, &v)?;
                applied.push(field);
            }
        }
        Ok(applied)
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".to_string()));
        }
        if !self.lr_decay_epochs.windows(2).all(|w| w[0] < w[1]) {
            return Err(Error::Config(
                "lr_decay_epochs must be strictly increasing".to_string(),
            ));
        }
        if self.lr_decay_epochs.iter().any(|&e| e == 0 || e >= self.epochs) {
            return Err(Error::Config(
                "lr_decay_epochs must lie strictly inside (0, epochs)".to_string(),
            ));
        }
        if self.use_coarse && self.num_coarse == 0 || self.use_fine && self.num_fine == 0 {
            return Err(Error::Config(
                "enabled granularities need at least one slot".to_string(),
            ));
        }
        BatchSpec {
            batch_size: self.batch_size,
            identities_per_batch: self.identities_per_batch,
            samples_per_identity: self.samples_per_identity,
            seed: self.seed,
        }
        .validate()
    }

    /// Effective learning rate at a 1-indexed epoch: the base rate decayed
    /// once per schedule boundary at or below the epoch.
    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let decays = self.lr_decay_epochs.iter().filter(|&&e| epoch >= e).count();
        self.base_lr * self.lr_decay_factor.powi(decays as i32)
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            margin: self.margin,
            commonality_stop_gradient: self.commonality_stop_gradient,
            exclude_same_identity: self.exclude_same_identity,
            use_coarse: self.use_coarse,
            use_fine: self.use_fine,
            use_cmr: self.use_cmr,
            cmr_on_coarse: self.cmr_on_coarse,
        }
    }

    /// Derive the model config for a dataset (vocabulary and identity count
    /// come from the data).
    pub fn model_config(&self, vocab_size: usize, num_identities: usize) -> Result<ModelConfig> {
        if !self.image_h.is_multiple_of(CONV_DOWNSAMPLE) || !self.image_w.is_multiple_of(CONV_DOWNSAMPLE) {
            return Err(Error::Config(format!(
                "image size {}x{} must be divisible by the conv downsample factor {}",
                self.image_h, self.image_w, CONV_DOWNSAMPLE
            )));
        }
        let cfg = ModelConfig {
            feature_dim: self.feature_dim,
            n_heads: self.n_heads,
            num_coarse: self.num_coarse,
            num_fine: self.num_fine,
            num_identities,
            backbone: BackboneConfig {
                feature_dim: self.feature_dim,
                grid_w: self.image_w / CONV_DOWNSAMPLE,
                grid_h: self.image_h / CONV_DOWNSAMPLE,
                image_h: self.image_h,
                image_w: self.image_w,
                max_words: self.max_words,
                vocab_size,
                visual_kind: BackboneKind::TinyConv,
                textual_kind: BackboneKind::TinyTransformer,
                allow_empty_caption: self.allow_empty_caption,
                truncate_captions: self.truncate_captions,
            },
            use_coarse: self.use_coarse,
            use_fine: self.use_fine,
            text_position_encoding: self.text_position_encoding,
            encoder_pre_norm: self.encoder_pre_norm,
            foreground_peak_normalize: self.foreground_peak_normalize,
            separate_decoders: self.separate_decoders,
            single_shared_classifier: self.single_shared_classifier,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

fn coerce_to_type(
    current: &serde_json::Value,
    value: &str,
    key: &str,
) -> Result<serde_json::Value> {
    use serde_json::Value;
    let bad = || Error::Config(format!("cannot parse `{value}` for field `{key}`"));
    Ok(match current {
        Value::Bool(_) => Value::Bool(value.parse::<bool>().map_err(|_| bad())?),
        Value::Number(n) if n.is_u64() => Value::from(value.parse::<u64>().map_err(|_| bad())?),
        Value::Number(_) => Value::from(value.parse::<f64>().map_err(|_| bad())?),
        Value::Array(_) => Value::Array(
            value
                .split(',')
                .filter(|s| !s.trim().is_empty())
                .map(|s| s.trim().parse::<u64>().map(Value::from).map_err(|_| bad()))
                .collect::<Result<Vec<Value>>>()?,
        ),
        Value::String(_) => Value::String(value.to_string()),
        _ => return Err(bad()),
    })
}

// ---------------------------------------------------------------------------
// Optimizer
// ---------------------------------------------------------------------------

/// Adam with per-group learning-rate scaling.
#[derive(Clone, Debug)]
pub struct Adam {
    pub m: Vec<Tensor>,
    pub v: Vec<Tensor>,
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Adam {
    pub fn new(model: &Model) -> Adam {
        let mut m = Vec::new();
        model.for_each_param(|_, _, t| m.push(Tensor::zeros(t.shape().to_vec())));
        Adam {
            v: m.clone(),
            m,
            t: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }

    /// Apply one update from sparse (flat index, gradient) pairs.
    pub fn step(
        &mut self,
        model: &mut Model,
        grads: &[(usize, Tensor)],
        lr: f64,
        image_backbone_scale: f64,
    ) {
        self.t += 1;
        let mut dense: Vec<Option<&Tensor>> = vec![None; self.m.len()];
        for (idx, g) in grads {
            dense[*idx] = Some(g);
        }
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let (b1, b2, eps) = (self.beta1, self.beta2, self.eps);
        let (ms, vs) = (&mut self.m, &mut self.v);
        let mut idx = 0usize;
        model.for_each_param_mut(|_, group, tensor| {
            if let Some(g) = dense[idx] {
                let group_lr = match group {
                    ParamGroup::ImageBackbone => lr * image_backbone_scale,
                    _ => lr,
                };
                let m = &mut ms[idx];
                let v = &mut vs[idx];
                for i in 0..tensor.len() {
                    let gi = g.data()[i];
                    let mi = b1 * m.data()[i] + (1.0 - b1) * gi;
                    let vi = b2 * v.data()[i] + (1.0 - b2) * gi * gi;
                    m.data_mut()[i] = mi;
                    v.data_mut()[i] = vi;
                    let mhat = mi / bc1;
                    let vhat = vi / bc2;
                    tensor.data_mut()[i] -= group_lr * mhat / (vhat.sqrt() + eps);
                }
            }
            idx += 1;
        });
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 4] = b"PSCK";
const CKPT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    train_config: TrainConfig,
    model_config: ModelConfig,
    vocab: Vec<String>,
    epoch: usize,
    best_val_r1: Option<f64>,
    adam_t: Option<u64>,
}

/// A complete training snapshot. Reloading reproduces forward outputs
/// bit-identically: parameters round-trip as raw f64 bytes.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub train_config: TrainConfig,
    pub model: Model,
    pub vocab: Vec<String>,
    pub epoch: usize,
    pub best_val_r1: Option<f64>,
    pub adam: Option<Adam>,
}

impl Checkpoint {
    pub fn tokenizer(&self) -> Tokenizer {
        Tokenizer::from_words(self.vocab.clone())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = std::io::BufWriter::new(fs::File::create(path)?);
        w.write_all(CKPT_MAGIC)?;
        w.write_all(&CKPT_VERSION.to_le_bytes())?;
        let header = serde_json::to_vec(&CheckpointHeader {
            train_config: self.train_config.clone(),
            model_config: self.model.cfg.clone(),
            vocab: self.vocab.clone(),
            epoch: self.epoch,
            best_val_r1: self.best_val_r1,
            adam_t: self.adam.as_ref().map(|a| a.t),
        })?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;

        let mut write_block = |tensors: &[(&str, &Tensor)]| -> Result<()> {
            w.write_all(&(tensors.len() as u32).to_le_bytes())?;
            for (name, t) in tensors {
                let nb = name.as_bytes();
                w.write_all(&(nb.len() as u32).to_le_bytes())?;
                w.write_all(nb)?;
                w.write_all(&(t.rank() as u32).to_le_bytes())?;
                for &d in t.shape() {
                    w.write_all(&(d as u32).to_le_bytes())?;
                }
                for &v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            Ok(())
        };

        let mut named: Vec<(String, Tensor)> = Vec::new();
        self.model
            .for_each_param(|n, _, t| named.push((n.to_string(), t.clone())));
        let refs: Vec<(&str, &Tensor)> = named.iter().map(|(n, t)| (n.as_str(), t)).collect();
        write_block(&refs)?;

        if let Some(adam) = &self.adam {
            let m_named: Vec<(String, Tensor)> = named
                .iter()
                .zip(&adam.m)
                .map(|((n, _), t)| (format!("m.{n}"), t.clone()))
                .collect();
            let refs: Vec<(&str, &Tensor)> = m_named.iter().map(|(n, t)| (n.as_str(), t)).collect();
            write_block(&refs)?;
            let v_named: Vec<(String, Tensor)> = named
                .iter()
                .zip(&adam.v)
                .map(|((n, _), t)| (format!("v.{n}"), t.clone()))
                .collect();
            let refs: Vec<(&str, &Tensor)> = v_named.iter().map(|(n, t)| (n.as_str(), t)).collect();
            write_block(&refs)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        let mut r = std::io::BufReader::new(fs::File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CKPT_MAGIC {
            return Err(Error::Checkpoint("bad magic".to_string()));
        }
        let mut b4 = [0u8; 4];
        r.read_exact(&mut b4)?;
        if u32::from_le_bytes(b4) != CKPT_VERSION {
            return Err(Error::Checkpoint("unsupported version".to_string()));
        }
        let mut b8 = [0u8; 8];
        r.read_exact(&mut b8)?;
        let hlen = u64::from_le_bytes(b8) as usize;
        let mut hbuf = vec![0u8; hlen];
        r.read_exact(&mut hbuf)?;
        let header: CheckpointHeader = serde_json::from_slice(&hbuf)?;

        let read_block = |r: &mut std::io::BufReader<fs::File>| -> Result<BTreeMap<String, Tensor>> {
            let mut b4 = [0u8; 4];
            r.read_exact(&mut b4)?;
            let count = u32::from_le_bytes(b4) as usize;
            let mut out = BTreeMap::new();
            for _ in 0..count {
                r.read_exact(&mut b4)?;
                let nlen = u32::from_le_bytes(b4) as usize;
                let mut nbuf = vec![0u8; nlen];
                r.read_exact(&mut nbuf)?;
                let name = String::from_utf8(nbuf)
                    .map_err(|_| Error::Checkpoint("bad name".to_string()))?;
                r.read_exact(&mut b4)?;
                let rank = u32::from_le_bytes(b4) as usize;
                let mut shape = Vec::with_capacity(rank);
                for _ in 0..rank {
                    r.read_exact(&mut b4)?;
                    shape.push(u32::from_le_bytes(b4) as usize);
                }
                let n: usize = shape.iter().product();
                let mut data = Vec::with_capacity(n);
                let mut b8 = [0u8; 8];
                for _ in 0..n {
                    r.read_exact(&mut b8)?;
                    data.push(f64::from_le_bytes(b8));
                }
                out.insert(name, Tensor::new(shape, data));
            }
            Ok(out)
        };

        // materialize the structure, then overwrite every tensor
        let mut model = Model::init(header.model_config.clone(), 0)?;
        let params = read_block(&mut r)?;
        let mut missing = Vec::new();
        model.for_each_param_mut(|name, _, t| match params.get(name) {
            Some(loaded) if loaded.shape() == t.shape() => *t = loaded.clone(),
            Some(_) => missing.push(format!("{name} (shape mismatch)")),
            None => missing.push(name.to_string()),
        });
        if !missing.is_empty() {
            return Err(Error::Checkpoint(format!(
                "missing or mismatched parameters: {missing:?}"
            )));
        }

        let adam = if let Some(t) = header.adam_t {
            let m_block = read_block(&mut r)?;
            let v_block = read_block(&mut r)?;
            let mut adam = Adam::new(&model);
            adam.t = t;
            let mut idx = 0;
            let mut err = None;
            model.for_each_param(|name, _, _| {
                match (m_block.get(&format!("m.{name}")), v_block.get(&format!("v.{name}"))) {
                    (Some(m), Some(v)) => {
                        adam.m[idx] = m.clone();
                        adam.v[idx] = v.clone();
                    }
                    _ => err = Some(name.to_string()),
                }
                idx += 1;
            });
            if let Some(name) = err {
                return Err(Error::Checkpoint(format!("missing optimizer state for {name}")));
            }
            Some(adam)
        } else {
            None
        };

        Ok(Checkpoint {
            train_config: header.train_config,
            model,
            vocab: header.vocab,
            epoch: header.epoch,
            best_val_r1: header.best_val_r1,
            adam,
        })
    }
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

/// One structured log line per optimization step.
#[derive(Serialize)]
struct StepLog<'a> {
    step: usize,
    epoch: usize,
    lr: f64,
    #[serde(flatten)]
    loss: &'a LossBreakdown,
}

#[derive(Clone, Debug, Serialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub mean_total: f64,
    pub mean_id_visual: f64,
    pub mean_id_text: f64,
    pub mean_ranking: f64,
    pub mean_cmr: f64,
    pub val_r1: Option<f64>,
}

pub struct TrainOutcome {
    /// Snapshot with the best validation R@1 (falls back to the final epoch
    /// when there is no validation split).
    pub best: Checkpoint,
    /// Final-epoch snapshot.
    pub last: Checkpoint,
    pub history: Vec<EpochStats>,
    /// Captions that exceeded max_words and were truncated.
    pub truncated_captions: usize,
    /// FNV hash of the full epoch-by-epoch batch order.
    pub data_order_hash: u64,
}

/// Train a model on the dataset's train split. `step_log` receives one JSON
/// line per step when provided.
pub fn train(
    cfg: &TrainConfig,
    dataset: &Dataset,
    mut step_log: Option<&mut dyn Write>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let train_records = dataset.records_in(Split::Train);
    if train_records.is_empty() {
        return Err(Error::Config("dataset has no train records".to_string()));
    }
    let tokenizer = Tokenizer::from_captions(
        train_records
            .iter()
            .map(|&i| dataset.records[i].caption.as_str()),
    );
    let model_cfg = cfg.model_config(tokenizer.vocab_size(), dataset.num_identities)?;
    let mut model = Model::init(model_cfg, cfg.seed)?;
    let mut adam = Adam::new(&model);
    let loss_cfg = cfg.loss_config();

    // preload and cache train images
    let mut image_cache: BTreeMap<usize, Tensor> = BTreeMap::new();
    for &ri in &train_records {
        let img_idx = dataset.records[ri].image;
        if let std::collections::btree_map::Entry::Vacant(e) = image_cache.entry(img_idx) {
            e.insert(dataset.load_image(img_idx)?);
        }
    }
    // tokenize once, counting truncations
    let mut truncated = 0usize;
    let tokens: BTreeMap<usize, Vec<usize>> = train_records
        .iter()
        .map(|&ri| {
            let ids = tokenizer.encode(&dataset.records[ri].caption);
            if ids.len() > cfg.max_words {
                truncated += 1;
            }
            (ri, ids)
        })
        .collect();
    let labels: Vec<u32> = dataset.records.iter().map(|r| r.identity).collect();

    let batch_spec = BatchSpec {
        batch_size: cfg.batch_size.min(train_records.len()),
        identities_per_batch: cfg.identities_per_batch.min(dataset.num_identities),
        samples_per_identity: cfg.samples_per_identity,
        seed: cfg.seed,
    };
    let batch_spec = if batch_spec.batch_size
        != batch_spec.identities_per_batch * batch_spec.samples_per_identity
    {
        BatchSpec {
            batch_size: batch_spec.identities_per_batch * batch_spec.samples_per_identity,
            ..batch_spec
        }
    } else {
        batch_spec
    };

    let val_records = dataset.records_in(Split::Val);
    let has_val = !val_records.is_empty();

    let mut history = Vec::new();
    let mut best: Option<(f64, Checkpoint)> = None;
    let mut step = 0usize;
    let mut order_hash: u64 = 0xcbf2_9ce4_8422_2325;

    for epoch in 1..=cfg.epochs {
        let lr = cfg.lr_at_epoch(epoch);
        let batches = sample_batches(&train_records, &labels, &batch_spec, epoch as u64)?;
        order_hash ^= batch_hash(&batches).rotate_left((epoch % 63) as u32);
        let mut flip_rng = seeded_rng(cfg.seed ^ 0xF11F ^ (epoch as u64) << 17);

        let mut sums = [0.0f64; 5];
        for batch in &batches {
            step += 1;
            let mut tape = Tape::new();
            let vars = model.vars(&mut tape, true, cfg.freeze_text_backbone);
            let mut visual = Vec::with_capacity(batch.len());
            let mut text = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &ri in batch {
                let rec = &dataset.records[ri];
                let mut img = image_cache[&rec.image].clone();
                if cfg.flip_augment && flip_rng.gen::<bool>() {
                    img = flip_horizontal(&img);
                }
                let fwd_i = forward_image(&mut tape, &model.cfg, &vars, &img)?;
                let fwd_t = forward_text(&mut tape, &model.cfg, &vars, &tokens[&ri])?;
                visual.push(fwd_i.set);
                text.push(fwd_t.set);
                batch_labels.push(rec.identity);
            }
            let batch_vars = BatchVars {
                visual,
                text,
                labels: batch_labels,
            };
            let (loss, breakdown) = total_loss(&mut tape, &batch_vars, &loss_cfg, &vars.classifiers)?;
            guard_divergence(step, &breakdown)?;

            let grads = tape.backward(loss);
            let param_grads = tape.param_grads(&grads);
            adam.step(&mut model, &param_grads, lr, cfg.image_backbone_lr_scale);

            sums[0] += breakdown.total;
            sums[1] += breakdown.id_visual;
            sums[2] += breakdown.id_text;
            sums[3] += breakdown.ranking;
            sums[4] += breakdown.cmr;
            if let Some(log) = step_log.as_deref_mut() {
                serde_json::to_writer(
                    &mut *log,
                    &StepLog {
                        step,
                        epoch,
                        lr,
                        loss: &breakdown,
                    },
                )?;
                log.write_all(b"\n")?;
            }
        }

        let nb = batches.len().max(1) as f64;
        let val_r1 = if (has_val && epoch % cfg.eval_every == 0) || epoch == cfg.epochs {
            if has_val {
                let report = evaluate(&model, &tokenizer, dataset, Split::Val, &[1], false)?;
                Some(report.recall[&1])
            } else {
                None
            }
        } else {
            None
        };
        history.push(EpochStats {
            epoch,
            lr,
            mean_total: sums[0] / nb,
            mean_id_visual: sums[1] / nb,
            mean_id_text: sums[2] / nb,
            mean_ranking: sums[3] / nb,
            mean_cmr: sums[4] / nb,
            val_r1,
        });

        if let Some(r1) = val_r1 {
            if best.as_ref().is_none_or(|(b, _)| r1 > *b) {
                best = Some((
                    r1,
                    Checkpoint {
                        train_config: cfg.clone(),
                        model: model.clone(),
                        vocab: tokenizer.words().to_vec(),
                        epoch,
                        best_val_r1: Some(r1),
                        adam: Some(adam.clone()),
                    },
                ));
            }
        }
    }

    let last = Checkpoint {
        train_config: cfg.clone(),
        model,
        vocab: tokenizer.words().to_vec(),
        epoch: cfg.epochs,
        best_val_r1: best.as_ref().map(|(r1, _)| *r1),
        adam: Some(adam),
    };
    let best = best.map(|(_, c)| c).unwrap_or_else(|| last.clone());
    Ok(TrainOutcome {
        best,
        last,
        history,
        truncated_captions: truncated,
        data_order_hash: order_hash,
    })
}

fn guard_divergence(step: usize, breakdown: &LossBreakdown) -> Result<()> {
    let terms = [
        ("id_visual", breakdown.id_visual),
        ("id_text", breakdown.id_text),
        ("ranking", breakdown.ranking),
        ("cmr", breakdown.cmr),
        ("total", breakdown.total),
    ];
    for (name, v) in terms {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                term: name.to_string(),
            });
        }
    }
    Ok(())
}

/// Mirror a (3, H, W) image along its width.
pub fn flip_horizontal(img: &Tensor) -> Tensor {
    let (c, h, w) = (img.shape()[0], img.shape()[1], img.shape()[2]);
    let mut out = Tensor::zeros(vec![c, h, w]);
    for ch in 0..c {
        for y in 0..h {
            for x in 0..w {
                out.data_mut()[(ch * h + y) * w + x] = img.data()[(ch * h + y) * w + (w - 1 - x)];
            }
        }
    }
    out
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct EvalReport {
    pub split: String,
    pub num_gallery: usize,
    pub num_queries: usize,
    pub recall: BTreeMap<usize, f64>,
    /// Optional per-granularity recall (scored by one slot family alone).
    pub per_granularity: Option<BTreeMap<String, BTreeMap<usize, f64>>>,
}

/// Build the split's gallery index from every split image.
pub fn build_gallery(
    model: &Model,
    dataset: &Dataset,
    split: Split,
) -> Result<GalleryIndex> {
    let image_indices = dataset.images_in(split);
    if image_indices.is_empty() {
        return Err(Error::Config(format!("no {split:?} images in dataset")));
    }
    let records = image_indices
        .par_iter()
        .map(|&idx| {
            let img = dataset.load_image(idx)?;
            let out = model.embed_image(&img)?;
            Ok(EmbeddingRecord {
                id: idx as u32,
                identity: dataset.images[idx].identity,
                set: out.set,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    GalleryIndex::new(records)
}

/// Encode every split caption as a query.
pub fn build_queries(
    model: &Model,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    split: Split,
) -> Result<Vec<Query>> {
    let record_indices = dataset.records_in(split);
    record_indices
        .par_iter()
        .map(|&ri| {
            let rec = &dataset.records[ri];
            let out = model.embed_text(&tokenizer.encode(&rec.caption))?;
            Ok(Query {
                id: ri as u32,
                identity: rec.identity,
                set: out.set,
            })
        })
        .collect()
}

/// Rank every split caption against the split's image gallery and report
/// R@K (identity-level hits).
pub fn evaluate(
    model: &Model,
    tokenizer: &Tokenizer,
    dataset: &Dataset,
    split: Split,
    ks: &[usize],
    per_granularity: bool,
) -> Result<EvalReport> {
    let index = build_gallery(model, dataset, split)?;
    let queries = build_queries(model, tokenizer, dataset, split)?;
    let recall = recall_at_k_with(&queries, &index, ks, crate::retrieval::pair_similarity)?;

    let per_granularity = if per_granularity {
        type Picker = Box<dyn Fn(&SimilarityBreakdown) -> f64 + Sync>;
        let mut out = BTreeMap::new();
        let families: Vec<(&str, Picker)> = vec![
            ("global", Box::new(|b: &SimilarityBreakdown| b.global)),
            ("coarse", Box::new(|b: &SimilarityBreakdown| b.coarse.iter().sum())),
            ("fine", Box::new(|b: &SimilarityBreakdown| b.fine.iter().sum())),
        ];
        for (name, pick) in families {
            if name == "coarse" && !model.cfg.use_coarse {
                continue;
            }
            if name == "fine" && !model.cfg.use_fine {
                continue;
            }
            let r = recall_at_k_with(&queries, &index, ks, |a, b| {
                let (_, bd) = crate::retrieval::pair_similarity(a, b)?;
                Ok((pick(&bd), bd))
            })?;
            out.insert(name.to_string(), r);
        }
        Some(out)
    } else {
        None
    };

    Ok(EvalReport {
        split: format!("{split:?}").to_lowercase(),
        num_gallery: index.len(),
        num_queries: queries.len(),
        recall,
        per_granularity,
    })
}

// ---------------------------------------------------------------------------
// Commonality audit (manifest oracle)
// ---------------------------------------------------------------------------

/// Mean commonality of visual fine slots, split by the manifest's
/// ground-truth part sharing.
#[derive(Clone, Debug, Serialize)]
pub struct CommonalityAudit {
    pub shared_mean: f64,
    pub unique_mean: f64,
    pub shared_count: usize,
    pub unique_count: usize,
}

/// Classify every train image's fine embeddings and compare slot commonality
/// against the manifest: slots whose part attribute is shared across
/// identities should score higher than unique-attribute slots.
pub fn commonality_audit(
    model: &Model,
    dataset: &Dataset,
    manifest: &Manifest,
) -> Result<CommonalityAudit> {
    if !model.cfg.use_fine || model.cfg.num_fine != NUM_PARTS {
        return Err(Error::Config(format!(
            "commonality audit expects {NUM_PARTS} fine slots"
        )));
    }
    let dd = if model.cfg.use_coarse { model.cfg.num_coarse } else { 0 };
    let mut shared = (0.0, 0usize);
    let mut unique = (0.0, 0usize);
    for idx in dataset.images_in(Split::Train) {
        let img = dataset.load_image(idx)?;
        let out = model.embed_image(&img)?;
        let identity = dataset.images[idx].identity;
        for slot in 0..NUM_PARTS {
            let clf = if model.cfg.single_shared_classifier {
                &model.params.classifiers[0]
            } else {
                &model.params.classifiers[1 + dd + slot]
            };
            let f = &out.set.fine[slot];
            let c = clf.cols();
            let logits: Vec<f64> = (0..c)
                .map(|j| (0..f.len()).map(|i| f[i] * clf.at2(i, j)).sum())
                .collect();
            let com = commonality(&softmax_slice(&logits))?;
            if manifest.is_shared(identity, slot) {
                shared.0 += com;
                shared.1 += 1;
            } else {
                unique.0 += com;
                unique.1 += 1;
            }
        }
    }
    Ok(CommonalityAudit {
        shared_mean: if shared.1 > 0 { shared.0 / shared.1 as f64 } else { 0.0 },
        unique_mean: if unique.1 > 0 { unique.0 / unique.1 as f64 } else { 0.0 },
        shared_count: shared.1,
        unique_count: unique.1,
    })
}

// ---------------------------------------------------------------------------
// Ablation runner
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub name: String,
    pub coarse: bool,
    pub fine: bool,
    pub cmr: bool,
    pub test_recall: BTreeMap<usize, f64>,
    pub data_order_hash: u64,
    pub commonality: Option<CommonalityAudit>,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    pub fn row(&self, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.name == name)
    }

    /// Plain-text comparison table.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "{:<24} {:>6} {:>5} {:>4} {:>8} {:>8} {:>8}\n",
            "method", "coarse", "fine", "cmr", "R@1", "R@5", "R@10"
        ));
        for r in &self.rows {
            let mark = |b: bool| if b { "x" } else { "-" };
            s.push_str(&format!(
                "{:<24} {:>6} {:>5} {:>4} {:>8.4} {:>8.4} {:>8.4}\n",
                r.name,
                mark(r.coarse),
                mark(r.fine),
                mark(r.cmr),
                r.test_recall.get(&1).copied().unwrap_or(f64::NAN),
                r.test_recall.get(&5).copied().unwrap_or(f64::NAN),
                r.test_recall.get(&10).copied().unwrap_or(f64::NAN),
            ));
        }
        s
    }
}

/// The standard grid: the component ablation rows plus the CMR-placement and
/// separated-decoder variants, all sharing the base seed and data order.
pub fn standard_grid(base: &TrainConfig) -> Vec<(String, TrainConfig)> {
    let mut rows = Vec::new();
    let mut baseline = base.clone();
    baseline.use_coarse = false;
    baseline.use_fine = false;
    baseline.use_cmr = false;
    rows.push(("baseline".to_string(), baseline));

    let mut coarse = base.clone();
    coarse.use_coarse = true;
    coarse.use_fine = false;
    coarse.use_cmr = false;
    rows.push(("coarse".to_string(), coarse));

    let mut fine = base.clone();
    fine.use_coarse = true;
    fine.use_fine = true;
    fine.use_cmr = false;
    rows.push(("coarse+fine".to_string(), fine));

    let mut full = base.clone();
    full.use_coarse = true;
    full.use_fine = true;
    full.use_cmr = true;
    rows.push(("coarse+fine+cmr".to_string(), full.clone()));

    let mut cmr_everywhere = full.clone();
    cmr_everywhere.cmr_on_coarse = true;
    rows.push(("cmr-on-coarse-and-fine".to_string(), cmr_everywhere));

    let mut separated = full;
    separated.separate_decoders = true;
    rows.push(("separated-decoders".to_string(), separated));

    rows
}

/// Train and evaluate every grid row on the dataset (rows run in parallel).
/// All rows share the seed; their data-order hashes must agree.
pub fn run_ablation(
    grid: &[(String, TrainConfig)],
    dataset: &Dataset,
    manifest: Option<&Manifest>,
) -> Result<AblationReport> {
    let rows: Vec<AblationRow> = grid
        .par_iter()
        .map(|(name, cfg)| {
            let outcome = train(cfg, dataset, None)?;
            let tokenizer = outcome.best.tokenizer();
            let eval_split = if dataset.records_in(Split::Test).is_empty() {
                Split::Train
            } else {
                Split::Test
            };
            let report = evaluate(
                &outcome.best.model,
                &tokenizer,
                dataset,
                eval_split,
                &[1, 5, 10],
                false,
            )?;
            let audit = match (manifest, cfg.use_fine && cfg.num_fine == NUM_PARTS) {
                (Some(m), true) => Some(commonality_audit(&outcome.best.model, dataset, m)?),
                _ => None,
            };
            Ok(AblationRow {
                name: name.clone(),
                coarse: cfg.use_coarse,
                fine: cfg.use_fine,
                cmr: cfg.use_cmr,
                test_recall: report.recall,
                data_order_hash: outcome.data_order_hash,
                commonality: audit,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    // identical data order across rows under one seed
    if let Some(first) = rows.first() {
        for r in &rows {
            if r.data_order_hash != first.data_order_hash {
                return Err(Error::Config(format!(
                    "ablation rows consumed different data orders: {} vs {}",
                    first.name, r.name
                )));
            }
        }
    }
    Ok(AblationReport { rows })
}
