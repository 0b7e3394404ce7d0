//! Pluggable feature extractors: raw images to spatial feature grids and
//! token id sequences to per-word features.
//!
//! The defaults are deliberately tiny — a 4-layer strided conv net for images
//! and an embedding table plus one self-attention block for text — because
//! everything this crate contributes sits downstream of the backbones.
//! Full-scale extractors (ResNet/ViT/BERT class models) attach through the
//! [`BackboneRegistry`] plugin interface as long as they honor the shape
//! contract: `(h, w, d)` feature grids and `(l, d)` token sequences.

use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use crate::attention::{encode_graph, AttentionParameters};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::tensor::Tensor;

/// Downsampling factor of the default conv backbone (4 stride-2 layers).
pub const CONV_DOWNSAMPLE: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BackboneKind {
    TinyConv,
    TinyTransformer,
    ExternalPlugin,
}

/// Shape contract for one modality pair of extractors.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct BackboneConfig {
    /// Feature dimension d (must divide by the attention head count used
    /// downstream; validated by the model config).
    pub feature_dim: usize,
    /// Visual grid (w, h); r = w * h positions after flattening.
    pub grid_w: usize,
    pub grid_h: usize,
    /// Expected raw image size (height, width) in pixels.
    pub image_h: usize,
    pub image_w: usize,
    /// Maximum number of words l.
    pub max_words: usize,
    pub vocab_size: usize,
    pub visual_kind: BackboneKind,
    pub textual_kind: BackboneKind,
    /// When a caption tokenizes to zero words: error (false) or emit the
    /// single reserved token (true).
    pub allow_empty_caption: bool,
    /// When a caption exceeds `max_words`: truncate (true, counted) or
    /// error (false).
    pub truncate_captions: bool,
}

impl BackboneConfig {
    pub fn seq_positions(&self) -> usize {
        self.grid_w * self.grid_h
    }

    pub fn validate(&self) -> Result<()> {
        if self.feature_dim == 0
            || self.grid_w == 0
            || self.grid_h == 0
            || self.max_words == 0
            || self.vocab_size == 0
        {
            return Err(Error::Config(
                "backbone dimensions must be positive".to_string(),
            ));
        }
        if self.visual_kind == BackboneKind::TinyConv
            && (self.image_h != self.grid_h * CONV_DOWNSAMPLE
                || self.image_w != self.grid_w * CONV_DOWNSAMPLE)
        {
            return Err(Error::Config(format!(
                "tiny-conv expects image {}x{} for grid {}x{}",
                self.grid_h * CONV_DOWNSAMPLE,
                self.grid_w * CONV_DOWNSAMPLE,
                self.grid_h,
                self.grid_w
            )));
        }
        Ok(())
    }
}

/// Spatially arranged feature grid for one image, stored `(h, w, d)` so the
/// row-major flattening walks the grid top-to-bottom, and contiguous row
/// blocks are horizontal bands.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatureMap {
    data: Tensor,
}

impl VisualFeatureMap {
    pub fn new(data: Tensor) -> Result<Self> {
        if data.rank() != 3 {
            return Err(Error::ShapeMismatch {
                context: "visual feature map".to_string(),
                expected: vec![3],
                got: vec![data.rank()],
            });
        }
        data.check_finite("visual feature map")?;
        Ok(VisualFeatureMap { data })
    }

    pub fn grid_h(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn grid_w(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn dim(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn data(&self) -> &Tensor {
        &self.data
    }

    /// Flatten to (r, d) with r = h * w, row-major over (y, x).
    pub fn flatten(&self) -> Tensor {
        let (h, w, d) = (self.grid_h(), self.grid_w(), self.dim());
        self.data.clone().reshape(vec![h * w, d])
    }

    pub fn value_at(&self, y: usize, x: usize, c: usize) -> f64 {
        let (w, d) = (self.grid_w(), self.dim());
        self.data.data()[(y * w + x) * d + c]
    }
}

/// Per-word text features with a validity mask; padded rows are zero and
/// masked out of pooling and attention.
#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    pub data: Tensor,
    pub mask: Vec<bool>,
}

impl TokenSequence {
    pub fn new(data: Tensor, mask: Vec<bool>) -> Result<Self> {
        if data.rank() != 2 || data.rows() != mask.len() {
            return Err(Error::ShapeMismatch {
                context: "token sequence".to_string(),
                expected: vec![mask.len()],
                got: data.shape().to_vec(),
            });
        }
        if !mask.iter().any(|&b| b) {
            return Err(Error::AllMasked("token sequence".to_string()));
        }
        data.check_finite("token sequence")?;
        Ok(TokenSequence { data, mask })
    }

    pub fn valid_words(&self) -> usize {
        self.mask.iter().filter(|&&b| b).count()
    }
}

/// One strided convolution with an optional ReLU.
#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub weight: Tensor, // (out, in, k, k)
    pub bias: Tensor,   // (out)
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

/// Default image extractor: 4 stride-2 conv layers, 3 -> 16 -> 32 -> 64 -> d.
#[derive(Clone, Debug)]
pub struct TinyConvBackbone {
    pub layers: Vec<ConvLayer>,
}

impl TinyConvBackbone {
    pub fn init<R: Rng>(cfg: &BackboneConfig, rng: &mut R) -> Self {
        let chans = [3usize, 16, 32, 64, cfg.feature_dim];
        let layers = chans
            .windows(2)
            .enumerate()
            .map(|(i, io)| {
                let (cin, cout) = (io[0], io[1]);
                let fan_in = (cin * 9) as f64;
                ConvLayer {
                    weight: Tensor::randn(vec![cout, cin, 3, 3], (2.0 / fan_in).sqrt(), rng),
                    bias: Tensor::zeros(vec![cout]),
                    stride: 2,
                    pad: 1,
                    relu: i < 3,
                }
            })
            .collect();
        TinyConvBackbone { layers }
    }

    pub fn vars(&self, tape: &mut Tape, trainable: bool) -> Vec<ConvLayerVars> {
        self.layers
            .iter()
            .map(|l| ConvLayerVars {
                weight: if trainable {
                    tape.free_param(l.weight.clone())
                } else {
                    tape.leaf(l.weight.clone())
                },
                bias: if trainable {
                    tape.free_param(l.bias.clone())
                } else {
                    tape.leaf(l.bias.clone())
                },
                stride: l.stride,
                pad: l.pad,
                relu: l.relu,
            })
            .collect()
    }
}

#[derive(Clone)]
pub struct ConvLayerVars {
    pub weight: Var,
    pub bias: Var,
    pub stride: usize,
    pub pad: usize,
    pub relu: bool,
}

/// Run a conv stack on a tape: image (C, H, W) -> flattened features (r, d).
pub fn conv_forward_graph(
    tape: &mut Tape,
    image: Var,
    layers: &[ConvLayerVars],
) -> Result<Var> {
    let mut x = image;
    for l in layers {
        x = tape.conv2d(x, l.weight, l.bias, l.stride, l.pad)?;
        if l.relu {
            x = tape.relu(x);
        }
    }
    Ok(tape.chw_to_rows(x))
}

/// Default text extractor: embedding lookup plus one self-attention block
/// with a residual connection.
#[derive(Clone, Debug)]
pub struct TinyTextBackbone {
    pub table: Tensor, // (vocab, d)
    pub attn: AttentionParameters,
}

impl TinyTextBackbone {
    pub fn init<R: Rng>(cfg: &BackboneConfig, n_heads: usize, rng: &mut R) -> Result<Self> {
        // Trained from scratch, so the table starts at feature scale; the
        // pooled text embedding must differ across captions from step one.
        Ok(TinyTextBackbone {
            table: Tensor::randn(vec![cfg.vocab_size, cfg.feature_dim], 0.3, rng),
            attn: AttentionParameters::init(cfg.feature_dim, n_heads, rng)?,
        })
    }
}

/// Run the text backbone on a tape: ids -> (l, d) rows with padding zeroed.
/// Returns the padded features and the validity mask.
pub fn text_forward_graph(
    tape: &mut Tape,
    table: Var,
    attn: &crate::attention::AttentionVars,
    token_ids: &[usize],
    cfg: &BackboneConfig,
) -> Result<(Var, Vec<bool>)> {
    let ids = check_token_ids(token_ids, cfg)?;
    let embedded = tape.embed(table, &ids)?;
    let attended = encode_graph(tape, embedded, None, attn, false)?;
    let padded = tape.pad_rows(attended, cfg.max_words)?;
    let mut mask = vec![false; cfg.max_words];
    for m in mask.iter_mut().take(ids.len()) {
        *m = true;
    }
    Ok((padded, mask))
}

fn check_token_ids(token_ids: &[usize], cfg: &BackboneConfig) -> Result<Vec<usize>> {
    if token_ids.is_empty() {
        if cfg.allow_empty_caption {
            return Ok(vec![0]);
        }
        return Err(Error::EmptyCaption);
    }
    for &id in token_ids {
        if id >= cfg.vocab_size {
            return Err(Error::TokenOutOfRange {
                id,
                vocab: cfg.vocab_size,
            });
        }
    }
    if token_ids.len() > cfg.max_words {
        if !cfg.truncate_captions {
            return Err(Error::SequenceOverflow {
                len: token_ids.len(),
                max: cfg.max_words,
            });
        }
        return Ok(token_ids[..cfg.max_words].to_vec());
    }
    Ok(token_ids.to_vec())
}

/// Frozen image extractor contract for external plug-ins.
pub trait VisualExtractor: Send + Sync {
    fn extract(&self, image: &Tensor, cfg: &BackboneConfig) -> Result<VisualFeatureMap>;
}

/// Frozen text extractor contract for external plug-ins.
pub trait TextualExtractor: Send + Sync {
    fn extract(&self, token_ids: &[usize], cfg: &BackboneConfig) -> Result<TokenSequence>;
}

impl VisualExtractor for TinyConvBackbone {
    fn extract(&self, image: &Tensor, cfg: &BackboneConfig) -> Result<VisualFeatureMap> {
        extract_visual(self, image, cfg)
    }
}

impl TextualExtractor for TinyTextBackbone {
    fn extract(&self, token_ids: &[usize], cfg: &BackboneConfig) -> Result<TokenSequence> {
        extract_textual(self, token_ids, cfg)
    }
}

/// Map a raw image tensor (3, H, W) to its feature grid.
pub fn extract_visual(
    backbone: &TinyConvBackbone,
    image: &Tensor,
    cfg: &BackboneConfig,
) -> Result<VisualFeatureMap> {
    if image.rank() != 3
        || image.shape()[0] != 3
        || image.shape()[1] != cfg.image_h
        || image.shape()[2] != cfg.image_w
    {
        return Err(Error::ShapeMismatch {
            context: "extract_visual input".to_string(),
            expected: vec![3, cfg.image_h, cfg.image_w],
            got: image.shape().to_vec(),
        });
    }
    let mut tape = Tape::new();
    let x = tape.leaf(image.clone());
    let layers = backbone.vars(&mut tape, false);
    let rows = conv_forward_graph(&mut tape, x, &layers)?;
    let flat = tape.value(rows).clone();
    if flat.rows() != cfg.seq_positions() || flat.cols() != cfg.feature_dim {
        return Err(Error::ShapeMismatch {
            context: "extract_visual output".to_string(),
            expected: vec![cfg.seq_positions(), cfg.feature_dim],
            got: flat.shape().to_vec(),
        });
    }
    flat.check_finite("extract_visual output")?;
    VisualFeatureMap::new(flat.reshape(vec![cfg.grid_h, cfg.grid_w, cfg.feature_dim]))
}

/// Map token ids to an (l, d) sequence with its validity mask.
pub fn extract_textual(
    backbone: &TinyTextBackbone,
    token_ids: &[usize],
    cfg: &BackboneConfig,
) -> Result<TokenSequence> {
    let mut tape = Tape::new();
    let table = tape.leaf(backbone.table.clone());
    let attn = backbone.attn.as_vars(&mut tape);
    let (padded, mask) = text_forward_graph(&mut tape, table, &attn, token_ids, cfg)?;
    let out = tape.value(padded).clone();
    out.check_finite("extract_textual output")?;
    TokenSequence::new(out, mask)
}

type VisualFactory = Arc<dyn Fn(&BackboneConfig) -> Result<Arc<dyn VisualExtractor>> + Send + Sync>;
type TextualFactory =
    Arc<dyn Fn(&BackboneConfig) -> Result<Arc<dyn TextualExtractor>> + Send + Sync>;

/// Named registry mapping config strings to extractor factories, so
/// pretrained full-scale backbones can be attached without code changes.
#[derive(Default)]
pub struct BackboneRegistry {
    visual: BTreeMap<String, VisualFactory>,
    textual: BTreeMap<String, TextualFactory>,
}

impl BackboneRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register_visual(&mut self, name: &str, factory: VisualFactory) {
        self.visual.insert(name.to_string(), factory);
    }

    pub fn register_textual(&mut self, name: &str, factory: TextualFactory) {
        self.textual.insert(name.to_string(), factory);
    }

    pub fn create_visual(
        &self,
        name: &str,
        cfg: &BackboneConfig,
    ) -> Result<Arc<dyn VisualExtractor>> {
        let f = self
            .visual
            .get(name)
            .ok_or_else(|| Error::Config(format!("no visual backbone plugin named `{name}`")))?;
        f(cfg)
    }

    pub fn create_textual(
        &self,
        name: &str,
        cfg: &BackboneConfig,
    ) -> Result<Arc<dyn TextualExtractor>> {
        let f = self
            .textual
            .get(name)
            .ok_or_else(|| Error::Config(format!("no textual backbone plugin named `{name}`")))?;
        f(cfg)
    }

    pub fn visual_names(&self) -> Vec<&str> {
        self.visual.keys().map(|s| s.as_str()).collect()
    }
}
