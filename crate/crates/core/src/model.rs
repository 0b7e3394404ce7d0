//! Full model assembly: backbones, per-modality encoders, the shared
//! decoder with its token sets, per-slot identity classifiers, and the
//! forward paths that produce one embedding set per input.
//!
//! Image path: conv features -> flatten -> (+ position) -> encoder ->
//! {GMP global; shared-token decode for coarse; foreground-attended
//! horizontal bands for fine}. Text path mirrors it with masked pooling and
//! a dedicated text-token decode for fine embeddings. Global embeddings pool
//! the raw backbone features of each modality.


use crate::attention::{
    decode_graph, encode_graph, AttentionParameters, AttentionVars, CrossAttentionRecord,
    DecodeOut,
};
use crate::backbone::{
    conv_forward_graph, text_forward_graph, BackboneConfig, ConvLayerVars, TinyConvBackbone,
    TinyTextBackbone,
};
use crate::embedding::{
    fine_embed_image_graph, foreground_attend_graph, foreground_map, global_embed_graph,
    EmbeddingSet, EmbeddingVars, ForegroundMap, Modality,
};
use crate::error::{Error, Result};
use crate::graph::{Tape, Var};
use crate::loss::ClassifierVars;
use crate::tensor::{seeded_rng, Tensor};

/// Structural configuration of the model.
#[derive(Clone, Debug, serde::Serialize, serde::Deserialize)]
pub struct ModelConfig {
    pub feature_dim: usize,
    pub n_heads: usize,
    /// Number of shared decoder tokens (coarse slots).
    pub num_coarse: usize,
    /// Number of part slots (fine slots).
    pub num_fine: usize,
    /// Identity classes c.
    pub num_identities: usize,
    pub backbone: BackboneConfig,
    pub use_coarse: bool,
    pub use_fine: bool,
    /// Learnable text position encoding ahead of the text encoder.
    pub text_position_encoding: bool,
    /// Optional pre-norm on the encoder's attention branch.
    pub encoder_pre_norm: bool,
    /// Divide the foreground map by its peak before reweighting.
    pub foreground_peak_normalize: bool,
    /// Ablation: separate decoder parameters and tokens per modality.
    pub separate_decoders: bool,
    /// Ablation: one classifier for every slot instead of one per slot.
    pub single_shared_classifier: bool,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.backbone.feature_dim != self.feature_dim {
            return Err(Error::Config(
                "backbone feature_dim must match model feature_dim".to_string(),
            ));
        }
        if self.n_heads == 0 || !self.feature_dim.is_multiple_of(self.n_heads) {
            return Err(Error::NotDivisible {
                value: self.feature_dim,
                divisor: self.n_heads.max(1),
                context: "feature dim over head count".to_string(),
            });
        }
        if self.num_identities < 2 {
            return Err(Error::Config(
                "need at least 2 identities to train".to_string(),
            ));
        }
        if self.use_fine && !self.use_coarse {
            return Err(Error::Config(
                "fine embeddings need the coarse decoder pass for the foreground map".to_string(),
            ));
        }
        if self.use_coarse && self.num_coarse == 0 {
            return Err(Error::Config("use_coarse requires num_coarse >= 1".to_string()));
        }
        if self.use_fine {
            if self.num_fine == 0 {
                return Err(Error::Config("use_fine requires num_fine >= 1".to_string()));
            }
            if !self.backbone.grid_h.is_multiple_of(self.num_fine) {
                return Err(Error::NotDivisible {
                    value: self.backbone.grid_h,
                    divisor: self.num_fine,
                    context: "grid height over part count".to_string(),
                });
            }
        }
        Ok(())
    }

    fn active_coarse(&self) -> usize {
        if self.use_coarse {
            self.num_coarse
        } else {
            0
        }
    }

    fn active_fine(&self) -> usize {
        if self.use_fine {
            self.num_fine
        } else {
            0
        }
    }
}

/// Encoder/decoder parameters; present only when coarse embeddings are on.
#[derive(Clone, Debug)]
pub struct AttentionStack {
    pub encoder_visual: AttentionParameters,
    pub encoder_textual: AttentionParameters,
    pub decoder: AttentionParameters,
    /// Separate text decoder for the ablation variant.
    pub decoder_text: Option<AttentionParameters>,
    /// Learnable shared tokens (D, d); the single object both modality
    /// paths read.
    pub shared_tokens: Tensor,
    /// Separate text-path tokens for the ablation variant.
    pub shared_tokens_text: Option<Tensor>,
    pub pos_visual: Tensor,
    pub pos_textual: Option<Tensor>,
}

/// All learnable parameter groups.
#[derive(Clone, Debug)]
pub struct ModelParams {
    pub image_backbone: TinyConvBackbone,
    pub text_backbone: TinyTextBackbone,
    pub attention: Option<AttentionStack>,
    /// Text tokens (P, d) for fine embeddings; a distinct parameter object
    /// from the shared tokens.
    pub text_tokens: Option<Tensor>,
    /// Identity classifiers, each (d, c): [global, coarse..., fine...] or a
    /// single shared tensor.
    pub classifiers: Vec<Tensor>,
}

/// Learning-rate/freezing group of one parameter tensor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    ImageBackbone,
    TextBackbone,
    Head,
}

/// The model: config plus parameters.
#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub params: ModelParams,
}

impl Model {
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model> {
        cfg.validate()?;
        let mut rng = seeded_rng(seed);
        let d = cfg.feature_dim;
        let image_backbone = TinyConvBackbone::init(&cfg.backbone, &mut rng);
        let text_backbone = TinyTextBackbone::init(&cfg.backbone, cfg.n_heads, &mut rng)?;
        let attention = if cfg.use_coarse {
            let r = cfg.backbone.seq_positions();
            let l = cfg.backbone.max_words;
            let nonzero = |t: Tensor| {
                // zero tokens would collapse all coarse slots at step 0
                debug_assert!(t.data().iter().any(|&v| v != 0.0));
                t
            };
            Some(AttentionStack {
                encoder_visual: AttentionParameters::init(d, cfg.n_heads, &mut rng)?,
                encoder_textual: AttentionParameters::init(d, cfg.n_heads, &mut rng)?,
                decoder: AttentionParameters::init(d, cfg.n_heads, &mut rng)?,
                decoder_text: if cfg.separate_decoders {
                    Some(AttentionParameters::init(d, cfg.n_heads, &mut rng)?)
                } else {
                    None
                },
                shared_tokens: nonzero(Tensor::randn(vec![cfg.num_coarse, d], 0.02, &mut rng)),
                shared_tokens_text: if cfg.separate_decoders {
                    Some(Tensor::randn(vec![cfg.num_coarse, d], 0.02, &mut rng))
                } else {
                    None
                },
                pos_visual: Tensor::randn(vec![r, d], 0.02, &mut rng),
                pos_textual: if cfg.text_position_encoding {
                    Some(Tensor::randn(vec![l, d], 0.02, &mut rng))
                } else {
                    None
                },
            })
        } else {
            None
        };
        let text_tokens = if cfg.use_fine {
            Some(Tensor::randn(vec![cfg.num_fine, d], 0.02, &mut rng))
        } else {
            None
        };
        let num_classifiers = if cfg.single_shared_classifier {
            1
        } else {
            1 + cfg.active_coarse() + cfg.active_fine()
        };
        let clf_std = 1.0 / (d as f64).sqrt();
        let classifiers = (0..num_classifiers)
            .map(|_| Tensor::randn(vec![d, cfg.num_identities], clf_std, &mut rng))
            .collect();
        Ok(Model {
            cfg,
            params: ModelParams {
                image_backbone,
                text_backbone,
                attention,
                text_tokens,
                classifiers,
            },
        })
    }

    /// Visit every parameter tensor in a fixed order. The same order is used
    /// by [`Model::vars`], the optimizer, and checkpoints.
    pub fn for_each_param<F: FnMut(&str, ParamGroup, &Tensor)>(&self, mut f: F) {
        for (i, l) in self.params.image_backbone.layers.iter().enumerate() {
            f(&format!("image_backbone.conv{i}.weight"), ParamGroup::ImageBackbone, &l.weight);
            f(&format!("image_backbone.conv{i}.bias"), ParamGroup::ImageBackbone, &l.bias);
        }
        f("text_backbone.table", ParamGroup::TextBackbone, &self.params.text_backbone.table);
        for_each_attention(&self.params.text_backbone.attn, "text_backbone.attn", &mut |n, t| {
            f(n, ParamGroup::TextBackbone, t)
        });
        if let Some(stack) = &self.params.attention {
            for_each_attention(&stack.encoder_visual, "encoder_visual", &mut |n, t| {
                f(n, ParamGroup::Head, t)
            });
            for_each_attention(&stack.encoder_textual, "encoder_textual", &mut |n, t| {
                f(n, ParamGroup::Head, t)
            });
            for_each_attention(&stack.decoder, "decoder", &mut |n, t| {
                f(n, ParamGroup::Head, t)
            });
            if let Some(dt) = &stack.decoder_text {
                for_each_attention(dt, "decoder_text", &mut |n, t| f(n, ParamGroup::Head, t));
            }
            f("shared_tokens", ParamGroup::Head, &stack.shared_tokens);
            if let Some(t) = &stack.shared_tokens_text {
                f("shared_tokens_text", ParamGroup::Head, t);
            }
            f("pos_visual", ParamGroup::Head, &stack.pos_visual);
            if let Some(t) = &stack.pos_textual {
                f("pos_textual", ParamGroup::Head, t);
            }
        }
        if let Some(t) = &self.params.text_tokens {
            f("text_tokens", ParamGroup::Head, t);
        }
        for (i, c) in self.params.classifiers.iter().enumerate() {
            f(&format!("classifier{i}"), ParamGroup::Head, c);
        }
    }

    /// Mutable visit in exactly the [`Model::for_each_param`] order.
    pub fn for_each_param_mut<F: FnMut(&str, ParamGroup, &mut Tensor)>(&mut self, mut f: F) {
        for (i, l) in self.params.image_backbone.layers.iter_mut().enumerate() {
            f(&format!("image_backbone.conv{i}.weight"), ParamGroup::ImageBackbone, &mut l.weight);
            f(&format!("image_backbone.conv{i}.bias"), ParamGroup::ImageBackbone, &mut l.bias);
        }
        f("text_backbone.table", ParamGroup::TextBackbone, &mut self.params.text_backbone.table);
        for_each_attention_mut(&mut self.params.text_backbone.attn, "text_backbone.attn", &mut |n, t| {
            f(n, ParamGroup::TextBackbone, t)
        });
        if let Some(stack) = &mut self.params.attention {
            for_each_attention_mut(&mut stack.encoder_visual, "encoder_visual", &mut |n, t| {
                f(n, ParamGroup::Head, t)
            });
            for_each_attention_mut(&mut stack.encoder_textual, "encoder_textual", &mut |n, t| {
                f(n, ParamGroup::Head, t)
            });
            for_each_attention_mut(&mut stack.decoder, "decoder", &mut |n, t| {
                f(n, ParamGroup::Head, t)
            });
            if let Some(dt) = &mut stack.decoder_text {
                for_each_attention_mut(dt, "decoder_text", &mut |n, t| f(n, ParamGroup::Head, t));
            }
            f("shared_tokens", ParamGroup::Head, &mut stack.shared_tokens);
            if let Some(t) = &mut stack.shared_tokens_text {
                f("shared_tokens_text", ParamGroup::Head, t);
            }
            f("pos_visual", ParamGroup::Head, &mut stack.pos_visual);
            if let Some(t) = &mut stack.pos_textual {
                f("pos_textual", ParamGroup::Head, t);
            }
        }
        if let Some(t) = &mut self.params.text_tokens {
            f("text_tokens", ParamGroup::Head, t);
        }
        for (i, c) in self.params.classifiers.iter_mut().enumerate() {
            f(&format!("classifier{i}"), ParamGroup::Head, c);
        }
    }

    pub fn param_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, _| n += 1);
        n
    }

    pub fn scalar_count(&self) -> usize {
        let mut n = 0;
        self.for_each_param(|_, _, t| n += t.len());
        n
    }

    /// Insert every parameter on a tape. `trainable` registers gradients
    /// (with flat indices matching the `for_each_param` order);
    /// `freeze_text_backbone` keeps text backbone tensors out of the
    /// gradient even when training.
    pub fn vars(&self, tape: &mut Tape, trainable: bool, freeze_text_backbone: bool) -> ModelVars {
        let mut flat = 0usize;
        let mut insert = |tape: &mut Tape, group: ParamGroup, t: &Tensor| -> Var {
            let idx = flat;
            flat += 1;
            let frozen = matches!(group, ParamGroup::TextBackbone) && freeze_text_backbone;
            if trainable && !frozen {
                tape.param(idx, t.clone())
            } else {
                tape.leaf(t.clone())
            }
        };

        let layers: Vec<ConvLayerVars> = self
            .params
            .image_backbone
            .layers
            .iter()
            .map(|l| ConvLayerVars {
                weight: insert(tape, ParamGroup::ImageBackbone, &l.weight),
                bias: insert(tape, ParamGroup::ImageBackbone, &l.bias),
                stride: l.stride,
                pad: l.pad,
                relu: l.relu,
            })
            .collect();
        let text_table = insert(tape, ParamGroup::TextBackbone, &self.params.text_backbone.table);
        let text_attn = attention_vars(tape, &self.params.text_backbone.attn, &mut |tape, t| {
            insert(tape, ParamGroup::TextBackbone, t)
        });

        let stack = self.params.attention.as_ref().map(|s| {
            let encoder_visual = attention_vars(tape, &s.encoder_visual, &mut |tape, t| {
                insert(tape, ParamGroup::Head, t)
            });
            let encoder_textual = attention_vars(tape, &s.encoder_textual, &mut |tape, t| {
                insert(tape, ParamGroup::Head, t)
            });
            let decoder = attention_vars(tape, &s.decoder, &mut |tape, t| {
                insert(tape, ParamGroup::Head, t)
            });
            let decoder_text = s.decoder_text.as_ref().map(|dt| {
                attention_vars(tape, dt, &mut |tape, t| insert(tape, ParamGroup::Head, t))
            });
            let shared_tokens = insert(tape, ParamGroup::Head, &s.shared_tokens);
            let shared_tokens_text = s
                .shared_tokens_text
                .as_ref()
                .map(|t| insert(tape, ParamGroup::Head, t));
            let pos_visual = insert(tape, ParamGroup::Head, &s.pos_visual);
            let pos_textual = s
                .pos_textual
                .as_ref()
                .map(|t| insert(tape, ParamGroup::Head, t));
            AttentionStackVars {
                encoder_visual,
                encoder_textual,
                decoder,
                decoder_text,
                shared_tokens,
                shared_tokens_text,
                pos_visual,
                pos_textual,
            }
        });
        let text_tokens = self
            .params
            .text_tokens
            .as_ref()
            .map(|t| insert(tape, ParamGroup::Head, t));
        let classifier_vars: Vec<Var> = self
            .params
            .classifiers
            .iter()
            .map(|c| insert(tape, ParamGroup::Head, c))
            .collect();

        let classifiers = if self.cfg.single_shared_classifier {
            let only = classifier_vars[0];
            ClassifierVars {
                global: only,
                coarse: vec![only; self.cfg.active_coarse()],
                fine: vec![only; self.cfg.active_fine()],
            }
        } else {
            let dd = self.cfg.active_coarse();
            let pp = self.cfg.active_fine();
            ClassifierVars {
                global: classifier_vars[0],
                coarse: classifier_vars[1..1 + dd].to_vec(),
                fine: classifier_vars[1 + dd..1 + dd + pp].to_vec(),
            }
        };

        ModelVars {
            layers,
            text_table,
            text_attn,
            stack,
            text_tokens,
            classifiers,
        }
    }

    /// Value-level embedding-set extraction for one image.
    pub fn embed_image(&self, image: &Tensor) -> Result<ImageEmbedding> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false, true);
        let fwd = forward_image(&mut tape, &self.cfg, &vars, image)?;
        let record = fwd.decode.as_ref().map(|d| d.record(&tape));
        Ok(ImageEmbedding {
            set: fwd.set.values(&tape),
            foreground: record.as_ref().map(foreground_map),
            record,
        })
    }

    /// Value-level embedding-set extraction for one tokenized caption.
    pub fn embed_text(&self, token_ids: &[usize]) -> Result<TextEmbedding> {
        let mut tape = Tape::new();
        let vars = self.vars(&mut tape, false, true);
        let fwd = forward_text(&mut tape, &self.cfg, &vars, token_ids)?;
        Ok(TextEmbedding {
            set: fwd.set.values(&tape),
            coarse_record: fwd.coarse_decode.as_ref().map(|d| d.record(&tape)),
            fine_record: fwd.fine_decode.as_ref().map(|d| d.record(&tape)),
            mask: fwd.mask,
        })
    }

    /// Run the modality's decoder over an externally supplied memory.
    /// With a shared decoder both modalities are byte-identical; the
    /// separate-decoders ablation breaks the equality.
    pub fn coarse_from_memory(&self, memory: &Tensor, modality: Modality) -> Result<Tensor> {
        let stack = self
            .params
            .attention
            .as_ref()
            .ok_or_else(|| Error::Config("coarse path is disabled".to_string()))?;
        let (dec, tokens) = match modality {
            Modality::Image => (&stack.decoder, &stack.shared_tokens),
            Modality::Text => (
                stack.decoder_text.as_ref().unwrap_or(&stack.decoder),
                stack
                    .shared_tokens_text
                    .as_ref()
                    .unwrap_or(&stack.shared_tokens),
            ),
        };
        Ok(dec.decode(tokens, memory, None)?.outputs)
    }
}

fn for_each_attention<F: FnMut(&str, &Tensor)>(p: &AttentionParameters, prefix: &str, f: &mut F) {
    for (h, t) in p.w_q.iter().enumerate() {
        f(&format!("{prefix}.wq{h}"), t);
    }
    for (h, t) in p.w_k.iter().enumerate() {
        f(&format!("{prefix}.wk{h}"), t);
    }
    for (h, t) in p.w_v.iter().enumerate() {
        f(&format!("{prefix}.wv{h}"), t);
    }
    f(&format!("{prefix}.wo"), &p.w_o);
}

fn for_each_attention_mut<F: FnMut(&str, &mut Tensor)>(
    p: &mut AttentionParameters,
    prefix: &str,
    f: &mut F,
) {
    for (h, t) in p.w_q.iter_mut().enumerate() {
        f(&format!("{prefix}.wq{h}"), t);
    }
    for (h, t) in p.w_k.iter_mut().enumerate() {
        f(&format!("{prefix}.wk{h}"), t);
    }
    for (h, t) in p.w_v.iter_mut().enumerate() {
        f(&format!("{prefix}.wv{h}"), t);
    }
    f(&format!("{prefix}.wo"), &mut p.w_o);
}

fn attention_vars(
    tape: &mut Tape,
    p: &AttentionParameters,
    insert: &mut dyn FnMut(&mut Tape, &Tensor) -> Var,
) -> AttentionVars {
    AttentionVars {
        w_q: p.w_q.iter().map(|t| insert(tape, t)).collect(),
        w_k: p.w_k.iter().map(|t| insert(tape, t)).collect(),
        w_v: p.w_v.iter().map(|t| insert(tape, t)).collect(),
        w_o: insert(tape, &p.w_o),
        head_dim: p.head_dim(),
    }
}

/// Graph handles to everything in the attention stack.
pub struct AttentionStackVars {
    pub encoder_visual: AttentionVars,
    pub encoder_textual: AttentionVars,
    pub decoder: AttentionVars,
    pub decoder_text: Option<AttentionVars>,
    pub shared_tokens: Var,
    pub shared_tokens_text: Option<Var>,
    pub pos_visual: Var,
    pub pos_textual: Option<Var>,
}

/// Graph handles to every model parameter.
pub struct ModelVars {
    pub layers: Vec<ConvLayerVars>,
    pub text_table: Var,
    pub text_attn: AttentionVars,
    pub stack: Option<AttentionStackVars>,
    pub text_tokens: Option<Var>,
    pub classifiers: ClassifierVars,
}

impl ModelVars {
    /// Decoder and token set serving a modality (the same handles for both
    /// unless decoders are separated).
    pub fn decoder_for(&self, modality: Modality) -> Option<(&AttentionVars, Var)> {
        let stack = self.stack.as_ref()?;
        Some(match modality {
            Modality::Image => (&stack.decoder, stack.shared_tokens),
            Modality::Text => (
                stack.decoder_text.as_ref().unwrap_or(&stack.decoder),
                stack.shared_tokens_text.unwrap_or(stack.shared_tokens),
            ),
        })
    }
}

/// Image forward outputs on a tape.
pub struct ImageForwardVars {
    pub set: EmbeddingVars,
    pub decode: Option<DecodeOut>,
    pub foreground: Option<Var>,
}

/// Text forward outputs on a tape.
pub struct TextForwardVars {
    pub set: EmbeddingVars,
    pub coarse_decode: Option<DecodeOut>,
    pub fine_decode: Option<DecodeOut>,
    pub mask: Vec<bool>,
}

/// Value-level image outputs.
pub struct ImageEmbedding {
    pub set: EmbeddingSet,
    pub foreground: Option<ForegroundMap>,
    pub record: Option<CrossAttentionRecord>,
}

/// Value-level text outputs.
pub struct TextEmbedding {
    pub set: EmbeddingSet,
    pub coarse_record: Option<CrossAttentionRecord>,
    pub fine_record: Option<CrossAttentionRecord>,
    pub mask: Vec<bool>,
}

/// Build the image path on a tape. `image` is a raw (3, H, W) tensor in
/// [0, 1]; pixel values are centered before the conv stack.
pub fn forward_image(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    image: &Tensor,
) -> Result<ImageForwardVars> {
    if image.rank() != 3
        || image.shape()[0] != 3
        || image.shape()[1] != cfg.backbone.image_h
        || image.shape()[2] != cfg.backbone.image_w
    {
        return Err(Error::ShapeMismatch {
            context: "forward_image input".to_string(),
            expected: vec![3, cfg.backbone.image_h, cfg.backbone.image_w],
            got: image.shape().to_vec(),
        });
    }
    let mut centered = image.clone();
    for v in centered.data_mut() {
        *v -= 0.5;
    }
    let input = tape.leaf(centered);
    let rows = conv_forward_graph(tape, input, &vars.layers)?;
    tape.value(rows).check_finite("image backbone output")?;

    // global embedding pools the raw backbone features
    let global = global_embed_graph(tape, rows, None)?;

    let (coarse, decode, foreground, fine) = if let Some(stack) = &vars.stack {
        let with_pos = tape.add(rows, stack.pos_visual)?;
        let memory = encode_graph(tape, with_pos, None, &stack.encoder_visual, cfg.encoder_pre_norm)?;
        let (dec, tokens) = vars.decoder_for(Modality::Image).unwrap();
        let out = decode_graph(tape, tokens, memory, None, dec)?;
        let coarse: Vec<Var> = (0..cfg.num_coarse).map(|i| tape.row(out.output, i)).collect();

        let (foreground, fine) = if cfg.use_fine {
            let (attended, a_avg) =
                foreground_attend_graph(tape, memory, &out.attn, cfg.foreground_peak_normalize)?;
            let fine = fine_embed_image_graph(tape, attended, cfg.num_fine)?;
            (Some(a_avg), fine)
        } else {
            (None, Vec::new())
        };
        (coarse, Some(out), foreground, fine)
    } else {
        (Vec::new(), None, None, Vec::new())
    };

    Ok(ImageForwardVars {
        set: EmbeddingVars {
            modality: Modality::Image,
            global,
            coarse,
            fine,
        },
        decode,
        foreground,
    })
}

/// Build the text path on a tape from token ids.
pub fn forward_text(
    tape: &mut Tape,
    cfg: &ModelConfig,
    vars: &ModelVars,
    token_ids: &[usize],
) -> Result<TextForwardVars> {
    let (features, mask) =
        text_forward_graph(tape, vars.text_table, &vars.text_attn, token_ids, &cfg.backbone)?;
    tape.value(features).check_finite("text backbone output")?;

    // masked global max pooling over the raw backbone features
    let global = global_embed_graph(tape, features, Some(&mask))?;

    let (coarse, coarse_decode, fine, fine_decode) = if let Some(stack) = &vars.stack {
        let with_pos = match stack.pos_textual {
            Some(pos) => tape.add(features, pos)?,
            None => features,
        };
        let memory = encode_graph(
            tape,
            with_pos,
            Some(&mask),
            &stack.encoder_textual,
            cfg.encoder_pre_norm,
        )?;
        let (dec, tokens) = vars.decoder_for(Modality::Text).unwrap();
        let out = decode_graph(tape, tokens, memory, Some(&mask), dec)?;
        let coarse: Vec<Var> = (0..cfg.num_coarse).map(|i| tape.row(out.output, i)).collect();

        let (fine, fine_decode) = if cfg.use_fine {
            let text_tokens = vars
                .text_tokens
                .expect("text tokens exist when use_fine is on");
            let fout = decode_graph(tape, text_tokens, memory, Some(&mask), dec)?;
            let fine: Vec<Var> = (0..cfg.num_fine).map(|j| tape.row(fout.output, j)).collect();
            (fine, Some(fout))
        } else {
            (Vec::new(), None)
        };
        (coarse, Some(out), fine, fine_decode)
    } else {
        (Vec::new(), None, Vec::new(), None)
    };

    Ok(TextForwardVars {
        set: EmbeddingVars {
            modality: Modality::Text,
            global,
            coarse,
            fine,
        },
        coarse_decode,
        fine_decode,
        mask,
    })
}
