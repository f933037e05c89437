//! Desk-scale transformers with explicitly exposed key/value context caches.

mod aligner;
mod block;
mod cache;
mod classifier;
mod decoder;
mod weights;
pub mod world;

pub use aligner::{DualEncoder, ModalityEmbedding, ModalitySource};
pub use cache::{CacheGrads, CacheNodes, ContextCache};
pub use classifier::StyleClassifier;
pub use decoder::{DecoderLm, DecoderStep, BOS, EOS};
pub use weights::{load_weights, save_weights, ModelWeights};
pub use world::{build_synthetic_world, SyntheticWorld};

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelKind {
    Decoder,
    Aligner,
    Classifier,
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::Decoder => "decoder",
            ModelKind::Aligner => "aligner",
            ModelKind::Classifier => "classifier",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoder" => Ok(ModelKind::Decoder),
            "aligner" => Ok(ModelKind::Aligner),
            "classifier" => Ok(ModelKind::Classifier),
            other => Err(Error::Format(format!("unknown model kind `{other}`"))),
        }
    }
}

/// Architecture hyper-parameters; fields a kind does not use are zero.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelConfig {
    pub kind: ModelKind,
    pub vocab: usize,
    pub width: usize,
    pub layers: usize,
    pub heads: usize,
    pub mlp_width: usize,
    pub max_positions: usize,
    /// Shared text/modality embedding size (aligner).
    pub align_dim: usize,
    /// Modality tower depth (aligner); `layers` is the text tower depth.
    pub modality_layers: usize,
    /// Number of feature rows the modality tower sees (aligner).
    pub patches: usize,
    pub classes: usize,
}

impl ModelConfig {
    pub fn decoder(vocab: usize) -> Self {
        Self {
            kind: ModelKind::Decoder,
            vocab,
            width: 32,
            layers: 2,
            heads: 2,
            mlp_width: 128,
            max_positions: 64,
            align_dim: 0,
            modality_layers: 0,
            patches: 0,
            classes: 0,
        }
    }

    pub fn aligner(vocab: usize) -> Self {
        Self {
            kind: ModelKind::Aligner,
            vocab,
            width: 32,
            layers: 1,
            heads: 2,
            mlp_width: 64,
            max_positions: 0,
            align_dim: 16,
            modality_layers: 2,
            patches: 4,
            classes: 0,
        }
    }

    pub fn classifier(vocab: usize, classes: usize) -> Self {
        Self {
            kind: ModelKind::Classifier,
            vocab,
            width: 32,
            layers: 1,
            heads: 2,
            mlp_width: 64,
            max_positions: 0,
            align_dim: 0,
            modality_layers: 0,
            patches: 0,
            classes,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab == 0 || self.width == 0 || self.heads == 0 || self.mlp_width == 0 {
            return Err(Error::InvalidParameter(format!(
                "degenerate model config {self:?}"
            )));
        }
        if self.width % self.heads != 0 {
            return Err(Error::InvalidParameter(format!(
                "width {} is not divisible by {} heads",
                self.width, self.heads
            )));
        }
        let ok = match self.kind {
            ModelKind::Decoder => self.layers > 0 && self.max_positions > 0,
            ModelKind::Aligner => {
                self.layers > 0
                    && self.modality_layers > 0
                    && self.patches > 0
                    && self.align_dim > 0
            }
            ModelKind::Classifier => self.layers > 0 && self.classes > 1,
        };
        if !ok {
            return Err(Error::InvalidParameter(format!(
                "incomplete {} config {self:?}",
                self.kind
            )));
        }
        Ok(())
    }

    /// Every tensor name this architecture needs, with its shape.
    pub fn expected_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let d = self.width;
        let mut out = Vec::new();
        let blocks = |prefix: &str, n: usize, out: &mut Vec<(String, Vec<usize>)>| {
            for l in 0..n {
                let p = format!("{prefix}h{l}.");
                for (name, shape) in [
                    ("ln1.g", vec![d]),
                    ("ln1.b", vec![d]),
                    ("attn.wq", vec![d, d]),
                    ("attn.wk", vec![d, d]),
                    ("attn.wv", vec![d, d]),
                    ("attn.wo", vec![d, d]),
                    ("ln2.g", vec![d]),
                    ("ln2.b", vec![d]),
                    ("mlp.w1", vec![d, self.mlp_width]),
                    ("mlp.b1", vec![self.mlp_width]),
                    ("mlp.w2", vec![self.mlp_width, d]),
                    ("mlp.b2", vec![d]),
                ] {
                    out.push((format!("{p}{name}"), shape));
                }
            }
        };
        match self.kind {
            ModelKind::Decoder => {
                out.push(("tok_emb".into(), vec![self.vocab, d]));
                out.push(("pos_emb".into(), vec![self.max_positions, d]));
                blocks("", self.layers, &mut out);
                out.push(("ln_f.g".into(), vec![d]));
                out.push(("ln_f.b".into(), vec![d]));
                out.push(("lm_head".into(), vec![d, self.vocab]));
                out.push(("lm_bias".into(), vec![self.vocab]));
            }
            ModelKind::Aligner => {
                out.push(("text.tok_emb".into(), vec![self.vocab, d]));
                blocks("text.", self.layers, &mut out);
                out.push(("text.proj".into(), vec![d, self.align_dim]));
                out.push(("mod.in_proj".into(), vec![self.align_dim, d]));
                out.push(("mod.pos_emb".into(), vec![self.patches, d]));
                blocks("mod.", self.modality_layers, &mut out);
                out.push(("mod.proj".into(), vec![d, self.align_dim]));
            }
            ModelKind::Classifier => {
                out.push(("tok_emb".into(), vec![self.vocab, d]));
                blocks("", self.layers, &mut out);
                out.push(("head".into(), vec![d, self.classes]));
                out.push(("head_bias".into(), vec![self.classes]));
            }
        }
        out
    }

    pub(crate) fn to_header(&self) -> String {
        format!(
            "kind={} vocab={} width={} layers={} heads={} mlp_width={} max_positions={} align_dim={} modality_layers={} patches={} classes={}",
            self.kind,
            self.vocab,
            self.width,
            self.layers,
            self.heads,
            self.mlp_width,
            self.max_positions,
            self.align_dim,
            self.modality_layers,
            self.patches,
            self.classes
        )
    }

    pub(crate) fn from_header(fields: &str) -> Result<Self> {
        let mut cfg = ModelConfig::decoder(0);
        let mut kind = None;
        for pair in fields.split_whitespace() {
            let (key, value) = pair
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("config field `{pair}` is not key=value")))?;
            if key == "kind" {
                kind = Some(value.parse()?);
                continue;
            }
            let n: usize = value.parse().map_err(|_| {
                Error::Format(format!(
                    "config field `{key}` has non-integer value `{value}`"
                ))
            })?;
            let slot = match key {
                "vocab" => &mut cfg.vocab,
                "width" => &mut cfg.width,
                "layers" => &mut cfg.layers,
                "heads" => &mut cfg.heads,
                "mlp_width" => &mut cfg.mlp_width,
                "max_positions" => &mut cfg.max_positions,
                "align_dim" => &mut cfg.align_dim,
                "modality_layers" => &mut cfg.modality_layers,
                "patches" => &mut cfg.patches,
                "classes" => &mut cfg.classes,
                other => return Err(Error::Format(format!("unknown config field `{other}`"))),
            };
            *slot = n;
        }
        cfg.kind = kind.ok_or_else(|| Error::Format("config block has no kind".into()))?;
        cfg.validate()?;
        Ok(cfg)
    }
}
