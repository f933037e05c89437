use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::block::{self, Attention, BlockNodes};
use super::cache::{CacheNodes, ContextCache};
use super::{ModelConfig, ModelKind, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{l2_normalize, Graph, NodeId, Tensor, TokenId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModalitySource {
    Image,
    Audio,
    Synthetic,
    Text,
}

/// A unit-norm vector in an aligner's shared space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityEmbedding {
    vector: Vec<f64>,
    source: ModalitySource,
}

impl ModalityEmbedding {
    /// Normalizes `vector`; zero or non-finite vectors are rejected.
    pub fn new(vector: Vec<f64>, source: ModalitySource) -> Result<Self> {
        if vector.iter().any(|x| !x.is_finite()) {
            return Err(Error::InvalidInput(
                "embedding has non-finite entries".into(),
            ));
        }
        let vector = l2_normalize(&vector)
            .ok_or_else(|| Error::InvalidInput("cannot normalize a zero embedding".into()))?;
        Ok(Self { vector, source })
    }

    pub fn vector(&self) -> &[f64] {
        &self.vector
    }

    pub fn source(&self) -> ModalitySource {
        self.source
    }

    pub fn dim(&self) -> usize {
        self.vector.len()
    }
}

/// Dual encoder mapping token sequences and modality features into one space.
///
/// The modality tower broadcasts its input feature vector over a fixed number
/// of patch rows; its first layer's keys and values are exposed as a
/// single-layer [`ContextCache`].
#[derive(Debug, Clone)]
pub struct DualEncoder {
    weights: ModelWeights,
}

impl DualEncoder {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        if weights.config().kind != ModelKind::Aligner {
            return Err(Error::InvalidParameter(format!(
                "expected aligner weights, got {}",
                weights.config().kind
            )));
        }
        Ok(Self { weights })
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn align_dim(&self) -> usize {
        self.config().align_dim
    }

    /// Unnormalized text embedding node, `[align_dim]`.
    fn text_graph(&self, g: &mut Graph, tokens: &[TokenId]) -> Result<NodeId> {
        let c = self.config();
        if tokens.is_empty() {
            return Err(Error::InvalidInput(
                "cannot encode an empty token sequence".into(),
            ));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocab {}",
                c.vocab
            )));
        }
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.constant(self.weights.get("text.tok_emb").clone());
        let mut x = g.gather(table, &ids)?;
        for l in 0..c.layers {
            let b = BlockNodes::load(g, &self.weights, &format!("text.h{l}."));
            x = block::forward(g, &b, x, c.heads, Attention::Bidirectional)?.x;
        }
        let pooled = g.mean_rows(x)?;
        let pooled = g.reshape(pooled, vec![1, c.width])?;
        let proj = g.constant(self.weights.get("text.proj").clone());
        let out = g.matmul(pooled, proj)?;
        g.reshape(out, vec![c.align_dim])
    }

    pub fn encode_text(&self, tokens: &[TokenId]) -> Result<ModalityEmbedding> {
        let mut g = Graph::new();
        let out = self.text_graph(&mut g, tokens)?;
        ModalityEmbedding::new(g.value(out).data().to_vec(), ModalitySource::Text)
    }

    /// Encodes every sequence; output order matches input order.
    pub fn encode_texts(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<ModalityEmbedding>> {
        seqs.par_iter().map(|s| self.encode_text(s)).collect()
    }

    fn check_features(&self, features: &ModalityEmbedding) -> Result<()> {
        if features.dim() != self.align_dim() {
            return Err(Error::ShapeMismatch(format!(
                "modality features have dimension {}, aligner expects {}",
                features.dim(),
                self.align_dim()
            )));
        }
        Ok(())
    }

    /// Patch rows entering the modality tower, `[patches, width]`.
    fn modality_input(&self, g: &mut Graph, features: &ModalityEmbedding) -> Result<NodeId> {
        let c = self.config();
        let raw = g.constant(Tensor::matrix(1, c.align_dim, features.vector().to_vec())?);
        let in_proj = g.constant(self.weights.get("mod.in_proj").clone());
        let row = g.matmul(raw, in_proj)?;
        let rows = vec![row; c.patches];
        let x = g.concat_rows(&rows)?;
        let pos = g.constant(self.weights.get("mod.pos_emb").clone());
        g.add(x, pos)
    }

    /// Encodes modality features and returns the tower's first-layer keys and values.
    pub fn encode_modality(
        &self,
        features: &ModalityEmbedding,
    ) -> Result<(ModalityEmbedding, ContextCache)> {
        self.check_features(features)?;
        let c = self.config();
        let mut g = Graph::new();
        let x = self.modality_input(&mut g, features)?;
        let b = BlockNodes::load(&mut g, &self.weights, "mod.h0.");
        let (k, v) = block::project_kv(&mut g, &b, x)?;
        let hd = c.head_dim();
        let to_cache = |id| {
            let data = block::rows_to_heads(g.value(id).data(), c.patches, c.heads, hd);
            Tensor::new(vec![c.heads, c.patches, hd], data)
        };
        let cache = ContextCache::from_tensors(vec![(to_cache(k)?, to_cache(v)?)])?;
        let emb = self.encode_modality_with(features, &cache)?;
        Ok((emb, cache))
    }

    /// Encodes modality features with the first layer attending to `cache`.
    pub fn encode_modality_with(
        &self,
        features: &ModalityEmbedding,
        cache: &ContextCache,
    ) -> Result<ModalityEmbedding> {
        let mut g = Graph::new();
        let mut frozen = cache.clone();
        frozen.select_layers(&[])?;
        let nodes = frozen.to_graph(&mut g);
        let out = self.modality_graph(&mut g, features, &nodes)?;
        ModalityEmbedding::new(g.value(out).data().to_vec(), features.source())
    }

    /// Unnormalized modality embedding node, `[align_dim]`, differentiable
    /// with respect to the first-layer cache leaves.
    pub fn modality_graph(
        &self,
        g: &mut Graph,
        features: &ModalityEmbedding,
        cache: &CacheNodes,
    ) -> Result<NodeId> {
        self.check_features(features)?;
        let c = self.config();
        let (k, v) = cache
            .layer(0)
            .ok_or_else(|| Error::InvalidInput("modality cache is empty".into()))?;
        let mut x = self.modality_input(g, features)?;
        for l in 0..c.modality_layers {
            let b = BlockNodes::load(g, &self.weights, &format!("mod.h{l}."));
            let attention = if l == 0 {
                Attention::Override { k, v }
            } else {
                Attention::Bidirectional
            };
            x = block::forward(g, &b, x, c.heads, attention)?.x;
        }
        let pooled = g.mean_rows(x)?;
        let pooled = g.reshape(pooled, vec![1, c.width])?;
        let proj = g.constant(self.weights.get("mod.proj").clone());
        let out = g.matmul(pooled, proj)?;
        g.reshape(out, vec![c.align_dim])
    }
}
