use rayon::prelude::*;

use super::block::{self, Attention, BlockNodes};
use super::{ModelConfig, ModelKind, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{softmax_with_temperature, Graph, TokenId};

/// Sequence classifier: bidirectional blocks, mean pooling, linear head.
#[derive(Debug, Clone)]
pub struct StyleClassifier {
    weights: ModelWeights,
}

impl StyleClassifier {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        if weights.config().kind != ModelKind::Classifier {
            return Err(Error::InvalidParameter(format!(
                "expected classifier weights, got {}",
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

    pub fn num_classes(&self) -> usize {
        self.config().classes
    }

    /// Class probabilities for `tokens`.
    pub fn classify(&self, tokens: &[TokenId]) -> Result<Vec<f64>> {
        let c = self.config();
        if tokens.is_empty() {
            return Err(Error::InvalidInput(
                "cannot classify an empty sequence".into(),
            ));
        }
        if let Some(bad) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocab {}",
                c.vocab
            )));
        }
        let mut g = Graph::new();
        let ids: Vec<usize> = tokens.iter().map(|&t| t as usize).collect();
        let table = g.constant(self.weights.get("tok_emb").clone());
        let mut x = g.gather(table, &ids)?;
        for l in 0..c.layers {
            let b = BlockNodes::load(&mut g, &self.weights, &format!("h{l}."));
            x = block::forward(&mut g, &b, x, c.heads, Attention::Bidirectional)?.x;
        }
        let pooled = g.mean_rows(x)?;
        let pooled = g.reshape(pooled, vec![1, c.width])?;
        let head = g.constant(self.weights.get("head").clone());
        let bias = g.constant(self.weights.get("head_bias").clone());
        let logits = g.matmul(pooled, head)?;
        let logits = g.add(logits, bias)?;
        Ok(softmax_with_temperature(g.value(logits).data(), 1.0)?
            .probs()
            .to_vec())
    }

    /// Classifies every sequence; output order matches input order.
    pub fn classify_all(&self, seqs: &[Vec<TokenId>]) -> Result<Vec<Vec<f64>>> {
        seqs.par_iter().map(|s| self.classify(s)).collect()
    }
}
