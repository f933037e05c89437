use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution as _, Normal};

use super::block::{self, Attention, BlockNodes};
use super::cache::{CacheNodes, ContextCache};
use super::{ModelConfig, ModelKind, ModelWeights};
use crate::error::{Error, Result};
use crate::tensor::{Distribution, Graph, NodeId, Tensor, TokenId};

pub const BOS: TokenId = 0;
pub const EOS: TokenId = 1;

/// Decoder-only language model whose history lives entirely in a [`ContextCache`].
#[derive(Debug, Clone)]
pub struct DecoderLm {
    weights: ModelWeights,
}

/// Graph handles produced by one decoding step.
pub struct DecoderStep {
    /// Next-token logits over the full vocabulary, `[V]`.
    pub logits: NodeId,
    /// Per-layer key and value rows for the processed token, `[1, width]`.
    pub new_k: Vec<NodeId>,
    pub new_v: Vec<NodeId>,
}

impl DecoderLm {
    pub fn new(weights: ModelWeights) -> Result<Self> {
        if weights.config().kind != ModelKind::Decoder {
            return Err(Error::InvalidParameter(format!(
                "expected decoder weights, got {}",
                weights.config().kind
            )));
        }
        Ok(Self { weights })
    }

    /// A generic randomly initialized language model.
    ///
    /// The end token's logit ramps up with position so that unguided
    /// generations terminate after a handful of tokens.
    pub fn seeded(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = config.width;
        let mut tensors = BTreeMap::new();
        let normal = |rng: &mut ChaCha8Rng, shape: &[usize], std: f64| {
            let n: usize = shape.iter().product();
            let dist = Normal::new(0.0, std).expect("positive std");
            let data = (0..n).map(|_| f32_round(dist.sample(rng))).collect();
            Tensor::new(shape.to_vec(), data).expect("shape from config")
        };
        let ramp: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ramp_norm = ramp.iter().map(|x| x * x).sum::<f64>().sqrt();
        for (name, shape) in config.expected_shapes() {
            let t = match name.as_str() {
                "tok_emb" => normal(&mut rng, &shape, 1.0),
                "pos_emb" => {
                    let mut t = normal(&mut rng, &shape, 0.1);
                    let data = t.data_mut();
                    for p in 0..shape[0] {
                        for j in 0..d {
                            data[p * d + j] =
                                f32_round(data[p * d + j] + 0.25 * p as f64 * ramp[j] / ramp_norm);
                        }
                    }
                    t
                }
                "lm_head" => {
                    let mut t = normal(&mut rng, &shape, 2.0 / (d as f64).sqrt());
                    let v = shape[1];
                    let data = t.data_mut();
                    for j in 0..d {
                        data[j * v + EOS as usize] = f32_round(2.5 * ramp[j] / ramp_norm);
                    }
                    t
                }
                "lm_bias" => {
                    let mut t = normal(&mut rng, &shape, 0.3);
                    t.data_mut()[BOS as usize] = -10.0;
                    t.data_mut()[EOS as usize] = -3.0;
                    t
                }
                n if n.ends_with(".g") => Tensor::new(shape.clone(), vec![1.0; shape[0]])?,
                n if n.ends_with(".b") || n.ends_with(".b1") || n.ends_with(".b2") => {
                    Tensor::zeros(&shape)
                }
                n if n.ends_with("mlp.w2") || n.ends_with("attn.wo") => {
                    normal(&mut rng, &shape, 0.5 / (shape[0] as f64).sqrt())
                }
                _ => normal(&mut rng, &shape, 1.0 / (shape[0] as f64).sqrt()),
            };
            tensors.insert(name, t);
        }
        Self::new(ModelWeights::new(config, tensors)?)
    }

    pub fn weights(&self) -> &ModelWeights {
        &self.weights
    }

    pub fn config(&self) -> &ModelConfig {
        self.weights.config()
    }

    pub fn vocab(&self) -> usize {
        self.config().vocab
    }

    pub fn empty_cache(&self) -> ContextCache {
        let c = self.config();
        ContextCache::empty(c.layers, c.heads, c.head_dim())
    }

    /// Cache holding every token of `tokens` except the last.
    pub fn prefill(&self, tokens: &[TokenId]) -> Result<ContextCache> {
        if tokens.is_empty() {
            return Err(Error::InvalidInput("prefill of an empty prefix".into()));
        }
        let mut cache = self.empty_cache();
        for i in 0..tokens.len() - 1 {
            let (_, next) = self.forward(&tokens[..=i], &cache)?;
            cache = next;
        }
        Ok(cache)
    }

    /// Processes the last token of `token_prefix` against `cache`, which must
    /// hold exactly the tokens before it.
    pub fn forward(
        &self,
        token_prefix: &[TokenId],
        cache: &ContextCache,
    ) -> Result<(Distribution, ContextCache)> {
        let token = self.check_prefix(token_prefix, cache)?;
        let mut g = Graph::new();
        let mut frozen = cache.clone();
        frozen.select_layers(&[])?;
        let nodes = frozen.to_graph(&mut g);
        let step = self.step_graph(&mut g, token, cache.prefix_len(), &nodes)?;
        let dist = Distribution::from_scores(
            (0..self.vocab() as TokenId).collect(),
            g.value(step.logits).data(),
            1.0,
        )?;
        let extended = self.extend(&g, &step, cache)?;
        Ok((dist, extended))
    }

    /// Validates a prefix against a cache and returns the token to process.
    pub fn check_prefix(&self, token_prefix: &[TokenId], cache: &ContextCache) -> Result<TokenId> {
        let c = self.config();
        let &token = token_prefix
            .last()
            .ok_or_else(|| Error::InvalidInput("empty token prefix".into()))?;
        if let Some(bad) = token_prefix.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(Error::InvalidInput(format!(
                "token id {bad} out of range for vocab {}",
                c.vocab
            )));
        }
        if cache.prefix_len() + 1 != token_prefix.len() {
            return Err(Error::InvalidInput(format!(
                "cache holds {} positions but the prefix has {} tokens",
                cache.prefix_len(),
                token_prefix.len()
            )));
        }
        if cache.num_layers() != c.layers
            || cache.heads() != c.heads
            || cache.head_dim() != c.head_dim()
        {
            return Err(Error::ShapeMismatch(
                "cache geometry does not match the decoder".into(),
            ));
        }
        if token_prefix.len() > c.max_positions {
            return Err(Error::InvalidInput(format!(
                "prefix of {} tokens exceeds {} positions",
                token_prefix.len(),
                c.max_positions
            )));
        }
        Ok(token)
    }

    /// Builds one decoding step for `token` at `position` into `g`.
    pub fn step_graph(
        &self,
        g: &mut Graph,
        token: TokenId,
        position: usize,
        cache: &CacheNodes,
    ) -> Result<DecoderStep> {
        let c = self.config();
        let w = &self.weights;
        let d = c.width;
        let tok = &w.get("tok_emb").data()[token as usize * d..(token as usize + 1) * d];
        let pos = &w.get("pos_emb").data()[position * d..(position + 1) * d];
        let x0: Vec<f64> = tok.iter().zip(pos).map(|(a, b)| a + b).collect();
        let mut x = g.constant(Tensor::matrix(1, d, x0)?);
        let mut new_k = Vec::with_capacity(c.layers);
        let mut new_v = Vec::with_capacity(c.layers);
        for l in 0..c.layers {
            let b = BlockNodes::load(g, w, &format!("h{l}."));
            let out = block::forward(
                g,
                &b,
                x,
                c.heads,
                Attention::Causal {
                    past: cache.layer(l),
                },
            )?;
            x = out.x;
            new_k.push(out.k);
            new_v.push(out.v);
        }
        let lg = g.constant(w.get("ln_f.g").clone());
        let lb = g.constant(w.get("ln_f.b").clone());
        let head = g.constant(w.get("lm_head").clone());
        let bias = g.constant(w.get("lm_bias").clone());
        let h = g.layer_norm(x, lg, lb, block::LN_EPS)?;
        let logits = g.matmul(h, head)?;
        let logits = g.add(logits, bias)?;
        let logits = g.reshape(logits, vec![c.vocab])?;
        Ok(DecoderStep {
            logits,
            new_k,
            new_v,
        })
    }

    /// `cache` plus the key/value rows of the step's token.
    pub fn extend(
        &self,
        g: &Graph,
        step: &DecoderStep,
        cache: &ContextCache,
    ) -> Result<ContextCache> {
        let ks: Vec<Vec<f64>> = step
            .new_k
            .iter()
            .map(|&k| g.value(k).data().to_vec())
            .collect();
        let vs: Vec<Vec<f64>> = step
            .new_v
            .iter()
            .map(|&v| g.value(v).data().to_vec())
            .collect();
        let mut out = cache.clone();
        out.append(&ks, &vs)?;
        Ok(out)
    }
}

pub(crate) fn f32_round(x: f64) -> f64 {
    x as f32 as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lm() -> DecoderLm {
        DecoderLm::seeded(ModelConfig::decoder(128), 11).unwrap()
    }

    #[test]
    fn fresh_forward_is_a_distribution() {
        let lm = lm();
        let (d, cache) = lm.forward(&[BOS], &lm.empty_cache()).unwrap();
        assert_eq!(d.len(), 128);
        assert!((d.probs().iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert_eq!(cache.prefix_len(), 1);
    }

    #[test]
    fn forward_is_deterministic() {
        let a = lm();
        let b = lm();
        let (da, ca) = a.forward(&[BOS], &a.empty_cache()).unwrap();
        let (db, cb) = b.forward(&[BOS], &b.empty_cache()).unwrap();
        assert_eq!(da, db);
        assert_eq!(ca, cb);
    }

    #[test]
    fn cache_is_the_history() {
        let lm = lm();
        let cache = lm.prefill(&[BOS, 5, 9]).unwrap();
        let (base, _) = lm.forward(&[BOS, 5, 9], &cache).unwrap();
        for layer in 0..2 {
            let mut shifted = cache.clone();
            shifted.values_mut(layer)[3] += 10.0;
            let (d, _) = lm.forward(&[BOS, 5, 9], &shifted).unwrap();
            let l1: f64 = d
                .probs()
                .iter()
                .zip(base.probs())
                .map(|(a, b)| (a - b).abs())
                .sum();
            assert!(l1 > 0.0, "layer {layer}");
        }
    }

    #[test]
    fn prefix_checks() {
        let lm = lm();
        let cache = lm.empty_cache();
        assert!(lm.forward(&[BOS, 3], &cache).is_err());
        assert!(lm.forward(&[500], &cache).is_err());
        assert!(lm.forward(&[], &cache).is_err());
    }

    #[test]
    fn cache_grows_one_position_per_token() {
        let lm = lm();
        let mut cache = lm.empty_cache();
        let mut tokens = vec![BOS];
        for n in 1..=6 {
            let (d, next) = lm.forward(&tokens, &cache).unwrap();
            cache = next;
            assert_eq!(cache.prefix_len(), n);
            for l in 0..cache.num_layers() {
                assert_eq!(cache.keys(l).len(), cache.heads() * n * cache.head_dim());
            }
            tokens.push(d.argmax_id());
        }
    }
}
