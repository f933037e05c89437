//! Fusion losses and the normalized gradient steps that move context caches
//! toward them.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{product_of_experts, ExpertOutput, ExpertTag};
use crate::tensor::{Distribution, Graph, NodeId, Tensor, TokenId};
use crate::zoo::{
    CacheGrads, CacheNodes, ContextCache, DecoderLm, DecoderStep, DualEncoder, ModalityEmbedding,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    /// Weighted sum of cross-entropies to each expert.
    Sum,
    /// Cross-entropy to the renormalized product of the experts.
    Product,
    /// Product variant after first steering the alignment expert toward the style expert.
    ProductDecentralized,
}

impl Variant {
    pub const ALL: [Variant; 3] = [
        Variant::Sum,
        Variant::Product,
        Variant::ProductDecentralized,
    ];
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Sum => "sum",
            Variant::Product => "product",
            Variant::ProductDecentralized => "product_decentralized",
        })
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sum" => Ok(Variant::Sum),
            "product" => Ok(Variant::Product),
            "product_decentralized" => Ok(Variant::ProductDecentralized),
            other => Err(Error::InvalidParameter(format!(
                "unknown variant `{other}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepSign {
    Descent,
    Ascent,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradNorm {
    /// `alpha * g / ||g||^2`
    Squared,
    /// `alpha * g / ||g||`
    Plain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormScope {
    /// Each layer's concatenated (K, V) is normalized on its own.
    PerLayer,
    /// One norm over every selected layer.
    Global,
}

macro_rules! keyword_enum {
    ($ty:ident { $($name:literal => $variant:ident),* $(,)? }) => {
        impl FromStr for $ty {
            type Err = Error;
            fn from_str(s: &str) -> Result<Self> {
                match s {
                    $($name => Ok($ty::$variant),)*
                    other => Err(Error::InvalidParameter(format!(
                        concat!("unknown ", stringify!($ty), " `{}`"),
                        other
                    ))),
                }
            }
        }
    };
}

keyword_enum!(StepSign { "descent" => Descent, "ascent" => Ascent });
keyword_enum!(GradNorm { "squared" => Squared, "plain" => Plain });
keyword_enum!(NormScope { "per_layer" => PerLayer, "global" => Global });

/// Target polarity used to pick a preset row.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Polarity {
    Positive,
    Negative,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub variant: Variant,
    pub lambda_lm: f64,
    pub lambda_cl: f64,
    pub lambda_sl: f64,
    /// Shared softmax temperature of the experts.
    pub tau: f64,
    pub tau_align: Option<f64>,
    pub tau_style: Option<f64>,
    /// Step size for the language model's cache.
    pub alpha_lm: f64,
    /// Step size for the aligner's cache during decentralization.
    pub alpha_align: f64,
    pub inner_steps: usize,
    pub decentral_steps: usize,
    pub sign: StepSign,
    pub grad_norm: GradNorm,
    /// Normalization of the aligner step. Plain by default: a squared-norm
    /// step always promises a first-order decrease of `alpha_align`, which
    /// overshoots whenever the remaining gap to the target is smaller.
    pub align_grad_norm: GradNorm,
    pub norm_scope: NormScope,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        Self::preset(Variant::Product, Polarity::Positive)
    }
}

impl GuidanceConfig {
    /// Tuned weights and temperatures per variant and target polarity.
    pub fn preset(variant: Variant, polarity: Polarity) -> Self {
        let (tau, lambda_lm, lambda_cl, lambda_sl) = match (variant, polarity) {
            (Variant::ProductDecentralized, Polarity::Positive) => (0.14, 0.22, 1.0, 0.0),
            (Variant::ProductDecentralized, Polarity::Negative) => (0.17, 0.61, 2.0, 0.0),
            (Variant::Product, Polarity::Positive) => (0.01, 4.0, 8.0, 0.0),
            (Variant::Product, Polarity::Negative) => (0.09, 0.62, 2.0, 0.0),
            (Variant::Sum, Polarity::Positive) => (0.001, 2.0, 2.2, 9.7),
            (Variant::Sum, Polarity::Negative) => (0.001, 2.9, 5.0, 11.9),
        };
        Self {
            variant,
            lambda_lm,
            lambda_cl,
            lambda_sl,
            tau,
            tau_align: None,
            tau_style: None,
            alpha_lm: 2.0,
            alpha_align: 0.3,
            inner_steps: 5,
            decentral_steps: 1,
            sign: StepSign::Descent,
            grad_norm: GradNorm::Squared,
            align_grad_norm: GradNorm::Plain,
            norm_scope: NormScope::PerLayer,
        }
    }

    pub fn tau_align(&self) -> f64 {
        self.tau_align.unwrap_or(self.tau)
    }

    pub fn tau_style(&self) -> f64 {
        self.tau_style.unwrap_or(self.tau)
    }

    pub fn validate(&self) -> Result<()> {
        let taus = [
            ("tau", Some(self.tau)),
            ("tau_align", self.tau_align),
            ("tau_style", self.tau_style),
        ];
        for (name, tau) in taus {
            if let Some(t) = tau {
                if !(t > 0.0) || !t.is_finite() {
                    return Err(Error::InvalidParameter(format!(
                        "{name} must be positive, got {t}"
                    )));
                }
            }
        }
        let lambdas = [
            ("lambda_lm", self.lambda_lm),
            ("lambda_cl", self.lambda_cl),
            ("lambda_sl", self.lambda_sl),
        ];
        for (name, l) in lambdas {
            if !(l >= 0.0) || !l.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be non-negative, got {l}"
                )));
            }
        }
        if lambdas.iter().all(|(_, l)| *l == 0.0) {
            return Err(Error::InvalidParameter(
                "at least one loss weight must be positive".into(),
            ));
        }
        for (name, a) in [
            ("alpha_lm", self.alpha_lm),
            ("alpha_align", self.alpha_align),
        ] {
            if !(a >= 0.0) || !a.is_finite() {
                return Err(Error::InvalidParameter(format!(
                    "{name} must be non-negative, got {a}"
                )));
            }
        }
        Ok(())
    }
}

/// Weighted cross-entropy terms `sum_i w_i * CE(p, target_i)` over one support.
#[derive(Debug, Clone, PartialEq)]
pub struct LossTerms {
    support: Vec<TokenId>,
    terms: Vec<(f64, Distribution)>,
}

impl LossTerms {
    fn new(support: &[TokenId], terms: Vec<(f64, Distribution)>) -> Result<Self> {
        for (_, t) in &terms {
            if t.candidate_ids() != support {
                return Err(Error::InvalidInput(
                    "loss terms over mismatched candidate sets".into(),
                ));
            }
        }
        Ok(Self {
            support: support.to_vec(),
            terms,
        })
    }

    pub fn support(&self) -> &[TokenId] {
        &self.support
    }

    pub fn terms(&self) -> &[(f64, Distribution)] {
        &self.terms
    }

    /// Adds the loss on the distribution node `p` to `g`.
    pub fn build(&self, g: &mut Graph, p: NodeId) -> Result<NodeId> {
        let mut total: Option<NodeId> = None;
        for (w, target) in &self.terms {
            let ce = g.cross_entropy(p, target.probs())?;
            let ce = g.scale(ce, *w)?;
            total = Some(match total {
                Some(t) => g.add(t, ce)?,
                None => ce,
            });
        }
        total.ok_or_else(|| Error::InvalidInput("loss without terms".into()))
    }

    /// Loss value for a plain distribution.
    pub fn evaluate(&self, p: &Distribution) -> Result<f64> {
        self.terms
            .iter()
            .map(|(w, t)| Ok(w * crate::tensor::cross_entropy(p, t)?))
            .sum()
    }
}

/// `l_lm CE(p, p0) + l_cl CE(p, p_align) + l_sl CE(p, p_style)`.
pub fn loss_sum(
    p0: &Distribution,
    p_align: &Distribution,
    p_style: &Distribution,
    cfg: &GuidanceConfig,
) -> Result<LossTerms> {
    LossTerms::new(
        p0.candidate_ids(),
        vec![
            (cfg.lambda_lm, p0.clone()),
            (cfg.lambda_cl, p_align.clone()),
            (cfg.lambda_sl, p_style.clone()),
        ],
    )
}

/// `l_lm CE(p, p0) + l_cl CE(p, product(experts))`.
pub fn loss_product(
    p0: &Distribution,
    experts: &[&Distribution],
    cfg: &GuidanceConfig,
) -> Result<LossTerms> {
    let target = product_of_experts(experts)?;
    LossTerms::new(
        p0.candidate_ids(),
        vec![(cfg.lambda_lm, p0.clone()), (cfg.lambda_cl, target)],
    )
}

/// `l_lm CE(p, p0) + l_cl CE(p, product(p_align_style, p_style))`.
pub fn loss_decentralized(
    p0: &Distribution,
    p_align_style: &Distribution,
    p_style: &Distribution,
    cfg: &GuidanceConfig,
) -> Result<LossTerms> {
    loss_product(p0, &[p_align_style, p_style], cfg)
}

/// Gradient norms at or below this are rounding noise at a stationary point;
/// normalizing them would turn noise into an arbitrarily large step.
pub const STATIONARY_NORM: f64 = 1e-10;

/// Applies one normalized step per layer group (or globally) in place. Groups
/// whose gradient norm is at most [`STATIONARY_NORM`] are left unchanged.
pub fn gradient_step(
    cache: &mut ContextCache,
    grads: &CacheGrads,
    alpha: f64,
    cfg: &GuidanceConfig,
) -> Result<()> {
    for (l, g) in grads.layers.iter().enumerate() {
        if let Some((gk, gv)) = g {
            if gk.iter().chain(gv).any(|x| !x.is_finite()) {
                return Err(Error::Numeric(format!(
                    "non-finite gradient in layer {l} key/value group"
                )));
            }
        }
    }
    let sign = match cfg.sign {
        StepSign::Descent => -1.0,
        StepSign::Ascent => 1.0,
    };
    let scale_for = |norm: f64| match cfg.grad_norm {
        GradNorm::Squared => alpha / (norm * norm),
        GradNorm::Plain => alpha / norm,
    };
    let global = grads.norm();
    for (l, g) in grads.layers.iter().enumerate() {
        let Some((gk, gv)) = g else { continue };
        let norm = match cfg.norm_scope {
            NormScope::PerLayer => gk.iter().chain(gv).map(|x| x * x).sum::<f64>().sqrt(),
            NormScope::Global => global,
        };
        if norm <= STATIONARY_NORM || alpha == 0.0 {
            continue;
        }
        let factor = sign * scale_for(norm);
        if !factor.is_finite() {
            return Err(Error::Numeric(format!(
                "step for layer {l} overflows (gradient norm {norm:e})"
            )));
        }
        cache
            .keys_mut(l)
            .iter_mut()
            .zip(gk)
            .for_each(|(c, g)| *c += factor * g);
        cache
            .values_mut(l)
            .iter_mut()
            .zip(gv)
            .for_each(|(c, g)| *c += factor * g);
    }
    Ok(())
}

/// Outcome of optimizing the language model's cache at one position.
#[derive(Debug, Clone)]
pub struct InnerOutcome {
    /// Optimized history extended with the processed token's keys and values.
    pub cache: ContextCache,
    /// Restricted distribution after the last step.
    pub p_final: Distribution,
    /// Loss before each step and after the last one (`T + 1` values).
    pub losses: Vec<f64>,
}

struct Evaluated {
    graph: Graph,
    loss: NodeId,
    probs: NodeId,
    step: DecoderStep,
    nodes: CacheNodes,
}

fn evaluate_decoder(
    decoder: &DecoderLm,
    token: TokenId,
    cache: &ContextCache,
    terms: &LossTerms,
) -> Result<Evaluated> {
    let mut g = Graph::new();
    let nodes = cache.to_graph(&mut g);
    let step = decoder.step_graph(&mut g, token, cache.prefix_len(), &nodes)?;
    let ids: Vec<usize> = terms.support().iter().map(|&t| t as usize).collect();
    let restricted = g.gather(step.logits, &ids)?;
    let probs = g.softmax(restricted)?;
    let loss = terms.build(&mut g, probs)?;
    Ok(Evaluated {
        graph: g,
        loss,
        probs,
        step,
        nodes,
    })
}

/// Loss of `terms` for the next-token distribution after `tokens` under
/// `cache`, with its gradient in the selected cache layers.
pub fn decoder_loss(
    decoder: &DecoderLm,
    tokens: &[TokenId],
    cache: &ContextCache,
    terms: &LossTerms,
) -> Result<(f64, CacheGrads)> {
    let token = decoder.check_prefix(tokens, cache)?;
    let ev = evaluate_decoder(decoder, token, cache, terms)?;
    let grads = ev.nodes.gradients(&ev.graph, ev.loss)?;
    Ok((ev.graph.value(ev.loss).item(), grads))
}

/// Runs `cfg.inner_steps` normalized steps on `cache` (the history before the
/// last token of `tokens`) toward `terms`, whose support is the candidate set.
pub fn inner_optimize(
    decoder: &DecoderLm,
    tokens: &[TokenId],
    cache: &ContextCache,
    p0: &Distribution,
    terms: &LossTerms,
    cfg: &GuidanceConfig,
) -> Result<InnerOutcome> {
    let token = decoder.check_prefix(tokens, cache)?;
    if p0.candidate_ids() != terms.support() {
        return Err(Error::InvalidInput(
            "p0 and loss terms use different candidates".into(),
        ));
    }
    let mut current = cache.clone();
    let mut losses = Vec::with_capacity(cfg.inner_steps + 1);
    for t in 0..=cfg.inner_steps {
        let ev = evaluate_decoder(decoder, token, &current, terms)?;
        let loss = ev.graph.value(ev.loss).item();
        if !loss.is_finite() {
            return Err(Error::Numeric(format!(
                "loss became {loss} at inner step {t}"
            )));
        }
        losses.push(loss);
        if t == cfg.inner_steps {
            let p_final = if cfg.inner_steps == 0 {
                p0.clone()
            } else {
                Distribution::from_weights(
                    terms.support().to_vec(),
                    ev.graph.value(ev.probs).data().to_vec(),
                )?
            };
            let extended = decoder.extend(&ev.graph, &ev.step, &current)?;
            return Ok(InnerOutcome {
                cache: extended,
                p_final,
                losses,
            });
        }
        let grads = ev.nodes.gradients(&ev.graph, ev.loss)?;
        gradient_step(&mut current, &grads, cfg.alpha_lm, cfg)?;
    }
    unreachable!("the loop returns on its last iteration")
}

/// Outcome of steering the aligner's first-layer cache toward a style.
#[derive(Debug, Clone)]
pub struct DecentralOutcome {
    pub cache: ContextCache,
    /// Frozen target: renormalized product of the initial alignment and style distributions.
    pub target: Distribution,
    /// Alignment distribution under the optimized cache.
    pub p_align_style: ExpertOutput,
    /// `CE(P_align^(j), target)` for `j = 0..=J`.
    pub losses: Vec<f64>,
}

/// Alignment scores and their softmax as graph nodes, differentiable in the
/// aligner cache.
fn alignment_graph(
    g: &mut Graph,
    aligner: &DualEncoder,
    features: &ModalityEmbedding,
    texts: &Tensor,
    cache: &ContextCache,
    tau: f64,
) -> Result<(NodeId, NodeId, CacheNodes)> {
    let nodes = cache.to_graph(g);
    let emb = aligner.modality_graph(g, features, &nodes)?;
    let t = g.constant(texts.clone());
    let cos = g.cosine(t, emb)?;
    let logits = g.scale(cos, 1.0 / tau)?;
    let probs = g.softmax(logits)?;
    Ok((cos, probs, nodes))
}

fn stack_texts(aligner: &DualEncoder, sequences: &[Vec<TokenId>]) -> Result<Tensor> {
    let texts = aligner.encode_texts(sequences)?;
    Tensor::new(
        vec![texts.len(), aligner.align_dim()],
        texts
            .iter()
            .flat_map(|t| t.vector().iter().copied())
            .collect(),
    )
}

/// `CE(P_align, target)` under the aligner cache, with its gradient.
pub fn alignment_loss(
    aligner: &DualEncoder,
    features: &ModalityEmbedding,
    aligner_cache: &ContextCache,
    sequences: &[Vec<TokenId>],
    target: &Distribution,
    tau: f64,
) -> Result<(f64, CacheGrads)> {
    if sequences.len() != target.len() {
        return Err(Error::InvalidInput(
            "one candidate sentence per candidate is required".into(),
        ));
    }
    let texts = stack_texts(aligner, sequences)?;
    let mut g = Graph::new();
    let (_, probs, nodes) = alignment_graph(&mut g, aligner, features, &texts, aligner_cache, tau)?;
    let loss = g.cross_entropy(probs, target.probs())?;
    let grads = nodes.gradients(&g, loss)?;
    Ok((g.value(loss).item(), grads))
}

/// Takes `cfg.decentral_steps` normalized steps on the aligner's first-layer
/// cache toward `product(p_align0, p_style)`, frozen at the start.
pub fn optimize_alignment_context(
    aligner: &DualEncoder,
    features: &ModalityEmbedding,
    aligner_cache: &ContextCache,
    sequences: &[Vec<TokenId>],
    p_align0: &ExpertOutput,
    p_style: &Distribution,
    cfg: &GuidanceConfig,
) -> Result<DecentralOutcome> {
    let target = product_of_experts(&[&p_align0.dist, p_style])?;
    let tau = cfg.tau_align();
    let support = p_align0.dist.candidate_ids().to_vec();
    if sequences.len() != support.len() {
        return Err(Error::InvalidInput(
            "one candidate sentence per candidate is required".into(),
        ));
    }
    if cfg.decentral_steps == 0 {
        let loss = crate::tensor::cross_entropy(&p_align0.dist, &target)?;
        let mut p = p_align0.clone();
        p.tag = ExpertTag::AlignmentStyle;
        return Ok(DecentralOutcome {
            cache: aligner_cache.clone(),
            target,
            p_align_style: p,
            losses: vec![loss],
        });
    }
    let texts = stack_texts(aligner, sequences)?;
    let step_cfg = GuidanceConfig {
        grad_norm: cfg.align_grad_norm,
        ..cfg.clone()
    };
    let mut current = aligner_cache.clone();
    let mut losses = Vec::with_capacity(cfg.decentral_steps + 1);
    for j in 0..=cfg.decentral_steps {
        let mut g = Graph::new();
        let (cos, probs, nodes) =
            alignment_graph(&mut g, aligner, features, &texts, &current, tau)?;
        let loss = g.cross_entropy(probs, target.probs())?;
        losses.push(g.value(loss).item());
        if j == cfg.decentral_steps {
            let raw_scores = g.value(cos).data().to_vec();
            let dist = Distribution::from_weights(support.clone(), g.value(probs).data().to_vec())?;
            return Ok(DecentralOutcome {
                cache: current,
                target,
                p_align_style: ExpertOutput {
                    dist,
                    raw_scores,
                    tag: ExpertTag::AlignmentStyle,
                },
                losses,
            });
        }
        let grads = nodes.gradients(&g, loss)?;
        gradient_step(&mut current, &grads, cfg.alpha_align, &step_cfg)?;
    }
    unreachable!("the loop returns on its last iteration")
}
