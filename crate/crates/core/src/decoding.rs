//! Beam search where every expansion first optimizes the beam's own cache.

use std::cmp::Ordering;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::{
    AlignmentExpert, CandidateBatch, Expert, ExpertOutput, ExpertTag, StyleExpert, StyleTarget,
};
use crate::guidance::{
    inner_optimize, loss_decentralized, loss_product, loss_sum, optimize_alignment_context,
    GuidanceConfig, Variant,
};
use crate::tensor::{Distribution, TokenId};
use crate::zoo::{ContextCache, DecoderLm, DualEncoder, ModalityEmbedding, StyleClassifier};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodingConfig {
    pub beams: usize,
    pub top_k: usize,
    /// Maximum caption length in tokens, end token included.
    pub max_len: usize,
    /// Entries kept per distribution in traces.
    pub trace_top_n: usize,
    /// Decoder layers whose cache is optimized; `None` means all.
    pub context_layers: Option<Vec<usize>>,
}

impl Default for DecodingConfig {
    fn default() -> Self {
        Self {
            beams: 5,
            top_k: 16,
            max_len: 20,
            trace_top_n: 5,
            context_layers: None,
        }
    }
}

impl DecodingConfig {
    pub fn validate(&self, vocab: usize) -> Result<()> {
        if self.beams == 0 {
            return Err(Error::InvalidParameter("beams must be at least 1".into()));
        }
        if self.max_len == 0 {
            return Err(Error::InvalidParameter("max_len must be at least 1".into()));
        }
        if self.top_k == 0 || self.top_k > vocab {
            return Err(Error::InvalidParameter(format!(
                "top_k {} outside 1..={vocab}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// The `top_k` most probable ids of `p_full` (ties to the lower id) and the
/// distribution restricted and renormalized to them.
pub fn select_candidates(
    p_full: &Distribution,
    top_k: usize,
    prefix: Vec<TokenId>,
) -> Result<(CandidateBatch, Distribution)> {
    if top_k == 0 {
        return Err(Error::InvalidParameter("top_k must be at least 1".into()));
    }
    let top = p_full.top_n(top_k);
    let ids: Vec<TokenId> = top.iter().map(|(id, _)| *id).collect();
    let weights: Vec<f64> = top.iter().map(|(_, p)| *p).collect();
    let restricted = Distribution::from_weights(ids.clone(), weights)?;
    let vocab = p_full
        .candidate_ids()
        .iter()
        .max()
        .map_or(0, |&m| m as usize + 1);
    Ok((CandidateBatch::new(prefix, ids, vocab)?, restricted))
}

/// The expert paired with the alignment expert.
#[derive(Debug, Clone)]
pub enum SecondExpert<'a> {
    Style {
        classifier: &'a StyleClassifier,
        target: StyleTarget,
    },
    Audio {
        aligner: &'a DualEncoder,
        clip: ModalityEmbedding,
    },
}

#[derive(Debug, Clone)]
pub struct GenerationRequest<'a> {
    /// Conditioning tokens, starting with the start token.
    pub prompt: Vec<TokenId>,
    pub eos: TokenId,
    pub image: ModalityEmbedding,
    pub second: SecondExpert<'a>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BeamStatus {
    Active,
    Finished,
    Truncated,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub token: TokenId,
    pub prob: f64,
}

fn top_entries(d: &Distribution, n: usize) -> Vec<TopEntry> {
    d.top_n(n)
        .into_iter()
        .map(|(token, prob)| TopEntry { token, prob })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrace {
    pub expert: ExpertTag,
    pub top: Vec<TopEntry>,
}

/// Everything known about one emitted token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceRecord {
    /// Index of the token within the caption.
    pub position: usize,
    pub chosen: TokenId,
    pub p0: Vec<TopEntry>,
    pub experts: Vec<ExpertTrace>,
    pub p_final: Vec<TopEntry>,
    /// Inner-loop loss before each step and after the last one.
    pub losses: Vec<f64>,
    /// Alignment-context losses of the decentralization step, if any.
    pub decentral_losses: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BeamTrace {
    pub caption: Vec<TokenId>,
    pub log_score: f64,
    pub status: BeamStatus,
    pub records: Vec<TraceRecord>,
}

/// Per-beam records for every beam alive at the end, best first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GenerationTrace {
    pub beams: Vec<BeamTrace>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    /// Generated tokens after the prompt; ends with the end token unless truncated.
    pub caption: Vec<TokenId>,
    pub log_score: f64,
    /// No beam emitted the end token within `max_len`.
    pub truncated: bool,
    pub trace: GenerationTrace,
}

#[derive(Debug, Clone)]
pub struct BeamState {
    pub tokens: Vec<TokenId>,
    pub log_score: f64,
    /// Holds every token of `tokens` but the last.
    pub cache: ContextCache,
    pub status: BeamStatus,
    records: Vec<TraceRecord>,
}

impl BeamState {
    fn caption(&self, prompt_len: usize) -> &[TokenId] {
        &self.tokens[prompt_len..]
    }
}

fn rank(a: &BeamState, b: &BeamState) -> Ordering {
    b.log_score
        .total_cmp(&a.log_score)
        .then_with(|| a.tokens.cmp(&b.tokens))
}

enum Second<'a> {
    Style(StyleExpert<'a>),
    Audio(AlignmentExpert<'a>),
}

impl Second<'_> {
    fn score(&self, batch: &CandidateBatch) -> Result<ExpertOutput> {
        match self {
            Second::Style(e) => e.score(batch),
            Second::Audio(e) => e.score(batch),
        }
    }
}

/// Result of guiding one position of one beam.
#[derive(Debug, Clone)]
pub struct Expansion {
    /// Top `beams` successors under the guided distribution.
    pub successors: Vec<(TokenId, f64)>,
    /// Optimized history extended with the processed token.
    pub cache: ContextCache,
    /// Trace of this position; `chosen` is filled in by the caller.
    pub record: TraceRecord,
}

/// Experts and configuration shared by every position of one generation.
pub struct Guide<'a> {
    decoder: &'a DecoderLm,
    alignment: AlignmentExpert<'a>,
    second: Second<'a>,
    guidance: &'a GuidanceConfig,
    decoding: &'a DecodingConfig,
    prompt_len: usize,
}

impl<'a> Guide<'a> {
    pub fn new(
        decoder: &'a DecoderLm,
        aligner: &'a DualEncoder,
        request: &GenerationRequest<'a>,
        guidance: &'a GuidanceConfig,
        decoding: &'a DecodingConfig,
    ) -> Result<Self> {
        guidance.validate()?;
        decoding.validate(decoder.vocab())?;
        let alignment = AlignmentExpert::new(
            aligner,
            request.image.clone(),
            guidance.tau_align(),
            ExpertTag::Alignment,
        )?;
        let second = match &request.second {
            SecondExpert::Style { classifier, target } => Second::Style(StyleExpert::new(
                classifier,
                target.clone(),
                guidance.tau_style(),
            )?),
            SecondExpert::Audio { aligner, clip } => Second::Audio(AlignmentExpert::new(
                aligner,
                clip.clone(),
                guidance.tau_style(),
                ExpertTag::Audio,
            )?),
        };
        Ok(Self {
            decoder,
            alignment,
            second,
            guidance,
            decoding,
            prompt_len: request.prompt.len(),
        })
    }

    /// Guides the position after `tokens` (prompt included); `cache` holds
    /// every token but the last.
    pub fn expand(&self, tokens: &[TokenId], cache: &ContextCache) -> Result<Expansion> {
        if tokens.len() < self.prompt_len {
            return Err(Error::InvalidInput(
                "token prefix is shorter than the prompt".into(),
            ));
        }
        let (p_full, extended) = self.decoder.forward(tokens, cache)?;
        let prefix = tokens[self.prompt_len..].to_vec();
        let position = prefix.len();
        let (batch, p0) = select_candidates(&p_full, self.decoding.top_k, prefix)?;
        let n = self.decoding.trace_top_n;
        let mut record = TraceRecord {
            position,
            chosen: 0,
            p0: top_entries(&p0, n),
            experts: Vec::new(),
            p_final: Vec::new(),
            losses: Vec::new(),
            decentral_losses: Vec::new(),
        };
        let (p_final, cache) = if self.guidance.inner_steps == 0 {
            (p0, extended)
        } else {
            let align = self.alignment.score(&batch)?;
            let second = self.second.score(&batch)?;
            let mut experts = vec![&align, &second];
            let decentral;
            let terms = match self.guidance.variant {
                Variant::Sum => loss_sum(&p0, &align.dist, &second.dist, self.guidance)?,
                Variant::Product => loss_product(&p0, &[&align.dist, &second.dist], self.guidance)?,
                Variant::ProductDecentralized => {
                    decentral = optimize_alignment_context(
                        self.alignment.aligner(),
                        self.alignment.features(),
                        self.alignment.cache(),
                        &batch.sequences(),
                        &align,
                        &second.dist,
                        self.guidance,
                    )?;
                    record.decentral_losses = decentral.losses.clone();
                    experts.push(&decentral.p_align_style);
                    loss_decentralized(
                        &p0,
                        &decentral.p_align_style.dist,
                        &second.dist,
                        self.guidance,
                    )?
                }
            };
            record.experts = experts
                .iter()
                .map(|e| ExpertTrace {
                    expert: e.tag,
                    top: top_entries(&e.dist, n),
                })
                .collect();
            let out = inner_optimize(self.decoder, tokens, cache, &p0, &terms, self.guidance)?;
            record.losses = out.losses;
            (out.p_final, out.cache)
        };
        record.p_final = top_entries(&p_final, n);
        Ok(Expansion {
            successors: p_final.top_n(self.decoding.beams),
            cache,
            record,
        })
    }
}

/// Generates one caption for `request`.
pub fn generate(
    decoder: &DecoderLm,
    aligner: &DualEncoder,
    request: &GenerationRequest<'_>,
    guidance: &GuidanceConfig,
    decoding: &DecodingConfig,
) -> Result<Generation> {
    let run = Guide::new(decoder, aligner, request, guidance, decoding)?;
    let prompt_len = request.prompt.len();

    let mut cache = decoder.prefill(&request.prompt)?;
    if let Some(layers) = &decoding.context_layers {
        cache.select_layers(layers)?;
    }
    let mut beams = vec![BeamState {
        tokens: request.prompt.clone(),
        log_score: 0.0,
        cache,
        status: BeamStatus::Active,
        records: Vec::new(),
    }];

    while beams.iter().any(|b| b.status == BeamStatus::Active) {
        let active: Vec<&BeamState> = beams
            .iter()
            .filter(|b| b.status == BeamStatus::Active)
            .collect();
        let expansions: Vec<Expansion> = active
            .par_iter()
            .map(|b| run.expand(&b.tokens, &b.cache))
            .collect::<Result<_>>()?;
        let mut pool: Vec<BeamState> = beams
            .iter()
            .filter(|b| b.status != BeamStatus::Active)
            .cloned()
            .collect();
        for (beam, exp) in active.iter().zip(expansions) {
            for &(token, prob) in &exp.successors {
                let mut tokens = beam.tokens.clone();
                tokens.push(token);
                let status = if token == request.eos {
                    BeamStatus::Finished
                } else if tokens.len() - prompt_len >= decoding.max_len {
                    BeamStatus::Truncated
                } else {
                    BeamStatus::Active
                };
                let mut records = beam.records.clone();
                let mut record = exp.record.clone();
                record.chosen = token;
                records.push(record);
                pool.push(BeamState {
                    tokens,
                    log_score: beam.log_score + prob.ln(),
                    cache: exp.cache.clone(),
                    status,
                    records,
                });
            }
        }
        pool.sort_by(rank);
        pool.truncate(decoding.beams);
        beams = pool;
    }

    let best = beams
        .iter()
        .find(|b| b.status == BeamStatus::Finished)
        .or_else(|| beams.first())
        .ok_or_else(|| Error::InvalidInput("beam search produced no beams".into()))?;
    let trace = GenerationTrace {
        beams: beams
            .iter()
            .map(|b| BeamTrace {
                caption: b.caption(prompt_len).to_vec(),
                log_score: b.log_score,
                status: b.status,
                records: b.records.clone(),
            })
            .collect(),
    };
    Ok(Generation {
        caption: best.caption(prompt_len).to_vec(),
        log_score: best.log_score,
        truncated: best.status != BeamStatus::Finished,
        trace,
    })
}
