//! Caption quality metrics: fluency, text-modality correspondence, style
//! accuracy and vocabulary size.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experts::StyleTarget;
use crate::tensor::{cosine_similarity, TokenId, LOG_CLAMP};
use crate::zoo::{DecoderLm, DualEncoder, ModalityEmbedding, StyleClassifier};

pub const PERPLEXITY_CLIP: f64 = 1500.0;

/// `1 - min(ppl, 1500) / 1500`.
pub fn fluency_from_perplexity(ppl: f64) -> f64 {
    1.0 - ppl.min(PERPLEXITY_CLIP) / PERPLEXITY_CLIP
}

/// Perplexity of `caption` after `prompt` under the unmodified model. The
/// prompt and a trailing end token are not scored.
pub fn perplexity(
    lm: &DecoderLm,
    prompt: &[TokenId],
    caption: &[TokenId],
    eos: TokenId,
) -> Result<f64> {
    let scored = match caption.last() {
        Some(&last) if last == eos => &caption[..caption.len() - 1],
        _ => caption,
    };
    if scored.is_empty() {
        return Err(Error::InvalidInput("perplexity of an empty caption".into()));
    }
    if prompt.is_empty() {
        return Err(Error::InvalidInput(
            "perplexity needs a non-empty prompt".into(),
        ));
    }
    let mut tokens = prompt.to_vec();
    let mut cache = lm.prefill(&tokens)?;
    let mut nll = 0.0;
    for &t in scored {
        let (dist, next) = lm.forward(&tokens, &cache)?;
        let p = dist
            .prob_of(t)
            .ok_or_else(|| Error::InvalidInput(format!("token {t} outside the vocabulary")))?;
        nll -= p.max(LOG_CLAMP).ln();
        cache = next;
        tokens.push(t);
    }
    Ok((nll / scored.len() as f64).exp())
}

/// Fluency of `caption`; a caption with no tokens besides the end token
/// scores 0.
pub fn fluency_score(
    lm: &DecoderLm,
    prompt: &[TokenId],
    caption: &[TokenId],
    eos: TokenId,
) -> Result<f64> {
    if caption.iter().all(|&t| t == eos) {
        return Ok(0.0);
    }
    Ok(fluency_from_perplexity(perplexity(
        lm, prompt, caption, eos,
    )?))
}

/// `max(0, cos(text, modality))` with the end token dropped from the text.
pub fn correspondence(
    caption: &[TokenId],
    modality: &ModalityEmbedding,
    aligner: &DualEncoder,
    eos: TokenId,
) -> Result<f64> {
    let text: Vec<TokenId> = caption.iter().copied().filter(|&t| t != eos).collect();
    if text.is_empty() {
        return Ok(0.0);
    }
    let (encoded, _) = aligner.encode_modality(modality)?;
    let t = aligner.encode_text(&text)?;
    Ok(cosine_similarity(t.vector(), encoded.vector()).max(0.0))
}

/// Text-image correspondence.
pub fn tic_score(
    caption: &[TokenId],
    image: &ModalityEmbedding,
    aligner: &DualEncoder,
    eos: TokenId,
) -> Result<f64> {
    correspondence(caption, image, aligner, eos)
}

/// Text-audio correspondence.
pub fn tac_score(
    caption: &[TokenId],
    audio: &ModalityEmbedding,
    audio_aligner: &DualEncoder,
    eos: TokenId,
) -> Result<f64> {
    correspondence(caption, audio, audio_aligner, eos)
}

/// Whether the classifier assigns `caption` to `target`.
pub fn style_match(
    caption: &[TokenId],
    classifier: &StyleClassifier,
    target: &StyleTarget,
    eos: TokenId,
) -> Result<bool> {
    let text: Vec<TokenId> = caption.iter().copied().filter(|&t| t != eos).collect();
    if text.is_empty() {
        return Ok(false);
    }
    target.matches(&classifier.classify(&text)?)
}

/// Fraction of captions classified as `target`.
pub fn style_accuracy(
    captions: &[Vec<TokenId>],
    classifier: &StyleClassifier,
    target: &StyleTarget,
    eos: TokenId,
) -> Result<f64> {
    if captions.is_empty() {
        return Err(Error::InvalidInput(
            "style accuracy over no captions".into(),
        ));
    }
    let mut hits = 0usize;
    for c in captions {
        if style_match(c, classifier, target, eos)? {
            hits += 1;
        }
    }
    Ok(hits as f64 / captions.len() as f64)
}

/// Distinct case-folded words across whitespace-separated captions.
pub fn vocab_size<S: AsRef<str>>(captions: &[S]) -> usize {
    captions
        .iter()
        .flat_map(|c| c.as_ref().split_whitespace().map(str::to_lowercase))
        .collect::<BTreeSet<_>>()
        .len()
}

/// One row of an evaluation report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRow {
    pub model: String,
    pub style: String,
    pub tic: f64,
    /// Absent when the run has no style target, as in audio steering.
    pub style_accuracy: Option<f64>,
    pub fluency: f64,
    pub vocab: usize,
    pub tac: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

/// Scores of a single caption; reports average these.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionScores {
    pub tic: f64,
    pub style_match: Option<bool>,
    pub fluency: f64,
    pub tac: Option<f64>,
}

impl EvalRow {
    /// Means over per-caption scores.
    pub fn aggregate(
        model: &str,
        style: &str,
        scores: &[CaptionScores],
        captions: &[String],
    ) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::InvalidInput("report row over no captions".into()));
        }
        let n = scores.len() as f64;
        let mean = |f: &dyn Fn(&CaptionScores) -> f64| scores.iter().map(f).sum::<f64>() / n;
        let tac = scores
            .iter()
            .all(|s| s.tac.is_some())
            .then(|| mean(&|s| s.tac.unwrap_or(0.0)));
        let style_accuracy = scores.iter().all(|s| s.style_match.is_some()).then(|| {
            mean(&|s| {
                if s.style_match == Some(true) {
                    1.0
                } else {
                    0.0
                }
            })
        });
        Ok(Self {
            model: model.to_string(),
            style: style.to_string(),
            tic: mean(&|s| s.tic),
            style_accuracy,
            fluency: mean(&|s| s.fluency),
            vocab: vocab_size(captions),
            tac,
        })
    }
}
