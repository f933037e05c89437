//! Experts scoring a shared set of candidate next tokens.

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{cosine_similarity, Distribution, TokenId};
use crate::zoo::world::ClassifierKind;
use crate::zoo::{ContextCache, DualEncoder, ModalityEmbedding, StyleClassifier};

/// Emotion classes summed for the humorous style.
pub const HUMOR_CLASSES: [usize; 2] = [0, 53];
/// Emotion classes summed for the romantic style.
pub const ROMANTIC_CLASSES: [usize; 5] = [4, 8, 18, 23, 24];

/// A partial caption and the candidate tokens that may extend it.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateBatch {
    prefix: Vec<TokenId>,
    candidates: Vec<TokenId>,
}

impl CandidateBatch {
    pub fn new(prefix: Vec<TokenId>, candidates: Vec<TokenId>, vocab: usize) -> Result<Self> {
        if candidates.is_empty() {
            return Err(Error::InvalidInput("empty candidate set".into()));
        }
        if candidates.len() > vocab {
            return Err(Error::InvalidInput(format!(
                "{} candidates exceed vocabulary of {vocab}",
                candidates.len()
            )));
        }
        let mut seen = HashSet::new();
        for &c in &candidates {
            if c as usize >= vocab {
                return Err(Error::InvalidInput(format!(
                    "candidate {c} out of range for vocab {vocab}"
                )));
            }
            if !seen.insert(c) {
                return Err(Error::InvalidInput(format!("duplicate candidate {c}")));
            }
        }
        Ok(Self { prefix, candidates })
    }

    pub fn prefix(&self) -> &[TokenId] {
        &self.prefix
    }

    pub fn candidates(&self) -> &[TokenId] {
        &self.candidates
    }

    pub fn len(&self) -> usize {
        self.candidates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.candidates.is_empty()
    }

    /// `prefix + [candidate]` for every candidate, in chronological order.
    pub fn sequences(&self) -> Vec<Vec<TokenId>> {
        self.candidates
            .iter()
            .map(|&c| {
                let mut s = self.prefix.clone();
                s.push(c);
                s
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExpertTag {
    LanguageModel,
    Alignment,
    Style,
    Audio,
    AlignmentStyle,
}

impl fmt::Display for ExpertTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ExpertTag::LanguageModel => "lm",
            ExpertTag::Alignment => "alignment",
            ExpertTag::Style => "style",
            ExpertTag::Audio => "audio",
            ExpertTag::AlignmentStyle => "alignment_style",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertOutput {
    pub dist: Distribution,
    pub raw_scores: Vec<f64>,
    pub tag: ExpertTag,
}

/// What the style expert rewards.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum StyleTarget {
    /// Probability of one class.
    Class(usize),
    /// Summed probability of several emotion classes.
    Emotions(Vec<usize>),
}

impl StyleTarget {
    /// Resolves a style name for the given classifier family.
    pub fn from_name(name: &str, kind: ClassifierKind) -> Result<Self> {
        match (kind, name) {
            (ClassifierKind::Binary, "negative") => Ok(StyleTarget::Class(0)),
            (ClassifierKind::Binary, "positive") => Ok(StyleTarget::Class(1)),
            (ClassifierKind::Emotion64, "humorous" | "humor") => {
                Ok(StyleTarget::Emotions(HUMOR_CLASSES.to_vec()))
            }
            (ClassifierKind::Emotion64, "romantic") => {
                Ok(StyleTarget::Emotions(ROMANTIC_CLASSES.to_vec()))
            }
            _ => Err(Error::UnknownStyle(name.to_string())),
        }
    }

    /// Scalar the expert ranks candidates by.
    pub fn score(&self, class_probs: &[f64]) -> Result<f64> {
        match self {
            StyleTarget::Class(c) => class_probs
                .get(*c)
                .copied()
                .ok_or_else(|| Error::UnknownStyle(format!("class {c} of {}", class_probs.len()))),
            StyleTarget::Emotions(idx) => emoji_aggregate(class_probs, idx),
        }
    }

    /// Whether a classifier output counts as this style: argmax for a single
    /// class, aggregated mass of at least one half for emotion sets.
    pub fn matches(&self, class_probs: &[f64]) -> Result<bool> {
        match self {
            StyleTarget::Class(c) => {
                let best = Distribution::from_weights(
                    (0..class_probs.len() as TokenId).collect(),
                    class_probs.to_vec(),
                )?
                .argmax();
                if *c >= class_probs.len() {
                    return Err(Error::UnknownStyle(format!(
                        "class {c} of {}",
                        class_probs.len()
                    )));
                }
                Ok(best == *c)
            }
            StyleTarget::Emotions(idx) => Ok(emoji_aggregate(class_probs, idx)? >= 0.5),
        }
    }
}

/// Sum of the probabilities at `indices`.
pub fn emoji_aggregate(probs: &[f64], indices: &[usize]) -> Result<f64> {
    indices
        .iter()
        .map(|&i| {
            probs
                .get(i)
                .copied()
                .ok_or_else(|| Error::UnknownStyle(format!("emotion index {i} of {}", probs.len())))
        })
        .sum()
}

fn check_tau(tau: f64) -> Result<()> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    Ok(())
}

/// Cosine of each candidate sentence with an already encoded target.
pub fn alignment_scores(
    batch: &CandidateBatch,
    aligner: &DualEncoder,
    target: &ModalityEmbedding,
) -> Result<Vec<f64>> {
    let texts = aligner.encode_texts(&batch.sequences())?;
    Ok(texts
        .iter()
        .map(|t| cosine_similarity(t.vector(), target.vector()))
        .collect())
}

/// Softmax over candidates of the cosine between each candidate sentence and
/// the modality re-encoded under `aligner_cache`.
pub fn alignment_probability(
    batch: &CandidateBatch,
    features: &ModalityEmbedding,
    tau: f64,
    aligner: &DualEncoder,
    aligner_cache: &ContextCache,
) -> Result<ExpertOutput> {
    check_tau(tau)?;
    let encoded = aligner.encode_modality_with(features, aligner_cache)?;
    scored(
        batch,
        alignment_scores(batch, aligner, &encoded)?,
        tau,
        ExpertTag::Alignment,
    )
}

/// [`alignment_probability`] against an audio-space aligner.
pub fn audio_probability(
    batch: &CandidateBatch,
    audio: &ModalityEmbedding,
    tau: f64,
    audio_aligner: &DualEncoder,
    cache: &ContextCache,
) -> Result<ExpertOutput> {
    let mut out = alignment_probability(batch, audio, tau, audio_aligner, cache)?;
    out.tag = ExpertTag::Audio;
    Ok(out)
}

pub fn style_probability(
    batch: &CandidateBatch,
    target: &StyleTarget,
    tau: f64,
    classifier: &StyleClassifier,
) -> Result<ExpertOutput> {
    check_tau(tau)?;
    let probs = classifier.classify_all(&batch.sequences())?;
    let scores = probs
        .iter()
        .map(|p| target.score(p))
        .collect::<Result<Vec<_>>>()?;
    scored(batch, scores, tau, ExpertTag::Style)
}

fn scored(
    batch: &CandidateBatch,
    raw_scores: Vec<f64>,
    tau: f64,
    tag: ExpertTag,
) -> Result<ExpertOutput> {
    let dist = Distribution::from_scores(batch.candidates().to_vec(), &raw_scores, tau)?;
    Ok(ExpertOutput {
        dist,
        raw_scores,
        tag,
    })
}

/// Elementwise product of distributions over one support, renormalized.
pub fn product_of_experts(dists: &[&Distribution]) -> Result<Distribution> {
    let first = dists
        .first()
        .ok_or_else(|| Error::InvalidInput("product of no distributions".into()))?;
    let mut weights = first.probs().to_vec();
    for d in &dists[1..] {
        if !d.same_support(first) {
            return Err(Error::InvalidInput(
                "product over mismatched candidate sets".into(),
            ));
        }
        weights.iter_mut().zip(d.probs()).for_each(|(w, p)| *w *= p);
    }
    Distribution::from_weights(first.candidate_ids().to_vec(), weights).map_err(|e| match e {
        Error::DegenerateSupport(_) => Error::DegenerateSupport(format!(
            "the {} expert distributions share no candidate with positive mass",
            dists.len()
        )),
        other => other,
    })
}

/// Anything that turns a candidate batch into a distribution.
pub trait Expert: Send + Sync {
    fn tag(&self) -> ExpertTag;
    fn score(&self, batch: &CandidateBatch) -> Result<ExpertOutput>;
}

/// Alignment (image or audio) expert with its modality encoded once.
#[derive(Debug, Clone)]
pub struct AlignmentExpert<'a> {
    aligner: &'a DualEncoder,
    features: ModalityEmbedding,
    cache: ContextCache,
    encoded: ModalityEmbedding,
    tau: f64,
    tag: ExpertTag,
}

impl<'a> AlignmentExpert<'a> {
    pub fn new(
        aligner: &'a DualEncoder,
        features: ModalityEmbedding,
        tau: f64,
        tag: ExpertTag,
    ) -> Result<Self> {
        check_tau(tau)?;
        let (encoded, cache) = aligner.encode_modality(&features)?;
        Ok(Self {
            aligner,
            features,
            cache,
            encoded,
            tau,
            tag,
        })
    }

    pub fn aligner(&self) -> &'a DualEncoder {
        self.aligner
    }

    pub fn features(&self) -> &ModalityEmbedding {
        &self.features
    }

    /// First-layer keys and values of the modality tower.
    pub fn cache(&self) -> &ContextCache {
        &self.cache
    }

    pub fn encoded(&self) -> &ModalityEmbedding {
        &self.encoded
    }

    pub fn tau(&self) -> f64 {
        self.tau
    }
}

impl Expert for AlignmentExpert<'_> {
    fn tag(&self) -> ExpertTag {
        self.tag
    }

    fn score(&self, batch: &CandidateBatch) -> Result<ExpertOutput> {
        let scores = alignment_scores(batch, self.aligner, &self.encoded)?;
        scored(batch, scores, self.tau, self.tag)
    }
}

#[derive(Debug, Clone)]
pub struct StyleExpert<'a> {
    classifier: &'a StyleClassifier,
    target: StyleTarget,
    tau: f64,
}

impl<'a> StyleExpert<'a> {
    pub fn new(classifier: &'a StyleClassifier, target: StyleTarget, tau: f64) -> Result<Self> {
        check_tau(tau)?;
        Ok(Self {
            classifier,
            target,
            tau,
        })
    }
}

impl Expert for StyleExpert<'_> {
    fn tag(&self) -> ExpertTag {
        ExpertTag::Style
    }

    fn score(&self, batch: &CandidateBatch) -> Result<ExpertOutput> {
        style_probability(batch, &self.target, self.tau, self.classifier)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn d(p: &[f64]) -> Distribution {
        Distribution::new((0..p.len() as TokenId).collect(), p.to_vec()).unwrap()
    }

    #[test]
    fn product_examples() {
        let p = product_of_experts(&[&d(&[0.6, 0.4]), &d(&[0.5, 0.5])]).unwrap();
        assert!((p.probs()[0] - 0.6).abs() < 1e-12);
        let p = product_of_experts(&[&d(&[0.9, 0.1]), &d(&[0.9, 0.1])]).unwrap();
        assert!((p.probs()[0] - 0.81 / 0.82).abs() < 1e-12);
        assert!((p.probs()[0] - 0.9878).abs() < 1e-3);
        assert!((p.probs()[1] - 0.0122).abs() < 1e-3);
        let p = product_of_experts(&[&d(&[0.0, 1.0, 0.0]), &d(&[0.2, 0.3, 0.5])]).unwrap();
        assert_eq!(p.probs(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn product_errors() {
        assert!(matches!(
            product_of_experts(&[&d(&[1.0, 0.0]), &d(&[0.0, 1.0])]),
            Err(Error::DegenerateSupport(_))
        ));
        assert!(product_of_experts(&[]).is_err());
        let other = Distribution::new(vec![5, 6], vec![0.5, 0.5]).unwrap();
        assert!(matches!(
            product_of_experts(&[&d(&[0.5, 0.5]), &other]),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn batch_validation() {
        assert!(CandidateBatch::new(vec![], vec![], 10).is_err());
        assert!(CandidateBatch::new(vec![], vec![1, 1], 10).is_err());
        assert!(CandidateBatch::new(vec![], vec![10], 10).is_err());
        let b = CandidateBatch::new(vec![4, 5], vec![7, 2], 10).unwrap();
        assert_eq!(b.sequences(), vec![vec![4, 5, 7], vec![4, 5, 2]]);
    }

    #[test]
    fn style_names() {
        assert_eq!(
            StyleTarget::from_name("positive", ClassifierKind::Binary).unwrap(),
            StyleTarget::Class(1)
        );
        assert!(matches!(
            StyleTarget::from_name("sarcastic", ClassifierKind::Binary),
            Err(Error::UnknownStyle(_))
        ));
        let humor = StyleTarget::from_name("humorous", ClassifierKind::Emotion64).unwrap();
        let mut probs = vec![0.4 / 62.0; 64];
        probs[0] = 0.35;
        probs[53] = 0.25;
        assert!((humor.score(&probs).unwrap() - 0.6).abs() < 1e-12);
        assert!(humor.matches(&probs).unwrap());
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.01f64..1.0, n).prop_map(|w| {
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn product_of_identical_keeps_argmax(p in (2usize..10).prop_flat_map(simplex), m in 1usize..5) {
            let p = d(&p);
            let refs: Vec<&Distribution> = (0..m).map(|_| &p).collect();
            let prod = product_of_experts(&refs).unwrap();
            prop_assert_eq!(p.probs()[prod.argmax()], p.probs()[p.argmax()]);
        }

        #[test]
        fn product_zero_is_absorbing((a, b, z) in (2usize..10).prop_flat_map(|n| (simplex(n), simplex(n), 0..n))) {
            let mut a = a;
            a[z] = 0.0;
            let s: f64 = a.iter().sum();
            a.iter_mut().for_each(|x| *x /= s);
            let prod = product_of_experts(&[&d(&a), &d(&b)]).unwrap();
            prop_assert_eq!(prod.probs()[z], 0.0);
        }
    }
}
