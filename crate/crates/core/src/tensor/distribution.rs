use std::collections::HashSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Floor applied inside `log` so cross-entropy stays finite.
pub const LOG_CLAMP: f64 = 1e-12;

const SUM_TOLERANCE: f64 = 1e-6;

/// A probability vector over an ordered set of candidate tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Distribution {
    candidate_ids: Vec<TokenId>,
    probs: Vec<f64>,
}

impl Distribution {
    pub fn new(candidate_ids: Vec<TokenId>, probs: Vec<f64>) -> Result<Self> {
        if candidate_ids.is_empty() {
            return Err(Error::InvalidInput(
                "distribution needs at least one candidate".into(),
            ));
        }
        if candidate_ids.len() != probs.len() {
            return Err(Error::InvalidInput(format!(
                "{} candidate ids but {} probabilities",
                candidate_ids.len(),
                probs.len()
            )));
        }
        let mut seen = HashSet::with_capacity(candidate_ids.len());
        if let Some(dup) = candidate_ids.iter().find(|id| !seen.insert(**id)) {
            return Err(Error::InvalidInput(format!("duplicate candidate id {dup}")));
        }
        if let Some(p) = probs.iter().find(|p| !p.is_finite() || **p < 0.0) {
            return Err(Error::InvalidInput(format!("invalid probability {p}")));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SUM_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self {
            candidate_ids,
            probs,
        })
    }

    /// Normalizes non-negative weights into a distribution.
    pub fn from_weights(candidate_ids: Vec<TokenId>, weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            return Err(Error::DegenerateSupport(format!(
                "weights over {} candidates have total mass {total}",
                candidate_ids.len()
            )));
        }
        let probs = weights.iter().map(|w| w / total).collect();
        Self::new(candidate_ids, probs)
    }

    pub fn uniform(candidate_ids: Vec<TokenId>) -> Result<Self> {
        let n = candidate_ids.len().max(1);
        Self::new(candidate_ids, vec![1.0 / n as f64; n])
    }

    /// `softmax(scores / tau)` over the given candidates.
    pub fn from_scores(candidate_ids: Vec<TokenId>, scores: &[f64], tau: f64) -> Result<Self> {
        let probs = softmax_probs(scores, tau)?;
        Self::new(candidate_ids, probs)
    }

    pub fn candidate_ids(&self) -> &[TokenId] {
        &self.candidate_ids
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    pub fn prob_of(&self, id: TokenId) -> Option<f64> {
        self.candidate_ids
            .iter()
            .position(|&c| c == id)
            .map(|i| self.probs[i])
    }

    /// Position of the most probable candidate; earlier positions win ties.
    pub fn argmax(&self) -> usize {
        argmax(&self.probs)
    }

    pub fn argmax_id(&self) -> TokenId {
        self.candidate_ids[self.argmax()]
    }

    /// Top `n` `(id, prob)` pairs by probability, ties by lower token id.
    pub fn top_n(&self, n: usize) -> Vec<(TokenId, f64)> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&a, &b| {
            self.probs[b]
                .total_cmp(&self.probs[a])
                .then(self.candidate_ids[a].cmp(&self.candidate_ids[b]))
        });
        idx.into_iter()
            .take(n)
            .map(|i| (self.candidate_ids[i], self.probs[i]))
            .collect()
    }

    pub fn same_support(&self, other: &Distribution) -> bool {
        self.candidate_ids == other.candidate_ids
    }

    pub fn entropy(&self) -> f64 {
        -self
            .probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|p| p * p.max(LOG_CLAMP).ln())
            .sum::<f64>()
    }
}

pub(crate) fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_probs(scores: &[f64], tau: f64) -> Result<Vec<f64>> {
    if !(tau > 0.0) || !tau.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "temperature must be positive, got {tau}"
        )));
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput(
            "softmax over an empty score vector".into(),
        ));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {s}")));
    }
    let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scores.iter().map(|s| ((s - max) / tau).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / total).collect())
}

/// Softmax with temperature over `scores`; candidate ids are the score positions.
pub fn softmax_with_temperature(scores: &[f64], tau: f64) -> Result<Distribution> {
    let ids = (0..scores.len() as TokenId).collect();
    Distribution::from_scores(ids, scores, tau)
}

/// `-sum_i target_i * ln(max(pred_i, LOG_CLAMP))`; the first argument is the
/// distribution being optimized, the second the target it is pulled toward.
pub fn cross_entropy(pred: &Distribution, target: &Distribution) -> Result<f64> {
    if !pred.same_support(target) {
        return Err(Error::InvalidInput(
            "cross-entropy over mismatched candidate sets".into(),
        ));
    }
    Ok(cross_entropy_raw(&pred.probs, &target.probs))
}

pub(crate) fn cross_entropy_raw(pred: &[f64], target: &[f64]) -> f64 {
    -pred
        .iter()
        .zip(target)
        .filter(|(_, &t)| t != 0.0)
        .map(|(p, t)| t * p.max(LOG_CLAMP).ln())
        .sum::<f64>()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn dist(p: &[f64]) -> Distribution {
        Distribution::new((0..p.len() as TokenId).collect(), p.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        let d = softmax_with_temperature(&[1.0, 1.0], 1.0).unwrap();
        assert_eq!(d.probs(), &[0.5, 0.5]);

        let d = softmax_with_temperature(&[2.0, 1.0], 0.5).unwrap();
        let expected = 1.0 / (1.0 + (-2.0f64).exp());
        assert!((d.probs()[0] - 0.8808).abs() < 1e-3);
        assert!((d.probs()[0] - expected).abs() < 1e-12);
        assert!((d.probs()[1] - 0.1192).abs() < 1e-3);

        let d = softmax_with_temperature(&[5.0, 5.0, 5.0], 0.001).unwrap();
        for p in d.probs() {
            assert!((p - 1.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_errors() {
        assert!(matches!(
            softmax_with_temperature(&[1.0], 0.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[1.0], -1.0),
            Err(Error::InvalidParameter(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[1.0, f64::NAN], 1.0),
            Err(Error::InvalidInput(_))
        ));
        assert!(matches!(
            softmax_with_temperature(&[f64::INFINITY], 1.0),
            Err(Error::InvalidInput(_))
        ));
    }

    #[test]
    fn cross_entropy_examples() {
        let ce = cross_entropy(&dist(&[0.5, 0.5]), &dist(&[1.0, 0.0])).unwrap();
        assert!((ce - 2f64.ln()).abs() < 1e-12);

        assert_eq!(
            cross_entropy(&dist(&[1.0, 0.0]), &dist(&[1.0, 0.0])).unwrap(),
            0.0
        );

        let t = dist(&[0.25, 0.75]);
        let ce = cross_entropy(&t, &t).unwrap();
        let h = -0.25 * 0.25f64.ln() - 0.75 * 0.75f64.ln();
        assert!((ce - h).abs() < 1e-12);
        assert!((ce - 0.5623).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_clamps_zero_prediction() {
        let ce = cross_entropy(&dist(&[0.0, 1.0]), &dist(&[1.0, 0.0])).unwrap();
        assert!((ce + LOG_CLAMP.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_mismatched_support() {
        let a = Distribution::new(vec![1, 2], vec![0.5, 0.5]).unwrap();
        let b = Distribution::new(vec![2, 1], vec![0.5, 0.5]).unwrap();
        assert!(matches!(cross_entropy(&a, &b), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn constructor_validates() {
        assert!(Distribution::new(vec![0, 0], vec![0.5, 0.5]).is_err());
        assert!(Distribution::new(vec![0, 1], vec![0.5, 0.6]).is_err());
        assert!(Distribution::new(vec![0, 1], vec![1.5, -0.5]).is_err());
        assert!(Distribution::new(vec![0], vec![0.5, 0.5]).is_err());
        assert!(matches!(
            Distribution::from_weights(vec![0, 1], vec![0.0, 0.0]),
            Err(Error::DegenerateSupport(_))
        ));
    }

    #[test]
    fn top_n_breaks_ties_by_id() {
        let d = Distribution::new(vec![9, 3, 5], vec![0.4, 0.4, 0.2]).unwrap();
        assert_eq!(d.top_n(2), vec![(3, 0.4), (9, 0.4)]);
    }

    fn scores_strategy() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(-20.0f64..20.0, 1..24)
    }

    fn simplex(n: usize) -> impl Strategy<Value = Vec<f64>> {
        prop::collection::vec(0.0f64..1.0, n).prop_map(|w| {
            let w: Vec<f64> = w.into_iter().map(|x| x + 1e-3).collect();
            let s: f64 = w.iter().sum();
            w.into_iter().map(|x| x / s).collect()
        })
    }

    proptest! {
        #[test]
        fn softmax_is_a_distribution(scores in scores_strategy(), tau in 1e-3f64..10.0) {
            let d = softmax_with_temperature(&scores, tau).unwrap();
            let sum: f64 = d.probs().iter().sum();
            prop_assert!((sum - 1.0).abs() <= 1e-6);
            prop_assert!(d.probs().iter().all(|&p| p >= 0.0));
        }

        #[test]
        fn temperature_preserves_argmax(scores in scores_strategy(), tau in 1e-3f64..10.0) {
            let d = softmax_with_temperature(&scores, tau).unwrap();
            let best = argmax(&scores);
            // exp underflow can tie the top entries at very low tau; require the
            // argmax of the distribution to carry the maximal score
            prop_assert_eq!(scores[d.argmax()], scores[best]);
        }

        #[test]
        fn gibbs_inequality((p, t) in (2usize..12).prop_flat_map(|n| (simplex(n), simplex(n)))) {
            let p = dist(&p);
            let t = dist(&t);
            let ce = cross_entropy(&p, &t).unwrap();
            let h = cross_entropy(&t, &t).unwrap();
            prop_assert!(ce >= h - 1e-9);
        }
    }
}
