//! Threshold-free OOD metrics. Scores are oriented so that higher means
//! more likely out-of-distribution.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Below this many ID scores the 95th percentile is considered unstable.
pub const MIN_STABLE_ID: usize = 20;

/// Scores of known in-distribution and known OOD instances.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoreSample {
    id_scores: Vec<f64>,
    ood_scores: Vec<f64>,
}

impl ScoreSample {
    pub fn new(id_scores: Vec<f64>, ood_scores: Vec<f64>) -> Result<Self> {
        if id_scores.is_empty() {
            return Err(Error::EmptyScores("id"));
        }
        if ood_scores.is_empty() {
            return Err(Error::EmptyScores("ood"));
        }
        if id_scores.iter().chain(&ood_scores).any(|s| !s.is_finite()) {
            return Err(Error::NonFinite("OOD score".into()));
        }
        Ok(Self {
            id_scores,
            ood_scores,
        })
    }

    pub fn id_scores(&self) -> &[f64] {
        &self.id_scores
    }

    pub fn ood_scores(&self) -> &[f64] {
        &self.ood_scores
    }
}

/// Probability that a random OOD score exceeds a random ID score, ties
/// counting one half. Computed from tie groups after one sort.
pub fn auroc(sample: &ScoreSample) -> f64 {
    let mut all: Vec<(f64, bool)> = sample
        .id_scores
        .iter()
        .map(|&s| (s, false))
        .chain(sample.ood_scores.iter().map(|&s| (s, true)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));

    // twice the Mann-Whitney U statistic, kept integral so the result is exact
    let mut twice_u: u128 = 0;
    let mut id_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut g_id, mut g_ood) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                g_ood += 1;
            } else {
                g_id += 1;
            }
            j += 1;
        }
        twice_u += g_ood * (2 * id_below + g_id);
        id_below += g_id;
        i = j;
    }
    let pairs = 2 * sample.id_scores.len() as u128 * sample.ood_scores.len() as u128;
    twice_u as f64 / pairs as f64
}

/// FAR at 95% ID acceptance.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Far95 {
    pub value: f64,
    /// Acceptance threshold: the nearest-rank 95th percentile of ID scores.
    pub threshold: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub warning: Option<String>,
}

/// Fraction of OOD scores at or below the nearest-rank 95th percentile of
/// the ID scores, i.e. OOD instances accepted as ID when 95% of ID passes.
pub fn far95(sample: &ScoreSample) -> Far95 {
    let mut id = sample.id_scores.clone();
    id.sort_by(f64::total_cmp);
    let n = id.len();
    let rank = (95 * n).div_ceil(100).max(1);
    let threshold = id[rank - 1];
    let accepted = sample.ood_scores.iter().filter(|&&s| s <= threshold).count();
    let warning = (n < MIN_STABLE_ID).then(|| format!("unstable percentile: only {n} ID scores"));
    if let Some(w) = &warning {
        log::warn!("{w}");
    }
    Far95 {
        value: accepted as f64 / sample.ood_scores.len() as f64,
        threshold,
        warning,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(id: &[f64], ood: &[f64]) -> ScoreSample {
        ScoreSample::new(id.to_vec(), ood.to_vec()).unwrap()
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&sample(&[0.0, 1.0], &[2.0, 3.0])), 1.0);
        assert_eq!(auroc(&sample(&[1.0, 2.0, 2.0], &[2.0, 1.0, 2.0])), 0.5);
        assert_eq!(auroc(&sample(&[1.0, 3.0], &[2.0, 4.0])), 0.75);
    }

    #[test]
    fn far95_examples() {
        let id: Vec<f64> = (1..=100).map(f64::from).collect();
        let r = far95(&sample(&id, &[200.0; 5]));
        assert_eq!((r.threshold, r.value), (95.0, 0.0));
        assert!(r.warning.is_none());
        assert_eq!(far95(&sample(&id, &[0.0; 5])).value, 1.0);
        assert_eq!(far95(&sample(&id, &[50.0, 96.0, 200.0])).value, 1.0 / 3.0);
    }

    #[test]
    fn far95_warns_on_small_id_sets() {
        let r = far95(&sample(&[1.0, 2.0, 3.0], &[2.5]));
        assert!(r.warning.unwrap().contains("unstable percentile"));
        assert_eq!(r.threshold, 3.0);
        assert_eq!(r.value, 1.0);
    }

    #[test]
    fn empty_or_non_finite_samples_are_rejected() {
        assert!(ScoreSample::new(vec![], vec![1.0]).is_err());
        assert!(ScoreSample::new(vec![1.0], vec![]).is_err());
        assert!(ScoreSample::new(vec![f64::NAN], vec![1.0]).is_err());
    }
}
