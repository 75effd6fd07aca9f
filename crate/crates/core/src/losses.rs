//! Training objectives: the in-batch margin contrastive loss, cross-entropy,
//! and their weighted total.

use ndiff::{Graph, NodeId, Tensor};
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Weights of the three objectives and the contrastive margin.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    /// Margin ξ on squared distances; `None` means `2·d` for features of length `d`.
    pub xi: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 1.0,
            alpha2: 3.0,
            alpha3: 1.0,
            xi: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, a) in [("alpha1", self.alpha1), ("alpha2", self.alpha2), ("alpha3", self.alpha3)] {
            if !a.is_finite() || a < 0.0 {
                return Err(Error::Config(format!("{name} must be finite and non-negative")));
            }
        }
        if let Some(xi) = self.xi {
            if !(xi.is_finite() && xi > 0.0) {
                return Err(Error::Config("xi must be positive".into()));
            }
        }
        Ok(())
    }

    pub fn margin_for(&self, dim: usize) -> f64 {
        self.xi.unwrap_or(2.0 * dim as f64)
    }
}

/// Margin contrastive loss over a batch of representation nodes.
///
/// Same-class pairs are pulled together by their squared distance and
/// different-class pairs pushed apart by `(ξ − ||h_i − h_n||²)_+`, each
/// averaged over the partner set of `i` and normalized by `m·d`. An empty
/// partner set contributes nothing.
pub fn margin_loss(g: &mut Graph, hs: &[NodeId], labels: &[usize], xi: f64) -> Result<NodeId> {
    let m = hs.len();
    if m < 2 {
        return Err(Error::Invalid(format!("margin loss needs at least 2 examples, got {m}")));
    }
    if labels.len() != m {
        return Err(Error::DimMismatch {
            expected: m,
            got: labels.len(),
        });
    }
    let d = g.value(hs[0]).len();

    let mut dist = vec![vec![None; m]; m];
    for i in 0..m {
        for j in i + 1..m {
            let dij = g.sq_l2_distance(hs[i], hs[j])?;
            dist[i][j] = Some(dij);
            dist[j][i] = Some(dij);
        }
    }

    let mut terms = Vec::new();
    for i in 0..m {
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for j in (0..m).filter(|&j| j != i) {
            let dij = dist[i][j].expect("filled for j != i");
            if labels[j] == labels[i] {
                pos.push(dij);
            } else {
                let pushed = g.scale(dij, -1.0)?;
                let gap = g.shift(pushed, xi)?;
                neg.push(g.relu(gap)?);
            }
        }
        for group in [pos, neg] {
            if group.is_empty() {
                continue;
            }
            let n = group.len() as f64;
            let s = g.add_many(&group)?;
            terms.push(g.scale(s, 1.0 / n)?);
        }
    }
    if terms.is_empty() {
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let total = g.add_many(&terms)?;
    Ok(g.scale(total, 1.0 / (m * d) as f64)?)
}

/// Value-level margin loss.
pub fn margin_loss_value(hs: &[Vec<f64>], labels: &[usize], xi: f64) -> Result<f64> {
    let mut g = Graph::new();
    let nodes: Vec<NodeId> = hs.iter().map(|h| g.constant(Tensor::vector(h.clone()))).collect();
    if let Some(h) = hs.iter().find(|h| h.len() != hs[0].len()) {
        return Err(Error::DimMismatch {
            expected: hs[0].len(),
            got: h.len(),
        });
    }
    let loss = margin_loss(&mut g, &nodes, labels, xi)?;
    Ok(g.scalar(loss)?)
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(g: &mut Graph, logits: NodeId, target: usize) -> Result<NodeId> {
    Ok(g.cross_entropy(logits, target)?)
}

pub fn cross_entropy_value(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::Invalid(format!("target {target} >= {} logits", logits.len())));
    }
    Ok(ndiff::log_sum_exp(logits) - logits[target])
}

/// `α1·L_ID + α2·L_margin + α3·L_SSL` on the graph. Missing terms or terms
/// whose weight is zero are left out.
pub fn total_loss(
    g: &mut Graph,
    l_id: NodeId,
    l_margin: Option<NodeId>,
    l_ssl: Option<NodeId>,
    w: &LossWeights,
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(3);
    for (node, alpha) in [(Some(l_id), w.alpha1), (l_margin, w.alpha2), (l_ssl, w.alpha3)] {
        if let Some(n) = node.filter(|_| alpha != 0.0) {
            parts.push(g.scale(n, alpha)?);
        }
    }
    match parts.len() {
        0 => Ok(g.constant(Tensor::scalar(0.0))),
        1 => Ok(parts[0]),
        _ => Ok(g.add_many(&parts)?),
    }
}

pub fn total_loss_value(l_id: f64, l_margin: f64, l_ssl: f64, w: &LossWeights) -> f64 {
    w.alpha1 * l_id + w.alpha2 * l_margin + w.alpha3 * l_ssl
}
