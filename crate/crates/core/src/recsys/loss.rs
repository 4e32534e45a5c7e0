use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use perpeft_autodiff::{log_sigmoid_scalar, Graph, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Form of the negative-sampling objective.
///
/// `Literal` is `Σ log σ(neg) − Σ log σ(pos)`; `StandardBce` is
/// `Σ −log σ(pos) − log(1 − σ(neg))`. Both push positive scores up and
/// negative scores down, but only the standard form is bounded below.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossMode {
    Literal,
    #[default]
    StandardBce,
}

impl LossMode {
    pub fn as_str(self) -> &'static str {
        match self {
            LossMode::Literal => "literal",
            LossMode::StandardBce => "standard_bce",
        }
    }
}

impl fmt::Display for LossMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for LossMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "literal" => Ok(LossMode::Literal),
            "standard_bce" | "bce" => Ok(LossMode::StandardBce),
            other => Err(Error::Config(format!("unknown loss mode '{other}'"))),
        }
    }
}

/// Summed objective over rows of `pred` (`[n, d]`) against positive and
/// negative item embeddings of the same shape.
pub fn bce_loss(g: &mut Graph, pred: Var, pos: Var, neg: Var, mode: LossMode) -> Result<Var> {
    let pp = g.mul(pred, pos)?;
    let pos_score = g.row_sum(pp);
    let pn = g.mul(pred, neg)?;
    let neg_score = g.row_sum(pn);
    let lp = g.log_sigmoid(pos_score);
    let per_step = match mode {
        LossMode::Literal => {
            let ln = g.log_sigmoid(neg_score);
            let neg_lp = g.scale(lp, -1.0);
            g.add(ln, neg_lp)?
        }
        LossMode::StandardBce => {
            let flipped = g.scale(neg_score, -1.0);
            let ln = g.log_sigmoid(flipped);
            let both = g.add(lp, ln)?;
            g.scale(both, -1.0)
        }
    };
    Ok(g.sum(per_step))
}

/// Per-step loss from precomputed scores.
pub fn loss_value(pos_scores: &[f64], neg_scores: &[f64], mode: LossMode) -> f64 {
    pos_scores
        .iter()
        .zip(neg_scores)
        .map(|(&p, &n)| match mode {
            LossMode::Literal => log_sigmoid_scalar(n) - log_sigmoid_scalar(p),
            LossMode::StandardBce => -log_sigmoid_scalar(p) - log_sigmoid_scalar(-n),
        })
        .sum()
}

fn matrix(rows: &[Vec<f64>]) -> Result<Tensor> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Contract("ragged embedding list".into()));
    }
    Ok(Tensor::new(vec![rows.len(), cols], rows.concat())?)
}

/// Sequence loss for one user: `z_pos[p]` is the next item after step `p`,
/// `z_neg[p]` its sampled negative and `z_pred[p]` the backbone output.
pub fn loss_global(
    z_pos: &[Vec<f64>],
    z_neg: &[Vec<f64>],
    z_pred: &[Vec<f64>],
    mode: LossMode,
) -> Result<f64> {
    if z_pos.len() != z_neg.len() || z_pos.len() != z_pred.len() {
        return Err(Error::Contract(format!(
            "list lengths differ: {} positives, {} negatives, {} predictions",
            z_pos.len(),
            z_neg.len(),
            z_pred.len()
        )));
    }
    if z_pos.is_empty() {
        return Ok(0.0);
    }
    let mut g = Graph::new();
    let pos = g.constant(matrix(z_pos)?);
    let neg = g.constant(matrix(z_neg)?);
    let pred = g.constant(matrix(z_pred)?);
    let l = bce_loss(&mut g, pred, pos, neg, mode)?;
    Ok(g.value(l).item())
}

/// [`loss_global`] with embeddings from one group's components and
/// negatives that must come from that group's item pool.
pub fn loss_personalized(
    z_pos: &[Vec<f64>],
    z_neg: &[Vec<f64>],
    z_pred: &[Vec<f64>],
    negative_items: &[usize],
    pool: &BTreeSet<usize>,
    mode: LossMode,
) -> Result<f64> {
    if let Some(bad) = negative_items.iter().find(|i| !pool.contains(i)) {
        return Err(Error::Sampling(format!(
            "negative item {bad} lies outside the group pool"
        )));
    }
    loss_global(z_pos, z_neg, z_pred, mode)
}
