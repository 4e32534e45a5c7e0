use std::cmp::Ordering;
use std::collections::BTreeMap;

use perpeft_autodiff::Tensor;
use serde::{Deserialize, Serialize};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numeric order with `-0.0 == 0.0`; NaN falls back to the total order.
fn cmp_score(a: f64, b: f64) -> Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

/// Descending score, then ascending item index.
fn ranking_order(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    cmp_score(b.1, a.1).then(a.0.cmp(&b.0))
}

/// Scores `u·z_j` for every item not excluded, best first.
pub fn score_all(u: &[f64], items: &Tensor, excluded: &[bool]) -> Vec<(usize, f64)> {
    let mut scored: Vec<(usize, f64)> = (0..items.rows())
        .filter(|&j| !excluded.get(j).copied().unwrap_or(false))
        .map(|j| (j, dot(u, items.row(j))))
        .collect();
    scored.sort_by(ranking_order);
    scored
}

/// First `k` entries of [`score_all`] without sorting the whole catalogue.
pub fn top_k(u: &[f64], items: &Tensor, excluded: &[bool], k: usize) -> Vec<usize> {
    let mut scored: Vec<(usize, f64)> = (0..items.rows())
        .filter(|&j| !excluded.get(j).copied().unwrap_or(false))
        .map(|j| (j, dot(u, items.row(j))))
        .collect();
    if k < scored.len() {
        scored.select_nth_unstable_by(k, ranking_order);
        scored.truncate(k);
    }
    scored.sort_by(ranking_order);
    scored.into_iter().map(|(j, _)| j).collect()
}

/// 1-based position of `target` in the [`score_all`] order. The target
/// itself is never excluded.
pub fn rank_of(target: usize, u: &[f64], items: &Tensor, excluded: &[bool]) -> usize {
    let st = dot(u, items.row(target));
    let ahead = (0..items.rows())
        .filter(|&j| j != target && !excluded.get(j).copied().unwrap_or(false))
        .filter(|&j| {
            let s = dot(u, items.row(j));
            match cmp_score(s, st) {
                Ordering::Greater => true,
                Ordering::Equal => j < target,
                Ordering::Less => false,
            }
        })
        .count();
    ahead + 1
}

/// DCG contribution of a single relevant item at `rank`, cut at `k`.
pub fn ndcg_gain(rank: usize, k: usize) -> f64 {
    if rank <= k {
        1.0 / ((rank + 1) as f64).log2()
    } else {
        0.0
    }
}

/// Hit-Ratio@K and NDCG@K over users, with the underlying ranks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub hit: BTreeMap<usize, f64>,
    pub ndcg: BTreeMap<usize, f64>,
    pub n_users: usize,
    #[serde(skip)]
    pub ranks: Vec<usize>,
}

impl Metrics {
    pub fn from_ranks(ranks: Vec<usize>, ks: &[usize]) -> Self {
        let n = ranks.len();
        let mut hit = BTreeMap::new();
        let mut ndcg = BTreeMap::new();
        for &k in ks {
            let (h, g) = ranks.iter().fold((0.0, 0.0), |(h, g), &r| {
                (h + if r <= k { 1.0 } else { 0.0 }, g + ndcg_gain(r, k))
            });
            let denom = n.max(1) as f64;
            hit.insert(k, h / denom);
            ndcg.insert(k, g / denom);
        }
        Self {
            hit,
            ndcg,
            n_users: n,
            ranks,
        }
    }

    pub fn hit_at(&self, k: usize) -> f64 {
        self.hit.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn ndcg_at(&self, k: usize) -> f64 {
        self.ndcg.get(&k).copied().unwrap_or(f64::NAN)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("metrics serialize")
    }
}
