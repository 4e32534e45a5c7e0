use serde::{Deserialize, Serialize};

use crate::data::ItemRecord;
use crate::encoder::{eos_attention, EncoderModel};
use crate::error::{Error, Result};
use crate::peft::PeftAttachment;

/// Jensen–Shannon divergence in bits.
pub fn jsd(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Alignment(format!(
            "distributions over {} and {} tokens",
            p.len(),
            q.len()
        )));
    }
    let kl = |a: &[f64], m: &[f64]| -> f64 {
        a.iter()
            .zip(m)
            .filter(|(x, _)| **x > 0.0)
            .map(|(x, y)| x * (x / y).log2())
            .sum()
    };
    let m: Vec<f64> = p.iter().zip(q).map(|(a, b)| 0.5 * (a + b)).collect();
    Ok((0.5 * kl(p, &m) + 0.5 * kl(q, &m)).max(0.0))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PerItemJsd {
    pub item_id: u64,
    pub intra: f64,
    pub inter: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JsdReport {
    pub per_item: Vec<PerItemJsd>,
    /// Mean JSD between seeds within a group.
    pub intra_mean: f64,
    /// Mean JSD between groups within a seed.
    pub inter_mean: f64,
}

/// Compares EOS attention rows of `modules[seed][group]` over `items`.
pub fn attention_analysis(
    encoder: &EncoderModel,
    modules: &[Vec<&PeftAttachment>],
    items: &[ItemRecord],
) -> Result<JsdReport> {
    let seeds = modules.len();
    let groups = modules.first().map_or(0, Vec::len);
    if seeds < 2 || groups < 2 || modules.iter().any(|m| m.len() != groups) {
        return Err(Error::Config(format!(
            "need at least 2 seeds and 2 groups per seed, got {seeds} seeds of {groups} groups"
        )));
    }
    let mut per_item = Vec::with_capacity(items.len());
    for item in items {
        let dist = modules
            .iter()
            .map(|row| {
                row.iter()
                    .map(|m| Ok(eos_attention(&encoder.encode(Some(m), item)?.2)))
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        let (mut intra, mut n_intra) = (0.0, 0usize);
        for c in 0..groups {
            for a in 0..seeds {
                for b in a + 1..seeds {
                    intra += jsd(&dist[a][c], &dist[b][c])?;
                    n_intra += 1;
                }
            }
        }
        let (mut inter, mut n_inter) = (0.0, 0usize);
        for row in &dist {
            for a in 0..groups {
                for b in a + 1..groups {
                    inter += jsd(&row[a], &row[b])?;
                    n_inter += 1;
                }
            }
        }
        per_item.push(PerItemJsd {
            item_id: item.item_id,
            intra: intra / n_intra as f64,
            inter: inter / n_inter as f64,
        });
    }
    let n = per_item.len().max(1) as f64;
    Ok(JsdReport {
        intra_mean: per_item.iter().map(|r| r.intra).sum::<f64>() / n,
        inter_mean: per_item.iter().map(|r| r.inter).sum::<f64>() / n,
        per_item,
    })
}
