//! Planted-group data: each user belongs to one hidden group and mostly
//! buys that group's items, following a group-specific notion of which item
//! comes next.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ItemRecord, UserRecord};
use crate::encoder::{EncoderConfig, PAD_ID};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_users: usize,
    pub n_items: usize,
    pub n_groups: usize,
    /// Aspect tokens reserved for each planted group.
    pub aspect_tokens: usize,
    /// Values of each of the two item attributes.
    pub attribute_values: usize,
    pub min_len: usize,
    pub max_len: usize,
    /// Probability that a purchase comes from another group's items.
    pub noise: f64,
    /// Probability that an in-group purchase matches the group's attribute
    /// of the previous in-group purchase.
    pub follow: f64,
    /// Filler tokens per title besides the aspect and attribute tokens.
    pub fillers: usize,
    pub patch_noise: f64,
    pub seed: u64,
    pub vocab_size: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self::for_encoder(&EncoderConfig::desk())
    }
}

impl SyntheticSpec {
    pub fn for_encoder(c: &EncoderConfig) -> Self {
        Self {
            n_users: 400,
            n_items: 200,
            n_groups: 2,
            aspect_tokens: 3,
            attribute_values: 5,
            min_len: 5,
            max_len: 14,
            noise: 0.1,
            follow: 0.8,
            fillers: 2,
            patch_noise: 0.3,
            seed: 0,
            vocab_size: c.vocab_size,
            n_patches: c.n_patches,
            patch_dim: c.patch_dim,
        }
    }

    fn first_attribute_token(&self) -> usize {
        1 + self.n_groups * self.aspect_tokens
    }

    fn first_filler(&self) -> usize {
        self.first_attribute_token() + 2 * self.attribute_values
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_groups == 0 || self.n_items < self.n_groups {
            return bad(format!(
                "{} items cannot cover {} groups",
                self.n_items, self.n_groups
            ));
        }
        if self.n_users == 0 || self.aspect_tokens == 0 || self.attribute_values == 0 {
            return bad("users, aspect tokens and attribute values must be positive".into());
        }
        if self.min_len < 3 || self.max_len < self.min_len {
            return bad(format!(
                "sequence lengths {}..={} must start at 3",
                self.min_len, self.max_len
            ));
        }
        if !(0.0..=1.0).contains(&self.noise) || !(0.0..=1.0).contains(&self.follow) {
            return bad("noise and follow must be probabilities".into());
        }
        if self.noise > 0.0 && self.n_groups < 2 {
            return bad("cross-group noise needs at least two groups".into());
        }
        // pad, EOS and at least one filler
        if self.first_filler() + 2 > self.vocab_size {
            return bad(format!(
                "vocabulary of {} too small for the planted tokens",
                self.vocab_size
            ));
        }
        if self.n_patches == 0 || self.patch_dim == 0 {
            return bad("patch shape must be positive".into());
        }
        Ok(())
    }
}

/// Generated records plus the planted structure behind them.
#[derive(Clone, Debug)]
pub struct SyntheticData {
    pub dataset: Dataset,
    /// Planted group of each user, in dataset order.
    pub user_groups: Vec<usize>,
    /// Home group of each item, by dense index.
    pub item_groups: Vec<usize>,
    /// Aspect token of each item.
    pub aspect: Vec<usize>,
    /// `(first, second)` attribute values of each item.
    pub attributes: Vec<(usize, usize)>,
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<SyntheticData> {
    spec.validate()?;
    let mut rng = seed::rng(spec.seed, "synthetic");
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let proto = |rng: &mut rand_chacha::ChaCha8Rng, n: usize| -> Vec<Vec<Vec<f64>>> {
        (0..n)
            .map(|_| {
                (0..spec.n_patches)
                    .map(|_| (0..spec.patch_dim).map(|_| std.sample(rng)).collect())
                    .collect()
            })
            .collect()
    };
    let group_proto = proto(&mut rng, spec.n_groups);
    let first_proto = proto(&mut rng, spec.attribute_values);
    let second_proto = proto(&mut rng, spec.attribute_values);
    let noise =
        Normal::new(0.0, spec.patch_noise.max(0.0)).map_err(|e| Error::Config(e.to_string()))?;

    let attr_tok = spec.first_attribute_token();
    let filler_tok = spec.first_filler();
    let eos = spec.vocab_size - 1;
    let mut items = Vec::with_capacity(spec.n_items);
    let mut item_groups = Vec::with_capacity(spec.n_items);
    let mut aspect = Vec::with_capacity(spec.n_items);
    let mut attributes = Vec::with_capacity(spec.n_items);
    for i in 0..spec.n_items {
        let g = i % spec.n_groups;
        let a = 1 + g * spec.aspect_tokens + rng.random_range(0..spec.aspect_tokens);
        let (f, s) = (
            rng.random_range(0..spec.attribute_values),
            rng.random_range(0..spec.attribute_values),
        );
        let mut tokens = vec![a, attr_tok + f, attr_tok + spec.attribute_values + s];
        tokens.extend((0..spec.fillers).map(|_| rng.random_range(filler_tok..eos)));
        tokens.shuffle(&mut rng);
        debug_assert!(tokens.iter().all(|&t| t != PAD_ID && t != eos));
        let patches = (0..spec.n_patches)
            .map(|p| {
                (0..spec.patch_dim)
                    .map(|d| {
                        group_proto[g][p][d]
                            + first_proto[f][p][d]
                            + second_proto[s][p][d]
                            + noise.sample(&mut rng)
                    })
                    .collect()
            })
            .collect();
        items.push(ItemRecord {
            item_id: i as u64 + 1,
            text_tokens: tokens,
            patches,
        });
        item_groups.push(g);
        aspect.push(a);
        attributes.push((f, s));
    }

    let members: Vec<Vec<usize>> = (0..spec.n_groups)
        .map(|g| (0..spec.n_items).filter(|&i| item_groups[i] == g).collect())
        .collect();
    let outsiders: Vec<Vec<usize>> = (0..spec.n_groups)
        .map(|g| (0..spec.n_items).filter(|&i| item_groups[i] != g).collect())
        .collect();
    let mut users = Vec::with_capacity(spec.n_users);
    let mut user_groups = Vec::with_capacity(spec.n_users);
    for u in 0..spec.n_users {
        let g = u % spec.n_groups;
        let len = rng.random_range(spec.min_len..=spec.max_len);
        let key = |i: usize| {
            if g.is_multiple_of(2) {
                attributes[i].0
            } else {
                attributes[i].1
            }
        };
        let mut seq: Vec<usize> = Vec::with_capacity(len);
        let mut last_in: Option<usize> = None;
        while seq.len() < len {
            let next = if !outsiders[g].is_empty() && rng.random_bool(spec.noise) {
                *outsiders[g].choose(&mut rng).expect("non-empty")
            } else {
                let pick = match last_in {
                    Some(prev) if rng.random_bool(spec.follow) => {
                        let same: Vec<usize> = members[g]
                            .iter()
                            .copied()
                            .filter(|&i| i != prev && key(i) == key(prev))
                            .collect();
                        same.choose(&mut rng).copied()
                    }
                    _ => None,
                };
                let i = pick.unwrap_or_else(|| *members[g].choose(&mut rng).expect("non-empty"));
                last_in = Some(i);
                i
            };
            seq.push(next);
        }
        users.push(UserRecord {
            user_id: u as u64 + 1,
            item_seq: seq.iter().map(|&i| items[i].item_id).collect(),
        });
        user_groups.push(g);
    }
    let dataset = Dataset::new(items, users)?;
    Ok(SyntheticData {
        dataset,
        user_groups,
        item_groups,
        aspect,
        attributes,
    })
}

/// Fraction of users whose predicted label matches the planted one under
/// the best relabelling of predicted groups.
pub fn planted_agreement(predicted: &[usize], planted: &[usize]) -> f64 {
    let c = predicted
        .iter()
        .chain(planted)
        .copied()
        .max()
        .map_or(0, |m| m + 1);
    let mut counts = vec![vec![0usize; c]; c];
    for (&p, &t) in predicted.iter().zip(planted) {
        counts[p][t] += 1;
    }
    let mut perm: Vec<usize> = (0..c).collect();
    let mut best = 0;
    permute(&mut perm, 0, &mut |p| {
        let hit = (0..c).map(|i| counts[i][p[i]]).sum();
        best = best.max(hit);
    });
    best as f64 / predicted.len().max(1) as f64
}

fn permute(v: &mut [usize], k: usize, visit: &mut impl FnMut(&[usize])) {
    if k == v.len() {
        visit(v);
        return;
    }
    for i in k..v.len() {
        v.swap(k, i);
        permute(v, k + 1, visit);
        v.swap(k, i);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn noise_free_users_stay_in_group() {
        let spec = SyntheticSpec {
            noise: 0.0,
            n_users: 40,
            n_items: 30,
            ..SyntheticSpec::default()
        };
        let d = generate_synthetic(&spec).unwrap();
        for (u, seq) in d.dataset.users().iter().enumerate() {
            let g = d.user_groups[u];
            let lo = 1 + g * spec.aspect_tokens;
            assert!(seq.items.len() >= 3);
            for &i in &seq.items {
                assert!((lo..lo + spec.aspect_tokens).contains(&d.aspect[i]));
                let planted = d
                    .dataset
                    .item(i)
                    .text_tokens
                    .iter()
                    .filter(|&&t| t < spec.first_attribute_token())
                    .count();
                assert_eq!(planted, 1);
            }
        }
    }

    #[test]
    fn infeasible_spec() {
        let spec = SyntheticSpec {
            n_items: 1,
            n_groups: 2,
            ..SyntheticSpec::default()
        };
        assert!(matches!(generate_synthetic(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn agreement_is_permutation_invariant() {
        assert_eq!(planted_agreement(&[1, 1, 0, 0], &[0, 0, 1, 1]), 1.0);
        assert_eq!(planted_agreement(&[0, 1, 0, 1], &[0, 0, 1, 1]), 0.5);
    }
}
