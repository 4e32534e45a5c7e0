//! Partitioning users by interest, group item pools, negative sampling and
//! group-homogeneous batching.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::seed;

pub const DEFAULT_GROUPS: usize = 8;
pub const KMEANS_RESTARTS: usize = 5;

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index and squared distance of the nearest centroid; ties go to the
/// lower index.
fn nearest(p: &[f64], centroids: &[Vec<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (c, m) in centroids.iter().enumerate() {
        let d = sq_dist(p, m);
        if d < best.1 {
            best = (c, d);
        }
    }
    best
}

/// Sum of squared distances from each point to its cluster centroid.
pub fn objective(points: &[Vec<f64>], labels: &[usize], centroids: &[Vec<f64>]) -> f64 {
    points
        .iter()
        .zip(labels)
        .map(|(p, &c)| sq_dist(p, &centroids[c]))
        .sum()
}

/// Mean of each labelled cluster. Empty clusters get a zero vector.
pub fn cluster_means(points: &[Vec<f64>], labels: &[usize], c: usize) -> Vec<Vec<f64>> {
    let dim = points.first().map_or(0, Vec::len);
    let mut sums = vec![vec![0.0; dim]; c];
    let mut counts = vec![0usize; c];
    for (p, &l) in points.iter().zip(labels) {
        counts[l] += 1;
        for (s, v) in sums[l].iter_mut().zip(p) {
            *s += v;
        }
    }
    for (s, &n) in sums.iter_mut().zip(&counts) {
        if n > 0 {
            s.iter_mut().for_each(|v| *v /= n as f64);
        }
    }
    sums
}

#[derive(Clone, Debug, PartialEq)]
pub struct KMeansResult {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub objective: f64,
    /// Objective after every assignment step of the winning restart.
    pub history: Vec<f64>,
    pub iterations: usize,
}

fn plus_plus_init(points: &[Vec<f64>], c: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let n = points.len();
    let mut centroids = vec![points[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|p| sq_dist(p, &centroids[0])).collect();
    while centroids.len() < c {
        let total: f64 = d2.iter().sum();
        let pick = if total > 0.0 {
            let mut r = rng.random::<f64>() * total;
            let mut chosen = n - 1;
            for (i, &w) in d2.iter().enumerate() {
                if r < w {
                    chosen = i;
                    break;
                }
                r -= w;
            }
            chosen
        } else {
            rng.random_range(0..n)
        };
        let m = points[pick].clone();
        for (d, p) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(p, &m));
        }
        centroids.push(m);
    }
    centroids
}

/// Moves the point farthest from its centroid into each empty cluster.
fn repair_empty(points: &[Vec<f64>], labels: &mut [usize], centroids: &mut [Vec<f64>]) {
    let c = centroids.len();
    loop {
        let mut counts = vec![0usize; c];
        labels.iter().for_each(|&l| counts[l] += 1);
        let Some(empty) = counts.iter().position(|&n| n == 0) else {
            return;
        };
        let far = (0..points.len())
            .filter(|&i| counts[labels[i]] > 1)
            .max_by(|&a, &b| {
                sq_dist(&points[a], &centroids[labels[a]])
                    .total_cmp(&sq_dist(&points[b], &centroids[labels[b]]))
                    .then(b.cmp(&a))
            })
            .expect("more points than clusters");
        labels[far] = empty;
        centroids[empty] = points[far].clone();
    }
}

fn lloyd(
    points: &[Vec<f64>],
    mut centroids: Vec<Vec<f64>>,
    max_iters: usize,
    tol: f64,
) -> KMeansResult {
    let c = centroids.len();
    let mut labels: Vec<usize> = points.iter().map(|p| nearest(p, &centroids).0).collect();
    repair_empty(points, &mut labels, &mut centroids);
    let mut history = vec![objective(points, &labels, &centroids)];
    let mut iterations = 0;
    while iterations < max_iters {
        iterations += 1;
        let updated = cluster_means(points, &labels, c);
        let shift = updated
            .iter()
            .zip(&centroids)
            .map(|(a, b)| sq_dist(a, b).sqrt())
            .fold(0.0, f64::max);
        centroids = updated;
        labels = points.iter().map(|p| nearest(p, &centroids).0).collect();
        repair_empty(points, &mut labels, &mut centroids);
        history.push(objective(points, &labels, &centroids));
        if shift < tol {
            break;
        }
    }
    let centroids = cluster_means(points, &labels, c);
    KMeansResult {
        objective: objective(points, &labels, &centroids),
        labels,
        centroids,
        history,
        iterations,
    }
}

/// K-means with k-means++ seeding, keeping the best of
/// [`KMEANS_RESTARTS`] restarts.
pub fn kmeans(
    points: &[Vec<f64>],
    c: usize,
    seed: u64,
    max_iters: usize,
    tol: f64,
) -> Result<KMeansResult> {
    if c == 0 || c > points.len() {
        return Err(Error::Config(format!(
            "cannot form {c} groups from {} users",
            points.len()
        )));
    }
    let dim = points[0].len();
    if points.iter().any(|p| p.len() != dim) {
        return Err(Error::Contract(
            "interest vectors differ in dimension".into(),
        ));
    }
    let mut best: Option<KMeansResult> = None;
    for r in 0..KMEANS_RESTARTS {
        let mut rng = seed::rng(seed, &format!("kmeans/{r}"));
        let init = plus_plus_init(points, c, &mut rng);
        let run = lloyd(points, init, max_iters, tol);
        if best.as_ref().is_none_or(|b| run.objective < b.objective) {
            best = Some(run);
        }
    }
    Ok(best.expect("at least one restart"))
}

/// Items appearing in at least one training sequence of each group.
pub fn build_item_pools(labels: &[usize], c: usize, dataset: &Dataset) -> Vec<BTreeSet<usize>> {
    let mut pools = vec![BTreeSet::new(); c];
    for (u, &g) in dataset.users().iter().zip(labels) {
        pools[g].extend(u.train().iter().copied());
    }
    pools
}

/// User partition with per-group centroids and item pools. Users are
/// addressed by their position in [`Dataset::users`].
#[derive(Clone, Debug, PartialEq)]
pub struct GroupAssignment {
    pub labels: Vec<usize>,
    pub centroids: Vec<Vec<f64>>,
    pub pools: Vec<BTreeSet<usize>>,
}

#[derive(Serialize, Deserialize)]
struct AssignmentFile {
    #[serde(rename = "C")]
    c: usize,
    assign: BTreeMap<String, usize>,
    pools: BTreeMap<String, Vec<u64>>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    centroids: Vec<Vec<f64>>,
}

impl GroupAssignment {
    pub fn new(labels: Vec<usize>, centroids: Vec<Vec<f64>>, dataset: &Dataset) -> Result<Self> {
        let c = centroids.len();
        if labels.len() != dataset.n_users() {
            return Err(Error::Contract(format!(
                "{} labels for {} users",
                labels.len(),
                dataset.n_users()
            )));
        }
        let mut counts = vec![0usize; c];
        for &l in &labels {
            if l >= c {
                return Err(Error::Contract(format!(
                    "group {l} out of range for C = {c}"
                )));
            }
            counts[l] += 1;
        }
        if let Some(g) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Contract(format!("group {g} has no users")));
        }
        let pools = build_item_pools(&labels, c, dataset);
        Ok(Self {
            labels,
            centroids,
            pools,
        })
    }

    pub fn single(dataset: &Dataset) -> Result<Self> {
        Self::new(vec![0; dataset.n_users()], vec![Vec::new()], dataset)
    }

    pub fn n_groups(&self) -> usize {
        self.pools.len()
    }

    pub fn group_of(&self, user: usize) -> usize {
        self.labels[user]
    }

    pub fn members(&self, group: usize) -> Vec<usize> {
        (0..self.labels.len())
            .filter(|&u| self.labels[u] == group)
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        let mut s = vec![0; self.n_groups()];
        self.labels.iter().for_each(|&l| s[l] += 1);
        s
    }

    pub fn to_json(&self, dataset: &Dataset) -> Result<String> {
        let file = AssignmentFile {
            c: self.n_groups(),
            assign: dataset
                .users()
                .iter()
                .zip(&self.labels)
                .map(|(u, &g)| (u.user_id.to_string(), g))
                .collect(),
            pools: self
                .pools
                .iter()
                .enumerate()
                .map(|(g, p)| {
                    (
                        g.to_string(),
                        p.iter().map(|&i| dataset.item(i).item_id).collect(),
                    )
                })
                .collect(),
            centroids: self.centroids.clone(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    /// Parses a persisted assignment and checks its pools against the data.
    pub fn from_json(text: &str, dataset: &Dataset) -> Result<Self> {
        let file: AssignmentFile = serde_json::from_str(text)?;
        let labels = dataset
            .users()
            .iter()
            .map(|u| {
                file.assign
                    .get(&u.user_id.to_string())
                    .copied()
                    .ok_or_else(|| Error::Data(format!("assignment lacks user {}", u.user_id)))
            })
            .collect::<Result<Vec<_>>>()?;
        let centroids = if file.centroids.len() == file.c {
            file.centroids
        } else {
            vec![Vec::new(); file.c]
        };
        let out = Self::new(labels, centroids, dataset)?;
        for (g, pool) in out.pools.iter().enumerate() {
            let stored: Option<BTreeSet<usize>> = file.pools.get(&g.to_string()).map(|ids| {
                ids.iter()
                    .filter_map(|&id| dataset.item_index(id))
                    .collect()
            });
            if stored.as_ref() != Some(pool) {
                return Err(Error::Data(format!(
                    "stored pool for group {g} disagrees with the data"
                )));
            }
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path, dataset: &Dataset) -> Result<()> {
        fs::write(path, self.to_json(dataset)?)?;
        Ok(())
    }

    pub fn load(path: &Path, dataset: &Dataset) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?, dataset)
    }
}

/// Which item set a negative was drawn from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum PoolTag {
    Global,
    Group(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct NegativeDraw {
    pub source: PoolTag,
    /// One negative per positive, in step order.
    pub items: Vec<usize>,
}

/// Draws one negative per positive, uniform over `pool` minus that positive.
pub fn sample_negatives(
    pool: &[usize],
    positives: &[usize],
    source: PoolTag,
    rng: &mut impl Rng,
) -> Result<NegativeDraw> {
    if pool.len() < 2 {
        return Err(Error::Sampling(format!(
            "{source:?} pool has {} item(s); at least 2 are needed",
            pool.len()
        )));
    }
    let items = positives
        .iter()
        .map(|p| match pool.binary_search(p) {
            Ok(at) => {
                let k = rng.random_range(0..pool.len() - 1);
                pool[if k >= at { k + 1 } else { k }]
            }
            Err(_) => pool[rng.random_range(0..pool.len())],
        })
        .collect();
    Ok(NegativeDraw { source, items })
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Batch {
    pub group: usize,
    pub users: Vec<usize>,
}

/// One epoch of batches: users are shuffled within each group, chunked,
/// and the resulting batches shuffled together.
pub fn make_batches(
    labels: &[usize],
    c: usize,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Batch>> {
    if batch_size == 0 {
        return Err(Error::Config("batch size must be at least 1".into()));
    }
    let mut batches = Vec::new();
    for g in 0..c {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&u| labels[u] == g).collect();
        members.shuffle(rng);
        batches.extend(members.chunks(batch_size).map(|ch| Batch {
            group: g,
            users: ch.to_vec(),
        }));
    }
    batches.shuffle(rng);
    Ok(batches)
}

/// Uniform random labels with no empty group.
pub fn random_partition(n_users: usize, c: usize, rng: &mut impl Rng) -> Result<Vec<usize>> {
    if c == 0 || c > n_users {
        return Err(Error::Config(format!(
            "cannot form {c} groups from {n_users} users"
        )));
    }
    loop {
        let labels: Vec<usize> = (0..n_users).map(|_| rng.random_range(0..c)).collect();
        let mut seen = vec![false; c];
        labels.iter().for_each(|&l| seen[l] = true);
        if seen.iter().all(|&s| s) {
            return Ok(labels);
        }
    }
}
