use std::collections::{BTreeSet, HashMap};
use std::sync::Arc;

use log::{info, warn};
use perpeft_autodiff::{Graph, Var};
use rand::RngCore;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::encoder::EncoderModel;
use crate::error::{Error, Result};
use crate::grouping::{
    kmeans, make_batches, random_partition, sample_negatives, Batch, GroupAssignment, PoolTag,
};
use crate::nn::Module;
use crate::peft::{attachment_param_count, PeftKind};
use crate::recsys::{bce_loss, LossMode, Projector, Sasrec};
use crate::seed;

use super::model::{Injection, RecModel, Scope, Split};
use super::optim::AdamW;
use super::{Method, RunConfig, SELECT_K};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum NegativeSource {
    /// Uniform over the whole catalogue.
    AllItems,
    /// Uniform over the batch group's item pool.
    GroupPool,
}

#[derive(Clone, Debug)]
pub struct TrainPlan {
    pub epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_mode: LossMode,
    pub batch_size: usize,
    pub negatives: NegativeSource,
    /// Label of the run's random stream.
    pub stream: String,
    /// Also keep the best checkpoint among the first this many epochs.
    pub snapshot_within: Option<usize>,
    pub seed: u64,
}

impl TrainPlan {
    pub fn from_config(
        config: &RunConfig,
        epochs: usize,
        negatives: NegativeSource,
        stream: &str,
    ) -> Self {
        Self {
            epochs,
            learning_rate: config.learning_rate,
            weight_decay: config.weight_decay,
            loss_mode: config.loss_mode,
            batch_size: config.batch_size,
            negatives,
            stream: stream.to_string(),
            snapshot_within: None,
            seed: config.seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean per-step training loss over the epoch.
    pub loss: f64,
    pub val_hit: f64,
}

/// Counters checked over a whole run.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Audit {
    pub batches: usize,
    pub mixed_batches: usize,
    pub steps: usize,
    pub negatives: usize,
    pub negatives_outside_pool: usize,
    pub negatives_equal_positive: usize,
    /// Per batch, the group whose components were updated.
    pub batch_groups: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct RunOutcome {
    pub best: RecModel,
    pub best_epoch: usize,
    pub best_val: f64,
    /// Best checkpoint among the first `snapshot_within` epochs.
    pub early: Option<(RecModel, usize, f64)>,
    pub history: Vec<EpochLog>,
    pub audit: Audit,
    /// Model after the final epoch.
    pub last: RecModel,
}

/// Mini-batch trainer over group-homogeneous batches.
pub struct Trainer<'a> {
    ds: &'a Dataset,
    pools: Vec<Vec<usize>>,
    pool_sets: Vec<BTreeSet<usize>>,
    all_items: Vec<usize>,
}

impl<'a> Trainer<'a> {
    /// `pools[c]` is group `c`'s negative pool; one entry for ungrouped runs.
    pub fn new(ds: &'a Dataset, pools: Vec<BTreeSet<usize>>) -> Self {
        Self {
            ds,
            pools: pools.iter().map(|p| p.iter().copied().collect()).collect(),
            pool_sets: pools,
            all_items: (0..ds.n_items()).collect(),
        }
    }

    pub fn run(&self, model: &mut RecModel, plan: &TrainPlan) -> Result<RunOutcome> {
        let mut rng = seed::rng(plan.seed, &plan.stream);
        let mut opt = AdamW::new(plan.learning_rate, plan.weight_decay);
        let n_groups = model.routing.iter().copied().max().map_or(1, |m| m + 1);
        let mut audit = Audit::default();
        let mut history = Vec::new();
        let mut best: Option<(RecModel, usize, f64)> = None;
        let mut early: Option<(RecModel, usize, f64)> = None;
        for epoch in 1..=plan.epochs {
            let batches = make_batches(&model.routing, n_groups, plan.batch_size, &mut rng)?;
            let (mut total, mut count) = (0.0, 0usize);
            for (bi, batch) in batches.iter().enumerate() {
                let Some((loss, steps)) =
                    self.step(model, batch, plan, &mut opt, &mut rng, &mut audit)?
                else {
                    continue;
                };
                if !loss.is_finite() {
                    return Err(Error::Divergence {
                        epoch,
                        batch: bi,
                        value: loss,
                    });
                }
                total += loss;
                count += 1;
                audit.steps += steps;
            }
            let val_hit = model
                .evaluate(self.ds, Split::Valid, &[SELECT_K])?
                .hit_at(SELECT_K);
            let loss = if count > 0 { total / count as f64 } else { 0.0 };
            info!("epoch {epoch}: loss {loss:.5}, valid Hit@{SELECT_K} {val_hit:.4}");
            history.push(EpochLog {
                epoch,
                loss,
                val_hit,
            });
            if best.as_ref().is_none_or(|b| val_hit > b.2) {
                best = Some((model.clone(), epoch, val_hit));
            }
            if plan.snapshot_within.is_some_and(|n| epoch <= n)
                && early.as_ref().is_none_or(|b| val_hit > b.2)
            {
                early = Some((model.clone(), epoch, val_hit));
            }
        }
        let (best, best_epoch, best_val) =
            best.ok_or_else(|| Error::Config("epochs must be positive".into()))?;
        Ok(RunOutcome {
            best,
            best_epoch,
            best_val,
            early,
            history,
            audit,
            last: model.clone(),
        })
    }

    /// One optimizer step on `batch`. Returns the mean per-step loss and
    /// the number of prediction steps, or `None` when the batch has none.
    fn step(
        &self,
        model: &mut RecModel,
        batch: &Batch,
        plan: &TrainPlan,
        opt: &mut AdamW,
        rng: &mut ChaCha8Rng,
        audit: &mut Audit,
    ) -> Result<Option<(f64, usize)>> {
        let comp = model.component(batch.users[0]);
        audit.batches += 1;
        audit.batch_groups.push(batch.group);
        if batch.users.iter().any(|&u| model.routing[u] != batch.group) {
            audit.mixed_batches += 1;
        }
        let appended = model
            .personal
            .as_ref()
            .is_some_and(|p| p.injection == Injection::Append);
        let keep = model.max_items();
        let mut users = Vec::new();
        let mut inputs: Vec<&[usize]> = Vec::new();
        let mut targets: Vec<usize> = Vec::new();
        for &u in &batch.users {
            let seq = self.ds.users()[u].train();
            if seq.len() < 2 {
                continue;
            }
            let m = seq.len();
            let start = (m - 1).saturating_sub(keep);
            users.push(u);
            inputs.push(&seq[start..m - 1]);
            targets.extend_from_slice(&seq[start + 1..m]);
            if appended {
                targets.push(seq[m - 1]);
            }
        }
        if users.is_empty() {
            return Ok(None);
        }
        let (pool, tag, pool_set) = match plan.negatives {
            NegativeSource::AllItems => (&self.all_items, PoolTag::Global, None),
            NegativeSource::GroupPool => {
                let p = self.pools.get(batch.group).ok_or_else(|| {
                    Error::State(format!("no item pool for group {}", batch.group))
                })?;
                (
                    p,
                    PoolTag::Group(batch.group),
                    Some(&self.pool_sets[batch.group]),
                )
            }
        };
        let draw = sample_negatives(pool, &targets, tag, rng)?;
        audit.negatives += draw.items.len();
        for (n, t) in draw.items.iter().zip(&targets) {
            let inside = match pool_set {
                Some(s) => s.contains(n),
                None => *n < self.ds.n_items(),
            };
            audit.negatives_outside_pool += usize::from(!inside);
            audit.negatives_equal_positive += usize::from(n == t);
        }

        let mut g = Graph::new();
        let batch = LossBatch {
            comp,
            users: &users,
            inputs: &inputs,
            targets: &targets,
            negatives: &draw.items,
        };
        let loss = batch_loss(&mut g, model, self.ds, &batch, plan.loss_mode, Some(rng))?;
        let steps = targets.len();
        let value = g.value(loss).item();
        if !value.is_finite() {
            return Ok(Some((value, steps)));
        }
        g.backward(loss)?;
        for p in model.trainable_for(comp) {
            g.accumulate_into(p);
        }
        drop(g);
        for p in model.trainable_for(comp) {
            opt.step(p);
        }
        Ok(Some((value, steps)))
    }
}

/// One training batch: per user an input prefix, and one target and one
/// negative per prediction step.
pub struct LossBatch<'b> {
    pub comp: usize,
    pub users: &'b [usize],
    pub inputs: &'b [&'b [usize]],
    pub targets: &'b [usize],
    pub negatives: &'b [usize],
}

/// Records the mean per-step loss of `batch`. Dropout is active only when
/// `train_rng` is given.
pub fn batch_loss(
    g: &mut Graph,
    model: &RecModel,
    ds: &Dataset,
    batch: &LossBatch<'_>,
    mode: LossMode,
    train_rng: Option<&mut dyn RngCore>,
) -> Result<Var> {
    if batch.negatives.len() != batch.targets.len() {
        return Err(Error::Contract(format!(
            "{} negatives for {} targets",
            batch.negatives.len(),
            batch.targets.len()
        )));
    }
    let needed: BTreeSet<usize> = batch
        .inputs
        .iter()
        .flat_map(|s| s.iter().copied())
        .chain(batch.targets.iter().copied())
        .chain(batch.negatives.iter().copied())
        .collect();
    let items: Vec<usize> = needed.into_iter().collect();
    let local: HashMap<usize, usize> = items.iter().enumerate().map(|(k, &i)| (i, k)).collect();

    let z = model.item_embeddings(g, batch.comp, &items, ds)?;
    let rows: Vec<Vec<usize>> = batch
        .inputs
        .iter()
        .map(|s| s.iter().map(|i| local[i]).collect())
        .collect();
    let (h, lens, l) = model.sequence_forward(g, z, &rows, batch.users, train_rng)?;
    let mut pred_idx = Vec::with_capacity(batch.targets.len());
    for (b, len) in lens.iter().enumerate() {
        pred_idx.extend((0..*len).map(|p| Some(b * l + p)));
    }
    if pred_idx.len() != batch.targets.len() {
        return Err(Error::Contract(format!(
            "{} prediction steps for {} targets",
            pred_idx.len(),
            batch.targets.len()
        )));
    }
    let pos_idx: Vec<Option<usize>> = batch.targets.iter().map(|t| Some(local[t])).collect();
    let neg_idx: Vec<Option<usize>> = batch.negatives.iter().map(|n| Some(local[n])).collect();
    let pred = g.gather_rows(h, &pred_idx)?;
    let pos = g.gather_rows(z, &pos_idx)?;
    let neg = g.gather_rows(z, &neg_idx)?;
    let total = bce_loss(g, pred, pos, neg, mode)?;
    Ok(g.scale(total, 1.0 / batch.targets.len() as f64))
}

/// Last-position outputs over each user's training sequence.
pub fn compute_interest_vectors(global: &RecModel, ds: &Dataset) -> Result<Vec<Vec<f64>>> {
    if global.n_components() != 1 || global.personal.is_some() {
        return Err(Error::State(
            "interest vectors need a trained Global PEFT model".into(),
        ));
    }
    global.user_vectors(ds, |u| u.train())
}

/// Clusters users by interest into `config.groups` groups.
pub fn group_users(config: &RunConfig, global: &RecModel, ds: &Dataset) -> Result<GroupAssignment> {
    let vectors = compute_interest_vectors(global, ds)?;
    let km = kmeans(
        &vectors,
        config.groups,
        seed::derive(config.seed, "kmeans"),
        config.kmeans_iters,
        config.kmeans_tol,
    )?;
    GroupAssignment::new(km.labels, km.centroids, ds)
}

/// First stage: the method's base model trained with one shared module and
/// catalogue-wide negatives for `config.global_epochs` epochs.
pub fn train_global(
    config: &RunConfig,
    ds: &Dataset,
    encoder: Arc<EncoderModel>,
) -> Result<RunOutcome> {
    let mut model = RecModel::new(config, encoder, ds)?;
    let plan = TrainPlan::from_config(
        config,
        config.global_epochs,
        NegativeSource::AllItems,
        "train/global",
    );
    Trainer::new(ds, vec![(0..ds.n_items()).collect()]).run(&mut model, &plan)
}

/// Second stage of PerPEFT: per-group copies of the global components,
/// trained on group-homogeneous batches with group-pool negatives.
pub fn train_perpeft(
    config: &RunConfig,
    ds: &Dataset,
    global: &RecModel,
    assignment: Option<&GroupAssignment>,
) -> Result<RunOutcome> {
    let assignment =
        assignment.ok_or_else(|| Error::State("PerPEFT needs a group assignment".into()))?;
    train_grouped(config, ds, global, assignment, NegativeSource::GroupPool)
}

/// Splits `global` into per-group copies and trains them.
pub fn train_grouped(
    config: &RunConfig,
    ds: &Dataset,
    global: &RecModel,
    assignment: &GroupAssignment,
    negatives: NegativeSource,
) -> Result<RunOutcome> {
    let mut model = global.clone();
    model.method = config.method;
    model.config = config.clone();
    model.split_into_groups(assignment.labels.clone(), assignment.n_groups())?;
    let plan = TrainPlan::from_config(config, config.personal_epochs, negatives, "train/personal");
    Trainer::new(ds, assignment.pools.clone()).run(&mut model, &plan)
}

/// Result of a full two-stage method run.
#[derive(Clone, Debug)]
pub struct MethodRun {
    pub global: RunOutcome,
    pub assignment: Option<GroupAssignment>,
    pub outcome: RunOutcome,
    pub v4: Option<V4Plan>,
}

/// Continues a single-module model for `personal_epochs` with
/// catalogue-wide negatives.
pub fn continue_global(config: &RunConfig, ds: &Dataset, base: &RecModel) -> Result<RunOutcome> {
    let mut model = base.clone();
    model.config = config.clone();
    let plan = TrainPlan::from_config(
        config,
        config.personal_epochs,
        NegativeSource::AllItems,
        "train/personal",
    );
    Trainer::new(ds, vec![(0..ds.n_items()).collect()]).run(&mut model, &plan)
}

/// Baselines. Every method trains `global_epochs` as a single shared model,
/// then `personal_epochs` more in its own form.
pub fn run_baseline(
    config: &RunConfig,
    ds: &Dataset,
    encoder: Arc<EncoderModel>,
) -> Result<MethodRun> {
    if matches!(
        config.method,
        Method::V1 | Method::V2 | Method::V3 | Method::V4 | Method::V5
    ) {
        return run_ablation(config, ds, encoder);
    }
    let global = train_global(config, ds, encoder)?;
    let base = &global.best;
    let (assignment, outcome) = match config.method {
        Method::WoMm | Method::FrozenMm | Method::GlobalPeft => {
            (None, continue_global(config, ds, base)?)
        }
        Method::UserLevel1 | Method::UserLevel2 => {
            let injection = if config.method == Method::UserLevel1 {
                Injection::Append
            } else {
                Injection::Concat
            };
            let mut model = base.clone();
            model.add_personal(Scope::User, injection, ds.n_users());
            (None, continue_global(config, ds, &model)?)
        }
        Method::GroupLevel1 | Method::GroupLevel2 => {
            let assignment = group_users(config, base, ds)?;
            let injection = if config.method == Method::GroupLevel1 {
                Injection::Append
            } else {
                Injection::Concat
            };
            let mut model = base.clone();
            model.set_routing(assignment.labels.clone(), assignment.n_groups())?;
            model.add_personal(Scope::Group, injection, assignment.n_groups());
            model.config = config.clone();
            let plan = TrainPlan::from_config(
                config,
                config.personal_epochs,
                NegativeSource::AllItems,
                "train/personal",
            );
            let outcome =
                Trainer::new(ds, vec![(0..ds.n_items()).collect()]).run(&mut model, &plan)?;
            (Some(assignment), outcome)
        }
        Method::PerPeft => {
            let assignment = group_users(config, base, ds)?;
            let outcome = train_perpeft(config, ds, base, Some(&assignment))?;
            (Some(assignment), outcome)
        }
        _ => unreachable!("ablations are dispatched above"),
    };
    Ok(MethodRun {
        global,
        assignment,
        outcome,
        v4: None,
    })
}

/// Ablations V1 to V5, and any other method by delegation.
pub fn run_ablation(
    config: &RunConfig,
    ds: &Dataset,
    encoder: Arc<EncoderModel>,
) -> Result<MethodRun> {
    match config.method {
        Method::V1 | Method::V2 => {
            let global = train_global(config, ds, encoder)?;
            let outcome = continue_global(config, ds, &global.best)?;
            Ok(MethodRun {
                global,
                assignment: None,
                outcome,
                v4: None,
            })
        }
        Method::V4 => {
            let plan = v4_search(config, &encoder, ds.n_items())?;
            let sized = RunConfig {
                peft_size: Some(plan.size),
                projector_hidden: plan.projector_hidden,
                ..config.clone()
            };
            let global = train_global(&sized, ds, encoder)?;
            let outcome = continue_global(&sized, ds, &global.best)?;
            Ok(MethodRun {
                global,
                assignment: None,
                outcome,
                v4: Some(plan),
            })
        }
        Method::V3 | Method::V5 => {
            let global = train_global(config, ds, encoder)?;
            let assignment = if config.method == Method::V3 {
                group_users(config, &global.best, ds)?
            } else {
                let mut rng = seed::rng(config.seed, "random-groups");
                let labels = random_partition(ds.n_users(), config.groups, &mut rng)?;
                GroupAssignment::new(labels, vec![Vec::new(); config.groups], ds)?
            };
            let negatives = if config.method == Method::V3 {
                NegativeSource::AllItems
            } else {
                NegativeSource::GroupPool
            };
            let outcome = train_grouped(config, ds, &global.best, &assignment, negatives)?;
            Ok(MethodRun {
                global,
                assignment: Some(assignment),
                outcome,
                v4: None,
            })
        }
        _ => run_baseline(config, ds, encoder),
    }
}

/// Single-module configuration sized to match PerPEFT's trainable count.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct V4Plan {
    pub kind: PeftKind,
    pub size: usize,
    pub projector_hidden: usize,
    pub params: usize,
    pub target: usize,
    pub delta: i64,
}

pub const V4_TOLERANCE: i64 = 1000;

/// Searches the LoRA rank or SideNet width (projector width for (IA)³)
/// whose single-module total lands nearest PerPEFT's total with
/// `config.groups` groups.
pub fn v4_search(config: &RunConfig, encoder: &EncoderModel, n_items: usize) -> Result<V4Plan> {
    let d = config.sasrec.dim;
    let dp = config.encoder.d_prime;
    let sasrec = {
        let mut rng = seed::rng(0, "count");
        Sasrec::new(&config.sasrec, &mut rng)?.param_count()
    };
    let table = n_items * d;
    let kind = config.peft_kind;
    let size = config.peft_size();
    let peft = attachment_param_count(encoder, kind, size);
    let proj = Projector::count(2 * dp, config.projector_hidden, d);
    let target = sasrec + table + config.groups * (peft + proj);
    let total = |s: usize, h: usize| {
        attachment_param_count(encoder, kind, s) + Projector::count(2 * dp, h, d) + sasrec + table
    };
    let candidates: Vec<(usize, usize)> = match kind {
        PeftKind::Ia3 => (1..=config.projector_hidden * config.groups.max(1) * 4)
            .map(|h| (size, h))
            .collect(),
        _ => (1..=size * config.groups.max(1) * 4 + 64)
            .map(|s| (s, config.projector_hidden))
            .collect(),
    };
    let (s, h) = candidates
        .into_iter()
        .min_by_key(|&(s, h)| (total(s, h) as i64 - target as i64).abs())
        .expect("non-empty search range");
    let params = total(s, h);
    let delta = params as i64 - target as i64;
    if delta.abs() > V4_TOLERANCE {
        warn!("V4: nearest single module is {delta:+} parameters from the PerPEFT total");
    }
    Ok(V4Plan {
        kind,
        size: s,
        projector_hidden: h,
        params,
        target,
        delta,
    })
}
