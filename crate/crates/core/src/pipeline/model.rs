use std::collections::BTreeSet;
use std::sync::Arc;

use perpeft_autodiff::{Graph, Parameter, Tensor, Var};
use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, ItemRecord, UserSequence};
use crate::encoder::{EncoderModel, FrozenCache};
use crate::error::{Error, Result};
use crate::nn::{normal, Linear, Module};
use crate::peft::{GroupComponents, PeftAttachment, PeftKind, PeftRegistry};
use crate::recsys::{
    compose_item_embedding, rank_of, Metrics, Projector, Sasrec, TransductiveTable,
};
use crate::seed;

use super::{Method, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Split {
    Valid,
    Test,
}

/// Which encoder outputs reach the projector.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    Both,
    NoText,
    NoVision,
}

/// How a per-user or per-group vector enters the sequence model.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Injection {
    /// One extra sequence element after the items.
    Append,
    /// Concatenated to every item embedding, then mapped back to `d`.
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scope {
    User,
    Group,
}

#[derive(Clone, Debug)]
pub struct PersonalVectors {
    pub scope: Scope,
    pub injection: Injection,
    pub table: Parameter,
    pub mix: Option<Linear>,
}

impl PersonalVectors {
    pub fn new(
        scope: Scope,
        injection: Injection,
        count: usize,
        dim: usize,
        rng: &mut impl Rng,
    ) -> Self {
        let name = match scope {
            Scope::User => "personal/user",
            Scope::Group => "personal/group",
        };
        Self {
            scope,
            injection,
            table: Parameter::trainable(name, normal(&[count, dim], 0.1, rng)),
            mix: (injection == Injection::Concat)
                .then(|| Linear::trainable("personal/mix", 2 * dim, dim, rng)),
        }
    }
}

impl Module for PersonalVectors {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.table];
        if let Some(m) = &self.mix {
            out.extend([&m.weight, &m.bias]);
        }
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.table];
        if let Some(m) = &mut self.mix {
            out.extend([&mut m.weight, &mut m.bias]);
        }
        out
    }
}

/// A full recommender: frozen encoder, group components, transductive
/// table, sequence model and optional personal vectors.
#[derive(Clone, Debug)]
pub struct RecModel {
    pub method: Method,
    pub config: RunConfig,
    encoder: Arc<EncoderModel>,
    cache: Option<Arc<FrozenCache>>,
    pub registry: PeftRegistry,
    /// Group label of each user, by position in the dataset.
    pub routing: Vec<usize>,
    pub table: TransductiveTable,
    pub sasrec: Sasrec,
    pub personal: Option<PersonalVectors>,
    pub modality: Modality,
}

/// Row indices of one batch of sequences laid out for the sequence model.
struct Layout {
    lengths: Vec<usize>,
    block_len: usize,
}

impl RecModel {
    /// Builds the single-group form of `config.method`.
    pub fn new(config: &RunConfig, encoder: Arc<EncoderModel>, ds: &Dataset) -> Result<Self> {
        config.validate()?;
        if encoder.config() != &config.encoder {
            return Err(Error::Config(
                "encoder does not match the run configuration".into(),
            ));
        }
        let method = config.method;
        let dim = config.sasrec.dim;
        let mut rng = seed::rng(config.seed, "init");
        let peft = method.uses_peft().then(|| {
            PeftAttachment::attach_sized(
                &encoder,
                config.peft_kind,
                config.peft_size(),
                "global",
                seed::derive(config.seed, "peft"),
            )
        });
        let projector = Projector::new(
            "global",
            2 * config.encoder.d_prime,
            config.projector_hidden,
            dim,
            &mut rng,
        );
        let table = TransductiveTable::new(ds.n_items(), dim, &mut rng);
        let sasrec = Sasrec::new(&config.sasrec, &mut rng)?;
        let needs_cache =
            method != Method::WoMm && peft.as_ref().is_none_or(|p| p.kind() == PeftKind::SideNet);
        let cache = if needs_cache {
            Some(Arc::new(FrozenCache::build(&encoder, ds.items())?))
        } else {
            None
        };
        let modality = match method {
            Method::V1 => Modality::NoText,
            Method::V2 => Modality::NoVision,
            _ => Modality::Both,
        };
        Ok(Self {
            method,
            config: config.clone(),
            encoder,
            cache,
            registry: PeftRegistry::single(GroupComponents { peft, projector }),
            routing: vec![0; ds.n_users()],
            table,
            sasrec,
            personal: None,
            modality,
        })
    }

    pub fn encoder(&self) -> &EncoderModel {
        &self.encoder
    }

    pub fn encoder_arc(&self) -> Arc<EncoderModel> {
        Arc::clone(&self.encoder)
    }

    /// Replaces the single global module by `groups` copies of it and
    /// routes each user to its group's copy.
    pub fn split_into_groups(&mut self, labels: Vec<usize>, groups: usize) -> Result<()> {
        if self.registry.len() != 1 {
            return Err(Error::State("model is already split into groups".into()));
        }
        self.set_routing(labels, groups)?;
        self.registry = PeftRegistry::from_global(self.registry.get(0), groups);
        self.registry.check_disjoint()
    }

    /// Records group labels without cloning components.
    pub fn set_routing(&mut self, labels: Vec<usize>, groups: usize) -> Result<()> {
        if labels.len() != self.routing.len() {
            return Err(Error::Contract(format!(
                "{} labels for {} users",
                labels.len(),
                self.routing.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= groups) {
            return Err(Error::Contract(format!(
                "group {bad} out of range for C = {groups}"
            )));
        }
        self.routing = labels;
        Ok(())
    }

    pub fn add_personal(&mut self, scope: Scope, injection: Injection, count: usize) {
        let mut rng = seed::rng(self.config.seed, "personal");
        self.personal = Some(PersonalVectors::new(
            scope,
            injection,
            count,
            self.config.sasrec.dim,
            &mut rng,
        ));
    }

    pub fn n_components(&self) -> usize {
        self.registry.len()
    }

    /// Index of the group components serving `user`.
    pub fn component(&self, user: usize) -> usize {
        if self.registry.len() > 1 {
            self.routing[user]
        } else {
            0
        }
    }

    fn personal_index(&self, user: usize) -> Option<usize> {
        self.personal.as_ref().map(|p| match p.scope {
            Scope::User => user,
            Scope::Group => self.routing[user],
        })
    }

    /// Most items a single input sequence may hold.
    pub fn max_items(&self) -> usize {
        let appended = self
            .personal
            .as_ref()
            .is_some_and(|p| p.injection == Injection::Append);
        self.config.sasrec.max_len - usize::from(appended)
    }

    /// Item embeddings `[items.len(), d]` under group `comp`.
    pub fn item_embeddings(
        &self,
        g: &mut Graph,
        comp: usize,
        items: &[usize],
        ds: &Dataset,
    ) -> Result<Var> {
        if self.method == Method::WoMm {
            if let Some(&bad) = items.iter().find(|&&i| i >= ds.n_items()) {
                return Err(Error::Data(format!("unknown item index {bad}")));
            }
            return Ok(self.table.rows(g, items)?);
        }
        if let Some(&bad) = items.iter().find(|&&i| i >= ds.n_items()) {
            return Err(Error::Data(format!("unknown item index {bad}")));
        }
        let gc = self.registry.get(comp);
        let recs: Vec<&ItemRecord> = items.iter().map(|&i| ds.item(i)).collect();
        let enc = self
            .encoder
            .encode_batch(g, gc.peft.as_ref(), &recs, self.cache.as_deref())?;
        let (mut x, mut y) = (enc.x, enc.y);
        let shape = [items.len(), self.config.encoder.d_prime];
        match self.modality {
            Modality::Both => {}
            Modality::NoText => y = g.constant(Tensor::zeros(&shape)),
            Modality::NoVision => x = g.constant(Tensor::zeros(&shape)),
        }
        Ok(compose_item_embedding(
            g,
            &gc.projector,
            x,
            y,
            &self.table,
            items,
        )?)
    }

    /// Runs the sequence model over `rows[b]`, each a list of row indices
    /// into `z`, for the users `users[b]`. Returns the output and, per
    /// sequence, its length.
    pub fn sequence_forward(
        &self,
        g: &mut Graph,
        z: Var,
        rows: &[Vec<usize>],
        users: &[usize],
        train_rng: Option<&mut dyn RngCore>,
    ) -> Result<(Var, Vec<usize>, usize)> {
        let layout = self.layout(rows)?;
        let (lens, l) = (&layout.lengths, layout.block_len);
        let mut item_idx = vec![None; rows.len() * l];
        for (b, r) in rows.iter().enumerate() {
            for (p, &i) in r.iter().enumerate() {
                item_idx[b * l + p] = Some(i);
            }
        }
        let mut x = g.gather_rows(z, &item_idx)?;
        if let Some(pv) = &self.personal {
            let table = g.param(&pv.table);
            let mut pidx = vec![None; rows.len() * l];
            for (b, r) in rows.iter().enumerate() {
                let who = self.personal_index(users[b]);
                match pv.injection {
                    Injection::Append => pidx[b * l + r.len()] = who,
                    Injection::Concat => (0..r.len()).for_each(|p| pidx[b * l + p] = who),
                }
            }
            let pr = g.gather_rows(table, &pidx)?;
            x = match (&pv.injection, &pv.mix) {
                (Injection::Append, _) => g.add(x, pr)?,
                (Injection::Concat, Some(mix)) => {
                    let cat = g.concat_cols(x, pr)?;
                    mix.forward(g, cat)?
                }
                (Injection::Concat, None) => {
                    return Err(Error::State("concat injection without mixing layer".into()))
                }
            };
        }
        let out = self.sasrec.forward(g, x, lens, l, train_rng)?;
        Ok((out, layout.lengths, l))
    }

    fn layout(&self, rows: &[Vec<usize>]) -> Result<Layout> {
        let extra = usize::from(
            self.personal
                .as_ref()
                .is_some_and(|p| p.injection == Injection::Append),
        );
        let lengths: Vec<usize> = rows.iter().map(|r| r.len() + extra).collect();
        if rows
            .iter()
            .any(|r| r.is_empty() || r.len() > self.max_items())
        {
            return Err(Error::Contract(format!(
                "input sequences must hold 1..={} items",
                self.max_items()
            )));
        }
        let block_len = lengths.iter().copied().max().unwrap_or(1);
        Ok(Layout { lengths, block_len })
    }

    /// Embeddings of every item under group `comp`, as plain values.
    pub fn all_item_embeddings(&self, comp: usize, ds: &Dataset) -> Result<Tensor> {
        const CHUNK: usize = 128;
        let d = self.config.sasrec.dim;
        let mut data = Vec::with_capacity(ds.n_items() * d);
        let all: Vec<usize> = (0..ds.n_items()).collect();
        for chunk in all.chunks(CHUNK) {
            let mut g = Graph::new();
            let z = self.item_embeddings(&mut g, comp, chunk, ds)?;
            data.extend_from_slice(g.value(z).data());
        }
        Ok(Tensor::new(vec![ds.n_items(), d], data)?)
    }

    /// Last-position outputs (dropout off) for each user's input sequence,
    /// as selected by `input`.
    pub fn user_vectors(
        &self,
        ds: &Dataset,
        input: impl Fn(&UserSequence) -> &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let tables = self.component_tables(ds)?;
        self.user_vectors_with(ds, &tables, input)
    }

    /// Item embedding tables of every group that serves at least one user.
    pub fn component_tables(&self, ds: &Dataset) -> Result<Vec<Option<Arc<Tensor>>>> {
        let used: BTreeSet<usize> = (0..ds.n_users()).map(|u| self.component(u)).collect();
        (0..self.n_components())
            .map(|c| {
                if used.contains(&c) {
                    Ok(Some(Arc::new(self.all_item_embeddings(c, ds)?)))
                } else {
                    Ok(None)
                }
            })
            .collect()
    }

    fn user_vectors_with(
        &self,
        ds: &Dataset,
        tables: &[Option<Arc<Tensor>>],
        input: impl Fn(&UserSequence) -> &[usize],
    ) -> Result<Vec<Vec<f64>>> {
        let mut out = vec![Vec::new(); ds.n_users()];
        for (comp, z) in tables.iter().enumerate() {
            let Some(z) = z else { continue };
            let users: Vec<usize> = (0..ds.n_users())
                .filter(|&u| self.component(u) == comp)
                .collect();
            for chunk in users.chunks(64) {
                let mut g = Graph::new();
                let zv = g.constant_shared(Arc::clone(z));
                let rows: Vec<Vec<usize>> = chunk
                    .iter()
                    .map(|&u| {
                        let s = input(&ds.users()[u]);
                        s[s.len().saturating_sub(self.max_items())..].to_vec()
                    })
                    .collect();
                let (h, lens, l) = self.sequence_forward(&mut g, zv, &rows, chunk, None)?;
                let hv = g.value(h);
                for (b, &u) in chunk.iter().enumerate() {
                    out[u] = hv.row(b * l + lens[b] - 1).to_vec();
                }
            }
        }
        Ok(out)
    }

    /// Leave-one-out ranking over the full catalogue. Items already in the
    /// input history are excluded when `exclude_seen` is set; the target
    /// never is.
    pub fn evaluate(&self, ds: &Dataset, split: Split, ks: &[usize]) -> Result<Metrics> {
        fn history(u: &UserSequence, split: Split) -> &[usize] {
            match split {
                Split::Valid => u.train(),
                Split::Test => u.train_and_valid(),
            }
        }
        let tables = self.component_tables(ds)?;
        let reps = self.user_vectors_with(ds, &tables, |u| history(u, split))?;
        let mut ranks = Vec::with_capacity(ds.n_users());
        let mut excluded = vec![false; ds.n_items()];
        for (u, seq) in ds.users().iter().enumerate() {
            let z = tables[self.component(u)]
                .as_ref()
                .expect("table for a served group");
            let target = match split {
                Split::Valid => seq.valid(),
                Split::Test => seq.test(),
            };
            let hist = if self.config.exclude_seen {
                history(seq, split)
            } else {
                &[]
            };
            hist.iter().for_each(|&i| excluded[i] = true);
            excluded[target] = false;
            ranks.push(rank_of(target, &reps[u], z, &excluded));
            hist.iter().for_each(|&i| excluded[i] = false);
        }
        Ok(Metrics::from_ranks(ranks, ks))
    }

    /// Every non-encoder parameter.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut out = Vec::new();
        for gc in self.registry.iter() {
            out.extend(gc.params());
        }
        out.extend(self.table.params());
        out.extend(self.sasrec.params());
        if let Some(p) = &self.personal {
            out.extend(p.params());
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = Vec::new();
        for gc in self.registry.iter_mut() {
            out.extend(gc.params_mut());
        }
        out.extend(self.table.params_mut());
        out.extend(self.sasrec.params_mut());
        if let Some(p) = &mut self.personal {
            out.extend(p.params_mut());
        }
        out
    }

    /// Parameters an update for group `comp` may touch.
    pub fn trainable_for(&mut self, comp: usize) -> Vec<&mut Parameter> {
        let wo_mm = self.method == Method::WoMm;
        let mut out: Vec<&mut Parameter> = Vec::new();
        if !wo_mm {
            out.extend(self.registry.get_mut(comp).params_mut());
        }
        out.extend(self.table.params_mut());
        out.extend(self.sasrec.params_mut());
        if let Some(p) = &mut self.personal {
            out.extend(p.params_mut());
        }
        out
    }

    /// Names of every tensor this method is allowed to change.
    pub fn declared_trainable(&self) -> BTreeSet<String> {
        let mut names = BTreeSet::new();
        if self.method != Method::WoMm {
            for gc in self.registry.iter() {
                names.extend(gc.params().iter().map(|p| p.name().to_string()));
            }
        }
        for p in self.table.params().into_iter().chain(self.sasrec.params()) {
            names.insert(p.name().to_string());
        }
        if let Some(pv) = &self.personal {
            names.extend(pv.params().iter().map(|p| p.name().to_string()));
        }
        names
    }

    /// Per-tensor checksums over the encoder and every other parameter.
    pub fn checksums(&self) -> Vec<(String, u64)> {
        self.encoder
            .params()
            .into_iter()
            .chain(self.params())
            .map(|p| (p.name().to_string(), p.checksum()))
            .collect()
    }

    pub fn trainable_count(&self) -> usize {
        let names = self.declared_trainable();
        self.params()
            .iter()
            .filter(|p| names.contains(p.name()))
            .map(|p| p.numel())
            .sum()
    }
}
