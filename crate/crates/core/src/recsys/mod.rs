//! Item-embedding composition, the sequential backbone, losses and ranking metrics.

mod loss;
mod metrics;
mod sasrec;

pub use loss::{bce_loss, loss_global, loss_personalized, loss_value, LossMode};
pub use metrics::{ndcg_gain, rank_of, score_all, top_k, Metrics};
pub use sasrec::{Sasrec, SasrecConfig};

use perpeft_autodiff::{Graph, Parameter, Result as AdResult, Var};
use rand::Rng;

use crate::nn::{normal, Linear, Module};

pub const DEFAULT_ITEM_DIM: usize = 32;
pub const DEFAULT_PROJECTOR_HIDDEN: usize = 64;

/// Free learnable vector per item, shared by every group.
#[derive(Clone, Debug)]
pub struct TransductiveTable {
    pub h: Parameter,
}

impl TransductiveTable {
    pub const NAME: &'static str = "transductive/h";

    pub fn new(n_items: usize, dim: usize, rng: &mut impl Rng) -> Self {
        Self {
            h: Parameter::trainable(Self::NAME, normal(&[n_items, dim], 0.1, rng)),
        }
    }

    pub fn n_items(&self) -> usize {
        self.h.value().rows()
    }

    pub fn dim(&self) -> usize {
        self.h.value().cols()
    }

    pub fn rows(&self, g: &mut Graph, items: &[usize]) -> AdResult<Var> {
        let h = g.param(&self.h);
        let idx: Vec<Option<usize>> = items.iter().map(|&i| Some(i)).collect();
        g.gather_rows(h, &idx)
    }
}

impl Module for TransductiveTable {
    fn params(&self) -> Vec<&Parameter> {
        vec![&self.h]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.h]
    }
}

/// Two-layer MLP mapping concatenated tower outputs `[x‖y]` to item space.
#[derive(Clone, Debug)]
pub struct Projector {
    label: String,
    pub first: Linear,
    pub second: Linear,
}

impl Projector {
    pub fn new(
        label: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            label: label.to_string(),
            first: Linear::trainable(&format!("projector/{label}/l1"), input, hidden, rng),
            second: Linear::trainable(&format!("projector/{label}/l2"), hidden, output, rng),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn input_dim(&self) -> usize {
        self.first.weight.value().rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.first.weight.value().cols()
    }

    pub fn output_dim(&self) -> usize {
        self.second.weight.value().cols()
    }

    pub fn forward(&self, g: &mut Graph, input: Var) -> AdResult<Var> {
        let h = self.first.forward(g, input)?;
        let h = g.gelu(h);
        self.second.forward(g, h)
    }

    pub fn clone_as(&self, label: &str) -> Self {
        let mut out = self.clone();
        out.replace_prefix(
            &format!("projector/{}/", self.label),
            &format!("projector/{label}/"),
        );
        out.label = label.to_string();
        out
    }

    /// Parameter count of a projector with the given widths.
    pub fn count(input: usize, hidden: usize, output: usize) -> usize {
        input * hidden + hidden + hidden * output + output
    }
}

impl Module for Projector {
    fn params(&self) -> Vec<&Parameter> {
        vec![
            &self.first.weight,
            &self.first.bias,
            &self.second.weight,
            &self.second.bias,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.first.weight,
            &mut self.first.bias,
            &mut self.second.weight,
            &mut self.second.bias,
        ]
    }
}

/// `z = projector([x‖y]) + h[items]`.
pub fn compose_item_embedding(
    g: &mut Graph,
    projector: &Projector,
    x: Var,
    y: Var,
    table: &TransductiveTable,
    items: &[usize],
) -> AdResult<Var> {
    let cat = g.concat_cols(x, y)?;
    let m = projector.forward(g, cat)?;
    let h = table.rows(g, items)?;
    g.add(m, h)
}
