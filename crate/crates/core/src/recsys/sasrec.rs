use perpeft_autodiff::{AttentionSpec, Graph, Parameter, Var};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{normal, LayerNorm, Linear, Module};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SasrecConfig {
    pub dim: usize,
    pub max_len: usize,
    pub n_blocks: usize,
    pub n_heads: usize,
    pub dropout: f64,
}

impl Default for SasrecConfig {
    fn default() -> Self {
        Self {
            dim: 32,
            max_len: 10,
            n_blocks: 2,
            n_heads: 4,
            dropout: 0.3,
        }
    }
}

#[derive(Clone, Debug)]
struct Block {
    ln1: LayerNorm,
    q: Linear,
    k: Linear,
    v: Linear,
    o: Linear,
    ln2: LayerNorm,
    ff1: Linear,
    ff2: Linear,
}

/// Causal self-attention sequence model over item embeddings.
#[derive(Clone, Debug)]
pub struct Sasrec {
    config: SasrecConfig,
    pos: Parameter,
    blocks: Vec<Block>,
    lnf: LayerNorm,
}

impl Sasrec {
    pub fn new(config: &SasrecConfig, rng: &mut impl Rng) -> Result<Self> {
        let d = config.dim;
        if d == 0 || config.n_heads == 0 || !d.is_multiple_of(config.n_heads) || config.max_len == 0
        {
            return Err(Error::Config(format!(
                "SASRec dim {d} must be a positive multiple of {} heads",
                config.n_heads
            )));
        }
        if !(0.0..1.0).contains(&config.dropout) {
            return Err(Error::Config(format!(
                "dropout {} outside [0, 1)",
                config.dropout
            )));
        }
        let blocks = (0..config.n_blocks)
            .map(|b| {
                let p = format!("sasrec/block{b}");
                Block {
                    ln1: LayerNorm::new(&format!("{p}/ln1"), d, true),
                    q: Linear::trainable(&format!("{p}/q"), d, d, rng),
                    k: Linear::trainable(&format!("{p}/k"), d, d, rng),
                    v: Linear::trainable(&format!("{p}/v"), d, d, rng),
                    o: Linear::trainable(&format!("{p}/o"), d, d, rng),
                    ln2: LayerNorm::new(&format!("{p}/ln2"), d, true),
                    ff1: Linear::trainable(&format!("{p}/ff1"), d, d, rng),
                    ff2: Linear::trainable(&format!("{p}/ff2"), d, d, rng),
                }
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            pos: Parameter::trainable("sasrec/pos", normal(&[config.max_len, d], 0.1, rng)),
            blocks,
            lnf: LayerNorm::new("sasrec/lnf", d, true),
        })
    }

    pub fn config(&self) -> &SasrecConfig {
        &self.config
    }

    /// Runs right-padded sequences `[batch * block_len, dim]`. Row
    /// `b * block_len + p` is position `p` of sequence `b`; positions at or
    /// beyond `lengths[b]` are padding and never attended to. Dropout is
    /// active only when `train_rng` is given.
    pub fn forward(
        &self,
        g: &mut Graph,
        input: Var,
        lengths: &[usize],
        block_len: usize,
        mut train_rng: Option<&mut dyn rand::RngCore>,
    ) -> Result<Var> {
        if block_len == 0 || block_len > self.config.max_len {
            return Err(Error::Contract(format!(
                "sequence length {block_len} outside 1..={}",
                self.config.max_len
            )));
        }
        if let Some(&bad) = lengths.iter().find(|&&l| l == 0 || l > block_len) {
            return Err(Error::Contract(format!(
                "sequence length {bad} outside 1..={block_len}"
            )));
        }
        let rows = g.value(input).rows();
        if rows != lengths.len() * block_len {
            return Err(Error::Contract(format!(
                "{rows} input rows for {} sequences of length {block_len}",
                lengths.len()
            )));
        }
        let rate = if train_rng.is_some() {
            self.config.dropout
        } else {
            0.0
        };
        let mut dropout = |g: &mut Graph, v: Var| -> Result<Var> {
            match train_rng.as_deref_mut() {
                Some(rng) if rate > 0.0 => Ok(g.dropout(v, rate, rng)?),
                _ => Ok(v),
            }
        };
        let pos = g.param(&self.pos);
        let pos_idx: Vec<Option<usize>> = lengths
            .iter()
            .flat_map(|_| (0..block_len).map(Some))
            .collect();
        let pos = g.gather_rows(pos, &pos_idx)?;
        let x = g.add(input, pos)?;
        let mut x = dropout(g, x)?;
        let spec = AttentionSpec {
            n_heads: self.config.n_heads,
            block_len,
            causal: true,
            key_mask: Some(
                lengths
                    .iter()
                    .flat_map(|&l| (0..block_len).map(move |p| p < l))
                    .collect(),
            ),
        };
        for b in &self.blocks {
            let h = b.ln1.forward(g, x)?;
            let q = b.q.forward(g, h)?;
            let k = b.k.forward(g, h)?;
            let v = b.v.forward(g, h)?;
            let (a, _) = g.attention(q, k, v, spec.clone())?;
            let a = b.o.forward(g, a)?;
            let a = dropout(g, a)?;
            x = g.add(x, a)?;
            let h = b.ln2.forward(g, x)?;
            let f = b.ff1.forward(g, h)?;
            let f = g.relu(f);
            let f = dropout(g, f)?;
            let f = b.ff2.forward(g, f)?;
            let f = dropout(g, f)?;
            x = g.add(x, f)?;
        }
        Ok(self.lnf.forward(g, x)?)
    }
}

impl Module for Sasrec {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.pos];
        for b in &self.blocks {
            out.extend([&b.ln1.gamma, &b.ln1.beta]);
            for l in [&b.q, &b.k, &b.v, &b.o] {
                out.extend([&l.weight, &l.bias]);
            }
            out.extend([&b.ln2.gamma, &b.ln2.beta]);
            for l in [&b.ff1, &b.ff2] {
                out.extend([&l.weight, &l.bias]);
            }
        }
        out.extend([&self.lnf.gamma, &self.lnf.beta]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.pos];
        for b in &mut self.blocks {
            out.extend([&mut b.ln1.gamma, &mut b.ln1.beta]);
            for l in [&mut b.q, &mut b.k, &mut b.v, &mut b.o] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
            out.extend([&mut b.ln2.gamma, &mut b.ln2.beta]);
            for l in [&mut b.ff1, &mut b.ff2] {
                out.extend([&mut l.weight, &mut l.bias]);
            }
        }
        out.extend([&mut self.lnf.gamma, &mut self.lnf.beta]);
        out
    }
}
