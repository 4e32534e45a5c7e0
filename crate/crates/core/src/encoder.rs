//! Frozen dual-tower encoder standing in for a pretrained image-text model.
//!
//! The text tower embeds title tokens, appends an EOS token and reads its
//! output at the EOS position. The vision tower projects precomputed patch
//! features and mean-pools over patches. Both towers are pre-LN transformer
//! stacks with bidirectional attention. All weights are a pure function of
//! the config and are never trained; PEFT attachments hook into the forward
//! pass at the sites described in [`crate::peft`].

use std::collections::HashMap;
use std::sync::Arc;

use perpeft_autodiff::{AttentionSpec, Graph, Parameter, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::data::ItemRecord;
use crate::error::{Error, Result};
use crate::nn::{fan_in, normal, LayerNorm, Module};
use crate::peft::{LayerAdapter, PeftAttachment, TowerAdapter};
use crate::seed;

pub const PAD_ID: usize = 0;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub vocab_size: usize,
    pub max_text_len: usize,
    pub n_patches: usize,
    pub patch_dim: usize,
    pub d_prime: usize,
    pub seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 1000,
            max_text_len: 16,
            n_patches: 16,
            patch_dim: 64,
            d_prime: 64,
            seed: 0,
        }
    }
}

impl EncoderConfig {
    /// A small encoder sized for quick experiments and tests.
    pub fn desk() -> Self {
        Self {
            d_model: 16,
            n_layers: 2,
            n_heads: 4,
            vocab_size: 64,
            max_text_len: 8,
            n_patches: 4,
            patch_dim: 8,
            d_prime: 16,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.d_model == 0 || self.n_heads == 0 || !self.d_model.is_multiple_of(self.n_heads) {
            return bad(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            ));
        }
        if self.d_prime == 0 || self.n_layers == 0 || self.n_patches == 0 || self.patch_dim == 0 {
            return bad("d_prime, n_layers, n_patches and patch_dim must be positive".into());
        }
        if self.vocab_size < 3 {
            return bad("vocab_size must leave room for pad, EOS and one title token".into());
        }
        if self.max_text_len < 2 {
            return bad("max_text_len must hold at least one token plus EOS".into());
        }
        Ok(())
    }

    pub fn eos_id(&self) -> usize {
        self.vocab_size - 1
    }

    pub fn ffn_dim(&self) -> usize {
        4 * self.d_model
    }

    pub fn block_len(&self, tower: Tower) -> usize {
        match tower {
            Tower::Text => self.max_text_len,
            Tower::Vision => self.n_patches,
        }
    }

    /// Every frozen parameter shape, in construction order.
    pub fn parameter_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (dm, ff) = (self.d_model, self.ffn_dim());
        let mut out = Vec::new();
        for tower in Tower::ALL {
            let t = tower.as_str();
            match tower {
                Tower::Text => out.push((format!("encoder/{t}/input"), vec![self.vocab_size, dm])),
                Tower::Vision => out.push((format!("encoder/{t}/input"), vec![self.patch_dim, dm])),
            }
            out.push((format!("encoder/{t}/pos"), vec![self.block_len(tower), dm]));
            for l in 0..self.n_layers {
                let p = format!("encoder/{t}/layer{l}");
                for w in ["wq", "wk", "wv", "wo"] {
                    out.push((format!("{p}/{w}"), vec![dm, dm]));
                }
                for ln in ["ln1", "ln2"] {
                    out.push((format!("{p}/{ln}/gamma"), vec![dm]));
                    out.push((format!("{p}/{ln}/beta"), vec![dm]));
                }
                out.push((format!("{p}/ff1/w"), vec![dm, ff]));
                out.push((format!("{p}/ff1/b"), vec![ff]));
                out.push((format!("{p}/ff2/w"), vec![ff, dm]));
                out.push((format!("{p}/ff2/b"), vec![dm]));
            }
            out.push((format!("encoder/{t}/lnf/gamma"), vec![dm]));
            out.push((format!("encoder/{t}/lnf/beta"), vec![dm]));
            out.push((format!("encoder/{t}/head"), vec![dm, self.d_prime]));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Tower {
    Text,
    Vision,
}

impl Tower {
    pub const ALL: [Tower; 2] = [Tower::Text, Tower::Vision];

    pub fn as_str(self) -> &'static str {
        match self {
            Tower::Text => "text",
            Tower::Vision => "vision",
        }
    }
}

#[derive(Clone, Debug)]
pub struct TowerLayer {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub ln1: LayerNorm,
    pub ln2: LayerNorm,
    pub ff1_w: Parameter,
    pub ff1_b: Parameter,
    pub ff2_w: Parameter,
    pub ff2_b: Parameter,
}

#[derive(Clone, Debug)]
pub struct TowerWeights {
    /// Token embedding table (text) or patch projection (vision).
    pub input: Parameter,
    pub pos: Parameter,
    pub layers: Vec<TowerLayer>,
    pub lnf: LayerNorm,
    pub head: Parameter,
}

#[derive(Clone, Debug)]
pub struct EncoderModel {
    config: EncoderConfig,
    pub text: TowerWeights,
    pub vision: TowerWeights,
}

impl Module for TowerWeights {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = vec![&self.input, &self.pos];
        for l in &self.layers {
            out.extend([&l.wq, &l.wk, &l.wv, &l.wo]);
            out.extend([&l.ln1.gamma, &l.ln1.beta, &l.ln2.gamma, &l.ln2.beta]);
            out.extend([&l.ff1_w, &l.ff1_b, &l.ff2_w, &l.ff2_b]);
        }
        out.extend([&self.lnf.gamma, &self.lnf.beta, &self.head]);
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = vec![&mut self.input, &mut self.pos];
        for l in &mut self.layers {
            out.extend([&mut l.wq, &mut l.wk, &mut l.wv, &mut l.wo]);
            out.extend([
                &mut l.ln1.gamma,
                &mut l.ln1.beta,
                &mut l.ln2.gamma,
                &mut l.ln2.beta,
            ]);
            out.extend([&mut l.ff1_w, &mut l.ff1_b, &mut l.ff2_w, &mut l.ff2_b]);
        }
        out.extend([&mut self.lnf.gamma, &mut self.lnf.beta, &mut self.head]);
        out
    }
}

impl Module for EncoderModel {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.text.params();
        out.extend(self.vision.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self.text.params_mut();
        out.extend(self.vision.params_mut());
        out
    }
}

/// Padded token buffer for one title. Positions `len..` are padding.
#[derive(Clone, Debug, PartialEq)]
pub struct TextInput {
    pub ids: Vec<usize>,
    /// Real positions including EOS.
    pub len: usize,
}

impl TextInput {
    pub fn eos_position(&self) -> usize {
        self.len - 1
    }

    pub fn title_len(&self) -> usize {
        self.len - 1
    }
}

/// Per-item intermediates of one forward pass.
#[derive(Clone, Debug)]
pub struct EncoderTrace {
    /// Pooled hidden state after each layer, per tower.
    pub hidden: HashMap<Tower, Vec<Vec<f64>>>,
    /// Last-layer attention weights `[heads, L, L]`, per tower.
    pub attention: HashMap<Tower, Tensor>,
    pub eos_position: usize,
    pub title_len: usize,
}

/// Output of a batched forward pass recorded on a graph.
pub struct EncodedBatch {
    /// Visual embeddings `[n, d′]`.
    pub x: Var,
    /// Textual embeddings `[n, d′]`.
    pub y: Var,
    /// Absent when every frozen feature was served from a [`FrozenCache`].
    pub trace: Option<BatchTrace>,
}

pub struct BatchTrace {
    pub hidden: HashMap<Tower, Vec<Var>>,
    pub attention: HashMap<Tower, Arc<Tensor>>,
    pub text_inputs: Vec<TextInput>,
}

impl EncoderModel {
    pub fn build(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::rng(config.seed, "encoder");
        let text = Self::build_tower(config, Tower::Text, &mut rng);
        let vision = Self::build_tower(config, Tower::Vision, &mut rng);
        Ok(Self {
            config: config.clone(),
            text,
            vision,
        })
    }

    fn build_tower(c: &EncoderConfig, tower: Tower, rng: &mut impl rand::Rng) -> TowerWeights {
        let t = tower.as_str();
        let (dm, ff) = (c.d_model, c.ffn_dim());
        let frozen = |name: String, v: Tensor| Parameter::frozen(name, v);
        let input = match tower {
            Tower::Text => normal(&[c.vocab_size, dm], 1.0, rng),
            Tower::Vision => fan_in(c.patch_dim, dm, rng),
        };
        let input = frozen(format!("encoder/{t}/input"), input);
        let pos = frozen(
            format!("encoder/{t}/pos"),
            normal(&[c.block_len(tower), dm], 0.5, rng),
        );
        let layers = (0..c.n_layers)
            .map(|l| {
                let p = format!("encoder/{t}/layer{l}");
                TowerLayer {
                    wq: frozen(format!("{p}/wq"), fan_in(dm, dm, rng)),
                    wk: frozen(format!("{p}/wk"), fan_in(dm, dm, rng)),
                    wv: frozen(format!("{p}/wv"), fan_in(dm, dm, rng)),
                    wo: frozen(format!("{p}/wo"), fan_in(dm, dm, rng)),
                    ln1: LayerNorm::new(&format!("{p}/ln1"), dm, false),
                    ln2: LayerNorm::new(&format!("{p}/ln2"), dm, false),
                    ff1_w: frozen(format!("{p}/ff1/w"), fan_in(dm, ff, rng)),
                    ff1_b: frozen(format!("{p}/ff1/b"), normal(&[ff], 0.1, rng)),
                    ff2_w: frozen(format!("{p}/ff2/w"), fan_in(ff, dm, rng)),
                    ff2_b: frozen(format!("{p}/ff2/b"), normal(&[dm], 0.1, rng)),
                }
            })
            .collect();
        TowerWeights {
            input,
            pos,
            layers,
            lnf: LayerNorm::new(&format!("encoder/{t}/lnf"), dm, false),
            head: frozen(format!("encoder/{t}/head"), fan_in(dm, c.d_prime, rng)),
        }
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.config
    }

    pub fn tower(&self, tower: Tower) -> &TowerWeights {
        match tower {
            Tower::Text => &self.text,
            Tower::Vision => &self.vision,
        }
    }

    pub fn tower_mut(&mut self, tower: Tower) -> &mut TowerWeights {
        match tower {
            Tower::Text => &mut self.text,
            Tower::Vision => &mut self.vision,
        }
    }

    /// Builds the padded token buffer: title (truncated), EOS, then padding.
    pub fn text_input(&self, item: &ItemRecord) -> Result<TextInput> {
        let c = &self.config;
        if let Some(&bad) = item.text_tokens.iter().find(|&&t| t >= c.vocab_size) {
            return Err(Error::Data(format!(
                "item {}: token {bad} outside vocabulary of {}",
                item.item_id, c.vocab_size
            )));
        }
        let title = &item.text_tokens[..item.text_tokens.len().min(c.max_text_len - 1)];
        let mut ids = title.to_vec();
        ids.push(c.eos_id());
        let len = ids.len();
        ids.resize(c.max_text_len, PAD_ID);
        Ok(TextInput { ids, len })
    }

    fn check_patches(&self, item: &ItemRecord) -> Result<()> {
        let c = &self.config;
        if item.patches.len() != c.n_patches || item.patches.iter().any(|p| p.len() != c.patch_dim)
        {
            return Err(Error::Data(format!(
                "item {}: expected {}×{} patches",
                item.item_id, c.n_patches, c.patch_dim
            )));
        }
        Ok(())
    }

    /// Encodes one item and returns plain vectors plus the full trace.
    pub fn encode(
        &self,
        peft: Option<&PeftAttachment>,
        item: &ItemRecord,
    ) -> Result<(Vec<f64>, Vec<f64>, EncoderTrace)> {
        let text = self.text_input(item)?;
        self.encode_text_input(peft, item, text)
    }

    /// Like [`EncoderModel::encode`] with an explicit token buffer.
    pub fn encode_text_input(
        &self,
        peft: Option<&PeftAttachment>,
        item: &ItemRecord,
        text: TextInput,
    ) -> Result<(Vec<f64>, Vec<f64>, EncoderTrace)> {
        self.check_patches(item)?;
        let mut g = Graph::new();
        let out = self.forward_inputs(&mut g, peft, &[item], vec![text.clone()])?;
        let trace = out.trace.expect("uncached forward has a trace");
        let hidden = trace
            .hidden
            .iter()
            .map(|(t, vs)| (*t, vs.iter().map(|v| g.value(*v).data().to_vec()).collect()))
            .collect();
        let attention = trace
            .attention
            .iter()
            .map(|(t, a)| {
                let s = a.shape();
                let single = Tensor::new(s[1..].to_vec(), a.data().to_vec()).expect("shape");
                (*t, single)
            })
            .collect();
        Ok((
            g.value(out.x).data().to_vec(),
            g.value(out.y).data().to_vec(),
            EncoderTrace {
                hidden,
                attention,
                eos_position: text.eos_position(),
                title_len: text.title_len(),
            },
        ))
    }

    /// Records a batched forward pass. With a SideNet attachment (or none)
    /// and a cache holding every item, the frozen towers are skipped.
    pub fn encode_batch(
        &self,
        g: &mut Graph,
        peft: Option<&PeftAttachment>,
        items: &[&ItemRecord],
        cache: Option<&FrozenCache>,
    ) -> Result<EncodedBatch> {
        let frozen_only = peft.is_none_or(|p| p.kind() == crate::peft::PeftKind::SideNet);
        if let (true, Some(cache)) = (frozen_only, cache) {
            if let Some(b) = self.encode_from_cache(g, peft, items, cache)? {
                return Ok(b);
            }
        }
        let texts = items
            .iter()
            .map(|it| self.text_input(it))
            .collect::<Result<Vec<_>>>()?;
        for it in items {
            self.check_patches(it)?;
        }
        self.forward_inputs(g, peft, items, texts)
    }

    fn forward_inputs(
        &self,
        g: &mut Graph,
        peft: Option<&PeftAttachment>,
        items: &[&ItemRecord],
        texts: Vec<TextInput>,
    ) -> Result<EncodedBatch> {
        let c = &self.config;
        let n = items.len();
        let mut hidden = HashMap::new();
        let mut attention = HashMap::new();
        let mut pooled = HashMap::new();

        // text tower
        let l = c.max_text_len;
        let ids: Vec<Option<usize>> = texts
            .iter()
            .flat_map(|t| t.ids.iter().map(|&i| Some(i)))
            .collect();
        let emb = g.param(&self.text.input);
        let tok = g.gather_rows(emb, &ids)?;
        let key_mask: Vec<bool> = texts
            .iter()
            .flat_map(|t| (0..l).map(move |p| p < t.len))
            .collect();
        let eos_rows: Vec<Option<usize>> = texts
            .iter()
            .enumerate()
            .map(|(i, t)| Some(i * l + t.eos_position()))
            .collect();
        let pool_text = move |g: &mut Graph, v: Var| g.gather_rows(v, &eos_rows);
        let (t_out, t_hidden, t_attn) = self.tower_forward(
            g,
            Tower::Text,
            tok,
            n,
            Some(key_mask),
            peft.map(|p| p.tower(Tower::Text)),
            &pool_text,
        )?;
        hidden.insert(Tower::Text, t_hidden);
        attention.insert(Tower::Text, t_attn);
        pooled.insert(Tower::Text, t_out);

        // vision tower
        let p = c.n_patches;
        let mut patch_data = Vec::with_capacity(n * p * c.patch_dim);
        for it in items {
            for row in &it.patches {
                patch_data.extend_from_slice(row);
            }
        }
        let patches = g.constant(Tensor::new(vec![n * p, c.patch_dim], patch_data)?);
        let proj = g.param(&self.vision.input);
        let v_in = g.matmul(patches, proj)?;
        let pool_vision = move |g: &mut Graph, v: Var| g.block_mean(v, p);
        let (v_out, v_hidden, v_attn) = self.tower_forward(
            g,
            Tower::Vision,
            v_in,
            n,
            None,
            peft.map(|p| p.tower(Tower::Vision)),
            &pool_vision,
        )?;
        hidden.insert(Tower::Vision, v_hidden);
        attention.insert(Tower::Vision, v_attn);
        pooled.insert(Tower::Vision, v_out);

        Ok(EncodedBatch {
            x: pooled[&Tower::Vision],
            y: pooled[&Tower::Text],
            trace: Some(BatchTrace {
                hidden,
                attention,
                text_inputs: texts,
            }),
        })
    }

    /// Runs one tower on `[n*L, d_model]` inputs (positions not yet added).
    #[allow(clippy::too_many_arguments)]
    fn tower_forward(
        &self,
        g: &mut Graph,
        tower: Tower,
        input: Var,
        n: usize,
        key_mask: Option<Vec<bool>>,
        adapter: Option<&TowerAdapter>,
        pool: &dyn Fn(&mut Graph, Var) -> perpeft_autodiff::Result<Var>,
    ) -> Result<(Var, Vec<Var>, Arc<Tensor>)> {
        let c = &self.config;
        let w = self.tower(tower);
        let l = c.block_len(tower);
        let pos_table = g.param(&w.pos);
        let pos_idx: Vec<Option<usize>> = (0..n).flat_map(|_| (0..l).map(Some)).collect();
        let pos = g.gather_rows(pos_table, &pos_idx)?;
        let mut x = g.add(input, pos)?;
        let spec = AttentionSpec {
            n_heads: c.n_heads,
            block_len: l,
            causal: false,
            key_mask,
        };
        let mut hidden = Vec::with_capacity(w.layers.len());
        let mut last_attn = None;
        for (i, layer) in w.layers.iter().enumerate() {
            let la = adapter.map(|a| &a.layers[i]);
            let (nx, attn) = layer_forward(g, layer, x, spec.clone(), la)?;
            x = nx;
            hidden.push(pool(g, x)?);
            last_attn = Some(attn);
        }
        let pooled = pool(g, x)?;
        let normed = w.lnf.forward(g, pooled)?;
        let head = g.param(&w.head);
        let mut out = g.matmul(normed, head)?;
        if let Some(side) = adapter.filter(|a| a.up.is_some()) {
            let delta = side_network(g, side, &hidden)?;
            out = g.add(out, delta)?;
        }
        Ok((out, hidden, last_attn.expect("at least one layer")))
    }

    fn encode_from_cache(
        &self,
        g: &mut Graph,
        peft: Option<&PeftAttachment>,
        items: &[&ItemRecord],
        cache: &FrozenCache,
    ) -> Result<Option<EncodedBatch>> {
        let mut outs = HashMap::new();
        for tower in Tower::ALL {
            let mut entries = Vec::with_capacity(items.len());
            for it in items {
                match cache.get(it.item_id, tower) {
                    Some(e) => entries.push(e),
                    None => return Ok(None),
                }
            }
            let d = self.config.d_prime;
            let base: Vec<f64> = entries
                .iter()
                .flat_map(|e| e.output.iter().copied())
                .collect();
            let mut out = g.constant(Tensor::new(vec![items.len(), d], base)?);
            if let Some(att) = peft {
                let dm = self.config.d_model;
                let hidden = (0..self.config.n_layers)
                    .map(|l| {
                        let data = entries
                            .iter()
                            .flat_map(|e| e.hidden[l].iter().copied())
                            .collect();
                        Ok(g.constant(Tensor::new(vec![items.len(), dm], data)?))
                    })
                    .collect::<Result<Vec<_>>>()?;
                let delta = side_network(g, att.tower(tower), &hidden)?;
                out = g.add(out, delta)?;
            }
            outs.insert(tower, out);
        }
        Ok(Some(EncodedBatch {
            x: outs[&Tower::Vision],
            y: outs[&Tower::Text],
            trace: None,
        }))
    }
}

fn layer_forward(
    g: &mut Graph,
    layer: &TowerLayer,
    x: Var,
    spec: AttentionSpec,
    adapter: Option<&LayerAdapter>,
) -> Result<(Var, Arc<Tensor>)> {
    let h = layer.ln1.forward(g, x)?;
    let (wq, wk, wv, wo) = (
        g.param(&layer.wq),
        g.param(&layer.wk),
        g.param(&layer.wv),
        g.param(&layer.wo),
    );
    let mut q = g.matmul(h, wq)?;
    let mut k = g.matmul(h, wk)?;
    let mut v = g.matmul(h, wv)?;
    match adapter {
        Some(LayerAdapter::Lora { q: lq, v: lv }) => {
            q = lq.apply(g, h, q)?;
            v = lv.apply(g, h, v)?;
        }
        Some(LayerAdapter::Ia3 { k: lk, v: lv, .. }) => {
            let (gk, gv) = (g.param(lk), g.param(lv));
            k = g.mul(k, gk)?;
            v = g.mul(v, gv)?;
        }
        _ => {}
    }
    let (a, probs) = g.attention(q, k, v, spec)?;
    let o = g.matmul(a, wo)?;
    let x = g.add(x, o)?;
    let h2 = layer.ln2.forward(g, x)?;
    let (w1, b1, w2, b2) = (
        g.param(&layer.ff1_w),
        g.param(&layer.ff1_b),
        g.param(&layer.ff2_w),
        g.param(&layer.ff2_b),
    );
    let f = g.matmul(h2, w1)?;
    let f = g.add(f, b1)?;
    let mut f = g.gelu(f);
    if let Some(LayerAdapter::Ia3 { ff, .. }) = adapter {
        let gf = g.param(ff);
        f = g.mul(f, gf)?;
    }
    let f = g.matmul(f, w2)?;
    let f = g.add(f, b2)?;
    Ok((g.add(x, f)?, probs))
}

/// Gated side path over pooled frozen intermediates:
/// `s ← σ(g)·s + (1−σ(g))·(hidden·down)` per layer, then `s·up`.
fn side_network(g: &mut Graph, adapter: &TowerAdapter, hidden: &[Var]) -> Result<Var> {
    let up = adapter
        .up
        .as_ref()
        .expect("side adapter has an up-projection");
    let mut state: Option<Var> = None;
    for (layer, h) in adapter.layers.iter().zip(hidden) {
        let LayerAdapter::Side { down, gate } = layer else {
            return Err(Error::Contract("side network over non-side adapter".into()));
        };
        let (dw, gw) = (g.param(down), g.param(gate));
        let injected = g.matmul(*h, dw)?;
        let keep = g.sigmoid(gw);
        let fresh = g.affine(keep, -1.0, 1.0);
        let injected = g.mul(injected, fresh)?;
        state = Some(match state {
            None => injected,
            Some(s) => {
                let kept = g.mul(s, keep)?;
                g.add(kept, injected)?
            }
        });
    }
    let uw = g.param(up);
    Ok(g.matmul(state.expect("at least one layer"), uw)?)
}

/// Frozen per-item features: pooled hidden states and tower outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct CachedTower {
    pub hidden: Vec<Vec<f64>>,
    pub output: Vec<f64>,
}

/// Cache of frozen-encoder features keyed by `(item_id, tower)`.
///
/// Valid for the frozen model and for SideNet attachments, whose side path
/// reads these features without altering them.
#[derive(Clone, Debug, Default)]
pub struct FrozenCache {
    entries: HashMap<(u64, Tower), CachedTower>,
}

impl FrozenCache {
    pub fn build(model: &EncoderModel, items: &[ItemRecord]) -> Result<Self> {
        const CHUNK: usize = 64;
        let mut entries = HashMap::with_capacity(items.len() * 2);
        for chunk in items.chunks(CHUNK) {
            let refs: Vec<&ItemRecord> = chunk.iter().collect();
            let mut g = Graph::new();
            let out = model.encode_batch(&mut g, None, &refs, None)?;
            let trace = out.trace.expect("uncached");
            for (tower, var) in [(Tower::Vision, out.x), (Tower::Text, out.y)] {
                let outputs = g.value(var);
                let hidden: Vec<&Tensor> =
                    trace.hidden[&tower].iter().map(|v| g.value(*v)).collect();
                for (i, it) in chunk.iter().enumerate() {
                    entries.insert(
                        (it.item_id, tower),
                        CachedTower {
                            hidden: hidden.iter().map(|h| h.row(i).to_vec()).collect(),
                            output: outputs.row(i).to_vec(),
                        },
                    );
                }
            }
        }
        Ok(Self { entries })
    }

    pub fn get(&self, item_id: u64, tower: Tower) -> Option<&CachedTower> {
        self.entries.get(&(item_id, tower))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

/// Head-averaged last-layer attention from the EOS query to each title
/// token, renormalized over title positions.
pub fn eos_attention(trace: &EncoderTrace) -> Vec<f64> {
    let attn = &trace.attention[&Tower::Text];
    let (h, l) = (attn.shape()[0], attn.shape()[1]);
    let q = trace.eos_position;
    let mut dist = vec![0.0; trace.title_len];
    for head in 0..h {
        let row = &attn.data()[(head * l + q) * l..][..l];
        for (d, w) in dist.iter_mut().zip(row) {
            *d += w / h as f64;
        }
    }
    let z: f64 = dist.iter().sum();
    if z > 0.0 {
        for d in &mut dist {
            *d /= z;
        }
    }
    dist
}
