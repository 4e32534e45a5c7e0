//! Attachable PEFT mechanisms and parameter accounting.
//!
//! * LoRA replaces the query and value projections `W` by `W + A·B`, with
//!   `B` zero-initialized and no scaling factor.
//! * (IA)³ rescales keys, values and the first feed-forward activation by
//!   learned gate vectors initialized to one.
//! * SideNet runs a small gated network beside each frozen tower, fed the
//!   pooled hidden state of every layer; its up-projection starts at zero.
//!
//! Every mechanism is applied to both towers and starts as an exact no-op.

use std::fmt;
use std::str::FromStr;

use perpeft_autodiff::{Graph, Parameter, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderModel, Tower};
use crate::error::{Error, Result};
use crate::nn::{fan_in, Module};
use crate::recsys::Projector;
use crate::seed;

pub const DEFAULT_LORA_RANK: usize = 4;
pub const DEFAULT_SIDE_WIDTH: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PeftKind {
    Lora,
    Ia3,
    SideNet,
}

impl PeftKind {
    pub const ALL: [PeftKind; 3] = [PeftKind::Lora, PeftKind::Ia3, PeftKind::SideNet];

    pub fn as_str(self) -> &'static str {
        match self {
            PeftKind::Lora => "lora",
            PeftKind::Ia3 => "ia3",
            PeftKind::SideNet => "sidenet",
        }
    }

    /// Rank (LoRA) or hidden width (SideNet) used when none is given.
    pub fn default_size(self) -> usize {
        match self {
            PeftKind::Lora => DEFAULT_LORA_RANK,
            PeftKind::Ia3 => 0,
            PeftKind::SideNet => DEFAULT_SIDE_WIDTH,
        }
    }
}

impl fmt::Display for PeftKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PeftKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "lora" => Ok(PeftKind::Lora),
            "ia3" | "(ia)3" => Ok(PeftKind::Ia3),
            "sidenet" | "iisan" | "side" => Ok(PeftKind::SideNet),
            other => Err(Error::Contract(format!("unknown PEFT kind '{other}'"))),
        }
    }
}

/// Low-rank update `A·B` added to a frozen projection.
#[derive(Clone, Debug)]
pub struct LoraPair {
    pub a: Parameter,
    pub b: Parameter,
}

impl LoraPair {
    /// `base + (h·A)·B`.
    pub fn apply(&self, g: &mut Graph, h: Var, base: Var) -> perpeft_autodiff::Result<Var> {
        let (a, b) = (g.param(&self.a), g.param(&self.b));
        let ha = g.matmul(h, a)?;
        let delta = g.matmul(ha, b)?;
        g.add(base, delta)
    }

    /// Materialized `A·B`.
    pub fn delta(&self) -> Tensor {
        let (a, b) = (self.a.value(), self.b.value());
        let (d, k, dp) = (a.shape()[0], a.shape()[1], b.shape()[1]);
        let mut out = vec![0.0; d * dp];
        for i in 0..d {
            for r in 0..k {
                let air = a.data()[i * k + r];
                for j in 0..dp {
                    out[i * dp + j] += air * b.data()[r * dp + j];
                }
            }
        }
        Tensor::new(vec![d, dp], out).expect("shape")
    }
}

#[derive(Clone, Debug)]
pub enum LayerAdapter {
    Lora {
        q: LoraPair,
        v: LoraPair,
    },
    Ia3 {
        k: Parameter,
        v: Parameter,
        ff: Parameter,
    },
    Side {
        down: Parameter,
        gate: Parameter,
    },
}

#[derive(Clone, Debug)]
pub struct TowerAdapter {
    pub layers: Vec<LayerAdapter>,
    /// SideNet only: final projection into the tower output space.
    pub up: Option<Parameter>,
}

/// One PEFT module: adapters for both towers of one encoder.
#[derive(Clone, Debug)]
pub struct PeftAttachment {
    kind: PeftKind,
    size: usize,
    label: String,
    text: TowerAdapter,
    vision: TowerAdapter,
}

impl PeftAttachment {
    /// Attaches `kind` with its default rank/width under the label `global`.
    pub fn attach(model: &EncoderModel, kind: PeftKind, seed: u64) -> Self {
        Self::attach_sized(model, kind, kind.default_size(), "global", seed)
    }

    /// `size` is the LoRA rank or SideNet width; ignored for (IA)³.
    pub fn attach_sized(
        model: &EncoderModel,
        kind: PeftKind,
        size: usize,
        label: &str,
        seed: u64,
    ) -> Self {
        let c = model.config();
        let (dm, dp, ff) = (c.d_model, c.d_prime, c.ffn_dim());
        let mut rng = seed::rng(seed, "peft");
        let size = if kind == PeftKind::Ia3 {
            0
        } else {
            size.max(1)
        };
        let mut tower = |t: Tower| {
            let ts = t.as_str();
            let name = |site: String, tensor: &str| format!("peft/{label}/{ts}/{site}/{tensor}");
            let layers = (0..c.n_layers)
                .map(|l| match kind {
                    PeftKind::Lora => {
                        let mut pair = |site: &str| LoraPair {
                            a: Parameter::trainable(
                                name(format!("layer{l}.{site}"), "A"),
                                fan_in(dm, size, &mut rng),
                            ),
                            b: Parameter::trainable(
                                name(format!("layer{l}.{site}"), "B"),
                                Tensor::zeros(&[size, dm]),
                            ),
                        };
                        let q = pair("q");
                        let v = pair("v");
                        LayerAdapter::Lora { q, v }
                    }
                    PeftKind::Ia3 => LayerAdapter::Ia3 {
                        k: Parameter::trainable(
                            name(format!("layer{l}.k"), "l"),
                            Tensor::ones(&[dm]),
                        ),
                        v: Parameter::trainable(
                            name(format!("layer{l}.v"), "l"),
                            Tensor::ones(&[dm]),
                        ),
                        ff: Parameter::trainable(
                            name(format!("layer{l}.ff1"), "l"),
                            Tensor::ones(&[ff]),
                        ),
                    },
                    PeftKind::SideNet => LayerAdapter::Side {
                        down: Parameter::trainable(
                            name(format!("layer{l}.side"), "down"),
                            fan_in(dm, size, &mut rng),
                        ),
                        gate: Parameter::trainable(
                            name(format!("layer{l}.side"), "gate"),
                            Tensor::zeros(&[1]),
                        ),
                    },
                })
                .collect();
            let up = (kind == PeftKind::SideNet).then(|| {
                Parameter::trainable(name("head.side".into(), "up"), Tensor::zeros(&[size, dp]))
            });
            TowerAdapter { layers, up }
        };
        let text = tower(Tower::Text);
        let vision = tower(Tower::Vision);
        Self {
            kind,
            size,
            label: label.to_string(),
            text,
            vision,
        }
    }

    pub fn kind(&self) -> PeftKind {
        self.kind
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn tower(&self, t: Tower) -> &TowerAdapter {
        match t {
            Tower::Text => &self.text,
            Tower::Vision => &self.vision,
        }
    }

    /// Deep copy with every parameter renamed under `label`.
    pub fn clone_as(&self, label: &str) -> Self {
        let mut out = self.clone();
        let from = format!("peft/{}/", self.label);
        out.replace_prefix(&from, &format!("peft/{label}/"));
        out.label = label.to_string();
        out
    }

    /// Adapted sites as `(tower, site)` pairs, e.g. `(text, "layer0.q")`.
    pub fn targets(&self) -> Vec<(Tower, String)> {
        let mut out = Vec::new();
        for t in Tower::ALL {
            for (l, a) in self.tower(t).layers.iter().enumerate() {
                let sites: &[&str] = match a {
                    LayerAdapter::Lora { .. } => &["q", "v"],
                    LayerAdapter::Ia3 { .. } => &["k", "v", "ff1"],
                    LayerAdapter::Side { .. } => &["side"],
                };
                out.extend(sites.iter().map(|s| (t, format!("layer{l}.{s}"))));
            }
            if self.tower(t).up.is_some() {
                out.push((t, "head.side".into()));
            }
        }
        out
    }
}

fn tower_params(t: &TowerAdapter) -> Vec<&Parameter> {
    let mut out = Vec::new();
    for l in &t.layers {
        match l {
            LayerAdapter::Lora { q, v } => out.extend([&q.a, &q.b, &v.a, &v.b]),
            LayerAdapter::Ia3 { k, v, ff } => out.extend([k, v, ff]),
            LayerAdapter::Side { down, gate } => out.extend([down, gate]),
        }
    }
    out.extend(t.up.as_ref());
    out
}

fn tower_params_mut(t: &mut TowerAdapter) -> Vec<&mut Parameter> {
    let mut out = Vec::new();
    for l in &mut t.layers {
        match l {
            LayerAdapter::Lora { q, v } => out.extend([&mut q.a, &mut q.b, &mut v.a, &mut v.b]),
            LayerAdapter::Ia3 { k, v, ff } => out.extend([k, v, ff]),
            LayerAdapter::Side { down, gate } => out.extend([down, gate]),
        }
    }
    out.extend(t.up.as_mut());
    out
}

impl Module for PeftAttachment {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = tower_params(&self.text);
        out.extend(tower_params(&self.vision));
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = tower_params_mut(&mut self.text);
        out.extend(tower_params_mut(&mut self.vision));
        out
    }
}

/// Closed-form trainable parameter count of an attachment.
pub fn attachment_param_count(model: &EncoderModel, kind: PeftKind, size: usize) -> usize {
    let c = model.config();
    let (dm, dp, ff, layers) = (c.d_model, c.d_prime, c.ffn_dim(), c.n_layers);
    let per_tower = match kind {
        PeftKind::Lora => layers * 2 * size * (dm + dm),
        PeftKind::Ia3 => layers * (2 * dm + ff),
        PeftKind::SideNet => layers * (dm * size + 1) + size * dp,
    };
    2 * per_tower
}

/// The group-specific components of one user group.
#[derive(Clone, Debug)]
pub struct GroupComponents {
    pub peft: Option<PeftAttachment>,
    pub projector: Projector,
}

impl GroupComponents {
    /// Deep copy relabelled for group `label`.
    pub fn clone_as(&self, label: &str) -> Self {
        Self {
            peft: self.peft.as_ref().map(|p| p.clone_as(label)),
            projector: self.projector.clone_as(label),
        }
    }
}

impl Module for GroupComponents {
    fn params(&self) -> Vec<&Parameter> {
        let mut out = self.peft.as_ref().map(Module::params).unwrap_or_default();
        out.extend(self.projector.params());
        out
    }

    fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut out = self
            .peft
            .as_mut()
            .map(Module::params_mut)
            .unwrap_or_default();
        out.extend(self.projector.params_mut());
        out
    }
}

/// One PEFT module and projector per user group.
#[derive(Clone, Debug)]
pub struct PeftRegistry {
    groups: Vec<GroupComponents>,
}

impl PeftRegistry {
    pub fn single(global: GroupComponents) -> Self {
        Self {
            groups: vec![global],
        }
    }

    /// `count` deep copies of `global`, labelled `0..count`.
    pub fn from_global(global: &GroupComponents, count: usize) -> Self {
        Self {
            groups: (0..count)
                .map(|c| global.clone_as(&c.to_string()))
                .collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn get(&self, c: usize) -> &GroupComponents {
        &self.groups[c]
    }

    pub fn get_mut(&mut self, c: usize) -> &mut GroupComponents {
        &mut self.groups[c]
    }

    pub fn iter(&self) -> impl Iterator<Item = &GroupComponents> {
        self.groups.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut GroupComponents> {
        self.groups.iter_mut()
    }

    /// Fails if two groups share a parameter name.
    pub fn check_disjoint(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for g in &self.groups {
            for p in g.params() {
                if !seen.insert(p.name().to_string()) {
                    return Err(Error::Contract(format!(
                        "parameter {} shared across groups",
                        p.name()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Trainable-parameter accounting for Global PEFT versus the per-group variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterReport {
    pub peft: usize,
    pub projector: usize,
    pub sasrec: usize,
    pub transductive: usize,
    pub groups: usize,
    pub global_total: usize,
    pub perpeft_total: usize,
    pub foundation: Option<usize>,
    /// `perpeft_total / foundation`.
    pub overhead_ratio: Option<f64>,
}

/// Combines named component counts. Recognized names: `peft`, `projector`,
/// `sasrec`, `transductive` and optionally `foundation`.
pub fn count_parameters(components: &[(&str, usize)], groups: usize) -> Result<ParameterReport> {
    if groups == 0 {
        return Err(Error::Config("group count must be at least 1".into()));
    }
    let mut get = std::collections::HashMap::new();
    for (name, n) in components {
        match *name {
            "peft" | "projector" | "sasrec" | "transductive" | "foundation" => {
                *get.entry(*name).or_insert(0usize) += n;
            }
            other => return Err(Error::Contract(format!("unknown component '{other}'"))),
        }
    }
    let v = |k: &str| get.get(k).copied().unwrap_or(0);
    let (peft, projector, sasrec, transductive) =
        (v("peft"), v("projector"), v("sasrec"), v("transductive"));
    let global_total = peft + projector + sasrec + transductive;
    let perpeft_total = global_total + (groups - 1) * (peft + projector);
    let foundation = get.get("foundation").copied();
    Ok(ParameterReport {
        peft,
        projector,
        sasrec,
        transductive,
        groups,
        global_total,
        perpeft_total,
        foundation,
        overhead_ratio: foundation
            .filter(|&f| f > 0)
            .map(|f| perpeft_total as f64 / f as f64),
    })
}
