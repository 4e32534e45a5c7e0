//! End-to-end orchestration: configuration, training runs, baselines,
//! ablations, persistence and reporting.

mod attention;
mod checkpoint;
mod model;
mod optim;
mod report;
mod synthetic;
mod train;

pub use attention::{attention_analysis, jsd, JsdReport, PerItemJsd};
pub use checkpoint::{Checkpoint, CheckpointMeta, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use model::{Injection, Modality, PersonalVectors, RecModel, Scope, Split};
pub use optim::AdamW;
pub use report::{format_percent, ReportRow, RunReport};
pub use synthetic::{generate_synthetic, planted_agreement, SyntheticData, SyntheticSpec};
pub use train::{
    batch_loss, compute_interest_vectors, continue_global, group_users, run_ablation, run_baseline,
    train_global, train_grouped, train_perpeft, v4_search, Audit, EpochLog, LossBatch, MethodRun,
    NegativeSource, RunOutcome, TrainPlan, Trainer, V4Plan, V4_TOLERANCE,
};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderConfig;
use crate::error::{Error, Result};
use crate::grouping::DEFAULT_GROUPS;
use crate::peft::PeftKind;
use crate::recsys::{LossMode, SasrecConfig, DEFAULT_PROJECTOR_HIDDEN};

pub const LEARNING_RATES: [f64; 3] = [1e-4, 5e-5, 1e-5];
pub const WEIGHT_DECAYS: [f64; 4] = [5e-4, 1e-4, 5e-5, 1e-5];
/// Validation Hit@K used for checkpoint selection.
pub const SELECT_K: usize = 30;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "WO_MM")]
    WoMm,
    #[serde(rename = "FROZEN_MM")]
    FrozenMm,
    #[serde(rename = "GLOBAL_PEFT")]
    GlobalPeft,
    #[serde(rename = "USER_LEVEL_1")]
    UserLevel1,
    #[serde(rename = "USER_LEVEL_2")]
    UserLevel2,
    #[serde(rename = "GROUP_LEVEL_1")]
    GroupLevel1,
    #[serde(rename = "GROUP_LEVEL_2")]
    GroupLevel2,
    #[serde(rename = "PERPEFT")]
    PerPeft,
    V1,
    V2,
    V3,
    V4,
    V5,
}

impl Method {
    pub const ALL: [Method; 13] = [
        Method::WoMm,
        Method::FrozenMm,
        Method::GlobalPeft,
        Method::UserLevel1,
        Method::UserLevel2,
        Method::GroupLevel1,
        Method::GroupLevel2,
        Method::PerPeft,
        Method::V1,
        Method::V2,
        Method::V3,
        Method::V4,
        Method::V5,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::WoMm => "WO_MM",
            Method::FrozenMm => "FROZEN_MM",
            Method::GlobalPeft => "GLOBAL_PEFT",
            Method::UserLevel1 => "USER_LEVEL_1",
            Method::UserLevel2 => "USER_LEVEL_2",
            Method::GroupLevel1 => "GROUP_LEVEL_1",
            Method::GroupLevel2 => "GROUP_LEVEL_2",
            Method::PerPeft => "PERPEFT",
            Method::V1 => "V1",
            Method::V2 => "V2",
            Method::V3 => "V3",
            Method::V4 => "V4",
            Method::V5 => "V5",
        }
    }

    /// Methods that partition users into groups.
    pub fn is_grouped(self) -> bool {
        matches!(
            self,
            Method::GroupLevel1 | Method::GroupLevel2 | Method::PerPeft | Method::V3 | Method::V5
        )
    }

    /// Methods that carry one PEFT module per group.
    pub fn per_group_modules(self) -> bool {
        matches!(self, Method::PerPeft | Method::V3 | Method::V5)
    }

    /// Methods trained in a second stage on top of a Global PEFT run.
    pub fn builds_on_global(self) -> bool {
        matches!(
            self,
            Method::UserLevel1
                | Method::UserLevel2
                | Method::GroupLevel1
                | Method::GroupLevel2
                | Method::PerPeft
                | Method::V3
                | Method::V5
        )
    }

    pub fn uses_peft(self) -> bool {
        !matches!(self, Method::WoMm | Method::FrozenMm)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_uppercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == norm)
            .ok_or_else(|| Error::Config(format!("unknown method '{s}'")))
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub method: Method,
    pub peft_kind: PeftKind,
    /// LoRA rank or SideNet width; the kind's default when absent.
    pub peft_size: Option<usize>,
    pub groups: usize,
    pub global_epochs: usize,
    pub personal_epochs: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub loss_mode: LossMode,
    pub seed: u64,
    pub batch_size: usize,
    pub projector_hidden: usize,
    pub kmeans_iters: usize,
    pub kmeans_tol: f64,
    pub eval_ks: Vec<usize>,
    /// Drop items already in the input history from the ranking.
    pub exclude_seen: bool,
    pub encoder: EncoderConfig,
    pub sasrec: SasrecConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            method: Method::PerPeft,
            peft_kind: PeftKind::Lora,
            peft_size: None,
            groups: DEFAULT_GROUPS,
            global_epochs: 10,
            personal_epochs: 20,
            learning_rate: 1e-4,
            weight_decay: 1e-4,
            loss_mode: LossMode::default(),
            seed: 0,
            batch_size: 16,
            projector_hidden: DEFAULT_PROJECTOR_HIDDEN,
            kmeans_iters: 100,
            kmeans_tol: 1e-6,
            eval_ks: vec![10, 20, 30],
            exclude_seen: true,
            encoder: EncoderConfig::default(),
            sasrec: SasrecConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.global_epochs == 0 || (self.method.builds_on_global() && self.personal_epochs == 0)
        {
            return bad("epoch counts must be positive".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return bad(format!(
                "learning rate {} must be finite and non-negative",
                self.learning_rate
            ));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!(
                "weight decay {} must be finite and non-negative",
                self.weight_decay
            ));
        }
        if self.batch_size == 0 {
            return bad("batch size must be at least 1".into());
        }
        if self.method.is_grouped() && self.groups == 0 {
            return bad("grouped methods need at least one group".into());
        }
        if self.projector_hidden == 0 {
            return bad("projector hidden width must be positive".into());
        }
        if self.peft_size == Some(0) && self.peft_kind != PeftKind::Ia3 {
            return bad(format!("{} size must be positive", self.peft_kind));
        }
        if self.eval_ks.is_empty() || self.eval_ks.contains(&0) {
            return bad("evaluation cutoffs must be positive".into());
        }
        self.encoder.validate()?;
        Ok(())
    }

    pub fn peft_size(&self) -> usize {
        self.peft_size.unwrap_or(self.peft_kind.default_size())
    }

    /// Cutoffs evaluated, always including the selection cutoff.
    pub fn ks(&self) -> Vec<usize> {
        let mut ks = self.eval_ks.clone();
        ks.push(SELECT_K);
        ks.sort_unstable();
        ks.dedup();
        ks
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml(&std::fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Every (learning rate, weight decay) pair of the tuning grid.
    pub fn sweep(&self) -> Vec<RunConfig> {
        LEARNING_RATES
            .iter()
            .flat_map(|&lr| {
                WEIGHT_DECAYS.iter().map(move |&wd| RunConfig {
                    learning_rate: lr,
                    weight_decay: wd,
                    ..self.clone()
                })
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in Method::ALL {
            assert_eq!(m.as_str().parse::<Method>().unwrap(), m);
        }
        assert_eq!("perpeft".parse::<Method>().unwrap(), Method::PerPeft);
        assert!(matches!("nope".parse::<Method>(), Err(Error::Config(_))));
    }

    #[test]
    fn toml_round_trip_and_overrides() {
        let cfg = RunConfig {
            method: Method::V3,
            groups: 2,
            ..RunConfig::default()
        };
        assert_eq!(RunConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
        let partial = RunConfig::from_toml("groups = 3\n[sasrec]\ndim = 16\n").unwrap();
        assert_eq!(
            (partial.groups, partial.sasrec.dim, partial.sasrec.max_len),
            (3, 16, 10)
        );
        assert!(RunConfig::from_toml("bogus = 1").is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::default().validate().is_ok());
        let zero = RunConfig {
            global_epochs: 0,
            ..RunConfig::default()
        };
        assert!(matches!(zero.validate(), Err(Error::Config(_))));
        assert_eq!(RunConfig::default().sweep().len(), 12);
    }
}
