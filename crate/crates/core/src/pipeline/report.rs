use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::peft::ParameterReport;
use crate::recsys::Metrics;

use super::attention::JsdReport;

/// A metric in percent with two decimals.
pub fn format_percent(v: f64) -> String {
    format!("{:.2}", v * 100.0)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub method: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub rows: Vec<ReportRow>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params: Option<ParameterReport>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub jsd: Option<JsdReport>,
}

impl RunReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    /// Plain-text tables: metrics per method, then parameters and JSD when present.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        let ks: Vec<usize> = self
            .rows
            .first()
            .map(|r| r.metrics.hit.keys().copied().collect())
            .unwrap_or_default();
        if !self.rows.is_empty() {
            let _ = write!(out, "{:<14}", "method");
            for k in &ks {
                let _ = write!(out, " {:>7} {:>7}", format!("H@{k}"), format!("N@{k}"));
            }
            out.push('\n');
            for r in &self.rows {
                let _ = write!(out, "{:<14}", r.method);
                for k in &ks {
                    let _ = write!(
                        out,
                        " {:>7} {:>7}",
                        format_percent(r.metrics.hit_at(*k)),
                        format_percent(r.metrics.ndcg_at(*k))
                    );
                }
                out.push('\n');
            }
        }
        if let Some(p) = &self.params {
            let _ = writeln!(out, "global trainable  {}", p.global_total);
            let _ = writeln!(
                out,
                "per-group total   {} (C = {})",
                p.perpeft_total, p.groups
            );
            if let Some(r) = p.overhead_ratio {
                let _ = writeln!(out, "overhead ratio    {r:.4}");
            }
        }
        if let Some(j) = &self.jsd {
            let _ = writeln!(out, "intra-group JSD   {:.4}", j.intra_mean);
            let _ = writeln!(out, "inter-group JSD   {:.4}", j.inter_mean);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn percent_formatting() {
        assert_eq!(format_percent(0.0482), "4.82");
        assert_eq!(format_percent(0.0), "0.00");
    }

    #[test]
    fn empty_report() {
        let r = RunReport::default();
        assert_eq!(r.to_table(), "");
        assert_eq!(RunReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    }
}
