//! Ablation sweeps over tokens per class, loss combinations, and fusion ×
//! pretraining scale. Rows follow setting order, then domain, then seed.

use serde::{Deserialize, Serialize};

use crate::data::Domain;
use crate::error::{Error, Result};
use crate::experiments::config::{ExperimentConfig, PretrainScale};
use crate::experiments::lab::{Lab, RunSpec};
use crate::losses::LossSelection;
use crate::tuning::Method;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationAxis {
    Tokens,
    Losses,
    Fusion,
    Pretrain,
}

impl AblationAxis {
    pub fn as_str(self) -> &'static str {
        match self {
            AblationAxis::Tokens => "tokens",
            AblationAxis::Losses => "losses",
            AblationAxis::Fusion => "fusion",
            AblationAxis::Pretrain => "pretrain",
        }
    }
}

impl std::str::FromStr for AblationAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tokens" => Ok(AblationAxis::Tokens),
            "losses" => Ok(AblationAxis::Losses),
            "fusion" => Ok(AblationAxis::Fusion),
            "pretrain" => Ok(AblationAxis::Pretrain),
            other => Err(Error::Config(format!("unknown ablation axis `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub setting: String,
    pub domain: Domain,
    pub seed: u64,
    pub ap: f64,
    pub ap50: f64,
    pub ap_mask: f64,
    pub ap50_mask: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub axis: AblationAxis,
    pub config_hash: String,
    pub rows: Vec<AblationRow>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Metric {
    Ap,
    Ap50,
    ApMask,
}

impl AblationRow {
    pub fn metric(&self, m: Metric) -> f64 {
        match m {
            Metric::Ap => self.ap,
            Metric::Ap50 => self.ap50,
            Metric::ApMask => self.ap_mask,
        }
    }
}

impl AblationTable {
    pub fn get(&self, setting: &str, domain: Domain, seed: u64) -> Option<&AblationRow> {
        self.rows
            .iter()
            .find(|r| r.setting == setting && r.domain == domain && r.seed == seed)
    }

    /// Seeds where setting `a` scores at least setting `b`, out of the seeds
    /// both ran.
    pub fn wins(&self, a: &str, b: &str, domain: Domain, metric: Metric) -> (usize, usize) {
        let mut seeds: Vec<u64> = self.rows.iter().filter(|r| r.setting == a && r.domain == domain).map(|r| r.seed).collect();
        seeds.dedup();
        let mut wins = 0;
        let mut n = 0;
        for s in seeds {
            if let (Some(x), Some(y)) = (self.get(a, domain, s), self.get(b, domain, s)) {
                n += 1;
                if x.metric(metric) >= y.metric(metric) {
                    wins += 1;
                }
            }
        }
        (wins, n)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("axis,setting,domain,seed,ap,ap50,ap_mask,ap50_mask\n");
        for r in &self.rows {
            s.push_str(&format!(
                "{},{},{},{},{:.6},{:.6},{:.6},{:.6}\n",
                self.axis.as_str(),
                r.setting,
                r.domain.as_str(),
                r.seed,
                r.ap,
                r.ap50,
                r.ap_mask,
                r.ap50_mask
            ));
        }
        s
    }
}

fn row(lab: &Lab, cfg: &ExperimentConfig, setting: String, spec: &RunSpec) -> Result<AblationRow> {
    let r = lab.run(cfg, spec)?;
    let t = r.record.test;
    Ok(AblationRow {
        setting,
        domain: spec.domain,
        seed: spec.seed,
        ap: t.ap_box,
        ap50: t.ap50_box,
        ap_mask: t.ap_mask,
        ap50_mask: t.ap50_mask,
    })
}

fn base_spec(cfg: &ExperimentConfig, seed: u64, domain: Domain) -> RunSpec {
    RunSpec {
        seed,
        domain,
        ..RunSpec::from_config(cfg, Method::ConesStage1)
    }
}

/// Stage-1 search for each tokens-per-class value on every configured
/// domain.
pub fn ablate_tokens(lab: &Lab, cfg: &ExperimentConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &m in &cfg.ablate.tokens {
        if m == 0 {
            return Err(Error::Config("token ablation needs at least one token per class".into()));
        }
        for &domain in &cfg.ablate.domains {
            for &seed in &cfg.ablate.seeds {
                let spec = RunSpec {
                    tokens_per_class: m,
                    ..base_spec(cfg, seed, domain)
                };
                rows.push(row(lab, cfg, format!("m={m}"), &spec)?);
            }
        }
    }
    Ok(AblationTable {
        axis: AblationAxis::Tokens,
        config_hash: cfg.hash(),
        rows,
    })
}

/// Loss combinations named by the config, or all seven detection subsets.
pub fn loss_settings(cfg: &ExperimentConfig) -> Result<Vec<LossSelection>> {
    if cfg.ablate.losses.is_empty() {
        return Ok(LossSelection::detection_combinations());
    }
    cfg.ablate.losses.iter().map(|s| s.parse()).collect()
}

/// Stage-1 search per loss combination on the evaluation domain.
pub fn ablate_losses(lab: &Lab, cfg: &ExperimentConfig) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for losses in loss_settings(cfg)? {
        for &seed in &cfg.ablate.seeds {
            let spec = RunSpec {
                losses,
                ..base_spec(cfg, seed, cfg.eval.domain)
            };
            rows.push(row(lab, cfg, losses.to_string(), &spec)?);
        }
    }
    Ok(AblationTable {
        axis: AblationAxis::Losses,
        config_hash: cfg.hash(),
        rows,
    })
}

pub fn fusion_setting(fusion: bool, scale: PretrainScale) -> String {
    format!("fusion={},pretrain={}", if fusion { "on" } else { "off" }, scale.as_str())
}

/// Pretrains each fusion × scale variant and runs stage-1 search on it.
/// `axis` only labels the table; both sweeps share the grid.
pub fn ablate_fusion_and_pretrain(lab: &Lab, cfg: &ExperimentConfig, axis: AblationAxis) -> Result<AblationTable> {
    let mut rows = Vec::new();
    for &fusion in &cfg.ablate.fusion {
        for &scale in &cfg.ablate.scales {
            for &seed in &cfg.ablate.seeds {
                let spec = RunSpec {
                    fusion,
                    scale,
                    ..base_spec(cfg, seed, cfg.eval.domain)
                };
                rows.push(row(lab, cfg, fusion_setting(fusion, scale), &spec)?);
            }
        }
    }
    Ok(AblationTable {
        axis,
        config_hash: cfg.hash(),
        rows,
    })
}

pub fn ablate(lab: &Lab, cfg: &ExperimentConfig, axis: AblationAxis) -> Result<AblationTable> {
    match axis {
        AblationAxis::Tokens => ablate_tokens(lab, cfg),
        AblationAxis::Losses => ablate_losses(lab, cfg),
        AblationAxis::Fusion | AblationAxis::Pretrain => ablate_fusion_and_pretrain(lab, cfg, axis),
    }
}
