use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use pdprune::analysis::DEFAULT_D_THRESHOLD;
use pdprune::distill::DistillConfig;
use pdprune::kv_prune::{DEFAULT_GAMMA, DEFAULT_P};
use pdprune::pipeline::ToyInstance;
use pdprune::runtime::scenario::{KvParams, PromptSpec, DEFAULT_TIMEOUT_MS};
use pdprune::runtime::{LinkModel, WireDtype};
use pdprune::search::{AnnealingSchedule, DEFAULT_THRESHOLD};
use serde::{Deserialize, Serialize};

pub const FORMAT_VERSION: u32 = 1;
pub const SEED_ENV: &str = "PDPRUNE_SEED";

/// Everything a run needs. Missing fields take their defaults.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub format_version: u32,
    pub instance: ToyInstance,
    pub k: usize,
    pub schedule: AnnealingSchedule,
    pub d_threshold: f64,
    /// Absolute accuracy gain needed to keep an element in the prefill model.
    pub theta: f64,
    pub kv: KvParams,
    pub distill: DistillConfig,
    pub prompt: PromptSpec,
    pub steps: usize,
    pub dtype: WireDtype,
    pub link: LinkModel,
    pub timeout_ms: u64,
    pub scenario: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            format_version: FORMAT_VERSION,
            instance: ToyInstance::default(),
            k: 3,
            schedule: AnnealingSchedule::default(),
            d_threshold: DEFAULT_D_THRESHOLD,
            theta: DEFAULT_THRESHOLD,
            kv: KvParams {
                p: DEFAULT_P,
                gamma: DEFAULT_GAMMA,
                n: 0,
            },
            distill: DistillConfig::default(),
            prompt: PromptSpec { seed: 11, len: 24 },
            steps: 16,
            dtype: WireDtype::F64,
            link: LinkModel::default(),
            timeout_ms: DEFAULT_TIMEOUT_MS,
            scenario: None,
            out_dir: PathBuf::from("out"),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("cannot read config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("cannot parse config {}", path.display()))?;
        if config.format_version != FORMAT_VERSION {
            bail!(
                "config {} has format_version {}, expected {FORMAT_VERSION}",
                path.display(),
                config.format_version
            );
        }
        Ok(config)
    }
}

/// `T0,alpha,T_min`.
pub fn parse_schedule(text: &str) -> Result<(f64, f64, f64), String> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    let [t0, alpha, t_min] = parts[..] else {
        return Err(format!("expected T0,alpha,T_min, got {text:?}"));
    };
    let num = |s: &str| s.parse::<f64>().map_err(|e| format!("{s:?}: {e}"));
    Ok((num(t0)?, num(alpha)?, num(t_min)?))
}

/// Flag, then environment, then config.
pub fn resolve_seed(flag: Option<u64>, env: Option<String>, config: u64) -> Result<u64> {
    if let Some(s) = flag {
        return Ok(s);
    }
    match env {
        Some(v) => v
            .trim()
            .parse()
            .with_context(|| format!("{SEED_ENV}={v:?} is not an unsigned integer")),
        None => Ok(config),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_parses_three_numbers() {
        assert_eq!(parse_schedule("15,0.85,0.05").unwrap(), (15.0, 0.85, 0.05));
        assert!(parse_schedule("15,0.85").is_err());
        assert!(parse_schedule("a,b,c").is_err());
    }

    #[test]
    fn seed_precedence() {
        assert_eq!(resolve_seed(Some(4), Some("5".into()), 6).unwrap(), 4);
        assert_eq!(resolve_seed(None, Some("5".into()), 6).unwrap(), 5);
        assert_eq!(resolve_seed(None, None, 6).unwrap(), 6);
        assert!(resolve_seed(None, Some("x".into()), 6).is_err());
    }

    #[test]
    fn default_config_round_trips() {
        let c = RunConfig::default();
        let back: RunConfig = serde_json::from_str(&serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(back, c);
        let partial: RunConfig = serde_json::from_str(r#"{"k": 4}"#).unwrap();
        assert_eq!(partial.k, 4);
        assert!(serde_json::from_str::<RunConfig>(r#"{"kk": 4}"#).is_err());
    }
}
