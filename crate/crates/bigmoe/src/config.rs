//! Run configuration: one TOML-serializable struct covering the backbone,
//! adapter, prompt bypass, data, optimizer, and ablation switches, with full
//! cross-field validation before anything is allocated.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbone::BackboneConfig;
use crate::cpb::{CpbConfig, PromptSetting};
use crate::data::{default_domains, DomainSpec};
use crate::error::{Error, Result};
use crate::igma::IgmaConfig;

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub domains: Vec<DomainSpec>,
    /// Samples per domain (even; classes are balanced).
    pub n_per_domain: usize,
    /// Domain held out for evaluation (leave-one-out).
    pub held_out: String,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Print a loss line every this many epochs (0 = silent).
    pub log_every: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct ModeConfig {
    /// Drop the prompt bypass entirely (gating sees a zero prompt summary).
    pub disable_cpb: bool,
    /// Drop the expert adapters entirely (plain backbone).
    pub disable_igma: bool,
    /// Which prompt components are built: none / t / t+c / t+c+m.
    pub prompts: PromptSetting,
    /// Replace the fine-grained adapter with a dense coarse-expert baseline.
    pub coarse_moe: bool,
    pub coarse_experts: usize,
    pub coarse_hidden: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub igma: IgmaConfig,
    pub cpb: CpbConfig,
    pub data: DataConfig,
    pub optim: OptimConfig,
    pub mode: ModeConfig,
}

impl RunConfig {
    /// Desk-scale preset: small enough to train on a CPU in minutes while
    /// exercising every component.
    pub fn desk() -> Self {
        let domains: Vec<DomainSpec> = default_domains().into_iter().take(3).collect();
        RunConfig {
            seed: 17,
            backbone: BackboneConfig {
                image_size: 32,
                patch_size: 8,
                token_dim: 64,
                depth: 4,
                attn_heads: 4,
                mlp_ratio: 4,
                n_classes: 2,
            },
            igma: IgmaConfig {
                n_experts: 256,
                top_k: 2,
                n_heads: 2,
                query_dim: 16,
                noise_scale: 0.01,
                hidden_dim: 8,
            },
            cpb: CpbConfig {
                prompt_dim: 16,
                n_task_prompts: 4,
                theta: 0.7,
                eca_kernel: 3,
                clue_channels: 12,
                clue_stride1: 4,
                clue_stride2: 4,
                mask_rate: 0.3,
            },
            data: DataConfig {
                held_out: domains.last().expect("three domains").name.clone(),
                domains,
                n_per_domain: 300,
                seed: 7,
            },
            optim: OptimConfig {
                lr: 1e-3,
                weight_decay: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epochs: 30,
                batch_size: 32,
                log_every: 5,
            },
            mode: ModeConfig {
                disable_cpb: false,
                disable_igma: false,
                prompts: PromptSetting::Full,
                coarse_moe: false,
                coarse_experts: 4,
                coarse_hidden: 64,
            },
        }
    }

    /// Full-scale hyperparameters as documentation: 224x224 inputs, 14x14
    /// patch grid at patch 16, d = 768, 1600 experts with 2 activated per
    /// head, expert hidden 8, 64-dim prompt bypass, Adam at lr 5e-5 / weight
    /// decay 1e-3, 100 epochs, batch 32. Not sized for CI.
    pub fn paper() -> Self {
        let domains = default_domains();
        RunConfig {
            seed: 17,
            backbone: BackboneConfig {
                image_size: 224,
                patch_size: 16,
                token_dim: 768,
                depth: 12,
                attn_heads: 12,
                mlp_ratio: 4,
                n_classes: 2,
            },
            igma: IgmaConfig {
                n_experts: 1600,
                top_k: 2,
                n_heads: 2,
                query_dim: 16,
                noise_scale: 0.01,
                hidden_dim: 8,
            },
            cpb: CpbConfig {
                prompt_dim: 64,
                n_task_prompts: 8,
                theta: 0.7,
                eca_kernel: 5,
                clue_channels: 24,
                clue_stride1: 8,
                clue_stride2: 8,
                mask_rate: 0.3,
            },
            data: DataConfig {
                held_out: domains.last().expect("four domains").name.clone(),
                domains,
                n_per_domain: 1000,
                seed: 7,
            },
            optim: OptimConfig {
                lr: 5e-5,
                weight_decay: 1e-3,
                beta1: 0.9,
                beta2: 0.999,
                epochs: 100,
                batch_size: 32,
                log_every: 1,
            },
            mode: ModeConfig {
                disable_cpb: false,
                disable_igma: false,
                prompts: PromptSetting::Full,
                coarse_moe: false,
                coarse_experts: 8,
                coarse_hidden: 768,
            },
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig =
            toml::from_str(text).map_err(|e| Error::Config(format!("config parse: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("RunConfig serializes")
    }

    /// SHA-256 of the canonical TOML serialization.
    pub fn hash(&self) -> String {
        let mut hasher = Sha256::new();
        hasher.update(self.to_toml().as_bytes());
        let digest = hasher.finalize();
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    /// Validate every extent before allocation; errors carry field paths.
    pub fn validate(&self) -> Result<()> {
        self.backbone.validate("backbone")?;
        self.igma.validate("igma")?;
        self.cpb.validate("cpb")?;
        // cross-module: the clue pipeline must leave at least one grid cell
        let grid = self.cpb.clue_grid(self.backbone.image_size)?;
        if grid == 0 {
            return Err(Error::Config(
                "cpb.clue_stride*: no clue cells remain at this image size".into(),
            ));
        }
        if self.data.domains.is_empty() {
            return Err(Error::Config("data.domains: at least one domain".into()));
        }
        let mut names: Vec<&str> = self.data.domains.iter().map(|d| d.name.as_str()).collect();
        names.sort_unstable();
        names.dedup();
        if names.len() != self.data.domains.len() {
            return Err(Error::Config("data.domains: duplicate domain names".into()));
        }
        if !self.data.domains.iter().any(|d| d.name == self.data.held_out) {
            return Err(Error::Config(format!(
                "data.held_out: '{}' is not among the configured domains",
                self.data.held_out
            )));
        }
        if self.data.n_per_domain == 0 || self.data.n_per_domain % 2 != 0 {
            return Err(Error::Config(format!(
                "data.n_per_domain: {} must be positive and even",
                self.data.n_per_domain
            )));
        }
        for d in &self.data.domains {
            if !(0.0..=1.0).contains(&d.depth_flatness) {
                return Err(Error::Config(format!(
                    "data.domains.{}.depth_flatness: outside [0, 1]",
                    d.name
                )));
            }
        }
        if self.optim.lr < 0.0 {
            return Err(Error::Config("optim.lr: must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.optim.beta1) || !(0.0..1.0).contains(&self.optim.beta2) {
            return Err(Error::Config("optim.beta1/beta2: must lie in [0, 1)".into()));
        }
        if self.optim.batch_size == 0 {
            return Err(Error::Config("optim.batch_size: must be >= 1".into()));
        }
        if self.mode.coarse_moe {
            if self.mode.disable_igma {
                return Err(Error::Config(
                    "mode: coarse_moe and disable_igma are mutually exclusive".into(),
                ));
            }
            if self.mode.coarse_experts == 0 || self.mode.coarse_hidden == 0 {
                return Err(Error::Config(
                    "mode.coarse_experts/coarse_hidden: must be >= 1".into(),
                ));
            }
        }
        Ok(())
    }
}
