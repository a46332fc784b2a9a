//! Ablation runner: trains one run per setting along a chosen axis with a
//! shared seed and data config, and renders a comparison table.

use std::thread;

use crate::config::RunConfig;
use crate::cpb::PromptSetting;
use crate::error::{Error, Result};
use crate::train::{train, MetricsReport};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AblationAxis {
    /// none / P_t / P_t&P_c / full prompt compositions.
    Prompts,
    /// Total expert counts {16, 64, 256, 1024}.
    NExperts,
    /// Activated experts per head {1, 2, 4, 8}.
    TopK,
}

impl AblationAxis {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "prompts" => Ok(AblationAxis::Prompts),
            "n_experts" => Ok(AblationAxis::NExperts),
            "top_k" => Ok(AblationAxis::TopK),
            other => Err(Error::Usage(format!(
                "unknown ablation axis '{other}' (prompts | n_experts | top_k)"
            ))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct AblationRow {
    pub setting: String,
    pub config_hash: String,
    pub report: MetricsReport,
}

/// Config variants along the axis, with human-readable setting labels.
pub fn axis_variants(base: &RunConfig, axis: AblationAxis) -> Result<Vec<(String, RunConfig)>> {
    let mut variants = Vec::new();
    match axis {
        AblationAxis::Prompts => {
            for (label, setting) in [
                ("prompts=none", PromptSetting::None),
                ("prompts=t", PromptSetting::TaskOnly),
                ("prompts=t+c", PromptSetting::TaskClue),
                ("prompts=t+c+m", PromptSetting::Full),
            ] {
                let mut cfg = base.clone();
                cfg.mode.prompts = setting;
                variants.push((label.to_string(), cfg));
            }
        }
        AblationAxis::NExperts => {
            for n in [16usize, 64, 256, 1024] {
                let mut cfg = base.clone();
                cfg.igma.n_experts = n;
                cfg.igma.top_k = cfg.igma.top_k.min(n);
                variants.push((format!("n_experts={n}"), cfg));
            }
        }
        AblationAxis::TopK => {
            for k in [1usize, 2, 4, 8] {
                let mut cfg = base.clone();
                cfg.igma.top_k = k.min(cfg.igma.n_experts);
                variants.push((format!("top_k={k}"), cfg));
            }
        }
    }
    for (_, cfg) in &variants {
        cfg.validate()?;
    }
    Ok(variants)
}

/// Train every variant (optionally on worker threads; each run is an
/// independent model, dataset synthesis is deterministic per config) and
/// collect one row per setting in axis order.
pub fn run_ablation(
    base: &RunConfig,
    axis: AblationAxis,
    threads: usize,
) -> Result<Vec<AblationRow>> {
    let variants = axis_variants(base, axis)?;
    let workers = threads.clamp(1, variants.len());
    let mut rows: Vec<Option<AblationRow>> = (0..variants.len()).map(|_| None).collect();
    let mut queue: Vec<(usize, String, RunConfig)> = variants
        .into_iter()
        .enumerate()
        .map(|(i, (label, cfg))| (i, label, cfg))
        .collect();

    while !queue.is_empty() {
        let chunk: Vec<_> = queue.drain(..queue.len().min(workers)).collect();
        let handles: Vec<_> = chunk
            .into_iter()
            .map(|(i, label, cfg)| {
                thread::spawn(move || -> Result<(usize, AblationRow)> {
                    let outcome = train(&cfg, None)?;
                    Ok((
                        i,
                        AblationRow {
                            setting: label,
                            config_hash: cfg.hash(),
                            report: outcome.report,
                        },
                    ))
                })
            })
            .collect();
        for h in handles {
            let (i, row) = h
                .join()
                .map_err(|_| Error::Numeric("ablation worker panicked".into()))??;
            rows[i] = Some(row);
        }
    }
    Ok(rows.into_iter().map(|r| r.expect("all runs joined")).collect())
}

pub fn ablation_table(rows: &[AblationRow]) -> String {
    let mut s = String::new();
    s.push_str(&format!(
        "{:<18} {:>8} {:>8} {:>10}  config\n",
        "setting", "hter", "auc", "final_loss"
    ));
    for r in rows {
        s.push_str(&format!(
            "{:<18} {:>8.4} {:>8.4} {:>10}  {}\n",
            r.setting,
            r.report.hter,
            r.report.auc,
            r.report
                .loss_curve
                .last()
                .map_or(String::from("-"), |l| format!("{l:.4}")),
            &r.config_hash[..16.min(r.config_hash.len())]
        ));
    }
    s
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut s = String::from("setting,hter,auc,eer_threshold,config_hash\n");
    for r in rows {
        s.push_str(&format!(
            "{},{:.6},{:.6},{:.6},{}\n",
            r.setting, r.report.hter, r.report.auc, r.report.eer_threshold, r.config_hash
        ));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn micro_cfg() -> RunConfig {
        let mut cfg = RunConfig::desk();
        cfg.backbone = BackboneConfig {
            image_size: 8,
            patch_size: 4,
            token_dim: 16,
            depth: 1,
            attn_heads: 2,
            mlp_ratio: 2,
            n_classes: 2,
        };
        cfg.igma.n_experts = 16;
        cfg.igma.query_dim = 4;
        cfg.igma.hidden_dim = 2;
        cfg.cpb.prompt_dim = 4;
        cfg.cpb.n_task_prompts = 2;
        cfg.cpb.clue_channels = 4;
        cfg.cpb.clue_stride1 = 2;
        cfg.cpb.clue_stride2 = 2;
        cfg.data.domains.truncate(2);
        cfg.data.held_out = cfg.data.domains[1].name.clone();
        cfg.data.n_per_domain = 8;
        cfg.optim.epochs = 1;
        cfg.optim.batch_size = 8;
        cfg.optim.log_every = 0;
        cfg
    }

    #[test]
    fn prompts_axis_has_the_four_expected_rows() {
        let rows = run_ablation(&micro_cfg(), AblationAxis::Prompts, 2).unwrap();
        let settings: Vec<&str> = rows.iter().map(|r| r.setting.as_str()).collect();
        assert_eq!(
            settings,
            vec!["prompts=none", "prompts=t", "prompts=t+c", "prompts=t+c+m"]
        );
        let mut hashes: Vec<&str> = rows.iter().map(|r| r.config_hash.as_str()).collect();
        hashes.sort_unstable();
        hashes.dedup();
        assert_eq!(hashes.len(), rows.len(), "each setting hashes distinctly");
    }

    #[test]
    fn expert_and_topk_axes_sweep_expected_values() {
        let variants = axis_variants(&micro_cfg(), AblationAxis::NExperts).unwrap();
        let ns: Vec<usize> = variants.iter().map(|(_, c)| c.igma.n_experts).collect();
        assert_eq!(ns, vec![16, 64, 256, 1024]);
        let variants = axis_variants(&micro_cfg(), AblationAxis::TopK).unwrap();
        let ks: Vec<usize> = variants.iter().map(|(_, c)| c.igma.top_k).collect();
        assert_eq!(ks, vec![1, 2, 4, 8]);
    }

    #[test]
    fn identical_hash_implies_identical_metrics() {
        let cfg = micro_cfg();
        let a = run_ablation(&cfg, AblationAxis::TopK, 2).unwrap();
        let b = run_ablation(&cfg, AblationAxis::TopK, 1).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.config_hash, y.config_hash);
            assert!(x.report.metrics_eq(&y.report));
        }
    }

    #[test]
    fn tables_render() {
        let rows = run_ablation(&micro_cfg(), AblationAxis::Prompts, 2).unwrap();
        let table = ablation_table(&rows);
        assert!(table.contains("prompts=t+c+m"));
        let csv = ablation_csv(&rows);
        assert_eq!(csv.lines().count(), rows.len() + 1);
    }
}
