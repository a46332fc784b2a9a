//! Training loop, evaluation, and report emission.
//!
//! A run is fully determined by its config: the dataset is synthesized from
//! `data.seed`, parameters from `seed`, and every stochastic step (batch
//! order, gating noise, modality masking) from seeds derived per epoch and
//! sample. Identical configs produce identical checkpoints and reports.

use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::backbone::{BigMoeModel, Mode};
use crate::checkpoint::save_checkpoint;
use crate::config::RunConfig;
use crate::data::{generate_dataset, leave_one_out_split, MultimodalSample, LABEL_LIVE};
use crate::error::{Error, Result};
use crate::metrics::{auc, eer_threshold, hter, ScoreSet};
use crate::rng::{derive_rng_indexed, mix_seed};
use crate::tensor::{zero_grads, AdamState, Tensor};

/// Per-split evaluation summary plus run provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub split: String,
    pub hter: f64,
    pub auc: f64,
    pub eer_threshold: f64,
    pub loss_curve: Vec<f64>,
    pub config_hash: String,
    pub seed: u64,
    pub wall_clock_secs: f64,
}

impl MetricsReport {
    pub fn text_table(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("split          : {}\n", self.split));
        s.push_str(&format!("hter           : {:.4}\n", self.hter));
        s.push_str(&format!("auc            : {:.4}\n", self.auc));
        s.push_str(&format!("eer_threshold  : {:.6}\n", self.eer_threshold));
        s.push_str(&format!("epochs_logged  : {}\n", self.loss_curve.len()));
        if let Some(last) = self.loss_curve.last() {
            s.push_str(&format!("final_loss     : {last:.6}\n"));
        }
        s.push_str(&format!("config_hash    : {}\n", self.config_hash));
        s.push_str(&format!("seed           : {}\n", self.seed));
        s.push_str(&format!("wall_clock_s   : {:.1}\n", self.wall_clock_secs));
        s
    }

    pub fn csv_header() -> &'static str {
        "split,hter,auc,eer_threshold,final_loss,config_hash,seed,wall_clock_s"
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{},{},{},{:.1}",
            self.split,
            self.hter,
            self.auc,
            self.eer_threshold,
            self.loss_curve
                .last()
                .map_or(String::from(""), |l| format!("{l:.6}")),
            self.config_hash,
            self.seed,
            self.wall_clock_secs
        )
    }

    /// The deterministic fields (everything except wall clock).
    pub fn metrics_eq(&self, other: &Self) -> bool {
        self.split == other.split
            && self.hter == other.hter
            && self.auc == other.auc
            && self.eer_threshold == other.eer_threshold
            && self.config_hash == other.config_hash
            && self.seed == other.seed
    }
}

pub struct TrainOutcome {
    pub model: BigMoeModel,
    pub report: MetricsReport,
    pub checkpoint_path: Option<PathBuf>,
}

/// Liveness scores (softmax live-class probability) for a sample list, in
/// evaluation mode: no gating noise, no masking.
pub fn score_samples(model: &BigMoeModel, samples: &[MultimodalSample]) -> Result<ScoreSet> {
    let mut scores = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len());
    for s in samples {
        let logits = model.forward(&s.mods, Mode::Eval)?;
        let probs = logits.softmax(1)?;
        scores.push(probs.data()[LABEL_LIVE as usize]);
        labels.push(s.label);
    }
    ScoreSet::new(scores, labels)
}

/// Metrics at the evaluation set's own EER threshold (the thresholding rule
/// used throughout the reports).
pub fn report_for(
    model: &BigMoeModel,
    samples: &[MultimodalSample],
    split: &str,
    loss_curve: Vec<f64>,
    wall_clock_secs: f64,
) -> Result<MetricsReport> {
    let scores = score_samples(model, samples)?;
    let (thr, _) = eer_threshold(&scores)?;
    Ok(MetricsReport {
        split: split.to_string(),
        hter: hter(&scores, thr)?,
        auc: auc(&scores)?,
        eer_threshold: thr,
        loss_curve,
        config_hash: model.cfg.hash(),
        seed: model.cfg.seed,
        wall_clock_secs,
    })
}

/// Deterministic dataset synthesis straight from the config.
pub fn synthesize_data(cfg: &RunConfig) -> Result<Vec<MultimodalSample>> {
    generate_dataset(
        &cfg.data.domains,
        cfg.data.n_per_domain,
        cfg.backbone.image_size,
        cfg.data.seed,
    )
}

/// Mini-batch Adam training on the leave-one-out train split; evaluates the
/// held-out split afterwards. Writes `model.bmck`, `report.txt`, and
/// `report.csv` into `out_dir` when given.
pub fn train(cfg: &RunConfig, out_dir: Option<&Path>) -> Result<TrainOutcome> {
    let samples = synthesize_data(cfg)?;
    train_with_samples(cfg, &samples, out_dir)
}

pub fn train_with_samples(
    cfg: &RunConfig,
    samples: &[MultimodalSample],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let (train_set, test_set) = leave_one_out_split(samples, &cfg.data.held_out)?;
    let model = BigMoeModel::init(cfg)?;
    let params = model.param_tensors();
    let mut adam = AdamState::new(
        cfg.optim.lr,
        cfg.optim.weight_decay,
        cfg.optim.beta1,
        cfg.optim.beta2,
        1e-8,
    );

    let mut loss_curve = Vec::with_capacity(cfg.optim.epochs);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    for epoch in 0..cfg.optim.epochs {
        let mut shuffle_rng = derive_rng_indexed(cfg.seed, "shuffle", &[epoch as u64]);
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for batch in order.chunks(cfg.optim.batch_size) {
            zero_grads(&params);
            let mut rows = Vec::with_capacity(batch.len());
            let mut labels = Vec::with_capacity(batch.len());
            for &idx in batch {
                let sample = &train_set[idx];
                let step_seed = mix_seed(mix_seed(cfg.seed, epoch as u64), idx as u64);
                rows.push(sample_forward_logits(&model, sample, step_seed)?);
                labels.push(sample.label as usize);
            }
            let refs: Vec<&Tensor> = rows.iter().collect();
            let logits = Tensor::concat(&refs, 0)?;
            let loss = logits.cross_entropy(&labels)?;
            let loss_val = loss.item();
            if !loss_val.is_finite() {
                return Err(Error::Numeric(format!(
                    "non-finite loss {loss_val} at epoch {epoch} (batch of {})",
                    batch.len()
                )));
            }
            loss.backward()?;
            adam.step(&params)?;
            epoch_loss += loss_val * batch.len() as f64;
            seen += batch.len();
        }
        let mean_loss = epoch_loss / seen.max(1) as f64;
        loss_curve.push(mean_loss);
        if cfg.optim.log_every > 0 && (epoch + 1) % cfg.optim.log_every == 0 {
            eprintln!("epoch {:>3}: loss {mean_loss:.6}", epoch + 1);
        }
    }

    let report = report_for(
        &model,
        &test_set,
        &format!("held_out:{}", cfg.data.held_out),
        loss_curve,
        start.elapsed().as_secs_f64(),
    )?;

    let checkpoint_path = match out_dir {
        Some(dir) => {
            std::fs::create_dir_all(dir)?;
            let path = dir.join("model.bmck");
            save_checkpoint(&path, &model, &cfg.to_toml())?;
            std::fs::write(dir.join("report.txt"), report.text_table())?;
            std::fs::write(
                dir.join("report.csv"),
                format!("{}\n{}\n", MetricsReport::csv_header(), report.csv_row()),
            )?;
            Some(path)
        }
        None => None,
    };
    Ok(TrainOutcome {
        model,
        report,
        checkpoint_path,
    })
}

fn sample_forward_logits(
    model: &BigMoeModel,
    sample: &MultimodalSample,
    seed: u64,
) -> Result<Tensor> {
    model.forward(&sample.mods, Mode::Train { seed })
}

/// Which side of the leave-one-out split to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitChoice {
    Train,
    Test,
}

/// Evaluate a model on its config's split, regenerating the dataset
/// deterministically from the embedded config.
pub fn evaluate(model: &BigMoeModel, split: SplitChoice) -> Result<MetricsReport> {
    let start = Instant::now();
    let samples = synthesize_data(&model.cfg)?;
    let (train_set, test_set) = leave_one_out_split(&samples, &model.cfg.data.held_out)?;
    let (set, name) = match split {
        SplitChoice::Train => (train_set, "train".to_string()),
        SplitChoice::Test => (test_set, format!("held_out:{}", model.cfg.data.held_out)),
    };
    report_for(model, &set, &name, Vec::new(), start.elapsed().as_secs_f64())
}
