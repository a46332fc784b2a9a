//! Anti-spoofing evaluation metrics: HTER, AUC, and EER threshold selection.
//!
//! Scores are liveness scores (higher = more live); labels are 1 = live,
//! 0 = spoof. A sample is accepted when `score >= threshold`, so
//! FAR = accepted spoofs / spoofs and FRR = rejected lives / lives.

use crate::error::{Error, Result};

/// Paired liveness scores and binary labels.
#[derive(Debug, Clone)]
pub struct ScoreSet {
    pub scores: Vec<f64>,
    pub labels: Vec<u8>,
}

impl ScoreSet {
    pub fn new(scores: Vec<f64>, labels: Vec<u8>) -> Result<Self> {
        if scores.is_empty() {
            return Err(Error::Usage("empty score set".into()));
        }
        if scores.len() != labels.len() {
            return Err(Error::Usage(format!(
                "{} scores vs {} labels",
                scores.len(),
                labels.len()
            )));
        }
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::Input("labels must be 0 or 1".into()));
        }
        Ok(ScoreSet { scores, labels })
    }

    fn class_counts(&self) -> (usize, usize) {
        let live = self.labels.iter().filter(|&&l| l == 1).count();
        (live, self.labels.len() - live)
    }

    fn require_both_classes(&self) -> Result<(usize, usize)> {
        let (live, spoof) = self.class_counts();
        if live == 0 || spoof == 0 {
            return Err(Error::Usage(
                "metric requires both live and spoof samples".into(),
            ));
        }
        Ok((live, spoof))
    }
}

/// (FAR, FRR) at a threshold: spoofs scored `>= threshold` are false accepts,
/// lives scored `< threshold` are false rejects.
pub fn far_frr(s: &ScoreSet, threshold: f64) -> Result<(f64, f64)> {
    let (live, spoof) = s.require_both_classes()?;
    let mut fa = 0usize;
    let mut fr = 0usize;
    for (&sc, &lb) in s.scores.iter().zip(&s.labels) {
        if lb == 0 && sc >= threshold {
            fa += 1;
        }
        if lb == 1 && sc < threshold {
            fr += 1;
        }
    }
    Ok((fa as f64 / spoof as f64, fr as f64 / live as f64))
}

/// Half total error rate `(FAR + FRR) / 2` at the given threshold.
pub fn hter(s: &ScoreSet, threshold: f64) -> Result<f64> {
    let (far, frr) = far_frr(s, threshold)?;
    Ok((far + frr) / 2.0)
}

/// Area under the ROC curve via the Mann-Whitney statistic with tie-aware
/// average ranks; equals the probability that a random live sample outscores
/// a random spoof sample, ties counted half.
pub fn auc(s: &ScoreSet) -> Result<f64> {
    let (live, spoof) = s.require_both_classes()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    // rank sum of live samples, average ranks over tie groups
    let mut rank_sum_live = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j (1-based) share the average rank
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if s.labels[idx] == 1 {
                rank_sum_live += avg_rank;
            }
        }
        i = j;
    }
    let u = rank_sum_live - (live * (live + 1)) as f64 / 2.0;
    Ok(u / (live as f64 * spoof as f64))
}

/// Threshold among midpoints of consecutive sorted unique scores minimizing
/// `|FAR - FRR|` (ties resolved toward the lower threshold), plus the
/// resulting equal error rate `(FAR + FRR)/2`.
pub fn eer_threshold(s: &ScoreSet) -> Result<(f64, f64)> {
    s.require_both_classes()?;
    let mut uniq = s.scores.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let candidates: Vec<f64> = if uniq.len() == 1 {
        vec![uniq[0]]
    } else {
        uniq.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
    };
    let mut best = (candidates[0], f64::INFINITY, 0.0);
    for &thr in &candidates {
        let (far, frr) = far_frr(s, thr)?;
        let gap = (far - frr).abs();
        if gap < best.1 {
            best = (thr, gap, (far + frr) / 2.0);
        }
    }
    Ok((best.0, best.2))
}

/// Exhaustive pairwise AUC oracle: counts live/spoof pairs directly.
pub fn auc_pairwise_oracle(s: &ScoreSet) -> Result<f64> {
    let (live, spoof) = s.require_both_classes()?;
    let mut wins = 0.0;
    for (i, (&si, &li)) in s.scores.iter().zip(&s.labels).enumerate() {
        if li != 1 {
            continue;
        }
        for (j, (&sj, &lj)) in s.scores.iter().zip(&s.labels).enumerate() {
            if i == j || lj != 0 {
                continue;
            }
            if si > sj {
                wins += 1.0;
            } else if si == sj {
                wins += 0.5;
            }
        }
    }
    Ok(wins / (live as f64 * spoof as f64))
}

/// Trapezoidal integration of the ROC curve built by sweeping thresholds
/// over the distinct scores.
pub fn auc_trapezoid_oracle(s: &ScoreSet) -> Result<f64> {
    let (live, spoof) = s.require_both_classes()?;
    let mut order: Vec<usize> = (0..s.scores.len()).collect();
    order.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && s.scores[order[j]] == s.scores[order[i]] {
            if s.labels[order[j]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / spoof as f64, tp as f64 / live as f64));
        i = j;
    }
    let mut area = 0.0;
    for w in points.windows(2) {
        area += (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0;
    }
    Ok(area)
}

/// Naive EER oracle: recount FAR/FRR from scratch at every candidate.
pub fn eer_sweep_oracle(s: &ScoreSet) -> Result<(f64, f64)> {
    s.require_both_classes()?;
    let mut uniq = s.scores.clone();
    uniq.sort_by(f64::total_cmp);
    uniq.dedup();
    let candidates: Vec<f64> = if uniq.len() == 1 {
        vec![uniq[0]]
    } else {
        uniq.windows(2).map(|w| (w[0] + w[1]) / 2.0).collect()
    };
    let mut best: Option<(f64, f64, f64)> = None;
    for &thr in &candidates {
        let mut fa = 0usize;
        let mut fr = 0usize;
        let mut n_live = 0usize;
        let mut n_spoof = 0usize;
        for (&sc, &lb) in s.scores.iter().zip(&s.labels) {
            if lb == 1 {
                n_live += 1;
                if sc < thr {
                    fr += 1;
                }
            } else {
                n_spoof += 1;
                if sc >= thr {
                    fa += 1;
                }
            }
        }
        let far = fa as f64 / n_spoof as f64;
        let frr = fr as f64 / n_live as f64;
        let gap = (far - frr).abs();
        match best {
            Some((_, g, _)) if g <= gap => {}
            _ => best = Some((thr, gap, (far + frr) / 2.0)),
        }
    }
    let (thr, _, eer) = best.expect("candidates nonempty");
    Ok((thr, eer))
}
