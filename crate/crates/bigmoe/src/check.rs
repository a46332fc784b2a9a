//! Independent verification oracles: central finite differences, naive
//! nested-loop convolutions, exhaustive metric computations, and the runnable
//! suites behind the CLI `gradcheck` and `oracle` subcommands.
//!
//! Everything here is deliberately written the slow, obvious way and shares
//! no code with the implementation paths it checks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Assert elementwise closeness with an absolute tolerance.
pub fn assert_close(actual: &[f64], expected: &[f64], tol: f64) {
    assert_eq!(actual.len(), expected.len(), "length mismatch");
    for (i, (a, e)) in actual.iter().zip(expected).enumerate() {
        assert!(
            (a - e).abs() <= tol,
            "element {i}: {a} vs {e} (tol {tol})"
        );
    }
}

/// Relative error with an absolute floor for near-zero references.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Central finite-difference gradient of `f` at `x`, step `h`.
pub fn finite_diff_grad<F: FnMut(&[f64]) -> f64>(x: &[f64], h: f64, mut f: F) -> Vec<f64> {
    let mut g = vec![0.0; x.len()];
    let mut probe = x.to_vec();
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let fp = f(&probe);
        probe[i] = x[i] - h;
        let fm = f(&probe);
        probe[i] = x[i];
        g[i] = (fp - fm) / (2.0 * h);
    }
    g
}

/// Worst relative error between the autodiff gradient and central finite
/// differences for a random parameter of `shape` fed through `build`.
pub fn finite_diff_max_err<F>(rng: &mut ChaCha8Rng, shape: &[usize], h: f64, build: F) -> f64
where
    F: Fn(&Tensor) -> Tensor,
{
    let numel: usize = shape.iter().product();
    let x0: Vec<f64> = (0..numel).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let x = Tensor::from_vec(x0.clone(), shape).unwrap().param();
    let loss = build(&x);
    assert_eq!(loss.numel(), 1, "finite_diff_max_err requires scalar losses");
    x.zero_grad();
    loss.backward().unwrap();
    let analytic = x.grad().unwrap();

    let numeric = finite_diff_grad(&x0, h, |vals| {
        let xp = Tensor::from_vec(vals.to_vec(), shape).unwrap();
        build(&xp).item()
    });

    analytic
        .iter()
        .zip(&numeric)
        .map(|(a, n)| rel_err(*a, *n))
        .fold(0.0, f64::max)
}

/// Build a random parameter of `shape`, run `build` to get a scalar loss,
/// and compare the autodiff gradient against central finite differences.
///
/// `tol` bounds the relative error (with unit floor) per component.
pub fn finite_diff_check<F>(rng: &mut ChaCha8Rng, shape: &[usize], h: f64, tol: f64, build: F)
where
    F: Fn(&Tensor) -> Tensor,
{
    let e = finite_diff_max_err(rng, shape, h, build);
    assert!(e < tol, "gradient mismatch: rel err {e:.3e} >= tol {tol:.1e}");
}

/// Six-loop reference convolution (cross-correlation), returning the output
/// plus its spatial extents.
#[allow(clippy::too_many_arguments)]
pub fn naive_conv2d(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
) -> (Vec<f64>, usize, usize) {
    let ho = (h + 2 * padding - kh) / stride + 1;
    let wo = (w + 2 * padding - kw) / stride + 1;
    let mut out = vec![0.0; co * ho * wo];
    for oc in 0..co {
        for oh in 0..ho {
            for ow in 0..wo {
                let mut acc = 0.0;
                for ic in 0..ci {
                    for r in 0..kh {
                        for c in 0..kw {
                            let ih = (oh * stride + r) as isize - padding as isize;
                            let iw = (ow * stride + c) as isize - padding as isize;
                            if ih >= 0 && ih < h as isize && iw >= 0 && iw < w as isize {
                                acc += x[ic * h * w + ih as usize * w + iw as usize]
                                    * weight[((oc * ci + ic) * kh + r) * kw + c];
                            }
                        }
                    }
                }
                out[oc * ho * wo + oh * wo + ow] = acc;
            }
        }
    }
    (out, ho, wo)
}

/// Per-pixel reference for central-difference convolution:
/// `y = conv(x, w) - theta * x_center * sum(w taps)` per output channel.
#[allow(clippy::too_many_arguments)]
pub fn naive_cdc2d(
    x: &[f64],
    ci: usize,
    h: usize,
    w: usize,
    weight: &[f64],
    co: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    padding: usize,
    theta: f64,
) -> Vec<f64> {
    let (vanilla, ho, wo) = naive_conv2d(x, ci, h, w, weight, co, kh, kw, stride, padding);
    let mut out = vanilla;
    for oc in 0..co {
        for oh in 0..ho {
            for ow in 0..wo {
                let ihc = (oh * stride + kh / 2) as isize - padding as isize;
                let iwc = (ow * stride + kw / 2) as isize - padding as isize;
                let mut diff = 0.0;
                if ihc >= 0 && ihc < h as isize && iwc >= 0 && iwc < w as isize {
                    for ic in 0..ci {
                        let taps: f64 = (0..kh * kw)
                            .map(|t| weight[(oc * ci + ic) * kh * kw + t])
                            .sum();
                        diff += x[ic * h * w + ihc as usize * w + iwc as usize] * taps;
                    }
                }
                out[oc * ho * wo + oh * wo + ow] -= theta * diff;
            }
        }
    }
    out
}

/// Dense mixture reference for one head: evaluates every expert with plain
/// scalar math and combines with the given per-expert weights (zero for
/// non-selected experts). Experts are `up_e * gelu(down_e^T x)` with
/// `down_e` stored `[d, h]` and `up_e` stored `[h, d]`, both row-major.
pub fn dense_mixture_oracle(
    x: &[f64],
    downs: &[Vec<f64>],
    ups: &[Vec<f64>],
    d: usize,
    h: usize,
    weight_by_expert: &[f64],
) -> Vec<f64> {
    let gelu = |v: f64| {
        0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v * v * v)).tanh())
    };
    let mut out = vec![0.0; d];
    for (e, &w) in weight_by_expert.iter().enumerate() {
        if w == 0.0 {
            continue;
        }
        let mut hidden = vec![0.0; h];
        for j in 0..h {
            let mut acc = 0.0;
            for i in 0..d {
                acc += x[i] * downs[e][i * h + j];
            }
            hidden[j] = gelu(acc);
        }
        for i in 0..d {
            let mut acc = 0.0;
            for j in 0..h {
                acc += hidden[j] * ups[e][j * d + i];
            }
            out[i] += w * acc;
        }
    }
    out
}

/// Outcome of one named check.
#[derive(Debug, Clone)]
pub struct CheckOutcome {
    pub name: String,
    pub passed: bool,
    pub detail: String,
}

impl CheckOutcome {
    pub fn new(name: &str, passed: bool, detail: String) -> Self {
        CheckOutcome {
            name: name.to_string(),
            passed,
            detail,
        }
    }
}

pub fn render_outcomes(outcomes: &[CheckOutcome]) -> String {
    let mut s = String::new();
    for o in outcomes {
        s.push_str(&format!(
            "{} {}: {}\n",
            if o.passed { "PASS" } else { "FAIL" },
            o.name,
            o.detail
        ));
    }
    s
}

pub fn all_passed(outcomes: &[CheckOutcome]) -> Result<()> {
    if outcomes.iter().all(|o| o.passed) {
        Ok(())
    } else {
        Err(Error::Numeric("one or more checks failed".into()))
    }
}

// ── runnable suites (CLI `oracle` / `gradcheck`, acceptance tests) ──────

/// Finite-difference checks of every elementary differentiable operation at
/// the elementary-op tolerance (rel err < 1e-5).
pub fn gradcheck_ops_suite(seed: u64) -> Vec<CheckOutcome> {
    let tol = 1e-5;
    let h = 1e-5;
    let mut rng = crate::rng::derive_rng(seed, "gradcheck-ops");
    let mut outcomes = Vec::new();
    let mut run = |name: &str, shape: &[usize], f: &dyn Fn(&Tensor) -> Tensor| {
        let e = finite_diff_max_err(&mut rng, shape, h, f);
        outcomes.push(CheckOutcome::new(
            &format!("gradcheck/{name}"),
            e < tol,
            format!("max rel err {e:.3e} (tol {tol:.0e})"),
        ));
    };

    run("add_mul_scalar_broadcast", &[1], &|x| {
        let v = Tensor::from_vec(vec![0.4, -1.2, 2.2], &[3]).unwrap();
        v.mul(x).unwrap().add(x).unwrap().tanh().sum_all()
    });
    run("gelu", &[3, 3], &|x| x.gelu().sum_all());
    run("tanh", &[5], &|x| x.tanh().sum_all());
    run("sigmoid", &[5], &|x| x.sigmoid().sum_all());
    run("softmax", &[3, 4], &|x| {
        x.softmax(1).unwrap().mul(x).unwrap().sum_all()
    });
    run("layer_norm", &[2, 5], &|x| {
        let g = Tensor::from_vec(vec![1.1, 0.9, 1.0, 1.2, 0.8], &[5]).unwrap();
        let b = Tensor::from_vec(vec![0.1, 0.0, -0.1, 0.2, 0.0], &[5]).unwrap();
        x.layer_norm(&g, &b, 1e-5).unwrap().mul(x).unwrap().sum_all()
    });
    run("matmul", &[3, 4], &|x| {
        let w = Tensor::from_vec((0..8).map(|v| v as f64 / 7.0 - 0.5).collect(), &[4, 2]).unwrap();
        x.matmul(&w).unwrap().gelu().sum_all()
    });
    run("transpose_reshape_concat", &[3, 2], &|x| {
        let t = x.transpose().unwrap().reshape(&[3, 2]).unwrap();
        Tensor::concat(&[x, &t], 1).unwrap().gelu().sum_all()
    });
    run("slice_row_bias", &[4, 3], &|x| {
        let b = Tensor::from_vec(vec![0.2, -0.3, 0.4], &[3]).unwrap();
        x.add_bias(&b)
            .unwrap()
            .slice_rows(1, 2)
            .unwrap()
            .tanh()
            .sum_all()
    });
    run("broadcast_mean_rows", &[4], &|x| {
        x.broadcast_rows(3).unwrap().mean_rows().unwrap().gelu().sum_all()
    });
    run("cross_entropy", &[3, 2], &|x| {
        x.cross_entropy(&[0, 1, 1]).unwrap()
    });
    run("gather2d", &[3, 4], &|x| {
        x.gather2d(&[0, 2, 1], &[3, 0, 1]).unwrap().tanh().sum_all()
    });
    run("conv2d_input", &[2, 4, 4], &|x| {
        let w = Tensor::from_vec(
            (0..2 * 2 * 9).map(|v| (v as f64 - 17.0) / 29.0).collect(),
            &[2, 2, 3, 3],
        )
        .unwrap();
        x.conv2d(&w, None, 1, 1).unwrap().gelu().sum_all()
    });
    run("conv2d_weight", &[2, 1, 3, 3], &|w| {
        let x = Tensor::from_vec((0..16).map(|v| v as f64 / 15.0 - 0.5).collect(), &[1, 4, 4])
            .unwrap();
        x.conv2d(w, None, 2, 1).unwrap().tanh().sum_all()
    });
    run("conv1d", &[7], &|x| {
        let k = Tensor::from_vec(vec![0.3, -0.4, 0.2], &[3]).unwrap();
        x.conv1d_same(&k).unwrap().sigmoid().sum_all()
    });
    run("center_sample", &[1, 4, 4], &|x| {
        x.center_sample(2, 1, 3, 3).unwrap().gelu().sum_all()
    });
    run("tap_sum", &[2, 1, 3, 3], &|w| w.tap_sum().unwrap().tanh().sum_all());
    run("spatial_to_tokens", &[2, 3, 3], &|x| {
        x.spatial_to_tokens().unwrap().gelu().sum_all()
    });
    run("cdc", &[1, 1, 3, 3], &|w| {
        let x = Tensor::from_vec((0..25).map(|v| (v as f64) / 25.0 - 0.4).collect(), &[1, 5, 5])
            .unwrap();
        let k = crate::cpb::CdcKernel::new(
            w.clone(),
            Tensor::from_vec(vec![0.05], &[1]).unwrap(),
            0.7,
        )
        .unwrap();
        k.forward(&x, 1, 1).unwrap().gelu().sum_all()
    });
    run("eca", &[3], &|k| {
        let x = Tensor::from_vec((0..8).map(|v| v as f64 / 8.0 - 0.4).collect(), &[2, 4]).unwrap();
        crate::cpb::eca_forward(&x, k).unwrap().sum_all()
    });
    outcomes
}

/// The small full-model configuration used by the end-to-end gradient check:
/// token dim 16, depth 2, 4 experts.
pub fn gradcheck_model_config() -> crate::config::RunConfig {
    let mut cfg = crate::config::RunConfig::desk();
    cfg.backbone.image_size = 8;
    cfg.backbone.patch_size = 4;
    cfg.backbone.token_dim = 16;
    cfg.backbone.depth = 2;
    cfg.backbone.attn_heads = 2;
    cfg.backbone.mlp_ratio = 2;
    cfg.igma.n_experts = 4;
    cfg.igma.top_k = 2;
    cfg.igma.n_heads = 2;
    cfg.igma.query_dim = 4;
    cfg.igma.hidden_dim = 2;
    cfg.cpb.prompt_dim = 4;
    cfg.cpb.n_task_prompts = 2;
    cfg.cpb.eca_kernel = 3;
    cfg.cpb.clue_channels = 4;
    cfg.cpb.clue_stride1 = 2;
    cfg.cpb.clue_stride2 = 2;
    cfg
}

/// Finite-difference check of every parameter of a small full model
/// (evaluation-mode forward, cross-entropy loss) at rel err < 1e-4.
/// One outcome per named parameter.
pub fn gradcheck_model_suite(seed: u64) -> Vec<CheckOutcome> {
    use crate::backbone::{BigMoeModel, Mode};
    use crate::cpb::ModalityTensors;

    let tol = 1e-4;
    let h = 1e-5;
    let cfg = gradcheck_model_config();
    let model = BigMoeModel::init(&cfg).expect("valid config");
    let mut rng = crate::rng::derive_rng(seed, "gradcheck-model");
    // move every parameter off its init value (zero-initialized projections
    // would otherwise zero out entire gradient paths)
    for (_, p) in model.params() {
        let jitter = Tensor::randn(&mut rng, &p.shape(), 0.15);
        let bumped: Vec<f64> = p
            .to_vec()
            .iter()
            .zip(jitter.to_vec())
            .map(|(a, b)| a + b)
            .collect();
        p.set_data(&bumped).unwrap();
    }
    let mods = ModalityTensors {
        rgb: Tensor::randn(&mut rng, &[3, 8, 8], 0.4),
        depth: Tensor::randn(&mut rng, &[1, 8, 8], 0.4),
        ir: Tensor::randn(&mut rng, &[1, 8, 8], 0.4),
    };
    let loss_of = |model: &BigMoeModel| -> f64 {
        model
            .forward(&mods, Mode::Eval)
            .unwrap()
            .cross_entropy(&[1])
            .unwrap()
            .item()
    };

    let params = model.params();
    crate::tensor::zero_grads(&model.param_tensors());
    let loss = model
        .forward(&mods, Mode::Eval)
        .unwrap()
        .cross_entropy(&[1])
        .unwrap();
    loss.backward().unwrap();

    let mut outcomes = Vec::new();
    for (name, p) in &params {
        let analytic = p.grad().unwrap();
        let x0 = p.to_vec();
        let numeric = finite_diff_grad(&x0, h, |vals| {
            p.set_data(vals).unwrap();
            loss_of(&model)
        });
        p.set_data(&x0).unwrap();
        let worst = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| rel_err(*a, *n))
            .fold(0.0, f64::max);
        outcomes.push(CheckOutcome::new(
            &format!("gradcheck/model/{name}"),
            worst < tol,
            format!("max rel err {worst:.3e} (tol {tol:.0e})"),
        ));
    }
    outcomes
}

/// PKR vs brute force over every pool size including the full-scale
/// 1600-expert / k=2 configuration; ids must match exactly and scores to
/// 1e-9.
pub fn pkr_exactness_suite(trials_per_n: usize, seed: u64) -> Vec<CheckOutcome> {
    use crate::routing::{brute_force_topk, pkr_scores, ProductKeyIndex};

    let mut outcomes = Vec::new();
    for &n in &[4usize, 16, 64, 256, 1600] {
        let mut rng = crate::rng::derive_rng(seed ^ n as u64, "pkr-suite");
        let dq = 16usize;
        let mut worst = 0.0f64;
        let mut mismatches = 0usize;
        for trial in 0..trials_per_n {
            let index = ProductKeyIndex::random(&mut rng, n, dq).expect("valid index");
            let k = if trial % 4 == 0 {
                2.min(n)
            } else {
                1 + (trial * 7 + 3) % n.min(24)
            };
            let q = Tensor::randn(&mut rng, &[dq], 1.0);
            let fast = pkr_scores(&q, &index, k).expect("pkr");
            let slow = brute_force_topk(&q, &index, k).expect("brute force");
            if fast.expert_ids != slow.expert_ids {
                mismatches += 1;
                continue;
            }
            for (a, b) in fast.raw_scores.iter().zip(&slow.raw_scores) {
                worst = worst.max((a - b).abs());
            }
        }
        outcomes.push(CheckOutcome::new(
            &format!("pkr/N={n}"),
            mismatches == 0 && worst < 1e-9,
            format!(
                "{trials_per_n} trials, {mismatches} id mismatches, worst score gap {worst:.2e}"
            ),
        ));
    }
    outcomes
}

/// Metric implementations vs exhaustive oracles on random score sets, plus
/// the monotone-transform invariance of AUC.
pub fn metrics_oracle_suite(n_sets: usize, seed: u64) -> Vec<CheckOutcome> {
    use crate::metrics::*;

    let mut rng = crate::rng::derive_rng(seed, "metrics-suite");
    let mut auc_fail = 0usize;
    let mut eer_fail = 0usize;
    let mut mono_fail = 0usize;
    for trial in 0..n_sets {
        let n = rng.gen_range(2..=200);
        let quantize = trial % 2 == 0;
        let (scores, labels) = loop {
            let scores: Vec<f64> = (0..n)
                .map(|_| {
                    let v: f64 = rng.gen_range(0.0..1.0);
                    if quantize {
                        (v * 10.0).round() / 10.0
                    } else {
                        v
                    }
                })
                .collect();
            let labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2) as u8).collect();
            if labels.iter().any(|&l| l == 0) && labels.iter().any(|&l| l == 1) {
                break (scores, labels);
            }
        };
        let set = ScoreSet::new(scores, labels).expect("valid set");
        if auc(&set).unwrap() != auc_pairwise_oracle(&set).unwrap() {
            auc_fail += 1;
        }
        let (t1, e1) = eer_threshold(&set).unwrap();
        let (t2, e2) = eer_sweep_oracle(&set).unwrap();
        if t1 != t2 || e1 != e2 {
            eer_fail += 1;
        }
        let transformed = ScoreSet::new(
            set.scores.iter().map(|&s| (3.0 * s).exp()).collect(),
            set.labels.clone(),
        )
        .unwrap();
        if auc(&transformed).unwrap() != auc(&set).unwrap() {
            mono_fail += 1;
        }
    }
    vec![
        CheckOutcome::new(
            "metrics/auc-pairwise",
            auc_fail == 0,
            format!("{n_sets} sets, {auc_fail} mismatches"),
        ),
        CheckOutcome::new(
            "metrics/eer-sweep",
            eer_fail == 0,
            format!("{n_sets} sets, {eer_fail} mismatches"),
        ),
        CheckOutcome::new(
            "metrics/auc-monotone-invariance",
            mono_fail == 0,
            format!("{n_sets} sets, {mono_fail} mismatches"),
        ),
    ]
}
