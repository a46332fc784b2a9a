//! Acceptance suite: one test per criterion, each printing a PASS line with
//! its measured margin (run with `--nocapture` to see them). Tolerances are
//! pinned in the asserts.

use std::time::Instant;

use bigmoe::backbone::{BigMoeModel, ForwardOptions, Mode, PromptPerturb};
use bigmoe::check::{
    all_passed, gradcheck_model_config, gradcheck_model_suite, gradcheck_ops_suite,
    metrics_oracle_suite, pkr_exactness_suite, render_outcomes,
};
use bigmoe::checkpoint::{load_checkpoint, save_checkpoint};
use bigmoe::config::RunConfig;
use bigmoe::cpb::{apply_modality_mask, CdcKernel, ModalityTensors, PromptSetting};
use bigmoe::igma::{IgmaAdapter, IgmaConfig, RoutingCtx};
use bigmoe::rng::derive_rng;
use bigmoe::tensor::{zero_grads, Tensor};
use bigmoe::train::{evaluate, train, SplitChoice};
use bigmoe::Result;

fn random_mods(seed: u64, size: usize) -> ModalityTensors {
    let mut rng = derive_rng(seed, "acceptance-mods");
    ModalityTensors {
        rgb: Tensor::randn(&mut rng, &[3, size, size], 0.4),
        depth: Tensor::randn(&mut rng, &[1, size, size], 0.4),
        ir: Tensor::randn(&mut rng, &[1, size, size], 0.4),
    }
}

/// Criterion 1: PKR exactness against brute force for
/// N in {4, 16, 64, 256, 1600} at >= 200 trials each, under 60 s.
#[test]
fn criterion_1_pkr_exactness() {
    let start = Instant::now();
    let outcomes = pkr_exactness_suite(200, 42);
    let elapsed = start.elapsed().as_secs_f64();
    print!("{}", render_outcomes(&outcomes));
    all_passed(&outcomes).expect("pkr exactness");
    assert!(elapsed < 60.0, "pkr suite took {elapsed:.1}s (limit 60s)");
    println!("criterion 1 PASS: pkr == brute force on 1000 trials in {elapsed:.1}s");
}

/// Criterion 2: finite-difference gradients for every differentiable op
/// (rel err < 1e-5) and a full d=16 / depth=2 / N=4 model (rel err < 1e-4),
/// under 5 minutes.
#[test]
fn criterion_2_gradient_suite() {
    let start = Instant::now();
    let ops = gradcheck_ops_suite(42);
    let model = gradcheck_model_suite(42);
    let elapsed = start.elapsed().as_secs_f64();
    for o in ops.iter().chain(&model) {
        assert!(o.passed, "{}: {}", o.name, o.detail);
    }
    assert!(elapsed < 300.0, "gradient suite took {elapsed:.1}s (limit 300s)");
    println!(
        "criterion 2 PASS: {} op checks + {} model parameters match finite differences in {elapsed:.1}s",
        ops.len(),
        model.len()
    );
}

/// Criterion 3: with routing frozen and replayed, zeroing or perturbing all
/// prompt tokens leaves the logits bit-identical and the expert-parameter
/// gradients unchanged; 50 random trials.
#[test]
fn criterion_3_isolation_property() -> Result<()> {
    let mut base_cfg = gradcheck_model_config();
    base_cfg.mode.prompts = PromptSetting::Full;
    for trial in 0..50u64 {
        let mut cfg = base_cfg.clone();
        cfg.seed = 1000 + trial;
        let model = BigMoeModel::init(&cfg)?;
        // randomize the zero-initialized projections so the adapters matter
        let mut rng = derive_rng(trial, "iso-jitter");
        for (_, p) in model.params() {
            let jitter = Tensor::randn(&mut rng, &p.shape(), 0.1);
            let bumped: Vec<f64> =
                p.to_vec().iter().zip(jitter.to_vec()).map(|(a, b)| a + b).collect();
            p.set_data(&bumped)?;
        }
        let mods = random_mods(trial, cfg.backbone.image_size);

        let captured = model.forward_ext(
            &mods,
            Mode::Eval,
            ForwardOptions { capture: true, ..Default::default() },
        )?;
        let trace = captured.trace.expect("captured");

        let expert_params = model.expert_params();
        let run = |perturb: Option<PromptPerturb>| -> Result<(Vec<f64>, Vec<Vec<f64>>)> {
            zero_grads(&expert_params);
            let out = model.forward_ext(
                &mods,
                Mode::Eval,
                ForwardOptions {
                    replay: Some(&trace),
                    prompt_perturb: perturb,
                    ..Default::default()
                },
            )?;
            out.logits.cross_entropy(&[1])?.backward()?;
            let grads = expert_params.iter().map(|p| p.grad().unwrap()).collect();
            Ok((out.logits.to_vec(), grads))
        };

        let (logits_base, grads_base) = run(None)?;
        let (logits_zero, grads_zero) = run(Some(PromptPerturb::Zero))?;
        let (logits_noise, grads_noise) = run(Some(PromptPerturb::Noise(trial * 31 + 7)))?;

        assert_eq!(logits_base, captured.logits.to_vec(), "trial {trial}: replay != online");
        assert_eq!(logits_base, logits_zero, "trial {trial}: zeroed prompts changed logits");
        assert_eq!(logits_base, logits_noise, "trial {trial}: noisy prompts changed logits");
        assert_eq!(grads_base, grads_zero, "trial {trial}: zeroed prompts changed expert grads");
        assert_eq!(grads_base, grads_noise, "trial {trial}: noisy prompts changed expert grads");
    }
    println!("criterion 3 PASS: 50 trials, prompts cannot reach logits or expert gradients under frozen routing");
    Ok(())
}

/// Criterion 4: CDC identities. theta = 0 equals vanilla convolution (1e-9),
/// theta = 1 on constant input yields zeros, and cdc(theta) is pointwise
/// linear in theta (1e-9).
#[test]
fn criterion_4_cdc_identities() -> Result<()> {
    let mut rng = derive_rng(4, "cdc-accept");
    let mut worst_vanilla = 0.0f64;
    let mut worst_const = 0.0f64;
    let mut worst_linear = 0.0f64;
    for trial in 0..20 {
        let ci = 1 + trial % 3;
        let co = 1 + (trial / 2) % 3;
        let x = Tensor::randn(&mut rng, &[ci, 6, 6], 1.0);
        let w = Tensor::randn(&mut rng, &[co, ci, 3, 3], 0.5);
        let b = Tensor::randn(&mut rng, &[co], 0.3);
        let stride = 1 + trial % 2;

        let k0 = CdcKernel::new(w.clone(), b.clone(), 0.0)?;
        let vanilla = x.conv2d(&w, Some(&b), stride, 1)?;
        for (a, v) in k0.forward(&x, stride, 1)?.to_vec().iter().zip(vanilla.to_vec()) {
            worst_vanilla = worst_vanilla.max((a - v).abs());
        }

        let k1 = CdcKernel::new(w.clone(), Tensor::zeros(&[co]), 1.0)?;
        let constant = Tensor::full(&[ci, 6, 6], 0.41);
        for v in k1.forward(&constant, 1, 0)?.to_vec() {
            worst_const = worst_const.max(v.abs());
        }

        let theta = 0.1 + 0.8 * (trial as f64) / 20.0;
        let kt = CdcKernel::new(w.clone(), b.clone(), theta)?;
        let y_t = kt.forward(&x, stride, 1)?.to_vec();
        let y_0 = k0.forward(&x, stride, 1)?.to_vec();
        let y_1 = CdcKernel::new(w.clone(), b.clone(), 1.0)?
            .forward(&x, stride, 1)?
            .to_vec();
        for i in 0..y_t.len() {
            let blended = (1.0 - theta) * y_0[i] + theta * y_1[i];
            worst_linear = worst_linear.max((y_t[i] - blended).abs());
        }
    }
    assert!(worst_vanilla < 1e-9, "theta=0 gap {worst_vanilla:.2e}");
    assert!(worst_const < 1e-9, "theta=1 constant-input gap {worst_const:.2e}");
    assert!(worst_linear < 1e-9, "theta linearity gap {worst_linear:.2e}");
    println!(
        "criterion 4 PASS: cdc identities hold (gaps {worst_vanilla:.1e} / {worst_const:.1e} / {worst_linear:.1e})"
    );
    Ok(())
}

/// Criterion 5: gating contracts. Selected weights sum to 1 +- 1e-12,
/// non-selected experts contribute exactly zero to output and gradient, and
/// noise_scale = 0 reproduces the deterministic path exactly.
#[test]
fn criterion_5_gating_contracts() -> Result<()> {
    let cfg = IgmaConfig {
        n_experts: 16,
        top_k: 3,
        n_heads: 2,
        query_dim: 8,
        noise_scale: 0.0,
        hidden_dim: 2,
    };
    let mut worst_sum = 0.0f64;
    for trial in 0..25u64 {
        let mut rng = derive_rng(trial, "gate-accept");
        let adapter = IgmaAdapter::init(&mut rng, &cfg, 6, 4)?;
        for up in &adapter.pool.up {
            let fresh = Tensor::randn(&mut rng, &up.shape(), 0.4);
            up.set_data(&fresh.to_vec())?;
        }
        let tokens = Tensor::randn(&mut rng, &[4, 6], 1.0);
        let summary = Tensor::randn(&mut rng, &[4], 1.0);

        let all_params: Vec<Tensor> = adapter
            .pool
            .down
            .iter()
            .chain(adapter.pool.up.iter())
            .cloned()
            .collect();
        zero_grads(&all_params);
        let out = adapter.forward(
            &tokens,
            &summary,
            RoutingCtx::Online { noise_scale: 0.0, seed: trial, capture: true },
        )?;
        out.residual.gelu().sum_all().backward()?;
        let trace = out.trace.expect("captured");

        let mut selected = std::collections::HashSet::new();
        for head in &trace {
            for decision in head {
                let sum: f64 = decision.weights.iter().sum();
                worst_sum = worst_sum.max((sum - 1.0).abs());
                selected.extend(decision.expert_ids.iter().copied());
            }
        }
        // gradient of every non-selected expert is exactly zero
        for e in 0..cfg.n_experts {
            if !selected.contains(&e) {
                assert!(
                    adapter.pool.down[e].grad().unwrap().iter().all(|&g| g == 0.0)
                        && adapter.pool.up[e].grad().unwrap().iter().all(|&g| g == 0.0),
                    "trial {trial}: non-selected expert {e} received gradient"
                );
            }
        }
        // output is bit-independent of non-selected expert parameters
        if let Some(&untouched) = (0..cfg.n_experts).find(|e| !selected.contains(e)).as_ref() {
            let saved = adapter.pool.down[untouched].to_vec();
            adapter.pool.down[untouched].set_data(&vec![9.9; saved.len()])?;
            let again = adapter.forward(
                &tokens,
                &summary,
                RoutingCtx::Online { noise_scale: 0.0, seed: trial, capture: false },
            )?;
            assert_eq!(
                again.residual.to_vec(),
                out.residual.to_vec(),
                "trial {trial}: non-selected expert influenced the output"
            );
            adapter.pool.down[untouched].set_data(&saved)?;
        }
        // noise_scale = 0 in training mode reproduces the eval path bitwise
        let train_mode = adapter.forward(
            &tokens,
            &summary,
            RoutingCtx::Online { noise_scale: 0.0, seed: trial + 999, capture: false },
        )?;
        assert_eq!(train_mode.residual.to_vec(), out.residual.to_vec());
    }
    assert!(worst_sum <= 1e-12, "weight sums off by {worst_sum:.2e}");
    println!(
        "criterion 5 PASS: weights normalized (worst gap {worst_sum:.1e}), sparsity exact, noiseless path deterministic"
    );
    Ok(())
}

/// Criterion 6: AUC / HTER / EER match exhaustive oracles exactly on 100
/// random score sets, and AUC is invariant under monotone transforms.
#[test]
fn criterion_6_metric_oracles() {
    let outcomes = metrics_oracle_suite(100, 42);
    print!("{}", render_outcomes(&outcomes));
    all_passed(&outcomes).expect("metric oracles");
    println!("criterion 6 PASS: metrics match exhaustive oracles on 100 score sets");
}

/// Criterion 7: empirical per-modality mask rate within 0.30 +- 0.02 over
/// 10000 draws, and at least one modality always survives.
#[test]
fn criterion_7_masking_statistics() -> Result<()> {
    let mods = random_mods(7, 8);
    let mut rng = derive_rng(30, "mask-accept");
    let draws = 10_000;
    let mut counts = [0usize; 3];
    for _ in 0..draws {
        let (_, indicator) = apply_modality_mask(&mods, 0.3, &mut rng)?;
        assert!(
            !indicator.iter().all(|&m| m),
            "all three modalities masked at once"
        );
        for (c, &m) in counts.iter_mut().zip(&indicator) {
            *c += m as usize;
        }
    }
    let rates: Vec<f64> = counts.iter().map(|&c| c as f64 / draws as f64).collect();
    for (i, r) in rates.iter().enumerate() {
        assert!(
            (r - 0.3).abs() <= 0.02,
            "modality {i} empirical mask rate {r:.4} outside 0.30 +- 0.02"
        );
    }
    println!(
        "criterion 7 PASS: mask rates {:.3}/{:.3}/{:.3} over {draws} draws, >=1 modality always kept",
        rates[0], rates[1], rates[2]
    );
    Ok(())
}

/// Criterion 8: the desk preset (3 synthetic domains, leave-one-out, 600
/// train samples, <= 30 epochs on CPU) reaches held-out AUC >= 0.95 and
/// HTER <= 0.10 in under 15 minutes.
#[test]
fn criterion_8_end_to_end_learning() {
    let start = Instant::now();
    let cfg = RunConfig::desk();
    assert!(cfg.optim.epochs <= 30);
    assert_eq!(cfg.data.domains.len(), 3);
    assert_eq!(cfg.data.n_per_domain * 2, 600, "600 train samples over two domains");
    let outcome = train(&cfg, None).expect("training");
    let elapsed = start.elapsed().as_secs_f64();
    let report = &outcome.report;
    assert!(
        report.auc >= 0.95,
        "held-out AUC {:.4} below 0.95",
        report.auc
    );
    assert!(
        report.hter <= 0.10,
        "held-out HTER {:.4} above 0.10",
        report.hter
    );
    assert!(elapsed < 900.0, "training took {elapsed:.0}s (limit 900s)");
    println!(
        "criterion 8 PASS: held-out AUC {:.4}, HTER {:.4} in {elapsed:.0}s",
        report.auc, report.hter
    );
}

/// Criterion 9: directional prompt ablation. Across 3 seeds, the median
/// held-out AUC of the full prompt set is within 0.02 of (or above) both the
/// no-prompt and task-prompt-only variants.
#[test]
fn criterion_9_directional_ablations() {
    let mut base = RunConfig::desk();
    base.data.n_per_domain = 100;
    base.optim.epochs = 12;
    base.optim.log_every = 0;

    let median = |mut v: Vec<f64>| -> f64 {
        v.sort_by(f64::total_cmp);
        v[v.len() / 2]
    };
    let mut aucs = std::collections::HashMap::<&str, Vec<f64>>::new();
    for seed in [17u64, 18, 19] {
        for (label, setting) in [
            ("none", PromptSetting::None),
            ("t", PromptSetting::TaskOnly),
            ("full", PromptSetting::Full),
        ] {
            let mut cfg = base.clone();
            cfg.seed = seed;
            cfg.mode.prompts = setting;
            let report = train(&cfg, None).expect("ablation run").report;
            aucs.entry(label).or_default().push(report.auc);
        }
    }
    let full = median(aucs["full"].clone());
    let none = median(aucs["none"].clone());
    let task = median(aucs["t"].clone());
    assert!(
        full >= none - 0.02,
        "full {full:.4} fell more than 0.02 below no-prompts {none:.4}"
    );
    assert!(
        full >= task - 0.02,
        "full {full:.4} fell more than 0.02 below task-only {task:.4}"
    );
    println!(
        "criterion 9 PASS: median held-out AUC full {full:.4} vs none {none:.4} vs task-only {task:.4} (3 seeds)"
    );
}

/// Criterion 10: with zero-initialized adapter/prompt output projections the
/// full forward equals the plain backbone bit-exactly, and checkpoints
/// round-trip evaluation bit-exactly.
#[test]
fn criterion_10_transparency_and_checkpoints() -> Result<()> {
    let mut cfg = gradcheck_model_config();
    cfg.mode.prompts = PromptSetting::Full;
    let model = BigMoeModel::init(&cfg)?;
    let mods = random_mods(10, cfg.backbone.image_size);
    let full = model.forward(&mods, Mode::Eval)?.to_vec();
    let plain = model.forward_backbone_only(&mods)?.to_vec();
    assert_eq!(full, plain, "fresh model deviates from the plain backbone");

    // move weights, then check the round trip preserves evaluation bitwise
    let mut rng = derive_rng(10, "ckpt-accept");
    for (_, p) in model.params() {
        let jitter = Tensor::randn(&mut rng, &p.shape(), 0.05);
        let bumped: Vec<f64> =
            p.to_vec().iter().zip(jitter.to_vec()).map(|(a, b)| a + b).collect();
        p.set_data(&bumped)?;
    }
    let before = model.forward(&mods, Mode::Eval)?.to_vec();
    let dir = tempfile::tempdir()?;
    let path = dir.path().join("model.bmck");
    save_checkpoint(&path, &model, &cfg.to_toml())?;
    let bundle = load_checkpoint(&path)?;
    let after = bundle.model.forward(&mods, Mode::Eval)?.to_vec();
    assert_eq!(before, after, "round trip changed evaluation output");

    let path2 = dir.path().join("model2.bmck");
    save_checkpoint(&path2, &bundle.model, &bundle.config_toml)?;
    assert_eq!(
        std::fs::read(&path)?,
        std::fs::read(&path2)?,
        "save -> load -> save not byte-identical"
    );

    // evaluation reports regenerate identically from the checkpoint
    let r1 = evaluate(&bundle.model, SplitChoice::Test)?;
    let r2 = evaluate(&load_checkpoint(&path)?.model, SplitChoice::Test)?;
    assert_eq!(r1.hter, r2.hter);
    assert_eq!(r1.auc, r2.auc);
    assert_eq!(r1.eer_threshold, r2.eer_threshold);

    println!("criterion 10 PASS: init transparency and checkpoint round trips are bit-exact");
    Ok(())
}
