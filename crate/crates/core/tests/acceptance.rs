//! Acceptance suite: one test per release criterion, each printing a
//! PASS/FAIL line with its measured margin (visible with `--nocapture`).
//!
//! Run with `cargo test --test acceptance -- --nocapture`.

use std::time::Instant;

use s2ft_core::account::{account, lora_rank_for_budget, MethodSpec};
use s2ft_core::adapter::{extract, weighted_fuse, AdapterRegistry, AnyAdapter, LowRankServeAdapter};
use s2ft_core::linalg::{Axis, Matrix};
use s2ft_core::model::{
    forward_model, init_block_model, init_linear_net, BlockConfig, BlockWeight, TrainableRegion,
    TransformerModel, WeightId,
};
use s2ft_core::permute::{
    apply_permutation, inverse_plan, plan_regions, plan_stack, verify_output_invariance,
};
use s2ft_core::rng::{derive_rng, gaussian_matrix, rng_from_seed, sample_distinct};
use s2ft_core::select::{
    sparsity_for_rank, Polarity, SelectionMask, Strategy, TrainableScope,
};
use s2ft_core::theory::{
    self, empirical_moments, empirical_risk, excess_risk, gd_oracle, layer_ctx,
    population_moments, solve_lora_min_norm, solve_sft_min_norm, AdaptationSolution, GdHyper,
    MethodKind, RankOrSet, RegressionTask, TaskDist, Theorem2Config,
};
use s2ft_core::train::{
    backward_partial, forward_with_tape, full_grad_oracle, gradcheck, mse_grad, slice_region,
    train_block, Method, TrainConfig, TrainData,
};

fn mask(heads: Vec<usize>, channels: Vec<usize>) -> SelectionMask {
    SelectionMask {
        mha_heads: heads,
        ffn_channels: channels,
        strategy: Strategy::Random,
        polarity: Polarity::Na,
        seed: Some(0),
    }
}

/// Criterion 1: co-permutation leaves forward outputs unchanged (≤ 1e-10
/// max-abs over 50 random model/mask pairs at d=64, h=8, k=128) and a
/// one-sided permutation fails the same check. Runtime < 5 s.
#[test]
fn criterion_1_permutation_invariance() {
    let start = Instant::now();
    let cfg = BlockConfig { d: 64, h: 8, k_inner: 128, n_blocks: 1 };
    let mut worst: f64 = 0.0;
    for trial in 0..50u64 {
        let model = init_block_model(&cfg, 1000 + trial).unwrap();
        let mut rng = derive_rng(42, trial);
        let heads = sample_distinct(&mut rng, 8, 1 + (trial as usize % 7));
        let channels = sample_distinct(&mut rng, 128, 1 + (trial as usize * 13 % 100));
        let plan = plan_stack(&model, &[mask(heads, channels)], TrainableScope::OutputDownOnly)
            .unwrap();
        let permuted = apply_permutation(&model, &plan).unwrap();
        let x = gaussian_matrix(&mut rng, 8, 64, 1.0);
        let report = verify_output_invariance(&model, &permuted, &x, 1e-10).unwrap();
        assert!(report.pass, "trial {trial}: diff {}", report.max_abs_diff);
        worst = worst.max(report.max_abs_diff);
    }
    // Negative control: permute the producers but not the consumer.
    let model = init_block_model(&cfg, 77).unwrap();
    let mut rng = derive_rng(43, 0);
    let channels = sample_distinct(&mut rng, 128, 32);
    let plan = plan_stack(&model, &[mask(vec![], channels)], TrainableScope::OutputDownOnly)
        .unwrap();
    let mut broken = model.clone();
    let p = &plan.blocks[0].channel_perm;
    broken.blocks[0].wup = broken.blocks[0].wup.permute_axis(p, Axis::Rows).unwrap();
    broken.blocks[0].wgate = broken.blocks[0].wgate.permute_axis(p, Axis::Rows).unwrap();
    let x = gaussian_matrix(&mut rng, 8, 64, 1.0);
    let report = verify_output_invariance(&model, &broken, &x, 1e-10).unwrap();
    assert!(!report.pass, "one-sided permutation must fail the check");
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 5.0, "runtime {elapsed:.2}s exceeds 5s");
    println!("PASS criterion-1 permutation-invariance: worst diff {worst:.3e}, corrupted diff {:.3e}, {elapsed:.2}s", report.max_abs_diff);
}

/// Criterion 2: partial-backprop region gradients equal the full-backprop
/// slices (≤ 1e-10 relative) and match central finite differences at
/// ε = 1e-6 (≤ 1e-4 relative) on 100 random probes. Runtime < 10 s.
#[test]
fn criterion_2_partial_backprop_correctness() {
    let start = Instant::now();
    let cfg = BlockConfig { d: 16, h: 4, k_inner: 12, n_blocks: 2 };
    let mut probes = 0usize;
    let mut worst_slice: f64 = 0.0;
    let mut worst_fd: f64 = 0.0;
    let mut model_seed = 0u64;
    while probes < 100 {
        model_seed += 1;
        let model = init_block_model(&cfg, model_seed).unwrap();
        let mut rng = derive_rng(7, model_seed);
        let x = gaussian_matrix(&mut rng, 6, 16, 1.0);
        let y = gaussian_matrix(&mut rng, 6, 16, 1.0);
        let scope = if model_seed % 2 == 0 {
            TrainableScope::OutputDownOnly
        } else {
            TrainableScope::AllCoupled
        };
        let heads = sample_distinct(&mut rng, 4, 1 + (model_seed as usize % 3));
        let channels = sample_distinct(&mut rng, 12, 2 + (model_seed as usize % 6));
        let heads_b1 = sample_distinct(&mut rng, 4, 2);
        let channels_b1 = sample_distinct(&mut rng, 12, 3);
        let plan = plan_stack(
            &model,
            &[mask(heads, channels), mask(heads_b1, channels_b1)],
            scope,
        )
        .unwrap();
        let permuted = apply_permutation(&model, &plan).unwrap();
        let regions = plan_regions(&plan);
        let (pred, tape) = forward_with_tape(&permuted, &regions, &x).unwrap();
        let lg = mse_grad(&pred, &y);
        let partial = backward_partial(&permuted, &tape, &lg).unwrap();
        let full = full_grad_oracle(&permuted, &x, &lg).unwrap();
        for (region, g) in &partial.grads {
            let want = slice_region(full.get(region.weight).unwrap(), region);
            let rel = g.sub(&want).unwrap().frobenius_norm() / want.frobenius_norm().max(1e-300);
            assert!(rel <= 1e-10, "{}: slice rel err {rel:.3e}", region.weight);
            worst_slice = worst_slice.max(rel);
        }
        // A few finite-difference probes per model.
        for (region, g) in partial.grads.iter().take(4) {
            let (i, j) = match region.axis {
                Axis::Cols => ((model_seed as usize * 3) % g.rows(), region.start + (probes % region.len())),
                Axis::Rows => (region.start + (probes % region.len()), (model_seed as usize * 5) % g.cols()),
            };
            let analytic = match region.axis {
                Axis::Cols => g.get(i, j - region.start),
                Axis::Rows => g.get(i - region.start, j),
            };
            let fd = gradcheck::central_diff_block(&permuted, region.weight, i, j, &x, &y, 1e-6)
                .unwrap();
            let rel = (analytic - fd).abs() / fd.abs().max(1e-8);
            assert!(rel <= 1e-4, "{} fd probe rel err {rel:.3e}", region.weight);
            worst_fd = worst_fd.max(rel);
            probes += 1;
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 10.0, "runtime {elapsed:.2}s exceeds 10s");
    println!("PASS criterion-2 partial-backprop: {probes} probes, worst slice rel {worst_slice:.3e}, worst fd rel {worst_fd:.3e}, {elapsed:.2}s");
}

/// Criterion 3: after 500 training steps every off-region parameter is
/// bit-identical to its initial value.
#[test]
fn criterion_3_frozen_weight_immutability() {
    let cfg = BlockConfig { d: 16, h: 4, k_inner: 12, n_blocks: 1 };
    let model = init_block_model(&cfg, 11).unwrap();
    let mut rng = derive_rng(12, 0);
    let plan = plan_stack(
        &model,
        &[mask(vec![2], vec![5, 1, 8])],
        TrainableScope::OutputDownOnly,
    )
    .unwrap();
    let permuted = apply_permutation(&model, &plan).unwrap();
    let regions = plan_regions(&plan);
    let data = TrainData {
        inputs: gaussian_matrix(&mut rng, 8, 16, 1.0),
        targets: gaussian_matrix(&mut rng, 8, 16, 1.0),
    };
    let tc = TrainConfig { epochs: 500, batch_size: 8, lr: 5e-3, ..Default::default() };
    let run = train_block(Method::S2ft, &permuted, &regions, &data, &tc).unwrap();
    assert_eq!(run.losses.len(), 500);
    let b0 = &run.model.blocks[0];
    let init = &permuted.blocks[0];
    assert_eq!(b0.wq, init.wq);
    assert_eq!(b0.wk, init.wk);
    assert_eq!(b0.wv, init.wv);
    assert_eq!(b0.wup, init.wup);
    assert_eq!(b0.wgate, init.wgate);
    let d_h = 4;
    let mut checked = 0usize;
    for i in 0..16 {
        for j in d_h..16 {
            assert_eq!(b0.wo.get(i, j), init.wo.get(i, j), "wo[{i}][{j}] moved");
            checked += 1;
        }
        for j in 3..12 {
            assert_eq!(b0.wdown.get(i, j), init.wdown.get(i, j), "wdown[{i}][{j}] moved");
            checked += 1;
        }
    }
    assert!(b0.wo.max_abs_diff(&init.wo) > 0.0, "trained region must move");
    println!("PASS criterion-3 frozen-immutability: 500 steps, {checked} off-region entries bit-identical");
}

/// Criterion 4: closed-form minimum-norm solutions match the
/// gradient-descent oracle on 20 random deep-linear instances (dims ≤ 10,
/// n = 500): products ≤ 1e-6 Frobenius, risks ≤ 1e-8. Runtime < 60 s.
#[test]
fn criterion_4_closed_form_vs_gd() {
    let start = Instant::now();
    let mut worst_prod: f64 = 0.0;
    let mut worst_risk: f64 = 0.0;
    for trial in 0..20u64 {
        let mut rng = derive_rng(100, trial);
        // Alternate 2-layer (adapt layer 1) and 3-layer (adapt layer 2)
        // chains, shaped so the adapted product is uniquely determined.
        let (dims, layer): (Vec<usize>, usize) = if trial % 2 == 0 {
            let p = 4 + (trial as usize % 5);
            let d1 = 4 + (trial as usize % 3);
            let q = (d1 + 1 + (trial as usize % 3)).min(10);
            (vec![p, d1, q], 1)
        } else {
            let p = 5 + (trial as usize % 4);
            let d1 = 4.min(p);
            let d2 = 5 + (trial as usize % 3);
            let q = (d2 + 1).min(10);
            (vec![p, d1, d2, q], 2)
        };
        let net = init_linear_net(&dims, 200 + trial).unwrap();
        let q = net.output_dim();
        let p = net.input_dim();
        let b_id = net
            .full_product()
            .add(&gaussian_matrix(&mut rng, q, p, 0.5))
            .unwrap();
        let task = RegressionTask::new(
            b_id,
            net.full_product(),
            Matrix::identity(p),
            Matrix::identity(q).scaled(0.01),
            Matrix::identity(q).scaled(0.01),
        )
        .unwrap();
        let sample = theory::sample_dataset(&task, 500, 300 + trial).unwrap();
        let ctx = layer_ctx(&net, layer).unwrap();
        let moments = empirical_moments(&ctx, &sample).unwrap();
        let d_l = ctx.above.cols();

        let s_count = 2 + (trial as usize % 2);
        let s_set = sample_distinct(&mut rng, d_l, s_count);
        let closed_sft = solve_sft_min_norm(&net, &moments, layer, &s_set).unwrap();
        let hyper = GdHyper { seed: trial, ..Default::default() };
        let gd_sft =
            gd_oracle(&net, &sample, layer, MethodKind::S2ft, RankOrSet::Set(&s_set), &hyper)
                .unwrap();
        let prod = closed_sft.delta().sub(&gd_sft.delta()).unwrap().frobenius_norm();
        let risk = (empirical_risk(&net, &closed_sft, &sample).unwrap()
            - empirical_risk(&net, &gd_sft, &sample).unwrap())
        .abs();
        assert!(prod <= 1e-6, "trial {trial} sft product diff {prod:.3e}");
        assert!(risk <= 1e-8, "trial {trial} sft risk diff {risk:.3e}");
        worst_prod = worst_prod.max(prod);
        worst_risk = worst_risk.max(risk);

        let rank = 2;
        let closed_lora = solve_lora_min_norm(&net, &moments, layer, rank).unwrap();
        assert!(!closed_lora.ill_conditioned, "trial {trial} hit a degenerate eigengap");
        let gd_lora =
            gd_oracle(&net, &sample, layer, MethodKind::Lora, RankOrSet::Rank(rank), &hyper)
                .unwrap();
        let prod = closed_lora.delta().sub(&gd_lora.delta()).unwrap().frobenius_norm();
        let risk = (empirical_risk(&net, &closed_lora, &sample).unwrap()
            - empirical_risk(&net, &gd_lora, &sample).unwrap())
        .abs();
        assert!(prod <= 1e-6, "trial {trial} lora product diff {prod:.3e}");
        assert!(risk <= 1e-8, "trial {trial} lora risk diff {risk:.3e}");
        worst_prod = worst_prod.max(prod);
        worst_risk = worst_risk.max(risk);
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 60.0, "runtime {elapsed:.2}s exceeds 60s");
    println!("PASS criterion-4 closed-form-vs-gd: 20 instances, worst product diff {worst_prod:.3e}, worst risk diff {worst_risk:.3e}, {elapsed:.2}s");
}

/// Criterion 5: 100 hypothesis-satisfying population trials all satisfy
/// 𝓔_ood(sparse) ≤ (1+3ε²)𝓔_ood(pre)+1e-8 and 𝓔_ood(LoRA) ≥ label-shift²−1e-8.
/// Runtime < 120 s.
#[test]
fn criterion_5_theorem2_bounds() {
    let start = Instant::now();
    let cfg = Theorem2Config { trials: 100, seed: 7, ..Default::default() };
    let out = theory::theorem2_suite(&cfg);
    assert!(out.errors.is_empty(), "errors: {:?}", out.errors);
    assert_eq!(out.reports.len(), 100);
    let mut worst_sft = f64::INFINITY;
    let mut worst_lora = f64::INFINITY;
    for r in &out.reports {
        for c in &r.bound_checks {
            assert!(c.pass, "trial {}: {} violated by {:.3e}", r.trial, c.name, -c.margin);
            if c.name == "sft_ood_upper" {
                worst_sft = worst_sft.min(c.margin);
            } else {
                worst_lora = worst_lora.min(c.margin);
            }
        }
    }
    let elapsed = start.elapsed().as_secs_f64();
    assert!(elapsed < 120.0, "runtime {elapsed:.2}s exceeds 120s");
    println!("PASS criterion-5 theorem2: 100/100 trials, min sft margin {worst_sft:.3e}, min lora margin {worst_lora:.3e}, {elapsed:.2}s");
}

/// Criterion 6: rank-16 parity gives sparsity 32 when d_ℓ = d_{ℓ-1}, and the
/// V parameter counts agree within one granule.
#[test]
fn criterion_6_sparsity_rank_parity() {
    let (d_l, d_lm1, r) = (64usize, 64usize, 16usize);
    let s = sparsity_for_rank(r, d_l, d_lm1);
    assert_eq!(s, 32, "r=16 with equal dims must give s=32");
    let sft_params = s * d_lm1;
    let lora_params = r * (d_l + d_lm1);
    let granule = d_lm1;
    assert!(
        sft_params.abs_diff(lora_params) < granule,
        "{sft_params} vs {lora_params} beyond one granule ({granule})"
    );
    println!("PASS criterion-6 sparsity-rank-parity: s={s}, counts {sft_params} vs {lora_params} (granule {granule})");
}

/// Shared setup for the adapter criteria: permute, train, extract.
fn adapter_fixture(seed: u64) -> (TransformerModel, Vec<s2ft_core::adapter::SparseAdapter>) {
    let cfg = BlockConfig { d: 16, h: 4, k_inner: 12, n_blocks: 1 };
    let model = init_block_model(&cfg, seed).unwrap();
    let plan = plan_stack(&model, &[mask(vec![2], vec![5, 1, 8])], TrainableScope::OutputDownOnly)
        .unwrap();
    let permuted = apply_permutation(&model, &plan).unwrap();
    let regions = plan_regions(&plan);
    let mut rng = derive_rng(seed, 1);
    let data = TrainData {
        inputs: gaussian_matrix(&mut rng, 8, 16, 1.0),
        targets: gaussian_matrix(&mut rng, 8, 16, 1.0),
    };
    let tc = TrainConfig { epochs: 40, batch_size: 8, lr: 1e-3, ..Default::default() };
    let run = train_block(Method::S2ft, &permuted, &regions, &data, &tc).unwrap();
    let adapters = extract(&run.model, &permuted, &plan, "t").unwrap();
    let original = apply_permutation(&permuted, &inverse_plan(&plan)).unwrap();
    (original, adapters)
}

/// Criterion 7: fuse→unfuse is bit-exact, parallel application matches
/// fuse-then-forward to 1e-10, and the op-count reports reproduce the
/// serving-time primitive counts exactly.
#[test]
fn criterion_7_adapter_lifecycle() {
    let (base, adapters) = adapter_fixture(21);
    let mut model = base.clone();
    let mut reg = AdapterRegistry::new();
    for a in &adapters {
        reg.register(AnyAdapter::Sparse(a.clone())).unwrap();
    }
    for a in &adapters {
        reg.fuse(&mut model, &a.id).unwrap();
    }
    for a in &adapters {
        reg.unfuse(&mut model, &a.id).unwrap();
    }
    assert_eq!(model, base, "fuse→unfuse must be bit-exact");

    // Switch op counts: sparse 2 scatter_adds, low-rank 2 matmuls + 2 adds.
    let down = adapters
        .iter()
        .find(|a| matches!(a.weight, WeightId::Block { kind: BlockWeight::Wdown, .. }))
        .unwrap();
    let mut second = down.clone();
    second.id = "second".into();
    second.values = second.values.scaled(0.5);
    reg.register(AnyAdapter::Sparse(second.clone())).unwrap();
    reg.fuse(&mut model, &down.id).unwrap();
    let rep = reg.switch(&mut model, &down.id, "second").unwrap();
    assert_eq!(
        (rep.scatter_add, rep.matmul, rep.add, rep.scatter, rep.gather),
        (2, 0, 0, 0, 0),
        "sparse switch op counts"
    );
    reg.unfuse(&mut model, "second").unwrap();

    let fp = s2ft_core::adapter::fingerprint(base.weight(down.weight).unwrap());
    let mut lrng = rng_from_seed(31);
    let mut lreg = AdapterRegistry::new();
    for id in ["l/a", "l/b"] {
        lreg.register(AnyAdapter::LowRank(LowRankServeAdapter {
            id: id.into(),
            weight: down.weight,
            u: gaussian_matrix(&mut lrng, 16, 2, 0.1),
            v: gaussian_matrix(&mut lrng, 12, 2, 0.1),
            alpha: 1.0,
            base_fingerprint: fp,
        }))
        .unwrap();
    }
    let mut lmodel = base.clone();
    lreg.fuse(&mut lmodel, "l/a").unwrap();
    let lrep = lreg.switch(&mut lmodel, "l/a", "l/b").unwrap();
    assert_eq!(
        (lrep.matmul, lrep.add, lrep.scatter_add),
        (2, 2, 0),
        "low-rank switch op counts"
    );

    // Parallel application: numerics match fuse-then-forward; counts are
    // 1 matmul + 1 add + 1 gather per sparse request, 2 matmuls + 1 add per
    // low-rank request.
    let base_w = base.weight(down.weight).unwrap().clone();
    let mut rng = derive_rng(22, 0);
    let requests: Vec<(String, Vec<f64>)> = (0..3)
        .map(|i| {
            let x = gaussian_matrix(&mut rng, 12, 1, 1.0).as_slice().to_vec();
            (if i % 2 == 0 { down.id.clone() } else { "second".into() }, x)
        })
        .collect();
    let (outputs, rep) = reg.parallel_apply(&base_w, &requests).unwrap();
    assert_eq!((rep.matmul, rep.add, rep.gather, rep.scatter), (3, 3, 3, 0));
    for ((id, x), out) in requests.iter().zip(&outputs) {
        let mut fused = base.clone();
        let mut reg2 = AdapterRegistry::new();
        let a = adapters.iter().chain(std::iter::once(&second)).find(|a| &a.id == id).unwrap();
        reg2.register(AnyAdapter::Sparse(a.clone())).unwrap();
        reg2.fuse(&mut fused, id).unwrap();
        let want = fused.weight(down.weight).unwrap().matvec(x).unwrap();
        let diff = out
            .iter()
            .zip(&want)
            .fold(0.0f64, |m, (a, b)| m.max((a - b).abs()));
        assert!(diff <= 1e-10, "parallel vs fuse-then-forward diff {diff:.3e}");
    }
    let (_, lrep) = lreg
        .parallel_apply(&base_w, &[("l/a".into(), requests[0].1.clone())])
        .unwrap();
    assert_eq!((lrep.matmul, lrep.add, lrep.gather, lrep.scatter), (2, 1, 0, 0));
    println!("PASS criterion-7 adapter-lifecycle: roundtrip bit-exact, parallel ≤1e-10, op counts exact");
}

/// Criterion 8: unit-weight fusion of disjoint-support adapters preserves
/// each constituent's slices exactly (zero error).
#[test]
fn criterion_8_disjoint_fusion_preservation() {
    let (_, adapters) = adapter_fixture(23);
    let down = adapters
        .iter()
        .find(|a| matches!(a.weight, WeightId::Block { kind: BlockWeight::Wdown, .. }))
        .unwrap();
    let mut rng = derive_rng(24, 0);
    let other_idx: Vec<usize> = (0..12).filter(|i| !down.indices.contains(i)).take(4).collect();
    let other = s2ft_core::adapter::SparseAdapter {
        id: "other".into(),
        weight: down.weight,
        axis: Axis::Cols,
        indices: other_idx,
        values: gaussian_matrix(&mut rng, 16, 4, 0.2),
        base_fingerprint: down.base_fingerprint,
    };
    let composite = weighted_fuse(&[down, &other], &[1.0, 1.0], "comp").unwrap();
    for (a, label) in [(down, "first"), (&other, "second")] {
        for (j, idx) in a.indices.iter().enumerate() {
            let pos = composite.indices.binary_search(idx).unwrap();
            for i in 0..16 {
                assert_eq!(
                    composite.values.get(i, pos),
                    a.values.get(i, j),
                    "{label} constituent row {i} idx {idx} altered"
                );
            }
        }
    }
    println!("PASS criterion-8 disjoint-fusion: both constituents preserved with zero error");
}

/// Criterion 9: at matched trainable budgets the structured method's taped
/// bytes, optimizer bytes, and step FLOPs are each ≤ LoRA's, and the
/// measured step time (median of 30 after 5 warmups) is lower.
#[test]
fn criterion_9_efficiency_trends() {
    let cfg = s2ft_core::harness::EfficiencyConfig::default();
    assert_eq!((cfg.warmup_steps, cfg.timed_steps), (5, 30));
    let rows = s2ft_core::harness::run_efficiency_report(&cfg).unwrap();
    let get = |m: &str| rows.iter().find(|r| r.method == m).unwrap();
    let s2 = get("s2ft");
    let lora = get("lora");
    assert!(lora.trainable_params >= s2.trainable_params, "budgets matched upward");
    assert!(s2.taped_bytes <= lora.taped_bytes, "taped bytes");
    assert!(s2.optimizer_bytes <= lora.optimizer_bytes, "optimizer bytes");
    assert!(
        s2.fwd_flops + s2.bwd_flops <= lora.fwd_flops + lora.bwd_flops,
        "step flops"
    );
    assert!(
        s2.step_time_us_median < lora.step_time_us_median,
        "measured step time: s2ft {:.1}us vs lora {:.1}us",
        s2.step_time_us_median,
        lora.step_time_us_median
    );
    println!(
        "PASS criterion-9 efficiency: taped {}B ≤ {}B, optim {}B ≤ {}B, flops {} ≤ {}, step {:.1}us < {:.1}us",
        s2.taped_bytes,
        lora.taped_bytes,
        s2.optimizer_bytes,
        lora.optimizer_bytes,
        s2.fwd_flops + s2.bwd_flops,
        lora.fwd_flops + lora.bwd_flops,
        s2.step_time_us_median,
        lora.step_time_us_median
    );
}

/// Criterion 10: population risk ordering — full FT lower-bounds LoRA with
/// equality at full rank, and the sparse risk is monotone non-increasing
/// under selection inclusion. Violations beyond 1e-9 fail.
#[test]
fn criterion_10_risk_ordering() {
    let mut worst: f64 = 0.0;
    for trial in 0..10u64 {
        let mut rng = derive_rng(900, trial);
        let net = init_linear_net(&[5, 7, 5], 700 + trial).unwrap();
        let q = net.output_dim();
        let p = net.input_dim();
        let b_id = net
            .full_product()
            .add(&gaussian_matrix(&mut rng, q, p, 0.8))
            .unwrap();
        let task = RegressionTask::new(
            b_id,
            net.full_product(),
            Matrix::identity(p),
            Matrix::identity(q).scaled(0.1),
            Matrix::identity(q).scaled(0.1),
        )
        .unwrap();
        let layer = 1;
        let ctx = layer_ctx(&net, layer).unwrap();
        let m = population_moments(&ctx, &task).unwrap();
        let full = theory::full_ft_population_risk(&net, &task, layer).unwrap();
        let pre = excess_risk(
            &net,
            &AdaptationSolution::pretrained(&net, layer).unwrap(),
            &task,
            TaskDist::InDistribution,
        )
        .unwrap();
        assert!(full <= pre + 1e-9, "full {full} vs pretrained {pre}");
        let max_rank = ctx.above.cols().min(ctx.below.rows());
        let mut prev = f64::INFINITY;
        for r in 1..=max_rank {
            let lora = solve_lora_min_norm(&net, &m, layer, r).unwrap();
            let risk = excess_risk(&net, &lora, &task, TaskDist::InDistribution).unwrap();
            assert!(full <= risk + 1e-9, "trial {trial}: full {full} > lora(r={r}) {risk}");
            assert!(risk <= prev + 1e-9, "trial {trial}: lora risk not monotone at r={r}");
            worst = worst.max(full - risk);
            prev = risk;
        }
        let full_rank_risk = prev;
        assert!(
            (full_rank_risk - full).abs() <= 1e-9,
            "trial {trial}: full-rank LoRA {full_rank_risk} vs full FT {full}"
        );
        // Nested selections.
        let base_set = sample_distinct(&mut rng, 7, 7);
        let mut prev = f64::INFINITY;
        for take in 1..=7usize {
            let s = &base_set[..take];
            let sol = solve_sft_min_norm(&net, &m, layer, s).unwrap();
            let risk = excess_risk(&net, &sol, &task, TaskDist::InDistribution).unwrap();
            assert!(
                risk <= prev + 1e-9,
                "trial {trial}: sparse risk increased when growing S to {take}"
            );
            prev = risk;
        }
    }
    println!("PASS criterion-10 risk-ordering: 10 instances, max full-over-lora excess {worst:.3e}");
}
