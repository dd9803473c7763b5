//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so every line reaches the terminal.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::Command;
use std::time::Instant;

use mdpd::autodiff::{Tape, Tensor};
use mdpd::distill::{loss_deep, objective_with_mask, sample_mask, BottleneckProjector, DistillConfig, MaskVector};
use mdpd::harness::{
    finetune, grad_check_spec, objective_grad_check, op_grad_checks, pretrain, target_task, TrainConfig,
};
use mdpd::memory::{analytic_memory, count_flops, count_flops_with, reconcile_spec};
use mdpd::model::checkpoint::{load_checkpoint, save_checkpoint};
use mdpd::model::{build_backbone, faded_forward, faded_forward_counted, params_digest, ArchSpec, Initializer, LeafBinder};
use mdpd::trainer::{compute_gradients, fit, Mode, TransferModels};
use ndarray::{Array2, Array3, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn e<T: std::fmt::Display>(err: T) -> String {
    err.to_string()
}

/// 1: finite differences against the reverse pass, ops and full objective.
fn gradient_correctness() -> Outcome {
    const TOL: f64 = 1e-4;
    let start = Instant::now();
    let ops = op_grad_checks(0, 1e-5).map_err(e)?;
    let worst_op = ops.iter().map(|c| c.max_rel_error).fold(0.0, f64::max);
    let spec = grad_check_spec();
    ensure(
        (spec.layers, spec.tokens, spec.hidden, spec.reduction) == (2, 8, 16, 2),
        format!("objective check runs on {spec:?}"),
    )?;
    let obj = objective_grad_check(&spec, 0, 1e-5).map_err(e)?;
    let secs = start.elapsed().as_secs_f64();
    for c in &ops {
        ensure(c.max_rel_error < TOL, format!("{} error {:.3e}", c.op, c.max_rel_error))?;
    }
    ensure(obj < TOL, format!("objective error {obj:.3e}"))?;
    ensure(secs < 60.0, format!("took {secs:.1}s"))?;
    Ok(format!("{} ops max {worst_op:.2e}, objective {obj:.2e}, {secs:.1}s", ops.len()))
}

/// 2: 100 MDPD steps leave every backbone tensor outside the norms and head untouched.
fn freeze_invariant() -> Outcome {
    let cfg = TrainConfig::default();
    let mut backbone = build_backbone(&cfg.arch, 7).map_err(e)?;
    backbone.round_to_checkpoint();
    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("backbone.ckpt");
    save_checkpoint(&path, &backbone.to_named()).map_err(e)?;

    let mut reloaded = build_backbone(&cfg.arch, 99).map_err(e)?;
    reloaded.load_named(&load_checkpoint(&path).map_err(e)?).map_err(e)?;
    let task = target_task(&cfg, 7);
    let mut models = TransferModels::new(reloaded, Mode::Mdpd, cfg.distill_config().map_err(e)?, 7).map_err(e)?;
    let mut fc = cfg.fit_config();
    fc.steps = 100;
    fit(&mut models, &task.train, &fc, 7, |_| {}).map_err(e)?;

    let allowed = |name: &str| name.contains(".norm") || name == "backbone.head.weight";
    let before: Vec<_> = backbone.params().into_iter().filter(|p| !allowed(&p.name)).collect();
    let after: Vec<_> = models.backbone.params().into_iter().filter(|p| !allowed(&p.name)).collect();
    ensure(!before.is_empty(), "no frozen tensors found")?;
    let (h0, h1) = (params_digest(before.iter().copied()), params_digest(after.iter().copied()));
    ensure(h0 == h1, format!("frozen digest changed: {h0} → {h1}"))?;
    let moved = models
        .backbone
        .params()
        .into_iter()
        .zip(backbone.params())
        .filter(|(a, b)| allowed(&a.name) && a.value != b.value)
        .count();
    ensure(moved > 0, "no trainable backbone tensor moved")?;
    Ok(format!("{} frozen tensors bit-identical, {moved} norm/head tensors updated", before.len()))
}

/// 3: faded output equals the training-time Y^B; faded FLOPs equal a never-distilled backbone's.
fn fading_equivalence() -> Outcome {
    let cfg = TrainConfig::default();
    let spec = cfg.arch.clone();
    let dcfg = cfg.distill_config().map_err(e)?;
    let task = target_task(&cfg, 3);
    let mut models = TransferModels::new(build_backbone(&spec, 3).map_err(e)?, Mode::Mdpd, dcfg.clone(), 3).map_err(e)?;
    let mut fc = cfg.fit_config();
    fc.steps = 20;
    fit(&mut models, &task.train, &fc, 3, |_| {}).map_err(e)?;

    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let x = Array3::from_shape_fn((100, spec.tokens, spec.input_dim), |_| rng.random_range(-4.0..4.0));
    let faded = faded_forward(&models.backbone, &x).map_err(e)?;
    let side = models.side.as_ref().ok_or("mdpd has no side network")?;
    let distill = models.distill.as_ref().ok_or("mdpd has no distiller")?;
    let mut mismatches = 0;
    for (chunk_idx, chunk) in x.axis_chunks_iter(Axis(0), 10).enumerate() {
        let mut tape = Tape::new();
        let mut binder = LeafBinder::new();
        let bb = models.backbone.bind(&mut tape, &mut binder);
        let sb = side.bind(&mut tape, &mut binder);
        let db = distill.bind(&mut tape, &mut binder);
        let mut b_traces = Vec::new();
        let mut s_traces = Vec::new();
        for example in chunk.axis_iter(Axis(0)) {
            let input = tape.input(example.to_owned().into_dyn());
            let bt = bb.forward(&mut tape, input).map_err(e)?;
            let feats = bt.features.iter().map(|&f| tape.detach(f)).collect::<Result<Vec<Tensor>, _>>().map_err(e)?;
            s_traces.push(sb.forward(&mut tape, &feats).map_err(e)?);
            b_traces.push(bt);
        }
        let labels: Vec<usize> = (0..chunk.len_of(Axis(0))).map(|i| i % spec.out_dim).collect();
        let mask = sample_mask(spec.tokens, dcfg.lambda, &mut rng).map_err(e)?;
        let obj = objective_with_mask(&mut tape, &b_traces, &s_traces, &labels, &db, &dcfg, &mask).map_err(e)?;
        tape.backward(obj.total).map_err(e)?;
        for (k, bt) in b_traces.iter().enumerate() {
            let yb = tape.value(bt.logits).map_err(e)?;
            let row = faded.row(chunk_idx * 10 + k);
            if !yb.iter().zip(row.iter()).all(|(a, b)| a.to_bits() == b.to_bits()) {
                mismatches += 1;
            }
        }
    }
    ensure(mismatches == 0, format!("{mismatches} of 100 outputs differ"))?;

    let plain = build_backbone(&spec, 123).map_err(e)?;
    let (_, trained_flops) = faded_forward_counted(&models.backbone, &x).map_err(e)?;
    let (_, plain_flops) = faded_forward_counted(&plain, &x).map_err(e)?;
    ensure(trained_flops == plain_flops, format!("faded FLOPs {trained_flops} vs plain {plain_flops}"))?;
    let closed = count_flops_with(&spec, Some(&dcfg), true).map_err(e)?.faded_total;
    let never = count_flops(&spec, true).map_err(e)?.faded_total;
    ensure(closed == never, format!("closed-form faded FLOPs {closed} vs {never}"))?;
    ensure(trained_flops == never, format!("tape {trained_flops} vs closed form {never} per example"))?;
    Ok(format!("100/100 bit-exact, faded FLOPs {never} per example in both"))
}

/// 4: empirical mask fraction within 0.005 of λ; λ ∈ {0, 1} exact.
fn mask_statistics() -> Outcome {
    const N: usize = 100_000;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut parts = Vec::new();
    for lambda in [0.25, 0.5, 0.75] {
        let m = sample_mask(N, lambda, &mut rng).map_err(e)?;
        let frac = m.m.iter().map(|&v| v as usize).sum::<usize>() as f64 / N as f64;
        ensure((frac - lambda).abs() < 0.005, format!("λ={lambda}: fraction {frac}"))?;
        parts.push(format!("{lambda}→{frac:.4}"));
    }
    ensure(sample_mask(N, 0.0, &mut rng).map_err(e)?.m.iter().all(|&v| v == 0), "λ=0 masked a token")?;
    ensure(sample_mask(N, 1.0, &mut rng).map_err(e)?.m.iter().all(|&v| v == 1), "λ=1 kept a token")?;
    Ok(parts.join(", ") + ", λ=0 and λ=1 exact")
}

/// 5: trainable scalars of each projector against the closed form.
fn bottleneck_count() -> Outcome {
    let mut init = Initializer::new(5);
    for (d_in, d_out, d) in [(384, 768, 64), (64, 128, 8), (128, 64, 4), (768, 768, 32), (32, 32, 2)] {
        let proj = BottleneckProjector::new(&mut init, "p", d_in, d_out, d).map_err(e)?;
        let counted: usize = proj.params().iter().filter(|p| p.requires_grad).map(|p| p.value.len()).sum();
        let oracle = (1 + d_in + d_out) * d + d_out;
        ensure(counted == oracle, format!("({d_in},{d_out},{d}): {counted} vs {oracle}"))?;
        ensure(proj.trainable_count() == oracle, format!("({d_in},{d_out},{d}): reported {}", proj.trainable_count()))?;
    }
    Ok("5/5 shapes match".into())
}

/// 6: analytic identities plus reconciliation with measured ledgers.
fn memory_model() -> Outcome {
    let base = ArchSpec { layers: 4, tokens: 16, hidden: 64, reduction: 2, input_dim: 8, out_dim: 4, mlp_ratio: 2 };
    for r in [2, 4, 8, 16] {
        let spec = ArchSpec { reduction: r, ..base.clone() };
        let rep = analytic_memory(&spec).map_err(e)?;
        let per_layer = 2 * 16 * 64 + 16 * 2 * 64;
        ensure(rep.a_total == 4 * per_layer, format!("a_total {} vs {}", rep.a_total, 4 * per_layer))?;
        ensure(rep.side_network == (rep.a_total + rep.sigma_total) / r as u64, format!("r={r}: side {}", rep.side_network))?;
        if r > 2 {
            ensure(rep.side_network < rep.petl_lower_bound, format!("r={r}: side not below PETL bound"))?;
        } else {
            ensure(rep.side_network == rep.petl_lower_bound, "r=2: side differs from PETL bound")?;
        }
    }
    let mut gaps: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    let mut cells = Vec::new();
    for hidden in [128, 256, 512] {
        for r in [2, 4] {
            let spec = ArchSpec { hidden, reduction: r, ..base.clone() };
            let (_, rec) = reconcile_spec(&spec, 0, 0.15).map_err(e)?;
            ensure(rec.pass, format!("D_B={hidden}, r={r}: ratio {:.4}", rec.ratio_empirical))?;
            gaps.entry(r).or_default().push((rec.ratio_empirical - 1.0 / r as f64).abs());
            cells.push(format!("{hidden}/{r}:{:.4}", rec.ratio_empirical));
        }
    }
    for (r, g) in &gaps {
        ensure(g.windows(2).all(|w| w[1] < w[0]), format!("r={r}: gaps {g:?} not decreasing"))?;
    }
    Ok(format!("ratios {}", cells.join(" ")))
}

/// 7: each loss term alone, checked for exact zeros where routing forbids gradient.
fn detachment_routing() -> Outcome {
    let spec = ArchSpec { layers: 4, tokens: 8, hidden: 16, reduction: 2, input_dim: 4, out_dim: 3, mlp_ratio: 2 };
    let backbone = build_backbone(&spec, 8).map_err(e)?;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Array3::from_shape_fn((3, spec.tokens, spec.input_dim), |_| rng.random_range(-1.0..1.0));
    let labels = [0, 1, 2];
    let mask = MaskVector { m: (0..spec.tokens).map(|t| (t % 2) as u8).collect(), lambda: 0.5 };

    let mut rows = Vec::new();
    for (term, weights) in
        [("task", [1.0, 0.0, 0.0, 0.0]), ("log", [0.0, 1.0, 0.0, 0.0]), ("sha", [0.0, 0.0, 1.0, 0.0]), ("deep", [0.0, 0.0, 0.0, 1.0])]
    {
        let mut dcfg = DistillConfig::for_spec(&spec);
        [dcfg.w_sft, dcfg.w_log, dcfg.w_sha, dcfg.w_deep] = weights;
        let mut models = TransferModels::new(backbone.clone(), Mode::Mdpd, dcfg, 8).map_err(e)?;
        // Nonzero mask tokens so the deep term has a path to them.
        for p in models.params_mut().into_iter().filter(|p| p.name.ends_with("mask_token")) {
            p.value.fill(0.1);
        }
        let graph = compute_gradients(&models, x.view(), &labels, Some(&mask)).map_err(e)?;
        let norm = |prefix: &str| -> f64 {
            graph.grads.iter().filter(|(n, _)| n.starts_with(prefix)).map(|(_, g)| g.iter().map(|v| v.abs()).sum::<f64>()).sum()
        };
        let (bb, side, dist) = (norm("backbone."), norm("side."), norm("distill."));
        match term {
            "log" => {
                ensure(side == 0.0 && dist == 0.0, format!("log reaches side ({side:e}) or distiller ({dist:e})"))?;
                ensure(bb > 0.0, "log does not reach the backbone")?;
            }
            _ => {
                ensure(bb == 0.0, format!("{term} reaches the backbone ({bb:e})"))?;
                ensure(side > 0.0, format!("{term} does not reach the side network"))?;
            }
        }
        rows.push(format!("{term}:[{}|{}]", if bb > 0.0 { "B" } else { "0" }, if side > 0.0 { "S" } else { "0" }));
    }
    Ok(rows.join(" "))
}

/// 8: perturbing teacher rows with m_i = 0 leaves the deep loss bitwise unchanged.
fn masked_locality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut trials = 0;
    for _ in 0..200 {
        let n = rng.random_range(2..12);
        let d = rng.random_range(1..9);
        let teacher = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let generated = Array2::from_shape_fn((n, d), |_| rng.random_range(-2.0..2.0));
        let mask = sample_mask(n, rng.random_range(0.0..1.0), &mut rng).map_err(e)?;
        let base = loss_deep(&teacher, &generated, &mask).map_err(e)?;
        let mut perturbed = teacher.clone();
        for (i, mut row) in perturbed.rows_mut().into_iter().enumerate() {
            if mask.m[i] == 0 {
                let scale = 10f64.powi(rng.random_range(-3..300));
                row.mapv_inplace(|_| scale * rng.random_range(-1.0..1.0));
            }
        }
        if mask.m.contains(&0) {
            perturbed.row_mut(mask.m.iter().position(|&v| v == 0).unwrap()).fill(f64::INFINITY);
        }
        let after = loss_deep(&perturbed, &generated, &mask).map_err(e)?;
        ensure(base.to_bits() == after.to_bits(), format!("n={n} d={d}: {base} became {after}"))?;
        trials += 1;
    }
    Ok(format!("{trials} random cases bitwise unchanged"))
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// 9: default synthetic transfer over 20 seeds.
fn desk_transfer() -> Outcome {
    let mut mdpd = Vec::new();
    let mut partial = Vec::new();
    let mut slowest = 0.0f64;
    for seed in 0..20u64 {
        let start = Instant::now();
        let mut cfg = TrainConfig::default();
        cfg.train.seed = seed;
        let pre = pretrain(&cfg).map_err(e)?;
        ensure(pre.converged, format!("seed {seed}: pretraining reached {:.4}", pre.accuracy))?;
        let run = |mode: Mode| {
            let mut c = cfg.clone();
            c.train.mode = mode;
            finetune(&c, &pre.backbone, mode.as_str())
        };
        let m = run(Mode::Mdpd).map_err(e)?;
        let p = run(Mode::Partial).map_err(e)?;
        let s = run(Mode::SideOnly).map_err(e)?;
        ensure(
            s.faded.accuracy == s.baseline_faded_accuracy && s.freeze_intact,
            format!("seed {seed}: side_only faded {} vs baseline {}", s.faded.accuracy, s.baseline_faded_accuracy),
        )?;
        mdpd.push(m.faded.accuracy);
        partial.push(p.faded.accuracy);
        slowest = slowest.max(start.elapsed().as_secs_f64());
    }
    let worst = mdpd.iter().copied().fold(f64::INFINITY, f64::min);
    let (mm, pm) = (median(mdpd.clone()), median(partial));
    ensure(worst >= 0.90, format!("MDPD faded accuracy {worst:.4} on some seed"))?;
    ensure(mm >= pm - 0.02, format!("MDPD median {mm:.4} vs partial median {pm:.4}"))?;
    ensure(slowest < 300.0, format!("slowest seed took {slowest:.0}s"))?;
    Ok(format!("MDPD min {worst:.4} median {mm:.4}, partial median {pm:.4}, side_only at baseline, slowest seed {slowest:.0}s"))
}

fn binary() -> Command {
    Command::new(env!("CARGO_BIN_EXE_mdpd"))
}

/// 10: dump-config of an empty file prints the reference defaults.
fn config_fidelity() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let path = dir.path().join("empty.cfg");
    std::fs::write(&path, "").map_err(e)?;
    let out = binary().arg("dump-config").arg("--config").arg(&path).output().map_err(e)?;
    ensure(out.status.success(), format!("exit {:?}", out.status.code()))?;
    let text = String::from_utf8(out.stdout).map_err(e)?;
    let lines: Vec<&str> = text.lines().collect();
    for want in [
        "distill.lambda=0.5",
        "arch.reduction=2",
        "distill.w_log=1e-4",
        "distill.w_deep=6e-5",
        "distill.w_sha=4e-5",
        "distill.w_sft=1.0",
        "optim.name=adamw",
        "optim.beta1=0.9",
        "optim.beta2=0.999",
        "optim.weight_decay=0.01",
        "schedule.warmup=linear",
    ] {
        ensure(lines.contains(&want), format!("missing `{want}`"))?;
    }
    Ok("11/11 reference lines present".into())
}

/// 11: the same finetune command twice gives identical summary rows.
fn reproducibility() -> Outcome {
    let dir = tempfile::tempdir().map_err(e)?;
    let mut rows = Vec::new();
    for name in ["first", "second"] {
        let out = dir.path().join(name);
        let status = binary().args(["finetune", "--seed", "5", "--out"]).arg(&out).output().map_err(e)?;
        ensure(status.status.success(), format!("{name}: exit {:?}", status.status.code()))?;
        rows.push(std::fs::read(out.with_extension("csv")).map_err(e)?);
    }
    ensure(rows[0] == rows[1], "summary files differ")?;
    ensure(!rows[0].is_empty(), "empty summary")?;
    Ok(format!("identical {}-byte summaries", rows[0].len()))
}

fn main() {
    // libtest flags such as --nocapture are accepted and ignored; `--list` reports nothing.
    if std::env::args().any(|a| a == "--list") {
        return;
    }
    type Criterion = (&'static str, fn() -> Outcome);
    let criteria: [Criterion; 11] = [
        ("gradient correctness", gradient_correctness),
        ("freeze invariant", freeze_invariant),
        ("fading equivalence", fading_equivalence),
        ("mask statistics", mask_statistics),
        ("bottleneck parameter count", bottleneck_count),
        ("memory model", memory_model),
        ("detachment routing", detachment_routing),
        ("masked-loss locality", masked_locality),
        ("desk-scale transfer", desk_transfer),
        ("config fidelity", config_fidelity),
        ("reproducibility", reproducibility),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{secs:.1}s]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}) [{secs:.1}s]", i + 1);
            }
        }
    }
    if failed > 0 {
        println!("{failed} of {} criteria failed", criteria.len());
        std::process::exit(1);
    }
}
