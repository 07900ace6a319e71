//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion
//! and exits non-zero if any fails. Pass criterion numbers (`1 6`) as
//! arguments to run a subset.

use std::collections::HashSet;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::time::Instant;

use etsc_core::data::{generate_synthetic, subject_split, SynthConfig};
use etsc_core::dualpath::{moe_forward, GateStats, MoEParams};
use etsc_core::gradcheck::grad_check_many;
use etsc_core::pipeline::{self, early_sweep, CHECKPOINT_FILE, REPORT_FILE};
use etsc_core::shapelet::sparsify;
use etsc_core::training::{
    combine_losses, moe_load_balance_loss, sparsity_schedule, weighted_cross_entropy, LossConfig,
    ScheduleConfig,
};
use etsc_core::verify::{gradient_suite, MODEL_TOLERANCE, OP_TOLERANCE};
use etsc_core::{Graph, ParamGroup, RunConfig, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = fn() -> Result<String, String>;

fn ensure(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn gelu(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (c * (x + 0.044715 * x.powi(3))).tanh())
}

fn affine(x: &[f64], w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (fan_in, fan_out) = (w.shape()[0], w.shape()[1]);
    (0..fan_out)
        .map(|j| (0..fan_in).map(|i| x[i] * w.get(&[i, j])).sum::<f64>() + b.data()[j])
        .collect()
}

fn softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Indices of the `k` largest values by full sort, lower index on ties.
fn sort_top(v: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[b].partial_cmp(&v[a]).unwrap().then(a.cmp(&b)));
    let mut top = idx[..k].to_vec();
    top.sort();
    top
}

fn c1_gradients() -> Result<String, String> {
    let start = Instant::now();
    let report = gradient_suite(0, false).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (model, ops): (Vec<_>, Vec<_>) = report.rows.iter().partition(|r| r.name == "full_model");
    let worst = ops.iter().max_by(|a, b| a.max_error.total_cmp(&b.max_error)).unwrap();
    let failed: Vec<&str> = report.rows.iter().filter(|r| !r.passed()).map(|r| r.name.as_str()).collect();
    ensure(failed.is_empty(), format!("failing rows: {failed:?}"))?;
    ensure(ops.iter().all(|r| r.points == 10 && r.tolerance == OP_TOLERANCE), "op rows")?;
    ensure(model[0].max_error < MODEL_TOLERANCE, "model")?;
    ensure(secs < 120.0, format!("took {secs:.1}s"))?;
    let corrupt = gradient_suite(0, true).map_err(|e| e.to_string())?;
    ensure(!corrupt.passed(), "corrupted backward fixture was not caught")?;
    Ok(format!(
        "{} ops, worst {} {:.2e} < 1e-5, full model {:.2e} < 1e-3, {secs:.1}s",
        ops.len(),
        worst.name,
        worst.max_error,
        model[0].max_error
    ))
}

fn c2_sparsify() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst_agg = 0.0f64;
    for case in 0..1000 {
        let b = rng.random_range(1..=3);
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=4);
        let r: f64 = if case % 10 == 0 { 1.0 } else { rng.random_range(0.01..1.0) };
        // Coarse scores force duplicate values in most cases.
        let levels = rng.random_range(2..=20);
        let scores: Vec<f64> = (0..b * n).map(|_| rng.random_range(0..levels) as f64 / levels as f64).collect();
        let seq = Tensor::randn(&[b, n, d], 1.0, &mut rng);
        let g = Graph::new();
        let st = Tensor::new(vec![b, n], scores.clone()).unwrap();
        let out = sparsify(&g, g.constant(seq.clone()), &st, r).map_err(|e| e.to_string())?;
        let tokens = g.value(out.tokens).clone();
        let k = ((r * n as f64 - 1e-9).ceil() as usize).clamp(1, n);
        ensure(tokens.shape() == [b, k + 1, d], format!("case {case}: shape {:?}", tokens.shape()))?;
        for i in 0..b {
            let row = &scores[i * n..(i + 1) * n];
            let keep = sort_top(row, k);
            ensure(out.kept[i] == keep, format!("case {case}: kept {:?} vs {keep:?}", out.kept[i]))?;
            for (slot, &t) in keep.iter().enumerate() {
                for j in 0..d {
                    ensure(tokens.get(&[i, slot, j]) == seq.get(&[i, t, j]), format!("case {case}: kept value"))?;
                }
            }
            let rest: Vec<usize> = (0..n).filter(|t| !keep.contains(t)).collect();
            for j in 0..d {
                let mean = if rest.is_empty() {
                    0.0
                } else {
                    rest.iter().map(|&t| seq.get(&[i, t, j])).sum::<f64>() / rest.len() as f64
                };
                let err = (tokens.get(&[i, k, j]) - mean).abs();
                worst_agg = worst_agg.max(err);
                ensure(err <= 1e-12, format!("case {case}: aggregate off by {err:e}"))?;
            }
        }
    }
    Ok(format!("1000 cases exact, aggregate max error {worst_agg:.1e}"))
}

/// Dense mixture: every expert on every token, then mask to the top gates.
fn dense_moe(x: &Tensor, p: &MoEParams, top_g: usize) -> Vec<f64> {
    let d = x.shape()[2];
    let mut out = Vec::with_capacity(x.len());
    for tok in x.data().chunks(d) {
        let probs = softmax(&affine(tok, &p.gate.weight, &p.gate.bias));
        let ys: Vec<Vec<f64>> = p
            .experts
            .iter()
            .map(|e| {
                let h: Vec<f64> = affine(tok, &e.up.weight, &e.up.bias).into_iter().map(gelu).collect();
                affine(&h, &e.down.weight, &e.down.bias)
            })
            .collect();
        let keep = sort_top(&probs, top_g);
        let norm: f64 = keep.iter().map(|&i| probs[i]).sum();
        for j in 0..d {
            let mix: f64 = keep.iter().map(|&i| probs[i] / norm * ys[i][j]).sum();
            out.push(tok[j] + mix);
        }
    }
    out
}

fn c3_moe() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut full_err, mut sparse_err) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let e = rng.random_range(2..=6);
        let d = rng.random_range(2..=6);
        let p = MoEParams::init(d, rng.random_range(2..=8), e, &mut rng);
        let x = Tensor::randn(&[rng.random_range(1..=3), rng.random_range(1..=5), d], 1.0, &mut rng);
        for top_g in [e, rng.random_range(1..e)] {
            let g = Graph::new();
            let out = moe_forward(&g, g.constant(x.clone()), &p.bind(&g, false), top_g).map_err(|e| e.to_string())?;
            let got = g.value(out.output).clone();
            let want = dense_moe(&x, &p, top_g);
            let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            if top_g == e {
                full_err = full_err.max(err);
            } else {
                sparse_err = sparse_err.max(err);
            }
            ensure(err <= 1e-10, format!("case {case} top_g {top_g}/{e}: error {err:e}"))?;
        }
    }
    Ok(format!("100 inputs, top_g = E max error {full_err:.1e}, top_g < E max error {sparse_err:.1e}"))
}

fn c4_losses() -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Uniform class weights against a plain cross-entropy oracle.
    let mut ce_err = 0.0f64;
    for _ in 0..100 {
        let (b, k) = (rng.random_range(1..=8), rng.random_range(2..=5));
        let logits = Tensor::randn(&[b, k], 2.0, &mut rng);
        let labels: Vec<usize> = (0..b).map(|_| rng.random_range(0..k)).collect();
        let w = rng.random_range(0.1..5.0);
        let g = Graph::new();
        let l = weighted_cross_entropy(&g, g.constant(logits.clone()), &labels, &vec![w; k]).map_err(|e| e.to_string())?;
        let oracle: f64 = logits
            .data()
            .chunks(k)
            .zip(&labels)
            .map(|(row, &y)| -softmax(row)[y].ln())
            .sum::<f64>()
            / b as f64;
        ce_err = ce_err.max((g.value(l).item() - oracle).abs());
    }
    ensure(ce_err <= 1e-12, format!("uniform-weight CE off by {ce_err:e}"))?;

    // The combined loss is linear in its parts, value and gradient.
    let cfg = LossConfig {
        lambda_moe: 0.03,
        lambda_sparsity: 0.2,
        class_weights: None,
    };
    let parts = [Tensor::randn(&[1], 1.0, &mut rng), Tensor::randn(&[1], 1.0, &mut rng), Tensor::randn(&[1], 1.0, &mut rng)];
    let errs = grad_check_many(
        |g, v| {
            let sq = |x| g.mul(x, x);
            combine_losses(g, g.exp(v[0]), Some(sq(v[1])?), Some(g.tanh(v[2])), &cfg)
        },
        &parts,
        1e-3,
    )
    .map_err(|e| e.to_string())?;
    let lin_err = errs.iter().cloned().fold(0.0, f64::max);
    ensure(lin_err < 1e-5, format!("combined-loss gradcheck {lin_err:e}"))?;
    let g = Graph::new();
    let v: Vec<_> = parts.iter().map(|p| g.param(p.clone())).collect();
    let total = combine_losses(&g, v[0], Some(v[1]), Some(v[2]), &cfg).map_err(|e| e.to_string())?;
    g.backward(total).map_err(|e| e.to_string())?;
    let grads: Vec<f64> = v.iter().map(|x| g.grad(*x).unwrap().item()).collect();
    ensure(grads == [1.0, 0.03, 0.2], format!("part gradients {grads:?}"))?;
    let value = g.value(total).item();
    let direct = parts[0].item() + 0.03 * parts[1].item() + 0.2 * parts[2].item();
    ensure((value - direct).abs() <= 1e-12, "combined value")?;

    // Uniform utilisation gives exactly top_g.
    let mut uni_err = 0.0f64;
    for e in 2..=8 {
        for top_g in 1..=e {
            let stats = GateStats {
                mean_prob: vec![1.0 / e as f64; e],
                token_fraction: vec![top_g as f64 / e as f64; e],
                entropy: vec![],
                top_g,
            };
            uni_err = uni_err.max((moe_load_balance_loss(&stats) - top_g as f64).abs());
        }
    }
    ensure(uni_err <= 1e-9, format!("uniform load balance off by {uni_err:e}"))?;

    // Skewed gates: a shared preference over experts plus per-token noise.
    let mut min_excess = f64::INFINITY;
    for case in 0..1000 {
        let e = rng.random_range(2..=8);
        let top_g = rng.random_range(1..e);
        let d = 4;
        let mut p = MoEParams::init(d, 4, e, &mut rng);
        p.gate.weight = Tensor::uniform(&[d, e], 0.05, &mut rng);
        p.gate.bias = Tensor::randn(&[e], 1.5, &mut rng);
        let x = Tensor::randn(&[2, 16, d], 1.0, &mut rng);
        let g = Graph::new();
        let out = moe_forward(&g, g.constant(x), &p.bind(&g, false), top_g).map_err(|e| e.to_string())?;
        let excess = moe_load_balance_loss(&out.stats) - top_g as f64;
        min_excess = min_excess.min(excess);
        ensure(excess > 0.0, format!("case {case}: skewed load balance {excess:e} above top_g"))?;
    }
    Ok(format!(
        "CE err {ce_err:.1e}, linearity gradcheck {lin_err:.1e}, uniform err {uni_err:.1e}, min skewed excess {min_excess:.3}"
    ))
}

fn c5_schedule() -> Result<String, String> {
    let cfg = ScheduleConfig::default();
    let rs: Vec<f64> = (0..cfg.total_epochs + 20).map(|e| sparsity_schedule(e, &cfg)).collect();
    ensure(rs[..150].iter().all(|&r| r == 1.0), "r < 1 during warmup")?;
    ensure(rs.windows(2).all(|w| w[1] <= w[0]), "not monotone")?;
    let last = rs[cfg.total_epochs - 1];
    ensure(last == cfg.r_target, format!("final ratio {last}"))?;
    Ok(format!("r = 1 for e < 150, monotone, r({}) = {last}", cfg.total_epochs - 1))
}

fn schedule(total: usize, warmup: usize) -> ScheduleConfig {
    ScheduleConfig {
        total_epochs: total,
        warmup_epochs: warmup,
        r_target: 0.75,
    }
}

fn c6_learning() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.schedule = schedule(200, 150);
    let start = Instant::now();
    let full = pipeline::train(&cfg, &dir.path().join("full"), |_| {}).map_err(|e| e.to_string())?;
    let full_secs = start.elapsed().as_secs_f64();
    cfg.model.ablation.dual_path = false;
    let abl = pipeline::train(&cfg, &dir.path().join("ablation"), |_| {}).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let (m, a) = (&full.test_metrics, &abl.test_metrics);
    let summary = format!(
        "full acc {:.3} F1 {:.3} ({full_secs:.0}s); mean-pool ablation acc {:.3} F1 {:.3}; total {secs:.0}s",
        m.accuracy, m.macro_f1, a.accuracy, a.macro_f1
    );
    ensure(m.accuracy >= 0.90 && m.macro_f1 >= 0.85, summary.clone())?;
    ensure(a.accuracy < m.accuracy && a.macro_f1 < m.macro_f1, summary.clone())?;
    ensure(full_secs < 600.0, summary.clone())?;
    Ok(summary)
}

fn c7_early_sweep() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    let mut synth = SynthConfig::default();
    synth.motif_region = [0.0, 0.25];
    cfg.data.synth = Some(synth);
    cfg.schedule = schedule(200, 150);
    let out = pipeline::train(&cfg, dir.path(), |_| {}).map_err(|e| e.to_string())?;
    let (_, test) = cfg.load_data().map_err(|e| e.to_string())?;
    let l = test.length();
    let table = early_sweep(&out.model, out.keep_ratio, &test, &[l / 2, l]).map_err(|e| e.to_string())?;
    let from_ckpt = pipeline::early_sweep_from_checkpoint(&dir.path().join(CHECKPOINT_FILE), &[l])
        .map_err(|e| e.to_string())?;
    let (half, full) = (table.rows[0].metrics.accuracy, table.rows[1].metrics.accuracy);
    let summary = format!("acc(t={}) {half:.3}, acc(t={l}) {full:.3}", l / 2);
    ensure((half - full).abs() <= 0.05, summary.clone())?;
    ensure(table.rows[1].metrics == out.test_metrics, "t = L row differs from test evaluation")?;
    ensure(from_ckpt.rows[0].metrics == out.test_metrics, "checkpoint sweep differs from test evaluation")?;
    Ok(summary + ", t = L row matches test evaluation exactly")
}

fn c8_subjects() -> Result<String, String> {
    for seed in 0..100u64 {
        let synth = SynthConfig {
            n_samples: 200,
            seed,
            ..SynthConfig::default()
        };
        let d = generate_synthetic(&synth).map_err(|e| e.to_string())?;
        let (train, test) = subject_split(&d, 0.2, seed).map_err(|e| e.to_string())?;
        let a: HashSet<&String> = train.subjects.iter().collect();
        let b: HashSet<&String> = test.subjects.iter().collect();
        ensure(a.is_disjoint(&b), format!("seed {seed}: shared subjects"))?;
        ensure(train.len() + test.len() == d.len(), format!("seed {seed}: samples lost"))?;
    }
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    let synth = SynthConfig {
        subject_offset: 0.5,
        motif_amplitudes: vec![1.0, 1.0],
        ..SynthConfig::default()
    };
    cfg.data.synth = Some(synth);
    cfg.schedule = schedule(200, 150);
    let out = pipeline::train(&cfg, dir.path(), |_| {}).map_err(|e| e.to_string())?;
    let acc = out.test_metrics.accuracy;
    let summary = format!("100 seeds disjoint; held-out subject accuracy {acc:.3} with offset 0.5");
    ensure(acc >= 0.80, summary.clone())?;
    Ok(summary)
}

fn c9_determinism() -> Result<String, String> {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = RunConfig::default();
    cfg.data.synth = Some(SynthConfig {
        n_samples: 200,
        subjects_per_class: 5,
        ..SynthConfig::default()
    });
    cfg.schedule = schedule(4, 2);
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        pipeline::train(&cfg, out, |_| {}).map_err(|e| e.to_string())?;
    }
    for f in [REPORT_FILE, CHECKPOINT_FILE, pipeline::METRICS_FILE, pipeline::CONFIG_FILE] {
        let (x, y) = (std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap());
        ensure(x == y, format!("{f} differs between runs"))?;
    }
    Ok("report, checkpoint, metrics and config byte-identical across two runs".into())
}

fn main() {
    let criteria: [(&str, &str, Check); 9] = [
        ("1", "gradient suite", c1_gradients),
        ("2", "sparsification oracle", c2_sparsify),
        ("3", "MoE equivalence", c3_moe),
        ("4", "loss algebra", c4_losses),
        ("5", "schedule", c5_schedule),
        ("6", "end-to-end learning", c6_learning),
        ("7", "early-sweep sanity", c7_early_sweep),
        ("8", "subject consistency", c8_subjects),
        ("9", "determinism", c9_determinism),
    ];
    let wanted: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (id, name, check) in criteria {
        if !wanted.is_empty() && !wanted.iter().any(|w| w == id) {
            continue;
        }
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        match result {
            Ok(detail) => println!("PASS criterion {id} ({name}): {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL criterion {id} ({name}): {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
