//! End-to-end acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

use std::process::ExitCode;
use std::time::Instant;

use gatelora::adapter::{record_gated, AdapterApply, AdapterVars, GateMode};
use gatelora::analysis::{
    adapter_flops, merge_adapters, model_flops_report, random_selection_baseline, BlockCost, FlopsMode,
};
use gatelora::checkpoint::Checkpoint;
use gatelora::gradcheck::{check_against_differences, grad_check, rel_err, GradCheckOptions, GradCheckReport};
use gatelora::model::{ParamRef, TrainScope};
use gatelora::optim::OptimSpec;
use gatelora::tensor::DType;
use gatelora::train::{evaluate_run, finetune, pretrain, AdapterConfig, DataConfig, RunConfig, RunResult};
use gatelora::{
    enumerate_sites, AdapterBlock, AdapterKind, GateState, Graph, ModelConfig, RegKind, RegularizerSpec, SiteId,
    SiteKind, Tensor, Var, VisionTransformer,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

type Outcome = (bool, String);

/// Desk protocol shared by the training criteria.
mod protocol {
    pub const NOISE: f64 = 1.0;
    pub const TRAIN_PER_CLASS: usize = 64;
    pub const VAL_PER_CLASS: usize = 32;
    pub const BATCH: usize = 16;
    pub const PRETRAIN_STEPS: usize = 300;
    pub const PRETRAIN_WARMUP: usize = 30;
    pub const FINETUNE_STEPS: usize = 1000;
    pub const WARMUP: usize = 100;
    pub const EVAL_EVERY: usize = 100;
    pub const RANK: usize = 64;
    pub const ALPHA: f64 = 512.0;
    pub const LR: f64 = 0.005;
    pub const SCORE_LR: Option<f64> = None;
    pub const K: usize = 20;
    pub const SEEDS: [u64; 3] = [0, 1, 2];
}

fn tiny_cfg() -> ModelConfig {
    ModelConfig {
        image_size: 8,
        channels: 1,
        patch_size: 4,
        dim: 8,
        heads: 2,
        layers: 2,
        mlp_ratio: 2,
        num_classes: 3,
    }
}

fn images(n: usize, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::randn(&[n, cfg.channels, cfg.image_size, cfg.image_size], 1.0, rng)
}

fn adapted(cfg: &ModelConfig, kind: AdapterKind, rank: usize, score: f64, seed: u64) -> VisionTransformer {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut m = VisionTransformer::new(cfg.clone(), &mut rng).unwrap();
    let sites = enumerate_sites(cfg);
    let gate = GateState::new(score, 0.1).unwrap();
    m.attach_adapters(&sites, kind, rank, 2.0 * rank as f64, gate, &mut rng)
        .unwrap();
    for blk in m.adapters.values_mut() {
        blk.b = Tensor::randn(blk.b.shape(), 0.1, &mut rng);
        if let Some(mag) = blk.magnitude.as_mut() {
            *mag = mag.map(|v| v * 1.1);
        }
    }
    m
}

fn merge_reports(into: &mut GradCheckReport, r: GradCheckReport) {
    into.checked += r.checked;
    into.max_rel_err = into.max_rel_err.max(r.max_rel_err);
    into.failures.extend(r.failures);
}

fn op_suite() -> GradCheckReport {
    let mut rng = ChaCha8Rng::seed_from_u64(100);
    let opts = GradCheckOptions::default();
    let mut total = GradCheckReport::default();
    let mut run = |f: &dyn Fn(&mut Graph, &[Var]) -> gatelora::Result<Var>, inputs: Vec<Tensor>| {
        merge_reports(&mut total, grad_check(f, &inputs, opts).unwrap());
    };
    let a = Tensor::randn(&[3, 4], 1.0, &mut rng);
    let b = Tensor::randn(&[4, 2], 1.0, &mut rng);
    let c = Tensor::randn(&[3, 4], 1.0, &mut rng);
    // Weighted sums keep every output element's derivative distinct.
    let weighted = |g: &mut Graph, y: Var, shape: &[usize]| -> gatelora::Result<Var> {
        let n: usize = shape.iter().product();
        let wts = Tensor::new(shape.to_vec(), (0..n).map(|i| 0.3 + 0.17 * i as f64).collect())?;
        let wv = g.constant(wts);
        let p = g.mul(y, wv)?;
        Ok(g.sum(p))
    };
    run(
        &|g, v| {
            let y = g.matmul(v[0], v[1])?;
            weighted(g, y, &[3, 2])
        },
        vec![a.clone(), b.clone()],
    );
    run(
        &|g, v| {
            let y = g.add(v[0], v[1])?;
            weighted(g, y, &[3, 4])
        },
        vec![a.clone(), c.clone()],
    );
    run(
        &|g, v| {
            let y = g.sub(v[0], v[1])?;
            weighted(g, y, &[3, 4])
        },
        vec![a.clone(), c.clone()],
    );
    run(
        &|g, v| {
            let y = g.mul(v[0], v[1])?;
            weighted(g, y, &[3, 4])
        },
        vec![a.clone(), c.clone()],
    );
    run(
        &|g, v| {
            let y = g.scale(v[0], -1.7);
            weighted(g, y, &[3, 4])
        },
        vec![a.clone()],
    );
    run(
        &|g, v| {
            let y = g.add_scalar(v[0], 0.4);
            let y = g.mul(y, y)?;
            weighted(g, y, &[3, 4])
        },
        vec![a.clone()],
    );
    run(
        &|g, v| {
            let y = g.softmax(v[0]);
            weighted(g, y, &[3, 4])
        },
        vec![a.clone()],
    );
    run(
        &|g, v| {
            let y = g.gelu(v[0]);
            weighted(g, y, &[3, 4])
        },
        vec![a.clone()],
    );
    let gamma = Tensor::uniform(&[4], 0.5, 1.5, &mut rng);
    let beta = Tensor::randn(&[4], 0.3, &mut rng);
    run(
        &|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            weighted(g, y, &[3, 4])
        },
        vec![a.clone(), gamma, beta],
    );
    run(&|g, v| g.cross_entropy(v[0], &[1, 3, 0]), vec![a.clone()]);
    run(
        &|g, v| {
            let y = g.reshape(v[0], &[2, 6])?;
            weighted(g, y, &[2, 6])
        },
        vec![a.clone()],
    );
    run(
        &|g, v| {
            let y = g.select_rows(v[0], &[2, 0, 2])?;
            weighted(g, y, &[3, 4])
        },
        vec![a.clone()],
    );
    // Attention plumbing: batch 2, 3 tokens, 2 heads of width 2.
    let x = Tensor::randn(&[6, 4], 1.0, &mut rng);
    let y = Tensor::randn(&[6, 4], 1.0, &mut rng);
    run(
        &|g, v| {
            let q = g.split_heads(v[0], 2, 3, 2)?;
            let k = g.split_heads(v[1], 2, 3, 2)?;
            let s = g.batch_matmul(q, k, true)?;
            let p = g.softmax(s);
            let o = g.batch_matmul(p, q, false)?;
            let m = g.merge_heads(o, 2, 3, 2)?;
            weighted(g, m, &[6, 4])
        },
        vec![x, y],
    );
    let patches = Tensor::randn(&[4, 4], 1.0, &mut rng);
    let cls = Tensor::randn(&[4], 1.0, &mut rng);
    let pos = Tensor::randn(&[3, 4], 1.0, &mut rng);
    run(
        &|g, v| {
            let t = g.assemble_tokens(v[0], v[1], v[2], 2)?;
            weighted(g, t, &[6, 4])
        },
        vec![patches, cls, pos],
    );
    total
}

fn adapter_suite() -> GradCheckReport {
    let mut total = GradCheckReport::default();
    for kind in [AdapterKind::Lora, AdapterKind::Dora] {
        for score in [0.5, 0.0] {
            let mut rng = ChaCha8Rng::seed_from_u64(200);
            let w0 = Tensor::randn(&[5, 3], 0.5, &mut rng);
            let gate = GateState::new(score, 0.1).unwrap();
            let mut blk = AdapterBlock::init(SiteId::new(0, SiteKind::Q), kind, &w0, 2, 3.0, gate, &mut rng).unwrap();
            blk.b = Tensor::randn(&[2, 3], 0.5, &mut rng);
            let x = Tensor::randn(&[4, 5], 1.0, &mut rng);
            let wts = Tensor::randn(&[4, 3], 1.0, &mut rng);
            let mut inputs = vec![x, blk.a.clone(), blk.b.clone()];
            inputs.extend(blk.magnitude.clone());
            let apply = AdapterApply {
                kind,
                scale: blk.scale(),
                gate_on: blk.gate.is_active(),
                mode: GateMode::default(),
            };
            let report = grad_check(
                |g, v| {
                    let wv = g.constant(w0.clone());
                    let vars = AdapterVars {
                        a: v[1],
                        b: v[2],
                        magnitude: v.get(3).copied(),
                        score: None,
                    };
                    let y = record_gated(g, v[0], wv, vars, apply)?;
                    let wt = g.constant(wts.clone());
                    let p = g.mul(y, wt)?;
                    let sq = g.mul(p, p)?;
                    Ok(g.sum(sq))
                },
                &inputs,
                GradCheckOptions::default(),
            )
            .unwrap();
            // Gate off: a and b are dead inputs on both sides.
            merge_reports(&mut total, report);
        }
    }
    total
}

/// Every bound tensor of a model against central differences of the cross-entropy loss.
fn model_suite(m: &VisionTransformer, x: &Tensor, labels: &[usize]) -> GradCheckReport {
    let mut g = Graph::new();
    let out = m.forward(&mut g, x, TrainScope::ALL, GateMode::default()).unwrap();
    let loss = g.cross_entropy(out.logits, labels).unwrap();
    g.backward(loss).unwrap();
    let mut names = Vec::new();
    let mut inputs = Vec::new();
    let mut analytic = Vec::new();
    for (r, v) in &out.bindings {
        if let ParamRef::Tensor(n) = r {
            names.push(n.clone());
            inputs.push(g.value(*v).clone());
            analytic.push(
                g.grad(*v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(g.value(*v).shape())),
            );
        }
    }
    let eval = |probe: &[Tensor]| -> gatelora::Result<f64> {
        let mut pm = m.clone();
        for (n, t) in names.iter().zip(probe) {
            *pm.tensor_mut(n).unwrap() = t.clone();
        }
        let mut g = Graph::no_grad();
        let out = pm.forward(&mut g, x, TrainScope::NONE, GateMode::default())?;
        let l = g.cross_entropy(out.logits, labels)?;
        Ok(g.value(l).item())
    };
    check_against_differences(eval, &inputs, &analytic, GradCheckOptions::default()).unwrap()
}

/// Score gradients from the engine vs differences of the loss with the site's weight
/// replaced by `w0 + m·(W_eff − w0)`, evaluated at `m = indicator`.
fn ste_suite(m: &VisionTransformer, x: &Tensor, labels: &[usize]) -> (f64, usize) {
    let mut g = Graph::new();
    let out = m.forward(&mut g, x, TrainScope::FINETUNE, GateMode::default()).unwrap();
    let loss = g.cross_entropy(out.logits, labels).unwrap();
    g.backward(loss).unwrap();
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    for (r, v) in &out.bindings {
        let ParamRef::Score(site) = r else { continue };
        let engine = g.grad(*v).map_or(0.0, |t| t.item());
        let blk = &m.adapters[site];
        let w0 = m.site_weight(*site).clone();
        let weff = blk.effective_weight(&w0).unwrap();
        let relaxed = |mult: f64| {
            let mut pm = m.clone();
            pm.adapters.remove(site);
            *pm.site_weight_mut(*site) = w0.zip_map(&weff, |a, b| a + mult * (b - a)).unwrap();
            let mut g = Graph::no_grad();
            let out = pm.forward(&mut g, x, TrainScope::NONE, GateMode::default()).unwrap();
            let l = g.cross_entropy(out.logits, labels).unwrap();
            g.value(l).item()
        };
        let m0 = blk.gate.indicator() as f64;
        let h = 1e-5;
        let fd = (relaxed(m0 + h) - relaxed(m0 - h)) / (2.0 * h);
        worst = worst.max(rel_err(engine, fd, 1e-8));
        checked += 1;
    }
    (worst, checked)
}

fn criterion_gradients() -> Outcome {
    let mut report = op_suite();
    merge_reports(&mut report, adapter_suite());
    let cfg = tiny_cfg();
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    let x = images(2, &cfg, &mut rng);
    let labels = [0, 2];
    let trunk = VisionTransformer::new(cfg.clone(), &mut rng).unwrap();
    merge_reports(&mut report, model_suite(&trunk, &x, &labels));
    let mut ste_worst: f64 = 0.0;
    let mut ste_checked = 0;
    for kind in [AdapterKind::Lora, AdapterKind::Dora] {
        let mut m = adapted(&cfg, kind, 2, 0.5, 301);
        merge_reports(&mut report, model_suite(&m, &x, &labels));
        // Half the gates off so both branches of the estimator are exercised.
        for (i, blk) in m.adapters.values_mut().enumerate() {
            if i % 2 == 1 {
                blk.gate.score = 0.0;
            }
        }
        let (w, c) = ste_suite(&m, &x, &labels);
        ste_worst = ste_worst.max(w);
        ste_checked += c;
    }
    let ok = report.passed() && report.max_rel_err < 1e-4 && ste_worst < 1e-5 && ste_checked == 24;
    (
        ok,
        format!(
            "{} elements, max rel err {:.2e}; {} score grads vs relaxation, max rel err {:.2e}",
            report.checked, report.max_rel_err, ste_checked, ste_worst
        ),
    )
}

fn criterion_gate_off() -> Outcome {
    let cfg = ModelConfig::default();
    let mut bad = 0;
    for kind in [AdapterKind::Lora, AdapterKind::Dora] {
        let m = adapted(&cfg, kind, 4, 0.0, 400);
        let mut base = m.clone();
        base.detach_adapters();
        let mut rng = ChaCha8Rng::seed_from_u64(401);
        for _ in 0..100 {
            let x = images(1, &cfg, &mut rng);
            if !m.logits(&x).unwrap().bit_eq(&base.logits(&x).unwrap()) {
                bad += 1;
            }
        }
    }
    (bad == 0, format!("200 inputs (LoRA and DoRA), {bad} differ"))
}

fn criterion_merge() -> Outcome {
    let cfg = ModelConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let mut worst: f64 = 0.0;
    let mut worst_f32_merged: f64 = 0.0;
    let mut rng = ChaCha8Rng::seed_from_u64(500);
    let probe = images(64, &cfg, &mut rng);
    for kind in [AdapterKind::Lora, AdapterKind::Dora] {
        for rank in [4, 64] {
            let mut m = adapted(&cfg, kind, rank, 0.5, 501 + rank as u64);
            // A mix of active and inactive blocks.
            for (i, blk) in m.adapters.values_mut().enumerate() {
                if i % 3 == 0 {
                    blk.gate.score = 0.0;
                }
            }
            let path = dir.path().join(format!("{kind:?}{rank}"));
            Checkpoint::new(m, None, DType::F32).save(&path).unwrap();
            let loaded = Checkpoint::load(&path).unwrap().model;
            let merged = merge_adapters(&loaded).unwrap();
            let unmerged = loaded.logits(&probe).unwrap();
            worst = worst.max(merged.logits(&probe).unwrap().max_abs_diff(&unmerged));
            let mpath = dir.path().join(format!("{kind:?}{rank}-merged"));
            Checkpoint::new(merged, None, DType::F32).save(&mpath).unwrap();
            let reloaded = Checkpoint::load(&mpath).unwrap().model;
            worst_f32_merged = worst_f32_merged.max(reloaded.logits(&probe).unwrap().max_abs_diff(&unmerged));
        }
    }
    (
        worst < 1e-6 && worst_f32_merged < 1e-6,
        format!("max |merged - unmerged| {worst:.2e} in memory, {worst_f32_merged:.2e} after storing merged as f32"),
    )
}

fn criterion_flops() -> Outcome {
    let enumerate = |m: u64, n: u64, r: u64, t: u64| {
        let mut flops = 0u64;
        for _ in 0..t {
            for _ in 0..r * m {
                flops += 2;
            }
            for _ in 0..r * n {
                flops += 2;
            }
        }
        flops
    };
    let mut grid_ok = true;
    for m in [1u64, 4, 16, 64] {
        for n in [1u64, 8, 64, 256] {
            for r in [0u64, 1, 4, 16, 64] {
                for t in [1u64, 17] {
                    grid_ok &= adapter_flops(m, n, r, t) == enumerate(m, n, r, t);
                }
            }
        }
    }
    let cfg = ModelConfig::default();
    let tokens = cfg.tokens() as u64;
    let square: Vec<SiteId> = enumerate_sites(&cfg)
        .into_iter()
        .filter(|s| matches!(s.kind, SiteKind::Q | SiteKind::K | SiteKind::V | SiteKind::Mlp1))
        .collect();
    let blocks = |active: usize, rank: usize| -> Vec<BlockCost> {
        square
            .iter()
            .enumerate()
            .map(|(i, &site)| BlockCost {
                site,
                kind: AdapterKind::Lora,
                rank,
                active: i < active,
            })
            .collect()
    };
    // active_count · rank = 64 throughout.
    let totals: Vec<u64> = [(1, 64), (2, 32), (4, 16), (8, 8)]
        .iter()
        .map(|&(a, r)| model_flops_report(&cfg, &blocks(a, r), FlopsMode::Unmerged, tokens).total)
        .collect();
    let constant = totals.windows(2).all(|w| w[0] == w[1]);
    let mut ratio_ok = true;
    for active in 1..=square.len() {
        let rep = model_flops_report(&cfg, &blocks(active, 8), FlopsMode::Unmerged, tokens);
        let expected = square.len() as f64 / active as f64;
        ratio_ok &= (rep.ungated_over_gated.unwrap() - expected).abs() < 1e-12;
    }
    (
        grid_ok && constant && ratio_ok,
        format!("grid exact: {grid_ok}; fixed active·rank totals {totals:?}; full/gated = 1/fraction: {ratio_ok}"),
    )
}

struct Desk {
    pre: VisionTransformer,
    base: RunConfig,
}

fn uri(domain: &str, split: &str, n: usize) -> String {
    format!("synth:{domain}?seed=1&split={split}&n={n}&noise={}", protocol::NOISE)
}

fn desk() -> Desk {
    use protocol::*;
    let mut run = RunConfig::new(DataConfig {
        train: uri("source", "train", TRAIN_PER_CLASS),
        val: uri("source", "val", VAL_PER_CLASS),
        retention_train: None,
        retention_val: None,
    });
    run.batch_size = BATCH;
    run.steps = PRETRAIN_STEPS;
    run.schedule.warmup_steps = PRETRAIN_WARMUP;
    run.eval_every = EVAL_EVERY;
    run.optim = OptimSpec::adamw(1e-3, 0.01);
    let pre = pretrain(&run).unwrap().selected;

    let mut ft = run;
    ft.data = DataConfig {
        train: uri("target", "train", TRAIN_PER_CLASS),
        val: uri("target", "val", VAL_PER_CLASS),
        retention_train: Some(uri("source", "train", TRAIN_PER_CLASS)),
        retention_val: Some(uri("source", "val", VAL_PER_CLASS)),
    };
    ft.steps = FINETUNE_STEPS;
    ft.schedule.warmup_steps = WARMUP;
    ft.optim = OptimSpec::sgd(LR);
    ft.score_lr = SCORE_LR;
    let mut adapter = AdapterConfig::lora(RANK);
    adapter.alpha = Some(ALPHA);
    ft.adapter = Some(adapter);
    Desk { pre, base: ft }
}

struct Trained {
    result: RunResult,
    target: f64,
    knn: f64,
}

impl Desk {
    fn config(&self, kind: RegKind, lambda: f64, seed: u64) -> RunConfig {
        let mut run = self.base.clone();
        run.reg = RegularizerSpec {
            kind,
            lambda,
            tau: (kind == RegKind::Hinge).then_some(0.1),
        };
        run.seed = seed;
        run
    }

    fn score(&self, run: &RunConfig, result: RunResult) -> Trained {
        let e = evaluate_run(run, &result.selected, protocol::K).unwrap();
        Trained {
            result,
            target: e.target_top1,
            knn: e.retention_knn.unwrap(),
        }
    }

    fn train(&self, kind: RegKind, lambda: f64, seed: u64) -> Trained {
        let run = self.config(kind, lambda, seed);
        let result = finetune(&run, &self.pre).unwrap();
        self.score(&run, result)
    }
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = v.collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn active_pct(r: &RunResult) -> f64 {
    100.0 * r.final_active() as f64 / r.sites.len() as f64
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, started: Instant, (ok, detail): Outcome| {
        println!(
            "{} criterion {n} ({name}): {detail} [{:.1}s]",
            if ok { "PASS" } else { "FAIL" },
            started.elapsed().as_secs_f64()
        );
        if !ok {
            failed += 1;
        }
    };

    let t = Instant::now();
    report(1, "gradient suite", t, criterion_gradients());
    let t = Instant::now();
    report(2, "gate-off equivalence", t, criterion_gate_off());
    let t = Instant::now();
    report(3, "merge soundness", t, criterion_merge());

    let t = Instant::now();
    let desk = desk();
    let seeds = protocol::SEEDS;
    let lambdas = [0.1, 0.5, 1.0];
    let sweep: Vec<Vec<Trained>> = lambdas
        .iter()
        .map(|&l| seeds.iter().map(|&s| desk.train(RegKind::L1, l, s)).collect())
        .collect();
    let means: Vec<f64> = sweep
        .iter()
        .map(|runs| mean(runs.iter().map(|r| active_pct(&r.result))))
        .collect();
    let monotone = means.windows(2).all(|w| w[1] <= w[0]);
    report(
        4,
        "sparsity vs lambda",
        t,
        (
            monotone && means[2] < 100.0,
            format!("mean final active % at lambda {lambdas:?}: {:.2?}", means),
        ),
    );

    let t = Instant::now();
    let gated = &sweep[2];
    let plain: Vec<Trained> = seeds.iter().map(|&s| desk.train(RegKind::L1, 0.0, s)).collect();
    let gap = 100.0 * (mean(plain.iter().map(|r| r.target)) - mean(gated.iter().map(|r| r.target)));
    let retained = gated.iter().zip(&plain).filter(|(g, p)| g.knn >= p.knn).count();
    let fmt = |runs: &[Trained]| -> String {
        runs.iter()
            .map(|r| format!("{:.3}/{:.3}", r.target, r.knn))
            .collect::<Vec<_>>()
            .join(" ")
    };
    report(
        5,
        "retention",
        t,
        (
            gap <= 3.0 && retained >= 2,
            format!(
                "target/knn gated [{}] plain [{}]; mean target gap {gap:.2} pts; knn >= plain in {retained}/3 seeds",
                fmt(gated),
                fmt(&plain)
            ),
        ),
    );

    let t = Instant::now();
    let mut random = Vec::new();
    for (g, &s) in gated.iter().zip(&seeds) {
        let n = g.result.final_active();
        let (result, run) = random_selection_baseline(n, s, &desk.config(RegKind::L1, 0.0, s), &desk.pre).unwrap();
        random.push((n, desk.score(&run, result)));
    }
    let learned = mean(gated.iter().map(|r| r.target));
    let rand_mean = mean(random.iter().map(|(_, r)| r.target));
    report(
        6,
        "random vs learned",
        t,
        (
            learned >= rand_mean,
            format!(
                "learned target {learned:.3} vs random {rand_mean:.3} with n_active {:?}",
                random.iter().map(|(n, _)| *n).collect::<Vec<_>>()
            ),
        ),
    );

    let t = Instant::now();
    report(7, "flops model", t, criterion_flops());

    let t = Instant::now();
    let mut ablation = vec![("l1", active_pct(&gated[0].result))];
    for (name, kind) in [("l2", RegKind::L2), ("hinge", RegKind::Hinge)] {
        ablation.push((name, active_pct(&desk.train(kind, 1.0, seeds[0]).result)));
    }
    report(
        8,
        "regularizer ablation",
        t,
        (
            ablation.iter().all(|(_, p)| *p < 100.0),
            format!("final active % at lambda 1: {ablation:?}"),
        ),
    );

    let t = Instant::now();
    let run = desk.config(RegKind::L1, 1.0, seeds[0]);
    let again = finetune(&run, &desk.pre).unwrap().metrics_csv();
    let mut pre_run = desk.base.clone();
    pre_run.adapter = None;
    pre_run.steps = 40;
    pre_run.schedule.warmup_steps = 4;
    pre_run.data.train = uri("source", "train", 8);
    let p1 = pretrain(&pre_run).unwrap().metrics_csv();
    let p2 = pretrain(&pre_run).unwrap().metrics_csv();
    let same = again == gated[0].result.metrics_csv() && p1 == p2;
    report(
        9,
        "reproducibility",
        t,
        (
            same,
            format!("fine-tune and pretrain metrics CSV identical on repeat: {same}"),
        ),
    );

    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
