//! Acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 1-4 and 10 are exact properties and fail the test when violated.
//! Criteria 5-9 are toy-scale training trends; they are reported, and only
//! fail the test when `MEMREASONER_STRICT=1` is set.

mod common;

use std::io::Write;
use std::time::Instant;

use memreasoner::eval::{run_suite, write_csv, EvalConfig, ReportRow, SuiteId, SuiteSpec};
use memreasoner::model::{Model, ModelConfig};
use memreasoner::oracle;
use memreasoner::taskgen::{generate, generate_one, write_dataset, GenSpec, PadKind, Sample, Task, WorldConfig};
use memreasoner::training::{load_model, TrainConfig, Trainer};
use memreasoner::vocab::Vocab;

/// Writes past the test harness's output capture.
fn say(line: &str) {
    let _ = writeln!(std::io::stderr(), "{line}");
}

struct Outcome {
    id: u8,
    pass: bool,
    hard: bool,
    line: String,
}

fn report(id: u8, hard: bool, pass: bool, what: &str, detail: String, start: Instant) -> Outcome {
    let line = format!(
        "criterion {id:>2} {} {what}: {detail} ({:.1} s)",
        if pass { "PASS" } else { "FAIL" },
        start.elapsed().as_secs_f64()
    );
    say(&line);
    Outcome { id, pass, hard, line }
}

fn criterion_1() -> Outcome {
    let t = Instant::now();
    let seeds = 0..100u64;
    let idem = seeds.clone().map(common::idempotence_error).fold(0.0, f64::max);
    let cont = seeds.clone().map(common::containment_residual).fold(0.0, f64::max);
    let lin = seeds.clone().map(common::linearity_error).fold(0.0, f64::max);
    let mono = seeds.map(|s| common::strictly_decreasing(&common::ridge_distances(s))).filter(|b| *b).count();
    let elapsed = t.elapsed().as_secs_f64();
    let pass = idem <= 1e-5 && cont <= 1e-5 && lin <= 1e-5 && mono == 100 && elapsed < 10.0;
    let detail = format!(
        "idempotence {idem:.1e}, row-space residual {cont:.1e}, linearity {lin:.1e}, ridge monotone {mono}/100"
    );
    report(1, true, pass, "memory math", detail, t)
}

fn criterion_2() -> Outcome {
    let t = Instant::now();
    let (rep, _) = common::full_grad_check();
    let pass = rep.max_rel_error <= 1e-4 && t.elapsed().as_secs_f64() < 60.0;
    let detail = format!("max relative error {:.2e} over {} probes", rep.max_rel_error, rep.probes);
    report(2, true, pass, "gradient check", detail, t)
}

fn criterion_3() -> Outcome {
    use memreasoner::linalg::Mat;
    use rand::{Rng, SeedableRng};
    let t = Instant::now();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let as_rows = |d: &[f64]| Mat::from_shape_fn((d.len(), 2), |(i, j)| if j == 0 { d[i] } else { 0.0 });
    let z = Mat::zeros((1, 2));
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let e = rng.random_range(1..=20);
        let d: Vec<f64> = (0..e).map(|_| rng.random_range(0.0..6.0)).collect();
        let s = rng.random_range(0..e);
        let got = memreasoner::training::ordering_loss(&z, &as_rows(&d), s).unwrap();
        worst = worst.max((got - common::direct_ordering(&d, s)).abs());
    }
    let three = memreasoner::training::ordering_loss(&z, &as_rows(&[0.0, 1.0, 2.0]), 0).unwrap();
    let analytic = (1.0 + (-1.0f64).exp() + (-2.0f64).exp()).ln();
    let uniform = (1..=20)
        .map(|e| (memreasoner::training::ordering_loss(&z, &as_rows(&vec![1.5; e]), 0).unwrap() - (e as f64).ln()).abs())
        .fold(0.0, f64::max);
    let pass = worst <= 1e-8 && (three - analytic).abs() <= 1e-8 && (three - 0.4076).abs() < 5e-5 && uniform <= 1e-8;
    let detail = format!("max |diff| {worst:.1e}; [0,1,2] -> {three:.6}; uniform vs ln E {uniform:.1e}");
    report(3, true, pass, "ordering loss oracle", detail, t)
}

fn oracle_agrees(s: &Sample) -> bool {
    oracle::solve(s).map(|sol| sol.answer == s.answer && sol.supporting == s.supporting).unwrap_or(false)
}

/// Lines after the last supporting fact whose subject is that fact's entity.
fn late_mentions(s: &Sample) -> usize {
    let last = *s.supporting.last().unwrap();
    let entity = s.context[last].split_whitespace().next().unwrap_or_default();
    s.context[last + 1..].iter().filter(|l| l.split_whitespace().next() == Some(entity)).count()
}

fn criterion_4() -> Outcome {
    let t = Instant::now();
    let world = WorldConfig::default();
    let mut parts = Vec::new();
    let mut pass = true;
    let tasks = [(Task::Hop1, 1, "hop1"), (Task::Hop2, 2, "hop2"), (Task::Vt, 1, "vt1"), (Task::Vt, 2, "vt2")];
    for (task, hops, name) in tasks {
        let mut spec = GenSpec::new(task);
        spec.hops = hops;
        let bad = generate(&spec, &world, 10_000, 41).unwrap().iter().filter(|s| !oracle_agrees(s)).count();
        pass &= bad == 0;
        parts.push(format!("{name} {bad}/10000"));
    }
    for kind in [PadKind::Hard, PadKind::Soft] {
        let mut bad = 0;
        let mut violations = 0;
        for task in [Task::Hop1, Task::Hop2] {
            let mut spec = GenSpec::new(task);
            spec.pad_kind = kind;
            spec.pad_tokens = 1000;
            let plain = GenSpec::new(task);
            for i in 0..500 {
                let padded = generate_one(&spec, &world, 43, i).unwrap();
                let base = generate_one(&plain, &world, 43, i).unwrap();
                bad += usize::from(!oracle_agrees(&padded) || padded.answer != base.answer);
                if kind == PadKind::Soft {
                    violations += late_mentions(&padded) - late_mentions(&base);
                }
            }
        }
        pass &= bad == 0 && violations == 0;
        parts.push(format!("{kind:?} padding {bad}/1000 changed"));
        if kind == PadKind::Soft {
            parts.push(format!("entity constraint violations {violations}"));
        }
    }
    report(4, true, pass, "generator soundness", parts.join(", "), t)
}

fn train(task: Task, hops: usize, n: usize, cfg: TrainConfig) -> (Model, Vocab) {
    let mut spec = GenSpec::new(task);
    spec.hops = hops;
    let data = generate(&spec, &WorldConfig::default(), n, 1).unwrap();
    let vocab = Vocab::standard();
    let model = Model::new(ModelConfig {
        vocab_size: vocab.len(),
        ..ModelConfig::default()
    })
    .unwrap();
    let mut t = Trainer::new(model, vocab, cfg, &data).unwrap();
    t.run(None, |_| {}).unwrap();
    (t.model, t.vocab)
}

const TRAIN_SAMPLES: usize = 20_000;
const EVAL_SEEDS: [u64; 3] = [0, 1, 2];

fn suite(model: &(Model, Vocab), id: SuiteId, task: Task, pads: &[usize], n: usize, iu: bool) -> Vec<ReportRow> {
    let mut spec = SuiteSpec::new(id, task);
    spec.pads = pads.to_vec();
    spec.seeds = EVAL_SEEDS.to_vec();
    spec.n = n;
    let base = EvalConfig {
        iu,
        timing: false,
        ..EvalConfig::default()
    };
    run_suite(&spec, &model.0, &model.1, &base).unwrap()
}

/// Seed-averaged accuracy at `pad`.
fn mean_at(rows: &[ReportRow], pad: usize) -> f64 {
    let acc: Vec<f64> = rows.iter().filter(|r| r.pad_tokens == pad).map(|r| r.accuracy).collect();
    acc.iter().sum::<f64>() / acc.len() as f64
}

fn criteria_5_8_9() -> Vec<Outcome> {
    let t = Instant::now();
    let model = train(Task::Hop1, 1, TRAIN_SAMPLES, TrainConfig::default());
    let trained = t.elapsed().as_secs_f64();

    let t5 = Instant::now();
    let clean = suite(&model, SuiteId::InDist, Task::Hop1, &[0], 200, false);
    let long_iu = suite(&model, SuiteId::LengthHard, Task::Hop1, &[1000, 2000, 4000], 100, true);
    let a0 = mean_at(&clean, 0);
    let a4k = mean_at(&long_iu, 4000);
    let detail = format!("train {trained:.0} s; 0 pad {a0:.3} (>= 0.95), 4k hard pad with IU {a4k:.3} (>= 0.75)");
    let c5 = report(5, false, a0 >= 0.95 && a4k >= 0.75, "hop-1 length trend", detail, t5);

    let t8 = Instant::now();
    let long = suite(&model, SuiteId::LengthHard, Task::Hop1, &[1000, 2000, 4000], 100, false);
    let mut parts = Vec::new();
    let mut pass = true;
    for pad in [1000, 2000, 4000] {
        let (with, without) = (mean_at(&long_iu, pad), mean_at(&long, pad));
        pass &= with >= without;
        parts.push(format!("{pad}: IU {with:.3} vs {without:.3}"));
    }
    let c8 = report(8, false, pass, "IU ablation", parts.join(", "), t8);

    let t9 = Instant::now();
    let swapped = mean_at(&suite(&model, SuiteId::LocationSwap, Task::Hop1, &[0], 200, false), 0);
    let c9 = report(9, false, swapped >= 0.80, "location swap", format!("accuracy {swapped:.3} (>= 0.80)"), t9);
    vec![c5, c8, c9]
}

fn criterion_6() -> Outcome {
    let t = Instant::now();
    let mut acc = Vec::new();
    for fraction in [1.0, 0.01, 0.0] {
        let cfg = TrainConfig {
            sf_fraction: fraction,
            ..TrainConfig::default()
        };
        let model = train(Task::Hop2, 2, TRAIN_SAMPLES, cfg);
        acc.push(mean_at(&suite(&model, SuiteId::InDist, Task::Hop2, &[0], 200, false), 0));
    }
    let (full, one, none) = (acc[0], acc[1], acc[2]);
    let pass = full - one >= 0.10 && one - none >= 0.10 && full >= 0.90;
    let detail = format!("100% SF {full:.3}, 1% SF {one:.3}, 0% SF {none:.3} (gaps >= 0.10, top >= 0.90)");
    report(6, false, pass, "supervision benefit", detail, t)
}

fn criterion_7() -> Outcome {
    let t = Instant::now();
    let model = train(Task::Vt, 1, TRAIN_SAMPLES, TrainConfig::default());
    let rows = suite(&model, SuiteId::VtLengths, Task::Vt, &[0, 1000, 4000], 100, true);
    let accs: Vec<f64> = [0, 1000, 4000].iter().map(|&p| mean_at(&rows, p)).collect();
    let pass = accs.iter().all(|a| *a >= 0.95);
    let detail = format!("0 / 1k / 4k with IU: {:.3} / {:.3} / {:.3} (>= 0.95 each)", accs[0], accs[1], accs[2]);
    report(7, false, pass, "VT 1-hop robustness", detail, t)
}

fn criterion_10() -> Outcome {
    let t = Instant::now();
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let bytes = |name: &str| std::fs::read(p(name)).unwrap();
    let mut parts = Vec::new();

    let mut spec = GenSpec::new(Task::Hop2);
    spec.pad_kind = PadKind::Soft;
    spec.pad_tokens = 300;
    for name in ["a.jsonl", "b.jsonl"] {
        write_dataset(&generate(&spec, &WorldConfig::default(), 200, 7).unwrap(), &p(name)).unwrap();
    }
    let gen_ok = bytes("a.jsonl") == bytes("b.jsonl");
    parts.push(format!("gen {}", if gen_ok { "identical" } else { "differs" }));

    let data = generate(&GenSpec::new(Task::Hop2), &WorldConfig::default(), 64, 3).unwrap();
    let vocab = Vocab::standard();
    let mcfg = ModelConfig {
        vocab_size: vocab.len(),
        d_embed: 16,
        d_latent: 16,
        d_model: 16,
        ..ModelConfig::default()
    };
    let tcfg = TrainConfig {
        steps: 12,
        batch: 8,
        sf_fraction: 0.5,
        corpus_size: 100,
        ..TrainConfig::default()
    };
    let new_trainer = || Trainer::new(Model::new(mcfg.clone()).unwrap(), vocab.clone(), tcfg.clone(), &data).unwrap();
    for name in ["t1.mrck", "t2.mrck"] {
        new_trainer().run(Some(&p(name)), |_| {}).unwrap();
    }
    let mut half = new_trainer();
    half.cfg.steps = 6;
    half.run(Some(&p("half.mrck")), |_| {}).unwrap();
    Trainer::resume(&p("half.mrck"), &data, Some(12)).unwrap().run(Some(&p("resumed.mrck")), |_| {}).unwrap();
    let train_ok = bytes("t1.mrck") == bytes("t2.mrck") && bytes("t1.mrck") == bytes("resumed.mrck");
    parts.push(format!("train + resume {}", if train_ok { "identical" } else { "differs" }));

    let (model, vocab, _) = load_model(&p("t1.mrck")).unwrap();
    memreasoner::training::save_model(&p("m1.mrck"), &model, &vocab).unwrap();
    let (again, _, _) = load_model(&p("m1.mrck")).unwrap();
    memreasoner::training::save_model(&p("m2.mrck"), &again, &vocab).unwrap();
    let ckpt_ok = again.params == model.params && bytes("m1.mrck") == bytes("m2.mrck");
    parts.push(format!("checkpoint round trip {}", if ckpt_ok { "bit-exact" } else { "differs" }));

    let pair = (model, vocab);
    for name in ["e1.csv", "e2.csv"] {
        write_csv(&suite(&pair, SuiteId::LengthHard, Task::Hop2, &[0, 500], 20, true), &p(name)).unwrap();
    }
    let eval_ok = bytes("e1.csv") == bytes("e2.csv");
    parts.push(format!("eval {}", if eval_ok { "identical" } else { "differs" }));
    report(10, true, gen_ok && train_ok && ckpt_ok && eval_ok, "determinism", parts.join(", "), t)
}

#[test]
fn acceptance() {
    let mut out = vec![criterion_1(), criterion_2(), criterion_3(), criterion_4()];
    out.extend(criteria_5_8_9());
    out.push(criterion_6());
    out.push(criterion_7());
    out.push(criterion_10());
    out.sort_by_key(|o| o.id);

    say("\nacceptance summary");
    for o in &out {
        say(&o.line);
    }
    let strict = std::env::var("MEMREASONER_STRICT").is_ok_and(|v| v == "1");
    let failed: Vec<u8> = out.iter().filter(|o| !o.pass && (o.hard || strict)).map(|o| o.id).collect();
    assert!(failed.is_empty(), "failed criteria: {failed:?}");
}
