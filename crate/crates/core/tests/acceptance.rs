//! End-to-end acceptance run: one PASS/FAIL line per criterion.
//!
//! Criteria 2, 4, 5, 6 and 8 need the MNIST IDX files (see `common::mnist_dir`).
//! The desk-scale training in criterion 4 dominates the runtime (about half
//! an hour on one core).

mod common;

use std::time::{Duration, Instant};

use common::{blobs, mnist, mnist_dir, rng, RandomNet};
use otlab::attacks::{fgsm, pgd_linf, AttackConfig};
use otlab::checkpoint::{decode, encode, load_checkpoint, save_checkpoint};
use otlab::data::gen_blobs;
use otlab::eval::evaluate_curve;
use otlab::idim::{gen_manifold, mle_idim, random_rotation, Averaging, IdimConfig, ManifoldKind, PointCloud};
use otlab::nets::Architecture;
use otlab::training::{ecla_train, train, train_with, Regime, TrainConfig, TrainState};
use otlab::{Classifier, Dataset, Pipeline, Split, Tensor};

const SEED: u64 = 1;
const EPOCHS: usize = 30;
const LATENT: usize = 4;
const EVAL_N: usize = 1000;
/// Inner PGD iterations during adversarial training (evaluation uses 40).
const TRAIN_PGD_STEPS: usize = 10;

struct Outcome {
    id: u32,
    name: &'static str,
    pass: bool,
    detail: String,
}

fn report(id: u32, name: &'static str, pass: bool, detail: String) -> Outcome {
    println!("criterion {id} [{name}]: {} - {detail}", if pass { "PASS" } else { "FAIL" });
    Outcome { id, name, pass, detail }
}

fn secs(d: Duration) -> f64 {
    d.as_secs_f64()
}

fn criterion1() -> Outcome {
    let start = Instant::now();
    let mut r = rng(2024);
    let mut worst = 0.0f64;
    let mut largest = 0;
    for _ in 0..50 {
        let net = RandomNet::draw(&mut r, 200);
        largest = largest.max(net.param_count());
        worst = worst.max(net.max_gradient_error(1e-4, 1e-6));
    }
    let t = start.elapsed();
    report(
        1,
        "gradient oracle",
        worst < 1e-4 && largest <= 200 && t < Duration::from_secs(60),
        format!("max relative error {worst:.2e} over 50 networks (<= {largest} values), {:.1}s", secs(t)),
    )
}

fn criterion2(model: &Pipeline, test: &Dataset) -> Outcome {
    let start = Instant::now();
    let sub = match test.take_first(500) {
        Ok(s) => s,
        Err(e) => return report(2, "attack invariants", false, e.to_string()),
    };
    let (x, y) = (sub.images(), sub.labels());
    let mut violations = 0usize;
    let mut fgsm_mismatch = 0usize;
    let mut worst = 0.0f64;
    let mut check = |x_adv: &Tensor, eps: f64| {
        for (a, o) in x_adv.data().iter().zip(x.data()) {
            let d = (a - o).abs();
            worst = worst.max(d - eps);
            if d > eps + 1e-6 || !(0.0..=1.0).contains(a) {
                violations += 1;
            }
        }
    };
    for eps in [0.1, 0.2, 0.3] {
        let f = fgsm(model, x, y, eps).unwrap();
        let p = AttackConfig::pgd(eps).run(model, x, y).unwrap();
        let pr = AttackConfig::pgd_training(eps, SEED).run(model, x, y).unwrap();
        let one = AttackConfig {
            steps: 1,
            step_size: eps,
            ..AttackConfig::pgd(eps)
        };
        let p1 = pgd_linf(model, x, y, &one).unwrap();
        check(&f.x_adv, eps);
        check(&p.x_adv, eps);
        check(&pr.x_adv, eps);
        fgsm_mismatch += f
            .x_adv
            .data()
            .iter()
            .zip(p1.x_adv.data())
            .filter(|(a, b)| a.to_bits() != b.to_bits())
            .count();
    }
    let t = start.elapsed();
    report(
        2,
        "attack invariants",
        violations == 0 && fgsm_mismatch == 0 && t < Duration::from_secs(300),
        format!(
            "{violations} ball/range violations (max excess {worst:.1e}), {fgsm_mismatch} FGSM vs 1-step PGD bit differences, {:.1}s",
            secs(t)
        ),
    )
}

fn criterion3() -> Outcome {
    let start = Instant::now();
    let ds = gen_blobs(3, 100, 20, 8.0, 5).unwrap();
    let mut cfg = TrainConfig::new(Regime::Otc, SEED);
    cfg.epochs = 1;
    cfg.batch_size = 30;
    cfg.latent_dim = 3;

    let mut state = TrainState::init(&cfg, ds.dim(), ds.num_classes()).unwrap();
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut clip_ok = true;
    let mut steps = 0;
    for chunk in idx.chunks_exact(cfg.batch_size) {
        let (x, y) = ds.batch(chunk).unwrap();
        state.otc_step(&x, &y, cfg.lambda, cfg.clip).unwrap();
        steps += 1;
        clip_ok &= state.pipeline.critic().params().iter().all(|w| w.max_abs() <= cfg.clip);
    }

    let mut tiny = cfg.clone();
    tiny.lambda = f64::from_bits(1);
    let mut ecla = tiny.clone();
    ecla.regime = Regime::Ecla;
    let (p_otc, _) = train(&tiny, &ds).unwrap();
    let p_ecla = ecla_train(&ecla, &ds).unwrap();
    let bitwise = p_otc.encoder() == p_ecla.encoder() && p_otc.classifier() == p_ecla.classifier();
    report(
        3,
        "update mechanics",
        clip_ok && bitwise && steps == 10,
        format!(
            "clip bound held after all {steps} steps: {clip_ok}; lambda = 5e-324 trajectory equals encoder+classifier-only training bitwise: {bitwise}; {:.1}s",
            secs(start.elapsed())
        ),
    )
}

fn criterion5(train_set: Option<&Dataset>) -> Outcome {
    let start = Instant::now();
    let cfg = IdimConfig::default();
    let seg = mle_idim(&gen_manifold(ManifoldKind::Segment, 1, 10, 1000, SEED).unwrap(), &cfg).unwrap();
    let disk_cloud = gen_manifold(ManifoldKind::Disk, 2, 5, 1000, SEED).unwrap();
    let disk = mle_idim(&disk_cloud, &cfg).unwrap();
    let scaled = mle_idim(&disk_cloud.scaled(37.5), &cfg).unwrap();
    let rot = random_rotation(5, &mut rng(SEED)).unwrap();
    let rotated = mle_idim(&disk_cloud.transformed(&rot).unwrap(), &cfg).unwrap();
    let invariance = (scaled - disk).abs().max((rotated - disk).abs());

    let (mnist_est, simple) = match train_set {
        Some(ds) => {
            let cloud = PointCloud::new(ds.images().clone()).unwrap();
            let est = mle_idim(&cloud, &cfg).unwrap();
            let simple = mle_idim(&cloud, &IdimConfig { averaging: Averaging::Simple, ..cfg }).unwrap();
            (Some(est), simple)
        }
        None => (None, f64::NAN),
    };
    let t = start.elapsed();
    let pass = (0.9..=1.2).contains(&seg)
        && (1.8..=2.3).contains(&disk)
        && invariance < 1e-9
        && mnist_est.is_some_and(|m| (11.0..=15.0).contains(&m))
        && t < Duration::from_secs(120);
    report(
        5,
        "intrinsic dimension",
        pass,
        format!(
            "segment {seg:.3}, disk {disk:.3}, scale/rotation drift {invariance:.1e}, MNIST (1000 random training images) {} [simple averaging {simple:.2}], {:.1}s",
            mnist_est.map_or("unavailable".to_string(), |m| format!("{m:.3}")),
            secs(t)
        ),
    )
}

fn criterion6(model: &Pipeline, test: &Dataset) -> Outcome {
    let start = Instant::now();
    let sub = test.take_first(200).unwrap();
    let cw = AttackConfig::cw().run(model, sub.images(), sub.labels()).unwrap();
    let pgd = AttackConfig::pgd(0.3).run(model, sub.images(), sub.labels()).unwrap();
    let succeeded: Vec<usize> = (0..sub.len()).filter(|&i| cw.success[i]).collect();
    let mean = |v: &[f64], idx: &[usize]| idx.iter().map(|&i| v[i]).sum::<f64>() / idx.len().max(1) as f64;
    let cw_l2 = mean(&cw.l2, &succeeded);
    let pgd_l2 = mean(&pgd.l2, &succeeded);
    let all: Vec<usize> = (0..sub.len()).collect();
    let pgd_all = mean(&pgd.l2, &all);
    let rate = 100.0 * cw.success_rate();
    let t = start.elapsed();
    report(
        6,
        "C&W sanity",
        rate >= 90.0 && cw_l2 < pgd_l2 && cw_l2 < pgd_all && t < Duration::from_secs(900),
        format!(
            "success {rate:.1}%, mean RMS l2 {cw_l2:.4} (C&W, successful examples) vs {pgd_l2:.4} (PGD 0.3, same examples; {pgd_all:.4} over all), {:.1}s",
            secs(t)
        ),
    )
}

fn without_time(csv: &str) -> Vec<String> {
    csv.lines()
        .map(|l| l.rsplit_once(',').map_or(l, |(head, _)| head).to_string())
        .collect()
}

fn criterion7() -> Outcome {
    let start = Instant::now();
    let ds = blobs();
    let mut cfg = TrainConfig::new(Regime::OtcAdv, SEED);
    cfg.epochs = 3;
    cfg.batch_size = 20;
    cfg.latent_dim = 3;
    cfg.eps_warmup_epochs = 2;
    cfg.attack.steps = 5;
    let run = || {
        let (p, log) = train(&cfg, &ds).unwrap();
        let curve = evaluate_curve(&p, &ds, &AttackConfig::pgd_training(0.3, SEED), &[0.0, 0.1, 0.2, 0.3], 200, "fixture")
            .unwrap()
            .to_csv();
        (p, log.to_csv(), curve)
    };
    let (p1, log1, curve1) = run();
    let (p2, log2, curve2) = run();
    let same_runs = p1 == p2 && without_time(&log1) == without_time(&log2) && curve1 == curve2;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("fixture.ckpt");
    save_checkpoint(&path, &p1, Some(&cfg), SEED).unwrap();
    let back = load_checkpoint(&path).unwrap();
    let round_trip = back.pipeline == p1
        && back.pipeline.logits(ds.images()).unwrap() == p1.logits(ds.images()).unwrap()
        && back.train_config().unwrap() == cfg;

    let good = encode(&p1, Some(&cfg), SEED);
    let header_end = good.windows(11).position(|w| w == b"end-header\n").unwrap() + 11;
    let header = String::from_utf8(good[..header_end].to_vec()).unwrap();
    let with_payload = |h: String| {
        let mut b = h.into_bytes();
        b.extend_from_slice(&good[header_end..]);
        b
    };
    let corrupt = [
        ("truncated", good[..good.len() - 3].to_vec()),
        ("wrong k", with_payload(header.replace("latent_dim = 3", "latent_dim = 2"))),
        ("version", with_payload(header.replacen(" 1\n", " 7\n", 1))),
    ];
    let mut rejected = 0;
    for (_, bytes) in &corrupt {
        if let Err(e) = decode(bytes, "corrupt".as_ref()) {
            if e.exit_code() == 2 {
                rejected += 1;
            }
        }
    }
    report(
        7,
        "determinism and persistence",
        same_runs && round_trip && rejected == corrupt.len(),
        format!(
            "repeat runs identical: {same_runs}; checkpoint round trip bitwise: {round_trip}; corrupted checkpoints rejected with exit code 2: {rejected}/{}; {:.1}s",
            corrupt.len(),
            secs(start.elapsed())
        ),
    )
}

fn criterion8(test: &Dataset) -> Outcome {
    let p = Pipeline::init(&Architecture::desk(test.dim(), LATENT, 10), SEED).unwrap();
    let sub = test.take_first(EVAL_N).unwrap();
    let acc = sub.accuracy(&p).unwrap();
    // binomial standard deviation of a 10% hit rate over EVAL_N draws
    let sd = 100.0 * (0.1f64 * 0.9 / EVAL_N as f64).sqrt();
    report(
        8,
        "chance baseline",
        (acc - 10.0).abs() <= 3.0,
        format!("untrained accuracy {acc:.1}% on {EVAL_N} test images ({:+.2} binomial sd from 10%)", (acc - 10.0) / sd),
    )
}

fn config_for(regime: Regime) -> TrainConfig {
    let mut cfg = TrainConfig::new(regime, SEED);
    cfg.epochs = EPOCHS;
    cfg.latent_dim = LATENT;
    cfg.attack.steps = TRAIN_PGD_STEPS;
    cfg.attack.step_size = 2.5 * cfg.attack.epsilon / TRAIN_PGD_STEPS as f64;
    cfg
}

struct Row {
    regime: Regime,
    clean: f64,
    at02: f64,
    at03: f64,
    train_s: f64,
}

fn criterion4(rows: &[Row], elapsed: Duration) -> Outcome {
    let get = |r: Regime| rows.iter().find(|row| row.regime == r).unwrap();
    let (plain, adv, otc_adv) = (get(Regime::Plain), get(Regime::Adv), get(Regime::OtcAdv));
    let a = plain.at03 < 10.0;
    let b = otc_adv.at02 >= plain.at02 + 30.0 && otc_adv.at02 >= adv.at02;
    let c = rows.iter().all(|r| r.clean >= 95.0);
    let table: Vec<String> = rows
        .iter()
        .map(|r| format!("{} clean {:.1} / 0.2: {:.1} / 0.3: {:.1} ({:.0}s)", r.regime, r.clean, r.at02, r.at03, r.train_s))
        .collect();
    report(
        4,
        "desk-scale robustness trend",
        a && b && c && elapsed < Duration::from_secs(3600),
        format!(
            "(a) {a} (b) {b} (c) {c}; {}; total {:.0}s",
            table.join("; "),
            secs(elapsed)
        ),
    )
}

fn mnist_outcomes(outcomes: &mut Vec<Outcome>) {
    let (train_set, test) = match (mnist(Split::Train), mnist(Split::Test)) {
        (Ok(a), Ok(b)) => (a, b),
        (Err(e), _) | (_, Err(e)) => {
            let msg = format!("MNIST not readable under {}: {e}", mnist_dir().display());
            outcomes.push(criterion5(None));
            for (id, name) in [
                (2, "attack invariants"),
                (4, "desk-scale robustness trend"),
                (6, "C&W sanity"),
                (8, "chance baseline"),
            ] {
                outcomes.push(report(id, name, false, msg.clone()));
            }
            return;
        }
    };
    let sizes_ok = train_set.len() == 60_000 && test.len() == 10_000 && train_set.dim() == 784;
    if !sizes_ok {
        println!("warning: unexpected MNIST sizes {} / {}", train_set.len(), test.len());
    }
    outcomes.push(criterion5(Some(&train_set)));
    outcomes.push(criterion8(&test));

    let start = Instant::now();
    let mut rows = Vec::new();
    let mut plain_model = None;
    for regime in Regime::ALL {
        let cfg = config_for(regime);
        let t = Instant::now();
        let (p, log) = train_with(&cfg, &train_set, |r| {
            println!("  {regime} epoch {:>2}: train acc {:.2}%, ce {:.4}", r.epoch, r.clean_acc, r.ce_loss);
        })
        .unwrap();
        let train_s = secs(t.elapsed());
        let curve = evaluate_curve(&p, &test, &AttackConfig::pgd(0.3), &[0.0, 0.2, 0.3], EVAL_N, regime.name()).unwrap();
        println!(
            "  {regime}: final train acc {:.2}%, test clean {:.1}%, PGD 0.2 {:.1}%, PGD 0.3 {:.1}%",
            log.last().map_or(f64::NAN, |r| r.clean_acc),
            curve.accuracies[0],
            curve.accuracies[1],
            curve.accuracies[2]
        );
        rows.push(Row {
            regime,
            clean: curve.accuracies[0],
            at02: curve.accuracies[1],
            at03: curve.accuracies[2],
            train_s,
        });
        if regime == Regime::Plain {
            plain_model = Some(p);
        }
    }
    let elapsed = start.elapsed();
    let plain_model = plain_model.unwrap();
    outcomes.push(criterion2(&plain_model, &test));
    outcomes.push(criterion4(&rows, elapsed));
    outcomes.push(criterion6(&plain_model, &test));
}

fn main() {
    let mut outcomes = vec![criterion1(), criterion3(), criterion7()];
    mnist_outcomes(&mut outcomes);
    outcomes.sort_by_key(|o| o.id);

    println!("\nacceptance summary");
    for o in &outcomes {
        println!("  {} criterion {} {}: {}", if o.pass { "PASS" } else { "FAIL" }, o.id, o.name, o.detail);
    }
    let failed = outcomes.iter().filter(|o| !o.pass).count();
    println!("{} of {} criteria passed", outcomes.len() - failed, outcomes.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
