//! Quick invariant checks on synthetic fixtures, for installations without
//! the test suite.

use std::path::Path;

use crate::attacks::{fgsm, loss_input_gradient, pgd_linf, AttackConfig};
use crate::checkpoint::{decode, encode};
use crate::data::gen_blobs;
use crate::error::Result;
use crate::eval::evaluate_curve;
use crate::idim::{gen_manifold, mle_idim, IdimConfig, ManifoldKind};
use crate::nets::Classifier;
use crate::tape::Tape;
use crate::training::{ecla_train, train, Regime, TrainConfig, TrainState};

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, passed: bool, detail: String) -> Check {
    Check { name, passed, detail }
}

pub fn run() -> Result<Vec<Check>> {
    let ds = gen_blobs(3, 40, 12, 10.0, 1)?;
    let mut cfg = TrainConfig::new(Regime::Otc, 1);
    cfg.epochs = 3;
    cfg.batch_size = 20;
    cfg.latent_dim = 2;
    let (model, _) = train(&cfg, &ds)?;
    let mut checks = Vec::new();

    // Input gradient of the summed loss against central differences.
    let x = ds.images().slice_rows(0, 2)?;
    let y = &ds.labels()[..2];
    let g = loss_input_gradient(&model, &x, y)?;
    let loss = |x: &crate::Tensor| -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let logits = model.record_logits(&mut tape, input)?;
        let l = tape.softmax_cross_entropy(logits, y)?;
        Ok(tape.value(l).data()[0] * y.len() as f64)
    };
    let h = 1e-5;
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        let mut up = x.clone();
        up.data_mut()[i] += h;
        let mut down = x.clone();
        down.data_mut()[i] -= h;
        let fd = (loss(&up)? - loss(&down)?) / (2.0 * h);
        let a = g.data()[i];
        worst = worst.max((a - fd).abs() / a.abs().max(fd.abs()).max(1e-6));
    }
    checks.push(check("input gradient", worst < 1e-4, format!("max relative error {worst:.1e}")));

    let mut ball_ok = true;
    let mut reduction_ok = true;
    for eps in [0.1, 0.3] {
        let r = AttackConfig::pgd_training(eps, 2).run(&model, ds.images(), ds.labels())?;
        ball_ok &= r
            .x_adv
            .data()
            .iter()
            .zip(ds.images().data())
            .all(|(a, o)| (a - o).abs() <= eps + 1e-6 && (0.0..=1.0).contains(a));
        let one = AttackConfig {
            steps: 1,
            step_size: eps,
            ..AttackConfig::pgd(eps)
        };
        reduction_ok &= fgsm(&model, ds.images(), ds.labels(), eps)?.x_adv
            == pgd_linf(&model, ds.images(), ds.labels(), &one)?.x_adv;
    }
    checks.push(check("attack ball", ball_ok, "PGD outputs within the ball and [0, 1]".into()));
    checks.push(check("fgsm reduction", reduction_ok, "FGSM equals one PGD step bitwise".into()));

    let mut state = TrainState::init(&cfg, ds.dim(), ds.num_classes())?;
    let idx: Vec<usize> = (0..ds.len()).collect();
    let mut clip_ok = true;
    for chunk in idx.chunks_exact(cfg.batch_size) {
        let (xb, yb) = ds.batch(chunk)?;
        state.otc_step(&xb, &yb, cfg.lambda, cfg.clip)?;
        clip_ok &= state.pipeline.critic().params().iter().all(|w| w.max_abs() <= cfg.clip);
    }
    checks.push(check("critic clip", clip_ok, format!("|w| <= {} after every step", cfg.clip)));

    let mut tiny = cfg.clone();
    tiny.lambda = f64::from_bits(1);
    let (otc, _) = train(&tiny, &ds)?;
    let ecla = ecla_train(&TrainConfig { regime: Regime::Ecla, ..tiny }, &ds)?;
    checks.push(check(
        "vanishing lambda",
        otc.encoder() == ecla.encoder() && otc.classifier() == ecla.classifier(),
        "smallest positive lambda matches encoder+classifier-only training bitwise".into(),
    ));

    let restored = decode(&encode(&model, Some(&cfg), cfg.seed), Path::new("selftest"))?;
    checks.push(check(
        "checkpoint round trip",
        restored.pipeline == model && restored.pipeline.logits(ds.images())? == model.logits(ds.images())?,
        "parameters and logits bitwise".into(),
    ));

    let curve = evaluate_curve(&model, &ds, &AttackConfig::pgd(0.3), &[0.0, 0.1], ds.len(), "selftest")?;
    let clean = ds.accuracy(&model)?;
    checks.push(check(
        "curve at zero",
        curve.accuracies[0] == clean,
        format!("{} vs clean {clean}", curve.accuracies[0]),
    ));

    let idim_cfg = IdimConfig::default();
    let seg = mle_idim(&gen_manifold(ManifoldKind::Segment, 1, 10, 1000, 1)?, &idim_cfg)?;
    let disk = mle_idim(&gen_manifold(ManifoldKind::Disk, 2, 5, 1000, 1)?, &idim_cfg)?;
    checks.push(check(
        "intrinsic dimension",
        (0.9..=1.2).contains(&seg) && (1.8..=2.3).contains(&disk),
        format!("segment {seg:.3}, disk {disk:.3}"),
    ));
    Ok(checks)
}
