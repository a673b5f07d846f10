//! White-box evasion attacks and distortion metrics.
//!
//! All attacks work in the normalized `[0, 1]` pixel space, take their input
//! gradients from the tape, and never modify the clean batch they are given.
//! `fgsm` and `pgd_linf` ascend the training cross-entropy of the true label;
//! `cw_l2` minimizes squared distance plus a hinge on the logit margin.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nets::Classifier;
use crate::optim::{AdamConfig, AdamState, Direction};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AttackFamily {
    Fgsm,
    PgdLinf,
    CwL2,
}

impl AttackFamily {
    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::PgdLinf => "pgd_linf",
            AttackFamily::CwL2 => "cw_l2",
        }
    }
}

impl std::str::FromStr for AttackFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fgsm" => Ok(AttackFamily::Fgsm),
            "pgd" | "pgd_linf" => Ok(AttackFamily::PgdLinf),
            "cw" | "cw_l2" => Ok(AttackFamily::CwL2),
            other => Err(Error::usage(format!("unknown attack family `{other}`"))),
        }
    }
}

/// Carlini-Wagner settings.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CwConfig {
    /// Required logit margin `kappa`.
    pub confidence: f64,
    /// Penalty weight for the first binary-search round.
    pub initial_penalty: f64,
    /// Adam iterations per round.
    pub steps: usize,
    pub lr: f64,
    pub search_rounds: usize,
}

impl Default for CwConfig {
    fn default() -> Self {
        Self {
            confidence: 0.0,
            initial_penalty: 1e-2,
            steps: 200,
            lr: 1e-2,
            search_rounds: 5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttackConfig {
    pub family: AttackFamily,
    /// `l_inf` radius; ignored by C&W.
    pub epsilon: f64,
    /// PGD step size `alpha`.
    pub step_size: f64,
    pub steps: usize,
    pub random_start: bool,
    /// Seeds the random start; row `i` draws from stream `i`.
    pub seed: u64,
    pub cw: CwConfig,
}

impl AttackConfig {
    pub fn fgsm(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::Fgsm,
            epsilon,
            step_size: epsilon,
            steps: 1,
            random_start: false,
            seed: 0,
            cw: CwConfig::default(),
        }
    }

    /// Evaluation PGD: `alpha = eps / 4`, 40 steps, no random start.
    pub fn pgd(epsilon: f64) -> Self {
        Self {
            family: AttackFamily::PgdLinf,
            epsilon,
            step_size: epsilon / 4.0,
            steps: 40,
            random_start: false,
            seed: 0,
            cw: CwConfig::default(),
        }
    }

    /// PGD for the inner maximization of adversarial training.
    pub fn pgd_training(epsilon: f64, seed: u64) -> Self {
        Self {
            random_start: true,
            seed,
            ..Self::pgd(epsilon)
        }
    }

    pub fn cw() -> Self {
        Self {
            family: AttackFamily::CwL2,
            epsilon: 0.0,
            step_size: 0.0,
            steps: 1,
            random_start: false,
            seed: 0,
            cw: CwConfig::default(),
        }
    }

    /// Same attack at another radius; PGD keeps its `alpha / eps` ratio.
    pub fn with_epsilon(&self, epsilon: f64) -> Self {
        let step_size = match self.family {
            AttackFamily::Fgsm => epsilon,
            _ if self.epsilon > 0.0 => self.step_size * epsilon / self.epsilon,
            _ => epsilon / 4.0,
        };
        Self {
            epsilon,
            step_size,
            ..*self
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon >= 0.0) || !self.epsilon.is_finite() {
            return Err(Error::usage(format!("epsilon must be >= 0, got {}", self.epsilon)));
        }
        if self.steps == 0 {
            return Err(Error::usage("attack needs at least one step"));
        }
        if self.family == AttackFamily::PgdLinf && self.epsilon > 0.0 && !(self.step_size > 0.0) {
            return Err(Error::usage(format!(
                "PGD step size must be > 0, got {}",
                self.step_size
            )));
        }
        if self.family == AttackFamily::CwL2 {
            let cw = &self.cw;
            if !(cw.initial_penalty > 0.0) || !(cw.lr > 0.0) || cw.steps == 0 || cw.search_rounds == 0
            {
                return Err(Error::usage(format!("invalid C&W settings {cw:?}")));
            }
            if !(cw.confidence >= 0.0) {
                return Err(Error::usage("C&W confidence must be >= 0"));
            }
        }
        Ok(())
    }

    /// Runs the configured attack.
    pub fn run<M: Classifier + ?Sized>(&self, model: &M, x: &Tensor, y: &[usize]) -> Result<AttackResult> {
        self.run_from(model, x, y, 0)
    }

    /// As [`AttackConfig::run`] with row `i` treated as example
    /// `first_index + i` for random-start seeding, so results do not depend on
    /// how a data set is split into batches.
    pub fn run_from<M: Classifier + ?Sized>(
        &self,
        model: &M,
        x: &Tensor,
        y: &[usize],
        first_index: u64,
    ) -> Result<AttackResult> {
        match self.family {
            AttackFamily::Fgsm => fgsm(model, x, y, self.epsilon),
            AttackFamily::PgdLinf => pgd_linf_from(model, x, y, self, first_index),
            AttackFamily::CwL2 => cw_l2(model, x, y, self),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackResult {
    pub x_adv: Tensor,
    /// Prediction on `x_adv` differs from the true label.
    pub success: Vec<bool>,
    pub linf: Vec<f64>,
    pub l2: Vec<f64>,
}

impl AttackResult {
    fn measure<M: Classifier + ?Sized>(model: &M, x_adv: Tensor, x_o: &Tensor, y: &[usize]) -> Result<Self> {
        let pred = model.predict(&x_adv)?;
        let success = pred.iter().zip(y).map(|(p, t)| p != t).collect();
        let (linf, l2) = per_row_distortions(&x_adv, x_o)?;
        Ok(Self {
            x_adv,
            success,
            linf,
            l2,
        })
    }

    pub fn success_rate(&self) -> f64 {
        self.success.iter().filter(|&&s| s).count() as f64 / self.success.len() as f64
    }

    /// Percentage of examples the attack failed to flip.
    pub fn robust_accuracy(&self) -> f64 {
        100.0 * (1.0 - self.success_rate())
    }
}

fn check_batch<M: Classifier + ?Sized>(model: &M, x: &Tensor, y: &[usize]) -> Result<()> {
    if !x.is_matrix() || x.cols() != model.input_dim() {
        return Err(Error::dim(format!(
            "model expects [n x {}] input, got {:?}",
            model.input_dim(),
            x.shape()
        )));
    }
    if y.len() != x.rows() {
        return Err(Error::dim(format!("{} labels for {} rows", y.len(), x.rows())));
    }
    Ok(())
}

/// Gradient of the summed cross-entropy with respect to the input batch.
/// Summing rather than averaging keeps per-row gradients independent of the
/// batch size.
pub fn loss_input_gradient<M: Classifier + ?Sized>(model: &M, x: &Tensor, y: &[usize]) -> Result<Tensor> {
    let mut tape = Tape::new();
    let input = tape.variable(x.clone());
    let logits = model.record_logits(&mut tape, input)?;
    let mean = tape.softmax_cross_entropy(logits, y)?;
    let total = tape.scale(mean, y.len() as f64)?;
    let mut grads = tape.backward(total)?;
    Ok(grads.take(input).expect("input is a variable"))
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Fast gradient sign: `clamp01(x + eps * sign(grad))`.
pub fn fgsm<M: Classifier + ?Sized>(model: &M, x_o: &Tensor, y_o: &[usize], epsilon: f64) -> Result<AttackResult> {
    AttackConfig::fgsm(epsilon).validate()?;
    check_batch(model, x_o, y_o)?;
    let x_adv = if epsilon == 0.0 {
        x_o.clone()
    } else {
        let g = loss_input_gradient(model, x_o, y_o)?;
        x_o.zip_map(&g, |x, g| (x + epsilon * sign(g)).clamp(0.0, 1.0))?
    };
    AttackResult::measure(model, x_adv, x_o, y_o)
}

/// Projected gradient ascent in the `l_inf` ball, clamped to `[0, 1]`.
pub fn pgd_linf<M: Classifier + ?Sized>(model: &M, x_o: &Tensor, y_o: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    pgd_linf_from(model, x_o, y_o, cfg, 0)
}

pub fn pgd_linf_from<M: Classifier + ?Sized>(
    model: &M,
    x_o: &Tensor,
    y_o: &[usize],
    cfg: &AttackConfig,
    first_index: u64,
) -> Result<AttackResult> {
    let cfg = AttackConfig {
        family: AttackFamily::PgdLinf,
        ..*cfg
    };
    cfg.validate()?;
    check_batch(model, x_o, y_o)?;
    let eps = cfg.epsilon;
    let project = |x: f64, o: f64| x.clamp(o - eps, o + eps).clamp(0.0, 1.0);

    let mut x = x_o.clone();
    if cfg.random_start && eps > 0.0 {
        let width = x_o.cols();
        for (i, row) in x.data_mut().chunks_mut(width).enumerate() {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(first_index + i as u64);
            for v in row.iter_mut() {
                let o = *v;
                *v = project(o + rng.random_range(-eps..=eps), o);
            }
        }
    }
    if eps > 0.0 {
        for _ in 0..cfg.steps {
            let g = loss_input_gradient(model, &x, y_o)?;
            let alpha = cfg.step_size;
            for ((v, &g), &o) in x.data_mut().iter_mut().zip(g.data()).zip(x_o.data()) {
                *v = project(*v + alpha * sign(g), o);
            }
        }
    }
    AttackResult::measure(model, x, x_o, y_o)
}

/// Untargeted Carlini-Wagner `l2` attack with the tanh change of variables
/// and a per-example binary search over the penalty weight.
pub fn cw_l2<M: Classifier + ?Sized>(model: &M, x_o: &Tensor, y_o: &[usize], cfg: &AttackConfig) -> Result<AttackResult> {
    let cfg = AttackConfig {
        family: AttackFamily::CwL2,
        ..*cfg
    };
    cfg.validate()?;
    check_batch(model, x_o, y_o)?;
    let cw = cfg.cw;
    let (n, d) = (x_o.rows(), x_o.cols());

    const NUDGE: f64 = 1e-6;
    let w0 = x_o.map(|v| (2.0 * v.clamp(NUDGE, 1.0 - NUDGE) - 1.0).atanh());

    // Rows that are already misclassified need no perturbation.
    let clean_pred = model.predict(x_o)?;
    let mut best: Vec<Option<(f64, Vec<f64>)>> = clean_pred
        .iter()
        .zip(y_o)
        .enumerate()
        .map(|(i, (p, t))| (p != t).then(|| (0.0, x_o.row(i).to_vec())))
        .collect();
    let active: Vec<usize> = (0..n).filter(|&i| best[i].is_none()).collect();

    if !active.is_empty() {
        let xs = x_o.select_rows(&active)?;
        let ys: Vec<usize> = active.iter().map(|&i| y_o[i]).collect();
        let ws = w0.select_rows(&active)?;
        let m = active.len();
        let mut penalty = vec![cw.initial_penalty; m];
        let mut lower = vec![0.0; m];
        let mut upper = vec![f64::INFINITY; m];
        let adam_cfg = AdamConfig {
            lr: cw.lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };

        for _round in 0..cw.search_rounds {
            let mut w = vec![ws.clone()];
            let mut adam = AdamState::new(adam_cfg, &w);
            let mut round_success = vec![false; m];
            let weights = Tensor::matrix(m, 1, penalty.clone())?;
            for _ in 0..cw.steps {
                let mut tape = Tape::new();
                let wv = tape.variable(w[0].clone());
                let t = tape.tanh(wv)?;
                let half = tape.scale(t, 0.5)?;
                let offset = tape.constant(Tensor::scalar(0.5));
                let x_adv = tape.add(half, offset)?;
                let orig = tape.constant(xs.clone());
                let delta = tape.sub(x_adv, orig)?;
                let sq = tape.mul(delta, delta)?;
                let dist = tape.sum(sq)?;
                let logits = model.record_logits(&mut tape, x_adv)?;
                let hinge = tape.margin_loss(logits, &ys, cw.confidence)?;
                let c = tape.constant(weights.clone());
                let weighted = tape.mul(hinge, c)?;
                let penalty_term = tape.sum(weighted)?;
                let objective = tape.add(dist, penalty_term)?;

                let xa = tape.value(x_adv);
                let z = tape.value(logits);
                let preds = z.argmax_rows();
                for j in 0..m {
                    let hinge_met = tape.value(hinge).data()[j] == 0.0;
                    if hinge_met && preds[j] != ys[j] {
                        round_success[j] = true;
                        let row = xa.row(j);
                        let l2: f64 = row.iter().zip(xs.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                        let slot = &mut best[active[j]];
                        if slot.as_ref().is_none_or(|(b, _)| l2 < *b) {
                            *slot = Some((l2, row.to_vec()));
                        }
                    }
                }

                let mut grads = tape.backward(objective)?;
                let g = grads.take(wv).expect("w is a variable");
                adam.step(&mut w, &[g], Direction::Descend)?;
            }
            for j in 0..m {
                if round_success[j] {
                    upper[j] = upper[j].min(penalty[j]);
                    penalty[j] = 0.5 * (lower[j] + upper[j]);
                } else {
                    lower[j] = lower[j].max(penalty[j]);
                    penalty[j] = if upper[j].is_finite() {
                        0.5 * (lower[j] + upper[j])
                    } else {
                        penalty[j] * 10.0
                    };
                }
            }
        }
    }

    let mut data = Vec::with_capacity(n * d);
    for (i, slot) in best.iter().enumerate() {
        match slot {
            Some((_, row)) => data.extend_from_slice(row),
            None => data.extend_from_slice(x_o.row(i)),
        }
    }
    let x_adv = Tensor::matrix(n, d, data)?;
    AttackResult::measure(model, x_adv, x_o, y_o)
}

/// Largest absolute pixel difference.
pub fn linf_distortion(x_adv: &Tensor, x_o: &Tensor) -> Result<f64> {
    x_adv.expect_same_shape(x_o)?;
    Ok(x_adv
        .data()
        .iter()
        .zip(x_o.data())
        .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
}

/// Root-mean-square pixel difference, `sqrt(sum (a - b)^2 / d)`.
pub fn l2_distortion(x_adv: &Tensor, x_o: &Tensor) -> Result<f64> {
    x_adv.expect_same_shape(x_o)?;
    let ss: f64 = x_adv
        .data()
        .iter()
        .zip(x_o.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok((ss / x_o.len() as f64).sqrt())
}

/// Per-row `(l_inf, l2)` distortions of two batches.
pub fn per_row_distortions(x_adv: &Tensor, x_o: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    x_adv.expect_same_shape(x_o)?;
    let d = x_o.cols();
    Ok(x_adv
        .data()
        .chunks(d)
        .zip(x_o.data().chunks(d))
        .map(|(a, b)| {
            let mut linf = 0.0f64;
            let mut ss = 0.0;
            for (p, q) in a.iter().zip(b) {
                linf = linf.max((p - q).abs());
                ss += (p - q) * (p - q);
            }
            (linf, (ss / d as f64).sqrt())
        })
        .unzip())
}
