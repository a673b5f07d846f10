//! Training regimes.
//!
//! [`Regime::Otc`] runs the three-update min-max loop: a critic ascent on the
//! prior-versus-code score gap (followed by weight clipping), a joint
//! encoder+classifier cross-entropy descent, and an encoder ascent on the
//! critic score of its own codes. [`Regime::Ecla`] and [`Regime::Plain`] keep
//! only the cross-entropy update. The adversarial regimes first replace each
//! batch by PGD examples against the current model.

use std::fmt;
use std::io::Write;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attacks::{pgd_linf_from, AttackConfig, AttackFamily};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nets::{Architecture, Pipeline, PriorSampler};
use crate::optim::{clip_weights, AdamConfig, AdamState, Direction};
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Regime {
    /// Encoder, critic and classifier with latent regularization.
    Otc,
    /// Adversarial training of the plain architecture.
    Adv,
    /// `Otc` on PGD examples.
    OtcAdv,
    /// Encoder and classifier only.
    Ecla,
    /// Wide-latent classifier without regularization.
    Plain,
}

impl Regime {
    pub const ALL: [Regime; 5] = [
        Regime::Plain,
        Regime::Ecla,
        Regime::Otc,
        Regime::Adv,
        Regime::OtcAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Regime::Otc => "otc",
            Regime::Adv => "adv",
            Regime::OtcAdv => "otc_adv",
            Regime::Ecla => "ecla",
            Regime::Plain => "plain",
        }
    }

    pub fn regularized(self) -> bool {
        matches!(self, Regime::Otc | Regime::OtcAdv)
    }

    pub fn adversarial(self) -> bool {
        matches!(self, Regime::Adv | Regime::OtcAdv)
    }

    /// Plain and Adv use the wide latent layer instead of the bottleneck.
    pub fn uses_bottleneck(self) -> bool {
        !matches!(self, Regime::Plain | Regime::Adv)
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Regime::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::usage(format!("unknown regime `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub regime: Regime,
    /// Weight `lambda` of the latent regularizer.
    pub lambda: f64,
    /// Critic weight-clipping constant.
    pub clip: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Bottleneck width `k` for the regimes that use one.
    pub latent_dim: usize,
    /// Latent width of the plain architecture.
    pub plain_latent_dim: usize,
    /// Critic ascent.
    pub critic_adam: AdamConfig,
    /// Encoder+classifier descent.
    pub main_adam: AdamConfig,
    /// Encoder ascent on the critic score. Adam steps have roughly unit
    /// scale whatever the gradient size, so this rate (not `lambda`) sets how
    /// hard the ascent pulls on the encoder; the default is 10x below the
    /// descent rate.
    pub ascent_adam: AdamConfig,
    /// Inner maximization for the adversarial regimes.
    pub attack: AttackConfig,
    /// Epochs over which the inner-attack budget grows linearly from
    /// `attack.epsilon / warmup` to `attack.epsilon`. 0 trains at full budget
    /// from the first step.
    pub eps_warmup_epochs: usize,
    pub seed: u64,
}

impl TrainConfig {
    pub fn new(regime: Regime, seed: u64) -> Self {
        Self {
            regime,
            lambda: 1.0,
            clip: 0.01,
            epochs: 30,
            batch_size: 100,
            latent_dim: 4,
            plain_latent_dim: 64,
            critic_adam: AdamConfig::default(),
            main_adam: AdamConfig::default(),
            ascent_adam: AdamConfig {
                lr: 1e-4,
                ..AdamConfig::default()
            },
            attack: AttackConfig::pgd_training(0.3, seed),
            eps_warmup_epochs: 10,
            seed,
        }
    }

    /// The configuration in effect during `epoch` (1-based): identical to
    /// `self` except for the inner-attack budget during warmup.
    pub fn for_epoch(&self, epoch: usize) -> TrainConfig {
        let mut c = self.clone();
        if epoch <= self.eps_warmup_epochs {
            c.attack = self
                .attack
                .with_epsilon(self.attack.epsilon * epoch as f64 / self.eps_warmup_epochs as f64);
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        if self.regime.regularized() && !(self.lambda > 0.0) {
            return Err(Error::usage(format!("lambda must be > 0, got {}", self.lambda)));
        }
        if !(self.clip > 0.0) {
            return Err(Error::usage(format!("clip must be > 0, got {}", self.clip)));
        }
        if self.batch_size < 2 {
            return Err(Error::usage("batch size must be at least 2"));
        }
        if self.latent_dim == 0 || self.plain_latent_dim == 0 {
            return Err(Error::usage("latent widths must be positive"));
        }
        for adam in [&self.critic_adam, &self.main_adam, &self.ascent_adam] {
            adam.validate()?;
        }
        if self.regime.adversarial() {
            if self.attack.family != AttackFamily::PgdLinf {
                return Err(Error::usage("adversarial training needs a pgd_linf inner attack"));
            }
            self.attack.validate()?;
        }
        Ok(())
    }

    pub fn architecture(&self, input_dim: usize, num_classes: usize) -> Architecture {
        let k = if self.regime.uses_bottleneck() {
            self.latent_dim
        } else {
            self.plain_latent_dim
        };
        let mut arch = Architecture::desk(input_dim, k, num_classes);
        if !self.regime.uses_bottleneck() {
            arch.encoder_hidden = vec![256];
        }
        arch
    }
}

// Independent random streams derived from the master seed.
const STREAM_SHUFFLE: u64 = 11;
const STREAM_PRIOR: u64 = 12;

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

/// Objective values observed during one step.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StepMetrics {
    pub ce_loss: f64,
    /// `(lambda/n) * sum(D(z) - D(Q(x)))` before the critic update; zero for
    /// unregularized regimes.
    pub critic_objective: f64,
}

/// Mutable training state: parameters, optimizer moments and counters.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub pipeline: Pipeline,
    critic_opt: AdamState,
    main_opt: AdamState,
    ascent_opt: AdamState,
    prior: PriorSampler,
    attack_seed: u64,
    examples_seen: u64,
    step: u64,
}

impl TrainState {
    pub fn new(pipeline: Pipeline, config: &TrainConfig) -> Self {
        let main_params: Vec<Tensor> = pipeline
            .encoder()
            .params()
            .iter()
            .chain(pipeline.classifier().params())
            .cloned()
            .collect();
        Self {
            critic_opt: AdamState::new(config.critic_adam, pipeline.critic().params()),
            main_opt: AdamState::new(config.main_adam, &main_params),
            ascent_opt: AdamState::new(config.ascent_adam, pipeline.encoder().params()),
            prior: PriorSampler::from_rng(pipeline.prior(), stream(config.seed, STREAM_PRIOR)),
            attack_seed: config.attack.seed,
            examples_seen: 0,
            step: 0,
            pipeline,
        }
    }

    /// Initial pipeline for `config` on data of the given shape.
    pub fn init(config: &TrainConfig, input_dim: usize, num_classes: usize) -> Result<Self> {
        config.validate()?;
        let pipeline = Pipeline::init(&config.architecture(input_dim, num_classes), config.seed)?;
        Ok(Self::new(pipeline, config))
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    pub fn into_pipeline(self) -> Pipeline {
        self.pipeline
    }

    fn diverged(&self, e: Error, objective: &'static str) -> Error {
        match e {
            Error::NonFinite(_) => Error::Divergence {
                step: self.step,
                objective,
            },
            other => other,
        }
    }

    /// Critic ascent on `(lambda/n) * sum(D(z_i) - D(Q(x_i)))`, then clipping.
    fn critic_update(&mut self, x: &Tensor, lambda: f64, clip: f64) -> Result<f64> {
        let n = x.rows();
        let prior = self.prior.sample(n)?;
        let codes = self.pipeline.encode(x).map_err(|e| self.diverged(e, "encoder"))?;
        let k = prior.cols();
        let mut stacked = prior.into_data();
        stacked.extend_from_slice(codes.data());
        let stacked = Tensor::matrix(2 * n, k, stacked)?;
        let weight = lambda / n as f64;
        let signs: Vec<f64> = (0..2 * n).map(|i| if i < n { weight } else { -weight }).collect();

        let mut tape = Tape::new();
        let z = tape.constant(stacked);
        let rec = self.pipeline.critic().record(&mut tape, z, true)?;
        let w = tape.constant(Tensor::matrix(2 * n, 1, signs)?);
        let weighted = tape.mul(rec.output, w)?;
        let objective = tape.sum(weighted)?;
        let value = tape.value(objective).data()[0];
        let mut grads = tape.backward(objective)?;
        let g: Vec<Tensor> = rec.params.iter().map(|&p| grads.take(p).unwrap()).collect();
        let critic = self.pipeline.critic_mut().params_mut();
        self.critic_opt.step(critic, &g, Direction::Ascend)?;
        clip_weights(critic, clip)?;
        debug_assert!(critic.iter().all(|t| t.max_abs() <= clip));
        Ok(value)
    }

    /// Encoder+classifier descent on the mean cross-entropy.
    fn classifier_update(&mut self, x: &Tensor, y: &[usize]) -> Result<f64> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let enc = self.pipeline.encoder().record(&mut tape, input, true)?;
        let cls = self.pipeline.classifier().record(&mut tape, enc.output, true)?;
        let loss = tape.softmax_cross_entropy(cls.output, y)?;
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward(loss)?;
        let g: Vec<Tensor> = enc
            .params
            .iter()
            .chain(&cls.params)
            .map(|&p| grads.take(p).unwrap())
            .collect();
        let (encoder, classifier) = self.pipeline.encoder_classifier_mut();
        let params: Vec<&mut Tensor> = encoder
            .params_mut()
            .iter_mut()
            .chain(classifier.params_mut())
            .collect();
        self.main_opt.step_refs(params, &g, Direction::Descend)?;
        Ok(value)
    }

    /// Encoder ascent on `(lambda/n) * sum D(Q(x_i))`.
    fn encoder_update(&mut self, x: &Tensor, lambda: f64) -> Result<()> {
        let n = x.rows();
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let enc = self.pipeline.encoder().record(&mut tape, input, true)?;
        let score = self.pipeline.critic().record(&mut tape, enc.output, false)?;
        let total = tape.sum(score.output)?;
        let objective = tape.scale(total, lambda / n as f64)?;
        let mut grads = tape.backward(objective)?;
        let g: Vec<Tensor> = enc.params.iter().map(|&p| grads.take(p).unwrap()).collect();
        self.ascent_opt
            .step(self.pipeline.encoder_mut().params_mut(), &g, Direction::Ascend)
    }

    /// One full regularized step: critic, then encoder+classifier, then
    /// encoder ascent, each seeing the parameters left by the previous one.
    pub fn otc_step(&mut self, x: &Tensor, y: &[usize], lambda: f64, clip: f64) -> Result<StepMetrics> {
        self.step += 1;
        let critic_objective = self
            .critic_update(x, lambda, clip)
            .map_err(|e| self.diverged(e, "critic objective"))?;
        let ce_loss = self
            .classifier_update(x, y)
            .map_err(|e| self.diverged(e, "cross-entropy"))?;
        self.encoder_update(x, lambda)
            .map_err(|e| self.diverged(e, "encoder objective"))?;
        Ok(StepMetrics {
            ce_loss,
            critic_objective,
        })
    }

    /// Cross-entropy descent only; the critic is never touched.
    pub fn ce_step(&mut self, x: &Tensor, y: &[usize]) -> Result<StepMetrics> {
        self.step += 1;
        let ce_loss = self
            .classifier_update(x, y)
            .map_err(|e| self.diverged(e, "cross-entropy"))?;
        Ok(StepMetrics {
            ce_loss,
            critic_objective: 0.0,
        })
    }

    /// PGD examples against the current model for the inner maximization.
    /// Random starts are keyed by the running example count, so no two
    /// batches reuse a draw.
    pub fn adversarial_batch(&self, x: &Tensor, y: &[usize], attack: &AttackConfig) -> Result<Tensor> {
        if attack.family != AttackFamily::PgdLinf {
            return Err(Error::usage("adversarial training needs a pgd_linf inner attack"));
        }
        let cfg = AttackConfig {
            seed: self.attack_seed,
            ..*attack
        };
        Ok(pgd_linf_from(&self.pipeline, x, y, &cfg, self.examples_seen)?.x_adv)
    }

    /// Inner PGD maximization, then the regime's update on the adversarial
    /// batch.
    pub fn adv_step(&mut self, x: &Tensor, y: &[usize], config: &TrainConfig) -> Result<StepMetrics> {
        let x_adv = self
            .adversarial_batch(x, y, &config.attack)
            .map_err(|e| self.diverged(e, "inner attack"))?;
        match config.regime {
            Regime::OtcAdv => self.otc_step(&x_adv, y, config.lambda, config.clip),
            _ => self.ce_step(&x_adv, y),
        }
    }

    /// Dispatches one step according to the regime.
    pub fn step(&mut self, x: &Tensor, y: &[usize], config: &TrainConfig) -> Result<StepMetrics> {
        let metrics = match config.regime {
            Regime::Otc => self.otc_step(x, y, config.lambda, config.clip),
            Regime::Ecla | Regime::Plain => self.ce_step(x, y),
            Regime::Adv | Regime::OtcAdv => self.adv_step(x, y, config),
        }?;
        self.examples_seen += x.rows() as u64;
        Ok(metrics)
    }
}

/// Metrics recorded at the end of each epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Accuracy (%) on the training data after the epoch.
    pub clean_acc: f64,
    pub ce_loss: f64,
    pub critic_objective: f64,
    pub wall_time_s: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    pub const HEADER: &'static str = "epoch,clean_acc,ce_loss,d_obj,wall_time_s";

    /// CSV with one row per epoch. `wall_time_s` is the only column that
    /// varies between identical runs.
    pub fn write_csv(&self, mut out: impl Write) -> std::io::Result<()> {
        writeln!(out, "{}", Self::HEADER)?;
        for r in &self.epochs {
            writeln!(
                out,
                "{},{:.4},{:.8},{:.8},{:.3}",
                r.epoch, r.clean_acc, r.ce_loss, r.critic_objective, r.wall_time_s
            )?;
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut buf = Vec::new();
        self.write_csv(&mut buf).expect("writing to memory");
        String::from_utf8(buf).expect("ascii")
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

/// Trains `config.epochs` epochs of shuffled mini-batches. A trailing partial
/// batch is dropped so every step sees exactly `batch_size` examples.
pub fn train(config: &TrainConfig, dataset: &Dataset) -> Result<(Pipeline, TrainLog)> {
    train_with(config, dataset, |_| {})
}

/// As [`train`], calling `on_epoch` after every epoch.
pub fn train_with(
    config: &TrainConfig,
    dataset: &Dataset,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<(Pipeline, TrainLog)> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::input("empty training set"));
    }
    if dataset.len() < config.batch_size {
        return Err(Error::usage(format!(
            "batch size {} exceeds the {} training examples",
            config.batch_size,
            dataset.len()
        )));
    }
    let mut state = TrainState::init(config, dataset.dim(), dataset.num_classes())?;
    let mut shuffle = stream(config.seed, STREAM_SHUFFLE);
    let mut order: Vec<usize> = (0..dataset.len()).collect();
    let mut log = TrainLog::default();
    let start = Instant::now();

    for epoch in 1..=config.epochs {
        let epoch_config = config.for_epoch(epoch);
        let config = &epoch_config;
        order.shuffle(&mut shuffle);
        let (mut ce_sum, mut d_sum, mut batches) = (0.0, 0.0, 0usize);
        for chunk in order.chunks_exact(config.batch_size) {
            let (x, y) = dataset.batch(chunk)?;
            let m = state.step(&x, &y, config)?;
            ce_sum += m.ce_loss;
            d_sum += m.critic_objective;
            batches += 1;
        }
        let record = EpochRecord {
            epoch,
            clean_acc: dataset
                .accuracy(&state.pipeline)
                .map_err(|e| state.diverged(e, "clean accuracy"))?,
            ce_loss: ce_sum / batches as f64,
            critic_objective: d_sum / batches as f64,
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        if !(record.ce_loss.is_finite() && record.critic_objective.is_finite()) {
            return Err(Error::Divergence {
                step: state.steps(),
                objective: "epoch metrics",
            });
        }
        on_epoch(&record);
        log.epochs.push(record);
    }
    Ok((state.into_pipeline(), log))
}

/// Encoder+classifier training of the bottleneck architecture, no critic.
pub fn ecla_train(config: &TrainConfig, dataset: &Dataset) -> Result<Pipeline> {
    let config = TrainConfig {
        regime: Regime::Ecla,
        ..config.clone()
    };
    Ok(train(&config, dataset)?.0)
}
