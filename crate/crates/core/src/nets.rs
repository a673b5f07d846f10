//! The encoder, classifier and critic networks and the latent prior.
//!
//! All three networks are fully-connected MLPs. Inference only ever runs the
//! encoder followed by the classifier; the critic exists for training.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Activation {
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    fn apply(self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu(slope) => tape.leaky_relu(x, slope),
        }
    }
}

/// Layer widths from input to output plus one activation per hidden layer.
/// The output layer is always linear.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    widths: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(widths: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if widths.len() < 3 {
            return Err(Error::usage(format!(
                "an MLP needs at least one hidden layer, got widths {widths:?}"
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::usage(format!("zero width in {widths:?}")));
        }
        if activations.len() != widths.len() - 2 {
            return Err(Error::usage(format!(
                "{} hidden layers but {} activations",
                widths.len() - 2,
                activations.len()
            )));
        }
        Ok(Self {
            widths,
            activations,
        })
    }

    /// Same activation on every hidden layer.
    pub fn uniform(widths: Vec<usize>, activation: Activation) -> Result<Self> {
        let hidden = widths.len().saturating_sub(2);
        Self::new(widths, vec![activation; hidden])
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn input_width(&self) -> usize {
        self.widths[0]
    }

    pub fn output_width(&self) -> usize {
        *self.widths.last().unwrap()
    }

    pub fn layers(&self) -> usize {
        self.widths.len() - 1
    }

    /// Shapes of the parameter tensors in storage order: `W0, b0, W1, b1, ...`.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.widths
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![1, w[1]]])
            .collect()
    }
}

/// Node ids of a network evaluated on a tape.
#[derive(Debug, Clone)]
pub struct Recorded {
    pub output: NodeId,
    pub params: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<Tensor>,
}

impl Mlp {
    /// Glorot-uniform weights, zero biases.
    pub fn init(spec: MlpSpec, rng: &mut impl Rng) -> Self {
        let params = spec
            .param_shapes()
            .into_iter()
            .map(|shape| {
                if shape[0] == 1 {
                    Tensor::zeros(&shape)
                } else {
                    let limit = (6.0 / (shape[0] + shape[1]) as f64).sqrt();
                    let data = (0..shape[0] * shape[1])
                        .map(|_| rng.random_range(-limit..=limit))
                        .collect();
                    Tensor::new(shape, data).expect("shape matches data")
                }
            })
            .collect();
        Self { spec, params }
    }

    pub fn from_params(spec: MlpSpec, params: Vec<Tensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if shapes.len() != params.len() {
            return Err(Error::dim(format!(
                "expected {} parameter tensors, got {}",
                shapes.len(),
                params.len()
            )));
        }
        for (shape, p) in shapes.iter().zip(&params) {
            if p.shape() != shape.as_slice() {
                return Err(Error::dim(format!(
                    "parameter shape {:?}, expected {shape:?}",
                    p.shape()
                )));
            }
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    /// Records the forward pass on `tape`. With `trainable`, parameters become
    /// variables so their gradients come out of the backward sweep.
    pub fn record(&self, tape: &mut Tape, x: NodeId, trainable: bool) -> Result<Recorded> {
        let input = tape.value(x);
        if !input.is_matrix() || input.cols() != self.spec.input_width() {
            return Err(Error::dim(format!(
                "network expects [n x {}] input, got {:?}",
                self.spec.input_width(),
                input.shape()
            )));
        }
        let n = input.rows();
        let ones = tape.constant(Tensor::full(&[n, 1], 1.0));
        let mut params = Vec::with_capacity(self.params.len());
        let mut h = x;
        for layer in 0..self.spec.layers() {
            let (w, b) = (&self.params[2 * layer], &self.params[2 * layer + 1]);
            let (w, b) = if trainable {
                (tape.variable(w.clone()), tape.variable(b.clone()))
            } else {
                (tape.constant(w.clone()), tape.constant(b.clone()))
            };
            params.extend([w, b]);
            let xw = tape.matmul(h, w)?;
            let bias = tape.matmul(ones, b)?;
            h = tape.add(xw, bias)?;
            if let Some(&act) = self.spec.activations.get(layer) {
                h = act.apply(tape, h)?;
            }
        }
        Ok(Recorded { output: h, params })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let out = self.record(&mut tape, input, false)?.output;
        Ok(tape.value(out).clone())
    }

    /// Upper bound on `|output|` for any input with `|x_i| <= input_bound`,
    /// from interval propagation through the current weights.
    pub fn output_bound(&self, input_bound: f64) -> f64 {
        let mut bound = input_bound;
        for layer in 0..self.spec.layers() {
            let (w, b) = (&self.params[2 * layer], &self.params[2 * layer + 1]);
            bound = w.rows() as f64 * w.max_abs() * bound + b.max_abs();
        }
        bound
    }
}

/// Standard Gaussian prior over the latent space.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PriorSpec {
    pub dim: usize,
}

/// Seeded sampler for a [`PriorSpec`].
#[derive(Debug, Clone)]
pub struct PriorSampler {
    spec: PriorSpec,
    rng: ChaCha8Rng,
}

impl PriorSampler {
    pub fn new(spec: PriorSpec, seed: u64) -> Self {
        Self::from_rng(spec, ChaCha8Rng::seed_from_u64(seed))
    }

    pub fn from_rng(spec: PriorSpec, rng: ChaCha8Rng) -> Self {
        Self { spec, rng }
    }

    /// `n` i.i.d. draws as an `[n, k]` matrix.
    pub fn sample(&mut self, n: usize) -> Result<Tensor> {
        if n == 0 {
            return Err(Error::usage("prior sample size must be positive"));
        }
        let data = (0..n * self.spec.dim)
            .map(|_| self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        Tensor::matrix(n, self.spec.dim, data)
    }
}

/// Anything that maps images to class logits and can be differentiated with
/// respect to its input.
pub trait Classifier {
    fn input_dim(&self) -> usize;

    fn num_classes(&self) -> usize;

    /// Records the logits for the batch at `x` with frozen parameters.
    fn record_logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId>;

    fn logits(&self, x: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let input = tape.constant(x.clone());
        let out = self.record_logits(&mut tape, input)?;
        Ok(tape.value(out).clone())
    }

    /// Arg-max class per row, ties toward the lowest index.
    fn predict(&self, x: &Tensor) -> Result<Vec<usize>> {
        Ok(self.logits(x)?.argmax_rows())
    }
}

/// Hidden-layer widths for the three networks.
#[derive(Debug, Clone, PartialEq)]
pub struct Architecture {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub num_classes: usize,
    pub encoder_hidden: Vec<usize>,
    pub classifier_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
    pub critic_slope: f64,
}

impl Architecture {
    /// Desk-scale defaults: encoder `d-256-64-k`, classifier `k-64-m`,
    /// critic `k-64-64-1` with leaky ReLU.
    pub fn desk(input_dim: usize, latent_dim: usize, num_classes: usize) -> Self {
        Self {
            input_dim,
            latent_dim,
            num_classes,
            encoder_hidden: vec![256, 64],
            classifier_hidden: vec![64],
            critic_hidden: vec![64, 64],
            critic_slope: 0.2,
        }
    }

    fn specs(&self) -> Result<(MlpSpec, MlpSpec, MlpSpec)> {
        let chain = |first: usize, hidden: &[usize], last: usize| {
            let mut w = vec![first];
            w.extend_from_slice(hidden);
            w.push(last);
            w
        };
        let encoder = MlpSpec::uniform(
            chain(self.input_dim, &self.encoder_hidden, self.latent_dim),
            Activation::Relu,
        )?;
        let classifier = MlpSpec::uniform(
            chain(self.latent_dim, &self.classifier_hidden, self.num_classes),
            Activation::Relu,
        )?;
        let critic = MlpSpec::uniform(
            chain(self.latent_dim, &self.critic_hidden, 1),
            Activation::LeakyRelu(self.critic_slope),
        )?;
        Ok((encoder, classifier, critic))
    }
}

/// Encoder `Q`, classifier `C` and critic `D` sharing one latent space.
#[derive(Debug, Clone, PartialEq)]
pub struct Pipeline {
    encoder: Mlp,
    classifier: Mlp,
    critic: Mlp,
    prior: PriorSpec,
}

impl Pipeline {
    /// Freshly initialized networks. Each network draws from its own RNG
    /// stream so the encoder and classifier weights do not depend on the
    /// critic's shape.
    pub fn init(arch: &Architecture, seed: u64) -> Result<Self> {
        let (e, c, d) = arch.specs()?;
        let stream = |s: u64| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s);
            rng
        };
        Self::from_parts(
            Mlp::init(e, &mut stream(1)),
            Mlp::init(c, &mut stream(2)),
            Mlp::init(d, &mut stream(3)),
        )
    }

    /// Assembles a pipeline, rejecting networks whose widths do not chain.
    pub fn from_parts(encoder: Mlp, classifier: Mlp, critic: Mlp) -> Result<Self> {
        let k = encoder.spec().output_width();
        if classifier.spec().input_width() != k || critic.spec().input_width() != k {
            return Err(Error::dim(format!(
                "latent width mismatch: encoder emits {k}, classifier takes {}, critic takes {}",
                classifier.spec().input_width(),
                critic.spec().input_width()
            )));
        }
        if critic.spec().output_width() != 1 {
            return Err(Error::dim("critic must emit one score per row"));
        }
        if classifier.spec().output_width() < 2 {
            return Err(Error::dim("classifier needs at least two classes"));
        }
        Ok(Self {
            encoder,
            classifier,
            critic,
            prior: PriorSpec { dim: k },
        })
    }

    pub fn latent_dim(&self) -> usize {
        self.prior.dim
    }

    pub fn prior(&self) -> PriorSpec {
        self.prior
    }

    pub fn encoder(&self) -> &Mlp {
        &self.encoder
    }

    pub fn classifier(&self) -> &Mlp {
        &self.classifier
    }

    pub fn critic(&self) -> &Mlp {
        &self.critic
    }

    pub fn encoder_mut(&mut self) -> &mut Mlp {
        &mut self.encoder
    }

    pub fn classifier_mut(&mut self) -> &mut Mlp {
        &mut self.classifier
    }

    pub fn encoder_classifier_mut(&mut self) -> (&mut Mlp, &mut Mlp) {
        (&mut self.encoder, &mut self.classifier)
    }

    pub fn critic_mut(&mut self) -> &mut Mlp {
        &mut self.critic
    }

    /// Latent codes `Q(x)`.
    pub fn encode(&self, x: &Tensor) -> Result<Tensor> {
        self.encoder.forward(x)
    }

    /// Raw class logits `C(z)`.
    pub fn classify(&self, z: &Tensor) -> Result<Tensor> {
        self.classifier.forward(z)
    }

    /// Critic scores `D(z)`, one unbounded real per row.
    pub fn discriminate(&self, z: &Tensor) -> Result<Tensor> {
        self.critic.forward(z)
    }
}

impl Classifier for Pipeline {
    fn input_dim(&self) -> usize {
        self.encoder.spec().input_width()
    }

    fn num_classes(&self) -> usize {
        self.classifier.spec().output_width()
    }

    fn record_logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let z = self.encoder.record(tape, x, false)?.output;
        Ok(self.classifier.record(tape, z, false)?.output)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> Pipeline {
        let arch = Architecture {
            input_dim: 6,
            latent_dim: 3,
            num_classes: 4,
            encoder_hidden: vec![5],
            classifier_hidden: vec![5],
            critic_hidden: vec![5, 5],
            critic_slope: 0.2,
        };
        Pipeline::init(&arch, 7).unwrap()
    }

    fn batch(rows: usize, cols: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.random()).collect()).unwrap()
    }

    #[test]
    fn spec_requires_hidden_layer() {
        assert!(MlpSpec::uniform(vec![4, 2], Activation::Relu).is_err());
        assert!(MlpSpec::uniform(vec![4, 0, 2], Activation::Relu).is_err());
        assert!(MlpSpec::new(vec![4, 3, 2], vec![]).is_err());
    }

    #[test]
    fn mismatched_latent_widths_are_unconstructible() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let enc = Mlp::init(MlpSpec::uniform(vec![6, 5, 3], Activation::Relu).unwrap(), &mut rng);
        let cls = Mlp::init(MlpSpec::uniform(vec![4, 5, 2], Activation::Relu).unwrap(), &mut rng);
        let crit = Mlp::init(MlpSpec::uniform(vec![3, 5, 1], Activation::Relu).unwrap(), &mut rng);
        assert!(matches!(
            Pipeline::from_parts(enc, cls, crit),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn encode_shapes_and_determinism() {
        let p = small();
        let mut x = batch(5, 6, 1);
        let first = x.row(0).to_vec();
        x.data_mut()[6..12].copy_from_slice(&first);
        let z = p.encode(&x).unwrap();
        assert_eq!(z.shape(), &[5, 3]);
        assert_eq!(z.row(0), z.row(1));
    }

    #[test]
    fn zero_input_encodes_to_output_bias() {
        let p = small();
        let z = p.encode(&Tensor::zeros(&[2, 6])).unwrap();
        let bias = p.encoder().params().last().unwrap();
        assert_eq!(z.row(0), bias.data());
        assert_eq!(z.row(1), bias.data());
    }

    #[test]
    fn wrong_width_is_dimension_error() {
        let p = small();
        assert!(matches!(
            p.encode(&Tensor::zeros(&[2, 5])),
            Err(Error::Dimension(_))
        ));
        assert!(matches!(
            p.classify(&Tensor::zeros(&[2, 4])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn classify_and_discriminate_shapes() {
        let p = small();
        let z = batch(4, 3, 2);
        assert_eq!(p.classify(&z).unwrap().shape(), &[4, 4]);
        let s = p.discriminate(&z).unwrap();
        assert_eq!(s.shape(), &[4, 1]);
        assert_eq!(s, p.discriminate(&z).unwrap());
    }

    #[test]
    fn predict_is_argmax_of_composition() {
        let p = small();
        let x = batch(8, 6, 3);
        let logits = p.classify(&p.encode(&x).unwrap()).unwrap();
        assert_eq!(p.predict(&x).unwrap(), logits.argmax_rows());
        let shifted = logits.map(|v| v + 17.5);
        assert_eq!(shifted.argmax_rows(), logits.argmax_rows());
    }

    #[test]
    fn all_equal_logits_predict_class_zero() {
        // Zeroing the classifier's last layer makes every logit equal.
        let mut p = small();
        let n = p.classifier().params().len();
        for t in &mut p.classifier_mut().params_mut()[n - 2..] {
            t.data_mut().fill(0.0);
        }
        assert_eq!(p.predict(&batch(3, 6, 4)).unwrap(), vec![0, 0, 0]);
    }

    #[test]
    fn clipped_critic_scores_are_bounded() {
        let mut p = small();
        crate::optim::clip_weights(p.critic_mut().params_mut(), 0.01).unwrap();
        let bound = p.critic().output_bound(4.0);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let z = Tensor::matrix(200, 3, (0..600).map(|_| rng.random_range(-4.0..4.0)).collect())
            .unwrap();
        let s = p.discriminate(&z).unwrap();
        assert!(s.max_abs() <= bound);
    }

    #[test]
    fn prior_sampling_is_seeded() {
        let spec = PriorSpec { dim: 4 };
        let a = PriorSampler::new(spec, 11).sample(10).unwrap();
        let b = PriorSampler::new(spec, 11).sample(10).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.shape(), &[10, 4]);
        assert!(PriorSampler::new(spec, 11).sample(0).is_err());
    }
}
