//! Fixtures shared by the integration tests and the acceptance runner.
#![allow(dead_code)]

use std::path::PathBuf;

use otlab::data::{gen_blobs, load_mnist};
use otlab::tape::{NodeId, Tape};
use otlab::training::{train, Regime, TrainConfig};
use otlab::{Classifier, Dataset, Pipeline, Result, Split, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// MNIST location: `OTLAB_MNIST_DIR`, else `<workspace>/data/mnist`.
pub fn mnist_dir() -> PathBuf {
    std::env::var_os("OTLAB_MNIST_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|| PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist"))
}

pub fn mnist(split: Split) -> Result<Dataset> {
    load_mnist(mnist_dir(), split)
}

/// Two well separated 10-d blobs, 100 points each.
pub fn blobs() -> Dataset {
    gen_blobs(2, 100, 10, 10.0, 7).unwrap()
}

/// A plain model fitted to [`blobs`].
pub fn blob_model() -> (Pipeline, Dataset) {
    let ds = blobs();
    let mut cfg = TrainConfig::new(Regime::Plain, 5);
    cfg.epochs = 20;
    cfg.batch_size = 20;
    let (p, _) = train(&cfg, &ds).unwrap();
    (p, ds)
}

/// Multinomial logistic regression `x W`, used where the attack output can be
/// predicted in closed form.
pub struct Linear {
    pub w: Tensor,
}

impl Classifier for Linear {
    fn input_dim(&self) -> usize {
        self.w.rows()
    }

    fn num_classes(&self) -> usize {
        self.w.cols()
    }

    fn record_logits(&self, tape: &mut Tape, x: NodeId) -> Result<NodeId> {
        let w = tape.constant(self.w.clone());
        tape.matmul(x, w)
    }
}

pub fn random_matrix(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Tensor::matrix(rows, cols, data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Standard normal CDF via the complementary error function
/// (Numerical Recipes `erfcc`, fractional error below 1.2e-7).
pub fn normal_cdf(x: f64) -> f64 {
    let z = x.abs() / std::f64::consts::SQRT_2;
    let t = 1.0 / (1.0 + 0.5 * z);
    let poly = -z * z - 1.26551223
        + t * (1.00002368
            + t * (0.37409196
                + t * (0.09678418
                    + t * (-0.18628806
                        + t * (0.27886807
                            + t * (-1.13520398 + t * (1.48851587 + t * (-0.82215223 + t * 0.17087277))))))));
    let erfc = t * poly.exp();
    if x >= 0.0 {
        1.0 - 0.5 * erfc
    } else {
        0.5 * erfc
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Act {
    Relu,
    Leaky,
    Tanh,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Loss {
    HalfSquares,
    CrossEntropy,
    Margin,
    SumTanh,
}

/// A random small network evaluated directly on a tape, with every input
/// and parameter a differentiable leaf.
#[derive(Debug, Clone)]
pub struct RandomNet {
    acts: Vec<Act>,
    loss: Loss,
    labels: Vec<usize>,
    /// `[x, W0, b0, W1, b1, ...]`
    pub values: Vec<Tensor>,
}

/// Distance from ReLU kinks and hinge/argmax switches below which a
/// fixture is redrawn: finite differences are meaningless across a kink.
const KINK_MARGIN: f64 = 1e-2;
const MARGIN_KAPPA: f64 = 0.5;

impl RandomNet {
    /// Draws a network with at most `max_params` values (input included).
    pub fn draw(rng: &mut ChaCha8Rng, max_params: usize) -> RandomNet {
        loop {
            let batch: usize = rng.random_range(1..=3);
            let depth = rng.random_range(1..=2);
            let mut widths = vec![rng.random_range(2..=5)];
            for _ in 0..depth {
                widths.push(rng.random_range(2..=6));
            }
            widths.push(rng.random_range(2..=4));
            let count: usize = batch * widths[0]
                + widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum::<usize>();
            if count > max_params {
                continue;
            }
            let acts: Vec<Act> = (0..depth)
                .map(|_| match rng.random_range(0..3) {
                    0 => Act::Relu,
                    1 => Act::Leaky,
                    _ => Act::Tanh,
                })
                .collect();
            let loss = match rng.random_range(0..4) {
                0 => Loss::HalfSquares,
                1 => Loss::CrossEntropy,
                2 => Loss::Margin,
                _ => Loss::SumTanh,
            };
            let m: usize = *widths.last().unwrap();
            let labels: Vec<usize> = (0..batch).map(|_| rng.random_range(0..m)).collect();
            for _attempt in 0..200 {
                let mut values = vec![random_matrix(rng, batch, widths[0], 1.0)];
                for w in widths.windows(2) {
                    values.push(random_matrix(rng, w[0], w[1], 1.0));
                    values.push(random_matrix(rng, 1, w[1], 0.5));
                }
                let net = RandomNet {
                    acts: acts.clone(),
                    loss,
                    labels: labels.clone(),
                    values,
                };
                if net.kink_free() {
                    return net;
                }
            }
        }
    }

    pub fn param_count(&self) -> usize {
        self.values.iter().map(Tensor::len).sum()
    }

    /// Records the network on a fresh tape; returns the tape, the scalar
    /// root, the leaf ids and the pre-activation nodes of the hidden layers.
    pub fn build(&self, values: &[Tensor]) -> Result<(Tape, NodeId, Vec<NodeId>, Vec<NodeId>, NodeId)> {
        let mut tape = Tape::new();
        let leaves: Vec<NodeId> = values.iter().map(|v| tape.variable(v.clone())).collect();
        let batch = values[0].rows();
        let ones = tape.constant(Tensor::full(&[batch, 1], 1.0));
        let mut h = leaves[0];
        let mut pre = Vec::new();
        let layers = (values.len() - 1) / 2;
        for l in 0..layers {
            let xw = tape.matmul(h, leaves[1 + 2 * l])?;
            let b = tape.matmul(ones, leaves[2 + 2 * l])?;
            h = tape.add(xw, b)?;
            if l < layers - 1 {
                pre.push(h);
                h = match self.acts[l] {
                    Act::Relu => tape.relu(h)?,
                    Act::Leaky => tape.leaky_relu(h, 0.1)?,
                    Act::Tanh => tape.tanh(h)?,
                };
            }
        }
        let logits = h;
        let root = match self.loss {
            Loss::HalfSquares => {
                let sq = tape.mul(h, h)?;
                let s = tape.sum(sq)?;
                tape.scale(s, 0.5)?
            }
            Loss::CrossEntropy => tape.softmax_cross_entropy(h, &self.labels)?,
            Loss::Margin => {
                let m = tape.margin_loss(h, &self.labels, MARGIN_KAPPA)?;
                tape.mean(m)?
            }
            Loss::SumTanh => {
                let t = tape.tanh(h)?;
                tape.sum(t)?
            }
        };
        Ok((tape, root, leaves, pre, logits))
    }

    fn kink_free(&self) -> bool {
        let Ok((tape, _, _, pre, logits)) = self.build(&self.values) else {
            return false;
        };
        for (l, &p) in pre.iter().enumerate() {
            if self.acts[l] != Act::Tanh && tape.value(p).data().iter().any(|v| v.abs() < KINK_MARGIN) {
                return false;
            }
        }
        if self.loss == Loss::Margin {
            let z = tape.value(logits);
            for (i, &y) in self.labels.iter().enumerate() {
                let row = z.row(i);
                let mut rivals: Vec<f64> = row.iter().enumerate().filter(|(j, _)| *j != y).map(|(_, v)| *v).collect();
                rivals.sort_by(|a, b| b.total_cmp(a));
                if rivals.len() > 1 && rivals[0] - rivals[1] < KINK_MARGIN {
                    return false;
                }
                if (row[y] - rivals[0] + MARGIN_KAPPA).abs() < KINK_MARGIN {
                    return false;
                }
            }
        }
        true
    }

    fn root_value(&self, values: &[Tensor]) -> f64 {
        let (tape, root, ..) = self.build(values).unwrap();
        tape.value(root).item().unwrap()
    }

    /// Largest relative error between tape gradients and central differences
    /// with step `h`. The relative error of an entry is
    /// `|a - f| / max(|a|, |f|, floor)`.
    pub fn max_gradient_error(&self, h: f64, floor: f64) -> f64 {
        let (tape, root, leaves, ..) = self.build(&self.values).unwrap();
        let grads = tape.backward(root).unwrap();
        let mut worst = 0.0f64;
        let mut values = self.values.clone();
        for (t, &leaf) in leaves.iter().enumerate() {
            let analytic = grads.get(leaf).unwrap().data().to_vec();
            for i in 0..values[t].len() {
                let orig = values[t].data()[i];
                values[t].data_mut()[i] = orig + h;
                let up = self.root_value(&values);
                values[t].data_mut()[i] = orig - h;
                let down = self.root_value(&values);
                values[t].data_mut()[i] = orig;
                let fd = (up - down) / (2.0 * h);
                let a = analytic[i];
                let err = (a - fd).abs() / a.abs().max(fd.abs()).max(floor);
                worst = worst.max(err);
            }
        }
        worst
    }
}
