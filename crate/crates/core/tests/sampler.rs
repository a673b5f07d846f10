mod common;

use common::normal_cdf;
use otlab::{PriorSampler, PriorSpec};

const N: usize = 100_000;

#[test]
fn prior_moments_match_a_standard_normal() {
    let k = 4;
    let z = PriorSampler::new(PriorSpec { dim: k }, 3).sample(N).unwrap();
    for j in 0..k {
        let col: Vec<f64> = (0..N).map(|i| z.data()[i * k + j]).collect();
        let mean = col.iter().sum::<f64>() / N as f64;
        let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (N - 1) as f64;
        // five standard errors: sd(mean) = 1/sqrt(N), sd(var) ~ sqrt(2/N)
        assert!(mean.abs() < 5.0 / (N as f64).sqrt(), "mean {mean}");
        assert!((var - 1.0).abs() < 5.0 * (2.0 / N as f64).sqrt(), "var {var}");
    }
    // coordinates are uncorrelated
    let cov: f64 = (0..N).map(|i| z.data()[i * k] * z.data()[i * k + 1]).sum::<f64>() / N as f64;
    assert!(cov.abs() < 5.0 / (N as f64).sqrt(), "cov {cov}");
}

#[test]
fn prior_passes_kolmogorov_smirnov() {
    let mut s = PriorSampler::new(PriorSpec { dim: 1 }, 8).sample(N).unwrap().into_data();
    s.sort_by(f64::total_cmp);
    let n = N as f64;
    let d = s
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = normal_cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max);
    // asymptotic critical value at significance 1e-3
    let critical = ((2.0f64 / 1e-3).ln() / 2.0).sqrt() / n.sqrt();
    assert!(d < critical, "D = {d}, critical {critical}");
}

#[test]
fn sampler_is_deterministic_per_seed() {
    let spec = PriorSpec { dim: 3 };
    let a = PriorSampler::new(spec, 5).sample(10).unwrap();
    let b = PriorSampler::new(spec, 5).sample(10).unwrap();
    let c = PriorSampler::new(spec, 6).sample(10).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
}
