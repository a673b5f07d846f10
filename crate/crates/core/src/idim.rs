//! Maximum-likelihood intrinsic-dimension estimation from nearest-neighbor
//! distances, plus synthetic manifolds with a known dimension.
//!
//! For a point `x` with sorted neighbor distances `T_1 <= T_2 <= ...` the
//! local estimate at neighborhood size `k` is
//!
//! ```text
//! m_k(x) = [ 1/(k-1) * sum_{j<k} ln(T_k / T_j) ]^-1
//! ```
//!
//! By default the inverses `1/m_k(x)` are averaged over points and over
//! `k in [k1, k2]` before inverting once, which removes most of the small-k
//! bias of averaging the estimates directly.

use std::io::BufRead;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// `n` points in `D` ambient dimensions, one per row.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Tensor,
}

impl PointCloud {
    pub fn new(points: Tensor) -> Result<Self> {
        if !points.is_matrix() {
            return Err(Error::dim("a point cloud is an [n x D] matrix"));
        }
        if !points.all_finite() {
            return Err(Error::input("point coordinates must be finite"));
        }
        Ok(Self { points })
    }

    pub fn len(&self) -> usize {
        self.points.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn ambient_dim(&self) -> usize {
        self.points.cols()
    }

    pub fn points(&self) -> &Tensor {
        &self.points
    }

    /// Multiplies every coordinate by `s`.
    pub fn scaled(&self, s: f64) -> PointCloud {
        PointCloud {
            points: self.points.map(|v| v * s),
        }
    }

    /// Applies `x -> x R` with a `[D x D]` matrix `R`.
    pub fn transformed(&self, r: &Tensor) -> Result<PointCloud> {
        PointCloud::new(self.points.matmul(r)?)
    }

    /// Reads comma-separated rows of numbers. A first line that does not
    /// parse as numbers is treated as a header.
    pub fn read_csv(reader: impl BufRead) -> Result<PointCloud> {
        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::input(format!("reading CSV: {e}")))?;
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let parsed: std::result::Result<Vec<f64>, _> =
                line.split(',').map(|f| f.trim().parse::<f64>()).collect();
            match parsed {
                Ok(row) => rows.push(row),
                Err(_) if rows.is_empty() && lineno == 0 => continue,
                Err(e) => {
                    return Err(Error::input(format!("line {}: {e}", lineno + 1)));
                }
            }
        }
        if rows.is_empty() {
            return Err(Error::input("no points in CSV"));
        }
        PointCloud::new(Tensor::from_rows(&rows)?)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Averaging {
    /// Average `1/m_k(x)` over points and `k`, then invert.
    InverseMean,
    /// Average `m_k(x)` over points and then over `k`.
    Simple,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IdimConfig {
    pub k1: usize,
    pub k2: usize,
    /// Random subsample size; `None` uses every point.
    pub sample_size: Option<usize>,
    pub seed: u64,
    pub averaging: Averaging,
}

impl Default for IdimConfig {
    fn default() -> Self {
        Self {
            k1: 6,
            k2: 12,
            sample_size: Some(1000),
            seed: 0,
            averaging: Averaging::InverseMean,
        }
    }
}

/// Maximum-likelihood intrinsic dimension of `cloud`.
pub fn mle_idim(cloud: &PointCloud, cfg: &IdimConfig) -> Result<f64> {
    let n_total = cloud.len();
    let n = cfg.sample_size.map_or(n_total, |s| s.min(n_total));
    if cfg.k1 < 2 || cfg.k1 > cfg.k2 || cfg.k2 >= n {
        return Err(Error::usage(format!(
            "need 2 <= k1 <= k2 < sample size, got k1={}, k2={}, n={n}",
            cfg.k1, cfg.k2
        )));
    }
    let points = if n < n_total {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut idx = sample(&mut rng, n_total, n).into_vec();
        idx.sort_unstable();
        cloud.points.select_rows(&idx)?
    } else {
        cloud.points.clone()
    };

    let neighbors = knn_distances(&points, cfg.k2)?;
    let ks = cfg.k1..=cfg.k2;
    let per_k: Vec<f64> = ks
        .map(|k| {
            let inv: Vec<f64> = neighbors
                .iter()
                .map(|t| {
                    let tk = t[k - 1].ln();
                    t[..k - 1].iter().map(|tj| tk - tj.ln()).sum::<f64>() / (k - 1) as f64
                })
                .collect();
            match cfg.averaging {
                Averaging::InverseMean => inv.iter().sum::<f64>() / n as f64,
                Averaging::Simple => inv.iter().map(|v| 1.0 / v).sum::<f64>() / n as f64,
            }
        })
        .collect();
    let mean = per_k.iter().sum::<f64>() / per_k.len() as f64;
    let estimate = match cfg.averaging {
        Averaging::InverseMean => 1.0 / mean,
        Averaging::Simple => mean,
    };
    if !estimate.is_finite() {
        return Err(Error::NonFinite("intrinsic dimension"));
    }
    Ok(estimate)
}

/// Sorted distances from each point to its `k` nearest other points.
fn knn_distances(points: &Tensor, k: usize) -> Result<Vec<Vec<f64>>> {
    let n = points.rows();
    let mut sq = vec![0.0; n * n];
    for i in 0..n {
        let a = points.row(i);
        for j in i + 1..n {
            let d: f64 = a
                .iter()
                .zip(points.row(j))
                .map(|(p, q)| (p - q) * (p - q))
                .sum();
            if d == 0.0 {
                return Err(Error::input(format!("points {i} and {j} coincide")));
            }
            sq[i * n + j] = d;
            sq[j * n + i] = d;
        }
    }
    Ok((0..n)
        .map(|i| {
            let mut row: Vec<f64> = (0..n).filter(|&j| j != i).map(|j| sq[i * n + j]).collect();
            row.select_nth_unstable_by(k - 1, f64::total_cmp);
            row.truncate(k);
            row.sort_unstable_by(f64::total_cmp);
            row.iter().map(|d| d.sqrt()).collect()
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ManifoldKind {
    /// Uniform on a unit segment; dimension 1 only.
    Segment,
    /// Uniform in a unit ball of the given dimension (a disk for 2).
    Disk,
    /// Uniform on the unit sphere `S^m` inside `R^(m+1)`.
    Sphere,
    /// Standard Gaussian of the given dimension.
    GaussianBlob,
}

impl std::str::FromStr for ManifoldKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segment" => Ok(ManifoldKind::Segment),
            "disk" => Ok(ManifoldKind::Disk),
            "sphere" => Ok(ManifoldKind::Sphere),
            "gaussian_blob" | "blob" => Ok(ManifoldKind::GaussianBlob),
            other => Err(Error::usage(format!("unknown manifold `{other}`"))),
        }
    }
}

/// Samples `n` points of a `true_dim`-dimensional manifold and embeds them in
/// `R^ambient_dim` through a random rotation.
pub fn gen_manifold(kind: ManifoldKind, true_dim: usize, ambient_dim: usize, n: usize, seed: u64) -> Result<PointCloud> {
    let intrinsic_coords = match kind {
        ManifoldKind::Segment if true_dim != 1 => {
            return Err(Error::usage("a segment has dimension 1"));
        }
        ManifoldKind::Sphere => true_dim + 1,
        _ => true_dim,
    };
    if true_dim == 0 || n == 0 {
        return Err(Error::usage("manifold dimension and size must be positive"));
    }
    if intrinsic_coords > ambient_dim {
        return Err(Error::usage(format!(
            "{kind:?} of dimension {true_dim} does not fit in R^{ambient_dim}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut data = Vec::with_capacity(n * ambient_dim);
    for _ in 0..n {
        let mut p: Vec<f64> = match kind {
            ManifoldKind::Segment => vec![rng.random::<f64>()],
            ManifoldKind::GaussianBlob => gaussian_vec(&mut rng, true_dim),
            ManifoldKind::Sphere => normalized(gaussian_vec(&mut rng, true_dim + 1)),
            ManifoldKind::Disk => {
                let radius = rng.random::<f64>().powf(1.0 / true_dim as f64);
                normalized(gaussian_vec(&mut rng, true_dim))
                    .into_iter()
                    .map(|v| v * radius)
                    .collect()
            }
        };
        p.resize(ambient_dim, 0.0);
        data.extend(p);
    }
    let flat = Tensor::matrix(n, ambient_dim, data)?;
    let rotation = random_rotation(ambient_dim, &mut rng)?;
    PointCloud::new(flat.matmul(&rotation)?)
}

fn gaussian_vec(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

fn normalized(v: Vec<f64>) -> Vec<f64> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// Haar-ish random orthogonal matrix from Gram-Schmidt on Gaussian columns.
pub fn random_rotation(dim: usize, rng: &mut impl Rng) -> Result<Tensor> {
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(dim);
    while basis.len() < dim {
        let mut v = gaussian_vec(rng, dim);
        for b in &basis {
            let proj: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
            v.iter_mut().zip(b).for_each(|(x, y)| *x -= proj * y);
        }
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-8 {
            basis.push(v.into_iter().map(|x| x / norm).collect());
        }
    }
    Tensor::from_rows(&basis)
}
