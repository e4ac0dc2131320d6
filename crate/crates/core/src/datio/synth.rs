//! Seeded synthetic clustering data: Gaussian blobs in a small latent space
//! pushed through a fixed random map into the observed space.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

use super::{FeatureKind, LabeledDataset};

/// Map from latent points to observed features.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Warp {
    /// Identity when the widths agree, otherwise a random linear map.
    Linear,
    /// One random `tanh` hidden layer followed by a random linear map.
    TanhMlp,
}

impl Warp {
    pub fn name(self) -> &'static str {
        match self {
            Warp::Linear => "linear",
            Warp::TanhMlp => "tanh-mlp",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "linear" => Some(Warp::Linear),
            "tanh-mlp" => Some(Warp::TanhMlp),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub clusters: usize,
    pub latent_dim: usize,
    pub dim: usize,
    pub n_per_cluster: usize,
    pub seed: u64,
    pub warp: Warp,
    /// Minimum distance between cluster means, in latent standard deviations.
    pub separation: f64,
    /// Standard deviation of isotropic noise added after the warp.
    pub noise: f64,
}

impl SynthConfig {
    pub fn new(clusters: usize, latent_dim: usize, dim: usize, n_per_cluster: usize, seed: u64) -> Self {
        SynthConfig {
            clusters,
            latent_dim,
            dim,
            n_per_cluster,
            seed,
            warp: Warp::TanhMlp,
            separation: 6.0,
            noise: 0.05,
        }
    }
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn min_pairwise(means: &Tensor) -> f64 {
    let k = means.rows();
    let mut best = f64::INFINITY;
    for a in 0..k {
        for b in a + 1..k {
            let d: f64 = means.row(a).iter().zip(means.row(b)).map(|(x, y)| (x - y) * (x - y)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

/// `K×J` cluster means whose closest pair is `separation` apart.
///
/// When `K ≤ J + 1` the means are the vertices of a regular simplex with
/// that edge length; otherwise random points rescaled to the separation.
pub fn simplex_means(clusters: usize, latent_dim: usize, separation: f64, seed: u64) -> Tensor {
    let mut means = Tensor::zeros(clusters, latent_dim);
    if clusters == 1 {
        return means;
    }
    if clusters <= latent_dim + 1 {
        // Helmert basis of the hyperplane orthogonal to the all-ones vector:
        // the images of the standard basis are equidistant (√2 apart).
        let scale = separation / std::f64::consts::SQRT_2;
        for k in 1..clusters {
            let norm = ((k * (k + 1)) as f64).sqrt();
            for i in 0..clusters {
                let h = match i.cmp(&k) {
                    std::cmp::Ordering::Less => 1.0,
                    std::cmp::Ordering::Equal => -(k as f64),
                    std::cmp::Ordering::Greater => 0.0,
                };
                means.set(i, k - 1, scale * h / norm);
            }
        }
    } else {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6d65616e73);
        for v in means.data_mut() {
            *v = normal(&mut rng);
        }
        let closest = min_pairwise(&means);
        for v in means.data_mut() {
            *v *= separation / closest;
        }
    }
    means
}

fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| scale * normal(rng)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

fn matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = Tensor::zeros(n, m);
    for i in 0..n {
        for p in 0..k {
            let av = a.get(i, p);
            for (o, bv) in out.row_mut(i).iter_mut().zip(b.row(p)) {
                *o += av * bv;
            }
        }
    }
    out
}

/// Labeled samples, `n_per_cluster` per cluster, grouped by cluster.
pub fn synth_mixture(cfg: &SynthConfig) -> Result<LabeledDataset> {
    if cfg.clusters == 0 || cfg.latent_dim == 0 || cfg.dim == 0 || cfg.n_per_cluster == 0 {
        return Err(Error::Input("synthetic data needs every count to be at least 1".into()));
    }
    if !(cfg.separation > 0.0) || !(cfg.noise >= 0.0) {
        return Err(Error::Input("separation must be positive and noise non-negative".into()));
    }
    let means = simplex_means(cfg.clusters, cfg.latent_dim, cfg.separation, cfg.seed);
    if cfg.clusters > 1 {
        let closest = min_pairwise(&means);
        assert!(closest >= cfg.separation * (1.0 - 1e-12), "means {closest} apart");
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (k, j, d) = (cfg.clusters, cfg.latent_dim, cfg.dim);

    let n = k * cfg.n_per_cluster;
    let mut z = Tensor::zeros(n, j);
    let mut labels = Vec::with_capacity(n);
    for c in 0..k {
        for s in 0..cfg.n_per_cluster {
            let i = c * cfg.n_per_cluster + s;
            for (zv, m) in z.row_mut(i).iter_mut().zip(means.row(c)) {
                *zv = m + normal(&mut rng);
            }
            labels.push(c);
        }
    }

    let mut x = match cfg.warp {
        Warp::Linear if d == j => z,
        Warp::Linear => matmul(&z, &random_matrix(j, d, 1.0 / (j as f64).sqrt(), &mut rng)),
        Warp::TanhMlp => {
            let hidden = 2 * d.max(j);
            // Pre-activations stay within a few units across the latent
            // range, so tanh bends the clusters without flattening them.
            let w1 = random_matrix(j, hidden, 1.0 / (cfg.separation * (j as f64).sqrt()), &mut rng);
            let b1: Vec<f64> = (0..hidden).map(|_| 0.5 * normal(&mut rng)).collect();
            let mut h = matmul(&z, &w1);
            for i in 0..n {
                for (v, b) in h.row_mut(i).iter_mut().zip(&b1) {
                    *v = (*v + b).tanh();
                }
            }
            matmul(&h, &random_matrix(hidden, d, 2.0 / (hidden as f64).sqrt(), &mut rng))
        }
    };
    if cfg.noise > 0.0 {
        for v in x.data_mut() {
            *v += cfg.noise * normal(&mut rng);
        }
    }
    LabeledDataset::new(x, Some(labels), FeatureKind::Real, format!("synth-{}", cfg.warp.name()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::clustering_accuracy;
    use crate::mixture::{cluster_posterior_z, em_fit, EmConfig};
    use crate::model::argmax;

    #[test]
    fn simplex_is_regular() {
        for (k, j) in [(2, 1), (3, 2), (4, 3), (3, 5), (5, 4)] {
            let m = simplex_means(k, j, 6.0, 1);
            for a in 0..k {
                for b in a + 1..k {
                    let d: f64 = m.row(a).iter().zip(m.row(b)).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
                    assert!((d - 6.0).abs() < 1e-12, "K={k} J={j}: {d}");
                }
            }
        }
        let crowded = simplex_means(6, 2, 6.0, 3);
        assert!((min_pairwise(&crowded) - 6.0).abs() < 1e-9);
    }

    #[test]
    fn deterministic_and_balanced() {
        let cfg = SynthConfig::new(4, 2, 10, 37, 9);
        let a = synth_mixture(&cfg).unwrap();
        assert_eq!(a, synth_mixture(&cfg).unwrap());
        assert_eq!(a.len(), 4 * 37);
        let labels = a.labels.as_ref().unwrap();
        for c in 0..4 {
            assert_eq!(labels.iter().filter(|&&l| l == c).count(), 37);
        }
        assert_ne!(a, synth_mixture(&SynthConfig { seed: 10, ..cfg }).unwrap());
    }

    #[test]
    fn identity_warp_is_easy_for_em() {
        let cfg = SynthConfig {
            warp: Warp::Linear,
            noise: 0.0,
            ..SynthConfig::new(3, 2, 2, 300, 5)
        };
        let ds = synth_mixture(&cfg).unwrap();
        let fit = em_fit(&ds.features, &EmConfig::new(3, 5)).unwrap();
        let pred: Vec<usize> = (0..ds.len())
            .map(|i| argmax(&cluster_posterior_z(ds.features.row(i), &fit.params).unwrap()))
            .collect();
        let acc = clustering_accuracy(&pred, ds.labels.as_ref().unwrap()).unwrap();
        assert!(acc >= 0.95, "acc {acc}");
    }

    #[test]
    fn zero_counts_rejected() {
        assert!(synth_mixture(&SynthConfig::new(0, 2, 4, 10, 0)).is_err());
        assert!(synth_mixture(&SynthConfig::new(2, 2, 4, 0, 0)).is_err());
    }
}
