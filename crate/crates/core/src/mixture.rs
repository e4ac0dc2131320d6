//! Diagonal-covariance Gaussian mixtures.
//!
//! Densities and responsibilities are evaluated in log space; component
//! densities are only exponentiated inside log-sum-exp.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand::SeedableRng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

/// Smallest variance any fitted or optimized component may take.
pub const VARIANCE_FLOOR: f64 = 1e-6;

pub(crate) const LN_2PI: f64 = 1.837_877_066_409_345_3;

/// Mixture weights, means and log-variances of a `K`-component mixture in
/// `J` dimensions.
#[derive(Clone, Debug, PartialEq)]
pub struct GmmParams {
    pub pi: Vec<f64>,
    /// `K×J`
    pub mu: Tensor,
    /// `K×J`, log σ²
    pub log_var: Tensor,
}

impl GmmParams {
    pub fn new(pi: Vec<f64>, mu: Tensor, log_var: Tensor) -> Result<Self> {
        let p = GmmParams { pi, mu, log_var };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        let k = self.pi.len();
        if k == 0 || !self.mu.is_matrix() || self.mu.rows() != k {
            return Err(Error::dim("gmm", &[k], self.mu.shape()));
        }
        if self.mu.shape() != self.log_var.shape() {
            return Err(Error::dim("gmm", self.mu.shape(), self.log_var.shape()));
        }
        if self.pi.iter().any(|&p| !(p >= 0.0)) {
            return Err(Error::Input(format!("mixture weights must be non-negative: {:?}", self.pi)));
        }
        let total: f64 = self.pi.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::Input(format!("mixture weights sum to {total}, not 1")));
        }
        if !self.mu.all_finite() || !self.log_var.all_finite() {
            return Err(Error::Input("mixture means and log-variances must be finite".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.pi.len()
    }

    pub fn dim(&self) -> usize {
        self.mu.cols()
    }

    /// `ln π_c + ln N(z | μ_c, σ_c²)` for every component.
    pub fn log_joint(&self, z: &[f64]) -> Result<Vec<f64>> {
        (0..self.k())
            .map(|c| {
                Ok(self.pi[c].ln() + log_gaussian_diag(z, self.mu.row(c), self.log_var.row(c))?)
            })
            .collect()
    }

    /// `ln Σ_c π_c N(z | μ_c, σ_c²)`.
    pub fn log_density(&self, z: &[f64]) -> Result<f64> {
        Ok(log_sum_exp(&self.log_joint(z)?))
    }

    /// Average per-sample log-likelihood of the rows of `data`.
    pub fn mean_log_likelihood(&self, data: &Tensor) -> Result<f64> {
        let mut total = 0.0;
        for i in 0..data.rows() {
            total += self.log_density(data.row(i))?;
        }
        Ok(total / data.rows() as f64)
    }
}

pub(crate) fn log_sum_exp(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + v.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Log-density of a diagonal Gaussian.
pub fn log_gaussian_diag(z: &[f64], mu: &[f64], log_var: &[f64]) -> Result<f64> {
    if z.len() != mu.len() || z.len() != log_var.len() {
        return Err(Error::dim("log_gaussian_diag", &[z.len()], &[mu.len(), log_var.len()]));
    }
    Ok(z.iter()
        .zip(mu)
        .zip(log_var)
        .map(|((&z, &m), &lv)| -0.5 * (LN_2PI + lv + (z - m) * (z - m) * (-lv).exp()))
        .sum())
}

/// `p(c | z)` for every component, normalized in log space.
pub fn cluster_posterior_z(z: &[f64], params: &GmmParams) -> Result<Vec<f64>> {
    if z.len() != params.dim() {
        return Err(Error::dim("cluster_posterior_z", &[z.len()], params.mu.shape()));
    }
    let joint = params.log_joint(z)?;
    let norm = log_sum_exp(&joint);
    if !norm.is_finite() {
        return Err(Error::Degenerate(
            "every mixture component assigns zero density to the point".into(),
        ));
    }
    Ok(joint.iter().map(|lj| (lj - norm).exp()).collect())
}

/// `∫ q(z) ln p(z) dz` for diagonal Gaussians `q = N(μ_q, σ_q²)` and
/// `p = N(μ_p, σ_p²)`, in closed form.
pub fn gaussian_cross_entropy(
    mu_q: &[f64],
    log_var_q: &[f64],
    mu_p: &[f64],
    log_var_p: &[f64],
) -> Result<f64> {
    let j = mu_q.len();
    if log_var_q.len() != j || mu_p.len() != j || log_var_p.len() != j {
        return Err(Error::dim(
            "gaussian_cross_entropy",
            &[mu_q.len(), log_var_q.len()],
            &[mu_p.len(), log_var_p.len()],
        ));
    }
    let mut total = 0.0;
    for i in 0..j {
        let inv_var_p = (-log_var_p[i]).exp();
        let diff = mu_q[i] - mu_p[i];
        total += -0.5 * (LN_2PI + log_var_p[i])
            - 0.5 * log_var_q[i].exp() * inv_var_p
            - 0.5 * diff * diff * inv_var_p;
    }
    Ok(total)
}

/// Draws `(c, z)` from the mixture; `cluster` fixes `c` instead of sampling it.
pub fn sample_prior<R: Rng + ?Sized>(
    params: &GmmParams,
    rng: &mut R,
    cluster: Option<usize>,
) -> Result<(usize, Vec<f64>)> {
    let c = match cluster {
        Some(c) if c >= params.k() => {
            return Err(Error::Input(format!(
                "cluster {c} out of range for {} components",
                params.k()
            )))
        }
        Some(c) => c,
        None => sample_categorical(&params.pi, rng),
    };
    let z = params
        .mu
        .row(c)
        .iter()
        .zip(params.log_var.row(c))
        .map(|(&m, &lv)| {
            let e: f64 = rng.sample(StandardNormal);
            m + (0.5 * lv).exp() * e
        })
        .collect();
    Ok((c, z))
}

fn sample_categorical<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, &w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    // rounding left u above the running total: take the last non-empty component
    weights.iter().rposition(|&w| w > 0.0).unwrap_or(0)
}

#[derive(Clone, Debug)]
pub struct EmConfig {
    pub k: usize,
    pub max_iters: usize,
    /// Stop once the mean log-likelihood improves by less than this.
    pub tol: f64,
    pub seed: u64,
    pub variance_floor: f64,
    /// Independent initializations; the fit with the highest final
    /// likelihood is kept.
    pub inits: usize,
}

impl EmConfig {
    pub fn new(k: usize, seed: u64) -> Self {
        EmConfig {
            k,
            max_iters: 300,
            tol: 1e-7,
            seed,
            variance_floor: VARIANCE_FLOOR,
            inits: 1,
        }
    }
}

#[derive(Clone, Debug)]
pub struct EmFit {
    pub params: GmmParams,
    /// Mean per-sample log-likelihood before each M-step; the last entry
    /// belongs to the returned parameters.
    pub trace: Vec<f64>,
    pub converged: bool,
    /// Number of components that were found empty and re-seeded.
    pub reseeds: usize,
    pub warning: Option<String>,
}

const EMPTY_MASS: f64 = 1e-8;

struct EStep {
    resp: Vec<f64>,
    point_ll: Vec<f64>,
    mean_ll: f64,
}

fn e_step(data: &Tensor, params: &GmmParams) -> Result<EStep> {
    let (n, k) = (data.rows(), params.k());
    let mut resp = vec![0.0; n * k];
    let mut point_ll = Vec::with_capacity(n);
    for i in 0..n {
        let joint = params.log_joint(data.row(i))?;
        let norm = log_sum_exp(&joint);
        if !norm.is_finite() {
            return Err(Error::Degenerate(format!("row {i} has zero density under every component")));
        }
        for c in 0..k {
            resp[i * k + c] = (joint[c] - norm).exp();
        }
        point_ll.push(norm);
    }
    let mean_ll = point_ll.iter().sum::<f64>() / n as f64;
    Ok(EStep {
        resp,
        point_ll,
        mean_ll,
    })
}

fn column_variance(data: &Tensor, floor: f64) -> Vec<f64> {
    let (n, d) = (data.rows(), data.cols());
    (0..d)
        .map(|j| {
            let mean = (0..n).map(|i| data.get(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (data.get(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            var.max(floor)
        })
        .collect()
}

/// `k` distinct row indices; after the first uniform pick each row is drawn
/// with probability proportional to its squared distance from the nearest
/// row already chosen.
fn spread_picks<R: Rng + ?Sized>(data: &Tensor, k: usize, rng: &mut R) -> Vec<usize> {
    let n = data.rows();
    let mut picks = vec![rng.random_range(0..n)];
    let dist2 = |i: usize, j: usize| -> f64 { data.row(i).iter().zip(data.row(j)).map(|(a, b)| (a - b) * (a - b)).sum() };
    let mut nearest: Vec<f64> = (0..n).map(|i| dist2(i, picks[0])).collect();
    while picks.len() < k {
        let total: f64 = nearest.iter().sum();
        let next = if total > 0.0 {
            sample_categorical(&nearest.iter().map(|d| d / total).collect::<Vec<_>>(), rng)
        } else {
            // fewer distinct rows than components: any row not yet chosen
            let rest: Vec<usize> = (0..n).filter(|i| !picks.contains(i)).collect();
            rest[rng.random_range(0..rest.len())]
        };
        picks.push(next);
        for (i, d) in nearest.iter_mut().enumerate() {
            *d = d.min(dist2(i, next));
        }
    }
    picks
}

/// Expectation-maximization for a diagonal-covariance mixture.
///
/// Means start at `k` distinct random rows, spread out by distance-weighted
/// sampling; variances at the global column
/// variance, weights uniform. A component whose responsibility mass drops
/// below `1e-8` is moved to the worst-explained point when that does not
/// lower the likelihood.
pub fn em_fit(data: &Tensor, cfg: &EmConfig) -> Result<EmFit> {
    if !data.is_matrix() {
        return Err(Error::Input("em_fit expects an N×J matrix".into()));
    }
    let (n, k) = (data.rows(), cfg.k);
    if k == 0 || n < k {
        return Err(Error::Input(format!("em_fit needs 1 <= K <= N, got K={k}, N={n}")));
    }
    if cfg.max_iters == 0 {
        return Err(Error::Input("em_fit needs max_iters >= 1".into()));
    }
    if !data.all_finite() {
        return Err(Error::Input("em_fit data must be finite".into()));
    }
    if cfg.inits == 0 {
        return Err(Error::Input("em_fit needs at least one initialization".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut best: Option<EmFit> = None;
    for _ in 0..cfg.inits {
        let fit = fit_once(data, cfg, &mut rng)?;
        let better = best.as_ref().is_none_or(|b| fit.trace.last() > b.trace.last());
        if better {
            best = Some(fit);
        }
    }
    Ok(best.expect("at least one initialization"))
}

fn fit_once(data: &Tensor, cfg: &EmConfig, rng: &mut ChaCha8Rng) -> Result<EmFit> {
    let (n, d, k) = (data.rows(), data.cols(), cfg.k);
    let floor = cfg.variance_floor;
    let global_var = column_variance(data, floor);
    let global_log_var: Vec<f64> = global_var.iter().map(|v| v.ln()).collect();

    let picks = spread_picks(data, k, rng);
    let mut params = GmmParams {
        pi: vec![1.0 / k as f64; k],
        mu: data.select_rows(&picks),
        log_var: Tensor::from_rows(&vec![global_log_var.clone(); k])?,
    };

    let mut trace = Vec::new();
    let mut converged = false;
    let mut reseeds = 0;
    let mut estep = e_step(data, &params)?;
    for iter in 0..cfg.max_iters {
        trace.push(estep.mean_ll);
        if iter > 0 && estep.mean_ll - trace[iter - 1] < cfg.tol {
            converged = true;
            break;
        }

        // M-step
        let mut next = params.clone();
        let mut empty = Vec::new();
        for c in 0..k {
            let mass: f64 = (0..n).map(|i| estep.resp[i * k + c]).sum();
            next.pi[c] = mass / n as f64;
            if mass < EMPTY_MASS {
                empty.push(c);
                continue;
            }
            for j in 0..d {
                let mean = (0..n).map(|i| estep.resp[i * k + c] * data.get(i, j)).sum::<f64>() / mass;
                let var = (0..n)
                    .map(|i| estep.resp[i * k + c] * (data.get(i, j) - mean).powi(2))
                    .sum::<f64>()
                    / mass;
                next.mu.set(c, j, mean);
                next.log_var.set(c, j, var.max(floor).ln());
            }
        }
        renormalize(&mut next.pi);
        let mut next_e = e_step(data, &next)?;

        for c in empty {
            reseeds += 1;
            let worst = estep
                .point_ll
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.total_cmp(b.1))
                .map(|(i, _)| i)
                .unwrap_or(0);
            let mut candidate = next.clone();
            candidate.mu.row_mut(c).copy_from_slice(data.row(worst));
            candidate.log_var.row_mut(c).copy_from_slice(&global_log_var);
            candidate.pi[c] = candidate.pi[c].max(1.0 / n as f64);
            renormalize(&mut candidate.pi);
            let cand_e = e_step(data, &candidate)?;
            if cand_e.mean_ll >= next_e.mean_ll {
                next = candidate;
                next_e = cand_e;
            }
        }
        params = next;
        estep = next_e;
        if iter + 1 == cfg.max_iters {
            trace.push(estep.mean_ll);
        }
    }

    let warning = (reseeds >= k).then(|| {
        format!("EM re-seeded empty components {reseeds} times; the fit may not have converged")
    });
    Ok(EmFit {
        params,
        trace,
        converged,
        reseeds,
        warning,
    })
}

fn renormalize(pi: &mut [f64]) {
    let total: f64 = pi.iter().sum();
    for p in pi.iter_mut() {
        *p /= total;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::Rng;

    fn params(pi: Vec<f64>, mu: &[&[f64]], lv: &[&[f64]]) -> GmmParams {
        GmmParams::new(pi, Tensor::from_rows(mu).unwrap(), Tensor::from_rows(lv).unwrap()).unwrap()
    }

    /// Density written directly from the Gaussian formula, no log-space tricks.
    fn density_oracle(z: &[f64], mu: &[f64], var: &[f64]) -> f64 {
        let mut p = 1.0;
        for i in 0..z.len() {
            p *= (-(z[i] - mu[i]).powi(2) / (2.0 * var[i])).exp()
                / (2.0 * std::f64::consts::PI * var[i]).sqrt();
        }
        p
    }

    #[test]
    fn standard_normal_at_mode() {
        let one = log_gaussian_diag(&[0.0], &[0.0], &[0.0]).unwrap();
        assert!((one + 0.918_938_533_204_672_7).abs() < 1e-12);
        let two = log_gaussian_diag(&[0.0, 0.0], &[0.0, 0.0], &[0.0, 0.0]).unwrap();
        assert!((two + 1.837_877_066_409_345_5).abs() < 1e-12);
    }

    #[test]
    fn log_gaussian_matches_direct_density() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let z: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let mu: Vec<f64> = (0..4).map(|_| rng.random_range(-2.0..2.0)).collect();
            let var: Vec<f64> = (0..4).map(|_| rng.random_range(0.3..3.0)).collect();
            let lv: Vec<f64> = var.iter().map(|v| v.ln()).collect();
            let got = log_gaussian_diag(&z, &mu, &lv).unwrap();
            assert!((got - density_oracle(&z, &mu, &var).ln()).abs() < 1e-10);
        }
        assert!(log_gaussian_diag(&[0.0], &[0.0, 1.0], &[0.0]).is_err());
    }

    #[test]
    fn posterior_single_and_symmetric() {
        let p = params(vec![1.0], &[&[3.0, 1.0]], &[&[0.2, -0.4]]);
        assert_eq!(cluster_posterior_z(&[-7.0, 2.0], &p).unwrap(), vec![1.0]);

        let p = params(vec![0.5, 0.5], &[&[1.0, -2.0], &[-1.0, -2.0]], &[&[0.3, 0.1], &[0.3, 0.1]]);
        let g = cluster_posterior_z(&[0.0, 0.7], &p).unwrap();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn posterior_matches_plain_normalization() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..20 {
            let pi = {
                let mut w: Vec<f64> = (0..3).map(|_| rng.random_range(0.1..1.0)).collect();
                renormalize(&mut w);
                w
            };
            let mu: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
            let var: Vec<Vec<f64>> = (0..3).map(|_| (0..2).map(|_| rng.random_range(0.5..2.0)).collect()).collect();
            let lv: Vec<Vec<f64>> = var.iter().map(|r| r.iter().map(|v| v.ln()).collect()).collect();
            let p = GmmParams::new(pi.clone(), Tensor::from_rows(&mu).unwrap(), Tensor::from_rows(&lv).unwrap()).unwrap();
            let z = [rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)];
            let joint: Vec<f64> = (0..3).map(|c| pi[c] * density_oracle(&z, &mu[c], &var[c])).collect();
            let total: f64 = joint.iter().sum();
            let got = cluster_posterior_z(&z, &p).unwrap();
            for c in 0..3 {
                assert!((got[c] - joint[c] / total).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn posterior_degenerate_when_all_weights_vanish() {
        let p = GmmParams {
            pi: vec![0.0, 0.0],
            mu: Tensor::zeros(2, 1),
            log_var: Tensor::zeros(2, 1),
        };
        assert!(matches!(cluster_posterior_z(&[0.0], &p), Err(Error::Degenerate(_))));
    }

    #[test]
    fn cross_entropy_known_values() {
        let same = gaussian_cross_entropy(&[0.0], &[0.0], &[0.0], &[0.0]).unwrap();
        assert!((same + 1.418_938_533_204_672_7).abs() < 1e-12);
        let shifted = gaussian_cross_entropy(&[1.0], &[0.0], &[0.0], &[0.0]).unwrap();
        assert!((shifted + 1.918_938_533_204_672_7).abs() < 1e-12);
        assert!(gaussian_cross_entropy(&[0.0, 1.0], &[0.0], &[0.0], &[0.0]).is_err());
    }

    #[test]
    fn cross_entropy_matches_monte_carlo() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let mu_q = [0.4, -1.0, 2.0];
        let lv_q = [-0.5, 0.3, 0.0];
        let mu_p = [0.0, 0.5, 1.0];
        let lv_p = [0.2, -0.3, 0.7];
        let closed = gaussian_cross_entropy(&mu_q, &lv_q, &mu_p, &lv_p).unwrap();
        let n = 200_000;
        let (mut sum, mut sum_sq) = (0.0, 0.0);
        for _ in 0..n {
            let z: Vec<f64> = (0..3)
                .map(|j| mu_q[j] + (0.5 * lv_q[j]).exp() * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let v = log_gaussian_diag(&z, &mu_p, &lv_p).unwrap();
            sum += v;
            sum_sq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sum_sq / n as f64 - mean * mean) / n as f64).sqrt();
        assert!((mean - closed).abs() < 3.0 * se, "{mean} vs {closed} (se {se})");
    }

    #[test]
    fn sample_prior_behaviour() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let floor_lv = VARIANCE_FLOOR.ln();
        let p = params(vec![1.0, 0.0, 0.0], &[&[1.0, 2.0], &[5.0, 5.0], &[-3.0, 0.0]], &[&[floor_lv; 2], &[0.0; 2], &[0.0; 2]]);
        for _ in 0..100 {
            let (c, z) = sample_prior(&p, &mut rng, None).unwrap();
            assert_eq!(c, 0);
            assert!((z[0] - 1.0).abs() < 3.0 * VARIANCE_FLOOR.sqrt() * 2.0);
            assert!((z[1] - 2.0).abs() < 3.0 * VARIANCE_FLOOR.sqrt() * 2.0);
        }
        assert!(sample_prior(&p, &mut rng, Some(3)).is_err());

        let p = params(vec![0.2, 0.3, 0.5], &[&[0.0], &[0.0], &[0.0]], &[&[0.0], &[0.0], &[0.0]]);
        let mut counts = [0usize; 3];
        let draws = 100_000;
        for _ in 0..draws {
            counts[sample_prior(&p, &mut rng, None).unwrap().0] += 1;
        }
        for (c, &want) in [0.2, 0.3, 0.5].iter().enumerate() {
            let freq = counts[c] as f64 / draws as f64;
            assert!((freq - want).abs() < 0.01, "component {c}: {freq}");
        }
    }

    #[test]
    fn em_single_component_is_closed_form() {
        let data = Tensor::from_rows(&[[1.0, 2.0], [3.0, -2.0], [2.0, 6.0], [6.0, 2.0]]).unwrap();
        let fit = em_fit(&data, &EmConfig::new(1, 0)).unwrap();
        assert_eq!(fit.params.pi, vec![1.0]);
        let (mx, my) = (3.0, 2.0);
        let vx = (4.0 + 0.0 + 1.0 + 9.0) / 4.0;
        let vy = (0.0 + 16.0 + 16.0 + 0.0) / 4.0;
        assert!((fit.params.mu.get(0, 0) - mx).abs() < 1e-12);
        assert!((fit.params.mu.get(0, 1) - my).abs() < 1e-12);
        assert!((fit.params.log_var.get(0, 0).exp() - vx).abs() < 1e-12);
        assert!((fit.params.log_var.get(0, 1).exp() - vy).abs() < 1e-12);
    }

    pub(crate) fn two_blobs(seed: u64, n: usize) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rows: Vec<[f64; 2]> = (0..n)
            .map(|i| {
                let c = if i % 2 == 0 { 5.0 } else { -5.0 };
                [c + rng.sample::<f64, _>(StandardNormal), c + rng.sample::<f64, _>(StandardNormal)]
            })
            .collect();
        Tensor::from_rows(&rows).unwrap()
    }

    #[test]
    fn em_recovers_two_blobs() {
        let data = two_blobs(42, 2000);
        let fit = em_fit(&data, &EmConfig::new(2, 42)).unwrap();
        let mut means: Vec<f64> = (0..2).map(|c| fit.params.mu.get(c, 0)).collect();
        means.sort_by(f64::total_cmp);
        assert!((means[0] + 5.0).abs() < 0.1 && (means[1] - 5.0).abs() < 0.1, "{means:?}");
        for c in 0..2 {
            assert!((fit.params.mu.get(c, 0) - fit.params.mu.get(c, 1)).abs() < 0.2);
            assert!((fit.params.pi[c] - 0.5).abs() < 0.05);
        }
        assert!(fit.converged);
    }

    #[test]
    fn em_handles_duplicated_points() {
        let data = Tensor::from_rows(&vec![[1.0, 1.0]; 10]).unwrap();
        let fit = em_fit(&data, &EmConfig::new(3, 0)).unwrap();
        fit.params.validate().unwrap();
        for v in fit.params.log_var.data() {
            assert!(*v >= VARIANCE_FLOOR.ln() - 1e-12);
        }
    }

    #[test]
    fn em_rejects_bad_inputs() {
        let data = Tensor::zeros(2, 2);
        assert!(em_fit(&data, &EmConfig::new(3, 0)).is_err());
        let mut cfg = EmConfig::new(1, 0);
        cfg.max_iters = 0;
        assert!(em_fit(&data, &cfg).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn posterior_is_shift_invariant(shift in -50.0f64..50.0, z in -3.0f64..3.0) {
            let p = params(vec![0.2, 0.5, 0.3], &[&[-1.0], &[0.5], &[2.0]], &[&[0.0], &[-0.5], &[0.4]]);
            let base = cluster_posterior_z(&[z], &p).unwrap();
            // Adding a constant to every log-joint = rescaling every weight by e^shift
            // before renormalization.
            let joint: Vec<f64> = p.log_joint(&[z]).unwrap().iter().map(|v| v + shift).collect();
            let norm = log_sum_exp(&joint);
            let shifted: Vec<f64> = joint.iter().map(|v| (v - norm).exp()).collect();
            for c in 0..3 {
                prop_assert!((base[c] - shifted[c]).abs() < 1e-12);
            }
            prop_assert!((base.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn self_cross_entropy_is_negative_entropy(
            mu in proptest::collection::vec(-5.0f64..5.0, 1..6),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let lv: Vec<f64> = mu.iter().map(|_| rng.random_range(-3.0..3.0)).collect();
            let ce = gaussian_cross_entropy(&mu, &lv, &mu, &lv).unwrap();
            let neg_entropy: f64 = lv.iter().map(|l| -0.5 * (LN_2PI + l) - 0.5).sum();
            prop_assert!((ce - neg_entropy).abs() < 1e-10);
            // the z-entropy term ½Σ(1 + log σ²) differs from -ce only by the 2π constant
            let half: f64 = 0.5 * lv.iter().map(|l| 1.0 + l).sum::<f64>();
            prop_assert!((-ce - half - 0.5 * LN_2PI * mu.len() as f64).abs() < 1e-10);
        }

        #[test]
        fn em_trace_is_monotone(seed in 0u64..1000, k in 1usize..5) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<[f64; 3]> = (0..120)
                .map(|_| [rng.random_range(-3.0..3.0), rng.sample(StandardNormal), rng.random_range(0.0..1.0)])
                .collect();
            let data = Tensor::from_rows(&rows).unwrap();
            let fit = em_fit(&data, &EmConfig::new(k, seed)).unwrap();
            for w in fit.trace.windows(2) {
                prop_assert!(w[1] >= w[0] - 1e-8, "{:?}", fit.trace);
            }
            prop_assert!((fit.params.pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}
