//! The clustering model: an encoder `q(z|x)`, a decoder `p(x|z)` and a
//! Gaussian-mixture prior `p(z|c) p(c)` over the latent space.

mod elbo;
mod optim;
mod pretrain;
mod train;

pub use elbo::{
    elbo, elbo_closed_form, elbo_with_gamma, gamma_for_eps, loss_and_grads, ElboBreakdown,
    LossAndGrads,
};
pub use optim::Adam;
pub use pretrain::{pretrain, reconstruction_error, PretrainReport};
pub use train::{learning_rate_at, EpochStats, TrainConfig, Trainer};

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::mixture::{self, GmmParams};
use crate::ndgrad::Tensor;
use crate::nets::{self, Activation, HeadKind, MlpParams, MlpSpec, ObsKind};

/// Rows evaluated per forward pass by the batch inference helpers.
const EVAL_CHUNK: usize = 1000;

/// Smallest mixture weight representable by the prior logits.
const MIN_WEIGHT: f64 = 1e-10;

/// Shape of a model to build from scratch.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub input_dim: usize,
    pub latent_dim: usize,
    pub clusters: usize,
    /// Encoder hidden widths; the decoder mirrors them.
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub obs: ObsKind,
    pub mc_samples: usize,
    pub prob_clamp: f64,
}

impl ModelConfig {
    pub fn new(input_dim: usize, latent_dim: usize, clusters: usize, hidden: Vec<usize>, obs: ObsKind) -> Self {
        ModelConfig {
            input_dim,
            latent_dim,
            clusters,
            hidden,
            activation: Activation::Relu,
            obs,
            mc_samples: 1,
            prob_clamp: nets::PROB_CLAMP,
        }
    }

    pub fn encoder_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.latent_dim);
        let mut spec = MlpSpec::new(sizes, self.activation, HeadKind::EncoderMeanLogVar);
        spec.prob_clamp = self.prob_clamp;
        spec
    }

    pub fn decoder_spec(&self) -> MlpSpec {
        let mut sizes = vec![self.latent_dim];
        sizes.extend(self.hidden.iter().rev());
        sizes.push(self.input_dim);
        let mut spec = MlpSpec::new(sizes, self.activation, self.obs.decoder_head());
        spec.prob_clamp = self.prob_clamp;
        spec
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VadeModel {
    pub encoder: MlpParams,
    pub decoder: MlpParams,
    /// `1×K` unconstrained logits; the mixture weights are their softmax.
    pub pi_logits: Tensor,
    /// `K×J` component means.
    pub mu: Tensor,
    /// `K×J` component log-variances.
    pub log_var: Tensor,
    pub obs: ObsKind,
    /// Latent samples per data point in the ELBO estimator and in `q(c|x)`.
    pub mc_samples: usize,
}

impl VadeModel {
    /// Fresh networks and a standard-normal, uniform-weight prior.
    pub fn new(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        if cfg.clusters == 0 {
            return Err(Error::Config("need at least one cluster".into()));
        }
        let encoder = nets::init_params(&cfg.encoder_spec(), seed)?;
        let decoder = nets::init_params(&cfg.decoder_spec(), seed.wrapping_add(1))?;
        let model = VadeModel {
            encoder,
            decoder,
            pi_logits: Tensor::zeros(1, cfg.clusters),
            mu: Tensor::zeros(cfg.clusters, cfg.latent_dim),
            log_var: Tensor::zeros(cfg.clusters, cfg.latent_dim),
            obs: cfg.obs,
            mc_samples: cfg.mc_samples,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn from_parts(
        encoder: MlpParams,
        decoder: MlpParams,
        prior: &GmmParams,
        obs: ObsKind,
        mc_samples: usize,
    ) -> Result<Self> {
        let mut model = VadeModel {
            encoder,
            decoder,
            pi_logits: Tensor::zeros(1, prior.k()),
            mu: prior.mu.clone(),
            log_var: prior.log_var.clone(),
            obs,
            mc_samples,
        };
        model.set_prior(prior, 0.0)?;
        model.validate()?;
        Ok(model)
    }

    pub fn validate(&self) -> Result<()> {
        let j = self.latent_dim();
        let enc = &self.encoder.spec;
        let dec = &self.decoder.spec;
        if enc.head != HeadKind::EncoderMeanLogVar {
            return Err(Error::Config("encoder must have a mean/log-variance head".into()));
        }
        if dec.head != self.obs.decoder_head() {
            return Err(Error::Config(format!("decoder head does not match {} observations", self.obs.name())));
        }
        if enc.output_dim() != j || dec.input_dim() != j || self.mu.cols() != j {
            return Err(Error::dim("model latent width", &[enc.output_dim(), dec.input_dim()], self.mu.shape()));
        }
        if enc.input_dim() != dec.output_dim() {
            return Err(Error::dim("model data width", &[enc.input_dim()], &[dec.output_dim()]));
        }
        let k = self.k();
        if self.pi_logits.shape() != [1, k] || self.log_var.shape() != self.mu.shape() {
            return Err(Error::dim("model prior", self.pi_logits.shape(), self.log_var.shape()));
        }
        if self.mc_samples == 0 {
            return Err(Error::Config("mc_samples must be at least 1".into()));
        }
        Ok(())
    }

    pub fn k(&self) -> usize {
        self.mu.rows()
    }

    pub fn latent_dim(&self) -> usize {
        self.encoder.spec.output_dim()
    }

    pub fn input_dim(&self) -> usize {
        self.encoder.spec.input_dim()
    }

    /// Mixture weights as a simplex.
    pub fn pi(&self) -> Vec<f64> {
        let logits = self.pi_logits.data();
        let lse = mixture::log_sum_exp(logits);
        logits.iter().map(|l| (l - lse).exp()).collect()
    }

    /// `ln π` computed directly from the logits.
    pub fn log_pi(&self) -> Vec<f64> {
        let logits = self.pi_logits.data();
        let lse = mixture::log_sum_exp(logits);
        logits.iter().map(|l| l - lse).collect()
    }

    pub fn prior(&self) -> GmmParams {
        GmmParams {
            pi: self.pi(),
            mu: self.mu.clone(),
            log_var: self.log_var.clone(),
        }
    }

    /// Replaces the prior; variances are floored at `variance_floor`.
    pub fn set_prior(&mut self, prior: &GmmParams, variance_floor: f64) -> Result<()> {
        prior.validate()?;
        if prior.dim() != self.latent_dim() {
            return Err(Error::dim("set_prior", prior.mu.shape(), &[self.latent_dim()]));
        }
        let min_lv = if variance_floor > 0.0 { variance_floor.ln() } else { f64::NEG_INFINITY };
        self.pi_logits = Tensor::row_vector(prior.pi.iter().map(|p| p.max(MIN_WEIGHT).ln()).collect());
        self.mu = prior.mu.clone();
        self.log_var = prior.log_var.map(|lv| lv.max(min_lv));
        Ok(())
    }

    /// Every trainable tensor: encoder, decoder, prior logits, means, log-variances.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut t = self.encoder.tensors();
        t.extend(self.decoder.tensors());
        t.extend([&self.pi_logits, &self.mu, &self.log_var]);
        t
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut t = self.encoder.tensors_mut();
        t.extend(self.decoder.tensors_mut());
        t.extend([&mut self.pi_logits, &mut self.mu, &mut self.log_var]);
        t
    }

    /// Human-readable names matching [`VadeModel::tensors`].
    pub fn tensor_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (net, p) in [("encoder", &self.encoder), ("decoder", &self.decoder)] {
            let n_trunk = p.trunk.len();
            for i in 0..n_trunk + p.heads.len() {
                let layer = if i < n_trunk { format!("{net}.layer{i}") } else { format!("{net}.head{}", i - n_trunk) };
                names.push(format!("{layer}.weight"));
                names.push(format!("{layer}.bias"));
            }
        }
        names.extend(["prior.pi_logits".into(), "prior.mu".into(), "prior.log_var".into()]);
        names
    }

    pub(crate) fn floor_prior_variance(&mut self, variance_floor: f64) {
        let min_lv = variance_floor.ln();
        for v in self.log_var.data_mut() {
            *v = v.max(min_lv);
        }
    }
}

/// Matrix of independent standard-normal draws.
pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::matrix(rows, cols, data).expect("positive dimensions")
}

/// `μ + exp(½ log σ²) ∘ ε`.
pub fn reparameterize(mu: &Tensor, log_var: &Tensor, eps: &Tensor) -> Result<Tensor> {
    if mu.shape() != log_var.shape() || mu.shape() != eps.shape() {
        return Err(Error::dim("reparameterize", mu.shape(), eps.shape()));
    }
    let data = mu
        .data()
        .iter()
        .zip(log_var.data())
        .zip(eps.data())
        .map(|((&m, &lv), &e)| m + (0.5 * lv).exp() * e)
        .collect();
    Tensor::new(mu.shape().to_vec(), data)
}

fn chunks(n: usize) -> impl Iterator<Item = Vec<usize>> {
    (0..n).step_by(EVAL_CHUNK).map(move |s| (s..(s + EVAL_CHUNK).min(n)).collect())
}

fn check_width(model: &VadeModel, x: &Tensor) -> Result<()> {
    if !x.is_matrix() || x.cols() != model.input_dim() {
        return Err(Error::dim("model input", x.shape(), &[model.input_dim()]));
    }
    Ok(())
}

/// `q(c|x)` for each row: the average of `p(c|z)` over `L` latent draws.
pub fn cluster_posterior<R: Rng + ?Sized>(model: &VadeModel, x: &Tensor, rng: &mut R) -> Result<Tensor> {
    check_width(model, x)?;
    let mut rows = Vec::with_capacity(x.rows());
    for idx in chunks(x.rows()) {
        let xb = x.select_rows(&idx);
        let eps: Vec<Tensor> = (0..model.mc_samples)
            .map(|_| standard_normal(idx.len(), model.latent_dim(), rng))
            .collect();
        let g = gamma_for_eps(model, &xb, &eps)?;
        for i in 0..g.rows() {
            rows.push(g.row(i).to_vec());
        }
    }
    Tensor::from_rows(&rows)
}

/// Index of the largest entry; ties resolve to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Cluster assignment per row of `x`.
pub fn predict<R: Rng + ?Sized>(model: &VadeModel, x: &Tensor, rng: &mut R) -> Result<Vec<usize>> {
    let gamma = cluster_posterior(model, x, rng)?;
    Ok((0..gamma.rows()).map(|i| argmax(gamma.row(i))).collect())
}

/// Mean ELBO over every row of `x`, one noise draw set per evaluation chunk.
pub fn mean_elbo<R: Rng + ?Sized>(model: &VadeModel, x: &Tensor, rng: &mut R) -> Result<ElboBreakdown> {
    check_width(model, x)?;
    if x.rows() == 0 {
        return Err(Error::Input("cannot evaluate the bound on an empty dataset".into()));
    }
    let mut total = ElboBreakdown::default();
    for idx in chunks(x.rows()) {
        let eps: Vec<Tensor> = (0..model.mc_samples)
            .map(|_| standard_normal(idx.len(), model.latent_dim(), rng))
            .collect();
        let b = elbo(model, &x.select_rows(&idx), &eps)?;
        total.accumulate(&b, idx.len() as f64 / x.rows() as f64);
    }
    Ok(total)
}

/// Encoder means `μ̃`, no sampling.
pub fn embed(model: &VadeModel, x: &Tensor) -> Result<Tensor> {
    check_width(model, x)?;
    let mut rows = Vec::with_capacity(x.rows());
    for idx in chunks(x.rows()) {
        let enc = nets::encode(&model.encoder, &x.select_rows(&idx))?;
        for i in 0..enc.mu_tilde.rows() {
            rows.push(enc.mu_tilde.row(i).to_vec());
        }
    }
    Tensor::from_rows(&rows)
}

/// Samples drawn from one mixture component and pushed through the decoder.
#[derive(Clone, Debug)]
pub struct Generated {
    /// `n×J` latent draws.
    pub latents: Tensor,
    /// `n×D` decoder means.
    pub expectations: Tensor,
    /// `n×D` observations drawn from `p(x|z)`.
    pub samples: Tensor,
}

pub fn generate<R: Rng + ?Sized>(model: &VadeModel, cluster: usize, n: usize, rng: &mut R) -> Result<Generated> {
    if cluster >= model.k() {
        return Err(Error::Input(format!("cluster {cluster} out of range for K={}", model.k())));
    }
    if n == 0 {
        return Err(Error::Input("sample count must be positive".into()));
    }
    let prior = model.prior();
    let latents = (0..n)
        .map(|_| mixture::sample_prior(&prior, rng, Some(cluster)).map(|(_, z)| z))
        .collect::<Result<Vec<_>>>()?;
    let latents = Tensor::from_rows(&latents)?;
    let decoded = nets::decode(&model.decoder, &latents, model.obs)?;
    let expectations = decoded.mean().clone();
    let samples = match &decoded {
        nets::DecoderOutput::Bernoulli { mu_x } => {
            let data = mu_x.data().iter().map(|&p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }).collect();
            Tensor::new(mu_x.shape().to_vec(), data)?
        }
        nets::DecoderOutput::Gaussian { mu_x, log_var_x } => {
            let eps = standard_normal(n, model.input_dim(), rng);
            reparameterize(mu_x, log_var_x, &eps)?
        }
    };
    Ok(Generated {
        latents,
        expectations,
        samples,
    })
}
