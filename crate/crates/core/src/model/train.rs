use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::ndgrad::Tensor;

use super::elbo::{gamma_for_eps, loss_and_grads, ElboBreakdown};
use super::optim::Adam;
use super::{standard_normal, VadeModel};

/// Optimization settings. Defaults follow the reference setup: batch 100,
/// Adam at 0.002 decayed by 0.9 every 10 epochs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub decay_rate: f64,
    pub decay_every: usize,
    pub batch_size: usize,
    pub epochs: usize,
    /// Epochs per pretraining stage; 0 skips network pretraining.
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Initializations of the mixture fit on the pretrained codes.
    pub gmm_inits: usize,
    pub variance_floor: f64,
    pub prob_clamp: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_epsilon: f64,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad("learning_rate must be positive");
        }
        if !(self.decay_rate > 0.0 && self.decay_rate <= 1.0) {
            return bad("decay_rate must lie in (0, 1]");
        }
        if self.decay_every == 0 {
            return bad("decay_every must be at least 1");
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1");
        }
        if self.gmm_inits == 0 {
            return bad("gmm_inits must be at least 1");
        }
        if !(self.variance_floor > 0.0) {
            return bad("variance_floor must be positive");
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return bad("prob_clamp must lie in (0, 0.5)");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return bad("adam betas must lie in [0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("adam_epsilon must be positive");
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.adam_beta1, self.adam_beta2, self.adam_epsilon)
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.002,
            decay_rate: 0.9,
            decay_every: 10,
            batch_size: 100,
            epochs: 300,
            pretrain_epochs: 10,
            seed: 0,
            gmm_inits: 10,
            variance_floor: crate::mixture::VARIANCE_FLOOR,
            prob_clamp: crate::nets::PROB_CLAMP,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_epsilon: 1e-8,
        }
    }
}

/// Step size for a zero-based epoch: `lr · decay^⌊epoch / every⌋`.
pub fn learning_rate_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.learning_rate * cfg.decay_rate.powi((epoch / cfg.decay_every) as i32)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    /// Sample-weighted mean of the minibatch bounds seen during the epoch.
    pub elbo: ElboBreakdown,
}

/// Owns a model and its optimizer state across epochs.
#[derive(Clone, Debug)]
pub struct Trainer {
    model: VadeModel,
    adam: Adam,
    cfg: TrainConfig,
    last_good: Option<EpochStats>,
}

impl Trainer {
    pub fn new(model: VadeModel, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        model.validate()?;
        Ok(Trainer {
            adam: cfg.adam(),
            model,
            cfg,
            last_good: None,
        })
    }

    pub fn model(&self) -> &VadeModel {
        &self.model
    }

    pub fn into_model(self) -> VadeModel {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Statistics of the most recent epoch that completed.
    pub fn last_good(&self) -> Option<&EpochStats> {
        self.last_good.as_ref()
    }

    /// One pass over shuffled minibatches of `x`.
    ///
    /// On divergence the offending step is not applied and the error names
    /// the non-finite term; [`Trainer::last_good`] still holds the previous
    /// epoch's statistics.
    pub fn train_epoch<R: Rng + ?Sized>(&mut self, x: &Tensor, epoch: usize, rng: &mut R) -> Result<EpochStats> {
        if x.rows() == 0 {
            return Err(Error::Input("cannot train on an empty dataset".into()));
        }
        let lr = learning_rate_at(&self.cfg, epoch);
        let mut order: Vec<usize> = (0..x.rows()).collect();
        order.shuffle(rng);
        let mut mean = ElboBreakdown::default();
        let n = x.rows() as f64;
        for idx in order.chunks(self.cfg.batch_size) {
            let xb = x.select_rows(idx);
            let eps: Vec<Tensor> = (0..self.model.mc_samples)
                .map(|_| standard_normal(idx.len(), self.model.latent_dim(), rng))
                .collect();
            let gamma = gamma_for_eps(&self.model, &xb, &eps)?;
            let lg = loss_and_grads(&self.model, &xb, &eps, &gamma)?;
            self.adam.step(self.model.tensors_mut(), &lg.grads, lr)?;
            self.model.floor_prior_variance(self.cfg.variance_floor);
            mean.accumulate(&lg.elbo, idx.len() as f64 / n);
        }
        let stats = EpochStats { epoch, lr, elbo: mean };
        self.last_good = Some(stats);
        Ok(stats)
    }
}

#[cfg(test)]
mod tests {
    use super::super::testutil::*;
    use super::*;
    use crate::nets::ObsKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        assert_eq!(learning_rate_at(&cfg, 0), 0.002);
        assert!((learning_rate_at(&cfg, 9) - 0.002).abs() < 1e-18);
        assert!((learning_rate_at(&cfg, 10) - 0.0018).abs() < 1e-15);
        assert!((learning_rate_at(&cfg, 25) - 0.00162).abs() < 1e-15);
    }

    #[test]
    fn config_validation() {
        let ok = TrainConfig::default();
        assert!(ok.validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..ok.clone() },
            TrainConfig { decay_rate: 1.5, ..ok.clone() },
            TrainConfig { batch_size: 0, ..ok.clone() },
            TrainConfig { decay_every: 0, ..ok.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
    }

    fn run(seed: u64, epochs: usize) -> (Vec<EpochStats>, VadeModel) {
        let model = tiny_model(6, 2, 2, ObsKind::Bernoulli, 5);
        let x = tiny_batch(1, 6, ObsKind::Bernoulli, 6);
        let cfg = TrainConfig {
            batch_size: 1,
            seed,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model, cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let stats = (0..epochs).map(|e| t.train_epoch(&x, e, &mut rng).unwrap()).collect();
        (stats, t.into_model())
    }

    #[test]
    fn single_sample_bound_improves() {
        let (stats, _) = run(1, 200);
        let head: f64 = stats[..20].iter().map(|s| s.elbo.total).sum::<f64>() / 20.0;
        let tail: f64 = stats[180..].iter().map(|s| s.elbo.total).sum::<f64>() / 20.0;
        assert!(tail > head, "{head} -> {tail}");
    }

    #[test]
    fn training_is_deterministic() {
        let (a, ma) = run(3, 15);
        let (b, mb) = run(3, 15);
        assert_eq!(a, b);
        assert_eq!(ma, mb);
    }

    #[test]
    fn prior_stays_valid() {
        let (_, m) = run(2, 30);
        let pi = m.pi();
        assert!((pi.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        assert!(pi.iter().all(|&p| p >= 0.0));
        assert!(m.log_var.data().iter().all(|&lv| lv >= 1e-6f64.ln()));
    }
}
