//! Autoencoder pretraining of the networks followed by a mixture fit on the codes.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::datio::LabeledDataset;
use crate::error::{Error, Result};
use crate::mixture::{self, em_fit, EmConfig, EmFit};
use crate::ndgrad::{Tape, Tensor, Var};
use crate::nets::{self, affine, Activation, BoundMlp, MlpParams, ObsKind};

use super::train::{learning_rate_at, TrainConfig};
use super::{argmax, embed, VadeModel};

#[derive(Clone, Debug)]
pub struct PretrainReport {
    /// Mean squared reconstruction error through the encoder mean, before and after.
    pub recon_before: f64,
    pub recon_after: f64,
    /// Whether the layer-by-layer stage ran (it needs mirrored layer widths).
    pub layerwise: bool,
    /// Mixture fit on the encoder means that initialized the prior.
    pub em: EmFit,
    /// Most probable component of each code under that fit.
    pub code_assignments: Vec<usize>,
    pub warnings: Vec<String>,
}

/// Mean squared error of `decode(μ̃(x))` against `x`, averaged over entries.
pub fn reconstruction_error(model: &VadeModel, x: &Tensor) -> Result<f64> {
    let codes = embed(model, x)?;
    let decoded = nets::decode(&model.decoder, &codes, model.obs)?;
    let sq: f64 = decoded.mean().data().iter().zip(x.data()).map(|(a, b)| (a - b) * (a - b)).sum();
    Ok(sq / x.numel() as f64)
}

/// Output nonlinearity of one layer of the reconstruction chain.
#[derive(Clone, Copy)]
enum Out {
    Identity,
    Hidden(Activation),
}

impl Out {
    fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Out::Identity => Ok(x),
            Out::Hidden(a) => a.apply(tape, x),
        }
    }
}

/// Minimizes mean squared reconstruction of `input` over `params`.
fn fit_autoencoder<R, F>(params: &mut [Tensor], input: &Tensor, cfg: &TrainConfig, rng: &mut R, forward: F) -> Result<()>
where
    R: Rng + ?Sized,
    F: Fn(&mut Tape, &[Var], Var) -> Result<Var>,
{
    let mut adam = cfg.adam();
    let mut order: Vec<usize> = (0..input.rows()).collect();
    for epoch in 0..cfg.pretrain_epochs {
        let lr = learning_rate_at(cfg, epoch);
        order.shuffle(rng);
        for idx in order.chunks(cfg.batch_size) {
            let mut tape = Tape::new();
            let vars: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
            let xb = tape.constant(input.select_rows(idx));
            let loss = (|| {
                let recon = forward(&mut tape, &vars, xb)?;
                let diff = tape.sub(recon, xb)?;
                let sq = tape.square(diff)?;
                tape.mean(sq)
            })()
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::Divergence { term: "pretraining reconstruction".into() },
                other => other,
            })?;
            let grads = tape.backward(loss)?;
            let grads: Vec<Tensor> = vars.iter().map(|&v| grads.wrt(&tape, v)).collect();
            adam.step(params.iter_mut().collect(), &grads, lr)?;
        }
    }
    Ok(())
}

fn mirrored(model: &VadeModel) -> bool {
    let mut enc = model.encoder.spec.layer_sizes.clone();
    enc.reverse();
    enc == model.decoder.spec.layer_sizes
}

/// Layer `i` of a network viewed as a chain ending in its first head.
fn chain_layer(p: &MlpParams, i: usize) -> &nets::Linear {
    if i < p.trunk.len() {
        &p.trunk[i]
    } else {
        &p.heads[0]
    }
}

fn chain_layer_mut(p: &mut MlpParams, i: usize) -> &mut nets::Linear {
    if i < p.trunk.len() {
        &mut p.trunk[i]
    } else {
        &mut p.heads[0]
    }
}

fn layerwise<R: Rng + ?Sized>(model: &mut VadeModel, x: &Tensor, cfg: &TrainConfig, rng: &mut R) -> Result<()> {
    let n = model.encoder.trunk.len() + 1;
    let act = model.encoder.spec.hidden_activation;
    let dec_act = model.decoder.spec.hidden_activation;
    let final_out = match model.obs {
        ObsKind::Bernoulli => Out::Hidden(Activation::Sigmoid),
        ObsKind::Gaussian => Out::Identity,
    };
    let mut h = x.clone();
    for i in 0..n {
        let enc_out = if i + 1 < n { Out::Hidden(act) } else { Out::Identity };
        let d = n - 1 - i;
        let dec_out = if d + 1 < n { Out::Hidden(dec_act) } else { final_out };
        let (e, dl) = (chain_layer(&model.encoder, i), chain_layer(&model.decoder, d));
        let mut params = [e.weight.clone(), e.bias.clone(), dl.weight.clone(), dl.bias.clone()];
        fit_autoencoder(&mut params, &h, cfg, rng, |tape, v, xb| {
            let a = affine(tape, xb, (v[0], v[1]))?;
            let code = enc_out.apply(tape, a)?;
            let r = affine(tape, code, (v[2], v[3]))?;
            dec_out.apply(tape, r)
        })?;
        let [ew, eb, dw, db] = params;
        *chain_layer_mut(&mut model.encoder, i) = nets::Linear { weight: ew, bias: eb };
        *chain_layer_mut(&mut model.decoder, d) = nets::Linear { weight: dw, bias: db };

        // Codes of this layer feed the next stage.
        let mut tape = Tape::new();
        let layer = chain_layer(&model.encoder, i);
        let w = tape.constant(layer.weight.clone());
        let b = tape.constant(layer.bias.clone());
        let hv = tape.constant(h);
        let a = affine(&mut tape, hv, (w, b))?;
        let out = enc_out.apply(&mut tape, a)?;
        h = tape.value(out).clone();
    }
    Ok(())
}

fn bound_from(vars: &[Var], trunk_len: usize) -> BoundMlp {
    let pairs: Vec<(Var, Var)> = vars.chunks(2).map(|c| (c[0], c[1])).collect();
    BoundMlp {
        trunk: pairs[..trunk_len].to_vec(),
        heads: pairs[trunk_len..].to_vec(),
    }
}

fn end_to_end<R: Rng + ?Sized>(model: &mut VadeModel, x: &Tensor, cfg: &TrainConfig, rng: &mut R) -> Result<()> {
    let n_enc = model.encoder.tensors().len();
    let mut params: Vec<Tensor> = model.encoder.tensors().into_iter().chain(model.decoder.tensors()).cloned().collect();
    {
        let (enc, dec) = (&model.encoder, &model.decoder);
        fit_autoencoder(&mut params, x, cfg, rng, |tape, v, xb| {
            let eb = bound_from(&v[..n_enc], enc.trunk.len());
            let db = bound_from(&v[n_enc..], dec.trunk.len());
            let code = enc.forward(tape, &eb, xb)?.mean;
            Ok(dec.forward(tape, &db, code)?.mean)
        })?;
    }
    for (dst, src) in model.encoder.tensors_mut().into_iter().chain(model.decoder.tensors_mut()).zip(params) {
        *dst = src;
    }
    Ok(())
}

/// Initializes the networks by reconstruction training and the prior by a
/// mixture fit on the encoder means.
///
/// With `pretrain_epochs > 0` every mirrored encoder/decoder layer pair is
/// trained as a shallow autoencoder on the codes of the layers below it,
/// then the whole stack is trained end to end on `decode(μ̃(x)) ≈ x` for the
/// same number of epochs. The encoder's log-variance head is left as is.
pub fn pretrain<R: Rng + ?Sized>(model: &mut VadeModel, data: &LabeledDataset, cfg: &TrainConfig, rng: &mut R) -> Result<PretrainReport> {
    cfg.validate()?;
    let x = &data.features;
    if x.cols() != model.input_dim() {
        return Err(Error::dim("pretrain", x.shape(), &[model.input_dim()]));
    }
    if x.rows() < model.k() {
        return Err(Error::Input(format!("{} samples cannot seed {} clusters", x.rows(), model.k())));
    }
    let recon_before = reconstruction_error(model, x)?;
    let mut ran_layerwise = false;
    if cfg.pretrain_epochs > 0 {
        if mirrored(model) {
            layerwise(model, x, cfg, rng)?;
            ran_layerwise = true;
        }
        end_to_end(model, x, cfg, rng)?;
    }
    let recon_after = reconstruction_error(model, x)?;

    let codes = embed(model, x)?;
    let em_cfg = EmConfig {
        variance_floor: cfg.variance_floor,
        inits: cfg.gmm_inits,
        ..EmConfig::new(model.k(), cfg.seed)
    };
    let em = em_fit(&codes, &em_cfg)?;
    model.set_prior(&em.params, cfg.variance_floor)?;
    let code_assignments = (0..codes.rows())
        .map(|i| mixture::cluster_posterior_z(codes.row(i), &em.params).map(|p| argmax(&p)))
        .collect::<Result<Vec<_>>>()?;
    let warnings = em.warning.iter().cloned().collect();
    Ok(PretrainReport {
        recon_before,
        recon_after,
        layerwise: ran_layerwise,
        em,
        code_assignments,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::datio::{synth_mixture, SynthConfig, Warp};
    use crate::metrics::clustering_accuracy;
    use crate::model::ModelConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn blobs() -> LabeledDataset {
        let cfg = SynthConfig {
            warp: Warp::Linear,
            ..SynthConfig::new(3, 2, 8, 150, 4)
        };
        synth_mixture(&cfg).unwrap()
    }

    fn model_for(ds: &LabeledDataset) -> VadeModel {
        let cfg = ModelConfig::new(ds.dim(), 2, 3, vec![16], ObsKind::Gaussian);
        VadeModel::new(&cfg, 3).unwrap()
    }

    #[test]
    fn zero_epochs_only_fits_the_prior() {
        let ds = blobs();
        let mut m = model_for(&ds);
        let before = m.clone();
        let cfg = TrainConfig { pretrain_epochs: 0, ..TrainConfig::default() };
        let r = pretrain(&mut m, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(m.encoder, before.encoder);
        assert_eq!(m.decoder, before.decoder);
        assert_eq!(r.recon_before, r.recon_after);
        assert_eq!(m.mu, r.em.params.mu);
    }

    #[test]
    fn pretraining_lowers_held_out_error_and_separates_clusters() {
        let ds = blobs();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut idx: Vec<usize> = (0..ds.len()).collect();
        idx.shuffle(&mut rng);
        let (held, train) = idx.split_at(ds.len() / 10);
        let (held, train) = (ds.subset(held), ds.subset(train));

        let mut m = model_for(&ds);
        let log_var_head = m.encoder.heads[1].clone();
        let before = reconstruction_error(&m, &held.features).unwrap();
        let cfg = TrainConfig { pretrain_epochs: 20, batch_size: 50, ..TrainConfig::default() };
        let r = pretrain(&mut m, &train, &cfg, &mut rng).unwrap();
        let after = reconstruction_error(&m, &held.features).unwrap();
        assert!(r.layerwise);
        assert!(after <= before, "{before} -> {after}");
        assert_eq!(m.encoder.heads[1], log_var_head);
        let acc = clustering_accuracy(&r.code_assignments, train.labels.as_ref().unwrap()).unwrap();
        assert!(acc >= 0.9, "acc {acc}");
    }

    #[test]
    fn unmirrored_shapes_skip_layerwise() {
        let ds = blobs();
        let mut m = model_for(&ds);
        let spec = nets::MlpSpec::new(vec![2, 10, 8], Activation::Relu, nets::HeadKind::GaussianMeanLogVar);
        m.decoder = nets::init_params(&spec, 1).unwrap();
        let cfg = TrainConfig { pretrain_epochs: 1, ..TrainConfig::default() };
        let r = pretrain(&mut m, &ds, &cfg, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert!(!r.layerwise);
    }
}
