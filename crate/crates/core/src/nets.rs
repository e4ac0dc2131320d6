//! Fully-connected encoder and decoder networks.
//!
//! A network is a trunk of hidden affine layers followed by one output layer,
//! or two parallel output layers (mean and log-variance) that share the last
//! hidden activation.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::{Tape, Tensor, Var};

/// Bound applied to every emitted log-variance.
pub const LOG_VAR_CLAMP: f64 = 10.0;

/// Default clamp keeping Bernoulli means inside `(0, 1)`.
pub const PROB_CLAMP: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "tanh" => Some(Activation::Tanh),
            "sigmoid" => Some(Activation::Sigmoid),
            _ => None,
        }
    }

    pub(crate) fn apply(self, tape: &mut Tape, x: Var) -> Result<Var> {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Sigmoid => tape.sigmoid(x),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    /// Logistic output clamped into `(0, 1)`.
    BernoulliMean,
    /// Identity mean plus clamped log-variance.
    GaussianMeanLogVar,
    /// Identity mean plus clamped log-variance of `q(z|x)`.
    EncoderMeanLogVar,
    /// Identity output.
    Plain,
}

impl HeadKind {
    pub fn outputs(self) -> usize {
        match self {
            HeadKind::GaussianMeanLogVar | HeadKind::EncoderMeanLogVar => 2,
            HeadKind::BernoulliMean | HeadKind::Plain => 1,
        }
    }
}

/// Likelihood family of the observations.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ObsKind {
    Bernoulli,
    Gaussian,
}

impl ObsKind {
    pub fn name(self) -> &'static str {
        match self {
            ObsKind::Bernoulli => "bernoulli",
            ObsKind::Gaussian => "gaussian",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        match s {
            "bernoulli" => Some(ObsKind::Bernoulli),
            "gaussian" => Some(ObsKind::Gaussian),
            _ => None,
        }
    }

    pub fn decoder_head(self) -> HeadKind {
        match self {
            ObsKind::Bernoulli => HeadKind::BernoulliMean,
            ObsKind::Gaussian => HeadKind::GaussianMeanLogVar,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpSpec {
    /// Input width, hidden widths, output width.
    pub layer_sizes: Vec<usize>,
    pub hidden_activation: Activation,
    pub head: HeadKind,
    pub prob_clamp: f64,
}

impl MlpSpec {
    pub fn new(layer_sizes: Vec<usize>, hidden_activation: Activation, head: HeadKind) -> Self {
        MlpSpec {
            layer_sizes,
            hidden_activation,
            head,
            prob_clamp: PROB_CLAMP,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.layer_sizes.len() < 2 {
            return Err(Error::Config(format!(
                "a network needs input and output sizes, got {:?}",
                self.layer_sizes
            )));
        }
        if self.layer_sizes.contains(&0) {
            return Err(Error::Config(format!("layer sizes must be positive: {:?}", self.layer_sizes)));
        }
        if !(self.prob_clamp > 0.0 && self.prob_clamp < 0.5) {
            return Err(Error::Config(format!("probability clamp {} not in (0, 0.5)", self.prob_clamp)));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_sizes.last().expect("validated spec")
    }
}

/// Affine layer `x W + b` with `W` stored fan-in × fan-out.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    fn glorot(fan_in: usize, fan_out: usize, rng: &mut ChaCha8Rng) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..=bound)).collect();
        Linear {
            weight: Tensor::matrix(fan_in, fan_out, data).expect("layer shape"),
            bias: Tensor::zeros(1, fan_out),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MlpParams {
    pub spec: MlpSpec,
    /// Hidden layers, each followed by the hidden activation.
    pub trunk: Vec<Linear>,
    /// One output layer, or mean and log-variance layers.
    pub heads: Vec<Linear>,
}

/// Weights uniform in `±√(6 / (fan_in + fan_out))`, biases zero.
pub fn init_params(spec: &MlpSpec, seed: u64) -> Result<MlpParams> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let sizes = &spec.layer_sizes;
    let n = sizes.len();
    let trunk = sizes[..n - 1]
        .windows(2)
        .map(|w| Linear::glorot(w[0], w[1], &mut rng))
        .collect();
    let heads = (0..spec.head.outputs())
        .map(|_| Linear::glorot(sizes[n - 2], sizes[n - 1], &mut rng))
        .collect();
    Ok(MlpParams {
        spec: spec.clone(),
        trunk,
        heads,
    })
}

/// Tape handles for every weight and bias of a network.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    pub trunk: Vec<(Var, Var)>,
    pub heads: Vec<(Var, Var)>,
}

impl BoundMlp {
    /// Handles in the same order as [`MlpParams::tensors`].
    pub fn vars(&self) -> Vec<Var> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }
}

/// Outputs of a forward pass on the tape.
#[derive(Clone, Copy, Debug)]
pub struct HeadVars {
    pub mean: Var,
    pub log_var: Option<Var>,
}

pub(crate) fn affine(tape: &mut Tape, x: Var, (w, b): (Var, Var)) -> Result<Var> {
    let h = tape.matmul(x, w)?;
    tape.add_row(h, b)
}

impl MlpParams {
    /// All parameter tensors: trunk weights and biases, then head weights and biases.
    pub fn tensors(&self) -> Vec<&Tensor> {
        self.trunk
            .iter()
            .chain(&self.heads)
            .flat_map(|l| [&l.weight, &l.bias])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.trunk
            .iter_mut()
            .chain(self.heads.iter_mut())
            .flat_map(|l| [&mut l.weight, &mut l.bias])
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Records every parameter on the tape, trainable or constant.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let mut leaf = |t: &Tensor| {
            if trainable {
                tape.param(t.clone())
            } else {
                tape.constant(t.clone())
            }
        };
        let trunk = self.trunk.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        let heads = self.heads.iter().map(|l| (leaf(&l.weight), leaf(&l.bias))).collect();
        BoundMlp { trunk, heads }
    }

    /// Hidden representation after the trunk.
    pub fn forward_trunk(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<Var> {
        let width = tape.value(x).cols();
        if width != self.spec.input_dim() {
            return Err(Error::dim("mlp input", &[width], &[self.spec.input_dim()]));
        }
        let mut h = x;
        for &layer in &bound.trunk {
            let a = affine(tape, h, layer)?;
            h = self.spec.hidden_activation.apply(tape, a)?;
        }
        Ok(h)
    }

    /// Full forward pass including the output head(s).
    pub fn forward(&self, tape: &mut Tape, bound: &BoundMlp, x: Var) -> Result<HeadVars> {
        let h = self.forward_trunk(tape, bound, x)?;
        let raw = affine(tape, h, bound.heads[0])?;
        let mean = match self.spec.head {
            HeadKind::BernoulliMean => {
                let p = tape.sigmoid(raw)?;
                let c = self.spec.prob_clamp;
                tape.clamp(p, c, 1.0 - c)?
            }
            _ => raw,
        };
        let log_var = match self.spec.head.outputs() {
            2 => {
                let lv = affine(tape, h, bound.heads[1])?;
                Some(tape.clamp(lv, -LOG_VAR_CLAMP, LOG_VAR_CLAMP)?)
            }
            _ => None,
        };
        Ok(HeadVars { mean, log_var })
    }

    /// Forward pass on constants only; returns `(mean, log_var)`.
    pub fn evaluate(&self, x: &Tensor) -> Result<(Tensor, Option<Tensor>)> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let xv = tape.constant(x.clone());
        let out = self.forward(&mut tape, &bound, xv)?;
        let mean = tape.value(out.mean).clone();
        let log_var = out.log_var.map(|v| tape.value(v).clone());
        Ok((mean, log_var))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderOutput {
    pub mu_tilde: Tensor,
    pub log_var_tilde: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DecoderOutput {
    Bernoulli { mu_x: Tensor },
    Gaussian { mu_x: Tensor, log_var_x: Tensor },
}

impl DecoderOutput {
    pub fn mean(&self) -> &Tensor {
        match self {
            DecoderOutput::Bernoulli { mu_x } | DecoderOutput::Gaussian { mu_x, .. } => mu_x,
        }
    }
}

/// Mean and log-variance of `q(z|x)` for each row of `x`.
pub fn encode(params: &MlpParams, x: &Tensor) -> Result<EncoderOutput> {
    if params.spec.head.outputs() != 2 {
        return Err(Error::Config("encoder needs a mean/log-variance head".into()));
    }
    let (mu_tilde, log_var) = params.evaluate(x)?;
    Ok(EncoderOutput {
        mu_tilde,
        log_var_tilde: log_var.expect("two-output head"),
    })
}

/// Likelihood parameters of `p(x|z)` for each row of `z`.
pub fn decode(params: &MlpParams, z: &Tensor, kind: ObsKind) -> Result<DecoderOutput> {
    if params.spec.head != kind.decoder_head() {
        return Err(Error::Config(format!(
            "decoder head {:?} cannot model {} observations",
            params.spec.head,
            kind.name()
        )));
    }
    let (mu_x, log_var) = params.evaluate(z)?;
    Ok(match kind {
        ObsKind::Bernoulli => DecoderOutput::Bernoulli { mu_x },
        ObsKind::Gaussian => DecoderOutput::Gaussian {
            mu_x,
            log_var_x: log_var.expect("two-output head"),
        },
    })
}
