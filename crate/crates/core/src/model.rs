//! The conditional noise predictor and the latent codec.
//!
//! The denoiser is a dense network whose input is the concatenation of the
//! noisy latent, a sinusoidal embedding of `t / T`, and a class embedding
//! (one-hot or a learned table). It outputs a noise estimate with the latent
//! width.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::array::{dot, DenseArray};
use crate::error::{Error, Result};
use crate::nn::{param_count, Activation, Mlp, Tape};

/// Anything that maps `(z_t, t, class)` to a noise estimate.
pub trait NoisePredictor {
    fn latent_dim(&self) -> usize;
    fn predict_noise(&self, z_t: &[f64], t: usize, class: usize) -> Result<Vec<f64>>;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassEmbeddingMode {
    OneHot,
    Learned { width: usize },
}

/// A validated class label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Condition {
    class: usize,
    num_classes: usize,
}

impl Condition {
    pub fn new(class: usize, num_classes: usize) -> Result<Self> {
        if class >= num_classes {
            return Err(Error::invalid(format!(
                "class id {class} out of range for {num_classes} classes"
            )));
        }
        Ok(Self { class, num_classes })
    }

    pub fn class(&self) -> usize {
        self.class
    }

    pub fn one_hot(&self) -> Vec<f64> {
        let mut v = vec![0.0; self.num_classes];
        v[self.class] = 1.0;
        v
    }
}

/// Sinusoidal features of `t / total_steps`: `width / 2` sines followed by as
/// many cosines, with angular frequencies spaced geometrically from 1 to 1000.
pub fn time_embedding(t: usize, total_steps: usize, width: usize) -> Vec<f64> {
    let half = width / 2;
    let s = t as f64 / total_steps as f64;
    let freq = |k: usize| {
        if half > 1 {
            1000f64.powf(k as f64 / (half - 1) as f64)
        } else {
            1.0
        }
    };
    let mut out = Vec::with_capacity(width);
    out.extend((0..half).map(|k| (freq(k) * s).sin()));
    out.extend((0..half).map(|k| (freq(k) * s).cos()));
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenoiserConfig {
    pub latent_dim: usize,
    pub num_classes: usize,
    /// Training horizon `T`; timesteps must lie in `[0, T)`.
    pub total_steps: usize,
    pub time_dim: usize,
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub class_embedding: ClassEmbeddingMode,
}

impl DenoiserConfig {
    pub fn new(latent_dim: usize, num_classes: usize, total_steps: usize) -> Self {
        Self {
            latent_dim,
            num_classes,
            total_steps,
            time_dim: 16,
            hidden: vec![128, 128],
            activation: Activation::Tanh,
            class_embedding: ClassEmbeddingMode::OneHot,
        }
    }

    pub fn class_dim(&self) -> usize {
        match self.class_embedding {
            ClassEmbeddingMode::OneHot => self.num_classes,
            ClassEmbeddingMode::Learned { width } => width,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.latent_dim + self.time_dim + self.class_dim()
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(&self.hidden);
        dims.push(self.latent_dim);
        dims
    }

    fn table_len(&self) -> usize {
        match self.class_embedding {
            ClassEmbeddingMode::OneHot => 0,
            ClassEmbeddingMode::Learned { width } => self.num_classes * width,
        }
    }

    pub fn num_params(&self) -> usize {
        param_count(&self.layer_dims()) + self.table_len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 {
            return Err(Error::invalid("latent dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(Error::invalid("need at least one class"));
        }
        if self.total_steps == 0 {
            return Err(Error::invalid("total steps must be positive"));
        }
        if self.time_dim < 2 || !self.time_dim.is_multiple_of(2) {
            return Err(Error::invalid(format!(
                "time embedding width must be even and >= 2, got {}",
                self.time_dim
            )));
        }
        if self.hidden.contains(&0) {
            return Err(Error::invalid("hidden widths must be positive"));
        }
        if let ClassEmbeddingMode::Learned { width: 0 } = self.class_embedding {
            return Err(Error::invalid(
                "learned class embedding width must be positive",
            ));
        }
        Ok(())
    }
}

/// The conditional noise predictor.
///
/// Parameters are addressed as one flat vector: the network parameters
/// followed by the learned class table (if any).
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: DenoiserConfig,
    net: Mlp,
    class_table: Vec<f64>,
}

/// Forward-pass record for [`DenoiserModel::backward_tape`].
#[derive(Debug, Clone)]
pub struct DenoiserTape {
    class: usize,
    tape: Tape,
}

impl DenoiserTape {
    pub fn output(&self) -> &[f64] {
        self.tape.output()
    }
}

impl DenoiserModel {
    /// Glorot-uniform hidden layers, zero-initialised output layer, and a
    /// standard-normal learned class table when one is configured.
    pub fn new<R: Rng + ?Sized>(config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let net = Mlp::new(config.layer_dims(), config.activation, true, rng)?;
        let class_table = (0..config.table_len())
            .map(|_| StandardNormal.sample(rng))
            .collect();
        Ok(Self {
            config,
            net,
            class_table,
        })
    }

    pub fn from_params(config: DenoiserConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        if params.len() != config.num_params() {
            return Err(Error::dim_mismatch(
                "denoiser parameters",
                config.num_params(),
                params.len(),
            ));
        }
        let n_net = param_count(&config.layer_dims());
        let mut params = params;
        let class_table = params.split_off(n_net);
        let net = Mlp::from_params(config.layer_dims(), config.activation, params)?;
        Ok(Self {
            config,
            net,
            class_table,
        })
    }

    pub fn config(&self) -> &DenoiserConfig {
        &self.config
    }

    pub fn network(&self) -> &Mlp {
        &self.net
    }

    pub fn network_mut(&mut self) -> &mut Mlp {
        &mut self.net
    }

    pub fn num_params(&self) -> usize {
        self.net.params().len() + self.class_table.len()
    }

    pub fn params(&self) -> Vec<f64> {
        let mut v = self.net.params().to_vec();
        v.extend_from_slice(&self.class_table);
        v
    }

    pub fn param(&self, i: usize) -> f64 {
        let n = self.net.params().len();
        if i < n {
            self.net.params()[i]
        } else {
            self.class_table[i - n]
        }
    }

    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        let n = self.net.params().len();
        if i < n {
            &mut self.net.params_mut()[i]
        } else {
            &mut self.class_table[i - n]
        }
    }

    /// Mutable views over the flat parameter vector, in order.
    pub fn param_slices_mut(&mut self) -> [&mut [f64]; 2] {
        [self.net.params_mut(), &mut self.class_table]
    }

    fn build_input(&self, z_t: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        let cfg = &self.config;
        if z_t.len() != cfg.latent_dim {
            return Err(Error::dim_mismatch("z_t latent", cfg.latent_dim, z_t.len()));
        }
        if t >= cfg.total_steps {
            return Err(Error::invalid(format!(
                "timestep {t} out of range [0, {})",
                cfg.total_steps
            )));
        }
        let cond = Condition::new(class, cfg.num_classes)?;
        let mut input = Vec::with_capacity(cfg.input_dim());
        input.extend_from_slice(z_t);
        input.extend(time_embedding(t, cfg.total_steps, cfg.time_dim));
        match cfg.class_embedding {
            ClassEmbeddingMode::OneHot => input.extend(cond.one_hot()),
            ClassEmbeddingMode::Learned { width } => {
                input.extend_from_slice(&self.class_table[class * width..(class + 1) * width])
            }
        }
        Ok(input)
    }

    pub fn forward_tape(&self, z_t: &[f64], t: usize, class: usize) -> Result<DenoiserTape> {
        let input = self.build_input(z_t, t, class)?;
        Ok(DenoiserTape {
            class,
            tape: self.net.forward_tape(&input)?,
        })
    }

    /// Accumulates parameter gradients into `grad` (length
    /// [`num_params`](Self::num_params)) and returns the gradient for `z_t`.
    pub fn backward_tape(
        &self,
        tape: &DenoiserTape,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        if grad.len() != self.num_params() {
            return Err(Error::dim_mismatch(
                "gradient buffer",
                self.num_params(),
                grad.len(),
            ));
        }
        let n_net = self.net.params().len();
        let (net_grad, table_grad) = grad.split_at_mut(n_net);
        let mut input_grad = self.net.backward(&tape.tape, upstream, net_grad)?;
        let cfg = &self.config;
        if let ClassEmbeddingMode::Learned { width } = cfg.class_embedding {
            let start = cfg.latent_dim + cfg.time_dim;
            let row = &mut table_grad[tape.class * width..(tape.class + 1) * width];
            for (g, d) in row.iter_mut().zip(&input_grad[start..start + width]) {
                *g += d;
            }
        }
        input_grad.truncate(cfg.latent_dim);
        Ok(input_grad)
    }
}

impl NoisePredictor for DenoiserModel {
    fn latent_dim(&self) -> usize {
        self.config.latent_dim
    }

    fn predict_noise(&self, z_t: &[f64], t: usize, class: usize) -> Result<Vec<f64>> {
        let tape = self.forward_tape(z_t, t, class)?;
        Ok(tape.tape.output().to_vec())
    }
}

fn check_latent(model: &DenoiserModel, z_t: &DenseArray) -> Result<()> {
    if z_t.shape() != [model.config.latent_dim] {
        return Err(Error::invalid(format!(
            "z_t: expected shape [{}], got {:?}",
            model.config.latent_dim,
            z_t.shape()
        )));
    }
    Ok(())
}

/// Predicted noise for a single latent.
pub fn denoiser_forward(
    model: &DenoiserModel,
    z_t: &DenseArray,
    t: usize,
    cond: Condition,
) -> Result<DenseArray> {
    check_latent(model, z_t)?;
    DenseArray::vector(model.predict_noise(z_t.as_slice(), t, cond.class())?)
}

/// Gradients of `<upstream, denoiser_forward(..)>` with respect to every
/// parameter (flat layout) and to `z_t`.
pub fn denoiser_backward(
    model: &DenoiserModel,
    z_t: &DenseArray,
    t: usize,
    cond: Condition,
    upstream: &DenseArray,
) -> Result<(Vec<f64>, DenseArray)> {
    check_latent(model, z_t)?;
    if upstream.shape() != z_t.shape() {
        return Err(Error::invalid(format!(
            "upstream gradient: expected shape {:?}, got {:?}",
            z_t.shape(),
            upstream.shape()
        )));
    }
    let tape = model.forward_tape(z_t.as_slice(), t, cond.class())?;
    let mut grad = vec![0.0; model.num_params()];
    let gz = model.backward_tape(&tape, upstream.as_slice(), &mut grad)?;
    Ok((grad, DenseArray::vector(gz)?))
}

/// Maps data vectors to latents and back.
#[derive(Debug, Clone, PartialEq)]
pub enum LatentCodec {
    Identity {
        dim: usize,
    },
    /// `z = E x`, `x̂ = D z`, with `E` of shape `(latent, data)` and `D` of
    /// shape `(data, latent)`, both row-major. No biases.
    Linear {
        data_dim: usize,
        latent_dim: usize,
        encoder: Vec<f64>,
        decoder: Vec<f64>,
    },
}

impl LatentCodec {
    pub fn identity(dim: usize) -> Self {
        LatentCodec::Identity { dim }
    }

    pub fn linear(
        data_dim: usize,
        latent_dim: usize,
        encoder: Vec<f64>,
        decoder: Vec<f64>,
    ) -> Result<Self> {
        if data_dim == 0 || latent_dim == 0 {
            return Err(Error::invalid("codec dims must be positive"));
        }
        if encoder.len() != data_dim * latent_dim {
            return Err(Error::dim_mismatch(
                "encoder matrix",
                data_dim * latent_dim,
                encoder.len(),
            ));
        }
        if decoder.len() != data_dim * latent_dim {
            return Err(Error::dim_mismatch(
                "decoder matrix",
                data_dim * latent_dim,
                decoder.len(),
            ));
        }
        Ok(LatentCodec::Linear {
            data_dim,
            latent_dim,
            encoder,
            decoder,
        })
    }

    /// Square linear codec with a random orthonormal encoder and its
    /// transpose as decoder.
    pub fn random_orthonormal<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Result<Self> {
        let mut rows: Vec<Vec<f64>> = Vec::with_capacity(dim);
        while rows.len() < dim {
            let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
            for r in &rows {
                let p = dot(&v, r);
                for (vi, ri) in v.iter_mut().zip(r) {
                    *vi -= p * ri;
                }
            }
            let n = dot(&v, &v).sqrt();
            if n < 1e-8 {
                continue;
            }
            v.iter_mut().for_each(|x| *x /= n);
            rows.push(v);
        }
        let encoder: Vec<f64> = rows.concat();
        let mut decoder = vec![0.0; dim * dim];
        for i in 0..dim {
            for j in 0..dim {
                decoder[j * dim + i] = encoder[i * dim + j];
            }
        }
        Self::linear(dim, dim, encoder, decoder)
    }

    pub fn data_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { dim } => *dim,
            LatentCodec::Linear { data_dim, .. } => *data_dim,
        }
    }

    pub fn latent_dim(&self) -> usize {
        match self {
            LatentCodec::Identity { dim } => *dim,
            LatentCodec::Linear { latent_dim, .. } => *latent_dim,
        }
    }

    pub fn encode_slice(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.data_dim() {
            return Err(Error::dim_mismatch("codec input", self.data_dim(), x.len()));
        }
        Ok(match self {
            LatentCodec::Identity { .. } => x.to_vec(),
            LatentCodec::Linear {
                data_dim, encoder, ..
            } => encoder.chunks(*data_dim).map(|row| dot(row, x)).collect(),
        })
    }

    pub fn decode_slice(&self, z: &[f64]) -> Result<Vec<f64>> {
        if z.len() != self.latent_dim() {
            return Err(Error::dim_mismatch(
                "codec latent",
                self.latent_dim(),
                z.len(),
            ));
        }
        Ok(match self {
            LatentCodec::Identity { .. } => z.to_vec(),
            LatentCodec::Linear {
                latent_dim,
                decoder,
                ..
            } => decoder.chunks(*latent_dim).map(|row| dot(row, z)).collect(),
        })
    }

    pub fn encode(&self, x: &DenseArray) -> Result<DenseArray> {
        DenseArray::vector(self.encode_slice(x.as_slice())?)
    }

    pub fn decode(&self, z: &DenseArray) -> Result<DenseArray> {
        DenseArray::vector(self.decode_slice(z.as_slice())?)
    }
}
