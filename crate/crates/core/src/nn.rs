//! Dense multilayer perceptron with a flat parameter vector and hand-written
//! backpropagation.
//!
//! Parameters are stored layer by layer: the `(out, in)` row-major weight
//! matrix followed by the `out` biases. Hidden layers apply the configured
//! activation; the output layer is affine.

use rand::Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the pre-activation and the output.
    #[inline]
    fn derivative(self, pre: f64, out: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - out * out,
            Activation::Relu => {
                if pre > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }

    pub(crate) fn code(self) -> u8 {
        match self {
            Activation::Tanh => 0,
            Activation::Relu => 1,
        }
    }

    pub(crate) fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Activation::Tanh),
            1 => Some(Activation::Relu),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Relu => "relu",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "tanh" => Some(Activation::Tanh),
            "relu" => Some(Activation::Relu),
            _ => None,
        }
    }
}

/// Number of parameters of a dense chain with the given layer widths.
pub fn param_count(dims: &[usize]) -> usize {
    dims.windows(2).map(|w| w[0] * w[1] + w[1]).sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    dims: Vec<usize>,
    activation: Activation,
    params: Vec<f64>,
}

/// Intermediate values of one forward pass, kept for the backward pass.
#[derive(Debug, Clone)]
pub struct Tape {
    /// `inputs[l]` is the input to layer `l`; the last entry is the output.
    inputs: Vec<Vec<f64>>,
    /// Pre-activations of the hidden layers.
    pre: Vec<Vec<f64>>,
}

impl Tape {
    pub fn output(&self) -> &[f64] {
        self.inputs.last().expect("tape always holds the output")
    }
}

impl Mlp {
    /// Glorot-uniform weights, zero biases. With `zero_output` the final layer
    /// starts at zero so the network initially outputs exactly zero.
    pub fn new<R: Rng + ?Sized>(
        dims: Vec<usize>,
        activation: Activation,
        zero_output: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!(
                "layer widths must be non-empty and positive, got {dims:?}"
            )));
        }
        let mut params = vec![0.0; param_count(&dims)];
        let n_layers = dims.len() - 1;
        let mut offset = 0;
        for l in 0..n_layers {
            let (fan_in, fan_out) = (dims[l], dims[l + 1]);
            let n_w = fan_in * fan_out;
            if !(zero_output && l + 1 == n_layers) {
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                let dist = Uniform::new_inclusive(-limit, limit).expect("finite limit");
                for w in &mut params[offset..offset + n_w] {
                    *w = dist.sample(rng);
                }
            }
            offset += n_w + fan_out;
        }
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    pub fn from_params(dims: Vec<usize>, activation: Activation, params: Vec<f64>) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::invalid(format!("bad layer widths {dims:?}")));
        }
        let expected = param_count(&dims);
        if params.len() != expected {
            return Err(Error::dim_mismatch(
                "parameter vector",
                expected,
                params.len(),
            ));
        }
        Ok(Self {
            dims,
            activation,
            params,
        })
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn input_dim(&self) -> usize {
        self.dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.dims.last().unwrap()
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn num_layers(&self) -> usize {
        self.dims.len() - 1
    }

    /// `(weights, biases)` of layer `l`.
    pub fn layer(&self, l: usize) -> (&[f64], &[f64]) {
        let (w, b) = self.layer_range(l);
        (&self.params[w.0..w.1], &self.params[b.0..b.1])
    }

    pub fn layer_mut(&mut self, l: usize) -> (&mut [f64], &mut [f64]) {
        let (w, b) = self.layer_range(l);
        let (head, tail) = self.params.split_at_mut(b.0);
        (&mut head[w.0..w.1], &mut tail[..b.1 - b.0])
    }

    fn layer_range(&self, l: usize) -> ((usize, usize), (usize, usize)) {
        let offset = param_count(&self.dims[..=l]);
        let n_w = self.dims[l] * self.dims[l + 1];
        let w = (offset, offset + n_w);
        (w, (w.1, w.1 + self.dims[l + 1]))
    }

    pub fn forward(&self, input: &[f64]) -> Result<Vec<f64>> {
        Ok(self.forward_tape(input)?.inputs.pop().unwrap())
    }

    pub fn forward_tape(&self, input: &[f64]) -> Result<Tape> {
        if input.len() != self.input_dim() {
            return Err(Error::dim_mismatch(
                "network input",
                self.input_dim(),
                input.len(),
            ));
        }
        let n_layers = self.num_layers();
        let mut inputs = Vec::with_capacity(n_layers + 1);
        let mut pre = Vec::with_capacity(n_layers - 1);
        inputs.push(input.to_vec());
        for l in 0..n_layers {
            let (w, b) = self.layer(l);
            let x = &inputs[l];
            let n_in = self.dims[l];
            let mut a: Vec<f64> = b
                .iter()
                .enumerate()
                .map(|(o, &bias)| {
                    let row = &w[o * n_in..(o + 1) * n_in];
                    bias + row.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>()
                })
                .collect();
            if l + 1 < n_layers {
                let h = a.iter().map(|&v| self.activation.apply(v)).collect();
                pre.push(std::mem::take(&mut a));
                inputs.push(h);
            } else {
                inputs.push(a);
            }
        }
        Ok(Tape { inputs, pre })
    }

    /// Accumulates parameter gradients into `grad` and returns the gradient
    /// with respect to the network input.
    pub fn backward(&self, tape: &Tape, upstream: &[f64], grad: &mut [f64]) -> Result<Vec<f64>> {
        if upstream.len() != self.output_dim() {
            return Err(Error::dim_mismatch(
                "upstream gradient",
                self.output_dim(),
                upstream.len(),
            ));
        }
        if grad.len() != self.params.len() {
            return Err(Error::dim_mismatch(
                "gradient buffer",
                self.params.len(),
                grad.len(),
            ));
        }
        let mut delta = upstream.to_vec();
        for l in (0..self.num_layers()).rev() {
            if l + 1 < self.num_layers() {
                let out = &tape.inputs[l + 1];
                for ((d, &p), &o) in delta.iter_mut().zip(&tape.pre[l]).zip(out) {
                    *d *= self.activation.derivative(p, o);
                }
            }
            let (n_in, n_out) = (self.dims[l], self.dims[l + 1]);
            let x = &tape.inputs[l];
            let ((w0, _), (b0, _)) = self.layer_range(l);
            for o in 0..n_out {
                let d = delta[o];
                grad[b0 + o] += d;
                let g_row = &mut grad[w0 + o * n_in..w0 + (o + 1) * n_in];
                for (g, xi) in g_row.iter_mut().zip(x) {
                    *g += d * xi;
                }
            }
            let (w, _) = self.layer(l);
            let mut next = vec![0.0; n_in];
            for o in 0..n_out {
                let d = delta[o];
                let row = &w[o * n_in..(o + 1) * n_in];
                for (n, wi) in next.iter_mut().zip(row) {
                    *n += d * wi;
                }
            }
            delta = next;
        }
        Ok(delta)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn scalar_loss(net: &Mlp, x: &[f64], u: &[f64]) -> f64 {
        net.forward(x)
            .unwrap()
            .iter()
            .zip(u)
            .map(|(a, b)| a * b)
            .sum()
    }

    #[test]
    fn param_count_matches_layout() {
        assert_eq!(param_count(&[3, 4, 2]), 3 * 4 + 4 + 4 * 2 + 2);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Mlp::new(vec![3, 4, 2], Activation::Tanh, false, &mut rng).unwrap();
        assert_eq!(net.params().len(), 26);
        assert_eq!(net.layer(1).0.len(), 8);
        assert_eq!(net.layer(1).1.len(), 2);
    }

    #[test]
    fn zero_output_layer_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Mlp::new(vec![5, 7, 3], Activation::Tanh, true, &mut rng).unwrap();
        assert_eq!(
            net.forward(&[0.3, -1.0, 2.0, 0.1, 0.0]).unwrap(),
            vec![0.0; 3]
        );
    }

    #[test]
    fn relu_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Mlp::new(vec![3, 5, 4, 2], Activation::Relu, false, &mut rng).unwrap();
        for b in net.layer_mut(0).1.iter_mut() {
            *b = 0.05;
        }
        let x = [0.4, -0.7, 1.1];
        let u = [0.3, -1.2];
        let tape = net.forward_tape(&x).unwrap();
        let mut grad = vec![0.0; net.params().len()];
        let gx = net.backward(&tape, &u, &mut grad).unwrap();
        let h = 1e-6;
        for (i, &gi) in grad.iter().enumerate() {
            let mut p = net.clone();
            p.params_mut()[i] += h;
            let mut m = net.clone();
            m.params_mut()[i] -= h;
            let fd = (scalar_loss(&p, &x, &u) - scalar_loss(&m, &x, &u)) / (2.0 * h);
            assert!((fd - gi).abs() < 1e-6, "param {i}: {fd} vs {gi}");
        }
        for j in 0..3 {
            let mut xp = x;
            xp[j] += h;
            let mut xm = x;
            xm[j] -= h;
            let fd = (scalar_loss(&net, &xp, &u) - scalar_loss(&net, &xm, &u)) / (2.0 * h);
            assert!((fd - gx[j]).abs() < 1e-6);
        }
    }

    #[test]
    fn rejects_wrong_input_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Mlp::new(vec![2, 2], Activation::Tanh, false, &mut rng).unwrap();
        assert!(matches!(
            net.forward(&[1.0]),
            Err(Error::InvalidArgument(_))
        ));
    }
}
