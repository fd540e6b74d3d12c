//! Fully connected network with smooth activations and hand-written
//! backpropagation.

use ndarray::{Array1, Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{NoiseStream, StreamDomain};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Silu,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Silu => z / (1.0 + (-z).exp()),
        }
    }

    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - a * a,
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-z).exp());
                s * (1.0 + z * (1.0 - s))
            }
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "tanh" => Ok(Activation::Tanh),
            "silu" => Ok(Activation::Silu),
            _ => Err(Error::Invalid(format!("unknown activation '{s}'"))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Tanh => "tanh",
            Activation::Silu => "silu",
        }
    }
}

/// Weights `w` (out × in) and bias `b` (out); gradients share the shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    activation: Activation,
}

/// Intermediate values kept for the backward pass.
pub struct Cache {
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
}

impl Mlp {
    /// Glorot-normal weights and zero biases drawn from `(seed, Weights)`.
    pub fn new(widths: &[usize], activation: Activation, seed: u64) -> Result<Self> {
        if widths.len() < 2 || widths.contains(&0) {
            return Err(Error::Invalid("need at least input and output widths, all positive".into()));
        }
        let mut stream = NoiseStream::new(seed, StreamDomain::Weights, 0);
        let layers = widths
            .windows(2)
            .map(|w| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let sd = (2.0 / (fan_in + fan_out) as f64).sqrt();
                Layer {
                    w: Array2::from_shape_fn((fan_out, fan_in), |_| sd * stream.normal()),
                    b: Array1::zeros(fan_out),
                }
            })
            .collect();
        Ok(Mlp { layers, activation })
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.layers[0].w.ncols()];
        w.extend(self.layers.iter().map(|l| l.w.nrows()));
        w
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_width(&self) -> usize {
        self.layers[0].w.ncols()
    }

    pub fn output_width(&self) -> usize {
        self.layers.last().unwrap().w.nrows()
    }

    /// Rows of `x` are samples. Hidden layers use the activation, the output is linear.
    pub fn forward(&self, x: ArrayView2<f64>) -> (Array2<f64>, Cache) {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut a = x.to_owned();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            let z = a.dot(&layer.w.t()) + &layer.b;
            inputs.push(a);
            if i == last {
                a = z.clone();
            } else {
                a = z.mapv(|v| self.activation.apply(v));
            }
            pre.push(z);
        }
        (a, Cache { inputs, pre })
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Array2<f64> {
        self.forward(x).0
    }

    /// Parameter gradients given ∂L/∂output.
    pub fn backward(&self, cache: &Cache, grad_out: &Array2<f64>) -> Vec<Layer> {
        let mut grads = Vec::with_capacity(self.layers.len());
        let mut delta = grad_out.clone();
        for i in (0..self.layers.len()).rev() {
            let layer = &self.layers[i];
            grads.push(Layer { w: delta.t().dot(&cache.inputs[i]), b: delta.sum_axis(Axis(0)) });
            if i > 0 {
                let mut back = delta.dot(&layer.w);
                let act = self.activation;
                ndarray::Zip::from(&mut back)
                    .and(&cache.pre[i - 1])
                    .and(&cache.inputs[i])
                    .for_each(|g, &z, &a| *g *= act.derivative(z, a));
                delta = back;
            }
        }
        grads.reverse();
        grads
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    /// Per layer: weights row-major, then bias.
    pub fn params_flat(&self) -> Vec<f64> {
        flatten(&self.layers)
    }

    pub fn set_params_flat(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.n_params() {
            return Err(Error::Invalid(format!(
                "expected {} parameters, got {}",
                self.n_params(),
                flat.len()
            )));
        }
        let mut k = 0;
        for l in &mut self.layers {
            for v in l.w.iter_mut().chain(l.b.iter_mut()) {
                *v = flat[k];
                k += 1;
            }
        }
        Ok(())
    }
}

/// Concatenate layers in checkpoint order.
pub fn flatten(layers: &[Layer]) -> Vec<f64> {
    let mut out = Vec::new();
    for l in layers {
        out.extend(l.w.iter());
        out.extend(l.b.iter());
    }
    out
}
