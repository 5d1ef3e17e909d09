//! Reverse-mode multilayer perceptrons.
//!
//! Only what the hazard model needs: dense layers, a handful of activations,
//! inverted dropout, Glorot-uniform initialisation, Adam, and clamped
//! binary cross-entropy. Rows of an input matrix are samples.

mod adam;
mod loss;

pub use adam::AdamState;
pub use loss::{bce_loss, PROB_CLAMP};

use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Identity,
    Relu,
    Elu,
    Sigmoid,
}

impl Activation {
    fn apply(self, z: &Array2<f64>) -> Array2<f64> {
        match self {
            Activation::Identity => z.clone(),
            Activation::Relu => z.mapv(|v| v.max(0.0)),
            Activation::Elu => z.mapv(|v| if v > 0.0 { v } else { v.exp_m1() }),
            Activation::Sigmoid => z.mapv(crate::sigmoid),
        }
    }

    /// Multiplies `grad` in place by the derivative at pre-activation `z`.
    fn backprop(self, z: &Array2<f64>, grad: &mut Array2<f64>) {
        match self {
            Activation::Identity => {}
            Activation::Relu => grad.zip_mut_with(z, |g, &v| {
                if v <= 0.0 {
                    *g = 0.0
                }
            }),
            Activation::Elu => grad.zip_mut_with(z, |g, &v| {
                if v <= 0.0 {
                    *g *= v.exp()
                }
            }),
            Activation::Sigmoid => grad.zip_mut_with(z, |g, &v| {
                let s = crate::sigmoid(v);
                *g *= s * (1.0 - s)
            }),
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" | "linear" => Ok(Activation::Identity),
            "relu" => Ok(Activation::Relu),
            "elu" => Ok(Activation::Elu),
            "sigmoid" => Ok(Activation::Sigmoid),
            other => Err(Error::InvalidConfig(format!("unknown activation {other:?}"))),
        }
    }
}

/// Affine map `x -> W x + b` with `W` of shape `(fan_out, fan_in)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl DenseLayer {
    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weights: Array2::zeros((fan_out, fan_in)),
            bias: Array1::zeros(fan_out),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weights.ncols()
    }

    pub fn fan_out(&self) -> usize {
        self.weights.nrows()
    }

    fn affine(&self, input: &ArrayView2<f64>) -> Array2<f64> {
        let mut z = input.dot(&self.weights.t());
        z += &self.bias;
        z
    }
}

/// Glorot-uniform weights `U(-r, r)`, `r = sqrt(6 / (fan_in + fan_out))`, zero bias.
pub fn xavier_init(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Result<DenseLayer> {
    if fan_in == 0 || fan_out == 0 {
        return Err(Error::InvalidConfig(format!(
            "layer fans must be positive, got {fan_in} -> {fan_out}"
        )));
    }
    let r = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let weights = Array2::from_shape_simple_fn((fan_out, fan_in), || rng.random_range(-r..=r));
    Ok(DenseLayer {
        weights,
        bias: Array1::zeros(fan_out),
    })
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<DenseLayer>,
    pub hidden_activation: Activation,
    pub output_activation: Activation,
    /// Inverted dropout on every hidden activation during training.
    pub dropout_rate: f64,
    #[serde(skip)]
    version: u64,
}

impl PartialEq for Mlp {
    fn eq(&self, other: &Self) -> bool {
        self.layers == other.layers
            && self.hidden_activation == other.hidden_activation
            && self.output_activation == other.output_activation
            && self.dropout_rate == other.dropout_rate
    }
}

/// Everything [`Mlp::backward`] needs from one forward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache {
    /// Input seen by each layer (post-dropout for hidden layers).
    inputs: Vec<Array2<f64>>,
    /// Pre-activations of each layer.
    pre: Vec<Array2<f64>>,
    /// Scaled dropout masks for each hidden activation, when training.
    masks: Vec<Option<Array2<f64>>>,
    version: u64,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.inputs[0].nrows()
    }
}

/// Gradients shaped like the layers of an [`Mlp`].
#[derive(Clone, Debug, PartialEq)]
pub struct MlpGrads {
    pub layers: Vec<DenseLayer>,
}

impl MlpGrads {
    pub fn zeros_like(mlp: &Mlp) -> Self {
        Self {
            layers: mlp
                .layers
                .iter()
                .map(|l| DenseLayer::zeros(l.fan_in(), l.fan_out()))
                .collect(),
        }
    }

    pub fn add_assign(&mut self, other: &MlpGrads) {
        for (a, b) in self.layers.iter_mut().zip(&other.layers) {
            a.weights += &b.weights;
            a.bias += &b.bias;
        }
    }

    pub fn slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    pub fn all_finite(&self) -> bool {
        self.layers
            .iter()
            .all(|l| l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()))
    }
}

impl Mlp {
    /// Builds an MLP through the layer widths `dims = [in, h1, ..., out]`.
    pub fn new(
        dims: &[usize],
        hidden_activation: Activation,
        output_activation: Activation,
        dropout_rate: f64,
        rng: &mut Rng,
    ) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::InvalidConfig("an MLP needs at least one layer".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::InvalidConfig(format!(
                "dropout rate must lie in [0, 1), got {dropout_rate}"
            )));
        }
        let layers = dims
            .windows(2)
            .map(|w| xavier_init(w[0], w[1], rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self::from_layers(layers, hidden_activation, output_activation, dropout_rate))
    }

    pub fn from_layers(
        layers: Vec<DenseLayer>,
        hidden_activation: Activation,
        output_activation: Activation,
        dropout_rate: f64,
    ) -> Self {
        Self {
            layers,
            hidden_activation,
            output_activation,
            dropout_rate,
            version: 0,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].fan_out()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.weights.len() + l.bias.len()).sum()
    }

    /// Checks that consecutive layers chain and every parameter is finite.
    pub fn validate(&self) -> Result<()> {
        for (k, w) in self.layers.windows(2).enumerate() {
            if w[0].fan_out() != w[1].fan_in() {
                return Err(Error::ShapeMismatch {
                    expected: format!("layer {} fan_in {}", k + 1, w[0].fan_out()),
                    got: w[1].fan_in().to_string(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.fan_out() {
                return Err(Error::ShapeMismatch {
                    expected: format!("bias of length {}", l.fan_out()),
                    got: l.bias.len().to_string(),
                });
            }
            if !l.weights.iter().chain(l.bias.iter()).all(|v| v.is_finite()) {
                return Err(Error::InvalidInput("non-finite parameter".into()));
            }
        }
        Ok(())
    }

    pub fn forward(
        &self,
        x: ArrayView2<f64>,
        training: bool,
        rng: &mut Rng,
    ) -> Result<(Array2<f64>, ForwardCache)> {
        self.check_input(&x)?;
        let n_layers = self.layers.len();
        let mut inputs = Vec::with_capacity(n_layers);
        let mut pre = Vec::with_capacity(n_layers);
        let mut masks = Vec::with_capacity(n_layers.saturating_sub(1));
        let mut current = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&current.view());
            inputs.push(current);
            if k + 1 < n_layers {
                let mut act = self.hidden_activation.apply(&z);
                if training && self.dropout_rate > 0.0 {
                    let keep = 1.0 - self.dropout_rate;
                    let scale = 1.0 / keep;
                    let mask = Array2::from_shape_simple_fn(act.raw_dim(), || {
                        if rng.random::<f64>() < keep {
                            scale
                        } else {
                            0.0
                        }
                    });
                    act *= &mask;
                    masks.push(Some(mask));
                } else {
                    masks.push(None);
                }
                current = act;
            } else {
                current = self.output_activation.apply(&z);
            }
            pre.push(z);
        }
        Ok((
            current,
            ForwardCache {
                inputs,
                pre,
                masks,
                version: self.version,
            },
        ))
    }

    /// Evaluation-mode forward pass without a cache.
    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        self.check_input(&x)?;
        let n_layers = self.layers.len();
        let mut current = x.to_owned();
        for (k, layer) in self.layers.iter().enumerate() {
            let z = layer.affine(&current.view());
            current = if k + 1 < n_layers {
                self.hidden_activation.apply(&z)
            } else {
                self.output_activation.apply(&z)
            };
        }
        Ok(current)
    }

    /// Gradients of `sum(upstream * output)` w.r.t. every parameter and the input.
    pub fn backward(
        &self,
        cache: &ForwardCache,
        upstream: ArrayView2<f64>,
    ) -> Result<(MlpGrads, Array2<f64>)> {
        if cache.version != self.version || cache.pre.len() != self.layers.len() {
            return Err(Error::ContractViolation(
                "forward cache does not belong to the current parameters".into(),
            ));
        }
        let batch = cache.batch_size();
        if upstream.dim() != (batch, self.output_dim()) {
            return Err(Error::ShapeMismatch {
                expected: format!("upstream gradient {:?}", (batch, self.output_dim())),
                got: format!("{:?}", upstream.dim()),
            });
        }
        let n_layers = self.layers.len();
        let mut grads = Vec::with_capacity(n_layers);
        let mut delta = upstream.to_owned();
        self.output_activation
            .backprop(&cache.pre[n_layers - 1], &mut delta);
        for k in (0..n_layers).rev() {
            let layer = &self.layers[k];
            let weights = delta.t().dot(&cache.inputs[k]).as_standard_layout().into_owned();
            let bias = delta.sum_axis(Axis(0));
            grads.push(DenseLayer { weights, bias });
            let mut upstream_input = delta.dot(&layer.weights);
            if k > 0 {
                if let Some(mask) = &cache.masks[k - 1] {
                    upstream_input *= mask;
                }
                self.hidden_activation
                    .backprop(&cache.pre[k - 1], &mut upstream_input);
            }
            delta = upstream_input;
        }
        grads.reverse();
        Ok((MlpGrads { layers: grads }, delta))
    }

    pub fn param_slices(&self) -> Vec<&[f64]> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weights.as_slice().expect("standard layout"),
                    l.bias.as_slice().expect("standard layout"),
                ]
            })
            .collect()
    }

    /// Mutable parameter access; invalidates outstanding forward caches.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        self.version = self.version.wrapping_add(1);
        self.layers
            .iter_mut()
            .flat_map(|l| {
                [
                    l.weights.as_slice_mut().expect("standard layout"),
                    l.bias.as_slice_mut().expect("standard layout"),
                ]
            })
            .collect()
    }

    fn check_input(&self, x: &ArrayView2<f64>) -> Result<()> {
        if x.ncols() != self.input_dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{} input columns", self.input_dim()),
                got: x.ncols().to_string(),
            });
        }
        Ok(())
    }
}
