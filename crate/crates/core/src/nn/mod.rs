//! A deliberately small reverse-mode engine: the handful of layers the
//! classifier needs, cross-entropy, Adam, and a finite-difference checker.
//!
//! Layers form a [`Sequential`]; a forward pass records per-layer caches and
//! `backward` walks the chain in reverse. Everything is `f64`.

mod adam;
pub mod checkpoint;
mod gradcheck;
mod layers;
mod loss;
mod tensor;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{adam_step, AdamState};
pub use gradcheck::{
    grad_check, relative_error, GradCheckReport, GradCheckable, LayerRig, REL_ERROR_FLOOR,
};
pub use layers::{
    AdaptiveAvgPool2d, BatchNorm2d, Conv2d, Dropout, Linear, MaxPool2d, Relu, BN_EPS, BN_MOMENTUM,
};
pub use loss::{softmax, softmax_cross_entropy, LossOutput};
pub use tensor::{Param, Tensor};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Conv2d {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Batchnorm2d {
        channels: usize,
    },
    Relu,
    Maxpool2d {
        kernel: usize,
        stride: usize,
    },
    AdaptiveAvgpool2d {
        output: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Dropout {
        rate: f64,
    },
}

impl LayerSpec {
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!(
                    "layer hyperparameter {name} must be positive"
                )))
            } else {
                Ok(())
            }
        };
        match *self {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                ..
            } => {
                positive("in_channels", in_channels)?;
                positive("out_channels", out_channels)?;
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::Batchnorm2d { channels } => positive("channels", channels),
            LayerSpec::Relu => Ok(()),
            LayerSpec::Maxpool2d { kernel, stride } => {
                positive("kernel", kernel)?;
                positive("stride", stride)
            }
            LayerSpec::AdaptiveAvgpool2d { output } => {
                if output != 1 {
                    Err(Error::Config(
                        "adaptive average pooling supports a 1x1 output only".into(),
                    ))
                } else {
                    Ok(())
                }
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => {
                positive("in_features", in_features)?;
                positive("out_features", out_features)
            }
            LayerSpec::Dropout { rate } => {
                if (0.0..1.0).contains(&rate) {
                    Ok(())
                } else {
                    Err(Error::Config(format!("dropout rate {rate} outside [0, 1)")))
                }
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum Layer {
    Conv2d(Conv2d),
    BatchNorm2d(BatchNorm2d),
    Relu(Relu),
    MaxPool2d(MaxPool2d),
    AdaptiveAvgPool2d(AdaptiveAvgPool2d),
    Linear(Linear),
    Dropout(Dropout),
}

impl Layer {
    pub fn from_spec(spec: &LayerSpec) -> Result<Self> {
        spec.validate()?;
        Ok(match *spec {
            LayerSpec::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            } => Layer::Conv2d(Conv2d::new(
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
            )),
            LayerSpec::Batchnorm2d { channels } => Layer::BatchNorm2d(BatchNorm2d::new(channels)),
            LayerSpec::Relu => Layer::Relu(Relu::default()),
            LayerSpec::Maxpool2d { kernel, stride } => {
                Layer::MaxPool2d(MaxPool2d::new(kernel, stride))
            }
            LayerSpec::AdaptiveAvgpool2d { .. } => {
                Layer::AdaptiveAvgPool2d(AdaptiveAvgPool2d::default())
            }
            LayerSpec::Linear {
                in_features,
                out_features,
            } => Layer::Linear(Linear::new(in_features, out_features)),
            LayerSpec::Dropout { rate } => Layer::Dropout(Dropout::new(rate)),
        })
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        match self {
            Layer::Conv2d(l) => vec![&mut l.weight, &mut l.bias],
            Layer::BatchNorm2d(l) => vec![&mut l.gamma, &mut l.beta],
            Layer::Linear(l) => vec![&mut l.weight, &mut l.bias],
            _ => Vec::new(),
        }
    }

    fn params(&self) -> Vec<&Param> {
        match self {
            Layer::Conv2d(l) => vec![&l.weight, &l.bias],
            Layer::BatchNorm2d(l) => vec![&l.gamma, &l.beta],
            Layer::Linear(l) => vec![&l.weight, &l.bias],
            _ => Vec::new(),
        }
    }
}

/// Forward-pass mode and randomness.
pub struct Ctx<'a> {
    pub training: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl Ctx<'_> {
    pub fn eval() -> Self {
        Ctx {
            training: false,
            rng: None,
        }
    }
}

/// Named array view used by checkpoints: trainable parameters plus
/// batch-norm running statistics.
pub struct NamedArray<'a> {
    pub name: String,
    pub shape: Vec<usize>,
    pub values: &'a [f64],
}

#[derive(Debug, Clone)]
pub struct Sequential {
    pub name: String,
    pub specs: Vec<LayerSpec>,
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(name: &str, specs: Vec<LayerSpec>) -> Result<Self> {
        let layers = specs.iter().map(Layer::from_spec).collect::<Result<_>>()?;
        Ok(Sequential {
            name: name.to_string(),
            specs,
            layers,
        })
    }

    pub fn forward(&mut self, x: &Tensor, ctx: &mut Ctx<'_>) -> Result<Tensor> {
        let mut cur = x.clone();
        for layer in &mut self.layers {
            cur = match layer {
                Layer::Conv2d(l) => l.forward(&cur)?,
                Layer::BatchNorm2d(l) => l.forward(&cur, ctx.training)?,
                Layer::Relu(l) => l.forward(&cur),
                Layer::MaxPool2d(l) => l.forward(&cur)?,
                Layer::AdaptiveAvgPool2d(l) => l.forward(&cur)?,
                Layer::Linear(l) => l.forward(&cur)?,
                Layer::Dropout(l) => l.forward(&cur, ctx.training, ctx.rng.as_deref_mut())?,
            };
        }
        Ok(cur)
    }

    pub fn backward(&mut self, dy: &Tensor) -> Tensor {
        let mut g = dy.clone();
        for layer in self.layers.iter_mut().rev() {
            g = match layer {
                Layer::Conv2d(l) => l.backward(&g),
                Layer::BatchNorm2d(l) => l.backward(&g),
                Layer::Relu(l) => l.backward(&g),
                Layer::MaxPool2d(l) => l.backward(&g),
                Layer::AdaptiveAvgPool2d(l) => l.backward(&g),
                Layer::Linear(l) => l.backward(&g),
                Layer::Dropout(l) => l.backward(&g),
            };
        }
        g
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        self.layers.iter_mut().flat_map(Layer::params_mut).collect()
    }

    pub fn params(&self) -> Vec<&Param> {
        self.layers.iter().flat_map(Layer::params).collect()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn set_dropout_frozen(&mut self, frozen: bool) {
        for l in &mut self.layers {
            if let Layer::Dropout(d) = l {
                d.frozen = frozen;
            }
        }
    }

    /// Weights and biases uniform in `±1/sqrt(fan_in)`; batch-norm affine
    /// parameters start at one and zero.
    pub fn init(&mut self, rng: &mut ChaCha8Rng) {
        for layer in &mut self.layers {
            let (weight, bias, fan_in) = match layer {
                Layer::Conv2d(l) => {
                    let fan_in = l.in_channels * l.kernel * l.kernel;
                    (&mut l.weight, &mut l.bias, fan_in)
                }
                Layer::Linear(l) => {
                    let fan_in = l.in_features;
                    (&mut l.weight, &mut l.bias, fan_in)
                }
                _ => continue,
            };
            let bound = 1.0 / (fan_in as f64).sqrt();
            for w in weight.value.iter_mut().chain(bias.value.iter_mut()) {
                *w = rng.random_range(-bound..bound);
            }
        }
    }

    pub fn named_arrays(&self) -> Vec<NamedArray<'_>> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            let prefix = format!("{}.{i}", self.name);
            fn make<'v>(
                prefix: &str,
                suffix: &str,
                shape: &[usize],
                values: &'v [f64],
            ) -> NamedArray<'v> {
                NamedArray {
                    name: format!("{prefix}.{suffix}"),
                    shape: shape.to_vec(),
                    values,
                }
            }
            match layer {
                Layer::Conv2d(Conv2d { weight, bias, .. })
                | Layer::Linear(Linear { weight, bias, .. }) => {
                    out.push(make(&prefix, "weight", &weight.shape, &weight.value));
                    out.push(make(&prefix, "bias", &bias.shape, &bias.value));
                }
                Layer::BatchNorm2d(l) => {
                    out.push(make(&prefix, "gamma", &l.gamma.shape, &l.gamma.value));
                    out.push(make(&prefix, "beta", &l.beta.shape, &l.beta.value));
                    out.push(make(
                        &prefix,
                        "running_mean",
                        &[l.channels],
                        &l.running_mean,
                    ));
                    out.push(make(&prefix, "running_var", &[l.channels], &l.running_var));
                }
                _ => {}
            }
        }
        out
    }

    /// Mutable counterpart of [`Sequential::named_arrays`], in the same order.
    pub fn named_arrays_mut(&mut self) -> Vec<(String, &mut Vec<f64>)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let prefix = format!("{}.{i}", self.name);
            match layer {
                Layer::Conv2d(l) => {
                    out.push((format!("{prefix}.weight"), &mut l.weight.value));
                    out.push((format!("{prefix}.bias"), &mut l.bias.value));
                }
                Layer::Linear(l) => {
                    out.push((format!("{prefix}.weight"), &mut l.weight.value));
                    out.push((format!("{prefix}.bias"), &mut l.bias.value));
                }
                Layer::BatchNorm2d(l) => {
                    out.push((format!("{prefix}.gamma"), &mut l.gamma.value));
                    out.push((format!("{prefix}.beta"), &mut l.beta.value));
                    out.push((format!("{prefix}.running_mean"), &mut l.running_mean));
                    out.push((format!("{prefix}.running_var"), &mut l.running_var));
                }
                _ => {}
            }
        }
        out
    }
}
