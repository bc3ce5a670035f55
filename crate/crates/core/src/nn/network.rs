use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::seed::derive_seed;

use super::layers::{BatchNorm, Conv2d, Layer, Linear, MaxPool2d, Param, Relu};
use super::loss::contrastive_loss;
use super::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, caches kept for backward.
    Train,
    /// Running statistics, nothing cached.
    Eval,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LayerSpec {
    Conv {
        filters: usize,
        kernel_h: usize,
        kernel_w: usize,
        bias: bool,
    },
    BatchNorm,
    Relu,
    MaxPool {
        factor: usize,
    },
    Flatten,
    Linear {
        units: usize,
        bias: bool,
    },
}

impl fmt::Display for LayerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let b = |bias: bool| if bias { "bias" } else { "nobias" };
        match self {
            LayerSpec::Conv {
                filters,
                kernel_h,
                kernel_w,
                bias,
            } => write!(f, "conv {filters} {kernel_h} {kernel_w} {}", b(*bias)),
            LayerSpec::BatchNorm => f.write_str("batchnorm"),
            LayerSpec::Relu => f.write_str("relu"),
            LayerSpec::MaxPool { factor } => write!(f, "maxpool {factor}"),
            LayerSpec::Flatten => f.write_str("flatten"),
            LayerSpec::Linear { units, bias } => write!(f, "linear {units} {}", b(*bias)),
        }
    }
}

impl FromStr for LayerSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split_whitespace().collect();
        let num = |i: usize| -> Result<usize> {
            parts
                .get(i)
                .and_then(|v| v.parse().ok())
                .ok_or_else(|| Error::Format(format!("bad layer description `{s}`")))
        };
        let bias = |i: usize| -> Result<bool> {
            match parts.get(i).copied() {
                Some("bias") | None => Ok(true),
                Some("nobias") => Ok(false),
                Some(_) => Err(Error::Format(format!("bad layer description `{s}`"))),
            }
        };
        Ok(match parts.first().copied() {
            Some("conv") => LayerSpec::Conv {
                filters: num(1)?,
                kernel_h: num(2)?,
                kernel_w: num(3)?,
                bias: bias(4)?,
            },
            Some("batchnorm") => LayerSpec::BatchNorm,
            Some("relu") => LayerSpec::Relu,
            Some("maxpool") => LayerSpec::MaxPool { factor: num(1)? },
            Some("flatten") => LayerSpec::Flatten,
            Some("linear") => LayerSpec::Linear {
                units: num(1)?,
                bias: bias(2)?,
            },
            _ => return Err(Error::Format(format!("unknown layer `{s}`"))),
        })
    }
}

/// Input shape (without batch) plus an ordered layer list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NetworkSpec {
    pub input: Vec<usize>,
    pub layers: Vec<LayerSpec>,
}

impl NetworkSpec {
    pub fn new(input: Vec<usize>, layers: Vec<LayerSpec>) -> Self {
        Self { input, layers }
    }

    /// Shapes before the first layer and after each layer.
    pub fn shape_trace(&self) -> Result<Vec<Vec<usize>>> {
        let mut shapes = vec![self.input.clone()];
        let mut cur = self.input.clone();
        for (i, l) in self.layers.iter().enumerate() {
            let bad = |why: String| Error::Shape(format!("layer {i} ({l}): {why}"));
            cur = match l {
                LayerSpec::Conv {
                    filters,
                    kernel_h,
                    kernel_w,
                    ..
                } => match cur[..] {
                    [_, h, w] if *kernel_h <= h && *kernel_w <= w && *kernel_h > 0 && *kernel_w > 0 => {
                        vec![*filters, h - kernel_h + 1, w - kernel_w + 1]
                    }
                    _ => return Err(bad(format!("kernel does not fit input {cur:?}"))),
                },
                LayerSpec::MaxPool { factor } => match cur[..] {
                    [c, h, w] if *factor > 0 && h / factor > 0 && w / factor > 0 => vec![c, h / factor, w / factor],
                    _ => return Err(bad(format!("cannot pool {cur:?}"))),
                },
                LayerSpec::Flatten => vec![cur.iter().product()],
                LayerSpec::Linear { units, .. } => match cur[..] {
                    [_] => vec![*units],
                    _ => return Err(bad(format!("linear needs a flat input, got {cur:?}"))),
                },
                LayerSpec::BatchNorm | LayerSpec::Relu => {
                    if cur.is_empty() {
                        return Err(bad("empty shape".into()));
                    }
                    cur
                }
            };
            shapes.push(cur.clone());
        }
        Ok(shapes)
    }

    pub fn output_shape(&self) -> Result<Vec<usize>> {
        Ok(self.shape_trace()?.pop().unwrap_or_default())
    }

    /// One header line with the input shape, then one line per layer.
    pub fn to_text(&self) -> String {
        let mut s = String::from("input");
        for d in &self.input {
            s.push_str(&format!(" {d}"));
        }
        s.push('\n');
        for l in &self.layers {
            s.push_str(&format!("{l}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut lines = text.lines().map(str::trim).filter(|l| !l.is_empty());
        let head = lines.next().ok_or_else(|| Error::Format("empty network description".into()))?;
        let mut head_parts = head.split_whitespace();
        if head_parts.next() != Some("input") {
            return Err(Error::Format(format!("expected `input …`, got `{head}`")));
        }
        let input = head_parts
            .map(|v| v.parse().map_err(|_| Error::Format(format!("bad input shape `{head}`"))))
            .collect::<Result<Vec<usize>>>()?;
        let layers = lines.map(str::parse).collect::<Result<Vec<_>>>()?;
        let spec = Self { input, layers };
        spec.shape_trace()?;
        Ok(spec)
    }
}

/// A sequential stack of layers built from a [`NetworkSpec`].
#[derive(Debug, Clone)]
pub struct Network<T> {
    spec: NetworkSpec,
    layers: Vec<Layer<T>>,
}

impl<T: Scalar> Network<T> {
    pub fn build(spec: &NetworkSpec, seed: u64) -> Result<Self> {
        let trace = spec.shape_trace()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(spec.layers.len());
        for (l, shape) in spec.layers.iter().zip(&trace) {
            let dims3 = || -> [usize; 3] { [shape[0], shape[1], shape[2]] };
            layers.push(match l {
                LayerSpec::Conv {
                    filters,
                    kernel_h,
                    kernel_w,
                    bias,
                } => Layer::Conv(Conv2d::new(dims3(), *filters, *kernel_h, *kernel_w, *bias, &mut rng)?),
                LayerSpec::BatchNorm => Layer::BatchNorm(BatchNorm::new(shape)),
                LayerSpec::Relu => Layer::Relu(Relu::default()),
                LayerSpec::MaxPool { factor } => Layer::MaxPool(MaxPool2d::new(dims3(), *factor)?),
                LayerSpec::Flatten => Layer::Flatten {
                    in_shape: shape.clone(),
                },
                LayerSpec::Linear { units, bias } => Layer::Linear(Linear::new(shape[0], *units, *bias, &mut rng)),
            });
        }
        Ok(Self {
            spec: spec.clone(),
            layers,
        })
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn layers(&self) -> &[Layer<T>] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [Layer<T>] {
        &mut self.layers
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        if x.shape().len() != self.spec.input.len() + 1 || x.shape()[1..] != self.spec.input[..] {
            return Err(Error::Shape(format!(
                "network expects [batch, {:?}], got {:?}",
                self.spec.input,
                x.shape()
            )));
        }
        Ok(())
    }

    pub fn forward(&mut self, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        self.check_input(&x)?;
        let mut cur = x;
        for l in &mut self.layers {
            cur = l.forward(cur, mode)?;
        }
        Ok(cur)
    }

    /// Eval-mode forward without touching any cached state.
    pub fn infer(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_input(x)?;
        let mut cur = match self.layers.first() {
            Some(l) => l.infer(x)?,
            None => return Ok(x.clone()),
        };
        for l in &self.layers[1..] {
            cur = l.infer(&cur)?;
        }
        Ok(cur)
    }

    /// Accumulates parameter gradients; the gradient with respect to the
    /// network input is not computed.
    pub fn backward(&mut self, dy: Tensor<T>) -> Result<()> {
        let mut cur = Some(dy);
        for (i, l) in self.layers.iter_mut().enumerate().rev() {
            let g = cur.take().ok_or_else(|| Error::Shape("missing gradient".into()))?;
            cur = l.backward(g, i > 0)?;
        }
        Ok(())
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        self.layers.iter().flat_map(|l| l.params()).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        self.layers.iter_mut().flat_map(|l| l.params_mut()).collect()
    }

    pub fn batchnorms(&self) -> impl Iterator<Item = &BatchNorm<T>> {
        self.layers.iter().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    pub fn batchnorms_mut(&mut self) -> impl Iterator<Item = &mut BatchNorm<T>> {
        self.layers.iter_mut().filter_map(|l| match l {
            Layer::BatchNorm(b) => Some(b),
            _ => None,
        })
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    pub fn zero_grad(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }
}

/// Visual and audio streams trained jointly through the contrastive loss.
#[derive(Debug, Clone)]
pub struct TwoStreamNet<T> {
    pub visual: Network<T>,
    pub audio: Network<T>,
}

impl<T: Scalar> TwoStreamNet<T> {
    pub fn build(visual: &NetworkSpec, audio: &NetworkSpec, seed: u64) -> Result<Self> {
        let v = Network::build(visual, derive_seed(seed, "visual"))?;
        let a = Network::build(audio, derive_seed(seed, "audio"))?;
        if v.spec.output_shape()? != a.spec.output_shape()? {
            return Err(Error::Shape("the two streams must produce embeddings of equal size".into()));
        }
        Ok(Self { visual: v, audio: a })
    }

    /// Zeroes gradients, runs a training forward and backward pass and
    /// returns the mean contrastive loss.
    pub fn loss_and_backward(&mut self, u: Tensor<T>, m: Tensor<T>, labels: &[u8]) -> Result<f64> {
        self.zero_grad();
        let v = self.visual.forward(u, Mode::Train)?;
        let a = self.audio.forward(m, Mode::Train)?;
        let out = contrastive_loss(&v, &a, labels)?;
        self.visual.backward(out.grad_v)?;
        self.audio.backward(out.grad_a)?;
        Ok(out.loss)
    }

    /// Training-mode loss without a backward pass. Running statistics are updated.
    pub fn train_loss(&mut self, u: Tensor<T>, m: Tensor<T>, labels: &[u8]) -> Result<f64> {
        let v = self.visual.forward(u, Mode::Train)?;
        let a = self.audio.forward(m, Mode::Train)?;
        Ok(contrastive_loss(&v, &a, labels)?.loss)
    }

    pub fn params(&self) -> Vec<&Param<T>> {
        let mut p = self.visual.params();
        p.extend(self.audio.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param<T>> {
        let mut p = self.visual.params_mut();
        p.extend(self.audio.params_mut());
        p
    }

    pub fn zero_grad(&mut self) {
        self.visual.zero_grad();
        self.audio.zero_grad();
    }

    #[doc(hidden)]
    pub fn set_fault_injection(&mut self, on: bool) {
        for l in self.visual.layers_mut().iter_mut().chain(self.audio.layers_mut()) {
            if let Layer::Conv(c) = l {
                c.corrupt_backward = on;
            }
        }
    }
}
