//! Layer configurations, parameter state, and forward/backward dispatch.
//!
//! Every kernel is generic over [`Real`] so the same code runs in the f32
//! production path and the f64 gradient-check mode.

pub mod augment;
pub mod conv;
pub mod dense;
pub mod norm;
pub mod pool;

use std::collections::BTreeMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::{glorot_uniform, DetRng, InitSpec};
use crate::tensor::{relu, sigmoid, Shape, Tensor};

use augment::WarpParams;
use norm::BatchNormSaved;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Padding {
    Valid,
    Same,
}

impl fmt::Display for Padding {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Padding::Valid => "valid",
            Padding::Same => "same",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Infer,
}

/// Layer kind with its hyperparameters. Activations are separate layers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerConfig {
    /// `y = x * scale + offset`.
    Rescale { scale: f32, offset: f32 },
    RandomFlipH { seed: u64 },
    /// `factor` is a fraction of a full turn.
    RandomRotation { factor: f32, seed: u64 },
    RandomZoom { factor: f32, seed: u64 },
    Conv2d {
        filters: usize,
        kernel_size: usize,
        stride: usize,
        padding: Padding,
        use_bias: bool,
        init_seed: u64,
    },
    SeparableConv2d {
        filters: usize,
        kernel_size: usize,
        padding: Padding,
        use_bias: bool,
        depthwise_seed: u64,
        pointwise_seed: u64,
    },
    MaxPool2d {
        pool_size: usize,
        stride: usize,
        padding: Padding,
    },
    BatchNorm { epsilon: f32, momentum: f32 },
    Relu,
    Sigmoid,
    Dense {
        units: usize,
        use_bias: bool,
        init_seed: u64,
    },
    Flatten,
    Dropout { rate: f32, seed: u64 },
    GlobalAvgPool,
    ResidualAdd,
}

impl LayerConfig {
    pub fn conv2d(filters: usize, kernel_size: usize, init_seed: u64) -> Self {
        LayerConfig::Conv2d {
            filters,
            kernel_size,
            stride: 1,
            padding: Padding::Valid,
            use_bias: true,
            init_seed,
        }
    }

    pub fn batchnorm() -> Self {
        LayerConfig::BatchNorm {
            epsilon: 1e-3,
            momentum: 0.99,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerConfig::Rescale { .. } => "rescale",
            LayerConfig::RandomFlipH { .. } => "random_flip_h",
            LayerConfig::RandomRotation { .. } => "random_rotation",
            LayerConfig::RandomZoom { .. } => "random_zoom",
            LayerConfig::Conv2d { .. } => "conv2d",
            LayerConfig::SeparableConv2d { .. } => "separable_conv2d",
            LayerConfig::MaxPool2d { .. } => "maxpool2d",
            LayerConfig::BatchNorm { .. } => "batchnorm",
            LayerConfig::Relu => "relu",
            LayerConfig::Sigmoid => "sigmoid",
            LayerConfig::Dense { .. } => "dense",
            LayerConfig::Flatten => "flatten",
            LayerConfig::Dropout { .. } => "dropout",
            LayerConfig::GlobalAvgPool => "global_avg_pool",
            LayerConfig::ResidualAdd => "residual_add",
        }
    }

    pub fn is_convolution(&self) -> bool {
        matches!(
            self,
            LayerConfig::Conv2d { .. } | LayerConfig::SeparableConv2d { .. }
        )
    }

    pub fn arity(&self) -> usize {
        match self {
            LayerConfig::ResidualAdd => 2,
            _ => 1,
        }
    }

    /// Hyperparameters as `key=value` pairs in a fixed order.
    pub fn describe(&self) -> String {
        match self {
            LayerConfig::Rescale { scale, offset } => format!("scale={scale:e} offset={offset:e}"),
            LayerConfig::RandomFlipH { seed } => format!("mode=horizontal seed={seed}"),
            LayerConfig::RandomRotation { factor, seed }
            | LayerConfig::RandomZoom { factor, seed } => format!("factor={factor} seed={seed}"),
            LayerConfig::Conv2d {
                filters,
                kernel_size,
                stride,
                padding,
                use_bias,
                init_seed,
            } => format!(
                "filters={filters} kernel_size={kernel_size} stride={stride} padding={padding} use_bias={use_bias} init=glorot_uniform(seed={init_seed})"
            ),
            LayerConfig::SeparableConv2d {
                filters,
                kernel_size,
                padding,
                use_bias,
                depthwise_seed,
                pointwise_seed,
            } => format!(
                "filters={filters} kernel_size={kernel_size} padding={padding} use_bias={use_bias} depthwise_init=glorot_uniform(seed={depthwise_seed}) pointwise_init=glorot_uniform(seed={pointwise_seed})"
            ),
            LayerConfig::MaxPool2d {
                pool_size,
                stride,
                padding,
            } => format!("pool_size={pool_size} stride={stride} padding={padding}"),
            LayerConfig::BatchNorm { epsilon, momentum } => {
                format!("epsilon={epsilon:e} momentum={momentum}")
            }
            LayerConfig::Dense {
                units,
                use_bias,
                init_seed,
            } => format!("units={units} use_bias={use_bias} init=glorot_uniform(seed={init_seed})"),
            LayerConfig::Dropout { rate, seed } => format!("rate={rate} seed={seed}"),
            LayerConfig::Relu
            | LayerConfig::Sigmoid
            | LayerConfig::Flatten
            | LayerConfig::GlobalAvgPool
            | LayerConfig::ResidualAdd => String::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        match *self {
            LayerConfig::Conv2d {
                filters,
                kernel_size,
                stride,
                ..
            } if filters == 0 || kernel_size == 0 || stride == 0 => {
                bad("conv2d: filters, kernel_size and stride must be >= 1".into())
            }
            LayerConfig::SeparableConv2d {
                filters,
                kernel_size,
                ..
            } if filters == 0 || kernel_size == 0 => {
                bad("separable_conv2d: filters and kernel_size must be >= 1".into())
            }
            LayerConfig::MaxPool2d {
                pool_size, stride, ..
            } if pool_size == 0 || stride == 0 => bad("maxpool2d: pool_size and stride must be >= 1".into()),
            LayerConfig::Dense { units: 0, .. } => bad("dense: units must be >= 1".into()),
            LayerConfig::Dropout { rate, .. } if !(0.0..1.0).contains(&rate) => {
                bad(format!("dropout: rate {rate} outside [0, 1)"))
            }
            LayerConfig::RandomRotation { factor, .. } | LayerConfig::RandomZoom { factor, .. }
                if !(factor >= 0.0) =>
            {
                bad(format!("augmentation factor {factor} must be >= 0"))
            }
            LayerConfig::BatchNorm { epsilon, momentum }
                if !(epsilon > 0.0) || !(0.0..=1.0).contains(&momentum) =>
            {
                bad("batchnorm: epsilon must be > 0 and momentum in [0, 1]".into())
            }
            _ => Ok(()),
        }
    }

    /// Per-sample output dims (batch axis excluded) for per-sample input dims.
    pub fn output_dims(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        if inputs.len() != self.arity() {
            return Err(Error::InvalidArgument(format!(
                "{} takes {} input(s), got {}",
                self.kind_name(),
                self.arity(),
                inputs.len()
            )));
        }
        let x = inputs[0];
        let spatial = |x: &[usize]| -> Result<(usize, usize, usize)> {
            match *x {
                [h, w, c] => Ok((h, w, c)),
                _ => Err(Error::InvalidArgument(format!(
                    "{} expects [H, W, C] samples, got {x:?}",
                    self.kind_name()
                ))),
            }
        };
        let window = |h: usize, w: usize, k: usize, s: usize, p: Padding| -> Result<(usize, usize)> {
            let oh = conv::conv_output_size(h, k, s, p);
            let ow = conv::conv_output_size(w, k, s, p);
            match (oh, ow) {
                (Some((oh, _)), Some((ow, _))) => Ok((oh, ow)),
                _ => Err(Error::InvalidArgument(format!(
                    "{} window {k}x{k} does not fit input {h}x{w}",
                    self.kind_name()
                ))),
            }
        };
        match *self {
            LayerConfig::RandomFlipH { .. }
            | LayerConfig::RandomRotation { .. }
            | LayerConfig::RandomZoom { .. } => {
                spatial(x)?;
                Ok(x.to_vec())
            }
            LayerConfig::Rescale { .. }
            | LayerConfig::Relu
            | LayerConfig::Sigmoid
            | LayerConfig::Dropout { .. }
            | LayerConfig::BatchNorm { .. } => Ok(x.to_vec()),
            LayerConfig::Conv2d {
                filters,
                kernel_size,
                stride,
                padding,
                ..
            } => {
                let (h, w, _) = spatial(x)?;
                let (oh, ow) = window(h, w, kernel_size, stride, padding)?;
                Ok(vec![oh, ow, filters])
            }
            LayerConfig::SeparableConv2d {
                filters,
                kernel_size,
                padding,
                ..
            } => {
                let (h, w, _) = spatial(x)?;
                let (oh, ow) = window(h, w, kernel_size, 1, padding)?;
                Ok(vec![oh, ow, filters])
            }
            LayerConfig::MaxPool2d {
                pool_size,
                stride,
                padding,
            } => {
                let (h, w, c) = spatial(x)?;
                let (oh, ow) = window(h, w, pool_size, stride, padding)?;
                Ok(vec![oh, ow, c])
            }
            LayerConfig::Dense { units, .. } => match *x {
                [_] => Ok(vec![units]),
                _ => Err(Error::InvalidArgument(format!(
                    "dense expects flat samples, got {x:?}"
                ))),
            },
            LayerConfig::Flatten => Ok(vec![x.iter().product()]),
            LayerConfig::GlobalAvgPool => {
                let (_, _, c) = spatial(x)?;
                Ok(vec![c])
            }
            LayerConfig::ResidualAdd => {
                if inputs[0] != inputs[1] {
                    return Err(Error::InvalidArgument(format!(
                        "residual_add operands differ: {:?} vs {:?}",
                        inputs[0], inputs[1]
                    )));
                }
                Ok(x.to_vec())
            }
        }
    }

    /// Fresh state for a node named `node` fed with per-sample dims `input`.
    pub fn init_state(&self, node: &str, input: &[usize]) -> Result<LayerState<f32>> {
        let mut state = LayerState::default();
        let channels = input.last().copied().unwrap_or(0);
        let mut kernel = |name: &str, dims: Vec<usize>, seed: u64| -> Result<()> {
            let shape = Shape::new(dims)?;
            let spec = InitSpec::for_kernel(seed, shape.dims())?;
            let value = glorot_uniform(&spec, &shape, &format!("{node}/{name}"))?;
            state.params.insert(name.to_string(), value);
            Ok(())
        };
        match *self {
            LayerConfig::Conv2d {
                filters,
                kernel_size,
                use_bias,
                init_seed,
                ..
            } => {
                kernel("kernel", vec![kernel_size, kernel_size, channels, filters], init_seed)?;
                if use_bias {
                    state.params.insert("bias".into(), Tensor::zeros([filters])?);
                }
            }
            LayerConfig::SeparableConv2d {
                filters,
                kernel_size,
                use_bias,
                depthwise_seed,
                pointwise_seed,
                ..
            } => {
                kernel(
                    "depthwise_kernel",
                    vec![kernel_size, kernel_size, channels, 1],
                    depthwise_seed,
                )?;
                kernel("pointwise_kernel", vec![1, 1, channels, filters], pointwise_seed)?;
                if use_bias {
                    state.params.insert("bias".into(), Tensor::zeros([filters])?);
                }
            }
            LayerConfig::Dense {
                units,
                use_bias,
                init_seed,
            } => {
                let fan_in: usize = input.iter().product();
                kernel("kernel", vec![fan_in, units], init_seed)?;
                if use_bias {
                    state.params.insert("bias".into(), Tensor::zeros([units])?);
                }
            }
            LayerConfig::BatchNorm { .. } => {
                state.params.insert("gamma".into(), Tensor::full([channels], 1.0)?);
                state.params.insert("beta".into(), Tensor::zeros([channels])?);
                state.buffers.insert("moving_mean".into(), Tensor::zeros([channels])?);
                state.buffers.insert("moving_variance".into(), Tensor::full([channels], 1.0)?);
            }
            _ => {}
        }
        Ok(state)
    }
}

/// Named parameters and buffers of one layer, in lexicographic name order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct LayerState<T: Real = f32> {
    pub params: BTreeMap<String, Tensor<T>>,
    pub buffers: BTreeMap<String, Tensor<T>>,
    /// Parameters listed here are frozen; everything else is trainable.
    pub frozen: Vec<String>,
}

impl<T: Real> LayerState<T> {
    pub fn is_trainable(&self, name: &str) -> bool {
        !self.frozen.iter().any(|f| f == name)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor<T>> {
        self.params
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing parameter `{name}`")))
    }

    fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers
            .get(name)
            .ok_or_else(|| Error::InvalidArgument(format!("missing buffer `{name}`")))
    }

    pub fn cast<U: Real>(&self) -> LayerState<U> {
        LayerState {
            params: self.params.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            buffers: self.buffers.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
            frozen: self.frozen.clone(),
        }
    }
}

/// Where a forward pass sits in training; keys every random stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ForwardCtx {
    pub mode: Mode,
    pub global_seed: u64,
    pub epoch: usize,
    pub batch: usize,
}

impl ForwardCtx {
    pub fn infer() -> Self {
        ForwardCtx {
            mode: Mode::Infer,
            global_seed: 0,
            epoch: 0,
            batch: 0,
        }
    }

    pub fn train(global_seed: u64, epoch: usize, batch: usize) -> Self {
        ForwardCtx {
            mode: Mode::Train,
            global_seed,
            epoch,
            batch,
        }
    }

    /// Dropout stream: element `i` of the batch tensor uses counter `i`.
    pub fn dropout_stream(&self, layer_seed: u64, node: &str) -> DetRng {
        DetRng::new(
            self.global_seed,
            format!("dropout/{layer_seed}/{node}/e{}/b{}", self.epoch, self.batch),
        )
    }

    pub fn image_stream(&self, kind: &str, layer_seed: u64, node: &str, index: usize) -> DetRng {
        augment::image_stream(self.global_seed, kind, layer_seed, node, self.epoch, self.batch, index)
    }
}

/// Per-layer values kept from forward for backward.
#[derive(Debug, Clone)]
pub enum Saved<T: Real> {
    Nothing,
    MaxPool(Vec<usize>),
    BatchNorm(BatchNormSaved<T>),
    /// Per-element scale (0 or `1/(1-rate)`); `None` when the layer was identity.
    Dropout(Option<Vec<T>>),
    Flip(Vec<bool>),
    Warp(Vec<WarpParams>),
    /// Depthwise stage output of a separable convolution.
    Separable(Tensor<T>),
}

pub struct LayerGrads<T: Real> {
    pub inputs: Vec<Option<Tensor<T>>>,
    pub params: BTreeMap<String, Tensor<T>>,
}

fn one_input<'a, T: Real>(cfg: &LayerConfig, inputs: &[&'a Tensor<T>]) -> Result<&'a Tensor<T>> {
    if inputs.len() != cfg.arity() {
        return Err(Error::InvalidArgument(format!(
            "{} takes {} input(s), got {}",
            cfg.kind_name(),
            cfg.arity(),
            inputs.len()
        )));
    }
    Ok(inputs[0])
}

/// Run one layer forward on a batch.
pub fn forward<T: Real>(
    cfg: &LayerConfig,
    state: &LayerState<T>,
    inputs: &[&Tensor<T>],
    ctx: &ForwardCtx,
    node: &str,
) -> Result<(Tensor<T>, Saved<T>)> {
    let x = one_input(cfg, inputs)?;
    let train = ctx.mode == Mode::Train;
    let batch = x.dims()[0];
    Ok(match *cfg {
        LayerConfig::Rescale { scale, offset } => {
            let (s, o) = (T::from_f64(scale as f64), T::from_f64(offset as f64));
            (x.map(|v| v * s + o), Saved::Nothing)
        }
        LayerConfig::RandomFlipH { seed } => {
            if !train {
                return Ok((x.clone(), Saved::Nothing));
            }
            let flips: Vec<bool> = (0..batch)
                .map(|i| ctx.image_stream("flip", seed, node, i).next_f32() < 0.5)
                .collect();
            (augment::flip_batch(x, &flips)?, Saved::Flip(flips))
        }
        LayerConfig::RandomRotation { factor, seed } | LayerConfig::RandomZoom { factor, seed } => {
            if !train {
                return Ok((x.clone(), Saved::Nothing));
            }
            let rotation = matches!(cfg, LayerConfig::RandomRotation { .. });
            let params: Vec<WarpParams> = (0..batch)
                .map(|i| {
                    if rotation {
                        let u = ctx.image_stream("rotation", seed, node, i).next_f32();
                        WarpParams::rotation(WarpParams::rotation_angle(u, factor))
                    } else {
                        let u = ctx.image_stream("zoom", seed, node, i).next_f32();
                        WarpParams::zoom(WarpParams::zoom_scale(u, factor))
                    }
                })
                .collect();
            (augment::warp_batch(x, &params)?, Saved::Warp(params))
        }
        LayerConfig::Conv2d {
            stride,
            padding,
            use_bias,
            ..
        } => {
            let bias = if use_bias { Some(state.param("bias")?) } else { None };
            let y = conv::conv2d_forward(x, state.param("kernel")?, bias, stride, padding)?;
            (y, Saved::Nothing)
        }
        LayerConfig::SeparableConv2d {
            padding, use_bias, ..
        } => {
            let bias = if use_bias { Some(state.param("bias")?) } else { None };
            let (y, mid) = conv::separable_conv2d_forward(
                x,
                state.param("depthwise_kernel")?,
                state.param("pointwise_kernel")?,
                bias,
                padding,
            )?;
            (y, Saved::Separable(mid))
        }
        LayerConfig::MaxPool2d {
            pool_size,
            stride,
            padding,
        } => {
            let (y, arg) = pool::maxpool2d_forward(x, pool_size, stride, padding)?;
            (y, Saved::MaxPool(arg))
        }
        LayerConfig::BatchNorm { epsilon, .. } => {
            let (y, saved) = norm::batchnorm_forward(
                x,
                state.param("gamma")?,
                state.param("beta")?,
                state.buffer("moving_mean")?,
                state.buffer("moving_variance")?,
                T::from_f64(epsilon as f64),
                train,
            )?;
            (y, Saved::BatchNorm(saved))
        }
        LayerConfig::Relu => (x.map(relu), Saved::Nothing),
        LayerConfig::Sigmoid => (x.map(sigmoid), Saved::Nothing),
        LayerConfig::Dense { use_bias, .. } => {
            let bias = if use_bias { Some(state.param("bias")?) } else { None };
            (dense::dense_forward(x, state.param("kernel")?, bias)?, Saved::Nothing)
        }
        LayerConfig::Flatten => {
            let flat = x.len() / batch;
            (x.clone().reshape([batch, flat])?, Saved::Nothing)
        }
        LayerConfig::Dropout { rate, seed } => {
            if !train || rate == 0.0 {
                return Ok((x.clone(), Saved::Dropout(None)));
            }
            let rng = ctx.dropout_stream(seed, node);
            let keep_scale = T::ONE / (T::ONE - T::from_f64(rate as f64));
            let mask: Vec<T> = (0..x.len() as u64)
                .map(|i| {
                    let u = (rng.peek(i) >> 40) as f32 * (1.0 / 16_777_216.0);
                    if u >= rate {
                        keep_scale
                    } else {
                        T::ZERO
                    }
                })
                .collect();
            let y: Vec<T> = x.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
            (Tensor::new(x.dims().to_vec(), y)?, Saved::Dropout(Some(mask)))
        }
        LayerConfig::GlobalAvgPool => (pool::global_avg_pool_forward(x)?, Saved::Nothing),
        LayerConfig::ResidualAdd => {
            let b = inputs[1];
            if x.shape() != b.shape() {
                return Err(Error::ShapeMismatch {
                    left: x.shape().clone(),
                    right: b.shape().clone(),
                });
            }
            let y = x.data().iter().zip(b.data()).map(|(&p, &q)| p + q).collect();
            (Tensor::new(x.dims().to_vec(), y)?, Saved::Nothing)
        }
    })
}

/// Which gradients a backward call should produce.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradRequest {
    pub inputs: bool,
    pub params: bool,
}

impl GradRequest {
    pub const ALL: GradRequest = GradRequest {
        inputs: true,
        params: true,
    };
}

fn saved_mismatch(cfg: &LayerConfig) -> Error {
    Error::InvalidArgument(format!("saved state does not belong to a {} layer", cfg.kind_name()))
}

/// Reverse-mode step for one layer.
#[allow(clippy::too_many_arguments)]
pub fn backward<T: Real>(
    cfg: &LayerConfig,
    state: &LayerState<T>,
    inputs: &[&Tensor<T>],
    output: &Tensor<T>,
    saved: &Saved<T>,
    dy: &Tensor<T>,
    want: GradRequest,
) -> Result<LayerGrads<T>> {
    let x = one_input(cfg, inputs)?;
    if dy.shape() != output.shape() {
        return Err(Error::ShapeMismatch {
            left: dy.shape().clone(),
            right: output.shape().clone(),
        });
    }
    let mut params = BTreeMap::new();
    let single = |t: Option<Tensor<T>>| vec![t];
    let inputs_grad = match (cfg, saved) {
        (LayerConfig::Rescale { scale, .. }, _) => {
            let s = T::from_f64(*scale as f64);
            single(want.inputs.then(|| dy.map(|g| g * s)))
        }
        (LayerConfig::RandomFlipH { .. }, Saved::Flip(flips)) => {
            single(want.inputs.then(|| augment::flip_batch(dy, flips)).transpose()?)
        }
        (LayerConfig::RandomRotation { .. } | LayerConfig::RandomZoom { .. }, Saved::Warp(p)) => {
            single(want.inputs.then(|| augment::warp_batch_backward(dy, p)).transpose()?)
        }
        (
            LayerConfig::RandomFlipH { .. }
            | LayerConfig::RandomRotation { .. }
            | LayerConfig::RandomZoom { .. },
            Saved::Nothing,
        ) => single(want.inputs.then(|| dy.clone())),
        (
            LayerConfig::Conv2d {
                stride,
                padding,
                use_bias,
                ..
            },
            _,
        ) => {
            let g = conv::conv2d_backward(
                x,
                state.param("kernel")?,
                dy,
                *stride,
                *padding,
                *use_bias,
                want.inputs,
                want.params,
            )?;
            if let Some(k) = g.kernel {
                params.insert("kernel".to_string(), k);
            }
            if let Some(b) = g.bias {
                params.insert("bias".to_string(), b);
            }
            single(g.input)
        }
        (
            LayerConfig::SeparableConv2d {
                padding, use_bias, ..
            },
            Saved::Separable(mid),
        ) => {
            let pw = conv::conv2d_backward(
                mid,
                state.param("pointwise_kernel")?,
                dy,
                1,
                Padding::Valid,
                *use_bias,
                true,
                want.params,
            )?;
            let dmid = pw.input.expect("requested");
            let (dx, dk) = conv::depthwise_backward(
                x,
                state.param("depthwise_kernel")?,
                &dmid,
                *padding,
                want.inputs,
                want.params,
            )?;
            if let Some(k) = dk {
                params.insert("depthwise_kernel".to_string(), k);
            }
            if let Some(k) = pw.kernel {
                params.insert("pointwise_kernel".to_string(), k);
            }
            if let Some(b) = pw.bias {
                params.insert("bias".to_string(), b);
            }
            single(dx)
        }
        (LayerConfig::MaxPool2d { .. }, Saved::MaxPool(arg)) => single(
            want.inputs
                .then(|| pool::maxpool2d_backward(x.dims(), arg, dy))
                .transpose()?,
        ),
        (LayerConfig::BatchNorm { .. }, Saved::BatchNorm(s)) => {
            let g = norm::batchnorm_backward(state.param("gamma")?, s, dy, want.inputs)?;
            if want.params {
                params.insert("gamma".to_string(), g.gamma);
                params.insert("beta".to_string(), g.beta);
            }
            single(g.input)
        }
        (LayerConfig::Relu, _) => single(want.inputs.then(|| {
            let d = x
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&v, &g)| if v > T::ZERO { g } else { T::ZERO })
                .collect();
            Tensor::new(x.dims().to_vec(), d)
        }).transpose()?),
        (LayerConfig::Sigmoid, _) => single(want.inputs.then(|| {
            let d = output
                .data()
                .iter()
                .zip(dy.data())
                .map(|(&y, &g)| g * (y * (T::ONE - y)))
                .collect();
            Tensor::new(x.dims().to_vec(), d)
        }).transpose()?),
        (LayerConfig::Dense { use_bias, .. }, _) => {
            let g = dense::dense_backward(x, state.param("kernel")?, dy, *use_bias, want.inputs)?;
            if want.params {
                params.insert("kernel".to_string(), g.kernel);
                if let Some(b) = g.bias {
                    params.insert("bias".to_string(), b);
                }
            }
            single(g.input)
        }
        (LayerConfig::Flatten, _) => {
            single(want.inputs.then(|| dy.clone().reshape(x.dims().to_vec())).transpose()?)
        }
        (LayerConfig::Dropout { .. }, Saved::Dropout(mask)) => single(want.inputs.then(|| {
            match mask {
                None => Ok(dy.clone()),
                Some(m) => {
                    let d = dy.data().iter().zip(m).map(|(&g, &s)| g * s).collect();
                    Tensor::new(dy.dims().to_vec(), d)
                }
            }
        }).transpose()?),
        (LayerConfig::GlobalAvgPool, _) => single(
            want.inputs
                .then(|| pool::global_avg_pool_backward(x.dims(), dy))
                .transpose()?,
        ),
        (LayerConfig::ResidualAdd, _) => {
            if want.inputs {
                vec![Some(dy.clone()), Some(dy.clone())]
            } else {
                vec![None, None]
            }
        }
        _ => return Err(saved_mismatch(cfg)),
    };
    Ok(LayerGrads {
        inputs: inputs_grad,
        params,
    })
}

/// A layer with its own state and retained forward activations.
#[derive(Debug, Clone)]
pub struct Layer<T: Real = f32> {
    pub id: String,
    pub config: LayerConfig,
    pub state: LayerState<T>,
    retained: Option<(Vec<Tensor<T>>, Tensor<T>, Saved<T>)>,
}

impl<T: Real> Layer<T> {
    pub fn new(id: impl Into<String>, config: LayerConfig, state: LayerState<T>) -> Self {
        Layer {
            id: id.into(),
            config,
            state,
            retained: None,
        }
    }

    pub fn forward(&mut self, inputs: &[&Tensor<T>], ctx: &ForwardCtx) -> Result<Tensor<T>> {
        let (y, saved) = forward(&self.config, &self.state, inputs, ctx, &self.id)?;
        self.retained = Some((inputs.iter().map(|&t| t.clone()).collect(), y.clone(), saved));
        Ok(y)
    }

    pub fn backward(&self, dy: &Tensor<T>) -> Result<LayerGrads<T>> {
        let (inputs, output, saved) = self
            .retained
            .as_ref()
            .ok_or_else(|| Error::BackwardBeforeForward(Some(self.id.clone())))?;
        let refs: Vec<&Tensor<T>> = inputs.iter().collect();
        backward(&self.config, &self.state, &refs, output, saved, dy, GradRequest::ALL)
    }

    pub fn saved(&self) -> Option<&Saved<T>> {
        self.retained.as_ref().map(|(_, _, s)| s)
    }
}
