//! Builders for the two reference architectures.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{GraphBuilder, ModelGraph};
use crate::layers::{LayerConfig, Padding};

/// Every seed that feeds a model build or a training run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedSet {
    /// Shuffling, and initializers the listings leave unseeded.
    pub global: u64,
    /// Conv and depthwise kernel initializers.
    pub kernel: u64,
    pub pointwise: u64,
    pub dropout: u64,
    pub augmentation: u64,
}

impl Default for SeedSet {
    fn default() -> Self {
        SeedSet {
            global: 1001,
            kernel: 1,
            pointwise: 2,
            dropout: 7001,
            augmentation: 1,
        }
    }
}

impl SeedSet {
    pub fn with_global(global: u64) -> Self {
        SeedSet {
            global,
            ..SeedSet::default()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum XceptionVariant {
    /// Separable convolutions with residual adds.
    CpuDet,
    /// Full convolutions and no residual path.
    GpuDet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "convnet")]
    ConvNet,
    #[serde(rename = "mini-xception")]
    MiniXception,
    #[serde(rename = "mini-xception-gpu")]
    MiniXceptionGpu,
}

impl ModelKind {
    pub const ALL: [ModelKind; 3] = [ModelKind::ConvNet, ModelKind::MiniXception, ModelKind::MiniXceptionGpu];

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::ConvNet => "convnet",
            ModelKind::MiniXception => "mini-xception",
            ModelKind::MiniXceptionGpu => "mini-xception-gpu",
        }
    }

    pub fn build(self, pdim: usize, seeds: &SeedSet) -> Result<ModelGraph> {
        match self {
            ModelKind::ConvNet => build_convnet(pdim, seeds),
            ModelKind::MiniXception => build_mini_xception(pdim, seeds, XceptionVariant::CpuDet),
            ModelKind::MiniXceptionGpu => build_mini_xception(pdim, seeds, XceptionVariant::GpuDet),
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ModelKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "unknown model `{s}` (expected convnet, mini-xception or mini-xception-gpu)"
                ))
            })
    }
}

/// Smallest input side the ConvNet accepts: the fifth valid 3x3 conv needs
/// a 3x3 input, which 77 and below do not leave.
pub const CONVNET_MIN_PDIM: usize = 78;

fn augmentation(b: &mut GraphBuilder, seeds: &SeedSet) -> String {
    let s = seeds.augmentation;
    let x = b.add(LayerConfig::RandomFlipH { seed: s }, &["input"]);
    let x = b.add(LayerConfig::RandomRotation { factor: 0.1, seed: s }, &[&x]);
    let x = b.add(LayerConfig::RandomZoom { factor: 0.2, seed: s }, &[&x]);
    b.add(
        LayerConfig::Rescale {
            scale: 1.0 / 255.0,
            offset: 0.0,
        },
        &[&x],
    )
}

fn head(b: &mut GraphBuilder, x: &str, seeds: &SeedSet) -> String {
    let x = b.add(
        LayerConfig::Dropout {
            rate: 0.5,
            seed: seeds.dropout,
        },
        &[x],
    );
    let x = b.add(
        LayerConfig::Dense {
            units: 1,
            use_bias: true,
            init_seed: seeds.global,
        },
        &[&x],
    );
    b.add(LayerConfig::Sigmoid, &[&x])
}

/// Augmentation, rescale, four conv+relu+maxpool(2) stages of 32/64/128/256
/// filters, a final 256-filter conv+relu, flatten, dropout 0.5, dense 1,
/// sigmoid. All convolutions 3x3 valid.
pub fn build_convnet(pdim: usize, seeds: &SeedSet) -> Result<ModelGraph> {
    let mut b = GraphBuilder::new("convnet", vec![pdim, pdim, 3]);
    let mut x = augmentation(&mut b, seeds);
    for (i, filters) in [32, 64, 128, 256, 256].into_iter().enumerate() {
        x = b.add(LayerConfig::conv2d(filters, 3, seeds.global), &[&x]);
        x = b.add(LayerConfig::Relu, &[&x]);
        if i < 4 {
            x = b.add(
                LayerConfig::MaxPool2d {
                    pool_size: 2,
                    stride: 2,
                    padding: Padding::Valid,
                },
                &[&x],
            );
        }
    }
    x = b.add(LayerConfig::Flatten, &[&x]);
    let out = head(&mut b, &x, seeds);
    b.build(&out).map_err(|e| match e {
        Error::Node { node, source } => Error::InvalidArgument(format!(
            "convnet cannot be built for pdim {pdim} (minimum {CONVNET_MIN_PDIM}): layer `{node}`: {source}"
        )),
        e => e,
    })
}

/// Entry 5x5 valid conv (32, no bias), then for each size in
/// 32/64/128/256/512: BN, relu, sepconv, BN, relu, sepconv, maxpool(3, 2,
/// same), plus a 1x1 stride-2 conv on the block input added back. Global
/// average pool, dropout 0.5, dense 1, sigmoid.
///
/// `GpuDet` swaps the separable convolutions for full 3x3 convolutions and
/// drops the residual path.
pub fn build_mini_xception(pdim: usize, seeds: &SeedSet, variant: XceptionVariant) -> Result<ModelGraph> {
    let name = match variant {
        XceptionVariant::CpuDet => "mini_xception",
        XceptionVariant::GpuDet => "mini_xception_gpu",
    };
    let mut b = GraphBuilder::new(name, vec![pdim, pdim, 3]);
    let x = augmentation(&mut b, seeds);
    let mut x = b.add(
        LayerConfig::Conv2d {
            filters: 32,
            kernel_size: 5,
            stride: 1,
            padding: Padding::Valid,
            use_bias: false,
            init_seed: seeds.kernel,
        },
        &[&x],
    );
    let conv3 = |size: usize| match variant {
        XceptionVariant::CpuDet => LayerConfig::SeparableConv2d {
            filters: size,
            kernel_size: 3,
            padding: Padding::Same,
            use_bias: false,
            depthwise_seed: seeds.kernel,
            pointwise_seed: seeds.pointwise,
        },
        XceptionVariant::GpuDet => LayerConfig::Conv2d {
            filters: size,
            kernel_size: 3,
            stride: 1,
            padding: Padding::Same,
            use_bias: false,
            init_seed: seeds.kernel,
        },
    };
    for size in [32, 64, 128, 256, 512] {
        let residual = x.clone();
        x = b.add(LayerConfig::batchnorm(), &[&x]);
        x = b.add(LayerConfig::Relu, &[&x]);
        x = b.add(conv3(size), &[&x]);
        x = b.add(LayerConfig::batchnorm(), &[&x]);
        x = b.add(LayerConfig::Relu, &[&x]);
        x = b.add(conv3(size), &[&x]);
        x = b.add(
            LayerConfig::MaxPool2d {
                pool_size: 3,
                stride: 2,
                padding: Padding::Same,
            },
            &[&x],
        );
        if variant == XceptionVariant::CpuDet {
            let r = b.add(
                LayerConfig::Conv2d {
                    filters: size,
                    kernel_size: 1,
                    stride: 2,
                    padding: Padding::Same,
                    use_bias: false,
                    init_seed: seeds.kernel,
                },
                &[&residual],
            );
            x = b.add(LayerConfig::ResidualAdd, &[&x, &r]);
        }
    }
    x = b.add(LayerConfig::GlobalAvgPool, &[&x]);
    let out = head(&mut b, &x, seeds);
    b.build(&out)
}
