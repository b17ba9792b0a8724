use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::conv_output_extent;

/// One convolution of the stem, always followed by batch norm and ReLU.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvSpec {
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolSpec {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

/// Block `f0`: a conv stack with an optional max pool.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StemSpec {
    pub convs: Vec<ConvSpec>,
    #[serde(default)]
    pub pool: Option<PoolSpec>,
}

/// The repeated unit of a stage.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Unit {
    /// Two 3×3 convs with a residual shortcut.
    Basic,
    /// 1×1, 3×3, 1×1 convs with 4× expansion; `channels` is the expanded width.
    Bottleneck,
    /// Densely connected layers. A stride-2 stage opens with a transition
    /// (BN, ReLU, 1×1 conv to `channels`, 2×2 average pool).
    Dense { growth: usize, bn_size: usize },
    /// Plain conv-BN-ReLU; a stride-2 stage opens with a 2×2 max pool.
    Plain,
}

/// One of the blocks `f1..fm`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub unit: Unit,
    pub blocks: usize,
    pub channels: usize,
    pub stride: usize,
    /// Closing BN + ReLU after the last unit.
    #[serde(default)]
    pub post_norm: bool,
}

/// Classifier `fc`: global average pool, hidden ReLU layers, output layer.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HeadSpec {
    #[serde(default)]
    pub hidden: Vec<usize>,
}

/// Declarative backbone: stem `f0`, stages `f1..fm` and head `fc`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub input_size: usize,
    pub stem: StemSpec,
    pub stages: Vec<StageSpec>,
    #[serde(default)]
    pub head: HeadSpec,
    pub num_classes: usize,
}

/// Channel, height and width of one sample's activation.
pub type Shape3 = [usize; 3];

impl BackboneSpec {
    /// Stem conv to 8 channels plus two single-BasicBlock stages (8 and 16 channels).
    pub fn tiny_cnn(num_classes: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            input_size: 32,
            stem: StemSpec {
                convs: vec![conv3(8)],
                pool: None,
            },
            stages: vec![basic(1, 8, 1), basic(1, 16, 2)],
            head: HeadSpec::default(),
            num_classes,
        }
    }

    /// Four single-BasicBlock stages on 16×16 inputs, for exercising four-layer topologies cheaply.
    pub fn tiny_cnn4(num_classes: usize) -> Self {
        BackboneSpec {
            in_channels: 3,
            input_size: 16,
            stem: StemSpec {
                convs: vec![conv3(8)],
                pool: None,
            },
            stages: vec![basic(1, 8, 1), basic(1, 8, 2), basic(1, 16, 1), basic(1, 16, 2)],
            head: HeadSpec::default(),
            num_classes,
        }
    }

    /// CIFAR ResNet of depth `6n + 2`: three stages of `n` BasicBlocks at 16/32/64 channels.
    pub fn resnet_cifar(depth: usize, num_classes: usize) -> Result<Self> {
        if depth < 8 || !(depth - 2).is_multiple_of(6) {
            return Err(Error::Config(format!("CIFAR ResNet depth must be 6n+2, got {depth}")));
        }
        let n = (depth - 2) / 6;
        Ok(BackboneSpec {
            in_channels: 3,
            input_size: 32,
            stem: StemSpec {
                convs: vec![conv3(16)],
                pool: None,
            },
            stages: vec![basic(n, 16, 1), basic(n, 32, 2), basic(n, 64, 2)],
            head: HeadSpec::default(),
            num_classes,
        })
    }

    pub fn vgg16(num_classes: usize) -> Self {
        let plain = |blocks, channels, stride| StageSpec {
            unit: Unit::Plain,
            blocks,
            channels,
            stride,
            post_norm: false,
        };
        BackboneSpec {
            in_channels: 3,
            input_size: 224,
            stem: StemSpec {
                convs: vec![conv3(64), conv3(64)],
                pool: Some(PoolSpec {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                }),
            },
            stages: vec![
                plain(2, 128, 1),
                plain(3, 256, 2),
                plain(3, 512, 2),
                plain(3, 512, 2),
            ],
            head: HeadSpec {
                hidden: vec![512, 512],
            },
            num_classes,
        }
    }

    pub fn resnet50(num_classes: usize) -> Self {
        let bottleneck = |blocks, channels, stride| StageSpec {
            unit: Unit::Bottleneck,
            blocks,
            channels,
            stride,
            post_norm: false,
        };
        BackboneSpec {
            in_channels: 3,
            input_size: 224,
            stem: imagenet_stem(),
            stages: vec![
                bottleneck(3, 256, 1),
                bottleneck(4, 512, 2),
                bottleneck(6, 1024, 2),
                bottleneck(3, 2048, 2),
            ],
            head: HeadSpec::default(),
            num_classes,
        }
    }

    pub fn densenet121(num_classes: usize) -> Self {
        let unit = Unit::Dense {
            growth: 32,
            bn_size: 4,
        };
        let dense = |blocks, channels, stride, post_norm| StageSpec {
            unit,
            blocks,
            channels,
            stride,
            post_norm,
        };
        BackboneSpec {
            in_channels: 3,
            input_size: 224,
            stem: imagenet_stem(),
            stages: vec![
                dense(6, 64, 1, false),
                dense(12, 128, 2, false),
                dense(24, 256, 2, false),
                dense(16, 512, 2, true),
            ],
            head: HeadSpec::default(),
            num_classes,
        }
    }

    /// Looks up a preset by name: `tiny`, `tiny4`, `resnet20/32/44/56`, `vgg16`, `resnet50`, `densenet121`.
    pub fn preset(name: &str, num_classes: usize) -> Result<Self> {
        match name {
            "tiny" => Ok(Self::tiny_cnn(num_classes)),
            "tiny4" => Ok(Self::tiny_cnn4(num_classes)),
            "vgg16" => Ok(Self::vgg16(num_classes)),
            "resnet50" => Ok(Self::resnet50(num_classes)),
            "densenet121" => Ok(Self::densenet121(num_classes)),
            _ => match name.strip_prefix("resnet").and_then(|d| d.parse().ok()) {
                Some(depth @ (20 | 32 | 44 | 56)) => Self::resnet_cifar(depth, num_classes),
                _ => Err(Error::Config(format!("unknown backbone preset {name:?}"))),
            },
        }
    }

    /// Number of blocks after the stem, `m`.
    pub fn depth(&self) -> usize {
        self.stages.len()
    }

    /// Checks the spec and returns the activation shape after each of `f0..fm`.
    pub fn block_shapes(&self) -> Result<Vec<Shape3>> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.in_channels == 0 || self.input_size == 0 {
            return bad("input channels and size must be positive".into());
        }
        if self.num_classes == 0 {
            return bad("num_classes must be positive".into());
        }
        if self.stages.is_empty() {
            return bad("backbone needs at least one stage".into());
        }
        if self.stem.convs.is_empty() {
            return bad("stem needs at least one conv".into());
        }
        if self.head.hidden.contains(&0) {
            return bad("head hidden widths must be positive".into());
        }
        let mut shape = [self.in_channels, self.input_size, self.input_size];
        for (i, conv) in self.stem.convs.iter().enumerate() {
            if conv.channels == 0 || conv.kernel == 0 || conv.stride == 0 {
                return bad(format!("stem conv {i}: channels, kernel and stride must be positive"));
            }
            shape = conv_shape(shape, conv.channels, conv.kernel, conv.stride, conv.padding)
                .ok_or_else(|| Error::Config(format!("stem conv {i} shrinks the input to nothing")))?;
        }
        if let Some(p) = self.stem.pool {
            shape = pool_shape(shape, p).ok_or_else(|| Error::Config("stem pool shrinks the input to nothing".into()))?;
        }
        let mut shapes = vec![shape];
        for (k, stage) in self.stages.iter().enumerate() {
            shape = stage_output(shape, stage).map_err(|msg| Error::Config(format!("stage {}: {msg}", k + 1)))?;
            shapes.push(shape);
        }
        Ok(shapes)
    }

    /// Width feeding the head, i.e. the channel count after `fm`.
    pub fn feature_channels(&self) -> Result<usize> {
        Ok(self.block_shapes()?.last().expect("nonempty")[0])
    }
}

fn conv3(channels: usize) -> ConvSpec {
    ConvSpec {
        channels,
        kernel: 3,
        stride: 1,
        padding: 1,
    }
}

fn basic(blocks: usize, channels: usize, stride: usize) -> StageSpec {
    StageSpec {
        unit: Unit::Basic,
        blocks,
        channels,
        stride,
        post_norm: false,
    }
}

fn imagenet_stem() -> StemSpec {
    StemSpec {
        convs: vec![ConvSpec {
            channels: 64,
            kernel: 7,
            stride: 2,
            padding: 3,
        }],
        pool: Some(PoolSpec {
            kernel: 3,
            stride: 2,
            padding: 1,
        }),
    }
}

pub(crate) fn conv_shape(s: Shape3, c_out: usize, k: usize, stride: usize, pad: usize) -> Option<Shape3> {
    Some([
        c_out,
        conv_output_extent(s[1], k, stride, pad)?,
        conv_output_extent(s[2], k, stride, pad)?,
    ])
}

pub(crate) fn pool_shape(s: Shape3, p: PoolSpec) -> Option<Shape3> {
    if p.kernel == 0 || p.stride == 0 || p.padding * 2 > p.kernel {
        return None;
    }
    conv_shape(s, s[0], p.kernel, p.stride, p.padding)
}

fn stage_output(input: Shape3, stage: &StageSpec) -> std::result::Result<Shape3, String> {
    if stage.blocks == 0 || stage.channels == 0 {
        return Err("block count and channels must be positive".into());
    }
    if !(stage.stride == 1 || stage.stride == 2) {
        return Err(format!("stride must be 1 or 2, got {}", stage.stride));
    }
    let shrink = |s: Shape3, c| conv_shape(s, c, 3, stage.stride, 1).ok_or("input too small for stride".to_string());
    match stage.unit {
        Unit::Basic => shrink(input, stage.channels),
        Unit::Bottleneck => {
            if !stage.channels.is_multiple_of(4) {
                return Err("bottleneck channels must be a multiple of 4".into());
            }
            shrink(input, stage.channels)
        }
        Unit::Plain => {
            if stage.stride == 1 {
                Ok([stage.channels, input[1], input[2]])
            } else {
                let p = PoolSpec {
                    kernel: 2,
                    stride: 2,
                    padding: 0,
                };
                let pooled = pool_shape(input, p).ok_or("input too small for pooling")?;
                Ok([stage.channels, pooled[1], pooled[2]])
            }
        }
        Unit::Dense { growth, bn_size } => {
            if growth == 0 || bn_size == 0 {
                return Err("growth and bn_size must be positive".into());
            }
            let entry = if stage.stride == 1 {
                if stage.channels != input[0] {
                    return Err(format!(
                        "dense stage without transition keeps {} input channels, spec says {}",
                        input[0], stage.channels
                    ));
                }
                input
            } else {
                if input[1] < 2 || input[2] < 2 {
                    return Err("input too small for transition pooling".into());
                }
                [stage.channels, input[1] / 2, input[2] / 2]
            };
            Ok([entry[0] + stage.blocks * growth, entry[1], entry[2]])
        }
    }
}
