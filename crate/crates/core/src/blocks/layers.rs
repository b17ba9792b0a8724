use super::attention::{Attention, AttentionKind};
use super::spec::{conv_shape, pool_shape, HeadSpec, PoolSpec, Shape3, StageSpec, StemSpec, Unit};
use super::ForwardCtx;
use crate::error::{Error, Result};
use crate::tensor::{BufferId, ParamId, ParamStore, Rng, RunningStats, Tensor, Var};

/// Registers parameters under a name prefix while tracking the activation
/// shape and the per-sample FLOP count of what has been built so far.
pub(crate) struct Builder<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut Rng,
    pub prefix: String,
    pub shape: Shape3,
    pub flops: u64,
}

impl<'a> Builder<'a> {
    pub fn new(store: &'a mut ParamStore, rng: &'a mut Rng, prefix: impl Into<String>, shape: Shape3) -> Self {
        Builder {
            store,
            rng,
            prefix: prefix.into(),
            shape,
            flops: 0,
        }
    }

    fn name(&self, part: &str) -> String {
        format!("{}.{}", self.prefix, part)
    }

    fn numel(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64
    }

    pub fn param(&mut self, part: &str, value: Tensor) -> Result<ParamId> {
        let name = self.name(part);
        self.store.add(name, value)
    }

    /// Bias-free conv with fan-out normal init, `std = sqrt(2 / (C_out·k·k))`.
    pub fn conv(&mut self, part: &str, c_out: usize, kernel: usize, stride: usize, padding: usize) -> Result<Conv> {
        let c_in = self.shape[0];
        let out = conv_shape(self.shape, c_out, kernel, stride, padding)
            .ok_or_else(|| Error::Config(format!("{}: input too small for conv", self.name(part))))?;
        let std = (2.0 / (c_out * kernel * kernel) as f32).sqrt();
        let w = Tensor::randn(&[c_out, c_in, kernel, kernel], std, self.rng);
        let weight = self.param(&format!("{part}.weight"), w)?;
        self.flops += 2 * (c_out * c_in * kernel * kernel * out[1] * out[2]) as u64;
        self.shape = out;
        Ok(Conv {
            weight,
            stride,
            padding,
        })
    }

    pub fn bn(&mut self, part: &str) -> Result<BatchNorm> {
        let c = self.shape[0];
        let gamma = self.param(&format!("{part}.gamma"), Tensor::full(&[c], 1.0))?;
        let beta = self.param(&format!("{part}.beta"), Tensor::zeros(&[c]))?;
        let stats = self.store.add_buffer(self.name(part), RunningStats::new(c))?;
        self.flops += 2 * self.numel();
        Ok(BatchNorm { gamma, beta, stats })
    }

    pub fn relu(&mut self) {
        self.flops += self.numel();
    }

    /// Fully connected layer with weight and bias uniform in `±1/sqrt(fan_in)`.
    pub fn linear(&mut self, part: &str, fan_in: usize, fan_out: usize) -> Result<Linear> {
        let bound = 1.0 / (fan_in as f32).sqrt();
        let w = Tensor::uniform(&[fan_in, fan_out], bound, self.rng);
        let b = Tensor::uniform(&[fan_out], bound, self.rng);
        let weight = self.param(&format!("{part}.weight"), w)?;
        let bias = self.param(&format!("{part}.bias"), b)?;
        self.flops += 2 * (fan_in * fan_out) as u64 + fan_out as u64;
        Ok(Linear { weight, bias })
    }

    pub fn pool(&mut self, p: PoolSpec) -> Result<()> {
        let out = pool_shape(self.shape, p).ok_or_else(|| Error::Config(format!("{}: input too small for pooling", self.prefix)))?;
        self.shape = out;
        self.flops += (p.kernel * p.kernel) as u64 * self.numel();
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: ParamId,
    pub stride: usize,
    pub padding: usize,
}

impl Conv {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        ctx.tape.conv2d(x, w, None, self.stride, self.padding)
    }
}

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub stats: BufferId,
}

impl BatchNorm {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let g = ctx.param(self.gamma);
        let b = ctx.param(self.beta);
        let training = ctx.training();
        let (y, batch) = ctx
            .tape
            .batchnorm2d(x, g, b, ctx.store.stats(self.stats), training)?;
        if let Some(batch) = batch {
            ctx.stat_updates.push((self.stats, batch));
        }
        Ok(y)
    }
}

#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let w = ctx.param(self.weight);
        let b = ctx.param(self.bias);
        ctx.tape.linear(x, w, Some(b))
    }
}

#[derive(Clone, Debug)]
pub struct ConvBn {
    pub conv: Conv,
    pub bn: BatchNorm,
}

impl ConvBn {
    fn build(b: &mut Builder<'_>, part: &str, c_out: usize, k: usize, stride: usize, pad: usize) -> Result<Self> {
        let conv = b.conv(part, c_out, k, stride, pad)?;
        let bn = b.bn(&format!("{part}.bn"))?;
        Ok(ConvBn { conv, bn })
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let y = self.conv.forward(ctx, x)?;
        self.bn.forward(ctx, y)
    }
}

/// Residual unit: `relu(main(x) + shortcut(x))`, the main path being
/// conv-BN-ReLU-conv-BN for `Basic` and 1×1/3×3/1×1 for `Bottleneck`.
/// The shortcut is a 1×1 conv + BN projection when the shape changes.
#[derive(Clone, Debug)]
pub struct Residual {
    pub path: Vec<ConvBn>,
    pub shortcut: Option<ConvBn>,
}

impl Residual {
    fn build(b: &mut Builder<'_>, part: &str, bottleneck: bool, c_out: usize, stride: usize) -> Result<Self> {
        let input = b.shape;
        let mut path = Vec::new();
        if bottleneck {
            let width = c_out / 4;
            path.push(ConvBn::build(b, &format!("{part}.conv1"), width, 1, 1, 0)?);
            b.relu();
            path.push(ConvBn::build(b, &format!("{part}.conv2"), width, 3, stride, 1)?);
            b.relu();
            path.push(ConvBn::build(b, &format!("{part}.conv3"), c_out, 1, 1, 0)?);
        } else {
            path.push(ConvBn::build(b, &format!("{part}.conv1"), c_out, 3, stride, 1)?);
            b.relu();
            path.push(ConvBn::build(b, &format!("{part}.conv2"), c_out, 3, 1, 1)?);
        }
        let output = b.shape;
        let shortcut = if stride != 1 || input[0] != c_out {
            b.shape = input;
            let s = ConvBn::build(b, &format!("{part}.shortcut"), c_out, 1, stride, 0)?;
            if b.shape != output {
                return Err(Error::Config(format!("{part}: shortcut shape {:?} != path shape {output:?}", b.shape)));
            }
            Some(s)
        } else {
            None
        };
        b.flops += 2 * output.iter().product::<usize>() as u64;
        Ok(Residual { path, shortcut })
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let mut y = x;
        let last = self.path.len() - 1;
        for (i, cb) in self.path.iter().enumerate() {
            y = cb.forward(ctx, y)?;
            if i != last {
                y = ctx.tape.relu(y);
            }
        }
        let s = match &self.shortcut {
            Some(cb) => cb.forward(ctx, x)?,
            None => x,
        };
        let sum = ctx.tape.add(y, s)?;
        Ok(ctx.tape.relu(sum))
    }
}

/// BN-ReLU-conv1×1-BN-ReLU-conv3×3 producing `growth` new channels, concatenated to the input.
#[derive(Clone, Debug)]
pub struct DenseLayer {
    pub bn1: BatchNorm,
    pub conv1: Conv,
    pub bn2: BatchNorm,
    pub conv2: Conv,
}

impl DenseLayer {
    fn build(b: &mut Builder<'_>, part: &str, growth: usize, bn_size: usize) -> Result<Self> {
        let input = b.shape;
        let bn1 = b.bn(&format!("{part}.norm1"))?;
        b.relu();
        let conv1 = b.conv(&format!("{part}.conv1"), bn_size * growth, 1, 1, 0)?;
        let bn2 = b.bn(&format!("{part}.norm2"))?;
        b.relu();
        let conv2 = b.conv(&format!("{part}.conv2"), growth, 3, 1, 1)?;
        b.shape = [input[0] + growth, input[1], input[2]];
        Ok(DenseLayer { bn1, conv1, bn2, conv2 })
    }

    fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let y = self.bn1.forward(ctx, x)?;
        let y = ctx.tape.relu(y);
        let y = self.conv1.forward(ctx, y)?;
        let y = self.bn2.forward(ctx, y)?;
        let y = ctx.tape.relu(y);
        let y = self.conv2.forward(ctx, y)?;
        ctx.tape.concat_channels(&[x, y])
    }
}

#[derive(Clone, Debug)]
pub enum Layer {
    Attention(Attention),
    ConvBnRelu(ConvBn),
    MaxPool(PoolSpec),
    Residual(Residual),
    Dense(DenseLayer),
    /// BN, ReLU, 1×1 conv, 2×2 average pool.
    Transition { bn: BatchNorm, conv: Conv },
    NormRelu(BatchNorm),
}

impl Layer {
    fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        match self {
            Layer::Attention(a) => a.forward(ctx, x),
            Layer::ConvBnRelu(cb) => {
                let y = cb.forward(ctx, x)?;
                Ok(ctx.tape.relu(y))
            }
            Layer::MaxPool(p) => ctx.tape.max_pool2d(x, p.kernel, p.stride, p.padding),
            Layer::Residual(r) => r.forward(ctx, x),
            Layer::Dense(d) => d.forward(ctx, x),
            Layer::Transition { bn, conv } => {
                let y = bn.forward(ctx, x)?;
                let y = ctx.tape.relu(y);
                let y = conv.forward(ctx, y)?;
                ctx.tape.avg_pool2d(y, 2, 2)
            }
            Layer::NormRelu(bn) => {
                let y = bn.forward(ctx, x)?;
                Ok(ctx.tape.relu(y))
            }
        }
    }
}

/// One of `f0..fm`, `g1..gm` or a block of a star branch.
#[derive(Clone, Debug)]
pub struct Block {
    pub name: String,
    pub layers: Vec<Layer>,
    pub in_shape: Shape3,
    pub out_shape: Shape3,
    /// FLOPs per sample.
    pub flops: u64,
}

impl Block {
    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        let shape = ctx.tape.shape(x);
        if shape.len() != 4 || shape[1..] != self.in_shape {
            return Err(Error::Dimension {
                op: "block",
                axis: format!("{} input C×H×W", self.name),
                expected: self.in_shape.iter().product(),
                got: shape.iter().skip(1).product(),
            });
        }
        ctx.executed.push(self.name.clone());
        let mut y = x;
        for layer in &self.layers {
            y = layer.forward(ctx, y)?;
        }
        Ok(y)
    }

    pub fn build_stem(
        spec: &StemSpec,
        in_shape: Shape3,
        name: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut b = Builder::new(store, rng, name, in_shape);
        let mut layers = Vec::new();
        for (i, c) in spec.convs.iter().enumerate() {
            let cb = ConvBn::build(&mut b, &format!("conv{i}"), c.channels, c.kernel, c.stride, c.padding)?;
            b.relu();
            layers.push(Layer::ConvBnRelu(cb));
        }
        if let Some(p) = spec.pool {
            b.pool(p)?;
            layers.push(Layer::MaxPool(p));
        }
        Ok(Block {
            name: name.to_string(),
            layers,
            in_shape,
            out_shape: b.shape,
            flops: b.flops,
        })
    }

    pub fn build_stage(
        spec: &StageSpec,
        in_shape: Shape3,
        name: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut b = Builder::new(store, rng, name, in_shape);
        let mut layers = Vec::new();
        match spec.unit {
            Unit::Basic | Unit::Bottleneck => {
                let bottleneck = spec.unit == Unit::Bottleneck;
                for i in 0..spec.blocks {
                    let stride = if i == 0 { spec.stride } else { 1 };
                    let r = Residual::build(&mut b, &format!("unit{i}"), bottleneck, spec.channels, stride)?;
                    layers.push(Layer::Residual(r));
                }
            }
            Unit::Plain => {
                if spec.stride == 2 {
                    let p = PoolSpec {
                        kernel: 2,
                        stride: 2,
                        padding: 0,
                    };
                    b.pool(p)?;
                    layers.push(Layer::MaxPool(p));
                }
                for i in 0..spec.blocks {
                    let cb = ConvBn::build(&mut b, &format!("conv{i}"), spec.channels, 3, 1, 1)?;
                    b.relu();
                    layers.push(Layer::ConvBnRelu(cb));
                }
            }
            Unit::Dense { growth, bn_size } => {
                if spec.stride == 2 {
                    let bn = b.bn("transition.norm")?;
                    b.relu();
                    let conv = b.conv("transition.conv", spec.channels, 1, 1, 0)?;
                    b.pool(PoolSpec {
                        kernel: 2,
                        stride: 2,
                        padding: 0,
                    })?;
                    layers.push(Layer::Transition { bn, conv });
                }
                for i in 0..spec.blocks {
                    layers.push(Layer::Dense(DenseLayer::build(&mut b, &format!("dense{i}"), growth, bn_size)?));
                }
            }
        }
        if spec.post_norm {
            let bn = b.bn("post_norm")?;
            b.relu();
            layers.push(Layer::NormRelu(bn));
        }
        Ok(Block {
            name: name.to_string(),
            layers,
            in_shape,
            out_shape: b.shape,
            flops: b.flops,
        })
    }

    /// Returns the block with `kind` applied to its input first. The attention
    /// parameters are new and named `<block>.att.*`; `None` returns the block unchanged.
    pub fn with_attention(
        mut self,
        kind: AttentionKind,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut b = Builder::new(store, rng, format!("{}.att", self.name), self.in_shape);
        let att = Attention::build(kind, &mut b)?;
        if !att.is_identity() {
            self.flops += b.flops;
            self.layers.insert(0, Layer::Attention(att));
        }
        Ok(self)
    }
}

/// Attaches attention in front of a block; see [`Block::with_attention`].
pub fn attach_attention(block: Block, kind: AttentionKind, store: &mut ParamStore, rng: &mut Rng) -> Result<Block> {
    block.with_attention(kind, store, rng)
}

/// Global average pool, hidden ReLU layers, then the class logits.
#[derive(Clone, Debug)]
pub struct Head {
    pub name: String,
    pub hidden: Vec<Linear>,
    pub out: Linear,
    pub in_shape: Shape3,
    pub flops: u64,
}

impl Head {
    pub fn build(
        spec: &HeadSpec,
        in_shape: Shape3,
        num_classes: usize,
        name: &str,
        store: &mut ParamStore,
        rng: &mut Rng,
    ) -> Result<Self> {
        let mut b = Builder::new(store, rng, name, in_shape);
        b.flops += in_shape.iter().product::<usize>() as u64;
        let mut width = in_shape[0];
        let mut hidden = Vec::new();
        for (i, &h) in spec.hidden.iter().enumerate() {
            hidden.push(b.linear(&format!("hidden{i}"), width, h)?);
            b.flops += h as u64;
            width = h;
        }
        let out = b.linear("out", width, num_classes)?;
        Ok(Head {
            name: name.to_string(),
            hidden,
            out,
            in_shape,
            flops: b.flops,
        })
    }

    pub fn forward(&self, ctx: &mut ForwardCtx<'_>, x: Var) -> Result<Var> {
        ctx.executed.push(self.name.clone());
        let mut y = ctx.tape.global_avg_pool(x)?;
        for h in &self.hidden {
            y = h.forward(ctx, y)?;
            y = ctx.tape.relu(y);
        }
        self.out.forward(ctx, y)
    }
}
