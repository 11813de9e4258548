//! The two parallel encoders and the saliency decoder of the residual stream.
//!
//! Pyramid convention: level `i` (1-based) is the *output* of block `i`, so
//! level 1 sits at half the input resolution and level 5 at 1/32.

use crate::autograd::{Graph, Var};
use crate::config::{NetworkConfig, VGG_LAYERS_PER_BLOCK};
use crate::error::{Error, Result};
use crate::layers::{Conv2d, ConvRelu, Deconv2d, Init};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use rand::Rng;

pub const LEVELS: usize = 5;

/// One entry per backbone block, index 0 holding level 1.
#[derive(Clone, Debug, PartialEq)]
pub struct Pyramid<T> {
    pub levels: [T; LEVELS],
}

/// Graph-resident pyramid of activations.
pub type FeaturePyramid = Pyramid<Var>;

impl<T> Pyramid<T> {
    pub fn new(levels: [T; LEVELS]) -> Self {
        Self { levels }
    }

    /// Level `i`, 1-based.
    pub fn level(&self, i: usize) -> &T {
        &self.levels[i - 1]
    }

    pub fn iter(&self) -> impl Iterator<Item = &T> {
        self.levels.iter()
    }

    pub fn map<U>(&self, f: impl FnMut(&T) -> U) -> Pyramid<U> {
        Pyramid {
            levels: self.levels.each_ref().map(f),
        }
    }
}

impl FeaturePyramid {
    pub fn shapes(&self, g: &Graph<'_>) -> Pyramid<Shape> {
        self.map(|&v| g.shape(v))
    }
}

/// Single-channel score map with every value in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap(Tensor);

impl SaliencyMap {
    pub fn new(t: Tensor) -> Result<Self> {
        if t.shape().c != 1 {
            return Err(Error::Shape(format!(
                "saliency map must have one channel, got {}",
                t.shape()
            )));
        }
        if let Some(v) = t.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::InvalidInput(format!("saliency value {v} outside [0, 1]")));
        }
        Ok(Self(t))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn into_tensor(self) -> Tensor {
        self.0
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.0.shape().spatial()
    }

    /// Batch item `n` as a stand-alone map.
    pub fn item(&self, n: usize) -> SaliencyMap {
        SaliencyMap(self.0.item_tensor(n))
    }
}

/// Shape requirements shared by both encoders.
pub fn check_image(shape: Shape) -> Result<()> {
    if shape.n == 0 {
        return Err(Error::InvalidInput("empty batch".into()));
    }
    if shape.c != 3 {
        return Err(Error::Shape(format!("expected a 3-channel image, got {shape}")));
    }
    if shape.h == 0 || shape.w == 0 || !shape.h.is_multiple_of(32) || !shape.w.is_multiple_of(32) {
        return Err(Error::Shape(format!(
            "image size {}x{} is not divisible by 32",
            shape.h, shape.w
        )));
    }
    Ok(())
}

/// VGG-16 style stream: five blocks of 3x3 conv + ReLU, each closed by a
/// 2x2 max pool.
#[derive(Clone, Debug)]
pub struct VggStream {
    blocks: Vec<Vec<ConvRelu>>,
    widths: [usize; LEVELS],
}

impl VggStream {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let widths = config.vgg_widths();
        let mut in_c = 3;
        let blocks = (0..LEVELS)
            .map(|b| {
                (0..VGG_LAYERS_PER_BLOCK[b])
                    .map(|l| {
                        let name = format!("vgg.block{}.conv{}", b + 1, l + 1);
                        let conv = Conv2d::new(store, &name, in_c, widths[b], 3, 1, Init::KAIMING, rng);
                        in_c = widths[b];
                        ConvRelu(conv)
                    })
                    .collect()
            })
            .collect();
        Self { blocks, widths }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        self.widths
    }

    pub fn convs(&self) -> impl Iterator<Item = &Conv2d> {
        self.blocks.iter().flatten().map(|c| &c.0)
    }

    pub fn forward(&self, g: &Graph<'_>, image: Var) -> Result<FeaturePyramid> {
        check_image(g.shape(image))?;
        let mut h = image;
        let mut levels = Vec::with_capacity(LEVELS);
        for block in &self.blocks {
            for layer in block {
                h = layer.forward(g, h);
            }
            h = g.max_pool2(h);
            levels.push(h);
        }
        Ok(Pyramid::new(levels.try_into().expect("five levels")))
    }
}

/// Residual unit: plain two-conv block or 1x1-3x3-1x1 bottleneck.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    convs: Vec<Conv2d>,
    shortcut: Option<Conv2d>,
}

impl ResidualBlock {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_c: usize,
        out_c: usize,
        stride: usize,
        bottleneck: bool,
        branch_gain: f64,
        rng: &mut R,
    ) -> Self {
        let last = Init::Kaiming { gain: branch_gain };
        let convs = if bottleneck {
            let mid = (out_c / 4).max(1);
            vec![
                Conv2d::new(store, &format!("{name}.conv1"), in_c, mid, 1, 1, Init::KAIMING, rng),
                Conv2d::new(store, &format!("{name}.conv2"), mid, mid, 3, stride, Init::KAIMING, rng),
                Conv2d::new(store, &format!("{name}.conv3"), mid, out_c, 1, 1, last, rng),
            ]
        } else {
            vec![
                Conv2d::new(store, &format!("{name}.conv1"), in_c, out_c, 3, stride, Init::KAIMING, rng),
                Conv2d::new(store, &format!("{name}.conv2"), out_c, out_c, 3, 1, last, rng),
            ]
        };
        let shortcut = (in_c != out_c || stride != 1).then(|| {
            Conv2d::new(store, &format!("{name}.shortcut"), in_c, out_c, 1, stride, Init::Kaiming { gain: 0.5f64.sqrt() }, rng)
        });
        Self { convs, shortcut }
    }

    /// The convolution closing the residual branch.
    pub fn branch_output(&self) -> &Conv2d {
        self.convs.last().expect("non-empty branch")
    }

    pub fn forward(&self, g: &Graph<'_>, x: Var) -> Var {
        let mut h = x;
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(g, h);
            if i < last {
                h = g.relu(h);
            }
        }
        let identity = match &self.shortcut {
            Some(proj) => proj.forward(g, x),
            None => x,
        };
        g.relu(g.add(h, identity))
    }
}

/// ResNet-50 style stream. Level 1 is the stride-2 stem; levels 2..5 are the
/// four residual stages (the first one after a 2x2 max pool).
#[derive(Clone, Debug)]
pub struct ResnetStream {
    stem: Conv2d,
    stages: Vec<Vec<ResidualBlock>>,
    widths: [usize; LEVELS],
}

impl ResnetStream {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let widths = config.resnet_widths();
        let blocks = config.resnet_blocks();
        let bottleneck = config.uses_bottleneck();
        let total: usize = blocks.iter().sum();
        let branch_gain = 1.0 / (total as f64).sqrt();
        let stem = Conv2d::new(store, "resnet.stem.conv", 3, widths[0], 7, 2, Init::KAIMING, rng);
        let mut in_c = widths[0];
        let stages = (0..4)
            .map(|s| {
                (0..blocks[s])
                    .map(|b| {
                        let stride = if s > 0 && b == 0 { 2 } else { 1 };
                        let name = format!("resnet.layer{}.block{}", s + 1, b + 1);
                        let block = ResidualBlock::new(store, &name, in_c, widths[s + 1], stride, bottleneck, branch_gain, rng);
                        in_c = widths[s + 1];
                        block
                    })
                    .collect()
            })
            .collect();
        Self { stem, stages, widths }
    }

    pub fn widths(&self) -> [usize; LEVELS] {
        self.widths
    }

    pub fn blocks(&self) -> impl Iterator<Item = &ResidualBlock> {
        self.stages.iter().flatten()
    }

    pub fn forward(&self, g: &Graph<'_>, image: Var) -> Result<FeaturePyramid> {
        check_image(g.shape(image))?;
        let f1 = g.relu(self.stem.forward(g, image));
        let mut levels = vec![f1];
        let mut h = g.max_pool2(f1);
        for stage in &self.stages {
            for block in stage {
                h = block.forward(g, h);
            }
            levels.push(h);
        }
        Ok(Pyramid::new(levels.try_into().expect("five levels")))
    }
}

/// Five stride-2 3x3 deconvolutions from level 5 up to input resolution.
/// Each intermediate output is concatenated with the residual-stream level
/// of matching size before the next deconvolution, so features injected at
/// any level reach the map.
#[derive(Clone, Debug)]
pub struct SaliencyDecoder {
    /// Index 0 consumes level 5; index 4 emits the one-channel map.
    layers: Vec<Deconv2d>,
    max_resolution: usize,
}

impl SaliencyDecoder {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let enc = config.resnet_widths();
        let dec = config.decoder_widths();
        let mut in_c = enc[4];
        let layers = (0..LEVELS)
            .map(|k| {
                let level = LEVELS - k;
                let layer = Deconv2d::new(store, &format!("resnet.decoder.deconv{level}"), in_c, dec[k], 2, rng);
                if level > 1 {
                    in_c = dec[k] + enc[level - 2];
                }
                layer
            })
            .collect();
        Self {
            layers,
            max_resolution: config.max_resolution,
        }
    }

    pub fn layers(&self) -> &[Deconv2d] {
        &self.layers
    }

    /// Decodes the residual pyramid into the fine-scale map `M` in `[0, 1]`.
    pub fn forward(&self, g: &Graph<'_>, f: &FeaturePyramid) -> Result<Var> {
        let top = g.shape(*f.level(5));
        let (out_h, out_w) = (top.h << LEVELS, top.w << LEVELS);
        if out_h.max(out_w) > self.max_resolution {
            return Err(Error::Shape(format!(
                "decoding a {}x{} level-5 map gives {}x{}, above the configured maximum {}",
                top.h, top.w, out_h, out_w, self.max_resolution
            )));
        }
        let mut h = *f.level(5);
        for (k, layer) in self.layers.iter().enumerate() {
            if g.shape(h).c != layer.in_channels {
                return Err(Error::Shape(format!(
                    "decoder layer {} expects {} channels, got {}",
                    k + 1,
                    layer.in_channels,
                    g.shape(h).c
                )));
            }
            h = layer.forward(g, h);
            let level = LEVELS - k;
            if level > 1 {
                h = g.relu(h);
                let skip = *f.level(level - 1);
                if g.shape(skip).spatial() != g.shape(h).spatial() {
                    return Err(Error::Shape(format!(
                        "decoder output {} does not match level {} of size {}",
                        g.shape(h),
                        level - 1,
                        g.shape(skip)
                    )));
                }
                h = g.concat(&[h, skip]);
            }
        }
        Ok(g.sigmoid(h))
    }
}
