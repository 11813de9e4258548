//! Selective fusion head.
//!
//! The final-stage aggregates are each resized to the saliency map's size,
//! projected to one channel by a 3x3 conv and summed with the map. The sum
//! goes through a small encoder/decoder that emits two-channel logits
//! (background, foreground).
//!
//! | layer      | kernel | stride | output |
//! |------------|--------|--------|--------|
//! | enc1 (x3)  | 3x3    | 1      | H      |
//! | enc2 (x3)  | 3x3    | 2      | H/2    |
//! | enc3 (x3)  | 3x3    | 2      | H/4    |
//! | enc4 (x4)  | 3x3    | 2      | H/8    |
//! | dec4       | 3x3 T  | 1      | H/8    |
//! | dec3..dec1 | 3x3 T  | 2      | ..H    |
//! | classifier | 1x1    | 1      | H      |
//!
//! Encoder convs are followed by batch norm and ReLU; the decoder is purely
//! affine.

use crate::autograd::{Graph, Var};
use crate::backbones::{SaliencyMap, LEVELS};
use crate::config::{NetworkConfig, SDF_ENCODER_LAYERS};
use crate::error::{Error, Result};
use crate::fusion::AggregatedMap;
use crate::kernels::ConvGeom;
use crate::layers::{BatchNorm2d, Conv2d, Deconv2d, Init};
use crate::params::ParamStore;
use crate::tensor::{Shape, Tensor};
use rand::Rng;

/// What went into a fused feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Constituent {
    Level(usize),
    Map,
}

#[derive(Clone, Debug)]
pub struct FusedFeature {
    pub data: Var,
    pub constituents: Vec<Constituent>,
}

/// One row of the layer trace: name and output shape.
pub type TraceRow = (String, Shape);

#[derive(Clone, Debug)]
struct EncoderLayer {
    conv: Conv2d,
    bn: BatchNorm2d,
}

#[derive(Clone, Debug)]
pub struct SdfHead {
    fuse: Vec<Conv2d>,
    encoder: Vec<Vec<EncoderLayer>>,
    decoder: Vec<Deconv2d>,
    classifier: Conv2d,
    max_resolution: usize,
}

impl SdfHead {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let agg = config.agg_channels();
        let width = config.sdf_width();
        let fuse = (1..=LEVELS)
            .map(|i| Conv2d::new(store, &format!("sdf.fuse.level{i}"), agg, 1, 3, 1, Init::KAIMING, rng))
            .collect();
        let mut in_c = 1;
        let encoder = SDF_ENCODER_LAYERS
            .iter()
            .enumerate()
            .map(|(b, &n)| {
                (0..n)
                    .map(|l| {
                        let name = format!("sdf.enc{}.conv{}", b + 1, l + 1);
                        let stride = if b > 0 && l == 0 { 2 } else { 1 };
                        let conv = Conv2d::new(store, &name, in_c, width, 3, stride, Init::KAIMING, rng);
                        in_c = width;
                        EncoderLayer {
                            conv,
                            bn: BatchNorm2d::new(store, &format!("{name}.bn"), width),
                        }
                    })
                    .collect()
            })
            .collect();
        let decoder = (1..=4)
            .rev()
            .map(|k| {
                let stride = if k == 4 { 1 } else { 2 };
                Deconv2d::new(store, &format!("sdf.dec{k}"), width, width, stride, rng)
            })
            .collect();
        let classifier = Conv2d::new(store, "sdf.classifier", width, 2, 1, 1, Init::KAIMING, rng);
        Self {
            fuse,
            encoder,
            decoder,
            classifier,
            max_resolution: config.max_resolution,
        }
    }

    pub fn fuse_conv(&self, level: usize) -> &Conv2d {
        &self.fuse[level - 1]
    }

    pub fn classifier(&self) -> &Conv2d {
        &self.classifier
    }

    pub fn decoder(&self) -> &[Deconv2d] {
        &self.decoder
    }

    /// `S = sum_i Conv(resize(XX_i)) + M`.
    pub fn fuse(&self, g: &Graph<'_>, aggregates: &[AggregatedMap], m: Var) -> Result<FusedFeature> {
        let ms = g.shape(m);
        if ms.c != 1 {
            return Err(Error::Shape(format!("saliency map must have one channel, got {ms}")));
        }
        let mut by_level: [Option<&AggregatedMap>; LEVELS] = [None; LEVELS];
        for a in aggregates {
            if !(1..=LEVELS).contains(&a.source_level) || by_level[a.source_level - 1].is_some() {
                return Err(Error::InvalidInput(format!("unexpected aggregate for level {}", a.source_level)));
            }
            by_level[a.source_level - 1] = Some(a);
        }
        let mut terms = Vec::with_capacity(LEVELS + 1);
        let mut constituents = Vec::with_capacity(LEVELS + 1);
        for (i, slot) in by_level.iter().enumerate() {
            let a = slot.ok_or_else(|| Error::InvalidInput(format!("aggregate for level {} is missing", i + 1)))?;
            let s = g.shape(a.data);
            if s.h.max(s.w) > self.max_resolution {
                return Err(Error::Shape(format!(
                    "aggregate at level {} is {s}, above the configured maximum {}",
                    i + 1,
                    self.max_resolution
                )));
            }
            let resized = g.resize(a.data, ms.h, ms.w);
            terms.push((self.fuse[i].forward(g, resized), 1.0));
            constituents.push(Constituent::Level(i + 1));
        }
        terms.push((m, 1.0));
        constituents.push(Constituent::Map);
        Ok(FusedFeature {
            data: g.weighted_sum(&terms),
            constituents,
        })
    }

    /// Two-channel logits for the fused feature.
    pub fn forward(&self, g: &Graph<'_>, s: &FusedFeature) -> Result<Var> {
        self.forward_traced(g, s.data).map(|(v, _)| v)
    }

    /// Like [`forward`](Self::forward) on a raw map, also returning the output shape of
    /// every table row.
    pub fn forward_traced(&self, g: &Graph<'_>, s: Var) -> Result<(Var, Vec<TraceRow>)> {
        let shape = g.shape(s);
        if shape.c != 1 {
            return Err(Error::Shape(format!("fused feature must have one channel, got {shape}")));
        }
        if !shape.h.is_multiple_of(16) || !shape.w.is_multiple_of(16) || shape.h == 0 || shape.w == 0 {
            return Err(Error::InvalidInput(format!(
                "fusion head input {}x{} is not divisible by 16",
                shape.h, shape.w
            )));
        }
        let mut trace = Vec::with_capacity(9);
        let mut h = s;
        for (b, block) in self.encoder.iter().enumerate() {
            for layer in block {
                h = g.relu(layer.bn.forward(g, layer.conv.forward(g, h)));
            }
            trace.push((format!("conv{}", b + 1), g.shape(h)));
        }
        let (h, dec_trace) = self.decode(g, h);
        trace.extend(dec_trace);
        let logits = self.classifier.forward(g, h);
        trace.push(("classifier".to_string(), g.shape(logits)));
        Ok((logits, trace))
    }

    /// The affine decoder on its own, without the classifier.
    pub fn decode(&self, g: &Graph<'_>, x: Var) -> (Var, Vec<TraceRow>) {
        let mut trace = Vec::with_capacity(4);
        let mut h = x;
        for (k, layer) in self.decoder.iter().enumerate() {
            h = layer.forward(g, h);
            trace.push((format!("dec{}", 4 - k), g.shape(h)));
        }
        (h, trace)
    }
}

/// Foreground probability from two-channel logits, inside the graph:
/// `sigmoid(fg - bg)`, which equals the channel-1 softmax.
pub fn saliency_var(g: &Graph<'_>, logits: Var) -> Result<Var> {
    let c = g.shape(logits).c;
    if c != 2 {
        return Err(Error::Shape(format!("logits need 2 channels, got {c}")));
    }
    let diff = Tensor::from_vec(Shape::new(1, 2, 1, 1), vec![-1.0, 1.0])?;
    let d = g.conv2d(logits, g.input(diff), None, ConvGeom::same(1, 1));
    Ok(g.sigmoid(d))
}

/// Per-pixel softmax over (background, foreground); returns the foreground
/// probability.
pub fn saliency_from_logits(logits: &Tensor) -> Result<SaliencyMap> {
    let s = logits.shape();
    if s.c != 2 {
        return Err(Error::Shape(format!("logits need 2 channels, got {s}")));
    }
    let mut out = Tensor::zeros(Shape::new(s.n, 1, s.h, s.w));
    for n in 0..s.n {
        let bg = logits.plane(n, 0);
        let fg = logits.plane(n, 1);
        let dst = &mut out.data_mut()[n * s.plane()..(n + 1) * s.plane()];
        for ((d, &b), &f) in dst.iter_mut().zip(bg).zip(fg) {
            let m = b.max(f);
            let (eb, ef) = ((b - m).exp(), (f - m).exp());
            *d = ef / (eb + ef);
        }
    }
    SaliencyMap::new(out)
}
