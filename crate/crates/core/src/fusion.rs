//! Cross-stream exchange between the two encoders.
//!
//! * Detail refinement: the residual stream's fine map `M` is resized to each
//!   VGG level, concatenated with it and fused by a 3x3 conv.
//! * Dense aggregation: every VGG level is reduced to one channel by a 1x1
//!   conv, all five reductions are resized to the target level, concatenated
//!   and mixed by another 1x1 conv.
//! * Injection: the aggregated map is concatenated with the residual-stream
//!   level of the same size and fused by a 3x3 conv.
//!
//! All fusion weights are shared across recursive stages.

use crate::autograd::{Graph, Var};
use crate::backbones::{FeaturePyramid, Pyramid, LEVELS};
use crate::config::NetworkConfig;
use crate::error::{Error, Result};
use crate::layers::{Conv2d, Init};
use crate::params::ParamStore;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Which branch a resize takes, decided by comparing spatial areas.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResizeDirection {
    Up,
    Down,
    None,
}

/// Bilinear resampling to `target`, tagged with the branch it represents.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ResizeOp {
    pub direction: ResizeDirection,
    pub target: (usize, usize),
}

impl ResizeOp {
    /// Up when the source covers a smaller area than the target, down when
    /// larger, none when equal. Equal-area sources of a different aspect
    /// ratio are still resampled to `target`.
    pub fn plan(source: (usize, usize), target: (usize, usize)) -> Self {
        let (src, dst) = (source.0 * source.1, target.0 * target.1);
        let direction = match src.cmp(&dst) {
            std::cmp::Ordering::Less => ResizeDirection::Up,
            std::cmp::Ordering::Greater => ResizeDirection::Down,
            std::cmp::Ordering::Equal => ResizeDirection::None,
        };
        Self { direction, target }
    }

    pub fn apply(&self, g: &Graph<'_>, x: Var) -> Var {
        g.resize(x, self.target.0, self.target.1)
    }
}

/// The per-level output of dense aggregation.
#[derive(Clone, Debug)]
pub struct AggregatedMap {
    pub data: Var,
    pub source_level: usize,
    pub stage: usize,
    /// Resize branch applied to each reduced level, in level order.
    pub directions: [ResizeDirection; LEVELS],
}

fn check_level(level: usize) -> Result<()> {
    if (1..=LEVELS).contains(&level) {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("pyramid level {level} outside 1..=5")))
    }
}

/// Injects the saliency map into every VGG level.
#[derive(Clone, Debug)]
pub struct DetailRefinement {
    convs: Vec<Conv2d>,
}

impl DetailRefinement {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let convs = config
            .vgg_widths()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("fusion.drm.level{}", i + 1), c + 1, c, 3, 1, Init::KAIMING, rng))
            .collect();
        Self { convs }
    }

    pub fn conv(&self, level: usize) -> &Conv2d {
        &self.convs[level - 1]
    }

    /// `X_i <- ReLU(Conv3x3([X_i, resize(M)]))`; returns the new level and
    /// the resize branch taken.
    pub fn refine_details(&self, g: &Graph<'_>, level: usize, x: Var, m: Var) -> Result<(Var, ResizeDirection)> {
        check_level(level)?;
        let conv = self.conv(level);
        let xs = g.shape(x);
        if xs.c + 1 != conv.in_channels {
            return Err(Error::Config(format!(
                "refinement conv at level {level} expects {} feature channels, got {}",
                conv.in_channels - 1,
                xs.c
            )));
        }
        let op = ResizeOp::plan(g.shape(m).spatial(), xs.spatial());
        let m = op.apply(g, m);
        let fused = conv.forward(g, g.concat(&[x, m]));
        Ok((g.relu(fused), op.direction))
    }

    pub fn refine_all(&self, g: &Graph<'_>, x: &FeaturePyramid, m: Var) -> Result<FeaturePyramid> {
        let mut out = Vec::with_capacity(LEVELS);
        for (i, &xi) in x.iter().enumerate() {
            out.push(self.refine_details(g, i + 1, xi, m)?.0);
        }
        Ok(Pyramid::new(out.try_into().expect("five levels")))
    }
}

/// Channel reduction and cross-level mixing of the VGG pyramid.
#[derive(Clone, Debug)]
pub struct DenseAggregation {
    reduce: Vec<Conv2d>,
    mix: Vec<Conv2d>,
    channels: usize,
}

impl DenseAggregation {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let channels = config.agg_channels();
        let reduce = config
            .vgg_widths()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("fusion.dam.reduce.level{}", i + 1), c, 1, 1, 1, Init::KAIMING, rng))
            .collect();
        let mix = (1..=LEVELS)
            .map(|i| Conv2d::new(store, &format!("fusion.dam.mix.level{i}"), LEVELS, channels, 1, 1, Init::KAIMING, rng))
            .collect();
        Self { reduce, mix, channels }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn reduce_conv(&self, level: usize) -> &Conv2d {
        &self.reduce[level - 1]
    }

    pub fn mix_conv(&self, level: usize) -> &Conv2d {
        &self.mix[level - 1]
    }

    /// One-channel reductions of every level.
    pub fn reduce_all(&self, g: &Graph<'_>, x: &FeaturePyramid) -> FeaturePyramid {
        let levels: Vec<Var> = x.iter().zip(&self.reduce).map(|(&xi, conv)| conv.forward(g, xi)).collect();
        Pyramid::new(levels.try_into().expect("five levels"))
    }

    /// Mixes pre-reduced levels into the aggregated map for `level`.
    pub fn aggregate_reduced(&self, g: &Graph<'_>, reduced: &FeaturePyramid, level: usize, stage: usize) -> Result<AggregatedMap> {
        check_level(level)?;
        let target = g.shape(*reduced.level(level)).spatial();
        let mut directions = [ResizeDirection::None; LEVELS];
        let parts: Vec<Var> = reduced
            .iter()
            .enumerate()
            .map(|(j, &r)| {
                let op = ResizeOp::plan(g.shape(r).spatial(), target);
                directions[j] = op.direction;
                op.apply(g, r)
            })
            .collect();
        let mixed = self.mix_conv(level).forward(g, g.concat(&parts));
        Ok(AggregatedMap {
            data: g.relu(mixed),
            source_level: level,
            stage,
            directions,
        })
    }

    pub fn dense_aggregate(&self, g: &Graph<'_>, x: &FeaturePyramid, level: usize, stage: usize) -> Result<AggregatedMap> {
        check_level(level)?;
        let reduced = self.reduce_all(g, x);
        self.aggregate_reduced(g, &reduced, level, stage)
    }

    pub fn aggregate_all(&self, g: &Graph<'_>, x: &FeaturePyramid, stage: usize) -> Result<Vec<AggregatedMap>> {
        let reduced = self.reduce_all(g, x);
        (1..=LEVELS).map(|i| self.aggregate_reduced(g, &reduced, i, stage)).collect()
    }
}

/// Pushes aggregated VGG maps into the residual pyramid.
#[derive(Clone, Debug)]
pub struct Injection {
    convs: Vec<Conv2d>,
}

impl Injection {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, config: &NetworkConfig, rng: &mut R) -> Self {
        let agg = config.agg_channels();
        let convs = config
            .resnet_widths()
            .iter()
            .enumerate()
            .map(|(i, &c)| Conv2d::new(store, &format!("fusion.dam.inject.level{}", i + 1), c + agg, c, 3, 1, Init::KAIMING, rng))
            .collect();
        Self { convs }
    }

    pub fn conv(&self, level: usize) -> &Conv2d {
        &self.convs[level - 1]
    }

    /// `F_i <- ReLU(Conv3x3([F_i, XX_i]))`. Sizes must already agree.
    pub fn inject_aggregate(&self, g: &Graph<'_>, f: Var, agg: &AggregatedMap) -> Result<Var> {
        check_level(agg.source_level)?;
        let fs = g.shape(f);
        let as_ = g.shape(agg.data);
        if fs.spatial() != as_.spatial() {
            return Err(Error::Shape(format!(
                "aggregated map {as_} does not match residual level {} of size {fs}",
                agg.source_level
            )));
        }
        let conv = self.conv(agg.source_level);
        if fs.c + as_.c != conv.in_channels {
            return Err(Error::Config(format!(
                "injection conv at level {} expects {} input channels, got {}",
                agg.source_level,
                conv.in_channels,
                fs.c + as_.c
            )));
        }
        Ok(g.relu(conv.forward(g, g.concat(&[f, agg.data]))))
    }

    pub fn inject_all(&self, g: &Graph<'_>, f: &FeaturePyramid, aggs: &[AggregatedMap]) -> Result<FeaturePyramid> {
        let mut out = Vec::with_capacity(LEVELS);
        for (&fi, agg) in f.iter().zip(aggs) {
            out.push(self.inject_aggregate(g, fi, agg)?);
        }
        Ok(Pyramid::new(out.try_into().expect("five levels")))
    }
}
