//! The recursive two-stream model, its losses and the training loop.
//!
//! Stage 1 runs both encoders on the image and decodes the residual
//! pyramid into `M^1`. Each further stage aggregates the current VGG
//! pyramid, refines it with the previous map, injects the aggregate into the
//! residual pyramid and decodes again. After the last stage the aggregates
//! and the map are fused by the selective head. Fusion weights are shared
//! across stages.

use crate::autograd::{Gradients, Graph, Var};
use crate::backbones::{check_image, FeaturePyramid, ResnetStream, SaliencyDecoder, SaliencyMap, VggStream};
use crate::config::{consumer_seed, LossWeights, NetworkConfig, OptimizerConfig, RunConfig, SeedConsumer};
use crate::error::{Error, Result};
use crate::fusion::{AggregatedMap, DenseAggregation, DetailRefinement, Injection};
use crate::layers::{Conv2d, Init, BN_MOMENTUM};
use crate::metrics;
use crate::params::{ParamId, ParamStore};
use crate::sdf::{saliency_var, SdfHead, TraceRow};
use crate::tensor::{Shape, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::fmt;
use std::rc::Rc;

/// Clamp applied to scores inside binary cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Which parts of the model are built.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Variant {
    pub vgg: bool,
    pub resnet: bool,
    pub drm: bool,
    pub dam: bool,
    pub sdf: bool,
}

impl Variant {
    pub const FULL: Variant = Variant {
        vgg: true,
        resnet: true,
        drm: true,
        dam: true,
        sdf: true,
    };
    pub const VGG_ONLY: Variant = Variant {
        vgg: true,
        resnet: false,
        drm: false,
        dam: false,
        sdf: false,
    };
    pub const RESNET_ONLY: Variant = Variant {
        vgg: false,
        resnet: true,
        drm: false,
        dam: false,
        sdf: false,
    };
    pub const DRM: Variant = Variant {
        vgg: true,
        resnet: true,
        drm: true,
        dam: false,
        sdf: false,
    };
    pub const DRM_DAM: Variant = Variant {
        vgg: true,
        resnet: true,
        drm: true,
        dam: true,
        sdf: false,
    };

    /// Single streams first, then one module added at a time.
    pub fn ladder() -> [Variant; 5] {
        [Self::VGG_ONLY, Self::RESNET_ONLY, Self::DRM, Self::DRM_DAM, Self::FULL]
    }

    pub fn name(&self) -> String {
        match *self {
            Self::VGG_ONLY => "vgg-only".into(),
            Self::RESNET_ONLY => "resnet-only".into(),
            Self::DRM => "drm".into(),
            Self::DRM_DAM => "drm-dam".into(),
            Self::FULL => "full".into(),
            v => format!(
                "custom(vgg={},resnet={},drm={},dam={},sdf={})",
                v.vgg, v.resnet, v.drm, v.dam, v.sdf
            ),
        }
    }

    /// Inverse of [`Variant::name`] for the ladder variants.
    pub fn from_name(name: &str) -> Result<Variant> {
        Self::ladder()
            .into_iter()
            .find(|v| v.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown variant `{name}` (expected vgg-only, resnet-only, drm, drm-dam or full)")))
    }

    pub fn validate(&self) -> Result<()> {
        if !self.vgg && !self.resnet {
            return Err(Error::Config("a variant needs at least one stream".into()));
        }
        if (self.drm || self.dam) && !(self.vgg && self.resnet) {
            return Err(Error::Config("cross-stream modules need both streams".into()));
        }
        if self.sdf && !self.dam {
            return Err(Error::Config("the fusion head consumes aggregated maps and needs dense aggregation".into()));
        }
        Ok(())
    }

    /// Whether later stages change anything.
    pub fn recursive(&self) -> bool {
        self.drm || self.dam
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name())
    }
}

/// Everything computed at one recursive stage.
#[derive(Clone, Debug)]
pub struct StageState {
    pub t: usize,
    pub x: Option<FeaturePyramid>,
    pub f: Option<FeaturePyramid>,
    pub m: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct ForwardOutput {
    pub stages: Vec<StageState>,
    /// Final-stage aggregates, when dense aggregation is built.
    pub aggregates: Vec<AggregatedMap>,
    pub vgg_map: Option<Var>,
    pub logits: Option<Var>,
    /// Output shape of every fusion-head layer.
    pub sdf_trace: Vec<TraceRow>,
    pub saliency: Var,
}

impl ForwardOutput {
    /// `M^1..M^N`.
    pub fn stage_maps(&self) -> Vec<Var> {
        self.stages.iter().filter_map(|s| s.m).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum LossHead {
    Vgg,
    Resnet,
    Sdf,
}

impl LossHead {
    pub fn name(self) -> &'static str {
        match self {
            LossHead::Vgg => "vgg",
            LossHead::Resnet => "resnet",
            LossHead::Sdf => "sdf",
        }
    }
}

/// Loss values of one step; heads a variant does not build read 0.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBundle {
    pub loss_vgg: f64,
    pub loss_resnet: f64,
    pub loss_sdf: f64,
    pub total: f64,
}

/// Inference result for a batch.
#[derive(Clone, Debug)]
pub struct Prediction {
    /// `M^1..M^N`, empty without the residual stream.
    pub stages: Vec<SaliencyMap>,
    pub saliency: SaliencyMap,
}

#[derive(Clone, Debug)]
pub struct Rmmdf {
    config: NetworkConfig,
    variant: Variant,
    store: ParamStore,
    vgg: Option<VggStream>,
    vgg_head: Option<Conv2d>,
    resnet: Option<ResnetStream>,
    decoder: Option<SaliencyDecoder>,
    drm: Option<DetailRefinement>,
    dam: Option<DenseAggregation>,
    inject: Option<Injection>,
    sdf: Option<SdfHead>,
}

fn module_rng(seed: u64, module: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(consumer_seed(seed, SeedConsumer::Init));
    rng.set_stream(module);
    rng
}

fn check_mask(pred: Shape, gt: &Tensor) -> Result<()> {
    let s = gt.shape();
    if s.c != 1 || s.n != pred.n || s.spatial() != pred.spatial() {
        return Err(Error::Shape(format!("mask {s} does not match prediction {pred}")));
    }
    if let Some(v) = gt.data().iter().find(|&&v| v != 0.0 && v != 1.0) {
        return Err(Error::InvalidInput(format!("mask value {v} is not 0 or 1")));
    }
    Ok(())
}

impl Rmmdf {
    /// Builds the variant with weights drawn from `seed`. Each module has
    /// its own random stream, so a module starts from the same weights in
    /// every variant that contains it.
    pub fn new(config: NetworkConfig, variant: Variant, seed: u64) -> Result<Self> {
        config.validate()?;
        variant.validate()?;
        let mut store = ParamStore::new();
        let s = &mut store;
        let vgg = variant.vgg.then(|| VggStream::new(s, &config, &mut module_rng(seed, 1)));
        let resnet = variant.resnet.then(|| ResnetStream::new(s, &config, &mut module_rng(seed, 2)));
        let decoder = variant.resnet.then(|| SaliencyDecoder::new(s, &config, &mut module_rng(seed, 3)));
        let drm = variant.drm.then(|| DetailRefinement::new(s, &config, &mut module_rng(seed, 4)));
        let dam = variant.dam.then(|| DenseAggregation::new(s, &config, &mut module_rng(seed, 5)));
        let inject = variant.dam.then(|| Injection::new(s, &config, &mut module_rng(seed, 6)));
        let sdf = variant.sdf.then(|| SdfHead::new(s, &config, &mut module_rng(seed, 7)));
        let vgg_head = variant.vgg.then(|| {
            let c = if variant.dam { config.agg_channels() } else { config.vgg_widths()[0] };
            Conv2d::new(s, "vgg.head", c, 1, 1, 1, Init::KAIMING, &mut module_rng(seed, 8))
        });
        Ok(Self {
            config,
            variant,
            store,
            vgg,
            vgg_head,
            resnet,
            decoder,
            drm,
            dam,
            inject,
            sdf,
        })
    }

    pub fn config(&self) -> &NetworkConfig {
        &self.config
    }

    pub fn variant(&self) -> Variant {
        self.variant
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn sdf(&self) -> Option<&SdfHead> {
        self.sdf.as_ref()
    }

    /// Stages actually unrolled: one when nothing crosses between streams.
    pub fn effective_stages(&self) -> usize {
        if self.variant.recursive() {
            self.config.stages
        } else {
            1
        }
    }

    /// Records the whole recursion on `g`. With `freeze_messages` the maps
    /// passed between streams are detached, so each stage's cross-stream
    /// input is treated as a constant.
    pub fn forward(&self, g: &Graph<'_>, image: Var, freeze_messages: bool) -> Result<ForwardOutput> {
        let shape = g.shape(image);
        check_image(shape)?;
        let n_stages = self.effective_stages();
        let msg = |v: Var| if freeze_messages { g.detach(v) } else { v };

        let mut x = self.vgg.as_ref().map(|s| s.forward(g, image)).transpose()?;
        let mut f = self.resnet.as_ref().map(|s| s.forward(g, image)).transpose()?;
        let decode = |f: &Option<FeaturePyramid>| -> Result<Option<Var>> {
            match (&self.decoder, f) {
                (Some(d), Some(f)) => d.forward(g, f).map(Some),
                _ => Ok(None),
            }
        };
        let mut m = decode(&f)?;
        let mut stages = vec![StageState {
            t: 1,
            x: x.clone(),
            f: f.clone(),
            m,
        }];

        for t in 1..n_stages {
            let aggs = match (&self.dam, &x) {
                (Some(dam), Some(xp)) => Some(dam.aggregate_all(g, xp, t)?),
                _ => None,
            };
            if let (Some(drm), Some(xp), Some(mv)) = (&self.drm, &x, m) {
                x = Some(drm.refine_all(g, xp, msg(mv))?);
            }
            if let (Some(inj), Some(fp), Some(mut aggs)) = (&self.inject, &f, aggs) {
                for a in &mut aggs {
                    a.data = msg(a.data);
                }
                f = Some(inj.inject_all(g, fp, &aggs)?);
            }
            m = decode(&f)?;
            stages.push(StageState {
                t: t + 1,
                x: x.clone(),
                f: f.clone(),
                m,
            });
        }

        let aggregates = match (&self.dam, &x) {
            (Some(dam), Some(xp)) => dam.aggregate_all(g, xp, n_stages)?,
            _ => Vec::new(),
        };
        let vgg_map = match (&self.vgg_head, &x) {
            (Some(head), Some(xp)) => {
                let feature = aggregates.first().map_or(*xp.level(1), |a| a.data);
                let up = g.resize(head.forward(g, feature), shape.h, shape.w);
                Some(g.sigmoid(up))
            }
            _ => None,
        };
        let mut sdf_trace = Vec::new();
        let logits = match (&self.sdf, m) {
            (Some(sdf), Some(mv)) => {
                let fused = sdf.fuse(g, &aggregates, mv)?;
                let (logits, trace) = sdf.forward_traced(g, fused.data)?;
                sdf_trace = trace;
                Some(logits)
            }
            _ => None,
        };
        let saliency = match (logits, vgg_map, m) {
            (Some(l), _, _) => saliency_var(g, l)?,
            (None, Some(v), Some(mv)) => g.weighted_sum(&[(v, 0.5), (mv, 0.5)]),
            (None, Some(v), None) => v,
            (None, None, Some(mv)) => mv,
            (None, None, None) => unreachable!("validated variant has a stream"),
        };
        Ok(ForwardOutput {
            stages,
            aggregates,
            vgg_map,
            logits,
            sdf_trace,
            saliency,
        })
    }

    /// The loss terms of this variant, each attached to a head output.
    pub fn loss_heads(&self, g: &Graph<'_>, out: &ForwardOutput, gt: &Tensor) -> Result<Vec<(LossHead, Var)>> {
        check_mask(g.shape(out.saliency), gt)?;
        let target = Rc::new(gt.clone());
        let mut heads = Vec::with_capacity(3);
        if let Some(v) = out.vgg_map {
            heads.push((LossHead::Vgg, g.bce(v, target.clone(), BCE_EPS)));
        }
        if let Some(m) = out.stages.last().and_then(|s| s.m) {
            heads.push((LossHead::Resnet, g.bce(m, target.clone(), BCE_EPS)));
        }
        if let Some(l) = out.logits {
            heads.push((LossHead::Sdf, g.softmax_ce(l, target)));
        }
        Ok(heads)
    }

    /// Inference on a batch of preprocessed images.
    pub fn predict(&self, image: &Tensor) -> Result<Prediction> {
        let g = Graph::new(&self.store, false);
        let out = self.forward(&g, g.input(image.clone()), false)?;
        let stages = out
            .stage_maps()
            .into_iter()
            .map(|m| SaliencyMap::new((*g.value(m)).clone()))
            .collect::<Result<Vec<_>>>()?;
        let saliency = SaliencyMap::new((*g.value(out.saliency)).clone())?;
        Ok(Prediction { stages, saliency })
    }

    /// Per-stage maps and the final map for one image.
    pub fn run_stages(&self, image: &Tensor) -> Result<(Vec<SaliencyMap>, SaliencyMap)> {
        let p = self.predict(image)?;
        Ok((p.stages, p.saliency))
    }

    pub fn total_loss(&self, g: &Graph<'_>, heads: &[(LossHead, Var)], weights: &LossWeights) -> Var {
        let terms: Vec<(Var, f64)> = heads
            .iter()
            .map(|&(h, v)| {
                let w = match h {
                    LossHead::Vgg => weights.vgg,
                    LossHead::Resnet => weights.resnet,
                    LossHead::Sdf => weights.sdf,
                };
                (v, w)
            })
            .collect();
        g.weighted_sum(&terms)
    }
}

/// Mean per-pixel cross-entropy of a prediction against a 0/1 mask:
/// binary for one-channel scores (clamped to `[eps, 1 - eps]`), softmax
/// for two-channel logits.
pub fn cross_entropy_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let s = pred.shape();
    check_mask(s, gt)?;
    let store = ParamStore::new();
    let g = Graph::new(&store, false);
    let p = g.input(pred.clone());
    let target = Rc::new(gt.clone());
    let loss = match s.c {
        1 => {
            if let Some(v) = pred.data().iter().find(|v| !(0.0..=1.0).contains(*v)) {
                return Err(Error::InvalidInput(format!("score {v} outside [0, 1]")));
            }
            g.bce(p, target, BCE_EPS)
        }
        2 => g.softmax_ce(p, target),
        c => return Err(Error::Shape(format!("predictions need 1 or 2 channels, got {c}"))),
    };
    Ok(g.value(loss).data()[0])
}

/// Parameter group of the optimizer.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Main,
    Fusion,
}

impl ParamGroup {
    /// Fusion modules and the fusion head form one group, the streams the other.
    pub fn of(name: &str) -> Self {
        if name.starts_with("fusion.") || name.starts_with("sdf.") {
            ParamGroup::Fusion
        } else {
            ParamGroup::Main
        }
    }
}

/// SGD with momentum and L2 weight decay:
/// `v <- mu v + (g + wd w)`, `w <- w - lr v`.
#[derive(Clone, Debug)]
pub struct Sgd {
    config: OptimizerConfig,
    velocity: Vec<Option<Vec<f64>>>,
}

impl Sgd {
    pub fn new(config: OptimizerConfig) -> Self {
        Self {
            config,
            velocity: Vec::new(),
        }
    }

    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    /// Parameters without a gradient are left alone.
    pub fn step(&mut self, store: &mut ParamStore, grads: &Gradients, lr: f64) {
        if self.velocity.len() < store.len() {
            self.velocity.resize(store.len(), None);
        }
        let ids: Vec<ParamId> = store.trainable_ids().collect();
        for id in ids {
            let Some(grad) = grads.get(id) else { continue };
            let mu = match ParamGroup::of(store.name(id)) {
                ParamGroup::Main => self.config.momentum_main,
                ParamGroup::Fusion => self.config.momentum_fusion,
            };
            let wd = self.config.weight_decay;
            let w = store.get_mut(id).data_mut();
            let v = self.velocity[id.index()].get_or_insert_with(|| vec![0.0; w.len()]);
            for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(grad.data()) {
                *vi = mu * *vi + gi + wd * *wi;
                *wi -= lr * *vi;
            }
        }
    }
}

/// One row of the training log.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub loss_vgg: f64,
    pub loss_resnet: f64,
    pub loss_sdf: f64,
    pub total: f64,
    pub lr: f64,
}

/// Preprocessed image (1x3xHxW) and its 0/1 mask (1x1xHxW).
pub type Example = (Tensor, Tensor);

pub struct Trainer {
    model: Rmmdf,
    sgd: Sgd,
    loss_weights: LossWeights,
    freeze: bool,
    iteration: usize,
    shuffle: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
}

impl Trainer {
    pub fn new(model: Rmmdf, run: &RunConfig) -> Result<Self> {
        run.optimizer.validate()?;
        Ok(Self {
            model,
            sgd: Sgd::new(run.optimizer.clone()),
            loss_weights: run.loss_weights,
            freeze: run.training.freeze_earlier_stages,
            iteration: 0,
            shuffle: ChaCha8Rng::seed_from_u64(consumer_seed(run.training.seed, SeedConsumer::Shuffle)),
            order: Vec::new(),
            cursor: 0,
        })
    }

    pub fn model(&self) -> &Rmmdf {
        &self.model
    }

    pub fn into_model(self) -> Rmmdf {
        self.model
    }

    /// Completed iterations.
    pub fn iteration(&self) -> usize {
        self.iteration
    }

    /// Next mini-batch, reshuffling at each pass over the data.
    pub fn next_batch(&mut self, data: &[Example]) -> Result<(Tensor, Tensor)> {
        if data.is_empty() {
            return Err(Error::InvalidInput("training set is empty".into()));
        }
        let size = self.sgd.config().batch_size.min(data.len());
        let mut images = Vec::with_capacity(size);
        let mut masks = Vec::with_capacity(size);
        for _ in 0..size {
            if self.cursor >= self.order.len() {
                self.order = (0..data.len()).collect();
                self.order.shuffle(&mut self.shuffle);
                self.cursor = 0;
            }
            let (img, mask) = &data[self.order[self.cursor]];
            images.push(img.clone());
            masks.push(mask.clone());
            self.cursor += 1;
        }
        Ok((Tensor::stack(&images)?, Tensor::stack(&masks)?))
    }

    /// One SGD step on a batch. Fails, without touching the weights, when the
    /// loss or any gradient is not finite.
    pub fn step(&mut self, images: &Tensor, masks: &Tensor) -> Result<IterationRecord> {
        let iteration = self.iteration + 1;
        let lr = self.sgd.config().lr_at(self.iteration);
        let (bundle, grads, observations) = {
            let g = Graph::new(&self.model.store, true);
            let out = self.model.forward(&g, g.input(images.clone()), self.freeze)?;
            let heads = self.model.loss_heads(&g, &out, masks)?;
            let total = self.model.total_loss(&g, &heads, &self.loss_weights);
            let mut bundle = LossBundle {
                total: g.value(total).data()[0],
                ..LossBundle::default()
            };
            for &(h, v) in &heads {
                let value = g.value(v).data()[0];
                match h {
                    LossHead::Vgg => bundle.loss_vgg = value,
                    LossHead::Resnet => bundle.loss_resnet = value,
                    LossHead::Sdf => bundle.loss_sdf = value,
                }
            }
            let grads = g.backward(total);
            (bundle, grads, g.take_bn_observations())
        };
        let store = &self.model.store;
        if let Some(id) = store.trainable_ids().find(|&id| grads.get(id).is_some_and(|t| !t.all_finite())) {
            return Err(Error::NonFiniteGradient {
                param: store.name(id).to_string(),
                iteration,
            });
        }
        if !bundle.total.is_finite() {
            return Err(Error::NonFiniteLoss { iteration });
        }
        self.sgd.step(&mut self.model.store, &grads, lr);
        for obs in observations {
            let unbias = if obs.count > 1 {
                obs.count as f64 / (obs.count - 1) as f64
            } else {
                1.0
            };
            let rm = self.model.store.get_mut(obs.running_mean).data_mut();
            for (r, m) in rm.iter_mut().zip(&obs.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let rv = self.model.store.get_mut(obs.running_var).data_mut();
            for (r, v) in rv.iter_mut().zip(&obs.var) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        self.iteration = iteration;
        Ok(IterationRecord {
            iteration,
            loss_vgg: bundle.loss_vgg,
            loss_resnet: bundle.loss_resnet,
            loss_sdf: bundle.loss_sdf,
            total: bundle.total,
            lr,
        })
    }

    /// Runs `iterations` steps, handing every record to `on_step`.
    pub fn fit(
        &mut self,
        data: &[Example],
        iterations: usize,
        mut on_step: impl FnMut(&Trainer, &IterationRecord) -> Result<()>,
    ) -> Result<Vec<IterationRecord>> {
        let mut log = Vec::with_capacity(iterations);
        for _ in 0..iterations {
            let (images, masks) = self.next_batch(data)?;
            let rec = self.step(&images, &masks)?;
            on_step(self, &rec)?;
            log.push(rec);
        }
        Ok(log)
    }
}

/// Appends iteration records to a CSV file with a header row.
pub struct TrainLog {
    writer: csv::Writer<std::fs::File>,
}

impl TrainLog {
    pub fn create(path: &std::path::Path) -> Result<Self> {
        Ok(Self {
            writer: csv::Writer::from_path(path)?,
        })
    }

    pub fn append(&mut self, rec: &IterationRecord) -> Result<()> {
        self.writer.serialize(rec)?;
        self.writer.flush().map_err(|e| Error::Format(e.to_string()))
    }
}

/// Training-set MAE of the final map and of each stage map.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageMae {
    pub final_mae: f64,
    pub stages: Vec<f64>,
}

pub fn evaluate_mae(model: &Rmmdf, data: &[Example]) -> Result<StageMae> {
    let mut final_sum = 0.0;
    let mut stage_sums = vec![0.0; if model.variant().resnet { model.effective_stages() } else { 0 }];
    for (image, mask) in data {
        let p = model.predict(image)?;
        final_sum += metrics::mae(&p.saliency, mask)?;
        for (acc, m) in stage_sums.iter_mut().zip(&p.stages) {
            *acc += metrics::mae(m, mask)?;
        }
    }
    let n = data.len().max(1) as f64;
    Ok(StageMae {
        final_mae: final_sum / n,
        stages: stage_sums.into_iter().map(|s| s / n).collect(),
    })
}
