//! Browser demo. A [`Session`] holds a micro network, a small synthetic
//! training set and the sample on display; [`Demo`] exposes it to
//! JavaScript.
//!
//! Images cross the boundary as row-major RGBA bytes at the network
//! resolution.

use rmmdf::backbones::SaliencyMap;
use rmmdf::config::{consumer_seed, Preset, RunConfig, SeedConsumer};
use rmmdf::data::{self, Sample, SyntheticSpec};
use rmmdf::engine::{Example, Rmmdf, Trainer, Variant};
use rmmdf::error::Result;
use rmmdf::metrics::{self, PrCurve};
use wasm_bindgen::prelude::*;

const TRAIN_IMAGES: usize = 8;

pub fn gray_rgba(values: &[f64]) -> Vec<u8> {
    values
        .iter()
        .flat_map(|&v| {
            let g = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            [g, g, g, 255]
        })
        .collect()
}

pub struct Session {
    resolution: usize,
    seed: u64,
    train_set: Vec<Example>,
    trainer: Trainer,
    sample: Sample,
    example: Example,
    maps: Vec<SaliencyMap>,
}

impl Session {
    pub fn new(seed: u64, stages: usize) -> Result<Self> {
        let mut run = RunConfig::preset(Preset::Micro);
        run.network.stages = stages;
        run.training.seed = seed;
        run.validate()?;
        let resolution = run.network.resolution;
        let spec = SyntheticSpec::new(consumer_seed(seed, SeedConsumer::Synthetic), TRAIN_IMAGES, resolution);
        let samples = data::generate_synthetic(&spec)?;
        let train_set = samples
            .iter()
            .map(|s| data::preprocess(s, resolution))
            .collect::<Result<Vec<_>>>()?;
        let model = Rmmdf::new(run.network.clone(), Variant::FULL, seed)?;
        let sample = samples[0].clone();
        let example = train_set[0].clone();
        Ok(Self {
            resolution,
            seed,
            train_set,
            trainer: Trainer::new(model, &run)?,
            sample,
            example,
            maps: Vec::new(),
        })
    }

    pub fn resolution(&self) -> usize {
        self.resolution
    }

    /// Shows a training image (`index < 8`) or a fresh sample the network
    /// has not seen.
    pub fn show(&mut self, index: usize) -> Result<()> {
        let spec = SyntheticSpec::new(consumer_seed(self.seed, SeedConsumer::Synthetic), index + 1, self.resolution);
        self.sample = data::generate_synthetic(&spec)?.swap_remove(index);
        self.example = data::preprocess(&self.sample, self.resolution)?;
        self.maps.clear();
        Ok(())
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.sample.image.pixels().flat_map(|p| [p.0[0], p.0[1], p.0[2], 255]).collect()
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        gray_rgba(self.example.1.data())
    }

    /// Runs `steps` SGD iterations on the training set; returns the last
    /// total loss.
    pub fn train(&mut self, steps: usize) -> Result<f64> {
        let log = self.trainer.fit(&self.train_set, steps, |_, _| Ok(()))?;
        self.maps.clear();
        Ok(log.last().map_or(f64::NAN, |r| r.total))
    }

    pub fn iteration(&self) -> usize {
        self.trainer.iteration()
    }

    /// Stage maps `M^1..M^N` followed by the final map.
    pub fn predict(&mut self) -> Result<usize> {
        let p = self.trainer.model().predict(&self.example.0)?;
        self.maps = p.stages;
        self.maps.push(p.saliency);
        Ok(self.maps.len())
    }

    pub fn map(&self, index: usize) -> Option<&SaliencyMap> {
        self.maps.get(index)
    }

    pub fn curve(&self) -> Result<PrCurve> {
        let last = self
            .maps
            .last()
            .ok_or_else(|| rmmdf::error::Error::InvalidInput("run the network first".into()))?;
        metrics::pr_curve(std::slice::from_ref(last), std::slice::from_ref(&self.example.1))
    }
}

fn js(e: rmmdf::error::Error) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: Session,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, stages: usize) -> Result<Demo, JsError> {
        Ok(Demo {
            session: Session::new(seed as u64, stages).map_err(js)?,
        })
    }

    pub fn resolution(&self) -> usize {
        self.session.resolution()
    }

    pub fn show(&mut self, index: usize) -> Result<(), JsError> {
        self.session.show(index).map_err(js)
    }

    pub fn image_rgba(&self) -> Vec<u8> {
        self.session.image_rgba()
    }

    pub fn mask_rgba(&self) -> Vec<u8> {
        self.session.mask_rgba()
    }

    pub fn train(&mut self, steps: usize) -> Result<f64, JsError> {
        self.session.train(steps).map_err(js)
    }

    pub fn iteration(&self) -> usize {
        self.session.iteration()
    }

    /// Number of maps produced: the stages, then the final map.
    pub fn predict(&mut self) -> Result<usize, JsError> {
        self.session.predict().map_err(js)
    }

    pub fn map_rgba(&self, index: usize) -> Vec<u8> {
        self.session.map(index).map(|m| gray_rgba(m.tensor().data())).unwrap_or_default()
    }

    /// Mean absolute error of map `index` against the mask.
    pub fn map_mae(&self, index: usize) -> Result<f64, JsError> {
        let m = self.session.map(index).ok_or_else(|| JsError::new("no such map"))?;
        metrics::mae(m, &self.session.example.1).map_err(js)
    }

    /// Final map binarized at `k/255`.
    pub fn binary_rgba(&self, k: usize) -> Vec<u8> {
        let t = metrics::threshold(k.min(255));
        let last = self.session.maps.last();
        last.map(|m| gray_rgba(&m.tensor().data().iter().map(|&v| f64::from(v >= t)).collect::<Vec<_>>()))
            .unwrap_or_default()
    }

    /// 256 precision values followed by 256 recall values.
    pub fn pr_curve(&self) -> Result<Vec<f64>, JsError> {
        let c = self.session.curve().map_err(js)?;
        Ok(c.precision.iter().chain(&c.recall).copied().collect())
    }

    /// `[precision, recall, F]` at threshold `k/255`.
    pub fn at_threshold(&self, k: usize) -> Result<Vec<f64>, JsError> {
        let c = self.session.curve().map_err(js)?;
        let k = k.min(255);
        let f = metrics::f_measure(c.precision[k], c.recall[k], metrics::BETA_SQ);
        Ok(vec![c.precision[k], c.recall[k], f])
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn session_round() {
        let mut s = Session::new(1, 3).unwrap();
        let n = s.resolution() * s.resolution() * 4;
        assert_eq!(s.image_rgba().len(), n);
        assert!(s.mask_rgba().chunks(4).all(|p| p[0] == 0 || p[0] == 255));
        assert!(s.curve().is_err());
        let loss = s.train(2).unwrap();
        assert!(loss.is_finite());
        assert_eq!(s.iteration(), 2);
        assert_eq!(s.predict().unwrap(), 4);
        assert_eq!(gray_rgba(s.map(3).unwrap().tensor().data()).len(), n);
        let c = s.curve().unwrap();
        assert_eq!(c.precision.len(), 256);
    }

    #[test]
    fn show_matches_the_training_set_and_beyond() {
        let mut s = Session::new(4, 1).unwrap();
        let first = s.image_rgba();
        s.show(3).unwrap();
        let third = s.image_rgba();
        s.show(0).unwrap();
        assert_eq!(s.image_rgba(), first);
        assert_ne!(first, third);
        s.show(40).unwrap();
        assert_eq!(s.image_rgba().len(), first.len());
    }
}
