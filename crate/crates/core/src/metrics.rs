//! Saliency evaluation: MAE, precision-recall over 256 thresholds and the
//! F-measure summaries.
//!
//! A prediction is positive at threshold `t` when `pred >= t`. Counts are
//! accumulated over the whole dataset before precision and recall are
//! formed. Ground-truth pixels above 0.5 are foreground.

use crate::backbones::SaliencyMap;
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

pub const THRESHOLDS: usize = 256;
pub const BETA_SQ: f64 = 0.3;

pub fn threshold(k: usize) -> f64 {
    k as f64 / 255.0
}

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!(
            "prediction {} and ground truth {} differ in size",
            pred.shape(),
            gt.shape()
        )));
    }
    Ok(())
}

/// Mean absolute per-pixel error.
pub fn mae(pred: &SaliencyMap, gt: &Tensor) -> Result<f64> {
    check_pair(pred.tensor(), gt)?;
    let p = pred.tensor().data();
    let sum: f64 = p.iter().zip(gt.data()).map(|(a, b)| (a - b).abs()).sum();
    Ok(sum / p.len() as f64)
}

/// Confusion counts at one threshold.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    /// 1 when nothing is predicted positive.
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            1.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }
}

/// Largest `k` with `v >= k / 255`.
fn bin(v: f64) -> usize {
    let mut k = ((v * 255.0).floor().max(0.0) as usize).min(THRESHOLDS - 1);
    while k + 1 < THRESHOLDS && v >= threshold(k + 1) {
        k += 1;
    }
    while k > 0 && v < threshold(k) {
        k -= 1;
    }
    k
}

/// Counts at all 256 thresholds for one image.
pub fn threshold_counts(pred: &Tensor, gt: &Tensor) -> Result<[Counts; THRESHOLDS]> {
    check_pair(pred, gt)?;
    let mut pos_fg = [0u64; THRESHOLDS];
    let mut pos_bg = [0u64; THRESHOLDS];
    let (mut fg, mut bg) = (0u64, 0u64);
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        let b = bin(p);
        if g > 0.5 {
            pos_fg[b] += 1;
            fg += 1;
        } else {
            pos_bg[b] += 1;
            bg += 1;
        }
    }
    let mut out = [Counts::default(); THRESHOLDS];
    let (mut tp, mut fp) = (0u64, 0u64);
    for k in (0..THRESHOLDS).rev() {
        tp += pos_fg[k];
        fp += pos_bg[k];
        out[k] = Counts {
            tp,
            fp,
            tn: bg - fp,
            fn_: fg - tp,
        };
    }
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub precision: Vec<f64>,
    pub recall: Vec<f64>,
    pub counts: Vec<Counts>,
    /// Indices of images left out for having no foreground.
    pub excluded: Vec<usize>,
}

fn check_lists(preds: &[SaliencyMap], gts: &[Tensor]) -> Result<()> {
    if preds.is_empty() {
        return Err(Error::InvalidInput("no predictions to evaluate".into()));
    }
    if preds.len() != gts.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions against {} ground-truth masks",
            preds.len(),
            gts.len()
        )));
    }
    Ok(())
}

fn has_foreground(gt: &Tensor) -> bool {
    gt.data().iter().any(|&v| v > 0.5)
}

pub fn pr_curve(preds: &[SaliencyMap], gts: &[Tensor]) -> Result<PrCurve> {
    check_lists(preds, gts)?;
    let mut acc = [Counts::default(); THRESHOLDS];
    let mut excluded = Vec::new();
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        if !has_foreground(g) {
            excluded.push(i);
            continue;
        }
        let c = threshold_counts(p.tensor(), g)?;
        for (a, c) in acc.iter_mut().zip(&c) {
            a.tp += c.tp;
            a.fp += c.fp;
            a.tn += c.tn;
            a.fn_ += c.fn_;
        }
    }
    if excluded.len() == preds.len() {
        return Err(Error::InvalidInput("every ground-truth mask is empty".into()));
    }
    if !excluded.is_empty() {
        log::warn!("{} image(s) with empty ground truth left out of the curve", excluded.len());
    }
    Ok(PrCurve {
        thresholds: (0..THRESHOLDS).map(threshold).collect(),
        precision: acc.iter().map(Counts::precision).collect(),
        recall: acc.iter().map(Counts::recall).collect(),
        counts: acc.to_vec(),
        excluded,
    })
}

/// Weighted harmonic mean of precision and recall; 0 when both vanish.
pub fn f_measure(precision: f64, recall: f64, beta_sq: f64) -> f64 {
    let denom = beta_sq * precision + recall;
    if denom == 0.0 {
        0.0
    } else {
        (1.0 + beta_sq) * precision * recall / denom
    }
}

impl PrCurve {
    pub fn f_curve(&self, beta_sq: f64) -> Vec<f64> {
        self.precision
            .iter()
            .zip(&self.recall)
            .map(|(&p, &r)| f_measure(p, r, beta_sq))
            .collect()
    }

    /// 256 rows of `threshold,precision,recall,f_measure`.
    pub fn write_csv(&self, path: &Path, beta_sq: f64) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["threshold", "precision", "recall", "f_measure"])?;
        for (k, f) in self.f_curve(beta_sq).into_iter().enumerate() {
            w.serialize((self.thresholds[k], self.precision[k], self.recall[k], f))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMetrics {
    pub index: usize,
    pub mae: f64,
    pub adaptive_threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f_measure: f64,
    /// False when the mask has no foreground; such images only count
    /// towards MAE.
    pub scored: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub max_f: f64,
    pub avg_f: f64,
    pub mae: f64,
    /// Mean adaptive-threshold precision and recall.
    pub avg_precision: f64,
    pub avg_recall: f64,
    pub beta_sq: f64,
    pub per_image: Vec<ImageMetrics>,
    pub excluded: Vec<usize>,
}

/// Per-image binarization level: twice the mean score, at most 1.
pub fn adaptive_threshold(pred: &Tensor) -> f64 {
    (2.0 * pred.mean()).min(1.0)
}

fn image_metrics(index: usize, pred: &SaliencyMap, gt: &Tensor, beta_sq: f64) -> Result<ImageMetrics> {
    let t = adaptive_threshold(pred.tensor());
    let mut c = Counts::default();
    for (&p, &g) in pred.tensor().data().iter().zip(gt.data()) {
        match (p >= t, g > 0.5) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    let (precision, recall) = (c.precision(), c.recall());
    Ok(ImageMetrics {
        index,
        mae: mae(pred, gt)?,
        adaptive_threshold: t,
        precision,
        recall,
        f_measure: f_measure(precision, recall, beta_sq),
        scored: c.tp + c.fn_ > 0,
    })
}

pub fn summarize(preds: &[SaliencyMap], gts: &[Tensor]) -> Result<MetricReport> {
    summarize_with(preds, gts, BETA_SQ)
}

pub fn summarize_with(preds: &[SaliencyMap], gts: &[Tensor], beta_sq: f64) -> Result<MetricReport> {
    let curve = pr_curve(preds, gts)?;
    let max_f = curve.f_curve(beta_sq).into_iter().fold(0.0, f64::max);
    let per_image = preds
        .iter()
        .zip(gts)
        .enumerate()
        .map(|(i, (p, g))| image_metrics(i, p, g, beta_sq))
        .collect::<Result<Vec<_>>>()?;
    let scored: Vec<&ImageMetrics> = per_image.iter().filter(|m| m.scored).collect();
    let mean = |f: fn(&ImageMetrics) -> f64| scored.iter().map(|m| f(m)).sum::<f64>() / scored.len() as f64;
    Ok(MetricReport {
        max_f,
        avg_f: mean(|m| m.f_measure),
        avg_precision: mean(|m| m.precision),
        avg_recall: mean(|m| m.recall),
        mae: per_image.iter().map(|m| m.mae).sum::<f64>() / per_image.len() as f64,
        beta_sq,
        per_image,
        excluded: curve.excluded,
    })
}

impl MetricReport {
    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    /// One row per image, named by `ids` when given.
    pub fn write_csv(&self, path: &Path, ids: Option<&[String]>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["image", "mae", "adaptive_threshold", "precision", "recall", "f_measure", "scored"])?;
        for m in &self.per_image {
            let id = ids.and_then(|ids| ids.get(m.index)).cloned().unwrap_or_else(|| m.index.to_string());
            w.serialize((id, m.mae, m.adaptive_threshold, m.precision, m.recall, m.f_measure, m.scored))?;
        }
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn map(v: &[f64], h: usize, w: usize) -> SaliencyMap {
        SaliencyMap::new(Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()).unwrap()
    }

    fn mask(v: &[f64], h: usize, w: usize) -> Tensor {
        Tensor::from_vec(Shape::new(1, 1, h, w), v.to_vec()).unwrap()
    }

    #[test]
    fn mae_examples() {
        let gt = mask(&[0.0, 1.0, 1.0, 0.0], 2, 2);
        assert_eq!(mae(&map(&[0.0, 1.0, 1.0, 0.0], 2, 2), &gt).unwrap(), 0.0);
        assert_eq!(mae(&map(&[1.0; 4], 2, 2), &mask(&[0.0; 4], 2, 2)).unwrap(), 1.0);
        let v = mae(&map(&[0.2, 0.8, 0.5, 0.0], 2, 2), &gt).unwrap();
        assert!((v - 0.225).abs() < 1e-15);
        assert!(matches!(mae(&map(&[0.0; 4], 2, 2), &mask(&[0.0; 2], 1, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn bins_agree_with_direct_comparison() {
        for i in 0..=10_000 {
            let v = i as f64 / 10_000.0;
            let b = bin(v);
            for k in 0..THRESHOLDS {
                assert_eq!(v >= threshold(k), k <= b, "v={v} k={k}");
            }
        }
        for k in 0..THRESHOLDS {
            assert_eq!(bin(threshold(k)), k);
        }
    }

    #[test]
    fn half_score_on_half_foreground() {
        let c = pr_curve(&[map(&[0.5; 4], 2, 2)], &[mask(&[1.0, 1.0, 0.0, 0.0], 2, 2)]).unwrap();
        for k in 0..THRESHOLDS {
            if threshold(k) <= 0.5 {
                assert_eq!((c.precision[k], c.recall[k]), (0.5, 1.0));
            } else {
                assert_eq!(c.counts[k].tp, 0);
                assert_eq!(c.precision[k], 1.0);
            }
            assert_eq!(c.counts[k].total(), 4);
        }
    }

    #[test]
    fn perfect_detector() {
        let gt = mask(&[1.0, 0.0, 0.0, 1.0], 2, 2);
        let c = pr_curve(&[map(gt.data(), 2, 2)], std::slice::from_ref(&gt)).unwrap();
        // at t = 0 the background scores pass as well
        assert_eq!(c.precision[0], 0.5);
        for k in 1..THRESHOLDS {
            assert_eq!((c.precision[k], c.recall[k]), (1.0, 1.0));
        }
        let r = summarize(&[map(gt.data(), 2, 2)], &[gt]).unwrap();
        assert_eq!((r.max_f, r.avg_f, r.mae), (1.0, 1.0, 0.0));
    }

    #[test]
    fn f_measure_examples() {
        assert_eq!(f_measure(1.0, 1.0, 0.3), 1.0);
        assert_eq!(f_measure(1.0, 1.0, 2.0), 1.0);
        assert_eq!(f_measure(0.0, 0.7, 0.3), 0.0);
        assert_eq!(f_measure(0.7, 0.0, 0.3), 0.0);
        assert_eq!(f_measure(0.0, 0.0, 0.3), 0.0);
        let oracle = 1.3 * 0.8 * 0.5 / (0.3 * 0.8 + 0.5);
        assert!((f_measure(0.8, 0.5, 0.3) - oracle).abs() < 1e-15);
        assert!((oracle - 0.7027).abs() < 1e-4);
    }

    #[test]
    fn zero_prediction_scores_only_at_zero_threshold() {
        let gt = mask(&[1.0, 0.0, 0.0, 0.0], 2, 2);
        let r = summarize(&[map(&[0.0; 4], 2, 2)], std::slice::from_ref(&gt)).unwrap();
        let c = pr_curve(&[map(&[0.0; 4], 2, 2)], &[gt]).unwrap();
        let f = c.f_curve(BETA_SQ);
        assert!(f[1..].iter().all(|&v| v == 0.0));
        assert_eq!(r.max_f, f[0]);
        assert!((f[0] - f_measure(0.25, 1.0, BETA_SQ)).abs() < 1e-15);
    }

    #[test]
    fn empty_masks_are_excluded() {
        let preds = [map(&[0.3; 4], 2, 2), map(&[0.9; 4], 2, 2)];
        let gts = [mask(&[0.0; 4], 2, 2), mask(&[1.0, 0.0, 0.0, 0.0], 2, 2)];
        let r = summarize(&preds, &gts).unwrap();
        assert_eq!(r.excluded, vec![0]);
        assert!(!r.per_image[0].scored);
        assert!((r.mae - (0.3 + (0.1 + 3.0 * 0.9) / 4.0) / 2.0).abs() < 1e-15);
        assert!(pr_curve(&preds[..1], &gts[..1]).is_err());
        assert!(pr_curve(&[], &[]).is_err());
        assert!(pr_curve(&preds, &gts[..1]).is_err());
    }

    #[test]
    fn curve_csv_has_256_rows() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curve.csv");
        let c = pr_curve(&[map(&[0.1, 0.7, 0.4, 0.9], 2, 2)], &[mask(&[0.0, 1.0, 0.0, 1.0], 2, 2)]).unwrap();
        c.write_csv(&path, BETA_SQ).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), THRESHOLDS + 1);
    }
}
