//! Pixel-level metrics aggregated over an evaluation set, and the per-class
//! threshold search for the proposal priors.

use crate::densepriors::{smooth_proposals, ObjectnessMap, ThresholdSet, WeightedMaps};
use crate::error::{Error, Result};
use crate::mask::LabelMask;

/// Per-class pixel counts accumulated over a set of mask pairs.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ClassConfusion {
    pub true_positive: Vec<u64>,
    pub false_positive: Vec<u64>,
    pub false_negative: Vec<u64>,
}

impl ClassConfusion {
    pub fn new(classes: usize) -> Self {
        ClassConfusion {
            true_positive: vec![0; classes],
            false_positive: vec![0; classes],
            false_negative: vec![0; classes],
        }
    }

    pub fn classes(&self) -> usize {
        self.true_positive.len()
    }

    pub fn add(&mut self, pred: &LabelMask, gt: &LabelMask) -> Result<()> {
        if pred.dims() != gt.dims() {
            return Err(Error::shape(format!("prediction is {:?}, ground truth is {:?}", pred.dims(), gt.dims())));
        }
        let k = self.classes();
        for (&p, &g) in pred.labels().iter().zip(gt.labels()) {
            let (p, g) = (p as usize, g as usize);
            if p >= k || g >= k {
                return Err(Error::invalid(format!("label {} outside {k} classes", p.max(g))));
            }
            if p == g {
                self.true_positive[p] += 1;
            } else {
                self.false_positive[p] += 1;
                self.false_negative[g] += 1;
            }
        }
        Ok(())
    }

    pub fn from_masks(preds: &[LabelMask], gts: &[LabelMask], classes: usize) -> Result<Self> {
        if preds.len() != gts.len() {
            return Err(Error::shape(format!("{} predictions for {} ground-truth masks", preds.len(), gts.len())));
        }
        let mut c = ClassConfusion::new(classes);
        for (p, g) in preds.iter().zip(gts) {
            c.add(p, g)?;
        }
        Ok(c)
    }

    /// `TP / (TP + FP + FN)`; `None` when the class appears in neither
    /// predictions nor ground truth.
    pub fn ap(&self, class: usize) -> Option<f64> {
        let tp = self.true_positive[class];
        let denom = tp + self.false_positive[class] + self.false_negative[class];
        (denom > 0).then(|| tp as f64 / denom as f64)
    }

    /// `TP / (TP + FN)`; `None` when the class has no ground-truth pixels.
    pub fn accuracy(&self, class: usize) -> Option<f64> {
        let gt = self.true_positive[class] + self.false_negative[class];
        (gt > 0).then(|| self.true_positive[class] as f64 / gt as f64)
    }

    pub fn mean_ap(&self) -> Result<f64> {
        mean_of((0..self.classes()).filter_map(|c| self.ap(c))).ok_or_else(|| Error::invalid("no class applies"))
    }
}

fn mean_of(values: impl Iterator<Item = f64>) -> Option<f64> {
    let (sum, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    (n > 0).then(|| sum / n as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AccuracyReport {
    /// `None` for classes without ground-truth pixels.
    pub per_class: Vec<Option<f64>>,
    /// Mean over classes present in the ground truth.
    pub mean: f64,
}

pub fn per_class_accuracy(preds: &[LabelMask], gts: &[LabelMask], classes: usize) -> Result<AccuracyReport> {
    let c = ClassConfusion::from_masks(preds, gts, classes)?;
    let per_class: Vec<Option<f64>> = (0..classes).map(|k| c.accuracy(k)).collect();
    let mean = mean_of(per_class.iter().flatten().copied())
        .ok_or_else(|| Error::invalid("evaluation set has no ground-truth pixels"))?;
    Ok(AccuracyReport { per_class, mean })
}

pub fn voc_ap(preds: &[LabelMask], gts: &[LabelMask], class: usize) -> Result<Option<f64>> {
    let classes = preds.iter().chain(gts).map(|m| m.max_label() as usize + 1).max().unwrap_or(0).max(class + 1);
    Ok(ClassConfusion::from_masks(preds, gts, classes)?.ap(class))
}

pub fn mean_ap(preds: &[LabelMask], gts: &[LabelMask], classes: usize) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    ClassConfusion::from_masks(preds, gts, classes)?.mean_ap()
}

/// One validation image as seen by the threshold search.
pub struct GridItem<'a> {
    pub weighted: &'a WeightedMaps,
    pub objectness: &'a ObjectnessMap,
    pub ground_truth: &'a LabelMask,
}

/// One coordinate sweep over the foreground classes in index order, starting
/// from the smallest grid value. Each class keeps the candidate with the best
/// AP for that class; ties keep the smaller threshold.
pub fn grid_search_thresholds(items: &[GridItem<'_>], grid: &[f64]) -> Result<ThresholdSet> {
    let first = items.first().ok_or_else(|| Error::invalid("empty validation set"))?;
    if grid.is_empty() {
        return Err(Error::invalid("empty threshold grid"));
    }
    let mut candidates = grid.to_vec();
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let classes = first.weighted.0.shape()[0];
    let mut thresholds = ThresholdSet::uniform(classes - 1, candidates[0])?;
    for class in 1..classes {
        let mut best: Option<(f64, f64)> = None;
        for &delta in &candidates {
            thresholds.set(class, delta)?;
            let mut conf = ClassConfusion::new(classes);
            for item in items {
                conf.add(&smooth_proposals(item.weighted, item.objectness, &thresholds)?, item.ground_truth)?;
            }
            let ap = conf.ap(class).unwrap_or(-1.0);
            if best.is_none_or(|(b, _)| ap > b) {
                best = Some((ap, delta));
            }
        }
        thresholds.set(class, best.expect("grid is nonempty").1)?;
    }
    Ok(thresholds)
}
