//! Confusion matrices, class IoU and mIoU, and a masked cross-entropy check.
//!
//! Scores are computed in each dataset's own label space: unified-space
//! predictions are first back-projected with the inverted dataset mapping.
//! Prediction pixels that back-project to the dataset's void class land in
//! the void column, so they count as errors against the ground-truth class.
//! Ground-truth pixels equal to the ignore class are skipped entirely, and
//! the ignore class itself never enters the mean.

use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::catalog::Manifest;
use crate::error::{Error, Result};
use crate::label_space::{LabelSpace, MappingTable, ProjectionLut};
use crate::logits::LogitMap;
use crate::mask::MaskImage;
use crate::par::Execution;

/// `counts[gt * classes + pred]` pixel tallies.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    ignore: Option<u32>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize, ignore: Option<u32>) -> Self {
        Self {
            classes,
            ignore,
            counts: vec![0; classes * classes],
        }
    }

    pub fn from_counts(classes: usize, ignore: Option<u32>, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != classes * classes {
            return Err(Error::Argument(format!(
                "{} counts for a {classes}x{classes} matrix",
                counts.len()
            )));
        }
        Ok(Self {
            classes,
            ignore,
            counts,
        })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn ignore(&self) -> Option<u32> {
        self.ignore
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.classes + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Tally one prediction against its ground truth.
    pub fn accumulate(&mut self, pred: &MaskImage, gt: &MaskImage) -> Result<()> {
        if (pred.width(), pred.height()) != (gt.width(), gt.height()) {
            return Err(Error::Argument(format!(
                "prediction is {}x{} but ground truth is {}x{}",
                pred.width(),
                pred.height(),
                gt.width(),
                gt.height()
            )));
        }
        if pred.space() != gt.space() {
            return Err(Error::Argument(format!(
                "prediction is in space `{}` but ground truth in `{}`",
                pred.space(),
                gt.space()
            )));
        }
        let c = self.classes;
        let ignore = self.ignore.map(|v| v as usize);
        for (i, (&p, &g)) in pred.data().iter().zip(gt.data()).enumerate() {
            let (p, g) = (p as usize, g as usize);
            if Some(g) == ignore {
                continue;
            }
            if g >= c || p >= c {
                let (x, y) = gt.coord(i);
                let (what, value) = if g >= c { ("ground truth", g) } else { ("prediction", p) };
                return Err(Error::InvalidPixel {
                    context: format!("{what} with {c} classes"),
                    x,
                    y,
                    value: value as u32,
                });
            }
            self.counts[g * c + p] += 1;
        }
        Ok(())
    }

    /// Element-wise sum.
    pub fn merge(&self, other: &ConfusionMatrix) -> Result<ConfusionMatrix> {
        if self.classes != other.classes || self.ignore != other.ignore {
            return Err(Error::Argument(format!(
                "cannot merge {}-class and {}-class matrices",
                self.classes, other.classes
            )));
        }
        let counts = self
            .counts
            .iter()
            .zip(&other.counts)
            .map(|(a, b)| a + b)
            .collect();
        Ok(ConfusionMatrix {
            counts,
            ..self.clone()
        })
    }

    pub fn iou_report(&self) -> Result<IoUReport> {
        let c = self.classes;
        let mut per_class = vec![None; c];
        for (k, slot) in per_class.iter_mut().enumerate() {
            if Some(k as u32) == self.ignore {
                continue;
            }
            let tp = self.get(k, k);
            let row: u64 = (0..c).map(|j| self.get(k, j)).sum();
            let col: u64 = (0..c).map(|i| self.get(i, k)).sum();
            let union = row + col - tp;
            if union > 0 {
                *slot = Some(tp as f64 / union as f64);
            }
        }
        let defined: Vec<f64> = per_class.iter().flatten().copied().collect();
        if defined.is_empty() {
            return Err(Error::EmptyReport);
        }
        Ok(IoUReport {
            miou: defined.iter().sum::<f64>() / defined.len() as f64,
            counted_classes: defined.len(),
            per_class_iou: per_class,
            pixel_total: self.total(),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IoUReport {
    /// Indexed by class id; `None` where the union is empty or the class is ignored.
    pub per_class_iou: Vec<Option<f64>>,
    pub miou: f64,
    pub counted_classes: usize,
    pub pixel_total: u64,
}

/// Free-function form of [`ConfusionMatrix::iou_report`].
pub fn iou_report(cm: &ConfusionMatrix) -> Result<IoUReport> {
    cm.iou_report()
}

#[derive(Debug, Clone)]
pub struct EvalConfig {
    /// Space the scores are computed in.
    pub space: LabelSpace,
    /// Ground-truth class to skip; defaults to the space's void class.
    pub ignore_class: Option<u32>,
    /// Unified-to-dataset table applied to predictions.
    pub back_projection: Option<MappingTable>,
    /// Diagnostics: predictions are scored directly in `space`.
    pub unified_mode: bool,
    /// Applied to ground truth before scoring, for unified-mode runs on
    /// dataset-space annotations.
    pub gt_projection: Option<MappingTable>,
    /// Missing predictions are fatal.
    pub strict: bool,
}

impl EvalConfig {
    pub fn new(space: LabelSpace, back_projection: Option<MappingTable>) -> Self {
        Self {
            ignore_class: space.void_id(),
            space,
            back_projection,
            unified_mode: false,
            gt_projection: None,
            strict: false,
        }
    }

    /// Diagnostic configuration scoring unified predictions against ground
    /// truth projected with `forward`.
    pub fn unified(forward: MappingTable) -> Self {
        let space = forward.target().clone();
        Self {
            ignore_class: space.void_id(),
            space,
            back_projection: None,
            unified_mode: true,
            gt_projection: Some(forward),
            strict: false,
        }
    }

    fn check(&self) -> Result<Option<ProjectionLut>> {
        if let Some(ig) = self.ignore_class {
            if !self.space.contains(ig) {
                return Err(Error::Config(format!(
                    "ignore class {ig} is not a class of {}",
                    self.space.name()
                )));
            }
        }
        match (&self.back_projection, self.unified_mode) {
            (None, false) => Err(Error::Config(
                "dataset-space evaluation needs a back-projection mapping; \
                 unified-space scoring is a diagnostic mode and must be requested explicitly"
                    .into(),
            )),
            (Some(_), true) => Err(Error::Config(
                "unified-space evaluation does not back-project predictions".into(),
            )),
            (Some(m), false) => {
                if m.target().name() != self.space.name() {
                    return Err(Error::Config(format!(
                        "back-projection targets `{}`, evaluation space is `{}`",
                        m.target().name(),
                        self.space.name()
                    )));
                }
                Ok(Some(m.build_lut()))
            }
            (None, true) => Ok(None),
        }
    }

    fn matrix(&self) -> ConfusionMatrix {
        ConfusionMatrix::new(self.space.max_id() as usize + 1, self.ignore_class)
    }
}

/// A ground-truth mask and the prediction file for it, if one exists.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EvalPair {
    pub gt: PathBuf,
    pub pred: Option<PathBuf>,
}

/// File name a prediction for `image` is stored under: the image stem plus `.png`.
pub fn prediction_name(image: &Path) -> PathBuf {
    let stem = image.file_stem().unwrap_or_default();
    PathBuf::from(stem).with_extension("png")
}

/// Match each manifest record with `pred_dir/<image stem>.png`.
pub fn pair_predictions(pred_dir: &Path, gt: &Manifest) -> Vec<EvalPair> {
    gt.records()
        .iter()
        .map(|r| {
            let candidate = pred_dir.join(prediction_name(&r.image_path));
            EvalPair {
                gt: r.mask_path.clone(),
                pred: candidate.is_file().then_some(candidate),
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub report: IoUReport,
    pub matrix: ConfusionMatrix,
    pub missing: Vec<PathBuf>,
}

/// Score one prediction mask (already loaded) against its ground truth.
pub fn score_pair(
    cm: &mut ConfusionMatrix,
    pred: &MaskImage,
    gt: &MaskImage,
    lut: Option<&ProjectionLut>,
) -> Result<()> {
    match lut {
        Some(lut) => cm.accumulate(&lut.project(pred)?, gt),
        None => cm.accumulate(pred, gt),
    }
}

/// Back-project, accumulate per image and report for one dataset.
pub fn evaluate_dataset(pairs: &[EvalPair], cfg: &EvalConfig, exec: Execution) -> Result<EvalOutcome> {
    let lut = cfg.check()?;
    let missing: Vec<PathBuf> = pairs
        .iter()
        .filter(|p| p.pred.is_none())
        .map(|p| p.gt.clone())
        .collect();
    if cfg.strict && !missing.is_empty() {
        return Err(Error::Data(format!(
            "{} ground-truth masks have no prediction, first {}",
            missing.len(),
            missing[0].display()
        )));
    }
    let pred_space = match &cfg.back_projection {
        Some(m) => m.source().name().to_string(),
        None => cfg.space.name().to_string(),
    };
    let (gt_space, gt_lut) = match &cfg.gt_projection {
        Some(m) => (m.source().name().to_string(), Some(m.build_lut())),
        None => (cfg.space.name().to_string(), None),
    };
    let present: Vec<&EvalPair> = pairs.iter().filter(|p| p.pred.is_some()).collect();
    let matrix = exec.try_fold(
        &present,
        || cfg.matrix(),
        |mut cm, pair| {
            let pred_path = pair.pred.as_ref().expect("filtered");
            let pred = MaskImage::read_png(pred_path, pred_space.as_str())?;
            let mut gt = MaskImage::read_png(&pair.gt, gt_space.as_str())?;
            if let Some(l) = &gt_lut {
                gt = l.project(&gt)?;
            }
            score_pair(&mut cm, &pred, &gt, lut.as_ref()).map_err(|e| match e {
                Error::InvalidPixel { context, x, y, value } => Error::InvalidPixel {
                    context: format!("{}: {context}", pred_path.display()),
                    x,
                    y,
                    value,
                },
                other => other,
            })?;
            Ok::<_, Error>(cm)
        },
        |a, b| a.merge(&b).expect("same configuration"),
    )?;
    Ok(EvalOutcome {
        report: matrix.iou_report()?,
        matrix,
        missing,
    })
}

/// JSON report for one dataset.
#[derive(Debug, Clone, Serialize)]
pub struct ReportFile {
    pub dataset: String,
    pub classes: usize,
    pub per_class_iou: serde_json::Map<String, serde_json::Value>,
    pub miou: f64,
    pub pixel_total: u64,
}

impl ReportFile {
    pub fn new(dataset: &str, space: &LabelSpace, report: &IoUReport) -> Self {
        let mut per_class = serde_json::Map::new();
        for c in space.classes() {
            if Some(c.id) == space.void_id() {
                continue;
            }
            let v = report
                .per_class_iou
                .get(c.id as usize)
                .copied()
                .flatten()
                .map(serde_json::Value::from)
                .unwrap_or(serde_json::Value::Null);
            per_class.insert(c.name.clone(), v);
        }
        Self {
            dataset: dataset.to_string(),
            classes: space.non_void_len(),
            per_class_iou: per_class,
            miou: report.miou,
            pixel_total: report.pixel_total,
        }
    }
}

/// Mean over non-ignored pixels of `-log softmax(logits)[gt]`.
pub fn masked_cross_entropy(logits: &LogitMap, gt: &MaskImage, ignore: Option<u32>) -> Result<f64> {
    if (logits.width(), logits.height()) != (gt.width(), gt.height()) {
        return Err(Error::Argument("logit and mask dimensions differ".into()));
    }
    let n = logits.plane_len();
    let c = logits.classes() as usize;
    let data = logits.data();
    let mut total = 0.0f64;
    let mut count = 0u64;
    for (p, &g) in gt.data().iter().enumerate() {
        if Some(g as u32) == ignore {
            continue;
        }
        let g = g as usize;
        if g >= c {
            let (x, y) = gt.coord(p);
            return Err(Error::InvalidPixel {
                context: format!("ground truth with {c} logit classes"),
                x,
                y,
                value: g as u32,
            });
        }
        let m = (0..c).map(|k| data[k * n + p] as f64).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..c).map(|k| (data[k * n + p] as f64 - m).exp()).sum();
        total += m + z.ln() - data[g * n + p] as f64;
        count += 1;
    }
    if count == 0 {
        return Err(Error::UndefinedLoss);
    }
    Ok(total / count as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mask(w: u32, h: u32, data: &[u8]) -> MaskImage {
        MaskImage::new(w, h, data.to_vec(), "d").unwrap()
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let m = mask(4, 4, &[0, 1, 2, 3, 1, 1, 2, 2, 3, 3, 0, 0, 1, 2, 3, 0]);
        let mut cm = ConfusionMatrix::new(4, None);
        cm.accumulate(&m, &m).unwrap();
        for g in 0..4 {
            for p in 0..4 {
                if g != p {
                    assert_eq!(cm.get(g, p), 0);
                }
            }
        }
        assert_eq!(cm.total(), 16);
        let r = cm.iou_report().unwrap();
        assert_eq!(r.miou, 1.0);
    }

    #[test]
    fn ignored_ground_truth_skipped() {
        let gt = mask(2, 2, &[255; 4]);
        let pred = mask(2, 2, &[1; 4]);
        let mut cm = ConfusionMatrix::new(3, Some(255));
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(matches!(cm.iou_report(), Err(Error::EmptyReport)));
    }

    #[test]
    fn hand_computed_two_class() {
        let cm = ConfusionMatrix::from_counts(2, None, vec![3, 1, 2, 4]).unwrap();
        let r = cm.iou_report().unwrap();
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(4.0 / 7.0)]);
        assert!((r.miou - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn disjoint_prediction_scores_zero() {
        let gt = mask(2, 1, &[0, 0]);
        let pred = mask(2, 1, &[1, 1]);
        let mut cm = ConfusionMatrix::new(2, None);
        cm.accumulate(&pred, &gt).unwrap();
        assert_eq!(cm.iou_report().unwrap().miou, 0.0);
    }

    #[test]
    fn void_column_counts_against_gt_class() {
        // Class 0 is void: predicting it on class-1 ground truth is an error.
        let gt = mask(2, 1, &[1, 1]);
        let pred = mask(2, 1, &[0, 1]);
        let mut cm = ConfusionMatrix::new(2, Some(0));
        cm.accumulate(&pred, &gt).unwrap();
        let r = cm.iou_report().unwrap();
        assert_eq!(r.per_class_iou, vec![None, Some(0.5)]);
        assert_eq!(r.counted_classes, 1);
    }

    #[test]
    fn merge_identity_and_mismatch() {
        let a = ConfusionMatrix::from_counts(2, None, vec![1, 2, 3, 4]).unwrap();
        let zero = ConfusionMatrix::new(2, None);
        assert_eq!(a.merge(&zero).unwrap(), a);
        assert!(a.merge(&ConfusionMatrix::new(3, None)).is_err());
    }

    #[test]
    fn accumulate_checks_shapes_and_values() {
        let mut cm = ConfusionMatrix::new(2, None);
        assert!(cm.accumulate(&mask(2, 1, &[0, 0]), &mask(1, 2, &[0, 0])).is_err());
        let other = MaskImage::new(1, 1, vec![0], "u").unwrap();
        assert!(cm.accumulate(&other, &mask(1, 1, &[0])).is_err());
        assert!(matches!(
            cm.accumulate(&mask(1, 1, &[5]), &mask(1, 1, &[0])),
            Err(Error::InvalidPixel { value: 5, .. })
        ));
    }

    #[test]
    fn config_guard_requires_back_projection() {
        let space = LabelSpace::sequential("d", 3, Some(0)).unwrap();
        let cfg = EvalConfig::new(space, None);
        assert!(matches!(
            evaluate_dataset(&[], &cfg, Execution::Sequential),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn cross_entropy_uniform_is_ln_c() {
        let l = LogitMap::new(2, 1, 7, vec![0.3; 14]).unwrap();
        let gt = mask(2, 1, &[3, 6]);
        let v = masked_cross_entropy(&l, &gt, None).unwrap();
        assert!((v - 7f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_margin_limit() {
        let mut l = LogitMap::zeros(1, 1, 4);
        l.set(2, 0, 0, 20.0);
        let v = masked_cross_entropy(&l, &mask(1, 1, &[2]), None).unwrap();
        assert!(v < 1e-6 * 10.0 && v > 0.0);
        assert!(matches!(
            masked_cross_entropy(&l, &mask(1, 1, &[2]), Some(2)),
            Err(Error::UndefinedLoss)
        ));
    }
}
