//! Segmentation overlap metrics: per-class IoU, Dice and recall with their
//! means over classes present in the truth, plus the confusion matrix.

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// Confusion-matrix derived metrics for one (prediction, truth) pair.
///
/// `confusion` is truth-major: `confusion[t * K + p]` counts voxels with
/// true class `t` predicted as `p`. Per-class entries are `None` for
/// classes absent from the truth; the means run over present classes only.
#[derive(Clone, Debug)]
pub struct MetricsReport {
    pub num_classes: usize,
    pub confusion: Vec<u64>,
    pub per_class_iou: Vec<Option<f64>>,
    pub per_class_dice: Vec<Option<f64>>,
    pub per_class_recall: Vec<Option<f64>>,
    pub miou: f64,
    pub mdice: f64,
    pub macc: f64,
}

/// Count-based metrics: IoU = TP/(TP+FP+FN), Dice = 2TP/(2TP+FP+FN),
/// recall = TP/(TP+FN); mAcc is the mean per-class recall.
pub fn segmentation_metrics(
    pred: &LabelVolume,
    truth: &LabelVolume,
    num_classes: usize,
) -> Result<MetricsReport> {
    if pred.dims() != truth.dims() {
        return Err(Error::shape(format!(
            "prediction dims {:?} vs truth dims {:?}",
            pred.dims(),
            truth.dims()
        )));
    }
    pred.validate_classes(num_classes)?;
    truth.validate_classes(num_classes)?;

    let k = num_classes;
    let mut confusion = vec![0u64; k * k];
    for (&p, &t) in pred.labels().iter().zip(truth.labels()) {
        confusion[t as usize * k + p as usize] += 1;
    }
    report_from_confusion(k, confusion)
}

/// Derive a report from an existing (possibly pooled) confusion matrix.
pub fn report_from_confusion(k: usize, confusion: Vec<u64>) -> Result<MetricsReport> {
    if confusion.len() != k * k {
        return Err(Error::shape(format!(
            "confusion matrix for {k} classes needs {} entries, got {}",
            k * k,
            confusion.len()
        )));
    }
    let mut per_class_iou = Vec::with_capacity(k);
    let mut per_class_dice = Vec::with_capacity(k);
    let mut per_class_recall = Vec::with_capacity(k);
    for c in 0..k {
        let tp = confusion[c * k + c];
        let fn_: u64 = (0..k).filter(|&p| p != c).map(|p| confusion[c * k + p]).sum();
        let fp: u64 = (0..k).filter(|&t| t != c).map(|t| confusion[t * k + c]).sum();
        if tp + fn_ == 0 {
            per_class_iou.push(None);
            per_class_dice.push(None);
            per_class_recall.push(None);
        } else {
            per_class_iou.push(Some(tp as f64 / (tp + fp + fn_) as f64));
            per_class_dice.push(Some(2.0 * tp as f64 / (2 * tp + fp + fn_) as f64));
            per_class_recall.push(Some(tp as f64 / (tp + fn_) as f64));
        }
    }
    let mean = |vals: &[Option<f64>]| -> f64 {
        let present: Vec<f64> = vals.iter().flatten().copied().collect();
        if present.is_empty() {
            0.0
        } else {
            present.iter().sum::<f64>() / present.len() as f64
        }
    };
    Ok(MetricsReport {
        num_classes: k,
        miou: mean(&per_class_iou),
        mdice: mean(&per_class_dice),
        macc: mean(&per_class_recall),
        per_class_iou,
        per_class_dice,
        per_class_recall,
        confusion,
    })
}

impl MetricsReport {
    pub fn voxels(&self) -> u64 {
        self.confusion.iter().sum()
    }

    /// Means restricted to foreground classes (id ≥ 1) present in truth.
    pub fn foreground_means(&self) -> (f64, f64, f64) {
        let mean = |vals: &[Option<f64>]| -> f64 {
            let present: Vec<f64> = vals.iter().skip(1).flatten().copied().collect();
            if present.is_empty() {
                0.0
            } else {
                present.iter().sum::<f64>() / present.len() as f64
            }
        };
        (
            mean(&self.per_class_iou),
            mean(&self.per_class_dice),
            mean(&self.per_class_recall),
        )
    }

    /// Line-oriented text report.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!(
            "classes {}  voxels {}\n",
            self.num_classes,
            self.voxels()
        ));
        s.push_str("confusion (rows = truth, cols = prediction):\n");
        for t in 0..self.num_classes {
            let row: Vec<String> = (0..self.num_classes)
                .map(|p| format!("{:>8}", self.confusion[t * self.num_classes + p]))
                .collect();
            s.push_str(&format!("  {}\n", row.join(" ")));
        }
        for c in 0..self.num_classes {
            match self.per_class_iou[c] {
                Some(iou) => s.push_str(&format!(
                    "class {c}: iou {:.6} dice {:.6} recall {:.6}\n",
                    iou,
                    self.per_class_dice[c].unwrap(),
                    self.per_class_recall[c].unwrap()
                )),
                None => s.push_str(&format!("class {c}: absent from truth\n")),
            }
        }
        s.push_str(&format!(
            "mIoU {:.6}\nmDice {:.6}\nmAcc {:.6}\n",
            self.miou, self.mdice, self.macc
        ));
        s
    }

    pub fn csv_header() -> &'static str {
        "class,iou,dice,recall"
    }

    /// One CSV row per class (absent classes have empty fields) plus a
    /// final `mean` row.
    pub fn to_csv_rows(&self) -> String {
        let mut s = String::new();
        let fmt = |v: Option<f64>| v.map(|x| format!("{x:.6}")).unwrap_or_default();
        for c in 0..self.num_classes {
            s.push_str(&format!(
                "{c},{},{},{}\n",
                fmt(self.per_class_iou[c]),
                fmt(self.per_class_dice[c]),
                fmt(self.per_class_recall[c])
            ));
        }
        s.push_str(&format!(
            "mean,{:.6},{:.6},{:.6}\n",
            self.miou, self.mdice, self.macc
        ));
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn vol(dims: [usize; 3], labels: Vec<u8>) -> LabelVolume {
        LabelVolume::new(dims, labels).unwrap()
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let truth = vol([2, 2, 1], vec![0, 1, 2, 1]);
        let report = segmentation_metrics(&truth, &truth, 3).unwrap();
        assert_eq!(report.miou, 1.0);
        assert_eq!(report.mdice, 1.0);
        assert_eq!(report.macc, 1.0);
    }

    #[test]
    fn complementary_binary_prediction_scores_zero_iou() {
        let truth = vol([1, 1, 4], vec![0, 0, 1, 1]);
        let pred = vol([1, 1, 4], vec![1, 1, 0, 0]);
        let report = segmentation_metrics(&pred, &truth, 2).unwrap();
        assert_eq!(report.miou, 0.0);
        assert_eq!(report.mdice, 0.0);
        assert_eq!(report.macc, 0.0);
    }

    #[test]
    fn worked_four_voxel_example() {
        // truth [0,0,1,1], pred [0,1,1,1]:
        //   class 0: TP 1, FN 1, FP 0 → IoU 1/2, Dice 2/3, recall 1/2
        //   class 1: TP 2, FN 0, FP 1 → IoU 2/3, Dice 4/5, recall 1
        let truth = vol([1, 1, 4], vec![0, 0, 1, 1]);
        let pred = vol([1, 1, 4], vec![0, 1, 1, 1]);
        let report = segmentation_metrics(&pred, &truth, 2).unwrap();
        assert!((report.miou - 0.5833333333).abs() < 1e-9);
        assert!((report.mdice - 0.7333333333).abs() < 1e-9);
        assert!((report.macc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn absent_class_is_excluded_from_means() {
        let truth = vol([1, 1, 4], vec![0, 0, 0, 0]);
        let pred = vol([1, 1, 4], vec![0, 0, 1, 0]);
        let report = segmentation_metrics(&pred, &truth, 3).unwrap();
        assert!(report.per_class_iou[1].is_none());
        assert!(report.per_class_iou[2].is_none());
        // Only class 0 present: IoU 3/4, Dice 6/7, recall 3/4.
        assert!((report.miou - 0.75).abs() < 1e-12);
        assert!((report.macc - 0.75).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_label_is_rejected() {
        let truth = vol([1, 1, 2], vec![0, 3]);
        let pred = vol([1, 1, 2], vec![0, 1]);
        assert!(matches!(
            segmentation_metrics(&pred, &truth, 3),
            Err(Error::InvalidLabel(_))
        ));
    }

    #[test]
    fn confusion_sums_to_voxel_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(71);
        for _ in 0..50 {
            let labels_t: Vec<u8> = (0..27).map(|_| rng.gen_range(0..4)).collect();
            let labels_p: Vec<u8> = (0..27).map(|_| rng.gen_range(0..4)).collect();
            let truth = vol([3, 3, 3], labels_t);
            let pred = vol([3, 3, 3], labels_p);
            let report = segmentation_metrics(&pred, &truth, 4).unwrap();
            assert_eq!(report.voxels(), 27);
        }
    }

    #[test]
    fn permuting_class_ids_permutes_per_class_values() {
        let mut rng = ChaCha8Rng::seed_from_u64(72);
        let labels_t: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let labels_p: Vec<u8> = (0..64).map(|_| rng.gen_range(0..3)).collect();
        let perm = [2u8, 0, 1];
        let truth = vol([4, 4, 4], labels_t.clone());
        let pred = vol([4, 4, 4], labels_p.clone());
        let truth_m = vol([4, 4, 4], labels_t.iter().map(|&l| perm[l as usize]).collect());
        let pred_m = vol([4, 4, 4], labels_p.iter().map(|&l| perm[l as usize]).collect());
        let a = segmentation_metrics(&pred, &truth, 3).unwrap();
        let b = segmentation_metrics(&pred_m, &truth_m, 3).unwrap();
        for c in 0..3 {
            assert_eq!(a.per_class_iou[c], b.per_class_iou[perm[c] as usize]);
        }
        assert!((a.miou - b.miou).abs() < 1e-12);
        assert!((a.mdice - b.mdice).abs() < 1e-12);
        assert!((a.macc - b.macc).abs() < 1e-12);
    }
}
