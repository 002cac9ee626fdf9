//! Confusion-matrix segmentation metrics and their CSV tables.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};

/// `counts[g * k + p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(num_classes: usize) -> Self {
        Self {
            k: num_classes,
            counts: vec![0; num_classes * num_classes],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn accumulate(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::Shape(format!(
                "prediction has {} pixels, ground truth {}",
                pred.len(),
                gt.len()
            )));
        }
        if let Some((i, &l)) = pred.iter().chain(gt).enumerate().find(|(_, l)| **l as usize >= self.k) {
            let which = if i < pred.len() { "prediction" } else { "ground truth" };
            return Err(Error::Data(format!(
                "{which} label {l} at pixel {} outside 0..{}",
                i % pred.len().max(1),
                self.k
            )));
        }
        for (&p, &g) in pred.iter().zip(gt) {
            self.counts[g as usize * self.k + p as usize] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::Shape(format!("merging {}-class and {}-class matrices", self.k, other.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn true_positives(&self, c: usize) -> u64 {
        self.get(c, c)
    }

    pub fn false_positives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&g| g != c).map(|g| self.get(g, c)).sum()
    }

    pub fn false_negatives(&self, c: usize) -> u64 {
        (0..self.k).filter(|&p| p != c).map(|p| self.get(c, p)).sum()
    }

    /// Class occurs in the ground truth or in the prediction.
    pub fn is_present(&self, c: usize) -> bool {
        self.true_positives(c) + self.false_positives(c) + self.false_negatives(c) > 0
    }

    /// `TP / (TP + FP + FN)`; 1 for a class absent from both masks.
    pub fn iou(&self, c: usize) -> f64 {
        let (tp, fp, fn_) = (self.true_positives(c), self.false_positives(c), self.false_negatives(c));
        if tp + fp + fn_ == 0 {
            1.0
        } else {
            tp as f64 / (tp + fp + fn_) as f64
        }
    }

    /// Mean IoU over present classes; 1 when nothing was evaluated.
    pub fn mean_iou(&self) -> f64 {
        let present: Vec<usize> = (0..self.k).filter(|&c| self.is_present(c)).collect();
        if present.is_empty() {
            return 1.0;
        }
        present.iter().map(|&c| self.iou(c)).sum::<f64>() / present.len() as f64
    }

    /// `TP / (TP + FP)`; `None` when nothing was predicted as `c`.
    pub fn precision(&self, c: usize) -> Option<f64> {
        let (tp, fp) = (self.true_positives(c), self.false_positives(c));
        (tp + fp > 0).then(|| tp as f64 / (tp + fp) as f64)
    }

    /// `TP / (TP + FN)`; `None` when `c` is absent from the ground truth.
    pub fn recall(&self, c: usize) -> Option<f64> {
        let (tp, fn_) = (self.true_positives(c), self.false_negatives(c));
        (tp + fn_ > 0).then(|| tp as f64 / (tp + fn_) as f64)
    }

    pub fn pixel_accuracy(&self) -> f64 {
        let total = self.total();
        if total == 0 {
            return 1.0;
        }
        (0..self.k).map(|c| self.get(c, c)).sum::<u64>() as f64 / total as f64
    }
}

pub fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// One CSV row: a class (or `miou`) summarized over runs. IoU spread is the
/// population standard deviation; precision and recall are means over runs
/// where they are defined.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassSummary {
    pub class: String,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub precision: Option<f64>,
    pub recall: Option<f64>,
}

pub fn summarize(runs: &[ConfusionMatrix], class_names: &[String]) -> Vec<ClassSummary> {
    let Some(first) = runs.first() else {
        return Vec::new();
    };
    let defined_mean = |xs: Vec<Option<f64>>| {
        let xs: Vec<f64> = xs.into_iter().flatten().collect();
        (!xs.is_empty()).then(|| mean_std(&xs).0)
    };
    let mut rows: Vec<ClassSummary> = (0..first.num_classes())
        .map(|c| {
            let ious: Vec<f64> = runs.iter().map(|cm| cm.iou(c)).collect();
            let (iou_mean, iou_std) = mean_std(&ious);
            ClassSummary {
                class: class_names.get(c).cloned().unwrap_or_else(|| format!("class{c}")),
                iou_mean,
                iou_std,
                precision: defined_mean(runs.iter().map(|cm| cm.precision(c)).collect()),
                recall: defined_mean(runs.iter().map(|cm| cm.recall(c)).collect()),
            }
        })
        .collect();
    let mious: Vec<f64> = runs.iter().map(ConfusionMatrix::mean_iou).collect();
    let (m, s) = mean_std(&mious);
    rows.push(ClassSummary {
        class: "miou".into(),
        iou_mean: m,
        iou_std: s,
        precision: None,
        recall: None,
    });
    rows
}

pub fn fmt_metric(x: Option<f64>) -> String {
    match x {
        Some(v) => format!("{v:.6}"),
        None => "NA".into(),
    }
}

/// Writes `# config_digest <hex>` followed by the class table.
pub fn write_summary_csv(mut out: impl Write, rows: &[ClassSummary], digest: &str) -> Result<()> {
    writeln!(out, "# config_digest {digest}").map_err(|e| Error::Data(e.to_string()))?;
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Data(e.to_string());
    w.write_record(["class", "iou_mean", "iou_std", "precision", "recall"]).map_err(csv_err)?;
    for r in rows {
        w.write_record([
            r.class.clone(),
            format!("{:.6}", r.iou_mean),
            format!("{:.6}", r.iou_std),
            fmt_metric(r.precision),
            fmt_metric(r.recall),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Data(e.to_string()))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    #[test]
    fn identical_masks_fill_diagonal() {
        let mut cm = ConfusionMatrix::new(3);
        let m = [0u8, 1, 2, 2, 1, 0, 0];
        cm.accumulate(&m, &m).unwrap();
        for g in 0..3 {
            for p in 0..3 {
                assert_eq!(cm.get(g, p) > 0, g == p);
            }
            assert_eq!(cm.iou(g), 1.0);
            assert_eq!(cm.precision(g), Some(1.0));
            assert_eq!(cm.recall(g), Some(1.0));
        }
        let before = cm.clone();
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn matches_double_loop_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let pred: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let gt: Vec<u8> = (0..64).map(|_| rng.random_range(0..4)).collect();
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&pred, &gt).unwrap();
        for g in 0..4u8 {
            for p in 0..4u8 {
                let mut n = 0;
                for i in 0..64 {
                    if gt[i] == g && pred[i] == p {
                        n += 1;
                    }
                }
                assert_eq!(cm.get(g as usize, p as usize), n);
            }
        }
        assert_eq!(cm.total(), 64);
    }

    #[test]
    fn hand_counted_half_prediction() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[1, 1, 0, 0], &[1, 1, 1, 1]).unwrap();
        assert_eq!(cm.iou(1), 0.5);
        assert_eq!(cm.recall(1), Some(0.5));
        assert_eq!(cm.precision(1), Some(1.0));
        assert_eq!(cm.iou(0), 0.0);
        assert_eq!(cm.precision(0), Some(0.0));
        assert_eq!(cm.recall(0), None);
    }

    #[test]
    fn disjoint_prediction_has_zero_iou() {
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&[0, 0], &[1, 1]).unwrap();
        assert_eq!(cm.iou(1), 0.0);
    }

    #[test]
    fn absent_class_excluded_from_mean() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 1, 1, 1], &[0, 1, 1, 0]).unwrap();
        assert_eq!(cm.iou(2), 1.0);
        assert!(!cm.is_present(2));
        let want = (0.5 + 2.0 / 3.0) / 2.0;
        assert!((cm.mean_iou() - want).abs() < 1e-15);
        assert_eq!(cm.precision(2), None);
    }

    #[test]
    fn empty_masks_leave_matrix_unchanged() {
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&[0, 2], &[1, 2]).unwrap();
        let before = cm.clone();
        cm.accumulate(&[], &[]).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn label_and_shape_errors() {
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&[0], &[0, 1]).is_err());
        assert!(cm.accumulate(&[0, 2], &[0, 1]).is_err());
        assert!(cm.merge(&ConfusionMatrix::new(3)).is_err());
    }

    #[test]
    fn summary_uses_population_std() {
        let mut a = ConfusionMatrix::new(2);
        a.accumulate(&[1, 1], &[1, 1]).unwrap();
        let mut b = ConfusionMatrix::new(2);
        b.accumulate(&[1, 0], &[1, 1]).unwrap();
        let rows = summarize(&[a, b], &["bg".into(), "fg".into()]);
        assert_eq!(rows[1].class, "fg");
        assert!((rows[1].iou_mean - 0.75).abs() < 1e-15);
        assert!((rows[1].iou_std - 0.25).abs() < 1e-15);
        assert_eq!(rows.last().unwrap().class, "miou");
        let mut buf = Vec::new();
        write_summary_csv(&mut buf, &rows, "d1").unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("# config_digest d1\nclass,iou_mean,iou_std,precision,recall\n"));
    }

    fn arb_masks() -> impl Strategy<Value = (Vec<u8>, Vec<u8>)> {
        (1usize..80).prop_flat_map(|n| (prop::collection::vec(0u8..3, n), prop::collection::vec(0u8..3, n)))
    }

    proptest! {
        #[test]
        fn iou_bounded_by_precision_and_recall((pred, gt) in arb_masks()) {
            let mut cm = ConfusionMatrix::new(3);
            cm.accumulate(&pred, &gt).unwrap();
            for c in 0..3 {
                if cm.is_present(c) {
                    let iou = cm.iou(c);
                    let p = cm.precision(c).unwrap_or(1.0);
                    let r = cm.recall(c).unwrap_or(1.0);
                    prop_assert!(0.0 <= iou && iou <= p.min(r) + 1e-15 && p.min(r) <= 1.0);
                }
            }
        }

        #[test]
        fn accumulation_order_independent((pred, gt) in arb_masks(), split in 0usize..80) {
            let k = split.min(pred.len());
            let mut whole = ConfusionMatrix::new(3);
            whole.accumulate(&pred, &gt).unwrap();
            let mut a = ConfusionMatrix::new(3);
            a.accumulate(&pred[k..], &gt[k..]).unwrap();
            let mut b = ConfusionMatrix::new(3);
            b.accumulate(&pred[..k], &gt[..k]).unwrap();
            a.merge(&b).unwrap();
            prop_assert_eq!(whole, a);
        }
    }
}
