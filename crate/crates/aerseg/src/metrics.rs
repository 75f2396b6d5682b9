//! Evaluation: confusion-matrix accumulation, per-class IoU / mIoU, latency
//! measurement and the CSV report writers.

use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::types::{ClassMask, LabelSet, IGNORE_INDEX};

/// K x K confusion counts: rows index ground truth, columns prediction.
/// Accumulation over images is a merge of these, so dataset-level IoU is
/// computed from one global matrix, never averaged per image.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        assert!(classes >= 1);
        ConfusionMatrix { classes, counts: vec![0; classes * classes] }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    #[inline]
    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    #[inline]
    pub fn add(&mut self, truth: usize, pred: usize, n: u64) {
        self.counts[truth * self.classes + pred] += n;
    }

    /// Count pixel pairs from one image. Sentinel ground-truth pixels are
    /// skipped; any other out-of-range index is an error.
    pub fn accumulate(&mut self, truth: &ClassMask, pred: &ClassMask) -> Result<()> {
        if truth.width != pred.width || truth.height != pred.height {
            return Err(Error::ShapeMismatch(format!(
                "truth {}x{} vs prediction {}x{}",
                truth.width, truth.height, pred.width, pred.height
            )));
        }
        let k = self.classes as u8;
        for (i, (&t, &p)) in truth.data().iter().zip(pred.data()).enumerate() {
            if t == IGNORE_INDEX {
                continue;
            }
            if t >= k || p >= k {
                return Err(Error::MaskEncode {
                    index: t.max(p),
                    x: i % truth.width,
                    y: i / truth.width,
                    num_classes: self.classes,
                });
            }
            self.add(t as usize, p as usize, 1);
        }
        Ok(())
    }

    /// Merge another matrix into this one; accumulation order never matters.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.classes != other.classes {
            return Err(Error::ShapeMismatch(format!(
                "confusion sizes {} vs {}",
                self.classes, other.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Per-class IoU = TP / (TP + FP + FN). Classes that appear in neither
    /// the truth nor the predictions have an undefined IoU, reported as None.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        let k = self.classes;
        (0..k)
            .map(|c| {
                let tp = self.get(c, c);
                let fnn: u64 = (0..k).map(|j| self.get(c, j)).sum::<u64>() - tp;
                let fp: u64 = (0..k).map(|i| self.get(i, c)).sum::<u64>() - tp;
                let denom = tp + fp + fnn;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Unweighted mean over defined per-class IoUs. Errors when every class
    /// is undefined.
    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::NoDefinedClasses);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Overall pixel accuracy (trace over total).
    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::NoDefinedClasses);
        }
        let trace: u64 = (0..self.classes).map(|c| self.get(c, c)).sum();
        Ok(trace as f64 / total as f64)
    }
}

/// Latency summary for one model at a fixed input size.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EffReport {
    pub params: u64,
    pub latency_ms_mean: f64,
    pub latency_ms_stddev: f64,
    pub fps: f64,
    pub warmup_runs: usize,
    pub timed_runs: usize,
}

/// Wall-clock latency of `f`: `warmup` untimed calls, then `runs` timed ones.
/// fps is 1000 over the mean per-run milliseconds.
pub fn measure_latency(
    mut f: impl FnMut() -> Result<()>,
    warmup: usize,
    runs: usize,
) -> Result<(f64, f64, f64)> {
    if runs == 0 {
        return Err(Error::InvalidConfig("latency measurement needs runs >= 1".into()));
    }
    for _ in 0..warmup {
        f()?;
    }
    let mut samples = Vec::with_capacity(runs);
    for _ in 0..runs {
        let t0 = Instant::now();
        f()?;
        samples.push(t0.elapsed().as_secs_f64() * 1e3);
    }
    let mean = samples.iter().sum::<f64>() / runs as f64;
    let var = samples.iter().map(|s| (s - mean) * (s - mean)).sum::<f64>() / runs as f64;
    Ok((mean, var.sqrt(), 1000.0 / mean))
}

/// Per-class IoU rows plus a final mIoU row, matching the label-set order.
pub fn write_iou_report(path: &Path, labels: &LabelSet, cm: &ConfusionMatrix) -> Result<()> {
    if labels.num_classes() != cm.classes() {
        return Err(Error::ShapeMismatch(format!(
            "label set has {} classes, matrix {}",
            labels.num_classes(),
            cm.classes()
        )));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["class", "iou"]).map_err(|e| csv_err(path, e))?;
    for (entry, iou) in labels.entries().iter().zip(cm.iou_per_class()) {
        let cell = match iou {
            Some(v) => format!("{v:.6}"),
            None => "undefined".to_string(),
        };
        w.write_record([entry.name.as_str(), cell.as_str()]).map_err(|e| csv_err(path, e))?;
    }
    w.write_record(["mIoU", &format!("{:.6}", cm.mean_iou()?)]).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// Raw confusion counts, one row per ground-truth class.
pub fn write_confusion_report(path: &Path, labels: &LabelSet, cm: &ConfusionMatrix) -> Result<()> {
    if labels.num_classes() != cm.classes() {
        return Err(Error::ShapeMismatch("label/matrix class count mismatch".into()));
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["truth\\pred".to_string()];
    header.extend(labels.entries().iter().map(|e| e.name.clone()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for (t, entry) in labels.entries().iter().enumerate() {
        let mut row = vec![entry.name.clone()];
        row.extend((0..cm.classes()).map(|p| cm.get(t, p).to_string()));
        w.write_record(&row).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

/// One efficiency row per profiled variant: parameter count, mean latency
/// and throughput.
pub fn write_efficiency_report(path: &Path, rows: &[(String, EffReport)]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    w.write_record(["variant", "params_m", "latency_ms", "latency_stddev_ms", "fps"])
        .map_err(|e| csv_err(path, e))?;
    for (name, r) in rows {
        w.write_record([
            name.as_str(),
            &format!("{:.2}", r.params as f64 / 1e6),
            &format!("{:.2}", r.latency_ms_mean),
            &format!("{:.2}", r.latency_ms_stddev),
            &format!("{:.2}", r.fps),
        ])
        .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::io(path, std::io::Error::new(std::io::ErrorKind::Other, format!("{other:?}"))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn perfect_prediction_iou_one() {
        let truth = ClassMask::new(4, 1, vec![0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        assert_eq!(cm.iou_per_class(), vec![Some(1.0), Some(1.0), Some(1.0)]);
        assert_eq!(cm.mean_iou().unwrap(), 1.0);
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
    }

    #[test]
    fn disjoint_prediction_iou_zero() {
        let truth = ClassMask::new(2, 1, vec![0, 0]);
        let pred = ClassMask::new(2, 1, vec![1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&truth, &pred).unwrap();
        assert_eq!(cm.iou_per_class(), vec![Some(0.0), Some(0.0)]);
    }

    #[test]
    fn known_half_overlap() {
        // truth: 4 pixels of class 0; pred: 2 right, 2 as class 1.
        // IoU(0) = 2/4, IoU(1) = 0/2
        let truth = ClassMask::new(4, 1, vec![0; 4]);
        let pred = ClassMask::new(4, 1, vec![0, 0, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&truth, &pred).unwrap();
        assert_eq!(cm.iou_per_class(), vec![Some(0.5), Some(0.0)]);
        assert_eq!(cm.mean_iou().unwrap(), 0.25);
    }

    #[test]
    fn absent_class_is_undefined_not_zero() {
        let truth = ClassMask::new(2, 1, vec![0, 0]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&truth, &truth).unwrap();
        let ious = cm.iou_per_class();
        assert_eq!(ious[0], Some(1.0));
        assert_eq!(ious[1], None);
        assert_eq!(ious[2], None);
        // the undefined classes do not drag the mean down
        assert_eq!(cm.mean_iou().unwrap(), 1.0);
    }

    #[test]
    fn sentinel_pixels_skipped() {
        let truth = ClassMask::new(3, 1, vec![0, IGNORE_INDEX, 1]);
        let pred = ClassMask::new(3, 1, vec![0, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&truth, &pred).unwrap();
        assert_eq!(cm.total(), 2);
    }

    #[test]
    fn out_of_range_prediction_errors() {
        let truth = ClassMask::new(1, 1, vec![0]);
        let pred = ClassMask::new(1, 1, vec![5]);
        let mut cm = ConfusionMatrix::new(2);
        assert!(cm.accumulate(&truth, &pred).is_err());
    }

    #[test]
    fn empty_matrix_miou_errors() {
        let cm = ConfusionMatrix::new(4);
        assert!(matches!(cm.mean_iou(), Err(Error::NoDefinedClasses)));
    }

    #[test]
    fn merge_matches_joint_accumulation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gen_mask = |rng: &mut ChaCha8Rng| {
            ClassMask::new(8, 8, (0..64).map(|_| rng.gen_range(0..5)).collect())
        };
        let pairs: Vec<(ClassMask, ClassMask)> =
            (0..6).map(|_| (gen_mask(&mut rng), gen_mask(&mut rng))).collect();
        let mut joint = ConfusionMatrix::new(5);
        for (t, p) in &pairs {
            joint.accumulate(t, p).unwrap();
        }
        let mut merged = ConfusionMatrix::new(5);
        for (t, p) in &pairs {
            let mut part = ConfusionMatrix::new(5);
            part.accumulate(t, p).unwrap();
            merged.merge(&part).unwrap();
        }
        assert_eq!(joint, merged);
        // order independence
        let mut reversed = ConfusionMatrix::new(5);
        for (t, p) in pairs.iter().rev() {
            reversed.accumulate(t, p).unwrap();
        }
        assert_eq!(joint, reversed);
    }

    #[test]
    fn iou_matches_set_oracle() {
        // independent oracle: compute IoU per class from explicit pixel sets
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..50 {
            let k = rng.gen_range(2..6);
            let truth =
                ClassMask::new(16, 16, (0..256).map(|_| rng.gen_range(0..k)).collect());
            let pred =
                ClassMask::new(16, 16, (0..256).map(|_| rng.gen_range(0..k)).collect());
            let mut cm = ConfusionMatrix::new(k as usize);
            cm.accumulate(&truth, &pred).unwrap();
            let ious = cm.iou_per_class();
            for c in 0..k {
                let inter = truth
                    .data()
                    .iter()
                    .zip(pred.data())
                    .filter(|(&t, &p)| t == c && p == c)
                    .count();
                let union = truth
                    .data()
                    .iter()
                    .zip(pred.data())
                    .filter(|(&t, &p)| t == c || p == c)
                    .count();
                let expect = if union == 0 { None } else { Some(inter as f64 / union as f64) };
                match (ious[c as usize], expect) {
                    (Some(a), Some(b)) => assert!((a - b).abs() <= 1e-12),
                    (a, b) => assert_eq!(a, b),
                }
            }
        }
    }

    #[test]
    fn latency_fps_consistency() {
        let (mean, _stddev, fps) =
            measure_latency(|| Ok(std::thread::sleep(std::time::Duration::from_micros(200))), 2, 10)
                .unwrap();
        assert!(mean > 0.0);
        assert!((fps - 1000.0 / mean).abs() / fps <= 1e-9);
    }

    #[test]
    fn latency_rejects_zero_runs() {
        assert!(measure_latency(|| Ok(()), 0, 0).is_err());
    }

    #[test]
    fn reports_round_trip_through_csv() {
        let dir = tempfile::tempdir().unwrap();
        let labels = LabelSet::uavid();
        let mut cm = ConfusionMatrix::new(8);
        let truth = ClassMask::new(4, 2, vec![0, 1, 2, 3, 4, 5, 6, 7]);
        cm.accumulate(&truth, &truth).unwrap();
        let iou_path = dir.path().join("iou.csv");
        write_iou_report(&iou_path, &labels, &cm).unwrap();
        let text = std::fs::read_to_string(&iou_path).unwrap();
        assert!(text.lines().count() == 10); // header + 8 classes + mIoU
        assert!(text.contains("mIoU,1.000000"));

        let conf_path = dir.path().join("confusion.csv");
        write_confusion_report(&conf_path, &labels, &cm).unwrap();
        let text = std::fs::read_to_string(&conf_path).unwrap();
        assert!(text.lines().count() == 9);

        let eff_path = dir.path().join("eff.csv");
        let report = EffReport {
            params: 3_716_456,
            latency_ms_mean: 7.67,
            latency_ms_stddev: 0.1,
            fps: 130.38,
            warmup_runs: 10,
            timed_runs: 100,
        };
        write_efficiency_report(&eff_path, &[("b0".to_string(), report)]).unwrap();
        let text = std::fs::read_to_string(&eff_path).unwrap();
        assert!(text.contains("b0,3.72,7.67"));
    }
}
