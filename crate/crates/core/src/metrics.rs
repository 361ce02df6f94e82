//! Segmentation scoring: per-region confusion counts, IoU of the building
//! class, pixel accuracy, and count-pooled overall figures.

use crate::error::PipelineError;
use crate::raster::GrayRaster;
use std::collections::BTreeMap;
use std::fmt::Write as _;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct Counts {
    pub tp: u64,
    pub fp: u64,
    pub fne: u64,
    pub tn: u64,
}

impl Counts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fne + self.tn
    }

    /// Building-class intersection over union; `None` when the class never
    /// occurs in either prediction or truth.
    pub fn iou(&self) -> Option<f64> {
        let denom = self.tp + self.fp + self.fne;
        (denom > 0).then(|| self.tp as f64 / denom as f64)
    }

    pub fn accuracy(&self) -> Option<f64> {
        let total = self.total();
        (total > 0).then(|| (self.tp + self.tn) as f64 / total as f64)
    }

    fn add(&mut self, other: &Counts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fne += other.fne;
        self.tn += other.tn;
    }
}

#[derive(Clone, Debug, Default)]
pub struct MetricAccumulator {
    regions: BTreeMap<String, Counts>,
}

impl MetricAccumulator {
    pub fn new() -> Self {
        Self::default()
    }

    /// Fold one prediction/truth pair into a region's counts. Both rasters
    /// must be binary class-id maps with identical extents.
    pub fn accumulate(
        &mut self,
        region: &str,
        pred: &GrayRaster,
        truth: &GrayRaster,
    ) -> Result<(), PipelineError> {
        if (pred.w, pred.h) != (truth.w, truth.h) {
            return Err(PipelineError::Invalid(format!(
                "prediction {}x{} vs truth {}x{}",
                pred.w, pred.h, truth.w, truth.h
            )));
        }
        let mut c = Counts::default();
        for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if p > 1 || t > 1 {
                return Err(PipelineError::Invalid(format!(
                    "non-binary class id (pred {p}, truth {t}) at pixel {i}"
                )));
            }
            match (p, t) {
                (1, 1) => c.tp += 1,
                (1, 0) => c.fp += 1,
                (0, 1) => c.fne += 1,
                _ => c.tn += 1,
            }
        }
        self.regions.entry(region.to_string()).or_default().add(&c);
        Ok(())
    }

    pub fn merge(&mut self, other: &MetricAccumulator) {
        for (region, counts) in &other.regions {
            self.regions.entry(region.clone()).or_default().add(counts);
        }
    }

    pub fn region(&self, region: &str) -> Option<&Counts> {
        self.regions.get(region)
    }

    pub fn regions(&self) -> impl Iterator<Item = (&str, &Counts)> {
        self.regions.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Counts pooled over all regions (not an average of ratios).
    pub fn overall(&self) -> Counts {
        let mut all = Counts::default();
        for c in self.regions.values() {
            all.add(c);
        }
        all
    }

    pub fn overall_iou(&self) -> Option<f64> {
        self.overall().iou()
    }

    pub fn overall_accuracy(&self) -> Option<f64> {
        self.overall().accuracy()
    }

    /// Fixed-column table plus machine-readable key=value lines.
    pub fn report(&self) -> String {
        fn cell(v: Option<f64>) -> String {
            match v {
                Some(x) => format!("{:>8.4}", x),
                None => format!("{:>8}", "n/a"),
            }
        }
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8} {:>8}", "region", "IoU", "Acc");
        for (region, c) in &self.regions {
            let _ = writeln!(out, "{:<12} {} {}", region, cell(c.iou()), cell(c.accuracy()));
        }
        let all = self.overall();
        let _ = writeln!(out, "{:<12} {} {}", "overall", cell(all.iou()), cell(all.accuracy()));
        for (region, c) in &self.regions {
            let _ = writeln!(out, "iou_{region}={}", kv(c.iou()));
            let _ = writeln!(out, "acc_{region}={}", kv(c.accuracy()));
        }
        let _ = writeln!(out, "iou_overall={}", kv(all.iou()));
        let _ = writeln!(out, "acc_overall={}", kv(all.accuracy()));
        out
    }
}

fn kv(v: Option<f64>) -> String {
    match v {
        Some(x) => format!("{x:.6}"),
        None => "n/a".to_string(),
    }
}

/// Argmax over K >= 2 class planes (plane-major, row-major within a plane)
/// into a class-id raster of h x w. Ties resolve to the lower class id.
pub fn argmax_planes(planes: &[f32], k: usize, h: usize, w: usize) -> GrayRaster {
    assert_eq!(planes.len(), k * h * w, "plane extents");
    assert!(k >= 2);
    let n = h * w;
    let mut out = GrayRaster::new(w, h);
    for i in 0..n {
        let (mut best, mut best_v) = (0usize, planes[i]);
        for c in 1..k {
            let v = planes[c * n + i];
            if v > best_v {
                best = c;
                best_v = v;
            }
        }
        out.data[i] = best as u8;
    }
    out
}
