//! Segmentation metrics: voxel overlap, surface distance and node-level
//! detection, plus dataset aggregation.

mod distance;

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::components::{label, Connectivity};
use crate::volume::LabelVolume;
use crate::{Error, Result};

pub use distance::{squared_edt, surface};

pub const DEFAULT_NODE_DSC_THRESHOLD: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

pub fn confusion(pred: &[bool], gt: &[bool]) -> Confusion {
    let mut c = Confusion::default();
    for (p, g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            _ => {}
        }
    }
    c
}

/// Both masks empty scores 1 on every metric; exactly one empty scores 0.
pub fn overlap_from_counts(c: Confusion) -> Overlap {
    let pred_n = c.tp + c.fp;
    let gt_n = c.tp + c.fn_;
    if pred_n == 0 && gt_n == 0 {
        return Overlap { dsc: 1.0, iou: 1.0, recall: 1.0, precision: 1.0 };
    }
    if pred_n == 0 || gt_n == 0 {
        return Overlap { dsc: 0.0, iou: 0.0, recall: 0.0, precision: 0.0 };
    }
    let tp = c.tp as f64;
    Overlap {
        dsc: 2.0 * tp / (pred_n + gt_n) as f64,
        iou: tp / (c.tp + c.fp + c.fn_) as f64,
        recall: tp / gt_n as f64,
        precision: tp / pred_n as f64,
    }
}

fn binary(vol: &LabelVolume, what: &str) -> Result<Vec<bool>> {
    if !vol.is_binary() {
        return Err(Error::Data(format!("{what} mask is not binary")));
    }
    Ok(vol.nonzero_mask())
}

fn check_pair(pred: &LabelVolume, gt: &LabelVolume) -> Result<()> {
    if !pred.geometry().matches(gt.geometry()) {
        return Err(Error::shape(
            "metrics",
            format!("prediction grid {:?} vs ground truth {:?}", pred.geometry().shape, gt.geometry().shape),
        ));
    }
    Ok(())
}

pub fn voxel_overlap_metrics(pred: &LabelVolume, gt: &LabelVolume) -> Result<Overlap> {
    check_pair(pred, gt)?;
    Ok(overlap_from_counts(confusion(&binary(pred, "prediction")?, &binary(gt, "ground-truth")?)))
}

/// Average symmetric surface distance in mm on raw boolean grids.
pub fn assd_masks(a: &[bool], b: &[bool], shape: [usize; 3], spacing: [f64; 3]) -> Result<f64> {
    let sa = surface(a, shape);
    let sb = surface(b, shape);
    let na = sa.iter().filter(|v| **v).count();
    let nb = sb.iter().filter(|v| **v).count();
    if na == 0 || nb == 0 {
        return Err(Error::Data("ASSD is undefined when either mask is empty".into()));
    }
    let da = squared_edt(&sa, shape, spacing);
    let db = squared_edt(&sb, shape, spacing);
    let directed = |from: &[bool], to: &[f64], n: usize| {
        from.iter().zip(to).filter(|(f, _)| **f).map(|(_, d)| d.sqrt()).sum::<f64>() / n as f64
    };
    Ok(0.5 * (directed(&sa, &db, na) + directed(&sb, &da, nb)))
}

pub fn assd(pred: &LabelVolume, gt: &LabelVolume) -> Result<f64> {
    check_pair(pred, gt)?;
    assd_masks(&binary(pred, "prediction")?, &binary(gt, "ground-truth")?, pred.shape(), pred.geometry().spacing_mm)
}

/// Fraction of 26-connected ground-truth components matched by some
/// predicted component with DSC above `threshold`. One predicted component
/// may detect several nodes.
pub fn node_recall_masks(pred: &[bool], gt: &[bool], shape: [usize; 3], threshold: f64) -> Result<f64> {
    let g = label(gt, shape, Connectivity::TwentySix);
    if g.count == 0 {
        return Err(Error::Data("NodeRecall is undefined for an empty ground truth".into()));
    }
    let p = label(pred, shape, Connectivity::TwentySix);
    let mut inter = std::collections::HashMap::<(u32, u32), usize>::new();
    for (gl, pl) in g.labels.iter().zip(&p.labels) {
        if *gl != 0 && *pl != 0 {
            *inter.entry((*gl, *pl)).or_default() += 1;
        }
    }
    let mut detected = vec![false; g.count];
    for ((gl, pl), n) in inter {
        let dsc = 2.0 * n as f64 / (g.sizes[gl as usize - 1] + p.sizes[pl as usize - 1]) as f64;
        if dsc > threshold {
            detected[gl as usize - 1] = true;
        }
    }
    Ok(detected.iter().filter(|d| **d).count() as f64 / g.count as f64)
}

pub fn node_recall(pred: &LabelVolume, gt: &LabelVolume, threshold: f64) -> Result<f64> {
    check_pair(pred, gt)?;
    node_recall_masks(&binary(pred, "prediction")?, &binary(gt, "ground-truth")?, pred.shape(), threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaseMetrics {
    pub id: String,
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    /// Missing when either mask is empty.
    pub assd_mm: Option<f64>,
    /// Missing when the ground truth is empty.
    pub node_recall: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dsc: f64,
    pub iou: f64,
    pub recall: f64,
    pub precision: f64,
    pub assd_mm: Option<f64>,
    pub node_recall: Option<f64>,
    /// Cases left out of the ASSD mean.
    pub assd_missing: usize,
    pub node_recall_missing: usize,
    pub per_case: Vec<CaseMetrics>,
}

pub struct EvalCase<'a> {
    pub id: &'a str,
    pub pred: &'a LabelVolume,
    pub gt: &'a LabelVolume,
}

pub fn evaluate_case(case: &EvalCase, threshold: f64) -> Result<CaseMetrics> {
    let tag = |e: Error| Error::Data(format!("case {}: {e}", case.id));
    check_pair(case.pred, case.gt).map_err(tag)?;
    let p = binary(case.pred, "prediction").map_err(tag)?;
    let g = binary(case.gt, "ground-truth").map_err(tag)?;
    let o = overlap_from_counts(confusion(&p, &g));
    let shape = case.gt.shape();
    Ok(CaseMetrics {
        id: case.id.to_string(),
        dsc: o.dsc,
        iou: o.iou,
        recall: o.recall,
        precision: o.precision,
        assd_mm: assd_masks(&p, &g, shape, case.gt.geometry().spacing_mm).ok(),
        node_recall: node_recall_masks(&p, &g, shape, threshold).ok(),
    })
}

fn mean(v: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

/// Per-case metrics and their unweighted means.
pub fn evaluate_dataset(cases: &[EvalCase], threshold: f64) -> Result<MetricsReport> {
    if cases.is_empty() {
        return Err(Error::Data("no cases to evaluate".into()));
    }
    let per_case = cases.iter().map(|c| evaluate_case(c, threshold)).collect::<Result<Vec<_>>>()?;
    Ok(aggregate(per_case))
}

pub fn aggregate(per_case: Vec<CaseMetrics>) -> MetricsReport {
    let assd_missing = per_case.iter().filter(|c| c.assd_mm.is_none()).count();
    let node_recall_missing = per_case.iter().filter(|c| c.node_recall.is_none()).count();
    if assd_missing > 0 {
        log::warn!("ASSD undefined for {assd_missing} case(s); excluded from the mean");
    }
    MetricsReport {
        dsc: mean(per_case.iter().map(|c| c.dsc)).unwrap_or(0.0),
        iou: mean(per_case.iter().map(|c| c.iou)).unwrap_or(0.0),
        recall: mean(per_case.iter().map(|c| c.recall)).unwrap_or(0.0),
        precision: mean(per_case.iter().map(|c| c.precision)).unwrap_or(0.0),
        assd_mm: mean(per_case.iter().filter_map(|c| c.assd_mm)),
        node_recall: mean(per_case.iter().filter_map(|c| c.node_recall)),
        assd_missing,
        node_recall_missing,
        per_case,
    }
}

impl MetricsReport {
    pub fn to_table(&self) -> String {
        let opt = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        let mut s = String::new();
        let _ = writeln!(s, "{:<24} {:>7} {:>7} {:>7} {:>9} {:>9} {:>10}", "case", "DSC", "IOU", "Recall", "Precision", "ASSD(mm)", "NodeRecall");
        for c in &self.per_case {
            let _ = writeln!(
                s,
                "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>9} {:>10}",
                c.id, c.dsc, c.iou, c.recall, c.precision, opt(c.assd_mm), opt(c.node_recall)
            );
        }
        let _ = writeln!(
            s,
            "{:<24} {:>7.4} {:>7.4} {:>7.4} {:>9.4} {:>9} {:>10}",
            "mean", self.dsc, self.iou, self.recall, self.precision, opt(self.assd_mm), opt(self.node_recall)
        );
        if self.assd_missing > 0 {
            let _ = writeln!(s, "ASSD undefined for {} case(s)", self.assd_missing);
        }
        s
    }
}
