//! Detection scoring: one-to-one matching against ground truth,
//! precision/recall/F1, localization error statistics and threshold sweeps.

use std::fmt;

use crate::error::{Error, Result};
use crate::localize::LocalizationSet;
use crate::sim::GroundTruth;

/// A detection paired with a ground-truth bubble of the same frame.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MatchedPair {
    pub frame: usize,
    /// Index into the detection list of the set.
    pub det: usize,
    /// Index into the frame's ground-truth list.
    pub gt: usize,
    pub distance_um: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Matching {
    pub pairs: Vec<MatchedPair>,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub radius_um: f64,
}

/// Greedy one-to-one matching within `radius_um`, frame by frame.
///
/// Candidate pairs are accepted in ascending `(distance, detection, truth)`
/// order, skipping endpoints that are already taken.
pub fn match_detections(dets: &LocalizationSet, gt: &GroundTruth, radius_um: f64) -> Result<Matching> {
    if !(radius_um > 0.0 && radius_um.is_finite()) {
        return Err(Error::arg(format!("matching radius must be positive, got {radius_um}")));
    }
    let px = dets.pixel_size_um;
    if !(px > 0.0 && px.is_finite()) {
        return Err(Error::arg(format!(
            "detections carry no usable pixel size ({px}); distances cannot be expressed in um"
        )));
    }
    let frames = dets.frames.max(gt.frame_count());
    let mut by_frame: Vec<Vec<usize>> = vec![Vec::new(); frames];
    for (i, l) in dets.locs.iter().enumerate() {
        if l.frame >= frames {
            return Err(Error::arg(format!(
                "detection in frame {} beyond {frames} frames",
                l.frame
            )));
        }
        by_frame[l.frame].push(i);
    }
    let mut pairs = Vec::new();
    let (mut fp, mut fn_) = (0, 0);
    let empty = Vec::new();
    for (t, det_ids) in by_frame.iter().enumerate() {
        let truth = gt.frames.get(t).unwrap_or(&empty);
        let mut cand = Vec::new();
        for &di in det_ids {
            let l = &dets.locs[di];
            for (gi, g) in truth.iter().enumerate() {
                let d = (l.x - g.x).hypot(l.z - g.z) * px;
                if d <= radius_um {
                    cand.push((d, di, gi));
                }
            }
        }
        cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut det_taken = vec![false; dets.locs.len()];
        let mut gt_taken = vec![false; truth.len()];
        let before = pairs.len();
        for (d, di, gi) in cand {
            if !det_taken[di] && !gt_taken[gi] {
                det_taken[di] = true;
                gt_taken[gi] = true;
                pairs.push(MatchedPair {
                    frame: t,
                    det: di,
                    gt: gi,
                    distance_um: d,
                });
            }
        }
        let tp = pairs.len() - before;
        fp += det_ids.len() - tp;
        fn_ += truth.len() - tp;
    }
    Ok(Matching {
        tp: pairs.len(),
        pairs,
        fp,
        fn_,
        radius_um,
    })
}

/// Precision, recall and F1 from counts. Undefined ratios are reported as
/// zero with the matching flag set.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// No detections: precision undefined.
    pub no_detections: bool,
    /// No ground truth: recall undefined.
    pub no_truth: bool,
}

pub fn precision_recall_f1(tp: usize, fp: usize, fn_: usize) -> Scores {
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    Scores {
        precision: ratio(tp, tp + fp),
        recall: ratio(tp, tp + fn_),
        f1: ratio(2 * tp, 2 * tp + fn_ + fp),
        no_detections: tp + fp == 0,
        no_truth: tp + fn_ == 0,
    }
}

pub fn matching_scores(m: &Matching) -> Scores {
    precision_recall_f1(m.tp, m.fp, m.fn_)
}

/// Harmonic mean of precision and recall, zero when both are zero.
pub fn f1_from_pr(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Mean and population standard deviation of the matched distances, in um.
/// `None` when nothing was matched.
pub fn localization_errors(m: &Matching) -> Option<(f64, f64)> {
    if m.pairs.is_empty() {
        return None;
    }
    let n = m.pairs.len() as f64;
    let mean = m.pairs.iter().map(|p| p.distance_um).sum::<f64>() / n;
    let var = m.pairs.iter().map(|p| (p.distance_um - mean).powi(2)).sum::<f64>() / n;
    Some((mean, var.sqrt()))
}

/// One threshold of a sweep.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PrPoint {
    pub threshold: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
}

#[derive(Clone, Debug, PartialEq, Default)]
pub struct PrCurve {
    pub points: Vec<PrPoint>,
    /// Thresholds that produced no detections; they have no precision.
    pub excluded: Vec<f64>,
}

impl PrCurve {
    /// The point with the highest F1 (first one on ties).
    pub fn best(&self) -> Option<PrPoint> {
        self.points
            .iter()
            .copied()
            .fold(None, |best: Option<PrPoint>, p| match best {
                Some(b) if b.f1 >= p.f1 => Some(b),
                _ => Some(p),
            })
    }

    pub fn best_f1(&self) -> f64 {
        self.best().map_or(0.0, |p| p.f1)
    }

    /// Highest precision among points reaching at least `recall`.
    pub fn precision_at(&self, recall: f64) -> Option<f64> {
        self.points
            .iter()
            .filter(|p| p.recall >= recall)
            .map(|p| p.precision)
            .fold(None, |m: Option<f64>, p| Some(m.map_or(p, |m| m.max(p))))
    }

    pub fn max_recall(&self) -> f64 {
        self.points.iter().map(|p| p.recall).fold(0.0, f64::max)
    }
}

/// Scores `detect(threshold)` at every threshold of `sweep`.
pub fn pr_sweep(
    sweep: &[f64],
    gt: &GroundTruth,
    radius_um: f64,
    mut detect: impl FnMut(f64) -> Result<LocalizationSet>,
) -> Result<PrCurve> {
    if sweep.is_empty() {
        return Err(Error::arg("threshold sweep is empty"));
    }
    let mut curve = PrCurve::default();
    for &thr in sweep {
        let dets = detect(thr)?;
        if dets.is_empty() {
            curve.excluded.push(thr);
            continue;
        }
        let m = match_detections(&dets, gt, radius_um)?;
        let s = matching_scores(&m);
        curve.points.push(PrPoint {
            threshold: thr,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
        });
    }
    Ok(curve)
}

/// PR curve of a fixed detection set, sweeping a lower bound on detection
/// intensity. Thresholds are `points` evenly spaced ranks of the sorted
/// intensities (all of them when there are fewer).
pub fn intensity_pr_curve(dets: &LocalizationSet, gt: &GroundTruth, radius_um: f64, points: usize) -> Result<PrCurve> {
    if points == 0 {
        return Err(Error::arg("at least one threshold is required"));
    }
    let mut levels: Vec<f64> = dets.locs.iter().map(|l| l.intensity).collect();
    levels.sort_by(f64::total_cmp);
    levels.dedup();
    if levels.is_empty() {
        return Ok(PrCurve::default());
    }
    let sweep: Vec<f64> = if levels.len() <= points {
        levels
    } else {
        let mut picked: Vec<f64> = (0..points)
            .map(|i| levels[i * (levels.len() - 1) / (points - 1).max(1)])
            .collect();
        picked.dedup();
        picked
    };
    pr_sweep(&sweep, gt, radius_um, |thr| {
        Ok(LocalizationSet {
            locs: dets.locs.iter().filter(|l| l.intensity >= thr).copied().collect(),
            ..dets.clone()
        })
    })
}

/// Summary of one scored run.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mean_error_um: Option<f64>,
    pub std_error_um: Option<f64>,
    pub radius_um: f64,
    pub curve: PrCurve,
}

impl EvalReport {
    pub fn from_matching(m: &Matching) -> Self {
        let s = matching_scores(m);
        let err = localization_errors(m);
        EvalReport {
            tp: m.tp,
            fp: m.fp,
            fn_: m.fn_,
            precision: s.precision,
            recall: s.recall,
            f1: s.f1,
            mean_error_um: err.map(|e| e.0),
            std_error_um: err.map(|e| e.1),
            radius_um: m.radius_um,
            curve: PrCurve::default(),
        }
    }
}

impl fmt::Display for EvalReport {
    /// `key=value` lines; undefined errors print as `nan`.
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let opt = |v: Option<f64>| v.map_or("nan".to_string(), |v| format!("{v}"));
        writeln!(f, "tp={}", self.tp)?;
        writeln!(f, "fp={}", self.fp)?;
        writeln!(f, "fn={}", self.fn_)?;
        writeln!(f, "precision={}", self.precision)?;
        writeln!(f, "recall={}", self.recall)?;
        writeln!(f, "f1={}", self.f1)?;
        writeln!(f, "mean_error_um={}", opt(self.mean_error_um))?;
        writeln!(f, "std_error_um={}", opt(self.std_error_um))?;
        writeln!(f, "radius_um={}", self.radius_um)?;
        if let Some(b) = self.curve.best() {
            writeln!(f, "best_threshold={}", b.threshold)?;
            writeln!(f, "best_f1={}", b.f1)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_f1_spot_checks() {
        assert!((f1_from_pr(0.661, 0.412) - 0.508).abs() <= 1e-3);
        assert!((f1_from_pr(0.890, 0.566) - 0.692).abs() <= 1e-3);
    }

    #[test]
    fn count_formulas() {
        let s = precision_recall_f1(3, 1, 2);
        assert_eq!(s.precision, 0.75);
        assert_eq!(s.recall, 0.6);
        assert!((s.f1 - 2.0 / 3.0).abs() < 1e-15);
        assert!((s.f1 - f1_from_pr(s.precision, s.recall)).abs() < 1e-15);
        let z = precision_recall_f1(0, 0, 0);
        assert_eq!((z.precision, z.recall, z.f1), (0.0, 0.0, 0.0));
        assert!(z.no_detections && z.no_truth);
    }
}
