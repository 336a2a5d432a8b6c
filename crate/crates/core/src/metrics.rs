//! Pixel-level evaluation of the foreground class: overlap metrics at a
//! fixed threshold plus the area under the precision-recall curve.

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub tn: usize,
}

impl ConfusionCounts {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.fn_ + self.tn
    }

    pub fn merge(&mut self, other: &ConfusionCounts) {
        self.tp += other.tp;
        self.fp += other.fp;
        self.fn_ += other.fn_;
        self.tn += other.tn;
    }
}

/// Count agreement between two binary maps of identical length.
pub fn confusion(pred: &[bool], gt: &[bool]) -> Result<ConfusionCounts> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "confusion: {} prediction pixels vs {} ground-truth pixels",
            pred.len(),
            gt.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.iter().zip(gt) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Overlap metrics from counts. The empty-vs-empty foreground case (no true,
/// predicted, or missed foreground) scores 1 for all three by convention.
pub fn dice_iou_recall(c: &ConfusionCounts) -> (f64, f64, f64) {
    if c.tp + c.fp + c.fn_ == 0 {
        return (1.0, 1.0, 1.0);
    }
    let tp = c.tp as f64;
    let dice = 2.0 * tp / (2.0 * tp + c.fp as f64 + c.fn_ as f64);
    let iou = tp / (tp + c.fp as f64 + c.fn_ as f64);
    let recall = if c.tp + c.fn_ == 0 { 1.0 } else { tp / (tp + c.fn_ as f64) };
    (dice, iou, recall)
}

/// Area under the precision-recall curve.
///
/// Thresholds sweep every distinct score plus 0 and 1; a pixel is predicted
/// positive when score >= threshold. Thresholds that predict nothing
/// contribute no point. Points are ordered by recall, the curve is extended
/// to recall 0 at the first point's precision, and integrated by trapezoid.
/// An empty ground truth returns 1 by convention.
pub fn auc_pr(scores: &[f64], gt: &[bool]) -> Result<f64> {
    if scores.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!(
            "auc_pr: {} scores vs {} ground-truth pixels",
            scores.len(),
            gt.len()
        )));
    }
    let positives = gt.iter().filter(|&&g| g).count();
    if positives == 0 {
        return Ok(1.0);
    }

    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.push(0.0);
    thresholds.push(1.0);
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();

    // Descending threshold order makes recall non-decreasing along the curve.
    let mut points: Vec<(f64, f64)> = Vec::with_capacity(thresholds.len());
    for &t in thresholds.iter().rev() {
        let mut tp = 0usize;
        let mut fp = 0usize;
        for (&s, &g) in scores.iter().zip(gt) {
            if s >= t {
                if g {
                    tp += 1;
                } else {
                    fp += 1;
                }
            }
        }
        if tp + fp == 0 {
            continue;
        }
        let precision = tp as f64 / (tp + fp) as f64;
        let recall = tp as f64 / positives as f64;
        points.push((recall, precision));
    }

    if points.is_empty() {
        return Ok(0.0);
    }
    let mut area = 0.0;
    let mut prev = (0.0, points[0].1);
    for &(r, p) in &points {
        area += (r - prev.0) * 0.5 * (p + prev.1);
        prev = (r, p);
    }
    Ok(area.clamp(0.0, 1.0))
}

/// Metrics of one image at a fixed threshold plus its PR area.
#[derive(Debug, Clone, Copy)]
pub struct ImageMetrics {
    pub dice: f64,
    pub iou: f64,
    pub recall: f64,
    pub auc_pr: f64,
}

/// Aggregate over an evaluation split: per-image means and pooled-pixel
/// versions of every metric.
#[derive(Debug, Clone, Default)]
pub struct MetricsReport {
    pub per_image: Vec<ImageMetrics>,
    pub mean_dice: f64,
    pub mean_iou: f64,
    pub mean_recall: f64,
    pub mean_auc_pr: f64,
    pub pooled_dice: f64,
    pub pooled_iou: f64,
    pub pooled_recall: f64,
    pub pooled_auc_pr: f64,
}

/// Score one image's foreground probability map against its mask.
pub fn image_metrics(scores: &[f64], gt: &[bool], threshold: f64) -> Result<ImageMetrics> {
    let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
    let c = confusion(&pred, gt)?;
    let (dice, iou, recall) = dice_iou_recall(&c);
    let auc = auc_pr(scores, gt)?;
    Ok(ImageMetrics { dice, iou, recall, auc_pr: auc })
}

/// Build the full report from per-image score/mask pairs.
pub fn aggregate(images: &[(Vec<f64>, Vec<bool>)], threshold: f64) -> Result<MetricsReport> {
    if images.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate an empty split".into()));
    }
    let mut report = MetricsReport::default();
    let mut pooled = ConfusionCounts::default();
    let mut all_scores = Vec::new();
    let mut all_gt = Vec::new();
    for (scores, gt) in images {
        let m = image_metrics(scores, gt, threshold)?;
        report.mean_dice += m.dice;
        report.mean_iou += m.iou;
        report.mean_recall += m.recall;
        report.mean_auc_pr += m.auc_pr;
        report.per_image.push(m);
        let pred: Vec<bool> = scores.iter().map(|&s| s >= threshold).collect();
        pooled.merge(&confusion(&pred, gt)?);
        all_scores.extend_from_slice(scores);
        all_gt.extend_from_slice(gt);
    }
    let n = images.len() as f64;
    report.mean_dice /= n;
    report.mean_iou /= n;
    report.mean_recall /= n;
    report.mean_auc_pr /= n;
    let (d, i, r) = dice_iou_recall(&pooled);
    report.pooled_dice = d;
    report.pooled_iou = i;
    report.pooled_recall = r;
    report.pooled_auc_pr = auc_pr(&all_scores, &all_gt)?;
    Ok(report)
}

impl MetricsReport {
    /// Machine-readable lines: one per image, then one aggregate line.
    pub fn render_lines(&self) -> Vec<String> {
        let mut lines: Vec<String> = self
            .per_image
            .iter()
            .enumerate()
            .map(|(i, m)| {
                format!(
                    "image={} dice={:.6} iou={:.6} recall={:.6} auc_pr={:.6}",
                    i, m.dice, m.iou, m.recall, m.auc_pr
                )
            })
            .collect();
        lines.push(format!(
            "aggregate mean_dice={:.6} mean_iou={:.6} mean_recall={:.6} mean_auc_pr={:.6} \
             pooled_dice={:.6} pooled_iou={:.6} pooled_recall={:.6} pooled_auc_pr={:.6}",
            self.mean_dice,
            self.mean_iou,
            self.mean_recall,
            self.mean_auc_pr,
            self.pooled_dice,
            self.pooled_iou,
            self.pooled_recall,
            self.pooled_auc_pr
        ));
        lines
    }
}
