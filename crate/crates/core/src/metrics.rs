//! Detection evaluation: matching, precision/recall, AP, mAP, confusion matrix.

use serde::{Deserialize, Serialize};

use crate::data::{ClassTable, GroundTruthBox};
use crate::error::{Error, Result};
use crate::geometry::iou;
use crate::postprocess::{rank_order, Detection};

/// IoU thresholds 0.50, 0.55, …, 0.95.
pub fn iou_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Confusion-matrix confidence floor.
    pub conf_floor: f64,
    /// Confusion-matrix IoU floor.
    pub iou_floor: f64,
    pub nms_iou: f64,
    /// Candidates down to this confidence enter the AP ranking; precision,
    /// recall and the confusion matrix use the class thresholds.
    pub ap_conf_floor: f64,
    /// Per-image cap on ranked detections after NMS.
    pub max_det: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            conf_floor: 0.25,
            iou_floor: 0.45,
            nms_iou: 0.5,
            ap_conf_floor: 0.001,
            max_det: 300,
        }
    }
}

/// Detections and ground truths of one image.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalImage {
    pub dets: Vec<Detection>,
    pub gts: Vec<GroundTruthBox>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// Per detection, in the order given.
    pub is_tp: Vec<bool>,
    pub gt_matched: Vec<bool>,
    pub tp: Vec<usize>,
    pub fp: Vec<usize>,
    pub fn_: Vec<usize>,
}

/// Greedy matching for one image; `dets` must be in descending confidence.
/// Each detection claims the highest-IoU unmatched ground truth of its class
/// (lowest index on ties) when the IoU reaches `iou_threshold`.
pub fn match_detections(
    dets: &[Detection],
    gts: &[GroundTruthBox],
    iou_threshold: f64,
    num_classes: usize,
) -> MatchResult {
    let mut r = MatchResult {
        is_tp: vec![false; dets.len()],
        gt_matched: vec![false; gts.len()],
        tp: vec![0; num_classes],
        fp: vec![0; num_classes],
        fn_: vec![0; num_classes],
    };
    let gt_boxes: Vec<_> = gts.iter().map(|g| g.corners()).collect();
    for (di, d) in dets.iter().enumerate() {
        let mut best: Option<(usize, f64)> = None;
        for (gi, g) in gts.iter().enumerate() {
            if r.gt_matched[gi] || g.class_id != d.class_id {
                continue;
            }
            let v = iou(d.bbox, gt_boxes[gi]);
            if v >= iou_threshold && best.is_none_or(|(_, b)| v > b) {
                best = Some((gi, v));
            }
        }
        match best {
            Some((gi, _)) => {
                r.gt_matched[gi] = true;
                r.is_tp[di] = true;
                r.tp[d.class_id] += 1;
            }
            None => r.fp[d.class_id] += 1,
        }
    }
    for (gi, g) in gts.iter().enumerate() {
        if !r.gt_matched[gi] {
            r.fn_[g.class_id] += 1;
        }
    }
    r
}

/// All-point interpolated AP of ranked TP flags against `instances` ground truths.
pub fn average_precision(ranked_tp: &[bool], instances: usize) -> f64 {
    if instances == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(ranked_tp.len());
    let mut recall = Vec::with_capacity(ranked_tp.len());
    let mut tp = 0usize;
    for (i, &hit) in ranked_tp.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / instances as f64);
    }
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

fn sorted(dets: &[Detection]) -> Vec<Detection> {
    let mut d = dets.to_vec();
    d.sort_by(rank_order);
    d
}

/// Ranked TP flags per class, pooled over images at one IoU threshold.
/// Equal confidences keep image order, then per-image rank order.
fn pooled_flags(images: &[EvalImage], iou_threshold: f64, num_classes: usize) -> Vec<Vec<bool>> {
    let mut pool: Vec<Vec<(f64, bool)>> = vec![Vec::new(); num_classes];
    for img in images {
        let dets = sorted(&img.dets);
        let m = match_detections(&dets, &img.gts, iou_threshold, num_classes);
        for (d, &hit) in dets.iter().zip(&m.is_tp) {
            pool[d.class_id].push((d.confidence, hit));
        }
    }
    pool.into_iter()
        .map(|mut v| {
            v.sort_by(|a, b| b.0.total_cmp(&a.0));
            v.into_iter().map(|(_, hit)| hit).collect()
        })
        .collect()
}

pub fn instance_counts(images: &[EvalImage], num_classes: usize) -> Vec<usize> {
    let mut n = vec![0; num_classes];
    for g in images.iter().flat_map(|i| &i.gts) {
        n[g.class_id] += 1;
    }
    n
}

#[derive(Clone, Debug, PartialEq)]
pub struct MapResult {
    pub map50: f64,
    pub map50_95: f64,
    /// Per class; `None` for classes without instances.
    pub ap50: Vec<Option<f64>>,
    pub ap50_95: Vec<Option<f64>>,
}

fn mean(xs: impl Iterator<Item = f64>) -> Option<f64> {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    (n > 0).then(|| s / n as f64)
}

pub fn map_over_thresholds(images: &[EvalImage], num_classes: usize) -> Result<MapResult> {
    let instances = instance_counts(images, num_classes);
    if instances.iter().all(|&n| n == 0) {
        return Err(Error::Invalid("no class has ground-truth instances".into()));
    }
    let mut per_thr: Vec<Vec<f64>> = Vec::new();
    for thr in iou_thresholds() {
        let flags = pooled_flags(images, thr, num_classes);
        per_thr.push(
            (0..num_classes)
                .map(|c| average_precision(&flags[c], instances[c]))
                .collect(),
        );
    }
    let present = |c: usize| instances[c] > 0;
    let ap50: Vec<Option<f64>> = (0..num_classes)
        .map(|c| present(c).then(|| per_thr[0][c]))
        .collect();
    let ap50_95: Vec<Option<f64>> = (0..num_classes)
        .map(|c| present(c).then(|| per_thr.iter().map(|t| t[c]).sum::<f64>() / per_thr.len() as f64))
        .collect();
    Ok(MapResult {
        map50: mean(ap50.iter().flatten().copied()).expect("some class present"),
        map50_95: mean(ap50_95.iter().flatten().copied()).expect("some class present"),
        ap50,
        ap50_95,
    })
}

/// `(C+1)×(C+1)` counts; rows predicted, columns actual, index `C` background.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub size: usize,
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn background(&self) -> usize {
        self.size - 1
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// Cross-class mismatches among foreground classes only.
    pub fn foreground_offdiag(&self) -> u64 {
        let bg = self.background();
        (0..bg)
            .flat_map(|i| (0..bg).map(move |j| (i, j)))
            .filter(|(i, j)| i != j)
            .map(|(i, j)| self.counts[i][j])
            .sum()
    }
}

/// Class-agnostic greedy matching at `iou_floor` over detections with
/// confidence ≥ `conf_floor`.
pub fn confusion_matrix(
    images: &[EvalImage],
    num_classes: usize,
    conf_floor: f64,
    iou_floor: f64,
) -> ConfusionMatrix {
    let n = num_classes + 1;
    let bg = num_classes;
    let mut counts = vec![vec![0u64; n]; n];
    for img in images {
        let dets: Vec<Detection> = sorted(&img.dets)
            .into_iter()
            .filter(|d| d.confidence >= conf_floor)
            .collect();
        let gt_boxes: Vec<_> = img.gts.iter().map(|g| g.corners()).collect();
        let mut matched = vec![false; img.gts.len()];
        for d in &dets {
            let mut best: Option<(usize, f64)> = None;
            for (gi, gb) in gt_boxes.iter().enumerate() {
                if matched[gi] {
                    continue;
                }
                let v = iou(d.bbox, *gb);
                if v >= iou_floor && best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, _)) => {
                    matched[gi] = true;
                    counts[d.class_id][img.gts[gi].class_id] += 1;
                }
                None => counts[d.class_id][bg] += 1,
            }
        }
        for (gi, g) in img.gts.iter().enumerate() {
            if !matched[gi] {
                counts[bg][g.class_id] += 1;
            }
        }
    }
    ConfusionMatrix { size: n, counts }
}

/// `Σ_{i≠j} C_ij` over all indices, background included.
pub fn offdiag_sum(counts: &[Vec<u64>]) -> Result<u64> {
    let n = counts.len();
    if counts.iter().any(|r| r.len() != n) {
        return Err(Error::Invalid("confusion matrix must be square".into()));
    }
    Ok((0..n)
        .flat_map(|i| (0..n).map(move |j| (i, j)))
        .filter(|(i, j)| i != j)
        .map(|(i, j)| counts[i][j])
        .sum())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class_id: usize,
    pub name: String,
    pub instances: usize,
    pub precision: f64,
    pub recall: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

/// Means over classes with at least one instance.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanMetrics {
    pub precision: f64,
    pub recall: f64,
    pub map50: f64,
    pub map50_95: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    /// Absent when the ground-truth set is empty.
    pub means: Option<MeanMetrics>,
    pub confusion: ConfusionMatrix,
    pub offdiag: u64,
    pub foreground_offdiag: u64,
}

/// P and R at IoU 0.5 over detections above each class threshold, AP50,
/// AP50-95, class means and the confusion matrix.
pub fn build_report(images: &[EvalImage], table: &ClassTable, cfg: &EvalConfig) -> EvalReport {
    let c = table.len();
    let thresholds = table.thresholds();
    let keep = |floor: &dyn Fn(usize) -> f64| -> Vec<EvalImage> {
        images
            .iter()
            .map(|img| EvalImage {
                dets: img
                    .dets
                    .iter()
                    .filter(|d| d.confidence >= floor(d.class_id))
                    .cloned()
                    .collect(),
                gts: img.gts.clone(),
            })
            .collect()
    };
    let filtered = keep(&|k| thresholds[k]);
    let ranked = keep(&|_| cfg.ap_conf_floor);
    let instances = instance_counts(&filtered, c);
    let mut tp = vec![0usize; c];
    let mut fp = vec![0usize; c];
    for img in &filtered {
        let m = match_detections(&sorted(&img.dets), &img.gts, 0.5, c);
        for k in 0..c {
            tp[k] += m.tp[k];
            fp[k] += m.fp[k];
        }
    }
    let maps = map_over_thresholds(&ranked, c).ok();
    let classes: Vec<ClassMetrics> = table
        .iter()
        .map(|spec| {
            let k = spec.id;
            let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
            ClassMetrics {
                class_id: k,
                name: spec.name.clone(),
                instances: instances[k],
                precision: ratio(tp[k], tp[k] + fp[k]),
                recall: ratio(tp[k], instances[k]),
                ap50: maps.as_ref().and_then(|m| m.ap50[k]).unwrap_or(0.0),
                ap50_95: maps.as_ref().and_then(|m| m.ap50_95[k]).unwrap_or(0.0),
            }
        })
        .collect();
    let means = maps.as_ref().map(|m| {
        let present = || classes.iter().filter(|x| x.instances > 0);
        MeanMetrics {
            precision: mean(present().map(|x| x.precision)).unwrap_or(0.0),
            recall: mean(present().map(|x| x.recall)).unwrap_or(0.0),
            map50: m.map50,
            map50_95: m.map50_95,
        }
    });
    let confusion = confusion_matrix(&filtered, c, cfg.conf_floor, cfg.iou_floor);
    let offdiag = offdiag_sum(&confusion.counts).expect("square by construction");
    let foreground_offdiag = confusion.foreground_offdiag();
    EvalReport {
        classes,
        means,
        confusion,
        offdiag,
        foreground_offdiag,
    }
}

impl MeanMetrics {
    pub fn summary_line(&self) -> String {
        format!(
            "mean  P {:.2}  R {:.2}  mAP50 {:.2}  mAP50-95 {:.2}",
            self.precision, self.recall, self.map50, self.map50_95
        )
    }
}
