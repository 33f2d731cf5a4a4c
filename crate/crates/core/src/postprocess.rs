//! Inference decoding: class-threshold filtering, per-class NMS, risk scores.

use std::fmt::Write;

use crate::compute::{Real, Tensor};
use crate::data::ClassTable;
use crate::detector::decode_boxes;
use crate::error::{Error, Result};
use crate::geometry::{iou, CornerBox};

pub const DEFAULT_NMS_IOU: f64 = 0.5;

#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub image: String,
    pub class_id: usize,
    pub bbox: CornerBox,
    pub confidence: f64,
    pub severity: f64,
    pub risk_score: f64,
    /// Grid cell the detection came from; tie-break key.
    pub cell: usize,
}

/// Descending confidence, then ascending cell.
pub fn rank_order(a: &Detection, b: &Detection) -> std::cmp::Ordering {
    b.confidence
        .total_cmp(&a.confidence)
        .then(a.cell.cmp(&b.cell))
}

/// Per cell, the most probable foreground class under the softmax over all
/// `C + 1` logits; kept when its probability reaches the class threshold.
pub fn extract_candidates<T: Real>(
    preds: &Tensor<T>,
    grid: usize,
    table: &ClassTable,
    image: &str,
) -> Vec<Detection> {
    let c = table.len();
    let k = preds.shape()[1];
    assert_eq!(k, 4 + c + 1, "prediction width does not match the class table");
    let thresholds = table.thresholds();
    let boxes = decode_boxes(preds, grid);
    let mut out = Vec::new();
    for (cell, row) in preds.data().chunks(k).enumerate() {
        let logits: Vec<f64> = row[4..].iter().map(|v| v.as_f64()).collect();
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = logits.iter().map(|&l| (l - max).exp()).sum();
        let mut best = 0;
        for j in 1..c {
            if logits[j] > logits[best] {
                best = j;
            }
        }
        let p = (logits[best] - max).exp() / z;
        if p >= thresholds[best] {
            out.push(Detection {
                image: image.to_string(),
                class_id: best,
                bbox: boxes[cell],
                confidence: p,
                severity: 0.0,
                risk_score: 0.0,
                cell,
            });
        }
    }
    out
}

/// Greedy per-class suppression of boxes with IoU ≥ `iou_threshold` to a
/// kept box. Output is in rank order.
pub fn nms_per_class(dets: &[Detection], iou_threshold: f64) -> Vec<Detection> {
    let mut order: Vec<&Detection> = dets.iter().collect();
    order.sort_by(|a, b| rank_order(a, b));
    let mut kept: Vec<&Detection> = Vec::new();
    for d in order {
        let suppressed = kept
            .iter()
            .any(|k| k.class_id == d.class_id && iou(k.bbox, d.bbox) >= iou_threshold);
        if !suppressed {
            kept.push(d);
        }
    }
    kept.into_iter().cloned().collect()
}

/// Sets `severity` from the class table and `risk_score = severity · confidence`.
pub fn score_risk(dets: &mut [Detection], table: &ClassTable) -> Result<()> {
    for d in dets {
        let spec = table
            .get(d.class_id)
            .ok_or_else(|| Error::Invalid(format!("unknown class id {}", d.class_id)))?;
        d.severity = spec.severity;
        d.risk_score = spec.severity * d.confidence;
    }
    Ok(())
}

/// Candidates → NMS → risk scores for one image.
/// Detections whose confidence reaches their class threshold.
pub fn above_class_thresholds(dets: &[Detection], table: &ClassTable) -> Vec<Detection> {
    let t = table.thresholds();
    dets.iter()
        .filter(|d| t.get(d.class_id).is_some_and(|&th| d.confidence >= th))
        .cloned()
        .collect()
}

pub fn postprocess<T: Real>(
    preds: &Tensor<T>,
    grid: usize,
    table: &ClassTable,
    image: &str,
    iou_threshold: f64,
) -> Result<Vec<Detection>> {
    let cands = extract_candidates(preds, grid, table, image);
    let mut dets = nms_per_class(&cands, iou_threshold);
    score_risk(&mut dets, table)?;
    Ok(dets)
}

fn json_string(s: &str) -> String {
    serde_json::to_string(s).expect("string serializes")
}

/// One JSON Lines record with six-decimal floats.
pub fn detection_json(d: &Detection, table: &ClassTable) -> String {
    let name = table.get(d.class_id).map(|c| c.name.as_str()).unwrap_or("");
    let b = d.bbox;
    let mut s = String::new();
    write!(
        s,
        "{{\"image\":{},\"class_id\":{},\"class_name\":{},\"box\":[{:.6},{:.6},{:.6},{:.6}],\"confidence\":{:.6},\"severity\":{:.6},\"risk_score\":{:.6}}}",
        json_string(&d.image),
        d.class_id,
        json_string(name),
        b.x1,
        b.y1,
        b.x2,
        b.y2,
        d.confidence,
        d.severity,
        d.risk_score
    )
    .expect("write to string");
    s
}

pub fn detections_jsonl(dets: &[Detection], table: &ClassTable) -> String {
    let mut out = String::new();
    for d in dets {
        out.push_str(&detection_json(d, table));
        out.push('\n');
    }
    out
}
