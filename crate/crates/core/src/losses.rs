//! Training objectives: box regression, classification, risk-weighted
//! classification, mask consistency and their weighted sum.

use serde::{Deserialize, Serialize};

use crate::compute::{Graph, Real, Tensor, TensorError, Var};
use crate::detector::{decode_cells, AssignmentTargets, BoxVars, Forward};
use crate::error::{Error, Result};
use crate::geometry::CornerBox;

pub const BOX_EPS: f64 = 1e-9;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub lambda_box: f64,
    pub lambda_cls: f64,
    pub lambda_mask: f64,
    pub lambda_risk: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_box: 1.0,
            lambda_cls: 0.5,
            lambda_mask: 0.1,
            lambda_risk: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.lambda_box, self.lambda_cls, self.lambda_mask, self.lambda_risk];
        if all.iter().all(|v| v.is_finite() && *v >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config("loss weights must be finite and >= 0".into()))
        }
    }

    fn as_array(&self) -> [f64; 4] {
        [self.lambda_box, self.lambda_cls, self.lambda_mask, self.lambda_risk]
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BoxVariant {
    #[default]
    Giou,
    Ciou,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub box_variant: BoxVariant,
    pub focal: bool,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            box_variant: BoxVariant::Giou,
            focal: false,
            focal_gamma: 2.0,
        }
    }
}

/// Scalar loss values of one evaluation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub box_loss: f64,
    pub cls: f64,
    pub mask: f64,
    pub risk: f64,
    pub positives: usize,
}

/// The four loss terms, in weight order (box, cls, mask, risk).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossParts {
    pub box_loss: f64,
    pub cls: f64,
    pub mask: f64,
    pub risk: f64,
}

const TERM_NAMES: [&str; 4] = ["box", "cls", "mask", "risk"];

/// Weighted sum of the parts; a non-finite part is an error naming it.
pub fn total_loss(parts: LossParts, weights: &LossWeights, positives: usize) -> Result<LossBreakdown> {
    let values = [parts.box_loss, parts.cls, parts.mask, parts.risk];
    if let Some(i) = values.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{} loss", TERM_NAMES[i])));
    }
    let total = values
        .iter()
        .zip(weights.as_array())
        .map(|(v, w)| v * w)
        .sum();
    Ok(LossBreakdown {
        total,
        box_loss: parts.box_loss,
        cls: parts.cls,
        mask: parts.mask,
        risk: parts.risk,
        positives,
    })
}

fn area(b: &CornerBox) -> f64 {
    (b.x2 - b.x1) * (b.y2 - b.y1)
}

/// Generalized IoU of two corner boxes.
pub fn giou(a: CornerBox, b: CornerBox) -> f64 {
    let inter = a.intersection(b);
    let union = area(&a) + area(&b) - inter;
    let iou = inter / union.max(BOX_EPS);
    let hull = (a.x2.max(b.x2) - a.x1.min(b.x1)) * (a.y2.max(b.y2) - a.y1.min(b.y1));
    iou - (hull - union) / hull.max(BOX_EPS)
}

/// Complete IoU: IoU minus the normalized centre distance and the aspect term.
pub fn ciou(a: CornerBox, b: CornerBox) -> f64 {
    let inter = a.intersection(b);
    let union = area(&a) + area(&b) - inter;
    let iou = inter / union.max(BOX_EPS);
    let cw = a.x2.max(b.x2) - a.x1.min(b.x1);
    let ch = a.y2.max(b.y2) - a.y1.min(b.y1);
    let diag = cw * cw + ch * ch + BOX_EPS;
    let (ac, bc) = (a.to_center(), b.to_center());
    let rho = (ac.cx - bc.cx).powi(2) + (ac.cy - bc.cy).powi(2);
    let pi2 = std::f64::consts::PI.powi(2);
    let v = 4.0 / pi2
        * ((bc.w / (bc.h + BOX_EPS)).atan() - (ac.w / (ac.h + BOX_EPS)).atan()).powi(2);
    let alpha = v / (1.0 - iou + v + BOX_EPS);
    iou - rho / diag - alpha * v
}

/// Elementwise GIoU of predicted and target columns, `[P]`.
pub fn giou_graph<T: Real>(g: &mut Graph<T>, p: &BoxVars, t: &BoxVars) -> Result<Var, TensorError> {
    let (iou, union, hull) = overlap_terms(g, p, t)?;
    let gap = g.sub(hull, union)?;
    let hull_eps = g.clamp(hull, T::lit(BOX_EPS), T::lit(f64::INFINITY));
    let frac = g.div(gap, hull_eps)?;
    g.sub(iou, frac)
}

/// `(IoU, union, hull area)` columns.
fn overlap_terms<T: Real>(
    g: &mut Graph<T>,
    p: &BoxVars,
    t: &BoxVars,
) -> Result<(Var, Var, Var), TensorError> {
    let ix1 = g.maximum(p.x1, t.x1)?;
    let iy1 = g.maximum(p.y1, t.y1)?;
    let ix2 = g.minimum(p.x2, t.x2)?;
    let iy2 = g.minimum(p.y2, t.y2)?;
    let iw = g.sub(ix2, ix1)?;
    let iw = g.relu(iw);
    let ih = g.sub(iy2, iy1)?;
    let ih = g.relu(ih);
    let inter = g.mul(iw, ih)?;
    let area_p = box_area(g, p)?;
    let area_t = box_area(g, t)?;
    let sum = g.add(area_p, area_t)?;
    let union = g.sub(sum, inter)?;
    let union_eps = g.clamp(union, T::lit(BOX_EPS), T::lit(f64::INFINITY));
    let iou = g.div(inter, union_eps)?;
    let (cw, ch) = hull_extent(g, p, t)?;
    let hull = g.mul(cw, ch)?;
    Ok((iou, union, hull))
}

fn box_area<T: Real>(g: &mut Graph<T>, b: &BoxVars) -> Result<Var, TensorError> {
    let w = g.sub(b.x2, b.x1)?;
    let h = g.sub(b.y2, b.y1)?;
    g.mul(w, h)
}

fn hull_extent<T: Real>(g: &mut Graph<T>, p: &BoxVars, t: &BoxVars) -> Result<(Var, Var), TensorError> {
    let hx1 = g.minimum(p.x1, t.x1)?;
    let hy1 = g.minimum(p.y1, t.y1)?;
    let hx2 = g.maximum(p.x2, t.x2)?;
    let hy2 = g.maximum(p.y2, t.y2)?;
    Ok((g.sub(hx2, hx1)?, g.sub(hy2, hy1)?))
}

/// Elementwise CIoU, fully differentiated (the trade-off weight included).
pub fn ciou_graph<T: Real>(g: &mut Graph<T>, p: &BoxVars, t: &BoxVars) -> Result<Var, TensorError> {
    let eps = T::lit(BOX_EPS);
    let (iou, _, _) = overlap_terms(g, p, t)?;
    let (cw, ch) = hull_extent(g, p, t)?;
    let cw2 = g.square(cw);
    let ch2 = g.square(ch);
    let diag = g.add(cw2, ch2)?;
    let diag = g.add_scalar(diag, eps);
    let centre_gap = |g: &mut Graph<T>, a1, a2, b1, b2| -> Result<Var, TensorError> {
        let sa = g.add(a1, a2)?;
        let sb = g.add(b1, b2)?;
        let d = g.sub(sa, sb)?;
        let d = g.scale(d, T::lit(0.5));
        Ok(g.square(d))
    };
    let dx = centre_gap(g, p.x1, p.x2, t.x1, t.x2)?;
    let dy = centre_gap(g, p.y1, p.y2, t.y1, t.y2)?;
    let rho = g.add(dx, dy)?;
    let dist = g.div(rho, diag)?;
    let aspect = |g: &mut Graph<T>, b: &BoxVars| -> Result<Var, TensorError> {
        let w = g.sub(b.x2, b.x1)?;
        let h = g.sub(b.y2, b.y1)?;
        let h = g.add_scalar(h, eps);
        let r = g.div(w, h)?;
        Ok(g.atan(r))
    };
    let at = aspect(g, t)?;
    let ap = aspect(g, p)?;
    let da = g.sub(at, ap)?;
    let v = g.square(da);
    let v = g.scale(v, T::lit(4.0 / std::f64::consts::PI.powi(2)));
    let one_minus = g.neg(iou);
    let one_minus = g.add_scalar(one_minus, T::one());
    let denom = g.add(one_minus, v)?;
    let denom = g.add_scalar(denom, eps);
    let alpha = g.div(v, denom)?;
    let av = g.mul(alpha, v)?;
    let out = g.sub(iou, dist)?;
    g.sub(out, av)
}

/// `Σ_pos (1 − IoU-variant) / denom`; `None` without positives.
pub fn box_loss<T: Real>(
    g: &mut Graph<T>,
    preds: Var,
    targets: &AssignmentTargets,
    variant: BoxVariant,
    denom: f64,
) -> Result<Option<Var>, TensorError> {
    let cells = targets.positive_cells();
    if cells.is_empty() {
        return Ok(None);
    }
    let pred = decode_cells(g, preds, &cells, targets.grid)?;
    let tboxes: Vec<CornerBox> = cells.iter().map(|&c| targets.boxes[c]).collect();
    let tgt = BoxVars::constant(g, &tboxes);
    let score = match variant {
        BoxVariant::Giou => giou_graph(g, &pred, &tgt)?,
        BoxVariant::Ciou => ciou_graph(g, &pred, &tgt)?,
    };
    let s = g.sum(score);
    let neg = g.neg(s);
    let total = g.add_scalar(neg, T::lit(cells.len() as f64));
    Ok(Some(g.scale(total, T::lit(1.0 / denom))))
}

/// Background-inclusive cross-entropy summed over all cells, divided by `denom`.
pub fn cls_loss<T: Real>(
    g: &mut Graph<T>,
    preds: Var,
    targets: &AssignmentTargets,
    focal_gamma: Option<f64>,
    denom: f64,
) -> Result<Var, TensorError> {
    let c1 = targets.num_classes + 1;
    let logits = g.slice_last(preds, 4, c1)?;
    let gamma = T::lit(focal_gamma.unwrap_or(0.0));
    let ce = g.cross_entropy_rows(logits, &targets.classes, gamma)?;
    let s = g.sum(ce);
    Ok(g.scale(s, T::lit(1.0 / denom)))
}

/// Severity-weighted cross-entropy over foreground classes.
///
/// `fg_logits` holds one `[C]` row per positive; the softmax over it is the
/// foreground-renormalized class distribution. Returns `None` when there are
/// no rows or every severity is zero.
pub fn risk_term<T: Real>(
    g: &mut Graph<T>,
    fg_logits: Var,
    classes: &[usize],
    severities: &[f64],
    denom: f64,
) -> Result<Option<Var>, TensorError> {
    if classes.is_empty() || severities.iter().all(|&w| w == 0.0) || denom <= 0.0 {
        return Ok(None);
    }
    let ce = g.cross_entropy_rows(fg_logits, classes, T::zero())?;
    let w = g.constant(Tensor::new(
        [severities.len()],
        severities.iter().map(|&v| T::lit(v)).collect(),
    )?);
    let weighted = g.mul(ce, w)?;
    let s = g.sum(weighted);
    Ok(Some(g.scale(s, T::lit(1.0 / denom))))
}

/// Risk loss of one image's positives; `denom` is the severity mass.
pub fn risk_loss<T: Real>(
    g: &mut Graph<T>,
    preds: Var,
    targets: &AssignmentTargets,
    denom: f64,
) -> Result<Option<Var>, TensorError> {
    let cells = targets.positive_cells();
    if cells.is_empty() {
        return Ok(None);
    }
    let rows = g.gather_rows(preds, &cells)?;
    let fg = g.slice_last(rows, 4, targets.num_classes)?;
    let classes: Vec<usize> = cells.iter().map(|&c| targets.classes[c]).collect();
    let sev: Vec<f64> = cells.iter().map(|&c| targets.severity[c]).collect();
    risk_term(g, fg, &classes, &sev, denom)
}

/// `mean_l (1 / H_l W_l) Σ_hw ‖F̃_hw − F_hw‖²`, divided by `denom`.
/// `None` when the masked maps are the unmasked ones.
pub fn mask_loss<T: Real>(
    g: &mut Graph<T>,
    masked: &[Var],
    feats: &[Var],
    denom: f64,
) -> Result<Option<Var>, TensorError> {
    if masked.len() != feats.len() {
        return Err(TensorError::Invalid(format!(
            "mask loss pairs {} masked maps with {} feature maps",
            masked.len(),
            feats.len()
        )));
    }
    if masked.iter().zip(feats).all(|(a, b)| a == b) {
        return Ok(None);
    }
    let mut acc: Option<Var> = None;
    for (&mt, &f) in masked.iter().zip(feats) {
        if g.shape(mt) != g.shape(f) {
            return Err(TensorError::ShapeMismatch {
                op: "mask_loss",
                lhs: g.shape(mt).to_vec(),
                rhs: g.shape(f).to_vec(),
            });
        }
        let hw = g.shape(f)[0] * g.shape(f)[1];
        let d = g.sub(mt, f)?;
        let d2 = g.square(d);
        let s = g.sum(d2);
        let term = g.scale(s, T::lit(1.0 / hw as f64));
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    let acc = acc.expect("non-empty scales");
    Ok(Some(g.scale(acc, T::lit(1.0 / (masked.len() as f64 * denom)))))
}

/// Denominators shared by every image of a batch so that per-image losses
/// sum to the batch-level means.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalizer {
    pub positives: f64,
    pub cells: f64,
    pub severity: f64,
    pub images: f64,
}

impl Normalizer {
    pub fn for_batch(targets: &[&AssignmentTargets]) -> Self {
        let positives: usize = targets.iter().map(|t| t.positives()).sum();
        let cells: usize = targets.iter().map(|t| t.classes.len()).sum();
        let severity: f64 = targets
            .iter()
            .flat_map(|t| t.positive_cells().into_iter().map(|c| t.severity[c]))
            .sum();
        Self {
            positives: positives.max(1) as f64,
            cells: cells.max(1) as f64,
            severity,
            images: targets.len().max(1) as f64,
        }
    }
}

/// Loss terms of one image recorded on its tape.
#[derive(Clone, Copy, Debug)]
pub struct ImageLoss {
    pub total: Var,
    /// box, cls, mask, risk; `None` for an exactly-zero term.
    pub parts: [Option<Var>; 4],
}

impl ImageLoss {
    pub fn part_values<T: Real>(&self, g: &Graph<T>) -> LossParts {
        let v = |p: Option<Var>| p.map(|x| g.scalar_value(x).as_f64()).unwrap_or(0.0);
        LossParts {
            box_loss: v(self.parts[0]),
            cls: v(self.parts[1]),
            mask: v(self.parts[2]),
            risk: v(self.parts[3]),
        }
    }
}

/// Records every loss term and the weighted total for one image.
pub fn image_loss<T: Real>(
    g: &mut Graph<T>,
    fwd: &Forward,
    targets: &AssignmentTargets,
    cfg: &LossConfig,
    norm: &Normalizer,
) -> Result<ImageLoss, TensorError> {
    let b = box_loss(g, fwd.preds, targets, cfg.box_variant, norm.positives)?;
    let gamma = cfg.focal.then_some(cfg.focal_gamma);
    let c = Some(cls_loss(g, fwd.preds, targets, gamma, norm.cells)?);
    let m = mask_loss(g, &fwd.masked, &fwd.feats, norm.images)?;
    let r = risk_loss(g, fwd.preds, targets, norm.severity)?;
    let parts = [b, c, m, r];
    let total = weighted_total(g, &parts, &cfg.weights)?;
    Ok(ImageLoss { total, parts })
}

/// `Σ λ_k · part_k` over the present parts (zero scalar when none).
pub fn weighted_total<T: Real>(
    g: &mut Graph<T>,
    parts: &[Option<Var>; 4],
    weights: &LossWeights,
) -> Result<Var, TensorError> {
    let mut acc: Option<Var> = None;
    for (p, w) in parts.iter().zip(weights.as_array()) {
        let Some(p) = *p else { continue };
        if w == 0.0 {
            continue;
        }
        let term = g.scale(p, T::lit(w));
        acc = Some(match acc {
            None => term,
            Some(a) => g.add(a, term)?,
        });
    }
    Ok(acc.unwrap_or_else(|| g.constant(Tensor::scalar(T::zero()))))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn giou_fixtures() {
        let a = CornerBox::new(0.0, 0.0, 1.0, 1.0);
        assert_eq!(giou(a, a), 1.0);
        let far = CornerBox::new(2.0, 2.0, 3.0, 3.0);
        assert!((giou(a, far) + 7.0 / 9.0).abs() < 1e-9);
        let touch = CornerBox::new(1.0, 0.0, 2.0, 1.0);
        assert!(giou(a, touch).abs() < 1e-9);
    }

    #[test]
    fn ciou_identical_is_one() {
        let a = CornerBox::new(0.1, 0.2, 0.5, 0.9);
        assert!((ciou(a, a) - 1.0).abs() < 1e-8);
        let b = CornerBox::new(0.3, 0.2, 0.9, 0.4);
        assert!(ciou(a, b) < crate::geometry::iou(a, b));
    }

    #[test]
    fn total_fixtures() {
        let w = LossWeights::default();
        let parts = LossParts {
            box_loss: 0.2,
            cls: 0.4,
            mask: 0.1,
            risk: 0.3,
        };
        assert!((total_loss(parts, &w, 0).unwrap().total - 0.71).abs() < 1e-12);
        let zero = LossWeights {
            lambda_box: 0.0,
            lambda_cls: 0.0,
            lambda_mask: 0.0,
            lambda_risk: 0.0,
        };
        assert_eq!(total_loss(parts, &zero, 0).unwrap().total, 0.0);
        let proj = LossWeights {
            lambda_box: 1.0,
            ..zero
        };
        let b = LossParts {
            box_loss: 0.3,
            ..LossParts::default()
        };
        assert_eq!(total_loss(b, &proj, 0).unwrap().total, 0.3);
        let nan = LossParts {
            risk: f64::NAN,
            ..parts
        };
        let err = total_loss(nan, &w, 0).unwrap_err().to_string();
        assert!(err.contains("risk"), "{err}");
    }
}
