use crate::compute::{Graph, Real, Tensor, TensorError, Var};
use crate::geometry::{CenterBox, CornerBox};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Box of cell `(i, j)` from its four logits `(tx, ty, tw, th)`.
pub fn decode_cell(t: [f64; 4], i: usize, j: usize, grid: usize) -> CornerBox {
    let s = grid as f64;
    CenterBox {
        cx: (sigmoid(t[0]) + j as f64) / s,
        cy: (sigmoid(t[1]) + i as f64) / s,
        w: sigmoid(t[2]),
        h: sigmoid(t[3]),
    }
    .to_corners()
    .clipped()
}

/// Logits that decode to `b` in cell `(i, j)`; `b` must be achievable
/// (centre inside the cell interior, extents in `(0, 1)`).
pub fn encode_box(b: CenterBox, i: usize, j: usize, grid: usize) -> [f64; 4] {
    let s = grid as f64;
    [
        logit(b.cx * s - j as f64),
        logit(b.cy * s - i as f64),
        logit(b.w),
        logit(b.h),
    ]
}

/// Decodes every cell of `[S·S, K]` grid predictions.
pub fn decode_boxes<T: Real>(preds: &Tensor<T>, grid: usize) -> Vec<CornerBox> {
    let k = preds.shape()[1];
    preds
        .data()
        .chunks(k)
        .enumerate()
        .map(|(cell, row)| {
            let t = [0, 1, 2, 3].map(|c| row[c].as_f64());
            decode_cell(t, cell / grid, cell % grid, grid)
        })
        .collect()
}

/// Corner columns, each `[P]`.
#[derive(Clone, Copy, Debug)]
pub struct BoxVars {
    pub x1: Var,
    pub y1: Var,
    pub x2: Var,
    pub y2: Var,
}

impl BoxVars {
    /// Constant columns holding `boxes`.
    pub fn constant<T: Real>(g: &mut Graph<T>, boxes: &[CornerBox]) -> Self {
        let n = boxes.len();
        let mut col = |f: fn(&CornerBox) -> f64| {
            let data = boxes.iter().map(|b| T::lit(f(b))).collect();
            g.constant(Tensor::new([n], data).expect("column"))
        };
        Self {
            x1: col(|b| b.x1),
            y1: col(|b| b.y1),
            x2: col(|b| b.x2),
            y2: col(|b| b.y2),
        }
    }
}

/// Differentiable decoding of the listed cells of `preds` (`[S·S, K]`).
pub fn decode_cells<T: Real>(
    g: &mut Graph<T>,
    preds: Var,
    cells: &[usize],
    grid: usize,
) -> Result<BoxVars, TensorError> {
    let p = cells.len();
    let rows = g.gather_rows(preds, cells)?;
    let raw = g.slice_last(rows, 0, 4)?;
    let sig = g.sigmoid(raw);
    let offsets: Vec<T> = cells
        .iter()
        .flat_map(|&c| [T::lit((c % grid) as f64), T::lit((c / grid) as f64), T::zero(), T::zero()])
        .collect();
    let offsets = g.constant(Tensor::new([p, 4], offsets)?);
    let inv = T::lit(1.0 / grid as f64);
    let scale = g.constant(Tensor::new([4], vec![inv, inv, T::one(), T::one()])?);
    let shifted = g.add(sig, offsets)?;
    let cxcywh = g.mul(shifted, scale)?;
    let mut col = |c: usize| -> Result<Var, TensorError> {
        let v = g.slice_last(cxcywh, c, 1)?;
        g.reshape(v, &[p])
    };
    let (cx, cy, w, h) = (col(0)?, col(1)?, col(2)?, col(3)?);
    let half_w = g.scale(w, T::lit(0.5));
    let half_h = g.scale(h, T::lit(0.5));
    let x1 = g.sub(cx, half_w)?;
    let x2 = g.add(cx, half_w)?;
    let y1 = g.sub(cy, half_h)?;
    let y2 = g.add(cy, half_h)?;
    let (lo, hi) = (T::zero(), T::one());
    Ok(BoxVars {
        x1: g.clamp(x1, lo, hi),
        y1: g.clamp(y1, lo, hi),
        x2: g.clamp(x2, lo, hi),
        y2: g.clamp(y2, lo, hi),
    })
}
