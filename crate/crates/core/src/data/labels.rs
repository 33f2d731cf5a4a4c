use crate::geometry::{CenterBox, CornerBox};

use super::{ClassTable, DataError};

/// One annotated object. `severity` is `None` when the label defers to the
/// class default.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GroundTruthBox {
    pub class_id: usize,
    pub bbox: CenterBox,
    pub severity: Option<f64>,
}

impl GroundTruthBox {
    pub fn corners(&self) -> CornerBox {
        self.bbox.to_corners()
    }

    pub fn severity_in(&self, table: &ClassTable) -> f64 {
        self.severity
            .or_else(|| table.get(self.class_id).map(|c| c.severity))
            .unwrap_or(0.0)
    }

    /// Clips the extent to the unit square. Boxes inside it, up to the
    /// six-decimal text precision, are left bit-for-bit untouched.
    pub fn clipped(mut self) -> Self {
        const SLACK: f64 = 1e-6;
        let c = self.bbox.to_corners();
        let inside = c.x1 >= -SLACK && c.y1 >= -SLACK && c.x2 <= 1.0 + SLACK && c.y2 <= 1.0 + SLACK;
        if !inside {
            self.bbox = c.clipped().to_center();
        }
        self
    }
}

/// Parses `class_id cx cy w h [severity]`.
pub fn parse_label_line(line: &str) -> Result<GroundTruthBox, DataError> {
    let fields: Vec<&str> = line.split_whitespace().collect();
    if fields.len() != 5 && fields.len() != 6 {
        return Err(DataError::Label(format!(
            "expected 5 or 6 fields, found {} in {line:?}",
            fields.len()
        )));
    }
    let class_id: usize = fields[0]
        .parse()
        .map_err(|_| DataError::Label(format!("class id {:?} is not an integer", fields[0])))?;
    let mut v = [0.0f64; 5];
    for (slot, text) in v.iter_mut().zip(&fields[1..]) {
        let x: f64 = text
            .parse()
            .map_err(|_| DataError::Label(format!("{text:?} is not a number")))?;
        if !(0.0..=1.0).contains(&x) {
            return Err(DataError::Label(format!("value {x} outside [0, 1]")));
        }
        *slot = x;
    }
    if v[2] <= 0.0 || v[3] <= 0.0 {
        return Err(DataError::Label(format!(
            "box extent must be positive, got w={} h={}",
            v[2], v[3]
        )));
    }
    Ok(GroundTruthBox {
        class_id,
        bbox: CenterBox {
            cx: v[0],
            cy: v[1],
            w: v[2],
            h: v[3],
        },
        severity: (fields.len() == 6).then_some(v[4]),
    }
    .clipped())
}

pub fn format_label_line(gt: &GroundTruthBox) -> String {
    let b = gt.bbox;
    let mut s = format!(
        "{} {:.6} {:.6} {:.6} {:.6}",
        gt.class_id, b.cx, b.cy, b.w, b.h
    );
    if let Some(w) = gt.severity {
        s.push_str(&format!(" {w:.6}"));
    }
    s
}
