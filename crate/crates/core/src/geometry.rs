//! Normalized box representations shared by every stage.

use serde::{Deserialize, Serialize};

/// Center-form box `(cx, cy, w, h)`, normalized to image extents.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CenterBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

/// Corner-form box `(x1, y1, x2, y2)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl CenterBox {
    pub fn to_corners(self) -> CornerBox {
        CornerBox {
            x1: self.cx - self.w / 2.0,
            y1: self.cy - self.h / 2.0,
            x2: self.cx + self.w / 2.0,
            y2: self.cy + self.h / 2.0,
        }
    }

    pub fn area(self) -> f64 {
        self.w * self.h
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    pub fn to_center(self) -> CenterBox {
        CenterBox {
            cx: (self.x1 + self.x2) / 2.0,
            cy: (self.y1 + self.y2) / 2.0,
            w: self.x2 - self.x1,
            h: self.y2 - self.y1,
        }
    }

    pub fn width(self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(self) -> f64 {
        self.width() * self.height()
    }

    pub fn clipped(self) -> Self {
        Self {
            x1: self.x1.clamp(0.0, 1.0),
            y1: self.y1.clamp(0.0, 1.0),
            x2: self.x2.clamp(0.0, 1.0),
            y2: self.y2.clamp(0.0, 1.0),
        }
    }

    pub fn intersection(self, other: Self) -> f64 {
        let w = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let h = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        w * h
    }

    pub fn as_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

/// Intersection over union; zero when the union is empty.
pub fn iou(a: CornerBox, b: CornerBox) -> f64 {
    let inter = a.intersection(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn iou_of_shifted_squares() {
        let a = CornerBox::new(0.0, 0.0, 10.0, 10.0);
        let b = CornerBox::new(1.0, 1.0, 11.0, 11.0);
        assert!((iou(a, b) - 81.0 / 119.0).abs() < 1e-12);
        assert_eq!(iou(a, a), 1.0);
        assert_eq!(iou(a, CornerBox::new(20.0, 20.0, 30.0, 30.0)), 0.0);
    }

    #[test]
    fn center_corner_roundtrip() {
        let c = CenterBox {
            cx: 0.4,
            cy: 0.6,
            w: 0.2,
            h: 0.1,
        };
        let back = c.to_corners().to_center();
        assert!((back.cx - c.cx).abs() < 1e-15 && (back.h - c.h).abs() < 1e-15);
    }
}
