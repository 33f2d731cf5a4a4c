use crate::data::{ClassTable, GroundTruthBox};
use crate::geometry::CornerBox;

/// Per-cell training targets for one image on an `S×S` grid.
#[derive(Clone, Debug, PartialEq)]
pub struct AssignmentTargets {
    pub grid: usize,
    /// Class per cell; `num_classes` marks background.
    pub classes: Vec<usize>,
    pub boxes: Vec<CornerBox>,
    pub severity: Vec<f64>,
    pub num_classes: usize,
    /// Ground truths lost to a larger box in the same cell.
    pub dropped: usize,
}

impl AssignmentTargets {
    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn is_positive(&self, cell: usize) -> bool {
        self.classes[cell] != self.num_classes
    }

    /// Positive cell indices, ascending.
    pub fn positive_cells(&self) -> Vec<usize> {
        (0..self.classes.len())
            .filter(|&c| self.is_positive(c))
            .collect()
    }

    pub fn positives(&self) -> usize {
        self.classes.iter().filter(|&&c| c != self.num_classes).count()
    }
}

/// Assigns every box to the cell containing its centre. When two boxes
/// share a cell the larger one is kept (the earlier one on equal area).
pub fn assign_targets(gts: &[GroundTruthBox], grid: usize, table: &ClassTable) -> AssignmentTargets {
    let c = table.len();
    let cells = grid * grid;
    let mut t = AssignmentTargets {
        grid,
        classes: vec![c; cells],
        boxes: vec![CornerBox::new(0.0, 0.0, 0.0, 0.0); cells],
        severity: vec![0.0; cells],
        num_classes: c,
        dropped: 0,
    };
    let mut owner_area = vec![f64::NEG_INFINITY; cells];
    let to_cell = |v: f64| ((v * grid as f64).floor().max(0.0) as usize).min(grid - 1);
    for gt in gts {
        let cell = to_cell(gt.bbox.cy) * grid + to_cell(gt.bbox.cx);
        let area = gt.bbox.area();
        if t.is_positive(cell) {
            t.dropped += 1;
            if area <= owner_area[cell] {
                continue;
            }
        }
        owner_area[cell] = area;
        t.classes[cell] = gt.class_id;
        t.boxes[cell] = gt.corners().clipped();
        t.severity[cell] = gt.severity_in(table);
    }
    if t.dropped > 0 {
        log::debug!("{} ground truths lost to same-cell collisions", t.dropped);
    }
    t
}
