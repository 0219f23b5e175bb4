use serde::{Deserialize, Serialize};

use crate::codec::{count_filled, reading_order};
use crate::geometry::BBox;

/// Ground truth for one table image: structure tokens, cell boxes in
/// reading order, and the text of each non-empty cell.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub structure_tokens: Vec<String>,
    pub bboxes: Vec<BBox>,
    pub contents: Vec<String>,
}

impl Annotation {
    pub fn filled_cells(&self) -> usize {
        count_filled(&self.structure_tokens)
    }

    /// Whether boxes, contents and non-empty cell tokens agree in number.
    pub fn counts_consistent(&self) -> bool {
        let n = self.filled_cells();
        self.bboxes.len() == n && self.contents.len() == n
    }

    pub fn in_reading_order(&self) -> bool {
        reading_order(&self.bboxes)
            .into_iter()
            .enumerate()
            .all(|(i, j)| i == j)
    }
}
