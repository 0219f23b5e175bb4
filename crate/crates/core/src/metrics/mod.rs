//! Evaluation: tree-edit-distance similarity on HTML tables, adjacency
//! relation F1 and COCO-style average precision for cell boxes.

mod ap;
mod car;
mod ted;
mod tree;

pub use crate::geometry::iou;
pub use ap::{average_precision, coco_ap, coco_thresholds, ApReport, Detection, DetectionSet};
pub use car::{
    car_f1, car_f1_with_relations, car_relations, greedy_match, wavg_f1, AdjacencyRelation,
    Direction, F1Score, WF1_THRESHOLDS,
};
pub use ted::{
    html_rename_cost, normalized_levenshtein, teds, teds_trees, tree_edit_distance, try_teds,
};
pub use tree::{html_to_tree, HtmlNode, HtmlTree, Tree};
