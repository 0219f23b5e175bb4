use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::codec::TableGrid;
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Direction {
    Horizontal,
    Vertical,
}

/// `a` is left of (horizontal) or above (vertical) `b`. Ids index the
/// non-empty cells in reading order, which is also the bbox order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct AdjacencyRelation {
    pub a: usize,
    pub b: usize,
    pub direction: Direction,
}

/// Nearest non-empty neighbour to the right in every row a cell occupies and
/// below in every column it occupies. Spanning cells occupy all their slots.
pub fn car_relations(grid: &TableGrid) -> BTreeSet<AdjacencyRelation> {
    let occ = grid.occupancy();
    let mut ids = vec![None; grid.cells.len()];
    let mut next = 0;
    for (i, c) in grid.cells.iter().enumerate() {
        if c.filled {
            ids[i] = Some(next);
            next += 1;
        }
    }
    let mut out = BTreeSet::new();
    let mut scan = |from: usize, slots: &mut dyn Iterator<Item = Option<usize>>, direction| {
        for slot in slots.flatten() {
            if slot == from {
                continue;
            }
            if let Some(b) = ids[slot] {
                out.insert(AdjacencyRelation {
                    a: ids[from].expect("filled"),
                    b,
                    direction,
                });
                return;
            }
        }
    };
    for (i, c) in grid.cells.iter().enumerate() {
        if !c.filled {
            continue;
        }
        for r in c.row..(c.row + c.rowspan).min(grid.n_rows) {
            scan(
                i,
                &mut occ[r].iter().skip(c.col + c.colspan).copied(),
                Direction::Horizontal,
            );
        }
        for k in c.col..(c.col + c.colspan).min(grid.n_cols) {
            scan(
                i,
                &mut occ.iter().skip(c.row + c.rowspan).map(|row| row[k]),
                Direction::Vertical,
            );
        }
    }
    out
}

/// One-to-one pred→gt matching by descending IoU; pairs below `threshold`
/// stay unmatched. Ties go to the lower pred, then gt, index.
pub fn greedy_match(pred: &[BBox], gt: &[BBox], threshold: f64) -> Vec<Option<usize>> {
    let mut pairs = Vec::new();
    for (p, pb) in pred.iter().enumerate() {
        for (g, gb) in gt.iter().enumerate() {
            let v = iou(pb, gb);
            if v >= threshold && v > 0.0 {
                pairs.push((v, p, g));
            }
        }
    }
    pairs.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)).then(x.2.cmp(&y.2)));
    let mut out = vec![None; pred.len()];
    let mut taken = vec![false; gt.len()];
    for (_, p, g) in pairs {
        if out[p].is_none() && !taken[g] {
            out[p] = Some(g);
            taken[g] = true;
        }
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl F1Score {
    fn from_counts(tp: usize, n_pred: usize, n_gt: usize) -> Self {
        if n_pred == 0 && n_gt == 0 {
            return F1Score {
                precision: 1.0,
                recall: 1.0,
                f1: 1.0,
            };
        }
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let (precision, recall) = (ratio(tp, n_pred), ratio(tp, n_gt));
        let f1 = if precision + recall > 0.0 {
            2.0 * precision * recall / (precision + recall)
        } else {
            0.0
        };
        F1Score {
            precision,
            recall,
            f1,
        }
    }
}

/// Relation F1 when predicted relations come from a predicted grid. Pred
/// relations are mapped to gt ids through the box matching; a relation with
/// an unmatched endpoint counts as a false positive.
pub fn car_f1_with_relations(
    pred_boxes: &[BBox],
    pred_relations: &BTreeSet<AdjacencyRelation>,
    gt_boxes: &[BBox],
    gt_relations: &BTreeSet<AdjacencyRelation>,
    iou_threshold: f64,
) -> Result<F1Score> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }
    let m = greedy_match(pred_boxes, gt_boxes, iou_threshold);
    let tp = pred_relations
        .iter()
        .filter_map(|r| {
            let a = *m.get(r.a)?;
            let b = *m.get(r.b)?;
            Some(AdjacencyRelation {
                a: a?,
                b: b?,
                direction: r.direction,
            })
        })
        .filter(|r| gt_relations.contains(r))
        .collect::<BTreeSet<_>>()
        .len();
    Ok(F1Score::from_counts(
        tp,
        pred_relations.len(),
        gt_relations.len(),
    ))
}

/// Relation F1 when only boxes are predicted: the predicted relation set is
/// the gt relations whose two cells both have a matched box.
pub fn car_f1(
    pred_boxes: &[BBox],
    gt_boxes: &[BBox],
    gt_relations: &BTreeSet<AdjacencyRelation>,
    iou_threshold: f64,
) -> Result<F1Score> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_threshold} outside (0, 1]"
        )));
    }
    let m = greedy_match(pred_boxes, gt_boxes, iou_threshold);
    let mut matched = vec![false; gt_boxes.len()];
    for g in m.into_iter().flatten() {
        matched[g] = true;
    }
    let hit = |i: usize| matched.get(i).copied().unwrap_or(false);
    let induced = gt_relations.iter().filter(|r| hit(r.a) && hit(r.b)).count();
    Ok(F1Score::from_counts(induced, induced, gt_relations.len()))
}

/// IoU thresholds and weights of the weighted-average F1.
pub const WF1_THRESHOLDS: [f64; 4] = [0.6, 0.7, 0.8, 0.9];

/// `Σ t·F1@t / Σ t` over exactly the thresholds 0.6, 0.7, 0.8, 0.9.
pub fn wavg_f1(f1_at: &[(f64, f64)]) -> Result<f64> {
    let mut num = 0.0;
    let mut den = 0.0;
    for t in WF1_THRESHOLDS {
        let hits: Vec<f64> = f1_at
            .iter()
            .filter(|(k, _)| (k - t).abs() < 1e-9)
            .map(|&(_, f)| f)
            .collect();
        match hits.as_slice() {
            [f] => {
                num += t * f;
                den += t;
            }
            [] => return Err(Error::InvalidArgument(format!("missing F1 at IoU {t}"))),
            _ => return Err(Error::InvalidArgument(format!("duplicate F1 at IoU {t}"))),
        }
    }
    if f1_at.len() != WF1_THRESHOLDS.len() {
        return Err(Error::InvalidArgument(
            "unexpected IoU threshold in weighted F1".into(),
        ));
    }
    Ok(num / den)
}
