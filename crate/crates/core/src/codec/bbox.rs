//! Cell boxes as coordinate tokens: quantization, reading-order
//! serialization, and deserialization of predicted sequences.

use serde::{Deserialize, Serialize};

use super::vocab::{Task, TokenSeq, Vocab};
use crate::error::{Error, Result};
use crate::geometry::BBox;

const COORD_OFFSET: u32 = 4;

/// A box snapped to the integer coordinate grid `[0, image_size]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizedBox {
    pub coords: [u32; 4],
    /// Some coordinate fell outside `[0, image_size]` and was clamped.
    pub clamped: bool,
}

impl QuantizedBox {
    pub fn to_bbox(self) -> BBox {
        let [a, b, c, d] = self.coords.map(|v| v as f32);
        BBox::new(a, b, c, d)
    }
}

/// Round half up, then clamp to `[0, image_size]`.
pub fn quantize_coord(v: f32, image_size: u32) -> Result<(u32, bool)> {
    if v.is_nan() {
        return Err(Error::InvalidArgument("NaN coordinate".into()));
    }
    let r = (v as f64 + 0.5).floor();
    if r < 0.0 {
        Ok((0, true))
    } else if r > image_size as f64 {
        Ok((image_size, true))
    } else {
        Ok((r as u32, false))
    }
}

pub fn quantize_bbox(b: &BBox, image_size: u32) -> Result<QuantizedBox> {
    if image_size == 0 {
        return Err(Error::InvalidArgument("image_size must be positive".into()));
    }
    let mut coords = [0u32; 4];
    let mut clamped = false;
    for (slot, v) in coords.iter_mut().zip(b.to_array()) {
        let (q, c) = quantize_coord(v, image_size)?;
        *slot = q;
        clamped |= c;
    }
    Ok(QuantizedBox { coords, clamped })
}

/// Coordinate vocabulary shared by both axes: specials plus `0..=image_size`.
pub fn build_bbox_vocab(image_size: u32) -> Vocab {
    Vocab::with_specials((0..=image_size).map(|c| c.to_string()))
}

pub fn coord_to_id(c: u32) -> u32 {
    c + COORD_OFFSET
}

pub fn id_to_coord(id: u32, image_size: u32) -> Option<u32> {
    id.checked_sub(COORD_OFFSET).filter(|&c| c <= image_size)
}

/// Indices of `boxes` in reading order: rows top to bottom, then left to
/// right. Boxes join a row band when their vertical center lies within half
/// the median box height of the band's first box.
pub fn reading_order(boxes: &[BBox]) -> Vec<usize> {
    if boxes.is_empty() {
        return Vec::new();
    }
    let mut heights: Vec<f32> = boxes.iter().map(|b| b.height().abs()).collect();
    heights.sort_by(f32::total_cmp);
    let median = heights[heights.len() / 2];
    let tol = 0.5 * median;

    let mut by_y: Vec<usize> = (0..boxes.len()).collect();
    by_y.sort_by(|&a, &b| boxes[a].center_y().total_cmp(&boxes[b].center_y()));

    let mut order = Vec::with_capacity(boxes.len());
    let mut band: Vec<usize> = Vec::new();
    let mut anchor = f32::NEG_INFINITY;
    let flush = |band: &mut Vec<usize>, order: &mut Vec<usize>| {
        band.sort_by(|&a, &b| boxes[a].x_min.total_cmp(&boxes[b].x_min));
        order.append(band);
    };
    for i in by_y {
        let cy = boxes[i].center_y();
        if band.is_empty() || cy - anchor > tol {
            flush(&mut band, &mut order);
            anchor = cy;
        }
        band.push(i);
    }
    flush(&mut band, &mut order);
    order
}

/// Quantize and concatenate boxes in reading order, framed by BOS/EOS.
pub fn serialize_bboxes(boxes: &[BBox], image_size: u32) -> Result<TokenSeq> {
    let max = Task::Bbox.max_len();
    let mut payload = Vec::with_capacity(boxes.len() * 4);
    for (n, i) in reading_order(boxes).into_iter().enumerate() {
        if 4 * (n + 1) + 2 > max {
            return Err(Error::BboxOverflow { index: i, max });
        }
        let q = quantize_bbox(&boxes[i], image_size)?;
        payload.extend(q.coords.map(coord_to_id));
    }
    TokenSeq::framed(Task::Bbox, &payload)
}

/// Outcome of turning a coordinate sequence back into boxes.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DecodedBoxes {
    pub boxes: Vec<BBox>,
    /// Indices of boxes with `x_min >= x_max` or `y_min >= y_max`.
    pub degenerate: Vec<usize>,
    /// Trailing coordinates that did not complete a quadruple.
    pub remainder: usize,
    /// Non-coordinate ids found inside the payload (dropped).
    pub invalid_tokens: usize,
}

/// Strip BOS/EOS, group coordinates by four, and rebuild boxes. A partial
/// trailing group is dropped and reported in `remainder`.
pub fn deserialize_bboxes(ids: &[u32], image_size: u32) -> DecodedBoxes {
    let seq = TokenSeq {
        ids: ids.to_vec(),
        task: Task::Bbox,
    };
    let mut coords = Vec::with_capacity(ids.len());
    let mut invalid_tokens = 0;
    for &id in seq.payload() {
        match id_to_coord(id, image_size) {
            Some(c) => coords.push(c as f32),
            None => invalid_tokens += 1,
        }
    }
    let remainder = coords.len() % 4;
    let mut out = DecodedBoxes {
        remainder,
        invalid_tokens,
        ..Default::default()
    };
    for (i, q) in coords.chunks_exact(4).enumerate() {
        let b = BBox::new(q[0], q[1], q[2], q[3]);
        if !b.is_valid() {
            out.degenerate.push(i);
        }
        out.boxes.push(b);
    }
    out
}
