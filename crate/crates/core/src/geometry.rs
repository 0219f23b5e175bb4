use serde::{Deserialize, Serialize};

/// Axis-aligned box `(x_min, y_min, x_max, y_max)` in pixels.
///
/// Serialized as a bare four-element array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f32; 4]", into = "[f32; 4]")]
pub struct BBox {
    pub x_min: f32,
    pub y_min: f32,
    pub x_max: f32,
    pub y_max: f32,
}

impl From<[f32; 4]> for BBox {
    fn from(a: [f32; 4]) -> Self {
        BBox::new(a[0], a[1], a[2], a[3])
    }
}

impl From<BBox> for [f32; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

impl BBox {
    pub const fn new(x_min: f32, y_min: f32, x_max: f32, y_max: f32) -> Self {
        BBox {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn to_array(self) -> [f32; 4] {
        [self.x_min, self.y_min, self.x_max, self.y_max]
    }

    pub fn width(&self) -> f32 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f32 {
        self.y_max - self.y_min
    }

    /// True when both extents are strictly positive.
    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn area(&self) -> f32 {
        if self.is_valid() {
            self.width() * self.height()
        } else {
            0.0
        }
    }

    pub fn center_y(&self) -> f32 {
        0.5 * (self.y_min + self.y_max)
    }

    pub fn translate(&self, dx: f32, dy: f32) -> BBox {
        BBox::new(
            self.x_min + dx,
            self.y_min + dy,
            self.x_max + dx,
            self.y_max + dy,
        )
    }

    pub fn scale(&self, s: f32) -> BBox {
        BBox::new(
            self.x_min * s,
            self.y_min * s,
            self.x_max * s,
            self.y_max * s,
        )
    }

    pub fn clamp_to(&self, width: f32, height: f32) -> BBox {
        BBox::new(
            self.x_min.clamp(0.0, width),
            self.y_min.clamp(0.0, height),
            self.x_max.clamp(0.0, width),
            self.y_max.clamp(0.0, height),
        )
    }
}

/// Intersection over union. Degenerate (zero-area) boxes give 0.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    if !a.is_valid() || !b.is_valid() {
        return 0.0;
    }
    let iw = (a.x_max.min(b.x_max) as f64 - a.x_min.max(b.x_min) as f64).max(0.0);
    let ih = (a.y_max.min(b.y_max) as f64 - a.y_min.max(b.y_min) as f64).max(0.0);
    let inter = iw * ih;
    if inter == 0.0 {
        return 0.0;
    }
    let area = |r: &BBox| (r.x_max as f64 - r.x_min as f64) * (r.y_max as f64 - r.y_min as f64);
    inter / (area(a) + area(b) - inter)
}
