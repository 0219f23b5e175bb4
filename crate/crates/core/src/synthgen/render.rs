//! Rasterizing a table layout with the built-in bitmap font.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::annotation::Annotation;
use super::font::{self, GLYPH_H};
use super::spec::{structure_strings, Style, TableSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::RasterImage;

pub type Rgb = [u8; 3];

const WHITE: Rgb = [255, 255, 255];
const INK: Rgb = [20, 20, 20];

/// Appearance parameters drawn per image from the style family.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StyleParams {
    pub background: Rgb,
    pub header_background: Rgb,
    /// Fill for every other body row.
    pub row_shade: Option<Rgb>,
    /// Probability that cell borders are drawn at all.
    pub grid_line_prob: f64,
    pub grid_lines: bool,
    /// Draw only horizontal rules around the header and at the bottom.
    pub rules_only: bool,
    pub line_thickness: usize,
    pub line_color: Rgb,
    pub empty_prob: f64,
    pub text_color: Rgb,
}

fn luminance(c: Rgb) -> f32 {
    (0.299 * c[0] as f32 + 0.587 * c[1] as f32 + 0.114 * c[2] as f32) / 255.0
}

impl StyleParams {
    pub fn sample(style: Style, scale: usize, rng: &mut impl Rng) -> StyleParams {
        let mut p = StyleParams {
            background: WHITE,
            header_background: WHITE,
            row_shade: None,
            grid_line_prob: 0.0,
            grid_lines: false,
            rules_only: false,
            line_thickness: scale,
            line_color: [90, 90, 90],
            empty_prob: style.empty_prob(),
            text_color: INK,
        };
        match style {
            Style::Finance => {
                p.header_background = [215, 220, 230];
                p.grid_line_prob = 0.6;
                if rng.random_bool(0.5) {
                    p.row_shade = Some([238, 238, 238]);
                }
            }
            Style::Scientific => {
                p.grid_line_prob = 1.0;
                p.rules_only = true;
                p.line_color = INK;
            }
            Style::Marketing => {
                let palette: [Rgb; 6] = [
                    [200, 60, 60],
                    [60, 120, 200],
                    [230, 180, 60],
                    [90, 170, 110],
                    [160, 90, 190],
                    [240, 150, 170],
                ];
                let bg = *palette.choose(rng).unwrap();
                let jitter = |c: u8, r: &mut dyn rand::RngCore| {
                    (c as i32 + r.random_range(-15..=15)).clamp(0, 230) as u8
                };
                p.background = [jitter(bg[0], rng), jitter(bg[1], rng), jitter(bg[2], rng)];
                p.header_background = p.background.map(|c| (c as f32 * 0.75) as u8);
                p.text_color = if luminance(p.background) > 0.55 {
                    INK
                } else {
                    WHITE
                };
                p.line_color = p.text_color;
                p.grid_line_prob = 0.3;
            }
            Style::Sparse => {
                p.grid_line_prob = 0.4;
            }
        }
        p.grid_lines = rng.random_bool(p.grid_line_prob);
        p
    }
}

/// Pixel geometry shared by rendering and layout checks.
#[derive(Clone, Debug, PartialEq)]
pub struct Layout {
    pub scale: usize,
    pub pad: usize,
    /// Column boundaries, `n_cols + 1` entries.
    pub xs: Vec<usize>,
    /// Row boundaries, `n_rows + 1` entries.
    pub ys: Vec<usize>,
}

impl Layout {
    pub fn new(spec: &TableSpec, image_size: usize) -> Layout {
        let scale = (image_size / 112).max(1);
        let margin = 4 * scale;
        let pad = 2 * scale;
        let avail = image_size - 2 * margin;

        let min_w = 2 * pad + font::text_width(1, scale);
        let mut desired = vec![min_w; spec.n_cols];
        for a in spec.anchors() {
            if a.colspan == 1 {
                if let Some(t) = spec.text(a.row, a.col) {
                    let w = 2 * pad + font::text_width(t.chars().count(), scale);
                    desired[a.col] = desired[a.col].max(w);
                }
            }
        }
        let total: usize = desired.iter().sum();
        let widths: Vec<usize> = if total <= avail {
            let extra = (avail - total) / spec.n_cols;
            desired.iter().map(|w| w + extra).collect()
        } else {
            desired.iter().map(|w| w * avail / total).collect()
        };
        let mut xs = vec![margin];
        for w in &widths {
            xs.push(xs.last().unwrap() + w);
        }
        *xs.last_mut().unwrap() = margin + avail;

        let h = avail / spec.n_rows;
        let mut ys: Vec<usize> = (0..=spec.n_rows).map(|r| margin + r * h).collect();
        *ys.last_mut().unwrap() = margin + avail;
        Layout { scale, pad, xs, ys }
    }

    /// Pixel rectangle `(x0, y0, x1, y1)` of a cell, exclusive ends.
    pub fn cell_rect(
        &self,
        row: usize,
        col: usize,
        rowspan: usize,
        colspan: usize,
    ) -> (usize, usize, usize, usize) {
        (
            self.xs[col],
            self.ys[row],
            self.xs[col + colspan],
            self.ys[row + rowspan],
        )
    }

    /// Characters that fit on one line inside a cell of pixel width `w`.
    fn max_chars(&self, w: usize) -> usize {
        let inner = w.saturating_sub(2 * self.pad);
        (inner + self.scale) / (font::ADVANCE * self.scale)
    }
}

fn rgb(c: Rgb) -> [f32; 3] {
    c.map(|v| v as f32 / 255.0)
}

/// Draw `text` with its top-left corner at (`x`, `y`).
pub fn draw_text(img: &mut RasterImage, text: &str, x: usize, y: usize, scale: usize, color: Rgb) {
    let color = rgb(color);
    for (i, ch) in text.chars().enumerate() {
        let Some(rows) = font::glyph(ch) else {
            continue;
        };
        let gx = x + i * font::ADVANCE * scale;
        for (r, _) in rows.iter().enumerate() {
            for c in 0..font::GLYPH_W {
                if font::lit(rows, r, c) {
                    let px = gx + c * scale;
                    let py = y + r * scale;
                    img.fill_rect(px, py, px + scale, py + scale, &color);
                }
            }
        }
    }
}

/// A rendered table image with its annotation.
#[derive(Clone, Debug)]
pub struct Rendered {
    pub image: RasterImage,
    pub annotation: Annotation,
    /// The layout actually drawn, after truncation.
    pub spec: TableSpec,
    pub style: StyleParams,
    /// Anchor slots whose text was shortened or dropped to fit.
    pub truncated: Vec<(usize, usize)>,
}

/// Draw `spec` on a square canvas. Text is left-aligned and vertically
/// centered in the first row band of its cell, one box per non-empty cell.
/// Text that does not fit is truncated and the annotation reflects what
/// was drawn.
pub fn render(spec: &TableSpec, image_size: usize, rng: &mut impl Rng) -> Result<Rendered> {
    spec.validate()?;
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!(
            "image_size {image_size} too small"
        )));
    }
    let layout = Layout::new(spec, image_size);
    let params = StyleParams::sample(spec.style, layout.scale, rng);
    let s = layout.scale;
    let text_h = GLYPH_H * s;

    let mut spec = spec.clone();
    let mut truncated = Vec::new();
    let anchors = spec.anchors();
    for a in &anchors {
        let (x0, y0, x1, _) = layout.cell_rect(a.row, a.col, a.rowspan, a.colspan);
        let band = layout.ys[a.row + 1] - y0;
        let Some(text) = spec.cells[a.row][a.col].clone() else {
            continue;
        };
        let fits_v = band >= text_h + 2 * layout.pad;
        let keep = if fits_v { layout.max_chars(x1 - x0) } else { 0 };
        if text.chars().count() > keep {
            let t: String = text
                .chars()
                .take(keep)
                .collect::<String>()
                .trim_end()
                .to_string();
            log::debug!(
                "cell ({}, {}) text {text:?} truncated to {t:?}",
                a.row,
                a.col
            );
            truncated.push((a.row, a.col));
            spec.cells[a.row][a.col] = if t.is_empty() { None } else { Some(t) };
        }
    }

    let mut img = RasterImage::filled(image_size, image_size, &rgb(params.background));
    let (tx0, ty0) = (layout.xs[0], layout.ys[0]);
    let (tx1, ty1) = (*layout.xs.last().unwrap(), *layout.ys.last().unwrap());
    let head_y = layout.ys[spec.header_rows];
    if spec.header_rows > 0 {
        img.fill_rect(tx0, ty0, tx1, head_y, &rgb(params.header_background));
    }
    if let Some(shade) = params.row_shade {
        for r in (spec.header_rows..spec.n_rows).skip(1).step_by(2) {
            img.fill_rect(tx0, layout.ys[r], tx1, layout.ys[r + 1], &rgb(shade));
        }
    }
    if params.grid_lines {
        let t = params.line_thickness;
        let lc = rgb(params.line_color);
        if params.rules_only {
            for y in [ty0, head_y, ty1 - t] {
                img.fill_rect(tx0, y, tx1, y + t, &lc);
            }
        } else {
            for a in &anchors {
                let (x0, y0, x1, y1) = layout.cell_rect(a.row, a.col, a.rowspan, a.colspan);
                img.fill_rect(x0, y0, x1, y0 + t, &lc);
                img.fill_rect(x0, y1 - t, x1, y1, &lc);
                img.fill_rect(x0, y0, x0 + t, y1, &lc);
                img.fill_rect(x1 - t, y0, x1, y1, &lc);
            }
        }
    }

    let mut annotation = Annotation {
        structure_tokens: structure_strings(&spec),
        ..Default::default()
    };
    for a in &anchors {
        let Some(text) = spec.text(a.row, a.col) else {
            continue;
        };
        let (x0, y0, _, _) = layout.cell_rect(a.row, a.col, a.rowspan, a.colspan);
        let band = layout.ys[a.row + 1] - y0;
        let tx = x0 + layout.pad;
        let ty = y0 + (band - text_h) / 2;
        draw_text(&mut img, text, tx, ty, s, params.text_color);
        let w = font::text_width(text.chars().count(), s);
        annotation.bboxes.push(BBox::new(
            tx as f32,
            ty as f32,
            (tx + w) as f32,
            (ty + text_h) as f32,
        ));
        annotation.contents.push(text.to_string());
    }

    Ok(Rendered {
        image: img,
        annotation,
        spec,
        style: params,
        truncated,
    })
}
