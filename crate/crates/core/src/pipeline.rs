//! End-to-end inference (structure, then boxes, then per-cell content,
//! merged into HTML), the annotation linter, and corpus evaluation.

use std::collections::BTreeSet;
use std::io::BufRead;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::codec::{
    self, build_bbox_vocab, build_structure_vocab, decode_content, decode_structure,
    deserialize_bboxes, encode_content, encode_structure, id_to_coord, merge_html, merge_prefix,
    parse_grid, serialize_bboxes, Task, Vocab,
};
use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};
use crate::image::RasterImage;
use crate::metrics::{self, DetectionSet, WF1_THRESHOLDS};
use crate::model::{Decoded, TaskModel, TaskSample};
use crate::synthgen::{Annotation, SampleRecord, ANNOTATIONS_FILE};

/// Default IoU above which two boxes of one annotation count as overlapping.
pub const OVERLAP_THRESHOLD: f64 = 0.1;

// ------------------------------------------------------------------ crop

/// A crop and what happened while taking it.
#[derive(Clone, Debug, PartialEq)]
pub struct Crop {
    pub image: RasterImage,
    /// The box extended past the image and was clamped.
    pub clamped: bool,
    /// Nothing was left after clamping; `image` is blank.
    pub empty: bool,
}

fn border_median(img: &RasterImage) -> Vec<f32> {
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let mut per: Vec<Vec<f32>> = vec![Vec::new(); c];
    for y in 0..h {
        for x in 0..w {
            if y == 0 || x == 0 || y + 1 == h || x + 1 == w {
                for (ch, v) in img.pixel(y, x).iter().enumerate() {
                    per[ch].push(*v);
                }
            }
        }
    }
    per.into_iter()
        .map(|mut v| {
            v.sort_by(f32::total_cmp);
            v[v.len() / 2]
        })
        .collect()
}

/// Clamp `bbox` to the image, cut it out, and rescale it preserving aspect
/// ratio into a `height × width` canvas, centered and padded with the crop's
/// border color.
pub fn crop(image: &RasterImage, bbox: &BBox, height: usize, width: usize) -> Crop {
    let (iw, ih) = (image.width() as f32, image.height() as f32);
    let c = bbox.clamp_to(iw, ih);
    let clamped = c != *bbox;
    let x0 = c.x_min.floor().max(0.0) as usize;
    let y0 = c.y_min.floor().max(0.0) as usize;
    let x1 = (c.x_max.ceil() as usize).min(image.width());
    let y1 = (c.y_max.ceil() as usize).min(image.height());
    let blank = |clamped| Crop {
        image: RasterImage::filled(height, width, &vec![1.0; image.channels()]),
        clamped,
        empty: true,
    };
    if !(c.x_max > c.x_min && c.y_max > c.y_min) || x1 <= x0 || y1 <= y0 {
        return blank(clamped);
    }
    let Ok(region) = image.sub_image(x0, y0, x1, y1) else {
        return blank(clamped);
    };
    let (rh, rw) = (region.height() as f32, region.width() as f32);
    let s = (height as f32 / rh).min(width as f32 / rw);
    let nh = ((rh * s).round() as usize).clamp(1, height);
    let nw = ((rw * s).round() as usize).clamp(1, width);
    let scaled = region.resize(nh, nw);
    let mut out = RasterImage::filled(height, width, &border_median(&region));
    let (oy, ox) = ((height - nh) / 2, (width - nw) / 2);
    for y in 0..nh {
        for x in 0..nw {
            out.set_pixel(oy + y, ox + x, scaled.pixel(y, x));
        }
    }
    Crop {
        image: out,
        clamped,
        empty: false,
    }
}

// ------------------------------------------------------------- training data

/// Supervised pairs for `task` from annotated images. Content pairs are
/// one per non-empty cell, cropped to `content_size` (height, width).
pub fn task_samples(
    task: Task,
    items: &[(RasterImage, Annotation)],
    vocab: &Vocab,
    content_size: (usize, usize),
) -> Result<Vec<TaskSample>> {
    let mut out = Vec::new();
    for (i, (image, ann)) in items.iter().enumerate() {
        match task {
            Task::Structure => out.push(TaskSample {
                image: image.clone(),
                target: encode_structure(vocab, &ann.structure_tokens)?
                    .payload()
                    .to_vec(),
            }),
            Task::Bbox => {
                if image.width() != image.height() {
                    return Err(Error::InvalidArgument(format!(
                        "sample {i}: box coordinates need a square image"
                    )));
                }
                out.push(TaskSample {
                    image: image.clone(),
                    target: serialize_bboxes(&ann.bboxes, image.width() as u32)?
                        .payload()
                        .to_vec(),
                })
            }
            Task::Content => {
                if ann.bboxes.len() != ann.contents.len() {
                    return Err(Error::CountMismatch {
                        placeholders: ann.bboxes.len(),
                        contents: ann.contents.len(),
                    });
                }
                for (b, text) in ann.bboxes.iter().zip(&ann.contents) {
                    out.push(TaskSample {
                        image: crop(image, b, content_size.0, content_size.1).image,
                        target: encode_content(vocab, text)?.payload().to_vec(),
                    });
                }
            }
        }
    }
    Ok(out)
}

// ------------------------------------------------------------------- infer

/// Anomalies met during inference; none of them abort the pipeline.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct InferenceFlags {
    pub structure_truncated: bool,
    /// Grammar error of the decoded structure, if any.
    pub malformed_structure: Option<String>,
    pub bbox_truncated: bool,
    pub degenerate_boxes: Vec<usize>,
    /// Non-coordinate ids and dangling coordinates in the box sequence.
    pub invalid_bbox_tokens: usize,
    pub bbox_remainder: usize,
    /// `(non-empty cells, boxes)` when they differ.
    pub count_mismatch: Option<(usize, usize)>,
    pub clamped_crops: Vec<usize>,
    pub empty_crops: Vec<usize>,
    pub truncated_contents: Vec<usize>,
}

impl InferenceFlags {
    pub fn any(&self) -> bool {
        *self != InferenceFlags::default()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct InferenceResult {
    pub structure_tokens: Vec<String>,
    pub bboxes: Vec<BBox>,
    /// Mean probability of each box's four coordinate tokens.
    pub bbox_scores: Vec<f32>,
    pub contents: Vec<String>,
    /// Absent when the structure is malformed.
    pub html: Option<String>,
    pub flags: InferenceFlags,
}

/// The three task models run in sequence.
#[derive(Clone, Debug)]
pub struct Pipeline {
    pub structure: TaskModel,
    pub bbox: TaskModel,
    pub content: TaskModel,
}

fn box_scores(decoded: &Decoded, image_size: u32) -> Vec<f32> {
    let mut scores = Vec::new();
    let mut group = Vec::with_capacity(4);
    for (k, &id) in decoded.seq.ids.iter().enumerate().skip(1) {
        if id == Vocab::EOS {
            break;
        }
        if id_to_coord(id, image_size).is_some() {
            group.push(decoded.probs[k - 1]);
            if group.len() == 4 {
                scores.push(group.iter().sum::<f32>() / 4.0);
                group.clear();
            }
        }
    }
    scores
}

impl Pipeline {
    pub fn new(structure: TaskModel, bbox: TaskModel, content: TaskModel) -> Result<Self> {
        for (m, t) in [
            (&structure, Task::Structure),
            (&bbox, Task::Bbox),
            (&content, Task::Content),
        ] {
            if m.task() != t {
                return Err(Error::InvalidArgument(format!(
                    "expected a {} model, got {}",
                    t.name(),
                    m.task().name()
                )));
            }
        }
        let (se, be) = (&structure.config.encoder, &bbox.config.encoder);
        if (se.image_height, se.image_width) != (be.image_height, be.image_width) {
            return Err(Error::InvalidArgument(
                "structure and bbox models expect different image sizes".into(),
            ));
        }
        if be.image_height != be.image_width
            || bbox.vocab.len() != build_bbox_vocab(be.image_width as u32).len()
        {
            return Err(Error::InvalidArgument(
                "bbox vocabulary does not match the square input size".into(),
            ));
        }
        Ok(Pipeline {
            structure,
            bbox,
            content,
        })
    }

    /// Input size (height, width) of the table models.
    pub fn image_size(&self) -> (usize, usize) {
        let e = &self.structure.config.encoder;
        (e.image_height, e.image_width)
    }

    /// Structure, then boxes, then content of every box.
    pub fn infer(&self, image: &RasterImage) -> Result<InferenceResult> {
        if (image.height(), image.width()) != self.image_size() {
            return Err(Error::shape(
                "infer",
                format!(
                    "image {}x{} but models expect {:?}",
                    image.height(),
                    image.width(),
                    self.image_size()
                ),
            ));
        }
        let mut flags = InferenceFlags::default();
        let s = self
            .structure
            .greedy_decode(image, self.structure.config.max_len)?;
        flags.structure_truncated = s.truncated;
        let structure_tokens = decode_structure(&self.structure.vocab, &s.seq.ids);
        let n_cells = match parse_grid(&structure_tokens) {
            Ok(_) => Some(codec::count_filled(&structure_tokens)),
            Err(issues) => {
                flags.malformed_structure = Some(format!("{:?}", issues[0]));
                None
            }
        };

        let size = image.width() as u32;
        let b = self.bbox.greedy_decode(image, self.bbox.config.max_len)?;
        flags.bbox_truncated = b.truncated;
        let payload_end = b
            .seq
            .ids
            .iter()
            .position(|&i| i == Vocab::EOS)
            .unwrap_or(b.seq.ids.len());
        let db = deserialize_bboxes(&b.seq.ids[..payload_end], size);
        flags.degenerate_boxes = db.degenerate;
        flags.invalid_bbox_tokens = db.invalid_tokens;
        flags.bbox_remainder = db.remainder;
        let bboxes = db.boxes;
        let bbox_scores = box_scores(&b, size);

        let ce = &self.content.config.encoder;
        let crops: Vec<Crop> = bboxes
            .iter()
            .map(|bb| crop(image, bb, ce.image_height, ce.image_width))
            .collect();
        for (i, c) in crops.iter().enumerate() {
            if c.clamped {
                flags.clamped_crops.push(i);
            }
            if c.empty {
                flags.empty_crops.push(i);
            }
        }
        let refs: Vec<&RasterImage> = crops.iter().map(|c| &c.image).collect();
        let mut contents = Vec::with_capacity(refs.len());
        const CHUNK: usize = 64;
        for (ci, chunk) in refs.chunks(CHUNK).enumerate() {
            for (j, d) in self
                .content
                .greedy_decode_batch(chunk, self.content.config.max_len)?
                .into_iter()
                .enumerate()
            {
                if d.truncated {
                    flags.truncated_contents.push(ci * CHUNK + j);
                }
                contents.push(decode_content(&self.content.vocab, &d.seq.ids));
            }
        }

        let html = match n_cells {
            Some(n) if n == contents.len() => Some(merge_html(&structure_tokens, &contents)?),
            Some(n) => {
                flags.count_mismatch = Some((n, contents.len()));
                Some(merge_prefix(&structure_tokens, &contents))
            }
            None => None,
        };
        Ok(InferenceResult {
            structure_tokens,
            bboxes,
            bbox_scores,
            contents,
            html,
            flags,
        })
    }
}

// -------------------------------------------------------------------- lint

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Side {
    Left,
    Top,
    Right,
    Bottom,
    /// `x_min >= x_max` or `y_min >= y_max`.
    Inverted,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OutOfBounds {
    pub index: usize,
    pub sides: Vec<Side>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Overlap {
    pub a: usize,
    pub b: usize,
    pub iou: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountMismatch {
    pub boxes: usize,
    pub contents: usize,
    /// Non-empty cells of the structure, when it parses.
    pub cells: Option<usize>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Findings {
    pub out_of_bounds: Vec<OutOfBounds>,
    pub overlaps: Vec<Overlap>,
    pub count_mismatch: Option<CountMismatch>,
}

impl Findings {
    pub fn is_clean(&self) -> bool {
        self.out_of_bounds.is_empty() && self.overlaps.is_empty() && self.count_mismatch.is_none()
    }
}

/// Check one annotation against its image size.
pub fn lint_annotation(ann: &Annotation, image_w: f32, image_h: f32, theta: f64) -> Findings {
    let mut f = Findings::default();
    for (index, b) in ann.bboxes.iter().enumerate() {
        let mut sides = Vec::new();
        if b.x_min.is_nan() || b.x_min < 0.0 {
            sides.push(Side::Left);
        }
        if b.y_min.is_nan() || b.y_min < 0.0 {
            sides.push(Side::Top);
        }
        if b.x_max.is_nan() || b.x_max > image_w {
            sides.push(Side::Right);
        }
        if b.y_max.is_nan() || b.y_max > image_h {
            sides.push(Side::Bottom);
        }
        if !(b.x_min < b.x_max && b.y_min < b.y_max) {
            sides.push(Side::Inverted);
        }
        if !sides.is_empty() {
            f.out_of_bounds.push(OutOfBounds { index, sides });
        }
    }
    for a in 0..ann.bboxes.len() {
        for b in a + 1..ann.bboxes.len() {
            let v = iou(&ann.bboxes[a], &ann.bboxes[b]);
            if v > theta {
                f.overlaps.push(Overlap { a, b, iou: v });
            }
        }
    }
    let cells = parse_grid(&ann.structure_tokens)
        .ok()
        .map(|_| codec::count_filled(&ann.structure_tokens));
    let (nb, nc) = (ann.bboxes.len(), ann.contents.len());
    if nb != nc || cells.is_some_and(|n| n != nb) {
        f.count_mismatch = Some(CountMismatch {
            boxes: nb,
            contents: nc,
            cells,
        });
    }
    f
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LintEntry {
    /// 0-based line index in the annotation file.
    pub index: usize,
    pub findings: Findings,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LintReport {
    /// Annotations read successfully.
    pub total: usize,
    /// Annotations with at least one finding.
    pub affected: usize,
    pub fraction: f64,
    pub theta: f64,
    /// Annotations with findings, in file order.
    pub entries: Vec<LintEntry>,
    /// `(line index, error)` for lines that could not be checked.
    pub unreadable: Vec<(usize, String)>,
}

impl LintReport {
    pub fn affected_indices(&self) -> BTreeSet<usize> {
        self.entries.iter().map(|e| e.index).collect()
    }
}

fn ppm_size(path: &Path) -> Result<(usize, usize)> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = std::io::BufReader::new(f);
    let mut header = Vec::new();
    let mut line = String::new();
    while header.len() < 3 {
        line.clear();
        if r.read_line(&mut line).map_err(|e| Error::io(path, e))? == 0 {
            return Err(Error::InvalidArgument(format!(
                "{}: truncated ppm header",
                path.display()
            )));
        }
        let content = line.split('#').next().unwrap_or("");
        header.extend(content.split_whitespace().map(str::to_string));
    }
    let num = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| Error::InvalidArgument(format!("{}: bad ppm header", path.display())))
    };
    if header[0] != "P6" {
        return Err(Error::InvalidArgument(format!(
            "{}: not a P6 ppm",
            path.display()
        )));
    }
    Ok((num(&header[1])?, num(&header[2])?))
}

/// Lint every annotation of a corpus (directory or JSONL file). Image sizes
/// come from the referenced image headers.
pub fn lint_corpus(path: impl AsRef<Path>, theta: f64) -> Result<LintReport> {
    let path = path.as_ref();
    let jsonl: PathBuf = if path.is_dir() {
        path.join(ANNOTATIONS_FILE)
    } else {
        path.to_path_buf()
    };
    let root = jsonl.parent().map(Path::to_path_buf).unwrap_or_default();
    let text = std::fs::read_to_string(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut report = LintReport {
        total: 0,
        affected: 0,
        fraction: 0.0,
        theta,
        entries: Vec::new(),
        unreadable: Vec::new(),
    };
    for (index, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let checked = serde_json::from_str::<SampleRecord>(line)
            .map_err(Error::from)
            .and_then(|rec| ppm_size(&root.join(&rec.image_path)).map(|size| (rec, size)));
        match checked {
            Ok((rec, (w, h))) => {
                report.total += 1;
                let findings = lint_annotation(&rec.annotation(), w as f32, h as f32, theta);
                if !findings.is_clean() {
                    report.affected += 1;
                    report.entries.push(LintEntry { index, findings });
                }
            }
            Err(e) => report.unreadable.push((index, e.to_string())),
        }
    }
    report.fraction = if report.total == 0 {
        0.0
    } else {
        report.affected as f64 / report.total as f64
    };
    Ok(report)
}

// -------------------------------------------------------------------- eval

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleScores {
    pub steds: f64,
    pub teds: f64,
    /// Relation F1 at each weighted-F1 threshold.
    pub f1: Vec<(f64, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub per_sample: Vec<SampleScores>,
    pub steds: f64,
    pub teds: f64,
    pub ap50: f64,
    pub ap75: f64,
    pub map: f64,
    pub f1_at_06: f64,
    pub wf1: f64,
}

fn gt_html(ann: &Annotation) -> Result<String> {
    merge_html(&ann.structure_tokens, &ann.contents)
}

fn relations(tokens: &[String]) -> BTreeSet<metrics::AdjacencyRelation> {
    parse_grid(tokens)
        .map(|g| metrics::car_relations(&g))
        .unwrap_or_default()
}

/// Score predictions against groundtruth annotations, sample by sample.
pub fn evaluate(preds: &[InferenceResult], gts: &[Annotation]) -> Result<EvalReport> {
    if preds.len() != gts.len() || gts.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "{} predictions for {} groundtruths",
            preds.len(),
            gts.len()
        )));
    }
    let mut per_sample = Vec::with_capacity(gts.len());
    let (mut pd, mut gd) = (DetectionSet::default(), DetectionSet::default());
    for (i, (p, g)) in preds.iter().zip(gts).enumerate() {
        let gh = gt_html(g)?;
        let ph = p.html.clone().unwrap_or_default();
        let (gr, pr) = (
            relations(&g.structure_tokens),
            relations(&p.structure_tokens),
        );
        let f1 = WF1_THRESHOLDS
            .iter()
            .map(|&t| {
                Ok((
                    t,
                    metrics::car_f1_with_relations(&p.bboxes, &pr, &g.bboxes, &gr, t)?.f1,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        per_sample.push(SampleScores {
            steds: metrics::teds(&ph, &gh, true),
            teds: metrics::teds(&ph, &gh, false),
            f1,
        });
        for b in &g.bboxes {
            gd.push(i, *b, None);
        }
        for (k, b) in p.bboxes.iter().enumerate() {
            let score = p.bbox_scores.get(k).copied().unwrap_or(0.0).clamp(0.0, 1.0);
            pd.push(i, *b, Some(score));
        }
    }
    let n = per_sample.len() as f64;
    let mean = |f: &dyn Fn(&SampleScores) -> f64| per_sample.iter().map(f).sum::<f64>() / n;
    let f1_mean: Vec<(f64, f64)> = WF1_THRESHOLDS
        .iter()
        .enumerate()
        .map(|(k, &t)| (t, mean(&|s: &SampleScores| s.f1[k].1)))
        .collect();
    let ap = metrics::coco_ap(&pd, &gd, &metrics::coco_thresholds())?;
    Ok(EvalReport {
        steds: mean(&|s| s.steds),
        teds: mean(&|s| s.teds),
        ap50: ap.ap50,
        ap75: ap.ap75,
        map: ap.map,
        f1_at_06: f1_mean[0].1,
        wf1: metrics::wavg_f1(&f1_mean)?,
        per_sample,
    })
}

/// S-TEDS of decoded structure token strings against groundtruth tokens,
/// ignoring content.
pub fn structure_teds(pred_tokens: &[String], gt_tokens: &[String]) -> f64 {
    let blank = |t: &[String]| vec![String::new(); codec::count_filled(t)];
    let gh = merge_prefix(gt_tokens, &blank(gt_tokens));
    if parse_grid(pred_tokens).is_err() {
        return 0.0;
    }
    metrics::teds(&merge_prefix(pred_tokens, &blank(pred_tokens)), &gh, true)
}

/// Decode the structure of `image` and score it against `gt_tokens`.
pub fn structure_score(
    model: &TaskModel,
    image: &RasterImage,
    gt_tokens: &[String],
) -> Result<f64> {
    let d = model.greedy_decode(image, model.config.max_len)?;
    Ok(structure_teds(
        &decode_structure(&model.vocab, &d.seq.ids),
        gt_tokens,
    ))
}

/// The structure vocabulary, for callers that only need the table models.
pub fn structure_vocab() -> Vocab {
    build_structure_vocab()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ann(bboxes: Vec<BBox>, contents: &[&str]) -> Annotation {
        let mut tokens = vec!["<tbody>".to_string(), "<tr>".to_string()];
        tokens.extend(contents.iter().map(|_| "<td>[]</td>".to_string()));
        tokens.extend(["</tr>".to_string(), "</tbody>".to_string()]);
        Annotation {
            structure_tokens: tokens,
            bboxes,
            contents: contents.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn published_bad_box_is_out_of_bounds() {
        let a = ann(vec![BBox::new(-4.6, 278.6, 19.5, 292.4)], &["x"]);
        let f = lint_annotation(&a, 448.0, 448.0, OVERLAP_THRESHOLD);
        assert_eq!(
            f.out_of_bounds,
            vec![OutOfBounds {
                index: 0,
                sides: vec![Side::Left]
            }]
        );
    }

    #[test]
    fn duplicate_box_overlaps_fully() {
        let b = BBox::new(1.0, 1.0, 5.0, 5.0);
        let f = lint_annotation(&ann(vec![b, b], &["a", "b"]), 10.0, 10.0, OVERLAP_THRESHOLD);
        assert_eq!(
            f.overlaps,
            vec![Overlap {
                a: 0,
                b: 1,
                iou: 1.0
            }]
        );
        assert!(f.out_of_bounds.is_empty() && f.count_mismatch.is_none());
    }

    #[test]
    fn touching_boxes_are_clean() {
        let f = lint_annotation(
            &ann(
                vec![
                    BBox::new(0.0, 0.0, 5.0, 5.0),
                    BBox::new(5.0, 0.0, 10.0, 5.0),
                ],
                &["a", "b"],
            ),
            10.0,
            10.0,
            OVERLAP_THRESHOLD,
        );
        assert!(f.is_clean());
    }

    #[test]
    fn count_mismatch_reported() {
        let mut a = ann(vec![BBox::new(0.0, 0.0, 5.0, 5.0)], &["a"]);
        a.contents.push("b".into());
        let f = lint_annotation(&a, 10.0, 10.0, OVERLAP_THRESHOLD);
        assert_eq!(
            f.count_mismatch,
            Some(CountMismatch {
                boxes: 1,
                contents: 2,
                cells: Some(1)
            })
        );
    }

    #[test]
    fn crop_band_is_centered() {
        // A 10x40 dark region with a one-pixel white frame.
        let mut img = RasterImage::filled(20, 60, &[1.0, 1.0, 1.0]);
        img.fill_rect(11, 6, 49, 14, &[0.0, 0.0, 0.0]);
        let c = crop(&img, &BBox::new(10.0, 5.0, 50.0, 15.0), 32, 32);
        assert!(!c.clamped && !c.empty);
        for y in 0..32 {
            let v = c.image.pixel(y, 16)[0];
            if !(12..20).contains(&y) {
                assert_eq!(v, 1.0, "padding row {y}");
            } else if (13..19).contains(&y) {
                assert!(v < 0.5, "band row {y}");
            }
        }
    }

    #[test]
    fn crop_whole_image_and_clamping() {
        let img = RasterImage::filled(16, 16, &[0.2, 0.4, 0.6]);
        let c = crop(&img, &BBox::new(0.0, 0.0, 16.0, 16.0), 32, 32);
        assert_eq!(c.image, img.resize(32, 32));
        let c = crop(&img, &BBox::new(-3.0, 2.0, 8.0, 20.0), 8, 8);
        assert!(c.clamped && !c.empty);
        let c = crop(&img, &BBox::new(20.0, 20.0, 30.0, 30.0), 8, 8);
        assert!(c.clamped && c.empty);
        assert_eq!((c.image.height(), c.image.width()), (8, 8));
    }

    #[test]
    fn structure_teds_ignores_content() {
        let t: Vec<String> = [
            "<tbody>",
            "<tr>",
            "<td>[]</td>",
            "<td></td>",
            "</tr>",
            "</tbody>",
        ]
        .map(String::from)
        .to_vec();
        assert_eq!(structure_teds(&t, &t), 1.0);
        let bad: Vec<String> = ["<tbody>", "<tr>"].map(String::from).to_vec();
        assert_eq!(structure_teds(&bad, &t), 0.0);
    }
}
