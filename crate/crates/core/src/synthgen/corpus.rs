//! On-disk corpora: PPM images, a JSONL annotation file and a manifest.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::annotation::Annotation;
use super::render::{render, StyleParams};
use super::spec::{sample_spec, GenConfig, Style, TableSpec};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::image::RasterImage;

pub const ANNOTATIONS_FILE: &str = "annotations.jsonl";
pub const MANIFEST_FILE: &str = "manifest.json";
const IMAGE_DIR: &str = "images";

/// splitmix64 finalizer over the corpus seed and sample index.
pub fn child_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed.wrapping_add(index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// One generated table held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub image: RasterImage,
    pub annotation: Annotation,
    pub spec: TableSpec,
    pub style_params: StyleParams,
    pub truncated: usize,
}

pub fn generate_sample(cfg: &GenConfig, seed: u64, index: usize) -> Result<Sample> {
    let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed, index as u64));
    let spec = sample_spec(&mut rng, cfg)?;
    let r = render(&spec, cfg.image_size, &mut rng)?;
    Ok(Sample {
        image: r.image,
        annotation: r.annotation,
        spec: r.spec,
        style_params: r.style,
        truncated: r.truncated.len(),
    })
}

pub fn generate_samples(cfg: &GenConfig, seed: u64, count: usize) -> Result<Vec<Sample>> {
    (0..count).map(|i| generate_sample(cfg, seed, i)).collect()
}

/// Annotation faults deliberately written into a corpus.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultKind {
    /// One box pushed past the left or bottom image edge.
    OutOfBounds,
    /// A second box for one cell, offset by one pixel.
    Overlap,
    /// One cell box split in two, as word-level annotation would.
    WordWise,
    /// An extra box around text outside the table.
    UnrelatedText,
}

/// Exact number of samples receiving each fault; the sets are disjoint.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct FaultPlan {
    pub out_of_bounds: usize,
    pub overlap: usize,
    pub word_wise: usize,
    pub unrelated_text: usize,
}

impl FaultPlan {
    pub fn total(&self) -> usize {
        self.out_of_bounds + self.overlap + self.word_wise + self.unrelated_text
    }

    /// Assign fault kinds to sample indices.
    fn assign(&self, count: usize, seed: u64) -> Result<BTreeMap<usize, FaultKind>> {
        if self.total() > count {
            return Err(Error::InvalidArgument(format!(
                "fault plan needs {} samples but corpus has {count}",
                self.total()
            )));
        }
        let mut idx: Vec<usize> = (0..count).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(child_seed(seed, u64::MAX)));
        let kinds = [
            (FaultKind::OutOfBounds, self.out_of_bounds),
            (FaultKind::Overlap, self.overlap),
            (FaultKind::WordWise, self.word_wise),
            (FaultKind::UnrelatedText, self.unrelated_text),
        ];
        let mut out = BTreeMap::new();
        let mut it = idx.into_iter();
        for (kind, n) in kinds {
            for i in it.by_ref().take(n) {
                out.insert(i, kind);
            }
        }
        Ok(out)
    }
}

fn inject(kind: FaultKind, a: &mut Annotation, size: f32, rng: &mut impl Rng) {
    match kind {
        FaultKind::OutOfBounds => {
            if rng.random_bool(0.5) {
                let i = (0..a.bboxes.len())
                    .min_by(|&p, &q| a.bboxes[p].x_min.total_cmp(&a.bboxes[q].x_min))
                    .unwrap();
                a.bboxes[i].x_min = -rng.random_range(0.5f32..6.0);
            } else {
                let i = (0..a.bboxes.len())
                    .max_by(|&p, &q| a.bboxes[p].y_max.total_cmp(&a.bboxes[q].y_max))
                    .unwrap();
                a.bboxes[i].y_max = size + rng.random_range(0.5f32..6.0);
            }
        }
        FaultKind::Overlap => {
            let i = rng.random_range(0..a.bboxes.len());
            let b = a.bboxes[i].translate(1.0, 0.0);
            let c = a.contents[i].clone();
            a.bboxes.insert(i + 1, b);
            a.contents.insert(i + 1, c);
        }
        FaultKind::WordWise => {
            let i = rng.random_range(0..a.bboxes.len());
            let b = a.bboxes[i];
            let mid = ((b.x_min + b.x_max) / 2.0).floor();
            a.bboxes[i].x_max = mid;
            a.bboxes
                .insert(i + 1, BBox::new(mid + 1.0, b.y_min, b.x_max, b.y_max));
        }
        FaultKind::UnrelatedText => {
            let s = (size / 112.0).max(1.0).floor();
            a.bboxes
                .push(BBox::new(s, size - 3.0 * s, 3.0 * s, size - s));
        }
    }
}

/// One JSONL line. `image_path` is relative to the annotation file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub image_path: String,
    pub structure_tokens: Vec<String>,
    pub bboxes: Vec<BBox>,
    pub contents: Vec<String>,
    pub style: Style,
}

impl SampleRecord {
    pub fn annotation(&self) -> Annotation {
        Annotation {
            structure_tokens: self.structure_tokens.clone(),
            bboxes: self.bboxes.clone(),
            contents: self.contents.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub count: usize,
    pub seed: u64,
    pub config: GenConfig,
    pub per_style: BTreeMap<Style, usize>,
    pub faults: FaultPlan,
    /// Sample indices per injected fault kind, ascending.
    pub injected: BTreeMap<FaultKind, Vec<usize>>,
    pub truncated_cells: usize,
}

/// Generate `count` samples into `out_dir`. Sample `i` depends only on
/// `(seed, i)`, so output is reproducible byte for byte.
pub fn make_corpus(
    cfg: &GenConfig,
    seed: u64,
    count: usize,
    faults: &FaultPlan,
    out_dir: &Path,
) -> Result<Manifest> {
    cfg.validate()?;
    let plan = faults.assign(count, seed)?;
    let img_dir = out_dir.join(IMAGE_DIR);
    fs::create_dir_all(&img_dir).map_err(|e| Error::io(&img_dir, e))?;
    let jsonl = out_dir.join(ANNOTATIONS_FILE);
    let file = fs::File::create(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
    let mut w = BufWriter::new(file);

    let mut manifest = Manifest {
        count,
        seed,
        config: cfg.clone(),
        per_style: Style::ALL.iter().map(|&s| (s, 0)).collect(),
        faults: faults.clone(),
        injected: BTreeMap::new(),
        truncated_cells: 0,
    };
    for i in 0..count {
        let result = (|| -> Result<()> {
            let sample = generate_sample(cfg, seed, i)?;
            let rel = format!("{IMAGE_DIR}/{i:06}.ppm");
            sample.image.save_ppm(out_dir.join(&rel))?;
            let mut ann = sample.annotation;
            if let Some(&kind) = plan.get(&i) {
                let mut rng = ChaCha8Rng::seed_from_u64(child_seed(seed ^ 0xFA17, i as u64));
                inject(kind, &mut ann, cfg.image_size as f32, &mut rng);
                manifest.injected.entry(kind).or_default().push(i);
            }
            *manifest.per_style.get_mut(&sample.spec.style).unwrap() += 1;
            manifest.truncated_cells += sample.truncated;
            let rec = SampleRecord {
                image_path: rel,
                structure_tokens: ann.structure_tokens,
                bboxes: ann.bboxes,
                contents: ann.contents,
                style: sample.spec.style,
            };
            serde_json::to_writer(&mut w, &rec)?;
            w.write_all(b"\n").map_err(|e| Error::io(&jsonl, e))
        })();
        if let Err(e) = result {
            log::warn!(
                "corpus generation aborted at sample {i}; {i} samples written to {}",
                out_dir.display()
            );
            return Err(e);
        }
    }
    w.flush().map_err(|e| Error::io(&jsonl, e))?;
    let mpath = out_dir.join(MANIFEST_FILE);
    fs::write(&mpath, serde_json::to_string_pretty(&manifest)?)
        .map_err(|e| Error::io(&mpath, e))?;
    log::info!("wrote {count} samples to {}", out_dir.display());
    Ok(manifest)
}

/// A corpus read back from disk.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub root: PathBuf,
    pub records: Vec<SampleRecord>,
}

impl Corpus {
    /// Load from a corpus directory or directly from its JSONL file.
    pub fn load(path: impl AsRef<Path>) -> Result<Corpus> {
        let path = path.as_ref();
        let jsonl = if path.is_dir() {
            path.join(ANNOTATIONS_FILE)
        } else {
            path.to_path_buf()
        };
        let root = jsonl.parent().map(Path::to_path_buf).unwrap_or_default();
        let f = fs::File::open(&jsonl).map_err(|e| Error::io(&jsonl, e))?;
        let mut records = Vec::new();
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(&jsonl, e))?;
            if !line.trim().is_empty() {
                records.push(serde_json::from_str(&line)?);
            }
        }
        Ok(Corpus { root, records })
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn image(&self, i: usize) -> Result<RasterImage> {
        RasterImage::load_ppm(self.root.join(&self.records[i].image_path))
    }
}
