//! Synthetic table images with exact annotations.

pub mod annotation;
pub mod corpus;
pub mod font;
pub mod render;
pub mod spec;

pub use annotation::Annotation;
pub use corpus::{
    child_seed, generate_sample, generate_samples, make_corpus, Corpus, FaultKind, FaultPlan,
    Manifest, Sample, SampleRecord, ANNOTATIONS_FILE, MANIFEST_FILE,
};
pub use render::{render, Layout, Rendered, StyleParams};
pub use spec::{
    sample_spec, spec_to_structure_tokens, structure_strings, GenConfig, Span, Style, TableSpec,
};
