//! Token codecs turning structure, cell boxes and cell content into
//! sequences, plus the final HTML merge.

pub mod bbox;
pub mod content;
pub mod html;
pub mod structure;
pub mod vocab;

pub use bbox::{
    build_bbox_vocab, coord_to_id, deserialize_bboxes, id_to_coord, quantize_bbox, quantize_coord,
    reading_order, serialize_bboxes, DecodedBoxes, QuantizedBox,
};
pub use content::{build_content_vocab, decode_content, default_content_vocab, encode_content};
pub use html::{merge_html, merge_prefix};
pub use structure::{
    build_structure_vocab, count_filled, parse_grid, validate_structure, GridCell, IssueKind,
    StructureIssue, StructureToken, TableGrid,
};
pub use vocab::{Task, TokenSeq, Vocab};

use crate::error::Result;

/// Encode structure tag strings as ids, framed by BOS/EOS.
pub fn encode_structure<S: AsRef<str>>(vocab: &Vocab, tokens: &[S]) -> Result<TokenSeq> {
    let ids: Vec<u32> = tokens
        .iter()
        .map(|t| vocab.encode_token(t.as_ref()))
        .collect();
    TokenSeq::framed(Task::Structure, &ids)
}

/// Payload ids back to tag strings; specials are dropped.
pub fn decode_structure(vocab: &Vocab, ids: &[u32]) -> Vec<String> {
    let seq = TokenSeq {
        ids: ids.to_vec(),
        task: Task::Structure,
    };
    seq.payload()
        .iter()
        .filter(|&&id| !Vocab::is_special(id))
        .filter_map(|&id| vocab.token(id).map(str::to_string))
        .collect()
}
