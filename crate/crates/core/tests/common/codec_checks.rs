//! Codec roundtrip and grammar checks over generated annotations.

use tabseq_core::codec::{
    build_structure_vocab, decode_content, decode_structure, default_content_vocab,
    deserialize_bboxes, encode_content, encode_structure, reading_order, serialize_bboxes,
    validate_structure,
};
use tabseq_core::synthgen::{generate_sample, GenConfig};

/// Roundtrip every codec on `count` generated annotations and run the
/// validator on each structure. Returns the failures.
pub fn roundtrip_failures(count: usize, seed: u64) -> Vec<String> {
    let cfg = GenConfig::default();
    let size = cfg.image_size as u32;
    let sv = build_structure_vocab();
    let cv = default_content_vocab();
    let mut fails = Vec::new();
    for i in 0..count {
        let ann = match generate_sample(&cfg, seed, i) {
            Ok(s) => s.annotation,
            Err(e) => {
                fails.push(format!("sample {i}: generation failed: {e}"));
                continue;
            }
        };
        if let Err(issues) = validate_structure(&ann.structure_tokens) {
            fails.push(format!(
                "sample {i}: validator rejected generator output: {issues:?}"
            ));
        }
        match encode_structure(&sv, &ann.structure_tokens) {
            Ok(seq) if decode_structure(&sv, &seq.ids) == ann.structure_tokens => {}
            Ok(_) => fails.push(format!("sample {i}: structure roundtrip differs")),
            Err(e) => fails.push(format!("sample {i}: structure encode failed: {e}")),
        }
        match serialize_bboxes(&ann.bboxes, size) {
            Ok(seq) => {
                let back = deserialize_bboxes(&seq.ids, size);
                let order = reading_order(&ann.bboxes);
                let ok = back.boxes.len() == order.len()
                    && back.degenerate.is_empty()
                    && back.remainder == 0
                    && back.invalid_tokens == 0
                    && order.iter().zip(&back.boxes).all(|(&k, b)| {
                        let (o, r) = (ann.bboxes[k].to_array(), b.to_array());
                        o.iter().zip(r).all(|(x, y)| (x - y).abs() <= 0.5)
                    });
                if !ok {
                    fails.push(format!("sample {i}: bbox roundtrip outside half a pixel"));
                }
            }
            Err(e) => fails.push(format!("sample {i}: bbox serialize failed: {e}")),
        }
        for (c, text) in ann.contents.iter().enumerate() {
            match encode_content(&cv, text) {
                Ok(seq) if decode_content(&cv, &seq.ids) == *text => {}
                Ok(_) => fails.push(format!("sample {i} cell {c}: content roundtrip differs")),
                Err(e) => fails.push(format!("sample {i} cell {c}: content encode failed: {e}")),
            }
        }
    }
    fails
}

/// Hand-built sequences the grammar must reject.
pub fn malformed_structures() -> Vec<(&'static str, Vec<&'static str>)> {
    vec![
        ("row at top level", vec!["<tr>", "<td></td>", "</tr>"]),
        (
            "unclosed body",
            vec!["<tbody>", "<tr>", "<td></td>", "</tr>"],
        ),
        (
            "unclosed row",
            vec!["<tbody>", "<tr>", "<td></td>", "</tbody>"],
        ),
        ("cell outside row", vec!["<tbody>", "<td></td>", "</tbody>"]),
        (
            "unknown th token",
            vec!["<tbody>", "<tr>", "<th></th>", "</tr>", "</tbody>"],
        ),
        (
            "span outside cell",
            vec!["<tbody>", "<tr>", "rowspan=\"2\"", "</tr>", "</tbody>"],
        ),
        (
            "duplicate rowspan",
            vec![
                "<tbody>",
                "<tr>",
                "<td",
                "rowspan=\"2\"",
                "rowspan=\"3\"",
                "></td>",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "duplicate colspan",
            vec![
                "<tbody>",
                "<tr>",
                "<td",
                "colspan=\"2\"",
                "colspan=\"2\"",
                ">[]</td>",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "spanning cell never closed",
            vec![
                "<tbody>",
                "<tr>",
                "<td",
                "colspan=\"2\"",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "cell close without open",
            vec!["<tbody>", "<tr>", "></td>", "</tr>", "</tbody>"],
        ),
        (
            "span of one",
            vec![
                "<tbody>",
                "<tr>",
                "<td",
                "rowspan=\"1\"",
                "></td>",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "span too large",
            vec![
                "<tbody>",
                "<tr>",
                "<td",
                "rowspan=\"20\"",
                "></td>",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "span with leading zero",
            vec![
                "<tbody>",
                "<tr>",
                "<td",
                "colspan=\"02\"",
                "></td>",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "nested body",
            vec![
                "<tbody>",
                "<tbody>",
                "<tr>",
                "<td></td>",
                "</tr>",
                "</tbody>",
                "</tbody>",
            ],
        ),
        (
            "head inside body",
            vec!["<tbody>", "<thead>", "</thead>", "</tbody>"],
        ),
        ("stray body close", vec!["</tbody>"]),
        ("stray row close", vec!["<tbody>", "</tr>", "</tbody>"]),
        (
            "nested row",
            vec![
                "<tbody>",
                "<tr>",
                "<tr>",
                "<td></td>",
                "</tr>",
                "</tr>",
                "</tbody>",
            ],
        ),
        (
            "sequence ends inside a cell",
            vec!["<tbody>", "<tr>", "<td"],
        ),
        (
            "table tag",
            vec![
                "<table>",
                "<tbody>",
                "<tr>",
                "<td></td>",
                "</tr>",
                "</tbody>",
                "</table>",
            ],
        ),
        (
            "empty token",
            vec!["<tbody>", "<tr>", "", "</tr>", "</tbody>"],
        ),
    ]
}

/// Names of malformed cases the validator wrongly accepts.
pub fn accepted_malformed() -> Vec<&'static str> {
    malformed_structures()
        .into_iter()
        .filter(|(_, toks)| validate_structure(toks).is_ok())
        .map(|(name, _)| name)
        .collect()
}
