use super::structure::StructureToken;
use crate::error::{Error, Result};

pub(crate) fn escape(text: &str) -> String {
    let mut out = String::with_capacity(text.len());
    for c in text.chars() {
        match c {
            '&' => out.push_str("&amp;"),
            '<' => out.push_str("&lt;"),
            '>' => out.push_str("&gt;"),
            '"' => out.push_str("&quot;"),
            _ => out.push(c),
        }
    }
    out
}

/// Insert the i-th content into the i-th non-empty cell and wrap in
/// `<table>`. Spanning-cell fragments are reassembled into one `<td ...>`.
pub fn merge_html<S: AsRef<str>, C: AsRef<str>>(tokens: &[S], contents: &[C]) -> Result<String> {
    let placeholders = super::structure::count_filled(tokens);
    if placeholders != contents.len() {
        return Err(Error::CountMismatch {
            placeholders,
            contents: contents.len(),
        });
    }
    Ok(merge_prefix(tokens, contents))
}

/// Like [`merge_html`] but total: extra contents are ignored and missing
/// ones leave cells empty. Unknown tokens are dropped.
pub fn merge_prefix<S: AsRef<str>, C: AsRef<str>>(tokens: &[S], contents: &[C]) -> String {
    let mut html = String::from("<table>");
    let mut next = contents.iter();
    for raw in tokens {
        let Some(tok) = StructureToken::parse(raw.as_ref()) else {
            continue;
        };
        match tok {
            StructureToken::FilledCell => {
                html.push_str("<td>");
                if let Some(c) = next.next() {
                    html.push_str(&escape(c.as_ref()));
                }
                html.push_str("</td>");
            }
            StructureToken::SpanCloseFilled => {
                html.push('>');
                if let Some(c) = next.next() {
                    html.push_str(&escape(c.as_ref()));
                }
                html.push_str("</td>");
            }
            StructureToken::Rowspan(_) | StructureToken::Colspan(_) => {
                html.push(' ');
                html.push_str(&tok.to_string());
            }
            other => html.push_str(&other.to_string()),
        }
    }
    html.push_str("</table>");
    html
}
