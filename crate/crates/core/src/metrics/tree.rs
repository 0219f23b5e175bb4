use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rooted ordered tree.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tree<T> {
    pub label: T,
    pub children: Vec<Tree<T>>,
}

impl<T> Tree<T> {
    pub fn leaf(label: T) -> Self {
        Tree {
            label,
            children: Vec::new(),
        }
    }

    pub fn new(label: T, children: Vec<Tree<T>>) -> Self {
        Tree { label, children }
    }

    /// Number of nodes.
    pub fn size(&self) -> usize {
        1 + self.children.iter().map(Tree::size).sum::<usize>()
    }

    /// Labels in preorder.
    pub fn preorder(&self) -> Vec<&T> {
        let mut out = Vec::with_capacity(self.size());
        fn walk<'a, T>(t: &'a Tree<T>, out: &mut Vec<&'a T>) {
            out.push(&t.label);
            for c in &t.children {
                walk(c, out);
            }
        }
        walk(self, &mut out);
        out
    }
}

/// Node of a parsed HTML table.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct HtmlNode {
    pub tag: String,
    pub rowspan: u32,
    pub colspan: u32,
    /// Cell text; empty for non-cell nodes.
    pub content: String,
}

impl HtmlNode {
    pub fn new(tag: &str) -> Self {
        HtmlNode {
            tag: tag.to_string(),
            rowspan: 1,
            colspan: 1,
            content: String::new(),
        }
    }

    pub fn cell(content: &str) -> Self {
        HtmlNode {
            content: content.to_string(),
            ..HtmlNode::new("td")
        }
    }

    pub fn is_cell(&self) -> bool {
        self.tag == "td" || self.tag == "th"
    }
}

pub type HtmlTree = Tree<HtmlNode>;

const TAGS: [&str; 6] = ["table", "thead", "tbody", "tr", "td", "th"];

fn parse_err(pos: usize, msg: impl Into<String>) -> Error {
    Error::HtmlParse {
        pos,
        msg: msg.into(),
    }
}

fn unescape(raw: &str, pos: usize) -> Result<String> {
    let mut out = String::with_capacity(raw.len());
    let mut rest = raw;
    while let Some(i) = rest.find('&') {
        out.push_str(&rest[..i]);
        let tail = &rest[i..];
        let end = tail
            .find(';')
            .ok_or_else(|| parse_err(pos + i, "unterminated entity"))?;
        out.push(match &tail[..=end] {
            "&amp;" => '&',
            "&lt;" => '<',
            "&gt;" => '>',
            "&quot;" => '"',
            "&#39;" | "&apos;" => '\'',
            other => return Err(parse_err(pos + i, format!("unknown entity {other}"))),
        });
        rest = &tail[end + 1..];
    }
    out.push_str(rest);
    Ok(out)
}

fn parse_attrs(body: &str, pos: usize, node: &mut HtmlNode) -> Result<()> {
    for attr in body.split_whitespace() {
        let (name, value) = attr
            .split_once('=')
            .ok_or_else(|| parse_err(pos, format!("attribute without value: {attr}")))?;
        let value = value.trim_matches('"');
        let n: u32 = value
            .parse()
            .ok()
            .filter(|&n| n >= 1)
            .ok_or_else(|| parse_err(pos, format!("bad {name} value {value:?}")))?;
        match name {
            "rowspan" => node.rowspan = n,
            "colspan" => node.colspan = n,
            _ => return Err(parse_err(pos, format!("unknown attribute {name}"))),
        }
    }
    Ok(())
}

/// Parse a table built from the codec's tag inventory.
pub fn html_to_tree(html: &str) -> Result<HtmlTree> {
    let mut stack: Vec<HtmlTree> = Vec::new();
    let mut root: Option<HtmlTree> = None;
    let mut pos = 0;
    while pos < html.len() {
        let rest = &html[pos..];
        if !rest.starts_with('<') {
            let end = rest.find('<').unwrap_or(rest.len());
            let text = &rest[..end];
            match stack.last_mut() {
                Some(top) if top.label.is_cell() => {
                    top.label.content.push_str(&unescape(text, pos)?)
                }
                _ if text.trim().is_empty() => {}
                _ => return Err(parse_err(pos, "text outside a cell")),
            }
            pos += end;
            continue;
        }
        let close = rest
            .find('>')
            .ok_or_else(|| parse_err(pos, "unterminated tag"))?;
        let inner = &rest[1..close];
        if let Some(name) = inner.strip_prefix('/') {
            let node = stack
                .pop()
                .ok_or_else(|| parse_err(pos, format!("unmatched </{name}>")))?;
            if node.label.tag != name.trim() {
                return Err(parse_err(
                    pos,
                    format!("</{name}> closes <{}>", node.label.tag),
                ));
            }
            match stack.last_mut() {
                Some(parent) => parent.children.push(node),
                None => root = Some(node),
            }
        } else {
            if root.is_some() {
                return Err(parse_err(pos, "content after the table"));
            }
            let (name, attrs) = inner.split_once(char::is_whitespace).unwrap_or((inner, ""));
            if !TAGS.contains(&name) {
                return Err(parse_err(pos, format!("unknown tag <{name}>")));
            }
            match stack.last() {
                None if name != "table" => return Err(parse_err(pos, "root must be <table>")),
                Some(top) if top.label.is_cell() => {
                    return Err(parse_err(pos, "tag inside a cell"))
                }
                _ => {}
            }
            let mut node = HtmlNode::new(name);
            parse_attrs(attrs, pos, &mut node)?;
            stack.push(Tree::leaf(node));
        }
        pos += close + 1;
    }
    if let Some(open) = stack.last() {
        return Err(parse_err(
            html.len(),
            format!("unclosed <{}>", open.label.tag),
        ));
    }
    root.ok_or_else(|| parse_err(0, "no table"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_cell_chain() {
        let t = html_to_tree("<table><tbody><tr><td>7</td></tr></tbody></table>").unwrap();
        assert_eq!(t.size(), 4);
        let tags: Vec<&str> = t.preorder().iter().map(|n| n.tag.as_str()).collect();
        assert_eq!(tags, ["table", "tbody", "tr", "td"]);
        assert_eq!(t.children[0].children[0].children[0].label.content, "7");
    }

    #[test]
    fn spans_and_entities() {
        let t = html_to_tree(
            "<table><tr><td rowspan=\"3\" colspan=\"2\">a&amp;b &lt;</td></tr></table>",
        )
        .unwrap();
        let td = &t.children[0].children[0].label;
        assert_eq!((td.rowspan, td.colspan), (3, 2));
        assert_eq!(td.content, "a&b <");
    }

    #[test]
    fn unbalanced_reports_position() {
        match html_to_tree("<table><tr><td>x</tr></table>") {
            Err(Error::HtmlParse { pos, .. }) => assert_eq!(pos, 16),
            other => panic!("{other:?}"),
        }
        assert!(html_to_tree("<table><tr>").is_err());
        assert!(html_to_tree("<tr></tr>").is_err());
        assert!(html_to_tree("<table><td><td></td></td></table>").is_err());
        assert!(html_to_tree("<table><td rowspan=\"0\"></td></table>").is_err());
        assert!(html_to_tree("").is_err());
    }
}
