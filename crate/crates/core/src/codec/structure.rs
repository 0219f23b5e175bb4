//! HTML structure tags as tokens, their grammar validator, and grid
//! reconstruction from a token sequence.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::vocab::Vocab;

pub const MIN_SPAN: u8 = 2;
pub const MAX_SPAN: u8 = 19;

/// One structure tag token.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum StructureToken {
    TheadOpen,
    TheadClose,
    TbodyOpen,
    TbodyClose,
    TrOpen,
    TrClose,
    /// `<td></td>`
    EmptyCell,
    /// `<td>[]</td>`
    FilledCell,
    /// `<td` opening a spanning cell
    SpanOpen,
    /// `></td>`
    SpanCloseEmpty,
    /// `>[]</td>`
    SpanCloseFilled,
    Rowspan(u8),
    Colspan(u8),
}

impl StructureToken {
    /// All tag tokens in vocabulary order.
    pub fn all() -> Vec<StructureToken> {
        use StructureToken::*;
        let mut v = vec![
            TheadOpen,
            TheadClose,
            TbodyOpen,
            TbodyClose,
            TrOpen,
            TrClose,
            EmptyCell,
            FilledCell,
            SpanOpen,
            SpanCloseEmpty,
            SpanCloseFilled,
        ];
        v.extend((MIN_SPAN..=MAX_SPAN).map(Rowspan));
        v.extend((MIN_SPAN..=MAX_SPAN).map(Colspan));
        v
    }

    pub fn parse(s: &str) -> Option<StructureToken> {
        use StructureToken::*;
        Some(match s {
            "<thead>" => TheadOpen,
            "</thead>" => TheadClose,
            "<tbody>" => TbodyOpen,
            "</tbody>" => TbodyClose,
            "<tr>" => TrOpen,
            "</tr>" => TrClose,
            "<td></td>" => EmptyCell,
            "<td>[]</td>" => FilledCell,
            "<td" => SpanOpen,
            "></td>" => SpanCloseEmpty,
            ">[]</td>" => SpanCloseFilled,
            _ => {
                let (kind, rest) = if let Some(r) = s.strip_prefix("rowspan=\"") {
                    (true, r)
                } else {
                    let r = s.strip_prefix("colspan=\"")?;
                    (false, r)
                };
                let digits = rest.strip_suffix('"')?;
                if digits.starts_with('0') {
                    return None;
                }
                let n: u8 = digits.parse().ok()?;
                if !(MIN_SPAN..=MAX_SPAN).contains(&n) {
                    return None;
                }
                if kind {
                    Rowspan(n)
                } else {
                    Colspan(n)
                }
            }
        })
    }

    /// A cell token whose content slot is non-empty.
    pub fn is_filled(self) -> bool {
        matches!(
            self,
            StructureToken::FilledCell | StructureToken::SpanCloseFilled
        )
    }

    /// Tokens that complete a cell.
    pub fn ends_cell(self) -> bool {
        matches!(
            self,
            StructureToken::EmptyCell
                | StructureToken::FilledCell
                | StructureToken::SpanCloseEmpty
                | StructureToken::SpanCloseFilled
        )
    }
}

impl fmt::Display for StructureToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        use StructureToken::*;
        match self {
            TheadOpen => f.write_str("<thead>"),
            TheadClose => f.write_str("</thead>"),
            TbodyOpen => f.write_str("<tbody>"),
            TbodyClose => f.write_str("</tbody>"),
            TrOpen => f.write_str("<tr>"),
            TrClose => f.write_str("</tr>"),
            EmptyCell => f.write_str("<td></td>"),
            FilledCell => f.write_str("<td>[]</td>"),
            SpanOpen => f.write_str("<td"),
            SpanCloseEmpty => f.write_str("></td>"),
            SpanCloseFilled => f.write_str(">[]</td>"),
            Rowspan(n) => write!(f, "rowspan=\"{n}\""),
            Colspan(n) => write!(f, "colspan=\"{n}\""),
        }
    }
}

/// The 51-entry structure vocabulary: 4 specials, 11 tags, 36 span attributes.
pub fn build_structure_vocab() -> Vocab {
    Vocab::with_specials(StructureToken::all().iter().map(|t| t.to_string()))
}

/// Count of non-empty cell tokens (`<td>[]</td>` and `>[]</td>`).
pub fn count_filled<S: AsRef<str>>(tokens: &[S]) -> usize {
    tokens
        .iter()
        .filter(|t| StructureToken::parse(t.as_ref()).is_some_and(StructureToken::is_filled))
        .count()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum IssueKind {
    UnknownToken { token: String },
    BadNesting { token: String, context: String },
    AttributeOutsideCell { token: String },
    DuplicateAttribute { token: String },
    UnclosedCell,
    UnclosedContainer { tag: String },
}

/// A grammar violation at a token position.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StructureIssue {
    pub position: usize,
    #[serde(flatten)]
    pub kind: IssueKind,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Section {
    Head,
    Body,
}

/// Check the tag grammar: `<thead>`/`<tbody>` at top level containing
/// `<tr>` rows of cells; span attributes only inside an open `<td`, at most
/// one rowspan and one colspan per cell, and every `<td` closed.
pub fn validate_structure<S: AsRef<str>>(tokens: &[S]) -> Result<(), Vec<StructureIssue>> {
    use StructureToken::*;
    let mut issues = Vec::new();
    let mut section: Option<(Section, usize)> = None;
    let mut row: Option<usize> = None; // position of the open <tr>
    let mut open_cell: Option<(usize, bool, bool)> = None; // (position, rowspan seen, colspan seen)

    let mut issue =
        |position: usize, kind: IssueKind| issues.push(StructureIssue { position, kind });

    for (i, raw) in tokens.iter().enumerate() {
        let raw = raw.as_ref();
        let Some(tok) = StructureToken::parse(raw) else {
            issue(
                i,
                IssueKind::UnknownToken {
                    token: raw.to_string(),
                },
            );
            continue;
        };
        if let Some((pos, _, _)) = open_cell {
            match tok {
                Rowspan(_) | Colspan(_) | SpanCloseEmpty | SpanCloseFilled => {}
                _ => {
                    issue(pos, IssueKind::UnclosedCell);
                    open_cell = None;
                }
            }
        }
        let nesting = |ctx: &str| IssueKind::BadNesting {
            token: raw.to_string(),
            context: ctx.to_string(),
        };
        match tok {
            TheadOpen | TbodyOpen => {
                if let Some(p) = row.take() {
                    issue(p, IssueKind::UnclosedContainer { tag: "<tr>".into() });
                }
                if let Some((s, p)) = section {
                    issue(
                        p,
                        IssueKind::UnclosedContainer {
                            tag: section_tag(s).into(),
                        },
                    );
                }
                section = Some((
                    if tok == TheadOpen {
                        Section::Head
                    } else {
                        Section::Body
                    },
                    i,
                ));
            }
            TheadClose | TbodyClose => {
                let want = if tok == TheadClose {
                    Section::Head
                } else {
                    Section::Body
                };
                if let Some(p) = row.take() {
                    issue(p, IssueKind::UnclosedContainer { tag: "<tr>".into() });
                }
                match section {
                    Some((s, _)) if s == want => section = None,
                    Some((s, _)) => {
                        issue(i, nesting(section_tag(s)));
                        section = None;
                    }
                    None => issue(i, nesting("top level")),
                }
            }
            TrOpen => {
                if section.is_none() {
                    issue(i, nesting("top level"));
                }
                if let Some(p) = row {
                    issue(p, IssueKind::UnclosedContainer { tag: "<tr>".into() });
                }
                row = Some(i);
            }
            TrClose => match row.take() {
                Some(_) => {}
                None => issue(
                    i,
                    nesting(if section.is_some() {
                        "section without open row"
                    } else {
                        "top level"
                    }),
                ),
            },
            EmptyCell | FilledCell | SpanOpen => {
                if row.is_none() {
                    issue(i, nesting("outside <tr>"));
                }
                if tok == SpanOpen {
                    open_cell = Some((i, false, false));
                }
            }
            Rowspan(_) | Colspan(_) => match &mut open_cell {
                Some((_, rs, cs)) => {
                    let seen = if matches!(tok, Rowspan(_)) { rs } else { cs };
                    if *seen {
                        issue(
                            i,
                            IssueKind::DuplicateAttribute {
                                token: raw.to_string(),
                            },
                        );
                    }
                    *seen = true;
                }
                None => issue(
                    i,
                    IssueKind::AttributeOutsideCell {
                        token: raw.to_string(),
                    },
                ),
            },
            SpanCloseEmpty | SpanCloseFilled => {
                if open_cell.take().is_none() {
                    issue(i, nesting("no open <td"));
                }
            }
        }
    }
    if let Some((p, _, _)) = open_cell {
        issue(p, IssueKind::UnclosedCell);
    }
    if let Some(p) = row {
        issue(p, IssueKind::UnclosedContainer { tag: "<tr>".into() });
    }
    if let Some((s, p)) = section {
        issue(
            p,
            IssueKind::UnclosedContainer {
                tag: section_tag(s).into(),
            },
        );
    }
    if issues.is_empty() {
        Ok(())
    } else {
        Err(issues)
    }
}

fn section_tag(s: Section) -> &'static str {
    match s {
        Section::Head => "<thead>",
        Section::Body => "<tbody>",
    }
}

/// A cell placed on the table grid.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GridCell {
    pub row: usize,
    pub col: usize,
    pub rowspan: usize,
    pub colspan: usize,
    pub filled: bool,
}

/// Grid layout recovered from a structure token sequence; `cells` are in
/// token (reading) order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableGrid {
    pub n_rows: usize,
    pub n_cols: usize,
    pub header_rows: usize,
    pub cells: Vec<GridCell>,
}

impl TableGrid {
    /// Occupancy map: `slots[r][c]` is the index of the covering cell.
    pub fn occupancy(&self) -> Vec<Vec<Option<usize>>> {
        let mut slots = vec![vec![None; self.n_cols]; self.n_rows];
        for (i, c) in self.cells.iter().enumerate() {
            for r in c.row..(c.row + c.rowspan).min(self.n_rows) {
                for k in c.col..(c.col + c.colspan).min(self.n_cols) {
                    slots[r][k] = Some(i);
                }
            }
        }
        slots
    }
}

/// Place cells with the HTML table algorithm: each cell takes the first
/// free column in its row, skipping slots claimed by earlier row spans.
pub fn parse_grid<S: AsRef<str>>(tokens: &[S]) -> Result<TableGrid, Vec<StructureIssue>> {
    use StructureToken::*;
    validate_structure(tokens)?;
    let mut cells = Vec::new();
    let mut taken: Vec<Vec<bool>> = Vec::new();
    let mut row = 0usize;
    let mut col = 0usize;
    let mut header_rows = 0usize;
    let mut in_head = false;
    let mut pending: Option<(usize, usize)> = None;

    let mut place = |row: usize,
                     col: &mut usize,
                     rs: usize,
                     cs: usize,
                     filled: bool,
                     taken: &mut Vec<Vec<bool>>| {
        while taken.len() <= row {
            taken.push(Vec::new());
        }
        while taken[row].get(*col).copied().unwrap_or(false) {
            *col += 1;
        }
        let start = *col;
        for r in row..row + rs {
            while taken.len() <= r {
                taken.push(Vec::new());
            }
            if taken[r].len() < start + cs {
                taken[r].resize(start + cs, false);
            }
            for c in start..start + cs {
                taken[r][c] = true;
            }
        }
        cells.push(GridCell {
            row,
            col: start,
            rowspan: rs,
            colspan: cs,
            filled,
        });
        *col = start + cs;
    };

    for raw in tokens {
        let tok = StructureToken::parse(raw.as_ref()).expect("validated");
        match tok {
            TheadOpen => in_head = true,
            TheadClose => in_head = false,
            TrOpen => col = 0,
            TrClose => {
                if in_head {
                    header_rows += 1;
                }
                row += 1;
            }
            EmptyCell | FilledCell => place(row, &mut col, 1, 1, tok == FilledCell, &mut taken),
            SpanOpen => pending = Some((1, 1)),
            Rowspan(n) => pending.as_mut().expect("validated").0 = n as usize,
            Colspan(n) => pending.as_mut().expect("validated").1 = n as usize,
            SpanCloseEmpty | SpanCloseFilled => {
                let (rs, cs) = pending.take().expect("validated");
                place(row, &mut col, rs, cs, tok == SpanCloseFilled, &mut taken);
            }
            TbodyOpen | TbodyClose => {}
        }
    }
    let n_rows = taken.len().max(row);
    let n_cols = taken.iter().map(Vec::len).max().unwrap_or(0);
    Ok(TableGrid {
        n_rows,
        n_cols,
        header_rows,
        cells,
    })
}
