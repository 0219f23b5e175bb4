//! Table layouts: sampling and conversion to structure tokens.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::codec::structure::{StructureToken, MAX_SPAN, MIN_SPAN};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Style {
    Finance,
    Scientific,
    Marketing,
    Sparse,
}

impl Style {
    pub const ALL: [Style; 4] = [
        Style::Finance,
        Style::Scientific,
        Style::Marketing,
        Style::Sparse,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Style::Finance => "finance",
            Style::Scientific => "scientific",
            Style::Marketing => "marketing",
            Style::Sparse => "sparse",
        }
    }

    /// Probability that an anchor cell is left empty.
    pub fn empty_prob(self) -> f64 {
        match self {
            Style::Finance => 0.1,
            Style::Scientific => 0.1,
            Style::Marketing => 0.15,
            Style::Sparse => 0.6,
        }
    }
}

/// A cell spanning more than one grid slot, anchored at its top-left slot.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Span {
    pub row: usize,
    pub col: usize,
    pub rowspan: usize,
    pub colspan: usize,
}

impl Span {
    pub fn contains(&self, r: usize, c: usize) -> bool {
        (self.row..self.row + self.rowspan).contains(&r)
            && (self.col..self.col + self.colspan).contains(&c)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableSpec {
    pub n_rows: usize,
    pub n_cols: usize,
    pub header_rows: usize,
    pub spans: Vec<Span>,
    /// Row-major `n_rows x n_cols`; only anchor slots carry text.
    pub cells: Vec<Vec<Option<String>>>,
    pub style: Style,
}

/// Where a grid slot sits relative to the cells of a table.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Slot {
    /// Top-left slot of a cell; `Some` holds the span extents.
    Anchor(Option<Span>),
    /// Covered by a span anchored elsewhere.
    Covered,
}

impl TableSpec {
    /// A plain grid with no spans and every cell empty.
    pub fn empty(n_rows: usize, n_cols: usize, header_rows: usize, style: Style) -> Self {
        TableSpec {
            n_rows,
            n_cols,
            header_rows,
            spans: Vec::new(),
            cells: vec![vec![None; n_cols]; n_rows],
            style,
        }
    }

    pub fn slot(&self, r: usize, c: usize) -> Slot {
        for s in &self.spans {
            if s.contains(r, c) {
                return if (s.row, s.col) == (r, c) {
                    Slot::Anchor(Some(*s))
                } else {
                    Slot::Covered
                };
            }
        }
        Slot::Anchor(None)
    }

    /// Anchor slots in row-major order with their extents.
    pub fn anchors(&self) -> Vec<Span> {
        let mut out = Vec::new();
        for r in 0..self.n_rows {
            for c in 0..self.n_cols {
                match self.slot(r, c) {
                    Slot::Anchor(Some(s)) => out.push(s),
                    Slot::Anchor(None) => out.push(Span {
                        row: r,
                        col: c,
                        rowspan: 1,
                        colspan: 1,
                    }),
                    Slot::Covered => {}
                }
            }
        }
        out
    }

    pub fn text(&self, r: usize, c: usize) -> Option<&str> {
        self.cells[r][c].as_deref()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.n_rows == 0 || self.n_cols == 0 {
            return bad("table must have at least one row and column".into());
        }
        if self.header_rows > self.n_rows {
            return bad(format!(
                "header_rows {} exceeds n_rows {}",
                self.header_rows, self.n_rows
            ));
        }
        if self.cells.len() != self.n_rows || self.cells.iter().any(|r| r.len() != self.n_cols) {
            return bad("cells grid does not match table shape".into());
        }
        let span_range = MIN_SPAN as usize..=MAX_SPAN as usize;
        let mut owner = vec![vec![false; self.n_cols]; self.n_rows];
        for s in &self.spans {
            let in_range = |n: usize| n == 1 || span_range.contains(&n);
            if !in_range(s.rowspan) || !in_range(s.colspan) || s.rowspan * s.colspan == 1 {
                return bad(format!("span {s:?} has invalid extent"));
            }
            if s.row + s.rowspan > self.n_rows || s.col + s.colspan > self.n_cols {
                return bad(format!("span {s:?} leaves the grid"));
            }
            let head_end = self.header_rows;
            if s.row < head_end && s.row + s.rowspan > head_end {
                return bad(format!("span {s:?} crosses the header boundary"));
            }
            for r in s.row..s.row + s.rowspan {
                for c in s.col..s.col + s.colspan {
                    if std::mem::replace(&mut owner[r][c], true) {
                        return bad(format!("span {s:?} overlaps another span"));
                    }
                    if (r, c) != (s.row, s.col) && self.cells[r][c].is_some() {
                        return bad(format!("slot ({r}, {c}) is covered by a span but has text"));
                    }
                }
            }
        }
        Ok(())
    }
}

/// Bounds for [`sample_spec`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GenConfig {
    pub image_size: usize,
    pub min_rows: usize,
    pub max_rows: usize,
    pub min_cols: usize,
    pub max_cols: usize,
    pub max_header_rows: usize,
    pub span_prob: f64,
    pub max_text_len: usize,
    pub styles: Vec<Style>,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            image_size: 112,
            min_rows: 2,
            max_rows: 5,
            min_cols: 2,
            max_cols: 4,
            max_header_rows: 1,
            span_prob: 0.15,
            max_text_len: 6,
            styles: Style::ALL.to_vec(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidArgument(m.to_string()));
        if self.image_size < 16 {
            return bad("image_size must be at least 16");
        }
        if self.min_rows == 0 || self.min_rows > self.max_rows {
            return bad("row bounds must satisfy 1 <= min_rows <= max_rows");
        }
        if self.min_cols == 0 || self.min_cols > self.max_cols {
            return bad("column bounds must satisfy 1 <= min_cols <= max_cols");
        }
        if self.max_header_rows == 0 {
            return bad("max_header_rows must be at least 1");
        }
        if !(0.0..=1.0).contains(&self.span_prob) {
            return bad("span_prob must lie in [0, 1]");
        }
        if self.max_text_len == 0 {
            return bad("max_text_len must be positive");
        }
        if self.styles.is_empty() {
            return bad("styles must not be empty");
        }
        Ok(())
    }
}

const WORDS: &[&str] = &[
    "ITEM", "TOTAL", "NAME", "RATE", "COST", "YEAR", "AVG", "NET", "TAX", "UNIT", "MEAN", "STD",
    "ACC", "SCORE", "TYPE", "SIZE", "DATE", "CODE", "GAIN", "LOSS", "AREA", "PLAN", "TEST",
];
const PROMO: &[&str] = &[
    "SALE", "NEW", "TOP", "BEST", "DEAL", "HOT", "FREE", "OFF", "BUY", "GIFT",
];

fn number(rng: &mut impl Rng, decimals: usize, signed: bool) -> String {
    let int: u32 = rng.random_range(0..1000);
    let mut s = if decimals == 0 {
        int.to_string()
    } else {
        let frac = rng.random_range(0..10u32.pow(decimals as u32));
        format!("{int}.{frac:0decimals$}")
    };
    if signed && rng.random_bool(0.3) {
        s.insert(0, '-');
    }
    s
}

fn cell_text(rng: &mut impl Rng, style: Style, header: bool, first_col: bool) -> String {
    if header || first_col {
        return WORDS.choose(rng).unwrap().to_string();
    }
    match style {
        Style::Finance => match rng.random_range(0..3) {
            0 => format!("${}", number(rng, 1, false)),
            1 => number(rng, 0, true),
            _ => format!("{}%", number(rng, 0, false)),
        },
        Style::Scientific => match rng.random_range(0..2) {
            0 => format!("0.{:02}", rng.random_range(0..100)),
            _ => number(rng, 1, true),
        },
        Style::Marketing => match rng.random_range(0..3) {
            0 => PROMO.choose(rng).unwrap().to_string(),
            1 => format!("{}%", rng.random_range(5..95)),
            _ => format!("{} {}", PROMO.choose(rng).unwrap(), rng.random_range(1..10)),
        },
        Style::Sparse => {
            let decimals = rng.random_range(0..2);
            number(rng, decimals, false)
        }
    }
}

fn fit_text(mut s: String, max_len: usize) -> String {
    s.truncate(max_len);
    s.trim().to_string()
}

/// Draw a random table layout within `cfg` bounds. Spans never cross the
/// header/body boundary, and at least one cell is non-empty.
pub fn sample_spec(rng: &mut impl Rng, cfg: &GenConfig) -> Result<TableSpec> {
    cfg.validate()?;
    let style = *cfg.styles.choose(rng).unwrap();
    let n_rows = rng.random_range(cfg.min_rows..=cfg.max_rows);
    let n_cols = rng.random_range(cfg.min_cols..=cfg.max_cols);
    let header_rows = if n_rows == 1 {
        1
    } else {
        rng.random_range(1..=cfg.max_header_rows.min(n_rows - 1))
    };
    let mut spec = TableSpec::empty(n_rows, n_cols, header_rows, style);

    let mut covered = vec![vec![false; n_cols]; n_rows];
    for r in 0..n_rows {
        let section_end = if r < header_rows { header_rows } else { n_rows };
        for c in 0..n_cols {
            if covered[r][c] || !rng.random_bool(cfg.span_prob) {
                continue;
            }
            let max_rs = (section_end - r).min(MAX_SPAN as usize);
            let max_cs = (n_cols - c).min(MAX_SPAN as usize);
            if max_rs * max_cs == 1 {
                continue;
            }
            for _attempt in 0..4 {
                let rs = rng.random_range(1..=max_rs);
                let cs = rng.random_range(1..=max_cs);
                if rs * cs == 1 {
                    continue;
                }
                let free = (r..r + rs).all(|rr| (c..c + cs).all(|cc| !covered[rr][cc]));
                if !free {
                    continue;
                }
                for row in covered.iter_mut().skip(r).take(rs) {
                    row[c..c + cs].fill(true);
                }
                spec.spans.push(Span {
                    row: r,
                    col: c,
                    rowspan: rs,
                    colspan: cs,
                });
                break;
            }
        }
    }

    let anchors = spec.anchors();
    for a in &anchors {
        if rng.random_bool(style.empty_prob()) {
            continue;
        }
        let t = cell_text(rng, style, a.row < header_rows, a.col == 0);
        spec.cells[a.row][a.col] = Some(fit_text(t, cfg.max_text_len)).filter(|t| !t.is_empty());
    }
    if anchors.iter().all(|a| spec.cells[a.row][a.col].is_none()) {
        let a = anchors[0];
        let t = cell_text(rng, style, a.row < header_rows, a.col == 0);
        spec.cells[a.row][a.col] = Some(fit_text(t, cfg.max_text_len));
    }
    spec.validate()?;
    Ok(spec)
}

/// Serialize a table layout as structure tag tokens. Header rows go in
/// `<thead>`, the rest in `<tbody>`; an empty section is omitted.
pub fn spec_to_structure_tokens(spec: &TableSpec) -> Vec<StructureToken> {
    use StructureToken::*;
    let mut out = Vec::new();
    let sections = [
        (0..spec.header_rows, TheadOpen, TheadClose),
        (spec.header_rows..spec.n_rows, TbodyOpen, TbodyClose),
    ];
    for (rows, open, close) in sections {
        if rows.is_empty() {
            continue;
        }
        out.push(open);
        for r in rows {
            out.push(TrOpen);
            for c in 0..spec.n_cols {
                let filled = spec.cells[r][c].is_some();
                match spec.slot(r, c) {
                    Slot::Covered => {}
                    Slot::Anchor(None) => out.push(if filled { FilledCell } else { EmptyCell }),
                    Slot::Anchor(Some(s)) => {
                        out.push(SpanOpen);
                        if s.rowspan > 1 {
                            out.push(Rowspan(s.rowspan as u8));
                        }
                        if s.colspan > 1 {
                            out.push(Colspan(s.colspan as u8));
                        }
                        out.push(if filled {
                            SpanCloseFilled
                        } else {
                            SpanCloseEmpty
                        });
                    }
                }
            }
            out.push(TrClose);
        }
        out.push(close);
    }
    out
}

/// Token strings, as stored in annotations.
pub fn structure_strings(spec: &TableSpec) -> Vec<String> {
    spec_to_structure_tokens(spec)
        .iter()
        .map(|t| t.to_string())
        .collect()
}
