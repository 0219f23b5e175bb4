use super::tree::{html_to_tree, HtmlNode, HtmlTree, Tree};
use crate::error::Result;

/// Postorder view of a tree with 1-based indices.
struct Postorder<'a, T> {
    labels: Vec<&'a T>,
    /// Leftmost leaf descendant of each node.
    lml: Vec<usize>,
    keyroots: Vec<usize>,
}

impl<'a, T> Postorder<'a, T> {
    fn new(tree: &'a Tree<T>) -> Self {
        let mut labels = vec![];
        let mut lml = vec![];
        fn walk<'a, T>(t: &'a Tree<T>, labels: &mut Vec<&'a T>, lml: &mut Vec<usize>) -> usize {
            let mut first = None;
            for c in &t.children {
                let l = walk(c, labels, lml);
                first.get_or_insert(l);
            }
            labels.push(&t.label);
            let me = labels.len();
            lml.push(first.unwrap_or(me));
            lml[me - 1]
        }
        walk(tree, &mut labels, &mut lml);
        let n = labels.len();
        let mut seen = vec![false; n + 1];
        let mut keyroots = vec![];
        for k in (1..=n).rev() {
            let l = lml[k - 1];
            if !seen[l] {
                seen[l] = true;
                keyroots.push(k);
            }
        }
        keyroots.reverse();
        Postorder {
            labels,
            lml,
            keyroots,
        }
    }

    fn l(&self, i: usize) -> usize {
        self.lml[i - 1]
    }
}

/// Ordered tree edit distance with unit insert/delete cost and the given
/// rename cost (Zhang–Shasha).
pub fn tree_edit_distance<T>(a: &Tree<T>, b: &Tree<T>, rename: impl Fn(&T, &T) -> f64) -> f64 {
    let pa = Postorder::new(a);
    let pb = Postorder::new(b);
    let (n, m) = (pa.labels.len(), pb.labels.len());
    let mut td = vec![vec![0.0f64; m + 1]; n + 1];
    let mut fd = vec![vec![0.0f64; m + 2]; n + 2];
    for &i in &pa.keyroots {
        for &j in &pb.keyroots {
            let (li, lj) = (pa.l(i), pb.l(j));
            // fd[x][y]: forest a[li..li+x-1] vs b[lj..lj+y-1].
            let (xs, ys) = (i - li + 1, j - lj + 1);
            fd[0][0] = 0.0;
            for x in 1..=xs {
                fd[x][0] = fd[x - 1][0] + 1.0;
            }
            for y in 1..=ys {
                fd[0][y] = fd[0][y - 1] + 1.0;
            }
            for x in 1..=xs {
                let i1 = li + x - 1;
                for y in 1..=ys {
                    let j1 = lj + y - 1;
                    let del = fd[x - 1][y] + 1.0;
                    let ins = fd[x][y - 1] + 1.0;
                    if pa.l(i1) == li && pb.l(j1) == lj {
                        let ren = fd[x - 1][y - 1] + rename(pa.labels[i1 - 1], pb.labels[j1 - 1]);
                        fd[x][y] = del.min(ins).min(ren);
                        td[i1][j1] = fd[x][y];
                    } else {
                        let (px, py) = (pa.l(i1) - li, pb.l(j1) - lj);
                        fd[x][y] = del.min(ins).min(fd[px][py] + td[i1][j1]);
                    }
                }
            }
        }
    }
    td[n][m]
}

/// Character-level Levenshtein distance divided by the longer length.
pub fn normalized_levenshtein(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 0.0;
    }
    strsim::levenshtein(a, b) as f64 / longest as f64
}

/// Node rename cost for TEDS.
pub fn html_rename_cost(a: &HtmlNode, b: &HtmlNode, structure_only: bool) -> f64 {
    if a.tag != b.tag || a.rowspan != b.rowspan || a.colspan != b.colspan {
        1.0
    } else if structure_only || !a.is_cell() {
        0.0
    } else {
        normalized_levenshtein(&a.content, &b.content)
    }
}

/// `1 - TED / max(|a|, |b|)` on parsed trees.
pub fn teds_trees(pred: &HtmlTree, gt: &HtmlTree, structure_only: bool) -> f64 {
    let d = tree_edit_distance(pred, gt, |x, y| html_rename_cost(x, y, structure_only));
    let size = pred.size().max(gt.size()) as f64;
    (1.0 - d / size).clamp(0.0, 1.0)
}

/// TEDS on HTML strings; errors if either side fails to parse.
pub fn try_teds(pred_html: &str, gt_html: &str, structure_only: bool) -> Result<f64> {
    let gt = html_to_tree(gt_html)?;
    let pred = html_to_tree(pred_html)?;
    Ok(teds_trees(&pred, &gt, structure_only))
}

/// TEDS on HTML strings. An unparseable side scores 0 so corpus evaluation
/// stays total; the parse error is logged.
pub fn teds(pred_html: &str, gt_html: &str, structure_only: bool) -> f64 {
    try_teds(pred_html, gt_html, structure_only).unwrap_or_else(|e| {
        log::warn!("TEDS scored 0: {e}");
        0.0
    })
}
