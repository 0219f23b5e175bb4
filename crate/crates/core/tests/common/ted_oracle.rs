//! Brute-force tree edit distance: minimum cost over every valid mapping.

use rand::Rng;
use tabseq_core::metrics::Tree;

pub const TAGS: [&str; 6] = ["table", "thead", "tbody", "tr", "td", "th"];

struct Flat<'a> {
    labels: Vec<&'a str>,
    /// Preorder index one past the last descendant.
    end: Vec<usize>,
}

fn flatten<'a>(t: &'a Tree<&'static str>) -> Flat<'a> {
    fn walk<'a>(t: &'a Tree<&'static str>, f: &mut Flat<'a>) {
        let i = f.labels.len();
        f.labels.push(t.label);
        f.end.push(0);
        for c in &t.children {
            walk(c, f);
        }
        f.end[i] = f.labels.len();
    }
    let mut f = Flat {
        labels: Vec::new(),
        end: Vec::new(),
    };
    walk(t, &mut f);
    f
}

fn is_ancestor(f: &Flat, a: usize, b: usize) -> bool {
    a < b && b < f.end[a]
}

/// Unit-cost distance by enumerating every mapping that preserves preorder
/// and ancestry in both directions.
pub fn brute_force_distance(a: &Tree<&'static str>, b: &Tree<&'static str>) -> f64 {
    let (fa, fb) = (flatten(a), flatten(b));
    let (n, m) = (fa.labels.len(), fb.labels.len());
    let mut best = (n + m) as f64;
    let mut pairs: Vec<(usize, usize)> = Vec::new();

    fn search(i: usize, fa: &Flat, fb: &Flat, pairs: &mut Vec<(usize, usize)>, best: &mut f64) {
        let (n, m) = (fa.labels.len(), fb.labels.len());
        if i == n {
            let renames = pairs
                .iter()
                .filter(|&&(x, y)| fa.labels[x] != fb.labels[y])
                .count();
            let cost = (n + m - 2 * pairs.len() + renames) as f64;
            if cost < *best {
                *best = cost;
            }
            return;
        }
        search(i + 1, fa, fb, pairs, best);
        let start = pairs.last().map_or(0, |&(_, y)| y + 1);
        for j in start..m {
            let ok = pairs
                .iter()
                .all(|&(x, y)| is_ancestor(fa, x, i) == is_ancestor(fb, y, j));
            if ok {
                pairs.push((i, j));
                search(i + 1, fa, fb, pairs, best);
                pairs.pop();
            }
        }
    }
    search(0, &fa, &fb, &mut pairs, &mut best);
    best
}

/// Random ordered tree with `size` nodes: each new node becomes the last
/// child of a uniformly chosen earlier node, which reaches every shape.
pub fn random_tree(size: usize, rng: &mut impl Rng) -> Tree<&'static str> {
    let mut labels = Vec::with_capacity(size);
    let mut parent: Vec<Option<usize>> = Vec::with_capacity(size);
    for i in 0..size {
        labels.push(TAGS[rng.random_range(0..TAGS.len())]);
        parent.push(if i == 0 {
            None
        } else {
            Some(rng.random_range(0..i))
        });
    }
    build(&labels, &parent, 0)
}

fn build(labels: &[&'static str], parent: &[Option<usize>], i: usize) -> Tree<&'static str> {
    let children = (0..labels.len())
        .filter(|&c| parent[c] == Some(i))
        .map(|c| build(labels, parent, c))
        .collect();
    Tree::new(labels[i], children)
}

/// Every ordered tree shape with exactly `size` nodes.
pub fn shapes(size: usize) -> Vec<Tree<()>> {
    if size == 0 {
        return Vec::new();
    }
    forests(size - 1)
        .into_iter()
        .map(|f| Tree::new((), f))
        .collect()
}

fn forests(size: usize) -> Vec<Vec<Tree<()>>> {
    if size == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for first in 1..=size {
        for head in shapes(first) {
            for mut rest in forests(size - first) {
                rest.insert(0, head.clone());
                out.push(rest);
            }
        }
    }
    out
}

/// Label a shape in preorder, cycling through `TAGS` from `offset`.
pub fn label_shape(shape: &Tree<()>, offset: usize) -> Tree<&'static str> {
    fn walk(t: &Tree<()>, next: &mut usize) -> Tree<&'static str> {
        let label = TAGS[*next % TAGS.len()];
        *next += 1;
        Tree::new(label, t.children.iter().map(|c| walk(c, next)).collect())
    }
    let mut next = offset;
    walk(shape, &mut next)
}

/// Pairs checked by the oracle comparison: every pair of shapes up to five
/// nodes, then random pairs up to eight nodes.
pub fn oracle_pairs(random: usize, seed: u64) -> Vec<(Tree<&'static str>, Tree<&'static str>)> {
    let all: Vec<Tree<()>> = (1..=5).flat_map(shapes).collect();
    let mut out = Vec::new();
    for (i, a) in all.iter().enumerate() {
        for (j, b) in all.iter().enumerate() {
            out.push((label_shape(a, i), label_shape(b, j)));
        }
    }
    let mut rng = super::rng(seed);
    for _ in 0..random {
        let (na, nb) = (rng.random_range(1..=8), rng.random_range(1..=8));
        out.push((random_tree(na, &mut rng), random_tree(nb, &mut rng)));
    }
    out
}

/// Number of pairs where the module distance differs from the oracle.
pub fn mismatches(pairs: &[(Tree<&'static str>, Tree<&'static str>)]) -> Vec<(usize, f64, f64)> {
    let unit = |x: &&str, y: &&str| if x == y { 0.0 } else { 1.0 };
    pairs
        .iter()
        .enumerate()
        .filter_map(|(k, (a, b))| {
            let got = tabseq_core::metrics::tree_edit_distance(a, b, unit);
            let want = brute_force_distance(a, b);
            (got != want).then_some((k, got, want))
        })
        .collect()
}
