use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tabseq_core::codec::{merge_html, parse_grid, quantize_bbox, GridCell};
use tabseq_core::metrics::{
    average_precision, car_f1, car_relations, coco_ap, coco_thresholds, html_to_tree, teds,
    DetectionSet, HtmlTree,
};
use tabseq_core::ssp::sample_mask;
use tabseq_core::synthgen::{
    generate_sample, sample_spec, structure_strings, GenConfig, TableSpec,
};
use tabseq_core::tensor::{Tape, Tensor};
use tabseq_core::vqvae::gumbel_softmax;
use tabseq_core::BBox;

fn spec_cfg() -> GenConfig {
    GenConfig {
        max_rows: 6,
        max_cols: 6,
        min_rows: 1,
        min_cols: 1,
        max_header_rows: 2,
        span_prob: 0.3,
        ..GenConfig::default()
    }
}

fn spec(seed: u64) -> TableSpec {
    sample_spec(&mut ChaCha8Rng::seed_from_u64(seed), &spec_cfg()).unwrap()
}

/// Grid cells read straight off the spec's slot map.
fn oracle_cells(s: &TableSpec) -> Vec<GridCell> {
    s.anchors()
        .into_iter()
        .map(|a| GridCell {
            row: a.row,
            col: a.col,
            rowspan: a.rowspan,
            colspan: a.colspan,
            filled: s.text(a.row, a.col).is_some_and(|t| !t.is_empty()),
        })
        .collect()
}

fn cell_nodes(t: &HtmlTree) -> Vec<(u32, u32, String)> {
    t.preorder()
        .into_iter()
        .filter(|n| n.is_cell())
        .map(|n| (n.rowspan, n.colspan, n.content.clone()))
        .collect()
}

fn sample_html(seed: u64, index: usize) -> String {
    let s = generate_sample(&GenConfig::default(), seed, index).unwrap();
    merge_html(&s.annotation.structure_tokens, &s.annotation.contents).unwrap()
}

/// Random detections on three images, boxes snapped to a coarse grid so
/// partial overlaps are common.
fn detections(seed: u64, n_gt: usize, n_pred: usize) -> (DetectionSet, DetectionSet) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rand_box = |rng: &mut ChaCha8Rng| {
        let x = rng.random_range(0..8) as f32 * 4.0;
        let y = rng.random_range(0..8) as f32 * 4.0;
        let w = rng.random_range(1..4) as f32 * 4.0;
        let h = rng.random_range(1..4) as f32 * 4.0;
        BBox::new(x, y, x + w, y + h)
    };
    let mut gt = DetectionSet::default();
    for _ in 0..n_gt {
        let b = rand_box(&mut rng);
        gt.push(rng.random_range(0..3), b, None);
    }
    let mut pred = DetectionSet::default();
    for _ in 0..n_pred {
        let b = rand_box(&mut rng);
        let score = rng.random_range(1..=100) as f32 / 100.0;
        pred.push(rng.random_range(0..3), b, Some(score));
    }
    (pred, gt)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn softmax_rows_are_distributions(rows in 1usize..6, cols in 1usize..8, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([rows, cols], data).unwrap());
        let y = t.softmax(x).unwrap();
        for row in t.value(y).data().chunks(cols) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn layer_norm_standardizes_rows(rows in 1usize..6, cols in 4usize..9, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..rows * cols).map(|_| rng.random_range(-2.0f32..2.0)).collect();
        for row in data.chunks(cols) {
            let m = row.iter().sum::<f32>() / cols as f32;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / cols as f32;
            // The epsilon term dominates rows that are nearly constant.
            prop_assume!(v > 0.05);
        }
        let mut t = Tape::new();
        let x = t.constant(Tensor::new([rows, cols], data).unwrap());
        let g = t.constant(Tensor::full([cols], 1.0));
        let b = t.constant(Tensor::zeros([cols]));
        let y = t.layer_norm(x, g, b, 1e-5).unwrap();
        for row in t.value(y).data().chunks(cols) {
            let m = row.iter().sum::<f32>() / cols as f32;
            let v = row.iter().map(|x| (x - m) * (x - m)).sum::<f32>() / cols as f32;
            prop_assert!(m.abs() < 1e-5);
            prop_assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn structure_tokens_recover_the_grid(seed in any::<u64>()) {
        let s = spec(seed);
        let grid = parse_grid(&structure_strings(&s)).unwrap();
        prop_assert_eq!((grid.n_rows, grid.n_cols, grid.header_rows), (s.n_rows, s.n_cols, s.header_rows));
        prop_assert_eq!(grid.cells, oracle_cells(&s));
    }

    #[test]
    fn merged_html_keeps_cells_and_spans(seed in any::<u64>()) {
        let s = spec(seed);
        let cells = oracle_cells(&s);
        let contents: Vec<String> = cells
            .iter()
            .filter(|c| c.filled)
            .map(|c| s.text(c.row, c.col).unwrap().to_string())
            .collect();
        let html = merge_html(&structure_strings(&s), &contents).unwrap();
        let parsed = cell_nodes(&html_to_tree(&html).unwrap());
        prop_assert_eq!(parsed.len(), cells.len());
        let mut filled = 0;
        for ((rs, cs, text), c) in parsed.iter().zip(&cells) {
            prop_assert_eq!((*rs as usize, *cs as usize), (c.rowspan, c.colspan));
            prop_assert_eq!(!text.is_empty(), c.filled);
            filled += usize::from(c.filled);
        }
        prop_assert_eq!(filled, contents.len());
    }

    #[test]
    fn quantization_within_half_pixel(c in prop::array::uniform4(0.0f32..=112.0)) {
        let b = BBox::new(c[0], c[1], c[2], c[3]);
        let q = quantize_bbox(&b, 112).unwrap();
        prop_assert!(!q.clamped);
        for (orig, back) in c.iter().zip(q.to_bbox().to_array()) {
            prop_assert!((orig - back).abs() <= 0.5);
        }
    }

    #[test]
    fn gumbel_weights_are_distributions(n in 1usize..6, k in 2usize..12, tau in 0.05f32..5.0, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits: Vec<f32> = (0..n * k).map(|_| rng.random_range(-3.0f32..3.0)).collect();
        let noise: Vec<f32> = (0..n * k).map(|_| rng.random_range(-2.0f32..4.0)).collect();
        let mut t = Tape::new();
        let l = t.leaf(Tensor::new([n, k], logits).unwrap(), true);
        let w = gumbel_softmax(&mut t, l, tau, Some(&Tensor::new([n, k], noise).unwrap())).unwrap();
        for row in t.value(w).data().chunks(k) {
            prop_assert!(row.iter().all(|&v| v >= 0.0));
            prop_assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mask_count_is_rounded_ratio(n in 1usize..400, ratio in 0.05f32..0.95, seed in any::<u64>()) {
        let k = (ratio as f64 * n as f64).round() as usize;
        prop_assume!(k > 0);
        let plan = sample_mask(n, ratio, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
        prop_assert_eq!(plan.indices.len(), k);
        prop_assert!(plan.indices.windows(2).all(|w| w[0] < w[1]));
        prop_assert!(plan.indices.iter().all(|&i| i < n));
    }

    #[test]
    fn teds_symmetric_bounded_and_reflexive(seed in any::<u64>(), i in 0usize..1000, j in 0usize..1000) {
        let (a, b) = (sample_html(seed, i), sample_html(seed, j));
        let ab = teds(&a, &b, true);
        prop_assert_eq!(ab, teds(&b, &a, true));
        prop_assert!((0.0..=1.0).contains(&ab));
        let full = teds(&a, &b, false);
        prop_assert!((0.0..=1.0).contains(&full));
        prop_assert_eq!(teds(&a, &a, false), 1.0);
        prop_assert_eq!(teds(&a, &a, true), 1.0);
    }

    #[test]
    fn car_f1_invariant_to_translation_and_scaling(
        seed in any::<u64>(),
        dx in -20i32..20,
        dy in -20i32..20,
        s in prop::sample::select(vec![0.5f32, 2.0, 4.0]),
        jitter in 0.0f32..3.0,
    ) {
        let sample = generate_sample(&GenConfig::default(), seed, 0).unwrap();
        let ann = sample.annotation;
        let rels = car_relations(&parse_grid(&ann.structure_tokens).unwrap());
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        let pred: Vec<BBox> = ann
            .bboxes
            .iter()
            .map(|b| b.translate((rng.random_range(-1.0f32..1.0) * jitter).round(), (rng.random_range(-1.0f32..1.0) * jitter).round()))
            .collect();
        let moved = |v: &[BBox]| -> Vec<BBox> { v.iter().map(|b| b.translate(dx as f32, dy as f32).scale(s)).collect() };
        for t in [0.5, 0.6, 0.7, 0.8, 0.9] {
            let before = car_f1(&pred, &ann.bboxes, &rels, t).unwrap();
            let after = car_f1(&moved(&pred), &moved(&ann.bboxes), &rels, t).unwrap();
            prop_assert_eq!(before, after);
        }
    }

    #[test]
    fn coco_ap_invariant_to_monotone_scores(seed in any::<u64>(), n_gt in 0usize..8, n_pred in 0usize..12) {
        let (pred, gt) = detections(seed, n_gt, n_pred);
        let mut squashed = pred.clone();
        for d in &mut squashed.detections {
            let s = d.score.unwrap();
            d.score = Some(0.1 + 0.8 * s * s);
        }
        let t = coco_thresholds();
        prop_assert_eq!(coco_ap(&pred, &gt, &t).unwrap(), coco_ap(&squashed, &gt, &t).unwrap());
    }

    #[test]
    fn ap_and_f1_non_increasing_in_threshold(seed in any::<u64>(), n_gt in 1usize..8, n_pred in 0usize..12) {
        let (pred, gt) = detections(seed, n_gt, n_pred);
        let ts = [0.1, 0.3, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
        let aps: Vec<f64> = ts.iter().map(|&t| average_precision(&pred, &gt, t).unwrap()).collect();
        prop_assert!(aps.windows(2).all(|w| w[0] >= w[1]), "{:?}", aps);

        let pb: Vec<BBox> = pred.detections.iter().filter(|d| d.image == 0).map(|d| d.bbox).collect();
        let gb: Vec<BBox> = gt.detections.iter().filter(|d| d.image == 0).map(|d| d.bbox).collect();
        let rels = (0..gb.len().saturating_sub(1))
            .map(|i| tabseq_core::metrics::AdjacencyRelation {
                a: i,
                b: i + 1,
                direction: tabseq_core::metrics::Direction::Horizontal,
            })
            .collect();
        let f1s: Vec<f64> = ts.iter().map(|&t| car_f1(&pb, &gb, &rels, t).unwrap().f1).collect();
        prop_assert!(f1s.windows(2).all(|w| w[0] >= w[1]), "{:?}", f1s);
    }
}
