//! Layout quality metrics and set-level distribution comparisons.
//!
//! Per-layout scores (lower is better for both):
//! * [`alignment_score`]: for each element, the distance to the nearest
//!   aligned edge or centerline of any other element, aggregated as
//!   `(100/N) * sum(-log(1 - a))`.
//! * [`overlap_score`]: total pairwise intersection area over total
//!   element area, with boxes clamped to the unit canvas.
//!
//! Set-level: [`mean_matched_iou`] (optimal matching of generated to
//! reference layouts under [`layout_iou`]) and
//! [`frechet_layout_distance`] over per-layout geometry features.

mod frechet;
mod hungarian;

pub use frechet::frechet_distance;
pub use hungarian::{max_weight_assignment, min_cost_assignment};

use serde::Serialize;

use crate::data::Layout;
use crate::error::{Error, Result};

/// Cap per side for the set-matching metric; larger sets are strided.
const MIOU_CAP: usize = 500;

/// Six alignment channels of a box: left, center, right, top, middle,
/// bottom.
fn channels(b: (f64, f64, f64, f64)) -> [f64; 6] {
    let (x0, y0, x1, y1) = b;
    [x0, (x0 + x1) * 0.5, x1, y0, (y0 + y1) * 0.5, y1]
}

/// Alignment quality: 0 when every element shares an edge or centerline
/// with some other element; grows as elements sit almost-but-not-quite
/// aligned. Single-element layouts score 0.
pub fn alignment_score(layout: &Layout) -> f64 {
    let n = layout.len();
    if n < 2 {
        return 0.0;
    }
    let chans: Vec<[f64; 6]> = layout.elements.iter().map(|e| channels(e.bounds())).collect();
    let mut total = 0.0;
    for (i, ci) in chans.iter().enumerate() {
        let mut best = f64::INFINITY;
        for (j, cj) in chans.iter().enumerate() {
            if i == j {
                continue;
            }
            for k in 0..6 {
                best = best.min((ci[k] - cj[k]).abs());
            }
        }
        let a = best.min(1.0 - 1e-9);
        total += -(1.0 - a).ln();
    }
    total * 100.0 / n as f64
}

fn clamped_box(b: (f64, f64, f64, f64)) -> (f64, f64, f64, f64) {
    (b.0.clamp(0.0, 1.0), b.1.clamp(0.0, 1.0), b.2.clamp(0.0, 1.0), b.3.clamp(0.0, 1.0))
}

fn intersection_area(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let w = (a.2.min(b.2) - a.0.max(b.0)).max(0.0);
    let h = (a.3.min(b.3) - a.1.max(b.1)).max(0.0);
    w * h
}

fn box_area(b: (f64, f64, f64, f64)) -> f64 {
    (b.2 - b.0).max(0.0) * (b.3 - b.1).max(0.0)
}

fn box_iou(a: (f64, f64, f64, f64), b: (f64, f64, f64, f64)) -> f64 {
    let inter = intersection_area(a, b);
    let union = box_area(a) + box_area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// Total pairwise intersection area over total element area, boxes
/// clamped to the canvas. 0 means no element overlaps another.
pub fn overlap_score(layout: &Layout) -> f64 {
    let boxes: Vec<_> = layout.elements.iter().map(|e| clamped_box(e.bounds())).collect();
    let total_area: f64 = boxes.iter().map(|&b| box_area(b)).sum();
    if total_area <= 0.0 {
        return 0.0;
    }
    let mut inter = 0.0;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            inter += intersection_area(boxes[i], boxes[j]);
        }
    }
    inter / total_area
}

/// Similarity of two layouts in `[0, 1]`: elements are matched optimally
/// within each category by box IoU, and the matched IoU total is
/// normalized by the larger element count.
pub fn layout_iou(a: &Layout, b: &Layout) -> f64 {
    if a.is_empty() || b.is_empty() {
        return 0.0;
    }
    let cats: std::collections::BTreeSet<usize> = a
        .elements
        .iter()
        .chain(&b.elements)
        .map(|e| e.category)
        .collect();
    let mut matched = 0.0;
    for cat in cats {
        let boxes_a: Vec<_> = a
            .elements
            .iter()
            .filter(|e| e.category == cat)
            .map(|e| clamped_box(e.bounds()))
            .collect();
        let boxes_b: Vec<_> = b
            .elements
            .iter()
            .filter(|e| e.category == cat)
            .map(|e| clamped_box(e.bounds()))
            .collect();
        if boxes_a.is_empty() || boxes_b.is_empty() {
            continue;
        }
        let (rows, cols) = if boxes_a.len() <= boxes_b.len() {
            (&boxes_a, &boxes_b)
        } else {
            (&boxes_b, &boxes_a)
        };
        let weights: Vec<Vec<f64>> = rows
            .iter()
            .map(|&ra| cols.iter().map(|&cb| box_iou(ra, cb)).collect())
            .collect();
        // Weights are finite in [0, 1] by construction.
        let (_, total) = max_weight_assignment(&weights).expect("valid weight matrix");
        matched += total;
    }
    matched / a.len().max(b.len()) as f64
}

/// Evenly strided subset of at most `cap` layouts.
fn cap_set(set: &[Layout], cap: usize) -> Vec<&Layout> {
    if set.len() <= cap {
        set.iter().collect()
    } else {
        (0..cap).map(|i| &set[i * set.len() / cap]).collect()
    }
}

/// Mean [`layout_iou`] under an optimal one-to-one matching between the
/// two sets (each capped at 500 layouts). Higher is better; identical
/// sets reach 1.
pub fn mean_matched_iou(generated: &[Layout], reference: &[Layout]) -> Result<f64> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::domain("matching needs non-empty sets"));
    }
    let ga = cap_set(generated, MIOU_CAP);
    let rb = cap_set(reference, MIOU_CAP);
    let (rows, cols) = if ga.len() <= rb.len() { (&ga, &rb) } else { (&rb, &ga) };
    let weights: Vec<Vec<f64>> = rows
        .iter()
        .map(|a| cols.iter().map(|b| layout_iou(a, b)).collect())
        .collect();
    let (_, total) = max_weight_assignment(&weights)?;
    Ok(total / rows.len() as f64)
}

/// Fixed-length description of one layout: element count, geometry
/// moments, mean pairwise IoU, alignment, overlap, and the category
/// histogram — `12 + num_categories` values.
pub fn geometry_features(layout: &Layout, nmax: usize, num_categories: usize) -> Vec<f64> {
    let n = layout.len();
    let mut feats = Vec::with_capacity(12 + num_categories);
    feats.push(n as f64 / nmax.max(1) as f64);
    for pick in [
        |e: &crate::data::Element| e.cx,
        |e: &crate::data::Element| e.cy,
        |e: &crate::data::Element| e.w,
        |e: &crate::data::Element| e.h,
    ] {
        let vals: Vec<f64> = layout.elements.iter().map(pick).collect();
        let mean = vals.iter().sum::<f64>() / n.max(1) as f64;
        let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n.max(1) as f64;
        feats.push(mean);
        feats.push(var.sqrt());
    }
    let boxes: Vec<_> = layout.elements.iter().map(|e| clamped_box(e.bounds())).collect();
    let mut iou_sum = 0.0;
    let mut pairs = 0usize;
    for i in 0..boxes.len() {
        for j in i + 1..boxes.len() {
            iou_sum += box_iou(boxes[i], boxes[j]);
            pairs += 1;
        }
    }
    feats.push(if pairs == 0 { 0.0 } else { iou_sum / pairs as f64 });
    feats.push(alignment_score(layout));
    feats.push(overlap_score(layout));
    let mut hist = vec![0.0; num_categories];
    for e in &layout.elements {
        if e.category < num_categories {
            hist[e.category] += 1.0;
        }
    }
    for h in &mut hist {
        *h /= n.max(1) as f64;
    }
    feats.extend(hist);
    feats
}

/// Fréchet distance between the geometry-feature clouds of two layout
/// sets. Lower is better; 0 for identical sets.
pub fn frechet_layout_distance(
    a: &[Layout],
    b: &[Layout],
    nmax: usize,
    num_categories: usize,
) -> Result<f64> {
    let fa: Vec<Vec<f64>> =
        a.iter().map(|l| geometry_features(l, nmax, num_categories)).collect();
    let fb: Vec<Vec<f64>> =
        b.iter().map(|l| geometry_features(l, nmax, num_categories)).collect();
    frechet_distance(&fa, &fb)
}

/// Mean per-layout scores of one set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SetStats {
    pub alignment: f64,
    pub overlap: f64,
}

impl SetStats {
    pub fn of(set: &[Layout]) -> Self {
        let n = set.len().max(1) as f64;
        SetStats {
            alignment: set.iter().map(alignment_score).sum::<f64>() / n,
            overlap: set.iter().map(overlap_score).sum::<f64>() / n,
        }
    }
}

/// Full comparison of a generated set against a reference set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub generated: SetStats,
    pub reference: SetStats,
    /// Mean optimally-matched layout IoU (higher is better).
    pub matched_iou: f64,
    /// Fréchet distance over geometry features (lower is better).
    pub frechet: f64,
}

pub fn evaluate_set(
    generated: &[Layout],
    reference: &[Layout],
    nmax: usize,
    num_categories: usize,
) -> Result<MetricsReport> {
    if generated.is_empty() || reference.is_empty() {
        return Err(Error::domain("evaluation needs non-empty sets"));
    }
    Ok(MetricsReport {
        generated: SetStats::of(generated),
        reference: SetStats::of(reference),
        matched_iou: mean_matched_iou(generated, reference)?,
        frechet: frechet_layout_distance(generated, reference, nmax, num_categories)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Element, Layout};

    fn el(category: usize, cx: f64, cy: f64, w: f64, h: f64) -> Element {
        Element { category, cx, cy, w, h }
    }

    #[test]
    fn perfectly_aligned_grid_scores_zero() {
        let layout = Layout::new(vec![
            el(0, 0.25, 0.25, 0.3, 0.3),
            el(0, 0.25, 0.75, 0.3, 0.3), // shares left/right/center-x
            el(1, 0.75, 0.25, 0.3, 0.3), // shares top/bottom/center-y
        ]);
        assert_eq!(alignment_score(&layout), 0.0);
    }

    #[test]
    fn alignment_matches_a_hand_computed_example() {
        // Channels: e1 L=0.1 C=0.2 R=0.3, T=0.1 M=0.2 B=0.3;
        //           e2 L=0.3 C=0.45 R=0.6, T=0.4 M=0.5 B=0.6.
        // L1 vs e2: closest channel gap is |0.1-0.3| = 0.2 ... except
        // R1=0.3 vs L2=0.3 are different channels; same-channel gaps only.
        let layout = Layout::new(vec![
            el(0, 0.2, 0.2, 0.2, 0.2),
            el(0, 0.45, 0.5, 0.3, 0.2),
        ]);
        let a = 0.2; // min same-channel gap, both elements
        let expect = 100.0 / 2.0 * (2.0 * -(1.0f64 - a).ln());
        let got = alignment_score(&layout);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn single_element_layouts_are_trivially_aligned() {
        let layout = Layout::new(vec![el(0, 0.4, 0.4, 0.2, 0.2)]);
        assert_eq!(alignment_score(&layout), 0.0);
        assert_eq!(overlap_score(&layout), 0.0);
    }

    #[test]
    fn overlap_of_half_overlapping_boxes() {
        let layout = Layout::new(vec![
            el(0, 0.25, 0.5, 0.5, 1.0),
            el(0, 0.5, 0.5, 0.5, 1.0),
        ]);
        // Intersection 0.25, total area 1.0.
        assert!((overlap_score(&layout) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn disjoint_boxes_do_not_overlap() {
        let layout = Layout::new(vec![
            el(0, 0.2, 0.2, 0.2, 0.2),
            el(0, 0.7, 0.7, 0.2, 0.2),
        ]);
        assert_eq!(overlap_score(&layout), 0.0);
    }

    #[test]
    fn overlap_clamps_to_the_canvas() {
        // Both boxes poke outside; only the inside parts count.
        let layout = Layout::new(vec![
            el(0, 0.0, 0.5, 0.4, 0.4), // clamps to [0, 0.2] wide
            el(0, 0.1, 0.5, 0.4, 0.4), // clamps to [0, 0.3]
        ]);
        let a1 = 0.2 * 0.4;
        let a2 = 0.3 * 0.4;
        let inter = 0.2 * 0.4;
        let got = overlap_score(&layout);
        let expect = inter / (a1 + a2);
        assert!((got - expect).abs() < 1e-12, "{got} vs {expect}");
    }

    #[test]
    fn layout_iou_is_one_for_identical_layouts() {
        let layout = Layout::new(vec![
            el(0, 0.3, 0.3, 0.2, 0.2),
            el(1, 0.7, 0.7, 0.2, 0.2),
        ]);
        assert!((layout_iou(&layout, &layout) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn layout_iou_respects_categories() {
        let a = Layout::new(vec![el(0, 0.3, 0.3, 0.2, 0.2)]);
        let b = Layout::new(vec![el(1, 0.3, 0.3, 0.2, 0.2)]);
        assert_eq!(layout_iou(&a, &b), 0.0, "same box, different category");
    }

    #[test]
    fn layout_iou_penalizes_extra_elements() {
        let a = Layout::new(vec![
            el(0, 0.3, 0.3, 0.2, 0.2),
            el(1, 0.7, 0.7, 0.2, 0.2),
        ]);
        let b = Layout::new(vec![
            el(0, 0.3, 0.3, 0.2, 0.2),
            el(1, 0.7, 0.7, 0.2, 0.2),
            el(2, 0.5, 0.1, 0.1, 0.1),
        ]);
        assert!((layout_iou(&a, &b) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn layout_iou_picks_the_best_matching() {
        // Two category-0 boxes each; the crossed matching is better.
        let a = Layout::new(vec![
            el(0, 0.25, 0.25, 0.2, 0.2),
            el(0, 0.75, 0.75, 0.2, 0.2),
        ]);
        let b = Layout::new(vec![
            el(0, 0.75, 0.75, 0.2, 0.2),
            el(0, 0.25, 0.25, 0.2, 0.2),
        ]);
        assert!((layout_iou(&a, &b) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn matched_iou_is_one_for_identical_sets() {
        let sets: Vec<Layout> = (0..5)
            .map(|i| {
                Layout::new(vec![el(0, 0.1 + 0.1 * i as f64, 0.5, 0.1, 0.2)])
            })
            .collect();
        let m = mean_matched_iou(&sets, &sets).unwrap();
        assert!((m - 1.0).abs() < 1e-12, "{m}");
    }

    #[test]
    fn matched_iou_caps_large_sets() {
        let many: Vec<Layout> = (0..600)
            .map(|i| Layout::new(vec![el(0, (i % 10) as f64 * 0.1 + 0.05, 0.5, 0.08, 0.2)]))
            .collect();
        let m = mean_matched_iou(&many, &many[..50].to_vec()).unwrap();
        assert!(m > 0.0);
    }

    #[test]
    fn features_have_the_documented_length_and_content() {
        let layout = Layout::new(vec![
            el(0, 0.3, 0.4, 0.2, 0.2),
            el(2, 0.7, 0.4, 0.2, 0.2),
        ]);
        let f = geometry_features(&layout, 8, 4);
        assert_eq!(f.len(), 12 + 4);
        assert!((f[0] - 0.25).abs() < 1e-12, "count fraction");
        assert!((f[1] - 0.5).abs() < 1e-12, "mean cx");
        assert!((f[2] - 0.2).abs() < 1e-12, "std cx");
        assert!((f[3] - 0.4).abs() < 1e-12, "mean cy");
        assert_eq!(f[4], 0.0, "std cy");
        let hist = &f[12..];
        assert_eq!(hist, [0.5, 0.0, 0.5, 0.0]);
    }

    #[test]
    fn frechet_layout_distance_separates_different_sets() {
        let tight: Vec<Layout> = (0..30)
            .map(|i| Layout::new(vec![el(0, 0.5, 0.5, 0.2 + 0.001 * i as f64, 0.2)]))
            .collect();
        let spread: Vec<Layout> = (0..30)
            .map(|i| Layout::new(vec![el(0, 0.1 + 0.02 * i as f64, 0.2, 0.4, 0.6)]))
            .collect();
        let same = frechet_layout_distance(&tight, &tight, 8, 2).unwrap();
        let diff = frechet_layout_distance(&tight, &spread, 8, 2).unwrap();
        assert!(same < 1e-9);
        assert!(diff > 0.01, "distance {diff}");
    }

    #[test]
    fn evaluate_set_produces_a_full_report() {
        let a: Vec<Layout> = (0..10)
            .map(|i| Layout::new(vec![el(0, 0.1 * i as f64 + 0.05, 0.5, 0.08, 0.3)]))
            .collect();
        let report = evaluate_set(&a, &a, 8, 2).unwrap();
        assert!((report.matched_iou - 1.0).abs() < 1e-12);
        assert!(report.frechet < 1e-9);
        assert_eq!(report.generated, report.reference);
        assert!(evaluate_set(&[], &a, 8, 2).is_err());
    }
}
