use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{DetectError, GraspBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    /// AP for every category present in the ground truth.
    pub per_category: BTreeMap<u32, f64>,
    pub iou_threshold: f64,
}

/// Area under the interpolated precision/recall curve for one category.
///
/// `scored` holds `(confidence, is_true_positive)` in ranked order.
pub fn average_precision(scored: &[(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut precision = Vec::with_capacity(scored.len());
    let mut recall = Vec::with_capacity(scored.len());
    let mut tp = 0usize;
    for (i, &(_, hit)) in scored.iter().enumerate() {
        tp += hit as usize;
        precision.push(tp as f64 / (i + 1) as f64);
        recall.push(tp as f64 / positives as f64);
    }
    // Monotone precision envelope, swept from the right.
    for i in (0..precision.len().saturating_sub(1)).rev() {
        precision[i] = precision[i].max(precision[i + 1]);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Mean AP over categories, matching greedily in confidence order at
/// `iou_threshold`. `predictions[i]` and `truths[i]` belong to image `i`.
pub fn evaluate_map(
    predictions: &[Vec<GraspBox>],
    truths: &[Vec<GraspBox>],
    iou_threshold: f64,
) -> Result<MapReport, DetectError> {
    if truths.is_empty() || truths.iter().all(|t| t.is_empty()) {
        return Err(DetectError::EmptyTestSet);
    }
    assert_eq!(predictions.len(), truths.len(), "one prediction list per image");
    let mut categories: Vec<u32> = truths.iter().flatten().map(|b| b.category).collect();
    categories.sort_unstable();
    categories.dedup();

    let mut per_category = BTreeMap::new();
    for &cat in &categories {
        let positives = truths.iter().flatten().filter(|b| b.category == cat).count();
        // (confidence, image, index) in ranked order; the sort is stable.
        let mut ranked: Vec<(f64, usize, &GraspBox)> = predictions
            .iter()
            .enumerate()
            .flat_map(|(img, ps)| ps.iter().filter(|b| b.category == cat).map(move |b| (b.confidence, img, b)))
            .collect();
        ranked.sort_by(|a, b| b.0.total_cmp(&a.0));
        let mut used: Vec<Vec<bool>> = truths.iter().map(|t| vec![false; t.len()]).collect();
        let mut scored = Vec::with_capacity(ranked.len());
        for (conf, img, pred) in ranked {
            let mut best: Option<(usize, f64)> = None;
            for (j, gt) in truths[img].iter().enumerate() {
                if gt.category != cat || used[img][j] {
                    continue;
                }
                let iou = pred.iou(gt);
                if iou >= iou_threshold && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((j, iou));
                }
            }
            if let Some((j, _)) = best {
                used[img][j] = true;
            }
            scored.push((conf, best.is_some()));
        }
        per_category.insert(cat, average_precision(&scored, positives));
    }
    let map = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(MapReport {
        map,
        per_category,
        iou_threshold,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn bx(category: u32, cx: f64, cy: f64, w: f64, h: f64, confidence: f64) -> GraspBox {
        GraspBox {
            category,
            cx,
            cy,
            w,
            h,
            confidence,
        }
    }

    /// Brute force: for every rank cutoff, redo the greedy matching from
    /// scratch on the prefix; AP is the sum over recall increments of the
    /// best precision at any cutoff reaching at least that recall.
    fn oracle_map(preds: &[Vec<GraspBox>], truths: &[Vec<GraspBox>], thr: f64) -> f64 {
        let mut cats: Vec<u32> = truths.iter().flatten().map(|b| b.category).collect();
        cats.sort();
        cats.dedup();
        let mut total = 0.0;
        for &cat in &cats {
            let npos = truths.iter().flatten().filter(|b| b.category == cat).count() as f64;
            let mut all: Vec<(usize, usize, GraspBox)> = Vec::new();
            for (i, ps) in preds.iter().enumerate() {
                for (k, p) in ps.iter().enumerate() {
                    if p.category == cat {
                        all.push((i, k, *p));
                    }
                }
            }
            // Stable insertion sort by descending confidence.
            for a in 1..all.len() {
                let mut b = a;
                while b > 0 && all[b - 1].2.confidence < all[b].2.confidence {
                    all.swap(b - 1, b);
                    b -= 1;
                }
            }
            let mut points = Vec::new();
            for cut in 1..=all.len() {
                let mut taken = vec![];
                let mut tp = 0.0;
                for (img, _, p) in &all[..cut] {
                    let mut best = None;
                    let mut best_iou = -1.0;
                    for (j, g) in truths[*img].iter().enumerate() {
                        if g.category == cat && !taken.contains(&(*img, j)) {
                            let iou = p.iou(g);
                            if iou >= thr && iou > best_iou {
                                best_iou = iou;
                                best = Some(j);
                            }
                        }
                    }
                    if let Some(j) = best {
                        taken.push((*img, j));
                        tp += 1.0;
                    }
                }
                points.push((tp / npos, tp / cut as f64));
            }
            let mut recalls: Vec<f64> = points.iter().map(|p| p.0).collect();
            recalls.dedup();
            let mut ap = 0.0;
            let mut prev = 0.0;
            for r in recalls {
                if r <= prev {
                    continue;
                }
                let p = points.iter().filter(|q| q.0 >= r).map(|q| q.1).fold(0.0, f64::max);
                ap += (r - prev) * p;
                prev = r;
            }
            total += ap;
        }
        total / cats.len() as f64
    }

    fn random_case(seed: u64) -> (Vec<Vec<GraspBox>>, Vec<Vec<GraspBox>>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let images = rng.random_range(1..4);
        let mut preds = Vec::new();
        let mut truths = Vec::new();
        for _ in 0..images {
            let mut t = Vec::new();
            for _ in 0..rng.random_range(0..4) {
                t.push(bx(
                    rng.random_range(1..3),
                    rng.random_range(5.0..40.0),
                    rng.random_range(5.0..40.0),
                    rng.random_range(3.0..10.0),
                    rng.random_range(3.0..10.0),
                    1.0,
                ));
            }
            let mut p = Vec::new();
            for g in &t {
                if rng.random::<f64>() < 0.8 {
                    let d = rng.random_range(0.0..4.0);
                    p.push(bx(g.category, g.cx + d, g.cy - d / 2.0, g.w, g.h, (rng.random_range(0..10) as f64) / 10.0));
                }
            }
            for _ in 0..rng.random_range(0..3) {
                p.push(bx(
                    rng.random_range(1..3),
                    rng.random_range(5.0..40.0),
                    rng.random_range(5.0..40.0),
                    5.0,
                    5.0,
                    (rng.random_range(0..10) as f64) / 10.0,
                ));
            }
            preds.push(p);
            truths.push(t);
        }
        if truths.iter().all(|t| t.is_empty()) {
            truths[0].push(bx(1, 20.0, 20.0, 5.0, 5.0, 1.0));
        }
        (preds, truths)
    }

    #[test]
    fn perfect_and_empty_predictions() {
        let truths = vec![
            vec![bx(1, 10.0, 10.0, 4.0, 4.0, 1.0), bx(2, 30.0, 30.0, 6.0, 4.0, 1.0)],
            vec![bx(1, 50.0, 12.0, 5.0, 5.0, 1.0)],
        ];
        assert_eq!(evaluate_map(&truths, &truths, 0.5).unwrap().map, 1.0);
        let none = vec![vec![], vec![]];
        assert_eq!(evaluate_map(&none, &truths, 0.5).unwrap().map, 0.0);
        assert!(matches!(evaluate_map(&none, &none, 0.5), Err(DetectError::EmptyTestSet)));
    }

    #[test]
    fn hand_computed_case() {
        // One category, two positives. Ranked: TP, FP, TP.
        let truths = vec![vec![bx(1, 10.0, 10.0, 4.0, 4.0, 1.0), bx(1, 40.0, 40.0, 4.0, 4.0, 1.0)]];
        let preds = vec![vec![
            bx(1, 10.0, 10.0, 4.0, 4.0, 0.9),
            bx(1, 70.0, 70.0, 4.0, 4.0, 0.8),
            bx(1, 40.0, 40.0, 4.0, 4.0, 0.7),
        ]];
        // Envelope precision at recall 0.5 is 1, at recall 1 it is 2/3.
        let ap = evaluate_map(&preds, &truths, 0.5).unwrap().map;
        assert!((ap - (0.5 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
    }

    #[test]
    fn matches_brute_force_oracle_on_small_cases() {
        for seed in 0..200 {
            let (p, t) = random_case(seed);
            let fast = evaluate_map(&p, &t, 0.5).unwrap().map;
            let slow = oracle_map(&p, &t, 0.5);
            assert!((fast - slow).abs() < 1e-9, "seed {seed}: {fast} vs {slow}");
        }
    }

    proptest! {
        #[test]
        fn low_confidence_false_positives_never_raise_map(seed in 0u64..500, extra in 1usize..5) {
            let (mut p, t) = random_case(seed);
            let before = evaluate_map(&p, &t, 0.5).unwrap().map;
            let floor = p.iter().flatten().map(|b| b.confidence).fold(1.0, f64::min);
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 77);
            for _ in 0..extra {
                let img = rng.random_range(0..p.len());
                p[img].push(bx(rng.random_range(1..3), 90.0, 90.0, 3.0, 3.0, floor * 0.5));
            }
            let after = evaluate_map(&p, &t, 0.5).unwrap().map;
            prop_assert!(after <= before + 1e-12);
        }
    }
}
