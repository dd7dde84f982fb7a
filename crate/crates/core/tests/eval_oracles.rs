//! Boundary matching, PR curves, MF and AP against independent oracles.

use milboundary::eval::{
    average_precision_points, evaluate_class_agnostic, evaluate_class_aware, f_measure, match_boundaries, mf_ods, pr_curve, thresholds,
    EvalPair, MatchCounts, Tolerance,
};
use milboundary::imaging::{BoundaryLabelMap, MultiScoreMap};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn on_pixels(bits: &[bool], w: usize) -> Vec<(i64, i64)> {
    bits.iter()
        .enumerate()
        .filter(|(_, &b)| b)
        .map(|(i, _)| ((i % w) as i64, (i / w) as i64))
        .collect()
}

/// Maximum bipartite matching by exhaustive search over subsets of used
/// ground-truth pixels.
fn max_matching(pred: &[(i64, i64)], gt: &[(i64, i64)], tol: f64) -> u64 {
    fn go(i: usize, used: u32, pred: &[(i64, i64)], gt: &[(i64, i64)], tol: f64, memo: &mut std::collections::HashMap<(usize, u32), u64>) -> u64 {
        if i == pred.len() {
            return 0;
        }
        if let Some(&v) = memo.get(&(i, used)) {
            return v;
        }
        let mut best = go(i + 1, used, pred, gt, tol, memo);
        for (j, g) in gt.iter().enumerate() {
            let (dx, dy) = ((pred[i].0 - g.0) as f64, (pred[i].1 - g.1) as f64);
            if used & (1 << j) == 0 && (dx * dx + dy * dy).sqrt() <= tol {
                best = best.max(1 + go(i + 1, used | (1 << j), pred, gt, tol, memo));
            }
        }
        memo.insert((i, used), best);
        best
    }
    go(0, 0, pred, gt, tol, &mut Default::default())
}

fn sparse_bits(rng: &mut ChaCha8Rng, n: usize, max_on: usize) -> Vec<bool> {
    let mut v = vec![false; n];
    for _ in 0..rng.gen_range(0..=max_on) {
        v[rng.gen_range(0..n)] = true;
    }
    v
}

#[test]
fn matching_has_maximum_cardinality() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for case in 0..400 {
        let (w, h) = (rng.gen_range(2..9), rng.gen_range(2..9));
        let pred = sparse_bits(&mut rng, w * h, 12);
        let gt = sparse_bits(&mut rng, w * h, 12);
        let tol = [1.0, 1.5, 2.0, 2.5][case % 4];
        let c = match_boundaries(&pred, &gt, w, h, tol).unwrap();
        let (p, g) = (on_pixels(&pred, w), on_pixels(&gt, w));
        let tp = max_matching(&p, &g, tol);
        assert_eq!(c, MatchCounts { tp, fp: p.len() as u64 - tp, fn_: g.len() as u64 - tp }, "case {case}");
    }
}

fn flip(bits: &[bool], w: usize) -> Vec<bool> {
    (0..bits.len()).map(|i| bits[(i / w) * w + (w - 1 - i % w)]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn matching_is_mirror_invariant_and_monotone_in_tolerance(seed in any::<u64>(), w in 4usize..24, h in 4usize..24) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = sparse_bits(&mut rng, w * h, w * h / 4);
        let gt = sparse_bits(&mut rng, w * h, w * h / 4);
        let mut last = 0;
        for tol in [1.0, 1.5, 2.0, 3.0, 4.5] {
            let c = match_boundaries(&pred, &gt, w, h, tol).unwrap();
            prop_assert_eq!(c, match_boundaries(&flip(&pred, w), &flip(&gt, w), w, h, tol).unwrap());
            prop_assert!(c.tp >= last);
            last = c.tp;
        }
    }
}

fn random_sample(rng: &mut ChaCha8Rng, w: usize, h: usize) -> (Vec<f32>, Vec<bool>) {
    let gt: Vec<bool> = (0..w * h).map(|i| (i % w + i / w) % 7 == 0 || rng.gen_bool(0.03)).collect();
    let pred = gt
        .iter()
        .map(|&g| {
            let base: f32 = rng.gen_range(0.0..0.6);
            if g {
                (base + 0.4).min(1.0)
            } else {
                base * base
            }
        })
        .collect();
    (pred, gt)
}

#[test]
fn dataset_curve_sums_per_sample_counts() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let samples: Vec<_> = (0..5).map(|_| random_sample(&mut rng, 20, 16)).collect();
    let pairs: Vec<_> = samples
        .iter()
        .map(|(p, g)| EvalPair {
            width: 20,
            height: 16,
            pred: p,
            gt: g,
        })
        .collect();
    let curve = pr_curve(&pairs, Tolerance::Pixels(2.0), 19).unwrap();
    assert_eq!(curve.thresholds, thresholds(19));
    for (k, &t) in curve.thresholds.iter().enumerate() {
        let mut sum = MatchCounts::default();
        for (p, g) in &samples {
            let bits: Vec<bool> = p.iter().map(|&s| s as f64 >= t).collect();
            sum += match_boundaries(&bits, g, 20, 16, 2.0).unwrap();
        }
        assert_eq!(curve.counts[k], sum, "threshold {t}");
    }
    let f = curve.f_measure();
    let (mf, t, i) = mf_ods(&curve).unwrap();
    assert!(f.iter().all(|&v| v <= mf));
    assert_eq!(f.iter().position(|&v| v == mf), Some(i));
    assert_eq!(t, curve.thresholds[i]);
    let c = curve.counts[i];
    assert!((mf - f_measure(c.precision(), c.recall())).abs() < 1e-15);
}

/// Interpolated precision at recall `r`: the best precision among points
/// with recall at least `r`, linearly joined between the sorted recall
/// values and extended flat to `r = 0`.
fn interpolated(points: &[(f64, f64)], r: f64) -> f64 {
    let envelope = |r0: f64| points.iter().filter(|p| p.0 >= r0).map(|p| p.1).fold(f64::MIN, f64::max);
    let mut rs: Vec<f64> = points.iter().map(|p| p.0).collect();
    rs.sort_by(f64::total_cmp);
    rs.dedup();
    if r <= rs[0] {
        return envelope(rs[0]);
    }
    let k = rs.iter().position(|&x| x >= r).expect("r within range");
    let (r0, r1) = (rs[k - 1], rs[k]);
    let (p0, p1) = (envelope(r0), envelope(r1));
    p0 + (p1 - p0) * (r - r0) / (r1 - r0)
}

#[test]
fn average_precision_matches_numeric_integration() {
    const GRID: usize = 64;
    const SUB: usize = 256;
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for case in 0..40 {
        let n = rng.gen_range(1..12);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.gen_range(1..=GRID) as f64 / GRID as f64, rng.gen_range(0.0..1.0)))
            .collect();
        let (r, p): (Vec<f64>, Vec<f64>) = points.iter().copied().unzip();
        let ap = average_precision_points(&r, &p);
        let r_max = r.iter().copied().fold(0.0, f64::max);
        // Midpoint rule on a grid aligned with every recall value; exact for
        // piecewise-linear integrands up to rounding.
        let cells = (r_max * GRID as f64).round() as usize * SUB;
        let dx = 1.0 / (GRID * SUB) as f64;
        let oracle: f64 = (0..cells).map(|i| interpolated(&points, (i as f64 + 0.5) * dx) * dx).sum();
        assert!((ap - oracle).abs() < 1e-9, "case {case}: {ap} vs {oracle}");
    }
}

#[test]
fn perfect_and_empty_predictions() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let gts: Vec<BoundaryLabelMap> = (0..3)
        .map(|_| BoundaryLabelMap::from_bits(16, 12, 2, (0..2 * 16 * 12).map(|_| rng.gen_bool(0.1)).collect()).unwrap())
        .collect();
    let perfect: Vec<MultiScoreMap<f32>> = gts.iter().map(|g| g.to_scores()).collect();
    let report = evaluate_class_aware(&perfect, &gts, Tolerance::default(), 9).unwrap();
    assert_eq!(report.mean_mf, 1.0);
    assert!((report.mean_ap - 1.0).abs() < 1e-12);
    let agnostic = evaluate_class_agnostic(&perfect, &gts, Tolerance::default(), 9).unwrap();
    assert_eq!(agnostic.mf, 1.0);
    let empty: Vec<MultiScoreMap<f32>> = gts.iter().map(|_| MultiScoreMap::zeros(16, 12, 2)).collect();
    let report = evaluate_class_aware(&empty, &gts, Tolerance::default(), 9).unwrap();
    assert_eq!((report.mean_mf, report.mean_ap), (0.0, 0.0));
}

#[test]
fn class_agnostic_pools_channels() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let gts: Vec<BoundaryLabelMap> = (0..3)
        .map(|_| BoundaryLabelMap::from_bits(16, 12, 3, (0..3 * 16 * 12).map(|_| rng.gen_bool(0.08)).collect()).unwrap())
        .collect();
    let preds: Vec<MultiScoreMap<f32>> = (0..3)
        .map(|_| MultiScoreMap::from_vec(16, 12, 3, (0..3 * 16 * 12).map(|_| rng.gen::<f32>()).collect()).unwrap())
        .collect();
    let got = evaluate_class_agnostic(&preds, &gts, Tolerance::Pixels(1.5), 19).unwrap();
    let pooled: Vec<Vec<f32>> = preds
        .iter()
        .map(|p| (0..16 * 12).map(|i| (0..3).map(|c| p.channel(c)[i]).fold(0.0, f32::max)).collect())
        .collect();
    let unions: Vec<Vec<bool>> = gts.iter().map(|g| (0..16 * 12).map(|i| (0..3).any(|c| g.channel(c)[i])).collect()).collect();
    let pairs: Vec<_> = pooled
        .iter()
        .zip(&unions)
        .map(|(p, g)| EvalPair {
            width: 16,
            height: 12,
            pred: p,
            gt: g,
        })
        .collect();
    let curve = pr_curve(&pairs, Tolerance::Pixels(1.5), 19).unwrap();
    assert_eq!(got.mf, mf_ods(&curve).unwrap().0);
    assert_eq!(got.class, None);
}
