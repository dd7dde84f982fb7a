//! Boundary evaluation: tolerance matching, dataset-level PR curves, maximum
//! F-measure at one shared threshold (ODS), and average precision.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Result};
use crate::imaging::{BoundaryLabelMap, MultiScoreMap};

pub const DEFAULT_THRESHOLDS: usize = 99;

/// Matching radius, absolute or relative to the image diagonal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tolerance {
    Pixels(f64),
    Fraction(f64),
}

impl Default for Tolerance {
    fn default() -> Self {
        Tolerance::Pixels(2.0)
    }
}

impl Tolerance {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Tolerance::Pixels(v) | Tolerance::Fraction(v) if v > 0.0 && v.is_finite() => Ok(()),
            _ => bad_config("eval.tolerance", "must be positive"),
        }
    }

    pub fn pixels(&self, width: usize, height: usize) -> f64 {
        match *self {
            Tolerance::Pixels(v) => v,
            Tolerance::Fraction(f) => f * ((width * width + height * height) as f64).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatchCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl MatchCounts {
    pub fn precision(&self) -> f64 {
        if self.tp + self.fp == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fp) as f64
        }
    }

    pub fn recall(&self) -> f64 {
        if self.tp + self.fn_ == 0 {
            0.0
        } else {
            self.tp as f64 / (self.tp + self.fn_) as f64
        }
    }

    pub fn f_measure(&self) -> f64 {
        f_measure(self.precision(), self.recall())
    }
}

impl std::ops::AddAssign for MatchCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

pub fn f_measure(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Integer offsets within `tol`, grouped by squared distance (ascending),
/// raster order inside each group.
fn offset_classes(tol: f64) -> Vec<Vec<(isize, isize)>> {
    let r = tol.floor() as isize;
    let mut all: Vec<(isize, isize, isize)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            let d2 = dx * dx + dy * dy;
            if (d2 as f64) <= tol * tol {
                all.push((d2, dy, dx));
            }
        }
    }
    all.sort_unstable();
    let mut classes: Vec<Vec<(isize, isize)>> = Vec::new();
    let mut last = -1;
    for (d2, dy, dx) in all {
        if d2 != last {
            classes.push(Vec::new());
            last = d2;
        }
        classes.last_mut().expect("pushed").push((dx, dy));
    }
    classes
}

/// One-to-one matching of predicted to ground-truth boundary pixels within
/// Euclidean distance `tol`.
///
/// Pairs are taken greedily by increasing distance (ties: prediction then
/// ground truth in raster order); augmenting paths then grow the matching
/// to maximum cardinality, which greedy alone does not always reach.
pub fn match_boundaries(pred: &[bool], gt: &[bool], width: usize, height: usize, tol: f64) -> Result<MatchCounts> {
    if pred.len() != width * height || gt.len() != width * height {
        return invalid("prediction and ground truth must both be width*height");
    }
    if !(tol > 0.0 && tol.is_finite()) {
        return invalid("tolerance must be positive");
    }
    let classes = offset_classes(tol);
    let n_pred = pred.iter().filter(|&&b| b).count() as u64;
    let n_gt = gt.iter().filter(|&&b| b).count() as u64;
    if n_pred == 0 || n_gt == 0 {
        return Ok(MatchCounts {
            tp: 0,
            fp: n_pred,
            fn_: n_gt,
        });
    }
    let (w, h) = (width as isize, height as isize);
    let neighbours = |p: usize| {
        let (x, y) = ((p % width) as isize, (p / width) as isize);
        classes.iter().flatten().filter_map(move |&(dx, dy)| {
            let (nx, ny) = (x + dx, y + dy);
            (nx >= 0 && ny >= 0 && nx < w && ny < h).then(|| (ny * w + nx) as usize)
        })
    };
    // Only predictions with a ground-truth pixel in range take part.
    let candidates: Vec<usize> = (0..pred.len()).filter(|&p| pred[p] && neighbours(p).any(|q| gt[q])).collect();

    const FREE: usize = usize::MAX;
    let mut pred_match = vec![FREE; pred.len()];
    let mut gt_match = vec![FREE; gt.len()];
    for class in &classes {
        for &p in &candidates {
            if pred_match[p] != FREE {
                continue;
            }
            let (x, y) = ((p % width) as isize, (p / width) as isize);
            for &(dx, dy) in class {
                let (nx, ny) = (x + dx, y + dy);
                if nx < 0 || ny < 0 || nx >= w || ny >= h {
                    continue;
                }
                let q = (ny * w + nx) as usize;
                if gt[q] && gt_match[q] == FREE {
                    pred_match[p] = q;
                    gt_match[q] = p;
                    break;
                }
            }
        }
    }

    // Augment from free predictions. A phase shares one visited set; when a
    // whole phase finds nothing, no augmenting path exists.
    loop {
        let mut visited = vec![false; gt.len()];
        let mut grew = false;
        for &p in &candidates {
            if pred_match[p] == FREE && augment(p, &neighbours, gt, &mut visited, &mut pred_match, &mut gt_match) {
                grew = true;
            }
        }
        if !grew {
            break;
        }
    }
    let tp = candidates.iter().filter(|&&p| pred_match[p] != FREE).count() as u64;
    Ok(MatchCounts {
        tp,
        fp: n_pred - tp,
        fn_: n_gt - tp,
    })
}

fn augment<I: Iterator<Item = usize>>(
    p: usize,
    neighbours: &impl Fn(usize) -> I,
    gt: &[bool],
    visited: &mut [bool],
    pred_match: &mut [usize],
    gt_match: &mut [usize],
) -> bool {
    // Iterative DFS over alternating paths: stack of (pred, its neighbours).
    let mut stack: Vec<(usize, I)> = vec![(p, neighbours(p))];
    let mut via: Vec<usize> = Vec::new();
    while let Some((cur, iter)) = stack.last_mut() {
        let cur = *cur;
        let Some(q) = iter.find(|&q| gt[q] && !visited[q]) else {
            stack.pop();
            via.pop();
            continue;
        };
        visited[q] = true;
        let owner = gt_match[q];
        if owner == usize::MAX {
            // Flip the path: each pred on the stack takes the gt it reached.
            via.push(q);
            let _ = cur;
            for (i, (pp, _)) in stack.iter().enumerate() {
                let qq = via[i];
                pred_match[*pp] = qq;
                gt_match[qq] = *pp;
            }
            return true;
        }
        via.push(q);
        stack.push((owner, neighbours(owner)));
    }
    false
}

/// Uniform thresholds `k / (n + 1)` for `k = 1..=n`.
pub fn thresholds(n: usize) -> Vec<f64> {
    (1..=n).map(|k| k as f64 / (n + 1) as f64).collect()
}

/// Soft prediction and ground truth of one sample for one class.
#[derive(Debug, Clone, Copy)]
pub struct EvalPair<'a> {
    pub width: usize,
    pub height: usize,
    pub pred: &'a [f32],
    pub gt: &'a [bool],
}

/// Dataset-summed counts at each threshold (prediction kept where
/// `score >= threshold`).
#[derive(Debug, Clone, PartialEq)]
pub struct PrCurve {
    pub thresholds: Vec<f64>,
    pub counts: Vec<MatchCounts>,
}

impl PrCurve {
    pub fn precision(&self) -> Vec<f64> {
        self.counts.iter().map(MatchCounts::precision).collect()
    }

    pub fn recall(&self) -> Vec<f64> {
        self.counts.iter().map(MatchCounts::recall).collect()
    }

    pub fn f_measure(&self) -> Vec<f64> {
        self.counts.iter().map(MatchCounts::f_measure).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "threshold,precision,recall,f")?;
        for (t, c) in self.thresholds.iter().zip(&self.counts) {
            writeln!(w, "{t},{},{},{}", c.precision(), c.recall(), c.f_measure())?;
        }
        Ok(())
    }
}

pub fn pr_curve(pairs: &[EvalPair<'_>], tol: Tolerance, n_thresholds: usize) -> Result<PrCurve> {
    tol.validate()?;
    if pairs.is_empty() {
        return invalid("no samples to evaluate");
    }
    if n_thresholds == 0 {
        return invalid("need at least one threshold");
    }
    for p in pairs {
        if p.pred.len() != p.width * p.height || p.gt.len() != p.width * p.height {
            return invalid("prediction and ground truth sizes differ");
        }
    }
    let ts = thresholds(n_thresholds);
    let per_sample: Vec<Vec<MatchCounts>> = pairs
        .par_iter()
        .map(|p| {
            let tol_px = tol.pixels(p.width, p.height);
            let mut bits = vec![false; p.pred.len()];
            let mut prev: Option<(Vec<bool>, MatchCounts)> = None;
            ts.iter()
                .map(|&t| {
                    for (b, &s) in bits.iter_mut().zip(p.pred) {
                        *b = s as f64 >= t;
                    }
                    // Consecutive thresholds often binarize identically.
                    if let Some((pb, c)) = &prev {
                        if *pb == bits {
                            return Ok(*c);
                        }
                    }
                    let c = match_boundaries(&bits, p.gt, p.width, p.height, tol_px)?;
                    prev = Some((bits.clone(), c));
                    Ok(c)
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;
    let mut counts = vec![MatchCounts::default(); ts.len()];
    for sample in per_sample {
        for (acc, c) in counts.iter_mut().zip(sample) {
            *acc += c;
        }
    }
    Ok(PrCurve { thresholds: ts, counts })
}

/// Maximum F over thresholds, the earliest threshold on ties.
pub fn mf_ods(curve: &PrCurve) -> Result<(f64, f64, usize)> {
    if curve.counts.is_empty() {
        return invalid("empty curve");
    }
    let f = curve.f_measure();
    let mut best = 0;
    for (i, &v) in f.iter().enumerate() {
        if v > f[best] {
            best = i;
        }
    }
    Ok((f[best], curve.thresholds[best], best))
}

/// Area under interpolated precision over recall.
///
/// Points are sorted by recall, precision is made non-increasing from high
/// recall to low, `(0, p_first)` is prepended and the area is integrated
/// with the trapezoid rule.
pub fn average_precision(curve: &PrCurve) -> Result<f64> {
    if curve.counts.is_empty() {
        return invalid("empty curve");
    }
    Ok(average_precision_points(&curve.recall(), &curve.precision()))
}

pub fn average_precision_points(recall: &[f64], precision: &[f64]) -> f64 {
    let mut pts: Vec<(f64, f64)> = recall.iter().copied().zip(precision.iter().copied()).collect();
    pts.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.total_cmp(&b.1)));
    for i in (0..pts.len().saturating_sub(1)).rev() {
        pts[i].1 = pts[i].1.max(pts[i + 1].1);
    }
    let Some(&(_, p0)) = pts.first() else {
        return 0.0;
    };
    let mut prev = (0.0, p0);
    let mut area = 0.0;
    for &(r, p) in &pts {
        area += (r - prev.0) * (p + prev.1) / 2.0;
        prev = (r, p);
    }
    area
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassMetrics {
    /// `None` for the class-agnostic row.
    pub class: Option<usize>,
    pub mf: f64,
    pub best_threshold: f64,
    pub ap: f64,
    pub best: MatchCounts,
    #[serde(skip)]
    pub curve: PrCurve,
}

fn metrics_of(class: Option<usize>, curve: PrCurve) -> Result<ClassMetrics> {
    let (mf, best_threshold, i) = mf_ods(&curve)?;
    Ok(ClassMetrics {
        class,
        mf,
        best_threshold,
        ap: average_precision(&curve)?,
        best: curve.counts[i],
        curve,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub classes: Vec<ClassMetrics>,
    /// Unweighted mean over classes.
    pub mean_mf: f64,
    pub mean_ap: f64,
}

impl EvalReport {
    /// `class,MF,best_threshold,AP,tp,fp,fn` rows plus a `mean` row.
    pub fn write_csv<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "class,MF,best_threshold,AP,tp,fp,fn")?;
        for m in &self.classes {
            let name = m.class.map_or("agnostic".to_string(), |c| c.to_string());
            writeln!(w, "{name},{:.6},{:.6},{:.6},{},{},{}", m.mf, m.best_threshold, m.ap, m.best.tp, m.best.fp, m.best.fn_)?;
        }
        writeln!(w, "mean,{:.6},,{:.6},,,", self.mean_mf, self.mean_ap)
    }
}

fn check_corpus(preds: &[MultiScoreMap<f32>], gts: &[BoundaryLabelMap]) -> Result<()> {
    if preds.len() != gts.len() || preds.is_empty() {
        return invalid("need equally many (and at least one) predictions and ground truths");
    }
    for (p, g) in preds.iter().zip(gts) {
        if (p.width(), p.height(), p.channels()) != (g.width(), g.height(), g.channels()) {
            return invalid("prediction and ground-truth shapes differ");
        }
    }
    Ok(())
}

/// Per-class MF/AP, each class with its own dataset-level threshold.
pub fn evaluate_class_aware(preds: &[MultiScoreMap<f32>], gts: &[BoundaryLabelMap], tol: Tolerance, n_thresholds: usize) -> Result<EvalReport> {
    check_corpus(preds, gts)?;
    let classes = gts[0].channels();
    let rows = (0..classes)
        .map(|c| {
            let pairs: Vec<_> = preds
                .iter()
                .zip(gts)
                .map(|(p, g)| EvalPair {
                    width: p.width(),
                    height: p.height(),
                    pred: p.channel(c),
                    gt: g.channel(c),
                })
                .collect();
            metrics_of(Some(c), pr_curve(&pairs, tol, n_thresholds)?)
        })
        .collect::<Result<Vec<_>>>()?;
    let k = rows.len().max(1) as f64;
    Ok(EvalReport {
        mean_mf: rows.iter().map(|m| m.mf).sum::<f64>() / k,
        mean_ap: rows.iter().map(|m| m.ap).sum::<f64>() / k,
        classes: rows,
    })
}

/// Class-agnostic evaluation: channel-wise max of the prediction against
/// the union of ground-truth channels.
pub fn evaluate_class_agnostic(preds: &[MultiScoreMap<f32>], gts: &[BoundaryLabelMap], tol: Tolerance, n_thresholds: usize) -> Result<ClassMetrics> {
    check_corpus(preds, gts)?;
    let pooled: Vec<_> = preds.iter().map(|p| p.max_over_channels()).collect();
    let unions: Vec<_> = gts.iter().map(|g| g.union()).collect();
    let pairs: Vec<_> = pooled
        .iter()
        .zip(&unions)
        .map(|(p, g)| EvalPair {
            width: p.width(),
            height: p.height(),
            pred: p.as_slice(),
            gt: g,
        })
        .collect();
    metrics_of(None, pr_curve(&pairs, tol, n_thresholds)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: usize, h: usize, on: &[(usize, usize)]) -> Vec<bool> {
        let mut v = vec![false; w * h];
        for &(x, y) in on {
            v[y * w + x] = true;
        }
        v
    }

    #[test]
    fn match_trivial_cases() {
        let gt = grid(8, 8, &[(1, 1), (2, 2), (3, 3), (4, 4), (5, 5), (6, 6), (7, 7)]);
        let c = match_boundaries(&gt, &gt, 8, 8, 2.0).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (7, 0, 0));
        let c = match_boundaries(&vec![false; 64], &gt, 8, 8, 2.0).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 0, 7));
    }

    #[test]
    fn augmentation_beats_plain_greedy() {
        // Pred A at (2,0) is closest to gt X (1,0) but could also take gt
        // Y (4,0); pred B at (0,0) only reaches X.
        let pred = grid(6, 1, &[(0, 0), (2, 0)]);
        let gt = grid(6, 1, &[(1, 0), (4, 0)]);
        let c = match_boundaries(&pred, &gt, 6, 1, 2.0).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (2, 0, 0));
    }

    #[test]
    fn out_of_range_is_unmatched() {
        let pred = grid(10, 1, &[(0, 0)]);
        let gt = grid(10, 1, &[(3, 0)]);
        let c = match_boundaries(&pred, &gt, 10, 1, 2.0).unwrap();
        assert_eq!((c.tp, c.fp, c.fn_), (0, 1, 1));
        assert_eq!(match_boundaries(&pred, &gt, 10, 1, 3.0).unwrap().tp, 1);
    }

    #[test]
    fn curve_of_perfect_and_uniform_maps() {
        let gt = grid(8, 8, &[(2, 2), (2, 3), (2, 4)]);
        let perfect: Vec<f32> = gt.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let pair = EvalPair {
            width: 8,
            height: 8,
            pred: &perfect,
            gt: &gt,
        };
        let c = pr_curve(&[pair], Tolerance::Pixels(2.0), 99).unwrap();
        assert!(c.precision().iter().chain(c.recall().iter()).all(|&v| v == 1.0));
        assert_eq!(mf_ods(&c).unwrap().0, 1.0);
        assert_eq!(average_precision(&c).unwrap(), 1.0);

        let half = vec![0.5f32; 64];
        let c = pr_curve(
            &[EvalPair {
                width: 8,
                height: 8,
                pred: &half,
                gt: &gt,
            }],
            Tolerance::Pixels(2.0),
            9,
        )
        .unwrap();
        for (t, cnt) in c.thresholds.iter().zip(&c.counts) {
            if *t <= 0.5 {
                assert_eq!(cnt.recall(), 1.0);
                assert!(cnt.precision() < 0.1);
            } else {
                assert_eq!(cnt.recall(), 0.0);
            }
        }
    }

    #[test]
    fn mf_picks_the_maximum() {
        let mk = |tp, fp, fn_| MatchCounts { tp, fp, fn_ };
        // F = 0.2, 0.6, 0.4
        let curve = PrCurve {
            thresholds: vec![0.25, 0.5, 0.75],
            counts: vec![mk(1, 4, 4), mk(3, 2, 2), mk(2, 3, 3)],
        };
        let f = curve.f_measure();
        assert!((f[0] - 0.2).abs() < 1e-12 && (f[1] - 0.6).abs() < 1e-12 && (f[2] - 0.4).abs() < 1e-12);
        let (mf, t, i) = mf_ods(&curve).unwrap();
        assert_eq!((i, t), (1, 0.5));
        assert!((mf - 0.6).abs() < 1e-12);
    }

    #[test]
    fn ap_of_constant_precision() {
        let r: Vec<f64> = (0..=10).map(|k| k as f64 / 10.0).collect();
        let p = vec![0.5; 11];
        assert!((average_precision_points(&r, &p) - 0.5).abs() < 1e-12);
    }

    #[test]
    fn tolerance_in_pixels() {
        assert_eq!(Tolerance::Pixels(2.0).pixels(64, 64), 2.0);
        let t = Tolerance::Fraction(0.02).pixels(64, 64);
        assert!((t - 0.02 * 64.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!(Tolerance::Pixels(0.0).validate().is_err());
    }
}
