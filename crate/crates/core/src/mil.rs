//! Max-aggregated multiple-instance losses for the two boundary maps.
//!
//! Each segment is a bag whose score is the maximum of the map over its
//! pixels. The class-agnostic loss treats any labelled segment as positive;
//! the class-aware loss normalizes positives and negatives per class. The
//! subgradient of `max` goes entirely to the first maximal pixel along the
//! segment.

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::imaging::{MultiScoreMap, ScoreMap};
use crate::real::Real;
use crate::segments::{LineSegment, SegmentSets};

pub const DEFAULT_EPS: f64 = 1e-7;
pub const DEFAULT_LAMBDA: f64 = 0.25;

/// Segments per reduction chunk. Fixed so results do not depend on the
/// number of worker threads.
const CHUNK: usize = 8192;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BagScore<T> {
    pub value: T,
    /// Linear index of the first pixel attaining `value`.
    pub argmax: usize,
    pub segment: usize,
    /// `None` for the class-agnostic map.
    pub class: Option<usize>,
}

/// Maximum of `map` along `seg`, ties resolved to the earliest pixel from
/// `seg.start`.
pub fn bag_score<T: Real>(map: &ScoreMap<T>, seg: &LineSegment) -> Result<BagScore<T>> {
    let Some(&(x0, y0)) = seg.pixels.first() else {
        return Err(Error::Contract("bag without pixels".into()));
    };
    if seg.pixels.iter().any(|&(x, y)| x >= map.width() || y >= map.height()) {
        return invalid("segment pixel outside the map");
    }
    let mut best = (map.get(x0, y0), y0 * map.width() + x0);
    for &(x, y) in &seg.pixels[1..] {
        let v = map.get(x, y);
        if v > best.0 {
            best = (v, y * map.width() + x);
        }
    }
    Ok(BagScore {
        value: best.0,
        argmax: best.1,
        segment: 0,
        class: None,
    })
}

/// Bag scores of every segment on one plane.
pub fn bag_scores<T: Real>(plane: &[T], sets: &SegmentSets) -> Vec<BagScore<T>> {
    (0..sets.len())
        .map(|i| {
            let mut it = sets.pixel_indices(i);
            let p0 = it.next().expect("segments are non-empty");
            let mut best = (plane[p0], p0);
            for p in it {
                if plane[p] > best.0 {
                    best = (plane[p], p);
                }
            }
            BagScore {
                value: best.0,
                argmax: best.1,
                segment: i,
                class: None,
            }
        })
        .collect()
}

/// A loss term that was dropped because its bag set was empty.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct EmptyTerm {
    /// `None` for the class-agnostic loss.
    pub class: Option<usize>,
    pub positive: bool,
}

#[derive(Debug, Clone)]
pub struct MilLoss<G> {
    pub value: f64,
    pub grad: G,
    pub warnings: Vec<EmptyTerm>,
}

#[derive(Debug, Clone)]
pub struct LossBreakdown<T> {
    pub l_ag: f64,
    pub l_aw: f64,
    pub lambda: f64,
    pub total: f64,
    /// Gradient of `total` w.r.t. `B_ag` (already scaled by `lambda`).
    pub grad_ag: ScoreMap<T>,
    pub grad_aw: MultiScoreMap<T>,
    pub warnings: Vec<EmptyTerm>,
}

/// Per-bag BCE term and its derivative w.r.t. the bag score.
#[inline]
fn bce_term(b: f64, positive: bool, eps: f64) -> (f64, f64) {
    let bh = b.clamp(eps, 1.0 - eps);
    let clamped = b < eps || b > 1.0 - eps;
    if positive {
        (-bh.ln(), if clamped { 0.0 } else { -1.0 / bh })
    } else {
        (-(1.0 - bh).ln(), if clamped { 0.0 } else { 1.0 / (1.0 - bh) })
    }
}

fn inv(n: usize) -> f64 {
    if n == 0 {
        0.0
    } else {
        1.0 / n as f64
    }
}

/// Per-plane loss sums and planar gradients from one pass over the bags.
struct Partial<T> {
    values: Vec<f64>,
    grads: Vec<T>,
}

/// One plane scored by the MIL loss. `class: None` means any label makes the
/// bag positive; `weights` are `(1/|S^+|, 1/|S^-|)` times any outer factor.
struct PlaneSpec<'a, T> {
    data: &'a [T],
    class: Option<usize>,
    weights: (f64, f64),
}

/// Loss sums and gradients for every plane in `planes`.
///
/// A bag's term depends only on its argmax pixel and polarity, so the bag
/// walk just counts positive and negative bags per (plane, pixel); the BCE
/// terms are then evaluated once per pixel.
fn mil_pass<T: Real>(sets: &SegmentSets, planes: &[PlaneSpec<'_, T>], eps: f64) -> Partial<T> {
    let n = sets.width() * sets.height();
    let k_count = planes.len();
    let counts: Vec<Vec<u32>> = planes
        .iter()
        .map(|spec| {
            (0..sets.len().div_ceil(CHUNK))
                .into_par_iter()
                .map(|chunk| count_pass(sets, spec, chunk * CHUNK..((chunk + 1) * CHUNK).min(sets.len())))
                .reduce(
                    || vec![0u32; 2 * n],
                    |mut a, b| {
                        for (x, y) in a.iter_mut().zip(&b) {
                            *x += y;
                        }
                        a
                    },
                )
        })
        .collect();

    let mut out = Partial {
        values: vec![0.0; k_count],
        grads: vec![T::zero(); n * k_count],
    };
    for (k, spec) in planes.iter().enumerate() {
        let (wp, wn) = spec.weights;
        let (pos, neg) = counts[k].split_at(n);
        let (mut vp, mut vn) = (0.0, 0.0);
        for p in 0..n {
            let (cp, cn) = (pos[p], neg[p]);
            if cp == 0 && cn == 0 {
                continue;
            }
            let b = spec.data[p].as_f64();
            let mut g = 0.0;
            if cp > 0 {
                let (l, d) = bce_term(b, true, eps);
                vp += cp as f64 * l;
                g += wp * cp as f64 * d;
            }
            if cn > 0 {
                let (l, d) = bce_term(b, false, eps);
                vn += cn as f64 * l;
                g += wn * cn as f64 * d;
            }
            out.grads[k * n + p] = T::of(g);
        }
        out.values[k] = wp * vp + wn * vn;
    }
    out
}

/// Counts, for bags in `range`, how often each pixel is the first argmax of
/// the plane. Layout: positive bags' counts, then negative bags'.
fn count_pass<T: Real>(sets: &SegmentSets, spec: &PlaneSpec<'_, T>, range: std::ops::Range<usize>) -> Vec<u32> {
    let n = sets.width() * sets.height();
    let plane = spec.data;
    let mut counts = vec![0u32; 2 * n];
    for i in range {
        let (anchor, path) = sets.bag(i);
        let p0 = (anchor as isize + path[0]) as usize;
        let (mut bv, mut bp) = (plane[p0], p0);
        for &o in &path[1..] {
            let p = (anchor as isize + o) as usize;
            let v = plane[p];
            // Mask arithmetic instead of a branch: the comparison is
            // unpredictable and the compiler will not always emit a select.
            let mask = usize::from(v > bv).wrapping_neg();
            bp = (p & mask) | (bp & !mask);
            bv = if v > bv { v } else { bv };
        }
        let labels = sets.labels(i);
        let pos = match spec.class {
            None => !labels.is_empty(),
            Some(c) => labels.contains(c),
        };
        counts[usize::from(!pos) * n + bp] += 1;
    }
    counts
}

fn check_dims(w: usize, h: usize, sets: &SegmentSets) -> Result<()> {
    if (w, h) != (sets.width(), sets.height()) {
        return invalid(format!(
            "map is {w}x{h} but segments were built on {}x{}",
            sets.width(),
            sets.height()
        ));
    }
    Ok(())
}

fn ag_weights(sets: &SegmentSets, warnings: &mut Vec<EmptyTerm>) -> (f64, f64) {
    let np = sets.any_positive_count();
    let nn = sets.len() - np;
    for (count, positive) in [(np, true), (nn, false)] {
        if count == 0 {
            warnings.push(EmptyTerm { class: None, positive });
        }
    }
    (inv(np), inv(nn))
}

fn aw_weights(sets: &SegmentSets, channels: usize, warnings: &mut Vec<EmptyTerm>) -> Vec<(f64, f64)> {
    let mut pos = vec![0usize; channels];
    for i in 0..sets.len() {
        for c in sets.labels(i).iter().filter(|&c| c < channels) {
            pos[c] += 1;
        }
    }
    let scale = 1.0 / channels as f64;
    (0..channels)
        .map(|c| {
            let (np, nn) = (pos[c], sets.len() - pos[c]);
            for (count, positive) in [(np, true), (nn, false)] {
                if count == 0 {
                    warnings.push(EmptyTerm { class: Some(c), positive });
                }
            }
            (scale * inv(np), scale * inv(nn))
        })
        .collect()
}

/// Class-agnostic loss over `S^+` (any label) and `S^-` (no label).
pub fn loss_ag<T: Real>(b_ag: &ScoreMap<T>, sets: &SegmentSets, eps: f64) -> Result<MilLoss<ScoreMap<T>>> {
    check_dims(b_ag.width(), b_ag.height(), sets)?;
    let mut warnings = Vec::new();
    let w = ag_weights(sets, &mut warnings);
    let spec = PlaneSpec {
        data: b_ag.as_slice(),
        class: None,
        weights: w,
    };
    let part = mil_pass(sets, &[spec], eps);
    Ok(MilLoss {
        value: part.values[0],
        grad: ScoreMap::from_vec(b_ag.width(), b_ag.height(), part.grads)?,
        warnings,
    })
}

/// Class-aware loss, positives and negatives normalized per class and the
/// classes averaged.
pub fn loss_aw<T: Real>(b_aw: &MultiScoreMap<T>, sets: &SegmentSets, eps: f64) -> Result<MilLoss<MultiScoreMap<T>>> {
    let c = b_aw.channels();
    if c == 0 {
        return invalid("class-aware map has no channels");
    }
    check_dims(b_aw.width(), b_aw.height(), sets)?;
    let mut warnings = Vec::new();
    let w = aw_weights(sets, c, &mut warnings);
    let specs: Vec<_> = (0..c)
        .map(|k| PlaneSpec {
            data: b_aw.channel(k),
            class: Some(k),
            weights: w[k],
        })
        .collect();
    let part = mil_pass(sets, &specs, eps);
    Ok(MilLoss {
        value: part.values.iter().sum(),
        grad: MultiScoreMap::from_vec(b_aw.width(), b_aw.height(), c, part.grads)?,
        warnings,
    })
}

/// `L = L_aw + lambda * L_ag` with gradients for both maps.
pub fn total_loss<T: Real>(
    b_ag: &ScoreMap<T>,
    b_aw: &MultiScoreMap<T>,
    sets: &SegmentSets,
    lambda: f64,
    eps: f64,
) -> Result<LossBreakdown<T>> {
    if !(lambda >= 0.0 && lambda.is_finite()) {
        return invalid("lambda must be finite and non-negative");
    }
    let c = b_aw.channels();
    if c == 0 {
        return invalid("class-aware map has no channels");
    }
    check_dims(b_ag.width(), b_ag.height(), sets)?;
    check_dims(b_aw.width(), b_aw.height(), sets)?;
    let mut warnings = Vec::new();
    let (wp, wn) = ag_weights(sets, &mut warnings);
    let aw_w = aw_weights(sets, c, &mut warnings);
    let mut specs = vec![PlaneSpec {
        data: b_ag.as_slice(),
        class: None,
        weights: (lambda * wp, lambda * wn),
    }];
    specs.extend((0..c).map(|k| PlaneSpec {
        data: b_aw.channel(k),
        class: Some(k),
        weights: aw_w[k],
    }));
    let mut part = mil_pass(sets, &specs, eps);
    // The pass accumulated lambda * L_ag; recover L_ag for reporting.
    let l_ag = if lambda > 0.0 {
        part.values[0] / lambda
    } else {
        loss_ag(b_ag, sets, eps)?.value
    };
    let l_aw: f64 = part.values[1..].iter().sum();
    let n = b_ag.len();
    let grad_aw = part.grads.split_off(n);
    Ok(LossBreakdown {
        l_ag,
        l_aw,
        lambda,
        total: l_aw + lambda * l_ag,
        grad_ag: ScoreMap::from_vec(b_ag.width(), b_ag.height(), part.grads)?,
        grad_aw: MultiScoreMap::from_vec(b_aw.width(), b_aw.height(), c, grad_aw)?,
        warnings,
    })
}
