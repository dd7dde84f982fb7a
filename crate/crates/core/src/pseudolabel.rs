//! Pseudo boundary labels from a trained network: multi-scale and flip
//! aggregation, removal of classes absent from the image, non-maximum
//! suppression along the boundary normal, and Otsu binarization.

use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Result};
use crate::imaging::{gaussian_blur, resize_bilinear, resize_multi, BoundaryLabelMap, MultiScoreMap, ScoreMap};
use crate::net::{combine, ModelParams, Outputs};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MsfConfig {
    pub scales: Vec<f64>,
    pub use_flip: bool,
}

impl Default for MsfConfig {
    fn default() -> Self {
        MsfConfig {
            scales: vec![0.75, 1.0, 1.25],
            use_flip: true,
        }
    }
}

impl MsfConfig {
    /// Single scale, no flip: plain inference.
    pub fn off() -> Self {
        MsfConfig {
            scales: vec![1.0],
            use_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.scales.is_empty() {
            return bad_config("msf.scales", "must not be empty");
        }
        if self.scales.iter().any(|&s| !(s > 0.0 && s.is_finite())) {
            return bad_config("msf.scales", "scales must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NmsConfig {
    pub radius: usize,
    pub multiplier: f64,
    /// Smoothing applied before estimating the boundary orientation.
    pub sigma: f64,
}

impl Default for NmsConfig {
    fn default() -> Self {
        NmsConfig {
            radius: 10,
            multiplier: 1.1,
            sigma: 1.0,
        }
    }
}

impl NmsConfig {
    pub fn validate(&self) -> Result<()> {
        if self.radius < 1 {
            return bad_config("nms.radius", "must be at least 1");
        }
        if !(self.multiplier >= 1.0 && self.multiplier.is_finite()) {
            return bad_config("nms.multiplier", "must be at least 1");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad_config("nms.sigma", "must be non-negative");
        }
        Ok(())
    }
}

fn scaled_len(len: usize, scale: f64) -> usize {
    ((len as f64 * scale).round() as usize).max(1)
}

fn add_into<T: Real>(acc: &mut [T], x: &[T]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

/// Branch outputs of one pass at `scale`, resampled back to the input size.
fn pass_at_scale<T: Real>(params: &ModelParams<T>, image: &MultiScoreMap<T>, scale: f64) -> Result<(ScoreMap<T>, MultiScoreMap<T>)> {
    let (w, h) = (image.width(), image.height());
    let (sw, sh) = (scaled_len(w, scale), scaled_len(h, scale));
    let input = resize_multi(image, sw, sh)?;
    let out = params.forward_any(&input)?;
    Ok((resize_bilinear(&out.b_ag, w, h)?, resize_multi(&out.b_aw, w, h)?))
}

/// Averages branch outputs over scales (and mirrored copies), then recombines.
///
/// At each scale the plain and un-mirrored flipped outputs are summed first,
/// so mirroring the input mirrors the result exactly.
pub fn msf_predict<T: Real>(params: &ModelParams<T>, image: &MultiScoreMap<T>, msf: &MsfConfig) -> Result<Outputs<T>> {
    msf.validate()?;
    let (w, h) = (image.width(), image.height());
    let classes = params.config().num_classes;
    let mut ag = ScoreMap::<T>::zeros(w, h);
    let mut aw = MultiScoreMap::<T>::zeros(w, h, classes);
    let flipped = msf.use_flip.then(|| image.flip_horizontal());
    for &scale in &msf.scales {
        let (mut a, mut b) = pass_at_scale(params, image, scale)?;
        if let Some(f) = &flipped {
            let (fa, fb) = pass_at_scale(params, f, scale)?;
            add_into(a.as_mut_slice(), fa.flip_horizontal().as_slice());
            add_into(b.as_mut_slice(), fb.flip_horizontal().as_slice());
        }
        add_into(ag.as_mut_slice(), a.as_slice());
        add_into(aw.as_mut_slice(), b.as_slice());
    }
    let count = T::of((msf.scales.len() * if msf.use_flip { 2 } else { 1 }) as f64);
    ag.as_mut_slice().iter_mut().for_each(|v| *v /= count);
    aw.as_mut_slice().iter_mut().for_each(|v| *v /= count);
    let b_final = combine(&ag, &aw);
    Ok(Outputs { b_ag: ag, b_aw: aw, b_final })
}

/// Zeroes the channels of classes not in `image_labels`.
pub fn filter_irrelevant_classes<T: Real>(map: &MultiScoreMap<T>, image_labels: &[usize]) -> Result<MultiScoreMap<T>> {
    if let Some(&c) = image_labels.iter().find(|&&c| c >= map.channels()) {
        return invalid(format!("label {c} exceeds the {} channels", map.channels()));
    }
    let mut out = map.clone();
    for c in 0..map.channels() {
        if !image_labels.contains(&c) {
            out.channel_mut(c).iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

/// Unit normal (across the boundary) per pixel from the smoothed structure
/// tensor of Sobel gradients of the `sigma`-smoothed map.
fn normals(score: &ScoreMap<f64>, sigma: f64) -> Vec<(f64, f64)> {
    let (w, h) = (score.width(), score.height());
    let s = gaussian_blur(score, sigma);
    let at = |x: isize, y: isize| s.get(x.clamp(0, w as isize - 1) as usize, y.clamp(0, h as isize - 1) as usize);
    let mut jxx = ScoreMap::<f64>::zeros(w, h);
    let mut jxy = ScoreMap::<f64>::zeros(w, h);
    let mut jyy = ScoreMap::<f64>::zeros(w, h);
    for y in 0..h as isize {
        for x in 0..w as isize {
            let gx = (at(x + 1, y - 1) + 2.0 * at(x + 1, y) + at(x + 1, y + 1)) - (at(x - 1, y - 1) + 2.0 * at(x - 1, y) + at(x - 1, y + 1));
            let gy = (at(x - 1, y + 1) + 2.0 * at(x, y + 1) + at(x + 1, y + 1)) - (at(x - 1, y - 1) + 2.0 * at(x, y - 1) + at(x + 1, y - 1));
            jxx.set(x as usize, y as usize, gx * gx);
            jxy.set(x as usize, y as usize, gx * gy);
            jyy.set(x as usize, y as usize, gy * gy);
        }
    }
    // Integrate over a neighbourhood so ridge centres, where the gradient
    // vanishes, inherit the orientation of their flanks.
    let rho = sigma.max(1.0);
    let (jxx, jxy, jyy) = (gaussian_blur(&jxx, rho), gaussian_blur(&jxy, rho), gaussian_blur(&jyy, rho));
    (0..w * h)
        .map(|i| {
            let (a, b, c) = (jxx.as_slice()[i], jxy.as_slice()[i], jyy.as_slice()[i]);
            let theta = 0.5 * (2.0 * b).atan2(a - c);
            (theta.cos(), theta.sin())
        })
        .collect()
}

/// Bilinear sample with zero outside the grid.
fn sample(map: &ScoreMap<f64>, x: f64, y: f64) -> f64 {
    let (w, h) = (map.width() as isize, map.height() as isize);
    let (x0, y0) = (x.floor() as isize, y.floor() as isize);
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |xx: isize, yy: isize| {
        if xx < 0 || yy < 0 || xx >= w || yy >= h {
            0.0
        } else {
            map.get(xx as usize, yy as usize)
        }
    };
    (1.0 - fy) * ((1.0 - fx) * px(x0, y0) + fx * px(x0 + 1, y0)) + fy * ((1.0 - fx) * px(x0, y0 + 1) + fx * px(x0 + 1, y0 + 1))
}

/// One suppression pass; returns the number of pixels zeroed.
fn nms_pass(map: &mut ScoreMap<f64>, cfg: &NmsConfig) -> usize {
    let (w, h) = (map.width(), map.height());
    let dirs = normals(map, cfg.sigma);
    let src = map.clone();
    let mut zeroed = 0;
    for y in 0..h {
        for x in 0..w {
            let s = src.get(x, y);
            if s <= 0.0 {
                continue;
            }
            let (nx, ny) = dirs[y * w + x];
            let bound = cfg.multiplier * s;
            let survives = (1..=cfg.radius).all(|t| {
                let t = t as f64;
                sample(&src, x as f64 + t * nx, y as f64 + t * ny) <= bound && sample(&src, x as f64 - t * nx, y as f64 - t * ny) <= bound
            });
            if !survives {
                map.set(x, y, 0.0);
                zeroed += 1;
            }
        }
    }
    zeroed
}

/// Thins a boundary map: a pixel survives when `multiplier * score` is at
/// least every bilinear sample at offsets `1..=radius` along both directions
/// of its boundary normal. Passes repeat until nothing changes, so the
/// result is a fixed point. Survivors keep their original score.
pub fn nms_thin<T: Real>(score: &ScoreMap<T>, cfg: &NmsConfig) -> Result<ScoreMap<T>> {
    cfg.validate()?;
    let mut map = score.cast::<f64>();
    if map.as_slice().iter().any(|v| !v.is_finite()) {
        return invalid("non-finite score");
    }
    while nms_pass(&mut map, cfg) > 0 {}
    // Zero exactly where the f64 copy was zeroed, keep the original values
    // elsewhere.
    let mut out = score.clone();
    for (o, &m) in out.as_mut_slice().iter_mut().zip(map.as_slice()) {
        if m == 0.0 {
            *o = T::zero();
        }
    }
    Ok(out)
}

pub const OTSU_BINS: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OtsuResult {
    pub threshold: f64,
    /// All inputs were equal; `threshold` is that value.
    pub degenerate: bool,
}

/// Candidate edges `min + k * (max - min) / 256` for `k = 1..=255`; index 0
/// is `min` itself.
pub fn otsu_candidates(min: f64, max: f64) -> Vec<f64> {
    let width = (max - min) / OTSU_BINS as f64;
    (0..OTSU_BINS).map(|k| min + k as f64 * width).collect()
}

/// Bin of `v`: the number of candidate edges `t_1..t_255` not above `v`.
fn bin_of(v: f64, edges: &[f64]) -> usize {
    edges[1..].partition_point(|&t| t <= v)
}

/// Otsu threshold over a 256-bin histogram spanning `[min, max]`.
///
/// Class statistics use integer bin indices, so the between-class variance
/// `(n1*s0 - n0*s1)^2 / (n0*n1)` is compared exactly. Values `>= threshold`
/// form the upper class; ties go to the lower threshold.
pub fn otsu_threshold(values: &[f64]) -> Result<OtsuResult> {
    if values.is_empty() {
        return invalid("otsu threshold of an empty set");
    }
    if values.iter().any(|v| !v.is_finite()) {
        return invalid("otsu threshold of non-finite values");
    }
    let min = values.iter().copied().fold(f64::INFINITY, f64::min);
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if min == max {
        return Ok(OtsuResult {
            threshold: min,
            degenerate: true,
        });
    }
    let edges = otsu_candidates(min, max);
    let mut hist = [0u64; OTSU_BINS];
    for &v in values {
        hist[bin_of(v, &edges)] += 1;
    }
    let total_n: u64 = hist.iter().sum();
    let total_s: u64 = hist.iter().enumerate().map(|(b, &c)| b as u64 * c).sum();
    let (mut n0, mut s0) = (0u64, 0u64);
    let mut best: Option<(usize, u128, u128)> = None;
    for k in 1..OTSU_BINS {
        n0 += hist[k - 1];
        s0 += (k as u64 - 1) * hist[k - 1];
        let (n1, s1) = (total_n - n0, total_s - s0);
        if n0 == 0 || n1 == 0 {
            continue;
        }
        let diff = (n1 as i128 * s0 as i128 - n0 as i128 * s1 as i128).unsigned_abs();
        let (num, den) = (diff * diff, n0 as u128 * n1 as u128);
        // num/den > best_num/best_den, compared without division.
        let better = match best {
            None => true,
            Some((_, bn, bd)) => num * bd > bn * den,
        };
        if better {
            best = Some((k, num, den));
        }
    }
    let (k, _, _) = best.expect("min and max fall in different bins");
    Ok(OtsuResult {
        threshold: edges[k],
        degenerate: false,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoLabel {
    pub hard: BoundaryLabelMap,
    /// Aggregated, class-filtered final map before thinning.
    pub soft: MultiScoreMap<f32>,
    /// Class-filtered map after thinning.
    pub thinned: MultiScoreMap<f32>,
    pub threshold: f64,
    pub degenerate: bool,
}

/// Hard labels from already aggregated outputs.
pub fn pseudo_labels_from_outputs(out: &Outputs<f32>, image_labels: &[usize], nms: Option<&NmsConfig>) -> Result<PseudoLabel> {
    let soft = filter_irrelevant_classes(&out.b_final, image_labels)?;
    let (w, h, classes) = (soft.width(), soft.height(), soft.channels());
    let mut thinned = soft.clone();
    if let Some(cfg) = nms {
        for &c in image_labels {
            let t = nms_thin(&soft.channel_map(c), cfg)?;
            thinned.channel_mut(c).copy_from_slice(t.as_slice());
        }
    }
    let pooled: Vec<f64> = image_labels
        .iter()
        .flat_map(|&c| thinned.channel(c).iter().filter(|&&v| v > 0.0).map(|&v| v as f64))
        .collect();
    let mut hard = BoundaryLabelMap::empty(w, h, classes);
    if pooled.is_empty() {
        return Ok(PseudoLabel {
            hard,
            soft,
            thinned,
            threshold: 0.0,
            degenerate: true,
        });
    }
    let otsu = otsu_threshold(&pooled)?;
    for &c in image_labels {
        for (b, &v) in hard.channel_mut(c).iter_mut().zip(thinned.channel(c)) {
            *b = v > 0.0 && v as f64 >= otsu.threshold;
        }
    }
    Ok(PseudoLabel {
        hard,
        soft,
        thinned,
        threshold: otsu.threshold,
        degenerate: otsu.degenerate,
    })
}

/// Full pseudo-label procedure for one image.
pub fn make_pseudo_labels(
    params: &ModelParams<f32>,
    image: &MultiScoreMap<f32>,
    image_labels: &[usize],
    msf: &MsfConfig,
    nms: Option<&NmsConfig>,
) -> Result<PseudoLabel> {
    let out = msf_predict(params, image, msf)?;
    pseudo_labels_from_outputs(&out, image_labels, nms)
}
