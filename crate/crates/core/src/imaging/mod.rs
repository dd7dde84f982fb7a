//! Grid types shared by every stage, plus the handful of image operations the
//! pipeline needs (CAM normalization, boundary extraction, resampling, blur).

pub mod codec;
pub mod resample;

use crate::error::{invalid, Result};
use crate::real::Real;

pub use resample::{AxisTaps, Resampler};

/// Label value used for background pixels in a [`SegMask`].
pub const BACKGROUND: u8 = u8::MAX;

/// Single-channel float map (CAMs, the class-agnostic boundary map, ...).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMap<T = f32> {
    width: usize,
    height: usize,
    data: Vec<T>,
}

impl<T: Real> ScoreMap<T> {
    pub fn zeros(width: usize, height: usize) -> Self {
        Self::filled(width, height, T::zero())
    }

    pub fn filled(width: usize, height: usize, value: T) -> Self {
        ScoreMap {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    pub fn from_vec(width: usize, height: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height {
            return invalid(format!(
                "score map {width}x{height} needs {} values, got {}",
                width * height,
                data.len()
            ));
        }
        Ok(ScoreMap { width, height, data })
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                data.push(f(x, y));
            }
        }
        ScoreMap { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: T) {
        self.data[y * self.width + x] = v;
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    pub fn max_value(&self) -> T {
        self.data.iter().copied().fold(T::neg_infinity(), T::max)
    }

    pub fn min_value(&self) -> T {
        self.data.iter().copied().fold(T::infinity(), T::min)
    }

    pub fn cast<U: Real>(&self) -> ScoreMap<U> {
        ScoreMap {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

/// Planar stack of `channels` score maps (the class-aware map `B_aw`, its
/// product with `B_ag`, soft pseudo labels).
#[derive(Debug, Clone, PartialEq)]
pub struct MultiScoreMap<T = f32> {
    width: usize,
    height: usize,
    channels: usize,
    data: Vec<T>,
}

impl<T: Real> MultiScoreMap<T> {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        MultiScoreMap {
            width,
            height,
            channels,
            data: vec![T::zero(); width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != width * height * channels {
            return invalid(format!(
                "multi-channel map {width}x{height}x{channels} needs {} values, got {}",
                width * height * channels,
                data.len()
            ));
        }
        Ok(MultiScoreMap {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn from_channels(maps: &[ScoreMap<T>]) -> Result<Self> {
        let Some(first) = maps.first() else {
            return invalid("at least one channel is required");
        };
        let (w, h) = (first.width, first.height);
        let mut data = Vec::with_capacity(w * h * maps.len());
        for m in maps {
            if (m.width, m.height) != (w, h) {
                return invalid("channel dimensions differ");
            }
            data.extend_from_slice(&m.data);
        }
        Self::from_vec(w, h, maps.len(), data)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn plane_len(&self) -> usize {
        self.width * self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> T {
        self.data[c * self.plane_len() + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: T) {
        let n = self.plane_len();
        self.data[c * n + y * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let n = self.plane_len();
        &self.data[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let n = self.plane_len();
        &mut self.data[c * n..(c + 1) * n]
    }

    pub fn channel_map(&self, c: usize) -> ScoreMap<T> {
        ScoreMap {
            width: self.width,
            height: self.height,
            data: self.channel(c).to_vec(),
        }
    }

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [T] {
        &mut self.data
    }

    /// Pixel-wise maximum over channels.
    pub fn max_over_channels(&self) -> ScoreMap<T> {
        let n = self.plane_len();
        let mut out = vec![T::zero(); n];
        if self.channels > 0 {
            out.copy_from_slice(self.channel(0));
        }
        for c in 1..self.channels {
            for (o, &v) in out.iter_mut().zip(self.channel(c)) {
                *o = o.max(v);
            }
        }
        ScoreMap {
            width: self.width,
            height: self.height,
            data: out,
        }
    }

    pub fn cast<U: Real>(&self) -> MultiScoreMap<U> {
        MultiScoreMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

/// Ground-truth segmentation: one label per pixel, either a class id or
/// [`BACKGROUND`].
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SegMask {
    width: usize,
    height: usize,
    num_classes: usize,
    labels: Vec<u8>,
}

impl SegMask {
    pub fn background(width: usize, height: usize, num_classes: usize) -> Self {
        SegMask {
            width,
            height,
            num_classes,
            labels: vec![BACKGROUND; width * height],
        }
    }

    pub fn from_labels(width: usize, height: usize, num_classes: usize, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != width * height {
            return invalid("mask label count does not match dimensions");
        }
        if num_classes >= BACKGROUND as usize {
            return invalid("too many classes for an 8-bit mask");
        }
        if let Some(bad) = labels.iter().find(|&&l| l != BACKGROUND && l as usize >= num_classes) {
            return invalid(format!("mask label {bad} is not a class below {num_classes}"));
        }
        Ok(SegMask {
            width,
            height,
            num_classes,
            labels,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.labels[y * self.width + x]
    }

    /// Panics if `label` is neither a valid class nor background.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, label: u8) {
        assert!(label == BACKGROUND || (label as usize) < self.num_classes);
        self.labels[y * self.width + x] = label;
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    /// Sorted set of classes present in the mask.
    pub fn present_classes(&self) -> Vec<usize> {
        let mut seen = vec![false; self.num_classes];
        for &l in &self.labels {
            if l != BACKGROUND {
                seen[l as usize] = true;
            }
        }
        (0..self.num_classes).filter(|&c| seen[c]).collect()
    }

    pub fn class_indicator(&self, class: usize) -> Vec<bool> {
        self.labels.iter().map(|&l| l as usize == class && l != BACKGROUND).collect()
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.labels.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

/// Per-pixel, per-class boolean boundary labels (planar layout).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BoundaryLabelMap {
    width: usize,
    height: usize,
    channels: usize,
    bits: Vec<bool>,
}

impl BoundaryLabelMap {
    pub fn empty(width: usize, height: usize, channels: usize) -> Self {
        BoundaryLabelMap {
            width,
            height,
            channels,
            bits: vec![false; width * height * channels],
        }
    }

    pub fn from_bits(width: usize, height: usize, channels: usize, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width * height * channels {
            return invalid("boundary bit count does not match dimensions");
        }
        Ok(BoundaryLabelMap {
            width,
            height,
            channels,
            bits,
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> bool {
        self.bits[c * self.width * self.height + y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, v: bool) {
        let n = self.width * self.height;
        self.bits[c * n + y * self.width + x] = v;
    }

    pub fn channel(&self, c: usize) -> &[bool] {
        let n = self.width * self.height;
        &self.bits[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [bool] {
        let n = self.width * self.height;
        &mut self.bits[c * n..(c + 1) * n]
    }

    /// Pixel-wise OR over channels (class-agnostic boundaries).
    pub fn union(&self) -> Vec<bool> {
        let n = self.width * self.height;
        let mut out = vec![false; n];
        for c in 0..self.channels {
            for (o, &b) in out.iter_mut().zip(self.channel(c)) {
                *o |= b;
            }
        }
        out
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn as_bits(&self) -> &[bool] {
        &self.bits
    }

    /// 0/1 score map view, used to evaluate hard labels with the soft protocol.
    pub fn to_scores<T: Real>(&self) -> MultiScoreMap<T> {
        let data = self.bits.iter().map(|&b| if b { T::one() } else { T::zero() }).collect();
        MultiScoreMap {
            width: self.width,
            height: self.height,
            channels: self.channels,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.bits.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct RgbImage {
    width: usize,
    height: usize,
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![0; width * height * 3],
        }
    }

    pub fn from_raw(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if data.len() != width * height * 3 {
            return invalid("rgb buffer length does not match dimensions");
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn as_raw(&self) -> &[u8] {
        &self.data
    }

    /// One 8-bit plane per color channel.
    pub fn planes(&self) -> [Vec<u8>; 3] {
        let mut planes = [Vec::new(), Vec::new(), Vec::new()];
        for px in self.data.chunks_exact(3) {
            for k in 0..3 {
                planes[k].push(px[k]);
            }
        }
        planes
    }

    pub fn from_planes(width: usize, height: usize, planes: &[Vec<u8>; 3]) -> Result<Self> {
        let n = width * height;
        if planes.iter().any(|p| p.len() != n) {
            return invalid("plane length does not match dimensions");
        }
        let mut data = Vec::with_capacity(n * 3);
        for i in 0..n {
            data.extend([planes[0][i], planes[1][i], planes[2][i]]);
        }
        Ok(RgbImage { width, height, data })
    }

    /// Planar float tensor in `[-0.5, 0.5]`, the network's input layout.
    pub fn to_tensor<T: Real>(&self) -> MultiScoreMap<T> {
        let n = self.width * self.height;
        let mut data = vec![T::zero(); 3 * n];
        let scale = T::of(1.0 / 255.0);
        let half = T::of(0.5);
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for k in 0..3 {
                data[k * n + i] = T::of(px[k] as f64) * scale - half;
            }
        }
        MultiScoreMap {
            width: self.width,
            height: self.height,
            channels: 3,
            data,
        }
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.data.chunks_mut(self.width * 3) {
            let w = row.len() / 3;
            for x in 0..w / 2 {
                for k in 0..3 {
                    row.swap(x * 3 + k, (w - 1 - x) * 3 + k);
                }
            }
        }
        out
    }
}

/// Clamps negatives to zero and divides by the global maximum.
pub fn normalize_cam<T: Real>(raw: &ScoreMap<T>) -> Result<ScoreMap<T>> {
    if raw.is_empty() {
        return invalid("cannot normalize an empty map");
    }
    if raw.data.iter().any(|v| !v.is_finite()) {
        return invalid("cam contains non-finite values");
    }
    let clamped: Vec<T> = raw.data.iter().map(|&v| v.max(T::zero())).collect();
    let max = clamped.iter().copied().fold(T::zero(), T::max);
    let data = if max > T::zero() {
        clamped.into_iter().map(|v| v / max).collect()
    } else {
        clamped
    };
    ScoreMap::from_vec(raw.width, raw.height, data)
}

const NEIGHBORS8: [(isize, isize); 8] = [(-1, -1), (0, -1), (1, -1), (-1, 0), (1, 0), (-1, 1), (0, 1), (1, 1)];

/// Class-`c` boundary pixels: pixels of class `c` with at least one in-bounds
/// 8-neighbor carrying a different label.
pub fn extract_boundaries(mask: &SegMask) -> BoundaryLabelMap {
    let (w, h) = (mask.width, mask.height);
    let mut out = BoundaryLabelMap::empty(w, h, mask.num_classes);
    for y in 0..h {
        for x in 0..w {
            let l = mask.get(x, y);
            if l == BACKGROUND {
                continue;
            }
            let differs = NEIGHBORS8.iter().any(|&(dx, dy)| {
                let (nx, ny) = (x as isize + dx, y as isize + dy);
                nx >= 0 && ny >= 0 && (nx as usize) < w && (ny as usize) < h && mask.get(nx as usize, ny as usize) != l
            });
            if differs {
                out.set(x, y, l as usize, true);
            }
        }
    }
    out
}

pub fn resize_bilinear<T: Real>(map: &ScoreMap<T>, new_width: usize, new_height: usize) -> Result<ScoreMap<T>> {
    if new_width == 0 || new_height == 0 {
        return invalid("resize target dimensions must be positive");
    }
    if map.is_empty() {
        return invalid("cannot resize an empty map");
    }
    if (new_width, new_height) == (map.width, map.height) {
        return Ok(map.clone());
    }
    let r = Resampler::new(map.width, map.height, new_width, new_height);
    let mut out = ScoreMap::zeros(new_width, new_height);
    r.apply(&map.data, &mut out.data);
    Ok(out)
}

/// Planar multi-channel resize; see [`resize_bilinear`].
pub fn resize_multi<T: Real>(map: &MultiScoreMap<T>, new_width: usize, new_height: usize) -> Result<MultiScoreMap<T>> {
    if new_width == 0 || new_height == 0 {
        return invalid("resize target dimensions must be positive");
    }
    if (new_width, new_height) == (map.width, map.height) {
        return Ok(map.clone());
    }
    let r = Resampler::new(map.width, map.height, new_width, new_height);
    let mut out = MultiScoreMap::zeros(new_width, new_height, map.channels);
    for c in 0..map.channels {
        r.apply(map.channel(c), out.channel_mut(c));
    }
    Ok(out)
}

/// Normalized Gaussian taps for `sigma`, radius `ceil(3 sigma)`.
pub fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    k.iter_mut().for_each(|v| *v /= s);
    k
}

/// Separable Gaussian blur with replicated borders. `sigma <= 0` copies.
pub fn gaussian_blur<T: Real>(map: &ScoreMap<T>, sigma: f64) -> ScoreMap<T> {
    if sigma <= 0.0 || map.is_empty() {
        return map.clone();
    }
    let k: Vec<T> = gaussian_kernel(sigma).into_iter().map(T::of).collect();
    let r = (k.len() / 2) as isize;
    let (w, h) = (map.width as isize, map.height as isize);
    let mut tmp = vec![T::zero(); map.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in k.iter().enumerate() {
                let sx = (x + i as isize - r).clamp(0, w - 1);
                acc += kv * map.data[(y * w + sx) as usize];
            }
            tmp[(y * w + x) as usize] = acc;
        }
    }
    let mut out = vec![T::zero(); map.len()];
    for y in 0..h {
        for x in 0..w {
            let mut acc = T::zero();
            for (i, &kv) in k.iter().enumerate() {
                let sy = (y + i as isize - r).clamp(0, h - 1);
                acc += kv * tmp[(sy * w + x) as usize];
            }
            out[(y * w + x) as usize] = acc;
        }
    }
    ScoreMap {
        width: map.width,
        height: map.height,
        data: out,
    }
}
