//! Valid line segments between confident pixels and their semantic boundary
//! labels.
//!
//! A segment joins two confident pixels closer than `gamma`. It is a positive
//! bag for class `c` when exactly one endpoint is confidently `c`, so a
//! segment carries at most two labels.

use std::io::Write;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, Error, Result};
use crate::seeds::{ConfidentLabelMap, PixelState};

pub type Coord = (usize, usize);

/// Set of class ids below 64.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash)]
pub struct LabelSet(u64);

impl LabelSet {
    pub fn empty() -> Self {
        LabelSet(0)
    }

    pub fn insert(&mut self, c: usize) {
        assert!(c < 64, "class id {c} exceeds label set capacity");
        self.0 |= 1 << c;
    }

    pub fn contains(self, c: usize) -> bool {
        c < 64 && self.0 & (1 << c) != 0
    }

    pub fn len(self) -> usize {
        self.0.count_ones() as usize
    }

    pub fn is_empty(self) -> bool {
        self.0 == 0
    }

    /// Members in increasing order.
    pub fn iter(self) -> impl Iterator<Item = usize> {
        let mut bits = self.0;
        std::iter::from_fn(move || {
            (bits != 0).then(|| {
                let c = bits.trailing_zeros() as usize;
                bits &= bits - 1;
                c
            })
        })
    }
}

impl FromIterator<usize> for LabelSet {
    fn from_iter<I: IntoIterator<Item = usize>>(iter: I) -> Self {
        let mut s = LabelSet::empty();
        for c in iter {
            s.insert(c);
        }
        s
    }
}

/// A materialized segment (debugging, tests, hand-built bags).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LineSegment {
    pub start: Coord,
    pub end: Coord,
    pub pixels: Vec<Coord>,
    pub labels: LabelSet,
}

impl LineSegment {
    pub fn new(start: Coord, end: Coord) -> Self {
        LineSegment {
            start,
            end,
            pixels: rasterize_line(start, end),
            labels: LabelSet::empty(),
        }
    }

    pub fn with_labels(mut self, labels: impl IntoIterator<Item = usize>) -> Self {
        self.labels = labels.into_iter().collect();
        self
    }
}

fn raster_before(a: Coord, b: Coord) -> bool {
    (a.1, a.0) < (b.1, b.0)
}

fn bresenham(a: (i64, i64), b: (i64, i64)) -> Vec<(i64, i64)> {
    let (mut x, mut y) = a;
    let dx = (b.0 - a.0).abs();
    let dy = -(b.1 - a.1).abs();
    let sx = if a.0 < b.0 { 1 } else { -1 };
    let sy = if a.1 < b.1 { 1 } else { -1 };
    let mut err = dx + dy;
    let mut out = Vec::with_capacity((dx.max(-dy) + 1) as usize);
    loop {
        out.push((x, y));
        if (x, y) == b {
            return out;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// Bresenham rasterization, endpoints inclusive. The raster-order-first
/// endpoint is always traced forward so that `rasterize_line(b, a)` is the
/// reverse of `rasterize_line(a, b)`.
pub fn rasterize_line(a: Coord, b: Coord) -> Vec<Coord> {
    let conv = |p: Coord| (p.0 as i64, p.1 as i64);
    let back = |v: Vec<(i64, i64)>| v.into_iter().map(|(x, y)| (x as usize, y as usize)).collect::<Vec<_>>();
    if raster_before(b, a) {
        let mut v = back(bresenham(conv(b), conv(a)));
        v.reverse();
        v
    } else {
        back(bresenham(conv(a), conv(b)))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SegmentConfig {
    /// Segments are strictly shorter than this (Euclidean, pixel centers).
    pub gamma: f64,
    /// Optional cap on segments anchored at one pixel, subsampled with `seed`.
    pub max_per_pixel: Option<usize>,
    pub seed: u64,
}

impl Default for SegmentConfig {
    fn default() -> Self {
        SegmentConfig {
            gamma: 10.0,
            max_per_pixel: None,
            seed: 0,
        }
    }
}

impl SegmentConfig {
    pub fn with_gamma(gamma: f64) -> Self {
        SegmentConfig {
            gamma,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 2.0 && self.gamma.is_finite()) {
            return bad_config("segments.gamma", "must be at least 2");
        }
        if self.max_per_pixel == Some(0) {
            return bad_config("segments.max_per_pixel", "must be positive when set");
        }
        Ok(())
    }
}

/// Forward half-disc of offsets shorter than `gamma`, in raster order, with the
/// rasterized path of each offset relative to its anchor.
#[derive(Debug, Clone)]
struct OffsetTable {
    offsets: Vec<(i64, i64)>,
    paths: Vec<Vec<(i64, i64)>>,
}

impl OffsetTable {
    fn new(gamma: f64) -> Self {
        let r = gamma.ceil() as i64;
        let g2 = gamma * gamma;
        let mut offsets = Vec::new();
        for dy in 0..=r {
            for dx in -r..=r {
                if (dy == 0 && dx <= 0) || ((dx * dx + dy * dy) as f64) >= g2 {
                    continue;
                }
                offsets.push((dx, dy));
            }
        }
        let paths = offsets.iter().map(|&o| bresenham((0, 0), o)).collect();
        OffsetTable { offsets, paths }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
struct Segment {
    anchor: u32,
    path: u32,
    labels: LabelSet,
}

/// All valid segments of one image, stored as anchor pixel + shared path.
///
/// Path pixels are kept as linear offsets from the anchor, so iteration over
/// a bag is a slice walk.
#[derive(Debug, Clone)]
pub struct SegmentSets {
    width: usize,
    height: usize,
    num_classes: usize,
    path_offsets: Vec<isize>,
    path_ranges: Vec<(u32, u32)>,
    segments: Vec<Segment>,
}

impl PartialEq for SegmentSets {
    fn eq(&self, other: &Self) -> bool {
        self.width == other.width
            && self.height == other.height
            && self.num_classes == other.num_classes
            && self.len() == other.len()
            && (0..self.len()).all(|i| self.segment(i) == other.segment(i))
    }
}

impl SegmentSets {
    /// Builds sets from explicit segments (tests and hand-made bags).
    pub fn from_segments(width: usize, height: usize, num_classes: usize, segs: &[LineSegment]) -> Result<Self> {
        let mut out = SegmentSets {
            width,
            height,
            num_classes,
            path_offsets: Vec::new(),
            path_ranges: Vec::new(),
            segments: Vec::new(),
        };
        for s in segs {
            if s.pixels.is_empty() {
                return Err(Error::Contract("segment without pixels".into()));
            }
            if s.pixels.iter().any(|&(x, y)| x >= width || y >= height) {
                return Err(Error::InvalidInput("segment pixel out of bounds".into()));
            }
            if s.labels.iter().any(|c| c >= num_classes) {
                return Err(Error::InvalidInput("segment label exceeds class count".into()));
            }
            let anchor = s.pixels[0].1 * width + s.pixels[0].0;
            let start = out.path_offsets.len() as u32;
            out.path_offsets
                .extend(s.pixels.iter().map(|&(x, y)| (y * width + x) as isize - anchor as isize));
            out.path_ranges.push((start, out.path_offsets.len() as u32));
            out.segments.push(Segment {
                anchor: anchor as u32,
                path: out.path_ranges.len() as u32 - 1,
                labels: s.labels,
            });
        }
        Ok(out)
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

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }

    /// Linear pixel indices of bag `i`, from `x_i` to `x_j`.
    #[inline]
    pub fn pixel_indices(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let s = self.segments[i];
        let (a, b) = self.path_ranges[s.path as usize];
        let anchor = s.anchor as isize;
        self.path_offsets[a as usize..b as usize].iter().map(move |&o| (anchor + o) as usize)
    }

    /// Anchor index and linear offsets of bag `i`.
    #[inline]
    pub(crate) fn bag(&self, i: usize) -> (usize, &[isize]) {
        let s = self.segments[i];
        let (a, b) = self.path_ranges[s.path as usize];
        (s.anchor as usize, &self.path_offsets[a as usize..b as usize])
    }

    #[inline]
    pub fn labels(&self, i: usize) -> LabelSet {
        self.segments[i].labels
    }

    pub fn endpoints(&self, i: usize) -> (Coord, Coord) {
        let s = self.segments[i];
        let (a, b) = self.path_ranges[s.path as usize];
        let first = (s.anchor as isize + self.path_offsets[a as usize]) as usize;
        let last = (s.anchor as isize + self.path_offsets[b as usize - 1]) as usize;
        ((first % self.width, first / self.width), (last % self.width, last / self.width))
    }

    pub fn segment(&self, i: usize) -> LineSegment {
        let (start, end) = self.endpoints(i);
        LineSegment {
            start,
            end,
            pixels: self.pixel_indices(i).map(|p| (p % self.width, p / self.width)).collect(),
            labels: self.labels(i),
        }
    }

    /// `|S_c^+|`.
    pub fn positive_count(&self, class: usize) -> usize {
        self.segments.iter().filter(|s| s.labels.contains(class)).count()
    }

    /// `|S^+|`, segments positive for at least one class.
    pub fn any_positive_count(&self) -> usize {
        self.segments.iter().filter(|s| !s.labels.is_empty()).count()
    }

    /// Indices of `S_c^+`.
    pub fn positives(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.labels(i).contains(class)).collect()
    }

    /// Indices of `S_c^-`.
    pub fn negatives(&self, class: usize) -> Vec<usize> {
        (0..self.len()).filter(|&i| !self.labels(i).contains(class)).collect()
    }

    /// Canonical `(raster-first, raster-second)` endpoint pairs.
    pub fn canonical_pairs(&self) -> Vec<(Coord, Coord, LabelSet)> {
        let mut v: Vec<_> = (0..self.len())
            .map(|i| {
                let (a, b) = self.endpoints(i);
                let (a, b) = if raster_before(b, a) { (b, a) } else { (a, b) };
                (a, b, self.labels(i))
            })
            .collect();
        v.sort_by_key(|&(a, b, l)| ((a.1, a.0), (b.1, b.0), l.0));
        v
    }

    /// Debug dump: `xi,yi,xj,yj,labels` with labels joined by `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "xi,yi,xj,yj,labels")?;
        for i in 0..self.len() {
            let ((xi, yi), (xj, yj)) = self.endpoints(i);
            let labels: Vec<String> = self.labels(i).iter().map(|c| c.to_string()).collect();
            writeln!(w, "{xi},{yi},{xj},{yj},{}", labels.join(";"))?;
        }
        Ok(())
    }
}

fn segment_labels(a: PixelState, b: PixelState) -> Result<LabelSet> {
    if !a.is_confident() || !b.is_confident() {
        return Err(Error::Contract("segment endpoint lies in an ignore region".into()));
    }
    let mut l = LabelSet::empty();
    if a != b {
        for s in [a, b] {
            if let PixelState::Class(c) = s {
                l.insert(c as usize);
            }
        }
    }
    Ok(l)
}

fn build(labels: &ConfidentLabelMap, num_classes: usize, cfg: &SegmentConfig, with_labels: bool) -> Result<SegmentSets> {
    cfg.validate()?;
    let (w, h) = (labels.width(), labels.height());
    let table = OffsetTable::new(cfg.gamma);
    let mut path_offsets = Vec::new();
    let mut path_ranges = Vec::with_capacity(table.paths.len());
    for p in &table.paths {
        let start = path_offsets.len() as u32;
        path_offsets.extend(p.iter().map(|&(dx, dy)| (dy * w as i64 + dx) as isize));
        path_ranges.push((start, path_offsets.len() as u32));
    }
    let rows: Vec<Vec<Segment>> = (0..h)
        .into_par_iter()
        .map(|y| {
            let mut row = Vec::new();
            let mut partners = Vec::new();
            for x in 0..w {
                let a = labels.get(x, y);
                if !a.is_confident() {
                    continue;
                }
                partners.clear();
                for (k, &(dx, dy)) in table.offsets.iter().enumerate() {
                    let (nx, ny) = (x as i64 + dx, y as i64 + dy);
                    if nx < 0 || nx >= w as i64 || ny >= h as i64 {
                        continue;
                    }
                    if labels.get(nx as usize, ny as usize).is_confident() {
                        partners.push((k, nx as usize, ny as usize));
                    }
                }
                let anchor = y * w + x;
                let chosen: Vec<usize> = match cfg.max_per_pixel {
                    Some(cap) if partners.len() > cap => {
                        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ (anchor as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
                        let mut idx = sample(&mut rng, partners.len(), cap).into_vec();
                        idx.sort_unstable();
                        idx
                    }
                    _ => (0..partners.len()).collect(),
                };
                for i in chosen {
                    let (k, nx, ny) = partners[i];
                    let l = if with_labels {
                        segment_labels(a, labels.get(nx, ny)).expect("both endpoints confident")
                    } else {
                        LabelSet::empty()
                    };
                    row.push(Segment {
                        anchor: anchor as u32,
                        path: k as u32,
                        labels: l,
                    });
                }
            }
            row
        })
        .collect();
    Ok(SegmentSets {
        width: w,
        height: h,
        num_classes,
        path_offsets,
        path_ranges,
        segments: rows.into_iter().flatten().collect(),
    })
}

/// Every unordered pair of confident pixels closer than `gamma`, without
/// labels. Work is `O(N gamma^2)`.
pub fn enumerate_valid_segments(labels: &ConfidentLabelMap, num_classes: usize, cfg: &SegmentConfig) -> Result<SegmentSets> {
    build(labels, num_classes, cfg, false)
}

/// Assigns each segment the classes `c` with `M̃_c(x_i) != M̃_c(x_j)`.
pub fn label_segments(mut sets: SegmentSets, labels: &ConfidentLabelMap) -> Result<SegmentSets> {
    if (labels.width(), labels.height()) != (sets.width, sets.height) {
        return Err(Error::InvalidInput("label map and segment grid differ".into()));
    }
    for i in 0..sets.len() {
        let ((xi, yi), (xj, yj)) = sets.endpoints(i);
        let l = segment_labels(labels.get(xi, yi), labels.get(xj, yj))?;
        if l.iter().any(|c| c >= sets.num_classes) {
            return Err(Error::InvalidInput("label map class exceeds class count".into()));
        }
        sets.segments[i].labels = l;
    }
    Ok(sets)
}

/// Enumeration and labeling in one pass.
pub fn build_segment_sets(labels: &ConfidentLabelMap, num_classes: usize, cfg: &SegmentConfig) -> Result<SegmentSets> {
    if let Some(PixelState::Class(c)) = labels.states().iter().find(|s| matches!(s, PixelState::Class(c) if *c as usize >= num_classes)) {
        return Err(Error::InvalidInput(format!("label map class {c} exceeds class count")));
    }
    build(labels, num_classes, cfg, true)
}
