//! Confident object/background regions from CAMs, and the refinement step
//! that cleans them up before line segments are drawn.

use serde::{Deserialize, Serialize};

use crate::error::{bad_config, invalid, Result};
use crate::imaging::{RgbImage, ScoreMap, SegMask, BACKGROUND};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum PixelState {
    Class(u8),
    Background,
    Ignore,
}

impl PixelState {
    pub fn is_confident(self) -> bool {
        self != PixelState::Ignore
    }

    /// PGM palette: 0 background, `1..=C` classes, 255 ignore.
    pub fn to_palette(self) -> u8 {
        match self {
            PixelState::Background => 0,
            PixelState::Class(c) => c + 1,
            PixelState::Ignore => 255,
        }
    }

    pub fn from_palette(v: u8) -> Self {
        match v {
            0 => PixelState::Background,
            255 => PixelState::Ignore,
            c => PixelState::Class(c - 1),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ConfidentLabelMap {
    width: usize,
    height: usize,
    states: Vec<PixelState>,
}

impl ConfidentLabelMap {
    pub fn from_states(width: usize, height: usize, states: Vec<PixelState>) -> Result<Self> {
        if states.len() != width * height {
            return invalid("state count does not match dimensions");
        }
        if let Some(PixelState::Class(c)) = states.iter().find(|s| matches!(s, PixelState::Class(c) if *c >= 254)) {
            return invalid(format!("class id {c} does not fit the palette"));
        }
        Ok(ConfidentLabelMap { width, height, states })
    }

    pub fn filled(width: usize, height: usize, state: PixelState) -> Self {
        ConfidentLabelMap {
            width,
            height,
            states: vec![state; width * height],
        }
    }

    /// Treats a ground-truth mask as a fully confident label map.
    pub fn from_mask(mask: &SegMask) -> Self {
        let states = mask
            .labels()
            .iter()
            .map(|&l| if l == BACKGROUND { PixelState::Background } else { PixelState::Class(l) })
            .collect();
        ConfidentLabelMap {
            width: mask.width(),
            height: mask.height(),
            states,
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> PixelState {
        self.states[y * self.width + x]
    }

    #[inline]
    pub fn state(&self, idx: usize) -> PixelState {
        self.states[idx]
    }

    pub fn set(&mut self, x: usize, y: usize, s: PixelState) {
        self.states[y * self.width + x] = s;
    }

    pub fn states(&self) -> &[PixelState] {
        &self.states
    }

    /// `M̃_c`: indicator of class `c`.
    pub fn is_class(&self, idx: usize, class: usize) -> bool {
        self.states[idx] == PixelState::Class(class as u8)
    }

    pub fn to_palette(&self) -> Vec<u8> {
        self.states.iter().map(|s| s.to_palette()).collect()
    }

    pub fn from_palette(width: usize, height: usize, pixels: &[u8]) -> Result<Self> {
        Self::from_states(width, height, pixels.iter().map(|&v| PixelState::from_palette(v)).collect())
    }

    pub fn flip_horizontal(&self) -> Self {
        let mut out = self.clone();
        for row in out.states.chunks_mut(self.width.max(1)) {
            row.reverse();
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SeedThresholds {
    /// Fraction of the normalized score range, counted from the top, that is
    /// confidently object.
    pub fg_keep_fraction: f32,
    /// Scores at or below this are confidently background.
    pub bg_keep_fraction: f32,
}

impl Default for SeedThresholds {
    fn default() -> Self {
        SeedThresholds {
            fg_keep_fraction: 0.70,
            bg_keep_fraction: 0.05,
        }
    }
}

impl SeedThresholds {
    pub fn validate(&self) -> Result<()> {
        if !(self.fg_keep_fraction > 0.0 && self.fg_keep_fraction < 1.0) {
            return bad_config("seeds.fg_keep_fraction", "must be in (0, 1)");
        }
        if !(self.bg_keep_fraction > 0.0 && self.bg_keep_fraction < 1.0) {
            return bad_config("seeds.bg_keep_fraction", "must be in (0, 1)");
        }
        Ok(())
    }
}

/// Thresholds the CAMs of the classes in `image_labels` into confident
/// class, confident background and ignore.
pub fn confident_regions(
    cams: &[ScoreMap<f32>],
    image_labels: &[usize],
    th: &SeedThresholds,
) -> Result<ConfidentLabelMap> {
    if image_labels.is_empty() {
        return invalid("image has no class labels");
    }
    th.validate()?;
    let Some(first) = cams.first() else {
        return invalid("no cams given");
    };
    let (w, h) = (first.width(), first.height());
    if let Some(&c) = image_labels.iter().find(|&&c| c >= cams.len()) {
        return invalid(format!("label {c} has no cam"));
    }
    let mut labels = image_labels.to_vec();
    labels.sort_unstable();
    labels.dedup();
    let fg_cut = 1.0 - th.fg_keep_fraction;
    let states = (0..w * h)
        .map(|i| {
            let mut best = labels[0];
            let mut best_v = cams[best].as_slice()[i];
            for &c in &labels[1..] {
                let v = cams[c].as_slice()[i];
                if v > best_v {
                    best = c;
                    best_v = v;
                }
            }
            if best_v >= fg_cut {
                PixelState::Class(best as u8)
            } else if best_v <= th.bg_keep_fraction {
                PixelState::Background
            } else {
                PixelState::Ignore
            }
        })
        .collect();
    ConfidentLabelMap::from_states(w, h, states)
}

/// Post-processing of a confident label map (the role dense CRF plays in the
/// original method).
pub trait Refiner: Send + Sync {
    fn refine(&self, seeds: &ConfidentLabelMap, image: &RgbImage) -> ConfidentLabelMap;
}

pub struct IdentityRefiner;

impl Refiner for IdentityRefiner {
    fn refine(&self, seeds: &ConfidentLabelMap, _image: &RgbImage) -> ConfidentLabelMap {
        seeds.clone()
    }
}

/// Each confident pixel takes the majority confident state of its `k x k`
/// window if that state holds at least `min_share` of the window's confident
/// pixels; otherwise it becomes ignore. Ignore pixels stay ignore.
pub struct MajorityRefiner {
    pub k: usize,
    pub min_share: f64,
}

impl MajorityRefiner {
    pub fn new(k: usize) -> Self {
        MajorityRefiner { k, min_share: 0.6 }
    }
}

impl Refiner for MajorityRefiner {
    fn refine(&self, seeds: &ConfidentLabelMap, _image: &RgbImage) -> ConfidentLabelMap {
        let (w, h) = (seeds.width as isize, seeds.height as isize);
        let r = (self.k / 2) as isize;
        let mut counts: Vec<(PixelState, usize)> = Vec::with_capacity(8);
        let mut out = seeds.clone();
        for y in 0..h {
            for x in 0..w {
                if !seeds.get(x as usize, y as usize).is_confident() {
                    continue;
                }
                counts.clear();
                let mut total = 0usize;
                for ny in (y - r).max(0)..=(y + r).min(h - 1) {
                    for nx in (x - r).max(0)..=(x + r).min(w - 1) {
                        let s = seeds.get(nx as usize, ny as usize);
                        if !s.is_confident() {
                            continue;
                        }
                        total += 1;
                        match counts.iter_mut().find(|(st, _)| *st == s) {
                            Some((_, n)) => *n += 1,
                            None => counts.push((s, 1)),
                        }
                    }
                }
                // A tie never reaches the share threshold; the key only fixes the pick order.
                let (state, n) = counts.iter().copied().max_by_key(|&(s, n)| (n, std::cmp::Reverse(s))).expect("pixel itself is counted");
                let next = if n as f64 >= self.min_share * total as f64 { state } else { PixelState::Ignore };
                out.set(x as usize, y as usize, next);
            }
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum RefinerConfig {
    Identity,
    Majority { k: usize },
}

impl Default for RefinerConfig {
    fn default() -> Self {
        RefinerConfig::Majority { k: 3 }
    }
}

impl RefinerConfig {
    pub fn validate(&self) -> Result<()> {
        match *self {
            RefinerConfig::Majority { k } if k == 0 || k % 2 == 0 => bad_config("seeds.refiner.k", "must be odd and positive"),
            _ => Ok(()),
        }
    }

    pub fn build(&self) -> Box<dyn Refiner> {
        match *self {
            RefinerConfig::Identity => Box::new(IdentityRefiner),
            RefinerConfig::Majority { k } => Box::new(MajorityRefiner::new(k)),
        }
    }
}

pub fn refine_labels(seed_map: &ConfidentLabelMap, image: &RgbImage, refiner: &dyn Refiner) -> Result<ConfidentLabelMap> {
    if (seed_map.width, seed_map.height) != (image.width(), image.height()) {
        return invalid("label map and image dimensions differ");
    }
    Ok(refiner.refine(seed_map, image))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn map1(values: &[f32]) -> ScoreMap<f32> {
        ScoreMap::from_vec(values.len(), 1, values.to_vec()).unwrap()
    }

    #[test]
    fn indicator_cam_has_no_ignore() {
        let cam = map1(&[0.0, 1.0, 1.0, 0.0]);
        let m = confident_regions(&[cam], &[0], &SeedThresholds::default()).unwrap();
        use PixelState::*;
        assert_eq!(m.states(), &[Background, Class(0), Class(0), Background]);
    }

    #[test]
    fn middle_scores_are_ignored_and_argmax_wins() {
        let th = SeedThresholds::default();
        let m = confident_regions(&[map1(&[0.2])], &[0], &th).unwrap();
        assert_eq!(m.states(), &[PixelState::Ignore]);
        let m = confident_regions(&[map1(&[0.6, 0.5]), map1(&[0.4, 0.5])], &[0, 1], &th).unwrap();
        assert_eq!(m.states(), &[PixelState::Class(0), PixelState::Class(0)]);
        let m = confident_regions(&[map1(&[0.4]), map1(&[0.6])], &[0, 1], &th).unwrap();
        assert_eq!(m.states(), &[PixelState::Class(1)]);
    }

    #[test]
    fn absent_classes_are_never_assigned() {
        let m = confident_regions(&[map1(&[0.1, 0.9]), map1(&[1.0, 1.0])], &[0], &SeedThresholds::default()).unwrap();
        assert_eq!(m.states(), &[PixelState::Ignore, PixelState::Class(0)]);
        assert!(confident_regions(&[map1(&[0.1])], &[], &SeedThresholds::default()).is_err());
    }

    #[test]
    fn identity_refiner_is_identity() {
        let m = ConfidentLabelMap::from_states(2, 1, vec![PixelState::Ignore, PixelState::Class(1)]).unwrap();
        let img = RgbImage::new(2, 1);
        assert_eq!(refine_labels(&m, &img, &IdentityRefiner).unwrap(), m);
    }

    #[test]
    fn isolated_island_is_absorbed() {
        let mut m = ConfidentLabelMap::filled(5, 5, PixelState::Background);
        m.set(2, 2, PixelState::Class(0));
        let out = refine_labels(&m, &RgbImage::new(5, 5), &MajorityRefiner::new(3)).unwrap();
        assert_eq!(out, ConfidentLabelMap::filled(5, 5, PixelState::Background));
    }

    #[test]
    fn uniform_maps_are_fixed_points() {
        for k in [1, 3, 5, 7] {
            let m = ConfidentLabelMap::filled(6, 4, PixelState::Class(2));
            assert_eq!(MajorityRefiner::new(k).refine(&m, &RgbImage::new(6, 4)), m);
        }
    }

    #[test]
    fn palette_roundtrip() {
        for s in [PixelState::Background, PixelState::Ignore, PixelState::Class(0), PixelState::Class(5)] {
            assert_eq!(PixelState::from_palette(s.to_palette()), s);
        }
    }

    fn arb_state() -> impl Strategy<Value = PixelState> {
        prop_oneof![Just(PixelState::Background), Just(PixelState::Ignore), (0u8..3).prop_map(PixelState::Class)]
    }

    proptest! {
        #[test]
        fn regions_partition_and_respect_labels(
            w in 1usize..8, h in 1usize..8,
            vals in prop::collection::vec(0.0f32..=1.0, 3 * 64),
            labels in prop::sample::subsequence(vec![0usize, 1, 2], 1..=3),
            bg in 0.01f32..0.5, bg2 in 0.01f32..0.5,
        ) {
            let n = w * h;
            let cams: Vec<_> = (0..3).map(|c| ScoreMap::from_vec(w, h, vals[c * 64..c * 64 + n].to_vec()).unwrap()).collect();
            let th = SeedThresholds { fg_keep_fraction: 0.4, bg_keep_fraction: bg.min(bg2) };
            let lo = confident_regions(&cams, &labels, &th).unwrap();
            let hi = confident_regions(&cams, &labels, &SeedThresholds { bg_keep_fraction: bg.max(bg2), ..th }).unwrap();
            for i in 0..n {
                if let PixelState::Class(c) = lo.state(i) {
                    prop_assert!(labels.contains(&(c as usize)));
                }
                if lo.state(i) == PixelState::Background {
                    prop_assert_eq!(hi.state(i), PixelState::Background);
                }
            }
        }

        #[test]
        fn majority_matches_brute_force(w in 1usize..9, h in 1usize..9, states in prop::collection::vec(arb_state(), 81), k in prop::sample::select(vec![1usize, 3, 5])) {
            let m = ConfidentLabelMap::from_states(w, h, states[..w * h].to_vec()).unwrap();
            let out = MajorityRefiner::new(k).refine(&m, &RgbImage::new(w, h));
            let r = (k / 2) as i64;
            for y in 0..h as i64 {
                for x in 0..w as i64 {
                    let s = m.get(x as usize, y as usize);
                    let o = out.get(x as usize, y as usize);
                    if s == PixelState::Ignore {
                        prop_assert_eq!(o, PixelState::Ignore);
                        continue;
                    }
                    let mut window = Vec::new();
                    for yy in y - r..=y + r {
                        for xx in x - r..=x + r {
                            if xx >= 0 && yy >= 0 && xx < w as i64 && yy < h as i64 {
                                let v = m.get(xx as usize, yy as usize);
                                if v != PixelState::Ignore { window.push(v); }
                            }
                        }
                    }
                    let passing: Vec<PixelState> = window.iter().copied()
                        .filter(|cand| 5 * window.iter().filter(|v| *v == cand).count() >= 3 * window.len())
                        .collect();
                    match passing.first() {
                        Some(&p) => prop_assert_eq!(o, p),
                        None => prop_assert_eq!(o, PixelState::Ignore),
                    }
                }
            }
        }
    }
}
