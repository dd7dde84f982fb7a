//! Synthetic scenes: colored shapes on a textured background, with exact
//! masks, boundaries and simulated class attention maps.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{bad_config, Result};
use crate::imaging::{extract_boundaries, gaussian_blur, normalize_cam, BoundaryLabelMap, RgbImage, ScoreMap, SegMask};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disc,
    Rectangle,
    Triangle,
    Ring,
}

const KIND_CYCLE: [ShapeKind; 4] = [ShapeKind::Disc, ShapeKind::Rectangle, ShapeKind::Triangle, ShapeKind::Ring];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub image_size: usize,
    pub num_classes: usize,
    /// Inclusive range of shapes drawn per image.
    pub shapes_per_image: (usize, usize),
    /// Shape kind of each class; cycles through all kinds when empty.
    pub class_shapes: Vec<ShapeKind>,
    /// Additive uniform noise on the image, as a fraction of full scale.
    pub noise_amplitude: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        SceneConfig {
            image_size: 64,
            num_classes: 3,
            shapes_per_image: (1, 3),
            class_shapes: Vec::new(),
            noise_amplitude: 0.06,
            seed: 7,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.num_classes > 64 {
            return bad_config("scene.num_classes", "must be in 2..=64");
        }
        if self.image_size < 32 {
            return bad_config("scene.image_size", "must be at least 32");
        }
        let (lo, hi) = self.shapes_per_image;
        if lo == 0 || lo > hi {
            return bad_config("scene.shapes_per_image", "range must be non-empty and start at 1 or more");
        }
        if !self.class_shapes.is_empty() && self.class_shapes.len() != self.num_classes {
            return bad_config("scene.class_shapes", "needs one entry per class");
        }
        if !(0.0..=1.0).contains(&self.noise_amplitude) {
            return bad_config("scene.noise_amplitude", "must be in [0, 1]");
        }
        Ok(())
    }

    pub fn shape_of(&self, class: usize) -> ShapeKind {
        self.class_shapes.get(class).copied().unwrap_or(KIND_CYCLE[class % KIND_CYCLE.len()])
    }
}

/// How far a simulated CAM departs from the true class region.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CamDegradation {
    pub blur_sigma: f64,
    pub erosion_radius: f64,
    /// Fraction of each class region dropped, keeping the part nearest a
    /// random anchor pixel. 0 keeps the whole region.
    pub part_bias: f64,
    pub noise_amplitude: f64,
}

impl Default for CamDegradation {
    fn default() -> Self {
        CamDegradation {
            blur_sigma: 2.0,
            erosion_radius: 1.0,
            part_bias: 0.2,
            noise_amplitude: 0.05,
        }
    }
}

impl CamDegradation {
    pub fn none() -> Self {
        CamDegradation {
            blur_sigma: 0.0,
            erosion_radius: 0.0,
            part_bias: 0.0,
            noise_amplitude: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (key, v) in [
            ("cam.blur_sigma", self.blur_sigma),
            ("cam.erosion_radius", self.erosion_radius),
            ("cam.noise_amplitude", self.noise_amplitude),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return bad_config(key, "must be finite and non-negative");
            }
        }
        if !(0.0..=1.0).contains(&self.part_bias) {
            return bad_config("cam.part_bias", "must be in [0, 1]");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub index: usize,
    pub image: RgbImage,
    /// Sorted class ids present in `gt_mask`.
    pub image_labels: Vec<usize>,
    pub gt_mask: SegMask,
    pub gt_boundaries: BoundaryLabelMap,
    /// One normalized CAM per class (all classes, present or not).
    pub cams: Vec<ScoreMap<f32>>,
}

fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

struct Shape {
    kind: ShapeKind,
    cx: f64,
    cy: f64,
    r: f64,
    aspect: (f64, f64),
    theta: f64,
}

impl Shape {
    fn contains(&self, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - self.cx, py - self.cy);
        let (s, c) = self.theta.sin_cos();
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.kind {
            ShapeKind::Disc => dx * dx + dy * dy <= self.r * self.r,
            ShapeKind::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.r * self.r && d2 >= 0.25 * self.r * self.r
            }
            ShapeKind::Rectangle => u.abs() <= self.r * self.aspect.0 && v.abs() <= self.r * self.aspect.1,
            ShapeKind::Triangle => {
                let rr = 1.15 * self.r;
                let verts: Vec<(f64, f64)> = (0..3)
                    .map(|k| {
                        let a = std::f64::consts::FRAC_PI_2 + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
                        (rr * a.cos(), rr * a.sin())
                    })
                    .collect();
                let sign = |(ax, ay): (f64, f64), (bx, by): (f64, f64)| (bx - ax) * (v - ay) - (by - ay) * (u - ax);
                let d = [sign(verts[0], verts[1]), sign(verts[1], verts[2]), sign(verts[2], verts[0])];
                d.iter().all(|&x| x >= 0.0) || d.iter().all(|&x| x <= 0.0)
            }
        }
    }
}

/// Renders sample `index` of the corpus described by `cfg`; CAMs follow `deg`.
pub fn generate_scene(cfg: &SceneConfig, deg: &CamDegradation, index: usize) -> Result<Sample> {
    cfg.validate()?;
    deg.validate()?;
    let mut rng = stream_rng(cfg.seed, 2 * index as u64);
    let s = cfg.image_size;
    let sf = s as f64;
    let n_classes = cfg.num_classes;

    // Low-saturation background made of two random plane waves.
    let base = rng.gen_range(0.35..0.65);
    let tint_hue = rng.gen_range(0.0..360.0);
    let tint = hsv_to_rgb(tint_hue, rng.gen_range(0.0..0.15), 1.0);
    let waves: Vec<(f64, f64, f64, f64)> = (0..2)
        .map(|_| {
            let ang: f64 = rng.gen_range(0.0..std::f64::consts::PI);
            let freq = rng.gen_range(0.05..0.25);
            (ang.cos() * freq, ang.sin() * freq, rng.gen_range(0.0..6.3), rng.gen_range(0.04..0.12))
        })
        .collect();

    let n_shapes = rng.gen_range(cfg.shapes_per_image.0..=cfg.shapes_per_image.1);
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let class = rng.gen_range(0..n_classes);
        let r = rng.gen_range(0.12 * sf..0.25 * sf);
        let margin = 0.5 * r;
        let shape = Shape {
            kind: cfg.shape_of(class),
            cx: rng.gen_range(margin..sf - margin),
            cy: rng.gen_range(margin..sf - margin),
            r,
            aspect: (rng.gen_range(0.6..1.0), rng.gen_range(0.6..1.0)),
            theta: rng.gen_range(0.0..std::f64::consts::PI),
        };
        let hue = class as f64 * 360.0 / n_classes as f64 + rng.gen_range(-12.0..12.0);
        let color = hsv_to_rgb(hue, rng.gen_range(0.55..0.9), rng.gen_range(0.55..0.95));
        shapes.push((class, shape, color));
    }

    let mut mask = SegMask::background(s, s, n_classes);
    let mut image = RgbImage::new(s, s);
    for y in 0..s {
        for x in 0..s {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            let mut rgb = {
                let lum = base + waves.iter().map(|&(fx, fy, ph, a)| a * (fx * px + fy * py + ph).sin()).sum::<f64>();
                [lum * tint[0], lum * tint[1], lum * tint[2]]
            };
            for (class, shape, color) in &shapes {
                if shape.contains(px, py) {
                    mask.set(x, y, *class as u8);
                    rgb = *color;
                }
            }
            let mut out = [0u8; 3];
            for k in 0..3 {
                let noise = if cfg.noise_amplitude > 0.0 {
                    rng.gen_range(-cfg.noise_amplitude..=cfg.noise_amplitude)
                } else {
                    0.0
                };
                out[k] = ((rgb[k] + noise).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
            image.set(x, y, out);
        }
    }

    let mut cam_rng = stream_rng(cfg.seed, 2 * index as u64 + 1);
    let cams = simulate_cam(&mask, deg, &mut cam_rng);
    Ok(Sample {
        index,
        image,
        image_labels: mask.present_classes(),
        gt_boundaries: extract_boundaries(&mask),
        gt_mask: mask,
        cams,
    })
}

/// Generates samples `0..count` in parallel; output order is by index.
pub fn generate_corpus(cfg: &SceneConfig, deg: &CamDegradation, count: usize) -> Result<Vec<Sample>> {
    (0..count).into_par_iter().map(|i| generate_scene(cfg, deg, i)).collect()
}

/// Morphological erosion with a Euclidean disc of `radius`. Offsets falling
/// outside the image are not tested.
pub fn erode(region: &[bool], width: usize, height: usize, radius: f64) -> Vec<bool> {
    if radius <= 0.0 {
        return region.to_vec();
    }
    let r = radius.floor() as isize;
    let offsets: Vec<(isize, isize)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dx, dy)))
        .filter(|&(dx, dy)| ((dx * dx + dy * dy) as f64) <= radius * radius)
        .collect();
    let (w, h) = (width as isize, height as isize);
    let mut out = vec![false; region.len()];
    for y in 0..h {
        for x in 0..w {
            if !region[(y * w + x) as usize] {
                continue;
            }
            out[(y * w + x) as usize] = offsets.iter().all(|&(dx, dy)| {
                let (nx, ny) = (x + dx, y + dy);
                nx < 0 || ny < 0 || nx >= w || ny >= h || region[(ny * w + nx) as usize]
            });
        }
    }
    out
}

/// Keeps the `keep` fraction of `region` nearest to a random anchor pixel.
fn keep_part(region: &[bool], width: usize, keep: f64, rng: &mut ChaCha8Rng) -> Vec<bool> {
    let pixels: Vec<usize> = (0..region.len()).filter(|&i| region[i]).collect();
    if pixels.is_empty() || keep >= 1.0 {
        return region.to_vec();
    }
    let anchor = pixels[rng.gen_range(0..pixels.len())];
    let (ax, ay) = ((anchor % width) as i64, (anchor / width) as i64);
    let mut by_dist: Vec<(i64, usize)> = pixels
        .iter()
        .map(|&i| {
            let (dx, dy) = ((i % width) as i64 - ax, (i / width) as i64 - ay);
            (dx * dx + dy * dy, i)
        })
        .collect();
    by_dist.sort_unstable();
    let n_keep = ((keep * pixels.len() as f64).ceil() as usize).clamp(1, pixels.len());
    let mut out = vec![false; region.len()];
    for &(_, i) in &by_dist[..n_keep] {
        out[i] = true;
    }
    out
}

/// Simulated CAM per class: indicator, eroded, cropped to a part, blurred,
/// noised, clamped and normalized. Absent classes get an all-zero map.
pub fn simulate_cam(gt_mask: &SegMask, deg: &CamDegradation, rng: &mut ChaCha8Rng) -> Vec<ScoreMap<f32>> {
    let (w, h) = (gt_mask.width(), gt_mask.height());
    (0..gt_mask.num_classes())
        .map(|c| {
            let region = gt_mask.class_indicator(c);
            if !region.iter().any(|&b| b) {
                return ScoreMap::zeros(w, h);
            }
            let mut region = erode(&region, w, h, deg.erosion_radius);
            if deg.part_bias > 0.0 {
                region = keep_part(&region, w, 1.0 - deg.part_bias, rng);
            }
            let ind: Vec<f64> = region.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
            let mut m = gaussian_blur(&ScoreMap::from_vec(w, h, ind).expect("dims"), deg.blur_sigma);
            if deg.noise_amplitude > 0.0 {
                for v in m.as_mut_slice() {
                    *v += rng.gen_range(-deg.noise_amplitude..=deg.noise_amplitude);
                }
            }
            normalize_cam(&m).expect("non-empty finite map").cast()
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct CamQuality {
    /// IoU per class; `None` for classes absent from the mask.
    pub per_class: Vec<Option<f64>>,
    /// Mean IoU over present classes (0 when no class is present).
    pub mean: f64,
}

/// IoU between `cam >= fg_threshold` and each ground-truth class region.
pub fn cam_quality(cams: &[ScoreMap<f32>], gt_mask: &SegMask, fg_threshold: f32) -> CamQuality {
    let per_class: Vec<Option<f64>> = cams
        .iter()
        .enumerate()
        .map(|(c, cam)| {
            let region = gt_mask.class_indicator(c);
            if !region.iter().any(|&b| b) {
                return None;
            }
            let (mut inter, mut union) = (0usize, 0usize);
            for (&g, &v) in region.iter().zip(cam.as_slice()) {
                let p = v >= fg_threshold;
                inter += (g && p) as usize;
                union += (g || p) as usize;
            }
            Some(inter as f64 / union as f64)
        })
        .collect();
    let present: Vec<f64> = per_class.iter().flatten().copied().collect();
    let mean = if present.is_empty() {
        0.0
    } else {
        present.iter().sum::<f64>() / present.len() as f64
    };
    CamQuality { per_class, mean }
}

/// Mean CAM IoU over a corpus.
pub fn corpus_cam_quality(samples: &[Sample], fg_threshold: f32) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    samples.iter().map(|s| cam_quality(&s.cams, &s.gt_mask, fg_threshold).mean).sum::<f64>() / samples.len() as f64
}
