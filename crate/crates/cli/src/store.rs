//! On-disk layout of corpora, confident maps and pseudo labels.
//!
//! A data directory holds `manifest.json` plus, per sample `<name>`:
//! `<name>.img.c{0,1,2}.pgm` (RGB planes), `<name>.mask.pgm` (palette below),
//! `<name>.cam.c<k>.pfm` and `<name>.gt.c<k>.pgm` (0 or 255).
//!
//! Label PGMs use one palette: 0 background, `k + 1` class `k`, 255 ignore.

use std::fs;
use std::path::{Path, PathBuf};

use milboundary::config::RunConfig;
use milboundary::error::{Error, Result};
use milboundary::imaging::codec::{channel_path, read_multi_pfm, read_pgm, write_multi_pfm, write_pgm};
use milboundary::imaging::{BoundaryLabelMap, MultiScoreMap, RgbImage, SegMask, BACKGROUND};
use milboundary::pseudolabel::PseudoLabel;
use milboundary::seeds::{ConfidentLabelMap, PixelState};
use milboundary::synthgen::Sample;
use serde::{Deserialize, Serialize};

pub const MANIFEST: &str = "manifest.json";
pub const PSEUDO_MANIFEST: &str = "pseudo_manifest.json";
pub const CONFIG_ECHO: &str = "config.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleEntry {
    pub name: String,
    pub index: usize,
    pub image_labels: Vec<usize>,
    pub image: String,
    pub mask: String,
    pub cams: String,
    pub boundaries: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub width: usize,
    pub height: usize,
    pub num_classes: usize,
    pub seed: u64,
    pub config: RunConfig,
    pub samples: Vec<SampleEntry>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoEntry {
    pub name: String,
    pub threshold: f64,
    pub degenerate: bool,
    pub soft: String,
    pub hard: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PseudoManifest {
    pub num_classes: usize,
    pub samples: Vec<PseudoEntry>,
}

pub fn sample_name(index: usize) -> String {
    format!("s{index:04}")
}

fn missing(sample: &str, path: PathBuf) -> Error {
    Error::MissingSample {
        sample: sample.to_string(),
        path,
    }
}

fn require(sample: &str, path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(missing(sample, path))
    }
}

/// Refuses to reuse a non-empty directory; creates it otherwise.
pub fn fresh_dir(dir: &Path) -> Result<()> {
    if dir.exists() && fs::read_dir(dir)?.next().is_some() {
        return Err(Error::InvalidInput(format!("output directory {} is not empty", dir.display())));
    }
    fs::create_dir_all(dir)?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::InvalidInput(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| Error::Decode(format!("{}: {e}", path.display())))
}

pub fn labels_to_palette(map: &ConfidentLabelMap) -> Vec<u8> {
    map.states()
        .iter()
        .map(|s| match *s {
            PixelState::Background => 0,
            PixelState::Class(c) => c + 1,
            PixelState::Ignore => 255,
        })
        .collect()
}

pub fn palette_to_labels(width: usize, height: usize, px: &[u8]) -> Result<ConfidentLabelMap> {
    let states = px
        .iter()
        .map(|&v| match v {
            0 => PixelState::Background,
            255 => PixelState::Ignore,
            v => PixelState::Class(v - 1),
        })
        .collect();
    ConfidentLabelMap::from_states(width, height, states)
}

fn write_bits(stem: &Path, map: &BoundaryLabelMap) -> Result<()> {
    for c in 0..map.channels() {
        let px: Vec<u8> = map.channel(c).iter().map(|&b| if b { 255 } else { 0 }).collect();
        write_pgm(&channel_path(stem, c, "pgm"), map.width(), map.height(), &px)?;
    }
    Ok(())
}

fn read_bits(sample: &str, stem: &Path, channels: usize) -> Result<BoundaryLabelMap> {
    let mut planes = Vec::with_capacity(channels);
    let mut dims = (0, 0);
    for c in 0..channels {
        let (w, h, px) = read_pgm(&require(sample, channel_path(stem, c, "pgm"))?)?;
        dims = (w, h);
        planes.extend(px.into_iter().map(|v| v >= 128));
    }
    BoundaryLabelMap::from_bits(dims.0, dims.1, channels, planes)
}

/// Boundary bitmaps stored as PGM channels, read as 0/1 scores.
pub fn read_bit_scores(sample: &str, stem: &Path, channels: usize) -> Result<MultiScoreMap<f32>> {
    Ok(read_bits(sample, stem, channels)?.to_scores())
}

pub fn read_score_channels(sample: &str, stem: &Path, channels: usize) -> Result<MultiScoreMap<f32>> {
    require(sample, channel_path(stem, 0, "pfm"))?;
    read_multi_pfm(stem, channels)
}

pub fn write_sample(dir: &Path, s: &Sample) -> Result<SampleEntry> {
    let name = sample_name(s.index);
    let entry = SampleEntry {
        image: format!("{name}.img"),
        mask: format!("{name}.mask.pgm"),
        cams: format!("{name}.cam"),
        boundaries: format!("{name}.gt"),
        image_labels: s.image_labels.clone(),
        index: s.index,
        name,
    };
    let (w, h) = (s.image.width(), s.image.height());
    for (k, plane) in s.image.planes().iter().enumerate() {
        write_pgm(&channel_path(&dir.join(&entry.image), k, "pgm"), w, h, plane)?;
    }
    write_pgm(&dir.join(&entry.mask), w, h, &labels_to_palette(&ConfidentLabelMap::from_mask(&s.gt_mask)))?;
    let cams = MultiScoreMap::from_channels(&s.cams)?;
    write_multi_pfm(&dir.join(&entry.cams), &cams)?;
    write_bits(&dir.join(&entry.boundaries), &s.gt_boundaries)?;
    Ok(entry)
}

pub fn read_sample(dir: &Path, e: &SampleEntry, num_classes: usize) -> Result<Sample> {
    let n = e.name.as_str();
    let mut planes: [Vec<u8>; 3] = Default::default();
    let mut dims = (0, 0);
    for (k, plane) in planes.iter_mut().enumerate() {
        let (w, h, px) = read_pgm(&require(n, channel_path(&dir.join(&e.image), k, "pgm"))?)?;
        dims = (w, h);
        *plane = px;
    }
    let image = RgbImage::from_planes(dims.0, dims.1, &planes)?;
    let (w, h, px) = read_pgm(&require(n, dir.join(&e.mask))?)?;
    let mask_labels = palette_to_labels(w, h, &px)?
        .states()
        .iter()
        .map(|s| match *s {
            PixelState::Class(c) => Ok(c),
            PixelState::Background => Ok(BACKGROUND),
            PixelState::Ignore => Err(Error::Decode(format!("mask of {n} contains ignore pixels"))),
        })
        .collect::<Result<Vec<_>>>()?;
    let gt_mask = SegMask::from_labels(w, h, num_classes, mask_labels)?;
    let cams = read_score_channels(n, &dir.join(&e.cams), num_classes)?;
    Ok(Sample {
        index: e.index,
        image,
        image_labels: e.image_labels.clone(),
        gt_mask,
        gt_boundaries: read_bits(n, &dir.join(&e.boundaries), num_classes)?,
        cams: (0..num_classes).map(|c| cams.channel_map(c)).collect(),
    })
}

pub fn read_manifest(data: &Path) -> Result<Manifest> {
    let path = data.join(MANIFEST);
    if !path.is_file() {
        return Err(Error::InvalidInput(format!("no {MANIFEST} in {}", data.display())));
    }
    read_json(&path)
}

pub fn read_corpus(data: &Path) -> Result<(Manifest, Vec<Sample>)> {
    let m = read_manifest(data)?;
    let samples = m.samples.iter().map(|e| read_sample(data, e, m.num_classes)).collect::<Result<_>>()?;
    Ok((m, samples))
}

pub fn seeds_file(dir: &Path, name: &str) -> PathBuf {
    dir.join(format!("{name}.seeds.pgm"))
}

pub fn read_seeds(dir: &Path, name: &str) -> Result<ConfidentLabelMap> {
    let (w, h, px) = read_pgm(&require(name, seeds_file(dir, name))?)?;
    palette_to_labels(w, h, &px)
}

pub fn write_pseudo(dir: &Path, name: &str, p: &PseudoLabel) -> Result<PseudoEntry> {
    let entry = PseudoEntry {
        name: name.to_string(),
        threshold: p.threshold,
        degenerate: p.degenerate,
        soft: format!("{name}.soft"),
        hard: format!("{name}.hard"),
    };
    write_multi_pfm(&dir.join(&entry.soft), &p.soft)?;
    write_bits(&dir.join(&entry.hard), &p.hard)?;
    Ok(entry)
}

pub fn read_hard(dir: &Path, e: &PseudoEntry, channels: usize) -> Result<BoundaryLabelMap> {
    read_bits(&e.name, &dir.join(&e.hard), channels)
}

/// How per-sample prediction maps are named inside a directory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum MapKind {
    /// `<name>.pred.c<k>.pfm`
    Pred,
    /// `<name>.soft.c<k>.pfm`
    Soft,
    /// `<name>.hard.c<k>.pgm`
    Hard,
    /// `<name>.gt.c<k>.pgm`
    Gt,
}

impl MapKind {
    pub const SEARCH_ORDER: [MapKind; 4] = [MapKind::Pred, MapKind::Soft, MapKind::Hard, MapKind::Gt];

    fn stem(self, dir: &Path, name: &str) -> PathBuf {
        let suffix = match self {
            MapKind::Pred => "pred",
            MapKind::Soft => "soft",
            MapKind::Hard => "hard",
            MapKind::Gt => "gt",
        };
        dir.join(format!("{name}.{suffix}"))
    }

    fn ext(self) -> &'static str {
        match self {
            MapKind::Pred | MapKind::Soft => "pfm",
            MapKind::Hard | MapKind::Gt => "pgm",
        }
    }

    pub fn exists(self, dir: &Path, name: &str) -> bool {
        channel_path(&self.stem(dir, name), 0, self.ext()).is_file()
    }

    pub fn read(self, dir: &Path, name: &str, channels: usize) -> Result<MultiScoreMap<f32>> {
        let stem = self.stem(dir, name);
        match self.ext() {
            "pfm" => read_score_channels(name, &stem, channels),
            _ => read_bit_scores(name, &stem, channels),
        }
    }

    pub fn write(dir: &Path, name: &str, map: &MultiScoreMap<f32>) -> Result<()> {
        write_multi_pfm(&MapKind::Pred.stem(dir, name), map)?;
        Ok(())
    }
}
