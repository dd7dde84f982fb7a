//! PFM (float) and PGM (8-bit, P5) codecs.
//!
//! PFM is written little-endian (scale `-1.0`) with rows bottom-up; reading
//! accepts either endianness but rejects non-finite payloads.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::imaging::{MultiScoreMap, ScoreMap};

fn decode_err<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Decode(msg.into()))
}

/// Splits `n` whitespace-separated header tokens off `bytes` (skipping `#`
/// comments) and returns them with the offset of the payload, which starts
/// after exactly one whitespace byte following the last token.
fn header_tokens(bytes: &[u8], n: usize) -> Result<(Vec<String>, usize)> {
    let mut tokens = Vec::with_capacity(n);
    let mut i = 0;
    while tokens.len() < n {
        while i < bytes.len() && bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if i < bytes.len() && bytes[i] == b'#' {
            while i < bytes.len() && bytes[i] != b'\n' {
                i += 1;
            }
            continue;
        }
        let start = i;
        while i < bytes.len() && !bytes[i].is_ascii_whitespace() {
            i += 1;
        }
        if start == i {
            return decode_err("truncated header");
        }
        let tok = std::str::from_utf8(&bytes[start..i]).map_err(|_| Error::Decode("non-ascii header".into()))?;
        tokens.push(tok.to_string());
    }
    if i >= bytes.len() {
        return decode_err("missing payload separator");
    }
    Ok((tokens, i + 1))
}

fn parse_dim(tok: &str) -> Result<usize> {
    match tok.parse::<usize>() {
        Ok(v) if v > 0 => Ok(v),
        _ => decode_err(format!("invalid dimension `{tok}`")),
    }
}

pub fn encode_pfm(map: &ScoreMap<f32>) -> Vec<u8> {
    let (w, h) = (map.width(), map.height());
    let mut out = format!("Pf\n{w} {h}\n-1.0\n").into_bytes();
    out.reserve(w * h * 4);
    for y in (0..h).rev() {
        for x in 0..w {
            out.extend_from_slice(&map.get(x, y).to_le_bytes());
        }
    }
    out
}

pub fn decode_pfm(bytes: &[u8]) -> Result<ScoreMap<f32>> {
    let (tok, off) = header_tokens(bytes, 4)?;
    if tok[0] != "Pf" {
        return decode_err(format!("expected grayscale PFM magic `Pf`, found `{}`", tok[0]));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    let scale: f64 = tok[3].parse().map_err(|_| Error::Decode(format!("invalid scale `{}`", tok[3])))?;
    if scale == 0.0 || !scale.is_finite() {
        return decode_err("scale must be finite and non-zero");
    }
    let little = scale < 0.0;
    let payload = &bytes[off..];
    if payload.len() != w * h * 4 {
        return decode_err(format!("expected {} payload bytes, found {}", w * h * 4, payload.len()));
    }
    let mut data = vec![0f32; w * h];
    for (i, chunk) in payload.chunks_exact(4).enumerate() {
        let raw = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(raw) } else { f32::from_be_bytes(raw) };
        if !v.is_finite() {
            return decode_err("non-finite value in PFM payload");
        }
        let (row, x) = (i / w, i % w);
        data[(h - 1 - row) * w + x] = v;
    }
    ScoreMap::from_vec(w, h, data)
}

/// P5 with maxval 255, rows top-down.
pub fn encode_pgm(width: usize, height: usize, pixels: &[u8]) -> Result<Vec<u8>> {
    if pixels.len() != width * height || width == 0 || height == 0 {
        return Err(Error::InvalidInput("pgm dimensions do not match pixel count".into()));
    }
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(pixels);
    Ok(out)
}

pub fn decode_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let (tok, off) = header_tokens(bytes, 4)?;
    if tok[0] != "P5" {
        return decode_err(format!("expected PGM magic `P5`, found `{}`", tok[0]));
    }
    let (w, h) = (parse_dim(&tok[1])?, parse_dim(&tok[2])?);
    if tok[3] != "255" {
        return decode_err(format!("only maxval 255 is supported, found `{}`", tok[3]));
    }
    let payload = &bytes[off..];
    if payload.len() != w * h {
        return decode_err(format!("expected {} payload bytes, found {}", w * h, payload.len()));
    }
    Ok((w, h, payload.to_vec()))
}

pub fn write_pfm(path: &Path, map: &ScoreMap<f32>) -> Result<()> {
    fs::write(path, encode_pfm(map))?;
    Ok(())
}

pub fn read_pfm(path: &Path) -> Result<ScoreMap<f32>> {
    decode_pfm(&fs::read(path)?)
}

pub fn write_pgm(path: &Path, width: usize, height: usize, pixels: &[u8]) -> Result<()> {
    fs::write(path, encode_pgm(width, height, pixels)?)?;
    Ok(())
}

pub fn read_pgm(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    decode_pgm(&fs::read(path)?)
}

/// Path of channel `k` for a multi-channel map stored under `stem`:
/// `<stem>.c<k>.<ext>`.
pub fn channel_path(stem: &Path, k: usize, ext: &str) -> PathBuf {
    let mut name = stem.file_name().map(|s| s.to_os_string()).unwrap_or_default();
    name.push(format!(".c{k}.{ext}"));
    stem.with_file_name(name)
}

pub fn write_multi_pfm(stem: &Path, map: &MultiScoreMap<f32>) -> Result<Vec<PathBuf>> {
    (0..map.channels())
        .map(|c| {
            let p = channel_path(stem, c, "pfm");
            write_pfm(&p, &map.channel_map(c))?;
            Ok(p)
        })
        .collect()
}

pub fn read_multi_pfm(stem: &Path, channels: usize) -> Result<MultiScoreMap<f32>> {
    let maps = (0..channels)
        .map(|c| read_pfm(&channel_path(stem, c, "pfm")))
        .collect::<Result<Vec<_>>>()?;
    MultiScoreMap::from_channels(&maps)
}
