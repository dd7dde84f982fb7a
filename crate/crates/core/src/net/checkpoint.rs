//! Binary checkpoint: `"WSBD"`, a `u32` version, then tensor records until
//! end of file. Each record is a `u32` name length, the UTF-8 name, a `u32`
//! rank, `u32` dims and the `f32` payload, all little-endian. Optimizer
//! momentum is stored as `<name>.momentum` and the step count as
//! `optim.step`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{ModelParams, NetConfig, OptimConfig, OptimState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"WSBD";
const VERSION: u32 = 1;
const STEP_NAME: &str = "optim.step";
const MOMENTUM_SUFFIX: &str = ".momentum";

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams<f32>,
    pub step: Option<usize>,
    pub momentum: Option<Vec<Vec<f32>>>,
}

impl Checkpoint {
    /// Optimizer state with the stored buffers (fresh ones if absent).
    pub fn optim_state(&self, config: OptimConfig) -> Result<OptimState<f32>> {
        match &self.momentum {
            Some(m) => OptimState::restore(config, &self.params, self.step.unwrap_or(0), m.clone()),
            None => Ok(OptimState::new(config, &self.params)),
        }
    }
}

fn write_record<W: Write>(w: &mut W, name: &str, dims: &[usize], data: &[f32]) -> Result<()> {
    w.write_all(&(name.len() as u32).to_le_bytes())?;
    w.write_all(name.as_bytes())?;
    w.write_all(&(dims.len() as u32).to_le_bytes())?;
    for &d in dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        w.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut w: W, params: &ModelParams<f32>, opt: Option<&OptimState<f32>>) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    for i in 0..params.tensor_count() {
        write_record(&mut w, &params.tensor_name(i), &params.tensor_dims(i), params.tensor(i))?;
    }
    if let Some(opt) = opt {
        for i in 0..params.tensor_count() {
            let name = format!("{}{MOMENTUM_SUFFIX}", params.tensor_name(i));
            write_record(&mut w, &name, &params.tensor_dims(i), opt.momentum(i))?;
        }
        write_record(&mut w, STEP_NAME, &[1], &[opt.step as f32])?;
    }
    w.flush()?;
    Ok(())
}

fn read_exact_or_decode<R: Read>(r: &mut R, buf: &mut [u8], what: &str) -> Result<()> {
    r.read_exact(buf).map_err(|e| match e.kind() {
        std::io::ErrorKind::UnexpectedEof => Error::Decode(format!("truncated checkpoint while reading {what}")),
        _ => Error::Io(e),
    })
}

fn read_u32<R: Read>(r: &mut R, what: &str) -> Result<u32> {
    let mut b = [0u8; 4];
    read_exact_or_decode(r, &mut b, what)?;
    Ok(u32::from_le_bytes(b))
}

type Records = BTreeMap<String, (Vec<usize>, Vec<f32>)>;

fn read_records<R: Read>(mut r: R) -> Result<Records> {
    let mut magic = [0u8; 4];
    read_exact_or_decode(&mut r, &mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Decode("not a checkpoint (bad magic)".into()));
    }
    let version = read_u32(&mut r, "version")?;
    if version != VERSION {
        return Err(Error::Decode(format!("unsupported checkpoint version {version}")));
    }
    let mut out = Records::new();
    loop {
        let mut first = [0u8; 4];
        let got = r.read(&mut first)?;
        if got == 0 {
            break;
        }
        read_exact_or_decode(&mut r, &mut first[got..], "record header")?;
        let len = u32::from_le_bytes(first) as usize;
        if len > 4096 {
            return Err(Error::Decode(format!("implausible tensor name length {len}")));
        }
        let mut name = vec![0u8; len];
        read_exact_or_decode(&mut r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::Decode("tensor name is not UTF-8".into()))?;
        let ndim = read_u32(&mut r, &name)? as usize;
        if ndim > 8 {
            return Err(Error::Decode(format!("tensor `{name}` has rank {ndim}")));
        }
        let dims = (0..ndim).map(|_| read_u32(&mut r, &name).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let count: usize = dims.iter().product();
        if count > 1 << 28 {
            return Err(Error::Decode(format!("tensor `{name}` is implausibly large")));
        }
        let mut bytes = vec![0u8; 4 * count];
        read_exact_or_decode(&mut r, &mut bytes, &name)?;
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if out.insert(name.clone(), (dims, data)).is_some() {
            return Err(Error::Decode(format!("duplicate tensor `{name}`")));
        }
    }
    Ok(out)
}

fn take_tensor(records: &mut Records, name: &str, dims: &[usize]) -> Result<Option<Vec<f32>>> {
    match records.remove(name) {
        None => Ok(None),
        Some((found, _)) if found != dims => Err(Error::Shape {
            name: name.to_string(),
            expected: dims.to_vec(),
            found,
        }),
        Some((_, data)) => Ok(Some(data)),
    }
}

/// Reads a checkpoint written for a network of shape `config`.
pub fn read_checkpoint<R: Read>(r: R, config: &NetConfig) -> Result<Checkpoint> {
    let mut records = read_records(r)?;
    let mut params = ModelParams::<f32>::zeros(config)?;
    for i in 0..params.tensor_count() {
        let name = params.tensor_name(i);
        let data = take_tensor(&mut records, &name, &params.tensor_dims(i))?
            .ok_or_else(|| Error::Decode(format!("checkpoint lacks tensor `{name}`")))?;
        params.tensor_mut(i).copy_from_slice(&data);
    }
    let mut momentum = Vec::new();
    for i in 0..params.tensor_count() {
        let name = format!("{}{MOMENTUM_SUFFIX}", params.tensor_name(i));
        if let Some(m) = take_tensor(&mut records, &name, &params.tensor_dims(i))? {
            momentum.push(m);
        }
    }
    let momentum = match momentum.len() {
        0 => None,
        n if n == params.tensor_count() => Some(momentum),
        _ => return Err(Error::Decode("checkpoint has momentum for only some tensors".into())),
    };
    let step = take_tensor(&mut records, STEP_NAME, &[1])?.map(|v| v[0] as usize);
    if let Some(extra) = records.keys().next() {
        return Err(Error::Decode(format!("unexpected tensor `{extra}`")));
    }
    Ok(Checkpoint { params, step, momentum })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams<f32>, opt: Option<&OptimState<f32>>) -> Result<()> {
    write_checkpoint(BufWriter::new(File::create(path)?), params, opt)
}

pub fn load_checkpoint(path: &Path, config: &NetConfig) -> Result<Checkpoint> {
    read_checkpoint(BufReader::new(File::open(path)?), config)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bytes(params: &ModelParams<f32>, opt: Option<&OptimState<f32>>) -> Vec<u8> {
        let mut buf = Vec::new();
        write_checkpoint(&mut buf, params, opt).unwrap();
        buf
    }

    #[test]
    fn roundtrip_is_bitwise() {
        let cfg = NetConfig::default();
        let p = ModelParams::<f32>::init(&cfg, 9).unwrap();
        let ck = read_checkpoint(&bytes(&p, None)[..], &cfg).unwrap();
        assert_eq!(ck.params, p);
        assert_eq!((ck.step, ck.momentum), (None, None));

        let mut opt = OptimState::new(OptimConfig::default(), &p);
        opt.step = 17;
        let ck = read_checkpoint(&bytes(&p, Some(&opt))[..], &cfg).unwrap();
        assert_eq!(ck.step, Some(17));
        assert_eq!(ck.optim_state(OptimConfig::default()).unwrap(), opt);
    }

    #[test]
    fn layout_header() {
        let p = ModelParams::<f32>::zeros(&NetConfig::default()).unwrap();
        let b = bytes(&p, None);
        assert_eq!(&b[..4], b"WSBD");
        assert_eq!(u32::from_le_bytes([b[4], b[5], b[6], b[7]]), 1);
        assert_eq!(u32::from_le_bytes([b[8], b[9], b[10], b[11]]), 9);
        assert_eq!(&b[12..21], b"s1.weight");
    }

    #[test]
    fn corrupt_inputs_are_decode_errors() {
        let cfg = NetConfig::default();
        let b = bytes(&ModelParams::<f32>::zeros(&cfg).unwrap(), None);
        for cut in [0, 3, 6, 20, b.len() - 1] {
            assert!(matches!(read_checkpoint(&b[..cut], &cfg), Err(Error::Decode(_))), "cut {cut}");
        }
        let mut bad = b.clone();
        bad[0] = b'X';
        assert!(matches!(read_checkpoint(&bad[..], &cfg), Err(Error::Decode(_))));
        let mut bad = b;
        bad[4] = 2;
        assert!(matches!(read_checkpoint(&bad[..], &cfg), Err(Error::Decode(_))));
    }

    #[test]
    fn mismatched_config_names_the_tensor() {
        let cfg = NetConfig::default();
        let b = bytes(&ModelParams::<f32>::zeros(&cfg).unwrap(), None);
        let other = NetConfig {
            num_classes: 5,
            ..cfg
        };
        match read_checkpoint(&b[..], &other) {
            Err(Error::Shape { name, expected, found }) => {
                assert_eq!(name, "aw_out.weight");
                assert_eq!(expected, vec![5, 64, 1, 1]);
                assert_eq!(found, vec![3, 64, 1, 1]);
            }
            other => panic!("unexpected {other:?}"),
        }
    }
}
