//! Binary model snapshots.
//!
//! File layout: magic `QILN`, version (little-endian u32), then named
//! records until end of file. Each record is
//!
//! ```text
//! name_len: u32 LE | name: UTF-8 | dtype: u8 | rank: u64 LE |
//! dims: rank x u64 LE | values: little-endian
//! ```
//!
//! with dtype tags 1 = f64, 2 = f32, 3 = i8. Network checkpoints store
//! every parameter as f64 plus a couple of `__`-prefixed structural
//! records; deployed models additionally store integer weight levels
//! (i8) and f32 scale factors.

use crate::error::{QilError, Result};
use crate::nn::Network;
use crate::tensor::Tensor;
use std::fs;
use std::io::Write;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"QILN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    I8(Vec<i8>),
}

impl RecordData {
    fn dtype_tag(&self) -> u8 {
        match self {
            RecordData::F64(_) => 1,
            RecordData::F32(_) => 2,
            RecordData::I8(_) => 3,
        }
    }

    pub fn len(&self) -> usize {
        match self {
            RecordData::F64(v) => v.len(),
            RecordData::F32(v) => v.len(),
            RecordData::I8(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<u64>,
    pub data: RecordData,
}

impl Record {
    pub fn f64(name: &str, dims: &[u64], data: Vec<f64>) -> Self {
        Record {
            name: name.into(),
            dims: dims.to_vec(),
            data: RecordData::F64(data),
        }
    }

    pub fn scalar(name: &str, v: f64) -> Self {
        Record::f64(name, &[], vec![v])
    }

    pub fn as_f64(&self) -> Result<&[f64]> {
        match &self.data {
            RecordData::F64(v) => Ok(v),
            _ => Err(QilError::Format(format!("record {} is not f64", self.name))),
        }
    }
}

/// Write any file atomically: temp file in the target directory, then
/// rename over the destination.
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    if !dir.as_os_str().is_empty() {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = tempfile_in(dir)?;
    tmp.1.write_all(bytes)?;
    tmp.1.flush()?;
    drop(tmp.1);
    fs::rename(&tmp.0, path)?;
    Ok(())
}

fn tempfile_in(dir: &Path) -> Result<(std::path::PathBuf, fs::File)> {
    for i in 0..1000 {
        let candidate = dir.join(format!(
            ".tmp-{}-{i}",
            std::process::id(),
        ));
        match fs::OpenOptions::new()
            .write(true)
            .create_new(true)
            .open(&candidate)
        {
            Ok(f) => return Ok((candidate, f)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => continue,
            Err(e) => return Err(e.into()),
        }
    }
    Err(QilError::Data("could not create temp file".into()))
}

pub fn encode_records(records: &[Record]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for r in records {
        out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
        out.extend_from_slice(r.name.as_bytes());
        out.push(r.data.dtype_tag());
        out.extend_from_slice(&(r.dims.len() as u64).to_le_bytes());
        for &d in &r.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &r.data {
            RecordData::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            RecordData::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            RecordData::I8(v) => {
                for &x in v {
                    out.push(x as u8);
                }
            }
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(QilError::Format("truncated checkpoint".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_records(bytes: &[u8]) -> Result<Vec<Record>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(QilError::Format("bad checkpoint magic".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(QilError::Format(format!(
            "unsupported checkpoint version {version}"
        )));
    }
    let mut records = Vec::new();
    while r.pos < r.buf.len() {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| QilError::Format("record name is not UTF-8".into()))?
            .to_string();
        let dtype = r.take(1)?[0];
        let rank = r.u64()? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u64()?);
        }
        let n: usize = dims.iter().product::<u64>() as usize;
        let data = match dtype {
            1 => {
                let raw = r.take(n * 8)?;
                RecordData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            2 => {
                let raw = r.take(n * 4)?;
                RecordData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            3 => RecordData::I8(r.take(n)?.iter().map(|&b| b as i8).collect()),
            other => {
                return Err(QilError::Format(format!("unknown dtype tag {other}")));
            }
        };
        records.push(Record { name, dims, data });
    }
    Ok(records)
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    atomic_write(path, &encode_records(records))
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    decode_records(&fs::read(path)?)
}

/// Save every network parameter plus the quantization state.
pub fn save_network(path: &Path, net: &Network) -> Result<()> {
    let mut records = Vec::new();
    records.push(Record::scalar(
        "__quant_active",
        if net.quant_active { 1.0 } else { 0.0 },
    ));
    if let Some(name) = net.quantized_layer_names().first() {
        let w = net.weight_quant_spec(name).expect("quant layer");
        let a = net.act_quant_spec(name).expect("quant layer");
        records.push(Record::f64(
            "__bits",
            &[2],
            vec![a.bit_width as f64, w.bit_width as f64],
        ));
    }
    for (name, p) in net.params.iter() {
        let dims: Vec<u64> = p.value.shape().iter().map(|&d| d as u64).collect();
        records.push(Record::f64(name, &dims, p.value.data().to_vec()));
    }
    write_records(path, &records)
}

/// Fill an existing network's parameters from a checkpoint, restoring
/// bit widths and the quantization flag. Every parameter must be present
/// with a matching shape.
pub fn load_network_into(path: &Path, net: &mut Network) -> Result<()> {
    let records = read_records(path)?;
    let by_name: std::collections::HashMap<&str, &Record> =
        records.iter().map(|r| (r.name.as_str(), r)).collect();
    if let Some(r) = by_name.get("__bits") {
        let v = r.as_f64()?;
        net.set_bits(v[0] as u32, v[1] as u32)?;
    }
    net.quant_active = by_name
        .get("__quant_active")
        .map(|r| r.as_f64().map(|v| v[0] != 0.0))
        .transpose()?
        .unwrap_or(false);
    let names: Vec<String> = net.params.names().cloned().collect();
    for name in names {
        let r = by_name
            .get(name.as_str())
            .ok_or_else(|| QilError::Format(format!("checkpoint is missing {name}")))?;
        let want: Vec<u64> = net
            .params
            .get(&name)
            .shape()
            .iter()
            .map(|&d| d as u64)
            .collect();
        if r.dims != want {
            return Err(QilError::Format(format!(
                "shape mismatch for {name}: file {:?}, network {:?}",
                r.dims, want
            )));
        }
        let shape: Vec<usize> = r.dims.iter().map(|&d| d as usize).collect();
        *net.params.get_mut(&name) = Tensor::from_vec(&shape, r.as_f64()?.to_vec());
    }
    Ok(())
}
