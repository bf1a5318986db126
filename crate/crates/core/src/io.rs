//! Binary checkpoints and small file helpers.

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::array::Array;
use crate::backbone::{BackboneParams, ConvBlock, BLOCK_CHANNELS};
use crate::error::{Error, Result};

const CHECKPOINT_MAGIC: &[u8; 4] = b"SVCK";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Write `bytes` to a sibling temp file, sync it, then rename over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().ok_or_else(|| Error::Io(format!("{} has no file name", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

/// Little-endian cursor over a byte buffer.
pub struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    pub fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    pub fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    pub fn finish(&self) -> Result<()> {
        if self.pos != self.bytes.len() {
            return Err(Error::Format(format!("{} trailing bytes", self.bytes.len() - self.pos)));
        }
        Ok(())
    }
}

fn put_tensor(buf: &mut Vec<u8>, name: &str, a: &Array) {
    buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
    buf.extend_from_slice(name.as_bytes());
    buf.extend_from_slice(&(a.rank() as u32).to_le_bytes());
    for &d in a.shape() {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in a.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

fn get_tensor(r: &mut Reader) -> Result<(String, Array)> {
    let len = r.u32()? as usize;
    let name = String::from_utf8(r.take(len)?.to_vec()).map_err(|e| Error::Format(e.to_string()))?;
    let rank = r.u32()? as usize;
    let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
    Ok((name, Array::new(shape, data)?))
}

pub fn encode_checkpoint(model: &BackboneParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let names = model.tensor_names();
    let tensors = model.tensors();
    buf.extend_from_slice(&((names.len() + 2) as u32).to_le_bytes());
    for (name, t) in names.iter().zip(tensors) {
        put_tensor(&mut buf, name, t);
    }
    put_tensor(&mut buf, "dom.dropout", &Array::scalar(model.dom_dropout));
    put_tensor(&mut buf, "proto.temperature", &Array::scalar(model.proto_temperature));
    buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<BackboneParams> {
    let mut r = Reader::new(bytes);
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::VersionMismatch { found: version, expected: CHECKPOINT_VERSION });
    }
    let count = r.u32()? as usize;
    let mut records = Vec::with_capacity(count);
    for _ in 0..count {
        records.push(get_tensor(&mut r)?);
    }
    r.finish()?;
    let mut take = |name: &str| -> Result<Array> {
        let i = records.iter().position(|(n, _)| n == name).ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        Ok(records.swap_remove(i).1)
    };
    let mut blocks = Vec::with_capacity(BLOCK_CHANNELS.len());
    for i in 1..=BLOCK_CHANNELS.len() {
        blocks.push(ConvBlock { weight: take(&format!("block{i}.weight"))?, bias: take(&format!("block{i}.bias"))? });
    }
    let model = BackboneParams {
        blocks,
        fc_weight: take("fc.weight")?,
        fc_bias: take("fc.bias")?,
        dom_weight: take("dom.weight")?,
        dom_bias: take("dom.bias")?,
        dom_dropout: take("dom.dropout")?.item()?,
        proto_temperature: take("proto.temperature")?.item()?,
    };
    let mut cin = crate::backbone::IN_CHANNELS;
    for (b, &cout) in model.blocks.iter().zip(&BLOCK_CHANNELS) {
        if b.weight.shape() != [cout, cin, 3, 3] || b.bias.shape() != [cout] {
            return Err(Error::Format(format!("block shape {:?} does not match the architecture", b.weight.shape())));
        }
        cin = cout;
    }
    Ok(model)
}

pub fn save_checkpoint(path: &Path, model: &BackboneParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(model))
}

pub fn load_checkpoint(path: &Path) -> Result<BackboneParams> {
    decode_checkpoint(&fs::read(path)?)
}
