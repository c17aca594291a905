//! Little-endian binary checkpoint:
//!
//! ```text
//! magic        8 bytes  "MILSEG01"
//! classes      u32      foreground class count
//! dropout      f64
//! seed         u64
//! stem_len     u32
//! stem[i]      u32 in, u32 out, u32 kernel, u8 frozen, u32 pool (0 = none)
//! head_len     u32
//! head[j]      u32 in, u32 out, u32 kernel, u8 frozen
//! tensors      per conv layer in order: weights (O·C·K·K f64), bias (O f64)
//! ```

use std::io::{Read, Write};
use std::path::Path;

use super::{ConvSpec, NetworkParams, NetworkSpec, StemStage};
use crate::error::{Error, Result};
use crate::layers::LayerParams;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MILSEG01";

fn put_u32(buf: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::format(format!("{v} does not fit in u32")))?;
    buf.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

fn put_conv(buf: &mut Vec<u8>, c: &ConvSpec) -> Result<()> {
    put_u32(buf, c.in_channels)?;
    put_u32(buf, c.out_channels)?;
    put_u32(buf, c.kernel)?;
    buf.push(c.frozen as u8);
    Ok(())
}

pub fn write_checkpoint<W: Write>(mut out: W, spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    put_u32(&mut buf, spec.foreground_classes)?;
    buf.extend_from_slice(&spec.dropout_rate.to_le_bytes());
    buf.extend_from_slice(&spec.seed.to_le_bytes());
    put_u32(&mut buf, spec.stem.len())?;
    for s in &spec.stem {
        put_conv(&mut buf, &s.conv)?;
        put_u32(&mut buf, s.pool.unwrap_or(0))?;
    }
    put_u32(&mut buf, spec.head.len())?;
    for c in &spec.head {
        put_conv(&mut buf, c)?;
    }
    if params.layers.len() != spec.conv_layer_count() {
        return Err(Error::shape("parameter list does not match the layer table"));
    }
    for l in &params.layers {
        for v in l.weights.data().iter().chain(l.bias.data()) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    out.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::format(format!(
                "checkpoint truncated at byte {} (need {n} more)",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn conv(&mut self) -> Result<ConvSpec> {
        Ok(ConvSpec {
            in_channels: self.u32()?,
            out_channels: self.u32()?,
            kernel: self.u32()?,
            frozen: self.u8()? != 0,
        })
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let raw = self.take(n.checked_mul(8).ok_or_else(|| Error::format("tensor too large"))?)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

pub fn read_checkpoint<R: Read>(mut input: R) -> Result<(NetworkSpec, NetworkParams)> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::format("not a checkpoint (bad magic)"));
    }
    let foreground_classes = c.u32()?;
    let dropout_rate = c.f64()?;
    let seed = c.u64()?;
    let stem_len = c.u32()?;
    let mut stem = Vec::with_capacity(stem_len.min(1024));
    for _ in 0..stem_len {
        let conv = c.conv()?;
        let pool = match c.u32()? {
            0 => None,
            p => Some(p),
        };
        stem.push(StemStage { conv, pool });
    }
    let head_len = c.u32()?;
    let mut head = Vec::with_capacity(head_len.min(1024));
    for _ in 0..head_len {
        head.push(c.conv()?);
    }
    let spec = NetworkSpec {
        foreground_classes,
        stem,
        head,
        dropout_rate,
        seed,
    };
    spec.validate()?;
    let mut layers = Vec::with_capacity(spec.conv_layer_count());
    for conv in spec.conv_layers() {
        let shape = [conv.out_channels, conv.in_channels, conv.kernel, conv.kernel];
        let w = c.f64s(shape.iter().product())?;
        let b = c.f64s(conv.out_channels)?;
        layers.push(LayerParams::new(
            Tensor::from_vec(&shape, w)?,
            Tensor::from_vec(&[conv.out_channels], b)?,
        ));
    }
    if c.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the last tensor",
            bytes.len() - c.pos
        )));
    }
    Ok((spec, NetworkParams { layers }))
}

pub fn save_checkpoint(path: &Path, spec: &NetworkSpec, params: &NetworkParams) -> Result<()> {
    let mut buf = Vec::new();
    write_checkpoint(&mut buf, spec, params)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(NetworkSpec, NetworkParams)> {
    read_checkpoint(std::fs::File::open(path)?)
}
