//! Binary policy checkpoints.
//!
//! Layout (little-endian): 8-byte magic, `u32` version, seven `u32`
//! architecture fields (input channels, channels, blocks, pool rows, pool
//! cols, hidden width, actions), `u64` parameter count, then every parameter
//! as an `f32` in declaration order.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::net::{Architecture, PolicyParams};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"AIAPOLCY";
pub const CHECKPOINT_VERSION: u32 = 1;

fn format_err(reason: impl Into<String>) -> Error {
    Error::Format { kind: "checkpoint", reason: reason.into() }
}

/// Parameters are stored as `f32`; values already representable in `f32`
/// (as produced by init and training) round-trip exactly.
pub fn write_checkpoint<W: Write>(params: &PolicyParams, mut w: W) -> Result<()> {
    params.check()?;
    let a = &params.arch;
    w.write_all(CHECKPOINT_MAGIC)?;
    w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
    for d in [a.in_channels, a.channels, a.blocks, a.pool_h, a.pool_w, a.hidden, a.actions] {
        let d = u32::try_from(d).map_err(|_| format_err("architecture dimension exceeds u32"))?;
        w.write_all(&d.to_le_bytes())?;
    }
    w.write_all(&(params.values.len() as u64).to_le_bytes())?;
    for &v in &params.values {
        w.write_all(&(v as f32).to_le_bytes())?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<PolicyParams> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(format_err("bad magic"));
    }
    let mut u32buf = [0u8; 4];
    let mut next_u32 = |r: &mut R| -> Result<u32> {
        r.read_exact(&mut u32buf)?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let version = next_u32(&mut r)?;
    if version != CHECKPOINT_VERSION {
        return Err(format_err(format!("unsupported version {version}")));
    }
    let mut dims = [0usize; 7];
    for d in &mut dims {
        *d = next_u32(&mut r)? as usize;
    }
    let arch = Architecture {
        in_channels: dims[0],
        channels: dims[1],
        blocks: dims[2],
        pool_h: dims[3],
        pool_w: dims[4],
        hidden: dims[5],
        actions: dims[6],
    };
    arch.validate()?;
    let mut u64buf = [0u8; 8];
    r.read_exact(&mut u64buf)?;
    let count = u64::from_le_bytes(u64buf);
    if count != arch.param_count() as u64 {
        return Err(format_err(format!("{count} parameters, architecture needs {}", arch.param_count())));
    }
    let mut bytes = vec![0u8; arch.param_count() * 4];
    r.read_exact(&mut bytes)?;
    let values = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64).collect();
    let mut rest = [0u8; 1];
    if r.read(&mut rest)? != 0 {
        return Err(format_err("trailing bytes"));
    }
    let params = PolicyParams { arch, values };
    params.check()?;
    Ok(params)
}

pub fn save_checkpoint(params: &PolicyParams, path: &Path) -> Result<()> {
    write_checkpoint(params, BufWriter::new(File::create(path)?))
}

pub fn load_checkpoint(path: &Path) -> Result<PolicyParams> {
    read_checkpoint(BufReader::new(File::open(path)?))
}
