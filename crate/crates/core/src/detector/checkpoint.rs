//! Binary checkpoint: `YSTD` magic, u32 header fields, then named f32 tensors.

use std::io::{Read, Write};

use super::params::ModelParams;
use super::{DetectorError, ModelConfig};

const MAGIC: &[u8; 4] = b"YSTD";
const VERSION: u32 = 1;

fn put(w: &mut impl Write, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn get(r: &mut impl Read) -> Result<u32, DetectorError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub fn write_checkpoint<W: Write>(params: &ModelParams, mut w: W) -> Result<(), DetectorError> {
    let c = params.config;
    w.write_all(MAGIC)?;
    for v in [
        VERSION,
        c.regions() as u32,
        c.c_max as u32,
        c.blocks as u32,
        c.layers as u32,
        c.t_max as u32,
        c.kernel as u32,
        c.groups as u32,
        c.heads as u32,
        c.ffn_dim as u32,
    ] {
        put(&mut w, v)?;
    }
    let tensors = params.named_tensors();
    put(&mut w, tensors.len() as u32)?;
    for (name, t) in tensors {
        put(&mut w, name.len() as u32)?;
        w.write_all(name.as_bytes())?;
        put(&mut w, t.shape.len() as u32)?;
        for &d in &t.shape {
            put(&mut w, d as u32)?;
        }
        let mut bytes = Vec::with_capacity(t.len() * 4);
        for v in &t.data {
            bytes.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&bytes)?;
    }
    Ok(())
}

pub fn read_checkpoint<R: Read>(mut r: R) -> Result<ModelParams, DetectorError> {
    let bad = |m: String| DetectorError::Checkpoint(m);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad("bad magic".into()));
    }
    let version = get(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("unsupported version {version}")));
    }
    let mut h = [0usize; 9];
    for v in h.iter_mut() {
        *v = get(&mut r)? as usize;
    }
    let [regions, c_max, blocks, layers, t_max, kernel, groups, heads, ffn_dim] = h;
    let config = ModelConfig {
        c_max,
        t_max,
        blocks,
        kernel,
        groups,
        layers,
        heads,
        ffn_dim,
    };
    config.validate()?;
    if config.regions() != regions {
        return Err(bad(format!("region count {regions} inconsistent with t_max/blocks")));
    }
    let mut params = ModelParams::init(config, 0);
    let names: Vec<String> = params.named_tensors().into_iter().map(|(n, _)| n).collect();
    let count = get(&mut r)? as usize;
    if count != names.len() {
        return Err(bad(format!("expected {} tensors, found {count}", names.len())));
    }
    for (expected, t) in names.iter().zip(params.tensors_mut()) {
        let len = get(&mut r)? as usize;
        let mut name = vec![0u8; len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8".into()))?;
        if &name != expected {
            return Err(bad(format!("expected tensor {expected}, found {name}")));
        }
        let ndim = get(&mut r)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(get(&mut r)? as usize);
        }
        if shape != t.shape {
            return Err(bad(format!("{name}: shape {shape:?}, expected {:?}", t.shape)));
        }
        let mut bytes = vec![0u8; t.len() * 4];
        r.read_exact(&mut bytes)?;
        for (dst, c) in t.data.iter_mut().zip(bytes.chunks_exact(4)) {
            *dst = f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64;
        }
    }
    Ok(params)
}
