//! WFC1 checkpoint format (little-endian):
//!
//! ```text
//! magic "WFC1" | version u32 = 1
//! payload:
//!   channels u32 | layers u32 | modes_v u32 | modes_h u32 | groups u32
//!   | conditioning u8 | activation u8 | 2 pad bytes
//!   | lift_width u32 | seed u64
//!   | nx u32 | nz u32 | dl_x f64 | dl_z f64 | eps_max f64
//!   | every parameter tensor as f64, declaration order
//! crc32 u32 of the payload (IEEE, reflected)
//! ```
//!
//! Weights are stored as f64 regardless of the precision the model runs in.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::sync::OnceLock;

use super::{Activation, Conditioning, Model, ModelConfig, Parameters, Real};
use crate::{CoreError, Grid2D, Result};

pub const MAGIC: [u8; 4] = *b"WFC1";
pub const VERSION: u32 = 1;

fn crc_table() -> &'static [u32; 256] {
    static TABLE: OnceLock<[u32; 256]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut table = [0u32; 256];
        for (i, slot) in table.iter_mut().enumerate() {
            let mut c = i as u32;
            for _ in 0..8 {
                c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
            }
            *slot = c;
        }
        table
    })
}

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(bytes: &[u8]) -> u32 {
    let table = crc_table();
    let mut c = 0xFFFF_FFFFu32;
    for &b in bytes {
        c = table[((c ^ b as u32) & 0xFF) as usize] ^ (c >> 8);
    }
    c ^ 0xFFFF_FFFF
}

fn conditioning_code(c: Conditioning) -> u8 {
    match c {
        Conditioning::Wime => 0,
        Conditioning::Concat => 1,
    }
}

fn conditioning_from(code: u8) -> Result<Conditioning> {
    match code {
        0 => Ok(Conditioning::Wime),
        1 => Ok(Conditioning::Concat),
        other => Err(CoreError::InvalidArg(format!(
            "unknown conditioning code {other}"
        ))),
    }
}

fn encode_payload<F: Real>(model: &Model<F>) -> Vec<u8> {
    let cfg = &model.cfg;
    let mut p = Vec::new();
    p.extend_from_slice(&(cfg.channels as u32).to_le_bytes());
    p.extend_from_slice(&(cfg.layers as u32).to_le_bytes());
    p.extend_from_slice(&(cfg.modes_v as u32).to_le_bytes());
    p.extend_from_slice(&(cfg.modes_h as u32).to_le_bytes());
    p.extend_from_slice(&(cfg.groups as u32).to_le_bytes());
    p.push(conditioning_code(cfg.conditioning));
    p.push(0); // activation: gelu
    p.extend_from_slice(&[0u8; 2]);
    p.extend_from_slice(&(cfg.lift_width as u32).to_le_bytes());
    p.extend_from_slice(&cfg.seed.to_le_bytes());
    p.extend_from_slice(&(model.grid.nx as u32).to_le_bytes());
    p.extend_from_slice(&(model.grid.nz as u32).to_le_bytes());
    p.extend_from_slice(&model.grid.dl_x.to_le_bytes());
    p.extend_from_slice(&model.grid.dl_z.to_le_bytes());
    p.extend_from_slice(&model.eps_max.to_le_bytes());
    for v in model.params.flatten() {
        p.extend_from_slice(&v.as_f64().to_le_bytes());
    }
    p
}

/// Saves the model as a WFC1 checkpoint.
pub fn save_checkpoint<F: Real>(model: &Model<F>, path: &Path) -> Result<()> {
    let payload = encode_payload(model);
    let f = File::create(path)?;
    let mut w = BufWriter::new(f);
    w.write_all(&MAGIC)?;
    w.write_all(&VERSION.to_le_bytes())?;
    w.write_all(&payload)?;
    w.write_all(&crc32(&payload).to_le_bytes())?;
    w.flush()?;
    Ok(())
}

/// Loads a WFC1 checkpoint, casting the stored f64 weights to `F`.
pub fn load_checkpoint<F: Real>(path: &Path) -> Result<Model<F>> {
    let f = File::open(path)?;
    let mut r = BufReader::new(f);
    let mut all = Vec::new();
    r.read_to_end(&mut all)?;
    if all.len() < 8 {
        return Err(CoreError::Truncated {
            expected: 8,
            found: all.len() as u64,
        });
    }
    if all[0..4] != MAGIC {
        return Err(CoreError::BadMagic {
            expected: MAGIC,
            found: [all[0], all[1], all[2], all[3]],
        });
    }
    let version = u32::from_le_bytes(all[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(CoreError::VersionMismatch {
            expected: VERSION,
            found: version,
        });
    }
    if all.len() < 12 {
        return Err(CoreError::Truncated {
            expected: 12,
            found: all.len() as u64,
        });
    }
    let payload = &all[8..all.len() - 4];
    let stored_crc = u32::from_le_bytes(all[all.len() - 4..].try_into().unwrap());
    let computed = crc32(payload);
    if stored_crc != computed {
        return Err(CoreError::ChecksumMismatch {
            expected: stored_crc,
            found: computed,
        });
    }

    let mut pos = 0usize;
    let take_u32 = |pos: &mut usize| -> Result<u32> {
        if *pos + 4 > payload.len() {
            return Err(CoreError::Truncated {
                expected: (*pos + 4) as u64,
                found: payload.len() as u64,
            });
        }
        let v = u32::from_le_bytes(payload[*pos..*pos + 4].try_into().unwrap());
        *pos += 4;
        Ok(v)
    };
    let take_u64 = |pos: &mut usize| -> Result<u64> {
        if *pos + 8 > payload.len() {
            return Err(CoreError::Truncated {
                expected: (*pos + 8) as u64,
                found: payload.len() as u64,
            });
        }
        let v = u64::from_le_bytes(payload[*pos..*pos + 8].try_into().unwrap());
        *pos += 8;
        Ok(v)
    };

    let channels = take_u32(&mut pos)? as usize;
    let layers = take_u32(&mut pos)? as usize;
    let modes_v = take_u32(&mut pos)? as usize;
    let modes_h = take_u32(&mut pos)? as usize;
    let groups = take_u32(&mut pos)? as usize;
    let conditioning = conditioning_from(payload[pos])?;
    if payload[pos + 1] != 0 {
        return Err(CoreError::InvalidArg(format!(
            "unknown activation code {}",
            payload[pos + 1]
        )));
    }
    pos += 4; // conditioning, activation, 2 pad
    let lift_width = take_u32(&mut pos)? as usize;
    let seed = take_u64(&mut pos)?;
    let nx = take_u32(&mut pos)? as usize;
    let nz = take_u32(&mut pos)? as usize;
    let dl_x = f64::from_bits(take_u64(&mut pos)?);
    let dl_z = f64::from_bits(take_u64(&mut pos)?);
    let eps_max = f64::from_bits(take_u64(&mut pos)?);

    let cfg = ModelConfig {
        channels,
        layers,
        modes_v,
        modes_h,
        groups,
        conditioning,
        activation: Activation::Gelu,
        lift_width,
        seed,
    };
    cfg.validate()?;
    let grid = Grid2D::new(nx, nz, dl_x, dl_z)?;

    let expected = cfg.param_count();
    let remaining = payload.len() - pos;
    if remaining != expected * 8 {
        return Err(CoreError::ShapeMismatch(format!(
            "checkpoint holds {} tensor bytes, config implies {}",
            remaining,
            expected * 8
        )));
    }
    let mut flat = Vec::with_capacity(expected);
    for chunk in payload[pos..].chunks_exact(8) {
        flat.push(F::of(f64::from_le_bytes(chunk.try_into().unwrap())));
    }
    let mut params = Parameters::<F>::zeros(&cfg);
    params.assign_from_flat(&flat)?;
    Model::with_params(cfg, grid, eps_max, params)
}
