//! Binary checkpoint format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"SLCK"
//! version    u32          (currently 1)
//! step       u64
//! epoch      u64
//! hash_len   u64          followed by that many UTF-8 bytes (config hash)
//! rng_flag   u8           1 if a serialized RNG follows
//! [rng_len   u64 + JSON bytes]
//! params     named tensor map
//! optim_t    u64          Adam step counter
//! optim_m    named tensor map
//! optim_v    named tensor map
//! ```
//!
//! A named tensor map is `count u64` followed by `count` entries of
//! `name_len u64, name bytes, ndim u64, dims u64..., data f64-LE...`.
//! Tensors are stored as f64 regardless of the training precision, so
//! checkpoints written by f32 and f64 runs are interchangeable.

use crate::error::{Result, SlotError};
use crate::nn::{Adam, ParamStore};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

const MAGIC: &[u8; 4] = b"SLCK";
pub const VERSION: u32 = 1;

pub struct Checkpoint {
    pub step: u64,
    pub epoch: u64,
    pub config_hash: String,
    pub rng: Option<ChaCha8Rng>,
    pub params: ParamStore,
    pub optim_t: u64,
    pub optim_m: BTreeMap<String, ArrayD<f64>>,
    pub optim_v: BTreeMap<String, ArrayD<f64>>,
}

impl Checkpoint {
    /// Restore the Adam moment estimates into a fresh optimizer.
    pub fn optimizer(&self, weight_decay: f64) -> Adam {
        let mut adam = Adam::new(weight_decay);
        adam.t = self.optim_t as usize;
        adam.m = self.optim_m.clone();
        adam.v = self.optim_v.clone();
        adam
    }
}

fn write_map<W: Write>(w: &mut W, map: &BTreeMap<String, ArrayD<f64>>) -> std::io::Result<()> {
    w.write_u64::<LittleEndian>(map.len() as u64)?;
    for (name, arr) in map {
        w.write_u64::<LittleEndian>(name.len() as u64)?;
        w.write_all(name.as_bytes())?;
        w.write_u64::<LittleEndian>(arr.ndim() as u64)?;
        for &d in arr.shape() {
            w.write_u64::<LittleEndian>(d as u64)?;
        }
        for &v in arr.iter() {
            w.write_f64::<LittleEndian>(v)?;
        }
    }
    Ok(())
}

fn bad(msg: impl Into<String>) -> SlotError {
    SlotError::Checkpoint(msg.into())
}

fn read_map<R: Read>(r: &mut R) -> Result<BTreeMap<String, ArrayD<f64>>> {
    let count = r.read_u64::<LittleEndian>()?;
    let mut map = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.read_u64::<LittleEndian>()? as usize;
        if name_len > 1 << 20 {
            return Err(bad("implausible tensor name length"));
        }
        let mut name = vec![0u8; name_len];
        r.read_exact(&mut name)?;
        let name = String::from_utf8(name).map_err(|_| bad("tensor name is not UTF-8"))?;
        let ndim = r.read_u64::<LittleEndian>()? as usize;
        if ndim > 8 {
            return Err(bad(format!("implausible tensor rank {ndim}")));
        }
        let mut dims = Vec::with_capacity(ndim);
        let mut numel = 1usize;
        for _ in 0..ndim {
            let d = r.read_u64::<LittleEndian>()? as usize;
            numel = numel.saturating_mul(d);
            dims.push(d);
        }
        if numel > 1 << 30 {
            return Err(bad("implausible tensor size"));
        }
        let mut data = Vec::with_capacity(numel);
        for _ in 0..numel {
            data.push(r.read_f64::<LittleEndian>()?);
        }
        let arr = ArrayD::from_shape_vec(ndarray::IxDyn(&dims), data)
            .map_err(|e| bad(format!("tensor {name}: {e}")))?;
        map.insert(name, arr);
    }
    Ok(map)
}

pub fn save(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u64::<LittleEndian>(ckpt.step)?;
    w.write_u64::<LittleEndian>(ckpt.epoch)?;
    w.write_u64::<LittleEndian>(ckpt.config_hash.len() as u64)?;
    w.write_all(ckpt.config_hash.as_bytes())?;
    match &ckpt.rng {
        Some(rng) => {
            let bytes = serde_json::to_vec(rng).map_err(|e| bad(format!("rng encode: {e}")))?;
            w.write_u8(1)?;
            w.write_u64::<LittleEndian>(bytes.len() as u64)?;
            w.write_all(&bytes)?;
        }
        None => w.write_u8(0)?,
    }
    let params: BTreeMap<String, ArrayD<f64>> = ckpt
        .params
        .iter()
        .map(|(n, a)| (n.to_string(), a.clone()))
        .collect();
    write_map(&mut w, &params)?;
    w.write_u64::<LittleEndian>(ckpt.optim_t)?;
    write_map(&mut w, &ckpt.optim_m)?;
    write_map(&mut w, &ckpt.optim_v)?;
    w.flush()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(bad(format!("{}: not a checkpoint file", path.display())));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(bad(format!(
            "{}: unsupported checkpoint version {version} (expected {VERSION})",
            path.display()
        )));
    }
    let step = r.read_u64::<LittleEndian>()?;
    let epoch = r.read_u64::<LittleEndian>()?;
    let hash_len = r.read_u64::<LittleEndian>()? as usize;
    if hash_len > 1 << 16 {
        return Err(bad("implausible config hash length"));
    }
    let mut hash = vec![0u8; hash_len];
    r.read_exact(&mut hash)?;
    let config_hash = String::from_utf8(hash).map_err(|_| bad("config hash is not UTF-8"))?;
    let rng = match r.read_u8()? {
        0 => None,
        1 => {
            let len = r.read_u64::<LittleEndian>()? as usize;
            if len > 1 << 20 {
                return Err(bad("implausible rng state length"));
            }
            let mut bytes = vec![0u8; len];
            r.read_exact(&mut bytes)?;
            Some(serde_json::from_slice(&bytes).map_err(|e| bad(format!("rng decode: {e}")))?)
        }
        f => return Err(bad(format!("bad rng flag {f}"))),
    };
    let mut params = ParamStore::new();
    for (name, arr) in read_map(&mut r)? {
        params.insert(&name, arr);
    }
    let optim_t = r.read_u64::<LittleEndian>()?;
    let optim_m = read_map(&mut r)?;
    let optim_v = read_map(&mut r)?;
    Ok(Checkpoint {
        step,
        epoch,
        config_hash,
        rng,
        params,
        optim_t,
        optim_m,
        optim_v,
    })
}
