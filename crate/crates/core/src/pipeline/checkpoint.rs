//! Binary checkpoint format.
//!
//! ```text
//! "FFRK" | u32 version | 32-byte config hash | u32 record count
//! record*: u32 name length | name | u32 rank | u64 dims[rank] | f64 data
//! 32-byte SHA-256 of everything before it
//! ```
//! Integers and floats are little-endian. Integer state (step, RNG words)
//! is stored as 32-bit halves, which f64 holds exactly.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::{ModelState, PipelineError, Result};
use crate::tensor::{Moments, Tensor};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"FFRK";
pub const CHECKPOINT_VERSION: u32 = 1;
const MAX_NAME: usize = 4096;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointData {
    pub version: u32,
    pub config_hash: [u8; 32],
    pub records: Vec<(String, Tensor)>,
}

fn bad(detail: impl Into<String>) -> PipelineError {
    PipelineError::Checkpoint(detail.into())
}

fn halves(v: u64) -> [f64; 2] {
    [(v & 0xffff_ffff) as f64, (v >> 32) as f64]
}

fn join(lo: f64, hi: f64) -> Result<u64> {
    let ok = |x: f64| x >= 0.0 && x <= u32::MAX as f64 && x.fract() == 0.0;
    if !ok(lo) || !ok(hi) {
        return Err(bad("integer field is not a pair of 32-bit halves"));
    }
    Ok(lo as u64 | ((hi as u64) << 32))
}

fn words(v: &[u64]) -> Tensor {
    let data: Vec<f64> = v.iter().flat_map(|&x| halves(x)).collect();
    Tensor::new(&[data.len()], data).expect("non-empty")
}

fn unwords(t: &Tensor) -> Result<Vec<u64>> {
    if !t.len().is_multiple_of(2) {
        return Err(bad("odd-length integer record"));
    }
    t.data().chunks_exact(2).map(|c| join(c[0], c[1])).collect()
}

impl CheckpointData {
    pub fn from_state(state: &ModelState) -> Self {
        let mut records = Vec::new();
        for (name, e) in state.registry.iter() {
            records.push((format!("param/{name}"), e.value.clone()));
        }
        for (name, mo) in &state.adam.moments {
            records.push((format!("adam.m/{name}"), mo.m.clone()));
            records.push((format!("adam.v/{name}"), mo.v.clone()));
        }
        let rng = &state.rng;
        let seed = rng.get_seed();
        let seed_words: Vec<u64> = seed
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let pos = rng.get_word_pos();
        let mut order = vec![state.order.len() as u64];
        order.extend(state.order.iter().map(|&i| i as u64));
        records.push(("meta/step".into(), words(&[state.step])));
        records.push(("meta/adam_t".into(), words(&[state.adam.t])));
        records.push(("meta/encoder_frozen".into(), words(&[state.encoder_frozen as u64])));
        records.push(("meta/rng_seed".into(), words(&seed_words)));
        records.push(("meta/rng_stream".into(), words(&[rng.get_stream()])));
        records.push(("meta/rng_pos".into(), words(&[pos as u64, (pos >> 64) as u64])));
        records.push(("meta/order".into(), words(&order)));
        Self {
            version: CHECKPOINT_VERSION,
            config_hash: state.config_hash,
            records,
        }
    }

    /// Validates every record against `state` and only then overwrites it.
    pub fn restore_into(&self, state: &mut ModelState, force: bool) -> Result<()> {
        if self.config_hash != state.config_hash && !force {
            return Err(bad(format!(
                "was written under config {} but the current config hashes to {}; pass --force to load anyway",
                hex::encode(self.config_hash),
                hex::encode(state.config_hash)
            )));
        }
        let mut map: BTreeMap<&str, &Tensor> = BTreeMap::new();
        for (name, t) in &self.records {
            if map.insert(name.as_str(), t).is_some() {
                return Err(bad(format!("duplicate record {name}")));
            }
        }
        fn take<'t>(map: &mut BTreeMap<&str, &'t Tensor>, name: &str) -> Result<&'t Tensor> {
            map.remove(name).ok_or_else(|| bad(format!("missing record {name}")))
        }

        let mut registry = state.registry.clone();
        let names: Vec<String> = registry.iter().map(|(n, _)| n.to_string()).collect();
        for name in &names {
            let t = take(&mut map, &format!("param/{name}"))?;
            registry.overwrite(name, t.clone()).map_err(|e| bad(e.to_string()))?;
        }
        let one = |t: &Tensor| -> Result<u64> {
            match unwords(t)?.as_slice() {
                [v] => Ok(*v),
                _ => Err(bad("expected a single integer")),
            }
        };
        let step = one(take(&mut map, "meta/step")?)?;
        let adam_t = one(take(&mut map, "meta/adam_t")?)?;
        let frozen = match one(take(&mut map, "meta/encoder_frozen")?)? {
            0 => false,
            1 => true,
            v => return Err(bad(format!("encoder flag {v} is not 0 or 1"))),
        };
        let seed_words = unwords(take(&mut map, "meta/rng_seed")?)?;
        if seed_words.len() != 4 {
            return Err(bad("RNG seed must hold 32 bytes"));
        }
        let mut seed = [0u8; 32];
        for (chunk, w) in seed.chunks_exact_mut(8).zip(&seed_words) {
            chunk.copy_from_slice(&w.to_le_bytes());
        }
        let stream = one(take(&mut map, "meta/rng_stream")?)?;
        let pos = match unwords(take(&mut map, "meta/rng_pos")?)?.as_slice() {
            [lo, hi] => *lo as u128 | ((*hi as u128) << 64),
            _ => return Err(bad("RNG position must hold two words")),
        };
        let order_words = unwords(take(&mut map, "meta/order")?)?;
        let (&len, rest) = order_words.split_first().ok_or_else(|| bad("empty order record"))?;
        if len as usize != rest.len() || rest.iter().any(|&i| i >= rest.len() as u64) {
            return Err(bad("batch order is not a permutation"));
        }
        let order: Vec<usize> = rest.iter().map(|&i| i as usize).collect();

        let mut moments = BTreeMap::new();
        let moment_names: Vec<String> = map
            .keys()
            .filter_map(|k| k.strip_prefix("adam.m/"))
            .map(str::to_string)
            .collect();
        for name in moment_names {
            let m = take(&mut map, &format!("adam.m/{name}"))?;
            let v = take(&mut map, &format!("adam.v/{name}"))?;
            let entry = registry
                .get(&name)
                .ok_or_else(|| bad(format!("optimizer state for unknown parameter {name}")))?;
            if m.shape() != entry.value.shape() || v.shape() != entry.value.shape() {
                return Err(bad(format!("optimizer state for {name} has the wrong shape")));
            }
            moments.insert(
                name,
                Moments {
                    m: m.clone(),
                    v: v.clone(),
                },
            );
        }
        if let Some(extra) = map.keys().next() {
            return Err(bad(format!("unexpected record {extra}")));
        }

        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(stream);
        rng.set_word_pos(pos);
        if frozen {
            registry.freeze_prefix("enc.");
        }
        state.registry = registry;
        state.adam.moments = moments;
        state.adam.t = adam_t;
        state.step = step;
        state.encoder_frozen = frozen;
        state.rng = rng;
        state.order = order;
        Ok(())
    }
}

pub fn encode_checkpoint(data: &CheckpointData) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&data.version.to_le_bytes());
    out.extend_from_slice(&data.config_hash);
    let count = u32::try_from(data.records.len()).map_err(|_| bad("too many records"))?;
    out.extend_from_slice(&count.to_le_bytes());
    for (name, t) in &data.records {
        if name.len() > MAX_NAME || t.shape().len() > MAX_RANK {
            return Err(bad(format!("record {name} exceeds format limits")));
        }
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| bad(format!("is truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

/// Parses and verifies a checkpoint without touching any model state.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<CheckpointData> {
    if bytes.len() < 4 || &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(bad("is not an FFRK file"));
    }
    if bytes.len() < 4 + 4 + 32 + 4 + 32 {
        return Err(bad("is truncated"));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(format!(
            "has format version {version}; this build reads version {CHECKPOINT_VERSION}"
        )));
    }
    if Sha256::digest(body).as_slice() != digest {
        return Err(bad("failed its integrity check (truncated or corrupted)"));
    }
    let mut config_hash = [0u8; 32];
    config_hash.copy_from_slice(r.take(32, "config hash")?);
    let count = r.u32("record count")?;
    let mut records = Vec::new();
    for i in 0..count {
        let len = r.u32("name length")? as usize;
        if len > MAX_NAME {
            return Err(bad(format!("record {i}: name length {len} exceeds {MAX_NAME}")));
        }
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| bad(format!("record {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        if rank == 0 || rank > MAX_RANK {
            return Err(bad(format!("record {name}: rank {rank} outside 1..={MAX_RANK}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            let d = usize::try_from(r.u64("dimension")?).map_err(|_| bad(format!("record {name}: huge dimension")))?;
            shape.push(d);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(8).map(|b| (n, b)));
        let (numel, nbytes) = numel.ok_or_else(|| bad(format!("record {name}: size overflows")))?;
        let raw = r.take(nbytes, "tensor data")?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        debug_assert_eq!(data.len(), numel);
        let t = Tensor::new(&shape, data).map_err(|e| bad(format!("record {name}: {e}")))?;
        records.push((name, t));
    }
    if r.pos != body.len() {
        return Err(bad(format!("has {} trailing bytes", body.len() - r.pos)));
    }
    Ok(CheckpointData {
        version,
        config_hash,
        records,
    })
}
