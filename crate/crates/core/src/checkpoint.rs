//! Versioned little-endian checkpoint files.
//!
//! ```text
//! "SAFN"            magic
//! u32               format version
//! -- body --
//! u64               config fingerprint (FNV-1a 64 of the config block)
//! u32               config block length, then the config block
//! u64               step
//! u64               RNG state
//! u32               tensor count
//! per tensor:       u32 name length, UTF-8 name, u32 rank, u64 extents, f64 data
//! -- end body --
//! u32               CRC-32 of the body
//! ```
//!
//! The config block holds widths (4 × u32), image size (u32), epsilon (f64),
//! attention flag (u8), learning rate (f64), λ_s (f64), batch size (u32) and
//! seed (u64). Tensors are the frozen encoder, every learnable, and the Adam
//! moments under `adam_m/` and `adam_v/`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};
use crate::network::{EncoderNet, Learnables, StyleNet, StylizationConfig};
use crate::rng::SplitMix64;
use crate::tensor::Tensor;
use crate::trainer::{TrainSettings, TrainState};

pub const MAGIC: &[u8; 4] = b"SAFN";
pub const FORMAT_VERSION: u32 = 1;

/// 64-bit FNV-1a.
#[derive(Clone, Copy, Debug)]
pub struct Fnv1a(u64);

impl Fnv1a {
    pub fn new() -> Self {
        Self(0xcbf2_9ce4_8422_2325)
    }

    pub fn write(&mut self, bytes: &[u8]) {
        for &b in bytes {
            self.0 ^= b as u64;
            self.0 = self.0.wrapping_mul(0x0100_0000_01b3);
        }
    }

    pub fn finish(&self) -> u64 {
        self.0
    }
}

impl Default for Fnv1a {
    fn default() -> Self {
        Self::new()
    }
}

fn config_block(cfg: &StylizationConfig, s: &TrainSettings) -> Vec<u8> {
    let mut b = Vec::with_capacity(61);
    for w in cfg.widths {
        b.extend_from_slice(&(w as u32).to_le_bytes());
    }
    b.extend_from_slice(&(cfg.input_size as u32).to_le_bytes());
    b.extend_from_slice(&cfg.epsilon.to_le_bytes());
    b.push(cfg.attention_enabled as u8);
    b.extend_from_slice(&s.learning_rate.to_le_bytes());
    b.extend_from_slice(&s.lambda_s.to_le_bytes());
    b.extend_from_slice(&(s.batch_size as u32).to_le_bytes());
    b.extend_from_slice(&s.seed.to_le_bytes());
    b
}

/// Fingerprint of the model and optimization settings a state was built with.
pub fn config_fingerprint(cfg: &StylizationConfig, s: &TrainSettings) -> u64 {
    let mut h = Fnv1a::new();
    h.write(&config_block(cfg, s));
    h.finish()
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &e in t.shape() {
        out.extend_from_slice(&(e as u64).to_le_bytes());
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Serializes a training state to bytes.
pub fn encode_checkpoint(state: &TrainState) -> Vec<u8> {
    let block = config_block(&state.net.config, &state.settings);
    let mut body = Vec::new();
    body.extend_from_slice(&config_fingerprint(&state.net.config, &state.settings).to_le_bytes());
    body.extend_from_slice(&(block.len() as u32).to_le_bytes());
    body.extend_from_slice(&block);
    body.extend_from_slice(&state.step.to_le_bytes());
    body.extend_from_slice(&state.rng.state().to_le_bytes());

    let names = Learnables::names();
    let mut records: Vec<(String, &Tensor)> = state.net.encoder.named_tensors();
    records.extend(names.iter().cloned().zip(state.net.learnables.tensors()));
    records.extend(names.iter().map(|n| format!("adam_m/{n}")).zip(&state.adam_m));
    records.extend(names.iter().map(|n| format!("adam_v/{n}")).zip(&state.adam_v));
    body.extend_from_slice(&(records.len() as u32).to_le_bytes());
    for (name, t) in &records {
        put_tensor(&mut body, name, t);
    }

    let mut out = Vec::with_capacity(body.len() + 12);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&body);
    out.extend_from_slice(&crc32fast::hash(&body).to_le_bytes());
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Corrupt(format!("unexpected end of data at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn tensor(&mut self) -> Result<(String, Tensor)> {
        let len = self.u32()? as usize;
        let name = std::str::from_utf8(self.take(len)?)
            .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = self.u32()? as usize;
        if rank > 8 {
            return Err(Error::Corrupt(format!("{name}: implausible rank {rank}")));
        }
        let shape = (0..rank)
            .map(|_| self.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &e| acc.checked_mul(e))
            .filter(|&c| c.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
            .ok_or_else(|| Error::Corrupt(format!("{name}: extents {shape:?} exceed the file")))?;
        let raw = self.take(count * 8)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::Corrupt(format!("{name}: {e}")))?;
        Ok((name, t))
    }
}

/// Parses and validates a checkpoint. Nothing is returned unless every check
/// passes.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<TrainState> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(Error::VersionMismatch("missing SAFN magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(Error::VersionMismatch(format!(
            "format version {version}, expected {FORMAT_VERSION}"
        )));
    }
    if bytes.len() < 12 {
        return Err(Error::Corrupt("file truncated".into()));
    }
    let (body, crc) = bytes[8..].split_at(bytes.len() - 12);
    let stored = u32::from_le_bytes(crc.try_into().expect("4 bytes"));
    if crc32fast::hash(body) != stored {
        return Err(Error::Corrupt("checksum mismatch (truncated or modified)".into()));
    }

    let mut r = Reader { buf: body, pos: 0 };
    let fingerprint = r.u64()?;
    let block_len = r.u32()? as usize;
    let block = r.take(block_len)?;
    let mut br = Reader { buf: block, pos: 0 };
    let widths = [br.u32()?, br.u32()?, br.u32()?, br.u32()?].map(|w| w as usize);
    let config = StylizationConfig {
        widths,
        input_size: br.u32()? as usize,
        epsilon: br.f64()?,
        attention_enabled: br.u8()? != 0,
    };
    let settings = TrainSettings {
        learning_rate: br.f64()?,
        lambda_s: br.f64()?,
        batch_size: br.u32()? as usize,
        seed: br.u64()?,
    };
    if config_fingerprint(&config, &settings) != fingerprint {
        return Err(Error::Corrupt("config fingerprint mismatch".into()));
    }
    config
        .validate()
        .map_err(|e| Error::Corrupt(format!("stored config invalid: {e}")))?;

    let step = r.u64()?;
    let rng = SplitMix64::new(r.u64()?);
    let count = r.u32()? as usize;
    let mut tensors = HashMap::with_capacity(count);
    for _ in 0..count {
        let (name, t) = r.tensor()?;
        if tensors.insert(name.clone(), t).is_some() {
            return Err(Error::Corrupt(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != body.len() {
        return Err(Error::Corrupt("trailing bytes after tensor records".into()));
    }

    let mut take = |name: &str| {
        tensors
            .remove(name)
            .ok_or_else(|| Error::Corrupt(format!("missing tensor {name}")))
    };
    let mut encoder = EncoderNet::seeded(widths, &mut SplitMix64::new(0));
    for k in 0..4 {
        encoder.weights[k] = take(&format!("encoder/conv{}.weight", k + 1))?;
        encoder.biases[k] = take(&format!("encoder/conv{}.bias", k + 1))?;
    }
    let reference = EncoderNet::seeded(widths, &mut SplitMix64::new(0));
    for ((name, have), (_, want)) in encoder.named_tensors().iter().zip(reference.named_tensors()) {
        if have.shape() != want.shape() {
            return Err(Error::Corrupt(format!("{name} has shape {:?}", have.shape())));
        }
    }

    let names = Learnables::names();
    let mut learnables = Learnables::init(widths, &mut SplitMix64::new(0));
    for (name, slot) in names.iter().zip(learnables.tensors_mut()) {
        *slot = take(name)?;
    }
    learnables
        .validate(widths)
        .map_err(|e| Error::Corrupt(e.to_string()))?;
    let mut moments = |prefix: &str| -> Result<Vec<Tensor>> {
        names
            .iter()
            .zip(learnables.tensors())
            .map(|(n, p)| {
                let t = take(&format!("{prefix}/{n}"))?;
                if t.shape() != p.shape() {
                    return Err(Error::Corrupt(format!("{prefix}/{n} shape {:?}", t.shape())));
                }
                Ok(t)
            })
            .collect()
    };
    let adam_m = moments("adam_m")?;
    let adam_v = moments("adam_v")?;
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Corrupt(format!("unexpected tensor {extra}")));
    }

    Ok(TrainState {
        net: StyleNet {
            config,
            encoder,
            learnables,
        },
        settings,
        adam_m,
        adam_v,
        step,
        rng,
    })
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| Error::Config(format!("{} is not a file path", path.display())))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(format!(".{}.tmp", std::process::id()));
    let tmp = path.with_file_name(tmp_name);
    let result = (|| {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
        fs::rename(&tmp, path)
    })();
    if result.is_err() {
        let _ = fs::remove_file(&tmp);
    }
    Ok(result?)
}

pub fn save_checkpoint(state: &TrainState, path: &Path) -> Result<()> {
    write_atomic(path, &encode_checkpoint(state))
}

pub fn load_checkpoint(path: &Path) -> Result<TrainState> {
    decode_checkpoint(&fs::read(path)?)
}
