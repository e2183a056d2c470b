//! Bit-exact training checkpoints.
//!
//! Wire format (all integers little-endian):
//!
//! ```text
//! magic   b"MGDN"
//! version u32 (currently 1)
//! config  u32 length + UTF-8 block of key-sorted `key=value` lines
//!         (model.*, opt.*, train.step, train.rng.*)
//! records u32 count, then per record:
//!         u32 name length, name bytes, u64 value count, f64 values
//! crc     u32 CRC-32 (IEEE) over every preceding byte
//! ```
//!
//! Records hold the parameters in store order followed by the Adam moments
//! (`adam.m.<name>`, `adam.v.<name>`). Tensor shapes are implied by the
//! config: loading re-derives the skeleton via [`Model::init`] and fills it
//! by name, so a round trip is byte-identical.

use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{MgdnError, Result};
use crate::model::{AdamConfig, AdamState, Model, ModelConfig, Trainer};

pub const MAGIC: &[u8; 4] = b"MGDN";
pub const VERSION: u32 = 1;

/// Serializable ChaCha state: seed, word position and stream id recover the
/// generator exactly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub word_pos: u128,
    pub stream: u64,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> RngState {
        RngState {
            seed: rng.get_seed(),
            word_pos: rng.get_word_pos(),
            stream: rng.get_stream(),
        }
    }

    pub fn restore(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::from_seed(self.seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(self.word_pos);
        rng
    }
}

/// Everything needed to resume training exactly.
#[derive(Debug)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub opt: AdamConfig,
    pub step: u64,
    pub rng: RngState,
    pub model: Model,
    pub adam: AdamState,
}

impl Checkpoint {
    pub fn from_trainer(t: &Trainer) -> Checkpoint {
        Checkpoint {
            config: t.model.config.clone(),
            opt: t.opt,
            step: t.step,
            rng: RngState::capture(&t.rng),
            model: Model {
                config: t.model.config.clone(),
                params: t.model.params.clone(),
            },
            adam: t.adam.clone(),
        }
    }

    pub fn into_trainer(self) -> Trainer {
        Trainer {
            model: self.model,
            opt: self.opt,
            adam: self.adam,
            rng: self.rng.restore(),
            step: self.step,
        }
    }

    fn config_block(&self) -> String {
        let mut kv = self.config.to_kv();
        kv.push(("opt.beta1".into(), self.opt.beta1.to_string()));
        kv.push(("opt.beta2".into(), self.opt.beta2.to_string()));
        kv.push(("opt.eps".into(), self.opt.eps.to_string()));
        kv.push(("opt.lr".into(), self.opt.lr.to_string()));
        kv.push(("train.rng.seed".into(), hex_encode(&self.rng.seed)));
        kv.push(("train.rng.stream".into(), self.rng.stream.to_string()));
        kv.push(("train.rng.word_pos".into(), self.rng.word_pos.to_string()));
        kv.push(("train.step".into(), self.step.to_string()));
        kv.sort();
        let mut s = String::new();
        for (k, v) in kv {
            s.push_str(&k);
            s.push('=');
            s.push_str(&v);
            s.push('\n');
        }
        s
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut buf: Vec<u8> = Vec::new();
        buf.extend_from_slice(MAGIC);
        buf.extend_from_slice(&VERSION.to_le_bytes());
        let cfg = self.config_block();
        buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
        buf.extend_from_slice(cfg.as_bytes());

        let n_records = self.model.params.len() * 3;
        buf.extend_from_slice(&(n_records as u32).to_le_bytes());
        let write_record = |buf: &mut Vec<u8>, name: &str, data: &[f64]| {
            buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
            buf.extend_from_slice(name.as_bytes());
            buf.extend_from_slice(&(data.len() as u64).to_le_bytes());
            for v in data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        };
        for p in self.model.params.params() {
            write_record(&mut buf, &p.name, p.tensor.data());
        }
        for (p, m) in self.model.params.params().iter().zip(&self.adam.m) {
            write_record(&mut buf, &format!("adam.m.{}", p.name), m);
        }
        for (p, v) in self.model.params.params().iter().zip(&self.adam.v) {
            write_record(&mut buf, &format!("adam.v.{}", p.name), v);
        }
        buf.extend_from_slice(&crc32(&buf).to_le_bytes());
        fs::write(path, &buf).map_err(|e| MgdnError::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Checkpoint> {
        let path = path.as_ref();
        let buf = fs::read(path).map_err(|e| MgdnError::io(path, e))?;
        if buf.len() < 12 {
            return Err(MgdnError::Format(format!(
                "checkpoint too short ({} bytes)",
                buf.len()
            )));
        }
        if &buf[..4] != MAGIC {
            return Err(MgdnError::Format("bad magic (not an MGDN checkpoint)".into()));
        }
        let body = &buf[..buf.len() - 4];
        let stored_crc = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
        let actual_crc = crc32(body);
        if stored_crc != actual_crc {
            return Err(MgdnError::Format(format!(
                "checksum failure: stored {stored_crc:08x}, computed {actual_crc:08x}"
            )));
        }

        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != VERSION {
            return Err(MgdnError::Format(format!(
                "unsupported checkpoint version {version} (this build reads {VERSION})"
            )));
        }
        let cfg_len = r.u32()? as usize;
        let cfg_bytes = r.take(cfg_len)?;
        let cfg_text = std::str::from_utf8(cfg_bytes)
            .map_err(|_| MgdnError::Format("config block is not UTF-8".into()))?
            .to_string();

        let mut model_kv = Vec::new();
        let mut opt = AdamConfig::default();
        let mut step = 0u64;
        let mut rng = RngState { seed: [0; 32], word_pos: 0, stream: 0 };
        for line in cfg_text.lines() {
            let Some((k, v)) = line.split_once('=') else {
                return Err(MgdnError::Format(format!("bad config line '{line}'")));
            };
            let parse_f64 = |v: &str| -> Result<f64> {
                v.parse().map_err(|_| MgdnError::Format(format!("bad float '{v}' for {k}")))
            };
            match k {
                _ if k.starts_with("model.") => model_kv.push((k.to_string(), v.to_string())),
                "opt.lr" => opt.lr = parse_f64(v)?,
                "opt.beta1" => opt.beta1 = parse_f64(v)?,
                "opt.beta2" => opt.beta2 = parse_f64(v)?,
                "opt.eps" => opt.eps = parse_f64(v)?,
                "train.step" => {
                    step = v
                        .parse()
                        .map_err(|_| MgdnError::Format(format!("bad step '{v}'")))?;
                }
                "train.rng.seed" => {
                    let bytes = hex_decode(v)?;
                    if bytes.len() != 32 {
                        return Err(MgdnError::Format("rng seed must be 32 bytes".into()));
                    }
                    rng.seed.copy_from_slice(&bytes);
                }
                "train.rng.word_pos" => {
                    rng.word_pos = v
                        .parse()
                        .map_err(|_| MgdnError::Format(format!("bad word_pos '{v}'")))?;
                }
                "train.rng.stream" => {
                    rng.stream = v
                        .parse()
                        .map_err(|_| MgdnError::Format(format!("bad stream '{v}'")))?;
                }
                other => {
                    return Err(MgdnError::Format(format!("unknown config key '{other}'")));
                }
            }
        }
        let config = ModelConfig::from_kv(&model_kv)?;

        // Skeleton from the config; records fill it by name.
        let mut model = Model::init(config.clone(), 0)?;
        let mut adam = AdamState::for_store(&model.params);
        let mut filled = vec![false; model.params.len()];

        let n_records = r.u32()? as usize;
        for _ in 0..n_records {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| MgdnError::Format("record name is not UTF-8".into()))?
                .to_string();
            let numel = r.u64()? as usize;
            let mut data = Vec::with_capacity(numel);
            let bytes = r.take(numel * 8)?;
            for c in bytes.chunks_exact(8) {
                data.push(f64::from_le_bytes(c.try_into().unwrap()));
            }
            let (kind, pname) = if let Some(p) = name.strip_prefix("adam.m.") {
                (1, p.to_string())
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                (2, p.to_string())
            } else {
                (0, name.clone())
            };
            let idx = model.params.index_of(&pname).ok_or_else(|| {
                MgdnError::Format(format!("record '{name}' does not match the config's layout"))
            })?;
            let want = model.params.params()[idx].tensor.numel();
            if want != numel {
                return Err(MgdnError::Format(format!(
                    "record '{name}' has {numel} values, config implies {want}"
                )));
            }
            match kind {
                0 => {
                    model.params.params_mut()[idx]
                        .tensor
                        .data_mut()
                        .copy_from_slice(&data);
                    filled[idx] = true;
                }
                1 => adam.m[idx].copy_from_slice(&data),
                _ => adam.v[idx].copy_from_slice(&data),
            }
        }
        if let Some(i) = filled.iter().position(|f| !f) {
            return Err(MgdnError::Format(format!(
                "checkpoint is missing parameter '{}'",
                model.params.params()[i].name
            )));
        }
        if r.pos != body.len() {
            return Err(MgdnError::Format(format!(
                "{} trailing bytes after the last record",
                body.len() - r.pos
            )));
        }
        Ok(Checkpoint { config, opt, step, rng, model, adam })
    }

    /// Load and require the model config to match; the error prints both.
    pub fn load_matching(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
        let ck = Self::load(path)?;
        if &ck.config != expected {
            let fmt = |c: &ModelConfig| {
                c.to_kv()
                    .into_iter()
                    .map(|(k, v)| format!("{k}={v}"))
                    .collect::<Vec<_>>()
                    .join(" ")
            };
            return Err(MgdnError::Config(format!(
                "checkpoint config does not match the run config\n  checkpoint: {}\n  expected:   {}",
                fmt(&ck.config),
                fmt(expected)
            )));
        }
        Ok(ck)
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(MgdnError::Format(format!(
                "truncated checkpoint: wanted {n} bytes at offset {}, only {} remain",
                self.pos,
                self.buf.len() - self.pos
            )));
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

/// CRC-32 (IEEE 802.3, reflected polynomial 0xEDB88320).
pub fn crc32(data: &[u8]) -> u32 {
    let mut table = [0u32; 256];
    for (i, t) in table.iter_mut().enumerate() {
        let mut c = i as u32;
        for _ in 0..8 {
            c = if c & 1 != 0 { 0xEDB8_8320 ^ (c >> 1) } else { c >> 1 };
        }
        *t = c;
    }
    let mut crc = 0xFFFF_FFFFu32;
    for &b in data {
        crc = table[((crc ^ b as u32) & 0xFF) as usize] ^ (crc >> 8);
    }
    !crc
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

fn hex_decode(s: &str) -> Result<Vec<u8>> {
    if s.len() % 2 != 0 {
        return Err(MgdnError::Format("odd-length hex string".into()));
    }
    (0..s.len() / 2)
        .map(|i| {
            u8::from_str_radix(&s[2 * i..2 * i + 2], 16)
                .map_err(|_| MgdnError::Format(format!("bad hex '{s}'")))
        })
        .collect()
}
