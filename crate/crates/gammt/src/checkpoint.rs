//! Binary checkpoint persistence.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic  "GAMMT\0"
//! u32    format version (1)
//! u32    header length, then that many bytes of UTF-8 `key=value` lines
//! tensor records until EOF:
//!   u16  name length, name bytes
//!   u8   rank
//!   u64  extent per dimension
//!   f32  row-major data
//! ```
//!
//! Compute is 64-bit but storage is 32-bit; a save/load round trip is
//! bit-exact at storage precision. Writes go to a temporary file in the
//! target directory and are renamed into place.

use std::fmt::Write as _;
use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::Tensor;
use crate::decoder::{Activation, DecoderConfig, DecoderParams};
use crate::error::{Error, Result};
use crate::model::{GammtParams, SelectionMechanism};

pub const MAGIC: &[u8; 6] = b"GAMMT\0";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild the model and reproduce the run: shape
/// hyperparameters, training hyperparameters, seed, and a hash of the
/// vocabulary file contents.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointHeader {
    pub m: usize,
    pub d_model: usize,
    pub d_mlp: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    /// Per-head layer counts, length `m`.
    pub layers: Vec<usize>,
    /// Per-head attention-head counts, length `m`.
    pub heads: Vec<usize>,
    pub activation: Activation,
    pub selection: SelectionMechanism,
    pub learning_rate: f64,
    pub epochs: usize,
    pub temperature: f64,
    pub seed: u64,
    pub vocab_hash: String,
}

impl CheckpointHeader {
    /// Decoder configs for every head described by this header.
    pub fn decoder_configs(&self) -> Result<Vec<DecoderConfig>> {
        if self.layers.len() != self.m || self.heads.len() != self.m {
            return Err(Error::Config(format!(
                "header lists {} layer and {} head entries for m = {}",
                self.layers.len(),
                self.heads.len(),
                self.m
            )));
        }
        Ok((0..self.m)
            .map(|i| DecoderConfig {
                vocab_size: self.vocab_size,
                max_len: self.max_len,
                d_model: self.d_model,
                d_mlp: self.d_mlp,
                n_layers: self.layers[i],
                n_heads: self.heads[i],
                activation: self.activation,
            })
            .collect())
    }

    fn encode(&self) -> String {
        let csv = |v: &[usize]| {
            v.iter()
                .map(|x| x.to_string())
                .collect::<Vec<_>>()
                .join(",")
        };
        let mut s = String::new();
        let _ = writeln!(s, "m={}", self.m);
        let _ = writeln!(s, "d_e={}", self.d_model);
        let _ = writeln!(s, "d_mlp={}", self.d_mlp);
        let _ = writeln!(s, "l_max={}", self.max_len);
        let _ = writeln!(s, "n_v={}", self.vocab_size);
        let _ = writeln!(s, "layers={}", csv(&self.layers));
        let _ = writeln!(s, "heads={}", csv(&self.heads));
        let _ = writeln!(s, "activation={}", self.activation.name());
        match &self.selection {
            SelectionMechanism::Max => {
                let _ = writeln!(s, "selection=max");
            }
            SelectionMechanism::RandomIndex { weights } => {
                let _ = writeln!(s, "selection=random");
                let w = weights
                    .iter()
                    .map(|x| x.to_string())
                    .collect::<Vec<_>>()
                    .join(",");
                let _ = writeln!(s, "selection_weights={w}");
            }
        }
        let _ = writeln!(s, "learning_rate={}", self.learning_rate);
        let _ = writeln!(s, "epochs={}", self.epochs);
        let _ = writeln!(s, "temperature={}", self.temperature);
        let _ = writeln!(s, "seed={}", self.seed);
        let _ = writeln!(s, "vocab_hash={}", self.vocab_hash);
        s
    }

    fn decode(text: &str) -> Result<Self> {
        let mut kv = std::collections::HashMap::new();
        for line in text.lines() {
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("checkpoint header line without '=': {line:?}"))
            })?;
            kv.insert(k.to_string(), v.to_string());
        }
        let get = |key: &str| {
            kv.get(key)
                .cloned()
                .ok_or_else(|| Error::Config(format!("checkpoint header missing key {key:?}")))
        };
        let parse_usize = |key: &str| -> Result<usize> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint header key {key:?} not an integer")))
        };
        let parse_f64 = |key: &str| -> Result<f64> {
            get(key)?
                .parse()
                .map_err(|_| Error::Config(format!("checkpoint header key {key:?} not a number")))
        };
        let parse_csv = |key: &str| -> Result<Vec<usize>> {
            get(key)?
                .split(',')
                .map(|x| {
                    x.parse()
                        .map_err(|_| Error::Config(format!("bad list in header key {key:?}")))
                })
                .collect()
        };
        let selection = match get("selection")?.as_str() {
            "max" => SelectionMechanism::Max,
            "random" => {
                let weights = get("selection_weights")?
                    .split(',')
                    .map(|x| {
                        x.parse().map_err(|_| {
                            Error::Config("bad selection_weights in header".to_string())
                        })
                    })
                    .collect::<Result<Vec<f64>>>()?;
                SelectionMechanism::RandomIndex { weights }
            }
            other => {
                return Err(Error::Config(format!(
                    "unknown selection {other:?} in checkpoint header"
                )))
            }
        };
        Ok(CheckpointHeader {
            m: parse_usize("m")?,
            d_model: parse_usize("d_e")?,
            d_mlp: parse_usize("d_mlp")?,
            max_len: parse_usize("l_max")?,
            vocab_size: parse_usize("n_v")?,
            layers: parse_csv("layers")?,
            heads: parse_csv("heads")?,
            activation: Activation::parse(&get("activation")?)?,
            selection,
            learning_rate: parse_f64("learning_rate")?,
            epochs: parse_usize("epochs")?,
            temperature: parse_f64("temperature")?,
            seed: get("seed")?.parse().map_err(|_| {
                Error::Config("checkpoint header key \"seed\" not an integer".to_string())
            })?,
            vocab_hash: get("vocab_hash")?,
        })
    }

    fn matches(&self, params: &GammtParams) -> Result<()> {
        let heads = params.heads();
        if heads.len() != self.m {
            return Err(Error::Config(format!(
                "header says m={}, params have {} heads",
                self.m,
                heads.len()
            )));
        }
        for (i, h) in heads.iter().enumerate() {
            let expect = DecoderConfig {
                vocab_size: self.vocab_size,
                max_len: self.max_len,
                d_model: self.d_model,
                d_mlp: self.d_mlp,
                n_layers: self.layers[i],
                n_heads: self.heads[i],
                activation: self.activation,
            };
            if h.cfg != expect {
                return Err(Error::Config(format!(
                    "header does not describe head {i}: {:?} vs {expect:?}",
                    h.cfg
                )));
            }
        }
        Ok(())
    }
}

/// FNV-1a over a byte string, hex-encoded. Used to tie a checkpoint to the
/// vocabulary file it was trained with.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h: u64 = 0xcbf29ce484222325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}

/// Serialize header and parameters; atomic via temp-file-then-rename.
pub fn save_checkpoint(params: &GammtParams, header: &CheckpointHeader, path: &Path) -> Result<()> {
    header.matches(params)?;
    header.decoder_configs()?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let header_bytes = header.encode().into_bytes();
    buf.extend_from_slice(&(header_bytes.len() as u32).to_le_bytes());
    buf.extend_from_slice(&header_bytes);
    for (i, head) in params.heads().iter().enumerate() {
        head.visit(&mut |name, tensor| {
            let full = format!("head{i}.{name}");
            buf.extend_from_slice(&(full.len() as u16).to_le_bytes());
            buf.extend_from_slice(full.as_bytes());
            buf.push(tensor.rank() as u8);
            for &d in tensor.shape() {
                buf.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in tensor.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        });
    }

    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(&buf)?;
    tmp.flush()?;
    tmp.persist(path).map_err(|e| Error::Io(e.error))?;
    Ok(())
}

struct CountingReader<R> {
    inner: R,
    offset: u64,
}

impl<R: Read> CountingReader<R> {
    fn fill(&mut self, buf: &mut [u8], what: &str) -> Result<()> {
        let at = self.offset;
        self.inner.read_exact(buf).map_err(|e| Error::Format {
            offset: at,
            reason: format!("{what}: {e}"),
        })?;
        self.offset += buf.len() as u64;
        Ok(())
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        let mut b = [0u8; 1];
        self.fill(&mut b, what)?;
        Ok(b[0])
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        let mut b = [0u8; 2];
        self.fill(&mut b, what)?;
        Ok(u16::from_le_bytes(b))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let mut b = [0u8; 4];
        self.fill(&mut b, what)?;
        Ok(u32::from_le_bytes(b))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        let mut b = [0u8; 8];
        self.fill(&mut b, what)?;
        Ok(u64::from_le_bytes(b))
    }

    fn at_eof(&mut self) -> Result<bool> {
        let mut b = [0u8; 1];
        match self.inner.read(&mut b) {
            Ok(0) => Ok(true),
            Ok(_) => {
                self.offset += 1;
                Ok(false)
            }
            Err(e) => Err(Error::Io(e)),
        }
    }
}

/// Load a checkpoint. Format errors name the byte offset where parsing
/// stopped.
pub fn load_checkpoint(path: &Path) -> Result<(CheckpointHeader, GammtParams)> {
    let file = std::fs::File::open(path)?;
    let mut reader = CountingReader {
        inner: std::io::BufReader::new(file),
        offset: 0,
    };
    let mut magic = [0u8; 6];
    reader.fill(&mut magic, "magic")?;
    if &magic != MAGIC {
        return Err(Error::Format {
            offset: 0,
            reason: format!("bad magic {magic:?}, expected {MAGIC:?}"),
        });
    }
    let version = reader.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Format {
            offset: 6,
            reason: format!("unsupported format version {version}"),
        });
    }
    let header_len = reader.u32("header length")? as usize;
    let mut header_bytes = vec![0u8; header_len];
    reader.fill(&mut header_bytes, "header")?;
    let header_text = String::from_utf8(header_bytes).map_err(|e| Error::Format {
        offset: 14,
        reason: format!("header is not UTF-8: {e}"),
    })?;
    let header = CheckpointHeader::decode(&header_text)?;
    let configs = header.decoder_configs()?;

    let mut heads = Vec::with_capacity(header.m);
    for (i, cfg) in configs.into_iter().enumerate() {
        let mut head = DecoderParams::zeros(cfg)?;
        let mut failure: Option<Error> = None;
        head.visit_mut(&mut |name, tensor| {
            if failure.is_some() {
                return;
            }
            let expect = format!("head{i}.{name}");
            if let Err(e) = read_tensor_into(&mut reader, &expect, tensor) {
                failure = Some(e);
            }
        });
        if let Some(e) = failure {
            return Err(e);
        }
        heads.push(head);
    }
    if !reader.at_eof()? {
        return Err(Error::Format {
            offset: reader.offset - 1,
            reason: "trailing data after final tensor".to_string(),
        });
    }
    Ok((header, GammtParams::new(heads)?))
}

fn read_tensor_into(
    reader: &mut CountingReader<impl Read>,
    expect_name: &str,
    out: &mut Tensor,
) -> Result<()> {
    let name_len = reader.u16("tensor name length")? as usize;
    let mut name = vec![0u8; name_len];
    reader.fill(&mut name, "tensor name")?;
    let name = String::from_utf8(name).map_err(|e| Error::Format {
        offset: reader.offset,
        reason: format!("tensor name is not UTF-8: {e}"),
    })?;
    if name != expect_name {
        return Err(Error::Format {
            offset: reader.offset,
            reason: format!("expected tensor {expect_name:?}, found {name:?}"),
        });
    }
    let rank = reader.u8("tensor rank")? as usize;
    if rank != out.rank() {
        return Err(Error::Format {
            offset: reader.offset,
            reason: format!("tensor {name:?} has rank {rank}, expected {}", out.rank()),
        });
    }
    for (d, &expect) in (0..rank).zip(out.shape()) {
        let got = reader.u64(&format!("dimension {d} of {name}"))? as usize;
        if got != expect {
            return Err(Error::Format {
                offset: reader.offset,
                reason: format!("tensor {name:?} dimension {d} is {got}, expected {expect}"),
            });
        }
    }
    let mut bytes = vec![0u8; out.numel() * 4];
    reader.fill(&mut bytes, &format!("data of {name}"))?;
    for (i, chunk) in bytes.chunks_exact(4).enumerate() {
        let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
        if !v.is_finite() {
            return Err(Error::Format {
                offset: reader.offset,
                reason: format!("tensor {name:?} entry {i} is not finite"),
            });
        }
        out.data_mut()[i] = v as f64;
    }
    Ok(())
}

/// Round every parameter to its stored 32-bit value. Saving, loading, and
/// comparing against this is bit-exact.
pub fn at_storage_precision(params: &GammtParams) -> GammtParams {
    let mut p = params.clone();
    for head in p.heads_mut() {
        head.visit_mut(&mut |_, t| {
            for v in t.data_mut() {
                *v = *v as f32 as f64;
            }
        });
    }
    p
}
