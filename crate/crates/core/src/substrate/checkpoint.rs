//! Checkpoint container.
//!
//! ```text
//! submark-checkpoint 1
//! vocab_size 512
//! ...                      (one `field value` line per config field)
//! tensors <count>
//! <name> <rows> <cols>     (one line per tensor, canonical order)
//! end
//! <raw little-endian f64 data, tensors in header order, column-major>
//! ```

use std::io::Write;
use std::path::Path;

use nalgebra::DMatrix;
use sha2::{Digest, Sha256};

use super::config::ModelConfig;
use super::forward::ModelState;
use super::params::Params;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &str = "submark-checkpoint";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn to_bytes(model: &ModelState) -> Vec<u8> {
    let c = &model.config;
    let named = model.params.named();
    let mut header = format!(
        "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}\nvocab_size {}\nd_model {}\nn_layers {}\nn_heads {}\nd_ff {}\nmax_seq {}\nseed {}\ntensors {}\n",
        c.vocab_size,
        c.d_model,
        c.n_layers,
        c.n_heads,
        c.d_ff,
        c.max_seq,
        c.seed,
        named.len()
    );
    for t in &named {
        header.push_str(&format!("{} {} {}\n", t.name, t.tensor.nrows(), t.tensor.ncols()));
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(model.params.num_scalars() * 8);
    for t in &named {
        for x in t.tensor.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

fn bad(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

pub fn from_bytes(bytes: &[u8]) -> Result<ModelState> {
    let mut lines = Vec::new();
    let mut offset = 0;
    loop {
        let rest = &bytes[offset..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| bad("unterminated header"))?;
        let line = std::str::from_utf8(&rest[..nl]).map_err(|_| bad("header is not utf-8"))?;
        offset += nl + 1;
        if line == "end" {
            break;
        }
        lines.push(line.to_string());
    }
    let mut it = lines.iter();
    let magic = it.next().ok_or_else(|| bad("empty header"))?;
    if magic != &format!("{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}") {
        return Err(bad(format!("unsupported checkpoint header `{magic}`")));
    }
    let mut field = |name: &str| -> Result<u64> {
        let line = it.next().ok_or_else(|| bad(format!("missing {name}")))?;
        let (k, v) = line.split_once(' ').ok_or_else(|| bad(format!("malformed line `{line}`")))?;
        if k != name {
            return Err(bad(format!("expected {name}, found {k}")));
        }
        v.parse::<u64>().map_err(|_| bad(format!("bad value for {name}")))
    };
    let config = ModelConfig {
        vocab_size: field("vocab_size")? as usize,
        d_model: field("d_model")? as usize,
        n_layers: field("n_layers")? as usize,
        n_heads: field("n_heads")? as usize,
        d_ff: field("d_ff")? as usize,
        max_seq: field("max_seq")? as usize,
        seed: field("seed")?,
    };
    let count = field("tensors")? as usize;
    config.validate()?;
    let mut params = Params::zeros(&config);
    let expected: Vec<(String, usize, usize)> = params
        .named()
        .iter()
        .map(|t| (t.name.clone(), t.tensor.nrows(), t.tensor.ncols()))
        .collect();
    if count != expected.len() {
        return Err(bad(format!("tensor count {count}, expected {}", expected.len())));
    }
    for (name, rows, cols) in &expected {
        let line = it.next().ok_or_else(|| bad("truncated tensor table"))?;
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 || parts[0] != name || parts[1] != rows.to_string() || parts[2] != cols.to_string() {
            return Err(bad(format!("tensor table entry `{line}` does not match {name} {rows}x{cols}")));
        }
    }
    if it.next().is_some() {
        return Err(bad("trailing header lines"));
    }
    let mut data = &bytes[offset..];
    let total: usize = expected.iter().map(|(_, r, c)| r * c).sum();
    if data.len() != total * 8 {
        return Err(bad(format!("payload has {} bytes, expected {}", data.len(), total * 8)));
    }
    params.visit_mut(|t| {
        let (r, c) = t.tensor.shape();
        let vals: Vec<f64> = data[..r * c * 8]
            .chunks_exact(8)
            .map(|ch| f64::from_le_bytes(ch.try_into().expect("8 bytes")))
            .collect();
        *t.tensor = DMatrix::from_vec(r, c, vals);
        data = &data[r * c * 8..];
    });
    let model = ModelState { config, params };
    model.validate()?;
    Ok(model)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("bad path {}", path.display())))?;
    let tmp = dir.join(format!(".{}.tmp-{}", name.to_string_lossy(), std::process::id()));
    std::fs::create_dir_all(dir)?;
    {
        let mut f = std::fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

pub fn save_checkpoint(model: &ModelState, path: &Path) -> Result<()> {
    write_atomic(path, &to_bytes(model))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    from_bytes(&std::fs::read(path)?)
}

/// Hex SHA-256 of the checkpoint encoding.
pub fn model_hash(model: &ModelState) -> String {
    hex::encode(Sha256::digest(to_bytes(model)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ModelState {
        ModelState::new(ModelConfig { vocab_size: 16, d_model: 8, n_layers: 2, n_heads: 2, d_ff: 8, max_seq: 4, seed: 1 })
            .unwrap()
    }

    #[test]
    fn round_trip_is_bitwise() {
        let mut m = small();
        m.params.head[(0, 0)] = f64::MIN_POSITIVE / 3.0;
        m.params.blocks[1].w_out[(2, 3)] = -0.0;
        let back = from_bytes(&to_bytes(&m)).unwrap();
        for (a, b) in m.params.named().iter().zip(back.params.named().iter()) {
            for (x, y) in a.tensor.iter().zip(b.tensor.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
        assert_eq!(m.config, back.config);
    }

    #[test]
    fn file_round_trip_and_hash() {
        let dir = tempfile::tempdir().unwrap();
        let m = small();
        let p = dir.path().join("m.ckpt");
        save_checkpoint(&m, &p).unwrap();
        let back = load_checkpoint(&p).unwrap();
        assert_eq!(model_hash(&m), model_hash(&back));
    }

    #[test]
    fn rejects_truncation_and_bad_magic() {
        let m = small();
        let mut b = to_bytes(&m);
        b.pop();
        assert!(matches!(from_bytes(&b), Err(Error::Format(_))));
        let mut b = to_bytes(&m);
        b[0] = b'X';
        assert!(from_bytes(&b).is_err());
    }
}
