//! Binary checkpoints.
//!
//! Layout, little-endian throughout:
//!
//! ```text
//! magic      8 bytes  "CPACRCKP"
//! version    u32      1
//! config     u32 x 7  query_len doc_len max_ngram filters top_k cascade_positions context_window
//!            u32      number of hidden layers, then one u32 per layer
//!            u8       components (bit 0 cascade, bit 1 disamb, bit 2 shuffle)
//!            u8       loss (0 cross entropy, 1 max margin)
//! tensors    u32      count, then per tensor: u32 rank, u32 dims, f32 values
//! checksum   32 bytes SHA-256 of everything above
//! ```
//!
//! Values are stored as f32, so a reloaded model reproduces scores to about
//! single precision.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::{Components, LossKind, ModelConfig, ModelParams};
use crate::embedding::ByteReader;
use crate::error::{Error, Result};
use crate::numerics::Tensor;

const MAGIC: &[u8; 8] = b"CPACRCKP";
const VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::Config(format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint(config: &ModelConfig, params: &ModelParams) -> Result<Vec<u8>> {
    params.check_shapes(config)?;
    let mut out = Vec::with_capacity(64 + params.parameter_count() * 4);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for v in [
        config.query_len,
        config.doc_len,
        config.max_ngram,
        config.filters,
        config.top_k,
        config.cascade_positions,
        config.context_window,
        config.hidden.len(),
    ] {
        put_u32(&mut out, v)?;
    }
    for &h in &config.hidden {
        put_u32(&mut out, h)?;
    }
    out.push(config.components.bits());
    out.push(match config.loss {
        LossKind::CrossEntropy => 0,
        LossKind::MaxMargin => 1,
    });
    let tensors = params.tensors();
    put_u32(&mut out, tensors.len())?;
    for t in tensors {
        put_u32(&mut out, t.shape().len())?;
        for &d in t.shape() {
            put_u32(&mut out, d)?;
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    if bytes.len() < MAGIC.len() + 32 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Data("not a model checkpoint (bad magic)".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Data("checkpoint checksum mismatch".into()));
    }
    let mut r = ByteReader {
        bytes: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {version}")));
    }
    let mut next = || r.u32().map(|v| v as usize);
    let query_len = next()?;
    let doc_len = next()?;
    let max_ngram = next()?;
    let filters = next()?;
    let top_k = next()?;
    let cascade_positions = next()?;
    let context_window = next()?;
    let n_hidden = next()?;
    let hidden = (0..n_hidden).map(|_| next()).collect::<Result<Vec<_>>>()?;
    let flags = r.take(2)?;
    let components = Components::from_bits(flags[0])
        .ok_or_else(|| Error::Data(format!("bad component flags {}", flags[0])))?;
    let loss = match flags[1] {
        0 => LossKind::CrossEntropy,
        1 => LossKind::MaxMargin,
        other => return Err(Error::Data(format!("bad loss code {other}"))),
    };
    let config = ModelConfig {
        query_len,
        doc_len,
        max_ngram,
        filters,
        top_k,
        cascade_positions,
        context_window,
        hidden,
        components,
        loss,
    };
    config.validate().map_err(|e| Error::Data(format!("checkpoint config: {e}")))?;

    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Data("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        tensors.push(Tensor::checked(shape, data).map_err(|e| Error::Data(e.to_string()))?);
    }
    if r.pos != body.len() {
        return Err(Error::Data("trailing bytes in checkpoint".into()));
    }

    let mut params = ModelParams::zeros(&config);
    let slots = params.tensors_mut();
    if slots.len() != tensors.len() {
        return Err(Error::Data(format!(
            "checkpoint holds {} tensors, configuration needs {}",
            tensors.len(),
            slots.len()
        )));
    }
    for (slot, t) in slots.into_iter().zip(tensors) {
        if slot.shape() != t.shape() {
            return Err(Error::Data(format!(
                "checkpoint tensor shape {:?}, expected {:?}",
                t.shape(),
                slot.shape()
            )));
        }
        *slot = t;
    }
    Ok((config, params))
}

/// Writes to a temporary sibling first and renames it into place.
pub fn save_checkpoint(path: &Path, config: &ModelConfig, params: &ModelParams) -> Result<()> {
    let bytes = encode_checkpoint(config, params)?;
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = Path::new(&tmp);
    let mut file = fs::File::create(tmp).map_err(|e| Error::io(tmp, e))?;
    file.write_all(&bytes).map_err(|e| Error::io(tmp, e))?;
    file.sync_all().map_err(|e| Error::io(tmp, e))?;
    drop(file);
    fs::rename(tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(ModelConfig, ModelParams)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes).map_err(|e| match e {
        Error::Data(msg) => Error::Data(format!("{}: {msg}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample() -> (ModelConfig, ModelParams) {
        let config = ModelConfig {
            query_len: 4,
            doc_len: 20,
            filters: 3,
            hidden: vec![5],
            components: Components::new(true, false, true),
            loss: LossKind::MaxMargin,
            ..ModelConfig::default()
        };
        let params = ModelParams::init(&config, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        (config, params)
    }

    #[test]
    fn round_trip_to_single_precision() {
        let (config, params) = sample();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &config, &params).unwrap();
        assert!(!dir.path().join("model.ckpt.tmp").exists());
        let (c2, p2) = load_checkpoint(&path).unwrap();
        assert_eq!(c2, config);
        for (a, b) in params.tensors().iter().zip(p2.tensors()) {
            assert_eq!(a.shape(), b.shape());
            for (x, y) in a.data().iter().zip(b.data()) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        // A second trip is exact.
        let again = encode_checkpoint(&c2, &p2).unwrap();
        assert_eq!(decode_checkpoint(&again).unwrap().1, p2);
    }

    #[test]
    fn corruption_is_detected() {
        let (config, params) = sample();
        let mut bytes = encode_checkpoint(&config, &params).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 1;
        assert!(decode_checkpoint(&bytes).is_err());
        assert!(decode_checkpoint(b"short").is_err());
        let good = encode_checkpoint(&config, &params).unwrap();
        assert!(decode_checkpoint(&good[..good.len() - 1]).is_err());
    }

    #[test]
    fn mismatched_params_rejected_on_save() {
        let (config, params) = sample();
        let other = ModelConfig {
            filters: 4,
            ..config
        };
        assert!(encode_checkpoint(&other, &params).is_err());
    }
}
