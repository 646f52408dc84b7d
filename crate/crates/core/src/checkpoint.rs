//! Binary checkpoint format.
//!
//! ```text
//! "SSEPT1"                       6 bytes
//! version                        u16 little-endian (currently 1)
//! header                         UTF-8 `key=value` lines:
//!                                n, m, d_u, d_i, T, B, dropout_rate
//! blank line
//! parameters                     f64 little-endian, canonical order:
//!                                U (if d_u > 0), V, P, then per block
//!                                W_Q, W_K, W_V, W, b, W̃, b̃,
//!                                attention-norm gain, bias, ffn-norm gain, bias,
//!                                then the final norm gain, bias
//! crc32                          u32 little-endian over every preceding byte
//! ```

use std::io::{Read, Write};

use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;

const MAGIC: &[u8; 6] = b"SSEPT1";
const VERSION: u16 = 1;

pub fn to_bytes(cfg: &ModelConfig, params: &ModelParams) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let header = format!(
        "n={}\nm={}\nd_u={}\nd_i={}\nT={}\nB={}\ndropout_rate={}\n\n",
        cfg.n_users, cfg.n_items, cfg.d_user, cfg.d_item, cfg.max_len, cfg.blocks, cfg.dropout
    );
    buf.extend_from_slice(header.as_bytes());
    for t in params.tensors() {
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    buf
}

pub fn save<W: Write>(mut out: W, cfg: &ModelConfig, params: &ModelParams) -> Result<()> {
    out.write_all(&to_bytes(cfg, params))?;
    Ok(())
}

pub fn load<R: Read>(mut input: R) -> Result<(ModelConfig, ModelParams)> {
    let mut buf = Vec::new();
    input.read_to_end(&mut buf)?;
    from_bytes(&buf)
}

pub fn from_bytes(buf: &[u8]) -> Result<(ModelConfig, ModelParams)> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if buf.len() < MAGIC.len() + 2 + 4 || &buf[..6] != MAGIC {
        return Err(bad("missing SSEPT1 magic"));
    }
    let (body, crc_bytes) = buf.split_at(buf.len() - 4);
    let stored = u32::from_le_bytes(crc_bytes.try_into().unwrap());
    if crc32fast::hash(body) != stored {
        return Err(bad("CRC mismatch, file is corrupt"));
    }
    let version = u16::from_le_bytes([body[6], body[7]]);
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let rest = &body[8..];
    let end = rest
        .windows(2)
        .position(|w| w == b"\n\n")
        .ok_or_else(|| bad("unterminated header"))?;
    let header = std::str::from_utf8(&rest[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let mut payload = &rest[end + 2..];

    let get = |key: &str| -> Result<String> {
        header
            .lines()
            .find_map(|l| l.strip_prefix(key).and_then(|r| r.strip_prefix('=')))
            .map(str::to_string)
            .ok_or_else(|| Error::Checkpoint(format!("header field `{key}` missing")))
    };
    let num = |s: String| s.parse::<usize>().map_err(|e| Error::Checkpoint(e.to_string()));
    let cfg = ModelConfig {
        n_users: num(get("n")?)?,
        n_items: num(get("m")?)?,
        d_user: num(get("d_u")?)?,
        d_item: num(get("d_i")?)?,
        max_len: num(get("T")?)?,
        blocks: num(get("B")?)?,
        dropout: get("dropout_rate")?
            .parse::<f64>()
            .map_err(|e| Error::Checkpoint(e.to_string()))?,
    };
    cfg.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;

    let mut params = ModelParams::zeros(&cfg)?;
    for t in params.tensors_mut() {
        let n = t.numel();
        if payload.len() < n * 8 {
            return Err(bad("parameter payload truncated"));
        }
        let (chunk, tail) = payload.split_at(n * 8);
        let values: Vec<f64> = chunk
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().unwrap()))
            .collect();
        *t = Tensor::new(t.shape().to_vec(), values)?;
        payload = tail;
    }
    if !payload.is_empty() {
        return Err(bad("trailing bytes after parameters"));
    }
    Ok((cfg, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(d_user: usize) -> (ModelConfig, ModelParams) {
        let cfg = ModelConfig {
            n_users: 4,
            n_items: 7,
            d_user,
            d_item: 3,
            max_len: 5,
            blocks: 2,
            dropout: 0.2,
        };
        let p = ModelParams::init(&cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        (cfg, p)
    }

    #[test]
    fn round_trips_personalized_and_plain_models() {
        for du in [0, 2] {
            let (cfg, p) = sample(du);
            let bytes = to_bytes(&cfg, &p);
            assert_eq!(&bytes[..6], b"SSEPT1");
            let (cfg2, p2) = from_bytes(&bytes).unwrap();
            assert_eq!(cfg2, cfg);
            assert_eq!(p2, p);
        }
    }

    #[test]
    fn corruption_is_detected() {
        let (cfg, p) = sample(2);
        let mut bytes = to_bytes(&cfg, &p);
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(from_bytes(&bytes), Err(Error::Checkpoint(_))));
        assert!(from_bytes(b"nope").is_err());
    }
}
