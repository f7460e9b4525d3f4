//! Checkpoint file.
//!
//! ```text
//! "GLCK"  u32 version (=1)  u32 net kind  u32 config length
//! config as JSON text
//! parameters in declaration order, f64 little-endian
//! ```

use std::fs;
use std::path::Path;

use super::{Net, NetConfig, NetKind};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"GLCK";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn save_checkpoint<T: Scalar>(net: &Net<T>, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let cfg = serde_json::to_vec(net.config()).expect("config serializes");
    let mut buf = Vec::with_capacity(16 + cfg.len() + 8 * net.config().param_count());
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&net.kind().code().to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(&cfg);
    for p in net.params() {
        for v in p.data() {
            buf.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<Net<T>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < 16 {
        return Err(fmt(bytes.len(), format!("truncated header: {} bytes", bytes.len())));
    }
    if &bytes[..4] != CHECKPOINT_MAGIC {
        return Err(fmt(0, "bad magic".into()));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    if u32_at(4) != CHECKPOINT_VERSION {
        return Err(fmt(4, format!("unsupported version {}", u32_at(4))));
    }
    let kind = NetKind::from_code(u32_at(8)).ok_or_else(|| fmt(8, format!("unknown net kind {}", u32_at(8))))?;
    let cfg_len = u32_at(12) as usize;
    let cfg_end = 16 + cfg_len;
    if bytes.len() < cfg_end {
        return Err(fmt(bytes.len(), "truncated config".into()));
    }
    let config: NetConfig = serde_json::from_slice(&bytes[16..cfg_end])
        .map_err(|e| fmt(16, format!("config: {e}")))?;
    if config.kind != kind {
        return Err(fmt(8, "net kind disagrees with config".into()));
    }
    config.validate()?;
    let expected = cfg_end + 8 * config.param_count();
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected),
            format!("expected {expected} bytes, found {}", bytes.len()),
        ));
    }
    let mut off = cfg_end;
    let mut params = Vec::new();
    for shape in config.param_shapes() {
        let n: usize = shape.iter().product();
        let vals = bytes[off..off + 8 * n]
            .chunks_exact(8)
            .map(|b| T::lit(f64::from_le_bytes(b.try_into().unwrap())))
            .collect();
        off += 8 * n;
        params.push(Tensor::new(shape, vals)?);
    }
    Net::from_params(config, params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        for cfg in [
            NetConfig::generator().with_widths(&[4, 8]).with_seed(2),
            NetConfig::discriminator().with_seed(3),
        ] {
            let p = dir.path().join("n.glck");
            let net = Net::<f64>::new(cfg).unwrap();
            save_checkpoint(&net, &p).unwrap();
            let back: Net<f64> = load_checkpoint(&p).unwrap();
            assert_eq!(back.config(), net.config());
            assert_eq!(back.fingerprint(), net.fingerprint());
        }
    }

    #[test]
    fn truncated() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("n.glck");
        save_checkpoint(&Net::<f64>::new(NetConfig::discriminator()).unwrap(), &p).unwrap();
        let b = fs::read(&p).unwrap();
        fs::write(&p, &b[..b.len() - 8]).unwrap();
        assert!(load_checkpoint::<f64>(&p).unwrap_err().to_string().contains("expected"));
    }
}
