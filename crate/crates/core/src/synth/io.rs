//! Dataset file.
//!
//! ```text
//! "GLAB"  u32 version (=1)  u32 n  u32 c  u32 h  u32 w
//! n records of (X plane, Y plane), each c*h*w f32, row-major
//! ```
//! All integers and reals little-endian.

use std::fs;
use std::path::Path;

use super::{Dataset, GhostParams, SamplePair};
use crate::error::{Error, Result};
use crate::Image;

pub const DATASET_MAGIC: &[u8; 4] = b"GLAB";
pub const DATASET_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 5 * 4;

pub fn save_dataset(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let (c, h, w) = ds.extents();
    let plane = c * h * w;
    let mut buf = Vec::with_capacity(HEADER_LEN + ds.len() * 2 * plane * 4);
    buf.extend_from_slice(DATASET_MAGIC);
    for v in [DATASET_VERSION, ds.len() as u32, c as u32, h as u32, w as u32] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    for p in &ds.pairs {
        for img in [&p.x, &p.y] {
            for &v in img.data() {
                buf.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let fmt = |offset: usize, msg: String| Error::Format {
        path: path.to_path_buf(),
        offset: offset as u64,
        msg,
    };
    if bytes.len() < HEADER_LEN {
        return Err(fmt(
            bytes.len(),
            format!("truncated header: expected {HEADER_LEN} bytes, found {}", bytes.len()),
        ));
    }
    if &bytes[..4] != DATASET_MAGIC {
        return Err(fmt(0, format!("bad magic {:?}", &bytes[..4])));
    }
    let u32_at = |o: usize| u32::from_le_bytes(bytes[o..o + 4].try_into().unwrap());
    let version = u32_at(4);
    if version != DATASET_VERSION {
        return Err(fmt(4, format!("unsupported version {version}")));
    }
    let dims: Vec<usize> = (0..4).map(|i| u32_at(8 + 4 * i) as usize).collect();
    let (n, c, h, w) = (dims[0], dims[1], dims[2], dims[3]);
    if let Some(i) = dims.iter().position(|&d| d == 0) {
        return Err(fmt(8 + 4 * i, "zero extent in header".into()));
    }
    let plane = c
        .checked_mul(h)
        .and_then(|v| v.checked_mul(w))
        .ok_or_else(|| fmt(12, "extent overflow".into()))?;
    let expected = n
        .checked_mul(2 * plane * 4)
        .and_then(|v| v.checked_add(HEADER_LEN))
        .ok_or_else(|| fmt(8, "extent overflow".into()))?;
    if bytes.len() != expected {
        return Err(fmt(
            bytes.len().min(expected),
            format!(
                "expected {expected} bytes for n={n} c={c} h={h} w={w}, found {}",
                bytes.len()
            ),
        ));
    }
    let mut off = HEADER_LEN;
    let mut read_plane = || {
        let vals: Vec<f64> = bytes[off..off + plane * 4]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
            .collect();
        off += plane * 4;
        Image::new(vec![c, h, w], vals)
    };
    let mut pairs = Vec::with_capacity(n);
    for _ in 0..n {
        let x = read_plane()?;
        let y = read_plane()?;
        let ghost = GhostParams::estimate(&x, &y);
        pairs.push(SamplePair { x, y, ghost });
    }
    Dataset::new(pairs, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{make_dataset, EventSpec};

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glab");
        let ds = make_dataset(&EventSpec { seed: 3, ..Default::default() }, 4).unwrap();
        save_dataset(&ds, &p).unwrap();
        let back = load_dataset(&p).unwrap();
        assert_eq!(back.len(), 4);
        for (a, b) in ds.pairs.iter().zip(&back.pairs) {
            for (u, v) in [(&a.x, &b.x), (&a.y, &b.y)] {
                for (s, t) in u.data().iter().zip(v.data()) {
                    assert_eq!((*s as f32).to_bits(), (*t as f32).to_bits());
                }
            }
            assert_eq!(b.ghost.unwrap().delay, a.ghost.unwrap().delay);
        }
        // and again from the widened copy: bitwise identical file
        let p2 = dir.path().join("d2.glab");
        save_dataset(&back, &p2).unwrap();
        assert_eq!(fs::read(&p).unwrap(), fs::read(&p2).unwrap());
    }

    #[test]
    fn truncated_file_reports_sizes() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glab");
        let ds = make_dataset(&EventSpec::default(), 2).unwrap();
        save_dataset(&ds, &p).unwrap();
        let full = fs::read(&p).unwrap();
        fs::write(&p, &full[..full.len() - 10]).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains(&format!("expected {}", full.len())), "{err}");
        assert!(err.contains(&format!("found {}", full.len() - 10)), "{err}");
    }

    #[test]
    fn corrupt_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("d.glab");
        let ds = make_dataset(&EventSpec::default(), 1).unwrap();
        save_dataset(&ds, &p).unwrap();
        let full = fs::read(&p).unwrap();

        let mut bad = full.clone();
        bad[0] = b'X';
        fs::write(&p, &bad).unwrap();
        assert!(load_dataset(&p).unwrap_err().to_string().contains("offset 0"));

        let mut bad = full.clone();
        bad[4] = 9;
        fs::write(&p, &bad).unwrap();
        assert!(load_dataset(&p).unwrap_err().to_string().contains("offset 4"));

        let mut bad = full;
        bad[16..20].copy_from_slice(&0u32.to_le_bytes());
        fs::write(&p, &bad).unwrap();
        let err = load_dataset(&p).unwrap_err().to_string();
        assert!(err.contains("zero extent") && err.contains("offset 16"), "{err}");
    }
}
