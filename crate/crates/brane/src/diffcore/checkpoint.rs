//! Checkpoint serialization: a text header describing the block layout
//! followed by the raw parameter vector as little-endian `f64`, guarded by a
//! payload checksum. Loading reconstructs the exact store, including the
//! init seed, so a reloaded model is bit-identical to the saved one.

use std::path::Path;

use crate::diffcore::{BlockSpec, DiffError, ParamStore};
use crate::fsio;

const MAGIC: &str = "braneckpt v1";

fn bad(msg: impl Into<String>) -> DiffError {
    DiffError::Checkpoint(msg.into())
}

impl ParamStore {
    pub fn save(&self, path: &Path) -> Result<(), DiffError> {
        let mut payload = Vec::with_capacity(self.len() * 8);
        for v in self.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut out = String::new();
        out.push_str(MAGIC);
        out.push('\n');
        out.push_str(&format!("seed={}\n", self.seed));
        out.push_str(&format!("blocks={}\n", self.blocks().len()));
        for b in self.blocks() {
            out.push_str(&format!("{} {} {} {}\n", b.layer, b.name, b.rows, b.cols));
        }
        out.push_str(&format!("sha256={}\n", fsio::sha256_hex(&payload)));
        let mut bytes = out.into_bytes();
        bytes.extend_from_slice(&payload);
        fsio::atomic_write(path, &bytes)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<ParamStore, DiffError> {
        let bytes = std::fs::read(path)?;
        // Header is everything up to the line after the checksum.
        let mut pos = 0;
        let mut next_line = |bytes: &[u8]| -> Result<String, DiffError> {
            let rest = &bytes[pos..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| bad("truncated header"))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| bad("header is not utf-8"))?
                .to_string();
            pos += end + 1;
            Ok(line)
        };

        if next_line(&bytes)? != MAGIC {
            return Err(bad("unrecognized magic line"));
        }
        let seed_line = next_line(&bytes)?;
        let seed: u64 = seed_line
            .strip_prefix("seed=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad seed line"))?;
        let count_line = next_line(&bytes)?;
        let count: usize = count_line
            .strip_prefix("blocks=")
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad blocks line"))?;

        let mut blocks = Vec::with_capacity(count);
        let mut offset = 0;
        for _ in 0..count {
            let line = next_line(&bytes)?;
            let mut it = line.split_whitespace();
            let layer: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad block layer"))?;
            let name = it.next().ok_or_else(|| bad("bad block name"))?.to_string();
            let rows: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad block rows"))?;
            let cols: usize = it
                .next()
                .and_then(|s| s.parse().ok())
                .ok_or_else(|| bad("bad block cols"))?;
            if it.next().is_some() {
                return Err(bad("trailing tokens on block line"));
            }
            blocks.push(BlockSpec { layer, name, offset, rows, cols });
            offset += rows * cols;
        }

        let sum_line = next_line(&bytes)?;
        let want_sum = sum_line
            .strip_prefix("sha256=")
            .ok_or_else(|| bad("bad checksum line"))?;
        let payload = &bytes[pos..];
        if payload.len() != offset * 8 {
            return Err(bad(format!(
                "payload is {} bytes, layout needs {}",
                payload.len(),
                offset * 8
            )));
        }
        if fsio::sha256_hex(payload) != want_sum {
            return Err(bad("payload checksum mismatch"));
        }
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        ParamStore::from_parts(seed, blocks, data)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::ParamStoreBuilder;
    use rand::Rng;

    fn sample_store() -> ParamStore {
        let mut b = ParamStoreBuilder::new();
        b.block(1, "enc.w", 4, 3);
        b.block(2, "proc.n0001.msg_w", 2, 5);
        b.block(2, "proc.n0001.msg_b", 1, 2);
        b.block(3, "dec.bfs", 3, 3);
        let mut s = b.build(77);
        let mut rng = crate::rng::from_seed(123);
        for v in s.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        s
    }

    #[test]
    fn round_trip_is_bit_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        store.save(&path).unwrap();
        let loaded = ParamStore::load(&path).unwrap();
        assert_eq!(loaded.seed, store.seed);
        assert_eq!(loaded.blocks(), store.blocks());
        assert_eq!(loaded.len(), store.len());
        for (a, b) in store.data().iter().zip(loaded.data()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
    }

    #[test]
    fn payload_corruption_is_detected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_store().save(&path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x01;
        std::fs::write(&path, &bytes).unwrap();
        match ParamStore::load(&path) {
            Err(DiffError::Checkpoint(msg)) => assert!(msg.contains("checksum")),
            other => panic!("expected checksum failure, got {other:?}"),
        }
    }

    #[test]
    fn truncated_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_store().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 9]).unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn header_tamper_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        sample_store().save(&path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let text = String::from_utf8_lossy(&bytes[..40]).into_owned();
        assert!(text.starts_with("braneckpt v1\n"));
        let mut tampered = bytes.clone();
        // Swap the declared layer of the first block from 1 to 2; the layout
        // is then unsorted relative to the layer-2 blocks that follow.
        let needle = b"1 enc.w";
        let at = tampered
            .windows(needle.len())
            .position(|w| w == needle)
            .unwrap();
        tampered[at] = b'3';
        std::fs::write(&path, &tampered).unwrap();
        assert!(ParamStore::load(&path).is_err());
    }

    #[test]
    fn missing_file_reports_io() {
        let dir = tempfile::tempdir().unwrap();
        match ParamStore::load(&dir.path().join("absent.ckpt")) {
            Err(DiffError::Io(_)) => {}
            other => panic!("expected io error, got {other:?}"),
        }
    }
}
