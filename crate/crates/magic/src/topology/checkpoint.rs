//! Checkpoint file format: a plain-text header (format version, config
//! serialization, content hash, active-channel mask, parameter directory)
//! followed by the named parameter arrays as raw little-endian f32 in
//! declared order.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{MagicError, Result};
use crate::util::atomic_write;

use super::builder::{build_model, MagicModel};
use super::NetworkConfig;

const FORMAT_LINE: &str = "MAGIC-CHECKPOINT v1";

fn config_hash(config_toml: &str) -> String {
    let mut h = Sha256::new();
    h.update(config_toml.as_bytes());
    hex_encode(&h.finalize())
}

fn hex_encode(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn save_checkpoint(model: &MagicModel<f32>, path: &Path) -> Result<()> {
    let config_toml = model.config.to_toml();
    let mut header = String::new();
    header.push_str(FORMAT_LINE);
    header.push('\n');
    header.push_str(&format!("config-bytes: {}\n", config_toml.len()));
    header.push_str(&format!("config-sha256: {}\n", config_hash(&config_toml)));
    header.push_str(&config_toml);
    header.push_str(&format!("active-in: {}\n", model.active_in));
    header.push_str(&format!("active-out: {}\n", model.active_out));
    header.push_str(&format!("params: {}\n", model.params.len()));
    for p in &model.params {
        header.push_str(&format!("{} {}\n", p.name, p.numel()));
    }
    header.push_str("DATA\n");

    let mut bytes = header.into_bytes();
    for p in &model.params {
        for v in p.tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &bytes)
}

struct Header {
    config: NetworkConfig,
    config_toml: String,
    active_in: usize,
    active_out: usize,
    param_dir: Vec<(String, usize)>,
    payload_offset: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    let take_line = |pos: &mut usize| -> Result<String> {
        let rest = &bytes[*pos..];
        let nl = rest.iter().position(|&b| b == b'\n').ok_or_else(|| {
            MagicError::CheckpointTruncated("header ended before payload marker".into())
        })?;
        let line = std::str::from_utf8(&rest[..nl])
            .map_err(|_| MagicError::CheckpointFormat("non-UTF8 header line".into()))?
            .to_string();
        *pos += nl + 1;
        Ok(line)
    };
    let mut pos = 0usize;

    let version = take_line(&mut pos)?;
    if version != FORMAT_LINE {
        return Err(MagicError::CheckpointVersion(format!(
            "expected '{FORMAT_LINE}', found '{version}'"
        )));
    }

    let field = |line: &str, key: &str| -> Result<String> {
        line.strip_prefix(key)
            .and_then(|s| s.strip_prefix(": "))
            .map(str::to_string)
            .ok_or_else(|| MagicError::CheckpointFormat(format!("expected '{key}:' line")))
    };
    let parse_usize = |s: &str, what: &str| -> Result<usize> {
        s.parse::<usize>()
            .map_err(|_| MagicError::CheckpointFormat(format!("bad {what}: '{s}'")))
    };

    let config_bytes = parse_usize(&field(&take_line(&mut pos)?, "config-bytes")?, "config-bytes")?;
    let stated_hash = field(&take_line(&mut pos)?, "config-sha256")?;
    if pos + config_bytes > bytes.len() {
        return Err(MagicError::CheckpointTruncated("config block cut short".into()));
    }
    let config_toml = std::str::from_utf8(&bytes[pos..pos + config_bytes])
        .map_err(|_| MagicError::CheckpointFormat("non-UTF8 config block".into()))?
        .to_string();
    pos += config_bytes;
    if config_hash(&config_toml) != stated_hash {
        return Err(MagicError::CheckpointFormat(
            "embedded config does not match its stated hash".into(),
        ));
    }
    let config = NetworkConfig::from_toml(&config_toml)?;

    let active_in = parse_usize(&field(&take_line(&mut pos)?, "active-in")?, "active-in")?;
    let active_out = parse_usize(&field(&take_line(&mut pos)?, "active-out")?, "active-out")?;
    let n_params = parse_usize(&field(&take_line(&mut pos)?, "params")?, "params")?;

    let mut param_dir = Vec::with_capacity(n_params);
    for _ in 0..n_params {
        let line = take_line(&mut pos)?;
        let (name, numel) = line
            .rsplit_once(' ')
            .ok_or_else(|| MagicError::CheckpointFormat(format!("bad param line '{line}'")))?;
        param_dir.push((name.to_string(), parse_usize(numel, "param length")?));
    }
    let data_marker = take_line(&mut pos)?;
    if data_marker != "DATA" {
        return Err(MagicError::CheckpointFormat(format!(
            "expected DATA marker, found '{data_marker}'"
        )));
    }
    Ok(Header { config, config_toml, active_in, active_out, param_dir, payload_offset: pos })
}

fn load_from_bytes(bytes: &[u8]) -> Result<MagicModel<f32>> {
    let header = parse_header(bytes)?;
    let mut model = build_model::<f32>(&header.config, 0)?;
    model.active_in = header.active_in;
    model.active_out = header.active_out;

    if header.param_dir.len() != model.params.len() {
        return Err(MagicError::CheckpointFormat(format!(
            "parameter directory lists {} arrays, config implies {}",
            header.param_dir.len(),
            model.params.len()
        )));
    }
    let total: usize = header.param_dir.iter().map(|(_, n)| n).sum();
    let payload = &bytes[header.payload_offset..];
    if payload.len() < total * 4 {
        return Err(MagicError::CheckpointTruncated(format!(
            "payload holds {} bytes, directory requires {}",
            payload.len(),
            total * 4
        )));
    }

    let mut off = 0usize;
    for ((name, numel), param) in header.param_dir.iter().zip(&mut model.params) {
        if *name != param.name || *numel != param.numel() {
            return Err(MagicError::CheckpointFormat(format!(
                "parameter '{}' ({} values) does not match expected '{}' ({} values)",
                name,
                numel,
                param.name,
                param.numel()
            )));
        }
        for v in param.tensor.data_mut() {
            let mut b = [0u8; 4];
            b.copy_from_slice(&payload[off..off + 4]);
            *v = f32::from_le_bytes(b);
            off += 4;
        }
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path) -> Result<MagicModel<f32>> {
    load_from_bytes(&std::fs::read(path)?)
}

/// Load a checkpoint and require it to have been written for `expected`.
pub fn load_checkpoint_matching(path: &Path, expected: &NetworkConfig) -> Result<MagicModel<f32>> {
    let bytes = std::fs::read(path)?;
    let header = parse_header(&bytes)?;
    let expected_toml = expected.to_toml();
    if config_hash(&expected_toml) != config_hash(&header.config_toml) {
        return Err(MagicError::CheckpointConfigHash(format!(
            "checkpoint was written for a different config (stored {}, expected {})",
            &config_hash(&header.config_toml)[..12],
            &config_hash(&expected_toml)[..12],
        )));
    }
    load_from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::topology::{fir_ablation_config, reference_config};
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let mut model = build_model::<f32>(&reference_config(), 42).unwrap();
        model.active_in = 3;
        model.active_out = 3;
        save_checkpoint(&model, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.active_in, 3);
        assert_eq!(loaded.active_out, 3);
        assert_eq!(loaded.params.len(), model.params.len());
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(a.name, b.name);
            let ab: Vec<u32> = a.tensor.data().iter().map(|v| v.to_bits()).collect();
            let bb: Vec<u32> = b.tensor.data().iter().map(|v| v.to_bits()).collect();
            assert_eq!(ab, bb, "param {} not bit-identical", a.name);
        }
    }

    #[test]
    fn truncated_payload_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model::<f32>(&reference_config(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        std::fs::write(&path, &bytes[..bytes.len() - 64]).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MagicError::CheckpointTruncated(_))
        ));
    }

    #[test]
    fn config_mismatch_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model::<f32>(&reference_config(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        assert!(matches!(
            load_checkpoint_matching(&path, &fir_ablation_config()),
            Err(MagicError::CheckpointConfigHash(_))
        ));
        assert!(load_checkpoint_matching(&path, &reference_config()).is_ok());
    }

    #[test]
    fn version_mismatch_is_detected() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let model = build_model::<f32>(&reference_config(), 1).unwrap();
        save_checkpoint(&model, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[17] = b'9'; // "MAGIC-CHECKPOINT v9"
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(MagicError::CheckpointVersion(_))
        ));
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempdir().unwrap();
        let (p1, p2) = (dir.path().join("a.ckpt"), dir.path().join("b.ckpt"));
        save_checkpoint(&build_model::<f32>(&reference_config(), 5).unwrap(), &p1).unwrap();
        save_checkpoint(&build_model::<f32>(&reference_config(), 5).unwrap(), &p2).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
