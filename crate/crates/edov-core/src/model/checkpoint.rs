//! Checkpoint persistence.
//!
//! Layout: magic "EDOVCK01", architecture id (u32 length + utf8), u32 K,
//! u32 input channels, manifest (u32 entry count, each entry: name as u32
//! length + utf8, u32 ndim, ndim u32 dims), u64 parameter count + f32
//! little-endian values, u64 config length + JSON bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{Classifier, NetSpec};
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"EDOVCK01";

pub fn save_checkpoint(model: &Classifier, config_json: &str, path: &Path) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(CHECKPOINT_MAGIC)?;
    put(&(model.architecture_id.len() as u32).to_le_bytes())?;
    put(model.architecture_id.as_bytes())?;
    put(&(model.k as u32).to_le_bytes())?;
    put(&(model.in_channels as u32).to_le_bytes())?;
    let manifest = model.spec().manifest();
    put(&(manifest.len() as u32).to_le_bytes())?;
    for (name, shape) in &manifest {
        put(&(name.len() as u32).to_le_bytes())?;
        put(name.as_bytes())?;
        put(&(shape.len() as u32).to_le_bytes())?;
        for &d in shape {
            put(&(d as u32).to_le_bytes())?;
        }
    }
    put(&(model.params.len() as u64).to_le_bytes())?;
    for &p in &model.params {
        put(&p.to_le_bytes())?;
    }
    put(&(config_json.len() as u64).to_le_bytes())?;
    put(config_json.as_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(Classifier, String)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != CHECKPOINT_MAGIC {
        return Err(Error::Format(format!(
            "{}: bad checkpoint magic",
            path.display()
        )));
    }
    let arch = read_string(&mut r, path)?;
    let k = read_u32(&mut r, path)? as usize;
    let in_channels = read_u32(&mut r, path)? as usize;
    let entry_count = read_u32(&mut r, path)? as usize;
    let mut manifest = Vec::with_capacity(entry_count);
    for _ in 0..entry_count {
        let name = read_string(&mut r, path)?;
        let ndim = read_u32(&mut r, path)? as usize;
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(read_u32(&mut r, path)? as usize);
        }
        manifest.push((name, shape));
    }
    let n_params = read_u64(&mut r, path)? as usize;
    let mut params = Vec::with_capacity(n_params);
    let mut buf = [0u8; 4];
    for _ in 0..n_params {
        r.read_exact(&mut buf).map_err(|e| Error::io(path, e))?;
        params.push(f32::from_le_bytes(buf));
    }
    let cfg_len = read_u64(&mut r, path)? as usize;
    let mut cfg_bytes = vec![0u8; cfg_len];
    r.read_exact(&mut cfg_bytes).map_err(|e| Error::io(path, e))?;
    let config_json = String::from_utf8(cfg_bytes)
        .map_err(|e| Error::Format(format!("{}: config not utf8: {e}", path.display())))?;

    let spec = NetSpec::build(&arch, k, in_channels)?;
    if spec.manifest() != manifest {
        return Err(Error::ManifestMismatch(format!(
            "{}: stored manifest does not match architecture {arch}",
            path.display()
        )));
    }
    let model = Classifier::from_parts(&arch, k, in_channels, params)?;
    Ok((model, config_json))
}

fn read_u32(r: &mut impl Read, path: &Path) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &Path) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    Ok(u64::from_le_bytes(b))
}

fn read_string(r: &mut impl Read, path: &Path) -> Result<String> {
    let len = read_u32(r, path)? as usize;
    let mut b = vec![0u8; len];
    r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
    String::from_utf8(b).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn checkpoint_roundtrip_is_bit_exact() {
        let model = Classifier::init("micro_cnn", 4, 3, 99).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&model, "{\"note\":\"t\"}", &path).unwrap();
        let (re, cfg) = load_checkpoint(&path).unwrap();
        assert_eq!(re.params, model.params);
        assert_eq!(re.architecture_id, model.architecture_id);
        assert_eq!(cfg, "{\"note\":\"t\"}");
        // Byte-level determinism: saving again produces identical bytes.
        let path2 = dir.path().join("m2.ckpt");
        save_checkpoint(&re, &cfg, &path2).unwrap();
        assert_eq!(
            std::fs::read(&path).unwrap(),
            std::fs::read(&path2).unwrap()
        );
    }

    #[test]
    fn rejects_corrupted_magic() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"WRONGMAGICxxxx").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
