//! Self-describing checkpoint container.
//!
//! Layout: magic `CSUBCKPT`, version (u32 LE), header length (u64 LE), a
//! JSON header carrying the architecture descriptor and the named tensor
//! manifest with shapes, then raw little-endian f32 arrays in manifest
//! order. Round-trips are bit-exact.

use std::io::{BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::blocks::{zeros_from_arch, ArchDescriptor, Model};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"CSUBCKPT";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    arch: ArchDescriptor,
    manifest: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    let named = model.named_params();
    let header = Header {
        arch: model.arch.clone(),
        manifest: named
            .iter()
            .map(|(name, t)| ManifestEntry { name: name.clone(), shape: t.shape().to_vec() })
            .collect(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let file =
        std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = BufWriter::new(file);
    let io_err = |e| Error::io(path.display().to_string(), e);
    w.write_all(MAGIC).map_err(io_err)?;
    w.write_all(&VERSION.to_le_bytes()).map_err(io_err)?;
    w.write_all(&(header_bytes.len() as u64).to_le_bytes()).map_err(io_err)?;
    w.write_all(&header_bytes).map_err(io_err)?;
    for (_, t) in named {
        for v in t.data() {
            w.write_all(&v.to_le_bytes()).map_err(io_err)?;
        }
    }
    w.flush().map_err(io_err)
}

pub fn load(path: &Path) -> Result<Model<f32>> {
    let mut file =
        std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes).map_err(|e| Error::io(path.display().to_string(), e))?;
    let p = path.display().to_string();
    let fmt = |msg: String| Error::Format { path: p.clone(), msg };

    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(fmt(format!("unsupported version {version}")));
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let header_end = 20 + header_len;
    if bytes.len() < header_end {
        return Err(fmt("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[20..header_end])?;

    let mut model = zeros_from_arch::<f32>(&header.arch);
    {
        let named = model.named_params();
        if named.len() != header.manifest.len() {
            return Err(fmt(format!(
                "manifest has {} tensors, architecture implies {}",
                header.manifest.len(),
                named.len()
            )));
        }
        for ((name, t), entry) in named.iter().zip(header.manifest.iter()) {
            if *name != entry.name || t.shape() != &entry.shape[..] {
                return Err(fmt(format!(
                    "manifest entry `{}` {:?} does not match architecture tensor `{}` {:?}",
                    entry.name,
                    entry.shape,
                    name,
                    t.shape()
                )));
            }
        }
    }

    let mut offset = header_end;
    for t in model.params_mut() {
        let n = t.numel();
        let end = offset + 4 * n;
        if bytes.len() < end {
            return Err(Error::Format { path: p, msg: "truncated tensor data".into() });
        }
        for (v, chunk) in t.data_mut().iter_mut().zip(bytes[offset..end].chunks_exact(4)) {
            *v = f32::from_le_bytes(chunk.try_into().unwrap());
        }
        offset = end;
    }
    if offset != bytes.len() {
        return Err(Error::Format { path: p, msg: "trailing bytes after tensor data".into() });
    }
    Ok(model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::{build_residual_mlp, build_tiny_vit};

    fn tmp(name: &str) -> std::path::PathBuf {
        std::env::temp_dir().join(format!("cosub-ckpt-{}-{name}", std::process::id()))
    }

    #[test]
    fn round_trip_is_bit_exact() {
        for (name, model) in [
            ("mlp", build_residual_mlp::<f32>(12, 3, 5, 7, 42).unwrap()),
            ("vit", build_tiny_vit::<f32>(8, 4, 8, 2, 2, 4, 7).unwrap()),
        ] {
            let path = tmp(name);
            save(&model, &path).unwrap();
            let loaded = load(&path).unwrap();
            assert_eq!(loaded.arch, model.arch);
            for ((na, ta), (nb, tb)) in
                model.named_params().iter().zip(loaded.named_params().iter())
            {
                assert_eq!(na, nb);
                for (a, b) in ta.data().iter().zip(tb.data().iter()) {
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
            // Saving the loaded model reproduces the file byte-for-byte.
            let path2 = tmp(&format!("{name}-2"));
            save(&loaded, &path2).unwrap();
            assert_eq!(std::fs::read(&path).unwrap(), std::fs::read(&path2).unwrap());
            std::fs::remove_file(&path).ok();
            std::fs::remove_file(&path2).ok();
        }
    }

    #[test]
    fn corrupted_files_rejected() {
        let model = build_residual_mlp::<f32>(6, 2, 3, 4, 1).unwrap();
        let path = tmp("bad");
        save(&model, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let mut bad_magic = good.clone();
        bad_magic[0] = b'X';
        std::fs::write(&path, &bad_magic).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("magic"));

        std::fs::write(&path, &good[..good.len() - 2]).unwrap();
        assert!(load(&path).unwrap_err().to_string().contains("truncated"));

        std::fs::remove_file(&path).ok();
    }
}
