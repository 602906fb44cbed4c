//! Flat binary checkpoints.
//!
//! Layout: 8-byte magic "VERCKPT1", u32 record count (little-endian), then
//! one length-prefixed UTF-8 manifest record per parameter — "name dims
//! offset", dims like "32x4", offset in bytes from the start of the payload
//! section — then the contiguous fp64 little-endian payloads in record
//! order. Round trips are bit-exact. Parameter names never contain spaces.

use std::io::Write;
use std::path::Path;

use ver_core::ParamStore;

use crate::error::{config_err, ModelError, Result};

const MAGIC: &[u8; 8] = b"VERCKPT1";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
}

/// Serializes the store (manifest order = store insertion order) and
/// atomically replaces `path`.
pub fn save_checkpoint(store: &ParamStore, path: &Path) -> Result<()> {
    let mut manifest = Vec::new();
    let mut payload: Vec<u8> = Vec::new();
    for (name, param) in store.iter() {
        if name.contains(' ') {
            return config_err(format!("parameter name '{name}' contains a space"));
        }
        let dims = param
            .shape
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("x");
        let record = format!("{name} {dims} {}", payload.len());
        manifest.push(record);
        for v in &param.data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }

    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(manifest.len() as u32).to_le_bytes());
    for record in &manifest {
        let bytes = record.as_bytes();
        buf.extend_from_slice(&(bytes.len() as u32).to_le_bytes());
        buf.extend_from_slice(bytes);
    }
    buf.extend_from_slice(&payload);

    let dir = path.parent().filter(|p| !p.as_os_str().is_empty());
    let mut tmp = tempfile::NamedTempFile::new_in(dir.unwrap_or_else(|| Path::new(".")))?;
    tmp.write_all(&buf)?;
    tmp.persist(path).map_err(|e| ModelError::Io(e.error))?;
    Ok(())
}

fn format_err<T>(path: &Path, offset: u64, msg: impl Into<String>) -> Result<T> {
    Err(ModelError::Format {
        path: path.display().to_string(),
        offset,
        msg: msg.into(),
    })
}

struct Parsed {
    entries: Vec<ManifestEntry>,
    payload_base: usize,
    bytes: Vec<u8>,
}

fn parse(path: &Path) -> Result<Parsed> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < 8 {
        return format_err(path, bytes.len() as u64, "truncated magic");
    }
    if &bytes[0..8] != MAGIC {
        return format_err(path, 0, "bad magic (expected VERCKPT1)");
    }
    if bytes.len() < 12 {
        return format_err(path, bytes.len() as u64, "truncated record count");
    }
    let count = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    let mut pos = 12usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        if bytes.len() < pos + 4 {
            return format_err(path, bytes.len() as u64, "truncated record length");
        }
        let len = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap()) as usize;
        pos += 4;
        if bytes.len() < pos + len {
            return format_err(path, bytes.len() as u64, "truncated manifest record");
        }
        let text = match std::str::from_utf8(&bytes[pos..pos + len]) {
            Ok(t) => t,
            Err(_) => return format_err(path, pos as u64, "manifest record is not UTF-8"),
        };
        let mut parts = text.split(' ');
        let (name, dims, offset) = match (parts.next(), parts.next(), parts.next(), parts.next())
        {
            (Some(n), Some(d), Some(o), None) => (n, d, o),
            _ => {
                return format_err(
                    path,
                    pos as u64,
                    format!("manifest record '{text}' is not 'name dims offset'"),
                )
            }
        };
        let shape = dims
            .split('x')
            .map(|d| d.parse::<usize>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|_| ModelError::Format {
                path: path.display().to_string(),
                offset: pos as u64,
                msg: format!("bad dims '{dims}' in record '{name}'"),
            })?;
        let offset = offset.parse::<u64>().map_err(|_| ModelError::Format {
            path: path.display().to_string(),
            offset: pos as u64,
            msg: format!("bad offset in record '{name}'"),
        })?;
        entries.push(ManifestEntry {
            name: name.to_string(),
            shape,
            offset,
        });
        pos += len;
    }
    let payload_base = pos;
    let want: usize = entries
        .iter()
        .map(|e| e.shape.iter().product::<usize>() * 8)
        .sum();
    if bytes.len() != payload_base + want {
        return format_err(
            path,
            bytes.len().min(payload_base + want) as u64,
            format!(
                "payload is {} bytes, manifest wants {want}",
                bytes.len() - payload_base
            ),
        );
    }
    Ok(Parsed {
        entries,
        payload_base,
        bytes,
    })
}

fn read_values(parsed: &Parsed, entry: &ManifestEntry, path: &Path) -> Result<Vec<f64>> {
    let n: usize = entry.shape.iter().product();
    let start = parsed.payload_base + entry.offset as usize;
    let end = start + n * 8;
    if end > parsed.bytes.len() {
        return format_err(
            path,
            parsed.bytes.len() as u64,
            format!("record '{}' points past end of file", entry.name),
        );
    }
    Ok(parsed.bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Reads just the manifest.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    Ok(parse(path)?.entries)
}

/// Loads a checkpoint into a fresh store; every parameter trainable.
pub fn load_checkpoint(path: &Path) -> Result<ParamStore> {
    let parsed = parse(path)?;
    let mut store = ParamStore::new();
    for entry in &parsed.entries {
        let data = read_values(&parsed, entry, path)?;
        store.insert(&entry.name, entry.shape.clone(), data)?;
    }
    Ok(store)
}

/// Overwrites values of an existing store from a checkpoint. The manifest
/// must match the store's names and shapes exactly; trainable flags are
/// preserved.
pub fn load_checkpoint_into(store: &mut ParamStore, path: &Path) -> Result<()> {
    let parsed = parse(path)?;
    let mut missing = Vec::new();
    let mut mismatched = Vec::new();
    let mut seen = std::collections::BTreeSet::new();
    for entry in &parsed.entries {
        seen.insert(entry.name.clone());
        match store.get(&entry.name) {
            Ok(p) => {
                if p.shape != entry.shape {
                    mismatched.push(entry.name.clone());
                }
            }
            Err(_) => missing.push(entry.name.clone()),
        }
    }
    let unexpected: Vec<String> = store
        .names()
        .filter(|n| !seen.contains(*n))
        .cloned()
        .collect();
    if !missing.is_empty() || !unexpected.is_empty() || !mismatched.is_empty() {
        // "missing" from the store's viewpoint: names it lacks are in the
        // checkpoint only; names it has that the file lacks are unexpected.
        return Err(ModelError::ManifestDiff {
            missing: unexpected,
            unexpected: missing,
            mismatched,
        });
    }
    for entry in &parsed.entries {
        let data = read_values(&parsed, entry, path)?;
        store.get_mut(&entry.name)?.data = data;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ver_core::rng::{substream, uniform_vec};

    fn sample_store() -> ParamStore {
        let mut store = ParamStore::new();
        let mut rng = substream(3, "init");
        store
            .insert("a.w", vec![2, 3], uniform_vec(&mut rng, 6, -1.0, 1.0))
            .unwrap();
        store
            .insert("a.b", vec![3], uniform_vec(&mut rng, 3, -1.0, 1.0))
            .unwrap();
        store
            .insert("z.scale", vec![1], vec![0.1 + 0.2])
            .unwrap();
        store.set_trainable("a.b", false).unwrap();
        store
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save_checkpoint(&store, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.len(), store.len());
        for (name, p) in store.iter() {
            let q = loaded.get(name).unwrap();
            assert_eq!(p.shape, q.shape);
            let a: Vec<u64> = p.data.iter().map(|v| v.to_bits()).collect();
            let b: Vec<u64> = q.data.iter().map(|v| v.to_bits()).collect();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn manifest_lists_names_shapes_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m[0].name, "a.w");
        assert_eq!(m[0].shape, vec![2, 3]);
        assert_eq!(m[0].offset, 0);
        assert_eq!(m[1].offset, 48);
        assert_eq!(m[2].offset, 72);
    }

    #[test]
    fn load_into_preserves_trainable_flags() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let store = sample_store();
        save_checkpoint(&store, &path).unwrap();

        // Perturb, then restore from file.
        let mut target = sample_store();
        target.get_mut("a.w").unwrap().data[0] = 99.0;
        load_checkpoint_into(&mut target, &path).unwrap();
        assert_eq!(target.get("a.w").unwrap().data[0], store.get("a.w").unwrap().data[0]);
        assert!(!target.get("a.b").unwrap().trainable);
    }

    #[test]
    fn manifest_diff_reports_both_directions() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&sample_store(), &path).unwrap();

        let mut other = ParamStore::new();
        other.insert("a.w", vec![2, 3], vec![0.0; 6]).unwrap();
        other.insert("a.b", vec![4], vec![0.0; 4]).unwrap(); // shape differs
        other.insert("extra", vec![1], vec![0.0]).unwrap(); // not in file
        match load_checkpoint_into(&mut other, &path) {
            Err(ModelError::ManifestDiff {
                missing,
                unexpected,
                mismatched,
            }) => {
                assert_eq!(missing, vec!["extra".to_string()]);
                assert_eq!(unexpected, vec!["z.scale".to_string()]);
                assert_eq!(mismatched, vec!["a.b".to_string()]);
            }
            other => panic!("expected manifest diff, got {other:?}"),
        }
    }

    #[test]
    fn corrupt_files_name_byte_offsets() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");

        std::fs::write(&path, b"WRONG!!!").unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::Format { offset, .. }) => assert_eq!(offset, 0),
            other => panic!("{other:?}"),
        }

        save_checkpoint(&sample_store(), &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 4);
        std::fs::write(&path, &bytes).unwrap();
        match load_checkpoint(&path) {
            Err(ModelError::Format { msg, .. }) => assert!(msg.contains("payload")),
            other => panic!("{other:?}"),
        }
    }
}
