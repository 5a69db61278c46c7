//! Parameter archive: JSON header followed by `(name, dtype, shape, payload)`
//! entries, all integers little-endian `u64`, payload `f64`.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde_json::Value;

use crate::error::{Error, Result};

use super::params::ParamStore;

const MAGIC: &[u8; 4] = b"PNCK";
const VERSION: u64 = 1;
const DTYPE_F64: u64 = 2;

/// Writes `store` with `header` (architecture config etc.). The trainable
/// flag of every tensor is added to the header under `"trainable"`.
pub fn save(path: &Path, header: &Value, store: &ParamStore) -> Result<()> {
    let mut header = header.clone();
    let flags: BTreeMap<String, bool> = store
        .iter()
        .map(|(_, t)| (t.name.clone(), t.trainable))
        .collect();
    match &mut header {
        Value::Object(map) => {
            map.insert("trainable".into(), serde_json::to_value(flags)?);
        }
        _ => return Err(Error::Invalid("checkpoint header must be a JSON object".into())),
    }
    let header_bytes = serde_json::to_vec(&header)?;
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let mut put = |bytes: &[u8]| w.write_all(bytes).map_err(|e| Error::io(path, e));
    put(MAGIC)?;
    put(&VERSION.to_le_bytes())?;
    put(&(header_bytes.len() as u64).to_le_bytes())?;
    put(&header_bytes)?;
    put(&(store.len() as u64).to_le_bytes())?;
    for (_, t) in store.iter() {
        put(&(t.name.len() as u64).to_le_bytes())?;
        put(t.name.as_bytes())?;
        put(&DTYPE_F64.to_le_bytes())?;
        put(&(t.shape.len() as u64).to_le_bytes())?;
        for d in &t.shape {
            put(&(*d as u64).to_le_bytes())?;
        }
        let mut payload = Vec::with_capacity(t.values.len() * 8);
        for v in &t.values {
            payload.extend_from_slice(&v.to_le_bytes());
        }
        put(&payload)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a checkpoint written by [`save`].
pub fn load(path: &Path) -> Result<(Value, ParamStore)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let bad = |field: &str, reason: &str| Error::Load {
        path: path.to_path_buf(),
        field: field.into(),
        reason: reason.into(),
    };
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic).map_err(|e| Error::io(path, e))?;
    if &magic != MAGIC {
        return Err(bad("magic", "not a checkpoint file"));
    }
    let read_u64 = |r: &mut BufReader<File>| -> Result<u64> {
        let mut b = [0u8; 8];
        r.read_exact(&mut b).map_err(|e| Error::io(path, e))?;
        Ok(u64::from_le_bytes(b))
    };
    if read_u64(&mut r)? != VERSION {
        return Err(bad("version", "unsupported checkpoint version"));
    }
    let hlen = read_u64(&mut r)? as usize;
    let mut hbytes = vec![0u8; hlen];
    r.read_exact(&mut hbytes).map_err(|e| Error::io(path, e))?;
    let header: Value = serde_json::from_slice(&hbytes)?;
    let flags: BTreeMap<String, bool> = header
        .get("trainable")
        .cloned()
        .map(serde_json::from_value)
        .transpose()?
        .unwrap_or_default();
    let count = read_u64(&mut r)?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let nlen = read_u64(&mut r)? as usize;
        let mut nb = vec![0u8; nlen];
        r.read_exact(&mut nb).map_err(|e| Error::io(path, e))?;
        let name = String::from_utf8(nb).map_err(|_| bad("name", "invalid utf-8"))?;
        if read_u64(&mut r)? != DTYPE_F64 {
            return Err(bad(&name, "unsupported dtype"));
        }
        let rank = read_u64(&mut r)? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(read_u64(&mut r)? as usize);
        }
        let n: usize = shape.iter().product();
        let mut payload = vec![0u8; n * 8];
        r.read_exact(&mut payload).map_err(|e| Error::io(path, e))?;
        let values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        let trainable = flags.get(&name).copied().unwrap_or(false);
        store.insert(name, shape, values, trainable)?;
    }
    Ok((header, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_preserves_values_and_flags() {
        let mut store = ParamStore::new();
        store
            .insert("a.weight", vec![2, 2], vec![1.0, -2.5, 1e-300, 3.0], true)
            .unwrap();
        store.insert("b", vec![3], vec![0.1, 0.2, 0.3], false).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.ckpt");
        save(&p, &serde_json::json!({"arch": {"d": 2}}), &store).unwrap();
        let (h, back) = load(&p).unwrap();
        assert_eq!(back, store);
        assert_eq!(h["arch"]["d"], 2);
        assert_eq!(h["trainable"]["a.weight"], true);
    }

    #[test]
    fn rejects_foreign_files() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x");
        std::fs::write(&p, b"nope-not-a-checkpoint").unwrap();
        assert!(matches!(load(&p), Err(Error::Load { .. })));
    }
}
