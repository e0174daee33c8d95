//! Versioned binary checkpoint format.
//!
//! Layout: magic `SOMN`, format version, the model config as a JSON blob,
//! then every tensor in layout order as `(name, rank, dims, f32 data)`,
//! all integers little-endian. Round trips are bit-exact.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::weights::ModelWeights;
use super::{ModelConfig, NnError};

const MAGIC: [u8; 4] = *b"SOMN";
const VERSION: u32 = 1;

fn write_u32<W: Write>(w: &mut W, v: u32) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u32<R: Read>(r: &mut R) -> std::io::Result<u32> {
    let mut buf = [0u8; 4];
    r.read_exact(&mut buf)?;
    Ok(u32::from_le_bytes(buf))
}

fn read_exact_vec<R: Read>(r: &mut R, len: usize) -> std::io::Result<Vec<u8>> {
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    Ok(buf)
}

pub fn save_checkpoint(w: &ModelWeights<f32>, path: &Path) -> Result<(), NnError> {
    let mut out = BufWriter::new(File::create(path)?);
    out.write_all(&MAGIC)?;
    write_u32(&mut out, VERSION)?;
    let cfg_json = serde_json::to_vec(&w.cfg).expect("model config serializes");
    write_u32(&mut out, cfg_json.len() as u32)?;
    out.write_all(&cfg_json)?;
    let entries = &w.layout().entries;
    write_u32(&mut out, entries.len() as u32)?;
    for (idx, e) in entries.iter().enumerate() {
        write_u32(&mut out, e.name.len() as u32)?;
        out.write_all(e.name.as_bytes())?;
        write_u32(&mut out, 2)?;
        write_u32(&mut out, e.rows as u32)?;
        write_u32(&mut out, e.cols as u32)?;
        for v in w.p(idx) {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights<f32>, NnError> {
    let bad = |msg: String| NnError::BadCheckpoint(msg);
    let mut r = BufReader::new(File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != MAGIC {
        return Err(bad(format!("magic {magic:?} is not {MAGIC:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(bad(format!("format version {version}, expected {VERSION}")));
    }
    let cfg_len = read_u32(&mut r)? as usize;
    let cfg_json = read_exact_vec(&mut r, cfg_len)?;
    let cfg: ModelConfig = serde_json::from_slice(&cfg_json)
        .map_err(|e| bad(format!("config blob does not parse: {e}")))?;
    cfg.validate()?;

    let mut w = ModelWeights::<f32>::zeros(&cfg);
    let n_tensors = read_u32(&mut r)? as usize;
    if n_tensors != w.layout().entries.len() {
        return Err(bad(format!(
            "{n_tensors} tensors, config implies {}",
            w.layout().entries.len()
        )));
    }
    for idx in 0..n_tensors {
        let name_len = read_u32(&mut r)? as usize;
        let name = String::from_utf8(read_exact_vec(&mut r, name_len)?)
            .map_err(|_| bad(format!("tensor {idx} name is not utf8")))?;
        let rank = read_u32(&mut r)?;
        if rank != 2 {
            return Err(bad(format!("tensor {name} has rank {rank}, expected 2")));
        }
        let rows = read_u32(&mut r)? as usize;
        let cols = read_u32(&mut r)? as usize;
        {
            let e = w.entry(idx);
            if e.name != name || e.rows != rows || e.cols != cols {
                return Err(bad(format!(
                    "tensor {idx} is {name} {rows}x{cols}, layout expects {} {}x{}",
                    e.name, e.rows, e.cols
                )));
            }
        }
        let raw = read_exact_vec(&mut r, rows * cols * 4)?;
        for (dst, chunk) in w.p_mut(idx).iter_mut().zip(raw.chunks_exact(4)) {
            *dst = f32::from_le_bytes(chunk.try_into().unwrap());
        }
    }
    let mut probe = [0u8; 1];
    if r.read(&mut probe)? != 0 {
        return Err(bad("trailing bytes after the last tensor".to_string()));
    }
    if !w.all_finite() {
        return Err(bad("checkpoint holds non-finite parameters".to_string()));
    }
    Ok(w)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.somn");
        let cfg = super::super::ModelConfig::tiny();
        let mut w = ModelWeights::<f32>::init(&cfg, 11);
        w.randomize_all(99, 0.3);
        save_checkpoint(&w, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(w, loaded);
    }

    #[test]
    fn loaded_config_preserves_the_preset() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.somn");
        let cfg = super::super::ModelConfig::tiny();
        let w = ModelWeights::<f32>::init(&cfg, 0);
        save_checkpoint(&w, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.cfg, cfg);
    }

    #[test]
    fn corrupted_files_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.somn");
        let cfg = super::super::ModelConfig::tiny();
        let w = ModelWeights::<f32>::init(&cfg, 5);
        save_checkpoint(&w, &path).unwrap();
        let good = std::fs::read(&path).unwrap();

        let wrong_magic = {
            let mut b = good.clone();
            b[0] = b'X';
            b
        };
        let wrong_version = {
            let mut b = good.clone();
            b[4] = 9;
            b
        };
        let truncated = good[..good.len() / 2].to_vec();
        let trailing = {
            let mut b = good.clone();
            b.push(0);
            b
        };
        for (label, bytes) in [
            ("magic", wrong_magic),
            ("version", wrong_version),
            ("truncated", truncated),
            ("trailing", trailing),
        ] {
            let p = dir.path().join(format!("{label}.somn"));
            std::fs::write(&p, bytes).unwrap();
            assert!(load_checkpoint(&p).is_err(), "{label} should fail");
        }
    }
}
