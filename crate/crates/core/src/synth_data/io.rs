//! Manifest (JSON lines) and the optional binary clip cache.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array4;

use super::dataset::ManifestRecord;
use crate::error::{Error, Result};
use crate::model_zoo::VideoClip;

const CLIP_MAGIC: &[u8; 8] = b"CVQDCLIP";
const DTYPE_F32: &[u8; 4] = b"f32\0";

pub fn write_manifest(path: &Path, records: &[ManifestRecord]) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRecord>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut records = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if !line.trim().is_empty() {
            records.push(serde_json::from_str(&line)?);
        }
    }
    Ok(records)
}

/// Layout: magic, `u32` rank, `u64` dims, dtype tag, then row-major
/// little-endian `f32` values.
pub fn write_clip_cache(path: &Path, clip: &VideoClip) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(CLIP_MAGIC).map_err(io)?;
    let shape = clip.data().shape();
    out.write_all(&(shape.len() as u32).to_le_bytes())
        .map_err(io)?;
    for &d in shape {
        out.write_all(&(d as u64).to_le_bytes()).map_err(io)?;
    }
    out.write_all(DTYPE_F32).map_err(io)?;
    for &v in clip.data().iter() {
        out.write_all(&(v as f32).to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_clip_cache(path: &Path) -> Result<VideoClip> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut input = BufReader::new(file);
    let io = |e| Error::io(path, e);
    let mut magic = [0u8; 8];
    input.read_exact(&mut magic).map_err(io)?;
    if &magic != CLIP_MAGIC {
        return Err(Error::Argument(format!(
            "{} is not a clip cache",
            path.display()
        )));
    }
    let mut b4 = [0u8; 4];
    input.read_exact(&mut b4).map_err(io)?;
    let rank = u32::from_le_bytes(b4) as usize;
    if rank != 4 {
        return Err(Error::Argument(format!(
            "clip cache rank {rank}, expected 4"
        )));
    }
    let mut shape = [0usize; 4];
    let mut b8 = [0u8; 8];
    for d in &mut shape {
        input.read_exact(&mut b8).map_err(io)?;
        *d = u64::from_le_bytes(b8) as usize;
    }
    input.read_exact(&mut b4).map_err(io)?;
    if &b4 != DTYPE_F32 {
        return Err(Error::Argument("unsupported clip cache dtype".into()));
    }
    let len: usize = shape.iter().product();
    let mut values = Vec::with_capacity(len);
    for _ in 0..len {
        input.read_exact(&mut b4).map_err(io)?;
        values.push(f32::from_le_bytes(b4) as f64);
    }
    let data = Array4::from_shape_vec(shape, values)
        .map_err(|e| Error::Argument(format!("clip cache body: {e}")))?;
    VideoClip::new(data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_data::{manifest, DataConfig};

    #[test]
    fn manifest_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("manifest.jsonl");
        let records = manifest(&DataConfig::default()).unwrap();
        write_manifest(&path, &records).unwrap();
        assert_eq!(read_manifest(&path).unwrap(), records);
    }

    #[test]
    fn clip_cache_round_trips_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.bin");
        let data =
            Array4::from_shape_fn((2, 3, 4, 5), |(a, b, c, d)| (a + b + c + d) as f64 / 11.0);
        let clip = VideoClip::new(data).unwrap();
        write_clip_cache(&path, &clip).unwrap();
        let back = read_clip_cache(&path).unwrap();
        assert_eq!(back.geometry(), clip.geometry());
        for (a, b) in back.data().iter().zip(clip.data()) {
            assert_eq!(*a, (*b as f32) as f64);
        }
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(bytes.len(), 8 + 4 + 4 * 8 + 4 + 120 * 4);
    }
}
