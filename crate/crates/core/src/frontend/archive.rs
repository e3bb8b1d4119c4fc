//! `TKFA` feature archives.
//!
//! Layout (little-endian): magic `TKFA`, `u32` format version, `u32` record
//! count, then per record: `u32` id length, UTF-8 id, `u32` T, `u32` D,
//! `u8` stage tag, `T * D` row-major `f32` values.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array2;

use super::{FeatureSequence, Stage};
use crate::error::{Error, Result};
use crate::io_util::{read_u32, read_u8, write_u32};

pub const MAGIC: &[u8; 4] = b"TKFA";
pub const VERSION: u32 = 1;

pub type FeatureArchive = Vec<FeatureSequence>;

pub fn write_archive<W: Write>(mut w: W, seqs: &[FeatureSequence]) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, seqs.len() as u32)?;
    for s in seqs {
        let id = s.utterance_id.as_bytes();
        write_u32(&mut w, id.len() as u32)?;
        w.write_all(id)?;
        write_u32(&mut w, s.num_frames() as u32)?;
        write_u32(&mut w, s.dim() as u32)?;
        w.write_all(&[s.stage.tag()])?;
        let mut buf = Vec::with_capacity(s.frames.len() * 4);
        for v in s.frames.iter() {
            buf.extend_from_slice(&(*v as f32).to_le_bytes());
        }
        w.write_all(&buf)?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(mut r: R) -> Result<FeatureArchive> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad feature archive magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported feature archive version {version}")));
    }
    let count = read_u32(&mut r)? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let id_len = read_u32(&mut r)? as usize;
        let mut id = vec![0u8; id_len];
        r.read_exact(&mut id)?;
        let id = String::from_utf8(id).map_err(|_| Error::Format("utterance id is not UTF-8".into()))?;
        let t = read_u32(&mut r)? as usize;
        let d = read_u32(&mut r)? as usize;
        let tag = read_u8(&mut r)?;
        let stage = Stage::from_tag(tag).ok_or_else(|| Error::Format(format!("bad stage tag {tag}")))?;
        let mut raw = vec![0u8; t * d * 4];
        r.read_exact(&mut raw)?;
        let values: Vec<f64> = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        let frames = Array2::from_shape_vec((t, d), values).map_err(|e| Error::Format(e.to_string()))?;
        out.push(FeatureSequence::new(id, frames, stage));
    }
    Ok(out)
}

pub fn save(path: &Path, seqs: &[FeatureSequence]) -> Result<()> {
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_archive(f, seqs)
}

pub fn load(path: &Path) -> Result<FeatureArchive> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_archive(f)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn round_trip_preserves_f32_values(
            rows in proptest::collection::vec(
                (1usize..6, 1usize..5, proptest::collection::vec(-1e3f32..1e3, 30), 0u8..4),
                0..4,
            )
        ) {
            let seqs: Vec<FeatureSequence> = rows
                .iter()
                .enumerate()
                .map(|(i, (t, d, vals, tag))| {
                    let frames = Array2::from_shape_fn((*t, *d), |(a, b)| vals[(a * d + b) % vals.len()] as f64);
                    FeatureSequence::new(format!("utt-{i}-é"), frames, Stage::from_tag(*tag).unwrap())
                })
                .collect();
            let mut buf = Vec::new();
            write_archive(&mut buf, &seqs).unwrap();
            prop_assert_eq!(read_archive(buf.as_slice()).unwrap(), seqs);
        }
    }

    #[test]
    fn header_bytes_are_exact() {
        let seq = FeatureSequence::new("ab", Array2::from_elem((1, 1), 1.0), Stage::Spliced);
        let mut buf = Vec::new();
        write_archive(&mut buf, &[seq]).unwrap();
        let mut expected = b"TKFA".to_vec();
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&2u32.to_le_bytes());
        expected.extend_from_slice(b"ab");
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.extend_from_slice(&1u32.to_le_bytes());
        expected.push(3);
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(buf, expected);
    }

    #[test]
    fn bad_magic_is_rejected() {
        assert!(matches!(read_archive(&b"TKHM\x01\0\0\0"[..]), Err(Error::Format(_))));
    }
}
