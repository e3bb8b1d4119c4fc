//! PTDN model files.
//!
//! ```text
//! "PTDN" u32 version
//! u32 input_dim  u32 block_dim  u8 fdlr_mode  u8 nonlinearity
//! u32 layers  u32 width × layers  u32 head_hidden (0 = none)  u64 seed
//! u32 code_dim (0 = none)
//! u32 heads  { u32 len  name  u32 states } × heads
//! u32 mask entries  { u32 len  group  u8 frozen } × entries
//! { u32 len  group  u32 count  f32 × count  u32 crc32 } per group
//! ```
//!
//! All integers and floats little-endian. Parameters are stored as f32 and
//! widened on load; the checksum covers the stored f32 bytes.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};

use super::{
    Dense, FdlrMode, FdlrTransform, NetConfig, Nonlinearity, OutputHead, PtdnnModel, SharedStack, SpeakerCode,
};
use crate::error::{Error, Result};
use crate::io_util::{read_string, read_u32, read_u8, write_string, write_u32};

pub const MAGIC: &[u8; 4] = b"PTDN";
pub const VERSION: u32 = 1;

pub fn write_model<W: Write>(mut w: W, model: &PtdnnModel) -> Result<()> {
    let c = &model.config;
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, c.input_dim as u32)?;
    write_u32(&mut w, c.block_dim as u32)?;
    w.write_all(&[(c.fdlr_mode == FdlrMode::Full) as u8, c.nonlinearity.tag()])?;
    write_u32(&mut w, model.shared.layers.len() as u32)?;
    for l in &model.shared.layers {
        write_u32(&mut w, l.output_dim() as u32)?;
    }
    write_u32(&mut w, c.head_hidden.unwrap_or(0) as u32)?;
    w.write_all(&c.seed.to_le_bytes())?;
    write_u32(&mut w, model.speaker_code.as_ref().map_or(0, |s| s.code.len()) as u32)?;
    write_u32(&mut w, model.heads.len() as u32)?;
    for h in &model.heads {
        write_string(&mut w, &h.name)?;
        write_u32(&mut w, h.inventory() as u32)?;
    }
    let groups = model.group_names();
    write_u32(&mut w, groups.len() as u32)?;
    for g in &groups {
        write_string(&mut w, g)?;
        w.write_all(&[model.is_frozen(g) as u8])?;
    }
    for g in &groups {
        write_string(&mut w, g)?;
        let mut bytes = Vec::with_capacity(model.group_len(g) * 4);
        for v in model.param_views(g) {
            for &x in v.iter() {
                bytes.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
        write_u32(&mut w, (bytes.len() / 4) as u32)?;
        w.write_all(&bytes)?;
        write_u32(&mut w, crc32fast::hash(&bytes))?;
    }
    Ok(())
}

fn skeleton(config: NetConfig, code_dim: usize, heads: &[(String, usize)]) -> Result<PtdnnModel> {
    let mut layers = Vec::new();
    let mut prev = config.input_dim;
    for &w in &config.hidden {
        layers.push(Dense::zeros(prev, w));
        prev = w;
    }
    let top = prev;
    let speaker_code = (code_dim > 0).then(|| SpeakerCode {
        code: Array1::zeros(code_dim),
        proj: Array2::zeros((config.hidden[0], code_dim)),
    });
    let heads = heads
        .iter()
        .map(|(name, states)| {
            let (hidden, out_in) = match config.head_hidden {
                Some(w) => (Some(Dense::zeros(top, w)), w),
                None => (None, top),
            };
            OutputHead {
                name: name.clone(),
                hidden,
                out: Dense::zeros(out_in, *states),
            }
        })
        .collect();
    PtdnnModel::from_parts(
        config.clone(),
        FdlrTransform::identity(config.fdlr_mode, config.input_dim, config.block_dim),
        SharedStack {
            layers,
            nonlinearity: config.nonlinearity,
        },
        speaker_code,
        heads,
    )
}

pub fn read_model<R: Read>(mut r: R) -> Result<PtdnnModel> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("not a PTDN model file".into()));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported PTDN version {version}")));
    }
    let input_dim = read_u32(&mut r)? as usize;
    let block_dim = read_u32(&mut r)? as usize;
    let fdlr_mode = if read_u8(&mut r)? == 1 { FdlrMode::Full } else { FdlrMode::SharedBlock };
    let nonlinearity =
        Nonlinearity::from_tag(read_u8(&mut r)?).ok_or_else(|| Error::Format("unknown nonlinearity tag".into()))?;
    let n_layers = read_u32(&mut r)? as usize;
    let hidden = (0..n_layers).map(|_| read_u32(&mut r).map(|v| v as usize)).collect::<Result<Vec<_>>>()?;
    let head_hidden = read_u32(&mut r)? as usize;
    let mut seed = [0u8; 8];
    r.read_exact(&mut seed)?;
    let config = NetConfig {
        input_dim,
        block_dim,
        fdlr_mode,
        hidden,
        nonlinearity,
        head_hidden: (head_hidden > 0).then_some(head_hidden),
        seed: u64::from_le_bytes(seed),
    };
    config.validate()?;
    let code_dim = read_u32(&mut r)? as usize;
    let n_heads = read_u32(&mut r)? as usize;
    let mut heads = Vec::with_capacity(n_heads);
    for _ in 0..n_heads {
        let name = read_string(&mut r)?;
        heads.push((name, read_u32(&mut r)? as usize));
    }
    let mut model = skeleton(config, code_dim, &heads)?;
    let n_mask = read_u32(&mut r)?;
    for _ in 0..n_mask {
        let g = read_string(&mut r)?;
        let frozen = read_u8(&mut r)? != 0;
        model.set_frozen(&g, frozen)?;
    }
    for expected in model.group_names() {
        let g = read_string(&mut r)?;
        if g != expected {
            return Err(Error::Format(format!("expected group {expected}, found {g}")));
        }
        let count = read_u32(&mut r)? as usize;
        if count != model.group_len(&g) {
            return Err(Error::Format(format!("group {g} has {count} values, expected {}", model.group_len(&g))));
        }
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        if read_u32(&mut r)? != crc32fast::hash(&bytes) {
            return Err(Error::Format(format!("checksum mismatch in group {g}")));
        }
        let mut vals = bytes
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64);
        for mut v in model.param_views_mut(&g) {
            for x in v.iter_mut() {
                *x = vals.next().expect("count checked");
            }
        }
    }
    model.validate()?;
    Ok(model)
}

pub fn save_model(path: &Path, model: &PtdnnModel) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(&mut w, model)?;
    w.flush()?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<PtdnnModel> {
    read_model(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::PHONEME_HEAD;

    fn model() -> PtdnnModel {
        let cfg = NetConfig {
            input_dim: 6,
            block_dim: 2,
            hidden: vec![5, 4],
            head_hidden: Some(3),
            ..NetConfig::default()
        };
        let mut m = PtdnnModel::new(cfg, 3).unwrap();
        m.add_head("token(3,4)", 12, 1).unwrap();
        m.attach_speaker_code(2, 2);
        m.train_only(&["fdlr"]).unwrap();
        m
    }

    #[test]
    fn round_trip_preserves_structure_and_f32_values() {
        let m = model();
        let mut buf = Vec::new();
        write_model(&mut buf, &m).unwrap();
        assert_eq!(&buf[..4], b"PTDN");
        let back = read_model(buf.as_slice()).unwrap();
        assert_eq!(back.head_names(), vec![PHONEME_HEAD.to_string(), "token(3,4)".to_string()]);
        assert_eq!(back.trainable_groups(), vec!["fdlr"]);
        for g in m.group_names() {
            for (a, b) in m.param_views(&g).iter().zip(back.param_views(&g)) {
                for (x, y) in a.iter().zip(b.iter()) {
                    assert_eq!(*x as f32 as f64, *y);
                }
            }
        }
        // a second pass is lossless
        let mut buf2 = Vec::new();
        write_model(&mut buf2, &back).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn corrupted_group_fails_checksum() {
        let mut buf = Vec::new();
        write_model(&mut buf, &model()).unwrap();
        let n = buf.len();
        buf[n - 10] ^= 0x40;
        let err = read_model(buf.as_slice()).unwrap_err();
        assert!(err.to_string().contains("checksum"), "{err}");
    }

    #[test]
    fn bad_magic_rejected() {
        assert!(matches!(read_model(&b"XXXX\x01\0\0\0"[..]), Err(Error::Format(_))));
    }
}
