//! `TKHM` model files.
//!
//! Layout (little-endian): magic `TKHM`, `u32` version, `u32` m, `u32` n,
//! `f64` variance floor, `u32` feature dimension, `u32` model count; per model:
//! `u32` token id, `u32` state count S, S means and S variances (`D` x `f64`
//! each), then the `(S+1) x (S+1)` log-transition table as `f64`.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::Array1;

use super::{GaussianState, TokenHmm, TokenHmmSet};
use crate::discovery::GranularityConfig;
use crate::error::{Error, Result};
use crate::io_util::{read_f64, read_u32, write_f64, write_u32};

pub const MAGIC: &[u8; 4] = b"TKHM";
pub const VERSION: u32 = 1;

pub fn write_hmm_set<W: Write>(mut w: W, set: &TokenHmmSet) -> Result<()> {
    w.write_all(MAGIC)?;
    write_u32(&mut w, VERSION)?;
    write_u32(&mut w, set.granularity.m as u32)?;
    write_u32(&mut w, set.granularity.n as u32)?;
    write_f64(&mut w, set.variance_floor)?;
    write_u32(&mut w, set.dim().unwrap_or(0) as u32)?;
    write_u32(&mut w, set.models.len() as u32)?;
    for h in &set.models {
        write_u32(&mut w, h.token_id as u32)?;
        write_u32(&mut w, h.num_states() as u32)?;
        for st in &h.states {
            for v in st.mean.iter().chain(st.variance.iter()) {
                write_f64(&mut w, *v)?;
            }
        }
        for row in h.log_transition_matrix() {
            for v in row {
                write_f64(&mut w, v)?;
            }
        }
    }
    Ok(())
}

pub fn read_hmm_set<R: Read>(mut r: R) -> Result<TokenHmmSet> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format(format!("bad hmm file magic {magic:?}")));
    }
    let version = read_u32(&mut r)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported hmm file version {version}")));
    }
    let m = read_u32(&mut r)? as usize;
    let n = read_u32(&mut r)? as usize;
    let floor = read_f64(&mut r)?;
    let dim = read_u32(&mut r)? as usize;
    let count = read_u32(&mut r)? as usize;
    let mut models = Vec::with_capacity(count);
    for _ in 0..count {
        let token_id = read_u32(&mut r)? as usize;
        let s = read_u32(&mut r)? as usize;
        let mut states = Vec::with_capacity(s);
        for _ in 0..s {
            let mean = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            let var = (0..dim).map(|_| read_f64(&mut r)).collect::<Result<Vec<_>>>()?;
            states.push(GaussianState::new(Array1::from(mean), Array1::from(var)));
        }
        let mut table = vec![vec![0.0; s + 1]; s + 1];
        for row in table.iter_mut() {
            for v in row.iter_mut() {
                *v = read_f64(&mut r)?;
            }
        }
        models.push(TokenHmm::from_transition_matrix(token_id, states, &table)?);
    }
    TokenHmmSet::new(GranularityConfig { m, n }, models, floor)
}

pub fn save_hmm_set(path: &Path, set: &TokenHmmSet) -> Result<()> {
    write_hmm_set(std::io::BufWriter::new(std::fs::File::create(path)?), set)
}

pub fn load_hmm_set(path: &Path) -> Result<TokenHmmSet> {
    read_hmm_set(std::io::BufReader::new(std::fs::File::open(path)?))
}
