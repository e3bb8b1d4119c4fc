//! Viterbi decoding: single model, free token loop, and forced alignment.
//!
//! All decoders work on a precomputed [`EmissionTable`] so that the same
//! search can run over Gaussian log-densities or over scaled network
//! posteriors.

use ndarray::{Array2, ArrayView2};

use super::{Occupancy, StatePath, TokenHmm, TokenHmmSet};
use crate::error::{Error, Result};

/// Per-frame log emission scores for a list of models, with the states of
/// model `i` occupying columns `offsets[i] .. offsets[i] + m_i`.
#[derive(Debug, Clone)]
pub struct EmissionTable {
    pub scores: Array2<f64>,
    pub offsets: Vec<usize>,
}

impl EmissionTable {
    pub fn from_models(models: &[TokenHmm], frames: ArrayView2<f64>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(models.len());
        let mut total = 0;
        for h in models {
            if h.dim() != frames.ncols() {
                return Err(Error::Shape(format!(
                    "token {} has dimension {}, frames have {}",
                    h.token_id,
                    h.dim(),
                    frames.ncols()
                )));
            }
            offsets.push(total);
            total += h.num_states();
        }
        let t_len = frames.nrows();
        let mut scores = Array2::zeros((t_len, total));
        for (h, &off) in models.iter().zip(&offsets) {
            for (k, st) in h.states.iter().enumerate() {
                let inv: Vec<f64> = st.variance.iter().map(|v| 1.0 / v).collect();
                let norm = -0.5
                    * (st.dim() as f64 * super::LN_2PI + st.variance.iter().map(|v| v.ln()).sum::<f64>());
                for t in 0..t_len {
                    let row = frames.row(t);
                    let mut quad = 0.0;
                    for ((x, mu), iv) in row.iter().zip(st.mean.iter()).zip(&inv) {
                        let d = x - mu;
                        quad += d * d * iv;
                    }
                    scores[[t, off + k]] = norm - 0.5 * quad;
                }
            }
        }
        Ok(Self { scores, offsets })
    }

    pub fn from_set(set: &TokenHmmSet, frames: ArrayView2<f64>) -> Result<Self> {
        Self::from_models(&set.models, frames)
    }

    /// Wraps externally computed scores laid out in model order.
    pub fn from_scores(models: &[TokenHmm], scores: Array2<f64>) -> Result<Self> {
        let mut offsets = Vec::with_capacity(models.len());
        let mut total = 0;
        for h in models {
            offsets.push(total);
            total += h.num_states();
        }
        if scores.ncols() != total {
            return Err(Error::Shape(format!(
                "score table has {} columns, models have {total} states",
                scores.ncols()
            )));
        }
        Ok(Self { scores, offsets })
    }
}

/// Best left-to-right path through a single model.
///
/// The score includes the final exit arc. Ties go to the lower predecessor
/// state index.
pub fn viterbi_decode(h: &TokenHmm, frames: ArrayView2<f64>) -> Result<StatePath> {
    let table = EmissionTable::from_models(std::slice::from_ref(h), frames)?;
    chain_viterbi(std::slice::from_ref(h), &table, &[0], 0.0, "")
}

/// Free token-loop Viterbi: any token may follow any token. Each token entry
/// costs `ln(1/|set|) - insertion_penalty`.
pub fn token_loop_decode(set: &TokenHmmSet, frames: ArrayView2<f64>, insertion_penalty: f64) -> Result<StatePath> {
    if set.is_empty() {
        return Err(Error::Config("empty token set".into()));
    }
    let table = EmissionTable::from_set(set, frames)?;
    let entry = -(set.len() as f64).ln() - insertion_penalty;
    loop_decode_scores(&set.models, &table, entry)
}

/// Loop decoding over precomputed scores; `entry_log_prob` is added at every
/// token entry, including the first.
pub fn loop_decode_scores(models: &[TokenHmm], table: &EmissionTable, entry_log_prob: f64) -> Result<StatePath> {
    let t_len = table.scores.nrows();
    let n_states = table.scores.ncols();
    if models.is_empty() || t_len == 0 {
        return Err(Error::NoPath("nothing to decode".into()));
    }
    let min_m = models.iter().map(|h| h.num_states()).min().unwrap_or(0);
    if min_m > t_len {
        return Err(Error::NoPath(format!("{t_len} frames, shortest token needs {min_m}")));
    }
    let last_of: Vec<usize> = models
        .iter()
        .zip(&table.offsets)
        .map(|(h, &o)| o + h.num_states() - 1)
        .collect();

    let neg = f64::NEG_INFINITY;
    let mut prev = vec![neg; n_states];
    let mut cur = vec![neg; n_states];
    let mut back = vec![u32::MAX; t_len * n_states];
    let mut entered = vec![false; t_len * n_states];

    for (&off, _) in table.offsets.iter().zip(models) {
        prev[off] = entry_log_prob + table.scores[[0, off]];
        entered[off] = true;
    }

    for t in 1..t_len {
        // best exit at t-1; ties go to the lower token id
        let mut exit_score = neg;
        let mut exit_src = u32::MAX;
        for (i, h) in models.iter().enumerate() {
            let last = last_of[i];
            let s = prev[last] + h.log_next[h.num_states() - 1];
            if s > exit_score {
                exit_score = s;
                exit_src = last as u32;
            }
        }
        let entry_score = exit_score + entry_log_prob;
        let row = t * n_states;
        for (i, h) in models.iter().enumerate() {
            let off = table.offsets[i];
            for k in 0..h.num_states() {
                let g = off + k;
                let stay = prev[g] + h.log_self[k];
                let (best, src, via_entry) = if k > 0 {
                    let adv = prev[g - 1] + h.log_next[k - 1];
                    if adv >= stay {
                        (adv, g - 1, false)
                    } else {
                        (stay, g, false)
                    }
                } else if entry_score > stay || (entry_score == stay && (exit_src as usize) < g) {
                    (entry_score, exit_src as usize, true)
                } else {
                    (stay, g, false)
                };
                cur[g] = best + table.scores[[t, g]];
                back[row + g] = src as u32;
                entered[row + g] = via_entry;
            }
        }
        std::mem::swap(&mut prev, &mut cur);
    }

    let mut final_score = neg;
    let mut final_state = usize::MAX;
    for (i, h) in models.iter().enumerate() {
        let s = prev[last_of[i]] + h.log_next[h.num_states() - 1];
        if s > final_score {
            final_score = s;
            final_state = last_of[i];
        }
    }
    if final_state == usize::MAX || final_score == neg {
        return Err(Error::NoPath("no finite-scoring path".into()));
    }

    // map global column -> (model index, state)
    let mut owner = vec![(0usize, 0usize); n_states];
    for (i, h) in models.iter().enumerate() {
        for k in 0..h.num_states() {
            owner[table.offsets[i] + k] = (i, k);
        }
    }
    let mut cols = vec![0usize; t_len];
    let mut starts = vec![false; t_len];
    let mut g = final_state;
    for t in (0..t_len).rev() {
        cols[t] = g;
        starts[t] = t == 0 || entered[t * n_states + g];
        if t > 0 {
            g = back[t * n_states + g] as usize;
        }
    }
    Ok(build_path(models, &owner, &cols, &starts, final_score))
}

fn build_path(models: &[TokenHmm], owner: &[(usize, usize)], cols: &[usize], starts: &[bool], score: f64) -> StatePath {
    let frames: Vec<(usize, usize)> = cols
        .iter()
        .map(|&g| {
            let (i, k) = owner[g];
            (models[i].token_id, k)
        })
        .collect();
    let mut occupancies: Vec<Occupancy> = Vec::new();
    for (t, &(tok, _)) in frames.iter().enumerate() {
        if starts[t] {
            if let Some(last) = occupancies.last_mut() {
                last.end = t;
            }
            occupancies.push(Occupancy {
                token_id: tok,
                start: t,
                end: frames.len(),
            });
        }
    }
    StatePath {
        utterance_id: String::new(),
        frames,
        occupancies,
        total_log_prob: score,
    }
}

/// Viterbi constrained to the given token order. Each token entry carries the
/// same `ln(1/|set|)` prior as [`token_loop_decode`] with zero penalty, so the
/// aligned score never exceeds the unconstrained loop score.
pub fn force_align(set: &TokenHmmSet, frames: ArrayView2<f64>, token_sequence: &[usize]) -> Result<StatePath> {
    let table = EmissionTable::from_set(set, frames)?;
    let entry = -(set.len() as f64).ln();
    force_align_scores(&set.models, &table, token_sequence, entry)
}

/// Forced alignment over precomputed scores.
pub fn force_align_scores(
    models: &[TokenHmm],
    table: &EmissionTable,
    token_sequence: &[usize],
    entry_log_prob: f64,
) -> Result<StatePath> {
    if token_sequence.is_empty() {
        return Err(Error::NoPath("empty token sequence".into()));
    }
    let idx: Vec<usize> = token_sequence
        .iter()
        .map(|&tok| {
            models
                .iter()
                .position(|h| h.token_id == tok)
                .ok_or_else(|| Error::Config(format!("token {tok} not in model set")))
        })
        .collect::<Result<_>>()?;
    chain_viterbi(models, table, &idx, entry_log_prob, "")
}

/// Viterbi over the concatenation of `sequence` (indices into `models`).
fn chain_viterbi(
    models: &[TokenHmm],
    table: &EmissionTable,
    sequence: &[usize],
    entry_log_prob: f64,
    utt: &str,
) -> Result<StatePath> {
    let t_len = table.scores.nrows();
    // chain element: (model index, state, score column, starts a token)
    let chain: Vec<(usize, usize, usize, bool)> = sequence
        .iter()
        .flat_map(|&i| (0..models[i].num_states()).map(move |k| (i, k, k == 0)))
        .map(|(i, k, first)| (i, k, table.offsets[i] + k, first))
        .collect();
    let c_len = chain.len();
    if c_len > t_len {
        return Err(Error::NoPath(format!("{t_len} frames cannot cover {c_len} states")));
    }
    let neg = f64::NEG_INFINITY;
    let mut prev = vec![neg; c_len];
    let mut cur = vec![neg; c_len];
    let mut advanced = vec![false; t_len * c_len];
    prev[0] = entry_log_prob + table.scores[[0, chain[0].2]];
    for t in 1..t_len {
        // states beyond t are unreachable; states that cannot finish are pruned
        let hi = (t + 1).min(c_len);
        let lo = (c_len + t).saturating_sub(t_len);
        for c in 0..c_len {
            if c < lo || c >= hi {
                cur[c] = neg;
                continue;
            }
            let (i, k, col, first) = chain[c];
            let stay = prev[c] + models[i].log_self[k];
            let adv = if c > 0 {
                let (pi, pk, _, _) = chain[c - 1];
                prev[c - 1] + models[pi].log_next[pk] + if first { entry_log_prob } else { 0.0 }
            } else {
                neg
            };
            let take_adv = adv >= stay && adv > neg;
            cur[c] = if take_adv { adv } else { stay } + table.scores[[t, col]];
            advanced[t * c_len + c] = take_adv;
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let (li, lk, _, _) = chain[c_len - 1];
    let score = prev[c_len - 1] + models[li].log_next[lk];
    if score == neg || score.is_nan() {
        return Err(Error::NoPath("no finite-scoring path".into()));
    }
    let mut path_c = vec![0usize; t_len];
    let mut c = c_len - 1;
    for t in (0..t_len).rev() {
        path_c[t] = c;
        if t > 0 && advanced[t * c_len + c] {
            c -= 1;
        }
    }
    let mut owner = vec![(0usize, 0usize); table.scores.ncols()];
    for (i, h) in models.iter().enumerate() {
        for k in 0..h.num_states() {
            owner[table.offsets[i] + k] = (i, k);
        }
    }
    let cols: Vec<usize> = path_c.iter().map(|&c| chain[c].2).collect();
    let starts: Vec<bool> = path_c
        .iter()
        .enumerate()
        .map(|(t, &c)| t == 0 || (chain[c].3 && path_c[t - 1] != c))
        .collect();
    let mut path = build_path(models, &owner, &cols, &starts, score);
    path.utterance_id = utt.to_string();
    Ok(path)
}
