//! Forward likelihood, flat-start initialization and Baum-Welch re-estimation.

use ndarray::{Array1, Array2, ArrayView2};

use super::{arc_logs, EmissionTable, GaussianState, TokenHmm};
use crate::error::{Error, Result};

fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn emissions(h: &TokenHmm, frames: ArrayView2<f64>) -> Result<Array2<f64>> {
    Ok(EmissionTable::from_models(std::slice::from_ref(h), frames)?.scores)
}

/// Log-domain forward pass; returns `alpha` (`T x m`).
fn forward_table(h: &TokenHmm, e: &Array2<f64>) -> Array2<f64> {
    let (t_len, m) = e.dim();
    let mut alpha = Array2::from_elem((t_len, m), f64::NEG_INFINITY);
    alpha[[0, 0]] = e[[0, 0]];
    for t in 1..t_len {
        for k in 0..m {
            let mut acc = alpha[[t - 1, k]] + h.log_self[k];
            if k > 0 {
                acc = log_add(acc, alpha[[t - 1, k - 1]] + h.log_next[k - 1]);
            }
            alpha[[t, k]] = acc + e[[t, k]];
        }
    }
    alpha
}

fn backward_table(h: &TokenHmm, e: &Array2<f64>) -> Array2<f64> {
    let (t_len, m) = e.dim();
    let mut beta = Array2::from_elem((t_len, m), f64::NEG_INFINITY);
    beta[[t_len - 1, m - 1]] = h.log_next[m - 1];
    for t in (0..t_len - 1).rev() {
        for k in 0..m {
            let mut acc = h.log_self[k] + e[[t + 1, k]] + beta[[t + 1, k]];
            if k + 1 < m {
                acc = log_add(acc, h.log_next[k] + e[[t + 1, k + 1]] + beta[[t + 1, k + 1]]);
            }
            beta[[t, k]] = acc;
        }
    }
    beta
}

/// `log P(frames | h)` summed over all left-to-right paths that start in state
/// 0 and leave through the exit after the last frame.
pub fn forward_log_likelihood(h: &TokenHmm, frames: ArrayView2<f64>) -> Result<f64> {
    if frames.nrows() == 0 {
        return Err(Error::Shape("empty frame matrix".into()));
    }
    let e = emissions(h, frames)?;
    let alpha = forward_table(h, &e);
    let m = h.num_states();
    Ok(alpha[[frames.nrows() - 1, m - 1]] + h.log_next[m - 1])
}

/// Uniform time-partition initialization: each segment is cut into `m` equal
/// chunks and state `k` pools the frames of every chunk `k`.
pub fn init_flat_start(segments: &[ArrayView2<f64>], m: usize, floor: f64) -> Result<TokenHmm> {
    if m == 0 {
        return Err(Error::Init("m must be at least 1".into()));
    }
    let usable: Vec<&ArrayView2<f64>> = segments.iter().filter(|s| s.nrows() >= m).collect();
    if usable.is_empty() {
        return Err(Error::Init(format!("every segment is shorter than {m} frames")));
    }
    let dim = usable[0].ncols();
    if usable.iter().any(|s| s.ncols() != dim) {
        return Err(Error::Shape("segments disagree on dimension".into()));
    }
    let mut sums = vec![Array1::<f64>::zeros(dim); m];
    let mut counts = vec![0usize; m];
    let mut total_len = 0usize;
    for seg in &usable {
        let len = seg.nrows();
        total_len += len;
        for k in 0..m {
            for t in (k * len / m)..((k + 1) * len / m) {
                sums[k] += &seg.row(t);
                counts[k] += 1;
            }
        }
    }
    let means: Vec<Array1<f64>> = sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect();
    let mut sq = vec![Array1::<f64>::zeros(dim); m];
    for seg in &usable {
        let len = seg.nrows();
        for k in 0..m {
            for t in (k * len / m)..((k + 1) * len / m) {
                let d = &seg.row(t) - &means[k];
                sq[k] += &(&d * &d);
            }
        }
    }
    let states = (0..m)
        .map(|k| {
            let mut g = GaussianState::new(means[k].clone(), &sq[k] / counts[k] as f64);
            g.floor_variance(floor);
            g
        })
        .collect();
    let mean_chunk = total_len as f64 / (usable.len() * m) as f64;
    let p_self = (mean_chunk - 1.0) / mean_chunk;
    Ok(TokenHmm::new(0, states, &vec![p_self; m]))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct BaumWelchReport {
    /// Total forward log-likelihood of the usable segments before the update.
    pub log_likelihood: f64,
    /// States whose total occupancy was zero and were left unchanged.
    pub unoccupied_states: Vec<usize>,
    /// Segments skipped because they are shorter than the model.
    pub skipped_segments: usize,
}

/// One EM iteration over all segments.
pub fn baum_welch_update(h: &TokenHmm, segments: &[ArrayView2<f64>], floor: f64) -> Result<TokenHmm> {
    baum_welch_update_report(h, segments, floor).map(|(h, _)| h)
}

pub fn baum_welch_update_report(
    h: &TokenHmm,
    segments: &[ArrayView2<f64>],
    floor: f64,
) -> Result<(TokenHmm, BaumWelchReport)> {
    let m = h.num_states();
    let dim = h.dim();
    let mut occ = vec![0.0; m];
    let mut first = vec![Array1::<f64>::zeros(dim); m];
    let mut second = vec![Array1::<f64>::zeros(dim); m];
    let mut self_count = vec![0.0; m];
    let mut next_count = vec![0.0; m];
    let mut report = BaumWelchReport::default();

    for seg in segments {
        let t_len = seg.nrows();
        if t_len < m {
            report.skipped_segments += 1;
            continue;
        }
        let e = emissions(h, *seg)?;
        let alpha = forward_table(h, &e);
        let beta = backward_table(h, &e);
        let ll = alpha[[t_len - 1, m - 1]] + h.log_next[m - 1];
        if !ll.is_finite() {
            report.skipped_segments += 1;
            continue;
        }
        report.log_likelihood += ll;
        for t in 0..t_len {
            let x = seg.row(t);
            for k in 0..m {
                let g = (alpha[[t, k]] + beta[[t, k]] - ll).exp();
                if g == 0.0 {
                    continue;
                }
                occ[k] += g;
                for d in 0..dim {
                    first[k][d] += g * x[d];
                    second[k][d] += g * x[d] * x[d];
                }
                if t + 1 < t_len {
                    self_count[k] += (alpha[[t, k]] + h.log_self[k] + e[[t + 1, k]] + beta[[t + 1, k]] - ll).exp();
                    if k + 1 < m {
                        next_count[k] +=
                            (alpha[[t, k]] + h.log_next[k] + e[[t + 1, k + 1]] + beta[[t + 1, k + 1]] - ll).exp();
                    }
                }
            }
        }
        next_count[m - 1] += 1.0;
    }

    let mut out = h.clone();
    for k in 0..m {
        if occ[k] <= f64::MIN_POSITIVE {
            report.unoccupied_states.push(k);
            continue;
        }
        let mean = &first[k] / occ[k];
        let var = (&second[k] / occ[k] - &mean * &mean).mapv(|v| v.max(0.0));
        let mut g = GaussianState::new(mean, var);
        g.floor_variance(floor);
        out.states[k] = g;
        let total = self_count[k] + next_count[k];
        if total > 0.0 {
            let (ls, ln) = arc_logs(self_count[k] / total);
            out.log_self[k] = ls;
            out.log_next[k] = ln;
        }
    }
    if !report.unoccupied_states.is_empty() {
        log::warn!(
            "token {}: states {:?} had zero occupancy and were left unchanged",
            h.token_id,
            report.unoccupied_states
        );
    }
    Ok((out, report))
}
