//! Strictly left-to-right HMMs with single diagonal-Gaussian emissions.
//!
//! The same machinery serves discovered acoustic tokens and the phone models of
//! the speaker-independent system. A model with `m` states has, per state, a
//! self-loop and an arc to the next state; the arc out of the last state is the
//! exit. Every traversal starts in state 0 and must leave through the exit.

mod decode;
mod io;
mod train;

pub use decode::{
    force_align, force_align_scores, loop_decode_scores, token_loop_decode, viterbi_decode,
    EmissionTable,
};
pub use io::{load_hmm_set, read_hmm_set, save_hmm_set, write_hmm_set};
pub use train::{
    baum_welch_update, baum_welch_update_report, forward_log_likelihood, init_flat_start,
    BaumWelchReport,
};

use ndarray::{Array1, ArrayView1};

use crate::discovery::GranularityConfig;
use crate::error::{Error, Result};

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Smallest probability allowed on a self-loop or forward arc.
pub const MIN_ARC_PROB: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GaussianState {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

impl GaussianState {
    pub fn new(mean: Array1<f64>, variance: Array1<f64>) -> Self {
        Self { mean, variance }
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, x: ArrayView1<f64>) -> f64 {
        let mut quad = 0.0;
        let mut log_det = 0.0;
        for ((xv, mu), var) in x.iter().zip(self.mean.iter()).zip(self.variance.iter()) {
            let d = xv - mu;
            quad += d * d / var;
            log_det += var.ln();
        }
        -0.5 * (self.dim() as f64 * LN_2PI + log_det + quad)
    }

    pub(crate) fn floor_variance(&mut self, floor: f64) {
        self.variance.mapv_inplace(|v| v.max(floor));
    }
}

/// Clamps an arc probability pair `(self, next)` and returns their logs.
pub(crate) fn arc_logs(p_self: f64) -> (f64, f64) {
    let p = p_self.clamp(MIN_ARC_PROB, 1.0 - MIN_ARC_PROB);
    (p.ln(), (1.0 - p).ln())
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenHmm {
    pub token_id: usize,
    pub states: Vec<GaussianState>,
    /// Log self-loop probability per state.
    pub log_self: Vec<f64>,
    /// Log probability of advancing to the next state (exit for the last one).
    pub log_next: Vec<f64>,
}

impl TokenHmm {
    pub fn new(token_id: usize, states: Vec<GaussianState>, self_probs: &[f64]) -> Self {
        assert_eq!(states.len(), self_probs.len());
        let (log_self, log_next) = self_probs.iter().map(|&p| arc_logs(p)).unzip();
        Self {
            token_id,
            states,
            log_self,
            log_next,
        }
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// `(m+1) x (m+1)` log transition matrix over the states plus the exit.
    /// Only self and `+1` arcs are finite; the exit row is all `-inf`.
    pub fn log_transition_matrix(&self) -> Vec<Vec<f64>> {
        let m = self.num_states();
        let mut out = vec![vec![f64::NEG_INFINITY; m + 1]; m + 1];
        for k in 0..m {
            out[k][k] = self.log_self[k];
            out[k][k + 1] = self.log_next[k];
        }
        out
    }

    pub(crate) fn from_transition_matrix(
        token_id: usize,
        states: Vec<GaussianState>,
        matrix: &[Vec<f64>],
    ) -> Result<Self> {
        let m = states.len();
        if matrix.len() != m + 1 || matrix.iter().any(|r| r.len() != m + 1) {
            return Err(Error::Format("transition table has the wrong size".into()));
        }
        let mut log_self = Vec::with_capacity(m);
        let mut log_next = Vec::with_capacity(m);
        for (k, row) in matrix.iter().enumerate().take(m) {
            for (j, v) in row.iter().enumerate() {
                if j != k && j != k + 1 && v.is_finite() {
                    return Err(Error::Format(format!("arc {k}->{j} is not left-to-right")));
                }
            }
            log_self.push(row[k]);
            log_next.push(row[k + 1]);
        }
        Ok(Self {
            token_id,
            states,
            log_self,
            log_next,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if self.states.is_empty() {
            return Err(Error::Config(format!("token {} has no states", self.token_id)));
        }
        let d = self.dim();
        for (k, s) in self.states.iter().enumerate() {
            if s.mean.len() != d || s.variance.len() != d {
                return Err(Error::Shape(format!("token {} state {k} dimension", self.token_id)));
            }
            if s.variance.iter().any(|&v| !(v > 0.0)) {
                return Err(Error::Config(format!("token {} state {k} variance", self.token_id)));
            }
            let total = self.log_self[k].exp() + self.log_next[k].exp();
            if (total - 1.0).abs() > 1e-10 {
                return Err(Error::Config(format!(
                    "token {} state {k} transitions sum to {total}",
                    self.token_id
                )));
            }
        }
        Ok(())
    }
}

/// All token models of one granularity, sorted by token id.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenHmmSet {
    pub granularity: GranularityConfig,
    pub models: Vec<TokenHmm>,
    pub variance_floor: f64,
}

impl TokenHmmSet {
    pub fn new(granularity: GranularityConfig, mut models: Vec<TokenHmm>, variance_floor: f64) -> Result<Self> {
        models.sort_by_key(|h| h.token_id);
        if models.windows(2).any(|w| w[0].token_id == w[1].token_id) {
            return Err(Error::Config("duplicate token ids".into()));
        }
        if models.len() > granularity.n {
            return Err(Error::Config(format!(
                "{} models exceed n = {}",
                models.len(),
                granularity.n
            )));
        }
        if let Some(first) = models.first() {
            let d = first.dim();
            if models.iter().any(|h| h.dim() != d) {
                return Err(Error::Shape("token models disagree on dimension".into()));
            }
        }
        Ok(Self {
            granularity,
            models,
            variance_floor,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn dim(&self) -> Option<usize> {
        self.models.first().map(|h| h.dim())
    }

    pub fn get(&self, token_id: usize) -> Option<&TokenHmm> {
        self.models
            .binary_search_by_key(&token_id, |h| h.token_id)
            .ok()
            .map(|i| &self.models[i])
    }

    pub fn min_states(&self) -> usize {
        self.models.iter().map(|h| h.num_states()).min().unwrap_or(0)
    }

    /// Size of the state inventory when states are indexed `token_id * m + k`.
    pub fn state_inventory(&self) -> usize {
        self.granularity.n * self.granularity.m
    }
}

/// One token occupancy inside a decoded path (`end` exclusive).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Occupancy {
    pub token_id: usize,
    pub start: usize,
    pub end: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StatePath {
    pub utterance_id: String,
    /// Per-frame `(token_id, state_index)`.
    pub frames: Vec<(usize, usize)>,
    pub occupancies: Vec<Occupancy>,
    pub total_log_prob: f64,
}

impl StatePath {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn token_sequence(&self) -> Vec<usize> {
        self.occupancies.iter().map(|o| o.token_id).collect()
    }

    /// Per-frame state indices in a `token_id * m + state` inventory.
    pub fn state_targets(&self, m: usize) -> Vec<usize> {
        self.frames.iter().map(|&(tok, k)| tok * m + k).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn log_density_matches_closed_form() {
        let g = GaussianState::new(array![0.0, 1.0], array![1.0, 4.0]);
        let x = array![1.0, 3.0];
        let expected = -0.5 * (2.0 * (2.0 * std::f64::consts::PI).ln() + 4f64.ln() + 1.0 + 1.0);
        assert!((g.log_density(x.view()) - expected).abs() < 1e-12);
    }

    #[test]
    fn transition_matrix_round_trip() {
        let states = vec![GaussianState::new(array![0.0], array![1.0]); 3];
        let h = TokenHmm::new(4, states.clone(), &[0.5, 0.7, 0.2]);
        h.validate().unwrap();
        let m = h.log_transition_matrix();
        assert!(m[3].iter().all(|v| *v == f64::NEG_INFINITY));
        assert!(m[0][2] == f64::NEG_INFINITY);
        let back = TokenHmm::from_transition_matrix(4, states, &m).unwrap();
        assert_eq!(back, h);
    }

    #[test]
    fn set_sorts_and_rejects_duplicates() {
        let st = vec![GaussianState::new(array![0.0], array![1.0])];
        let g = GranularityConfig { m: 1, n: 3 };
        let set = TokenHmmSet::new(
            g,
            vec![TokenHmm::new(2, st.clone(), &[0.5]), TokenHmm::new(0, st.clone(), &[0.5])],
            1e-3,
        )
        .unwrap();
        assert_eq!(set.models[0].token_id, 0);
        assert!(set.get(2).is_some() && set.get(1).is_none());
        assert!(TokenHmmSet::new(
            g,
            vec![TokenHmm::new(1, st.clone(), &[0.5]), TokenHmm::new(1, st, &[0.5])],
            1e-3
        )
        .is_err());
    }
}
