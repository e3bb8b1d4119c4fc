//! Unsupervised acoustic token discovery.
//!
//! The corpus is cut into segments at discontinuities of the feature contour,
//! segment means are clustered to give the initial labeling, and then the
//! loop alternates between training one HMM per token on the current labels
//! (boundaries fixed) and re-decoding the whole corpus with a free token
//! loop, until the fraction of frames whose token changed falls below a
//! threshold.

mod kmeans;
mod labels_io;
mod segment;

pub use kmeans::{kmeans, kmeans_initialize, KMeansResult};
pub use labels_io::{parse_labels, read_labels, render_labels, write_labels, LabelsHeader};
pub use segment::{distance_contour, segment_utterance};

use std::collections::BTreeMap;

use ndarray::{Array1, ArrayView2, Axis};

use crate::error::{Error, Result};
use crate::frontend::{FeatureSequence, Stage};
use crate::hmm::{
    baum_welch_update_report, force_align, forward_log_likelihood, init_flat_start, token_loop_decode,
    Occupancy, StatePath, TokenHmm, TokenHmmSet,
};
use crate::kv::KvConfig;

/// Granularity `(m, n)`: states per token model and number of tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct GranularityConfig {
    pub m: usize,
    pub n: usize,
}

impl GranularityConfig {
    pub fn new(m: usize, n: usize) -> Result<Self> {
        let g = Self { m, n };
        g.validate()?;
        Ok(g)
    }

    pub fn validate(&self) -> Result<()> {
        if self.m < 1 || self.n < 2 {
            return Err(Error::Config(format!("granularity needs m >= 1 and n >= 2, got {self}")));
        }
        Ok(())
    }
}

impl std::fmt::Display for GranularityConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{})", self.m, self.n)
    }
}

impl std::str::FromStr for GranularityConfig {
    type Err = Error;
    /// Accepts `(m,n)`, `m,n` or `mxn`.
    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim().trim_start_matches('(').trim_end_matches(')');
        let (a, b) = t
            .split_once(',')
            .or_else(|| t.split_once('x'))
            .ok_or_else(|| Error::Config(format!("bad granularity {s:?}")))?;
        let m = a.trim().parse().map_err(|_| Error::Config(format!("bad m in {s:?}")))?;
        let n = b.trim().parse().map_err(|_| Error::Config(format!("bad n in {s:?}")))?;
        Self::new(m, n)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcousticSegment {
    pub utterance_id: String,
    pub start_frame: usize,
    pub end_frame: usize,
    pub mean_vector: Array1<f64>,
}

/// Token occupancies of one utterance, optionally with per-frame states.
#[derive(Debug, Clone, PartialEq)]
pub struct UtteranceLabels {
    pub utterance_id: String,
    pub occupancies: Vec<Occupancy>,
    pub states: Option<Vec<usize>>,
}

impl UtteranceLabels {
    pub fn num_frames(&self) -> usize {
        self.occupancies.last().map(|o| o.end).unwrap_or(0)
    }

    pub fn frame_tokens(&self) -> Vec<usize> {
        let mut out = Vec::with_capacity(self.num_frames());
        for o in &self.occupancies {
            out.extend(std::iter::repeat_n(o.token_id, o.end - o.start));
        }
        out
    }

    pub fn token_sequence(&self) -> Vec<usize> {
        self.occupancies.iter().map(|o| o.token_id).collect()
    }

    fn from_path(utterance_id: &str, path: &StatePath) -> Self {
        Self {
            utterance_id: utterance_id.to_string(),
            occupancies: path.occupancies.clone(),
            states: Some(path.frames.iter().map(|&(_, k)| k).collect()),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TokenLabeling {
    pub utterances: Vec<UtteranceLabels>,
    pub iteration_index: usize,
}

impl TokenLabeling {
    pub fn get(&self, utterance_id: &str) -> Option<&UtteranceLabels> {
        self.utterances.iter().find(|u| u.utterance_id == utterance_id)
    }

    /// Checks that every utterance of `corpus` is tiled exactly, in order, and
    /// that token ids lie in `[0, n)`.
    pub fn validate_tiling(&self, corpus: &[FeatureSequence], n: usize) -> Result<()> {
        if self.utterances.len() != corpus.len() {
            return Err(Error::Shape(format!(
                "{} labeled utterances for a corpus of {}",
                self.utterances.len(),
                corpus.len()
            )));
        }
        for (u, f) in self.utterances.iter().zip(corpus) {
            if u.utterance_id != f.utterance_id {
                return Err(Error::Shape(format!("label order: {} vs {}", u.utterance_id, f.utterance_id)));
            }
            let mut pos = 0;
            for o in &u.occupancies {
                if o.start != pos || o.end <= o.start || o.token_id >= n {
                    return Err(Error::Shape(format!("{}: bad occupancy {o:?}", u.utterance_id)));
                }
                pos = o.end;
            }
            if pos != f.num_frames() {
                return Err(Error::Shape(format!(
                    "{}: labels cover {pos} of {} frames",
                    u.utterance_id,
                    f.num_frames()
                )));
            }
            if let Some(st) = &u.states {
                if st.len() != pos {
                    return Err(Error::Shape(format!("{}: state alignment length", u.utterance_id)));
                }
            }
        }
        Ok(())
    }

    /// Fraction of frames whose token id differs between two labelings of the
    /// same corpus.
    pub fn changed_fraction(&self, other: &TokenLabeling) -> Result<f64> {
        if self.utterances.len() != other.utterances.len() {
            return Err(Error::Shape("labelings cover different corpora".into()));
        }
        let mut changed = 0usize;
        let mut total = 0usize;
        for (a, b) in self.utterances.iter().zip(&other.utterances) {
            let (fa, fb) = (a.frame_tokens(), b.frame_tokens());
            if fa.len() != fb.len() || a.utterance_id != b.utterance_id {
                return Err(Error::Shape(format!("{}: labelings disagree on length", a.utterance_id)));
            }
            changed += fa.iter().zip(&fb).filter(|(x, y)| x != y).count();
            total += fa.len();
        }
        Ok(if total == 0 { 0.0 } else { changed as f64 / total as f64 })
    }

    pub fn frame_tokens_concat(&self) -> Vec<usize> {
        self.utterances.iter().flat_map(|u| u.frame_tokens()).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryConfig {
    pub granularity: GranularityConfig,
    pub seed: u64,
    pub max_iters: usize,
    pub threshold: f64,
    pub sensitivity: f64,
    pub min_frames: usize,
    pub insertion_penalty: f64,
    pub bw_max_iters: usize,
    pub bw_rel_tol: f64,
    pub variance_floor_scale: f64,
}

impl DiscoveryConfig {
    pub fn new(granularity: GranularityConfig, seed: u64) -> Self {
        Self {
            granularity,
            seed,
            max_iters: 20,
            threshold: 0.01,
            sensitivity: 1.0,
            min_frames: 3,
            insertion_penalty: 0.0,
            bw_max_iters: 10,
            bw_rel_tol: 1e-5,
            variance_floor_scale: 1e-3,
        }
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("m", self.granularity.m);
        kv.set("n", self.granularity.n);
        kv.set("seed", self.seed);
        kv.set("max_iters", self.max_iters);
        kv.set("threshold", self.threshold);
        kv.set("sensitivity", self.sensitivity);
        kv.set("min_frames", self.min_frames);
        kv.set("insertion_penalty", self.insertion_penalty);
        kv.set("bw_max_iters", self.bw_max_iters);
        kv.set("bw_rel_tol", self.bw_rel_tol);
        kv.set("variance_floor_scale", self.variance_floor_scale);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::new(GranularityConfig { m: 3, n: 8 }, 0);
        let granularity = GranularityConfig::new(kv.get_or("m", d.granularity.m)?, kv.get_or("n", d.granularity.n)?)?;
        Ok(Self {
            granularity,
            seed: kv.get_or("seed", d.seed)?,
            max_iters: kv.get_or("max_iters", d.max_iters)?,
            threshold: kv.get_or("threshold", d.threshold)?,
            sensitivity: kv.get_or("sensitivity", d.sensitivity)?,
            min_frames: kv.get_or("min_frames", d.min_frames)?,
            insertion_penalty: kv.get_or("insertion_penalty", d.insertion_penalty)?,
            bw_max_iters: kv.get_or("bw_max_iters", d.bw_max_iters)?,
            bw_rel_tol: kv.get_or("bw_rel_tol", d.bw_rel_tol)?,
            variance_floor_scale: kv.get_or("variance_floor_scale", d.variance_floor_scale)?,
        })
    }
}

/// `scale` times the mean per-dimension variance of the corpus.
pub fn variance_floor_for(corpus: &[FeatureSequence], scale: f64) -> Result<f64> {
    let stats = crate::frontend::CmvnStats::from_frames(corpus.iter().map(|f| &f.frames))?;
    let mean_var = stats.variance.mean().unwrap_or(1.0);
    Ok(scale * mean_var.max(1e-12))
}

fn check_corpus(corpus: &[FeatureSequence]) -> Result<()> {
    if corpus.is_empty() {
        return Err(Error::Config("empty corpus".into()));
    }
    for f in corpus {
        if f.stage != Stage::Normalized {
            return Err(Error::Stage {
                expected: Stage::Normalized.name(),
                found: f.stage.name(),
            });
        }
    }
    Ok(())
}

/// Per-token bookkeeping from one re-estimation pass.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ReestimateReport {
    pub dropped_tokens: Vec<usize>,
    pub padded_tokens: Vec<usize>,
    pub bw_iterations: BTreeMap<usize, usize>,
}

fn stretch(seg: ArrayView2<f64>, m: usize) -> ndarray::Array2<f64> {
    let len = seg.nrows();
    let idx: Vec<usize> = (0..m).map(|i| i * len / m).collect();
    seg.select(Axis(0), &idx)
}

/// Trains one HMM per labeled token with boundaries held fixed.
///
/// Tokens without segments are dropped. A token whose segments are all
/// shorter than `m` is trained on index-stretched copies and reported.
pub fn reestimate_models(
    labels: &TokenLabeling,
    corpus: &[FeatureSequence],
    cfg: &DiscoveryConfig,
    floor: f64,
    prev: Option<&TokenHmmSet>,
) -> Result<(TokenHmmSet, ReestimateReport)> {
    let g = cfg.granularity;
    let mut by_token: BTreeMap<usize, Vec<ArrayView2<f64>>> = BTreeMap::new();
    for (u, f) in labels.utterances.iter().zip(corpus) {
        for o in &u.occupancies {
            by_token
                .entry(o.token_id)
                .or_default()
                .push(f.frames.slice(ndarray::s![o.start..o.end, ..]));
        }
    }
    let mut report = ReestimateReport::default();
    let mut models = Vec::new();
    for token in 0..g.n {
        let Some(segs) = by_token.get(&token) else {
            report.dropped_tokens.push(token);
            continue;
        };
        let padded: Vec<ndarray::Array2<f64>>;
        let segs: Vec<ArrayView2<f64>> = if segs.iter().all(|s| s.nrows() < g.m) {
            report.padded_tokens.push(token);
            padded = segs.iter().map(|s| stretch(*s, g.m)).collect();
            padded.iter().map(|p| p.view()).collect()
        } else {
            segs.clone()
        };
        let mut h = match prev.and_then(|p| p.get(token)) {
            Some(h) if h.num_states() == g.m => h.clone(),
            _ => {
                let mut h = init_flat_start(&segs, g.m, floor)?;
                h.token_id = token;
                h
            }
        };
        let mut last_ll = f64::NEG_INFINITY;
        let mut iters = 0;
        for _ in 0..cfg.bw_max_iters {
            let (next, rep) = baum_welch_update_report(&h, &segs, floor)?;
            iters += 1;
            let ll = rep.log_likelihood;
            h = next;
            if last_ll.is_finite() && ((ll - last_ll) / last_ll.abs().max(1e-300)).abs() < cfg.bw_rel_tol {
                break;
            }
            last_ll = ll;
        }
        report.bw_iterations.insert(token, iters);
        models.push(h);
    }
    if !report.dropped_tokens.is_empty() {
        log::info!("{g}: dropped tokens without segments {:?}", report.dropped_tokens);
    }
    if !report.padded_tokens.is_empty() {
        log::warn!("{g}: tokens trained on stretched segments {:?}", report.padded_tokens);
    }
    Ok((TokenHmmSet::new(g, models, floor)?, report))
}

/// Total log-likelihood of a labeling under a model set: every occupancy
/// scored with its own token's forward likelihood.
pub fn labeling_log_likelihood(set: &TokenHmmSet, labels: &TokenLabeling, corpus: &[FeatureSequence]) -> Result<f64> {
    let mut total = 0.0;
    for (u, f) in labels.utterances.iter().zip(corpus) {
        for o in &u.occupancies {
            let h = set
                .get(o.token_id)
                .ok_or_else(|| Error::Missing(format!("token {} has no model", o.token_id)))?;
            if o.end - o.start >= h.num_states() {
                total += forward_log_likelihood(h, f.frames.slice(ndarray::s![o.start..o.end, ..]))?;
            }
        }
    }
    Ok(total)
}

/// Free-loop Viterbi decoding of every utterance. Utterances with no legal
/// path get the single token whose states best explain the frames, and are
/// returned in the flagged list.
pub fn relabel_corpus(
    models: &TokenHmmSet,
    corpus: &[FeatureSequence],
    insertion_penalty: f64,
    iteration_index: usize,
) -> Result<(TokenLabeling, Vec<String>)> {
    if models.is_empty() {
        return Err(Error::Config("cannot relabel with an empty model set".into()));
    }
    let mut flagged = Vec::new();
    let mut utterances = Vec::with_capacity(corpus.len());
    for f in corpus {
        match token_loop_decode(models, f.frames.view(), insertion_penalty) {
            Ok(path) => utterances.push(UtteranceLabels::from_path(&f.utterance_id, &path)),
            Err(Error::NoPath(_)) => {
                flagged.push(f.utterance_id.clone());
                utterances.push(whole_utterance_fallback(models, f));
            }
            Err(e) => return Err(e),
        }
    }
    Ok((
        TokenLabeling {
            utterances,
            iteration_index,
        },
        flagged,
    ))
}

fn whole_utterance_fallback(models: &TokenHmmSet, f: &FeatureSequence) -> UtteranceLabels {
    let score = |h: &TokenHmm| -> f64 {
        f.frames
            .rows()
            .into_iter()
            .map(|x| h.states.iter().map(|s| s.log_density(x)).fold(f64::NEG_INFINITY, f64::max))
            .sum()
    };
    let mut best = &models.models[0];
    let mut best_score = score(best);
    for h in &models.models[1..] {
        let s = score(h);
        if s > best_score {
            best = h;
            best_score = s;
        }
    }
    let t_len = f.num_frames();
    let m = best.num_states();
    UtteranceLabels {
        utterance_id: f.utterance_id.clone(),
        occupancies: vec![Occupancy {
            token_id: best.token_id,
            start: 0,
            end: t_len,
        }],
        states: Some((0..t_len).map(|t| t * m / t_len.max(1)).collect()),
    }
}

/// Viterbi score of every utterance constrained to its labeled token order.
pub fn aligned_scores(models: &TokenHmmSet, labels: &TokenLabeling, corpus: &[FeatureSequence]) -> Result<Vec<f64>> {
    labels
        .utterances
        .iter()
        .zip(corpus)
        .map(|(u, f)| Ok(force_align(models, f.frames.view(), &u.token_sequence())?.total_log_prob))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiscoveryReport {
    pub granularity: GranularityConfig,
    pub seed: u64,
    pub iterations_run: usize,
    pub changed_fractions: Vec<f64>,
    pub converged: bool,
    pub models: TokenHmmSet,
    pub labels: TokenLabeling,
    pub initial_labels: TokenLabeling,
    pub variance_floor: f64,
    /// Utterances that had no legal loop path in the final relabel.
    pub flagged_utterances: Vec<String>,
}

impl DiscoveryReport {
    pub fn final_changed_fraction(&self) -> Option<f64> {
        self.changed_fractions.last().copied()
    }
}

/// Segments every utterance and runs the K-means initialization.
pub fn initial_labeling(corpus: &[FeatureSequence], cfg: &DiscoveryConfig) -> Result<TokenLabeling> {
    check_corpus(corpus)?;
    let mut segments = Vec::new();
    for f in corpus {
        segments.extend(segment_utterance(f, cfg.sensitivity, cfg.min_frames)?);
    }
    kmeans_initialize(&segments, &cfg.granularity, cfg.seed)
}

/// The full discovery loop for one granularity.
pub fn discover(corpus: &[FeatureSequence], cfg: &DiscoveryConfig) -> Result<DiscoveryReport> {
    cfg.granularity.validate()?;
    check_corpus(corpus)?;
    let floor = variance_floor_for(corpus, cfg.variance_floor_scale)?;
    let initial = initial_labeling(corpus, cfg)?;
    let mut labels = initial.clone();
    let mut prev: Option<TokenHmmSet> = None;
    let mut fractions = Vec::new();
    let mut converged = false;
    let mut flagged = Vec::new();
    for i in 1..=cfg.max_iters.max(1) {
        let (models, _) = reestimate_models(&labels, corpus, cfg, floor, prev.as_ref())?;
        let (next, fl) = relabel_corpus(&models, corpus, cfg.insertion_penalty, i)?;
        let frac = labels.changed_fraction(&next)?;
        log::debug!("{}: iteration {i} changed {:.4}", cfg.granularity, frac);
        fractions.push(frac);
        labels = next;
        flagged = fl;
        prev = Some(models);
        if frac <= cfg.threshold {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("{}: no convergence after {} iterations", cfg.granularity, fractions.len());
    }
    Ok(DiscoveryReport {
        granularity: cfg.granularity,
        seed: cfg.seed,
        iterations_run: fractions.len(),
        changed_fractions: fractions,
        converged,
        models: prev.expect("at least one iteration"),
        labels,
        initial_labels: initial,
        variance_floor: floor,
        flagged_utterances: flagged,
    })
}

/// Independent discovery per granularity, all with the same seed and
/// remaining settings taken from `base`.
pub fn discover_multi(
    corpus: &[FeatureSequence],
    grid: &[GranularityConfig],
    base: &DiscoveryConfig,
) -> Result<Vec<DiscoveryReport>> {
    if grid.is_empty() {
        return Err(Error::Config("empty granularity grid".into()));
    }
    grid.iter()
        .map(|&g| {
            let cfg = DiscoveryConfig {
                granularity: g,
                ..base.clone()
            };
            discover(corpus, &cfg)
        })
        .collect()
}

/// The 16-set grid `m in {3,5,9,13}` x `n in {50,100,200,300}`.
pub fn full_scale_grid() -> Vec<GranularityConfig> {
    let mut out = Vec::new();
    for m in [3, 5, 9, 13] {
        for n in [50, 100, 200, 300] {
            out.push(GranularityConfig { m, n });
        }
    }
    out
}

/// The token sets combined in the full-scale multi-token configuration.
pub fn multi_token_sets() -> Vec<GranularityConfig> {
    [(3, 50), (5, 200), (13, 50), (13, 300)]
        .into_iter()
        .map(|(m, n)| GranularityConfig { m, n })
        .collect()
}
