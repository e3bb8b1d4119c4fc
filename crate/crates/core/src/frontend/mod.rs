//! Acoustic front end: WAV ingest, MFCC extraction, deltas, mean/variance
//! normalization and context splicing.
//!
//! Every stage is a pure function of its inputs. A [`FeatureSequence`] carries
//! its [`Stage`] so that stages cannot be applied out of order.

mod archive;
mod mfcc;
mod partition;
mod wav;

pub use archive::{load as load_archive, read_archive, save as save_archive, write_archive, FeatureArchive};
pub use mfcc::{compute_mfcc, mel_filterbank, MelFilterbank};
pub use partition::{
    parse_transcripts, read_id_list, read_transcripts, render_transcripts, CorpusPartition, LabeledUtterance,
};
pub use wav::{decode_wav, encode_wav};

use ndarray::{s, Array1, Array2, Axis};

use crate::error::{Error, Result};
use crate::kv::KvConfig;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AudioUtterance {
    pub id: String,
    pub samples: Vec<i16>,
    pub sample_rate_hz: u32,
}

/// Processing stage of a feature matrix. Transitions only go forward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Stage {
    RawMfcc,
    WithDeltas,
    Normalized,
    Spliced,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Stage::RawMfcc => "raw_mfcc",
            Stage::WithDeltas => "with_deltas",
            Stage::Normalized => "normalized",
            Stage::Spliced => "spliced",
        }
    }

    pub fn tag(self) -> u8 {
        self as u8
    }

    pub fn from_tag(tag: u8) -> Option<Stage> {
        match tag {
            0 => Some(Stage::RawMfcc),
            1 => Some(Stage::WithDeltas),
            2 => Some(Stage::Normalized),
            3 => Some(Stage::Spliced),
            _ => None,
        }
    }
}

/// Time-major feature matrix for one utterance (`T x D`).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub utterance_id: String,
    pub frames: Array2<f64>,
    pub stage: Stage,
}

impl FeatureSequence {
    pub fn new(utterance_id: impl Into<String>, frames: Array2<f64>, stage: Stage) -> Self {
        Self {
            utterance_id: utterance_id.into(),
            frames,
            stage,
        }
    }

    pub fn num_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn dim(&self) -> usize {
        self.frames.ncols()
    }

    fn expect_stage(&self, expected: Stage) -> Result<()> {
        if self.stage != expected {
            return Err(Error::Stage {
                expected: expected.name(),
                found: self.stage.name(),
            });
        }
        Ok(())
    }
}

/// Scope over which mean/variance statistics are pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CmvnScope {
    PerUtterance,
    PerSpeaker,
}

impl std::str::FromStr for CmvnScope {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "per-utterance" => Ok(CmvnScope::PerUtterance),
            "per-speaker" => Ok(CmvnScope::PerSpeaker),
            other => Err(Error::Config(format!("unknown cmvn scope {other:?}"))),
        }
    }
}

impl std::fmt::Display for CmvnScope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            CmvnScope::PerUtterance => "per-utterance",
            CmvnScope::PerSpeaker => "per-speaker",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrontendConfig {
    pub window_ms: f64,
    pub hop_ms: f64,
    pub n_mels: usize,
    pub n_cepstra: usize,
    pub delta_window: usize,
    pub context_left: usize,
    pub context_right: usize,
    pub log_energy_floor: f64,
    pub preemphasis: f64,
    pub cmvn_scope: CmvnScope,
}

impl Default for FrontendConfig {
    fn default() -> Self {
        Self {
            window_ms: 25.0,
            hop_ms: 10.0,
            n_mels: 26,
            n_cepstra: 13,
            delta_window: 2,
            context_left: 4,
            context_right: 4,
            log_energy_floor: 1e-10,
            preemphasis: 0.97,
            cmvn_scope: CmvnScope::PerUtterance,
        }
    }
}

impl FrontendConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.window_ms > self.hop_ms && self.hop_ms > 0.0) {
            return Err(Error::Config("need window_ms > hop_ms > 0".into()));
        }
        if self.n_cepstra == 0 || self.n_mels < self.n_cepstra {
            return Err(Error::Config("need n_mels >= n_cepstra >= 1".into()));
        }
        if self.log_energy_floor <= 0.0 {
            return Err(Error::Config("log_energy_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn context_size(&self) -> usize {
        self.context_left + self.context_right + 1
    }

    pub fn window_samples(&self, sample_rate_hz: u32) -> usize {
        (self.window_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn hop_samples(&self, sample_rate_hz: u32) -> usize {
        (self.hop_ms * sample_rate_hz as f64 / 1000.0).round() as usize
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("window_ms", self.window_ms);
        kv.set("hop_ms", self.hop_ms);
        kv.set("n_mels", self.n_mels);
        kv.set("n_cepstra", self.n_cepstra);
        kv.set("delta_window", self.delta_window);
        kv.set("context_left", self.context_left);
        kv.set("context_right", self.context_right);
        kv.set("log_energy_floor", self.log_energy_floor);
        kv.set("preemphasis", self.preemphasis);
        kv.set("cmvn_scope", self.cmvn_scope);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let cfg = Self {
            window_ms: kv.get_or("window_ms", d.window_ms)?,
            hop_ms: kv.get_or("hop_ms", d.hop_ms)?,
            n_mels: kv.get_or("n_mels", d.n_mels)?,
            n_cepstra: kv.get_or("n_cepstra", d.n_cepstra)?,
            delta_window: kv.get_or("delta_window", d.delta_window)?,
            context_left: kv.get_or("context_left", d.context_left)?,
            context_right: kv.get_or("context_right", d.context_right)?,
            log_energy_floor: kv.get_or("log_energy_floor", d.log_energy_floor)?,
            preemphasis: kv.get_or("preemphasis", d.preemphasis)?,
            cmvn_scope: kv.get_or("cmvn_scope", d.cmvn_scope)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Regression deltas over `±window` frames with replicated edges.
fn regression_deltas(x: &Array2<f64>, window: usize) -> Array2<f64> {
    let (t_len, dim) = x.dim();
    let mut out = Array2::zeros((t_len, dim));
    if window == 0 || t_len == 0 {
        return out;
    }
    let denom = 2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>();
    let last = t_len as isize - 1;
    for t in 0..t_len as isize {
        let mut row = out.row_mut(t as usize);
        for n in 1..=window as isize {
            let fwd = x.row((t + n).min(last) as usize);
            let back = x.row((t - n).max(0) as usize);
            for d in 0..dim {
                row[d] += n as f64 * (fwd[d] - back[d]);
            }
        }
        row.mapv_inplace(|v| v / denom);
    }
    out
}

/// Appends first- and second-order regression deltas (`D -> 3D`).
pub fn append_deltas(f: &FeatureSequence, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    f.expect_stage(Stage::RawMfcc)?;
    let delta = regression_deltas(&f.frames, cfg.delta_window);
    let delta2 = regression_deltas(&delta, cfg.delta_window);
    let frames = ndarray::concatenate(Axis(1), &[f.frames.view(), delta.view(), delta2.view()])
        .expect("row counts agree");
    Ok(FeatureSequence::new(f.utterance_id.clone(), frames, Stage::WithDeltas))
}

/// Per-dimension mean and (biased) variance pooled over a set of sequences.
#[derive(Debug, Clone, PartialEq)]
pub struct CmvnStats {
    pub mean: Array1<f64>,
    pub variance: Array1<f64>,
}

pub const DEGENERATE_VARIANCE: f64 = 1e-12;

impl CmvnStats {
    /// Pools statistics in the given order (fixed summation order).
    pub fn from_frames<'a>(seqs: impl IntoIterator<Item = &'a Array2<f64>>) -> Result<Self> {
        let mut count = 0usize;
        let mut sum: Option<Array1<f64>> = None;
        let seqs: Vec<&Array2<f64>> = seqs.into_iter().collect();
        for x in &seqs {
            let s = x.sum_axis(Axis(0));
            count += x.nrows();
            sum = Some(match sum {
                None => s,
                Some(acc) => {
                    if acc.len() != s.len() {
                        return Err(Error::Shape("feature dimensions differ".into()));
                    }
                    acc + s
                }
            });
        }
        let sum = sum.ok_or_else(|| Error::Shape("no frames for cmvn".into()))?;
        if count == 0 {
            return Err(Error::Shape("no frames for cmvn".into()));
        }
        let mean = sum / count as f64;
        let mut sq = Array1::<f64>::zeros(mean.len());
        for x in &seqs {
            for row in x.rows() {
                for (d, v) in row.iter().enumerate() {
                    let c = v - mean[d];
                    sq[d] += c * c;
                }
            }
        }
        Ok(Self {
            mean,
            variance: sq / count as f64,
        })
    }

    pub fn apply(&self, x: &Array2<f64>) -> Array2<f64> {
        let mut out = x.clone();
        for (d, mut col) in out.columns_mut().into_iter().enumerate() {
            let mu = self.mean[d];
            let var = self.variance[d];
            if var < DEGENERATE_VARIANCE {
                col.mapv_inplace(|v| v - mu);
            } else {
                let sd = var.sqrt();
                col.mapv_inplace(|v| (v - mu) / sd);
            }
        }
        out
    }

    pub fn degenerate_dims(&self) -> Vec<usize> {
        self.variance
            .iter()
            .enumerate()
            .filter(|(_, v)| **v < DEGENERATE_VARIANCE)
            .map(|(d, _)| d)
            .collect()
    }
}

/// Per-utterance mean and variance normalization.
///
/// Dimensions with variance below `1e-12` are only mean-shifted and reported
/// through a warning.
pub fn apply_cmvn(f: &FeatureSequence) -> Result<FeatureSequence> {
    f.expect_stage(Stage::WithDeltas)?;
    let stats = CmvnStats::from_frames([&f.frames])?;
    apply_cmvn_stats(f, &stats)
}

/// Normalizes with externally pooled statistics (per-speaker scope).
pub fn apply_cmvn_stats(f: &FeatureSequence, stats: &CmvnStats) -> Result<FeatureSequence> {
    f.expect_stage(Stage::WithDeltas)?;
    if stats.mean.len() != f.dim() {
        return Err(Error::Shape(format!(
            "cmvn stats have {} dims, features have {}",
            stats.mean.len(),
            f.dim()
        )));
    }
    let degenerate = stats.degenerate_dims();
    if !degenerate.is_empty() {
        log::warn!(
            "{}: dimensions {:?} have near-zero variance; mean-shifted only",
            f.utterance_id,
            degenerate
        );
    }
    Ok(FeatureSequence::new(
        f.utterance_id.clone(),
        stats.apply(&f.frames),
        Stage::Normalized,
    ))
}

/// Normalizes a group of utterances according to `cfg.cmvn_scope`.
pub fn normalize_group(seqs: &[FeatureSequence], cfg: &FrontendConfig) -> Result<Vec<FeatureSequence>> {
    match cfg.cmvn_scope {
        CmvnScope::PerUtterance => seqs.iter().map(apply_cmvn).collect(),
        CmvnScope::PerSpeaker => {
            let stats = CmvnStats::from_frames(seqs.iter().map(|s| &s.frames))?;
            seqs.iter().map(|s| apply_cmvn_stats(s, &stats)).collect()
        }
    }
}

/// Concatenates each frame with its `context_left`/`context_right` neighbours,
/// replicating boundary frames.
pub fn splice_frames(f: &FeatureSequence, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    f.expect_stage(Stage::Normalized)?;
    Ok(FeatureSequence::new(
        f.utterance_id.clone(),
        splice_matrix(&f.frames, cfg.context_left, cfg.context_right),
        Stage::Spliced,
    ))
}

pub fn splice_matrix(x: &Array2<f64>, left: usize, right: usize) -> Array2<f64> {
    let (t_len, dim) = x.dim();
    let width = left + right + 1;
    let mut out = Array2::zeros((t_len, dim * width));
    let last = t_len as isize - 1;
    for t in 0..t_len as isize {
        for (k, offset) in (-(left as isize)..=right as isize).enumerate() {
            let src = (t + offset).clamp(0, last) as usize;
            out.slice_mut(s![t as usize, k * dim..(k + 1) * dim])
                .assign(&x.row(src));
        }
    }
    out
}

/// Recovers the centre block of spliced frames.
pub fn unsplice_center(x: &Array2<f64>, dim: usize, left: usize) -> Array2<f64> {
    x.slice(s![.., left * dim..(left + 1) * dim]).to_owned()
}

/// Full pipeline for one utterance: MFCC, deltas, per-utterance CMVN, splicing.
pub fn extract_features(u: &AudioUtterance, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    let raw = compute_mfcc(u, cfg)?;
    let with_deltas = append_deltas(&raw, cfg)?;
    let normalized = apply_cmvn(&with_deltas)?;
    splice_frames(&normalized, cfg)
}

/// MFCC, deltas and CMVN for every `.wav` file in `dir` (sorted by name),
/// treating the directory as one speaker for per-speaker scope. Utterance
/// ids are the file stems.
pub fn process_wav_dir(dir: &std::path::Path, cfg: &FrontendConfig) -> Result<Vec<FeatureSequence>> {
    cfg.validate()?;
    let mut paths: Vec<std::path::PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Missing(format!("no .wav files in {}", dir.display())));
    }
    let mut with_deltas = Vec::with_capacity(paths.len());
    for p in &paths {
        let mut audio = decode_wav(p)?;
        if let Some(stem) = p.file_stem() {
            audio.id = stem.to_string_lossy().into_owned();
        }
        with_deltas.push(append_deltas(&compute_mfcc(&audio, cfg)?, cfg)?);
    }
    normalize_group(&with_deltas, cfg)
}
