//! Synthetic language with known phone/state alignments.
//!
//! Each phone is a left-to-right chain of Gaussian states. A speaker applies
//! `x ↦ A x + b` with `A = I + ε R` to every emission, where `R` is Gaussian
//! with unit RMS gain. Features are normalized per speaker.

use ndarray::{Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::frontend::{
    append_deltas, compute_mfcc, AudioUtterance, CmvnStats, FeatureSequence, FrontendConfig, Stage,
};
use crate::kv::KvConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// 39-dimensional emissions used directly as features.
    Feature,
    /// Tone complexes rendered to audio and passed through the front end.
    Waveform,
}

impl std::fmt::Display for SynthMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            SynthMode::Feature => "feature",
            SynthMode::Waveform => "waveform",
        })
    }
}

impl std::str::FromStr for SynthMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "feature" => Ok(SynthMode::Feature),
            "waveform" => Ok(SynthMode::Waveform),
            _ => Err(Error::Config(format!("unknown synthesis mode {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguageSpec {
    pub n_phones: usize,
    pub states_per_phone: usize,
    pub dim: usize,
    /// Per-dimension standard deviation of phone centres, in units of σ.
    pub phone_spread: f64,
    /// Per-dimension standard deviation of state offsets around the centre.
    pub state_spread: f64,
    /// Within-state standard deviation.
    pub sigma: f64,
    /// Self-loop probability of every state.
    pub self_loop: f64,
    pub n_si_speakers: usize,
    pub si_utterances: usize,
    pub n_adapt_speakers: usize,
    pub adapt_utterances: usize,
    pub dev_utterances: usize,
    pub test_utterances: usize,
    /// RMS gain of the speaker perturbation `A − I`.
    pub epsilon: f64,
    /// Per-dimension standard deviation of the speaker bias, in units of σ.
    pub bias_scale: f64,
    pub min_phones: usize,
    pub max_phones: usize,
    pub mode: SynthMode,
}

impl Default for SyntheticLanguageSpec {
    fn default() -> Self {
        Self {
            n_phones: 8,
            states_per_phone: 3,
            dim: 39,
            phone_spread: 0.6,
            state_spread: 0.45,
            sigma: 1.0,
            self_loop: 0.5,
            n_si_speakers: 4,
            si_utterances: 150,
            n_adapt_speakers: 2,
            adapt_utterances: 500,
            dev_utterances: 250,
            test_utterances: 250,
            epsilon: 0.4,
            bias_scale: 0.4,
            min_phones: 4,
            max_phones: 8,
            mode: SynthMode::Feature,
        }
    }
}

impl SyntheticLanguageSpec {
    pub fn num_states(&self) -> usize {
        self.n_phones * self.states_per_phone
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_phones < 2 || self.states_per_phone == 0 || self.dim == 0 {
            return Err(Error::Config("need at least 2 phones, 1 state, 1 dimension".into()));
        }
        if !(0.0..1.0).contains(&self.self_loop) {
            return Err(Error::Config("self_loop must lie in [0, 1)".into()));
        }
        if !(0.0..0.5).contains(&self.epsilon) {
            return Err(Error::Config("epsilon must lie in [0, 0.5) to keep transforms invertible".into()));
        }
        if self.min_phones == 0 || self.min_phones > self.max_phones {
            return Err(Error::Config("bad utterance length range".into()));
        }
        if self.mode == SynthMode::Waveform && self.dim != 39 {
            return Err(Error::Config("waveform mode produces 39-dimensional features".into()));
        }
        Ok(())
    }

    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::new();
        kv.set("n_phones", self.n_phones);
        kv.set("states_per_phone", self.states_per_phone);
        kv.set("dim", self.dim);
        kv.set("phone_spread", self.phone_spread);
        kv.set("state_spread", self.state_spread);
        kv.set("sigma", self.sigma);
        kv.set("self_loop", self.self_loop);
        kv.set("n_si_speakers", self.n_si_speakers);
        kv.set("si_utterances", self.si_utterances);
        kv.set("n_adapt_speakers", self.n_adapt_speakers);
        kv.set("adapt_utterances", self.adapt_utterances);
        kv.set("dev_utterances", self.dev_utterances);
        kv.set("test_utterances", self.test_utterances);
        kv.set("epsilon", self.epsilon);
        kv.set("bias_scale", self.bias_scale);
        kv.set("min_phones", self.min_phones);
        kv.set("max_phones", self.max_phones);
        kv.set("mode", self.mode);
        kv
    }

    pub fn from_kv(kv: &KvConfig) -> Result<Self> {
        let d = Self::default();
        let s = Self {
            n_phones: kv.get_or("n_phones", d.n_phones)?,
            states_per_phone: kv.get_or("states_per_phone", d.states_per_phone)?,
            dim: kv.get_or("dim", d.dim)?,
            phone_spread: kv.get_or("phone_spread", d.phone_spread)?,
            state_spread: kv.get_or("state_spread", d.state_spread)?,
            sigma: kv.get_or("sigma", d.sigma)?,
            self_loop: kv.get_or("self_loop", d.self_loop)?,
            n_si_speakers: kv.get_or("n_si_speakers", d.n_si_speakers)?,
            si_utterances: kv.get_or("si_utterances", d.si_utterances)?,
            n_adapt_speakers: kv.get_or("n_adapt_speakers", d.n_adapt_speakers)?,
            adapt_utterances: kv.get_or("adapt_utterances", d.adapt_utterances)?,
            dev_utterances: kv.get_or("dev_utterances", d.dev_utterances)?,
            test_utterances: kv.get_or("test_utterances", d.test_utterances)?,
            epsilon: kv.get_or("epsilon", d.epsilon)?,
            bias_scale: kv.get_or("bias_scale", d.bias_scale)?,
            min_phones: kv.get_or("min_phones", d.min_phones)?,
            max_phones: kv.get_or("max_phones", d.max_phones)?,
            mode: kv.get_or("mode", d.mode)?,
        };
        s.validate()?;
        Ok(s)
    }
}

/// Generating parameters: one Gaussian per phone state, row `p·S + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticLanguage {
    pub means: Array2<f64>,
    pub variances: Array2<f64>,
    /// Tone-complex frequencies (Hz) per state, waveform mode only.
    pub tones: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerTransform {
    pub a: Array2<f64>,
    pub b: Array1<f64>,
    /// Frequency warp applied to tone complexes in waveform mode.
    pub warp: f64,
}

impl SpeakerTransform {
    pub fn apply(&self, x: &Array1<f64>) -> Array1<f64> {
        self.a.dot(x) + &self.b
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUtterance {
    pub features: FeatureSequence,
    pub transcript: Vec<usize>,
    /// Ground-truth state per frame, `phone · S + state`.
    pub states: Vec<usize>,
}

impl SyntheticUtterance {
    pub fn phones(&self, states_per_phone: usize) -> Vec<usize> {
        self.states.iter().map(|s| s / states_per_phone).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerCorpus {
    pub speaker_id: String,
    pub transform: SpeakerTransform,
    /// Statistics used to normalize this speaker's features.
    pub cmvn: CmvnStats,
    pub utterances: Vec<SyntheticUtterance>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: SyntheticLanguageSpec,
    pub seed: u64,
    pub language: SyntheticLanguage,
    pub si_speakers: Vec<SpeakerCorpus>,
    pub adapt_speakers: Vec<SpeakerCorpus>,
}

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

/// Largest singular value by power iteration on `RᵀR`.
pub fn spectral_norm(r: &Array2<f64>) -> f64 {
    let mut v = Array1::from_elem(r.ncols(), 1.0 / (r.ncols() as f64).sqrt());
    let mut s = 0.0;
    for _ in 0..500 {
        let w = r.t().dot(&r.dot(&v));
        let n = w.dot(&w).sqrt();
        if n == 0.0 {
            return 0.0;
        }
        v = w / n;
        s = n.sqrt();
    }
    s
}

/// Perturbations are shrunk to at most this spectral norm so `I + R` stays
/// invertible.
pub const MAX_PERTURBATION_NORM: f64 = 0.9;

/// `‖R‖_F / sqrt(d)`: the average gain of `R` on a random direction.
pub fn rms_gain(r: &Array2<f64>) -> f64 {
    (r.iter().map(|v| v * v).sum::<f64>() / r.ncols() as f64).sqrt()
}

pub fn generate_language(spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng) -> SyntheticLanguage {
    let (s, d) = (spec.states_per_phone, spec.dim);
    let mut means = Array2::zeros((spec.num_states(), d));
    for p in 0..spec.n_phones {
        let centre: Array1<f64> = (0..d).map(|_| normal(rng) * spec.phone_spread * spec.sigma).collect();
        for k in 0..s {
            for j in 0..d {
                means[[p * s + k, j]] = centre[j] + normal(rng) * spec.state_spread * spec.sigma;
            }
        }
    }
    let variances = Array2::from_shape_fn((spec.num_states(), d), |_| {
        spec.sigma * spec.sigma * rng.random_range(0.6..1.4)
    });
    let tones = Array2::from_shape_fn((spec.num_states(), 3), |_| rng.random_range(250.0..3500.0));
    SyntheticLanguage { means, variances, tones }
}

pub fn generate_transform(spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng) -> SpeakerTransform {
    let d = spec.dim;
    let r = Array2::from_shape_fn((d, d), |_| normal(rng));
    let norm = rms_gain(&r);
    let mut a = Array2::eye(d);
    if norm > 0.0 {
        let mut p = r * (spec.epsilon / norm);
        let s = spectral_norm(&p);
        if s > MAX_PERTURBATION_NORM {
            p *= MAX_PERTURBATION_NORM / s;
        }
        a = a + p;
    }
    let b = (0..d).map(|_| normal(rng) * spec.bias_scale * spec.sigma).collect();
    let warp = 1.0 + spec.epsilon * rng.random_range(-0.25..0.25);
    SpeakerTransform { a, b, warp }
}

/// Phone sequence without immediate repeats, and per-frame states.
fn sample_alignment(spec: &SyntheticLanguageSpec, rng: &mut ChaCha8Rng) -> (Vec<usize>, Vec<usize>) {
    let n = rng.random_range(spec.min_phones..=spec.max_phones);
    let mut transcript: Vec<usize> = Vec::with_capacity(n);
    while transcript.len() < n {
        let p = rng.random_range(0..spec.n_phones);
        if transcript.last() != Some(&p) {
            transcript.push(p);
        }
    }
    let mut states = Vec::new();
    for &p in &transcript {
        for k in 0..spec.states_per_phone {
            loop {
                states.push(p * spec.states_per_phone + k);
                if rng.random::<f64>() >= spec.self_loop {
                    break;
                }
            }
        }
    }
    (transcript, states)
}

fn emit_features(lang: &SyntheticLanguage, tf: &SpeakerTransform, states: &[usize], rng: &mut ChaCha8Rng) -> Array2<f64> {
    let d = lang.means.ncols();
    let mut out = Array2::zeros((states.len(), d));
    for (t, &s) in states.iter().enumerate() {
        let clean: Array1<f64> = (0..d)
            .map(|j| lang.means[[s, j]] + normal(rng) * lang.variances[[s, j]].sqrt())
            .collect();
        out.row_mut(t).assign(&tf.apply(&clean));
    }
    out
}

const HOP: usize = 160;
const SAMPLE_RATE: u32 = 16000;

/// Renders one tone complex per frame and runs MFCC plus deltas. The sample
/// count is chosen so the front end yields exactly one frame per state frame.
fn emit_waveform(
    lang: &SyntheticLanguage,
    tf: &SpeakerTransform,
    states: &[usize],
    id: &str,
    rng: &mut ChaCha8Rng,
) -> Result<Array2<f64>> {
    let frontend = FrontendConfig::default();
    let window = frontend.window_samples(SAMPLE_RATE);
    let n = states.len() * HOP + (window - HOP);
    let mut phase = [0.0f64; 3];
    let mut samples = Vec::with_capacity(n);
    for i in 0..n {
        let s = states[(i / HOP).min(states.len() - 1)];
        let mut v = 0.0;
        for (j, ph) in phase.iter_mut().enumerate() {
            let f = lang.tones[[s, j]] * tf.warp;
            *ph += 2.0 * std::f64::consts::PI * f / SAMPLE_RATE as f64;
            v += ph.sin() * 0.2 / (j + 1) as f64;
        }
        v += 0.01 * normal(rng);
        samples.push((v * 12000.0).round().clamp(i16::MIN as f64, i16::MAX as f64) as i16);
    }
    let audio = AudioUtterance {
        id: id.to_string(),
        samples,
        sample_rate_hz: SAMPLE_RATE,
    };
    let raw = compute_mfcc(&audio, &frontend)?;
    let with_deltas = append_deltas(&raw, &frontend)?;
    if with_deltas.num_frames() != states.len() {
        return Err(Error::Shape(format!(
            "{id}: front end produced {} frames for {} states",
            with_deltas.num_frames(),
            states.len()
        )));
    }
    Ok(with_deltas.frames)
}

fn synthesize_speaker(
    spec: &SyntheticLanguageSpec,
    lang: &SyntheticLanguage,
    speaker_id: String,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<SpeakerCorpus> {
    let transform = generate_transform(spec, rng);
    let mut raw = Vec::with_capacity(count);
    for i in 0..count {
        let (transcript, states) = sample_alignment(spec, rng);
        let id = format!("{speaker_id}_{i:04}");
        let frames = match spec.mode {
            SynthMode::Feature => emit_features(lang, &transform, &states, rng),
            SynthMode::Waveform => emit_waveform(lang, &transform, &states, &id, rng)?,
        };
        raw.push((id, frames, transcript, states));
    }
    let cmvn = CmvnStats::from_frames(raw.iter().map(|r| &r.1))?;
    let utterances = raw
        .into_iter()
        .map(|(id, frames, transcript, states)| SyntheticUtterance {
            features: FeatureSequence::new(id, cmvn.apply(&frames), Stage::Normalized),
            transcript,
            states,
        })
        .collect();
    Ok(SpeakerCorpus {
        speaker_id,
        transform,
        cmvn,
        utterances,
    })
}

/// Samples the language, the SI speakers, and the adaptation speakers (each
/// with adaptation, dev and test utterances in that order).
pub fn synthesize_corpus(spec: &SyntheticLanguageSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let language = generate_language(spec, &mut rng);
    let mut si_speakers = Vec::with_capacity(spec.n_si_speakers);
    for s in 0..spec.n_si_speakers {
        si_speakers.push(synthesize_speaker(spec, &language, format!("si{s:02}"), spec.si_utterances, &mut rng)?);
    }
    let per_speaker = spec.adapt_utterances + spec.dev_utterances + spec.test_utterances;
    let mut adapt_speakers = Vec::with_capacity(spec.n_adapt_speakers);
    for s in 0..spec.n_adapt_speakers {
        adapt_speakers.push(synthesize_speaker(spec, &language, format!("ad{s:02}"), per_speaker, &mut rng)?);
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        seed,
        language,
        si_speakers,
        adapt_speakers,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> SyntheticLanguageSpec {
        SyntheticLanguageSpec {
            n_si_speakers: 1,
            si_utterances: 5,
            n_adapt_speakers: 1,
            adapt_utterances: 6,
            dev_utterances: 2,
            test_utterances: 2,
            ..Default::default()
        }
    }

    #[test]
    fn counts_and_tiling() {
        let c = synthesize_corpus(&small(), 3).unwrap();
        assert_eq!(c.adapt_speakers[0].utterances.len(), 10);
        for u in c.si_speakers.iter().chain(&c.adapt_speakers).flat_map(|s| &s.utterances) {
            assert_eq!(u.states.len(), u.features.num_frames());
            assert_eq!(u.features.dim(), 39);
            let mut phones = u.phones(3);
            phones.dedup();
            assert_eq!(phones, u.transcript);
        }
    }

    #[test]
    fn same_seed_same_corpus() {
        assert_eq!(synthesize_corpus(&small(), 9).unwrap(), synthesize_corpus(&small(), 9).unwrap());
        assert_ne!(synthesize_corpus(&small(), 9).unwrap(), synthesize_corpus(&small(), 10).unwrap());
    }

    #[test]
    fn perturbation_has_requested_norm() {
        let spec = SyntheticLanguageSpec::default();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tf = generate_transform(&spec, &mut rng);
        let r = &tf.a - &Array2::<f64>::eye(39);
        assert!((rms_gain(&r) - 0.4).abs() < 1e-12);
        assert!(spectral_norm(&r) < MAX_PERTURBATION_NORM);
    }

    #[test]
    fn waveform_mode_aligns_frames() {
        let spec = SyntheticLanguageSpec {
            mode: SynthMode::Waveform,
            ..small()
        };
        let c = synthesize_corpus(&spec, 4).unwrap();
        for u in c.adapt_speakers[0].utterances.iter().take(3) {
            assert_eq!(u.states.len(), u.features.num_frames());
            assert!(u.features.frames.iter().all(|v| v.is_finite()));
        }
    }

    #[test]
    fn spec_round_trips_through_kv() {
        let s = SyntheticLanguageSpec {
            epsilon: 0.3,
            mode: SynthMode::Waveform,
            ..Default::default()
        };
        assert_eq!(SyntheticLanguageSpec::from_kv(&s.to_kv()).unwrap(), s);
    }
}
