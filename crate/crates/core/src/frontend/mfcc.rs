use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use super::{AudioUtterance, FeatureSequence, FrontendConfig, Stage};
use crate::error::{Error, Result};

fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular mel filters over the bins `0..=nfft/2`.
#[derive(Debug, Clone)]
pub struct MelFilterbank {
    pub weights: Array2<f64>,
}

/// Builds `n_mels` triangular filters spanning 0 Hz to Nyquist on the HTK mel
/// scale, with FFT-bin quantized corner frequencies.
pub fn mel_filterbank(n_mels: usize, nfft: usize, sample_rate_hz: u32) -> MelFilterbank {
    let n_bins = nfft / 2 + 1;
    let high = hz_to_mel(sample_rate_hz as f64 / 2.0);
    let bins: Vec<usize> = (0..n_mels + 2)
        .map(|i| {
            let mel = high * i as f64 / (n_mels + 1) as f64;
            ((nfft + 1) as f64 * mel_to_hz(mel) / sample_rate_hz as f64).floor() as usize
        })
        .collect();
    let mut weights = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (bins[m], bins[m + 1], bins[m + 2]);
        for k in lo..mid {
            weights[[m, k]] = (k - lo) as f64 / (mid - lo) as f64;
        }
        for k in mid..hi.min(n_bins) {
            weights[[m, k]] = (hi - k) as f64 / (hi - mid) as f64;
        }
    }
    MelFilterbank { weights }
}

struct Analyzer {
    window: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
    nfft: usize,
    filterbank: MelFilterbank,
    dct: Array2<f64>,
}

impl Analyzer {
    fn new(window_len: usize, cfg: &FrontendConfig, sample_rate_hz: u32) -> Self {
        let nfft = window_len.next_power_of_two();
        let window = (0..window_len)
            .map(|n| 0.54 - 0.46 * (2.0 * PI * n as f64 / (window_len - 1) as f64).cos())
            .collect();
        let fft = FftPlanner::new().plan_fft_forward(nfft);
        let m = cfg.n_mels;
        // orthonormal DCT-II, first n_cepstra rows
        let dct = Array2::from_shape_fn((cfg.n_cepstra, m), |(k, j)| {
            let scale = if k == 0 { (1.0 / m as f64).sqrt() } else { (2.0 / m as f64).sqrt() };
            scale * (PI * k as f64 * (j as f64 + 0.5) / m as f64).cos()
        });
        Self {
            window,
            fft,
            nfft,
            filterbank: mel_filterbank(cfg.n_mels, nfft, sample_rate_hz),
            dct,
        }
    }
}

/// 13 cepstra per frame (c0 retained) from a pre-emphasized, Hamming-windowed
/// power spectrum. Frames are not padded: `T = floor((N - W) / H) + 1`.
pub fn compute_mfcc(u: &AudioUtterance, cfg: &FrontendConfig) -> Result<FeatureSequence> {
    cfg.validate()?;
    if u.sample_rate_hz == 0 {
        return Err(Error::Config("sample rate must be positive".into()));
    }
    let w = cfg.window_samples(u.sample_rate_hz);
    let h = cfg.hop_samples(u.sample_rate_hz);
    if w < 2 || h == 0 {
        return Err(Error::Config("window or hop rounds to zero samples".into()));
    }
    let n = u.samples.len();
    if n < w {
        return Err(Error::TooShort { samples: n, window: w });
    }
    let t_len = (n - w) / h + 1;

    let scaled: Vec<f64> = u.samples.iter().map(|&s| s as f64 / 32768.0).collect();
    let mut signal = Vec::with_capacity(n);
    signal.push(scaled[0]);
    for i in 1..n {
        signal.push(scaled[i] - cfg.preemphasis * scaled[i - 1]);
    }

    let an = Analyzer::new(w, cfg, u.sample_rate_hz);
    let n_bins = an.nfft / 2 + 1;
    let mut frames = Array2::zeros((t_len, cfg.n_cepstra));
    let mut buf = vec![Complex::new(0.0, 0.0); an.nfft];
    let mut power = vec![0.0; n_bins];
    let mut log_mel = vec![0.0; cfg.n_mels];
    for t in 0..t_len {
        let start = t * h;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < w {
                Complex::new(signal[start + i] * an.window[i], 0.0)
            } else {
                Complex::new(0.0, 0.0)
            };
        }
        an.fft.process(&mut buf);
        for (k, p) in power.iter_mut().enumerate() {
            *p = buf[k].norm_sqr() / an.nfft as f64;
        }
        for (m, lm) in log_mel.iter_mut().enumerate() {
            let e: f64 = an
                .filterbank
                .weights
                .row(m)
                .iter()
                .zip(&power)
                .map(|(a, b)| a * b)
                .sum();
            *lm = e.max(cfg.log_energy_floor).ln();
        }
        for k in 0..cfg.n_cepstra {
            frames[[t, k]] = an.dct.row(k).iter().zip(&log_mel).map(|(a, b)| a * b).sum();
        }
    }
    Ok(FeatureSequence::new(u.id.clone(), frames, Stage::RawMfcc))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sine(freq: f64, n: usize, rate: u32) -> AudioUtterance {
        let samples = (0..n)
            .map(|i| (8000.0 * (2.0 * PI * freq * i as f64 / rate as f64).sin()) as i16)
            .collect();
        AudioUtterance {
            id: format!("sine{freq}"),
            samples,
            sample_rate_hz: rate,
        }
    }

    #[test]
    fn one_second_gives_98_frames() {
        let f = compute_mfcc(&sine(440.0, 16000, 16000), &FrontendConfig::default()).unwrap();
        assert_eq!(f.frames.dim(), (98, 13));
        assert_eq!(f.stage, Stage::RawMfcc);
    }

    #[test]
    fn deterministic() {
        let cfg = FrontendConfig::default();
        let u = sine(700.0, 4000, 16000);
        let a = compute_mfcc(&u, &cfg).unwrap();
        let b = compute_mfcc(&u, &cfg).unwrap();
        assert!(a.frames.iter().zip(b.frames.iter()).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn different_tones_differ() {
        let cfg = FrontendConfig::default();
        let a = compute_mfcc(&sine(1000.0, 8000, 16000), &cfg).unwrap();
        let b = compute_mfcc(&sine(3000.0, 8000, 16000), &cfg).unwrap();
        let ma = a.frames.mean_axis(ndarray::Axis(0)).unwrap();
        let mb = b.frames.mean_axis(ndarray::Axis(0)).unwrap();
        let dist = (&ma - &mb).mapv(|v| v * v).sum().sqrt();
        assert!(dist > 1.0, "distance {dist}");
    }

    #[test]
    fn too_short_is_an_error() {
        let err = compute_mfcc(&sine(440.0, 399, 16000), &FrontendConfig::default()).unwrap_err();
        assert!(matches!(err, Error::TooShort { samples: 399, window: 400 }));
    }

    #[test]
    fn silence_stays_finite() {
        let u = AudioUtterance {
            id: "sil".into(),
            samples: vec![0; 2000],
            sample_rate_hz: 16000,
        };
        let f = compute_mfcc(&u, &FrontendConfig::default()).unwrap();
        assert!(f.frames.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn narrowband_adapts_window() {
        let f = compute_mfcc(&sine(500.0, 8000, 8000), &FrontendConfig::default()).unwrap();
        // 200-sample window, 80-sample hop at 8 kHz
        assert_eq!(f.num_frames(), (8000 - 200) / 80 + 1);
    }

    #[test]
    fn filterbank_rows_are_triangles() {
        let fb = mel_filterbank(26, 512, 16000);
        for row in fb.weights.rows() {
            let peak = row.iter().cloned().fold(0.0, f64::max);
            assert!(peak > 0.0 && peak <= 1.0);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(24))]
        #[test]
        fn frame_count_formula(n in 400usize..6000, window_ms in 5.0f64..40.0, hop_frac in 0.1f64..0.9) {
            let cfg = FrontendConfig { window_ms, hop_ms: window_ms * hop_frac, ..Default::default() };
            let w = cfg.window_samples(16000);
            let h = cfg.hop_samples(16000);
            prop_assume!(h > 0 && w >= 2 && n >= w);
            let f = compute_mfcc(&sine(300.0, n, 16000), &cfg).unwrap();
            prop_assert_eq!(f.num_frames(), (n - w) / h + 1);
        }
    }
}
