//! MFCC front end on a synthetic tone complex: WAV round trip, feature
//! shapes at each stage, and a TKFA archive.
//!
//! cargo run --example frontend

use std::f64::consts::PI;

use ptdnn::frontend::{
    append_deltas, apply_cmvn, compute_mfcc, decode_wav, encode_wav, load_archive, save_archive, splice_frames,
    AudioUtterance, FrontendConfig,
};

fn tone(id: &str, seconds: f64, freqs: &[f64]) -> AudioUtterance {
    let sr = 16_000u32;
    let n = (seconds * sr as f64) as usize;
    let samples = (0..n)
        .map(|i| {
            let t = i as f64 / sr as f64;
            let x: f64 = freqs.iter().enumerate().map(|(j, f)| 0.2 / (j + 1) as f64 * (2.0 * PI * f * t).sin()).sum();
            (x * 16_000.0).round() as i16
        })
        .collect();
    AudioUtterance {
        id: id.into(),
        samples,
        sample_rate_hz: sr,
    }
}

fn main() -> ptdnn::Result<()> {
    let cfg = FrontendConfig::default();
    let dir = tempfile::tempdir()?;

    let audio = tone("vowel_a", 0.5, &[700.0, 1220.0, 2600.0]);
    let wav = dir.path().join("vowel_a.wav");
    encode_wav(&wav, &audio)?;
    let audio = decode_wav(&wav)?;
    println!("{}: {} samples at {} Hz", audio.id, audio.samples.len(), audio.sample_rate_hz);

    let mfcc = compute_mfcc(&audio, &cfg)?;
    let deltas = append_deltas(&mfcc, &cfg)?;
    let normed = apply_cmvn(&deltas)?;
    let spliced = splice_frames(&normed, &cfg)?;
    for f in [&mfcc, &deltas, &normed, &spliced] {
        println!("  {:<10} {:>3} frames x {:>3} dims", f.stage.name(), f.num_frames(), f.dim());
    }
    let c0 = mfcc.frames.column(0);
    println!("  c0 range [{:.2}, {:.2}]", c0.fold(f64::MAX, |a, &b| a.min(b)), c0.fold(f64::MIN, |a, &b| a.max(b)));

    let other = apply_cmvn(&append_deltas(&compute_mfcc(&tone("vowel_i", 0.3, &[280.0, 2250.0, 2900.0]), &cfg)?, &cfg)?)?;
    let archive = dir.path().join("feats.tkfa");
    save_archive(&archive, &[normed.clone(), other])?;
    let back = load_archive(&archive)?;
    println!("archive holds {:?}", back.iter().map(|f| (&f.utterance_id, f.num_frames())).collect::<Vec<_>>());
    assert_eq!(back[0], normed);
    Ok(())
}
