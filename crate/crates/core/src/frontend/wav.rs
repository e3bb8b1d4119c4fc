use std::path::Path;

use super::AudioUtterance;
use crate::error::{Error, Result};

/// Reads a mono 16-bit PCM RIFF/WAVE file.
pub fn decode_wav(path: &Path) -> Result<AudioUtterance> {
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(e, path))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {} channels, only mono is supported",
            path.display(),
            spec.channels
        )));
    }
    if spec.sample_format != hound::SampleFormat::Int || spec.bits_per_sample != 16 {
        return Err(Error::UnsupportedFormat(format!(
            "{}: {}-bit {:?}, only 16-bit PCM is supported",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(|e| map_hound(e, path))?;
    if samples.is_empty() {
        return Err(Error::NoSamples(path.display().to_string()));
    }
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(AudioUtterance {
        id,
        samples,
        sample_rate_hz: spec.sample_rate,
    })
}

/// Writes a mono 16-bit PCM file.
pub fn encode_wav(path: &Path, u: &AudioUtterance) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: u.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(e, path))?;
    for &s in &u.samples {
        writer.write_sample(s).map_err(|e| map_hound(e, path))?;
    }
    writer.finalize().map_err(|e| map_hound(e, path))
}

fn map_hound(e: hound::Error, path: &Path) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        hound::Error::Unsupported => {
            Error::UnsupportedFormat(format!("{}: unsupported wav encoding", path.display()))
        }
        other => Error::Format(format!("{}: {other}", path.display())),
    }
}
