use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Read a 16 kHz mono WAV (PCM16 or float32) into a waveform scaled to `[-1, 1]`.
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnreadableWav { path: path.to_path_buf(), message: other.to_string() },
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::UnsupportedChannels(spec.channels));
    }
    if spec.sample_rate != SAMPLE_RATE {
        return Err(Error::UnsupportedSampleRate { got: spec.sample_rate, expected: SAMPLE_RATE });
    }
    let unreadable = |e: hound::Error| Error::UnreadableWav { path: path.to_path_buf(), message: e.to_string() };
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<_, _>>()
            .map_err(unreadable)?,
        (SampleFormat::Float, 32) => {
            reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect::<std::result::Result<_, _>>().map_err(unreadable)?
        }
        (fmt, bits) => {
            return Err(Error::UnsupportedEncoding(format!("{fmt:?} {bits}-bit")));
        }
    };
    Waveform::new(samples, spec.sample_rate)
}

/// Write a waveform as 16-bit PCM. Out-of-range samples are clipped and counted in the log.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let path = path.as_ref();
    w.require_non_empty()?;
    let spec = WavSpec { channels: 1, sample_rate: w.sample_rate(), bits_per_sample: 16, sample_format: SampleFormat::Int };
    let to_err = |e: hound::Error| match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::UnreadableWav { path: path.to_path_buf(), message: other.to_string() },
    };
    let mut writer = WavWriter::create(path, spec).map_err(to_err)?;
    let mut clipped = 0usize;
    for &s in w.samples() {
        if !(-1.0..=1.0).contains(&s) {
            clipped += 1;
        }
        let q = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
        writer.write_sample(q).map_err(to_err)?;
    }
    writer.finalize().map_err(to_err)?;
    if clipped > 0 {
        log::warn!("{}: clipped {clipped} out-of-range samples", path.display());
    }
    Ok(())
}
