//! Mono WAV reading and writing (16-bit PCM or 32-bit float).

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use super::{Waveform, DEFAULT_SAMPLE_RATE};
use crate::error::{Error, Result};

/// What to do with a file whose sample rate differs from the expected one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ResamplePolicy {
    #[default]
    Reject,
    /// Linear-interpolation resampling to the expected rate.
    Resample,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum WavFormat {
    Pcm16,
    #[default]
    Float32,
}

#[derive(Debug, Clone, Copy)]
pub struct WavOptions {
    pub expected_rate: u32,
    pub policy: ResamplePolicy,
}

impl Default for WavOptions {
    fn default() -> Self {
        Self {
            expected_rate: DEFAULT_SAMPLE_RATE,
            policy: ResamplePolicy::Reject,
        }
    }
}

pub fn read_wav(path: impl AsRef<Path>, opts: WavOptions) -> Result<Waveform> {
    let path = path.as_ref();
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!(
            "{}: expected mono, found {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples: Vec<f64> = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| s.map(|v| v as f64 / 32768.0))
            .collect::<std::result::Result<_, _>>()?,
        (SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| s.map(|v| v as f64))
            .collect::<std::result::Result<_, _>>()?,
        (fmt, bits) => {
            return Err(Error::Format(format!(
                "{}: unsupported sample format {fmt:?}/{bits}-bit",
                path.display()
            )))
        }
    };
    let w = Waveform::new(samples, spec.sample_rate)?;
    if spec.sample_rate == opts.expected_rate {
        return Ok(w);
    }
    match opts.policy {
        ResamplePolicy::Reject => Err(Error::Format(format!(
            "{}: sample rate {} Hz, expected {} Hz",
            path.display(),
            spec.sample_rate,
            opts.expected_rate
        ))),
        ResamplePolicy::Resample => Ok(resample_linear(&w, opts.expected_rate)),
    }
}

pub fn write_wav(path: impl AsRef<Path>, w: &Waveform, format: WavFormat) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: w.sample_rate(),
        bits_per_sample: match format {
            WavFormat::Pcm16 => 16,
            WavFormat::Float32 => 32,
        },
        sample_format: match format {
            WavFormat::Pcm16 => SampleFormat::Int,
            WavFormat::Float32 => SampleFormat::Float,
        },
    };
    let mut writer = hound::WavWriter::create(path, spec)?;
    for &s in w.samples() {
        match format {
            WavFormat::Pcm16 => writer.write_sample((s * 32768.0).round().clamp(-32768.0, 32767.0) as i16)?,
            WavFormat::Float32 => writer.write_sample(s as f32)?,
        }
    }
    writer.finalize()?;
    Ok(())
}

fn resample_linear(w: &Waveform, rate: u32) -> Waveform {
    let src = w.samples();
    let ratio = w.sample_rate() as f64 / rate as f64;
    let out_len = ((src.len() as f64) / ratio).floor() as usize;
    let samples = (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let j = pos.floor() as usize;
            let frac = pos - j as f64;
            let a = src[j.min(src.len() - 1)];
            let b = src[(j + 1).min(src.len() - 1)];
            a + (b - a) * frac
        })
        .collect();
    Waveform {
        samples,
        sample_rate: rate,
    }
}
