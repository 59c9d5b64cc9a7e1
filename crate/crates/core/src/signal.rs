//! Mono PCM-16 WAV I/O and per-pulse excerpt handling.

use std::path::Path;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

const FULL_SCALE: f64 = 32768.0;

/// A mono sample sequence with its sampling rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Signal<T> {
    samples: Vec<T>,
    sample_rate_hz: u32,
}

impl<T: Scalar> Signal<T> {
    /// Builds a signal, rejecting empty input, a zero rate or non-finite samples.
    pub fn new(samples: Vec<T>, sample_rate_hz: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Dimension("signal has no samples".into()));
        }
        if sample_rate_hz == 0 {
            return Err(Error::Config("sample rate must be positive".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::Numeric(format!("sample {i} is not finite")));
        }
        Ok(Signal {
            samples,
            sample_rate_hz,
        })
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    /// Same rate, new samples; used when a processing step rewrites the data.
    pub fn with_samples(&self, samples: Vec<T>) -> Result<Self> {
        Signal::new(samples, self.sample_rate_hz)
    }

    pub fn extract_excerpt(&self, start: usize, len: usize) -> Result<Excerpt<T>> {
        extract_excerpt(self, start, len)
    }
}

/// A contiguous copy of part of a [`Signal`], remembering where it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Excerpt<T> {
    pub start: usize,
    pub samples: Vec<T>,
}

impl<T> Excerpt<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn end(&self) -> usize {
        self.start + self.samples.len()
    }
}

/// Copies `samples[start .. start + len)`.
pub fn extract_excerpt<T: Scalar>(signal: &Signal<T>, start: usize, len: usize) -> Result<Excerpt<T>> {
    let end = start
        .checked_add(len)
        .ok_or_else(|| Error::Bounds("excerpt end overflows".into()))?;
    if len == 0 || end > signal.len() {
        return Err(Error::Bounds(format!(
            "excerpt [{start}, {end}) does not fit in signal of length {}",
            signal.len()
        )));
    }
    Ok(Excerpt {
        start,
        samples: signal.samples[start..end].to_vec(),
    })
}

/// Writes the excerpt back over the range it was taken from.
pub fn replace_excerpt<T: Scalar>(signal: &Signal<T>, excerpt: &Excerpt<T>) -> Result<Signal<T>> {
    if excerpt.end() > signal.len() {
        return Err(Error::Bounds(format!(
            "excerpt [{}, {}) does not fit in signal of length {}",
            excerpt.start,
            excerpt.end(),
            signal.len()
        )));
    }
    let mut samples = signal.samples.clone();
    samples[excerpt.start..excerpt.end()].copy_from_slice(&excerpt.samples);
    signal.with_samples(samples)
}

fn map_hound(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        other => Error::Format(other.to_string()),
    }
}

/// Reads a mono 16-bit PCM WAV file; samples are scaled by 2^-15.
pub fn read_wav<T: Scalar>(path: impl AsRef<Path>) -> Result<Signal<T>> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| map_hound(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Format(format!("expected 1 channel, found {}", spec.channels)));
    }
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Format(format!(
            "expected 16-bit integer PCM, found {}-bit {:?}",
            spec.bits_per_sample, spec.sample_format
        )));
    }
    let expected = reader.len() as usize;
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| T::lit(v as f64 / FULL_SCALE)))
        .collect::<std::result::Result<Vec<T>, _>>()
        .map_err(|e| map_hound(path, e))?;
    if samples.len() != expected {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "truncated data chunk"),
        ));
    }
    Signal::new(samples, spec.sample_rate)
}

/// Quantizes one sample: clamp to [-1, 1 - 2^-15], then round to the nearest step.
pub fn quantize<T: Scalar>(x: T) -> i16 {
    let v = x.as_f64().clamp(-1.0, 1.0 - 1.0 / FULL_SCALE);
    (v * FULL_SCALE).round() as i16
}

/// Writes a mono 16-bit PCM WAV file.
pub fn write_wav<T: Scalar>(path: impl AsRef<Path>, signal: &Signal<T>) -> Result<()> {
    let path = path.as_ref();
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: signal.sample_rate_hz,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(|e| map_hound(path, e))?;
    for &s in &signal.samples {
        writer.write_sample(quantize(s)).map_err(|e| map_hound(path, e))?;
    }
    writer.finalize().map_err(|e| map_hound(path, e))
}
