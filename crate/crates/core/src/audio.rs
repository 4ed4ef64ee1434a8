//! WAV input/output, noisy/clean corpus pairing, segmentation and tempo
//! perturbation.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use hound::{SampleFormat, WavSpec, WavWriter};
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Rate every clip must have for training, evaluation and enhancement.
pub const SAMPLE_RATE: u32 = 16_000;

pub const TEMPO_RANGE: (f64, f64) = (0.9, 1.1);

/// Half-width, in output-rate samples, of the interpolation kernel.
const SINC_HALF_WIDTH: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl AudioClip {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Audio("empty clip".into()));
        }
        if sample_rate == 0 {
            return Err(Error::Audio("sample rate must be positive".into()));
        }
        Ok(AudioClip { samples, sample_rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    pub fn require_rate(&self, rate: u32) -> Result<()> {
        if self.sample_rate != rate {
            return Err(Error::Audio(format!(
                "sample rate mismatch: expected {rate} Hz, got {} Hz",
                self.sample_rate
            )));
        }
        Ok(())
    }
}

/// Reads a mono WAV, 16-bit PCM or 32-bit float.
pub fn read_wav(path: impl AsRef<Path>) -> Result<AudioClip> {
    let path = path.as_ref();
    let reader = hound::WavReader::open(path).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(Error::Audio(format!(
            "{}: expected mono, got {} channels",
            path.display(),
            spec.channels
        )));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| v as f32 / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>()?,
        (SampleFormat::Float, 32) => reader.into_samples::<f32>().collect::<std::result::Result<Vec<_>, _>>()?,
        (fmt, bits) => {
            return Err(Error::Audio(format!(
                "{}: unsupported encoding {fmt:?} {bits}-bit",
                path.display()
            )))
        }
    };
    AudioClip::new(samples, spec.sample_rate).map_err(|e| Error::Audio(format!("{}: {e}", path.display())))
}

/// Writes 16-bit PCM; samples are clamped to [-1, 1].
pub fn write_wav(path: impl AsRef<Path>, clip: &AudioClip) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: clip.sample_rate,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut w = WavWriter::create(path, spec)?;
    for &s in &clip.samples {
        w.write_sample(to_pcm16(s))?;
    }
    w.finalize()?;
    Ok(())
}

fn to_pcm16(s: f32) -> i16 {
    let s = if s.is_nan() { 0.0 } else { s };
    (s as f64 * 32768.0).round().clamp(-32768.0, 32767.0) as i16
}

/// Windows of `seg` samples starting every `hop` samples. The last window
/// reaches the end of the signal and is zero-padded if it runs past it.
pub fn segment(samples: &[f32], seg: usize, hop: usize) -> Result<Vec<Vec<f32>>> {
    if hop == 0 || seg <= hop {
        return Err(Error::InvalidArgument(format!("segment needs seg > hop > 0, got {seg}, {hop}")));
    }
    Ok((0..segment_count(samples.len(), seg, hop))
        .map(|i| {
            let start = i * hop;
            let mut w = vec![0.0; seg];
            let end = samples.len().min(start + seg);
            w[..end - start].copy_from_slice(&samples[start..end]);
            w
        })
        .collect())
}

/// Number of windows [`segment`] produces.
pub fn segment_count(len: usize, seg: usize, hop: usize) -> usize {
    if len <= seg {
        1
    } else {
        (len - seg).div_ceil(hop) + 1
    }
}

/// Segment lengths in samples from durations in seconds.
pub fn segment_samples(seg_seconds: f64, hop_seconds: f64, sample_rate: u32) -> Result<(usize, usize)> {
    let seg = (seg_seconds * sample_rate as f64).round() as usize;
    let hop = (hop_seconds * sample_rate as f64).round() as usize;
    if hop == 0 || seg <= hop {
        return Err(Error::Config(format!(
            "segment needs seg > hop > 0, got {seg_seconds} s and {hop_seconds} s"
        )));
    }
    Ok((seg, hop))
}

/// Output length of a speed change by `rate`: `round(len / rate)`, halves
/// rounded away from zero.
pub fn tempo_length(len: usize, rate: f64) -> usize {
    (len as f64 / rate).round() as usize
}

pub fn check_tempo_rate(rate: f64) -> Result<()> {
    if !(TEMPO_RANGE.0..=TEMPO_RANGE.1).contains(&rate) {
        return Err(Error::InvalidArgument(format!(
            "tempo rate {rate} outside [{}, {}]",
            TEMPO_RANGE.0, TEMPO_RANGE.1
        )));
    }
    Ok(())
}

/// Speed change by resampling: output sample `j` is the input evaluated at
/// `j * rate` with Hann-windowed sinc interpolation, low-passed at
/// `min(1, 1/rate)` of Nyquist. Pitch moves with tempo. Rate 1 is a copy.
pub fn tempo_perturb(samples: &[f32], rate: f64) -> Result<Vec<f32>> {
    check_tempo_rate(rate)?;
    if rate == 1.0 {
        return Ok(samples.to_vec());
    }
    let cutoff = (1.0 / rate).min(1.0);
    // kernel support measured in input samples
    let half = SINC_HALF_WIDTH as f64 / cutoff;
    let n_out = tempo_length(samples.len(), rate);
    let last = samples.len() as isize - 1;
    Ok((0..n_out)
        .map(|j| {
            let t = j as f64 * rate;
            let lo = (t - half).ceil().max(0.0) as isize;
            let hi = ((t + half).floor() as isize).min(last);
            let mut acc = 0.0;
            for i in lo..=hi {
                let d = t - i as f64;
                let w = 0.5 + 0.5 * (PI * d / half).cos();
                acc += samples[i as usize] as f64 * cutoff * sinc(cutoff * d) * w;
            }
            acc as f32
        })
        .collect())
}

fn sinc(x: f64) -> f64 {
    if x.abs() < 1e-12 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusPair {
    pub id: String,
    pub noisy: AudioClip,
    pub clean: AudioClip,
}

impl CorpusPair {
    pub fn new(id: impl Into<String>, noisy: AudioClip, clean: AudioClip) -> Result<Self> {
        let id = id.into();
        if noisy.len() != clean.len() {
            return Err(Error::Corpus(format!(
                "`{id}`: noisy has {} samples, clean has {}",
                noisy.len(),
                clean.len()
            )));
        }
        if noisy.sample_rate != clean.sample_rate {
            return Err(Error::Corpus(format!(
                "`{id}`: noisy at {} Hz, clean at {} Hz",
                noisy.sample_rate, clean.sample_rate
            )));
        }
        Ok(CorpusPair { id, noisy, clean })
    }

    pub fn len(&self) -> usize {
        self.clean.len()
    }

    pub fn is_empty(&self) -> bool {
        self.clean.is_empty()
    }
}

/// WAV files in `dir` keyed by file name, sorted.
pub fn list_wavs(dir: impl AsRef<Path>) -> Result<BTreeMap<String, PathBuf>> {
    let dir = dir.as_ref();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::Corpus(format!("{}: {e}", dir.display())))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        let is_wav = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav"));
        if path.is_file() && is_wav {
            if let Some(name) = path.file_name().and_then(|n| n.to_str()) {
                out.insert(name.to_string(), path.clone());
            }
        }
    }
    Ok(out)
}

/// Loads every file name present in both directories. Files present in only
/// one are logged and skipped.
pub fn pair_corpus(noisy_dir: impl AsRef<Path>, clean_dir: impl AsRef<Path>) -> Result<Vec<CorpusPair>> {
    let noisy = list_wavs(&noisy_dir)?;
    let clean = list_wavs(&clean_dir)?;
    for name in noisy.keys().filter(|n| !clean.contains_key(*n)) {
        log::warn!("no clean file for `{name}`, skipping");
    }
    for name in clean.keys().filter(|n| !noisy.contains_key(*n)) {
        log::warn!("no noisy file for `{name}`, skipping");
    }
    let names: Vec<&String> = noisy.keys().filter(|n| clean.contains_key(*n)).collect();
    if names.is_empty() {
        return Err(Error::Corpus(format!(
            "no matching file names between {} and {}",
            noisy_dir.as_ref().display(),
            clean_dir.as_ref().display()
        )));
    }
    names
        .par_iter()
        .map(|&name| CorpusPair::new(name.clone(), read_wav(&noisy[name])?, read_wav(&clean[name])?))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn segment_counts() {
        let sr = 16_000;
        assert_eq!(segment_count(10 * sr, 4 * sr, 3 * sr), 3);
        assert_eq!(segment_count(2 * sr, 4 * sr, 3 * sr), 1);
        assert_eq!(segment_count(4 * sr, 4 * sr, 3 * sr), 1);
        assert_eq!(segment_count(4 * sr + 1, 4 * sr, 3 * sr), 2);
    }

    #[test]
    fn pcm_rounding_saturates() {
        assert_eq!(to_pcm16(1.0), 32767);
        assert_eq!(to_pcm16(-1.0), -32768);
        assert_eq!(to_pcm16(-2.0), -32768);
        assert_eq!(to_pcm16(f32::NAN), 0);
    }

    #[test]
    fn tempo_range_is_enforced() {
        assert!(tempo_perturb(&[0.0; 10], 0.89).is_err());
        assert!(tempo_perturb(&[0.0; 10], 1.11).is_err());
        assert!(tempo_perturb(&[0.0; 10], 1.1).is_ok());
    }
}
