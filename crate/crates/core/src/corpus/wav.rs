//! Single-channel WAV reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// Reads a mono WAV file as `f32` samples in `[-1, 1]` (integer formats) or
/// as stored (float formats), together with its sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f32>, u32)> {
    let audio_err = |message: String| Error::Audio {
        path: path.to_owned(),
        message,
    };
    let mut reader = hound::WavReader::open(path).map_err(|e| audio_err(e.to_string()))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(audio_err(format!(
            "expected single-channel audio, found {} channels",
            spec.channels
        )));
    }
    let samples: std::result::Result<Vec<f32>, _> = match spec.sample_format {
        hound::SampleFormat::Float => reader.samples::<f32>().collect(),
        hound::SampleFormat::Int => {
            let scale = (1u64 << (spec.bits_per_sample - 1)) as f32;
            reader
                .samples::<i32>()
                .map(|s| s.map(|v| v as f32 / scale))
                .collect()
        }
    };
    let samples = samples.map_err(|e| audio_err(e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Reads a mono WAV and resamples it to `target_rate` when the header differs.
pub fn read_wav_resampled(path: &Path, target_rate: u32) -> Result<Vec<f32>> {
    let (samples, rate) = read_wav(path)?;
    Ok(resample_linear(&samples, rate, target_rate))
}

/// Writes mono 32-bit float WAV. Float storage keeps synthetic waveforms
/// bit-exact across a save/load cycle.
pub fn write_wav(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let audio_err = |e: hound::Error| Error::Audio {
        path: path.to_owned(),
        message: e.to_string(),
    };
    let mut writer = hound::WavWriter::create(path, spec).map_err(audio_err)?;
    for &s in samples {
        writer.write_sample(s).map_err(audio_err)?;
    }
    writer.finalize().map_err(audio_err)
}

/// Linear-interpolation resampler. Identity when the rates match.
pub fn resample_linear(samples: &[f32], from_rate: u32, to_rate: u32) -> Vec<f32> {
    if from_rate == to_rate || samples.is_empty() {
        return samples.to_vec();
    }
    let ratio = f64::from(from_rate) / f64::from(to_rate);
    let out_len = ((samples.len() as f64) / ratio).round().max(1.0) as usize;
    let last = samples.len() - 1;
    (0..out_len)
        .map(|i| {
            let pos = i as f64 * ratio;
            let left = (pos.floor() as usize).min(last);
            let right = (left + 1).min(last);
            let frac = (pos - left as f64) as f32;
            samples[left] * (1.0 - frac) + samples[right] * frac
        })
        .collect()
}
