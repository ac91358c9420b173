//! WAV rendering, spectrogram export and fundamental-frequency estimation.

use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// Sample encoding for rendered audio.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavMode {
    /// IEEE float32 samples written raw (no normalisation).
    Float32,
    /// Peak-normalised to -1 dBFS, then rounded to 16-bit PCM.
    Pcm16,
}

const MINUS_ONE_DBFS: f64 = 0.8912509381337456; // 10^(-1/20)

/// Write a mono RIFF/WAVE file.
pub fn render_wav(samples: &[f64], fs: f64, path: &Path, mode: WavMode) -> Result<()> {
    if samples.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument(
            "audio contains non-finite samples".into(),
        ));
    }
    let sample_rate = fs.round() as u32;
    let mut out = BufWriter::new(File::create(path)?);
    match mode {
        WavMode::Float32 => {
            let data_len = (samples.len() * 4) as u32;
            write_header(&mut out, 3, 32, sample_rate, data_len, true)?;
            for &s in samples {
                out.write_all(&(s as f32).to_le_bytes())?;
            }
        }
        WavMode::Pcm16 => {
            let peak = samples.iter().fold(0.0f64, |acc, &s| acc.max(s.abs()));
            let scale = if peak > 0.0 {
                MINUS_ONE_DBFS / peak
            } else {
                0.0
            };
            let data_len = (samples.len() * 2) as u32;
            write_header(&mut out, 1, 16, sample_rate, data_len, false)?;
            for &s in samples {
                let v = (s * scale * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
                out.write_all(&v.to_le_bytes())?;
            }
        }
    }
    out.flush()?;
    Ok(())
}

fn write_header<W: Write>(
    out: &mut W,
    format_tag: u16,
    bits: u16,
    sample_rate: u32,
    data_len: u32,
    with_fact: bool,
) -> Result<()> {
    let block_align = bits / 8; // mono
    let byte_rate = sample_rate * block_align as u32;
    let fact_len = if with_fact { 12 } else { 0 };
    let riff_len = 4 + 24 + fact_len + 8 + data_len;
    out.write_all(b"RIFF")?;
    out.write_all(&riff_len.to_le_bytes())?;
    out.write_all(b"WAVE")?;
    out.write_all(b"fmt ")?;
    out.write_all(&16u32.to_le_bytes())?;
    out.write_all(&format_tag.to_le_bytes())?;
    out.write_all(&1u16.to_le_bytes())?; // mono
    out.write_all(&sample_rate.to_le_bytes())?;
    out.write_all(&byte_rate.to_le_bytes())?;
    out.write_all(&block_align.to_le_bytes())?;
    out.write_all(&bits.to_le_bytes())?;
    if with_fact {
        out.write_all(b"fact")?;
        out.write_all(&4u32.to_le_bytes())?;
        out.write_all(&(data_len / block_align as u32).to_le_bytes())?;
    }
    out.write_all(b"data")?;
    out.write_all(&data_len.to_le_bytes())?;
    Ok(())
}

/// Read a mono float32 WAV written by [`render_wav`]; returns the samples and
/// the sample rate.
pub fn read_wav_f32(path: &Path) -> Result<(Vec<f32>, u32)> {
    let mut bytes = Vec::new();
    File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 44 || &bytes[..4] != b"RIFF" || &bytes[8..12] != b"WAVE" {
        return Err(Error::Format("not a RIFF/WAVE file".into()));
    }
    let mut pos = 12;
    let mut sample_rate = 0u32;
    let mut format_tag = 0u16;
    let mut bits = 0u16;
    while pos + 8 <= bytes.len() {
        let id = &bytes[pos..pos + 4];
        let len = u32::from_le_bytes(bytes[pos + 4..pos + 8].try_into().unwrap()) as usize;
        let body = pos + 8;
        match id {
            b"fmt " => {
                format_tag = u16::from_le_bytes(bytes[body..body + 2].try_into().unwrap());
                sample_rate = u32::from_le_bytes(bytes[body + 4..body + 8].try_into().unwrap());
                bits = u16::from_le_bytes(bytes[body + 14..body + 16].try_into().unwrap());
            }
            b"data" => {
                if format_tag != 3 || bits != 32 {
                    return Err(Error::Format(
                        "expected IEEE float32 data for read-back".into(),
                    ));
                }
                let mut samples = Vec::with_capacity(len / 4);
                for chunk in bytes[body..body + len].chunks_exact(4) {
                    samples.push(f32::from_le_bytes(chunk.try_into().unwrap()));
                }
                return Ok((samples, sample_rate));
            }
            _ => {}
        }
        pos = body + len + (len & 1);
    }
    Err(Error::Format("no data chunk found".into()))
}

/// Periodic Hann window of the given length.
fn hann(len: usize) -> Vec<f64> {
    (0..len)
        .map(|j| 0.5 * (1.0 - (2.0 * std::f64::consts::PI * j as f64 / len as f64).cos()))
        .collect()
}

/// Magnitude STFT frames of a signal (periodic Hann window, one-sided bins).
pub fn stft_magnitudes(
    signal: &[f64],
    window_len: usize,
    hop: usize,
) -> Result<Vec<(usize, Vec<f64>)>> {
    if window_len == 0 || hop == 0 {
        return Err(Error::InvalidArgument(
            "window and hop must be positive".into(),
        ));
    }
    if window_len > signal.len() {
        return Err(Error::InvalidArgument(format!(
            "window of {window_len} samples exceeds signal length {}",
            signal.len()
        )));
    }
    let window = hann(window_len);
    let mut planner = FftPlanner::new();
    let fft = planner.plan_fft_forward(window_len);
    let bins = window_len / 2 + 1;
    let mut frames = Vec::new();
    let mut start = 0;
    while start + window_len <= signal.len() {
        let mut buf: Vec<Complex<f64>> = (0..window_len)
            .map(|j| Complex::new(signal[start + j] * window[j], 0.0))
            .collect();
        fft.process(&mut buf);
        frames.push((start, buf[..bins].iter().map(|c| c.norm()).collect()));
        start += hop;
    }
    Ok(frames)
}

/// Export the magnitude STFT as CSV: a header row of bin frequencies, then
/// one row per frame led by the frame-centre timestamp.
pub fn spectrogram_csv(
    signal: &[f64],
    fs: f64,
    window_len: usize,
    hop: usize,
    path: &Path,
) -> Result<()> {
    let frames = stft_magnitudes(signal, window_len, hop)?;
    let bins = window_len / 2 + 1;
    let mut out = BufWriter::new(File::create(path)?);
    let mut header = String::from("time_s");
    for b in 0..bins {
        header.push_str(&format!(",{}", b as f64 * fs / window_len as f64));
    }
    header.push('\n');
    out.write_all(header.as_bytes())?;
    for (start, mags) in frames {
        let t = (start as f64 + window_len as f64 / 2.0) / fs;
        let mut row = format!("{t}");
        for m in mags {
            row.push_str(&format!(",{m:e}"));
        }
        row.push('\n');
        out.write_all(row.as_bytes())?;
    }
    out.flush()?;
    Ok(())
}

/// Windowed-DFT magnitude of a signal segment at one frequency.
fn windowed_magnitude(segment: &[f64], window: &[f64], fs: f64, freq: f64) -> f64 {
    let step = 2.0 * std::f64::consts::PI * freq / fs;
    let mut re = 0.0;
    let mut im = 0.0;
    for (j, (&s, &w)) in segment.iter().zip(window).enumerate() {
        let phase = step * j as f64;
        let v = s * w;
        re += v * phase.cos();
        im -= v * phase.sin();
    }
    (re * re + im * im).sqrt()
}

/// Estimate the dominant frequency inside a band by a coarse-to-fine scan of
/// the windowed DFT magnitude. Deterministic and resolution-independent of
/// the segment length.
pub fn estimate_fundamental(segment: &[f64], fs: f64, band_lo: f64, band_hi: f64) -> Result<f64> {
    if segment.len() < 16 {
        return Err(Error::InvalidArgument(
            "segment too short for frequency estimation".into(),
        ));
    }
    if !(band_lo > 0.0 && band_hi > band_lo && band_hi < fs / 2.0) {
        return Err(Error::InvalidArgument(format!(
            "invalid search band [{band_lo}, {band_hi}] at fs = {fs}"
        )));
    }
    let window = hann(segment.len());
    let mut lo = band_lo;
    let mut hi = band_hi;
    let mut best = lo;
    for &step in &[1.0, 0.1, 0.01] {
        let mut best_mag = f64::NEG_INFINITY;
        let mut f = lo;
        while f <= hi {
            let mag = windowed_magnitude(segment, &window, fs, f);
            if mag > best_mag {
                best_mag = mag;
                best = f;
            }
            f += step;
        }
        lo = (best - 2.0 * step).max(band_lo);
        hi = (best + 2.0 * step).min(band_hi);
    }
    Ok(best)
}
