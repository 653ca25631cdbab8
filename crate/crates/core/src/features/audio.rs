//! Audio features on a 16 kHz mono front end: MFCC, chroma, tonnetz,
//! spectral summary statistics and an onset tempogram.

use std::f64::consts::PI;
use std::path::Path;

use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{dct_matrix, FeatureError, FeatureVector};

const LOG_FLOOR: f64 = 1e-10;
const CHROMA_MIN_HZ: f64 = 32.7;
const ONSET_SMOOTH: usize = 5;

/// Mono samples in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub sample_rate: u32,
    pub samples: Vec<f64>,
}

impl AudioClip {
    pub fn new(sample_rate: u32, samples: Vec<f64>) -> Result<Self, FeatureError> {
        if samples.is_empty() {
            return Err(FeatureError::EmptyClip);
        }
        let samples = samples
            .into_iter()
            .map(|s| if s.is_nan() { 0.0 } else { s.clamp(-1.0, 1.0) })
            .collect();
        Ok(Self {
            sample_rate,
            samples,
        })
    }

    /// Reads a WAV file, averages channels and resamples to `target_rate`.
    pub fn load_wav(path: &Path, target_rate: u32) -> Result<Self, FeatureError> {
        let decode = |msg: String| FeatureError::Decode {
            path: path.display().to_string(),
            msg,
        };
        let mut reader = hound::WavReader::open(path).map_err(|e| decode(e.to_string()))?;
        let spec = reader.spec();
        let interleaved: Vec<f64> = match spec.sample_format {
            hound::SampleFormat::Float => reader
                .samples::<f32>()
                .map(|s| s.map(f64::from))
                .collect::<Result<_, _>>()
                .map_err(|e| decode(e.to_string()))?,
            hound::SampleFormat::Int => {
                let scale = (1u64 << (spec.bits_per_sample - 1)) as f64;
                reader
                    .samples::<i32>()
                    .map(|s| s.map(|v| f64::from(v) / scale))
                    .collect::<Result<_, _>>()
                    .map_err(|e| decode(e.to_string()))?
            }
        };
        let ch = spec.channels.max(1) as usize;
        let mono: Vec<f64> = interleaved
            .chunks(ch)
            .map(|f| f.iter().sum::<f64>() / f.len() as f64)
            .collect();
        AudioClip::new(spec.sample_rate, mono)?.resample(target_rate)
    }

    /// Linear-interpolation resampling.
    pub fn resample(&self, target_rate: u32) -> Result<Self, FeatureError> {
        if target_rate == self.sample_rate {
            return Ok(self.clone());
        }
        let ratio = self.sample_rate as f64 / target_rate as f64;
        let n = ((self.samples.len() as f64) / ratio).round().max(1.0) as usize;
        let last = self.samples.len() - 1;
        let out = (0..n)
            .map(|i| {
                let pos = i as f64 * ratio;
                let i0 = (pos.floor() as usize).min(last);
                let i1 = (i0 + 1).min(last);
                let f = pos - i0 as f64;
                self.samples[i0] * (1.0 - f) + self.samples[i1] * f
            })
            .collect();
        AudioClip::new(target_rate, out)
    }

    pub fn duration_secs(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }
}

/// Symmetric Hann window.
pub fn hann(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![1.0];
    }
    (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / (n - 1) as f64).cos())
        .collect()
}

pub fn frame_count(len: usize, n_fft: usize, hop: usize) -> usize {
    if len < n_fft {
        0
    } else {
        1 + (len - n_fft) / hop
    }
}

/// Windowed power half-spectrum per frame, `frames x (n_fft/2 + 1)`.
pub fn stft_power(clip: &AudioClip, n_fft: usize, hop: usize) -> Result<Vec<Vec<f64>>, FeatureError> {
    let frames = frame_count(clip.samples.len(), n_fft, hop);
    if frames == 0 {
        return Err(FeatureError::ClipTooShort {
            samples: clip.samples.len(),
            n_fft,
        });
    }
    let window = hann(n_fft);
    let fft = FftPlanner::<f64>::new().plan_fft_forward(n_fft);
    let mut buf = vec![Complex::new(0.0, 0.0); n_fft];
    let mut out = Vec::with_capacity(frames);
    for t in 0..frames {
        let frame = &clip.samples[t * hop..t * hop + n_fft];
        for ((b, &x), &w) in buf.iter_mut().zip(frame).zip(&window) {
            *b = Complex::new(x * w, 0.0);
        }
        fft.process(&mut buf);
        out.push(buf[..=n_fft / 2].iter().map(|c| c.norm_sqr()).collect());
    }
    Ok(out)
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-mel filters spanning `0..sr/2`, one row per band.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Vec<Vec<f64>> {
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let bin_hz = sample_rate as f64 / n_fft as f64;
    (0..n_mels)
        .map(|m| {
            let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..=n_fft / 2)
                .map(|k| {
                    let f = k as f64 * bin_hz;
                    let up = (f - lo) / (mid - lo);
                    let down = (hi - f) / (hi - mid);
                    up.min(down).max(0.0)
                })
                .collect()
        })
        .collect()
}

/// Pitch class of a frequency, C = 0, with A4 = 440 Hz.
pub fn pitch_class(f: f64) -> usize {
    let semis = (12.0 * (f / 440.0).log2()).round() as i64;
    (semis + 9).rem_euclid(12) as usize
}

/// 6 x 12 tonal-centroid projection: fifths, minor thirds, major thirds.
pub fn tonnetz_matrix() -> [[f64; 12]; 6] {
    let mut m = [[0.0; 12]; 6];
    for c in 0..12 {
        let c_f = c as f64;
        m[0][c] = (c_f * 7.0 * PI / 6.0).sin();
        m[1][c] = (c_f * 7.0 * PI / 6.0).cos();
        m[2][c] = (c_f * 3.0 * PI / 2.0).sin();
        m[3][c] = (c_f * 3.0 * PI / 2.0).cos();
        m[4][c] = 0.5 * (c_f * 2.0 * PI / 3.0).sin();
        m[5][c] = 0.5 * (c_f * 2.0 * PI / 3.0).cos();
    }
    m
}

/// Tonal centroid of one L1-normalized chroma frame.
pub fn tonnetz_projection(chroma: &[f64]) -> [f64; 6] {
    let s: f64 = chroma.iter().sum();
    let mut out = [0.0; 6];
    if s <= 0.0 {
        return out;
    }
    for (row, o) in tonnetz_matrix().iter().zip(out.iter_mut()) {
        *o = row.iter().zip(chroma).map(|(a, c)| a * c / s).sum();
    }
    out
}

fn mean_rows(rows: &[Vec<f64>], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; width];
    for r in rows {
        for (o, v) in out.iter_mut().zip(r) {
            *o += v;
        }
    }
    let n = rows.len().max(1) as f64;
    out.iter_mut().for_each(|o| *o /= n);
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AudioFeatureConfig {
    pub sample_rate: u32,
    pub n_fft: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub n_mfcc: usize,
    pub rolloff: f64,
    pub tempo_window: usize,
}

impl Default for AudioFeatureConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            n_fft: 2048,
            hop: 512,
            n_mels: 128,
            n_mfcc: 13,
            rolloff: 0.85,
            tempo_window: 384,
        }
    }
}

/// Spectrogram plus the raw frames it was computed from.
struct Analysis<'a> {
    clip: &'a AudioClip,
    power: Vec<Vec<f64>>,
}

impl AudioFeatureConfig {
    pub fn schema_id(&self) -> String {
        format!(
            "audio/v1:sr{}:nfft{}:hop{}:mel{}:mfcc{}:rolloff{}:tempo{}",
            self.sample_rate, self.n_fft, self.hop, self.n_mels, self.n_mfcc, self.rolloff, self.tempo_window
        )
    }

    pub fn len(&self) -> usize {
        self.n_mfcc + 12 + 6 + 5 + self.tempo_window
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    fn analyze<'a>(&self, clip: &'a AudioClip) -> Result<Analysis<'a>, FeatureError> {
        Ok(Analysis {
            clip,
            power: stft_power(clip, self.n_fft, self.hop)?,
        })
    }

    fn bin_hz(&self, clip: &AudioClip) -> f64 {
        clip.sample_rate as f64 / self.n_fft as f64
    }

    pub fn mfcc_mean(&self, clip: &AudioClip) -> Result<FeatureVector, FeatureError> {
        Ok(self.mfcc_from(&self.analyze(clip)?))
    }

    fn mfcc_from(&self, a: &Analysis) -> FeatureVector {
        let bank = mel_filterbank(a.clip.sample_rate, self.n_fft, self.n_mels);
        let dct = dct_matrix(self.n_mels);
        let rows: Vec<Vec<f64>> = a
            .power
            .iter()
            .map(|p| {
                let logmel: Vec<f64> = bank
                    .iter()
                    .map(|f| f.iter().zip(p).map(|(w, x)| w * x).sum::<f64>().max(LOG_FLOOR).ln())
                    .collect();
                dct[..self.n_mfcc]
                    .iter()
                    .map(|b| b.iter().zip(&logmel).map(|(a, l)| a * l).sum())
                    .collect()
            })
            .collect();
        FeatureVector::new(mean_rows(&rows, self.n_mfcc), format!("mfcc{}", self.n_mfcc))
    }

    fn chroma_frames(&self, a: &Analysis) -> Vec<Vec<f64>> {
        let bin_hz = self.bin_hz(a.clip);
        let classes: Vec<Option<usize>> = (0..=self.n_fft / 2)
            .map(|k| {
                let f = k as f64 * bin_hz;
                (f >= CHROMA_MIN_HZ).then(|| pitch_class(f))
            })
            .collect();
        a.power
            .iter()
            .map(|p| {
                let mut c = vec![0.0; 12];
                for (pc, x) in classes.iter().zip(p) {
                    if let Some(pc) = pc {
                        c[*pc] += x;
                    }
                }
                super::l2_normalize(&mut c);
                c
            })
            .collect()
    }

    pub fn chroma_mean(&self, clip: &AudioClip) -> Result<FeatureVector, FeatureError> {
        let a = self.analyze(clip)?;
        Ok(FeatureVector::new(mean_rows(&self.chroma_frames(&a), 12), "chroma12"))
    }

    fn tonnetz_from(&self, chroma: &[Vec<f64>]) -> FeatureVector {
        let rows: Vec<Vec<f64>> = chroma.iter().map(|c| tonnetz_projection(c).to_vec()).collect();
        FeatureVector::new(mean_rows(&rows, 6), "tonnetz6")
    }

    pub fn tonnetz_mean(&self, clip: &AudioClip) -> Result<FeatureVector, FeatureError> {
        let a = self.analyze(clip)?;
        Ok(self.tonnetz_from(&self.chroma_frames(&a)))
    }

    /// Mean centroid, bandwidth, rolloff, RMS and zero-crossing rate.
    pub fn spectral_summary(&self, clip: &AudioClip) -> Result<FeatureVector, FeatureError> {
        Ok(self.spectral_from(&self.analyze(clip)?))
    }

    fn spectral_from(&self, a: &Analysis) -> FeatureVector {
        let bin_hz = self.bin_hz(a.clip);
        let rows: Vec<Vec<f64>> = a
            .power
            .iter()
            .enumerate()
            .map(|(t, p)| {
                let mag: Vec<f64> = p.iter().map(|x| x.sqrt()).collect();
                let total: f64 = mag.iter().sum();
                let (centroid, bandwidth) = if total > 0.0 {
                    let c = mag.iter().enumerate().map(|(k, m)| k as f64 * bin_hz * m).sum::<f64>() / total;
                    let var = mag
                        .iter()
                        .enumerate()
                        .map(|(k, m)| (k as f64 * bin_hz - c).powi(2) * m)
                        .sum::<f64>()
                        / total;
                    (c, var.sqrt())
                } else {
                    (0.0, 0.0)
                };
                let energy: f64 = p.iter().sum();
                let rolloff = if energy > 0.0 {
                    let target = self.rolloff * energy;
                    let mut acc = 0.0;
                    let k = p
                        .iter()
                        .position(|x| {
                            acc += x;
                            acc >= target
                        })
                        .unwrap_or(p.len() - 1);
                    k as f64 * bin_hz
                } else {
                    0.0
                };
                let frame = &a.clip.samples[t * self.hop..t * self.hop + self.n_fft];
                let rms = (frame.iter().map(|x| x * x).sum::<f64>() / frame.len() as f64).sqrt();
                let crossings = frame
                    .windows(2)
                    .filter(|w| (w[0] >= 0.0) != (w[1] >= 0.0))
                    .count();
                let zcr = crossings as f64 / frame.len() as f64;
                vec![centroid, bandwidth, rolloff, rms, zcr]
            })
            .collect();
        FeatureVector::new(mean_rows(&rows, 5), "spectral5")
    }

    /// Half-wave-rectified magnitude flux, frame 0 = 0.
    pub fn onset_envelope(&self, clip: &AudioClip) -> Result<Vec<f64>, FeatureError> {
        Ok(onset_from(&self.analyze(clip)?.power))
    }

    /// Lag-0-normalized autocorrelation of the onset envelope over sliding
    /// windows (stride 1), averaged. Short envelopes form one zero-padded window.
    pub fn tempogram_mean(&self, clip: &AudioClip) -> Result<FeatureVector, FeatureError> {
        Ok(self.tempogram_from(&self.analyze(clip)?))
    }

    fn tempogram_from(&self, a: &Analysis) -> FeatureVector {
        let w = self.tempo_window;
        let mut env = onset_from(&a.power);
        if env.len() < w {
            env.resize(w, 0.0);
        }
        let windows = env.len() - w + 1;
        let mut acc = vec![0.0; w];
        for s in 0..windows {
            let win = &env[s..s + w];
            let zero: f64 = win.iter().map(|x| x * x).sum();
            if zero <= 0.0 {
                continue;
            }
            for (lag, a) in acc.iter_mut().enumerate() {
                let r: f64 = win[..w - lag].iter().zip(&win[lag..]).map(|(x, y)| x * y).sum();
                *a += r / zero;
            }
        }
        acc.iter_mut().for_each(|a| *a /= windows as f64);
        FeatureVector::new(acc, format!("tempogram{w}"))
    }

    /// MFCC, chroma, tonnetz, spectral summary and tempogram concatenated.
    pub fn extract(&self, clip: &AudioClip) -> Result<FeatureVector, FeatureError> {
        let clip = clip.resample(self.sample_rate)?;
        let a = self.analyze(&clip)?;
        let chroma = self.chroma_frames(&a);
        let mut v = FeatureVector::concat(&[
            self.mfcc_from(&a),
            FeatureVector::new(mean_rows(&chroma, 12), "chroma12"),
            self.tonnetz_from(&chroma),
            self.spectral_from(&a),
            self.tempogram_from(&a),
        ]);
        v.schema_id = self.schema_id();
        Ok(v)
    }
}

/// Half-wave-rectified magnitude flux, lightly smoothed with a centered
/// Hann kernel so onsets span a few frames.
fn onset_from(power: &[Vec<f64>]) -> Vec<f64> {
    let mut flux = vec![0.0; power.len()];
    for t in 1..power.len() {
        flux[t] = power[t]
            .iter()
            .zip(&power[t - 1])
            .map(|(a, b)| (a.sqrt() - b.sqrt()).max(0.0))
            .sum();
    }
    let kernel = hann(ONSET_SMOOTH + 2);
    let kernel = &kernel[1..=ONSET_SMOOTH];
    let norm: f64 = kernel.iter().sum();
    let half = ONSET_SMOOTH / 2;
    (0..flux.len())
        .map(|t| {
            kernel
                .iter()
                .enumerate()
                .filter_map(|(j, k)| (t + j).checked_sub(half).and_then(|i| flux.get(i)).map(|f| f * k))
                .sum::<f64>()
                / norm
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Prng;

    const SR: u32 = 16_000;

    fn sine(f: f64, secs: f64, amp: f64) -> AudioClip {
        let n = (secs * SR as f64) as usize;
        AudioClip::new(
            SR,
            (0..n).map(|i| amp * (2.0 * PI * f * i as f64 / SR as f64).sin()).collect(),
        )
        .unwrap()
    }

    fn noise(n: usize, seed: u64, amp: f64) -> AudioClip {
        let mut r = Prng::new(seed);
        AudioClip::new(SR, (0..n).map(|_| amp * r.uniform(-1.0, 1.0)).collect()).unwrap()
    }

    fn silence(n: usize) -> AudioClip {
        AudioClip::new(SR, vec![0.0; n]).unwrap()
    }

    fn cfg() -> AudioFeatureConfig {
        AudioFeatureConfig::default()
    }

    #[test]
    fn empty_and_short_clips_error() {
        assert!(matches!(AudioClip::new(SR, vec![]), Err(FeatureError::EmptyClip)));
        let short = silence(100);
        assert!(matches!(stft_power(&short, 2048, 512), Err(FeatureError::ClipTooShort { .. })));
    }

    #[test]
    fn silence_spectrogram_is_zero() {
        let p = stft_power(&silence(5000), 2048, 512).unwrap();
        assert_eq!(p.len(), 1 + (5000 - 2048) / 512);
        assert!(p.iter().flatten().all(|&x| x == 0.0));
    }

    #[test]
    fn sine_peaks_at_expected_bin() {
        for f in [440.0, 1000.0, 3150.0] {
            let p = stft_power(&sine(f, 0.5, 0.8), 2048, 512).unwrap();
            let expected = (f * 2048.0 / SR as f64).round() as usize;
            for frame in &p {
                let arg = frame
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .unwrap()
                    .0;
                assert_eq!(arg, expected, "f={f}");
            }
        }
    }

    #[test]
    fn parseval_per_frame() {
        // sum |X_k|^2 over the full spectrum = N * sum (x w)^2
        let clip = noise(4096, 3, 0.5);
        let n = 2048;
        let w = hann(n);
        let p = stft_power(&clip, n, 512).unwrap();
        for (t, half) in p.iter().enumerate() {
            let full: f64 = half[0] + half[n / 2] + 2.0 * half[1..n / 2].iter().sum::<f64>();
            let frame = &clip.samples[t * 512..t * 512 + n];
            let direct: f64 = frame.iter().zip(&w).map(|(x, w)| (x * w).powi(2)).sum::<f64>() * n as f64;
            assert!((full - direct).abs() <= 1e-6 * direct, "{full} vs {direct}");
        }
    }

    #[test]
    fn silence_mfcc_from_floor() {
        let v = cfg().mfcc_mean(&silence(8000)).unwrap();
        let c0 = (128f64).sqrt() * LOG_FLOOR.ln();
        assert!((v.values[0] - c0).abs() < 1e-9);
        assert!(v.values[1..].iter().all(|x| x.abs() < 1e-9));
    }

    #[test]
    fn mfcc_time_reversal() {
        // length chosen so the frame grid tiles the clip exactly
        let n = 2048 + 512 * 30;
        let clip = noise(n, 11, 0.6);
        let mut rev = clip.clone();
        rev.samples.reverse();
        let a = cfg().mfcc_mean(&clip).unwrap();
        let b = cfg().mfcc_mean(&rev).unwrap();
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() < 1e-6, "{x} vs {y}");
        }
    }

    #[test]
    fn mfcc_amplitude_scaling_moves_only_c0() {
        let quiet = noise(16_000, 5, 0.05);
        let mut loud = quiet.clone();
        loud.samples.iter_mut().for_each(|s| *s *= 10.0);
        let a = cfg().mfcc_mean(&quiet).unwrap();
        let b = cfg().mfcc_mean(&loud).unwrap();
        let shift = (128f64).sqrt() * 100f64.ln();
        assert!((b.values[0] - a.values[0] - shift).abs() < 1e-6);
        for (x, y) in a.values[1..].iter().zip(&b.values[1..]) {
            assert!((x - y).abs() < 1e-6);
        }
    }

    #[test]
    fn chroma_octave_equivalence() {
        for f in [440.0, 880.0] {
            let v = cfg().chroma_mean(&sine(f, 0.5, 0.5)).unwrap();
            let arg = v
                .values
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            assert_eq!(arg, 9, "f={f}");
        }
        assert_eq!(pitch_class(261.63), 0);
        assert!(cfg().chroma_mean(&silence(4096)).unwrap().values.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn tonnetz_single_pitch_class_is_matrix_column() {
        for c in 0..12 {
            let mut chroma = vec![0.0; 12];
            chroma[c] = 1.0;
            let got = tonnetz_projection(&chroma);
            let cf = c as f64;
            let expected = [
                (cf * 7.0 * PI / 6.0).sin(),
                (cf * 7.0 * PI / 6.0).cos(),
                (cf * 3.0 * PI / 2.0).sin(),
                (cf * 3.0 * PI / 2.0).cos(),
                0.5 * (cf * 2.0 * PI / 3.0).sin(),
                0.5 * (cf * 2.0 * PI / 3.0).cos(),
            ];
            for (g, e) in got.iter().zip(expected) {
                assert!((g - e).abs() < 1e-12);
                assert!(g.abs() <= 1.0);
            }
        }
        assert!(cfg().tonnetz_mean(&silence(4096)).unwrap().values.iter().all(|&x| x == 0.0));
        let v = cfg().tonnetz_mean(&noise(8000, 1, 0.3)).unwrap();
        assert!(v.values.iter().all(|x| x.abs() <= 1.0));
    }

    #[test]
    fn constant_signal_rms_and_zcr() {
        let a = 0.3;
        let v = cfg().spectral_summary(&AudioClip::new(SR, vec![a; 6000]).unwrap()).unwrap();
        assert!((v.values[3] - a).abs() < 1e-12);
        assert_eq!(v.values[4], 0.0);
    }

    #[test]
    fn sine_centroid_and_zcr() {
        let f = 1000.0;
        let v = cfg().spectral_summary(&sine(f, 1.0, 0.7)).unwrap();
        let bin = SR as f64 / 2048.0;
        assert!((v.values[0] - f).abs() <= bin, "centroid {}", v.values[0]);
        let zcr = 2.0 * f / SR as f64;
        assert!((v.values[4] - zcr).abs() <= 0.02 * zcr, "zcr {}", v.values[4]);
    }

    #[test]
    fn white_noise_rolloff() {
        let v = cfg().spectral_summary(&noise(SR as usize * 2, 7, 0.5)).unwrap();
        let expected = 0.85 * SR as f64 / 2.0;
        assert!((v.values[2] - expected).abs() <= 0.05 * expected, "rolloff {}", v.values[2]);
    }

    #[test]
    fn tempogram_silence_and_click_track() {
        let c = cfg();
        let t = c.tempogram_mean(&silence(SR as usize * 2)).unwrap();
        assert_eq!(t.len(), 384);
        assert!(t.values.iter().all(|&x| x == 0.0));

        // 120 BPM: a sharp click and a decaying 1 kHz blip, every 0.5 s for 12 s
        let n = SR as usize * 12;
        let period = SR as usize / 2;
        let click = |k: usize| {
            if k < 64 {
                0.9 * (-(k as f64) / 16.0).exp() * if k % 2 == 0 { 1.0 } else { -1.0 }
            } else {
                0.0
            }
        };
        let blip = |k: usize| {
            let s = k as f64 / SR as f64;
            if s < 0.1 {
                0.9 * (-s / 0.03).exp() * (2.0 * PI * 1000.0 * s).sin()
            } else {
                0.0
            }
        };
        let expected = 0.5 * SR as f64 / c.hop as f64;
        let min_lag = c.n_fft / c.hop;
        for shape in [&click as &dyn Fn(usize) -> f64, &blip] {
            let samples: Vec<f64> = (0..n).map(|i| shape(i % period)).collect();
            let t = c.tempogram_mean(&AudioClip::new(SR, samples).unwrap()).unwrap();
            let max = t.values.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(t.values[0], max);
            let peak = (min_lag..t.len())
                .max_by(|&a, &b| t.values[a].partial_cmp(&t.values[b]).unwrap())
                .unwrap();
            assert!((peak as f64 - expected).abs() <= 1.0, "peak lag {peak}, expected {expected}");
        }
    }

    #[test]
    fn resample_keeps_duration() {
        let clip = noise(44_100, 2, 0.5);
        let clip = AudioClip {
            sample_rate: 44_100,
            ..clip
        };
        let r = clip.resample(16_000).unwrap();
        assert_eq!(r.samples.len(), 16_000);
        assert_eq!(r.samples[0], clip.samples[0]);
    }

    #[test]
    fn wav_roundtrip_stereo_is_averaged() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for _ in 0..100 {
            w.write_sample(16384i16).unwrap();
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
        let clip = AudioClip::load_wav(&path, 16_000).unwrap();
        assert_eq!(clip.samples.len(), 100);
        assert!(clip.samples.iter().all(|&s| (s - 0.25).abs() < 1e-12));
    }

    #[test]
    fn extract_is_finite_on_random_clips() {
        let c = cfg();
        for seed in 0..5 {
            let mut r = Prng::new(seed);
            let n = 2048 + r.below(20_000);
            let amp = r.unit();
            let v = c.extract(&noise(n, seed, amp)).unwrap();
            assert_eq!(v.len(), c.len());
            assert!(v.is_finite());
        }
        let v = c.extract(&silence(3000)).unwrap();
        assert!(v.is_finite());
    }
}
