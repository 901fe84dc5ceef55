//! Log mel-filterbank energy (LFBE) frontend.
//!
//! Mono PCM at 16 kHz is framed into 25 ms windows with a 10 ms shift,
//! Hann-windowed, zero-padded to a 512-point DFT, pushed through 64
//! area-normalized triangular mel filters (HTK mel scale, 60 Hz lower
//! edge), and floored natural-log compressed. The synthetic corpus is
//! generated directly in this feature space; this module is the ingestion
//! path for real audio.

use alloc::vec;
use alloc::vec::Vec;
use num_traits::Float;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

/// Mono audio samples in [-1, 1].
#[derive(Debug, Clone)]
pub struct AudioBuffer {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

/// Frontend configuration. The frame geometry (25 ms / 10 ms at 16 kHz)
/// and DFT size are fixed; filterbank knobs are adjustable.
#[derive(Debug, Clone)]
pub struct LfbeConfig {
    pub n_mels: usize,
    pub fmin_hz: f64,
    /// Upper filter edge; defaults to Nyquist.
    pub fmax_hz: Option<f64>,
    pub energy_floor: f64,
}

impl Default for LfbeConfig {
    fn default() -> Self {
        LfbeConfig { n_mels: N_MELS, fmin_hz: 60.0, fmax_hz: None, energy_floor: 1e-10 }
    }
}

pub const SAMPLE_RATE: u32 = 16_000;
pub const FRAME_LEN: usize = 400; // 25 ms at 16 kHz
pub const FRAME_SHIFT: usize = 160; // 10 ms
pub const FRAME_SHIFT_MS: u32 = 10;
pub const N_FFT: usize = 512;
pub const N_MELS: usize = 64;

/// A `frames x n_mels` matrix of log mel energies.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    data: Vec<f32>,
    n_frames: usize,
    n_mels: usize,
}

impl FeatureMatrix {
    pub fn new(n_frames: usize, n_mels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != n_frames * n_mels {
            return Err(CoreError::Dimension {
                op: "feature_matrix",
                detail: alloc::format!(
                    "{} values for {n_frames}x{n_mels} matrix",
                    data.len()
                ),
            });
        }
        Ok(FeatureMatrix { data, n_frames, n_mels })
    }

    pub fn n_frames(&self) -> usize {
        self.n_frames
    }

    pub fn n_mels(&self) -> usize {
        self.n_mels
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.n_mels..(t + 1) * self.n_mels]
    }

    /// View as a `[n_frames, n_mels]` tensor in the requested precision.
    pub fn to_tensor<T: Float>(&self) -> Tensor<T> {
        Tensor::new(
            vec![self.n_frames, self.n_mels],
            self.data.iter().map(|&v| T::from(v).expect("cast")).collect(),
        )
        .expect("shape")
    }

    /// Copies a frame range `[start, end)` into a new matrix.
    pub fn slice_frames(&self, start: usize, end: usize) -> FeatureMatrix {
        FeatureMatrix {
            data: self.data[start * self.n_mels..end * self.n_mels].to_vec(),
            n_frames: end - start,
            n_mels: self.n_mels,
        }
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * Float::log10(1.0 + hz / 700.0)
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (Float::powf(10.0f64, mel / 2595.0) - 1.0)
}

/// Triangular mel filterbank over the positive DFT bins, each filter
/// scaled to unit area (2 / bandwidth).
pub struct MelFilterbank {
    /// `n_mels x (N_FFT/2 + 1)` weights, row-major.
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
    n_mels: usize,
}

impl MelFilterbank {
    pub fn new(cfg: &LfbeConfig, sample_rate: u32) -> Self {
        let n_bins = N_FFT / 2 + 1;
        let fmax = cfg.fmax_hz.unwrap_or(sample_rate as f64 / 2.0);
        let mel_lo = hz_to_mel(cfg.fmin_hz);
        let mel_hi = hz_to_mel(fmax);
        let edges_hz: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0f64; cfg.n_mels * n_bins];
        let bin_hz = sample_rate as f64 / N_FFT as f64;
        for m in 0..cfg.n_mels {
            let (lo, center, hi) = (edges_hz[m], edges_hz[m + 1], edges_hz[m + 2]);
            let norm = 2.0 / (hi - lo);
            for k in 0..n_bins {
                let f = k as f64 * bin_hz;
                let w = if f <= lo || f >= hi {
                    0.0
                } else if f <= center {
                    (f - lo) / (center - lo)
                } else {
                    (hi - f) / (hi - center)
                };
                weights[m * n_bins + k] = w * norm;
            }
        }
        MelFilterbank {
            weights,
            centers_hz: edges_hz[1..=cfg.n_mels].to_vec(),
            n_mels: cfg.n_mels,
        }
    }

    /// Center frequencies of each filter in Hz.
    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn apply(&self, power: &[f64], out: &mut [f64]) {
        let n_bins = power.len();
        for m in 0..self.n_mels {
            let row = &self.weights[m * n_bins..(m + 1) * n_bins];
            out[m] = row.iter().zip(power).map(|(&w, &p)| w * p).sum();
        }
    }
}

/// In-place iterative radix-2 FFT (decimation in time). Length must be a
/// power of two.
pub fn fft_in_place(re: &mut [f64], im: &mut [f64]) {
    let n = re.len();
    debug_assert!(n.is_power_of_two() && im.len() == n);
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let mut len = 2;
    while len <= n {
        let ang = -2.0 * core::f64::consts::PI / len as f64;
        let (wr, wi) = (Float::cos(ang), Float::sin(ang));
        let mut i = 0;
        while i < n {
            let (mut cr, mut ci) = (1.0f64, 0.0f64);
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr, vi) = (
                    re[i + k + len / 2] * cr - im[i + k + len / 2] * ci,
                    re[i + k + len / 2] * ci + im[i + k + len / 2] * cr,
                );
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
}

fn hann_window(len: usize) -> Vec<f64> {
    (0..len)
        .map(|n| 0.5 * (1.0 - Float::cos(2.0 * core::f64::consts::PI * n as f64 / len as f64)))
        .collect()
}

/// Number of analysis frames for `n` samples, or an error when the input
/// is shorter than one frame.
pub fn frame_count(n_samples: usize) -> Result<usize> {
    if n_samples < FRAME_LEN {
        return Err(CoreError::EmptyAudio);
    }
    Ok((n_samples - FRAME_LEN) / FRAME_SHIFT + 1)
}

/// Computes the LFBE feature matrix for a 16 kHz mono buffer.
pub fn compute_lfbe(audio: &AudioBuffer, cfg: &LfbeConfig) -> Result<FeatureMatrix> {
    if audio.sample_rate != SAMPLE_RATE {
        return Err(CoreError::ResampleRequired { got: audio.sample_rate, expected: SAMPLE_RATE });
    }
    let n_frames = frame_count(audio.samples.len())?;
    let window = hann_window(FRAME_LEN);
    let fbank = MelFilterbank::new(cfg, audio.sample_rate);
    let n_bins = N_FFT / 2 + 1;

    let mut out = Vec::with_capacity(n_frames * cfg.n_mels);
    let mut re = vec![0.0f64; N_FFT];
    let mut im = vec![0.0f64; N_FFT];
    let mut power = vec![0.0f64; n_bins];
    let mut mel = vec![0.0f64; cfg.n_mels];
    for t in 0..n_frames {
        let frame = &audio.samples[t * FRAME_SHIFT..t * FRAME_SHIFT + FRAME_LEN];
        for i in 0..FRAME_LEN {
            re[i] = frame[i] as f64 * window[i];
        }
        re[FRAME_LEN..].fill(0.0);
        im.fill(0.0);
        fft_in_place(&mut re, &mut im);
        for k in 0..n_bins {
            power[k] = re[k] * re[k] + im[k] * im[k];
        }
        fbank.apply(&power, &mut mel);
        for &e in mel.iter() {
            out.push(Float::ln(e.max(cfg.energy_floor)) as f32);
        }
    }
    let m = FeatureMatrix::new(n_frames, cfg.n_mels, out)?;
    if !m.data().iter().all(|v| v.is_finite()) {
        return Err(CoreError::NonFinite { op: "compute_lfbe" });
    }
    Ok(m)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(freq: f64, seconds: f64) -> AudioBuffer {
        let n = (seconds * SAMPLE_RATE as f64) as usize;
        AudioBuffer {
            samples: (0..n)
                .map(|i| {
                    Float::sin(2.0 * core::f64::consts::PI * freq * i as f64 / SAMPLE_RATE as f64)
                        as f32
                })
                .collect(),
            sample_rate: SAMPLE_RATE,
        }
    }

    #[test]
    fn silence_gives_all_floor_values() {
        let audio = AudioBuffer { samples: vec![0.0; 16_000], sample_rate: SAMPLE_RATE };
        let m = compute_lfbe(&audio, &LfbeConfig::default()).unwrap();
        assert_eq!(m.n_frames(), 98);
        let floor = (1e-10f64).ln() as f32;
        assert!(m.data().iter().all(|&v| v == floor));
    }

    #[test]
    fn frame_count_formula() {
        assert_eq!(frame_count(16_000).unwrap(), 98);
        assert_eq!(frame_count(400).unwrap(), 1);
        assert!(matches!(frame_count(399), Err(CoreError::EmptyAudio)));
    }

    #[test]
    fn rejects_other_sample_rates() {
        let audio = AudioBuffer { samples: vec![0.0; 8000], sample_rate: 8000 };
        assert!(matches!(
            compute_lfbe(&audio, &LfbeConfig::default()),
            Err(CoreError::ResampleRequired { got: 8000, expected: 16_000 })
        ));
    }

    /// Direct O(N^2) DFT, independent of the radix-2 implementation.
    fn dft_power_reference(frame: &[f64]) -> Vec<f64> {
        let n = N_FFT;
        (0..n / 2 + 1)
            .map(|k| {
                let (mut re, mut im) = (0.0, 0.0);
                for (i, &x) in frame.iter().enumerate() {
                    let ang = -2.0 * core::f64::consts::PI * k as f64 * i as f64 / n as f64;
                    re += x * Float::cos(ang);
                    im += x * Float::sin(ang);
                }
                re * re + im * im
            })
            .collect()
    }

    #[test]
    fn fft_matches_naive_dft() {
        let mut state = 0x1234u64;
        let frame: Vec<f64> = (0..FRAME_LEN)
            .map(|_| (crate::rng::splitmix64(&mut state) >> 11) as f64 / (1u64 << 53) as f64 - 0.5)
            .collect();
        let mut padded = frame.clone();
        padded.resize(N_FFT, 0.0);
        let mut re = padded.clone();
        let mut im = vec![0.0; N_FFT];
        fft_in_place(&mut re, &mut im);
        let want = dft_power_reference(&frame);
        for k in 0..want.len() {
            let got = re[k] * re[k] + im[k] * im[k];
            assert!((got - want[k]).abs() < 1e-6 * (1.0 + want[k]), "bin {k}");
        }
    }

    #[test]
    fn sine_energy_peaks_at_nearest_mel_center() {
        let cfg = LfbeConfig::default();
        let audio = sine(1000.0, 0.5);
        let m = compute_lfbe(&audio, &cfg).unwrap();
        let fbank = MelFilterbank::new(&cfg, SAMPLE_RATE);
        let expected_bin = fbank
            .centers_hz()
            .iter()
            .enumerate()
            .min_by(|a, b| (a.1 - 1000.0).abs().total_cmp(&(b.1 - 1000.0).abs()))
            .unwrap()
            .0;
        for t in 0..m.n_frames() {
            let row = m.row(t);
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.total_cmp(b.1))
                .unwrap()
                .0;
            assert!(
                (peak as isize - expected_bin as isize).abs() <= 1,
                "frame {t}: peak bin {peak}, expected near {expected_bin}"
            );
        }
    }

    #[test]
    fn shift_by_one_hop_shifts_rows() {
        let audio = sine(430.0, 0.3);
        let mut shifted = audio.clone();
        shifted.samples.drain(..FRAME_SHIFT);
        let a = compute_lfbe(&audio, &LfbeConfig::default()).unwrap();
        let b = compute_lfbe(&shifted, &LfbeConfig::default()).unwrap();
        for t in 0..b.n_frames() {
            for (x, y) in a.row(t + 1).iter().zip(b.row(t)) {
                assert!((x - y).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn scaling_audio_adds_two_log_c() {
        let audio = sine(700.0, 0.2);
        let c = 3.5f32;
        let scaled = AudioBuffer {
            samples: audio.samples.iter().map(|&s| s * c).collect(),
            sample_rate: SAMPLE_RATE,
        };
        let a = compute_lfbe(&audio, &LfbeConfig::default()).unwrap();
        let b = compute_lfbe(&scaled, &LfbeConfig::default()).unwrap();
        let floor = (1e-10f64).ln() as f32;
        let shift = 2.0 * (c as f64).ln() as f32;
        for (x, y) in a.data().iter().zip(b.data()) {
            // Homogeneity holds wherever neither side is floored.
            if *x > floor + 1.0 && *y > floor + 1.0 {
                assert!((y - x - shift).abs() < 1e-4, "{x} {y}");
            }
        }
    }
}
