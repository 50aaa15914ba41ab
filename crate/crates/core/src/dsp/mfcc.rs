use std::f64::consts::PI;
use std::sync::Arc;

use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// MFCC front-end parameters.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DspConfig {
    pub n_mfcc: usize,
    pub n_mels: usize,
    pub fft_size: usize,
    pub frame_len_s: f64,
    pub frame_hop_s: f64,
    pub mel_fmin_hz: f64,
    pub mel_fmax_hz: f64,
    pub pre_emphasis: f64,
    pub log_floor: f64,
    /// Per-utterance cepstral mean normalization.
    pub cmn: bool,
    /// Clips are zero-padded or cropped to this duration before featurization.
    pub clip_len_s: f64,
}

impl Default for DspConfig {
    fn default() -> Self {
        Self {
            n_mfcc: 40,
            n_mels: 64,
            fft_size: 512,
            frame_len_s: 0.025,
            frame_hop_s: 0.010,
            mel_fmin_hz: 20.0,
            mel_fmax_hz: 7600.0,
            pre_emphasis: 0.97,
            log_floor: 1e-10,
            cmn: false,
            clip_len_s: 1.0,
        }
    }
}

impl DspConfig {
    pub fn frame_len(&self) -> usize {
        (self.frame_len_s * f64::from(SAMPLE_RATE)).round() as usize
    }

    pub fn hop_len(&self) -> usize {
        (self.frame_hop_s * f64::from(SAMPLE_RATE)).round() as usize
    }

    pub fn clip_len(&self) -> usize {
        (self.clip_len_s * f64::from(SAMPLE_RATE)).round() as usize
    }

    /// Frames produced for a signal of `len` samples.
    pub fn frame_count(&self, len: usize) -> usize {
        let frame = self.frame_len();
        if len < frame {
            0
        } else {
            1 + (len - frame) / self.hop_len()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("dsp: {m}")));
        if self.n_mfcc == 0 || self.n_mfcc > self.n_mels {
            return bad("require 0 < n_mfcc <= n_mels");
        }
        if self.n_mels > self.fft_size / 2 + 1 {
            return bad("require n_mels <= fft_size/2 + 1");
        }
        if !(self.log_floor > 0.0) {
            return bad("log_floor must be positive");
        }
        if self.frame_len() == 0 || self.frame_len() > self.fft_size {
            return bad("frame length must be in 1..=fft_size samples");
        }
        if self.hop_len() == 0 {
            return bad("hop must be at least one sample");
        }
        if !(0.0 <= self.mel_fmin_hz && self.mel_fmin_hz < self.mel_fmax_hz) || self.mel_fmax_hz > f64::from(SAMPLE_RATE) / 2.0 {
            return bad("require 0 <= fmin < fmax <= nyquist");
        }
        if !(0.0..1.0).contains(&self.pre_emphasis) {
            return bad("pre_emphasis must be in [0, 1)");
        }
        if self.clip_len() < self.frame_len() {
            return bad("clip_len_s shorter than one frame");
        }
        Ok(())
    }
}

/// `T x D` matrix of cepstral coefficients.
#[derive(Clone, Debug, PartialEq)]
pub struct MfccSequence {
    frames: Array2<f32>,
    pub frame_len_s: f64,
    pub frame_hop_s: f64,
}

impl MfccSequence {
    pub fn new(frames: Array2<f32>, frame_len_s: f64, frame_hop_s: f64) -> Result<Self> {
        if frames.nrows() == 0 || frames.ncols() == 0 {
            return Err(Error::Shape("empty MFCC sequence".into()));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("MFCC sequence".into()));
        }
        Ok(Self { frames, frame_len_s, frame_hop_s })
    }

    pub fn frames(&self) -> &Array2<f32> {
        &self.frames
    }

    pub fn n_frames(&self) -> usize {
        self.frames.nrows()
    }

    pub fn n_coeffs(&self) -> usize {
        self.frames.ncols()
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

fn dct_scale(k: usize, n: usize) -> f64 {
    if k == 0 {
        (1.0 / n as f64).sqrt()
    } else {
        (2.0 / n as f64).sqrt()
    }
}

/// Orthonormal DCT-II of `x`, keeping the first `n_out` coefficients.
pub fn dct2_orthonormal(x: &[f64], n_out: usize) -> Vec<f64> {
    let n = x.len();
    (0..n_out)
        .map(|k| {
            let s: f64 = x.iter().enumerate().map(|(i, v)| v * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()).sum();
            dct_scale(k, n) * s
        })
        .collect()
}

/// Inverse of [`dct2_orthonormal`]; missing trailing coefficients are treated as zero.
pub fn idct2_orthonormal(coeffs: &[f64], n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| {
            coeffs.iter().enumerate().map(|(k, c)| dct_scale(k, n) * c * (PI * k as f64 * (2 * i + 1) as f64 / (2 * n) as f64).cos()).sum()
        })
        .collect()
}

struct MelFilter {
    first_bin: usize,
    weights: Vec<f64>,
}

/// Precomputed MFCC pipeline: pre-emphasis, Hann window, magnitude FFT,
/// HTK mel filterbank, log, orthonormal DCT-II.
pub struct MfccExtractor {
    cfg: DspConfig,
    window: Vec<f64>,
    filters: Vec<MelFilter>,
    dct: Array2<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl MfccExtractor {
    pub fn new(cfg: &DspConfig) -> Result<Self> {
        cfg.validate()?;
        let frame = cfg.frame_len();
        let window = (0..frame).map(|n| 0.5 - 0.5 * (2.0 * PI * n as f64 / frame as f64).cos()).collect();

        let n_bins = cfg.fft_size / 2 + 1;
        let mel_lo = hz_to_mel(cfg.mel_fmin_hz);
        let mel_hi = hz_to_mel(cfg.mel_fmax_hz);
        let edges: Vec<f64> =
            (0..cfg.n_mels + 2).map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (cfg.n_mels + 1) as f64)).collect();
        let bin_hz = f64::from(SAMPLE_RATE) / cfg.fft_size as f64;
        let filters = (0..cfg.n_mels)
            .map(|m| {
                let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
                let full: Vec<f64> = (0..n_bins).map(|b| triangle(b as f64 * bin_hz, lo, mid, hi)).collect();
                let first_bin = full.iter().position(|&w| w > 0.0).unwrap_or(0);
                let last_bin = full.iter().rposition(|&w| w > 0.0).map_or(first_bin, |l| l + 1);
                MelFilter { first_bin, weights: full[first_bin..last_bin].to_vec() }
            })
            .collect();

        let dct = Array2::from_shape_fn((cfg.n_mfcc, cfg.n_mels), |(k, i)| {
            dct_scale(k, cfg.n_mels) * (PI * k as f64 * (2 * i + 1) as f64 / (2 * cfg.n_mels) as f64).cos()
        });
        let fft = FftPlanner::new().plan_fft_forward(cfg.fft_size);
        Ok(Self { cfg: cfg.clone(), window, filters, dct, fft })
    }

    pub fn config(&self) -> &DspConfig {
        &self.cfg
    }

    /// Log mel energies, one row per frame.
    pub fn log_mel(&self, samples: &[f64]) -> Result<Array2<f64>> {
        let frame = self.cfg.frame_len();
        let hop = self.cfg.hop_len();
        let t = self.cfg.frame_count(samples.len());
        if t == 0 {
            return Err(Error::TooShort { len: samples.len(), frame });
        }
        let alpha = self.cfg.pre_emphasis;
        let emphasized: Vec<f64> =
            (0..samples.len()).map(|n| if n == 0 { samples[0] } else { samples[n] - alpha * samples[n - 1] }).collect();

        let mut out = Array2::zeros((t, self.cfg.n_mels));
        let mut buf = vec![Complex::new(0.0, 0.0); self.cfg.fft_size];
        let mut mag = vec![0.0; self.cfg.fft_size / 2 + 1];
        for (f, mut row) in out.rows_mut().into_iter().enumerate() {
            let start = f * hop;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            for (i, (c, w)) in buf.iter_mut().zip(&self.window).enumerate() {
                c.re = emphasized[start + i] * w;
            }
            self.fft.process(&mut buf);
            for (m, c) in mag.iter_mut().zip(&buf) {
                *m = c.norm();
            }
            for (v, filt) in row.iter_mut().zip(&self.filters) {
                let e: f64 = filt.weights.iter().zip(&mag[filt.first_bin..]).map(|(w, m)| w * m).sum();
                *v = e.max(self.cfg.log_floor).ln();
            }
        }
        Ok(out)
    }

    /// Full-precision MFCC matrix (`T x n_mfcc`).
    pub fn compute(&self, samples: &[f64]) -> Result<Array2<f64>> {
        let log_mel = self.log_mel(samples)?;
        let mut coeffs = log_mel.dot(&self.dct.t());
        if self.cfg.cmn {
            let mean = coeffs.mean_axis(ndarray::Axis(0)).expect("at least one frame");
            coeffs -= &mean;
        }
        Ok(coeffs)
    }

    pub fn mfcc(&self, w: &Waveform) -> Result<MfccSequence> {
        if w.sample_rate() != SAMPLE_RATE {
            return Err(Error::SampleRateMismatch(w.sample_rate(), SAMPLE_RATE));
        }
        let coeffs = self.compute(w.samples())?;
        MfccSequence::new(coeffs.mapv(|v| v as f32), self.cfg.frame_len_s, self.cfg.frame_hop_s)
    }

    /// Fit the clip to the configured duration, then compute MFCCs.
    pub fn featurize(&self, w: &Waveform) -> Result<MfccSequence> {
        self.mfcc(&w.fit_to_len(self.cfg.clip_len()))
    }
}

fn triangle(f: f64, lo: f64, mid: f64, hi: f64) -> f64 {
    if f > lo && f <= mid {
        (f - lo) / (mid - lo)
    } else if f > mid && f < hi {
        (hi - f) / (hi - mid)
    } else {
        0.0
    }
}

/// One-shot MFCC with a freshly built extractor.
pub fn mfcc(w: &Waveform, cfg: &DspConfig) -> Result<MfccSequence> {
    MfccExtractor::new(cfg)?.mfcc(w)
}
