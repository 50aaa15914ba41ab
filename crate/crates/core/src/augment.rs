//! Volume scaling, reverberation and noise injection applied to generated
//! speech before featurization.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::{Rng, RngCore};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::dsp::{read_wav, Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

/// Amplitude decay of 60 dB expressed as a natural-log factor (ln 1000).
const T60_DECAY: f64 = 6.907_755_278_982_137;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    White,
    Pink,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// When false, `augment` returns its input unchanged.
    pub enabled: bool,
    pub vol_max_range: (f64, f64),
    pub snr_db_range: (f64, f64),
    pub apply_prob: f64,
    /// Range of T60 for the built-in RIR simulator.
    pub rir_t60_range_s: (f64, f64),
    pub rir_duration_s: f64,
    pub synthetic_noise: NoiseKind,
    /// Folder of RIR wavs; replaces the simulator when set.
    pub rir_dir: Option<PathBuf>,
    /// Folder of noise wavs; replaces the synthetic noise when set.
    pub noise_dir: Option<PathBuf>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            vol_max_range: (0.2, 0.9),
            snr_db_range: (10.0, 20.0),
            apply_prob: 0.9,
            rir_t60_range_s: (0.1, 0.6),
            rir_duration_s: 0.5,
            synthetic_noise: NoiseKind::Pink,
            rir_dir: None,
            noise_dir: None,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        let range_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if !range_ok(self.vol_max_range) {
            return Err(Error::Config("augment: vol_max_range must satisfy 0 < low <= high".into()));
        }
        if !range_ok(self.snr_db_range) {
            return Err(Error::Config("augment: snr_db_range must satisfy 0 < low <= high".into()));
        }
        if !range_ok(self.rir_t60_range_s) || !(self.rir_duration_s > 0.0) {
            return Err(Error::Config("augment: RIR ranges must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.apply_prob) {
            return Err(Error::Config("augment: apply_prob must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Source of room impulse responses.
pub trait RirProvider: Send + Sync {
    fn next(&self, rng: &mut dyn RngCore, length: usize) -> Result<Waveform>;
}

/// Source of noise; returned waveforms have exactly `length` samples.
pub trait NoiseProvider: Send + Sync {
    fn next(&self, rng: &mut dyn RngCore, length: usize) -> Result<Waveform>;
}

fn peak_of(samples: &[f64]) -> f64 {
    samples.iter().fold(0.0, |m, s| m.max(s.abs()))
}

fn rms_of(samples: &[f64]) -> f64 {
    (samples.iter().map(|s| s * s).sum::<f64>() / samples.len() as f64).sqrt()
}

/// Rescale so the peak absolute sample equals `target_max`.
pub fn scale_volume(w: &Waveform, target_max: f64) -> Result<Waveform> {
    w.require_non_empty()?;
    if !(target_max > 0.0) {
        return Err(Error::Config("volume target must be positive".into()));
    }
    let peak = w.peak();
    if peak == 0.0 {
        return Err(Error::Silent("cannot scale an all-zero waveform"));
    }
    let gain = target_max / peak;
    let samples = w.samples().iter().map(|s| s * gain).collect();
    Ok(Waveform::from_parts_unchecked(samples, w.sample_rate()))
}

thread_local! {
    static PLANNER: std::cell::RefCell<FftPlanner<f64>> = std::cell::RefCell::new(FftPlanner::new());
}

/// Linear convolution of `x` with `h`, truncated to `x.len()` samples, via FFT.
pub fn fft_convolve_truncated(x: &[f64], h: &[f64]) -> Vec<f64> {
    let full = x.len() + h.len() - 1;
    let n = full.next_power_of_two();
    let (fwd, inv) = PLANNER.with(|p| {
        let mut p = p.borrow_mut();
        (p.plan_fft_forward(n), p.plan_fft_inverse(n))
    });
    let mut a: Vec<Complex<f64>> = x.iter().map(|&v| Complex::new(v, 0.0)).collect();
    a.resize(n, Complex::new(0.0, 0.0));
    let mut b: Vec<Complex<f64>> = h.iter().map(|&v| Complex::new(v, 0.0)).collect();
    b.resize(n, Complex::new(0.0, 0.0));
    fwd.process(&mut a);
    fwd.process(&mut b);
    for (p, q) in a.iter_mut().zip(&b) {
        *p *= q;
    }
    inv.process(&mut a);
    let scale = 1.0 / n as f64;
    a.iter().take(x.len()).map(|c| c.re * scale).collect()
}

/// Convolve with an RIR, keep the original length and restore the original peak.
pub fn add_reverb(w: &Waveform, rir: &Waveform) -> Result<Waveform> {
    w.require_non_empty()?;
    rir.require_non_empty()?;
    if w.sample_rate() != rir.sample_rate() {
        return Err(Error::SampleRateMismatch(w.sample_rate(), rir.sample_rate()));
    }
    let mut out = fft_convolve_truncated(w.samples(), rir.samples());
    let out_peak = peak_of(&out);
    if out_peak == 0.0 {
        return Err(Error::Silent("reverberated signal is all zero"));
    }
    let gain = w.peak() / out_peak;
    out.iter_mut().for_each(|s| *s *= gain);
    Ok(Waveform::from_parts_unchecked(out, w.sample_rate()))
}

/// Exponentially decaying white noise with a unit direct path at sample 0.
pub fn synth_rir(rng: &mut dyn RngCore, duration_s: f64, decay_t60_s: f64) -> Result<Waveform> {
    if !(duration_s > 0.0 && decay_t60_s > 0.0) {
        return Err(Error::Config("RIR duration and T60 must be positive".into()));
    }
    let n = ((duration_s * f64::from(SAMPLE_RATE)).round() as usize).max(1);
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / f64::from(SAMPLE_RATE);
            rng.gen_range(-1.0..1.0) * rir_envelope(t, decay_t60_s)
        })
        .collect();
    samples[0] = 1.0;
    let peak = peak_of(&samples);
    samples.iter_mut().for_each(|s| *s /= peak);
    Ok(Waveform::from_parts_unchecked(samples, SAMPLE_RATE))
}

/// Amplitude envelope of the simulated RIR at time `t`.
pub fn rir_envelope(t: f64, t60: f64) -> f64 {
    (-T60_DECAY * t / t60).exp()
}

/// Gain applied to `noise` so that the mix has the requested SNR.
pub fn noise_gain(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<f64> {
    w.require_non_empty()?;
    if noise.len() < w.len() {
        return Err(Error::Shape(format!("noise has {} samples, signal {}", noise.len(), w.len())));
    }
    let sig = rms_of(w.samples());
    let nrms = rms_of(&noise.samples()[..w.len()]);
    if sig == 0.0 {
        return Err(Error::Silent("signal has zero RMS"));
    }
    if nrms == 0.0 {
        return Err(Error::Silent("noise has zero RMS"));
    }
    Ok(sig / nrms * 10f64.powf(-snr_db / 20.0))
}

/// Mix `noise` in at `snr_db`, then clip to `[-1, 1]`. Returns the mix and the clipped sample count.
pub fn add_noise_counted(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<(Waveform, usize)> {
    if w.sample_rate() != noise.sample_rate() {
        return Err(Error::SampleRateMismatch(w.sample_rate(), noise.sample_rate()));
    }
    let g = noise_gain(w, noise, snr_db)?;
    let mut clipped = 0;
    let samples = w
        .samples()
        .iter()
        .zip(noise.samples())
        .map(|(s, n)| {
            let v = s + g * n;
            if v.abs() > 1.0 {
                clipped += 1;
            }
            v.clamp(-1.0, 1.0)
        })
        .collect();
    Ok((Waveform::from_parts_unchecked(samples, w.sample_rate()), clipped))
}

pub fn add_noise(w: &Waveform, noise: &Waveform, snr_db: f64) -> Result<Waveform> {
    add_noise_counted(w, noise, snr_db).map(|(out, _)| out)
}

fn uniform_in(rng: &mut dyn RngCore, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

/// Built-in RIR provider: [`synth_rir`] with T60 drawn uniformly from a range.
pub struct SyntheticRir {
    pub duration_s: f64,
    pub t60_range_s: (f64, f64),
}

impl RirProvider for SyntheticRir {
    fn next(&self, rng: &mut dyn RngCore, _length: usize) -> Result<Waveform> {
        let t60 = uniform_in(rng, self.t60_range_s);
        synth_rir(rng, self.duration_s, t60)
    }
}

/// White or pink noise generator.
pub struct SyntheticNoise(pub NoiseKind);

impl NoiseProvider for SyntheticNoise {
    fn next(&self, rng: &mut dyn RngCore, length: usize) -> Result<Waveform> {
        if length == 0 {
            return Err(Error::EmptyWaveform);
        }
        let white = (0..length).map(|_| rng.gen_range(-1.0..1.0));
        let samples: Vec<f64> = match self.0 {
            NoiseKind::White => white.collect(),
            NoiseKind::Pink => {
                // Paul Kellet's economy pink filter.
                let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
                white
                    .map(|x| {
                        b0 = 0.99765 * b0 + x * 0.0990460;
                        b1 = 0.96300 * b1 + x * 0.2965164;
                        b2 = 0.57000 * b2 + x * 1.0526913;
                        (b0 + b1 + b2 + x * 0.1848) * 0.2
                    })
                    .collect()
            }
        };
        Ok(Waveform::from_parts_unchecked(samples, SAMPLE_RATE))
    }
}

fn load_dir(dir: &Path) -> Result<Vec<Waveform>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("wav")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Dataset(format!("no wav files in {}", dir.display())));
    }
    paths
        .iter()
        .map(|p| {
            let w = read_wav(p)?;
            if w.is_empty() || w.peak() == 0.0 {
                return Err(Error::Dataset(format!("{} is empty or silent", p.display())));
            }
            Ok(w)
        })
        .collect()
}

/// RIRs loaded from a folder of 16 kHz mono WAVs (sorted filename order).
pub struct DirRir {
    rirs: Vec<Waveform>,
}

impl DirRir {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { rirs: load_dir(dir.as_ref())? })
    }
}

impl RirProvider for DirRir {
    fn next(&self, rng: &mut dyn RngCore, _length: usize) -> Result<Waveform> {
        Ok(self.rirs[rng.gen_range(0..self.rirs.len())].clone())
    }
}

/// Noise clips from a folder; a random file is picked, started at a random
/// offset and tiled to the requested length.
pub struct DirNoise {
    clips: Vec<Waveform>,
}

impl DirNoise {
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(Self { clips: load_dir(dir.as_ref())? })
    }
}

impl NoiseProvider for DirNoise {
    fn next(&self, rng: &mut dyn RngCore, length: usize) -> Result<Waveform> {
        let clip = &self.clips[rng.gen_range(0..self.clips.len())];
        let src = clip.samples();
        let offset = rng.gen_range(0..src.len());
        let samples = (0..length).map(|i| src[(offset + i) % src.len()]).collect();
        Ok(Waveform::from_parts_unchecked(samples, clip.sample_rate()))
    }
}

/// Which stochastic branches of one augmentation call fired.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct AugmentTrace {
    pub volume: Option<f64>,
    pub reverb: bool,
    pub snr_db: Option<f64>,
}

/// Stochastic augmentation chain: volume, then reverb, then noise.
pub struct Augmenter {
    cfg: AugmentConfig,
    rir: Arc<dyn RirProvider>,
    noise: Arc<dyn NoiseProvider>,
    clipped: AtomicU64,
    processed: AtomicU64,
}

impl Augmenter {
    pub fn new(cfg: AugmentConfig, rir: Arc<dyn RirProvider>, noise: Arc<dyn NoiseProvider>) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, rir, noise, clipped: AtomicU64::new(0), processed: AtomicU64::new(0) })
    }

    /// Providers chosen from the config: folders when given, synthetic otherwise.
    pub fn from_config(cfg: &AugmentConfig) -> Result<Self> {
        let rir: Arc<dyn RirProvider> = match &cfg.rir_dir {
            Some(dir) => Arc::new(DirRir::open(dir)?),
            None => Arc::new(SyntheticRir { duration_s: cfg.rir_duration_s, t60_range_s: cfg.rir_t60_range_s }),
        };
        let noise: Arc<dyn NoiseProvider> = match &cfg.noise_dir {
            Some(dir) => Arc::new(DirNoise::open(dir)?),
            None => Arc::new(SyntheticNoise(cfg.synthetic_noise)),
        };
        Self::new(cfg.clone(), rir, noise)
    }

    pub fn config(&self) -> &AugmentConfig {
        &self.cfg
    }

    pub fn augment(&self, w: &Waveform, rng: &mut dyn RngCore) -> Result<Waveform> {
        self.augment_traced(w, rng).map(|(out, _)| out)
    }

    /// Same as [`Augmenter::augment`], also reporting which branches fired.
    pub fn augment_traced(&self, w: &Waveform, rng: &mut dyn RngCore) -> Result<(Waveform, AugmentTrace)> {
        let mut trace = AugmentTrace::default();
        if !self.cfg.enabled {
            return Ok((w.clone(), trace));
        }
        let target = uniform_in(rng, self.cfg.vol_max_range);
        trace.volume = Some(target);
        let mut out = scale_volume(w, target)?;
        if rng.gen::<f64>() < self.cfg.apply_prob {
            let rir = self.rir.next(rng, out.len())?;
            out = add_reverb(&out, &rir)?;
            trace.reverb = true;
        }
        if rng.gen::<f64>() < self.cfg.apply_prob {
            let snr = uniform_in(rng, self.cfg.snr_db_range);
            let noise = self.noise.next(rng, out.len())?;
            let (mixed, clipped) = add_noise_counted(&out, &noise, snr)?;
            self.clipped.fetch_add(clipped as u64, Ordering::Relaxed);
            trace.snr_db = Some(snr);
            out = mixed;
        }
        self.processed.fetch_add(out.len() as u64, Ordering::Relaxed);
        Ok((out, trace))
    }

    /// Fraction of augmented samples that were clipped after noise injection.
    pub fn clip_rate(&self) -> f64 {
        let n = self.processed.load(Ordering::Relaxed);
        if n == 0 {
            0.0
        } else {
            self.clipped.load(Ordering::Relaxed) as f64 / n as f64
        }
    }
}
