//! MFCC front-end against a direct, loop-by-loop reference.

use std::f64::consts::PI;

use fskws_core::dsp::{hz_to_mel, mel_to_hz, DspConfig, MfccExtractor, Waveform, SAMPLE_RATE};

fn reference_mfcc(x: &[f64], cfg: &DspConfig) -> Vec<Vec<f64>> {
    let sr = f64::from(SAMPLE_RATE);
    let frame = (cfg.frame_len_s * sr).round() as usize;
    let hop = (cfg.frame_hop_s * sr).round() as usize;
    let nfft = cfg.fft_size;
    let n_bins = nfft / 2 + 1;

    let mut y = vec![0.0; x.len()];
    y[0] = x[0];
    for n in 1..x.len() {
        y[n] = x[n] - cfg.pre_emphasis * x[n - 1];
    }

    let lo = hz_to_mel(cfg.mel_fmin_hz);
    let hi = hz_to_mel(cfg.mel_fmax_hz);
    let mut edges = Vec::new();
    for i in 0..cfg.n_mels + 2 {
        edges.push(mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64));
    }

    let n_frames = 1 + (x.len() - frame) / hop;
    let mut out = Vec::new();
    for f in 0..n_frames {
        let mut mag = vec![0.0; n_bins];
        for (k, m) in mag.iter_mut().enumerate() {
            let (mut re, mut im) = (0.0, 0.0);
            for n in 0..frame {
                let w = 0.5 - 0.5 * (2.0 * PI * n as f64 / frame as f64).cos();
                let v = y[f * hop + n] * w;
                let ang = -2.0 * PI * (k * n) as f64 / nfft as f64;
                re += v * ang.cos();
                im += v * ang.sin();
            }
            *m = (re * re + im * im).sqrt();
        }
        let mut logmel = vec![0.0; cfg.n_mels];
        for (m, lm) in logmel.iter_mut().enumerate() {
            let mut e = 0.0;
            for (k, mk) in mag.iter().enumerate() {
                let hz = k as f64 * sr / nfft as f64;
                let w = if hz > edges[m] && hz <= edges[m + 1] {
                    (hz - edges[m]) / (edges[m + 1] - edges[m])
                } else if hz > edges[m + 1] && hz < edges[m + 2] {
                    (edges[m + 2] - hz) / (edges[m + 2] - edges[m + 1])
                } else {
                    0.0
                };
                e += w * mk;
            }
            *lm = e.max(cfg.log_floor).ln();
        }
        let nm = cfg.n_mels as f64;
        let mut c = vec![0.0; cfg.n_mfcc];
        for (k, ck) in c.iter_mut().enumerate() {
            let scale = if k == 0 { (1.0 / nm).sqrt() } else { (2.0 / nm).sqrt() };
            let s: f64 = (0..cfg.n_mels).map(|i| logmel[i] * (PI * k as f64 * (i as f64 + 0.5) / nm).cos()).sum();
            *ck = scale * s;
        }
        out.push(c);
    }
    out
}

fn tone(freq: f64, amp: f64, len: usize) -> Vec<f64> {
    (0..len).map(|n| amp * (2.0 * PI * freq * n as f64 / f64::from(SAMPLE_RATE)).sin()).collect()
}

#[test]
fn pure_tone_matches_reference() {
    let cfg = DspConfig::default();
    let ex = MfccExtractor::new(&cfg).unwrap();
    for (freq, amp) in [(440.0, 0.5), (1234.5, 0.9), (3000.0, 0.1)] {
        let x = tone(freq, amp, 16_000);
        let got = ex.compute(&x).unwrap();
        let want = reference_mfcc(&x, &cfg);
        assert_eq!(got.dim(), (98, 40));
        let mut worst: f64 = 0.0;
        for (f, row) in want.iter().enumerate() {
            for (k, v) in row.iter().enumerate() {
                worst = worst.max((got[[f, k]] - v).abs());
            }
        }
        assert!(worst <= 1e-6, "{freq} Hz: max deviation {worst}");
    }
}

#[test]
fn tone_energy_lands_in_its_mel_band() {
    let cfg = DspConfig::default();
    let ex = MfccExtractor::new(&cfg).unwrap();
    for freq in [300.0, 1000.0, 2500.0, 6000.0] {
        let lm = ex.log_mel(&tone(freq, 0.5, 16_000)).unwrap();
        let row = lm.row(50);
        let peak = (0..row.len()).max_by(|&a, &b| row[a].total_cmp(&row[b])).unwrap();
        let lo = hz_to_mel(cfg.mel_fmin_hz);
        let hi = hz_to_mel(cfg.mel_fmax_hz);
        let centre = mel_to_hz(lo + (hi - lo) * (peak + 1) as f64 / (cfg.n_mels + 1) as f64);
        assert!((centre - freq).abs() / freq < 0.15, "{freq} Hz peaked at band centred {centre} Hz");
    }
}

#[test]
fn featurize_pads_and_crops_to_one_second() {
    let ex = MfccExtractor::new(&DspConfig::default()).unwrap();
    for len in [4000, 16_000, 24_000] {
        let w = Waveform::new(tone(500.0, 0.3, len), SAMPLE_RATE).unwrap();
        let m = ex.featurize(&w).unwrap();
        assert_eq!((m.n_frames(), m.n_coeffs()), (98, 40));
    }
    let long = Waveform::new(tone(500.0, 0.3, 24_000), SAMPLE_RATE).unwrap();
    let short = Waveform::new(tone(500.0, 0.3, 16_000), SAMPLE_RATE).unwrap();
    assert_eq!(ex.featurize(&long).unwrap(), ex.featurize(&short).unwrap());
}
