//! Parametric stand-in for a speech synthesizer.
//!
//! A class is a sequence of abstract units. Each unit maps to a fixed
//! spectral template (two resonances and a base duration). A view draws a
//! "speaker" (pitch and formant scaling) and a tempo, and renders the unit
//! sequence as bursts joined by linear cross-fades. Units come in three kinds:
//! voiced units are harmonic bursts with light aspiration noise, fricatives are
//! noise shaped by two high resonances, and closures are near-silent noise.
//!
//! Rendered length in samples is `sum(round(dur_i / tempo * sr)) + round(xfade * sr)`:
//! every burst carries a fade-out tail that overlaps the next burst's fade-in.

use std::f64::consts::PI;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::{Rng, RngCore};
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{ClassSpec, KeywordClass, SampleSource};
use crate::dsp::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

const TEMPLATE_SEED: u64 = 0x6b77_735f_756e_6974;
const PEAK: f64 = 0.8;
const MAX_HARMONIC_HZ: f64 = 7600.0;
const ASPIRATION: f64 = 1.0;
const FRICATION: f64 = 1.0;
const CLOSURE: f64 = 0.005;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleGenConfig {
    pub n_units: usize,
    pub l_min: usize,
    pub l_max: usize,
    pub unit_duration_range_s: (f64, f64),
    pub pitch_range_hz: (f64, f64),
    /// Relative formant scaling drawn per view from `1 ± formant_jitter`.
    pub formant_jitter: f64,
    pub tempo_range: (f64, f64),
    pub crossfade_s: f64,
    /// Level of the resonance-shaped noise relative to the harmonic formant peak.
    pub aspiration: f64,
}

impl Default for OracleGenConfig {
    fn default() -> Self {
        Self {
            n_units: 64,
            l_min: 10,
            l_max: 20,
            unit_duration_range_s: (0.04, 0.12),
            pitch_range_hz: (90.0, 300.0),
            formant_jitter: 0.10,
            tempo_range: (0.85, 1.15),
            crossfade_s: 0.005,
            aspiration: ASPIRATION,
        }
    }
}

impl OracleGenConfig {
    pub fn validate(&self) -> Result<()> {
        let pos_range = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi;
        if self.n_units == 0 || self.n_units > usize::from(u16::MAX) {
            return Err(Error::Config("oracle: n_units out of range".into()));
        }
        if self.l_min == 0 || self.l_min > self.l_max {
            return Err(Error::Config("oracle: require 1 <= l_min <= l_max".into()));
        }
        if !pos_range(self.unit_duration_range_s) || !pos_range(self.pitch_range_hz) || !pos_range(self.tempo_range) {
            return Err(Error::Config("oracle: ranges must be positive and ordered".into()));
        }
        if !(0.0..1.0).contains(&self.formant_jitter) || !(self.crossfade_s >= 0.0) {
            return Err(Error::Config("oracle: formant_jitter must be in [0, 1), crossfade >= 0".into()));
        }
        if !(self.aspiration >= 0.0 && self.aspiration.is_finite()) {
            return Err(Error::Config("oracle: aspiration must be finite and non-negative".into()));
        }
        Ok(())
    }
}

/// Per-view "speaker" and prosody.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ViewParams {
    pub pitch_hz: f64,
    pub tempo: f64,
    pub formant_scale: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnitKind {
    Voiced,
    Fricative,
    Closure,
}

#[derive(Clone, Debug)]
struct UnitTemplate {
    kind: UnitKind,
    formants_hz: [f64; 2],
    bandwidths_hz: [f64; 2],
    duration_s: f64,
}

pub struct OracleSource {
    cfg: OracleGenConfig,
    units: Vec<UnitTemplate>,
    next_id: AtomicU64,
}

fn draw(rng: &mut dyn RngCore, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        rng.gen_range(lo..hi)
    }
}

impl OracleSource {
    pub fn new(cfg: OracleGenConfig) -> Result<Self> {
        cfg.validate()?;
        let mut table = crate::rng::item(TEMPLATE_SEED);
        let units = (0..cfg.n_units)
            .map(|_| {
                let pick: f64 = table.gen();
                let kind = if pick < 0.4 {
                    UnitKind::Voiced
                } else if pick < 0.7 {
                    UnitKind::Fricative
                } else {
                    UnitKind::Closure
                };
                let (formants_hz, bandwidths_hz) = if kind == UnitKind::Fricative {
                    let c1 = table.gen_range(2500.0..5500.0);
                    let c2 = table.gen_range(c1 + 800.0..7400.0);
                    ([c1, c2], [table.gen_range(300.0..800.0), table.gen_range(300.0..800.0)])
                } else {
                    let f1 = table.gen_range(250.0..950.0);
                    let f2 = table.gen_range(f1 + 400.0..3200.0);
                    ([f1, f2], [90.0 + 0.1 * f1, 110.0 + 0.06 * f2])
                };
                let frac: f64 = table.gen();
                let (lo, hi) = cfg.unit_duration_range_s;
                UnitTemplate { kind, formants_hz, bandwidths_hz, duration_s: lo + frac * (hi - lo) }
            })
            .collect();
        Ok(Self { cfg, units, next_id: AtomicU64::new(0) })
    }

    pub fn config(&self) -> &OracleGenConfig {
        &self.cfg
    }

    pub fn draw_view(&self, rng: &mut dyn RngCore) -> ViewParams {
        let j = self.cfg.formant_jitter;
        ViewParams {
            pitch_hz: draw(rng, self.cfg.pitch_range_hz),
            tempo: draw(rng, self.cfg.tempo_range),
            formant_scale: [draw(rng, (1.0 - j, 1.0 + j)), draw(rng, (1.0 - j, 1.0 + j))],
        }
    }

    /// Base duration of a unit before tempo scaling.
    pub fn unit_duration_s(&self, unit: u16) -> f64 {
        self.units[usize::from(unit)].duration_s
    }

    /// Number of samples produced by [`OracleSource::render_with`].
    pub fn rendered_len(&self, units: &[u16], tempo: f64) -> usize {
        let sr = f64::from(SAMPLE_RATE);
        let body: usize = units.iter().map(|&u| self.burst_len(u, tempo)).sum();
        body + (self.cfg.crossfade_s * sr).round() as usize
    }

    fn burst_len(&self, unit: u16, tempo: f64) -> usize {
        ((self.unit_duration_s(unit) / tempo * f64::from(SAMPLE_RATE)).round() as usize).max(1)
    }

    /// Deterministic rendering of a unit sequence under fixed view parameters.
    pub fn render_with(&self, units: &[u16], view: &ViewParams) -> Result<Waveform> {
        if units.is_empty() {
            return Err(Error::Degenerate("empty unit sequence".into()));
        }
        if let Some(&u) = units.iter().find(|&&u| usize::from(u) >= self.units.len()) {
            return Err(Error::Degenerate(format!("unit id {u} out of range")));
        }
        let sr = f64::from(SAMPLE_RATE);
        let fade = (self.cfg.crossfade_s * sr).round() as usize;
        let total = self.rendered_len(units, view.tempo);
        let n_harm = ((MAX_HARMONIC_HZ / view.pitch_hz).floor() as usize).max(1);

        // Spans (start, body length) of each burst.
        let mut spans = Vec::with_capacity(units.len());
        let mut start = 0;
        for &u in units {
            let len = self.burst_len(u, view.tempo);
            spans.push((start, len));
            start += len;
        }

        // Harmonic amplitudes of each unit under this view's formant scaling.
        let amps: Vec<Vec<f64>> = units
            .iter()
            .map(|&u| {
                let t = &self.units[usize::from(u)];
                if t.kind != UnitKind::Voiced {
                    return vec![0.0; n_harm];
                }
                (1..=n_harm)
                    .map(|h| {
                        let f = h as f64 * view.pitch_hz;
                        let env: f64 = (0..2)
                            .map(|k| {
                                let fk = t.formants_hz[k] * view.formant_scale[k];
                                let x = (f - fk) / t.bandwidths_hz[k];
                                1.0 / (1.0 + x * x)
                            })
                            .sum();
                        (env + 0.01) / (h as f64).sqrt()
                    })
                    .collect()
            })
            .collect();

        let noise = self.aspiration_tracks(units, view, &spans, fade);

        let step: Vec<(f64, f64)> = (1..=n_harm)
            .map(|h| {
                let w = 2.0 * PI * h as f64 * view.pitch_hz / sr;
                (w.cos(), w.sin())
            })
            .collect();
        let mut phasor: Vec<(f64, f64)> = vec![(1.0, 0.0); n_harm];
        let mut sines = vec![0.0; n_harm];
        let mut out = vec![0.0; total];
        let mut first_active = 0;
        for (n, sample) in out.iter_mut().enumerate() {
            for ((s, p), st) in sines.iter_mut().zip(phasor.iter_mut()).zip(&step) {
                *s = p.1;
                *p = (p.0 * st.0 - p.1 * st.1, p.0 * st.1 + p.1 * st.0);
            }
            while first_active < spans.len() && spans[first_active].0 + spans[first_active].1 + fade <= n {
                first_active += 1;
            }
            let mut acc = 0.0;
            for (i, &(s0, len)) in spans.iter().enumerate().skip(first_active) {
                if s0 > n {
                    break;
                }
                let pos = n - s0;
                let seg_len = len + fade;
                let gain = if fade == 0 {
                    1.0
                } else if pos < fade {
                    (pos as f64 + 0.5) / fade as f64
                } else if pos >= len {
                    ((seg_len - pos) as f64 - 0.5) / fade as f64
                } else {
                    1.0
                };
                let voiced: f64 = amps[i].iter().zip(&sines).map(|(a, s)| a * s).sum();
                acc += gain * (voiced + noise[i][pos]);
            }
            *sample = acc;
        }
        let peak = out.iter().fold(0.0f64, |m, s| m.max(s.abs()));
        if peak == 0.0 {
            return Err(Error::Silent("rendered view is silent"));
        }
        out.iter_mut().for_each(|s| *s *= PEAK / peak);
        Waveform::new(out, SAMPLE_RATE)
    }

    /// Resonance-filtered noise for each burst, including its fade tail.
    fn aspiration_tracks(&self, units: &[u16], view: &ViewParams, spans: &[(usize, usize)], fade: usize) -> Vec<Vec<f64>> {
        let sr = f64::from(SAMPLE_RATE);
        units
            .iter()
            .zip(spans)
            .map(|(&u, &(_, len))| {
                let t = &self.units[usize::from(u)];
                let level = match t.kind {
                    UnitKind::Voiced => self.cfg.aspiration,
                    UnitKind::Fricative => FRICATION,
                    UnitKind::Closure => CLOSURE,
                };
                // Frozen noise per unit id, so a render depends only on the view parameters.
                let mut rng = crate::rng::item(TEMPLATE_SEED ^ (u64::from(u) + 1));
                let white: Vec<f64> = (0..len + fade).map(|_| rng.sample(StandardNormal)).collect();
                let mut track = vec![0.0; white.len()];
                for k in 0..2 {
                    let theta = 2.0 * PI * (t.formants_hz[k] * view.formant_scale[k]).min(0.49 * sr) / sr;
                    // Resonator whose -3 dB width matches the harmonic envelope.
                    let r = (-2.0 * PI * t.bandwidths_hz[k] / sr).exp();
                    let (a1, a2) = (2.0 * r * theta.cos(), -r * r);
                    let peak_norm = (1.0 - r) * (1.0 - 2.0 * r * (2.0 * theta).cos() + r * r).sqrt();
                    let (mut y1, mut y2) = (0.0, 0.0);
                    for (out, x) in track.iter_mut().zip(&white) {
                        let y = peak_norm * x + a1 * y1 + a2 * y2;
                        *out += level * y;
                        y2 = y1;
                        y1 = y;
                    }
                }
                track
            })
            .collect()
    }

    pub fn units_of<'a>(&self, class: &'a KeywordClass) -> Result<&'a [u16]> {
        match &class.spec {
            ClassSpec::Units(u) => Ok(u),
            ClassSpec::Keyword(_) => Err(Error::Degenerate("class was not produced by the synthetic source".into())),
        }
    }
}

impl SampleSource for OracleSource {
    fn new_class(&self, rng: &mut dyn RngCore) -> Result<KeywordClass> {
        let len = rng.gen_range(self.cfg.l_min..=self.cfg.l_max);
        let units = (0..len).map(|_| rng.gen_range(0..self.cfg.n_units) as u16).collect();
        let class_id = self.next_id.fetch_add(1, Ordering::Relaxed);
        Ok(KeywordClass { class_id, spec: ClassSpec::Units(units) })
    }

    fn render(&self, class: &KeywordClass, rng: &mut dyn RngCore) -> Result<Waveform> {
        let view = self.draw_view(rng);
        self.render_with(self.units_of(class)?, &view)
    }

    fn restore_class_counter(&self, next: u64) {
        self.next_id.fetch_max(next, Ordering::Relaxed);
    }
}
