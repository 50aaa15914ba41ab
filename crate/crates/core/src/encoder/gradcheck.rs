//! Central finite-difference verification of [`Encoder::backward`].
//!
//! The objective is `sum(R * forward_train(x))` for fixed random `x` and `R`.
//! Samples whose `±step` interval straddles a ReLU kink are detected by
//! comparing the two one-sided slopes and replaced by a fresh sample.

use ndarray::{Array2, Array3};
use rand::Rng;

use super::{Encoder, EncoderConfig, Real};
use crate::error::Result;
use crate::rng;

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub encoder: EncoderConfig,
    pub batch: usize,
    pub frames: usize,
    pub step: f64,
    pub per_tensor: usize,
    /// Relative one-sided slope disagreement above which a sample counts as a kink.
    pub kink_tol: f64,
    pub seed: u64,
}

impl GradCheckConfig {
    /// Channels {4, 6, 8, 12}, GRU hidden 8, B = 4, T = 16.
    pub fn tiny(step: f64, seed: u64) -> Self {
        Self {
            encoder: EncoderConfig {
                width_multiplier: 1,
                base_channels: vec![4, 6, 8, 12],
                gru_hidden: 8,
                embed_dim: 16,
                ..EncoderConfig::default()
            },
            batch: 4,
            frames: 16,
            step,
            per_tensor: 8,
            kink_tol: 1e-2,
            seed,
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub worst: f64,
    pub checked: usize,
    pub rejected: usize,
    /// Worst relative error per trainable tensor.
    pub per_tensor: Vec<(String, f64)>,
}

impl GradCheckReport {
    /// True when every layer family contributed checked samples.
    pub fn covers_all_layer_types(&self) -> bool {
        ["conv.weight", "bn.gamma", "bn.beta", "gru.", "proj."].iter().all(|k| self.per_tensor.iter().any(|(n, _)| n.contains(k)))
    }
}

fn relative(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-7)
}

struct Problem<F: Real> {
    enc: Encoder<F>,
    x: Array3<F>,
    r: Array2<F>,
}

impl<F: Real> Problem<F> {
    fn new(cfg: &GradCheckConfig) -> Result<(Self, rng::StreamRng)> {
        let mut r = rng::item(cfg.seed);
        let enc = Encoder::<f64>::new(&cfg.encoder, &mut r)?.cast::<F>();
        let d = cfg.encoder.input_dim;
        let x = Array3::from_shape_fn((cfg.batch, cfg.frames, d), |_| F::c(r.gen_range(-1.0..1.0)));
        let w = Array2::from_shape_fn((cfg.batch, cfg.encoder.embed_dim), |_| F::c(r.gen_range(-1.0..1.0)));
        Ok((Self { enc, x, r: w }, r))
    }

    fn widen(&self) -> Problem<f64> {
        let up = |v: &F| v.to_f64().unwrap_or(f64::NAN);
        Problem { enc: self.enc.cast::<f64>(), x: self.x.map(up), r: self.r.map(up) }
    }

    fn objective(&self, enc: &Encoder<F>) -> Result<f64> {
        let mut e = enc.clone();
        let (out, _) = e.forward_train(self.x.view())?;
        Ok(out.iter().zip(self.r.iter()).map(|(o, w)| o.to_f64().unwrap_or(f64::NAN) * w.to_f64().unwrap_or(f64::NAN)).sum())
    }

    fn analytic(&self) -> Result<Vec<Vec<f64>>> {
        let mut probe = self.enc.clone();
        let (_, trace) = probe.forward_train(self.x.view())?;
        let grads = self.enc.backward(&trace, self.r.view())?;
        Ok(grads.trainable().iter().map(|p| p.data.iter().map(|v| v.to_f64().unwrap_or(f64::NAN)).collect()).collect())
    }
}

/// Compare analytic gradients with central differences at `cfg.step`, both in `F`.
pub fn finite_difference<F: Real>(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (p, r) = Problem::<F>::new(cfg)?;
    let analytic = p.analytic()?;
    compare(&p, &analytic, cfg, r)
}

/// Analytic gradients of the `F` build against central differences taken in
/// `f64` on the same rounded weights and inputs.
pub fn finite_difference_widened<F: Real>(cfg: &GradCheckConfig) -> Result<GradCheckReport> {
    let (p, r) = Problem::<F>::new(cfg)?;
    let analytic = p.analytic()?;
    compare(&p.widen(), &analytic, cfg, r)
}

fn compare<F: Real>(p: &Problem<F>, analytic: &[Vec<f64>], cfg: &GradCheckConfig, mut r: rng::StreamRng) -> Result<GradCheckReport> {
    let names: Vec<String> = p.enc.trainable().iter().map(|t| t.name.clone()).collect();
    let base = p.objective(&p.enc)?;
    let step = cfg.step;

    let mut rep = GradCheckReport { worst: 0.0, checked: 0, rejected: 0, per_tensor: Vec::new() };
    for (ti, name) in names.iter().enumerate() {
        let len = analytic[ti].len();
        let mut worst = 0.0f64;
        let (mut done, mut attempts) = (0, 0);
        while done < cfg.per_tensor && attempts < cfg.per_tensor * 20 {
            attempts += 1;
            let i = r.gen_range(0..len);
            let eval = |delta: f64| -> Result<f64> {
                let mut e = p.enc.clone();
                {
                    let mut ps = e.trainable_mut();
                    let v = &mut ps[ti].data[i];
                    *v += F::c(delta);
                }
                p.objective(&e)
            };
            let (plus, minus) = (eval(step)?, eval(-step)?);
            let right = (plus - base) / step;
            let left = (base - minus) / step;
            if (right - left).abs() > cfg.kink_tol * right.abs().max(left.abs()).max(1e-3) {
                rep.rejected += 1;
                continue;
            }
            worst = worst.max(relative(analytic[ti][i], (plus - minus) / (2.0 * step)));
            done += 1;
        }
        rep.checked += done;
        rep.worst = rep.worst.max(worst);
        rep.per_tensor.push((name.clone(), worst));
    }
    Ok(rep)
}

/// Worst relative difference between `F` and `f64` analytic gradients on identical weights and inputs.
pub fn precision_agreement<F: Real>(cfg: &GradCheckConfig) -> Result<f64> {
    let (lo, _) = Problem::<F>::new(cfg)?;
    let (hi, _) = Problem::<f64>::new(cfg)?;
    let (a, b) = (lo.analytic()?, hi.analytic()?);
    let mut worst = 0.0f64;
    for (ta, tb) in a.iter().zip(&b) {
        let scale = tb.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-7);
        for (x, y) in ta.iter().zip(tb) {
            worst = worst.max((x - y).abs() / scale);
        }
    }
    Ok(worst)
}
