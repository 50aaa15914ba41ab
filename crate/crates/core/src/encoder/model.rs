use ndarray::{Array2, Array3, ArrayView2, ArrayView3};
use rand::{Rng, RngCore};
use rand_distr::StandardNormal;

use super::layers::{BatchNorm, BnCache, Conv1d, Gru, GruCache, Linear};
use super::{EncoderConfig, Real};
use crate::dsp::MfccSequence;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics; running statistics are updated.
    Train,
    /// Running statistics; deterministic.
    Infer,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ConvBn<F> {
    pub conv: Conv1d<F>,
    pub bn: BatchNorm<F>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResBlock<F> {
    pub conv1: ConvBn<F>,
    pub conv2: ConvBn<F>,
    /// Strided 1x1 projection; `None` means an identity shortcut.
    pub shortcut: Option<ConvBn<F>>,
}

/// The embedding network: stem conv, residual blocks, GRU, linear projection
/// of the last GRU state. Also used as the gradient container.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<F> {
    pub config: EncoderConfig,
    pub stem: ConvBn<F>,
    pub blocks: Vec<ResBlock<F>>,
    pub gru: Gru<F>,
    pub proj: Linear<F>,
}

/// Read access to one named tensor.
pub struct ParamRef<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: &'a [F],
}

pub struct ParamMut<'a, F> {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
    pub data: &'a mut [F],
}

struct ConvBnTrace<F> {
    cols: Array2<F>,
    bn: BnCache<F>,
    t_in: usize,
}

struct BlockTrace<F> {
    c1: ConvBnTrace<F>,
    r1: Array2<F>,
    c2: ConvBnTrace<F>,
    shortcut: Option<(ConvBnTrace<F>, Array2<F>)>,
    out: Array2<F>,
}

/// Cached activations of one train-mode forward call.
pub struct ForwardTrace<F> {
    batch: usize,
    stem: ConvBnTrace<F>,
    stem_out: Array2<F>,
    blocks: Vec<BlockTrace<F>>,
    gru_in: Array2<F>,
    gru: GruCache<F>,
    h_last: Array2<F>,
}

impl<F> ForwardTrace<F> {
    pub fn batch(&self) -> usize {
        self.batch
    }
}

fn check_finite<F: Real>(x: &Array2<F>, layer: usize, name: &'static str) -> Result<()> {
    if x.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFiniteActivation { layer, name })
    }
}

fn relu<F: Real>(mut x: Array2<F>) -> Array2<F> {
    x.mapv_inplace(|v| if v <= F::zero() { F::zero() } else { v });
    x
}

/// Zeroes `grad` wherever the ReLU output was not positive.
fn relu_mask<F: Real>(grad: &mut Array2<F>, out: &Array2<F>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= F::zero() {
            *g = F::zero();
        }
    });
}

impl<F: Real> ConvBn<F> {
    fn zeros(cin: usize, cout: usize, kernel: usize, stride: usize, cfg: &EncoderConfig) -> Self {
        Self { conv: Conv1d::zeros(cin, cout, kernel, stride), bn: BatchNorm::new(cout, cfg.bn_momentum, cfg.bn_eps) }
    }

    fn forward(&self, x: &Array2<F>, batch: usize, t_in: usize, mode: Mode) -> (Array2<F>, Option<ConvBnTrace<F>>, usize) {
        let (y, cols, t_out) = self.conv.forward(x, batch, t_in);
        match mode {
            Mode::Train => {
                let (y, bn) = self.bn.forward_train(&y);
                (y, Some(ConvBnTrace { cols, bn, t_in }), t_out)
            }
            Mode::Infer => (self.bn.forward_infer(&y), None, t_out),
        }
    }

    fn backward(&self, tr: &ConvBnTrace<F>, dy: &Array2<F>, grad: &mut ConvBn<F>, batch: usize, need_dx: bool) -> Option<Array2<F>> {
        let da = self.bn.backward(&tr.bn, dy, &mut grad.bn.gamma, &mut grad.bn.beta);
        self.conv.backward(&tr.cols, &da, &mut grad.conv.weight, batch, tr.t_in, need_dx)
    }

    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<ParamRef<'a, F>>) {
        let c = &self.conv.weight;
        out.push(ParamRef {
            name: format!("{prefix}.conv.weight"),
            shape: c.shape().to_vec(),
            trainable: true,
            data: c.as_slice().expect("contiguous"),
        });
        for (name, t, trainable) in [
            ("gamma", &self.bn.gamma, true),
            ("beta", &self.bn.beta, true),
            ("running_mean", &self.bn.running_mean, false),
            ("running_var", &self.bn.running_var, false),
        ] {
            out.push(ParamRef {
                name: format!("{prefix}.bn.{name}"),
                shape: vec![t.len()],
                trainable,
                data: t.as_slice().expect("contiguous"),
            });
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<ParamMut<'a, F>>) {
        let c = &mut self.conv.weight;
        out.push(ParamMut {
            name: format!("{prefix}.conv.weight"),
            shape: c.shape().to_vec(),
            trainable: true,
            data: c.as_slice_mut().expect("contiguous"),
        });
        let bn = &mut self.bn;
        for (name, t, trainable) in [
            ("gamma", &mut bn.gamma, true),
            ("beta", &mut bn.beta, true),
            ("running_mean", &mut bn.running_mean, false),
            ("running_var", &mut bn.running_var, false),
        ] {
            out.push(ParamMut {
                name: format!("{prefix}.bn.{name}"),
                shape: vec![t.len()],
                trainable,
                data: t.as_slice_mut().expect("contiguous"),
            });
        }
    }
}

fn uniform_fill<F: Real>(a: &mut [F], bound: f64, rng: &mut dyn RngCore) {
    for v in a {
        *v = F::c(rng.gen_range(-bound..bound));
    }
}

/// Random orthogonal `n x n` matrix (Gram-Schmidt on a Gaussian draw).
fn orthogonal(n: usize, rng: &mut dyn RngCore) -> Array2<f64> {
    let mut q = Array2::<f64>::from_shape_simple_fn((n, n), || rng.sample(StandardNormal));
    for i in 0..n {
        for j in 0..i {
            let d = q.row(i).dot(&q.row(j));
            let rj = q.row(j).to_owned();
            q.row_mut(i).scaled_add(-d, &rj);
        }
        let norm = q.row(i).dot(&q.row(i)).sqrt();
        q.row_mut(i).mapv_inplace(|v| v / norm);
    }
    q
}

impl<F: Real> Encoder<F> {
    /// All tensors zero, batch-norm scale 1 and running variance 1.
    pub fn zeros(config: &EncoderConfig) -> Result<Self> {
        config.validate()?;
        let ch = config.channels();
        let stem = ConvBn::zeros(config.input_dim, ch[0], config.first_kernel, 1, config);
        let blocks = ch
            .windows(2)
            .zip(&config.block_strides)
            .map(|(w, &stride)| {
                let (cin, cout) = (w[0], w[1]);
                ResBlock {
                    conv1: ConvBn::zeros(cin, cout, config.block_kernel, stride, config),
                    conv2: ConvBn::zeros(cout, cout, config.block_kernel, 1, config),
                    shortcut: (stride != 1 || cin != cout).then(|| ConvBn::zeros(cin, cout, 1, stride, config)),
                }
            })
            .collect();
        let last = *ch.last().expect("validated");
        Ok(Self {
            config: config.clone(),
            stem,
            blocks,
            gru: Gru::zeros(last, config.gru_hidden),
            proj: Linear::zeros(config.gru_hidden, config.embed_dim),
        })
    }

    /// He-uniform convolutions, orthogonal recurrent weights, zero biases.
    pub fn new(config: &EncoderConfig, rng: &mut dyn RngCore) -> Result<Self> {
        let mut enc = Self::zeros(config)?;
        let init_conv = |c: &mut Conv1d<F>, rng: &mut dyn RngCore| {
            let fan_in = (c.in_channels * c.kernel) as f64;
            uniform_fill(c.weight.as_slice_mut().expect("contiguous"), (6.0 / fan_in).sqrt(), rng);
        };
        init_conv(&mut enc.stem.conv, rng);
        for b in &mut enc.blocks {
            init_conv(&mut b.conv1.conv, rng);
            init_conv(&mut b.conv2.conv, rng);
            if let Some(s) = b.shortcut.as_mut() {
                init_conv(&mut s.conv, rng);
            }
        }
        let h = config.gru_hidden;
        let bound = 1.0 / (h as f64).sqrt();
        uniform_fill(enc.gru.w_ih.as_slice_mut().expect("contiguous"), bound, rng);
        for gate in 0..3 {
            let q = orthogonal(h, rng);
            enc.gru.w_hh.slice_mut(ndarray::s![gate * h..(gate + 1) * h, ..]).assign(&q.mapv(F::c));
        }
        uniform_fill(enc.proj.weight.as_slice_mut().expect("contiguous"), bound, rng);
        Ok(enc)
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for p in z.params_mut() {
            p.data.iter_mut().for_each(|v| *v = F::zero());
        }
        z
    }

    pub fn params(&self) -> Vec<ParamRef<'_, F>> {
        let mut out = Vec::new();
        self.stem.collect("stem", &mut out);
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv1.collect(&format!("blocks.{i}.conv1"), &mut out);
            b.conv2.collect(&format!("blocks.{i}.conv2"), &mut out);
            if let Some(s) = &b.shortcut {
                s.collect(&format!("blocks.{i}.shortcut"), &mut out);
            }
        }
        for (name, t) in [("gru.w_ih", &self.gru.w_ih), ("gru.w_hh", &self.gru.w_hh), ("proj.weight", &self.proj.weight)] {
            out.push(ParamRef { name: name.into(), shape: t.shape().to_vec(), trainable: true, data: t.as_slice().expect("contiguous") });
        }
        for (name, t) in [("gru.b_ih", &self.gru.b_ih), ("gru.b_hh", &self.gru.b_hh), ("proj.bias", &self.proj.bias)] {
            out.push(ParamRef { name: name.into(), shape: vec![t.len()], trainable: true, data: t.as_slice().expect("contiguous") });
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ParamMut<'_, F>> {
        let mut out = Vec::new();
        self.stem.collect_mut("stem", &mut out);
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv1.collect_mut(&format!("blocks.{i}.conv1"), &mut out);
            b.conv2.collect_mut(&format!("blocks.{i}.conv2"), &mut out);
            if let Some(s) = b.shortcut.as_mut() {
                s.collect_mut(&format!("blocks.{i}.shortcut"), &mut out);
            }
        }
        let gru = &mut self.gru;
        let proj = &mut self.proj;
        for (name, t) in [("gru.w_ih", &mut gru.w_ih), ("gru.w_hh", &mut gru.w_hh), ("proj.weight", &mut proj.weight)] {
            out.push(ParamMut {
                name: name.into(),
                shape: t.shape().to_vec(),
                trainable: true,
                data: t.as_slice_mut().expect("contiguous"),
            });
        }
        for (name, t) in [("gru.b_ih", &mut gru.b_ih), ("gru.b_hh", &mut gru.b_hh), ("proj.bias", &mut proj.bias)] {
            out.push(ParamMut { name: name.into(), shape: vec![t.len()], trainable: true, data: t.as_slice_mut().expect("contiguous") });
        }
        out
    }

    pub fn trainable(&self) -> Vec<ParamRef<'_, F>> {
        self.params().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn trainable_mut(&mut self) -> Vec<ParamMut<'_, F>> {
        self.params_mut().into_iter().filter(|p| p.trainable).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|p| p.data.len()).sum()
    }

    /// Same network in another float width.
    pub fn cast<G: Real>(&self) -> Encoder<G> {
        let mut out = Encoder::<G>::zeros(&self.config).expect("config already validated");
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            for (d, s) in dst.data.iter_mut().zip(src.data) {
                *d = G::from_f64(s.to_f64().expect("finite")).expect("finite");
            }
        }
        out
    }

    fn check_input(&self, batch: &ArrayView3<F>) -> Result<()> {
        let (b, t, d) = batch.dim();
        if b == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        if d != self.config.input_dim {
            return Err(Error::Shape(format!("expected {} input features, got {d}", self.config.input_dim)));
        }
        if t < self.config.min_frames() {
            return Err(Error::SequenceTooShort { got: t, min: self.config.min_frames() });
        }
        Ok(())
    }

    fn run(&self, batch: ArrayView3<F>, mode: Mode) -> Result<(Array2<F>, Option<ForwardTrace<F>>)> {
        self.check_input(&batch)?;
        let (b, t, d) = batch.dim();
        // [B, T, D] -> [D, B * T]
        let x = batch.permuted_axes([2, 0, 1]).as_standard_layout().into_owned().into_shape_with_order((d, b * t)).expect("contiguous");

        let (y, stem_tr, t0) = self.stem.forward(&x, b, t, mode);
        let stem_out = relu(y);
        check_finite(&stem_out, 0, "stem")?;

        let mut h = stem_out.clone();
        let mut t_cur = t0;
        let mut block_traces = Vec::new();
        for (i, blk) in self.blocks.iter().enumerate() {
            let (a1, tr1, t_mid) = blk.conv1.forward(&h, b, t_cur, mode);
            let r1 = relu(a1);
            let (n2, tr2, _) = blk.conv2.forward(&r1, b, t_mid, mode);
            let (sc, sc_tr) = match &blk.shortcut {
                Some(s) => {
                    let (sa, str_, _) = s.forward(&h, b, t_cur, mode);
                    let sr = relu(sa);
                    (sr.clone(), str_.map(|tr| (tr, sr)))
                }
                None => (h.clone(), None),
            };
            let out = relu(n2 + &sc);
            check_finite(&out, i + 1, "residual block")?;
            if mode == Mode::Train {
                block_traces.push(BlockTrace {
                    c1: tr1.expect("train trace"),
                    r1,
                    c2: tr2.expect("train trace"),
                    shortcut: sc_tr,
                    out: out.clone(),
                });
            }
            h = out;
            t_cur = t_mid;
        }

        let n_blocks = self.blocks.len();
        let (h_last, gru_cache) = self.gru.forward(&h, b, t_cur, mode == Mode::Train);
        check_finite(&h_last, n_blocks + 1, "gru")?;
        let emb = self.proj.forward(&h_last);
        check_finite(&emb, n_blocks + 2, "projection")?;
        let emb = emb.reversed_axes().as_standard_layout().into_owned();

        let trace = gru_cache.map(|gru| ForwardTrace {
            batch: b,
            stem: stem_tr.expect("train trace"),
            stem_out,
            blocks: block_traces,
            gru_in: h,
            gru,
            h_last,
        });
        Ok((emb, trace))
    }

    /// Embeddings `[B, embed_dim]` using running batch-norm statistics.
    pub fn forward_infer(&self, batch: ArrayView3<F>) -> Result<Array2<F>> {
        self.run(batch, Mode::Infer).map(|(e, _)| e)
    }

    /// Embeddings using batch statistics; updates running statistics and returns the trace.
    pub fn forward_train(&mut self, batch: ArrayView3<F>) -> Result<(Array2<F>, ForwardTrace<F>)> {
        let (emb, trace) = self.run(batch, Mode::Train)?;
        let trace = trace.expect("train mode keeps a trace");
        self.stem.bn.update_running(&trace.stem.bn);
        for (blk, tr) in self.blocks.iter_mut().zip(&trace.blocks) {
            blk.conv1.bn.update_running(&tr.c1.bn);
            blk.conv2.bn.update_running(&tr.c2.bn);
            if let (Some(s), Some((str_, _))) = (blk.shortcut.as_mut(), tr.shortcut.as_ref()) {
                s.bn.update_running(&str_.bn);
            }
        }
        Ok((emb, trace))
    }

    pub fn forward(&mut self, batch: ArrayView3<F>, mode: Mode) -> Result<(Array2<F>, Option<ForwardTrace<F>>)> {
        match mode {
            Mode::Train => self.forward_train(batch).map(|(e, t)| (e, Some(t))),
            Mode::Infer => self.forward_infer(batch).map(|e| (e, None)),
        }
    }

    /// Exact parameter gradients of `sum(grad_out * embeddings)` for the traced call.
    pub fn backward(&self, trace: &ForwardTrace<F>, grad_out: ArrayView2<F>) -> Result<Encoder<F>> {
        if trace.blocks.len() != self.blocks.len() {
            return Err(Error::Shape("trace does not match the encoder topology".into()));
        }
        if grad_out.dim() != (trace.batch, self.config.embed_dim) {
            return Err(Error::Shape(format!("grad_out is {:?}, expected ({}, {})", grad_out.dim(), trace.batch, self.config.embed_dim)));
        }
        let b = trace.batch;
        let mut grad = self.zeros_like();
        let d_emb = grad_out.t().as_standard_layout().into_owned();
        let dh_last = self.proj.backward(&trace.h_last, &d_emb, &mut grad.proj);
        let mut dh = self.gru.backward(&trace.gru_in, &trace.gru, &dh_last, &mut grad.gru);

        for ((blk, tr), g) in self.blocks.iter().zip(&trace.blocks).zip(grad.blocks.iter_mut()).rev() {
            relu_mask(&mut dh, &tr.out);
            let mut d_r1 = blk.conv2.backward(&tr.c2, &dh, &mut g.conv2, b, true).expect("dx requested");
            relu_mask(&mut d_r1, &tr.r1);
            let mut dx = blk.conv1.backward(&tr.c1, &d_r1, &mut g.conv1, b, true).expect("dx requested");
            match (&blk.shortcut, &tr.shortcut, g.shortcut.as_mut()) {
                (Some(s), Some((str_, sr)), Some(gs)) => {
                    let mut d_s = dh;
                    relu_mask(&mut d_s, sr);
                    dx += &s.backward(str_, &d_s, gs, b, true).expect("dx requested");
                }
                (None, None, None) => dx += &dh,
                _ => return Err(Error::Shape("trace does not match the encoder topology".into())),
            }
            dh = dx;
        }
        relu_mask(&mut dh, &trace.stem_out);
        self.stem.backward(&trace.stem, &dh, &mut grad.stem, b, false);
        Ok(grad)
    }

    /// Embeds feature sequences of equal length in inference mode.
    pub fn embed(&self, seqs: &[&MfccSequence]) -> Result<Array2<F>> {
        let batch = stack_features::<F>(seqs)?;
        self.forward_infer(batch.view())
    }
}

/// Stacks equal-length feature sequences into a `[B, T, D]` tensor.
pub fn stack_features<F: Real>(seqs: &[&MfccSequence]) -> Result<Array3<F>> {
    let first = seqs.first().ok_or_else(|| Error::Shape("empty batch".into()))?;
    let (t, d) = first.frames().dim();
    let mut out = Array3::<F>::zeros((seqs.len(), t, d));
    for (mut dst, s) in out.outer_iter_mut().zip(seqs) {
        if s.frames().dim() != (t, d) {
            return Err(Error::Shape(format!("sequence of shape {:?} in a batch of {:?}", s.frames().dim(), (t, d))));
        }
        dst.zip_mut_with(s.frames(), |a, &v| *a = F::from_f32(v).expect("finite"));
    }
    Ok(out)
}
