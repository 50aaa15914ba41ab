use ndarray::{linalg::general_mat_mul, Array1, Array2, Axis, Zip};

use super::Real;

/// 1-D convolution without bias; weight is `[out, in * kernel]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv1d<F> {
    pub weight: Array2<F>,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<F: Real> Conv1d<F> {
    pub fn zeros(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        Self { weight: Array2::zeros((out_channels, in_channels * kernel)), in_channels, out_channels, kernel, stride, pad: kernel / 2 }
    }

    pub fn out_len(&self, t_in: usize) -> usize {
        (t_in + 2 * self.pad - self.kernel) / self.stride + 1
    }

    fn im2col(&self, x: &Array2<F>, batch: usize, t_in: usize, t_out: usize) -> Array2<F> {
        let k = self.kernel;
        let mut cols = Array2::zeros((self.in_channels * k, batch * t_out));
        for ci in 0..self.in_channels {
            let xrow = x.row(ci);
            let xrow = xrow.as_slice().expect("contiguous");
            for kk in 0..k {
                let mut crow = cols.row_mut(ci * k + kk);
                let crow = crow.as_slice_mut().expect("contiguous");
                for b in 0..batch {
                    let src = &xrow[b * t_in..(b + 1) * t_in];
                    let dst = &mut crow[b * t_out..(b + 1) * t_out];
                    for (to, d) in dst.iter_mut().enumerate() {
                        let pos = to * self.stride + kk;
                        if pos >= self.pad && pos - self.pad < t_in {
                            *d = src[pos - self.pad];
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, dcols: &Array2<F>, batch: usize, t_in: usize, t_out: usize) -> Array2<F> {
        let k = self.kernel;
        let mut dx = Array2::zeros((self.in_channels, batch * t_in));
        for ci in 0..self.in_channels {
            let mut xrow = dx.row_mut(ci);
            let xrow = xrow.as_slice_mut().expect("contiguous");
            for kk in 0..k {
                let crow = dcols.row(ci * k + kk);
                let crow = crow.as_slice().expect("contiguous");
                for b in 0..batch {
                    let dst = &mut xrow[b * t_in..(b + 1) * t_in];
                    let src = &crow[b * t_out..(b + 1) * t_out];
                    for (to, s) in src.iter().enumerate() {
                        let pos = to * self.stride + kk;
                        if pos >= self.pad && pos - self.pad < t_in {
                            dst[pos - self.pad] += *s;
                        }
                    }
                }
            }
        }
        dx
    }

    /// Returns the output and the unfolded input kept for the backward pass.
    pub fn forward(&self, x: &Array2<F>, batch: usize, t_in: usize) -> (Array2<F>, Array2<F>, usize) {
        let t_out = self.out_len(t_in);
        let cols = self.im2col(x, batch, t_in, t_out);
        let y = self.weight.dot(&cols);
        (y, cols, t_out)
    }

    /// Accumulates the weight gradient into `dw`; returns the input gradient when asked.
    pub fn backward(
        &self,
        cols: &Array2<F>,
        dy: &Array2<F>,
        dw: &mut Array2<F>,
        batch: usize,
        t_in: usize,
        need_dx: bool,
    ) -> Option<Array2<F>> {
        general_mat_mul(F::one(), dy, &cols.t(), F::one(), dw);
        need_dx.then(|| {
            let dcols = self.weight.t().dot(dy);
            self.col2im(&dcols, batch, t_in, self.out_len(t_in))
        })
    }
}

/// Batch normalization over the columns of a `[channels, n]` matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNorm<F> {
    pub gamma: Array1<F>,
    pub beta: Array1<F>,
    pub running_mean: Array1<F>,
    pub running_var: Array1<F>,
    pub momentum: F,
    pub eps: F,
}

pub struct BnCache<F> {
    xhat: Array2<F>,
    inv_std: Array1<F>,
    mean: Array1<F>,
    var: Array1<F>,
    count: usize,
}

impl<F: Real> BatchNorm<F> {
    pub fn new(channels: usize, momentum: f64, eps: f64) -> Self {
        Self {
            gamma: Array1::ones(channels),
            beta: Array1::zeros(channels),
            running_mean: Array1::zeros(channels),
            running_var: Array1::ones(channels),
            momentum: F::c(momentum),
            eps: F::c(eps),
        }
    }

    /// Normalizes with batch statistics; running statistics are updated separately
    /// with [`BatchNorm::update_running`].
    pub fn forward_train(&self, x: &Array2<F>) -> (Array2<F>, BnCache<F>) {
        let n = x.ncols();
        let nf = F::from_usize(n).expect("count");
        let mean = x.mean_axis(Axis(1)).expect("non-empty");
        let mut xhat = x - &mean.view().insert_axis(Axis(1));
        let var = xhat.map_axis(Axis(1), |r| r.iter().map(|v| *v * *v).sum::<F>() / nf);
        let inv_std = var.mapv(|v| F::one() / (v + self.eps).sqrt());
        xhat *= &inv_std.view().insert_axis(Axis(1));
        let mut y = &xhat * &self.gamma.view().insert_axis(Axis(1));
        y += &self.beta.view().insert_axis(Axis(1));
        (y, BnCache { xhat, inv_std, mean, var, count: n })
    }

    pub fn update_running(&mut self, cache: &BnCache<F>) {
        let m = self.momentum;
        let nf = F::from_usize(cache.count).expect("count");
        let unbiased = if cache.count > 1 { nf / (nf - F::one()) } else { F::one() };
        Zip::from(&mut self.running_mean).and(&cache.mean).for_each(|r, &v| *r = (F::one() - m) * *r + m * v);
        Zip::from(&mut self.running_var).and(&cache.var).for_each(|r, &v| *r = (F::one() - m) * *r + m * v * unbiased);
    }

    pub fn forward_infer(&self, x: &Array2<F>) -> Array2<F> {
        let scale = Zip::from(&self.gamma).and(&self.running_var).map_collect(|&g, &v| g / (v + self.eps).sqrt());
        let shift = Zip::from(&self.beta).and(&self.running_mean).and(&scale).map_collect(|&b, &m, &s| b - m * s);
        let mut y = x * &scale.view().insert_axis(Axis(1));
        y += &shift.view().insert_axis(Axis(1));
        y
    }

    pub fn backward(&self, cache: &BnCache<F>, dy: &Array2<F>, dgamma: &mut Array1<F>, dbeta: &mut Array1<F>) -> Array2<F> {
        let nf = F::from_usize(dy.ncols()).expect("count");
        let sum_dy = dy.sum_axis(Axis(1));
        let sum_dy_xhat = (dy * &cache.xhat).sum_axis(Axis(1));
        *dgamma += &sum_dy_xhat;
        *dbeta += &sum_dy;
        let mut dx = dy * nf;
        dx -= &sum_dy.view().insert_axis(Axis(1));
        dx -= &(&cache.xhat * &sum_dy_xhat.view().insert_axis(Axis(1)));
        let scale = Zip::from(&self.gamma).and(&cache.inv_std).map_collect(|&g, &s| g * s / nf);
        dx *= &scale.view().insert_axis(Axis(1));
        dx
    }
}

/// Affine map `y = W x + b` over columns.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<F> {
    pub weight: Array2<F>,
    pub bias: Array1<F>,
}

impl<F: Real> Linear<F> {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self { weight: Array2::zeros((outputs, inputs)), bias: Array1::zeros(outputs) }
    }

    pub fn forward(&self, x: &Array2<F>) -> Array2<F> {
        let mut y = self.weight.dot(x);
        y += &self.bias.view().insert_axis(Axis(1));
        y
    }

    pub fn backward(&self, x: &Array2<F>, dy: &Array2<F>, grad: &mut Linear<F>) -> Array2<F> {
        general_mat_mul(F::one(), dy, &x.t(), F::one(), &mut grad.weight);
        grad.bias += &dy.sum_axis(Axis(1));
        self.weight.t().dot(dy)
    }
}

/// Single-layer GRU; gates stacked in `r, z, n` order along the rows.
#[derive(Clone, Debug, PartialEq)]
pub struct Gru<F> {
    pub w_ih: Array2<F>,
    pub w_hh: Array2<F>,
    pub b_ih: Array1<F>,
    pub b_hh: Array1<F>,
}

pub struct GruCache<F> {
    steps: usize,
    batch: usize,
    /// Hidden state before each step, `[H, B]`.
    h_prev: Vec<Array2<F>>,
    r: Vec<Array2<F>>,
    z: Vec<Array2<F>>,
    n: Vec<Array2<F>>,
    /// Recurrent candidate term `W_hn h + b_hn`.
    gh_n: Vec<Array2<F>>,
}

fn sigmoid<F: Real>(x: F) -> F {
    F::one() / (F::one() + (-x).exp())
}

impl<F: Real> Gru<F> {
    pub fn zeros(inputs: usize, hidden: usize) -> Self {
        Self {
            w_ih: Array2::zeros((3 * hidden, inputs)),
            w_hh: Array2::zeros((3 * hidden, hidden)),
            b_ih: Array1::zeros(3 * hidden),
            b_hh: Array1::zeros(3 * hidden),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_hh.ncols()
    }

    /// Runs over `x` (`[C, B * T]`, column `b * T + t`) and returns the final hidden state `[H, B]`.
    pub fn forward(&self, x: &Array2<F>, batch: usize, steps: usize, keep: bool) -> (Array2<F>, Option<GruCache<F>>) {
        let h_dim = self.hidden();
        let mut gi_all = self.w_ih.dot(x);
        gi_all += &self.b_ih.view().insert_axis(Axis(1));
        let mut h = Array2::<F>::zeros((h_dim, batch));
        let mut cache = keep.then(|| GruCache {
            steps,
            batch,
            h_prev: Vec::with_capacity(steps),
            r: Vec::with_capacity(steps),
            z: Vec::with_capacity(steps),
            n: Vec::with_capacity(steps),
            gh_n: Vec::with_capacity(steps),
        });
        for t in 0..steps {
            let gi = gi_all.slice(ndarray::s![.., t..;steps]);
            let mut gh = self.w_hh.dot(&h);
            gh += &self.b_hh.view().insert_axis(Axis(1));
            let mut r = Array2::zeros((h_dim, batch));
            let mut z = Array2::zeros((h_dim, batch));
            let mut n = Array2::zeros((h_dim, batch));
            let mut h_new = Array2::zeros((h_dim, batch));
            for j in 0..h_dim {
                for b in 0..batch {
                    let rv = sigmoid(gi[[j, b]] + gh[[j, b]]);
                    let zv = sigmoid(gi[[h_dim + j, b]] + gh[[h_dim + j, b]]);
                    let nv = (gi[[2 * h_dim + j, b]] + rv * gh[[2 * h_dim + j, b]]).tanh();
                    r[[j, b]] = rv;
                    z[[j, b]] = zv;
                    n[[j, b]] = nv;
                    h_new[[j, b]] = (F::one() - zv) * nv + zv * h[[j, b]];
                }
            }
            if let Some(c) = cache.as_mut() {
                c.h_prev.push(std::mem::replace(&mut h, h_new));
                c.r.push(r);
                c.z.push(z);
                c.n.push(n);
                c.gh_n.push(gh.slice(ndarray::s![2 * h_dim.., ..]).to_owned());
            } else {
                h = h_new;
            }
        }
        (h, cache)
    }

    /// Back-propagation through time from the gradient of the final hidden state.
    pub fn backward(&self, x: &Array2<F>, cache: &GruCache<F>, dh_last: &Array2<F>, grad: &mut Gru<F>) -> Array2<F> {
        let h_dim = self.hidden();
        let (steps, batch) = (cache.steps, cache.batch);
        let mut dgi_all = Array2::<F>::zeros((3 * h_dim, batch * steps));
        let mut dh = dh_last.clone();
        let mut dgh = Array2::<F>::zeros((3 * h_dim, batch));
        for t in (0..steps).rev() {
            let (hp, r, z, n, ghn) = (&cache.h_prev[t], &cache.r[t], &cache.z[t], &cache.n[t], &cache.gh_n[t]);
            let mut dh_prev = Array2::zeros((h_dim, batch));
            {
                let mut dgi = dgi_all.slice_mut(ndarray::s![.., t..;steps]);
                for j in 0..h_dim {
                    for b in 0..batch {
                        let g = dh[[j, b]];
                        let (rv, zv, nv) = (r[[j, b]], z[[j, b]], n[[j, b]]);
                        let dn = g * (F::one() - zv);
                        let dz = g * (hp[[j, b]] - nv);
                        dh_prev[[j, b]] = g * zv;
                        let da_n = dn * (F::one() - nv * nv);
                        let dr = da_n * ghn[[j, b]];
                        let da_r = dr * rv * (F::one() - rv);
                        let da_z = dz * zv * (F::one() - zv);
                        dgi[[j, b]] = da_r;
                        dgi[[h_dim + j, b]] = da_z;
                        dgi[[2 * h_dim + j, b]] = da_n;
                        dgh[[j, b]] = da_r;
                        dgh[[h_dim + j, b]] = da_z;
                        dgh[[2 * h_dim + j, b]] = da_n * rv;
                    }
                }
            }
            general_mat_mul(F::one(), &dgh, &hp.t(), F::one(), &mut grad.w_hh);
            grad.b_hh += &dgh.sum_axis(Axis(1));
            general_mat_mul(F::one(), &self.w_hh.t(), &dgh, F::one(), &mut dh_prev);
            dh = dh_prev;
        }
        general_mat_mul(F::one(), &dgi_all, &x.t(), F::one(), &mut grad.w_ih);
        grad.b_ih += &dgi_all.sum_axis(Axis(1));
        self.w_ih.t().dot(&dgi_all)
    }
}
