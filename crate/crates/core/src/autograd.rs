//! Define-by-run reverse-mode differentiation.
//!
//! A [`Tape`] owns every value produced during a forward pass, in creation order, so
//! the node list is topologically sorted by construction. [`Tape::backward`] walks it
//! once in reverse and deposits gradients on the leaves that asked for them.

use std::collections::hash_map::DefaultHasher;
use std::hash::{Hash, Hasher};

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom, MatRef};
use crate::tensor::Tensor;

/// Probability floor applied inside the cross-entropy log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        batch: usize,
        inp: usize,
        out: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    MaskMul {
        x: Var,
        mask: Vec<f64>,
        scale: f64,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Relu {
        x: Var,
    },
    Softplus {
        x: Var,
    },
    Reparam {
        mu: Var,
        rho: Var,
        eps: Vec<f64>,
    },
    ShiftScale {
        mu: Var,
        sigma: Var,
        eps: Vec<f64>,
    },
    Conv2d {
        x: Var,
        k: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
        c: usize,
        spatial: usize,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        inv_std: Vec<f64>,
        n: usize,
        c: usize,
        spatial: usize,
    },
    Reshape {
        x: Var,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    CrossEntropy {
        probs: Var,
        labels: Vec<usize>,
        cols: usize,
    },
    Sum {
        x: Var,
    },
    LogGaussian {
        w: Var,
        mu: Var,
        sigma: Var,
    },
    LogMixture {
        w: Var,
        mixture: Mixture,
    },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul { a, b, .. } | Op::Add { a, b } | Op::Mul { a, b } => vec![*a, *b],
            Op::Linear { x, w, b, .. } => [Some(*x), Some(*w), *b].into_iter().flatten().collect(),
            Op::Conv2d { x, k, b, .. } => [Some(*x), Some(*k), *b].into_iter().flatten().collect(),
            Op::MaskMul { x, .. }
            | Op::Scale { x, .. }
            | Op::Relu { x }
            | Op::Softplus { x }
            | Op::MaxPool { x, .. }
            | Op::Reshape { x }
            | Op::Softmax { x, .. }
            | Op::Sum { x } => vec![*x],
            Op::Reparam { mu, rho, .. } => vec![*mu, *rho],
            Op::ShiftScale { mu, sigma, .. } => vec![*mu, *sigma],
            Op::BatchNormTrain { x, gamma, beta, .. } | Op::BatchNormEval { x, gamma, beta, .. } => {
                vec![*x, *gamma, *beta]
            }
            Op::CrossEntropy { probs, .. } => vec![*probs],
            Op::LogGaussian { w, mu, sigma } => vec![*w, *mu, *sigma],
            Op::LogMixture { w, .. } => vec![*w],
        }
    }
}

/// Recorded forward computation.
pub struct Tape {
    values: Vec<Tensor>,
    ops: Vec<Op>,
    track: Vec<bool>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

fn add_into(acc: &mut Option<Vec<f64>>, g: &[f64]) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g.to_vec()),
    }
}

fn add_owned(acc: &mut Option<Vec<f64>>, g: Vec<f64>) {
    match acc {
        Some(a) => a.iter_mut().zip(&g).for_each(|(x, y)| *x += y),
        None => *acc = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            values: Vec::new(),
            ops: Vec::new(),
            track: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let inputs = op.inputs();
        if cfg!(debug_assertions) && inputs.iter().all(|v| self.values[v.0].all_finite()) {
            debug_assert!(
                !value.data().iter().any(|x| x.is_nan()),
                "NaN produced from finite inputs"
            );
        }
        let track = match op {
            Op::Leaf => value.requires_grad(),
            _ => inputs.iter().any(|v| self.track[v.0]),
        };
        self.values.push(value);
        self.ops.push(op);
        self.track.push(track);
        Var(self.values.len() - 1)
    }

    /// Records a leaf. Gradients are accumulated for it when `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.values[v.0]
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.values[v.0].shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.values[v.0].grad()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.values[v.0].take_grad()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.values[v.0].data()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            1.0,
            MatRef::new(self.data(a), m, k),
            MatRef::new(self.data(b), k, n),
            0.0,
            &mut out,
        );
        Ok(self.push(Op::MatMul { a, b, m, k, n }, Tensor::from_parts(vec![m, n], out)))
    }

    /// Dense layer `x · wᵀ + b` with `x: [batch, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (sx, sw) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[1] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (batch, inp, out) = (sx[0], sx[1], sw[0]);
        let mut y = vec![0.0; batch * out];
        if let Some(b) = b {
            let bias = self.data(b);
            if bias.len() != out {
                return Err(Error::dim("linear bias", &[out], self.shape(b)));
            }
            y.chunks_mut(out).for_each(|row| row.copy_from_slice(bias));
        }
        kernels::gemm(
            1.0,
            MatRef::new(self.data(x), batch, inp),
            MatRef::new(self.data(w), out, inp).t(),
            1.0,
            &mut y,
        );
        Ok(self.push(
            Op::Linear {
                x,
                w,
                b,
                batch,
                inp,
                out,
            },
            Tensor::from_parts(vec![batch, out], y),
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Add { a, b }, Tensor::from_parts(shape, data)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(Op::Mul { a, b }, Tensor::from_parts(shape, data)))
    }

    /// `x ⊙ mask · scale` with a constant mask. The mask either matches `x` exactly or
    /// matches one slice along the leading axis and is broadcast across it.
    pub fn mask_mul(&mut self, x: Var, mask: Tensor, scale: f64) -> Result<Var> {
        let n = self.values[x.0].len();
        let m = mask.len();
        if m == 0 || !n.is_multiple_of(m) || (m != n && mask.shape() != &self.shape(x)[1..]) {
            return Err(Error::dim("mask_mul", self.shape(x), mask.shape()));
        }
        let mask = mask.into_data();
        let data = self
            .data(x)
            .chunks(m)
            .flat_map(|row| row.iter().zip(&mask).map(|(v, z)| v * z * scale))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(Op::MaskMul { x, mask, scale }, Tensor::from_parts(shape, data)))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.value(x).map(|v| v * c);
        self.push(Op::Scale { x, c }, t)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        self.push(Op::Relu { x }, t)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let t = self.value(x).map(softplus);
        self.push(Op::Softplus { x }, t)
    }

    /// Reparameterized Gaussian draw `mu + softplus(rho) · eps`.
    pub fn reparam(&mut self, mu: Var, rho: Var, eps: Tensor) -> Result<Var> {
        self.same_shape("reparam", mu, rho)?;
        if eps.shape() != self.shape(mu) {
            return Err(Error::dim("reparam", self.shape(mu), eps.shape()));
        }
        let eps = eps.into_data();
        let data = self
            .data(mu)
            .iter()
            .zip(self.data(rho))
            .zip(&eps)
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        Ok(self.push(Op::Reparam { mu, rho, eps }, Tensor::from_parts(shape, data)))
    }

    /// `mu + sigma · eps` for an already transformed scale.
    pub fn shift_scale(&mut self, mu: Var, sigma: Var, eps: Tensor) -> Result<Var> {
        self.same_shape("shift_scale", mu, sigma)?;
        if eps.shape() != self.shape(mu) {
            return Err(Error::dim("shift_scale", self.shape(mu), eps.shape()));
        }
        let eps = eps.into_data();
        let data = self
            .data(mu)
            .iter()
            .zip(self.data(sigma))
            .zip(&eps)
            .map(|((m, s), e)| m + s * e)
            .collect();
        let shape = self.shape(mu).to_vec();
        Ok(self.push(Op::ShiftScale { mu, sigma, eps }, Tensor::from_parts(shape, data)))
    }

    /// Stride-1 zero-padded cross-correlation. `x: [N, C, H, W]`, `k: [Co, C, ks, ks]`.
    pub fn conv2d(&mut self, x: Var, k: Var, b: Option<Var>, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sk[1] != sx[1] || sk[2] != sk[3] {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        let geom = ConvGeom {
            batch: sx[0],
            c_in: sx[1],
            h: sx[2],
            w: sx[3],
            c_out: sk[0],
            ks: sk[2],
            pad,
        };
        if sx[2] + 2 * pad < sk[2] || sx[3] + 2 * pad < sk[2] {
            return Err(Error::dim("conv2d", &sx, &sk));
        }
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::dim("conv2d bias", &[geom.c_out], self.shape(b)));
            }
        }
        let y = kernels::conv2d_forward(&geom, self.data(x), self.data(k), b.map(|b| self.data(b)));
        let shape = vec![geom.batch, geom.c_out, geom.out_h(), geom.out_w()];
        Ok(self.push(Op::Conv2d { x, k, b, geom }, Tensor::from_parts(shape, y)))
    }

    /// 2×2 window, stride 2, over the trailing two axes.
    pub fn maxpool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || !s[s.len() - 1].is_multiple_of(2) || !s[s.len() - 2].is_multiple_of(2) {
            return Err(Error::dim("maxpool2d (spatial extents must be even)", &s, &[2, 2]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let planes = self.values[x.0].len() / (h * w);
        let (y, arg) = kernels::maxpool2x2_forward(planes, h, w, self.data(x));
        let mut shape = s.clone();
        let r = shape.len();
        shape[r - 2] = h / 2;
        shape[r - 1] = w / 2;
        Ok(self.push(Op::MaxPool { x, arg }, Tensor::from_parts(shape, y)))
    }

    fn bn_dims(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        if s.len() < 2 || self.shape(gamma) != [s[1]] || self.shape(beta) != [s[1]] {
            return Err(Error::dim("batchnorm", s, self.shape(gamma)));
        }
        let spatial = s[2..].iter().product();
        Ok((s[0], s[1], spatial))
    }

    /// Training-mode batch normalization. Returns the output and the batch statistics
    /// (mean and biased variance) so the caller can update running estimates.
    pub fn batchnorm_train(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<(Var, kernels::BatchStats)> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        let stats = kernels::channel_stats(n, c, spatial, self.data(x));
        let inv_std: Vec<f64> = stats.var_biased.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xs = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut xhat = vec![0.0; xs.len()];
        let mut y = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    xhat[i] = (xs[i] - stats.mean[ch]) * inv_std[ch];
                    y[i] = g[ch] * xhat[i] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
                c,
                spatial,
            },
            Tensor::from_parts(shape, y),
        );
        Ok((v, stats))
    }

    pub fn batchnorm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[f64],
        running_var: &[f64],
        eps: f64,
    ) -> Result<Var> {
        let (n, c, spatial) = self.bn_dims(x, gamma, beta)?;
        if running_mean.len() != c || running_var.len() != c {
            return Err(Error::dim("batchnorm running stats", &[c], &[running_mean.len()]));
        }
        let inv_std: Vec<f64> = running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let xs = self.data(x);
        let (g, bt) = (self.data(gamma), self.data(beta));
        let mut y = vec![0.0; xs.len()];
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * spatial;
                for i in off..off + spatial {
                    y[i] = g[ch] * (xs[i] - running_mean[ch]) * inv_std[ch] + bt[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean: running_mean.to_vec(),
                inv_std,
                n,
                c,
                spatial,
            },
            Tensor::from_parts(shape, y),
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().with_requires_grad(false).reshape(shape)?;
        Ok(self.push(Op::Reshape { x }, t))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let cols = *s.last().expect("non-empty shape");
        let rows = self.values[x.0].len() / cols;
        let y = kernels::softmax_rows(rows, cols, self.data(x));
        self.push(Op::Softmax { x, cols }, Tensor::from_parts(s, y))
    }

    /// Mean negative log-likelihood of `labels` under row-probabilities `probs`.
    pub fn cross_entropy(&mut self, probs: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(probs).to_vec();
        let cols = *s.last().expect("non-empty shape");
        let rows = self.values[probs.0].len() / cols;
        if rows != labels.len() {
            return Err(Error::dim("cross_entropy", &s, &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= cols) {
            return Err(Error::Domain(format!("label {bad} outside [0, {cols})")));
        }
        let p = self.data(probs);
        let loss = labels
            .iter()
            .enumerate()
            .map(|(r, &l)| -p[r * cols + l].max(PROB_FLOOR).ln())
            .sum::<f64>()
            / rows as f64;
        Ok(self.push(
            Op::CrossEntropy {
                probs,
                labels: labels.to_vec(),
                cols,
            },
            Tensor::scalar(loss),
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        self.push(Op::Sum { x }, Tensor::scalar(s))
    }

    /// `Σ ln N(w; mu, sigma²)` over all entries.
    pub fn log_gaussian(&mut self, w: Var, mu: Var, sigma: Var) -> Result<Var> {
        self.same_shape("log_gaussian", w, mu)?;
        self.same_shape("log_gaussian", w, sigma)?;
        let total = self
            .data(w)
            .iter()
            .zip(self.data(mu))
            .zip(self.data(sigma))
            .map(|((w, m), s)| {
                let z = (w - m) / s;
                -HALF_LN_2PI - s.ln() - 0.5 * z * z
            })
            .sum();
        Ok(self.push(Op::LogGaussian { w, mu, sigma }, Tensor::scalar(total)))
    }

    /// `Σ ln[π N(w; 0, σ1²) + (1 − π) N(w; 0, σ2²)]` over all entries.
    pub fn log_mixture_prior(&mut self, w: Var, pi: f64, sigma1: f64, sigma2: f64) -> Var {
        let mixture = Mixture::new(pi, sigma1, sigma2);
        let total = self.data(w).iter().map(|&w| mixture.log_density(w)).sum();
        self.push(Op::LogMixture { w, mixture }, Tensor::scalar(total))
    }

    /// Hash of every branch decision taken by non-smooth ops (relu signs, pooling
    /// winners, probability floors). Two evaluations with equal signatures lie on the
    /// same smooth piece.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for (i, op) in self.ops.iter().enumerate() {
            match op {
                Op::Relu { x } => {
                    for v in self.data(*x) {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { arg, .. } => arg.hash(&mut h),
                Op::CrossEntropy { probs, labels, cols } => {
                    let p = self.data(*probs);
                    for (r, &l) in labels.iter().enumerate() {
                        (p[r * cols + l] > PROB_FLOOR).hash(&mut h);
                    }
                }
                _ => {}
            }
            i.hash(&mut h);
        }
        h.finish()
    }

    /// Reverse sweep from a scalar `loss`; gradients land on tracked leaves.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.values[loss.0].len() != 1 {
            return Err(Error::dim("backward (loss must be scalar)", self.shape(loss), &[1]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.values.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.track[i] {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, g, &mut grads);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: Vec<f64>, grads: &mut [Option<Vec<f64>>]) {
        let tracked = |v: &Var| self.track[v.0];
        match &self.ops[i] {
            Op::Leaf => {
                self.values[i].accumulate_grad(&g);
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let gm = MatRef::new(&g, m, n);
                if tracked(a) {
                    let mut da = vec![0.0; m * k];
                    kernels::gemm(1.0, gm, MatRef::new(self.data(*b), k, n).t(), 0.0, &mut da);
                    add_owned(&mut grads[a.0], da);
                }
                if tracked(b) {
                    let mut db = vec![0.0; k * n];
                    kernels::gemm(1.0, MatRef::new(self.data(*a), m, k).t(), gm, 0.0, &mut db);
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Linear {
                x,
                w,
                b,
                batch,
                inp,
                out,
            } => {
                let (batch, inp, out) = (*batch, *inp, *out);
                let gm = MatRef::new(&g, batch, out);
                if tracked(x) {
                    let mut dx = vec![0.0; batch * inp];
                    kernels::gemm(1.0, gm, MatRef::new(self.data(*w), out, inp), 0.0, &mut dx);
                    add_owned(&mut grads[x.0], dx);
                }
                if tracked(w) {
                    let mut dw = vec![0.0; out * inp];
                    kernels::gemm(1.0, gm.t(), MatRef::new(self.data(*x), batch, inp), 0.0, &mut dw);
                    add_owned(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| tracked(b)) {
                    let mut db = vec![0.0; out];
                    for row in g.chunks(out) {
                        db.iter_mut().zip(row).for_each(|(d, r)| *d += r);
                    }
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::Add { a, b } => {
                if tracked(b) {
                    add_into(&mut grads[b.0], &g);
                }
                if tracked(a) {
                    add_owned(&mut grads[a.0], g);
                }
            }
            Op::Mul { a, b } => {
                if tracked(a) {
                    let da = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    add_owned(&mut grads[a.0], da);
                }
                if tracked(b) {
                    let db = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    add_owned(&mut grads[b.0], db);
                }
            }
            Op::MaskMul { x, mask, scale } => {
                let dx = g
                    .chunks(mask.len())
                    .flat_map(|row| row.iter().zip(mask).map(|(g, z)| g * z * scale))
                    .collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::Scale { x, c } => {
                let dx = g.iter().map(|v| v * c).collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::Relu { x } => {
                let dx = g
                    .iter()
                    .zip(self.data(*x))
                    .map(|(g, v)| if *v > 0.0 { *g } else { 0.0 })
                    .collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::Softplus { x } => {
                let dx = g.iter().zip(self.data(*x)).map(|(g, v)| g * sigmoid(*v)).collect();
                add_owned(&mut grads[x.0], dx);
            }
            Op::ShiftScale { mu, sigma, eps } => {
                if tracked(sigma) {
                    let ds = g.iter().zip(eps).map(|(g, e)| g * e).collect();
                    add_owned(&mut grads[sigma.0], ds);
                }
                if tracked(mu) {
                    add_owned(&mut grads[mu.0], g);
                }
            }
            Op::Reparam { mu, rho, eps } => {
                if tracked(rho) {
                    let dr = g
                        .iter()
                        .zip(self.data(*rho))
                        .zip(eps)
                        .map(|((g, r), e)| g * e * sigmoid(*r))
                        .collect();
                    add_owned(&mut grads[rho.0], dr);
                }
                if tracked(mu) {
                    add_owned(&mut grads[mu.0], g);
                }
            }
            Op::Conv2d { x, k, b, geom } => {
                let cg = kernels::conv2d_backward(geom, self.data(*x), self.data(*k), &g, tracked(x));
                if let Some(dx) = cg.dx {
                    add_owned(&mut grads[x.0], dx);
                }
                if tracked(k) {
                    add_owned(&mut grads[k.0], cg.dk);
                }
                if let Some(b) = b.filter(|b| tracked(b)) {
                    add_owned(&mut grads[b.0], cg.db);
                }
            }
            Op::MaxPool { x, arg } => {
                let mut dx = vec![0.0; self.values[x.0].len()];
                for (gv, &a) in g.iter().zip(arg) {
                    dx[a] += gv;
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                n,
                c,
                spatial,
            } => {
                let (n, c, spatial) = (*n, *c, *spatial);
                let gam = self.data(*gamma);
                let m = (n * spatial) as f64;
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for i in off..off + spatial {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * xhat[i];
                        }
                    }
                }
                if tracked(x) {
                    let mut dx = vec![0.0; g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let off = (b * c + ch) * spatial;
                            let k = gam[ch] * inv_std[ch] / m;
                            for i in off..off + spatial {
                                dx[i] = k * (m * g[i] - sum_g[ch] - xhat[i] * sum_gx[ch]);
                            }
                        }
                    }
                    add_owned(&mut grads[x.0], dx);
                }
                if tracked(gamma) {
                    add_owned(&mut grads[gamma.0], sum_gx);
                }
                if tracked(beta) {
                    add_owned(&mut grads[beta.0], sum_g);
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                mean,
                inv_std,
                n,
                c,
                spatial,
            } => {
                let (n, c, spatial) = (*n, *c, *spatial);
                let gam = self.data(*gamma);
                let xs = self.data(*x);
                let mut sum_g = vec![0.0; c];
                let mut sum_gx = vec![0.0; c];
                let mut dx = vec![0.0; g.len()];
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * spatial;
                        for i in off..off + spatial {
                            sum_g[ch] += g[i];
                            sum_gx[ch] += g[i] * (xs[i] - mean[ch]) * inv_std[ch];
                            dx[i] = g[i] * gam[ch] * inv_std[ch];
                        }
                    }
                }
                if tracked(x) {
                    add_owned(&mut grads[x.0], dx);
                }
                if tracked(gamma) {
                    add_owned(&mut grads[gamma.0], sum_gx);
                }
                if tracked(beta) {
                    add_owned(&mut grads[beta.0], sum_g);
                }
            }
            Op::Reshape { x } => add_owned(&mut grads[x.0], g),
            Op::Softmax { x, cols } => {
                let y = self.values[i].data();
                let mut dx = vec![0.0; g.len()];
                for ((dr, gr), yr) in dx.chunks_mut(*cols).zip(g.chunks(*cols)).zip(y.chunks(*cols)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for ((d, gv), yv) in dr.iter_mut().zip(gr).zip(yr) {
                        *d = yv * (gv - dot);
                    }
                }
                add_owned(&mut grads[x.0], dx);
            }
            Op::CrossEntropy { probs, labels, cols } => {
                let p = self.data(*probs);
                let rows = labels.len() as f64;
                let mut dp = vec![0.0; p.len()];
                for (r, &l) in labels.iter().enumerate() {
                    let pv = p[r * cols + l];
                    if pv > PROB_FLOOR {
                        dp[r * cols + l] = -g[0] / (rows * pv);
                    }
                }
                add_owned(&mut grads[probs.0], dp);
            }
            Op::Sum { x } => {
                let dx = vec![g[0]; self.values[x.0].len()];
                add_owned(&mut grads[x.0], dx);
            }
            Op::LogGaussian { w, mu, sigma } => {
                let (ws, ms, ss) = (self.data(*w), self.data(*mu), self.data(*sigma));
                let dw: Vec<f64> = ws
                    .iter()
                    .zip(ms)
                    .zip(ss)
                    .map(|((w, m), s)| -g[0] * (w - m) / (s * s))
                    .collect();
                if tracked(sigma) {
                    let ds = ws
                        .iter()
                        .zip(ms)
                        .zip(ss)
                        .map(|((w, m), s)| g[0] * (-1.0 / s + (w - m).powi(2) / (s * s * s)))
                        .collect();
                    add_owned(&mut grads[sigma.0], ds);
                }
                if tracked(mu) {
                    let dm = dw.iter().map(|v| -v).collect();
                    add_owned(&mut grads[mu.0], dm);
                }
                if tracked(w) {
                    add_owned(&mut grads[w.0], dw);
                }
            }
            Op::LogMixture { w, mixture } => {
                let dw = self
                    .data(*w)
                    .iter()
                    .map(|&wv| g[0] * mixture.d_log_density(wv))
                    .collect();
                add_owned(&mut grads[w.0], dw);
            }
        }
    }
}

/// Two-component zero-mean Gaussian mixture with its per-entry constants folded in.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Mixture {
    /// `ln π_k − ½ ln 2π − ln σ_k`.
    offset: [f64; 2],
    inv_var: [f64; 2],
}

impl Mixture {
    fn new(pi: f64, sigma1: f64, sigma2: f64) -> Self {
        let c = |weight: f64, s: f64| weight.ln() - HALF_LN_2PI - s.ln();
        Self {
            offset: [c(pi, sigma1), c(1.0 - pi, sigma2)],
            inv_var: [1.0 / (sigma1 * sigma1), 1.0 / (sigma2 * sigma2)],
        }
    }

    /// Component log-weights ordered high first, and whether component 0 is the high one.
    fn split(&self, w: f64) -> (f64, f64, bool) {
        let h = 0.5 * w * w;
        let l1 = self.offset[0] - h * self.inv_var[0];
        let l2 = self.offset[1] - h * self.inv_var[1];
        if l1 >= l2 {
            (l1, l2, true)
        } else {
            (l2, l1, false)
        }
    }

    fn log_density(&self, w: f64) -> f64 {
        let (hi, lo, _) = self.split(w);
        if lo == f64::NEG_INFINITY {
            return hi;
        }
        hi + (lo - hi).exp().ln_1p()
    }

    fn d_log_density(&self, w: f64) -> f64 {
        let (hi, lo, first_high) = self.split(w);
        let e = if lo == f64::NEG_INFINITY { 0.0 } else { (lo - hi).exp() };
        let r_hi = 1.0 / (1.0 + e);
        let r_lo = e * r_hi;
        let (r1, r2) = if first_high { (r_hi, r_lo) } else { (r_lo, r_hi) };
        -w * (r1 * self.inv_var[0] + r2 * self.inv_var[1])
    }
}
