//! Bayes by Backprop: Gaussian variational weights under a scale-mixture prior,
//! trained with the reparameterized Monte-Carlo ELBO.

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autograd::{softplus, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{Mode, Model, PassContext};
use crate::params::Binder;
use crate::rng::{Rng, SeedLineage};
use crate::tensor::Tensor;

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

/// `p(w) = π N(w; 0, σ1²) + (1 − π) N(w; 0, σ2²)`, independently per weight.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScaleMixturePrior {
    pub pi: f64,
    pub sigma1: f64,
    pub sigma2: f64,
}

impl Default for ScaleMixturePrior {
    fn default() -> Self {
        Self {
            pi: 0.5,
            sigma1: 1.0,
            sigma2: (-6.0f64).exp(),
        }
    }
}

impl ScaleMixturePrior {
    pub fn new(pi: f64, sigma1: f64, sigma2: f64) -> Result<Self> {
        let p = Self { pi, sigma1, sigma2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.pi) || !(self.sigma1 > 0.0) || !(self.sigma2 > 0.0) {
            return Err(Error::Config(format!("invalid scale-mixture prior {self:?}")));
        }
        Ok(())
    }

    pub fn log_density(&self, w: f64) -> f64 {
        log_mixture_prior(&[w], self)
    }
}

/// Summed Gaussian log-density `Σ ln N(w_i; mu_i, sigma_i²)`.
pub fn log_gaussian(w: &[f64], mu: &[f64], sigma: &[f64]) -> f64 {
    w.iter()
        .zip(mu)
        .zip(sigma)
        .map(|((w, m), s)| -HALF_LN_2PI - s.ln() - 0.5 * ((w - m) / s).powi(2))
        .sum()
}

/// Summed mixture log-density, evaluated with log-sum-exp.
pub fn log_mixture_prior(w: &[f64], prior: &ScaleMixturePrior) -> f64 {
    let comp = |w: f64, log_pi: f64, s: f64| log_pi - HALF_LN_2PI - s.ln() - 0.5 * (w / s).powi(2);
    let (l1, l2) = (prior.pi.ln(), (1.0 - prior.pi).ln());
    w.iter()
        .map(|&w| {
            let a = comp(w, l1, prior.sigma1);
            let b = comp(w, l2, prior.sigma2);
            let m = a.max(b);
            m + ((a - m).exp() + (b - m).exp()).ln()
        })
        .sum()
}

/// `KL(N(mu_q, sigma_q²) ‖ N(mu_p, sigma_p²))`.
pub fn gaussian_kl(mu_q: f64, sigma_q: f64, mu_p: f64, sigma_p: f64) -> f64 {
    (sigma_p / sigma_q).ln() + (sigma_q.powi(2) + (mu_q - mu_p).powi(2)) / (2.0 * sigma_p.powi(2)) - 0.5
}

/// Per-parameter Gaussian posterior `N(mu, softplus(rho)²)`.
#[derive(Clone, Debug, PartialEq)]
pub struct VariationalWeight {
    pub mu: Tensor,
    pub rho: Tensor,
    pub prior: ScaleMixturePrior,
}

impl VariationalWeight {
    pub fn new(mu: Tensor, rho: Tensor, prior: ScaleMixturePrior) -> Result<Self> {
        if mu.shape() != rho.shape() {
            return Err(Error::dim("variational weight", mu.shape(), rho.shape()));
        }
        if !mu.all_finite() || !rho.all_finite() {
            return Err(Error::Domain("mu and rho must be finite".into()));
        }
        prior.validate()?;
        Ok(Self { mu, rho, prior })
    }

    pub fn sigma(&self) -> Tensor {
        self.rho.map(softplus)
    }

    /// `mu + softplus(rho) · eps` outside any tape.
    pub fn sample(&self, eps: &Tensor) -> Result<Tensor> {
        if eps.shape() != self.mu.shape() {
            return Err(Error::dim("sample_weight", self.mu.shape(), eps.shape()));
        }
        let data = self
            .mu
            .data()
            .iter()
            .zip(self.rho.data())
            .zip(eps.data())
            .map(|((m, r), e)| m + softplus(*r) * e)
            .collect();
        Tensor::new(self.mu.shape(), data)
    }
}

/// Inverse of softplus, for building a `rho` with a chosen scale.
pub fn rho_for_sigma(sigma: f64) -> f64 {
    sigma + (-(-sigma).exp_m1()).ln()
}

pub fn standard_normal(shape: &[usize], rng: &mut Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::from_parts(shape.to_vec(), data)
}

/// Reparameterized draw on a tape; differentiable in `mu` and `rho`.
pub fn sample_weight(tape: &mut Tape, mu: Var, rho: Var, eps: Tensor) -> Result<Var> {
    tape.reparam(mu, rho, eps)
}

/// `log q(w | θ)` and `log p(w)` contributions of one sampled layer.
#[derive(Clone, Copy, Debug)]
pub struct KlTerm {
    pub log_q: Var,
    pub log_prior: Var,
}

/// One variational parameter pair bound on a tape, with `sigma = softplus(rho)`.
#[derive(Clone, Copy, Debug)]
pub struct BoundVariational {
    pub mu: Var,
    pub rho: Var,
    pub sigma: Var,
}

impl BoundVariational {
    pub fn new(tape: &mut Tape, mu: Var, rho: Var) -> Self {
        let sigma = tape.softplus(rho);
        Self { mu, rho, sigma }
    }
}

/// Dense forward with freshly sampled weights and bias. When `with_kl` is set the
/// log-densities of the draw are recorded as well.
pub fn bbb_dense_forward(
    tape: &mut Tape,
    v_in: Var,
    weight: BoundVariational,
    bias: BoundVariational,
    prior: &ScaleMixturePrior,
    rng: &mut Rng,
    with_kl: bool,
) -> Result<(Var, Option<KlTerm>)> {
    let wshape = tape.shape(weight.mu).to_vec();
    let bshape = tape.shape(bias.mu).to_vec();
    let eps_w = standard_normal(&wshape, rng);
    let eps_b = standard_normal(&bshape, rng);
    let w = tape.shift_scale(weight.mu, weight.sigma, eps_w)?;
    let b = tape.shift_scale(bias.mu, bias.sigma, eps_b)?;
    let out = tape.linear(v_in, w, Some(b))?;
    if !with_kl {
        return Ok((out, None));
    }
    let mut log_q = Vec::with_capacity(2);
    let mut log_p = Vec::with_capacity(2);
    for (sample, vp) in [(w, weight), (b, bias)] {
        log_q.push(tape.log_gaussian(sample, vp.mu, vp.sigma)?);
        log_p.push(tape.log_mixture_prior(sample, prior.pi, prior.sigma1, prior.sigma2));
    }
    let log_q = tape.add(log_q[0], log_q[1])?;
    let log_prior = tape.add(log_p[0], log_p[1])?;
    Ok((out, Some(KlTerm { log_q, log_prior })))
}

/// Scalar pieces of the Monte-Carlo minibatch objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ElboBreakdown {
    pub log_q: f64,
    pub log_prior: f64,
    pub nll: f64,
    pub kl_weight: f64,
    pub total: f64,
}

/// How the complexity cost is spread over the `M` minibatches of an epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KlSchedule {
    /// `1 / M` for every minibatch.
    #[default]
    Uniform,
    /// `2^(M − i) / (2^M − 1)` for the `i`-th minibatch (1-based).
    Geometric,
}

impl KlSchedule {
    pub fn weight(self, batch_index: usize, n_batches: usize) -> f64 {
        let m = n_batches as f64;
        match self {
            KlSchedule::Uniform => 1.0 / m,
            KlSchedule::Geometric => {
                let i = (batch_index + 1) as f64;
                // 2^(M-i) / (2^M - 1) = 2^(-i) / (1 - 2^(-M)); stays finite for large M.
                (-i).exp2() / (1.0 - (-m).exp2())
            }
        }
    }
}

/// Evaluates the minibatch objective of a Bayes-by-Backprop model for one batch,
/// averaging over `n_train_samples` independent weight draws.
pub fn elbo_minibatch(
    model: &Model,
    inputs: &Tensor,
    labels: &[usize],
    n_train_samples: usize,
    kl_weight: f64,
    lineage: SeedLineage,
) -> Result<ElboBreakdown> {
    if labels.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut tape = Tape::new();
    let mut binder = Binder::new();
    let x = tape.constant(inputs.clone());
    let mut ctx = PassContext::new(Mode::Train, lineage.master, lineage.pass);
    let (_, breakdown) = model.objective(&mut tape, &mut binder, x, labels, &mut ctx, n_train_samples, kl_weight)?;
    Ok(breakdown)
}

/// Monte-Carlo estimate of `E_q[log q(w) − log p(w)]` with its standard error.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_error: f64,
}

pub fn monte_carlo_kl(vw: &VariationalWeight, n_draws: usize, rng: &mut Rng) -> Result<McEstimate> {
    if n_draws < 2 {
        return Err(Error::Config("need at least two draws".into()));
    }
    let sigma = vw.sigma();
    let mut sum = 0.0;
    let mut sum_sq = 0.0;
    for _ in 0..n_draws {
        let eps = standard_normal(vw.mu.shape(), rng);
        let w = vw.sample(&eps)?;
        let v = log_gaussian(w.data(), vw.mu.data(), sigma.data()) - log_mixture_prior(w.data(), &vw.prior);
        sum += v;
        sum_sq += v * v;
    }
    let n = n_draws as f64;
    let mean = sum / n;
    let var = (sum_sq / n - mean * mean).max(0.0) * n / (n - 1.0);
    Ok(McEstimate {
        mean,
        std_error: (var / n).sqrt(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;

    #[test]
    fn density_at_mean() {
        let s: f64 = 0.3;
        let v = log_gaussian(&[1.2], &[1.2], &[s]);
        assert!((v + 0.5 * (2.0 * std::f64::consts::PI * s * s).ln()).abs() < 1e-14);
    }

    #[test]
    fn mixture_direct_evaluation() {
        let prior = ScaleMixturePrior::new(0.5, 1.0, 0.1).unwrap();
        let n = |s: f64| 1.0 / ((2.0 * std::f64::consts::PI).sqrt() * s);
        let expect = (0.5 * n(1.0) + 0.5 * n(0.1)).ln();
        assert!((prior.log_density(0.0) - expect).abs() < 1e-14);
        let unit = ScaleMixturePrior::new(1.0, 0.8, 0.1).unwrap();
        assert!((unit.log_density(0.4) - log_gaussian(&[0.4], &[0.0], &[0.8])).abs() < 1e-14);
    }

    #[test]
    fn reparameterization_closed_forms() {
        let rho = rho_for_sigma(0.5);
        assert!((softplus(rho) - 0.5).abs() < 1e-14);
        let vw = VariationalWeight::new(
            Tensor::new(&[2], vec![0.3, -1.0]).unwrap(),
            Tensor::full(&[2], rho),
            ScaleMixturePrior::default(),
        )
        .unwrap();
        let at_zero = vw.sample(&Tensor::zeros(&[2])).unwrap();
        assert_eq!(at_zero.data(), vw.mu.data());
        let at_one = vw.sample(&Tensor::ones(&[2])).unwrap();
        assert!((at_one.data()[0] - 0.8).abs() < 1e-14);
        assert!((at_one.data()[1] + 0.5).abs() < 1e-14);
    }

    #[test]
    fn sample_std_matches_sigma() {
        let sigma = 0.37;
        let vw = VariationalWeight::new(
            Tensor::zeros(&[100_000]),
            Tensor::full(&[100_000], rho_for_sigma(sigma)),
            ScaleMixturePrior::default(),
        )
        .unwrap();
        let mut rng = rng_from(11);
        let w = vw.sample(&standard_normal(&[100_000], &mut rng)).unwrap();
        let n = w.len() as f64;
        let mean = w.data().iter().sum::<f64>() / n;
        let sd = (w.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt();
        assert!((sd / sigma - 1.0).abs() < 0.01, "sd {sd}");
    }

    #[test]
    fn geometric_schedule_sums_to_one() {
        let m = 40;
        let total: f64 = (0..m).map(|i| KlSchedule::Geometric.weight(i, m)).sum();
        assert!((total - 1.0).abs() < 1e-12);
        let uniform: f64 = (0..m).map(|i| KlSchedule::Uniform.weight(i, m)).sum();
        assert!((uniform - 1.0).abs() < 1e-12);
    }

    #[test]
    fn rejects_bad_prior() {
        assert!(ScaleMixturePrior::new(1.5, 1.0, 0.1).is_err());
        assert!(ScaleMixturePrior::new(0.5, 0.0, 0.1).is_err());
    }
}
