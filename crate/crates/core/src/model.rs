//! Declarative networks: a layer list plus a stochastic regime (deterministic, masked,
//! or Bayes by Backprop) and the parameters they own.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::bayes::{self, BoundVariational, ElboBreakdown, KlTerm, ScaleMixturePrior};
use crate::error::{Error, Result};
use crate::kernels::BatchStats;
use crate::masking::{self, MaskMethod, MaskSpec};
use crate::params::{fan_in_uniform, Binder, ParamStore};
use crate::rng::{rng_from, SeedLineage};
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Training/inference method of an experiment.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Deterministic,
    Dropout,
    Dropconnect,
    Sdc,
    SdcStrong,
    SdcWeak,
    Bbb,
}

impl Method {
    /// The six stochastic methods compared in the experiments.
    pub const COMPARED: [Method; 6] = [
        Method::Bbb,
        Method::Dropout,
        Method::Dropconnect,
        Method::Sdc,
        Method::SdcStrong,
        Method::SdcWeak,
    ];

    pub fn mask_method(self) -> Option<MaskMethod> {
        match self {
            Method::Dropout => Some(MaskMethod::Dropout),
            Method::Dropconnect => Some(MaskMethod::Dropconnect),
            Method::Sdc => Some(MaskMethod::Sdc),
            Method::SdcStrong => Some(MaskMethod::SdcStrong),
            Method::SdcWeak => Some(MaskMethod::SdcWeak),
            Method::Deterministic | Method::Bbb => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Deterministic => "deterministic",
            Method::Bbb => "bbb",
            m => m.mask_method().unwrap().as_str(),
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [
            Method::Deterministic,
            Method::Dropout,
            Method::Dropconnect,
            Method::Sdc,
            Method::SdcStrong,
            Method::SdcWeak,
            Method::Bbb,
        ]
        .into_iter()
        .find(|m| m.as_str() == s)
        .ok_or_else(|| Error::Config(format!("unknown method {s:?}")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    /// Square kernel, stride 1, zero padding `kernel / 2`.
    Conv {
        name: String,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        masked: bool,
    },
    BatchNorm {
        name: String,
        channels: usize,
    },
    Relu,
    MaxPool,
    Flatten,
    Dense {
        name: String,
        inputs: usize,
        outputs: usize,
        masked: bool,
    },
    /// Activation masking site; identity unless `masked`.
    Dropout {
        name: String,
        masked: bool,
    },
    BayesDense {
        name: String,
        inputs: usize,
        outputs: usize,
    },
}

impl LayerSpec {
    pub fn name(&self) -> Option<&str> {
        match self {
            LayerSpec::Conv { name, .. }
            | LayerSpec::BatchNorm { name, .. }
            | LayerSpec::Dense { name, .. }
            | LayerSpec::Dropout { name, .. }
            | LayerSpec::BayesDense { name, .. } => Some(name),
            LayerSpec::Relu | LayerSpec::MaxPool | LayerSpec::Flatten => None,
        }
    }

    fn is_masked(&self) -> bool {
        matches!(
            self,
            LayerSpec::Conv { masked: true, .. }
                | LayerSpec::Dense { masked: true, .. }
                | LayerSpec::Dropout { masked: true, .. }
        )
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BayesSettings {
    pub prior: ScaleMixturePrior,
    pub rho_init: f64,
}

impl Default for BayesSettings {
    fn default() -> Self {
        Self {
            prior: ScaleMixturePrior::default(),
            rho_init: -5.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Regime {
    Deterministic,
    Masked(MaskSpec),
    Bayes(BayesSettings),
}

/// How a forward pass treats batch norm and the stochastic layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batch statistics, fresh masks / weight draws, KL terms recorded.
    Train,
    /// Running statistics, fresh masks / weight draws (Monte-Carlo inference).
    Sample,
    /// Running statistics, all-ones masks without rescaling, posterior means.
    Deterministic,
}

/// Per-pass state threaded through a forward computation.
pub struct PassContext {
    pub mode: Mode,
    pub master: u64,
    pub pass: u64,
    /// Distinguishes repeated weight draws within one pass.
    pub draw: u64,
    pub bn_updates: Vec<(String, BatchStats)>,
    pub kl_terms: Vec<KlTerm>,
}

impl PassContext {
    pub fn new(mode: Mode, master: u64, pass: u64) -> Self {
        Self {
            mode,
            master,
            pass,
            draw: 0,
            bn_updates: Vec::new(),
            kl_terms: Vec::new(),
        }
    }

    fn lineage(&self, layer: usize) -> SeedLineage {
        SeedLineage::new(self.master, self.pass, layer as u64 | (self.draw << 32))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Architecture {
    /// Two conv blocks (32 and 64 kernels) and a 3136 → 1024 → 10 classifier.
    MnistCnn,
    /// Flatten, one hidden dense layer, output layer.
    Mlp,
}

impl Architecture {
    pub fn as_str(self) -> &'static str {
        match self {
            Architecture::MnistCnn => "mnist_cnn",
            Architecture::Mlp => "mlp",
        }
    }
}

/// Layer list of the MNIST network. Each convolution is followed by batch norm and
/// ReLU; each block ends in 2×2 max pooling.
pub fn mnist_layers() -> Vec<LayerSpec> {
    let conv = |i: usize, in_ch, out_ch| LayerSpec::Conv {
        name: format!("conv{i}"),
        in_ch,
        out_ch,
        kernel: 3,
        masked: false,
    };
    let bn = |i: usize, channels| LayerSpec::BatchNorm {
        name: format!("bn{i}"),
        channels,
    };
    vec![
        conv(1, 1, 32),
        bn(1, 32),
        LayerSpec::Relu,
        conv(2, 32, 32),
        bn(2, 32),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        conv(3, 32, 64),
        bn(3, 64),
        LayerSpec::Relu,
        conv(4, 64, 64),
        bn(4, 64),
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Flatten,
        LayerSpec::Dropout {
            name: "drop1".into(),
            masked: false,
        },
        LayerSpec::Dense {
            name: "fc1".into(),
            inputs: 3136,
            outputs: 1024,
            masked: false,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout {
            name: "drop2".into(),
            masked: false,
        },
        LayerSpec::Dense {
            name: "fc2".into(),
            inputs: 1024,
            outputs: 10,
            masked: false,
        },
    ]
}

pub fn mlp_layers(inputs: usize, hidden: usize, classes: usize) -> Vec<LayerSpec> {
    vec![
        LayerSpec::Flatten,
        LayerSpec::Dropout {
            name: "drop1".into(),
            masked: false,
        },
        LayerSpec::Dense {
            name: "fc1".into(),
            inputs,
            outputs: hidden,
            masked: false,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout {
            name: "drop2".into(),
            masked: false,
        },
        LayerSpec::Dense {
            name: "fc2".into(),
            inputs: hidden,
            outputs: classes,
            masked: false,
        },
    ]
}

/// Default mask sites: every dense layer for the weight-masking methods, every
/// activation site for dropout.
pub fn default_mask_sites(layers: &[LayerSpec], method: MaskMethod) -> Vec<String> {
    layers
        .iter()
        .filter(|l| match l {
            LayerSpec::Dense { .. } => method.masks_weights(),
            LayerSpec::Dropout { .. } => !method.masks_weights(),
            _ => false,
        })
        .filter_map(|l| l.name().map(str::to_string))
        .collect()
}

fn apply_mask_sites(layers: &mut [LayerSpec], method: MaskMethod, sites: &[String]) -> Result<()> {
    for site in sites {
        let layer = layers
            .iter_mut()
            .find(|l| l.name() == Some(site.as_str()))
            .ok_or_else(|| Error::Config(format!("unknown mask site {site:?}")))?;
        match layer {
            LayerSpec::Conv { masked, .. } | LayerSpec::Dense { masked, .. } if method.masks_weights() => {
                *masked = true
            }
            LayerSpec::Dropout { masked, .. } if !method.masks_weights() => *masked = true,
            _ => return Err(Error::Config(format!("layer {site:?} cannot carry a {method} mask"))),
        }
    }
    Ok(())
}

fn make_bayesian(layers: &mut [LayerSpec]) {
    for l in layers.iter_mut() {
        if let LayerSpec::Dense {
            name, inputs, outputs, ..
        } = l
        {
            *l = LayerSpec::BayesDense {
                name: name.clone(),
                inputs: *inputs,
                outputs: *outputs,
            };
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub layers: Vec<LayerSpec>,
    pub regime: Regime,
    pub params: ParamStore,
    /// Shape of one input sample, without the batch axis.
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
}

/// Everything needed to instantiate a network.
#[derive(Clone, Debug, PartialEq)]
pub struct ModelBlueprint {
    pub layers: Vec<LayerSpec>,
    pub input_shape: Vec<usize>,
    pub n_classes: usize,
    pub method: Method,
    pub p: f64,
    pub mask_sites: Option<Vec<String>>,
    pub bayes: BayesSettings,
}

impl ModelBlueprint {
    pub fn new(layers: Vec<LayerSpec>, input_shape: Vec<usize>, n_classes: usize, method: Method, p: f64) -> Self {
        Self {
            layers,
            input_shape,
            n_classes,
            method,
            p,
            mask_sites: None,
            bayes: BayesSettings::default(),
        }
    }

    /// Resolves the layer list and regime, and initializes parameters from `init_seed`.
    pub fn build(&self, init_seed: u64) -> Result<Model> {
        let mut layers = self.layers.clone();
        let regime = match self.method {
            Method::Deterministic => Regime::Deterministic,
            Method::Bbb => {
                self.bayes.prior.validate()?;
                make_bayesian(&mut layers);
                Regime::Bayes(self.bayes)
            }
            m => {
                let mm = m.mask_method().unwrap();
                let spec = MaskSpec::new(mm, self.p)?;
                let sites = self
                    .mask_sites
                    .clone()
                    .unwrap_or_else(|| default_mask_sites(&layers, mm));
                apply_mask_sites(&mut layers, mm, &sites)?;
                Regime::Masked(spec)
            }
        };
        let params = init_params(&layers, &self.bayes, init_seed)?;
        Ok(Model {
            layers,
            regime,
            params,
            input_shape: self.input_shape.clone(),
            n_classes: self.n_classes,
        })
    }
}

/// The MNIST network for `method` with leave-out rate `p` and default mask placement.
pub fn build_mnist_model(method: Method, p: f64, init_seed: u64) -> Result<Model> {
    ModelBlueprint::new(mnist_layers(), vec![1, 28, 28], 10, method, p).build(init_seed)
}

fn init_params(layers: &[LayerSpec], bayes: &BayesSettings, seed: u64) -> Result<ParamStore> {
    let mut rng = rng_from(seed);
    let mut store = ParamStore::new();
    for layer in layers {
        match layer {
            LayerSpec::Conv {
                name,
                in_ch,
                out_ch,
                kernel,
                ..
            } => {
                let fan_in = in_ch * kernel * kernel;
                store.insert_param(
                    &format!("{name}.weight"),
                    fan_in_uniform(&[*out_ch, *in_ch, *kernel, *kernel], fan_in, &mut rng),
                )?;
                store.insert_param(&format!("{name}.bias"), fan_in_uniform(&[*out_ch], fan_in, &mut rng))?;
            }
            LayerSpec::BatchNorm { name, channels } => {
                store.insert_param(&format!("{name}.gamma"), Tensor::ones(&[*channels]))?;
                store.insert_param(&format!("{name}.beta"), Tensor::zeros(&[*channels]))?;
                store.insert_buffer(&format!("{name}.running_mean"), Tensor::zeros(&[*channels]))?;
                store.insert_buffer(&format!("{name}.running_var"), Tensor::ones(&[*channels]))?;
            }
            LayerSpec::Dense {
                name, inputs, outputs, ..
            } => {
                store.insert_param(
                    &format!("{name}.weight"),
                    fan_in_uniform(&[*outputs, *inputs], *inputs, &mut rng),
                )?;
                store.insert_param(&format!("{name}.bias"), fan_in_uniform(&[*outputs], *inputs, &mut rng))?;
            }
            LayerSpec::BayesDense { name, inputs, outputs } => {
                store.insert_param(
                    &format!("{name}.weight_mu"),
                    fan_in_uniform(&[*outputs, *inputs], *inputs, &mut rng),
                )?;
                store.insert_param(
                    &format!("{name}.weight_rho"),
                    Tensor::full(&[*outputs, *inputs], bayes.rho_init),
                )?;
                store.insert_param(
                    &format!("{name}.bias_mu"),
                    fan_in_uniform(&[*outputs], *inputs, &mut rng),
                )?;
                store.insert_param(&format!("{name}.bias_rho"), Tensor::full(&[*outputs], bayes.rho_init))?;
            }
            LayerSpec::Relu | LayerSpec::MaxPool | LayerSpec::Flatten | LayerSpec::Dropout { .. } => {}
        }
    }
    Ok(store)
}

impl Model {
    pub fn method_mask(&self) -> Option<&MaskSpec> {
        match &self.regime {
            Regime::Masked(s) => Some(s),
            _ => None,
        }
    }

    fn is_stochastic_layer(&self, layer: &LayerSpec) -> bool {
        match (&self.regime, layer) {
            (Regime::Masked(_), l) => l.is_masked(),
            (Regime::Bayes(_), LayerSpec::BayesDense { .. }) => true,
            _ => false,
        }
    }

    /// Whether Monte-Carlo passes can differ from one another.
    pub fn is_stochastic(&self) -> bool {
        let active = match &self.regime {
            Regime::Deterministic => false,
            Regime::Masked(s) => s.p() > 0.0,
            Regime::Bayes(_) => true,
        };
        active && self.layers.iter().any(|l| self.is_stochastic_layer(l))
    }

    /// Index of the first layer whose output varies between Monte-Carlo passes. Layers
    /// before it can be evaluated once and shared across passes.
    pub fn stochastic_split(&self) -> usize {
        self.layers
            .iter()
            .position(|l| self.is_stochastic_layer(l))
            .unwrap_or(self.layers.len())
    }

    pub fn forward(&self, tape: &mut Tape, binder: &mut Binder, x: Var, ctx: &mut PassContext) -> Result<Var> {
        self.forward_range(tape, binder, x, ctx, 0..self.layers.len())
    }

    /// Runs `layers[range]` on `x`, returning logits when the range reaches the end.
    pub fn forward_range(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        mut x: Var,
        ctx: &mut PassContext,
        range: Range<usize>,
    ) -> Result<Var> {
        for idx in range {
            x = self.layer_forward(idx, tape, binder, x, ctx)?;
        }
        Ok(x)
    }

    fn layer_forward(
        &self,
        idx: usize,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        ctx: &mut PassContext,
    ) -> Result<Var> {
        let sampling = ctx.mode != Mode::Deterministic;
        let store = &self.params;
        let mask_spec = self.method_mask().copied().filter(|_| sampling);
        match &self.layers[idx] {
            LayerSpec::Conv {
                name, kernel, masked, ..
            } => {
                let k = binder.bind(tape, store, &format!("{name}.weight"))?;
                let b = binder.bind(tape, store, &format!("{name}.bias"))?;
                match mask_spec.filter(|_| *masked) {
                    Some(spec) => {
                        let mask = masking::sample_mask(&spec, tape.shape(k), ctx.lineage(idx))?;
                        masking::masked_conv_forward(tape, x, k, Some(b), &spec, mask)
                    }
                    None => tape.conv2d(x, k, Some(b), kernel / 2),
                }
            }
            LayerSpec::BatchNorm { name, .. } => {
                let g = binder.bind(tape, store, &format!("{name}.gamma"))?;
                let b = binder.bind(tape, store, &format!("{name}.beta"))?;
                if ctx.mode == Mode::Train {
                    let (y, stats) = tape.batchnorm_train(x, g, b, BN_EPS)?;
                    ctx.bn_updates.push((name.clone(), stats));
                    Ok(y)
                } else {
                    let mean = store.get(&format!("{name}.running_mean"))?.data();
                    let var = store.get(&format!("{name}.running_var"))?.data();
                    tape.batchnorm_eval(x, g, b, mean, var, BN_EPS)
                }
            }
            LayerSpec::Relu => Ok(tape.relu(x)),
            LayerSpec::MaxPool => tape.maxpool2d(x),
            LayerSpec::Flatten => {
                let s = tape.shape(x).to_vec();
                let rest: usize = s[1..].iter().product();
                tape.reshape(x, &[s[0], rest])
            }
            LayerSpec::Dense { name, masked, .. } => {
                let w = binder.bind(tape, store, &format!("{name}.weight"))?;
                let b = binder.bind(tape, store, &format!("{name}.bias"))?;
                match mask_spec.filter(|_| *masked) {
                    Some(spec) => {
                        let mask = masking::sample_mask(&spec, tape.shape(w), ctx.lineage(idx))?;
                        masking::masked_dense_forward(tape, x, w, Some(b), &spec, mask)
                    }
                    None => tape.linear(x, w, Some(b)),
                }
            }
            LayerSpec::Dropout { masked, .. } => match mask_spec.filter(|_| *masked) {
                Some(spec) => {
                    // Training masks every activation; a Monte-Carlo pass shares one
                    // mask across the batch so that a pass is a single network draw.
                    let shape = tape.shape(x).to_vec();
                    let mask_shape = if ctx.mode == Mode::Train {
                        &shape[..]
                    } else {
                        &shape[1..]
                    };
                    let mask = masking::sample_mask(&spec, mask_shape, ctx.lineage(idx))?;
                    masking::dropout_forward(tape, x, &spec, mask)
                }
                None => Ok(x),
            },
            LayerSpec::BayesDense { name, .. } => {
                let Regime::Bayes(settings) = &self.regime else {
                    return Err(Error::Config(format!("variational layer {name} outside a Bayes model")));
                };
                let mut bound = |part: &str| -> Result<BoundVariational> {
                    let mu = binder.bind(tape, store, &format!("{name}.{part}_mu"))?;
                    let rho = binder.bind(tape, store, &format!("{name}.{part}_rho"))?;
                    // One softplus per tape, shared by every weight draw.
                    let sigma = binder.derived(&format!("{name}.{part}_sigma"), || Ok(tape.softplus(rho)))?;
                    Ok(BoundVariational { mu, rho, sigma })
                };
                if !sampling {
                    let mu_w = binder.bind(tape, store, &format!("{name}.weight_mu"))?;
                    let mu_b = binder.bind(tape, store, &format!("{name}.bias_mu"))?;
                    return tape.linear(x, mu_w, Some(mu_b));
                }
                let (weight, bias) = (bound("weight")?, bound("bias")?);
                let mut rng = ctx.lineage(idx).rng();
                let with_kl = ctx.mode == Mode::Train;
                let (y, kl) = bayes::bbb_dense_forward(tape, x, weight, bias, &settings.prior, &mut rng, with_kl)?;
                ctx.kl_terms.extend(kl);
                Ok(y)
            }
        }
    }

    /// Training objective for one batch.
    ///
    /// Deterministic and masked models: mean cross-entropy averaged over `n_draws`
    /// stochastic passes. Bayes models: for each of `n_draws` weight draws,
    /// `kl_weight · (log q − log p) + NLL` with the NLL summed over the batch, averaged
    /// over draws. Layers before the first stochastic layer run once and are shared.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        tape: &mut Tape,
        binder: &mut Binder,
        x: Var,
        labels: &[usize],
        ctx: &mut PassContext,
        n_draws: usize,
        kl_weight: f64,
    ) -> Result<(Var, ElboBreakdown)> {
        if n_draws == 0 {
            return Err(Error::Config("at least one training draw is required".into()));
        }
        if labels.is_empty() {
            return Err(Error::Config("empty batch".into()));
        }
        let split = self.stochastic_split();
        let shared = self.forward_range(tape, binder, x, ctx, 0..split)?;
        let bayes = matches!(self.regime, Regime::Bayes(_));
        let batch = labels.len() as f64;
        let mut totals = Vec::with_capacity(n_draws);
        let (mut sum_q, mut sum_p, mut sum_nll) = (0.0, 0.0, 0.0);
        for d in 0..n_draws {
            ctx.draw = d as u64;
            ctx.kl_terms.clear();
            let logits = self.forward_range(tape, binder, shared, ctx, split..self.layers.len())?;
            let probs = tape.softmax(logits);
            let ce = tape.cross_entropy(probs, labels)?;
            if !bayes {
                sum_nll += tape.value(ce).item();
                totals.push(ce);
                continue;
            }
            let nll = tape.scale(ce, batch);
            let mut total = nll;
            for term in std::mem::take(&mut ctx.kl_terms) {
                sum_q += tape.value(term.log_q).item();
                sum_p += tape.value(term.log_prior).item();
                let neg_p = tape.scale(term.log_prior, -1.0);
                let kl = tape.add(term.log_q, neg_p)?;
                let weighted = tape.scale(kl, kl_weight);
                total = tape.add(total, weighted)?;
            }
            sum_nll += tape.value(nll).item();
            totals.push(total);
        }
        ctx.draw = 0;
        let mut loss = totals[0];
        for &t in &totals[1..] {
            loss = tape.add(loss, t)?;
        }
        let loss = tape.scale(loss, 1.0 / n_draws as f64);
        let n = n_draws as f64;
        let (log_q, log_prior, nll) = (sum_q / n, sum_p / n, sum_nll / n);
        let breakdown = ElboBreakdown {
            log_q,
            log_prior,
            nll,
            kl_weight,
            total: kl_weight * (log_q - log_prior) + nll,
        };
        Ok((loss, breakdown))
    }

    /// Folds batch statistics from a training pass into the running estimates.
    pub fn apply_bn_updates(&mut self, updates: &[(String, BatchStats)]) -> Result<()> {
        for (name, stats) in updates {
            let unbias = if stats.count > 1 {
                stats.count as f64 / (stats.count as f64 - 1.0)
            } else {
                1.0
            };
            let mean = self.params.get_mut(&format!("{name}.running_mean"))?;
            for (r, m) in mean.data_mut().iter_mut().zip(&stats.mean) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * m;
            }
            let var = self.params.get_mut(&format!("{name}.running_var"))?;
            for (r, v) in var.data_mut().iter_mut().zip(&stats.var_biased) {
                *r = (1.0 - BN_MOMENTUM) * *r + BN_MOMENTUM * v * unbias;
            }
        }
        Ok(())
    }

    /// Batch input shape for `n` samples.
    pub fn batch_shape(&self, n: usize) -> Vec<usize> {
        let mut s = vec![n];
        s.extend_from_slice(&self.input_shape);
        s
    }

    /// Softmax outputs of one forward pass over `inputs` in the given mode.
    pub fn predict(&self, inputs: &Tensor, mode: Mode, master: u64, pass: u64) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let x = tape.constant(inputs.clone());
        let mut ctx = PassContext::new(mode, master, pass);
        let logits = self.forward(&mut tape, &mut binder, x, &mut ctx)?;
        let probs = tape.softmax(logits);
        Ok(tape.value(probs).clone())
    }
}
