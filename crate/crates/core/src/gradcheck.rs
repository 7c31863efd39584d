//! Central finite-difference checks of tape gradients.

use serde::Serialize;

use crate::autograd::{Tape, Var};
use crate::bayes::{self, BoundVariational, ScaleMixturePrior};
use crate::error::{Error, Result};
use crate::masking::{self, MaskMethod, MaskSpec};
use crate::model::{mlp_layers, LayerSpec, Method, Mode, Model, ModelBlueprint, PassContext};
use crate::params::Binder;
use crate::rng::{rng_from, SeedLineage};
use crate::tensor::Tensor;

pub const GRADCHECK_TOL: f64 = 1e-4;
pub const DEFAULT_STEP: f64 = 1e-6;
/// Denominator floor of the relative error, so that gradients near zero are judged on
/// absolute error instead.
pub const REL_FLOOR: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckCase {
    pub name: String,
    pub max_rel_err: f64,
    pub checked: usize,
    /// Coordinates whose perturbation crossed a relu, pooling or floor kink.
    pub skipped: usize,
}

impl GradcheckCase {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL && self.checked > 0
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Evenly spread coordinate indices, at most `limit` of them.
fn coords(n: usize, limit: usize) -> Vec<usize> {
    if n <= limit {
        return (0..n).collect();
    }
    (0..limit).map(|i| i * n / limit).collect()
}

struct Eval {
    loss: f64,
    kinks: u64,
}

/// Checks the gradient of the scalar `f(inputs)` with respect to every input, probing
/// at most `max_coords` coordinates per input.
pub fn finite_diff_check<F>(name: &str, inputs: &[Tensor], max_coords: usize, f: F) -> Result<GradcheckCase>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    let run = |ins: &[Tensor], want_grads: bool| -> Result<(Eval, Vec<Vec<f64>>)> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins
            .iter()
            .map(|t| tape.leaf(t.clone().with_requires_grad(want_grads)))
            .collect();
        let loss = f(&mut tape, &vars)?;
        let eval = Eval {
            loss: tape.value(loss).item(),
            kinks: tape.kink_signature(),
        };
        let mut grads = Vec::new();
        if want_grads {
            tape.backward(loss)?;
            for (v, t) in vars.iter().zip(ins) {
                grads.push(tape.take_grad(*v).unwrap_or_else(|| vec![0.0; t.len()]));
            }
        }
        Ok((eval, grads))
    };
    let (base, grads) = run(inputs, true)?;
    let mut case = GradcheckCase {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = inputs.to_vec();
    for (k, t) in inputs.iter().enumerate() {
        for i in coords(t.len(), max_coords) {
            let orig = t.data()[i];
            work[k].data_mut()[i] = orig + DEFAULT_STEP;
            let (plus, _) = run(&work, false)?;
            work[k].data_mut()[i] = orig - DEFAULT_STEP;
            let (minus, _) = run(&work, false)?;
            work[k].data_mut()[i] = orig;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                case.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * DEFAULT_STEP);
            case.max_rel_err = case.max_rel_err.max(relative_error(grads[k][i], numeric));
            case.checked += 1;
        }
    }
    if !case.max_rel_err.is_finite() {
        return Err(Error::Numerical(format!(
            "gradient check {name} produced a non-finite error"
        )));
    }
    Ok(case)
}

/// Checks the gradient of `Model::objective` with respect to the model's trainable
/// parameters. Masks and weight draws are frozen by the fixed lineage.
pub fn model_check(
    name: &str,
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    n_draws: usize,
    kl_weight: f64,
    max_coords: usize,
) -> Result<GradcheckCase> {
    let lineage = SeedLineage::new(11, 3, 0);
    let run = |m: &Model, want_grads: bool| -> Result<(Eval, std::collections::BTreeMap<String, Vec<f64>>)> {
        let mut tape = Tape::new();
        let mut binder = Binder::new();
        let xv = tape.constant(x.clone());
        let mut ctx = PassContext::new(Mode::Train, lineage.master, lineage.pass);
        let (loss, _) = m.objective(&mut tape, &mut binder, xv, labels, &mut ctx, n_draws, kl_weight)?;
        let eval = Eval {
            loss: tape.value(loss).item(),
            kinks: tape.kink_signature(),
        };
        let grads = if want_grads {
            tape.backward(loss)?;
            binder.take_grads(&mut tape)
        } else {
            Default::default()
        };
        Ok((eval, grads))
    };
    let (base, grads) = run(model, true)?;
    let mut case = GradcheckCase {
        name: name.to_string(),
        max_rel_err: 0.0,
        checked: 0,
        skipped: 0,
    };
    let mut work = model.clone();
    let names: Vec<String> = model.params.trainable().map(|(n, _)| n.to_string()).collect();
    for pname in names {
        let len = model.params.get(&pname)?.len();
        for i in coords(len, max_coords) {
            let orig = model.params.get(&pname)?.data()[i];
            let mut probe = |delta: f64| -> Result<Eval> {
                work.params.get_mut(&pname)?.data_mut()[i] = orig + delta;
                Ok(run(&work, false)?.0)
            };
            let plus = probe(DEFAULT_STEP)?;
            let minus = probe(-DEFAULT_STEP)?;
            work.params.get_mut(&pname)?.data_mut()[i] = orig;
            if plus.kinks != base.kinks || minus.kinks != base.kinks {
                case.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * DEFAULT_STEP);
            let analytic = grads.get(&pname).map_or(0.0, |g| g[i]);
            case.max_rel_err = case.max_rel_err.max(relative_error(analytic, numeric));
            case.checked += 1;
        }
    }
    Ok(case)
}

fn random_tensor(shape: &[usize], seed: u64, scale: f64) -> Tensor {
    let mut rng = rng_from(seed);
    let mut t = bayes::standard_normal(shape, &mut rng);
    t.data_mut().iter_mut().for_each(|v| *v *= scale);
    t
}

/// `Σ out ⊙ R` for a fixed random `R`, turning any output into a scalar loss whose
/// gradient reaches every output coordinate.
fn project(tape: &mut Tape, out: Var, seed: u64) -> Result<Var> {
    let r = random_tensor(tape.shape(out), seed, 1.0);
    let rv = tape.constant(r);
    let prod = tape.mul(out, rv)?;
    Ok(tape.sum(prod))
}

fn frozen_mask(method: MaskMethod, shape: &[usize], seed: u64) -> Result<(MaskSpec, masking::MaskTensor)> {
    let spec = MaskSpec::new(method, 0.5)?;
    let mask = masking::sample_mask(&spec, shape, SeedLineage::new(seed, 0, 0))?;
    Ok((spec, mask))
}

fn tiny_cnn(method: Method) -> Result<Model> {
    let layers = vec![
        LayerSpec::Conv {
            name: "conv1".into(),
            in_ch: 1,
            out_ch: 2,
            kernel: 3,
            masked: false,
        },
        LayerSpec::BatchNorm {
            name: "bn1".into(),
            channels: 2,
        },
        LayerSpec::Relu,
        LayerSpec::MaxPool,
        LayerSpec::Flatten,
        LayerSpec::Dropout {
            name: "drop1".into(),
            masked: false,
        },
        LayerSpec::Dense {
            name: "fc1".into(),
            inputs: 8,
            outputs: 5,
            masked: false,
        },
        LayerSpec::Relu,
        LayerSpec::Dropout {
            name: "drop2".into(),
            masked: false,
        },
        LayerSpec::Dense {
            name: "fc2".into(),
            inputs: 5,
            outputs: 3,
            masked: false,
        },
    ];
    ModelBlueprint::new(layers, vec![1, 4, 4], 3, method, 0.5).build(21)
}

/// The full gradient suite: every layer type alone and in small composites, masked
/// layers with frozen masks, and variational layers with frozen noise.
pub fn gradient_suite() -> Result<Vec<GradcheckCase>> {
    let mut out = Vec::new();
    let all = usize::MAX;

    out.push(finite_diff_check(
        "dense",
        &[
            random_tensor(&[3, 4], 1, 1.0),
            random_tensor(&[5, 4], 2, 0.5),
            random_tensor(&[5], 3, 0.5),
        ],
        all,
        |t, v| {
            let y = t.linear(v[0], v[1], Some(v[2]))?;
            project(t, y, 100)
        },
    )?);

    out.push(finite_diff_check(
        "conv2d",
        &[
            random_tensor(&[2, 2, 5, 5], 4, 1.0),
            random_tensor(&[3, 2, 3, 3], 5, 0.5),
            random_tensor(&[3], 6, 0.5),
        ],
        all,
        |t, v| {
            let y = t.conv2d(v[0], v[1], Some(v[2]), 1)?;
            project(t, y, 101)
        },
    )?);

    out.push(finite_diff_check(
        "batchnorm_train",
        &[
            random_tensor(&[4, 3, 2, 2], 7, 1.0),
            random_tensor(&[3], 8, 1.0),
            random_tensor(&[3], 9, 1.0),
        ],
        all,
        |t, v| {
            let (y, _) = t.batchnorm_train(v[0], v[1], v[2], 1e-5)?;
            project(t, y, 102)
        },
    )?);

    let rm = random_tensor(&[3], 10, 0.3);
    let rv = random_tensor(&[3], 11, 0.3).map(|x| 1.0 + x.abs());
    out.push(finite_diff_check(
        "batchnorm_eval",
        &[
            random_tensor(&[4, 3, 2, 2], 12, 1.0),
            random_tensor(&[3], 13, 1.0),
            random_tensor(&[3], 14, 1.0),
        ],
        all,
        |t, v| {
            let y = t.batchnorm_eval(v[0], v[1], v[2], rm.data(), rv.data(), 1e-5)?;
            project(t, y, 103)
        },
    )?);

    out.push(finite_diff_check(
        "relu_mlp_cross_entropy",
        &[
            random_tensor(&[4, 5], 15, 1.0),
            random_tensor(&[6, 5], 16, 0.5),
            random_tensor(&[6], 17, 0.5),
            random_tensor(&[3, 6], 18, 0.5),
            random_tensor(&[3], 19, 0.5),
        ],
        all,
        |t, v| {
            let h = t.linear(v[0], v[1], Some(v[2]))?;
            let h = t.relu(h);
            let y = t.linear(h, v[3], Some(v[4]))?;
            let p = t.softmax(y);
            t.cross_entropy(p, &[0, 2, 1, 2])
        },
    )?);

    out.push(finite_diff_check(
        "conv_relu_maxpool",
        &[
            random_tensor(&[2, 1, 4, 4], 20, 1.0),
            random_tensor(&[2, 1, 3, 3], 21, 0.7),
        ],
        all,
        |t, v| {
            let y = t.conv2d(v[0], v[1], None, 1)?;
            let y = t.relu(y);
            let y = t.maxpool2d(y)?;
            project(t, y, 104)
        },
    )?);

    for method in [MaskMethod::Dropconnect, MaskMethod::Sdc, MaskMethod::SdcWeak] {
        let (spec, mask) = frozen_mask(method, &[5, 4], 30)?;
        out.push(finite_diff_check(
            &format!("masked_dense_{method}"),
            &[
                random_tensor(&[3, 4], 31, 1.0),
                random_tensor(&[5, 4], 32, 0.5),
                random_tensor(&[5], 33, 0.5),
            ],
            all,
            |t, v| {
                let y = masking::masked_dense_forward(t, v[0], v[1], Some(v[2]), &spec, mask.clone())?;
                project(t, y, 105)
            },
        )?);
    }

    let (spec, mask) = frozen_mask(MaskMethod::SdcStrong, &[3, 2, 3, 3], 34)?;
    out.push(finite_diff_check(
        "masked_conv_sdc_strong",
        &[
            random_tensor(&[2, 2, 4, 4], 35, 1.0),
            random_tensor(&[3, 2, 3, 3], 36, 0.5),
        ],
        all,
        |t, v| {
            let y = masking::masked_conv_forward(t, v[0], v[1], None, &spec, mask.clone())?;
            project(t, y, 106)
        },
    )?);

    let (spec, mask) = frozen_mask(MaskMethod::Dropout, &[3, 6], 37)?;
    out.push(finite_diff_check(
        "dropout_activations",
        &[random_tensor(&[3, 6], 38, 1.0)],
        all,
        |t, v| {
            let y = masking::dropout_forward(t, v[0], &spec, mask.clone())?;
            project(t, y, 107)
        },
    )?);

    let prior = ScaleMixturePrior::default();
    out.push(finite_diff_check(
        "bbb_dense_with_kl",
        &[
            random_tensor(&[3, 4], 40, 1.0),
            random_tensor(&[2, 4], 41, 0.5),
            random_tensor(&[2, 4], 42, 0.5).map(|r| r - 2.0),
            random_tensor(&[2], 43, 0.5),
            random_tensor(&[2], 44, 0.5).map(|r| r - 2.0),
        ],
        all,
        |t, v| {
            // A fresh generator per evaluation freezes epsilon across probes.
            let mut rng = rng_from(45);
            let w = BoundVariational::new(t, v[1], v[2]);
            let b = BoundVariational::new(t, v[3], v[4]);
            let (y, kl) = bayes::bbb_dense_forward(t, v[0], w, b, &prior, &mut rng, true)?;
            let kl = kl.expect("kl requested");
            let fit = project(t, y, 108)?;
            let neg = t.scale(kl.log_prior, -1.0);
            let total = t.add(fit, kl.log_q)?;
            t.add(total, neg)
        },
    )?);

    let x = random_tensor(&[4, 1, 4, 4], 50, 1.0);
    let labels = [0, 1, 2, 1];
    for method in [Method::Deterministic, Method::Dropout, Method::Sdc, Method::Bbb] {
        let model = tiny_cnn(method)?;
        let kl_weight = if method == Method::Bbb { 0.01 } else { 1.0 };
        out.push(model_check(
            &format!("tiny_cnn_{method}"),
            &model,
            &x,
            &labels,
            2,
            kl_weight,
            12,
        )?);
    }

    let mlp = ModelBlueprint::new(mlp_layers(6, 7, 3), vec![6], 3, Method::Dropconnect, 0.3).build(22)?;
    out.push(model_check(
        "mlp_dropconnect",
        &mlp,
        &random_tensor(&[5, 6], 51, 1.0),
        &[0, 1, 2, 0, 1],
        1,
        1.0,
        all,
    )?);
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_map_checks_cleanly() {
        let ok = finite_diff_check("scale", &[random_tensor(&[4], 1, 1.0)], 4, |t, v| {
            let y = t.scale(v[0], 2.0);
            Ok(t.sum(y))
        })
        .unwrap();
        assert!(ok.passed());
        assert_eq!((ok.checked, ok.skipped), (4, 0));
    }

    #[test]
    fn suite_passes() {
        for case in gradient_suite().unwrap() {
            assert!(case.passed(), "{case:?}");
        }
    }

    #[test]
    fn relative_error_floor() {
        assert_eq!(relative_error(1.0, 1.0), 0.0);
        assert!((relative_error(2.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((relative_error(0.0, 1e-6) - 1e-3).abs() < 1e-15);
    }
}
