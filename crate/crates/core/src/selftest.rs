//! Quick end-to-end sanity checks behind `softdrop selftest`.

use crate::checkpoint;
use crate::config::ExperimentConfig;
use crate::data;
use crate::gradcheck;
use crate::masking::{self, MaskMethod, MaskSpec};
use crate::model::{mlp_layers, Method, ModelBlueprint};
use crate::optim::Adadelta;
use crate::rng::SeedLineage;
use crate::tensor::Tensor;
use crate::uncertainty;
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub struct SelfCheck {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

fn check(name: &'static str, f: impl FnOnce() -> Result<(bool, String)>) -> SelfCheck {
    match f() {
        Ok((passed, detail)) => SelfCheck { name, passed, detail },
        Err(e) => SelfCheck {
            name,
            passed: false,
            detail: format!("error: {e}"),
        },
    }
}

pub fn run_all() -> Vec<SelfCheck> {
    vec![
        check("mutual_information", || {
            let mi = uncertainty::mutual_information(&[vec![0.8, 0.2], vec![0.6, 0.4]])?;
            Ok(((mi - 0.0349).abs() < 5e-5, format!("{mi:.6} bits")))
        }),
        check("entropy", || {
            let h = uncertainty::entropy(&[0.1; 10])?;
            Ok(((h - 10f64.log2()).abs() < 1e-12, format!("{h:.6} bits")))
        }),
        check("idx_fixture", || {
            let a = data::parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2, 9])?;
            let short = data::parse_idx(&[0, 0, 8, 1, 0, 0, 0, 3, 7, 2]).is_err();
            Ok((a.payload == [7, 2, 9] && short, format!("dims {:?}", a.dims)))
        }),
        check("adadelta_first_step", || {
            let mut w = [0.0];
            Adadelta::default().step_slice("w", &mut w, &[1.0], 1.0)?;
            Ok(((w[0] + 3.1623e-3).abs() < 1e-7, format!("{:.6e}", w[0])))
        }),
        check("mask_expectation", || {
            let spec = MaskSpec::new(MaskMethod::SdcWeak, 0.5)?;
            let m = masking::sample_mask(&spec, &[20_000], SeedLineage::new(1, 0, 0))?;
            let mean = m.values.data().iter().sum::<f64>() / 20_000.0;
            let e = masking::expected_mask_value(&spec);
            Ok(((mean - e).abs() < 0.01, format!("mean {mean:.4} vs {e:.4}")))
        }),
        check("gradients", || {
            let cases = gradcheck::gradient_suite()?;
            let worst = cases.iter().map(|c| c.max_rel_err).fold(0.0, f64::max);
            Ok((
                cases.iter().all(|c| c.passed()),
                format!("{} cases, worst {worst:.2e}", cases.len()),
            ))
        }),
        check("mc_replay", || {
            let model = ModelBlueprint::new(mlp_layers(4, 8, 3), vec![4], 3, Method::Sdc, 0.5).build(3)?;
            let x = Tensor::new(&[2, 4], vec![0.1, 0.5, 0.9, 0.3, 0.7, 0.2, 0.4, 0.8])?;
            let a = uncertainty::mc_predict_batch(&model, &x, 20, 9)?;
            let b = uncertainty::mc_predict_batch(&model, &x, 20, 9)?;
            Ok((
                a == b && a[0].mutual_information > 0.0,
                format!("mi {:.4e}", a[0].mutual_information),
            ))
        }),
        check("checkpoint_round_trip", || {
            let cfg = ExperimentConfig::desk(Method::Bbb, None);
            let model = ModelBlueprint::new(mlp_layers(4, 8, 3), vec![4], 3, Method::Bbb, 0.0).build(3)?;
            let bytes = checkpoint::to_bytes(&cfg, &model.params);
            let (c2, p2) = checkpoint::from_bytes(&bytes)?;
            Ok((c2 == cfg && p2 == model.params, format!("{} bytes", bytes.len())))
        }),
    ]
}

#[cfg(test)]
mod tests {
    #[test]
    fn all_pass() {
        for c in super::run_all() {
            assert!(c.passed, "{c:?}");
        }
    }
}
