//! Dropout, DropConnect and SoftDropConnect masks.
//!
//! Every entry of a mask is drawn independently. For the Bernoulli methods an entry is
//! `0` with probability `p` and `1` otherwise. For the SoftDropConnect family an entry is
//! left at `1` with probability `1 − p` and otherwise replaced by a draw from `U(a, b)`:
//! `(0, 1)` for plain SDC, `(0, 0.5)` for the strong variant, `(0.5, 1)` for the weak one.
//!
//! Masked layers divide the masked pre-activation product by the expected mask value,
//! so `E_z[(z ⊙ w) · v] / E[z] = w · v` for every method. Bias terms are neither masked
//! nor rescaled.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::rng::SeedLineage;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMethod {
    Dropout,
    Dropconnect,
    Sdc,
    SdcStrong,
    SdcWeak,
}

impl MaskMethod {
    pub const ALL: [MaskMethod; 5] = [
        MaskMethod::Dropout,
        MaskMethod::Dropconnect,
        MaskMethod::Sdc,
        MaskMethod::SdcStrong,
        MaskMethod::SdcWeak,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            MaskMethod::Dropout => "dropout",
            MaskMethod::Dropconnect => "dropconnect",
            MaskMethod::Sdc => "sdc",
            MaskMethod::SdcStrong => "sdc_strong",
            MaskMethod::SdcWeak => "sdc_weak",
        }
    }

    /// True for methods that mask weights rather than activations.
    pub fn masks_weights(self) -> bool {
        self != MaskMethod::Dropout
    }

    pub fn is_soft(self) -> bool {
        matches!(self, MaskMethod::Sdc | MaskMethod::SdcStrong | MaskMethod::SdcWeak)
    }

    /// Uniform bounds used by the soft methods.
    pub fn default_bounds(self) -> Option<(f64, f64)> {
        match self {
            MaskMethod::Sdc => Some((0.0, 1.0)),
            MaskMethod::SdcStrong => Some((0.0, 0.5)),
            MaskMethod::SdcWeak => Some((0.5, 1.0)),
            MaskMethod::Dropout | MaskMethod::Dropconnect => None,
        }
    }
}

impl fmt::Display for MaskMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MaskMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MaskMethod::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown mask method {s:?}")))
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
struct RawMaskSpec {
    method: MaskMethod,
    p: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bounds: Option<(f64, f64)>,
}

/// The sampling law of one masked layer.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawMaskSpec", into = "RawMaskSpec")]
pub struct MaskSpec {
    method: MaskMethod,
    p: f64,
    bounds: Option<(f64, f64)>,
}

impl TryFrom<RawMaskSpec> for MaskSpec {
    type Error = Error;

    fn try_from(raw: RawMaskSpec) -> Result<Self> {
        match raw.bounds {
            Some((a, b)) => MaskSpec::with_bounds(raw.method, raw.p, a, b),
            None => MaskSpec::new(raw.method, raw.p),
        }
    }
}

impl From<MaskSpec> for RawMaskSpec {
    fn from(s: MaskSpec) -> Self {
        RawMaskSpec {
            method: s.method,
            p: s.p,
            bounds: s.bounds,
        }
    }
}

fn check_rate(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("leave-out rate {p} outside [0, 1]")));
    }
    Ok(())
}

impl MaskSpec {
    /// A spec with the method's standard uniform bounds.
    pub fn new(method: MaskMethod, p: f64) -> Result<Self> {
        check_rate(p)?;
        Ok(Self {
            method,
            p,
            bounds: method.default_bounds(),
        })
    }

    /// A soft spec with explicit bounds `0 ≤ a < b ≤ 1`. Only plain SDC accepts bounds
    /// other than its defaults; the strong and weak variants are pinned.
    pub fn with_bounds(method: MaskMethod, p: f64, a: f64, b: f64) -> Result<Self> {
        check_rate(p)?;
        if !method.is_soft() {
            return Err(Error::Config(format!("{method} does not take uniform bounds")));
        }
        if !(0.0 <= a && a < b && b <= 1.0) {
            return Err(Error::Config(format!("invalid uniform bounds ({a}, {b})")));
        }
        if method != MaskMethod::Sdc && method.default_bounds() != Some((a, b)) {
            return Err(Error::Config(format!(
                "{method} is fixed to bounds {:?}",
                method.default_bounds().unwrap()
            )));
        }
        Ok(Self {
            method,
            p,
            bounds: Some((a, b)),
        })
    }

    pub fn method(&self) -> MaskMethod {
        self.method
    }

    pub fn p(&self) -> f64 {
        self.p
    }

    pub fn bounds(&self) -> Option<(f64, f64)> {
        self.bounds
    }
}

/// `E[z]` for one mask entry: `1 − p` for the Bernoulli methods and
/// `(1 − p) + p·(a + b)/2` for the gated uniform law.
pub fn expected_mask_value(spec: &MaskSpec) -> f64 {
    match spec.bounds {
        None => 1.0 - spec.p,
        Some((a, b)) => (1.0 - spec.p) + spec.p * (a + b) / 2.0,
    }
}

/// `Var[z]` for one mask entry.
pub fn mask_variance(spec: &MaskSpec) -> f64 {
    let p = spec.p;
    match spec.bounds {
        None => p * (1.0 - p),
        Some((a, b)) => {
            let second = (1.0 - p) + p * (a * a + a * b + b * b) / 3.0;
            second - expected_mask_value(spec).powi(2)
        }
    }
}

/// Variance of the normalized entry `z / E[z]`, the quantity that multiplies each
/// weight in a masked layer.
pub fn normalized_mask_variance(spec: &MaskSpec) -> f64 {
    mask_variance(spec) / expected_mask_value(spec).powi(2)
}

/// A sampled mask together with the lineage that produced it.
#[derive(Clone, Debug, PartialEq)]
pub struct MaskTensor {
    pub values: Tensor,
    pub lineage: SeedLineage,
}

/// Draws a mask of the given shape. One uniform `u` per entry decides both the gate
/// (`u < p`) and, for the soft methods, the modulation value `a + (b − a)·u/p`, which is
/// uniform on `[a, b)` conditional on the gate.
pub fn sample_mask(spec: &MaskSpec, shape: &[usize], lineage: SeedLineage) -> Result<MaskTensor> {
    let n: usize = shape.iter().product();
    let mut rng = lineage.rng();
    let p = spec.p;
    let data: Vec<f64> = match spec.bounds {
        None => (0..n)
            .map(|_| if rng.random::<f64>() < p { 0.0 } else { 1.0 })
            .collect(),
        Some((a, b)) => (0..n)
            .map(|_| {
                let u: f64 = rng.random();
                if u < p {
                    a + (b - a) * (u / p)
                } else {
                    1.0
                }
            })
            .collect(),
    };
    Ok(MaskTensor {
        values: Tensor::new(shape, data)?,
        lineage,
    })
}

/// The all-ones mask used by deterministic evaluation.
pub fn unit_mask(shape: &[usize]) -> MaskTensor {
    MaskTensor {
        values: Tensor::ones(shape),
        lineage: SeedLineage::new(0, 0, 0),
    }
}

fn normalizer(spec: &MaskSpec) -> Result<f64> {
    let e = expected_mask_value(spec);
    if e <= 0.0 {
        return Err(Error::DegenerateMask(format!("{} with p = {}", spec.method, spec.p)));
    }
    Ok(1.0 / e)
}

/// `(z ⊙ w) · v_in / E[z] + bias` for a dense layer with `w: [out, in]`.
pub fn masked_dense_forward(
    tape: &mut Tape,
    v_in: Var,
    w: Var,
    bias: Option<Var>,
    spec: &MaskSpec,
    mask: MaskTensor,
) -> Result<Var> {
    if mask.values.shape() != tape.shape(w) {
        return Err(Error::dim("masked_dense_forward", tape.shape(w), mask.values.shape()));
    }
    let scale = normalizer(spec)?;
    let wm = tape.mask_mul(w, mask.values, scale)?;
    tape.linear(v_in, wm, bias)
}

/// Convolution with masked kernels, normalized like [`masked_dense_forward`].
pub fn masked_conv_forward(
    tape: &mut Tape,
    input: Var,
    kernels: Var,
    bias: Option<Var>,
    spec: &MaskSpec,
    mask: MaskTensor,
) -> Result<Var> {
    if mask.values.shape() != tape.shape(kernels) {
        return Err(Error::dim(
            "masked_conv_forward",
            tape.shape(kernels),
            mask.values.shape(),
        ));
    }
    let scale = normalizer(spec)?;
    let km = tape.mask_mul(kernels, mask.values, scale)?;
    let pad = tape.shape(km)[2] / 2;
    tape.conv2d(input, km, bias, pad)
}

/// Activation masking. The mask matches the activations or one sample of them, in
/// which case it is shared by the whole batch.
pub fn dropout_forward(tape: &mut Tape, activations: Var, spec: &MaskSpec, mask: MaskTensor) -> Result<Var> {
    let scale = normalizer(spec)?;
    tape.mask_mul(activations, mask.values, scale)
}

/// Comparison of DropConnect against SDC with its uniform collapsed onto `(0, ε)`.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EquivalenceReport {
    pub p: f64,
    pub epsilon: f64,
    pub n_samples: usize,
    pub ones_fraction_dropconnect: f64,
    pub ones_fraction_soft: f64,
    pub max_soft_gated_value: f64,
    /// Kolmogorov distance between the two laws after mapping soft entries below `ε`
    /// to zero.
    pub cdf_distance: f64,
}

/// Samples both laws from the same lineage and compares them. Because both methods
/// share the gate draw, agreement is exact when the plumbing is shared.
pub fn degenerate_equivalence_check(
    n_samples: usize,
    p: f64,
    epsilon: f64,
    master_seed: u64,
) -> Result<EquivalenceReport> {
    let lineage = SeedLineage::new(master_seed, 0, 0);
    let dc = sample_mask(&MaskSpec::new(MaskMethod::Dropconnect, p)?, &[n_samples], lineage)?;
    let soft_spec = MaskSpec::with_bounds(MaskMethod::Sdc, p, 0.0, epsilon)?;
    let soft = sample_mask(&soft_spec, &[n_samples], lineage)?;
    let n = n_samples as f64;
    let ones = |m: &MaskTensor| m.values.data().iter().filter(|&&v| v == 1.0).count() as f64 / n;
    let zeros_dc = dc.values.data().iter().filter(|&&v| v == 0.0).count() as f64 / n;
    let zeros_soft = soft.values.data().iter().filter(|&&v| v < epsilon).count() as f64 / n;
    let max_soft_gated_value = soft
        .values
        .data()
        .iter()
        .copied()
        .filter(|&v| v < 1.0)
        .fold(0.0, f64::max);
    Ok(EquivalenceReport {
        p,
        epsilon,
        n_samples,
        ones_fraction_dropconnect: ones(&dc),
        ones_fraction_soft: ones(&soft),
        max_soft_gated_value,
        cdf_distance: (zeros_dc - zeros_soft).abs(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(m: MaskMethod, p: f64) -> MaskSpec {
        MaskSpec::new(m, p).unwrap()
    }

    #[test]
    fn zero_rate_gives_all_ones() {
        for m in MaskMethod::ALL {
            let mask = sample_mask(&spec(m, 0.0), &[50, 40], SeedLineage::new(1, 2, 3)).unwrap();
            assert!(mask.values.data().iter().all(|&v| v == 1.0), "{m}");
        }
    }

    #[test]
    fn expected_values_closed_form() {
        assert_eq!(expected_mask_value(&spec(MaskMethod::Dropconnect, 0.25)), 0.75);
        assert_eq!(expected_mask_value(&spec(MaskMethod::Sdc, 0.5)), 0.75);
        assert_eq!(expected_mask_value(&spec(MaskMethod::SdcStrong, 1.0)), 0.25);
        assert_eq!(expected_mask_value(&spec(MaskMethod::SdcWeak, 0.5)), 0.875);
    }

    #[test]
    fn invalid_configurations_rejected() {
        assert!(MaskSpec::new(MaskMethod::Sdc, 1.5).is_err());
        assert!(MaskSpec::with_bounds(MaskMethod::Sdc, 0.5, 0.6, 0.4).is_err());
        assert!(MaskSpec::with_bounds(MaskMethod::SdcWeak, 0.5, 0.0, 1.0).is_err());
        assert!(MaskSpec::with_bounds(MaskMethod::Dropconnect, 0.5, 0.0, 1.0).is_err());
        assert!(MaskSpec::with_bounds(MaskMethod::Sdc, 0.5, 0.0, 1e-9).is_ok());
    }

    #[test]
    fn full_dropconnect_is_degenerate() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let w = tape.constant(Tensor::ones(&[3, 2]));
        let s = spec(MaskMethod::Dropconnect, 1.0);
        let mask = sample_mask(&s, &[3, 2], SeedLineage::new(0, 0, 0)).unwrap();
        assert!(matches!(
            masked_dense_forward(&mut tape, x, w, None, &s, mask),
            Err(Error::DegenerateMask(_))
        ));
    }

    #[test]
    fn mask_shape_must_match_weights() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[1, 2]));
        let w = tape.constant(Tensor::ones(&[3, 2]));
        let s = spec(MaskMethod::Sdc, 0.5);
        let mask = sample_mask(&s, &[2, 3], SeedLineage::new(0, 0, 0)).unwrap();
        assert!(masked_dense_forward(&mut tape, x, w, None, &s, mask).is_err());
    }

    #[test]
    fn spec_serde_round_trip_and_validation() {
        let s = spec(MaskMethod::SdcStrong, 0.25);
        let json = serde_json::to_string(&s).unwrap();
        assert_eq!(serde_json::from_str::<MaskSpec>(&json).unwrap(), s);
        assert!(serde_json::from_str::<MaskSpec>(r#"{"method":"sdc","p":2.0}"#).is_err());
        assert!(serde_json::from_str::<MaskSpec>(r#"{"method":"sdc_weak","p":0.5,"bounds":[0.0,1.0]}"#).is_err());
    }

    #[test]
    fn degenerate_equivalence_at_extremes() {
        let r = degenerate_equivalence_check(1000, 0.0, 1e-9, 4).unwrap();
        assert_eq!(
            (r.ones_fraction_dropconnect, r.ones_fraction_soft, r.cdf_distance),
            (1.0, 1.0, 0.0)
        );
        let r = degenerate_equivalence_check(1000, 1.0, 1e-9, 4).unwrap();
        assert_eq!(r.ones_fraction_dropconnect, 0.0);
        assert!(r.max_soft_gated_value < 1e-9);
        assert_eq!(r.cdf_distance, 0.0);
    }
}
