//! Binarizers, their surrogate gradients, and scaling factors.
//!
//! Three weight quantizers are supported:
//!
//! * `SignSte`: `Sign(w)` forward, identity backward.
//! * `SignClippedSte`: `Sign(w)` forward, `1{|w| <= 1}` backward.
//! * `BiPer`: `Sign(sin(omega0 * w))` forward (a square wave of period
//!   `2*pi/omega0`), `omega0 * cos(omega0 * w)` backward.
//!
//! Activations are always binarized with `Sign` and the piecewise-quadratic
//! surrogate `F'(a)` (`2 + 2a` on `[-1, 0)`, `2 - 2a` on `[0, 1)`, 0 elsewhere).
//!
//! `Sign` maps zero (and negative zero) to `+1`.

use serde::{Deserialize, Serialize};

use crate::autodiff::CustomGrad;
use crate::error::{invalid, Error, Result};
use crate::qe::{gamma_optimal, LaplaceModel};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    SignSte,
    SignClippedSte,
    #[serde(rename = "biper")]
    BiPer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scaling {
    None,
    PerLayerMeanAbs,
    PerChannelMeanAbs,
    AnalyticLaplace,
}

/// Weight binarization configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct QuantSpec {
    pub method: Method,
    /// Angular frequency of the square wave, radians per weight unit.
    pub omega0: f64,
    pub scaling: Scaling,
    /// Required when `scaling` is `AnalyticLaplace`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub laplace: Option<LaplaceModel>,
}

impl Default for QuantSpec {
    fn default() -> Self {
        Self {
            method: Method::BiPer,
            omega0: 20.0,
            scaling: Scaling::PerChannelMeanAbs,
            laplace: None,
        }
    }
}

impl QuantSpec {
    pub fn biper(omega0: f64) -> Self {
        Self {
            omega0,
            ..Self::default()
        }
    }

    pub fn sign_clipped_ste() -> Self {
        Self {
            method: Method::SignClippedSte,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.method == Method::BiPer && !(self.omega0 > 0.0 && self.omega0.is_finite()) {
            return Err(invalid(format!("omega0 must be positive for BiPer, got {}", self.omega0)));
        }
        if self.scaling == Scaling::AnalyticLaplace && self.laplace.is_none() {
            return Err(invalid("analytic-laplace scaling requires a fitted Laplace model"));
        }
        Ok(())
    }

    /// Value fed to the sign function: `sin(omega0 * w)` for BiPer, `w` otherwise.
    pub fn pre_binarization(&self, w: f64) -> f64 {
        match self.method {
            Method::BiPer => (w * self.omega0).sin(),
            Method::SignSte | Method::SignClippedSte => w,
        }
    }

    pub fn binarize_value(&self, w: f64) -> f64 {
        sign(self.pre_binarization(w))
    }

    /// Tape node implementing this quantizer with its surrogate backward rule.
    pub fn weight_node(&self) -> CustomGrad {
        match self.method {
            Method::BiPer => biper_node(self.omega0),
            Method::SignClippedSte => clipped_ste_node(),
            Method::SignSte => CustomGrad::new("sign_ste", sign, |_| 1.0),
        }
    }

    /// Scale applied when no data-dependent scale is used.
    pub fn analytic_gamma(&self) -> Result<f64> {
        let model = self
            .laplace
            .ok_or_else(|| invalid("analytic-laplace scaling requires a fitted Laplace model"))?;
        Ok(match self.method {
            Method::BiPer => gamma_optimal(self.omega0, model)?,
            // E|w| under La(0, b) is b
            Method::SignSte | Method::SignClippedSte => model.b(),
        })
    }
}

#[inline]
pub fn sign(x: f64) -> f64 {
    if x >= 0.0 {
        1.0
    } else {
        -1.0
    }
}

/// `+-1` values together with positive per-layer or per-channel scales.
#[derive(Clone, Debug, PartialEq)]
pub struct BinarizedTensor {
    values: Tensor,
    scale: Vec<f64>,
}

impl BinarizedTensor {
    pub fn new(values: Tensor, scale: Vec<f64>) -> Result<Self> {
        if let Some(v) = values.data().iter().find(|&&v| v != 1.0 && v != -1.0) {
            return Err(invalid(format!("binarized tensor entry {} is not +-1", v)));
        }
        if scale.is_empty() || scale.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(invalid("scales must be positive and finite"));
        }
        if scale.len() != 1 && scale.len() != values.rows() {
            return Err(invalid(format!(
                "{} scales for a tensor with {} rows",
                scale.len(),
                values.rows()
            )));
        }
        Ok(Self { values, scale })
    }

    pub fn values(&self) -> &Tensor {
        &self.values
    }

    pub fn scale(&self) -> &[f64] {
        &self.scale
    }

    pub fn into_parts(self) -> (Tensor, Vec<f64>) {
        (self.values, self.scale)
    }
}

fn require_finite(w: &Tensor) -> Result<()> {
    w.check_finite("binarize")
}

fn check_omega(omega0: f64) -> Result<()> {
    if omega0 > 0.0 && omega0.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("omega0 must be positive, got {}", omega0)))
    }
}

/// Entrywise `Sign(w)`, scale 1.
pub fn sign_binarize(w: &Tensor) -> Result<BinarizedTensor> {
    require_finite(w)?;
    BinarizedTensor::new(w.map(sign), vec![1.0])
}

/// Entrywise `Sign(sin(omega0 * w))`, scale 1.
pub fn biper_binarize(w: &Tensor, omega0: f64) -> Result<BinarizedTensor> {
    check_omega(omega0)?;
    require_finite(w)?;
    BinarizedTensor::new(w.map(|v| sign((v * omega0).sin())), vec![1.0])
}

/// `d/dw sin(omega0 * w) = omega0 * cos(omega0 * w)`
#[inline]
pub fn biper_surrogate(w: f64, omega0: f64) -> f64 {
    omega0 * (w * omega0).cos()
}

pub fn biper_surrogate_grad(w: &Tensor, omega0: f64) -> Result<Tensor> {
    check_omega(omega0)?;
    Ok(w.map(|v| biper_surrogate(v, omega0)))
}

#[inline]
pub fn activation_surrogate(a: f64) -> f64 {
    if (-1.0..0.0).contains(&a) {
        2.0 + 2.0 * a
    } else if (0.0..1.0).contains(&a) {
        2.0 - 2.0 * a
    } else {
        0.0
    }
}

pub fn activation_surrogate_grad(a: &Tensor) -> Tensor {
    a.map(activation_surrogate)
}

#[inline]
pub fn clipped_ste(w: f64) -> f64 {
    if w.abs() <= 1.0 {
        1.0
    } else {
        0.0
    }
}

pub fn clipped_ste_grad(w: &Tensor) -> Tensor {
    w.map(clipped_ste)
}

pub fn biper_node(omega0: f64) -> CustomGrad {
    CustomGrad::new(
        "biper",
        move |w| sign((w * omega0).sin()),
        move |w| biper_surrogate(w, omega0),
    )
}

pub fn clipped_ste_node() -> CustomGrad {
    CustomGrad::new("sign_clipped_ste", sign, clipped_ste)
}

pub fn activation_node() -> CustomGrad {
    CustomGrad::new("sign_activation", sign, activation_surrogate)
}

/// Data-dependent scale modes accepted by [`empirical_scale`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ScaleMode {
    PerLayer,
    PerChannel,
}

/// Mean of `|x|` over a slice; shared by the tape's mean-abs nodes and the
/// packed path so both produce bit-identical scales.
#[inline]
pub fn mean_abs(x: &[f64]) -> f64 {
    x.iter().map(|v| v.abs()).sum::<f64>() / x.len() as f64
}

/// Mean absolute value of the pre-binarization tensor, over the whole
/// tensor or over each leading-axis slice (output channel).
pub fn empirical_scale(w_hat: &Tensor, mode: ScaleMode) -> Result<Vec<f64>> {
    if w_hat.is_empty() {
        return Err(invalid("cannot compute a scale of an empty tensor"));
    }
    Ok(match mode {
        ScaleMode::PerLayer => vec![mean_abs(w_hat.data())],
        ScaleMode::PerChannel => w_hat.data().chunks(w_hat.row_len()).map(mean_abs).collect(),
    })
}

/// Binarizes latent weights under `spec`, returning `+-1` values and the
/// scale the spec prescribes (1 for `Scaling::None`).
pub fn binarize(w: &Tensor, spec: &QuantSpec) -> Result<BinarizedTensor> {
    spec.validate()?;
    require_finite(w)?;
    let w_hat = w.map(|v| spec.pre_binarization(v));
    let values = w_hat.map(sign);
    let scale = match spec.scaling {
        Scaling::None => vec![1.0],
        Scaling::PerLayerMeanAbs => empirical_scale(&w_hat, ScaleMode::PerLayer)?,
        Scaling::PerChannelMeanAbs => empirical_scale(&w_hat, ScaleMode::PerChannel)?,
        Scaling::AnalyticLaplace => vec![spec.analytic_gamma()?],
    };
    BinarizedTensor::new(values, scale).map_err(|e| match e {
        Error::InvalidArgument(m) => invalid(format!("{} (degenerate weights)", m)),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::qe::LaplaceModel;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn v(data: &[f64]) -> Tensor {
        Tensor::from_vec(data.to_vec())
    }

    #[test]
    fn sign_examples() {
        assert_eq!(sign_binarize(&v(&[0.3, -0.2])).unwrap().values().data(), &[1.0, -1.0]);
        assert_eq!(sign_binarize(&v(&[0.0])).unwrap().values().data(), &[1.0]);
        assert_eq!(sign_binarize(&v(&[-0.0])).unwrap().values().data(), &[1.0]);
        assert!(sign_binarize(&v(&[f64::NAN])).is_err());
    }

    #[test]
    fn biper_examples() {
        let b = biper_binarize(&v(&[PI / 2.0, 3.0 * PI / 2.0, -PI / 2.0]), 1.0).unwrap();
        assert_eq!(b.values().data(), &[1.0, -1.0, -1.0]);
        let b = biper_binarize(&v(&[PI / 2.0 + 2.0 * PI]), 1.0).unwrap();
        assert_eq!(b.values().data(), &[1.0]);
        assert!(biper_binarize(&v(&[1.0]), 0.0).is_err());
        assert!(biper_binarize(&v(&[1.0]), -2.0).is_err());
        // exact zero of the sine maps to +1
        assert_eq!(biper_binarize(&v(&[0.0]), 3.0).unwrap().values().data(), &[1.0]);
    }

    #[test]
    fn biper_balanced_under_laplace() {
        let mut rng = ChaCha8Rng::seed_from_u64(20240601);
        let model = LaplaceModel::new(0.05).unwrap();
        let w = Tensor::from_vec(model.sample(&mut rng, 1_000_000));
        let b = biper_binarize(&w, 20.0).unwrap();
        let pos = b.values().data().iter().filter(|&&x| x > 0.0).count() as f64 / 1e6;
        assert!((pos - 0.5).abs() < 0.01, "fraction of +1 = {pos}");
    }

    #[test]
    fn surrogate_examples() {
        assert_eq!(biper_surrogate_grad(&v(&[0.0]), 1.0).unwrap().data(), &[1.0]);
        assert_eq!(biper_surrogate_grad(&v(&[0.0]), 5.0).unwrap().data(), &[5.0]);
        assert!(biper_surrogate_grad(&v(&[0.0]), 0.0).is_err());

        assert_eq!(activation_surrogate_grad(&v(&[0.0])).data(), &[2.0]);
        assert_eq!(activation_surrogate_grad(&v(&[-0.5, 0.5])).data(), &[1.0, 1.0]);
        assert_eq!(activation_surrogate_grad(&v(&[1.5, -3.0])).data(), &[0.0, 0.0]);

        assert_eq!(clipped_ste_grad(&v(&[0.5, 1.0, -2.0])).data(), &[1.0, 1.0, 0.0]);
    }

    #[test]
    fn surrogate_matches_finite_differences() {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let h = 1e-5;
        for _ in 0..200 {
            let omega = rng.gen_range(0.5..30.0);
            let w: f64 = rng.gen_range(-2.0..2.0);
            let fd = (((w + h) * omega).sin() - ((w - h) * omega).sin()) / (2.0 * h);
            let an = biper_surrogate(w, omega);
            // relative error, guarded where cos crosses zero
            let err = (fd - an).abs() / an.abs().max(omega * 1e-2);
            assert!(err < 1e-6, "omega={omega} w={w} fd={fd} an={an}");
        }
    }

    #[test]
    fn empirical_scale_examples() {
        assert_eq!(empirical_scale(&v(&[0.5, -0.5]), ScaleMode::PerLayer).unwrap(), vec![0.5]);
        let w = Tensor::new([2, 2], vec![1.0, 1.0, -2.0, 2.0]).unwrap();
        assert_eq!(empirical_scale(&w, ScaleMode::PerChannel).unwrap(), vec![1.0, 2.0]);
        assert!(empirical_scale(&Tensor::zeros([0]), ScaleMode::PerLayer).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(QuantSpec::biper(0.0).validate().is_err());
        let mut q = QuantSpec::biper(10.0);
        q.scaling = Scaling::AnalyticLaplace;
        assert!(q.validate().is_err());
        q.laplace = Some(LaplaceModel::new(0.1).unwrap());
        q.validate().unwrap();
        let b = binarize(&v(&[0.05, -0.05]), &q).unwrap();
        assert_eq!(b.scale().len(), 1);
        assert_eq!(b.scale()[0], gamma_optimal(10.0, LaplaceModel::new(0.1).unwrap()).unwrap());
    }

    #[test]
    fn binarized_tensor_rejects_non_binary() {
        assert!(BinarizedTensor::new(v(&[1.0, 0.5]), vec![1.0]).is_err());
        assert!(BinarizedTensor::new(v(&[1.0, -1.0]), vec![0.0]).is_err());
    }

    #[test]
    fn both_signs_on_both_sides() {
        for &omega in &[0.5, 1.0, 5.0, 20.0, 30.0] {
            let w = 3.0 * PI / (2.0 * omega);
            let b = biper_binarize(&v(&[-w, w]), omega).unwrap();
            assert_eq!(b.values().data(), &[1.0, -1.0], "omega={omega}");
            // contrast: Sign keeps the sign of w
            assert_eq!(sign_binarize(&v(&[-w, w])).unwrap().values().data(), &[-1.0, 1.0]);
        }
    }

    proptest! {
        #[test]
        fn biper_codomain_is_pm_one(w in prop::collection::vec(-1e3f64..1e3, 1..64), omega in 1e-3f64..100.0) {
            let b = biper_binarize(&Tensor::from_vec(w), omega).unwrap();
            prop_assert!(b.values().data().iter().all(|&x| x == 1.0 || x == -1.0));
        }

        #[test]
        fn biper_periodic_for_dyadic_period(w in -8.0f64..8.0, k in -4i32..4) {
            // omega0 = 2*pi / T with T = 2^k exactly representable, so w + T is exact
            // whenever w is a multiple of T * 2^-40
            let period = 2f64.powi(k);
            let w = (w / period * 2f64.powi(40)).round() / 2f64.powi(40) * period;
            let omega = 2.0 * PI / period;
            let a = biper_binarize(&Tensor::from_vec(vec![w]), omega).unwrap();
            let b = biper_binarize(&Tensor::from_vec(vec![w + period]), omega).unwrap();
            let s = (w * omega).sin();
            // skip points within rounding distance of a zero crossing
            prop_assume!(s.abs() > 1e-9);
            prop_assert_eq!(a.values().data(), b.values().data());
        }

        #[test]
        fn biper_antisymmetric_away_from_zeros(w in -50.0f64..50.0, omega in 0.1f64..40.0) {
            prop_assume!((w * omega).sin() != 0.0);
            let a = biper_binarize(&Tensor::from_vec(vec![w]), omega).unwrap();
            let b = biper_binarize(&Tensor::from_vec(vec![-w]), omega).unwrap();
            prop_assert_eq!(a.values().data()[0], -b.values().data()[0]);
        }

        #[test]
        fn biper_surrogate_bounded_by_omega(w in -100.0f64..100.0, omega in 1e-3f64..100.0) {
            prop_assert!(biper_surrogate(w, omega).abs() <= omega);
        }
    }
}
