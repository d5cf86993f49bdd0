//! The toy model `σᵢ = wᵢᴺ` under gradient flow.
//!
//! Each coordinate evolves independently by `σ̇ = σ^{2-2/N} (σ* - σ)`, with
//! every coordinate starting at the same init scale `σ₀`. This module holds
//! the model types, the closed-form solutions for `N ∈ {1, 2, ∞}`, the
//! right-hand side used by the integrator, and (in submodules) the α-time
//! quadrature and the incremental-learning threshold machinery.

mod integrate;
pub mod ode;
mod quadrature;
mod threshold;

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

pub use integrate::{flow_alpha_time, integrate_flow, integrate_flow_at, StepControl};
pub use quadrature::{alpha_time, gauss_kronrod, AlphaTime};
pub(crate) use threshold::bisect_threshold;
pub use threshold::{
    empirical_threshold, flow_threshold_bounds, is_incremental, is_incremental_flow,
    CoordinateSeries, IncrementalQuery, Regime, ThresholdBounds, Witness,
};

/// Depth of the parameterization. `Infinite` is the `N → ∞` limit law
/// `σ̇ = σ² (σ* - σ)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "DepthRepr", into = "DepthRepr")]
pub enum Depth {
    Finite(u32),
    Infinite,
}

impl Depth {
    pub fn finite(n: u32) -> Result<Self> {
        if n == 0 {
            return Err(invalid("depth must be at least 1"));
        }
        Ok(Depth::Finite(n))
    }

    /// Exponent `2 - 2/N` of the attenuation factor (2 in the limit).
    pub fn flow_exponent(self) -> f64 {
        match self {
            Depth::Finite(n) => 2.0 - 2.0 / n as f64,
            Depth::Infinite => 2.0,
        }
    }

    pub fn as_finite(self) -> Option<u32> {
        match self {
            Depth::Finite(n) => Some(n),
            Depth::Infinite => None,
        }
    }
}

impl fmt::Display for Depth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Depth::Finite(n) => write!(f, "{n}"),
            Depth::Infinite => f.write_str("inf"),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(untagged)]
enum DepthRepr {
    Number(u32),
    Name(String),
}

impl TryFrom<DepthRepr> for Depth {
    type Error = String;

    fn try_from(repr: DepthRepr) -> std::result::Result<Self, String> {
        match repr {
            DepthRepr::Number(0) => Err("depth must be at least 1".into()),
            DepthRepr::Number(n) => Ok(Depth::Finite(n)),
            DepthRepr::Name(s) if matches!(s.as_str(), "inf" | "infinite" | "∞") => {
                Ok(Depth::Infinite)
            }
            DepthRepr::Name(s) => Err(format!("unknown depth `{s}` (expected an integer or \"inf\")")),
        }
    }
}

impl From<Depth> for DepthRepr {
    fn from(d: Depth) -> Self {
        match d {
            Depth::Finite(n) => DepthRepr::Number(n),
            Depth::Infinite => DepthRepr::Name("inf".into()),
        }
    }
}

/// Depth, init scale and optimal vector of the toy model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyModelSpec {
    pub depth: Depth,
    pub init_scale: f64,
    pub optimal: Vec<f64>,
}

impl ToyModelSpec {
    pub fn new(depth: Depth, init_scale: f64, optimal: Vec<f64>) -> Result<Self> {
        if let Depth::Finite(0) = depth {
            return Err(invalid("depth must be at least 1"));
        }
        if !(init_scale.is_finite() && init_scale > 0.0) {
            return Err(invalid(format!("init scale must be positive, got {init_scale}")));
        }
        if optimal.is_empty() {
            return Err(invalid("optimal vector is empty"));
        }
        if let Some(v) = optimal.iter().find(|v| !(v.is_finite() && **v >= 0.0)) {
            return Err(invalid(format!("optimal values must be non-negative, got {v}")));
        }
        Ok(Self { depth, init_scale, optimal })
    }

    pub fn dim(&self) -> usize {
        self.optimal.len()
    }

    /// `σ(0)`: every coordinate equals the init scale.
    pub fn initial(&self) -> Vec<f64> {
        vec![self.init_scale; self.dim()]
    }

    /// Largest optimal value `σ*₁`.
    pub fn top_optimal(&self) -> f64 {
        self.optimal.iter().copied().fold(0.0, f64::max)
    }

    pub fn with_init_scale(&self, init_scale: f64) -> Result<Self> {
        Self::new(self.depth, init_scale, self.optimal.clone())
    }
}

/// How a trajectory was produced.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Method {
    ClosedForm,
    Ode,
    Gd,
}

/// Time-stamped sequence of value vectors. For gradient-descent runs the
/// times are iteration indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub times: Vec<f64>,
    pub values: Vec<Vec<f64>>,
    pub method: Method,
    pub spec: Option<ToyModelSpec>,
}

impl Trajectory {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn last(&self) -> Option<&[f64]> {
        self.values.last().map(Vec::as_slice)
    }

    /// Values of coordinate `i` across time.
    pub fn column(&self, i: usize) -> Vec<f64> {
        self.values.iter().map(|v| v[i]).collect()
    }

    /// Coordinate `i` bundled with the shared time grid and its optimum.
    pub fn coordinate(&self, i: usize) -> Result<CoordinateSeries<'_>> {
        let spec = self
            .spec
            .as_ref()
            .ok_or_else(|| invalid("trajectory carries no model spec"))?;
        let optimal = *spec
            .optimal
            .get(i)
            .ok_or(Error::DimensionMismatch { expected: spec.dim(), found: i + 1 })?;
        Ok(CoordinateSeries { times: &self.times, values: self.column(i), optimal })
    }
}

/// Closed-form `σᵢ(t)` for depth 1, 2 and the infinite-depth law.
///
/// The infinite-depth solution is implicit in `σ`; it is inverted by
/// bisection between `σ₀` and `σ*ᵢ`, where the implicit time is monotone.
pub fn closed_form_sigma(spec: &ToyModelSpec, i: usize, t: f64) -> Result<f64> {
    let target = *spec
        .optimal
        .get(i)
        .ok_or(Error::DimensionMismatch { expected: spec.dim(), found: i + 1 })?;
    if target <= 0.0 {
        return Err(invalid("closed forms require σ*ᵢ > 0"));
    }
    if !t.is_finite() || t < 0.0 {
        return Err(invalid(format!("time must be finite and non-negative, got {t}")));
    }
    let s0 = spec.init_scale;
    match spec.depth {
        Depth::Finite(1) => Ok(target + (s0 - target) * (-t).exp()),
        Depth::Finite(2) => {
            // Written with e^{-σ* t} so large t does not overflow.
            let decay = (-target * t).exp();
            Ok(s0 * target / (s0 * (1.0 - decay) + target * decay))
        }
        Depth::Infinite => Ok(invert_infinite_depth(s0, target, t)),
        Depth::Finite(n) => Err(Error::UnsupportedDepth(n.to_string())),
    }
}

/// Time at which the infinite-depth law reaches `sigma`, starting from `init`.
pub fn infinite_depth_time(init: f64, target: f64, sigma: f64) -> f64 {
    let log_term = ((sigma * (target - init)) / (init * (target - sigma))).ln();
    log_term / (target * target) - (1.0 / sigma - 1.0 / init) / target
}

fn invert_infinite_depth(init: f64, target: f64, t: f64) -> f64 {
    if init == target || t == 0.0 {
        return init;
    }
    let (mut lo, mut hi) = if init < target { (init, target) } else { (target, init) };
    let increasing = init < target;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let reached = infinite_depth_time(init, target, mid) <= t;
        // For a rising solution, reaching `mid` before t means σ(t) ≥ mid.
        if reached == increasing {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// `σᵢ^{2-2/N} (σ*ᵢ - σᵢ)` per coordinate.
pub fn flow_rhs(spec: &ToyModelSpec, sigma: &[f64]) -> Result<Vec<f64>> {
    if sigma.len() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), found: sigma.len() });
    }
    if let Some(v) = sigma.iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid(format!("σ must be non-negative, got {v}")));
    }
    let mut out = vec![0.0; sigma.len()];
    rhs_into(spec.depth.flow_exponent(), &spec.optimal, sigma, &mut out);
    Ok(out)
}

pub(crate) fn rhs_into(exponent: f64, optimal: &[f64], sigma: &[f64], out: &mut [f64]) {
    for ((o, &s), &target) in out.iter_mut().zip(sigma).zip(optimal) {
        // Trial stages may dip fractionally below zero near a clamped coordinate.
        let s = s.max(0.0);
        *o = attenuation(s, exponent) * (target - s);
    }
}

#[inline]
pub(crate) fn attenuation(s: f64, exponent: f64) -> f64 {
    if exponent == 0.0 {
        1.0
    } else if exponent == 1.0 {
        s
    } else if exponent == 2.0 {
        s * s
    } else {
        s.powf(exponent)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn spec(depth: Depth, s0: f64, opt: &[f64]) -> ToyModelSpec {
        ToyModelSpec::new(depth, s0, opt.to_vec()).unwrap()
    }

    #[test]
    fn closed_form_examples() {
        let s = spec(Depth::Finite(1), 0.5, &[2.0]);
        assert_eq!(closed_form_sigma(&s, 0, 0.0).unwrap(), 0.5);

        let s = spec(Depth::Finite(2), 0.1, &[1.0]);
        assert_abs_diff_eq!(closed_form_sigma(&s, 0, 9f64.ln()).unwrap(), 0.5, epsilon = 1e-14);

        let s = spec(Depth::Finite(2), 1.0, &[1.0]);
        for t in [0.0, 0.3, 7.0, 1e3] {
            assert_abs_diff_eq!(closed_form_sigma(&s, 0, t).unwrap(), 1.0, epsilon = 1e-15);
        }
    }

    #[test]
    fn closed_form_rejections() {
        let s = spec(Depth::Finite(3), 0.1, &[1.0]);
        assert!(matches!(closed_form_sigma(&s, 0, 1.0), Err(Error::UnsupportedDepth(_))));
        let s = spec(Depth::Finite(2), 0.1, &[0.0]);
        assert!(closed_form_sigma(&s, 0, 1.0).is_err());
        let s = spec(Depth::Finite(2), 0.1, &[1.0]);
        assert!(closed_form_sigma(&s, 0, f64::NAN).is_err());
        assert!(closed_form_sigma(&s, 0, f64::INFINITY).is_err());
    }

    #[test]
    fn infinite_depth_inversion_round_trips() {
        let s = spec(Depth::Infinite, 1e-2, &[3.0]);
        for t in [0.5, 5.0, 20.0, 30.0] {
            let sigma = closed_form_sigma(&s, 0, t).unwrap();
            assert!(sigma > 1e-2 && sigma < 3.0);
            let back = infinite_depth_time(1e-2, 3.0, sigma);
            assert!((back - t).abs() <= 1e-9 * t.max(1.0), "t={t} back={back}");
        }
    }

    #[test]
    fn infinite_depth_from_above() {
        let s = spec(Depth::Infinite, 2.0, &[1.0]);
        let sigma = closed_form_sigma(&s, 0, 1.0).unwrap();
        assert!(sigma < 2.0 && sigma > 1.0);
        assert_abs_diff_eq!(infinite_depth_time(2.0, 1.0, sigma), 1.0, epsilon = 1e-10);
    }

    #[test]
    fn rhs_examples() {
        let s = spec(Depth::Finite(2), 0.1, &[1.0]);
        assert_eq!(flow_rhs(&s, &[1.0]).unwrap(), vec![0.0]);
        assert_abs_diff_eq!(flow_rhs(&s, &[0.1]).unwrap()[0], 0.09, epsilon = 1e-15);
        let s = spec(Depth::Finite(4), 0.1, &[1.0]);
        assert_abs_diff_eq!(flow_rhs(&s, &[0.25]).unwrap()[0], 0.09375, epsilon = 1e-15);
        let s = spec(Depth::Infinite, 0.1, &[1.0]);
        assert_abs_diff_eq!(flow_rhs(&s, &[0.5]).unwrap()[0], 0.125, epsilon = 1e-15);
    }

    #[test]
    fn rhs_rejects_negative_sigma() {
        let s = spec(Depth::Finite(3), 0.1, &[1.0]);
        assert!(flow_rhs(&s, &[-0.1]).is_err());
        assert!(flow_rhs(&s, &[0.1, 0.2]).is_err());
    }

    #[test]
    fn spec_validation() {
        assert!(ToyModelSpec::new(Depth::Finite(2), 0.0, vec![1.0]).is_err());
        assert!(ToyModelSpec::new(Depth::Finite(2), 0.1, vec![-1.0]).is_err());
        assert!(ToyModelSpec::new(Depth::Finite(0), 0.1, vec![1.0]).is_err());
        assert!(Depth::finite(0).is_err());
        let s = spec(Depth::Finite(3), 0.25, &[1.0, 2.0, 0.0]);
        assert_eq!(s.initial(), vec![0.25; 3]);
        assert_eq!(s.top_optimal(), 2.0);
    }

    #[test]
    fn depth_serde() {
        let d: Vec<Depth> = serde_json::from_str(r#"[1, 3, "inf"]"#).unwrap();
        assert_eq!(d, vec![Depth::Finite(1), Depth::Finite(3), Depth::Infinite]);
        assert_eq!(serde_json::to_string(&d).unwrap(), r#"[1,3,"inf"]"#);
        assert!(serde_json::from_str::<Depth>("0").is_err());
        assert!(serde_json::from_str::<Depth>(r#""deep""#).is_err());
    }
}
