//! Discrete gradient descent on the toy model.
//!
//! Each layer weight takes a step of size `η/N²·N` on the depth-normalized
//! loss; raised to the `N`th power this is the per-coordinate recurrence
//! `σ ← σ (1 + (η/N) σ^{1-2/N} (σ* - σ))^N`. Time is the iteration index.

use serde::{Deserialize, Serialize};

use crate::dynamics::{bisect_threshold, Depth, IncrementalQuery, Method, Regime, ThresholdBounds, ToyModelSpec, Trajectory};
use crate::error::{invalid, Error, Result};

/// Learning rates at or above this factor make the Theorem-style log
/// arguments non-positive.
pub const MAX_RATE_FACTOR: f64 = 2.0 * (std::f64::consts::SQRT_2 - 1.0);

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GdConfig {
    pub spec: ToyModelSpec,
    pub learning_rate: f64,
    pub max_steps: usize,
}

impl GdConfig {
    pub fn new(spec: ToyModelSpec, learning_rate: f64, max_steps: usize) -> Result<Self> {
        if spec.depth == Depth::Infinite {
            return Err(Error::UnsupportedDepth("gradient descent needs a finite depth".into()));
        }
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(invalid(format!("learning rate must be positive, got {learning_rate}")));
        }
        Ok(Self { spec, learning_rate, max_steps })
    }

    /// `η = c (1/σ*₁)^{2-2/N}`.
    pub fn from_rate_factor(spec: ToyModelSpec, c: f64, max_steps: usize) -> Result<Self> {
        let eta = c * rate_unit(&spec)?;
        Self::new(spec, eta, max_steps)
    }

    /// The dimensionless factor `c` of this config's learning rate.
    pub fn rate_factor(&self) -> Result<f64> {
        Ok(self.learning_rate / rate_unit(&self.spec)?)
    }

    fn depth(&self) -> u32 {
        self.spec.depth.as_finite().unwrap_or(1)
    }
}

fn rate_unit(spec: &ToyModelSpec) -> Result<f64> {
    let top = spec.top_optimal();
    if !(top > 0.0) {
        return Err(invalid("σ*₁ must be positive"));
    }
    Ok(top.recip().powf(spec.depth.flow_exponent()))
}

/// One step of the recurrence for every coordinate.
pub fn gd_step(config: &GdConfig, sigma: &[f64]) -> Result<Vec<f64>> {
    let spec = &config.spec;
    if sigma.len() != spec.dim() {
        return Err(Error::DimensionMismatch { expected: spec.dim(), found: sigma.len() });
    }
    if let Some(v) = sigma.iter().find(|v| !(**v >= 0.0)) {
        return Err(invalid(format!("σ must be non-negative, got {v}")));
    }
    let mut out = sigma.to_vec();
    step_in_place(config.depth(), config.learning_rate, &spec.optimal, &mut out)?;
    Ok(out)
}

pub(crate) fn step_in_place(n: u32, eta: f64, optimal: &[f64], sigma: &mut [f64]) -> Result<()> {
    if n == 1 {
        for (s, t) in sigma.iter_mut().zip(optimal) {
            *s += eta * (t - *s);
        }
        return Ok(());
    }
    let nf = n as f64;
    let inner = 1.0 - 2.0 / nf;
    for (k, (s, t)) in sigma.iter_mut().zip(optimal).enumerate() {
        let base = 1.0 + eta / nf * s.powf(inner) * (t - *s);
        if base < 0.0 {
            return Err(Error::RateTooLarge { index: k, base });
        }
        *s *= base.powi(n as i32);
    }
    Ok(())
}

/// Iterate `config.max_steps` steps from `σ₀`, recording every
/// `record_every`-th iterate plus the last one.
///
/// Aborts with a divergence error once any coordinate exceeds `10 σ*₁`.
pub fn gd_run(config: &GdConfig, record_every: usize) -> Result<Trajectory> {
    let record_every = record_every.max(1);
    let spec = &config.spec;
    let limit = 10.0 * spec.top_optimal();
    let mut sigma = spec.initial();
    let mut times = vec![0.0];
    let mut values = vec![sigma.clone()];
    for step in 1..=config.max_steps {
        step_in_place(config.depth(), config.learning_rate, &spec.optimal, &mut sigma)?;
        if let Some(v) = sigma.iter().find(|v| !(**v <= limit)) {
            return Err(Error::Divergence { step, detail: format!("σ = {v} exceeds 10·σ*₁ = {limit}") });
        }
        if step % record_every == 0 || step == config.max_steps {
            times.push(step as f64);
            values.push(sigma.clone());
        }
    }
    Ok(Trajectory { times, values, method: Method::Gd, spec: Some(spec.clone()) })
}

/// Largest rate for which depth `N ≥ 2` descent never overshoots:
/// `(1/σ*₁)^{2-2/N}`.
pub fn max_no_overshoot_rate(spec: &ToyModelSpec) -> Result<f64> {
    match spec.depth {
        Depth::Finite(1) => Err(Error::UnsupportedDepth("the no-overshoot rate needs N ≥ 2".into())),
        _ => rate_unit(spec),
    }
}

/// Exponents `A` and `B` of the depth-2 descent threshold bounds, together
/// with the four logarithm arguments they are built from.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdThresholdExponents {
    pub a: f64,
    pub b: f64,
    /// `[1 - cRᵢ + c²Rᵢ², 1 - cRⱼ - c²Rⱼ²/4, 1 - cRᵢ - c²Rᵢ²/4, 1 - cRⱼ + c²Rⱼ²]`.
    pub log_args: [f64; 4],
}

/// `A = ln(1 - cRᵢ + c²Rᵢ²) / ln(1 - cRⱼ - c²Rⱼ²/4)` and
/// `B = ln(1 - cRᵢ - c²Rᵢ²/4) / ln(1 - cRⱼ + c²Rⱼ²)` with `Rₖ = σ*ₖ/σ*₁`.
pub fn gd_threshold_exponents(c: f64, r_large: f64, r_small: f64) -> Result<GdThresholdExponents> {
    if !(c > 0.0 && c < MAX_RATE_FACTOR) {
        return Err(invalid(format!("rate factor must lie in (0, 2(√2-1)), got {c}")));
    }
    if !(r_large > r_small && r_small > 0.0 && r_large <= 1.0) {
        return Err(invalid("need 1 ≥ Rᵢ > Rⱼ > 0"));
    }
    let plus = |r: f64| 1.0 - c * r + c * c * r * r;
    let minus = |r: f64| 1.0 - c * r - c * c * r * r / 4.0;
    let log_args = [plus(r_large), minus(r_small), minus(r_large), plus(r_small)];
    if let Some(v) = log_args.iter().find(|v| !(**v > 0.0 && **v < 1.0)) {
        return Err(invalid(format!("log argument {v} outside (0, 1)")));
    }
    let a = log_args[0].ln() / log_args[1].ln();
    let b = log_args[2].ln() / log_args[3].ln();
    if !(a > 1.0 && b > 1.0) {
        return Err(invalid(format!("exponents A = {a}, B = {b} must exceed 1")));
    }
    Ok(GdThresholdExponents { a, b, log_args })
}

/// Depth-2 descent threshold bounds with `η = c/σ*₁`.
pub fn gd_threshold_bounds(
    query: &IncrementalQuery,
    small_optimal: f64,
    top_optimal: f64,
    c: f64,
) -> Result<ThresholdBounds> {
    let IncrementalQuery { s, f, ratio: r, .. } = *query;
    if !(small_optimal > 0.0 && r * small_optimal <= top_optimal * (1.0 + 1e-12)) {
        return Err(invalid("need 0 < σ*ⱼ and r σ*ⱼ ≤ σ*₁"));
    }
    let rj = small_optimal / top_optimal;
    let ex = gd_threshold_exponents(c, (r * rj).min(1.0), rj)?;
    let odds = s / (1.0 - s);
    let lower = 0.5 * odds * small_optimal * ((1.0 - f) * odds / (2.0 * r * f)).powf(1.0 / (ex.a - 1.0));
    let upper = odds * small_optimal * ((1.0 - f) * odds / f).powf(1.0 / (ex.b - 1.0));
    Ok(ThresholdBounds { lower, upper, empirical: None, regime: Regime::GdN2, exponents: Some(ex) })
}

/// Outcome of an incremental check on a descent run. `iteration` is the
/// first iterate at which the large coordinate reached `f σ*ᵢ` (or the small
/// one passed `s σ*ⱼ`, whichever decided the outcome); `pseudo_time` is
/// `η · iteration` for comparison with the flow.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GdIncremental {
    pub incremental: bool,
    pub iteration: usize,
    pub pseudo_time: f64,
}

pub fn is_incremental_gd(config: &GdConfig, query: &IncrementalQuery) -> Result<GdIncremental> {
    let spec = &config.spec;
    let (i, j) = (query.large, query.small);
    let (oi, oj) = (spec.optimal[i], spec.optimal[j]);
    let optimal = [oi, oj];
    let mut pair = [spec.init_scale; 2];
    let done = |k: usize, incremental: bool| GdIncremental {
        incremental,
        iteration: k,
        pseudo_time: k as f64 * config.learning_rate,
    };
    for k in 0..=config.max_steps {
        if pair[1] > query.s * oj {
            return Ok(done(k, false));
        }
        if pair[0] >= query.f * oi {
            return Ok(done(k, true));
        }
        if k < config.max_steps {
            step_in_place(config.depth(), config.learning_rate, &optimal, &mut pair)?;
        }
    }
    Err(Error::NoConvergence { steps: config.max_steps })
}

/// Bisected descent threshold on `σ₀` with the template's learning rate held
/// fixed. Every candidate must satisfy `σ*ⱼ ≥ 2σ₀`.
pub fn empirical_gd_threshold(template: &GdConfig, query: &IncrementalQuery, bracket: (f64, f64)) -> Result<f64> {
    let check = IncrementalQuery::for_spec(&template.spec, query.large, query.small, query.s, query.f)?;
    let oj = template.spec.optimal[check.small];
    bisect_threshold(
        |s0| {
            if oj < 2.0 * s0 {
                return Err(Error::Precondition(format!("σ*ⱼ = {oj} < 2σ₀ = {}", 2.0 * s0)));
            }
            let cfg = GdConfig { spec: template.spec.with_init_scale(s0)?, ..template.clone() };
            Ok(is_incremental_gd(&cfg, &check)?.incremental)
        },
        bracket.0,
        bracket.1,
        1e-3,
    )
}

/// First-iterate approximation of the relative values `rₖ = σₖ/σ*ₖ` at small
/// `c` and small init, and the factor by which the large coordinate's update
/// exceeds the small one's.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FirstStep {
    pub large: f64,
    pub small: f64,
    pub factor: f64,
}

/// `rᵢ(1) ≈ rᵢ(0) + c Rᵢ^{2-2/N} rᵢ(0)^{2-2/N}` and
/// `rⱼ(1) ≈ r rᵢ(0) + (1/r)^{(N-1)/N} c Rᵢ^{2-2/N} rᵢ(0)^{2-2/N}`.
pub fn first_step_depth_ratio(depth: Depth, r: f64, c: f64, r_large: f64, r_init: f64) -> Result<FirstStep> {
    if !(r > 1.0 && c > 0.0 && r_large > 0.0 && r_large <= 1.0 && r_init > 0.0 && r_init < 1.0) {
        return Err(invalid("need r > 1, c > 0, 0 < Rᵢ ≤ 1 and 0 < rᵢ(0) < 1"));
    }
    let (p, e) = match depth {
        Depth::Finite(0) => return Err(invalid("depth must be at least 1")),
        Depth::Finite(n) => (2.0 - 2.0 / n as f64, (n as f64 - 1.0) / n as f64),
        Depth::Infinite => (2.0, 1.0),
    };
    let update = c * r_large.powf(p) * r_init.powf(p);
    let factor = r.powf(e);
    Ok(FirstStep { large: r_init + update, small: r * r_init + update / factor, factor })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(n: u32, s0: f64, opt: &[f64]) -> ToyModelSpec {
        ToyModelSpec::new(Depth::Finite(n), s0, opt.to_vec()).unwrap()
    }

    #[test]
    fn step_examples() {
        let cfg = GdConfig::new(spec(2, 0.1, &[1.0]), 0.7, 10).unwrap();
        assert_eq!(gd_step(&cfg, &[1.0]).unwrap(), vec![1.0]);
        let cfg = GdConfig::new(spec(2, 0.1, &[1.0]), 0.2, 10).unwrap();
        assert!((gd_step(&cfg, &[0.1]).unwrap()[0] - 0.118810).abs() < 1e-12);
        let cfg = GdConfig::new(spec(1, 0.1, &[2.0]), 0.3, 10).unwrap();
        assert!((gd_step(&cfg, &[0.5]).unwrap()[0] - (0.5 + 0.3 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn step_reports_large_rate() {
        let cfg = GdConfig::new(spec(2, 0.1, &[1.0]), 10.0, 10).unwrap();
        assert!(matches!(gd_step(&cfg, &[5.0]), Err(Error::RateTooLarge { index: 0, .. })));
        assert!(gd_step(&cfg, &[-0.1]).is_err());
    }

    #[test]
    fn no_overshoot_rate_examples() {
        assert_eq!(max_no_overshoot_rate(&spec(2, 0.1, &[4.0, 1.0])).unwrap(), 0.25);
        assert_eq!(max_no_overshoot_rate(&spec(2, 0.1, &[1.0])).unwrap(), 1.0);
        let deep = max_no_overshoot_rate(&spec(1000, 0.1, &[4.0])).unwrap();
        assert!((deep - 1.0 / 16.0).abs() < 1e-3);
        assert!(max_no_overshoot_rate(&spec(1, 0.1, &[4.0])).is_err());
    }

    #[test]
    fn divergence_guard() {
        let cfg = GdConfig::new(spec(1, 0.1, &[1.0]), 2.5, 100).unwrap();
        assert!(matches!(gd_run(&cfg, 1), Err(Error::Divergence { .. })));
    }

    #[test]
    fn run_records_iterations() {
        let cfg = GdConfig::new(spec(3, 0.01, &[1.0, 0.5]), 0.5, 25).unwrap();
        let tr = gd_run(&cfg, 10).unwrap();
        assert_eq!(tr.times, vec![0.0, 10.0, 20.0, 25.0]);
        assert_eq!(tr.method, Method::Gd);
    }

    #[test]
    fn exponent_example() {
        let ex = gd_threshold_exponents(0.1, 1.0, 0.5).unwrap();
        let expect = 0.91f64.ln() / 0.949375f64.ln();
        assert!((ex.a - expect).abs() < 1e-12);
        assert!((ex.a - 1.8152).abs() < 1e-3);
    }

    #[test]
    fn exponents_tend_to_ratio() {
        for r in [2.0, 4.0, 8.0] {
            let ex = gd_threshold_exponents(1e-4, 1.0, 1.0 / r).unwrap();
            assert!((ex.a - r).abs() <= 0.01 * r && (ex.b - r).abs() <= 0.01 * r);
        }
    }

    #[test]
    fn admissibility_boundary_rejected() {
        assert!(gd_threshold_exponents(MAX_RATE_FACTOR, 1.0, 0.5).is_err());
        assert!(gd_threshold_exponents(0.0, 1.0, 0.5).is_err());
    }

    #[test]
    fn gd_threshold_example_inside_bounds() {
        let s = spec(2, 1e-3, &[4.0, 1.0]);
        let query = IncrementalQuery::for_spec(&s, 0, 1, 0.1, 0.9).unwrap();
        let cfg = GdConfig::from_rate_factor(s, 0.1, 10_000_000).unwrap();
        let b = gd_threshold_bounds(&query, 1.0, 4.0, 0.1).unwrap();
        let thr = empirical_gd_threshold(&cfg, &query, (0.5 * b.lower, 0.0999)).unwrap();
        assert!(b.contains(thr), "{} {thr} {}", b.lower, b.upper);
    }

    #[test]
    fn gd_threshold_errors() {
        let s = spec(2, 1e-3, &[4.0, 1.0]);
        let query = IncrementalQuery::for_spec(&s, 0, 1, 0.1, 0.9).unwrap();
        let cfg = GdConfig::from_rate_factor(s, 0.1, 1_000_000).unwrap();
        assert!(matches!(empirical_gd_threshold(&cfg, &query, (0.05, 0.09)), Err(Error::NotBracketing { .. })));
        assert!(matches!(empirical_gd_threshold(&cfg, &query, (1e-5, 0.7)), Err(Error::Precondition(_))));
    }

    #[test]
    fn first_step_examples() {
        let fs = first_step_depth_ratio(Depth::Finite(2), 4.0, 1e-3, 1.0, 1e-3).unwrap();
        assert!((fs.factor - 2.0).abs() < 1e-15);
        let fs = first_step_depth_ratio(Depth::Infinite, 4.0, 1e-3, 1.0, 1e-3).unwrap();
        assert_eq!(fs.factor, 4.0);

        let (r, c, r0) = (16.0, 1e-3, 1e-3);
        let fs = first_step_depth_ratio(Depth::Finite(4), r, c, 1.0, r0).unwrap();
        let s = spec(4, r0, &[1.0, 1.0 / r]);
        let cfg = GdConfig::from_rate_factor(s, c, 1).unwrap();
        let next = gd_step(&cfg, &[r0, r0]).unwrap();
        let exact = [next[0], next[1] * r];
        assert!((fs.large / exact[0] - 1.0).abs() < 5e-3);
        assert!((fs.small / exact[1] - 1.0).abs() < 5e-3);
    }
}
