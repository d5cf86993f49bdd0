use serde::{Deserialize, Serialize};

use super::integrate::flow_alpha_time;
use super::ode::StepControl;
use super::{Depth, ToyModelSpec};
use crate::error::{invalid, Error, Result};
use crate::gd::GdThresholdExponents;

/// Parameters of an (s, f)-incremental test between a large coordinate and
/// a small one. `ratio` is `σ*_large / σ*_small`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IncrementalQuery {
    pub s: f64,
    pub f: f64,
    pub large: usize,
    pub small: usize,
    pub ratio: f64,
}

impl IncrementalQuery {
    /// Query for coordinates `large` and `small` of `spec`.
    pub fn for_spec(spec: &ToyModelSpec, large: usize, small: usize, s: f64, f: f64) -> Result<Self> {
        let get = |k: usize| {
            spec.optimal.get(k).copied().ok_or(Error::DimensionMismatch { expected: spec.dim(), found: k + 1 })
        };
        let (hi, lo) = (get(large)?, get(small)?);
        if large == small {
            return Err(invalid("large and small index coincide"));
        }
        if !(lo > 0.0) {
            return Err(invalid("σ* of the small coordinate must be positive"));
        }
        let q = Self::with_ratio(hi / lo, s, f)?;
        Ok(Self { large, small, ..q })
    }

    /// Index-free query used by the analytic bounds. Indices are 0 (large)
    /// and 1 (small).
    pub fn with_ratio(ratio: f64, s: f64, f: f64) -> Result<Self> {
        if !(ratio > 1.0 && ratio.is_finite()) {
            return Err(invalid(format!("ratio r must exceed 1, got {ratio}")));
        }
        if !(s > 0.0 && s < 0.25) {
            return Err(invalid(format!("s must lie in (0, 1/4), got {s}")));
        }
        if !(f > 0.75 && f < 1.0) {
            return Err(invalid(format!("f must lie in (3/4, 1), got {f}")));
        }
        Ok(Self { s, f, large: 0, small: 1, ratio })
    }

    /// Two-coordinate spec `(r σ*ⱼ, σ*ⱼ)` matching this query.
    pub fn pair_spec(&self, depth: Depth, init_scale: f64, small_optimal: f64) -> Result<ToyModelSpec> {
        ToyModelSpec::new(depth, init_scale, vec![self.ratio * small_optimal, small_optimal])
    }
}

/// One coordinate of a trajectory on its time grid.
#[derive(Debug, Clone, PartialEq)]
pub struct CoordinateSeries<'a> {
    pub times: &'a [f64],
    pub values: Vec<f64>,
    pub optimal: f64,
}

/// Earliest sampled time at which the incremental condition holds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub time: f64,
    pub sample: usize,
}

/// Search the shared grid for a time with `σⱼ ≤ s σ*ⱼ` and `σᵢ ≥ f σ*ᵢ`.
pub fn is_incremental(
    large: &CoordinateSeries<'_>,
    small: &CoordinateSeries<'_>,
    query: &IncrementalQuery,
) -> Result<Option<Witness>> {
    if large.times != small.times
        || large.values.len() != large.times.len()
        || small.values.len() != small.times.len()
    {
        return Err(invalid("coordinates are not on the same time grid"));
    }
    if !(large.optimal > small.optimal && small.optimal > 0.0) {
        return Err(invalid("need σ*ᵢ > σ*ⱼ > 0"));
    }
    let hit = (0..large.times.len()).find(|&k| {
        small.values[k] <= query.s * small.optimal && large.values[k] >= query.f * large.optimal
    });
    Ok(hit.map(|k| Witness { time: large.times[k], sample: k }))
}

/// Exact flow check: integrate until the large coordinate reaches `f σ*ᵢ`
/// and test the small coordinate there. Both coordinates rise monotonically,
/// so this crossing is the best witness time.
pub fn is_incremental_flow(spec: &ToyModelSpec, query: &IncrementalQuery, ctrl: &StepControl) -> Result<bool> {
    let (oi, oj) = (spec.optimal[query.large], spec.optimal[query.small]);
    if spec.init_scale > query.s * oj {
        return Ok(false);
    }
    let pair = ToyModelSpec::new(spec.depth, spec.init_scale, vec![oi, oj])?;
    match flow_alpha_time(&pair, 0, query.f, f64::INFINITY, ctrl)? {
        Some((_, state)) => Ok(state[1] <= query.s * oj),
        None => Ok(false),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Regime {
    FlowN2,
    FlowDeep,
    GdN2,
}

/// Analytic bracket on the threshold init scale, optionally with the
/// empirically bisected value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdBounds {
    pub lower: f64,
    pub upper: f64,
    pub empirical: Option<f64>,
    pub regime: Regime,
    pub exponents: Option<GdThresholdExponents>,
}

impl ThresholdBounds {
    pub fn contains(&self, value: f64) -> bool {
        self.lower <= value && value <= self.upper
    }
}

/// Gradient-flow threshold bounds for depth `N ≥ 2`.
pub fn flow_threshold_bounds(query: &IncrementalQuery, small_optimal: f64, depth: Depth) -> Result<ThresholdBounds> {
    let IncrementalQuery { s, f, ratio: r, .. } = *query;
    if !(r > 1.0) {
        return Err(invalid(format!("ratio r must exceed 1, got {r}")));
    }
    if !(small_optimal > 0.0) {
        return Err(invalid("σ*ⱼ must be positive"));
    }
    let base = s * small_optimal;
    let (lower, upper, regime) = match depth {
        Depth::Finite(1) => return Err(Error::UnsupportedDepth("no threshold exists at depth 1".into())),
        Depth::Finite(0) => return Err(invalid("depth must be at least 1")),
        Depth::Finite(2) => {
            let q = s / (r * f);
            (
                base * q.powf(1.0 / ((1.0 - f) * (r - 1.0))),
                base * q.powf((1.0 - s) / (r - 1.0)),
                Regime::FlowN2,
            )
        }
        d => {
            let e = match d {
                Depth::Finite(n) => n as f64 / (n as f64 - 2.0),
                Depth::Infinite => 1.0,
            };
            let x = (1.0 - f) * (r - 1.0);
            (base * (x / (1.0 + x)).powf(e), base * ((r - 1.0) / (r - s)).powf(e), Regime::FlowDeep)
        }
    };
    Ok(ThresholdBounds { lower, upper, empirical: None, regime, exponents: None })
}

/// Bisect a monotone predicate on `σ₀` in log space: true at `lo`, false at
/// `hi`. A 16-point scan first checks that the predicate flips only once.
pub(crate) fn bisect_threshold<P>(mut incremental: P, lo: f64, hi: f64, rel_width: f64) -> Result<f64>
where
    P: FnMut(f64) -> Result<bool>,
{
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::NotBracketing { lo, hi, reason: "need 0 < lo < hi".into() });
    }
    if !incremental(lo)? {
        return Err(Error::NotBracketing { lo, hi, reason: "not incremental at lo".into() });
    }
    if incremental(hi)? {
        return Err(Error::NotBracketing { lo, hi, reason: "still incremental at hi".into() });
    }
    const SCAN: usize = 16;
    let (llo, lhi) = (lo.ln(), hi.ln());
    let mut grid = Vec::with_capacity(SCAN);
    for k in 0..SCAN {
        let x = (llo + (lhi - llo) * k as f64 / (SCAN - 1) as f64).exp();
        let v = if k == 0 { true } else if k == SCAN - 1 { false } else { incremental(x)? };
        grid.push((x, v));
    }
    let flips = grid.windows(2).filter(|w| w[0].1 != w[1].1).count();
    if flips > 1 {
        return Err(Error::NonMonotone { flips });
    }
    let k = grid.iter().position(|g| !g.1).unwrap_or(SCAN - 1);
    let (mut a, mut b) = (grid[k - 1].0, grid[k].0);
    while b / a - 1.0 > rel_width {
        let mid = (a * b).sqrt();
        if incremental(mid)? {
            a = mid;
        } else {
            b = mid;
        }
    }
    Ok((a * b).sqrt())
}

/// Largest init scale for which the flow is still (s, f)-incremental, to
/// relative width `1e-3`. `template` supplies depth and the optimal vector.
pub fn empirical_threshold(
    template: &ToyModelSpec,
    query: &IncrementalQuery,
    bracket: (f64, f64),
    ctrl: &StepControl,
) -> Result<f64> {
    let check = IncrementalQuery::for_spec(template, query.large, query.small, query.s, query.f)?;
    bisect_threshold(
        |s0| is_incremental_flow(&template.with_init_scale(s0)?, &check, ctrl),
        bracket.0,
        bracket.1,
        1e-3,
    )
}

#[cfg(test)]
mod tests {
    use super::super::{alpha_time, integrate_flow};
    use super::*;

    fn q(r: f64, s: f64, f: f64) -> IncrementalQuery {
        IncrementalQuery::with_ratio(r, s, f).unwrap()
    }

    #[test]
    fn bound_examples() {
        let b = flow_threshold_bounds(&q(2.0, 0.2, 0.8), 1.0, Depth::Finite(4)).unwrap();
        assert!((b.lower - 0.2 * (0.2f64 / 1.2).powi(2)).abs() < 1e-15);
        assert!((b.lower - 0.0055556).abs() < 1e-7);
        assert!((b.upper - 0.0617284).abs() < 1e-7);
        assert_eq!(b.regime, Regime::FlowDeep);

        let b = flow_threshold_bounds(&q(4.0, 0.1, 0.9), 1.0, Depth::Finite(2)).unwrap();
        let expect = 0.1 * (0.1f64 / 3.6).powf(10.0 / 3.0);
        assert!((b.lower - expect).abs() < 1e-18);
        assert!((b.lower - 6.5e-7).abs() < 0.05e-7);
        assert_eq!(b.regime, Regime::FlowN2);
    }

    #[test]
    fn bounds_approach_s_for_large_ratio() {
        let b = flow_threshold_bounds(&q(1e9, 0.1, 0.9), 2.0, Depth::Finite(5)).unwrap();
        assert!((b.lower / 0.2 - 1.0).abs() < 1e-6);
        assert!((b.upper / 0.2 - 1.0).abs() < 1e-6);
    }

    #[test]
    fn bound_rejections() {
        assert!(flow_threshold_bounds(&q(2.0, 0.1, 0.9), 1.0, Depth::Finite(1)).is_err());
        assert!(IncrementalQuery::with_ratio(1.0, 0.1, 0.9).is_err());
        assert!(IncrementalQuery::with_ratio(2.0, 0.3, 0.9).is_err());
        assert!(IncrementalQuery::with_ratio(2.0, 0.1, 0.7).is_err());
        let spec = ToyModelSpec::new(Depth::Finite(2), 1e-3, vec![3.0, 3.0]).unwrap();
        assert!(IncrementalQuery::for_spec(&spec, 0, 0, 0.1, 0.9).is_err());
        assert!(IncrementalQuery::for_spec(&spec, 0, 1, 0.1, 0.9).is_err());
    }

    #[test]
    fn grid_detector_examples() {
        let ctrl = StepControl { samples: 4000, ..StepControl::with_rtol(1e-9) };
        for (depth, horizon, expect) in [(Depth::Infinite, 3e4, true), (Depth::Finite(1), 40.0, false)] {
            let spec = ToyModelSpec::new(depth, 1e-4, vec![12.0, 3.0]).unwrap();
            let query = IncrementalQuery::for_spec(&spec, 0, 1, 0.1, 0.9).unwrap();
            let tr = integrate_flow(&spec, horizon, &ctrl).unwrap();
            let w = is_incremental(&tr.coordinate(0).unwrap(), &tr.coordinate(1).unwrap(), &query).unwrap();
            assert_eq!(w.is_some(), expect, "{depth}");
            let quad = alpha_time(&spec, 0, 0.9).unwrap().time <= alpha_time(&spec, 1, 0.1).unwrap().time;
            assert_eq!(quad, expect);
            assert_eq!(is_incremental_flow(&spec, &query, &ctrl).unwrap(), expect);
        }
    }

    #[test]
    fn grid_mismatch_rejected() {
        let t1 = [0.0, 1.0];
        let t2 = [0.0, 2.0];
        let a = CoordinateSeries { times: &t1, values: vec![0.1, 0.2], optimal: 2.0 };
        let b = CoordinateSeries { times: &t2, values: vec![0.1, 0.2], optimal: 1.0 };
        assert!(is_incremental(&a, &b, &q(2.0, 0.1, 0.9)).is_err());
    }

    #[test]
    fn bisection_brackets() {
        let thr = bisect_threshold(|x| Ok(x < 0.3), 0.01, 1.0, 1e-3).unwrap();
        assert!((thr / 0.3 - 1.0).abs() < 1e-3);
        assert!(matches!(bisect_threshold(|x| Ok(x > 0.5), 0.01, 1.0, 1e-3), Err(Error::NotBracketing { .. })));
        assert!(matches!(
            bisect_threshold(|x| Ok(!(0.1..0.2).contains(&x)), 0.01, 1.0, 1e-3),
            Err(Error::NotBracketing { .. })
        ));
        let r = bisect_threshold(|x| Ok(x < 0.05 || (0.2..0.4).contains(&x)), 0.01, 1.0, 1e-3);
        assert!(matches!(r, Err(Error::NonMonotone { flips: 3 })));
    }

    #[test]
    fn empirical_threshold_inside_bounds() {
        let ctrl = StepControl::with_rtol(1e-10);
        for depth in [Depth::Finite(2), Depth::Finite(4)] {
            let spec = ToyModelSpec::new(depth, 1e-3, vec![4.0, 1.0]).unwrap();
            let query = IncrementalQuery::for_spec(&spec, 0, 1, 0.1, 0.9).unwrap();
            let b = flow_threshold_bounds(&query, 1.0, depth).unwrap();
            let thr = empirical_threshold(&spec, &query, (0.5 * b.lower, 0.0999), &ctrl).unwrap();
            assert!(b.contains(thr), "{depth}: {} {thr} {}", b.lower, b.upper);
        }
    }

    #[test]
    fn empirical_threshold_bad_bracket() {
        let spec = ToyModelSpec::new(Depth::Finite(3), 1e-3, vec![4.0, 1.0]).unwrap();
        let query = IncrementalQuery::for_spec(&spec, 0, 1, 0.1, 0.9).unwrap();
        let r = empirical_threshold(&spec, &query, (0.08, 0.0999), &StepControl::default());
        assert!(matches!(r, Err(Error::NotBracketing { .. })));
    }
}
