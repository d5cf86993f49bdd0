use serde::{Deserialize, Serialize};

use super::ToyModelSpec;
use crate::error::{invalid, Error, Result};

const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.000000000000000000000000000000000,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn kronrod_panel<F: FnMut(f64) -> f64>(f: &mut F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut k = WGK[7] * fc;
    let mut g = WG[3] * fc;
    for j in 0..7 {
        let x = h * XGK[j];
        let s = f(c - x) + f(c + x);
        k += WGK[j] * s;
        // Odd Kronrod nodes are the 7-point Gauss nodes.
        if j % 2 == 1 {
            g += WG[j / 2] * s;
        }
    }
    (k * h, ((k - g) * h).abs())
}

/// Adaptive Gauss–Kronrod (7, 15) quadrature. Panels are bisected until the
/// summed error estimate falls below `rtol · |integral|`. The rule never
/// samples the interval endpoints.
pub fn gauss_kronrod<F: FnMut(f64) -> f64>(mut f: F, a: f64, b: f64, rtol: f64) -> Result<(f64, f64)> {
    if a == b {
        return Ok((0.0, 0.0));
    }
    let mut panels = vec![(a, b, kronrod_panel(&mut f, a, b))];
    for _ in 0..2000 {
        let total: f64 = panels.iter().map(|p| p.2 .0).sum();
        let err: f64 = panels.iter().map(|p| p.2 .1).sum();
        if !total.is_finite() {
            return Err(invalid("integrand is not finite on the interval"));
        }
        if err <= rtol * total.abs() || err < 1e-300 {
            return Ok((total, err));
        }
        let worst = panels
            .iter()
            .enumerate()
            .max_by(|x, y| x.1 .2 .1.total_cmp(&y.1 .2 .1))
            .map(|(k, _)| k)
            .unwrap_or(0);
        let (lo, hi, _) = panels.swap_remove(worst);
        let mid = 0.5 * (lo + hi);
        panels.push((lo, mid, kronrod_panel(&mut f, lo, mid)));
        panels.push((mid, hi, kronrod_panel(&mut f, mid, hi)));
    }
    Err(Error::NoConvergence { steps: 2000 })
}

/// Result of [`alpha_time`]. `degenerate` marks `ασ* ≤ σ₀`, where the time
/// is zero by convention.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaTime {
    pub time: f64,
    pub degenerate: bool,
}

/// Time for coordinate `i` to reach `α σ*ᵢ`, by quadrature of
/// `dσ / (σ^{2-2/N} (σ* - σ))` in the variable `u = ln σ`.
pub fn alpha_time(spec: &ToyModelSpec, i: usize, alpha: f64) -> Result<AlphaTime> {
    let target = *spec
        .optimal
        .get(i)
        .ok_or(Error::DimensionMismatch { expected: spec.dim(), found: i + 1 })?;
    if !(alpha > 0.0) || alpha.is_nan() {
        return Err(invalid(format!("α must be positive, got {alpha}")));
    }
    if alpha >= 1.0 {
        return Err(invalid(format!("α = {alpha} ≥ 1: the α-time integral diverges")));
    }
    let level = alpha * target;
    if level <= spec.init_scale {
        return Ok(AlphaTime { time: 0.0, degenerate: true });
    }
    let p = spec.depth.flow_exponent();
    let integrand = |u: f64| {
        let s = u.exp();
        (u * (1.0 - p)).exp() / (target - s)
    };
    let (time, _) = gauss_kronrod(integrand, spec.init_scale.ln(), level.ln(), 1e-12)?;
    Ok(AlphaTime { time, degenerate: false })
}

#[cfg(test)]
mod tests {
    use super::super::{infinite_depth_time, Depth};
    use super::*;

    fn spec(depth: Depth, s0: f64, opt: &[f64]) -> ToyModelSpec {
        ToyModelSpec::new(depth, s0, opt.to_vec()).unwrap()
    }

    #[test]
    fn examples() {
        let t = alpha_time(&spec(Depth::Finite(2), 0.1, &[1.0]), 0, 0.5).unwrap();
        assert!((t.time - 9f64.ln()).abs() < 1e-10 && !t.degenerate);
        let t = alpha_time(&spec(Depth::Finite(1), 0.5, &[2.0]), 0, 0.75).unwrap();
        assert!((t.time - 3f64.ln()).abs() < 1e-10);
        let t = alpha_time(&spec(Depth::Finite(5), 0.5, &[2.0]), 0, 0.25).unwrap();
        assert_eq!(t, AlphaTime { time: 0.0, degenerate: true });
    }

    #[test]
    fn rejects_alpha_at_or_above_one() {
        let s = spec(Depth::Finite(2), 0.1, &[1.0]);
        assert!(alpha_time(&s, 0, 1.0).is_err());
        assert!(alpha_time(&s, 0, 1.5).is_err());
        assert!(alpha_time(&s, 0, 0.0).is_err());
        assert!(alpha_time(&s, 3, 0.5).is_err());
    }

    #[test]
    fn near_singular_endpoint() {
        // N=1: t = ln((σ*-σ₀)/(σ*(1-α))).
        let s = spec(Depth::Finite(1), 0.1, &[1.0]);
        let t = alpha_time(&s, 0, 0.999999).unwrap().time;
        assert!((t - (0.9f64 / 1e-6).ln()).abs() < 1e-8);
    }

    #[test]
    fn infinite_depth_matches_implicit_form() {
        let s = spec(Depth::Infinite, 1e-3, &[4.0]);
        let t = alpha_time(&s, 0, 0.9).unwrap().time;
        let expect = infinite_depth_time(1e-3, 4.0, 3.6);
        assert!(((t - expect) / expect).abs() < 1e-10);
    }

    #[test]
    fn polynomial_integrand_exact() {
        let (v, _) = gauss_kronrod(|x| x.powi(5) - 3.0 * x, 0.0, 2.0, 1e-14).unwrap();
        assert!((v - (64.0 / 6.0 - 6.0)).abs() < 1e-13);
    }
}
