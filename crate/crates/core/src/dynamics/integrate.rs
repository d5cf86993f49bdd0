use super::ode::Dopri5;
use super::{rhs_into, Method, ToyModelSpec, Trajectory};
use crate::error::{invalid, Result};

pub use super::ode::StepControl;

fn stepper(
    spec: &ToyModelSpec,
    ctrl: StepControl,
) -> Result<Dopri5<impl FnMut(f64, &[f64], &mut [f64]) + '_>> {
    let exponent = spec.depth.flow_exponent();
    let optimal = &spec.optimal;
    let rhs = move |_t: f64, y: &[f64], out: &mut [f64]| rhs_into(exponent, optimal, y, out);
    Ok(Dopri5::new(rhs, 0.0, &spec.initial(), ctrl)?.clamp_nonnegative())
}

/// Integrate the flow to `t_end`, recording `ctrl.samples` uniform samples
/// after the initial point. Steps are shortened to land on each sample.
///
/// A horizon below `ctrl.min_step` yields the single initial point.
pub fn integrate_flow(spec: &ToyModelSpec, t_end: f64, ctrl: &StepControl) -> Result<Trajectory> {
    if !(t_end > 0.0 && t_end.is_finite()) {
        return Err(invalid(format!("t_end must be positive and finite, got {t_end}")));
    }
    ctrl.validate()?;
    if t_end < ctrl.min_step || ctrl.samples == 0 {
        return Ok(single_point(spec));
    }
    let n = ctrl.samples;
    let times: Vec<f64> = (0..=n).map(|k| t_end * k as f64 / n as f64).collect();
    integrate_flow_at(spec, &times, ctrl)
}

/// Integrate the flow and record the state at each of the given times,
/// which must be non-negative and strictly increasing.
pub fn integrate_flow_at(spec: &ToyModelSpec, times: &[f64], ctrl: &StepControl) -> Result<Trajectory> {
    if times.is_empty() {
        return Err(invalid("sample times are empty"));
    }
    if times[0] < 0.0 || !times.iter().all(|t| t.is_finite()) {
        return Err(invalid("sample times must be finite and non-negative"));
    }
    if times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("sample times must be strictly increasing"));
    }
    let mut solver = stepper(spec, *ctrl)?;
    let mut values = Vec::with_capacity(times.len());
    for &t in times {
        solver.advance_to(t)?;
        values.push(solver.state().to_vec());
    }
    Ok(Trajectory { times: times.to_vec(), values, method: Method::Ode, spec: Some(spec.clone()) })
}

fn single_point(spec: &ToyModelSpec) -> Trajectory {
    Trajectory { times: vec![0.0], values: vec![spec.initial()], method: Method::Ode, spec: Some(spec.clone()) }
}

/// Integrate until coordinate `i` first reaches `α σ*ᵢ`. Returns the crossing
/// time (located on the continuous extension) and the full state there.
///
/// Returns `None` when the level is not reached before `t_max`.
pub fn flow_alpha_time(
    spec: &ToyModelSpec,
    i: usize,
    alpha: f64,
    t_max: f64,
    ctrl: &StepControl,
) -> Result<Option<(f64, Vec<f64>)>> {
    let target = *spec.optimal.get(i).ok_or_else(|| invalid(format!("index {i} out of range")))?;
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(invalid(format!("α must lie in (0, 1), got {alpha}")));
    }
    let level = alpha * target;
    if spec.init_scale >= level {
        return Ok(Some((0.0, spec.initial())));
    }
    let mut solver = stepper(spec, *ctrl)?;
    while solver.time() < t_max {
        solver.step(t_max)?;
        if solver.state()[i] >= level {
            let mut buf = vec![0.0; spec.dim()];
            let (mut lo, mut hi) = (solver.previous_time(), solver.time());
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if mid <= lo || mid >= hi {
                    break;
                }
                solver.interpolate(mid, &mut buf);
                if buf[i] >= level {
                    hi = mid;
                } else {
                    lo = mid;
                }
            }
            solver.interpolate(hi, &mut buf);
            return Ok(Some((hi, buf)));
        }
    }
    Ok(None)
}
