//! Adaptive Dormand–Prince 5(4) stepping for small dense systems.
//!
//! The stepper exposes one accepted step at a time plus the 4th-order
//! continuous extension over the last step, so callers can sample on a grid
//! or locate a level crossing without re-integrating.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// Tolerances and limits for adaptive integration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub min_step: f64,
    pub max_steps: usize,
    /// Number of uniformly spaced samples recorded after `t = 0`.
    pub samples: usize,
}

impl Default for StepControl {
    fn default() -> Self {
        Self { rtol: 1e-8, atol: 1e-14, min_step: 1e-12, max_steps: 1_000_000, samples: 100 }
    }
}

impl StepControl {
    pub fn with_rtol(rtol: f64) -> Self {
        Self { rtol, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.rtol > 0.0 && self.rtol.is_finite()) {
            return Err(invalid(format!("relative tolerance must be positive, got {}", self.rtol)));
        }
        if !(self.atol >= 0.0 && self.atol.is_finite()) {
            return Err(invalid(format!("absolute tolerance must be non-negative, got {}", self.atol)));
        }
        if !(self.min_step > 0.0) {
            return Err(invalid("minimum step must be positive"));
        }
        if self.max_steps == 0 {
            return Err(invalid("max_steps must be positive"));
        }
        Ok(())
    }
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;
const D1: f64 = -12715105075.0 / 11282082432.0;
const D3: f64 = 87487479700.0 / 32700410799.0;
const D4: f64 = -10690763975.0 / 1880347072.0;
const D5: f64 = 701980252875.0 / 199316789632.0;
const D6: f64 = -1453857185.0 / 822651844.0;
const D7: f64 = 69997945.0 / 29380423.0;

/// Dormand–Prince stepper over `y' = f(t, y)`.
pub struct Dopri5<F> {
    rhs: F,
    ctrl: StepControl,
    nonneg: bool,
    t: f64,
    y: Vec<f64>,
    h: f64,
    steps: usize,
    t_prev: f64,
    dense: [Vec<f64>; 5],
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
}

impl<F: FnMut(f64, &[f64], &mut [f64])> Dopri5<F> {
    pub fn new(mut rhs: F, t0: f64, y0: &[f64], ctrl: StepControl) -> Result<Self> {
        ctrl.validate()?;
        let n = y0.len();
        let zeros = || vec![0.0; n];
        let mut k = [zeros(), zeros(), zeros(), zeros(), zeros(), zeros(), zeros()];
        rhs(t0, y0, &mut k[0]);
        let h = initial_step(y0, &k[0], &ctrl);
        Ok(Self {
            rhs,
            ctrl,
            nonneg: false,
            t: t0,
            y: y0.to_vec(),
            h,
            steps: 0,
            t_prev: t0,
            dense: [y0.to_vec(), zeros(), zeros(), zeros(), zeros()],
            k,
            tmp: zeros(),
            y_new: zeros(),
        })
    }

    /// Clamp the state at zero after every accepted step.
    pub fn clamp_nonnegative(mut self) -> Self {
        self.nonneg = true;
        self
    }

    pub fn time(&self) -> f64 {
        self.t
    }

    pub fn state(&self) -> &[f64] {
        &self.y
    }

    pub fn previous_time(&self) -> f64 {
        self.t_prev
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Take one accepted step that does not pass `t_limit`.
    pub fn step(&mut self, t_limit: f64) -> Result<()> {
        let span = t_limit - self.t;
        if span <= 0.0 {
            return Ok(());
        }
        let n = self.y.len();
        loop {
            if self.steps >= self.ctrl.max_steps {
                return Err(Error::StepLimit { steps: self.steps, time: self.t });
            }
            let proposed = self.h;
            let mut h = proposed.min(span);
            // Avoid leaving a sliver that would force a tiny final step.
            if h < span && span - h < 0.01 * h {
                h = span;
            }
            let clipped = h == span;
            if h < self.ctrl.min_step && h < span {
                return Err(Error::StepUnderflow { time: self.t });
            }
            let err = self.trial(h);
            self.steps += 1;
            if err.is_finite() && err <= 1.0 {
                self.accept(h, n);
                if clipped {
                    self.t = t_limit;
                }
                let fac = if err == 0.0 { 10.0 } else { (0.9 * err.powf(-0.2)).clamp(0.2, 10.0) };
                // A step shortened to land on `t_limit` says nothing about
                // the size the next one can take.
                self.h = if clipped { (h * fac).max(proposed) } else { h * fac };
                return Ok(());
            }
            let fac = if err.is_finite() { (0.9 * err.powf(-0.2)).clamp(0.1, 0.9) } else { 0.1 };
            self.h = h * fac;
            if self.h < self.ctrl.min_step {
                return Err(Error::StepUnderflow { time: self.t });
            }
        }
    }

    /// Step until exactly `t_target`.
    pub fn advance_to(&mut self, t_target: f64) -> Result<()> {
        while self.t < t_target {
            self.step(t_target)?;
        }
        Ok(())
    }

    /// Continuous extension over the last accepted step, `t ∈ [t_prev, t]`.
    pub fn interpolate(&self, t: f64, out: &mut [f64]) {
        let h = self.t - self.t_prev;
        let theta = if h > 0.0 { ((t - self.t_prev) / h).clamp(0.0, 1.0) } else { 1.0 };
        let theta1 = 1.0 - theta;
        let [r1, r2, r3, r4, r5] = &self.dense;
        for i in 0..out.len() {
            out[i] = r1[i] + theta * (r2[i] + theta1 * (r3[i] + theta * (r4[i] + theta1 * r5[i])));
        }
    }

    fn trial(&mut self, h: f64) -> f64 {
        let n = self.y.len();
        let t = self.t;
        let (y, tmp) = (&self.y, &mut self.tmp);
        let [k1, k2, k3, k4, k5, k6, k7] = &mut self.k;

        for i in 0..n {
            tmp[i] = y[i] + h * A21 * k1[i];
        }
        (self.rhs)(t + C2 * h, tmp, k2);
        for i in 0..n {
            tmp[i] = y[i] + h * (A31 * k1[i] + A32 * k2[i]);
        }
        (self.rhs)(t + C3 * h, tmp, k3);
        for i in 0..n {
            tmp[i] = y[i] + h * (A41 * k1[i] + A42 * k2[i] + A43 * k3[i]);
        }
        (self.rhs)(t + C4 * h, tmp, k4);
        for i in 0..n {
            tmp[i] = y[i] + h * (A51 * k1[i] + A52 * k2[i] + A53 * k3[i] + A54 * k4[i]);
        }
        (self.rhs)(t + C5 * h, tmp, k5);
        for i in 0..n {
            tmp[i] = y[i]
                + h * (A61 * k1[i] + A62 * k2[i] + A63 * k3[i] + A64 * k4[i] + A65 * k5[i]);
        }
        (self.rhs)(t + h, tmp, k6);
        let y_new = &mut self.y_new;
        for i in 0..n {
            y_new[i] = y[i]
                + h * (A71 * k1[i] + A73 * k3[i] + A74 * k4[i] + A75 * k5[i] + A76 * k6[i]);
        }
        (self.rhs)(t + h, y_new, k7);

        let mut sum = 0.0;
        for i in 0..n {
            let e = h
                * (E1 * k1[i] + E3 * k3[i] + E4 * k4[i] + E5 * k5[i] + E6 * k6[i] + E7 * k7[i]);
            let scale = self.ctrl.atol + self.ctrl.rtol * y[i].abs().max(y_new[i].abs());
            let r = if scale > 0.0 { e / scale } else if e == 0.0 { 0.0 } else { f64::INFINITY };
            sum += r * r;
        }
        if n == 0 {
            0.0
        } else {
            (sum / n as f64).sqrt()
        }
    }

    fn accept(&mut self, h: f64, n: usize) {
        let [k1, _, k3, k4, k5, k6, k7] = &self.k;
        let [r1, r2, r3, r4, r5] = &mut self.dense;
        for i in 0..n {
            let dy = self.y_new[i] - self.y[i];
            let bspl = h * k1[i] - dy;
            r1[i] = self.y[i];
            r2[i] = dy;
            r3[i] = bspl;
            r4[i] = dy - h * k7[i] - bspl;
            r5[i] = h * (D1 * k1[i] + D3 * k3[i] + D4 * k4[i] + D5 * k5[i] + D6 * k6[i] + D7 * k7[i]);
        }
        self.t_prev = self.t;
        self.t += h;
        std::mem::swap(&mut self.y, &mut self.y_new);
        let clamped = self.nonneg && self.y.iter().any(|v| *v < 0.0);
        if clamped {
            self.y.iter_mut().for_each(|v| *v = v.max(0.0));
        }
        // FSAL: the last stage is the derivative at the new point.
        let [k1, .., k7] = &mut self.k;
        if clamped {
            (self.rhs)(self.t, &self.y, k1);
        } else {
            std::mem::swap(k1, k7);
        }
    }
}

fn initial_step(y0: &[f64], f0: &[f64], ctrl: &StepControl) -> f64 {
    let mut d0 = 0.0;
    let mut d1 = 0.0;
    for (y, f) in y0.iter().zip(f0) {
        let sc = ctrl.atol + ctrl.rtol * y.abs();
        if sc > 0.0 {
            d0 += (y / sc).powi(2);
            d1 += (f / sc).powi(2);
        }
    }
    let h = if d0 < 1e-10 || d1 < 1e-10 { 1e-6 } else { 0.01 * (d0 / d1).sqrt() };
    h.max(ctrl.min_step)
}
