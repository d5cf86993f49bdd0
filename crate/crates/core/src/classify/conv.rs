use nalgebra::DVector;
use rand::Rng;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use super::{ClassificationDataset, ClassifierRun};
use crate::dynamics::{Method, Trajectory};
use crate::error::{invalid, Error, Result};
use crate::rng::gaussian_vector;

/// `(h ⋆ w)[i] = Σₖ w[k] h[(i + k) mod d]`, the layer map of the network.
pub fn correlate(h: &[f64], w: &[f64]) -> Vec<f64> {
    let d = h.len();
    (0..d)
        .map(|i| {
            let (head, tail) = w.split_at(d - i);
            dot(head, &h[i..]) + dot(tail, &h[..i])
        })
        .collect()
}

/// Circular convolution `(u ⊛ w)[j] = Σᵢ u[i] w[(j − i) mod d]`, the
/// adjoint of `h ↦ h ⋆ w`.
pub fn convolve(u: &[f64], w: &[f64]) -> Vec<f64> {
    // With r[i] = u[-i], (u ⊛ w)[j] = (r ⋆ w)[-j].
    let d = u.len();
    let r: Vec<f64> = (0..d).map(|i| u[(d - i) % d]).collect();
    let c = correlate(&r, w);
    (0..d).map(|j| c[(d - j) % d]).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Network output on `x`: `N − 1` circular layers followed by a dense head.
pub fn conv_forward(kernels: &[DVector<f64>], x: &[f64]) -> Result<f64> {
    let (head, layers) = kernels.split_last().ok_or_else(|| invalid("network has no layers"))?;
    if kernels.iter().any(|w| w.len() != x.len()) {
        return Err(Error::DimensionMismatch { expected: x.len(), found: head.len() });
    }
    let mut h = x.to_vec();
    for w in layers {
        h = correlate(&h, w.as_slice());
    }
    Ok(h.iter().zip(head.iter()).map(|(a, b)| a * b).sum())
}

/// The linear predictor the network computes, by direct evaluation.
pub fn induced_predictor(kernels: &[DVector<f64>]) -> Vec<f64> {
    let Some((head, layers)) = kernels.split_last() else { return Vec::new() };
    let mut v = head.as_slice().to_vec();
    for w in layers.iter().rev() {
        v = convolve(&v, w.as_slice());
    }
    v
}

fn dft(v: &[f64]) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = v.iter().map(|&r| Complex::new(r, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(buf.len()).process(&mut buf);
    buf
}

/// Unnormalized DFT of the induced predictor, computed as the product of
/// the kernels' transforms.
pub fn induced_frequency_profile(kernels: &[DVector<f64>]) -> Vec<Complex<f64>> {
    let d = kernels.first().map_or(0, |w| w.len());
    let mut profile = vec![Complex::new(1.0, 0.0); d];
    for w in kernels {
        for (p, c) in profile.iter_mut().zip(dft(w.as_slice())) {
            *p *= c;
        }
    }
    profile
}

/// `|σ̂[f]|` for `f = 0..=d/2`.
pub fn frequency_amplitudes(predictor: &[f64]) -> Vec<f64> {
    let d = predictor.len();
    dft(predictor).into_iter().take(d / 2 + 1).map(|c| c.norm()).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConvNetSpec {
    pub depth: u32,
    pub init_scale: f64,
}

impl ConvNetSpec {
    pub fn new(depth: u32, init_scale: f64) -> Result<Self> {
        if depth == 0 {
            return Err(Error::UnsupportedDepth("convolutional network depth must be at least 1".into()));
        }
        if !(init_scale > 0.0) || !init_scale.is_finite() {
            return Err(invalid(format!("init scale must be positive, got {init_scale}")));
        }
        Ok(Self { depth, init_scale })
    }

    /// Kernels with i.i.d. `N(0, σ₀^{2/N}/d)` entries, so each frequency of
    /// the induced predictor has magnitude of order `σ₀`.
    pub fn initial_kernels<R: Rng + ?Sized>(&self, rng: &mut R, d: usize) -> Vec<DVector<f64>> {
        let std = (self.init_scale.powf(2.0 / self.depth as f64) / d as f64).sqrt();
        (0..self.depth).map(|_| gaussian_vector(rng, d, std)).collect()
    }
}

/// Gradients of `⟨g, σ⟩` with respect to every kernel, where `σ` is the
/// induced predictor.
pub(crate) fn kernel_gradients(kernels: &[DVector<f64>], g: &[f64]) -> Vec<Vec<f64>> {
    let n = kernels.len();
    let mut forward = vec![g.to_vec()];
    for w in &kernels[..n - 1] {
        let next = correlate(forward.last().unwrap(), w.as_slice());
        forward.push(next);
    }
    let mut grads = vec![Vec::new(); n];
    grads[n - 1] = forward[n - 1].clone();
    let mut back = kernels[n - 1].as_slice().to_vec();
    for layer in (0..n - 1).rev() {
        grads[layer] = correlate(&forward[layer], &back);
        back = convolve(&back, kernels[layer].as_slice());
    }
    grads
}

/// Frequency amplitudes `|σ̂[0..=d/2]|` against the step index, plus the
/// final kernels and predictor.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvTrace {
    pub amplitudes: Trajectory,
    pub losses: Vec<f64>,
    pub kernels: Vec<DVector<f64>>,
    pub predictor: Vec<f64>,
    pub steps: usize,
    pub converged: bool,
}

impl ConvTrace {
    /// Frequencies with the `k` largest final amplitudes, ascending.
    pub fn top_frequencies(&self, k: usize) -> Vec<usize> {
        let last = self.amplitudes.last().unwrap_or(&[]);
        let mut idx: Vec<usize> = (0..last.len()).collect();
        idx.sort_by(|&a, &b| last[b].total_cmp(&last[a]));
        idx.truncate(k);
        idx.sort_unstable();
        idx
    }
}

/// Gradient descent on every kernel of a circular-convolutional network,
/// with the same pilot and stopping rules as the diagonal network.
pub fn conv_gd_run<R: Rng + ?Sized>(
    spec: &ConvNetSpec,
    data: &ClassificationDataset,
    run: &ClassifierRun,
    rng: &mut R,
) -> Result<ConvTrace> {
    if !(run.learning_rate > 0.0) || run.record_every == 0 {
        return Err(invalid("learning rate and record interval must be positive"));
    }
    let d = data.dim();
    let mut kernels = spec.initial_kernels(rng, d);
    let mut times = Vec::new();
    let mut values = Vec::new();
    let mut losses = Vec::new();
    let mut previous = f64::INFINITY;
    let mut step = 0;
    let mut converged;
    let predictor = loop {
        let sigma = DVector::from_vec(induced_predictor(&kernels));
        let (loss, grad) = data.loss_and_gradient(run.loss, &sigma);
        if !loss.is_finite() || sigma.iter().any(|v| !v.is_finite()) {
            return Err(Error::Divergence { step, detail: format!("loss = {loss}") });
        }
        if step <= run.pilot_steps && step > 0 && loss >= previous {
            return Err(Error::PilotFailed { step, eta: run.learning_rate, suggested: run.learning_rate / 4.0 });
        }
        previous = loss;
        converged = loss < run.target_loss;
        let done = converged || step == run.max_steps;
        if step % run.record_every == 0 || done {
            times.push(step as f64);
            let amps = induced_frequency_profile(&kernels).iter().take(d / 2 + 1).map(|c| c.norm()).collect();
            values.push(amps);
            losses.push(loss);
        }
        if done {
            break sigma.as_slice().to_vec();
        }
        let grads = kernel_gradients(&kernels, grad.as_slice());
        for (w, g) in kernels.iter_mut().zip(grads) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= run.learning_rate * gi;
            }
        }
        step += 1;
    };
    let amplitudes = Trajectory { times, values, method: Method::Gd, spec: None };
    Ok(ConvTrace { amplitudes, losses, kernels, predictor, steps: step, converged })
}

#[cfg(test)]
mod tests {
    use super::super::{frequency_dataset, LossFn};
    use super::*;
    use crate::rng::stream;

    fn unit(d: usize, i: usize) -> DVector<f64> {
        DVector::from_fn(d, |k, _| if k == i { 1.0 } else { 0.0 })
    }

    #[test]
    fn fast_paths_match_definitions() {
        let u = [0.5, -1.0, 2.0, 0.25, 3.0];
        let w = [1.5, 0.1, -0.7, 2.0, -0.3];
        let d = 5;
        let corr = correlate(&u, &w);
        let conv = convolve(&u, &w);
        for i in 0..d {
            let c: f64 = (0..d).map(|k| w[k] * u[(i + k) % d]).sum();
            let v: f64 = (0..d).map(|k| u[k] * w[(i + d - k) % d]).sum();
            assert!((corr[i] - c).abs() < 1e-14 && (conv[i] - v).abs() < 1e-14);
        }
    }

    #[test]
    fn identity_kernels_reduce_to_head() {
        let x = [0.3, -1.2, 2.0, 0.5, 0.7];
        let head = DVector::from_column_slice(&[1.0, 2.0, -1.0, 0.5, 0.25]);
        let kernels = vec![unit(5, 0), unit(5, 0), head.clone()];
        let expect: f64 = x.iter().zip(head.iter()).map(|(a, b)| a * b).sum();
        assert!((conv_forward(&kernels, &x).unwrap() - expect).abs() < 1e-15);
    }

    #[test]
    fn shift_kernel_selects_next_entry() {
        let x = [1.0, 2.0, 3.0, 4.0];
        let kernels = vec![unit(4, 1), unit(4, 0)];
        assert_eq!(conv_forward(&kernels, &x).unwrap(), 2.0);
    }

    #[test]
    fn spatial_and_fourier_agree() {
        let mut rng = stream(8, 0);
        let spec = ConvNetSpec::new(3, 0.5).unwrap();
        let kernels = spec.initial_kernels(&mut rng, 12);
        let sigma = induced_predictor(&kernels);
        let mut spectrum = induced_frequency_profile(&kernels);
        FftPlanner::new().plan_fft_inverse(12).process(&mut spectrum);
        for (s, c) in sigma.iter().zip(&spectrum) {
            assert!((s - c.re / 12.0).abs() < 1e-10 && c.im.abs() < 1e-10);
        }
        let x: Vec<f64> = gaussian_vector(&mut rng, 12, 1.0).as_slice().to_vec();
        let direct = conv_forward(&kernels, &x).unwrap();
        let linear: f64 = sigma.iter().zip(&x).map(|(a, b)| a * b).sum();
        assert!((direct - linear).abs() < 1e-10);
    }

    #[test]
    fn kernel_gradients_match_finite_difference() {
        let mut rng = stream(9, 0);
        let kernels = ConvNetSpec::new(3, 0.8).unwrap().initial_kernels(&mut rng, 6);
        let g: Vec<f64> = gaussian_vector(&mut rng, 6, 1.0).as_slice().to_vec();
        let objective = |ks: &[DVector<f64>]| -> f64 { induced_predictor(ks).iter().zip(&g).map(|(a, b)| a * b).sum() };
        let grads = kernel_gradients(&kernels, &g);
        for layer in 0..3 {
            for k in 0..6 {
                let h = 1e-6;
                let mut up = kernels.clone();
                up[layer][k] += h;
                let mut dn = kernels.clone();
                dn[layer][k] -= h;
                let fd = (objective(&up) - objective(&dn)) / (2.0 * h);
                assert!((fd - grads[layer][k]).abs() < 1e-8, "layer {layer} k {k}");
            }
        }
    }

    #[test]
    fn zero_steps_keep_init_scale() {
        let mut rng = stream(10, 0);
        let ds = frequency_dataset(&mut rng, 64, 20, 2).unwrap();
        let spec = ConvNetSpec::new(3, 1e-3).unwrap();
        let trace = conv_gd_run(&spec, &ds, &ClassifierRun::new(LossFn::Exponential, 0.01, 0), &mut rng).unwrap();
        let amps = trace.amplitudes.last().unwrap();
        let mean = amps.iter().sum::<f64>() / amps.len() as f64;
        assert!(mean > 1e-4 && mean < 1e-2, "{mean}");
        let direct = frequency_amplitudes(&trace.predictor);
        for (a, b) in amps.iter().zip(direct) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}
