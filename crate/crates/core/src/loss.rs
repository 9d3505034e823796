//! Frequency alignment loss and temporal reference losses.
//!
//! The frequency loss is the mean complex-modulus error between the Fourier
//! coefficients of target and prediction, normalized by the element count of
//! the compared tensors.

use ndarray::Array2;
use num_complex::Complex64;

use crate::error::{Error, Result};
use crate::spectral::{dft, RealSignal, Spectrum};

fn check_shapes(target: &Spectrum, pred: &Spectrum) -> Result<()> {
    if target.bins() != pred.bins() || target.channels() != pred.channels() {
        return Err(Error::InvalidInput(format!(
            "spectrum shapes differ: {}x{} vs {}x{}",
            target.bins(),
            target.channels(),
            pred.bins(),
            pred.channels()
        )));
    }
    Ok(())
}

/// Mean complex-modulus error between two spectra.
pub fn faloss(target: &Spectrum, pred: &Spectrum) -> Result<f64> {
    check_shapes(target, pred)?;
    let count = (target.bins() * target.channels()) as f64;
    let sum: f64 = target
        .coeffs
        .iter()
        .zip(pred.coeffs.iter())
        .map(|(t, p)| (t - p).norm())
        .sum();
    Ok(sum / count)
}

/// Loss plus its gradient with respect to the prediction's coefficients.
/// The gradient is packed as a complex matrix whose real part is
/// d(loss)/d(Re pred) and imaginary part d(loss)/d(Im pred). The subgradient
/// at a zero-modulus difference is zero.
pub fn faloss_grad(target: &Spectrum, pred: &Spectrum) -> Result<(f64, Array2<Complex64>)> {
    check_shapes(target, pred)?;
    let count = (target.bins() * target.channels()) as f64;
    let mut grad = Array2::zeros(pred.coeffs.raw_dim());
    let mut sum = 0.0;
    for ((idx, t), p) in target.coeffs.indexed_iter().zip(pred.coeffs.iter()) {
        let d = p - t;
        let m = d.norm();
        sum += m;
        if m > 0.0 {
            grad[idx] = Complex64::new(d.re / m, d.im / m) / count;
        }
    }
    Ok((sum / count, grad))
}

/// Frequency loss evaluated on temporal signals by transforming both sides.
pub fn faloss_temporal(target: &RealSignal, pred: &RealSignal) -> Result<f64> {
    faloss(&dft(target), &dft(pred))
}

/// Same, with the gradient pulled back through the transform to the
/// temporal prediction.
pub fn faloss_temporal_grad(target: &RealSignal, pred: &RealSignal) -> Result<(f64, Array2<f64>)> {
    let (value, spec_grad) = faloss_grad(&dft(target), &dft(pred))?;
    Ok((value, pull_back_spectral_grad(&spec_grad)))
}

/// Adjoint of the forward transform applied to a spectral-domain gradient:
/// dL/dx_n = Re( sum_k g_k e^{+2pi i nk/N} ).
pub fn pull_back_spectral_grad(spec_grad: &Array2<Complex64>) -> Array2<f64> {
    let raised = crate::spectral::idft_complex(&Spectrum::new(spec_grad.clone()));
    let n = spec_grad.nrows() as f64;
    raised.mapv(|z| z.re * n)
}

/// Mean absolute error over all entries.
pub fn mae(target: &RealSignal, pred: &RealSignal) -> Result<f64> {
    check_signal_shapes(target, pred)?;
    let count = (target.len() * target.channels()) as f64;
    let sum: f64 = target
        .values()
        .iter()
        .zip(pred.values().iter())
        .map(|(t, p)| (t - p).abs())
        .sum();
    Ok(sum / count)
}

/// Mean squared error over all entries.
pub fn mse(target: &RealSignal, pred: &RealSignal) -> Result<f64> {
    check_signal_shapes(target, pred)?;
    let count = (target.len() * target.channels()) as f64;
    let sum: f64 = target
        .values()
        .iter()
        .zip(pred.values().iter())
        .map(|(t, p)| (t - p) * (t - p))
        .sum();
    Ok(sum / count)
}

fn check_signal_shapes(target: &RealSignal, pred: &RealSignal) -> Result<()> {
    if target.len() != pred.len() || target.channels() != pred.channels() {
        return Err(Error::InvalidInput(format!(
            "signal shapes differ: {}x{} vs {}x{}",
            target.len(),
            target.channels(),
            pred.len(),
            pred.channels()
        )));
    }
    Ok(())
}

/// Temporal MAE together with the spectral upper bound `sum_k |delta_hat_k|`
/// summed over channels. The bound always dominates the MAE.
pub fn check_mae_bound(target: &RealSignal, pred: &RealSignal) -> Result<(f64, f64)> {
    let value = mae(target, pred)?;
    let ts = dft(target);
    let ps = dft(pred);
    let bound: f64 = ts
        .coeffs
        .iter()
        .zip(ps.coeffs.iter())
        .map(|(t, p)| (t - p).norm())
        .sum();
    Ok((value, bound))
}
