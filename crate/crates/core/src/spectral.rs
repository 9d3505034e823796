//! DFT, low/high-pass filtering, and overlapping patching.
//!
//! Conventions: the forward transform is unnormalized
//! (`x_hat_k = sum_n x_n e^{-2pi i nk/N}`), the inverse carries the `1/N`
//! factor, so `idft(dft(x)) = x`.

use ndarray::{Array2, ArrayView2, Axis};
use num_complex::Complex64;
use rustfft::FftPlanner;

use crate::error::{Error, Result};

/// A real multichannel signal: rows are time steps, columns are channels.
#[derive(Debug, Clone, PartialEq)]
pub struct RealSignal {
    values: Array2<f64>,
}

impl RealSignal {
    pub fn new(values: Array2<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::InvalidInput("signal must be non-empty".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("signal contains non-finite values".into()));
        }
        Ok(Self { values })
    }

    /// Single-channel convenience constructor.
    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let n = values.len();
        Self::new(
            Array2::from_shape_vec((n, 1), values.to_vec())
                .map_err(|e| Error::InvalidInput(e.to_string()))?,
        )
    }

    pub fn len(&self) -> usize {
        self.values.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // non-empty by construction
    }

    pub fn channels(&self) -> usize {
        self.values.ncols()
    }

    pub fn values(&self) -> ArrayView2<'_, f64> {
        self.values.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.values
    }

    /// One channel as a plain vector.
    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.values.column(c).to_vec()
    }

    /// Sum of squared entries over all channels.
    pub fn energy(&self) -> f64 {
        self.values.iter().map(|v| v * v).sum()
    }
}

/// Complex Fourier coefficients of a signal; rows are frequency bins.
#[derive(Debug, Clone)]
pub struct Spectrum {
    pub coeffs: Array2<Complex64>,
    pub origin_len: usize,
}

impl Spectrum {
    pub fn new(coeffs: Array2<Complex64>) -> Self {
        let origin_len = coeffs.nrows();
        Self { coeffs, origin_len }
    }

    pub fn bins(&self) -> usize {
        self.coeffs.nrows()
    }

    pub fn channels(&self) -> usize {
        self.coeffs.ncols()
    }

    /// Max deviation from conjugate symmetry, `|c[k] - conj(c[N-k])|`.
    pub fn symmetry_defect(&self) -> f64 {
        let n = self.bins();
        let mut worst = 0.0f64;
        for c in 0..self.channels() {
            for k in 1..n {
                let d = (self.coeffs[[k, c]] - self.coeffs[[n - k, c]].conj()).norm();
                worst = worst.max(d);
            }
        }
        worst
    }
}

/// Per-patch spectra concatenated along the bin axis, shape `(P*N_p) x C`.
#[derive(Debug, Clone)]
pub struct PatchSpectra {
    pub coeffs: Array2<Complex64>,
    pub patch_len: usize,
    pub stride: usize,
    pub num_patches: usize,
}

fn fft_column(planner: &mut FftPlanner<f64>, buf: &mut [Complex64], inverse: bool) {
    let fft = if inverse {
        planner.plan_fft_inverse(buf.len())
    } else {
        planner.plan_fft_forward(buf.len())
    };
    fft.process(buf);
}

/// Full complex DFT of each channel, unnormalized forward transform.
pub fn dft(signal: &RealSignal) -> Spectrum {
    let n = signal.len();
    let c = signal.channels();
    let mut planner = FftPlanner::new();
    let mut coeffs = Array2::zeros((n, c));
    for ch in 0..c {
        let mut buf: Vec<Complex64> = signal
            .values()
            .column(ch)
            .iter()
            .map(|&v| Complex64::new(v, 0.0))
            .collect();
        fft_column(&mut planner, &mut buf, false);
        for (k, v) in buf.into_iter().enumerate() {
            coeffs[[k, ch]] = v;
        }
    }
    Spectrum::new(coeffs)
}

/// Inverse DFT with `1/N` normalization. The imaginary residue is discarded
/// after checking it is negligible relative to the real part.
pub fn idft(spectrum: &Spectrum) -> Result<RealSignal> {
    let n = spectrum.bins();
    let c = spectrum.channels();
    if n == 0 || c == 0 {
        return Err(Error::InvalidInput("spectrum must be non-empty".into()));
    }
    let mut planner = FftPlanner::new();
    let mut out = Array2::zeros((n, c));
    let mut max_imag = 0.0f64;
    let mut max_real = 0.0f64;
    for ch in 0..c {
        let mut buf: Vec<Complex64> = spectrum.coeffs.column(ch).to_vec();
        fft_column(&mut planner, &mut buf, true);
        for (t, v) in buf.into_iter().enumerate() {
            let r = v.re / n as f64;
            out[[t, ch]] = r;
            max_real = max_real.max(r.abs());
            max_imag = max_imag.max((v.im / n as f64).abs());
        }
    }
    if max_imag >= 1e-8 * (1.0 + max_real) {
        return Err(Error::NonRealReconstruction { max_imag });
    }
    RealSignal::new(out)
}

/// Inverse DFT without the realness check; returns the complex result scaled
/// by `1/N`. Used where the caller needs the raw adjoint.
pub fn idft_complex(spectrum: &Spectrum) -> Array2<Complex64> {
    let n = spectrum.bins();
    let c = spectrum.channels();
    let mut planner = FftPlanner::new();
    let mut out = Array2::zeros((n, c));
    for ch in 0..c {
        let mut buf: Vec<Complex64> = spectrum.coeffs.column(ch).to_vec();
        fft_column(&mut planner, &mut buf, true);
        for (t, v) in buf.into_iter().enumerate() {
            out[[t, ch]] = v / n as f64;
        }
    }
    out
}

/// Number of nonnegative-frequency bins kept by a filter with the given
/// keep fraction: `K = max(1, ceil(rho * (floor(N/2)+1)))`.
pub fn cutoff_bins(n: usize, keep_fraction: f64) -> usize {
    let half = n / 2 + 1;
    ((keep_fraction * half as f64).ceil() as usize).max(1)
}

fn check_fraction(keep_fraction: f64) -> Result<()> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::InvalidInput(format!(
            "keep_fraction must be in (0, 1], got {keep_fraction}"
        )));
    }
    Ok(())
}

fn filtered(signal: &RealSignal, keep_fraction: f64, keep_low: bool) -> Result<RealSignal> {
    check_fraction(keep_fraction)?;
    let n = signal.len();
    let k_cut = cutoff_bins(n, keep_fraction);
    let mut spec = dft(signal);
    for ch in 0..spec.channels() {
        for k in 0..n {
            // distance of bin k from DC, counting the conjugate mirror
            let freq = k.min(n - k);
            let is_low = freq < k_cut;
            if is_low != keep_low {
                spec.coeffs[[k, ch]] = Complex64::new(0.0, 0.0);
            }
        }
    }
    idft(&spec)
}

/// Zero every bin at or above the cutoff and inverse-transform.
/// `keep_fraction = 1` is the identity.
pub fn low_pass(signal: &RealSignal, keep_fraction: f64) -> Result<RealSignal> {
    filtered(signal, keep_fraction, true)
}

/// Exact complement of [`low_pass`]: `low_pass(x, r) + high_pass(x, r) = x`.
pub fn high_pass(signal: &RealSignal, keep_fraction: f64) -> Result<RealSignal> {
    filtered(signal, keep_fraction, false)
}

/// Number of full overlapping windows of length `p` at stride `s` in a
/// signal of length `n`.
pub fn num_patches(n: usize, p: usize, s: usize) -> usize {
    (n - p) / s + 1
}

fn check_patch_args(n: usize, p: usize, s: usize) -> Result<()> {
    if p > n {
        return Err(Error::InvalidInput(format!(
            "patch_len {p} exceeds signal length {n}"
        )));
    }
    if s == 0 || s >= p {
        return Err(Error::InvalidInput(format!(
            "stride must satisfy 1 <= stride < patch_len, got stride {s}, patch_len {p}"
        )));
    }
    Ok(())
}

/// Overlapping windows of length `patch_len` at the given stride. Trailing
/// rows that do not fill a complete window are dropped.
pub fn patch(signal: &RealSignal, patch_len: usize, stride: usize) -> Result<Vec<RealSignal>> {
    check_patch_args(signal.len(), patch_len, stride)?;
    let np = num_patches(signal.len(), patch_len, stride);
    let mut out = Vec::with_capacity(np);
    for i in 0..np {
        let start = i * stride;
        let view = signal
            .values()
            .slice_axis(Axis(0), (start..start + patch_len).into())
            .to_owned();
        out.push(RealSignal::new(view)?);
    }
    Ok(out)
}

/// DFT of each patch, concatenated in patch order into a `(P*N_p) x C`
/// complex matrix.
pub fn patch_spectra(signal: &RealSignal, patch_len: usize, stride: usize) -> Result<PatchSpectra> {
    let patches = patch(signal, patch_len, stride)?;
    let np = patches.len();
    let c = signal.channels();
    let mut coeffs = Array2::zeros((patch_len * np, c));
    for (i, p) in patches.iter().enumerate() {
        let spec = dft(p);
        for ch in 0..c {
            for k in 0..patch_len {
                coeffs[[i * patch_len + k, ch]] = spec.coeffs[[k, ch]];
            }
        }
    }
    Ok(PatchSpectra {
        coeffs,
        patch_len,
        stride,
        num_patches: np,
    })
}

/// Absolute gap between temporal energy and `1/N`-scaled spectral energy,
/// summed over channels. Exactly zero in exact arithmetic.
pub fn parseval_gap(signal: &RealSignal) -> f64 {
    parseval_gap_with(signal, dft)
}

/// Same as [`parseval_gap`] but with a caller-supplied transform, so the
/// check can be pointed at an alternative (or deliberately broken) DFT.
pub fn parseval_gap_with(signal: &RealSignal, transform: fn(&RealSignal) -> Spectrum) -> f64 {
    let n = signal.len() as f64;
    let spec = transform(signal);
    let mut gap = 0.0;
    for ch in 0..signal.channels() {
        let temporal: f64 = signal.values().column(ch).iter().map(|v| v * v).sum();
        let spectral: f64 = spec.coeffs.column(ch).iter().map(|z| z.norm_sqr()).sum::<f64>() / n;
        gap += (temporal - spectral).abs();
    }
    gap
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng as _};
    use rand_chacha::ChaCha8Rng;

    fn sig(values: &[f64]) -> RealSignal {
        RealSignal::from_slice(values).unwrap()
    }

    /// Direct O(N^2) evaluation of the transform definition; the independent
    /// oracle for the FFT-backed implementation.
    fn naive_dft(x: &[f64]) -> Vec<Complex64> {
        let n = x.len();
        (0..n)
            .map(|k| {
                (0..n)
                    .map(|t| {
                        let ang = -2.0 * std::f64::consts::PI * (t as f64) * (k as f64) / n as f64;
                        Complex64::new(x[t] * ang.cos(), x[t] * ang.sin())
                    })
                    .sum()
            })
            .collect()
    }

    fn random_signal(rng: &mut impl Rng, n: usize, c: usize) -> RealSignal {
        let data: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-5.0..5.0)).collect();
        RealSignal::new(Array2::from_shape_vec((n, c), data).unwrap()).unwrap()
    }

    fn sinusoid(n: usize, bin: usize, amp: f64) -> RealSignal {
        let vals: Vec<f64> = (0..n)
            .map(|t| amp * (2.0 * std::f64::consts::PI * bin as f64 * t as f64 / n as f64).cos())
            .collect();
        sig(&vals)
    }

    #[test]
    fn dft_constant_concentrates_at_dc() {
        let s = dft(&sig(&[1.0, 1.0, 1.0, 1.0]));
        assert!((s.coeffs[[0, 0]] - Complex64::new(4.0, 0.0)).norm() < 1e-12);
        for k in 1..4 {
            assert!(s.coeffs[[k, 0]].norm() < 1e-12);
        }
    }

    #[test]
    fn dft_zero_signal_is_zero() {
        let s = dft(&sig(&[0.0; 7]));
        assert!(s.coeffs.iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn dft_matches_hand_oracle_n4() {
        // naive evaluation of [1,2,3,4]: [10, -2+2i, -2, -2-2i]
        let expect = [
            Complex64::new(10.0, 0.0),
            Complex64::new(-2.0, 2.0),
            Complex64::new(-2.0, 0.0),
            Complex64::new(-2.0, -2.0),
        ];
        let s = dft(&sig(&[1.0, 2.0, 3.0, 4.0]));
        for (k, e) in expect.iter().enumerate() {
            assert!((s.coeffs[[k, 0]] - e).norm() < 1e-10, "bin {k}");
        }
        // and the FFT agrees with the direct-sum oracle on an awkward length
        let x: Vec<f64> = (0..13).map(|t| (t as f64).sin()).collect();
        let fast = dft(&sig(&x));
        for (k, e) in naive_dft(&x).iter().enumerate() {
            assert!((fast.coeffs[[k, 0]] - e).norm() < 1e-9);
        }
    }

    #[test]
    fn idft_hand_oracle_n4() {
        let coeffs = Array2::from_shape_vec(
            (4, 1),
            vec![
                Complex64::new(10.0, 0.0),
                Complex64::new(-2.0, 2.0),
                Complex64::new(-2.0, 0.0),
                Complex64::new(-2.0, -2.0),
            ],
        )
        .unwrap();
        let x = idft(&Spectrum::new(coeffs)).unwrap();
        for (t, e) in [1.0, 2.0, 3.0, 4.0].iter().enumerate() {
            assert!((x.values()[[t, 0]] - e).abs() < 1e-10);
        }
    }

    #[test]
    fn idft_rejects_asymmetric_spectrum() {
        let coeffs = Array2::from_shape_vec(
            (4, 1),
            vec![
                Complex64::new(0.0, 0.0),
                Complex64::new(1.0, 1.0),
                Complex64::new(0.0, 0.0),
                Complex64::new(0.0, 0.0),
            ],
        )
        .unwrap();
        match idft(&Spectrum::new(coeffs)) {
            Err(Error::NonRealReconstruction { .. }) => {}
            other => panic!("expected NonRealReconstruction, got {other:?}"),
        }
    }

    #[test]
    fn low_pass_passes_in_band_sinusoid() {
        // bin 1 < K = ceil(0.4 * 33) = 14 for N=64
        let x = sinusoid(64, 1, 1.0);
        let y = low_pass(&x, 0.4).unwrap();
        let diff = (&y.values() - &x.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn low_pass_removes_out_of_band_component() {
        let n = 64;
        let lo = sinusoid(n, 1, 1.0);
        let hi = sinusoid(n, 30, 1.0);
        let mixed = RealSignal::new(&lo.values() + &hi.values()).unwrap();
        let y = low_pass(&mixed, 0.4).unwrap();
        let diff = (&y.values() - &lo.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn high_pass_passes_out_of_band_sinusoid() {
        let x = sinusoid(64, 30, 1.0);
        let y = high_pass(&x, 0.4).unwrap();
        let diff = (&y.values() - &x.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-9);
    }

    #[test]
    fn filters_reject_bad_fraction() {
        let x = sig(&[1.0, 2.0]);
        assert!(matches!(low_pass(&x, 0.0), Err(Error::InvalidInput(_))));
        assert!(matches!(low_pass(&x, 1.5), Err(Error::InvalidInput(_))));
        assert!(matches!(high_pass(&x, -0.1), Err(Error::InvalidInput(_))));
    }

    #[test]
    fn patch_counts_and_offsets() {
        let x = sig(&(0..30).map(|v| v as f64).collect::<Vec<_>>());
        let patches = patch(&x, 12, 6).unwrap();
        assert_eq!(patches.len(), 4);
        for (i, p) in patches.iter().enumerate() {
            assert_eq!(p.values()[[0, 0]], (i * 6) as f64);
            assert_eq!(p.len(), 12);
        }

        let x = sig(&(0..8).map(|v| v as f64).collect::<Vec<_>>());
        let patches = patch(&x, 4, 2).unwrap();
        assert_eq!(patches.len(), 3);
        assert_eq!(patches[1].channel(0), vec![2.0, 3.0, 4.0, 5.0]);
        assert_eq!(patches[2].channel(0), vec![4.0, 5.0, 6.0, 7.0]);
    }

    #[test]
    fn patch_whole_signal_when_equal_len() {
        let x = sig(&[1.0, 2.0, 3.0, 4.0]);
        let patches = patch(&x, 4, 2).unwrap();
        assert_eq!(patches.len(), 1);
        assert_eq!(patches[0], x);
    }

    #[test]
    fn patch_rejects_bad_args() {
        let x = sig(&[1.0, 2.0, 3.0]);
        assert!(patch(&x, 4, 1).is_err());
        assert!(patch(&x, 2, 2).is_err());
        assert!(patch(&x, 2, 0).is_err());
    }

    #[test]
    fn patch_spectra_single_patch_equals_dft() {
        let x = sig(&[1.0, 2.0, 3.0, 4.0]);
        let ps = patch_spectra(&x, 4, 2).unwrap();
        let full = dft(&x);
        for k in 0..4 {
            assert!((ps.coeffs[[k, 0]] - full.coeffs[[k, 0]]).norm() < 1e-12);
        }
    }

    #[test]
    fn patch_spectra_matches_manual_composition() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_signal(&mut rng, 8, 2);
        let ps = patch_spectra(&x, 4, 2).unwrap();
        assert_eq!(ps.num_patches, 3);
        let patches = patch(&x, 4, 2).unwrap();
        for (i, p) in patches.iter().enumerate() {
            let spec = dft(p);
            for ch in 0..2 {
                for k in 0..4 {
                    assert!((ps.coeffs[[i * 4 + k, ch]] - spec.coeffs[[k, ch]]).norm() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn patch_spectra_constant_signal_concentrates_per_patch() {
        let x = RealSignal::new(Array2::from_elem((10, 1), 2.5)).unwrap();
        let ps = patch_spectra(&x, 4, 2).unwrap();
        for i in 0..ps.num_patches {
            assert!((ps.coeffs[[i * 4, 0]] - Complex64::new(10.0, 0.0)).norm() < 1e-10);
            for k in 1..4 {
                assert!(ps.coeffs[[i * 4 + k, 0]].norm() < 1e-10);
            }
        }
    }

    #[test]
    fn parseval_hand_oracle() {
        // dft([3,4]) = [7, -1]; spectral energy (49 + 1)/2 = 25 = temporal
        assert!(parseval_gap(&sig(&[3.0, 4.0])) < 1e-12);
        assert_eq!(parseval_gap(&sig(&[0.0, 0.0, 0.0])), 0.0);
    }

    proptest! {
        #[test]
        fn round_trip_identity(vals in proptest::collection::vec(-1e3f64..1e3, 1..128)) {
            let x = sig(&vals);
            let back = idft(&dft(&x)).unwrap();
            let scale = 1.0 + vals.iter().fold(0.0f64, |a, v| a.max(v.abs()));
            for (a, b) in back.channel(0).iter().zip(&vals) {
                prop_assert!((a - b).abs() < 1e-10 * scale);
            }
        }

        #[test]
        fn conjugate_symmetry(vals in proptest::collection::vec(-1e3f64..1e3, 2..128)) {
            let s = dft(&sig(&vals));
            prop_assert!(s.symmetry_defect() < 1e-9 * (1.0 + vals.iter().fold(0.0f64, |a, v| a.max(v.abs()))));
        }

        #[test]
        fn filter_idempotence(vals in proptest::collection::vec(-10.0f64..10.0, 4..64),
                              rho_idx in 0usize..4) {
            let rho = [0.1, 0.4, 0.7, 1.0][rho_idx];
            let x = sig(&vals);
            let once = low_pass(&x, rho).unwrap();
            let twice = low_pass(&once, rho).unwrap();
            let diff = (&twice.values() - &once.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
            prop_assert!(diff < 1e-9);
        }
    }

    #[test]
    fn filter_complement_random_signals() {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        for _ in 0..100 {
            let n = rng.gen_range(4..100);
            let c = rng.gen_range(1..4);
            let x = random_signal(&mut rng, n, c);
            for rho in [0.1, 0.4, 0.7, 1.0] {
                let lo = low_pass(&x, rho).unwrap();
                let hi = high_pass(&x, rho).unwrap();
                let sum = &lo.values() + &hi.values();
                let diff = (&sum - &x.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
                assert!(diff < 1e-9, "complement violated: n={n} rho={rho} diff={diff}");
            }
        }
    }

    #[test]
    fn high_pass_of_identity_fraction_is_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_signal(&mut rng, 33, 2);
        let hi = high_pass(&x, 1.0).unwrap();
        assert!(hi.values().iter().all(|v| v.abs() < 1e-10));
        let lo = low_pass(&x, 1.0).unwrap();
        let diff = (&lo.values() - &x.values()).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-10);
    }

    #[test]
    fn patch_tiling_when_stride_divides() {
        // S | (N - P): windows tile [0, N) with overlap exactly P - S
        let n = 24;
        let (p, s) = (8, 4);
        let x = sig(&(0..n).map(|v| v as f64).collect::<Vec<_>>());
        let patches = patch(&x, p, s).unwrap();
        let last_start = (patches.len() - 1) * s;
        assert_eq!(last_start + p, n);
        for w in patches.windows(2) {
            let a_end = w[0].channel(0)[p - 1];
            let b_start = w[1].channel(0)[0];
            assert_eq!(a_end - b_start + 1.0, (p - s) as f64);
        }
    }
}
