//! Patch low-frequency learner: dual real/imaginary MLPs mapping the
//! concatenated per-patch spectra of the history to the low-pass-filtered
//! target's spectrum, trained on the frequency alignment loss.
//!
//! Inputs are z-scored per channel with statistics fit on the training
//! split; targets are supervised in normalized space and tokens are
//! de-normalized on the way out.

use ndarray::{Array2, Axis};
use num_complex::Complex64;
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{Normalizer, SeriesWindow};
use crate::error::{Error, Result};
use crate::nn::{Activation, Adam, AdamConfig, Mlp};
use crate::spectral::{self, dft, low_pass, num_patches, patch_spectra, RealSignal, Spectrum};
use crate::util::{atomic_write, sha256_hex};

pub const PLFM_FORMAT: &str = "plfm-v1";

/// A learned spectrum is allowed this much imaginary residue (relative to
/// the real amplitude) before the token reconstruction is rejected as
/// wildly asymmetric.
const TOKEN_IMAG_TOL: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlfmConfig {
    pub patch_len: usize,
    pub stride: usize,
    pub hidden_dim: usize,
    pub keep_fraction: f64,
    pub history_len: usize,
    pub horizon: usize,
    pub channels: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
}

fn default_activation() -> Activation {
    Activation::Tanh
}

impl PlfmConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.stride >= 1 && self.stride < self.patch_len && self.patch_len <= self.history_len) {
            return Err(Error::InvalidInput(format!(
                "need 1 <= stride < patch_len <= history_len, got S={}, P={}, H={}",
                self.stride, self.patch_len, self.history_len
            )));
        }
        if self.hidden_dim == 0 || self.horizon == 0 || self.channels == 0 {
            return Err(Error::InvalidInput("hidden_dim, horizon, channels must be >= 1".into()));
        }
        if !(self.keep_fraction > 0.0 && self.keep_fraction <= 1.0) {
            return Err(Error::InvalidInput("keep_fraction must be in (0, 1]".into()));
        }
        Ok(())
    }

    /// Input width of each branch: all patch bins concatenated.
    pub fn input_dim(&self) -> usize {
        self.patch_len * num_patches(self.history_len, self.patch_len, self.stride)
    }
}

/// Trained parameters: identically shaped real and imaginary branches plus
/// the normalization statistics they were fit with.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PlfmWeights {
    pub config: PlfmConfig,
    pub normalizer: Normalizer,
    pub real: Mlp,
    pub imag: Mlp,
}

/// Optimization hyperparameters shared by the training phases.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainHyper {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            batch_size: 32,
            epochs: 300,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl TrainHyper {
    pub fn validate(&self) -> Result<()> {
        if self.lr <= 0.0 || self.batch_size == 0 || self.epochs == 0 {
            return Err(Error::InvalidInput("lr > 0, batch >= 1, epochs >= 1 required".into()));
        }
        Ok(())
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig { lr: self.lr, beta1: self.beta1, beta2: self.beta2, eps: self.eps }
    }
}

impl PlfmWeights {
    pub fn init(config: PlfmConfig, normalizer: Normalizer, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let input = config.input_dim();
        let real = Mlp::init(input, config.hidden_dim, config.horizon, config.activation, &mut rng);
        let imag = Mlp::init(input, config.hidden_dim, config.horizon, config.activation, &mut rng);
        Ok(Self { config, normalizer, real, imag })
    }

    /// Hex digest of the serialized weights; used for freeze checks and
    /// checkpoint chaining.
    pub fn checksum(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("weights serialize"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "format": PLFM_FORMAT,
            "checksum": self.checksum(),
            "weights": self,
        });
        atomic_write(path, &serde_json::to_vec_pretty(&doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
        if doc.get("format").and_then(|v| v.as_str()) != Some(PLFM_FORMAT) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected format '{PLFM_FORMAT}' in {}",
                path.display()
            )));
        }
        let weights: PlfmWeights = serde_json::from_value(
            doc.get("weights")
                .cloned()
                .ok_or_else(|| Error::IncompatibleCheckpoint("missing 'weights' section".into()))?,
        )?;
        let stored = doc.get("checksum").and_then(|v| v.as_str()).unwrap_or_default();
        if stored != weights.checksum() {
            return Err(Error::IncompatibleCheckpoint("checksum mismatch".into()));
        }
        Ok(weights)
    }
}

/// Per-window features: real and imaginary parts of the patch spectra of
/// the normalized history, one column per channel.
struct Features {
    re: Array2<f64>,
    im: Array2<f64>,
}

fn features(weights_cfg: &PlfmConfig, normalizer: &Normalizer, history: &RealSignal) -> Result<Features> {
    if history.len() != weights_cfg.history_len || history.channels() != weights_cfg.channels {
        return Err(Error::InvalidInput(format!(
            "history shape {}x{} does not match config H={} C={}",
            history.len(),
            history.channels(),
            weights_cfg.history_len,
            weights_cfg.channels
        )));
    }
    let normed = RealSignal::new(normalizer.normalize(&history.values().to_owned()))?;
    let ps = patch_spectra(&normed, weights_cfg.patch_len, weights_cfg.stride)?;
    // keep the branch inputs O(1): unnormalized patch coefficients grow
    // with the patch length and would saturate the hidden layer
    let scale = 1.0 / weights_cfg.patch_len as f64;
    Ok(Features {
        re: ps.coeffs.mapv(|z| z.re * scale),
        im: ps.coeffs.mapv(|z| z.im * scale),
    })
}

fn forward_features(weights: &PlfmWeights, feats: &Features) -> Spectrum {
    let cfg = &weights.config;
    // mirror of the input scaling: target coefficients grow with the
    // horizon, so the branches predict spectrum / L
    let scale = cfg.horizon as f64;
    let mut coeffs = Array2::zeros((cfg.horizon, cfg.channels));
    for ch in 0..cfg.channels {
        let re_out = weights.real.forward(feats.re.column(ch));
        let im_out = weights.imag.forward(feats.im.column(ch));
        for k in 0..cfg.horizon {
            coeffs[[k, ch]] = Complex64::new(re_out[k] * scale, im_out[k] * scale);
        }
    }
    Spectrum::new(coeffs)
}

/// Predicted spectrum of the (normalized) low-frequency target:
/// patch spectra of the history through the dual branches.
pub fn plfm_forward(weights: &PlfmWeights, history: &RealSignal) -> Result<Spectrum> {
    let feats = features(&weights.config, &weights.normalizer, history)?;
    Ok(forward_features(weights, &feats))
}

/// Phase-1 supervision: spectrum of the low-pass-filtered target.
pub fn plfm_target(target: &RealSignal, keep_fraction: f64) -> Result<Spectrum> {
    Ok(dft(&low_pass(target, keep_fraction)?))
}

/// Temporal low-frequency token: inverse transform of the predicted
/// spectrum, de-normalized to the data's original scale. The imaginary
/// residue of the reconstruction is discarded unless it dominates the
/// real amplitude.
pub fn plfm_low_token(weights: &PlfmWeights, history: &RealSignal) -> Result<RealSignal> {
    let spec = plfm_forward(weights, history)?;
    let complex = spectral::idft_complex(&spec);
    let max_real = complex.iter().map(|z| z.re.abs()).fold(0.0, f64::max);
    let max_imag = complex.iter().map(|z| z.im.abs()).fold(0.0, f64::max);
    if max_imag >= TOKEN_IMAG_TOL * (1.0 + max_real) {
        return Err(Error::NonRealReconstruction { max_imag });
    }
    let normed = complex.mapv(|z| z.re);
    RealSignal::new(weights.normalizer.denormalize(&normed))
}

fn check_dataset(config: &PlfmConfig, dataset: &[SeriesWindow]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    for w in dataset {
        if w.x.nrows() != config.history_len
            || w.x.ncols() != config.channels
            || w.y.nrows() != config.horizon
            || w.y.ncols() != config.channels
        {
            return Err(Error::InvalidInput(
                "all windows must share the configured H, L, C".into(),
            ));
        }
    }
    Ok(())
}

struct Sample {
    feats: Features,
    target: Spectrum,
}

fn prepare_samples(
    config: &PlfmConfig,
    normalizer: &Normalizer,
    windows: &[SeriesWindow],
) -> Result<Vec<Sample>> {
    windows
        .iter()
        .map(|w| {
            let feats = features(config, normalizer, &w.history_signal()?)?;
            let y_norm = RealSignal::new(normalizer.normalize(&w.y))?;
            let target = plfm_target(&y_norm, config.keep_fraction)?;
            Ok(Sample { feats, target })
        })
        .collect()
}

fn mean_loss(weights: &PlfmWeights, samples: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for s in samples {
        let pred = forward_features(weights, &s.feats);
        total += crate::loss::faloss(&s.target, &pred)?;
    }
    Ok(total / samples.len() as f64)
}

/// Train the dual-branch learner with mini-batch Adam against the filtered
/// targets' spectra; returns the weights of the epoch with the lowest
/// validation loss. Deterministic for a fixed seed.
pub fn plfm_train(
    config: PlfmConfig,
    train: &[SeriesWindow],
    val: &[SeriesWindow],
    hyper: &TrainHyper,
) -> Result<PlfmWeights> {
    config.validate()?;
    hyper.validate()?;
    check_dataset(&config, train)?;
    let normalizer = Normalizer::fit(train)?;
    let mut weights = PlfmWeights::init(config, normalizer.clone(), hyper.seed)?;

    let train_samples = prepare_samples(&config, &normalizer, train)?;
    let val_samples = if val.is_empty() {
        prepare_samples(&config, &normalizer, train)?
    } else {
        check_dataset(&config, val)?;
        prepare_samples(&config, &normalizer, val)?
    };

    // matrices with one row per (window, channel) pair for batched passes
    let c = config.channels;
    let l = config.horizon;
    let to_mats = |samples: &[Sample]| {
        let n_rows = samples.len() * c;
        let mut re = Array2::zeros((n_rows, config.input_dim()));
        let mut im = Array2::zeros((n_rows, config.input_dim()));
        let mut t = Array2::<Complex64>::zeros((n_rows, l));
        for (i, s) in samples.iter().enumerate() {
            for ch in 0..c {
                let r = i * c + ch;
                re.row_mut(r).assign(&s.feats.re.column(ch));
                im.row_mut(r).assign(&s.feats.im.column(ch));
                t.row_mut(r).assign(&s.target.coeffs.column(ch));
            }
        }
        (re, im, t)
    };
    let (x_re, x_im, t_mat) = to_mats(&train_samples);
    let (v_re, v_im, v_t) = to_mats(&val_samples);
    let batched_loss = |w: &PlfmWeights, xr: &Array2<f64>, xi: &Array2<f64>, tm: &Array2<Complex64>| {
        let (ro, _) = w.real.forward_batch(xr.view());
        let (io, _) = w.imag.forward_batch(xi.view());
        let out_scale = l as f64;
        let mut total = 0.0;
        for r in 0..tm.nrows() {
            for k in 0..l {
                total += (Complex64::new(ro[[r, k]] * out_scale, io[[r, k]] * out_scale)
                    - tm[[r, k]])
                .norm();
            }
        }
        total / (l * c) as f64 / (tm.nrows() / c) as f64
    };

    let sizes: Vec<usize> = [
        weights.real.w1.len(), weights.real.b1.len(), weights.real.w2.len(), weights.real.b2.len(),
        weights.imag.w1.len(), weights.imag.b1.len(), weights.imag.w2.len(), weights.imag.b2.len(),
    ]
    .to_vec();
    let mut opt = Adam::new(hyper.adam(), &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(1));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    let mut best = weights.clone();
    let mut best_val = batched_loss(&weights, &v_re, &v_im, &v_t);

    for epoch in 0..hyper.epochs {
        opt.set_lr(crate::nn::cosine_lr(hyper.lr, epoch, hyper.epochs));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(hyper.batch_size) {
            let rows: Vec<usize> =
                batch.iter().flat_map(|&i| (0..c).map(move |ch| i * c + ch)).collect();
            let xb_re = x_re.select(Axis(0), &rows);
            let xb_im = x_im.select(Axis(0), &rows);
            let (re_out, re_hidden) = weights.real.forward_batch(xb_re.view());
            let (im_out, im_hidden) = weights.imag.forward_batch(xb_im.view());
            // per-sample loss is |pred*L - target| / (L*C); the branches emit
            // the raw (pre-scale) outputs, hence the extra factor L on the
            // way back
            let out_scale = l as f64;
            let norm = 1.0 / (l * c) as f64;
            let mut batch_loss = 0.0;
            let mut re_g = Array2::zeros(re_out.raw_dim());
            let mut im_g = Array2::zeros(im_out.raw_dim());
            for (r, &row) in rows.iter().enumerate() {
                for k in 0..l {
                    let d = Complex64::new(re_out[[r, k]] * out_scale, im_out[[r, k]] * out_scale)
                        - t_mat[[row, k]];
                    let m = d.norm();
                    batch_loss += m * norm;
                    if m > 0.0 {
                        re_g[[r, k]] = d.re / m * norm * out_scale;
                        im_g[[r, k]] = d.im / m * norm * out_scale;
                    }
                }
            }
            let mut re_grads = weights.real.zero_grads();
            let mut im_grads = weights.imag.zero_grads();
            weights.real.backward_batch(xb_re.view(), &re_hidden, re_g.view(), &mut re_grads);
            weights.imag.backward_batch(xb_im.view(), &im_hidden, im_g.view(), &mut im_grads);
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            let inv = 1.0 / batch.len() as f64;
            re_grads.scale(inv);
            im_grads.scale(inv);
            let grads: Vec<&[f64]> = re_grads
                .grad_slices()
                .into_iter()
                .chain(im_grads.grad_slices())
                .collect();
            let mut params = weights.real.param_slices_mut();
            params.extend(weights.imag.param_slices_mut());
            opt.step(&mut params, &grads);
        }
        if !(weights.real.is_finite() && weights.imag.is_finite()) {
            return Err(Error::DivergedTraining { epoch });
        }
        let val_loss = batched_loss(&weights, &v_re, &v_im, &v_t);
        if val_loss < best_val {
            best_val = val_loss;
            best = weights.clone();
        }
    }
    Ok(best)
}

/// Mean training-set loss for externally prepared windows; exposed for
/// diagnostics and tests.
pub fn plfm_dataset_loss(weights: &PlfmWeights, windows: &[SeriesWindow]) -> Result<f64> {
    check_dataset(&weights.config, windows)?;
    let samples = prepare_samples(&weights.config, &weights.normalizer, windows)?;
    mean_loss(weights, &samples)
}
