//! Phase-2 residual learner: a pluggable backbone consuming the
//! high-pass-filtered history, trained so that low token + residual aligns
//! with the unfiltered target under the frequency alignment loss. The
//! low-frequency learner stays frozen throughout.

use ndarray::{Array1, Array2, Axis};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::data::{Normalizer, SeriesWindow};
use crate::error::{Error, Result};
use crate::loss::{faloss_grad, pull_back_spectral_grad};
use crate::nn::{Activation, Adam, Mlp};
use crate::plfm::{plfm_low_token, PlfmWeights, TrainHyper};
use crate::spectral::{dft, high_pass, RealSignal, Spectrum};
use crate::util::{atomic_write, sha256_hex};

pub const RESID_FORMAT: &str = "resid-v1";

/// A residual predictor: maps the high-pass-filtered history to an
/// `L x C` residual token. Implementations expose flat parameter access so
/// the training loop can drive any backbone.
pub trait ResidualBackbone {
    fn kind(&self) -> &'static str;
    fn forward(&self, history_hp: &RealSignal) -> Result<Array2<f64>>;
    /// Parameter gradients (in [`Self::params`] order) for one sample given
    /// the upstream gradient on the output.
    fn backward(&self, history_hp: &RealSignal, out_grad: &Array2<f64>) -> Result<Vec<f64>>;
    fn params(&self) -> Vec<f64>;
    fn set_params(&mut self, params: &[f64]);
}

/// Default backbone: one two-layer MLP over the flattened `H x C` input
/// producing the flattened `L x C` residual (channel mixing allowed).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MlpBackbone {
    pub history_len: usize,
    pub horizon: usize,
    pub channels: usize,
    pub net: Mlp,
}

impl MlpBackbone {
    pub fn init(history_len: usize, horizon: usize, channels: usize, hidden_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = Mlp::init(
            history_len * channels,
            hidden_dim,
            horizon * channels,
            Activation::Tanh,
            &mut rng,
        );
        Self { history_len, horizon, channels, net }
    }

    /// Random hidden layer, zeroed output layer: the residual starts as the
    /// exact zero function, so phase 2 begins from the phase-1 forecast.
    pub fn init_zero_output(
        history_len: usize,
        horizon: usize,
        channels: usize,
        hidden_dim: usize,
        seed: u64,
    ) -> Self {
        let mut bb = Self::init(history_len, horizon, channels, hidden_dim, seed);
        bb.net.w2.fill(0.0);
        bb.net.b2.fill(0.0);
        bb
    }

    fn flatten_input(&self, history_hp: &RealSignal) -> Result<Array1<f64>> {
        if history_hp.len() != self.history_len || history_hp.channels() != self.channels {
            return Err(Error::InvalidInput(format!(
                "backbone expects {}x{}, got {}x{}",
                self.history_len,
                self.channels,
                history_hp.len(),
                history_hp.channels()
            )));
        }
        Ok(Array1::from_iter(history_hp.values().iter().copied()))
    }
}

impl ResidualBackbone for MlpBackbone {
    fn kind(&self) -> &'static str {
        "mlp"
    }

    fn forward(&self, history_hp: &RealSignal) -> Result<Array2<f64>> {
        let x = self.flatten_input(history_hp)?;
        let y = self.net.forward(x.view());
        Ok(Array2::from_shape_vec((self.horizon, self.channels), y.to_vec())
            .expect("output length matches L*C"))
    }

    fn backward(&self, history_hp: &RealSignal, out_grad: &Array2<f64>) -> Result<Vec<f64>> {
        let x = self.flatten_input(history_hp)?;
        let (_, hidden) = self.net.forward_cached(x.view());
        let flat_grad = Array1::from_iter(out_grad.iter().copied());
        let mut grads = self.net.zero_grads();
        self.net.backward(x.view(), &hidden, flat_grad.view(), &mut grads);
        Ok(grads.grad_slices().concat())
    }

    fn params(&self) -> Vec<f64> {
        [
            self.net.w1.as_slice().unwrap(),
            self.net.b1.as_slice().unwrap(),
            self.net.w2.as_slice().unwrap(),
            self.net.b2.as_slice().unwrap(),
        ]
        .concat()
    }

    fn set_params(&mut self, params: &[f64]) {
        let mut offset = 0;
        for slice in self.net.param_slices_mut() {
            slice.copy_from_slice(&params[offset..offset + slice.len()]);
            offset += slice.len();
        }
        assert_eq!(offset, params.len());
    }
}

/// Residual token in the data's original scale: the backbone runs on the
/// high-pass band of the normalized history and its output is scaled by
/// the per-channel std.
pub fn residual_forward(
    backbone: &dyn ResidualBackbone,
    normalizer: &Normalizer,
    history: &RealSignal,
    keep_fraction: f64,
) -> Result<RealSignal> {
    let normed = RealSignal::new(normalizer.normalize(&history.values().to_owned()))?;
    let hp = high_pass(&normed, keep_fraction)?;
    let out = backbone.forward(&hp)?;
    RealSignal::new(normalizer.denormalize_scale(&out))
}

/// Combined forecast: low token plus residual token, elementwise.
pub fn combined_forecast(
    plfm: &PlfmWeights,
    backbone: &dyn ResidualBackbone,
    history: &RealSignal,
) -> Result<(RealSignal, RealSignal, RealSignal)> {
    let low = plfm_low_token(plfm, history)?;
    let res = residual_forward(backbone, &plfm.normalizer, history, plfm.config.keep_fraction)?;
    let combined = RealSignal::new(&low.values() + &res.values())?;
    Ok((low, res, combined))
}

/// Train the backbone with Adam on the full-spectrum loss of
/// (low token + residual) against the unfiltered target, returning the
/// final-epoch weights unless the untrained backbone scores better on the
/// train set. The frozen low-frequency learner is verified unchanged by
/// checksum.
pub fn residual_train(
    mut backbone: MlpBackbone,
    frozen_plfm: &PlfmWeights,
    train: &[SeriesWindow],
    hyper: &TrainHyper,
) -> Result<MlpBackbone> {
    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let plfm_checksum = frozen_plfm.checksum();
    let rho = frozen_plfm.config.keep_fraction;
    let normalizer = &frozen_plfm.normalizer;

    // precompute per-window inputs and targets; inputs as one matrix with
    // a row per window for batched passes
    struct Sample {
        low: Array2<f64>,
        target_spec: Spectrum,
    }
    let (l, c) = (backbone.horizon, backbone.channels);
    let mut x_mat = Array2::zeros((train.len(), backbone.history_len * c));
    let mut train_samples = Vec::with_capacity(train.len());
    for (i, w) in train.iter().enumerate() {
        let hist = w.history_signal()?;
        let normed = RealSignal::new(normalizer.normalize(&w.x))?;
        let hp = high_pass(&normed, rho)?;
        for (slot, v) in hp.values().iter().enumerate() {
            x_mat[[i, slot]] = *v;
        }
        train_samples.push(Sample {
            low: plfm_low_token(frozen_plfm, &hist)?.into_inner(),
            target_spec: dft(&w.target_signal()?),
        });
    }

    let train_loss = |backbone: &MlpBackbone| -> Result<f64> {
        let (out, _) = backbone.net.forward_batch(x_mat.view());
        let mut total = 0.0;
        for (i, s) in train_samples.iter().enumerate() {
            let mut combined = s.low.clone();
            for t in 0..l {
                for ch in 0..c {
                    combined[[t, ch]] += out[[i, t * c + ch]] * normalizer.std[ch];
                }
            }
            total += crate::loss::faloss(&s.target_spec, &dft(&RealSignal::new(combined)?))?;
        }
        Ok(total / train_samples.len() as f64)
    };

    let init = backbone.clone();
    let init_loss = train_loss(&init)?;

    let sizes = [
        backbone.net.w1.len(),
        backbone.net.b1.len(),
        backbone.net.w2.len(),
        backbone.net.b2.len(),
    ];
    let mut opt = Adam::new(hyper.adam(), &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(2));
    let mut order: Vec<usize> = (0..train_samples.len()).collect();

    use rand::seq::SliceRandom;
    for epoch in 0..hyper.epochs {
        opt.set_lr(crate::nn::cosine_lr(hyper.lr, epoch, hyper.epochs));
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(hyper.batch_size) {
            let xb = x_mat.select(Axis(0), batch);
            let (out, hidden) = backbone.net.forward_batch(xb.view());
            let mut out_grad = Array2::zeros(out.raw_dim());
            let mut batch_loss = 0.0;
            for (r, &i) in batch.iter().enumerate() {
                let s = &train_samples[i];
                let mut combined = s.low.clone();
                for t in 0..l {
                    for ch in 0..c {
                        combined[[t, ch]] += out[[r, t * c + ch]] * normalizer.std[ch];
                    }
                }
                let (loss, spec_grad) =
                    faloss_grad(&s.target_spec, &dft(&RealSignal::new(combined)?))?;
                batch_loss += loss;
                // pull the spectral gradient back to the combined temporal
                // prediction, then through the std scaling to the backbone output
                let temporal = pull_back_spectral_grad(&spec_grad);
                for t in 0..l {
                    for ch in 0..c {
                        out_grad[[r, t * c + ch]] = temporal[[t, ch]] * normalizer.std[ch];
                    }
                }
            }
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            let mut grads = backbone.net.zero_grads();
            backbone.net.backward_batch(xb.view(), &hidden, out_grad.view(), &mut grads);
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut backbone.net.param_slices_mut(), &grads.grad_slices());
        }
        if backbone.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedTraining { epoch });
        }
    }
    // guarantee the trained residual never degrades the train objective
    if train_loss(&backbone)? > init_loss {
        backbone = init;
    }

    if frozen_plfm.checksum() != plfm_checksum {
        return Err(Error::IncompatibleCheckpoint(
            "frozen low-frequency weights changed during phase 2".into(),
        ));
    }
    Ok(backbone)
}

/// Checkpoint for a trained backbone, chained to the phase-1 checkpoint it
/// was trained against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ResidualCheckpoint {
    pub kind: String,
    pub keep_fraction: f64,
    pub plfm_checksum: String,
    pub backbone: MlpBackbone,
}

impl ResidualCheckpoint {
    pub fn new(backbone: MlpBackbone, plfm: &PlfmWeights) -> Self {
        Self {
            kind: backbone.kind().to_string(),
            keep_fraction: plfm.config.keep_fraction,
            plfm_checksum: plfm.checksum(),
            backbone,
        }
    }

    pub fn checksum(&self) -> String {
        sha256_hex(&serde_json::to_vec(self).expect("checkpoint serialize"))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let doc = serde_json::json!({
            "format": RESID_FORMAT,
            "checksum": self.checksum(),
            "checkpoint": self,
        });
        atomic_write(path, &serde_json::to_vec_pretty(&doc)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let doc: serde_json::Value = serde_json::from_slice(&std::fs::read(path)?)?;
        if doc.get("format").and_then(|v| v.as_str()) != Some(RESID_FORMAT) {
            return Err(Error::IncompatibleCheckpoint(format!(
                "expected format '{RESID_FORMAT}' in {}",
                path.display()
            )));
        }
        let ckpt: ResidualCheckpoint = serde_json::from_value(
            doc.get("checkpoint")
                .cloned()
                .ok_or_else(|| Error::IncompatibleCheckpoint("missing 'checkpoint' section".into()))?,
        )?;
        let stored = doc.get("checksum").and_then(|v| v.as_str()).unwrap_or_default();
        if stored != ckpt.checksum() {
            return Err(Error::IncompatibleCheckpoint("checksum mismatch".into()));
        }
        Ok(ckpt)
    }

    /// The phase-1 weights this backbone was trained against.
    pub fn verify_against(&self, plfm: &PlfmWeights) -> Result<()> {
        if self.plfm_checksum != plfm.checksum() {
            return Err(Error::IncompatibleCheckpoint(
                "residual checkpoint was trained against different phase-1 weights".into(),
            ));
        }
        if (self.keep_fraction - plfm.config.keep_fraction).abs() > 1e-12 {
            return Err(Error::IncompatibleCheckpoint(
                "keep_fraction differs between checkpoints".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::plfm::{plfm_train, PlfmConfig};
    use ndarray::Array2;
    use rand::Rng;

    fn identity_normalizer(c: usize) -> Normalizer {
        Normalizer { mean: vec![0.0; c], std: vec![1.0; c] }
    }

    fn window(x: Array2<f64>, y: Array2<f64>) -> SeriesWindow {
        let h = x.nrows();
        SeriesWindow { x, y, aux: Array2::zeros((h, 0)), origin: 0 }
    }

    fn sine_windows(n_windows: usize, h: usize, l: usize, bin: usize, period: usize) -> Vec<SeriesWindow> {
        (0..n_windows)
            .map(|w| {
                let gen = |t: usize| {
                    (2.0 * std::f64::consts::PI * bin as f64 * (w + t) as f64 / period as f64).sin()
                };
                let x = Array2::from_shape_fn((h, 1), |(i, _)| gen(i));
                let y = Array2::from_shape_fn((l, 1), |(i, _)| gen(h + i));
                window(x, y)
            })
            .collect()
    }

    #[test]
    fn zeroed_backbone_gives_zero_residual() {
        let mut bb = MlpBackbone::init(8, 4, 1, 6, 0);
        bb.net.w2.fill(0.0);
        bb.net.b2.fill(0.0);
        let hist = RealSignal::from_slice(&[1.0, -1.0, 2.0, 0.5, 0.3, -0.2, 1.1, 0.0]).unwrap();
        let res = residual_forward(&bb, &identity_normalizer(1), &hist, 0.4).unwrap();
        assert!(res.values().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn full_keep_fraction_leaves_only_bias_path() {
        let mut bb = MlpBackbone::init(8, 4, 1, 6, 1);
        bb.net.b2.fill(0.25);
        let hist = RealSignal::from_slice(&[3.0, 1.0, -2.0, 0.5, 4.0, -1.0, 2.0, 0.0]).unwrap();
        // rho = 1 means the high band is empty, so the backbone sees zeros;
        // tanh(b1) feeds w2, plus b2, independent of the history
        let a = residual_forward(&bb, &identity_normalizer(1), &hist, 1.0).unwrap();
        let other = RealSignal::from_slice(&[0.0; 8]).unwrap();
        let b = residual_forward(&bb, &identity_normalizer(1), &other, 1.0).unwrap();
        for (x, y) in a.values().iter().zip(b.values().iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert_eq!((a.len(), a.channels()), (4, 1));
    }

    #[test]
    fn backbone_gradient_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..20 {
            let bb = MlpBackbone::init(6, 3, 1, 4, rng.gen());
            let hist_vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let hp = RealSignal::from_slice(&hist_vals).unwrap();
            let target =
                RealSignal::from_slice(&(0..3).map(|_| rng.gen_range(-1.0..1.0)).collect::<Vec<_>>())
                    .unwrap();

            let loss_of = |bb: &MlpBackbone| {
                let out = RealSignal::new(bb.forward(&hp).unwrap()).unwrap();
                crate::loss::faloss_temporal(&target, &out).unwrap()
            };
            let out = RealSignal::new(bb.forward(&hp).unwrap()).unwrap();
            let (_, spec_grad) = faloss_grad(&dft(&target), &dft(&out)).unwrap();
            let temporal = pull_back_spectral_grad(&spec_grad);
            let analytic = bb.backward(&hp, &temporal).unwrap();

            let mut params = bb.params();
            let h = 1e-5;
            for slot in 0..params.len() {
                let base = params[slot];
                let mut bb_mut = bb.clone();
                params[slot] = base + h;
                bb_mut.set_params(&params);
                let up = loss_of(&bb_mut);
                params[slot] = base - h;
                bb_mut.set_params(&params);
                let down = loss_of(&bb_mut);
                params[slot] = base;
                let fd = (up - down) / (2.0 * h);
                if fd.abs() < 1e-10 && analytic[slot].abs() < 1e-10 {
                    continue;
                }
                let rel = (analytic[slot] - fd).abs() / fd.abs().max(1e-8);
                assert!(rel < 1e-4, "param {slot}: {} vs {fd}", analytic[slot]);
            }
        }
    }

    #[test]
    fn combined_is_exact_sum_of_tokens() {
        let cfg = PlfmConfig {
            patch_len: 4,
            stride: 2,
            hidden_dim: 3,
            keep_fraction: 0.4,
            history_len: 8,
            horizon: 4,
            channels: 1,
            activation: Activation::Tanh,
        };
        let plfm = crate::plfm::PlfmWeights::init(cfg, identity_normalizer(1), 7).unwrap();
        let bb = MlpBackbone::init(8, 4, 1, 6, 8);
        let hist = RealSignal::from_slice(&[0.1, 0.4, -0.3, 0.9, -0.5, 0.2, 0.0, 0.7]).unwrap();
        let (low, res, combined) = combined_forecast(&plfm, &bb, &hist).unwrap();
        for ((l, r), c) in low.values().iter().zip(res.values().iter()).zip(combined.values().iter()) {
            assert_eq!(l + r, *c);
        }
    }

    #[test]
    fn phase2_keeps_plfm_frozen_and_improves_on_train() {
        let windows = sine_windows(24, 8, 4, 1, 16);
        let cfg = PlfmConfig {
            patch_len: 4,
            stride: 2,
            hidden_dim: 8,
            keep_fraction: 0.4,
            history_len: 8,
            horizon: 4,
            channels: 1,
            activation: Activation::Tanh,
        };
        let hyper = TrainHyper { epochs: 60, lr: 5e-3, ..Default::default() };
        let plfm = plfm_train(cfg, &windows, &[], &hyper).unwrap();
        let before = plfm.checksum();

        let plfm_only_loss: f64 = windows
            .iter()
            .map(|w| {
                let low = plfm_low_token(&plfm, &w.history_signal().unwrap()).unwrap();
                crate::loss::faloss_temporal(&w.target_signal().unwrap(), &low).unwrap()
            })
            .sum::<f64>()
            / windows.len() as f64;

        let bb = MlpBackbone::init(8, 4, 1, 16, hyper.seed);
        let trained = residual_train(bb, &plfm, &windows, &hyper).unwrap();
        assert_eq!(plfm.checksum(), before);

        let combined_loss: f64 = windows
            .iter()
            .map(|w| {
                let (_, _, combined) =
                    combined_forecast(&plfm, &trained, &w.history_signal().unwrap()).unwrap();
                crate::loss::faloss_temporal(&w.target_signal().unwrap(), &combined).unwrap()
            })
            .sum::<f64>()
            / windows.len() as f64;
        assert!(
            combined_loss <= plfm_only_loss + 1e-9,
            "combined {combined_loss} should not be worse than plfm-only {plfm_only_loss}"
        );
    }

    #[test]
    fn low_band_only_target_drives_residual_toward_zero() {
        // targets already band-limited and the low learner near-perfect:
        // the optimal residual is zero
        let windows = sine_windows(16, 8, 4, 1, 16);
        // band-limit the targets so Y = low_pass(Y, rho) exactly
        let windows: Vec<SeriesWindow> = windows
            .into_iter()
            .map(|mut w| {
                let y = RealSignal::new(w.y.clone()).unwrap();
                w.y = crate::spectral::low_pass(&y, 0.4).unwrap().into_inner();
                w
            })
            .collect();
        let cfg = PlfmConfig {
            patch_len: 4,
            stride: 2,
            hidden_dim: 16,
            keep_fraction: 0.4,
            history_len: 8,
            horizon: 4,
            channels: 1,
            activation: Activation::Tanh,
        };
        let hyper = TrainHyper { epochs: 300, lr: 5e-3, ..Default::default() };
        let plfm = plfm_train(cfg, &windows, &[], &hyper).unwrap();
        let bb = MlpBackbone::init(8, 4, 1, 8, 3);
        let trained = residual_train(bb, &plfm, &windows, &hyper).unwrap();

        let (res_norm, tgt_norm): (f64, f64) = windows
            .iter()
            .map(|w| {
                let hist = w.history_signal().unwrap();
                let res = residual_forward(&trained, &plfm.normalizer, &hist, 0.4).unwrap();
                let r: f64 = res.values().iter().map(|v| v * v).sum();
                let t: f64 = w.y.iter().map(|v| v * v).sum();
                (r, t)
            })
            .fold((0.0, 0.0), |(a, b), (r, t)| (a + r, b + t));
        assert!(
            res_norm.sqrt() < 0.35 * tgt_norm.sqrt(),
            "residual norm {} vs target norm {}",
            res_norm.sqrt(),
            tgt_norm.sqrt()
        );
    }

    #[test]
    fn checkpoint_round_trip_and_chain() {
        let cfg = PlfmConfig {
            patch_len: 4,
            stride: 2,
            hidden_dim: 3,
            keep_fraction: 0.4,
            history_len: 8,
            horizon: 4,
            channels: 1,
            activation: Activation::Tanh,
        };
        let plfm = crate::plfm::PlfmWeights::init(cfg, identity_normalizer(1), 0).unwrap();
        let bb = MlpBackbone::init(8, 4, 1, 6, 0);
        let ckpt = ResidualCheckpoint::new(bb, &plfm);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("resid.json");
        ckpt.save(&path).unwrap();
        let loaded = ResidualCheckpoint::load(&path).unwrap();
        assert_eq!(loaded.checksum(), ckpt.checksum());
        loaded.verify_against(&plfm).unwrap();

        let other = crate::plfm::PlfmWeights::init(cfg, identity_normalizer(1), 99).unwrap();
        assert!(matches!(
            loaded.verify_against(&other),
            Err(Error::IncompatibleCheckpoint(_))
        ));
    }
}
