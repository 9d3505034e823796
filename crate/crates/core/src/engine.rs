//! Pipeline orchestration: configuration, the three phases, inference
//! outputs, the benchmark grid, and the theorem verification suites.

use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use crate::calibrate::{calibrate, build_prompt, render_list, AuxiliaryContext, ForecastSource, LlmEndpointConfig};
use crate::data::{
    gen_synthetic, ingest_csv, make_windows, split, CsvSchema, Dataset, Normalizer, SeriesWindow,
    SineComponent, SplitSpec, SyntheticSpec,
};
use crate::error::{Error, Result};
use crate::loss::check_mae_bound;
use crate::metrics::{aggregate, evaluate, low_band_evaluate, MetricSet};
use crate::nn::Adam;
use crate::plfm::{plfm_train, PlfmConfig, PlfmWeights, TrainHyper};
use crate::residual::{
    combined_forecast, residual_train, MlpBackbone, ResidualBackbone, ResidualCheckpoint,
};
use crate::spectral::{dft, parseval_gap_with, RealSignal, Spectrum};
use crate::util::atomic_write;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataConfig {
    Synthetic { spec: SyntheticSpec },
    Csv { path: PathBuf, schema: CsvSchema },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BenchConfig {
    pub horizons: Vec<usize>,
    pub patch_lens: Vec<usize>,
    pub seeds: Vec<u64>,
    /// Run the FL x LLM ablation grid in addition to the patch sweep.
    pub ablate: bool,
    /// Also export prompt/target pairs for external fine-tuning stacks.
    pub export_sft: bool,
}

impl Default for BenchConfig {
    fn default() -> Self {
        Self {
            horizons: vec![16],
            patch_lens: vec![8, 10, 12, 14, 16],
            seeds: vec![0, 1, 2],
            ablate: true,
            export_sft: false,
        }
    }
}

/// Everything a run needs, dumpable as a TOML document so that no
/// hyperparameter stays implicit.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub data: DataConfig,
    pub history_len: usize,
    pub horizon: usize,
    /// Shared low-band fraction across all phases.
    pub keep_fraction: f64,
    pub patch_len: usize,
    pub patch_stride: usize,
    pub plfm_hidden_dim: usize,
    pub residual_hidden_dim: usize,
    pub descriptor: String,
    pub split: SplitSpec,
    pub phase1: TrainHyper,
    pub phase2: TrainHyper,
    #[serde(default)]
    pub endpoint: Option<LlmEndpointConfig>,
    #[serde(default)]
    pub bench: BenchConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::Synthetic {
                spec: SyntheticSpec {
                    len: 2000,
                    channels: 1,
                    components: vec![
                        SineComponent { bin: 2, amplitude: 1.0, phase: 0.0 },
                        SineComponent { bin: 25, amplitude: 0.5, phase: 0.0 },
                    ],
                    noise_sd: 0.3,
                    seed: 0,
                },
            },
            history_len: 64,
            horizon: 16,
            keep_fraction: 0.4,
            patch_len: 16,
            patch_stride: 8,
            plfm_hidden_dim: 64,
            residual_hidden_dim: 64,
            descriptor: "Synthetic sinusoidal series with additive noise.".into(),
            split: SplitSpec::default(),
            phase1: TrainHyper { lr: 1e-2, batch_size: 64, epochs: 300, ..Default::default() },
            phase2: TrainHyper { lr: 1e-3, batch_size: 64, epochs: 100, ..Default::default() },
            endpoint: None,
            bench: BenchConfig::default(),
        }
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| Error::Schema(format!("config: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn plfm_config(&self, channels: usize) -> PlfmConfig {
        PlfmConfig {
            patch_len: self.patch_len,
            stride: self.patch_stride,
            hidden_dim: self.plfm_hidden_dim,
            keep_fraction: self.keep_fraction,
            history_len: self.history_len,
            horizon: self.horizon,
            channels,
            activation: crate::nn::Activation::Tanh,
        }
    }

    pub fn load_dataset(&self) -> Result<Dataset> {
        match &self.data {
            DataConfig::Synthetic { spec } => gen_synthetic(spec),
            DataConfig::Csv { path, schema } => ingest_csv(path, schema),
        }
    }

    pub fn splits(&self, ds: &Dataset) -> Result<(Vec<SeriesWindow>, Vec<SeriesWindow>, Vec<SeriesWindow>)> {
        let windows = make_windows(ds, self.history_len, self.horizon, 1)?;
        split(&windows, &self.split, self.history_len, self.horizon)
    }
}

fn check_plfm_matches(cfg: &PipelineConfig, plfm: &PlfmConfig, channels: usize) -> Result<()> {
    let want = cfg.plfm_config(channels);
    if plfm.history_len != want.history_len
        || plfm.horizon != want.horizon
        || plfm.channels != want.channels
        || (plfm.keep_fraction - want.keep_fraction).abs() > 1e-12
    {
        return Err(Error::IncompatibleCheckpoint(format!(
            "checkpoint (H={}, L={}, C={}, rho={}) does not match config (H={}, L={}, C={}, rho={})",
            plfm.history_len,
            plfm.horizon,
            plfm.channels,
            plfm.keep_fraction,
            want.history_len,
            want.horizon,
            want.channels,
            want.keep_fraction
        )));
    }
    Ok(())
}

/// Phase 1: train the low-frequency learner and checkpoint it.
pub fn run_phase1(cfg: &PipelineConfig, out_dir: &Path) -> Result<PathBuf> {
    let ds = cfg.load_dataset()?;
    let (train, val, _) = cfg.splits(&ds)?;
    let weights = plfm_train(cfg.plfm_config(ds.channels()), &train, &val, &cfg.phase1)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("plfm.json");
    weights.save(&path)?;
    Ok(path)
}

/// Phase 2: train the residual backbone against the frozen phase-1
/// checkpoint and save the chained checkpoint.
pub fn run_phase2(cfg: &PipelineConfig, plfm_path: &Path, out_dir: &Path) -> Result<PathBuf> {
    let ds = cfg.load_dataset()?;
    let plfm = PlfmWeights::load(plfm_path)?;
    check_plfm_matches(cfg, &plfm.config, ds.channels())?;
    let (train, _, _) = cfg.splits(&ds)?;
    let backbone = MlpBackbone::init_zero_output(
        cfg.history_len,
        cfg.horizon,
        ds.channels(),
        cfg.residual_hidden_dim,
        cfg.phase2.seed,
    );
    let trained = residual_train(backbone, &plfm, &train, &cfg.phase2)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("resid.json");
    ResidualCheckpoint::new(trained, &plfm).save(&path)?;
    Ok(path)
}

fn load_models(
    cfg: &PipelineConfig,
    plfm_path: &Path,
    resid_path: &Path,
    channels: usize,
) -> Result<(PlfmWeights, ResidualCheckpoint)> {
    let plfm = PlfmWeights::load(plfm_path)?;
    check_plfm_matches(cfg, &plfm.config, channels)?;
    let resid = ResidualCheckpoint::load(resid_path)?;
    resid.verify_against(&plfm)?;
    Ok((plfm, resid))
}

fn aux_context(cfg: &PipelineConfig, ds: &Dataset, w: &SeriesWindow) -> AuxiliaryContext {
    let span = w.origin..w.origin + cfg.history_len + cfg.horizon;
    AuxiliaryContext {
        matrix: w.aux.clone(),
        names: ds.aux_names.clone(),
        descriptor: cfg.descriptor.clone(),
        timestamps: ds.timestamps[span].to_vec(),
    }
}

/// One channel of the final forecast with its provenance.
struct ChannelForecast {
    values: Vec<f64>,
    source: ForecastSource,
}

fn finalize_window(
    cfg: &PipelineConfig,
    ds: &Dataset,
    plfm: &PlfmWeights,
    resid: &ResidualCheckpoint,
    w: &SeriesWindow,
) -> Result<(RealSignal, RealSignal, RealSignal, Vec<ChannelForecast>)> {
    let hist = w.history_signal()?;
    let (low, res, combined) = combined_forecast(plfm, &resid.backbone, &hist)?;
    let channels = combined.channels();
    let mut finals = Vec::with_capacity(channels);
    match &cfg.endpoint {
        Some(endpoint) => {
            let aux = aux_context(cfg, ds, w);
            for ch in 0..channels {
                let (forecast, source) = calibrate(&low, &res, &hist, &aux, ch, endpoint)?;
                finals.push(ChannelForecast { values: forecast.channel(0), source });
            }
        }
        None => {
            for ch in 0..channels {
                finals.push(ChannelForecast {
                    values: combined.channel(ch),
                    source: ForecastSource::Fallback,
                });
            }
        }
    }
    Ok((low, res, combined, finals))
}

fn final_signal(finals: &[ChannelForecast], horizon: usize) -> Result<RealSignal> {
    let m = Array2::from_shape_fn((horizon, finals.len()), |(t, ch)| finals[ch].values[t]);
    RealSignal::new(m)
}

#[derive(Debug, Clone, Serialize)]
pub struct PredictReport {
    pub window_origin: usize,
    pub sources: Vec<ForecastSource>,
    pub metrics: MetricSet,
    pub low_band_metrics: MetricSet,
    pub forecast_csv: PathBuf,
    pub report_json: PathBuf,
    pub elapsed_ms: u128,
}

/// Inference on the most recent test window: forecast CSV plus JSON report.
pub fn run_predict(
    cfg: &PipelineConfig,
    plfm_path: &Path,
    resid_path: &Path,
    out_dir: &Path,
) -> Result<PredictReport> {
    let started = Instant::now();
    let ds = cfg.load_dataset()?;
    let (_, _, test) = cfg.splits(&ds)?;
    let w = test
        .last()
        .ok_or_else(|| Error::InvalidInput("test split is empty; nothing to predict".into()))?;
    let (plfm, resid) = load_models(cfg, plfm_path, resid_path, ds.channels())?;
    let (low, res, combined, finals) = finalize_window(cfg, &ds, &plfm, &resid, w)?;

    let mut csv = String::from("timestamp,channel,y_low,y_res,y_combined,y_final,source\n");
    for t in 0..cfg.horizon {
        let ts = &ds.timestamps[w.origin + cfg.history_len + t];
        for ch in 0..ds.channels() {
            let _ = writeln!(
                csv,
                "{ts},{name},{:.4},{:.4},{:.4},{:.4},{source}",
                low.values()[[t, ch]],
                res.values()[[t, ch]],
                combined.values()[[t, ch]],
                finals[ch].values[t],
                name = ds.target_names[ch],
                source = finals[ch].source,
            );
        }
    }
    std::fs::create_dir_all(out_dir)?;
    let forecast_csv = out_dir.join("forecast.csv");
    atomic_write(&forecast_csv, csv.as_bytes())?;

    let final_sig = final_signal(&finals, cfg.horizon)?;
    let truth = w.target_signal()?;
    let report = PredictReport {
        window_origin: w.origin,
        sources: finals.iter().map(|f| f.source).collect(),
        metrics: evaluate(&final_sig, &truth)?,
        low_band_metrics: low_band_evaluate(&final_sig, &truth, cfg.keep_fraction)?,
        forecast_csv,
        report_json: out_dir.join("report.json"),
        elapsed_ms: started.elapsed().as_millis(),
    };
    atomic_write(&report.report_json, &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub windows: usize,
    pub metrics_mean: MetricSet,
    pub metrics_std: MetricSet,
    pub low_band_mean: MetricSet,
    pub llm_windows: usize,
    pub fallback_windows: usize,
    pub elapsed_ms: u128,
}

/// Metrics of the final forecast over the whole test split.
pub fn run_evaluate(
    cfg: &PipelineConfig,
    plfm_path: &Path,
    resid_path: &Path,
    out_dir: &Path,
) -> Result<EvalReport> {
    let started = Instant::now();
    let ds = cfg.load_dataset()?;
    let (_, _, test) = cfg.splits(&ds)?;
    if test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let (plfm, resid) = load_models(cfg, plfm_path, resid_path, ds.channels())?;

    let mut full = Vec::new();
    let mut low_band = Vec::new();
    let mut llm_windows = 0;
    let mut fallback_windows = 0;
    for w in &test {
        let (_, _, _, finals) = finalize_window(cfg, &ds, &plfm, &resid, w)?;
        if finals.iter().any(|f| f.source == ForecastSource::Llm) {
            llm_windows += 1;
        } else {
            fallback_windows += 1;
        }
        let final_sig = final_signal(&finals, cfg.horizon)?;
        let truth = w.target_signal()?;
        full.push(evaluate(&final_sig, &truth)?);
        low_band.push(low_band_evaluate(&final_sig, &truth, cfg.keep_fraction)?);
    }
    let (metrics_mean, metrics_std) = aggregate(&full);
    let (low_band_mean, _) = aggregate(&low_band);
    let report = EvalReport {
        windows: test.len(),
        metrics_mean,
        metrics_std,
        low_band_mean,
        llm_windows,
        fallback_windows,
        elapsed_ms: started.elapsed().as_millis(),
    };
    std::fs::create_dir_all(out_dir)?;
    atomic_write(&out_dir.join("eval.json"), &serde_json::to_vec_pretty(&report)?)?;
    Ok(report)
}

/// Same-budget ablation baseline: one MLP from the raw normalized history
/// to the horizon, trained with temporal MSE.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MseBaseline {
    pub normalizer: Normalizer,
    pub net: MlpBackbone,
}

/// Hidden width giving the baseline roughly the parameter count of the
/// dual-branch learner it replaces.
pub fn baseline_matched_hidden(plfm_cfg: &PlfmConfig) -> usize {
    let input = plfm_cfg.input_dim();
    let (hd, l, c) = (plfm_cfg.hidden_dim, plfm_cfg.horizon, plfm_cfg.channels);
    let plfm_params = 2 * (input * hd + hd + hd * l + l);
    let (h, lc) = (plfm_cfg.history_len * c, l * c);
    ((plfm_params.saturating_sub(lc)) / (h + lc + 1)).max(1)
}

impl MseBaseline {
    pub fn predict(&self, history: &RealSignal) -> Result<RealSignal> {
        let normed = RealSignal::new(self.normalizer.normalize(&history.values().to_owned()))?;
        let out = self.net.forward(&normed)?;
        RealSignal::new(self.normalizer.denormalize(&out))
    }
}

/// Plain mini-batch Adam at a constant learning rate; returns the
/// final-epoch weights.
pub fn baseline_train(
    history_len: usize,
    horizon: usize,
    channels: usize,
    hidden_dim: usize,
    train: &[SeriesWindow],
    hyper: &TrainHyper,
) -> Result<MseBaseline> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    hyper.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidInput("training dataset is empty".into()));
    }
    let normalizer = Normalizer::fit(train)?;
    let mut net = MlpBackbone::init(history_len, horizon, channels, hidden_dim, hyper.seed);

    // one row per window
    let mut x_mat = Array2::zeros((train.len(), history_len * channels));
    let mut y_mat = Array2::zeros((train.len(), horizon * channels));
    for (i, w) in train.iter().enumerate() {
        for (slot, v) in normalizer.normalize(&w.x).iter().enumerate() {
            x_mat[[i, slot]] = *v;
        }
        for (slot, v) in normalizer.normalize(&w.y).iter().enumerate() {
            y_mat[[i, slot]] = *v;
        }
    }

    let denom = (horizon * channels) as f64;
    let sizes = [net.net.w1.len(), net.net.b1.len(), net.net.w2.len(), net.net.b2.len()];
    let mut opt = Adam::new(hyper.adam(), &sizes);
    let mut shuffle_rng = ChaCha8Rng::seed_from_u64(hyper.seed.wrapping_add(3));
    let mut order: Vec<usize> = (0..train.len()).collect();

    for epoch in 0..hyper.epochs {
        order.shuffle(&mut shuffle_rng);
        for batch in order.chunks(hyper.batch_size) {
            let xb = x_mat.select(ndarray::Axis(0), batch);
            let yb = y_mat.select(ndarray::Axis(0), batch);
            let (out, hidden) = net.net.forward_batch(xb.view());
            let diff = &out - &yb;
            let batch_loss = diff.mapv(|d| d * d).sum() / denom;
            if !batch_loss.is_finite() {
                return Err(Error::DivergedTraining { epoch });
            }
            let out_grad = diff.mapv(|d| 2.0 * d / denom);
            let mut grads = net.net.zero_grads();
            net.net.backward_batch(xb.view(), &hidden, out_grad.view(), &mut grads);
            grads.scale(1.0 / batch.len() as f64);
            opt.step(&mut net.net.param_slices_mut(), &grads.grad_slices());
        }
        if net.params().iter().any(|v| !v.is_finite()) {
            return Err(Error::DivergedTraining { epoch });
        }
    }
    Ok(MseBaseline { normalizer, net })
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchRow {
    pub section: String,
    pub horizon: usize,
    pub patch_len: usize,
    pub fl: bool,
    pub llm: bool,
    pub seed: u64,
    pub mae: f64,
    pub rmse: f64,
    pub mape: f64,
}

fn mean_test_metrics(
    test: &[SeriesWindow],
    predict: &mut dyn FnMut(&SeriesWindow) -> Result<RealSignal>,
) -> Result<MetricSet> {
    let runs: Vec<MetricSet> = test
        .iter()
        .map(|w| evaluate(&predict(w)?, &w.target_signal()?))
        .collect::<Result<_>>()?;
    Ok(aggregate(&runs).0)
}

fn bench_cell(cfg: &PipelineConfig, fl: bool, llm: bool) -> Result<MetricSet> {
    let ds = cfg.load_dataset()?;
    let (train, val, test) = cfg.splits(&ds)?;
    if test.is_empty() {
        return Err(Error::InvalidInput("test split is empty".into()));
    }
    let channels = ds.channels();
    if fl {
        let plfm = plfm_train(cfg.plfm_config(channels), &train, &val, &cfg.phase1)?;
        let backbone = MlpBackbone::init_zero_output(
            cfg.history_len,
            cfg.horizon,
            channels,
            cfg.residual_hidden_dim,
            cfg.phase2.seed,
        );
        let trained = residual_train(backbone, &plfm, &train, &cfg.phase2)?;
        let endpoint = cfg.endpoint.clone().filter(|_| llm);
        let mut predict = |w: &SeriesWindow| -> Result<RealSignal> {
            let hist = w.history_signal()?;
            let (low, res, combined) = combined_forecast(&plfm, &trained, &hist)?;
            match &endpoint {
                Some(ep) => {
                    let aux = aux_context(cfg, &ds, w);
                    let finals = (0..channels)
                        .map(|ch| {
                            let (f, source) = calibrate(&low, &res, &hist, &aux, ch, ep)?;
                            Ok(ChannelForecast { values: f.channel(0), source })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    final_signal(&finals, cfg.horizon)
                }
                None => Ok(combined),
            }
        };
        mean_test_metrics(&test, &mut predict)
    } else {
        let hidden = baseline_matched_hidden(&cfg.plfm_config(channels));
        let baseline = baseline_train(
            cfg.history_len,
            cfg.horizon,
            channels,
            hidden,
            &train,
            &cfg.phase1,
        )?;
        let endpoint = cfg.endpoint.clone().filter(|_| llm);
        let mut predict = |w: &SeriesWindow| -> Result<RealSignal> {
            let hist = w.history_signal()?;
            let pred = baseline.predict(&hist)?;
            match &endpoint {
                Some(ep) => {
                    // no frequency decomposition to report: the whole
                    // forecast rides in the low slot with a zero residual
                    let zero = RealSignal::new(Array2::zeros(pred.values().raw_dim()))?;
                    let aux = aux_context(cfg, &ds, w);
                    let finals = (0..channels)
                        .map(|ch| {
                            let (f, source) = calibrate(&pred, &zero, &hist, &aux, ch, ep)?;
                            Ok(ChannelForecast { values: f.channel(0), source })
                        })
                        .collect::<Result<Vec<_>>>()?;
                    final_signal(&finals, cfg.horizon)
                }
                None => Ok(pred),
            }
        };
        mean_test_metrics(&test, &mut predict)
    }
}

fn with_cell(cfg: &PipelineConfig, horizon: usize, patch_len: usize, seed: u64) -> PipelineConfig {
    let mut c = cfg.clone();
    c.horizon = horizon;
    c.patch_len = patch_len;
    c.patch_stride = (patch_len / 2).max(1);
    c.phase1.seed = seed;
    c.phase2.seed = seed;
    c
}

/// Run the configured grid and write `bench.csv`. The ablation section
/// toggles the frequency pipeline (FL) and calibration (LLM); the sweep
/// section varies the patch length with both left on as configured.
pub fn run_bench(cfg: &PipelineConfig, out_dir: &Path) -> Result<Vec<BenchRow>> {
    let mut rows = Vec::new();
    for &horizon in &cfg.bench.horizons {
        for &seed in &cfg.bench.seeds {
            if cfg.bench.ablate {
                for fl in [true, false] {
                    for llm in [true, false] {
                        let cell = with_cell(cfg, horizon, cfg.patch_len, seed);
                        let m = bench_cell(&cell, fl, llm)?;
                        rows.push(BenchRow {
                            section: "ablation".into(),
                            horizon,
                            patch_len: cfg.patch_len,
                            fl,
                            llm,
                            seed,
                            mae: m.mae,
                            rmse: m.rmse,
                            mape: m.mape,
                        });
                    }
                }
            }
            for &patch_len in &cfg.bench.patch_lens {
                let cell = with_cell(cfg, horizon, patch_len, seed);
                let m = bench_cell(&cell, true, cfg.endpoint.is_some())?;
                rows.push(BenchRow {
                    section: "patch_sweep".into(),
                    horizon,
                    patch_len,
                    fl: true,
                    llm: cfg.endpoint.is_some(),
                    seed,
                    mae: m.mae,
                    rmse: m.rmse,
                    mape: m.mape,
                });
            }
        }
    }

    let mut csv = String::from("section,horizon,patch_len,fl,llm,seed,mae,rmse,mape\n");
    for r in &rows {
        let _ = writeln!(
            csv,
            "{},{},{},{},{},{},{:.6},{:.6},{:.6}",
            r.section, r.horizon, r.patch_len, r.fl, r.llm, r.seed, r.mae, r.rmse, r.mape
        );
    }
    std::fs::create_dir_all(out_dir)?;
    atomic_write(&out_dir.join("bench.csv"), csv.as_bytes())?;

    if cfg.bench.export_sft {
        export_sft_pairs(cfg, &out_dir.join("sft_pairs.jsonl"))?;
    }
    Ok(rows)
}

/// Prompt/target pairs over the train split for external fine-tuning
/// stacks: the prompt as sent at inference, the completion being the
/// ground-truth horizon rendered in the same list syntax.
fn export_sft_pairs(cfg: &PipelineConfig, path: &Path) -> Result<()> {
    let ds = cfg.load_dataset()?;
    let (train, val, _) = cfg.splits(&ds)?;
    let plfm = plfm_train(cfg.plfm_config(ds.channels()), &train, &val, &cfg.phase1)?;
    let backbone = MlpBackbone::init_zero_output(
        cfg.history_len,
        cfg.horizon,
        ds.channels(),
        cfg.residual_hidden_dim,
        cfg.phase2.seed,
    );
    let trained = residual_train(backbone, &plfm, &train, &cfg.phase2)?;

    let mut out = String::new();
    for w in &train {
        let hist = w.history_signal()?;
        let (low, res, _) = combined_forecast(&plfm, &trained, &hist)?;
        let aux = aux_context(cfg, &ds, w);
        for ch in 0..ds.channels() {
            let prompt = build_prompt(&low, &res, &hist, &aux, ch)?;
            let truth = w.target_signal()?.channel(ch);
            let line = serde_json::json!({
                "prompt": prompt.text,
                "completion": render_list(&truth),
            });
            let _ = writeln!(out, "{line}");
        }
    }
    atomic_write(path, out.as_bytes())
}

#[derive(Debug, Clone, Serialize)]
pub struct VerifyReport {
    pub parseval_cases: usize,
    pub parseval_violations: usize,
    pub max_parseval_gap: f64,
    pub bound_cases: usize,
    pub bound_violations: usize,
    pub max_bound_slack: f64,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.parseval_violations == 0 && self.bound_violations == 0
    }
}

/// The Parseval and MAE-bound property suites over random signals, with
/// the transform injectable so a broken implementation is provably caught.
pub fn run_verify_with(
    cases: usize,
    seed: u64,
    transform: fn(&RealSignal) -> Spectrum,
) -> Result<VerifyReport> {
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = VerifyReport {
        parseval_cases: cases,
        parseval_violations: 0,
        max_parseval_gap: 0.0,
        bound_cases: cases,
        bound_violations: 0,
        max_bound_slack: 0.0,
    };

    for _ in 0..cases {
        let n = rng.gen_range(2..=64);
        let c = rng.gen_range(1..=3);
        let m = Array2::from_shape_fn((n, c), |_| rng.gen_range(-10.0..10.0));
        let sig = RealSignal::new(m)?;
        let gap = parseval_gap_with(&sig, transform);
        let scale = 1.0 + sig.energy();
        report.max_parseval_gap = report.max_parseval_gap.max(gap / scale);
        if gap > 1e-9 * scale {
            report.parseval_violations += 1;
        }
    }

    for _ in 0..cases {
        let n = rng.gen_range(2..=64);
        let truth = RealSignal::new(Array2::from_shape_fn((n, 1), |_| rng.gen_range(-10.0..10.0)))?;
        let pred = RealSignal::new(Array2::from_shape_fn((n, 1), |_| rng.gen_range(-10.0..10.0)))?;
        // recompute the bound with the injected transform so a broken DFT
        // is visible on this suite as well
        let diff_spec = transform(&RealSignal::new(&pred.values().to_owned() - &truth.values().to_owned())?);
        let bound: f64 = (0..diff_spec.channels())
            .map(|ch| (0..diff_spec.bins()).map(|k| diff_spec.coeffs[[k, ch]].norm()).sum::<f64>())
            .sum::<f64>()
            / diff_spec.channels() as f64;
        let (mae, exact_bound) = check_mae_bound(&truth, &pred)?;
        let _ = exact_bound;
        let slack = mae - bound;
        report.max_bound_slack = report.max_bound_slack.max(slack);
        if slack > 1e-9 * (1.0 + bound.abs()) {
            report.bound_violations += 1;
        }
    }
    Ok(report)
}

pub fn run_verify(cases: usize, seed: u64) -> Result<VerifyReport> {
    run_verify_with(cases, seed, dft)
}

/// Deliberately wrong transform for exercising the verifier's sensitivity.
#[doc(hidden)]
pub fn skewed_dft(signal: &RealSignal) -> Spectrum {
    let mut spec = dft(signal);
    spec.coeffs.mapv_inplace(|z| z * 1.01);
    spec
}
