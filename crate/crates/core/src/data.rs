//! Dataset ingestion, windowing, chronological splitting, normalization,
//! and synthetic signal generation.

use ndarray::{Array2, Axis};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::spectral::RealSignal;

/// Column roles for CSV ingestion.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CsvSchema {
    pub timestamp: String,
    pub targets: Vec<String>,
    #[serde(default)]
    pub aux: Vec<String>,
}

/// A tabular time series: target channels plus auxiliary columns, in
/// row-timestamp order.
#[derive(Debug, Clone)]
pub struct Dataset {
    /// `T x C` target values.
    pub targets: Array2<f64>,
    /// `T x D` auxiliary values (D may be zero).
    pub aux: Array2<f64>,
    pub timestamps: Vec<String>,
    pub target_names: Vec<String>,
    pub aux_names: Vec<String>,
    pub frequency: String,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.targets.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.nrows() == 0
    }

    pub fn channels(&self) -> usize {
        self.targets.ncols()
    }

    pub fn aux_dims(&self) -> usize {
        self.aux.ncols()
    }
}

/// One (history, target, auxiliary) training sample.
#[derive(Debug, Clone)]
pub struct SeriesWindow {
    /// `H x C` history.
    pub x: Array2<f64>,
    /// `L x C` target; row `t` aliases source row `origin + H + t`.
    pub y: Array2<f64>,
    /// `(H+L) x D` auxiliary context.
    pub aux: Array2<f64>,
    pub origin: usize,
}

impl SeriesWindow {
    pub fn history_signal(&self) -> Result<RealSignal> {
        RealSignal::new(self.x.clone())
    }

    pub fn target_signal(&self) -> Result<RealSignal> {
        RealSignal::new(self.y.clone())
    }
}

/// Chronological split fractions with an optional few-shot override.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    /// Keep only the most recent fraction (or count) of train windows.
    #[serde(default)]
    pub few_shot: Option<FewShot>,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FewShot {
    Fraction(f64),
    Windows(usize),
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1, test: 0.2, few_shot: None }
    }
}

/// Timestamps must be strictly increasing; numeric columns are compared
/// numerically, anything else lexicographically (which is correct for
/// ISO-8601).
fn timestamps_ordered(a: &str, b: &str) -> bool {
    match (a.parse::<i64>(), b.parse::<i64>()) {
        (Ok(x), Ok(y)) => x < y,
        _ => a < b,
    }
}

/// Parse a CSV file into a [`Dataset`] according to the schema. Rows with a
/// non-finite or unparsable target value are rejected with their row index.
pub fn ingest_csv(path: &Path, schema: &CsvSchema) -> Result<Dataset> {
    if schema.targets.is_empty() {
        return Err(Error::Schema("at least one target column is required".into()));
    }
    let mut reader = csv::Reader::from_path(path).map_err(|e| Error::Schema(e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| Error::Schema(e.to_string()))?
        .iter()
        .map(|s| s.trim().to_string())
        .collect();

    let col_index = |name: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Schema(format!("column '{name}' not found in header")))
    };
    let ts_idx = col_index(&schema.timestamp)?;
    let target_idx: Vec<usize> = schema.targets.iter().map(|n| col_index(n)).collect::<Result<_>>()?;
    let aux_idx: Vec<usize> = schema.aux.iter().map(|n| col_index(n)).collect::<Result<_>>()?;

    let mut timestamps: Vec<String> = Vec::new();
    let mut target_rows: Vec<f64> = Vec::new();
    let mut aux_rows: Vec<f64> = Vec::new();

    for (row_i, record) in reader.records().enumerate() {
        let record = record.map_err(|e| Error::Schema(e.to_string()))?;
        let ts = record.get(ts_idx).unwrap_or("").trim().to_string();
        if let Some(prev) = timestamps.last() {
            if !timestamps_ordered(prev, &ts) {
                return Err(Error::Order { row: row_i });
            }
        }
        let parse_cell = |idx: usize, name: &str| -> Result<f64> {
            let raw = record.get(idx).unwrap_or("").trim();
            let v: f64 = raw.parse().map_err(|_| Error::CsvParse {
                row: row_i,
                col: name.to_string(),
                message: format!("cannot parse '{raw}' as a number"),
            })?;
            if !v.is_finite() {
                return Err(Error::CsvParse {
                    row: row_i,
                    col: name.to_string(),
                    message: "non-finite value".into(),
                });
            }
            Ok(v)
        };
        for (i, &idx) in target_idx.iter().enumerate() {
            target_rows.push(parse_cell(idx, &schema.targets[i])?);
        }
        for (i, &idx) in aux_idx.iter().enumerate() {
            aux_rows.push(parse_cell(idx, &schema.aux[i])?);
        }
        timestamps.push(ts);
    }

    let t = timestamps.len();
    Ok(Dataset {
        targets: Array2::from_shape_vec((t, target_idx.len()), target_rows)
            .map_err(|e| Error::Schema(e.to_string()))?,
        aux: Array2::from_shape_vec((t, aux_idx.len()), aux_rows)
            .map_err(|e| Error::Schema(e.to_string()))?,
        timestamps,
        target_names: schema.targets.clone(),
        aux_names: schema.aux.clone(),
        frequency: String::new(),
    })
}

/// Sliding windows over the dataset: `T - H - L + 1` windows at stride 1.
pub fn make_windows(ds: &Dataset, history: usize, horizon: usize, stride: usize) -> Result<Vec<SeriesWindow>> {
    if stride == 0 {
        return Err(Error::InvalidInput("stride must be >= 1".into()));
    }
    let t = ds.len();
    if t < history + horizon {
        return Err(Error::InvalidInput(format!(
            "dataset length {t} is shorter than H+L = {}",
            history + horizon
        )));
    }
    let mut windows = Vec::new();
    let mut origin = 0;
    while origin + history + horizon <= t {
        let x = ds.targets.slice_axis(Axis(0), (origin..origin + history).into()).to_owned();
        let y = ds
            .targets
            .slice_axis(Axis(0), (origin + history..origin + history + horizon).into())
            .to_owned();
        let aux = ds
            .aux
            .slice_axis(Axis(0), (origin..origin + history + horizon).into())
            .to_owned();
        windows.push(SeriesWindow { x, y, aux, origin });
        origin += stride;
    }
    Ok(windows)
}

/// Chronological train/val/test split on window origin order. Windows whose
/// target range crosses into the next split's region are dropped from the
/// earlier split.
pub fn split(
    windows: &[SeriesWindow],
    spec: &SplitSpec,
    history: usize,
    horizon: usize,
) -> Result<(Vec<SeriesWindow>, Vec<SeriesWindow>, Vec<SeriesWindow>)> {
    if (spec.train + spec.val + spec.test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidInput("split fractions must sum to 1".into()));
    }
    let n = windows.len();
    let n_train = (n as f64 * spec.train).round() as usize;
    let n_val = (n as f64 * spec.val).round() as usize;
    let n_train = n_train.min(n);
    let n_val = n_val.min(n - n_train);

    let train_raw = &windows[..n_train];
    let val_raw = &windows[n_train..n_train + n_val];
    let test_raw = &windows[n_train + n_val..];

    let drop_crossing = |ws: &[SeriesWindow], next_first_origin: Option<usize>| -> Vec<SeriesWindow> {
        ws.iter()
            .filter(|w| match next_first_origin {
                Some(b) => w.origin + history + horizon <= b + history,
                None => true,
            })
            .cloned()
            .collect()
    };

    let val_first = val_raw.first().map(|w| w.origin);
    let test_first = test_raw.first().map(|w| w.origin);
    let mut train = drop_crossing(train_raw, val_first.or(test_first));
    let val = drop_crossing(val_raw, test_first);
    let test = test_raw.to_vec();

    if let Some(fs) = spec.few_shot {
        let keep = match fs {
            FewShot::Fraction(f) => {
                if !(0.0..=1.0).contains(&f) {
                    return Err(Error::InvalidInput("few-shot fraction must be in [0,1]".into()));
                }
                ((train.len() as f64 * f).round() as usize).max(1)
            }
            FewShot::Windows(k) => k.max(1),
        };
        let keep = keep.min(train.len());
        train = train.split_off(train.len() - keep);
    }
    Ok((train, val, test))
}

/// Per-channel z-score statistics, fit on a window set's histories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    pub fn fit(windows: &[SeriesWindow]) -> Result<Self> {
        let first = windows
            .first()
            .ok_or_else(|| Error::InvalidInput("cannot fit normalizer on empty window set".into()))?;
        let c = first.x.ncols();
        let mut mean = vec![0.0; c];
        let mut count = 0usize;
        for w in windows {
            for row in w.x.rows() {
                for (ch, v) in row.iter().enumerate() {
                    mean[ch] += v;
                }
            }
            count += w.x.nrows();
        }
        for m in &mut mean {
            *m /= count as f64;
        }
        let mut var = vec![0.0; c];
        for w in windows {
            for row in w.x.rows() {
                for (ch, v) in row.iter().enumerate() {
                    var[ch] += (v - mean[ch]) * (v - mean[ch]);
                }
            }
        }
        let std = var
            .into_iter()
            .map(|v| (v / count as f64).sqrt().max(1e-8))
            .collect();
        Ok(Self { mean, std })
    }

    pub fn normalize(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = (*v - self.mean[ch]) / self.std[ch];
            }
        }
        out
    }

    pub fn denormalize(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (ch, v) in row.iter_mut().enumerate() {
                *v = *v * self.std[ch] + self.mean[ch];
            }
        }
        out
    }

    /// Scale without the mean shift, for residual-style quantities.
    pub fn denormalize_scale(&self, m: &Array2<f64>) -> Array2<f64> {
        let mut out = m.clone();
        for mut row in out.rows_mut() {
            for (ch, v) in row.iter_mut().enumerate() {
                *v *= self.std[ch];
            }
        }
        out
    }
}

/// One sinusoidal component of a synthetic dataset, at an exact DFT bin of
/// the full series length.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SineComponent {
    pub bin: usize,
    pub amplitude: f64,
    pub phase: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub len: usize,
    pub channels: usize,
    pub components: Vec<SineComponent>,
    pub noise_sd: f64,
    pub seed: u64,
}

/// Sum of sinusoids at exact DFT bins plus Gaussian noise, deterministic
/// per seed.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    if spec.len == 0 || spec.channels == 0 {
        return Err(Error::InvalidInput("synthetic dataset must be non-empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let n = spec.len;
    let c = spec.channels;
    let mut targets = Array2::zeros((n, c));
    for ch in 0..c {
        for t in 0..n {
            let mut v = 0.0;
            for comp in &spec.components {
                let ang = 2.0 * std::f64::consts::PI * comp.bin as f64 * t as f64 / n as f64
                    + comp.phase;
                v += comp.amplitude * ang.sin();
            }
            targets[[t, ch]] = v;
        }
    }
    if spec.noise_sd > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sd)
            .map_err(|e| Error::InvalidInput(e.to_string()))?;
        for v in targets.iter_mut() {
            *v += normal.sample(&mut rng);
        }
    }
    Ok(Dataset {
        targets,
        aux: Array2::zeros((n, 0)),
        timestamps: (0..n).map(|t| t.to_string()).collect(),
        target_names: (0..c).map(|ch| format!("ch{ch}")).collect(),
        aux_names: vec![],
        frequency: "step".into(),
    })
}
