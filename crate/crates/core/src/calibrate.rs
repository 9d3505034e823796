//! Phase-3 semantic calibration: deterministic prompt construction, a
//! chat-completion client with retries, strict parsing of the returned
//! numeric list, and a total fallback to the uncalibrated forecast.

use ndarray::Array2;
use regex::Regex;
use serde::{Deserialize, Serialize};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::spectral::RealSignal;
use crate::util::sha256_hex;

/// Auxiliary variables and descriptive context for one window.
#[derive(Debug, Clone)]
pub struct AuxiliaryContext {
    /// `(H+L) x D` matrix; D may be zero.
    pub matrix: Array2<f64>,
    pub names: Vec<String>,
    pub descriptor: String,
    pub timestamps: Vec<String>,
}

impl AuxiliaryContext {
    pub fn empty(history_len: usize, horizon: usize) -> Self {
        Self {
            matrix: Array2::zeros((history_len + horizon, 0)),
            names: vec![],
            descriptor: "Generic time series forecasting task.".into(),
            timestamps: (0..history_len + horizon).map(|t| t.to_string()).collect(),
        }
    }

    fn validate(&self, history_len: usize, horizon: usize) -> Result<()> {
        if self.matrix.nrows() != history_len + horizon {
            return Err(Error::InvalidInput(format!(
                "auxiliary matrix has {} rows, expected H+L = {}",
                self.matrix.nrows(),
                history_len + horizon
            )));
        }
        if self.names.len() != self.matrix.ncols() {
            return Err(Error::InvalidInput(
                "auxiliary names length must equal column count".into(),
            ));
        }
        Ok(())
    }
}

/// A rendered prompt, a pure function of its inputs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CalibrationPrompt {
    pub text: String,
    pub expected_len: usize,
    pub target_channel: usize,
    /// Digests of (low token, residual token, auxiliary matrix).
    pub provenance: (String, String, String),
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LlmEndpointConfig {
    pub base_url: String,
    pub model: String,
    /// Environment variable holding the bearer token, if auth is required.
    #[serde(default)]
    pub auth_env: Option<String>,
    pub timeout_secs: u64,
    pub max_retries: u32,
    #[serde(default)]
    pub temperature: f64,
}

impl Default for LlmEndpointConfig {
    fn default() -> Self {
        Self {
            base_url: "http://127.0.0.1:8080/v1/chat/completions".into(),
            model: "mock".into(),
            auth_env: None,
            timeout_secs: 30,
            max_retries: 2,
            temperature: 0.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForecastSource {
    Llm,
    Fallback,
}

impl std::fmt::Display for ForecastSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            ForecastSource::Llm => write!(f, "llm"),
            ForecastSource::Fallback => write!(f, "fallback"),
        }
    }
}

fn fmt_num(v: f64) -> String {
    format!("{v:.4}")
}

/// Render an f64 slice as the bracketed list syntax the parser accepts.
pub fn render_list(values: &[f64]) -> String {
    let items: Vec<String> = values.iter().map(|v| fmt_num(*v)).collect();
    format!("[{}]", items.join(", "))
}

fn linear_trend_slope(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    if values.len() < 2 {
        return 0.0;
    }
    let t_mean = (n - 1.0) / 2.0;
    let v_mean = values.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut den = 0.0;
    for (t, v) in values.iter().enumerate() {
        let dt = t as f64 - t_mean;
        num += dt * (v - v_mean);
        den += dt * dt;
    }
    num / den
}

/// Assemble the calibration prompt for one target channel. Byte-identical
/// output for identical inputs.
pub fn build_prompt(
    low: &RealSignal,
    res: &RealSignal,
    history: &RealSignal,
    aux: &AuxiliaryContext,
    target_channel: usize,
) -> Result<CalibrationPrompt> {
    if low.len() != res.len() || low.channels() != res.channels() {
        return Err(Error::InvalidInput("low and residual tokens must share a shape".into()));
    }
    if target_channel >= low.channels() {
        return Err(Error::InvalidInput(format!(
            "target channel {target_channel} out of range for {} channels",
            low.channels()
        )));
    }
    let horizon = low.len();
    aux.validate(history.len(), horizon)?;

    let hist = history.channel(target_channel.min(history.channels() - 1));
    let low_ch = low.channel(target_channel);
    let res_ch = res.channel(target_channel);
    let combined: Vec<f64> = low_ch.iter().zip(&res_ch).map(|(a, b)| a + b).collect();

    let min = hist.iter().cloned().fold(f64::INFINITY, f64::min);
    let max = hist.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mean = hist.iter().sum::<f64>() / hist.len() as f64;
    let last = *hist.last().unwrap();
    let slope = linear_trend_slope(&hist);

    let mut text = String::new();
    text.push_str("## Task\n");
    text.push_str(&aux.descriptor);
    text.push('\n');
    text.push_str(&format!("Forecast horizon: {horizon} steps.\n\n"));

    text.push_str("## Input statistics\n");
    text.push_str(&format!("min: {}\n", fmt_num(min)));
    text.push_str(&format!("max: {}\n", fmt_num(max)));
    text.push_str(&format!("mean: {}\n", fmt_num(mean)));
    text.push_str(&format!("last: {}\n", fmt_num(last)));
    text.push_str(&format!("trend_slope: {}\n\n", fmt_num(slope)));

    text.push_str("## Low-frequency forecast\n");
    text.push_str(&render_list(&low_ch));
    text.push_str("\n\n## High-frequency residual forecast\n");
    text.push_str(&render_list(&res_ch));
    text.push_str("\n\n## Combined preliminary forecast\n");
    text.push_str(&render_list(&combined));
    text.push_str("\n\n## Auxiliary variables (forecast horizon)\n");
    if aux.names.is_empty() {
        text.push_str("(none)\n");
    } else {
        let h = history.len();
        for (d, name) in aux.names.iter().enumerate() {
            let col: Vec<f64> = (0..horizon).map(|t| aux.matrix[[h + t, d]]).collect();
            text.push_str(&format!("{name}: {}\n", render_list(&col)));
        }
    }
    text.push_str(&format!(
        "\n## Instruction\nOutput exactly {horizon} numbers as a bracketed comma-separated list and nothing else.\n"
    ));

    let digest = |vals: &[f64]| sha256_hex(render_list(vals).as_bytes());
    let aux_flat: Vec<f64> = aux.matrix.iter().copied().collect();
    Ok(CalibrationPrompt {
        text,
        expected_len: horizon,
        target_channel,
        provenance: (digest(&low_ch), digest(&res_ch), digest(&aux_flat)),
    })
}

/// Extract the first bracketed comma-separated list of numbers from the
/// response. The list must have exactly `expected_len` finite entries.
pub fn parse_forecast(response_text: &str, expected_len: usize) -> Result<RealSignal> {
    let list_re = Regex::new(r"\[([^\[\]]*)\]").expect("static regex");
    for caps in list_re.captures_iter(response_text) {
        let inner = caps.get(1).map(|m| m.as_str()).unwrap_or("");
        let items: Vec<&str> = inner.split(',').map(|s| s.trim()).collect();
        if items.is_empty() || items.iter().any(|s| s.is_empty()) {
            continue;
        }
        let parsed: Option<Vec<f64>> = items.iter().map(|s| s.parse::<f64>().ok()).collect();
        let Some(values) = parsed else { continue };
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::ParseFailure {
                reason: "non-finite value in forecast list".into(),
                response: response_text.to_string(),
            });
        }
        if values.len() != expected_len {
            return Err(Error::LengthMismatch {
                found: values.len(),
                expected: expected_len,
                response: response_text.to_string(),
            });
        }
        return RealSignal::from_slice(&values);
    }
    Err(Error::ParseFailure {
        reason: "no bracketed numeric list found".into(),
        response: response_text.to_string(),
    })
}

const SYSTEM_PREAMBLE: &str = "You are a forecasting assistant. You refine preliminary numeric \
forecasts using the provided context. Respond with the forecast only, as a bracketed \
comma-separated list of numbers.";

/// One chat-completion round trip. Transport and parse failures are
/// reported as `ParseFailure`-style errors for the caller to absorb.
fn query_endpoint(cfg: &LlmEndpointConfig, token: Option<&str>, prompt: &str) -> Result<String> {
    let body = serde_json::json!({
        "model": cfg.model,
        "messages": [
            {"role": "system", "content": SYSTEM_PREAMBLE},
            {"role": "user", "content": prompt},
        ],
        "temperature": cfg.temperature,
    });
    let mut req = ureq::post(&cfg.base_url).timeout(Duration::from_secs(cfg.timeout_secs));
    if let Some(t) = token {
        req = req.set("Authorization", &format!("Bearer {t}"));
    }
    let resp = req.send_json(body).map_err(|e| Error::ParseFailure {
        reason: format!("transport error: {e}"),
        response: String::new(),
    })?;
    let doc: serde_json::Value = resp.into_json().map_err(|e| Error::ParseFailure {
        reason: format!("invalid response body: {e}"),
        response: String::new(),
    })?;
    doc.pointer("/choices/0/message/content")
        .and_then(|v| v.as_str())
        .map(|s| s.to_string())
        .ok_or_else(|| Error::ParseFailure {
            reason: "response has no choices[0].message.content".into(),
            response: doc.to_string(),
        })
}

fn validate_endpoint(cfg: &LlmEndpointConfig) -> Result<Option<String>> {
    if cfg.timeout_secs == 0 {
        return Err(Error::EndpointConfig("timeout must be > 0".into()));
    }
    if !(cfg.base_url.starts_with("http://") || cfg.base_url.starts_with("https://")) {
        return Err(Error::EndpointConfig(format!("bad URL '{}'", cfg.base_url)));
    }
    match &cfg.auth_env {
        Some(var) => std::env::var(var).map(Some).map_err(|_| {
            Error::EndpointConfig(format!("auth environment variable '{var}' is not set"))
        }),
        None => Ok(None),
    }
}

/// Calibrate one channel's forecast through the endpoint. Endpoint
/// misbehavior of any kind falls back to low + residual; only
/// configuration problems surface as errors, before any network call.
pub fn calibrate(
    low: &RealSignal,
    res: &RealSignal,
    history: &RealSignal,
    aux: &AuxiliaryContext,
    target_channel: usize,
    cfg: &LlmEndpointConfig,
) -> Result<(RealSignal, ForecastSource)> {
    let token = validate_endpoint(cfg)?;
    let prompt = build_prompt(low, res, history, aux, target_channel)?;
    let fallback = || -> Result<RealSignal> {
        let combined: Vec<f64> = low
            .channel(target_channel)
            .iter()
            .zip(res.channel(target_channel))
            .map(|(a, b)| a + b)
            .collect();
        RealSignal::from_slice(&combined)
    };
    for _attempt in 0..=cfg.max_retries {
        match query_endpoint(cfg, token.as_deref(), &prompt.text) {
            Ok(text) => match parse_forecast(&text, prompt.expected_len) {
                Ok(forecast) => return Ok((forecast, ForecastSource::Llm)),
                Err(_) => continue,
            },
            Err(_) => continue,
        }
    }
    Ok((fallback()?, ForecastSource::Fallback))
}
