//! Run configuration files: model keys, data source, output directory and
//! training-loop options, plus presets for the common benchmark datasets.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};

use crate::data::{chronological_split, load_csv, make_windows, synth_leadlag, LeadLagSpec, SeriesFrame, SplitSpec, Standardizer, WindowSet};
use crate::decompose::ResidualMode;
use crate::error::{Error, Result};
use crate::ja::{AttentionMode, OffsetMode, Sampler, SamplingMode};
use crate::model::ModelConfig;
use crate::train::TrainOptions;

/// Keys that must be present in the file or supplied by a dataset preset.
pub const REQUIRED_KEYS: [&str; 12] = [
    "num_blocks",
    "patch",
    "stride",
    "model_dim",
    "ffn_dim",
    "learning_rate",
    "per_delta_t",
    "per_delta_v",
    "num_rq_self",
    "num_rq",
    "lookback",
    "horizon",
];

/// Model keys with a fallback value.
pub const OPTIONAL_KEYS: [&str; 10] = [
    "ma_kernel",
    "batch_size",
    "attention_mode",
    "offset_mode",
    "sampler_self",
    "sampler_cross",
    "sampling_mode",
    "residual_mode",
    "soft_scores",
    "seed",
];

const OTHER_KEYS: [&str; 3] = ["data", "output_dir", "train"];

/// Synthetic lead-lag source as written in config files.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSource {
    pub v: usize,
    pub len: usize,
    pub lag: usize,
    pub coupling: f64,
    pub noise: f64,
    pub seed: u64,
}

impl SynthSource {
    pub fn spec(&self) -> LeadLagSpec {
        LeadLagSpec {
            variates: self.v,
            len: self.len,
            lag: self.lag,
            coupling: self.coupling,
            noise_std: self.noise,
            seed: self.seed,
        }
    }
}

fn yes() -> bool {
    true
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub csv_path: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub synth: Option<SynthSource>,
    /// `[train, val, test]` lengths in time points.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<[usize; 3]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset_name: Option<String>,
    /// Z-score every variate with train-segment statistics before windowing.
    #[serde(default = "yes")]
    pub standardize: bool,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv_path: None,
            synth: None,
            split: None,
            dataset_name: None,
            standardize: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub data: DataConfig,
    pub output_dir: PathBuf,
    pub train: TrainOptions,
}

/// Published hyperparameters and split lengths for a known dataset.
pub struct Preset {
    pub name: &'static str,
    pub split: SplitSpec,
    pub variates: usize,
    pub model: Value,
}

pub const DATASETS: [&str; 8] = ["ETTh1", "ETTh2", "ETTm1", "ETTm2", "Exchange", "Weather", "ECL", "Traffic"];

pub fn preset(name: &str) -> Option<Preset> {
    // blocks, patch, stride, dim, ffn, lr, per_t, per_v, k_self, k_cross
    type Row = (usize, usize, usize, usize, usize, f64, f64, f64, usize, usize);
    let (split, variates, row): ((usize, usize, usize), usize, Row) = match name {
        "ETTh1" => ((8545, 2881, 2881), 7, (2, 8, 4, 128, 1024, 0.0001, 0.2, 0.2, 40, 20)),
        "ETTh2" => ((8545, 2881, 2881), 7, (2, 8, 4, 128, 256, 0.0001, 0.6, 0.4, 20, 20)),
        "ETTm1" => ((34465, 11521, 11521), 7, (2, 8, 4, 128, 1024, 0.0001, 0.6, 0.2, 40, 40)),
        "ETTm2" => ((34465, 11521, 11521), 7, (2, 8, 4, 128, 256, 0.0001, 0.2, 0.2, 20, 40)),
        "Exchange" => ((5120, 665, 1422), 8, (2, 8, 4, 128, 256, 0.0001, 0.2, 0.2, 40, 40)),
        "Weather" => ((36792, 5271, 10540), 21, (3, 16, 8, 512, 1024, 0.0001, 0.4, 0.8, 40, 40)),
        "ECL" => ((18317, 2633, 5261), 321, (3, 16, 8, 512, 512, 0.0005, 0.2, 0.2, 40, 40)),
        "Traffic" => ((12185, 1757, 3509), 862, (4, 16, 8, 128, 512, 0.001, 0.1, 0.2, 40, 40)),
        _ => return None,
    };
    let (blocks, patch, stride, dim, ffn, lr, pt, pv, ks, kc) = row;
    let canonical = DATASETS.iter().find(|&&d| d == name)?;
    Some(Preset {
        name: canonical,
        split: SplitSpec::new(split.0, split.1, split.2),
        variates,
        model: json!({
            "num_blocks": blocks,
            "patch": patch,
            "stride": stride,
            "model_dim": dim,
            "ffn_dim": ffn,
            "learning_rate": lr,
            "per_delta_t": pt,
            "per_delta_v": pv,
            "num_rq_self": ks,
            "num_rq": kc,
            "lookback": 96,
            "horizon": 96,
            "ma_kernel": 25,
            "batch_size": 32,
        }),
    })
}

fn defaults() -> Value {
    let d = ModelConfig::default();
    json!({
        "ma_kernel": d.ma_kernel,
        "batch_size": d.batch_size,
        "attention_mode": d.attention_mode,
        "offset_mode": d.offset_mode,
        "sampler_self": d.sampler_self,
        "sampler_cross": d.sampler_cross,
        "sampling_mode": d.sampling_mode,
        "residual_mode": d.residual_mode,
        "soft_scores": d.soft_scores,
        "seed": d.seed,
    })
}

/// Deserializes one model key on its own so type errors name the key.
fn check_key(key: &str, value: &Value) -> Result<()> {
    fn as_<T: serde::de::DeserializeOwned>(key: &str, v: &Value) -> Result<()> {
        serde_json::from_value::<T>(v.clone())
            .map(|_| ())
            .map_err(|e| Error::Config(format!("invalid value for key `{key}`: {e}")))
    }
    match key {
        "learning_rate" | "per_delta_t" | "per_delta_v" => as_::<f64>(key, value),
        "seed" => as_::<u64>(key, value),
        "soft_scores" => as_::<bool>(key, value),
        "attention_mode" => as_::<AttentionMode>(key, value),
        "offset_mode" => as_::<OffsetMode>(key, value),
        "sampler_self" | "sampler_cross" => as_::<Sampler>(key, value),
        "sampling_mode" => as_::<SamplingMode>(key, value),
        "residual_mode" => as_::<ResidualMode>(key, value),
        _ => as_::<usize>(key, value),
    }
}

/// Parses a config document. Unknown keys are rejected; a known
/// `dataset_name` supplies defaults that explicit keys override.
pub fn parse_run_config(text: &str) -> Result<RunConfig> {
    let doc: Value = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    let Value::Object(top) = doc else {
        return Err(Error::Config("top level must be a JSON object".into()));
    };
    for key in top.keys() {
        let k = key.as_str();
        if !REQUIRED_KEYS.contains(&k) && !OPTIONAL_KEYS.contains(&k) && !OTHER_KEYS.contains(&k) {
            return Err(Error::Config(format!("unknown key `{key}`")));
        }
    }
    let data: DataConfig = match top.get("data") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("in `data`: {e}")))?,
        None => return Err(Error::Config("missing required key `data`".into())),
    };
    let train: TrainOptions = match top.get("train") {
        Some(v) => serde_json::from_value(v.clone()).map_err(|e| Error::Config(format!("in `train`: {e}")))?,
        None => TrainOptions::default(),
    };
    let output_dir = match top.get("output_dir") {
        Some(Value::String(s)) => PathBuf::from(s),
        Some(_) => return Err(Error::Config("invalid value for key `output_dir`: expected a string".into())),
        None => PathBuf::from("runs"),
    };

    let mut merged: Map<String, Value> = defaults().as_object().cloned().unwrap_or_default();
    if let Some(p) = data.dataset_name.as_deref().and_then(preset) {
        merged.extend(p.model.as_object().cloned().unwrap_or_default());
    }
    for (k, v) in &top {
        if !OTHER_KEYS.contains(&k.as_str()) {
            check_key(k, v)?;
            merged.insert(k.clone(), v.clone());
        }
    }
    for key in REQUIRED_KEYS {
        if !merged.contains_key(key) {
            return Err(Error::Config(format!("missing required key `{key}`")));
        }
    }
    let model: ModelConfig =
        serde_json::from_value(Value::Object(merged)).map_err(|e| Error::Config(e.to_string()))?;
    model.validate()?;
    if data.csv_path.is_some() == data.synth.is_some() {
        return Err(Error::Config("`data` needs exactly one of `csv_path` or `synth`".into()));
    }
    Ok(RunConfig {
        model,
        data,
        output_dir,
        train,
    })
}

pub fn load_run_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_run_config(&text)
}

impl RunConfig {
    /// Flat JSON form that [`parse_run_config`] reads back unchanged.
    pub fn to_json(&self) -> Value {
        let mut obj = serde_json::to_value(&self.model)
            .ok()
            .and_then(|v| v.as_object().cloned())
            .unwrap_or_default();
        obj.insert("data".into(), serde_json::to_value(&self.data).unwrap_or(Value::Null));
        obj.insert("output_dir".into(), Value::String(self.output_dir.display().to_string()));
        obj.insert("train".into(), serde_json::to_value(&self.train).unwrap_or(Value::Null));
        Value::Object(obj)
    }

    pub fn dataset_label(&self) -> String {
        self.data.dataset_name.clone().unwrap_or_else(|| {
            if self.data.synth.is_some() {
                "synthetic".into()
            } else {
                "custom".into()
            }
        })
    }
}

/// The three window sets of a run plus the scaler that produced them.
pub struct Splits {
    pub train: WindowSet,
    pub val: WindowSet,
    pub test: WindowSet,
    pub scaler: Option<Standardizer>,
    pub variate_names: Vec<String>,
}

pub fn load_frame(data: &DataConfig) -> Result<SeriesFrame> {
    match (&data.csv_path, &data.synth) {
        (Some(p), None) => load_csv(p),
        (None, Some(s)) => synth_leadlag(&s.spec()),
        _ => Err(Error::Config("`data` needs exactly one of `csv_path` or `synth`".into())),
    }
}

/// Split lengths: explicit, then preset, then 70/10/20 of the series.
pub fn split_spec(data: &DataConfig, total: usize) -> SplitSpec {
    if let Some([a, b, c]) = data.split {
        return SplitSpec::new(a, b, c);
    }
    if let Some(p) = data.dataset_name.as_deref().and_then(preset) {
        return p.split;
    }
    let train = total * 7 / 10;
    let test = total * 2 / 10;
    SplitSpec::new(train, total - train - test, test)
}

pub fn load_splits(data: &DataConfig, lookback: usize, horizon: usize) -> Result<Splits> {
    let frame = load_frame(data)?;
    let spec = split_spec(data, frame.len());
    let (tr, va, te) = chronological_split(&frame, spec)?;
    let scaler = data.standardize.then(|| Standardizer::fit(&tr));
    let scale = |f: SeriesFrame| match &scaler {
        Some(s) => s.apply(&f),
        None => f,
    };
    Ok(Splits {
        train: make_windows(&scale(tr), lookback, horizon)?,
        val: make_windows(&scale(va), lookback, horizon)?,
        test: make_windows(&scale(te), lookback, horizon)?,
        variate_names: frame.variate_names().to_vec(),
        scaler,
    })
}
