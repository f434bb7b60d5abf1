//! Experiment orchestration: metrics, synthetic data, the four-method
//! ablation runner, and report assembly.

use std::path::PathBuf;
use std::str::FromStr;

use chrono::{Duration, NaiveDate, NaiveDateTime};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::data::{SeriesDataset, TargetMode};
use crate::encoder::{encode_causal_padded, EncoderConfig};
use crate::ensemble::{partition_examples, run_pipeline, ReportRow, ENCODE_PAD};
use crate::error::{Result, TsvError};
use crate::features::{
    build_forecast_examples, default_lags, default_roll_windows, hybrid_features, ForecastExamples,
    TimeIndex,
};
use crate::heads::{alpha_search, boosted_residual_fit, default_alpha_grid};
use crate::numerics::Tensor;
use crate::objectives::MsmConfig;
use crate::pretrain::{pretrain, PretrainConfig};

/// Mean squared error over all entries.
pub fn mse(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    metric(pred, truth, |e| e * e)
}

/// Mean absolute error over all entries.
pub fn mae(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    metric(pred, truth, f64::abs)
}

fn metric(pred: &Tensor, truth: &Tensor, f: impl Fn(f64) -> f64) -> Result<f64> {
    if pred.shape() != truth.shape() {
        return Err(TsvError::Dimension(format!(
            "metric shapes {:?} vs {:?}",
            pred.shape(),
            truth.shape()
        )));
    }
    if pred.is_empty() {
        return Err(TsvError::Contract("metric over empty tensors".into()));
    }
    let n = pred.len() as f64;
    Ok(pred
        .data()
        .iter()
        .zip(truth.data())
        .map(|(p, t)| f(p - t))
        .sum::<f64>()
        / n)
}

/// Synthetic univariate series: trend plus daily and weekly sinusoids plus
/// Gaussian noise, hourly from a fixed epoch.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub t: usize,
    pub daily_amp: f64,
    pub weekly_amp: f64,
    pub trend: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            t: 2000,
            daily_amp: 1.0,
            weekly_amp: 0.0,
            trend: 0.0,
            noise_sd: 0.0,
            seed: 0,
        }
    }
}

pub fn synth_series(spec: &SynthSpec) -> Result<SeriesDataset> {
    if spec.t < 1 {
        return Err(TsvError::Config("synth series needs T ≥ 1".into()));
    }
    let epoch: NaiveDateTime = NaiveDate::from_ymd_opt(2020, 1, 1)
        .unwrap()
        .and_hms_opt(0, 0, 0)
        .unwrap();
    let timestamps: Vec<NaiveDateTime> = (0..spec.t)
        .map(|i| epoch + Duration::hours(i as i64))
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = Normal::new(0.0, spec.noise_sd.max(0.0)).unwrap();
    let values: Vec<f64> = (0..spec.t)
        .map(|i| {
            let t = i as f64;
            let tau = std::f64::consts::TAU;
            let mut v = spec.trend * t
                + spec.daily_amp * (tau * t / 24.0).sin()
                + spec.weekly_amp * (tau * t / 168.0).sin();
            if spec.noise_sd > 0.0 {
                v += noise.sample(&mut rng);
            }
            v
        })
        .collect();
    Ok(SeriesDataset {
        name: "synth".into(),
        timestamps,
        values: Tensor::new(vec![1, spec.t], values)?,
        feature_names: vec!["OT".into()],
        target_mode: TargetMode::Univariate,
        splits: None,
        norm_stats: None,
    })
}

/// Render a dataset back to the ETT CSV layout (full f64 round-trip
/// precision).
pub fn series_to_csv(ds: &SeriesDataset) -> String {
    let mut out = String::from("date");
    for name in &ds.feature_names {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let t = ds.len();
    for (j, ts) in ds.timestamps.iter().enumerate() {
        out.push_str(&ts.format("%Y-%m-%d %H:%M:%S").to_string());
        for ch in 0..ds.num_features() {
            out.push(',');
            out.push_str(&format!("{}", ds.values.data()[ch * t + j]));
        }
        out.push('\n');
    }
    out
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Baseline,
    Msm,
    Hybrid,
    Ensemble,
    All,
}

impl Method {
    /// Concrete method names to run, in report order.
    pub fn expand(&self) -> Vec<&'static str> {
        match self {
            Method::Baseline => vec!["baseline"],
            Method::Msm => vec!["msm"],
            Method::Hybrid => vec!["hybrid"],
            Method::Ensemble => vec!["ensemble"],
            Method::All => vec!["baseline", "msm", "hybrid", "ensemble"],
        }
    }
}

impl FromStr for Method {
    type Err = TsvError;
    fn from_str(s: &str) -> Result<Method> {
        match s {
            "baseline" => Ok(Method::Baseline),
            "msm" => Ok(Method::Msm),
            "hybrid" => Ok(Method::Hybrid),
            "ensemble" => Ok(Method::Ensemble),
            "all" => Ok(Method::All),
            other => Err(TsvError::Config(format!("unknown method '{other}'"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind")]
pub enum SplitSpec {
    Months { train: u32, val: u32, test: u32 },
    Ratio { train: f64, val: f64 },
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec::Ratio {
            train: 0.6,
            val: 0.2,
        }
    }
}

#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct BoostParams {
    pub n_trees: usize,
    pub depth: usize,
    pub shrinkage: f64,
}

impl Default for BoostParams {
    fn default() -> Self {
        BoostParams {
            n_trees: 100,
            depth: 3,
            shrinkage: 0.1,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    /// Path to an ETT-style CSV; mutually exclusive with `synth`.
    pub dataset: Option<PathBuf>,
    pub synth: Option<SynthSpec>,
    pub mode: TargetMode,
    pub horizons: Vec<usize>,
    pub method: Method,
    pub seeds: Vec<u64>,
    pub split: SplitSpec,
    /// Encoder overrides; `input_dim` is always taken from the data.
    pub encoder: Option<EncoderConfig>,
    pub pretrain: Option<PretrainConfig>,
    /// Reconstruction branch used by the msm method.
    pub msm: Option<MsmConfig>,
    pub boost: BoostParams,
    pub output_dir: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: None,
            synth: Some(SynthSpec::default()),
            mode: TargetMode::Univariate,
            horizons: vec![24],
            method: Method::All,
            seeds: vec![0],
            split: SplitSpec::default(),
            encoder: None,
            pretrain: None,
            msm: None,
            boost: BoostParams::default(),
            output_dir: None,
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizons.is_empty() || self.horizons.iter().any(|&h| h < 1) {
            return Err(TsvError::Config(
                "horizons must be nonempty with every h ≥ 1".into(),
            ));
        }
        if self.seeds.is_empty() {
            return Err(TsvError::Config("seeds must be nonempty".into()));
        }
        match (&self.dataset, &self.synth) {
            (Some(_), Some(_)) => Err(TsvError::Config(
                "give either a dataset path or a synth spec, not both".into(),
            )),
            (None, None) => Err(TsvError::Config(
                "either a dataset path or a synth spec is required".into(),
            )),
            _ => Ok(()),
        }
    }

    pub fn load_dataset(&self) -> Result<SeriesDataset> {
        let ds = match (&self.dataset, &self.synth) {
            (Some(path), None) => SeriesDataset::load_csv(path)?,
            (None, Some(spec)) => synth_series(spec)?,
            _ => return Err(TsvError::Config("exactly one data source required".into())),
        };
        let ds = ds.with_target_mode(self.mode)?;
        let ds = match self.split {
            SplitSpec::Months { train, val, test } => ds.split_by_months(train, val, test)?,
            SplitSpec::Ratio { train, val } => ds.split_by_ratio(train, val)?,
        };
        ds.normalize()
    }

    pub fn resolved_encoder(&self, input_dim: usize) -> EncoderConfig {
        match &self.encoder {
            Some(cfg) => EncoderConfig {
                input_dim,
                ..cfg.clone()
            },
            None => EncoderConfig::new(input_dim),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct MethodAverage {
    pub method: String,
    pub mse: f64,
    pub mae: f64,
}

/// A full evaluation report. All metrics are in normalized (z-scored)
/// units, matching how the dataset is prepared.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Report {
    pub dataset: String,
    /// Metrics are computed in normalized space, not raw units.
    pub normalized_metrics: bool,
    pub content_hash: String,
    pub config: serde_json::Value,
    pub rows: Vec<ReportRow>,
    pub averages: Vec<MethodAverage>,
}

impl Report {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Report> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn to_csv(&self) -> String {
        let fmt_opt = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        let mut out = format!(
            "# metrics in normalized units; content_hash={}\n\
             dataset,horizon,method,mse,mae,w1,w2,alpha_a,alpha_b\n",
            self.content_hash
        );
        for r in &self.rows {
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{},{}\n",
                r.dataset,
                r.horizon,
                r.method,
                r.mse,
                r.mae,
                fmt_opt(r.w1),
                fmt_opt(r.w2),
                fmt_opt(r.alpha_a),
                fmt_opt(r.alpha_b),
            ));
        }
        for a in &self.averages {
            out.push_str(&format!(
                "{},average,{},{},{},,,,\n",
                self.dataset, a.method, a.mse, a.mae
            ));
        }
        out
    }
}

fn content_hash(ds: &SeriesDataset, config: &serde_json::Value) -> String {
    let mut hasher = Sha256::new();
    hasher.update(ds.name.as_bytes());
    for v in ds.values.data() {
        hasher.update(v.to_le_bytes());
    }
    hasher.update(config.to_string().as_bytes());
    format!("{:x}", hasher.finalize())
}

/// Model A alone (ridge over representations, α searched on validation) for
/// every horizon; used by the baseline and msm methods.
fn model_a_rows(
    ds: &SeriesDataset,
    reps: &Tensor,
    targets: &Tensor,
    horizons: &[usize],
    method: &str,
) -> Result<Vec<ReportRow>> {
    let train_end = ds.train_end()?;
    let val_end = ds.val_end()?;
    let grid = default_alpha_grid();
    let mut rows = Vec::new();
    for &h in horizons {
        let ex = build_forecast_examples(reps, targets, h, None)?;
        let s = partition_examples(&ex, h, train_end, val_end)?;
        let (alpha, head) = alpha_search(&s.x_train, &s.y_train, &s.x_val, &s.y_val, &grid)?;
        let pred = head.predict(&s.x_test)?;
        rows.push(ReportRow {
            dataset: ds.name.clone(),
            horizon: h,
            method: method.into(),
            mse: mse(&pred, &s.y_test)?,
            mae: mae(&pred, &s.y_test)?,
            w1: None,
            w2: None,
            alpha_a: Some(alpha),
            alpha_b: None,
        });
    }
    Ok(rows)
}

/// Linear + boosted-residual hybrid on explicit univariate features; no
/// pretraining involved.
fn hybrid_rows(
    ds: &SeriesDataset,
    horizons: &[usize],
    boost: &BoostParams,
) -> Result<Vec<ReportRow>> {
    let idx = ds.target_index()?;
    let t = ds.len();
    let series = Tensor::new(vec![1, t], ds.values.data()[idx * t..(idx + 1) * t].to_vec())?;
    let time = TimeIndex::from_timestamps(&ds.timestamps);
    let stride = ds.stride_hours();
    let hf = hybrid_features(
        &series,
        &time,
        &default_lags(stride),
        &default_roll_windows(stride),
        168.0 / stride,
    )?;
    let train_end = ds.train_end()?;
    let val_end = ds.val_end()?;
    let grid = default_alpha_grid();
    let mut rows = Vec::new();
    for &h in horizons {
        // valid anchors with a full future window
        let anchors: Vec<usize> = (0..t.saturating_sub(h)).filter(|&a| hf.valid[a]).collect();
        if anchors.is_empty() {
            return Err(TsvError::Data(format!(
                "hybrid: no valid examples at horizon {h}"
            )));
        }
        let p = hf.x.shape()[1];
        let mut x = Tensor::zeros(&[anchors.len(), p]);
        let mut y = Tensor::zeros(&[anchors.len(), h]);
        for (row, &a) in anchors.iter().enumerate() {
            for j in 0..p {
                x.set2(row, j, hf.x.at2(a, j));
            }
            for step in 1..=h {
                y.set2(row, step - 1, series.data()[a + step]);
            }
        }
        let ex = ForecastExamples {
            x,
            y,
            t_index: anchors,
        };
        let s = partition_examples(&ex, h, train_end, val_end)?;
        let (alpha, head) = alpha_search(&s.x_train, &s.y_train, &s.x_val, &s.y_val, &grid)?;
        // per-output-column boosting on the stage-1 residual
        let n_test = s.x_test.shape()[0];
        let mut pred = Tensor::zeros(&[n_test, h]);
        for col in 0..h {
            let target: Vec<f64> = (0..s.x_train.shape()[0])
                .map(|i| s.y_train.at2(i, col))
                .collect();
            let model = boosted_residual_fit(
                &s.x_train,
                &target,
                head.select_output(col),
                boost.n_trees,
                boost.depth,
                boost.shrinkage,
            )?;
            for (i, v) in model.predict(&s.x_test)?.into_iter().enumerate() {
                pred.set2(i, col, v);
            }
        }
        rows.push(ReportRow {
            dataset: ds.name.clone(),
            horizon: h,
            method: "hybrid".into(),
            mse: mse(&pred, &s.y_test)?,
            mae: mae(&pred, &s.y_test)?,
            w1: None,
            w2: None,
            alpha_a: Some(alpha),
            alpha_b: None,
        });
    }
    Ok(rows)
}

fn run_methods_for_seed(
    cfg: &ExperimentConfig,
    ds: &SeriesDataset,
    methods: &[&str],
    seed: u64,
) -> Result<Vec<ReportRow>> {
    let enc_cfg = cfg.resolved_encoder(ds.input_values()?.shape()[0]);
    let base_pre = PretrainConfig {
        seed,
        msm: None,
        ..cfg.pretrain.clone().unwrap_or_default()
    };
    let mut rows = Vec::new();

    // baseline and ensemble share one pretrained encoder
    let needs_base = methods.contains(&"baseline") || methods.contains(&"ensemble");
    let base = if needs_base {
        Some(pretrain(ds, &enc_cfg, &base_pre)?)
    } else {
        None
    };
    let targets = ds.target_values()?;
    for &method in methods {
        match method {
            "baseline" => {
                let params = &base.as_ref().unwrap().params;
                let reps = encode_causal_padded(&ds.input_values()?, params, &enc_cfg, ENCODE_PAD)?;
                rows.extend(model_a_rows(ds, &reps, &targets, &cfg.horizons, "baseline")?);
            }
            "ensemble" => {
                let params = &base.as_ref().unwrap().params;
                let out = run_pipeline(ds, &cfg.horizons, &enc_cfg, &base_pre, Some(params))?;
                rows.extend(out.rows);
            }
            "msm" => {
                let msm = cfg
                    .msm
                    .clone()
                    .unwrap_or_else(|| MsmConfig::with_input_dim(enc_cfg.input_dim, enc_cfg.output_dim));
                let pre = PretrainConfig {
                    msm: Some(msm),
                    ..base_pre.clone()
                };
                let out = pretrain(ds, &enc_cfg, &pre)?;
                let reps =
                    encode_causal_padded(&ds.input_values()?, &out.params, &enc_cfg, ENCODE_PAD)?;
                rows.extend(model_a_rows(ds, &reps, &targets, &cfg.horizons, "msm")?);
            }
            "hybrid" => rows.extend(hybrid_rows(ds, &cfg.horizons, &cfg.boost)?),
            other => return Err(TsvError::Config(format!("unknown method '{other}'"))),
        }
    }
    Ok(rows)
}

/// Run the configured methods over every seed, averaging metrics across
/// seeds per (horizon, method) row, and append per-method averages.
pub fn run_ablation(cfg: &ExperimentConfig) -> Result<Report> {
    cfg.validate()?;
    let ds = cfg.load_dataset()?;
    let methods = cfg.method.expand();
    let mut per_seed: Vec<Vec<ReportRow>> = Vec::new();
    for &seed in &cfg.seeds {
        per_seed.push(run_methods_for_seed(cfg, &ds, &methods, seed)?);
    }
    // average across seeds; row layout is identical per seed
    let n_seeds = per_seed.len() as f64;
    let mut rows: Vec<ReportRow> = per_seed[0].clone();
    for row in rows.iter_mut() {
        row.mse /= n_seeds;
        row.mae /= n_seeds;
    }
    for seed_rows in &per_seed[1..] {
        for (acc, r) in rows.iter_mut().zip(seed_rows) {
            acc.mse += r.mse / n_seeds;
            acc.mae += r.mae / n_seeds;
            // selection fields only survive when every seed agrees
            if acc.w1 != r.w1 || acc.w2 != r.w2 {
                acc.w1 = None;
                acc.w2 = None;
            }
            if acc.alpha_a != r.alpha_a {
                acc.alpha_a = None;
            }
            if acc.alpha_b != r.alpha_b {
                acc.alpha_b = None;
            }
        }
    }
    let mut averages = Vec::new();
    for &method in &methods {
        let selected: Vec<&ReportRow> = rows.iter().filter(|r| r.method == method).collect();
        let n = selected.len() as f64;
        averages.push(MethodAverage {
            method: method.into(),
            mse: selected.iter().map(|r| r.mse).sum::<f64>() / n,
            mae: selected.iter().map(|r| r.mae).sum::<f64>() / n,
        });
    }
    let config = serde_json::to_value(cfg)?;
    Ok(Report {
        dataset: ds.name.clone(),
        normalized_metrics: true,
        content_hash: content_hash(&ds, &config),
        config,
        rows,
        averages,
    })
}
