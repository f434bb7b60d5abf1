//! Dataset ingestion and preparation: ETT-style CSV parsing, chronological
//! month or ratio splits, and train-statistics z-score normalization.

use std::fs;
use std::path::Path;

use chrono::{Months, NaiveDateTime};
use serde::{Deserialize, Serialize};

use crate::error::{Result, TsvError};
use crate::numerics::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetMode {
    /// Target and input are the "OT" column only.
    Univariate,
    /// All columns in and out.
    Multivariate,
}

#[derive(Clone, Debug)]
pub struct SeriesDataset {
    pub name: String,
    pub timestamps: Vec<NaiveDateTime>,
    /// [D × T], column-major in time.
    pub values: Tensor,
    pub feature_names: Vec<String>,
    pub target_mode: TargetMode,
    /// (train_end, val_end) indices; rows [0, train_end) are training.
    pub splits: Option<(usize, usize)>,
    /// Per-feature (mean, std) computed from the train split.
    pub norm_stats: Option<Vec<(f64, f64)>>,
}

const DATE_FORMATS: [&str; 3] = ["%Y-%m-%d %H:%M:%S", "%Y-%m-%d %H:%M", "%Y/%m/%d %H:%M"];

fn parse_timestamp(s: &str, row: usize) -> Result<NaiveDateTime> {
    for fmt in DATE_FORMATS {
        if let Ok(ts) = NaiveDateTime::parse_from_str(s.trim(), fmt) {
            return Ok(ts);
        }
    }
    Err(TsvError::Data(format!(
        "row {row}: unparseable timestamp '{s}'"
    )))
}

impl SeriesDataset {
    /// Parse an ETT-style CSV: header with a leading date column, numeric
    /// columns thereafter. Rejects non-monotone timestamps and irregular
    /// strides.
    pub fn load_csv(path: &Path) -> Result<SeriesDataset> {
        let text = fs::read_to_string(path)?;
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_else(|| "dataset".to_string());
        Self::parse_csv(&text, &name)
    }

    pub fn parse_csv(text: &str, name: &str) -> Result<SeriesDataset> {
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines
            .next()
            .ok_or_else(|| TsvError::Data("empty csv".into()))?;
        let cols: Vec<&str> = header.split(',').map(str::trim).collect();
        if cols.len() < 2 {
            return Err(TsvError::Data(
                "expected a date column plus ≥ 1 numeric column".into(),
            ));
        }
        let feature_names: Vec<String> = cols[1..].iter().map(|s| s.to_string()).collect();
        let d = feature_names.len();

        let mut timestamps = Vec::new();
        let mut columns: Vec<Vec<f64>> = vec![Vec::new(); d];
        for (line_no, line) in lines {
            let row = line_no + 1; // 1-based, matching editors
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != d + 1 {
                return Err(TsvError::Data(format!(
                    "row {row}: expected {} fields, got {}",
                    d + 1,
                    fields.len()
                )));
            }
            let ts = parse_timestamp(fields[0], row)?;
            if let Some(prev) = timestamps.last() {
                if ts <= *prev {
                    return Err(TsvError::Data(format!(
                        "row {row}: timestamps not strictly increasing ({prev} then {ts})"
                    )));
                }
            }
            timestamps.push(ts);
            for (ci, field) in fields[1..].iter().enumerate() {
                let v: f64 = field.trim().parse().map_err(|_| {
                    TsvError::Data(format!(
                        "row {row}, column '{}': unparseable value '{}'",
                        feature_names[ci],
                        field.trim()
                    ))
                })?;
                columns[ci].push(v);
            }
        }
        let t = timestamps.len();
        if t < 2 {
            return Err(TsvError::Data("need at least 2 rows".into()));
        }
        let stride = timestamps[1] - timestamps[0];
        for (i, w) in timestamps.windows(2).enumerate() {
            if w[1] - w[0] != stride {
                return Err(TsvError::Data(format!(
                    "row {}: irregular stride ({:?} vs {:?})",
                    i + 3,
                    w[1] - w[0],
                    stride
                )));
            }
        }
        let mut data = Vec::with_capacity(d * t);
        for col in &columns {
            data.extend_from_slice(col);
        }
        Ok(SeriesDataset {
            name: name.to_string(),
            timestamps,
            values: Tensor::new(vec![d, t], data)?,
            feature_names,
            target_mode: TargetMode::Multivariate,
            splits: None,
            norm_stats: None,
        })
    }

    pub fn num_features(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn with_target_mode(mut self, mode: TargetMode) -> Result<Self> {
        if mode == TargetMode::Univariate {
            self.target_index()?;
        }
        self.target_mode = mode;
        Ok(self)
    }

    /// Index of the "OT" column for univariate mode.
    pub fn target_index(&self) -> Result<usize> {
        self.feature_names
            .iter()
            .position(|n| n == "OT")
            .ok_or_else(|| TsvError::Config("univariate mode requires an 'OT' column".into()))
    }

    pub fn train_end(&self) -> Result<usize> {
        Ok(self
            .splits
            .ok_or_else(|| TsvError::Contract("dataset has no splits".into()))?
            .0)
    }

    pub fn val_end(&self) -> Result<usize> {
        Ok(self
            .splits
            .ok_or_else(|| TsvError::Contract("dataset has no splits".into()))?
            .1)
    }

    /// Chronological split at calendar-month offsets from the first
    /// timestamp; boundaries snap to the first grid point at or past the
    /// month offset.
    pub fn split_by_months(
        mut self,
        train_months: u32,
        val_months: u32,
        test_months: u32,
    ) -> Result<Self> {
        let first = self.timestamps[0];
        let span_end = first
            .checked_add_months(Months::new(train_months + val_months + test_months))
            .ok_or_else(|| TsvError::Data("month arithmetic overflow".into()))?;
        if *self.timestamps.last().unwrap() < span_end - chrono::Duration::seconds(1) {
            let needed = train_months + val_months + test_months;
            return Err(TsvError::Data(format!(
                "data does not span {needed} months from {first}"
            )));
        }
        let boundary = |months: u32| -> usize {
            let cut = first.checked_add_months(Months::new(months)).unwrap();
            self.timestamps.partition_point(|ts| *ts < cut)
        };
        let train_end = boundary(train_months);
        let val_end = boundary(train_months + val_months);
        if !(0 < train_end && train_end < val_end && val_end < self.len()) {
            return Err(TsvError::Data(format!(
                "degenerate month split: {train_end}/{val_end}/{}",
                self.len()
            )));
        }
        self.splits = Some((train_end, val_end));
        Ok(self)
    }

    /// Ratio split for synthetic or non-calendar data.
    pub fn split_by_ratio(mut self, train: f64, val: f64) -> Result<Self> {
        if !(train > 0.0 && val > 0.0 && train + val < 1.0) {
            return Err(TsvError::Config(format!(
                "invalid split ratios {train}/{val}"
            )));
        }
        let t = self.len();
        let train_end = (t as f64 * train).round() as usize;
        let val_end = (t as f64 * (train + val)).round() as usize;
        if !(0 < train_end && train_end < val_end && val_end < t) {
            return Err(TsvError::Data("series too short for ratio split".into()));
        }
        self.splits = Some((train_end, val_end));
        Ok(self)
    }

    /// Per-feature z-score using train-split statistics only; std floored at
    /// 1e-8. Stats are stored for denormalization.
    pub fn normalize(mut self) -> Result<Self> {
        let (train_end, _) = self
            .splits
            .ok_or_else(|| TsvError::Contract("normalize requires splits".into()))?;
        let (d, t) = (self.num_features(), self.len());
        let mut stats = Vec::with_capacity(d);
        for ch in 0..d {
            let row = &self.values.data()[ch * t..ch * t + train_end];
            let mean = row.iter().sum::<f64>() / train_end as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / train_end as f64;
            let std = var.sqrt().max(1e-8);
            stats.push((mean, std));
        }
        for ch in 0..d {
            let (mean, std) = stats[ch];
            for j in 0..t {
                let v = &mut self.values.data_mut()[ch * t + j];
                *v = (*v - mean) / std;
            }
        }
        self.norm_stats = Some(stats);
        Ok(self)
    }

    /// Undo normalization on a [D × T'] tensor laid out like `values`.
    pub fn denormalize(&self, x: &Tensor) -> Result<Tensor> {
        let stats = self
            .norm_stats
            .as_ref()
            .ok_or_else(|| TsvError::Contract("dataset is not normalized".into()))?;
        let (d, t) = (x.shape()[0], x.shape()[1]);
        if d != stats.len() {
            return Err(TsvError::Dimension("denormalize feature count".into()));
        }
        let mut out = x.clone();
        for ch in 0..d {
            let (mean, std) = stats[ch];
            for j in 0..t {
                let v = &mut out.data_mut()[ch * t + j];
                *v = *v * std + mean;
            }
        }
        Ok(out)
    }

    /// Input channels for the encoder under the current target mode.
    pub fn input_values(&self) -> Result<Tensor> {
        match self.target_mode {
            TargetMode::Multivariate => Ok(self.values.clone()),
            TargetMode::Univariate => {
                let idx = self.target_index()?;
                let t = self.len();
                Ok(Tensor::new(
                    vec![1, t],
                    self.values.data()[idx * t..(idx + 1) * t].to_vec(),
                )?)
            }
        }
    }

    /// Forecast targets under the current target mode ([D_out × T]).
    pub fn target_values(&self) -> Result<Tensor> {
        self.input_values()
    }

    /// Hours elapsed per timestamp step.
    pub fn stride_hours(&self) -> f64 {
        let d = self.timestamps[1] - self.timestamps[0];
        d.num_seconds() as f64 / 3600.0
    }
}
