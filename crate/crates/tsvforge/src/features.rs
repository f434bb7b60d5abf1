//! Forecast feature construction: sinusoidal daily time features, direct
//! multi-horizon example assembly from per-timestamp embeddings, and the
//! hybrid baseline's engineered lag/rolling/Fourier feature set.

use chrono::{Datelike, NaiveDateTime, Timelike};

use crate::error::{Result, TsvError};
use crate::numerics::Tensor;

/// Calendar position of each timestamp on the sampling grid.
#[derive(Clone, Debug)]
pub struct TimeIndex {
    /// Fractional hour of day in [0, 24).
    pub hour_of_day: Vec<f64>,
    /// Fractional hour of week in [0, 168), Monday 00:00 = 0.
    pub hour_of_week: Vec<f64>,
}

impl TimeIndex {
    pub fn from_timestamps(timestamps: &[NaiveDateTime]) -> TimeIndex {
        let hour_of_day = timestamps
            .iter()
            .map(|ts| {
                ts.hour() as f64 + ts.minute() as f64 / 60.0 + ts.second() as f64 / 3600.0
            })
            .collect::<Vec<_>>();
        let hour_of_week = timestamps
            .iter()
            .zip(&hour_of_day)
            .map(|(ts, h)| ts.weekday().num_days_from_monday() as f64 * 24.0 + h)
            .collect();
        TimeIndex {
            hour_of_day,
            hour_of_week,
        }
    }

    /// Synthetic index: hour h per step, starting at hour 0 on a Monday.
    pub fn synthetic(len: usize, stride_hours: f64) -> TimeIndex {
        let hours: Vec<f64> = (0..len).map(|i| i as f64 * stride_hours).collect();
        TimeIndex {
            hour_of_day: hours.iter().map(|h| h.rem_euclid(24.0)).collect(),
            hour_of_week: hours.iter().map(|h| h.rem_euclid(168.0)).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.hour_of_day.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hour_of_day.is_empty()
    }
}

/// The daily sin/cos pair per timestamp: [T × 2] with columns
/// sin(2π·hour/24), cos(2π·hour/24).
pub fn time_features(time: &TimeIndex) -> Tensor {
    let t = time.len();
    let mut out = Tensor::zeros(&[t, 2]);
    for (i, &h) in time.hour_of_day.iter().enumerate() {
        let angle = 2.0 * std::f64::consts::PI * h / 24.0;
        out.set2(i, 0, angle.sin());
        out.set2(i, 1, angle.cos());
    }
    out
}

/// Supervised examples for direct multi-horizon forecasting.
#[derive(Clone, Debug)]
pub struct ForecastExamples {
    /// [n_examples × feat_dim]
    pub x: Tensor,
    /// [n_examples × (h · D_out)], targets flattened row-major over steps.
    pub y: Tensor,
    /// Anchor timestamp index of each example.
    pub t_index: Vec<usize>,
}

/// For each anchor t the feature row is the representation column at t
/// (optionally concatenated with the anchor's time features) and the target
/// row is the flattened future window t+1 … t+h.
pub fn build_forecast_examples(
    reps: &Tensor,
    targets: &Tensor,
    horizon: usize,
    time_feats: Option<&Tensor>,
) -> Result<ForecastExamples> {
    if horizon < 1 {
        return Err(TsvError::Contract("horizon must be ≥ 1".into()));
    }
    let (c, t) = (reps.shape()[0], reps.shape()[1]);
    let (d_out, t_tgt) = (targets.shape()[0], targets.shape()[1]);
    if t != t_tgt {
        return Err(TsvError::Dimension(format!(
            "representations cover {t} steps but targets cover {t_tgt}"
        )));
    }
    if t <= horizon {
        return Err(TsvError::Data(format!(
            "series of length {t} yields no examples at horizon {horizon}"
        )));
    }
    if let Some(tf) = time_feats {
        if tf.shape()[0] != t {
            return Err(TsvError::Dimension("time features length mismatch".into()));
        }
    }
    let extra = time_feats.map_or(0, |tf| tf.shape()[1]);
    let n = t - horizon;
    let feat_dim = c + extra;
    let mut x = Tensor::zeros(&[n, feat_dim]);
    let mut y = Tensor::zeros(&[n, horizon * d_out]);
    let mut t_index = Vec::with_capacity(n);
    for anchor in 0..n {
        for ch in 0..c {
            x.set2(anchor, ch, reps.at2(ch, anchor));
        }
        if let Some(tf) = time_feats {
            for e in 0..extra {
                x.set2(anchor, c + e, tf.at2(anchor, e));
            }
        }
        for step in 1..=horizon {
            for d in 0..d_out {
                y.set2(anchor, (step - 1) * d_out + d, targets.at2(d, anchor + step));
            }
        }
        t_index.push(anchor);
    }
    Ok(ForecastExamples { x, y, t_index })
}

/// Hybrid baseline features for a univariate series: lags, trailing rolling
/// mean/std, and daily + weekly Fourier pairs (2 harmonics each). Rows
/// without enough history are flagged invalid.
pub struct HybridFeatures {
    /// [T × feat_dim]
    pub x: Tensor,
    pub valid: Vec<bool>,
    pub names: Vec<String>,
}

pub fn hybrid_features(
    series: &Tensor,
    time: &TimeIndex,
    lags: &[usize],
    roll_windows: &[usize],
    weekly_period: f64,
) -> Result<HybridFeatures> {
    if series.shape().len() != 2 || series.shape()[0] != 1 {
        return Err(TsvError::Dimension(
            "hybrid features expect a univariate series [1 × T]".into(),
        ));
    }
    let t = series.shape()[1];
    if time.len() != t {
        return Err(TsvError::Dimension("time index length mismatch".into()));
    }
    for &l in lags {
        if l == 0 || l >= t {
            return Err(TsvError::Config(format!("lag {l} out of range for T={t}")));
        }
    }
    for &w in roll_windows {
        if w == 0 || w >= t {
            return Err(TsvError::Config(format!("window {w} out of range for T={t}")));
        }
    }
    let mut names: Vec<String> = Vec::new();
    for &l in lags {
        names.push(format!("lag_{l}"));
    }
    for &w in roll_windows {
        names.push(format!("rollmean_{w}"));
        names.push(format!("rollstd_{w}"));
    }
    for k in 1..=2 {
        names.push(format!("daily_sin_{k}"));
        names.push(format!("daily_cos_{k}"));
    }
    for k in 1..=2 {
        names.push(format!("weekly_sin_{k}"));
        names.push(format!("weekly_cos_{k}"));
    }
    let feat_dim = names.len();
    let history = lags
        .iter()
        .copied()
        .chain(roll_windows.iter().map(|&w| w - 1))
        .max()
        .unwrap_or(0);

    let v = series.data();
    let mut x = Tensor::zeros(&[t, feat_dim]);
    let mut valid = vec![false; t];
    for anchor in 0..t {
        valid[anchor] = anchor >= history;
        let mut col = 0;
        for &l in lags {
            if anchor >= l {
                x.set2(anchor, col, v[anchor - l]);
            }
            col += 1;
        }
        for &w in roll_windows {
            if anchor + 1 >= w {
                let window = &v[anchor + 1 - w..=anchor];
                let mean = window.iter().sum::<f64>() / w as f64;
                let var = window.iter().map(|u| (u - mean).powi(2)).sum::<f64>() / w as f64;
                x.set2(anchor, col, mean);
                x.set2(anchor, col + 1, var.sqrt());
            }
            col += 2;
        }
        let hd = time.hour_of_day[anchor];
        for k in 1..=2u32 {
            let angle = 2.0 * std::f64::consts::PI * k as f64 * hd / 24.0;
            x.set2(anchor, col, angle.sin());
            x.set2(anchor, col + 1, angle.cos());
            col += 2;
        }
        let hw = time.hour_of_week[anchor];
        for k in 1..=2u32 {
            let angle = 2.0 * std::f64::consts::PI * k as f64 * hw / weekly_period;
            x.set2(anchor, col, angle.sin());
            x.set2(anchor, col + 1, angle.cos());
            col += 2;
        }
    }
    Ok(HybridFeatures { x, valid, names })
}

/// Default hybrid lag set for the given sampling stride (hours).
pub fn default_lags(stride_hours: f64) -> Vec<usize> {
    let scale = (1.0 / stride_hours).round().max(1.0) as usize;
    [1, 2, 3, 24, 48, 168].iter().map(|&l| l * scale).collect()
}

/// Default hybrid rolling windows for the given sampling stride (hours).
pub fn default_roll_windows(stride_hours: f64) -> Vec<usize> {
    let scale = (1.0 / stride_hours).round().max(1.0) as usize;
    [24, 168].iter().map(|&w| w * scale).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn time_feature_cardinal_hours() {
        let ti = TimeIndex {
            hour_of_day: vec![0.0, 6.0, 12.0, 0.25],
            hour_of_week: vec![0.0; 4],
        };
        let tf = time_features(&ti);
        let close = |a: f64, b: f64| (a - b).abs() < 1e-12;
        assert!(close(tf.at2(0, 0), 0.0) && close(tf.at2(0, 1), 1.0));
        assert!(close(tf.at2(1, 0), 1.0) && close(tf.at2(1, 1), 0.0));
        assert!(close(tf.at2(2, 0), 0.0) && close(tf.at2(2, 1), -1.0));
        // 15-minute step: hour 0.25
        let a = 2.0 * std::f64::consts::PI * 0.25 / 24.0;
        assert!(close(tf.at2(3, 0), a.sin()) && close(tf.at2(3, 1), a.cos()));
    }

    #[test]
    fn time_features_lie_on_unit_circle() {
        let ti = TimeIndex::synthetic(500, 0.25);
        let tf = time_features(&ti);
        for i in 0..500 {
            let s = tf.at2(i, 0).powi(2) + tf.at2(i, 1).powi(2);
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn forecast_examples_index_arithmetic() {
        // h=2, D_out=1, targets [10,20,30,40]: anchor 0 pairs rep col 0 with
        // Y=[20,30].
        let reps = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0], vec![5.0, 6.0, 7.0, 8.0]]);
        let targets = Tensor::from_rows(&[vec![10.0, 20.0, 30.0, 40.0]]);
        let ex = build_forecast_examples(&reps, &targets, 2, None).unwrap();
        assert_eq!(ex.x.shape(), &[2, 2]);
        assert_eq!(ex.y.shape(), &[2, 2]);
        assert_eq!(ex.x.at2(0, 0), 1.0);
        assert_eq!(ex.x.at2(0, 1), 5.0);
        assert_eq!(ex.y.at2(0, 0), 20.0);
        assert_eq!(ex.y.at2(0, 1), 30.0);
        assert_eq!(ex.y.at2(1, 0), 30.0);
    }

    #[test]
    fn single_example_at_minimal_length() {
        let reps = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let targets = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let ex = build_forecast_examples(&reps, &targets, 2, None).unwrap();
        assert_eq!(ex.x.shape()[0], 1);
        assert!(build_forecast_examples(&reps, &targets, 3, None).is_err());
    }

    #[test]
    fn enhanced_features_append_time_columns() {
        let reps = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let targets = Tensor::from_rows(&[vec![1.0, 2.0, 3.0, 4.0]]);
        let ti = TimeIndex::synthetic(4, 1.0);
        let tf = time_features(&ti);
        let plain = build_forecast_examples(&reps, &targets, 1, None).unwrap();
        let enhanced = build_forecast_examples(&reps, &targets, 1, Some(&tf)).unwrap();
        assert_eq!(enhanced.x.shape()[1], plain.x.shape()[1] + 2);
        // first columns agree exactly
        for i in 0..plain.x.shape()[0] {
            assert_eq!(enhanced.x.at2(i, 0), plain.x.at2(i, 0));
        }
    }

    #[test]
    fn multivariate_targets_flatten_row_major() {
        let reps = Tensor::from_rows(&[vec![0.0, 0.0, 0.0]]);
        let targets = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![10.0, 20.0, 30.0]]);
        let ex = build_forecast_examples(&reps, &targets, 2, None).unwrap();
        // anchor 0: steps t=1,2 over D_out=2 → [2, 20, 3, 30]
        assert_eq!(ex.y.at2(0, 0), 2.0);
        assert_eq!(ex.y.at2(0, 1), 20.0);
        assert_eq!(ex.y.at2(0, 2), 3.0);
        assert_eq!(ex.y.at2(0, 3), 30.0);
    }

    #[test]
    fn no_leakage_from_future_rows() {
        let t = 30;
        let base: Vec<f64> = (0..t).map(|i| (i as f64).sin()).collect();
        let reps = Tensor::new(vec![1, t], base.clone()).unwrap();
        let targets = Tensor::new(vec![1, t], base.clone()).unwrap();
        let ex = build_forecast_examples(&reps, &targets, 3, None).unwrap();
        let anchor = 10;
        // replace everything after the anchor with noise
        let mut noisy = base.clone();
        for v in noisy.iter_mut().skip(anchor + 1) {
            *v = 1e6;
        }
        let reps2 = Tensor::new(vec![1, t], noisy.clone()).unwrap();
        let targets2 = Tensor::new(vec![1, t], noisy).unwrap();
        let ex2 = build_forecast_examples(&reps2, &targets2, 3, None).unwrap();
        for c in 0..ex.x.shape()[1] {
            assert_eq!(ex.x.at2(anchor, c), ex2.x.at2(anchor, c));
        }
    }

    #[test]
    fn hybrid_lag_and_rolling_values() {
        let series = Tensor::from_rows(&[vec![1.0, 3.0, 5.0]]);
        let ti = TimeIndex::synthetic(3, 1.0);
        let hf = hybrid_features(&series, &ti, &[1], &[2], 168.0).unwrap();
        let lag_col = hf.names.iter().position(|n| n == "lag_1").unwrap();
        let mean_col = hf.names.iter().position(|n| n == "rollmean_2").unwrap();
        let std_col = hf.names.iter().position(|n| n == "rollstd_2").unwrap();
        assert_eq!(hf.x.at2(2, lag_col), 3.0);
        assert_eq!(hf.x.at2(2, mean_col), 4.0); // mean of [3, 5]
        assert_eq!(hf.x.at2(2, std_col), 1.0); // population std of [3, 5]
        assert!(!hf.valid[0] && hf.valid[1] && hf.valid[2]);
    }

    #[test]
    fn weekly_sin_vanishes_at_half_week() {
        let ti = TimeIndex {
            hour_of_day: vec![12.0],
            hour_of_week: vec![84.0],
        };
        let series = Tensor::from_rows(&[vec![0.0]]);
        // T=1 means no lags/windows fit; use empty sets
        let hf = hybrid_features(&series, &ti, &[], &[], 168.0).unwrap();
        let col = hf.names.iter().position(|n| n == "weekly_sin_1").unwrap();
        assert!(hf.x.at2(0, col).abs() < 1e-12);
    }

    #[test]
    fn hybrid_rejects_oversized_lag() {
        let series = Tensor::from_rows(&[vec![1.0, 2.0, 3.0]]);
        let ti = TimeIndex::synthetic(3, 1.0);
        assert!(hybrid_features(&series, &ti, &[3], &[], 168.0).is_err());
    }

    #[test]
    fn default_feature_scales() {
        assert_eq!(default_lags(1.0), vec![1, 2, 3, 24, 48, 168]);
        assert_eq!(default_lags(0.25), vec![4, 8, 12, 96, 192, 672]);
        assert_eq!(default_roll_windows(0.25), vec![96, 672]);
    }
}
