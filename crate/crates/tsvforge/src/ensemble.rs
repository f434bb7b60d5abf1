//! Dual-head ensembling: a dynamics-only ridge head over the learned
//! representations (Model A), a time-feature-enhanced head (Model B), and
//! per-horizon convex weighting selected on the validation split.

use serde::{Deserialize, Serialize};

use crate::data::SeriesDataset;
use crate::encoder::{encode_causal_padded, EncoderConfig, EncoderParams};
use crate::error::{Result, TsvError};
use crate::features::{build_forecast_examples, time_features, ForecastExamples, TimeIndex};
use crate::harness::{mae, mse};
use crate::heads::{alpha_search, default_alpha_grid, RidgeHead};
use crate::numerics::Tensor;
use crate::pretrain::{pretrain, PretrainConfig};

/// Left zero-padding used when encoding a full series for forecasting.
pub const ENCODE_PAD: usize = 200;

/// The 17-candidate convex weight grid, w1 from 0.90 down to 0.10.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct WeightGrid {
    pub candidates: Vec<(f64, f64)>,
}

impl WeightGrid {
    pub fn standard() -> Self {
        let candidates = (0..17)
            .map(|i| {
                let w1 = 0.90 - 0.05 * i as f64;
                (w1, 1.0 - w1)
            })
            .collect();
        WeightGrid { candidates }
    }
}

impl Default for WeightGrid {
    fn default() -> Self {
        WeightGrid::standard()
    }
}

/// √MSE + MAE over all entries.
pub fn val_objective(pred: &Tensor, truth: &Tensor) -> Result<f64> {
    Ok(mse(pred, truth)?.sqrt() + mae(pred, truth)?)
}

/// Evaluate every grid candidate of w1·pred_A + w2·pred_B on the validation
/// truth and return the minimizer; ties go to the larger w1.
pub fn select_weights(
    pred_a: &Tensor,
    pred_b: &Tensor,
    truth: &Tensor,
    grid: &WeightGrid,
) -> Result<(f64, f64, f64)> {
    if pred_a.shape() != pred_b.shape() || pred_a.shape() != truth.shape() {
        return Err(TsvError::Dimension(format!(
            "select_weights shapes {:?} / {:?} / {:?}",
            pred_a.shape(),
            pred_b.shape(),
            truth.shape()
        )));
    }
    let mut best: Option<(f64, f64, f64)> = None;
    for &(w1, w2) in &grid.candidates {
        let mixed = pred_a.scale(w1).add(&pred_b.scale(w2))?;
        let score = val_objective(&mixed, truth)?;
        // strict improvement only: earlier (larger-w1) candidates win ties
        if best.map_or(true, |(_, _, s)| score < s) {
            best = Some((w1, w2, score));
        }
    }
    best.ok_or_else(|| TsvError::Contract("weight grid is empty".into()))
}

/// Fitted heads and selected weights for one horizon.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct HorizonModel {
    pub horizon: usize,
    pub head_a: RidgeHead,
    pub head_b: RidgeHead,
    pub weights: (f64, f64),
    pub val_score: f64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct EnsembleModel {
    pub horizons: Vec<HorizonModel>,
}

impl EnsembleModel {
    pub fn for_horizon(&self, h: usize) -> Result<&HorizonModel> {
        self.horizons
            .iter()
            .find(|m| m.horizon == h)
            .ok_or_else(|| TsvError::Contract(format!("no fitted model for horizon {h}")))
    }
}

fn concat_cols(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, pa, pb) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = Tensor::zeros(&[n, pa + pb]);
    for i in 0..n {
        for j in 0..pa {
            out.set2(i, j, a.at2(i, j));
        }
        for j in 0..pb {
            out.set2(i, pa + j, b.at2(i, j));
        }
    }
    out
}

/// Weighted forecast at horizon `h`. Model A sees the representation rows
/// only; Model B additionally sees the time-feature columns.
pub fn ensemble_forecast(
    model: &EnsembleModel,
    reps: &Tensor,
    time_feats: &Tensor,
    h: usize,
) -> Result<Tensor> {
    let m = model.for_horizon(h)?;
    let pred_a = m.head_a.predict(reps)?;
    let pred_b = m.head_b.predict(&concat_cols(reps, time_feats))?;
    pred_a.scale(m.weights.0).add(&pred_b.scale(m.weights.1))
}

/// One line of the evaluation report.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ReportRow {
    pub dataset: String,
    pub horizon: usize,
    pub method: String,
    pub mse: f64,
    pub mae: f64,
    pub w1: Option<f64>,
    pub w2: Option<f64>,
    pub alpha_a: Option<f64>,
    pub alpha_b: Option<f64>,
}

pub struct PipelineOutput {
    pub model: EnsembleModel,
    /// One ensemble row per horizon, plus a baseline (Model A alone) row.
    pub rows: Vec<ReportRow>,
    /// Per-horizon test predictions of the ensemble.
    pub predictions: Vec<(usize, Tensor)>,
}

pub(crate) struct SplitExamples {
    pub(crate) x_train: Tensor,
    pub(crate) y_train: Tensor,
    pub(crate) x_val: Tensor,
    pub(crate) y_val: Tensor,
    pub(crate) x_test: Tensor,
    pub(crate) y_test: Tensor,
}

fn take_rows(x: &Tensor, rows: &[usize]) -> Tensor {
    let p = x.shape()[1];
    let mut out = Tensor::zeros(&[rows.len(), p]);
    for (i, &r) in rows.iter().enumerate() {
        for j in 0..p {
            out.set2(i, j, x.at2(r, j));
        }
    }
    out
}

/// Assign each example to a split by where its last target lands: an anchor
/// t predicts t+1 … t+h, so the example belongs to train iff t+h < train_end,
/// to validation iff t+h < val_end, else to test.
pub(crate) fn partition_examples(
    ex: &ForecastExamples,
    horizon: usize,
    train_end: usize,
    val_end: usize,
) -> Result<SplitExamples> {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut test = Vec::new();
    for (row, &t) in ex.t_index.iter().enumerate() {
        let last = t + horizon;
        if last < train_end {
            train.push(row);
        } else if last < val_end {
            val.push(row);
        } else {
            test.push(row);
        }
    }
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(TsvError::Data(format!(
            "horizon {horizon}: empty split ({} train / {} val / {} test examples)",
            train.len(),
            val.len(),
            test.len()
        )));
    }
    Ok(SplitExamples {
        x_train: take_rows(&ex.x, &train),
        y_train: take_rows(&ex.y, &train),
        x_val: take_rows(&ex.x, &val),
        y_val: take_rows(&ex.y, &val),
        x_test: take_rows(&ex.x, &test),
        y_test: take_rows(&ex.y, &test),
    })
}

/// Algorithm phases 1–5 over a split, normalized dataset: pretrain (or reuse
/// a checkpointed encoder), causally encode the whole series, fit both heads
/// per horizon with α search, select weights on validation, and score the
/// test split.
pub fn run_pipeline(
    dataset: &SeriesDataset,
    horizons: &[usize],
    enc_cfg: &EncoderConfig,
    pre_cfg: &PretrainConfig,
    pretrained: Option<&EncoderParams>,
) -> Result<PipelineOutput> {
    if horizons.is_empty() {
        return Err(TsvError::Config("horizons must be nonempty".into()));
    }
    let train_end = dataset.train_end()?;
    let val_end = dataset.val_end()?;

    // Phase 1: encoder
    let owned;
    let params = match pretrained {
        Some(p) => p,
        None => {
            owned = pretrain(dataset, enc_cfg, pre_cfg)?.params;
            &owned
        }
    };

    // Phase 2: representations and features for the full timeline
    let inputs = dataset.input_values()?;
    let reps = encode_causal_padded(&inputs, params, enc_cfg, ENCODE_PAD)?;
    let targets = dataset.target_values()?;
    let time = TimeIndex::from_timestamps(&dataset.timestamps);
    let tf = time_features(&time);

    let grid = WeightGrid::standard();
    let alpha_grid = default_alpha_grid();
    let mut models = Vec::new();
    let mut rows = Vec::new();
    let mut predictions = Vec::new();
    for &h in horizons {
        let ex_a = build_forecast_examples(&reps, &targets, h, None)?;
        let ex_b = build_forecast_examples(&reps, &targets, h, Some(&tf))?;
        let sa = partition_examples(&ex_a, h, train_end, val_end)?;
        let sb = partition_examples(&ex_b, h, train_end, val_end)?;

        // Phase 3: α search per head, train-only fits
        let (alpha_a, head_a) =
            alpha_search(&sa.x_train, &sa.y_train, &sa.x_val, &sa.y_val, &alpha_grid)?;
        let (alpha_b, head_b) =
            alpha_search(&sb.x_train, &sb.y_train, &sb.x_val, &sb.y_val, &alpha_grid)?;

        // Phase 4: weight selection on validation
        let pred_a_val = head_a.predict(&sa.x_val)?;
        let pred_b_val = head_b.predict(&sb.x_val)?;
        let (w1, w2, val_score) = select_weights(&pred_a_val, &pred_b_val, &sa.y_val, &grid)?;

        // Phase 5: test forecasts
        let pred_a_test = head_a.predict(&sa.x_test)?;
        let pred_b_test = head_b.predict(&sb.x_test)?;
        let pred = pred_a_test.scale(w1).add(&pred_b_test.scale(w2))?;

        rows.push(ReportRow {
            dataset: dataset.name.clone(),
            horizon: h,
            method: "ensemble".into(),
            mse: mse(&pred, &sa.y_test)?,
            mae: mae(&pred, &sa.y_test)?,
            w1: Some(w1),
            w2: Some(w2),
            alpha_a: Some(alpha_a),
            alpha_b: Some(alpha_b),
        });
        predictions.push((h, pred));
        models.push(HorizonModel {
            horizon: h,
            head_a,
            head_b,
            weights: (w1, w2),
            val_score,
        });
    }
    Ok(PipelineOutput {
        model: EnsembleModel { horizons: models },
        rows,
        predictions,
    })
}
