//! Forecast regression heads: multi-output ridge solved in closed form over
//! standardized features (bias unpenalized), validation-driven α grid
//! search, and a gradient-boosted tree model for the hybrid baseline's
//! residual stage.

use serde::{Deserialize, Serialize};

use crate::ensemble::val_objective;
use crate::error::{Result, TsvError};
use crate::numerics::Tensor;

/// The paper family's 1-2-5 decade grid from 0.1 to 1000.
pub fn default_alpha_grid() -> Vec<f64> {
    vec![
        0.1, 0.2, 0.5, 1.0, 2.0, 5.0, 10.0, 20.0, 50.0, 100.0, 200.0, 500.0, 1000.0,
    ]
}

/// A fitted ridge head: weights over standardized features plus a bias row,
/// with the feature statistics baked in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RidgeHead {
    /// [feat_dim + 1 × out_dim]; last row is the bias.
    pub weights: Tensor,
    pub alpha: f64,
    pub feat_means: Vec<f64>,
    pub feat_stds: Vec<f64>,
}

fn standardize(x: &Tensor, means: &[f64], stds: &[f64]) -> Tensor {
    let (n, p) = (x.shape()[0], x.shape()[1]);
    let mut z = Tensor::zeros(&[n, p]);
    for i in 0..n {
        for j in 0..p {
            z.set2(i, j, (x.at2(i, j) - means[j]) / stds[j]);
        }
    }
    z
}

/// In-place Cholesky solve of A·W = B for symmetric positive definite A
/// [p × p] and B [p × q].
fn cholesky_solve(mut a: Tensor, mut b: Tensor) -> Result<Tensor> {
    let p = a.shape()[0];
    let q = b.shape()[1];
    // factor A = L·Lᵀ in the lower triangle
    for j in 0..p {
        let mut d = a.at2(j, j);
        for k in 0..j {
            d -= a.at2(j, k).powi(2);
        }
        if d <= 0.0 || !d.is_finite() {
            return Err(TsvError::Numeric(format!(
                "ridge normal equations not positive definite (pivot {d:.3e})"
            )));
        }
        let ljj = d.sqrt();
        a.set2(j, j, ljj);
        for i in j + 1..p {
            let mut s = a.at2(i, j);
            for k in 0..j {
                s -= a.at2(i, k) * a.at2(j, k);
            }
            a.set2(i, j, s / ljj);
        }
    }
    // forward then backward substitution, per right-hand-side column
    for c in 0..q {
        for i in 0..p {
            let mut s = b.at2(i, c);
            for k in 0..i {
                s -= a.at2(i, k) * b.at2(k, c);
            }
            b.set2(i, c, s / a.at2(i, i));
        }
        for i in (0..p).rev() {
            let mut s = b.at2(i, c);
            for k in i + 1..p {
                s -= a.at2(k, i) * b.at2(k, c);
            }
            b.set2(i, c, s / a.at2(i, i));
        }
    }
    Ok(b)
}

/// Closed-form ridge fit on the normal equations, multi-output, with an
/// unpenalized intercept. Features are standardized with train statistics.
pub fn ridge_fit(x: &Tensor, y: &Tensor, alpha: f64) -> Result<RidgeHead> {
    if x.shape().len() != 2 || y.shape().len() != 2 || x.shape()[0] != y.shape()[0] {
        return Err(TsvError::Dimension(format!(
            "ridge_fit shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        )));
    }
    let (n, p) = (x.shape()[0], x.shape()[1]);
    if n < 1 {
        return Err(TsvError::Contract("ridge_fit needs n ≥ 1".into()));
    }
    if alpha <= 0.0 {
        return Err(TsvError::Contract("ridge_fit needs alpha > 0".into()));
    }
    let mut means = vec![0.0; p];
    let mut stds = vec![0.0; p];
    for j in 0..p {
        let mean = (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64;
        let var = (0..n).map(|i| (x.at2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
        means[j] = mean;
        stds[j] = var.sqrt().max(1e-8);
    }
    let z = augment_ones(&standardize(x, &means, &stds));
    // A = ZᵀZ + α·diag(1,…,1,0) ; B = ZᵀY
    let mut a = Tensor::matmul_ex(&z, true, &z, false)?;
    for j in 0..p {
        let v = a.at2(j, j) + alpha;
        a.set2(j, j, v);
    }
    let b = Tensor::matmul_ex(&z, true, y, false)?;
    let weights = cholesky_solve(a, b)?;
    Ok(RidgeHead {
        weights,
        alpha,
        feat_means: means,
        feat_stds: stds,
    })
}

fn augment_ones(z: &Tensor) -> Tensor {
    let (n, p) = (z.shape()[0], z.shape()[1]);
    let mut out = Tensor::zeros(&[n, p + 1]);
    for i in 0..n {
        for j in 0..p {
            out.set2(i, j, z.at2(i, j));
        }
        out.set2(i, p, 1.0);
    }
    out
}

impl RidgeHead {
    pub fn feat_dim(&self) -> usize {
        self.weights.shape()[0] - 1
    }

    pub fn out_dim(&self) -> usize {
        self.weights.shape()[1]
    }

    pub fn predict(&self, x: &Tensor) -> Result<Tensor> {
        if x.shape().len() != 2 || x.shape()[1] != self.feat_dim() {
            return Err(TsvError::Dimension(format!(
                "predict on {:?} with feat_dim {}",
                x.shape(),
                self.feat_dim()
            )));
        }
        let z = augment_ones(&standardize(x, &self.feat_means, &self.feat_stds));
        z.matmul(&self.weights)
    }

    /// Relative residual ‖(ZᵀZ + αI)W − ZᵀY‖ / ‖ZᵀY‖ of the normal equations
    /// on the given training matrices.
    pub fn normal_eq_residual(&self, x: &Tensor, y: &Tensor) -> Result<f64> {
        let p = self.feat_dim();
        let z = augment_ones(&standardize(x, &self.feat_means, &self.feat_stds));
        let mut a = Tensor::matmul_ex(&z, true, &z, false)?;
        for j in 0..p {
            let v = a.at2(j, j) + self.alpha;
            a.set2(j, j, v);
        }
        let b = Tensor::matmul_ex(&z, true, y, false)?;
        let lhs = a.matmul(&self.weights)?;
        let num = lhs
            .sub(&b)?
            .data()
            .iter()
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt();
        let den = b.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        Ok(if den == 0.0 { num } else { num / den })
    }

    /// Single-output view of column `col`.
    pub fn select_output(&self, col: usize) -> RidgeHead {
        let rows = self.weights.shape()[0];
        let mut w = Tensor::zeros(&[rows, 1]);
        for r in 0..rows {
            w.set2(r, 0, self.weights.at2(r, col));
        }
        RidgeHead {
            weights: w,
            alpha: self.alpha,
            feat_means: self.feat_means.clone(),
            feat_stds: self.feat_stds.clone(),
        }
    }
}

/// Grid search over α: fit on train, score √MSE + MAE on validation, return
/// the argmin (ties break toward the smaller α). The returned head is the
/// train-only fit at the selected α.
pub fn alpha_search(
    x_train: &Tensor,
    y_train: &Tensor,
    x_val: &Tensor,
    y_val: &Tensor,
    grid: &[f64],
) -> Result<(f64, RidgeHead)> {
    if grid.is_empty() {
        return Err(TsvError::Contract("alpha grid must be nonempty".into()));
    }
    let mut sorted: Vec<f64> = grid.to_vec();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut best: Option<(f64, f64, RidgeHead)> = None;
    for &alpha in &sorted {
        let head = ridge_fit(x_train, y_train, alpha)?;
        let score = val_objective(&head.predict(x_val)?, y_val)?;
        let better = match &best {
            None => true,
            Some((_, best_score, _)) => score < *best_score,
        };
        if better {
            best = Some((alpha, score, head));
        }
    }
    let (alpha, _, head) = best.unwrap();
    Ok((alpha, head))
}

// ── Boosted residual stage ──────────────────────────────────────────────

#[derive(Clone, Debug, Serialize, Deserialize)]
pub enum TreeNode {
    Leaf(f64),
    Split {
        feature: usize,
        threshold: f64,
        left: Box<TreeNode>,
        right: Box<TreeNode>,
    },
}

impl TreeNode {
    pub fn predict_row(&self, row: &[f64]) -> f64 {
        match self {
            TreeNode::Leaf(v) => *v,
            TreeNode::Split {
                feature,
                threshold,
                left,
                right,
            } => {
                if row[*feature] <= *threshold {
                    left.predict_row(row)
                } else {
                    right.predict_row(row)
                }
            }
        }
    }
}

/// Stage-1 linear model plus shrunken sum of least-squares regression trees
/// fit to the running residual.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct BoostedResidualModel {
    pub base: RidgeHead,
    pub trees: Vec<TreeNode>,
    pub shrinkage: f64,
}

fn fit_tree(x: &Tensor, residual: &[f64], indices: &[usize], depth: usize) -> TreeNode {
    let mean = indices.iter().map(|&i| residual[i]).sum::<f64>() / indices.len() as f64;
    if depth == 0 || indices.len() < 2 {
        return TreeNode::Leaf(mean);
    }
    let p = x.shape()[1];
    let base_sse: f64 = indices.iter().map(|&i| (residual[i] - mean).powi(2)).sum();
    let mut best: Option<(f64, usize, f64)> = None; // (sse, feature, threshold)
    for j in 0..p {
        let mut order: Vec<usize> = indices.to_vec();
        order.sort_by(|&a, &b| x.at2(a, j).partial_cmp(&x.at2(b, j)).unwrap());
        // prefix sums over the sorted residuals
        let vals: Vec<f64> = order.iter().map(|&i| residual[i]).collect();
        let mut prefix_sum = 0.0;
        let mut prefix_sq = 0.0;
        let total_sum: f64 = vals.iter().sum();
        let total_sq: f64 = vals.iter().map(|v| v * v).sum();
        for k in 0..order.len() - 1 {
            prefix_sum += vals[k];
            prefix_sq += vals[k] * vals[k];
            let xl = x.at2(order[k], j);
            let xr = x.at2(order[k + 1], j);
            if xl == xr {
                continue;
            }
            let nl = (k + 1) as f64;
            let nr = (order.len() - k - 1) as f64;
            let sse_l = prefix_sq - prefix_sum * prefix_sum / nl;
            let rs = total_sum - prefix_sum;
            let sse_r = (total_sq - prefix_sq) - rs * rs / nr;
            let sse = sse_l + sse_r;
            if best.as_ref().map_or(sse < base_sse - 1e-12, |b| sse < b.0) {
                best = Some((sse, j, 0.5 * (xl + xr)));
            }
        }
    }
    match best {
        None => TreeNode::Leaf(mean),
        Some((_, feature, threshold)) => {
            let (left_idx, right_idx): (Vec<usize>, Vec<usize>) = indices
                .iter()
                .partition(|&&i| x.at2(i, feature) <= threshold);
            TreeNode::Split {
                feature,
                threshold,
                left: Box::new(fit_tree(x, residual, &left_idx, depth - 1)),
                right: Box::new(fit_tree(x, residual, &right_idx, depth - 1)),
            }
        }
    }
}

/// Fit greedy least-squares trees to the residual left by the stage-1 linear
/// model. A constant-zero residual yields a model of zero trees.
pub fn boosted_residual_fit(
    features: &Tensor,
    target: &[f64],
    base: RidgeHead,
    n_trees: usize,
    depth: usize,
    shrinkage: f64,
) -> Result<BoostedResidualModel> {
    let n = features.shape()[0];
    if target.len() != n {
        return Err(TsvError::Dimension(format!(
            "boosted fit: {} rows vs {} targets",
            n,
            target.len()
        )));
    }
    if base.out_dim() != 1 {
        return Err(TsvError::Contract(
            "boosted residual base must be single-output".into(),
        ));
    }
    let base_pred = base.predict(features)?;
    let mut residual: Vec<f64> = (0..n).map(|i| target[i] - base_pred.at2(i, 0)).collect();
    let indices: Vec<usize> = (0..n).collect();
    let mut trees = Vec::new();
    for _ in 0..n_trees {
        if residual.iter().all(|&r| r.abs() < 1e-13) {
            break;
        }
        let tree = fit_tree(features, &residual, &indices, depth);
        let p = features.shape()[1];
        for i in 0..n {
            let row: Vec<f64> = (0..p).map(|j| features.at2(i, j)).collect();
            residual[i] -= shrinkage * tree.predict_row(&row);
        }
        trees.push(tree);
    }
    Ok(BoostedResidualModel {
        base,
        trees,
        shrinkage,
    })
}

impl BoostedResidualModel {
    pub fn predict(&self, features: &Tensor) -> Result<Vec<f64>> {
        let (n, p) = (features.shape()[0], features.shape()[1]);
        let base_pred = self.base.predict(features)?;
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row: Vec<f64> = (0..p).map(|j| features.at2(i, j)).collect();
            let boost: f64 = self.trees.iter().map(|t| t.predict_row(&row)).sum();
            out.push(base_pred.at2(i, 0) + self.shrinkage * boost);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn near_identity_in_the_small_alpha_limit() {
        let x = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let y = x.clone();
        let head = ridge_fit(&x, &y, 1e-10).unwrap();
        let pred = head.predict(&x).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                assert!((pred.at2(i, j) - y.at2(i, j)).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn shrinkage_bound_on_slope() {
        // y = 3x on 50 points, α = 0.1 → slope within [2.9, 3.0] (slope in
        // standardized coordinates is 3·Sxx/(Sxx + α)).
        let n = 50;
        let x = Tensor::new(vec![n, 1], (0..n).map(|i| i as f64 / 10.0).collect()).unwrap();
        let y = x.scale(3.0);
        let head = ridge_fit(&x, &y, 0.1).unwrap();
        // effective slope = dy/dx recovered from two probe points
        let probe = Tensor::from_rows(&[vec![0.0], vec![1.0]]);
        let pred = head.predict(&probe).unwrap();
        let slope = pred.at2(1, 0) - pred.at2(0, 0);
        assert!((2.9..=3.0).contains(&slope), "slope {slope}");
    }

    /// Full-batch gradient descent to convergence on the ridge objective
    /// (standardized features, bias unpenalized).
    fn ridge_descent_oracle(x: &Tensor, y: &Tensor, alpha: f64) -> Tensor {
        let (n, p) = (x.shape()[0], x.shape()[1]);
        let q = y.shape()[1];
        let mut means = vec![0.0; p];
        let mut stds = vec![0.0; p];
        for j in 0..p {
            let mean = (0..n).map(|i| x.at2(i, j)).sum::<f64>() / n as f64;
            let var = (0..n).map(|i| (x.at2(i, j) - mean).powi(2)).sum::<f64>() / n as f64;
            means[j] = mean;
            stds[j] = var.sqrt().max(1e-8);
        }
        let z = augment_ones(&standardize(x, &means, &stds));
        let mut w = Tensor::zeros(&[p + 1, q]);
        // objective: ‖ZW − Y‖² + α‖W_feat‖²; gradient descent with a step
        // below 1/L where L ≈ 2(λmax(ZᵀZ) + α) bounded by trace
        let ztz = Tensor::matmul_ex(&z, true, &z, false).unwrap();
        let trace: f64 = (0..p + 1).map(|j| ztz.at2(j, j)).sum();
        let lr = 0.9 / (2.0 * (trace + alpha));
        for _ in 0..200_000 {
            let resid = z.matmul(&w).unwrap().sub(y).unwrap();
            let mut grad = Tensor::matmul_ex(&z, true, &resid, false).unwrap().scale(2.0);
            for j in 0..p {
                for c in 0..q {
                    let g = grad.at2(j, c) + 2.0 * alpha * w.at2(j, c);
                    grad.set2(j, c, g);
                }
            }
            let gnorm: f64 = grad.data().iter().map(|v| v * v).sum::<f64>().sqrt();
            w.axpy(-lr, &grad);
            if gnorm < 1e-10 {
                break;
            }
        }
        w
    }

    #[test]
    fn closed_form_matches_descent_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        for trial in 0..5 {
            let n = 20;
            let p = 3;
            let q = 2;
            let x = Tensor::new(
                vec![n, p],
                (0..n * p).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let y = Tensor::new(
                vec![n, q],
                (0..n * q).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let alpha = [0.1, 1.0, 10.0][trial % 3];
            let head = ridge_fit(&x, &y, alpha).unwrap();
            let oracle_w = ridge_descent_oracle(&x, &y, alpha);
            for (a, b) in head.weights.data().iter().zip(oracle_w.data()) {
                assert!((a - b).abs() < 1e-6, "weight {a} vs oracle {b}");
            }
            assert!(head.normal_eq_residual(&x, &y).unwrap() < 1e-8);
        }
    }

    #[test]
    fn prediction_is_affine_per_example() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let x = Tensor::new(vec![30, 4], (0..120).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let y = Tensor::new(vec![30, 2], (0..60).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let head = ridge_fit(&x, &y, 0.5).unwrap();
        for _ in 0..10 {
            let a = rng.gen_range(0.0..1.0);
            let r1: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let r2: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mix: Vec<f64> = r1
                .iter()
                .zip(&r2)
                .map(|(u, v)| a * u + (1.0 - a) * v)
                .collect();
            let rows = Tensor::from_rows(&[r1, r2, mix]);
            let pred = head.predict(&rows).unwrap();
            for c in 0..2 {
                let expected = a * pred.at2(0, c) + (1.0 - a) * pred.at2(1, c);
                assert!((pred.at2(2, c) - expected).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn alpha_search_single_candidate_and_noise_response() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let n = 60;
        let x = Tensor::new(vec![n, 2], (0..2 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let clean_y = |x: &Tensor| -> Tensor {
            let mut y = Tensor::zeros(&[x.shape()[0], 1]);
            for i in 0..x.shape()[0] {
                y.set2(i, 0, 2.0 * x.at2(i, 0) - x.at2(i, 1));
            }
            y
        };
        let y = clean_y(&x);
        let xv = Tensor::new(
            vec![20, 2],
            (0..40).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let yv = clean_y(&xv);

        let (a, _) = alpha_search(&x, &y, &xv, &yv, &[7.0]).unwrap();
        assert_eq!(a, 7.0);

        // noiseless linear data selects the smallest α in the grid
        let grid = default_alpha_grid();
        let (a_clean, _) = alpha_search(&x, &y, &xv, &yv, &grid).unwrap();
        assert_eq!(a_clean, 0.1);

        // heavy label noise on train, clean val → strictly larger α
        let mut y_noisy = y.clone();
        for v in y_noisy.data_mut() {
            *v += rng.gen_range(-5.0..5.0);
        }
        let (a_noisy, _) = alpha_search(&x, &y_noisy, &xv, &yv, &grid).unwrap();
        assert!(a_noisy > a_clean, "{a_noisy} vs {a_clean}");
    }

    #[test]
    fn boosted_zero_residual_contributes_nothing() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let y = Tensor::from_rows(&[vec![1.0], vec![1.0], vec![1.0], vec![1.0]]);
        let base = ridge_fit(&x, &y, 1e-8).unwrap();
        let target: Vec<f64> = vec![1.0; 4];
        let model = boosted_residual_fit(&x, &target, base, 10, 2, 0.5).unwrap();
        assert!(model.trees.is_empty());
        let pred = model.predict(&x).unwrap();
        for p in pred {
            assert!((p - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn single_split_recovers_step_function() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0], vec![3.0]]);
        let residual = [-1.0, -1.0, 1.0, 1.0];
        let tree = fit_tree(&x, &residual, &[0, 1, 2, 3], 1);
        for (i, expect) in residual.iter().enumerate() {
            assert_eq!(tree.predict_row(&[x.at2(i, 0)]), *expect);
        }
    }

    #[test]
    fn boosting_training_error_non_increasing() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 80;
        let x = Tensor::new(vec![n, 3], (0..3 * n).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .unwrap();
        let target: Vec<f64> = (0..n)
            .map(|i| (x.at2(i, 0) * 3.0).sin() + rng.gen_range(-0.2..0.2))
            .collect();
        let y = Tensor::new(vec![n, 1], target.clone()).unwrap();
        let base = ridge_fit(&x, &y, 1.0).unwrap();
        let mut prev = f64::INFINITY;
        for k in (1..=50).step_by(7) {
            let model = boosted_residual_fit(&x, &target, base.clone(), k, 3, 0.1).unwrap();
            let pred = model.predict(&x).unwrap();
            let mse: f64 = pred
                .iter()
                .zip(&target)
                .map(|(p, t)| (p - t).powi(2))
                .sum::<f64>()
                / n as f64;
            assert!(mse <= prev + 1e-12, "mse {mse} rose above {prev}");
            prev = mse;
        }
    }
}
