//! Ridge-penalized mixed model on [X, T] for a single response, and the
//! held-out comparison against mixed component regression.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cv::{cross_validate, fold_rows, group_folds, mean_and_se, split, CvConfig, CvGrid, TuningPoint};
use crate::data::{Dataset, Standardization};
use crate::error::{Error, Result};
use crate::fixed::fit_scglr;
use crate::glm::{deviance, working_quantities_weighted, Family, FamilySpec};
use crate::henderson::{henderson_solve_penalized, update_variance, SIGMA2_FLOOR};
use crate::linalg::{hstack, relative_change, weighted_least_squares};
use crate::mixed::{fit_mixed_scglr, MixedComponentModel, MixedSettings, PredictionMode};

/// 25 log-spaced penalties from 1e-4 to 1e4.
pub fn default_lambda_grid() -> Vec<f64> {
    (0..25).map(|i| 10f64.powf(-4.0 + i as f64 / 3.0)).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeTraceRow {
    pub iteration: usize,
    /// Penalized working objective at the previous estimates and current σ².
    pub objective_before: f64,
    /// The same objective right after the penalized solve.
    pub objective_after: f64,
    pub sigma2: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RidgeMixedModel {
    /// Coefficients on [X, T]: p explanatory columns first.
    pub beta: DVector<f64>,
    pub xi: DVector<f64>,
    pub sigma2: f64,
    pub lambda: f64,
    pub family: Family,
    pub response: usize,
    pub groups: Vec<String>,
    pub standardization: Standardization,
    pub converged: bool,
    pub iterations: usize,
    pub trace: Vec<RidgeTraceRow>,
}

impl RidgeMixedModel {
    pub fn p(&self) -> usize {
        self.standardization.x_mean.len()
    }

    pub fn beta_x(&self) -> DVector<f64> {
        self.beta.rows(0, self.p()).into_owned()
    }

    /// Linear predictor on a dataset in the model's scale.
    pub fn predict_eta(&self, ds: &Dataset, mode: PredictionMode) -> Result<DVector<f64>> {
        let design = hstack(&[ds.x(), ds.t()], ds.n());
        if design.ncols() != self.beta.len() {
            return Err(Error::Dimension(format!(
                "expected {} columns in [X, T], got {}",
                self.beta.len(),
                design.ncols()
            )));
        }
        let mut eta = design * &self.beta;
        if mode == PredictionMode::Conditional {
            let labels = ds.groups().labels();
            let mut unknown = Vec::new();
            let map: Vec<Option<usize>> = labels
                .iter()
                .map(|l| {
                    let found = self.groups.iter().position(|g| g == l);
                    if found.is_none() {
                        unknown.push(l.clone());
                    }
                    found
                })
                .collect();
            if !unknown.is_empty() {
                return Err(Error::UnknownGroups(unknown));
            }
            for (i, &g) in ds.groups().index().iter().enumerate() {
                eta[i] += self.xi[map[g].expect("checked above")];
            }
        }
        Ok(eta)
    }

    pub fn fitted(&self, ds: &Dataset, mode: PredictionMode) -> Result<DVector<f64>> {
        Ok(self.predict_eta(ds, mode)?.map(|e| self.family.mean(e)))
    }
}

fn objective(
    design: &DMatrix<f64>,
    index: &[usize],
    z: &DVector<f64>,
    w: &DVector<f64>,
    beta: &DVector<f64>,
    xi: &DVector<f64>,
    penalty: &DVector<f64>,
    sigma2: f64,
) -> f64 {
    let fit = design * beta;
    let rss: f64 = (0..z.len())
        .map(|i| w[i] * (z[i] - fit[i] - xi[index[i]]).powi(2))
        .sum();
    let pen: f64 = beta.iter().zip(penalty.iter()).map(|(b, l)| l * b * b).sum();
    rss + pen + xi.norm_squared() / sigma2
}

/// Ridge least squares: [√w·M; diag(√λ)] against [√w·z; 0].
fn penalized_wls(design: &DMatrix<f64>, z: &DVector<f64>, w: &DVector<f64>, penalty: &DVector<f64>) -> DVector<f64> {
    let (n, m) = design.shape();
    let mut aug = design.clone().insert_rows(n, m, 0.0);
    let mut target = z.clone().insert_rows(n, m, 0.0);
    let mut weights = w.clone().insert_rows(n, m, 1.0);
    for j in 0..m {
        aug[(n + j, j)] = penalty[j].sqrt();
        target[n + j] = 0.0;
        weights[n + j] = 1.0;
    }
    weighted_least_squares(&aug, &target, &weights).0
}

/// Schall loop for response k with λ added to the X block of the
/// fixed-effect normal equations; T (and the intercept) stay unpenalized.
pub fn fit_ridge_mixed(
    ds: &Dataset,
    family: Family,
    k: usize,
    lambda: f64,
    settings: &MixedSettings,
) -> Result<RidgeMixedModel> {
    if k >= ds.q() {
        return Err(Error::Dimension(format!("response index {k} out of range")));
    }
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::Config(format!(
            "ridge penalty must be finite and nonnegative, got {lambda}"
        )));
    }
    settings.fit.validate()?;
    if !settings.freeze_random && ds.n_groups() < 2 {
        return Err(Error::SingleGroup);
    }
    let n = ds.n();
    let y = ds.y().column(k).into_owned();
    for (i, &v) in y.iter().enumerate() {
        family.check_support(i, v)?;
    }
    let prior = ds.prior_weights();
    let groups = ds.groups();
    let index = groups.index();
    let design = hstack(&[ds.x(), ds.t()], n);
    let penalty = DVector::from_fn(design.ncols(), |j, _| if j < ds.p() { lambda } else { 0.0 });

    let mut eta = y.map(|v| family.initial_eta(v));
    let mut beta = DVector::zeros(design.ncols());
    let mut xi = DVector::zeros(groups.n_groups());
    let mut sigma2 = if settings.freeze_random {
        SIGMA2_FLOOR
    } else {
        settings.initial_sigma2
    };
    let mut trace = Vec::new();
    let mut converged = false;
    let mut iterations = 0;

    for it in 1..=settings.fit.max_outer {
        iterations = it;
        let wq = working_quantities_weighted(&y, &eta, family, Some(&prior))?;
        let before = objective(&design, index, &wq.z, &wq.w, &beta, &xi, &penalty, sigma2);
        let (new_beta, new_xi, new_sigma2) = if settings.freeze_random {
            (
                penalized_wls(&design, &wq.z, &wq.w, &penalty),
                DVector::zeros(xi.len()),
                sigma2,
            )
        } else {
            let sol = henderson_solve_penalized(&design, groups, &wq.z, &wq.w, sigma2, Some(&penalty))?;
            let up = update_variance(&sol.xi, sol.trace_xixi, sigma2);
            (sol.beta, sol.xi, up.sigma2)
        };
        let after = objective(&design, index, &wq.z, &wq.w, &new_beta, &new_xi, &penalty, sigma2);
        trace.push(RidgeTraceRow {
            iteration: it,
            objective_before: before,
            objective_after: after,
            sigma2: new_sigma2,
        });

        let change = relative_change(new_beta.as_slice(), beta.as_slice())
            .max(relative_change(new_xi.as_slice(), xi.as_slice()))
            .max(relative_change(&[new_sigma2], &[sigma2]));
        eta = &design * &new_beta;
        for i in 0..n {
            eta[i] += new_xi[index[i]];
        }
        beta = new_beta;
        xi = new_xi;
        sigma2 = new_sigma2;
        if it > 1 && change < settings.fit.outer_tol {
            converged = true;
            break;
        }
    }

    Ok(RidgeMixedModel {
        beta,
        xi,
        sigma2,
        lambda,
        family,
        response: k,
        groups: groups.labels().to_vec(),
        standardization: ds.standardization().clone(),
        converged,
        iterations,
        trace,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LambdaScore {
    pub lambda: f64,
    pub mean_deviance: f64,
    pub std_error: f64,
}

/// Grouped K-fold choice of λ for response k (smallest mean held-out
/// deviance per observation, ties to the larger λ).
pub fn select_lambda(
    ds: &Dataset,
    family: Family,
    k: usize,
    lambdas: &[f64],
    config: &CvConfig,
) -> Result<(f64, Vec<LambdaScore>)> {
    if lambdas.is_empty() {
        return Err(Error::Config("empty lambda grid".into()));
    }
    let fold_of = group_folds(ds.n_groups(), config.folds, config.seed)?;
    let splits: Vec<(Dataset, Dataset)> = fold_rows(ds, &fold_of, config.folds)
        .iter()
        .map(|(train, test)| split(ds, train, test, config.standardize))
        .collect::<Result<_>>()?;
    let scores: Vec<LambdaScore> = lambdas
        .par_iter()
        .map(|&lambda| {
            let per_fold: Vec<f64> = splits
                .iter()
                .map(|(train, test)| {
                    fit_ridge_mixed(train, family, k, lambda, &config.settings)
                        .and_then(|m| holdout(&m, test, PredictionMode::Marginal))
                        .map_or(f64::INFINITY, |(dev, _)| dev)
                })
                .collect();
            let (mean_deviance, std_error) = mean_and_se(&per_fold);
            LambdaScore {
                lambda,
                mean_deviance,
                std_error,
            }
        })
        .collect();
    let best = (0..scores.len())
        .min_by(|&a, &b| {
            scores[a]
                .mean_deviance
                .total_cmp(&scores[b].mean_deviance)
                .then(scores[b].lambda.total_cmp(&scores[a].lambda))
        })
        .expect("nonempty grid");
    if !scores[best].mean_deviance.is_finite() {
        return Err(Error::InvalidData("every ridge penalty failed in some fold".into()));
    }
    Ok((scores[best].lambda, scores))
}

/// Mean held-out deviance per observation and W-weighted RMSE.
fn holdout(model: &RidgeMixedModel, test: &Dataset, mode: PredictionMode) -> Result<(f64, f64)> {
    let mu = model.fitted(test, mode)?;
    let y = test.y().column(model.response).into_owned();
    Ok(scores(&y, &mu, model.family, test))
}

fn scores(y: &DVector<f64>, mu: &DVector<f64>, family: Family, test: &Dataset) -> (f64, f64) {
    let dev = deviance(y, mu, family, Some(&test.prior_weights())) / test.n() as f64;
    let w = test.weights();
    let mse: f64 = (0..y.len()).map(|i| w[i] * (y[i] - mu[i]).powi(2)).sum();
    (dev, mse.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub response: String,
    /// "H=..;s=..;l=.." for component regression, "lambda=.." for ridge.
    pub tuning: String,
    pub holdout_deviance: f64,
    pub holdout_rmse: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompareConfig {
    pub cv: CvConfig,
    pub grid: CvGrid,
    pub lambdas: Vec<f64>,
    /// Conditional needs every test group to appear in training.
    pub mode: PredictionMode,
}

/// Tunes both methods by grouped CV on `train`, refits on all of `train`,
/// and scores each response on `test`. Both datasets are raw.
pub fn compare(
    train: &Dataset,
    test: &Dataset,
    family: &FamilySpec,
    config: &CompareConfig,
) -> Result<Vec<ComparisonRow>> {
    if test.n() == 0 {
        return Err(Error::InvalidData("empty test set".into()));
    }
    if train.q() != test.q() || train.p() != test.p() {
        return Err(Error::Dimension("train and test layouts differ".into()));
    }
    let fit_ds = if config.cv.standardize {
        train.standardize()?
    } else {
        train.clone()
    };
    let test_ds = test.standardize_with(fit_ds.standardization())?;

    let cv = cross_validate(train, family, &config.grid, &config.cv)?;
    let point: TuningPoint = cv.selected;
    let params = crate::criterion::CriterionParams {
        s: point.s,
        l: point.l,
        metric: config.cv.metric,
    };
    let component_mu = if config.cv.mixed {
        let model: MixedComponentModel = fit_mixed_scglr(&fit_ds, family, point.h, &params, &config.cv.settings)?;
        model.fitted(&test_ds, config.mode)?
    } else {
        fit_scglr(&fit_ds, family, point.h, &params, &config.cv.settings.fit)?.fitted(&test_ds)?
    };

    let names = &train.schema().response;
    let mut rows = Vec::with_capacity(2 * train.q());
    for k in 0..train.q() {
        let y = test_ds.y().column(k).into_owned();
        let (dev, rmse) = scores(&y, &component_mu.column(k).into_owned(), family.get(k), &test_ds);
        rows.push(ComparisonRow {
            method: "scglr-mix".into(),
            response: names[k].clone(),
            tuning: point.to_string(),
            holdout_deviance: dev,
            holdout_rmse: rmse,
        });
    }
    let ridge_rows: Vec<ComparisonRow> = (0..train.q())
        .into_par_iter()
        .map(|k| {
            let (lambda, _) = select_lambda(train, family.get(k), k, &config.lambdas, &config.cv)?;
            let model = fit_ridge_mixed(&fit_ds, family.get(k), k, lambda, &config.cv.settings)?;
            let (dev, rmse) = holdout(&model, &test_ds, config.mode)?;
            Ok(ComparisonRow {
                method: "ridge-mix".into(),
                response: names[k].clone(),
                tuning: format!("lambda={lambda}"),
                holdout_deviance: dev,
                holdout_rmse: rmse,
            })
        })
        .collect::<Result<_>>()?;
    rows.extend(ridge_rows);
    Ok(rows)
}

/// Writes `method,response,lambda_or_(H,s,l),holdout_deviance,holdout_rmse`
/// (the third name is quoted since it contains commas).
pub fn write_comparison(rows: &[ComparisonRow], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "method",
        "response",
        "lambda_or_(H,s,l)",
        "holdout_deviance",
        "holdout_rmse",
    ])?;
    for r in rows {
        w.write_record([
            r.method.clone(),
            r.response.clone(),
            r.tuning.clone(),
            r.holdout_deviance.to_string(),
            r.holdout_rmse.to_string(),
        ])?;
    }
    w.flush().map_err(|e| Error::io(path, e))?;
    Ok(())
}
