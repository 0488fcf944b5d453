//! Grouped cross-validation over (H, s, l): whole groups are held out and
//! scored by held-out deviance under marginal prediction.

use std::fmt;

use nalgebra::DVector;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::criterion::{CriterionParams, Locality, Metric};
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::fixed::fit_scglr;
use crate::glm::{deviance, FamilySpec};
use crate::mixed::{fit_mixed_scglr, MixedSettings, PredictionMode};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TuningPoint {
    pub h: usize,
    pub s: f64,
    pub l: Locality,
}

impl fmt::Display for TuningPoint {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "H={};s={};l={}", self.h, self.s, self.l)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvGrid {
    pub h: Vec<usize>,
    pub s: Vec<f64>,
    pub l: Vec<Locality>,
}

impl CvGrid {
    /// All combinations, H slowest and l fastest.
    pub fn points(&self) -> Vec<TuningPoint> {
        let mut out = Vec::with_capacity(self.h.len() * self.s.len() * self.l.len());
        for &h in &self.h {
            for &s in &self.s {
                for &l in &self.l {
                    out.push(TuningPoint { h, s, l });
                }
            }
        }
        out
    }
}

/// How each fold is fitted and scored.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvConfig {
    pub folds: usize,
    /// Seed of the group shuffle.
    pub seed: u64,
    /// Random group intercept (mixed fit) or fixed effects only.
    pub mixed: bool,
    /// Standardize X on each training fold.
    pub standardize: bool,
    pub metric: Metric,
    pub settings: MixedSettings,
}

impl Default for CvConfig {
    fn default() -> Self {
        CvConfig {
            folds: 5,
            seed: 0,
            mixed: true,
            standardize: true,
            metric: Metric::Identity,
            settings: MixedSettings::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub point: TuningPoint,
    /// Mean over folds of the held-out deviance per observation.
    pub mean_deviance: f64,
    /// Standard error of that mean across folds.
    pub std_error: f64,
    pub fold_deviance: Vec<f64>,
    /// Folds whose fit hit an iteration cap.
    pub nonconverged: usize,
    /// Folds whose fit failed outright (scored as +∞).
    pub failed: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub rows: Vec<CvRow>,
    pub selected: TuningPoint,
    pub selected_index: usize,
}

/// Fold of every group: a seeded shuffle dealt round robin.
pub fn group_folds(n_groups: usize, folds: usize, seed: u64) -> Result<Vec<usize>> {
    if folds < 2 {
        return Err(Error::Config("need at least 2 folds".into()));
    }
    if folds > n_groups {
        return Err(Error::Config(format!("{folds} folds requested for {n_groups} groups")));
    }
    let mut order: Vec<usize> = (0..n_groups).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut fold_of = vec![0; n_groups];
    for (pos, &g) in order.iter().enumerate() {
        fold_of[g] = pos % folds;
    }
    for f in 0..folds {
        let held = fold_of.iter().filter(|&&x| x == f).count();
        if n_groups - held < 2 {
            return Err(Error::Config(format!("fold {f} leaves fewer than 2 training groups")));
        }
    }
    Ok(fold_of)
}

/// Training and held-out row sets of each fold.
pub(crate) fn fold_rows(ds: &Dataset, fold_of: &[usize], folds: usize) -> Vec<(Vec<usize>, Vec<usize>)> {
    let index = ds.groups().index();
    (0..folds)
        .map(|f| {
            let (test, train): (Vec<usize>, Vec<usize>) = (0..ds.n()).partition(|&i| fold_of[index[i]] == f);
            (train, test)
        })
        .collect()
}

/// Training fold (standardized on request) and the held-out rows in its scale.
pub(crate) fn split(ds: &Dataset, train: &[usize], test: &[usize], standardize: bool) -> Result<(Dataset, Dataset)> {
    let train_ds = ds.subset(train)?;
    let train_ds = if standardize { train_ds.standardize()? } else { train_ds };
    let test_ds = ds.subset(test)?.standardize_with(train_ds.standardization())?;
    Ok((train_ds, test_ds))
}

/// Σ_k deviance_k / n on a scored dataset with predicted means `mu` (n×q).
pub(crate) fn mean_deviance(ds: &Dataset, mu: &nalgebra::DMatrix<f64>, family: &FamilySpec) -> f64 {
    let prior = ds.prior_weights();
    (0..ds.q())
        .map(|k| {
            let y: DVector<f64> = ds.y().column(k).into_owned();
            deviance(&y, &mu.column(k).into_owned(), family.get(k), Some(&prior))
        })
        .sum::<f64>()
        / ds.n() as f64
}

pub(crate) struct Scored {
    pub score: f64,
    pub converged: bool,
}

/// Fits one tuning point on `train` and scores marginal predictions on `test`.
pub(crate) fn fit_and_score(
    train: &Dataset,
    test: &Dataset,
    family: &FamilySpec,
    point: &TuningPoint,
    config: &CvConfig,
    mode: PredictionMode,
) -> Result<Scored> {
    let params = CriterionParams {
        s: point.s,
        l: point.l,
        metric: config.metric,
    };
    if config.mixed {
        let model = fit_mixed_scglr(train, family, point.h, &params, &config.settings)?;
        let mu = model.fitted(test, mode)?;
        Ok(Scored {
            score: mean_deviance(test, &mu, family),
            converged: model.base.converged,
        })
    } else {
        let model = fit_scglr(train, family, point.h, &params, &config.settings.fit)?;
        let mu = model.fitted(test)?;
        Ok(Scored {
            score: mean_deviance(test, &mu, family),
            converged: model.converged,
        })
    }
}

/// One-standard-error choice: among points within one SE of the best mean,
/// the smallest H, then the smallest s, then the lowest mean, then the
/// earliest grid position.
pub(crate) fn one_se_choice(rows: &[CvRow]) -> usize {
    let best = (0..rows.len())
        .min_by(|&a, &b| rows[a].mean_deviance.total_cmp(&rows[b].mean_deviance))
        .expect("nonempty grid");
    let bound = rows[best].mean_deviance + rows[best].std_error;
    (0..rows.len())
        .filter(|&i| rows[i].mean_deviance <= bound)
        .min_by(|&a, &b| {
            let (pa, pb) = (&rows[a].point, &rows[b].point);
            pa.h.cmp(&pb.h)
                .then(pa.s.total_cmp(&pb.s))
                .then(rows[a].mean_deviance.total_cmp(&rows[b].mean_deviance))
                .then(a.cmp(&b))
        })
        .unwrap_or(best)
}

pub(crate) fn mean_and_se(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    if !mean.is_finite() || values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (m - 1.0);
    (mean, (var / m).sqrt())
}

/// Scores every grid point by grouped K-fold held-out deviance.
pub fn cross_validate(ds: &Dataset, family: &FamilySpec, grid: &CvGrid, config: &CvConfig) -> Result<CvResult> {
    let points = grid.points();
    if points.is_empty() {
        return Err(Error::Config("empty tuning grid".into()));
    }
    if family.len() != ds.q() {
        return Err(Error::Dimension("one family per response required".into()));
    }
    let fold_of = group_folds(ds.n_groups(), config.folds, config.seed)?;
    let splits: Vec<(Dataset, Dataset)> = fold_rows(ds, &fold_of, config.folds)
        .iter()
        .map(|(train, test)| split(ds, train, test, config.standardize))
        .collect::<Result<_>>()?;

    let rows: Vec<CvRow> = points
        .par_iter()
        .map(|point| {
            let outcomes: Vec<Result<Scored>> = splits
                .par_iter()
                .map(|(train, test)| fit_and_score(train, test, family, point, config, PredictionMode::Marginal))
                .collect();
            let mut fold_deviance = Vec::with_capacity(outcomes.len());
            let (mut nonconverged, mut failed) = (0, 0);
            for o in outcomes {
                match o {
                    Ok(s) => {
                        fold_deviance.push(s.score);
                        nonconverged += usize::from(!s.converged);
                    }
                    Err(_) => {
                        fold_deviance.push(f64::INFINITY);
                        failed += 1;
                    }
                }
            }
            let (mean_deviance, std_error) = mean_and_se(&fold_deviance);
            CvRow {
                point: *point,
                mean_deviance,
                std_error,
                fold_deviance,
                nonconverged,
                failed,
            }
        })
        .collect();

    if rows.iter().all(|r| !r.mean_deviance.is_finite()) {
        return Err(Error::InvalidData("every tuning point failed in some fold".into()));
    }
    let selected_index = one_se_choice(&rows);
    Ok(CvResult {
        selected: rows[selected_index].point,
        selected_index,
        rows,
    })
}
