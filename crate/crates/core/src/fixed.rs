//! Fixed-effects component regression: Fisher scoring in which each outer
//! iteration recomputes the working quantities, re-maximizes the component
//! criterion for the current loading and refits the per-response
//! coefficients on [F, T] by weighted least squares.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::{
    maximize_component, maximize_component_from, ComponentSolution, OptimizerDiagnostics, OptimizerSettings,
    OrthoConstraints,
};
use crate::criterion::{CriterionParams, FitContext};
use crate::data::{Dataset, Schema, Standardization};
use crate::error::{Error, Result};
use crate::glm::{deviance, working_quantities_weighted, Family, FamilySpec, WorkingQuantities};
use crate::linalg::{hstack, relative_change, weighted_least_squares};

/// Ceiling on the optimizer tolerance inside the estimation loops, so that
/// the loading settles well below the outer convergence threshold.
pub(crate) const INNER_TOL: f64 = 1e-14;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FitSettings {
    pub optimizer: OptimizerSettings,
    pub max_outer: usize,
    /// Threshold on the largest relative ℓ∞ change of the parameters.
    pub outer_tol: f64,
}

impl Default for FitSettings {
    fn default() -> Self {
        FitSettings {
            optimizer: OptimizerSettings::default(),
            max_outer: 100,
            outer_tol: 1e-6,
        }
    }
}

impl FitSettings {
    pub fn validate(&self) -> Result<()> {
        self.optimizer.validate()?;
        if self.max_outer == 0 {
            return Err(Error::Config("max_outer must be at least 1".into()));
        }
        if !(self.outer_tol > 0.0) {
            return Err(Error::Config("outer_tol must be positive".into()));
        }
        Ok(())
    }

    pub(crate) fn inner(&self) -> OptimizerSettings {
        OptimizerSettings {
            tol: self.optimizer.tol.min(INNER_TOL),
            ..self.optimizer.clone()
        }
    }
}

/// Per-component summary of the estimation loop.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComponentDiagnostics {
    /// 1-based component index.
    pub component: usize,
    pub outer_iterations: usize,
    pub converged: bool,
    /// Combined criterion at the final loading.
    pub criterion: f64,
    pub optimizer_iterations: usize,
    pub optimizer_converged: bool,
    pub restarts: usize,
    pub converged_restarts: usize,
    pub degenerate: bool,
    /// Number of variance updates that hit a clamp or guard (mixed fits only).
    pub variance_clamps: usize,
}

/// One outer iteration of one component.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub component: usize,
    pub iteration: usize,
    pub criterion: f64,
    /// Relative ℓ∞ change of u since the previous iterate (infinite when there is none).
    pub delta_u: f64,
    pub delta_coef: f64,
    pub delta_sigma2: f64,
    pub sigma2: Vec<f64>,
}

/// Fitted fixed-effects component model. Matrices refer to the working
/// (standardized) scale of the training data.
#[derive(Clone, Debug, PartialEq)]
pub struct ComponentModel {
    /// p×H loadings, one column per component.
    pub loadings: DMatrix<f64>,
    /// n×H training components F = X·loadings.
    pub components: DMatrix<f64>,
    /// H×q component coefficients.
    pub gamma: DMatrix<f64>,
    /// r×q coefficients on T (intercept first when present).
    pub delta: DMatrix<f64>,
    pub params: CriterionParams,
    pub family: FamilySpec,
    pub schema: Schema,
    pub standardization: Standardization,
    pub diagnostics: Vec<ComponentDiagnostics>,
    pub trace: Vec<TraceRow>,
    pub converged: bool,
    /// First component (1-based) whose loop hit the iteration cap.
    pub failed_component: Option<usize>,
}

impl ComponentModel {
    pub fn n_components(&self) -> usize {
        self.loadings.ncols()
    }

    /// Applies the training standardization to a raw dataset.
    pub fn prepare(&self, raw: &Dataset) -> Result<Dataset> {
        raw.standardize_with(&self.standardization)
    }

    /// n×q linear predictors for standardized X and T (T with intercept).
    pub fn predict_eta(&self, x: &DMatrix<f64>, t: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.loadings.nrows() {
            return Err(Error::Dimension(format!(
                "expected {} explanatory columns, got {}",
                self.loadings.nrows(),
                x.ncols()
            )));
        }
        if t.ncols() != self.delta.nrows() || t.nrows() != x.nrows() {
            return Err(Error::Dimension(format!(
                "expected {} additional columns (with intercept), got {}",
                self.delta.nrows(),
                t.ncols()
            )));
        }
        Ok(x * &self.loadings * &self.gamma + t * &self.delta)
    }

    /// Predicted means of response k.
    pub fn predict(&self, x: &DMatrix<f64>, t: &DMatrix<f64>, k: usize) -> Result<DVector<f64>> {
        self.check_response(k)?;
        let eta = self.predict_eta(x, t)?;
        let family = self.family.get(k);
        Ok(eta.column(k).map(|e| family.mean(e)))
    }

    /// n×q predicted means on a dataset already in the model's scale.
    pub fn fitted(&self, ds: &Dataset) -> Result<DMatrix<f64>> {
        let eta = self.predict_eta(ds.x(), ds.t())?;
        Ok(means(&eta, &self.family))
    }

    /// Deviance of response k on a dataset in the model's scale, with prior
    /// weights n·W.
    pub fn deviance(&self, ds: &Dataset, k: usize) -> Result<f64> {
        self.check_response(k)?;
        let mu = self.fitted(ds)?;
        let y = ds.y().column(k).into_owned();
        Ok(deviance(
            &y,
            &mu.column(k).into_owned(),
            self.family.get(k),
            Some(&ds.prior_weights()),
        ))
    }

    fn check_response(&self, k: usize) -> Result<()> {
        if k >= self.family.len() {
            return Err(Error::Dimension(format!(
                "response index {k} out of range for {} responses",
                self.family.len()
            )));
        }
        Ok(())
    }
}

pub(crate) fn means(eta: &DMatrix<f64>, family: &FamilySpec) -> DMatrix<f64> {
    let mut mu = eta.clone();
    for (k, mut col) in mu.column_iter_mut().enumerate() {
        let f = family.get(k);
        col.apply(|e| *e = f.mean(*e));
    }
    mu
}

/// Shared argument checks of the component fits.
pub(crate) fn check_fit_inputs(
    ds: &Dataset,
    family: &FamilySpec,
    n_components: usize,
    params: &CriterionParams,
) -> Result<()> {
    params.validate()?;
    if family.len() != ds.q() {
        return Err(Error::Dimension(format!(
            "{} families given for {} responses",
            family.len(),
            ds.q()
        )));
    }
    family.validate(ds.y())?;
    if n_components == 0 {
        return Err(Error::Config("number of components must be at least 1".into()));
    }
    if n_components > ds.p() {
        return Err(Error::Config(format!(
            "{n_components} components requested with only {} explanatory columns",
            ds.p()
        )));
    }
    Ok(())
}

/// Starting linear predictors from the family's adjusted link of y.
pub(crate) fn initial_eta(ds: &Dataset, family: &FamilySpec) -> Vec<DVector<f64>> {
    (0..ds.q())
        .map(|k| {
            let f = family.get(k);
            ds.y().column(k).map(|y| f.initial_eta(y))
        })
        .collect()
}

pub(crate) fn all_working_quantities(
    ds: &Dataset,
    family: &FamilySpec,
    eta: &[DVector<f64>],
    prior: &DVector<f64>,
) -> Result<Vec<WorkingQuantities>> {
    (0..ds.q())
        .into_par_iter()
        .map(|k| {
            let y = ds.y().column(k).into_owned();
            working_quantities_weighted(&y, &eta[k], family.get(k), Some(prior))
        })
        .collect()
}

/// Maximizes the criterion, from full restarts or warm from `start`; a
/// restart set that fails to converge still yields its best iterate.
pub(crate) fn optimize(
    params: &CriterionParams,
    ctx: &FitContext,
    constraints: &OrthoConstraints,
    settings: &OptimizerSettings,
    start: Option<&DVector<f64>>,
) -> Result<ComponentSolution> {
    let result = match start {
        Some(u) => maximize_component_from(params, ctx, constraints, settings, u),
        None => maximize_component(params, ctx, constraints, settings),
    };
    match result {
        Err(Error::NotConverged { u, value }) => Ok(ComponentSolution {
            u,
            value,
            diagnostics: OptimizerDiagnostics {
                iterations: settings.max_iter,
                restarts: if start.is_some() { 1 } else { settings.n_restarts + 1 },
                converged_restarts: 0,
                best_restart: 0,
                converged: false,
                trace: Vec::new(),
                degenerate: false,
            },
        }),
        other => other,
    }
}

/// Iteratively reweighted least squares at a fixed design, started from
/// `coef`, with step halving on the deviance.
pub(crate) fn irls(
    design: &DMatrix<f64>,
    y: &DVector<f64>,
    family: Family,
    prior: &DVector<f64>,
    coef: DVector<f64>,
) -> Result<DVector<f64>> {
    let mut coef = coef;
    let mut eta = design * &coef;
    let dev_of = |eta: &DVector<f64>| deviance(y, &eta.map(|e| family.mean(e)), family, Some(prior));
    let mut dev = dev_of(&eta);
    for _ in 0..100 {
        let wq = working_quantities_weighted(y, &eta, family, Some(prior))?;
        let (mut next, _) = weighted_least_squares(design, &wq.z, &wq.w);
        let mut next_eta = design * &next;
        let mut next_dev = dev_of(&next_eta);
        let mut halvings = 0;
        while next_dev > dev && halvings < 20 {
            next = (&next + &coef) * 0.5;
            next_eta = design * &next;
            next_dev = dev_of(&next_eta);
            halvings += 1;
        }
        if next_dev > dev {
            break;
        }
        let change = relative_change(next.as_slice(), coef.as_slice());
        coef = next;
        eta = next_eta;
        let gain = dev - next_dev;
        dev = next_dev;
        if change < 1e-12 || gain <= 1e-15 * dev.max(1.0) {
            break;
        }
    }
    Ok(coef)
}

pub(crate) fn diagnostics_from(
    component: usize,
    outer_iterations: usize,
    converged: bool,
    sol: &ComponentSolution,
    variance_clamps: usize,
) -> ComponentDiagnostics {
    ComponentDiagnostics {
        component,
        outer_iterations,
        converged,
        criterion: sol.value,
        optimizer_iterations: sol.diagnostics.iterations,
        optimizer_converged: sol.diagnostics.converged,
        restarts: sol.diagnostics.restarts,
        converged_restarts: sol.diagnostics.converged_restarts,
        degenerate: sol.diagnostics.degenerate,
        variance_clamps,
    }
}

/// Fits `n_components` components sequentially. Component h + 1 is
/// W-orthogonal to the earlier ones, which join T in both ψ and the
/// coefficient regression.
pub fn fit_scglr(
    ds: &Dataset,
    family: &FamilySpec,
    n_components: usize,
    params: &CriterionParams,
    settings: &FitSettings,
) -> Result<ComponentModel> {
    check_fit_inputs(ds, family, n_components, params)?;
    settings.validate()?;
    let n = ds.n();
    let q = ds.q();
    let x = ds.x();
    let w_obs = ds.weights();
    let prior = ds.prior_weights();
    let inner = settings.inner();
    let single_pass = family.all_gaussian();

    let mut eta = initial_eta(ds, family);
    let mut f_cols = DMatrix::<f64>::zeros(n, 0);
    let mut loadings: Vec<DVector<f64>> = Vec::with_capacity(n_components);
    let mut coefs: Vec<DVector<f64>> = Vec::new();
    let mut diagnostics = Vec::with_capacity(n_components);
    let mut trace = Vec::new();
    let mut failed_component = None;

    for comp in 1..=n_components {
        let t_block = hstack(&[&f_cols, ds.t()], n);
        let constraints = OrthoConstraints::from_components(&f_cols, w_obs, x);
        let mut u: Option<DVector<f64>> = None;
        let mut last: Option<ComponentSolution> = None;
        let mut converged = false;
        let mut iterations = 0;

        for it in 1..=settings.max_outer {
            iterations = it;
            let wq = all_working_quantities(ds, family, &eta, &prior)?;
            let z: Vec<_> = wq.iter().map(|v| v.z.clone()).collect();
            let w: Vec<_> = wq.iter().map(|v| v.w.clone()).collect();
            let ctx = FitContext::new(x, w_obs, &t_block, &z, &w)?;
            let sol = optimize(params, &ctx, &constraints, &inner, u.as_ref()).map_err(|e| e.in_component(comp))?;

            let f = x * &sol.u;
            let design = hstack(&[&f_cols, &DMatrix::from_column_slice(n, 1, f.as_slice()), ds.t()], n);
            let new_coefs: Vec<DVector<f64>> = (0..q)
                .into_par_iter()
                .map(|k| weighted_least_squares(&design, &z[k], &w[k]).0)
                .collect();
            for k in 0..q {
                eta[k] = &design * &new_coefs[k];
            }

            let delta_u = u
                .as_ref()
                .map_or(f64::INFINITY, |old| relative_change(sol.u.as_slice(), old.as_slice()));
            let delta_coef = if coefs.len() == q && coefs[0].len() == new_coefs[0].len() && it > 1 {
                (0..q)
                    .map(|k| relative_change(new_coefs[k].as_slice(), coefs[k].as_slice()))
                    .fold(0.0, f64::max)
            } else {
                f64::INFINITY
            };
            trace.push(TraceRow {
                component: comp,
                iteration: it,
                criterion: sol.value,
                delta_u,
                delta_coef,
                delta_sigma2: 0.0,
                sigma2: Vec::new(),
            });
            u = Some(sol.u.clone());
            coefs = new_coefs;
            last = Some(sol);

            // gaussian working quantities do not move, so one pass is the fixed point
            if single_pass || delta_u.max(delta_coef) < settings.outer_tol {
                converged = true;
                break;
            }
        }

        let sol = last.expect("at least one outer iteration");
        if !converged && failed_component.is_none() {
            failed_component = Some(comp);
        }
        diagnostics.push(diagnostics_from(comp, iterations, converged, &sol, 0));
        let f = x * &sol.u;
        f_cols = hstack(&[&f_cols, &DMatrix::from_column_slice(n, 1, f.as_slice())], n);
        loadings.push(sol.u);
    }

    // final scoring at the extracted components
    let design = hstack(&[&f_cols, ds.t()], n);
    let coefs: Vec<DVector<f64>> = (0..q)
        .into_par_iter()
        .map(|k| {
            let y = ds.y().column(k).into_owned();
            irls(&design, &y, family.get(k), &prior, coefs[k].clone())
        })
        .collect::<Result<_>>()?;

    let h = n_components;
    let r = ds.r();
    let gamma = DMatrix::from_fn(h, q, |i, k| coefs[k][i]);
    let delta = DMatrix::from_fn(r, q, |i, k| coefs[k][h + i]);
    Ok(ComponentModel {
        loadings: DMatrix::from_columns(&loadings),
        components: f_cols,
        gamma,
        delta,
        params: *params,
        family: family.clone(),
        schema: ds.schema().clone(),
        standardization: ds.standardization().clone(),
        diagnostics,
        trace,
        converged: failed_component.is_none(),
        failed_component,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::criterion::{goodness_of_fit, Locality, Metric};
    use crate::linalg::weighted_cross;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn dataset(n: usize, p: usize, q: usize, family: Family, seed: u64) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = DMatrix::from_fn(n, p, |_, _| rng.random_range(-1.0..1.0));
        let score: DVector<f64> = DVector::from_fn(n, |i, _| x[(i, 0)] + x[(i, 1)]);
        let y = DMatrix::from_fn(n, q, |i, k| {
            let eta = 0.6 * score[i] * (k as f64 + 1.0) / q as f64;
            match family {
                Family::Gaussian => eta + 0.5 * rng.random_range(-1.0..1.0),
                _ => family.sample(family.mean(eta), &mut rng),
            }
        });
        let labels: Vec<String> = (0..n).map(|i| format!("g{}", i % 5)).collect();
        let schema = Schema::new(
            (0..q).map(|k| format!("y{k}")),
            (0..p).map(|j| format!("x{j}")),
            Vec::<String>::new(),
            "g",
        );
        Dataset::new(schema, y, x, DMatrix::zeros(n, 0), &labels, None)
            .unwrap()
            .standardize()
            .unwrap()
    }

    fn settings() -> FitSettings {
        FitSettings {
            optimizer: OptimizerSettings {
                n_restarts: 4,
                seed: 7,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn components_are_orthogonal_and_normalized() {
        let ds = dataset(60, 6, 2, Family::Poisson, 1);
        for metric in [Metric::Identity, Metric::Gram] {
            let params = CriterionParams {
                metric,
                ..CriterionParams::new(0.5, Locality::Finite(2.0))
            };
            let fam = FamilySpec::uniform(Family::Poisson, 2);
            let model = fit_scglr(&ds, &fam, 3, &params, &settings()).unwrap();
            let gram = weighted_cross(&model.components, ds.weights(), &model.components);
            for a in 0..3 {
                for b in 0..3 {
                    if a != b {
                        assert!(gram[(a, b)].abs() < 1e-8, "F'WF[{a},{b}] = {}", gram[(a, b)]);
                    }
                }
                let u = model.loadings.column(a);
                let norm = match metric {
                    Metric::Identity => u.dot(&u),
                    Metric::Gram => gram[(a, a)],
                };
                assert!((norm - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn gaussian_fit_takes_one_outer_iteration() {
        let ds = dataset(40, 5, 2, Family::Gaussian, 2);
        let fam = FamilySpec::uniform(Family::Gaussian, 2);
        let model = fit_scglr(&ds, &fam, 2, &CriterionParams::default(), &settings()).unwrap();
        assert!(model.diagnostics.iter().all(|d| d.outer_iterations == 1 && d.converged));
    }

    #[test]
    fn single_component_psi_matches_grid_search() {
        let ds = dataset(30, 3, 1, Family::Gaussian, 3);
        let fam = FamilySpec::uniform(Family::Gaussian, 1);
        let params = CriterionParams::new(0.0, Locality::Finite(1.0));
        let model = fit_scglr(&ds, &fam, 1, &params, &settings()).unwrap();

        let z = vec![ds.y().column(0).into_owned()];
        let w = vec![ds.prior_weights()];
        let empty = DMatrix::zeros(30, 0);
        let ctx = FitContext::new(ds.x(), ds.weights(), &empty, &z, &w).unwrap();
        let fitted = goodness_of_fit(&model.loadings.column(0).into_owned(), &ctx);
        // Fibonacci sphere grid
        let m = 10_000;
        let golden = std::f64::consts::PI * (3.0 - 5f64.sqrt());
        let best = (0..m)
            .map(|i| {
                let zc = 1.0 - 2.0 * (i as f64 + 0.5) / m as f64;
                let rad = (1.0 - zc * zc).sqrt();
                let th = golden * i as f64;
                let u = DVector::from_vec(vec![rad * th.cos(), rad * th.sin(), zc]);
                goodness_of_fit(&u, &ctx)
            })
            .fold(f64::MIN, f64::max);
        assert!(fitted >= best - 1e-5 * best.abs(), "fitted {fitted} grid {best}");
    }

    #[test]
    fn poisson_fit_improves_on_intercept_only() {
        let ds = dataset(80, 6, 1, Family::Poisson, 4);
        let fam = FamilySpec::uniform(Family::Poisson, 1);
        let model = fit_scglr(&ds, &fam, 1, &CriterionParams::default(), &settings()).unwrap();
        let dev = model.deviance(&ds, 0).unwrap();
        let y = ds.y().column(0).into_owned();
        let ybar = y.dot(ds.weights());
        let null = deviance(
            &y,
            &DVector::from_element(80, ybar),
            Family::Poisson,
            Some(&ds.prior_weights()),
        );
        assert!(dev <= null);

        // independent scoring fit on the same component
        let design = hstack(&[&model.components, ds.t()], 80);
        let coef = irls(&design, &y, Family::Poisson, &ds.prior_weights(), DVector::zeros(2)).unwrap();
        let eta = &design * &coef;
        let other = deviance(&y, &eta.map(f64::exp), Family::Poisson, Some(&ds.prior_weights()));
        assert!((dev - other).abs() < 1e-8 * other.max(1.0));
    }

    #[test]
    fn adding_a_component_never_hurts() {
        let ds = dataset(70, 7, 2, Family::Bernoulli, 5);
        let fam = FamilySpec::uniform(Family::Bernoulli, 2);
        let params = CriterionParams::new(0.3, Locality::Finite(1.0));
        let mut prev: Option<ComponentModel> = None;
        for h in 1..=3 {
            let model = fit_scglr(&ds, &fam, h, &params, &settings()).unwrap();
            if let Some(p) = &prev {
                for k in 0..2 {
                    assert!(model.deviance(&ds, k).unwrap() <= p.deviance(&ds, k).unwrap() + 1e-8);
                }
            }
            prev = Some(model);
        }
    }

    #[test]
    fn locality_is_irrelevant_at_s_zero() {
        let ds = dataset(50, 5, 2, Family::Poisson, 6);
        let fam = FamilySpec::uniform(Family::Poisson, 2);
        let a = fit_scglr(
            &ds,
            &fam,
            2,
            &CriterionParams::new(0.0, Locality::Finite(1.0)),
            &settings(),
        )
        .unwrap();
        let b = fit_scglr(
            &ds,
            &fam,
            2,
            &CriterionParams::new(0.0, Locality::Finite(4.0)),
            &settings(),
        )
        .unwrap();
        assert_eq!(a.loadings, b.loadings);
        assert_eq!(a.gamma, b.gamma);
    }

    #[test]
    fn prediction_contracts() {
        let ds = dataset(40, 4, 1, Family::Gaussian, 8);
        let fam = FamilySpec::uniform(Family::Gaussian, 1);
        let model = fit_scglr(&ds, &fam, 1, &CriterionParams::default(), &settings()).unwrap();
        let fitted = model.fitted(&ds).unwrap();
        let row = ds.x().rows(3, 1).into_owned();
        let pred = model.predict(&row, &ds.t().rows(3, 1).into_owned(), 0).unwrap();
        assert!((pred[0] - fitted[(3, 0)]).abs() < 1e-12);

        let zero = DMatrix::zeros(1, 4);
        let one = DMatrix::from_element(1, 1, 1.0);
        let pred = model.predict(&zero, &one, 0).unwrap();
        assert_eq!(pred[0], model.delta[(0, 0)]);

        let mut pois = model.clone();
        pois.family = FamilySpec::uniform(Family::Poisson, 1);
        pois.delta[(0, 0)] = 45.0;
        let pred = pois.predict(&zero, &one, 0).unwrap();
        assert_eq!(pred[0], 30f64.exp());

        assert!(model.predict(&DMatrix::zeros(1, 3), &one, 0).is_err());
    }

    #[test]
    fn rejects_bad_component_counts() {
        let ds = dataset(20, 3, 1, Family::Gaussian, 9);
        let fam = FamilySpec::uniform(Family::Gaussian, 1);
        assert!(fit_scglr(&ds, &fam, 0, &CriterionParams::default(), &settings()).is_err());
        assert!(fit_scglr(&ds, &fam, 4, &CriterionParams::default(), &settings()).is_err());
    }
}
