//! Mixed component regression: a Schall loop per component in which each
//! outer iteration linearizes at the conditional predictor, solves
//! Henderson's equations per response at the current loading, updates the
//! variance components and then re-maximizes the component criterion.

use std::collections::HashMap;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::component::OrthoConstraints;
use crate::criterion::{CriterionParams, FitContext};
use crate::data::{Dataset, GroupDesign};
use crate::error::{Error, Result};
use crate::fixed::{
    all_working_quantities, check_fit_inputs, diagnostics_from, initial_eta, means, optimize, ComponentModel,
    FitSettings, TraceRow,
};
use crate::glm::{deviance, FamilySpec, WorkingQuantities};
use crate::henderson::{henderson_solve, update_variance, MixedState, SIGMA2_FLOOR};
use crate::linalg::{hstack, relative_change, weighted_least_squares};

const MAX_INNER_PASSES: usize = 50;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MixedSettings {
    pub fit: FitSettings,
    /// Keep ξ at 0 and σ² at the floor: the loop reduces to fixed-effects scoring.
    pub freeze_random: bool,
    /// Alternate Henderson and component steps to convergence inside each
    /// outer iteration instead of a single pass.
    pub inner_to_convergence: bool,
    /// Build ψ from z − Uξ̂ rather than the full conditional working response.
    pub psi_fixed_part: bool,
    pub initial_sigma2: f64,
}

impl Default for MixedSettings {
    fn default() -> Self {
        MixedSettings {
            fit: FitSettings {
                max_outer: 200,
                ..FitSettings::default()
            },
            freeze_random: false,
            inner_to_convergence: false,
            psi_fixed_part: false,
            initial_sigma2: 1.0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PredictionMode {
    /// Random effects set to zero.
    Marginal,
    /// Predicted group effects added inside the link.
    Conditional,
}

impl std::str::FromStr for PredictionMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "marginal" => Ok(PredictionMode::Marginal),
            "conditional" => Ok(PredictionMode::Conditional),
            other => Err(Error::Config(format!("unknown prediction mode '{other}'"))),
        }
    }
}

/// Fixed part plus per-response variance components and group effects.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedComponentModel {
    pub base: ComponentModel,
    pub sigma2: Vec<f64>,
    /// N×q random-intercept predictions, rows in `groups` order.
    pub xi_hat: DMatrix<f64>,
    /// Training group labels in encoding order.
    pub groups: Vec<String>,
    /// tr of the ξξ block of the inverse Henderson matrix at the final solve.
    pub trace_xixi: Vec<f64>,
}

impl MixedComponentModel {
    pub fn n_components(&self) -> usize {
        self.base.n_components()
    }

    pub fn prepare(&self, raw: &Dataset) -> Result<Dataset> {
        self.base.prepare(raw)
    }

    /// Final Henderson state of response k.
    pub fn state(&self, k: usize) -> MixedState {
        MixedState {
            gamma: self.base.gamma.column(k).into_owned(),
            delta: self.base.delta.column(k).into_owned(),
            xi: self.xi_hat.column(k).into_owned(),
            sigma2: self.sigma2[k],
            trace_term: self.trace_xixi[k],
        }
    }

    /// Training-encoding index of each label, listing the unknown ones on failure.
    pub fn group_index<S: AsRef<str>>(&self, labels: &[S]) -> Result<Vec<usize>> {
        let lookup: HashMap<&str, usize> = self.groups.iter().enumerate().map(|(i, g)| (g.as_str(), i)).collect();
        let mut unknown: Vec<String> = Vec::new();
        let index = labels
            .iter()
            .map(|l| {
                lookup.get(l.as_ref()).copied().unwrap_or_else(|| {
                    if !unknown.iter().any(|u| u == l.as_ref()) {
                        unknown.push(l.as_ref().to_string());
                    }
                    0
                })
            })
            .collect();
        if unknown.is_empty() {
            Ok(index)
        } else {
            Err(Error::UnknownGroups(unknown))
        }
    }

    /// n×q linear predictors; labels are only consulted in conditional mode.
    pub fn predict_eta<S: AsRef<str>>(
        &self,
        x: &DMatrix<f64>,
        t: &DMatrix<f64>,
        labels: &[S],
        mode: PredictionMode,
    ) -> Result<DMatrix<f64>> {
        let mut eta = self.base.predict_eta(x, t)?;
        if mode == PredictionMode::Conditional {
            if labels.len() != x.nrows() {
                return Err(Error::Dimension("one group label per row required".into()));
            }
            let index = self.group_index(labels)?;
            for (i, &g) in index.iter().enumerate() {
                for k in 0..eta.ncols() {
                    eta[(i, k)] += self.xi_hat[(g, k)];
                }
            }
        }
        Ok(eta)
    }

    /// n×q predicted means on a dataset in the model's scale.
    pub fn fitted(&self, ds: &Dataset, mode: PredictionMode) -> Result<DMatrix<f64>> {
        let eta = self.predict_eta(ds.x(), ds.t(), ds.groups().labels_by_row().as_slice(), mode)?;
        Ok(means(&eta, &self.base.family))
    }

    /// Deviance of response k with prior weights n·W.
    pub fn deviance(&self, ds: &Dataset, k: usize, mode: PredictionMode) -> Result<f64> {
        if k >= self.base.family.len() {
            return Err(Error::Dimension(format!("response index {k} out of range")));
        }
        let mu = self.fitted(ds, mode)?;
        let y = ds.y().column(k).into_owned();
        Ok(deviance(
            &y,
            &mu.column(k).into_owned(),
            self.base.family.get(k),
            Some(&ds.prior_weights()),
        ))
    }
}

/// Predicted means of response k for standardized X and T.
pub fn predict_mixed<S: AsRef<str>>(
    model: &MixedComponentModel,
    x: &DMatrix<f64>,
    t: &DMatrix<f64>,
    groups: &[S],
    mode: PredictionMode,
    k: usize,
) -> Result<DVector<f64>> {
    if k >= model.base.family.len() {
        return Err(Error::Dimension(format!("response index {k} out of range")));
    }
    let eta = model.predict_eta(x, t, groups, mode)?;
    let family = model.base.family.get(k);
    Ok(eta.column(k).map(|e| family.mean(e)))
}

/// Per-response estimates at one Henderson step.
#[derive(Clone)]
struct ResponseState {
    beta: DVector<f64>,
    xi: DVector<f64>,
    sigma2: f64,
    trace_xixi: f64,
}

struct StepOutcome {
    states: Vec<ResponseState>,
    clamps: usize,
}

fn henderson_step(
    design: &DMatrix<f64>,
    groups: &GroupDesign,
    wq: &[WorkingQuantities],
    states: &[ResponseState],
    settings: &MixedSettings,
    update_sigma: bool,
) -> Result<StepOutcome> {
    let results: Vec<(ResponseState, bool)> = wq
        .par_iter()
        .zip(states.par_iter())
        .map(|(w, state)| {
            if settings.freeze_random {
                let (beta, _) = weighted_least_squares(design, &w.z, &w.w);
                return Ok((
                    ResponseState {
                        beta,
                        xi: DVector::zeros(groups.n_groups()),
                        sigma2: SIGMA2_FLOOR,
                        trace_xixi: 0.0,
                    },
                    false,
                ));
            }
            let sol = henderson_solve(design, groups, &w.z, &w.w, state.sigma2)?;
            let (sigma2, clamped) = if update_sigma {
                let up = update_variance(&sol.xi, sol.trace_xixi, state.sigma2);
                (up.sigma2, up.clamped)
            } else {
                (state.sigma2, false)
            };
            Ok((
                ResponseState {
                    beta: sol.beta,
                    xi: sol.xi,
                    sigma2,
                    trace_xixi: sol.trace_xixi,
                },
                clamped,
            ))
        })
        .collect::<Result<_>>()?;
    let clamps = results.iter().filter(|(_, c)| *c).count();
    Ok(StepOutcome {
        states: results.into_iter().map(|(s, _)| s).collect(),
        clamps,
    })
}

fn conditional_eta(design: &DMatrix<f64>, groups: &GroupDesign, state: &ResponseState) -> DVector<f64> {
    let mut eta = design * &state.beta;
    for (i, &g) in groups.index().iter().enumerate() {
        eta[i] += state.xi[g];
    }
    eta
}

fn fit_context(
    ds: &Dataset,
    t_block: &DMatrix<f64>,
    wq: &[WorkingQuantities],
    states: &[ResponseState],
    settings: &MixedSettings,
) -> Result<FitContext> {
    let index = ds.groups().index();
    let z: Vec<DVector<f64>> = wq
        .iter()
        .zip(states)
        .map(|(w, s)| {
            if settings.psi_fixed_part {
                DVector::from_fn(w.z.len(), |i, _| w.z[i] - s.xi[index[i]])
            } else {
                w.z.clone()
            }
        })
        .collect();
    let w: Vec<DVector<f64>> = wq.iter().map(|v| v.w.clone()).collect();
    FitContext::new(ds.x(), ds.weights(), t_block, &z, &w)
}

fn max_change<'a>(new: impl Iterator<Item = &'a [f64]>, old: impl Iterator<Item = &'a [f64]>) -> f64 {
    new.zip(old).map(|(a, b)| relative_change(a, b)).fold(0.0, f64::max)
}

fn column(f: &DVector<f64>) -> DMatrix<f64> {
    DMatrix::from_column_slice(f.len(), 1, f.as_slice())
}

/// Fits `n_components` components with a random group intercept per response.
pub fn fit_mixed_scglr(
    ds: &Dataset,
    family: &FamilySpec,
    n_components: usize,
    params: &CriterionParams,
    settings: &MixedSettings,
) -> Result<MixedComponentModel> {
    check_fit_inputs(ds, family, n_components, params)?;
    settings.fit.validate()?;
    if ds.n_groups() < 2 {
        return Err(Error::SingleGroup);
    }
    if !(settings.initial_sigma2 > 0.0) {
        return Err(Error::Config("initial sigma2 must be positive".into()));
    }
    let n = ds.n();
    let q = ds.q();
    let x = ds.x();
    let groups = ds.groups();
    let prior = ds.prior_weights();
    let inner = settings.fit.inner();
    let tol = settings.fit.outer_tol;

    let mut eta = initial_eta(ds, family);
    let start_sigma2 = if settings.freeze_random {
        SIGMA2_FLOOR
    } else {
        settings.initial_sigma2
    };
    let mut states = vec![
        ResponseState {
            beta: DVector::zeros(0),
            xi: DVector::zeros(groups.n_groups()),
            sigma2: start_sigma2,
            trace_xixi: 0.0,
        };
        q
    ];
    let mut f_cols = DMatrix::<f64>::zeros(n, 0);
    let mut loadings = Vec::with_capacity(n_components);
    let mut diagnostics = Vec::with_capacity(n_components);
    let mut trace = Vec::new();
    let mut failed_component = None;

    for comp in 1..=n_components {
        let t_block = hstack(&[&f_cols, ds.t()], n);
        let constraints = OrthoConstraints::from_components(&f_cols, ds.weights(), x);
        let design_for = |u: &DVector<f64>| hstack(&[&f_cols, &column(&(x * u)), ds.t()], n);

        let mut wq = all_working_quantities(ds, family, &eta, &prior)?;
        let ctx = fit_context(ds, &t_block, &wq, &states, settings)?;
        let mut sol = optimize(params, &ctx, &constraints, &inner, None).map_err(|e| e.in_component(comp))?;
        let mut converged = false;
        let mut iterations = 0;
        let mut clamps = 0;

        for it in 1..=settings.fit.max_outer {
            iterations = it;
            if it > 1 {
                wq = all_working_quantities(ds, family, &eta, &prior)?;
            }
            let u_old = sol.u.clone();
            let old = states.clone();
            let mut passes = 0;
            loop {
                passes += 1;
                let design = design_for(&sol.u);
                let step =
                    henderson_step(&design, groups, &wq, &states, settings, true).map_err(|e| e.in_component(comp))?;
                clamps += step.clamps;
                states = step.states;
                for k in 0..q {
                    eta[k] = conditional_eta(&design, groups, &states[k]);
                }
                let ctx = fit_context(ds, &t_block, &wq, &states, settings)?;
                let prev_u = sol.u.clone();
                sol = optimize(params, &ctx, &constraints, &inner, Some(&prev_u)).map_err(|e| e.in_component(comp))?;
                if !settings.inner_to_convergence
                    || passes >= MAX_INNER_PASSES
                    || relative_change(sol.u.as_slice(), prev_u.as_slice()) < tol
                {
                    break;
                }
            }

            let delta_u = relative_change(sol.u.as_slice(), u_old.as_slice());
            let comparable = it > 1 && old[0].beta.len() == states[0].beta.len();
            let (delta_coef, delta_sigma2) = if comparable {
                let db = max_change(
                    states.iter().map(|s| s.beta.as_slice()),
                    old.iter().map(|s| s.beta.as_slice()),
                );
                let dx = max_change(
                    states.iter().map(|s| s.xi.as_slice()),
                    old.iter().map(|s| s.xi.as_slice()),
                );
                let new_s: Vec<f64> = states.iter().map(|s| s.sigma2).collect();
                let old_s: Vec<f64> = old.iter().map(|s| s.sigma2).collect();
                (db.max(dx), relative_change(&new_s, &old_s))
            } else {
                (f64::INFINITY, f64::INFINITY)
            };
            trace.push(TraceRow {
                component: comp,
                iteration: it,
                criterion: sol.value,
                delta_u,
                delta_coef,
                delta_sigma2,
                sigma2: states.iter().map(|s| s.sigma2).collect(),
            });
            if delta_u.max(delta_coef).max(delta_sigma2) < tol {
                converged = true;
                break;
            }
        }

        // coefficients and group effects consistent with the final loading
        let design = design_for(&sol.u);
        states = henderson_step(&design, groups, &wq, &states, settings, false)
            .map_err(|e| e.in_component(comp))?
            .states;
        for k in 0..q {
            eta[k] = conditional_eta(&design, groups, &states[k]);
        }

        if !converged && failed_component.is_none() {
            failed_component = Some(comp);
        }
        diagnostics.push(diagnostics_from(comp, iterations, converged, &sol, clamps));
        f_cols = hstack(&[&f_cols, &column(&(x * &sol.u))], n);
        loadings.push(sol.u);
    }

    let h = n_components;
    let r = ds.r();
    let base = ComponentModel {
        loadings: DMatrix::from_columns(&loadings),
        components: f_cols,
        gamma: DMatrix::from_fn(h, q, |i, k| states[k].beta[i]),
        delta: DMatrix::from_fn(r, q, |i, k| states[k].beta[h + i]),
        params: *params,
        family: family.clone(),
        schema: ds.schema().clone(),
        standardization: ds.standardization().clone(),
        diagnostics,
        trace,
        converged: failed_component.is_none(),
        failed_component,
    };
    Ok(MixedComponentModel {
        base,
        sigma2: states.iter().map(|s| s.sigma2).collect(),
        xi_hat: DMatrix::from_fn(groups.n_groups(), q, |g, k| states[k].xi[g]),
        groups: groups.labels().to_vec(),
        trace_xixi: states.iter().map(|s| s.trace_xixi).collect(),
    })
}
