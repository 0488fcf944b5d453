//! Grouped multivariate GLM data with a known bundle structure in X.
//!
//! Each bundle b has an independent standard gaussian factor F_b and
//! columns x_j = √ρ_b F_b + √(1 − ρ_b) ε_j, so columns of one bundle share
//! correlation ρ_b. Columns outside every bundle are pure noise. The true
//! loading puts weight on the predictive bundles; the resulting component is
//! scaled to unit variance before entering η = γ f + Tδ + Uξ.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, Schema};
use crate::error::{Error, Result};
use crate::glm::Family;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bundle {
    pub size: usize,
    /// Within-bundle correlation, in [0, 1).
    pub rho: f64,
    /// Weight of the bundle in the true loading; 0 for a nuisance bundle.
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub n: usize,
    pub n_groups: usize,
    pub p: usize,
    pub q: usize,
    /// Additional covariates besides the intercept.
    pub r_additional: usize,
    pub bundles: Vec<Bundle>,
    pub family: Family,
    /// True random-intercept variance per response.
    pub sigma2: Vec<f64>,
    /// Coefficient of the true component per response.
    pub gamma: Vec<f64>,
    /// Per response: intercept followed by the additional-covariate coefficients.
    pub delta: Vec<Vec<f64>>,
    /// Explicit group sizes; balanced n / n_groups when absent.
    pub group_sizes: Option<Vec<usize>>,
    /// η is clipped to [−eta_bound, eta_bound].
    pub eta_bound: f64,
    pub seed: u64,
}

impl SimConfig {
    /// One predictive bundle of min(10, p) columns at ρ = 0.9, γ = 0.5,
    /// σ² = 0.5, intercept 1 for poisson and 0 otherwise.
    pub fn new(n: usize, n_groups: usize, p: usize, q: usize, family: Family) -> Self {
        let intercept = if family == Family::Poisson { 1.0 } else { 0.0 };
        SimConfig {
            n,
            n_groups,
            p,
            q,
            r_additional: 0,
            bundles: vec![Bundle {
                size: p.min(10),
                rho: 0.9,
                weight: 1.0,
            }],
            family,
            sigma2: vec![0.5; q],
            gamma: vec![0.5; q],
            delta: vec![vec![intercept]; q],
            group_sizes: None,
            eta_bound: 3.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Config(msg));
        if self.n < 2 || self.p == 0 || self.q == 0 || self.n_groups == 0 {
            return bad("need n >= 2 and p, q, groups >= 1".into());
        }
        let used: usize = self.bundles.iter().map(|b| b.size).sum();
        if used > self.p {
            return bad(format!("bundles use {used} columns but p = {}", self.p));
        }
        if let Some(b) = self.bundles.iter().find(|b| !(0.0..1.0).contains(&b.rho)) {
            return bad(format!("bundle correlation {} outside [0, 1)", b.rho));
        }
        if self.bundles.iter().all(|b| b.weight == 0.0 || b.size == 0) {
            return bad("at least one bundle needs a nonzero weight".into());
        }
        if self.sigma2.len() != self.q || self.gamma.len() != self.q || self.delta.len() != self.q {
            return bad("sigma2, gamma and delta need one entry per response".into());
        }
        if self.sigma2.iter().any(|&s| !(s >= 0.0)) {
            return bad("sigma2 must be nonnegative".into());
        }
        if self.delta.iter().any(|d| d.len() != 1 + self.r_additional) {
            return bad(format!("each delta row needs {} entries", 1 + self.r_additional));
        }
        if !(self.eta_bound > 0.0) {
            return bad("eta_bound must be positive".into());
        }
        match &self.group_sizes {
            Some(sizes) => {
                if sizes.len() != self.n_groups || sizes.iter().sum::<usize>() != self.n || sizes.contains(&0) {
                    return bad("group sizes must be positive and sum to n".into());
                }
            }
            None => {
                if !self.n.is_multiple_of(self.n_groups) {
                    return bad(format!("n = {} not divisible by {} groups", self.n, self.n_groups));
                }
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BundleTruth {
    /// First column of the bundle.
    pub start: usize,
    pub size: usize,
    pub rho: f64,
    pub weight: f64,
    /// Unit loading spread evenly over the bundle's columns.
    pub loading: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    /// Unit-norm true loading, supported on the predictive bundles.
    pub u_true: Vec<f64>,
    pub bundles: Vec<BundleTruth>,
    /// Random intercepts, one row per group (encoding order), one column per response.
    pub xi_true: Vec<Vec<f64>>,
    /// Conditional linear predictor, one row per observation.
    pub eta_true: Vec<Vec<f64>>,
    pub sigma2: Vec<f64>,
    pub gamma: Vec<f64>,
    pub delta: Vec<Vec<f64>>,
    pub family: Family,
    pub seed: u64,
}

impl GroundTruth {
    pub fn u_true(&self) -> DVector<f64> {
        DVector::from_column_slice(&self.u_true)
    }
}

fn standardize_columns(m: &mut DMatrix<f64>) {
    let n = m.nrows() as f64;
    for mut col in m.column_iter_mut() {
        let mean = col.sum() / n;
        col.add_scalar_mut(-mean);
        let sd = (col.norm_squared() / n).sqrt();
        if sd > 0.0 {
            col /= sd;
        }
    }
}

/// Draws one dataset; identical configs give bit-identical output.
pub fn gen_grouped_data(cfg: &SimConfig) -> Result<(Dataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let (n, p, q) = (cfg.n, cfg.p, cfg.q);
    let mut normal = || -> f64 { StandardNormal.sample(&mut rng) };

    let mut x = DMatrix::zeros(n, p);
    let mut bundles = Vec::with_capacity(cfg.bundles.len());
    let mut u = DVector::zeros(p);
    let mut start = 0;
    for b in &cfg.bundles {
        let factor: Vec<f64> = (0..n).map(|_| normal()).collect();
        let (a, e) = (b.rho.sqrt(), (1.0 - b.rho).sqrt());
        for j in start..start + b.size {
            for i in 0..n {
                x[(i, j)] = a * factor[i] + e * normal();
            }
        }
        let mut loading = vec![0.0; p];
        let unit = 1.0 / (b.size as f64).sqrt();
        for (j, l) in loading.iter_mut().enumerate().skip(start).take(b.size) {
            *l = unit;
            u[j] += b.weight * unit;
        }
        bundles.push(BundleTruth {
            start,
            size: b.size,
            rho: b.rho,
            weight: b.weight,
            loading,
        });
        start += b.size;
    }
    for j in start..p {
        for i in 0..n {
            x[(i, j)] = normal();
        }
    }
    standardize_columns(&mut x);
    u /= u.norm();

    let mut additional = DMatrix::from_fn(n, cfg.r_additional, |_, _| normal());
    standardize_columns(&mut additional);

    let mut component = DMatrix::from_column_slice(n, 1, (&x * &u).as_slice());
    standardize_columns(&mut component);

    let sizes = cfg
        .group_sizes
        .clone()
        .unwrap_or_else(|| vec![n / cfg.n_groups; cfg.n_groups]);
    let width = cfg.n_groups.to_string().len();
    let mut labels = Vec::with_capacity(n);
    let mut group_of = Vec::with_capacity(n);
    for (g, &size) in sizes.iter().enumerate() {
        for _ in 0..size {
            labels.push(format!("g{:0width$}", g + 1));
            group_of.push(g);
        }
    }

    let mut xi = DMatrix::zeros(cfg.n_groups, q);
    for k in 0..q {
        if cfg.sigma2[k] > 0.0 {
            let dist = Normal::new(0.0, cfg.sigma2[k].sqrt()).map_err(|e| Error::Config(e.to_string()))?;
            for g in 0..cfg.n_groups {
                xi[(g, k)] = dist.sample(&mut rng);
            }
        }
    }

    let mut eta = DMatrix::zeros(n, q);
    let mut y = DMatrix::zeros(n, q);
    for k in 0..q {
        for i in 0..n {
            let mut e = cfg.gamma[k] * component[(i, 0)] + cfg.delta[k][0] + xi[(group_of[i], k)];
            for c in 0..cfg.r_additional {
                e += cfg.delta[k][1 + c] * additional[(i, c)];
            }
            eta[(i, k)] = e.clamp(-cfg.eta_bound, cfg.eta_bound);
        }
    }
    for k in 0..q {
        for i in 0..n {
            y[(i, k)] = cfg.family.sample(cfg.family.mean(eta[(i, k)]), &mut rng);
        }
    }

    let schema = Schema::new(
        (1..=q).map(|k| format!("y{k}")),
        (1..=p).map(|j| format!("x{j}")),
        (1..=cfg.r_additional).map(|j| format!("t{j}")),
        "group",
    );
    let ds = Dataset::new(schema, y, x, additional, &labels, None)?;
    let rows = |m: &DMatrix<f64>| m.row_iter().map(|r| r.iter().copied().collect()).collect();
    let truth = GroundTruth {
        u_true: u.as_slice().to_vec(),
        bundles,
        xi_true: rows(&xi),
        eta_true: rows(&eta),
        sigma2: cfg.sigma2.clone(),
        gamma: cfg.gamma.clone(),
        delta: cfg.delta.clone(),
        family: cfg.family,
        seed: cfg.seed,
    };
    Ok((ds, truth))
}
