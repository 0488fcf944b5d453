//! Structural relevance φ, goodness of fit ψ and their combination
//! φ^s · ψ^(1−s), with analytic gradients.
//!
//! φ(u) = (Σ_j ⟨Xu | x_j⟩_W^{2l})^{1/l} measures how close the component
//! `Xu` sits to bundles of correlated columns of `X`; `l` tunes locality,
//! from PCA-like (`l = 1`) to the single strongest bundle (`l = ∞`).
//!
//! ψ(u) = Σ_k ‖Π_k z_k‖²_{W_k}, where `Π_k` projects onto span{Xu, T} in the
//! metric of the k-th working weights. Since the T-block is fixed while `u`
//! moves, each response is reduced once to a ratio of quadratic forms in `u`
//! by residualizing the weighted `X` and `z_k` against an orthonormal basis
//! of the weighted T-block.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::linalg::{scale_rows, weighted_cross, PivotedQr, RANK_TOL};

/// Locality parameter `l ∈ [1, ∞]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Locality {
    Finite(f64),
    Infinite,
}

impl Locality {
    pub fn is_valid(self) -> bool {
        match self {
            Locality::Finite(l) => l >= 1.0 && l.is_finite(),
            Locality::Infinite => true,
        }
    }
}

impl fmt::Display for Locality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Locality::Finite(l) => write!(f, "{l}"),
            Locality::Infinite => f.write_str("inf"),
        }
    }
}

impl FromStr for Locality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if matches!(s.to_ascii_lowercase().as_str(), "inf" | "infinity" | "+inf") {
            return Ok(Locality::Infinite);
        }
        let l: f64 = s
            .parse()
            .map_err(|_| Error::Config(format!("invalid locality `{s}`")))?;
        let loc = if l.is_infinite() {
            Locality::Infinite
        } else {
            Locality::Finite(l)
        };
        if loc.is_valid() {
            Ok(loc)
        } else {
            Err(Error::Config(format!("locality must be >= 1, got {s}")))
        }
    }
}

impl Serialize for Locality {
    fn serialize<S: Serializer>(&self, serializer: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Locality::Finite(l) => serializer.serialize_f64(*l),
            Locality::Infinite => serializer.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for Locality {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        match Raw::deserialize(deserializer)? {
            Raw::Num(l) => Ok(Locality::Finite(l)),
            Raw::Text(s) => s.parse().map_err(serde::de::Error::custom),
        }
    }
}

/// Normalization metric A in the constraint u'Au = 1.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Metric {
    #[default]
    Identity,
    /// A = X'WX.
    Gram,
}

impl FromStr for Metric {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "identity" => Ok(Metric::Identity),
            "gram" => Ok(Metric::Gram),
            other => Err(Error::Config(format!("unknown metric `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CriterionParams {
    /// Weight of structural relevance against goodness of fit, in [0, 1].
    pub s: f64,
    pub l: Locality,
    #[serde(default)]
    pub metric: Metric,
}

impl Default for CriterionParams {
    fn default() -> Self {
        CriterionParams {
            s: 0.5,
            l: Locality::Finite(1.0),
            metric: Metric::Identity,
        }
    }
}

impl CriterionParams {
    pub fn new(s: f64, l: Locality) -> Self {
        CriterionParams {
            s,
            l,
            metric: Metric::Identity,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.s) {
            return Err(Error::Config(format!("s must lie in [0, 1], got {}", self.s)));
        }
        if !self.l.is_valid() {
            return Err(Error::Config(format!("l must be >= 1, got {}", self.l)));
        }
        Ok(())
    }
}

/// X'WX.
pub fn weighted_gram(x: &DMatrix<f64>, w: &DVector<f64>) -> DMatrix<f64> {
    weighted_cross(x, w, x)
}

/// φ from the covariance vector c = X'WXu.
fn relevance_from_cov(c: &DVector<f64>, l: Locality) -> f64 {
    let m = c.amax();
    if m == 0.0 {
        return 0.0;
    }
    match l {
        Locality::Infinite => m * m,
        Locality::Finite(l) => {
            let sum: f64 = c.iter().map(|v| (v.abs() / m).powf(2.0 * l)).sum();
            m * m * sum.powf(1.0 / l)
        }
    }
}

/// ∇φ = 2 S^{1/l − 1} G c^{∘(2l−1)}, evaluated with c scaled by its max to avoid overflow.
/// At l = ∞ the gradients of tied maximizers are averaged.
fn relevance_grad_from_cov(c: &DVector<f64>, gram: &DMatrix<f64>, l: Locality) -> DVector<f64> {
    let p = c.len();
    let m = c.amax();
    if m == 0.0 {
        return DVector::zeros(p);
    }
    match l {
        Locality::Infinite => {
            let active: Vec<usize> = (0..p).filter(|&j| c[j].abs() >= m * (1.0 - 1e-12)).collect();
            let mut g = DVector::zeros(p);
            for &j in &active {
                g.axpy(2.0 * c[j], &gram.column(j), 1.0);
            }
            g / active.len() as f64
        }
        Locality::Finite(l) => {
            let r = c / m;
            let powered = r.map(|v| v.signum() * v.abs().powf(2.0 * l - 1.0));
            let sum: f64 = r.iter().map(|v| v.abs().powf(2.0 * l)).sum();
            gram * powered * (2.0 * m * sum.powf(1.0 / l - 1.0))
        }
    }
}

/// φ(u) = (Σ_j ⟨Xu | x_j⟩_W^{2l})^{1/l}; max_j ⟨Xu | x_j⟩_W² at l = ∞.
pub fn structural_relevance(u: &DVector<f64>, x: &DMatrix<f64>, w: &DVector<f64>, l: Locality) -> f64 {
    let gram = weighted_gram(x, w);
    relevance_from_cov(&(&gram * u), l)
}

pub fn relevance_gradient(u: &DVector<f64>, x: &DMatrix<f64>, w: &DVector<f64>, l: Locality) -> DVector<f64> {
    let gram = weighted_gram(x, w);
    relevance_grad_from_cov(&(&gram * u), &gram, l)
}

/// Per-response quantities for ψ after residualizing against the weighted T-block.
#[derive(Clone, Debug)]
struct ResponseTerm {
    /// ‖Π_T z‖², the part of ψ explained by T alone.
    explained_by_t: f64,
    /// X⊥'z⊥.
    cross: DVector<f64>,
    /// X⊥'X⊥.
    resid_gram: DMatrix<f64>,
    /// X̃'X̃ before residualization, for the rank guard.
    full_gram: DMatrix<f64>,
    /// Squared largest column norm of the weighted T-block.
    t_lead2: f64,
}

impl ResponseTerm {
    fn new(x: &DMatrix<f64>, t_block: &DMatrix<f64>, z: &DVector<f64>, w: &DVector<f64>) -> Self {
        let sw = w.map(f64::sqrt);
        let xt = scale_rows(x, &sw);
        let zt = z.component_mul(&sw);
        let (x_perp, z_perp, explained_by_t, t_lead2) = if t_block.ncols() == 0 {
            (xt.clone(), zt.clone(), 0.0, 0.0)
        } else {
            let tt = scale_rows(t_block, &sw);
            let qr = PivotedQr::new(&tt, RANK_TOL);
            let q = &qr.q;
            let zq = q.transpose() * &zt;
            let lead = if qr.rank() > 0 { qr.r[(0, 0)] } else { 0.0 };
            let mut x_perp = &xt - q * (q.transpose() * &xt);
            x_perp -= q * (q.transpose() * &x_perp);
            let mut z_perp = &zt - q * &zq;
            z_perp -= q * (q.transpose() * &z_perp);
            (x_perp, z_perp, zq.norm_squared(), lead * lead)
        };
        ResponseTerm {
            explained_by_t,
            cross: x_perp.transpose() * &z_perp,
            resid_gram: x_perp.transpose() * &x_perp,
            full_gram: xt.transpose() * &xt,
            t_lead2,
        }
    }

    /// Returns (value, gradient, degenerate).
    fn eval(&self, u: &DVector<f64>, want_grad: bool) -> (f64, Option<DVector<f64>>, bool) {
        let mu = &self.resid_gram * u;
        let denom = u.dot(&mu);
        let lead2 = u.dot(&(&self.full_gram * u)).max(self.t_lead2);
        if !(denom > RANK_TOL * RANK_TOL * lead2) {
            let g = want_grad.then(|| DVector::zeros(u.len()));
            return (self.explained_by_t, g, true);
        }
        let a = self.cross.dot(u);
        let value = self.explained_by_t + a * a / denom;
        let grad = want_grad.then(|| {
            let mut g = &self.cross * (2.0 * a / denom);
            g.axpy(-2.0 * a * a / (denom * denom), &mu, 1.0);
            g
        });
        (value, grad, false)
    }
}

/// Goodness-of-fit value with a flag telling whether `Xu` was dropped as
/// numerically inside span(T) for at least one response.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GoodnessOfFit {
    pub value: f64,
    pub degenerate: bool,
}

/// Working responses and weights, X, the observation metric W, and the
/// T-block used by ψ.
#[derive(Clone, Debug)]
pub struct FitContext {
    x: DMatrix<f64>,
    obs_weights: DVector<f64>,
    gram: DMatrix<f64>,
    anchor: DVector<f64>,
    terms: Vec<ResponseTerm>,
}

impl FitContext {
    /// `z[k]` and `w[k]` are the working response and weight diagonal of response k;
    /// `t_block` may have zero columns.
    pub fn new(
        x: &DMatrix<f64>,
        obs_weights: &DVector<f64>,
        t_block: &DMatrix<f64>,
        z: &[DVector<f64>],
        w: &[DVector<f64>],
    ) -> Result<Self> {
        let n = x.nrows();
        if z.is_empty() || z.len() != w.len() {
            return Err(Error::Dimension("need one weight vector per working response".into()));
        }
        if obs_weights.len() != n || t_block.nrows() != n || z.iter().chain(w).any(|v| v.len() != n) {
            return Err(Error::Dimension("fit context rows differ".into()));
        }
        if w.iter().flat_map(|v| v.iter()).any(|&v| !(v > 0.0)) {
            return Err(Error::InvalidData("working weights must be positive".into()));
        }
        let gram = weighted_gram(x, obs_weights);
        let terms = z
            .iter()
            .zip(w)
            .map(|(zk, wk)| ResponseTerm::new(x, t_block, zk, wk))
            .collect();
        Ok(FitContext {
            x: x.clone(),
            obs_weights: obs_weights.clone(),
            gram,
            anchor: z[0].clone(),
            terms,
        })
    }

    pub fn p(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn obs_weights(&self) -> &DVector<f64> {
        &self.obs_weights
    }

    /// X'WX in the observation metric.
    pub fn gram(&self) -> &DMatrix<f64> {
        &self.gram
    }

    /// W-covariance of the component Xu with the first working response.
    pub fn anchor_covariance(&self, u: &DVector<f64>) -> f64 {
        let f = &self.x * u;
        let w = &self.obs_weights;
        let fm = f.dot(w);
        let zm = self.anchor.dot(w);
        f.iter()
            .zip(self.anchor.iter())
            .zip(w.iter())
            .map(|((fi, zi), wi)| wi * (fi - fm) * (zi - zm))
            .sum()
    }

    pub fn structural_relevance(&self, u: &DVector<f64>, l: Locality) -> f64 {
        relevance_from_cov(&(&self.gram * u), l)
    }

    pub fn relevance_gradient(&self, u: &DVector<f64>, l: Locality) -> DVector<f64> {
        relevance_grad_from_cov(&(&self.gram * u), &self.gram, l)
    }

    pub fn goodness_of_fit(&self, u: &DVector<f64>) -> GoodnessOfFit {
        let mut value = 0.0;
        let mut degenerate = false;
        for term in &self.terms {
            let (v, _, d) = term.eval(u, false);
            value += v;
            degenerate |= d;
        }
        GoodnessOfFit { value, degenerate }
    }

    pub fn fit_gradient(&self, u: &DVector<f64>) -> DVector<f64> {
        let mut g = DVector::zeros(u.len());
        for term in &self.terms {
            let (_, gk, _) = term.eval(u, true);
            g += gk.expect("gradient requested");
        }
        g
    }

    fn parts(&self, u: &DVector<f64>, params: &CriterionParams) -> (f64, f64, bool) {
        let phi = if params.s > 0.0 {
            self.structural_relevance(u, params.l)
        } else {
            0.0
        };
        let gof = if params.s < 1.0 {
            self.goodness_of_fit(u)
        } else {
            GoodnessOfFit {
                value: 0.0,
                degenerate: false,
            }
        };
        (phi, gof.value, gof.degenerate)
    }

    /// s·log φ + (1−s)·log ψ, the quantity the optimizer maximizes.
    pub fn log_composite(&self, u: &DVector<f64>, params: &CriterionParams) -> Result<f64> {
        let (phi, psi, _) = self.parts(u, params);
        let s = params.s;
        let mut value = 0.0;
        if s > 0.0 {
            if !(phi > 0.0) {
                return Err(Error::CriterionVanishes);
            }
            value += s * phi.ln();
        }
        if s < 1.0 {
            if !(psi > 0.0) {
                return Err(Error::CriterionVanishes);
            }
            value += (1.0 - s) * psi.ln();
        }
        Ok(value)
    }

    pub fn log_composite_gradient(&self, u: &DVector<f64>, params: &CriterionParams) -> Result<DVector<f64>> {
        let (phi, psi, _) = self.parts(u, params);
        let s = params.s;
        let mut g = DVector::zeros(u.len());
        if s > 0.0 {
            if !(phi > 0.0) {
                return Err(Error::CriterionVanishes);
            }
            g.axpy(s / phi, &self.relevance_gradient(u, params.l), 1.0);
        }
        if s < 1.0 {
            if !(psi > 0.0) {
                return Err(Error::CriterionVanishes);
            }
            g.axpy((1.0 - s) / psi, &self.fit_gradient(u), 1.0);
        }
        Ok(g)
    }
}

pub fn goodness_of_fit(u: &DVector<f64>, ctx: &FitContext) -> f64 {
    ctx.goodness_of_fit(u).value
}

/// φ^s ψ^(1−s). The endpoints s = 0 and s = 1 return ψ and φ exactly.
pub fn combined_criterion(u: &DVector<f64>, params: &CriterionParams, ctx: &FitContext) -> Result<f64> {
    params.validate()?;
    let s = params.s;
    if s == 0.0 {
        return Ok(ctx.goodness_of_fit(u).value);
    }
    if s == 1.0 {
        return Ok(ctx.structural_relevance(u, params.l));
    }
    let (phi, psi, _) = ctx.parts(u, params);
    if !(phi > 0.0 && psi > 0.0) {
        return Err(Error::CriterionVanishes);
    }
    Ok(phi.powf(s) * psi.powf(1.0 - s))
}

pub fn combined_gradient(u: &DVector<f64>, params: &CriterionParams, ctx: &FitContext) -> Result<DVector<f64>> {
    params.validate()?;
    let s = params.s;
    if s == 0.0 {
        return Ok(ctx.fit_gradient(u));
    }
    if s == 1.0 {
        return Ok(ctx.relevance_gradient(u, params.l));
    }
    let value = combined_criterion(u, params, ctx)?;
    Ok(ctx.log_composite_gradient(u, params)? * value)
}
