//! Henderson's mixed-model equations for one working response with a random
//! group intercept, and the Schall update of its variance.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::data::GroupDesign;
use crate::error::{Error, Result};
use crate::linalg::{scale_rows, PivotedQr, RANK_TOL};

pub const SIGMA2_FLOOR: f64 = 1e-8;
pub const SIGMA2_CEIL: f64 = 1e8;
const DENOM_FLOOR: f64 = 1e-8;

/// Per-response state carried across Schall iterations.
#[derive(Clone, Debug, PartialEq)]
pub struct MixedState {
    /// Coefficients on the component block.
    pub gamma: DVector<f64>,
    pub delta: DVector<f64>,
    pub xi: DVector<f64>,
    pub sigma2: f64,
    pub trace_term: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HendersonSolution {
    /// Fixed-effect coefficients, zero on dropped columns.
    pub beta: DVector<f64>,
    /// Random-intercept predictions, one per group.
    pub xi: DVector<f64>,
    /// tr of the ξξ block of the inverse coefficient matrix.
    pub trace_xixi: f64,
    /// Fixed-effect columns removed by the rank guard.
    pub dropped: Vec<usize>,
}

/// Solves
///
/// ```text
/// [ M'RM      M'RU        ] [β]   [M'Rz]
/// [ U'RM      U'RU + I/σ² ] [ξ] = [U'Rz]
/// ```
///
/// with R = diag(w).
pub fn henderson_solve(
    fixed_design: &DMatrix<f64>,
    groups: &GroupDesign,
    z: &DVector<f64>,
    w: &DVector<f64>,
    sigma2: f64,
) -> Result<HendersonSolution> {
    henderson_solve_penalized(fixed_design, groups, z, w, sigma2, None)
}

/// As [`henderson_solve`] with `penalty` added to the diagonal of the
/// fixed-effect block (ridge on selected coefficients).
pub fn henderson_solve_penalized(
    fixed_design: &DMatrix<f64>,
    groups: &GroupDesign,
    z: &DVector<f64>,
    w: &DVector<f64>,
    sigma2: f64,
    penalty: Option<&DVector<f64>>,
) -> Result<HendersonSolution> {
    let (n, m) = fixed_design.shape();
    let index = groups.index();
    let n_groups = groups.n_groups();
    if z.len() != n || w.len() != n || index.len() != n {
        return Err(Error::Dimension("henderson: row counts differ".into()));
    }
    if penalty.is_some_and(|p| p.len() != m) {
        return Err(Error::Dimension("henderson: penalty length".into()));
    }
    if !(sigma2 > 0.0) {
        return Err(Error::Config(format!("sigma2 must be positive, got {sigma2}")));
    }

    // rank guard on the (penalized) weighted fixed design
    let sw = w.map(f64::sqrt);
    let mut guard = scale_rows(fixed_design, &sw);
    if let Some(pen) = penalty {
        let extra = DMatrix::from_diagonal(&pen.map(|v| v.max(0.0).sqrt()));
        guard = guard.insert_rows(n, m, 0.0);
        guard.rows_mut(n, m).copy_from(&extra);
    }
    let qr = PivotedQr::new(&guard, RANK_TOL);
    let mut kept = qr.kept.clone();
    kept.sort_unstable();
    let mk = kept.len();
    let dim = mk + n_groups;

    let mut coef = DMatrix::<f64>::zeros(dim, dim);
    let mut rhs = DVector::<f64>::zeros(dim);
    for i in 0..n {
        let wi = w[i];
        let g = mk + index[i];
        for (a, &ca) in kept.iter().enumerate() {
            let xa = fixed_design[(i, ca)] * wi;
            rhs[a] += xa * z[i];
            for (b, &cb) in kept.iter().enumerate().skip(a) {
                coef[(a, b)] += xa * fixed_design[(i, cb)];
            }
            coef[(a, g)] += xa;
        }
        coef[(g, g)] += wi;
        rhs[g] += wi * z[i];
    }
    for a in 0..dim {
        for b in 0..a {
            coef[(a, b)] = coef[(b, a)];
        }
    }
    if let Some(pen) = penalty {
        for (a, &ca) in kept.iter().enumerate() {
            coef[(a, a)] += pen[ca];
        }
    }
    for g in 0..n_groups {
        coef[(mk + g, mk + g)] += 1.0 / sigma2;
    }

    let chol = Cholesky::new(coef.clone()).ok_or_else(|| {
        let worst = (0..mk)
            .min_by(|&a, &b| coef[(a, a)].total_cmp(&coef[(b, b)]))
            .map_or(0, |a| kept[a]);
        Error::SingularSystem { column: worst }
    })?;
    let sol = chol.solve(&rhs);
    let inv = chol.inverse();
    let trace_xixi = (mk..dim).map(|g| inv[(g, g)]).sum();

    let mut beta = DVector::zeros(m);
    for (a, &ca) in kept.iter().enumerate() {
        beta[ca] = sol[a];
    }
    Ok(HendersonSolution {
        beta,
        xi: sol.rows(mk, n_groups).into_owned(),
        trace_xixi,
        dropped: qr.dropped,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct VarianceUpdate {
    pub sigma2: f64,
    /// A floor, ceiling or denominator guard fired.
    pub clamped: bool,
}

/// σ²_new = ξ'ξ / (N − tr(C_ξξ)/σ²_old), clamped to [1e-8, 1e8].
pub fn update_variance(xi: &DVector<f64>, trace_xixi: f64, sigma2_old: f64) -> VarianceUpdate {
    let n_groups = xi.len() as f64;
    let mut denom = n_groups - trace_xixi / sigma2_old.max(SIGMA2_FLOOR);
    let mut clamped = false;
    if !(denom >= DENOM_FLOOR) {
        denom = DENOM_FLOOR;
        clamped = true;
    }
    let raw = xi.norm_squared() / denom;
    let sigma2 = raw.clamp(SIGMA2_FLOOR, SIGMA2_CEIL);
    VarianceUpdate {
        sigma2,
        clamped: clamped || sigma2 != raw,
    }
}
