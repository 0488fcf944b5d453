//! Fixtures shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use scglr_core::{gen_grouped_data, working_quantities, Dataset, Family, FitContext, GroupDesign, SimConfig};

/// A standardized Poisson dataset with `n` rows, `p` explanatory columns and three responses.
pub fn dataset(n: usize, p: usize) -> Dataset {
    let mut cfg = SimConfig::new(n, 10, p, 3, Family::Poisson);
    cfg.seed = 7;
    gen_grouped_data(&cfg)
        .expect("simulation")
        .0
        .standardize()
        .expect("standardize")
}

/// Working quantities at the zero linear predictor for every response.
pub fn context(ds: &Dataset) -> FitContext {
    let eta = DVector::zeros(ds.n());
    let (z, w): (Vec<_>, Vec<_>) = (0..ds.q())
        .map(|k| {
            let wq = working_quantities(&ds.y().column(k).into_owned(), &eta, Family::Poisson).expect("working");
            (wq.z, wq.w)
        })
        .unzip();
    FitContext::new(ds.x(), ds.weights(), ds.t(), &z, &w).expect("context")
}

/// Unit direction with alternating signs.
pub fn direction(p: usize) -> DVector<f64> {
    DVector::from_fn(p, |j, _| if j % 2 == 0 { 1.0 } else { -0.5 }).normalize()
}

/// Fixed design, group design, working response and weights for one Henderson solve.
pub fn henderson_inputs(ds: &Dataset, h: usize) -> (DMatrix<f64>, GroupDesign, DVector<f64>, DVector<f64>) {
    let mut m = DMatrix::from_element(ds.n(), h + 1, 1.0);
    m.columns_mut(1, h).copy_from(&ds.x().columns(0, h));
    let y = ds.y().column(0).into_owned();
    let wq = working_quantities(&y, &DVector::zeros(ds.n()), Family::Poisson).expect("working");
    (m, ds.groups().clone(), wq.z, wq.w)
}
