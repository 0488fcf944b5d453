//! Exponential-family responses with canonical links, and the Fisher-scoring
//! linearization (working response and weights).

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;
use rand::Rng;
use rand_distr::{Bernoulli as BernoulliDist, Distribution, Normal, Poisson as PoissonDist};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const ETA_BOUND: f64 = 30.0;
pub const WEIGHT_FLOOR: f64 = 1e-8;
pub const WEIGHT_CEIL: f64 = 1e8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Family {
    Gaussian,
    Poisson,
    Bernoulli,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Link {
    Identity,
    Log,
    Logit,
}

/// Mean, link derivative g′(μ) and variance function v(μ) at one point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MeanDerivs {
    pub mu: f64,
    pub dlink: f64,
    pub variance: f64,
}

impl Family {
    pub fn link(self) -> Link {
        match self {
            Family::Gaussian => Link::Identity,
            Family::Poisson => Link::Log,
            Family::Bernoulli => Link::Logit,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Family::Gaussian => "gaussian",
            Family::Poisson => "poisson",
            Family::Bernoulli => "bernoulli",
        }
    }

    /// Inverse link with η clamped to ±30.
    pub fn mean(self, eta: f64) -> f64 {
        let eta = eta.clamp(-ETA_BOUND, ETA_BOUND);
        match self {
            Family::Gaussian => eta,
            Family::Poisson => eta.exp(),
            Family::Bernoulli => 1.0 / (1.0 + (-eta).exp()),
        }
    }

    pub fn link_fn(self, mu: f64) -> f64 {
        match self {
            Family::Gaussian => mu,
            Family::Poisson => mu.ln(),
            Family::Bernoulli => (mu / (1.0 - mu)).ln(),
        }
    }

    pub fn mean_and_derivs(self, eta: f64) -> MeanDerivs {
        let mu = self.mean(eta);
        match self {
            Family::Gaussian => MeanDerivs {
                mu,
                dlink: 1.0,
                variance: 1.0,
            },
            Family::Poisson => MeanDerivs {
                mu,
                dlink: 1.0 / mu,
                variance: mu,
            },
            Family::Bernoulli => {
                let v = mu * (1.0 - mu);
                MeanDerivs {
                    mu,
                    dlink: 1.0 / v,
                    variance: v,
                }
            }
        }
    }

    pub fn check_support(self, row: usize, y: f64) -> Result<()> {
        let ok = match self {
            Family::Gaussian => y.is_finite(),
            Family::Poisson => y >= 0.0 && y.fract() == 0.0,
            Family::Bernoulli => y == 0.0 || y == 1.0,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Support {
                row,
                value: y,
                family: self.name(),
            })
        }
    }

    /// Starting linear predictor from the data.
    pub fn initial_eta(self, y: f64) -> f64 {
        match self {
            Family::Gaussian => y,
            Family::Poisson => (y + 0.5).ln(),
            Family::Bernoulli => self.link_fn((y + 0.5) / 2.0),
        }
    }

    /// Unit deviance d(y, μ); zero when μ = y.
    pub fn unit_deviance(self, y: f64, mu: f64) -> f64 {
        match self {
            Family::Gaussian => (y - mu).powi(2),
            Family::Poisson => {
                let ylog = if y > 0.0 { y * (y / mu).ln() } else { 0.0 };
                2.0 * (ylog - (y - mu))
            }
            Family::Bernoulli => {
                let mu = mu.clamp(1e-300, 1.0 - f64::EPSILON / 2.0);
                if y > 0.5 {
                    -2.0 * mu.ln()
                } else {
                    -2.0 * (1.0 - mu).ln()
                }
            }
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, mu: f64, rng: &mut R) -> f64 {
        match self {
            Family::Gaussian => Normal::new(mu, 1.0).expect("unit sd").sample(rng),
            Family::Poisson => {
                if mu <= 0.0 {
                    0.0
                } else {
                    PoissonDist::new(mu).expect("positive mean").sample(rng)
                }
            }
            Family::Bernoulli => {
                if BernoulliDist::new(mu.clamp(0.0, 1.0)).expect("probability").sample(rng) {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

impl fmt::Display for Family {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Family {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "gaussian" | "normal" => Ok(Family::Gaussian),
            "poisson" => Ok(Family::Poisson),
            "bernoulli" | "binomial" | "binary" => Ok(Family::Bernoulli),
            other => Err(Error::Config(format!("unknown family `{other}`"))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct FamilyEntry {
    family: Family,
    link: Link,
}

/// One (family, canonical link) pair per response.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<FamilyEntry>", into = "Vec<FamilyEntry>")]
pub struct FamilySpec(Vec<Family>);

impl TryFrom<Vec<FamilyEntry>> for FamilySpec {
    type Error = String;
    fn try_from(entries: Vec<FamilyEntry>) -> std::result::Result<Self, String> {
        entries
            .into_iter()
            .map(|e| {
                if e.family.link() == e.link {
                    Ok(e.family)
                } else {
                    Err(format!("{} requires its canonical link", e.family))
                }
            })
            .collect::<std::result::Result<Vec<_>, _>>()
            .map(FamilySpec)
    }
}

impl From<FamilySpec> for Vec<FamilyEntry> {
    fn from(spec: FamilySpec) -> Self {
        spec.0
            .into_iter()
            .map(|family| FamilyEntry {
                family,
                link: family.link(),
            })
            .collect()
    }
}

impl FamilySpec {
    pub fn new(families: Vec<Family>) -> Self {
        FamilySpec(families)
    }

    pub fn uniform(family: Family, q: usize) -> Self {
        FamilySpec(vec![family; q])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn get(&self, k: usize) -> Family {
        self.0[k]
    }

    pub fn iter(&self) -> impl Iterator<Item = Family> + '_ {
        self.0.iter().copied()
    }

    pub fn all_gaussian(&self) -> bool {
        self.0.iter().all(|&f| f == Family::Gaussian)
    }

    /// Checks the length against q and every response against its family support.
    pub fn validate(&self, y: &nalgebra::DMatrix<f64>) -> Result<()> {
        if self.len() != y.ncols() {
            return Err(Error::Dimension(format!(
                "{} families for {} responses",
                self.len(),
                y.ncols()
            )));
        }
        for (k, family) in self.iter().enumerate() {
            for (i, &v) in y.column(k).iter().enumerate() {
                family.check_support(i, v)?;
            }
        }
        Ok(())
    }
}

/// Linearized response z, weights w (diagonal of W_k), predictor η and mean μ.
#[derive(Clone, Debug, PartialEq)]
pub struct WorkingQuantities {
    pub z: DVector<f64>,
    pub w: DVector<f64>,
    pub eta: DVector<f64>,
    pub mu: DVector<f64>,
}

/// z_i = η_i + g′(μ_i)(y_i − μ_i), w_i = 1 / (g′(μ_i)² v(μ_i)), unit prior weights.
pub fn working_quantities(y: &DVector<f64>, eta: &DVector<f64>, family: Family) -> Result<WorkingQuantities> {
    working_quantities_weighted(y, eta, family, None)
}

/// As [`working_quantities`], with the clamped weights multiplied by prior weights.
pub fn working_quantities_weighted(
    y: &DVector<f64>,
    eta: &DVector<f64>,
    family: Family,
    prior: Option<&DVector<f64>>,
) -> Result<WorkingQuantities> {
    let n = y.len();
    if eta.len() != n || prior.is_some_and(|p| p.len() != n) {
        return Err(Error::Dimension("working quantities: length mismatch".into()));
    }
    let mut z = DVector::zeros(n);
    let mut w = DVector::zeros(n);
    let mut mu = DVector::zeros(n);
    let mut eta_c = DVector::zeros(n);
    for i in 0..n {
        family.check_support(i, y[i])?;
        let e = eta[i].clamp(-ETA_BOUND, ETA_BOUND);
        let d = family.mean_and_derivs(e);
        eta_c[i] = e;
        mu[i] = d.mu;
        // identity link: the linearization is exact, keep y bit-for-bit
        z[i] = match family {
            Family::Gaussian => y[i],
            _ => e + d.dlink * (y[i] - d.mu),
        };
        let wi = (1.0 / (d.dlink * d.dlink * d.variance)).clamp(WEIGHT_FLOOR, WEIGHT_CEIL);
        w[i] = wi * prior.map_or(1.0, |p| p[i]);
    }
    Ok(WorkingQuantities { z, w, eta: eta_c, mu })
}

/// Σ_i a_i d(y_i, μ_i) with prior weights a (unit when `None`).
pub fn deviance(y: &DVector<f64>, mu: &DVector<f64>, family: Family, prior: Option<&DVector<f64>>) -> f64 {
    y.iter()
        .zip(mu.iter())
        .enumerate()
        .map(|(i, (&yi, &mi))| prior.map_or(1.0, |p| p[i]) * family.unit_deviance(yi, mi))
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn mean_and_derivs_at_reference_points() {
        let p = Family::Poisson.mean_and_derivs(0.0);
        assert_eq!((p.mu, p.dlink, p.variance), (1.0, 1.0, 1.0));
        let b = Family::Bernoulli.mean_and_derivs(0.0);
        assert_eq!((b.mu, b.dlink, b.variance), (0.5, 4.0, 0.25));
        let g = Family::Gaussian.mean_and_derivs(2.5);
        assert_eq!((g.mu, g.dlink, g.variance), (2.5, 1.0, 1.0));
    }

    #[test]
    fn working_quantities_examples() {
        let y = DVector::from_vec(vec![3.0]);
        let eta = DVector::from_vec(vec![0.0]);
        let wq = working_quantities(&y, &eta, Family::Poisson).unwrap();
        assert_eq!((wq.z[0], wq.w[0]), (2.0, 1.0));

        let wq = working_quantities(&DVector::from_vec(vec![1.0]), &eta, Family::Bernoulli).unwrap();
        assert_eq!((wq.z[0], wq.w[0]), (2.0, 0.25));

        let y = DVector::from_vec(vec![1.5, -2.0, 0.3]);
        let eta = DVector::from_vec(vec![9.0, 0.1, -4.0]);
        let wq = working_quantities(&y, &eta, Family::Gaussian).unwrap();
        assert_eq!(wq.z, y);
        assert!(wq.w.iter().all(|&w| w == 1.0));
    }

    #[test]
    fn weights_invert_conditional_variance() {
        for family in [Family::Poisson, Family::Bernoulli, Family::Gaussian] {
            for &eta in &[-3.0, -0.7, 0.0, 1.3, 4.0] {
                let d = family.mean_and_derivs(eta);
                let y = if family == Family::Bernoulli { 1.0 } else { 2.0 };
                let wq =
                    working_quantities(&DVector::from_vec(vec![y]), &DVector::from_vec(vec![eta]), family).unwrap();
                assert!(close(wq.w[0] * d.dlink * d.dlink * d.variance, 1.0, 1e-12));
            }
        }
    }

    #[test]
    fn gaussian_shift_moves_z_by_constant() {
        let y = DVector::from_vec(vec![0.4, 1.0, -3.0]);
        let eta = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let a = working_quantities(&y, &eta, Family::Gaussian).unwrap();
        let b = working_quantities(&y.add_scalar(2.5), &eta, Family::Gaussian).unwrap();
        assert!((b.z - a.z.add_scalar(2.5)).amax() < 1e-15);
    }

    #[test]
    fn support_violations_name_row() {
        let eta = DVector::zeros(3);
        let err = working_quantities(&DVector::from_vec(vec![1.0, -1.0, 2.0]), &eta, Family::Poisson).unwrap_err();
        assert!(matches!(err, Error::Support { row: 1, .. }));
        let err = working_quantities(&DVector::from_vec(vec![0.0, 1.0, 0.5]), &eta, Family::Bernoulli).unwrap_err();
        assert!(matches!(err, Error::Support { row: 2, .. }));
    }

    #[test]
    fn clamps_keep_everything_finite() {
        let y = DVector::from_vec(vec![0.0, 1.0]);
        let eta = DVector::from_vec(vec![500.0, -500.0]);
        for family in [Family::Poisson, Family::Bernoulli] {
            let wq = working_quantities(&y, &eta, family).unwrap();
            assert!(wq.z.iter().chain(wq.w.iter()).all(|v| v.is_finite()));
            assert!(wq.w.iter().all(|&w| (WEIGHT_FLOOR..=WEIGHT_CEIL).contains(&w)));
        }
        assert_eq!(Family::Poisson.mean(30.0), 30f64.exp());
        assert_eq!(Family::Poisson.mean(45.0), 30f64.exp());
    }

    #[test]
    fn deviance_reference_values() {
        let y = DVector::from_vec(vec![0.0, 2.0, 5.0]);
        assert_eq!(deviance(&y, &y, Family::Poisson, None), 0.0);
        let y = DVector::from_vec(vec![1.0, 0.0, 1.0, 0.0]);
        let mu = DVector::from_element(4, 0.5);
        let d = deviance(&y, &mu, Family::Bernoulli, None);
        assert!(close(d, 4.0 * 2.0 * 2f64.ln(), 1e-12));
        let y = DVector::from_vec(vec![1.0, 2.0]);
        let mu = DVector::from_vec(vec![0.5, 2.5]);
        let a = DVector::from_vec(vec![2.0, 1.0]);
        assert!(close(deviance(&y, &mu, Family::Gaussian, Some(&a)), 0.75, 1e-15));
    }

    #[test]
    fn family_spec_serializes_with_links() {
        let spec = FamilySpec::new(vec![Family::Poisson, Family::Bernoulli]);
        let json = serde_json::to_string(&spec).unwrap();
        assert_eq!(
            json,
            r#"[{"family":"poisson","link":"log"},{"family":"bernoulli","link":"logit"}]"#
        );
        assert_eq!(serde_json::from_str::<FamilySpec>(&json).unwrap(), spec);
        let bad = r#"[{"family":"poisson","link":"identity"}]"#;
        assert!(serde_json::from_str::<FamilySpec>(bad).is_err());
    }
}
