//! The JSON model document shared by fixed and mixed fits.
//!
//! Matrices are stored row-major as nested arrays: `loadings` is p×H,
//! `gamma` H×q, `delta` r×q and `xi_hat` N×q with rows in `groups` order.
//! Training components and iteration traces are not stored.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::criterion::CriterionParams;
use crate::data::{Schema, Standardization};
use crate::error::{Error, Result};
use crate::fixed::{ComponentDiagnostics, ComponentModel};
use crate::glm::FamilySpec;
use crate::mixed::MixedComponentModel;

pub const MODEL_VERSION: &str = "scglr-mix/1";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    Fixed,
    Mixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RandomEffects {
    pub groups: Vec<String>,
    pub sigma2: Vec<f64>,
    pub xi_hat: Vec<Vec<f64>>,
    pub trace_xixi: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelDocument {
    pub version: String,
    pub kind: ModelKind,
    pub schema: Schema,
    pub standardization: Standardization,
    pub family: FamilySpec,
    pub params: CriterionParams,
    pub loadings: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub delta: Vec<Vec<f64>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub random: Option<RandomEffects>,
    pub converged: bool,
    pub failed_component: Option<usize>,
    pub diagnostics: Vec<ComponentDiagnostics>,
}

/// A loaded model of either kind.
#[derive(Clone, Debug, PartialEq)]
pub enum FittedModel {
    Fixed(ComponentModel),
    Mixed(MixedComponentModel),
}

impl FittedModel {
    pub fn base(&self) -> &ComponentModel {
        match self {
            FittedModel::Fixed(m) => m,
            FittedModel::Mixed(m) => &m.base,
        }
    }
}

fn rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    m.row_iter().map(|r| r.iter().copied().collect()).collect()
}

fn matrix(name: &str, data: &[Vec<f64>], nrows: usize, ncols: usize) -> Result<DMatrix<f64>> {
    if data.len() != nrows || data.iter().any(|r| r.len() != ncols) {
        return Err(Error::Dimension(format!("model field '{name}' is not {nrows}×{ncols}")));
    }
    Ok(DMatrix::from_fn(nrows, ncols, |i, j| data[i][j]))
}

impl ModelDocument {
    pub fn from_fixed(model: &ComponentModel) -> Self {
        ModelDocument {
            version: MODEL_VERSION.to_string(),
            kind: ModelKind::Fixed,
            schema: model.schema.clone(),
            standardization: model.standardization.clone(),
            family: model.family.clone(),
            params: model.params,
            loadings: rows(&model.loadings),
            gamma: rows(&model.gamma),
            delta: rows(&model.delta),
            random: None,
            converged: model.converged,
            failed_component: model.failed_component,
            diagnostics: model.diagnostics.clone(),
        }
    }

    pub fn from_mixed(model: &MixedComponentModel) -> Self {
        ModelDocument {
            kind: ModelKind::Mixed,
            random: Some(RandomEffects {
                groups: model.groups.clone(),
                sigma2: model.sigma2.clone(),
                xi_hat: rows(&model.xi_hat),
                trace_xixi: model.trace_xixi.clone(),
            }),
            ..ModelDocument::from_fixed(&model.base)
        }
    }

    pub fn from_model(model: &FittedModel) -> Self {
        match model {
            FittedModel::Fixed(m) => ModelDocument::from_fixed(m),
            FittedModel::Mixed(m) => ModelDocument::from_mixed(m),
        }
    }

    /// Rebuilds the model, checking the version tag and every shape.
    pub fn into_model(self) -> Result<FittedModel> {
        if self.version != MODEL_VERSION {
            return Err(Error::InvalidData(format!(
                "unsupported model version '{}', expected '{MODEL_VERSION}'",
                self.version
            )));
        }
        let p = self.schema.explanatory.len();
        let q = self.family.len();
        let h = self.loadings.first().map_or(0, Vec::len);
        let r = self.delta.len();
        if self.schema.response.len() != q {
            return Err(Error::Dimension("family and response counts differ".into()));
        }
        let base = ComponentModel {
            loadings: matrix("loadings", &self.loadings, p, h)?,
            components: DMatrix::zeros(0, h),
            gamma: matrix("gamma", &self.gamma, h, q)?,
            delta: matrix("delta", &self.delta, r, q)?,
            params: self.params,
            family: self.family,
            schema: self.schema,
            standardization: self.standardization,
            diagnostics: self.diagnostics,
            trace: Vec::new(),
            converged: self.converged,
            failed_component: self.failed_component,
        };
        match (self.kind, self.random) {
            (ModelKind::Fixed, _) => Ok(FittedModel::Fixed(base)),
            (ModelKind::Mixed, Some(re)) => {
                if re.sigma2.len() != q || re.trace_xixi.len() != q {
                    return Err(Error::Dimension("one sigma2 per response required".into()));
                }
                let xi_hat = matrix("xi_hat", &re.xi_hat, re.groups.len(), q)?;
                Ok(FittedModel::Mixed(MixedComponentModel {
                    base,
                    sigma2: re.sigma2,
                    xi_hat,
                    groups: re.groups,
                    trace_xixi: re.trace_xixi,
                }))
            }
            (ModelKind::Mixed, None) => Err(Error::InvalidData("mixed model without random effects".into())),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut text = self.to_json()?;
        text.push('\n');
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        ModelDocument::from_json(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::component::OptimizerSettings;
    use crate::criterion::Locality;
    use crate::fixed::{fit_scglr, FitSettings};
    use crate::glm::Family;
    use crate::mixed::{fit_mixed_scglr, MixedSettings, PredictionMode};
    use crate::simulate::{gen_grouped_data, SimConfig};

    fn data() -> crate::data::Dataset {
        let mut cfg = SimConfig::new(60, 6, 8, 2, Family::Poisson);
        cfg.seed = 4;
        gen_grouped_data(&cfg).unwrap().0.standardize().unwrap()
    }

    fn fit_settings() -> FitSettings {
        FitSettings {
            optimizer: OptimizerSettings {
                n_restarts: 2,
                ..Default::default()
            },
            ..Default::default()
        }
    }

    #[test]
    fn mixed_model_round_trips() {
        let ds = data();
        let fam = FamilySpec::uniform(Family::Poisson, 2);
        let settings = MixedSettings {
            fit: FitSettings {
                max_outer: 200,
                ..fit_settings()
            },
            ..Default::default()
        };
        let model = fit_mixed_scglr(&ds, &fam, 2, &CriterionParams::new(0.5, Locality::Infinite), &settings).unwrap();
        let doc = ModelDocument::from_mixed(&model);
        let text = doc.to_json().unwrap();
        assert!(text.contains("\"version\": \"scglr-mix/1\""));
        let back = ModelDocument::from_json(&text).unwrap();
        assert_eq!(back, doc);
        let FittedModel::Mixed(loaded) = back.into_model().unwrap() else {
            panic!("expected a mixed model");
        };
        assert_eq!(loaded.base.loadings, model.base.loadings);
        assert_eq!(loaded.xi_hat, model.xi_hat);
        assert_eq!(
            loaded.fitted(&ds, PredictionMode::Conditional).unwrap(),
            model.fitted(&ds, PredictionMode::Conditional).unwrap()
        );
    }

    #[test]
    fn fixed_model_round_trips_and_rejects_other_versions() {
        let ds = data();
        let fam = FamilySpec::uniform(Family::Poisson, 2);
        let model = fit_scglr(&ds, &fam, 1, &CriterionParams::default(), &fit_settings()).unwrap();
        let mut doc = ModelDocument::from_fixed(&model);
        let FittedModel::Fixed(loaded) = doc.clone().into_model().unwrap() else {
            panic!("expected a fixed model");
        };
        assert_eq!(loaded.gamma, model.gamma);
        doc.version = "scglr-mix/0".into();
        assert!(doc.clone().into_model().is_err());
        doc.version = MODEL_VERSION.into();
        doc.loadings.pop();
        assert!(doc.into_model().is_err());
    }
}
