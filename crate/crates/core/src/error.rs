use std::path::PathBuf;

use nalgebra::DVector;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("cannot access {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    #[error("json: {0}")]
    Json(#[from] serde_json::Error),

    #[error("column `{0}` not found in header")]
    MissingColumn(String),

    #[error("missing value at row {row}, column `{column}`")]
    MissingValue { row: usize, column: String },

    #[error("non-numeric value `{value}` at row {row}, column `{column}`")]
    NonNumeric { row: usize, column: String, value: String },

    #[error("invalid dataset: {0}")]
    InvalidData(String),

    #[error("explanatory column `{0}` is constant (weighted variance below 1e-12)")]
    ConstantColumn(String),

    #[error("response value {value} at row {row} is outside the {family} support")]
    Support {
        row: usize,
        value: f64,
        family: &'static str,
    },

    #[error("criterion vanishes; perturb start")]
    CriterionVanishes,

    #[error("no feasible direction: constraint rank {rank} equals dimension {dim}")]
    NoFeasibleDirection { rank: usize, dim: usize },

    #[error("metric A is not positive definite on the feasible subspace")]
    MetricNotPositiveDefinite,

    #[error("no restart converged; best criterion value {value}")]
    NotConverged { u: DVector<f64>, value: f64 },

    #[error("singular mixed-model system at fixed-effect column {column}")]
    SingularSystem { column: usize },

    #[error("single group: random intercept confounded with fixed intercept")]
    SingleGroup,

    #[error("unknown group labels: {}", .0.join(", "))]
    UnknownGroups(Vec<String>),

    #[error("dimension mismatch: {0}")]
    Dimension(String),

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("component {component}: {source}")]
    Component {
        component: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn in_component(self, component: usize) -> Self {
        match self {
            e @ Error::Component { .. } => e,
            e => Error::Component {
                component,
                source: Box::new(e),
            },
        }
    }
}
