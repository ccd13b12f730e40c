use thiserror::Error;

/// Which part of the well-posedness check failed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AssumptionItem {
    /// Integrability of the weighted energy of `ell`.
    EllEnergy,
    /// Integrability of the positive part of the flux divergence.
    FluxDivergence,
    /// Non-explosion of the reversing diffusion.
    NonExplosion,
}

impl std::fmt::Display for AssumptionItem {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AssumptionItem::EllEnergy => "(i) ell energy",
            AssumptionItem::FluxDivergence => "(ii) flux divergence",
            AssumptionItem::NonExplosion => "(iii) non-explosion",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("SingularCovariance: condition number {condition:.3e} at {point:?}")]
    SingularCovariance { point: Vec<f64>, condition: f64 },

    #[error("NonpositiveDensity: p = {value} at {point:?}")]
    NonpositiveDensity { point: Vec<f64>, value: f64 },

    #[error("GridTooCoarse: {0}")]
    GridTooCoarse(String),

    #[error("AssumptionViolated: {item} fails ({detail})")]
    AssumptionViolated { item: AssumptionItem, detail: String },

    #[error("NotGradientCase: max defect {max_defect:.3e}")]
    NotGradientCase { max_defect: f64 },

    #[error("NotInDomainD: positive part of L^c u / u is not integrable (last level {positive_part:.3e})")]
    NotInDomainD { positive_part: f64 },

    #[error("NonSymmetricAssembly: symmetry defect {defect:.3e}")]
    NonSymmetricAssembly { defect: f64 },

    #[error("NoConvergence: residual {residual:.3e} after {iterations} iterations")]
    NoConvergence { iterations: usize, residual: f64 },

    #[error("NotDivergenceFree: max |div gamma| = {max_divergence:.3e}")]
    NotDivergenceFree { max_divergence: f64 },

    #[error("AllPathsExploded: all {paths} paths left the guard region before T/2")]
    AllPathsExploded { paths: usize },

    #[error("TieDerivative: derivative requested at a rank tie {point:?}")]
    TieDerivative { point: Vec<f64> },

    #[error("BadParams: {}", .0.join("; "))]
    BadParams(Vec<String>),

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

impl Error {
    pub fn config(path: impl Into<String>, message: impl Into<String>) -> Self {
        Error::Config { path: path.into(), message: message.into() }
    }

    /// Process exit code: 1 for validation problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::NoConvergence { .. }
            | Error::AllPathsExploded { .. }
            | Error::GridTooCoarse(_)
            | Error::NonSymmetricAssembly { .. }
            | Error::SingularCovariance { .. }
            | Error::NonpositiveDensity { .. }
            | Error::TieDerivative { .. } => 2,
            _ => 1,
        }
    }
}

pub type Result<T> = std::result::Result<T, Error>;
