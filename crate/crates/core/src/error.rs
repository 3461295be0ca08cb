use std::fmt;

/// Named admissibility hypotheses of the (chain, velocity model) pairing.
///
/// Every rejection that stems from a modelling hypothesis carries one of
/// these so that tooling can report which assumption was broken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
pub enum Hypothesis {
    /// Moment cancellation and normalisation of `(V, nu, M)`.
    Vdv,
    /// `alpha <= M <= 1/alpha`.
    HypM,
    /// Pilot states lie in a bounded ball of `C^3`.
    BallR,
    /// Radius of the stable ball is at most `alpha / 4`.
    Rsmall,
    /// Stationary law of the pilot is centred.
    Mcentred,
    /// Exponential mixing (irreducibility of the finite chain).
    MixCoupled,
}

impl Hypothesis {
    pub fn tag(self) -> &'static str {
        match self {
            Hypothesis::Vdv => "vdv",
            Hypothesis::HypM => "HypM",
            Hypothesis::BallR => "BallR",
            Hypothesis::Rsmall => "Rsmall",
            Hypothesis::Mcentred => "mcentred",
            Hypothesis::MixCoupled => "mixCoupled",
        }
    }
}

impl fmt::Display for Hypothesis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("hypothesis {hypothesis} violated: {detail}")]
    Inadmissible {
        hypothesis: Hypothesis,
        detail: String,
    },

    #[error("invalid rate matrix: {0}")]
    InvalidRates(String),

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite value encountered: {0}")]
    NonFinite(String),

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("resolvent at alpha = 0 requires centred data (lambda-mean = {mean:e})")]
    NotCentred { mean: f64 },

    #[error("covariance operator has eigenvalue {value:e} below -1e-10")]
    NegativeSpectrum { value: f64 },

    #[error("covariance kernel asymmetry {asymmetry:e} exceeds 1e-8 for a reversible chain")]
    AsymmetricKernel { asymmetry: f64 },

    #[error("diffusion operator is not positive definite: {0}")]
    NotPositiveDefinite(String),

    #[error("time step {dt:e} does not resolve the relaxation scale (need dt <= {limit:e})")]
    StepTooLarge { dt: f64, limit: f64 },

    #[error("blow-up at step {step}: {detail}")]
    BlowUp { step: usize, detail: String },

    #[error("path {path} (seed {seed}) failed: {source}")]
    PathFailed {
        path: usize,
        seed: u64,
        #[source]
        source: Box<Error>,
    },

    #[error("config error at `{path}`: {message}")]
    Config { path: String, message: String },

    #[error("unknown {kind} `{name}` (available: {available})")]
    UnknownName {
        kind: &'static str,
        name: String,
        available: String,
    },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn inadmissible(hypothesis: Hypothesis, detail: impl Into<String>) -> Self {
        Error::Inadmissible {
            hypothesis,
            detail: detail.into(),
        }
    }

    /// Hypothesis named by this error, looking through path wrappers.
    pub fn hypothesis(&self) -> Option<Hypothesis> {
        match self {
            Error::Inadmissible { hypothesis, .. } => Some(*hypothesis),
            Error::PathFailed { source, .. } => source.hypothesis(),
            _ => None,
        }
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;
