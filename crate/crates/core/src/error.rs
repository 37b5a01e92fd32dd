use thiserror::Error;

/// Errors raised by the numeric core.
#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid array configuration: {0}")]
    InvalidConfig(String),

    #[error("MPC delay {delay_ns} ns is outside the alias-free range [0, {limit_ns}) ns")]
    DelayOutOfRange { delay_ns: f64, limit_ns: f64 },

    #[error("invalid scene: {0}")]
    InvalidScene(String),

    #[error("unknown material `{0}`")]
    UnknownMaterial(String),

    #[error("channel response contains non-finite values")]
    NonFinite,

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),

    #[error("angle {theta_deg}° is outside the template support")]
    OutsideSupport { theta_deg: f64 },

    #[error("insufficient angular extent")]
    InsufficientAngularExtent,

    #[error("need at least {needed} MPCs in region, got {got}")]
    TooFewPoints { needed: usize, got: usize },

    #[error("no feasible structure template for the requested kinds")]
    NoFeasibleTemplate,

    #[error("window size must be odd and positive, got {0}")]
    InvalidWindow(usize),

    #[error("nonphysical reflection coefficient magnitude {0}")]
    NonPhysicalReflection(f64),

    #[error("reflection loss {rl_db} dB at {gamma_deg}° incidence cannot be inverted to a permittivity")]
    NotInvertible { rl_db: f64, gamma_deg: f64 },

    #[error("delay must be positive, got {0} s")]
    NonPositiveDelay(f64),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("material database: {0}")]
    Database(String),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
