use thiserror::Error;

#[derive(Debug, Error)]
pub enum BubbleflowError {
    #[error("invalid specification: {0}")]
    InvalidSpec(String),
    #[error("point outside chart: distance {distance} exceeds injectivity radius {radius}")]
    OutOfChart { distance: f64, radius: f64 },
    #[error("ball radius {radius} outside (0, {max}]")]
    RadiusOutOfRange { radius: f64, max: f64 },
    #[error("field unresolved: degree integral {raw} is {deviation} from the nearest integer")]
    UnresolvedField { raw: f64, deviation: f64 },
    #[error("degenerate correlation: two smallest singular values {s1} and {s2} below 1e-12")]
    DegenerateCorrelation { s1: f64, s2: f64 },
    #[error("invalid constant profile: {0}")]
    ProfileInvalid(String),
    #[error("radial ODE step failure: {0}")]
    OdeStepFailure(String),
    #[error("radial table lost monotonicity at radius index {0}")]
    MonotonicityLost(usize),
    #[error("cylinder chart underresolved: {rings} rings overlap the ramp window (need >= 8)")]
    ChartUnderresolved { rings: usize },
    #[error("no concentration: sup ball energy {sup_energy} below 2*pi at maximal radius")]
    NoConcentration { sup_energy: f64 },
    #[error("concentration scale {mu0} below the family floor {mu_star}")]
    BelowMuStar { mu0: f64, mu_star: f64 },
    #[error("pull-back resampling underresolved: {0}")]
    ResampleUnderresolved(String),
    #[error("time step collapsed below 1e-12 (dt = {dt})")]
    StepCollapse { dt: f64 },
    #[error("flow stalled: no progress over {steps} accepted steps")]
    Stalled { steps: usize },
    #[error("variation field not tangent: max |v . u| = {0}")]
    NotTangent(f64),
    #[error("core energy left the protection window: E_core = {core_energy} at t = {t}")]
    CoreWindowViolated { core_energy: f64, t: f64 },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("config error: {0}")]
    Config(String),
}
