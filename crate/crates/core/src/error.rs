use thiserror::Error;

/// Errors raised by the numerical kernels and the experiment runner.
#[derive(Debug, Error)]
pub enum Error {
    #[error("inversion did not converge for w = {w}: {detail}")]
    Inversion { w: f64, detail: String },
    #[error("invalid configuration at `{path}`: {msg}")]
    Config { path: String, msg: String },
    #[error("quadrature budget exhausted ({context}): estimate {value_re:+.6e}{value_im:+.6e}i, error {err:.3e}")]
    Quadrature {
        context: String,
        value_re: f64,
        value_im: f64,
        err: f64,
    },
    #[error("singular Hessian: |det| = {det:.3e} below floor {floor:.3e}")]
    SingularHessian { det: f64, floor: f64 },
    #[error("bracket violation for k = {k}: {detail}")]
    Bracket { k: i64, detail: String },
    #[error("missing critical point for k = {k} at t = {t}, x = {x}")]
    MissingCriticalPoint { k: i64, t: f64, x: f64 },
    #[error("asymptotics inapplicable at k = {k}: arcsin argument {arg}")]
    AsymptoticsInapplicable { k: i64, arg: f64 },
    #[error("aliasing sentinel: spectral tail mass {mass:.3e} exceeds {tol:.3e}")]
    Aliasing { mass: f64, tol: f64 },
    #[error("non-contraction in Picard iteration: sup-difference {diff:.3e} after {iters} iterations")]
    NonContraction { diff: f64, iters: usize },
    #[error("blow-up guard: {detail}")]
    BlowUp { detail: String },
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

pub type Result<T> = std::result::Result<T, Error>;
