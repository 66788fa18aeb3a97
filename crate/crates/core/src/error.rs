use thiserror::Error;

use crate::geometry::Vec3;
use crate::scene::Violation;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("scene is invalid: {}", format_violations(.0))]
    InvalidScene(Vec<Violation>),

    #[error("IRS grid of {rows}x{cols} elements spans {span_h:.4} m x {span_v:.4} m, exceeding the {wall_w:.4} m x {wall_h:.4} m wall")]
    GridOverflow {
        rows: usize,
        cols: usize,
        span_h: f64,
        span_v: f64,
        wall_w: f64,
        wall_h: f64,
    },

    #[error("per-wall element count {0} is not a perfect square")]
    NotPerfectSquare(usize),

    #[error("coincident points: receiver position {0:?} coincides with {1}")]
    Coincident(Vec3, &'static str),

    #[error("degenerate geometry: {0}")]
    Degenerate(String),

    #[error("position {position:?} lies within {eps:e} of the clamp boundary of {factor}; derivative undefined")]
    ClampBoundary {
        position: Vec3,
        factor: &'static str,
        eps: f64,
    },

    #[error("matrix is ill-conditioned (condition estimate {condition:e})")]
    IllConditioned { condition: f64 },

    #[error("Fisher information matrix is singular (condition estimate {condition:e})")]
    SingularFim { condition: f64 },

    #[error("orientation set has {got} vectors but the scene has {expected} IRS elements")]
    OrientationCount { expected: usize, got: usize },

    #[error("measurement vector has {got} entries but the scene has {expected} LEDs")]
    MeasurementCount { expected: usize, got: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn format_violations(v: &[Violation]) -> String {
    v.iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join("; ")
}
