//! Reproducible Monte-Carlo experiments: RMSE against the mismatch level
//! `k` and against the noise variance, with bound overlays.
//!
//! Every random draw comes from a ChaCha20 substream addressed by
//! `(master seed, k index, noise index, trial)`, and trial results are
//! reduced in trial order, so results do not depend on the worker count.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{BoundInputs, BoundReport};
use crate::channel::{ChannelModel, OrientationSet, OrientationTag};
use crate::error::{Error, Result};
use crate::estimation::{add_noise, Estimate, Estimator, EstimatorConfig, ModelKind};
use crate::geometry::{UnitVec3, Vec3};
use crate::scene::{apply_wall_offsets, draw_wall_offsets, Scene};

/// Key mixed into the master seed for orientation draws, keeping them
/// independent of the noise streams.
const ORIENTATION_DOMAIN: u64 = 0x6f72_6965_6e74_6174;

/// Noise substream for one `(k, sigma^2, trial)` cell.
pub fn derive_trial_rng(
    master: u64,
    k_index: usize,
    sigma_index: usize,
    trial: usize,
) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master);
    rng.set_stream(
        ((k_index as u64 & 0xffff) << 48)
            | ((sigma_index as u64 & 0xffff) << 32)
            | (trial as u64 & 0xffff_ffff),
    );
    rng
}

/// Orientation substream. Keyed by `(k, trial)` only, so a realization is
/// shared by every noise level.
pub fn derive_orientation_rng(master: u64, k_index: usize, trial: usize) -> ChaCha20Rng {
    let mut rng = ChaCha20Rng::seed_from_u64(master ^ ORIENTATION_DOMAIN);
    rng.set_stream(((k_index as u64) << 32) | (trial as u64 & 0xffff_ffff));
    rng
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MismatchMode {
    /// Fresh wall perturbations in every trial.
    RedrawPerTrial,
    /// One perturbation per `k`, reused across noise levels and trials.
    /// The uniform draws come from the master seed alone, so the offsets at
    /// different `k` are scaled copies of each other.
    FixedSeeded,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub x_true: Vec3,
    pub k_values: Vec<f64>,
    pub sigma2_values: Vec<f64>,
    pub trials: usize,
    pub mode: MismatchMode,
    pub seed: u64,
    pub estimator: EstimatorConfig,
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        if self.trials == 0 {
            return Err(Error::Config("trials must be >= 1".into()));
        }
        if self.k_values.is_empty() || self.sigma2_values.is_empty() {
            return Err(Error::Config(
                "k_values and sigma2_values must be non-empty".into(),
            ));
        }
        if let Some(k) = self
            .k_values
            .iter()
            .find(|k| !(**k >= 0.0 && k.is_finite()))
        {
            return Err(Error::Config(format!("k must be finite and >= 0, got {k}")));
        }
        if let Some(s) = self
            .sigma2_values
            .iter()
            .find(|s| !(**s > 0.0 && s.is_finite()))
        {
            return Err(Error::Config(format!(
                "noise variance must be > 0, got {s}"
            )));
        }
        self.estimator.validate()
    }
}

/// Per-wall true orientations used for one `k` in fixed mode.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Realization {
    pub k: f64,
    /// Indexed by wall (south, north, west, east).
    pub walls: [Vec3; 4],
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PointResult {
    pub k: f64,
    pub sigma2: f64,
    pub trials: usize,
    pub seed: u64,
    pub rmse_mml: f64,
    pub rmse_ml: f64,
    pub nonconverged_mml: usize,
    pub nonconverged_ml: usize,
    /// Present in fixed mode when the bounds are computable.
    pub bounds: Option<BoundReport>,
    pub bound_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentResult {
    pub mode: MismatchMode,
    pub seed: u64,
    pub x_true: Vec3,
    pub points: Vec<PointResult>,
    pub realizations: Vec<Realization>,
}

/// `sqrt(mean |x_hat - x_true|^2)`.
pub fn rmse(estimates: &[Vec3], x_true: &Vec3) -> Result<f64> {
    if estimates.is_empty() {
        return Err(Error::Empty("estimate list"));
    }
    let sum: f64 = estimates.iter().map(|e| (e - x_true).norm_squared()).sum();
    Ok((sum / estimates.len() as f64).sqrt())
}

struct TrialOutcome {
    mml: Estimate,
    ml: Estimate,
}

fn summarize(
    outcomes: &[TrialOutcome],
    x_true: &Vec3,
    k: f64,
    sigma2: f64,
    seed: u64,
) -> Result<PointResult> {
    let mml: Vec<Vec3> = outcomes.iter().map(|o| o.mml.position).collect();
    let ml: Vec<Vec3> = outcomes.iter().map(|o| o.ml.position).collect();
    Ok(PointResult {
        k,
        sigma2,
        trials: outcomes.len(),
        seed,
        rmse_mml: rmse(&mml, x_true)?,
        rmse_ml: rmse(&ml, x_true)?,
        nonconverged_mml: outcomes
            .iter()
            .filter(|o| !o.mml.diagnostics.converged)
            .count(),
        nonconverged_ml: outcomes
            .iter()
            .filter(|o| !o.ml.diagnostics.converged)
            .count(),
        bounds: None,
        bound_error: None,
    })
}

/// Without mismatch both models are the same function, so the matched
/// estimate is the mismatched one relabeled.
fn as_matched(e: &Estimate) -> Estimate {
    let mut e = e.clone();
    e.model = ModelKind::Matched;
    e
}

fn uniform_noise(scene: &Scene, sigma2: f64) -> Scene {
    scene.with_noise_variance(sigma2)
}

/// RMSE of the mismatched and matched estimators for every `(k, sigma^2)`,
/// redrawing the wall perturbations in every trial.
pub fn run_rmse_vs_k(scene: &Scene, config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let assumed = OrientationSet::assumed(scene);
    let wall_normals = scene.assumed_wall_normals();
    let n_sigma = config.sigma2_values.len();
    let mut points = Vec::new();

    for (ki, &k) in config.k_values.iter().enumerate() {
        let scenes: Vec<Scene> = config
            .sigma2_values
            .iter()
            .map(|&s| uniform_noise(scene, s))
            .collect();
        let mml_base = Estimator::new(scene, &assumed, &config.estimator)?;
        let mml_est: Vec<Estimator> = scenes
            .iter()
            .map(|s| mml_base.with_variances(&s.noise_variances))
            .collect();

        // outcomes[trial][sigma]
        let outcomes: Vec<Vec<TrialOutcome>> = (0..config.trials)
            .into_par_iter()
            .map(|t| -> Result<Vec<TrialOutcome>> {
                let offsets = draw_wall_offsets(k, &mut derive_orientation_rng(config.seed, ki, t));
                let walls = apply_wall_offsets(&wall_normals, &offsets);
                let truth = OrientationSet::from_walls(scene, OrientationTag::True, &walls);
                let true_model = ChannelModel::new(scene, &truth, config.estimator.quadrature)?;
                let mean = true_model.mean_powers(&config.x_true)?;
                let ml_base = if truth.normals == assumed.normals {
                    None
                } else {
                    Some(Estimator::new(scene, &truth, &config.estimator)?)
                };
                let mut row = Vec::with_capacity(n_sigma);
                for (si, s) in scenes.iter().enumerate() {
                    let p = add_noise(
                        &mean,
                        &s.noise_variances,
                        &mut derive_trial_rng(config.seed, ki, si, t),
                    );
                    let mml = mml_est[si].estimate(&p)?;
                    let ml = match &ml_base {
                        Some(e) => e.with_variances(&s.noise_variances).estimate(&p)?,
                        None => as_matched(&mml),
                    };
                    row.push(TrialOutcome { mml, ml });
                }
                Ok(row)
            })
            .collect::<Result<_>>()?;

        for (si, &sigma2) in config.sigma2_values.iter().enumerate() {
            let col: Vec<TrialOutcome> = outcomes
                .iter()
                .map(|row| TrialOutcome {
                    mml: row[si].mml.clone(),
                    ml: row[si].ml.clone(),
                })
                .collect();
            points.push(summarize(&col, &config.x_true, k, sigma2, config.seed)?);
        }
    }

    Ok(ExperimentResult {
        mode: MismatchMode::RedrawPerTrial,
        seed: config.seed,
        x_true: config.x_true,
        points,
        realizations: Vec::new(),
    })
}

/// The fixed-mode wall orientations at mismatch level `k`.
pub fn fixed_realization(scene: &Scene, seed: u64, k: f64) -> [UnitVec3; 4] {
    let offsets = draw_wall_offsets(k, &mut derive_orientation_rng(seed, 0, 0));
    apply_wall_offsets(&scene.assumed_wall_normals(), &offsets)
}

/// RMSE of both estimators and the bounds for every `(k, sigma^2)` with one
/// fixed wall perturbation per `k`.
pub fn run_rmse_vs_noise(scene: &Scene, config: &ExperimentConfig) -> Result<ExperimentResult> {
    config.validate()?;
    let assumed = OrientationSet::assumed(scene);
    let mut points = Vec::new();
    let mut realizations = Vec::new();

    for (ki, &k) in config.k_values.iter().enumerate() {
        let walls = fixed_realization(scene, config.seed, k);
        realizations.push(Realization {
            k,
            walls: walls.map(|w| w.into_inner()),
        });
        let truth = OrientationSet::from_walls(scene, OrientationTag::True, &walls);
        let mean = ChannelModel::new(scene, &truth, config.estimator.quadrature)?
            .mean_powers(&config.x_true)?;
        let mml_base = Estimator::new(scene, &assumed, &config.estimator)?;
        let ml_base = if truth.normals == assumed.normals {
            None
        } else {
            Some(Estimator::new(scene, &truth, &config.estimator)?)
        };
        let inputs = BoundInputs::new(scene, &config.x_true, &truth, &assumed, &config.estimator);

        for (si, &sigma2) in config.sigma2_values.iter().enumerate() {
            let s = uniform_noise(scene, sigma2);
            let mml_est = mml_base.with_variances(&s.noise_variances);
            let ml_est = ml_base
                .as_ref()
                .map(|e| e.with_variances(&s.noise_variances));
            let outcomes: Vec<TrialOutcome> = (0..config.trials)
                .into_par_iter()
                .map(|t| -> Result<TrialOutcome> {
                    let p = add_noise(
                        &mean,
                        &s.noise_variances,
                        &mut derive_trial_rng(config.seed, ki, si, t),
                    );
                    let mml = mml_est.estimate(&p)?;
                    let ml = match &ml_est {
                        Some(e) => e.estimate(&p)?,
                        None => as_matched(&mml),
                    };
                    Ok(TrialOutcome { mml, ml })
                })
                .collect::<Result<_>>()?;
            let mut point = summarize(&outcomes, &config.x_true, k, sigma2, config.seed)?;
            match inputs
                .as_ref()
                .map_err(|e| e.to_string())
                .and_then(|i| i.report(&s.noise_variances).map_err(|e| e.to_string()))
            {
                Ok(r) => point.bounds = Some(r),
                Err(e) => point.bound_error = Some(e),
            }
            points.push(point);
        }
    }

    Ok(ExperimentResult {
        mode: MismatchMode::FixedSeeded,
        seed: config.seed,
        x_true: config.x_true,
        points,
        realizations,
    })
}

/// Header of the CSV produced by [`ExperimentResult::to_csv`].
pub const CSV_HEADER: &str = "k,sigma2,inv_sigma2_db,series,value_m,trials,seed";

impl ExperimentResult {
    /// One row per `(k, sigma^2, series)`. Series are `mml`, `ml` and, when
    /// bounds are available, `mcrb`, `lb`, `crb` and `bias` (square roots of
    /// traces and the bias norm, meters).
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for p in &self.points {
            let db = 10.0 * (1.0 / p.sigma2).log10();
            let mut row = |series: &str, v: f64| {
                let _ = writeln!(
                    out,
                    "{},{:e},{:.6},{},{},{},{}",
                    p.k, p.sigma2, db, series, v, p.trials, p.seed
                );
            };
            row("mml", p.rmse_mml);
            row("ml", p.rmse_ml);
            if let Some(b) = &p.bounds {
                row("mcrb", b.sqrt_trace_mcrb);
                row("lb", b.sqrt_trace_lb);
                row("crb", b.sqrt_trace_crb);
                row("bias", b.bias_norm);
            }
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
