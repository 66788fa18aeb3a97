use std::fs;
use std::path::PathBuf;
use std::time::Instant;

use anyhow::{Context, Result};
use irs_vlp::bounds::{bound_report, BoundReport};
use irs_vlp::calculus::DerivCheck;
use irs_vlp::channel::{total_gain, ChannelModel, OrientationSet, OrientationTag};
use irs_vlp::config::{Scenario, ScenarioConfig, SweepConfig};
use irs_vlp::estimation::{
    pseudo_true, simulate_measurements, Estimate, Estimator, MeasurementVector,
};
use irs_vlp::geometry::Vec3;
use irs_vlp::montecarlo::{
    derive_trial_rng, fixed_realization, run_rmse_vs_k, run_rmse_vs_noise, MismatchMode,
};
use irs_vlp::scene::Scene;
use irs_vlp::Error;
use rand::Rng;
use serde::Serialize;

use crate::manifest::{scene_hash, RunManifest};
use crate::{CheckFailed, Cli, Command, Sweep};

/// Margin kept from the walls, floor and ceiling when sampling positions.
const SAMPLE_MARGIN: f64 = 0.05;

/// Where results go: files under `--out`, or stdout.
struct Sink {
    out: Option<PathBuf>,
    outputs: Vec<PathBuf>,
}

impl Sink {
    /// Writes `text` to `file` under the output directory, or prints it.
    fn emit(&mut self, file: &str, text: &str) -> Result<()> {
        match &self.out {
            Some(_) => self.attach(file, text),
            None => {
                print!("{text}");
                Ok(())
            }
        }
    }

    fn emit_json<T: Serialize>(&mut self, file: &str, value: &T) -> Result<()> {
        self.emit(file, &(serde_json::to_string_pretty(value)? + "\n"))
    }

    /// Writes a file only when an output directory is set.
    fn attach(&mut self, file: &str, text: &str) -> Result<()> {
        if let Some(dir) = &self.out {
            let path = dir.join(file);
            fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
            self.outputs.push(path);
        }
        Ok(())
    }
}

impl Sweep {
    fn apply(&self, sweep: &mut SweepConfig, trials: &mut usize) {
        if let Some(k) = &self.k {
            sweep.k_values = k.clone();
        }
        if let Some(s) = &self.sigma2 {
            sweep.sigma2_values = s.clone();
        }
        if let Some(t) = self.trials {
            *trials = t;
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    let started = Instant::now();
    let g = &cli.global;
    if let Some(n) = g.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("configuring the worker pool")?;
    }
    let raw = match &g.config {
        Some(p) => {
            ScenarioConfig::from_path(p).with_context(|| format!("reading {}", p.display()))?
        }
        None => ScenarioConfig::default(),
    };
    let mut scenario = raw.resolve(g.profile)?;
    if let Some(s) = g.seed {
        scenario.seed = s;
    }
    if let Some(q) = g.quadrature {
        scenario.estimator.quadrature = q;
    }
    match &cli.command {
        Command::RmseVsK(s) => s.apply(&mut scenario.rmse_vs_k, &mut scenario.trials),
        Command::RmseVsNoise(s) => s.apply(&mut scenario.rmse_vs_noise, &mut scenario.trials),
        Command::Estimate {
            sigma2: Some(s), ..
        }
        | Command::Bounds {
            sigma2: Some(s), ..
        } => {
            scenario.noise_variances = vec![*s; scenario.leds.len()];
        }
        _ => {}
    }
    let scene = scenario.scene()?;

    if let Some(dir) = &g.out {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let mut sink = Sink {
        out: g.out.clone(),
        outputs: Vec::new(),
    };
    let result = dispatch(&cli.command, &scenario, &scene, &mut sink);
    if let (Some(dir), false) = (&g.out, sink.outputs.is_empty()) {
        let manifest = RunManifest::new(
            cli.command.name(),
            g.config.clone(),
            &scenario,
            sink.outputs.clone(),
            started.elapsed(),
        )?;
        let path = manifest.write(dir)?;
        for p in sink.outputs.iter().chain([&path]) {
            eprintln!("wrote {}", p.display());
        }
    }
    result
}

fn dispatch(cmd: &Command, scenario: &Scenario, scene: &Scene, sink: &mut Sink) -> Result<()> {
    let q = scenario.estimator.quadrature;
    let x_true = scenario.x_true();
    let assumed = OrientationSet::assumed(scene);
    let fixed = |k: f64| {
        OrientationSet::from_walls(
            scene,
            OrientationTag::True,
            &fixed_realization(scene, scenario.seed, k),
        )
    };
    match cmd {
        Command::Validate => sink.emit_json("validate.json", &Summary::new(scenario, scene)?),
        Command::Channel { x, k, elements } => {
            let x = x.unwrap_or(x_true);
            let orientations = k.map_or_else(|| assumed.clone(), fixed);
            let leds = (0..scene.n_leds())
                .map(|i| {
                    let g = total_gain(scene, i, &x, &orientations, q)?;
                    Ok(LedGain {
                        led: i,
                        los_gain: g.los_gain,
                        reflected_gain: g.per_element_gains.iter().sum(),
                        total_gain: g.total,
                        mean_power: scene.leds[i].tx_power * g.total,
                        per_element_gains: elements.then_some(g.per_element_gains),
                    })
                })
                .collect::<Result<Vec<_>, Error>>()?;
            let report = ChannelReport {
                x,
                k: *k,
                orientations: orientations.tag,
                los_blocked: scene.los_blocked,
                leds,
            };
            sink.emit_json("channel.json", &report)
        }
        Command::Derivcheck { samples, k } => {
            let report = derivcheck(scene, scenario, *samples, &fixed(*k), &assumed)?;
            sink.emit_json("derivcheck.json", &report)?;
            if report.passes {
                Ok(())
            } else {
                Err(CheckFailed(format!(
                    "derivatives outside tolerance: gradient ratio {:.3e} (limit 1), Hessian relative error {:.3e} (limit {:e})",
                    report.check.grad_ratio,
                    report.check.hess_rel_err,
                    DerivCheck::HESS_REL_TOL
                ))
                .into())
            }
        }
        Command::Estimate {
            power,
            x,
            k,
            matched,
            ..
        } => {
            let truth = fixed(*k);
            let measurements = match power {
                Some(p) => MeasurementVector(p.clone()),
                None => simulate_measurements(
                    scene,
                    &x.unwrap_or(x_true),
                    &truth,
                    q,
                    &mut derive_trial_rng(scenario.seed, 0, 0, 0),
                )?,
            };
            let model = if *matched { &truth } else { &assumed };
            let estimate =
                Estimator::new(scene, model, &scenario.estimator)?.estimate(&measurements)?;
            sink.emit_json(
                "estimate.json",
                &EstimateReport {
                    estimate,
                    measurements: measurements.0,
                },
            )
        }
        Command::Pseudotrue { k } => {
            let truth = fixed(*k);
            let estimate = pseudo_true(scene, &x_true, &truth, &assumed, &scenario.estimator)?;
            sink.emit_json(
                "pseudotrue.json",
                &Realized {
                    k: *k,
                    walls: wall_normals(&truth, scene),
                    report: estimate,
                },
            )
        }
        Command::Bounds { k, .. } => {
            let truth = fixed(*k);
            let report: BoundReport =
                bound_report(scene, &x_true, &truth, &assumed, &scenario.estimator)?;
            sink.emit_json(
                "bounds.json",
                &Realized {
                    k: *k,
                    walls: wall_normals(&truth, scene),
                    report,
                },
            )
        }
        Command::RmseVsK(_) => {
            let result = run_rmse_vs_k(scene, &scenario.experiment(MismatchMode::RedrawPerTrial))?;
            sink.emit("rmse_vs_k.csv", &result.to_csv())?;
            sink.attach("rmse_vs_k.json", &(result.to_json()? + "\n"))
        }
        Command::RmseVsNoise(_) => {
            let result = run_rmse_vs_noise(scene, &scenario.experiment(MismatchMode::FixedSeeded))?;
            sink.emit("rmse_vs_noise.csv", &result.to_csv())?;
            sink.attach("rmse_vs_noise.json", &(result.to_json()? + "\n"))
        }
    }
}

#[derive(Serialize)]
struct Summary {
    valid: bool,
    scene_hash: String,
    profile: irs_vlp::config::Profile,
    leds: usize,
    irs_elements: usize,
    room: [f64; 3],
    receiver: Vec3,
    noise_variances: Vec<f64>,
}

impl Summary {
    fn new(scenario: &Scenario, scene: &Scene) -> Result<Self> {
        let e = scene.room.extent();
        Ok(Self {
            valid: true,
            scene_hash: scene_hash(scenario)?,
            profile: scenario.profile,
            leds: scene.n_leds(),
            irs_elements: scene.irs.len(),
            room: [e.x, e.y, e.z],
            receiver: scenario.x_true(),
            noise_variances: scene.noise_variances.clone(),
        })
    }
}

#[derive(Serialize)]
struct LedGain {
    led: usize,
    los_gain: f64,
    reflected_gain: f64,
    total_gain: f64,
    /// W.
    mean_power: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    per_element_gains: Option<Vec<f64>>,
}

#[derive(Serialize)]
struct ChannelReport {
    x: Vec3,
    k: Option<f64>,
    orientations: OrientationTag,
    los_blocked: bool,
    leds: Vec<LedGain>,
}

#[derive(Serialize)]
struct EstimateReport {
    #[serde(flatten)]
    estimate: Estimate,
    measurements: Vec<f64>,
}

/// A result computed under the fixed mismatch realization at `k`.
#[derive(Serialize)]
struct Realized<T> {
    k: f64,
    /// True normals of the south, north, west and east walls.
    walls: [Vec3; 4],
    #[serde(flatten)]
    report: T,
}

fn wall_normals(truth: &OrientationSet, scene: &Scene) -> [Vec3; 4] {
    let mut out = [Vec3::zeros(); 4];
    for (el, n) in scene.irs.iter().zip(&truth.normals) {
        out[el.wall.index()] = n.into_inner();
    }
    out
}

#[derive(Serialize)]
struct DerivReport {
    #[serde(flatten)]
    check: DerivCheck,
    grad_abs_tol: f64,
    grad_rel_tol: f64,
    hess_rel_tol: f64,
    /// Positions skipped because they sit on a clamp boundary.
    skipped_near_clamp: usize,
    passes: bool,
}

/// Samples positions uniformly inside the room and checks both the true and
/// the assumed model, alternating.
fn derivcheck(
    scene: &Scene,
    scenario: &Scenario,
    samples: usize,
    truth: &OrientationSet,
    assumed: &OrientationSet,
) -> Result<DerivReport> {
    let q = scenario.estimator.quadrature;
    let models = [
        ChannelModel::new(scene, truth, q)?,
        ChannelModel::new(scene, assumed, q)?,
    ];
    let (lo, hi) = (scene.room.min, scene.room.max);
    let mut rng = derive_trial_rng(scenario.seed, 0, 0, 0);
    let mut check = DerivCheck::default();
    let mut skipped = 0;
    while check.samples < samples {
        if skipped > 10 * samples.max(10) {
            anyhow::bail!("too many sampled positions lie on clamp boundaries ({skipped})");
        }
        let x = Vec3::from_fn(|m, _| rng.gen_range(lo[m] + SAMPLE_MARGIN..hi[m] - SAMPLE_MARGIN));
        match check.record(&models[check.samples % 2], &x) {
            Ok(()) => {}
            Err(Error::ClampBoundary { .. } | Error::Coincident(..)) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok(DerivReport {
        passes: check.passes(),
        check,
        grad_abs_tol: DerivCheck::GRAD_ABS_TOL,
        grad_rel_tol: DerivCheck::GRAD_REL_TOL,
        hess_rel_tol: DerivCheck::HESS_REL_TOL,
        skipped_near_clamp: skipped,
    })
}
