//! Measurement simulation and least-squares position estimation.
//!
//! [`Estimator`] tabulates the noiseless powers of one orientation model over
//! a regular grid covering the search region, so each estimate costs a table
//! scan plus a short local refinement. Refinement is a projected
//! Levenberg-Marquardt iteration on the noise-weighted residuals.

use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{ChannelModel, OrientationSet, OrientationTag};
use crate::error::{Error, Result};
use crate::geometry::{AxisBox, Mat3, Vec3};
use crate::scene::Scene;

/// One received power per LED, watts. Entries may be negative.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct MeasurementVector(pub Vec<f64>);

impl MeasurementVector {
    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EstimatorConfig {
    /// Coarse grid spacing, meters.
    pub grid_step: f64,
    /// Refinement stops once an accepted step is shorter than this, meters.
    pub tolerance: f64,
    pub max_iterations: usize,
    /// Number of best grid cells used as refinement starts.
    pub multistart: usize,
    pub quadrature: usize,
}

impl Default for EstimatorConfig {
    fn default() -> Self {
        Self {
            grid_step: 0.10,
            tolerance: 1e-6,
            max_iterations: 200,
            multistart: 5,
            quadrature: 1,
        }
    }
}

impl EstimatorConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.grid_step > 0.0 && self.grid_step.is_finite()) {
            return Err(Error::Config(format!(
                "grid_step must be > 0, got {}",
                self.grid_step
            )));
        }
        if !(self.tolerance > 0.0 && self.tolerance.is_finite()) {
            return Err(Error::Config(format!(
                "tolerance must be > 0, got {}",
                self.tolerance
            )));
        }
        if self.multistart == 0 || self.quadrature == 0 || self.max_iterations == 0 {
            return Err(Error::Config(
                "multistart, quadrature and max_iterations must be >= 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelKind {
    /// Likelihood built on the true orientations.
    Matched,
    /// Likelihood built on the assumed orientations.
    Mismatched,
}

impl From<OrientationTag> for ModelKind {
    fn from(t: OrientationTag) -> Self {
        match t {
            OrientationTag::True => ModelKind::Matched,
            OrientationTag::Assumed => ModelKind::Mismatched,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostics {
    pub grid_minimum: Vec3,
    pub grid_objective: f64,
    /// Grid cells sharing the minimum objective exactly.
    pub grid_ties: usize,
    /// Accepted refinement steps from the winning start.
    pub refinement_steps: usize,
    pub converged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Estimate {
    pub position: Vec3,
    pub objective: f64,
    pub model: ModelKind,
    pub diagnostics: Diagnostics,
}

/// Adds independent zero-mean Gaussian noise with the given variances.
pub fn add_noise<R: Rng + ?Sized>(
    mean: &[f64],
    variances: &[f64],
    rng: &mut R,
) -> MeasurementVector {
    MeasurementVector(
        mean.iter()
            .zip(variances)
            .map(|(m, s2)| {
                let n = Normal::new(0.0, s2.sqrt()).expect("variance is finite and >= 0");
                m + n.sample(rng)
            })
            .collect(),
    )
}

/// Noisy powers at `x` under the true orientations.
pub fn simulate_measurements<R: Rng + ?Sized>(
    scene: &Scene,
    x: &Vec3,
    truth: &OrientationSet,
    quadrature: usize,
    rng: &mut R,
) -> Result<MeasurementVector> {
    let mean = ChannelModel::new(scene, truth, quadrature)?.mean_powers(x)?;
    Ok(add_noise(&mean, &scene.noise_variances, rng))
}

/// `sum_i (P_i - mean_i)^2 / sigma_i^2`.
pub fn weighted_residual(p_rx: &[f64], mean: &[f64], variances: &[f64]) -> f64 {
    p_rx.iter()
        .zip(mean)
        .zip(variances)
        .map(|((p, m), s2)| (p - m) * (p - m) / s2)
        .sum()
}

/// Least-squares objective at `x` for the given orientation model.
pub fn nls_objective(
    p_rx: &MeasurementVector,
    scene: &Scene,
    x: &Vec3,
    orientations: &OrientationSet,
    quadrature: usize,
) -> Result<f64> {
    check_len(p_rx, scene.leds.len())?;
    let mean = ChannelModel::new(scene, orientations, quadrature)?.mean_powers(x)?;
    Ok(weighted_residual(&p_rx.0, &mean, &scene.noise_variances))
}

fn check_len(p_rx: &MeasurementVector, n: usize) -> Result<()> {
    if p_rx.len() != n {
        return Err(Error::MeasurementCount {
            expected: n,
            got: p_rx.len(),
        });
    }
    Ok(())
}

/// Axis points `min, min + step, ...` not exceeding `max`.
fn axis(min: f64, max: f64, step: f64) -> Vec<f64> {
    let n = ((max - min) / step + 1e-9).floor() as usize;
    (0..=n).map(|i| min + i as f64 * step).collect()
}

fn grid_dims(region: &AxisBox, step: f64) -> [usize; 3] {
    [
        axis(region.min.x, region.max.x, step).len(),
        axis(region.min.y, region.max.y, step).len(),
        axis(region.min.z, region.max.z, step).len(),
    ]
}

/// Regular grid over `region`, ordered with `x` slowest and `z` fastest.
pub fn grid_points(region: &AxisBox, step: f64) -> Vec<Vec3> {
    let (xs, ys, zs) = (
        axis(region.min.x, region.max.x, step),
        axis(region.min.y, region.max.y, step),
        axis(region.min.z, region.max.z, step),
    );
    let mut out = Vec::with_capacity(xs.len() * ys.len() * zs.len());
    for &x in &xs {
        for &y in &ys {
            for &z in &zs {
                out.push(Vec3::new(x, y, z));
            }
        }
    }
    out
}

/// A tabulated orientation model ready to estimate positions.
#[derive(Debug, Clone)]
pub struct Estimator {
    model: Arc<ChannelModel>,
    kind: ModelKind,
    config: EstimatorConfig,
    region: AxisBox,
    variances: Vec<f64>,
    grid: Arc<Vec<Vec3>>,
    dims: [usize; 3],
    /// Mean powers per grid cell, `n_leds` per cell; NaN where the model is
    /// undefined (the cell coincides with an LED or an element).
    table: Arc<Vec<f64>>,
}

impl Estimator {
    pub fn new(
        scene: &Scene,
        orientations: &OrientationSet,
        config: &EstimatorConfig,
    ) -> Result<Self> {
        config.validate()?;
        if scene.search_region.is_degenerate() {
            return Err(Error::Config("search region is degenerate".into()));
        }
        let model = ChannelModel::new(scene, orientations, config.quadrature)?;
        let grid = grid_points(&scene.search_region, config.grid_step);
        let n = model.n_leds();
        let mut table = vec![0.0; grid.len() * n];
        table
            .par_chunks_mut(n * 256)
            .zip(grid.par_chunks(256))
            .for_each(|(rows, pts)| {
                for (row, p) in rows.chunks_mut(n).zip(pts) {
                    if model.mean_powers_into(p, row).is_err() {
                        row.iter_mut().for_each(|v| *v = f64::NAN);
                    }
                }
            });
        Ok(Self {
            model: Arc::new(model),
            kind: orientations.tag.into(),
            config: *config,
            region: scene.search_region,
            variances: scene.noise_variances.clone(),
            grid: Arc::new(grid),
            dims: grid_dims(&scene.search_region, config.grid_step),
            table: Arc::new(table),
        })
    }

    /// The same tabulated model with different noise variances. Cheap: the
    /// table is shared.
    pub fn with_variances(&self, variances: &[f64]) -> Self {
        Self {
            variances: variances.to_vec(),
            ..self.clone()
        }
    }

    pub fn model(&self) -> &ChannelModel {
        &self.model
    }

    pub fn kind(&self) -> ModelKind {
        self.kind
    }

    pub fn config(&self) -> &EstimatorConfig {
        &self.config
    }

    pub fn grid(&self) -> &[Vec3] {
        &self.grid
    }

    pub fn objective(&self, p_rx: &[f64], x: &Vec3) -> Result<f64> {
        let mean = self.model.mean_powers(x)?;
        Ok(weighted_residual(p_rx, &mean, &self.variances))
    }

    fn grid_objectives(&self, p_rx: &[f64]) -> Vec<f64> {
        let n = self.model.n_leds();
        self.table
            .chunks(n)
            .map(|row| {
                let v = weighted_residual(p_rx, row, &self.variances);
                if v.is_nan() {
                    f64::INFINITY
                } else {
                    v
                }
            })
            .collect()
    }

    /// Index of the grid minimum. Among exactly tied cells the one nearest to
    /// the centroid of the tied set wins, then the lowest index; a flat
    /// no-signal region therefore resolves to its middle rather than to a
    /// corner.
    fn grid_argmin(&self, obj: &[f64]) -> Result<(usize, usize)> {
        let best = obj.iter().copied().fold(f64::INFINITY, f64::min);
        if !best.is_finite() {
            return Err(Error::Empty("no grid cell has a finite objective"));
        }
        let ties: Vec<usize> = (0..obj.len()).filter(|&j| obj[j] == best).collect();
        if ties.len() == 1 {
            return Ok((ties[0], 1));
        }
        let centroid = ties.iter().map(|&j| self.grid[j]).sum::<Vec3>() / ties.len() as f64;
        let mut pick = ties[0];
        let mut pick_d = f64::INFINITY;
        for &j in &ties {
            let d = (self.grid[j] - centroid).norm_squared();
            if d < pick_d {
                pick = j;
                pick_d = d;
            }
        }
        Ok((pick, ties.len()))
    }

    /// Whether cell `j` is no worse than any of its (up to 26) neighbours.
    fn is_local_min(&self, obj: &[f64], j: usize) -> bool {
        let [nx, ny, nz] = self.dims;
        let (i, r) = (j / (ny * nz), j % (ny * nz));
        let (jy, jz) = (r / nz, r % nz);
        let near = |c: usize, n: usize| c.saturating_sub(1)..=(c + 1).min(n - 1);
        for a in near(i, nx) {
            for b in near(jy, ny) {
                for c in near(jz, nz) {
                    if obj[(a * ny + b) * nz + c] < obj[j] {
                        return false;
                    }
                }
            }
        }
        true
    }

    /// Refinement starts: the chosen grid minimum, then the next best cells
    /// up to the multistart count, then (if `basins`) every other grid local
    /// minimum.
    fn starts(&self, obj: &[f64], first: usize, basins: bool) -> Vec<usize> {
        let by_obj = |a: &usize, b: &usize| obj[*a].total_cmp(&obj[*b]).then(a.cmp(b));
        let mut order: Vec<usize> = (0..obj.len()).filter(|&j| obj[j].is_finite()).collect();
        let k = self.config.multistart.min(order.len());
        if k < order.len() {
            order.select_nth_unstable_by(k, by_obj);
            order.truncate(k + 1);
        }
        order.sort_by(by_obj);
        let mut starts = vec![first];
        starts.extend(order.into_iter().filter(|&j| j != first).take(k - 1));
        if basins {
            let mut minima: Vec<usize> = (0..obj.len())
                .filter(|&j| obj[j].is_finite() && !starts.contains(&j))
                .filter(|&j| self.is_local_min(obj, j))
                .collect();
            minima.sort_by(by_obj);
            starts.extend(minima);
        }
        starts
    }

    pub fn estimate(&self, p_rx: &MeasurementVector) -> Result<Estimate> {
        self.search(p_rx, false)
    }

    /// Like [`Estimator::estimate`] but also refines from every grid local
    /// minimum. Slower; used where the global minimizer matters more than
    /// throughput.
    pub fn estimate_global(&self, p_rx: &MeasurementVector) -> Result<Estimate> {
        self.search(p_rx, true)
    }

    fn search(&self, p_rx: &MeasurementVector, basins: bool) -> Result<Estimate> {
        check_len(p_rx, self.model.n_leds())?;
        let p = &p_rx.0;
        let obj = self.grid_objectives(p);
        let (first, ties) = self.grid_argmin(&obj)?;

        let starts = self.starts(&obj, first, basins);

        let mut best: Option<Refined> = None;
        for &s in &starts {
            let r = self.refine(p, self.grid[s], obj[s]);
            if best.as_ref().is_none_or(|b| r.objective < b.objective) {
                best = Some(r);
            }
        }
        let best = best.expect("at least one start");
        Ok(Estimate {
            position: best.position,
            objective: best.objective,
            model: self.kind,
            diagnostics: Diagnostics {
                grid_minimum: self.grid[first],
                grid_objective: obj[first],
                grid_ties: ties,
                refinement_steps: best.steps,
                converged: best.converged,
            },
        })
    }

    /// Weighted residuals `(P_i - P_TX,i h_i) / sigma_i` and their Jacobian.
    fn residuals(&self, p: &[f64], x: &Vec3) -> Result<(Vec<f64>, Vec<Vec3>)> {
        let (h, g) = self.model.gains_and_gradients(x)?;
        let tx = self.model.tx_powers();
        let mut r = Vec::with_capacity(h.len());
        let mut jac = Vec::with_capacity(h.len());
        for i in 0..h.len() {
            let s = self.variances[i].sqrt();
            r.push((p[i] - tx[i] * h[i]) / s);
            jac.push(-g[i] * (tx[i] / s));
        }
        Ok((r, jac))
    }

    fn refine(&self, p: &[f64], start: Vec3, start_obj: f64) -> Refined {
        let mut x = start;
        let mut f = start_obj;
        let mut lambda = 1e-3;
        let mut steps = 0;
        let mut converged = false;
        for _ in 0..self.config.max_iterations {
            let Ok((r, jac)) = self.residuals(p, &x) else {
                break;
            };
            let mut jtj = Mat3::zeros();
            let mut jtr = Vec3::zeros();
            for (ri, gi) in r.iter().zip(&jac) {
                jtj += gi * gi.transpose();
                jtr += gi * *ri;
            }
            if jtr.amax() == 0.0 {
                converged = true;
                break;
            }
            let mut accepted = false;
            while lambda < 1e16 {
                let mut damped = jtj;
                for m in 0..3 {
                    damped[(m, m)] += lambda * jtj[(m, m)].max(1e-12 * jtj.amax());
                }
                let Some(step) = damped.lu().solve(&(-jtr)) else {
                    lambda *= 4.0;
                    continue;
                };
                let cand = self.region.clamp(&(x + step));
                let moved = (cand - x).norm();
                let small = moved < self.config.tolerance;
                match self.objective(p, &cand) {
                    Ok(fc) if fc < f => {
                        // A negligible but improving step is taken, then we stop.
                        converged = small;
                        x = cand;
                        f = fc;
                        steps += 1;
                        lambda = (lambda / 3.0).max(1e-12);
                        accepted = true;
                        break;
                    }
                    _ if small => {
                        converged = true;
                        break;
                    }
                    _ => lambda *= 4.0,
                }
            }
            if !accepted {
                // No decrease at any damping: stationary to precision.
                converged = true;
            }
            if converged {
                break;
            }
        }
        Refined {
            position: x,
            objective: f,
            steps,
            converged,
        }
    }
}

struct Refined {
    position: Vec3,
    objective: f64,
    steps: usize,
    converged: bool,
}

/// Grid search plus refinement of the least-squares objective.
pub fn estimate_position(
    p_rx: &MeasurementVector,
    scene: &Scene,
    orientations: &OrientationSet,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    Estimator::new(scene, orientations, config)?.estimate(p_rx)
}

/// The position the assumed model fits best to the noiseless powers produced
/// at `x_true` under the true orientations.
pub fn pseudo_true(
    scene: &Scene,
    x_true: &Vec3,
    truth: &OrientationSet,
    assumed: &OrientationSet,
    config: &EstimatorConfig,
) -> Result<Estimate> {
    let mean = ChannelModel::new(scene, truth, config.quadrature)?.mean_powers(x_true)?;
    Estimator::new(scene, assumed, config)?.estimate_global(&MeasurementVector(mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::tests::{desk_scene, tilted_walls};
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    const XBAR: Vec3 = Vec3::new(0.5, 0.5, 0.85);

    #[test]
    fn grid_covers_region() {
        let g = grid_points(&AxisBox::room(4.0, 4.0, 3.0), 0.1);
        assert_eq!(g.len(), 41 * 41 * 31);
        assert_eq!(g[0], Vec3::new(-2.0, -2.0, 0.0));
        assert!((g[g.len() - 1] - Vec3::new(2.0, 2.0, 3.0)).amax() < 1e-12);
    }

    #[test]
    fn noise_statistics() {
        let mean = [1e-8, 2e-8, -3e-9, 0.0];
        let var = [1e-17, 4e-18, 1e-18, 2.5e-17];
        let mut rng = ChaCha20Rng::seed_from_u64(99);
        let n = 100_000;
        let mut sum = [0.0; 4];
        let mut sq = [0.0; 4];
        for _ in 0..n {
            let m = add_noise(&mean, &var, &mut rng);
            for i in 0..4 {
                sum[i] += m.0[i];
                sq[i] += (m.0[i] - mean[i]).powi(2);
            }
        }
        for i in 0..4 {
            let avg = sum[i] / n as f64;
            assert!((avg - mean[i]).abs() < 4.0 * var[i].sqrt() / (n as f64).sqrt());
            let v = sq[i] / n as f64;
            assert!((v / var[i] - 1.0).abs() < 0.05);
        }
        let exact = add_noise(&mean, &[0.0; 4], &mut rng);
        assert_eq!(exact.0, mean.to_vec());
    }

    #[test]
    fn objective_properties() {
        let s = desk_scene().with_wall_orientations(&tilted_walls());
        let o = OrientationSet::truth(&s);
        let mean = ChannelModel::new(&s, &o, 1)
            .unwrap()
            .mean_powers(&XBAR)
            .unwrap();
        let exact = MeasurementVector(mean.clone());
        assert_eq!(nls_objective(&exact, &s, &XBAR, &o, 1).unwrap(), 0.0);

        let p = MeasurementVector(vec![3e-8, -1e-9, 7e-8, 2e-8]);
        let x = Vec3::new(-0.3, 1.1, 0.5);
        let h = ChannelModel::new(&s, &o, 1)
            .unwrap()
            .mean_powers(&x)
            .unwrap();
        let hand: f64 = (0..4)
            .map(|i| (p.0[i] - h[i]).powi(2) / s.noise_variances[i])
            .sum();
        let v = nls_objective(&p, &s, &x, &o, 1).unwrap();
        assert!(((v - hand) / hand).abs() < 1e-12);

        let scaled = s.with_noise_variance(s.noise_variances[0] * 10.0);
        let v10 = nls_objective(&p, &scaled, &x, &o, 1).unwrap();
        assert!((v10 * 10.0 - v).abs() < 1e-12 * v);

        assert!(matches!(
            nls_objective(&MeasurementVector(vec![0.0; 3]), &s, &x, &o, 1),
            Err(Error::MeasurementCount {
                expected: 4,
                got: 3
            })
        ));
    }

    #[test]
    fn noiseless_estimate_recovers_truth() {
        let s = desk_scene().with_wall_orientations(&tilted_walls());
        let cfg = EstimatorConfig::default();
        let o = OrientationSet::truth(&s);
        for x in [
            XBAR,
            Vec3::new(-1.23, 0.37, 0.61),
            Vec3::new(1.1, -1.45, 1.02),
        ] {
            let mean = ChannelModel::new(&s, &o, 1)
                .unwrap()
                .mean_powers(&x)
                .unwrap();
            let e = estimate_position(&MeasurementVector(mean), &s, &o, &cfg).unwrap();
            assert!((e.position - x).norm() < 1e-5, "{x:?} -> {:?}", e.position);
            assert!(e.objective <= e.diagnostics.grid_objective);
            assert_eq!(e.model, ModelKind::Matched);
            assert!(e.diagnostics.converged);
        }
    }

    #[test]
    fn estimates_are_deterministic_and_scale_invariant() {
        let s = desk_scene().with_wall_orientations(&tilted_walls());
        let cfg = EstimatorConfig::default();
        let o = OrientationSet::assumed(&s);
        let truth = OrientationSet::truth(&s);
        let mut rng = ChaCha20Rng::seed_from_u64(5);
        let p = simulate_measurements(&s, &XBAR, &truth, 1, &mut rng).unwrap();
        let est = Estimator::new(&s, &o, &cfg).unwrap();
        let a = est.estimate(&p).unwrap();
        let b = est.estimate(&p).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.model, ModelKind::Mismatched);
        let again = est.objective(&p.0, &a.position).unwrap();
        assert!((again - a.objective).abs() <= 1e-12 * a.objective.max(1e-300));

        let c = 3.0;
        let mut scaled = s.clone();
        scaled.leds.iter_mut().for_each(|l| l.tx_power *= c);
        scaled.noise_variances.iter_mut().for_each(|v| *v *= c * c);
        let ps = MeasurementVector(p.0.iter().map(|v| v * c).collect());
        let e2 = estimate_position(&ps, &scaled, &OrientationSet::assumed(&scaled), &cfg).unwrap();
        assert!((e2.position - a.position).norm() < 1e-6);
    }

    #[test]
    fn pseudo_true_without_mismatch_is_truth() {
        let s = desk_scene();
        let o = OrientationSet::assumed(&s);
        let e = pseudo_true(
            &s,
            &XBAR,
            &OrientationSet::truth(&s),
            &o,
            &EstimatorConfig::default(),
        )
        .unwrap();
        assert!((e.position - XBAR).norm() < 1e-6);
    }

    #[test]
    fn flat_region_ties_resolve_to_middle() {
        let s = desk_scene();
        let est = Estimator::new(
            &s,
            &OrientationSet::assumed(&s),
            &EstimatorConfig::default(),
        )
        .unwrap();
        // Large positive powers: every zero-gain cell ties; the fit is worst
        // there, so the minimum is elsewhere. Zero powers: zero-gain cells
        // tie at objective 0.
        let e = est.estimate(&MeasurementVector(vec![0.0; 4])).unwrap();
        assert!(e.diagnostics.grid_ties > 1);
        assert_eq!(e.objective, 0.0);
        let g = e.diagnostics.grid_minimum;
        assert!(g.x.abs() < 0.11 && g.y.abs() < 0.11, "{g:?}");
    }
}
