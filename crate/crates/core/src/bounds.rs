//! Misspecified and matched Cramér-Rao bounds.
//!
//! With Gaussian noise the misspecified log-likelihood is
//! `-sum_i (P_i - P_TX,i h_i(x))^2 / 2 sigma_i^2` under the assumed model.
//! `A` is its expected Hessian and `B` the expected outer product of its
//! gradient, both at the pseudo-true point and both with expectations taken
//! under the true model.

use serde::{Serialize, Serializer};

use crate::calculus::{Boundary, Derivatives};
use crate::channel::{ChannelModel, OrientationSet};
use crate::error::{Error, Result};
use crate::estimation::{pseudo_true, EstimatorConfig};
use crate::geometry::{inverse_with_condition, rows, symmetrize, Mat3, Vec3};
use crate::scene::Scene;

/// Largest accepted condition estimate for matrices that get inverted.
pub const MAX_CONDITION: f64 = 1e12;

/// Expected Hessian of the misspecified log-likelihood at `x0`.
///
/// `deriv` holds the assumed-model gains and derivatives at `x0`, `expected`
/// the true-model mean powers at the true position.
pub fn matrix_a(deriv: &Derivatives, tx: &[f64], expected: &[f64], variances: &[f64]) -> Mat3 {
    let mut a = Mat3::zeros();
    for i in 0..tx.len() {
        let p = tx[i];
        let resid = expected[i] - p * deriv.value[i];
        let g = &deriv.grad[i];
        a += (deriv.hess[i] * (p * resid) - g * g.transpose() * (p * p)) / variances[i];
    }
    symmetrize(&a)
}

/// Expected outer product of the misspecified score at `x0`.
pub fn matrix_b(deriv: &Derivatives, tx: &[f64], expected: &[f64], variances: &[f64]) -> Mat3 {
    let mut b = Mat3::zeros();
    for i in 0..tx.len() {
        let p = tx[i];
        let delta_i = expected[i] - p * deriv.value[i];
        let gi = deriv.grad[i] * (p / variances[i]);
        for j in 0..tx.len() {
            let delta_j = expected[j] - tx[j] * deriv.value[j];
            let gj = deriv.grad[j] * (tx[j] / variances[j]);
            let moment = if i == j {
                variances[i] + delta_i * delta_i
            } else {
                delta_i * delta_j
            };
            b += gi * gj.transpose() * moment;
        }
    }
    symmetrize(&b)
}

/// `A^-1 B A^-1`.
pub fn mcrb(a: &Mat3, b: &Mat3) -> Result<Mat3> {
    match inverse_with_condition(a) {
        (Some(inv), cond) if cond < MAX_CONDITION => Ok(symmetrize(&(inv * b * inv))),
        (_, condition) => Err(Error::IllConditioned { condition }),
    }
}

/// `MCRB + (x_true - x0)(x_true - x0)^T`.
pub fn lower_bound(mcrb: &Mat3, x_true: &Vec3, x0: &Vec3) -> Mat3 {
    let bias = x_true - x0;
    mcrb + bias * bias.transpose()
}

/// Gaussian Fisher information of the correctly specified model.
pub fn fisher_information(grad: &[Vec3], tx: &[f64], variances: &[f64]) -> Mat3 {
    let mut f = Mat3::zeros();
    for i in 0..tx.len() {
        f += grad[i] * grad[i].transpose() * (tx[i] * tx[i] / variances[i]);
    }
    f
}

pub fn crb_from_fim(fim: &Mat3) -> Result<Mat3> {
    match inverse_with_condition(fim) {
        (Some(inv), cond) if cond < MAX_CONDITION => Ok(symmetrize(&inv)),
        (_, condition) => Err(Error::SingularFim { condition }),
    }
}

/// CRB of the matched model at the true position.
pub fn fim_crb(
    scene: &Scene,
    x_true: &Vec3,
    truth: &OrientationSet,
    quadrature: usize,
) -> Result<Mat3> {
    let model = ChannelModel::new(scene, truth, quadrature)?;
    let d = model.derivatives(x_true, Boundary::Strict)?;
    crb_from_fim(&fisher_information(
        &d.grad,
        model.tx_powers(),
        &scene.noise_variances,
    ))
}

fn ser_rows<S: Serializer>(m: &Mat3, s: S) -> std::result::Result<S::Ok, S::Error> {
    rows(m).serialize(s)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub x_true: Vec3,
    pub x0: Vec3,
    /// `x_true - x0`, meters.
    pub bias: Vec3,
    #[serde(serialize_with = "ser_rows")]
    pub mcrb: Mat3,
    #[serde(serialize_with = "ser_rows")]
    pub lb: Mat3,
    #[serde(serialize_with = "ser_rows")]
    pub crb: Mat3,
    pub sqrt_trace_mcrb: f64,
    pub sqrt_trace_lb: f64,
    pub sqrt_trace_crb: f64,
    pub bias_norm: f64,
}

/// Noise-independent ingredients of the bounds for one mismatch
/// realization. The pseudo-true point does not move when every variance is
/// scaled by the same factor, so one instance serves a whole noise sweep.
#[derive(Debug, Clone)]
pub struct BoundInputs {
    pub x_true: Vec3,
    pub x0: Vec3,
    tx: Vec<f64>,
    /// Assumed-model derivatives at `x0`.
    at_x0: Derivatives,
    /// True-model gradients at `x_true`.
    grad_true: Vec<Vec3>,
    /// True-model mean powers at `x_true`.
    expected: Vec<f64>,
}

impl BoundInputs {
    /// Solves for the pseudo-true point and evaluates the derivatives there.
    pub fn new(
        scene: &Scene,
        x_true: &Vec3,
        truth: &OrientationSet,
        assumed: &OrientationSet,
        config: &EstimatorConfig,
    ) -> Result<Self> {
        let x0 = pseudo_true(scene, x_true, truth, assumed, config)?.position;
        Self::at(scene, x_true, &x0, truth, assumed, config.quadrature)
    }

    /// Same as [`BoundInputs::new`] with a known pseudo-true point.
    pub fn at(
        scene: &Scene,
        x_true: &Vec3,
        x0: &Vec3,
        truth: &OrientationSet,
        assumed: &OrientationSet,
        quadrature: usize,
    ) -> Result<Self> {
        let true_model = ChannelModel::new(scene, truth, quadrature)?;
        let assumed_model = ChannelModel::new(scene, assumed, quadrature)?;
        let dt = true_model.derivatives(x_true, Boundary::Strict)?;
        let expected = dt
            .value
            .iter()
            .zip(true_model.tx_powers())
            .map(|(h, p)| h * p)
            .collect();
        Ok(Self {
            x_true: *x_true,
            x0: *x0,
            tx: true_model.tx_powers().to_vec(),
            at_x0: assumed_model.derivatives(x0, Boundary::Strict)?,
            grad_true: dt.grad,
            expected,
        })
    }

    pub fn matrix_a(&self, variances: &[f64]) -> Mat3 {
        matrix_a(&self.at_x0, &self.tx, &self.expected, variances)
    }

    pub fn matrix_b(&self, variances: &[f64]) -> Mat3 {
        matrix_b(&self.at_x0, &self.tx, &self.expected, variances)
    }

    pub fn crb(&self, variances: &[f64]) -> Result<Mat3> {
        crb_from_fim(&fisher_information(&self.grad_true, &self.tx, variances))
    }

    pub fn report(&self, variances: &[f64]) -> Result<BoundReport> {
        let m = mcrb(&self.matrix_a(variances), &self.matrix_b(variances))?;
        let lb = lower_bound(&m, &self.x_true, &self.x0);
        let crb = self.crb(variances)?;
        let bias = self.x_true - self.x0;
        Ok(BoundReport {
            x_true: self.x_true,
            x0: self.x0,
            bias,
            sqrt_trace_mcrb: m.trace().max(0.0).sqrt(),
            sqrt_trace_lb: lb.trace().max(0.0).sqrt(),
            sqrt_trace_crb: crb.trace().max(0.0).sqrt(),
            bias_norm: bias.norm(),
            mcrb: m,
            lb,
            crb,
        })
    }
}

/// Pseudo-true point and all bounds for one scene and mismatch realization.
pub fn bound_report(
    scene: &Scene,
    x_true: &Vec3,
    truth: &OrientationSet,
    assumed: &OrientationSet,
    config: &EstimatorConfig,
) -> Result<BoundReport> {
    BoundInputs::new(scene, x_true, truth, assumed, config)?.report(&scene.noise_variances)
}
