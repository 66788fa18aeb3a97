//! Analytic spatial derivatives of the channel gains and finite-difference
//! oracles to check them against.
//!
//! Derivatives are built from small second-order jets (value, gradient,
//! Hessian) combined with the product and power rules. The building blocks
//! for one quadrature node `p` with normal `n` and `d = x - p`, `t = 1/|d|`:
//!
//! * `t`: gradient `-t^3 d`, Hessian `-t^3 I + 3 t^5 d d^T`
//! * `c = d.n`: gradient `n`
//! * `s = |d x n| = |w|` with `w = d - c n`: gradient `w / s`, Hessian
//!   `(I - n n^T - w w^T / s^2) / s`
//!
//! from which `cos(beta) = c t`, `sin(beta) = s t`, the receiver-facing
//! factor `(p - x).n_R t^3` and the specular lobe follow. See
//! `docs/DERIVATIONS.md` for the full expressions.

use crate::channel::{pow, ChannelModel, OrientationSet};
use crate::error::{Error, Result};
use crate::geometry::{Mat3, Vec3};
use crate::scene::Scene;

pub type Gradient3 = Vec3;
pub type Hessian3 = Mat3;

/// Distance from a clamp boundary below which derivatives are refused.
pub const CLAMP_EPS: f64 = 1e-9;
/// Central-difference step for gradients, meters.
pub const FD_GRAD_STEP: f64 = 1e-6;
/// Central-difference step for Hessians, meters.
pub const FD_HESS_STEP: f64 = 1e-4;

/// Value, gradient and (when `H`) Hessian of a scalar function of `x`.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Jet<const H: bool> {
    v: f64,
    g: Vec3,
    h: Mat3,
}

impl<const H: bool> Jet<H> {
    const ZERO: Self = Self {
        v: 0.0,
        g: Vec3::new(0.0, 0.0, 0.0),
        h: Mat3::new(0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0),
    };

    fn linear(v: f64, g: Vec3) -> Self {
        Self {
            v,
            g,
            h: Mat3::zeros(),
        }
    }

    fn mul(&self, o: &Self) -> Self {
        Self {
            v: self.v * o.v,
            g: self.g * o.v + o.g * self.v,
            h: if H {
                self.h * o.v + o.h * self.v + self.g * o.g.transpose() + o.g * self.g.transpose()
            } else {
                Mat3::zeros()
            },
        }
    }

    fn scale(&self, s: f64) -> Self {
        Self {
            v: self.v * s,
            g: self.g * s,
            h: if H { self.h * s } else { Mat3::zeros() },
        }
    }

    fn add(&self, o: &Self) -> Self {
        Self {
            v: self.v + o.v,
            g: self.g + o.g,
            h: if H { self.h + o.h } else { Mat3::zeros() },
        }
    }

    fn axpy(&mut self, s: f64, o: &Self) {
        self.v += s * o.v;
        self.g += o.g * s;
        if H {
            self.h += o.h * s;
        }
    }

    /// `f(self)` given `f`, `f'` and `f''` at `self.v`.
    fn compose(&self, f: f64, df: f64, d2f: f64) -> Self {
        Self {
            v: f,
            g: self.g * df,
            h: if H {
                self.g * self.g.transpose() * d2f + self.h * df
            } else {
                Mat3::zeros()
            },
        }
    }

    /// `self^e` for `self.v > 0`.
    fn pow(&self, e: f64, e_int: Option<i32>) -> Self {
        let v = self.v;
        let p2 = pow(v, e - 2.0, e_int.map(|n| n - 2));
        let p1 = p2 * v;
        self.compose(p1 * v, e * p1, e * (e - 1.0) * p2)
    }
}

/// Per-LED gains with their gradients and Hessians at one position.
#[derive(Debug, Clone, PartialEq)]
pub struct Derivatives {
    pub value: Vec<f64>,
    pub grad: Vec<Gradient3>,
    pub hess: Vec<Hessian3>,
}

/// How strictly to treat clamp boundaries and collinear geometry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Boundary {
    /// Refuse positions within [`CLAMP_EPS`] of a clamp boundary.
    Strict,
    /// Use the derivative of whichever branch is active.
    OneSided,
}

impl ChannelModel {
    fn jets<const H: bool>(&self, x: &Vec3, mode: Boundary) -> Result<Vec<Jet<H>>> {
        let n_leds = self.leds.len();
        let mut out = vec![Jet::<H>::ZERO; n_leds];
        let strict = mode == Boundary::Strict;
        let flag = |factor| Error::ClampBoundary {
            position: *x,
            factor,
            eps: CLAMP_EPS,
        };

        for (j, node) in self.nodes.iter().enumerate() {
            let cps = &self.couplings[j * n_leds..(j + 1) * n_leds];
            if cps.iter().all(|c| c.amp == 0.0) {
                continue;
            }
            let d = x - node.p;
            let dist2 = d.norm_squared();
            if dist2 == 0.0 {
                return Err(Error::Coincident(*x, "an IRS quadrature node"));
            }
            let a = -d.dot(&self.n_r);
            if strict && a.abs() < CLAMP_EPS {
                return Err(flag("receiver incidence at an IRS element"));
            }
            if a <= 0.0 {
                continue;
            }
            let dist = dist2.sqrt();
            let t = 1.0 / dist;
            let t3 = t * t * t;
            let t5 = t3 * t * t;
            let t_jet = Jet::<H> {
                v: t,
                g: -d * t3,
                h: if H {
                    d * d.transpose() * (3.0 * t5) - Mat3::identity() * t3
                } else {
                    Mat3::zeros()
                },
            };
            let f1 = Jet::<H>::linear(a, -self.n_r).mul(&t_jet.pow(3.0, Some(3)));

            let n = node.normal;
            let c = d.dot(&n);
            let c_jet = Jet::<H>::linear(c, n);
            let cos_b = c_jet.mul(&t_jet);

            let w = d - n * c;
            let s = w.norm();
            let has_lobe = node.specular_scale != 0.0;
            let needs_sin = has_lobe && cps.iter().any(|cp| cp.amp != 0.0 && cp.sin_a != 0.0);
            let sin_b = if needs_sin {
                if s <= CLAMP_EPS * dist {
                    return Err(Error::Degenerate(format!(
                        "receiver at {x:?} is collinear with an IRS element normal"
                    )));
                }
                let s_jet = Jet::<H> {
                    v: s,
                    g: w / s,
                    h: if H {
                        (Mat3::identity() - n * n.transpose() - w * w.transpose() / (s * s)) / s
                    } else {
                        Mat3::zeros()
                    },
                };
                s_jet.mul(&t_jet)
            } else {
                Jet::ZERO
            };

            let diffuse = if node.diffuse_fraction != 0.0 {
                if strict && c.abs() < CLAMP_EPS {
                    return Err(flag("receiver side of an IRS element"));
                }
                if c > 0.0 {
                    cos_b.scale(2.0 * node.diffuse_fraction)
                } else {
                    Jet::ZERO
                }
            } else {
                Jet::ZERO
            };

            for (o, cp) in out.iter_mut().zip(cps) {
                if cp.amp == 0.0 {
                    continue;
                }
                let mut total = diffuse;
                if has_lobe {
                    let mut q = cos_b.scale(cp.cos_a);
                    q.axpy(cp.sin_a, &sin_b);
                    if strict && q.v.abs() < CLAMP_EPS {
                        return Err(flag("specular lobe cos(beta - alpha)"));
                    }
                    if q.v > 0.0 {
                        let lobe = q
                            .pow(node.directivity, node.directivity_int)
                            .scale(node.specular_scale);
                        total = total.add(&lobe);
                    }
                }
                o.axpy(cp.amp, &f1.mul(&total));
            }
        }

        if !self.los_blocked {
            for (o, l) in out.iter_mut().zip(&self.leds) {
                let e = x - l.position;
                let dist = e.norm();
                if dist == 0.0 {
                    return Err(Error::Coincident(*x, "an LED"));
                }
                let a = e.dot(&l.orientation);
                let b = -e.dot(&self.n_r);
                if strict && (a.abs() < CLAMP_EPS || b.abs() < CLAMP_EPS) {
                    return Err(flag("line-of-sight incidence"));
                }
                if a <= 0.0 || b <= 0.0 {
                    continue;
                }
                let t = 1.0 / dist;
                let t3 = t * t * t;
                let t_jet = Jet::<H> {
                    v: t,
                    g: -e * t3,
                    h: if H {
                        e * e.transpose() * (3.0 * t3 * t * t) - Mat3::identity() * t3
                    } else {
                        Mat3::zeros()
                    },
                };
                let u = Jet::<H>::linear(a, l.orientation).pow(l.order, l.order_int);
                let bj = Jet::<H>::linear(b, -self.n_r);
                let v = t_jet.pow(l.order + 3.0, l.order_int.map(|m| m + 3));
                o.axpy(l.scale, &u.mul(&bj).mul(&v));
            }
        }
        Ok(out)
    }

    /// Gains, gradients and Hessians for every LED.
    pub fn derivatives(&self, x: &Vec3, mode: Boundary) -> Result<Derivatives> {
        let jets = self.jets::<true>(x, mode)?;
        Ok(Derivatives {
            value: jets.iter().map(|j| j.v).collect(),
            grad: jets.iter().map(|j| j.g).collect(),
            hess: jets.iter().map(|j| j.h).collect(),
        })
    }

    /// Gains and gradients for every LED, using one-sided derivatives at
    /// clamp boundaries. This is the cheap path used by local refinement.
    pub fn gains_and_gradients(&self, x: &Vec3) -> Result<(Vec<f64>, Vec<Gradient3>)> {
        let jets = self.jets::<false>(x, Boundary::OneSided)?;
        Ok((
            jets.iter().map(|j| j.v).collect(),
            jets.iter().map(|j| j.g).collect(),
        ))
    }
}

/// Gradient of `h_i` with single-node quadrature.
pub fn grad_h(
    scene: &Scene,
    led: usize,
    x: &Vec3,
    orientations: &OrientationSet,
) -> Result<Gradient3> {
    let model = ChannelModel::new(scene, orientations, 1)?;
    Ok(model.derivatives(x, Boundary::Strict)?.grad[led])
}

/// Hessian of `h_i` with single-node quadrature.
pub fn hess_h(
    scene: &Scene,
    led: usize,
    x: &Vec3,
    orientations: &OrientationSet,
) -> Result<Hessian3> {
    let model = ChannelModel::new(scene, orientations, 1)?;
    Ok(model.derivatives(x, Boundary::Strict)?.hess[led])
}

/// Central differences `(f(x + h e_m) - f(x - h e_m)) / 2h`.
pub fn fd_gradient<F>(f: F, x: &Vec3, h: f64) -> Result<Gradient3>
where
    F: Fn(&Vec3) -> Result<f64>,
{
    let mut g = Vec3::zeros();
    for m in 0..3 {
        let mut e = Vec3::zeros();
        e[m] = h;
        g[m] = (f(&(x + e))? - f(&(x - e))?) / (2.0 * h);
    }
    Ok(g)
}

/// Central second differences: the three-point rule on the diagonal and the
/// four-point cross rule off it.
pub fn fd_hessian<F>(f: F, x: &Vec3, h: f64) -> Result<Hessian3>
where
    F: Fn(&Vec3) -> Result<f64>,
{
    let mut out = Mat3::zeros();
    let f0 = f(x)?;
    let step = |m: usize| {
        let mut e = Vec3::zeros();
        e[m] = h;
        e
    };
    for m in 0..3 {
        let em = step(m);
        out[(m, m)] = (f(&(x + em))? - 2.0 * f0 + f(&(x - em))?) / (h * h);
        for n in 0..m {
            let en = step(n);
            let v = (f(&(x + em + en))? - f(&(x + em - en))? - f(&(x - em + en))?
                + f(&(x - em - en))?)
                / (4.0 * h * h);
            out[(m, n)] = v;
            out[(n, m)] = v;
        }
    }
    Ok(out)
}

/// Worst-case agreement between analytic and finite-difference derivatives.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize)]
pub struct DerivCheck {
    /// Largest `|g - g_fd| / (1e-12 + 1e-6 |g_fd|)` over components; `<= 1`
    /// passes.
    pub grad_ratio: f64,
    pub grad_max_abs_err: f64,
    /// Largest `max|H - H_fd| / max|H_fd|` over evaluations.
    pub hess_rel_err: f64,
    /// Largest `|H - H^T|_F / |H|_F`.
    pub hess_asymmetry: f64,
    pub samples: usize,
}

impl DerivCheck {
    pub const GRAD_ABS_TOL: f64 = 1e-12;
    pub const GRAD_REL_TOL: f64 = 1e-6;
    pub const HESS_REL_TOL: f64 = 1e-4;

    pub fn passes(&self) -> bool {
        self.grad_ratio <= 1.0 && self.hess_rel_err < Self::HESS_REL_TOL
    }

    /// Compares analytic derivatives of every LED's gain at `x` against the
    /// finite-difference oracles and folds the result in.
    pub fn record(&mut self, model: &ChannelModel, x: &Vec3) -> Result<()> {
        let d = model.derivatives(x, Boundary::Strict)?;
        for i in 0..model.n_leds() {
            let f = |p: &Vec3| Ok(model.gains(p)?[i]);
            let g_fd = fd_gradient(f, x, FD_GRAD_STEP)?;
            for m in 0..3 {
                let err = (d.grad[i][m] - g_fd[m]).abs();
                let ratio = err / (Self::GRAD_ABS_TOL + Self::GRAD_REL_TOL * g_fd[m].abs());
                self.grad_ratio = self.grad_ratio.max(ratio);
                self.grad_max_abs_err = self.grad_max_abs_err.max(err);
            }
            let h_fd = fd_hessian(f, x, FD_HESS_STEP)?;
            let scale = h_fd.amax();
            if scale > 0.0 {
                self.hess_rel_err = self.hess_rel_err.max((d.hess[i] - h_fd).amax() / scale);
            }
            let hn = d.hess[i].norm();
            if hn > 0.0 {
                self.hess_asymmetry = self
                    .hess_asymmetry
                    .max((d.hess[i] - d.hess[i].transpose()).norm() / hn);
            }
        }
        self.samples += 1;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::tests::{desk_scene, tilted_walls};
    use crate::geometry::UnitVec3;
    use crate::scene::Led;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha20Rng;
    use std::f64::consts::PI;

    #[test]
    fn fd_oracles_on_simple_functions() {
        let x = Vec3::new(1.0, 2.0, 3.0);
        let konst = |_: &Vec3| Ok(4.2);
        assert_eq!(fd_gradient(konst, &x, 1e-6).unwrap(), Vec3::zeros());
        assert_eq!(fd_hessian(konst, &x, 1e-4).unwrap(), Mat3::zeros());

        let a = Vec3::new(0.5, -2.0, 1.25);
        let affine = |p: &Vec3| Ok(a.dot(p) + 1.0);
        assert!((fd_gradient(affine, &x, 0.5).unwrap() - a).amax() < 1e-15);
        assert!(fd_hessian(affine, &x, 1e-4).unwrap().amax() < 1e-6);

        let sq = |p: &Vec3| Ok(p.norm_squared());
        assert!((fd_gradient(sq, &x, 1e-6).unwrap() - 2.0 * x).amax() < 1e-9);
        assert!((fd_hessian(sq, &x, 1e-4).unwrap() - 2.0 * Mat3::identity()).amax() < 1e-6);
    }

    fn axial_scene() -> Scene {
        let mut s = desk_scene();
        s.irs.clear();
        s.leds = vec![Led {
            position: Vec3::new(0.0, 0.0, 3.0),
            orientation: UnitVec3::new_unchecked(-Vec3::z()),
            lambertian_order: 1.0,
            tx_power: 5.0,
        }];
        s.noise_variances = vec![1e-17];
        s.los_blocked = false;
        s
    }

    #[test]
    fn axial_los_closed_form() {
        // h(d) = 1e-4 / (pi d^2) with d = 3 - z.
        let s = axial_scene();
        let o = OrientationSet::assumed(&s);
        let x = Vec3::new(0.0, 0.0, 2.0);
        let g = grad_h(&s, 0, &x, &o).unwrap();
        assert!((g - Vec3::new(0.0, 0.0, 2e-4 / PI)).amax() < 1e-18);
        let h = hess_h(&s, 0, &x, &o).unwrap();
        assert!((h[(2, 2)] - 6e-4 / PI).abs() < 1e-18);
    }

    #[test]
    fn symmetric_scene_on_axis() {
        let s = desk_scene();
        let o = OrientationSet::assumed(&s);
        let model = ChannelModel::new(&s, &o, 1).unwrap();
        let d = model
            .derivatives(&Vec3::new(0.0, 0.0, 0.7), Boundary::Strict)
            .unwrap();
        let sum: Vec3 = d.grad.iter().sum();
        let scale = d.grad.iter().map(|g| g.amax()).fold(0.0, f64::max);
        assert!(sum.x.abs() < 1e-10 * scale && sum.y.abs() < 1e-10 * scale);
    }

    #[test]
    fn analytic_matches_finite_differences() {
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        for (blocked, r) in [(true, 0.0), (false, 0.3)] {
            let mut s = desk_scene().with_wall_orientations(&tilted_walls());
            s.los_blocked = blocked;
            s.irs.iter_mut().for_each(|e| e.diffuse_fraction = r);
            let model = ChannelModel::new(&s, &OrientationSet::truth(&s), 1).unwrap();
            let mut check = DerivCheck::default();
            while check.samples < 20 {
                let x = Vec3::new(
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(-1.8..1.8),
                    rng.gen_range(0.1..1.4),
                );
                match check.record(&model, &x) {
                    Ok(()) => {}
                    Err(Error::ClampBoundary { .. }) => continue,
                    Err(e) => panic!("{e}"),
                }
            }
            assert!(check.passes(), "{check:?}");
            assert!(check.hess_asymmetry < 1e-9);
        }
    }

    #[test]
    fn first_order_path_agrees() {
        let s = desk_scene().with_wall_orientations(&tilted_walls());
        let model = ChannelModel::new(&s, &OrientationSet::truth(&s), 2).unwrap();
        let x = Vec3::new(0.3, -0.6, 0.9);
        let full = model.derivatives(&x, Boundary::Strict).unwrap();
        let (v, g) = model.gains_and_gradients(&x).unwrap();
        assert_eq!(v, full.value);
        assert_eq!(g, full.grad);
        let plain = model.gains(&x).unwrap();
        for (a, b) in v.iter().zip(&plain) {
            assert!((a - b).abs() <= 1e-13 * b);
        }
    }

    #[test]
    fn clamp_boundary_is_flagged() {
        let s = desk_scene();
        let model = ChannelModel::new(&s, &OrientationSet::assumed(&s), 1).unwrap();
        // Same height as an element center row: receiver incidence is exactly zero.
        let z = s.irs[0].center.z;
        let err = model.derivatives(&Vec3::new(0.3, 0.2, z), Boundary::Strict);
        assert!(matches!(err, Err(Error::ClampBoundary { .. })));
        assert!(model
            .derivatives(&Vec3::new(0.3, 0.2, z), Boundary::OneSided)
            .is_ok());
    }
}
