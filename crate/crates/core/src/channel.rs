//! LOS and mirror-reflected channel gains.
//!
//! Two evaluation paths share the same formulas. The free functions
//! ([`los_gain`], [`reflected_gain_density`], [`element_gain`],
//! [`total_gain`], [`mean_powers`]) are straightforward and readable. The
//! [`ChannelModel`] precomputes every receiver-independent factor for one
//! orientation set and is what the estimators and bounds call in their inner
//! loops. Both accumulate in element order, so results do not depend on how
//! callers parallelize over positions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{UnitVec3, Vec3};
use crate::scene::{IrsElement, Led, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrientationTag {
    Assumed,
    True,
}

/// One normal per IRS element.
#[derive(Debug, Clone, PartialEq)]
pub struct OrientationSet {
    pub tag: OrientationTag,
    pub normals: Vec<UnitVec3>,
}

impl OrientationSet {
    pub fn assumed(scene: &Scene) -> Self {
        Self {
            tag: OrientationTag::Assumed,
            normals: scene.irs.iter().map(|e| e.assumed_orientation).collect(),
        }
    }

    pub fn truth(scene: &Scene) -> Self {
        Self {
            tag: OrientationTag::True,
            normals: scene.irs.iter().map(|e| e.true_orientation).collect(),
        }
    }

    /// Every element takes its wall's normal from `walls`.
    pub fn from_walls(scene: &Scene, tag: OrientationTag, walls: &[UnitVec3; 4]) -> Self {
        Self {
            tag,
            normals: scene.irs.iter().map(|e| walls[e.wall.index()]).collect(),
        }
    }

    pub fn check(&self, scene: &Scene) -> Result<()> {
        if self.normals.len() != scene.irs.len() {
            return Err(Error::OrientationCount {
                expected: scene.irs.len(),
                got: self.normals.len(),
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GainBreakdown {
    /// Unblocked LOS gain; excluded from `total` when the scene blocks LOS.
    pub los_gain: f64,
    pub per_element_gains: Vec<f64>,
    pub total: f64,
}

/// `b^e`, using repeated multiplication when the exponent is integral.
#[inline]
pub(crate) fn pow(b: f64, e: f64, e_int: Option<i32>) -> f64 {
    match e_int {
        Some(n) => b.powi(n),
        None => b.powf(e),
    }
}

pub(crate) fn integral_exponent(e: f64) -> Option<i32> {
    (e.fract() == 0.0 && e.abs() < 64.0).then_some(e as i32)
}

/// Direct LED-to-receiver gain, zero when either side faces away.
pub fn los_gain(scene: &Scene, led: usize, x: &Vec3) -> Result<f64> {
    let l = &scene.leds[led];
    let e = x - l.position;
    let dist = e.norm();
    if dist == 0.0 {
        return Err(Error::Coincident(*x, "an LED"));
    }
    let m = l.lambertian_order;
    let a = e.dot(&l.orientation).max(0.0);
    let b = (-e).dot(&scene.receiver.orientation).max(0.0);
    Ok((m + 1.0) * scene.receiver.pd_area * a.powf(m) * b / (2.0 * PI * dist.powf(m + 3.0)))
}

/// `cos(beta - alpha)` at the element center for the given element normal:
/// `alpha` is the angle of the LED as seen from the element, `beta` the
/// angle of the receiver. Returned unclamped.
pub fn cos_beta_minus_alpha(
    element: &IrsElement,
    normal: &UnitVec3,
    led: &Led,
    x: &Vec3,
) -> Result<f64> {
    let p = element.center;
    let d = x - p;
    let dl = led.position - p;
    let (dist, dist_l) = (d.norm(), dl.norm());
    if dist == 0.0 || dist_l == 0.0 {
        return Err(Error::Degenerate(
            "receiver or LED coincides with an IRS element center".into(),
        ));
    }
    let cos_a = dl.dot(normal) / dist_l;
    let sin_a = dl.cross(normal).norm() / dist_l;
    let cos_b = d.dot(normal) / dist;
    let sin_b = d.cross(normal).norm() / dist;
    Ok((cos_a * cos_b + sin_a * sin_b).clamp(-1.0, 1.0))
}

/// The reflected-gain integrand per unit area at surface point `p` of
/// element `k`, for LED `led`, receiver position `x` and element normal
/// `normal`.
pub fn reflected_gain_density(
    scene: &Scene,
    k: usize,
    led: usize,
    x: &Vec3,
    normal: &UnitVec3,
    p: &Vec3,
) -> Result<f64> {
    let el = &scene.irs[k];
    let l = &scene.leds[led];
    let n_r = &scene.receiver.orientation;
    let m = l.lambertian_order;

    let dl = l.position - p;
    let d = x - p;
    let (dist_l, dist) = (dl.norm(), d.norm());
    if dist_l == 0.0 {
        return Err(Error::Degenerate(
            "LED coincides with an IRS surface point".into(),
        ));
    }
    if dist == 0.0 {
        return Err(Error::Coincident(*x, "an IRS surface point"));
    }

    let emit = (-dl).dot(&l.orientation).max(0.0).powf(m);
    let incid = dl.dot(normal).max(0.0);
    let toward_rx = (-d).dot(n_r).max(0.0);
    let leading = (m + 1.0) * emit * incid / (4.0 * PI * PI * dist_l.powf(m + 3.0) * dist.powi(3));

    let cos_a = dl.dot(normal) / dist_l;
    let sin_a = dl.cross(normal).norm() / dist_l;
    let cos_b = d.dot(normal) / dist;
    let sin_b = d.cross(normal).norm() / dist;
    let q = (cos_a * cos_b + sin_a * sin_b).max(0.0);

    let r = el.diffuse_fraction;
    let mu = el.directivity;
    let diffuse = 2.0 * r * d.dot(normal).max(0.0) / dist;
    let specular = (1.0 - r) * (mu + 1.0) * q.powf(mu);

    Ok(leading * scene.receiver.pd_area * el.reflectance * toward_rx * (diffuse + specular))
}

/// Offsets of the `q x q` midpoint nodes within an element footprint, as
/// fractions of width and height in `(-1/2, 1/2)`.
pub(crate) fn midpoint_offsets(q: usize) -> impl Iterator<Item = (f64, f64)> {
    let qf = q as f64;
    (0..q).flat_map(move |b| {
        (0..q).map(move |a| ((a as f64 + 0.5) / qf - 0.5, (b as f64 + 0.5) / qf - 0.5))
    })
}

/// Element gain by `q x q` midpoint quadrature over the element footprint.
pub fn element_gain(
    scene: &Scene,
    k: usize,
    led: usize,
    x: &Vec3,
    normal: &UnitVec3,
    q: usize,
) -> Result<f64> {
    if q == 0 {
        return Err(Error::Config("quadrature order must be >= 1".into()));
    }
    let el = &scene.irs[k];
    let cell = el.area() / (q * q) as f64;
    let mut sum = 0.0;
    for (fu, fv) in midpoint_offsets(q) {
        let p = el.center
            + el.tangent_u.into_inner() * (fu * el.width)
            + el.tangent_v.into_inner() * (fv * el.height);
        sum += reflected_gain_density(scene, k, led, x, normal, &p)?;
    }
    Ok(sum * cell)
}

pub fn total_gain(
    scene: &Scene,
    led: usize,
    x: &Vec3,
    orientations: &OrientationSet,
    q: usize,
) -> Result<GainBreakdown> {
    orientations.check(scene)?;
    let los = los_gain(scene, led, x)?;
    let per_element_gains = (0..scene.irs.len())
        .map(|k| element_gain(scene, k, led, x, &orientations.normals[k], q))
        .collect::<Result<Vec<_>>>()?;
    let reflected: f64 = per_element_gains.iter().sum();
    let total = if scene.los_blocked {
        reflected
    } else {
        los + reflected
    };
    Ok(GainBreakdown {
        los_gain: los,
        per_element_gains,
        total,
    })
}

/// `P_TX,i * h_i(x)` for every LED.
pub fn mean_powers(
    scene: &Scene,
    x: &Vec3,
    orientations: &OrientationSet,
    q: usize,
) -> Result<Vec<f64>> {
    (0..scene.leds.len())
        .map(|i| Ok(scene.leds[i].tx_power * total_gain(scene, i, x, orientations, q)?.total))
        .collect()
}

/// Receiver-independent data for one quadrature node.
#[derive(Debug, Clone)]
pub(crate) struct Node {
    pub p: Vec3,
    pub normal: Vec3,
    pub diffuse_fraction: f64,
    pub directivity: f64,
    pub directivity_int: Option<i32>,
    /// `(1 - r)(mu + 1)`.
    pub specular_scale: f64,
}

/// LED-to-node factors: everything in the density that does not involve `x`.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Coupling {
    /// Leading factor times `A_R * rho * dS`; zero when the LED does not
    /// illuminate the node.
    pub amp: f64,
    pub cos_a: f64,
    pub sin_a: f64,
}

#[derive(Debug, Clone)]
pub(crate) struct LosLed {
    pub position: Vec3,
    pub orientation: Vec3,
    pub order: f64,
    pub order_int: Option<i32>,
    /// `(m + 1) A_R / (2 pi)`.
    pub scale: f64,
}

/// A scene compiled against one orientation set and quadrature order.
#[derive(Debug, Clone)]
pub struct ChannelModel {
    pub(crate) nodes: Vec<Node>,
    /// Indexed `node * n_leds + led`.
    pub(crate) couplings: Vec<Coupling>,
    pub(crate) leds: Vec<LosLed>,
    pub(crate) tx_power: Vec<f64>,
    pub(crate) n_r: Vec3,
    pub(crate) los_blocked: bool,
    tag: OrientationTag,
    quadrature: usize,
}

impl ChannelModel {
    pub fn new(scene: &Scene, orientations: &OrientationSet, quadrature: usize) -> Result<Self> {
        orientations.check(scene)?;
        if quadrature == 0 {
            return Err(Error::Config("quadrature order must be >= 1".into()));
        }
        let n_leds = scene.leds.len();
        let mut nodes = Vec::with_capacity(scene.irs.len() * quadrature * quadrature);
        let mut couplings = Vec::with_capacity(nodes.capacity() * n_leds);
        let cell_frac = 1.0 / (quadrature * quadrature) as f64;

        for (el, normal) in scene.irs.iter().zip(&orientations.normals) {
            let n = normal.into_inner();
            let ds = el.area() * cell_frac;
            let r = el.diffuse_fraction;
            let mu = el.directivity;
            for (fu, fv) in midpoint_offsets(quadrature) {
                let p = el.center
                    + el.tangent_u.into_inner() * (fu * el.width)
                    + el.tangent_v.into_inner() * (fv * el.height);
                for l in &scene.leds {
                    let dl = l.position - p;
                    let dist_l = dl.norm();
                    if dist_l == 0.0 {
                        return Err(Error::Degenerate(
                            "LED coincides with an IRS surface point".into(),
                        ));
                    }
                    let m = l.lambertian_order;
                    let emit = (-dl).dot(&l.orientation).max(0.0).powf(m);
                    let incid = dl.dot(&n).max(0.0);
                    let amp = (m + 1.0) * emit * incid / (4.0 * PI * PI * dist_l.powf(m + 3.0))
                        * scene.receiver.pd_area
                        * el.reflectance
                        * ds;
                    couplings.push(Coupling {
                        amp,
                        cos_a: dl.dot(&n) / dist_l,
                        sin_a: dl.cross(&n).norm() / dist_l,
                    });
                }
                nodes.push(Node {
                    p,
                    normal: n,
                    diffuse_fraction: r,
                    directivity: mu,
                    directivity_int: integral_exponent(mu),
                    specular_scale: (1.0 - r) * (mu + 1.0),
                });
            }
        }

        let leds = scene
            .leds
            .iter()
            .map(|l| LosLed {
                position: l.position,
                orientation: l.orientation.into_inner(),
                order: l.lambertian_order,
                order_int: integral_exponent(l.lambertian_order),
                scale: (l.lambertian_order + 1.0) * scene.receiver.pd_area / (2.0 * PI),
            })
            .collect();

        Ok(Self {
            nodes,
            couplings,
            leds,
            tx_power: scene.leds.iter().map(|l| l.tx_power).collect(),
            n_r: scene.receiver.orientation.into_inner(),
            los_blocked: scene.los_blocked,
            tag: orientations.tag,
            quadrature,
        })
    }

    pub fn n_leds(&self) -> usize {
        self.leds.len()
    }

    pub fn tag(&self) -> OrientationTag {
        self.tag
    }

    pub fn quadrature(&self) -> usize {
        self.quadrature
    }

    pub fn tx_powers(&self) -> &[f64] {
        &self.tx_power
    }

    /// Highest quadrature node, above which no element is visible to an
    /// upward-facing receiver.
    pub fn top_node_height(&self) -> f64 {
        self.nodes
            .iter()
            .map(|n| n.p.z)
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// Total gain `h_i(x)` for every LED, written into `out`.
    pub fn gains_into(&self, x: &Vec3, out: &mut [f64]) -> Result<()> {
        let n_leds = self.leds.len();
        debug_assert_eq!(out.len(), n_leds);
        out.iter_mut().for_each(|o| *o = 0.0);

        for (j, node) in self.nodes.iter().enumerate() {
            let d = x - node.p;
            let dist2 = d.norm_squared();
            if dist2 == 0.0 {
                return Err(Error::Coincident(*x, "an IRS quadrature node"));
            }
            let a = -d.dot(&self.n_r);
            if a <= 0.0 {
                continue;
            }
            let dist = dist2.sqrt();
            let inv = 1.0 / dist;
            let f1 = a * inv * inv * inv;
            let c = d.dot(&node.normal);
            let cos_b = c * inv;
            let sin_b = d.cross(&node.normal).norm() * inv;
            let diffuse = 2.0 * node.diffuse_fraction * c.max(0.0) * inv;
            let cps = &self.couplings[j * n_leds..(j + 1) * n_leds];
            for (o, cp) in out.iter_mut().zip(cps) {
                if cp.amp == 0.0 {
                    continue;
                }
                let q = (cp.cos_a * cos_b + cp.sin_a * sin_b).max(0.0);
                let spec = node.specular_scale * pow(q, node.directivity, node.directivity_int);
                *o += cp.amp * f1 * (diffuse + spec);
            }
        }

        if !self.los_blocked {
            for (o, l) in out.iter_mut().zip(&self.leds) {
                *o += self.los(l, x)?;
            }
        }
        Ok(())
    }

    fn los(&self, l: &LosLed, x: &Vec3) -> Result<f64> {
        let e = x - l.position;
        let dist = e.norm();
        if dist == 0.0 {
            return Err(Error::Coincident(*x, "an LED"));
        }
        let a = e.dot(&l.orientation).max(0.0);
        let b = (-e).dot(&self.n_r).max(0.0);
        Ok(l.scale * pow(a, l.order, l.order_int) * b
            / pow(dist, l.order + 3.0, l.order_int.map(|m| m + 3)))
    }

    pub fn gains(&self, x: &Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.leds.len()];
        self.gains_into(x, &mut out)?;
        Ok(out)
    }

    pub fn mean_powers_into(&self, x: &Vec3, out: &mut [f64]) -> Result<()> {
        self.gains_into(x, out)?;
        for (o, p) in out.iter_mut().zip(&self.tx_power) {
            *o *= p;
        }
        Ok(())
    }

    pub fn mean_powers(&self, x: &Vec3) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.leds.len()];
        self.mean_powers_into(x, &mut out)?;
        Ok(out)
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geometry::{spherical_to_unit, AxisBox, SphericalAngles};
    use crate::scene::{build_irs_array, default_leds, IrsLayout, Receiver, Wall};
    use proptest::prelude::*;

    pub(crate) fn desk_scene() -> Scene {
        let room = AxisBox::room(4.0, 4.0, 3.0);
        let layout = IrsLayout {
            per_wall_count: 49,
            ..IrsLayout::default()
        };
        Scene {
            room,
            leds: default_leds(5.0, 1.0),
            irs: build_irs_array(&layout, &room).unwrap(),
            receiver: Receiver {
                orientation: UnitVec3::new_unchecked(Vec3::z()),
                pd_area: 1e-4,
            },
            noise_variances: vec![1e-17; 4],
            search_region: room,
            los_blocked: true,
        }
    }

    fn single_led_scene(irs: Vec<IrsElement>) -> Scene {
        let mut s = desk_scene();
        s.leds = vec![Led {
            position: Vec3::new(0.0, 0.0, 3.0),
            orientation: UnitVec3::new_unchecked(-Vec3::z()),
            lambertian_order: 1.0,
            tx_power: 5.0,
        }];
        s.noise_variances = vec![1e-17];
        s.irs = irs;
        s.los_blocked = false;
        s
    }

    pub(crate) fn tilted_walls() -> [UnitVec3; 4] {
        let offs = [(0.3, -0.2), (-0.25, 0.4), (0.1, 0.35), (-0.4, -0.15)];
        let mut out = [UnitVec3::new_unchecked(Vec3::z()); 4];
        for (i, w) in Wall::ALL.iter().enumerate() {
            let a = w.assumed_angles();
            out[i] =
                spherical_to_unit(SphericalAngles::new(a.theta + offs[i].0, a.phi + offs[i].1));
        }
        out
    }

    #[test]
    fn axial_los() {
        let s = single_led_scene(vec![]);
        let h = los_gain(&s, 0, &Vec3::new(0.0, 0.0, 2.0)).unwrap();
        assert!((h - 1e-4 / PI).abs() < 1e-18);
        let h = los_gain(&s, 0, &Vec3::new(1.0, 0.0, 2.0)).unwrap();
        assert!((h - 1e-4 / (4.0 * PI)).abs() < 1e-18);
        assert_eq!(los_gain(&s, 0, &Vec3::new(1.0, 0.0, 3.0)).unwrap(), 0.0);
        assert!(matches!(
            los_gain(&s, 0, &Vec3::new(0.0, 0.0, 3.0)),
            Err(Error::Coincident(..))
        ));
    }

    #[test]
    fn cos_beta_minus_alpha_special_cases() {
        let s = desk_scene();
        let el = &s.irs[0];
        let n = el.true_orientation;
        // LED and receiver both on the element normal.
        let led = Led {
            position: el.center + n.into_inner() * 2.0,
            ..s.leds[0].clone()
        };
        let v = cos_beta_minus_alpha(el, &n, &led, &(el.center + n.into_inner())).unwrap();
        assert!((v - 1.0).abs() < 1e-15);
        // Mirror-image position: equal angles on opposite sides of the normal.
        let led = &s.leds[0];
        let dl = led.position - el.center;
        let tangential = dl - n.into_inner() * dl.dot(&n);
        let mirror = el.center + (dl - 2.0 * tangential) * 0.5;
        let v = cos_beta_minus_alpha(el, &n, led, &mirror).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
    }

    fn angle_between(a: &Vec3, b: &Vec3) -> f64 {
        (a.dot(b) / (a.norm() * b.norm())).clamp(-1.0, 1.0).acos()
    }

    proptest! {
        #[test]
        fn cos_beta_minus_alpha_matches_angles(
            x in -1.9f64..1.9, y in -1.9f64..1.9, z in 0.0f64..3.0, k in 0usize..196,
        ) {
            let s = desk_scene();
            let walls = tilted_walls();
            let el = &s.irs[k];
            let n = walls[el.wall.index()];
            let xv = Vec3::new(x, y, z);
            for led in &s.leds {
                let alpha = angle_between(&(led.position - el.center), &n);
                let beta = angle_between(&(xv - el.center), &n);
                let v = cos_beta_minus_alpha(el, &n, led, &xv).unwrap();
                prop_assert!((v - (beta - alpha).cos()).abs() < 1e-12);
            }
        }

        #[test]
        fn gains_are_nonnegative(x in -2.0f64..2.0, y in -2.0f64..2.0, z in 0.0f64..3.0) {
            let mut s = desk_scene();
            s.los_blocked = false;
            let s = s.with_wall_orientations(&tilted_walls());
            let xv = Vec3::new(x, y, z);
            for o in [OrientationSet::assumed(&s), OrientationSet::truth(&s)] {
                if let Ok(h) = ChannelModel::new(&s, &o, 1).unwrap().gains(&xv) {
                    prop_assert!(h.iter().all(|v| *v >= 0.0));
                }
            }
        }
    }

    /// Step-by-step scalar evaluation with explicit angles.
    fn oracle_density(s: &Scene, el: &IrsElement, led: &Led, x: &Vec3) -> f64 {
        let p = el.center;
        let n = el.true_orientation.into_inner();
        let m = led.lambertian_order;
        let to_el = p - led.position;
        let r_l = to_el.norm();
        let cos_emit = to_el.dot(&led.orientation) / r_l;
        let cos_inc = (-to_el).dot(&n) / r_l;
        let to_rx = x - p;
        let r_x = to_rx.norm();
        let cos_rx = (-to_rx).dot(&s.receiver.orientation) / r_x;
        let alpha = angle_between(&(-to_el), &n);
        let beta = angle_between(&to_rx, &n);
        let lobe = (1.0 - el.diffuse_fraction)
            * (el.directivity + 1.0)
            * (beta - alpha).cos().max(0.0).powf(el.directivity);
        let diffuse = 2.0 * el.diffuse_fraction * to_rx.dot(&n).max(0.0) / r_x;
        let radiance = (m + 1.0) * (r_l * cos_emit).powf(m) * (r_l * cos_inc)
            / (4.0 * PI * PI * r_l.powf(m + 3.0));
        radiance * s.receiver.pd_area * el.reflectance * (r_x * cos_rx) / r_x.powi(3)
            * (diffuse + lobe)
    }

    #[test]
    fn density_matches_scalar_oracle() {
        let s = desk_scene();
        let x = Vec3::new(0.5, 0.5, 0.85);
        for k in [0, 24, 60, 130, 195] {
            let el = &s.irs[k];
            let d = reflected_gain_density(&s, k, 0, &x, &el.true_orientation, &el.center).unwrap();
            let o = oracle_density(&s, el, &s.leds[0], &x);
            assert!(d > 0.0);
            assert!(((d - o) / o).abs() < 1e-12, "element {k}: {d} vs {o}");
        }
    }

    #[test]
    fn density_zero_cases() {
        let mut s = desk_scene();
        let el = s.irs[10].clone();
        let x = Vec3::new(0.5, 0.5, 0.85);
        s.irs[10].reflectance = 0.0;
        let d = reflected_gain_density(&s, 10, 0, &x, &el.true_orientation, &el.center).unwrap();
        assert_eq!(d, 0.0);
        // Receiver above the element looks away from it.
        let high = Vec3::new(0.5, 0.5, 2.5);
        let d = reflected_gain_density(&s, 11, 0, &high, &el.true_orientation, &s.irs[11].center)
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn quadrature_convergence() {
        let s = desk_scene();
        let x = Vec3::new(0.5, 0.5, 0.85);
        let n = &s.irs[24].true_orientation;
        let g = |q| element_gain(&s, 24, 0, &x, n, q).unwrap();
        let c = reflected_gain_density(&s, 24, 0, &x, n, &s.irs[24].center).unwrap();
        assert!((g(1) - c * 8e-4).abs() <= 1e-15 * g(1).abs());
        assert!(((g(1) - g(4)) / g(4)).abs() < 5e-3);
        assert!(((g(8) - g(16)) / g(16)).abs() < 1e-4);
    }

    #[test]
    fn breakdown_and_additivity() {
        let s = desk_scene();
        let o = OrientationSet::assumed(&s);
        let x = Vec3::new(0.5, 0.5, 0.85);
        let b = total_gain(&s, 1, &x, &o, 1).unwrap();
        let sum: f64 = b.per_element_gains.iter().sum();
        assert_eq!(b.total, sum);

        let mut open = s.clone();
        open.los_blocked = false;
        let bo = total_gain(&open, 1, &x, &o, 1).unwrap();
        assert!((bo.total - (bo.los_gain + sum)).abs() < 1e-20);

        let split = |range: std::ops::Range<usize>| {
            let mut part = open.clone();
            part.irs = open.irs[range.clone()].to_vec();
            let po = OrientationSet {
                tag: o.tag,
                normals: o.normals[range].to_vec(),
            };
            total_gain(&part, 1, &x, &po, 1).unwrap().total
        };
        let lhs = bo.total;
        let rhs = split(0..90) + split(90..196) - bo.los_gain;
        assert!(((lhs - rhs) / lhs).abs() < 1e-13);

        let none = single_led_scene(vec![]);
        let bn = total_gain(&none, 0, &x, &OrientationSet::assumed(&none), 1).unwrap();
        assert_eq!(bn.total, bn.los_gain);
    }

    #[test]
    fn compiled_model_matches_reference() {
        for blocked in [true, false] {
            let mut s = desk_scene().with_wall_orientations(&tilted_walls());
            s.los_blocked = blocked;
            for r in [0.0, 0.4] {
                for e in &mut s.irs {
                    e.diffuse_fraction = r;
                }
                for o in [OrientationSet::assumed(&s), OrientationSet::truth(&s)] {
                    for q in [1, 3] {
                        let model = ChannelModel::new(&s, &o, q).unwrap();
                        for x in [
                            Vec3::new(0.5, 0.5, 0.85),
                            Vec3::new(-1.3, 0.2, 0.4),
                            Vec3::new(1.7, -1.8, 1.45),
                        ] {
                            let fast = model.mean_powers(&x).unwrap();
                            let slow = mean_powers(&s, &x, &o, q).unwrap();
                            for (a, b) in fast.iter().zip(&slow) {
                                assert!((a - b).abs() <= 1e-12 * b.abs().max(1e-30));
                            }
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn desk_mean_powers_golden() {
        let s = desk_scene();
        let p = mean_powers(
            &s,
            &Vec3::new(0.5, 0.5, 0.85),
            &OrientationSet::assumed(&s),
            1,
        )
        .unwrap();
        assert_eq!(p.len(), 4);
        assert!(p.iter().all(|v| *v > 0.0 && *v < 5.0));
    }

    #[test]
    fn scaling_and_invariance_properties() {
        let s = desk_scene().with_wall_orientations(&tilted_walls());
        let x = Vec3::new(-0.4, 0.9, 1.1);
        let base = mean_powers(&s, &x, &OrientationSet::truth(&s), 1).unwrap();

        let mut dbl = s.clone();
        for l in &mut dbl.leds {
            l.tx_power *= 2.0;
        }
        let p2 = mean_powers(&dbl, &x, &OrientationSet::truth(&dbl), 1).unwrap();
        for (a, b) in base.iter().zip(&p2) {
            assert!((2.0 * a - b).abs() <= 1e-15 * b);
        }

        let mut zero = s.clone();
        for l in &mut zero.leds {
            l.tx_power = 0.0;
        }
        assert!(mean_powers(&zero, &x, &OrientationSet::truth(&zero), 1)
            .unwrap()
            .iter()
            .all(|v| *v == 0.0));

        let mut area = s.clone();
        area.receiver.pd_area *= 3.0;
        for e in &mut area.irs {
            e.reflectance *= 0.5;
        }
        let pa = mean_powers(&area, &x, &OrientationSet::truth(&area), 1).unwrap();
        for (a, b) in base.iter().zip(&pa) {
            assert!((1.5 * a - b).abs() <= 1e-14 * b);
        }

        // Swapping the tag with identical vectors changes nothing.
        let mut t = OrientationSet::truth(&s);
        t.tag = OrientationTag::Assumed;
        assert_eq!(mean_powers(&s, &x, &t, 1).unwrap(), base);

        // Pure diffuse reflection ignores the directivity.
        let mut diff = s.clone();
        diff.irs.iter_mut().for_each(|e| e.diffuse_fraction = 1.0);
        let d1 = mean_powers(&diff, &x, &OrientationSet::truth(&diff), 1).unwrap();
        diff.irs.iter_mut().for_each(|e| e.directivity = 17.5);
        let d2 = mean_powers(&diff, &x, &OrientationSet::truth(&diff), 1).unwrap();
        assert_eq!(d1, d2);

        // Unperturbed walls give the same gains under both sets.
        let flat = desk_scene();
        assert_eq!(
            mean_powers(&flat, &x, &OrientationSet::assumed(&flat), 1).unwrap(),
            mean_powers(&flat, &x, &OrientationSet::truth(&flat), 1).unwrap()
        );
    }

    #[test]
    fn orientation_count_is_checked() {
        let s = desk_scene();
        let mut o = OrientationSet::assumed(&s);
        o.normals.pop();
        assert!(matches!(
            ChannelModel::new(&s, &o, 1),
            Err(Error::OrientationCount {
                expected: 196,
                got: 195
            })
        ));
    }
}
