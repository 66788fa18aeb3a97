//! The geometric world: LEDs, receiver, walls and the wall-mounted mirror
//! arrays, each mirror carrying an (assumed, true) orientation pair.

use std::fmt;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    is_finite, is_unit, spherical_to_unit, unit_to_spherical, AxisBox, SphericalAngles, UnitVec3,
    Vec3,
};

/// Tolerance for "lies on its wall plane".
const ON_WALL_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Led {
    pub position: Vec3,
    pub orientation: UnitVec3,
    pub lambertian_order: f64,
    /// Transmit power, watts.
    pub tx_power: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Receiver {
    pub orientation: UnitVec3,
    /// Photodetector area, m².
    pub pd_area: f64,
}

/// The four side walls, numbered 1..=4 in the order south (`y = min`),
/// north (`y = max`), west (`x = min`), east (`x = max`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Wall {
    South,
    North,
    West,
    East,
}

impl Wall {
    pub const ALL: [Wall; 4] = [Wall::South, Wall::North, Wall::West, Wall::East];

    pub fn id(self) -> usize {
        self.index() + 1
    }

    pub fn index(self) -> usize {
        match self {
            Wall::South => 0,
            Wall::North => 1,
            Wall::West => 2,
            Wall::East => 3,
        }
    }

    pub fn inward_normal(self) -> UnitVec3 {
        let v = match self {
            Wall::South => Vec3::y(),
            Wall::North => -Vec3::y(),
            Wall::West => Vec3::x(),
            Wall::East => -Vec3::x(),
        };
        UnitVec3::new_unchecked(v)
    }

    /// Horizontal in-plane direction; the vertical one is always `+z`.
    pub fn horizontal_tangent(self) -> UnitVec3 {
        match self {
            Wall::South | Wall::North => UnitVec3::new_unchecked(Vec3::x()),
            Wall::West | Wall::East => UnitVec3::new_unchecked(Vec3::y()),
        }
    }

    pub fn center(self, room: &AxisBox) -> Vec3 {
        let c = room.center();
        match self {
            Wall::South => Vec3::new(c.x, room.min.y, c.z),
            Wall::North => Vec3::new(c.x, room.max.y, c.z),
            Wall::West => Vec3::new(room.min.x, c.y, c.z),
            Wall::East => Vec3::new(room.max.x, c.y, c.z),
        }
    }

    pub fn width(self, room: &AxisBox) -> f64 {
        let e = room.extent();
        match self {
            Wall::South | Wall::North => e.x,
            Wall::West | Wall::East => e.y,
        }
    }

    /// Signed distance of `p` from the wall plane, positive inside the room.
    pub fn plane_offset(self, room: &AxisBox, p: &Vec3) -> f64 {
        self.inward_normal().dot(&(p - self.center(room)))
    }

    /// Assumed (commanded) orientation as spherical angles, derived from the
    /// inward normal.
    pub fn assumed_angles(self) -> SphericalAngles {
        unit_to_spherical(&self.inward_normal())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phong {
    /// Reflectance in `[0, 1]`.
    pub reflectance: f64,
    /// Diffuse fraction in `[0, 1]`.
    pub diffuse_fraction: f64,
    /// Directivity of the specular lobe, `>= 0`.
    pub directivity: f64,
}

impl Default for Phong {
    fn default() -> Self {
        Self {
            reflectance: 0.95,
            diffuse_fraction: 0.0,
            directivity: 5.0,
        }
    }
}

/// Per-wall rectangular element grid, centered on each wall.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrsLayout {
    pub per_wall_count: usize,
    pub element_width: f64,
    pub element_height: f64,
    pub h_gap: f64,
    pub v_gap: f64,
    #[serde(flatten)]
    pub phong: Phong,
}

impl Default for IrsLayout {
    fn default() -> Self {
        Self {
            per_wall_count: 441,
            element_width: 0.04,
            element_height: 0.02,
            h_gap: 0.02,
            v_gap: 0.01,
            phong: Phong::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IrsElement {
    pub center: Vec3,
    pub assumed_orientation: UnitVec3,
    pub true_orientation: UnitVec3,
    /// Horizontal footprint extent, m.
    pub width: f64,
    /// Vertical footprint extent, m.
    pub height: f64,
    pub reflectance: f64,
    pub diffuse_fraction: f64,
    pub directivity: f64,
    pub wall: Wall,
    /// In-plane basis used by the surface quadrature.
    pub tangent_u: UnitVec3,
    pub tangent_v: UnitVec3,
}

impl IrsElement {
    pub fn area(&self) -> f64 {
        self.width * self.height
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub room: AxisBox,
    pub leds: Vec<Led>,
    pub irs: Vec<IrsElement>,
    pub receiver: Receiver,
    /// One variance per LED, W².
    pub noise_variances: Vec<f64>,
    pub search_region: AxisBox,
    pub los_blocked: bool,
}

impl Scene {
    pub fn n_leds(&self) -> usize {
        self.leds.len()
    }

    /// Copy of the scene with every noise variance set to `sigma2`.
    pub fn with_noise_variance(&self, sigma2: f64) -> Scene {
        let mut s = self.clone();
        s.noise_variances = vec![sigma2; s.leds.len()];
        s
    }

    /// Copy of the scene whose elements take the given per-wall true
    /// orientations (indexed by [`Wall::index`]).
    pub fn with_wall_orientations(&self, walls: &[UnitVec3; 4]) -> Scene {
        let mut s = self.clone();
        for e in &mut s.irs {
            e.true_orientation = walls[e.wall.index()];
        }
        s
    }

    /// The per-wall assumed orientations, indexed by [`Wall::index`].
    pub fn assumed_wall_normals(&self) -> [UnitVec3; 4] {
        let mut out = Wall::ALL.map(Wall::inward_normal);
        for e in &self.irs {
            out[e.wall.index()] = e.assumed_orientation;
        }
        out
    }
}

/// Lays out `per_wall_count` elements on each of the four walls as a square
/// grid centered on the wall. Elements are ordered wall by wall, then by row
/// (bottom to top), then by column along the wall's horizontal tangent. Both
/// orientations start out as the inward wall normal.
pub fn build_irs_array(layout: &IrsLayout, room: &AxisBox) -> Result<Vec<IrsElement>> {
    let n = (layout.per_wall_count as f64).sqrt().round() as usize;
    if n * n != layout.per_wall_count {
        return Err(Error::NotPerfectSquare(layout.per_wall_count));
    }
    if n == 0 {
        return Ok(Vec::new());
    }
    let (w, h) = (layout.element_width, layout.element_height);
    let span_h = n as f64 * w + (n - 1) as f64 * layout.h_gap;
    let span_v = n as f64 * h + (n - 1) as f64 * layout.v_gap;
    let wall_h = room.extent().z;

    let mut out = Vec::with_capacity(4 * layout.per_wall_count);
    for wall in Wall::ALL {
        let wall_w = wall.width(room);
        if span_h > wall_w || span_v > wall_h {
            return Err(Error::GridOverflow {
                rows: n,
                cols: n,
                span_h,
                span_v,
                wall_w,
                wall_h,
            });
        }
        let center = wall.center(room);
        let tu = wall.horizontal_tangent();
        let tv = UnitVec3::new_unchecked(Vec3::z());
        let normal = wall.inward_normal();
        for row in 0..n {
            let v = -span_v / 2.0 + h / 2.0 + row as f64 * (h + layout.v_gap);
            for col in 0..n {
                let u = -span_h / 2.0 + w / 2.0 + col as f64 * (w + layout.h_gap);
                out.push(IrsElement {
                    center: center + tu.into_inner() * u + tv.into_inner() * v,
                    assumed_orientation: normal,
                    true_orientation: normal,
                    width: w,
                    height: h,
                    reflectance: layout.phong.reflectance,
                    diffuse_fraction: layout.phong.diffuse_fraction,
                    directivity: layout.phong.directivity,
                    wall,
                    tangent_u: tu,
                    tangent_v: tv,
                });
            }
        }
    }
    Ok(out)
}

/// Draws one true orientation per wall: `theta + U(-k, k)`, `phi + U(-k, k)`
/// around the spherical angles of each assumed direction, consuming eight
/// uniforms in wall order (theta offset first). With `k = 0` the assumed
/// vectors are returned bit for bit.
pub fn perturb_wall_orientations<R: Rng + ?Sized>(
    assumed: &[UnitVec3; 4],
    k: f64,
    rng: &mut R,
) -> [UnitVec3; 4] {
    let offsets = draw_wall_offsets(k, rng);
    apply_wall_offsets(assumed, &offsets)
}

/// Tilts each assumed direction by its `(theta, phi)` offset.
pub fn apply_wall_offsets(assumed: &[UnitVec3; 4], offsets: &[(f64, f64); 4]) -> [UnitVec3; 4] {
    let mut out = *assumed;
    for (o, (dt, dp)) in out.iter_mut().zip(offsets) {
        if *dt == 0.0 && *dp == 0.0 {
            continue;
        }
        let a = unit_to_spherical(o);
        *o = spherical_to_unit(SphericalAngles::new(a.theta + dt, a.phi + dp));
    }
    out
}

/// The raw `(theta, phi)` offsets, each `k * (2u - 1)` with `u` uniform on
/// `[0, 1)`.
pub fn draw_wall_offsets<R: Rng + ?Sized>(k: f64, rng: &mut R) -> [(f64, f64); 4] {
    let mut out = [(0.0, 0.0); 4];
    for o in &mut out {
        let ut: f64 = rng.gen();
        let up: f64 = rng.gen();
        *o = (k * (2.0 * ut - 1.0), k * (2.0 * up - 1.0));
    }
    out
}

/// One failed check from [`scene_validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn into_result(self) -> Result<()> {
        if self.is_valid() {
            Ok(())
        } else {
            Err(Error::InvalidScene(self.violations))
        }
    }

    fn push(&mut self, field: impl Into<String>, message: impl Into<String>) {
        self.violations.push(Violation {
            field: field.into(),
            message: message.into(),
        });
    }
}

/// Checks every type invariant plus the layout consistency of the scene.
/// `receiver_position`, when given, must lie inside the search region.
/// All violations are collected; an empty report means the scene is valid.
pub fn scene_validate(scene: &Scene, receiver_position: Option<&Vec3>) -> ValidationReport {
    let mut r = ValidationReport::default();

    if scene.room.is_degenerate() {
        r.push("room", "room box has zero or negative volume");
    }
    if scene.leds.is_empty() {
        r.push("leds", "at least one LED is required");
    }
    for (i, led) in scene.leds.iter().enumerate() {
        let f = format!("leds[{i}]");
        if !is_finite(&led.position) {
            r.push(&f, "position is not finite");
        }
        if !is_unit(led.orientation.as_ref()) {
            r.push(&f, "orientation is not a unit vector");
        }
        if !(led.tx_power > 0.0 && led.tx_power.is_finite()) {
            r.push(&f, format!("tx_power must be > 0, got {}", led.tx_power));
        }
        if !(led.lambertian_order >= 1.0 && led.lambertian_order.is_finite()) {
            r.push(
                &f,
                format!(
                    "lambertian_order must be >= 1, got {}",
                    led.lambertian_order
                ),
            );
        }
    }

    if !is_unit(scene.receiver.orientation.as_ref()) {
        r.push("receiver.orientation", "not a unit vector");
    }
    if !(scene.receiver.pd_area > 0.0 && scene.receiver.pd_area.is_finite()) {
        r.push(
            "receiver.pd_area",
            format!("must be > 0, got {}", scene.receiver.pd_area),
        );
    }

    if scene.noise_variances.len() != scene.leds.len() {
        r.push(
            "noise",
            format!(
                "{} variances for {} LEDs",
                scene.noise_variances.len(),
                scene.leds.len()
            ),
        );
    }
    for (i, s2) in scene.noise_variances.iter().enumerate() {
        if !(*s2 > 0.0 && s2.is_finite()) {
            r.push(
                format!("noise[{i}]"),
                format!("variance must be > 0, got {s2}"),
            );
        }
    }

    if scene.search_region.is_degenerate() {
        r.push("search_region", "search region has zero or negative volume");
    }
    if let Some(x) = receiver_position {
        if !scene.search_region.contains(x) {
            r.push(
                "receiver.position",
                format!("[{}, {}, {}] is outside the search region", x.x, x.y, x.z),
            );
        }
    }

    for (k, e) in scene.irs.iter().enumerate() {
        let f = format!("irs[{k}]");
        if !(e.width > 0.0 && e.height > 0.0) {
            r.push(&f, format!("area must be > 0, got {}", e.area()));
        }
        if !(0.0..=1.0).contains(&e.reflectance) {
            r.push(&f, format!("reflectance {} outside [0, 1]", e.reflectance));
        }
        if !(0.0..=1.0).contains(&e.diffuse_fraction) {
            r.push(
                &f,
                format!("diffuse_fraction {} outside [0, 1]", e.diffuse_fraction),
            );
        }
        if !(e.directivity.is_finite() && e.directivity >= 0.0) {
            r.push(
                &f,
                format!("directivity {} is not a finite value >= 0", e.directivity),
            );
        }
        if !is_unit(e.true_orientation.as_ref()) || !is_unit(e.assumed_orientation.as_ref()) {
            r.push(&f, "orientation is not a unit vector");
        }
        let (tu, tv) = (e.tangent_u.as_ref(), e.tangent_v.as_ref());
        let wn = e.wall.inward_normal();
        if !is_unit(tu)
            || !is_unit(tv)
            || tu.dot(tv).abs() > 1e-12
            || tu.dot(&wn).abs() > 1e-12
            || tv.dot(&wn).abs() > 1e-12
        {
            r.push(&f, "tangent basis is not orthonormal within the wall plane");
        }
        if e.wall.plane_offset(&scene.room, &e.center).abs() > ON_WALL_TOL {
            r.push(&f, format!("center is not on wall {}", e.wall.id()));
        }
        let half_u = e.width / 2.0;
        let half_v = e.height / 2.0;
        let rel = e.center - e.wall.center(&scene.room);
        let u = rel.dot(&e.tangent_u);
        let v = rel.dot(&e.tangent_v);
        if u.abs() + half_u > e.wall.width(&scene.room) / 2.0 + ON_WALL_TOL
            || v.abs() + half_v > scene.room.extent().z / 2.0 + ON_WALL_TOL
        {
            r.push(&f, format!("footprint extends beyond wall {}", e.wall.id()));
        }
        if e.assumed_orientation.dot(&(scene.room.center() - e.center)) <= 0.0 {
            r.push(&f, "assumed orientation does not point into the room");
        }
    }
    r
}

/// The four ceiling LEDs at `(+-1, +-1, 3)` pointing down, in the order
/// `(-1, 1), (1, 1), (1, -1), (-1, -1)`.
pub fn default_leds(tx_power: f64, lambertian_order: f64) -> Vec<Led> {
    [(-1.0, 1.0), (1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)]
        .into_iter()
        .map(|(x, y)| Led {
            position: Vec3::new(x, y, 3.0),
            orientation: UnitVec3::new_unchecked(-Vec3::z()),
            lambertian_order,
            tx_power,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha20Rng;

    fn room() -> AxisBox {
        AxisBox::room(4.0, 4.0, 3.0)
    }

    fn layout(per_wall_count: usize) -> IrsLayout {
        IrsLayout {
            per_wall_count,
            ..IrsLayout::default()
        }
    }

    #[test]
    fn full_grid_has_1764_elements() {
        let els = build_irs_array(&layout(441), &room()).unwrap();
        assert_eq!(els.len(), 1764);
        for e in &els {
            assert!((e.area() - 8e-4).abs() < 1e-18);
        }
    }

    #[test]
    fn single_element_sits_at_wall_center() {
        let r = room();
        let els = build_irs_array(&layout(1), &r).unwrap();
        assert_eq!(els.len(), 4);
        for e in &els {
            assert!((e.center - e.wall.center(&r)).norm() < 1e-15);
        }
    }

    #[test]
    fn desk_grid_footprints_do_not_overlap() {
        let els = build_irs_array(&layout(49), &room()).unwrap();
        assert_eq!(els.len(), 196);
        for (i, a) in els.iter().enumerate() {
            for b in &els[i + 1..] {
                if a.wall != b.wall {
                    continue;
                }
                let d = b.center - a.center;
                let du = d.dot(&a.tangent_u).abs();
                let dv = d.dot(&a.tangent_v).abs();
                // Separated along at least one in-plane axis.
                assert!(du >= a.width - 1e-12 || dv >= a.height - 1e-12);
            }
        }
    }

    #[test]
    fn areas_and_wall_planes() {
        let r = room();
        let l = layout(49);
        let els = build_irs_array(&l, &r).unwrap();
        let total: f64 = els.iter().map(|e| e.area()).sum();
        let expected = 4.0 * 49.0 * l.element_width * l.element_height;
        assert!((total - expected).abs() <= 1e-15);
        for e in &els {
            assert!(e.wall.plane_offset(&r, &e.center).abs() <= 1e-12);
        }
    }

    #[test]
    fn grid_overflow_is_reported() {
        let mut l = layout(10_000);
        l.h_gap = 0.05;
        assert!(matches!(
            build_irs_array(&l, &room()),
            Err(Error::GridOverflow { .. })
        ));
        assert!(matches!(
            build_irs_array(&layout(50), &room()),
            Err(Error::NotPerfectSquare(50))
        ));
    }

    #[test]
    fn assumed_normals_point_inward() {
        let r = room();
        for w in Wall::ALL {
            let to_center = r.center() - w.center(&r);
            assert!(w.inward_normal().dot(&to_center) > 0.0);
            let back = spherical_to_unit(w.assumed_angles());
            assert!((back.into_inner() - w.inward_normal().into_inner()).amax() < 1e-15);
        }
    }

    #[test]
    fn zero_perturbation_is_identity() {
        let assumed = Wall::ALL.map(Wall::inward_normal);
        let mut rng = ChaCha20Rng::seed_from_u64(3);
        let out = perturb_wall_orientations(&assumed, 0.0, &mut rng);
        for (w, v) in Wall::ALL.iter().zip(out.iter()) {
            assert_eq!(*v, w.inward_normal());
        }
    }

    #[test]
    fn offsets_are_bounded_and_reproducible() {
        let a = draw_wall_offsets(0.5, &mut ChaCha20Rng::seed_from_u64(11));
        let b = draw_wall_offsets(0.5, &mut ChaCha20Rng::seed_from_u64(11));
        assert_eq!(a, b);
        for (t, p) in a {
            assert!((-0.5..=0.5).contains(&t));
            assert!((-0.5..=0.5).contains(&p));
        }
    }

    #[test]
    fn theta_offsets_are_uniform() {
        // Kolmogorov-Smirnov against U(-1, 1) at the 1% level.
        let mut rng = ChaCha20Rng::seed_from_u64(2024);
        let n = 10_000;
        let mut xs: Vec<f64> = (0..n)
            .map(|_| draw_wall_offsets(1.0, &mut rng)[0].0)
            .collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let d = xs
            .iter()
            .enumerate()
            .map(|(i, x)| {
                let cdf = (x + 1.0) / 2.0;
                let lo = i as f64 / n as f64;
                let hi = (i + 1) as f64 / n as f64;
                (cdf - lo).abs().max((hi - cdf).abs())
            })
            .fold(0.0, f64::max);
        assert!(d < 1.628 / (n as f64).sqrt(), "KS statistic {d}");
    }

    fn small_scene() -> Scene {
        let r = room();
        Scene {
            room: r,
            leds: default_leds(5.0, 1.0),
            irs: build_irs_array(&layout(1), &r).unwrap(),
            receiver: Receiver {
                orientation: UnitVec3::new_unchecked(Vec3::z()),
                pd_area: 1e-4,
            },
            noise_variances: vec![1e-17; 4],
            search_region: r,
            los_blocked: true,
        }
    }

    #[test]
    fn validation_collects_violations() {
        let s = small_scene();
        assert!(scene_validate(&s, Some(&Vec3::new(0.5, 0.5, 0.85))).is_valid());

        let mut bad = s.clone();
        bad.irs[0].reflectance = 1.2;
        let rep = scene_validate(&bad, None);
        assert_eq!(rep.violations.len(), 1);
        assert!(rep.violations[0].message.contains("reflectance"));

        let mut flat = s.clone();
        flat.search_region.max.z = flat.search_region.min.z;
        flat.noise_variances[2] = 0.0;
        let rep = scene_validate(&flat, None);
        assert_eq!(rep.violations.len(), 2);
        assert!(rep.violations.iter().any(|v| v.field == "search_region"));

        let rep = scene_validate(&s, Some(&Vec3::new(0.0, 0.0, 3.5)));
        assert_eq!(rep.violations[0].field, "receiver.position");
    }
}
