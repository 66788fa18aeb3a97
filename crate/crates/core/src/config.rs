//! Scenario files: a JSON document in which every field is optional.
//! Omitted fields take the reference-room defaults; a profile fills in the
//! problem size (elements per wall, trials) when the file does not.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::EstimatorConfig;
use crate::geometry::{unit, AxisBox, UnitVec3, Vec3};
use crate::montecarlo::{ExperimentConfig, MismatchMode};
use crate::scene::{build_irs_array, scene_validate, IrsLayout, Led, Phong, Receiver, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// 49 elements per wall, 200 trials.
    Desk,
    /// 441 elements per wall, 500 trials.
    #[default]
    Paper,
}

impl Profile {
    pub fn per_wall_count(self) -> usize {
        match self {
            Profile::Desk => 49,
            Profile::Paper => 441,
        }
    }

    pub fn trials(self) -> usize {
        match self {
            Profile::Desk => 200,
            Profile::Paper => 500,
        }
    }
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile {other:?}, expected desk or paper"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RoomConfig {
    pub width: f64,
    pub depth: f64,
    pub height: f64,
}

impl Default for RoomConfig {
    fn default() -> Self {
        Self {
            width: 4.0,
            depth: 4.0,
            height: 3.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LedConfig {
    pub position: Vec3,
    #[serde(default = "down")]
    pub orientation: Vec3,
    #[serde(default = "one")]
    pub lambertian_order: f64,
    #[serde(default = "five")]
    pub tx_power: f64,
}

fn down() -> Vec3 {
    -Vec3::z()
}
fn one() -> f64 {
    1.0
}
fn five() -> f64 {
    5.0
}

fn default_leds() -> Vec<LedConfig> {
    crate::scene::default_leds(5.0, 1.0)
        .into_iter()
        .map(|l| LedConfig {
            position: l.position,
            orientation: l.orientation.into_inner(),
            lambertian_order: l.lambertian_order,
            tx_power: l.tx_power,
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct IrsLayoutConfig {
    pub per_wall_count: Option<usize>,
    pub element_width: f64,
    pub element_height: f64,
    pub h_gap: f64,
    pub v_gap: f64,
    pub reflectance: f64,
    pub diffuse_fraction: f64,
    pub directivity: f64,
}

impl Default for IrsLayoutConfig {
    fn default() -> Self {
        let l = IrsLayout::default();
        Self {
            per_wall_count: None,
            element_width: l.element_width,
            element_height: l.element_height,
            h_gap: l.h_gap,
            v_gap: l.v_gap,
            reflectance: l.phong.reflectance,
            diffuse_fraction: l.phong.diffuse_fraction,
            directivity: l.phong.directivity,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReceiverConfig {
    pub position: Vec3,
    pub orientation: Vec3,
    pub pd_area: f64,
}

impl Default for ReceiverConfig {
    fn default() -> Self {
        Self {
            position: Vec3::new(0.5, 0.5, 0.85),
            orientation: Vec3::z(),
            pd_area: 1e-4,
        }
    }
}

/// Either one variance for every LED or one per LED, W².
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub variance: Option<f64>,
    pub variances: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepConfig {
    pub k_values: Vec<f64>,
    pub sigma2_values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentSection {
    pub trials: Option<usize>,
    pub seed: Option<u64>,
    pub estimator: EstimatorConfig,
    pub rmse_vs_k: Option<SweepConfig>,
    pub rmse_vs_noise: Option<SweepConfig>,
}

/// The file as written, before defaults are applied.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScenarioConfig {
    pub profile: Option<Profile>,
    pub room: RoomConfig,
    pub leds: Option<Vec<LedConfig>>,
    pub irs_layout: IrsLayoutConfig,
    pub receiver: ReceiverConfig,
    pub noise: NoiseConfig,
    pub search_region: Option<AxisBox>,
    pub los_blocked: Option<bool>,
    pub experiment: ExperimentSection,
}

/// Fully resolved scenario: no optional fields left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scenario {
    pub profile: Profile,
    pub room: RoomConfig,
    pub leds: Vec<LedConfig>,
    pub irs_layout: IrsLayout,
    pub receiver: ReceiverConfig,
    pub noise_variances: Vec<f64>,
    pub search_region: AxisBox,
    pub los_blocked: bool,
    pub trials: usize,
    pub seed: u64,
    pub estimator: EstimatorConfig,
    pub rmse_vs_k: SweepConfig,
    pub rmse_vs_noise: SweepConfig,
}

pub const DEFAULT_SEED: u64 = 1;
pub const DEFAULT_NOISE_VARIANCE: f64 = 1e-17;

impl ScenarioConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    /// Applies defaults. `profile` overrides the file's profile.
    pub fn resolve(&self, profile: Option<Profile>) -> Result<Scenario> {
        let profile = profile.or(self.profile).unwrap_or_default();
        let leds = self.leds.clone().unwrap_or_else(default_leds);
        let noise_variances = match (&self.noise.variance, &self.noise.variances) {
            (Some(_), Some(_)) => {
                return Err(Error::Config(
                    "give noise.variance or noise.variances, not both".into(),
                ))
            }
            (None, Some(v)) => v.clone(),
            (v, None) => vec![v.unwrap_or(DEFAULT_NOISE_VARIANCE); leds.len()],
        };
        let l = &self.irs_layout;
        let irs_layout = IrsLayout {
            per_wall_count: l.per_wall_count.unwrap_or(profile.per_wall_count()),
            element_width: l.element_width,
            element_height: l.element_height,
            h_gap: l.h_gap,
            v_gap: l.v_gap,
            phong: Phong {
                reflectance: l.reflectance,
                diffuse_fraction: l.diffuse_fraction,
                directivity: l.directivity,
            },
        };
        let room = AxisBox::room(self.room.width, self.room.depth, self.room.height);
        let ex = &self.experiment;
        Ok(Scenario {
            profile,
            room: self.room,
            leds,
            irs_layout,
            receiver: self.receiver,
            noise_variances,
            search_region: self.search_region.unwrap_or(room),
            los_blocked: self.los_blocked.unwrap_or(true),
            trials: ex.trials.unwrap_or(profile.trials()),
            seed: ex.seed.unwrap_or(DEFAULT_SEED),
            estimator: ex.estimator,
            rmse_vs_k: ex.rmse_vs_k.clone().unwrap_or(SweepConfig {
                k_values: vec![0.0, 0.25, 0.5, 0.75, 1.0],
                sigma2_values: vec![1e-17],
            }),
            rmse_vs_noise: ex.rmse_vs_noise.clone().unwrap_or(SweepConfig {
                k_values: vec![0.0, 0.25, 0.5, 1.0],
                sigma2_values: (13..=21).map(|e| 10f64.powi(-e)).collect(),
            }),
        })
    }
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            k_values: vec![1.0],
            sigma2_values: vec![1e-17],
        }
    }
}

fn to_unit(v: &Vec3, what: &str) -> Result<UnitVec3> {
    unit(v.x, v.y, v.z).map_err(|_| Error::Config(format!("{what} must be a nonzero vector")))
}

impl Scenario {
    pub fn room_box(&self) -> AxisBox {
        AxisBox::room(self.room.width, self.room.depth, self.room.height)
    }

    pub fn x_true(&self) -> Vec3 {
        self.receiver.position
    }

    /// Builds and validates the scene. Orientation vectors are normalized.
    pub fn scene(&self) -> Result<Scene> {
        let room = self.room_box();
        let leds = self
            .leds
            .iter()
            .enumerate()
            .map(|(i, l)| {
                Ok(Led {
                    position: l.position,
                    orientation: to_unit(&l.orientation, &format!("leds[{i}].orientation"))?,
                    lambertian_order: l.lambertian_order,
                    tx_power: l.tx_power,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let scene = Scene {
            room,
            leds,
            irs: build_irs_array(&self.irs_layout, &room)?,
            receiver: Receiver {
                orientation: to_unit(&self.receiver.orientation, "receiver.orientation")?,
                pd_area: self.receiver.pd_area,
            },
            noise_variances: self.noise_variances.clone(),
            search_region: self.search_region,
            los_blocked: self.los_blocked,
        };
        scene_validate(&scene, Some(&self.receiver.position)).into_result()?;
        self.estimator.validate()?;
        Ok(scene)
    }

    pub fn experiment(&self, mode: MismatchMode) -> ExperimentConfig {
        let sweep = match mode {
            MismatchMode::RedrawPerTrial => &self.rmse_vs_k,
            MismatchMode::FixedSeeded => &self.rmse_vs_noise,
        };
        ExperimentConfig {
            x_true: self.x_true(),
            k_values: sweep.k_values.clone(),
            sigma2_values: sweep.sigma2_values.clone(),
            trials: self.trials,
            mode,
            seed: self.seed,
            estimator: self.estimator,
        }
    }

    /// Canonical JSON, the basis for scene hashes.
    pub fn canonical_json(&self) -> Result<String> {
        Ok(serde_json::to_string(self)?)
    }
}

/// Reads, resolves and validates a scenario file.
pub fn parse_config(path: &Path, profile: Option<Profile>) -> Result<(Scene, Scenario)> {
    let scenario = ScenarioConfig::from_path(path)?.resolve(profile)?;
    Ok((scenario.scene()?, scenario))
}
