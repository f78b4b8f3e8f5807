//! The camera pose distribution used for random views.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::CameraPose;

/// Azimuth uniform on `[0, 360)`, elevation uniform on
/// `[min_elevation, max_elevation]`, fixed distance.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoseDistribution {
    pub min_elevation: f64,
    pub max_elevation: f64,
    pub distance: f64,
}

impl Default for PoseDistribution {
    fn default() -> Self {
        PoseDistribution { min_elevation: 0.0, max_elevation: 30.0, distance: CameraPose::DEFAULT_DISTANCE }
    }
}

impl PoseDistribution {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = (self.min_elevation, self.max_elevation);
        if !(-90.0..=90.0).contains(&lo) || !(-90.0..=90.0).contains(&hi) || lo > hi {
            return Err(Error::Config(format!("elevation bounds [{lo}, {hi}] must be ordered within [-90, 90]")));
        }
        if !(self.distance > 0.0) || !self.distance.is_finite() {
            return Err(Error::Config(format!("camera distance {} must be positive", self.distance)));
        }
        Ok(())
    }

    pub fn contains(&self, pose: &CameraPose) -> bool {
        (self.min_elevation..=self.max_elevation).contains(&pose.elevation)
            && (0.0..360.0).contains(&pose.azimuth)
            && pose.distance == self.distance
    }
}

pub fn sample_pose(dist: &PoseDistribution, rng: &mut impl Rng) -> CameraPose {
    let azimuth = rng.gen_range(0.0..360.0);
    let elevation = if dist.min_elevation < dist.max_elevation {
        rng.gen_range(dist.min_elevation..=dist.max_elevation)
    } else {
        dist.min_elevation
    };
    CameraPose { elevation, azimuth, distance: dist.distance }
}
