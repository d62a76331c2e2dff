use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Synthetic,
    PseudoReal,
}

impl Domain {
    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Synthetic => "synthetic",
            Domain::PseudoReal => "pseudo_real",
        }
    }

    /// Binary label used by domain probes and discriminators.
    pub fn index(self) -> usize {
        match self {
            Domain::Synthetic => 0,
            Domain::PseudoReal => 1,
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Domain::Synthetic),
            "pseudo_real" | "pseudo-real" => Ok(Domain::PseudoReal),
            _ => Err(Error::InvalidArgument(format!("unknown domain {s:?}"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrajectoryKind {
    Linear,
    Curved,
}

/// Integer count drawn uniformly from `mean ± jitter`, never below one.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CountDist {
    pub mean: u32,
    pub jitter: u32,
}

impl CountDist {
    pub fn fixed(mean: u32) -> Self {
        Self { mean, jitter: 0 }
    }

    pub fn sample(&self, rng: &mut impl Rng) -> usize {
        if self.jitter == 0 {
            return self.mean.max(1) as usize;
        }
        let lo = self.mean as i64 - self.jitter as i64;
        let hi = self.mean as i64 + self.jitter as i64;
        rng.gen_range(lo..=hi).max(1) as usize
    }
}

/// Kinematic and texture parameters of one typing domain.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypingStyle {
    pub trajectory_kind: TrajectoryKind,
    pub frames_per_transition: CountDist,
    pub dwell_frames: CountDist,
    /// Per-frame positional noise, keyboard units.
    pub path_noise_sigma: f64,
    /// Bézier control-point offset as a fraction of the segment length.
    pub curvature: f64,
    pub thumb_radius: f64,
    /// Brightness/contrast perturbation strength in `[0, 1]`.
    pub texture_jitter: f64,
    pub domain: Domain,
}

impl TypingStyle {
    /// Straight-line thumb motion at a constant pace with clean frames.
    pub fn synthetic() -> Self {
        Self {
            trajectory_kind: TrajectoryKind::Linear,
            frames_per_transition: CountDist::fixed(3),
            dwell_frames: CountDist::fixed(1),
            path_noise_sigma: 0.0,
            curvature: 0.0,
            thumb_radius: 0.45,
            texture_jitter: 0.0,
            domain: Domain::Synthetic,
        }
    }

    /// Curved, noisy, irregularly paced motion with a larger thumb and
    /// perturbed frames.
    pub fn pseudo_real() -> Self {
        Self {
            trajectory_kind: TrajectoryKind::Curved,
            frames_per_transition: CountDist { mean: 4, jitter: 2 },
            dwell_frames: CountDist { mean: 2, jitter: 1 },
            path_noise_sigma: 0.08,
            curvature: 0.35,
            thumb_radius: 0.6,
            texture_jitter: 0.25,
            domain: Domain::PseudoReal,
        }
    }

    pub fn preset(domain: Domain) -> Self {
        match domain {
            Domain::Synthetic => Self::synthetic(),
            Domain::PseudoReal => Self::pseudo_real(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.frames_per_transition.mean < 1 || self.dwell_frames.mean < 1 {
            return bad("frame count means must be at least 1".into());
        }
        if self.trajectory_kind == TrajectoryKind::Linear && (self.curvature != 0.0 || self.path_noise_sigma != 0.0) {
            return bad("linear style must have zero curvature and zero path noise".into());
        }
        if !(0.0..=1.0).contains(&self.texture_jitter) {
            return bad(format!("texture_jitter {} outside [0, 1]", self.texture_jitter));
        }
        if !(self.thumb_radius > 0.0) || !(self.path_noise_sigma >= 0.0) || !self.curvature.is_finite() {
            return bad("thumb radius must be positive and noise non-negative".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_are_valid() {
        TypingStyle::synthetic().validate().unwrap();
        TypingStyle::pseudo_real().validate().unwrap();
        let mut s = TypingStyle::synthetic();
        s.curvature = 0.2;
        assert!(s.validate().is_err());
    }

    #[test]
    fn domain_round_trip() {
        for d in [Domain::Synthetic, Domain::PseudoReal] {
            assert_eq!(d.as_str().parse::<Domain>().unwrap(), d);
            assert_eq!(serde_json::to_string(&d).unwrap(), format!("\"{d}\""));
        }
    }
}
