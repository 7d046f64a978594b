//! Shipped reference data that the toy stack does not reproduce: published
//! hardware bin-packing results and the rendering randomization used for
//! image-based students.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::config::{parse_toml, ConfigError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BinPackResult {
    pub label: String,
    /// Consecutive successes, mean and std.
    pub cs: [f64; 2],
    /// Cycle time in seconds, mean and std.
    pub ct: [f64; 2],
    /// Success rate in percent.
    pub sr: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReferenceResults {
    pub binpack: Vec<BinPackResult>,
}

impl ReferenceResults {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let r: ReferenceResults = parse_toml(text)?;
        for b in &r.binpack {
            if b.sr > 100 || b.cs.iter().chain(&b.ct).any(|v| !(v.is_finite() && *v >= 0.0)) {
                return Err(ConfigError::invalid(format!("binpack.{}", b.label), "values must be non-negative, SR at most 100"));
            }
        }
        Ok(r)
    }

    pub fn reference() -> Self {
        Self::from_text(include_str!("../data/reference_results.toml")).expect("shipped reference results are valid")
    }

    pub fn get(&self, label: &str) -> Option<&BinPackResult> {
        self.binpack.iter().find(|b| b.label == label)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum Distribution {
    Uniform([f64; 2]),
    Uniform3([[f64; 3]; 2]),
    Choice(String),
}

impl Distribution {
    fn valid(&self) -> bool {
        match self {
            Distribution::Uniform([lo, hi]) => lo.is_finite() && hi.is_finite() && lo <= hi,
            Distribution::Uniform3([lo, hi]) => lo.iter().zip(hi).all(|(l, h)| l.is_finite() && h.is_finite() && l <= h),
            Distribution::Choice(set) => !set.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Augmentation {
    pub random_background: f64,
    pub color_jitter: f64,
    pub random_blur: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VisualRandomization {
    pub hdri_probability: f64,
    pub lighting: BTreeMap<String, Distribution>,
    pub object: BTreeMap<String, Distribution>,
    pub robot: BTreeMap<String, Distribution>,
    pub table: BTreeMap<String, Distribution>,
    pub augmentation: Augmentation,
}

impl VisualRandomization {
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let v: VisualRandomization = parse_toml(text)?;
        let a = &v.augmentation;
        for (field, p) in [
            ("hdri_probability", v.hdri_probability),
            ("augmentation.random_background", a.random_background),
            ("augmentation.color_jitter", a.color_jitter),
            ("augmentation.random_blur", a.random_blur),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(ConfigError::invalid(field, "probability outside [0, 1]"));
            }
        }
        for (group, params) in [("lighting", &v.lighting), ("object", &v.object), ("robot", &v.robot), ("table", &v.table)] {
            if let Some((name, _)) = params.iter().find(|(_, d)| !d.valid()) {
                return Err(ConfigError::invalid(format!("{group}.{name}"), "empty or inverted range"));
            }
        }
        Ok(v)
    }

    pub fn reference() -> Self {
        Self::from_text(include_str!("../data/visual_randomization.toml")).expect("shipped visual randomization is valid")
    }
}
