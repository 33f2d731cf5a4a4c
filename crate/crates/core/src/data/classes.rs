use std::path::Path;

use serde::{Deserialize, Serialize};

use super::DataError;

/// The seventeen property-risk categories of the public dataset, in id order.
pub const PROPERTY_RISK_CLASSES: [&str; 17] = [
    "Bad Driveway",
    "Boarded",
    "Cracked Foundation",
    "Damage",
    "Dead Yard",
    "Falling Gutters",
    "For Sale",
    "Garbage",
    "Hazard Signs",
    "House",
    "Old Car",
    "Old Window",
    "Overgrown Bush",
    "Overgrown Yard",
    "Overgrowth",
    "Paint-Rust Issues",
    "Roof Issues",
];

pub const DEFAULT_CONF_THRESHOLD: f64 = 0.25;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSpec {
    pub id: usize,
    pub name: String,
    pub severity: f64,
    #[serde(default = "default_conf")]
    pub conf_threshold: f64,
}

fn default_conf() -> f64 {
    DEFAULT_CONF_THRESHOLD
}

/// Validated class table: ids are dense `0..C` and stored in id order.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassTable {
    classes: Vec<ClassSpec>,
}

impl ClassTable {
    pub fn new(mut classes: Vec<ClassSpec>) -> Result<Self, DataError> {
        if classes.is_empty() {
            return Err(DataError::ClassConfig("class table is empty".into()));
        }
        classes.sort_by_key(|c| c.id);
        for (i, c) in classes.iter().enumerate() {
            if i > 0 && classes[i - 1].id == c.id {
                return Err(DataError::ClassConfig(format!("duplicate class id {}", c.id)));
            }
            if c.id != i {
                return Err(DataError::ClassConfig(format!(
                    "class ids must be dense from 0; missing id {i}"
                )));
            }
            if !(0.0..=1.0).contains(&c.severity) {
                return Err(DataError::ClassConfig(format!(
                    "class {} severity {} outside [0, 1]",
                    c.id, c.severity
                )));
            }
            if !(c.conf_threshold > 0.0 && c.conf_threshold < 1.0) {
                return Err(DataError::ClassConfig(format!(
                    "class {} conf_threshold {} outside (0, 1)",
                    c.id, c.conf_threshold
                )));
            }
        }
        Ok(Self { classes })
    }

    /// The seventeen property-risk classes with a declining severity ramp.
    pub fn property_risk() -> Self {
        Self::with_ramp(PROPERTY_RISK_CLASSES.len())
    }

    /// `count` classes named after the property-risk taxonomy (or `class_k`
    /// beyond it) with severities declining linearly from 1.0 to 0.2.
    pub fn with_ramp(count: usize) -> Self {
        let classes = (0..count)
            .map(|k| ClassSpec {
                id: k,
                name: PROPERTY_RISK_CLASSES
                    .get(k)
                    .map(|s| s.to_string())
                    .unwrap_or_else(|| format!("class_{k}")),
                severity: severity_ramp(k, count),
                conf_threshold: DEFAULT_CONF_THRESHOLD,
            })
            .collect();
        Self::new(classes).expect("ramp table is valid")
    }

    pub fn from_json(text: &str) -> Result<Self, DataError> {
        let classes: Vec<ClassSpec> = serde_json::from_str(text)
            .map_err(|e| DataError::ClassConfig(format!("invalid class JSON: {e}")))?;
        Self::new(classes)
    }

    pub fn load(path: &Path) -> Result<Self, DataError> {
        let text = std::fs::read_to_string(path).map_err(|e| DataError::Io {
            path: path.to_path_buf(),
            source: e,
        })?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.classes).expect("serializable")
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }

    pub fn get(&self, id: usize) -> Option<&ClassSpec> {
        self.classes.get(id)
    }

    pub fn iter(&self) -> impl Iterator<Item = &ClassSpec> {
        self.classes.iter()
    }

    pub fn names(&self) -> Vec<String> {
        self.classes.iter().map(|c| c.name.clone()).collect()
    }

    pub fn severities(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.severity).collect()
    }

    pub fn thresholds(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.conf_threshold).collect()
    }

    pub fn specs_mut(&mut self) -> &mut [ClassSpec] {
        &mut self.classes
    }
}

fn severity_ramp(k: usize, count: usize) -> f64 {
    if count <= 1 {
        1.0
    } else {
        1.0 - 0.8 * k as f64 / (count - 1) as f64
    }
}
