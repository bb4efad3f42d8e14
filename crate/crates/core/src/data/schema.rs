use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Ordered raw feature layout of one timestep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "SchemaFile", into = "SchemaFile")]
pub struct FeatureSchema {
    names: Vec<String>,
    sofa_index: usize,
    lactate_index: usize,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SchemaFile {
    names: Vec<String>,
    sofa_index: usize,
    lactate_index: usize,
}

impl TryFrom<SchemaFile> for FeatureSchema {
    type Error = Error;

    fn try_from(f: SchemaFile) -> Result<Self> {
        FeatureSchema::new(f.names, f.sofa_index, f.lactate_index)
    }
}

impl From<FeatureSchema> for SchemaFile {
    fn from(s: FeatureSchema) -> Self {
        SchemaFile {
            names: s.names,
            sofa_index: s.sofa_index,
            lactate_index: s.lactate_index,
        }
    }
}

const SYNTHETIC_NAMES: [&str; 12] = [
    "sofa",
    "arterial_lactate",
    "heart_rate",
    "mean_bp",
    "systolic_bp",
    "respiratory_rate",
    "temperature",
    "spo2",
    "creatinine",
    "bun",
    "platelets",
    "wbc",
];

const EXTENDED_NAMES: [&str; 48] = [
    "shock_index",
    "elixhauser",
    "sirs",
    "gender",
    "re_admission",
    "gcs",
    "sofa",
    "age",
    "albumin",
    "arterial_ph",
    "calcium",
    "glucose",
    "hemoglobin",
    "magnesium",
    "ptt",
    "potassium",
    "sgpt",
    "arterial_blood_gas",
    "bun",
    "chloride",
    "bicarbonate",
    "inr",
    "sodium",
    "arterial_lactate",
    "co2",
    "creatinine",
    "ionised_calcium",
    "pt",
    "platelets",
    "sgot",
    "total_bilirubin",
    "wbc",
    "diastolic_bp",
    "systolic_bp",
    "mean_bp",
    "paco2",
    "pao2",
    "fio2",
    "pao2_fio2_ratio",
    "respiratory_rate",
    "temperature",
    "weight",
    "heart_rate",
    "spo2",
    "fluid_output_4h",
    "total_fluid_output",
    "mechanical_ventilation",
    "timestep",
];

impl FeatureSchema {
    pub fn new(names: Vec<String>, sofa_index: usize, lactate_index: usize) -> Result<Self> {
        let d = names.len();
        if sofa_index >= d || lactate_index >= d {
            return Err(Error::Config(format!(
                "sofa_index {sofa_index} / lactate_index {lactate_index} out of range for {d} features"
            )));
        }
        if sofa_index == lactate_index {
            return Err(Error::Config(
                "sofa_index and lactate_index must differ".into(),
            ));
        }
        let mut seen = HashSet::new();
        for n in &names {
            if !seen.insert(n.as_str()) {
                return Err(Error::Config(format!("duplicate feature name `{n}`")));
            }
        }
        Ok(Self {
            names,
            sofa_index,
            lactate_index,
        })
    }

    /// Compact schema used by the synthetic cohort: SOFA, lactate and ten
    /// auxiliary vitals/labs.
    pub fn synthetic() -> Self {
        Self::new(SYNTHETIC_NAMES.iter().map(|s| s.to_string()).collect(), 0, 1)
            .expect("static schema is valid")
    }

    /// The 48-feature ICU layout (demographics, labs, vitals, fluid
    /// balance and timestep).
    pub fn extended_icu() -> Self {
        let names: Vec<String> = EXTENDED_NAMES.iter().map(|s| s.to_string()).collect();
        let sofa = names.iter().position(|n| n == "sofa").unwrap();
        let lactate = names.iter().position(|n| n == "arterial_lactate").unwrap();
        Self::new(names, sofa, lactate).expect("static schema is valid")
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn d_raw(&self) -> usize {
        self.names.len()
    }

    pub fn sofa_index(&self) -> usize {
        self.sofa_index
    }

    pub fn lactate_index(&self) -> usize {
        self.lactate_index
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }
}
