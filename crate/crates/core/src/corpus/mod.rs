//! Synthetic labelled report corpus and leakage-free patient-level splitting.
//!
//! Reports are generated from a sentence template library styled on real
//! neuroradiology reports: succinct normals, normals that describe absent
//! findings under negation, and abnormals ranging from explicit findings to
//! "stable appearances" follow-ups. Every generated sentence carries a
//! provenance record so label/text consistency can be checked mechanically.

mod generate;
mod split;
pub mod templates;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::jsonl;

pub use generate::{generate_corpus, generate_with_provenance, GeneratedCorpus};
pub use split::{split_by_patient, Split, SplitManifest};

/// The five granular abnormality categories, in label-vector order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Category {
    Damage,
    Vascular,
    Mass,
    AcuteStroke,
    Fazekas,
}

impl Category {
    pub const ALL: [Category; 5] = [
        Category::Damage,
        Category::Vascular,
        Category::Mass,
        Category::AcuteStroke,
        Category::Fazekas,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Damage => "damage",
            Category::Vascular => "vascular",
            Category::Mass => "mass",
            Category::AcuteStroke => "acute stroke",
            Category::Fazekas => "Fazekas",
        }
    }
}

/// One radiology report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub report_id: String,
    pub patient_id: String,
    pub text: String,
    /// 0 = normal, 1 = abnormal.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub coarse_label: Option<u8>,
    /// Presence flags in [`Category::ALL`] order.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub granular_labels: Option<[u8; 5]>,
    /// Group label attached by the lasso annotation workflow.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub annotation: Option<String>,
}

impl Report {
    pub fn validate(&self) -> Result<()> {
        if self.text.is_empty() {
            return Err(Error::Label(format!("report {} has empty text", self.report_id)));
        }
        if let Some(c) = self.coarse_label {
            if c > 1 {
                return Err(Error::Label(format!("report {} has coarse label {c}", self.report_id)));
            }
        }
        if let Some(g) = &self.granular_labels {
            if g.iter().any(|&v| v > 1) {
                return Err(Error::Label(format!(
                    "report {} has non-binary granular labels {g:?}",
                    self.report_id
                )));
            }
        }
        Ok(())
    }
}

/// Checks report-id uniqueness and per-report invariants.
pub fn validate_corpus(reports: &[Report]) -> Result<()> {
    let mut seen = std::collections::HashSet::new();
    for r in reports {
        r.validate()?;
        if !seen.insert(r.report_id.as_str()) {
            return Err(Error::Label(format!("duplicate report_id {}", r.report_id)));
        }
    }
    Ok(())
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_reports: usize,
    pub abnormal_fraction: f64,
    /// (reports per patient, weight) pairs.
    pub reports_per_patient: Vec<(usize, f64)>,
    pub negation_rate: f64,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        Self {
            n_reports: 2000,
            abnormal_fraction: 0.5,
            reports_per_patient: vec![(1, 0.55), (2, 0.25), (3, 0.12), (4, 0.08)],
            negation_rate: 0.6,
            seed: 7,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_reports == 0 {
            return Err(Error::Config("n_reports must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.abnormal_fraction) {
            return Err(Error::Config(format!(
                "abnormal_fraction {} outside [0, 1]",
                self.abnormal_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.negation_rate) {
            return Err(Error::Config(format!(
                "negation_rate {} outside [0, 1]",
                self.negation_rate
            )));
        }
        if self.reports_per_patient.is_empty() {
            return Err(Error::Config("reports_per_patient is empty".into()));
        }
        let mut total = 0.0;
        for &(count, weight) in &self.reports_per_patient {
            if count == 0 {
                return Err(Error::Config("reports_per_patient support must be >= 1".into()));
            }
            if !(weight.is_finite() && weight >= 0.0) {
                return Err(Error::Config(format!("invalid patient weight {weight}")));
            }
            total += weight;
        }
        if total <= 0.0 {
            return Err(Error::Config("reports_per_patient weights sum to zero".into()));
        }
        Ok(())
    }
}

pub fn write_corpus(path: &Path, reports: &[Report]) -> Result<()> {
    jsonl::write(path, reports)
}

pub fn read_corpus(path: &Path) -> Result<Vec<Report>> {
    let reports: Vec<Report> = jsonl::read(path)?;
    validate_corpus(&reports)?;
    Ok(reports)
}
