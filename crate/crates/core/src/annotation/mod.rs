//! Lasso labelling: containment, an append-only assignment log with
//! supersession, dataset export, and the HTTP service.

mod geometry;
mod service;

use std::collections::BTreeMap;
use std::fs::OpenOptions;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::Report;
use crate::error::{Error, Result};
use crate::projection::ProjectedPoint;

pub use geometry::{contains, points_in_polygon, validate_polygon, Point, BOUNDARY_EPS};
pub use service::{router, serve, AppState, ServeConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LassoSelection {
    pub polygon: Vec<Point>,
    pub label: String,
    #[serde(default)]
    pub author: String,
    /// RFC 3339; filled in by the service when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

impl LassoSelection {
    pub fn validate(&self) -> Result<()> {
        validate_polygon(&self.polygon)?;
        if self.label.trim().is_empty() {
            return Err(Error::Config("label must not be empty".into()));
        }
        Ok(())
    }
}

/// One line of the append-only log: a selection and the ids it captured.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionEvent {
    pub selection_id: String,
    pub projection_id: String,
    pub selection: LassoSelection,
    pub report_ids: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelAssignment {
    pub report_id: String,
    pub label: String,
    pub selection_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub superseded_by: Option<String>,
}

/// Labels conflict when they share a namespace: the text before the first
/// ':' ("site:frontal" is in "site"), or the default namespace "" when
/// there is no ':'.
pub fn label_namespace(label: &str) -> &str {
    label.split_once(':').map_or("", |(ns, _)| ns)
}

/// Replayed assignment state.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AssignmentSet {
    pub assignments: Vec<LabelAssignment>,
    active: BTreeMap<(String, String), usize>,
}

impl AssignmentSet {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a SelectionEvent>) -> Self {
        let mut set = Self::default();
        for e in events {
            set.apply(e);
        }
        set
    }

    fn apply(&mut self, event: &SelectionEvent) -> Vec<LabelAssignment> {
        let ns = label_namespace(&event.selection.label).to_string();
        let mut created = Vec::with_capacity(event.report_ids.len());
        for id in &event.report_ids {
            let key = (id.clone(), ns.clone());
            if let Some(&old) = self.active.get(&key) {
                self.assignments[old].superseded_by = Some(event.selection_id.clone());
            }
            let a = LabelAssignment {
                report_id: id.clone(),
                label: event.selection.label.clone(),
                selection_id: event.selection_id.clone(),
                superseded_by: None,
            };
            self.active.insert(key, self.assignments.len());
            self.assignments.push(a.clone());
            created.push(a);
        }
        created
    }

    /// Active assignments ordered by (report_id, namespace).
    pub fn active(&self) -> impl Iterator<Item = &LabelAssignment> {
        self.active.values().map(|&i| &self.assignments[i])
    }

    /// Active labels of one report, ordered by namespace.
    pub fn active_labels(&self, report_id: &str) -> Vec<&str> {
        self.active
            .range((report_id.to_string(), String::new())..)
            .take_while(|((id, _), _)| id == report_id)
            .map(|(_, &i)| self.assignments[i].label.as_str())
            .collect()
    }
}

/// Log file plus its replayed state. Writes append one line each.
#[derive(Debug)]
pub struct AnnotationStore {
    path: PathBuf,
    events: Vec<SelectionEvent>,
    state: AssignmentSet,
}

impl AnnotationStore {
    /// Opens (or starts) the log at `path`, replaying existing events.
    pub fn open(path: &Path) -> Result<Self> {
        let events: Vec<SelectionEvent> = if path.exists() {
            crate::jsonl::read(path)?
        } else {
            Vec::new()
        };
        Ok(Self {
            path: path.to_path_buf(),
            state: AssignmentSet::replay(&events),
            events,
        })
    }

    pub fn events(&self) -> &[SelectionEvent] {
        &self.events
    }

    pub fn state(&self) -> &AssignmentSet {
        &self.state
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    /// Selects the points inside the polygon, appends the event to the log
    /// and returns the new assignments.
    pub fn apply_lasso(
        &mut self,
        projection_id: &str,
        points: &[ProjectedPoint],
        mut selection: LassoSelection,
    ) -> Result<Vec<LabelAssignment>> {
        selection.validate()?;
        if selection.timestamp.is_none() {
            selection.timestamp = Some(chrono::Utc::now().to_rfc3339());
        }
        let event = SelectionEvent {
            selection_id: format!("S{:06}", self.events.len() + 1),
            projection_id: projection_id.to_string(),
            report_ids: points_in_polygon(points, &selection.polygon)?,
            selection,
        };
        self.append(&event)?;
        let created = self.state.apply(&event);
        self.events.push(event);
        Ok(created)
    }

    fn append(&self, event: &SelectionEvent) -> Result<()> {
        if let Some(parent) = self.path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
        }
        let mut line = serde_json::to_string(event)?;
        line.push('\n');
        let mut file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&self.path)
            .map_err(|e| Error::io(&self.path, e))?;
        file.write_all(line.as_bytes()).map_err(|e| Error::io(&self.path, e))?;
        file.sync_data().map_err(|e| Error::io(&self.path, e))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Export {
    /// Corpus-format lines, sorted by report_id.
    pub records: String,
    pub count: usize,
    pub warning: Option<String>,
}

/// Reports carrying an active lasso label, with `annotation` set. With a
/// filter only that exact label is exported; without one every active
/// label of a report is joined with ';'.
pub fn export_dataset(
    reports: &BTreeMap<String, Report>,
    state: &AssignmentSet,
    label_filter: Option<&str>,
) -> Result<Export> {
    let mut labels: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for a in state.active() {
        if label_filter.is_none_or(|f| f == a.label) {
            labels.entry(a.report_id.as_str()).or_default().push(a.label.as_str());
        }
    }
    let mut out = Vec::with_capacity(labels.len());
    for (id, ls) in labels {
        let report = reports
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("report {id} is labelled but not in the corpus")))?;
        out.push(Report {
            annotation: Some(ls.join(";")),
            ..report.clone()
        });
    }
    let warning = out.is_empty().then(|| match label_filter {
        Some(f) => format!("no active assignments with label {f:?}"),
        None => "no active assignments".to_string(),
    });
    Ok(Export {
        records: crate::jsonl::to_string(&out)?,
        count: out.len(),
        warning,
    })
}
