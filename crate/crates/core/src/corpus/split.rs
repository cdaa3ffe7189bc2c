use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{read_corpus, write_corpus, Report};
use crate::error::{Error, Result};

/// Patient-disjoint train/validation/test partitions.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<Report>,
    pub validation: Vec<Report>,
    pub test: Vec<Report>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitManifest {
    pub seed: u64,
    pub fractions: [f64; 3],
    pub sizes: [usize; 3],
    pub files: [String; 3],
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<String>,
}

const FILES: [&str; 3] = ["train.jsonl", "validation.jsonl", "test.jsonl"];

impl Split {
    pub fn partitions(&self) -> [&[Report]; 3] {
        [&self.train, &self.validation, &self.test]
    }

    pub fn sizes(&self) -> [usize; 3] {
        [self.train.len(), self.validation.len(), self.test.len()]
    }

    pub fn save(&self, dir: &Path, manifest: &SplitManifest) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        for (part, name) in self.partitions().into_iter().zip(FILES) {
            write_corpus(&dir.join(name), part)?;
        }
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(manifest)?;
        std::fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: &Path) -> Result<Self> {
        Ok(Split {
            train: read_corpus(&dir.join(FILES[0]))?,
            validation: read_corpus(&dir.join(FILES[1]))?,
            test: read_corpus(&dir.join(FILES[2]))?,
        })
    }

    pub fn manifest(&self, seed: u64, fractions: [f64; 3], source: Option<String>) -> SplitManifest {
        SplitManifest {
            seed,
            fractions,
            sizes: self.sizes(),
            files: FILES.map(String::from),
            source,
        }
    }
}

/// Assigns whole patients to partitions so no patient crosses a boundary.
///
/// Patients are shuffled by `seed`, stably ordered by descending report
/// count, then each goes to the partition furthest below its target size.
pub fn split_by_patient(reports: &[Report], fractions: [f64; 3], seed: u64) -> Result<Split> {
    if fractions.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
        return Err(Error::Split(format!("fractions must be positive, got {fractions:?}")));
    }
    let sum: f64 = fractions.iter().sum();
    if (sum - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions sum to {sum}, expected 1")));
    }

    let mut order: Vec<&str> = Vec::new();
    let mut counts: HashMap<&str, usize> = HashMap::new();
    for r in reports {
        let entry = counts.entry(r.patient_id.as_str()).or_insert(0);
        if *entry == 0 {
            order.push(r.patient_id.as_str());
        }
        *entry += 1;
    }
    if order.len() < 3 {
        return Err(Error::Split(format!(
            "need at least 3 distinct patients, found {}",
            order.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    order.shuffle(&mut rng);
    order.sort_by(|a, b| counts[b].cmp(&counts[a]));

    let total = reports.len() as f64;
    let targets = fractions.map(|f| f * total);
    let mut sizes = [0usize; 3];
    let mut members: [Vec<&str>; 3] = Default::default();
    for patient in order {
        let part = (0..3)
            .max_by(|&a, &b| {
                let da = targets[a] - sizes[a] as f64;
                let db = targets[b] - sizes[b] as f64;
                // Ties resolve to the lowest partition index.
                da.partial_cmp(&db).unwrap().then(b.cmp(&a))
            })
            .unwrap();
        sizes[part] += counts[patient];
        members[part].push(patient);
    }

    // Guarantee every partition holds at least one patient.
    for empty in 0..3 {
        if members[empty].is_empty() {
            let donor = (0..3)
                .filter(|&p| members[p].len() > 1)
                .max_by_key(|&p| sizes[p])
                .expect("at least 3 patients");
            let (pos, _) = members[donor]
                .iter()
                .enumerate()
                .min_by_key(|(i, p)| (counts[**p], std::cmp::Reverse(*i)))
                .unwrap();
            let moved = members[donor].remove(pos);
            sizes[donor] -= counts[moved];
            sizes[empty] += counts[moved];
            members[empty].push(moved);
        }
    }

    let mut assignment: HashMap<&str, usize> = HashMap::new();
    for (part, ids) in members.iter().enumerate() {
        for id in ids {
            assignment.insert(id, part);
        }
    }
    let mut parts: [Vec<Report>; 3] = Default::default();
    for r in reports {
        parts[assignment[r.patient_id.as_str()]].push(r.clone());
    }
    let [train, validation, test] = parts;
    Ok(Split {
        train,
        validation,
        test,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorSpec};
    use std::collections::HashSet;

    fn report(id: usize, patient: &str) -> Report {
        Report {
            report_id: format!("R{id}"),
            patient_id: patient.to_string(),
            text: "normal study".into(),
            coarse_label: Some(0),
            granular_labels: None,
            annotation: None,
        }
    }

    #[test]
    fn three_patients_one_each() {
        let reports = vec![report(1, "a"), report(2, "b"), report(3, "c")];
        let third = 1.0 / 3.0;
        let split = split_by_patient(&reports, [third, third, 1.0 - 2.0 * third], 0).unwrap();
        assert_eq!(split.sizes(), [1, 1, 1]);
    }

    #[test]
    fn too_few_patients() {
        let reports = vec![report(1, "a"), report(2, "b"), report(3, "b")];
        assert!(matches!(
            split_by_patient(&reports, [0.5, 0.25, 0.25], 0),
            Err(Error::Split(_))
        ));
    }

    #[test]
    fn bad_fractions() {
        let reports = vec![report(1, "a"), report(2, "b"), report(3, "c")];
        assert!(split_by_patient(&reports, [0.5, 0.5, 0.5], 0).is_err());
        assert!(split_by_patient(&reports, [1.0, 0.0, 0.0], 0).is_err());
    }

    #[test]
    fn dominant_patient_kept_whole() {
        // 40 of 100 reports belong to one patient.
        let mut reports: Vec<Report> = (0..40).map(|i| report(i, "big")).collect();
        reports.extend((40..100).map(|i| report(i, &format!("p{i}"))));
        let split = split_by_patient(&reports, [0.6, 0.2, 0.2], 3).unwrap();
        let holding: Vec<usize> = split
            .partitions()
            .iter()
            .enumerate()
            .filter(|(_, part)| part.iter().any(|r| r.patient_id == "big"))
            .map(|(i, _)| i)
            .collect();
        assert_eq!(holding.len(), 1);
        let part = split.partitions()[holding[0]];
        assert_eq!(part.iter().filter(|r| r.patient_id == "big").count(), 40);
    }

    #[test]
    fn benchmark_sized_split() {
        let reports = generate_corpus(&GeneratorSpec::default()).unwrap();
        let split = split_by_patient(&reports, [0.75, 0.10, 0.15], 7).unwrap();
        let sizes = split.sizes();
        let max_group = 4;
        for (got, want) in sizes.iter().zip([1500usize, 200, 300]) {
            assert!(got.abs_diff(want) <= max_group, "{sizes:?}");
        }
        let sets: Vec<HashSet<&str>> = split
            .partitions()
            .iter()
            .map(|p| p.iter().map(|r| r.patient_id.as_str()).collect())
            .collect();
        assert!(sets[0].is_disjoint(&sets[1]));
        assert!(sets[0].is_disjoint(&sets[2]));
        assert!(sets[1].is_disjoint(&sets[2]));
    }
}
