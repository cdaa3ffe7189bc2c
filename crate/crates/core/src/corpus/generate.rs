use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::templates::{self, Family, Template};
use super::{Category, GeneratorSpec, Report};
use crate::error::{Error, Result};

/// Which template produced one sentence of a generated report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SentenceOrigin {
    pub template_id: String,
    pub family: Family,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportProvenance {
    pub report_id: String,
    pub sentences: Vec<SentenceOrigin>,
}

impl ReportProvenance {
    /// Categories asserted by non-negated abnormal sentences.
    pub fn asserted_categories(&self) -> Vec<Category> {
        let mut out: Vec<Category> = self
            .sentences
            .iter()
            .filter_map(|s| match s.family {
                Family::Abnormal(c) => Some(c),
                _ => None,
            })
            .collect();
        out.sort();
        out.dedup();
        out
    }

    pub fn has_negation(&self) -> bool {
        self.sentences.iter().any(|s| s.family == Family::Negated)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GeneratedCorpus {
    pub reports: Vec<Report>,
    pub provenance: Vec<ReportProvenance>,
}

pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Vec<Report>> {
    Ok(generate_with_provenance(spec)?.reports)
}

pub fn generate_with_provenance(spec: &GeneratorSpec) -> Result<GeneratedCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let weights: Vec<f64> = spec.reports_per_patient.iter().map(|&(_, w)| w).collect();
    let per_patient = WeightedIndex::new(&weights).map_err(|e| Error::Config(format!("patient weights: {e}")))?;

    let mut reports = Vec::with_capacity(spec.n_reports);
    let mut provenance = Vec::with_capacity(spec.n_reports);
    let mut patient = 0usize;
    while reports.len() < spec.n_reports {
        patient += 1;
        let count = spec.reports_per_patient[per_patient.sample(&mut rng)].0;
        for _ in 0..count.min(spec.n_reports - reports.len()) {
            let report_id = format!("R{:06}", reports.len() + 1);
            let abnormal = rng.random::<f64>() < spec.abnormal_fraction;
            let (sentences, origins) = if abnormal {
                abnormal_report(&mut rng, spec.negation_rate)
            } else {
                normal_report(&mut rng, spec.negation_rate)
            };
            let prov = ReportProvenance {
                report_id: report_id.clone(),
                sentences: origins,
            };
            let mut granular = [0u8; 5];
            for c in prov.asserted_categories() {
                granular[c.index()] = 1;
            }
            reports.push(Report {
                report_id,
                patient_id: format!("P{patient:05}"),
                text: sentences.join(" "),
                coarse_label: Some(abnormal as u8),
                granular_labels: Some(granular),
                annotation: None,
            });
            provenance.push(prov);
        }
    }
    Ok(GeneratedCorpus { reports, provenance })
}

type Sentences = (Vec<String>, Vec<SentenceOrigin>);

fn push(rng: &mut ChaCha8Rng, out: &mut Sentences, template: &Template) {
    out.0.push(fill(rng, template.text));
    out.1.push(SentenceOrigin {
        template_id: template.id.to_string(),
        family: template.family,
    });
}

fn pick<'a>(rng: &mut ChaCha8Rng, pool: &'a [Template]) -> &'a Template {
    pool.choose(rng).expect("non-empty template pool")
}

fn preamble(rng: &mut ChaCha8Rng, out: &mut Sentences) {
    if rng.random::<f64>() < 0.3 {
        {
            let t = pick(rng, templates::HISTORIES);
            push(rng, out, t);
        }
    }
    if rng.random::<f64>() < 0.6 {
        {
            let t = pick(rng, templates::HEADERS);
            push(rng, out, t);
        }
    }
}

fn normal_report(rng: &mut ChaCha8Rng, negation_rate: f64) -> Sentences {
    let mut out = (Vec::new(), Vec::new());
    preamble(rng, &mut out);
    let mut body: Vec<&Template> = Vec::new();
    let n_normal = rng.random_range(1..=4);
    let mut normals: Vec<&Template> = templates::NORMALS.iter().collect();
    normals.shuffle(rng);
    body.extend(normals.into_iter().take(n_normal));
    if rng.random::<f64>() < negation_rate {
        let n_neg = rng.random_range(1..=2);
        let mut negs: Vec<&Template> = templates::NEGATED.iter().collect();
        negs.shuffle(rng);
        body.extend(negs.into_iter().take(n_neg));
    }
    body.shuffle(rng);
    for template in body {
        push(rng, &mut out, template);
    }
    if rng.random::<f64>() < 0.4 {
        {
            let t = pick(rng, templates::CONCLUSIONS_NORMAL);
            push(rng, &mut out, t);
        }
    }
    out
}

fn abnormal_report(rng: &mut ChaCha8Rng, negation_rate: f64) -> Sentences {
    let mut out = (Vec::new(), Vec::new());
    preamble(rng, &mut out);
    let n_categories = if rng.random::<f64>() < 0.75 { 1 } else { 2 };
    let mut categories = Category::ALL.to_vec();
    categories.shuffle(rng);
    let mut body: Vec<&Template> = Vec::new();
    for &category in categories.iter().take(n_categories) {
        let pool: Vec<&Template> = templates::abnormal_for(category).collect();
        body.push(pool.choose(rng).expect("category has templates"));
    }
    // Filler excludes the sentences that assert an entirely normal study.
    let filler: Vec<&Template> = templates::NORMALS
        .iter()
        .filter(|t| !matches!(t.id, "N0" | "N6" | "N7"))
        .collect();
    for _ in 0..rng.random_range(0..=2) {
        body.push(filler.choose(rng).expect("filler"));
    }
    if rng.random::<f64>() < negation_rate * 0.5 {
        body.push(pick(rng, templates::NEGATED));
    }
    body.shuffle(rng);
    for template in body {
        push(rng, &mut out, template);
    }
    if rng.random::<f64>() < 0.3 {
        {
            let t = pick(rng, templates::CONCLUSIONS_ABNORMAL);
            push(rng, &mut out, t);
        }
    }
    out
}

fn fill(rng: &mut ChaCha8Rng, text: &str) -> String {
    let mut out = String::with_capacity(text.len() + 32);
    let mut rest = text;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let end = rest[start..].find('}').expect("unterminated slot") + start;
        let pool = match &rest[start + 1..end] {
            "region" => templates::REGIONS,
            "artery" => templates::ARTERIES,
            "tumour" => templates::TUMOURS,
            "size" => templates::SIZES,
            "grade" => templates::GRADES,
            "finding" => templates::FINDINGS,
            other => panic!("unknown template slot {other}"),
        };
        out.push_str(pool.choose(rng).expect("non-empty lexicon"));
        rest = &rest[end + 1..];
    }
    out.push_str(rest);
    out
}
