//! Sentence template library and slot lexicons.
//!
//! Slots are written `{region}`, `{artery}`, `{tumour}`, `{size}`,
//! `{grade}`, `{finding}`.

use serde::{Deserialize, Serialize};

use super::Category;

/// What a sentence template contributes to a report's label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "category")]
pub enum Family {
    Header,
    History,
    Normal,
    /// An abnormality mentioned under negation; label-neutral.
    Negated,
    Abnormal(Category),
    Conclusion,
}

#[derive(Debug, Clone, Copy)]
pub struct Template {
    pub id: &'static str,
    pub family: Family,
    pub text: &'static str,
}

const fn t(id: &'static str, family: Family, text: &'static str) -> Template {
    Template { id, family, text }
}

pub const HEADERS: &[Template] = &[
    t("H0", Family::Header, "MRI BRAIN"),
    t("H1", Family::Header, "MRI Head :"),
    t(
        "H2",
        Family::Header,
        "MR HEAD Axial T2, coronal T1 pre and post gadolinium images.",
    ),
    t(
        "H3",
        Family::Header,
        "Technique: Axial T2, Coronal Pre- and Post-Gad T1, Axial Post-Gad, DWI Findings:",
    ),
    t(
        "H4",
        Family::Header,
        "MRI Head : Ax T2W, Sag T1W volume and Ax FLAIR were obtained.",
    ),
];

pub const HISTORIES: &[Template] = &[
    t("C0", Family::History, "Clinical History : First episode of psychosis."),
    t(
        "C1",
        Family::History,
        "Clinical Details: left sided headache, weakness, numbness. Specific question to be answered: rule out stroke",
    ),
    t("C2", Family::History, "Clinical Details: known {tumour}, follow up."),
    t(
        "C3",
        Family::History,
        "Clinical History : memory impairment, ? small vessel disease.",
    ),
    t(
        "C4",
        Family::History,
        "Clinical Details: sudden onset headache, ? aneurysm.",
    ),
];

pub const NORMALS: &[Template] = &[
    t("N0", Family::Normal, "Normal intracranial appearances."),
    t("N1", Family::Normal, "The ventricles are of normal size and configuration."),
    t("N2", Family::Normal, "The major intracranial vessels demonstrate normal flow related voids."),
    t("N3", Family::Normal, "There is minor generalised prominence of sulci and ventricles, probably within normal limits for age."),
    t("N4", Family::Normal, "There is a solitary non specific tiny T2 hyperintense focus within the {region}, a non specific finding of doubtful significance."),
    t("N5", Family::Normal, "Note is made of prominent arachnoid granulation within the {region}."),
    t("N6", Family::Normal, "The intracranial appearances are otherwise normal."),
    t("N7", Family::Normal, "Normal study."),
    t("N8", Family::Normal, "The posterior fossa structures are unremarkable."),
    t("N9", Family::Normal, "Correlation is made to the CT of the same date."),
    t("N10", Family::Normal, "The pituitary gland and craniocervical junction are normal."),
    t("N11", Family::Normal, "Scattered punctate foci of high signal within the white matter have a non specific appearance."),
    t("N12", Family::Normal, "Comparison is made with the previous study."),
];

pub const NEGATED: &[Template] = &[
    t(
        "G0",
        Family::Negated,
        "No focus of restricted diffusion is demonstrated to indicate an acute infarct.",
    ),
    t(
        "G1",
        Family::Negated,
        "There are no features suggestive of acute stroke.",
    ),
    t(
        "G2",
        Family::Negated,
        "No mass or other focal parenchymal abnormality is identified.",
    ),
    t(
        "G3",
        Family::Negated,
        "There is no evidence of aneurysm or vascular malformation.",
    ),
    t("G4", Family::Negated, "No evidence of haemorrhage or previous injury."),
    t("G5", Family::Negated, "There is no significant small vessel disease."),
    t("G6", Family::Negated, "No enhancing lesion is seen in the {region}."),
    t("G7", Family::Negated, "There is no {finding} in the {region}."),
];

pub const ABNORMALS: &[Template] = &[
    t("D0", Family::Abnormal(Category::Damage), "There is encephalomalacia in the {region} consistent with previous injury."),
    t("D1", Family::Abnormal(Category::Damage), "The enhancing scar tissue at the site of the previous craniotomy is unchanged in appearance."),
    t("D2", Family::Abnormal(Category::Damage), "There is gliosis within the {region} in keeping with previous haemorrhage."),
    t("V0", Family::Abnormal(Category::Vascular), "There is a {size} aneurysm arising from the {artery}."),
    t("V1", Family::Abnormal(Category::Vascular), "There is an arteriovenous malformation within the {region}."),
    t("V2", Family::Abnormal(Category::Vascular), "Recurrent aneurysm at the coiled {artery}."),
    t("M0", Family::Abnormal(Category::Mass), "There are stable appearances to the {tumour} within the {region}."),
    t("M1", Family::Abnormal(Category::Mass), "There is a {size} enhancing mass in the {region} in keeping with {tumour}."),
    t("M2", Family::Abnormal(Category::Mass), "The appearances are most in keeping with extensive meningeal metastatic disease."),
    t("S0", Family::Abnormal(Category::AcuteStroke), "There is restricted diffusion in the {region} in keeping with an acute infarct."),
    t("S1", Family::Abnormal(Category::AcuteStroke), "Acute infarct in the {artery} territory."),
    t("S2", Family::Abnormal(Category::AcuteStroke), "There are multiple foci of restricted diffusion consistent with acute embolic infarcts."),
    t("F0", Family::Abnormal(Category::Fazekas), "There are confluent T2/FLAIR hyperintensities within the white matter of both cerebral hemispheres, Fazekas grade {grade}."),
    t("F1", Family::Abnormal(Category::Fazekas), "There is extensive small vessel ischaemic change."),
    t("F2", Family::Abnormal(Category::Fazekas), "Moderate periventricular white matter disease in keeping with small vessel disease."),
];

pub const CONCLUSIONS_NORMAL: &[Template] = &[
    t("K0", Family::Conclusion, "Conclusion: Normal intracranial appearances."),
    t(
        "K1",
        Family::Conclusion,
        "CONCLUSION: No acute intracranial abnormality.",
    ),
];

pub const CONCLUSIONS_ABNORMAL: &[Template] = &[
    t(
        "K2",
        Family::Conclusion,
        "No further intracranial abnormalities are shown.",
    ),
    t(
        "K3",
        Family::Conclusion,
        "Impression: No evidence of disease recurrence.",
    ),
];

pub const REGIONS: &[&str] = &[
    "left frontal lobe",
    "right frontal lobe",
    "left parietal lobe",
    "right temporal lobe",
    "left occipital lobe",
    "right cerebellar hemisphere",
    "pons",
    "left basal ganglia",
    "right thalamus",
    "corpus callosum",
    "posterior fossa",
    "right centrum semiovale",
];

pub const ARTERIES: &[&str] = &[
    "left middle cerebral artery",
    "right middle cerebral artery",
    "anterior communicating artery",
    "basilar artery",
    "right posterior communicating artery",
    "left internal carotid artery",
];

pub const TUMOURS: &[&str] = &[
    "meningioma",
    "glioblastoma",
    "low grade glioma",
    "metastasis",
    "vestibular schwannoma",
    "pituitary macroadenoma",
];

pub const SIZES: &[&str] = &["5 mm", "8 mm", "12 mm", "2 cm", "3 cm"];

pub const GRADES: &[&str] = &["2", "3"];

/// Pathology nouns that appear under negation in normal reports.
pub const FINDINGS: &[&str] = &[
    "infarct",
    "aneurysm",
    "glioma",
    "meningioma",
    "encephalomalacia",
    "haemorrhage",
    "mass",
];

pub fn abnormal_for(category: Category) -> impl Iterator<Item = &'static Template> {
    ABNORMALS.iter().filter(move |t| t.family == Family::Abnormal(category))
}
