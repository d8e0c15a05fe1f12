//! Sample and manifest data model.
//!
//! A manifest is a UTF-8 CSV file with the header
//! `sample_id,image_path,dataset,class,patient_id,location,uploader,split`
//! where an empty cell means "absent". An optional JSON sidecar with the same
//! stem (`corpus.csv` → `corpus.json`) declares the corpora, their roles and
//! the admitted class labels.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MANIFEST_COLUMNS: [&str; 8] = [
    "sample_id",
    "image_path",
    "dataset",
    "class",
    "patient_id",
    "location",
    "uploader",
    "split",
];

/// Shared key for every sample with neither uploader nor location metadata.
pub const UNKNOWN_LOCATION_KEY: &str = "<unknown-location>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
    Unsplit,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
            Split::Unsplit => "unsplit",
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Split {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            "unsplit" | "" => Ok(Split::Unsplit),
            other => Err(format!("unknown split `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CorpusRole {
    LargeSource,
    CvTarget,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Corpus {
    pub name: String,
    pub role: CorpusRole,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub dataset_label: String,
    pub class_label: String,
    pub patient_id: Option<String>,
    pub location: Option<String>,
    pub uploader: Option<String>,
    pub split: Split,
}

#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Manifest {
    pub corpora: Vec<Corpus>,
    pub samples: Vec<Sample>,
    pub class_filter: BTreeSet<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Sidecar {
    corpora: Vec<Corpus>,
    #[serde(default)]
    class_filter: Vec<String>,
}

impl Manifest {
    pub fn corpus(&self, name: &str) -> Option<&Corpus> {
        self.corpora.iter().find(|c| c.name == name)
    }

    /// The single corpus with role cv-target, if the manifest has exactly one.
    pub fn cv_target(&self) -> Option<&Corpus> {
        let mut it = self.corpora.iter().filter(|c| c.role == CorpusRole::CvTarget);
        match (it.next(), it.next()) {
            (Some(c), None) => Some(c),
            _ => None,
        }
    }

    pub fn large_sources(&self) -> impl Iterator<Item = &Corpus> {
        self.corpora
            .iter()
            .filter(|c| c.role == CorpusRole::LargeSource)
    }

    pub fn samples_of<'a>(&'a self, corpus: &'a str) -> impl Iterator<Item = &'a Sample> + 'a {
        self.samples.iter().filter(move |s| s.dataset_label == corpus)
    }

    pub fn sample(&self, sample_id: &str) -> Option<&Sample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }
}

fn sidecar_path(manifest: &Path) -> PathBuf {
    manifest.with_extension("json")
}

fn opt(cell: &str) -> Option<String> {
    if cell.trim().is_empty() {
        None
    } else {
        Some(cell.to_string())
    }
}

/// Load a manifest CSV (plus its sidecar, when present). Row order is preserved.
pub fn load_manifest(path: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let sidecar = {
        let p = sidecar_path(path);
        if p.exists() {
            let raw = fs::read_to_string(&p).map_err(|e| Error::io(&p, e))?;
            Some(serde_json::from_str::<Sidecar>(&raw)?)
        } else {
            None
        }
    };
    parse_manifest(&text, sidecar)
}

fn parse_manifest(text: &str, sidecar: Option<Sidecar>) -> Result<Manifest> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::Headers)
        .from_reader(text.as_bytes());
    let headers = reader.headers()?.clone();
    let mut col = HashMap::new();
    for name in MANIFEST_COLUMNS {
        match headers.iter().position(|h| h == name) {
            Some(i) => {
                col.insert(name, i);
            }
            None => {
                let column = if name == "dataset" {
                    "dataset (dataset_label)".to_string()
                } else if name == "class" {
                    "class (class_label)".to_string()
                } else {
                    name.to_string()
                };
                return Err(Error::MissingColumn { column });
            }
        }
    }

    let mut samples = Vec::new();
    for (i, rec) in reader.records().enumerate() {
        let rec = rec?;
        let row = i + 2;
        let get = |name: &str| rec.get(col[name]).unwrap_or("");
        let sample_id = get("sample_id").trim().to_string();
        if sample_id.is_empty() {
            return Err(Error::Schema {
                row,
                msg: "empty sample_id".into(),
            });
        }
        let split = get("split")
            .parse::<Split>()
            .map_err(|msg| Error::Schema { row, msg })?;
        samples.push(Sample {
            sample_id,
            image_path: PathBuf::from(get("image_path").trim()),
            dataset_label: get("dataset").trim().to_string(),
            class_label: get("class").trim().to_string(),
            patient_id: opt(get("patient_id")),
            location: opt(get("location")),
            uploader: opt(get("uploader")),
            split,
        });
    }

    let mut seen = HashSet::new();
    let mut dups = Vec::new();
    for s in &samples {
        if !seen.insert(s.sample_id.as_str()) && !dups.contains(&s.sample_id) {
            dups.push(s.sample_id.clone());
        }
    }
    if !dups.is_empty() {
        return Err(Error::DuplicateIds { ids: dups });
    }

    let (corpora, class_filter) = match sidecar {
        Some(sc) => {
            for (i, s) in samples.iter().enumerate() {
                if !sc.corpora.iter().any(|c| c.name == s.dataset_label) {
                    return Err(Error::UnknownCorpus {
                        name: s.dataset_label.clone(),
                        row: i + 2,
                    });
                }
            }
            (sc.corpora, sc.class_filter.into_iter().collect())
        }
        None => (infer_corpora(&samples), BTreeSet::new()),
    };

    Ok(Manifest {
        corpora,
        samples,
        class_filter,
    })
}

/// Without a sidecar, corpora appear in first-seen order and a corpus whose
/// samples are all unsplit takes the cv-target role.
fn infer_corpora(samples: &[Sample]) -> Vec<Corpus> {
    let mut names: Vec<&str> = Vec::new();
    for s in samples {
        if !names.contains(&s.dataset_label.as_str()) {
            names.push(&s.dataset_label);
        }
    }
    names
        .into_iter()
        .map(|name| {
            let all_unsplit = samples
                .iter()
                .filter(|s| s.dataset_label == name)
                .all(|s| s.split == Split::Unsplit);
            Corpus {
                name: name.to_string(),
                role: if all_unsplit {
                    CorpusRole::CvTarget
                } else {
                    CorpusRole::LargeSource
                },
            }
        })
        .collect()
}

/// Write the manifest CSV and its JSON sidecar.
pub fn save_manifest(m: &Manifest, path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().from_writer(Vec::new());
    w.write_record(MANIFEST_COLUMNS)?;
    for s in &m.samples {
        w.write_record([
            s.sample_id.as_str(),
            &s.image_path.to_string_lossy(),
            &s.dataset_label,
            &s.class_label,
            s.patient_id.as_deref().unwrap_or(""),
            s.location.as_deref().unwrap_or(""),
            s.uploader.as_deref().unwrap_or(""),
            s.split.as_str(),
        ])?;
    }
    let bytes = w
        .into_inner()
        .map_err(|e| Error::io(path, e.into_error()))?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))?;

    let sidecar = Sidecar {
        corpora: m.corpora.clone(),
        class_filter: m.class_filter.iter().cloned().collect(),
    };
    let sp = sidecar_path(path);
    fs::write(&sp, serde_json::to_string_pretty(&sidecar)?).map_err(|e| Error::io(&sp, e))?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusSummary {
    pub name: String,
    pub role: Option<CorpusRole>,
    pub n_samples: usize,
    /// class → split → count
    pub counts: BTreeMap<String, BTreeMap<String, usize>>,
    pub missing_patient_id: usize,
    pub missing_location: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    pub corpora: Vec<CorpusSummary>,
    pub violations: Vec<String>,
    pub warnings: Vec<String>,
    pub cross_corpus_duplicate_patients: usize,
}

impl ValidationReport {
    pub fn is_valid(&self) -> bool {
        self.violations.is_empty()
    }
}

/// Check a manifest against its invariants. Problems are reported, never thrown.
pub fn validate_manifest(m: &Manifest) -> ValidationReport {
    let mut report = ValidationReport::default();

    let mut order: Vec<String> = m.corpora.iter().map(|c| c.name.clone()).collect();
    for s in &m.samples {
        if !order.contains(&s.dataset_label) {
            order.push(s.dataset_label.clone());
        }
    }
    for name in &order {
        let role = m.corpus(name).map(|c| c.role);
        let mut summary = CorpusSummary {
            name: name.clone(),
            role,
            ..Default::default()
        };
        for s in m.samples_of(name) {
            summary.n_samples += 1;
            *summary
                .counts
                .entry(s.class_label.clone())
                .or_default()
                .entry(s.split.to_string())
                .or_default() += 1;
            summary.missing_patient_id += s.patient_id.is_none() as usize;
            summary.missing_location += s.location.is_none() as usize;
        }
        if role.is_none() {
            report
                .violations
                .push(format!("unknown corpus `{name}` ({} samples)", summary.n_samples));
        }
        report.corpora.push(summary);
    }

    if !m.corpora.is_empty() {
        let n_cv = m
            .corpora
            .iter()
            .filter(|c| c.role == CorpusRole::CvTarget)
            .count();
        if n_cv != 1 {
            report.violations.push(format!(
                "exactly one corpus must have role cv-target (found {n_cv})"
            ));
        }
    }
    for c in &m.corpora {
        let bad = m
            .samples_of(&c.name)
            .filter(|s| (s.split == Split::Unsplit) != (c.role == CorpusRole::CvTarget))
            .count();
        if bad > 0 {
            let msg = match c.role {
                CorpusRole::CvTarget => format!(
                    "cv-target must be unsplit: corpus `{}` has {bad} samples with a train/test split",
                    c.name
                ),
                CorpusRole::LargeSource => format!(
                    "unsplit samples are only allowed in the cv-target corpus: `{}` has {bad}",
                    c.name
                ),
            };
            report.violations.push(msg);
        }
    }

    let off_filter: BTreeSet<&str> = m
        .samples
        .iter()
        .filter(|s| !m.class_filter.is_empty() && !m.class_filter.contains(&s.class_label))
        .map(|s| s.class_label.as_str())
        .collect();
    for class in off_filter {
        report
            .violations
            .push(format!("class `{class}` is not in the class filter"));
    }

    let mut seen = HashSet::new();
    let mut dup_ids = BTreeSet::new();
    for s in &m.samples {
        if !seen.insert(&s.sample_id) {
            dup_ids.insert(s.sample_id.as_str());
        }
    }
    if !dup_ids.is_empty() {
        report.violations.push(format!(
            "duplicate sample ids: {}",
            dup_ids.into_iter().collect::<Vec<_>>().join(", ")
        ));
    }

    let mut corpora_of: HashMap<&str, BTreeSet<&str>> = HashMap::new();
    for s in &m.samples {
        if let Some(p) = &s.patient_id {
            corpora_of.entry(p).or_default().insert(&s.dataset_label);
        }
    }
    let shared = m
        .samples
        .iter()
        .filter(|s| {
            s.patient_id
                .as_deref()
                .is_some_and(|p| corpora_of[p].len() > 1)
        })
        .count();
    if shared > 0 {
        report.warnings.push(format!(
            "{shared} samples share a patient_id with another corpus"
        ));
    }
    report.cross_corpus_duplicate_patients = shared;
    report
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GroupProtocol {
    Patient,
    Doctor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GroupKind {
    Patient,
    Uploader,
    UnknownLocationSentinel,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct GroupKey {
    pub key: String,
    pub kind: GroupKind,
}

impl fmt::Display for GroupKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.key)
    }
}

/// Lowercase, trim and collapse internal whitespace.
pub fn normalize_free_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn derive_group_key(s: &Sample, protocol: GroupProtocol) -> Result<GroupKey> {
    match protocol {
        GroupProtocol::Patient => match &s.patient_id {
            Some(p) if !p.trim().is_empty() => Ok(GroupKey {
                key: p.trim().to_string(),
                kind: GroupKind::Patient,
            }),
            _ => Err(Error::MissingPatient {
                sample_id: s.sample_id.clone(),
            }),
        },
        GroupProtocol::Doctor => {
            let key = [&s.uploader, &s.location]
                .into_iter()
                .flatten()
                .map(|v| normalize_free_text(v))
                .find(|v| !v.is_empty());
            Ok(match key {
                Some(key) => GroupKey {
                    key,
                    kind: GroupKind::Uploader,
                },
                None => GroupKey {
                    key: UNKNOWN_LOCATION_KEY.to_string(),
                    kind: GroupKind::UnknownLocationSentinel,
                },
            })
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub(crate) fn sample(id: &str, corpus: &str, split: Split) -> Sample {
        Sample {
            sample_id: id.into(),
            image_path: format!("img/{id}.png").into(),
            dataset_label: corpus.into(),
            class_label: "No Finding".into(),
            patient_id: None,
            location: None,
            uploader: None,
            split,
        }
    }

    const TWO_ROWS: &str = "sample_id,image_path,dataset,class,patient_id,location,uploader,split\n\
        a,img/a.png,NIH,No Finding,P1,,,train\n\
        b,img/b.png,COV,COVID-19,P2,Milan,dr x,unsplit\n";

    #[test]
    fn parses_two_rows_in_order() {
        let m = parse_manifest(TWO_ROWS, None).unwrap();
        assert_eq!(m.samples.len(), 2);
        assert_eq!(m.samples[0].sample_id, "a");
        assert_eq!(m.samples[1].sample_id, "b");
        assert_eq!(m.samples[1].location.as_deref(), Some("Milan"));
        assert_eq!(m.samples[0].location, None);
        assert_eq!(m.cv_target().unwrap().name, "COV");
        assert!(validate_manifest(&m).is_valid());
    }

    #[test]
    fn missing_dataset_column_is_named() {
        let text = "sample_id,image_path,class,patient_id,location,uploader,split\n";
        let err = parse_manifest(text, None).unwrap_err();
        assert!(matches!(err, Error::MissingColumn { .. }));
        assert!(err.to_string().contains("dataset_label"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_listed() {
        let text = format!("{TWO_ROWS}a,img/c.png,NIH,No Finding,,,,test\n");
        match parse_manifest(&text, None).unwrap_err() {
            Error::DuplicateIds { ids } => assert_eq!(ids, vec!["a".to_string()]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn unknown_corpus_against_sidecar() {
        let sc = Sidecar {
            corpora: vec![Corpus {
                name: "NIH".into(),
                role: CorpusRole::LargeSource,
            }],
            class_filter: vec![],
        };
        let err = parse_manifest(TWO_ROWS, Some(sc)).unwrap_err();
        assert!(matches!(err, Error::UnknownCorpus { ref name, row: 3 } if name == "COV"));
    }

    #[test]
    fn empty_manifest_validates_clean() {
        let r = validate_manifest(&Manifest::default());
        assert!(r.corpora.is_empty());
        assert!(r.violations.is_empty());
        assert_eq!(r.cross_corpus_duplicate_patients, 0);
    }

    #[test]
    fn split_cv_target_is_a_violation() {
        let mut m = parse_manifest(TWO_ROWS, None).unwrap();
        m.samples[1].split = Split::Train;
        let r = validate_manifest(&m);
        assert!(r
            .violations
            .iter()
            .any(|v| v.contains("cv-target must be unsplit")));
    }

    #[test]
    fn cross_corpus_patient_duplicates_are_warned() {
        let mut m = parse_manifest(TWO_ROWS, None).unwrap();
        let mut c = sample("c", "NIH", Split::Test);
        c.patient_id = Some("P9".into());
        let mut d = sample("d", "COV", Split::Unsplit);
        d.patient_id = Some("P9".into());
        let mut e = sample("e", "COV", Split::Unsplit);
        e.patient_id = Some("P9".into());
        m.samples.extend([c, d, e]);
        let r = validate_manifest(&m);
        assert_eq!(r.cross_corpus_duplicate_patients, 3);
        assert_eq!(r.warnings.len(), 1);
        // validation never mutates
        assert_eq!(m.samples.len(), 5);
    }

    #[test]
    fn patient_key_is_identity() {
        let mut s = sample("x", "COV", Split::Unsplit);
        s.patient_id = Some("P7".into());
        let k = derive_group_key(&s, GroupProtocol::Patient).unwrap();
        assert_eq!(k.key, "P7");
        assert_eq!(k.kind, GroupKind::Patient);
    }

    #[test]
    fn patient_key_requires_patient_id() {
        let s = sample("x", "COV", Split::Unsplit);
        let err = derive_group_key(&s, GroupProtocol::Patient).unwrap_err();
        assert!(err.to_string().contains("`x`"));
    }

    #[test]
    fn metadata_free_samples_share_the_sentinel() {
        let a = derive_group_key(&sample("a", "COV", Split::Unsplit), GroupProtocol::Doctor).unwrap();
        let b = derive_group_key(&sample("b", "COV", Split::Unsplit), GroupProtocol::Doctor).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kind, GroupKind::UnknownLocationSentinel);
    }

    #[test]
    fn uploader_normalization_and_location_fallback() {
        let mut a = sample("a", "COV", Split::Unsplit);
        a.uploader = Some("  Dr.  Rossi ".into());
        let mut b = sample("b", "COV", Split::Unsplit);
        b.uploader = Some("dr. rossi".into());
        b.location = Some("Rome".into());
        let mut c = sample("c", "COV", Split::Unsplit);
        c.location = Some("Wuhan,  China".into());
        let ka = derive_group_key(&a, GroupProtocol::Doctor).unwrap();
        let kb = derive_group_key(&b, GroupProtocol::Doctor).unwrap();
        let kc = derive_group_key(&c, GroupProtocol::Doctor).unwrap();
        assert_eq!(ka, kb);
        assert_eq!(kc.key, "wuhan, china");
        assert_eq!(kc.kind, GroupKind::Uploader);
    }

    #[test]
    fn twenty_samples_five_doctor_groups() {
        // 4 distinct uploaders over 17 samples + 3 metadata-free samples.
        let mut keys = HashSet::new();
        let mut expected = HashSet::new();
        for i in 0..20 {
            let mut s = sample(&format!("s{i}"), "COV", Split::Unsplit);
            if i < 17 {
                let name = format!("Doctor {}", i % 4);
                expected.insert(normalize_free_text(&name));
                s.uploader = Some(if i % 2 == 0 { name.to_uppercase() } else { name });
            } else {
                expected.insert(UNKNOWN_LOCATION_KEY.to_string());
            }
            keys.insert(derive_group_key(&s, GroupProtocol::Doctor).unwrap().key);
        }
        assert_eq!(keys, expected);
        assert_eq!(keys.len(), 5);
    }
}
