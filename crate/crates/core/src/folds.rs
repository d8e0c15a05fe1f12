//! Leakage-aware cross-validation folds over the cv-target corpus, and
//! subset sampling from the large corpora.

use std::collections::{BTreeMap, HashMap};
use std::io::{Read, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::dataset::{derive_group_key, GroupKey, GroupKind, GroupProtocol, Sample};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FoldProtocol {
    /// No patient spans two folds.
    #[serde(rename = "pat-out")]
    PatOut,
    /// All scans from one uploader (or location) share a fold.
    #[serde(rename = "doc-out")]
    DocOut,
}

impl FoldProtocol {
    pub fn group_protocol(self) -> GroupProtocol {
        match self {
            FoldProtocol::PatOut => GroupProtocol::Patient,
            FoldProtocol::DocOut => GroupProtocol::Doctor,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            FoldProtocol::PatOut => "pat-out",
            FoldProtocol::DocOut => "doc-out",
        }
    }
}

impl std::str::FromStr for FoldProtocol {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "pat-out" | "patout" => Ok(FoldProtocol::PatOut),
            "doc-out" | "docout" => Ok(FoldProtocol::DocOut),
            other => Err(format!("unknown fold protocol `{other}`")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSpec {
    pub protocol: FoldProtocol,
    pub n_folds_target: usize,
    pub min_fold_size: usize,
    pub last_fold_exempt: bool,
    pub seed: u64,
}

impl FoldSpec {
    /// Patient grouping, 11 folds of at least 13 samples.
    pub fn pat_out(seed: u64) -> Self {
        Self {
            protocol: FoldProtocol::PatOut,
            n_folds_target: 11,
            min_fold_size: 13,
            last_fold_exempt: false,
            seed,
        }
    }

    /// Uploader grouping, 11 folds of more than 10 samples except the last.
    pub fn doc_out(seed: u64) -> Self {
        Self {
            protocol: FoldProtocol::DocOut,
            n_folds_target: 11,
            min_fold_size: 11,
            last_fold_exempt: true,
            seed,
        }
    }

    pub fn for_protocol(protocol: FoldProtocol, seed: u64) -> Self {
        match protocol {
            FoldProtocol::PatOut => Self::pat_out(seed),
            FoldProtocol::DocOut => Self::doc_out(seed),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FoldEntry {
    pub sample_id: String,
    pub fold: usize,
    pub group: GroupKey,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldAssignment {
    pub n_folds: usize,
    /// One entry per input sample, in input order.
    pub entries: Vec<FoldEntry>,
    pub notes: Vec<String>,
    pub warnings: Vec<String>,
}

impl FoldAssignment {
    pub fn fold_of(&self, sample_id: &str) -> Option<usize> {
        self.entries
            .iter()
            .find(|e| e.sample_id == sample_id)
            .map(|e| e.fold)
    }

    pub fn fold_sizes(&self) -> Vec<usize> {
        let mut sizes = vec![0; self.n_folds];
        for e in &self.entries {
            sizes[e.fold] += 1;
        }
        sizes
    }

    pub fn lookup(&self) -> HashMap<&str, usize> {
        self.entries
            .iter()
            .map(|e| (e.sample_id.as_str(), e.fold))
            .collect()
    }

    /// Delimited text `sample_id,fold,group_key`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        w.write_record(["sample_id", "fold", "group_key"])?;
        for e in &self.entries {
            w.write_record([e.sample_id.as_str(), &e.fold.to_string(), &e.group.key])?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    /// Read back a `sample_id,fold,group_key` file. Group kinds are recovered
    /// from the sentinel key; other keys are reported as `kind`.
    pub fn read_csv<R: Read>(r: R, kind: GroupKind) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let mut entries = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let row = i + 2;
            if rec.len() != 3 {
                return Err(Error::Format {
                    row,
                    msg: "expected 3 columns".into(),
                });
            }
            let fold = rec[1].parse::<usize>().map_err(|e| Error::Format {
                row,
                msg: format!("bad fold index: {e}"),
            })?;
            let key = rec[2].to_string();
            let kind = if key == crate::dataset::UNKNOWN_LOCATION_KEY {
                GroupKind::UnknownLocationSentinel
            } else {
                kind
            };
            entries.push(FoldEntry {
                sample_id: rec[0].to_string(),
                fold,
                group: GroupKey { key, kind },
            });
        }
        let n_folds = entries.iter().map(|e| e.fold + 1).max().unwrap_or(0);
        Ok(Self {
            n_folds,
            entries,
            notes: vec![],
            warnings: vec![],
        })
    }
}

/// Assign whole groups to folds.
///
/// Groups are shuffled with the spec seed, stably sorted by descending size
/// and each placed in the currently smallest fold. Folds violating the size
/// minimum are then merged, smallest into next smallest, until every fold
/// (except the smallest one, when `last_fold_exempt`) meets it. Folds are
/// numbered by descending size, so the exempt fold is always the last.
pub fn build_folds_grouped(samples: &[Sample], spec: &FoldSpec) -> Result<FoldAssignment> {
    if samples.is_empty() {
        return Err(Error::Input("cannot build folds over zero samples".into()));
    }
    let n = samples.len();
    if n < spec.min_fold_size {
        return Err(Error::Infeasible(format!(
            "{n} samples cannot fill a single fold of minimum size {}",
            spec.min_fold_size
        )));
    }
    if spec.n_folds_target == 0 {
        return Err(Error::Config("n_folds_target must be >= 1".into()));
    }

    let protocol = spec.protocol.group_protocol();
    let mut keys = Vec::with_capacity(n);
    let mut groups: Vec<(GroupKey, Vec<usize>)> = Vec::new();
    let mut index: HashMap<GroupKey, usize> = HashMap::new();
    for (i, s) in samples.iter().enumerate() {
        let key = derive_group_key(s, protocol)?;
        let g = *index.entry(key.clone()).or_insert_with(|| {
            groups.push((key.clone(), Vec::new()));
            groups.len() - 1
        });
        groups[g].1.push(i);
        keys.push(key);
    }

    let mut warnings = Vec::new();
    let mut notes = Vec::new();
    let largest = groups.iter().map(|g| g.1.len()).max().unwrap_or(0);
    if largest > n.div_ceil(2) {
        warnings.push(format!(
            "dominant group: one group holds {largest} of {n} samples"
        ));
    }

    let mut order: Vec<usize> = (0..groups.len()).collect();
    order.shuffle(&mut seed::rng(seed::derive(spec.seed, "fold-packing", 0)));
    order.sort_by_key(|&g| std::cmp::Reverse(groups[g].1.len()));

    let k = spec.n_folds_target.min(groups.len()).max(1);
    let mut folds: Vec<Vec<usize>> = vec![Vec::new(); k];
    let mut sizes = vec![0usize; k];
    for g in order {
        let target = (0..k).min_by_key(|&f| (sizes[f], f)).unwrap();
        folds[target].push(g);
        sizes[target] += groups[g].1.len();
    }

    let size_of = |f: &Vec<usize>| f.iter().map(|&g| groups[g].1.len()).sum::<usize>();
    loop {
        folds.retain(|f| !f.is_empty());
        folds.sort_by_key(|f| std::cmp::Reverse(size_of(f)));
        let last = folds.len() - 1;
        let violated = folds.iter().enumerate().any(|(i, f)| {
            size_of(f) < spec.min_fold_size && !(spec.last_fold_exempt && i == last)
        });
        if !violated || folds.len() == 1 {
            break;
        }
        let smallest = folds.pop().unwrap();
        folds.last_mut().unwrap().extend(smallest);
    }

    if folds.len() != spec.n_folds_target {
        notes.push(format!(
            "built {} folds instead of the requested {} to satisfy the size constraints",
            folds.len(),
            spec.n_folds_target
        ));
    }

    let mut fold_of_group = vec![0; groups.len()];
    for (f, members) in folds.iter().enumerate() {
        for &g in members {
            fold_of_group[g] = f;
        }
    }
    let entries = samples
        .iter()
        .zip(keys)
        .map(|(s, key)| FoldEntry {
            sample_id: s.sample_id.clone(),
            fold: fold_of_group[index[&key]],
            group: key,
        })
        .collect();

    Ok(FoldAssignment {
        n_folds: folds.len(),
        entries,
        notes,
        warnings,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SubsetMode {
    /// Each large corpus contributes `ratio × cov_train_count` samples.
    PerCorpus,
    /// `ratio × cov_train_count` samples in total, split evenly across corpora.
    Aggregate,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetPlan {
    pub ratio: usize,
    pub mode: SubsetMode,
    pub seed: u64,
}

impl Default for SubsetPlan {
    fn default() -> Self {
        Self {
            ratio: 2,
            mode: SubsetMode::PerCorpus,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SubsetDraw<'a> {
    pub samples: Vec<&'a Sample>,
    pub per_corpus_counts: BTreeMap<String, usize>,
    pub warnings: Vec<String>,
}

/// Draw training samples from the large corpora without replacement.
/// Corpora are visited in name order; drawn samples keep their input order.
pub fn sample_training_subset<'a>(
    cov_train_count: usize,
    large_corpora: &BTreeMap<String, Vec<&'a Sample>>,
    plan: &SubsetPlan,
) -> SubsetDraw<'a> {
    let total = plan.ratio * cov_train_count;
    let k = large_corpora.len().max(1);
    let mut draw = SubsetDraw {
        samples: Vec::new(),
        per_corpus_counts: BTreeMap::new(),
        warnings: Vec::new(),
    };
    for (i, (name, pool)) in large_corpora.iter().enumerate() {
        let wanted = match plan.mode {
            SubsetMode::PerCorpus => total,
            SubsetMode::Aggregate => total / k + usize::from(i < total % k),
        };
        let take = if wanted > pool.len() {
            draw.warnings.push(format!(
                "corpus `{name}` has {} training samples, {wanted} requested; using all",
                pool.len()
            ));
            pool.len()
        } else {
            wanted
        };
        let mut rng = seed::rng(seed::derive(plan.seed, name, 0));
        let mut idx = rand::seq::index::sample(&mut rng, pool.len(), take).into_vec();
        idx.sort_unstable();
        draw.samples.extend(idx.into_iter().map(|j| pool[j]));
        draw.per_corpus_counts.insert(name.clone(), take);
    }
    draw
}
