//! Merged prediction pools, class-vs-class ROC-AUC and confusion matrices.

use std::collections::{BTreeMap, HashSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Marker for unused table cells.
pub const EMPTY_CELL: &str = "----";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub sample_id: String,
    pub fold: usize,
    pub true_label: usize,
    pub probs: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionPool {
    pub class_names: Vec<String>,
    pub records: Vec<PredictionRecord>,
}

impl PredictionPool {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn class_index(&self, name: &str) -> Option<usize> {
        self.class_names.iter().position(|c| c == name)
    }

    pub fn per_fold_counts(&self) -> BTreeMap<usize, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.fold).or_insert(0) += 1;
        }
        m
    }

    /// Records split back into per-fold lists, ordered by fold index.
    pub fn into_fold_runs(self) -> Vec<Vec<PredictionRecord>> {
        let mut by_fold: BTreeMap<usize, Vec<PredictionRecord>> = BTreeMap::new();
        for r in self.records {
            by_fold.entry(r.fold).or_default().push(r);
        }
        by_fold.into_values().collect()
    }
}

/// Concatenate per-fold runs, preserving multiplicity. A sample may appear
/// once per fold but never twice within the same fold.
pub fn merge_predictions(
    class_names: &[String],
    per_fold_runs: Vec<Vec<PredictionRecord>>,
) -> Result<PredictionPool> {
    let k = class_names.len();
    let mut seen = HashSet::new();
    let mut records = Vec::new();
    for run in per_fold_runs {
        for r in run {
            if r.probs.len() != k {
                return Err(Error::Integrity(format!(
                    "record `{}` has {} probabilities for {k} classes",
                    r.sample_id,
                    r.probs.len()
                )));
            }
            if r.true_label >= k {
                return Err(Error::Integrity(format!(
                    "record `{}` has label index {} outside {k} classes",
                    r.sample_id, r.true_label
                )));
            }
            if !seen.insert((r.sample_id.clone(), r.fold)) {
                return Err(Error::Integrity(format!(
                    "sample `{}` appears twice in fold {}",
                    r.sample_id, r.fold
                )));
            }
            records.push(r);
        }
    }
    Ok(PredictionPool {
        class_names: class_names.to_vec(),
        records,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ScoreMode {
    /// `p_a / (p_a + p_b)`
    #[default]
    Renormalized,
    /// `p_a`
    Raw,
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half. Sort-based; counts are exact integers.
pub fn auc_from_scores(pos: &[f64], neg: &[f64]) -> f64 {
    let mut all: Vec<(f64, bool)> = pos
        .iter()
        .map(|&s| (s, true))
        .chain(neg.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // twice the Mann-Whitney U: 2 per concordant pair, 1 per tie
    let mut twice_u: u128 = 0;
    let mut neg_below: u128 = 0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        let (mut p, mut n) = (0u128, 0u128);
        while j < all.len() && all[j].0 == all[i].0 {
            if all[j].1 {
                p += 1;
            } else {
                n += 1;
            }
            j += 1;
        }
        twice_u += p * (2 * neg_below + n);
        neg_below += n;
        i = j;
    }
    let denom = 2 * pos.len() as u128 * neg.len() as u128;
    twice_u as f64 / denom as f64
}

fn pair_score(probs: &[f64], a: usize, b: usize, mode: ScoreMode) -> f64 {
    match mode {
        ScoreMode::Raw => probs[a],
        ScoreMode::Renormalized => {
            let s = probs[a] + probs[b];
            if s > 0.0 {
                probs[a] / s
            } else {
                0.5
            }
        }
    }
}

/// Class-`a`-vs-class-`b` ROC-AUC over the records whose true label is a or b.
pub fn pairwise_auc(pool: &PredictionPool, a: usize, b: usize, mode: ScoreMode) -> Result<f64> {
    let k = pool.class_names.len();
    if a >= k || b >= k || a == b {
        return Err(Error::UndefinedMetric(format!(
            "invalid class pair ({a}, {b}) for {k} classes"
        )));
    }
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for r in &pool.records {
        if r.true_label == a {
            pos.push(pair_score(&r.probs, a, b, mode));
        } else if r.true_label == b {
            neg.push(pair_score(&r.probs, a, b, mode));
        }
    }
    for (class, v) in [(a, &pos), (b, &neg)] {
        if v.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "no records with true label `{}`",
                pool.class_names[class]
            )));
        }
    }
    Ok(auc_from_scores(&pos, &neg))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AucMatrix {
    pub class_names: Vec<String>,
    /// `values[i][j]` is populated for i < j only.
    pub values: Vec<Vec<Option<f64>>>,
}

impl AucMatrix {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.values.get(i)?.get(j).copied().flatten()
    }

    pub fn populated(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.values.iter().enumerate().flat_map(|(i, row)| {
            row.iter()
                .enumerate()
                .filter_map(move |(j, v)| v.map(|v| (i, j, v)))
        })
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["Dataset".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header)?;
        for (i, name) in self.class_names.iter().enumerate() {
            let mut row = vec![name.clone()];
            for j in 0..self.class_names.len() {
                row.push(match self.get(i, j) {
                    Some(v) => v.to_string(),
                    None => EMPTY_CELL.to_string(),
                });
            }
            w.write_record(&row)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let class_names: Vec<String> = rd.headers()?.iter().skip(1).map(String::from).collect();
        let mut values = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            let row = rec
                .iter()
                .skip(1)
                .map(|cell| {
                    if cell == EMPTY_CELL {
                        Ok(None)
                    } else {
                        cell.parse::<f64>().map(Some).map_err(|e| Error::Format {
                            row: i + 2,
                            msg: format!("bad AUC value `{cell}`: {e}"),
                        })
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            values.push(row);
        }
        Ok(Self {
            class_names,
            values,
        })
    }
}

/// Upper-triangular matrix of pairwise AUCs. Pairs with a missing class are
/// left empty.
pub fn auc_matrix(pool: &PredictionPool, mode: ScoreMode) -> AucMatrix {
    let k = pool.class_names.len();
    let mut values = vec![vec![None; k]; k];
    for (i, row) in values.iter_mut().enumerate() {
        for (j, cell) in row.iter_mut().enumerate().skip(i + 1) {
            *cell = pairwise_auc(pool, i, j, mode).ok();
        }
    }
    AucMatrix {
        class_names: pool.class_names.clone(),
        values,
    }
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub class_names: Vec<String>,
    /// rows: true label, columns: predicted label
    pub counts: Vec<Vec<u64>>,
}

impl ConfusionMatrix {
    pub fn row_sums(&self) -> Vec<u64> {
        self.counts.iter().map(|r| r.iter().sum()).collect()
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(w);
        let mut header = vec!["Dataset".to_string()];
        header.extend(self.class_names.iter().cloned());
        w.write_record(&header)?;
        for (name, row) in self.class_names.iter().zip(&self.counts) {
            let mut rec = vec![name.clone()];
            rec.extend(row.iter().map(u64::to_string));
            w.write_record(&rec)?;
        }
        w.flush().map_err(csv::Error::from)?;
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self> {
        let mut rd = csv::Reader::from_reader(r);
        let class_names: Vec<String> = rd.headers()?.iter().skip(1).map(String::from).collect();
        let mut counts = Vec::new();
        for (i, rec) in rd.records().enumerate() {
            let rec = rec?;
            counts.push(
                rec.iter()
                    .skip(1)
                    .map(|c| {
                        c.parse::<u64>().map_err(|e| Error::Format {
                            row: i + 2,
                            msg: format!("bad count `{c}`: {e}"),
                        })
                    })
                    .collect::<Result<Vec<_>>>()?,
            );
        }
        Ok(Self {
            class_names,
            counts,
        })
    }
}

pub fn confusion_matrix(pool: &PredictionPool) -> ConfusionMatrix {
    let k = pool.class_names.len();
    let mut counts = vec![vec![0u64; k]; k];
    for r in &pool.records {
        counts[r.true_label][argmax(&r.probs)] += 1;
    }
    ConfusionMatrix {
        class_names: pool.class_names.clone(),
        counts,
    }
}

/// Prediction-exchange format:
/// `sample_id,fold,true_label,p_<class1>,...,p_<classK>`.
pub fn write_pool<W: Write>(pool: &PredictionPool, w: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(w);
    let mut header = vec!["sample_id".to_string(), "fold".into(), "true_label".into()];
    header.extend(pool.class_names.iter().map(|c| format!("p_{c}")));
    w.write_record(&header)?;
    for r in &pool.records {
        let mut rec = vec![
            r.sample_id.clone(),
            r.fold.to_string(),
            pool.class_names[r.true_label].clone(),
        ];
        rec.extend(r.probs.iter().map(f64::to_string));
        w.write_record(&rec)?;
    }
    w.flush().map_err(csv::Error::from)?;
    Ok(())
}

/// Tolerance on the probability simplex for imported rows.
pub const SIMPLEX_TOLERANCE: f64 = 1e-4;

/// Parse a prediction-exchange file into per-fold record lists (ordered by
/// fold index) plus the class names from the header.
pub fn read_pool<R: Read>(r: R) -> Result<(Vec<String>, Vec<Vec<PredictionRecord>>)> {
    let mut rd = csv::Reader::from_reader(r);
    let headers = rd.headers()?.clone();
    if headers.len() < 4
        || &headers[0] != "sample_id"
        || &headers[1] != "fold"
        || &headers[2] != "true_label"
    {
        return Err(Error::Format {
            row: 1,
            msg: "header must be sample_id,fold,true_label,p_<class>...".into(),
        });
    }
    let class_names = headers
        .iter()
        .skip(3)
        .map(|h| {
            h.strip_prefix("p_").map(String::from).ok_or_else(|| Error::Format {
                row: 1,
                msg: format!("probability column `{h}` lacks the p_ prefix"),
            })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut by_fold: BTreeMap<usize, Vec<PredictionRecord>> = BTreeMap::new();
    for (i, rec) in rd.records().enumerate() {
        let row = i + 2;
        let rec = rec?;
        let bad = |msg: String| Error::Format { row, msg };
        if rec.len() != headers.len() {
            return Err(bad(format!("expected {} columns, found {}", headers.len(), rec.len())));
        }
        let fold = rec[1]
            .parse::<usize>()
            .map_err(|e| bad(format!("bad fold index `{}`: {e}", &rec[1])))?;
        let true_label = class_names
            .iter()
            .position(|c| c == &rec[2])
            .ok_or_else(|| bad(format!("unknown label `{}`", &rec[2])))?;
        let probs = rec
            .iter()
            .skip(3)
            .map(|c| c.parse::<f64>().map_err(|e| bad(format!("bad probability `{c}`: {e}"))))
            .collect::<Result<Vec<_>>>()?;
        if probs.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(bad("probability outside [0, 1]".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(bad(format!("probabilities sum to {sum}, not 1")));
        }
        by_fold.entry(fold).or_default().push(PredictionRecord {
            sample_id: rec[0].to_string(),
            fold,
            true_label,
            probs,
        });
    }
    Ok((class_names, by_fold.into_values().collect()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn names(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("C{i}")).collect()
    }

    fn rec(id: &str, fold: usize, label: usize, probs: &[f64]) -> PredictionRecord {
        PredictionRecord {
            sample_id: id.into(),
            fold,
            true_label: label,
            probs: probs.to_vec(),
        }
    }

    fn brute_force(pos: &[f64], neg: &[f64]) -> f64 {
        let mut s = 0.0;
        for &p in pos {
            for &n in neg {
                s += if p > n {
                    1.0
                } else if p == n {
                    0.5
                } else {
                    0.0
                };
            }
        }
        s / (pos.len() * neg.len()) as f64
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc_from_scores(&[0.9, 0.8], &[0.2, 0.1]), 1.0);
        assert_eq!(auc_from_scores(&[0.5; 3], &[0.5; 4]), 0.5);
        assert_eq!(auc_from_scores(&[0.8, 0.4], &[0.6, 0.2]), 0.75);
    }

    #[test]
    fn pairwise_auc_uses_renormalized_scores() {
        let pool = merge_predictions(
            &names(3),
            vec![vec![
                rec("a", 0, 0, &[0.5, 0.1, 0.4]),
                rec("b", 0, 1, &[0.2, 0.2, 0.6]),
                rec("c", 0, 2, &[0.1, 0.1, 0.8]),
            ]],
        )
        .unwrap();
        assert_eq!(pairwise_auc(&pool, 0, 1, ScoreMode::Renormalized).unwrap(), 1.0);
        assert_eq!(pairwise_auc(&pool, 1, 0, ScoreMode::Renormalized).unwrap(), 1.0);
        assert!(matches!(
            pairwise_auc(&pool, 0, 0, ScoreMode::Raw),
            Err(Error::UndefinedMetric(_))
        ));
        let two = merge_predictions(&names(3), vec![vec![rec("a", 0, 0, &[1.0, 0.0, 0.0])]]).unwrap();
        assert!(pairwise_auc(&two, 0, 1, ScoreMode::Renormalized).is_err());
    }

    #[test]
    fn merge_preserves_multiplicity_and_rejects_duplicates() {
        let runs: Vec<Vec<_>> = (0..11).map(|f| vec![rec("s", f, 0, &[0.6, 0.4])]).collect();
        let pool = merge_predictions(&names(2), runs).unwrap();
        assert_eq!(pool.records.iter().filter(|r| r.sample_id == "s").count(), 11);

        assert!(merge_predictions(&names(2), vec![]).unwrap().is_empty());

        let sized: Vec<Vec<_>> = [5usize, 7, 9]
            .iter()
            .enumerate()
            .map(|(f, &n)| (0..n).map(|i| rec(&format!("x{i}"), f, 1, &[0.3, 0.7])).collect())
            .collect();
        let pool = merge_predictions(&names(2), sized).unwrap();
        assert_eq!(pool.len(), 21);
        assert_eq!(pool.per_fold_counts().into_values().collect::<Vec<_>>(), vec![5, 7, 9]);

        let dup = vec![vec![rec("s", 0, 0, &[0.6, 0.4]), rec("s", 0, 1, &[0.6, 0.4])]];
        assert!(matches!(merge_predictions(&names(2), dup), Err(Error::Integrity(_))));
    }

    #[test]
    fn confusion_hand_tally() {
        let pool = merge_predictions(
            &names(3),
            vec![vec![
                rec("a", 0, 0, &[0.7, 0.2, 0.1]),
                rec("b", 0, 0, &[0.6, 0.3, 0.1]),
                rec("c", 0, 1, &[0.1, 0.8, 0.1]),
                rec("d", 0, 1, &[0.5, 0.4, 0.1]), // misclassified as 0
                rec("e", 0, 2, &[0.2, 0.2, 0.6]),
                rec("f", 0, 2, &[0.3, 0.3, 0.4]),
            ]],
        )
        .unwrap();
        let cm = confusion_matrix(&pool);
        assert_eq!(cm.counts, vec![vec![2, 0, 0], vec![1, 1, 0], vec![0, 0, 2]]);
        assert_eq!(cm.row_sums(), vec![2, 2, 2]);
        assert_eq!(argmax(&[0.4, 0.4, 0.2]), 0);
    }

    #[test]
    fn pool_round_trip_and_simplex_check() {
        let pool = merge_predictions(
            &["NIH".to_string(), "COV".to_string()],
            vec![
                vec![rec("a", 0, 0, &[0.1, 0.9]), rec("b", 0, 1, &[1.0 / 3.0, 2.0 / 3.0])],
                vec![rec("a", 1, 0, &[0.25, 0.75])],
            ],
        )
        .unwrap();
        let mut buf = Vec::new();
        write_pool(&pool, &mut buf).unwrap();
        let (names, runs) = read_pool(buf.as_slice()).unwrap();
        let back = merge_predictions(&names, runs).unwrap();
        assert_eq!(back, pool);
        let mut again = Vec::new();
        write_pool(&back, &mut again).unwrap();
        assert_eq!(buf, again);

        let bad = "sample_id,fold,true_label,p_A,p_B\nx,0,A,0.5,0.5\ny,0,B,0.4,0.4\n";
        match read_pool(bad.as_bytes()) {
            Err(Error::Format { row, .. }) => assert_eq!(row, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn auc_csv_round_trip() {
        let m = AucMatrix {
            class_names: names(3),
            values: vec![
                vec![None, Some(0.9), Some(1.0 / 3.0)],
                vec![None, None, Some(0.5)],
                vec![None, None, None],
            ],
        };
        let mut buf = Vec::new();
        m.write_csv(&mut buf).unwrap();
        assert!(String::from_utf8_lossy(&buf).contains("C2,----,----,----"));
        assert_eq!(AucMatrix::read_csv(buf.as_slice()).unwrap(), m);
    }

    fn pool_strategy() -> impl Strategy<Value = (Vec<f64>, Vec<f64>)> {
        let score = (0u8..20).prop_map(|v| v as f64 / 20.0);
        (
            proptest::collection::vec(score.clone(), 1..60),
            proptest::collection::vec(score, 1..60),
        )
    }

    proptest! {
        #[test]
        fn sort_based_equals_brute_force((pos, neg) in pool_strategy()) {
            prop_assert!((auc_from_scores(&pos, &neg) - brute_force(&pos, &neg)).abs() < 1e-12);
        }

        #[test]
        fn monotone_transform_invariance((pos, neg) in pool_strategy()) {
            let cube = |v: &Vec<f64>| v.iter().map(|x| x * x * x).collect::<Vec<_>>();
            prop_assert_eq!(auc_from_scores(&pos, &neg), auc_from_scores(&cube(&pos), &cube(&neg)));
        }

        #[test]
        fn duplication_invariance((pos, neg) in pool_strategy(), k in 2usize..5) {
            let rep = |v: &Vec<f64>| v.iter().flat_map(|&x| std::iter::repeat_n(x, k)).collect::<Vec<_>>();
            prop_assert_eq!(auc_from_scores(&pos, &neg), auc_from_scores(&rep(&pos), &rep(&neg)));
        }

        #[test]
        fn rank_symmetry(pos in proptest::collection::vec(0u8..20, 1..60), neg in proptest::collection::vec(0u8..20, 1..60)) {
            let p: Vec<f64> = pos.iter().map(|&v| v as f64).collect();
            let n: Vec<f64> = neg.iter().map(|&v| v as f64).collect();
            let sum = auc_from_scores(&p, &n) + auc_from_scores(&n, &p);
            prop_assert!((sum - 1.0).abs() <= f64::EPSILON);
        }

        #[test]
        fn renormalized_pair_order(probs in proptest::collection::vec((0.01f64..1.0, 0.01f64..1.0, 0usize..2), 2..80)) {
            let runs = vec![probs.iter().enumerate().map(|(i, &(a, b, y))| {
                let s = a + b;
                rec(&format!("r{i}"), 0, y, &[a / s, b / s])
            }).collect::<Vec<_>>()];
            let pool = merge_predictions(&names(2), runs).unwrap();
            if let (Ok(ab), Ok(ba)) = (
                pairwise_auc(&pool, 0, 1, ScoreMode::Renormalized),
                pairwise_auc(&pool, 1, 0, ScoreMode::Renormalized),
            ) {
                // p_b/(p_a+p_b) ranks the pair in reverse, so both orders agree
                prop_assert!((ab - ba).abs() < 1e-12);
            }
        }
    }
}
