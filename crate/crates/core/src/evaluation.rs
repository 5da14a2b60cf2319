//! Top-k accuracy, rank-1 identification, score export and McNemar's test.

use std::fmt;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::model::Model;

/// Chi-square critical value for one degree of freedom at 99% confidence.
pub const CHI2_99: f64 = 6.635;
/// Below this many discordant pairs the exact binomial p-value is also
/// reported.
pub const EXACT_BELOW: u64 = 25;

/// Per-class capsule lengths for one test sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRecord {
    pub sample_id: String,
    pub true_class: usize,
    pub scores: Vec<f32>,
}

impl ScoreRecord {
    /// 1-based rank of the true class; ties go to the lower class index.
    pub fn rank(&self) -> usize {
        let t = self.true_class;
        let s = self.scores[t];
        1 + self
            .scores
            .iter()
            .enumerate()
            .filter(|&(k, &v)| v > s || (v == s && k < t))
            .count()
    }

    pub fn predicted(&self) -> usize {
        crate::capsules::predict_from_lengths(&self.scores)
    }
}

fn check_records(records: &[ScoreRecord], k: usize) -> Result<()> {
    let first = records
        .first()
        .ok_or_else(|| Error::InvalidArgument("no score records".into()))?;
    let classes = first.scores.len();
    if k == 0 || k > classes {
        return Err(Error::InvalidArgument(format!("k = {k} outside 1..={classes}")));
    }
    for r in records {
        if r.scores.len() != classes || r.true_class >= classes {
            return Err(Error::InvalidArgument(format!(
                "record {} has {} scores and true class {} (expected {classes} classes)",
                r.sample_id,
                r.scores.len(),
                r.true_class
            )));
        }
    }
    Ok(())
}

/// Percentage of records whose true class ranks within the top `k`.
pub fn topk_accuracy(records: &[ScoreRecord], k: usize) -> Result<f64> {
    check_records(records, k)?;
    let hits = records.iter().filter(|r| r.rank() <= k).count();
    Ok(100.0 * hits as f64 / records.len() as f64)
}

/// Closed-set rank-1 identification rate (top-1 over identities).
pub fn rank1_identification(records: &[ScoreRecord]) -> Result<f64> {
    topk_accuracy(records, 1)
}

/// CSV `sample_id,class,score,kind`, one row per (record, class), scores at
/// nine significant digits.
pub fn export_scores<W: Write>(records: &[ScoreRecord], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::InvalidArgument(format!("writing scores: {e}"));
    w.write_record(["sample_id", "class", "score", "kind"]).map_err(wrap)?;
    for r in records {
        for (k, &s) in r.scores.iter().enumerate() {
            let kind = if k == r.true_class { "genuine" } else { "impostor" };
            w.write_record([r.sample_id.as_str(), &k.to_string(), &format!("{s:.8e}"), kind])
                .map_err(wrap)?;
        }
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("writing scores: {e}")))
}

pub fn export_scores_file(records: &[ScoreRecord], path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    export_scores(records, std::io::BufWriter::new(f))
}

#[derive(Debug, Deserialize)]
struct ScoreRow {
    sample_id: String,
    class: usize,
    score: f32,
    kind: String,
}

/// Parses a score CSV back into records (rows grouped by consecutive
/// sample id).
pub fn parse_scores<R: std::io::Read>(input: R) -> Result<Vec<ScoreRecord>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out: Vec<ScoreRecord> = Vec::new();
    for row in reader.deserialize::<ScoreRow>() {
        let row = row.map_err(|e| Error::InvalidArgument(format!("reading scores: {e}")))?;
        let rec = match out.last_mut() {
            Some(r) if r.sample_id == row.sample_id => r,
            _ => {
                out.push(ScoreRecord {
                    sample_id: row.sample_id.clone(),
                    true_class: usize::MAX,
                    scores: Vec::new(),
                });
                out.last_mut().expect("just pushed")
            }
        };
        if row.class != rec.scores.len() {
            return Err(Error::InvalidArgument(format!("sample {}: classes out of order", row.sample_id)));
        }
        match row.kind.as_str() {
            "genuine" => rec.true_class = row.class,
            "impostor" => {}
            other => return Err(Error::InvalidArgument(format!("unknown score kind {other:?}"))),
        }
        rec.scores.push(row.score);
    }
    if let Some(r) = out.iter().find(|r| r.true_class == usize::MAX) {
        return Err(Error::InvalidArgument(format!("sample {} has no genuine score", r.sample_id)));
    }
    Ok(out)
}

/// Scores every image in eval mode, in batches.
pub fn score_images(model: &mut Model<f32>, images: &[Image], labels: &[usize], ids: &[String], batch_size: usize) -> Result<Vec<ScoreRecord>> {
    if images.len() != labels.len() || images.len() != ids.len() {
        return Err(Error::shape(
            "score_images",
            format!("{} images, {} labels, {} ids", images.len(), labels.len(), ids.len()),
        ));
    }
    let mut out = Vec::with_capacity(images.len());
    for start in (0..images.len()).step_by(batch_size.max(1)) {
        let end = (start + batch_size.max(1)).min(images.len());
        let refs: Vec<&Image> = images[start..end].iter().collect();
        for (i, scores) in model.scores(&refs)?.into_iter().enumerate() {
            out.push(ScoreRecord {
                sample_id: ids[start + i].clone(),
                true_class: labels[start + i],
                scores,
            });
        }
    }
    Ok(out)
}

/// Paired outcomes of two classifiers on the same samples.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContingencyTable {
    /// Both correct.
    pub a: u64,
    /// Only A correct.
    pub b: u64,
    /// Only B correct.
    pub c: u64,
    /// Both wrong.
    pub d: u64,
}

impl ContingencyTable {
    pub fn from_predictions(pred_a: &[usize], pred_b: &[usize], labels: &[usize]) -> Result<Self> {
        if pred_a.len() != labels.len() || pred_b.len() != labels.len() {
            return Err(Error::InvalidArgument(format!(
                "length mismatch: {} and {} predictions for {} labels",
                pred_a.len(),
                pred_b.len(),
                labels.len()
            )));
        }
        let mut t = ContingencyTable { a: 0, b: 0, c: 0, d: 0 };
        for ((&pa, &pb), &l) in pred_a.iter().zip(pred_b).zip(labels) {
            match (pa == l, pb == l) {
                (true, true) => t.a += 1,
                (true, false) => t.b += 1,
                (false, true) => t.c += 1,
                (false, false) => t.d += 1,
            }
        }
        Ok(t)
    }

    pub fn total(&self) -> u64 {
        self.a + self.b + self.c + self.d
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum McNemar {
    NoDiscordantPairs,
    Tested {
        /// Continuity-corrected `(|b − c| − 1)² / (b + c)`.
        statistic: f64,
        significant: bool,
        /// Two-sided exact binomial p-value, when `b + c` is small.
        exact_p: Option<f64>,
    },
}

impl fmt::Display for McNemar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            McNemar::NoDiscordantPairs => write!(f, "no discordant pairs"),
            McNemar::Tested {
                statistic,
                significant,
                exact_p,
            } => {
                write!(f, "statistic {statistic:.3} (critical {CHI2_99} at 99%): ")?;
                write!(f, "{}", if *significant { "significant" } else { "not significant" })?;
                if let Some(p) = exact_p {
                    write!(f, "; exact binomial p = {p:.4}")?;
                }
                Ok(())
            }
        }
    }
}

fn log_choose(n: u64, k: u64) -> f64 {
    (1..=k).map(|i| ((n - k + i) as f64).ln() - (i as f64).ln()).sum()
}

/// Two-sided exact binomial p-value for `min(b, c)` successes out of
/// `b + c` fair trials.
pub fn exact_binomial_p(b: u64, c: u64) -> f64 {
    let n = b + c;
    let k = b.min(c);
    let tail: f64 = (0..=k).map(|i| (log_choose(n, i) - n as f64 * 2f64.ln()).exp()).sum();
    (2.0 * tail).min(1.0)
}

pub fn mcnemar(table: &ContingencyTable) -> McNemar {
    let (b, c) = (table.b, table.c);
    if b + c == 0 {
        return McNemar::NoDiscordantPairs;
    }
    let diff = (b.abs_diff(c) as f64 - 1.0).max(0.0);
    let statistic = diff * diff / (b + c) as f64;
    let exact_p = (b + c < EXACT_BELOW).then(|| exact_binomial_p(b, c));
    McNemar::Tested {
        statistic,
        significant: statistic > CHI2_99,
        exact_p,
    }
}

/// One `sample_id,<column>` row of a predictions or labels file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IdValue {
    pub sample_id: String,
    pub value: usize,
}

/// Writes `sample_id,<column>` CSV rows.
pub fn write_id_values<W: Write>(rows: &[IdValue], column: &str, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let wrap = |e: csv::Error| Error::InvalidArgument(format!("writing {column} file: {e}"));
    w.write_record(["sample_id", column]).map_err(wrap)?;
    for r in rows {
        w.write_record([r.sample_id.as_str(), &r.value.to_string()]).map_err(wrap)?;
    }
    w.flush().map_err(|e| Error::InvalidArgument(format!("writing {column} file: {e}")))
}

pub fn write_id_values_file(rows: &[IdValue], column: &str, path: &Path) -> Result<()> {
    let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    write_id_values(rows, column, std::io::BufWriter::new(f))
}

/// Reads a two-column `sample_id,<value>` CSV with a header row.
pub fn read_id_values<R: std::io::Read>(input: R) -> Result<Vec<IdValue>> {
    let mut reader = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, row) in reader.records().enumerate() {
        let row = row.map_err(|e| Error::InvalidArgument(format!("row {}: {e}", i + 1)))?;
        if row.len() != 2 {
            return Err(Error::InvalidArgument(format!("row {}: expected 2 columns, found {}", i + 1, row.len())));
        }
        let value = row[1]
            .trim()
            .parse()
            .map_err(|e| Error::InvalidArgument(format!("row {}: bad class {:?}: {e}", i + 1, &row[1])))?;
        out.push(IdValue {
            sample_id: row[0].to_string(),
            value,
        });
    }
    Ok(out)
}

pub fn read_id_values_file(path: &Path) -> Result<Vec<IdValue>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_id_values(f).map_err(|e| match e {
        Error::InvalidArgument(m) => Error::InvalidArgument(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Contingency table from two prediction lists and the labels, which must
/// list the same sample ids in the same order.
pub fn paired_table(a: &[IdValue], b: &[IdValue], labels: &[IdValue]) -> Result<ContingencyTable> {
    if a.len() != labels.len() || b.len() != labels.len() {
        return Err(Error::shape(
            "mcnemar",
            format!("{} and {} predictions for {} labels", a.len(), b.len(), labels.len()),
        ));
    }
    for (i, ((x, y), l)) in a.iter().zip(b).zip(labels).enumerate() {
        if x.sample_id != l.sample_id || y.sample_id != l.sample_id {
            return Err(Error::shape(
                "mcnemar",
                format!(
                    "row {}: sample ids {:?}, {:?} and {:?} differ",
                    i + 1,
                    x.sample_id,
                    y.sample_id,
                    l.sample_id
                ),
            ));
        }
    }
    let values = |v: &[IdValue]| v.iter().map(|r| r.value).collect::<Vec<_>>();
    ContingencyTable::from_predictions(&values(a), &values(b), &values(labels))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(id: &str, t: usize, s: &[f32]) -> ScoreRecord {
        ScoreRecord {
            sample_id: id.into(),
            true_class: t,
            scores: s.to_vec(),
        }
    }

    #[test]
    fn topk_hand_count() {
        let r = vec![
            rec("a", 0, &[0.9, 0.1, 0.2]),
            rec("b", 0, &[0.1, 0.5, 0.3]),
            rec("c", 2, &[0.1, 0.5, 0.3]),
        ];
        assert!((topk_accuracy(&r, 2).unwrap() - 200.0 / 3.0).abs() < 1e-12);
        assert!((topk_accuracy(&r, 1).unwrap() - 100.0 / 3.0).abs() < 1e-12);
        assert_eq!(topk_accuracy(&r, 3).unwrap(), 100.0);
        assert!(topk_accuracy(&r, 4).is_err());
        assert!(topk_accuracy(&[], 1).is_err());
    }

    #[test]
    fn ties_favor_lower_index() {
        assert_eq!(rec("x", 0, &[0.5, 0.5]).rank(), 1);
        assert_eq!(rec("x", 1, &[0.5, 0.5]).rank(), 2);
    }

    #[test]
    fn mcnemar_examples() {
        let t = |b, c| ContingencyTable { a: 0, b, c, d: 0 };
        match mcnemar(&t(10, 2)) {
            McNemar::Tested { statistic, significant, exact_p } => {
                assert!((statistic - 49.0 / 12.0).abs() < 1e-12);
                assert!(!significant);
                assert!(exact_p.is_some());
            }
            other => panic!("{other:?}"),
        }
        match mcnemar(&t(30, 2)) {
            McNemar::Tested { statistic, significant, exact_p } => {
                assert!((statistic - 729.0 / 32.0).abs() < 1e-12);
                assert!(significant);
                assert!(exact_p.is_none());
            }
            other => panic!("{other:?}"),
        }
        assert_eq!(mcnemar(&t(0, 0)), McNemar::NoDiscordantPairs);
        assert_eq!(mcnemar(&t(0, 0)).to_string(), "no discordant pairs");
    }

    #[test]
    fn exact_binomial_values() {
        // P(X <= 2 | n=12, p=1/2) = (1 + 12 + 66) / 4096.
        assert!((exact_binomial_p(10, 2) - 2.0 * 79.0 / 4096.0).abs() < 1e-12);
        assert_eq!(exact_binomial_p(3, 3), 1.0);
    }

    #[test]
    fn contingency_counts() {
        let t = ContingencyTable::from_predictions(&[0, 1, 2, 0], &[0, 2, 2, 1], &[0, 1, 1, 2]).unwrap();
        assert_eq!(t, ContingencyTable { a: 1, b: 1, c: 0, d: 2 });
        assert!(ContingencyTable::from_predictions(&[0], &[0, 1], &[0]).is_err());
    }

    #[test]
    fn score_csv_round_trip() {
        let r = vec![rec("s0", 1, &[0.123456789, 0.987654321, 1e-7]), rec("s1", 0, &[0.5, 0.25, 0.0])];
        let mut buf = Vec::new();
        export_scores(&r, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("sample_id,class,score,kind\n"));
        assert_eq!(text.lines().count(), 7);
        assert_eq!(parse_scores(buf.as_slice()).unwrap(), r);
        let mut empty = Vec::new();
        export_scores(&[], &mut empty).unwrap();
        assert_eq!(String::from_utf8(empty).unwrap(), "sample_id,class,score,kind\n");
    }

    #[test]
    fn id_value_round_trip_and_alignment() {
        let rows = |v: &[(&str, usize)]| {
            v.iter()
                .map(|&(id, value)| IdValue {
                    sample_id: id.into(),
                    value,
                })
                .collect::<Vec<_>>()
        };
        let labels = rows(&[("a", 0), ("b", 1), ("c", 1)]);
        let mut buf = Vec::new();
        write_id_values(&labels, "label", &mut buf).unwrap();
        assert_eq!(String::from_utf8(buf.clone()).unwrap(), "sample_id,label\na,0\nb,1\nc,1\n");
        assert_eq!(read_id_values(&buf[..]).unwrap(), labels);

        let a = rows(&[("a", 0), ("b", 0), ("c", 1)]);
        let b = rows(&[("a", 1), ("b", 1), ("c", 1)]);
        let t = paired_table(&a, &b, &labels).unwrap();
        assert_eq!((t.a, t.b, t.c, t.d), (1, 1, 1, 0));
        assert!(paired_table(&a[..2], &b, &labels).is_err());
        let swapped = rows(&[("b", 0), ("a", 0), ("c", 1)]);
        assert!(paired_table(&swapped, &b, &labels).is_err());
    }
}
