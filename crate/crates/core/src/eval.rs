//! AUROC, DeLong's paired test, report assembly and the cross-distribution
//! experiment matrix.

use std::collections::{HashMap, HashSet};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::baselines::{self, BaselineOptions, Method, ScoreVector};
use crate::error::{Error, Result};
use crate::records::{split_dataset, Dataset, Provenance, StreamMask};
use crate::scorer::{self, ScorerModel, TrainConfig};

pub const SIGNIFICANCE_LEVEL: f64 = 0.05;

fn check_labels(scores_len: usize, labels: &[u8]) -> Result<(usize, usize)> {
    if scores_len != labels.len() {
        return Err(Error::invalid(format!(
            "{scores_len} scores for {} labels",
            labels.len()
        )));
    }
    if labels.iter().any(|l| *l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    let pos = labels.iter().filter(|l| **l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedAuroc(format!(
            "{pos} positive and {neg} negative labels; both classes are required"
        )));
    }
    Ok((pos, neg))
}

/// 1-based midranks; tied values share the mean of their ranks.
fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = mid;
        }
        i = j + 1;
    }
    ranks
}

/// Probability that a random positive outranks a random negative, ties
/// counting one half (Mann-Whitney form).
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_labels(scores.len(), labels)?;
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("scores must be finite"));
    }
    let ranks = midranks(scores);
    let rank_sum: f64 = ranks
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l == 1)
        .map(|(r, _)| r)
        .sum();
    let (m, n) = (pos as f64, neg as f64);
    Ok((rank_sum - m * (m + 1.0) / 2.0) / (m * n))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DeLongResult {
    pub auroc_a: f64,
    pub auroc_b: f64,
    /// Estimated variance of `auroc_a - auroc_b`.
    pub variance: f64,
    pub z: f64,
    /// Two-sided.
    pub p: f64,
}

struct Components {
    auroc: f64,
    v10: Vec<f64>,
    v01: Vec<f64>,
}

fn structural_components(pos: &[f64], neg: &[f64]) -> Components {
    let (m, n) = (pos.len(), neg.len());
    let tx = midranks(pos);
    let ty = midranks(neg);
    let all: Vec<f64> = pos.iter().chain(neg).copied().collect();
    let tz = midranks(&all);
    let v10: Vec<f64> = (0..m).map(|i| (tz[i] - tx[i]) / n as f64).collect();
    let v01: Vec<f64> = (0..n)
        .map(|j| 1.0 - (tz[m + j] - ty[j]) / m as f64)
        .collect();
    let auroc = v10.iter().sum::<f64>() / m as f64;
    Components { auroc, v10, v01 }
}

fn covariance(a: &[f64], b: &[f64]) -> f64 {
    let len = a.len();
    if len < 2 {
        return 0.0;
    }
    let ma = a.iter().sum::<f64>() / len as f64;
    let mb = b.iter().sum::<f64>() / len as f64;
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - ma) * (y - mb))
        .sum::<f64>()
        / (len - 1) as f64
}

/// DeLong's test for two correlated AUROCs on the same records, using the
/// midrank formulation of the structural components.
pub fn delong_test(scores_a: &[f64], scores_b: &[f64], labels: &[u8]) -> Result<DeLongResult> {
    check_labels(scores_a.len(), labels)?;
    check_labels(scores_b.len(), labels)?;
    let split = |scores: &[f64]| -> (Vec<f64>, Vec<f64>) {
        let pos = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == 1)
            .map(|(s, _)| *s)
            .collect();
        let neg = scores
            .iter()
            .zip(labels)
            .filter(|(_, l)| **l == 0)
            .map(|(s, _)| *s)
            .collect();
        (pos, neg)
    };
    let (pa, na) = split(scores_a);
    let (pb, nb) = split(scores_b);
    let ca = structural_components(&pa, &na);
    let cb = structural_components(&pb, &nb);
    let (m, n) = (pa.len() as f64, na.len() as f64);

    let var10 = covariance(&ca.v10, &ca.v10) + covariance(&cb.v10, &cb.v10)
        - 2.0 * covariance(&ca.v10, &cb.v10);
    let var01 = covariance(&ca.v01, &ca.v01) + covariance(&cb.v01, &cb.v01)
        - 2.0 * covariance(&ca.v01, &cb.v01);
    let variance = (var10 / m + var01 / n).max(0.0);
    let diff = ca.auroc - cb.auroc;

    if variance == 0.0 {
        if diff == 0.0 {
            return Ok(DeLongResult {
                auroc_a: ca.auroc,
                auroc_b: cb.auroc,
                variance,
                z: 0.0,
                p: 1.0,
            });
        }
        return Err(Error::invalid(format!(
            "DeLong variance is zero but AUROCs differ by {diff}"
        )));
    }
    let z = diff / variance.sqrt();
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let p = (2.0 * normal.cdf(-z.abs())).min(1.0);
    Ok(DeLongResult {
        auroc_a: ca.auroc,
        auroc_b: cb.auroc,
        variance,
        z,
        p,
    })
}

/// Fraction of correct responses. Every record must carry a label or gold
/// answers.
pub fn accuracy(d: &Dataset) -> Result<f64> {
    if d.is_empty() {
        return Err(Error::invalid("accuracy of an empty dataset"));
    }
    let mut correct = 0usize;
    for rec in &d.records {
        correct += rec.resolved_label().ok_or_else(|| Error::Missing {
            id: rec.id.clone(),
            what: "label".into(),
        })? as usize;
    }
    Ok(correct as f64 / d.len() as f64)
}

/// `(id, label)` pairs for every record that has a resolvable label.
pub fn labels_of(d: &Dataset) -> Vec<(String, u8)> {
    d.records
        .iter()
        .filter_map(|r| r.resolved_label().map(|l| (r.id.clone(), l)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodResult {
    pub method: String,
    pub auroc: f64,
    pub n_pos: usize,
    pub n_neg: usize,
    /// `auroc - auroc(reference)`.
    pub delta: f64,
    /// DeLong test against the reference; absent for the reference itself.
    pub vs_reference: Option<DeLongResult>,
    pub vs_secondary: Option<DeLongResult>,
}

impl MethodResult {
    pub fn significant_vs_reference(&self) -> bool {
        self.vs_reference.is_some_and(|r| r.p < SIGNIFICANCE_LEVEL)
    }

    pub fn significant_vs_secondary(&self) -> bool {
        self.vs_secondary.is_some_and(|r| r.p < SIGNIFICANCE_LEVEL)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairwiseResult {
    pub method_a: String,
    pub method_b: String,
    pub z: f64,
    pub p: f64,
    pub significant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub reference: String,
    pub secondary_reference: Option<String>,
    pub n_records: usize,
    pub accuracy: f64,
    /// Sorted by method name.
    pub methods: Vec<MethodResult>,
    pub pairwise: Vec<PairwiseResult>,
    /// Labeled records dropped because some method did not score them.
    pub dropped: Vec<String>,
}

impl EvalReport {
    pub fn method(&self, name: &str) -> Option<&MethodResult> {
        self.methods.iter().find(|m| m.method == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportOptions {
    pub reference: String,
    /// Second comparison target, marked with a dagger in the text table.
    #[serde(default)]
    pub secondary_reference: Option<String>,
}

impl ReportOptions {
    pub fn new(reference: impl Into<String>) -> Self {
        ReportOptions {
            reference: reference.into(),
            secondary_reference: None,
        }
    }
}

/// Compares score vectors on the records that every method scored and that
/// carry a label.
pub fn report(
    methods: &[ScoreVector],
    labels: &[(String, u8)],
    opts: &ReportOptions,
) -> Result<EvalReport> {
    if methods.is_empty() {
        return Err(Error::invalid("report needs at least one method"));
    }
    let mut names = HashSet::new();
    for m in methods {
        if !names.insert(m.method.as_str()) {
            return Err(Error::invalid(format!("method {} listed twice", m.method)));
        }
    }
    for r in std::iter::once(&opts.reference).chain(opts.secondary_reference.as_ref()) {
        if !names.contains(r.as_str()) {
            return Err(Error::invalid(format!(
                "reference method {r} not among the scored methods"
            )));
        }
    }

    let maps: Vec<HashMap<&str, f64>> = methods
        .iter()
        .map(|m| m.scores.iter().map(|(id, s)| (id.as_str(), *s)).collect())
        .collect();
    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    for (id, label) in labels {
        if maps.iter().all(|m| m.contains_key(id.as_str())) {
            kept.push((id.as_str(), *label));
        } else {
            dropped.push(id.clone());
        }
    }
    let y: Vec<u8> = kept.iter().map(|(_, l)| *l).collect();
    let mut sorted: Vec<(String, Vec<f64>)> = methods
        .iter()
        .zip(&maps)
        .map(|(m, map)| {
            (
                m.method.clone(),
                kept.iter().map(|(id, _)| map[id]).collect(),
            )
        })
        .collect();
    sorted.sort_by(|a, b| a.0.cmp(&b.0));

    let (n_pos, n_neg) = check_labels(y.len(), &y)?;
    let aurocs: Vec<f64> = sorted
        .iter()
        .map(|(_, s)| auroc(s, &y))
        .collect::<Result<_>>()?;
    let index_of = |name: &str| {
        sorted
            .iter()
            .position(|(m, _)| m == name)
            .expect("reference checked above")
    };
    let ref_idx = index_of(&opts.reference);
    let sec_idx = opts.secondary_reference.as_deref().map(index_of);

    let mut pairwise = Vec::new();
    let mut tests: HashMap<(usize, usize), DeLongResult> = HashMap::new();
    for i in 0..sorted.len() {
        for j in i + 1..sorted.len() {
            let r = delong_test(&sorted[i].1, &sorted[j].1, &y)?;
            pairwise.push(PairwiseResult {
                method_a: sorted[i].0.clone(),
                method_b: sorted[j].0.clone(),
                z: r.z,
                p: r.p,
                significant: r.p < SIGNIFICANCE_LEVEL,
            });
            tests.insert((i, j), r);
        }
    }
    // Test of method i against method j, oriented as (i - j).
    let oriented = |i: usize, j: usize| -> Option<DeLongResult> {
        if i == j {
            return None;
        }
        if i < j {
            tests.get(&(i, j)).copied()
        } else {
            tests.get(&(j, i)).map(|r| DeLongResult {
                auroc_a: r.auroc_b,
                auroc_b: r.auroc_a,
                variance: r.variance,
                z: -r.z,
                p: r.p,
            })
        }
    };

    let results = sorted
        .iter()
        .enumerate()
        .map(|(i, (name, _))| MethodResult {
            method: name.clone(),
            auroc: aurocs[i],
            n_pos,
            n_neg,
            delta: aurocs[i] - aurocs[ref_idx],
            vs_reference: oriented(i, ref_idx),
            vs_secondary: sec_idx.and_then(|s| oriented(i, s)),
        })
        .collect();

    Ok(EvalReport {
        reference: opts.reference.clone(),
        secondary_reference: opts.secondary_reference.clone(),
        n_records: y.len(),
        accuracy: n_pos as f64 / y.len() as f64,
        methods: results,
        pairwise,
        dropped,
    })
}

/// Delta with an explicit sign and three decimals, e.g. `+0.008`.
pub fn format_delta(delta: f64) -> String {
    let s = format!("{delta:+.3}");
    if s == "-0.000" {
        "+0.000".to_string()
    } else {
        s
    }
}

/// Significance markers: dagger vs the secondary reference, double dagger vs
/// the reference.
pub fn significance_markers(m: &MethodResult) -> String {
    let mut s = String::new();
    if m.significant_vs_secondary() {
        s.push('†');
    }
    if m.significant_vs_reference() {
        s.push('‡');
    }
    s
}

/// Text table with one column per report: an accuracy row, one row per
/// method and a delta line under every non-reference method.
pub fn format_table(columns: &[(String, EvalReport)]) -> String {
    const NAME_W: usize = 22;
    const COL_W: usize = 14;
    let mut out = String::new();
    out.push_str(&format!("{:<NAME_W$}", "method"));
    for (label, _) in columns {
        out.push_str(&format!("{label:>COL_W$}"));
    }
    out.push('\n');

    out.push_str(&format!("{:<NAME_W$}", "accuracy"));
    for (_, r) in columns {
        out.push_str(&format!("{:>COL_W$}", format!("{:.3}", r.accuracy)));
    }
    out.push('\n');

    let mut names: Vec<&str> = Vec::new();
    for (_, r) in columns {
        for m in &r.methods {
            if !names.contains(&m.method.as_str()) {
                names.push(&m.method);
            }
        }
    }
    names.sort_unstable();
    for name in names {
        out.push_str(&format!("{name:<NAME_W$}"));
        let mut any_delta = false;
        for (_, r) in columns {
            let cell = match r.method(name) {
                Some(m) => {
                    any_delta |= name != r.reference;
                    format!("{:.3}{}", m.auroc, significance_markers(m))
                }
                None => "---".to_string(),
            };
            out.push_str(&pad_left(&cell, COL_W));
        }
        out.push('\n');
        if any_delta {
            out.push_str(&format!("{:<NAME_W$}", ""));
            for (_, r) in columns {
                let cell = match r.method(name) {
                    Some(m) if name != r.reference => format!("({})", format_delta(m.delta)),
                    _ => String::new(),
                };
                out.push_str(&pad_left(&cell, COL_W));
            }
            out.push('\n');
        }
    }
    out
}

fn pad_left(s: &str, width: usize) -> String {
    let len = s.chars().count();
    format!("{}{}", " ".repeat(width.saturating_sub(len)), s)
}

pub const REPORT_CSV_HEADER: &str =
    "method,auroc,n_pos,n_neg,delta,z_vs_reference,p_vs_reference,significant\n";
pub const PAIRWISE_CSV_HEADER: &str = "method_a,method_b,z,p,significant\n";

impl EvalReport {
    pub fn to_csv(&self) -> String {
        let mut out = REPORT_CSV_HEADER.to_string();
        for m in &self.methods {
            let (z, p) = match m.vs_reference {
                Some(r) => (format!("{}", r.z), format!("{}", r.p)),
                None => (String::new(), String::new()),
            };
            out.push_str(&format!(
                "{},{},{},{},{},{},{},{}\n",
                m.method,
                m.auroc,
                m.n_pos,
                m.n_neg,
                format_delta(m.delta),
                z,
                p,
                m.significant_vs_reference()
            ));
        }
        out
    }

    pub fn pairwise_csv(&self) -> String {
        let mut out = PAIRWISE_CSV_HEADER.to_string();
        for r in &self.pairwise {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                r.method_a, r.method_b, r.z, r.p, r.significant
            ));
        }
        out
    }
}

/// Identifies a dataset by the provenance tags used in the matrix.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct DatasetTag {
    pub dataset: String,
    pub retriever: String,
    pub model: String,
}

impl DatasetTag {
    pub fn new(dataset: &str, retriever: &str, model: &str) -> Self {
        DatasetTag {
            dataset: dataset.into(),
            retriever: retriever.into(),
            model: model.into(),
        }
    }

    pub fn from_provenance(p: &Provenance) -> Option<Self> {
        Some(DatasetTag {
            dataset: p.dataset.clone()?,
            retriever: p.retriever.clone()?,
            model: p.model.clone()?,
        })
    }

    pub fn label(&self) -> String {
        format!("{}/{}/{}", self.dataset, self.retriever, self.model)
    }
}

/// Train and test data for one tag.
#[derive(Debug, Clone)]
pub struct MatrixDataset {
    pub tag: DatasetTag,
    pub train: Dataset,
    pub test: Dataset,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MatrixCell {
    pub train: DatasetTag,
    pub eval: DatasetTag,
}

/// Every (train, eval) pair over `tags`, row-major; with `skip_diagonal`
/// the within-distribution cells are left out.
pub fn cross_cells(tags: &[DatasetTag], skip_diagonal: bool) -> Vec<MatrixCell> {
    let mut cells = Vec::new();
    for t in tags {
        for e in tags {
            if skip_diagonal && t == e {
                continue;
            }
            cells.push(MatrixCell {
                train: t.clone(),
                eval: e.clone(),
            });
        }
    }
    cells
}

/// A learned scorer trained on the train side of every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearnedMethod {
    pub name: String,
    pub mask: StreamMask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixConfig {
    pub cells: Vec<MatrixCell>,
    pub learned: Vec<LearnedMethod>,
    pub baselines: Vec<Method>,
    #[serde(default)]
    pub baseline_options: BaselineOptions,
    pub report: ReportOptions,
    pub train: TrainConfig,
    /// Fraction of the train side held out for model selection.
    pub val_fraction: f64,
}

impl MatrixConfig {
    /// LeMUQ (all streams) against the full-stream-only scorer, referenced
    /// to the latter.
    pub fn lemuq_vs_lars(cells: Vec<MatrixCell>, train: TrainConfig) -> Self {
        MatrixConfig {
            cells,
            learned: vec![
                LearnedMethod {
                    name: "lemuq".into(),
                    mask: StreamMask::ALL,
                },
                LearnedMethod {
                    name: "lars".into(),
                    mask: StreamMask::FULL_ONLY,
                },
            ],
            baselines: vec![Method::Confidence],
            baseline_options: BaselineOptions::default(),
            report: ReportOptions::new("lars"),
            train,
            val_fraction: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixReport {
    pub cell: MatrixCell,
    pub report: EvalReport,
}

/// Trains each learned method once per distinct train tag, then evaluates on
/// the eval side of every requested cell. Output order follows `cfg.cells`.
pub fn experiment_matrix(data: &[MatrixDataset], cfg: &MatrixConfig) -> Result<Vec<MatrixReport>> {
    let find = |tag: &DatasetTag| -> Result<&MatrixDataset> {
        data.iter()
            .find(|d| &d.tag == tag)
            .ok_or_else(|| Error::invalid(format!("no dataset for tag {}", tag.label())))
    };
    for cell in &cfg.cells {
        find(&cell.train)?;
        find(&cell.eval)?;
    }

    let mut train_tags: Vec<&DatasetTag> = cfg.cells.iter().map(|c| &c.train).collect();
    train_tags.sort();
    train_tags.dedup();

    let jobs: Vec<(&DatasetTag, &LearnedMethod)> = train_tags
        .iter()
        .flat_map(|t| cfg.learned.iter().map(move |m| (*t, m)))
        .collect();
    let trained: Vec<ScorerModel> = jobs
        .par_iter()
        .map(|(tag, method)| {
            let md = find(tag)?;
            let (train, val) = split_dataset(&md.train, cfg.val_fraction, cfg.train.seed)?;
            let model = ScorerModel::build(&train, method.mask, &cfg.train)?;
            let (model, _) = scorer::train(model, &train, &val, &cfg.train)?;
            Ok(model)
        })
        .collect::<Result<_>>()?;
    let models: HashMap<(&DatasetTag, &str), &ScorerModel> = jobs
        .iter()
        .zip(&trained)
        .map(|((tag, m), model)| ((*tag, m.name.as_str()), model))
        .collect();

    cfg.cells
        .par_iter()
        .map(|cell| {
            let test = &find(&cell.eval)?.test;
            let mut vectors = Vec::new();
            for m in &cfg.learned {
                let model = models[&(&cell.train, m.name.as_str())];
                let mut v = scorer::score_dataset(model, test)?;
                v.method = m.name.clone();
                vectors.push(v);
            }
            for b in &cfg.baselines {
                vectors.push(baselines::score_dataset(*b, test, &cfg.baseline_options));
            }
            let report = report(&vectors, &labels_of(test), &cfg.report)?;
            Ok(MatrixReport {
                cell: cell.clone(),
                report,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn brute_auroc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut acc = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if scores[i] > scores[j] {
                        acc += 1.0;
                    } else if scores[i] == scores[j] {
                        acc += 0.5;
                    }
                }
            }
        }
        acc / pairs
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(auroc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert!(matches!(
            auroc(&[0.1, 0.2], &[1, 1]),
            Err(Error::UndefinedAuroc(_))
        ));
        assert!(auroc(&[0.1], &[1, 0]).is_err());
    }

    #[test]
    fn auroc_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let scores: Vec<f64> = (0..200)
            .map(|_| (rng.gen_range(0..50) as f64) / 10.0)
            .collect();
        let labels: Vec<u8> = (0..200).map(|_| rng.gen_range(0..2)).collect();
        assert!((auroc(&scores, &labels).unwrap() - brute_auroc(&scores, &labels)).abs() < 1e-12);
    }

    #[test]
    fn auroc_complement() {
        let scores = [0.3, 0.1, 0.7, 0.7, 0.2, 0.9];
        let labels = [1, 0, 1, 0, 0, 1];
        let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
        let sum = auroc(&scores, &labels).unwrap() + auroc(&scores, &flipped).unwrap();
        assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn midranks_ties() {
        assert_eq!(midranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn delong_identity_and_antisymmetry() {
        let a = [0.9, 0.4, 0.6, 0.2, 0.8, 0.3, 0.55];
        let b = [0.7, 0.5, 0.3, 0.1, 0.9, 0.35, 0.2];
        let y = [1, 0, 1, 0, 1, 0, 0];
        let same = delong_test(&a, &a, &y).unwrap();
        assert_eq!((same.z, same.p), (0.0, 1.0));
        let ab = delong_test(&a, &b, &y).unwrap();
        let ba = delong_test(&b, &a, &y).unwrap();
        assert!((ab.z + ba.z).abs() < 1e-12);
        assert!((ab.p - ba.p).abs() < 1e-12);
        assert!(ab.p > 0.0 && ab.p <= 1.0);
    }

    #[test]
    fn delong_zero_variance_with_different_aurocs_errors() {
        // Both classifiers perfectly ordered within classes, one inverted.
        let a = [1.0, 0.0];
        let b = [0.0, 1.0];
        assert!(delong_test(&a, &b, &[1, 0]).is_err());
    }

    #[test]
    fn accuracy_counts() {
        use crate::records::GenerationRecord;
        let recs = [1u8, 0, 0, 0]
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let mut r =
                    GenerationRecord::new(format!("r{i}"), "q", vec!["x".into()], vec![0.5]);
                r.label = Some(*l);
                r
            })
            .collect();
        let d = Dataset::new(recs).unwrap();
        assert_eq!(accuracy(&d).unwrap(), 0.25);
    }

    fn vector(name: &str, scores: &[f64]) -> ScoreVector {
        let mut v = ScoreVector::new(name);
        v.scores = scores
            .iter()
            .enumerate()
            .map(|(i, s)| (format!("r{i}"), *s))
            .collect();
        v
    }

    fn labels(ls: &[u8]) -> Vec<(String, u8)> {
        ls.iter()
            .enumerate()
            .map(|(i, l)| (format!("r{i}"), *l))
            .collect()
    }

    #[test]
    fn report_self_reference() {
        let v = vector("lars", &[0.9, 0.1, 0.6, 0.4]);
        let r = report(&[v], &labels(&[1, 0, 1, 0]), &ReportOptions::new("lars")).unwrap();
        assert_eq!(r.methods[0].delta, 0.0);
        assert_eq!(format_delta(r.methods[0].delta), "+0.000");
        assert!(r.methods[0].vs_reference.is_none());
    }

    #[test]
    fn report_three_methods() {
        let y = labels(&[1, 0, 1, 0, 1, 0, 0, 1]);
        let vs = [
            vector("c", &[0.9, 0.1, 0.6, 0.4, 0.3, 0.35, 0.2, 0.8]),
            vector("a", &[0.5, 0.4, 0.3, 0.6, 0.7, 0.1, 0.2, 0.9]),
            vector("b", &[0.2, 0.1, 0.9, 0.3, 0.6, 0.7, 0.5, 0.4]),
        ];
        let r = report(&vs, &y, &ReportOptions::new("b")).unwrap();
        assert_eq!(r.pairwise.len(), 3);
        let names: Vec<&str> = r.methods.iter().map(|m| m.method.as_str()).collect();
        assert_eq!(names, ["a", "b", "c"]);
        let b = r.method("b").unwrap().auroc;
        for m in &r.methods {
            assert_eq!(m.delta, m.auroc - b);
        }
    }

    #[test]
    fn report_drops_records_missing_anywhere() {
        let y = labels(&[1, 0, 1, 0, 1]);
        let a = vector("a", &[0.9, 0.1, 0.6, 0.4, 0.5]);
        let mut b = vector("b", &[0.2, 0.1, 0.9, 0.3, 0.5]);
        b.scores.remove(4);
        let r = report(&[a, b], &y, &ReportOptions::new("a")).unwrap();
        assert_eq!(r.n_records, 4);
        assert_eq!(r.dropped, vec!["r4".to_string()]);
    }

    #[test]
    fn report_rejects_unknown_reference() {
        let v = vector("a", &[0.9, 0.1]);
        assert!(report(&[v], &labels(&[1, 0]), &ReportOptions::new("zzz")).is_err());
    }

    #[test]
    fn delta_formatting() {
        assert_eq!(format_delta(0.855 - 0.847), "+0.008");
        assert_eq!(format_delta(0.829 - 0.841), "-0.012");
        assert_eq!(format_delta(-1e-9), "+0.000");
    }

    #[test]
    fn cross_cells_shapes() {
        let tags = vec![
            DatasetTag::new("evqa", "bm25", "llava"),
            DatasetTag::new("evqa", "evac", "llava"),
            DatasetTag::new("evqa", "bm25_mlm", "llava"),
        ];
        assert_eq!(cross_cells(&tags, false).len(), 9);
        assert_eq!(cross_cells(&tags, true).len(), 6);
        assert_eq!(cross_cells(&tags[..1], false).len(), 1);
    }
}
