//! Non-learned confidence scores. Every scorer maps a record to a real
//! number where higher means "more likely correct".

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::records::{Dataset, GenerationRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Confidence,
    LengthNormalized,
    PredictiveEntropy,
    PTrue,
    Eccentricity,
    ImgPerturbation,
}

impl Method {
    pub const ALL: [Method; 6] = [
        Method::Confidence,
        Method::LengthNormalized,
        Method::PredictiveEntropy,
        Method::PTrue,
        Method::Eccentricity,
        Method::ImgPerturbation,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Confidence => "confidence",
            Method::LengthNormalized => "length_normalized",
            Method::PredictiveEntropy => "predictive_entropy",
            Method::PTrue => "p_true",
            Method::Eccentricity => "eccentricity",
            Method::ImgPerturbation => "img_perturbation",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s.trim())
            .ok_or_else(|| Error::invalid(format!("unknown baseline method {s:?}")))
    }
}

/// Which way the image-perturbation distance is turned into a score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Orientation {
    /// score = +distance
    #[default]
    Positive,
    /// score = -distance
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaselineOptions {
    /// Average token log-probabilities per sample before taking the entropy.
    pub pe_length_normalized: bool,
    pub imgper_orientation: Orientation,
}

impl Default for BaselineOptions {
    fn default() -> Self {
        BaselineOptions {
            pe_length_normalized: true,
            imgper_orientation: Orientation::Positive,
        }
    }
}

fn log_sum(probs: &[f64]) -> f64 {
    probs.iter().map(|p| p.ln()).sum()
}

fn missing(rec: &GenerationRecord, what: &str) -> Error {
    Error::Missing {
        id: rec.id.clone(),
        what: what.to_string(),
    }
}

/// Sequence probability: the product of token probabilities, accumulated in
/// log space.
pub fn confidence(rec: &GenerationRecord) -> f64 {
    log_sum(&rec.stream_full).exp()
}

/// Geometric mean of the token probabilities.
pub fn length_normalized(rec: &GenerationRecord) -> f64 {
    (log_sum(&rec.stream_full) / rec.stream_full.len() as f64).exp()
}

/// `prod p_i^{w_i}`. Weights of 1 give [`confidence`], weights of `1/N`
/// give [`length_normalized`].
pub fn weighted_score(rec: &GenerationRecord, weights: &[f64]) -> Result<f64> {
    if weights.len() != rec.stream_full.len() {
        return Err(Error::invalid(format!(
            "{} weights for {} tokens",
            weights.len(),
            rec.stream_full.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0 && w.is_finite())) {
        return Err(Error::invalid("weights must be finite and nonnegative"));
    }
    let log_score: f64 = rec
        .stream_full
        .iter()
        .zip(weights)
        .map(|(p, w)| w * p.ln())
        .sum();
    Ok(log_score.exp())
}

/// Negated Monte Carlo predictive entropy over the record's samples.
pub fn predictive_entropy(rec: &GenerationRecord, length_normalized: bool) -> Result<f64> {
    let samples = rec.samples.as_deref().unwrap_or_default();
    if samples.len() < 2 {
        return Err(missing(rec, "at least 2 samples"));
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let lp = log_sum(&s.stream_full);
            if length_normalized {
                lp / s.stream_full.len() as f64
            } else {
                lp
            }
        })
        .sum();
    let entropy = -total / samples.len() as f64;
    Ok(-entropy)
}

/// Pass-through of the extractor-computed P(True).
pub fn p_true(rec: &GenerationRecord) -> Result<f64> {
    rec.ptrue_prob.ok_or_else(|| missing(rec, "ptrue_prob"))
}

/// Negated mean L2 distance of the sample embeddings to their centroid.
///
/// This is a dispersion variant of eccentricity, not the graph-Laplacian
/// construction from the literature.
pub fn eccentricity(rec: &GenerationRecord) -> Result<f64> {
    let samples = rec.samples.as_deref().unwrap_or_default();
    let embeddings: Vec<&[f64]> = samples
        .iter()
        .filter_map(|s| s.embedding.as_deref())
        .collect();
    if embeddings.len() < 2 || embeddings.len() != samples.len() {
        return Err(missing(rec, "at least 2 samples with embeddings"));
    }
    let dim = embeddings[0].len();
    if embeddings.iter().any(|e| e.len() != dim) {
        return Err(Error::validation(
            &rec.id,
            "samples",
            "embedding dimension mismatch",
        ));
    }
    let m = embeddings.len() as f64;
    let mut centroid = vec![0.0; dim];
    for e in &embeddings {
        for (c, x) in centroid.iter_mut().zip(*e) {
            *c += x;
        }
    }
    centroid.iter_mut().for_each(|c| *c /= m);
    let spread: f64 = embeddings
        .iter()
        .map(|e| {
            e.iter()
                .zip(&centroid)
                .map(|(x, c)| (x - c) * (x - c))
                .sum::<f64>()
                .sqrt()
        })
        .sum::<f64>()
        / m;
    Ok(-spread)
}

/// Mean absolute difference between the top-1 probabilities with the
/// original image and with a black image.
pub fn img_perturbation(rec: &GenerationRecord, orientation: Orientation) -> Result<f64> {
    let (orig, black) = match (&rec.imgper_top1_original, &rec.imgper_top1_black) {
        (Some(o), Some(b)) => (o, b),
        _ => return Err(missing(rec, "imgper_top1_original/imgper_top1_black")),
    };
    if orig.len() != black.len() || orig.is_empty() {
        return Err(Error::validation(
            &rec.id,
            "imgper_top1_black",
            "length mismatch",
        ));
    }
    let dist = orig
        .iter()
        .zip(black)
        .map(|(a, b)| (a - b).abs())
        .sum::<f64>()
        / orig.len() as f64;
    Ok(match orientation {
        Orientation::Positive => dist,
        Orientation::Negative => -dist,
    })
}

pub fn score_record(method: Method, rec: &GenerationRecord, opts: &BaselineOptions) -> Result<f64> {
    match method {
        Method::Confidence => Ok(confidence(rec)),
        Method::LengthNormalized => Ok(length_normalized(rec)),
        Method::PredictiveEntropy => predictive_entropy(rec, opts.pe_length_normalized),
        Method::PTrue => p_true(rec),
        Method::Eccentricity => eccentricity(rec),
        Method::ImgPerturbation => img_perturbation(rec, opts.imgper_orientation),
    }
}

/// Scores of one method over a dataset, in dataset order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreVector {
    pub method: String,
    pub scores: Vec<(String, f64)>,
    /// Ids of records the method could not score.
    #[serde(default)]
    pub skipped: Vec<String>,
}

impl ScoreVector {
    pub fn new(method: impl Into<String>) -> Self {
        ScoreVector {
            method: method.into(),
            scores: Vec::new(),
            skipped: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<f64> {
        self.scores
            .iter()
            .find(|(rid, _)| rid == id)
            .map(|(_, s)| *s)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for (id, score) in &self.scores {
            out.push_str(&format!(
                "{},{},{}\n",
                csv_field(id),
                csv_field(&self.method),
                score
            ));
        }
        out
    }

    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for (id, score) in &self.scores {
            let row = serde_json::json!({ "record_id": id, "method": self.method, "score": score });
            out.push_str(&row.to_string());
            out.push('\n');
        }
        out
    }
}

pub const SCORE_CSV_HEADER: &str = "record_id,method,score\n";

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

fn split_csv_line(line: &str) -> Vec<String> {
    let mut fields = Vec::new();
    let mut cur = String::new();
    let mut quoted = false;
    let mut chars = line.chars().peekable();
    while let Some(c) = chars.next() {
        match (c, quoted) {
            ('"', true) if chars.peek() == Some(&'"') => {
                cur.push('"');
                chars.next();
            }
            ('"', _) => quoted = !quoted,
            (',', false) => fields.push(std::mem::take(&mut cur)),
            _ => cur.push(c),
        }
    }
    fields.push(cur);
    fields
}

/// Reads `record_id,method,score` rows back into score vectors, one per
/// method in order of first appearance. A header row is optional.
pub fn parse_score_csv(text: &str) -> Result<Vec<ScoreVector>> {
    let mut out: Vec<ScoreVector> = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || (idx == 0 && line.trim() == SCORE_CSV_HEADER.trim()) {
            continue;
        }
        let fields = split_csv_line(line);
        if fields.len() != 3 {
            return Err(Error::invalid(format!(
                "score csv line {}: expected 3 fields",
                idx + 1
            )));
        }
        let score: f64 = fields[2].trim().parse().map_err(|_| {
            Error::invalid(format!(
                "score csv line {}: bad score {:?}",
                idx + 1,
                fields[2]
            ))
        })?;
        let method = &fields[1];
        let pos = match out.iter().position(|v| &v.method == method) {
            Some(p) => p,
            None => {
                out.push(ScoreVector::new(method.clone()));
                out.len() - 1
            }
        };
        out[pos].scores.push((fields[0].clone(), score));
    }
    Ok(out)
}

/// Applies a baseline to every record. Records the method cannot score are
/// listed in `skipped` and logged.
pub fn score_dataset(method: Method, d: &Dataset, opts: &BaselineOptions) -> ScoreVector {
    let results: Vec<(String, Result<f64>)> = d
        .records
        .par_iter()
        .map(|rec| (rec.id.clone(), score_record(method, rec, opts)))
        .collect();
    let mut out = ScoreVector::new(method.name());
    for (id, res) in results {
        match res {
            Ok(s) if s.is_finite() => out.scores.push((id, s)),
            Ok(s) => {
                log::warn!("{method}: non-finite score {s} for record {id}; skipped");
                out.skipped.push(id);
            }
            Err(e) => {
                log::debug!("{method}: {e}; skipped");
                out.skipped.push(id);
            }
        }
    }
    out
}
