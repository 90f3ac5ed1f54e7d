//! Synthetic records with a known relationship between the four probability
//! streams and correctness.
//!
//! Construction, per record:
//!
//! * correct, context-grounded: full and no-image streams sit at
//!   `high_prob`; no-context and question-only drop by `context_gap`.
//! * correct, parametric: all four streams sit at `high_prob`.
//! * incorrect: full, no-image and no-context share the level
//!   `high_prob - incorrect_margin`; question-only sits `question_gap` lower.
//!
//! Noise is added on the logit scale: a record-level shift shared by all
//! streams (scale `noise * record_spread`, widened by
//! `incorrect_spread_ratio` for incorrect records) plus independent per-token
//! noise at scale `noise`, both standard-logistic. The shared shift hides the
//! level signal a single stream can see while leaving cross-stream
//! differences intact. With `noise = 0` the streams are exactly the levels
//! above.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::eval::auroc;
use crate::records::{ContextSource, Dataset, GenerationRecord, Provenance, Stream};

pub const PROB_FLOOR: f64 = 1e-6;
pub const PROB_CEIL: f64 = 1.0 - 1e-6;
const RESPONSES_PER_ENTITY: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    ContextDependent,
    Parametric,
    Mixed,
}

impl std::str::FromStr for Regime {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "context_dependent" => Ok(Regime::ContextDependent),
            "parametric" => Ok(Regime::Parametric),
            "mixed" => Ok(Regime::Mixed),
            other => Err(Error::invalid(format!("unknown regime {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticWorldConfig {
    pub n: usize,
    pub max_tokens: usize,
    pub correct_rate: f64,
    pub regime: Regime,
    /// Logistic noise scale on the logit of every probability.
    pub noise: f64,
    pub seed: u64,
    pub high_prob: f64,
    pub context_gap: f64,
    pub incorrect_margin: f64,
    pub question_gap: f64,
    pub record_spread: f64,
    pub incorrect_spread_ratio: f64,
    pub question_len: usize,
    pub context_len: usize,
}

impl Default for SyntheticWorldConfig {
    fn default() -> Self {
        SyntheticWorldConfig {
            n: 1000,
            max_tokens: 6,
            correct_rate: 0.35,
            regime: Regime::ContextDependent,
            noise: 0.1,
            seed: 0,
            high_prob: 0.9,
            context_gap: 0.5,
            incorrect_margin: 0.1,
            question_gap: 0.25,
            record_spread: 10.0,
            incorrect_spread_ratio: 1.5,
            question_len: 6,
            context_len: 12,
        }
    }
}

impl SyntheticWorldConfig {
    pub fn validate(&self) -> Result<()> {
        let in_unit = |x: f64| x > 0.0 && x < 1.0;
        if self.n == 0 || self.max_tokens == 0 {
            return Err(Error::invalid("n and max_tokens must be positive"));
        }
        if !(0.0..=1.0).contains(&self.correct_rate) {
            return Err(Error::invalid("correct_rate must lie in [0, 1]"));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite())
            || self.record_spread.is_nan()
            || self.record_spread < 0.0
            || self.incorrect_spread_ratio.is_nan()
            || self.incorrect_spread_ratio < 0.0
        {
            return Err(Error::invalid(
                "noise scales must be finite and nonnegative",
            ));
        }
        let levels = [
            self.high_prob,
            self.high_prob - self.context_gap,
            self.high_prob - self.incorrect_margin,
            self.high_prob - self.incorrect_margin - self.question_gap,
        ];
        if levels.iter().any(|p| !in_unit(*p))
            || self.context_gap < 0.0
            || self.incorrect_margin < 0.0
            || self.question_gap < 0.0
        {
            return Err(Error::invalid("probability levels must stay inside (0, 1)"));
        }
        Ok(())
    }

    /// Levels for (full, no_image, no_context, question_only).
    fn levels(&self, correct: bool, grounded_in_context: bool) -> [f64; 4] {
        let h = self.high_prob;
        match (correct, grounded_in_context) {
            (true, true) => [h, h, h - self.context_gap, h - self.context_gap],
            (true, false) => [h; 4],
            (false, _) => {
                let i = h - self.incorrect_margin;
                [i, i, i, i - self.question_gap]
            }
        }
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn standard_logistic<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.gen_range(f64::EPSILON..1.0);
    (u / (1.0 - u)).ln()
}

fn words<R: Rng>(rng: &mut R, prefix: &str, vocab: usize, count: usize) -> Vec<String> {
    (0..count)
        .map(|_| format!("{prefix}{}", rng.gen_range(0..vocab)))
        .collect()
}

fn generate_record(cfg: &SyntheticWorldConfig, i: usize) -> GenerationRecord {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(i as u64);

    let correct = rng.gen_bool(cfg.correct_rate);
    let grounded = match cfg.regime {
        Regime::ContextDependent => true,
        Regime::Parametric => false,
        Regime::Mixed => rng.gen_bool(0.5),
    };
    let n_tokens = rng.gen_range(1..=cfg.max_tokens);
    let levels = cfg.levels(correct, grounded);
    let spread = cfg.noise
        * cfg.record_spread
        * if correct {
            1.0
        } else {
            cfg.incorrect_spread_ratio
        };
    let shift = spread * standard_logistic(&mut rng);

    let mut streams: [Vec<f64>; 4] = Default::default();
    for (stream, level) in streams.iter_mut().zip(levels) {
        *stream = (0..n_tokens)
            .map(|_| {
                if cfg.noise == 0.0 {
                    level
                } else {
                    let noisy =
                        sigmoid(logit(level) + shift + cfg.noise * standard_logistic(&mut rng));
                    noisy.clamp(PROB_FLOOR, PROB_CEIL)
                }
            })
            .collect();
    }

    let entity = i / RESPONSES_PER_ENTITY;
    let question = format!(
        "what is the {} of entity{entity} {}",
        words(&mut rng, "attr", 20, 1)[0],
        words(&mut rng, "w", 200, cfg.question_len).join(" ")
    );
    let context = words(&mut rng, "w", 200, cfg.context_len.max(1)).join(" ");
    let tokens = words(&mut rng, "a", 100, n_tokens);
    let gold = if correct {
        tokens.join(" ")
    } else {
        format!("{} x{}", tokens.join(" "), rng.gen_range(0..100))
    };

    let [full, no_image, no_context, question_only] = streams;
    let mut rec = GenerationRecord::new(format!("synth-{i:06}"), question, tokens, full);
    rec.context = context;
    rec.context_source = ContextSource::Bm25;
    rec.image_ref = Some(format!("img/entity{entity}.jpg"));
    rec.set_stream(Stream::NoImage, no_image);
    rec.set_stream(Stream::NoContext, no_context);
    rec.set_stream(Stream::QuestionOnly, question_only);
    rec.label = Some(u8::from(correct));
    rec.gold_answers = Some(vec![gold]);
    rec.extra
        .insert("entity".into(), Value::from(format!("entity{entity}")));
    rec.extra.insert(
        "grounding".into(),
        Value::from(if grounded { "context" } else { "parametric" }),
    );
    rec
}

pub fn generate(cfg: &SyntheticWorldConfig) -> Result<Dataset> {
    cfg.validate()?;
    let records: Vec<GenerationRecord> = (0..cfg.n)
        .into_par_iter()
        .map(|i| generate_record(cfg, i))
        .collect();
    Ok(Dataset {
        records,
        provenance: Provenance {
            dataset: Some("synth".into()),
            retriever: Some("bm25".into()),
            model: Some("synthetic".into()),
            group_key: Some("entity".into()),
            notes: Some(format!(
                "regime={:?} noise={} seed={}",
                cfg.regime, cfg.noise, cfg.seed
            )),
        },
    })
}

fn mean_log(probs: &[f64]) -> f64 {
    probs.iter().map(|p| p.ln()).sum::<f64>() / probs.len() as f64
}

/// Per-stream mean log-probabilities, in stream order.
pub fn stream_summaries(rec: &GenerationRecord) -> Option<[f64; 4]> {
    let mut out = [0.0; 4];
    for (o, s) in out.iter_mut().zip(Stream::ALL) {
        *o = mean_log(rec.stream(s)?);
    }
    Some(out)
}

/// Ridge-stabilized logistic regression fitted by Newton's method.
#[derive(Debug, Clone, PartialEq)]
pub struct LogisticRegression {
    /// Bias first, then one weight per feature.
    pub weights: Vec<f64>,
}

impl LogisticRegression {
    pub fn fit(
        features: &[Vec<f64>],
        labels: &[u8],
        ridge: f64,
        iterations: usize,
    ) -> Result<Self> {
        if features.is_empty() || features.len() != labels.len() {
            return Err(Error::invalid(
                "logistic regression needs one label per feature row",
            ));
        }
        let dim = features[0].len() + 1;
        let mut w = vec![0.0; dim];
        let row =
            |x: &[f64]| -> Vec<f64> { std::iter::once(1.0).chain(x.iter().copied()).collect() };
        // Penalized negative log-likelihood, with a stable softplus.
        let objective = |w: &[f64]| -> f64 {
            let nll: f64 = features
                .iter()
                .zip(labels)
                .map(|(x, y)| {
                    let z: f64 = row(x).iter().zip(w).map(|(a, b)| a * b).sum();
                    z.max(0.0) + (-z.abs()).exp().ln_1p() - *y as f64 * z
                })
                .sum();
            nll + 0.5 * ridge * w.iter().map(|v| v * v).sum::<f64>()
        };
        for _ in 0..iterations {
            let mut grad = vec![0.0; dim];
            let mut hess = vec![vec![0.0; dim]; dim];
            for (x, y) in features.iter().zip(labels) {
                let xr = row(x);
                let z: f64 = xr.iter().zip(&w).map(|(a, b)| a * b).sum();
                let p = sigmoid(z);
                let r = p * (1.0 - p);
                for a in 0..dim {
                    grad[a] += (p - *y as f64) * xr[a];
                    for b in 0..dim {
                        hess[a][b] += r * xr[a] * xr[b];
                    }
                }
            }
            for a in 0..dim {
                grad[a] += ridge * w[a];
                hess[a][a] += ridge;
            }
            let step = solve(hess, grad)
                .ok_or_else(|| Error::invalid("singular Hessian in logistic regression"))?;
            // Step halving keeps Newton from overshooting on nearly separable data.
            let current = objective(&w);
            let mut t = 1.0;
            let mut next: Vec<f64> = w.iter().zip(&step).map(|(a, s)| a - s).collect();
            while objective(&next) > current && t > 1e-10 {
                t *= 0.5;
                next = w.iter().zip(&step).map(|(a, s)| a - t * s).collect();
            }
            let size: f64 = w
                .iter()
                .zip(&next)
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            w = next;
            if size < 1e-10 {
                break;
            }
        }
        Ok(LogisticRegression { weights: w })
    }

    pub fn decision(&self, x: &[f64]) -> f64 {
        self.weights[0]
            + self.weights[1..]
                .iter()
                .zip(x)
                .map(|(a, b)| a * b)
                .sum::<f64>()
    }
}

/// Gaussian elimination with partial pivoting.
fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Option<Vec<f64>> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))?;
        if a[pivot][col].abs() < 1e-300 {
            return None;
        }
        a.swap(col, pivot);
        b.swap(col, pivot);
        for r in col + 1..n {
            let f = a[r][col] / a[col][col];
            let (top, bottom) = a.split_at_mut(r);
            for (x, y) in bottom[0][col..].iter_mut().zip(&top[col][col..]) {
                *x -= f * y;
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        let s: f64 = (r + 1..n).map(|c| a[r][c] * x[c]).sum();
        x[r] = (b[r] - s) / a[r][r];
    }
    Some(x)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReferenceAuroc {
    /// Mean log-probability of the full stream, used directly as the score.
    pub single_stream: f64,
    /// Logistic regression on the four per-stream mean log-probabilities.
    pub multi_stream: f64,
}

/// Reference AUROCs on a fresh draw (seed `cfg.seed + 1`): the first half
/// fits the multi-stream regression, the second half is scored.
pub fn bayes_reference_auroc(cfg: &SyntheticWorldConfig) -> Result<ReferenceAuroc> {
    let fresh = SyntheticWorldConfig {
        seed: cfg.seed.wrapping_add(1),
        ..cfg.clone()
    };
    let d = generate(&fresh)?;
    let half = d.len() / 2;
    if half == 0 {
        return Err(Error::invalid(
            "need at least 2 records for the reference classifiers",
        ));
    }
    let feats: Vec<Vec<f64>> = d
        .records
        .iter()
        .map(|r| {
            stream_summaries(r)
                .expect("synthetic records carry all streams")
                .to_vec()
        })
        .collect();
    let labels: Vec<u8> = d
        .records
        .iter()
        .map(|r| r.label.expect("synthetic records are labeled"))
        .collect();

    let model = LogisticRegression::fit(&feats[..half], &labels[..half], 1e-4, 50)?;
    let test_labels = &labels[half..];
    let single: Vec<f64> = feats[half..].iter().map(|f| f[0]).collect();
    let multi: Vec<f64> = feats[half..].iter().map(|f| model.decision(f)).collect();
    Ok(ReferenceAuroc {
        single_stream: auroc(&single, test_labels)?,
        multi_stream: auroc(&multi, test_labels)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn mean(v: &[f64]) -> f64 {
        v.iter().sum::<f64>() / v.len() as f64
    }

    #[test]
    fn noiseless_gap_is_exact() {
        let cfg = SyntheticWorldConfig {
            n: 200,
            noise: 0.0,
            correct_rate: 1.0,
            ..Default::default()
        };
        let d = generate(&cfg).unwrap();
        let rec = &d.records[0];
        assert_eq!(rec.label, Some(1));
        let gap = mean(&rec.stream_full) - mean(rec.stream_no_context.as_ref().unwrap());
        assert!((gap - cfg.context_gap).abs() < 1e-12);
    }

    #[test]
    fn noiseless_sign_identifies_grounded_correct_records() {
        let cfg = SyntheticWorldConfig {
            n: 300,
            noise: 0.0,
            ..Default::default()
        };
        for rec in generate(&cfg).unwrap().records {
            let diff =
                mean_log(&rec.stream_full) - mean_log(rec.stream_no_context.as_ref().unwrap());
            assert_eq!(diff > 0.0, rec.label == Some(1));
        }
    }

    #[test]
    fn seeded_determinism_and_validity() {
        let cfg = SyntheticWorldConfig {
            n: 150,
            regime: Regime::Mixed,
            noise: 0.7,
            ..Default::default()
        };
        let a = generate(&cfg).unwrap();
        let b = generate(&cfg).unwrap();
        assert_eq!(a, b);
        a.validate().unwrap();
        for rec in &a.records {
            for s in Stream::ALL {
                let probs = rec.stream(s).unwrap();
                assert_eq!(probs.len(), rec.len());
                assert!(probs.iter().all(|p| (PROB_FLOOR..=PROB_CEIL).contains(p)));
            }
            assert_eq!(rec.resolved_label(), rec.label);
            if let Some(g) = &rec.gold_answers {
                assert_eq!(
                    crate::records::exact_match(&rec.response_tokens, g).unwrap(),
                    rec.label == Some(1)
                );
            }
        }
        let c = generate(&SyntheticWorldConfig { seed: 1, ..cfg }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_bad_config() {
        assert!(generate(&SyntheticWorldConfig {
            n: 0,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SyntheticWorldConfig {
            correct_rate: 1.5,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SyntheticWorldConfig {
            context_gap: 0.95,
            ..Default::default()
        })
        .is_err());
        assert!(generate(&SyntheticWorldConfig {
            noise: -1.0,
            ..Default::default()
        })
        .is_err());
    }

    #[test]
    fn noiseless_references_are_perfect() {
        for regime in [Regime::ContextDependent, Regime::Parametric] {
            let r = bayes_reference_auroc(&SyntheticWorldConfig {
                n: 400,
                noise: 0.0,
                regime,
                ..Default::default()
            })
            .unwrap();
            assert_eq!((r.single_stream, r.multi_stream), (1.0, 1.0));
        }
    }

    #[test]
    fn multi_stream_beats_single_stream() {
        let r = bayes_reference_auroc(&SyntheticWorldConfig {
            n: 2000,
            noise: 0.1,
            seed: 3,
            ..Default::default()
        })
        .unwrap();
        assert!(r.single_stream < r.multi_stream, "{r:?}");
    }

    #[test]
    fn references_degrade_with_noise() {
        // Weakly decreasing, up to the sampling error of a 1000-record test half.
        let mut prev = ReferenceAuroc {
            single_stream: 1.0,
            multi_stream: 1.0,
        };
        for noise in [0.0, 0.05, 0.2, 0.5, 1.0] {
            let r = bayes_reference_auroc(&SyntheticWorldConfig {
                n: 2000,
                noise,
                seed: 5,
                ..Default::default()
            })
            .unwrap();
            assert!(
                r.single_stream <= prev.single_stream + 0.01,
                "noise {noise}: {r:?} after {prev:?}"
            );
            assert!(
                r.multi_stream <= prev.multi_stream + 0.01,
                "noise {noise}: {r:?} after {prev:?}"
            );
            prev = r;
        }
        assert!(prev.multi_stream < 1.0);
    }

    #[test]
    fn logistic_regression_recovers_direction() {
        let xs: Vec<Vec<f64>> = (0..200).map(|i| vec![(i as f64 - 100.0) / 50.0]).collect();
        let ys: Vec<u8> = (0..200).map(|i| u8::from((i * 7919) % 200 < i)).collect();
        let m = LogisticRegression::fit(&xs, &ys, 1e-6, 50).unwrap();
        assert!(m.weights[1] > 0.0);
    }
}
