use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::baselines;
use crate::binning::{encode_streams, ProbToken, ProbTokenSequence, StreamBinning};
use crate::error::{Error, Result};
use crate::records::{exact_match, Dataset, GenerationRecord, StreamMask};

pub const MIN_MAX_LEN: usize = 16;
pub const MAX_RESPONSES_PER_QUESTION: usize = 5;

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const SEP: usize = 2;
const FIRST_PROB_ID: usize = 3;

/// Lowercased whitespace tokenization.
pub fn tokenize_text(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_lowercase).collect()
}

fn normalize_token(t: &str) -> String {
    t.trim().to_lowercase()
}

/// Token ids: PAD, UNK, SEP, then one id per (stream, bin), then text
/// tokens by descending training frequency.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    k: usize,
    words: Vec<String>,
    index: HashMap<String, usize>,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    k: usize,
    words: Vec<String>,
}

impl TryFrom<VocabularyRepr> for Vocabulary {
    type Error = Error;

    fn try_from(r: VocabularyRepr) -> Result<Self> {
        Vocabulary::from_words(r.k, r.words)
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        VocabularyRepr {
            k: v.k,
            words: v.words,
        }
    }
}

impl Vocabulary {
    pub fn from_words(k: usize, words: Vec<String>) -> Result<Self> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), FIRST_PROB_ID + 4 * k + i).is_some() {
                return Err(Error::invalid(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { k, words, index })
    }

    /// Collects text tokens from questions, contexts and responses, keeping
    /// the `max_words` most frequent (ties broken lexicographically).
    pub fn build(d: &Dataset, k: usize, max_words: usize) -> Self {
        let mut counts: HashMap<String, usize> = HashMap::new();
        for rec in &d.records {
            let words = tokenize_text(&rec.question)
                .into_iter()
                .chain(tokenize_text(&rec.context))
                .chain(rec.response_tokens.iter().map(|t| normalize_token(t)))
                .filter(|w| !w.is_empty());
            for w in words {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut ranked: Vec<(String, usize)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        ranked.truncate(max_words);
        let words = ranked.into_iter().map(|(w, _)| w).collect();
        Self::from_words(k, words).expect("counted words are unique")
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        FIRST_PROB_ID + 4 * self.k + self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn word_id(&self, w: &str) -> usize {
        self.index.get(w).copied().unwrap_or(UNK)
    }

    pub fn prob_id(&self, t: ProbToken) -> Result<usize> {
        if t.bin >= self.k {
            return Err(Error::ModelMismatch(format!(
                "bin {} outside the vocabulary's {} bins",
                t.bin, self.k
            )));
        }
        Ok(FIRST_PROB_ID + t.stream.index() * self.k + t.bin)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum InputItem {
    Question(String),
    Context(String),
    Sep,
    Response(String),
    Prob(ProbToken),
}

/// Question tokens, SEP, context tokens, SEP, then each response token
/// followed by its probability tokens.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScorerInputSequence {
    pub items: Vec<InputItem>,
    pub max_len: usize,
    pub mask: StreamMask,
    pub k: usize,
}

impl ScorerInputSequence {
    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn prob_tokens(&self) -> impl Iterator<Item = ProbToken> + '_ {
        self.items.iter().filter_map(|i| match i {
            InputItem::Prob(t) => Some(*t),
            _ => None,
        })
    }
}

/// The (question, context, response, mapped probabilities, label) tuple the
/// scorer is trained on.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationExample {
    pub record_id: String,
    pub question: String,
    pub context: String,
    pub response_tokens: Vec<String>,
    pub prob_tokens: ProbTokenSequence,
    pub mask: StreamMask,
    pub k: usize,
    pub label: u8,
    /// Highest sequence probability among the responses to its question.
    pub most_likely: bool,
}

impl CalibrationExample {
    pub fn from_record(
        rec: &GenerationRecord,
        bins: &StreamBinning,
        mask: StreamMask,
        label: u8,
    ) -> Result<Self> {
        if label > 1 {
            return Err(Error::validation(&rec.id, "label", "must be 0 or 1"));
        }
        Ok(CalibrationExample {
            record_id: rec.id.clone(),
            question: rec.question.clone(),
            context: rec.context.clone(),
            response_tokens: rec.response_tokens.clone(),
            prob_tokens: encode_streams(rec, bins, mask)?,
            mask,
            k: bins.k(),
            label,
            most_likely: true,
        })
    }

    pub fn to_input(&self, max_len: usize) -> Result<ScorerInputSequence> {
        assemble(
            &self.record_id,
            &self.question,
            &self.context,
            &self.response_tokens,
            &self.prob_tokens,
            self.mask,
            self.k,
            max_len,
        )
    }
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    id: &str,
    question: &str,
    context: &str,
    response: &[String],
    probs: &ProbTokenSequence,
    mask: StreamMask,
    k: usize,
    max_len: usize,
) -> Result<ScorerInputSequence> {
    if max_len < MIN_MAX_LEN {
        return Err(Error::invalid(format!(
            "max_len {max_len} below the minimum of {MIN_MAX_LEN}"
        )));
    }
    let block_len = response.len() * (1 + mask.len());
    if block_len + 2 > max_len {
        return Err(Error::validation(
            id,
            "response_tokens",
            format!("response block of {block_len} items does not fit in max_len {max_len}"),
        ));
    }
    let budget = max_len - block_len - 2;
    let mut q = tokenize_text(question);
    let mut c = tokenize_text(context);
    // Context tail goes first, then the question tail.
    c.truncate(budget.saturating_sub(q.len()));
    q.truncate(budget);

    let mut items = Vec::with_capacity(q.len() + c.len() + 2 + block_len);
    items.extend(q.into_iter().map(InputItem::Question));
    items.push(InputItem::Sep);
    items.extend(c.into_iter().map(InputItem::Context));
    items.push(InputItem::Sep);
    for (tok, ptoks) in response.iter().zip(&probs.positions) {
        items.push(InputItem::Response(normalize_token(tok)));
        items.extend(ptoks.iter().map(|t| InputItem::Prob(*t)));
    }
    Ok(ScorerInputSequence {
        items,
        max_len,
        mask,
        k,
    })
}

/// Builds the scorer input for one record.
pub fn build_input(
    rec: &GenerationRecord,
    bins: &StreamBinning,
    mask: StreamMask,
    max_len: usize,
) -> Result<ScorerInputSequence> {
    let probs = encode_streams(rec, bins, mask)?;
    assemble(
        &rec.id,
        &rec.question,
        &rec.context,
        &rec.response_tokens,
        &probs,
        mask,
        bins.k(),
        max_len,
    )
}

/// Groups records that answer the same (question, image, context) input, in
/// order of first appearance.
pub fn group_generations(d: &Dataset) -> Vec<Vec<GenerationRecord>> {
    let mut index: HashMap<(&str, Option<&str>, &str), usize> = HashMap::new();
    let mut groups: Vec<Vec<GenerationRecord>> = Vec::new();
    for rec in &d.records {
        let key = (
            rec.question.as_str(),
            rec.image_ref.as_deref(),
            rec.context.as_str(),
        );
        match index.get(&key) {
            Some(&g) => groups[g].push(rec.clone()),
            None => {
                index.insert(key, groups.len());
                groups.push(vec![rec.clone()]);
            }
        }
    }
    groups
}

/// One calibration example per generated response, labeled by exact match
/// against the gold answers. Each group holds up to five responses to one
/// input; the one with the highest sequence probability is flagged.
pub fn calibration_from_generations(
    groups: &[Vec<GenerationRecord>],
    bins: &StreamBinning,
    mask: StreamMask,
) -> Result<Vec<CalibrationExample>> {
    let mut out = Vec::new();
    for group in groups {
        if group.is_empty() || group.len() > MAX_RESPONSES_PER_QUESTION {
            return Err(Error::invalid(format!(
                "expected 1..={MAX_RESPONSES_PER_QUESTION} responses per question, got {}",
                group.len()
            )));
        }
        let mut best = 0;
        for (i, rec) in group.iter().enumerate() {
            if baselines::confidence(rec) > baselines::confidence(&group[best]) {
                best = i;
            }
        }
        for (i, rec) in group.iter().enumerate() {
            let gold = rec.gold_answers.as_ref().ok_or_else(|| Error::Missing {
                id: rec.id.clone(),
                what: "gold_answers".into(),
            })?;
            let label = u8::from(exact_match(&rec.response_tokens, gold)?);
            let mut ex = CalibrationExample::from_record(rec, bins, mask, label)?;
            ex.most_likely = i == best;
            out.push(ex);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::records::{ContextSource, Stream};

    fn rec(question: &str, context: &str, n: usize) -> GenerationRecord {
        let mut r = GenerationRecord::new(
            "r",
            question,
            (0..n).map(|i| format!("T{i}")).collect(),
            vec![0.9; n],
        );
        r.context = context.into();
        r.context_source = if context.is_empty() {
            ContextSource::None
        } else {
            ContextSource::Bm25
        };
        for s in [Stream::NoImage, Stream::NoContext, Stream::QuestionOnly] {
            r.set_stream(s, vec![0.3; n]);
        }
        r
    }

    fn bins() -> StreamBinning {
        StreamBinning::uniform(8).unwrap()
    }

    #[test]
    fn empty_context_layout() {
        let seq = build_input(
            &rec("Where is it", "", 2),
            &bins(),
            StreamMask::FULL_ONLY,
            64,
        )
        .unwrap();
        let expected = vec![
            InputItem::Question("where".into()),
            InputItem::Question("is".into()),
            InputItem::Question("it".into()),
            InputItem::Sep,
            InputItem::Sep,
            InputItem::Response("t0".into()),
            InputItem::Prob(ProbToken {
                stream: Stream::Full,
                bin: 7,
            }),
            InputItem::Response("t1".into()),
            InputItem::Prob(ProbToken {
                stream: Stream::Full,
                bin: 7,
            }),
        ];
        assert_eq!(seq.items, expected);
    }

    #[test]
    fn single_token_all_streams() {
        let seq = build_input(&rec("q", "c", 1), &bins(), StreamMask::ALL, 32).unwrap();
        assert_eq!(seq.len(), 1 + 1 + 1 + 1 + 5);
        assert_eq!(
            &seq.items[4..],
            &[
                InputItem::Response("t0".into()),
                InputItem::Prob(ProbToken {
                    stream: Stream::Full,
                    bin: 7
                }),
                InputItem::Prob(ProbToken {
                    stream: Stream::NoImage,
                    bin: 2
                }),
                InputItem::Prob(ProbToken {
                    stream: Stream::NoContext,
                    bin: 2
                }),
                InputItem::Prob(ProbToken {
                    stream: Stream::QuestionOnly,
                    bin: 2
                }),
            ]
        );
    }

    #[test]
    fn long_context_truncated_from_tail() {
        let context: Vec<String> = (0..100).map(|i| format!("c{i}")).collect();
        let r = rec("a b c d", &context.join(" "), 3);
        let seq = build_input(&r, &bins(), StreamMask::ALL, 64).unwrap();
        // Length accounting: 3 tokens x 5 items + 2 separators + 4 question
        // tokens leaves 64 - 15 - 2 - 4 = 43 context tokens.
        assert_eq!(seq.len(), 64);
        let ctx: Vec<&InputItem> = seq
            .items
            .iter()
            .filter(|i| matches!(i, InputItem::Context(_)))
            .collect();
        assert_eq!(ctx.len(), 43);
        assert_eq!(ctx[0], &InputItem::Context("c0".into()));
        assert_eq!(ctx[42], &InputItem::Context("c42".into()));
        assert_eq!(
            seq.items
                .iter()
                .filter(|i| matches!(i, InputItem::Question(_)))
                .count(),
            4
        );
        assert!(matches!(seq.items.last(), Some(InputItem::Prob(_))));
    }

    #[test]
    fn question_truncated_after_context() {
        let question: Vec<String> = (0..40).map(|i| format!("q{i}")).collect();
        let seq = build_input(
            &rec(&question.join(" "), "x y z", 2),
            &bins(),
            StreamMask::ALL,
            16,
        )
        .unwrap();
        assert_eq!(seq.len(), 16);
        assert!(!seq.items.iter().any(|i| matches!(i, InputItem::Context(_))));
        assert_eq!(
            seq.items
                .iter()
                .filter(|i| matches!(i, InputItem::Question(_)))
                .count(),
            4
        );
    }

    #[test]
    fn oversize_response_block_errors() {
        assert!(build_input(&rec("q", "", 4), &bins(), StreamMask::ALL, 16).is_err());
        assert!(build_input(&rec("q", "", 1), &bins(), StreamMask::ALL, 8).is_err());
    }

    #[test]
    fn mask_subset_gives_subsequence_of_prob_tokens() {
        let r = rec("q w", "c", 3);
        let big: Vec<ProbToken> = build_input(&r, &bins(), StreamMask::ALL, 64)
            .unwrap()
            .prob_tokens()
            .collect();
        let small: Vec<ProbToken> = build_input(
            &r,
            &bins(),
            StreamMask::from_streams([Stream::Full, Stream::NoContext]),
            64,
        )
        .unwrap()
        .prob_tokens()
        .collect();
        let mut it = big.iter();
        assert!(small.iter().all(|t| it.any(|b| b == t)));
    }

    #[test]
    fn vocabulary_ids() {
        let d = Dataset::new(vec![rec("the the cat", "the dog", 1)]).unwrap();
        let v = Vocabulary::build(&d, 8, 2);
        assert_eq!(v.len(), 3 + 32 + 2);
        assert_eq!(v.word_id("the"), 35);
        assert_eq!(v.word_id("giraffe"), UNK);
        assert_eq!(
            v.prob_id(ProbToken {
                stream: Stream::QuestionOnly,
                bin: 7
            })
            .unwrap(),
            3 + 31
        );
        assert!(v
            .prob_id(ProbToken {
                stream: Stream::Full,
                bin: 8
            })
            .is_err());
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
    }

    fn generation(id: &str, tokens: &[&str], p: f64) -> GenerationRecord {
        let mut r = GenerationRecord::new(
            id,
            "what bird",
            tokens.iter().map(|t| t.to_string()).collect(),
            vec![p; tokens.len()],
        );
        r.gold_answers = Some(vec!["canary islands".into()]);
        r
    }

    #[test]
    fn calibration_labels_in_input_order() {
        let group = vec![
            generation("a", &["Canary", "Islands"], 0.5),
            generation("b", &["canary", "islands", "."], 0.9),
            generation("c", &["Madeira"], 0.4),
            generation("d", &["Azores"], 0.3),
            generation("e", &["Spain"], 0.2),
        ];
        let ex = calibration_from_generations(
            std::slice::from_ref(&group),
            &bins(),
            StreamMask::FULL_ONLY,
        )
        .unwrap();
        assert_eq!(
            ex.iter().map(|e| e.label).collect::<Vec<_>>(),
            vec![1, 1, 0, 0, 0]
        );
        // 0.9^3 = 0.729 beats 0.5^2 and every single-token response.
        assert_eq!(
            ex.iter().map(|e| e.most_likely).collect::<Vec<_>>(),
            vec![false, true, false, false, false]
        );

        let single =
            calibration_from_generations(&[group[..1].to_vec()], &bins(), StreamMask::FULL_ONLY)
                .unwrap();
        assert_eq!(single.len(), 1);
        assert!(single[0].most_likely);

        let mut six = group.clone();
        six.push(generation("f", &["x"], 0.1));
        assert!(calibration_from_generations(&[six], &bins(), StreamMask::FULL_ONLY).is_err());
    }

    #[test]
    fn groups_by_input() {
        let mut a = generation("a", &["x"], 0.5);
        let b = generation("b", &["y"], 0.5);
        let mut c = generation("c", &["z"], 0.5);
        a.question = "other".into();
        c.image_ref = Some("img.png".into());
        let d = Dataset::new(vec![a, b.clone(), c, generation("d", &["w"], 0.5)]).unwrap();
        let groups = group_generations(&d);
        let ids: Vec<Vec<&str>> = groups
            .iter()
            .map(|g| g.iter().map(|r| r.id.as_str()).collect())
            .collect();
        assert_eq!(ids, vec![vec!["a"], vec!["b", "d"], vec!["c"]]);
    }
}
