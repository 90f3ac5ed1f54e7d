//! BM25 over a sectioned corpus, plus Recall@k.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Document {
    pub doc_id: String,
    pub section_id: String,
    pub text: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 0.9, b: 0.4 }
    }
}

/// Lowercase, split on anything that is not alphanumeric. No stemming.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_lowercase)
        .collect()
}

#[derive(Debug, Clone, Default)]
pub struct Corpus {
    docs: Vec<Document>,
    /// term -> (unit index, term frequency)
    postings: HashMap<String, Vec<(usize, u32)>>,
    lengths: Vec<usize>,
    total_len: usize,
}

impl Corpus {
    pub fn add(&mut self, doc: Document) {
        let unit = self.docs.len();
        let tokens = tokenize(&doc.text);
        let mut tf: HashMap<String, u32> = HashMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_default() += 1;
        }
        let mut terms: Vec<(String, u32)> = tf.into_iter().collect();
        terms.sort();
        for (term, count) in terms {
            self.postings.entry(term).or_default().push((unit, count));
        }
        self.lengths.push(tokens.len());
        self.total_len += tokens.len();
        self.docs.push(doc);
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    pub fn avg_len(&self) -> f64 {
        self.total_len as f64 / self.docs.len().max(1) as f64
    }

    pub fn doc_len(&self, unit: usize) -> usize {
        self.lengths[unit]
    }

    pub fn postings(&self, term: &str) -> &[(usize, u32)] {
        self.postings
            .get(term)
            .map(Vec::as_slice)
            .unwrap_or_default()
    }

    pub fn term_frequency(&self, unit: usize, term: &str) -> u32 {
        self.postings(term)
            .iter()
            .find(|(u, _)| *u == unit)
            .map_or(0, |(_, tf)| *tf)
    }

    pub fn document_frequency(&self, term: &str) -> usize {
        self.postings(term).len()
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.document_frequency(term) as f64;
        ((n - df + 0.5) / (df + 0.5) + 1.0).ln()
    }
}

pub fn build_index(docs: Vec<Document>) -> Result<Corpus> {
    if docs.is_empty() {
        return Err(Error::invalid("cannot index an empty corpus"));
    }
    let mut corpus = Corpus::default();
    for d in docs {
        corpus.add(d);
    }
    if corpus.total_len == 0 {
        return Err(Error::invalid("corpus contains no tokens"));
    }
    Ok(corpus)
}

pub fn parse_corpus(text: &str) -> Result<Vec<Document>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|source| Error::Parse {
                line: i + 1,
                source,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Hit {
    pub doc_id: String,
    pub section_id: String,
    pub score: f64,
}

/// Hits in descending score order, ties broken by (doc id, section id).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub hits: Vec<Hit>,
}

/// Scores every unit containing at least one (distinct) query term.
pub fn bm25_search(
    c: &Corpus,
    query: &str,
    topk: usize,
    params: Bm25Params,
) -> Result<RetrievalResult> {
    if topk == 0 {
        return Err(Error::invalid("topk must be at least 1"));
    }
    let mut terms = tokenize(query);
    terms.sort();
    terms.dedup();
    if terms.is_empty() {
        log::warn!("query {query:?} has no tokens");
        return Ok(RetrievalResult::default());
    }
    let avg = c.avg_len();
    let mut scores: HashMap<usize, f64> = HashMap::new();
    for term in &terms {
        let idf = c.idf(term);
        for &(unit, tf) in c.postings(term) {
            let tf = tf as f64;
            let norm = 1.0 - params.b + params.b * c.doc_len(unit) as f64 / avg;
            *scores.entry(unit).or_default() +=
                idf * tf * (params.k1 + 1.0) / (tf + params.k1 * norm);
        }
    }
    let mut hits: Vec<Hit> = scores
        .into_iter()
        .map(|(unit, score)| Hit {
            doc_id: c.docs[unit].doc_id.clone(),
            section_id: c.docs[unit].section_id.clone(),
            score,
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then_with(|| a.doc_id.cmp(&b.doc_id))
            .then_with(|| a.section_id.cmp(&b.section_id))
    });
    hits.truncate(topk);
    Ok(RetrievalResult { hits })
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GoldRef {
    pub doc_id: String,
    #[serde(default)]
    pub section_id: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchLevel {
    #[default]
    Document,
    Section,
}

/// Fraction of queries whose gold unit appears among the first `k` hits.
pub fn recall_at_k(
    results: &[RetrievalResult],
    gold: &[GoldRef],
    k: usize,
    level: MatchLevel,
) -> Result<f64> {
    if results.len() != gold.len() {
        return Err(Error::invalid(format!(
            "{} results for {} gold references",
            results.len(),
            gold.len()
        )));
    }
    if results.is_empty() {
        return Err(Error::invalid("recall over zero queries"));
    }
    let mut found = 0usize;
    for (r, g) in results.iter().zip(gold) {
        let hit = r.hits.iter().take(k).any(|h| {
            h.doc_id == g.doc_id
                && match level {
                    MatchLevel::Document => true,
                    MatchLevel::Section => g.section_id.as_deref() == Some(h.section_id.as_str()),
                }
        });
        if level == MatchLevel::Section && g.section_id.is_none() {
            return Err(Error::invalid(format!(
                "gold for doc {} has no section id",
                g.doc_id
            )));
        }
        found += usize::from(hit);
    }
    Ok(found as f64 / results.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn doc(id: &str, section: &str, text: &str) -> Document {
        Document {
            doc_id: id.into(),
            section_id: section.into(),
            text: text.into(),
        }
    }

    #[test]
    fn single_doc_postings() {
        let c = build_index(vec![doc("a", "0", "Bird")]).unwrap();
        assert_eq!(c.postings("bird"), &[(0, 1)]);
    }

    #[test]
    fn duplicate_terms_counted() {
        let c = build_index(vec![doc("a", "0", "canary, canary; CANARY islands")]).unwrap();
        assert_eq!(c.term_frequency(0, "canary"), 3);
        assert_eq!(c.doc_len(0), 4);
    }

    #[test]
    fn empty_inputs() {
        assert!(build_index(vec![]).is_err());
        assert!(build_index(vec![doc("a", "0", " ,, ")]).is_err());
        let c = build_index(vec![doc("a", "0", "x")]).unwrap();
        assert!(bm25_search(&c, "!!", 3, Bm25Params::default())
            .unwrap()
            .hits
            .is_empty());
        assert!(bm25_search(&c, "x", 0, Bm25Params::default()).is_err());
    }

    #[test]
    fn absent_term_contributes_nothing() {
        let c = build_index(vec![doc("a", "0", "red bird"), doc("b", "0", "blue fish")]).unwrap();
        let p = Bm25Params::default();
        let with = bm25_search(&c, "bird zebra", 5, p).unwrap();
        let without = bm25_search(&c, "bird", 5, p).unwrap();
        assert_eq!(with, without);
    }

    #[test]
    fn ranking_ties_are_stable() {
        let c = build_index(vec![
            doc("b", "1", "cat"),
            doc("a", "2", "cat"),
            doc("a", "1", "cat"),
        ])
        .unwrap();
        let r = bm25_search(&c, "cat", 3, Bm25Params::default()).unwrap();
        let order: Vec<(&str, &str)> = r
            .hits
            .iter()
            .map(|h| (h.doc_id.as_str(), h.section_id.as_str()))
            .collect();
        assert_eq!(order, vec![("a", "1"), ("a", "2"), ("b", "1")]);
    }

    #[test]
    fn recall_edges() {
        let hit = |d: &str| Hit {
            doc_id: d.into(),
            section_id: "s".into(),
            score: 1.0,
        };
        let results = vec![
            RetrievalResult {
                hits: vec![hit("a"), hit("b")],
            },
            RetrievalResult {
                hits: vec![hit("c")],
            },
        ];
        let gold = vec![
            GoldRef {
                doc_id: "a".into(),
                section_id: Some("s".into()),
            },
            GoldRef {
                doc_id: "c".into(),
                section_id: Some("t".into()),
            },
        ];
        assert_eq!(
            recall_at_k(&results, &gold, 1, MatchLevel::Document).unwrap(),
            1.0
        );
        assert_eq!(
            recall_at_k(&results, &gold, 1, MatchLevel::Section).unwrap(),
            0.5
        );
        let never = vec![
            GoldRef {
                doc_id: "z".into(),
                section_id: None
            };
            2
        ];
        assert_eq!(
            recall_at_k(&results, &never, 5, MatchLevel::Document).unwrap(),
            0.0
        );
        assert!(recall_at_k(&results, &never, 5, MatchLevel::Section).is_err());
        assert!(recall_at_k(&results, &gold[..1], 1, MatchLevel::Document).is_err());
    }

    #[test]
    fn corpus_jsonl() {
        let docs =
            parse_corpus("{\"doc_id\":\"a\",\"section_id\":\"0\",\"text\":\"hi\"}\n\n").unwrap();
        assert_eq!(docs.len(), 1);
        assert!(matches!(
            parse_corpus("{"),
            Err(Error::Parse { line: 1, .. })
        ));
    }
}
