use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use uqforge_core::baselines::{confidence, length_normalized, weighted_score};
use uqforge_core::records::GenerationRecord;
use uqforge_core::retrieval::{
    bm25_search, build_index, recall_at_k, Bm25Params, Document, GoldRef, Hit, MatchLevel,
    RetrievalResult,
};

fn doc(id: &str, text: &str) -> Document {
    Document {
        doc_id: id.into(),
        section_id: "0".into(),
        text: text.into(),
    }
}

fn toy_corpus() -> Vec<Document> {
    vec![
        doc("d1", "The cat sat"),
        doc("d2", "the cat, cat dog"),
        doc("d3", "A dog"),
    ]
}

// N = 3, avgdl = 9/3 = 3; "cat" and "dog" each occur in two documents, so
// idf = ln((3 - 2 + 0.5)/(2 + 0.5) + 1) = ln 1.6.
// Length normalizer 1 - b + b*len/avgdl: d1 1.0, d2 0.6 + 0.4*4/3, d3 0.6 + 0.4*2/3.
#[test]
fn bm25_toy_corpus_by_hand() {
    let c = build_index(toy_corpus()).unwrap();
    let p = Bm25Params::default();
    let idf = 1.6f64.ln();
    let d2_norm = 0.6 + 0.4 * 4.0 / 3.0;
    let d3_norm = 0.6 + 0.4 * 2.0 / 3.0;

    let cat = bm25_search(&c, "cat", 10, p).unwrap();
    let expected = [
        ("d2", idf * 2.0 * 1.9 / (2.0 + 0.9 * d2_norm)),
        ("d1", idf * 1.9 / (1.0 + 0.9)),
    ];
    assert_eq!(cat.hits.len(), 2);
    for (hit, (id, score)) in cat.hits.iter().zip(expected) {
        assert_eq!(hit.doc_id, id);
        assert!(
            (hit.score - score).abs() < 1e-9,
            "{id}: {} vs {score}",
            hit.score
        );
    }

    let both = bm25_search(&c, "cat dog CAT", 10, p).unwrap();
    let expected = [
        (
            "d2",
            idf * (2.0 * 1.9 / (2.0 + 0.9 * d2_norm) + 1.9 / (1.0 + 0.9 * d2_norm)),
        ),
        ("d3", idf * 1.9 / (1.0 + 0.9 * d3_norm)),
        ("d1", idf),
    ];
    assert_eq!(both.hits.len(), 3);
    for (hit, (id, score)) in both.hits.iter().zip(expected) {
        assert_eq!(hit.doc_id, id);
        assert!(
            (hit.score - score).abs() < 1e-9,
            "{id}: {} vs {score}",
            hit.score
        );
    }

    // A term in a single document: idf = ln((3 - 1 + 0.5)/(1 + 0.5) + 1) = ln(8/3).
    let sat = bm25_search(&c, "sat", 10, p).unwrap();
    assert_eq!(sat.hits.len(), 1);
    assert!((sat.hits[0].score - (8.0f64 / 3.0).ln()).abs() < 1e-9);
    assert_eq!(bm25_search(&c, "cat", 1, p).unwrap().hits[0].doc_id, "d2");
}

#[test]
fn recall_counting_matches_loop_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut results = Vec::new();
    let mut gold = Vec::new();
    for _ in 0..100 {
        let n_hits = rng.gen_range(0..8);
        let hits: Vec<Hit> = (0..n_hits)
            .map(|_| Hit {
                doc_id: format!("d{}", rng.gen_range(0..6)),
                section_id: format!("s{}", rng.gen_range(0..2)),
                score: 0.0,
            })
            .collect();
        results.push(RetrievalResult { hits });
        gold.push(GoldRef {
            doc_id: format!("d{}", rng.gen_range(0..6)),
            section_id: Some(format!("s{}", rng.gen_range(0..2))),
        });
    }
    for k in 1..=8 {
        for level in [MatchLevel::Document, MatchLevel::Section] {
            let mut count = 0;
            for (r, g) in results.iter().zip(&gold) {
                let mut found = false;
                for (rank, h) in r.hits.iter().enumerate() {
                    if rank < k
                        && h.doc_id == g.doc_id
                        && (level == MatchLevel::Document
                            || Some(&h.section_id) == g.section_id.as_ref())
                    {
                        found = true;
                    }
                }
                if found {
                    count += 1;
                }
            }
            let got = recall_at_k(&results, &gold, k, level).unwrap();
            assert_eq!(got, count as f64 / 100.0, "k = {k}, {level:?}");
        }
    }
}

#[test]
fn sequence_scores_against_direct_products() {
    let rec = GenerationRecord::new(
        "r",
        "q",
        vec!["a".into(), "b".into(), "c".into()],
        vec![0.9, 0.8, 0.7],
    );
    assert!((confidence(&rec) - 0.504).abs() < 1e-12);
    assert!((length_normalized(&rec) - 0.504f64.cbrt()).abs() < 1e-12);
    assert!((weighted_score(&rec, &[1.0, 1.0, 1.0]).unwrap() - confidence(&rec)).abs() < 1e-12);
    assert!(
        (weighted_score(&rec, &[1.0 / 3.0; 3]).unwrap() - length_normalized(&rec)).abs() < 1e-12
    );
    assert!((weighted_score(&rec, &[2.0, 0.0, 1.0]).unwrap() - 0.9 * 0.9 * 0.7).abs() < 1e-12);
}
