use proptest::prelude::*;

use mmt_core::corpus::StopwordList;
use mmt_core::query_builder::{build_queries, build_training_queries, QueryMode, TfidfModel};

fn sentences() -> impl Strategy<Value = Vec<Vec<String>>> {
    prop::collection::vec(prop::collection::vec(0u8..12, 1..10), 2..30).prop_map(|docs| {
        docs.into_iter()
            .map(|d| d.into_iter().map(|t| if t < 2 { "the".to_owned() } else { format!("w{t}") }).collect())
            .collect()
    })
}

fn stops() -> StopwordList {
    StopwordList::new(["the"])
}

fn fit(docs: &[Vec<String>]) -> Option<TfidfModel> {
    TfidfModel::fit(docs.iter().map(Vec::as_slice), &stops()).ok()
}

proptest! {
    #[test]
    fn term_frequencies_normalize(docs in sentences()) {
        let Some(model) = fit(&docs) else { return Ok(()) };
        for sid in 0..docs.len() {
            let doc = model.document(sid).unwrap();
            if doc.is_empty() {
                continue;
            }
            let sum: f64 = doc.terms().iter().map(|(_, n)| *n as f64 / doc.total() as f64).sum();
            prop_assert!((sum - 1.0).abs() < 1e-12);
            for (t, _) in doc.terms() {
                let df = model.doc_freq(t);
                prop_assert!(df >= 1 && df <= model.num_docs());
            }
        }
    }

    #[test]
    fn scores_ignore_the_order_of_other_documents(docs in sentences(), rot in 1usize..30) {
        let Some(model) = fit(&docs) else { return Ok(()) };
        let n = docs.len();
        let k = rot % n;
        // move sentence 0 to position n-k, rotating all others
        let rotated: Vec<Vec<String>> = docs.iter().cycle().skip(k).take(n).cloned().collect();
        let other = fit(&rotated).unwrap();
        let moved = (n - k) % n;
        if let Some(doc) = model.document(0).filter(|d| !d.is_empty()) {
            for (t, _) in doc.terms() {
                prop_assert_eq!(model.score(0, t).unwrap(), other.score(moved, t).unwrap());
            }
        }
    }

    #[test]
    fn ranking_is_a_permutation_and_base_independent(docs in sentences()) {
        let Some(model) = fit(&docs) else { return Ok(()) };
        for sid in 0..docs.len() {
            let doc = model.document(sid).unwrap();
            if doc.is_empty() {
                continue;
            }
            let ranked = model.rank_terms(sid).unwrap();
            let mut a: Vec<&str> = ranked.iter().map(String::as_str).collect();
            let mut b: Vec<&str> = doc.terms().iter().map(|(t, _)| t.as_str()).collect();
            // non-increasing scores
            let scores: Vec<f64> = ranked.iter().map(|t| model.score(sid, t).unwrap()).collect();
            prop_assert!(scores.windows(2).all(|w| w[0] >= w[1]));
            // the same order under log base 2 (positive rescaling of idf)
            let mut by2: Vec<(usize, &str, f64)> = doc
                .terms()
                .iter()
                .enumerate()
                .map(|(i, (t, n))| {
                    let idf2 = (model.num_docs() as f64 / (1 + model.doc_freq(t)) as f64).log2();
                    (i, t.as_str(), *n as f64 / doc.total() as f64 * idf2)
                })
                .collect();
            by2.sort_by(|x, y| y.2.partial_cmp(&x.2).unwrap().then(x.0.cmp(&y.0)));
            let order2: Vec<&str> = by2.iter().map(|x| x.1).collect();
            prop_assert_eq!(&order2, &a);
            a.sort_unstable();
            b.sort_unstable();
            prop_assert_eq!(a, b);
        }
    }

    #[test]
    fn each_query_extends_the_previous(docs in sentences(), m in 1usize..9) {
        let Some(model) = fit(&docs) else { return Ok(()) };
        for set in build_training_queries(&model, &docs, m, QueryMode::Concat).unwrap() {
            prop_assert_eq!(set.queries.len(), m);
            prop_assert_eq!(&set.queries[0], &set.ranked[0]);
            for j in 1..m {
                let next = &set.ranked[j % set.ranked.len()];
                prop_assert_eq!(&set.queries[j], &format!("{} {}", set.queries[j - 1], next));
            }
        }
    }

    #[test]
    fn single_mode_cycles_terms(ranked in prop::collection::vec("[a-z]{1,5}", 1..6), m in 1usize..12) {
        let q = build_queries(&ranked, m, QueryMode::Single).unwrap();
        for (j, qj) in q.iter().enumerate() {
            prop_assert_eq!(qj, &ranked[j % ranked.len()]);
        }
    }
}
