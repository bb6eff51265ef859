use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use wwh_core::retrieval::{PersonaIndex, PersonaStore};
use wwh_core::text::content_words;
use wwh_core::PersonaAttribute;

const WORDS: &[&str] = &[
    "hiking", "jazz", "guitar", "sushi", "nurse", "teacher", "cat", "dog", "garden", "tomatoes", "chess", "running",
    "marathon", "coffee", "tea", "painting", "travel", "japan", "baking", "bread", "soccer", "novels", "piano", "swimming",
];

fn sentence(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..6);
    let mut w: Vec<&str> = (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect();
    w.insert(0, "i like the");
    w.join(" ")
}

/// Dense cosine over the union vocabulary, IDF recounted from scratch.
fn oracle(pool: &[PersonaAttribute], query: &str) -> Vec<(String, f64)> {
    let docs: Vec<BTreeSet<String>> = pool.iter().map(|a| content_words(&a.text)).collect();
    let q = content_words(query);
    let vocab: BTreeSet<&String> = docs.iter().flatten().chain(q.iter()).collect();
    let idf = |w: &str| {
        let df = docs.iter().filter(|d| d.contains(w)).count();
        ((1.0 + pool.len() as f64) / (1.0 + df as f64)).ln() + 1.0
    };
    let vec_of = |s: &BTreeSet<String>| -> Vec<f64> {
        vocab.iter().map(|w| if s.contains(*w) { idf(w) } else { 0.0 }).collect()
    };
    let qv = vec_of(&q);
    let mut out: Vec<(String, f64)> = pool
        .iter()
        .zip(&docs)
        .map(|(a, d)| {
            let av = vec_of(d);
            let dot: f64 = av.iter().zip(&qv).map(|(x, y)| x * y).sum();
            let n = av.iter().map(|x| x * x).sum::<f64>().sqrt() * qv.iter().map(|x| x * x).sum::<f64>().sqrt();
            (a.id.clone(), if n == 0.0 { 0.0 } else { dot / n })
        })
        .collect();
    out.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    out
}

#[test]
fn ranking_matches_exhaustive_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..100 {
        let pool: Vec<PersonaAttribute> = (0..20)
            .map(|i| PersonaAttribute::new(format!("a{i:02}"), sentence(&mut rng)))
            .collect();
        let query = sentence(&mut rng);
        let got = PersonaIndex::new(pool.clone()).search(&query, 20);
        let want = oracle(&pool, &query);
        assert_eq!(got.len(), want.len());
        for (g, (id, s)) in got.iter().zip(&want) {
            assert!((g.score - s).abs() < 1e-12, "{query}: {} {} vs {id} {s}", g.id, g.score);
        }
        // equal scores may swap only among equals; ids must agree where scores differ
        let ids: Vec<&str> = got.iter().map(|r| r.id.as_str()).collect();
        let wids: Vec<&str> = want.iter().map(|r| r.0.as_str()).collect();
        assert_eq!(ids, wids);
    }
}

#[test]
fn postings_match_recount_after_many_adds() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut store = PersonaStore::new();
    let mut texts = Vec::new();
    for _ in 0..100 {
        let t = sentence(&mut rng);
        store.add("u", None, &t).unwrap();
        texts.push(t);
    }
    let recount: usize = texts.iter().map(|t| content_words(t).len()).sum();
    assert_eq!(store.index("u").unwrap().postings_count(), recount);
    assert_eq!(store.list("u").unwrap().len(), 100);
}

#[test]
fn retrieve_is_pure() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let pool: Vec<PersonaAttribute> = (0..10).map(|i| PersonaAttribute::new(format!("a{i}"), sentence(&mut rng))).collect();
    let ix = PersonaIndex::new(pool);
    let q = sentence(&mut rng);
    assert_eq!(ix.search(&q, 5), ix.search(&q, 5));
}
