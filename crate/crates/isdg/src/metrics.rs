//! Span-extraction scoring: token-overlap F1 and exact match, following the
//! standard SQuAD normalization (lowercase, strip punctuation, drop
//! articles, collapse whitespace). The article list is restricted to the
//! synthetic vocabulary's function words.

use serde::{Deserialize, Serialize};

/// Function words of the synthetic corpora treated as articles during
/// normalization.
pub const SYNTH_ARTICLES: [&str; 2] = ["ta", "te"];

/// Lowercases, removes punctuation characters, drops article tokens, and
/// collapses whitespace.
pub fn normalize_answer(text: &str, articles: &[&str]) -> String {
    let lowered = text.to_lowercase();
    let stripped: String = lowered
        .chars()
        .map(|c| {
            if c.is_alphanumeric() || c.is_whitespace() {
                c
            } else {
                ' '
            }
        })
        .collect();
    stripped
        .split_whitespace()
        .filter(|t| !articles.contains(t))
        .collect::<Vec<_>>()
        .join(" ")
}

fn token_f1(pred: &[&str], gold: &[&str]) -> f64 {
    if pred.is_empty() && gold.is_empty() {
        return 1.0;
    }
    if pred.is_empty() || gold.is_empty() {
        return 0.0;
    }
    // multiset intersection
    let mut counts: std::collections::HashMap<&str, isize> = std::collections::HashMap::new();
    for t in gold {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0usize;
    for t in pred {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / pred.len() as f64;
    let recall = common as f64 / gold.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

/// Token-level F1 and exact match of a prediction against a set of gold
/// answers, taking the maximum over golds.
pub fn squad_f1_em(prediction: &str, golds: &[String]) -> (f64, f64) {
    let pred_norm = normalize_answer(prediction, &SYNTH_ARTICLES);
    let pred_tokens: Vec<&str> = pred_norm.split_whitespace().collect();
    let mut best_f1 = 0.0f64;
    let mut best_em = 0.0f64;
    for gold in golds {
        let gold_norm = normalize_answer(gold, &SYNTH_ARTICLES);
        let gold_tokens: Vec<&str> = gold_norm.split_whitespace().collect();
        let f1 = token_f1(&pred_tokens, &gold_tokens);
        let em = if pred_norm == gold_norm { 1.0 } else { 0.0 };
        best_f1 = best_f1.max(f1);
        best_em = best_em.max(em);
    }
    (best_f1, best_em)
}

/// Per-example evaluation outcome.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExampleResult {
    pub id: String,
    pub prediction: String,
    pub gold_answers: Vec<String>,
    pub f1: f64,
    pub em: f64,
}

/// Corpus-level evaluation report.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub f1: f64,
    pub em: f64,
    pub per_example: Vec<ExampleResult>,
}

impl EvalReport {
    pub fn from_results(per_example: Vec<ExampleResult>) -> EvalReport {
        let n = per_example.len().max(1) as f64;
        let f1 = per_example.iter().map(|r| r.f1).sum::<f64>() / n;
        let em = per_example.iter().map(|r| r.em).sum::<f64>() / n;
        EvalReport {
            f1,
            em,
            per_example,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn golds(items: &[&str]) -> Vec<String> {
        items.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn hand_table_of_ten_cases() {
        let cases: Vec<(&str, Vec<String>, f64, f64)> = vec![
            // identity
            ("kola rizu", golds(&["kola rizu"]), 1.0, 1.0),
            // half-overlap: "a b" vs "b c" -> P = R = 0.5
            ("a b", golds(&["b c"]), 0.5, 0.0),
            // empty prediction vs non-empty gold
            ("", golds(&["kola"]), 0.0, 0.0),
            // both empty
            ("", golds(&[""]), 1.0, 1.0),
            // punctuation stripped
            ("kola.", golds(&["kola"]), 1.0, 1.0),
            // case folded
            ("KoLa", golds(&["kola"]), 1.0, 1.0),
            // article dropped
            ("ta kola", golds(&["kola"]), 1.0, 1.0),
            // multiset counting: "a a" vs "a" -> P = 1/2, R = 1, F1 = 2/3
            ("a a", golds(&["a"]), 2.0 / 3.0, 0.0),
            // maximum over golds
            ("kola", golds(&["rizu", "kola"]), 1.0, 1.0),
            // disjoint
            ("kola", golds(&["rizu"]), 0.0, 0.0),
        ];
        for (pred, gs, want_f1, want_em) in cases {
            let (f1, em) = squad_f1_em(pred, &gs);
            assert!(
                (f1 - want_f1).abs() < 1e-12,
                "{pred:?} vs {gs:?}: f1 {f1} want {want_f1}"
            );
            assert_eq!(em, want_em, "{pred:?} vs {gs:?}");
        }
    }

    #[test]
    fn em_implies_perfect_f1_and_ranges_hold() {
        let samples = [
            ("kola rizu", "kola rizu"),
            ("a b c", "c b a"),
            ("", ""),
            ("x", "y"),
            ("ta te", "ta"),
        ];
        for (p, g) in samples {
            let (f1, em) = squad_f1_em(p, &golds(&[g]));
            assert!((0.0..=1.0).contains(&f1));
            assert!(em == 0.0 || em == 1.0);
            if em == 1.0 {
                assert!((f1 - 1.0).abs() < 1e-12, "em=1 but f1={f1} for {p:?}/{g:?}");
            }
        }
    }

    #[test]
    fn report_averages_per_example_scores() {
        let results = vec![
            ExampleResult {
                id: "a".into(),
                prediction: "x".into(),
                gold_answers: vec!["x".into()],
                f1: 1.0,
                em: 1.0,
            },
            ExampleResult {
                id: "b".into(),
                prediction: "y".into(),
                gold_answers: vec!["z".into()],
                f1: 0.0,
                em: 0.0,
            },
        ];
        let report = EvalReport::from_results(results);
        assert_eq!(report.f1, 0.5);
        assert_eq!(report.em, 0.5);
    }
}
