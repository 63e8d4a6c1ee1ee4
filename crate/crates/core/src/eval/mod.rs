//! Relevance metrics and run comparison: Rouge-n F-measure, the best-of-block
//! Rouge-n maximum, weighted w-Rouge, significance testing, and the CSV
//! evaluation report.

pub mod ttest;

pub use ttest::{paired_t_test, reg_inc_beta, t_test_two_sided, SignificanceResult, TTestError};

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("empty instance list")]
    EmptyInstances,
    #[error("suggestion block must hold 1 to 3 responses, got {0}")]
    BadBlockSize(usize),
    #[error("w-Rouge weights must be non-negative with a positive sum")]
    BadWeights,
    #[error("runs were evaluated on different test sets")]
    MismatchedTestSets,
    #[error(transparent)]
    TTest(#[from] TTestError),
}

/// Lowercased alphanumeric word runs; punctuation separates and is dropped.
pub fn rouge_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

fn ngram_counts(tokens: &[String], n: usize) -> HashMap<&[String], u64> {
    let mut counts: HashMap<&[String], u64> = HashMap::new();
    if tokens.len() >= n {
        for gram in tokens.windows(n) {
            *counts.entry(gram).or_insert(0) += 1;
        }
    }
    counts
}

/// Rouge-n F-measure with clipped multiset overlap; 0 when either side has
/// no n-grams.
pub fn rouge_n(golden: &str, candidate: &str, n: usize) -> f64 {
    assert!((1..=3).contains(&n), "n must be 1, 2, or 3");
    let g_tokens = rouge_tokens(golden);
    let c_tokens = rouge_tokens(candidate);
    let g_counts = ngram_counts(&g_tokens, n);
    let c_counts = ngram_counts(&c_tokens, n);
    let g_total: u64 = g_counts.values().sum();
    let c_total: u64 = c_counts.values().sum();
    if g_total == 0 || c_total == 0 {
        return 0.0;
    }
    let overlap: u64 = c_counts
        .iter()
        .map(|(gram, &count)| count.min(g_counts.get(gram).copied().unwrap_or(0)))
        .sum();
    if overlap == 0 {
        return 0.0;
    }
    let precision = overlap as f64 / c_total as f64;
    let recall = overlap as f64 / g_total as f64;
    2.0 * precision * recall / (precision + recall)
}

/// A golden reply against its predicted suggestion block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalInstance {
    pub golden: String,
    pub block: Vec<String>,
}

impl EvalInstance {
    pub fn new(golden: String, block: Vec<String>) -> Self {
        EvalInstance { golden, block }
    }

    pub fn validate(&self) -> Result<(), EvalError> {
        if self.block.is_empty() || self.block.len() > 3 {
            return Err(EvalError::BadBlockSize(self.block.len()));
        }
        Ok(())
    }
}

/// Best Rouge-n over the block.
pub fn rouge_n_max(instance: &EvalInstance, n: usize) -> f64 {
    instance
        .block
        .iter()
        .map(|candidate| rouge_n(&instance.golden, candidate, n))
        .fold(0.0, f64::max)
}

/// Weights over n = 1, 2, 3, normalized to sum to 1 on construction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WRougeWeights {
    weights: [f64; 3],
}

impl WRougeWeights {
    pub fn new(w1: f64, w2: f64, w3: f64) -> Result<Self, EvalError> {
        let sum = w1 + w2 + w3;
        if w1 < 0.0 || w2 < 0.0 || w3 < 0.0 || sum <= 0.0 || !sum.is_finite() {
            return Err(EvalError::BadWeights);
        }
        Ok(WRougeWeights { weights: [w1 / sum, w2 / sum, w3 / sum] })
    }

    pub fn uniform() -> Self {
        WRougeWeights { weights: [1.0 / 3.0; 3] }
    }

    pub fn get(&self, n: usize) -> f64 {
        self.weights[n - 1]
    }
}

impl Default for WRougeWeights {
    fn default() -> Self {
        WRougeWeights::uniform()
    }
}

/// Weighted sum of Rouge-n maxima for a single instance.
pub fn w_rouge_instance(instance: &EvalInstance, weights: &WRougeWeights) -> f64 {
    (1..=3).map(|n| weights.get(n) * rouge_n_max(instance, n)).sum()
}

/// Macro-average of per-instance w-Rouge over a test slice.
pub fn w_rouge(instances: &[EvalInstance], weights: &WRougeWeights) -> Result<f64, EvalError> {
    if instances.is_empty() {
        return Err(EvalError::EmptyInstances);
    }
    for i in instances {
        i.validate()?;
    }
    let total: f64 = instances.iter().map(|i| w_rouge_instance(i, weights)).sum();
    Ok(total / instances.len() as f64)
}

/// Everything needed to compare one evaluated training run against another.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunEvaluation {
    pub name: String,
    pub wall_clock_to_best: f64,
    pub w_rouge: f64,
    pub per_instance: Vec<f64>,
    pub test_set_hash: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    /// Faster (or equal) with no significant relevance drop.
    CompressionSuccess,
    /// Statistically significant w-Rouge drop versus the baseline.
    RelevanceDrop,
    /// No time saved and no significant change.
    Neutral,
}

/// Paired comparison of a candidate run against a baseline run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Comparison {
    pub baseline: String,
    pub candidate: String,
    pub delta_wall_clock_pct: f64,
    pub delta_w_rouge_pct: f64,
    pub p_value: f64,
    pub significant: bool,
    /// Marks statistically significant w-Rouge changes (either direction).
    pub dagger: bool,
    pub verdict: Verdict,
}

/// Per-instance paired significance plus wall-clock and relevance deltas.
/// Both runs must have been evaluated on the identical test instances.
pub fn compare_runs(baseline: &RunEvaluation, candidate: &RunEvaluation) -> Result<Comparison, EvalError> {
    if baseline.test_set_hash != candidate.test_set_hash
        || baseline.per_instance.len() != candidate.per_instance.len()
    {
        return Err(EvalError::MismatchedTestSets);
    }
    let sig = paired_t_test(&candidate.per_instance, &baseline.per_instance)?;
    let delta_wall_clock_pct = if baseline.wall_clock_to_best > 0.0 {
        100.0 * (candidate.wall_clock_to_best - baseline.wall_clock_to_best)
            / baseline.wall_clock_to_best
    } else {
        0.0
    };
    let delta_w_rouge_pct = if baseline.w_rouge != 0.0 {
        100.0 * (candidate.w_rouge - baseline.w_rouge) / baseline.w_rouge
    } else {
        0.0
    };
    let dropped = sig.significant && candidate.w_rouge < baseline.w_rouge;
    let verdict = if dropped {
        Verdict::RelevanceDrop
    } else if candidate.wall_clock_to_best < baseline.wall_clock_to_best {
        Verdict::CompressionSuccess
    } else {
        Verdict::Neutral
    };
    Ok(Comparison {
        baseline: baseline.name.clone(),
        candidate: candidate.name.clone(),
        delta_wall_clock_pct,
        delta_w_rouge_pct,
        p_value: sig.p_value,
        significant: sig.significant,
        dagger: sig.significant,
        verdict,
    })
}

/// One row of the evaluation CSV.
#[derive(Debug, Clone, Serialize)]
pub struct CsvRow {
    pub config: String,
    pub total_params: u64,
    pub trainable_params: u64,
    pub wall_clock_s: f64,
    pub w_rouge: f64,
    pub p_vs_baseline: Option<f64>,
    pub significant: Option<bool>,
}

/// Renders rows with the fixed column set
/// `config,total_params,trainable_params,wall_clock_s,w_rouge,p_vs_baseline,significant`.
pub fn write_csv(rows: &[CsvRow]) -> Result<String, csv::Error> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "config",
        "total_params",
        "trainable_params",
        "wall_clock_s",
        "w_rouge",
        "p_vs_baseline",
        "significant",
    ])?;
    for row in rows {
        w.write_record([
            row.config.clone(),
            row.total_params.to_string(),
            row.trainable_params.to_string(),
            format!("{:.3}", row.wall_clock_s),
            format!("{:.6}", row.w_rouge),
            row.p_vs_baseline.map(|p| format!("{p:.6}")).unwrap_or_default(),
            row.significant.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    Ok(String::from_utf8(w.into_inner().expect("in-memory writer")).expect("utf8 csv"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn hand_counted_unigram_and_bigram_cases() {
        // golden "thank you so much", candidate "thank you"
        let f1 = rouge_n("thank you so much", "thank you", 1);
        assert!((f1 - 2.0 / 3.0).abs() < 1e-12, "{f1}"); // P=1, R=1/2
        let f2 = rouge_n("thank you so much", "thank you", 2);
        assert!((f2 - 0.5).abs() < 1e-12, "{f2}"); // P=1, R=1/3
    }

    #[test]
    fn identity_scores_one_for_all_fitting_n() {
        for n in 1..=3 {
            assert_eq!(rouge_n("see you next week", "see you next week", n), 1.0);
        }
        // two tokens: no trigram on either side -> 0
        assert_eq!(rouge_n("thank you", "thank you", 3), 0.0);
    }

    #[test]
    fn rouge_is_symmetric_in_its_arguments() {
        let pairs = [
            ("thanks so much", "thanks"),
            ("please send the report", "send the report please"),
            ("a b a b", "b a b"),
        ];
        for (x, y) in pairs {
            for n in 1..=3 {
                assert_eq!(rouge_n(x, y, n), rouge_n(y, x, n));
            }
        }
    }

    #[test]
    fn clipped_multiset_overlap() {
        // golden has one "ok", candidate repeats it three times:
        // overlap clipped to 1, P = 1/3, R = 1 -> F = 0.5
        let f = rouge_n("ok", "ok ok ok", 1);
        assert!((f - 0.5).abs() < 1e-12, "{f}");
    }

    #[test]
    fn punctuation_and_case_are_normalized() {
        assert_eq!(rouge_n("Thanks!", "thanks", 1), 1.0);
        assert_eq!(rouge_n("Thank-you", "thank you", 2), 1.0);
    }

    #[test]
    fn empty_side_scores_zero() {
        assert_eq!(rouge_n("", "thanks", 1), 0.0);
        assert_eq!(rouge_n("thanks", "", 1), 0.0);
        assert_eq!(rouge_n("!!", "thanks", 1), 0.0);
    }

    #[test]
    fn block_maximum_and_monotonicity() {
        let golden = "thank you so much".to_string();
        let mut instance = EvalInstance::new(golden.clone(), vec!["nothing shared".into()]);
        let base = rouge_n_max(&instance, 1);
        assert_eq!(base, 0.0);
        instance.block.push("thank you".into());
        let better = rouge_n_max(&instance, 1);
        assert!((better - 2.0 / 3.0).abs() < 1e-12);
        instance.block.push(golden.clone());
        assert_eq!(rouge_n_max(&instance, 1), 1.0);
    }

    #[test]
    fn w_rouge_hand_fixture() {
        // Rouge-n_max = (2/3, 1/2, 0) with uniform weights -> 0.3889
        let instance = EvalInstance::new(
            "thank you so much".into(),
            vec!["thank you".into()],
        );
        let w = w_rouge_instance(&instance, &WRougeWeights::uniform());
        assert!((w - 0.388888888888).abs() < 1e-6, "{w}");
    }

    #[test]
    fn w_rouge_macro_average_and_bounds() {
        let perfect = EvalInstance::new("ok then".into(), vec!["ok then".into()]);
        assert!((w_rouge_instance(&perfect, &WRougeWeights::uniform()) - 2.0 / 3.0).abs() < 1e-12);
        // blocks containing their golden with >= 3 tokens score exactly 1
        let full = EvalInstance::new("see you next week".into(), vec!["see you next week".into()]);
        assert_eq!(w_rouge_instance(&full, &WRougeWeights::uniform()), 1.0);
        let zero = EvalInstance::new("alpha".into(), vec!["omega".into()]);
        let mean = w_rouge(&[full, zero], &WRougeWeights::uniform()).unwrap();
        assert!((mean - 0.5).abs() < 1e-12);
        assert!(w_rouge(&[], &WRougeWeights::uniform()).is_err());
    }

    #[test]
    fn weights_normalize_and_reject_bad_input() {
        let w = WRougeWeights::new(2.0, 1.0, 1.0).unwrap();
        assert!((w.get(1) - 0.5).abs() < 1e-12);
        assert!(WRougeWeights::new(-1.0, 1.0, 1.0).is_err());
        assert!(WRougeWeights::new(0.0, 0.0, 0.0).is_err());
    }

    #[test]
    fn naive_oracle_equivalence_on_random_short_strings() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let words = ["ok", "thanks", "see", "you", "then", "sure", "report"];
        for _ in 0..500 {
            let mk = |rng: &mut rand_chacha::ChaCha8Rng| {
                let len = rng.gen_range(0..8);
                (0..len).map(|_| words[rng.gen_range(0..words.len())]).collect::<Vec<_>>().join(" ")
            };
            let golden = mk(&mut rng);
            let cand = mk(&mut rng);
            for n in 1..=3 {
                let mine = rouge_n(&golden, &cand, n);
                let reference = naive_rouge(&golden, &cand, n);
                assert!(
                    (mine - reference).abs() < 1e-12,
                    "{golden:?} vs {cand:?} n={n}: {mine} vs {reference}"
                );
            }
        }
    }

    /// Brute-force reference: enumerate n-grams as vectors and count clipped
    /// matches quadratically.
    fn naive_rouge(golden: &str, candidate: &str, n: usize) -> f64 {
        let g: Vec<String> = golden.to_lowercase().split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty()).map(String::from).collect();
        let c: Vec<String> = candidate.to_lowercase().split(|c: char| !c.is_alphanumeric())
            .filter(|w| !w.is_empty()).map(String::from).collect();
        let grams = |t: &[String]| -> Vec<Vec<String>> {
            if t.len() < n {
                vec![]
            } else {
                t.windows(n).map(|w| w.to_vec()).collect()
            }
        };
        let gg = grams(&g);
        let cg = grams(&c);
        if gg.is_empty() || cg.is_empty() {
            return 0.0;
        }
        let mut used = vec![false; gg.len()];
        let mut overlap = 0u64;
        for gram in &cg {
            if let Some(pos) = gg.iter().enumerate().position(|(i, g)| !used[i] && g == gram) {
                used[pos] = true;
                overlap += 1;
            }
        }
        if overlap == 0 {
            return 0.0;
        }
        let p = overlap as f64 / cg.len() as f64;
        let r = overlap as f64 / gg.len() as f64;
        2.0 * p * r / (p + r)
    }

    fn run(name: &str, wc: f64, scores: Vec<f64>) -> RunEvaluation {
        let mean = scores.iter().sum::<f64>() / scores.len() as f64;
        RunEvaluation {
            name: name.into(),
            wall_clock_to_best: wc,
            w_rouge: mean,
            per_instance: scores,
            test_set_hash: "same".into(),
        }
    }

    #[test]
    fn identical_runs_compare_neutral() {
        let a = run("base", 100.0, vec![0.5, 0.6, 0.7, 0.4, 0.55]);
        let cmp = compare_runs(&a, &a.clone()).unwrap();
        assert_eq!(cmp.delta_wall_clock_pct, 0.0);
        assert_eq!(cmp.delta_w_rouge_pct, 0.0);
        assert!(!cmp.significant);
        assert!(!cmp.dagger);
        assert_eq!(cmp.verdict, Verdict::Neutral);
    }

    #[test]
    fn faster_without_significant_drop_is_compression_success() {
        let base = run("base", 100.0, vec![0.5, 0.6, 0.7, 0.4, 0.55, 0.62]);
        let mut scores = base.per_instance.clone();
        scores[0] += 0.01;
        scores[1] -= 0.01;
        let cand = run("dropped", 60.0, scores);
        let cmp = compare_runs(&base, &cand).unwrap();
        assert!((cmp.delta_wall_clock_pct + 40.0).abs() < 1e-9);
        assert!(!cmp.significant);
        assert_eq!(cmp.verdict, Verdict::CompressionSuccess);
    }

    #[test]
    fn significant_drop_sets_the_dagger() {
        let base = run("base", 100.0, vec![0.5, 0.6, 0.7, 0.4, 0.55, 0.62, 0.58, 0.49]);
        let cand = run("worse", 50.0, base.per_instance.iter().map(|x| x - 0.2).collect());
        let cmp = compare_runs(&base, &cand).unwrap();
        assert!(cmp.significant);
        assert!(cmp.dagger);
        assert_eq!(cmp.verdict, Verdict::RelevanceDrop);
    }

    #[test]
    fn mismatched_test_sets_rejected() {
        let a = run("a", 10.0, vec![0.5, 0.6]);
        let mut b = run("b", 10.0, vec![0.5, 0.6]);
        b.test_set_hash = "other".into();
        assert!(matches!(compare_runs(&a, &b), Err(EvalError::MismatchedTestSets)));
    }

    #[test]
    fn csv_has_the_documented_columns_and_quotes_configs() {
        let rows = vec![CsvRow {
            config: "(M3R3, f_emb)".into(),
            total_params: 123,
            trainable_params: 45,
            wall_clock_s: 1.5,
            w_rouge: 0.54321,
            p_vs_baseline: Some(0.04),
            significant: Some(true),
        }];
        let csv = write_csv(&rows).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "config,total_params,trainable_params,wall_clock_s,w_rouge,p_vs_baseline,significant"
        );
        let row = lines.next().unwrap();
        assert!(row.starts_with("\"(M3R3, f_emb)\""), "{row}");
        assert!(row.contains("0.543210"));
    }
}
