//! Text normalization, word error rate and context-length sweep reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Lowercases, replaces punctuation with spaces (keeping apostrophes between
/// letters or digits), and collapses whitespace.
pub fn normalize_text(s: &str) -> String {
    let chars: Vec<char> = s.chars().flat_map(char::to_lowercase).collect();
    let mut out = String::with_capacity(chars.len());
    for (i, &c) in chars.iter().enumerate() {
        let keep = c.is_alphanumeric()
            || (c == '\''
                && i > 0
                && chars[i - 1].is_alphanumeric()
                && chars.get(i + 1).is_some_and(|n| n.is_alphanumeric()));
        out.push(if keep { c } else { ' ' });
    }
    out.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Pluggable normalizer applied to both references and hypotheses.
pub trait TextNormalizer {
    fn normalize(&self, s: &str) -> String;
}

/// The built-in rule of [`normalize_text`].
#[derive(Clone, Copy, Debug, Default)]
pub struct SimpleNormalizer;

impl TextNormalizer for SimpleNormalizer {
    fn normalize(&self, s: &str) -> String {
        normalize_text(s)
    }
}

/// Edit counts for one reference/hypothesis pair.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct WerCounts {
    pub substitutions: usize,
    pub deletions: usize,
    pub insertions: usize,
    pub ref_words: usize,
    /// Empty reference: the rate is computed against a denominator of 1.
    pub degenerate_reference: bool,
}

impl WerCounts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.deletions + self.insertions
    }

    pub fn wer(&self) -> f64 {
        self.errors() as f64 / self.ref_words.max(1) as f64
    }
}

/// Word-level Levenshtein alignment with unit costs. On ties the backtrace
/// prefers a substitution or match over an insertion/deletion pair.
pub fn wer(reference: &str, hypothesis: &str) -> WerCounts {
    let r: Vec<&str> = reference.split_whitespace().collect();
    let h: Vec<&str> = hypothesis.split_whitespace().collect();
    let (n, m) = (r.len(), h.len());
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let at = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[at(i, 0)] = i;
    }
    for j in 0..=m {
        dp[at(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let diag = dp[at(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]);
            dp[at(i, j)] = diag.min(dp[at(i - 1, j)] + 1).min(dp[at(i, j - 1)] + 1);
        }
    }
    let mut counts = WerCounts {
        ref_words: n,
        degenerate_reference: n == 0,
        ..WerCounts::default()
    };
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        if i > 0 && j > 0 && dp[at(i, j)] == dp[at(i - 1, j - 1)] + usize::from(r[i - 1] != h[j - 1]) {
            if r[i - 1] != h[j - 1] {
                counts.substitutions += 1;
            }
            i -= 1;
            j -= 1;
        } else if i > 0 && dp[at(i, j)] == dp[at(i - 1, j)] + 1 {
            counts.deletions += 1;
            i -= 1;
        } else {
            counts.insertions += 1;
            j -= 1;
        }
    }
    counts
}

/// Relative WER reduction of `candidate` against `baseline`.
pub fn werr(baseline_wer: f64, candidate_wer: f64) -> Result<f64> {
    if !(baseline_wer > 0.0) {
        return Err(Error::Data(format!(
            "WERR needs a positive baseline WER, got {baseline_wer}"
        )));
    }
    Ok((baseline_wer - candidate_wer) / baseline_wer)
}

/// Score of one recording.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordingScore {
    pub id: String,
    pub reference: String,
    pub hypothesis: String,
    pub wer: f64,
    #[serde(flatten)]
    pub counts: WerCounts,
}

/// Scores for one model (context length and seed) over an evaluation set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub context_len_s: f64,
    pub seed: u64,
    pub recordings: Vec<RecordingScore>,
    /// Total errors over total reference words.
    pub aggregate_wer: f64,
}

impl EvalReport {
    /// Normalizes both sides, scores each pair and micro-averages.
    pub fn score(
        context_len_s: f64,
        seed: u64,
        pairs: &[(String, String, String)],
        normalizer: &dyn TextNormalizer,
    ) -> Self {
        let recordings: Vec<RecordingScore> = pairs
            .iter()
            .map(|(id, reference, hypothesis)| {
                let reference = normalizer.normalize(reference);
                let hypothesis = normalizer.normalize(hypothesis);
                let counts = wer(&reference, &hypothesis);
                RecordingScore {
                    id: id.clone(),
                    wer: counts.wer(),
                    reference,
                    hypothesis,
                    counts,
                }
            })
            .collect();
        let errors: usize = recordings.iter().map(|r| r.counts.errors()).sum();
        let words: usize = recordings.iter().map(|r| r.counts.ref_words).sum();
        Self {
            context_len_s,
            seed,
            aggregate_wer: errors as f64 / words.max(1) as f64,
            recordings,
        }
    }
}

/// One row of a context-length sweep.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub context_s: f64,
    pub mean_wer: f64,
    /// Sample standard deviation over seeds (0 with one seed).
    pub std_wer: f64,
    pub werr_vs_baseline: f64,
    pub n_seeds: usize,
}

fn context_key(s: f64) -> i64 {
    (s * 1000.0).round() as i64
}

/// Mean and spread of aggregate WER per context length, with WERR against
/// the `baseline_context_s` row.
pub fn sweep_report(results: &[EvalReport], baseline_context_s: f64) -> Result<Vec<SweepRow>> {
    let mut groups: BTreeMap<i64, (f64, Vec<f64>)> = BTreeMap::new();
    for r in results {
        groups
            .entry(context_key(r.context_len_s))
            .or_insert_with(|| (r.context_len_s, Vec::new()))
            .1
            .push(r.aggregate_wer);
    }
    let stats: Vec<(f64, f64, f64, usize)> = groups
        .values()
        .map(|(ctx, wers)| {
            let n = wers.len();
            let mean = wers.iter().sum::<f64>() / n as f64;
            let std = if n > 1 {
                (wers.iter().map(|w| (w - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
            } else {
                0.0
            };
            (*ctx, mean, std, n)
        })
        .collect();
    let baseline = groups
        .get(&context_key(baseline_context_s))
        .map(|(_, w)| w.iter().sum::<f64>() / w.len() as f64)
        .ok_or_else(|| Error::Data(format!("no results for the {baseline_context_s} s baseline")))?;
    stats
        .into_iter()
        .map(|(context_s, mean_wer, std_wer, n_seeds)| {
            Ok(SweepRow {
                context_s,
                mean_wer,
                std_wer,
                werr_vs_baseline: werr(baseline, mean_wer)?,
                n_seeds,
            })
        })
        .collect()
}

/// Tab-separated table with a header row.
pub fn format_sweep_tsv(rows: &[SweepRow]) -> String {
    let mut out = String::from("context_s\tmean_wer\tstd_wer\twerr_vs_baseline\tn_seeds\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{}\t{:.6}\t{:.6}\t{:.6}\t{}",
            r.context_s, r.mean_wer, r.std_wer, r.werr_vs_baseline, r.n_seeds
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn normalizer_examples() {
        assert_eq!(normalize_text("Hello, World!"), "hello world");
        assert_eq!(normalize_text("don't  stop"), "don't stop");
        assert_eq!(normalize_text(""), "");
        assert_eq!(normalize_text("'quoted' rock'n'roll"), "quoted rock'n'roll");
        let once = normalize_text("  It's   A-OK?! ");
        assert_eq!(normalize_text(&once), once);
    }

    #[test]
    fn scorer_examples() {
        let c = wer("a b c", "a x c");
        assert_eq!((c.substitutions, c.deletions, c.insertions), (1, 0, 0));
        assert!((c.wer() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer("a b", "a b").wer(), 0.0);
        let c = wer("", "a b");
        assert!(c.degenerate_reference);
        assert_eq!(c.wer(), 2.0);
        let c = wer("a b c", "");
        assert_eq!(c.deletions, 3);
    }

    #[test]
    fn werr_examples() {
        let candidate: f64 = 0.277 * (1.0 - 0.122);
        assert!((candidate - 0.243_206).abs() < 1e-6);
        assert!((werr(0.277, candidate).unwrap() - 0.122).abs() < 1e-12);
        assert_eq!(werr(0.3, 0.3).unwrap(), 0.0);
        assert_eq!(werr(0.3, 0.0).unwrap(), 1.0);
        assert!(werr(0.0, 0.1).is_err());
    }

    fn report(ctx: f64, seed: u64, wer: f64) -> EvalReport {
        EvalReport {
            context_len_s: ctx,
            seed,
            recordings: Vec::new(),
            aggregate_wer: wer,
        }
    }

    #[test]
    fn sweep_rows() {
        let rows = sweep_report(&[report(10.0, 1, 0.4)], 10.0).unwrap();
        assert_eq!(rows[0].mean_wer, 0.4);
        assert_eq!(rows[0].std_wer, 0.0);
        assert_eq!(rows[0].werr_vs_baseline, 0.0);
        let rows = sweep_report(
            &[
                report(10.0, 1, 0.30),
                report(10.0, 2, 0.28),
                report(10.0, 3, 0.29),
                report(20.0, 1, 0.2),
            ],
            10.0,
        )
        .unwrap();
        assert!((rows[0].mean_wer - 0.29).abs() < 1e-12);
        assert!((rows[0].std_wer - 0.01).abs() < 1e-12);
        assert_eq!(rows.len(), 2);
        assert!(sweep_report(&[report(20.0, 1, 0.2)], 10.0).is_err());
        let tsv = format_sweep_tsv(&rows);
        assert!(tsv.starts_with("context_s\tmean_wer\tstd_wer\twerr_vs_baseline\tn_seeds\n"));
        assert_eq!(tsv.lines().count(), 3);
    }

    #[test]
    fn micro_average() {
        let pairs = vec![
            ("a".to_string(), "x y".to_string(), "x y".to_string()),
            ("b".to_string(), "x y z w".to_string(), "x".to_string()),
        ];
        let r = EvalReport::score(10.0, 1, &pairs, &SimpleNormalizer);
        assert!((r.aggregate_wer - 0.5).abs() < 1e-15);
    }
}
