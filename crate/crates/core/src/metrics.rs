//! Corpus BLEU with closest-reference brevity, and perplexity.

use std::collections::HashMap;

/// Clipped n-gram counts for one or more candidates.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NGramStats {
    pub matches: [usize; 4],
    pub totals: [usize; 4],
    pub candidate_len: usize,
    pub reference_len: usize,
}

impl NGramStats {
    pub fn add(&mut self, other: &NGramStats) {
        for n in 0..4 {
            self.matches[n] += other.matches[n];
            self.totals[n] += other.totals[n];
        }
        self.candidate_len += other.candidate_len;
        self.reference_len += other.reference_len;
    }
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

/// Counts with per-reference clipping; the reference length is the one
/// closest to the candidate's, the shorter on ties.
pub fn ngram_stats<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>]) -> NGramStats {
    let mut st = NGramStats { candidate_len: candidate.len(), ..Default::default() };
    st.reference_len = references
        .iter()
        .map(Vec::len)
        .min_by_key(|&r| (r.abs_diff(candidate.len()), r))
        .unwrap_or(0);
    for n in 1..=4 {
        let cand = ngrams(candidate, n);
        let mut max_ref: HashMap<Vec<&str>, usize> = HashMap::new();
        for r in references {
            for (g, c) in ngrams(r, n) {
                let e = max_ref.entry(g).or_insert(0);
                *e = (*e).max(c);
            }
        }
        st.totals[n - 1] = cand.values().sum();
        st.matches[n - 1] = cand.iter().map(|(g, &c)| c.min(max_ref.get(g).copied().unwrap_or(0))).sum();
    }
    st
}

#[derive(Clone, Debug, PartialEq)]
pub struct Bleu {
    /// Modified n-gram precisions `p_1..p_4`.
    pub precisions: [f64; 4],
    /// Cumulative BLEU-n: `BP·(Π_{k≤n} p_k)^{1/n}`.
    pub scores: [f64; 4],
    pub brevity_penalty: f64,
}

impl Bleu {
    /// BLEU-4.
    pub fn composite(&self) -> f64 {
        self.scores[3]
    }
}

/// Scores accumulated statistics. With `smoothing`, a zero precision is
/// floored at `1/(2·count)` where `count` is the candidate n-gram count
/// (at least 1).
pub fn bleu_from_stats(st: &NGramStats, smoothing: bool) -> Bleu {
    if st.candidate_len == 0 {
        return Bleu { precisions: [0.0; 4], scores: [0.0; 4], brevity_penalty: 0.0 };
    }
    let mut precisions = [0.0; 4];
    for n in 0..4 {
        let total = st.totals[n];
        precisions[n] = if st.matches[n] > 0 {
            st.matches[n] as f64 / total as f64
        } else if smoothing {
            1.0 / (2.0 * total.max(1) as f64)
        } else {
            0.0
        };
    }
    let (c, r) = (st.candidate_len as f64, st.reference_len as f64);
    let bp = if c < r { (1.0 - r / c).exp() } else { 1.0 };
    let mut scores = [0.0; 4];
    let mut log_sum = 0.0;
    for n in 0..4 {
        if precisions[..=n].contains(&0.0) {
            scores[n] = 0.0;
            continue;
        }
        log_sum += precisions[n].ln();
        scores[n] = bp * (log_sum / (n + 1) as f64).exp();
    }
    Bleu { precisions, scores, brevity_penalty: bp }
}

pub fn sentence_bleu<S: AsRef<str>, R: AsRef<str>>(candidate: &[S], references: &[Vec<R>], smoothing: bool) -> Bleu {
    bleu_from_stats(&ngram_stats(candidate, references), smoothing)
}

/// Corpus BLEU: statistics are summed over all pairs before scoring.
pub fn corpus_bleu<S: AsRef<str>, R: AsRef<str>>(pairs: &[(Vec<S>, Vec<Vec<R>>)], smoothing: bool) -> Bleu {
    let mut total = NGramStats::default();
    for (c, refs) in pairs {
        total.add(&ngram_stats(c, refs));
    }
    bleu_from_stats(&total, smoothing)
}

/// `2^{−(1/N)·Σ log₂ p}` from natural-log token probabilities, computed as
/// `exp(−mean ln p)` with a compensated sum so the result does not drift
/// with corpus size.
pub fn perplexity(log_probs: &[f64]) -> f64 {
    if log_probs.is_empty() {
        return f64::NAN;
    }
    // Neumaier summation.
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for &x in log_probs {
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    (-(sum + comp) / log_probs.len() as f64).exp()
}
