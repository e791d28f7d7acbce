//! BLEU-family scores and word-translation accuracy.
//!
//! All scores live in `[0, 1]`; scaling to percentages happens only when a
//! report is rendered.

use std::collections::HashMap;
use std::hash::Hash;
use std::ops::{Add, AddAssign};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, PartialEq)]
pub enum MetricsError {
    #[error("n-gram weights must be non-negative and sum to 1, got {0:?}")]
    InvalidWeights(Vec<f64>),
    #[error("prediction and reference lengths differ: {pred} vs {reference}")]
    LengthMismatch { pred: usize, reference: usize },
    #[error("no scored positions: every reference position is padding")]
    NoPositions,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Smoothing {
    /// A zero precision at any weighted order makes the score 0.
    #[default]
    None,
    /// Add one to matches and totals for orders above 1.
    AddOne,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuConfig {
    pub weights: Vec<f64>,
    pub smoothing: Smoothing,
    pub brevity_penalty: bool,
}

impl BleuConfig {
    pub fn new(weights: Vec<f64>) -> Self {
        Self {
            weights,
            smoothing: Smoothing::None,
            brevity_penalty: true,
        }
    }

    /// Uniform weights over 1- to 4-grams.
    pub fn standard() -> Self {
        Self::new(vec![0.25; 4])
    }

    /// Unigram-only BLEU ("1-BLEU").
    pub fn unigram() -> Self {
        Self::new(vec![1.0])
    }

    /// Adjusted BLEU: 1- and 2-grams weighted equally, higher orders ignored.
    pub fn adjusted() -> Self {
        Self::new(vec![0.5, 0.5, 0.0, 0.0])
    }

    pub fn with_brevity_penalty(mut self, on: bool) -> Self {
        self.brevity_penalty = on;
        self
    }

    pub fn with_smoothing(mut self, smoothing: Smoothing) -> Self {
        self.smoothing = smoothing;
        self
    }

    fn validate(&self) -> Result<(), MetricsError> {
        let sum: f64 = self.weights.iter().sum();
        if self.weights.is_empty()
            || self.weights.iter().any(|w| !w.is_finite() || *w < 0.0)
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(MetricsError::InvalidWeights(self.weights.clone()));
        }
        Ok(())
    }
}

/// Clipped n-gram counts. Corpus-level BLEU pools these across sentences.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NgramStats {
    pub matches: Vec<usize>,
    pub totals: Vec<usize>,
    pub hyp_len: usize,
    pub ref_len: usize,
}

impl NgramStats {
    pub fn compute<T: Eq + Hash>(hyp: &[T], reference: &[T], max_n: usize) -> Self {
        let mut matches = vec![0; max_n];
        let mut totals = vec![0; max_n];
        for n in 1..=max_n {
            if hyp.len() < n {
                continue;
            }
            let mut ref_counts: HashMap<&[T], usize> = HashMap::new();
            if reference.len() >= n {
                for g in reference.windows(n) {
                    *ref_counts.entry(g).or_default() += 1;
                }
            }
            let mut hyp_counts: HashMap<&[T], usize> = HashMap::new();
            for g in hyp.windows(n) {
                *hyp_counts.entry(g).or_default() += 1;
            }
            totals[n - 1] = hyp.len() + 1 - n;
            matches[n - 1] = hyp_counts
                .iter()
                .map(|(g, &c)| c.min(ref_counts.get(g).copied().unwrap_or(0)))
                .sum();
        }
        Self {
            matches,
            totals,
            hyp_len: hyp.len(),
            ref_len: reference.len(),
        }
    }

    pub fn merge(&mut self, other: &NgramStats) {
        if self.matches.len() < other.matches.len() {
            self.matches.resize(other.matches.len(), 0);
            self.totals.resize(other.totals.len(), 0);
        }
        for (i, (&m, &t)) in other.matches.iter().zip(&other.totals).enumerate() {
            self.matches[i] += m;
            self.totals[i] += t;
        }
        self.hyp_len += other.hyp_len;
        self.ref_len += other.ref_len;
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BleuScore {
    pub value: f64,
    pub weights: Vec<f64>,
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
    pub stats: NgramStats,
    /// Set when the hypothesis or the reference is empty; the value is then 0.
    pub degenerate: bool,
}

fn score(stats: NgramStats, cfg: &BleuConfig) -> BleuScore {
    let degenerate = stats.hyp_len == 0 || stats.ref_len == 0;
    let precisions: Vec<f64> = stats
        .matches
        .iter()
        .zip(&stats.totals)
        .enumerate()
        .map(|(i, (&m, &t))| match cfg.smoothing {
            Smoothing::AddOne if i > 0 => (m as f64 + 1.0) / (t as f64 + 1.0),
            _ if t == 0 => 0.0,
            _ => m as f64 / t as f64,
        })
        .collect();
    let brevity_penalty = if degenerate || !cfg.brevity_penalty || stats.hyp_len >= stats.ref_len {
        1.0
    } else {
        (1.0 - stats.ref_len as f64 / stats.hyp_len as f64).exp()
    };
    // Orders the hypothesis is too short to contain are undefined rather
    // than zero; the remaining weights are renormalized over them.
    let active: Vec<(f64, f64)> = cfg
        .weights
        .iter()
        .zip(&precisions)
        .zip(&stats.totals)
        .filter(|((&w, _), &t)| w > 0.0 && t > 0)
        .map(|((&w, &p), _)| (w, p))
        .collect();
    let weight: f64 = active.iter().map(|(w, _)| w).sum();
    let mut log_sum = 0.0;
    let mut zero = degenerate || active.is_empty();
    for &(w, p) in &active {
        if p == 0.0 {
            zero = true;
            break;
        }
        log_sum += w / weight * p.ln();
    }
    let value = if zero {
        0.0
    } else {
        (brevity_penalty * log_sum.exp()).clamp(0.0, 1.0)
    };
    BleuScore {
        value,
        weights: cfg.weights.clone(),
        precisions,
        brevity_penalty,
        stats,
        degenerate,
    }
}

/// Sentence-level BLEU of `hyp` against a single reference.
pub fn bleu<T: Eq + Hash>(hyp: &[T], reference: &[T], cfg: &BleuConfig) -> Result<BleuScore, MetricsError> {
    cfg.validate()?;
    Ok(score(NgramStats::compute(hyp, reference, cfg.weights.len()), cfg))
}

/// Corpus-level BLEU from n-gram counts pooled over all pairs.
pub fn corpus_bleu<'a, T, I>(pairs: I, cfg: &BleuConfig) -> Result<BleuScore, MetricsError>
where
    T: Eq + Hash + 'a,
    I: IntoIterator<Item = (&'a [T], &'a [T])>,
{
    cfg.validate()?;
    let n = cfg.weights.len();
    let mut pooled = NgramStats {
        matches: vec![0; n],
        totals: vec![0; n],
        ..Default::default()
    };
    for (h, r) in pairs {
        pooled.merge(&NgramStats::compute(h, r, n));
    }
    Ok(score(pooled, cfg))
}

/// BLEU restricted to 1- and 2-grams with equal weight, brevity penalty on,
/// no smoothing.
pub fn adjusted_bleu<T: Eq + Hash>(hyp: &[T], reference: &[T]) -> BleuScore {
    adjusted_bleu_with(hyp, reference, true)
}

pub fn adjusted_bleu_with<T: Eq + Hash>(hyp: &[T], reference: &[T], brevity_penalty: bool) -> BleuScore {
    let cfg = BleuConfig::adjusted().with_brevity_penalty(brevity_penalty);
    score(NgramStats::compute(hyp, reference, cfg.weights.len()), &cfg)
}

/// Positionwise accuracy counts; `value = correct / total`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccuracyScore {
    pub correct: usize,
    pub total: usize,
}

impl AccuracyScore {
    /// `None` when no position was scored.
    pub fn value(&self) -> Option<f64> {
        (self.total > 0).then(|| self.correct as f64 / self.total as f64)
    }
}

impl Add for AccuracyScore {
    type Output = AccuracyScore;

    fn add(self, rhs: Self) -> Self {
        AccuracyScore {
            correct: self.correct + rhs.correct,
            total: self.total + rhs.total,
        }
    }
}

impl AddAssign for AccuracyScore {
    fn add_assign(&mut self, rhs: Self) {
        *self = *self + rhs;
    }
}

impl std::iter::Sum for AccuracyScore {
    fn sum<I: Iterator<Item = Self>>(iter: I) -> Self {
        iter.fold(AccuracyScore::default(), Add::add)
    }
}

/// Fraction of non-pad reference positions where the prediction matches.
/// End-of-sentence positions count like any other token.
pub fn word_accuracy(pred: &[u32], reference: &[u32], pad_id: u32) -> Result<AccuracyScore, MetricsError> {
    if pred.len() != reference.len() {
        return Err(MetricsError::LengthMismatch {
            pred: pred.len(),
            reference: reference.len(),
        });
    }
    let mut acc = AccuracyScore::default();
    for (&p, &r) in pred.iter().zip(reference) {
        if r == pad_id {
            continue;
        }
        acc.total += 1;
        if p == r {
            acc.correct += 1;
        }
    }
    if acc.total == 0 {
        return Err(MetricsError::NoPositions);
    }
    Ok(acc)
}
