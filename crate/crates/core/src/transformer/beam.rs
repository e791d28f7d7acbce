use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use super::TransformerError;
use crate::corpus::{BOS, EOS, PAD};

/// Source of next-token log-probabilities for a growing prefix.
pub trait StepScorer {
    type State: Clone;

    fn initial(&self) -> Self::State;

    fn vocab_size(&self) -> usize;

    /// Appends `token` to the prefix held by `state` and returns the
    /// log-probabilities of the following token.
    fn advance(&self, state: &mut Self::State, token: u32) -> Result<Vec<f64>, TransformerError>;
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BeamParams {
    pub beam_size: usize,
    /// Maximum number of emitted tokens, including the final eos.
    pub max_len: usize,
    /// Exponent `α` of the length penalty `((5 + len) / 6)^α`.
    pub length_penalty: f64,
    #[serde(default = "default_start")]
    pub start: u32,
    #[serde(default = "default_eos")]
    pub eos: u32,
    /// Tokens never emitted.
    #[serde(default = "default_banned")]
    pub banned: Vec<u32>,
}

fn default_start() -> u32 {
    BOS
}

fn default_eos() -> u32 {
    EOS
}

fn default_banned() -> Vec<u32> {
    vec![PAD, BOS]
}

impl Default for BeamParams {
    fn default() -> Self {
        Self {
            beam_size: 4,
            max_len: crate::corpus::DEFAULT_MAX_LEN,
            length_penalty: 0.6,
            start: BOS,
            eos: EOS,
            banned: default_banned(),
        }
    }
}

impl BeamParams {
    pub fn length_norm(&self, len: usize) -> f64 {
        ((5.0 + len as f64) / 6.0).powf(self.length_penalty)
    }

    fn allowed(&self, token: u32, last_step: bool) -> bool {
        if last_step {
            token == self.eos
        } else {
            !self.banned.contains(&token)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hypothesis {
    /// Emitted tokens; the last one is eos.
    pub tokens: Vec<u32>,
    /// Sum of token log-probabilities.
    pub score: f64,
    /// `score` divided by the length penalty.
    pub normalized: f64,
}

struct Live<S> {
    tokens: Vec<u32>,
    score: f64,
    state: S,
    next: Vec<f64>,
}

fn finish(tokens: Vec<u32>, score: f64, params: &BeamParams) -> Hypothesis {
    let normalized = score / params.length_norm(tokens.len());
    Hypothesis {
        tokens,
        score,
        normalized,
    }
}

/// Beam search where finished hypotheses leave the beam and the beam
/// shrinks accordingly.
///
/// Each step keeps the best `beam_size - finished` extensions of the live
/// hypotheses by cumulative log-probability; extensions ending in eos are
/// finished. Among finished hypotheses the best length-normalized score
/// wins. Every tie goes to the lexicographically smaller token sequence.
pub fn beam_search<S: StepScorer>(scorer: &S, params: &BeamParams) -> Result<Hypothesis, TransformerError> {
    if params.beam_size == 0 || params.max_len == 0 {
        return Err(TransformerError::Config("beam_size and max_len must be positive".into()));
    }
    let mut state = scorer.initial();
    let next = scorer.advance(&mut state, params.start)?;
    let mut live = vec![Live {
        tokens: Vec::new(),
        score: 0.0,
        state,
        next,
    }];
    let mut finished: Vec<Hypothesis> = Vec::new();
    for step in 0..params.max_len {
        let width = params.beam_size - finished.len();
        if width == 0 || live.is_empty() {
            break;
        }
        let last = step + 1 == params.max_len;
        let mut cands: Vec<(f64, usize, u32)> = Vec::new();
        for (i, h) in live.iter().enumerate() {
            for (v, &lp) in h.next.iter().enumerate() {
                let v = v as u32;
                if params.allowed(v, last) {
                    cands.push((h.score + lp, i, v));
                }
            }
        }
        cands.sort_by(|a, b| {
            b.0.total_cmp(&a.0)
                .then_with(|| live[a.1].tokens.cmp(&live[b.1].tokens))
                .then_with(|| a.2.cmp(&b.2))
        });
        cands.truncate(width);
        let mut next_live = Vec::with_capacity(cands.len());
        for (score, i, v) in cands {
            let mut tokens = live[i].tokens.clone();
            tokens.push(v);
            if v == params.eos {
                finished.push(finish(tokens, score, params));
            } else {
                let mut state = live[i].state.clone();
                let next = scorer.advance(&mut state, v)?;
                next_live.push(Live {
                    tokens,
                    score,
                    state,
                    next,
                });
            }
        }
        live = next_live;
    }
    finished
        .into_iter()
        .min_by(rank)
        .ok_or_else(|| TransformerError::Config("beam search produced no hypothesis".into()))
}

/// Orders better hypotheses first.
fn rank(a: &Hypothesis, b: &Hypothesis) -> Ordering {
    b.normalized.total_cmp(&a.normalized).then_with(|| a.tokens.cmp(&b.tokens))
}

/// Repeated argmax, lowest token id on ties; eos is forced at `max_len`.
pub fn greedy_search<S: StepScorer>(scorer: &S, params: &BeamParams) -> Result<Hypothesis, TransformerError> {
    let mut state = scorer.initial();
    let mut next = scorer.advance(&mut state, params.start)?;
    let mut tokens = Vec::new();
    let mut score = 0.0;
    for step in 0..params.max_len {
        let last = step + 1 == params.max_len;
        let (v, lp) = next
            .iter()
            .enumerate()
            .filter(|(v, _)| params.allowed(*v as u32, last))
            .fold(None, |best: Option<(usize, f64)>, (v, &lp)| match best {
                Some((_, b)) if b >= lp => best,
                _ => Some((v, lp)),
            })
            .ok_or_else(|| TransformerError::Config("every token is banned".into()))?;
        tokens.push(v as u32);
        score += lp;
        if v as u32 == params.eos {
            break;
        }
        next = scorer.advance(&mut state, v as u32)?;
    }
    Ok(finish(tokens, score, params))
}
