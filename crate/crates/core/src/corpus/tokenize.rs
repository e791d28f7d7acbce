use std::collections::{BTreeMap, HashMap};

use super::vocab::{BOS, EOS, PAD, UNK};
use super::{CorpusError, Vocabulary};

/// Upper bound on learned merges; the synthetic vocabularies are tiny.
pub const MAX_MERGES: usize = 500;

#[derive(Clone, Debug, Default, PartialEq)]
pub enum TokenizerMode {
    /// Whitespace-separated words.
    #[default]
    Word,
    /// The sentence's non-whitespace characters, merged by rank. Pieces carry
    /// no word-boundary marker, so merges may span words and the mapping is
    /// not invertible.
    Bpe(BpeModel),
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct BpeModel {
    merges: Vec<(String, String)>,
    ranks: HashMap<(String, String), usize>,
}

impl BpeModel {
    pub fn from_merges(merges: Vec<(String, String)>) -> Result<Self, CorpusError> {
        if merges.len() > MAX_MERGES {
            return Err(CorpusError::Config(format!(
                "{} merges requested, at most {MAX_MERGES} supported",
                merges.len()
            )));
        }
        let ranks = merges.iter().cloned().enumerate().map(|(i, m)| (m, i)).collect();
        Ok(Self { merges, ranks })
    }

    pub fn merges(&self) -> &[(String, String)] {
        &self.merges
    }

    /// Learns up to `num_merges` merges from sentences.
    /// Ties between equally frequent pairs go to the lexicographically
    /// smallest pair.
    pub fn learn<'a>(lines: impl IntoIterator<Item = &'a str>, num_merges: usize) -> Result<Self, CorpusError> {
        if num_merges > MAX_MERGES {
            return Err(CorpusError::Config(format!(
                "{num_merges} merges requested, at most {MAX_MERGES} supported"
            )));
        }
        let mut words: BTreeMap<Vec<String>, usize> = BTreeMap::new();
        for line in lines {
            *words.entry(symbols(line)).or_default() += 1;
        }
        let mut words: Vec<(Vec<String>, usize)> = words.into_iter().collect();
        let mut merges = Vec::new();
        while merges.len() < num_merges {
            let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
            for (syms, freq) in &words {
                for pair in syms.windows(2) {
                    *counts.entry((&pair[0], &pair[1])).or_default() += freq;
                }
            }
            let Some(best) = counts
                .iter()
                .max_by(|a, b| a.1.cmp(b.1).then_with(|| b.0.cmp(a.0)))
                .map(|(p, _)| (p.0.to_string(), p.1.to_string()))
            else {
                break;
            };
            for (syms, _) in words.iter_mut() {
                *syms = merge_pair(syms, &best);
            }
            merges.push(best);
        }
        Self::from_merges(merges)
    }

    /// Splits a sentence into subword pieces.
    pub fn segment(&self, text: &str) -> Vec<String> {
        let mut syms = symbols(text);
        loop {
            let best = syms
                .windows(2)
                .filter_map(|p| self.ranks.get(&(p[0].clone(), p[1].clone())).map(|&r| (r, p)))
                .min_by_key(|(r, _)| *r)
                .map(|(_, p)| (p[0].clone(), p[1].clone()));
            match best {
                Some(pair) => syms = merge_pair(&syms, &pair),
                None => return syms,
            }
        }
    }
}

fn symbols(text: &str) -> Vec<String> {
    text.chars().filter(|c| !c.is_whitespace()).map(String::from).collect()
}

fn merge_pair(syms: &[String], pair: &(String, String)) -> Vec<String> {
    let mut out = Vec::with_capacity(syms.len());
    let mut i = 0;
    while i < syms.len() {
        if i + 1 < syms.len() && syms[i] == pair.0 && syms[i + 1] == pair.1 {
            out.push(format!("{}{}", pair.0, pair.1));
            i += 2;
        } else {
            out.push(syms[i].clone());
            i += 1;
        }
    }
    out
}

/// Maps text to ids, appending end-of-sentence. Unknown pieces become unk.
pub fn tokenize(text: &str, vocab: &Vocabulary, mode: &TokenizerMode) -> Result<Vec<u32>, CorpusError> {
    let lookup = |t: &str| vocab.id(t).unwrap_or(UNK);
    let mut ids: Vec<u32> = match mode {
        TokenizerMode::Word => text.split_whitespace().map(lookup).collect(),
        TokenizerMode::Bpe(model) => model.segment(text).iter().map(|p| lookup(p)).collect(),
    };
    if ids.is_empty() {
        return Err(CorpusError::EmptySentence);
    }
    ids.push(EOS);
    Ok(ids)
}

/// Inverse of word-level [`tokenize`]; special tokens are dropped.
pub fn detokenize(ids: &[u32], vocab: &Vocabulary) -> String {
    ids.iter()
        .filter(|&&id| id != PAD && id != BOS && id != EOS)
        .map(|&id| vocab.token(id).unwrap_or("<unk>"))
        .collect::<Vec<_>>()
        .join(" ")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ab() -> Vocabulary {
        Vocabulary::from_tokens(["a", "b"]).unwrap()
    }

    #[test]
    fn word_level() {
        assert_eq!(tokenize("a b a", &ab(), &TokenizerMode::Word).unwrap(), vec![4, 5, 4, EOS]);
    }

    #[test]
    fn unknown_word() {
        assert_eq!(tokenize("a z", &ab(), &TokenizerMode::Word).unwrap(), vec![4, UNK, EOS]);
    }

    #[test]
    fn empty_sentence() {
        assert!(matches!(
            tokenize("   ", &ab(), &TokenizerMode::Word),
            Err(CorpusError::EmptySentence)
        ));
    }

    #[test]
    fn bpe_hand_merge() {
        let model = BpeModel::from_merges(vec![("l".into(), "o".into())]).unwrap();
        let vocab = Vocabulary::from_tokens(["lo"]).unwrap();
        let lo = vocab.id("lo").unwrap();
        assert_eq!(model.segment("lolo"), vec!["lo", "lo"]);
        assert_eq!(tokenize("l o l o", &vocab, &TokenizerMode::Bpe(model)).unwrap(), vec![lo, lo, EOS]);
    }

    #[test]
    fn bpe_learns_frequent_pair_first() {
        let model = BpeModel::learn(["low", "lower", "lowest", "low"], 2).unwrap();
        assert_eq!(model.merges()[0], ("l".to_string(), "o".to_string()));
        assert_eq!(model.merges()[1], ("lo".to_string(), "w".to_string()));
        assert_eq!(model.segment("lowest"), vec!["low", "e", "s", "t"]);
    }

    #[test]
    fn bpe_merge_cap() {
        assert!(BpeModel::learn(["a"], MAX_MERGES + 1).is_err());
    }

    proptest! {
        #[test]
        fn word_round_trip(idx in prop::collection::vec(0usize..6, 1..20)) {
            let words = ["sa", "sb", "sc", "td", "te", "tf"];
            let vocab = Vocabulary::from_tokens(words).unwrap();
            let text = idx.iter().map(|&i| words[i]).collect::<Vec<_>>().join(" ");
            let ids = tokenize(&text, &vocab, &TokenizerMode::Word).unwrap();
            prop_assert_eq!(detokenize(&ids, &vocab), text);
        }
    }
}
