use std::collections::HashMap;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, CorpusError, CorpusSplit, Domain, SentencePair, SplitName, TokenizerMode, Vocabulary};
use crate::numerics::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeneratorSpec {
    pub seed: u64,
    #[serde(default = "default_max_len")]
    pub max_len: usize,
    pub lexicon: LexiconSpec,
    pub sizes: SplitSizes,
    pub in_domain: DomainParams,
    /// Omitted means no shift: the out-of-domain test set is drawn with
    /// the in-domain parameters.
    #[serde(default)]
    pub out_domain: Option<DomainParams>,
}

fn default_max_len() -> usize {
    super::DEFAULT_MAX_LEN
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LexiconSpec {
    pub nouns: usize,
    pub adjectives: usize,
    pub determiners: usize,
    pub connectives: usize,
    /// Share of noun and adjective types that only the out-of-domain
    /// test set may use.
    #[serde(default = "default_reserved")]
    pub reserved_fraction: f64,
}

fn default_reserved() -> f64 {
    0.3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train: usize,
    pub valid: usize,
    pub test_in: usize,
    pub test_out: usize,
}

/// Sentence grammar: `phrase (connective phrase)*`, where a phrase is
/// `[determiner] [adjective] noun`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DomainParams {
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub determiner_prob: f64,
    pub adjective_prob: f64,
    /// Probability that a content word comes from the reserved pool.
    #[serde(default)]
    pub reserved_rate: f64,
}

impl GeneratorSpec {
    pub fn from_toml(text: &str) -> Result<Self, CorpusError> {
        let spec: Self = toml::from_str(text).map_err(|e| CorpusError::Config(e.to_string()))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn out_params(&self) -> &DomainParams {
        self.out_domain.as_ref().unwrap_or(&self.in_domain)
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let bad = |m: String| Err(CorpusError::Config(m));
        let lx = &self.lexicon;
        if lx.nouns == 0 || lx.determiners == 0 || lx.connectives == 0 {
            return bad("nouns, determiners and connectives must be positive".into());
        }
        if !(0.0..1.0).contains(&lx.reserved_fraction) {
            return bad(format!("reserved_fraction {} outside [0, 1)", lx.reserved_fraction));
        }
        if reserved_count(lx.nouns, lx.reserved_fraction) == lx.nouns
            || (lx.adjectives > 0 && reserved_count(lx.adjectives, lx.reserved_fraction) == lx.adjectives)
        {
            return bad("reserved_fraction leaves no in-domain nouns or adjectives".into());
        }
        if self.in_domain.reserved_rate != 0.0 {
            return bad("in_domain.reserved_rate must be 0; reserved words are out-of-domain only".into());
        }
        for (name, p) in [("in_domain", &self.in_domain), ("out_domain", self.out_params())] {
            if p.min_phrases == 0 || p.min_phrases > p.max_phrases {
                return bad(format!("{name}: need 1 <= min_phrases <= max_phrases"));
            }
            for (field, v) in [
                ("determiner_prob", p.determiner_prob),
                ("adjective_prob", p.adjective_prob),
                ("reserved_rate", p.reserved_rate),
            ] {
                if !(0.0..=1.0).contains(&v) {
                    return bad(format!("{name}.{field} = {v} outside [0, 1]"));
                }
            }
            if p.adjective_prob > 0.0 && lx.adjectives == 0 {
                return bad(format!("{name} uses adjectives but the lexicon has none"));
            }
            let longest = 4 * p.max_phrases;
            if longest > self.max_len {
                return bad(format!(
                    "{name}: {} phrases can reach {longest} tokens, max_len is {}",
                    p.max_phrases, self.max_len
                ));
            }
        }
        let out = self.out_params();
        if out.reserved_rate > 0.0 && reserved_count(lx.nouns, lx.reserved_fraction) == 0 {
            return bad("out_domain draws reserved words but none are reserved".into());
        }
        Ok(())
    }
}

fn reserved_count(n: usize, fraction: f64) -> usize {
    (n as f64 * fraction).round() as usize
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum WordKind {
    Noun,
    Adjective,
    Determiner,
    Connective,
}

impl WordKind {
    const ALL: [WordKind; 4] = [WordKind::Noun, WordKind::Adjective, WordKind::Determiner, WordKind::Connective];

    fn prefix(self) -> char {
        match self {
            WordKind::Noun => 'n',
            WordKind::Adjective => 'a',
            WordKind::Determiner => 'd',
            WordKind::Connective => 'c',
        }
    }
}

/// The exact source-to-target mapping: a per-word dictionary plus an
/// adjective-noun swap.
#[derive(Clone, Debug, PartialEq)]
pub struct Lexicon {
    dictionary: HashMap<String, (WordKind, String)>,
    /// Source words per kind as (common, reserved).
    pools: HashMap<WordKind, (Vec<String>, Vec<String>)>,
}

impl Lexicon {
    fn build(spec: &LexiconSpec, rng: &mut ChaCha8Rng) -> Self {
        let mut dictionary = HashMap::new();
        let mut pools = HashMap::new();
        for kind in WordKind::ALL {
            let n = match kind {
                WordKind::Noun => spec.nouns,
                WordKind::Adjective => spec.adjectives,
                WordKind::Determiner => spec.determiners,
                WordKind::Connective => spec.connectives,
            };
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(rng);
            for (i, &j) in perm.iter().enumerate() {
                dictionary.insert(source_word(kind, i), (kind, target_word(kind, j)));
            }
            let reserved = match kind {
                WordKind::Noun | WordKind::Adjective => reserved_count(n, spec.reserved_fraction),
                _ => 0,
            };
            let mut order: Vec<usize> = (0..n).collect();
            order.shuffle(rng);
            let (res, common) = order.split_at(reserved);
            let mut res = res.to_vec();
            let mut common = common.to_vec();
            res.sort_unstable();
            common.sort_unstable();
            let words = |ix: Vec<usize>| ix.into_iter().map(|i| source_word(kind, i)).collect();
            pools.insert(kind, (words(common), words(res)));
        }
        Self { dictionary, pools }
    }

    /// Target word for a single source word, if it is in the lexicon.
    pub fn lookup(&self, source: &str) -> Option<(WordKind, &str)> {
        self.dictionary.get(source).map(|(k, t)| (*k, t.as_str()))
    }

    /// Source words of one kind reserved for the out-of-domain set.
    pub fn reserved(&self, kind: WordKind) -> &[String] {
        &self.pools[&kind].1
    }

    pub fn common(&self, kind: WordKind) -> &[String] {
        &self.pools[&kind].0
    }

    /// Every source word followed by every target word, in a fixed order.
    pub fn all_words(&self) -> Vec<String> {
        let mut src: Vec<&String> = self.dictionary.keys().collect();
        src.sort();
        let mut tgt: Vec<&String> = self.dictionary.values().map(|(_, t)| t).collect();
        tgt.sort();
        src.into_iter().chain(tgt).cloned().collect()
    }

    /// Rule translation of a whitespace-separated source sentence.
    pub fn translate(&self, source: &str) -> Result<String, CorpusError> {
        let words: Vec<&str> = source.split_whitespace().collect();
        let mut out: Vec<&str> = Vec::with_capacity(words.len());
        let mut i = 0;
        while i < words.len() {
            let (kind, t) = self
                .lookup(words[i])
                .ok_or_else(|| CorpusError::InvalidToken(words[i].to_string()))?;
            if kind == WordKind::Adjective {
                if let Some((WordKind::Noun, n)) = words.get(i + 1).and_then(|w| self.lookup(w)) {
                    out.push(n);
                    out.push(t);
                    i += 2;
                    continue;
                }
            }
            out.push(t);
            i += 1;
        }
        Ok(out.join(" "))
    }
}

fn source_word(kind: WordKind, i: usize) -> String {
    format!("s{}{i:02}", kind.prefix())
}

fn target_word(kind: WordKind, i: usize) -> String {
    format!("t{}{i:02}", kind.prefix())
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticCorpus {
    pub spec: GeneratorSpec,
    pub lexicon: Lexicon,
    pub vocab: Vocabulary,
    pub train: CorpusSplit,
    pub valid: CorpusSplit,
    pub test_in: CorpusSplit,
    pub test_out: CorpusSplit,
}

impl SyntheticCorpus {
    /// Sampling parameters the given split was drawn with.
    pub fn params_for(&self, split: &CorpusSplit) -> &DomainParams {
        match split.domain() {
            Domain::In => &self.spec.in_domain,
            Domain::Out => self.spec.out_params(),
        }
    }

    pub fn splits(&self) -> [&CorpusSplit; 4] {
        [&self.train, &self.valid, &self.test_in, &self.test_out]
    }
}

/// Builds the four splits. Every split has its own random stream derived
/// from the seed, so changing one split's size leaves the others intact.
pub fn generate_synthetic(spec: &GeneratorSpec) -> Result<SyntheticCorpus, CorpusError> {
    spec.validate()?;
    let lexicon = Lexicon::build(&spec.lexicon, &mut rng::stream(spec.seed, "corpus/lexicon"));
    let vocab = Vocabulary::from_tokens(lexicon.all_words())?;
    let make = |purpose: &str, n: usize, split: SplitName, domain: Domain| {
        let params = match domain {
            Domain::In => &spec.in_domain,
            Domain::Out => spec.out_params(),
        };
        let mut rng = rng::stream(spec.seed, purpose);
        let pairs = (0..n)
            .map(|_| {
                let raw_source = sample_sentence(&lexicon, params, &mut rng);
                let raw_target = lexicon.translate(&raw_source)?;
                Ok(SentencePair {
                    source: tokenize(&raw_source, &vocab, &TokenizerMode::Word)?,
                    target: tokenize(&raw_target, &vocab, &TokenizerMode::Word)?,
                    raw_source,
                    raw_target,
                    domain_tag: domain.tag().to_string(),
                })
            })
            .collect::<Result<Vec<_>, CorpusError>>()?;
        CorpusSplit::new(pairs, split, domain, spec.max_len)
    };
    Ok(SyntheticCorpus {
        train: make("corpus/train", spec.sizes.train, SplitName::Train, Domain::In)?,
        valid: make("corpus/valid", spec.sizes.valid, SplitName::Valid, Domain::In)?,
        test_in: make("corpus/test_in", spec.sizes.test_in, SplitName::Test, Domain::In)?,
        test_out: make("corpus/test_out", spec.sizes.test_out, SplitName::Test, Domain::Out)?,
        spec: spec.clone(),
        lexicon,
        vocab,
    })
}

fn sample_sentence(lex: &Lexicon, p: &DomainParams, rng: &mut ChaCha8Rng) -> String {
    let pick = |kind: WordKind, rng: &mut ChaCha8Rng| -> String {
        let (common, reserved) = (lex.common(kind), lex.reserved(kind));
        let pool = if !reserved.is_empty() && rng.random::<f64>() < p.reserved_rate {
            reserved
        } else {
            common
        };
        pool[rng.random_range(0..pool.len())].clone()
    };
    let phrases = rng.random_range(p.min_phrases..=p.max_phrases);
    let mut words = Vec::new();
    for k in 0..phrases {
        if k > 0 {
            words.push(pick(WordKind::Connective, rng));
        }
        if rng.random::<f64>() < p.determiner_prob {
            words.push(pick(WordKind::Determiner, rng));
        }
        if rng.random::<f64>() < p.adjective_prob {
            words.push(pick(WordKind::Adjective, rng));
        }
        words.push(pick(WordKind::Noun, rng));
    }
    words.join(" ")
}
