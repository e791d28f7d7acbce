use std::path::Path;

use super::{tokenize, CorpusError, CorpusSplit, Domain, SentencePair, SplitName, TokenizerMode, Vocabulary};

#[derive(Clone, Debug)]
pub struct LoadOptions {
    pub mode: TokenizerMode,
    pub max_len: usize,
    pub split_name: SplitName,
    pub domain: Domain,
}

impl Default for LoadOptions {
    fn default() -> Self {
        Self {
            mode: TokenizerMode::Word,
            max_len: super::DEFAULT_MAX_LEN,
            split_name: SplitName::Test,
            domain: Domain::In,
        }
    }
}

#[derive(Clone, Debug)]
pub struct LoadedSplit {
    pub split: CorpusSplit,
    /// Pairs skipped because either side exceeded `max_len`.
    pub dropped: usize,
}

fn read_lines(path: &Path) -> Result<Vec<String>, CorpusError> {
    let text = std::fs::read_to_string(path).map_err(|e| CorpusError::io(path, e))?;
    Ok(text.lines().map(str::to_string).collect())
}

/// Reads line-aligned `.src` / `.tgt` files into a split.
pub fn load_parallel(
    source_path: &Path,
    target_path: &Path,
    vocab: &Vocabulary,
    opts: &LoadOptions,
) -> Result<LoadedSplit, CorpusError> {
    let src = read_lines(source_path)?;
    let tgt = read_lines(target_path)?;
    if src.len() != tgt.len() {
        return Err(CorpusError::Alignment {
            source_lines: src.len(),
            target_lines: tgt.len(),
        });
    }
    let mut pairs = Vec::with_capacity(src.len());
    let mut dropped = 0;
    for (index, (s, t)) in src.into_iter().zip(tgt).enumerate() {
        let tok = |text: &str| {
            tokenize(text, vocab, &opts.mode).map_err(|e| CorpusError::InvalidPair {
                index,
                reason: e.to_string(),
            })
        };
        let source = tok(&s)?;
        let target = tok(&t)?;
        if source.len() > opts.max_len || target.len() > opts.max_len {
            dropped += 1;
            continue;
        }
        pairs.push(SentencePair {
            source,
            target,
            raw_source: s,
            raw_target: t,
            domain_tag: opts.domain.tag().to_string(),
        });
    }
    let split = CorpusSplit::new(pairs, opts.split_name, opts.domain, opts.max_len)?;
    Ok(LoadedSplit { split, dropped })
}

/// Writes the raw text of a split as `<stem>.src` and `<stem>.tgt`.
pub fn write_parallel(split: &CorpusSplit, dir: &Path, stem: &str) -> Result<(), CorpusError> {
    let mut src = String::new();
    let mut tgt = String::new();
    for p in split.pairs() {
        src.push_str(&p.raw_source);
        src.push('\n');
        tgt.push_str(&p.raw_target);
        tgt.push('\n');
    }
    for (ext, body) in [("src", src), ("tgt", tgt)] {
        let path = dir.join(format!("{stem}.{ext}"));
        std::fs::write(&path, body).map_err(|e| CorpusError::io(&path, e))?;
    }
    Ok(())
}
