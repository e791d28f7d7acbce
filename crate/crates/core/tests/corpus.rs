use std::collections::{HashMap, HashSet};
use std::fs;

use halluprobe::corpus::*;

const SPEC: &str = r#"
seed = 11
max_len = 32

[lexicon]
nouns = 40
adjectives = 20
determiners = 3
connectives = 3

[sizes]
train = 200
valid = 20
test_in = 30
test_out = 30

[in_domain]
min_phrases = 1
max_phrases = 3
determiner_prob = 0.6
adjective_prob = 0.5

[out_domain]
min_phrases = 3
max_phrases = 5
determiner_prob = 0.2
adjective_prob = 0.7
reserved_rate = 0.6
"#;

fn spec() -> GeneratorSpec {
    GeneratorSpec::from_toml(SPEC).unwrap()
}

#[test]
fn same_seed_identical_corpora() {
    let a = generate_synthetic(&spec()).unwrap();
    let b = generate_synthetic(&spec()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.vocab.to_file_string(), b.vocab.to_file_string());
    let mut other = spec();
    other.seed = 12;
    assert_ne!(generate_synthetic(&other).unwrap().train, a.train);
}

#[test]
fn zero_shift_reuses_in_domain_params() {
    let text = SPEC.split("[out_domain]").next().unwrap();
    let c = generate_synthetic(&GeneratorSpec::from_toml(text).unwrap()).unwrap();
    assert_eq!(c.params_for(&c.test_out), c.params_for(&c.test_in));
    assert_eq!(c.params_for(&c.test_out), &c.spec.in_domain);
}

/// Re-derives every reference from the lexicon's word dictionary alone,
/// applying the reordering rule here rather than through the generator.
#[test]
fn rule_oracle_reproduces_every_reference() {
    let c = generate_synthetic(&spec()).unwrap();
    let mut checked = 0;
    for split in c.splits() {
        for p in split.pairs() {
            let src: Vec<&str> = p.raw_source.split_whitespace().collect();
            let kind = |w: &str| w.as_bytes()[1];
            let mut expected = Vec::new();
            let mut i = 0;
            while i < src.len() {
                let t = c.lexicon.lookup(src[i]).unwrap().1;
                if kind(src[i]) == b'a' && src.get(i + 1).is_some_and(|w| kind(w) == b'n') {
                    expected.push(c.lexicon.lookup(src[i + 1]).unwrap().1);
                    expected.push(t);
                    i += 2;
                } else {
                    expected.push(t);
                    i += 1;
                }
            }
            assert_eq!(p.raw_target, expected.join(" "));
            checked += 1;
        }
    }
    assert_eq!(checked, 280);
}

#[test]
fn reserved_words_only_out_of_domain() {
    let c = generate_synthetic(&spec()).unwrap();
    let reserved: HashSet<&str> = [WordKind::Noun, WordKind::Adjective]
        .iter()
        .flat_map(|&k| c.lexicon.reserved(k).iter().map(String::as_str))
        .collect();
    assert_eq!(reserved.len(), 12 + 6);
    for split in [&c.train, &c.valid, &c.test_in] {
        for p in split.pairs() {
            assert!(p.raw_source.split_whitespace().all(|w| !reserved.contains(w)));
        }
    }
    let hits = c
        .test_out
        .pairs()
        .iter()
        .flat_map(|p| p.raw_source.split_whitespace())
        .filter(|w| reserved.contains(w))
        .count();
    assert!(hits > 0);
}

#[test]
fn generated_pairs_satisfy_invariants() {
    let c = generate_synthetic(&spec()).unwrap();
    let labels: Vec<String> = c.splits().iter().map(|s| s.label()).collect();
    assert_eq!(labels, ["train", "valid", "test_in", "test_out"]);
    for split in c.splits() {
        for p in split.pairs() {
            assert_eq!(p.source.last(), Some(&EOS));
            assert!(!p.source.contains(&PAD) && !p.target.contains(&UNK));
            assert_eq!(detokenize(&p.source, &c.vocab), p.raw_source);
            assert_eq!(p.domain_tag, split.domain().tag());
        }
    }
}

#[test]
fn inconsistent_specs_rejected() {
    let cases = [
        SPEC.replace("reserved_rate = 0.6", "reserved_rate = 0.6\n")
            .replace("[lexicon]", "[lexicon]\nreserved_fraction = 0.0"),
        SPEC.replace("max_len = 32", "max_len = 12"),
        SPEC.replace("min_phrases = 3", "min_phrases = 6"),
        SPEC.replace("determiner_prob = 0.6", "determiner_prob = 0.6\nreserved_rate = 0.1"),
        SPEC.replace("adjectives = 20", "adjectives = 0"),
        SPEC.replace("seed = 11", "seed = 11\nbogus = 1"),
    ];
    for text in cases {
        assert!(
            matches!(GeneratorSpec::from_toml(&text), Err(CorpusError::Config(_))),
            "accepted:\n{text}"
        );
    }
}

fn vocab() -> Vocabulary {
    Vocabulary::from_tokens(["x", "y", "z"]).unwrap()
}

#[test]
fn load_three_lines() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.src"), "x y\ny\nz x z\n").unwrap();
    fs::write(dir.path().join("a.tgt"), "y\nx x\nz\n").unwrap();
    let loaded = load_parallel(&dir.path().join("a.src"), &dir.path().join("a.tgt"), &vocab(), &LoadOptions::default()).unwrap();
    assert_eq!(loaded.split.len(), 3);
    assert_eq!(loaded.dropped, 0);
    assert_eq!(loaded.split.pairs()[2].source, vec![6, 4, 6, EOS]);
}

#[test]
fn load_misaligned_reports_counts() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("a.src"), "x\ny\nz\n").unwrap();
    fs::write(dir.path().join("a.tgt"), "x\ny\nz\nx\n").unwrap();
    let err = load_parallel(&dir.path().join("a.src"), &dir.path().join("a.tgt"), &vocab(), &LoadOptions::default()).unwrap_err();
    assert!(matches!(err, CorpusError::Alignment { source_lines: 3, target_lines: 4 }));
    let msg = err.to_string();
    assert!(msg.contains('3') && msg.contains('4'));
}

#[test]
fn load_drops_over_length() {
    let dir = tempfile::tempdir().unwrap();
    let long = vec!["x"; 16].join(" ");
    fs::write(dir.path().join("a.src"), format!("x\n{long}\ny z\n")).unwrap();
    fs::write(dir.path().join("a.tgt"), "y\nz\nx\n").unwrap();
    let opts = LoadOptions {
        max_len: 16,
        ..LoadOptions::default()
    };
    let loaded = load_parallel(&dir.path().join("a.src"), &dir.path().join("a.tgt"), &vocab(), &opts).unwrap();
    // 16 words plus eos is 17 tokens
    assert_eq!((loaded.split.len(), loaded.dropped), (2, 1));
}

#[test]
fn write_then_load_round_trip() {
    let c = generate_synthetic(&spec()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    write_parallel(&c.test_out, dir.path(), "test_out").unwrap();
    c.vocab.save(&dir.path().join("vocab.txt")).unwrap();
    let v = Vocabulary::load(&dir.path().join("vocab.txt")).unwrap();
    let opts = LoadOptions {
        domain: Domain::Out,
        ..LoadOptions::default()
    };
    let loaded = load_parallel(&dir.path().join("test_out.src"), &dir.path().join("test_out.tgt"), &v, &opts).unwrap();
    assert_eq!(loaded.split, c.test_out);
}

#[test]
fn bpe_on_generated_text_is_deterministic() {
    let c = generate_synthetic(&spec()).unwrap();
    let lines: Vec<&str> = c.train.pairs().iter().map(|p| p.raw_source.as_str()).collect();
    let a = BpeModel::learn(lines.iter().copied(), 50).unwrap();
    let b = BpeModel::learn(lines.iter().copied(), 50).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.merges().len(), 50);
    let mut counts: HashMap<String, usize> = HashMap::new();
    for l in &lines {
        for piece in a.segment(l) {
            *counts.entry(piece).or_default() += 1;
        }
    }
    assert!(counts.keys().any(|k| k.len() > 1));
}
