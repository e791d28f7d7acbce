use std::path::{Path, PathBuf};
use std::process::{Command, Output};

const TINY: &str = r#"
seed = 3

[corpus.lexicon]
nouns = 12
adjectives = 6
determiners = 2
connectives = 2

[corpus.sizes]
train = 200
valid = 20
test_in = 20
test_out = 20

[corpus.in_domain]
min_phrases = 1
max_phrases = 2
determiner_prob = 0.5
adjective_prob = 0.3

[corpus.out_domain]
min_phrases = 2
max_phrases = 3
determiner_prob = 0.2
adjective_prob = 0.6
reserved_rate = 0.5

[model]
n_enc_layers = 1
n_dec_layers = 1
n_heads = 2
d_model = 16
d_ffn = 32
dropout = 0.0

[train]
steps = 40
batch_tokens = 64
checkpoint_every = 10
average_last = 2

[beam]
beam_size = 2
max_len = 16
length_penalty = 0.6

[probe]
train_pairs = 50
steps = 20
batch_tokens = 64
snapshot_every = 10
average_last = 2
bootstrap_resamples = 50
"#;

struct Run {
    _tmp: tempfile::TempDir,
    config: PathBuf,
    out: PathBuf,
}

impl Run {
    fn new() -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let config = tmp.path().join("tiny.toml");
        std::fs::write(&config, TINY).unwrap();
        let out = tmp.path().join("run");
        Self { _tmp: tmp, config, out }
    }

    fn cmd(&self, args: &[&str]) -> Output {
        Command::new(env!("CARGO_BIN_EXE_halluprobe"))
            .arg("--config")
            .arg(&self.config)
            .arg("--out")
            .arg(&self.out)
            .args(args)
            .output()
            .unwrap()
    }

    fn ok(&self, args: &[&str]) -> Output {
        let o = self.cmd(args);
        assert!(o.status.success(), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.out.join(rel)
    }
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn read_tree(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn full_pipeline_emits_every_table() {
    let r = Run::new();
    r.ok(&["run"]);
    for stem in ["table1_encoder", "table2_decoder", "table3_encoder_no_cross", "table4_detection"] {
        assert!(r.path(&format!("report/{stem}.csv")).exists(), "{stem}");
    }
    let md = std::fs::read_to_string(r.path("report/report.md")).unwrap();
    assert!(md.contains("test_out"));
    for stage in ["corpus", "model", "translate", "detect", "probe", "report"] {
        let m: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(r.path(&format!("{stage}/manifest.json"))).unwrap()).unwrap();
        assert_eq!(m["format"], "halluprobe-manifest/1");
        assert_eq!(m["stage"], stage);
        assert_eq!(m["config_hash"].as_str().unwrap().len(), 64);
    }
    let again = r.ok(&["run"]);
    assert!(String::from_utf8_lossy(&again.stdout).contains("report:"));
}

#[test]
fn reruns_are_byte_identical() {
    let a = Run::new();
    let b = Run::new();
    a.ok(&["run"]);
    for cmd in ["generate", "train", "translate", "detect", "probe", "report"] {
        b.ok(&[cmd]);
    }
    assert_eq!(read_tree(&a.out), read_tree(&b.out));
    let before = read_tree(&a.path("detect"));
    a.ok(&["detect"]);
    assert_eq!(read_tree(&a.path("detect")), before);
}

#[test]
fn report_without_results_is_an_error() {
    let r = Run::new();
    let o = r.cmd(&["report"]);
    assert_eq!(code(&o), 12, "{}", stderr(&o));
    assert!(stderr(&o).contains("nothing to report"));
}

#[test]
fn missing_upstream_is_reported_with_a_hint() {
    let r = Run::new();
    let o = r.cmd(&["train"]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains("halluprobe generate"), "{}", stderr(&o));
}

#[test]
fn stale_upstream_is_refused() {
    let r = Run::new();
    r.ok(&["generate"]);
    r.ok(&["train"]);

    let o = r.cmd(&["--set", "train.lr=0.01", "translate"]);
    assert_eq!(code(&o), 5, "{}", stderr(&o));
    assert!(stderr(&o).contains("halluprobe train"), "{}", stderr(&o));

    let src = r.path("corpus/train.src");
    let mut text = std::fs::read_to_string(&src).unwrap();
    text.push_str("extra line\n");
    std::fs::write(&src, text).unwrap();
    let o = r.cmd(&["translate"]);
    assert_eq!(code(&o), 5);
    assert!(stderr(&o).contains("train.src"), "{}", stderr(&o));
    assert!(stderr(&o).contains("halluprobe generate"));
}

#[test]
fn deleting_downstream_leaves_upstream_usable() {
    let r = Run::new();
    for cmd in ["generate", "train", "translate", "detect"] {
        r.ok(&[cmd]);
    }
    let model = read_tree(&r.path("model"));
    std::fs::remove_dir_all(r.path("detect")).unwrap();
    std::fs::remove_dir_all(r.path("translate")).unwrap();
    assert_eq!(code(&r.cmd(&["detect"])), 4);
    r.ok(&["translate"]);
    r.ok(&["detect"]);
    assert_eq!(read_tree(&r.path("model")), model);
}

#[test]
fn probe_selection_flags() {
    let r = Run::new();
    for cmd in ["generate", "train", "translate", "detect"] {
        r.ok(&[cmd]);
    }
    r.ok(&["probe", "--layers", "emb", "--variant", "standard,no-cross-att"]);
    let res: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.path("probe/results.json")).unwrap()).unwrap();
    let cells = res["table"]["cells"].as_array().unwrap();
    for c in cells {
        match c["section"].as_str().unwrap() {
            "decoder" => assert_ne!(c["variant"], "no_self_attn"),
            _ => assert_eq!(c["layer"], 0),
        }
    }
    assert!(cells.iter().any(|c| c["variant"] == "no_cross_attn"));

    r.ok(&["probe", "--variant", "no-self-att"]);
    let res: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(r.path("probe/results.json")).unwrap()).unwrap();
    assert!(res["table"]["cells"].as_array().unwrap().iter().all(|c| c["variant"] == "no_self_attn"));

    r.ok(&["report"]);
    let t2 = std::fs::read_to_string(r.path("report/table2_decoder.csv")).unwrap();
    assert!(t2.contains("missing"), "{t2}");
    assert!(!r.path("report/table1_encoder.csv").exists());

    assert_eq!(code(&r.cmd(&["probe", "--variant", "sideways"])), 2);
    assert_eq!(code(&r.cmd(&["probe", "--layers", "emb,7"])), 10);
    assert_eq!(code(&r.cmd(&["probe", "--layers", "x"])), 3);
}

#[test]
fn config_errors_have_their_own_code() {
    let r = Run::new();
    let o = r.cmd(&["--set", "bogus.key=1", "generate"]);
    assert_eq!(code(&o), 3, "{}", stderr(&o));
    let o = r.cmd(&["--set", "train.average_last=99", "generate"]);
    assert_eq!(code(&o), 3);
    let o = Command::new(env!("CARGO_BIN_EXE_halluprobe"))
        .args(["--config", "/nonexistent/x.toml", "generate"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 6);
}

#[test]
fn seed_flag_changes_the_corpus() {
    let r = Run::new();
    r.ok(&["generate"]);
    let a = std::fs::read(r.path("corpus/train.src")).unwrap();
    r.ok(&["--seed", "4", "generate"]);
    let b = std::fs::read(r.path("corpus/train.src")).unwrap();
    assert_ne!(a, b);
    let shown = String::from_utf8(r.ok(&["--seed", "4", "show-config"]).stdout).unwrap();
    assert!(shown.starts_with("seed = 4"));
}

#[test]
fn translate_input_file() {
    let r = Run::new();
    r.ok(&["generate"]);
    r.ok(&["train"]);
    let first = std::fs::read_to_string(r.path("corpus/test_in.src")).unwrap();
    let line = first.lines().next().unwrap().to_string();
    let input = r.out.join("input.txt");
    std::fs::write(&input, format!("{line}\n\n{line}\n")).unwrap();
    let o = r.ok(&["translate", "--input", input.to_str().unwrap()]);
    let lines: Vec<String> = String::from_utf8(o.stdout).unwrap().lines().map(str::to_string).collect();
    assert_eq!(lines.len(), 3);
    assert_eq!(lines[1], "");
    assert_eq!(lines[0], lines[2]);
}
