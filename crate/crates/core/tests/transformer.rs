use std::fs;

use halluprobe::corpus::{CorpusSplit, Domain, SentencePair, SplitName, BOS, EOS};
use halluprobe::numerics::{rng, Tensor};
use halluprobe::transformer::*;
use rand::Rng;

fn tiny(vocab: usize, layers: usize, heads: usize, d: usize) -> ModelConfig {
    ModelConfig {
        n_enc_layers: layers,
        n_dec_layers: layers,
        n_heads: heads,
        d_model: d,
        d_ffn: 2 * d,
        vocab_size: vocab,
        max_len: 12,
        dropout: 0.0,
    }
}

fn random_ids(r: &mut impl Rng, n: usize, vocab: usize) -> Vec<u32> {
    (0..n).map(|_| r.random_range(4..vocab as u32)).collect()
}

type Mat = Vec<Vec<f64>>;

/// Straight-line scalar reimplementation of the architecture, reading
/// parameters by name.
struct Naive<'a> {
    m: &'a TransformerModel<f64>,
}

impl Naive<'_> {
    fn p(&self, name: &str) -> &[f64] {
        self.m.param(name).unwrap_or_else(|| panic!("{name}")).data()
    }

    fn mat(&self, name: &str) -> Mat {
        let t = self.m.param(name).unwrap();
        let (r, c) = (t.shape()[0], t.shape()[1]);
        (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
    }

    fn linear(&self, x: &Mat, prefix: &str, w: &str, b: &str) -> Mat {
        let w = self.mat(&format!("{prefix}.{w}"));
        let b = self.p(&format!("{prefix}.{b}"));
        x.iter()
            .map(|row| {
                (0..b.len())
                    .map(|j| b[j] + row.iter().enumerate().map(|(k, v)| v * w[k][j]).sum::<f64>())
                    .collect()
            })
            .collect()
    }

    fn ln(&self, x: &Mat, prefix: &str) -> Mat {
        let g = self.p(&format!("{prefix}.gain"));
        let b = self.p(&format!("{prefix}.bias"));
        x.iter()
            .map(|row| {
                let n = row.len() as f64;
                let mean = row.iter().sum::<f64>() / n;
                let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
                row.iter()
                    .enumerate()
                    .map(|(c, v)| (v - mean) / (var + 1e-5).sqrt() * g[c] + b[c])
                    .collect()
            })
            .collect()
    }

    fn attn(&self, xq: &Mat, xkv: &Mat, prefix: &str, causal: bool, probs_out: &mut Vec<Mat>) -> Mat {
        let cfg = self.m.config();
        let dh = cfg.d_model / cfg.n_heads;
        let q = self.linear(xq, prefix, "wq", "bq");
        let k = self.linear(xkv, prefix, "wk", "bk");
        let v = self.linear(xkv, prefix, "wv", "bv");
        let mut ctx = vec![vec![0.0; cfg.d_model]; xq.len()];
        for h in 0..cfg.n_heads {
            let mut probs = Vec::new();
            for t in 0..xq.len() {
                let allowed = if causal { t + 1 } else { xkv.len() };
                let s: Vec<f64> = (0..allowed)
                    .map(|u| (0..dh).map(|c| q[t][h * dh + c] * k[u][h * dh + c]).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let mx = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = s.iter().map(|v| (v - mx).exp()).sum();
                let mut p = vec![0.0; xkv.len()];
                for u in 0..allowed {
                    p[u] = (s[u] - mx).exp() / z;
                }
                for u in 0..allowed {
                    for c in 0..dh {
                        ctx[t][h * dh + c] += p[u] * v[u][h * dh + c];
                    }
                }
                probs.push(p);
            }
            probs_out.push(probs);
        }
        self.linear(&ctx, prefix, "wo", "bo")
    }

    fn ffn(&self, x: &Mat, prefix: &str) -> Mat {
        let h = self.linear(x, prefix, "w1", "b1");
        let h: Mat = h.into_iter().map(|r| r.into_iter().map(|v| v.max(0.0)).collect()).collect();
        self.linear(&h, prefix, "w2", "b2")
    }

    fn embed(&self, ids: &[u32]) -> Mat {
        let d = self.m.config().d_model;
        let e = self.mat("embed");
        ids.iter()
            .enumerate()
            .map(|(p, &id)| {
                (0..d)
                    .map(|i| {
                        let angle = p as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
                        let pe = if i % 2 == 0 { angle.sin() } else { angle.cos() };
                        e[id as usize][i] * (d as f64).sqrt() + pe
                    })
                    .collect()
            })
            .collect()
    }

    fn add(a: &Mat, b: &Mat) -> Mat {
        a.iter().zip(b).map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect()).collect()
    }

    /// Returns logits and the cross-attention maps.
    fn run(&self, src: &[u32], prefix: &[u32]) -> (Mat, Vec<Mat>) {
        let cfg = self.m.config();
        let mut sink = Vec::new();
        let mut x = self.embed(src);
        for i in 0..cfg.n_enc_layers {
            let p = format!("enc.{i}");
            let s = Self::add(&x, &self.attn(&self.ln(&x, &format!("{p}.ln1")), &self.ln(&x, &format!("{p}.ln1")), &format!("{p}.self_attn"), false, &mut sink));
            x = Self::add(&s, &self.ffn(&self.ln(&s, &format!("{p}.ln2")), &format!("{p}.ffn")));
        }
        let mem = self.ln(&x, "enc.ln");
        let mut y = self.embed(prefix);
        let mut cross = Vec::new();
        for j in 0..cfg.n_dec_layers {
            let p = format!("dec.{j}");
            let n = self.ln(&y, &format!("{p}.ln1"));
            let a = Self::add(&y, &self.attn(&n, &n, &format!("{p}.self_attn"), true, &mut sink));
            let b = Self::add(&a, &self.attn(&self.ln(&a, &format!("{p}.ln2")), &mem, &format!("{p}.cross_attn"), false, &mut cross));
            y = Self::add(&b, &self.ffn(&self.ln(&b, &format!("{p}.ln3")), &format!("{p}.ffn")));
        }
        let n = self.ln(&y, "dec.ln");
        let e = self.mat("embed");
        let logits = n
            .iter()
            .map(|row| e.iter().map(|er| er.iter().zip(row).map(|(a, b)| a * b).sum()).collect())
            .collect();
        (logits, cross)
    }
}

#[test]
fn forward_matches_scalar_oracle_single_head() {
    let m = TransformerModel::<f64>::new(tiny(9, 1, 1, 4), 3).unwrap();
    let (src, prefix) = ([4, 7, 5, EOS], [BOS, 6, 8]);
    let out = m.forward(&src, &prefix, true).unwrap();
    let (want, cross) = Naive { m: &m }.run(&src, &prefix);
    for (t, row) in want.iter().enumerate() {
        for (v, w) in row.iter().enumerate() {
            assert!((out.logits.get2(t, v) - w).abs() < 1e-12, "t={t} v={v}");
        }
    }
    let trace = out.trace.unwrap();
    assert_eq!(trace.cross_attn.len(), 1);
    for (t, row) in cross[0].iter().enumerate() {
        for (s, w) in row.iter().enumerate() {
            assert!((trace.cross_attn[0].get2(t, s) - w).abs() < 1e-12);
        }
    }
}

#[test]
fn forward_matches_scalar_oracle_multi_layer() {
    let m = TransformerModel::<f64>::new(tiny(15, 2, 2, 8), 5).unwrap();
    let mut r = rng::stream(1, "test");
    for _ in 0..5 {
        let src = random_ids(&mut r, 6, 15);
        let mut prefix = vec![BOS];
        prefix.extend(random_ids(&mut r, 4, 15));
        let out = m.forward(&src, &prefix, false).unwrap();
        let (want, cross) = Naive { m: &m }.run(&src, &prefix);
        let got = Tensor::new(vec![want.len(), 15], want.concat()).unwrap();
        assert!(out.logits.max_abs_diff(&got).unwrap() < 1e-10);
        assert_eq!(cross.len(), 4);
    }
}

#[test]
fn causality_future_tokens_do_not_leak() {
    let m = TransformerModel::<f32>::new(tiny(20, 2, 2, 16), 9).unwrap();
    let mut r = rng::stream(2, "causal");
    for _ in 0..20 {
        let (ns, np) = (r.random_range(1..10), r.random_range(1..10));
        let src = random_ids(&mut r, ns, 20);
        let mut prefix = vec![BOS];
        prefix.extend(random_ids(&mut r, np, 20));
        let cut = r.random_range(0..prefix.len());
        let mut changed = prefix.clone();
        for tok in changed.iter_mut().skip(cut + 1) {
            *tok = r.random_range(4..20);
        }
        changed[cut + 1..].reverse();
        let a = m.forward(&src, &prefix, false).unwrap().logits;
        let b = m.forward(&src, &changed, false).unwrap().logits;
        for t in 0..=cut {
            assert_eq!(a.row(t), b.row(t), "position {t} changed");
        }
    }
}

#[test]
fn tracing_does_not_change_logits() {
    let m = TransformerModel::<f32>::new(tiny(20, 2, 2, 16), 4).unwrap();
    let a = m.forward(&[5, 6, 7, EOS], &[BOS, 9, 10], false).unwrap();
    let b = m.forward(&[5, 6, 7, EOS], &[BOS, 9, 10], true).unwrap();
    assert_eq!(a.logits, b.logits);
    assert!(a.trace.is_none());
    let t = b.trace.unwrap();
    assert_eq!(t.enc_layers.len(), 2);
    assert_eq!(t.embedding.shape(), &[4, 16]);
    assert_eq!(t.dec_no_cross[1].shape(), &[3, 16]);
    for a in &t.cross_attn {
        assert_eq!(a.shape(), &[3, 4]);
        for r in 0..3 {
            assert!((a.row(r).iter().sum::<f32>() - 1.0).abs() < 1e-5);
        }
    }
}

#[test]
fn over_length_and_bad_token_rejected() {
    let m = TransformerModel::<f32>::new(tiny(20, 1, 1, 4), 1).unwrap();
    assert!(matches!(m.forward(&[5; 13], &[BOS], false), Err(TransformerError::Length { len: 13, max: 12 })));
    assert!(matches!(m.forward(&[25], &[BOS], false), Err(TransformerError::Token { id: 25, .. })));
    assert!(ModelConfig { d_model: 6, n_heads: 4, ..tiny(5, 1, 1, 4) }.validate().is_err());
}

#[test]
fn parameter_count_follows_config() {
    for (layers, heads, d, v) in [(1, 1, 4, 9), (2, 2, 8, 12), (3, 4, 16, 30)] {
        let cfg = tiny(v, layers, heads, d);
        let f = cfg.d_ffn;
        let attn = 4 * (d * d + d);
        let ln = 2 * d;
        let ffn = d * f + f + f * d + d;
        let expected = v * d + layers * (2 * ln + attn + ffn) + ln + layers * (3 * ln + 2 * attn + ffn) + ln;
        let m = TransformerModel::<f32>::new(cfg.clone(), 0).unwrap();
        assert_eq!(m.layout().param_count(), expected);
        assert_eq!(m.params().iter().map(Tensor::numel).sum::<usize>(), expected);
    }
}

#[test]
fn cached_decoding_matches_full_forward() {
    let m = TransformerModel::<f64>::new(tiny(20, 2, 2, 8), 8).unwrap();
    let src = [4, 9, 13, 6, EOS];
    let prefix = [BOS, 7, 11, 5, 17];
    let full = m.forward(&src, &prefix, false).unwrap().logits;
    let enc = m.encode_source(&src).unwrap();
    let mut st = m.decode_start();
    for (t, &tok) in prefix.iter().enumerate() {
        let step = m.decode_step(&enc, &mut st, tok).unwrap();
        for (v, x) in step.iter().enumerate() {
            assert!((x - full.get2(t, v)).abs() < 1e-10);
        }
    }
    assert_eq!(st.len(), 5);
}

#[test]
fn beam_one_is_greedy_on_a_model() {
    let m = TransformerModel::<f32>::new(tiny(20, 2, 2, 8), 6).unwrap();
    let params = BeamParams {
        beam_size: 1,
        max_len: 10,
        ..BeamParams::default()
    };
    let mut r = rng::stream(3, "beam");
    for _ in 0..10 {
        let scorer = ModelScorer::new(&m, &random_ids(&mut r, 5, 20)).unwrap();
        let b = beam_search(&scorer, &params).unwrap();
        let g = greedy_search(&scorer, &params).unwrap();
        assert_eq!(b.tokens, g.tokens);
        assert_eq!(b.tokens.last(), Some(&EOS));
        assert!(b.tokens.len() <= 10 && !b.tokens.contains(&BOS) && !b.tokens.contains(&0));
    }
}

fn toy_corpus(n: usize) -> CorpusSplit {
    let pairs = (0..n)
        .map(|i| {
            let a = 4 + (i % 6) as u32;
            let b = 4 + ((i * 5 + 1) % 6) as u32;
            SentencePair {
                source: vec![a, b, EOS],
                target: vec![b + 6, a + 6, EOS],
                raw_source: String::new(),
                raw_target: String::new(),
                domain_tag: "in".into(),
            }
        })
        .collect();
    CorpusSplit::new(pairs, SplitName::Train, Domain::In, 12).unwrap()
}

fn short_schedule(steps: u64, lr: f64) -> TrainConfig {
    TrainConfig {
        steps,
        batch_tokens: 30,
        lr,
        warmup: 0,
        label_smoothing: 0.0,
        checkpoint_every: 10,
        seed: 4,
    }
}

#[test]
fn smoothed_training_loss_strictly_decreases() {
    let mut m = TransformerModel::<f32>::new(tiny(16, 2, 2, 16), 2).unwrap();
    let report = train(&mut m, &toy_corpus(10), &short_schedule(50, 3e-3), None).unwrap();
    assert_eq!(report.losses.len(), 50);
    let smooth: Vec<f64> = report.losses.windows(10).map(|w| w.iter().sum::<f64>() / 10.0).collect();
    for w in smooth.windows(2) {
        assert!(w[1] < w[0], "{smooth:?}");
    }
}

#[test]
fn zero_learning_rate_keeps_parameters() {
    let mut m = TransformerModel::<f32>::new(tiny(16, 1, 2, 8), 2).unwrap();
    let before = m.clone();
    train(&mut m, &toy_corpus(10), &short_schedule(5, 0.0), None).unwrap();
    assert_eq!(m.params(), before.params());
}

#[test]
fn training_is_reproducible_and_checkpointed() {
    let dir = tempfile::tempdir().unwrap();
    let run = |sub: &str| {
        let out = dir.path().join(sub);
        fs::create_dir_all(&out).unwrap();
        let mut m = TransformerModel::<f32>::new(ModelConfig { dropout: 0.1, ..tiny(16, 1, 2, 8) }, 2).unwrap();
        let rep = train(&mut m, &toy_corpus(10), &short_schedule(25, 1e-3), Some(&out)).unwrap();
        (m, rep)
    };
    let (a, ra) = run("a");
    let (b, rb) = run("b");
    assert_eq!(a.checksum(), b.checksum());
    assert_eq!(ra.losses, rb.losses);
    let names: Vec<String> = ra.checkpoints.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    assert_eq!(names, ["ckpt_000010.bin", "ckpt_000020.bin", "ckpt_000025.bin"]);
    for (x, y) in ra.checkpoints.iter().zip(&rb.checkpoints) {
        assert_eq!(fs::read(x).unwrap(), fs::read(y).unwrap());
    }
    let last = TransformerModel::<f32>::load(ra.checkpoints.last().unwrap()).unwrap();
    assert_eq!(last.checksum(), a.checksum());
}

#[test]
fn divergence_aborts_and_points_at_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut m = TransformerModel::<f32>::new(tiny(16, 1, 2, 8), 2).unwrap();
    let emb = m.param("embed").unwrap().map(|_| f32::NAN);
    m.set_param("embed", emb).unwrap();
    let err = train(&mut m, &toy_corpus(10), &short_schedule(5, 1e-3), Some(dir.path())).unwrap_err();
    assert!(matches!(err, TransformerError::Diverged { step: 1, last_good: None }));

    let mut m = TransformerModel::<f32>::new(tiny(16, 1, 2, 8), 2).unwrap();
    let cfg = TrainConfig {
        checkpoint_every: 1,
        ..short_schedule(10, 1e36)
    };
    match train(&mut m, &toy_corpus(10), &cfg, Some(dir.path())) {
        Err(TransformerError::Diverged { step, last_good: Some(p) }) => {
            assert!(step >= 2);
            assert!(p.exists());
            assert!(p.to_string_lossy().ends_with(&format!("ckpt_{:06}.bin", step - 1)));
        }
        other => panic!("expected divergence, got {other:?}"),
    }
}

#[test]
fn frozen_model_refuses_mutation() {
    let mut m = TransformerModel::<f32>::new(tiny(16, 1, 1, 4), 2).unwrap();
    m.freeze();
    assert!(matches!(m.params_mut(), Err(TransformerError::Frozen)));
    assert!(matches!(m.set_param("embed", Tensor::zeros(&[16, 4])), Err(TransformerError::Frozen)));
    assert!(matches!(train(&mut m, &toy_corpus(3), &short_schedule(1, 1e-3), None), Err(TransformerError::Frozen)));
}

#[test]
fn checkpoint_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    let m = TransformerModel::<f32>::new(tiny(16, 2, 2, 8), 2).unwrap();
    m.save(&path, serde_json::json!({"note": "x"})).unwrap();
    let back = TransformerModel::<f32>::load(&path).unwrap();
    assert_eq!(back.params(), m.params());
    let c = read_container(&path).unwrap();
    assert_eq!(c.meta["extra"]["note"], "x");
    let mut bytes = fs::read(&path).unwrap();
    assert_eq!(&bytes[..8], MAGIC);
    assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), FORMAT_VERSION);
    bytes[100] ^= 1;
    fs::write(&path, &bytes).unwrap();
    assert!(matches!(TransformerModel::<f32>::load(&path), Err(TransformerError::Checkpoint(_))));
}

#[test]
fn averaging_examples() {
    let cfg = tiny(16, 1, 1, 4);
    let base = TransformerModel::<f32>::new(cfg.clone(), 1).unwrap();
    let filled = |v: f32| TransformerModel::from_params(cfg.clone(), base.params().iter().map(|p| p.map(|_| v)).collect()).unwrap();
    let avg = average_models(&[filled(0.0), filled(2.0)]).unwrap();
    assert!(avg.params().iter().all(|p| p.data().iter().all(|&v| v == 1.0)));
    let same = average_models(&[base.clone(), base.clone(), base.clone()]).unwrap();
    assert_eq!(same.params(), base.params());
    let other = TransformerModel::<f32>::new(tiny(16, 1, 1, 8), 1).unwrap();
    assert!(matches!(average_models(&[base, other]), Err(TransformerError::Incompatible(_))));
}
