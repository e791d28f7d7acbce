"""Smoke test for the halluprobe Python bindings.

Build first: pip install --no-build-isolation -e crates/python
"""

import math
import tempfile
from pathlib import Path

import halluprobe as hp

TINY = """
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

[probe]
train_pairs = 50
steps = 20
batch_tokens = 64
snapshot_every = 10
average_last = 2
bootstrap_resamples = 50
"""


def check_metrics():
    assert math.isclose(hp.adjusted_bleu("a b c d", "a b x y"), math.sqrt(0.5 / 3), abs_tol=1e-12)
    assert hp.bleu(["x", "y", "z", "w"], ["x", "y", "z", "w"]) == 1.0
    assert hp.bleu("a b", "c d") == 0.0
    assert hp.corpus_bleu([("a b", "a b")], weights=[0.5, 0.5]) == 1.0
    assert hp.word_accuracy([4, 5, 6], [4, 7, 6]) == (2, 3)
    assert hp.is_hallucinated(0.0) and not hp.is_hallucinated(0.01)
    a = hp.aggregate_alignment([[[0.2, 0.8]], [[0.6, 0.4]]], [0.0, 0.0])
    assert all(math.isclose(x, y) for x, y in zip(a[0], [0.4, 0.6]))
    assert hp.parse_layers("emb,1..2") == [0, 1, 2]


def check_pipeline(root):
    cfg = hp.RunConfig.from_toml(TINY)
    cfg.out = str(root / "run")
    assert cfg.with_overrides(["train.steps=50"]).config_hash() != cfg.config_hash()
    try:
        cfg.with_overrides(["nope.x=1"])
    except ValueError:
        pass
    else:
        raise AssertionError("bad override accepted")

    pipe = hp.Pipeline(cfg)
    try:
        pipe.run("train")
    except hp.HalluprobeError as e:
        assert "halluprobe generate" in str(e)
    else:
        raise AssertionError("train ran without a corpus")

    stages = pipe.run_all()
    assert stages == ["corpus", "model", "translate", "detect", "probe", "report"], stages
    assert all(pipe.is_current(s) for s in stages)
    assert (Path(pipe.root) / "report" / "report.md").exists()

    model = pipe.model()
    assert model.config["d_model"] == 16
    assert len(model.checksum()) == 64
    out = model.translate([5, 6, 2], beam_size=2)
    assert out[-1] == 2
    logits = model.forward([5, 6, 2], [1, 7])
    assert len(logits) == 2 and len(logits[0]) == model.config["vocab_size"]
    src = (Path(pipe.root) / "corpus" / "test_in.src").read_text().splitlines()[:2]
    print("translations:", pipe.translate(src))


def main():
    check_metrics()
    with tempfile.TemporaryDirectory() as tmp:
        check_pipeline(Path(tmp))
    print("smoke test ok")


if __name__ == "__main__":
    main()
