"""Smoke test for the normformer_lab extension.

Build and install first:

    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist
    pip install dist/normformer_lab-*.whl
"""

import math
import tempfile
from pathlib import Path

import normformer_lab as nl

SMALL = [
    "model.d_model=16",
    "model.n_heads=2",
    "model.n_layers=2",
    "model.d_ffn=32",
    "model.max_seq_len=16",
    "train.seq_len=16",
    "train.batch_size=2",
    "train.total_steps=30",
    "train.warmup_steps=5",
    "train.eval_every=10",
    "train.eval_batches=2",
    "data.synthetic_bytes=20000",
]


def main():
    assert nl.tokenize(b"A") == [65]
    assert nl.detokenize(nl.tokenize(b"hello")) == b"hello"
    assert nl.VOCAB_SIZE == 258

    probs = nl.softmax([[1.0, 2.0, 3.0]])[0]
    assert abs(sum(probs) - 1.0) < 1e-12
    y = nl.layer_norm([[1.0, 2.0, 3.0, 4.0]], [1.0] * 4, [0.0] * 4)[0]
    assert abs(sum(y)) < 1e-12
    assert nl.gelu([0.0]) == [0.0]

    cfg = nl.Config(overrides=SMALL + ["variant=normformer"])
    assert cfg["arrangement"] == "normformer"
    total, added = cfg.parameter_count()
    # 2 layers * (post-attention LN 2d + FFN LN 2*d_ffn + 2 head scales)
    assert added == 2 * (2 * 16 + 2 * 32 + 2)

    model = nl.Model(cfg)
    assert model.num_params == total
    logits = model.forward_clm([72, 105, 33])
    assert len(logits) == 3 and len(logits[0]) == 258
    assert "blocks.0.head_scale.gamma" in model.param_names()

    with tempfile.TemporaryDirectory() as tmp:
        out = Path(tmp) / "run"
        manifest = nl.train(cfg, str(out))
        assert manifest["completed"] and not manifest["diverged"]
        assert manifest["steps_completed"] == 30
        assert math.isfinite(manifest["final_valid_loss"])
        assert nl.read_manifest(str(out)) == manifest

        ratio = nl.mismatch_ratio(str(out), "ffn.w2", 1, 30)
        means = nl.layer_means(str(out), "ffn.w2", 1, 30)
        assert [layer for layer, _ in means] == [0, 1]
        assert abs(ratio - means[0][1] / means[1][1]) < 1e-12
        assert "Gradient mismatch" in nl.report([str(out)])

        reloaded = nl.Model.load(str(out / "checkpoint.bin"))
        assert reloaded.num_params == model.num_params

        try:
            nl.Config(overrides=["n_heads=5", "d_model=64"])
        except ValueError as e:
            assert "n_heads" in str(e) or "d_model" in str(e)
        else:
            raise AssertionError("invalid head count accepted")

    print("normformer_lab smoke test passed")


if __name__ == "__main__":
    main()
