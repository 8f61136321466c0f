# SPDX-License-Identifier: Apache-2.0
"""Smoke test for the python bindings: every exposed operation runs and the
fixed-value cases agree with the C++ unit suite."""

import math
import os
import sys
import tempfile

import qdst


def test_pattern_mask():
    m = qdst.pattern_mask("qds", 32, window=8)
    assert m.shape == (32, 32)
    assert m.dtype.name == "uint8"
    nz = int(m.sum())
    assert 0 < nz < 32 * 32
    stats = qdst.sparsity("qds", 32, window=8)
    assert stats["nonzeros"] == nz
    assert stats["total"] == 32 * 32
    assert math.isclose(stats["fraction"], nz / (32 * 32))
    full = qdst.pattern_mask("full", 16, window=2)
    assert int(full.sum()) == 16 * 16
    assert set(qdst.presets()) >= {"full", "local_only", "qds"}


def test_pattern_rejects_bad_window():
    try:
        qdst.pattern_mask("qds", 32, window=7)
    except ValueError:
        return
    raise AssertionError("odd window should raise")


def test_tokenization():
    v = qdst.Vocabulary()
    ids = qdst.tokenize_build("The cat sat. The dog ran!", v)
    assert len(ids) == 6
    assert len(v) == 5 + 5  # five reserved ids plus five distinct words
    frozen = qdst.tokenize("the cat flew", v)
    assert frozen[0] == ids[0]
    assert frozen[2] == 1  # unknown word maps to [UNK]
    assert qdst.split_sentences("One. Two? Three") == ["One.", "Two?", "Three"]
    assert qdst.word_split("Hello, World-2") == ["hello", "world", "2"]


def test_metrics():
    ranking = [("a", 2.0), ("b", 1.0)]
    qrels = {"a": 0, "b": 2}
    assert math.isclose(qdst.ndcg(ranking, qrels, k=2), 0.6309297535714574)
    assert math.isclose(qdst.mrr(ranking, qrels, k=10), 0.5)
    assert math.isclose(qdst.average_precision(ranking, qrels), 0.5)
    assert math.isclose(qdst.err([("a", 1.0)], {"a": 4}, k=20), 15.0 / 16.0)


def test_model_round_trip():
    model = qdst.Model.create(
        dim=16, heads=2, layers=1, max_len=64, vocab_size=64, window=8, seed=3
    )
    assert model.dim == 16 and model.heads == 2 and model.layers == 1
    assert model.preset == "qds" and model.window == 8
    s = model.score([5, 6], [[7, 8, 9], [10, 11]])
    assert math.isfinite(s)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "m.qdst")
        model.save(path)
        back = qdst.Model.load(path)
        assert back.score([5, 6], [[7, 8, 9], [10, 11]]) == s


def test_model_score_text():
    v = qdst.Vocabulary()
    qdst.tokenize_build("solar panels power grids. batteries store energy.", v)
    model = qdst.Model.create(
        dim=16, heads=2, layers=1, max_len=64, vocab_size=max(64, len(v)), window=8
    )
    s = model.score_text(
        "solar power", "Solar panels power grids. Batteries store energy.", v
    )
    assert math.isfinite(s)


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for t in tests:
        t()
        print(f"ok   {t.__name__}")
    print(f"all {len(tests)} python smoke tests passed")


if __name__ == "__main__":
    sys.exit(main())
