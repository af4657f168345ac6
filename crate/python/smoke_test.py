"""Smoke test for the `dapt` extension module.

Build first with `cargo build -p dapt-py` (or `--release`), then run
`python3 python/smoke_test.py`. Set DAPT_LIB to point at a specific
shared library.
"""

import importlib.machinery
import importlib.util
import math
import os
import sys
from pathlib import Path

ROOT = Path(__file__).resolve().parent.parent


def load_module():
    candidates = [os.environ.get("DAPT_LIB")] + [
        str(ROOT / "target" / profile / name)
        for profile in ("release", "debug")
        for name in ("libdapt.so", "libdapt.dylib", "dapt.dll")
    ]
    for path in filter(None, candidates):
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("dapt", path)
            spec = importlib.util.spec_from_file_location("dapt", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("dapt extension not found; run `cargo build -p dapt-py` first")


def main():
    dapt = load_module()

    vocab = dapt.Vocab([["book", "a", "table"], ["book", "two"]])
    assert len(vocab) == 5 + 4
    ids = vocab.encode(["book", "a", "table", "for", "two"])
    assert vocab.token_of(ids[0]) == "book"
    assert vocab.token_of(ids[3]) == "[UNK]"

    assert dapt.mask_budget(20, 0.15) == 3
    pmf = dapt.span_length_pmf(0.2, 10)
    assert abs(sum(pmf) - 1.0) < 1e-12
    assert abs(pmf[0] - 0.2 / (1 - 0.8 ** 10)) < 1e-12

    content = list(range(5, 45))
    plan = dapt.sample_plan(content, scheme="span", seed=3)
    assert sum(e - s + 1 for s, e, _, _ in plan) == dapt.mask_budget(len(content), 0.15)
    assert plan == dapt.sample_plan(content, scheme="span", seed=3)
    np_plan = dapt.sample_plan(content, scheme="np", seed=1, alpha=1.0, noun_phrases=[(2, 4, 1.0)])
    assert np_plan[0][:2] == (2, 4) and np_plan[0][3] == "np"

    enc = dapt.Encoder(vocab_size=50, d_model=8, n_heads=2, n_layers=2, d_ff=16, max_positions=16, seed=1)
    seq = [3, 10, 11, 12, 13, 4]
    h = enc.forward(seq)
    assert len(h) == len(seq) and len(h[0]) == 8
    m = enc.impact_matrix(seq)
    assert all(m[i][i] == 0.0 for i in range(len(seq)))
    assert all(x >= 0.0 for row in m for x in row)
    assert math.isclose(m[2][3], enc.impact(seq, 2, [3]), rel_tol=0, abs_tol=1e-12)
    assert enc.impact(seq, 2, []) == 0.0

    assert dapt.decode_bio(["O", "B-A0", "I-A0", "O"]) == [(1, 2, "A0")]
    assert dapt.decode_bio(["I-A1", "I-A1"]) == [(0, 1, "A1")]
    assert dapt.encode_bio(4, [(1, 2, "A0")]) == ["O", "B-A0", "I-A0", "O"]

    gold = [(1, 3, 3, "ARG0", True), (1, 5, 6, "ARG1", False)]
    pred = [(1, 5, 6, "ARG1", False), (1, 7, 7, "ARG1", False)]
    r = dapt.csrl_f1(pred, gold)
    assert math.isclose(r["intra"][5], 2 / 3)
    assert r["cross"][5] == 0.0
    assert math.isclose(r["all"][5], 0.5)

    s = dapt.slu_f1([(["a"], [(1, 1, "s1")])], [(["a", "b"], [(1, 1, "s1")])])
    assert math.isclose(s["intent"][5], 2 / 3)
    assert s["slot"][5] == 1.0
    assert math.isclose(s["all"][5], 0.8)
    assert s["all"][:3] == (2, 0, 1)

    print("python smoke test passed")


if __name__ == "__main__":
    main()
