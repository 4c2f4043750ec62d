"""Smoke test for the visaff extension module.

Build and install first:
    pip install maturin
    maturin build --release -m crates/py/Cargo.toml -o dist && pip install dist/visaff-*.whl
"""

import json
import math
import tempfile
from pathlib import Path

import visaff


def close(a, b, tol=1e-12):
    return abs(a - b) <= tol


def main():
    p = visaff.softmax([1.0, 2.0, 3.0])
    assert close(sum(p), 1.0)
    z = sum(math.exp(v) for v in (1.0, 2.0, 3.0))
    assert all(close(a, math.exp(v) / z) for a, v in zip(p, (1.0, 2.0, 3.0)))

    h, d = [0.5, -1.25], [2.0, 0.75]
    assert visaff.complement_visual(h, d, 1.0) == h
    assert visaff.complement_visual(h, d, 0.0) == [a + b for a, b in zip(h, d)]

    assert close(visaff.weighted_f1([0, 1, 1, 2], [0, 1, 2, 2], 3), 0.75)
    assert visaff.bounded_ce([0.0, 1.0], 0) <= 10.0 + 1e-12
    assert close(sum(visaff.fuse_predictions(0.3, [0.9, 0.1], [0.2, 0.8])), 1.0)

    try:
        visaff.weighted_f1([0], [5], 2)
    except visaff.VisaffError:
        pass
    else:
        raise AssertionError("out-of-range label accepted")

    spec = json.dumps({"train_conversations": 20, "val_conversations": 5, "test_conversations": 5})
    bundle = visaff.SyntheticBundle(spec, seed=1)
    assert bundle.num_conversations("train") == 20

    model = visaff.Model.train(bundle, json.dumps({"epochs": 3, "hidden": 16}))
    assert len(model.log()) == 3
    report = model.evaluate(bundle, "test")
    assert 0.0 <= report["weighted_f1"] <= 1.0
    assert model.traces(bundle, "test")
    dec = model.decomposition(bundle, "test")
    assert dec["identity_residual"] < 1e-10

    with tempfile.TemporaryDirectory() as tmp:
        ckpt = Path(tmp) / "model.ckpt"
        model.save(str(ckpt))
        again = visaff.Model.load(str(ckpt))
        assert again.evaluate(bundle, "test") == report
        written = visaff.write_synthetic(str(Path(tmp) / "bundle"), spec, 2)
        assert all(Path(p).exists() for p in written)

    bound = visaff.bound_check(json.dumps({"resamples": 20}))
    assert bound["resamples"] == 20

    print("visaff smoke test passed")


if __name__ == "__main__":
    main()
