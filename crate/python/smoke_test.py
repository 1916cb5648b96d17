"""Smoke test for the `crq` extension module.

Build and stage the module first:

    cargo build --release -p crq-python
    cp target/release/libcrq.so python/crq.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import crq


def check_cluster():
    w = [0.9, -1.1, 0.05, 0.4, -0.02, 1.3]
    sol = crq.solve(w)
    best = crq.brute_force_solve(w)
    assert set(sol.codes) <= {-1, 0, 1}
    assert sol.objective >= best.objective - 1e-12
    assert all(b <= a + 1e-12 for a, b in zip(sol.trace, sol.trace[1:]))
    assert crq.assign_codes(w, sol.alpha) == list(sol.codes)
    assert abs(crq.objective(w, sol.codes, sol.alpha) - sol.objective) < 1e-12
    assert crq.update_alpha(w, [0] * len(w)) is None
    packed = crq.pack_codes(sol.codes)
    assert len(packed) == (len(w) + 3) // 4
    assert crq.unpack_codes(packed, len(w)) == list(sol.codes)
    try:
        crq.pack_codes([2])
    except ValueError:
        pass
    else:
        raise AssertionError("invalid code accepted")


def check_training():
    data = crq.Dataset.blobs(3, 600, seed=1)
    train, val = data.split(0.2, seed=2)
    assert len(train) == 480 and len(val) == 120

    net = crq.Network.mlp([2, 16, 16, 3], seed=3)
    crq.retrain(net, train, lambda_=0.0, epochs=20, seed=4)
    ref_error = crq.evaluate(net, val)

    log = crq.retrain(net, train, lambda_=0.001, epochs=10, seed=5)
    assert len(log) == 10 and log[-1].epoch == 10
    model = crq.quantize(net, exclude=[])
    assert model.compression_ratio > 10.0
    assert all(a is not None and a > 0 for a in model.alphas)

    mse = crq.weight_mse(net, model)
    assert len(mse) == 3 and all(m >= 0 for m in mse)
    assert len(crq.output_mse(net, model, val)) == 3

    tuned, ft_log = crq.finetune(model, net, train, epochs=3, seed=6)
    assert len(ft_log) == 3
    err = crq.evaluate(tuned.dequantize(), val)
    print(f"reference error {ref_error:.2f}%  ternary fine-tuned {err:.2f}%")
    assert err < 50.0

    restored = crq.QuantizedModel.from_bytes(tuned.to_bytes())
    assert restored.codes(1) == tuned.codes(1)
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "model.crq")
        tuned.save(path)
        loaded = crq.QuantizedModel.load(path)
        assert loaded.dequantize().weights(0) == tuned.dequantize().weights(0)
        try:
            crq.QuantizedModel.load(os.path.join(tmp, "missing.crq"))
        except OSError:
            pass
        else:
            raise AssertionError("missing file accepted")


def check_pipeline():
    config = """
seed = 7
validation_fraction = 0.2

[dataset]
kind = "blobs"
classes = 3
samples = 300

[architecture]
kind = "mlp"
dims = [2, 8, 3]

[train]
pretrain_epochs = 3
retrain_epochs = 3
finetune_epochs = 2
"""
    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "config.toml")
        with open(path, "w") as f:
            f.write(config)
        written = crq.run_pipeline(path, os.path.join(tmp, "out"))
        names = {os.path.basename(p) for p in written}
        for expected in ("reference.ckpt", "crq_model.crq", "comparison.json", "curves.csv"):
            assert expected in names, expected


if __name__ == "__main__":
    check_cluster()
    check_training()
    check_pipeline()
    print("smoke test passed")
