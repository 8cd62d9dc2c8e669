"""Smoke test for the sparse_dd extension module.

Build and install first:  pip install maturin && maturin develop -m crates/python/Cargo.toml
"""

import math
import os
import tempfile

import sparse_dd as sd


def main():
    m = sd.Mlp(784, [300, 100], 10, seed=1)
    assert m.parameter_count == 266_610
    assert m.forward_flops() == 532_400
    removed = m.prune(0.5, "per_layer")
    assert removed == 133_100 and abs(m.sparsity - 0.5) < 1e-12
    assert m.forward_flops() == 266_200
    logits = m.predict([[0.0] * 784, [1.0] * 784])
    assert len(logits) == 2 and len(logits[0]) == 10

    v = sd.detect_sdd([0.90, 0.89, 0.80, 0.70, 0.78, 0.86, 0.85, 0.40], tol=0.05)
    assert v.is_sdd and v.dip_index == 3 and v.recovery_index == 5
    assert sd.first_stop_index([0.90, 0.89, 0.80, 0.70, 0.78, 0.86, 0.85, 0.40], 2, 0.02) == 3
    assert abs(sd.co2_estimate(1e15, 1e9, 500.0) - 138.888888) < 1e-5

    labels = [i % 10 for i in range(10_000)]
    noisy = sd.inject_noise(labels, 10, 0.2, seed=3)
    assert sum(a != b for a, b in zip(labels, noisy)) == 2000

    with tempfile.TemporaryDirectory() as tmp:
        out = os.path.join(tmp, "run")
        config = f"""
dataset = "blobs"
blob_classes = 4
blob_per_class = 40
blob_dim = 8
noise_epsilon = 0.2
hidden_dims = [16]
zeta_end = 0.6
base_lr = 0.05
batch_size = 16
epochs = 3
seed = 1
output_dir = "{out}"
"""
        records = sd.imp_run(config)
        assert records[0].sparsity == 0.0 and records[-1].sparsity >= 0.6
        again = sd.read_rounds(os.path.join(out, "rounds.csv"))
        assert [r.test_acc for r in again] == [r.test_acc for r in records]
        ckpt = sd.Mlp.load(os.path.join(out, records[-1].checkpoint_path))
        assert math.isclose(ckpt.sparsity, records[-1].sparsity)
        svg = os.path.join(tmp, "curve.svg")
        sd.plot([("blobs", os.path.join(out, "rounds.csv"))], svg)
        assert open(svg).read().count("<polyline") == 1

    try:
        sd.imp_run('dataset = "blobs"\nnonsense = 1\n')
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")
    print("smoke test ok")


if __name__ == "__main__":
    main()
