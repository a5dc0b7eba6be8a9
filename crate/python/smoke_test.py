"""Smoke test for the `prwd` extension module.

Build first:
    cargo build --release -p prwd-py
    cp target/release/libprwd.so python/prwd.so
"""

import json
import os
import sys
import tempfile

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import prwd


def main():
    s = prwd.Schedule.cifar_resnet()
    assert s.total_epochs == 182
    assert s.lr_at(100) == 0.01
    assert s.lr_at(140) == 0.001
    assert s.lr_at(250) == 0.001
    assert prwd.sweep_grid(182, 10)[:3] == [18, 36, 55]
    assert prwd.search_cost("lr_rewind", 182, 182, iterations=3) == (546, 728)

    net = prwd.Network.mlp2(8, 16, 4, seed=1)
    mask = prwd.Mask.ones(net.num_params)
    pruned = prwd.global_magnitude_prune(net, mask, 0.5)
    assert pruned.is_subset_of(mask)
    assert pruned.surviving() == net.num_params - net.num_params // 2
    assert prwd.count_flops(net, pruned) < prwd.count_flops(net)

    logits, loss = net.forward([0.1] * 16, [0, 3], pruned)
    assert len(logits) == 8 and loss > 0

    conv = prwd.Network.conv4((1, 8, 8), (4, 8), 16, 4)
    masked = prwd.structured_filter_prune(conv, {0: 0.5, 2: 0.5})
    assert masked.compression_ratio() > 1

    with tempfile.TemporaryDirectory() as tmp:
        path = os.path.join(tmp, "net.prwd")
        net.save(path)
        assert prwd.Network.load(path).weights == net.weights
        mpath = os.path.join(tmp, "mask.prwm")
        pruned.save(mpath)
        assert prwd.Mask.load(mpath).bits == pruned.bits

        config = {
            "arch": {"preset": "mlp2", "hidden": 8},
            "dataset": {"kind": "synthetic", "classes": 2, "train_size": 64,
                        "test_size": 40, "shape": [4], "noise": 0.5, "seed": 3},
            "schedule": {"segments": [{"start": 0, "end": 2, "rate": 0.05}]},
            "techniques": ["fine_tune", "lr_rewind"],
            "sweep": {"retrain_points": 2, "compression_ratios": [2.0]},
            "seeds": [0],
            "output_dir": os.path.join(tmp, "out"),
        }
        cpath = os.path.join(tmp, "config.json")
        with open(cpath, "w") as f:
            json.dump(config, f)
        os.environ["PRWD_SNAPSHOT_DIR"] = os.path.join(tmp, "snaps")
        rows = prwd.run_experiment(cpath, jobs=2)
        assert len(rows) == 4
        assert {r["technique"] for r in rows} == {"fine_tune", "lr_rewind"}
        assert os.path.exists(os.path.join(tmp, "out", "raw.csv"))

    print("prwd smoke test passed")


if __name__ == "__main__":
    main()
