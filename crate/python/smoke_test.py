"""Smoke test for the simnet extension module.

Build and install first:

    pip install maturin
    maturin develop -m crates/python/Cargo.toml
"""

import math
import tempfile
from pathlib import Path

import simnet


def checkerboard(width, height):
    data = bytearray()
    for y in range(height):
        for x in range(width):
            on = (x // 4 + y // 4) % 2 == 0
            data += bytes([200, 80, 40] if on else [30, 160, 90])
    return bytes(data)


def main():
    w, h = 24, 20
    rgb = checkerboard(w, h)
    mask = [(x - 12) ** 2 + (y - 10) ** 2 <= 64 for y in range(h) for x in range(w)]

    cloud = simnet.image_to_cloud(rgb, w, h, mask=mask, points=64, dims=6)
    assert len(cloud) == 64 and cloud.dims == 6 and cloud.normalized
    pts = cloud.to_list()
    assert all(-1.0 - 1e-6 <= v <= 1.0 + 1e-6 for p in pts for v in p[:3])
    assert simnet.PointCloud.from_bytes(cloud.to_bytes()) == cloud
    assert all(p[2] == 0.0 for p in cloud.zero_z().to_list())
    assert len(cloud.ablate(0.4, seed=1)) == round(0.4 * 64)

    with tempfile.TemporaryDirectory() as tmp:
        path = Path(tmp) / "c.simpc"
        cloud.save(path)
        assert simnet.PointCloud.load(path) == cloud

    grid = [(float(x), float(y)) for y in range(10) for x in range(10)]
    picks = simnet.fps(grid, 8)
    assert len(set(picks)) == 8

    masked = bytes(b if mask[i // 3] else 0 for i, b in enumerate(rgb))
    ccm = simnet.encode_ccm(masked, w, h)
    assert len(ccm) == w * h * 3
    assert len(simnet.decode_ccm(ccm, w, h)) == sum(mask)

    assert simnet.step_lr(20) == simnet.step_lr(20, 0.001)
    assert math.isclose(simnet.step_lr(20), 0.0007)
    assert simnet.f1_score(0, 0, 3) == 0.0
    assert simnet.fps_check(20, 1) == (20, 20)

    worst = max(err for _, err in simnet.gradcheck())
    assert worst < 1e-5, worst

    tiny = "\n".join([
        "epochs = 2", "batch_size = 8", "image_size = 32", "ccm_size = 16",
        "point_widths = [8, 16, 32]", "tnet_widths = [8, 16]", "tnet_fc = [8]",
        "image_widths = [4, 8]", "image_features = 32", "ccm_widths = [4]",
        "ccm_features = 8", "head_widths = [16, 8]", "attention_dim = 16",
    ])
    cfg = simnet.TrainConfig(tiny)
    assert cfg.epochs == 2 and len(cfg.hash()) == 64
    assert simnet.TrainConfig(cfg.to_toml()).hash() == cfg.hash()

    with tempfile.TemporaryDirectory() as tmp:
        manifest = simnet.synth("shape", Path(tmp) / "data", seed=3, size=32,
                                train_per_class=12, val_per_class=6, points=48)
        ckpt = Path(tmp) / "model.simng"
        report = simnet.train(cfg, manifest, ckpt)
        assert len(report["epochs"]) == 2
        acc, f1 = simnet.evaluate(cfg, ckpt, manifest)
        assert acc == report["best_acc"]

    try:
        simnet.TrainConfig("batch_size = 7")
    except ValueError:
        pass
    else:
        raise AssertionError("batch size 7 accepted")

    print("simnet smoke test passed")


if __name__ == "__main__":
    main()
