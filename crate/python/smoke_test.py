"""Smoke test for the compiled `sweepvox` module.

Build it with `maturin develop -m crates/python/Cargo.toml`, or copy
target/release/libsweepvox_py.so next to this file as sweepvox.so, then run
`python python/smoke_test.py`.
"""

import math
import tempfile
from pathlib import Path

import sweepvox


def main():
    cfg = sweepvox.Config("temperature = 5e-4\n")
    assert cfg.temperature == 5e-4 and cfg.top_k == 3
    assert len(cfg.planes) == 12
    try:
        sweepvox.Config("no_such_key = 1\n")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown key accepted")

    scene = sweepvox.Scene.generate(0, boxes=2, views=3)
    assert len(scene) == 3
    assert scene.image(0).shape == (240, 320, 3)
    assert scene.true_depth(1).shape == (60, 80, 1)

    res = sweepvox.run(scene, cfg)
    rows, cols, planes = res.probability(1).shape
    probs = res.probability(1).tolist()
    for px in range(rows * cols):
        assert abs(sum(probs[px * planes:(px + 1) * planes]) - 1.0) < 1e-6
    rmse = {v: r for v, r, _ in res.depth_metrics()}
    assert rmse[1] < 0.436, rmse
    assert len(res.surface_scores()) == math.prod(res.grid_dims)
    assert all(0.0 <= s <= 1.0 for s in res.surface_scores())

    one = sweepvox.Raster(1, 1, 3, [0.1, 0.6, 0.3])
    [[(d0, s0), (d1, s1)]] = sweepvox.sample_topk(one, 1.0, 3.0, 2)
    assert (d0, d1) == (2.0, 3.0)
    assert abs(s0 - 2 / 3) < 1e-12 and abs(s1 - 1 / 3) < 1e-12

    ident = [1, 0, 0, 0, 1, 0, 0, 0, 1]
    u, v = sweepvox.warp((40.0, 30.0), 2.0, (100.0, 100.0, 40.0, 30.0), ident, [-0.2, 0.0, 0.0])
    assert abs(u - 30.0) < 1e-9 and abs(v - 30.0) < 1e-9

    box = (0.0, 0.0, 0.0, 1.0, 1.0, 1.0)
    assert sweepvox.iou(box, box) == 1.0
    assert abs(sweepvox.iou(box, (0.5, 0.0, 0.0, 1.0, 1.0, 1.0)) - 1 / 3) < 1e-12

    with tempfile.TemporaryDirectory() as tmp:
        sweepvox.write_scene(Path(tmp) / "scene", 3, boxes=2, views=3)
        a = sweepvox.run_dir(Path(tmp) / "scene", Path(tmp) / "out", cfg)
        b = sweepvox.run(sweepvox.Scene.load(Path(tmp) / "scene"), cfg)
        assert a.boxes() == b.boxes()
        assert (Path(tmp) / "out" / "volume.mvsv").exists()
    print("sweepvox smoke test ok")


if __name__ == "__main__":
    main()
