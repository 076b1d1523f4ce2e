"""Exercises the Python bindings end to end.

Build and run from the repository root:

    cargo build --release -p centermask-py
    cp target/release/libcentermask_py.so python/centermask_py.so
    python3 python/smoke_test.py
"""

import os
import sys
import tempfile

import numpy as np

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))
import centermask_py as cm  # noqa: E402

TINY = """
model.preset = lite
backbone.stem = 4,4,8
backbone.conv_channels = 4,4,4,4
backbone.out_channels = 8,12,16,20
backbone.fpn_channels = 8
head.tower_depth = 1
head.tower_channels = 8
head.score_threshold = 0.001
mask.conv_count = 1
mask.channels = 8
mask.iou_convs = 1
mask.iou_fc = 8
train.iterations = 4
train.batch = 2
train.image_size = 32
train.max_instances = 3
eval.count = 4
eval.image_size = 32
"""


def main():
    scene = cm.generate_sample(3, 64, 4)
    h, w = scene["height"], scene["width"]
    rgb = np.frombuffer(scene["rgb"], dtype=np.uint8).reshape(h, w, 3)
    assert rgb.shape == (64, 64, 3)
    for inst in scene["instances"]:
        mask = np.frombuffer(inst["mask"], dtype=np.uint8).reshape(h, w)
        ys, xs = np.nonzero(mask)
        assert [xs.min(), ys.min(), xs.max() + 1, ys.max() + 1] == inst["bbox"]
        counts = cm.rle_encode(inst["mask"], h, w)
        assert sum(counts) == h * w
        assert cm.rle_decode(counts, h, w) == inst["mask"]

    assert cm.assign_level_canonical(224, 224) == 4
    assert cm.assign_level_adaptive(224, 224, 1024 * 1024) == 3
    keep = cm.nms([[0, 0, 10, 10], [1, 1, 10, 10], [20, 20, 30, 30]], [0.5, 0.9, 0.4], [0, 0, 0], 0.5)
    assert keep == [1, 2], keep
    assert "train.iterations" in cm.config_reference(True)

    model = cm.Model(TINY, seed=1)
    assert model.param_count > 0 and model.classes == ["circle", "rectangle", "triangle"]
    losses = model.train(4)
    assert [r["iteration"] for r in losses] == [0, 1, 2, 3]
    assert all(np.isfinite(r["total"]) for r in losses)

    found = model.infer(rgb[:50, :40].tobytes(), 50, 40)
    assert len(found) <= 50
    for r in found:
        mask = np.frombuffer(r["mask"], dtype=np.uint8).reshape(50, 40)
        x1, y1, x2, y2 = r["bbox"]
        assert 0 <= r["score"] <= 1 and x2 <= 40 and y2 <= 50
        ys, xs = np.nonzero(mask)
        assert np.all((xs + 0.5 >= x1) & (xs + 0.5 < x2) & (ys + 0.5 >= y1) & (ys + 0.5 < y2))

    report = model.evaluate()
    assert 0.0 <= report["box_ap"] <= 1.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "w.cmkw")
        model.save_weights(path)
        other = cm.Model(TINY, seed=2)
        other.load_weights(path)
        assert other.infer(rgb.tobytes(), 64, 64) == model.infer(rgb.tobytes(), 64, 64)
        try:
            other.load_weights(os.path.join(d, "missing.cmkw"))
        except RuntimeError:
            pass
        else:
            raise AssertionError("missing file accepted")

    stages = model.bench(64, 5, 1)
    assert set(stages) == {"backbone", "fpn", "heads", "mask"}

    try:
        cm.Model("train.batch = four")
    except ValueError:
        pass
    else:
        raise AssertionError("bad config accepted")
    print(f"ok: {model.param_count} parameters, {len(found)} instances, box AP {report['box_ap']:.3f}")


if __name__ == "__main__":
    main()
