"""Smoke test for the liir_py extension module."""

import math
import os
import tempfile

import liir_py


def main():
    cfg = liir_py.Config()
    cfg.set("warmup_epochs", "1")
    cfg.set("inter_epochs", "0")
    cfg.set("steps_per_epoch", "2")
    cfg.set("frame_size", "32")
    cfg.set("clip_length", "6")
    cfg.set("train_clips", "4")
    assert cfg.get("warmup_epochs") == "1"

    assert liir_py.reference_schedule(20) == [0, 5, 15, 17, 19]

    # two identical 2x2 maps of constant features: uniform affinity
    feats = [0.3, 0.7] * 4
    a = liir_py.affinity(feats, feats, 2, 2, 2)
    assert all(abs(v - 0.25) < 1e-12 for v in a)
    n = liir_py.affinity_with_negatives([1.0, 0.0], [0.0, 0.0], [[0.0, 0.0]], 1, 1, 2)
    assert n == [0.5]

    row = [0.0] * 64
    row[27] = 1.0
    c = liir_py.compact_row(row, 8, 8)
    assert abs(sum(c) - 1.0) < 1e-9 and max(c) == c[27]

    sq = [1 if x < 4 and y < 4 else 0 for y in range(8) for x in range(8)]
    assert liir_py.region_similarity(sq, sq, 8, 8) == 1.0

    frames, masks = liir_py.synthetic_clip("single_sprite", 32, 32, 4, 7)
    assert len(frames) == 4 and len(frames[0]) == 32 * 32 * 3 and len(masks[0]) == 32 * 32

    model = liir_py.Model.initial(cfg)
    feats, h, w, ch = model.encode(frames[0], 32, 32)
    assert (h, w) == (8, 8) and len(feats) == h * w * ch
    assert all(math.isfinite(v) for v in feats)

    model, log = liir_py.Model.train(cfg)
    assert log and all(math.isfinite(e[2]) for e in log)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "model.liir")
        model.save(path)
        again = liir_py.Model.load(path)
        assert again.parameter_count == model.parameter_count
        assert again.encode(frames[0], 32, 32)[0] == model.encode(frames[0], 32, 32)[0]

    cfg.set("eval_clips", "1")
    report = model.evaluate(cfg)
    assert 0.0 <= report["accuracy"] <= 1.0 and 0.0 <= report["mean_j"] <= 1.0
    print("smoke test ok:", {k: round(v, 4) for k, v in report.items() if k != "j"})


if __name__ == "__main__":
    main()
