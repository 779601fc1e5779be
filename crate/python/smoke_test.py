"""Smoke test of the pst extension module."""

import math
import tempfile
from pathlib import Path

import pst


def main():
    lights = pst.sample_lights(10, min_z=0.3, seed=1)
    assert len(lights) == 10
    assert all(abs(math.sqrt(sum(v * v for v in l)) - 1.0) < 1e-5 for l in lights)

    sample = pst.render(lights, kind="sphere", size=16, seed=2)
    print(sample)
    assert len(sample) == 10 and sample.height == 16

    normals, albedo, condition = pst.woodham(sample)
    lit = [
        m and all(sum(a * b for a, b in zip(l, n)) > 0 for l in lights)
        for m, n in zip(sample.mask, sample.normals)
    ]
    mae = pst.mean_angular_error(normals, sample.normals, lit)
    print(f"woodham condition={condition:.2f} lit_mae_deg={mae:.2e}")
    assert mae < 0.5

    model = pst.Model(channels=1, d=16, heads=2, blocks=1, feat=4, seed=3)
    pred = model.predict(sample, lights=[0, 2, 4])
    assert len(pred) == 16 * 16
    p1, _ = model.pooled_features(sample)
    q1, _ = model.pooled_features(sample.select_lights(list(reversed(range(10)))))
    assert max(abs(a - b) for a, b in zip(p1, q1)) < 1e-5

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        count = pst.generate_dataset(str(tmp / "data"), count=3, size=16, seed=4)
        samples = pst.load_dataset(str(tmp / "data"))
        assert count == len(samples) == 3
        per_trial, mean, sets = model.evaluate(samples, m=5, trials=3, seed=1)
        assert len(per_trial) == 3 and len(sets) == 3
        print(f"untrained mean_mae_deg={mean:.2f}")
        model.save(str(tmp / "m.ckpt"))
        again = pst.Model.load(str(tmp / "m.ckpt"))
        assert again.predict(sample) == model.predict(sample)
        sample.write(str(tmp / "s.pss"))
        assert pst.PhotoSample.read(str(tmp / "s.pss")).images == sample.images
        try:
            pst.PhotoSample.read(str(tmp / "missing.pss"))
            raise AssertionError("missing file accepted")
        except OSError as e:
            assert "missing.pss" in str(e)

    print("smoke test passed")


if __name__ == "__main__":
    main()
