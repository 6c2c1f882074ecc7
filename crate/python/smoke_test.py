"""Quick end-to-end check of the Python bindings.

Build and install first:
    pip install maturin
    pip install --no-build-isolation -e crates/py
"""

import math
import tempfile
from pathlib import Path

import repnerv


def main() -> None:
    video = repnerv.synth_video("bouncing_square", frames=4, height=16, width=16, seed=1)
    assert video.shape == (4, 3, 16, 16), video.shape
    assert len(video.frame(0)) == 3 * 16 * 16

    model = repnerv.Model(height=16, width=16, channels=[8, 8, 8], seed=0)
    log = model.train(video, budget="steps:20", seed=0)
    assert log and log[-1]["step"] == 20
    before = model.evaluate(video)

    fused = model.fuse()
    assert fused.deployed and fused.param_count() < model.param_count()
    after = fused.evaluate(video)
    assert abs(before["mean_psnr"] - after["mean_psnr"]) < 1e-3
    try:
        fused.fuse()
    except ValueError:
        pass
    else:
        raise AssertionError("fusing a deployed model should fail")

    with tempfile.TemporaryDirectory() as d:
        ckpt = Path(d) / "model.ckpt"
        model.save(ckpt)
        again = repnerv.Model.load(ckpt)
        assert again.decode_frame(1, 4) == model.decode_frame(1, 4)

        out = Path(d) / "model.rnvz"
        point = fused.compress(video, sparsity=0.1, bits=8, path=out)
        assert point["total_bits"] == 8 * out.stat().st_size
        assert math.isfinite(point["psnr"])

        video.write(Path(d) / "frames")
        assert repnerv.Video.read(Path(d) / "frames").shape == video.shape

    online, _ = repnerv.complexity(mode="online")
    deployed, _ = repnerv.complexity(mode="deployed")
    assert deployed < online
    print(f"ok: PSNR {before['mean_psnr']:.2f} dB, {point['bpp']:.2f} bpp, {repr(fused)}")


if __name__ == "__main__":
    main()
