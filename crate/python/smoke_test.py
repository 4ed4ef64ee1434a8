"""Smoke test for the `manner` extension module.

Build and install it first, e.g. `maturin develop -m crates/python/Cargo.toml`,
then run `python python/smoke_test.py`.
"""

import math
import os
import random
import tempfile

import manner


def tone(n, freq=440.0, amp=0.3, sr=16000):
    return [amp * math.sin(2 * math.pi * freq * i / sr) for i in range(n)]


def main():
    rng = random.Random(0)

    cfg = manner.ModelConfig(variant="small", channels=12, depth=2, chunk=16)
    model = manner.Model(cfg, seed=1)
    assert model.num_parameters > 0
    print("model", cfg, model.num_parameters, "parameters")

    clean = tone(4000)
    noisy = [c + 0.05 * (rng.random() - 0.5) for c in clean]
    enhanced = model.enhance(noisy)
    assert len(enhanced) == len(noisy)
    assert all(math.isfinite(v) for v in enhanced)
    assert enhanced == model.enhance(noisy), "inference is not deterministic"

    x = [[rng.uniform(-1, 1) for _ in range(100)] for _ in range(3)]
    chunks = manner.chunk(x, 16)
    assert len(chunks) == 3 and all(len(c) == 16 for c in chunks[0])
    back = manner.merge(chunks, 100)
    err = max(abs(a - b) for ra, rb in zip(x, back) for a, b in zip(ra, rb))
    assert err < 1e-6, err

    mag = manner.stft_magnitude(tone(2048, freq=1000.0))
    peak = max(range(len(mag[0])), key=lambda k: mag[0][k])
    assert peak == round(1000.0 * 512 / 16000), peak

    same = manner.loss(noisy, clean, clean)
    assert same["total"] < 1e-6, same
    report = manner.loss(noisy, clean, enhanced)
    assert 0.0 <= report["alpha"] <= 1.0 and report["total"] > 0.0
    print("loss", {k: v for k, v in report.items() if k != "resolutions"})

    snr = manner.si_snr(noisy, clean)
    assert 20.0 < snr < 40.0, snr
    assert manner.si_snr(clean, clean) == 60.0

    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "tone.wav")
        manner.write_wav(path, clean)
        samples, sr = manner.read_wav(path)
        assert sr == manner.SAMPLE_RATE and len(samples) == len(clean)
        assert max(abs(a - b) for a, b in zip(samples, clean)) < 1e-4
        try:
            manner.Model.load(path)
        except OSError as e:
            print("bad checkpoint rejected:", e)
        else:
            raise AssertionError("a WAV file loaded as a checkpoint")

    try:
        manner.ModelConfig(channels=15)
    except ValueError as e:
        print("bad config rejected:", e)
    else:
        raise AssertionError("channels=15 accepted")

    print("ok")


if __name__ == "__main__":
    main()
