#!/usr/bin/env python3
"""Smoke test for the ntta_py extension module.

Builds nothing itself: compile the extension first with

    cargo build --release -p ntta-py

then run

    python3 python/smoke_test.py
"""

import math
import shutil
import sys
import tempfile
from pathlib import Path

REPO = Path(__file__).resolve().parent.parent


def load_module():
    candidates = []
    for profile in ("release", "debug"):
        d = REPO / "target" / profile
        candidates += sorted(d.glob("libntta_py.so"))
        candidates += sorted(d.glob("ntta_py.dll"))
        candidates += sorted(d.glob("libntta_py.dylib"))
    if not candidates:
        sys.exit("extension not found; run `cargo build --release -p ntta-py` first")
    src = candidates[0]
    tmp = Path(tempfile.mkdtemp(prefix="ntta-py-"))
    dst = tmp / "ntta_py.so"
    shutil.copyfile(src, dst)
    sys.path.insert(0, str(tmp))
    import ntta_py

    return ntta_py


def approx(a, b, tol=1e-12):
    return abs(a - b) <= tol * max(1.0, abs(a), abs(b))


def main():
    ntta = load_module()
    print(f"loaded ntta_py {ntta.__version__}")

    # schedule identities
    sched = ntta.Schedule(100)
    assert sched.total_steps == 100
    assert approx(sched.alpha(1), 1.0 - sched.beta(1))
    prev = 1.0
    for t in range(1, 101):
        ab = sched.alpha_bar(t)
        assert ab < prev
        assert approx(ab / prev, sched.alpha(t))
        prev = ab
    print("schedule identities ok")

    # diffusion helpers
    two = ntta.Schedule(2, 0.1, 0.2)
    xt = ntta.forward_diffuse([1.0, 0.0], 2, [0.0, 1.0], two)
    assert approx(xt[0], math.sqrt(two.alpha_bar(2)))
    assert approx(xt[1], math.sqrt(1.0 - two.alpha_bar(2)))
    assert ntta.cfg_combine([0.0, 0.0], [1.0, 2.0], 7.5) == [7.5, 15.0]
    rec = ntta.tweedie_x0(xt, 2, [0.0, 1.0], two)
    assert approx(rec[0], 1.0) and approx(rec[1], 0.0, 1e-9)
    print("diffusion helpers ok")

    # rewards
    target = ntta.Reward.target_mode([1.0, 1.0])
    assert target.evaluate([1.0, 1.0]) == 0.0
    assert target.gradient([2.0, 1.0]) == [-2.0, 0.0]
    codelen = ntta.Reward.quantized_code_length(1.0)
    assert not codelen.differentiable
    assert codelen.evaluate([0.9, 2.2, -1.0]) == -3.0
    combo = ntta.Reward.weighted_combo(0.5, target, ntta.Reward.linear_score([1.0, 0.0]))
    assert approx(combo.evaluate([0.0, 0.0]), 0.5 * (-2.0) + 0.5 * 0.0)
    print("rewards ok")

    # a tiny model end to end: train, checkpoint round trip, alignment
    model = ntta.Model.train_ring(
        modes=4, radius=1.2, std=0.15, samples_per_class=100,
        total_steps=30, hidden_width=32, embed_dim=4, steps=1200, batch_size=64, seed=1,
    )
    print(f"trained tiny model: {model!r}")
    assert model.final_loss < 1.5, model.final_loss

    with tempfile.TemporaryDirectory() as d:
        path = str(Path(d) / "tiny.ckpt")
        model.save(path)
        back = ntta.Model.load(path)
        assert back.null_embedding() == model.null_embedding()
        assert back.total_steps == model.total_steps
    print("checkpoint round trip ok")

    # reduction identity: lambda1 = 0, one particle, shared seed
    reward = ntta.Reward.target_mode([1.2, 0.0])
    cfg = ntta.AlignConfig(lambda1=0.0, particles=1)
    x_aligned, summary = model.align_sample(0, reward, cfg, seed=5)
    x_plain = model.sample(0, guidance_scale=2.0, seed=5)
    assert x_aligned == x_plain, (x_aligned, x_plain)
    assert summary["final_phi_drift"] == 0.0
    print("reduction identity ok")

    # alignment improves the mean target reward over plain sampling
    gains = []
    for seed in range(6):
        xa, _ = model.align_sample(1, ntta.Reward.target_mode([0.0, 1.2]), seed=seed)
        xp = model.sample(1, guidance_scale=2.0, seed=seed)
        gains.append(reward_gain(ntta, xa, xp))
    assert sum(gains) / len(gains) > 0.0, gains
    print("alignment improves target reward ok")

    print("SMOKE TEST PASS")


def reward_gain(ntta, x_aligned, x_plain):
    r = ntta.Reward.target_mode([0.0, 1.2])
    return r.evaluate(x_aligned) - r.evaluate(x_plain)


if __name__ == "__main__":
    main()
