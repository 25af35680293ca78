"""Smoke test for the genmove_py extension.

Build first:  pip install --no-build-isolation -e crates/py
"""
import math
import tempfile

import genmove_py as gm

TINY = [
    "embed_dim=8", "embed_epochs=5", "steps=10", "beta_end=0.7",
    "d_model=16", "layers=1", "heads=2", "conv_channels=8", "context_dim=8",
    "history_hidden=8", "ff_mult=1", "history_days=2", "epochs=1", "batch_size=8",
    "flow_layers=2", "flow_hidden=8", "flow_epochs=2", "flow_batch=16",
    "samples=4", "eval_chunk=4",
]


def main():
    sched = gm.NoiseSchedule(50, 1e-4, 0.02)
    assert sched.steps == 50
    abar = sched.alpha_bars
    assert all(a > b for a, b in zip(abar, abar[1:]))

    mask = gm.sample_mask("terminal", 48, seed=3)
    assert len(mask) == 48 and not mask[-1] and all(mask[:-1])

    assert math.isclose(gm.jsd([1, 0], [0.5, 0.5]), 0.3112781, rel_tol=1e-5)

    ds = gm.Dataset.synthesize(20, 5, 3, 0)
    assert ds.n_users == 20 and len(ds) >= 20
    assert len(ds.coordinates()) == ds.n_locations == 25

    cfg = gm.Config(overrides=TINY)
    again = gm.Config.from_toml(cfg.to_toml())
    assert again.hash() == cfg.hash()
    assert cfg.with_overrides(["seed=9"]).seed == 9

    with tempfile.TemporaryDirectory() as tmp:
        losses = gm.train(cfg, ds, tmp)
        assert len(losses["train_loss"]) == 1
        rec = gm.run_task("recover", cfg, tmp, ds)
        assert 0.0 <= rec["recall"] <= 1.0
        base = gm.run_baseline("linear-interp", "recover", cfg, ds)
        assert "recall" in base
    print("smoke test ok")


if __name__ == "__main__":
    main()
