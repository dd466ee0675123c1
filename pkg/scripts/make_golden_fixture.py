#!/usr/bin/env python3
"""Generate the frozen golden checkpoint fixture used by the model tests.

Builds a small depth-4 network, nudges its batch-norm statistics with one
train-mode pass, checkpoints it, and stores one input with the matching
eval-mode output.  The test suite replays the forward pass from the loaded
checkpoint and demands bitwise identity, so regenerate these files only when
the checkpoint format or forward semantics intentionally change:

    python3 scripts/make_golden_fixture.py
"""

from pathlib import Path

import numpy as np

from stormseg.losses import LossSpec
from stormseg.model import Model, ModelConfig, load_checkpoint, save_checkpoint
from stormseg.tensor import Rng

FIXTURES = Path(__file__).resolve().parent.parent / "tests" / "fixtures"


def main():
    FIXTURES.mkdir(parents=True, exist_ok=True)
    config = ModelConfig(
        depth=4,
        base_channels=2,
        in_channels=3,
        dropout_rate=0.1,
        loss=LossSpec(kind="tversky"),
        input_height=48,
        input_width=48,
    )
    model = Model(config, Rng(2024))
    warm = Rng(7).uniform((2, 3, 48, 48), -1.0, 1.0)
    model.forward(warm, mode="train")  # move running stats off their init values

    x = Rng(8).uniform((1, 3, 48, 48), -1.0, 1.0)
    y = model.forward(x, mode="eval").values

    ckpt = model.checkpoint(
        norm_stats={"min": [0.0, -1.0, -2.0], "max": [1.0, 2.0, 3.0]},
        optimizer={"kind": "rmsprop", "learning_rate": 1e-5, "rho": 0.9, "eps": 1e-7},
        history_summary={"epochs": 1, "best_val_loss": 0.5, "best_epoch": 0},
    )
    save_checkpoint(ckpt, FIXTURES / "golden_depth4.ckpt")
    np.save(FIXTURES / "golden_input.npy", x)
    np.save(FIXTURES / "golden_output.npy", y)

    reread = Model.from_checkpoint(load_checkpoint(FIXTURES / "golden_depth4.ckpt"))
    replay = reread.forward(x, mode="eval").values
    assert np.array_equal(replay, y), "self-check failed: reload is not bitwise identical"
    size = (FIXTURES / "golden_depth4.ckpt").stat().st_size
    print(f"wrote fixtures to {FIXTURES} (checkpoint {size} bytes)")


if __name__ == "__main__":
    main()
