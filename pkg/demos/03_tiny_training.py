"""Train the toy model end to end at 8x8 for a few hundred steps, then
score it against the untrained init and write a handful of samples.

Run from the repo root:  python3 demos/03_tiny_training.py [steps_per_stage]
Artifacts land in demos/out/.
"""

import os
import sys
import time

import numpy as np

from tryondit.data import make_eval_set
from tryondit.model import ModelConfig, ToyDiT
from tryondit.sampler import sample
from tryondit.svgplot import line_plot
from tryondit.tensorio import write_ppm
from tryondit.trainer import (StageConfig, TrainConfig, evaluate,
                              load_checkpoint, train)

OUT = os.path.join(os.path.dirname(__file__), "out")


def main():
    per_stage = int(sys.argv[1]) if len(sys.argv) > 1 else 150
    cfg = TrainConfig(
        model=ModelConfig(image_size=8, dim=32, heads=2, depth=4, window_size=2),
        stages=(StageConfig(per_stage, ("model_free_tryon", "tryoff"), lr=2e-3),
                StageConfig(per_stage, ("model_based_tryon", "model_free_tryon",
                                        "tryoff"), lr=2e-3)),
        seed=0, data_size=128,
    )

    losses = []
    t0 = time.time()
    res = train(cfg, os.path.join(OUT, "tiny_run"), quiet=False,
                on_step=lambda s, b: losses.append((s, b.total)))
    print(f"\ntrained {res.steps_done} steps in {time.time() - t0:.1f}s")
    line_plot(os.path.join(OUT, "loss.svg"), {"total": losses},
              title="training loss", xlabel="step", ylabel="loss", logy=True)

    model, _, _, _ = load_checkpoint(res.checkpoint)
    init = ToyDiT.init(cfg.model, seed=0)
    items = make_eval_set(999, 9, image_size=8)
    print("\nheld-out scores (30 steps, guidance 4)")
    for tag, m in (("trained", model), ("init", init)):
        rep = evaluate(m, items, steps=30, guidance=4.0, seed=0)
        for task, agg in sorted(rep["per_task"].items()):
            extra = (f"  masked_mse {agg['masked_mse']:.4f}"
                     if "masked_mse" in agg else "")
            print(f"  {tag:7s} {task:18s} full_mse {agg['full_mse']:.4f}{extra}")

    # one sample per task next to its ground truth
    for item in items[:3]:
        img = sample(model, item.conditions, item.text_ids, steps=30,
                     guidance=4.0, seed=1)
        write_ppm(os.path.join(OUT, f"{item.task}_sample.ppm"), img)
        write_ppm(os.path.join(OUT, f"{item.task}_truth.ppm"), item.target)
    print(f"\nwrote samples and loss curve to {OUT}/")


if __name__ == "__main__":
    main()
