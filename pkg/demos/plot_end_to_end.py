"""
The whole pipeline on a small budget
====================================

Phantoms, degraded proximity maps, traced centrelines, a trained model,
per-slice contours, metrics and overlays, all from one config.  The
default config is larger; this one runs in well under a minute.
"""

import json

from polarring.pipeline import PipelineConfig, run_e2e

cfg = PipelineConfig.from_json({
    "seed": 1,
    "n_phantoms": 6,
    "n_test": 2,
    "model": {"mode": "single", "epochs": 10},
})
summary = run_e2e(cfg, "e2e_demo", progress=lambda e: print("epoch", e["epoch"], "loss", round(e["loss"], 4)))
print(json.dumps(summary, indent=1))
