# coding: utf-8
"""Exact parameter and FLOP accounting, and the command line tools.

Run with ``python3 demos/06_cost_model_and_cli.py`` from the repository root.
"""

# # Counting parameters
#
# `cost_report` counts every parameter of a configuration without building
# it. For one Zenith layer with T=4, D=k=r=512, T_hat=4 the closed form
# Dk + D^2 + 3 T_hat D r gives 3,670,016.

import json
import subprocess
import sys
import tempfile
from pathlib import Path

from zenith import (ModelConfig, build_model, cost_report, count_flops, default_schema,
                    generate_dataset, planted_ground_truth)
from zenith.model import enumerate_params
from zenith.tensor import FlopCounter

cfg = ModelConfig(variant="zenith", layers=1, T=4, D=512, k=512, t_hat=4, r=512, head_hidden=256)
rep = cost_report(cfg)
print("closed-form layer parameters:", rep.appendix_params)
print("itemised first layer:", rep.layer_params[0])

# # Counting agrees with the built model
#
# For a desk-size Zenith++ the per-layer report is compared with a walk
# over the model's actual tensors, and the FLOP count with an instrumented
# forward pass.

schema = default_schema()
small = ModelConfig(variant="zenith_pp", layers=2, T=8, D=8, k=8, r=8, heads=2, head_hidden=32)
model = build_model(small, schema)
rep = cost_report(small, schema)
per_layer, _ = enumerate_params(model)
print("layer 1 report:    ", rep.layer_params[0])
print("layer 1 enumerated:", per_layer[0])

batch = generate_dataset(schema, planted_ground_truth(schema), 1, seed=0, bayes_samples=0).all()
with FlopCounter() as fc:
    model.forward(batch)
print("matmul FLOPs per example, predicted:", count_flops(small, schema).matmul_flops, " measured:", fc.matmul_flops)

# # The command line
#
# The `zenith` command wraps the same functions. `count` needs only a
# config; `train` writes a checkpoint, a per-step log and an eval report
# next to a manifest listing every artifact with its SHA-256.

root = Path(__file__).resolve().parent.parent
cli = [sys.executable, "-m", "zenith.cli"]
inline = json.dumps({"model": {"variant": "zenith", "layers": 1, "T": 4, "D": 512, "k": 512,
                               "t_hat": 4, "r": 512}})
out = subprocess.run(cli + ["count", "--inline", inline], capture_output=True, text=True, check=True)
print("zenith count ->", json.loads(out.stdout)["appendix_params"])

with tempfile.TemporaryDirectory() as tmp:
    subprocess.run(cli + ["train", "--config", str(root / "configs" / "desk_zenith.json"), "--out", tmp,
                          "--steps", "100"], check=True)
    manifest = json.loads((Path(tmp) / "manifest.json").read_text())
    print("train artifacts:", sorted(manifest["artifacts"]))
    print("eval:", (Path(tmp) / "eval.json").read_text())
