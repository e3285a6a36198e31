"""Steady-state target fidelity of the photon-box loop as the decay rate per step varies."""
import argparse
import json
from pathlib import Path

import numpy as np

from qndfeedback.config import RunConfig
from qndfeedback.ensemble import prepare
from qndfeedback.engine import run_block

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--thetas", type=float, nargs="+", default=[0.0, 0.0014, 0.005, 0.014])
parser.add_argument("--trajectories", type=int, default=100)
parser.add_argument("--steps", type=int, default=4000)
args = parser.parse_args()

base = json.loads((CONFIGS / "photonbox.json").read_text())
print("theta    reach>=0.8  avg_est  avg_true")
for theta in args.thetas:
    raw = {**base, "photonbox": {**base["photonbox"], "theta": theta},
           "convergence": {"hit_threshold": 0.8, "average_from": args.steps // 2}}
    prep = prepare(RunConfig.from_dict(raw), steps=args.steps)
    res = run_block(prep.scenario, base["ensemble"]["seed"], np.arange(args.trajectories))
    print(f"{theta:<8g} {np.mean(res.first_hit_est >= 0):10.3f} {res.average_target_est.mean():8.4f} "
          f"{res.average_target.mean():9.4f}")
