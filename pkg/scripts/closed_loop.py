"""Closed-loop ensemble with delayed grid feedback: reach rate and supermartingale check."""
import argparse
import json
from pathlib import Path

from qndfeedback.config import RunConfig
from qndfeedback.ensemble import run_ensemble

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--config", default=str(CONFIGS / "toy_closed.json"))
parser.add_argument("--trajectories", type=int)
parser.add_argument("--steps", type=int)
parser.add_argument("--out")
args = parser.parse_args()

raw = json.loads(Path(args.config).read_text())
s = run_ensemble(RunConfig.from_dict(raw), trajectories=args.trajectories, steps=args.steps, out=args.out, raw=raw)
print("epsilon:", s["synthesis"]["epsilon"], "sigma:", s["synthesis"]["sigma"])
print("reach at final step:", s["reach"]["true"], "ever:", s["reach"]["true_any_time"])
print("first hit:", s["first_hit"])
print("supermartingale:", s["supermartingale"])
