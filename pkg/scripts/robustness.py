"""Hidden pure initial state, maximally mixed estimate; with and without detector errors."""
import argparse
import json
from pathlib import Path

from qndfeedback.config import RunConfig
from qndfeedback.ensemble import run_ensemble

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--config", default=str(CONFIGS / "toy_robustness.json"))
parser.add_argument("--trajectories", type=int)
parser.add_argument("--steps", type=int)
args = parser.parse_args()

raw = json.loads(Path(args.config).read_text())
for name, detection in (("perfect detection", None), ("detector errors", raw.get("detection"))):
    cfg = RunConfig.from_dict({**raw, "detection": detection})
    s = run_ensemble(cfg, trajectories=args.trajectories, steps=args.steps)
    print(f"{name}: reach {s['reach']}, aborted {s['aborted']}")
