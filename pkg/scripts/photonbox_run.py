"""Photon-box feedback ensemble plus one emitted trajectory for plotting."""
import argparse
import json
from pathlib import Path

from qndfeedback.config import RunConfig
from qndfeedback.ensemble import run_ensemble

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--config", default=str(CONFIGS / "photonbox.json"))
parser.add_argument("--trajectories", type=int)
parser.add_argument("--steps", type=int)
parser.add_argument("--out", default="out/photonbox")
args = parser.parse_args()

raw = json.loads(Path(args.config).read_text())
cfg = RunConfig.from_dict(raw)
s = run_ensemble(cfg, trajectories=args.trajectories, steps=args.steps, out=args.out, raw=raw)
run_ensemble(cfg, trajectories=1, steps=args.steps, out=Path(args.out) / "single", emit=True)
print("time-averaged target population:", s["time_average"])
print("downward jumps:", s["downward_jumps"])
print("single trajectory CSV:", Path(args.out) / "single" / "trajectories" / "traj_000000.csv")
