"""Open-loop ensemble: convergence fractions against the initial populations."""
import argparse
import json
from pathlib import Path

from qndfeedback.config import RunConfig
from qndfeedback.ensemble import run_ensemble

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--config", default=str(CONFIGS / "toy_open.json"))
parser.add_argument("--trajectories", type=int)
parser.add_argument("--out")
args = parser.parse_args()

raw = json.loads(Path(args.config).read_text())
summary = run_ensemble(RunConfig.from_dict(raw), trajectories=args.trajectories, out=args.out, raw=raw)
initial = raw.get("initial_state", {}).get("diagonal")
print("initial populations:", initial)
print("convergence fractions:", summary["histogram"])
print(f"{summary['_timing']['simulate_seconds']:.1f}s")
