"""How often the quadratic photon-box feedback lands more than one grid spacing from the exact grid optimum."""
import argparse
import json
from pathlib import Path

import numpy as np

from qndfeedback.config import RunConfig
from qndfeedback.engine import run_block
from qndfeedback.ensemble import prepare
from qndfeedback.photonbox import PhotonBoxController

CONFIGS = Path(__file__).resolve().parent.parent / "configs"

parser = argparse.ArgumentParser(description=__doc__)
parser.add_argument("--trajectories", type=int, default=4)
parser.add_argument("--steps", type=int, default=4000)
args = parser.parse_args()

raw = json.loads((CONFIGS / "photonbox.json").read_text())
prep = prepare(RunConfig.from_dict(raw), steps=args.steps)
sc = prep.scenario
res = run_block(sc, raw["ensemble"]["seed"], np.arange(args.trajectories), keep_states=True)
d, tau = sc.family.dim, sc.tau
rho = res.states["rho"].reshape(-1, d, d)
pending = res.states["pending"].reshape(-1, tau)
sigma = prep.synthesis.spec.sigma
grid = PhotonBoxController(sc.box, sigma, "grid")
quad = PhotonBoxController(sc.box, sigma, "quadratic")
gap = np.abs(grid(rho, pending) - quad(rho, pending))
spacing = grid.grid[1] - grid.grid[0]
print(f"states {len(gap)}, beyond one spacing {np.mean(gap > spacing + 1e-12):.4f}, max gap {gap.max():.4f}")
