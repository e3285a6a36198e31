import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qndfeedback.config import RunConfig
from qndfeedback.ensemble import blocks, execute, prepare, run_ensemble, summarize
from qndfeedback.engine import Scenario, identity_residuals, run_block
from qndfeedback.kraus import ConfigurationError, diagonal_state, toy_rotation_family

CLOSED = {
    "experiment": "closed",
    "family": {"builtin": "toy-rotation", "dim": 3},
    "target": 0,
    "controller": {"u_bar": 0.05, "tau": 1},
    "ensemble": {"trajectories": 12, "steps": 40, "seed": 3, "block_size": 5, "record_every": 10},
}


def test_blocks_partition():
    parts = blocks(12, 5)
    assert [len(p) for p in parts] == [5, 5, 2]
    assert np.concatenate(parts).tolist() == list(range(12))
    assert blocks(0, 5) == []


def test_results_do_not_depend_on_batching():
    cfg = RunConfig.from_dict(CLOSED)
    sc = prepare(cfg).scenario
    whole = run_block(sc, 3, np.arange(12), emit=True)
    parts = [run_block(sc, 3, idx, emit=True) for idx in ([0, 1, 2], [3, 4, 5, 6, 7, 8, 9, 10, 11])]
    for name in ("final_target", "first_hit", "series", "label"):
        np.testing.assert_array_equal(getattr(whole, name), np.concatenate([getattr(p, name) for p in parts]))
    recs = parts[0].records + parts[1].records
    assert [r.controls for r in whole.records] == [r.controls for r in recs]


def test_parallel_matches_serial():
    cfg = RunConfig.from_dict(CLOSED)
    prep = prepare(cfg)
    serial = summarize(prep, execute(prep, 3, 12, 5), 3, 12)
    parallel = summarize(prep, execute(prep, 3, 12, 5, workers=2, raw=CLOSED), 3, 12)
    assert json.dumps(serial, sort_keys=True) == json.dumps(parallel, sort_keys=True)


def test_same_seed_identical_files(tmp_path):
    cfg = RunConfig.from_dict(CLOSED)
    for name in ("a", "b"):
        run_ensemble(cfg, out=tmp_path / name, emit=True)
    for rel in ["summary.json"] + [f"trajectories/traj_{i:06d}.csv" for i in range(12)]:
        assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
    other = run_ensemble(cfg, seed=4)
    assert other["series"] != json.loads((tmp_path / "a" / "summary.json").read_text())["series"]


def test_zero_trajectories(tmp_path):
    cfg = RunConfig.from_dict({**CLOSED, "ensemble": {"trajectories": 0}})
    s = run_ensemble(cfg, out=tmp_path)
    assert s["histogram"] == {} and s["trajectories"] == 0
    assert json.loads((tmp_path / "summary.json").read_text())["trajectories"] == 0


def test_histogram_sums_to_one():
    cfg = RunConfig.from_dict(
        {"family": {"builtin": "toy-rotation", "dim": 3}, "initial_state": {"diagonal": [0.5, 0.3, 0.2]},
         "ensemble": {"trajectories": 40, "steps": 30}}
    )
    s = run_ensemble(cfg)
    assert sum(s["histogram"].values()) == pytest.approx(1.0)
    assert s["histogram"]["unconverged"] > 0


def test_identity_residuals_small():
    cfg = RunConfig.from_dict({**CLOSED, "controller": {"u_bar": 0.05, "tau": 2, "epsilon": "ceiling"}})
    sc = prepare(cfg).scenario
    res = run_block(sc, 1, np.arange(4), keep_states=True)
    out = identity_residuals(sc, res.states)
    assert np.max(np.abs(out["residual"])) <= 1e-9
    assert out["q1"].min() >= -1e-12 and out["q2"].min() >= -1e-12


def test_robustness_with_detector_runs():
    raw = {**CLOSED, "experiment": "robustness", "initial_state": {"basis": 2}, "detection": {"builder": "photon-box"}}
    s = run_ensemble(RunConfig.from_dict(raw))
    assert s["detection"]["labels"] == ["none", "g", "e"]
    assert "both" in s["reach"] and s["aborted"] == 0


def test_photonbox_short_run():
    raw = {"experiment": "photonbox", "family": {"builtin": "photon-box"},
           "ensemble": {"trajectories": 6, "steps": 30, "block_size": 4, "record_every": 5}}
    s = run_ensemble(RunConfig.from_dict(raw))
    assert s["photonbox"]["target"] == 3
    assert len(s["series"]["estimate"]["mean"]) == 7
    assert s["time_average"]["estimate"] > 0


def test_scenario_validation(toy2):
    with pytest.raises(ConfigurationError):
        Scenario("closed", 10, 0, diagonal_state([0.5, 0.5]), toy2)
    with pytest.raises(ConfigurationError):
        Scenario("sideways", 10, 0, diagonal_state([0.5, 0.5]), toy2)


@settings(max_examples=10, deadline=None)
@given(st.integers(1, 7), st.integers(0, 2**32 - 1))
def test_open_loop_block_size_invariance(size, seed):
    fam = toy_rotation_family(2, (0.3, 1.1))
    sc = Scenario("open", 25, 0, diagonal_state([0.6, 0.4]), fam, convergence_window=1000)
    ref = run_block(sc, seed, np.arange(7))
    got = np.concatenate([run_block(sc, seed, idx).final_target for idx in blocks(7, size)])
    np.testing.assert_array_equal(ref.final_target, got)
