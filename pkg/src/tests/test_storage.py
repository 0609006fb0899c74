"""Tests for artifact storage and baselines."""

import json

import numpy as np
import pandas as pd

from src.grid import Grid1D, uniform_pair
from src.models import Experiment, ModelSpec, RunConfig
from src.storage import ArtifactStore, BaselineStore, config_hash, dumps, read_trace, to_jsonable


def test_config_hash_is_stable_and_seed_sensitive(base_model):
    first = RunConfig(model=base_model, seed=3)
    second = RunConfig(model=ModelSpec(a1=2, a2=2, b1=3, b2=3, gamma=4), seed=3)
    other = RunConfig(model=base_model, seed=4)
    assert config_hash(first) == config_hash(second)
    assert config_hash(first) != config_hash(other)
    assert len(config_hash(first)) == 64


def test_non_finite_values_become_strings():
    payload = {"a": float("nan"), "b": np.float64(np.inf), "c": np.arange(2), "d": Experiment.STEADY}
    assert to_jsonable(payload) == {"a": "nan", "b": "inf", "c": [0, 1], "d": "steady"}
    # Output is valid JSON with sorted keys
    assert list(json.loads(dumps({"z": 1, "a": 2}))) == ["a", "z"]


def test_trace_footer_round_trip(tmp_path):
    store = ArtifactStore(tmp_path / "run")
    frame = pd.DataFrame({"t": [0.0, 0.5], "E_eps": [1.25, 1.0]})
    store.write_frame("trace.csv", frame, footer={"E_steady": 0.75, "fit_rate_E": float("nan")})
    back, footer = read_trace(store.path("trace.csv"))
    pd.testing.assert_frame_equal(back, frame)
    assert footer == {"E_steady": "0.75", "fit_rate_E": "nan"}


def test_snapshot_has_grid_header(tmp_path):
    grid = Grid1D(L=2.0, n=8)
    target = ArtifactStore(tmp_path).write_snapshot("snap.csv", uniform_pair(grid, 1.0), t=0.5)
    lines = target.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "# L=2.0 n=8 dx=0.5 t=0.5"
    assert lines[1] == "x,rho1,rho2"
    assert len(lines) == 2 + grid.n


def test_baseline_band(tmp_path):
    path = tmp_path / "baselines.json"
    path.write_text(json.dumps({"C0": 2.0, "beta_H": 1.0}), encoding="utf-8")
    result = BaselineStore(path).compare({"C0": 2.1, "beta_H": 1.5, "kappa11": 0.3}, band=0.1)
    assert result["C0"]["within_band"] is True
    assert result["beta_H"]["within_band"] is False
    assert result["kappa11"]["within_band"] is None


def test_missing_baseline_file_is_not_an_error(tmp_path):
    store = BaselineStore(tmp_path / "absent.json")
    assert store.values == {}
    assert store.compare({"C0": 1.0}, band=0.1)["C0"]["baseline"] is None
