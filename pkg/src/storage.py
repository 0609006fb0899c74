"""Artifact storage for lab runs: JSON summaries, CSV traces and snapshots."""

import hashlib
import json
import logging
import math
from enum import Enum
from pathlib import Path
from typing import Any, Dict, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel

from src.grid import DensityPair
from src.models import RunConfig

logger = logging.getLogger(__name__)


def to_jsonable(value: Any) -> Any:
    """Convert numpy scalars, arrays, enums and models into plain JSON values."""
    if isinstance(value, BaseModel):
        return to_jsonable(value.model_dump(mode="json", by_alias=True))
    if isinstance(value, dict):
        return {str(k): to_jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_jsonable(v) for v in value]
    if isinstance(value, np.ndarray):
        return [to_jsonable(v) for v in value.tolist()]
    if isinstance(value, Enum):
        return value.value
    if isinstance(value, (np.bool_, bool)):
        return bool(value)
    if isinstance(value, (np.integer, int)):
        return int(value)
    if isinstance(value, (np.floating, float)):
        value = float(value)
        if math.isnan(value):
            return "nan"
        if math.isinf(value):
            return "inf" if value > 0 else "-inf"
        return value
    if isinstance(value, Path):
        return str(value)
    return value


def dumps(payload: Any) -> str:
    return json.dumps(to_jsonable(payload), sort_keys=True, indent=2) + "\n"


def config_hash(config: RunConfig) -> str:
    """sha256 of the canonical JSON form of a run configuration."""
    canonical = json.dumps(to_jsonable(config), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


class ArtifactStore:
    """Writes the artifacts of one run into a directory."""

    def __init__(self, root: Union[str, Path]):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)

    def subdir(self, name: str) -> "ArtifactStore":
        return ArtifactStore(self.root / name)

    def path(self, name: str) -> Path:
        return self.root / name

    def write_json(self, name: str, payload: Any) -> Path:
        target = self.path(name)
        target.write_text(dumps(payload), encoding="utf-8")
        logger.info(f"[STORE] wrote {target}")
        return target

    def write_frame(self, name: str, frame: pd.DataFrame, footer: Optional[Dict[str, Any]] = None) -> Path:
        """CSV with optional '# key=value' footer lines."""
        target = self.path(name)
        text = frame.to_csv(index=False, float_format="%.17g", lineterminator="\n")
        if footer:
            text += "".join(f"# {key}={to_jsonable(value)}\n" for key, value in sorted(footer.items()))
        target.write_text(text, encoding="utf-8")
        logger.info(f"[STORE] wrote {target} ({len(frame)} rows)")
        return target

    def write_snapshot(self, name: str, pair: DensityPair, t: Optional[float] = None) -> Path:
        """Profile CSV (x, rho1, rho2) under a '#' line with the grid metadata."""
        grid = pair.grid
        meta = f"# L={grid.L!r} n={grid.n} dx={grid.dx!r}"
        if t is not None:
            meta += f" t={t!r}"
        frame = pd.DataFrame({"x": grid.centers, "rho1": pair.rho1, "rho2": pair.rho2})
        target = self.path(name)
        target.write_text(
            meta + "\n" + frame.to_csv(index=False, float_format="%.17g", lineterminator="\n"),
            encoding="utf-8",
        )
        return target


def read_trace(path: Union[str, Path]) -> tuple[pd.DataFrame, Dict[str, str]]:
    """Read a trace CSV back as (frame, footer)."""
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    footer = {}
    for line in lines:
        if line.startswith("# ") and "=" in line:
            key, _, value = line[2:].partition("=")
            footer[key] = value
    frame = pd.read_csv(path, comment="#")
    return frame, footer


class BaselineStore:
    """Stored empirical constants and their comparison within a relative band."""

    def __init__(self, path: Optional[Union[str, Path]] = None):
        self.path = Path(path) if path else None
        self.values: Dict[str, float] = {}
        if self.path is not None and self.path.exists():
            self.values = {k: float(v) for k, v in json.loads(self.path.read_text(encoding="utf-8")).items()}
        elif self.path is not None:
            logger.warning(f"[STORE] baseline file {self.path} not found; comparisons skipped")

    def compare(self, estimates: Dict[str, float], band: float) -> Dict[str, Dict[str, Any]]:
        """Per constant: value, baseline and whether it lies within the band (None without a baseline)."""
        out = {}
        for name, value in sorted(estimates.items()):
            baseline = self.values.get(name)
            within = None
            if baseline is not None and np.isfinite(value):
                scale = max(abs(baseline), 1e-12)
                within = bool(abs(value - baseline) <= band * scale)
            out[name] = {"value": value, "baseline": baseline, "within_band": within}
        return out
