"""On-disk sample store shared by the command-line stages.

A store is a directory with ``index.jsonl`` (one JSON object of scalar fields
per sample) and ``arrays.npy`` (the per-sample arrays written back to back
with :func:`numpy.save`). Both are written deterministically, so the same
samples always produce byte-identical files.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .curation import Behavior, TrainingSample
from .errors import FormatError
from .trajcore import GoalEncoding, Trajectory

STORE_VERSION = 1
_ARRAYS = ("history", "future", "goal_xy", "cam", "window_world", "raw_world", "frames", "depth")


def _to_array(smp: TrainingSample, key: str):
    val = getattr(smp, key)
    if isinstance(val, Trajectory):
        return val.poses
    return val


def write_store(root, samples) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    lines = []
    with open(root / "arrays.npy", "wb") as fh:
        for smp in samples:
            present = []
            for key in _ARRAYS:
                arr = _to_array(smp, key)
                if arr is None:
                    continue
                np.save(fh, np.ascontiguousarray(arr), allow_pickle=False)
                present.append(key)
            row = {
                "v": STORE_VERSION, "sample_id": smp.sample_id, "provenance": smp.provenance,
                "behavior": smp.behavior.value, "log_id": int(smp.log_id), "start": int(smp.start),
                "rate_hz": smp.future.rate_hz, "goal": [smp.goal.d, smp.goal.cos_phi, smp.goal.sin_phi],
                "arrays": present, "meta": smp.meta,
            }
            lines.append(json.dumps(row, sort_keys=True))
    (root / "index.jsonl").write_text("".join(line + "\n" for line in lines))
    return root


def read_store(root) -> list[TrainingSample]:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.exists():
        raise FormatError(f"{root}: no sample store here")
    rows = [json.loads(line) for line in index.read_text().splitlines() if line.strip()]
    out = []
    with open(root / "arrays.npy", "rb") as fh:
        for row in rows:
            if row.get("v") != STORE_VERSION:
                raise FormatError(f"{root}: unsupported store version {row.get('v')}")
            try:
                arrs = {key: np.load(fh, allow_pickle=False) for key in row["arrays"]}
            except (ValueError, EOFError) as exc:
                raise FormatError(f"{root}: truncated array payload") from exc
            rate = row["rate_hz"]

            def traj(key, frame_id):
                return Trajectory(arrs[key], rate, frame_id) if key in arrs else None

            out.append(TrainingSample(
                sample_id=row["sample_id"], history=traj("history", "ego"), future=traj("future", "ego"),
                goal=GoalEncoding(*row["goal"]), goal_xy=arrs.get("goal_xy"), cam=arrs.get("cam"),
                provenance=row["provenance"], behavior=Behavior(row["behavior"]), log_id=row["log_id"],
                start=row["start"], window_world=traj("window_world", "world"),
                raw_world=traj("raw_world", "world"), frames=arrs.get("frames"), depth=arrs.get("depth"),
                meta=row["meta"]))
    return out
