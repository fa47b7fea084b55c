"""Horizon-specific trajectory anchors from k-means over future waypoints."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .errors import FormatError, IndivisibleHorizon, LengthMismatch, TooFewPoints
from .trajcore import Trajectory, heading_from_positions

HORIZON_NAMES = ("I", "S", "M", "L")


def horizon_lengths(T: int) -> tuple[int, int, int, int]:
    """Waypoint counts of the four prediction scales: T/8, T/4, T/2, T."""
    if T <= 0 or T % 8:
        raise IndivisibleHorizon(f"T={T} is not a positive multiple of 8")
    return (T // 8, T // 4, T // 2, T)


def horizon_split(future: Trajectory) -> list[Trajectory]:
    return [future[:n] for n in horizon_lengths(len(future))]


@dataclass(frozen=True)
class AnchorSet:
    horizon_index: int  # 1..4
    horizon_len: int
    anchors: np.ndarray  # (M, horizon_len, 3)

    def __post_init__(self):
        a = np.asarray(self.anchors, dtype=np.float64)
        if a.ndim != 3 or a.shape[1] != self.horizon_len or a.shape[2] != 3:
            raise LengthMismatch(f"anchors {a.shape} do not match horizon_len={self.horizon_len}")
        object.__setattr__(self, "anchors", a)

    @property
    def M(self) -> int:
        return self.anchors.shape[0]

    @property
    def endpoints(self) -> np.ndarray:
        return self.anchors[:, -1, :2]


@dataclass
class KMeansResult:
    centers: np.ndarray
    labels: np.ndarray
    inertia: float
    history: list = field(default_factory=list)  # inertia after each assignment step
    n_iter: int = 0
    converged: bool = False


def _kmeans_pp(x: np.ndarray, K: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    idx = [int(rng.integers(n))]
    _, d2 = kernels.kmeans_assign(x, x[idx])
    for _ in range(1, K):
        total = float(d2.sum())
        if total > 0.0:
            nxt = int(rng.choice(n, p=d2 / total))
        else:
            # every point already coincides with a center; pick any unused index
            unused = np.setdiff1d(np.arange(n), idx)
            nxt = int(rng.choice(unused))
        idx.append(nxt)
        _, d_new = kernels.kmeans_assign(x, x[nxt:nxt + 1])
        d2 = np.minimum(d2, d_new)
    return x[idx].copy()


def _update_centers(x, labels, centers):
    K, D = centers.shape
    sums = np.zeros((K, D))
    np.add.at(sums, labels, x)  # sequential, fixed order
    counts = np.bincount(labels, minlength=K)
    new = centers.copy()
    nz = counts > 0
    new[nz] = sums[nz] / counts[nz, None]
    return new, counts


def kmeans(points, K: int, seed=0, max_iter: int = 100) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding.

    Stops when an assignment step changes nothing, so on convergence the
    returned centers are the means of the returned assignment and reassigning
    against them is a fixed point. Empty clusters are re-seeded to the point
    farthest from its current center.
    """
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    if x.ndim != 2 or x.shape[1] < 1:
        raise ValueError("points must be an (N, D) array")
    if x.shape[0] < K or K < 1:
        raise TooFewPoints(f"need at least K={K} points, got {x.shape[0]}")
    rng = np.random.default_rng(seed)
    centers = _kmeans_pp(x, K, rng)
    labels, d2 = kernels.kmeans_assign(x, centers)
    history = [float(d2.sum())]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        centers, counts = _update_centers(x, labels, centers)
        for k in np.flatnonzero(counts == 0):
            _, d_cur = kernels.kmeans_assign(x, centers)
            far = int(np.argmax(d_cur))
            centers[k] = x[far]
        new_labels, d2 = kernels.kmeans_assign(x, centers)
        history.append(float(d2.sum()))
        if np.array_equal(new_labels, labels):
            converged = True
            break
        labels = new_labels
    return KMeansResult(centers, labels, history[-1], history, it, converged)


def build_anchor_sets(futures, M: int, seed=0, max_iter: int = 100) -> list[AnchorSet]:
    """Cluster the (x, y) waypoints of each horizon prefix into ``M`` anchors.

    ``futures`` is a sequence of ego-frame trajectories (or an ``(N, T, 3)``
    array). Anchor headings are recomputed from consecutive positions.
    """
    arr = np.stack([f.poses if isinstance(f, Trajectory) else np.asarray(f, dtype=np.float64)
                    for f in futures])
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError("futures must stack to (N, T, 3)")
    lengths = horizon_lengths(arr.shape[1])
    sets = []
    for i, n in enumerate(lengths, start=1):
        flat = arr[:, :n, :2].reshape(arr.shape[0], -1)
        res = kmeans(flat, M, seed=[int(seed), i], max_iter=max_iter)
        xy = res.centers.reshape(M, n, 2)
        psi = np.stack([heading_from_positions(a) for a in xy])
        sets.append(AnchorSet(i, n, np.concatenate([xy, psi[..., None]], axis=2)))
    return sets


def nearest_anchor_by_endpoint(anchors: AnchorSet, gt) -> int:
    g = gt.poses if isinstance(gt, Trajectory) else np.asarray(gt, dtype=np.float64)
    if g.shape[0] != anchors.horizon_len:
        raise LengthMismatch(f"gt has {g.shape[0]} poses, anchors {anchors.horizon_len}")
    return int(nearest_endpoint_indices(anchors, g[None])[0])


def nearest_endpoint_indices(anchors: AnchorSet, gts: np.ndarray) -> np.ndarray:
    """Batched endpoint match for ``(B, horizon_len, >=2)`` prefixes; ties to the lowest index."""
    end = np.asarray(gts, dtype=np.float64)[:, -1, :2]
    d = np.sum((anchors.endpoints[None] - end[:, None]) ** 2, axis=2)
    return np.argmin(d, axis=1)


# -- file format -------------------------------------------------------------------

def write_anchor_sets(path, sets) -> None:
    lines = []
    for s in sets:
        lines.append(f"#ANCH v1 horizon={s.horizon_index} len={s.horizon_len} M={s.M}")
        for a in s.anchors:
            lines.append(" ".join(repr(float(v)) for v in a.reshape(-1)))
    Path(path).write_text("\n".join(lines) + "\n")


def read_anchor_sets(path) -> list[AnchorSet]:
    sets = []
    head = None
    rows = []

    def flush():
        if head is None:
            return
        i, n, m = head
        if len(rows) != m:
            raise FormatError(f"{path}: horizon {i} declares M={m}, found {len(rows)} anchors")
        sets.append(AnchorSet(i, n, np.array(rows).reshape(m, n, 3)))

    for ln, line in enumerate(Path(path).read_text().splitlines(), start=1):
        if not line.strip():
            continue
        if line.startswith("#ANCH"):
            flush()
            parts = line.split()
            if len(parts) < 2 or parts[1] != "v1":
                raise FormatError(f"{path}:{ln}: unsupported anchor header")
            kv = dict(p.split("=", 1) for p in parts[2:])
            try:
                head = (int(kv["horizon"]), int(kv["len"]), int(kv["M"]))
            except (KeyError, ValueError):
                raise FormatError(f"{path}:{ln}: bad anchor header") from None
            rows = []
            continue
        if head is None:
            raise FormatError(f"{path}:{ln}: data before header")
        vals = [float(v) for v in line.split()]
        if len(vals) != 3 * head[1]:
            raise FormatError(f"{path}:{ln}: expected {3 * head[1]} values, got {len(vals)}")
        rows.append(vals)
    flush()
    if not sets:
        raise FormatError(f"{path}: no anchor sets")
    return sets
