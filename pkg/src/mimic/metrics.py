"""Open-loop trajectory metrics: minADE, minFDE, pooled AP, L2 and endpoint NMS.

A horizon of ``h`` seconds at ``rate_hz`` covers the first ``round(h * rate_hz)``
waypoints; its endpoint is the last of them.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import HorizonExceedsPrediction


@dataclass(frozen=True)
class EvalConfig:
    match_time_s: float = 1.0
    match_radius_m: float = 1.0
    l2_horizons_s: tuple = (1.0, 2.0, 4.0, 8.0)
    nms_top_k: int = 6
    nms_radius_m: float = 0.5
    rate_hz: float = 5.0


def horizon_count(horizon_s: float, rate_hz: float) -> int:
    n = int(round(horizon_s * rate_hz))
    if n < 1:
        raise HorizonExceedsPrediction(f"horizon {horizon_s}s at {rate_hz} Hz covers no waypoint")
    return n


def _prep(candidates, gt, horizon_s, rate_hz):
    c = np.asarray(candidates, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    if c.ndim == 2:
        c = c[None]
    n = horizon_count(horizon_s, rate_hz)
    if c.shape[1] < n or g.shape[0] < n:
        raise HorizonExceedsPrediction(
            f"horizon needs {n} waypoints; candidates have {c.shape[1]}, gt {g.shape[0]}")
    return c[:, :n, :2], g[:n, :2]


def min_ade(candidates, gt, horizon_s: float = 1.0, rate_hz: float = 5.0) -> float:
    c, g = _prep(candidates, gt, horizon_s, rate_hz)
    return float(np.min(np.mean(np.linalg.norm(c - g[None], axis=2), axis=1)))


def min_fde(candidates, gt, horizon_s: float = 1.0, rate_hz: float = 5.0) -> float:
    c, g = _prep(candidates, gt, horizon_s, rate_hz)
    return float(np.min(np.linalg.norm(c[:, -1] - g[-1], axis=1)))


def l2_at(best, gt, horizon_s: float, rate_hz: float = 5.0) -> float:
    """Endpoint distance at the horizon for a single selected trajectory."""
    c, g = _prep(np.asarray(best, dtype=np.float64)[None], gt, horizon_s, rate_hz)
    return float(np.linalg.norm(c[0, -1] - g[-1]))


def average_precision(samples, cfg: EvalConfig = EvalConfig()) -> float:
    """Pooled single-ground-truth AP.

    ``samples`` yields ``(candidates (M, T, >=2), confidences (M,), gt (T, >=2))``.
    Predictions from all samples are ranked by confidence (ties: sample index,
    then mode index). A prediction is a true positive if its endpoint at
    ``match_time_s`` is within ``match_radius_m`` of its own sample's gt
    endpoint and that gt has not been matched yet. AP is the area under the
    precision envelope, with one ground truth per sample.
    """
    n_idx = horizon_count(cfg.match_time_s, cfg.rate_hz) - 1
    rows = []
    n_gt = 0
    for s, (cand, conf, gt) in enumerate(samples):
        cand = np.asarray(cand, dtype=np.float64)
        conf = np.asarray(conf, dtype=np.float64)
        gt = np.asarray(gt, dtype=np.float64)
        if cand.shape[1] <= n_idx or gt.shape[0] <= n_idx:
            raise HorizonExceedsPrediction("match time exceeds the prediction span")
        n_gt += 1
        d = np.linalg.norm(cand[:, n_idx, :2] - gt[n_idx, :2], axis=1)
        for m in range(len(conf)):
            rows.append((-conf[m], s, m, d[m] <= cfg.match_radius_m))
    if n_gt == 0:
        return 0.0
    rows.sort(key=lambda r: (r[0], r[1], r[2]))
    matched = set()
    tp = np.zeros(len(rows))
    for i, (_, s, _, hit) in enumerate(rows):
        if hit and s not in matched:
            matched.add(s)
            tp[i] = 1.0
    return _ap_from_tp(tp, n_gt)


def _ap_from_tp(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, tp.size + 1)
    # precision envelope: running max from the right
    env = np.maximum.accumulate(precision[::-1])[::-1]
    prev_r = np.concatenate([[0.0], recall[:-1]])
    return float(np.sum((recall - prev_r) * env))


def endpoint_nms(candidates, confidences, top_k: int = 6, radius: float = 0.5) -> list[int]:
    """Greedy: keep the most confident remaining candidate, drop those whose
    endpoint lies within ``radius`` of it, stop after ``top_k``. Ties in
    confidence go to the lower index."""
    if radius <= 0:
        raise ValueError("radius must be positive")
    c = np.asarray(candidates, dtype=np.float64)
    conf = np.asarray(confidences, dtype=np.float64)
    ends = c[:, -1, :2]
    order = sorted(range(len(conf)), key=lambda m: (-conf[m], m))
    alive = np.ones(len(conf), dtype=bool)
    kept = []
    for m in order:
        if len(kept) >= top_k:
            break
        if not alive[m]:
            continue
        kept.append(m)
        alive &= np.linalg.norm(ends - ends[m], axis=1) > radius
    return kept


@dataclass
class EvalReport:
    minADE_1s: float
    minFDE_1s: float
    mAP: float | None
    L2: dict = field(default_factory=dict)  # horizon seconds -> value or None
    n: int = 0
    per_behavior_ap: dict = field(default_factory=dict)

    def machine_line(self) -> str:
        parts = [f"minADE={self.minADE_1s:.6f}", f"minFDE={self.minFDE_1s:.6f}",
                 "mAP=" + ("NA" if self.mAP is None else f"{self.mAP:.6f}")]
        for h, v in self.L2.items():
            parts.append(f"L2_{h:g}s=" + ("NA" if v is None else f"{v:.6f}"))
        parts.append(f"n={self.n}")
        return " ".join(parts)

    def format(self) -> str:
        heads = ["minADE_1s", "minFDE_1s", "mAP"] + [f"L2_{h:g}s" for h in self.L2]
        vals = [self.minADE_1s, self.minFDE_1s, self.mAP] + list(self.L2.values())
        cells = ["-" if v is None else f"{v:.4f}" for v in vals]
        widths = [max(len(h), len(c)) for h, c in zip(heads, cells)]
        line1 = "  ".join(h.rjust(w) for h, w in zip(heads, widths))
        line2 = "  ".join(c.rjust(w) for c, w in zip(cells, widths))
        return f"{line1}\n{line2}\nsamples: {self.n}\n{self.machine_line()}\n"


def evaluate_predictions(preds, cfg: EvalConfig = EvalConfig(), behaviors=None) -> EvalReport:
    """Aggregate metrics over samples.

    ``preds`` yields ``(candidates (M, T_c, 3), confidences (M,) or None, gt (T, 3))``.
    Without confidences AP is not defined and ``mAP`` is None. L2 uses the
    most confident candidate; horizons beyond the candidate span give None.
    """
    preds = list(preds)
    ade = [min_ade(c, g, cfg.match_time_s, cfg.rate_hz) for c, _, g in preds]
    fde = [min_fde(c, g, cfg.match_time_s, cfg.rate_hz) for c, _, g in preds]
    has_conf = all(p is not None for _, p, _ in preds)
    mAP = average_precision(preds, cfg) if has_conf and preds else None
    l2 = {}
    for h in cfg.l2_horizons_s:
        vals = []
        for c, p, g in preds:
            best = c[int(np.argmax(p))] if p is not None else c[0]
            try:
                vals.append(l2_at(best, g, h, cfg.rate_hz))
            except HorizonExceedsPrediction:
                vals = None
                break
        l2[h] = None if vals is None or not vals else float(np.mean(vals))
    per_b = {}
    if behaviors is not None and has_conf:
        for b in sorted(set(behaviors)):
            sub = [p for p, bb in zip(preds, behaviors) if bb == b]
            per_b[b] = average_precision(sub, cfg)
    return EvalReport(float(np.mean(ade)) if ade else 0.0, float(np.mean(fde)) if fde else 0.0,
                      mAP, l2, len(preds), per_b)
