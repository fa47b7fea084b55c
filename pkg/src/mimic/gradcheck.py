"""Central finite-difference checks for the policy's parameter gradients."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .anchors import HORIZON_NAMES, horizon_lengths
from .policynet import Batch, PolicyConfig, forward, init_params
from .supervision import assign_targets, loss_and_grad, total_loss


def rel_error(a, n, floor: float = 1e-6) -> np.ndarray:
    """``|a - n| / max(|a|, |n|, floor)``, elementwise."""
    a = np.asarray(a, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


@dataclass
class GradCheckResult:
    worst: dict  # parameter name -> largest relative error seen
    checks: int
    refined: int = 0  # probes that needed a smaller step because of a kink

    @property
    def max_error(self) -> float:
        return max(self.worst.values())


def _central(loss_fn, t, base, d, h, path0):
    """Central difference along ``d``, shrinking ``h`` while the stencil crosses a kink.

    A kink (ReLU, clamp, piece boundary) lies between the stencil points
    exactly when a piecewise primitive switches branch there; across one a
    central difference measures neither side's derivative.
    """
    for attempt in range(4):
        if attempt:
            h /= 10.0
        t.data = base + h * d
        with ad.BranchRecorder() as rec_up:
            up = loss_fn()
        t.data = base - h * d
        with ad.BranchRecorder() as rec_down:
            down = loss_fn()
        t.data = base
        if rec_up.same_path(path0) and rec_down.same_path(path0):
            break
    return (up - down) / (2 * h), h


def check_gradients(loss_fn, grad_fn, params: dict, seed=0, n_elements: int = 2, h: float = 1e-5):
    """Compare analytic gradients with central differences, tensor by tensor.

    For every parameter tensor a few seeded elements are probed one at a
    time, plus one random unit direction across the whole tensor (so every
    element enters at least one check). ``loss_fn()`` evaluates the loss at
    the current parameter values; ``grad_fn()`` returns ``{name: grad}``.
    """
    rng = np.random.default_rng(seed)
    grads = {k: np.array(v, dtype=np.float64) for k, v in grad_fn().items()}
    with ad.BranchRecorder() as path0:
        loss_fn()
    worst = {}
    checks = refined = 0
    for name in sorted(params):
        t = params[name]
        base = t.data.copy()
        g = grads[name]
        probes = []
        for i in rng.choice(base.size, size=min(n_elements, base.size), replace=False):
            d = np.zeros(base.size)
            d[i] = 1.0
            probes.append(d.reshape(base.shape))
        d = rng.normal(size=base.shape)
        probes.append(d / np.linalg.norm(d))
        errs = []
        for d in probes:
            num, used = _central(loss_fn, t, base, d, h, path0)
            refined += used != h
            errs.append(float(rel_error(np.sum(g * d), num)))
            checks += 1
        worst[name] = max(errs)
    return GradCheckResult(worst, checks, refined)


def small_config(**kw) -> PolicyConfig:
    """The gradient-check configuration: C=16, T=8, M=4, two layers, tiny images."""
    base = dict(T_h=2, T=8, M=4, C=16, n_layers=2, image_size=16, patch_px=2, time_dim=8, n_heads=1)
    base.update(kw)
    return PolicyConfig(**base)


def random_problem(cfg: PolicyConfig, seed, B: int = 2):
    """Random batch, ground truth and anchors for a config; nothing here is learned."""
    rng = np.random.default_rng(seed)
    frames = rng.random((B, cfg.T_h + 1, cfg.image_size, cfg.image_size, 3))
    goal = np.column_stack([rng.uniform(1, 5, B), np.ones(B), np.zeros(B)])
    ang = rng.uniform(-np.pi, np.pi, B)
    goal[:, 1], goal[:, 2] = np.cos(ang), np.sin(ang)
    cam = rng.normal(size=(B, 16))
    step = rng.normal(0.2, 0.1, size=(B, cfg.T, 3))
    step[:, 0] = 0.0
    gt = np.cumsum(step, axis=1)
    anchors = {name: np.cumsum(rng.normal(0.2, 0.1, size=(cfg.M, n, 3)), axis=1)
               for name, n in zip(HORIZON_NAMES, horizon_lengths(cfg.T))}
    ego = -np.cumsum(rng.normal(0.2, 0.1, size=(B, cfg.T_h, 3))[:, ::-1], axis=1)[:, ::-1]
    return Batch(frames, goal, cam, ego), gt, anchors


def policy_gradcheck(seed, cfg: PolicyConfig | None = None, n_elements: int = 2, h: float = 1e-5,
                     mode: str = "train") -> GradCheckResult:
    """Check d(total_loss)/d(theta) for every policy parameter on a random problem.

    Offset heads start non-zero so every path carries gradient. Train-mode
    token masks are redrawn from the same seed on each evaluation.
    """
    cfg = small_config() if cfg is None else cfg
    batch, gt, anchors = random_problem(cfg, [int(seed), 1])
    params = init_params(cfg, seed=[int(seed), 2], zero_offsets=False)

    def loss_fn():
        bundle = forward(params, cfg, anchors, batch, mode, np.random.default_rng([int(seed), 3]))
        loss, _ = total_loss(bundle, assign_targets(cfg, anchors, gt), cfg)
        return float(loss.data)

    def grad_fn():
        loss_and_grad(params, cfg, anchors, batch, gt, mode, np.random.default_rng([int(seed), 3]))
        return {k: p.grad for k, p in params.items()}

    return check_gradients(loss_fn, grad_fn, params, seed=seed, n_elements=n_elements, h=h)
