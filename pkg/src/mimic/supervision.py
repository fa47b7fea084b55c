"""Targets, multi-scale losses, mixture likelihood and the training loop."""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import DegenerateSigma, EmptyDataset, LengthMismatch
from .policynet import Batch, PolicyConfig, PredictionBundle, anchor_dict, forward, init_params

EPS_CONF = 1e-7


# -- targets -------------------------------------------------------------------------------

@dataclass
class AssignedTargets:
    positive: dict  # horizon -> (B,) int
    onehot: dict  # horizon -> (B, M)
    gt: dict  # horizon -> (B, T_i, 3)
    full_gt: np.ndarray  # (B, T, 3)


def assign_targets(cfg: PolicyConfig, anchors, gt_future) -> AssignedTargets:
    """Positive mode per horizon: the anchor whose endpoint is nearest the gt prefix endpoint.

    Depends only on anchors and gt, so it is computed once per sample and
    shared by all decoder layers. Ties go to the lowest index.
    """
    gt = np.asarray(gt_future, dtype=np.float64)
    if gt.ndim == 2:
        gt = gt[None]
    if gt.shape[1] != cfg.T:
        raise LengthMismatch(f"gt future has {gt.shape[1]} poses, config T={cfg.T}")
    anc = anchor_dict(cfg, anchors)
    pos, onehot, prefixes = {}, {}, {}
    for h, n in cfg.horizons.items():
        end = gt[:, n - 1, :2]
        d = np.sum((anc[h][None, :, -1, :2] - end[:, None]) ** 2, axis=2)
        idx = np.argmin(d, axis=1)
        pos[h] = idx
        oh = np.zeros((gt.shape[0], anc[h].shape[0]))
        oh[np.arange(gt.shape[0]), idx] = 1.0
        onehot[h] = oh
        prefixes[h] = gt[:, :n]
    return AssignedTargets(pos, onehot, prefixes, gt)


# -- losses --------------------------------------------------------------------------------

def regression_loss_t(pred, gt, w_psi: float = 0.5) -> ad.Tensor:
    """Per-sample smooth-L1 over ``(..., T_i, 3)``: x, y plus ``w_psi`` times wrapped heading error,
    averaged over waypoints. Returns a tensor of the leading shape."""
    gt = np.asarray(gt, dtype=np.float64)
    if tuple(pred.shape) != gt.shape:
        raise LengthMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    diff = ad.sub(pred, gt)
    pos = ad.sum(ad.smooth_l1(diff[..., :2]), axis=-1)
    head = ad.smooth_l1(ad.wrap_angle(diff[..., 2]))
    per_wp = ad.add(pos, ad.mul(head, w_psi))
    return ad.mean(per_wp, axis=-1)


def regression_loss(pred, gt, w_psi: float = 0.5) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise LengthMismatch(f"prediction {pred.shape} vs ground truth {gt.shape}")
    return float(regression_loss_t(ad.Tensor(pred), gt, w_psi).data)


def classification_loss_t(conf, targets, eps: float = EPS_CONF) -> ad.Tensor:
    """Per-sample BCE averaged over modes, confidences clamped to ``[eps, 1 - eps]``."""
    p = np.asarray(targets, dtype=np.float64)
    c = ad.clamp(conf, eps, 1.0 - eps)
    ll = ad.add(ad.mul(ad.log(c), p), ad.mul(ad.log(ad.sub(1.0, c)), 1.0 - p))
    return ad.mul(ad.mean(ll, axis=-1), -1.0)


def classification_loss(conf, targets, eps: float = EPS_CONF) -> float:
    return float(classification_loss_t(ad.Tensor(np.asarray(conf, dtype=np.float64)), targets, eps).data)


@dataclass
class LossReport:
    total: float
    per_layer: list
    reg: float  # mean over layers of the summed per-horizon regression
    cls: float  # mean over layers of lambda times the summed classification
    qf: float  # mean over layers of the query-free regression
    per_layer_q: list = field(default_factory=list)
    per_layer_qf: list = field(default_factory=list)


def total_loss(bundle: PredictionBundle, targets: AssignedTargets, cfg: PolicyConfig,
               lam: float | None = None):
    """``(loss_tensor, LossReport)``; the loss is averaged over the batch and over layers."""
    lam = cfg.lam if lam is None else lam
    layer_losses, reg_l, cls_l, qf_l, q_l = [], [], [], [], []
    for layer in bundle.layers:
        parts = []
        reg_sum = cls_sum = 0.0
        for h in cfg.horizons:
            oh = targets.onehot[h]
            B, M = oh.shape
            sel = ad.gather(layer.traj[h], targets.positive[h].reshape(B, 1, 1, 1)
                            * np.ones((1, 1) + tuple(layer.traj[h].shape[2:]), dtype=np.int64), axis=1)
            sel = ad.reshape(sel, (B,) + tuple(layer.traj[h].shape[2:]))
            reg = ad.mean(regression_loss_t(sel, targets.gt[h], cfg.w_psi))
            cls = ad.mul(ad.mean(classification_loss_t(layer.conf[h], oh)), lam)
            parts += [reg, cls]
            reg_sum += float(reg.data)
            cls_sum += float(cls.data)
        q_val = reg_sum + cls_sum
        qf_val = 0.0
        if cfg.use_qf:
            gt_qf = targets.full_gt[:, :cfg.qf_len]
            qf = ad.mean(regression_loss_t(layer.qf, gt_qf, cfg.w_psi))
            parts.append(qf)
            qf_val = float(qf.data)
        lk = parts[0]
        for p in parts[1:]:
            lk = ad.add(lk, p)
        layer_losses.append(lk)
        reg_l.append(reg_sum)
        cls_l.append(cls_sum)
        qf_l.append(qf_val)
        q_l.append(q_val)
    tot = layer_losses[0]
    for lk in layer_losses[1:]:
        tot = ad.add(tot, lk)
    tot = ad.mul(tot, 1.0 / len(layer_losses))
    K = len(layer_losses)
    report = LossReport(float(tot.data), [float(lk.data) for lk in layer_losses],
                        sum(reg_l) / K, sum(cls_l) / K, sum(qf_l) / K, q_l, qf_l)
    return tot, report


# -- mixture likelihood --------------------------------------------------------------------

@dataclass(frozen=True)
class GmmParams:
    weights: np.ndarray  # (M,)
    means: np.ndarray  # (M, T, 2)
    sigmas: np.ndarray  # (M, T)

    def __post_init__(self):
        w = np.asarray(self.weights, dtype=np.float64)
        if np.any(w < 0) or abs(w.sum() - 1.0) > 1e-9:
            raise ValueError("mixture weights must be non-negative and sum to 1")


def gmm_nll(params: GmmParams, action) -> float:
    """``-log sum_m p_m prod_t N(a_t; mu_mt, sigma_mt^2 I_2)`` over (x, y), in log space."""
    sig = np.asarray(params.sigmas, dtype=np.float64)
    if np.any(~(sig > 0)):
        raise DegenerateSigma("all sigmas must be strictly positive")
    mu = np.asarray(params.means, dtype=np.float64)
    a = np.asarray(action, dtype=np.float64)[..., :2]
    if a.shape != mu.shape[1:]:
        raise LengthMismatch(f"action {a.shape} vs means {mu.shape[1:]}")
    sq = np.sum((a[None] - mu) ** 2, axis=-1)
    log_n = -sq / (2 * sig ** 2) - 2 * np.log(sig) - math.log(2 * math.pi)
    with np.errstate(divide="ignore"):
        terms = np.log(np.asarray(params.weights, dtype=np.float64)) + log_n.sum(axis=1)
    top = np.max(terms)
    if not np.isfinite(top):
        return math.inf
    return float(-(top + math.log(np.sum(np.exp(terms - top)))))


# -- training ------------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 2000
    steps_per_epoch: int = 100
    batch_size: int = 16
    lr0: float = 1e-4
    momentum: float = 0.9
    optimizer: str = "momentum"  # momentum | sgd | adam
    grad_clip: float = 0.0
    weight_decay: float = 0.0


def cosine_lr(step: int, total: int, lr0: float) -> float:
    """Cosine decay from ``lr0`` at step 0 to 0 at ``total``."""
    if total <= 0:
        return lr0
    return lr0 * 0.5 * (1.0 + math.cos(math.pi * min(step, total) / total))


class Optimizer:
    def __init__(self, params: dict, tc: TrainConfig):
        self.params = params
        self.tc = tc
        self.state = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.state2 = {k: np.zeros_like(p.data) for k, p in params.items()} if tc.optimizer == "adam" else None
        self.t = 0

    def step(self, lr: float):
        tc = self.tc
        self.t += 1
        grads = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)) for k, p in self.params.items()}
        if tc.weight_decay:
            grads = {k: g + tc.weight_decay * self.params[k].data for k, g in grads.items()}
        if tc.grad_clip > 0:
            norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
            if norm > tc.grad_clip:
                grads = {k: g * (tc.grad_clip / norm) for k, g in grads.items()}
        for k, p in self.params.items():
            g = grads[k]
            if tc.optimizer == "sgd":
                p.data = p.data - lr * g
            elif tc.optimizer == "momentum":
                self.state[k] = tc.momentum * self.state[k] + g
                p.data = p.data - lr * self.state[k]
            elif tc.optimizer == "adam":
                b1, b2 = 0.9, 0.999
                self.state[k] = b1 * self.state[k] + (1 - b1) * g
                self.state2[k] = b2 * self.state2[k] + (1 - b2) * g * g
                mhat = self.state[k] / (1 - b1 ** self.t)
                vhat = self.state2[k] / (1 - b2 ** self.t)
                p.data = p.data - lr * mhat / (np.sqrt(vhat) + 1e-8)
            else:
                raise ValueError(f"unknown optimizer {tc.optimizer!r}")


def loss_and_grad(params, cfg: PolicyConfig, anchors, batch: Batch, gt_future, mode="train", rng=None):
    for p in params.values():
        p.zero_grad()
    with ad.Tape() as tape:
        bundle = forward(params, cfg, anchors, batch, mode, rng)
        targets = assign_targets(cfg, anchors, gt_future)
        loss, report = total_loss(bundle, targets, cfg)
    tape.backward(loss)
    return loss, report


@dataclass
class CurveRow:
    epoch: int
    total: float
    reg: float
    cls: float
    qf: float
    lr: float

    def format(self) -> str:
        return f"{self.epoch} {self.total:.6f} {self.reg:.6f} {self.cls:.6f} {self.qf:.6f} {self.lr:.6g}"


def train(dataset, cfg: PolicyConfig, anchors, tc: TrainConfig = TrainConfig(), seed=0,
          params=None, make_batch=None, log=None):
    """Mini-batch training with a per-step cosine schedule.

    ``dataset`` is a sequence of samples and ``make_batch(samples) -> (Batch,
    gt_future)`` turns a list of them into arrays. Batches are drawn from a
    seeded permutation that is refreshed when exhausted. Returns
    ``(params, curve)`` where each curve row averages one block of
    ``steps_per_epoch`` steps and reports the learning rate at its start.
    """
    n = len(dataset)
    if n == 0:
        raise EmptyDataset("no training samples")
    if make_batch is None:
        from .pipeline import make_batch
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(cfg, seed=[int(seed), 7])
    opt = Optimizer(params, tc)
    order = rng.permutation(n)
    cursor = 0
    curve = []
    acc = np.zeros(4)
    count = 0
    epoch_lr = cosine_lr(0, tc.steps, tc.lr0)
    for step in range(tc.steps):
        if cursor + tc.batch_size > n:
            order = rng.permutation(n)
            cursor = 0
        idx = order[cursor:cursor + min(tc.batch_size, n)]
        cursor += len(idx)
        batch, gt = make_batch([dataset[i] for i in idx])
        lr = cosine_lr(step, tc.steps, tc.lr0)
        _, rep = loss_and_grad(params, cfg, anchors, batch, gt, "train", rng)
        opt.step(lr)
        acc += (rep.total, rep.reg, rep.cls, rep.qf)
        count += 1
        if count == tc.steps_per_epoch or step == tc.steps - 1:
            row = CurveRow(len(curve), *(acc / count), epoch_lr)
            curve.append(row)
            if log is not None:
                log(row.format())
            acc[:] = 0.0
            count = 0
            epoch_lr = cosine_lr(step + 1, tc.steps, tc.lr0)
    return params, curve


def format_curve(curve) -> str:
    return "# epoch total reg cls qf lr\n" + "\n".join(r.format() for r in curve) + "\n"

