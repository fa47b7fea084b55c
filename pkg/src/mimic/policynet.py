"""Small anchor-query trajectory policy on top of :mod:`mimic.autodiff`.

Context tokens: one FiLM-modulated token per history frame, 64 pooled patch
tokens of the current frame, one goal token and one camera token. Each decoder
layer refines the context with self-attention, lets every horizon's anchor
queries cross-attend to it, and emits per-mode trajectories (anchor plus a
predicted offset) with sigmoid confidences, plus one query-free short-horizon
trajectory from the pooled context.
"""

from __future__ import annotations

import math
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .anchors import HORIZON_NAMES, AnchorSet, horizon_lengths
from .errors import FormatError, ShapeMismatch

FINE_GRID = 8  # 8 x 8 = 64 fine tokens
COARSE_GRID = 2  # history frames are pooled to 2 x 2 cells before projection
QF = "Q"


@dataclass(frozen=True)
class PolicyConfig:
    T_h: int = 16
    T: int = 40
    rate_hz: float = 5.0
    M: int = 64
    C: int = 64
    n_layers: int = 4
    n_heads: int = 1
    image_size: int = 64
    patch_px: int = 4
    ffn_mult: int = 2
    time_dim: int = 16
    lam: float = 1.0
    w_psi: float = 0.5
    goal_mask_p: float = 0.5
    token_mask_p: float = 0.2
    heads: str = "ISMLQ"
    pos_emb: bool = True
    ego_states: bool = True

    def __post_init__(self):
        horizon_lengths(self.T)
        if self.image_size % self.patch_px:
            raise ValueError("image_size must be a multiple of patch_px")
        g = self.image_size // self.patch_px
        if g % FINE_GRID:
            raise ValueError(f"patch grid {g} must be a multiple of {FINE_GRID}")
        if self.C % self.n_heads:
            raise ValueError("C must be divisible by n_heads")
        bad = set(self.heads) - set(HORIZON_NAMES + (QF,))
        if bad or not self.heads:
            raise ValueError(f"unknown heads {sorted(bad)}; use letters from ISMLQ")

    @property
    def horizons(self) -> dict:
        """Enabled query horizons, name -> waypoint count, shortest first."""
        lens = horizon_lengths(self.T)
        return {h: n for h, n in zip(HORIZON_NAMES, lens) if h in self.heads}

    @property
    def qf_len(self) -> int:
        return self.T // 4

    @property
    def use_qf(self) -> bool:
        return QF in self.heads

    @property
    def n_tokens(self) -> int:
        return self.T_h + FINE_GRID * FINE_GRID + 2

    def to_text(self) -> str:
        return "\n".join(f"{f.name}={getattr(self, f.name)}" for f in fields(self)) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "PolicyConfig":
        types = {f.name: f.type for f in fields(cls)}
        kw = {}
        for line in text.splitlines():
            if not line.strip() or line.startswith("#"):
                continue
            k, v = line.split("=", 1)
            k = k.strip()
            if k not in types:
                raise FormatError(f"unknown policy config key {k!r}")
            default = getattr(cls, k)
            kw[k] = (v.strip() == "True") if isinstance(default, bool) else type(default)(v.strip())
        return cls(**kw)


@dataclass
class LayerOutput:
    traj: dict  # horizon -> Tensor (B, M, T_i, 3)
    conf: dict  # horizon -> Tensor (B, M)
    qf: ad.Tensor | None  # (B, T/4, 3)


@dataclass
class PredictionBundle:
    layers: list

    @property
    def final(self) -> LayerOutput:
        return self.layers[-1]


@dataclass
class Batch:
    frames: np.ndarray  # (B, T_h + 1, H, W, 3) in [0, 1]
    goal: np.ndarray  # (B, 3): d, cos, sin
    cam: np.ndarray  # (B, 16)
    ego: np.ndarray | None = None  # (B, T_h, 3) past poses in the current ego frame

    def __len__(self):
        return self.frames.shape[0]


# -- parameters -------------------------------------------------------------------------

def _dense(rng, n_in, n_out, scale=1.0):
    return rng.normal(0.0, scale / math.sqrt(n_in), size=(n_in, n_out))


def init_params(cfg: PolicyConfig, seed=0, zero_offsets: bool = True) -> dict:
    """Parameter tensors by name. ``zero_offsets`` starts every prediction on its anchor."""
    rng = np.random.default_rng(seed)
    C, E, F = cfg.C, cfg.time_dim, cfg.C * cfg.ffn_mult
    P = cfg.patch_px * cfg.patch_px * 3
    p = {}

    def mlp(prefix, n_in, n_hidden, n_out, out_scale=1.0):
        p[f"{prefix}.w1"] = _dense(rng, n_in, n_hidden)
        p[f"{prefix}.b1"] = np.zeros(n_hidden)
        p[f"{prefix}.w2"] = _dense(rng, n_hidden, n_out, out_scale)
        p[f"{prefix}.b2"] = np.zeros(n_out)

    def block(prefix):
        for m in ("wq", "wk", "wv", "wo"):
            p[f"{prefix}.{m}"] = _dense(rng, C, C)
        p[f"{prefix}.ln1.g"], p[f"{prefix}.ln1.b"] = np.ones(C), np.zeros(C)
        mlp(f"{prefix}.ff", C, F, C)
        p[f"{prefix}.ln2.g"], p[f"{prefix}.ln2.b"] = np.ones(C), np.zeros(C)

    mlp("enc", P, C, C)
    p["coarse.w"] = _dense(rng, COARSE_GRID * COARSE_GRID * C, C)
    p["coarse.b"] = np.zeros(C)
    mlp("film", E, C, 2 * C, out_scale=0.1)
    if cfg.ego_states:
        mlp("ego", EGO_DIM, C, C)
    if cfg.pos_emb:
        p["pos"] = rng.normal(0.0, 0.1, size=(FINE_GRID * FINE_GRID, C))
    mlp("goal", 3, C, C)
    mlp("cam", 16, C, C)
    for h, n in cfg.horizons.items():
        p[f"query.{h}.w"] = _dense(rng, 3 * n, C)
        p[f"query.{h}.b"] = np.zeros(C)
    for k in range(cfg.n_layers):
        block(f"L{k}.sa")
        if cfg.horizons:
            block(f"L{k}.ca")
        for h, n in cfg.horizons.items():
            scale = 0.0 if zero_offsets else 0.1
            p[f"L{k}.{h}.off.w"] = _dense(rng, C, 3 * n, scale)
            p[f"L{k}.{h}.off.b"] = np.zeros(3 * n)
            p[f"L{k}.{h}.conf.w"] = _dense(rng, C, 1, 0.1)
            p[f"L{k}.{h}.conf.b"] = np.zeros(1)
        if cfg.use_qf:
            mlp(f"L{k}.qf", C, C, 3 * cfg.qf_len, out_scale=0.0 if zero_offsets else 0.1)
    return {name: ad.Tensor(v, requires_grad=True, name=name) for name, v in p.items()}


def param_count(params: dict) -> int:
    return int(sum(t.data.size for t in params.values()))


# -- building blocks ----------------------------------------------------------------------

def _mlp(params, prefix, x):
    h = ad.relu(ad.linear(x, params[f"{prefix}.w1"], params[f"{prefix}.b1"]))
    return ad.linear(h, params[f"{prefix}.w2"], params[f"{prefix}.b2"])


def time_embedding(offsets_s, dim: int) -> np.ndarray:
    """Sinusoidal features of time offsets (seconds), shape ``(N, dim)``."""
    t = np.asarray(offsets_s, dtype=np.float64)[:, None]
    half = dim // 2
    freqs = np.exp(-math.log(100.0) * np.arange(half) / max(half - 1, 1))
    ang = t * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def film_params(params, cfg: PolicyConfig, offsets_s):
    """``(gamma, beta)`` per offset, each ``(N, C)``; gamma is centred on 1."""
    gb = _mlp(params, "film", ad.Tensor(time_embedding(offsets_s, cfg.time_dim)))
    C = cfg.C
    return ad.add(gb[:, :C], 1.0), gb[:, C:]


def film(tokens, gamma, beta):
    """``tokens * gamma + beta`` with per-token modulation broadcast over leading axes."""
    if gamma.shape != beta.shape or tuple(tokens.shape[-2:]) != tuple(gamma.shape):
        raise ShapeMismatch(f"film tokens {tokens.shape} vs gamma {gamma.shape} / beta {beta.shape}")
    return ad.add(ad.mul(tokens, gamma), beta)


def history_offsets(cfg: PolicyConfig) -> np.ndarray:
    """Seconds before the current frame for history frames, oldest first."""
    return (cfg.T_h - np.arange(cfg.T_h)) / cfg.rate_hz


def patchify(frames: np.ndarray, patch_px: int) -> np.ndarray:
    """``(B, F, H, W, 3)`` -> ``(B, F, n_patches, patch_px**2 * 3)``, row-major patches."""
    B, F, H, W, _ = frames.shape
    g_h, g_w = H // patch_px, W // patch_px
    x = frames.reshape(B, F, g_h, patch_px, g_w, patch_px, 3).transpose(0, 1, 2, 4, 3, 5, 6)
    return x.reshape(B, F, g_h * g_w, patch_px * patch_px * 3)


EGO_DIM = 6


def ego_features(history, rate_hz: float) -> np.ndarray:
    """Per past frame: position, heading as (cos, sin) and velocity to the next frame.

    ``history`` is ``(B, T_h, 3)`` in the current ego frame; the last frame's
    velocity points at the current pose (the origin).
    """
    h = np.asarray(history, dtype=np.float64)
    nxt = np.concatenate([h[:, 1:, :2], np.zeros_like(h[:, :1, :2])], axis=1)
    vel = (nxt - h[..., :2]) * rate_hz
    return np.concatenate([h[..., :2] / 4.0, np.cos(h[..., 2:]), np.sin(h[..., 2:]), vel / 2.0], axis=-1)


def signed_log(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.log1p(np.abs(x))


def sample_masks(cfg: PolicyConfig, B: int, rng: np.random.Generator) -> np.ndarray:
    """Keep-masks ``(B, n_tokens)``: goal token dropped w.p. goal_mask_p, others w.p. token_mask_p."""
    keep = rng.random((B, cfg.n_tokens)) >= cfg.token_mask_p
    keep[:, cfg.T_h + FINE_GRID * FINE_GRID] = rng.random(B) >= cfg.goal_mask_p
    return keep.astype(np.float64)


def encode_context(params, cfg: PolicyConfig, batch: Batch, keep=None) -> ad.Tensor:
    """Context tokens ``(B, T_h + 64 + 2, C)`` in the order coarse, fine, goal, camera.

    Each coarse token carries its frame's pooled image features plus, when
    ``cfg.ego_states`` is set, an embedding of the robot's pose at that frame;
    FiLM then conditions it on the frame's time offset.
    """
    frames = np.asarray(batch.frames, dtype=np.float64)
    B, F, H, W, _ = frames.shape
    if F != cfg.T_h + 1 or H != cfg.image_size or W != cfg.image_size:
        raise ShapeMismatch(f"frames {frames.shape} do not match config "
                            f"(T_h+1={cfg.T_h + 1}, size={cfg.image_size})")
    x = ad.Tensor(patchify(frames, cfg.patch_px) - 0.5)
    h = _mlp(params, "enc", x)  # (B, F, G*G, C)
    g = cfg.image_size // cfg.patch_px
    c = g // COARSE_GRID
    cells = ad.reshape(h[:, :cfg.T_h], (B, cfg.T_h, COARSE_GRID, c, COARSE_GRID, c, cfg.C))
    cells = ad.reshape(ad.mean(cells, axis=(3, 5)), (B, cfg.T_h, COARSE_GRID * COARSE_GRID * cfg.C))
    coarse = ad.linear(cells, params["coarse.w"], params["coarse.b"])
    if cfg.ego_states:
        if batch.ego is None or np.shape(batch.ego) != (B, cfg.T_h, 3):
            raise ShapeMismatch(f"ego states must be ({B}, {cfg.T_h}, 3), got "
                                f"{None if batch.ego is None else np.shape(batch.ego)}")
        coarse = ad.add(coarse, _mlp(params, "ego", ad.Tensor(ego_features(batch.ego, cfg.rate_hz))))
    gamma, beta = film_params(params, cfg, history_offsets(cfg))
    coarse = film(coarse, gamma, beta)

    cur = h[:, cfg.T_h]
    if g != FINE_GRID:
        f = g // FINE_GRID
        cur = ad.mean(ad.reshape(cur, (B, FINE_GRID, f, FINE_GRID, f, cfg.C)), axis=(2, 4))
        cur = ad.reshape(cur, (B, FINE_GRID * FINE_GRID, cfg.C))
    fine = ad.add(cur, params["pos"]) if cfg.pos_emb else cur

    goal = np.asarray(batch.goal, dtype=np.float64)
    goal_feat = np.column_stack([goal[:, 0] / 10.0, goal[:, 1], goal[:, 2]])
    g_tok = ad.reshape(_mlp(params, "goal", ad.Tensor(goal_feat)), (B, 1, cfg.C))
    c_tok = ad.reshape(_mlp(params, "cam", ad.Tensor(signed_log(batch.cam))), (B, 1, cfg.C))
    V = ad.concat([coarse, fine, g_tok, c_tok], axis=1)
    if keep is not None:
        V = ad.mul(V, np.asarray(keep, dtype=np.float64)[:, :, None])
    return V


def _block(params, prefix, cfg, q, kv):
    """Post-norm attention block: ``LN(q + MHA(q, kv, kv))`` then ``LN(x + FFN(x))``."""
    att = ad.attention(ad.matmul(q, params[f"{prefix}.wq"]), ad.matmul(kv, params[f"{prefix}.wk"]),
                       ad.matmul(kv, params[f"{prefix}.wv"]), cfg.n_heads)
    x = ad.layernorm(ad.add(q, ad.matmul(att, params[f"{prefix}.wo"])),
                     params[f"{prefix}.ln1.g"], params[f"{prefix}.ln1.b"])
    return ad.layernorm(ad.add(x, _mlp(params, f"{prefix}.ff", x)),
                        params[f"{prefix}.ln2.g"], params[f"{prefix}.ln2.b"])


def init_queries(params, cfg: PolicyConfig, anchors: dict, B: int) -> dict:
    """Per-horizon query tokens ``(B, M, C)`` from a linear map of the flattened anchors."""
    out = {}
    for h, n in cfg.horizons.items():
        flat = anchors[h].reshape(anchors[h].shape[0], 3 * n)
        q = ad.linear(ad.Tensor(flat), params[f"query.{h}.w"], params[f"query.{h}.b"])
        out[h] = ad.add(ad.Tensor(np.zeros((B, 1, 1))), q)
    return out


def decode_layer(params, k: int, cfg: PolicyConfig, queries: dict, V: ad.Tensor, anchors: dict):
    """One decoder layer. Returns ``(LayerOutput, refined_queries, refined_context)``."""
    B = V.shape[0]
    V2 = _block(params, f"L{k}.sa", cfg, V, V)
    traj, conf, refined = {}, {}, {}
    names = list(cfg.horizons)
    if names:
        Q = ad.concat([queries[h] for h in names], axis=1)
        Q2 = _block(params, f"L{k}.ca", cfg, Q, V2)
        start = 0
        for h in names:
            M = queries[h].shape[1]
            n = cfg.horizons[h]
            qh = Q2[:, start:start + M]
            start += M
            off = ad.reshape(ad.linear(qh, params[f"L{k}.{h}.off.w"], params[f"L{k}.{h}.off.b"]),
                             (B, M, n, 3))
            traj[h] = ad.add(off, anchors[h])
            logit = ad.linear(qh, params[f"L{k}.{h}.conf.w"], params[f"L{k}.{h}.conf.b"])
            conf[h] = ad.sigmoid(ad.reshape(logit, (B, M)))
            refined[h] = qh
    qf = None
    if cfg.use_qf:
        pooled = ad.mean(V2, axis=1)
        qf = ad.reshape(_mlp(params, f"L{k}.qf", pooled), (B, cfg.qf_len, 3))
    return LayerOutput(traj, conf, qf), refined, V2


def anchor_dict(cfg: PolicyConfig, anchor_sets) -> dict:
    """Map enabled horizon names to anchor arrays ``(M, T_i, 3)``, checking shapes."""
    if isinstance(anchor_sets, dict):
        return anchor_sets
    lens = horizon_lengths(cfg.T)
    by_index = {s.horizon_index: s for s in anchor_sets}
    out = {}
    for i, (h, n) in enumerate(zip(HORIZON_NAMES, lens), start=1):
        if h not in cfg.horizons:
            continue
        s: AnchorSet = by_index.get(i)
        if s is None or s.horizon_len != n or s.M != cfg.M:
            raise ShapeMismatch(f"anchor set for horizon {h} must be {cfg.M} x {n}")
        out[h] = s.anchors
    return out


def forward(params, cfg: PolicyConfig, anchors, batch: Batch, mode: str = "eval",
            rng: np.random.Generator | None = None) -> PredictionBundle:
    """Context encoding followed by ``n_layers`` decoder passes.

    Train mode samples token masks from ``rng``; eval mode uses none and is
    deterministic.
    """
    if mode not in ("train", "eval"):
        raise ValueError("mode must be 'train' or 'eval'")
    anc = anchor_dict(cfg, anchors)
    keep = None
    if mode == "train":
        keep = sample_masks(cfg, len(batch), rng if rng is not None else np.random.default_rng())
    V = encode_context(params, cfg, batch, keep)
    queries = init_queries(params, cfg, anc, len(batch))
    layers = []
    for k in range(cfg.n_layers):
        out, queries, V = decode_layer(params, k, cfg, queries, V, anc)
        layers.append(out)
    return PredictionBundle(layers)


# -- checkpoint -----------------------------------------------------------------------------

MAGIC = b"MNET1"


def save_params(path, params: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", len(params))]
    for name, t in params.items():
        data = t.data if isinstance(t, ad.Tensor) else np.asarray(t, dtype=np.float64)
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", data.ndim) + struct.pack(f"<{data.ndim}I", *data.shape))
        chunks.append(np.ascontiguousarray(data, dtype="<f8").tobytes())
    Path(path).write_bytes(b"".join(chunks))


def load_params(path, expected: dict | None = None) -> dict:
    """Read a checkpoint. With ``expected`` given, names and shapes must match it."""
    raw = Path(path).read_bytes()
    if not raw.startswith(MAGIC):
        raise FormatError(f"{path}: bad checkpoint magic")
    pos = len(MAGIC)

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated checkpoint")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (n,) = take("<I")
        name = raw[pos:pos + n].decode("utf-8")
        pos += n
        (ndim,) = take("<I")
        shape = take(f"<{ndim}I") if ndim else ()
        size = int(np.prod(shape)) if ndim else 1
        if pos + 8 * size > len(raw):
            raise FormatError(f"{path}: truncated tensor {name}")
        data = np.frombuffer(raw, dtype="<f8", count=size, offset=pos).reshape(shape).astype(np.float64)
        pos += 8 * size
        out[name] = ad.Tensor(data, requires_grad=True, name=name)
    if expected is not None:
        for name, t in expected.items():
            if name not in out:
                raise ShapeMismatch(f"checkpoint lacks parameter {name}")
            if out[name].shape != t.shape:
                raise ShapeMismatch(f"{name}: checkpoint {out[name].shape} vs model {t.shape}")
        extra = set(out) - set(expected)
        if extra:
            raise ShapeMismatch(f"checkpoint has unexpected parameters {sorted(extra)}")
    return out


def config_dict(cfg: PolicyConfig) -> dict:
    return asdict(cfg)
