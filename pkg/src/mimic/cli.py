"""``mimic`` command line: gen, curate, expand, anchors, train, eval, rollout, report.

Pipeline state lives in directories. Settings come from a flat ``key=value``
config file (``--config``) with per-key flag overrides (``--steps 500``);
flags win. Exit codes: 0 success, 1 domain error, 2 usage error.
"""

from __future__ import annotations

import argparse
import math
import shutil
import sys
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .anchors import build_anchor_sets, read_anchor_sets, write_anchor_sets
from .camgeom import default_camera
from .curation import CurationConfig, curate
from .errors import EmptyInput, MimicError
from .expansion import expand_samples, write_manifest
from .metrics import EvalConfig, EvalReport
from .pipeline import DataConfig, evaluate_model, generate_log, model_policy
from .policynet import PolicyConfig, init_params, load_params, save_params
from .scenegen import read_scenario_bundle, rollout, write_scenario_bundle
from .store import read_store, write_store
from .supervision import TrainConfig, format_curve, train


class UsageError(Exception):
    pass


@dataclass(frozen=True)
class Key:
    name: str
    default: object
    help: str


KEYS = [
    # paths
    Key("work_dir", "runs", "root for every stage's outputs"),
    Key("expanded_name", "expanded", "subdirectory of work_dir holding the training store"),
    Key("model_name", "model", "subdirectory of work_dir holding the checkpoint"),
    # data generation
    Key("seed", 0, "seed for curation, expansion, anchors and training"),
    Key("n_scenarios", 8, "training scenarios (seeds 0..n-1)"),
    Key("n_eval_scenarios", 4, "held-out scenarios"),
    Key("eval_seed_offset", 1000, "first held-out scenario seed"),
    Key("image_size", 32, "square image side in pixels"),
    Key("duration_s", 30.0, "scenario length in seconds"),
    Key("rate_hz", 5.0, "log and waypoint rate"),
    Key("difficulty_min", 0.3, "lower bound of scenario difficulty"),
    Key("difficulty_max", 1.0, "upper bound of scenario difficulty"),
    Key("abnormal_p", 0.1, "chance that a scenario contains an abnormal segment"),
    # curation
    Key("T_h", 16, "history length in frames"),
    Key("T", 40, "future length in waypoints"),
    Key("stride", 4, "window stride in frames"),
    Key("v_stop", 0.1, "speed below which a segment counts as stopped (m/s)"),
    Key("theta_turn", math.pi / 6, "net heading change that makes a turn (rad)"),
    Key("omega_max", 0.5, "yaw rate limit for the rotation-while-still filter (rad/s)"),
    Key("v_back", 0.05, "backward speed limit (m/s)"),
    Key("n_abn", 5, "consecutive abnormal frames that drop a window"),
    Key("straight_cap", 0.5, "maximum share of Straight samples after balancing"),
    # expansion
    Key("corrective", 1, "synthesize corrective pairs (0/1)"),
    Key("relight", 0, "synthesize relit copies (0/1)"),
    Key("alpha_min", 0.2, "smallest perturbation amplitude (m)"),
    Key("alpha_max", 1.0, "largest perturbation amplitude (m)"),
    Key("p_lateral", 0.8, "chance of a lateral rather than longitudinal perturbation"),
    Key("c_min", 0.6, "minimum coverage of a re-rendered frame"),
    Key("splat_px", 2, "splat square side in pixels"),
    Key("d_split", 8.0, "foreground/background depth split for relighting (m)"),
    Key("recovery_seed", 1, "seed of the held-out recovery split"),
    # anchors and model
    Key("M", 16, "anchors per horizon"),
    Key("kmeans_max_iter", 100, "k-means iteration cap"),
    Key("C", 32, "token width"),
    Key("n_layers", 2, "decoder layers"),
    Key("n_heads", 1, "attention heads"),
    Key("patch_px", 4, "patch side in pixels"),
    Key("ffn_mult", 2, "feed-forward expansion"),
    Key("time_dim", 16, "time embedding width"),
    Key("heads", "ISMLQ", "enabled heads: I S M L horizons and Q for query-free"),
    Key("lam", 1.0, "classification loss weight"),
    Key("w_psi", 0.5, "heading weight in the regression loss"),
    Key("goal_mask_p", 0.5, "goal token drop rate in training"),
    Key("token_mask_p", 0.2, "context token drop rate in training"),
    Key("ego_states", 1, "feed past ego poses and velocities to the coarse tokens (0/1)"),
    # training
    Key("steps", 1500, "optimizer steps"),
    Key("steps_per_epoch", 100, "steps per curve row"),
    Key("batch_size", 16, "samples per step"),
    Key("lr0", 1e-3, "initial learning rate"),
    Key("optimizer", "adam", "momentum, sgd or adam"),
    Key("momentum", 0.9, "momentum coefficient"),
    Key("grad_clip", 0.0, "global gradient norm clip, 0 disables"),
    Key("weight_decay", 0.0, "L2 weight decay"),
    # evaluation and rollout
    Key("match_time_s", 1.0, "AP and minADE horizon (s)"),
    Key("match_radius_m", 1.0, "AP match radius (m)"),
    Key("nms_top_k", 6, "modes kept by endpoint NMS"),
    Key("nms_radius_m", 0.5, "endpoint NMS radius (m)"),
    Key("rollout_scenarios", 4, "held-out scenarios driven in closed loop"),
    Key("rollout_offset_m", 0.0, "lateral offset of the rollout start (m)"),
    Key("controller_step_s", 0.2, "control period of the rollout (s)"),
]
DEFAULTS = {k.name: k.default for k in KEYS}
DEFAULTS_HELP = {k.name: k.help for k in KEYS}


def _coerce(name: str, raw: str):
    default = DEFAULTS[name]
    try:
        if isinstance(default, bool):
            return raw.lower() in ("1", "true", "yes")
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
    except ValueError:
        raise UsageError(f"{name}: cannot parse {raw!r}") from None
    return raw


def parse_config_text(text: str) -> dict:
    out = {}
    for n, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {n}: expected key=value")
        k, v = (s.strip() for s in line.split("=", 1))
        if k not in DEFAULTS:
            raise UsageError(f"config line {n}: unknown key {k!r}")
        out[k] = _coerce(k, v)
    return out


def resolve_config(config_path, overrides: dict) -> dict:
    cfg = dict(DEFAULTS)
    if config_path:
        try:
            cfg.update(parse_config_text(Path(config_path).read_text()))
        except OSError as exc:
            raise UsageError(f"cannot read config: {exc}") from None
    for k, v in overrides.items():
        if v is not None:
            cfg[k] = _coerce(k, str(v))
    return cfg


def format_config(cfg: dict) -> str:
    return "".join(f"{k.name}={cfg[k.name]}\n" for k in KEYS)


# -- derived configs and paths ----------------------------------------------------------------

def data_config(cfg) -> DataConfig:
    return DataConfig(image_size=cfg["image_size"], duration_s=cfg["duration_s"], rate_hz=cfg["rate_hz"],
                      difficulty_min=cfg["difficulty_min"], difficulty_max=cfg["difficulty_max"],
                      abnormal_p=cfg["abnormal_p"], T_h=cfg["T_h"], T=cfg["T"], stride=cfg["stride"])


def curation_config(cfg) -> CurationConfig:
    return CurationConfig(v_stop=cfg["v_stop"], theta_turn=cfg["theta_turn"], omega_max=cfg["omega_max"],
                          v_back=cfg["v_back"], n_abn=cfg["n_abn"], straight_cap=cfg["straight_cap"])


def policy_config(cfg) -> PolicyConfig:
    return PolicyConfig(T_h=cfg["T_h"], T=cfg["T"], rate_hz=cfg["rate_hz"], M=cfg["M"], C=cfg["C"],
                        n_layers=cfg["n_layers"], n_heads=cfg["n_heads"], image_size=cfg["image_size"],
                        patch_px=cfg["patch_px"], ffn_mult=cfg["ffn_mult"], time_dim=cfg["time_dim"],
                        lam=cfg["lam"], w_psi=cfg["w_psi"], goal_mask_p=cfg["goal_mask_p"],
                        token_mask_p=cfg["token_mask_p"], heads=cfg["heads"], ego_states=bool(cfg["ego_states"]))


def train_config(cfg) -> TrainConfig:
    return TrainConfig(steps=cfg["steps"], steps_per_epoch=cfg["steps_per_epoch"], batch_size=cfg["batch_size"],
                       lr0=cfg["lr0"], momentum=cfg["momentum"], optimizer=cfg["optimizer"],
                       grad_clip=cfg["grad_clip"], weight_decay=cfg["weight_decay"])


def eval_config(cfg) -> EvalConfig:
    return EvalConfig(match_time_s=cfg["match_time_s"], match_radius_m=cfg["match_radius_m"],
                      nms_top_k=cfg["nms_top_k"], nms_radius_m=cfg["nms_radius_m"], rate_hz=cfg["rate_hz"])


class Paths:
    def __init__(self, cfg):
        w = Path(cfg["work_dir"])
        self.work = w
        self.scenarios = {"train": w / "scenarios" / "train", "test": w / "scenarios" / "test"}
        self.samples = {"train": w / "samples" / "train", "test": w / "samples" / "test"}
        self.expanded = w / cfg["expanded_name"]
        self.anchors = w / "anchors.txt"
        self.model = w / cfg["model_name"]
        self.reports = w / "reports"


def _scenario_seeds(cfg, split):
    if split == "train":
        return list(range(cfg["n_scenarios"]))
    return [cfg["eval_seed_offset"] + i for i in range(cfg["n_eval_scenarios"])]


def _bundles(root: Path):
    if not root.is_dir():
        raise EmptyInput(f"{root}: no scenario bundles; run `mimic gen` first")
    dirs = sorted(p for p in root.iterdir() if (p / "manifest.txt").exists())
    if not dirs:
        raise EmptyInput(f"{root}: no scenario bundles; run `mimic gen` first")
    return dirs


def _load_store(path: Path):
    samples = read_store(path)
    if not samples:
        raise EmptyInput(f"{path}: sample store is empty")
    return samples


# -- commands -----------------------------------------------------------------------------------

def cmd_gen(cfg, args, out):
    paths = Paths(cfg)
    dc = data_config(cfg)
    cam = default_camera(dc.image_size)
    for split in ("train", "test"):
        root = paths.scenarios[split]
        if root.exists():
            shutil.rmtree(root)
        root.mkdir(parents=True)
        boxes = 0
        for s in _scenario_seeds(cfg, split):
            lg = generate_log(s, dc, cam)
            write_scenario_bundle(root / f"{s:05d}", lg.scenario, lg.rgb, lg.depth)
            boxes += len(lg.scenario.world.boxes)
        out(f"{split}: {len(_scenario_seeds(cfg, split))} scenarios, {boxes} obstacles -> {root}")


def _curate_split(cfg, split):
    paths = Paths(cfg)
    logs = []
    for d in _bundles(paths.scenarios[split]):
        sc, v, omega, rgb, depth = read_scenario_bundle(d)
        logs.append((int(d.name), sc.expert, v, omega, sc.camera.feature_vector,
                     np.round(rgb * 255.0).astype(np.uint8), depth))
    return curate(logs, cfg["T_h"], cfg["T"], cfg["stride"], cfg["seed"], curation_config(cfg))


def cmd_curate(cfg, args, out):
    paths = Paths(cfg)
    for split in ("train", "test"):
        samples, report = _curate_split(cfg, split)
        _replace_store(paths.samples[split], samples)
        (paths.samples[split] / "report.txt").write_text(report.format() + "\n")
        out(f"[{split}] {len(samples)} samples -> {paths.samples[split]}")
        out(report.format())


def _replace_store(root: Path, samples):
    if root.exists():
        shutil.rmtree(root)
    write_store(root, samples)


def cmd_expand(cfg, args, out):
    paths = Paths(cfg)
    samples = _load_store(paths.samples["train"])
    cam = default_camera(cfg["image_size"])
    corrective, relight = bool(cfg["corrective"]), bool(cfg["relight"])
    new, stats = expand_samples(samples, cam, seed=cfg["seed"], corrective=corrective, relight_set=relight,
                                alpha_range=(cfg["alpha_min"], cfg["alpha_max"]), p_lateral=cfg["p_lateral"],
                                c_min=cfg["c_min"], splat_px=cfg["splat_px"], d_split=cfg["d_split"])
    merged = list(samples) + new
    _replace_store(paths.expanded, merged)
    rows = []
    for i, s in enumerate(merged):
        src = s.meta.get("source_id", s.sample_id) if s.provenance != "original" else s.sample_id
        rows.append((s.sample_id, src, s.provenance, s.meta.get("side", 1) * s.meta.get("alpha", 0.0),
                     s.meta.get("direction", "none"),
                     f"arrays.npy#{i}", f"index.jsonl#{i}"))
    write_manifest(paths.expanded / "manifest.txt", rows)
    counts = {}
    for s in merged:
        counts[s.provenance] = counts.get(s.provenance, 0) + 1
    out(f"expanded store: {len(merged)} samples " + " ".join(f"{k}={v}" for k, v in sorted(counts.items()))
        + f" low_coverage={stats.low_coverage} -> {paths.expanded}")


def _training_store(cfg):
    paths = Paths(cfg)
    if (paths.expanded / "index.jsonl").exists():
        return paths.expanded
    return paths.samples["train"]


def cmd_anchors(cfg, args, out):
    paths = Paths(cfg)
    samples = [s for s in _load_store(paths.samples["train"]) if s.provenance == "original"]
    sets = build_anchor_sets([s.future for s in samples], cfg["M"], cfg["seed"], cfg["kmeans_max_iter"])
    paths.work.mkdir(parents=True, exist_ok=True)
    write_anchor_sets(paths.anchors, sets)
    out(f"{len(sets)} anchor sets of {cfg['M']} from {len(samples)} futures -> {paths.anchors}")


def _anchors(cfg):
    paths = Paths(cfg)
    if not paths.anchors.exists():
        raise EmptyInput(f"{paths.anchors}: no anchors; run `mimic anchors` first")
    return read_anchor_sets(paths.anchors)


def cmd_train(cfg, args, out):
    paths = Paths(cfg)
    pcfg = policy_config(cfg)
    store = _training_store(cfg)
    samples = _load_store(store)
    anchors = _anchors(cfg)
    params, curve = train(samples, pcfg, anchors, train_config(cfg), cfg["seed"])
    paths.model.mkdir(parents=True, exist_ok=True)
    save_params(paths.model / "policy.mnet", params)
    (paths.model / "policy.cfg").write_text(pcfg.to_text())
    (paths.model / "curve.txt").write_text(format_curve(curve))
    out(f"trained on {len(samples)} samples from {store}; final loss {curve[-1].total:.6f} -> {paths.model}")


def _load_model(cfg):
    paths = Paths(cfg)
    ck = paths.model / "policy.mnet"
    if not ck.exists():
        raise EmptyInput(f"{ck}: no checkpoint; run `mimic train` first")
    side = paths.model / "policy.cfg"
    pcfg = PolicyConfig.from_text(side.read_text()) if side.exists() else policy_config(cfg)
    params = load_params(ck, init_params(pcfg, 0))
    return pcfg, params


def cmd_eval(cfg, args, out):
    paths = Paths(cfg)
    pcfg, params = _load_model(cfg)
    anchors = _anchors(cfg)
    test = [s for s in _load_store(paths.samples["test"]) if s.provenance == "original"]
    split = args.split
    if split == "recovery":
        test, _ = expand_samples(test, default_camera(cfg["image_size"]), seed=cfg["recovery_seed"],
                                 corrective=True, relight_set=False,
                                 alpha_range=(cfg["alpha_min"], cfg["alpha_max"]), p_lateral=cfg["p_lateral"],
                                 c_min=cfg["c_min"], splat_px=cfg["splat_px"])
        if not test:
            raise EmptyInput("recovery split is empty")
    report = evaluate_model(params, pcfg, anchors, test, eval_config(cfg))
    paths.reports.mkdir(parents=True, exist_ok=True)
    name = f"eval_{cfg['model_name']}_{split}.txt"
    (paths.reports / name).write_text(report.format())
    out(report.format().rstrip())


def cmd_rollout(cfg, args, out):
    paths = Paths(cfg)
    pcfg, params = _load_model(cfg)
    anchors = _anchors(cfg)
    policy = model_policy(params, pcfg, anchors)
    lines = ["# scenario max_dev mean_dev reached steps"]
    devs = []
    for d in _bundles(paths.scenarios["test"])[:cfg["rollout_scenarios"]]:
        sc, *_ = read_scenario_bundle(d, load_frames=False)
        res = rollout(policy, sc, T_h=pcfg.T_h, controller_step_s=cfg["controller_step_s"],
                      init_offset_m=cfg["rollout_offset_m"])
        devs.append(res.max_deviation)
        lines.append(f"{d.name} {res.max_deviation:.6f} {res.mean_deviation:.6f} {int(res.goal_reached)} {res.steps}")
    lines.append(f"mean_max_dev={np.mean(devs):.6f} n={len(devs)}")
    paths.reports.mkdir(parents=True, exist_ok=True)
    text = "\n".join(lines) + "\n"
    (paths.reports / f"rollout_{cfg['model_name']}.txt").write_text(text)
    out(text.rstrip())


def cmd_report(cfg, args, out):
    paths = Paths(cfg)
    if not paths.reports.is_dir():
        raise EmptyInput(f"{paths.reports}: nothing to report; run `mimic eval` first")
    rows = ["# name minADE_1s minFDE_1s mAP L2_2s n"]
    for f in sorted(paths.reports.glob("eval_*.txt")):
        kv = dict(tok.split("=", 1) for tok in f.read_text().splitlines()[-1].split())
        rows.append(f"{f.stem[5:]} {kv['minADE']} {kv['minFDE']} {kv['mAP']} {kv.get('L2_2s', 'NA')} {kv['n']}")
    for f in sorted(paths.reports.glob("rollout_*.txt")):
        rows.append(f"{f.stem} " + f.read_text().splitlines()[-1])
    if len(rows) == 1:
        raise EmptyInput(f"{paths.reports}: no eval or rollout reports")
    text = "\n".join(rows) + "\n"
    (paths.work / "summary.txt").write_text(text)
    out(text.rstrip())


COMMANDS = {
    "gen": (cmd_gen, "render scenario bundles for the train and held-out splits"),
    "curate": (cmd_curate, "window, filter and balance logs into sample stores"),
    "expand": (cmd_expand, "add corrective and/or relit samples to the training store"),
    "anchors": (cmd_anchors, "cluster training futures into per-horizon anchors"),
    "train": (cmd_train, "train the policy and write a checkpoint"),
    "eval": (cmd_eval, "open-loop metrics on the held-out split"),
    "rollout": (cmd_rollout, "closed-loop lateral deviation on held-out scenarios"),
    "report": (cmd_report, "collect eval and rollout reports into one table"),
}


def _keys_epilog() -> str:
    return "config keys (default):\n" + "\n".join(f"  {k.name}={k.default}  {k.help}" for k in KEYS)


EXPAND_FLAGS = ("corrective", "relight")


def _common(exclude=()) -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="key=value config file")
    grp = common.add_argument_group("config overrides")
    for k in KEYS:
        if k.name not in exclude:
            grp.add_argument(f"--{k.name}", dest=f"key_{k.name}", default=None, metavar="V",
                             help=f"{k.help} (default: {k.default})")
    return common


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mimic", description=__doc__.splitlines()[0],
                                     epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        exclude = EXPAND_FLAGS if name == "expand" else ()
        p = sub.add_parser(name, parents=[_common(exclude)], help=help_text, description=help_text,
                           epilog=_keys_epilog(), formatter_class=argparse.RawDescriptionHelpFormatter)
        if name == "expand":
            # on/off switches for the two expansion sets, overriding the config keys
            for key in EXPAND_FLAGS:
                p.add_argument(f"--{key}", dest=f"key_{key}", action=argparse.BooleanOptionalAction,
                               default=None, help=f"{DEFAULTS_HELP[key]} (default: {DEFAULTS[key]})")
        if name == "eval":
            p.add_argument("--split", choices=("regular", "recovery"), default="regular")
    return parser


def main(argv=None, out=print) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    overrides = {k.name: getattr(args, f"key_{k.name}", None) for k in KEYS}
    overrides = {k: int(v) if isinstance(v, bool) else v for k, v in overrides.items()}
    try:
        cfg = resolve_config(args.config, overrides)
    except UsageError as exc:
        print(f"mimic: {exc}", file=sys.stderr)
        return 2
    try:
        COMMANDS[args.command][0](cfg, args, out)
    except UsageError as exc:
        print(f"mimic: {exc}", file=sys.stderr)
        return 2
    except (MimicError, OSError, ValueError) as exc:
        print(f"mimic {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
