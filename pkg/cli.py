# cli.py
# Command line for the nowcasting toolkit
# -------------------------------------------------------------
# Subcommands
# - collect       base-optimizer trajectories into the trajectory store
# - meta-train    fit a WNN / WNN+ / NiNo nowcaster on stored windows
# - accelerate    train a task with a nowcast every c*stride steps
# - report        median steps-to-target and reduction vs Adam
# - symcheck      attention-permutation separability experiment
# - embed-export  per-nowcast graph embeddings (+ PCA coordinates)
# - verify        checksum / layout check of a trajectory store
#
# Configuration: configs/default.yaml (OmegaConf) merged over the
# built-in defaults, then NOWCAST_DATA_ROOT, then flags. One process
# handles one set of seeds; parallel seeds are separate invocations
# writing separate files.
# -------------------------------------------------------------

from __future__ import annotations

import argparse
import dataclasses
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence

from omegaconf import OmegaConf
from omegaconf.errors import OmegaConfBaseException

from errors import ConfigError, InvalidSpecError, NowcastError
from harness import (
    BASE_METHOD,
    META_CHECKPOINT,
    METHODS,
    AccelConfig,
    MetaConfig,
    accelerated_train,
    build_report,
    collect,
    embed_export,
    load_traces,
    make_nowcaster,
    meta_train,
    new_nowcaster,
    save_trace,
    time_to_target,
)
from nino_model import NinoConfig
from scaling import SCALER_KINDS
from symmetry_lab import export_csv, results_frame, run_experiment
from task_zoo import DATA_ROOT_ENV, TASKS, TaskSpec, build_task
from trajectory_store import TrajectoryDataset, TrajectoryStore, verify

logger = logging.getLogger("cli")

DEFAULT_CONFIG = Path(__file__).resolve().parent / "configs" / "default.yaml"
LOG_FORMAT = "%(asctime)s %(levelname)s %(name)s: %(message)s"
SHARED_KEYS = ("context", "horizon", "k_power", "stride")     # live under `accelerate`
FIXED_NINO_KEYS = ("num_edge_types",)
LEARNED_METHODS = ("wnn", "wnn+", "nino", "nino-naive")


# =========================
# Configuration
# =========================
def default_config() -> dict:
    nino = NinoConfig()
    accel = AccelConfig()
    return {
        "tasks": [],
        "nino": {k: v for k, v in dataclasses.asdict(nino).items()
                 if k not in SHARED_KEYS + FIXED_NINO_KEYS},
        "wnn": {"hidden": nino.hidden},
        "meta": dataclasses.asdict(MetaConfig()),
        "accelerate": {
            "context": accel.context,
            "stride": accel.stride,
            "k_power": accel.k_power,
            "horizon": accel.horizon,
            "method": "nino",
            "scaling": None,            # None: the method's own default
            "total_steps": None,
            "eval_every": None,
            "stop_at_target": False,
        },
        "seeds": [0, 1, 2],
        "output_root": "runs",
        "data_root": None,
    }


@dataclass
class RunConfig:
    tasks: Dict[str, TaskSpec]
    nino: NinoConfig
    wnn_hidden: int
    meta: MetaConfig
    accel: AccelConfig
    method: str
    scaling: Optional[str]
    seeds: List[int]
    output_root: Path
    data_root: Optional[str] = None

    def task(self, task_id: str) -> TaskSpec:
        if task_id not in self.tasks:
            raise ConfigError([f"unknown task '{task_id}', known: {', '.join(sorted(self.tasks))}"])
        return self.tasks[task_id]

    def store_root(self) -> Path:
        return self.output_root / "store"

    def meta_dir(self, method: str) -> Path:
        return self.output_root / "meta" / method


def unknown_keys(user: dict, defaults: dict, prefix: str = "") -> List[str]:
    problems = []
    for key, value in user.items():
        path = f"{prefix}{key}"
        if key not in defaults:
            problems.append(f"unknown key '{path}'")
        elif isinstance(value, dict) and isinstance(defaults[key], dict):
            problems += unknown_keys(value, defaults[key], path + ".")
    return problems


def _task_specs(entries: Sequence[dict], problems: List[str]) -> Dict[str, TaskSpec]:
    """Registry tasks, overridden or extended by config entries keyed on task_id."""
    tasks = dict(TASKS)
    known = {f.name for f in dataclasses.fields(TaskSpec)}
    for i, entry in enumerate(entries):
        if not isinstance(entry, dict) or "task_id" not in entry:
            problems.append(f"tasks[{i}]: needs a task_id")
            continue
        extra = sorted(set(entry) - known)
        if extra:
            problems.append(f"tasks[{i}]: unknown key(s) {', '.join(extra)}")
            continue
        fields = dict(entry)
        if "channels" in fields:
            fields["channels"] = tuple(fields["channels"])
        try:
            if fields["task_id"] in tasks:
                spec = dataclasses.replace(tasks[fields["task_id"]], **fields)
            else:
                spec = TaskSpec(**fields)
        except TypeError as exc:
            problems.append(f"tasks[{i}]: {exc}")
            continue
        problems += spec.validate()
        tasks[spec.task_id] = spec
    return tasks


def _at_least(problems: List[str], name: str, value, minimum: float, allow_none: bool = False) -> None:
    if value is None and allow_none:
        return
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        problems.append(f"{name} must be a number, got {value!r}")
    elif value < minimum:
        problems.append(f"{name} must be >= {minimum:g}")


def build_run_config(raw: dict) -> RunConfig:
    """Validate a merged config dict; every problem is reported in one ConfigError."""
    defaults = default_config()
    problems = unknown_keys(raw, defaults)
    tasks = _task_specs(raw.get("tasks") or [], problems)

    def section(name: str) -> dict:
        return {k: v for k, v in raw[name].items() if k in defaults[name]}

    acc, meta_raw, nino_raw = section("accelerate"), section("meta"), section("nino")
    for key in ("horizon", "stride"):
        _at_least(problems, f"accelerate.{key}", acc[key], 1)
    _at_least(problems, "accelerate.k_power", acc["k_power"], 0)
    for key in ("total_steps", "eval_every"):
        _at_least(problems, f"accelerate.{key}", acc[key], 1, allow_none=True)
    if acc["method"] not in METHODS:
        problems.append(f"accelerate.method '{acc['method']}' not in {', '.join(METHODS)}")
    if acc["scaling"] is not None and acc["scaling"] not in SCALER_KINDS:
        problems.append(f"accelerate.scaling '{acc['scaling']}' not in {', '.join(SCALER_KINDS)}")
    for key in ("hidden", "depth", "edge_dim", "max_word_pos"):
        _at_least(problems, f"nino.{key}", nino_raw[key], 1)
    _at_least(problems, "accelerate.context", acc["context"], 2)
    for key in ("iterations", "batch_size", "save_every", "log_every"):
        _at_least(problems, f"meta.{key}", meta_raw[key], 1)
    _at_least(problems, "meta.lr", meta_raw["lr"], 1e-12)
    _at_least(problems, "meta.weight_decay", meta_raw["weight_decay"], 0)
    _at_least(problems, "wnn.hidden", raw["wnn"].get("hidden"), 1)
    seeds = list(raw["seeds"] or [])
    if not seeds or not all(isinstance(s, int) and not isinstance(s, bool) and s >= 0 for s in seeds):
        problems.append("seeds must be a non-empty list of non-negative integers")

    if problems:
        for p in dict.fromkeys(problems):
            logger.error("config: %s", p)
        raise ConfigError(dict.fromkeys(problems))
    nino = NinoConfig(**nino_raw, **{k: acc[k] for k in SHARED_KEYS})
    accel = AccelConfig(context=acc["context"], stride=acc["stride"], k_power=acc["k_power"],
                        horizon=acc["horizon"], total_steps=acc["total_steps"],
                        eval_every=acc["eval_every"], stop_at_target=bool(acc["stop_at_target"]))
    return RunConfig(tasks, nino, raw["wnn"]["hidden"], MetaConfig(**meta_raw), accel, acc["method"],
                     acc["scaling"], seeds, Path(raw["output_root"]), raw["data_root"])


def flag_overrides(args: argparse.Namespace) -> dict:
    """Flags that were given, as a nested dict in config layout."""
    out: dict = {}

    def put(section: Optional[str], key: str, value) -> None:
        if value is None:
            return
        (out.setdefault(section, {}) if section else out)[key] = value

    put("accelerate", "context", args.context)
    put("accelerate", "k_power", args.k_power)
    put("accelerate", "stride", args.stride)
    put("accelerate", "scaling", args.scaling)
    put("accelerate", "method", getattr(args, "method", None))
    put("nino", "depth", args.depth)
    put("nino", "hidden", args.width)
    put("wnn", "hidden", args.width)
    for flag, key in (("no_node_role", "use_node_role"), ("no_lpe", "use_lpe"),
                      ("no_word_pos", "use_word_pos"), ("no_edge_type", "use_edge_type")):
        if getattr(args, flag):
            put("nino", key, False)
    if args.seed is not None:
        out["seeds"] = list(args.seed)
    put(None, "output_root", args.output_root)
    put(None, "data_root", args.data_root)
    return out


def load_config(path: Optional[Path], overrides: Optional[dict] = None) -> RunConfig:
    """Defaults < YAML file < NOWCAST_DATA_ROOT < flag overrides."""
    base = OmegaConf.create(default_config())
    layers = [base]
    if path is not None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError([f"config file {path} not found"])
        user = OmegaConf.to_container(OmegaConf.load(path), resolve=True) or {}
        if not isinstance(user, dict):
            raise ConfigError([f"{path}: top level must be a mapping"])
        layers.append(OmegaConf.create(user))
    env_root = os.environ.get(DATA_ROOT_ENV)
    if env_root:
        layers.append(OmegaConf.create({"data_root": env_root}))
    if overrides:
        layers.append(OmegaConf.create(overrides))
    try:
        raw = OmegaConf.to_container(OmegaConf.merge(*layers), resolve=True)
    except OmegaConfBaseException as exc:
        raise ConfigError([f"cannot merge config: {exc}"]) from exc
    return build_run_config(raw)


# =========================
# Subcommands
# =========================
def cmd_collect(cfg: RunConfig, args: argparse.Namespace) -> int:
    store = TrajectoryStore(Path(args.store) if args.store else cfg.store_root())
    for task_id in args.task:
        run_ids = collect(cfg.task(task_id), store, cfg.seeds, cfg.accel.stride, cfg.data_root)
        print(f"{task_id}: {len(run_ids)} run(s) in {store.root}")
    return 0


def _nino_for(cfg: RunConfig, method: str) -> NinoConfig:
    if method in ("wnn", "wnn+"):
        return dataclasses.replace(cfg.nino, hidden=cfg.wnn_hidden)
    return cfg.nino


def cmd_meta_train(cfg: RunConfig, args: argparse.Namespace) -> int:
    method = args.method or cfg.method
    if method not in LEARNED_METHODS:
        raise InvalidSpecError(f"meta-train needs one of {', '.join(LEARNED_METHODS)}, got '{method}'")
    store = TrajectoryStore(Path(args.store) if args.store else cfg.store_root())
    dataset = TrajectoryDataset(store, cfg.accel.context, cfg.accel.horizon, args.runs)
    nowcaster = new_nowcaster(method, _nino_for(cfg, method), cfg.scaling)
    meta = cfg.meta if args.iterations is None else dataclasses.replace(cfg.meta, iterations=args.iterations)
    out_dir = Path(args.out) if args.out else cfg.meta_dir(method)
    losses = meta_train(nowcaster, dataset, meta, out_dir)
    print(f"{method}: {len(losses)} iterations, final loss {losses[-1]:.6f}, checkpoint {out_dir / META_CHECKPOINT}")
    return 0


def _checkpoint(cfg: RunConfig, method: str, given: Optional[str]) -> Optional[Path]:
    if given:
        return Path(given)
    if method in LEARNED_METHODS:
        return cfg.meta_dir(method) / META_CHECKPOINT
    return None


def cmd_accelerate(cfg: RunConfig, args: argparse.Namespace) -> int:
    method = cfg.method
    spec = cfg.task(args.task)
    nowcaster = make_nowcaster(method, _checkpoint(cfg, method, args.checkpoint))
    if nowcaster is None:
        logger.info("method %s: plain base-optimizer run", BASE_METHOD)
    for seed in cfg.seeds:
        task = build_task(spec, cfg.data_root, seed)
        trace = accelerated_train(task, nowcaster, cfg.accel, method)
        path = save_trace(trace, cfg.output_root)
        steps = time_to_target(trace.steps, trace.values, spec.target, spec.metric)
        print(f"{spec.task_id} {method} seed={seed}: final {spec.metric} {trace.values[-1]:.3f}, "
              f"steps to target {steps:g}, trace {path}")
    return 0


def cmd_report(cfg: RunConfig, args: argparse.Namespace) -> int:
    report = build_report(load_traces(cfg.output_root))
    print(report.render(args.format), end="" if args.format == "csv" else "\n")
    return 0


def cmd_symcheck(cfg: RunConfig, args: argparse.Namespace) -> int:
    seed = cfg.seeds[0]
    results = run_experiment(args.d, args.heads, args.perms, seed,
                             hidden=args.hidden, depth=args.embed_depth, with_coords=args.coords)
    out = Path(args.out) if args.out else cfg.output_root / "symmetry" / f"symcheck-s{seed}.csv"
    export_csv(results, out)
    print(results_frame(results).to_string(index=False, float_format=lambda v: f"{v:.1f}"))
    return 0


def cmd_embed_export(cfg: RunConfig, args: argparse.Namespace) -> int:
    method = cfg.method
    nowcaster = make_nowcaster(method, _checkpoint(cfg, method, args.checkpoint))
    if nowcaster is None or not hasattr(nowcaster, "embedding"):
        raise InvalidSpecError(f"method '{method}' has no embedding to export")
    spec = cfg.task(args.task)
    for seed in cfg.seeds:
        out = cfg.output_root / "embeddings" / f"{spec.task_id}-{method}-s{seed}.csv"
        df = embed_export(build_task(spec, cfg.data_root, seed), nowcaster, cfg.accel, out)
        print(f"{spec.task_id} {method} seed={seed}: {len(df)} embeddings in {out}")
    return 0


def cmd_verify(cfg: RunConfig, args: argparse.Namespace) -> int:
    root = Path(args.store) if args.store else cfg.store_root()
    problems = verify(root)
    for p in problems:
        print(p)
    if problems:
        logger.error("%d problem(s) in %s", len(problems), root)
        return 1
    print(f"{root}: ok")
    return 0


# =========================
# Parser
# =========================
def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", default=None, help=f"YAML config (default: {DEFAULT_CONFIG.name} if present)")
    p.add_argument("--output-root", default=None)
    p.add_argument("--data-root", default=None, help=f"dataset cache (env: {DATA_ROOT_ENV})")
    p.add_argument("--seed", type=int, nargs="+", default=None, help="one or more seeds")
    p.add_argument("--context", type=int, default=None, help="context length c")
    p.add_argument("--stride", type=int, default=None, help="steps between stored states")
    p.add_argument("--k-power", type=float, default=None, help="horizon decay power p")
    p.add_argument("--depth", type=int, default=None, help="message-passing layers")
    p.add_argument("--width", type=int, default=None, help="hidden width D")
    p.add_argument("--scaling", choices=SCALER_KINDS, default=None)
    p.add_argument("--no-node-role", action="store_true")
    p.add_argument("--no-lpe", action="store_true")
    p.add_argument("--no-word-pos", action="store_true")
    p.add_argument("--no-edge-type", action="store_true")
    p.add_argument("--log-level", default="INFO", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("-v", "--verbose", action="store_true", help="same as --log-level DEBUG")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cli.py", description="Parameter nowcasting toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("collect", help="store base-optimizer trajectories")
    p.add_argument("--task", nargs="+", required=True)
    p.add_argument("--store", default=None)
    p.set_defaults(func=cmd_collect)

    p = sub.add_parser("meta-train", help="train a learned nowcaster")
    p.add_argument("--method", choices=LEARNED_METHODS, default=None)
    p.add_argument("--store", default=None)
    p.add_argument("--runs", nargs="+", default=None, help="restrict to these run ids")
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_meta_train)

    p = sub.add_parser("accelerate", help="train a task with periodic nowcasts")
    p.add_argument("--task", required=True)
    p.add_argument("--method", choices=METHODS, default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_accelerate)

    p = sub.add_parser("report", help="speedup table from saved traces")
    p.add_argument("--format", choices=["text", "csv"], default="text")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("symcheck", help="attention-permutation separability")
    p.add_argument("--d", type=int, default=12)
    p.add_argument("--heads", type=int, default=4)
    p.add_argument("--perms", type=int, default=1000)
    p.add_argument("--hidden", type=int, default=32, help="width of the random embedding network")
    p.add_argument("--embed-depth", type=int, default=3, help="layers of the random embedding network")
    p.add_argument("--coords", action="store_true", help="also write PCA coordinates")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_symcheck)

    p = sub.add_parser("embed-export", help="per-nowcast graph embeddings")
    p.add_argument("--task", required=True)
    p.add_argument("--method", choices=("wnn+", "nino", "nino-naive"), default=None)
    p.add_argument("--checkpoint", default=None)
    p.set_defaults(func=cmd_embed_export)

    p = sub.add_parser("verify", help="check a trajectory store")
    p.add_argument("--store", default=None)
    p.set_defaults(func=cmd_verify)

    for action in sub.choices.values():
        _common(action)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.DEBUG if args.verbose else getattr(logging, args.log_level)
    logging.basicConfig(level=level, format=LOG_FORMAT, force=True)
    config_path = Path(args.config) if args.config else (DEFAULT_CONFIG if DEFAULT_CONFIG.is_file() else None)
    try:
        cfg = load_config(config_path, flag_overrides(args))
        return args.func(cfg, args)
    except NowcastError as exc:
        logger.error("%s", exc)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
