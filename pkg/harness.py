# harness.py
# Meta-training, accelerated training and speedup reports
# -------------------------------------------------------------
# Features
# - nowcaster registry: adam (none), linefit, linefit+, wnn, wnn+, nino, nino-naive
# - collect: base-optimizer trajectories into a TrajectoryStore
# - meta_train: AdamW + cosine decay on sampled windows, resumable
#   safetensors checkpoints
# - accelerated_train: base optimizer with a nowcast every c*stride steps,
#   horizon from k-decay, optimizer moments carried through untouched
# - time_to_target / build_report: median steps-to-target and reduction
# - embed_export: per-nowcast graph embeddings with PCA coordinates
# -------------------------------------------------------------

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Dict, List, Optional, Protocol, Sequence

import numpy as np
import pandas as pd
import torch
from sklearn.decomposition import PCA

from baselines import WnnModel, linefit_predict, linefitplus_predict, wnn_loss
from errors import InvalidSpecError, NonFiniteLossError, TrajectoryError
from neural_graph import ArchSpec, NeuralGraphTemplate, ParameterWindow, build_template, graph_inverse
from nino_model import (
    NinoConfig,
    NinoModel,
    collate,
    dms_loss,
    graph_to_data,
    k_decay,
    read_checkpoint,
    save_checkpoint,
    scaled_graph,
)
from scaling import fit_scaler
from task_zoo import Task, TaskSpec, build_task, evaluate, get_flat, make_optimizer, reached, set_flat, train_steps
from trajectory_store import RunManifest, TrajectoryDataset, TrajectoryStore, WindowSample

logger = logging.getLogger(__name__)

METHODS = ("adam", "linefit", "linefit+", "wnn", "wnn+", "nino", "nino-naive")
BASE_METHOD = "adam"
META_CHECKPOINT = "meta.safetensors"
META_STATE = "meta_state.pt"


# =========================
# Nowcasters
# =========================
class Nowcaster(Protocol):
    name: str

    def predict(self, window: ParameterWindow, k: int, arch: ArchSpec) -> np.ndarray:
        """Predicted flat parameters k strides past the newest state."""


class ZeroNowcaster:
    """Predicts no change."""

    name = "zero"

    def predict(self, window: ParameterWindow, k: int, arch: ArchSpec) -> np.ndarray:
        return window.latest.copy()


class LinefitNowcaster:
    def __init__(self, plus: bool = False) -> None:
        self.plus = plus
        self.name = "linefit+" if plus else "linefit"

    def predict(self, window: ParameterWindow, k: int, arch: ArchSpec) -> np.ndarray:
        return (linefitplus_predict if self.plus else linefit_predict)(window)


class WnnNowcaster:
    """WNN (min-max scaling, one horizon of c strides) or WNN+ (layerwise, K horizons)."""

    def __init__(self, model: WnnModel, scaling: str = "minmax", name: str = "wnn") -> None:
        self.model = model
        self.scaling = scaling
        self.name = name

    def config(self) -> dict:
        return {"kind": "wnn", "name": self.name, "scaling": self.scaling,
                "context": self.model.context, "hidden": self.model.head.in_features,
                "outputs": self.model.outputs}

    def _scaled(self, window: ParameterWindow, arch: ArchSpec):
        scaler = fit_scaler(self.scaling, window, arch.param_groups())
        return scaler, torch.from_numpy(scaler.scale(window.values)).float()

    def _column(self, k: int) -> int:
        return 0 if self.model.outputs == 1 else min(k, self.model.outputs) - 1

    @torch.no_grad()
    def predict(self, window: ParameterWindow, k: int, arch: ArchSpec) -> np.ndarray:
        scaler, x = self._scaled(window, arch)
        out = self.model(x)[:, self._column(k)].double().numpy()
        return window.latest + scaler.unscale_delta(out)

    def embedding(self, window: ParameterWindow, arch: ArchSpec) -> np.ndarray:
        _, x = self._scaled(window, arch)
        return self.model.embedding(x).numpy()

    def sample_loss(self, samples: Sequence[WindowSample], archs: Sequence[ArchSpec]) -> torch.Tensor:
        xs, ys, masks = [], [], []
        K, c = self.model.outputs, self.model.context
        for s, arch in zip(samples, archs):
            scaler, x = self._scaled(s.context, arch)
            deltas = scaler.scale_delta(s.targets)
            n = deltas.shape[0]
            y = np.zeros((n, K), dtype=np.float32)
            m = np.zeros((n, K), dtype=bool)
            if K == 1:
                if s.k_avail >= c:
                    y[:, 0], m[:, 0] = deltas[:, c - 1], True
            else:
                k_avail = min(K, s.k_avail)
                y[:, :k_avail], m[:, :k_avail] = deltas[:, :k_avail], True
            xs.append(x)
            ys.append(torch.from_numpy(y))
            masks.append(torch.from_numpy(m))
        pred = self.model(torch.cat(xs))
        return wnn_loss(pred, torch.cat(ys), torch.cat(masks))


class NinoNowcaster:
    def __init__(self, model: NinoModel, mode: str = "ours", scaling: str = "layerwise",
                 name: str = "nino") -> None:
        self.model = model
        self.mode = mode
        self.scaling = scaling
        self.name = name
        self._templates: Dict[str, NeuralGraphTemplate] = {}

    def config(self) -> dict:
        return {"kind": "nino", "name": self.name, "mode": self.mode, "scaling": self.scaling,
                "nino": self.model.cfg.to_dict()}

    def template(self, arch: ArchSpec) -> NeuralGraphTemplate:
        key = arch.hash()
        if key not in self._templates:
            self._templates[key] = build_template(arch, self.mode, with_lpe=self.model.cfg.use_lpe)
        return self._templates[key]

    def _data(self, window: ParameterWindow, arch: ArchSpec, targets: Optional[np.ndarray] = None):
        template = self.template(arch)
        scaler = fit_scaler(self.scaling, window, template.param_groups)
        graph = scaled_graph(template, window, scaler)
        deltas = None if targets is None else scaler.scale_delta(targets)
        return graph_to_data(graph, self.model.cfg, deltas), scaler, template

    @torch.no_grad()
    def predict(self, window: ParameterWindow, k: int, arch: ArchSpec) -> np.ndarray:
        data, scaler, template = self._data(window, arch)
        k = min(max(k, 1), self.model.cfg.horizon)
        edges = self.model.predict_horizon(data, k).double().numpy()
        delta = graph_inverse(template, edges[:, :template.edge_dim])
        return window.latest + scaler.unscale_delta(delta)

    @torch.no_grad()
    def embedding(self, window: ParameterWindow, arch: ArchSpec) -> np.ndarray:
        data, _, _ = self._data(window, arch)
        return self.model.graph_embedding(data)[0].numpy()

    def sample_loss(self, samples: Sequence[WindowSample], archs: Sequence[ArchSpec]) -> torch.Tensor:
        batch = collate(self._data(s.context, a, s.targets)[0] for s, a in zip(samples, archs))
        return dms_loss(self.model(batch), batch.y, batch.y_mask)


def new_nowcaster(method: str, nino_cfg: Optional[NinoConfig] = None, scaling: Optional[str] = None):
    """Freshly initialized learnable nowcaster for meta-training."""
    cfg = nino_cfg or NinoConfig()
    if method == "wnn":
        return WnnNowcaster(WnnModel(cfg.context, cfg.hidden, 1), scaling or "minmax", "wnn")
    if method == "wnn+":
        return WnnNowcaster(WnnModel(cfg.context, cfg.hidden, cfg.horizon), scaling or "layerwise", "wnn+")
    if method in ("nino", "nino-naive"):
        mode = "naive" if method == "nino-naive" else "ours"
        return NinoNowcaster(NinoModel(cfg), mode, scaling or "layerwise", method)
    raise InvalidSpecError(f"method '{method}' has no learnable meta-model")


def load_nowcaster(path: Path):
    tensors, meta = read_checkpoint(Path(path))
    conf = json.loads(meta["config"])
    if conf["kind"] == "wnn":
        model = WnnModel(conf["context"], conf["hidden"], conf["outputs"])
        model.load_state_dict(tensors)
        return WnnNowcaster(model, conf["scaling"], conf["name"])
    model = NinoModel(NinoConfig.from_dict(conf["nino"]))
    model.load_state_dict(tensors)
    return NinoNowcaster(model, conf["mode"], conf["scaling"], conf["name"])


def make_nowcaster(method: str, checkpoint: Optional[Path] = None):
    if method not in METHODS:
        raise InvalidSpecError(f"unknown method '{method}', expected one of {METHODS}")
    if method == BASE_METHOD:
        return None
    if method in ("linefit", "linefit+"):
        return LinefitNowcaster(plus=method == "linefit+")
    if checkpoint is None:
        raise InvalidSpecError(f"method '{method}' needs a meta-model checkpoint")
    nowcaster = load_nowcaster(checkpoint)
    if nowcaster.name != method:
        logger.warning("checkpoint %s holds '%s', used as '%s'", checkpoint, nowcaster.name, method)
        nowcaster.name = method
    return nowcaster


# =========================
# Trajectory collection
# =========================
def collect(spec: TaskSpec, store: TrajectoryStore, seeds: Sequence[int], stride: int = 200,
            root: Optional[str] = None) -> List[str]:
    """Train with the base optimizer and store a checkpoint every stride steps."""
    run_ids = []
    for seed in seeds:
        run_id = f"{spec.task_id}-s{seed}"
        if run_id in store.runs():
            if store.manifest(run_id).final_loss is None:
                raise TrajectoryError(f"run '{run_id}' in {store.root} is incomplete; delete it and collect again")
            logger.info("run %s already collected, skipping", run_id)
            run_ids.append(run_id)
            continue
        task = build_task(spec, root, seed)
        store.create_run(RunManifest(
            run_id=run_id, task_id=spec.task_id, arch_hash=task.arch.hash(),
            num_params=task.arch.num_params, optimizer=spec.optimizer, lr=spec.lr,
            weight_decay=spec.weight_decay, batch_size=spec.batch_size, stride=stride,
            total_steps=spec.total_steps, seed=seed, arch=task.arch.to_dict()))
        opt = make_optimizer(task)
        loss = float("nan")
        for t in range(stride, spec.total_steps + 1, stride):
            loss = train_steps(task, opt, stride, t - stride)[-1]
            store.record_checkpoint(run_id, t, get_flat(task.model).numpy())
        store.finish_run(run_id, loss)
        logger.info("collected %s: %d checkpoints, final loss %.4f",
                    run_id, len(store.manifest(run_id).steps), loss)
        run_ids.append(run_id)
    return run_ids


# =========================
# Meta-training
# =========================
@dataclass
class MetaConfig:
    iterations: int = 20_000
    lr: float = 3e-3
    weight_decay: float = 0.01
    batch_size: int = 4
    save_every: int = 1000
    log_every: int = 100
    seed: int = 0
    resume: bool = True


def _archs(dataset: TrajectoryDataset, samples: Sequence[WindowSample]) -> List[ArchSpec]:
    return [ArchSpec.from_dict(dataset.store.manifest(s.run_id).arch) for s in samples]


def meta_train(nowcaster, dataset: TrajectoryDataset, cfg: MetaConfig,
               out_dir: Optional[Path] = None, stop_at: Optional[int] = None) -> List[float]:
    """Train a WNN/NiNo nowcaster; returns the loss of every iteration so far.

    stop_at ends this call early (the cosine schedule still spans
    cfg.iterations); a later call with resume picks up from the saved state.
    """
    model = nowcaster.model
    opt = torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=cfg.iterations)
    rng = np.random.default_rng(cfg.seed)
    start, losses, last_good = 0, [], None
    ckpt = state_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        ckpt, state_path = out_dir / META_CHECKPOINT, out_dir / META_STATE
        if cfg.resume and ckpt.is_file() and state_path.is_file():
            tensors, _ = read_checkpoint(ckpt)
            model.load_state_dict(tensors)
            state = torch.load(state_path, weights_only=False)
            opt.load_state_dict(state["optimizer"])
            sched.load_state_dict(state["scheduler"])
            rng.bit_generator.state = state["rng"]
            torch.set_rng_state(state["torch_rng"])
            start, losses, last_good = state["iteration"], list(state["losses"]), str(ckpt)
            logger.info("resumed meta-training at iteration %d from %s", start, ckpt)

    end = cfg.iterations if stop_at is None else min(stop_at, cfg.iterations)
    model.train()
    for it in range(start, end):
        samples = dataset.sample_batch(rng, cfg.batch_size)
        loss = nowcaster.sample_loss(samples, _archs(dataset, samples))
        value = float(loss.detach())
        if not math.isfinite(value):
            raise NonFiniteLossError(it + 1, value, last_good)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        sched.step()
        losses.append(value)
        if (it + 1) % cfg.log_every == 0:
            logger.info("meta %s it=%d loss=%.5f lr=%.2e", nowcaster.name, it + 1, value, sched.get_last_lr()[0])
        if ckpt is not None and ((it + 1) % cfg.save_every == 0 or it + 1 == end):
            save_checkpoint(model, ckpt, nowcaster.config(), {"iteration": str(it + 1)})
            torch.save({"optimizer": opt.state_dict(), "scheduler": sched.state_dict(),
                        "rng": rng.bit_generator.state, "torch_rng": torch.get_rng_state(),
                        "iteration": it + 1, "losses": losses}, state_path)
            pd.DataFrame({"iteration": np.arange(1, len(losses) + 1), "loss": losses}).to_csv(
                out_dir / "meta_losses.csv", index=False)
            last_good = str(ckpt)
    return losses


# =========================
# Accelerated training
# =========================
@dataclass
class AccelConfig:
    context: int = 5
    stride: int = 200
    k_power: float = 2.0
    horizon: int = 40
    total_steps: Optional[int] = None       # defaults to the task's T
    eval_every: Optional[int] = None        # defaults to the task's cadence
    stop_at_target: bool = False


@dataclass
class NowcastEvent:
    step: int
    k: int
    applied: bool
    optimizer_before: str
    optimizer_after: str


@dataclass
class RunTrace:
    task_id: str
    method: str
    seed: int
    metric: str
    target: float
    steps: List[int] = field(default_factory=list)
    values: List[float] = field(default_factory=list)
    events: List[NowcastEvent] = field(default_factory=list)
    losses: List[float] = field(default_factory=list)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"task": self.task_id, "method": self.method, "seed": self.seed,
                             "metric": self.metric, "target": self.target,
                             "step": self.steps, "value": self.values})


def optimizer_digest(opt: torch.optim.Optimizer) -> str:
    """sha256 over every state tensor (moments, step counts) in parameter order."""
    h = hashlib.sha256()
    for group in opt.param_groups:
        for p in group["params"]:
            state = opt.state.get(p, {})
            for key in sorted(state):
                h.update(key.encode("utf-8"))
                h.update(torch.as_tensor(state[key]).detach().cpu().numpy().tobytes())
    return h.hexdigest()


def nowcast_steps(total_steps: int, context: int, stride: int) -> List[int]:
    period = context * stride
    return list(range(period, total_steps, period))


def accelerated_train(task: Task, nowcaster: Optional[Nowcaster], cfg: AccelConfig, method: str = "",
                      on_window: Optional[Callable[[int, ParameterWindow], None]] = None) -> RunTrace:
    """Base optimizer with a nowcast at every multiple of c*stride (never at 0 or T)."""
    T = cfg.total_steps or task.spec.total_steps
    eval_every = cfg.eval_every or task.spec.eval_every
    period = cfg.context * cfg.stride
    name = method or (nowcaster.name if nowcaster is not None else BASE_METHOD)
    trace = RunTrace(task.spec.task_id, name, task.seed, task.spec.metric, task.spec.target)
    opt = make_optimizer(task)
    states: List[np.ndarray] = []
    steps: List[int] = []

    for t in range(1, T + 1):
        trace.losses += train_steps(task, opt, 1, t - 1)
        if t % cfg.stride == 0:
            states.append(get_flat(task.model).numpy())
            steps.append(t)
        if nowcaster is not None and t % period == 0 and t < T:
            window = ParameterWindow.from_oldest_first(states[-cfg.context:], steps[-cfg.context:], cfg.stride)
            if on_window is not None:
                on_window(t, window)
            k = k_decay(t, T, cfg.horizon, cfg.k_power)
            before = optimizer_digest(opt)
            pred = nowcaster.predict(window, k, task.arch)
            applied = bool(np.all(np.isfinite(pred)))
            if applied:
                set_flat(task.model, torch.from_numpy(np.asarray(pred)))
                logger.info("nowcast %s step=%d k=%d", name, t, k)
            else:
                logger.warning("nowcast %s step=%d k=%d skipped: non-finite prediction", name, t, k)
            trace.events.append(NowcastEvent(t, k, applied, before, optimizer_digest(opt)))
            states, steps = [], []
        if t % eval_every == 0 or t == T:
            value = evaluate(task)
            trace.steps.append(t)
            trace.values.append(value)
            if cfg.stop_at_target and reached(task.spec.metric, value, task.spec.target):
                break
    return trace


def save_trace(trace: RunTrace, root: Path) -> Path:
    folder = Path(root) / "traces" / trace.task_id / trace.method
    folder.mkdir(parents=True, exist_ok=True)
    path = folder / f"seed{trace.seed}.csv"
    trace.to_frame().to_csv(path, index=False)
    (folder / f"seed{trace.seed}.events.json").write_text(
        json.dumps([asdict(e) for e in trace.events], indent=1))
    return path


def load_traces(root: Path) -> pd.DataFrame:
    files = sorted((Path(root) / "traces").glob("*/*/seed*.csv"))
    if not files:
        raise TrajectoryError(f"no traces found under {root}")
    return pd.concat([pd.read_csv(f) for f in files], ignore_index=True)


# =========================
# Reports
# =========================
def time_to_target(steps: Sequence[int], values: Sequence[float], target: float, metric: str) -> float:
    for s, v in zip(steps, values):
        if reached(metric, v, target):
            return float(s)
    return math.inf


def median_steps(times: Sequence[float]) -> float:
    """Median over runs that reach the target; inf unless a strict majority do."""
    finite = [t for t in times if math.isfinite(t)]
    if len(finite) * 2 <= len(times):
        return math.inf
    return float(np.median(finite))


def reduction(base: float, method: float) -> float:
    if not (math.isfinite(base) and math.isfinite(method)) or base <= 0:
        return math.nan
    return (base - method) / base * 100.0


@dataclass
class SpeedupReport:
    table: pd.DataFrame

    def render(self, fmt: str = "text") -> str:
        if fmt == "csv":
            return self.table.to_csv(index=False)
        return self.table.to_string(index=False, float_format=lambda v: f"{v:.1f}")


def build_report(traces: pd.DataFrame) -> SpeedupReport:
    """One row per (task, method) with medians and reduction vs the base optimizer."""
    rows = []
    for (task_id, method), df in traces.groupby(["task", "method"], sort=True):
        metric, target = df["metric"].iloc[0], float(df["target"].iloc[0])
        times = [time_to_target(g["step"], g["value"], target, metric) for _, g in df.groupby("seed")]
        rows.append({"task": task_id, "metric": metric, "target": target, "method": method,
                     "seeds": len(times), "reached": sum(math.isfinite(t) for t in times),
                     "median_steps": median_steps(times)})
    table = pd.DataFrame(rows)
    base = {r["task"]: r["median_steps"] for r in rows if r["method"] == BASE_METHOD}
    table["base_median_steps"] = table["task"].map(lambda t: base.get(t, math.nan))
    table["reduction_pct"] = [reduction(b, m) for b, m in zip(table["base_median_steps"], table["median_steps"])]
    table["status"] = np.where(np.isfinite(table["median_steps"]), "ok", "failed")
    return SpeedupReport(table)


# =========================
# Embedding export
# =========================
def embed_export(task: Task, nowcaster, cfg: AccelConfig, out_csv: Path) -> pd.DataFrame:
    """Graph (or WNN+) embeddings at every nowcast plus 2-D PCA coordinates."""
    if not hasattr(nowcaster, "embedding"):
        raise InvalidSpecError(f"method '{nowcaster.name}' has no embedding")
    rows: List[dict] = []

    def grab(step: int, window: ParameterWindow) -> None:
        emb = nowcaster.embedding(window, task.arch)
        rows.append({"task": task.spec.task_id, "seed": task.seed, "step": step,
                     **{f"emb_{i}": float(v) for i, v in enumerate(emb)}})

    accelerated_train(task, nowcaster, cfg, on_window=grab)
    df = pd.DataFrame(rows)
    if len(df) >= 2:
        emb_cols = [c for c in df.columns if c.startswith("emb_")]
        coords = PCA(n_components=2).fit_transform(df[emb_cols].to_numpy())
        df["pca_x"], df["pca_y"] = coords[:, 0], coords[:, 1]
    out_csv = Path(out_csv)
    out_csv.parent.mkdir(parents=True, exist_ok=True)
    df.to_csv(out_csv, index=False)
    logger.info("wrote %d embeddings to %s", len(df), out_csv)
    return df
