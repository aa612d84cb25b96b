# trajectory_store.py
# On-disk optimizer trajectories and window sampling
# -------------------------------------------------------------
# Layout (public contract):
#   <root>/<run_id>/manifest.json        run record, rewritten atomically
#   <root>/<run_id>/<step:08d>.f32       flat parameters, little-endian float32
# Files are written to a temp name and renamed into place, so a crash
# never leaves a manifest pointing at a partial checkpoint.
# -------------------------------------------------------------

from __future__ import annotations

import dataclasses
import functools
import hashlib
import json
import logging
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from errors import TrajectoryError
from neural_graph import ParameterWindow

logger = logging.getLogger(__name__)

MANIFEST = "manifest.json"
CKPT_DTYPE = np.dtype("<f4")
CACHED_CHECKPOINTS = 64


def checkpoint_name(step: int) -> str:
    return f"{step:08d}.f32"


def _atomic_write(path: Path, payload: bytes) -> None:
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(payload)
        fh.flush()
        os.fsync(fh.fileno())
    os.replace(tmp, path)


# =========================
# Records
# =========================
@dataclass
class RunManifest:
    run_id: str
    task_id: str
    arch_hash: str
    num_params: int
    optimizer: str = "adam"
    lr: float = 1e-3
    weight_decay: float = 0.0
    batch_size: int = 128
    stride: int = 200
    total_steps: int = 0
    seed: int = 0
    steps: List[int] = field(default_factory=list)
    checksums: Dict[str, str] = field(default_factory=dict)
    final_loss: Optional[float] = None
    arch: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "RunManifest":
        return cls(**json.loads(text))


@dataclass(frozen=True, eq=False)
class WindowSample:
    context: ParameterWindow      # c states, most recent first
    targets: np.ndarray           # [n, K_avail] theta_{tau+k*stride} - theta_tau
    run_id: str
    tau: int                      # step of the newest context state

    @property
    def k_avail(self) -> int:
        return int(self.targets.shape[1])


# =========================
# Store
# =========================
class TrajectoryStore:
    """Single writer per run; any number of readers."""

    def __init__(self, root: Path) -> None:
        self.root = Path(root)
        self._manifests: Dict[str, RunManifest] = {}

    def run_dir(self, run_id: str) -> Path:
        return self.root / run_id

    def runs(self) -> List[str]:
        if not self.root.is_dir():
            return []
        return sorted(p.name for p in self.root.iterdir() if (p / MANIFEST).is_file())

    def create_run(self, manifest: RunManifest) -> None:
        d = self.run_dir(manifest.run_id)
        if (d / MANIFEST).exists():
            raise TrajectoryError(f"run '{manifest.run_id}' already exists in {self.root}")
        d.mkdir(parents=True, exist_ok=True)
        manifest.steps, manifest.checksums = [], {}
        self._write_manifest(manifest)
        logger.info("created run %s (%s, %d params)", manifest.run_id, manifest.task_id, manifest.num_params)

    def manifest(self, run_id: str) -> RunManifest:
        if run_id not in self._manifests:
            path = self.run_dir(run_id) / MANIFEST
            if not path.is_file():
                raise TrajectoryError(f"no manifest for run '{run_id}' at {path}")
            self._manifests[run_id] = RunManifest.from_json(path.read_text())
        return self._manifests[run_id]

    def _write_manifest(self, manifest: RunManifest) -> None:
        _atomic_write(self.run_dir(manifest.run_id) / MANIFEST, manifest.to_json().encode("utf-8"))
        self._manifests[manifest.run_id] = manifest

    def record_checkpoint(self, run_id: str, step: int, theta: np.ndarray) -> None:
        m = self.manifest(run_id)
        if step % m.stride != 0:
            raise TrajectoryError(f"step {step} is not a multiple of stride {m.stride}")
        if m.steps and step <= m.steps[-1]:
            kind = "duplicate" if step in m.steps else "out-of-order"
            raise TrajectoryError(f"{kind} checkpoint step {step} for run '{run_id}' (last {m.steps[-1]})")
        theta = np.asarray(theta)
        if theta.ndim != 1 or theta.shape[0] != m.num_params:
            raise TrajectoryError(f"checkpoint has shape {theta.shape}, run expects {m.num_params} parameters")
        payload = theta.astype(CKPT_DTYPE).tobytes()
        _atomic_write(self.run_dir(run_id) / checkpoint_name(step), payload)
        m.steps.append(int(step))
        m.checksums[str(step)] = hashlib.sha256(payload).hexdigest()
        self._write_manifest(m)

    def finish_run(self, run_id: str, final_loss: float) -> None:
        m = self.manifest(run_id)
        m.final_loss = float(final_loss)
        self._write_manifest(m)

    def load_checkpoint(self, run_id: str, step: int) -> np.ndarray:
        m = self.manifest(run_id)
        path = self.run_dir(run_id) / checkpoint_name(step)
        if step not in m.steps or not path.is_file():
            raise TrajectoryError(f"checkpoint {path} not recorded")
        theta = np.fromfile(path, dtype=CKPT_DTYPE)
        if theta.shape[0] != m.num_params:
            raise TrajectoryError(f"{path}: {theta.shape[0]} values, expected {m.num_params}")
        return theta

    def load_run(self, run_id: str) -> np.ndarray:
        """All checkpoints of a run, [num_checkpoints, n], oldest first."""
        m = self.manifest(run_id)
        return np.stack([self.load_checkpoint(run_id, s) for s in m.steps])


def verify(root: Path) -> List[str]:
    """Every problem found under root, each naming the offending file."""
    root = Path(root)
    problems: List[str] = []
    store = TrajectoryStore(root)
    run_ids = store.runs()
    if not run_ids:
        return [f"{root}: no runs found"]
    for run_id in run_ids:
        path = store.run_dir(run_id) / MANIFEST
        try:
            m = store.manifest(run_id)
        except (ValueError, TypeError) as exc:
            problems.append(f"{path}: unreadable manifest ({exc})")
            continue
        prev = None
        for step in m.steps:
            ck = store.run_dir(run_id) / checkpoint_name(step)
            if step % m.stride != 0 or (prev is not None and step <= prev):
                problems.append(f"{ck}: step {step} breaks stride/order")
            prev = step
            if not ck.is_file():
                problems.append(f"{ck}: missing")
                continue
            payload = ck.read_bytes()
            if len(payload) != m.num_params * CKPT_DTYPE.itemsize:
                problems.append(f"{ck}: size {len(payload)} bytes, expected {m.num_params * CKPT_DTYPE.itemsize}")
            elif hashlib.sha256(payload).hexdigest() != m.checksums.get(str(step)):
                problems.append(f"{ck}: checksum mismatch")
        recorded = {checkpoint_name(s) for s in m.steps}
        for f in sorted(store.run_dir(run_id).glob("*.f32")):
            if f.name not in recorded:
                problems.append(f"{f}: not listed in manifest")
    return problems


# =========================
# Windows
# =========================
class TrajectoryDataset:
    """Uniform sampling over every valid (run, tau) pair of a store."""

    def __init__(self, store: TrajectoryStore, context: int = 5, horizon: int = 40,
                 run_ids: Optional[Sequence[str]] = None, cache_size: int = CACHED_CHECKPOINTS) -> None:
        self.store = store
        self.context = context
        self.horizon = horizon
        self.run_ids = list(run_ids) if run_ids is not None else store.runs()
        # float32 checkpoints, keyed by (run_id, step)
        self._checkpoint = functools.lru_cache(maxsize=cache_size)(store.load_checkpoint)
        self.positions: List[Tuple[str, int]] = []
        for run_id in self.run_ids:
            count = len(store.manifest(run_id).steps)
            if count < context + 1:
                logger.debug("run %s too short (%d checkpoints) for context %d", run_id, count, context)
                continue
            self.positions += [(run_id, i) for i in range(context - 1, count - 1)]
        if not self.positions:
            raise TrajectoryError(f"no run in {store.root} has {context + 1} or more checkpoints")

    def __len__(self) -> int:
        return len(self.positions)

    def window_at(self, run_id: str, i: int) -> WindowSample:
        """Window ending at checkpoint i; reads only checkpoints i-c+1 .. i+K_avail."""
        m = self.store.manifest(run_id)
        c = self.context
        k_avail = min(self.horizon, len(m.steps) - 1 - i)
        steps = m.steps[i - c + 1:i + 1 + k_avail]
        rows = np.stack([self._checkpoint(run_id, s) for s in steps]).astype(np.float64)
        window = ParameterWindow.from_oldest_first(list(rows[:c]), steps[:c], m.stride)
        targets = (rows[c:] - rows[c - 1]).T
        return WindowSample(window, targets, run_id, m.steps[i])

    def sample_window(self, rng: np.random.Generator) -> WindowSample:
        run_id, i = self.positions[int(rng.integers(len(self.positions)))]
        return self.window_at(run_id, i)

    def sample_batch(self, rng: np.random.Generator, batch_size: int) -> List[WindowSample]:
        """Independent draws; a batch may mix runs of different tasks."""
        return [self.sample_window(rng) for _ in range(batch_size)]

    def iter_windows(self, seed: int, count: int) -> Iterator[WindowSample]:
        rng = np.random.default_rng(seed)
        for _ in range(count):
            yield self.sample_window(rng)
