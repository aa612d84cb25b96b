# nino_model.py
# NiNo: graph-network nowcaster over neural graphs
# -------------------------------------------------------------
# Pipeline for one window:
#   scale layerwise -> attach to template -> embed nodes/edges
#   -> M message-passing layers (FiLM messages, mean aggregation,
#      edge updates) -> DMS head: K scaled deltas per edge channel
#   -> graph_inverse + unscale_delta -> parameter delta for horizon k
# -------------------------------------------------------------

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Optional, Tuple

import numpy as np
import torch
import torch.nn as nn
from safetensors import safe_open
from safetensors.torch import save_file
from torch_geometric.data import Batch, Data
from torch_geometric.nn import MessagePassing
from torch_geometric.utils import scatter

from baselines import horizon_mae
from errors import InvalidSpecError, ShapeError
from neural_graph import (
    LPE_DIM,
    EdgeType,
    NeuralGraph,
    NodeRole,
    NeuralGraphTemplate,
    ParameterWindow,
    attach_window,
)
from scaling import _AffineScaler

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
INIT_RANGE = 1e-3    # half-width of the uniform init of the DMS weights


# =========================
# Config
# =========================
@dataclass
class NinoConfig:
    hidden: int = 128           # D
    depth: int = 3              # M
    context: int = 5            # c
    horizon: int = 40           # K
    k_power: float = 2.0        # p
    edge_dim: int = 9           # padded channels per edge (3x3 kernels)
    num_edge_types: int = len(EdgeType)
    max_word_pos: int = 1024
    stride: int = 200
    use_node_role: bool = True
    use_lpe: bool = True
    use_word_pos: bool = True
    use_edge_type: bool = True

    def validate(self) -> None:
        problems = [f"{name} must be >= 1" for name in ("hidden", "depth", "context", "horizon", "edge_dim")
                    if getattr(self, name) < 1]
        if self.k_power < 0:
            problems.append("k_power must be >= 0")
        if self.context < 2:
            problems.append("context must be >= 2")
        if problems:
            raise InvalidSpecError("; ".join(problems))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "NinoConfig":
        return cls(**d)


# =========================
# Graph -> torch_geometric Data
# =========================
def pad_slots(template: NeuralGraphTemplate, edge_dim: int) -> np.ndarray:
    if template.edge_dim > edge_dim:
        raise ShapeError(f"graph needs {template.edge_dim} edge channels, model has {edge_dim}")
    slot = np.full((template.num_edges, edge_dim), -1, dtype=np.int64)
    slot[:, :template.edge_dim] = template.edge_slot
    return slot


def scaled_graph(template: NeuralGraphTemplate, window: ParameterWindow, scaler: _AffineScaler) -> NeuralGraph:
    """Attach the scaled window; auxiliary edges keep their constant 1."""
    scaled = ParameterWindow(scaler.scale(window.values), window.steps, window.stride)
    return attach_window(template, scaled)


def graph_to_data(graph: NeuralGraph, cfg: NinoConfig,
                  scaled_deltas: Optional[np.ndarray] = None) -> Data:
    """Tensors for one graph; optional targets are scaled deltas [n, K_avail]."""
    t = graph.template
    feats = graph.edge_attr
    if feats.shape[2] != cfg.context:
        raise ShapeError(f"graph has {feats.shape[2]} states, config expects context {cfg.context}")
    slot = pad_slots(t, cfg.edge_dim)
    padded = np.zeros((t.num_edges, cfg.edge_dim, cfg.context), dtype=np.float32)
    padded[:, :t.edge_dim] = feats
    data = Data(
        edge_index=torch.from_numpy(t.edge_index).long(),
        edge_attr=torch.from_numpy(padded.reshape(t.num_edges, -1)),
        edge_type=torch.from_numpy(t.edge_type).long(),
        role=torch.from_numpy(t.node_role.astype(np.int64)),
        lpe=torch.from_numpy(graph.lpe.astype(np.float32)),
        wpos=torch.from_numpy(np.minimum(graph.word_pos, cfg.max_word_pos)).long(),
        num_nodes=t.num_nodes,
    )
    if scaled_deltas is not None:
        k_avail = min(scaled_deltas.shape[1], cfg.horizon)
        valid = slot >= 0
        y = np.zeros((t.num_edges, cfg.edge_dim, cfg.horizon), dtype=np.float32)
        mask = np.zeros_like(y, dtype=bool)
        y[valid, :k_avail] = scaled_deltas[slot[valid], :k_avail]
        mask[valid, :k_avail] = True
        data.y = torch.from_numpy(y)
        data.y_mask = torch.from_numpy(mask)
    return data


def collate(items) -> Batch:
    """Mixed-architecture batch; edge indices are offset per graph."""
    return Batch.from_data_list(list(items))


# =========================
# Layers
# =========================
def _mlp(d_in: int, d: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(d_in, d), nn.SiLU(), nn.Linear(d, d))


class NinoLayer(MessagePassing):
    """One message-passing layer with edge updates.

    Every stored edge sends a message to its destination with the forward
    parameter set and to its source with the reverse set, so q and k
    directions stay distinguishable. Edges are updated from the
    aggregated node states of this layer.
    """

    def __init__(self, hidden: int) -> None:
        super().__init__(aggr="mean")
        self.msg_fwd = _mlp(2 * hidden, hidden)
        self.msg_rev = _mlp(2 * hidden, hidden)
        self.scale_fwd = _mlp(hidden, hidden)
        self.scale_rev = _mlp(hidden, hidden)
        self.shift_fwd = _mlp(hidden, hidden)
        self.shift_rev = _mlp(hidden, hidden)
        self.node_fn = _mlp(hidden, hidden)
        self.edge_fn = _mlp(3 * hidden, hidden)

    def forward(self, v: torch.Tensor, e: torch.Tensor, edge_index: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        both = torch.cat([edge_index, edge_index.flip(0)], dim=1)
        v_new = self.propagate(both, v=v, e=e, size=(v.size(0), v.size(0)))
        src, dst = edge_index
        e_new = self.edge_fn(torch.cat([v_new[src], e, v_new[dst]], dim=-1))
        return v_new, e_new

    def message(self, v_i: torch.Tensor, v_j: torch.Tensor, e: torch.Tensor) -> torch.Tensor:
        # v_i receives, v_j sends; first half are stored directions
        n = e.size(0)
        fwd = self.scale_fwd(e) * self.msg_fwd(torch.cat([v_i[:n], v_j[:n]], -1)) + self.shift_fwd(e)
        rev = self.scale_rev(e) * self.msg_rev(torch.cat([v_i[n:], v_j[n:]], -1)) + self.shift_rev(e)
        return torch.cat([fwd, rev], dim=0)

    def update(self, aggr_out: torch.Tensor) -> torch.Tensor:
        return self.node_fn(aggr_out)


class NinoModel(nn.Module):
    def __init__(self, cfg: NinoConfig) -> None:
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        D = cfg.hidden
        self.lpe_proj = nn.Linear(LPE_DIM, D, bias=False)
        self.role_embed = nn.Embedding(len(NodeRole), D)
        self.wpos_embed = nn.Embedding(cfg.max_word_pos + 1, D, padding_idx=0)
        self.edge_proj = nn.Linear(cfg.edge_dim * cfg.context, D, bias=False)
        self.type_embed = nn.Embedding(cfg.num_edge_types, D)
        self.layers = nn.ModuleList(NinoLayer(D) for _ in range(cfg.depth))
        self.dms = nn.Linear(D, cfg.edge_dim * cfg.horizon)
        nn.init.uniform_(self.dms.weight, -INIT_RANGE, INIT_RANGE)
        nn.init.zeros_(self.dms.bias)

    def embed(self, data: Data) -> Tuple[torch.Tensor, torch.Tensor]:
        if data.edge_attr.size(1) != self.cfg.edge_dim * self.cfg.context:
            raise ShapeError(f"edge features of width {data.edge_attr.size(1)}, "
                             f"expected {self.cfg.edge_dim * self.cfg.context}")
        v = self.lpe_proj.weight.new_zeros(data.num_nodes, self.cfg.hidden)
        if self.cfg.use_node_role:
            v = v + self.role_embed(data.role)
        if self.cfg.use_lpe:
            v = v + self.lpe_proj(data.lpe)
        if self.cfg.use_word_pos:
            v = v + self.wpos_embed(data.wpos)
        e = self.edge_proj(data.edge_attr)
        if self.cfg.use_edge_type:
            e = e + self.type_embed(data.edge_type)
        return v, e

    def encode(self, data: Data) -> torch.Tensor:
        """Last-layer edge features [E, D]."""
        v, e = self.embed(data)
        for layer in self.layers:
            v, e = layer(v, e, data.edge_index)
        return e

    def dms_head(self, e: torch.Tensor) -> torch.Tensor:
        """[E, edge_dim, K] scaled deltas, horizons in increasing order."""
        return self.dms(e).view(e.size(0), self.cfg.edge_dim, self.cfg.horizon)

    def forward(self, data: Data) -> torch.Tensor:
        return self.dms_head(self.encode(data))

    def predict_horizon(self, data: Data, k: int) -> torch.Tensor:
        """Only horizon k (1-based) of the DMS head, [E, edge_dim]."""
        if not 1 <= k <= self.cfg.horizon:
            raise InvalidSpecError(f"horizon {k} outside 1..{self.cfg.horizon}")
        e = self.encode(data)
        rows = torch.arange(self.cfg.edge_dim, device=e.device) * self.cfg.horizon + (k - 1)
        return e @ self.dms.weight[rows].T + self.dms.bias[rows]

    def graph_embedding(self, data: Data) -> torch.Tensor:
        """Mean last-layer edge feature per graph, [num_graphs, D]."""
        e = self.encode(data)
        batch = getattr(data, "batch", None)
        if batch is None:
            return e.mean(dim=0, keepdim=True)
        edge_batch = batch[data.edge_index[0]]
        return scatter(e, edge_batch, dim=0, dim_size=data.num_graphs, reduce="mean")


# =========================
# Loss and schedule
# =========================
def dms_loss(pred: torch.Tensor, target: torch.Tensor, mask: Optional[torch.Tensor] = None) -> torch.Tensor:
    """Mean over horizons of masked MAE on scaled deltas; pred/target [E, edge_dim, K]."""
    K = pred.size(-1)
    flat_mask = None if mask is None else mask.reshape(-1, K)
    return horizon_mae(pred.reshape(-1, K), target.reshape(-1, K), flat_mask)


def k_decay(t: int, T: int, K: int, p: float) -> int:
    """Horizon k = clamp(round(K((T-t)/T)^p), 1, K), halves rounded up."""
    if T <= 0:
        raise InvalidSpecError(f"total steps T must be positive, got {T}")
    if not 0 <= t <= T:
        raise InvalidSpecError(f"step {t} outside [0, {T}]")
    k = math.floor(K * ((T - t) / T) ** p + 0.5)
    return int(min(max(k, 1), K))


# =========================
# Checkpoints
# =========================
def save_checkpoint(model: nn.Module, path: Path, config: dict, extra: Optional[Dict[str, str]] = None) -> None:
    """Named tensors in safetensors; config manifest in the header metadata."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    metadata = {"version": str(CHECKPOINT_VERSION), "config": json.dumps(config, sort_keys=True)}
    metadata.update(extra or {})
    tensors = {k: v.detach().contiguous().cpu() for k, v in model.state_dict().items()}
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_file(tensors, str(tmp), metadata=metadata)
    tmp.replace(path)
    logger.info("saved checkpoint %s", path)


def read_checkpoint(path: Path) -> Tuple[Dict[str, torch.Tensor], Dict[str, str]]:
    if not Path(path).is_file():
        raise InvalidSpecError(f"checkpoint {path} not found; run meta-train first or pass --checkpoint")
    with safe_open(str(path), framework="pt") as f:
        meta = f.metadata() or {}
        tensors = {k: f.get_tensor(k) for k in f.keys()}
    if meta.get("version") != str(CHECKPOINT_VERSION):
        raise ShapeError(f"{path}: unsupported checkpoint version {meta.get('version')}")
    return tensors, meta

