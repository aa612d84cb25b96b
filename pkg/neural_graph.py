# neural_graph.py
# Neural graphs of parameter vectors
# -------------------------------------------------------------
# Features
# - ArchSpec / LayerSpec: ordered layer descriptors (linear, conv, embedding,
#   layernorm, msa, residual) with the flat parameter layout torch uses
# - build_template: static typed graph, "ours" (head-aware MSA) or "naive"
# - attach_window / graph_inverse: parameters <-> edge features, exact
# - compute_lpe / word_positions: time-invariant node features
# - permute_nodes / is_isomorphic / template_manifest: testing and export
# -------------------------------------------------------------

from __future__ import annotations

import dataclasses
import hashlib
import json
import logging
from dataclasses import dataclass
from enum import IntEnum
from typing import Dict, List, Optional, Sequence, Tuple

import networkx as nx
import numpy as np
import scipy.linalg
import scipy.sparse as sp
from scipy.sparse.csgraph import connected_components
from scipy.sparse.linalg import eigsh

from errors import InvalidSpecError, ShapeError, UnsupportedArchitectureError

logger = logging.getLogger(__name__)

# --------------------------- Constants ---------------------------

LAYER_KINDS = ("linear", "conv", "embedding", "layernorm", "msa", "residual")
GRAPH_MODES = ("ours", "naive")
LPE_DIM = 8                     # eigenvectors kept per node
DENSE_LPE_MAX_NODES = 2000      # above this, sparse shift-invert eigsh
TRIVIAL_EIG_TOL = 1e-8          # eigenvalues below this are component indicators
LPE_SHIFT = -1e-3               # shift-invert target just below the spectrum
DEFAULT_STRIDE = 200            # optimizer steps between stored states


class EdgeType(IntEnum):
    LINEAR_W = 0
    CONV_W = 1
    BIAS = 2
    EMBED_W = 3
    LM_HEAD_W = 4
    NORM_SCALE = 5
    MSA_Q = 6
    MSA_K = 7
    MSA_V = 8
    MSA_O = 9
    RESIDUAL = 10
    HEAD_LINK = 11


class NodeRole(IntEnum):
    NEURON = 0
    BIAS = 1
    HEAD = 2
    NORM = 3
    EMBEDDING_ROW = 4


# --------------------------- Architecture specs ---------------------------

@dataclass(frozen=True)
class LayerSpec:
    kind: str
    fan_in: int
    fan_out: int
    h: int = 1
    w: int = 1
    heads: int = 1
    bias: bool = True
    source: int = -1          # residual: layer index whose output is added back
    accumulate: bool = False  # embedding added onto the running hidden state
    lm_head: bool = False     # linear producing vocabulary logits
    tied: bool = False        # lm head sharing the token embedding table
    name: str = ""


@dataclass(frozen=True)
class ParamEntry:
    layer: int
    name: str
    shape: Tuple[int, ...]
    offset: int

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _param_names(layer: LayerSpec) -> List[Tuple[str, Tuple[int, ...]]]:
    d_in, d_out = layer.fan_in, layer.fan_out
    if layer.kind == "linear":
        if layer.tied:
            return []
        out = [("weight", (d_out, d_in))]
        return out + [("bias", (d_out,))] if layer.bias else out
    if layer.kind == "conv":
        out = [("weight", (d_out, d_in, layer.h, layer.w))]
        return out + [("bias", (d_out,))] if layer.bias else out
    if layer.kind == "embedding":
        return [("weight", (d_in, d_out))]
    if layer.kind == "layernorm":
        out = [("weight", (d_out,))]
        return out + [("bias", (d_out,))] if layer.bias else out
    if layer.kind == "msa":
        out = []
        for proj in ("q", "k", "v", "o"):
            out.append((f"{proj}.weight", (d_out, d_in)))
            if layer.bias:
                out.append((f"{proj}.bias", (d_out,)))
        return out
    if layer.kind == "residual":
        return []
    raise UnsupportedArchitectureError(f"unsupported layer kind '{layer.kind}'")


@dataclass(frozen=True)
class ArchSpec:
    """Ordered layer descriptors of one network, in torch parameter order."""

    layers: Tuple[LayerSpec, ...]
    name: str = ""
    activation: str = "relu"

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", tuple(self.layers))

    def validate(self) -> None:
        width: Optional[int] = None
        out_widths: List[int] = []
        vocab_of_embedding: Optional[int] = None
        for idx, layer in enumerate(self.layers):
            where = f"layer {idx} ({layer.kind})"
            if layer.kind not in LAYER_KINDS:
                raise UnsupportedArchitectureError(f"{where}: unsupported layer kind")
            if layer.fan_in < 1 or layer.fan_out < 1:
                raise InvalidSpecError(f"{where}: fan-in/fan-out must be positive")
            if layer.kind != "conv" and (layer.h != 1 or layer.w != 1):
                raise InvalidSpecError(f"{where}: kernel h=w=1 required for non-conv layers")
            if layer.kind == "embedding":
                if layer.accumulate:
                    if width is None or layer.fan_out != width:
                        raise InvalidSpecError(f"{where}: accumulating embedding must match width {width}")
                else:
                    if width is not None:
                        raise InvalidSpecError(f"{where}: token embedding must be the first layer")
                    vocab_of_embedding = layer.fan_in
                width = layer.fan_out
            elif layer.kind == "residual":
                if not 0 <= layer.source < idx:
                    raise InvalidSpecError(f"{where}: residual source {layer.source} out of range")
                if out_widths[layer.source] != width or layer.fan_in != width or layer.fan_out != width:
                    raise InvalidSpecError(f"{where}: residual widths do not match")
            else:
                if width is not None and layer.fan_in != width:
                    raise InvalidSpecError(
                        f"{where}: fan-in {layer.fan_in} does not match previous fan-out {width}")
                if layer.kind in ("layernorm", "msa") and layer.fan_in != layer.fan_out:
                    raise InvalidSpecError(f"{where}: fan-in and fan-out must be equal")
                if layer.kind == "msa" and (layer.heads < 1 or layer.fan_out % layer.heads != 0):
                    raise InvalidSpecError(
                        f"{where}: hidden size {layer.fan_out} not divisible by {layer.heads} heads")
                if layer.tied:
                    if not layer.lm_head or layer.bias:
                        raise InvalidSpecError(f"{where}: tied layers must be bias-free lm heads")
                    if vocab_of_embedding != layer.fan_out:
                        raise InvalidSpecError(f"{where}: tied head needs a token embedding of size {layer.fan_out}")
                width = layer.fan_out
            out_widths.append(width)

    def param_layout(self) -> List[ParamEntry]:
        entries, offset = [], 0
        for idx, layer in enumerate(self.layers):
            for name, shape in _param_names(layer):
                entry = ParamEntry(idx, name, shape, offset)
                entries.append(entry)
                offset += entry.size
        return entries

    @property
    def num_params(self) -> int:
        return sum(e.size for e in self.param_layout())

    def param_groups(self) -> List[Tuple[int, int]]:
        """(start, end) of each parameter tensor; the unit of layerwise scaling."""
        return [(e.offset, e.offset + e.size) for e in self.param_layout()]

    def to_dict(self) -> dict:
        return {"name": self.name, "activation": self.activation,
                "layers": [dataclasses.asdict(l) for l in self.layers]}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchSpec":
        return cls(tuple(LayerSpec(**l) for l in d["layers"]), d.get("name", ""), d.get("activation", "relu"))

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()[:16]


# Convenience constructors used by the task zoo and the symmetry lab

def mlp_spec(sizes: Sequence[int], bias: bool = True) -> ArchSpec:
    layers = [LayerSpec("linear", a, b, bias=bias) for a, b in zip(sizes[:-1], sizes[1:])]
    return ArchSpec(tuple(layers), name="mlp-" + "-".join(map(str, sizes)))


def convnet_spec(in_channels: int, channels: Sequence[int], num_classes: int, kernel: int = 3) -> ArchSpec:
    layers, prev = [], in_channels
    for ch in channels:
        layers.append(LayerSpec("conv", prev, ch, h=kernel, w=kernel))
        prev = ch
    layers.append(LayerSpec("linear", prev, num_classes))
    return ArchSpec(tuple(layers), name=f"cnn-{'-'.join(map(str, channels))}")


def transformer_spec(vocab: int, d: int, n_layers: int, heads: int, context: int,
                     tied: bool = True, mlp_ratio: int = 4) -> ArchSpec:
    """Pre-LN decoder: token + learned position embedding, n_layers blocks, final LN, head."""
    layers = [LayerSpec("embedding", vocab, d, name="tok"),
              LayerSpec("embedding", context, d, accumulate=True, name="pos")]
    for b in range(n_layers):
        stream = len(layers) - 1
        layers += [LayerSpec("layernorm", d, d, name=f"b{b}.ln1"),
                   LayerSpec("msa", d, d, heads=heads, name=f"b{b}.attn"),
                   LayerSpec("residual", d, d, source=stream, bias=False)]
        stream = len(layers) - 1
        layers += [LayerSpec("layernorm", d, d, name=f"b{b}.ln2"),
                   LayerSpec("linear", d, mlp_ratio * d, name=f"b{b}.fc1"),
                   LayerSpec("linear", mlp_ratio * d, d, name=f"b{b}.fc2"),
                   LayerSpec("residual", d, d, source=stream, bias=False)]
    layers.append(LayerSpec("layernorm", d, d, name="ln_f"))
    layers.append(LayerSpec("linear", d, vocab, bias=False, lm_head=True, tied=tied, name="lm_head"))
    return ArchSpec(tuple(layers), name=f"gpt-{n_layers}-{d}", activation="gelu")


def msa_spec(d: int, heads: int, bias: bool = True) -> ArchSpec:
    """A lone attention layer on a d-neuron input group."""
    return ArchSpec((LayerSpec("msa", d, d, heads=heads, bias=bias),), name=f"msa-{d}-{heads}")


# --------------------------- Templates ---------------------------

@dataclass(frozen=True, eq=False)
class NeuralGraphTemplate:
    num_nodes: int
    edge_index: np.ndarray      # [2, E] (src, dst)
    edge_type: np.ndarray       # [E]
    edge_slot: np.ndarray       # [E, d_E] flat parameter index per channel, -1 = none
    is_aux: np.ndarray          # [E]
    node_role: np.ndarray       # [V]
    node_group: np.ndarray      # [V]
    word_pos: np.ndarray        # [V] raw vocabulary-row index, 0 elsewhere
    lpe: np.ndarray             # [V, LPE_DIM]
    mode: str
    num_params: int
    param_groups: Tuple[Tuple[int, int], ...]
    arch_hash: str = ""

    @property
    def num_edges(self) -> int:
        return int(self.edge_index.shape[1])

    @property
    def edge_dim(self) -> int:
        return int(self.edge_slot.shape[1])

    @property
    def num_aux_edges(self) -> int:
        return int(self.is_aux.sum())

    @property
    def num_param_channels(self) -> int:
        return int((self.edge_slot >= 0).sum())


class _Builder:
    """Accumulates node and edge blocks as numpy arrays."""

    def __init__(self) -> None:
        self.num_nodes = 0
        self.num_groups = 0
        self.roles: List[np.ndarray] = []
        self.groups: List[np.ndarray] = []
        self.wpos: List[np.ndarray] = []
        self.blocks: List[Tuple[np.ndarray, np.ndarray, int, Optional[np.ndarray]]] = []

    def nodes(self, count: int, role: NodeRole, word_pos: Optional[np.ndarray] = None) -> np.ndarray:
        ids = np.arange(self.num_nodes, self.num_nodes + count, dtype=np.int64)
        self.num_nodes += count
        self.roles.append(np.full(count, int(role), dtype=np.int8))
        self.groups.append(np.full(count, self.num_groups, dtype=np.int64))
        self.num_groups += 1
        self.wpos.append(np.zeros(count, dtype=np.int64) if word_pos is None else word_pos.astype(np.int64))
        return ids

    def edges(self, src: np.ndarray, dst: np.ndarray, etype: EdgeType, slots: Optional[np.ndarray] = None) -> None:
        src, dst = np.broadcast_arrays(np.asarray(src, dtype=np.int64), np.asarray(dst, dtype=np.int64))
        if slots is not None and slots.ndim == 1:
            slots = slots[:, None]
        self.blocks.append((src.ravel(), dst.ravel(), int(etype), slots))

    def bias(self, offset: int, dst: np.ndarray) -> None:
        node = self.nodes(1, NodeRole.BIAS)
        self.edges(node, dst, EdgeType.BIAS, offset + np.arange(len(dst)))

    def finish(self, spec: ArchSpec, mode: str) -> NeuralGraphTemplate:
        edge_dim = max([1] + [b[3].shape[1] for b in self.blocks if b[3] is not None])
        src = np.concatenate([b[0] for b in self.blocks])
        dst = np.concatenate([b[1] for b in self.blocks])
        etype = np.concatenate([np.full(len(b[0]), b[2], dtype=np.int64) for b in self.blocks])
        slot = np.full((len(src), edge_dim), -1, dtype=np.int64)
        aux = np.zeros(len(src), dtype=bool)
        start = 0
        for b_src, _, _, b_slots in self.blocks:
            stop = start + len(b_src)
            if b_slots is None:
                aux[start:stop] = True
            else:
                slot[start:stop, :b_slots.shape[1]] = b_slots
            start = stop
        return NeuralGraphTemplate(
            num_nodes=self.num_nodes,
            edge_index=np.stack([src, dst]),
            edge_type=etype,
            edge_slot=slot,
            is_aux=aux,
            node_role=np.concatenate(self.roles),
            node_group=np.concatenate(self.groups),
            word_pos=np.concatenate(self.wpos),
            lpe=np.zeros((self.num_nodes, LPE_DIM)),
            mode=mode,
            num_params=spec.num_params,
            param_groups=tuple(spec.param_groups()),
            arch_hash=spec.hash(),
        )


def _matrix(rows: int, cols: int, offset: int, k: int = 1) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Row/col index and flat slots of a row-major [rows, cols, k] block."""
    flat = np.arange(rows * cols, dtype=np.int64)
    r, c = np.divmod(flat, cols)
    slots = offset + flat[:, None] * k + np.arange(k, dtype=np.int64)[None, :]
    return r, c, slots


def _msa_ours(b: _Builder, layer: LayerSpec, off: Dict[str, int], x: np.ndarray) -> np.ndarray:
    d, heads = layer.fan_out, layer.heads
    dh = d // heads
    out = b.nodes(d, NodeRole.NEURON)
    qk_groups, v_groups = [], []
    for _ in range(heads):
        qk_groups.append(b.nodes(dh, NodeRole.NEURON))
        v_groups.append(b.nodes(dh, NodeRole.NEURON))
    bias_in = b.nodes(1, NodeRole.BIAS) if layer.bias else None
    for a in range(heads):
        head = b.nodes(1, NodeRole.HEAD)
        q, v = qk_groups[a], v_groups[a]
        r, c, s = _matrix(dh, d, a * dh * d)
        b.edges(x[c], q[r], EdgeType.MSA_Q, off["q.weight"] + s)
        b.edges(q[r], x[c], EdgeType.MSA_K, off["k.weight"] + s)
        b.edges(x[c], v[r], EdgeType.MSA_V, off["v.weight"] + s)
        if bias_in is not None:
            rows = a * dh + np.arange(dh)
            b.edges(bias_in, q, EdgeType.BIAS, off["q.bias"] + rows)
            b.edges(q, bias_in, EdgeType.BIAS, off["k.bias"] + rows)
            b.edges(bias_in, v, EdgeType.BIAS, off["v.bias"] + rows)
        b.edges(head, np.concatenate([q, v]), EdgeType.HEAD_LINK)
    v_all = np.concatenate(v_groups)
    r, c, s = _matrix(d, d, off["o.weight"])
    b.edges(v_all[c], out[r], EdgeType.MSA_O, s)
    if layer.bias:
        b.bias(off["o.bias"], out)
    return out


def _msa_naive(b: _Builder, layer: LayerSpec, off: Dict[str, int], x: np.ndarray) -> np.ndarray:
    d = layer.fan_out
    out = b.nodes(d, NodeRole.NEURON)
    hidden = b.nodes(d, NodeRole.NEURON)
    r, c, s = _matrix(d, d, 0)
    stacked = np.concatenate([off[f"{p}.weight"] + s for p in "qkv"], axis=1)
    b.edges(x[c], hidden[r], EdgeType.MSA_Q, stacked)
    if layer.bias:
        node = b.nodes(1, NodeRole.BIAS)
        rows = np.arange(d)[:, None]
        b.edges(node, hidden, EdgeType.BIAS,
                np.concatenate([off[f"{p}.bias"] + rows for p in "qkv"], axis=1))
    r, c, s = _matrix(d, d, off["o.weight"])
    b.edges(hidden[c], out[r], EdgeType.MSA_O, s)
    if layer.bias:
        b.bias(off["o.bias"], out)
    return out


def build_template(spec: ArchSpec, mode: str = "ours", with_lpe: bool = True) -> NeuralGraphTemplate:
    """Turn an ArchSpec into the static typed graph.

    Neuron groups are created per layer output; biases, norm scales and
    attention heads get auxiliary nodes. In ``ours`` mode every head owns a
    qk-group and a v-group tied together by a head node; W^q edges point
    into the qk-group and W^k edges point back out of it. In ``naive`` mode
    q/k/v share one hidden group as 3-channel edges.
    """
    if mode not in GRAPH_MODES:
        raise InvalidSpecError(f"unknown graph mode '{mode}'")
    spec.validate()
    offsets: Dict[Tuple[int, str], int] = {(e.layer, e.name): e.offset for e in spec.param_layout()}
    b = _Builder()
    current: Optional[np.ndarray] = None
    token_out: Optional[np.ndarray] = None
    outputs: List[np.ndarray] = []

    for idx, layer in enumerate(spec.layers):
        off = {name: o for (li, name), o in offsets.items() if li == idx}
        if layer.kind in ("linear", "conv") and current is None:
            current = b.nodes(layer.fan_in, NodeRole.NEURON)

        if layer.kind == "embedding":
            rows_wpos = None if layer.accumulate else np.arange(1, layer.fan_in + 1)
            rows = b.nodes(layer.fan_in, NodeRole.EMBEDDING_ROW, rows_wpos)
            target = current if layer.accumulate else b.nodes(layer.fan_out, NodeRole.NEURON)
            r, c, s = _matrix(layer.fan_in, layer.fan_out, off["weight"])
            b.edges(rows[r], target[c], EdgeType.EMBED_W, s)
            if not layer.accumulate:
                token_out = target
            current = target
        elif layer.kind == "linear" and layer.tied:
            b.edges(current, token_out, EdgeType.RESIDUAL)
        elif layer.kind in ("linear", "conv"):
            wpos = np.arange(1, layer.fan_out + 1) if layer.lm_head else None
            out = b.nodes(layer.fan_out, NodeRole.NEURON, wpos)
            k = layer.h * layer.w
            r, c, s = _matrix(layer.fan_out, layer.fan_in, off["weight"], k)
            etype = EdgeType.CONV_W if layer.kind == "conv" else (
                EdgeType.LM_HEAD_W if layer.lm_head else EdgeType.LINEAR_W)
            b.edges(current[c], out[r], etype, s)
            if layer.bias:
                b.bias(off["bias"], out)
            current = out
        elif layer.kind == "layernorm":
            out = b.nodes(layer.fan_out, NodeRole.NEURON)
            b.edges(current, out, EdgeType.RESIDUAL)
            norm = b.nodes(1, NodeRole.NORM)
            b.edges(norm, out, EdgeType.NORM_SCALE, off["weight"] + np.arange(layer.fan_out))
            if layer.bias:
                b.bias(off["bias"], out)
            current = out
        elif layer.kind == "msa":
            if current is None:
                current = b.nodes(layer.fan_in, NodeRole.NEURON)
            current = (_msa_ours if mode == "ours" else _msa_naive)(b, layer, off, current)
        elif layer.kind == "residual":
            b.edges(outputs[layer.source], current, EdgeType.RESIDUAL)
        outputs.append(current)

    template = b.finish(spec, mode)
    if with_lpe:
        template = dataclasses.replace(template, lpe=compute_lpe(template))
    logger.debug("built %s template for %s: %d nodes, %d edges (%d aux)",
                 mode, spec.name or spec.hash(), template.num_nodes,
                 template.num_edges, template.num_aux_edges)
    return template


# --------------------------- Node features ---------------------------

def compute_lpe(template: NeuralGraphTemplate, k: int = LPE_DIM) -> np.ndarray:
    """Smallest non-trivial eigenvectors of the normalized Laplacian.

    Undirected, unweighted, degree clipped at 1. Sign fixed so the
    largest-magnitude entry is positive (lowest index on ties); columns
    ordered by (eigenvalue, vector). Missing slots stay zero.
    """
    n = template.num_nodes
    out = np.zeros((n, k))
    if n < 2:
        return out
    src, dst = template.edge_index
    A = sp.coo_matrix((np.ones(len(src)), (src, dst)), shape=(n, n)).tocsr()
    A = ((A + A.T) > 0).astype(np.float64)
    A.setdiag(0)
    A.eliminate_zeros()
    deg = np.asarray(A.sum(axis=0)).ravel().clip(1)
    N = sp.diags(deg ** -0.5)
    L = sp.eye(n) - N @ A @ N
    n_comp, _ = connected_components(A, directed=False)
    want = min(k + n_comp, n)

    if n <= DENSE_LPE_MAX_NODES:
        vals, vecs = scipy.linalg.eigh(L.toarray())
        vals, vecs = vals[:want], vecs[:, :want]
    else:
        if want >= n - 1:
            want = n - 2
        vals, vecs = eigsh(L.tocsc(), k=want, sigma=LPE_SHIFT, which="LM", v0=np.ones(n))
        order = np.argsort(vals)
        vals, vecs = vals[order], vecs[:, order]

    keep = vals > TRIVIAL_EIG_TOL
    vals, vecs = vals[keep][:k], vecs[:, keep][:, :k]
    for j in range(vecs.shape[1]):
        top = int(np.argmax(np.round(np.abs(vecs[:, j]), 10)))
        if vecs[top, j] < 0:
            vecs[:, j] = -vecs[:, j]
    order = sorted(range(vecs.shape[1]),
                   key=lambda j: (round(float(vals[j]), 8), tuple(np.round(vecs[:, j], 8))))
    out[:, :len(order)] = vecs[:, order]
    return out


def word_positions(template: NeuralGraphTemplate, ceiling: Optional[int] = None) -> np.ndarray:
    wpos = template.word_pos.copy()
    if ceiling is not None:
        wpos = np.minimum(wpos, ceiling)
    return wpos


# --------------------------- Windows and graphs ---------------------------

@dataclass(frozen=True, eq=False)
class ParameterWindow:
    """c flat parameter states of one run, most recent first (column 0)."""

    values: np.ndarray                   # [n, c]
    steps: Tuple[int, ...] = ()
    stride: int = DEFAULT_STRIDE

    def __post_init__(self) -> None:
        if self.values.ndim != 2 or self.values.shape[1] < 2:
            raise ShapeError(f"window must be [n, c] with c >= 2, got {self.values.shape}")
        if self.steps and len(self.steps) != self.values.shape[1]:
            raise ShapeError("one step index per window column required")

    @classmethod
    def from_oldest_first(cls, states: Sequence[np.ndarray], steps: Sequence[int] = (),
                          stride: int = DEFAULT_STRIDE) -> "ParameterWindow":
        values = np.stack([np.asarray(s) for s in states][::-1], axis=1)
        return cls(values, tuple(steps)[::-1], stride)

    @property
    def context(self) -> int:
        return int(self.values.shape[1])

    @property
    def latest(self) -> np.ndarray:
        return self.values[:, 0]

    def oldest_first(self) -> np.ndarray:
        return self.values[:, ::-1]


@dataclass(frozen=True, eq=False)
class NeuralGraph:
    template: NeuralGraphTemplate
    edge_attr: np.ndarray        # [E, d_E, c]
    lpe: np.ndarray              # [V, LPE_DIM]
    word_pos: np.ndarray         # [V]


def attach_window(template: NeuralGraphTemplate, window: ParameterWindow) -> NeuralGraph:
    values = window.values
    if values.shape[0] != template.num_params:
        raise ShapeError(f"window has {values.shape[0]} parameters, template expects {template.num_params}")
    slot = template.edge_slot
    mask = slot >= 0
    feats = np.zeros(slot.shape + (values.shape[1],), dtype=values.dtype)
    feats[mask] = values[slot[mask]]
    feats[template.is_aux, 0, :] = 1.0
    return NeuralGraph(template, feats, template.lpe, template.word_pos)


def graph_inverse(template: NeuralGraphTemplate, edge_values: np.ndarray) -> np.ndarray:
    """Scatter per-edge channel values [E, d_E] back into a flat vector."""
    if edge_values.shape[:2] != template.edge_slot.shape:
        raise ShapeError(f"edge values {edge_values.shape} do not match slots {template.edge_slot.shape}")
    mask = template.edge_slot >= 0
    out = np.zeros(template.num_params, dtype=edge_values.dtype)
    out[template.edge_slot[mask]] = edge_values[mask]
    return out


# --------------------------- Permutations and isomorphism ---------------------------

def permute_nodes(graph: NeuralGraph, mapping: Dict[int, int]) -> NeuralGraph:
    """Relabel neuron nodes of one group; mapping is old id -> new id."""
    t = graph.template
    keys = np.fromiter(mapping.keys(), dtype=np.int64, count=len(mapping))
    vals = np.fromiter(mapping.values(), dtype=np.int64, count=len(mapping))
    if set(keys.tolist()) != set(vals.tolist()):
        raise InvalidSpecError("permutation is not a bijection on its node set")
    if len(keys) == 0:
        return graph
    if keys.min() < 0 or keys.max() >= t.num_nodes:
        raise InvalidSpecError("permutation references unknown nodes")
    if np.any(t.node_role[keys] != NodeRole.NEURON):
        raise InvalidSpecError("only neuron nodes can be permuted")
    if len(np.unique(t.node_group[keys])) != 1:
        raise InvalidSpecError("permutation must stay within one neuron group")

    perm = np.arange(t.num_nodes)
    perm[keys] = vals
    inv = np.empty_like(perm)
    inv[perm] = np.arange(t.num_nodes)
    new_t = dataclasses.replace(
        t, edge_index=perm[t.edge_index],
        node_role=t.node_role[inv], node_group=t.node_group[inv],
        word_pos=t.word_pos[inv], lpe=t.lpe[inv],
    )
    return NeuralGraph(new_t, graph.edge_attr, graph.lpe[inv], graph.word_pos[inv])


def to_networkx(graph: NeuralGraph, decimals: int = 6) -> nx.DiGraph:
    t = graph.template
    g = nx.DiGraph()
    for v in range(t.num_nodes):
        g.add_node(v, role=int(t.node_role[v]), wpos=int(graph.word_pos[v]))
    feats = np.round(graph.edge_attr.reshape(t.num_edges, -1), decimals)
    for e, (u, v) in enumerate(t.edge_index.T):
        g.add_edge(int(u), int(v), type=int(t.edge_type[e]), feat=tuple(feats[e].tolist()))
    return g


def is_isomorphic(a: NeuralGraph, b: NeuralGraph, decimals: int = 6) -> bool:
    """Typed isomorphism: node roles, edge types and edge features must match."""
    if a.template.num_nodes != b.template.num_nodes or a.template.num_edges != b.template.num_edges:
        return False
    return nx.is_isomorphic(
        to_networkx(a, decimals), to_networkx(b, decimals),
        node_match=lambda x, y: x["role"] == y["role"] and x["wpos"] == y["wpos"],
        edge_match=lambda x, y: x["type"] == y["type"] and x["feat"] == y["feat"],
    )


# --------------------------- Manifest ---------------------------

def template_manifest(template: NeuralGraphTemplate) -> str:
    """Deterministic JSON text of nodes, typed edges and the parameter mapping."""
    record = {
        "version": 1,
        "mode": template.mode,
        "arch_hash": template.arch_hash,
        "num_params": template.num_params,
        "param_groups": [list(g) for g in template.param_groups],
        "nodes": {
            "role": template.node_role.tolist(),
            "group": template.node_group.tolist(),
            "word_pos": template.word_pos.tolist(),
        },
        "edges": {
            "src": template.edge_index[0].tolist(),
            "dst": template.edge_index[1].tolist(),
            "type": template.edge_type.tolist(),
            "slot": template.edge_slot.tolist(),
        },
    }
    return json.dumps(record, sort_keys=True, separators=(",", ":"))


def load_template_manifest(text: str, with_lpe: bool = True) -> NeuralGraphTemplate:
    rec = json.loads(text)
    slot = np.asarray(rec["edges"]["slot"], dtype=np.int64)
    etype = np.asarray(rec["edges"]["type"], dtype=np.int64)
    template = NeuralGraphTemplate(
        num_nodes=len(rec["nodes"]["role"]),
        edge_index=np.asarray([rec["edges"]["src"], rec["edges"]["dst"]], dtype=np.int64),
        edge_type=etype,
        edge_slot=slot,
        is_aux=np.all(slot < 0, axis=1),
        node_role=np.asarray(rec["nodes"]["role"], dtype=np.int8),
        node_group=np.asarray(rec["nodes"]["group"], dtype=np.int64),
        word_pos=np.asarray(rec["nodes"]["word_pos"], dtype=np.int64),
        lpe=np.zeros((len(rec["nodes"]["role"]), LPE_DIM)),
        mode=rec["mode"],
        num_params=rec["num_params"],
        param_groups=tuple(tuple(g) for g in rec["param_groups"]),
        arch_hash=rec["arch_hash"],
    )
    if with_lpe:
        template = dataclasses.replace(template, lpe=compute_lpe(template))
    return template
