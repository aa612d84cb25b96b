# symmetry_lab.py
# Neuron-permutation experiment on a single attention layer
# -------------------------------------------------------------
# 1. draw random MSA weights (d, H)
# 2. apply stratified permutations; label each good/bad by comparing
#    msa_forward outputs on random inputs
# 3. embed the permuted weights as neural graphs ("ours" and "naive")
#    with a randomly initialized graph network
# 4. fit a logistic classifier on the embeddings, report train accuracy
# -------------------------------------------------------------

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np
import pandas as pd
import torch
from sklearn.decomposition import PCA
from sklearn.linear_model import LogisticRegression
from sklearn.pipeline import make_pipeline
from sklearn.preprocessing import StandardScaler

from errors import InvalidSpecError, ShapeError
from neural_graph import ArchSpec, ParameterWindow, build_template, msa_spec
from nino_model import NinoConfig, NinoModel, graph_to_data, scaled_graph
from scaling import fit_layerwise
from task_zoo import attention

logger = logging.getLogger(__name__)

EQUIV_TOL = 1e-5        # max-abs output difference for "same function"
NUM_INPUTS = 8          # random inputs used by the labelling oracle
SEQ_LEN = 5
MIN_MINORITY = 0.10     # resample below this label share
MAX_RESAMPLES = 5
GOOD_CLASSES = ("qk_within", "vo_within", "qk_v_independent", "head_reorder")
BAD_CLASSES = ("cross_head_swap", "global_shuffle", "q_only")

Weights = Dict[str, np.ndarray]


# =========================
# Reference forward pass
# =========================
def msa_forward(x: np.ndarray, weights: Weights, heads: int, causal: bool = False) -> np.ndarray:
    """Reference multi-head self-attention, float64. x is [B, T, d] or [T, d]."""
    xt = torch.as_tensor(np.asarray(x), dtype=torch.float64)
    squeeze = xt.dim() == 2
    if squeeze:
        xt = xt.unsqueeze(0)
    d = weights["q.weight"].shape[1]
    if xt.shape[-1] != d:
        raise ShapeError(f"input width {xt.shape[-1]} does not match weights ({d})")

    def w(name: str) -> Optional[torch.Tensor]:
        return None if name not in weights else torch.as_tensor(weights[name], dtype=torch.float64)

    out = attention(xt, w("q.weight"), w("q.bias"), w("k.weight"), w("k.bias"),
                    w("v.weight"), w("v.bias"), w("o.weight"), w("o.bias"), heads, causal)
    out = out.numpy()
    return out[0] if squeeze else out


def weights_from_flat(spec: ArchSpec, flat: np.ndarray) -> Weights:
    return {e.name: flat[e.offset:e.offset + e.size].reshape(e.shape) for e in spec.param_layout()}


def flat_from_weights(spec: ArchSpec, weights: Weights) -> np.ndarray:
    return np.concatenate([weights[e.name].ravel() for e in spec.param_layout()])


def random_weights(d: int, heads: int, rng: np.random.Generator) -> Weights:
    spec = msa_spec(d, heads)
    return weights_from_flat(spec, rng.normal(0.0, 1.0 / np.sqrt(d), spec.num_params))


# =========================
# Permutations
# =========================
def _apply_rows(weights: Weights, projs: Sequence[str], order: np.ndarray) -> None:
    for p in projs:
        weights[f"{p}.weight"] = weights[f"{p}.weight"][order]
        if f"{p}.bias" in weights:
            weights[f"{p}.bias"] = weights[f"{p}.bias"][order]


def permute_weights(weights: Weights, heads: int, kind: str, rng: np.random.Generator) -> Weights:
    """Apply one permutation of the given class; returns a new weight dict.

    Row orders index the d hidden units of q/k/v; o follows v through
    its columns.
    """
    out = {k: v.copy() for k, v in weights.items()}
    d = out["q.weight"].shape[0]
    dh = d // heads
    ident = np.arange(d)

    def within(seed_rng: np.random.Generator) -> np.ndarray:
        order = ident.copy()
        for a in range(heads):
            order[a * dh:(a + 1) * dh] = a * dh + seed_rng.permutation(dh)
        return order

    qk_order, v_order = ident, ident
    if kind == "qk_within":
        qk_order = within(rng)
    elif kind == "vo_within":
        v_order = within(rng)
    elif kind == "qk_v_independent":
        qk_order, v_order = within(rng), within(rng)
    elif kind == "head_reorder":
        blocks = rng.permutation(heads)
        qk_order = v_order = np.concatenate([np.arange(b * dh, (b + 1) * dh) for b in blocks])
    elif kind == "cross_head_swap":
        a, b = rng.choice(heads, size=2, replace=False)
        i, j = a * dh + rng.integers(dh), b * dh + rng.integers(dh)
        qk_order = ident.copy()
        qk_order[[i, j]] = qk_order[[j, i]]
    elif kind == "global_shuffle":
        qk_order = v_order = rng.permutation(d)
    elif kind == "q_only":
        _apply_rows(out, ["q"], within(rng))
        return out
    else:
        raise InvalidSpecError(f"unknown permutation class '{kind}'")
    _apply_rows(out, ["q", "k"], qk_order)
    _apply_rows(out, ["v"], v_order)
    out["o.weight"] = out["o.weight"][:, v_order]
    return out


def same_function(a: Weights, b: Weights, heads: int, rng: np.random.Generator,
                  n_inputs: int = NUM_INPUTS, tol: float = EQUIV_TOL) -> bool:
    d = a["q.weight"].shape[1]
    x = rng.normal(size=(n_inputs, SEQ_LEN, d))
    return float(np.max(np.abs(msa_forward(x, a, heads) - msa_forward(x, b, heads)))) < tol


# =========================
# Embedding
# =========================
def embedding_model(seed: int, hidden: int = 32, depth: int = 3) -> NinoModel:
    torch.manual_seed(seed)
    cfg = NinoConfig(hidden=hidden, depth=depth, context=2, horizon=1, edge_dim=3, use_lpe=False)
    return NinoModel(cfg).double().eval()


@torch.no_grad()
def embed_weights(model: NinoModel, spec: ArchSpec, weights: Weights, mode: str, template=None) -> np.ndarray:
    """Mean last-layer edge feature of the layerwise-scaled graph."""
    if template is None:
        template = build_template(spec, mode, with_lpe=False)
    flat = flat_from_weights(spec, weights)
    window = ParameterWindow(np.stack([flat] * model.cfg.context, axis=1))
    scaler = fit_layerwise(window, spec.param_groups())
    data = graph_to_data(scaled_graph(template, window, scaler), model.cfg)
    data.edge_attr = data.edge_attr.double()
    data.lpe = data.lpe.double()
    return model.graph_embedding(data)[0].numpy()


# =========================
# Experiment
# =========================
@dataclass
class PermutationCase:
    kind: str
    label: int
    weights: Weights
    embeddings: Dict[str, np.ndarray] = field(default_factory=dict)


@dataclass
class ExperimentResult:
    mode: str
    accuracy: float
    n: int
    n_good: int
    seed: int
    coords: Optional[np.ndarray] = None
    labels: Optional[np.ndarray] = None


def sample_cases(d: int, heads: int, n_perms: int, seed: int):
    rng = np.random.default_rng(seed)
    base = random_weights(d, heads, rng)
    cases = []
    for _ in range(n_perms):
        pool = GOOD_CLASSES if rng.random() < 0.5 else BAD_CLASSES
        kind = str(rng.choice(pool))
        permuted = permute_weights(base, heads, kind, rng)
        cases.append(PermutationCase(kind, int(same_function(base, permuted, heads, rng)), permuted))
    return base, cases


def run_experiment(d: int = 12, heads: int = 4, n_perms: int = 1000, seed: int = 0,
                   modes: Sequence[str] = ("ours", "naive"), hidden: int = 32, depth: int = 3,
                   with_coords: bool = False) -> List[ExperimentResult]:
    """Train accuracy of a logistic classifier on graph embeddings, per graph mode.

    The classifier is fit and scored on the same samples: it measures linear
    separability of good and bad permutations, not generalization.
    """
    if d % heads != 0:
        raise InvalidSpecError(f"hidden size {d} not divisible by {heads} heads")
    for attempt in range(MAX_RESAMPLES):
        _, cases = sample_cases(d, heads, n_perms, seed + attempt)
        share = np.mean([c.label for c in cases])
        if MIN_MINORITY <= share <= 1 - MIN_MINORITY:
            break
        logger.warning("label balance %.2f good, resampling", share)
    else:
        raise InvalidSpecError(f"could not reach a {MIN_MINORITY:.0%} minority share in {MAX_RESAMPLES} draws")

    spec = msa_spec(d, heads)
    model = embedding_model(seed, hidden, depth)
    labels = np.array([c.label for c in cases])
    results = []
    for mode in modes:
        template = build_template(spec, mode, with_lpe=False)
        H = np.stack([embed_weights(model, spec, c.weights, mode, template) for c in cases])
        for c, h in zip(cases, H):
            c.embeddings[mode] = h
        clf = make_pipeline(StandardScaler(), LogisticRegression(max_iter=5000))
        clf.fit(H, labels)
        acc = 100.0 * clf.score(H, labels)
        coords = PCA(n_components=2).fit_transform(H) if with_coords else None
        logger.info("symmetry %s: accuracy %.1f%% on %d permutations (%d good)",
                    mode, acc, len(cases), int(labels.sum()))
        results.append(ExperimentResult(mode, acc, len(cases), int(labels.sum()), seed, coords, labels))
    return results


def results_frame(results: Sequence[ExperimentResult]) -> pd.DataFrame:
    return pd.DataFrame([{"mode": r.mode, "accuracy": r.accuracy, "n": r.n, "seed": r.seed}
                         for r in results])


def export_csv(results: Sequence[ExperimentResult], path: Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    results_frame(results).to_csv(path, index=False)
    for r in results:
        if r.coords is not None:
            coords = pd.DataFrame(r.coords, columns=["pca_x", "pca_y"])
            coords["label"] = r.labels
            coords.to_csv(
                path.with_name(f"{path.stem}_{r.mode}_coords.csv"), index=False)
