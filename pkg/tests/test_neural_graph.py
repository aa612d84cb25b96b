from __future__ import annotations

import numpy as np
import pytest
import scipy.sparse as sp
from scipy.spatial.distance import pdist, squareform

from conftest import random_window
from errors import InvalidSpecError, ShapeError, UnsupportedArchitectureError
from neural_graph import (
    LPE_DIM,
    ArchSpec,
    EdgeType,
    LayerSpec,
    NeuralGraphTemplate,
    NodeRole,
    ParameterWindow,
    attach_window,
    build_template,
    compute_lpe,
    convnet_spec,
    graph_inverse,
    is_isomorphic,
    load_template_manifest,
    mlp_spec,
    msa_spec,
    permute_nodes,
    template_manifest,
    transformer_spec,
    word_positions,
)
from symmetry_lab import flat_from_weights, permute_weights, random_weights


def _template_from_edges(n: int, edges) -> NeuralGraphTemplate:
    src, dst = np.asarray(edges, dtype=np.int64).T
    return NeuralGraphTemplate(
        num_nodes=n, edge_index=np.stack([src, dst]),
        edge_type=np.zeros(len(src), dtype=np.int64),
        edge_slot=np.arange(len(src), dtype=np.int64)[:, None],
        is_aux=np.zeros(len(src), dtype=bool),
        node_role=np.zeros(n, dtype=np.int8), node_group=np.zeros(n, dtype=np.int64),
        word_pos=np.zeros(n, dtype=np.int64), lpe=np.zeros((n, LPE_DIM)),
        mode="ours", num_params=len(src), param_groups=((0, len(src)),))


def _constant_window(theta: np.ndarray, c: int = 2) -> ParameterWindow:
    return ParameterWindow(np.stack([theta] * c, axis=1))


def _mlp_theta_permuted(theta: np.ndarray, perm: np.ndarray) -> np.ndarray:
    # mlp_spec([3, 4, 2]) layout: W1[4,3], b1[4], W2[2,4], b2[2]
    w1, b1 = theta[:12].reshape(4, 3), theta[12:16]
    w2, b2 = theta[16:24].reshape(2, 4), theta[24:26]
    return np.concatenate([w1[perm].ravel(), b1[perm], w2[:, perm].ravel(), b2])


# --------------------------- structure ---------------------------

def test_mlp_node_and_edge_counts() -> None:
    t = build_template(mlp_spec([3, 2, 1]), with_lpe=False)
    assert t.num_nodes == 8
    assert t.num_edges - t.num_aux_edges == 11
    assert t.num_param_channels == 11
    assert int((t.node_role == NodeRole.BIAS).sum()) == 2


def test_msa_ours_has_head_nodes_and_split_qkv() -> None:
    spec = msa_spec(6, 2)
    t = build_template(spec, "ours", with_lpe=False)
    assert int((t.node_role == NodeRole.HEAD).sum()) == 2
    assert t.edge_dim == 1
    types = set(t.edge_type.tolist())
    assert {EdgeType.MSA_Q, EdgeType.MSA_K, EdgeType.MSA_V, EdgeType.MSA_O, EdgeType.HEAD_LINK} <= types
    assert t.num_param_channels == spec.num_params
    # each head node links its 3 qk and 3 v neurons
    assert t.num_aux_edges == 2 * 6


def test_msa_naive_stacks_three_channels() -> None:
    spec = msa_spec(6, 2)
    t = build_template(spec, "naive", with_lpe=False)
    assert int((t.node_role == NodeRole.HEAD).sum()) == 0
    assert t.edge_dim == 3
    assert EdgeType.MSA_K not in set(t.edge_type.tolist())
    assert t.num_param_channels == spec.num_params


def test_attach_window_shape_and_constant_window(rng: np.random.Generator) -> None:
    spec = mlp_spec([3, 2, 1])
    t = build_template(spec, with_lpe=False)
    g = attach_window(t, random_window(spec, 5, rng))
    assert g.edge_attr.shape == (11, 1, 5)

    theta = rng.normal(size=spec.num_params)
    g = attach_window(t, _constant_window(theta, 5))
    assert np.all(g.edge_attr == g.edge_attr[:, :, :1])


def test_conv_graph_pads_linear_edges(rng: np.random.Generator) -> None:
    spec = convnet_spec(1, (4,), 3)
    t = build_template(spec, with_lpe=False)
    assert t.edge_dim == 9
    g = attach_window(t, random_window(spec, 3, rng))
    linear = t.edge_type == EdgeType.LINEAR_W
    assert linear.any()
    assert np.all(g.edge_attr[linear, 1:, :] == 0.0)
    assert np.all(t.edge_slot[linear, 1:] == -1)


def test_aux_edges_carry_one_in_first_channel(rng: np.random.Generator) -> None:
    spec = transformer_spec(20, 8, 1, 2, 4)
    t = build_template(spec, with_lpe=False)
    assert t.num_aux_edges > 0
    g = attach_window(t, random_window(spec, 3, rng))
    assert np.all(g.edge_attr[t.is_aux, 0, :] == 1.0)
    assert np.all(g.edge_attr[t.is_aux, 1:, :] == 0.0)


@pytest.mark.parametrize("mode", ["ours", "naive"])
@pytest.mark.parametrize("spec", [
    convnet_spec(1, (16, 32, 32), 10),
    transformer_spec(50, 16, 2, 2, 8),
    transformer_spec(30, 8, 1, 2, 4, tied=False),
    msa_spec(6, 3),
    mlp_spec([5, 7, 3]),
], ids=["cnn16", "gpt-tied", "gpt-untied", "msa", "mlp"])
def test_graph_inverse_roundtrip_is_exact(spec: ArchSpec, mode: str, rng: np.random.Generator) -> None:
    t = build_template(spec, mode, with_lpe=False)
    theta = rng.normal(size=spec.num_params)
    g = attach_window(t, _constant_window(theta))
    back = graph_inverse(t, g.edge_attr[:, :, 0])
    assert np.array_equal(back, theta)
    # every parameter sits on exactly one edge channel
    slots = t.edge_slot[t.edge_slot >= 0]
    assert len(slots) == spec.num_params
    assert len(np.unique(slots)) == spec.num_params


def test_graph_inverse_of_zeros_is_zero() -> None:
    spec = convnet_spec(1, (4, 4), 10)
    t = build_template(spec, with_lpe=False)
    assert not graph_inverse(t, np.zeros((t.num_edges, t.edge_dim))).any()


def test_cnn16_parameter_count() -> None:
    assert convnet_spec(1, (16, 32, 32), 10).num_params == 14_378


# --------------------------- node features ---------------------------

def test_lpe_of_complete_graph() -> None:
    edges = [(i, j) for i in range(4) for j in range(i + 1, 4)]
    t = _template_from_edges(4, edges)
    lpe = compute_lpe(t)
    assert lpe.shape == (4, LPE_DIM)
    assert not lpe[:, 3:].any()
    vecs = lpe[:, :3]
    A = np.ones((4, 4)) - np.eye(4)
    L = np.eye(4) - A / 3.0
    np.testing.assert_allclose(L @ vecs, (4.0 / 3.0) * vecs, atol=1e-10)
    np.testing.assert_allclose(vecs.T @ vecs, np.eye(3), atol=1e-10)
    np.testing.assert_allclose(vecs.sum(axis=0), 0.0, atol=1e-10)
    np.testing.assert_array_equal(lpe, compute_lpe(t))


def test_lpe_sign_convention_and_small_spectrum() -> None:
    t = build_template(mlp_spec([3, 2, 1]))
    for j in range(LPE_DIM):
        col = t.lpe[:, j]
        if col.any():
            assert col[np.argmax(np.round(np.abs(col), 10))] > 0


def test_lpe_clusters_nodes_of_the_same_layer() -> None:
    t = build_template(transformer_spec(16, 8, 2, 2, 4))
    dist = squareform(pdist(t.lpe))
    same = t.node_group[:, None] == t.node_group[None, :]
    off_diag = ~np.eye(t.num_nodes, dtype=bool)
    intra = dist[same & off_diag].mean()
    inter = dist[~same].mean()
    assert intra < inter


def test_lpe_uses_sparse_solver_on_large_graphs() -> None:
    # 2100 nodes exceeds the dense limit; a path plus random chords keeps the gap wide
    n = 2100
    rng = np.random.default_rng(1)
    chords = [(i, int(j)) for i, j in enumerate(rng.integers(0, n, n)) if abs(i - int(j)) > 1]
    t = _template_from_edges(n, [(i, i + 1) for i in range(n - 1)] + chords)
    lpe = compute_lpe(t)
    A = sp.coo_matrix((np.ones(t.num_edges), (t.edge_index[0], t.edge_index[1])), shape=(n, n)).toarray()
    A = ((A + A.T) > 0).astype(float)
    deg = A.sum(axis=0)
    L = np.eye(n) - A / np.sqrt(np.outer(deg, deg))
    col = lpe[:, 0]
    lam = col @ L @ col
    np.testing.assert_allclose(L @ col, lam * col, atol=1e-6)
    assert lam > 1e-8


def test_word_positions() -> None:
    assert not word_positions(build_template(mlp_spec([3, 2, 1]), with_lpe=False)).any()

    tied = build_template(transformer_spec(10, 8, 1, 2, 4, tied=True), with_lpe=False)
    on_rows = tied.word_pos[tied.node_role == NodeRole.EMBEDDING_ROW]
    assert sorted(on_rows[on_rows > 0].tolist()) == list(range(1, 11))
    assert sorted(tied.word_pos[tied.word_pos > 0].tolist()) == list(range(1, 11))

    untied = build_template(transformer_spec(10, 8, 1, 2, 4, tied=False), with_lpe=False)
    wp = untied.word_pos
    on_rows = wp[(untied.node_role == NodeRole.EMBEDDING_ROW) & (wp > 0)]
    on_head = wp[(untied.node_role == NodeRole.NEURON) & (wp > 0)]
    assert sorted(on_rows.tolist()) == sorted(on_head.tolist()) == list(range(1, 11))
    assert word_positions(untied, ceiling=4).max() == 4


# --------------------------- permutations ---------------------------

def test_permute_nodes_identity_and_relabel(small_mlp: ArchSpec, rng: np.random.Generator) -> None:
    t = build_template(small_mlp, with_lpe=False)
    g = attach_window(t, random_window(small_mlp, 2, rng))
    assert permute_nodes(g, {}) is g
    hidden = np.flatnonzero(t.node_group == t.node_group[3])
    swapped = permute_nodes(g, {int(hidden[0]): int(hidden[1]), int(hidden[1]): int(hidden[0])})
    assert is_isomorphic(g, swapped)


def test_permute_nodes_rejects_bad_mappings(small_mlp: ArchSpec, rng: np.random.Generator) -> None:
    t = build_template(small_mlp, with_lpe=False)
    g = attach_window(t, random_window(small_mlp, 2, rng))
    bias = int(np.flatnonzero(t.node_role == NodeRole.BIAS)[0])
    with pytest.raises(InvalidSpecError):
        permute_nodes(g, {3: 4})
    with pytest.raises(InvalidSpecError):
        permute_nodes(g, {2: 3, 3: 2})
    with pytest.raises(InvalidSpecError):
        permute_nodes(g, {bias: 3, 3: bias})


def test_function_preserving_mlp_permutation_is_isomorphic(small_mlp: ArchSpec, rng: np.random.Generator) -> None:
    t = build_template(small_mlp, with_lpe=False)
    theta = rng.normal(size=small_mlp.num_params)
    perm = np.array([2, 0, 3, 1])
    good = _mlp_theta_permuted(theta, perm)
    bad = theta.copy()
    bad[:12] = theta[:12].reshape(4, 3)[perm].ravel()
    g = attach_window(t, _constant_window(theta))
    assert is_isomorphic(g, attach_window(t, _constant_window(good)))
    assert not is_isomorphic(g, attach_window(t, _constant_window(bad)))


@pytest.mark.parametrize("kind,expected", [
    ("qk_within", True), ("vo_within", True), ("qk_v_independent", True), ("head_reorder", True),
    ("cross_head_swap", False),
])
def test_msa_isomorphism_tracks_head_structure(kind: str, expected: bool) -> None:
    rng = np.random.default_rng(3)
    spec = msa_spec(6, 2)
    base = random_weights(6, 2, rng)
    permuted = permute_weights(base, 2, kind, rng)
    t = build_template(spec, "ours", with_lpe=False)
    a = attach_window(t, _constant_window(flat_from_weights(spec, base)))
    b = attach_window(t, _constant_window(flat_from_weights(spec, permuted)))
    assert is_isomorphic(a, b) is expected


# --------------------------- manifest and errors ---------------------------

def test_template_manifest_is_deterministic() -> None:
    spec = transformer_spec(20, 8, 1, 2, 4)
    a, b = build_template(spec), build_template(spec)
    text = template_manifest(a)
    assert text == template_manifest(b)
    back = load_template_manifest(text)
    np.testing.assert_array_equal(back.edge_index, a.edge_index)
    np.testing.assert_array_equal(back.edge_slot, a.edge_slot)
    np.testing.assert_array_equal(back.is_aux, a.is_aux)
    np.testing.assert_array_equal(back.lpe, a.lpe)
    assert back.arch_hash == spec.hash()


def test_spec_validation_errors(rng: np.random.Generator) -> None:
    with pytest.raises(UnsupportedArchitectureError):
        build_template(ArchSpec((LayerSpec("pooling", 4, 4),)))
    with pytest.raises(InvalidSpecError):
        build_template(msa_spec(6, 4))
    with pytest.raises(InvalidSpecError):
        build_template(mlp_spec([3, 2]), mode="dense")
    with pytest.raises(InvalidSpecError):
        ArchSpec((LayerSpec("linear", 3, 4), LayerSpec("linear", 5, 2))).validate()
    t = build_template(mlp_spec([3, 2, 1]), with_lpe=False)
    with pytest.raises(ShapeError):
        attach_window(t, ParameterWindow(rng.normal(size=(5, 3))))
    with pytest.raises(ShapeError):
        ParameterWindow(rng.normal(size=(11, 1)))


def test_arch_spec_dict_roundtrip() -> None:
    spec = transformer_spec(20, 8, 2, 2, 4)
    back = ArchSpec.from_dict(spec.to_dict())
    assert back.hash() == spec.hash()
    assert back.num_params == spec.num_params
