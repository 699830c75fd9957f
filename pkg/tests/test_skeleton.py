import json

import numpy as np
import pytest

from qgcn.errors import (
    CycleDetected,
    DisconnectedJoint,
    NonInvolutiveSymmetry,
    NonPositiveBoneLength,
    TopologyParseError,
)
from qgcn.skeleton import (
    ALPHA,
    CHILD,
    PARENT,
    SELF,
    SIDE,
    bundled_topology,
    build_operators,
    build_partitions,
    chain_topology,
    load_topology,
    normalize,
    save_topology,
    topology_from_dict,
)


def _two_joint():
    return {"joints": ["a", "b"], "root": "a", "bones": [["a", "b"]], "bone_lengths": [1.0]}


@pytest.mark.parametrize(
    "name,n,b",
    [("h36m17", 17, 16), ("humaneva16", 16, 15), ("h3wb_rhand", 21, 20), ("h3wb_lhand", 21, 20)],
)
def test_bundled_sizes(name, n, b):
    topo = load_topology(name)
    assert (topo.n_joints, topo.n_bones) == (n, b)


def test_two_joint_chain(tmp_path):
    path = tmp_path / "two.topo"
    path.write_text(json.dumps(_two_joint()))
    topo = load_topology(path)
    assert (topo.n_joints, topo.n_bones) == (2, 1)
    assert topo.symmetry_pairs == ()
    vert, edge = build_partitions(topo)
    assert vert.subsets[0] == ((0,), (), (1,), ())
    assert vert.subsets[1] == ((1,), (0,), (), ())
    assert edge.subsets[0] == ((0,), (), (), ())


def test_tree_invariants(any_topology):
    topo = any_topology
    assert topo.n_bones == topo.n_joints - 1
    for u, v in topo.bones:
        assert topo.parent_of[v] == u
    assert topo.parent_of[topo.root] == -1
    assert np.all(topo.bone_lengths > 0)
    m = topo.mirror_joint
    assert np.array_equal(m[m], np.arange(topo.n_joints))
    assert m[topo.root] == topo.root


def test_save_load_roundtrip(tmp_path, any_topology):
    path = tmp_path / "t.topo"
    save_topology(any_topology, path)
    again = load_topology(path)
    assert again.to_dict() == any_topology.to_dict()


@pytest.mark.parametrize(
    "mutate,error",
    [
        (lambda d: d.update(bones=[["a", "b"], ["b", "a"]], joints=["a", "b"], bone_lengths=[1, 1]), CycleDetected),
        (lambda d: d.update(bones=[["a", "a"]]), CycleDetected),
        (lambda d: d.update(joints=["a", "b", "c"], bones=[["a", "b"], ["c", "c"]], bone_lengths=[1, 1]), CycleDetected),
        (lambda d: d.update(joints=["a", "b", "c", "d"], bones=[["a", "b"], ["c", "d"], ["d", "c"]],
                            bone_lengths=[1, 1, 1]), CycleDetected),
        (lambda d: d.update(bone_lengths=[0.0]), NonPositiveBoneLength),
        (lambda d: d.update(bone_lengths=[-1.0]), NonPositiveBoneLength),
        (lambda d: d.update(joints=["a", "b", "c"], bones=[["a", "b"], ["a", "c"]], bone_lengths=[1, 1],
                            symmetry=[["b", "c"], ["b", "a"]]), NonInvolutiveSymmetry),
        (lambda d: d.update(symmetry=[["a", "b"]]), NonInvolutiveSymmetry),
        (lambda d: d.pop("bones"), TopologyParseError),
        (lambda d: d.update(bones=[["a", "zz"]]), TopologyParseError),
    ],
)
def test_validation_errors(mutate, error):
    d = _two_joint()
    mutate(d)
    with pytest.raises(error):
        topology_from_dict(d)


def test_disconnected_joint():
    # c's parent chain never reaches the root: c -> d -> c would be a cycle, so use a
    # forest where d has no parent at all
    d = {"joints": ["a", "b", "c", "d"], "root": "a", "bones": [["a", "b"], ["d", "c"], ["b", "a"]],
         "bone_lengths": [1, 1, 1]}
    with pytest.raises((DisconnectedJoint, CycleDetected)):
        topology_from_dict(d)
    d = {"joints": ["a", "b", "c", "d"], "root": "a", "bones": [["a", "b"], ["d", "c"]], "bone_lengths": [1, 1]}
    with pytest.raises(DisconnectedJoint):
        topology_from_dict(d)


def test_malformed_file(tmp_path):
    p = tmp_path / "bad.topo"
    p.write_text("{not json")
    with pytest.raises(TopologyParseError):
        load_topology(p)
    with pytest.raises(TopologyParseError):
        load_topology(tmp_path / "missing.topo")


def test_h36m_vertex_examples(h36m):
    vert, edge = build_partitions(h36m)
    lw = h36m.joint_index("left_wrist")
    rw = h36m.joint_index("right_wrist")
    assert vert.subsets[lw][CHILD] == ()
    assert vert.subsets[lw][SIDE] == (rw,)
    root = h36m.root
    assert vert.subsets[root][PARENT] == ()


def test_h36m_articulating_edges(h36m):
    _, edge = build_partitions(h36m)
    names = [h36m.bone_name(b) for b in range(h36m.n_bones)]
    ls = names.index("thorax->left_shoulder")
    neck = names.index("thorax->neck")
    rs = names.index("thorax->right_shoulder")
    assert set(edge.subsets[ls][SIDE]) == {neck, rs}
    # bones off a non-hub joint have no articulating siblings
    rh = names.index("pelvis->right_hip")
    assert edge.subsets[rh][SIDE] == ()


def test_partition_invariants(any_topology):
    topo = any_topology
    vert, edge = build_partitions(topo)
    for part in (vert, edge):
        for i, elem in enumerate(part.subsets):
            assert elem[SELF] == (i,)
        Z = part.cardinalities
        assert Z.shape == (len(part), 4)
        assert np.all(Z[:, SELF] == 1)
    m = topo.mirror_joint
    for n, elem in enumerate(vert.subsets):
        assert elem[SIDE] == (() if m[n] == n else (int(m[n]),))
    for b, elem in enumerate(edge.subsets):
        u = topo.bones[b][0]
        if u in topo.articulation_hubs:
            expected = set(topo.child_bones[u]) - {b}
        else:
            expected = set()
        assert set(elem[SIDE]) == expected


def test_raw_operators_match_partitions(any_topology):
    topo = any_topology
    vert, edge = build_partitions(topo)
    ops = build_operators(topo)
    for part, name in ((vert, "vertex_adjacency"), (edge, "edge_adjacency")):
        A = ops.raw[name]
        n = len(part)
        for k in range(4):
            for i in range(n):
                onehot = np.zeros(n)
                onehot[i] = 1.0
                indicator = A[k] @ onehot  # column i: which rows include i
                rows = {r for r in range(n) if i in part.subsets[r][k]}
                assert set(np.flatnonzero(indicator)) == rows
        assert set(np.unique(A)) <= {0.0, 1.0}
        assert np.array_equal(A[0], np.eye(n))


def test_incidence_definitions(any_topology):
    topo = any_topology
    ops = build_operators(topo)
    Pv, Cv = ops.raw["parent_incidence_v"][0], ops.raw["child_incidence_v"][0]
    Pe, Ce = ops.raw["parent_incidence_e"][0], ops.raw["child_incidence_e"][0]
    for n in range(topo.n_joints):
        for b, (u, v) in enumerate(topo.bones):
            assert Pv[n, b] == (1.0 if v == n else 0.0)
            assert Cv[n, b] == (1.0 if u == n else 0.0)
            assert Pe[b, n] == (1.0 if u == n else 0.0)
            assert Ce[b, n] == (1.0 if v == n else 0.0)
    assert np.array_equal(Pv, Ce.T)
    assert np.array_equal(Cv, Pe.T)


def test_parent_row_sums(h36m):
    A1 = build_operators(h36m).raw["vertex_adjacency"][PARENT]
    sums = A1.sum(axis=1)
    expected = np.ones(h36m.n_joints)
    expected[h36m.root] = 0.0
    assert np.array_equal(sums, expected)


def test_normalized_finite_and_bounded(any_topology):
    ops = build_operators(any_topology)
    for name, M in ops.normalized.items():
        assert np.all(np.isfinite(M)), name
        assert M.min() >= 0.0 and M.max() <= 1.0 / ALPHA, name


def test_empty_row_normalizes_to_zero():
    A = np.zeros((1, 3, 3))
    A[0, 1, 2] = 1.0
    out = normalize(A)
    assert np.all(np.isfinite(out))
    assert np.all(out[0, 0] == 0.0)


def test_normalization_formula():
    A = np.array([[[1.0, 1.0, 0.0], [1.0, 1.0, 1.0], [0.0, 1.0, 0.0]]])
    d = A[0].sum(axis=1) + ALPHA
    expected = A[0] / np.sqrt(np.outer(d, d))
    assert np.allclose(normalize(A)[0], expected, rtol=0, atol=1e-15)
    # rectangular: rows use row degrees, columns use column degrees
    R = np.array([[[1.0, 0.0], [1.0, 1.0], [0.0, 0.0]]])
    r = R[0].sum(axis=1) + ALPHA
    c = R[0].sum(axis=0) + ALPHA
    assert np.allclose(normalize(R)[0], R[0] / np.sqrt(np.outer(r, c)), rtol=0, atol=1e-15)
    # positive exponent is available as a switch
    assert np.allclose(normalize(A, exponent=0.5)[0], A[0] * np.sqrt(np.outer(d, d)), rtol=0, atol=1e-12)


def test_reindexing_permutes_operators(h36m, rng):
    perm = rng.permutation(h36m.n_joints)
    perm = perm[perm != h36m.root]
    perm = np.concatenate([[h36m.root], perm])  # keep root first for readability
    inv = np.argsort(perm)
    d = h36m.to_dict()
    d["joints"] = [h36m.joint_names[p] for p in perm]
    relabeled = topology_from_dict(d)
    a = build_operators(h36m).normalized["vertex_adjacency"]
    b = build_operators(relabeled).normalized["vertex_adjacency"]
    # joint j of the original is joint inv[j] of the relabeled topology
    assert np.allclose(b[:, inv][:, :, inv], a, rtol=0, atol=1e-15)


def test_chain_topology():
    topo = chain_topology(3, 0.5)
    assert topo.n_bones == 3 and topo.total_bone_length == pytest.approx(1.5)
    assert topo.bone_order == (0, 1, 2)


def test_bundled_unknown_name():
    with pytest.raises(TopologyParseError):
        bundled_topology("nope")
