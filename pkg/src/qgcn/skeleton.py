"""Skeleton topologies and the graph operators built on them.

A topology is a rooted tree: joints are vertices, bones are directed
parent -> child edges.  Four neighbour subsets are defined per element
(self, parent, child, symmetric/articulating), and from those we build
per-subset adjacency and incidence matrices, raw and normalized.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from importlib import resources
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import (
    CycleDetected,
    DisconnectedJoint,
    NonInvolutiveSymmetry,
    NonPositiveBoneLength,
    TopologyError,
    TopologyParseError,
)

K_SUBSETS = 4
ALPHA = 1e-3

SELF, PARENT, CHILD, SIDE = range(K_SUBSETS)

BUNDLED = ("h36m17", "humaneva16", "h3wb_body", "h3wb_face", "h3wb_lhand", "h3wb_rhand")


@dataclass(frozen=True, eq=False)
class SkeletonTopology:
    name: str
    joint_names: tuple[str, ...]
    root: int
    bones: tuple[tuple[int, int], ...]
    symmetry_pairs: tuple[tuple[int, int], ...] = ()
    articulation_hubs: frozenset[int] = frozenset()
    bone_lengths: np.ndarray = field(default_factory=lambda: np.zeros(0))
    units: str = "m"

    def __post_init__(self):
        object.__setattr__(self, "bone_lengths", np.asarray(self.bone_lengths, dtype=np.float64))
        self.bone_lengths.setflags(write=False)
        _validate(self)

    @property
    def n_joints(self) -> int:
        return len(self.joint_names)

    @property
    def n_bones(self) -> int:
        return len(self.bones)

    @cached_property
    def parent_of(self) -> tuple[int, ...]:
        """Parent joint index per joint; -1 for the root."""
        par = [-1] * self.n_joints
        for u, v in self.bones:
            par[v] = u
        return tuple(par)

    @cached_property
    def bone_of_child(self) -> tuple[int, ...]:
        """Index of the bone ending at each joint (-1 for the root)."""
        out = [-1] * self.n_joints
        for b, (_, v) in enumerate(self.bones):
            out[v] = b
        return tuple(out)

    @cached_property
    def child_bones(self) -> tuple[tuple[int, ...], ...]:
        out: list[list[int]] = [[] for _ in range(self.n_joints)]
        for b, (u, _) in enumerate(self.bones):
            out[u].append(b)
        return tuple(tuple(x) for x in out)

    @cached_property
    def parent_bone(self) -> tuple[int, ...]:
        """For each bone, the bone ending at its parent joint (-1 if that joint is the root)."""
        return tuple(self.bone_of_child[u] for u, _ in self.bones)

    @cached_property
    def bone_order(self) -> tuple[int, ...]:
        """Bones sorted so every parent bone precedes its children."""
        order, stack = [], list(reversed(self.child_bones[self.root]))
        while stack:
            b = stack.pop()
            order.append(b)
            stack.extend(reversed(self.child_bones[self.bones[b][1]]))
        return tuple(order)

    @cached_property
    def mirror_joint(self) -> np.ndarray:
        m = np.arange(self.n_joints)
        for a, b in self.symmetry_pairs:
            m[a], m[b] = b, a
        return m

    @cached_property
    def mirror_bone(self) -> np.ndarray:
        """Bone index of each bone's mirror image under the symmetry pairs."""
        lookup = {bone: i for i, bone in enumerate(self.bones)}
        mj = self.mirror_joint
        out = np.empty(self.n_bones, dtype=int)
        for i, (u, v) in enumerate(self.bones):
            key = (int(mj[u]), int(mj[v]))
            if key not in lookup:
                raise TopologyError(f"{self.name}: mirror of bone {self.bone_name(i)} is not a bone")
            out[i] = lookup[key]
        return out

    @cached_property
    def total_bone_length(self) -> float:
        return float(self.bone_lengths.sum())

    def joint_index(self, name: str) -> int:
        try:
            return self.joint_names.index(name)
        except ValueError:
            raise KeyError(name) from None

    def bone_name(self, b: int) -> str:
        u, v = self.bones[b]
        return f"{self.joint_names[u]}->{self.joint_names[v]}"

    def to_dict(self) -> dict:
        names = self.joint_names
        return {
            "name": self.name,
            "units": self.units,
            "joints": list(names),
            "root": names[self.root],
            "bones": [[names[u], names[v]] for u, v in self.bones],
            "symmetry": [[names[a], names[b]] for a, b in self.symmetry_pairs],
            "articulation_hubs": [names[h] for h in sorted(self.articulation_hubs)],
            "bone_lengths": [float(x) for x in self.bone_lengths],
        }


def _validate(topo: SkeletonTopology) -> None:
    n = topo.n_joints
    if n < 2:
        raise TopologyError(f"{topo.name}: need at least two joints")
    if len(set(topo.joint_names)) != n:
        raise TopologyParseError(f"{topo.name}: duplicate joint names")
    if not 0 <= topo.root < n:
        raise TopologyParseError(f"{topo.name}: root index {topo.root} out of range")
    parent = [-1] * n
    for u, v in topo.bones:
        if not (0 <= u < n and 0 <= v < n):
            raise TopologyParseError(f"{topo.name}: bone ({u},{v}) references unknown joint")
        if u == v:
            raise CycleDetected(f"{topo.name}: self-loop at joint {topo.joint_names[u]}")
        if v == topo.root:
            raise CycleDetected(f"{topo.name}: bone points into root {topo.joint_names[v]}")
        if parent[v] != -1:
            raise TopologyError(f"{topo.name}: joint {topo.joint_names[v]} has two parents")
        parent[v] = u
    # walk every joint up to the root
    for j in range(n):
        seen = set()
        k = j
        while k != topo.root:
            if k in seen:
                raise CycleDetected(f"{topo.name}: cycle through joint {topo.joint_names[k]}")
            seen.add(k)
            if parent[k] == -1:
                raise DisconnectedJoint(f"{topo.name}: joint {topo.joint_names[k]} is not connected to the root")
            k = parent[k]
    if len(topo.bones) != n - 1:
        raise TopologyError(f"{topo.name}: expected {n - 1} bones, got {len(topo.bones)}")
    if topo.bone_lengths.shape != (n - 1,):
        raise TopologyParseError(
            f"{topo.name}: bone_lengths has {topo.bone_lengths.size} entries, expected {n - 1}"
        )
    if not np.all(np.isfinite(topo.bone_lengths)) or np.any(topo.bone_lengths <= 0):
        raise NonPositiveBoneLength(f"{topo.name}: bone lengths must be finite and > 0")
    partner: dict[int, int] = {}
    for a, b in topo.symmetry_pairs:
        if a == b or a == topo.root or b == topo.root:
            raise NonInvolutiveSymmetry(f"{topo.name}: symmetry pair ({a},{b}) is degenerate or touches root")
        for x, y in ((a, b), (b, a)):
            if partner.get(x, y) != y:
                raise NonInvolutiveSymmetry(
                    f"{topo.name}: joint {topo.joint_names[x]} mirrored to two different joints"
                )
            partner[x] = y
    for h in topo.articulation_hubs:
        if not 0 <= h < n:
            raise TopologyParseError(f"{topo.name}: articulation hub {h} out of range")


def _resolve(ref, names: Sequence[str], what: str) -> int:
    if isinstance(ref, bool):
        raise TopologyParseError(f"bad {what} reference {ref!r}")
    if isinstance(ref, int):
        return ref
    if isinstance(ref, str):
        try:
            return names.index(ref)
        except ValueError:
            raise TopologyParseError(f"unknown joint {ref!r} in {what}") from None
    raise TopologyParseError(f"bad {what} reference {ref!r}")


def topology_from_dict(d: dict, name: str | None = None) -> SkeletonTopology:
    try:
        joints = [str(j) for j in d["joints"]]
        root = _resolve(d["root"], joints, "root")
        bones = tuple((_resolve(u, joints, "bones"), _resolve(v, joints, "bones")) for u, v in d["bones"])
        sym = tuple((_resolve(a, joints, "symmetry"), _resolve(b, joints, "symmetry")) for a, b in d.get("symmetry", []))
        hubs = frozenset(_resolve(h, joints, "articulation_hubs") for h in d.get("articulation_hubs", []))
        lengths = [float(x) for x in d["bone_lengths"]]
    except KeyError as exc:
        raise TopologyParseError(f"missing field {exc.args[0]!r}") from None
    except (TypeError, ValueError) as exc:
        raise TopologyParseError(f"malformed topology: {exc}") from None
    return SkeletonTopology(
        name=str(d.get("name", name or "topology")),
        joint_names=tuple(joints),
        root=root,
        bones=bones,
        symmetry_pairs=sym,
        articulation_hubs=hubs,
        bone_lengths=np.array(lengths),
        units=str(d.get("units", "m")),
    )


def load_topology(path: str | Path) -> SkeletonTopology:
    """Load a ``.topo`` file, or a bundled topology when given a bare name like ``"h36m17"``."""
    p = Path(path)
    if not p.exists() and str(path) in BUNDLED:
        return bundled_topology(str(path))
    try:
        text = p.read_text()
    except OSError as exc:
        raise TopologyParseError(f"cannot read {path}: {exc}") from None
    try:
        d = json.loads(text)
    except json.JSONDecodeError as exc:
        raise TopologyParseError(f"{path}: {exc}") from None
    if not isinstance(d, dict):
        raise TopologyParseError(f"{path}: top level must be an object")
    return topology_from_dict(d, name=p.stem)


def bundled_topology(name: str) -> SkeletonTopology:
    if name not in BUNDLED:
        raise TopologyParseError(f"no bundled topology {name!r}; choose from {', '.join(BUNDLED)}")
    text = resources.files("qgcn.topologies").joinpath(f"{name}.topo").read_text()
    return topology_from_dict(json.loads(text), name=name)


def save_topology(topo: SkeletonTopology, path: str | Path) -> None:
    Path(path).write_text(json.dumps(topo.to_dict(), indent=2) + "\n")


def chain_topology(n_bones: int, length: float = 1.0, name: str = "chain") -> SkeletonTopology:
    """A straight chain root -> j1 -> ... -> jn, handy for tests."""
    joints = tuple(f"j{i}" for i in range(n_bones + 1))
    return SkeletonTopology(
        name=name,
        joint_names=joints,
        root=0,
        bones=tuple((i, i + 1) for i in range(n_bones)),
        bone_lengths=np.full(n_bones, float(length)),
    )


# ---------------------------------------------------------------------------
# neighbour subsets


@dataclass(frozen=True)
class SubsetPartition:
    kind: str  # "vertex" or "edge"
    subsets: tuple[tuple[tuple[int, ...], ...], ...]  # [element][k] -> indices

    @property
    def cardinalities(self) -> np.ndarray:
        return np.array([[len(s) for s in elem] for elem in self.subsets], dtype=int)

    def __len__(self):
        return len(self.subsets)


def build_partitions(topo: SkeletonTopology) -> tuple[SubsetPartition, SubsetPartition]:
    par = topo.parent_of
    mirror = topo.mirror_joint
    vert = []
    for n in range(topo.n_joints):
        parents = (par[n],) if par[n] >= 0 else ()
        children = tuple(topo.bones[b][1] for b in topo.child_bones[n])
        side = (int(mirror[n]),) if mirror[n] != n else ()
        vert.append(((n,), parents, children, side))

    edge = []
    for b, (u, v) in enumerate(topo.bones):
        pb = topo.bone_of_child[u]
        parents = (pb,) if pb >= 0 else ()
        children = topo.child_bones[v]
        side = tuple(s for s in topo.child_bones[u] if s != b) if u in topo.articulation_hubs else ()
        edge.append(((b,), parents, tuple(children), side))
    return SubsetPartition("vertex", tuple(vert)), SubsetPartition("edge", tuple(edge))


# ---------------------------------------------------------------------------
# operators

OPERATOR_NAMES = (
    "vertex_adjacency",
    "edge_adjacency",
    "parent_incidence_v",
    "child_incidence_v",
    "parent_incidence_e",
    "child_incidence_e",
    "vertex_adjacency_sym",
    "edge_adjacency_sym",
)


@dataclass(frozen=True, eq=False)
class GraphOperatorSet:
    """Per-subset operators, each stored as a (K, rows, cols) array.

    ``raw`` holds 0/1 matrices, ``normalized`` the degree-normalized ones.
    The ``*_sym`` entries are the symmetrized adjacencies used when the
    graph is treated as undirected.
    """

    raw: dict
    normalized: dict
    norm_exponent: float = -0.5
    alpha: float = ALPHA

    def __getitem__(self, name: str) -> np.ndarray:
        return self.normalized[name]

    @property
    def K(self) -> int:
        return K_SUBSETS


def _incidence(topo: SkeletonTopology) -> dict[str, np.ndarray]:
    N, B = topo.n_joints, topo.n_bones
    Pv = np.zeros((N, B))  # bone b is the parent bone of joint n (ends at n)
    Cv = np.zeros((N, B))  # bone b is a child bone of joint n (starts at n)
    for b, (u, v) in enumerate(topo.bones):
        Pv[v, b] = 1.0
        Cv[u, b] = 1.0
    Pe = Cv.T.copy()  # joint n is the parent joint of bone b
    Ce = Pv.T.copy()  # joint n is the child joint of bone b
    return {"Pv": Pv, "Cv": Cv, "Pe": Pe, "Ce": Ce}


def _subset_matrix(part: SubsetPartition) -> np.ndarray:
    n = len(part)
    A = np.zeros((K_SUBSETS, n, n))
    for i, elem in enumerate(part.subsets):
        for k, members in enumerate(elem):
            A[k, i, list(members)] = 1.0
    return A


def normalize(A: np.ndarray, exponent: float = -0.5, alpha: float = ALPHA) -> np.ndarray:
    """Degree-normalize a stack of (possibly rectangular) 0/1 matrices.

    Square matrices use the row-degree diagonal on both sides.  Rectangular
    ones are treated as bipartite adjacency: row degrees on the left,
    column degrees on the right.
    """
    A = np.asarray(A, dtype=np.float64)
    row = A.sum(axis=-1) + alpha
    col = row if A.shape[-1] == A.shape[-2] else A.sum(axis=-2) + alpha
    return (row ** exponent)[..., :, None] * A * (col ** exponent)[..., None, :]


def build_operators(
    topo: SkeletonTopology,
    partitions: tuple[SubsetPartition, SubsetPartition] | None = None,
    norm_exponent: float = -0.5,
    alpha: float = ALPHA,
) -> GraphOperatorSet:
    if partitions is None:
        partitions = build_partitions(topo)
    vpart, epart = partitions
    Av = _subset_matrix(vpart)
    Ae = _subset_matrix(epart)
    inc = _incidence(topo)
    # subset k of the incidence maps: the bones (joints) attached to the
    # members of subset k, in the given parent/child role
    raw = {
        "vertex_adjacency": Av,
        "edge_adjacency": Ae,
        "parent_incidence_v": np.minimum(Av @ inc["Pv"], 1.0),
        "child_incidence_v": np.minimum(Av @ inc["Cv"], 1.0),
        "parent_incidence_e": np.minimum(Ae @ inc["Pe"], 1.0),
        "child_incidence_e": np.minimum(Ae @ inc["Ce"], 1.0),
        "vertex_adjacency_sym": np.minimum(Av + Av.transpose(0, 2, 1), 1.0),
        "edge_adjacency_sym": np.minimum(Ae + Ae.transpose(0, 2, 1), 1.0),
    }
    normed = {k: normalize(v, norm_exponent, alpha) for k, v in raw.items()}
    for d in (raw, normed):
        for v in d.values():
            v.setflags(write=False)
    return GraphOperatorSet(raw=raw, normalized=normed, norm_exponent=norm_exponent, alpha=alpha)
