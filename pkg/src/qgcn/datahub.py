"""Synthetic skeleton motion, dataset bundles and their file formats."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import container
from .errors import BadCell, DataError, DegenerateBone2D, FormatError, IOFailure, MissingFrames, UnknownJoint
from .numerics import philox
from .quatkin import (
    derive_2d_rotations,
    derive_orientations,
    euler_to_quat,
    forward_kinematics,
    slerp,
)
from .skeleton import SkeletonTopology, topology_from_dict

DATA_MAGIC = b"QGCNDATA"
FIELDS = ("pose2d", "rot2d", "pose3d", "quats", "root3d")


@dataclass
class Sequence:
    pose2d: np.ndarray  # (T, N, 2), root-relative
    rot2d: np.ndarray  # (T, B, 2), (cos, sin)
    pose3d: np.ndarray | None = None  # (T, N, 3), absolute
    quats: np.ndarray | None = None  # (T, B, 4), local frames
    root3d: np.ndarray | None = None  # (T, 3)

    @property
    def n_frames(self) -> int:
        return self.pose2d.shape[0]

    @property
    def labeled(self) -> bool:
        return self.quats is not None


@dataclass
class DatasetBundle:
    topology: SkeletonTopology
    sequences: list[Sequence]
    metadata: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.sequences)

    def subset(self, indices) -> "DatasetBundle":
        return DatasetBundle(self.topology, [self.sequences[i] for i in indices], dict(self.metadata))

    def split(self, n_first: int) -> tuple["DatasetBundle", "DatasetBundle"]:
        """Split into the first ``n_first`` sequences and the rest (disjoint by construction)."""
        n = len(self.sequences)
        return self.subset(range(min(n_first, n))), self.subset(range(min(n_first, n), n))

    def n_labeled(self) -> int:
        return sum(s.labeled for s in self.sequences)

    def problems(self, tol2d: float = 1e-9, tol_fk: float = 1e-6) -> list[str]:
        """Consistency violations (empty when the bundle is sound)."""
        topo = self.topology
        out = []
        N, B = topo.n_joints, topo.n_bones
        for i, s in enumerate(self.sequences):
            T = s.n_frames
            shapes = {"pose2d": (T, N, 2), "rot2d": (T, B, 2), "pose3d": (T, N, 3), "quats": (T, B, 4), "root3d": (T, 3)}
            bad_shape = False
            for k, shp in shapes.items():
                a = getattr(s, k)
                if a is not None and a.shape != shp:
                    out.append(f"sequence {i}: {k} has shape {a.shape}, expected {shp}")
                    bad_shape = True
                if a is not None and not np.all(np.isfinite(a)):
                    out.append(f"sequence {i}: {k} has non-finite values")
            if bad_shape:
                continue
            try:
                rot = derive_2d_rotations(s.pose2d, topo)
                err = np.abs(rot - s.rot2d).max()
                if err > tol2d:
                    out.append(f"sequence {i}: rot2d differs from the 2D pose by {err:.3g}")
            except DegenerateBone2D as e:
                out.append(f"sequence {i}: {e}")
            if s.pose3d is not None:
                if s.root3d is None:
                    out.append(f"sequence {i}: pose3d without root3d")
                    continue
                centred = s.pose3d - s.pose3d[:, topo.root : topo.root + 1]
                err = np.abs(centred[..., :2] - s.pose2d).max()
                if err > tol2d:
                    out.append(f"sequence {i}: pose2d is not the projection of pose3d (off by {err:.3g})")
                err = np.abs(s.pose3d[:, topo.root] - s.root3d).max()
                if err > tol_fk:
                    out.append(f"sequence {i}: root3d differs from the root joint by {err:.3g}")
                if s.quats is not None:
                    lengths = np.linalg.norm(s.pose3d[:, [v for _, v in topo.bones]] - s.pose3d[:, [u for u, _ in topo.bones]], axis=-1)
                    fk = forward_kinematics(s.root3d, s.quats, topo, lengths)
                    err = np.abs(fk - s.pose3d).max()
                    if err > tol_fk:
                        out.append(f"sequence {i}: forward kinematics of quats misses pose3d by {err:.3g}")
            elif s.quats is not None:
                out.append(f"sequence {i}: quaternions without 3D coordinates")
        return out

    def validate(self, **tol) -> None:
        issues = self.problems(**tol)
        if issues:
            more = f" (+{len(issues) - 5} more)" if len(issues) > 5 else ""
            raise DataError("; ".join(issues[:5]) + more)


# ---------------------------------------------------------------------------
# synthetic motion


@dataclass
class MotionParams:
    amplitude: float = 0.6  # max per-axis angle from rest at a keyframe, radians
    keyframe_interval: int = 9  # frames between keyframes; bounds angular velocity
    twist_scale: float = 0.5  # twist amplitude relative to ``amplitude``
    min_bend: float = 0.25  # floor on the y-axis bend, radians, capped at ``amplitude``
    root_drift: float = 0.0  # max root displacement per keyframe
    min_projected: float = 1e-3  # projected bone length floor, relative to bone length
    max_retries: int = 20


def _keyframe_quats(rng: np.random.Generator, n_keys: int, n_bones: int, p: MotionParams) -> np.ndarray:
    a = p.amplitude
    alpha = rng.uniform(-a, a, (n_keys, n_bones)) * p.twist_scale
    beta = rng.uniform(min(p.min_bend, a), a, (n_keys, n_bones))
    gamma = rng.uniform(-a, a, (n_keys, n_bones))
    return euler_to_quat(alpha, beta, gamma)


def _interpolate(keys: np.ndarray, times: np.ndarray, T: int) -> np.ndarray:
    """Piecewise slerp of keyframes (K, ...) placed at ``times`` over frames 0..T-1."""
    out = np.empty((T,) + keys.shape[1:])
    for t in range(T):
        j = min(int(np.searchsorted(times, t, side="right")) - 1, len(times) - 2)
        u = (t - times[j]) / (times[j + 1] - times[j])
        out[t] = slerp(keys[j], keys[j + 1], np.full(keys.shape[1:-1], u))
    return out


def synthesize_sequence(topo: SkeletonTopology, T: int, rng: np.random.Generator, p: MotionParams) -> Sequence | None:
    """One candidate sequence, or None if a bone projects too short somewhere."""
    step = max(1, p.keyframe_interval)
    n_keys = max(2, math.ceil((T - 1) / step) + 1)
    times = np.arange(n_keys) * step
    keys = _keyframe_quats(rng, n_keys, topo.n_bones, p)
    quats = _interpolate(keys, times, T)
    root_keys = np.zeros((n_keys, 3))
    if p.root_drift > 0:
        root_keys = np.cumsum(rng.uniform(-p.root_drift, p.root_drift, (n_keys, 3)), axis=0)
    root3d = np.stack([np.interp(np.arange(T), times, root_keys[:, d]) for d in range(3)], axis=-1)
    pose3d = forward_kinematics(root3d, quats, topo)
    vec = pose3d[:, [v for _, v in topo.bones], :2] - pose3d[:, [u for u, _ in topo.bones], :2]
    if np.any(np.linalg.norm(vec, axis=-1) < p.min_projected * topo.bone_lengths):
        return None
    # canonical twist, so stored quaternions are what derive_orientations recovers
    quats = derive_orientations(pose3d, topo).quaternions
    pose3d = forward_kinematics(root3d, quats, topo)
    pose2d = pose3d[..., :2] - pose3d[:, topo.root : topo.root + 1, :2]
    return Sequence(pose2d=pose2d, rot2d=derive_2d_rotations(pose2d, topo), pose3d=pose3d, quats=quats, root3d=root3d)


def generate_synthetic(
    topo: SkeletonTopology, n_sequences: int, T: int, seed: int = 0, motion: MotionParams | None = None
) -> DatasetBundle:
    """FK-consistent random motion: slerp between random keyframe rotations.

    Sequence ``i`` draws from its own stream keyed by (seed, i, attempt), so
    sequences are independent of each other and of ``n_sequences``.
    """
    p = motion or MotionParams()
    if T < 1 or n_sequences < 0:
        raise ValueError("need T >= 1 and n_sequences >= 0")
    seqs = []
    for i in range(n_sequences):
        for attempt in range(p.max_retries):
            s = synthesize_sequence(topo, T, philox(seed, i, attempt), p)
            if s is not None:
                break
        else:
            raise DataError(f"sequence {i}: every attempt produced a bone parallel to the view axis")
        seqs.append(s)
    meta = {
        "units": topo.units,
        "fps": 50.0,
        "generator_seed": int(seed),
        "projection": "orthographic",
        "motion": vars(p).copy(),
    }
    bundle = DatasetBundle(topo, seqs, meta)
    bundle.validate()
    return bundle


def strip_labels(bundle: DatasetBundle, labeled_fraction: float, seed: int = 0) -> DatasetBundle:
    """Drop the quaternion labels of a seeded random subset of sequences.

    ``round(fraction * n)`` sequences keep their labels.  Retained data is
    shared, not copied, so it is bitwise unchanged.
    """
    if not 0.0 < labeled_fraction <= 1.0:
        raise ValueError("labeled_fraction must be in (0, 1]")
    n = len(bundle.sequences)
    keep = set(philox(seed, 0xC0FFEE).permutation(n)[: int(round(labeled_fraction * n))].tolist())
    seqs = [s if i in keep else replace(s, quats=None) for i, s in enumerate(bundle.sequences)]
    meta = dict(bundle.metadata)
    meta["labeled_fraction"] = labeled_fraction
    meta["strip_seed"] = int(seed)
    return DatasetBundle(bundle.topology, seqs, meta)


# ---------------------------------------------------------------------------
# binary format


def bundle_to_bytes(bundle: DatasetBundle) -> bytes:
    arrays = {}
    present = []
    for i, s in enumerate(bundle.sequences):
        have = []
        for k in FIELDS:
            a = getattr(s, k)
            if a is not None:
                arrays[f"seq{i}/{k}"] = a
                have.append(k)
        present.append(have)
    meta = {"topology": bundle.topology.to_dict(), "metadata": bundle.metadata, "sequences": present}
    return container.encode(DATA_MAGIC, meta, arrays)


def bundle_from_bytes(buf: bytes) -> DatasetBundle:
    _, meta, arrays = container.decode(buf, DATA_MAGIC)
    try:
        topo = topology_from_dict(meta["topology"])
        seqs = []
        for i, have in enumerate(meta["sequences"]):
            kw = {k: arrays[f"seq{i}/{k}"] for k in have}
            seqs.append(Sequence(**kw))
    except (KeyError, TypeError) as e:
        raise FormatError(f"bundle metadata is incomplete: {e}") from None
    return DatasetBundle(topo, seqs, meta.get("metadata", {}))


def save_bundle(bundle: DatasetBundle, path) -> None:
    container.write_bytes(path, bundle_to_bytes(bundle))


def load_bundle(path) -> DatasetBundle:
    try:
        buf = Path(path).read_bytes()
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from None
    return bundle_from_bytes(buf)


# ---------------------------------------------------------------------------
# CSV import


def _read_joint_csv(path, topo: SkeletonTopology, coords: tuple[str, ...]) -> np.ndarray:
    """Rows (frame, joint, *coords) -> array (F, N, len(coords)); frames must run contiguously."""
    try:
        fh = open(path, newline="")
    except OSError as e:
        raise IOFailure(f"cannot read {path}: {e}") from None
    with fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        want = ["frame", "joint", *coords]
        if header[: len(want)] != want:
            raise FormatError(f"{path}: header must start with {','.join(want)}, found {','.join(header)}")
        names = {n: i for i, n in enumerate(topo.joint_names)}
        values: dict[int, dict[int, list[float]]] = {}
        for row_no, row in enumerate(reader, start=2):
            if not row or all(not c.strip() for c in row):
                continue
            if len(row) < len(want):
                raise BadCell(f"{path}: row {row_no} has {len(row)} cells, expected {len(want)}")
            try:
                frame = int(row[0])
            except ValueError:
                raise BadCell(f"{path}: row {row_no}, column frame: {row[0]!r} is not an integer") from None
            joint = row[1].strip()
            if joint not in names:
                raise UnknownJoint(f"{path}: row {row_no}: joint {joint!r} is not in topology {topo.name}")
            vals = []
            for col, cell in zip(coords, row[2 : 2 + len(coords)]):
                try:
                    v = float(cell)
                except ValueError:
                    raise BadCell(f"{path}: row {row_no}, column {col}: {cell!r} is not a number") from None
                if not math.isfinite(v):
                    raise BadCell(f"{path}: row {row_no}, column {col}: {cell!r} is not finite")
                vals.append(v)
            values.setdefault(frame, {})[names[joint]] = vals
    if not values:
        raise MissingFrames(f"{path}: no data rows")
    frames = sorted(values)
    gaps = [(a, b) for a, b in zip(frames, frames[1:]) if b != a + 1]
    if gaps:
        desc = ", ".join(f"{a + 1}..{b - 1}" for a, b in gaps)
        raise MissingFrames(f"{path}: frame indices skip {desc}")
    out = np.empty((len(frames), topo.n_joints, len(coords)))
    for t, f in enumerate(frames):
        row = values[f]
        missing = [topo.joint_names[j] for j in range(topo.n_joints) if j not in row]
        if missing:
            raise MissingFrames(f"{path}: frame {f} lacks joints {', '.join(missing)}")
        for j, v in row.items():
            out[t, j] = v
    return out


def import_pose2d_csv(path, topo: SkeletonTopology) -> DatasetBundle:
    """2D detections (header frame,joint,x,y) as a one-sequence bundle without 3D fields."""
    pose2d = _read_joint_csv(path, topo, ("x", "y"))
    pose2d = pose2d - pose2d[:, topo.root : topo.root + 1]
    seq = Sequence(pose2d=pose2d, rot2d=derive_2d_rotations(pose2d, topo))
    return DatasetBundle(topo, [seq], {"units": topo.units, "source": str(path), "projection": "external"})


def import_pose3d_csv(paths, topo: SkeletonTopology, labeled: bool = True) -> DatasetBundle:
    """3D joints (header frame,joint,x,y,z), one file per sequence, as an oriented bundle.

    Orientations come from the joint positions; 2D inputs are the
    orthographic projection of the root-centred pose.
    """
    if isinstance(paths, (str, Path)):
        paths = [paths]
    seqs = []
    for path in paths:
        pose3d = _read_joint_csv(path, topo, ("x", "y", "z"))
        oriented = derive_orientations(pose3d, topo)
        pose2d = pose3d[..., :2] - pose3d[:, topo.root : topo.root + 1, :2]
        seqs.append(
            Sequence(
                pose2d=pose2d,
                rot2d=derive_2d_rotations(pose2d, topo),
                pose3d=pose3d,
                quats=oriented.quaternions if labeled else None,
                root3d=pose3d[:, topo.root].copy(),
            )
        )
    return DatasetBundle(topo, seqs, {"units": topo.units, "projection": "orthographic", "source": [str(p) for p in paths]})


def write_pose_csv(path, poses: np.ndarray, topo: SkeletonTopology) -> None:
    """Write (F, N, 2 or 3) joints in the CSV layout the importers read."""
    coords = ("x", "y", "z")[: poses.shape[-1]]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["frame", "joint", *coords])
        for t in range(poses.shape[0]):
            for j, name in enumerate(topo.joint_names):
                w.writerow([t, name, *(repr(float(v)) for v in poses[t, j])])
