"""Quaternion and Euler-angle kinematics on skeleton topologies.

Quaternions are numpy arrays with last axis (w, x, y, z).  All functions
broadcast over leading axes, so a (T, B, 4) array is a sequence of poses.

Conventions
-----------
* every bone rests along the +x axis of its local frame;
* the world frame has x right, y up, z pointing into depth, and the 2D
  projection is orthographic (drop z);
* a bone's 2D rotation is the signed angle from its parent bone's 2D
  direction; bones hanging off the root are measured from global +y.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DegenerateBone, DegenerateBone2D, ParallelReference
from .skeleton import SkeletonTopology

EPS_LEN = 1e-8
IDENTITY = np.array([1.0, 0.0, 0.0, 0.0])
REST_DIRECTION = np.array([1.0, 0.0, 0.0])
ROOT_REFERENCE_2D = np.array([0.0, 1.0])


def qmul(a, b):
    """Hamilton product without renormalization."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    aw, ax, ay, az = np.moveaxis(a, -1, 0)
    bw, bx, by, bz = np.moveaxis(b, -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def canonicalize(q):
    """Pick the representative with w >= 0 (ties broken by the first nonzero of x, y, z)."""
    q = np.array(q, dtype=np.float64)
    sign = np.sign(q[..., 0])
    for i in (1, 2, 3):
        sign = np.where(sign == 0, np.sign(q[..., i]), sign)
    sign = np.where(sign == 0, 1.0, sign)
    return q * sign[..., None]


def quat_multiply(a, b):
    return canonicalize(quat_normalize(qmul(a, b)))


def quat_conjugate(q):
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_inverse(q):
    q = np.asarray(q, dtype=np.float64)
    return quat_conjugate(q) / np.sum(q * q, axis=-1, keepdims=True)


def quat_from_axis_angle(axis, angle):
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis, axis=-1, keepdims=True)
    half = 0.5 * np.asarray(angle, dtype=np.float64)[..., None]
    return np.concatenate([np.cos(half), np.sin(half) * axis], axis=-1)


def quat_rotate(q, v):
    """Rotate vectors ``v`` (..., 3) by unit quaternions ``q`` (..., 4)."""
    q = np.asarray(q, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    w = q[..., :1]
    u = q[..., 1:]
    t = 2.0 * np.cross(u, v)
    return v + w * t + np.cross(u, t)


def quat_to_matrix(q):
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        -2,
    )


def wcs_to_lcs(q_parent_wcs, q_child_wcs):
    """Child orientation relative to its parent: Inv(parent) x child."""
    return canonicalize(quat_normalize(qmul(quat_inverse(q_parent_wcs), q_child_wcs)))


def lcs_to_wcs(q_parent_wcs, q_child_lcs):
    return canonicalize(quat_normalize(qmul(q_parent_wcs, q_child_lcs)))


def slerp(q0, q1, t):
    """Great-circle interpolation, taking the short way round."""
    q0 = quat_normalize(q0)
    q1 = quat_normalize(q1)
    t = np.asarray(t, dtype=np.float64)
    dot = np.sum(q0 * q1, axis=-1, keepdims=True)
    q1 = np.where(dot < 0, -q1, q1)
    dot = np.abs(dot)
    theta = np.arccos(np.clip(dot, -1.0, 1.0))
    sin_t = np.sin(theta)
    tt = t[..., None] if t.ndim else t
    small = sin_t < 1e-12
    w0 = np.where(small, 1.0 - tt, np.sin((1.0 - tt) * theta) / np.where(small, 1.0, sin_t))
    w1 = np.where(small, tt, np.sin(tt * theta) / np.where(small, 1.0, sin_t))
    return quat_normalize(w0 * q0 + w1 * q1)


def angular_distance(q1, q2):
    """Geodesic angle between two rotations in [0, pi]; q and -q count as equal."""
    re = np.sum(np.asarray(q1, dtype=np.float64) * np.asarray(q2, dtype=np.float64), axis=-1)
    return 2.0 * np.arccos(np.clip(np.abs(re), 0.0, 1.0))


# ---------------------------------------------------------------------------
# Euler angles


def _rot_z_inv(gamma, v):
    c, s = np.cos(gamma), np.sin(gamma)
    x, y, z = np.moveaxis(v, -1, 0)
    return np.stack([c * x + s * y, -s * x + c * y, z], -1)


def _rot_y_inv(beta, v):
    c, s = np.cos(beta), np.sin(beta)
    x, y, z = np.moveaxis(v, -1, 0)
    return np.stack([c * x - s * z, y, s * x + c * z], -1)


def _euler_parts(v, r, eps):
    v = np.asarray(v, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    vn = np.linalg.norm(v, axis=-1)
    gamma = np.arctan2(v[..., 1], v[..., 0])
    beta = np.arctan2(-v[..., 2], np.hypot(v[..., 0], v[..., 1]))
    # undo the z then y rotations; what is left of r is a pure x rotation
    rx = _rot_y_inv(beta, _rot_z_inv(gamma, r))
    alpha = np.arctan2(rx[..., 2], rx[..., 1])
    parallel = np.linalg.norm(np.cross(v, r), axis=-1) <= eps * vn * np.linalg.norm(r, axis=-1)
    return alpha, beta, gamma, vn, parallel


def bone_euler(v, r, eps: float = EPS_LEN):
    """Euler angles (alpha, beta, gamma) of bone vector ``v`` with reference ``r``.

    The bone frame is Rz(gamma) Ry(beta) Rx(alpha): gamma and beta point the
    rest axis +x along ``v``; alpha twists the frame so that ``r`` lies in
    its local xy half-plane with positive y.
    """
    alpha, beta, gamma, vn, parallel = _euler_parts(v, r, eps)
    if np.any(vn <= eps):
        raise DegenerateBone(f"bone vector length {np.min(vn):.3g} <= {eps}")
    if np.any(parallel):
        raise ParallelReference("reference vector is parallel to the bone")
    return alpha, beta, gamma


def euler_matrix(alpha, beta, gamma):
    """Rz(gamma) @ Ry(beta) @ Rx(alpha)."""
    ca, sa = np.cos(alpha), np.sin(alpha)
    cb, sb = np.cos(beta), np.sin(beta)
    cg, sg = np.cos(gamma), np.sin(gamma)
    Rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    Ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    Rz = np.array([[cg, -sg, 0], [sg, cg, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def euler_to_quat(alpha, beta, gamma):
    """Quaternion of Rz(gamma) Ry(beta) Rx(alpha): x applied first, then y, then z."""
    alpha, beta, gamma = (np.asarray(a, dtype=np.float64) for a in (alpha, beta, gamma))
    zero = np.zeros(np.broadcast(alpha, beta, gamma).shape)
    qx = np.stack([np.cos(alpha / 2) + zero, np.sin(alpha / 2) + zero, zero, zero], -1)
    qy = np.stack([np.cos(beta / 2) + zero, zero, np.sin(beta / 2) + zero, zero], -1)
    qz = np.stack([np.cos(gamma / 2) + zero, zero, zero, np.sin(gamma / 2) + zero], -1)
    return canonicalize(quat_normalize(qmul(qmul(qz, qy), qx)))


def axis_angle_direction_cosines(theta, alpha, beta, gamma):
    """Quaternion from a rotation angle and the direction angles of its axis.

    (cos(theta/2), sin(theta/2) cos(alpha), sin(theta/2) cos(beta),
    sin(theta/2) cos(gamma)).  Only a unit quaternion when the three angles
    are genuine direction angles (cos^2 sum to one); it is NOT the same
    thing as composing x-y-z Euler angles, which is what ``euler_to_quat``
    does.
    """
    h = 0.5 * np.asarray(theta, dtype=np.float64)
    s = np.sin(h)
    return np.stack([np.cos(h), s * np.cos(alpha), s * np.cos(beta), s * np.cos(gamma)], -1)


# ---------------------------------------------------------------------------
# skeleton-level kinematics


@dataclass
class OrientedPose3D:
    root_position: np.ndarray  # (..., 3)
    quaternions: np.ndarray  # (..., B, 4), local frames, topology bone order
    joint_positions: np.ndarray | None = None  # (..., N, 3)
    bone_lengths: np.ndarray | None = None  # (..., B); topology lengths when None


def world_orientations(quats, topo: SkeletonTopology):
    """Compose local bone quaternions down the tree into world orientations."""
    quats = np.asarray(quats, dtype=np.float64)
    wcs = np.empty_like(quats)
    for b in topo.bone_order:
        pb = topo.parent_bone[b]
        if pb < 0:
            wcs[..., b, :] = quat_normalize(quats[..., b, :])
        else:
            wcs[..., b, :] = quat_normalize(qmul(wcs[..., pb, :], quats[..., b, :]))
    return wcs


def forward_kinematics(root, quats, topo: SkeletonTopology, bone_lengths=None):
    """Joint positions (..., N, 3) from a root position and local bone quaternions."""
    root = np.asarray(root, dtype=np.float64)
    quats = np.asarray(quats, dtype=np.float64)
    lengths = topo.bone_lengths if bone_lengths is None else np.asarray(bone_lengths, dtype=np.float64)
    lengths = np.broadcast_to(lengths, quats.shape[:-1])
    wcs = world_orientations(quats, topo)
    dirs = quat_rotate(wcs, REST_DIRECTION)
    lead = np.broadcast_shapes(root.shape[:-1], quats.shape[:-2])
    out = np.empty(lead + (topo.n_joints, 3))
    out[..., topo.root, :] = root
    for b in topo.bone_order:
        u, v = topo.bones[b]
        out[..., v, :] = out[..., u, :] + dirs[..., b, :] * lengths[..., b, None]
    return out


def bone_vectors(pose, topo: SkeletonTopology):
    pose = np.asarray(pose, dtype=np.float64)
    parents = np.array([u for u, _ in topo.bones])
    children = np.array([v for _, v in topo.bones])
    return pose[..., children, :] - pose[..., parents, :]


def derive_orientations(pose3d, topo: SkeletonTopology, eps: float = EPS_LEN) -> OrientedPose3D:
    """Recover local bone quaternions from joint positions.

    Each bone's twist is fixed by its first child bone; bones whose child is
    parallel to them get zero twist.  Leaf bones get zero twist relative to
    their parent frame: their local quaternion is Rz(gamma) Ry(beta) of the
    bone direction expressed in that frame.
    """
    pose3d = np.asarray(pose3d, dtype=np.float64)
    vecs = bone_vectors(pose3d, topo)
    lengths = np.linalg.norm(vecs, axis=-1)
    if np.any(lengths <= eps):
        b = int(np.argmin(lengths.reshape(-1, topo.n_bones).min(axis=0)))
        raise DegenerateBone(f"bone {topo.bone_name(b)} has length <= {eps}")
    # reference vector: first child bone, or an arbitrary stand-in for leaves
    refs = np.empty_like(vecs)
    has_child = np.zeros(topo.n_bones, dtype=bool)
    for b, (_, v) in enumerate(topo.bones):
        kids = topo.child_bones[v]
        if kids:
            refs[..., b, :] = vecs[..., kids[0], :]
            has_child[b] = True
        else:
            refs[..., b, :] = np.array([0.0, 1.0, 0.0])
    alpha, beta, gamma, _, parallel = _euler_parts(vecs, refs, eps)
    alpha = np.where(has_child & ~parallel, alpha, 0.0)
    wcs = euler_to_quat(alpha, beta, gamma)
    lcs = np.empty_like(wcs)
    for b in range(topo.n_bones):
        pb = topo.parent_bone[b]
        if pb < 0:
            lcs[..., b, :] = wcs[..., b, :]
        elif has_child[b]:
            lcs[..., b, :] = wcs_to_lcs(wcs[..., pb, :], wcs[..., b, :])
        else:
            # leaf: zero twist measured in the parent frame, which stays smooth
            # wherever the bone points short of straight back along its parent
            d = quat_rotate(quat_conjugate(wcs[..., pb, :]), vecs[..., b, :])
            _, lb, lg, _, _ = _euler_parts(d, np.broadcast_to([0.0, 1.0, 0.0], d.shape), eps)
            lcs[..., b, :] = euler_to_quat(0.0, lb, lg)
    lcs = canonicalize(lcs)
    return OrientedPose3D(
        root_position=pose3d[..., topo.root, :].copy(),
        quaternions=lcs,
        joint_positions=pose3d.copy(),
        bone_lengths=lengths,
    )


def _angles_from_directions(dirs2d, topo: SkeletonTopology, eps: float, what: str):
    norms = np.linalg.norm(dirs2d, axis=-1)
    if np.any(norms <= eps):
        b = int(np.argmin(norms.reshape(-1, topo.n_bones).min(axis=0)))
        raise DegenerateBone2D(f"{what}: bone {topo.bone_name(b)} has projected length <= {eps}")
    ref = np.empty_like(dirs2d)
    for b in range(topo.n_bones):
        pb = topo.parent_bone[b]
        ref[..., b, :] = ROOT_REFERENCE_2D if pb < 0 else dirs2d[..., pb, :]
    cross = ref[..., 0] * dirs2d[..., 1] - ref[..., 1] * dirs2d[..., 0]
    dot = np.sum(ref * dirs2d, axis=-1)
    theta = np.arctan2(cross, dot)
    return np.stack([np.cos(theta), np.sin(theta)], axis=-1)


def derive_2d_rotations(pose2d, topo: SkeletonTopology, eps: float = EPS_LEN):
    """(cos, sin) of each bone's signed 2D angle relative to its parent bone, shape (..., B, 2)."""
    return _angles_from_directions(bone_vectors(pose2d, topo), topo, eps, "derive_2d_rotations")


def project_rotations_2d(pose, topo: SkeletonTopology, eps: float = EPS_LEN):
    """2D bone rotations seen by an orthographic camera looking down +z.

    ``pose`` is an :class:`OrientedPose3D` or a bare (..., B, 4) array of
    local quaternions.  Bone lengths scale the projected vectors uniformly,
    so they do not change the angles and are not needed.
    """
    quats = pose.quaternions if isinstance(pose, OrientedPose3D) else pose
    dirs = quat_rotate(world_orientations(quats, topo), REST_DIRECTION)
    return _angles_from_directions(dirs[..., :2], topo, eps, "project_rotations_2d")


def rotation_angles(rot2d):
    """Angles in [-pi, pi] from (cos, sin) pairs."""
    rot2d = np.asarray(rot2d, dtype=np.float64)
    return np.arctan2(rot2d[..., 1], rot2d[..., 0])


# ---------------------------------------------------------------------------
# mirroring across the x = 0 plane


def mirror_quaternions(quats, topo: SkeletonTopology):
    """Local quaternions of the pose mirrored by x -> -x (without the left/right swap).

    World orientations map R -> M R N with M = diag(-1, 1, 1) and
    N = diag(1, 1, -1), which keeps the rest axis on the mirrored bone and
    the child reference in the upper half-plane.  In local terms that is
    N R N for ordinary bones and M R N for bones hanging off the root.

    Leaf bones carry zero twist rather than a child reference.  In a parent
    frame that twist survives N R N unchanged.  A leaf hanging off the root
    has zero twist in the world frame, and mirroring that flips its y axis,
    so its right factor is N Rx(pi) = diag(1, -1, 1) instead of N.
    """
    q = np.asarray(quats, dtype=np.float64)
    w, x, y, z = np.moveaxis(q, -1, 0)
    inner = np.stack([w, -x, -y, z], -1)
    root_kids = np.array([pb < 0 for pb in topo.parent_bone])
    mrm = np.stack([w, x, -y, -z], -1)
    outer = qmul(mrm, np.array([0.0, 0.0, 1.0, 0.0]))
    out = np.where(root_kids[:, None], outer, inner)
    root_leaves = np.array([not topo.child_bones[v] and topo.parent_bone[b] < 0 for b, (_, v) in enumerate(topo.bones)])
    out = np.where(root_leaves[:, None], qmul(out, np.array([0.0, 1.0, 0.0, 0.0])), out)
    return canonicalize(out)
