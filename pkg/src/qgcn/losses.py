"""Training losses and evaluation metrics.

Differentiable losses accept :class:`~qgcn.numerics.Tensor` predictions and
plain array targets and return scalar tensors.  Metrics (``p_mpjpe``,
``maad_metric``) work on arrays and return floats.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import numerics as nx
from .errors import DegenerateFrame, ShapeMismatch
from .numerics import Tensor
from .quatkin import rotation_angles
from .skeleton import SkeletonTopology


def _check(pred_shape, gt_shape, what: str):
    if tuple(pred_shape) != tuple(gt_shape):
        raise ShapeMismatch(f"{what}: prediction and target differ", pred_shape, gt_shape)


def _data(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


# ---------------------------------------------------------------------------
# position errors


def mpjpe(pred, gt, root: int | None = None) -> Tensor:
    """Mean Euclidean joint distance over (..., N, 3).

    With ``root`` given, both poses are first centred on that joint.
    """
    pred = nx.as_tensor(pred)
    gt = _data(gt)
    _check(pred.shape, gt.shape, "mpjpe")
    if root is not None:
        pred = pred - pred[..., root : root + 1, :]
        gt = gt - gt[..., root : root + 1, :]
    return nx.norm(pred - gt, axis=-1).mean()


def root_error(pred_root, gt_root) -> Tensor:
    """Mean squared error of the root position."""
    pred_root = nx.as_tensor(pred_root)
    gt_root = _data(gt_root)
    _check(pred_root.shape, gt_root.shape, "root_error")
    d = pred_root - gt_root
    return (d * d).sum(axis=-1).mean()


def similarity_align(pred, gt) -> np.ndarray:
    """Per-frame similarity transform of ``pred`` onto ``gt`` minimizing squared error.

    Arrays are (..., N, 3).  The rotation is constrained to det = +1.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    _check(pred.shape, gt.shape, "similarity_align")
    shape = pred.shape
    X = pred.reshape(-1, shape[-2], shape[-1])
    Y = gt.reshape(X.shape)
    mx = X.mean(axis=1, keepdims=True)
    my = Y.mean(axis=1, keepdims=True)
    Xc, Yc = X - mx, Y - my
    vx = np.sum(Xc * Xc, axis=(1, 2))
    vy = np.sum(Yc * Yc, axis=(1, 2))
    bad = (vx <= 1e-24) | (vy <= 1e-24)
    if np.any(bad):
        raise DegenerateFrame(f"frame {int(np.argmax(bad))}: all joints coincide")
    H = np.einsum("fni,fnj->fij", Xc, Yc)
    U, S, Vt = np.linalg.svd(H)
    d = np.sign(np.linalg.det(np.einsum("fij,fjk->fik", U, Vt)))
    d[d == 0] = 1.0
    D = np.ones_like(S)
    D[:, -1] = d
    # rotation acting on row vectors: x -> x @ Rr
    Rr = np.einsum("fij,fj,fjk->fik", U, D, Vt)
    scale = np.sum(S * D, axis=1) / vx
    aligned = scale[:, None, None] * np.einsum("fni,fij->fnj", Xc, Rr) + my
    return aligned.reshape(shape)


def p_mpjpe(pred, gt) -> float:
    """MPJPE after per-frame similarity alignment (rotation, translation, uniform scale)."""
    aligned = similarity_align(_data(pred), _data(gt))
    return float(np.linalg.norm(aligned - _data(gt), axis=-1).mean())


# ---------------------------------------------------------------------------
# orientation errors


def _unit(q: Tensor) -> Tensor:
    return q / nx.norm(q, axis=-1).reshape(q.shape[:-1] + (1,))


def quat_angle(pred, gt) -> Tensor:
    """Per-element rotation angle 2 arccos |<q_pred, q_gt>| in [0, pi]."""
    pred = nx.as_tensor(pred)
    gt = _data(gt)
    _check(pred.shape, gt.shape, "quat_angle")
    gt = gt / np.linalg.norm(gt, axis=-1, keepdims=True)
    dot = (_unit(pred) * gt).sum(axis=-1)
    return 2.0 * nx.arccos_clamped(nx.tabs(dot))


def aad_loss(pred_quats, gt_quats) -> Tensor:
    """Average angular distance between predicted and target unit quaternions."""
    return quat_angle(pred_quats, gt_quats).mean()


def maad_metric(pred_quats, gt_quats, bones=None) -> float:
    """Mean angular distance (radians) as a plain number, optionally over a bone subset."""
    p = _data(pred_quats)
    g = _data(gt_quats)
    _check(p.shape, g.shape, "maad_metric")
    if bones is not None:
        idx = np.asarray(bones, dtype=int)
        p, g = p[..., idx, :], g[..., idx, :]
    p = p / np.linalg.norm(p, axis=-1, keepdims=True)
    g = g / np.linalg.norm(g, axis=-1, keepdims=True)
    dot = np.clip(np.abs(np.sum(p * g, axis=-1)), 0.0, 1.0)
    return float(np.mean(2.0 * np.arccos(dot)))


def wrap_angle(d):
    """Map angles into (-pi, pi]."""
    return np.arctan2(np.sin(d), np.cos(d))


def aad2d_loss(pred_theta, gt_rot) -> Tensor:
    """Mean circular distance |wrap(theta_pred - theta)| between 2D bone angles.

    ``gt_rot`` holds angles (..., B) or (cos, sin) pairs (..., B, 2).
    """
    pred_theta = nx.as_tensor(pred_theta)
    gt = _data(gt_rot)
    if gt.ndim == pred_theta.ndim + 1 and gt.shape[-1] == 2:
        gt = rotation_angles(gt)
    _check(pred_theta.shape, gt.shape, "aad2d_loss")
    d = pred_theta - gt
    return nx.tabs(nx.atan2(nx.sin(d), nx.cos(d))).mean()


# ---------------------------------------------------------------------------
# differentiable projection of predicted orientations


def _comp(q: Tensor, i: int) -> Tensor:
    return q[..., i]


def tensor_qmul(a: Tensor, b: Tensor) -> Tensor:
    aw, ax, ay, az = (_comp(a, i) for i in range(4))
    bw, bx, by, bz = (_comp(b, i) for i in range(4))
    return nx.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def projected_angles(quats, topo: SkeletonTopology) -> Tensor:
    """Signed 2D bone angles of local quaternions (..., B, 4) under orthographic projection.

    Differentiable counterpart of :func:`qgcn.quatkin.project_rotations_2d`
    (which returns the same angles as (cos, sin) pairs).  Angles depend only
    on orientations, since bone lengths scale projected vectors uniformly.
    """
    q = _unit(nx.as_tensor(quats))
    world: list[Tensor | None] = [None] * topo.n_bones
    for b in topo.bone_order:
        local = q[..., b, :]
        pb = topo.parent_bone[b]
        world[b] = local if pb < 0 else tensor_qmul(world[pb], local)
    dirs = []
    for b in range(topo.n_bones):
        w, x, y, z = (_comp(world[b], i) for i in range(4))
        # image of the rest axis (1, 0, 0), first two components
        dirs.append((1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y + w * z)))
    angles = []
    for b in range(topo.n_bones):
        dx, dy = dirs[b]
        pb = topo.parent_bone[b]
        if pb < 0:
            rx, ry = 0.0, 1.0
        else:
            rx, ry = dirs[pb]
        cross = rx * dy - ry * dx
        dot = rx * dx + ry * dy
        angles.append(nx.atan2(cross, dot))
    return nx.stack(angles, axis=-1)


# ---------------------------------------------------------------------------
# loss bundle


@dataclass
class LossWeights:
    pose: float = 1.0
    aad: float = 1.0
    aad2d: float = 1.0


@dataclass
class LossBundle:
    """Scalar loss components of one step and their weighted total.

    ``mpjpe``/``root`` belong to the labeled (or only) batch and
    ``mpjpe_unlabeled``/``root_unlabeled`` to the unlabeled half of a
    semi-supervised batch.  Components that were not computed stay None.
    """

    mpjpe: float
    root: float
    aad: float | None = None
    aad2d: float | None = None
    mpjpe_unlabeled: float | None = None
    root_unlabeled: float | None = None
    weights: LossWeights = field(default_factory=LossWeights)
    weighted_total: float = 0.0
    total: Tensor | None = field(default=None, repr=False, compare=False)

    def recompute_total(self) -> float:
        w = self.weights
        pose = sum(v for v in (self.mpjpe, self.root, self.mpjpe_unlabeled, self.root_unlabeled) if v is not None)
        out = w.pose * pose
        if self.aad is not None:
            out += w.aad * self.aad
        if self.aad2d is not None:
            out += w.aad2d * self.aad2d
        return out

    def as_record(self) -> dict:
        keys = ("mpjpe", "root", "aad", "aad2d", "mpjpe_unlabeled", "root_unlabeled", "weighted_total")
        return {k: getattr(self, k) for k in keys if getattr(self, k) is not None}


def combine(weights: LossWeights, **parts: Tensor | None) -> LossBundle:
    """Weighted sum of the given loss tensors, packed with their float values."""
    pose_keys = ("mpjpe", "root", "mpjpe_unlabeled", "root_unlabeled")
    total = None
    for k, v in parts.items():
        if v is None:
            continue
        lam = weights.pose if k in pose_keys else getattr(weights, k)
        term = v * lam
        total = term if total is None else total + term
    vals = {k: (None if v is None else float(v.item())) for k, v in parts.items()}
    bundle = LossBundle(weights=weights, total=total, **vals)
    bundle.weighted_total = float(total.item())
    return bundle
