"""Supervised and semi-supervised training, evaluation and checkpoints."""

from __future__ import annotations

import json
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable

import numpy as np

from . import container
from . import numerics as nx
from .datahub import DatasetBundle, Sequence
from .errors import NaNLoss, ShapeMismatch, TopologyMismatch, UsageError
from .losses import (
    LossBundle,
    LossWeights,
    aad2d_loss,
    aad_loss,
    combine,
    maad_metric,
    mpjpe,
    p_mpjpe,
    projected_angles,
    root_error,
)
from .model import QGCN, ModelConfig
from .quatkin import canonicalize, mirror_quaternions, rotation_angles
from .skeleton import SkeletonTopology, load_topology

CKPT_MAGIC = b"QGCNCKPT"


@dataclass
class TrainConfig:
    batch_size: int = 32
    epochs: int = 500
    lr: float = 0.01
    lr_decay: float = 0.98  # per epoch
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    lookahead: bool = False
    lookahead_k: int = 6
    lookahead_alpha: float = 0.5
    seed: int = 0
    semi_supervised: bool = False
    labeled_fraction: float = 1.0
    flip_augmentation: bool = False
    lambda_pose: float = 1.0
    lambda_aad: float = 1.0
    lambda_aad2d: float = 1.0
    checkpoint_every: int = 10
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        if isinstance(self.model, dict):
            self.model = ModelConfig.from_dict(self.model)
        if self.batch_size < 1:
            raise UsageError("batch_size must be positive")
        if self.semi_supervised and self.batch_size % 2:
            raise UsageError("semi-supervised training splits each batch in half; batch_size must be even")
        if not 0.0 < self.labeled_fraction <= 1.0:
            raise UsageError("labeled_fraction must be in (0, 1]")
        if self.semi_supervised and not self.model.use_orientation_head:
            raise UsageError("semi-supervision regresses orientations; it needs the orientation head")

    @property
    def weights(self) -> LossWeights:
        return LossWeights(self.lambda_pose, self.lambda_aad, self.lambda_aad2d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["model"] = self.model.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise UsageError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# windows and batches


@dataclass
class Batch:
    pose2d: np.ndarray  # (b, T, N, 2)
    rot2d: np.ndarray  # (b, T, B, 2)
    pose3d: np.ndarray | None  # (b, N, 3) root-relative, centre frame
    root: np.ndarray | None  # (b, 3)
    quats: np.ndarray | None  # (b, B, 4) or None when unlabeled

    def __len__(self):
        return self.pose2d.shape[0]

    @property
    def rot_center(self) -> np.ndarray:
        T = self.rot2d.shape[1]
        return self.rot2d[:, T // 2]


@dataclass
class Windows:
    """All training windows of a bundle, stacked; targets sit at the centre frame."""

    pose2d: np.ndarray
    rot2d: np.ndarray
    pose3d: np.ndarray | None
    root: np.ndarray | None
    quats: np.ndarray  # zeros where unlabeled
    labeled: np.ndarray  # bool (S,)
    sequence: np.ndarray  # int (S,)
    frame: np.ndarray  # int (S,), centre frame within its sequence

    def __len__(self):
        return self.pose2d.shape[0]

    def take(self, idx, with_quats: bool = True) -> Batch:
        idx = np.asarray(idx, dtype=int)
        return Batch(
            self.pose2d[idx],
            self.rot2d[idx],
            None if self.pose3d is None else self.pose3d[idx],
            None if self.root is None else self.root[idx],
            self.quats[idx] if with_quats and np.all(self.labeled[idx]) else None,
        )


def _pad_edges(a: np.ndarray, left: int, right: int) -> np.ndarray:
    return np.concatenate([np.repeat(a[:1], left, 0), a, np.repeat(a[-1:], right, 0)], axis=0)


def make_windows(bundle: DatasetBundle, T: int, mode: str = "valid") -> Windows:
    """Cut sequences into length-``T`` windows.

    ``valid`` keeps windows lying fully inside a sequence; ``all`` pads each
    sequence by repeating its end frames so every frame is a window centre.
    """
    topo = bundle.topology
    half = T // 2
    cols = {k: [] for k in ("pose2d", "rot2d", "pose3d", "root", "quats", "labeled", "sequence", "frame")}
    has3d = all(s.pose3d is not None for s in bundle.sequences)
    for i, s in enumerate(bundle.sequences):
        L = s.n_frames
        if mode == "all":
            pad = lambda a: _pad_edges(a, half, T - 1 - half)  # noqa: E731
            centres = np.arange(L)
        elif mode == "valid":
            pad = lambda a: a  # noqa: E731
            centres = np.arange(half, L - (T - 1 - half))
        else:
            raise UsageError(f"unknown window mode {mode!r}")
        if centres.size == 0:
            continue
        p2, r2 = pad(s.pose2d), pad(s.rot2d)
        offset = half if mode == "all" else 0
        starts = centres - half + offset
        idx = starts[:, None] + np.arange(T)[None, :]
        cols["pose2d"].append(p2[idx])
        cols["rot2d"].append(r2[idx])
        if has3d:
            c3 = s.pose3d[centres]
            cols["pose3d"].append(c3 - c3[:, topo.root : topo.root + 1])
            cols["root"].append(s.root3d[centres] if s.root3d is not None else c3[:, topo.root])
        q = s.quats[centres] if s.quats is not None else np.zeros((centres.size, topo.n_bones, 4))
        cols["quats"].append(q)
        cols["labeled"].append(np.full(centres.size, s.quats is not None))
        cols["sequence"].append(np.full(centres.size, i))
        cols["frame"].append(centres)
    if not cols["pose2d"]:
        raise ShapeMismatch(f"no sequence is long enough for windows of {T} frames")
    cat = {k: np.concatenate(v) if v else None for k, v in cols.items()}
    return Windows(**cat)


def flip_arrays(pose=None, rot2d=None, quats=None, root=None, topo: SkeletonTopology = None) -> dict:
    """Mirror across the x = 0 plane and swap left/right; any argument may be None.

    Joint arrays have the joint axis second to last, bone arrays the bone
    axis second to last (quaternions: before the 4-vector).
    """
    out = {}
    if pose is not None:
        p = np.array(pose, dtype=np.float64)[..., topo.mirror_joint, :]
        p[..., 0] *= -1.0
        out["pose"] = p
    if rot2d is not None:
        r = np.array(rot2d, dtype=np.float64)[..., topo.mirror_bone, :]
        r[..., 1] *= -1.0
        out["rot2d"] = r
    if quats is not None:
        out["quats"] = mirror_quaternions(np.asarray(quats)[..., topo.mirror_bone, :], topo)
    if root is not None:
        r = np.array(root, dtype=np.float64)
        r[..., 0] *= -1.0
        out["root"] = r
    return out


def horizontal_flip(sample: Sequence | Batch, topo: SkeletonTopology):
    """Mirrored copy of a sequence or batch (negate x, swap sides, theta -> -theta)."""
    if isinstance(sample, Sequence):
        f2 = flip_arrays(pose=sample.pose2d, rot2d=sample.rot2d, topo=topo)
        f3 = flip_arrays(pose=sample.pose3d, quats=sample.quats, root=sample.root3d, topo=topo)
        return Sequence(f2["pose"], f2["rot2d"], f3.get("pose"), f3.get("quats"), f3.get("root"))
    f2 = flip_arrays(pose=sample.pose2d, rot2d=sample.rot2d, topo=topo)
    f3 = flip_arrays(pose=sample.pose3d, quats=sample.quats, root=sample.root, topo=topo)
    return Batch(f2["pose"], f2["rot2d"], f3.get("pose"), f3.get("root"), f3.get("quats"))


def _random_flip(batch: Batch, topo: SkeletonTopology, rng: np.random.Generator) -> Batch:
    mask = rng.random(len(batch)) < 0.5
    if not mask.any():
        return batch
    flipped = horizontal_flip(batch, topo)

    def pick(a, b, extra):
        if a is None:
            return None
        return np.where(mask.reshape((-1,) + (1,) * extra), b, a)

    return Batch(
        pick(batch.pose2d, flipped.pose2d, 3),
        pick(batch.rot2d, flipped.rot2d, 3),
        pick(batch.pose3d, flipped.pose3d, 2),
        pick(batch.root, flipped.root, 1),
        pick(batch.quats, flipped.quats, 2),
    )


# ---------------------------------------------------------------------------
# optimizer


class Adam:
    def __init__(self, params: dict[str, nx.Tensor], beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = params
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.v = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.t = 0

    def step(self, lr: float):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1**self.t
        c2 = 1.0 - b2**self.t
        for k, p in self.params.items():
            g = p.grad
            if g is None:
                continue
            m, v = self.m[k], self.v[k]
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * (g * g)
            p.data = p.data - (lr / c1) * m / (np.sqrt(v / c2) + self.eps)

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = {f"adam_m/{k}": v for k, v in self.m.items()}
        out.update({f"adam_v/{k}": v for k, v in self.v.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int):
        dt = {k: p.data.dtype for k, p in self.params.items()}
        self.m = {k: arrays[f"adam_m/{k}"].astype(dt[k]) for k in self.params}
        self.v = {k: arrays[f"adam_v/{k}"].astype(dt[k]) for k in self.params}
        self.t = t


class Lookahead:
    """Every ``k`` inner steps, pull slow weights toward the fast ones and reset the fast ones."""

    def __init__(self, inner: Adam, k: int = 6, alpha: float = 0.5):
        self.inner = inner
        self.k, self.alpha = k, alpha
        self.slow = {n: p.data.copy() for n, p in inner.params.items()}
        self.counter = 0

    @property
    def t(self):
        return self.inner.t

    def step(self, lr: float):
        self.inner.step(lr)
        self.counter += 1
        if self.counter % self.k == 0:
            for n, p in self.inner.params.items():
                s = self.slow[n]
                s += self.alpha * (p.data - s)
                p.data = s.copy()

    def state_arrays(self) -> dict[str, np.ndarray]:
        out = self.inner.state_arrays()
        out.update({f"slow/{k}": v for k, v in self.slow.items()})
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray], t: int, counter: int):
        self.inner.load_state_arrays(arrays, t)
        self.slow = {k: arrays[f"slow/{k}"].astype(p.data.dtype) for k, p in self.inner.params.items()}
        self.counter = counter


def make_optimizer(model: QGCN, cfg: TrainConfig):
    adam = Adam(model.params, cfg.beta1, cfg.beta2, cfg.adam_eps)
    return Lookahead(adam, cfg.lookahead_k, cfg.lookahead_alpha) if cfg.lookahead else adam


# ---------------------------------------------------------------------------
# steps


def _check_finite(bundle: LossBundle, model: QGCN, step: int):
    if math.isfinite(bundle.weighted_total):
        return
    bad = [k for k, p in model.params.items() if not np.all(np.isfinite(p.data))]
    if bad:
        where = f"non-finite parameters: {', '.join(bad)}"
    else:
        worst = max(model.params.items(), key=lambda kv: float(np.max(np.abs(kv[1].data))) if kv[1].data.size else 0.0)
        where = f"largest parameter magnitude in {worst[0]} ({float(np.max(np.abs(worst[1].data))):.3g})"
    raise NaNLoss(f"non-finite loss at step {step}: {bundle.as_record()}; {where}")


def _apply(model: QGCN, optimizer, bundle: LossBundle, lr: float, step: int) -> LossBundle:
    _check_finite(bundle, model, step)
    model.zero_grad()
    bundle.total.backward(params=model.parameters())
    optimizer.step(lr)
    bundle.total = None
    return bundle


def supervised_losses(model: QGCN, batch: Batch, weights: LossWeights, mode: str = "train", step: int = 0) -> LossBundle:
    out = model(batch.pose2d, batch.rot2d, mode=mode, step=step)
    parts = {"mpjpe": mpjpe(out.pose, batch.pose3d), "root": root_error(out.root, batch.root)}
    if out.quats is not None:
        if batch.quats is None:
            raise ShapeMismatch("supervised step with an orientation head needs quaternion labels")
        parts["aad"] = aad_loss(out.quats, batch.quats)
    return combine(weights, **parts)


def supervised_step(model: QGCN, optimizer, batch: Batch, cfg: TrainConfig, step: int, lr: float | None = None) -> LossBundle:
    """Forward, weighted pose (+ orientation) loss, backward, one optimizer update."""
    bundle = supervised_losses(model, batch, cfg.weights, "train", step)
    return _apply(model, optimizer, bundle, cfg.lr if lr is None else lr, step)


def semi_losses(model: QGCN, labeled: Batch, unlabeled: Batch, weights: LossWeights, mode: str = "train", step: int = 0) -> LossBundle:
    """Loss of one half-labeled, half-unlabeled batch, from a single forward pass.

    The unlabeled half has 3D coordinates and 2D rotations but no
    quaternions; its orientations are trained by matching the 2D projection
    of the predicted orientations to the observed 2D rotations.
    """
    if labeled.quats is None:
        raise ShapeMismatch("labeled half lacks quaternions")
    nl = len(labeled)
    out = model(
        np.concatenate([labeled.pose2d, unlabeled.pose2d]),
        np.concatenate([labeled.rot2d, unlabeled.rot2d]),
        mode=mode,
        step=step,
    )
    if out.quats is None:
        raise UsageError("semi-supervised losses need the orientation head")
    topo = model.topo
    q_u = out.quats[nl:]
    theta = projected_angles(q_u, topo)
    return combine(
        weights,
        mpjpe=mpjpe(out.pose[:nl], labeled.pose3d),
        root=root_error(out.root[:nl], labeled.root),
        aad=aad_loss(out.quats[:nl], labeled.quats),
        mpjpe_unlabeled=mpjpe(out.pose[nl:], unlabeled.pose3d),
        root_unlabeled=root_error(out.root[nl:], unlabeled.root),
        aad2d=aad2d_loss(theta, rotation_angles(unlabeled.rot_center)),
    )


def semi_supervised_step(model: QGCN, optimizer, labeled: Batch, unlabeled: Batch, cfg: TrainConfig, step: int,
                         lr: float | None = None) -> LossBundle:
    if len(labeled) != len(unlabeled):
        raise ShapeMismatch("semi-supervised batch halves differ in size", (len(labeled),), (len(unlabeled),))
    bundle = semi_losses(model, labeled, unlabeled, cfg.weights, "train", step)
    return _apply(model, optimizer, bundle, cfg.lr if lr is None else lr, step)


# ---------------------------------------------------------------------------
# state and checkpoints


@dataclass
class TrainState:
    model: QGCN
    optimizer: Adam | Lookahead
    epoch: int = 0  # completed epochs
    step: int = 0
    history: list[dict] = field(default_factory=list)
    best: dict = field(default_factory=dict)


def init_state(cfg: TrainConfig, topo: SkeletonTopology | None = None) -> TrainState:
    model = QGCN(cfg.model, topo)
    return TrainState(model, make_optimizer(model, cfg))


def save_checkpoint(path, state: TrainState, cfg: TrainConfig) -> None:
    arrays = dict(state.model.state_arrays())
    arrays.update(state.optimizer.state_arrays())
    opt = state.optimizer
    meta = {
        "kind": "qgcn-checkpoint",
        "train_config": cfg.to_dict(),
        "topology": state.model.topo.to_dict(),
        "epoch": state.epoch,
        "step": state.step,
        "adam_t": opt.t,
        "lookahead_counter": getattr(opt, "counter", 0),
        "history": state.history,
        "best": state.best,
        # every random draw is keyed by (seed, purpose, epoch or step), so the
        # counters above are the complete generator state
        "rng": {"generator": "philox", "seed": cfg.seed, "step": state.step, "epoch": state.epoch},
    }
    container.write(path, CKPT_MAGIC, meta, arrays)


def load_checkpoint(path) -> tuple[TrainState, TrainConfig]:
    from .skeleton import topology_from_dict

    _, meta, arrays = container.read(path, CKPT_MAGIC)
    cfg = TrainConfig.from_dict(meta["train_config"])
    topo = topology_from_dict(meta["topology"])
    state = init_state(cfg, topo)
    state.model.load_state_arrays(arrays)
    if isinstance(state.optimizer, Lookahead):
        state.optimizer.load_state_arrays(arrays, meta["adam_t"], meta["lookahead_counter"])
    else:
        state.optimizer.load_state_arrays(arrays, meta["adam_t"])
    state.epoch = meta["epoch"]
    state.step = meta["step"]
    state.history = meta["history"]
    state.best = meta["best"]
    return state, cfg


# ---------------------------------------------------------------------------
# evaluation


def predict(model: QGCN, pose2d: np.ndarray, rot2d: np.ndarray, batch_size: int = 256, flip_average: bool = False):
    """Eval-mode predictions (pose, root, quats-or-None) as float64 arrays."""
    poses, roots, quats = [], [], []
    topo = model.topo
    with nx.no_grad():
        for s in range(0, pose2d.shape[0], batch_size):
            p2, r2 = pose2d[s : s + batch_size], rot2d[s : s + batch_size]
            out = model(p2, r2, mode="eval")
            pose = out.pose.data.astype(np.float64)
            root = out.root.data.astype(np.float64)
            q = None if out.quats is None else out.quats.data.astype(np.float64)
            if flip_average:
                f = flip_arrays(pose=p2, rot2d=r2, topo=topo)
                fo = model(f["pose"], f["rot2d"], mode="eval")
                back = flip_arrays(
                    pose=fo.pose.data, root=fo.root.data, quats=None if q is None else fo.quats.data, topo=topo
                )
                pose = 0.5 * (pose + back["pose"])
                root = 0.5 * (root + back["root"])
                if q is not None:
                    qb = back["quats"]
                    qb = np.where(np.sum(qb * q, -1, keepdims=True) < 0, -qb, qb)
                    q = q + qb
                    q = canonicalize(q / np.linalg.norm(q, axis=-1, keepdims=True))
            poses.append(pose)
            roots.append(root)
            if q is not None:
                quats.append(q)
    return np.concatenate(poses), np.concatenate(roots), (np.concatenate(quats) if quats else None)


def evaluate(model: QGCN, data: DatasetBundle | Windows, batch_size: int = 256, flip_average: bool = False,
             parts: dict[str, list[int]] | None = None) -> dict:
    """MPJPE, P-MPJPE (metres), root error and mAAD (radians) over all windows.

    mAAD covers only windows whose sequences carry quaternion labels.
    """
    if isinstance(data, DatasetBundle):
        if data.topology.to_dict()["bones"] != model.topo.to_dict()["bones"]:
            raise TopologyMismatch(f"dataset topology {data.topology.name} does not match model topology {model.topo.name}")
        data = make_windows(data, model.cfg.receptive_field)
    if data.pose3d is None:
        raise ShapeMismatch("evaluation needs 3D labels")
    pose, root, quats = predict(model, data.pose2d, data.rot2d, batch_size, flip_average)
    rep = {
        "mpjpe": float(np.linalg.norm(pose - data.pose3d, axis=-1).mean()),
        "p_mpjpe": p_mpjpe(pose, data.pose3d),
        "root_error": float(np.linalg.norm(root - data.root, axis=-1).mean()),
        "n_windows": int(len(data)),
    }
    lab = data.labeled
    if quats is not None and lab.any():
        rep["maad"] = maad_metric(quats[lab], data.quats[lab])
        for name, bones in (parts or {}).items():
            rep[f"maad_{name}"] = maad_metric(quats[lab], data.quats[lab], bones)
    return rep


# ---------------------------------------------------------------------------
# training loop


def _log(log, record: dict):
    if log is None:
        return
    line = json.dumps(record, sort_keys=True)
    if callable(log):
        log(line)
    else:
        log.write(line + "\n")
        log.flush()


def epoch_plan(cfg: TrainConfig, labeled: np.ndarray, unlabeled: np.ndarray, epoch: int) -> list[tuple[np.ndarray, np.ndarray | None]]:
    """Batches of one epoch as (labeled indices, unlabeled indices or None).

    A pure function of (seed, epoch) and the pools.
    """
    pl = labeled[nx.philox(cfg.seed, 2, epoch, 0).permutation(labeled.size)]
    if cfg.semi_supervised and unlabeled.size:
        half = cfg.batch_size // 2
        pu = unlabeled[nx.philox(cfg.seed, 2, epoch, 1).permutation(unlabeled.size)]
        n_steps = math.ceil(max(pl.size, pu.size) / half)
        out = []
        for i in range(n_steps):
            j = i * half + np.arange(half)
            out.append((pl[j % pl.size], pu[j % pu.size]))
        return out
    bs = cfg.batch_size
    return [(pl[s : s + bs], None) for s in range(0, pl.size, bs)]


def run_training(
    cfg: TrainConfig,
    train: DatasetBundle,
    val: DatasetBundle | None = None,
    state: TrainState | None = None,
    checkpoint_dir=None,
    log=None,
    until_epoch: int | None = None,
    on_epoch: Callable[[TrainState, dict], None] | None = None,
) -> TrainState:
    """Train for ``cfg.epochs`` epochs (or up to ``until_epoch``), resuming from ``state`` if given.

    Without semi-supervision only sequences that carry quaternion labels are
    used.  With it, each batch pairs a labeled half with an unlabeled half.
    A ``labeled_fraction`` below one first withholds the quaternion labels of
    a subset of sequences chosen by ``cfg.seed``.
    """
    if cfg.labeled_fraction < 1.0:
        from .datahub import strip_labels

        train = strip_labels(train, cfg.labeled_fraction, cfg.seed)
    topo = train.topology
    if state is None:
        state = init_state(cfg, topo)
    model = state.model
    if model.topo.to_dict()["bones"] != topo.to_dict()["bones"]:
        raise TopologyMismatch("training data and model use different topologies")
    T = cfg.model.receptive_field
    win = make_windows(train, T)
    if win.pose3d is None:
        raise ShapeMismatch("training needs 3D coordinates for every sequence")
    needs_quats = cfg.model.use_orientation_head
    labeled = np.flatnonzero(win.labeled)
    unlabeled = np.flatnonzero(~win.labeled) if cfg.semi_supervised else np.array([], dtype=int)
    if labeled.size == 0:
        raise ShapeMismatch("no labeled training windows")
    val_win = make_windows(val, T) if val is not None and len(val) else None
    ckdir = Path(checkpoint_dir) if checkpoint_dir is not None else None
    if ckdir is not None:
        ckdir.mkdir(parents=True, exist_ok=True)
    last = cfg.epochs if until_epoch is None else min(until_epoch, cfg.epochs)
    weights = cfg.weights
    _log(log, {"kind": "config", "config": cfg.to_dict(), "n_labeled": int(labeled.size), "n_unlabeled": int(unlabeled.size)})
    while state.epoch < last:
        epoch = state.epoch
        lr = cfg.lr * cfg.lr_decay**epoch
        t0 = time.perf_counter()
        sums: dict[str, float] = {}
        plan = epoch_plan(cfg, labeled, unlabeled, epoch)
        for li, ui in plan:
            lb = win.take(li, needs_quats)
            if cfg.flip_augmentation:
                lb = _random_flip(lb, topo, nx.philox(cfg.seed, 3, state.step, 0))
            if ui is None:
                bundle = supervised_step(model, state.optimizer, lb, cfg, state.step, lr)
            else:
                ub = win.take(ui, with_quats=False)
                if cfg.flip_augmentation:
                    ub = _random_flip(ub, topo, nx.philox(cfg.seed, 3, state.step, 1))
                bundle = semi_supervised_step(model, state.optimizer, lb, ub, cfg, state.step, lr)
            rec = bundle.as_record()
            _log(log, {"kind": "step", "epoch": epoch, "step": state.step, "lr": lr, **rec})
            for k, v in rec.items():
                sums[k] = sums.get(k, 0.0) + v
            state.step += 1
        state.epoch += 1
        summary = {"epoch": epoch, "lr": lr, "steps": len(plan), "seconds": round(time.perf_counter() - t0, 3)}
        summary.update({f"train_{k}": v / len(plan) for k, v in sums.items()})
        if val_win is not None:
            metrics = evaluate(model, val_win)
            summary.update({f"val_{k}": v for k, v in metrics.items()})
            if not state.best or metrics["mpjpe"] < state.best["val_mpjpe"]:
                state.best = {"epoch": epoch, "val_mpjpe": metrics["mpjpe"]}
                if ckdir is not None:
                    save_checkpoint(ckdir / "best.ckpt", state, cfg)
        state.history.append(summary)
        _log(log, {"kind": "epoch", **summary})
        if ckdir is not None and (state.epoch % cfg.checkpoint_every == 0 or state.epoch == last):
            save_checkpoint(ckdir / "last.ckpt", state, cfg)
        if on_epoch is not None:
            on_epoch(state, summary)
    return state


# ---------------------------------------------------------------------------
# ablation matrix

ABLATION_ROWS = (
    # name, use_edges, use_orientation_head, semi_supervised, use_directed
    ("baseline", False, False, False, False),
    ("orientation", True, True, False, False),
    ("orientation+semi", True, True, True, False),
    ("directed", False, False, False, True),
    ("orientation+directed", True, True, False, True),
    ("full", True, True, True, True),
)


def ablation_configs(base: TrainConfig) -> list[tuple[str, TrainConfig]]:
    """The six component combinations, all sharing every other setting of ``base``."""
    out = []
    for name, edges, orient, semi, directed in ABLATION_ROWS:
        d = base.to_dict()
        d["semi_supervised"] = semi
        d["model"].update(use_edges=edges, use_orientation_head=orient, use_directed=directed)
        out.append((name, TrainConfig.from_dict(d)))
    return out


def run_ablation(base: TrainConfig, train: DatasetBundle, val: DatasetBundle, seeds=(0, 1, 2),
                 labeled_fraction: float = 0.5, log=None, on_result=None) -> list[dict]:
    """Train every ablation row for every seed; one metrics record per (row, seed).

    For each seed the same quaternion labels are withheld from all rows.
    """
    results = []
    for seed in seeds:
        for name, cfg in ablation_configs(base):
            d = cfg.to_dict()
            d["seed"] = seed
            d["labeled_fraction"] = labeled_fraction
            d["model"]["seed"] = seed
            cfg = TrainConfig.from_dict(d)
            t0 = time.perf_counter()
            state = run_training(cfg, train, log=log)
            rec = {"config": name, "seed": seed, **evaluate(state.model, val), "seconds": time.perf_counter() - t0}
            _log(log, {"kind": "ablation", **rec})
            results.append(rec)
            if on_result is not None:
                on_result(rec)
    return results


def summarize_ablation(results: list[dict]) -> list[dict]:
    """Per-row means over seeds, in the fixed row order."""
    out = []
    for name, *_ in ABLATION_ROWS:
        rows = [r for r in results if r["config"] == name]
        if not rows:
            continue
        s = {"config": name, "seeds": len(rows)}
        for k in ("mpjpe", "p_mpjpe", "maad"):
            vals = [r[k] for r in rows if k in r]
            if vals:
                s[k] = float(np.mean(vals))
        out.append(s)
    return out


# ---------------------------------------------------------------------------
# gradient check of the full training loss


def gradcheck_model(topo: SkeletonTopology | str = "h36m17", frames: int = 9, channels=None, hidden: int | None = None,
                    batch: int = 2, probes: int = 200, tol: float = 1e-4, seed: int = 0, step: float = 1e-5):
    """Finite-difference check of pose + root + AAD + 2D-AAD w.r.t. every parameter.

    Runs at random init on a small synthetic batch, in train mode with the
    dropout masks frozen by the step counter (every probe reuses step 0).
    """
    from .datahub import generate_synthetic
    from .numerics import gradcheck

    if isinstance(topo, str):
        topo = load_topology(topo)
    defaults = ModelConfig()
    cfg = ModelConfig(topology=topo.name, receptive_field=frames,
                      channels=tuple(channels) if channels else defaults.channels,
                      orient_hidden=hidden or defaults.orient_hidden, seed=seed)
    model = QGCN(cfg, topo)
    win = make_windows(generate_synthetic(topo, batch, frames, seed), frames)
    weights = LossWeights()
    centre = win.rot2d[:, frames // 2]

    def loss(*_params):
        out = model(win.pose2d, win.rot2d, mode="train", step=0)
        return combine(
            weights,
            mpjpe=mpjpe(out.pose, win.pose3d),
            root=root_error(out.root, win.root),
            aad=aad_loss(out.quats, win.quats),
            aad2d=aad2d_loss(projected_angles(out.quats, topo), centre),
        ).total

    return gradcheck(loss, model.parameters(), tol=tol, step=step, probes=probes, seed=seed)

