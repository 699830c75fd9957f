"""The Q-GCN network.

Two feature streams run side by side through a stack of spatial-temporal
blocks: a vertex stream over joints (initialised with 2D coordinates) and an
edge stream over bones (initialised with cos/sin of the 2D bone rotations).
The streams exchange information through incidence maps.  After the last
block the time axis has collapsed to one frame and two heads read off
root-relative 3D joints, a root position, and one unit quaternion per bone.

Tensors are channels-last: (batch, time, element, channel).
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, fields
from typing import Iterator

import numpy as np

from . import numerics as nx
from .numerics import BatchNormParams, RunningStats, Tensor
from .errors import ShapeMismatch, UsageError
from .skeleton import GraphOperatorSet, SkeletonTopology, build_operators, load_topology

K = 4


@dataclass
class ModelConfig:
    topology: str = "h36m17"
    channels: tuple[int, ...] = (64, 64, 128, 128)
    temporal_kernel: int = 3
    receptive_field: int = 27
    dropout: float = 0.25
    se_reduction: int = 4
    orient_hidden: int = 256
    use_edges: bool = True
    use_directed: bool = True
    use_orientation_head: bool = True
    norm_exponent: float = -0.5
    incidence_mode: str = "normalized"  # or "raw"
    seed: int = 0

    def __post_init__(self):
        self.channels = tuple(int(c) for c in self.channels)
        if self.use_orientation_head and not self.use_edges:
            raise UsageError("the orientation head reads edge features; it needs use_edges")
        if self.incidence_mode not in ("normalized", "raw"):
            raise UsageError(f"incidence_mode must be 'normalized' or 'raw', got {self.incidence_mode!r}")
        if not 0.0 <= self.dropout < 1.0:
            raise UsageError("dropout must be in [0, 1)")
        self.block_layout()  # validates the receptive field

    def block_layout(self) -> tuple[tuple[int, ...], tuple[int, ...]]:
        """(strides, channels) per block.

        The receptive field must be a power of the temporal kernel; each
        strided block divides time by the kernel size.  Blocks beyond the
        needed strided ones use stride 1.  When more strided blocks are needed
        than channels given, the last width is repeated.
        """
        k, T = self.temporal_kernel, self.receptive_field
        n = 0
        t = T
        while t > 1:
            if t % k:
                raise UsageError(f"receptive field {T} is not a power of the temporal kernel {k}")
            t //= k
            n += 1
        nblocks = max(len(self.channels), n, 1)
        chans = self.channels + (self.channels[-1],) * (nblocks - len(self.channels))
        strides = (k,) * n + (1,) * (nblocks - n)
        return strides, chans

    def to_dict(self) -> dict:
        d = asdict(self)
        d["channels"] = list(self.channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise UsageError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)


@dataclass
class ModelOutput:
    pose: Tensor  # (b, N, 3) root-relative
    root: Tensor  # (b, 3)
    quats: Tensor | None  # (b, B, 4) unit norm


# ---------------------------------------------------------------------------
# building blocks (functional, so they can be checked in isolation)


def _incidence(ops: GraphOperatorSet, name: str, mode: str) -> np.ndarray:
    return ops.raw[name] if mode == "raw" else ops.normalized[name]


_STACKED: dict[int, tuple[np.ndarray, np.ndarray]] = {}


def _stacked(op: np.ndarray) -> np.ndarray:
    """(K, R, S) operator stack as an (R*K, S) matrix with rows ordered (r, k)."""
    hit = _STACKED.get(id(op))
    if hit is None or hit[0] is not op:
        k, r, s = op.shape
        hit = (op, np.ascontiguousarray(op.transpose(1, 0, 2).reshape(r * k, s)))
        _STACKED[id(op)] = hit
    return hit[1]


def _aggregate(op: np.ndarray, feats: Tensor) -> Tensor:
    """Apply a (K, R, S) operator stack to (b, T, S, C) features -> (b, T, R, K*C).

    Channel block k of the result holds subset k's aggregate.
    """
    k, r, _ = op.shape
    b, t, _, c = feats.shape
    return nx.matmul(_stacked(op), feats).reshape(b, t, r, k * c)


def spatial_conv(
    own: Tensor,
    adjacency: np.ndarray,
    weight: Tensor,
    other: Tensor | None = None,
    parent_incidence: np.ndarray | None = None,
    child_incidence: np.ndarray | None = None,
) -> Tensor:
    """sum_k [A_k own, P_k other, C_k other] W_k for one stream.

    ``weight`` has K * (C_own + 2 C_other) rows, grouped by source: K blocks
    of C_own rows for the adjacency term, then K blocks of C_other rows for
    the parent incidence term, then K for the child incidence term.  Block k
    of each group acts on subset k, so W_k is the stack of the three k-th
    blocks.  Without ``other`` only the adjacency term is used.
    """
    if own.ndim != 4:
        raise ShapeMismatch("spatial_conv expects (batch, time, element, channel)", own.shape)
    b, t, n, c_own = own.shape
    parts = [(adjacency, own)]
    if other is not None:
        if other.shape[:2] != (b, t):
            raise ShapeMismatch("spatial_conv: streams disagree on batch/time", own.shape, other.shape)
        parts += [(parent_incidence, other), (child_incidence, other)]
    rows = K * sum(x.shape[-1] for _, x in parts)
    if weight.shape[0] != rows:
        raise ShapeMismatch("spatial_conv: weight rows must equal K * input width", weight.shape, (rows,))
    out = None
    start = 0
    for op, x in parts:
        width = K * x.shape[-1]
        term = _aggregate(op, x) @ weight[start : start + width]
        out = term if out is None else out + term
        start += width
    return out


def vertex_spatial_conv(x: Tensor, ops: GraphOperatorSet, edge_feats: Tensor | None, weight: Tensor,
                        directed: bool = True, incidence_mode: str = "normalized") -> Tensor:
    if not directed:
        return spatial_conv(x, ops["vertex_adjacency_sym"], weight)
    return spatial_conv(
        x,
        ops["vertex_adjacency"],
        weight,
        edge_feats,
        _incidence(ops, "parent_incidence_v", incidence_mode),
        _incidence(ops, "child_incidence_v", incidence_mode),
    )


def edge_spatial_conv(e: Tensor, ops: GraphOperatorSet, vertex_feats: Tensor | None, weight: Tensor,
                      directed: bool = True, incidence_mode: str = "normalized") -> Tensor:
    if not directed:
        return spatial_conv(e, ops["edge_adjacency_sym"], weight)
    return spatial_conv(
        e,
        ops["edge_adjacency"],
        weight,
        vertex_feats,
        _incidence(ops, "parent_incidence_e", incidence_mode),
        _incidence(ops, "child_incidence_e", incidence_mode),
    )


def temporal_windows(length: int, kernel: int, stride: int) -> tuple[int, int, np.ndarray]:
    """(output length, left padding, window start indices into the padded sequence)."""
    out_len = -(-length // stride)
    pad = max((out_len - 1) * stride + kernel - length, 0)
    return out_len, pad // 2, np.arange(out_len) * stride


def temporal_conv(h: Tensor, weight: Tensor, kernel: int, stride: int) -> Tensor:
    """1 x kernel convolution along time with zero padding; weight is (kernel * C, C_out)."""
    b, t, n, c = h.shape
    if weight.shape[0] != kernel * c:
        raise ShapeMismatch("temporal_conv: weight rows must equal kernel * channels", weight.shape, h.shape)
    out_len, left, starts = temporal_windows(t, kernel, stride)
    if stride == kernel and t % stride == 0:
        win = h.reshape(b, out_len, kernel, n, c)
    else:
        right = (out_len - 1) * stride + kernel - t - left
        parts = []
        if left > 0:
            parts.append(np.zeros((b, left, n, c)))
        parts.append(h)
        if right > 0:
            parts.append(np.zeros((b, right, n, c)))
        hp = nx.concat(parts, axis=1) if len(parts) > 1 else h
        idx = starts[:, None] + np.arange(kernel)[None, :]
        win = hp[:, idx]  # (b, out_len, kernel, n, c)
    win = win.transpose(0, 1, 3, 2, 4).reshape(b, out_len, n, kernel * c)
    return nx.matmul(win, weight)


def window_centers(length: int, kernel: int, stride: int) -> np.ndarray:
    _, left, starts = temporal_windows(length, kernel, stride)
    return np.clip(starts + kernel // 2 - left, 0, length - 1)


def se_block(x: Tensor, w1: Tensor, b1: Tensor, w2: Tensor, b2: Tensor) -> Tensor:
    """Squeeze-and-excitation over (batch, spatial, channel) features."""
    squeezed = x.mean(axis=1)
    gate = nx.sigmoid(nx.relu(squeezed @ w1 + b1) @ w2 + b2)
    return x * gate.reshape(gate.shape[0], 1, gate.shape[1])


def normalize_quats(q: Tensor) -> Tensor:
    norm = nx.sqrt((q * q).sum(axis=-1, keepdims=True))
    return q / norm


# ---------------------------------------------------------------------------
# the network


def _uniform(rng: np.random.Generator, fan_in: int, shape) -> np.ndarray:
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


@dataclass
class _Block:
    stride: int
    cin_v: int
    cin_e: int
    cout: int


class QGCN:
    def __init__(self, cfg: ModelConfig | None = None, topo: SkeletonTopology | None = None):
        self.cfg = cfg or ModelConfig()
        self.topo = topo if topo is not None else load_topology(self.cfg.topology)
        self.ops = build_operators(self.topo, norm_exponent=self.cfg.norm_exponent)
        inc = np.zeros((self.topo.n_bones, self.topo.n_joints))
        for b, (u, v) in enumerate(self.topo.bones):
            inc[b, v] += 1.0
            inc[b, u] -= 1.0
        self._bone_difference = inc  # child minus parent, used when there is no edge stream
        self.params: dict[str, Tensor] = {}
        self.bn: dict[str, BatchNormParams] = {}
        self.blocks: list[_Block] = []
        self._build()

    # -- construction --------------------------------------------------
    def _param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bn(self, name: str, n: int) -> BatchNormParams:
        p = BatchNormParams.create(n, name)
        self.params[p.scale.name] = p.scale
        self.params[p.shift.name] = p.shift
        self.bn[name] = p
        return p

    def _build(self):
        cfg, topo = self.cfg, self.topo
        rng = nx.philox(cfg.seed, 0)
        strides, chans = cfg.block_layout()
        kt = cfg.temporal_kernel
        cin_v = cin_e = 2
        for i, (s, cout) in enumerate(zip(strides, chans)):
            e_width = cin_e if cfg.use_edges else cin_v
            v_in = cin_v + (2 * e_width if cfg.use_directed else 0)
            self._param(f"block{i}.v_spatial", _uniform(rng, K * v_in, (K * v_in, cout)))
            self._param(f"block{i}.v_temporal", _uniform(rng, kt * cout, (kt * cout, cout)))
            self._bn(f"block{i}.v_bn", cout)
            if cin_v != cout:
                self._param(f"block{i}.v_res", _uniform(rng, cin_v, (cin_v, cout)))
            if cfg.use_edges:
                e_in = cin_e + (2 * cin_v if cfg.use_directed else 0)
                self._param(f"block{i}.e_spatial", _uniform(rng, K * e_in, (K * e_in, cout)))
                self._param(f"block{i}.e_temporal", _uniform(rng, kt * cout, (kt * cout, cout)))
                self._bn(f"block{i}.e_bn", cout)
                if cin_e != cout:
                    self._param(f"block{i}.e_res", _uniform(rng, cin_e, (cin_e, cout)))
            self.blocks.append(_Block(s, cin_v, cin_e, cout))
            cin_v = cin_e = cout
        c = chans[-1]
        r = max(c // cfg.se_reduction, 1)
        N, B = topo.n_joints, topo.n_bones
        for stream in ("v", "e") if cfg.use_edges else ("v",):
            self._param(f"se_{stream}.w1", _uniform(rng, c, (c, r)))
            self._param(f"se_{stream}.b1", np.zeros(r))
            self._param(f"se_{stream}.w2", _uniform(rng, r, (r, c)))
            self._param(f"se_{stream}.b2", np.zeros(c))
        self._param("pose_head.w", _uniform(rng, N * c, (N * c, N * 3 + 3)))
        self._param("pose_head.b", np.zeros(N * 3 + 3))
        if cfg.use_orientation_head:
            h = cfg.orient_hidden
            fin = B * c + N * 3
            self._param("orient_head.w1", _uniform(rng, fin, (fin, h)))
            self._param("orient_head.b1", np.zeros(h))
            self._bn("orient_head.bn", h)
            self._param("orient_head.w2", _uniform(rng, h, (h, B * 4)))
            self._param("orient_head.b2", np.zeros(B * 4))

    # -- parameters ----------------------------------------------------
    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def named_parameters(self) -> Iterator[tuple[str, Tensor]]:
        return iter(self.params.items())

    def n_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def state_arrays(self) -> dict[str, np.ndarray]:
        """Parameters and batch-norm running statistics as plain arrays."""
        out = {f"param/{k}": v.data for k, v in self.params.items()}
        for k, bn in self.bn.items():
            out[f"bn_mean/{k}"] = bn.stats.mean
            out[f"bn_var/{k}"] = bn.stats.var
        return out

    def load_state_arrays(self, arrays: dict[str, np.ndarray]) -> None:
        expected = set(self.state_arrays())
        missing = expected - set(arrays)
        if missing:
            raise ShapeMismatch(f"checkpoint lacks {sorted(missing)[:3]}...")
        for k, p in self.params.items():
            a = np.asarray(arrays[f"param/{k}"], dtype=np.float64)
            if a.shape != p.shape:
                raise ShapeMismatch(f"parameter {k}", a.shape, p.shape)
            p.data = a.copy()
        for k, bn in self.bn.items():
            bn.stats = RunningStats(np.array(arrays[f"bn_mean/{k}"], dtype=np.float64),
                                    np.array(arrays[f"bn_var/{k}"], dtype=np.float64))

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    # -- forward -------------------------------------------------------
    def _dropout(self, h: Tensor, mode: str, step: int, layer: int) -> Tensor:
        if mode != "train" or self.cfg.dropout == 0.0:
            return h
        return nx.dropout(h, self.cfg.dropout, nx.philox(self.cfg.seed, 1, layer, step))

    def _stream_tail(self, h: Tensor, inp: Tensor, i: int, tag: str, mode: str, step: int, layer: int) -> Tensor:
        blk = self.blocks[i]
        kt = self.cfg.temporal_kernel
        h = temporal_conv(h, self.params[f"block{i}.{tag}_temporal"], kt, blk.stride)
        h = self.bn[f"block{i}.{tag}_bn"](h, mode)
        h = self._dropout(nx.relu(h), mode, step, layer)
        t_in = inp.shape[1]
        centers = window_centers(t_in, kt, blk.stride)
        res = inp if blk.stride == 1 and h.shape[1] == t_in else inp[:, centers]
        key = f"block{i}.{tag}_res"
        if key in self.params:
            res = res @ self.params[key]
        return h + res

    def st_block(self, i: int, x: Tensor, e: Tensor | None, mode: str = "train", step: int = 0):
        cfg = self.cfg
        if cfg.use_edges:
            e_for_v = e
        elif cfg.use_directed:
            e_for_v = nx.matmul(self._bone_difference, x)
        else:
            e_for_v = None
        hv = vertex_spatial_conv(x, self.ops, e_for_v, self.params[f"block{i}.v_spatial"],
                                 cfg.use_directed, cfg.incidence_mode)
        x_out = self._stream_tail(hv, x, i, "v", mode, step, 2 * i)
        e_out = None
        if cfg.use_edges:
            he = edge_spatial_conv(e, self.ops, x, self.params[f"block{i}.e_spatial"],
                                   cfg.use_directed, cfg.incidence_mode)
            e_out = self._stream_tail(he, e, i, "e", mode, step, 2 * i + 1)
        return x_out, e_out

    def forward(self, pose2d, rot2d=None, mode: str = "train", step: int = 0) -> ModelOutput:
        cfg, topo = self.cfg, self.topo
        x = nx.as_tensor(pose2d)
        N, B, T = topo.n_joints, topo.n_bones, cfg.receptive_field
        if x.ndim != 4 or x.shape[2:] != (N, 2):
            raise ShapeMismatch("pose2d must be (batch, T, N, 2)", x.shape, (None, T, N, 2))
        if x.shape[1] != T:
            raise ShapeMismatch(f"input length must equal the receptive field {T}", x.shape)
        e = None
        if cfg.use_edges:
            if rot2d is None:
                raise ShapeMismatch("rot2d required when use_edges is on", ())
            e = nx.as_tensor(rot2d)
            if e.shape != x.shape[:2] + (B, 2):
                raise ShapeMismatch("rot2d must be (batch, T, B, 2)", e.shape, x.shape[:2] + (B, 2))
        for i in range(len(self.blocks)):
            x, e = self.st_block(i, x, e, mode, step)
        bsz = x.shape[0]
        c = x.shape[-1]
        p = self.params
        xv = se_block(x.reshape(bsz, N, c), p["se_v.w1"], p["se_v.b1"], p["se_v.w2"], p["se_v.b2"])
        out = xv.reshape(bsz, N * c) @ p["pose_head.w"] + p["pose_head.b"]
        coords = out[:, : N * 3].reshape(bsz, N, 3)
        root = out[:, N * 3 :]
        pose = coords - coords[:, topo.root : topo.root + 1, :]
        quats = None
        if cfg.use_orientation_head:
            ee = se_block(e.reshape(bsz, B, c), p["se_e.w1"], p["se_e.b1"], p["se_e.w2"], p["se_e.b2"])
            feats = nx.concat([ee.reshape(bsz, B * c), pose.reshape(bsz, N * 3)], axis=1)
            h = feats @ p["orient_head.w1"] + p["orient_head.b1"]
            h = nx.relu(self.bn["orient_head.bn"](h, mode))
            q = (h @ p["orient_head.w2"] + p["orient_head.b2"]).reshape(bsz, B, 4)
            quats = normalize_quats(q)
        return ModelOutput(pose=pose, root=root, quats=quats)

    __call__ = forward
